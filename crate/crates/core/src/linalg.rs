//! Small fixed-size vector and matrix helpers for 2-D states.
//!
//! Agent states are 4-vectors `[px, py, vx, vy]`; covariances are 4x4.
//! Everything here is plain arrays, no allocation.

pub type Vec2 = [f64; 2];
pub type Vec4 = [f64; 4];
pub type Mat2 = [[f64; 2]; 2];
pub type Mat4 = [[f64; 4]; 4];

pub fn sub2(a: Vec2, b: Vec2) -> Vec2 {
    [a[0] - b[0], a[1] - b[1]]
}

pub fn norm2(v: Vec2) -> f64 {
    v[0].hypot(v[1])
}

/// Euclidean distance between two planar points.
pub fn dist2(a: Vec2, b: Vec2) -> f64 {
    norm2(sub2(a, b))
}

pub fn mat4_from_diag(d: Vec4) -> Mat4 {
    let mut m = [[0.0; 4]; 4];
    for i in 0..4 {
        m[i][i] = d[i];
    }
    m
}

pub fn mat4_max_abs_asymmetry(m: &Mat4) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..4 {
        for j in (i + 1)..4 {
            worst = worst.max((m[i][j] - m[j][i]).abs());
        }
    }
    worst
}

/// Lower Cholesky factor of a symmetric positive semi-definite matrix.
///
/// Zero pivots are allowed (point-mass covariances); returns `None` when the
/// matrix is indefinite or asymmetric beyond `tol`.
pub fn cholesky_psd(m: &Mat4, tol: f64) -> Option<Mat4> {
    if mat4_max_abs_asymmetry(m) > tol.max(1e-12) {
        return None;
    }
    let mut l = [[0.0; 4]; 4];
    for i in 0..4 {
        for j in 0..=i {
            let mut s = m[i][j];
            for k in 0..j {
                s -= l[i][k] * l[j][k];
            }
            if i == j {
                if s < -tol {
                    return None;
                }
                l[i][i] = s.max(0.0).sqrt();
            } else if l[j][j] > 0.0 {
                l[i][j] = s / l[j][j];
            } else {
                // rank-deficient column: the residual must vanish for PSD
                if s.abs() > tol.max(1e-9) {
                    return None;
                }
                l[i][j] = 0.0;
            }
        }
    }
    Some(l)
}

/// y = L x for a lower-triangular 4x4 factor.
pub fn lower_tri_mul(l: &Mat4, x: Vec4) -> Vec4 {
    let mut y = [0.0; 4];
    for i in 0..4 {
        let mut s = 0.0;
        for j in 0..=i {
            s += l[i][j] * x[j];
        }
        y[i] = s;
    }
    y
}

pub fn mat2_det(m: &Mat2) -> f64 {
    m[0][0] * m[1][1] - m[0][1] * m[1][0]
}

pub fn mat2_inverse(m: &Mat2) -> Option<Mat2> {
    let det = mat2_det(m);
    if det == 0.0 || !det.is_finite() {
        return None;
    }
    Some([
        [m[1][1] / det, -m[0][1] / det],
        [-m[1][0] / det, m[0][0] / det],
    ])
}

/// Eigenvalues of a symmetric 2x2 matrix, ascending.
pub fn mat2_sym_eigvals(m: &Mat2) -> (f64, f64) {
    let tr = m[0][0] + m[1][1];
    let det = mat2_det(m);
    let disc = (tr * tr / 4.0 - det).max(0.0).sqrt();
    (tr / 2.0 - disc, tr / 2.0 + disc)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cholesky_recovers_diagonal() {
        let m = mat4_from_diag([10.0, 10.0, 0.01, 0.01]);
        let l = cholesky_psd(&m, 1e-12).unwrap();
        for i in 0..4 {
            assert!((l[i][i] - m[i][i].sqrt()).abs() < 1e-14);
        }
    }

    #[test]
    fn cholesky_handles_zero_matrix() {
        let l = cholesky_psd(&[[0.0; 4]; 4], 1e-12).unwrap();
        assert_eq!(l, [[0.0; 4]; 4]);
    }

    #[test]
    fn cholesky_rejects_indefinite() {
        let mut m = mat4_from_diag([1.0, -1.0, 1.0, 1.0]);
        assert!(cholesky_psd(&m, 1e-9).is_none());
        m = mat4_from_diag([1.0, 1.0, 1.0, 1.0]);
        m[0][1] = 0.5;
        // asymmetric
        assert!(cholesky_psd(&m, 1e-9).is_none());
    }

    #[test]
    fn cholesky_reconstructs_dense_psd() {
        // A = B B^T is PSD by construction.
        let b = [
            [1.0, 0.0, 0.0, 0.0],
            [0.4, 0.9, 0.0, 0.0],
            [-0.2, 0.3, 0.5, 0.0],
            [0.1, -0.1, 0.2, 0.05],
        ];
        let mut a = [[0.0; 4]; 4];
        for i in 0..4 {
            for j in 0..4 {
                for k in 0..4 {
                    a[i][j] += b[i][k] * b[j][k];
                }
            }
        }
        let l = cholesky_psd(&a, 1e-12).unwrap();
        let mut r = [[0.0; 4]; 4];
        for i in 0..4 {
            for j in 0..4 {
                for k in 0..4 {
                    r[i][j] += l[i][k] * l[j][k];
                }
            }
        }
        for i in 0..4 {
            for j in 0..4 {
                assert!((r[i][j] - a[i][j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn mat2_inverse_roundtrip() {
        let m = [[2.0, 0.3], [0.3, 0.5]];
        let inv = mat2_inverse(&m).unwrap();
        let id00 = m[0][0] * inv[0][0] + m[0][1] * inv[1][0];
        let id01 = m[0][0] * inv[0][1] + m[0][1] * inv[1][1];
        assert!((id00 - 1.0).abs() < 1e-14);
        assert!(id01.abs() < 1e-14);
    }

    #[test]
    fn eigvals_of_diag() {
        let (lo, hi) = mat2_sym_eigvals(&[[0.5, 0.0], [0.0, 2.0]]);
        assert!((lo - 0.5).abs() < 1e-14);
        assert!((hi - 2.0).abs() < 1e-14);
    }
}
