//! Dense multilayer perceptrons with leaky-ReLU hidden units.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::math;
use super::tape::{NodeRef, ParamId, Tape};
use super::NeuralError;

/// Negative slope of the leaky rectifier.
pub const LEAKY_SLOPE: f64 = 0.01;

/// Activation applied after the last affine layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputActivation {
    Identity,
    Sigmoid,
    Relu,
    SoftplusPositive,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    pub rows: usize,
    pub cols: usize,
    /// Row-major `rows x cols` weight matrix.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    layers: Vec<DenseLayer>,
    output: OutputActivation,
}

impl Mlp {
    /// Build an MLP with the given widths (`[input, hidden..., output]`).
    /// Weights are uniform in +-sqrt(6 / (fan_in + fan_out)), biases zero.
    pub fn new<R: Rng>(widths: &[usize], output: OutputActivation, rng: &mut R) -> Self {
        assert!(widths.len() >= 2, "an MLP needs at least input and output widths");
        assert!(widths.iter().all(|&w| w > 0), "layer widths must be positive");
        let mut layers = Vec::with_capacity(widths.len() - 1);
        for pair in widths.windows(2) {
            let (cols, rows) = (pair[0], pair[1]);
            let bound = (6.0 / (cols + rows) as f64).sqrt();
            let weights = (0..rows * cols).map(|_| rng.random_range(-bound..bound)).collect();
            layers.push(DenseLayer { rows, cols, weights, bias: vec![0.0; rows] });
        }
        Mlp { layers, output }
    }

    /// Assemble from explicit layers; widths must chain.
    pub fn from_layers(layers: Vec<DenseLayer>, output: OutputActivation) -> Self {
        assert!(!layers.is_empty());
        for pair in layers.windows(2) {
            assert_eq!(pair[0].rows, pair[1].cols, "layer widths must chain");
        }
        for layer in &layers {
            assert_eq!(layer.weights.len(), layer.rows * layer.cols);
            assert_eq!(layer.bias.len(), layer.rows);
        }
        Mlp { layers, output }
    }

    pub fn output_activation(&self) -> OutputActivation {
        self.output
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub fn input_width(&self) -> usize {
        self.layers[0].cols
    }

    pub fn output_width(&self) -> usize {
        self.layers.last().unwrap().rows
    }

    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.input_width()];
        w.extend(self.layers.iter().map(|l| l.rows));
        w
    }

    /// Multiply the first layer's columns by per-feature factors; used to
    /// precondition raw-scale inputs at initialization time.
    pub fn scale_input_columns(&mut self, factors: &[f64]) {
        let layer = &mut self.layers[0];
        assert_eq!(factors.len(), layer.cols, "one factor per input feature");
        for r in 0..layer.rows {
            for (c, f) in factors.iter().enumerate() {
                layer.weights[r * layer.cols + c] *= f;
            }
        }
    }

    /// Multiply the last layer's weights and bias by a gain.
    pub fn scale_output_layer(&mut self, gain: f64) {
        let layer = self.layers.last_mut().unwrap();
        for w in &mut layer.weights {
            *w *= gain;
        }
        for b in &mut layer.bias {
            *b *= gain;
        }
    }

    /// Zero the last layer's weights and pin its bias, forcing a constant
    /// pre-activation regardless of input.
    pub fn pin_output(&mut self, bias_value: f64) {
        let layer = self.layers.last_mut().unwrap();
        layer.weights.iter_mut().for_each(|w| *w = 0.0);
        layer.bias.iter_mut().for_each(|b| *b = bias_value);
    }

    pub fn num_param_tensors(&self) -> usize {
        2 * self.layers.len()
    }

    /// Parameter tensors in canonical order: layer 0 weights, layer 0 bias,
    /// layer 1 weights, ...
    pub fn param_tensor(&self, idx: usize) -> &[f64] {
        let layer = &self.layers[idx / 2];
        if idx % 2 == 0 {
            &layer.weights
        } else {
            &layer.bias
        }
    }

    pub fn param_tensor_mut(&mut self, idx: usize) -> &mut [f64] {
        let layer = &mut self.layers[idx / 2];
        if idx % 2 == 0 {
            &mut layer.weights
        } else {
            &mut layer.bias
        }
    }

    /// Plain forward pass: affine, leaky-ReLU on hidden layers, output head.
    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>, NeuralError> {
        if input.len() != self.input_width() {
            return Err(NeuralError::ShapeMismatch(format!(
                "input width {} != expected {}",
                input.len(),
                self.input_width()
            )));
        }
        let last = self.layers.len() - 1;
        let mut h = input.to_vec();
        for (li, layer) in self.layers.iter().enumerate() {
            let mut z = math::matvec(&layer.weights, &h, layer.rows, layer.cols);
            for (zi, b) in z.iter_mut().zip(&layer.bias) {
                *zi += b;
            }
            h = if li < last {
                z.iter().map(|&v| math::leaky_relu(v)).collect()
            } else {
                match self.output {
                    OutputActivation::Identity => z,
                    OutputActivation::Sigmoid => z.iter().map(|&v| math::sigmoid(v)).collect(),
                    OutputActivation::Relu => z.iter().map(|&v| math::relu(v)).collect(),
                    OutputActivation::SoftplusPositive => {
                        z.iter().map(|&v| math::softplus(v)).collect()
                    }
                }
            };
        }
        Ok(h)
    }

    /// Forward pass recorded on a tape. Parameter tensors register as
    /// `ParamId(param_base + i)` following the canonical order.
    pub fn forward_tape(
        &self,
        tape: &mut Tape,
        input: NodeRef,
        param_base: usize,
    ) -> Result<NodeRef, NeuralError> {
        if tape.value(input).len() != self.input_width() {
            return Err(NeuralError::ShapeMismatch(format!(
                "input width {} != expected {}",
                tape.value(input).len(),
                self.input_width()
            )));
        }
        let last = self.layers.len() - 1;
        let mut h = input;
        for (li, layer) in self.layers.iter().enumerate() {
            let w = tape.param(ParamId(param_base + 2 * li), &layer.weights);
            let b = tape.param(ParamId(param_base + 2 * li + 1), &layer.bias);
            let z = tape.matvec(w, h, layer.rows, layer.cols);
            let zb = tape.add(z, b);
            h = if li < last {
                tape.leaky_relu(zb)
            } else {
                match self.output {
                    OutputActivation::Identity => zb,
                    OutputActivation::Sigmoid => tape.sigmoid(zb),
                    OutputActivation::Relu => tape.relu(zb),
                    OutputActivation::SoftplusPositive => tape.softplus(zb),
                }
            };
        }
        Ok(h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{StreamPurpose, StreamRoot};

    fn rng(tag: u64) -> rand_chacha::ChaCha12Rng {
        StreamRoot(tag).stream(StreamPurpose::ParamInit, &[0])
    }

    #[test]
    fn zero_network_identity_head_is_zero() {
        let mut net = Mlp::new(&[3, 4, 2], OutputActivation::Identity, &mut rng(0));
        for i in 0..net.num_param_tensors() {
            net.param_tensor_mut(i).iter_mut().for_each(|p| *p = 0.0);
        }
        let out = net.forward(&[1.0, -2.0, 0.5]).unwrap();
        assert_eq!(out, vec![0.0, 0.0]);
    }

    #[test]
    fn leaky_relu_negative_slope() {
        assert_eq!(math::leaky_relu(-1.0), -0.01);
        assert_eq!(math::leaky_relu(2.0), 2.0);
    }

    #[test]
    fn sigmoid_symmetry_point() {
        let mut net = Mlp::new(&[2, 3, 1], OutputActivation::Sigmoid, &mut rng(1));
        net.pin_output(0.0);
        let out = net.forward(&[0.7, -0.3]).unwrap();
        assert_eq!(out, vec![0.5]);
    }

    #[test]
    fn wrong_input_width_rejected() {
        let net = Mlp::new(&[3, 2], OutputActivation::Identity, &mut rng(2));
        assert!(matches!(net.forward(&[1.0]), Err(NeuralError::ShapeMismatch(_))));
    }

    #[test]
    fn tape_forward_matches_plain_forward_bitwise() {
        let net = Mlp::new(&[5, 8, 3], OutputActivation::Relu, &mut rng(3));
        let input = vec![0.2, -1.3, 0.8, 2.1, -0.4];
        let plain = net.forward(&input).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(input);
        let y = net.forward_tape(&mut tape, x, 0).unwrap();
        assert_eq!(tape.value(y), plain.as_slice());
    }

    #[test]
    fn mlp_gradients_match_finite_differences() {
        let net = Mlp::new(&[3, 5, 2], OutputActivation::Sigmoid, &mut rng(4));
        let input = vec![0.31, -0.77, 1.23];
        let targets = vec![0.2, 0.8];

        let loss_of = |net: &Mlp| -> f64 {
            let out = net.forward(&input).unwrap();
            out.iter().zip(&targets).map(|(o, t)| (o - t) * (o - t)).sum()
        };

        let mut tape = Tape::new();
        let x = tape.constant(input.clone());
        let y = net.forward_tape(&mut tape, x, 0).unwrap();
        let t = tape.constant(targets.clone());
        let d = tape.sub(y, t);
        let sq = tape.mul(d, d);
        let loss = tape.sum(sq);
        assert!((tape.scalar_value(loss) - loss_of(&net)).abs() < 1e-15);
        let grads = tape.backward(loss).unwrap();

        let step = 1e-5;
        for tensor in 0..net.num_param_tensors() {
            let analytic = grads.get(ParamId(tensor)).map(|g| g.to_vec()).unwrap_or_default();
            for pi in 0..net.param_tensor(tensor).len() {
                let mut plus = net.clone();
                plus.param_tensor_mut(tensor)[pi] += step;
                let mut minus = net.clone();
                minus.param_tensor_mut(tensor)[pi] -= step;
                let fd = (loss_of(&plus) - loss_of(&minus)) / (2.0 * step);
                let got = analytic.get(pi).copied().unwrap_or(0.0);
                let denom = fd.abs().max(got.abs()).max(1e-8);
                assert!(
                    (fd - got).abs() / denom < 1e-4,
                    "tensor {tensor} param {pi}: analytic {got} vs fd {fd}"
                );
            }
        }
    }

    #[test]
    fn serde_roundtrip() {
        let net = Mlp::new(&[4, 6, 2], OutputActivation::SoftplusPositive, &mut rng(5));
        let json = serde_json::to_string(&net).unwrap();
        let back: Mlp = serde_json::from_str(&json).unwrap();
        assert_eq!(net, back);
    }
}
