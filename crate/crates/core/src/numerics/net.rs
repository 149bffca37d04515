use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use serde::{Deserialize, Serialize};

use super::matrix::{matvec, Matrix};
use super::rng::Rng;
use super::tape::{GradTape, ParamKey, Var};
use crate::error::{input_err, Error, Result};

pub const WEIGHT_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
    Identity,
}

impl Activation {
    #[inline]
    pub fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Tanh => v.tanh(),
            Activation::Relu => v.max(0.0),
            Activation::Identity => v,
        }
    }
}

/// One affine map followed by an activation. `weight` is `out × in`.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseLayer {
    pub weight: Matrix,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

/// A fully-connected network. Inference borrows it immutably, so a frozen
/// net can be shared across workers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "DenseNetFile", into = "DenseNetFile")]
pub struct DenseNet {
    layers: Vec<DenseLayer>,
}

impl DenseNet {
    /// Gaussian initialization with variance `1 / fan_in`; biases start at
    /// zero.
    pub fn new(sizes: &[usize], activations: &[Activation], rng: &mut Rng) -> Result<Self> {
        let mut net = Self::zeros(sizes, activations)?;
        for layer in &mut net.layers {
            let std = 1.0 / (layer.weight.cols() as f64).sqrt();
            for w in layer.weight.data_mut() {
                *w = std * rng.gaussian();
            }
        }
        Ok(net)
    }

    pub fn zeros(sizes: &[usize], activations: &[Activation]) -> Result<Self> {
        if sizes.len() < 2 || activations.len() != sizes.len() - 1 {
            return input_err(format!(
                "{} layer sizes need {} activations, got {}",
                sizes.len(),
                sizes.len().saturating_sub(1),
                activations.len()
            ));
        }
        if sizes.contains(&0) {
            return input_err("layer sizes must be positive");
        }
        let layers = sizes
            .windows(2)
            .zip(activations)
            .map(|(w, &activation)| DenseLayer {
                weight: Matrix::zeros(w[1], w[0]),
                bias: vec![0.0; w[1]],
                activation,
            })
            .collect();
        Ok(Self { layers })
    }

    pub fn from_layers(layers: Vec<DenseLayer>) -> Result<Self> {
        if layers.is_empty() {
            return input_err("network needs at least one layer");
        }
        for (i, l) in layers.iter().enumerate() {
            if l.bias.len() != l.weight.rows() {
                return input_err(format!("layer {i}: bias length != output size"));
            }
            if i > 0 && layers[i - 1].weight.rows() != l.weight.cols() {
                return input_err(format!("layer {i}: input size does not match previous output"));
            }
        }
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [DenseLayer] {
        &mut self.layers
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![self.input_size()];
        sizes.extend(self.layers.iter().map(|l| l.weight.rows()));
        sizes
    }

    pub fn input_size(&self) -> usize {
        self.layers[0].weight.cols()
    }

    pub fn output_size(&self) -> usize {
        self.layers[self.layers.len() - 1].weight.rows()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.data().len() + l.bias.len()).sum()
    }

    /// Multiplies the last layer's weights and bias by `c`.
    pub fn scale_output_layer(&mut self, c: f64) {
        let last = self.layers.len() - 1;
        let layer = &mut self.layers[last];
        layer.weight.data_mut().iter_mut().for_each(|w| *w *= c);
        layer.bias.iter_mut().for_each(|b| *b *= c);
    }

    /// Single-vector inference. With a tape, the pass is also recorded
    /// (as a one-row batch under network tag 0) so that
    /// [`GradTape::backward`] can follow.
    pub fn forward(&self, input: &[f64], tape: Option<&mut GradTape>) -> Result<Vec<f64>> {
        if input.len() != self.input_size() {
            return input_err(format!(
                "input length {} != network input size {}",
                input.len(),
                self.input_size()
            ));
        }
        if let Some(tape) = tape {
            let x = tape.constant(Matrix::row_vector(input));
            let y = self.record(tape, x, 0)?;
            return Ok(tape.value(y).data().to_vec());
        }
        let mut h = input.to_vec();
        for layer in &self.layers {
            let mut next = matvec(&layer.weight, &h)?;
            for (v, b) in next.iter_mut().zip(&layer.bias) {
                *v = layer.activation.apply(*v + b);
            }
            h = next;
        }
        Ok(h)
    }

    /// Row-batched inference: every row of `x` is one input.
    pub fn forward_batch(&self, x: &Matrix) -> Result<Matrix> {
        if x.cols() != self.input_size() {
            return input_err(format!(
                "batch width {} != network input size {}",
                x.cols(),
                self.input_size()
            ));
        }
        let mut h = x.clone();
        for layer in &self.layers {
            let mut next = h.matmul_t(&layer.weight)?;
            for r in 0..next.rows() {
                for (v, b) in next.row_mut(r).iter_mut().zip(&layer.bias) {
                    *v = layer.activation.apply(*v + b);
                }
            }
            h = next;
        }
        Ok(h)
    }

    /// Records a batched pass over tape value `x`, registering parameters
    /// under network tag `net`.
    pub fn record(&self, tape: &mut GradTape, x: Var, net: u32) -> Result<Var> {
        if tape.value(x).cols() != self.input_size() {
            return input_err(format!(
                "recorded input width {} != network input size {}",
                tape.value(x).cols(),
                self.input_size()
            ));
        }
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            let w = tape.param(ParamKey::weight(net, i as u32), layer.weight.clone());
            let b = tape.param(ParamKey::bias(net, i as u32), Matrix::row_vector(&layer.bias));
            let a = tape.matmul_t(h, w)?;
            let a = tape.add_row(a, b)?;
            h = match layer.activation {
                Activation::Tanh => tape.tanh(a),
                Activation::Relu => tape.relu(a),
                Activation::Identity => a,
            };
        }
        Ok(h)
    }

    /// Visits every parameter slice with its key under tag `net`.
    pub fn visit_params_mut(&mut self, net: u32, f: &mut dyn FnMut(ParamKey, &mut [f64])) {
        for (i, layer) in self.layers.iter_mut().enumerate() {
            f(ParamKey::weight(net, i as u32), layer.weight.data_mut());
            f(ParamKey::bias(net, i as u32), &mut layer.bias);
        }
    }

    pub fn visit_params(&self, net: u32, f: &mut dyn FnMut(ParamKey, &[f64])) {
        for (i, layer) in self.layers.iter().enumerate() {
            f(ParamKey::weight(net, i as u32), layer.weight.data());
            f(ParamKey::bias(net, i as u32), &layer.bias);
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

/// On-disk form of a [`DenseNet`]: float blobs are little-endian `f64`,
/// base64-encoded.
#[derive(Serialize, Deserialize)]
struct DenseNetFile {
    format_version: u32,
    layer_sizes: Vec<usize>,
    activations: Vec<Activation>,
    weights: Vec<String>,
    biases: Vec<String>,
}

pub(crate) fn encode_f64s(v: &[f64]) -> String {
    let bytes: Vec<u8> = v.iter().flat_map(|x| x.to_le_bytes()).collect();
    B64.encode(bytes)
}

pub(crate) fn decode_f64s(s: &str) -> Result<Vec<f64>> {
    let bytes = B64
        .decode(s)
        .map_err(|e| Error::RejectedInput(format!("bad base64 blob: {e}")))?;
    if bytes.len() % 8 != 0 {
        return input_err("float blob length is not a multiple of 8");
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect())
}

impl From<DenseNet> for DenseNetFile {
    fn from(net: DenseNet) -> Self {
        Self {
            format_version: WEIGHT_FORMAT_VERSION,
            layer_sizes: net.sizes(),
            activations: net.layers.iter().map(|l| l.activation).collect(),
            weights: net.layers.iter().map(|l| encode_f64s(l.weight.data())).collect(),
            biases: net.layers.iter().map(|l| encode_f64s(&l.bias)).collect(),
        }
    }
}

impl TryFrom<DenseNetFile> for DenseNet {
    type Error = Error;

    fn try_from(f: DenseNetFile) -> Result<Self> {
        if f.format_version != WEIGHT_FORMAT_VERSION {
            return input_err(format!("unsupported format_version {}", f.format_version));
        }
        let n = f.layer_sizes.len().saturating_sub(1);
        if n == 0 || f.activations.len() != n || f.weights.len() != n || f.biases.len() != n {
            return input_err("inconsistent layer counts in weight file");
        }
        let layers = (0..n)
            .map(|i| {
                Ok(DenseLayer {
                    weight: Matrix::from_vec(
                        f.layer_sizes[i + 1],
                        f.layer_sizes[i],
                        decode_f64s(&f.weights[i])?,
                    )?,
                    bias: {
                        let b = decode_f64s(&f.biases[i])?;
                        if b.len() != f.layer_sizes[i + 1] {
                            return input_err(format!("layer {i}: bias blob has wrong length"));
                        }
                        b
                    },
                    activation: f.activations[i],
                })
            })
            .collect::<Result<Vec<_>>>()?;
        DenseNet::from_layers(layers)
    }
}
