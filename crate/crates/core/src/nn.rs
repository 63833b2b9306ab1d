//! Dense feed-forward network: parameter storage, initialization schemes,
//! forward evaluation with trace capture, and the self-contained model
//! file format.
//!
//! All math is 64-bit: the accuracy thresholds downstream (1e-4 p.u.
//! voltage errors) sit too close to 32-bit accumulation noise.

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution as _, Normal};
use serde::{Deserialize, Serialize};

use crate::binio::{read_f64_vec, write_f64_slice};
use crate::error::FormatError;
use crate::sampling::Normalizer;

/// Elementwise activation of one layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Linear,
}

/// Rectifier. The derivative at exactly zero is defined as zero (the
/// activation is flat on the closed left half-line), fixed for
/// determinism.
pub fn relu(x: f64) -> f64 {
    x.max(0.0)
}

/// Indicator-of-positive derivative of [`relu`].
pub fn relu_derivative(z: f64) -> f64 {
    if z > 0.0 {
        1.0
    } else {
        0.0
    }
}

/// One affine layer and its activation.
#[derive(Debug, Clone)]
pub struct Layer {
    /// `(n_out, n_in)` weight matrix.
    pub weights: Array2<f64>,
    /// `n_out` bias vector.
    pub biases: Array1<f64>,
    pub activation: Activation,
}

/// A dense feed-forward stack. Data is feature-major: inputs and
/// activations are `(features, batch)` matrices, one sample per column.
#[derive(Debug, Clone)]
pub struct Network {
    pub layers: Vec<Layer>,
}

/// Weight initialization schemes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitScheme {
    /// Fan-in rule: `Var[w] = 2 / n_in`.
    He,
    /// Variance-balanced three-branch rule, chosen so both forward signal
    /// magnitudes and backpropagated gradient magnitudes stay level across
    /// the stack:
    /// first layer `√((2·n_in + n_out)/(n_in·n_out))`,
    /// middle layers `√((n_in + n_out)/(n_in·n_out))`,
    /// last layer `√((n_in + 2·n_out)/(n_in·n_out))`.
    VarianceBalanced,
}

/// Standard deviation of the Gaussian weight draw for layer `layer` (0-based)
/// of `n_layers` total, with the given fan-in/fan-out.
pub fn init_std(scheme: InitScheme, layer: usize, n_layers: usize, n_in: usize, n_out: usize) -> f64 {
    let (n_in, n_out) = (n_in as f64, n_out as f64);
    match scheme {
        InitScheme::He => (2.0 / n_in).sqrt(),
        InitScheme::VarianceBalanced => {
            let numerator = if layer == 0 {
                2.0 * n_in + n_out
            } else if layer + 1 == n_layers {
                n_in + 2.0 * n_out
            } else {
                n_in + n_out
            };
            (numerator / (n_in * n_out)).sqrt()
        }
    }
}

impl Network {
    /// Initialize a network of the given layer sizes. Weights are i.i.d.
    /// zero-mean Gaussians with the scheme's per-layer standard deviation,
    /// drawn row-major layer by layer from `rng`; biases start at zero.
    /// Hidden layers use ReLU; the output layer uses `output_activation`.
    pub fn init(
        sizes: &[usize],
        scheme: InitScheme,
        output_activation: Activation,
        rng: &mut impl Rng,
    ) -> Self {
        assert!(sizes.len() >= 2, "need at least input and output widths");
        let n_layers = sizes.len() - 1;
        let layers = (0..n_layers)
            .map(|l| {
                let (n_in, n_out) = (sizes[l], sizes[l + 1]);
                let std = init_std(scheme, l, n_layers, n_in, n_out);
                let dist = Normal::new(0.0, std).expect("std is finite");
                let weights = Array2::from_shape_simple_fn((n_out, n_in), || dist.sample(rng));
                Layer {
                    weights,
                    biases: Array1::zeros(n_out),
                    activation: if l + 1 == n_layers {
                        output_activation
                    } else {
                        Activation::Relu
                    },
                }
            })
            .collect();
        Self { layers }
    }

    /// `[n_input, hidden…, n_output]`.
    pub fn layer_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![self.layers[0].weights.ncols()];
        sizes.extend(self.layers.iter().map(|l| l.weights.nrows()));
        sizes
    }

    pub fn n_inputs(&self) -> usize {
        self.layers[0].weights.ncols()
    }

    pub fn n_outputs(&self) -> usize {
        self.layers.last().expect("nonempty").weights.nrows()
    }

    /// Forward evaluation of a `(n_inputs, batch)` matrix.
    pub fn forward(&self, x: &ArrayView2<f64>) -> Array2<f64> {
        let mut act = x.to_owned();
        for layer in &self.layers {
            act = layer.weights.dot(&act);
            act += &layer.biases.view().insert_axis(Axis(1));
            if layer.activation == Activation::Relu {
                act.mapv_inplace(relu);
            }
        }
        act
    }

    /// Forward evaluation that retains every pre-activation and activation
    /// for backpropagation. `post[0]` is the input; `pre[l]`/`post[l+1]`
    /// belong to layer `l`; the last `post` entry is the network output.
    pub fn forward_trace(&self, x: &ArrayView2<f64>) -> ForwardTrace {
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut post = Vec::with_capacity(self.layers.len() + 1);
        post.push(x.to_owned());
        for layer in &self.layers {
            let mut z = layer.weights.dot(post.last().expect("nonempty"));
            z += &layer.biases.view().insert_axis(Axis(1));
            pre.push(z.clone());
            if layer.activation == Activation::Relu {
                z.mapv_inplace(relu);
            }
            post.push(z);
        }
        ForwardTrace { pre, post }
    }
}

/// Intermediate values of one forward pass (see [`Network::forward_trace`]).
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub pre: Vec<Array2<f64>>,
    pub post: Vec<Array2<f64>>,
}

impl ForwardTrace {
    pub fn output(&self) -> &Array2<f64> {
        self.post.last().expect("nonempty")
    }
}

/// Model metadata stored in the file header.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ModelMeta {
    pub case_name: String,
    /// Training mode name ("M0"…"M6"), empty if not trained.
    pub mode: String,
    pub seed: u64,
}

/// A trained model bundled with its input/output normalizers, so
/// inference from raw per-unit injections is self-contained.
#[derive(Debug, Clone)]
pub struct Model {
    pub network: Network,
    pub x_norm: Normalizer,
    pub y_norm: Normalizer,
    pub meta: ModelMeta,
}

impl Model {
    /// Map raw injections (`(2·n_bus, batch)`: active over reactive rows)
    /// to raw voltage magnitudes and angles (`(2·n_bus, batch)`: V over θ).
    pub fn predict_raw(&self, x_raw: &ArrayView2<f64>) -> Array2<f64> {
        let x = self.x_norm.apply(x_raw);
        let y = self.network.forward(&x.view());
        self.y_norm.invert(&y.view())
    }
}

const MODEL_MAGIC: &[u8] = b"GFNET1\n";

#[derive(Serialize, Deserialize)]
struct ModelHeader {
    layer_sizes: Vec<usize>,
    activations: Vec<Activation>,
    meta: ModelMeta,
    x_norm: Normalizer,
    y_norm: Normalizer,
}

impl Model {
    /// Serialize: versioned magic, little-endian u64 header length, JSON
    /// header (shapes, activations, seeds, normalizer statistics), then
    /// all parameters as raw little-endian f64 — per layer, weights
    /// row-major then biases.
    pub fn save(&self, path: &Path) -> Result<(), FormatError> {
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        let header = ModelHeader {
            layer_sizes: self.network.layer_sizes(),
            activations: self.network.layers.iter().map(|l| l.activation).collect(),
            meta: self.meta.clone(),
            x_norm: self.x_norm.clone(),
            y_norm: self.y_norm.clone(),
        };
        let header_json = serde_json::to_vec(&header)?;
        w.write_all(MODEL_MAGIC)?;
        w.write_all(&(header_json.len() as u64).to_le_bytes())?;
        w.write_all(&header_json)?;
        for layer in &self.network.layers {
            write_f64_slice(&mut w, layer.weights.as_slice().expect("row-major"))?;
            write_f64_slice(&mut w, layer.biases.as_slice().expect("contiguous"))?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, FormatError> {
        let mut r = BufReader::new(std::fs::File::open(path)?);
        let mut magic = [0u8; 7];
        r.read_exact(&mut magic)?;
        if magic != MODEL_MAGIC {
            return Err(FormatError::BadMagic { expected: "GFNET1" });
        }
        let mut len_bytes = [0u8; 8];
        r.read_exact(&mut len_bytes)?;
        let header_len = u64::from_le_bytes(len_bytes) as usize;
        let mut header_json = vec![0u8; header_len];
        r.read_exact(&mut header_json)?;
        let header: ModelHeader = serde_json::from_slice(&header_json)?;

        let n_layers = header.layer_sizes.len().saturating_sub(1);
        let mut layers = Vec::with_capacity(n_layers);
        for l in 0..n_layers {
            let (n_in, n_out) = (header.layer_sizes[l], header.layer_sizes[l + 1]);
            let w = read_f64_vec(&mut r, n_out * n_in)?;
            let b = read_f64_vec(&mut r, n_out)?;
            layers.push(Layer {
                weights: Array2::from_shape_vec((n_out, n_in), w).expect("shape checked"),
                biases: Array1::from_vec(b),
                activation: header.activations[l],
            });
        }
        Ok(Self {
            network: Network { layers },
            x_norm: header.x_norm,
            y_norm: header.y_norm,
            meta: header.meta,
        })
    }
}
