//! A small fully-connected network with hand-written backpropagation.
//!
//! Hidden layers apply a smooth activation; the output layer is linear.
//! Every parameter update bumps a version counter so that a forward cache
//! cannot be reused against parameters it was not computed with.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

const MAGIC: &[u8; 8] = b"ALLOMLP\0";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum MlpError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("forward cache is from parameter version {cache}, parameters are at {params}")]
    StaleCache { cache: u64, params: u64 },
    #[error("non-finite parameter in layer {layer}")]
    NonFinite { layer: usize },
    #[error("bad checkpoint: {0}")]
    Checkpoint(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    #[default]
    Tanh,
    /// Identity; turns the network into a product of linear maps.
    Linear,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Linear => x,
        }
    }

    /// Derivative expressed through the activation output.
    fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - y * y,
            Activation::Linear => 1.0,
        }
    }

    fn code(self) -> u8 {
        match self {
            Activation::Tanh => 0,
            Activation::Linear => 1,
        }
    }

    fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(Activation::Tanh),
            1 => Some(Activation::Linear),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpShape {
    pub input: usize,
    pub hidden: Vec<usize>,
    pub output: usize,
    pub activation: Activation,
    pub bias: bool,
}

impl MlpShape {
    pub fn layer_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![self.input];
        sizes.extend(&self.hidden);
        sizes.push(self.output);
        sizes
    }
}

/// Weights are stored `out x in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    layers: Vec<Layer>,
    activation: Activation,
    bias: bool,
    version: u64,
}

/// Gradients with the same layout as [`MlpParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct MlpGradients {
    pub layers: Vec<Layer>,
}

impl MlpGradients {
    pub fn sq_norm(&self) -> f64 {
        self.layers
            .iter()
            .map(|l| l.weights.iter().chain(l.bias.iter()).map(|v| v * v).sum::<f64>())
            .sum()
    }
}

/// Activations retained by [`MlpParams::forward`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    version: u64,
    /// Input to every layer, the last entry being the input of the output layer.
    inputs: Vec<Array2<f64>>,
}

/// LeCun-normal weights (`std = 1/√fan_in`) and zero biases.
pub fn mlp_init(shape: &MlpShape, seed: u64) -> Result<MlpParams, MlpError> {
    let sizes = shape.layer_sizes();
    if sizes.contains(&0) {
        return Err(MlpError::Shape(format!("layer sizes must be positive, got {sizes:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layers = sizes
        .windows(2)
        .map(|w| {
            let (fan_in, fan_out) = (w[0], w[1]);
            let std = 1.0 / (fan_in as f64).sqrt();
            let weights = Array2::from_shape_simple_fn((fan_out, fan_in), || {
                let z: f64 = StandardNormal.sample(&mut rng);
                std * z
            });
            Layer { weights, bias: Array1::zeros(fan_out) }
        })
        .collect();
    Ok(MlpParams { layers, activation: shape.activation, bias: shape.bias, version: 0 })
}

impl MlpParams {
    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn has_bias(&self) -> bool {
        self.bias
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weights.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("at least one layer").weights.nrows()
    }

    pub fn shape(&self) -> MlpShape {
        MlpShape {
            input: self.input_dim(),
            hidden: self.layers[..self.layers.len() - 1].iter().map(|l| l.weights.nrows()).collect(),
            output: self.output_dim(),
            activation: self.activation,
            bias: self.bias,
        }
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + if self.bias { l.bias.len() } else { 0 }).sum()
    }

    /// Mutable access for tests and checkpoint loading; bumps the version.
    pub fn layers_mut(&mut self) -> &mut [Layer] {
        self.version += 1;
        &mut self.layers
    }

    pub fn check_finite(&self) -> Result<(), MlpError> {
        for (i, l) in self.layers.iter().enumerate() {
            if !l.weights.iter().chain(l.bias.iter()).all(|v| v.is_finite()) {
                return Err(MlpError::NonFinite { layer: i });
            }
        }
        Ok(())
    }

    /// Batched forward pass; `features` is `batch x input`.
    pub fn forward(&self, features: ArrayView2<'_, f64>) -> Result<(Array2<f64>, ForwardCache), MlpError> {
        if features.ncols() != self.input_dim() {
            return Err(MlpError::Shape(format!(
                "features have {} columns, network expects {}",
                features.ncols(),
                self.input_dim()
            )));
        }
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut h = features.to_owned();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = h.dot(&layer.weights.t());
            if self.bias {
                z += &layer.bias;
            }
            inputs.push(h);
            if i < last {
                let act = self.activation;
                z.mapv_inplace(|v| act.apply(v));
            }
            h = z;
        }
        Ok((h, ForwardCache { version: self.version, inputs }))
    }

    pub fn predict(&self, features: ArrayView2<'_, f64>) -> Result<Array2<f64>, MlpError> {
        self.forward(features).map(|(out, _)| out)
    }

    /// Gradient of `Σ cotangent ⊙ outputs` with respect to every parameter.
    pub fn backward(&self, cache: &ForwardCache, cotangent: ArrayView2<'_, f64>) -> Result<MlpGradients, MlpError> {
        if cache.version != self.version {
            return Err(MlpError::StaleCache { cache: cache.version, params: self.version });
        }
        let batch = cache.inputs[0].nrows();
        if cotangent.dim() != (batch, self.output_dim()) {
            return Err(MlpError::Shape(format!(
                "cotangent {:?}, expected ({batch}, {})",
                cotangent.dim(),
                self.output_dim()
            )));
        }
        let mut grads = Vec::with_capacity(self.layers.len());
        let mut delta = cotangent.to_owned();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let input = &cache.inputs[i];
            let weights = delta.t().dot(input);
            let bias = if self.bias { delta.sum_axis(Axis(0)) } else { Array1::zeros(layer.bias.len()) };
            grads.push(Layer { weights, bias });
            if i > 0 {
                let mut back = delta.dot(&layer.weights);
                let act = self.activation;
                // `input` is the activation output of layer i-1.
                back.zip_mut_with(input, |b, &y| *b *= act.derivative_from_output(y));
                delta = back;
            }
        }
        grads.reverse();
        Ok(MlpGradients { layers: grads })
    }

    /// `θ ← θ - lr · grad`.
    pub fn sgd_step(&mut self, grads: &MlpGradients, lr: f64) {
        for (layer, g) in self.layers.iter_mut().zip(&grads.layers) {
            layer.weights.scaled_add(-lr, &g.weights);
            if self.bias {
                layer.bias.scaled_add(-lr, &g.bias);
            }
        }
        self.version += 1;
    }

    /// Relabel outputs: new output `perm[i]` is old output `i`.
    pub fn permute_outputs(&mut self, perm: &[usize]) -> Result<(), MlpError> {
        let d = self.output_dim();
        let mut seen = vec![false; d];
        if perm.len() != d || perm.iter().any(|&p| p >= d || std::mem::replace(&mut seen[p], true)) {
            return Err(MlpError::Shape(format!("{perm:?} is not a permutation of 0..{d}")));
        }
        let last = self.layers.last_mut().expect("at least one layer");
        let old = last.clone();
        for (i, &p) in perm.iter().enumerate() {
            last.weights.row_mut(p).assign(&old.weights.row(i));
            last.bias[p] = old.bias[i];
        }
        self.version += 1;
        Ok(())
    }

    /// Binary checkpoint: magic, format version, activation, bias flag,
    /// layer count, `(out, in)` per layer, then every layer's weights
    /// (row-major) followed by its bias, all little-endian `f64`.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.push(self.activation.code());
        out.push(u8::from(self.bias));
        out.extend_from_slice(&(self.layers.len() as u32).to_le_bytes());
        for l in &self.layers {
            out.extend_from_slice(&(l.weights.nrows() as u32).to_le_bytes());
            out.extend_from_slice(&(l.weights.ncols() as u32).to_le_bytes());
        }
        for l in &self.layers {
            for v in l.weights.iter().chain(l.bias.iter()) {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, MlpError> {
        let mut r = bytes;
        let bad = |m: &str| MlpError::Checkpoint(m.to_string());
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|_| bad("truncated header"))?;
        if &magic != MAGIC {
            return Err(bad("wrong magic"));
        }
        let version = read_u32(&mut r)?;
        if version != FORMAT_VERSION {
            return Err(MlpError::Checkpoint(format!("unsupported format version {version}")));
        }
        let mut flags = [0u8; 2];
        r.read_exact(&mut flags).map_err(|_| bad("truncated header"))?;
        let activation = Activation::from_code(flags[0]).ok_or_else(|| bad("unknown activation"))?;
        let bias = flags[1] != 0;
        let n_layers = read_u32(&mut r)? as usize;
        if n_layers == 0 {
            return Err(bad("no layers"));
        }
        let mut shapes = Vec::with_capacity(n_layers);
        for _ in 0..n_layers {
            shapes.push((read_u32(&mut r)? as usize, read_u32(&mut r)? as usize));
        }
        if shapes.windows(2).any(|w| w[0].0 != w[1].1) {
            return Err(bad("layer shapes do not chain"));
        }
        let mut layers = Vec::with_capacity(n_layers);
        for &(rows, cols) in &shapes {
            let weights = Array2::from_shape_vec((rows, cols), read_f64s(&mut r, rows * cols)?)
                .map_err(|e| MlpError::Checkpoint(e.to_string()))?;
            let bias = Array1::from(read_f64s(&mut r, rows)?);
            layers.push(Layer { weights, bias });
        }
        if !r.is_empty() {
            return Err(bad("trailing bytes"));
        }
        Ok(MlpParams { layers, activation, bias, version: 0 })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), MlpError> {
        let mut f = fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, MlpError> {
        Self::from_bytes(&fs::read(path)?)
    }
}

fn read_u32(r: &mut &[u8]) -> Result<u32, MlpError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|_| MlpError::Checkpoint("truncated header".into()))?;
    Ok(u32::from_le_bytes(b))
}

fn read_f64s(r: &mut &[u8], n: usize) -> Result<Vec<f64>, MlpError> {
    let mut out = Vec::with_capacity(n);
    let mut b = [0u8; 8];
    for _ in 0..n {
        r.read_exact(&mut b).map_err(|_| MlpError::Checkpoint("truncated payload".into()))?;
        out.push(f64::from_le_bytes(b));
    }
    Ok(out)
}
