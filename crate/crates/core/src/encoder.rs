//! Fully connected ReLU encoder `f(x; ω) = scale · φ(W_L φ(… φ(W_1 x)))`.
//!
//! Parameters are flattened layer by layer (`W_1`, then `W_2`, …, `W_L`), each
//! matrix row-major. Every gradient in this module uses that ordering.
//!
//! The ReLU derivative is taken as `1[z ≥ 0]`. With the symmetric
//! initialization the output pre-activations of duplicated-half inputs are
//! exactly zero, so a zero derivative there would leave every parameter
//! gradient at zero and the network could never leave `ω₀`.

use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::linalg::{self, Matrix};
use crate::sigmoid;

const WEIGHTS_MAGIC: &[u8; 8] = b"CBENCW01";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub input_dim: usize,
    pub width: usize,
    pub depth: usize,
    pub output_dim: usize,
    /// Output multiplier, `√width` unless overridden.
    pub scale: f64,
    pub seed: u64,
}

impl EncoderConfig {
    pub fn new(input_dim: usize, width: usize, depth: usize, output_dim: usize, seed: u64) -> Self {
        Self {
            input_dim,
            width,
            depth,
            output_dim,
            scale: (width as f64).sqrt(),
            seed,
        }
    }

    pub fn with_scale(mut self, scale: f64) -> Self {
        self.scale = scale;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || !self.input_dim.is_multiple_of(2) {
            return Err(invalid(format!(
                "encoder input dimension must be positive and even, got {}",
                self.input_dim
            )));
        }
        if self.width == 0 || !self.width.is_multiple_of(2) {
            return Err(invalid(format!(
                "encoder width must be positive and even, got {}",
                self.width
            )));
        }
        if self.depth < 2 {
            return Err(invalid(format!(
                "encoder depth must be at least 2, got {}",
                self.depth
            )));
        }
        if self.output_dim == 0 {
            return Err(invalid("encoder output dimension must be positive"));
        }
        if !self.scale.is_finite() {
            return Err(invalid("encoder scale must be finite"));
        }
        Ok(())
    }

    /// `(rows, cols)` of each layer in order.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let mut shapes = Vec::with_capacity(self.depth);
        shapes.push((self.width, self.input_dim));
        for _ in 2..self.depth {
            shapes.push((self.width, self.width));
        }
        shapes.push((self.output_dim, self.width));
        shapes
    }

    pub fn param_count(&self) -> usize {
        self.width * self.input_dim
            + self.width * self.width * (self.depth - 2)
            + self.output_dim * self.width
    }
}

/// Intermediate values of one forward pass, kept for backpropagation.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// `activations[0]` is the input, `activations[l]` the ReLU output of layer `l`.
    activations: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
    output: Vec<f64>,
}

impl ForwardCache {
    pub fn output(&self) -> &[f64] {
        &self.output
    }

    /// Pre-activation vector of every layer.
    pub fn pre_activations(&self) -> &[Vec<f64>] {
        &self.pre
    }
}

#[inline]
fn relu(z: f64) -> f64 {
    if z > 0.0 {
        z
    } else {
        0.0
    }
}

#[inline]
fn relu_grad(z: f64) -> f64 {
    if z >= 0.0 {
        1.0
    } else {
        0.0
    }
}

/// Network weights together with the snapshot taken at initialization.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    config: EncoderConfig,
    layers: Vec<Matrix>,
    init: Vec<Matrix>,
}

impl Encoder {
    /// Block-symmetric initialization: hidden layers are `[[W, 0], [0, W]]`
    /// with `W ~ N(0, 4/m)`, the last layer is `[Wᵀ, −Wᵀ]` with
    /// `W ~ N(0, 2/m)`. Inputs with equal halves map to the zero vector.
    pub fn init_symmetric(config: EncoderConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let m = config.width as f64;
        let hidden = Normal::new(0.0, (4.0 / m).sqrt()).expect("finite std");
        let last = Normal::new(0.0, (2.0 / m).sqrt()).expect("finite std");
        let shapes = config.layer_shapes();
        let mut layers = Vec::with_capacity(shapes.len());
        for &(rows, cols) in &shapes[..shapes.len() - 1] {
            let (hr, hc) = (rows / 2, cols / 2);
            let block: Vec<f64> = (0..hr * hc).map(|_| hidden.sample(&mut rng)).collect();
            let mut w = Matrix::zeros(rows, cols);
            for i in 0..hr {
                for j in 0..hc {
                    let v = block[i * hc + j];
                    w[(i, j)] = v;
                    w[(i + hr, j + hc)] = v;
                }
            }
            layers.push(w);
        }
        let half = config.width / 2;
        let block: Vec<f64> = (0..half * config.output_dim)
            .map(|_| last.sample(&mut rng))
            .collect();
        let mut w = Matrix::zeros(config.output_dim, config.width);
        for k in 0..half {
            for j in 0..config.output_dim {
                let v = block[k * config.output_dim + j];
                w[(j, k)] = v;
                w[(j, k + half)] = -v;
            }
        }
        layers.push(w);
        Ok(Self::from_layers(config, layers))
    }

    /// Independent Gaussian entries with the same per-layer variances as the
    /// symmetric scheme but no block structure, so duplicated-half inputs do
    /// not collapse to zero.
    pub fn init_independent(config: EncoderConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let m = config.width as f64;
        let hidden = Normal::new(0.0, (4.0 / m).sqrt()).expect("finite std");
        let last = Normal::new(0.0, (2.0 / m).sqrt()).expect("finite std");
        let shapes = config.layer_shapes();
        let n = shapes.len();
        let layers = shapes
            .into_iter()
            .enumerate()
            .map(|(l, (rows, cols))| {
                let dist = if l + 1 == n { &last } else { &hidden };
                let data = (0..rows * cols).map(|_| dist.sample(&mut rng)).collect();
                Matrix::from_vec(rows, cols, data).expect("shape")
            })
            .collect();
        Ok(Self::from_layers(config, layers))
    }

    /// Wrap explicit weights; the snapshot is set to the same values.
    pub fn from_layers(config: EncoderConfig, layers: Vec<Matrix>) -> Self {
        let init = layers.clone();
        Self {
            config,
            layers,
            init,
        }
    }

    pub fn with_layers(config: EncoderConfig, layers: Vec<Matrix>) -> Result<Self> {
        config.validate()?;
        let shapes = config.layer_shapes();
        if layers.len() != shapes.len()
            || layers
                .iter()
                .zip(&shapes)
                .any(|(w, &(r, c))| w.rows() != r || w.cols() != c)
        {
            return Err(invalid(
                "layer shapes do not match the encoder configuration",
            ));
        }
        Ok(Self::from_layers(config, layers))
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn layers(&self) -> &[Matrix] {
        &self.layers
    }

    pub fn init_layers(&self) -> &[Matrix] {
        &self.init
    }

    pub fn input_dim(&self) -> usize {
        self.config.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.config.output_dim
    }

    pub fn param_count(&self) -> usize {
        self.config.param_count()
    }

    /// Current parameters flattened in the documented order.
    pub fn params(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|w| w.as_slice().iter().copied())
            .collect()
    }

    pub fn set_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(invalid(format!(
                "expected {} parameters, got {}",
                self.param_count(),
                flat.len()
            )));
        }
        let mut offset = 0;
        for w in &mut self.layers {
            let n = w.as_slice().len();
            w.as_mut_slice().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.config.input_dim {
            return Err(invalid(format!(
                "encoder input has dimension {}, expected {}",
                x.len(),
                self.config.input_dim
            )));
        }
        Ok(())
    }

    pub fn forward_cached(&self, x: &[f64]) -> Result<ForwardCache> {
        self.check_input(x)?;
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        let mut pre = Vec::with_capacity(self.layers.len());
        activations.push(x.to_vec());
        for w in &self.layers {
            let z = w.matvec(activations.last().expect("nonempty"));
            activations.push(z.iter().map(|&v| relu(v)).collect());
            pre.push(z);
        }
        let scale = self.config.scale;
        let output = activations
            .last()
            .expect("nonempty")
            .iter()
            .map(|&v| scale * v)
            .collect();
        Ok(ForwardCache {
            activations,
            pre,
            output,
        })
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward_cached(x)?.output)
    }

    /// Gradient of `vᵀ f(x; ω)` with respect to the flat parameters.
    pub fn vjp(&self, cache: &ForwardCache, v: &[f64]) -> Vec<f64> {
        let mut grad = vec![0.0; self.param_count()];
        self.accumulate_vjp(cache, v, 1.0, &mut grad);
        grad
    }

    /// `grad += weight · ∂(vᵀ f)/∂ω`.
    fn accumulate_vjp(&self, cache: &ForwardCache, v: &[f64], weight: f64, grad: &mut [f64]) {
        let n = self.layers.len();
        let scale = self.config.scale;
        let mut delta: Vec<f64> = v
            .iter()
            .zip(&cache.pre[n - 1])
            .map(|(&vi, &z)| weight * scale * vi * relu_grad(z))
            .collect();
        let mut offsets = Vec::with_capacity(n);
        let mut acc = 0;
        for w in &self.layers {
            offsets.push(acc);
            acc += w.as_slice().len();
        }
        for l in (0..n).rev() {
            let w = &self.layers[l];
            let input = &cache.activations[l];
            let base = offsets[l];
            for (i, &d) in delta.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                let row = &mut grad[base + i * w.cols()..base + (i + 1) * w.cols()];
                for (g, &a) in row.iter_mut().zip(input) {
                    *g += d * a;
                }
            }
            if l > 0 {
                let back = w.matvec_t(&delta);
                delta = back
                    .iter()
                    .zip(&cache.pre[l - 1])
                    .map(|(&b, &z)| b * relu_grad(z))
                    .collect();
            }
        }
    }

    /// Jacobian `∂f_j/∂ω`, one row per output coordinate.
    pub fn grad_params(&self, x: &[f64]) -> Result<Matrix> {
        let cache = self.forward_cached(x)?;
        let d_out = self.config.output_dim;
        let p = self.param_count();
        let mut jac = Matrix::zeros(d_out, p);
        let mut e = vec![0.0; d_out];
        for j in 0..d_out {
            e[j] = 1.0;
            self.accumulate_vjp(&cache, &e, 1.0, jac.row_mut(j));
            e[j] = 0.0;
        }
        Ok(jac)
    }

    /// `‖ω − ω₀‖²`.
    pub fn distance_from_init_sq(&self) -> f64 {
        self.layers
            .iter()
            .zip(&self.init)
            .flat_map(|(w, w0)| w.as_slice().iter().zip(w0.as_slice()))
            .map(|(a, b)| (a - b) * (a - b))
            .sum()
    }

    fn check_batch(&self, theta: &[f64], batch: &[(Vec<f64>, f64)]) -> Result<()> {
        if batch.is_empty() {
            return Err(invalid("encoder update needs a nonempty batch"));
        }
        if theta.len() != self.config.output_dim {
            return Err(invalid(format!(
                "head has dimension {}, encoder output is {}",
                theta.len(),
                self.config.output_dim
            )));
        }
        for (x, r) in batch {
            self.check_input(x)?;
            if *r != 0.0 && *r != 1.0 {
                return Err(invalid(format!("reward must be 0 or 1, got {r}")));
            }
        }
        Ok(())
    }

    /// Mean cross-entropy of `σ(θᵀ f(x; ω))` against the labels plus
    /// `(reg/2)·‖ω − ω₀‖²`.
    pub fn epoch_loss(
        &self,
        theta: &[f64],
        batch: &[(Vec<f64>, f64)],
        reg_lambda: f64,
    ) -> Result<f64> {
        self.check_batch(theta, batch)?;
        let mut total = 0.0;
        for (x, r) in batch {
            let logit = linalg::dot(theta, &self.forward(x)?);
            total += crate::logistic_loss(logit, *r);
        }
        Ok(total / batch.len() as f64 + 0.5 * reg_lambda * self.distance_from_init_sq())
    }

    pub fn epoch_loss_grad(
        &self,
        theta: &[f64],
        batch: &[(Vec<f64>, f64)],
        reg_lambda: f64,
    ) -> Result<Vec<f64>> {
        self.check_batch(theta, batch)?;
        let mut grad = vec![0.0; self.param_count()];
        let inv_n = 1.0 / batch.len() as f64;
        for (x, r) in batch {
            let cache = self.forward_cached(x)?;
            let logit = linalg::dot(theta, cache.output());
            let resid = sigmoid(logit) - r;
            if resid != 0.0 {
                self.accumulate_vjp(&cache, theta, resid * inv_n, &mut grad);
            }
        }
        if reg_lambda != 0.0 {
            let init = self.init.iter().flat_map(|w| w.as_slice().iter());
            let cur = self.layers.iter().flat_map(|w| w.as_slice().iter());
            for ((g, c), i) in grad.iter_mut().zip(cur).zip(init) {
                *g += reg_lambda * (c - i);
            }
        }
        Ok(grad)
    }

    /// Plain gradient descent on [`Encoder::epoch_loss`] with the head held fixed.
    pub fn epoch_update(
        &mut self,
        theta: &[f64],
        batch: &[(Vec<f64>, f64)],
        eta: f64,
        reg_lambda: f64,
        steps: usize,
    ) -> Result<()> {
        if steps == 0 {
            return Err(invalid("encoder update needs at least one step"));
        }
        self.check_batch(theta, batch)?;
        for _ in 0..steps {
            let grad = self.epoch_loss_grad(theta, batch, reg_lambda)?;
            let mut offset = 0;
            for w in &mut self.layers {
                for v in w.as_mut_slice() {
                    *v -= eta * grad[offset];
                    offset += 1;
                }
            }
        }
        if !self.layers.iter().all(|w| linalg::all_finite(w.as_slice())) {
            return Err(Error::NumericalDegeneracy(
                "encoder weights diverged to non-finite values".into(),
            ));
        }
        Ok(())
    }

    /// Binary layout, all little-endian: magic, `input_dim`, `width`, `depth`,
    /// `output_dim` and `seed` as u64, `scale` as f64 bits, then the current
    /// parameters followed by the initialization snapshot as f64 bits.
    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        let c = &self.config;
        w.write_all(WEIGHTS_MAGIC)?;
        for v in [c.input_dim, c.width, c.depth, c.output_dim] {
            w.write_all(&(v as u64).to_le_bytes())?;
        }
        w.write_all(&c.seed.to_le_bytes())?;
        w.write_all(&c.scale.to_bits().to_le_bytes())?;
        for m in self.layers.iter().chain(&self.init) {
            write_f64s(&mut w, m.as_slice())?;
        }
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != WEIGHTS_MAGIC {
            return Err(Error::DataCorruption("not an encoder weight file".into()));
        }
        let mut dims = [0usize; 4];
        for d in &mut dims {
            *d = read_u64(&mut r)? as usize;
        }
        let seed = read_u64(&mut r)?;
        let scale = f64::from_bits(read_u64(&mut r)?);
        let config = EncoderConfig {
            input_dim: dims[0],
            width: dims[1],
            depth: dims[2],
            output_dim: dims[3],
            scale,
            seed,
        };
        config
            .validate()
            .map_err(|e| Error::DataCorruption(format!("bad encoder header: {e}")))?;
        let shapes = config.layer_shapes();
        let read_layers = |r: &mut dyn Read| -> Result<Vec<Matrix>> {
            shapes
                .iter()
                .map(|&(rows, cols)| Matrix::from_vec(rows, cols, read_f64s(r, rows * cols)?))
                .collect()
        };
        let layers = read_layers(&mut r)?;
        let init = read_layers(&mut r)?;
        Ok(Self {
            config,
            layers,
            init,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

pub(crate) fn write_f64s(w: &mut impl Write, xs: &[f64]) -> Result<()> {
    for x in xs {
        w.write_all(&x.to_bits().to_le_bytes())?;
    }
    Ok(())
}

pub(crate) fn read_u64(r: &mut (impl Read + ?Sized)) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

pub(crate) fn read_f64s(r: &mut (impl Read + ?Sized), n: usize) -> Result<Vec<f64>> {
    (0..n).map(|_| Ok(f64::from_bits(read_u64(r)?))).collect()
}
