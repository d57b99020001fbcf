//! Conditional noise predictor `eps(x_t, t, c)`: a small SiLU MLP with
//! sinusoidal time features and an additive per-class embedding, plus an
//! exact hand-written reverse pass.
//!
//! Parameters live in one flat `Vec<f64>`; [`Layout`] maps tensors onto it.
//! Gradients share that layout, so optimizers and checkpoints only ever see
//! flat arrays.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{check_dim, DdeError, Result};

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

fn fresh_id() -> u64 {
    NEXT_ID.fetch_add(1, Ordering::Relaxed)
}

/// Network shape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Architecture {
    pub input_dim: usize,
    pub hidden: usize,
    /// Number of hidden layers.
    pub depth: usize,
    pub n_classes: usize,
    /// Sinusoidal frequencies; the time embedding has `2 * n_freqs` features.
    pub n_freqs: usize,
    /// Schedule length `T` the time features are normalised by.
    pub steps: usize,
}

impl Default for Architecture {
    fn default() -> Self {
        Architecture {
            input_dim: 2,
            hidden: 64,
            depth: 2,
            n_classes: 4,
            n_freqs: 6,
            steps: 1000,
        }
    }
}

impl Architecture {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.hidden == 0 || self.depth == 0 || self.n_classes == 0 {
            return Err(DdeError::InvalidConfig(format!(
                "architecture dimensions must be positive: {self:?}"
            )));
        }
        if self.steps == 0 {
            return Err(DdeError::InvalidConfig("architecture steps must be positive".into()));
        }
        Ok(())
    }

    fn first_in(&self) -> usize {
        self.input_dim + 2 * self.n_freqs
    }

    pub fn layout(&self) -> Layout {
        let mut off = 0;
        let mut take = |n: usize| {
            let r = off..off + n;
            off += n;
            r
        };
        let mut layers = Vec::with_capacity(self.depth + 1);
        for l in 0..self.depth {
            let fan_in = if l == 0 { self.first_in() } else { self.hidden };
            let w = take(self.hidden * fan_in);
            let b = take(self.hidden);
            layers.push(DenseSlot { w, b, fan_in, fan_out: self.hidden });
        }
        let class_emb = take(self.n_classes * self.hidden);
        let w = take(self.input_dim * self.hidden);
        let b = take(self.input_dim);
        layers.push(DenseSlot { w, b, fan_in: self.hidden, fan_out: self.input_dim });
        Layout { layers, class_emb, len: off }
    }

    /// Sinusoidal features of `t / T`.
    pub fn time_features(&self, t: usize) -> Vec<f64> {
        let tau = t as f64 / self.steps as f64;
        let mut out = Vec::with_capacity(2 * self.n_freqs);
        for j in 0..self.n_freqs {
            let w = std::f64::consts::PI * (1u64 << j) as f64;
            out.push((w * tau).sin());
            out.push((w * tau).cos());
        }
        out
    }
}

/// Location of one dense layer inside the flat parameter vector.
/// Weights are row-major `fan_out x fan_in`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseSlot {
    pub w: std::ops::Range<usize>,
    pub b: std::ops::Range<usize>,
    pub fan_in: usize,
    pub fan_out: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layout {
    /// Hidden layers followed by the output layer.
    pub layers: Vec<DenseSlot>,
    pub class_emb: std::ops::Range<usize>,
    pub len: usize,
}

/// Gradient of a scalar with respect to every predictor parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGradient(pub Vec<f64>);

impl ParamGradient {
    pub fn zeros(len: usize) -> Self {
        ParamGradient(vec![0.0; len])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn add_scaled(&mut self, other: &ParamGradient, scale: f64) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            *a += scale * b;
        }
    }

    pub fn scale(&mut self, k: f64) {
        self.0.iter_mut().for_each(|g| *g *= k);
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|g| g * g).sum::<f64>().sqrt()
    }
}

/// Activations recorded by [`NoisePredictor::forward`] for the reverse pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    owner: (u64, u64),
    class: usize,
    input: Vec<f64>,
    /// Pre-activation of every hidden layer.
    pre: Vec<Vec<f64>>,
    /// Post-activation of every hidden layer.
    post: Vec<Vec<f64>>,
}

#[derive(Debug)]
pub struct NoisePredictor {
    arch: Architecture,
    layout: Layout,
    params: Vec<f64>,
    id: u64,
    version: u64,
}

impl Clone for NoisePredictor {
    fn clone(&self) -> Self {
        NoisePredictor {
            arch: self.arch,
            layout: self.layout.clone(),
            params: self.params.clone(),
            id: fresh_id(),
            version: 0,
        }
    }
}

impl PartialEq for NoisePredictor {
    fn eq(&self, other: &Self) -> bool {
        self.arch == other.arch
            && self.params.len() == other.params.len()
            && self.params.iter().zip(&other.params).all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

#[inline]
fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

impl NoisePredictor {
    /// All-zero parameters.
    pub fn zeros(arch: Architecture) -> Result<Self> {
        arch.validate()?;
        let layout = arch.layout();
        let params = vec![0.0; layout.len];
        Ok(NoisePredictor { arch, layout, params, id: fresh_id(), version: 0 })
    }

    /// Symmetric uniform initialisation scaled by fan-in; biases start at 0.
    pub fn init<R: Rng + ?Sized>(arch: Architecture, rng: &mut R) -> Result<Self> {
        let mut net = Self::zeros(arch)?;
        for slot in net.layout.layers.clone() {
            let bound = 1.0 / (slot.fan_in as f64).sqrt();
            for p in &mut net.params[slot.w.clone()] {
                *p = rng.random_range(-bound..bound);
            }
        }
        let bound = 1.0 / (arch.hidden as f64).sqrt();
        for p in &mut net.params[net.layout.class_emb.clone()] {
            *p = rng.random_range(-bound..bound);
        }
        Ok(net)
    }

    pub fn from_params(arch: Architecture, params: Vec<f64>) -> Result<Self> {
        let mut net = Self::zeros(arch)?;
        check_dim(net.params.len(), params.len())?;
        net.params = params;
        Ok(net)
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    /// Mutable parameter access. Invalidates outstanding forward caches.
    pub fn params_mut(&mut self) -> &mut [f64] {
        self.version += 1;
        &mut self.params
    }

    /// Deep copy used as the frozen reference model.
    pub fn clone_as_reference(&self) -> NoisePredictor {
        self.clone()
    }

    fn check_inputs(&self, x_t: &[f64], t: usize, class: usize) -> Result<()> {
        check_dim(self.arch.input_dim, x_t.len())?;
        if class >= self.arch.n_classes {
            return Err(DdeError::ClassOutOfRange { class, n_classes: self.arch.n_classes });
        }
        if t == 0 || t > self.arch.steps {
            return Err(DdeError::StepOutOfRange { t, max: self.arch.steps });
        }
        Ok(())
    }

    /// Predicted noise for `(x_t, t, class)`.
    pub fn predict(&self, x_t: &[f64], t: usize, class: usize) -> Result<Vec<f64>> {
        self.forward(x_t, t, class).map(|(y, _)| y)
    }

    /// Forward pass that also returns the activations needed by [`backward`].
    ///
    /// [`backward`]: NoisePredictor::backward
    pub fn forward(&self, x_t: &[f64], t: usize, class: usize) -> Result<(Vec<f64>, ForwardCache)> {
        self.check_inputs(x_t, t, class)?;
        let mut input = Vec::with_capacity(self.arch.input_dim + 2 * self.arch.n_freqs);
        input.extend_from_slice(x_t);
        input.extend(self.arch.time_features(t));

        let depth = self.arch.depth;
        let mut pre = Vec::with_capacity(depth);
        let mut post: Vec<Vec<f64>> = Vec::with_capacity(depth);
        let emb = &self.params[self.layout.class_emb.clone()];
        let h = self.arch.hidden;
        for (l, slot) in self.layout.layers[..depth].iter().enumerate() {
            let x = if l == 0 { &input } else { &post[l - 1] };
            let mut a = self.affine(slot, x);
            if l == 0 {
                for (ai, e) in a.iter_mut().zip(&emb[class * h..(class + 1) * h]) {
                    *ai += e;
                }
            }
            post.push(a.iter().map(|&v| silu(v)).collect());
            pre.push(a);
        }
        let out = self.affine(&self.layout.layers[depth], &post[depth - 1]);
        let cache = ForwardCache { owner: (self.id, self.version), class, input, pre, post };
        Ok((out, cache))
    }

    fn affine(&self, slot: &DenseSlot, x: &[f64]) -> Vec<f64> {
        let w = &self.params[slot.w.clone()];
        let b = &self.params[slot.b.clone()];
        (0..slot.fan_out)
            .map(|o| {
                let row = &w[o * slot.fan_in..(o + 1) * slot.fan_in];
                b[o] + row.iter().zip(x).map(|(wi, xi)| wi * xi).sum::<f64>()
            })
            .collect()
    }

    /// Gradient of `<upstream, output>` with respect to every parameter.
    pub fn backward(&self, upstream: &[f64], cache: &ForwardCache) -> Result<ParamGradient> {
        let mut g = ParamGradient::zeros(self.params.len());
        self.backward_into(upstream, cache, &mut g)?;
        Ok(g)
    }

    /// Like [`backward`](Self::backward) but accumulates into `grad`.
    pub fn backward_into(
        &self,
        upstream: &[f64],
        cache: &ForwardCache,
        grad: &mut ParamGradient,
    ) -> Result<()> {
        if cache.owner != (self.id, self.version) {
            return Err(DdeError::StateMismatch);
        }
        check_dim(self.arch.input_dim, upstream.len())?;
        check_dim(self.params.len(), grad.len())?;
        let depth = self.arch.depth;
        let g = &mut grad.0;

        let out = &self.layout.layers[depth];
        let mut delta = upstream.to_vec();
        let mut dx = self.dense_backward(out, &cache.post[depth - 1], &delta, g);
        for l in (0..depth).rev() {
            let slot = &self.layout.layers[l];
            delta = dx
                .iter()
                .zip(&cache.pre[l])
                .map(|(d, a)| d * silu_grad(*a))
                .collect();
            let x = if l == 0 { &cache.input } else { &cache.post[l - 1] };
            dx = self.dense_backward(slot, x, &delta, g);
            if l == 0 {
                let h = self.arch.hidden;
                let start = self.layout.class_emb.start + cache.class * h;
                for (ge, d) in g[start..start + h].iter_mut().zip(&delta) {
                    *ge += d;
                }
            }
        }
        Ok(())
    }

    /// Accumulates weight/bias gradients and returns the gradient on `x`.
    fn dense_backward(&self, slot: &DenseSlot, x: &[f64], delta: &[f64], g: &mut [f64]) -> Vec<f64> {
        let w = &self.params[slot.w.clone()];
        let mut dx = vec![0.0; slot.fan_in];
        for (o, &d) in delta.iter().enumerate() {
            if d == 0.0 {
                continue;
            }
            let row = o * slot.fan_in;
            let gw = &mut g[slot.w.start + row..slot.w.start + row + slot.fan_in];
            for ((gwi, xi), (dxi, wi)) in gw
                .iter_mut()
                .zip(x)
                .zip(dx.iter_mut().zip(&w[row..row + slot.fan_in]))
            {
                *gwi += d * xi;
                *dxi += d * wi;
            }
            g[slot.b.start + o] += d;
        }
        dx
    }

    /// Noise-prediction MSE `||eps - eps_pred||^2` and its parameter gradient.
    pub fn noise_mse(
        &self,
        x_t: &[f64],
        t: usize,
        class: usize,
        eps: &[f64],
        grad: Option<&mut ParamGradient>,
    ) -> Result<f64> {
        let (pred, cache) = self.forward(x_t, t, class)?;
        check_dim(pred.len(), eps.len())?;
        let diff: Vec<f64> = pred.iter().zip(eps).map(|(p, e)| p - e).collect();
        let loss = diff.iter().map(|d| d * d).sum();
        if let Some(g) = grad {
            let up: Vec<f64> = diff.iter().map(|d| 2.0 * d).collect();
            self.backward_into(&up, &cache, g)?;
        }
        Ok(loss)
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|p| p.is_finite())
    }

    /// SHA-256 over the architecture and the parameter bit patterns.
    pub fn checksum(&self) -> String {
        let a = &self.arch;
        let mut h = Sha256::new();
        for v in [a.input_dim, a.hidden, a.depth, a.n_classes, a.n_freqs, a.steps] {
            h.update((v as u64).to_le_bytes());
        }
        for p in &self.params {
            h.update(p.to_bits().to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}
