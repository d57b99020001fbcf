//! Ancestral (DDPM) and strided DDIM generation.

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{DdeError, Result};
use crate::predictor::NoisePredictor;
use crate::schedule::Schedule;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SamplerKind {
    Ancestral,
    Ddim,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerConfig {
    pub kind: SamplerKind,
    /// DDIM subset size; ignored by the ancestral sampler.
    pub n_steps: usize,
    /// Zero all injected noise after the initial draw.
    pub deterministic: bool,
    pub seed: u64,
    /// Box bound on the ancestral `x0` estimate.
    #[serde(default = "default_clip")]
    pub clip: f64,
}

fn default_clip() -> f64 {
    10.0
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            kind: SamplerKind::Ddim,
            n_steps: 50,
            deterministic: true,
            seed: 0,
            clip: default_clip(),
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self, steps: usize) -> Result<()> {
        if self.kind == SamplerKind::Ddim && (self.n_steps == 0 || self.n_steps > steps) {
            return Err(DdeError::InvalidConfig(format!(
                "ddim n_steps must lie in 1..={steps}, got {}",
                self.n_steps
            )));
        }
        if !(self.clip > 0.0) {
            return Err(DdeError::InvalidConfig(format!("clip must be positive, got {}", self.clip)));
        }
        Ok(())
    }
}

/// Descending DDIM steps for a uniform stride; the final jump to 0 absorbs
/// any remainder. `ddim_timesteps(10, 3) == [10, 7, 4]`.
pub fn ddim_timesteps(steps: usize, n_steps: usize) -> Vec<usize> {
    let stride = steps / n_steps;
    (0..n_steps).map(|i| steps - i * stride).collect()
}

/// Draws the starting point `x_T ~ N(0, I)`.
pub fn initial_noise<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Vec<f64> {
    (0..dim).map(|_| rng.sample(StandardNormal)).collect()
}

/// Generates one sample for `class`.
pub fn sample<R: Rng + ?Sized>(
    net: &NoisePredictor,
    s: &Schedule,
    class: usize,
    cfg: &SamplerConfig,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let x_t = initial_noise(net.architecture().input_dim, rng);
    sample_from(net, s, class, cfg, x_t, rng)
}

/// Runs the reverse process from a given `x_T`.
pub fn sample_from<R: Rng + ?Sized>(
    net: &NoisePredictor,
    s: &Schedule,
    class: usize,
    cfg: &SamplerConfig,
    mut x: Vec<f64>,
    rng: &mut R,
) -> Result<Vec<f64>> {
    cfg.validate(s.steps())?;
    let steps = s.steps();
    match cfg.kind {
        SamplerKind::Ancestral => {
            for t in (1..=steps).rev() {
                let eps = net.predict(&x, t, class)?;
                let x0: Vec<f64> = s
                    .single_shot_mean(&x, &eps, t)?
                    .into_iter()
                    .map(|v| v.clamp(-cfg.clip, cfg.clip))
                    .collect();
                let post = s.posterior_params(&x, &x0, t)?;
                x = post.mean;
                if !cfg.deterministic && post.var > 0.0 {
                    let sd = post.var.sqrt();
                    for v in &mut x {
                        *v += sd * rng.sample::<f64, _>(StandardNormal);
                    }
                }
            }
        }
        SamplerKind::Ddim => {
            let ts = ddim_timesteps(steps, cfg.n_steps);
            for (i, &t) in ts.iter().enumerate() {
                let t_prime = ts.get(i + 1).copied().unwrap_or(0);
                let eps = net.predict(&x, t, class)?;
                let var = if cfg.deterministic {
                    0.0
                } else {
                    (1.0 - s.alpha_bar(t_prime)) / (1.0 - s.alpha_bar(t)) * s.beta(t)
                };
                let g = s.ddim_mean_with_var(&x, &eps, t, t_prime, var)?;
                x = g.mean;
                if var > 0.0 {
                    let sd = var.sqrt();
                    for v in &mut x {
                        *v += sd * rng.sample::<f64, _>(StandardNormal);
                    }
                }
            }
        }
    }
    Ok(x)
}

/// Per-sample generator: `seed + index`.
pub fn sample_rng(seed: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed.wrapping_add(index))
}

/// Draws one sample per entry of `classes` in parallel; sample `i` uses
/// `sample_rng(cfg.seed, i)`.
pub fn sample_many(net: &NoisePredictor, s: &Schedule, classes: &[usize], cfg: &SamplerConfig) -> Result<Vec<Vec<f64>>> {
    classes
        .par_iter()
        .enumerate()
        .map(|(i, &c)| sample(net, s, c, cfg, &mut sample_rng(cfg.seed, i as u64)))
        .collect()
}

/// CSV with columns `sample_id,class,x_1..x_d`.
pub fn write_samples_csv(path: &Path, classes: &[usize], samples: &[Vec<f64>]) -> Result<()> {
    let d = samples.first().map_or(0, Vec::len);
    let mut out = String::from("sample_id,class");
    for j in 1..=d {
        out.push_str(&format!(",x_{j}"));
    }
    out.push('\n');
    for (i, (c, x)) in classes.iter().zip(samples).enumerate() {
        out.push_str(&format!("{i},{c}"));
        for v in x {
            out.push_str(&format!(",{v:?}"));
        }
        out.push('\n');
    }
    let mut f = std::fs::File::create(path).map_err(|e| DdeError::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| DdeError::io(path, e))
}
