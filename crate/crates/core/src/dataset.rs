//! Synthetic class-conditional data, an analytic reward, and preference
//! pairs generated from a reference model.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, DdeError, Result};
use crate::predictor::NoisePredictor;
use crate::sampler::{sample, sample_rng, SamplerConfig};
use crate::schedule::{sq_dist, Schedule};

pub const DATASET_VERSION: u32 = 1;

/// Gaussian blobs, one per class; each class mean is that class's
/// preferred region.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToyWorld {
    pub dim: usize,
    pub class_means: Vec<Vec<f64>>,
    pub base_spread: f64,
}

impl Default for ToyWorld {
    fn default() -> Self {
        ToyWorld {
            dim: 2,
            class_means: vec![vec![2.0, 2.0], vec![-2.0, 2.0], vec![-2.0, -2.0], vec![2.0, -2.0]],
            base_spread: 0.6,
        }
    }
}

impl ToyWorld {
    pub fn n_classes(&self) -> usize {
        self.class_means.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.class_means.is_empty() {
            return Err(DdeError::InvalidConfig("world needs at least one class".into()));
        }
        if !(self.base_spread > 0.0) {
            return Err(DdeError::InvalidConfig(format!("base_spread must be positive, got {}", self.base_spread)));
        }
        for m in &self.class_means {
            if m.len() != self.dim {
                return Err(DdeError::InvalidConfig(format!("class mean {m:?} does not have dimension {}", self.dim)));
            }
        }
        for (i, a) in self.class_means.iter().enumerate() {
            for b in &self.class_means[i + 1..] {
                if a == b {
                    return Err(DdeError::InvalidConfig(format!("duplicate class mean {a:?}")));
                }
            }
        }
        Ok(())
    }

    fn check_class(&self, class: usize) -> Result<()> {
        if class >= self.n_classes() {
            return Err(DdeError::ClassOutOfRange { class, n_classes: self.n_classes() });
        }
        Ok(())
    }

    /// Negative squared distance to the class mean.
    pub fn reward(&self, x: &[f64], class: usize) -> Result<f64> {
        self.check_class(class)?;
        check_dim(self.dim, x.len())?;
        Ok(-sq_dist(x, &self.class_means[class]))
    }

    /// `n` samples with uniformly drawn class and `x0 ~ N(mean_c, spread^2 I)`.
    pub fn generate_pretrain_data<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Vec<(Vec<f64>, usize)>> {
        if n == 0 {
            return Err(DdeError::Empty("pretraining data size must be at least 1"));
        }
        Ok((0..n)
            .map(|_| {
                let c = rng.random_range(0..self.n_classes());
                let x = self.class_means[c]
                    .iter()
                    .map(|m| m + self.base_spread * rng.sample::<f64, _>(StandardNormal))
                    .collect();
                (x, c)
            })
            .collect())
    }
}

/// A winner/loser pair for one class; `reward_w > reward_l`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub class: usize,
    pub x0_w: Vec<f64>,
    pub x0_l: Vec<f64>,
    pub reward_w: f64,
    pub reward_l: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub version: u32,
    pub d: usize,
    pub n_classes: usize,
    pub seed: u64,
    pub reference_checksum: String,
    pub requested_pairs: usize,
    pub dropped_ties: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PreferenceDataset {
    pub header: DatasetHeader,
    pub pairs: Vec<PreferencePair>,
}

/// Reward summary written next to a generated dataset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub pairs: usize,
    pub dropped_ties: usize,
    pub mean_reward_w: f64,
    pub mean_reward_l: f64,
    pub mean_margin: f64,
}

impl PreferenceDataset {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.pairs.is_empty() {
            return Err(DdeError::Empty("preference dataset has no pairs"));
        }
        for (i, p) in self.pairs.iter().enumerate() {
            if !(p.reward_w > p.reward_l) {
                return Err(DdeError::InvalidConfig(format!("pair {i} is not strictly ordered")));
            }
            if p.class >= self.header.n_classes {
                return Err(DdeError::ClassOutOfRange { class: p.class, n_classes: self.header.n_classes });
            }
            check_dim(self.header.d, p.x0_w.len())?;
            check_dim(self.header.d, p.x0_l.len())?;
        }
        Ok(())
    }

    pub fn summary(&self) -> DatasetSummary {
        let n = self.pairs.len().max(1) as f64;
        let w: f64 = self.pairs.iter().map(|p| p.reward_w).sum::<f64>() / n;
        let l: f64 = self.pairs.iter().map(|p| p.reward_l).sum::<f64>() / n;
        DatasetSummary {
            pairs: self.pairs.len(),
            dropped_ties: self.header.dropped_ties,
            mean_reward_w: w,
            mean_reward_l: l,
            mean_margin: w - l,
        }
    }

    /// JSON-lines: a header line, then one record per pair.
    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| DdeError::io(path, e))?;
        let mut w = BufWriter::new(f);
        let io = |e| DdeError::io(path, e);
        serde_json::to_writer(&mut w, &self.header).map_err(|e| DdeError::format(path, e.to_string()))?;
        w.write_all(b"\n").map_err(io)?;
        for p in &self.pairs {
            serde_json::to_writer(&mut w, p).map_err(|e| DdeError::format(path, e.to_string()))?;
            w.write_all(b"\n").map_err(io)?;
        }
        w.flush().map_err(io)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| DdeError::io(path, e))?;
        let mut lines = BufReader::new(f).lines();
        let first = lines
            .next()
            .ok_or_else(|| DdeError::format(path, "missing header line"))?
            .map_err(|e| DdeError::io(path, e))?;
        let header: DatasetHeader =
            serde_json::from_str(&first).map_err(|e| DdeError::format(path, format!("line 1: {e}")))?;
        if header.version != DATASET_VERSION {
            return Err(DdeError::format(path, format!("unsupported dataset version {}", header.version)));
        }
        let mut pairs = Vec::new();
        for (i, line) in lines.enumerate() {
            let line = line.map_err(|e| DdeError::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let p: PreferencePair =
                serde_json::from_str(&line).map_err(|e| DdeError::format(path, format!("line {}: {e}", i + 2)))?;
            pairs.push(p);
        }
        let ds = PreferenceDataset { header, pairs };
        ds.validate()?;
        Ok(ds)
    }
}

/// Draws `n_pairs` candidate pairs from `reference`, two independent
/// samples of the same class each, and orders them by reward. Exact ties
/// are dropped; more than half ties is an error. Pair `i` uses the
/// generator `sample_rng(seed, i)`.
pub fn build_preference_pairs(
    world: &ToyWorld,
    reference: &NoisePredictor,
    s: &Schedule,
    n_pairs: usize,
    sampler: &SamplerConfig,
    seed: u64,
) -> Result<PreferenceDataset> {
    world.validate()?;
    if n_pairs == 0 {
        return Err(DdeError::Empty("n_pairs must be at least 1"));
    }
    if reference.architecture().n_classes != world.n_classes() || reference.architecture().input_dim != world.dim {
        return Err(DdeError::Incompatible(format!(
            "reference has {} classes / dim {}, world has {} / {}",
            reference.architecture().n_classes,
            reference.architecture().input_dim,
            world.n_classes(),
            world.dim
        )));
    }
    let drawn: Vec<Option<PreferencePair>> = (0..n_pairs)
        .into_par_iter()
        .map(|i| -> Result<Option<PreferencePair>> {
            let mut rng = sample_rng(seed, i as u64);
            let class = rng.random_range(0..world.n_classes());
            let a = sample(reference, s, class, sampler, &mut rng)?;
            let b = sample(reference, s, class, sampler, &mut rng)?;
            let (ra, rb) = (world.reward(&a, class)?, world.reward(&b, class)?);
            Ok(if ra > rb {
                Some(PreferencePair { class, x0_w: a, x0_l: b, reward_w: ra, reward_l: rb })
            } else if rb > ra {
                Some(PreferencePair { class, x0_w: b, x0_l: a, reward_w: rb, reward_l: ra })
            } else {
                None
            })
        })
        .collect::<Result<_>>()?;
    let pairs: Vec<PreferencePair> = drawn.into_iter().flatten().collect();
    let ties = n_pairs - pairs.len();
    if 2 * ties > n_pairs {
        return Err(DdeError::DegenerateReference { ties, total: n_pairs });
    }
    Ok(PreferenceDataset {
        header: DatasetHeader {
            version: DATASET_VERSION,
            d: world.dim,
            n_classes: world.n_classes(),
            seed,
            reference_checksum: reference.checksum(),
            requested_pairs: n_pairs,
            dropped_ties: ties,
        },
        pairs,
    })
}
