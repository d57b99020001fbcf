//! Paired reward evaluation, ablation grids and diagnostic export.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{PreferenceDataset, ToyWorld};
use crate::dde_core::{effective_weight_profile, CalibrationTable};
use crate::error::{DdeError, Result};
use crate::predictor::NoisePredictor;
use crate::sampler::{initial_noise, sample_from, sample_rng, SamplerConfig};
use crate::schedule::Schedule;
use crate::trainer::{train, TrainConfig, TrainLog};

pub const BOOTSTRAP_RESAMPLES: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub sampler: SamplerConfig,
    pub n_per_class: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { sampler: SamplerConfig { seed: 1_000_003, ..SamplerConfig::default() }, n_per_class: 250 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassBreakdown {
    pub class: usize,
    pub n: usize,
    pub mean_reward: f64,
    pub reference_mean_reward: f64,
    pub beat_ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: String,
    pub n_samples: usize,
    pub mean_reward: f64,
    pub reward_se: f64,
    pub reference_mean_reward: f64,
    /// Mean paired difference `reward(net) - reward(reference)`.
    pub improvement: f64,
    /// Percentile bootstrap 95% interval of `improvement`.
    pub improvement_ci: (f64, f64),
    pub beat_ratio: f64,
    pub wins: usize,
    pub ties: usize,
    pub losses: usize,
    pub per_class: Vec<ClassBreakdown>,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "method            {}", self.method);
        let _ = writeln!(out, "samples           {}", self.n_samples);
        let _ = writeln!(out, "mean reward       {:.5} (se {:.5})", self.mean_reward, self.reward_se);
        let _ = writeln!(out, "reference reward  {:.5}", self.reference_mean_reward);
        let _ = writeln!(
            out,
            "improvement       {:+.5} [{:+.5}, {:+.5}]",
            self.improvement, self.improvement_ci.0, self.improvement_ci.1
        );
        let _ = writeln!(
            out,
            "beat ratio        {:.4} ({} wins, {} ties, {} losses)",
            self.beat_ratio, self.wins, self.ties, self.losses
        );
        let _ = writeln!(out, "\nclass      n     reward  ref_reward  beat_ratio");
        for c in &self.per_class {
            let _ = writeln!(
                out,
                "{:>5} {:>6} {:>10.5} {:>11.5} {:>11.4}",
                c.class, c.n, c.mean_reward, c.reference_mean_reward, c.beat_ratio
            );
        }
        out
    }

    pub fn save(&self, json_path: &Path, text_path: &Path) -> Result<()> {
        std::fs::write(json_path, self.to_json()).map_err(|e| DdeError::io(json_path, e))?;
        std::fs::write(text_path, self.to_text()).map_err(|e| DdeError::io(text_path, e))
    }
}

/// One paired draw.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairedDraw {
    pub class: usize,
    pub index: usize,
    pub reward: f64,
    pub reference_reward: f64,
}

/// Generator for cell `(class, index)`; both models start from its first
/// draw and consume the rest identically.
pub fn cell_rng(cfg: &SamplerConfig, n_per_class: usize, class: usize, index: usize) -> ChaCha8Rng {
    sample_rng(cfg.seed, (class * n_per_class + index) as u64)
}

/// Samples both models for every `(class, index)` cell from shared noise.
pub fn paired_draws(
    net: &NoisePredictor,
    reference: &NoisePredictor,
    world: &ToyWorld,
    s: &Schedule,
    cfg: &EvalConfig,
) -> Result<Vec<PairedDraw>> {
    world.validate()?;
    cfg.sampler.validate(s.steps())?;
    if cfg.n_per_class == 0 {
        return Err(DdeError::Empty("n_per_class must be at least 1"));
    }
    for m in [net, reference] {
        let a = m.architecture();
        if a.input_dim != world.dim || a.n_classes != world.n_classes() || a.steps != s.steps() {
            return Err(DdeError::Incompatible(format!(
                "model (d = {}, classes = {}, T = {}) does not match world (d = {}, classes = {}) and T = {}",
                a.input_dim,
                a.n_classes,
                a.steps,
                world.dim,
                world.n_classes(),
                s.steps()
            )));
        }
    }
    let n = cfg.n_per_class;
    let cells: Vec<(usize, usize)> =
        (0..world.n_classes()).flat_map(|c| (0..n).map(move |i| (c, i))).collect();
    cells
        .par_iter()
        .map(|&(class, index)| {
            let mut rng = cell_rng(&cfg.sampler, n, class, index);
            let x_t = initial_noise(world.dim, &mut rng);
            let mut rng_ref = rng.clone();
            let x = sample_from(net, s, class, &cfg.sampler, x_t.clone(), &mut rng)?;
            let x_ref = sample_from(reference, s, class, &cfg.sampler, x_t, &mut rng_ref)?;
            Ok(PairedDraw {
                class,
                index,
                reward: world.reward(&x, class)?,
                reference_reward: world.reward(&x_ref, class)?,
            })
        })
        .collect()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Stratified bootstrap: resamples within each class, keeping class sizes.
fn stratified_bootstrap(strata: &[Vec<f64>], resamples: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let total: usize = strata.iter().map(Vec::len).sum();
    (0..resamples)
        .map(|_| {
            let mut sum = 0.0;
            for s in strata {
                for _ in 0..s.len() {
                    sum += s[rng.random_range(0..s.len())];
                }
            }
            sum / total as f64
        })
        .collect()
}

fn std_dev(v: &[f64]) -> f64 {
    let m = mean(v);
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() as f64 - 1.0).max(1.0)).sqrt()
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Fraction of wins with ties counted as one half.
pub fn beat_ratio(wins: usize, ties: usize, total: usize) -> f64 {
    (wins as f64 + 0.5 * ties as f64) / total as f64
}

/// Builds the report from paired draws.
pub fn summarize(method: &str, draws: &[PairedDraw], n_classes: usize, seed: u64) -> EvalReport {
    let mut strata_r = vec![Vec::new(); n_classes];
    let mut strata_d = vec![Vec::new(); n_classes];
    let mut per_class_counts = vec![(0usize, 0usize); n_classes];
    for d in draws {
        strata_r[d.class].push(d.reward);
        strata_d[d.class].push(d.reward - d.reference_reward);
        let c = &mut per_class_counts[d.class];
        if d.reward > d.reference_reward {
            c.0 += 1;
        } else if d.reward == d.reference_reward {
            c.1 += 1;
        }
    }
    let n = draws.len();
    let rewards: Vec<f64> = draws.iter().map(|d| d.reward).collect();
    let refs: Vec<f64> = draws.iter().map(|d| d.reference_reward).collect();
    let diffs: Vec<f64> = draws.iter().map(|d| d.reward - d.reference_reward).collect();
    let boot_r = stratified_bootstrap(&strata_r, BOOTSTRAP_RESAMPLES, seed);
    let mut boot_d = stratified_bootstrap(&strata_d, BOOTSTRAP_RESAMPLES, seed ^ 0xd1ff);
    boot_d.sort_by(f64::total_cmp);
    let wins: usize = per_class_counts.iter().map(|c| c.0).sum();
    let ties: usize = per_class_counts.iter().map(|c| c.1).sum();
    let per_class = (0..n_classes)
        .filter(|c| !strata_r[*c].is_empty())
        .map(|c| {
            let k = strata_r[c].len();
            let ref_mean = mean(&strata_r[c]) - mean(&strata_d[c]);
            ClassBreakdown {
                class: c,
                n: k,
                mean_reward: mean(&strata_r[c]),
                reference_mean_reward: ref_mean,
                beat_ratio: beat_ratio(per_class_counts[c].0, per_class_counts[c].1, k),
            }
        })
        .collect();
    EvalReport {
        method: method.to_string(),
        n_samples: n,
        mean_reward: mean(&rewards),
        reward_se: std_dev(&boot_r),
        reference_mean_reward: mean(&refs),
        improvement: mean(&diffs),
        improvement_ci: (percentile(&boot_d, 0.025), percentile(&boot_d, 0.975)),
        beat_ratio: beat_ratio(wins, ties, n),
        wins,
        ties,
        losses: n - wins - ties,
        per_class,
    }
}

/// Compares `net` with `reference` on `n_per_class` paired draws per class.
pub fn evaluate(
    method: &str,
    net: &NoisePredictor,
    reference: &NoisePredictor,
    world: &ToyWorld,
    s: &Schedule,
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    let draws = paired_draws(net, reference, world, s, cfg)?;
    Ok(summarize(method, &draws, world.n_classes(), cfg.sampler.seed))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub label: String,
    pub seed: u64,
    pub report: EvalReport,
}

/// Trains every config on the shared dataset and reference and evaluates it.
pub fn ablation_grid(
    configs: &[TrainConfig],
    dataset: &PreferenceDataset,
    reference: &NoisePredictor,
    world: &ToyWorld,
    s: &Schedule,
    eval: &EvalConfig,
) -> Result<Vec<GridRow>> {
    configs
        .iter()
        .map(|cfg| {
            let out = train(cfg, dataset, reference, s)?;
            let label = cfg.method.label();
            let report = evaluate(&label, &out.target, reference, world, s, eval)?;
            Ok(GridRow { label, seed: cfg.seed, report })
        })
        .collect()
}

/// Comparison table over grid rows, grouped by label, with medians over
/// seeds.
pub fn grid_table(rows: &[GridRow]) -> String {
    let mut labels: Vec<&str> = Vec::new();
    for r in rows {
        if !labels.contains(&r.label.as_str()) {
            labels.push(&r.label);
        }
    }
    let mut out = String::from("method                     seeds  med_reward  med_improvement  med_beat_ratio\n");
    for l in labels {
        let sel: Vec<&GridRow> = rows.iter().filter(|r| r.label == l).collect();
        let med = |f: &dyn Fn(&GridRow) -> f64| median(&sel.iter().map(|r| f(r)).collect::<Vec<_>>());
        let _ = writeln!(
            out,
            "{:<26} {:>5} {:>11.5} {:>16.5} {:>15.4}",
            l,
            sel.len(),
            med(&|r| r.report.mean_reward),
            med(&|r| r.report.improvement),
            med(&|r| r.report.beat_ratio)
        );
    }
    out
}

pub fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

/// Centered moving average; edges use the available window.
pub fn smooth(v: &[f64], window: usize) -> Vec<f64> {
    let half = window / 2;
    (0..v.len())
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + window - half).min(v.len());
            mean(&v[lo..hi])
        })
        .collect()
}

pub fn is_non_increasing(v: &[f64], tol: f64) -> bool {
    v.windows(2).all(|w| w[1] <= w[0] + tol)
}

pub fn is_strictly_increasing(v: &[f64]) -> bool {
    v.windows(2).all(|w| w[1] > w[0])
}

/// Writes `profile.csv` (t, |correction|, c(t)) and `convergence.csv`
/// (iteration, mean |delta r|) into `out_dir`.
pub fn export_diagnostics(
    table: &CalibrationTable,
    s: &Schedule,
    log: &TrainLog,
    out_dir: &Path,
) -> Result<(PathBuf, PathBuf)> {
    std::fs::create_dir_all(out_dir).map_err(|e| DdeError::io(out_dir, e))?;
    let profile_path = out_dir.join("profile.csv");
    let mut p = String::from("t,abs_correction,ddim_coefficient\n");
    for row in effective_weight_profile(s, table)? {
        let _ = writeln!(p, "{},{:?},{:?}", row.t, row.abs_correction, row.ddim_coefficient);
    }
    std::fs::write(&profile_path, p).map_err(|e| DdeError::io(&profile_path, e))?;
    let conv_path = out_dir.join("convergence.csv");
    let mut c = String::from("iteration,mean_abs_delta_r\n");
    for r in &log.records {
        let _ = writeln!(c, "{},{:?}", r.step, r.mean_abs_delta_r);
    }
    std::fs::write(&conv_path, c).map_err(|e| DdeError::io(&conv_path, e))?;
    Ok((profile_path, conv_path))
}
