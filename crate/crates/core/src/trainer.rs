//! Reference pretraining and the preference fine-tuning loop.
//!
//! Each iteration samples a batch of pairs and denoising steps, evaluates the
//! configured objective against an immutable snapshot of the target,
//! reference and calibration table, reduces gradients in pair order, takes
//! one Adam step, and finally folds the calibration observations from the
//! same forward passes into the table.

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{method_loss, MethodSpec};
use crate::dataset::{PreferenceDataset, ToyWorld};
use crate::dde_core::{CalibrationTable, LossContext, PairDraw, PairLoss, Role, DEFAULT_BETA_DPO, DEFAULT_EMA_DECAY};
use crate::error::{DdeError, Result};
use crate::optim::{AdamConfig, AdamState};
use crate::predictor::{NoisePredictor, ParamGradient};
use crate::schedule::Schedule;

fn draw_noise<R: Rng + ?Sized>(d: usize, rng: &mut R) -> Vec<f64> {
    (0..d).map(|_| rng.sample(StandardNormal)).collect()
}

fn iteration_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step);
    rng
}

// ---------------------------------------------------------------------------
// Pretraining

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub iters_per_epoch: usize,
    pub batch_size: usize,
    /// Size of the fixed training corpus.
    pub n_data: usize,
    /// Size of the held-out validation set.
    pub n_val: usize,
    pub seed: u64,
    pub optimizer: AdamConfig,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            epochs: 6,
            iters_per_epoch: 500,
            batch_size: 128,
            n_data: 20_000,
            n_val: 2_000,
            seed: 0,
            optimizer: AdamConfig { learning_rate: 2e-3, warmup_steps: 200, ..AdamConfig::default() },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    /// Validation noise-MSE before training and after every epoch.
    pub val_mse: Vec<f64>,
}

impl PretrainReport {
    pub fn final_val_mse(&self) -> f64 {
        *self.val_mse.last().expect("report has the initial entry")
    }
}

/// Fits `net_init` to the DDPM noise-prediction objective on data from `world`.
pub fn pretrain_reference(
    world: &ToyWorld,
    s: &Schedule,
    net_init: NoisePredictor,
    cfg: &PretrainConfig,
) -> Result<(NoisePredictor, PretrainReport)> {
    world.validate()?;
    cfg.optimizer.validate()?;
    if cfg.batch_size == 0 {
        return Err(DdeError::InvalidConfig("pretrain batch_size must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let corpus = world.generate_pretrain_data(cfg.n_data, &mut rng)?;
    let val: Vec<(Vec<f64>, usize, usize, Vec<f64>)> = world
        .generate_pretrain_data(cfg.n_val.max(1), &mut rng)?
        .into_iter()
        .map(|(x, c)| {
            let t = rng.random_range(1..=s.steps());
            let eps = draw_noise(world.dim, &mut rng);
            (x, c, t, eps)
        })
        .collect();
    let val_mse = |net: &NoisePredictor| -> Result<f64> {
        let losses: Vec<f64> = val
            .par_iter()
            .map(|(x0, c, t, eps)| {
                let xt = s.forward_marginal(x0, *t, eps)?;
                net.noise_mse(&xt, *t, *c, eps, None)
            })
            .collect::<Result<_>>()?;
        Ok(losses.iter().sum::<f64>() / losses.len() as f64)
    };

    let mut net = net_init;
    let mut opt = AdamState::new(net.num_params());
    let mut report = PretrainReport { val_mse: vec![val_mse(&net)?] };
    let mut step = 0u64;
    for epoch in 0..cfg.epochs {
        for _ in 0..cfg.iters_per_epoch {
            let mut it_rng = iteration_rng(cfg.seed ^ 0x5eed_0fd1ff, step);
            let batch: Vec<(usize, usize, Vec<f64>)> = (0..cfg.batch_size)
                .map(|_| {
                    let i = it_rng.random_range(0..corpus.len());
                    let t = it_rng.random_range(1..=s.steps());
                    (i, t, draw_noise(world.dim, &mut it_rng))
                })
                .collect();
            let grads: Vec<(f64, ParamGradient)> = batch
                .par_iter()
                .map(|(i, t, eps)| {
                    let (x0, c) = &corpus[*i];
                    let xt = s.forward_marginal(x0, *t, eps)?;
                    let mut g = ParamGradient::zeros(net.num_params());
                    let l = net.noise_mse(&xt, *t, *c, eps, Some(&mut g))?;
                    Ok((l, g))
                })
                .collect::<Result<_>>()?;
            let mut total = ParamGradient::zeros(net.num_params());
            let mut loss = 0.0;
            for (l, g) in &grads {
                loss += l;
                total.add_scaled(g, 1.0 / cfg.batch_size as f64);
            }
            step += 1;
            if !loss.is_finite() {
                return Err(DdeError::NonFinite { step: step as usize, detail: format!("pretraining loss {loss} in epoch {epoch}") });
            }
            opt.update(&cfg.optimizer, net.params_mut(), &total)?;
        }
        let v = val_mse(&net)?;
        if !v.is_finite() {
            return Err(DdeError::NonFinite { step: step as usize, detail: format!("validation mse {v} after epoch {epoch}") });
        }
        report.val_mse.push(v);
    }
    Ok((net, report))
}

// ---------------------------------------------------------------------------
// Preference fine-tuning

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StepSampling {
    /// One `t` per iteration, shared by the whole batch.
    PerIteration,
    /// An independent `t` for every pair.
    PerPair,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub method: MethodSpec,
    pub beta_dpo: f64,
    pub ema_decay: f64,
    pub optimizer: AdamConfig,
    pub max_steps: usize,
    pub batch_size: usize,
    pub step_sampling: StepSampling,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            method: MethodSpec::default(),
            beta_dpo: DEFAULT_BETA_DPO,
            ema_decay: DEFAULT_EMA_DECAY,
            optimizer: AdamConfig { learning_rate: 1e-4, warmup_steps: 50, ..AdamConfig::default() },
            max_steps: 3000,
            batch_size: 64,
            step_sampling: StepSampling::PerPair,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, steps: usize) -> Result<()> {
        self.method.validate(steps)?;
        self.optimizer.validate()?;
        if self.batch_size == 0 {
            return Err(DdeError::InvalidConfig("batch_size must be positive".into()));
        }
        if !(self.beta_dpo > 0.0 && self.beta_dpo.is_finite()) {
            return Err(DdeError::InvalidConfig(format!("beta_dpo must be positive, got {}", self.beta_dpo)));
        }
        if !(self.ema_decay > 0.0 && self.ema_decay <= 1.0) {
            return Err(DdeError::InvalidConfig(format!("ema_decay must lie in (0, 1], got {}", self.ema_decay)));
        }
        Ok(())
    }
}

/// One row of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: usize,
    pub loss: f64,
    pub logit_mean: f64,
    pub correction_mean: f64,
    pub t_min: usize,
    pub t_max: usize,
    /// Mean absolute change of the calibration table over all `4T` entries.
    pub mean_abs_delta_r: f64,
    pub calib_hash: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<LogRecord>,
    /// How often each step `t` was sampled (index `t - 1`).
    pub t_counts: Vec<u64>,
}

impl TrainLog {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out =
            String::from("step,loss,logit_mean,correction_mean,t_min,t_max,mean_abs_delta_r,calib_hash\n");
        for r in &self.records {
            out.push_str(&format!(
                "{},{:?},{:?},{:?},{},{},{:?},{}\n",
                r.step, r.loss, r.logit_mean, r.correction_mean, r.t_min, r.t_max, r.mean_abs_delta_r, r.calib_hash
            ));
        }
        let mut f = std::fs::File::create(path).map_err(|e| DdeError::io(path, e))?;
        f.write_all(out.as_bytes()).map_err(|e| DdeError::io(path, e))
    }

    /// Ratio of mean `|delta r|` in the last quarter of iterations to the
    /// first quarter.
    pub fn calibration_settling_ratio(&self) -> Option<f64> {
        let n = self.records.len();
        if n < 4 {
            return None;
        }
        let q = n / 4;
        let mean = |rs: &[LogRecord]| rs.iter().map(|r| r.mean_abs_delta_r).sum::<f64>() / rs.len() as f64;
        let first = mean(&self.records[..q]);
        let last = mean(&self.records[n - q..]);
        (first > 0.0).then(|| last / first)
    }
}

/// Training state that can be checkpointed between iterations.
#[derive(Debug, Clone)]
pub struct Trainer<'a> {
    pub config: TrainConfig,
    pub target: NoisePredictor,
    pub table: CalibrationTable,
    pub optimizer: AdamState,
    pub log: TrainLog,
    pub step: usize,
    reference: &'a NoisePredictor,
    dataset: &'a PreferenceDataset,
    schedule: &'a Schedule,
}

/// Final artifacts of a training run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub target: NoisePredictor,
    pub table: CalibrationTable,
    pub optimizer: AdamState,
    pub log: TrainLog,
}

impl<'a> Trainer<'a> {
    /// Target starts as a copy of the frozen reference.
    pub fn new(
        config: TrainConfig,
        dataset: &'a PreferenceDataset,
        reference: &'a NoisePredictor,
        schedule: &'a Schedule,
    ) -> Result<Self> {
        config.validate(schedule.steps())?;
        dataset.validate()?;
        if reference.architecture().steps != schedule.steps() {
            return Err(DdeError::Incompatible(format!(
                "reference built for T = {}, schedule has T = {}",
                reference.architecture().steps,
                schedule.steps()
            )));
        }
        if reference.architecture().input_dim != dataset.header.d {
            return Err(DdeError::Incompatible("reference and dataset dimensions differ".into()));
        }
        Ok(Trainer {
            config,
            target: reference.clone_as_reference(),
            table: CalibrationTable::new(schedule.steps(), config.ema_decay)?,
            optimizer: AdamState::new(reference.num_params()),
            log: TrainLog { records: Vec::new(), t_counts: vec![0; schedule.steps()] },
            step: 0,
            reference,
            dataset,
            schedule,
        })
    }

    /// Continues from a saved state.
    pub fn resume(
        mut self,
        target: NoisePredictor,
        table: CalibrationTable,
        optimizer: AdamState,
        step: usize,
    ) -> Result<Self> {
        if target.architecture() != self.reference.architecture() || table.len() != self.schedule.steps() {
            return Err(DdeError::Incompatible("resume state does not match the reference".into()));
        }
        self.target = target;
        self.table = table;
        self.optimizer = optimizer;
        self.step = step;
        Ok(self)
    }

    fn draws(&self, rng: &mut ChaCha8Rng) -> Vec<(usize, PairDraw)> {
        let (lo, hi) = self.config.method.steps_to_sample(self.schedule.steps());
        let d = self.dataset.header.d;
        let shared_t = rng.random_range(lo..=hi);
        (0..self.config.batch_size)
            .map(|_| {
                let idx = rng.random_range(0..self.dataset.len());
                let t = match self.config.step_sampling {
                    StepSampling::PerIteration => shared_t,
                    StepSampling::PerPair => rng.random_range(lo..=hi),
                };
                let noise_w = draw_noise(d, rng);
                let noise_l = draw_noise(d, rng);
                (idx, PairDraw { t, noise_w, noise_l })
            })
            .collect()
    }

    /// Runs one iteration.
    pub fn step(&mut self) -> Result<&LogRecord> {
        let mut rng = iteration_rng(self.config.seed, self.step as u64);
        let batch = self.draws(&mut rng);
        let track = self.config.method.kind.tracks_calibration();
        let ctx = LossContext {
            schedule: self.schedule,
            target: &self.target,
            reference: self.reference,
            table: &self.table,
            beta_dpo: self.config.beta_dpo,
        };
        let method = self.config.method;
        let pairs = &self.dataset.pairs;
        let results: Vec<PairLoss> = batch
            .par_iter()
            .map(|(i, draw)| method_loss(&method, &ctx, &pairs[*i], draw, true, track))
            .collect::<Result<_>>()?;

        let n = results.len() as f64;
        let mut grad = ParamGradient::zeros(self.target.num_params());
        let (mut loss, mut logit, mut corr) = (0.0, 0.0, 0.0);
        for r in &results {
            loss += r.loss;
            if let Some(b) = &r.breakdown {
                logit += b.logit;
                corr += b.correction;
            }
            grad.add_scaled(r.grad.as_ref().expect("gradient requested"), 1.0 / n);
        }
        let (loss, logit, corr) = (loss / n, logit / n, corr / n);
        let step_no = self.step + 1;
        if !loss.is_finite() || grad.0.iter().any(|g| !g.is_finite()) {
            let worst = results.iter().zip(&batch).find(|(r, _)| !r.loss.is_finite());
            let detail = match worst {
                Some((r, (i, d))) => format!("pair {i} at t = {}: {:?}", d.t, r.breakdown),
                None => format!("batch loss {loss}, non-finite gradient"),
            };
            return Err(DdeError::NonFinite { step: step_no, detail });
        }
        self.optimizer.update(&self.config.optimizer, self.target.params_mut(), &grad)?;

        // Observations are applied after the optimizer step, in pair order.
        let mut abs_delta = 0.0;
        for obs in results.iter().filter_map(|r| r.observation) {
            for role in Role::ALL {
                abs_delta += self.table.ema_update(role, obs.k, obs.get(role))?.abs();
            }
        }
        if !self.table.all_finite() {
            return Err(DdeError::NonFinite { step: step_no, detail: "calibration table".into() });
        }

        for (_, d) in &batch {
            self.log.t_counts[d.t - 1] += 1;
        }
        self.step = step_no;
        self.log.records.push(LogRecord {
            step: step_no,
            loss,
            logit_mean: logit,
            correction_mean: corr,
            t_min: batch.iter().map(|(_, d)| d.t).min().unwrap_or(0),
            t_max: batch.iter().map(|(_, d)| d.t).max().unwrap_or(0),
            mean_abs_delta_r: abs_delta / (4 * self.table.len()) as f64,
            calib_hash: self.table.snapshot_hash(),
        });
        Ok(self.log.records.last().expect("just pushed"))
    }

    /// Runs until `max_steps`, calling `hook` after every iteration.
    pub fn run_with<F>(mut self, mut hook: F) -> Result<TrainOutcome>
    where
        F: FnMut(&Trainer<'a>) -> Result<()>,
    {
        while self.step < self.config.max_steps {
            self.step()?;
            hook(&self)?;
        }
        Ok(TrainOutcome { target: self.target, table: self.table, optimizer: self.optimizer, log: self.log })
    }

    pub fn run(self) -> Result<TrainOutcome> {
        self.run_with(|_| Ok(()))
    }
}

/// Fine-tunes a copy of `reference` on `dataset` with `config`.
pub fn train(
    config: &TrainConfig,
    dataset: &PreferenceDataset,
    reference: &NoisePredictor,
    s: &Schedule,
) -> Result<TrainOutcome> {
    Trainer::new(*config, dataset, reference, s)?.run()
}

/// Mean loss (and logit) of `net` against `reference` on fixed draws, without
/// updating anything.
pub fn held_out_logit(
    config: &TrainConfig,
    dataset: &PreferenceDataset,
    net: &NoisePredictor,
    reference: &NoisePredictor,
    table: &CalibrationTable,
    s: &Schedule,
    seed: u64,
) -> Result<(f64, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (lo, hi) = config.method.steps_to_sample(s.steps());
    let d = dataset.header.d;
    let draws: Vec<PairDraw> = dataset
        .pairs
        .iter()
        .map(|_| PairDraw {
            t: rng.random_range(lo..=hi),
            noise_w: draw_noise(d, &mut rng),
            noise_l: draw_noise(d, &mut rng),
        })
        .collect();
    let ctx = LossContext { schedule: s, target: net, reference, table, beta_dpo: config.beta_dpo };
    let out: Vec<PairLoss> = dataset
        .pairs
        .par_iter()
        .zip(&draws)
        .map(|(p, dr)| method_loss(&config.method, &ctx, p, dr, false, false))
        .collect::<Result<_>>()?;
    let n = out.len() as f64;
    let loss = out.iter().map(|o| o.loss).sum::<f64>() / n;
    let logit = out.iter().filter_map(|o| o.breakdown.map(|b| b.logit)).sum::<f64>() / n;
    Ok((loss, logit))
}
