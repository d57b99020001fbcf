//! Denoised distribution estimation: calibration coefficients tracked by
//! EMA, the correction term, and the preference loss built on single-shot
//! `x0` estimates.
//!
//! The trajectory before the sampled step `t` is replaced by the true
//! posterior chain scaled by `exp(r_k)`, which telescopes to `q(x_t | x0)`
//! plus a constant `sum_{k=t}^{T-1} r_k`. The segment after `t` is collapsed
//! into one DDIM jump to step 0. The loss is the DPO log-sigmoid over the
//! resulting log-ratios.

use std::io::Write;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::dataset::PreferencePair;
use crate::error::{check_dim, DdeError, Result};
use crate::predictor::{NoisePredictor, ParamGradient};
use crate::schedule::{sq_dist, GaussianParams, Schedule};

/// Default DPO preference strength.
pub const DEFAULT_BETA_DPO: f64 = 5000.0;
/// Default EMA rate for the calibration coefficients.
pub const DEFAULT_EMA_DECAY: f64 = 0.1;

/// Which of the four coefficient arrays an observation belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Role {
    TargetW,
    TargetL,
    RefW,
    RefL,
}

impl Role {
    pub const ALL: [Role; 4] = [Role::TargetW, Role::TargetL, Role::RefW, Role::RefL];
}

/// Four length-`T` arrays of calibration coefficients `r_k`, `k = 0..T-1`.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationTable {
    pub r_target_w: Vec<f64>,
    pub r_target_l: Vec<f64>,
    pub r_ref_w: Vec<f64>,
    pub r_ref_l: Vec<f64>,
    pub ema_decay: f64,
    pub update_counts: Vec<u64>,
}

impl CalibrationTable {
    /// Zero-initialised table for a `steps`-step schedule.
    pub fn new(steps: usize, ema_decay: f64) -> Result<Self> {
        if !(ema_decay > 0.0 && ema_decay <= 1.0) {
            return Err(DdeError::InvalidRange(format!("ema decay must lie in (0, 1], got {ema_decay}")));
        }
        Ok(CalibrationTable {
            r_target_w: vec![0.0; steps],
            r_target_l: vec![0.0; steps],
            r_ref_w: vec![0.0; steps],
            r_ref_l: vec![0.0; steps],
            ema_decay,
            update_counts: vec![0; steps],
        })
    }

    pub fn len(&self) -> usize {
        self.r_target_w.len()
    }

    pub fn is_empty(&self) -> bool {
        self.r_target_w.is_empty()
    }

    pub fn array(&self, role: Role) -> &[f64] {
        match role {
            Role::TargetW => &self.r_target_w,
            Role::TargetL => &self.r_target_l,
            Role::RefW => &self.r_ref_w,
            Role::RefL => &self.r_ref_l,
        }
    }

    pub fn array_mut(&mut self, role: Role) -> &mut [f64] {
        match role {
            Role::TargetW => &mut self.r_target_w,
            Role::TargetL => &mut self.r_target_l,
            Role::RefW => &mut self.r_ref_w,
            Role::RefL => &mut self.r_ref_l,
        }
    }

    /// `r <- (1 - mu) r + mu * observation`; returns the applied change.
    pub fn ema_update(&mut self, role: Role, k: usize, observation: f64) -> Result<f64> {
        let len = self.len();
        if k >= len {
            return Err(DdeError::IndexOutOfRange { index: k, len });
        }
        let mu = self.ema_decay;
        let slot = &mut self.array_mut(role)[k];
        let old = *slot;
        *slot = (1.0 - mu) * old + mu * observation;
        let delta = *slot - old;
        self.update_counts[k] += 1;
        Ok(delta)
    }

    /// Combined coefficient `r_target_w - r_ref_w - r_target_l + r_ref_l` at `k`.
    pub fn combined(&self, k: usize) -> f64 {
        self.r_target_w[k] - self.r_ref_w[k] - self.r_target_l[k] + self.r_ref_l[k]
    }

    /// `sum_{k=t}^{T-1}` of the combined coefficients; empty for `t = T`.
    pub fn correction_term(&self, t: usize) -> Result<f64> {
        let steps = self.len();
        if t == 0 || t > steps {
            return Err(DdeError::StepOutOfRange { t, max: steps });
        }
        Ok((t..steps).map(|k| self.combined(k)).sum())
    }

    /// Correction term for every `t = 1..=T` (index `t - 1`), by suffix sums.
    pub fn correction_profile(&self) -> Vec<f64> {
        let steps = self.len();
        let mut out = vec![0.0; steps];
        let mut acc = 0.0;
        for t in (1..=steps).rev() {
            out[t - 1] = acc;
            acc += self.combined(t - 1);
        }
        out
    }

    pub fn all_finite(&self) -> bool {
        Role::ALL.iter().all(|r| self.array(*r).iter().all(|v| v.is_finite()))
    }

    /// SHA-256 over the bit patterns of all four arrays.
    pub fn snapshot_hash(&self) -> String {
        let mut h = Sha256::new();
        for role in Role::ALL {
            for v in self.array(role) {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// CSV with columns `k,r_target_w,r_target_l,r_ref_w,r_ref_l,update_count`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("k,r_target_w,r_target_l,r_ref_w,r_ref_l,update_count\n");
        for k in 0..self.len() {
            out.push_str(&format!(
                "{},{:?},{:?},{:?},{:?},{}\n",
                k, self.r_target_w[k], self.r_target_l[k], self.r_ref_w[k], self.r_ref_l[k], self.update_counts[k]
            ));
        }
        let mut f = std::fs::File::create(path).map_err(|e| DdeError::io(path, e))?;
        f.write_all(out.as_bytes()).map_err(|e| DdeError::io(path, e))
    }
}

/// Closed-form expectation of `log p(x_{t-1}|x_t) - log q(x_{t-1}|x_t, x0)`
/// under `x_{t-1} ~ q`, for two Gaussians sharing the variance `sigma_t^2`.
pub fn calibration_observation(
    s: &Schedule,
    posterior: &GaussianParams,
    model_mean: &GaussianParams,
    t: usize,
) -> Result<f64> {
    s.check_step(t)?;
    let var = s.posterior_var(t);
    if t < 2 || !(var > 0.0) {
        return Err(DdeError::ZeroVariance(t));
    }
    check_dim(posterior.mean.len(), model_mean.mean.len())?;
    Ok(-sq_dist(&posterior.mean, &model_mean.mean) / (2.0 * var))
}

/// The scalar pieces of the preference loss.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub mse_target_w: f64,
    pub mse_ref_w: f64,
    pub mse_target_l: f64,
    pub mse_ref_l: f64,
    pub correction: f64,
    pub logit: f64,
    pub loss: f64,
}

impl LossBreakdown {
    /// The inner expression before scaling by `beta_dpo`.
    pub fn inner(&self) -> f64 {
        -self.mse_target_w + self.mse_ref_w + self.mse_target_l - self.mse_ref_l + self.correction
    }
}

/// Calibration observations for one pair, taken from the loss forward passes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observation {
    /// Table index `t - 1`.
    pub k: usize,
    pub target_w: f64,
    pub target_l: f64,
    pub ref_w: f64,
    pub ref_l: f64,
}

impl Observation {
    pub fn get(&self, role: Role) -> f64 {
        match role {
            Role::TargetW => self.target_w,
            Role::TargetL => self.target_l,
            Role::RefW => self.ref_w,
            Role::RefL => self.ref_l,
        }
    }
}

/// The random draws that turn a pair into one loss evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct PairDraw {
    pub t: usize,
    pub noise_w: Vec<f64>,
    pub noise_l: Vec<f64>,
}

/// Everything a loss evaluation needs besides the pair and its draw.
#[derive(Debug, Clone, Copy)]
pub struct LossContext<'a> {
    pub schedule: &'a Schedule,
    pub target: &'a NoisePredictor,
    pub reference: &'a NoisePredictor,
    pub table: &'a CalibrationTable,
    pub beta_dpo: f64,
}

/// Result of evaluating a loss on one pair.
#[derive(Debug, Clone)]
pub struct PairLoss {
    pub loss: f64,
    pub breakdown: Option<LossBreakdown>,
    pub grad: Option<ParamGradient>,
    pub observation: Option<Observation>,
}

/// How the model's denoised estimate is compared with the data.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Estimator {
    /// `||x0 - xhat0(x_t)||^2`, one DDIM jump to step 0.
    SingleShot,
    /// `||mu(x_t, x0) - mu_theta(x_t)||^2` at step `t` only.
    PerStep,
}

/// Options of the shared preference-loss engine.
#[derive(Debug, Clone, Copy)]
pub(crate) struct PreferenceOptions {
    pub estimator: Estimator,
    pub use_correction: bool,
    /// Multiplies the logit.
    pub weight: f64,
    pub want_grad: bool,
    pub want_observation: bool,
}

/// `-log sigmoid(z)`, stable for both signs.
pub fn neg_log_sigmoid(z: f64) -> f64 {
    if z > 0.0 {
        (-z).exp().ln_1p()
    } else {
        -z + z.exp().ln_1p()
    }
}

/// `sigmoid(z)`, stable for both signs.
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

struct Side {
    goal: Vec<f64>,
    est_target: Vec<f64>,
    est_ref: Vec<f64>,
    cache: crate::predictor::ForwardCache,
    obs_target: Option<f64>,
    obs_ref: Option<f64>,
}

/// The estimate is affine in the predicted noise: `est = a * x_t + j * eps`.
fn estimator_coefficients(s: &Schedule, est: Estimator, t: usize) -> (f64, f64) {
    let ab = s.alpha_bar(t);
    let (a, sd) = (ab.sqrt(), (1.0 - ab).sqrt());
    match est {
        Estimator::SingleShot => (1.0 / a, -sd / a),
        Estimator::PerStep => {
            // DDIM t -> t-1 with the posterior variance equals the DDPM
            // posterior mean evaluated at the predicted x0.
            let (c0, ct) = s.posterior_coefficients(t);
            (c0 / a + ct, -c0 * sd / a)
        }
    }
}

fn evaluate_side(
    ctx: &LossContext<'_>,
    opts: &PreferenceOptions,
    x0: &[f64],
    class: usize,
    t: usize,
    noise: &[f64],
) -> Result<Side> {
    let s = ctx.schedule;
    let x_t = s.forward_marginal(x0, t, noise)?;
    let (eps_target, cache) = ctx.target.forward(&x_t, t, class)?;
    let eps_ref = ctx.reference.predict(&x_t, t, class)?;
    let (a, j) = estimator_coefficients(s, opts.estimator, t);
    let affine = |eps: &[f64]| -> Vec<f64> { x_t.iter().zip(eps).map(|(x, e)| a * x + j * e).collect() };
    let goal = match opts.estimator {
        Estimator::SingleShot => x0.to_vec(),
        Estimator::PerStep => s.posterior_params(&x_t, x0, t)?.mean,
    };
    let (mut obs_target, mut obs_ref) = (None, None);
    if opts.want_observation && t >= 2 {
        let post = s.posterior_params(&x_t, x0, t)?;
        let m_target = s.ddim_mean(&x_t, &eps_target, t, t - 1)?;
        let m_ref = s.ddim_mean(&x_t, &eps_ref, t, t - 1)?;
        obs_target = Some(calibration_observation(s, &post, &m_target, t)?);
        obs_ref = Some(calibration_observation(s, &post, &m_ref, t)?);
    }
    Ok(Side {
        est_target: affine(&eps_target),
        est_ref: affine(&eps_ref),
        goal,
        cache,
        obs_target,
        obs_ref,
    })
}

/// Shared engine behind every reference-based preference loss.
pub(crate) fn preference_loss(
    ctx: &LossContext<'_>,
    pair: &PreferencePair,
    draw: &PairDraw,
    opts: PreferenceOptions,
) -> Result<PairLoss> {
    let s = ctx.schedule;
    let t = draw.t;
    s.check_step(t)?;
    check_dim(pair.x0_w.len(), draw.noise_w.len())?;
    check_dim(pair.x0_l.len(), draw.noise_l.len())?;

    let w = evaluate_side(ctx, &opts, &pair.x0_w, pair.class, t, &draw.noise_w)?;
    let l = evaluate_side(ctx, &opts, &pair.x0_l, pair.class, t, &draw.noise_l)?;

    let correction = if opts.use_correction { ctx.table.correction_term(t)? } else { 0.0 };
    let mut b = LossBreakdown {
        mse_target_w: sq_dist(&w.goal, &w.est_target),
        mse_ref_w: sq_dist(&w.goal, &w.est_ref),
        mse_target_l: sq_dist(&l.goal, &l.est_target),
        mse_ref_l: sq_dist(&l.goal, &l.est_ref),
        correction,
        ..Default::default()
    };
    b.logit = ctx.beta_dpo * opts.weight * b.inner();
    b.loss = neg_log_sigmoid(b.logit);

    let grad = if opts.want_grad {
        // d loss / d logit = -sigmoid(-logit)
        let slope = sigmoid(-b.logit) * ctx.beta_dpo * opts.weight;
        let (_, j) = estimator_coefficients(s, opts.estimator, t);
        let mut g = ParamGradient::zeros(ctx.target.num_params());
        for (side, sign) in [(&w, 1.0), (&l, -1.0)] {
            // d mse / d eps = -2 j (goal - est)
            let up: Vec<f64> = side
                .goal
                .iter()
                .zip(&side.est_target)
                .map(|(gl, e)| sign * slope * -2.0 * j * (gl - e))
                .collect();
            ctx.target.backward_into(&up, &side.cache, &mut g)?;
        }
        Some(g)
    } else {
        None
    };

    let observation = match (w.obs_target, w.obs_ref, l.obs_target, l.obs_ref) {
        (Some(tw), Some(rw), Some(tl), Some(rl)) => Some(Observation {
            k: t - 1,
            target_w: tw,
            target_l: tl,
            ref_w: rw,
            ref_l: rl,
        }),
        _ => None,
    };
    Ok(PairLoss { loss: b.loss, breakdown: Some(b), grad, observation })
}

/// The full DDE loss on one pair: single-shot estimates plus the correction
/// term from `table`. Gradient flows only through the target MSE terms.
pub fn dde_loss(ctx: &LossContext<'_>, pair: &PreferencePair, draw: &PairDraw) -> Result<(LossBreakdown, ParamGradient)> {
    let out = preference_loss(
        ctx,
        pair,
        draw,
        PreferenceOptions {
            estimator: Estimator::SingleShot,
            use_correction: true,
            weight: 1.0,
            want_grad: true,
            want_observation: false,
        },
    )?;
    Ok((out.breakdown.expect("preference loss has a breakdown"), out.grad.expect("gradient requested")))
}

/// One row of the credit-assignment diagnostic.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProfileRow {
    pub t: usize,
    pub abs_correction: f64,
    pub ddim_coefficient: f64,
}

/// `|correction_term(t)|` next to the single-shot amplification `c(t)` for
/// every step. Large correction saturates the loss near `t -> 0`; large
/// `c(t)` does the same near `t -> T`.
pub fn effective_weight_profile(s: &Schedule, table: &CalibrationTable) -> Result<Vec<ProfileRow>> {
    check_dim(s.steps(), table.len())?;
    let corr = table.correction_profile();
    Ok((1..=s.steps())
        .map(|t| ProfileRow {
            t,
            abs_correction: corr[t - 1].abs(),
            ddim_coefficient: s.single_shot_coefficient(t),
        })
        .collect())
}
