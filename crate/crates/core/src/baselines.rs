//! Comparison objectives and ablations: SFT, uniform per-step DPO,
//! discounted DPO, and the two single-strategy DDE variants.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dataset::PreferencePair;
use crate::dde_core::{preference_loss, Estimator, LossBreakdown, LossContext, PairDraw, PairLoss, PreferenceOptions};
use crate::error::{check_dim, DdeError, Result};
use crate::predictor::{NoisePredictor, ParamGradient};
use crate::schedule::Schedule;

/// Default discount for the discounted baseline.
pub const DEFAULT_DISCOUNT: f64 = 0.995;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MethodKind {
    Sft,
    Uniform,
    Discounted,
    Dde,
    DdeStep,
    DdeSingle,
}

impl MethodKind {
    pub const ALL: [MethodKind; 6] = [
        MethodKind::Dde,
        MethodKind::DdeSingle,
        MethodKind::DdeStep,
        MethodKind::Uniform,
        MethodKind::Discounted,
        MethodKind::Sft,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MethodKind::Sft => "sft",
            MethodKind::Uniform => "uniform",
            MethodKind::Discounted => "discounted",
            MethodKind::Dde => "dde",
            MethodKind::DdeStep => "dde-step",
            MethodKind::DdeSingle => "dde-single",
        }
    }

    /// Whether training maintains the calibration table for this method.
    pub fn tracks_calibration(self) -> bool {
        matches!(self, MethodKind::Dde | MethodKind::DdeStep | MethodKind::DdeSingle)
    }

    pub fn uses_reference(self) -> bool {
        self != MethodKind::Sft
    }
}

impl fmt::Display for MethodKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MethodKind {
    type Err = DdeError;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_lowercase().replace('_', "-");
        MethodKind::ALL
            .into_iter()
            .find(|m| m.name() == norm)
            .ok_or_else(|| {
                let valid: Vec<_> = MethodKind::ALL.iter().map(|m| m.name()).collect();
                DdeError::InvalidConfig(format!("unknown method '{s}'; valid methods: {}", valid.join(", ")))
            })
    }
}

/// A training objective together with its options.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MethodSpec {
    pub kind: MethodKind,
    /// Discount `gamma`; present iff `kind` is `Discounted`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub discount: Option<f64>,
    /// Inclusive `[t_lo, t_hi]` restriction on sampled steps.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub step_range: Option<(usize, usize)>,
}

impl Default for MethodSpec {
    fn default() -> Self {
        MethodSpec::new(MethodKind::Dde)
    }
}

impl MethodSpec {
    /// Spec for `kind`, filling in the default discount where one is required.
    pub fn new(kind: MethodKind) -> Self {
        MethodSpec {
            kind,
            discount: (kind == MethodKind::Discounted).then_some(DEFAULT_DISCOUNT),
            step_range: None,
        }
    }

    pub fn with_step_range(mut self, lo: usize, hi: usize) -> Self {
        self.step_range = Some((lo, hi));
        self
    }

    pub fn validate(&self, steps: usize) -> Result<()> {
        match (self.kind, self.discount) {
            (MethodKind::Discounted, Some(g)) if g > 0.0 && g <= 1.0 => {}
            (MethodKind::Discounted, Some(g)) => {
                return Err(DdeError::InvalidConfig(format!("discount must lie in (0, 1], got {g}")))
            }
            (MethodKind::Discounted, None) => {
                return Err(DdeError::InvalidConfig("discounted method requires a discount".into()))
            }
            (_, Some(_)) => {
                return Err(DdeError::InvalidConfig(format!("discount is only valid for the discounted method, not {}", self.kind)))
            }
            _ => {}
        }
        if let Some((lo, hi)) = self.step_range {
            if !(1 <= lo && lo <= hi && hi <= steps) {
                return Err(DdeError::InvalidConfig(format!(
                    "step range {lo}:{hi} must satisfy 1 <= lo <= hi <= {steps}"
                )));
            }
        }
        Ok(())
    }

    /// Inclusive range of steps to sample from.
    pub fn steps_to_sample(&self, steps: usize) -> (usize, usize) {
        self.step_range.unwrap_or((1, steps))
    }

    /// Short label, e.g. `dde[200:700]`.
    pub fn label(&self) -> String {
        match self.step_range {
            Some((lo, hi)) => format!("{}[{lo}:{hi}]", self.kind),
            None => self.kind.to_string(),
        }
    }
}

fn opts(estimator: Estimator, use_correction: bool, weight: f64, want_grad: bool, want_observation: bool) -> PreferenceOptions {
    PreferenceOptions { estimator, use_correction, weight, want_grad, want_observation }
}

/// Noise-prediction MSE on the winning sample only.
pub fn sft_loss(
    s: &Schedule,
    target: &NoisePredictor,
    pair: &PreferencePair,
    t: usize,
    noise_w: &[f64],
) -> Result<(f64, ParamGradient)> {
    check_dim(pair.x0_w.len(), noise_w.len())?;
    let x_t = s.forward_marginal(&pair.x0_w, t, noise_w)?;
    let mut g = ParamGradient::zeros(target.num_params());
    let loss = target.noise_mse(&x_t, t, pair.class, noise_w, Some(&mut g))?;
    Ok((loss, g))
}

/// Per-step DPO with the posterior-mean MSE at `t` and no correction.
pub fn uniform_dpo_loss(ctx: &LossContext<'_>, pair: &PreferencePair, draw: &PairDraw) -> Result<(LossBreakdown, ParamGradient)> {
    unpack(preference_loss(ctx, pair, draw, opts(Estimator::PerStep, false, 1.0, true, false))?)
}

/// Uniform DPO with the logit scaled by `discount^(T - t)`.
pub fn discounted_dpo_loss(
    ctx: &LossContext<'_>,
    pair: &PreferencePair,
    draw: &PairDraw,
    discount: f64,
) -> Result<(LossBreakdown, ParamGradient)> {
    if !(discount > 0.0 && discount <= 1.0) {
        return Err(DdeError::InvalidRange(format!("discount must lie in (0, 1], got {discount}")));
    }
    let w = discount_weight(ctx.schedule.steps(), draw.t, discount);
    unpack(preference_loss(ctx, pair, draw, opts(Estimator::PerStep, false, w, true, false))?)
}

/// Correction term plus per-step posterior MSE at `t`; no single-shot jump.
pub fn dde_step_loss(ctx: &LossContext<'_>, pair: &PreferencePair, draw: &PairDraw) -> Result<(LossBreakdown, ParamGradient)> {
    unpack(preference_loss(ctx, pair, draw, opts(Estimator::PerStep, true, 1.0, true, false))?)
}

/// Single-shot estimation with the correction term forced to zero.
pub fn dde_single_loss(ctx: &LossContext<'_>, pair: &PreferencePair, draw: &PairDraw) -> Result<(LossBreakdown, ParamGradient)> {
    unpack(preference_loss(ctx, pair, draw, opts(Estimator::SingleShot, false, 1.0, true, false))?)
}

/// `discount^(T - t)`: 1 at the first denoising step `t = T`.
pub fn discount_weight(steps: usize, t: usize, discount: f64) -> f64 {
    discount.powi((steps - t) as i32)
}

fn unpack(out: PairLoss) -> Result<(LossBreakdown, ParamGradient)> {
    Ok((out.breakdown.expect("preference loss has a breakdown"), out.grad.expect("gradient requested")))
}

/// Evaluates `method` on one pair. Observations are only produced for
/// methods that track calibration and only when `want_observation` is set.
pub fn method_loss(
    method: &MethodSpec,
    ctx: &LossContext<'_>,
    pair: &PreferencePair,
    draw: &PairDraw,
    want_grad: bool,
    want_observation: bool,
) -> Result<PairLoss> {
    let obs = want_observation && method.kind.tracks_calibration();
    let o = match method.kind {
        MethodKind::Sft => {
            let x_t = ctx.schedule.forward_marginal(&pair.x0_w, draw.t, &draw.noise_w)?;
            let mut g = want_grad.then(|| ParamGradient::zeros(ctx.target.num_params()));
            let loss = ctx.target.noise_mse(&x_t, draw.t, pair.class, &draw.noise_w, g.as_mut())?;
            return Ok(PairLoss { loss, breakdown: None, grad: g, observation: None });
        }
        MethodKind::Uniform => opts(Estimator::PerStep, false, 1.0, want_grad, obs),
        MethodKind::Discounted => {
            let g = method
                .discount
                .ok_or_else(|| DdeError::InvalidConfig("discounted method requires a discount".into()))?;
            opts(Estimator::PerStep, false, discount_weight(ctx.schedule.steps(), draw.t, g), want_grad, obs)
        }
        MethodKind::Dde => opts(Estimator::SingleShot, true, 1.0, want_grad, obs),
        MethodKind::DdeStep => opts(Estimator::PerStep, true, 1.0, want_grad, obs),
        MethodKind::DdeSingle => opts(Estimator::SingleShot, false, 1.0, want_grad, obs),
    };
    preference_loss(ctx, pair, draw, o)
}
