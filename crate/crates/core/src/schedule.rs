//! Diffusion constants and the closed-form DDPM/DDIM distributions.
//!
//! All arrays are indexed by step `t` with an explicit slot for `t = 0`,
//! where `alpha_bar(0) = 1`. Steps run `1..=T`.

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, DdeError, Result};

/// Precomputed linear-beta diffusion schedule.
#[derive(Debug, Clone, PartialEq)]
pub struct Schedule {
    steps: usize,
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
    posterior_vars: Vec<f64>,
}

/// Isotropic Gaussian: `N(mean, var * I)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianParams {
    pub mean: Vec<f64>,
    pub var: f64,
}

/// The three numbers that define a schedule, as stored in config files.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleParams {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleParams {
    fn default() -> Self {
        ScheduleParams {
            steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

impl ScheduleParams {
    pub fn build(&self) -> Result<Schedule> {
        Schedule::linear(self.steps, self.beta_start, self.beta_end)
    }
}

impl Schedule {
    /// Builds a schedule with `steps` linearly spaced betas.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(DdeError::InvalidRange("T must be at least 1".into()));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(DdeError::InvalidRange(format!(
                "need 0 < beta_start <= beta_end < 1, got {beta_start} and {beta_end}"
            )));
        }
        let mut betas = Vec::with_capacity(steps + 1);
        betas.push(0.0);
        for i in 0..steps {
            let frac = if steps == 1 {
                0.0
            } else {
                i as f64 / (steps - 1) as f64
            };
            betas.push(beta_start + (beta_end - beta_start) * frac);
        }
        Ok(Self::from_betas_unchecked(betas))
    }

    fn from_betas_unchecked(betas: Vec<f64>) -> Self {
        let steps = betas.len() - 1;
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = vec![1.0; steps + 1];
        for t in 1..=steps {
            alpha_bars[t] = alpha_bars[t - 1] * alphas[t];
        }
        let mut posterior_vars = vec![0.0; steps + 1];
        for t in 1..=steps {
            posterior_vars[t] = (1.0 - alpha_bars[t - 1]) / (1.0 - alpha_bars[t]) * betas[t];
        }
        Schedule {
            steps,
            betas,
            alphas,
            alpha_bars,
            posterior_vars,
        }
    }

    /// Number of diffusion steps `T`.
    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t]
    }

    /// Cumulative product of alphas; `alpha_bar(0) == 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    /// Posterior variance `sigma_t^2` of `q(x_{t-1} | x_t, x_0)`; zero at `t = 1`.
    pub fn posterior_var(&self, t: usize) -> f64 {
        self.posterior_vars[t]
    }

    pub fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps {
            return Err(DdeError::StepOutOfRange { t, max: self.steps });
        }
        Ok(())
    }

    /// Coefficients `(on x0, on x_t)` of the posterior mean at step `t`.
    pub fn posterior_coefficients(&self, t: usize) -> (f64, f64) {
        let ab = self.alpha_bars[t];
        let ab_prev = self.alpha_bars[t - 1];
        let denom = 1.0 - ab;
        (
            ab_prev.sqrt() * self.betas[t] / denom,
            self.alphas[t].sqrt() * (1.0 - ab_prev) / denom,
        )
    }

    /// Amplification of predicted noise when jumping from `t` straight to
    /// step 0: `sqrt(1 - abar_t) / sqrt(abar_t)`.
    pub fn single_shot_coefficient(&self, t: usize) -> f64 {
        let ab = self.alpha_bars[t];
        ((1.0 - ab) / ab).sqrt()
    }

    /// Samples `x_t ~ q(x_t | x0)` using the supplied standard-normal draw.
    pub fn forward_marginal(&self, x0: &[f64], t: usize, eps: &[f64]) -> Result<Vec<f64>> {
        self.check_step(t)?;
        check_dim(x0.len(), eps.len())?;
        let ab = self.alpha_bars[t];
        let (a, s) = (ab.sqrt(), (1.0 - ab).sqrt());
        Ok(x0.iter().zip(eps).map(|(x, e)| a * x + s * e).collect())
    }

    /// Parameters of `q(x_{t-1} | x_t, x0)`.
    pub fn posterior_params(&self, x_t: &[f64], x0: &[f64], t: usize) -> Result<GaussianParams> {
        self.check_step(t)?;
        check_dim(x_t.len(), x0.len())?;
        let (c0, ct) = self.posterior_coefficients(t);
        Ok(GaussianParams {
            mean: x0.iter().zip(x_t).map(|(a, b)| c0 * a + ct * b).collect(),
            var: self.posterior_vars[t],
        })
    }

    /// DDIM transition from `t` to `t_prime` with variance `sigma_t^2` from
    /// the schedule. The radicand `1 - abar_{t'} - sigma^2` is clamped at 0.
    pub fn ddim_mean(
        &self,
        x_t: &[f64],
        eps_pred: &[f64],
        t: usize,
        t_prime: usize,
    ) -> Result<GaussianParams> {
        self.ddim_mean_with_var(x_t, eps_pred, t, t_prime, self.posterior_vars.get(t).copied().unwrap_or(0.0))
    }

    /// DDIM transition with an explicit injected variance. `var = 0` is the
    /// deterministic DDIM update.
    pub fn ddim_mean_with_var(
        &self,
        x_t: &[f64],
        eps_pred: &[f64],
        t: usize,
        t_prime: usize,
        var: f64,
    ) -> Result<GaussianParams> {
        self.check_step(t)?;
        if t_prime >= t {
            return Err(DdeError::StepOrdering { t, t_prime });
        }
        check_dim(x_t.len(), eps_pred.len())?;
        let ab = self.alpha_bars[t];
        let ab_prime = self.alpha_bars[t_prime];
        let (a, s) = (ab.sqrt(), (1.0 - ab).sqrt());
        let a_prime = ab_prime.sqrt();
        let dir = (1.0 - ab_prime - var).max(0.0).sqrt();
        let mean = x_t
            .iter()
            .zip(eps_pred)
            .map(|(x, e)| a_prime * (x - s * e) / a + dir * e)
            .collect();
        Ok(GaussianParams { mean, var })
    }

    /// Single-call estimate of `x0` from `x_t` (DDIM straight to step 0).
    pub fn single_shot_mean(&self, x_t: &[f64], eps_pred: &[f64], t: usize) -> Result<Vec<f64>> {
        Ok(self.ddim_mean(x_t, eps_pred, t, 0)?.mean)
    }

    /// Per-dimension variance after composing the one-step forward kernel
    /// `t` times, starting from a point mass. Used to cross-check the
    /// closed-form marginal.
    pub fn iterated_forward_moments(&self, t: usize) -> (f64, f64) {
        let mut mean_factor = 1.0;
        let mut var = 0.0;
        for i in 1..=t {
            mean_factor *= self.alphas[i].sqrt();
            var = self.alphas[i] * var + self.betas[i];
        }
        (mean_factor, var)
    }
}

/// Log density of an isotropic Gaussian.
pub fn gaussian_log_density(x: &[f64], p: &GaussianParams) -> Result<f64> {
    if !(p.var > 0.0) {
        return Err(DdeError::ZeroVariance(0));
    }
    check_dim(p.mean.len(), x.len())?;
    let d = x.len() as f64;
    let sq: f64 = x.iter().zip(&p.mean).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(-0.5 * d * (2.0 * std::f64::consts::PI * p.var).ln() - sq / (2.0 * p.var))
}

pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx_eq::assert_close;

    mod approx_eq {
        macro_rules! assert_close {
            ($a:expr, $b:expr, $tol:expr) => {{
                let (a, b): (f64, f64) = ($a, $b);
                assert!((a - b).abs() <= $tol, "{a} vs {b} (tol {})", $tol);
            }};
        }
        pub(crate) use assert_close;
    }

    fn half() -> Schedule {
        Schedule::linear(2, 0.5, 0.5).unwrap()
    }

    #[test]
    fn two_step_alpha_bars() {
        let s = half();
        assert_eq!(s.alpha_bar(1), 0.5);
        assert_eq!(s.alpha_bar(2), 0.25);
        assert_eq!(s.posterior_var(1), 0.0);
    }

    #[test]
    fn thousand_steps() {
        let s = Schedule::linear(1000, 1e-4, 0.02).unwrap();
        assert_eq!(s.steps(), 1000);
        assert_close!(s.beta(1), 1e-4, 1e-18);
        assert_close!(s.beta(1000), 0.02, 1e-18);
        for t in 1..=1000 {
            assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
            assert!(s.alpha_bar(t) > 0.0);
            if t >= 2 {
                assert!(s.posterior_var(t) > 0.0);
            }
        }
    }

    #[test]
    fn single_step_boundary() {
        let s = Schedule::linear(1, 0.01, 0.01).unwrap();
        assert_close!(s.alpha_bar(1), 0.99, 1e-15);
        assert_eq!(s.posterior_var(1), 0.0);
    }

    #[test]
    fn rejects_bad_ranges() {
        assert!(matches!(Schedule::linear(0, 0.1, 0.2), Err(DdeError::InvalidRange(_))));
        assert!(Schedule::linear(10, 0.0, 0.2).is_err());
        assert!(Schedule::linear(10, 0.3, 0.2).is_err());
        assert!(Schedule::linear(10, 0.1, 1.0).is_err());
    }

    #[test]
    fn forward_marginal_cases() {
        let s = half();
        let x = s.forward_marginal(&[1.0, 0.0], 2, &[0.0, 1.0]).unwrap();
        assert_close!(x[0], 0.5, 1e-15);
        assert_close!(x[1], 0.75f64.sqrt(), 1e-15);

        let z = s.forward_marginal(&[0.0, 0.0], 1, &[0.3, -0.2]).unwrap();
        assert_close!(z[0], 0.3 * 0.5f64.sqrt(), 1e-15);

        let m = s.forward_marginal(&[2.0], 2, &[0.0]).unwrap();
        assert_close!(m[0], 1.0, 1e-15);

        assert!(matches!(
            s.forward_marginal(&[1.0], 3, &[0.0]),
            Err(DdeError::StepOutOfRange { t: 3, max: 2 })
        ));
        assert!(s.forward_marginal(&[1.0], 0, &[0.0]).is_err());
    }

    #[test]
    fn posterior_hand_arithmetic() {
        let s = half();
        let p = s.posterior_params(&[1.0, 0.0], &[1.0, 0.0], 2).unwrap();
        // sqrt(0.5)*0.5/0.75 twice
        let expected = 2.0 * (0.5f64.sqrt() * 0.5 / 0.75);
        assert_close!(p.mean[0], expected, 1e-15);
        assert_close!(p.mean[0], 0.9428, 1e-4);
        assert_eq!(p.mean[1], 0.0);
        assert_close!(p.var, 1.0 / 3.0, 1e-15);

        let p1 = s.posterior_params(&[5.0, -3.0], &[0.25, 0.5], 1).unwrap();
        assert_close!(p1.mean[0], 0.25, 1e-15);
        assert_close!(p1.mean[1], 0.5, 1e-15);
        assert_eq!(p1.var, 0.0);

        let p0 = s.posterior_params(&[0.0, 0.0], &[0.0, 0.0], 2).unwrap();
        assert_eq!(p0.mean, vec![0.0, 0.0]);
    }

    #[test]
    fn ddim_hand_arithmetic() {
        let s = half();
        let g = s.ddim_mean(&[1.0, 0.0], &[1.0, 0.0], 2, 1).unwrap();
        let x0_hat = (1.0 - 0.75f64.sqrt()) / 0.25f64.sqrt();
        let dir = (1.0 - 0.5 - 1.0 / 3.0f64).sqrt();
        assert_close!(g.mean[0], 0.5f64.sqrt() * x0_hat + dir, 1e-14);
        assert_close!(g.mean[0], 0.597717, 1e-6);
        assert_eq!(g.mean[1], 0.0);
        assert_close!(g.var, 1.0 / 3.0, 1e-15);

        assert!(matches!(
            s.ddim_mean(&[1.0], &[1.0], 1, 1),
            Err(DdeError::StepOrdering { t: 1, t_prime: 1 })
        ));
    }

    #[test]
    fn ddim_exact_noise_recovers_x0() {
        let s = Schedule::linear(50, 1e-3, 0.05).unwrap();
        let x0 = [0.7, -1.3];
        let eps = [0.4, 1.1];
        for t in [1, 7, 50] {
            let xt = s.forward_marginal(&x0, t, &eps).unwrap();
            let m = s.single_shot_mean(&xt, &eps, t).unwrap();
            assert_close!(m[0], x0[0], 1e-12);
            assert_close!(m[1], x0[1], 1e-12);
        }
    }

    #[test]
    fn ddim_zero_noise_path() {
        let s = Schedule::linear(50, 1e-3, 0.05).unwrap();
        let x0 = [0.7, -1.3];
        let xt: Vec<f64> = x0.iter().map(|v| v * s.alpha_bar(30).sqrt()).collect();
        let g = s.ddim_mean(&xt, &[0.0, 0.0], 30, 12).unwrap();
        for (i, x) in x0.iter().enumerate() {
            assert_close!(g.mean[i], s.alpha_bar(12).sqrt() * x, 1e-12);
        }
    }

    #[test]
    fn single_shot_zero_eps_and_amplification() {
        let s = Schedule::linear(1000, 1e-4, 0.02).unwrap();
        let m = s.single_shot_mean(&[0.3], &[0.0], 400).unwrap();
        assert_close!(m[0], 0.3 / s.alpha_bar(400).sqrt(), 1e-12);

        // Scalar oracle at t = T.
        let ab = s.alpha_bar(1000);
        let (xt, e) = (0.8, 0.9);
        let expected = (xt - (1.0f64 - ab).sqrt() * e) / ab.sqrt();
        let got = s.single_shot_mean(&[xt], &[e], 1000).unwrap()[0];
        assert_close!(got, expected, 1e-9 * expected.abs());
        assert!(got.abs() > 10.0);
    }

    #[test]
    fn single_shot_coefficient_increasing() {
        let s = Schedule::linear(1000, 1e-4, 0.02).unwrap();
        for t in 2..=1000 {
            assert!(s.single_shot_coefficient(t) > s.single_shot_coefficient(t - 1));
        }
    }

    #[test]
    fn iterated_kernel_matches_marginal() {
        let s = Schedule::linear(1000, 1e-4, 0.02).unwrap();
        for t in 1..=1000 {
            let (m, v) = s.iterated_forward_moments(t);
            assert_close!(m, s.alpha_bar(t).sqrt(), 1e-12);
            assert_close!(v, 1.0 - s.alpha_bar(t), 1e-12);
        }
    }

    #[test]
    fn log_density_values() {
        let p = GaussianParams { mean: vec![0.0], var: 1.0 };
        let c = -0.5 * (2.0 * std::f64::consts::PI).ln();
        assert_close!(gaussian_log_density(&[0.0], &p).unwrap(), c, 1e-15);
        assert_close!(gaussian_log_density(&[1.0], &p).unwrap(), c - 0.5, 1e-15);
        let z = GaussianParams { mean: vec![0.0], var: 0.0 };
        assert!(matches!(gaussian_log_density(&[0.0], &z), Err(DdeError::ZeroVariance(_))));
    }

    #[test]
    fn log_density_integrates_to_one_in_2d() {
        // Midpoint-rule quadrature on [-8, 8]^2 around the mean.
        let p = GaussianParams { mean: vec![0.3, -0.4], var: 0.7 };
        let n = 400;
        let h = 16.0 / n as f64;
        let mut total = 0.0;
        for i in 0..n {
            for j in 0..n {
                let x = [0.3 - 8.0 + (i as f64 + 0.5) * h, -0.4 - 8.0 + (j as f64 + 0.5) * h];
                total += gaussian_log_density(&x, &p).unwrap().exp() * h * h;
            }
        }
        assert_close!(total, 1.0, 1e-9);
    }

    use proptest::prelude::*;

    proptest! {
        #[test]
        fn ddim_consecutive_matches_posterior(
            t in 2usize..=200,
            x0 in prop::collection::vec(-3.0f64..3.0, 3),
            eps in prop::collection::vec(-3.0f64..3.0, 3),
        ) {
            let s = Schedule::linear(200, 1e-4, 0.02).unwrap();
            let xt = s.forward_marginal(&x0, t, &eps).unwrap();
            let post = s.posterior_params(&xt, &x0, t).unwrap();
            let ddim = s.ddim_mean(&xt, &eps, t, t - 1).unwrap();
            for (a, b) in post.mean.iter().zip(&ddim.mean) {
                prop_assert!((a - b).abs() < 1e-10, "{} vs {}", a, b);
            }
            prop_assert_eq!(post.var, ddim.var);
        }
    }
}
