#![allow(dead_code)]

use dde::baselines::{method_loss, MethodKind, MethodSpec};
use dde::dde_core::{CalibrationTable, LossContext, PairDraw, Role};
use dde::{Architecture, NoisePredictor, PreferencePair, Schedule};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn normal_vec<R: Rng>(rng: &mut R, d: usize, scale: f64) -> Vec<f64> {
    (0..d).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect()
}

/// A small random problem: schedule, two distinct nets, a pair, a draw and a
/// non-trivial calibration table.
pub struct Problem {
    pub schedule: Schedule,
    pub target: NoisePredictor,
    pub reference: NoisePredictor,
    pub table: CalibrationTable,
    pub pair: PreferencePair,
    pub draw: PairDraw,
    pub beta_dpo: f64,
}

impl Problem {
    pub fn random(seed: u64) -> Problem {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let steps = rng.random_range(2..=20);
        let d = rng.random_range(1..=3);
        let n_classes = rng.random_range(1..=3);
        let arch = Architecture {
            input_dim: d,
            hidden: rng.random_range(3..=8),
            depth: rng.random_range(1..=2),
            n_classes,
            n_freqs: rng.random_range(1..=3),
            steps,
        };
        let schedule = Schedule::linear(steps, 1e-3, 0.2).unwrap();
        let target = NoisePredictor::init(arch, &mut rng).unwrap();
        let reference = NoisePredictor::init(arch, &mut rng).unwrap();
        let mut table = CalibrationTable::new(steps, 0.1).unwrap();
        for role in Role::ALL {
            for v in table.array_mut(role) {
                *v = -0.05 * rng.random::<f64>();
            }
        }
        let pair = PreferencePair {
            class: rng.random_range(0..n_classes),
            x0_w: normal_vec(&mut rng, d, 1.0),
            x0_l: normal_vec(&mut rng, d, 1.0),
            reward_w: 0.0,
            reward_l: -1.0,
        };
        let draw = PairDraw {
            t: rng.random_range(1..=steps),
            noise_w: normal_vec(&mut rng, d, 1.0),
            noise_l: normal_vec(&mut rng, d, 1.0),
        };
        // log-uniform in [0.1, 10] keeps the logit away from saturation
        let beta_dpo = 10f64.powf(rng.random_range(-1.0..1.0));
        Problem { schedule, target, reference, table, pair, draw, beta_dpo }
    }

    pub fn loss_with(&self, method: &MethodSpec, target: &NoisePredictor) -> f64 {
        let ctx = LossContext {
            schedule: &self.schedule,
            target,
            reference: &self.reference,
            table: &self.table,
            beta_dpo: self.beta_dpo,
        };
        method_loss(method, &ctx, &self.pair, &self.draw, false, false).unwrap().loss
    }

    pub fn analytic_grad(&self, method: &MethodSpec) -> Vec<f64> {
        let ctx = LossContext {
            schedule: &self.schedule,
            target: &self.target,
            reference: &self.reference,
            table: &self.table,
            beta_dpo: self.beta_dpo,
        };
        method_loss(method, &ctx, &self.pair, &self.draw, true, false).unwrap().grad.unwrap().0
    }

    /// Central differences over every parameter.
    pub fn numeric_grad(&self, method: &MethodSpec, h: f64) -> Vec<f64> {
        let base = self.target.params().to_vec();
        let arch = *self.target.architecture();
        (0..base.len())
            .map(|i| {
                let mut p = base.clone();
                p[i] = base[i] + h;
                let up = self.loss_with(method, &NoisePredictor::from_params(arch, p.clone()).unwrap());
                p[i] = base[i] - h;
                let down = self.loss_with(method, &NoisePredictor::from_params(arch, p).unwrap());
                (up - down) / (2.0 * h)
            })
            .collect()
    }
}

/// `||a - b|| / max(||a||, ||b||)`, or the absolute difference when both are
/// tiny.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = norm(a).max(norm(b));
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn all_methods() -> Vec<MethodSpec> {
    MethodKind::ALL.iter().map(|k| MethodSpec::new(*k)).collect()
}

/// Worst relative error over all methods and `n` random problems.
pub fn worst_gradient_error(n: u64, seed0: u64) -> (f64, String) {
    let mut worst = (0.0, String::new());
    for seed in seed0..seed0 + n {
        let prob = Problem::random(seed);
        for m in all_methods() {
            let a = prob.analytic_grad(&m);
            let num = prob.numeric_grad(&m, 1e-6);
            let e = relative_error(&a, &num);
            if e > worst.0 || e.is_nan() {
                worst = (e, format!("{} seed {seed} t {}", m.label(), prob.draw.t));
            }
        }
    }
    worst
}

/// A short schedule, a briefly pretrained reference and a small dataset.
pub struct Tiny {
    pub schedule: Schedule,
    pub world: dde::ToyWorld,
    pub reference: NoisePredictor,
    pub dataset: dde::PreferenceDataset,
}

pub fn tiny() -> Tiny {
    let steps = 20;
    let schedule = Schedule::linear(steps, 1e-3, 0.3).unwrap();
    let world = dde::ToyWorld::default();
    let arch = Architecture { steps, hidden: 16, ..Architecture::default() };
    let init = NoisePredictor::init(arch, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    let pre = dde::PretrainConfig {
        epochs: 2,
        iters_per_epoch: 60,
        batch_size: 32,
        n_data: 2000,
        n_val: 200,
        seed: 3,
        optimizer: dde::AdamConfig { learning_rate: 5e-3, ..dde::AdamConfig::default() },
    };
    let (reference, _) = dde::pretrain_reference(&world, &schedule, init, &pre).unwrap();
    let sampler = dde::SamplerConfig { n_steps: 10, ..dde::SamplerConfig::default() };
    let dataset = dde::build_preference_pairs(&world, &reference, &schedule, 64, &sampler, 5).unwrap();
    Tiny { schedule, world, reference, dataset }
}

pub fn tiny_train_config(kind: MethodKind, max_steps: usize) -> dde::TrainConfig {
    dde::TrainConfig { method: MethodSpec::new(kind), max_steps, batch_size: 8, ..dde::TrainConfig::default() }
}
