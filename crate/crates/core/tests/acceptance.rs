//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

mod common;

use std::time::Instant;

use dde::baselines::{MethodKind, MethodSpec};
use dde::dde_core::{calibration_observation, dde_loss, CalibrationTable, LossContext, PairDraw, Role};
use dde::evaluation::{evaluate, export_diagnostics, is_non_increasing, is_strictly_increasing, median, EvalConfig};
use dde::schedule::{gaussian_log_density, GaussianParams};
use dde::trainer::{pretrain_reference, train, TrainOutcome};
use dde::{
    build_preference_pairs, Checkpoint, EvalReport, ExperimentConfig, NoisePredictor, PreferenceDataset, Schedule,
    TrainConfig,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: String) -> Verdict {
    Verdict { pass, detail }
}

/// Shared default-config artifacts.
struct World {
    cfg: ExperimentConfig,
    s: Schedule,
    reference: NoisePredictor,
    dataset: PreferenceDataset,
    eval: EvalConfig,
}

impl World {
    fn build() -> World {
        let cfg = ExperimentConfig::default();
        let s = cfg.schedule.build().unwrap();
        let init = NoisePredictor::init(cfg.model, &mut ChaCha8Rng::seed_from_u64(cfg.seed)).unwrap();
        let (reference, _) = pretrain_reference(&cfg.world, &s, init, &cfg.pretrain).unwrap();
        let dataset =
            build_preference_pairs(&cfg.world, &reference, &s, cfg.data.n_pairs, &cfg.data.sampler, cfg.seed).unwrap();
        let eval = cfg.eval;
        World { cfg, s, reference, dataset, eval }
    }

    fn config(&self, method: MethodSpec, seed: u64) -> TrainConfig {
        TrainConfig { method, seed, ..self.cfg.train }
    }

    fn run(&self, method: MethodSpec, seed: u64) -> (TrainOutcome, EvalReport) {
        let out = train(&self.config(method, seed), &self.dataset, &self.reference, &self.s).unwrap();
        let report = evaluate(&method.label(), &out.target, &self.reference, &self.cfg.world, &self.s, &self.eval).unwrap();
        (out, report)
    }
}

fn schedule_identities() -> Verdict {
    let start = Instant::now();
    let s = Schedule::linear(1000, 1e-4, 0.02).unwrap();
    let mut worst: f64 = 0.0;
    for t in 0..=1000 {
        let (m, v) = s.iterated_forward_moments(t);
        let ab = s.alpha_bar(t);
        worst = worst.max((m - ab.sqrt()).abs()).max((v - (1.0 - ab)).abs());
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(worst <= 1e-12 && secs < 1.0, format!("max deviation {worst:.2e}, {secs:.3} s"))
}

fn telescoping_marginal() -> Verdict {
    let start = Instant::now();
    let s = Schedule::linear(1000, 1e-4, 0.02).unwrap();
    let n = 100_000;
    let x0 = 1.3;
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst_z: f64 = 0.0;
    for t in [1usize, 500, 1000] {
        let xs: Vec<f64> = (0..n)
            .map(|_| {
                let mut x = x0;
                for k in 1..=t {
                    x = s.alpha(k).sqrt() * x + s.beta(k).sqrt() * rng.sample::<f64, _>(StandardNormal);
                }
                x
            })
            .collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let ab = s.alpha_bar(t);
        let (m_true, v_true) = (ab.sqrt() * x0, 1.0 - ab);
        let z_mean = (mean - m_true).abs() / (v_true / n as f64).sqrt();
        let z_var = (var - v_true).abs() / (v_true * (2.0 / (n - 1) as f64).sqrt());
        worst_z = worst_z.max(z_mean).max(z_var);
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(worst_z < 3.0 && secs < 30.0, format!("worst |z| {worst_z:.2} over mean and variance, {secs:.1} s"))
}

fn gradient_correctness() -> Verdict {
    let start = Instant::now();
    let (err, at) = common::worst_gradient_error(12, 5000);
    let secs = start.elapsed().as_secs_f64();
    verdict(
        err < 1e-4 && secs < 120.0,
        format!("6 losses x 12 configurations, worst relative error {err:.2e} ({at}), {secs:.1} s"),
    )
}

fn fixed_point(w: &World) -> Verdict {
    let target = w.reference.clone_as_reference();
    let table = CalibrationTable::new(w.s.steps(), 0.1).unwrap();
    let ctx = LossContext { schedule: &w.s, target: &target, reference: &w.reference, table: &table, beta_dpo: 5000.0 };
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut worst: f64 = 0.0;
    let mut sum = 0.0;
    let batch = 64;
    for _ in 0..batch {
        let pair = &w.dataset.pairs[rng.random_range(0..w.dataset.len())];
        let draw = PairDraw {
            t: rng.random_range(1..=w.s.steps()),
            noise_w: common::normal_vec(&mut rng, 2, 1.0),
            noise_l: common::normal_vec(&mut rng, 2, 1.0),
        };
        let (b, _) = dde_loss(&ctx, pair, &draw).unwrap();
        worst = worst.max((b.loss - std::f64::consts::LN_2).abs());
        sum += b.loss;
    }
    let batch_dev = (sum / batch as f64 - std::f64::consts::LN_2).abs();
    verdict(worst <= 1e-10 && batch_dev <= 1e-10, format!("max |loss - ln 2| {worst:.1e} over {batch} pairs"))
}

fn calibration_semantics() -> Verdict {
    let s = Schedule::linear(1000, 1e-4, 0.02).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let n = 100_000;
    let mut worst_z: f64 = 0.0;
    let triples = 6;
    for _ in 0..triples {
        let d = rng.random_range(1..=3);
        let t = rng.random_range(2..=1000);
        let var = s.posterior_var(t);
        let mu_q = common::normal_vec(&mut rng, d, 1.0);
        let mu_m: Vec<f64> = mu_q.iter().map(|m| m + var.sqrt() * rng.random_range(-2.0..2.0)).collect();
        let q = GaussianParams { mean: mu_q.clone(), var };
        let p = GaussianParams { mean: mu_m, var };
        let closed = calibration_observation(&s, &q, &p, t).unwrap();
        let samples: Vec<f64> = (0..n)
            .map(|_| {
                let x: Vec<f64> = mu_q.iter().map(|m| m + var.sqrt() * rng.sample::<f64, _>(StandardNormal)).collect();
                gaussian_log_density(&x, &p).unwrap() - gaussian_log_density(&x, &q).unwrap()
            })
            .collect();
        let mean = samples.iter().sum::<f64>() / n as f64;
        let sd = (samples.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
        worst_z = worst_z.max((mean - closed).abs() / (sd / (n as f64).sqrt()));
    }
    verdict(worst_z < 3.0, format!("{triples} triples, worst |z| {worst_z:.2}"))
}

fn read_profile(path: &std::path::Path) -> (Vec<f64>, Vec<f64>) {
    let text = std::fs::read_to_string(path).unwrap();
    let rows: Vec<Vec<f64>> =
        text.lines().skip(1).map(|l| l.split(',').map(|v| v.parse().unwrap()).collect()).collect();
    (rows.iter().map(|r| r[1]).collect(), rows.iter().map(|r| r[2]).collect())
}

fn structural_claims(w: &World, run: &TrainOutcome) -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let (profile, _) = export_diagnostics(&run.table, &w.s, &run.log, dir.path()).unwrap();
    let (abs_corr, coef) = read_profile(&profile);
    let c_ok = is_strictly_increasing(&coef);
    let arrays_ok = Role::ALL.iter().all(|r| run.table.array(*r).iter().all(|v| *v <= 0.0));
    let d: Vec<f64> = (0..run.table.len()).map(|k| run.table.combined(k)).collect();
    let (pos, neg) = (d.iter().filter(|v| **v > 0.0).count(), d.iter().filter(|v| **v < 0.0).count());
    let mono = is_non_increasing(&abs_corr, 0.0);
    let rises = abs_corr.windows(2).filter(|p| p[1] > p[0]).count();
    verdict(
        c_ok && arrays_ok && mono,
        format!(
            "c(t) strictly increasing: {c_ok}; every array <= 0: {arrays_ok}; |correction| non-increasing: {mono} \
             ({rises} rises over {} steps; combined per-index terms {pos} positive / {neg} negative; \
             |correction| at t=1 {:.2e}, t=500 {:.2e})",
            abs_corr.len() - 1,
            abs_corr[0],
            abs_corr[499]
        ),
    )
}

fn calibration_stabilises(run: &TrainOutcome) -> Verdict {
    let ratio = run.log.calibration_settling_ratio().unwrap_or(f64::NAN);
    verdict(ratio < 0.1, format!("last-quarter / first-quarter mean |delta r| = {ratio:.3}"))
}

fn alignment(report: &EvalReport, secs: f64) -> Verdict {
    let (lo, hi) = report.improvement_ci;
    verdict(
        report.beat_ratio > 0.55 && report.n_samples >= 500 && lo > 0.0 && secs < 1800.0,
        format!(
            "beat ratio {:.3} over {} paired draws; reward {:.4} vs reference {:.4}, improvement {:+.4} \
             95% CI [{lo:+.4}, {hi:+.4}]; {secs:.0} s end to end",
            report.beat_ratio, report.n_samples, report.mean_reward, report.reference_mean_reward, report.improvement
        ),
    )
}

struct Sweep {
    dde: Vec<EvalReport>,
    single: Vec<EvalReport>,
    step: Vec<EvalReport>,
    middle: Vec<EvalReport>,
}

fn med(rs: &[EvalReport], f: impl Fn(&EvalReport) -> f64) -> f64 {
    median(&rs.iter().map(f).collect::<Vec<_>>())
}

fn ablation_direction(sw: &Sweep) -> Verdict {
    let r = |v: &[EvalReport]| med(v, |x| x.mean_reward);
    let i = |v: &[EvalReport]| med(v, |x| x.improvement);
    let (dde, single, step) = (r(&sw.dde), r(&sw.single), r(&sw.step));
    let pass = dde >= single && dde > step && i(&sw.step) <= i(&sw.dde);
    verdict(
        pass,
        format!(
            "{} seeds, median reward DDE {dde:.4}, DDE-Single {single:.4}, DDE-Step {step:.4}; \
             median improvement DDE {:+.4}, DDE-Step {:+.4}",
            sw.dde.len(),
            i(&sw.dde),
            i(&sw.step)
        ),
    )
}

fn half_range(sw: &Sweep) -> Verdict {
    let full = med(&sw.dde, |x| x.improvement);
    let mid = med(&sw.middle, |x| x.improvement);
    let mut detail = format!("{} seeds, median improvement [200, 700] {mid:+.4} vs full range {full:+.4}", sw.dde.len());
    if full <= 0.0 {
        detail.push_str(" (full-range improvement is not positive)");
    }
    verdict(mid >= 0.9 * full, detail)
}

fn reproducibility(w: &World, first: &(TrainOutcome, EvalReport)) -> Verdict {
    // pretraining and dataset generation repeated from scratch
    let again = World::build();
    let same_ref = again.reference.checksum() == w.reference.checksum() && again.dataset == w.dataset;
    let second = again.run(MethodSpec::new(MethodKind::Dde), w.cfg.train.seed);
    let ck = |o: &TrainOutcome| {
        Checkpoint { predictor: o.target.clone(), table: Some(o.table.clone()), optimizer: Some(o.optimizer.clone()), step: 0 }
            .to_bytes()
    };
    let same_ckpt = ck(&first.0) == ck(&second.0);
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.csv"), dir.path().join("b.csv"));
    first.0.log.write_csv(&a).unwrap();
    second.0.log.write_csv(&b).unwrap();
    let same_log = std::fs::read(&a).unwrap() == std::fs::read(&b).unwrap();
    let same_report = first.1.to_json() == second.1.to_json();
    verdict(
        same_ref && same_ckpt && same_log && same_report,
        format!("reference+dataset {same_ref}, checkpoint {same_ckpt}, log {same_log}, report {same_report}"),
    )
}

fn main() {
    let mut results: Vec<(u32, &str, Verdict)> = Vec::new();
    let mut report = |n: u32, name: &'static str, v: Verdict| {
        println!("[{}] {n:>2} {name}: {}", if v.pass { "PASS" } else { "FAIL" }, v.detail);
        results.push((n, name, v));
    };

    report(1, "schedule identities", schedule_identities());
    report(2, "telescoping marginal", telescoping_marginal());
    report(3, "gradient correctness", gradient_correctness());

    let start = Instant::now();
    let w = World::build();
    report(4, "fixed point", fixed_point(&w));
    report(5, "calibration semantics", calibration_semantics());

    let default_run = w.run(MethodSpec::new(MethodKind::Dde), w.cfg.train.seed);
    let secs = start.elapsed().as_secs_f64();
    report(6, "structural claims", structural_claims(&w, &default_run.0));
    report(7, "calibration stabilisation", calibration_stabilises(&default_run.0));
    report(8, "alignment efficacy", alignment(&default_run.1, secs));

    let seeds: Vec<u64> = (0..5).collect();
    let reports = |m: MethodSpec| -> Vec<EvalReport> {
        seeds
            .iter()
            .map(|&s| if m.kind == MethodKind::Dde && m.step_range.is_none() && s == w.cfg.train.seed {
                default_run.1.clone()
            } else {
                w.run(m, s).1
            })
            .collect()
    };
    let sweep = Sweep {
        dde: reports(MethodSpec::new(MethodKind::Dde)),
        single: reports(MethodSpec::new(MethodKind::DdeSingle)),
        step: reports(MethodSpec::new(MethodKind::DdeStep)),
        middle: reports(MethodSpec::new(MethodKind::Dde).with_step_range(200, 700)),
    };
    report(9, "ablation direction", ablation_direction(&sweep));
    report(10, "half-range training", half_range(&sweep));
    report(11, "reproducibility", reproducibility(&w, &default_run));

    let failed: Vec<u32> = results.iter().filter(|r| !r.2.pass).map(|r| r.0).collect();
    println!("\n{} of {} criteria passed", results.len() - failed.len(), results.len());
    if !failed.is_empty() {
        println!("failed: {failed:?}");
        std::process::exit(1);
    }
}
