use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use dde::checkpoint::file_sha256;
use dde::evaluation::{ablation_grid, evaluate, export_diagnostics, grid_table};
use dde::trainer::{pretrain_reference, Trainer};
use dde::{
    build_preference_pairs, Checkpoint, DdeError, ExperimentConfig, MethodKind, MethodSpec, NoisePredictor,
    PreferenceDataset,
};

#[derive(Parser)]
#[command(name = "dde", version, about = "Preference optimization of toy diffusion models")]
struct Cli {
    /// Experiment config (TOML).
    #[arg(long, short, global = true, default_value = "dde.toml")]
    config: PathBuf,
    /// Worker threads; defaults to the machine's parallelism.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a config file with every default filled in.
    Init {
        #[arg(long)]
        force: bool,
    },
    /// Pretrain the reference model.
    Pretrain,
    /// Sample preference pairs from the reference.
    GenData,
    /// Fine-tune a copy of the reference on the preference pairs.
    Train {
        #[arg(long)]
        method: Option<MethodKind>,
        /// Restrict sampled steps, e.g. `200:700`.
        #[arg(long, value_parser = parse_range)]
        step_range: Option<(usize, usize)>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        max_steps: Option<usize>,
        /// Continue from a saved training checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Compare a checkpoint against a baseline (the reference by default).
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        baseline: Option<PathBuf>,
        /// Report file stem; defaults to the checkpoint's directory name.
        #[arg(long)]
        name: Option<String>,
    },
    /// Train and evaluate every configured method, seed and step range.
    Ablate,
}

fn parse_range(s: &str) -> Result<(usize, usize), String> {
    let (a, b) = s.split_once(':').ok_or_else(|| format!("expected LO:HI, got `{s}`"))?;
    let lo = a.trim().parse().map_err(|_| format!("bad lower bound `{a}`"))?;
    let hi = b.trim().parse().map_err(|_| format!("bad upper bound `{b}`"))?;
    Ok((lo, hi))
}

/// Distinguishes bad input (exit 1) from failures while running (exit 2).
enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<DdeError> for Failure {
    fn from(e: DdeError) -> Self {
        match e {
            DdeError::InvalidConfig(_) | DdeError::InvalidRange(_) => Failure::Usage(e.to_string()),
            _ => Failure::Runtime(e.to_string()),
        }
    }
}

type CmdResult = Result<(), Failure>;

fn write_json(path: &Path, value: &serde_json::Value) -> Result<(), DdeError> {
    let text = serde_json::to_string_pretty(value).expect("json value serialises");
    std::fs::write(path, text).map_err(|e| DdeError::Io { path: path.to_path_buf(), source: e })
}

fn mkdirs(dir: &Path) -> Result<(), DdeError> {
    std::fs::create_dir_all(dir).map_err(|e| DdeError::Io { path: dir.to_path_buf(), source: e })
}

fn parent(p: &Path) -> PathBuf {
    p.parent().map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("."))
}

fn load_reference(cfg: &ExperimentConfig) -> Result<NoisePredictor, DdeError> {
    let ck = Checkpoint::load(&cfg.paths.reference())?;
    if ck.predictor.architecture() != &cfg.model {
        return Err(DdeError::Incompatible(format!(
            "reference at {} was built for a different model architecture",
            cfg.paths.reference().display()
        )));
    }
    Ok(ck.predictor)
}

fn cmd_init(path: &Path, force: bool) -> CmdResult {
    if path.exists() && !force {
        return Err(Failure::Usage(format!("{} exists; pass --force to overwrite", path.display())));
    }
    std::fs::write(path, ExperimentConfig::default().to_toml())
        .map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))?;
    println!("wrote {}", path.display());
    Ok(())
}

fn cmd_pretrain(cfg: &ExperimentConfig) -> CmdResult {
    let s = cfg.schedule.build()?;
    let init = NoisePredictor::init(cfg.model, &mut ChaCha8Rng::seed_from_u64(cfg.seed))?;
    let (net, report) = pretrain_reference(&cfg.world, &s, init, &cfg.pretrain)?;
    let out = cfg.paths.reference();
    let dir = parent(&out);
    mkdirs(&dir)?;
    Checkpoint::model_only(net.clone()).save(&out)?;
    cfg.write_next_to(&dir)?;
    write_json(
        &out.with_extension("manifest.json"),
        &json!({
            "artifact": out,
            "sha256": file_sha256(&out)?,
            "model_checksum": net.checksum(),
            "config_hash": cfg.hash(),
            "steps": s.steps(),
            "seed": cfg.seed,
            "pretrain_seed": cfg.pretrain.seed,
            "val_mse": report.val_mse,
        }),
    )?;
    println!("reference written to {} (validation mse {:.4})", out.display(), report.final_val_mse());
    Ok(())
}

fn cmd_gen_data(cfg: &ExperimentConfig) -> CmdResult {
    let s = cfg.schedule.build()?;
    let reference = load_reference(cfg)?;
    let ds = build_preference_pairs(&cfg.world, &reference, &s, cfg.data.n_pairs, &cfg.data.sampler, cfg.seed)?;
    let out = cfg.paths.dataset();
    let dir = parent(&out);
    mkdirs(&dir)?;
    ds.save(&out)?;
    cfg.write_next_to(&dir)?;
    let summary = ds.summary();
    write_json(
        &out.with_extension("summary.json"),
        &json!({
            "artifact": out,
            "sha256": file_sha256(&out)?,
            "config_hash": cfg.hash(),
            "summary": summary,
        }),
    )?;
    println!(
        "{} pairs written to {} ({} ties dropped)",
        summary.pairs,
        out.display(),
        summary.dropped_ties
    );
    Ok(())
}

fn cmd_train(
    mut cfg: ExperimentConfig,
    method: Option<MethodKind>,
    step_range: Option<(usize, usize)>,
    seed: Option<u64>,
    max_steps: Option<usize>,
    resume: Option<PathBuf>,
) -> CmdResult {
    if let Some(kind) = method {
        let keep_range = cfg.train.method.step_range;
        cfg.train.method = MethodSpec { step_range: keep_range, ..MethodSpec::new(kind) };
    }
    if let Some((lo, hi)) = step_range {
        cfg.train.method = cfg.train.method.with_step_range(lo, hi);
    }
    if let Some(v) = seed {
        cfg.train.seed = v;
    }
    if let Some(v) = max_steps {
        cfg.train.max_steps = v;
    }
    cfg.validate()?;
    let s = cfg.schedule.build()?;
    let reference = load_reference(&cfg)?;
    let ds = PreferenceDataset::load(&cfg.paths.dataset())?;
    let dir = cfg.paths.checkpoints().join(format!("{}-seed{}", cfg.train.method.label(), cfg.train.seed));
    mkdirs(&dir)?;
    cfg.write_next_to(&dir)?;

    let mut trainer = Trainer::new(cfg.train, &ds, &reference, &s)?;
    if let Some(path) = resume {
        let ck = Checkpoint::load(&path)?;
        let (Some(table), Some(opt)) = (ck.table, ck.optimizer) else {
            return Err(Failure::Usage(format!("{} holds no training state", path.display())));
        };
        trainer = trainer.resume(ck.predictor, table, opt, ck.step as usize)?;
    }
    let every = cfg.checkpoint_every;
    let out = trainer.run_with(|t| {
        if every > 0 && t.step % every == 0 {
            Checkpoint {
                predictor: t.target.clone(),
                table: Some(t.table.clone()),
                optimizer: Some(t.optimizer.clone()),
                step: t.step as u64,
            }
            .save(&dir.join(format!("step-{:06}.ckpt", t.step)))?;
        }
        Ok(())
    })?;
    let final_path = dir.join("final.ckpt");
    Checkpoint {
        predictor: out.target.clone(),
        table: Some(out.table.clone()),
        optimizer: Some(out.optimizer.clone()),
        step: cfg.train.max_steps as u64,
    }
    .save(&final_path)?;
    out.table.write_csv(&dir.join("calibration.csv"))?;
    out.log.write_csv(&dir.join("train_log.csv"))?;
    export_diagnostics(&out.table, &s, &out.log, &dir)?;
    write_json(
        &dir.join("manifest.json"),
        &json!({
            "checkpoint": final_path,
            "sha256": file_sha256(&final_path)?,
            "config_hash": cfg.hash(),
            "method": cfg.train.method.label(),
            "seed": cfg.train.seed,
            "steps": s.steps(),
            "reference_checksum": reference.checksum(),
            "t_counts_nonzero": out.log.t_counts.iter().filter(|c| **c > 0).count(),
        }),
    )?;
    if let Some(last) = out.log.records.last() {
        println!("step {} loss {:.4} logit {:.3}", last.step, last.loss, last.logit_mean);
    }
    println!("artifacts written to {}", dir.display());
    Ok(())
}

fn cmd_eval(cfg: &ExperimentConfig, checkpoint: &Path, baseline: Option<&Path>, name: Option<String>) -> CmdResult {
    let s = cfg.schedule.build()?;
    let net = Checkpoint::load(checkpoint)?.predictor;
    let base = match baseline {
        Some(p) => Checkpoint::load(p)?.predictor,
        None => load_reference(cfg)?,
    };
    let name = name.unwrap_or_else(|| {
        checkpoint
            .parent()
            .and_then(Path::file_name)
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| "eval".into())
    });
    let report = evaluate(&name, &net, &base, &cfg.world, &s, &cfg.eval)?;
    let dir = cfg.paths.reports();
    mkdirs(&dir)?;
    report.save(&dir.join(format!("{name}.json")), &dir.join(format!("{name}.txt")))?;
    cfg.write_next_to(&dir)?;
    print!("{}", report.to_text());
    Ok(())
}

fn cmd_ablate(cfg: &ExperimentConfig) -> CmdResult {
    let s = cfg.schedule.build()?;
    let reference = load_reference(cfg)?;
    let ds = PreferenceDataset::load(&cfg.paths.dataset())?;
    let mut configs = Vec::new();
    for &seed in &cfg.ablation.seeds {
        for &kind in &cfg.ablation.methods {
            configs.push(dde::TrainConfig { method: MethodSpec::new(kind), seed, ..cfg.train });
        }
        for &(lo, hi) in &cfg.ablation.step_ranges {
            let method = MethodSpec::new(MethodKind::Dde).with_step_range(lo, hi);
            configs.push(dde::TrainConfig { method, seed, ..cfg.train });
        }
    }
    let rows = ablation_grid(&configs, &ds, &reference, &cfg.world, &s, &cfg.eval)?;
    let dir = cfg.paths.reports();
    mkdirs(&dir)?;
    let table = grid_table(&rows);
    let p = dir.join("ablation.txt");
    std::fs::write(&p, &table).map_err(|e| DdeError::Io { path: p.clone(), source: e })?;
    write_json(&dir.join("ablation.json"), &serde_json::to_value(&rows).expect("rows serialise"))?;
    cfg.write_next_to(&dir)?;
    print!("{table}");
    Ok(())
}

fn run(cli: Cli) -> CmdResult {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::Usage(format!("--threads: {e}")))?;
    }
    if let Command::Init { force } = cli.command {
        return cmd_init(&cli.config, force);
    }
    let cfg = ExperimentConfig::load(&cli.config).map_err(|e| Failure::Usage(e.to_string()))?;
    match cli.command {
        Command::Init { .. } => unreachable!(),
        Command::Pretrain => cmd_pretrain(&cfg),
        Command::GenData => cmd_gen_data(&cfg),
        Command::Train { method, step_range, seed, max_steps, resume } => {
            cmd_train(cfg, method, step_range, seed, max_steps, resume)
        }
        Command::Eval { checkpoint, baseline, name } => cmd_eval(&cfg, &checkpoint, baseline.as_deref(), name),
        Command::Ablate => cmd_ablate(&cfg),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
    }
}
