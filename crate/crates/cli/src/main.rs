use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use secmi_core::config::RunConfig;
use secmi_core::pipeline::{self, checkpoint_path};
use secmi_core::Checkpoint;

const OUT_ROOT_ENV: &str = "SECMI_OUT_ROOT";

#[derive(Parser)]
#[command(
    name = "secmi",
    version,
    about = "Membership inference audits for diffusion models"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model per trial seed and write checkpoints plus loss traces.
    Train(TrialArgs),
    /// Attack trained checkpoints and write scores, metrics, and ROC files.
    Attack(TrialArgs),
    /// Run SecMI_stat at every timestep in `attack.sweep_t`.
    Sweep(TrialArgs),
    /// Aggregate the metrics of a run directory into summary files.
    Report(ReportArgs),
}

#[derive(Args)]
struct TrialArgs {
    #[arg(long)]
    config: PathBuf,
    /// Use this checkpoint instead of the run directory's (attack and sweep only).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Run directory; defaults to `output.dir`, then `$SECMI_OUT_ROOT/<config name>`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Run a single trial with this seed.
    #[arg(long)]
    seed_override: Option<u64>,
    /// Run only the first N configured seeds.
    #[arg(long)]
    trials: Option<usize>,
    /// Run trials concurrently, each in its own `trial_{seed}` directory.
    #[arg(long)]
    parallel_trials: bool,
}

#[derive(Args)]
struct ReportArgs {
    /// Run directory to summarize.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Resolve the run directory from this config instead.
    #[arg(long)]
    config: Option<PathBuf>,
}

fn default_run_dir(config_path: &Path, cfg: Option<&RunConfig>) -> PathBuf {
    if let Some(dir) = cfg.and_then(|c| c.output.dir.clone()) {
        return dir;
    }
    let name = config_path
        .file_stem()
        .map_or_else(|| "run".into(), |s| s.to_string_lossy().into_owned());
    let root = std::env::var_os(OUT_ROOT_ENV).map_or_else(|| PathBuf::from("runs"), PathBuf::from);
    root.join(name)
}

struct Plan {
    cfg: RunConfig,
    run_dir: PathBuf,
    seeds: Vec<u64>,
}

fn plan(args: &TrialArgs) -> Result<Plan> {
    let cfg = RunConfig::load(&args.config)
        .with_context(|| format!("loading {}", args.config.display()))?;
    let run_dir = args
        .out
        .clone()
        .unwrap_or_else(|| default_run_dir(&args.config, Some(&cfg)));
    let mut seeds = match args.seed_override {
        Some(s) => vec![s],
        None => cfg.eval.trial_seeds(),
    };
    if let Some(n) = args.trials {
        if n == 0 || n > seeds.len() {
            bail!("--trials {n} needs 1..={} available seeds", seeds.len());
        }
        seeds.truncate(n);
    }
    Ok(Plan {
        cfg,
        run_dir,
        seeds,
    })
}

/// Runs `f` once per seed, sequentially into `run_dir` or concurrently into
/// per-trial subdirectories.
fn for_each_trial<T: Send>(
    plan: &Plan,
    parallel: bool,
    f: impl Fn(&Path, u64) -> Result<T> + Sync,
) -> Result<Vec<T>> {
    if !parallel {
        return plan.seeds.iter().map(|&s| f(&plan.run_dir, s)).collect();
    }
    std::thread::scope(|scope| {
        let handles: Vec<_> = plan
            .seeds
            .iter()
            .map(|&s| {
                let dir = plan.run_dir.join(format!("trial_{s}"));
                let f = &f;
                scope.spawn(move || f(&dir, s))
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("trial thread panicked"))
            .collect()
    })
}

fn print_paths(paths: &[PathBuf]) {
    for p in paths {
        println!("{}", p.display());
    }
}

fn cmd_train(args: &TrialArgs) -> Result<()> {
    let plan = plan(args)?;
    let written = for_each_trial(&plan, args.parallel_trials, |dir, seed| {
        let trial = pipeline::train_trial::<f64>(&plan.cfg, seed)
            .with_context(|| format!("training seed {seed}"))?;
        Ok(pipeline::write_training(dir, &trial)?)
    })?;
    print_paths(&written.concat());
    Ok(())
}

/// The checkpoint for `seed`, and the seed whose split it should be attacked on.
fn resolve_checkpoint(args: &TrialArgs, dir: &Path, seed: u64) -> Result<(Checkpoint, u64)> {
    match &args.checkpoint {
        Some(p) => {
            let ckpt: Checkpoint = pipeline::read_checkpoint(p)?;
            let seed = args
                .seed_override
                .or_else(|| pipeline::checkpoint_seed(&ckpt))
                .unwrap_or(seed);
            Ok((ckpt, seed))
        }
        None => {
            let p = checkpoint_path(dir, seed);
            let ckpt = pipeline::read_checkpoint(&p)
                .with_context(|| format!("run `secmi train` first for seed {seed}"))?;
            Ok((ckpt, seed))
        }
    }
}

fn seeds_for_checkpoint(args: &TrialArgs, plan: &mut Plan) {
    // An explicit checkpoint is a single trial.
    if args.checkpoint.is_some() {
        plan.seeds.truncate(1);
    }
}

fn cmd_attack(args: &TrialArgs) -> Result<()> {
    let mut plan = plan(args)?;
    seeds_for_checkpoint(args, &mut plan);
    let written = for_each_trial(&plan, args.parallel_trials, |dir, seed| {
        let (ckpt, seed) = resolve_checkpoint(args, dir, seed)?;
        let result = pipeline::attack_trial(&plan.cfg, &ckpt, seed)
            .with_context(|| format!("attacking seed {seed}"))?;
        Ok(pipeline::write_attack_outputs(dir, &plan.cfg, &result)?)
    })?;
    print_paths(&written.concat());
    Ok(())
}

fn cmd_sweep(args: &TrialArgs) -> Result<()> {
    let mut plan = plan(args)?;
    seeds_for_checkpoint(args, &mut plan);
    let written = for_each_trial(&plan, args.parallel_trials, |dir, seed| {
        let (ckpt, seed) = resolve_checkpoint(args, dir, seed)?;
        let rows = pipeline::sweep_trial(&plan.cfg, &ckpt, seed)
            .with_context(|| format!("sweeping seed {seed}"))?;
        Ok(pipeline::write_sweep(dir, seed, &rows)?)
    })?;
    print_paths(&written);
    Ok(())
}

fn cmd_report(args: &ReportArgs) -> Result<()> {
    let run_dir = match (&args.out, &args.config) {
        (Some(dir), _) => dir.clone(),
        (None, Some(c)) => {
            let cfg = RunConfig::load(c).with_context(|| format!("loading {}", c.display()))?;
            default_run_dir(c, Some(&cfg))
        }
        (None, None) => bail!("report needs --out or --config"),
    };
    let summaries = pipeline::report(&run_dir)?;
    for s in &summaries {
        println!(
            "{:<12} trials={} auc median={:.4} [{:.4}, {:.4}]  asr median={:.4} [{:.4}, {:.4}]",
            s.attack,
            s.trials,
            s.auc.median,
            s.auc.min,
            s.auc.max,
            s.asr.median,
            s.asr.min,
            s.asr.max
        );
    }
    println!("{}", run_dir.join(pipeline::SUMMARY_JSON).display());
    Ok(())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match &cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Attack(a) => cmd_attack(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Report(a) => cmd_report(a),
    }
}
