//! End-to-end trials: split, train, attack, and the on-disk run layout
//!
//! ```text
//! run-dir/
//!   checkpoints/model_seed{s}.ckpt, loss_seed{s}.csv
//!   scores/{attack}_seed{s}_t{t}.csv
//!   metrics/{attack}_seed{s}_t{t}.json
//!   roc/{attack}_seed{s}_t{t}.csv
//!   sweep/sweep_seed{s}.csv
//!   summary.json, summary.csv, plots/roc_{attack}.csv
//! ```
//!
//! Every trial is driven by one seed: it picks the split, initializes and
//! trains the model, and seeds the attacks' own randomness.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde_json::json;

use crate::baselines::{ganleaks_bb, loss_mia, mc_set, median_pairwise_radius, SyntheticSet};
use crate::config::{AttackKind, RunConfig, Weights};
use crate::data::{Dataset, LabeledSample};
use crate::error::{Error, Result};
use crate::metrics::{
    aggregate_trials, write_scores_csv, AttackReport, TrialMetrics, TrialSummary,
};
use crate::model::{EpsilonModel, EpsilonPredictor};
use crate::scalar::Scalar;
use crate::schedule::NoiseSchedule;
use crate::secmi::{
    eval_rows, labels_of, secmi_nns, secmi_stat, t_sweep, train_attack_classifier, write_sweep_csv,
    ClassifierConfig, SweepRow, TErrorTable,
};
use crate::trainer::{train, write_loss_trace, Checkpoint, TrainOutcome};

pub const CHECKPOINTS: &str = "checkpoints";
pub const SCORES: &str = "scores";
pub const METRICS: &str = "metrics";
pub const ROC: &str = "roc";
pub const SWEEP: &str = "sweep";
pub const PLOTS: &str = "plots";
pub const SUMMARY_JSON: &str = "summary.json";
pub const SUMMARY_CSV: &str = "summary.csv";

pub fn checkpoint_path(run_dir: &Path, seed: u64) -> PathBuf {
    run_dir
        .join(CHECKPOINTS)
        .join(format!("model_seed{seed}.ckpt"))
}

pub fn loss_trace_path(run_dir: &Path, seed: u64) -> PathBuf {
    run_dir
        .join(CHECKPOINTS)
        .join(format!("loss_seed{seed}.csv"))
}

fn artifact_stem(attack: &str, seed: u64, t_sec: usize) -> String {
    format!("{attack}_seed{seed}_t{t_sec}")
}

/// The configured dataset, labelled by the split for `seed`.
pub fn trial_dataset<F: Scalar>(cfg: &RunConfig, seed: u64) -> Result<Dataset<F>> {
    let mut ds = match &cfg.dataset.path {
        Some(path) => {
            let file = File::open(path).map_err(|e| {
                Error::InvalidDataset(format!("cannot open dataset {}: {e}", path.display()))
            })?;
            Dataset::read_from(BufReader::new(file))?
        }
        None => Dataset::generate(
            cfg.dataset.dist.clone(),
            cfg.dataset.n,
            cfg.dataset.d,
            cfg.dataset.seed,
            cfg.dataset.conditional,
        )?,
    };
    for s in &mut ds.samples {
        s.membership = None;
    }
    ds.split = None;
    ds.assign_split(cfg.dataset.ratio, seed)?;
    Ok(ds)
}

#[derive(Clone, Debug)]
pub struct TrainedTrial<F> {
    pub seed: u64,
    pub dataset: Dataset<F>,
    pub outcome: TrainOutcome<F>,
}

/// Trains on the members of the `seed` split. Fails if any hold-out id
/// reached the optimizer.
pub fn train_trial<F: Scalar>(cfg: &RunConfig, seed: u64) -> Result<TrainedTrial<F>> {
    let schedule: NoiseSchedule<F> = cfg.schedule.build()?;
    let dataset = trial_dataset::<F>(cfg, seed)?;
    let spec = cfg
        .model
        .spec(dataset.dim(), dataset.condition_dim(), schedule.num_steps());
    let members = dataset.members();
    let mut outcome = train(
        &members,
        &schedule,
        spec,
        &cfg.train.with_seed(seed),
        dataset.dist_kind.image_shape(),
    )?;

    let split = dataset.split.as_ref().expect("split assigned above");
    if let Some(&id) = outcome
        .ids_seen
        .iter()
        .find(|id| !split.member_ids.contains(id))
    {
        return Err(Error::HoldoutLeak(id));
    }
    let meta = &mut outcome.checkpoint.metadata;
    meta.insert("split_seed".into(), json!(seed));
    meta.insert("dataset_seed".into(), json!(dataset.seed));
    meta.insert("members".into(), json!(split.member_ids.len()));
    meta.insert("member_ids_seen".into(), json!(outcome.ids_seen.len()));
    meta.insert("holdout_ids_seen".into(), json!(0));
    Ok(TrainedTrial {
        seed,
        dataset,
        outcome,
    })
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    Ok(BufWriter::new(File::create(path)?))
}

/// Writes the checkpoint and loss trace; returns the paths written.
pub fn write_training<F: Scalar>(run_dir: &Path, trial: &TrainedTrial<F>) -> Result<Vec<PathBuf>> {
    let ckpt = checkpoint_path(run_dir, trial.seed);
    let mut w = create(&ckpt)?;
    trial.outcome.checkpoint.write_to(&mut w)?;
    w.flush()?;
    let trace = loss_trace_path(run_dir, trial.seed);
    let mut w = create(&trace)?;
    write_loss_trace(&mut w, &trial.outcome.loss_trace)?;
    w.flush()?;
    Ok(vec![ckpt, trace])
}

pub fn read_checkpoint<F: Scalar>(path: &Path) -> Result<Checkpoint<F>> {
    let file = File::open(path)
        .map_err(|e| Error::Format(format!("cannot open checkpoint {}: {e}", path.display())))?;
    Checkpoint::read_from(BufReader::new(file))
}

/// The split seed recorded when the checkpoint was trained.
pub fn checkpoint_seed<F>(ckpt: &Checkpoint<F>) -> Option<u64> {
    ckpt.metadata.get("split_seed").and_then(|v| v.as_u64())
}

/// The parameter vector selected by `weights`.
pub fn attacked_model<F: Scalar>(
    ckpt: &Checkpoint<F>,
    weights: Weights,
) -> Result<EpsilonModel<F>> {
    match weights {
        Weights::Ema => ckpt.ema_model(),
        Weights::Raw => Ok(ckpt.raw_model().clone()),
    }
}

fn check_schedule<F>(cfg: &RunConfig, ckpt: &Checkpoint<F>) -> Result<()> {
    if ckpt.schedule != cfg.schedule {
        return Err(Error::InvalidConfig(format!(
            "checkpoint schedule {:?} does not match config schedule {:?}",
            ckpt.schedule, cfg.schedule
        )));
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct TrialAttack<F> {
    pub seed: u64,
    pub t_sec: usize,
    /// One report per enabled attack, in configuration order.
    pub reports: Vec<AttackReport<F>>,
    /// t-errors at `t_sec`, when a SecMI attack ran.
    pub table: Option<TErrorTable<F>>,
    /// Scores-CSV `t` column per attack.
    pub score_t: BTreeMap<String, Option<usize>>,
}

/// Runs every enabled attack against the checkpoint on the `seed` split.
pub fn attack_trial<F: Scalar>(
    cfg: &RunConfig,
    ckpt: &Checkpoint<F>,
    seed: u64,
) -> Result<TrialAttack<F>> {
    check_schedule(cfg, ckpt)?;
    let schedule: NoiseSchedule<F> = cfg.schedule.build()?;
    let dataset = trial_dataset::<F>(cfg, seed)?;
    let model = attacked_model(ckpt, cfg.attack.weights)?;
    attack_model(cfg, &model, &schedule, &dataset.samples, seed)
}

/// Runs every enabled attack against an arbitrary predictor.
pub fn attack_model<F: Scalar, P: EpsilonPredictor<F>>(
    cfg: &RunConfig,
    model: &P,
    schedule: &NoiseSchedule<F>,
    samples: &[LabeledSample<F>],
    seed: u64,
) -> Result<TrialAttack<F>> {
    let attack = &cfg.attack;
    let ac = attack.attack_config();
    let fpr = &cfg.eval.fpr_levels;
    let labels = labels_of(samples);
    let needs_table = attack.enabled(AttackKind::SecmiStat) || attack.enabled(AttackKind::SecmiNns);
    let keep_vectors = attack.enabled(AttackKind::SecmiNns) || attack.dump_error_vectors;
    let table = if needs_table {
        Some(TErrorTable::compute(
            model,
            schedule,
            samples,
            &ac,
            keep_vectors,
        )?)
    } else {
        None
    };
    let mut synthetic: Option<SyntheticSet<F>> = None;
    let mut reports = Vec::new();
    let mut score_t = BTreeMap::new();
    let mut done = Vec::new();
    for &kind in &attack.attacks {
        if done.contains(&kind) {
            continue;
        }
        done.push(kind);
        let report = match kind {
            AttackKind::SecmiStat => {
                let table = table.as_ref().expect("table computed for SecMI attacks");
                score_t.insert(kind.name().to_string(), Some(ac.t_sec));
                secmi_stat(table.scores_at(ac.t_sec, &labels)?, &ac, fpr)?
            }
            AttackKind::SecmiNns => {
                let table = table.as_ref().expect("table computed for SecMI attacks");
                let rows = table.features_at(ac.t_sec, &labels)?;
                let clf_cfg = ClassifierConfig {
                    seed,
                    ..attack.classifier.clone()
                };
                let clf = train_attack_classifier(&rows, &clf_cfg)?;
                score_t.insert(kind.name().to_string(), Some(ac.t_sec));
                secmi_nns(&clf, &eval_rows(&clf.eval_ids, &rows), &ac, fpr)?
            }
            AttackKind::LossMia => {
                let ts = attack.loss_timesteps();
                score_t.insert(kind.name().to_string(), (ts.len() == 1).then(|| ts[0]));
                loss_mia(model, schedule, samples, &ts, seed, fpr)?
            }
            AttackKind::GanleaksBb | AttackKind::McSet => {
                if synthetic.is_none() {
                    synthetic = Some(synthetic_set(
                        model,
                        schedule,
                        samples,
                        attack.synthetic_size,
                        seed,
                    )?);
                }
                let synth = synthetic.as_ref().unwrap();
                score_t.insert(kind.name().to_string(), None);
                if kind == AttackKind::GanleaksBb {
                    ganleaks_bb(samples, synth, fpr)?
                } else {
                    mc_set(samples, synth, median_pairwise_radius(synth)?, fpr)?
                }
            }
        };
        reports.push(report);
    }
    Ok(TrialAttack {
        seed,
        t_sec: ac.t_sec,
        reports,
        table,
        score_t,
    })
}

/// Synthetic samples for the generator-side attacks. Conditional models get
/// an equal share per distinct condition found in `samples`.
fn synthetic_set<F: Scalar, P: EpsilonPredictor<F>>(
    model: &P,
    schedule: &NoiseSchedule<F>,
    samples: &[LabeledSample<F>],
    n: usize,
    seed: u64,
) -> Result<SyntheticSet<F>> {
    let mut conditions: Vec<&Vec<F>> = Vec::new();
    for c in samples.iter().filter_map(|s| s.condition.as_ref()) {
        if !conditions.contains(&c) {
            conditions.push(c);
        }
    }
    if conditions.is_empty() {
        return SyntheticSet::generate(model, schedule, n, seed, None);
    }
    let per = n.div_ceil(conditions.len());
    let mut points = Vec::with_capacity(per * conditions.len());
    for (j, c) in conditions.iter().enumerate() {
        let part = SyntheticSet::generate(
            model,
            schedule,
            per,
            seed.wrapping_add(j as u64),
            Some(c.as_slice()),
        )?;
        points.extend(part.points);
    }
    points.truncate(n);
    Ok(SyntheticSet { points, seed })
}

/// Writes scores, metrics, and ROC files for each report (plus the error
/// vector dump when enabled); returns the paths written.
pub fn write_attack_outputs<F: Scalar>(
    run_dir: &Path,
    cfg: &RunConfig,
    trial: &TrialAttack<F>,
) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    for report in &trial.reports {
        let stem = artifact_stem(&report.attack_name, trial.seed, trial.t_sec);
        let t = trial.score_t.get(&report.attack_name).copied().flatten();

        let path = run_dir.join(SCORES).join(format!("{stem}.csv"));
        let mut w = create(&path)?;
        write_scores_csv(&mut w, &report.attack_name, t, &report.scored)?;
        w.flush()?;
        written.push(path);

        let path = run_dir.join(METRICS).join(format!("{stem}.json"));
        let mut w = create(&path)?;
        serde_json::to_writer_pretty(&mut w, &report.trial_metrics(trial.seed))?;
        w.write_all(b"\n")?;
        w.flush()?;
        written.push(path);

        let path = run_dir.join(ROC).join(format!("{stem}.csv"));
        let mut w = create(&path)?;
        report.write_roc_csv(&mut w)?;
        w.flush()?;
        written.push(path);
    }
    if cfg.attack.dump_error_vectors {
        if let Some(table) = &trial.table {
            let path = run_dir
                .join(SCORES)
                .join(format!("errors_seed{}_t{}.bin", trial.seed, trial.t_sec));
            let mut w = create(&path)?;
            table.write_error_vectors(&mut w)?;
            w.flush()?;
            written.push(path);
        }
    }
    Ok(written)
}

/// SecMI_stat at every `attack.sweep_t` against the checkpoint.
pub fn sweep_trial<F: Scalar>(
    cfg: &RunConfig,
    ckpt: &Checkpoint<F>,
    seed: u64,
) -> Result<Vec<SweepRow>> {
    check_schedule(cfg, ckpt)?;
    if cfg.attack.sweep_t.is_empty() {
        return Err(Error::InvalidConfig("attack.sweep_t is empty".into()));
    }
    let schedule: NoiseSchedule<F> = cfg.schedule.build()?;
    let dataset = trial_dataset::<F>(cfg, seed)?;
    let model = attacked_model(ckpt, cfg.attack.weights)?;
    t_sweep(
        &model,
        &schedule,
        &dataset.samples,
        &cfg.attack.sweep_t,
        &cfg.attack.attack_config(),
    )
}

pub fn write_sweep(run_dir: &Path, seed: u64, rows: &[SweepRow]) -> Result<PathBuf> {
    let path = run_dir.join(SWEEP).join(format!("sweep_seed{seed}.csv"));
    let mut w = create(&path)?;
    write_sweep_csv(&mut w, rows)?;
    w.flush()?;
    Ok(path)
}

/// Every `metrics/*.json` under `run_dir`, including per-trial
/// subdirectories, sorted by path.
fn metric_files(run_dir: &Path) -> Result<Vec<PathBuf>> {
    let mut dirs = vec![run_dir.to_path_buf()];
    if run_dir.is_dir() {
        for entry in fs::read_dir(run_dir)? {
            let p = entry?.path();
            if p.is_dir() && p.join(METRICS).is_dir() {
                dirs.push(p);
            }
        }
    }
    let mut files = Vec::new();
    for dir in dirs {
        let m = dir.join(METRICS);
        if !m.is_dir() {
            continue;
        }
        for entry in fs::read_dir(&m)? {
            let p = entry?.path();
            if p.extension().is_some_and(|e| e == "json") {
                files.push(p);
            }
        }
    }
    files.sort();
    Ok(files)
}

/// Aggregates all trial metrics in `run_dir` per attack and writes
/// `summary.json`, `summary.csv`, and pooled per-attack ROC CSVs.
pub fn report(run_dir: &Path) -> Result<Vec<TrialSummary>> {
    let files = metric_files(run_dir)?;
    if files.is_empty() {
        return Err(Error::InvalidConfig(format!(
            "no trial metrics under {}",
            run_dir.display()
        )));
    }
    let mut by_attack: BTreeMap<String, Vec<(TrialMetrics, PathBuf)>> = BTreeMap::new();
    for f in files {
        let m: TrialMetrics = serde_json::from_reader(BufReader::new(File::open(&f)?))?;
        by_attack.entry(m.attack.clone()).or_default().push((m, f));
    }
    let mut summaries = Vec::new();
    for (attack, trials) in &by_attack {
        let metrics: Vec<TrialMetrics> = trials.iter().map(|(m, _)| m.clone()).collect();
        summaries.push(aggregate_trials(&metrics)?);

        let path = run_dir.join(PLOTS).join(format!("roc_{attack}.csv"));
        let mut w = create(&path)?;
        writeln!(w, "seed,fpr,tpr,log10_fpr")?;
        for (m, metrics_path) in trials {
            let roc_path = metrics_path.parent().and_then(Path::parent).map(|d| {
                d.join(ROC).join(
                    metrics_path
                        .with_extension("csv")
                        .file_name()
                        .expect("metrics file name"),
                )
            });
            let Some(roc_path) = roc_path.filter(|p| p.is_file()) else {
                continue;
            };
            for line in fs::read_to_string(roc_path)?.lines().skip(1) {
                writeln!(w, "{},{line}", m.seed)?;
            }
        }
        w.flush()?;
    }

    let mut w = create(&run_dir.join(SUMMARY_JSON))?;
    serde_json::to_writer_pretty(&mut w, &summaries)?;
    w.write_all(b"\n")?;
    w.flush()?;

    let mut w = create(&run_dir.join(SUMMARY_CSV))?;
    writeln!(w, "attack,metric,trials,mean,median,min,max")?;
    for s in &summaries {
        let mut rows = vec![("asr".to_string(), s.asr), ("auc".to_string(), s.auc)];
        rows.extend(
            s.tpr_at_fpr
                .iter()
                .map(|(k, v)| (format!("tpr@fpr={k}"), *v)),
        );
        for (name, v) in rows {
            writeln!(
                w,
                "{},{name},{},{},{},{},{}",
                s.attack, s.trials, v.mean, v.median, v.min, v.max
            )?;
        }
    }
    w.flush()?;
    Ok(summaries)
}

/// Train and attack one trial, writing everything under `run_dir`.
pub fn run_trial<F: Scalar>(cfg: &RunConfig, run_dir: &Path, seed: u64) -> Result<TrialAttack<F>> {
    let trained = train_trial::<F>(cfg, seed)?;
    write_training(run_dir, &trained)?;
    let attack = attack_trial(cfg, &trained.outcome.checkpoint, seed)?;
    write_attack_outputs(run_dir, cfg, &attack)?;
    Ok(attack)
}
