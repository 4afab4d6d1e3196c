//! Acceptance run: prints one PASS/FAIL line per criterion and exits nonzero
//! if any criterion fails. Trains the reference configuration (and its
//! jitter variant) for every configured seed, so it takes several minutes.

mod common;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use secmi_core::config::{AttackKind, RunConfig, Weights};
use secmi_core::data::Membership;
use secmi_core::metrics::{asr, auc, roc_area, roc_curve, tpr_at_fpr, Spread};
use secmi_core::model::{
    Activation, ConstantEpsilon, CountingPredictor, EpsilonModel, ModelSpec, TrainItem,
};
use secmi_core::pipeline::{self, TrialAttack};
use secmi_core::sampler::{deterministic_denoise, deterministic_reverse, TrajectoryConfig};
use secmi_core::schedule::NoiseSchedule;
use secmi_core::secmi::{
    eval_rows, secmi_nns, t_error, t_sweep, train_attack_classifier, AttackConfig, ClassifierConfig,
};
use secmi_core::Checkpoint;

fn config(name: &str) -> RunConfig {
    let path = Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../configs")
        .join(name);
    RunConfig::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

struct Outcome {
    pass: bool,
    detail: String,
}

fn fmt(values: &[f64]) -> String {
    let parts: Vec<String> = values.iter().map(|v| format!("{v:.3}")).collect();
    format!("[{}]", parts.join(", "))
}

fn median(values: &[f64]) -> f64 {
    Spread::of(values).median
}

fn in_band(v: f64) -> bool {
    (0.40..=0.60).contains(&v)
}

fn report_of(trial: &TrialAttack<f64>, kind: AttackKind) -> &secmi_core::AttackReport {
    trial
        .reports
        .iter()
        .find(|r| r.attack_name == kind.name())
        .expect("attack was enabled")
}

fn aucs(trials: &[TrialAttack<f64>], kind: AttackKind) -> Vec<f64> {
    trials
        .iter()
        .map(|t| report_of(t, kind).metrics.auc)
        .collect()
}

fn asrs(trials: &[TrialAttack<f64>], kind: AttackKind) -> Vec<f64> {
    trials
        .iter()
        .map(|t| report_of(t, kind).metrics.asr)
        .collect()
}

// 1
fn gradient_exactness() -> Outcome {
    let start = Instant::now();
    let arch =
        |d: usize, hidden: &[usize], act: Activation, ted: usize, oct: usize, cond: usize| {
            let mut s = ModelSpec::new(d, hidden, 50);
            s.activation = act;
            s.time_embedding_dim = ted;
            s.coord_octaves = oct;
            s.condition_dim = cond;
            s
        };
    let specs = [
        arch(2, &[8], Activation::Silu, 4, 0, 0),
        arch(2, &[6, 5], Activation::Tanh, 6, 1, 0),
        arch(2, &[10, 10], Activation::Silu, 8, 2, 3),
        arch(3, &[7, 6, 5], Activation::Silu, 2, 0, 0),
        arch(4, &[9], Activation::Tanh, 4, 1, 2),
        arch(2, &[12, 4], Activation::Silu, 16, 4, 0),
    ];
    let schedule = NoiseSchedule::<f64>::linear(50, 1e-4, 0.02).unwrap();
    let h = 1e-5;
    let mut worst = 0.0f64;
    let mut checked = 0usize;
    for spec in &specs {
        for seed in 0..10u64 {
            let model = EpsilonModel::init(spec.clone(), seed).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
            let d = spec.data_dim();
            let batch: Vec<TrainItem<f64>> = (0..3)
                .map(|_| TrainItem {
                    x0: (0..d).map(|_| rng.random_range(-1.0..1.0)).collect(),
                    t: rng.random_range(1..=50),
                    eps: (0..d).map(|_| rng.random_range(-2.0..2.0)).collect(),
                    cond: (spec.condition_dim > 0).then(|| {
                        (0..spec.condition_dim)
                            .map(|_| rng.random_range(-1.0..1.0))
                            .collect()
                    }),
                })
                .collect();
            let (_, grad) = model.loss_and_gradient(&schedule, &batch).unwrap();
            let mut probe = model.clone();
            for i in 0..model.param_count() {
                let p = model.params()[i];
                probe.params_mut()[i] = p + h;
                let up = probe.loss(&schedule, &batch).unwrap();
                probe.params_mut()[i] = p - h;
                let down = probe.loss(&schedule, &batch).unwrap();
                probe.params_mut()[i] = p;
                let fd = (up - down) / (2.0 * h);
                // absolute floor for parameters with (near-)zero gradient
                let rel = (grad[i] - fd).abs() / grad[i].abs().max(fd.abs()).max(1e-6);
                worst = worst.max(rel);
                checked += 1;
            }
        }
    }
    let elapsed = start.elapsed();
    Outcome {
        pass: worst < 1e-4 && elapsed < Duration::from_secs(60),
        detail: format!(
            "{} architectures x 10 seeds, {checked} parameters, max relative error {worst:.2e}, {:.1}s",
            specs.len(),
            elapsed.as_secs_f64()
        ),
    }
}

// 2
fn operator_identities() -> Outcome {
    let mut worst_round_trip = 0.0f64;
    let mut worst_telescope = 0.0f64;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for (num_steps, pairs) in [
        (100, vec![(10, 1), (5, 2), (37, 4), (90, 10)]),
        (1000, vec![(100, 10), (250, 7)]),
    ] {
        let s = NoiseSchedule::<f64>::linear(num_steps, 1e-4, 0.02).unwrap();
        let constant = ConstantEpsilon {
            value: vec![0.3, -0.7],
        };
        let zero = ConstantEpsilon::<f64>::zeros(2);
        for (t, k) in pairs {
            for _ in 0..10 {
                let x: Vec<f64> = (0..2).map(|_| rng.random_range(-1.0..1.0)).collect();
                let e = t_error(&constant, &s, &x, &AttackConfig::new(t, k), None).unwrap();
                worst_round_trip = worst_round_trip.max(e);

                let up =
                    deterministic_reverse(&zero, &s, &x, &TrajectoryConfig::new(0, t, k)).unwrap();
                let ratio = (s.alpha_bar(t) / s.alpha_bar(0)).sqrt();
                let down =
                    deterministic_denoise(&zero, &s, &up, &TrajectoryConfig::new(t, 0, k)).unwrap();
                for j in 0..2 {
                    worst_telescope = worst_telescope.max((up[j] - ratio * x[j]).abs());
                    worst_telescope = worst_telescope.max((down[j] - x[j]).abs());
                }
            }
        }
    }
    Outcome {
        pass: worst_round_trip < 1e-10 && worst_telescope <= 1e-12,
        detail: format!(
            "constant-model t-error max {worst_round_trip:.2e}, zero-model telescoping max deviation {worst_telescope:.2e}"
        ),
    }
}

// 3
fn query_accounting() -> Outcome {
    let mut ok = true;
    let mut notes = Vec::new();
    for (num_steps, t, k) in [
        (1000, 100, 10),
        (100, 10, 1),
        (100, 10, 3),
        (100, 7, 7),
        (100, 1, 1),
        (1000, 95, 10),
    ] {
        let s = NoiseSchedule::<f64>::linear(num_steps, 1e-4, 0.02).unwrap();
        let model = EpsilonModel::<f64>::init(ModelSpec::new(2, &[4], num_steps), 0).unwrap();
        let counting = CountingPredictor::new(&model);
        let cfg = AttackConfig::new(t, k);
        t_error(&counting, &s, &[0.2, -0.1], &cfg, None).unwrap();
        let want = t.div_ceil(k) + 2;
        ok &= counting.calls() == want && cfg.query_count() == want;
        notes.push(format!("T={num_steps} t={t} k={k}: {}", counting.calls()));
    }
    Outcome {
        pass: ok,
        detail: notes.join(", "),
    }
}

struct Reference {
    trials: Vec<TrialAttack<f64>>,
    raw: Vec<TrialAttack<f64>>,
    checkpoints: Vec<Checkpoint>,
    sweep: BTreeMap<usize, Vec<f64>>,
    elapsed: Duration,
}

fn only(cfg: &RunConfig, attacks: &[AttackKind]) -> RunConfig {
    let mut c = cfg.clone();
    c.attack.attacks = attacks.to_vec();
    c
}

fn run_reference(cfg: &RunConfig) -> Reference {
    let schedule: NoiseSchedule<f64> = cfg.schedule.build().unwrap();
    let stat_only = only(cfg, &[AttackKind::SecmiStat]);
    let num_steps = schedule.num_steps();
    let sweep_t: Vec<usize> = [0.05, 0.10, 0.15]
        .iter()
        .map(|f| (f * num_steps as f64).round() as usize)
        .collect();
    let mut out = Reference {
        trials: Vec::new(),
        raw: Vec::new(),
        checkpoints: Vec::new(),
        sweep: BTreeMap::new(),
        elapsed: Duration::ZERO,
    };
    for seed in cfg.eval.trial_seeds() {
        let start = Instant::now();
        let trained = pipeline::train_trial::<f64>(cfg, seed).unwrap();
        let ckpt = trained.outcome.checkpoint;
        let samples = &trained.dataset.samples;
        let ema = pipeline::attacked_model(&ckpt, Weights::Ema).unwrap();
        let stat = pipeline::attack_model(&stat_only, &ema, &schedule, samples, seed).unwrap();
        out.elapsed += start.elapsed();

        let full = pipeline::attack_model(cfg, &ema, &schedule, samples, seed).unwrap();
        assert_eq!(
            report_of(&full, AttackKind::SecmiStat),
            report_of(&stat, AttackKind::SecmiStat)
        );
        let raw = pipeline::attacked_model(&ckpt, Weights::Raw).unwrap();
        out.raw
            .push(pipeline::attack_model(&stat_only, &raw, &schedule, samples, seed).unwrap());
        for row in t_sweep(
            &ema,
            &schedule,
            samples,
            &sweep_t,
            &cfg.attack.attack_config(),
        )
        .unwrap()
        {
            out.sweep.entry(row.t).or_default().push(row.auc);
        }
        eprintln!(
            "  reference seed {seed}: secmi_stat auc {:.3}",
            report_of(&full, AttackKind::SecmiStat).metrics.auc
        );
        out.trials.push(full);
        out.checkpoints.push(ckpt);
    }
    out
}

// 4
fn attack_separation(r: &Reference) -> Outcome {
    let (a, s) = (
        aucs(&r.trials, AttackKind::SecmiStat),
        asrs(&r.trials, AttackKind::SecmiStat),
    );
    let (ma, ms) = (median(&a), median(&s));
    Outcome {
        pass: ma >= 0.70 && ms >= 0.65 && r.elapsed < Duration::from_secs(600),
        detail: format!(
            "secmi_stat median AUC {ma:.3} {} (>= 0.70), median ASR {ms:.3} {} (>= 0.65), train+attack {:.0}s",
            fmt(&a),
            fmt(&s),
            r.elapsed.as_secs_f64()
        ),
    }
}

// 5
fn no_signal_controls(cfg: &RunConfig, r: &Reference) -> Outcome {
    let schedule: NoiseSchedule<f64> = cfg.schedule.build().unwrap();
    let mut per_attack: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    let mut shuffled = Vec::new();
    for (i, seed) in cfg.eval.trial_seeds().into_iter().enumerate() {
        let ds = pipeline::trial_dataset::<f64>(cfg, seed).unwrap();
        let spec = cfg
            .model
            .spec(ds.dim(), ds.condition_dim(), schedule.num_steps());
        let untrained = EpsilonModel::<f64>::init(spec, seed).unwrap();
        let trial = pipeline::attack_model(cfg, &untrained, &schedule, &ds.samples, seed).unwrap();
        for rep in &trial.reports {
            per_attack
                .entry(kind_name(&rep.attack_name))
                .or_default()
                .push(rep.metrics.auc);
        }

        // SecMI_NNs on the trained model with membership labels permuted
        let mut labels: Vec<Membership> =
            ds.samples.iter().map(|s| s.membership.unwrap()).collect();
        labels.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5eed));
        let permuted: BTreeMap<u64, Membership> =
            ds.samples.iter().map(|s| s.sample_id).zip(labels).collect();
        let table = r.trials[i].table.as_ref().unwrap();
        let rows = table.features_at(cfg.attack.t_sec, &permuted).unwrap();
        let clf = train_attack_classifier(
            &rows,
            &ClassifierConfig {
                seed,
                ..cfg.attack.classifier.clone()
            },
        )
        .unwrap();
        let rep = secmi_nns(
            &clf,
            &eval_rows(&clf.eval_ids, &rows),
            &cfg.attack.attack_config(),
            &[],
        )
        .unwrap();
        shuffled.push(rep.metrics.auc);
    }
    let mut pass = in_band(median(&shuffled));
    let mut parts = Vec::new();
    for (name, v) in &per_attack {
        pass &= in_band(median(v));
        parts.push(format!(
            "untrained {name} median {:.3} {}",
            median(v),
            fmt(v)
        ));
    }
    parts.push(format!(
        "label-shuffled secmi_nns median {:.3} {}",
        median(&shuffled),
        fmt(&shuffled)
    ));
    Outcome {
        pass,
        detail: parts.join("; "),
    }
}

fn kind_name(name: &str) -> &'static str {
    [
        AttackKind::SecmiStat,
        AttackKind::SecmiNns,
        AttackKind::LossMia,
        AttackKind::GanleaksBb,
        AttackKind::McSet,
    ]
    .into_iter()
    .map(AttackKind::name)
    .find(|n| *n == name)
    .expect("known attack")
}

// 6
fn baseline_ineffectiveness(r: &Reference) -> Outcome {
    let g = aucs(&r.trials, AttackKind::GanleaksBb);
    let m = aucs(&r.trials, AttackKind::McSet);
    let s = aucs(&r.trials, AttackKind::SecmiStat);
    Outcome {
        pass: in_band(median(&g)) && in_band(median(&m)) && median(&s) > 0.70,
        detail: format!(
            "ganleaks_bb median AUC {:.3} {}, mc_set {:.3} {}, secmi_stat {:.3}",
            median(&g),
            fmt(&g),
            median(&m),
            fmt(&m),
            median(&s)
        ),
    }
}

// 7
fn metric_oracles() -> Outcome {
    let mut exact = true;
    let mut worst_gap = 0.0f64;
    for seed in 0..100 {
        let s = common::instance(seed);
        for o in common::ORIENTATIONS {
            exact &= auc(&s, o).unwrap() == common::pairwise_auc(&s, o);
            exact &= asr(&s, o).unwrap() == common::brute_asr(&s, o);
            for level in [0.01, 0.1, 0.25, 0.5] {
                exact &= tpr_at_fpr(&s, o, level).unwrap().tpr == common::brute_tpr(&s, o, level);
            }
            worst_gap =
                worst_gap.max((auc(&s, o).unwrap() - roc_area(&roc_curve(&s, o).unwrap())).abs());
        }
    }
    Outcome {
        pass: exact && worst_gap <= 1e-12,
        detail: format!(
            "100 instances, exact match {exact}, max |Mann-Whitney - trapezoid| {worst_gap:.1e}"
        ),
    }
}

// 8
fn stability(r: &Reference) -> Outcome {
    let a = Spread::of(&aucs(&r.trials, AttackKind::SecmiStat));
    let s = Spread::of(&asrs(&r.trials, AttackKind::SecmiStat));
    Outcome {
        pass: a.range() <= 0.10 && s.range() <= 0.10,
        detail: format!(
            "secmi_stat AUC spread {:.3} [{:.3}, {:.3}], ASR spread {:.3} [{:.3}, {:.3}] (<= 0.10)",
            a.range(),
            a.min,
            a.max,
            s.range(),
            s.min,
            s.max
        ),
    }
}

// 9
fn t_sec_insensitivity(r: &Reference, num_steps: usize) -> Outcome {
    let medians: Vec<(usize, f64)> = r.sweep.iter().map(|(&t, v)| (t, median(v))).collect();
    let values: Vec<f64> = medians.iter().map(|m| m.1).collect();
    let range = Spread::of(&values).range();
    let parts: Vec<String> = medians
        .iter()
        .map(|(t, m)| {
            format!(
                "t/T={:.2}: {m:.3} {}",
                *t as f64 / num_steps as f64,
                fmt(&r.sweep[t])
            )
        })
        .collect();
    Outcome {
        pass: range <= 0.10,
        detail: format!(
            "median AUC {}; range {range:.3} (<= 0.10)",
            parts.join(", ")
        ),
    }
}

// 10
fn defense_trend(plain: &Reference) -> Outcome {
    let cfg = config("reference_jitter.toml");
    let schedule: NoiseSchedule<f64> = cfg.schedule.build().unwrap();
    let stat_only = only(&cfg, &[AttackKind::SecmiStat]);
    let mut jitter = Vec::new();
    for seed in cfg.eval.trial_seeds() {
        let trained = pipeline::train_trial::<f64>(&cfg, seed).unwrap();
        let ema = pipeline::attacked_model(&trained.outcome.checkpoint, Weights::Ema).unwrap();
        let t = pipeline::attack_model(&stat_only, &ema, &schedule, &trained.dataset.samples, seed)
            .unwrap();
        jitter.push(report_of(&t, AttackKind::SecmiStat).metrics.asr);
    }
    let base = asrs(&plain.trials, AttackKind::SecmiStat);
    Outcome {
        pass: median(&jitter) < median(&base),
        detail: format!(
            "median secmi_stat ASR with jitter {:.3} {} vs without {:.3} {}",
            median(&jitter),
            fmt(&jitter),
            median(&base),
            fmt(&base)
        ),
    }
}

// 11
fn ema_probe(r: &Reference) -> Outcome {
    let ema = aucs(&r.trials, AttackKind::SecmiStat);
    let raw = aucs(&r.raw, AttackKind::SecmiStat);
    let finite = ema.iter().chain(&raw).all(|v| v.is_finite());
    Outcome {
        pass: finite && ema.len() == raw.len() && !ema.is_empty(),
        detail: format!(
            "secmi_stat median AUC EMA {:.3} {}, raw {:.3} {}, delta (EMA - raw) {:+.3}",
            median(&ema),
            fmt(&ema),
            median(&raw),
            fmt(&raw),
            median(&ema) - median(&raw)
        ),
    }
}

fn outputs(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    for sub in [pipeline::SCORES, pipeline::METRICS] {
        for e in fs::read_dir(dir.join(sub)).unwrap() {
            let p = e.unwrap().path();
            out.insert(
                p.strip_prefix(dir).unwrap().to_path_buf(),
                fs::read(&p).unwrap(),
            );
        }
    }
    out
}

// 12
fn reproducibility(cfg: &RunConfig, r: &Reference) -> Outcome {
    let smoke = config("smoke.toml");
    let dirs: Vec<tempfile::TempDir> = (0..2).map(|_| tempfile::tempdir().unwrap()).collect();
    for d in &dirs {
        for seed in smoke.eval.trial_seeds() {
            pipeline::run_trial::<f64>(&smoke, d.path(), seed).unwrap();
        }
    }
    let (a, b) = (outputs(dirs[0].path()), outputs(dirs[1].path()));
    let smoke_same = a == b && !a.is_empty();

    let seed = cfg.eval.trial_seeds()[0];
    let ref_dirs: Vec<tempfile::TempDir> = (0..2).map(|_| tempfile::tempdir().unwrap()).collect();
    for d in &ref_dirs {
        let trial = pipeline::attack_trial(cfg, &r.checkpoints[0], seed).unwrap();
        pipeline::write_attack_outputs(d.path(), cfg, &trial).unwrap();
    }
    let (c, d) = (outputs(ref_dirs[0].path()), outputs(ref_dirs[1].path()));
    let reference_same = c == d && !c.is_empty();
    Outcome {
        pass: smoke_same && reference_same,
        detail: format!(
            "smoke train+attack x2: {} files identical {smoke_same}; reference re-attack x2: {} files identical {reference_same}",
            a.len(),
            c.len()
        ),
    }
}

fn main() {
    let mut results: Vec<(u32, &str, Outcome)> = Vec::new();
    let mut record = |n: u32, name: &'static str, o: Outcome| {
        println!(
            "criterion {n:>2} {}: {name}: {}",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail
        );
        results.push((n, name, o));
    };
    record(1, "gradient exactness", gradient_exactness());
    record(
        2,
        "deterministic-operator identities",
        operator_identities(),
    );
    record(3, "query accounting", query_accounting());
    record(7, "metric oracles", metric_oracles());

    let cfg = config("reference.toml");
    eprintln!(
        "training the reference configuration for seeds {:?}",
        cfg.eval.trial_seeds()
    );
    let reference = run_reference(&cfg);
    record(4, "attack separation", attack_separation(&reference));
    record(
        5,
        "no-signal controls",
        no_signal_controls(&cfg, &reference),
    );
    record(
        6,
        "baseline ineffectiveness",
        baseline_ineffectiveness(&reference),
    );
    record(8, "stability over splits", stability(&reference));
    record(
        9,
        "t_sec insensitivity",
        t_sec_insensitivity(&reference, cfg.schedule.num_steps),
    );
    eprintln!("training the jitter configuration");
    record(10, "defense trend", defense_trend(&reference));
    record(11, "EMA vs raw weights", ema_probe(&reference));
    record(12, "reproducibility", reproducibility(&cfg, &reference));

    results.sort_by_key(|r| r.0);
    let failed: Vec<u32> = results.iter().filter(|r| !r.2.pass).map(|r| r.0).collect();
    println!(
        "acceptance: {} of {} criteria pass",
        results.len() - failed.len(),
        results.len()
    );
    if !failed.is_empty() {
        println!("acceptance: failing criteria {failed:?}");
        std::process::exit(1);
    }
}
