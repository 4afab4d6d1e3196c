//! Step-wise reconstruction error (t-error) and the attacks built on it.
//!
//! For a sample `x0`, the model deterministically walks it forward to
//! `x~_t = Phi(x0, t)`, takes one more `phi` step to `t + k` and one `psi`
//! step back to `t`. The t-error is the distance between the round trip
//! and `x~_t`. Members, having been fit by the model, reconstruct better.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{LabeledSample, Membership};
use crate::error::{Error, Result};
use crate::metrics::{accuracy_at, AttackReport, Orientation, ScoredSample, Threshold};
use crate::model::{Activation, EpsilonPredictor, Mlp, Trace};
use crate::sampler::{deterministic_reverse, phi_step, phi_step_to, psi_step_to, TrajectoryConfig};
use crate::scalar::{all_finite, Scalar};
use crate::schedule::NoiseSchedule;
use crate::trainer::AdamW;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Distance {
    /// Sum of squared differences.
    #[default]
    SquaredL2,
    /// Sum of absolute differences.
    L1,
}

impl Distance {
    pub fn of<F: Scalar>(self, diff: &[F]) -> F {
        match self {
            Distance::SquaredL2 => diff.iter().map(|&v| v * v).sum(),
            Distance::L1 => diff.iter().map(|v| v.abs()).sum(),
        }
    }

    pub fn between<F: Scalar>(self, a: &[F], b: &[F]) -> F {
        match self {
            Distance::SquaredL2 => a.iter().zip(b).map(|(&x, &y)| (x - y) * (x - y)).sum(),
            Distance::L1 => a.iter().zip(b).map(|(&x, &y)| (x - y).abs()).sum(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ThresholdMode {
    #[default]
    BestAccuracy,
    Fixed {
        tau: f64,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackConfig {
    pub t_sec: usize,
    pub stride_k: usize,
    #[serde(default)]
    pub distance: Distance,
    #[serde(default)]
    pub threshold_mode: ThresholdMode,
}

impl AttackConfig {
    pub fn new(t_sec: usize, stride_k: usize) -> Self {
        Self {
            t_sec,
            stride_k,
            distance: Distance::SquaredL2,
            threshold_mode: ThresholdMode::BestAccuracy,
        }
    }

    /// Requires `1 <= t_sec <= T - k`.
    pub fn validate(&self, num_steps: usize) -> Result<()> {
        if self.stride_k == 0 || self.t_sec == 0 || self.t_sec + self.stride_k > num_steps {
            return Err(Error::InvalidConfig(format!(
                "need 1 <= t_sec <= T - k, got t_sec = {}, k = {}, T = {num_steps}",
                self.t_sec, self.stride_k
            )));
        }
        Ok(())
    }

    /// Predictor queries per t-error: `ceil(t_sec / k) + 2`.
    pub fn query_count(&self) -> usize {
        self.t_sec.div_ceil(self.stride_k) + 2
    }
}

/// t-error and the per-coordinate absolute reconstruction error.
#[derive(Clone, Debug, PartialEq)]
pub struct TErrorSample<F> {
    pub score: F,
    pub error: Vec<F>,
}

pub fn t_error_with_vector<F: Scalar, P: EpsilonPredictor<F>>(
    model: &P,
    schedule: &NoiseSchedule<F>,
    x0: &[F],
    config: &AttackConfig,
    cond: Option<&[F]>,
) -> Result<TErrorSample<F>> {
    config.validate(schedule.num_steps())?;
    let (t, k) = (config.t_sec, config.stride_k);
    let traj = TrajectoryConfig::new(0, t, k).with_condition(cond.map(<[F]>::to_vec));
    let x_t = deterministic_reverse(model, schedule, x0, &traj)?;
    let up = phi_step_to(model, schedule, &x_t, t, t + k, cond)?;
    let back = psi_step_to(model, schedule, &up, t + k, t, cond)?;
    let error: Vec<F> = back
        .iter()
        .zip(&x_t)
        .map(|(&a, &b)| (a - b).abs())
        .collect();
    let score = config.distance.of(&error);
    if !score.is_finite() || !all_finite(&error) {
        return Err(Error::NonFinite(format!("t-error at t = {t}")));
    }
    Ok(TErrorSample { score, error })
}

pub fn t_error<F: Scalar, P: EpsilonPredictor<F>>(
    model: &P,
    schedule: &NoiseSchedule<F>,
    x0: &[F],
    config: &AttackConfig,
    cond: Option<&[F]>,
) -> Result<F> {
    Ok(t_error_with_vector(model, schedule, x0, config, cond)?.score)
}

/// `||eps(x_t, t) - eps||^2 - ||sqrt(1 - a_t) (eps(x~_t, t) - eps(phi(x~_t, t), t + 1))||^2`
/// with `x_t` the stochastic forward sample and `x~_t` the unit-stride
/// deterministic reverse of `x0`. Needs `1 <= t < T`.
pub fn delta_diagnostic<F: Scalar, P: EpsilonPredictor<F>>(
    model: &P,
    schedule: &NoiseSchedule<F>,
    x0: &[F],
    eps: &[F],
    t: usize,
    cond: Option<&[F]>,
) -> Result<F> {
    if t == 0 || t >= schedule.num_steps() {
        return Err(Error::TimestepOutOfRange {
            t,
            lo: 1,
            hi: schedule.num_steps() - 1,
        });
    }
    let xt = schedule.q_sample(x0, t, eps)?;
    let pred = model.predict(&xt, t, cond)?;
    let loss_term = Distance::SquaredL2.between(&pred, eps);

    let traj = TrajectoryConfig::new(0, t, 1).with_condition(cond.map(<[F]>::to_vec));
    let x_tilde = deterministic_reverse(model, schedule, x0, &traj)?;
    let e_here = model.predict(&x_tilde, t, cond)?;
    let up = phi_step(model, schedule, &x_tilde, t, cond)?;
    let e_next = model.predict(&up, t + 1, cond)?;
    let scale = (F::one() - schedule.alpha_bar(t)).sqrt();
    let drift: Vec<F> = e_here
        .iter()
        .zip(&e_next)
        .map(|(&a, &b)| scale * (a - b))
        .collect();
    Ok(loss_term - Distance::SquaredL2.of(&drift))
}

/// Per-sample, per-timestep t-errors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TErrorTable<F> {
    pub entries: BTreeMap<(u64, usize), F>,
    pub error_vectors: Option<BTreeMap<(u64, usize), Vec<F>>>,
}

impl<F: Scalar> TErrorTable<F> {
    /// Scores every sample at `config.t_sec`, in parallel.
    pub fn compute<P: EpsilonPredictor<F>>(
        model: &P,
        schedule: &NoiseSchedule<F>,
        samples: &[LabeledSample<F>],
        config: &AttackConfig,
        keep_vectors: bool,
    ) -> Result<Self> {
        config.validate(schedule.num_steps())?;
        let rows: Vec<(u64, TErrorSample<F>)> = samples
            .par_iter()
            .map(|s| {
                let r =
                    t_error_with_vector(model, schedule, &s.x0, config, s.condition.as_deref())?;
                Ok((s.sample_id, r))
            })
            .collect::<Result<_>>()?;
        let mut table = Self {
            entries: BTreeMap::new(),
            error_vectors: keep_vectors.then(BTreeMap::new),
        };
        for (id, r) in rows {
            table.entries.insert((id, config.t_sec), r.score);
            if let Some(v) = table.error_vectors.as_mut() {
                v.insert((id, config.t_sec), r.error);
            }
        }
        Ok(table)
    }

    /// Union of two tables; later entries win on key collisions.
    pub fn merge(&mut self, other: TErrorTable<F>) {
        self.entries.extend(other.entries);
        match (self.error_vectors.as_mut(), other.error_vectors) {
            (Some(a), Some(b)) => a.extend(b),
            (None, Some(b)) => self.error_vectors = Some(b),
            _ => {}
        }
    }

    pub fn scores_at(
        &self,
        t: usize,
        labels: &BTreeMap<u64, Membership>,
    ) -> Result<Vec<ScoredSample<F>>> {
        self.entries
            .iter()
            .filter(|((_, tt), _)| *tt == t)
            .map(|(&(id, _), &score)| {
                let label = *labels.get(&id).ok_or_else(|| {
                    Error::InvalidDataset(format!("sample {id} has no membership label"))
                })?;
                Ok(ScoredSample {
                    sample_id: id,
                    score,
                    label,
                })
            })
            .collect()
    }

    /// Error vectors at `t` as classifier features.
    pub fn features_at(
        &self,
        t: usize,
        labels: &BTreeMap<u64, Membership>,
    ) -> Result<Vec<FeatureRow<F>>> {
        let vectors = self.error_vectors.as_ref().ok_or_else(|| {
            Error::InvalidConfig("t-error table was computed without error vectors".into())
        })?;
        vectors
            .iter()
            .filter(|((_, tt), _)| *tt == t)
            .map(|(&(id, _), v)| {
                let label = *labels.get(&id).ok_or_else(|| {
                    Error::InvalidDataset(format!("sample {id} has no membership label"))
                })?;
                Ok(FeatureRow {
                    sample_id: id,
                    features: v.clone(),
                    label,
                })
            })
            .collect()
    }

    /// `sample_id,t,score,label` rows.
    pub fn write_csv<W: Write>(&self, mut w: W, labels: &BTreeMap<u64, Membership>) -> Result<()> {
        writeln!(w, "sample_id,t,score,label")?;
        for (&(id, t), score) in &self.entries {
            let label = labels
                .get(&id)
                .map_or(String::new(), |m| m.label().to_string());
            writeln!(w, "{id},{t},{},{label}", score.to_f64_lossy())?;
        }
        Ok(())
    }

    /// Binary records: `u64 sample_id, u64 t, u64 d, d x f64` (little endian).
    pub fn write_error_vectors<W: Write>(&self, mut w: W) -> Result<()> {
        let Some(vectors) = &self.error_vectors else {
            return Ok(());
        };
        for (&(id, t), v) in vectors {
            w.write_all(&id.to_le_bytes())?;
            w.write_all(&(t as u64).to_le_bytes())?;
            w.write_all(&(v.len() as u64).to_le_bytes())?;
            for x in v {
                w.write_all(&x.to_f64_lossy().to_le_bytes())?;
            }
        }
        Ok(())
    }
}

pub fn labels_of<F>(samples: &[LabeledSample<F>]) -> BTreeMap<u64, Membership> {
    samples
        .iter()
        .filter_map(|s| s.membership.map(|m| (s.sample_id, m)))
        .collect()
}

/// Mean hold-out t-error divided by mean member t-error at `t`.
pub fn holdout_member_ratio<F: Scalar>(scores: &[ScoredSample<F>]) -> f64 {
    let mean = |m: Membership| {
        let v: Vec<f64> = scores
            .iter()
            .filter(|s| s.label == m)
            .map(|s| s.score.to_f64_lossy())
            .collect();
        v.iter().sum::<f64>() / v.len() as f64
    };
    mean(Membership::Holdout) / mean(Membership::Member)
}

fn apply_threshold_mode<F: Scalar>(
    mut report: AttackReport<F>,
    mode: ThresholdMode,
) -> Result<AttackReport<F>> {
    if let ThresholdMode::Fixed { tau } = mode {
        let acc = accuracy_at(&report.scored, report.orientation, tau)?;
        report.threshold = Threshold {
            tau,
            balanced_accuracy: acc,
        };
        report.metrics.asr = acc;
    }
    Ok(report)
}

/// Threshold inference: member iff t-error `<= tau`.
pub fn secmi_stat<F: Scalar>(
    scores: Vec<ScoredSample<F>>,
    config: &AttackConfig,
    fpr_levels: &[f64],
) -> Result<AttackReport<F>> {
    if scores.is_empty() {
        return Err(Error::EmptyScores);
    }
    let report =
        AttackReport::evaluate("secmi_stat", Orientation::LowIsMember, scores, fpr_levels)?;
    apply_threshold_mode(report, config.threshold_mode)
}

/// One labelled feature vector.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureRow<F> {
    pub sample_id: u64,
    pub features: Vec<F>,
    pub label: Membership,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierConfig {
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub train_fraction: f64,
    /// Set per trial by the pipeline; not read from config files.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            hidden: vec![32, 32],
            epochs: 300,
            learning_rate: 1e-3,
            batch_size: 128,
            train_fraction: 0.2,
            seed: 0,
        }
    }
}

/// Small MLP mapping `|error|` features to a membership confidence.
#[derive(Clone, Debug)]
pub struct AttackClassifier<F> {
    net: Mlp<F>,
    feature_mean: Vec<F>,
    feature_scale: Vec<F>,
    pub train_fraction: f64,
    /// Ids used to fit the classifier.
    pub train_ids: BTreeSet<u64>,
    /// Held-aside ids available for evaluation.
    pub eval_ids: BTreeSet<u64>,
    /// Accuracy at confidence 0.5 on the training split.
    pub train_accuracy: f64,
}

const FEATURE_FLOOR: f64 = 1e-12;

impl<F: Scalar> AttackClassifier<F> {
    fn transform(&self, features: &[F]) -> Vec<F> {
        features
            .iter()
            .zip(self.feature_mean.iter().zip(&self.feature_scale))
            .map(|(&x, (&m, &s))| ((x + F::lit(FEATURE_FLOOR)).ln() - m) / s)
            .collect()
    }

    fn logit(&self, features: &[F]) -> F {
        self.net.forward(&self.transform(features))[0]
    }

    /// Confidence of membership, in `(0, 1)`.
    pub fn confidence(&self, features: &[F]) -> Result<F> {
        if features.len() != self.feature_mean.len() {
            return Err(Error::DimensionMismatch {
                expected: self.feature_mean.len(),
                got: features.len(),
            });
        }
        Ok(sigmoid(self.logit(features)))
    }
}

fn sigmoid<F: Scalar>(z: F) -> F {
    let tiny = F::lit(f64::EPSILON);
    (F::one() / (F::one() + (-z).exp()))
        .max(tiny)
        .min(F::one() - tiny)
}

/// Fits the classifier on a stratified `train_fraction` of each class; the
/// rest is recorded as the evaluation split.
pub fn train_attack_classifier<F: Scalar>(
    rows: &[FeatureRow<F>],
    config: &ClassifierConfig,
) -> Result<AttackClassifier<F>> {
    if !(config.train_fraction > 0.0 && config.train_fraction < 1.0) {
        return Err(Error::InvalidConfig(
            "train_fraction must lie in (0, 1)".into(),
        ));
    }
    let d = rows.first().ok_or(Error::EmptyScores)?.features.len();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut train_idx = Vec::new();
    let mut eval_ids = BTreeSet::new();
    for class in [Membership::Member, Membership::Holdout] {
        let mut idx: Vec<usize> = (0..rows.len())
            .filter(|&i| rows[i].label == class)
            .collect();
        idx.shuffle(&mut rng);
        let take = (config.train_fraction * idx.len() as f64).round() as usize;
        eval_ids.extend(idx[take..].iter().map(|&i| rows[i].sample_id));
        train_idx.extend_from_slice(&idx[..take]);
    }
    let has = |m| train_idx.iter().any(|&i| rows[i].label == m);
    if !has(Membership::Member) || !has(Membership::Holdout) {
        return Err(Error::SingleClass);
    }
    train_idx.sort_unstable();

    let logs: Vec<Vec<f64>> = train_idx
        .iter()
        .map(|&i| {
            rows[i]
                .features
                .iter()
                .map(|x| (x.to_f64_lossy() + FEATURE_FLOOR).ln())
                .collect()
        })
        .collect();
    let n = logs.len() as f64;
    let mean: Vec<f64> = (0..d)
        .map(|j| logs.iter().map(|r| r[j]).sum::<f64>() / n)
        .collect();
    let scale: Vec<f64> = (0..d)
        .map(|j| {
            let var = logs.iter().map(|r| (r[j] - mean[j]).powi(2)).sum::<f64>() / n;
            if var > 0.0 {
                var.sqrt()
            } else {
                1.0
            }
        })
        .collect();

    let mut dims = vec![d];
    dims.extend_from_slice(&config.hidden);
    dims.push(1);
    let mut clf = AttackClassifier {
        net: Mlp::init(dims, Activation::Silu, config.seed)?,
        feature_mean: mean.into_iter().map(F::lit).collect(),
        feature_scale: scale.into_iter().map(F::lit).collect(),
        train_fraction: config.train_fraction,
        train_ids: train_idx.iter().map(|&i| rows[i].sample_id).collect(),
        eval_ids,
        train_accuracy: 0.0,
    };
    let inputs: Vec<(Vec<F>, F)> = train_idx
        .iter()
        .map(|&i| {
            (
                clf.transform(&rows[i].features),
                F::lit(rows[i].label.label() as f64),
            )
        })
        .collect();

    let mut opt = AdamW::<F>::new(clf.net.params().len(), config.learning_rate, 0.0);
    let mut order: Vec<usize> = (0..inputs.len()).collect();
    let batch = config.batch_size.max(1);
    let mut trace = Trace::default();
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(batch) {
            let mut grad = vec![F::zero(); clf.net.params().len()];
            let m = F::lit(chunk.len() as f64);
            for &i in chunk {
                let (x, y) = &inputs[i];
                let z = clf.net.forward_traced(x, &mut trace)[0];
                // d(BCE with logits)/dz = sigmoid(z) - y
                let p = F::one() / (F::one() + (-z).exp());
                clf.net.backward(&trace, &[(p - *y) / m], &mut grad);
            }
            opt.step(clf.net.params_mut(), &grad);
        }
    }
    let correct = inputs
        .iter()
        .filter(|(x, y)| (clf.net.forward(x)[0] > F::zero()) == (*y > F::lit(0.5)))
        .count();
    clf.train_accuracy = correct as f64 / inputs.len() as f64;
    Ok(clf)
}

/// Classifier inference over rows disjoint from the classifier's training set.
pub fn secmi_nns<F: Scalar>(
    classifier: &AttackClassifier<F>,
    rows: &[FeatureRow<F>],
    config: &AttackConfig,
    fpr_levels: &[f64],
) -> Result<AttackReport<F>> {
    if let Some(r) = rows
        .iter()
        .find(|r| classifier.train_ids.contains(&r.sample_id))
    {
        return Err(Error::SplitOverlap(r.sample_id));
    }
    let scored = rows
        .iter()
        .map(|r| {
            Ok(ScoredSample {
                sample_id: r.sample_id,
                score: classifier.confidence(&r.features)?,
                label: r.label,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let report =
        AttackReport::evaluate("secmi_nns", Orientation::HighIsMember, scored, fpr_levels)?;
    apply_threshold_mode(report, config.threshold_mode)
}

/// Rows of `rows` in the classifier's evaluation split.
pub fn eval_rows<F: Clone>(
    classifier_eval: &BTreeSet<u64>,
    rows: &[FeatureRow<F>],
) -> Vec<FeatureRow<F>> {
    rows.iter()
        .filter(|r| classifier_eval.contains(&r.sample_id))
        .cloned()
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub t: usize,
    pub asr: f64,
    pub auc: f64,
}

/// SecMI_stat at each `t` in `t_list`, all other settings from `config`.
pub fn t_sweep<F: Scalar, P: EpsilonPredictor<F>>(
    model: &P,
    schedule: &NoiseSchedule<F>,
    samples: &[LabeledSample<F>],
    t_list: &[usize],
    config: &AttackConfig,
) -> Result<Vec<SweepRow>> {
    let labels = labels_of(samples);
    t_list
        .iter()
        .map(|&t| {
            let cfg = AttackConfig {
                t_sec: t,
                ..config.clone()
            };
            let table = TErrorTable::compute(model, schedule, samples, &cfg, false)?;
            let report = secmi_stat(table.scores_at(t, &labels)?, &cfg, &[])?;
            Ok(SweepRow {
                t,
                asr: report.metrics.asr,
                auc: report.metrics.auc,
            })
        })
        .collect()
}

pub fn write_sweep_csv<W: Write>(mut w: W, rows: &[SweepRow]) -> Result<()> {
    writeln!(w, "t,asr,auc")?;
    for r in rows {
        writeln!(w, "{},{},{}", r.t, r.asr, r.auc)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ConstantEpsilon, CountingPredictor, EpsilonModel, ModelSpec};

    fn sched() -> NoiseSchedule<f64> {
        NoiseSchedule::linear(100, 1e-4, 0.02).unwrap()
    }

    #[test]
    fn distances() {
        assert!((Distance::SquaredL2.of(&[0.3f64, -0.4]) - 0.25).abs() < 1e-15);
        assert!((Distance::L1.of(&[0.3f64, -0.4]) - 0.7).abs() < 1e-15);
    }

    #[test]
    fn constant_model_has_zero_t_error() {
        let c = ConstantEpsilon {
            value: vec![0.4, -0.9],
        };
        for k in [1, 3, 10] {
            let cfg = AttackConfig::new(10, k);
            let e = t_error(&c, &sched(), &[0.5, -0.5], &cfg, None).unwrap();
            assert!(e.abs() < 1e-10, "k = {k}: {e}");
        }
    }

    #[test]
    fn query_accounting() {
        let m = EpsilonModel::<f64>::init(ModelSpec::new(2, &[8], 100), 0).unwrap();
        let counter = CountingPredictor::new(&m);
        for (t, k) in [(10, 1), (10, 3), (25, 10), (1, 1)] {
            counter.reset();
            let cfg = AttackConfig::new(t, k);
            t_error(&counter, &sched(), &[0.1, 0.2], &cfg, None).unwrap();
            assert_eq!(counter.calls(), cfg.query_count());
            assert_eq!(cfg.query_count(), t.div_ceil(k) + 2);
        }
    }

    #[test]
    fn config_bounds() {
        assert!(AttackConfig::new(0, 1).validate(100).is_err());
        assert!(AttackConfig::new(95, 10).validate(100).is_err());
        assert!(AttackConfig::new(90, 10).validate(100).is_ok());
    }

    #[test]
    fn delta_vanishes_for_perfect_constant_model() {
        let eps = vec![0.3, -0.2];
        let c = ConstantEpsilon { value: eps.clone() };
        let d = delta_diagnostic(&c, &sched(), &[0.1, 0.1], &eps, 20, None).unwrap();
        assert!(d.abs() < 1e-15);
    }

    #[test]
    fn delta_zero_model_unit_noise() {
        let z = ConstantEpsilon::<f64>::zeros(2);
        let d = delta_diagnostic(&z, &sched(), &[0.1, 0.1], &[1.0, 0.0], 20, None).unwrap();
        assert_eq!(d, 1.0);
        assert!(delta_diagnostic(&z, &sched(), &[0.1, 0.1], &[1.0, 0.0], 100, None).is_err());
    }

    fn rows_1d(member: &[f64], holdout: &[f64]) -> Vec<FeatureRow<f64>> {
        let mut rows = Vec::new();
        for (i, &v) in member.iter().enumerate() {
            rows.push(FeatureRow {
                sample_id: i as u64,
                features: vec![v],
                label: Membership::Member,
            });
        }
        for (i, &v) in holdout.iter().enumerate() {
            rows.push(FeatureRow {
                sample_id: 1000 + i as u64,
                features: vec![v],
                label: Membership::Holdout,
            });
        }
        rows
    }

    #[test]
    fn classifier_learns_separable_features() {
        let member: Vec<f64> = (0..50).map(|i| 0.001 + 1e-5 * i as f64).collect();
        let holdout: Vec<f64> = (0..50).map(|i| 0.01 + 1e-4 * i as f64).collect();
        let rows = rows_1d(&member, &holdout);
        let cfg = ClassifierConfig {
            seed: 3,
            ..Default::default()
        };
        let clf = train_attack_classifier(&rows, &cfg).unwrap();
        assert_eq!(clf.train_accuracy, 1.0);
        assert_eq!(clf.train_ids.len(), 20);
        assert_eq!(clf.eval_ids.len(), 80);
        assert!(clf.train_ids.is_disjoint(&clf.eval_ids));
        let eval = eval_rows(&clf.eval_ids, &rows);
        let report = secmi_nns(&clf, &eval, &AttackConfig::new(10, 1), &[0.01]).unwrap();
        assert!(report.metrics.auc > 0.99);
        for r in &report.scored {
            assert!(r.score > 0.0 && r.score < 1.0);
        }
        assert!(matches!(
            secmi_nns(&clf, &rows, &AttackConfig::new(10, 1), &[]),
            Err(Error::SplitOverlap(_))
        ));
    }

    #[test]
    fn classifier_rejects_single_class_split() {
        let rows = rows_1d(&[0.1, 0.2, 0.3], &[]);
        assert!(train_attack_classifier(&rows, &ClassifierConfig::default()).is_err());
    }

    #[test]
    fn stat_examples() {
        use crate::metrics::ScoredSample as S;
        let mk = |m: &[f64], h: &[f64]| {
            let mut v = Vec::new();
            for (i, &s) in m.iter().enumerate() {
                v.push(S {
                    sample_id: i as u64,
                    score: s,
                    label: Membership::Member,
                });
            }
            for (i, &s) in h.iter().enumerate() {
                v.push(S {
                    sample_id: 10 + i as u64,
                    score: s,
                    label: Membership::Holdout,
                });
            }
            v
        };
        let cfg = AttackConfig::new(10, 1);
        let r = secmi_stat(mk(&[0.1, 0.2], &[0.3, 0.4]), &cfg, &[]).unwrap();
        assert_eq!(r.metrics.asr, 1.0);
        assert!(r.threshold.tau >= 0.2 && r.threshold.tau < 0.3);
        let r = secmi_stat(mk(&[0.5, 0.5], &[0.5, 0.5]), &cfg, &[]).unwrap();
        assert_eq!(r.metrics.asr, 0.5);
        let r = secmi_stat(mk(&[0.1, 0.3], &[0.2, 0.4]), &cfg, &[]).unwrap();
        assert_eq!(r.metrics.asr, 0.75);
        let fixed = AttackConfig {
            threshold_mode: ThresholdMode::Fixed { tau: 0.15 },
            ..cfg.clone()
        };
        let r = secmi_stat(mk(&[0.1, 0.3], &[0.2, 0.4]), &fixed, &[]).unwrap();
        assert_eq!(r.metrics.asr, 0.75);
        assert_eq!(r.threshold.tau, 0.15);
        assert!(matches!(
            secmi_stat::<f64>(vec![], &cfg, &[]),
            Err(Error::EmptyScores)
        ));
    }

    #[test]
    fn table_csv_and_merge() {
        let m = EpsilonModel::<f64>::init(ModelSpec::new(2, &[8], 100), 0).unwrap();
        let samples: Vec<LabeledSample<f64>> = (0..4)
            .map(|i| LabeledSample {
                sample_id: i,
                x0: vec![0.1 * i as f64, -0.2],
                membership: Some(if i % 2 == 0 {
                    Membership::Member
                } else {
                    Membership::Holdout
                }),
                condition: None,
            })
            .collect();
        let mut a =
            TErrorTable::compute(&m, &sched(), &samples, &AttackConfig::new(10, 1), true).unwrap();
        let b =
            TErrorTable::compute(&m, &sched(), &samples, &AttackConfig::new(20, 1), true).unwrap();
        let mut b2 = b.clone();
        b2.merge(a.clone());
        a.merge(b);
        assert_eq!(a, b2);
        assert_eq!(a.entries.len(), 8);
        for (key, &s) in &a.entries {
            let v = &a.error_vectors.as_ref().unwrap()[key];
            assert_eq!(Distance::SquaredL2.of(v), s);
        }
        let mut csv = Vec::new();
        a.write_csv(&mut csv, &labels_of(&samples)).unwrap();
        let text = String::from_utf8(csv).unwrap();
        assert_eq!(text.lines().count(), 9);
        assert!(text.lines().nth(1).unwrap().starts_with("0,10,"));
        let mut bin = Vec::new();
        a.write_error_vectors(&mut bin).unwrap();
        assert_eq!(bin.len(), 8 * (24 + 16));
    }
}
