//! Member-only training of the noise predictor, and checkpoints.

use std::collections::BTreeSet;
use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{ImageShape, LabeledSample, Membership};
use crate::error::{Error, Result};
use crate::model::{
    read_f64_payload, write_f64_payload, EmaState, EpsilonModel, ModelSpec, TrainItem,
};
use crate::scalar::Scalar;
use crate::schedule::{NoiseSchedule, ScheduleDescriptor};

pub const CHECKPOINT_VERSION: u32 = 1;
pub const DIVERGENCE_THRESHOLD: f64 = 1e6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Augmentation {
    #[default]
    None,
    /// Additive Gaussian noise.
    Jitter { sigma: f64 },
    /// Negates the whole vector with probability 1/2.
    SignFlip,
    /// Mirrors each image row with probability 1/2.
    HorizontalFlip,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    #[serde(default)]
    pub weight_decay: f64,
    pub ema_decay: f64,
    #[serde(default)]
    pub augmentation: Augmentation,
    pub seed: u64,
}

impl TrainConfig {
    fn validate(&self, n_members: usize) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.batch_size == 0 || self.batch_size > n_members {
            return bad(format!(
                "batch_size {} must be in 1..={n_members}",
                self.batch_size
            ));
        }
        if !(self.learning_rate > 0.0) {
            return bad("learning_rate must be positive".into());
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay must be nonnegative".into());
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return bad("ema_decay must lie in [0, 1)".into());
        }
        if let Augmentation::Jitter { sigma } = self.augmentation {
            if !(sigma >= 0.0) {
                return bad("jitter sigma must be nonnegative".into());
            }
        }
        Ok(())
    }
}

/// Negates `sample` when `flip` is set.
pub fn sign_flip<F: Scalar>(sample: &[F], flip: bool) -> Vec<F> {
    if flip {
        sample.iter().map(|&v| -v).collect()
    } else {
        sample.to_vec()
    }
}

/// Reverses every row of a row-major image.
pub fn horizontal_flip<F: Scalar>(sample: &[F], shape: ImageShape) -> Result<Vec<F>> {
    if shape.height * shape.width != sample.len() {
        return Err(Error::DimensionMismatch {
            expected: shape.height * shape.width,
            got: sample.len(),
        });
    }
    Ok(sample
        .chunks_exact(shape.width)
        .flat_map(|row| row.iter().rev().copied())
        .collect())
}

pub fn apply_augmentation<F: Scalar, R: Rng>(
    sample: &[F],
    kind: Augmentation,
    shape: Option<ImageShape>,
    rng: &mut R,
) -> Result<Vec<F>> {
    match kind {
        Augmentation::None => Ok(sample.to_vec()),
        Augmentation::Jitter { sigma } => Ok(sample
            .iter()
            .map(|&v| {
                let z: f64 = StandardNormal.sample(rng);
                v + F::lit(sigma * z)
            })
            .collect()),
        Augmentation::SignFlip => Ok(sign_flip(sample, rng.random_bool(0.5))),
        Augmentation::HorizontalFlip => {
            let shape = shape.ok_or_else(|| {
                Error::InvalidConfig("horizontal_flip requires image-shaped data".into())
            })?;
            if rng.random_bool(0.5) {
                horizontal_flip(sample, shape)
            } else {
                Ok(sample.to_vec())
            }
        }
    }
}

/// Adam with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW<F> {
    pub lr: F,
    pub beta1: F,
    pub beta2: F,
    pub eps: F,
    pub weight_decay: F,
    m: Vec<F>,
    v: Vec<F>,
    steps: i32,
}

impl<F: Scalar> AdamW<F> {
    pub fn new(n_params: usize, lr: f64, weight_decay: f64) -> Self {
        Self {
            lr: F::lit(lr),
            beta1: F::lit(0.9),
            beta2: F::lit(0.999),
            eps: F::lit(1e-8),
            weight_decay: F::lit(weight_decay),
            m: vec![F::zero(); n_params],
            v: vec![F::zero(); n_params],
            steps: 0,
        }
    }

    pub fn step(&mut self, params: &mut [F], grad: &[F]) {
        self.steps += 1;
        let one = F::one();
        let bc1 = one - self.beta1.powi(self.steps);
        let bc2 = one - self.beta2.powi(self.steps);
        for (((p, &g), m), v) in params
            .iter_mut()
            .zip(grad)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            *m = self.beta1 * *m + (one - self.beta1) * g;
            *v = self.beta2 * *v + (one - self.beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p = *p - self.lr * (m_hat / (v_hat.sqrt() + self.eps) + self.weight_decay * *p);
        }
    }
}

/// Everything needed to resume attacks against a trained model.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<F> {
    pub model: EpsilonModel<F>,
    pub ema: EmaState<F>,
    pub schedule: ScheduleDescriptor,
    pub train_config: TrainConfig,
    pub step_count: u64,
    /// Free-form provenance (split seed, trial index, ...).
    pub metadata: serde_json::Map<String, serde_json::Value>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointHeader {
    version: u32,
    model: ModelSpec,
    param_count: usize,
    ema_decay: f64,
    schedule: ScheduleDescriptor,
    train_config: TrainConfig,
    step_count: u64,
    metadata: serde_json::Map<String, serde_json::Value>,
}

impl<F: Scalar> Checkpoint<F> {
    /// Raw-weight model.
    pub fn raw_model(&self) -> &EpsilonModel<F> {
        &self.model
    }

    /// The model with EMA shadow weights swapped in.
    pub fn ema_model(&self) -> Result<EpsilonModel<F>> {
        self.model.with_params(self.ema.shadow().to_vec())
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let header = CheckpointHeader {
            version: CHECKPOINT_VERSION,
            model: self.model.spec().clone(),
            param_count: self.model.param_count(),
            ema_decay: self.ema.decay().to_f64_lossy(),
            schedule: self.schedule.clone(),
            train_config: self.train_config.clone(),
            step_count: self.step_count,
            metadata: self.metadata.clone(),
        };
        serde_json::to_writer(&mut w, &header)?;
        w.write_all(b"\n")?;
        write_f64_payload(&mut w, self.model.params())?;
        write_f64_payload(&mut w, self.ema.shadow())?;
        Ok(())
    }

    pub fn read_from<R: BufRead>(mut r: R) -> Result<Self> {
        let mut line = String::new();
        r.read_line(&mut line)?;
        let value: serde_json::Value = serde_json::from_str(line.trim_end())
            .map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
        let version = value.get("version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
        if version != CHECKPOINT_VERSION {
            return Err(Error::VersionMismatch {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let header: CheckpointHeader = serde_json::from_value(value)?;
        if header.model.param_count() != header.param_count {
            return Err(Error::Format(
                "param_count inconsistent with architecture".into(),
            ));
        }
        let params = read_f64_payload(&mut r, header.param_count)?;
        let shadow = read_f64_payload(&mut r, header.param_count)?;
        Ok(Self {
            model: EpsilonModel::from_params(header.model, params)?,
            ema: EmaState::new(F::lit(header.ema_decay), shadow)?,
            schedule: header.schedule,
            train_config: header.train_config,
            step_count: header.step_count,
            metadata: header.metadata,
        })
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<F> {
    pub checkpoint: Checkpoint<F>,
    /// `(epoch, mean batch loss)`, epochs counted from 1.
    pub loss_trace: Vec<(usize, f64)>,
    /// Sample draws that reached the optimizer.
    pub samples_consumed: u64,
    pub batches: u64,
    /// Distinct sample ids that reached the optimizer.
    pub ids_seen: BTreeSet<u64>,
}

pub fn write_loss_trace<W: Write>(mut w: W, trace: &[(usize, f64)]) -> Result<()> {
    writeln!(w, "epoch,mean_loss")?;
    for (epoch, loss) in trace {
        writeln!(w, "{epoch},{loss}")?;
    }
    Ok(())
}

/// Trains a freshly initialized model (seeded by `config.seed`) on the member
/// set. Each epoch visits a fresh permutation in full batches; a trailing
/// partial batch is dropped. Timesteps are uniform over `1..=T`.
pub fn train<F: Scalar>(
    members: &[LabeledSample<F>],
    schedule: &NoiseSchedule<F>,
    spec: ModelSpec,
    config: &TrainConfig,
    image_shape: Option<ImageShape>,
) -> Result<TrainOutcome<F>> {
    if members.is_empty() {
        return Err(Error::InvalidConfig("member set is empty".into()));
    }
    if let Some(s) = members
        .iter()
        .find(|s| s.membership != Some(Membership::Member))
    {
        return Err(Error::HoldoutLeak(s.sample_id));
    }
    config.validate(members.len())?;
    if spec.num_steps != schedule.num_steps() {
        return Err(Error::InvalidConfig(format!(
            "model expects T = {}, schedule has T = {}",
            spec.num_steps,
            schedule.num_steps()
        )));
    }
    if matches!(config.augmentation, Augmentation::HorizontalFlip) && image_shape.is_none() {
        return Err(Error::InvalidConfig(
            "horizontal_flip requires image-shaped data".into(),
        ));
    }

    let mut model = EpsilonModel::<F>::init(spec, config.seed)?;
    let mut ema = EmaState::new(F::lit(config.ema_decay), model.params().to_vec())?;
    let mut opt = AdamW::<F>::new(
        model.param_count(),
        config.learning_rate,
        config.weight_decay,
    );
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1);
    let num_steps = schedule.num_steps();
    let d = members[0].x0.len();

    let mut order: Vec<usize> = (0..members.len()).collect();
    let mut loss_trace = Vec::with_capacity(config.epochs);
    let mut step_count = 0u64;
    let mut samples_consumed = 0u64;
    let mut ids_seen = BTreeSet::new();

    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut epoch_batches = 0usize;
        for chunk in order.chunks_exact(config.batch_size) {
            let mut batch = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let s = &members[i];
                let x0 = apply_augmentation(&s.x0, config.augmentation, image_shape, &mut rng)?;
                let t = rng.random_range(1..=num_steps);
                let eps = (0..d)
                    .map(|_| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        F::lit(z)
                    })
                    .collect();
                ids_seen.insert(s.sample_id);
                batch.push(TrainItem {
                    x0,
                    t,
                    eps,
                    cond: s.condition.clone(),
                });
            }
            samples_consumed += batch.len() as u64;
            let (loss, grad) = model.loss_and_gradient(schedule, &batch)?;
            let loss = loss.to_f64_lossy();
            if !loss.is_finite() || loss > DIVERGENCE_THRESHOLD {
                return Err(Error::Diverged {
                    step: step_count,
                    loss,
                });
            }
            opt.step(model.params_mut(), &grad);
            ema.update(model.params())?;
            step_count += 1;
            epoch_loss += loss;
            epoch_batches += 1;
        }
        loss_trace.push((epoch, epoch_loss / epoch_batches as f64));
    }

    Ok(TrainOutcome {
        checkpoint: Checkpoint {
            model,
            ema,
            schedule: schedule.descriptor().clone(),
            train_config: config.clone(),
            step_count,
            metadata: Default::default(),
        },
        loss_trace,
        samples_consumed,
        batches: step_count,
        ids_seen,
    })
}
