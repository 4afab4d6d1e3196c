//! Reference attacks: per-sample training loss, and two generator-side
//! attacks that only see synthetic samples.

use rayon::prelude::*;

use crate::data::LabeledSample;
use crate::error::{Error, Result};
use crate::metrics::{AttackReport, Orientation, ScoredSample};
use crate::model::EpsilonPredictor;
use crate::sampler::{ancestral_sample, sample_rng, standard_normal};
use crate::scalar::Scalar;
use crate::schedule::NoiseSchedule;
use crate::secmi::Distance;

pub const DEFAULT_SYNTHETIC_SIZE: usize = 1000;

/// Samples drawn from the target model with full ancestral sampling.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSet<F> {
    pub points: Vec<Vec<F>>,
    pub seed: u64,
}

impl<F: Scalar> SyntheticSet<F> {
    pub fn generate<P: EpsilonPredictor<F>>(
        model: &P,
        schedule: &NoiseSchedule<F>,
        n: usize,
        seed: u64,
        cond: Option<&[F]>,
    ) -> Result<Self> {
        if n == 0 {
            return Err(Error::EmptySyntheticSet);
        }
        Ok(Self {
            points: ancestral_sample(model, schedule, n, seed, cond)?,
            seed,
        })
    }

    pub fn from_points(points: Vec<Vec<F>>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::EmptySyntheticSet);
        }
        Ok(Self { points, seed: 0 })
    }
}

fn euclid<F: Scalar>(a: &[F], b: &[F]) -> F {
    Distance::SquaredL2.between(a, b).sqrt()
}

/// Mean over `t_set` of `||eps_theta(q_sample(x0, t, eps), t) - eps||^2`, with
/// noise drawn from the `(seed, sample_id)` stream. Lower means member.
pub fn loss_mia_score<F: Scalar, P: EpsilonPredictor<F>>(
    model: &P,
    schedule: &NoiseSchedule<F>,
    sample: &LabeledSample<F>,
    t_set: &[usize],
    seed: u64,
) -> Result<F> {
    if t_set.is_empty() {
        return Err(Error::InvalidConfig(
            "loss attack needs at least one timestep".into(),
        ));
    }
    let mut rng = sample_rng(seed, sample.sample_id);
    let mut total = F::zero();
    for &t in t_set {
        let eps: Vec<F> = standard_normal(&mut rng, sample.x0.len());
        let xt = schedule.q_sample(&sample.x0, t, &eps)?;
        let pred = model.predict(&xt, t, sample.condition.as_deref())?;
        total = total + Distance::SquaredL2.between(&pred, &eps);
    }
    Ok(total / F::lit(t_set.len() as f64))
}

/// Squared distance to the nearest synthetic point. Lower means member.
pub fn ganleaks_bb_score<F: Scalar>(x0: &[F], synthetic: &SyntheticSet<F>) -> Result<F> {
    synthetic
        .points
        .iter()
        .map(|p| Distance::SquaredL2.between(x0, p))
        .reduce(F::min)
        .ok_or(Error::EmptySyntheticSet)
}

/// Fraction of synthetic points within Euclidean `radius` of `x0`. Higher
/// means member.
pub fn mc_set_score<F: Scalar>(x0: &[F], synthetic: &SyntheticSet<F>, radius: F) -> Result<F> {
    if synthetic.points.is_empty() {
        return Err(Error::EmptySyntheticSet);
    }
    let hits = synthetic
        .points
        .iter()
        .filter(|p| euclid(x0, p) <= radius)
        .count();
    Ok(F::lit(hits as f64 / synthetic.points.len() as f64))
}

/// Median Euclidean distance over all unordered pairs of synthetic points.
pub fn median_pairwise_radius<F: Scalar>(synthetic: &SyntheticSet<F>) -> Result<F> {
    let pts = &synthetic.points;
    if pts.len() < 2 {
        return Err(Error::EmptySyntheticSet);
    }
    let mut d: Vec<f64> = (0..pts.len())
        .into_par_iter()
        .flat_map_iter(|i| {
            ((i + 1)..pts.len()).map(move |j| euclid(&pts[i], &pts[j]).to_f64_lossy())
        })
        .collect();
    d.sort_by(f64::total_cmp);
    let m = d.len();
    let med = if m % 2 == 1 {
        d[m / 2]
    } else {
        0.5 * (d[m / 2 - 1] + d[m / 2])
    };
    Ok(F::lit(med))
}

fn scored<F: Scalar>(
    samples: &[LabeledSample<F>],
    f: impl Fn(&LabeledSample<F>) -> Result<F> + Sync + Send,
) -> Result<Vec<ScoredSample<F>>> {
    samples
        .par_iter()
        .map(|s| {
            let label = s.membership.ok_or_else(|| {
                Error::InvalidDataset(format!("sample {} has no membership label", s.sample_id))
            })?;
            Ok(ScoredSample {
                sample_id: s.sample_id,
                score: f(s)?,
                label,
            })
        })
        .collect()
}

pub fn loss_mia<F: Scalar, P: EpsilonPredictor<F>>(
    model: &P,
    schedule: &NoiseSchedule<F>,
    samples: &[LabeledSample<F>],
    t_set: &[usize],
    seed: u64,
    fpr_levels: &[f64],
) -> Result<AttackReport<F>> {
    let s = scored(samples, |s| loss_mia_score(model, schedule, s, t_set, seed))?;
    AttackReport::evaluate("loss_mia", Orientation::LowIsMember, s, fpr_levels)
}

pub fn ganleaks_bb<F: Scalar>(
    samples: &[LabeledSample<F>],
    synthetic: &SyntheticSet<F>,
    fpr_levels: &[f64],
) -> Result<AttackReport<F>> {
    let s = scored(samples, |s| ganleaks_bb_score(&s.x0, synthetic))?;
    AttackReport::evaluate("ganleaks_bb", Orientation::LowIsMember, s, fpr_levels)
}

pub fn mc_set<F: Scalar>(
    samples: &[LabeledSample<F>],
    synthetic: &SyntheticSet<F>,
    radius: F,
    fpr_levels: &[f64],
) -> Result<AttackReport<F>> {
    let s = scored(samples, |s| mc_set_score(&s.x0, synthetic, radius))?;
    AttackReport::evaluate("mc_set", Orientation::HighIsMember, s, fpr_levels)
}
