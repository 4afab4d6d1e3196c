//! Deterministic reverse/denoise operators and stochastic ancestral sampling.
//!
//! The deterministic operators are DDIM updates driven by the clean-sample
//! estimate `f(x_t, t) = (x_t - sqrt(1 - a_t) eps(x_t, t)) / sqrt(a_t)`:
//!
//! * `phi`: `x_{t'} = sqrt(a_{t'}) f(x_t, t) + sqrt(1 - a_{t'}) eps(x_t, t)`, `t' > t`
//! * `psi`: the same update with `t' < t`
//!
//! where `a` is the cumulative `alpha_bar`. Each operator queries the
//! predictor once, at the operand's own timestep.

use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::EpsilonPredictor;
use crate::scalar::{all_finite, Scalar};
use crate::schedule::NoiseSchedule;

const ALPHA_BAR_SQRT_FLOOR: f64 = 1e-12;

/// Span and stride of a multi-step deterministic trajectory.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryConfig<F> {
    pub stride_k: usize,
    pub t_start: usize,
    pub t_end: usize,
    pub conditioning: Option<Vec<F>>,
}

impl<F: Scalar> TrajectoryConfig<F> {
    pub fn new(t_start: usize, t_end: usize, stride_k: usize) -> Self {
        Self {
            stride_k,
            t_start,
            t_end,
            conditioning: None,
        }
    }

    pub fn with_condition(mut self, cond: Option<Vec<F>>) -> Self {
        self.conditioning = cond;
        self
    }

    /// Intermediate timesteps visited after `t_start`, ending at `t_end`.
    /// A span not divisible by the stride ends with one shorter step.
    pub fn waypoints(&self) -> Result<Vec<usize>> {
        if self.stride_k == 0 {
            return Err(Error::InvalidConfig("stride_k must be positive".into()));
        }
        if self.t_start == self.t_end {
            return Err(Error::InvalidSpan {
                from: self.t_start,
                to: self.t_end,
            });
        }
        let mut points = Vec::new();
        let mut t = self.t_start;
        if self.t_start < self.t_end {
            while t < self.t_end {
                t = (t + self.stride_k).min(self.t_end);
                points.push(t);
            }
        } else {
            while t > self.t_end {
                t = t.saturating_sub(self.stride_k).max(self.t_end);
                points.push(t);
            }
        }
        Ok(points)
    }

    /// Number of predictor queries the trajectory performs.
    pub fn query_count(&self) -> usize {
        self.t_start
            .abs_diff(self.t_end)
            .div_ceil(self.stride_k.max(1))
    }
}

fn sqrt_alpha_bar<F: Scalar>(schedule: &NoiseSchedule<F>, t: usize) -> Result<F> {
    let s = schedule.alpha_bar(t).sqrt();
    if s < F::lit(ALPHA_BAR_SQRT_FLOOR) {
        return Err(Error::AlphaBarUnderflow(t));
    }
    Ok(s)
}

/// Clean-sample estimate from a given noise estimate. Valid for `0 <= t <= T`.
pub fn x0_from_eps<F: Scalar>(
    schedule: &NoiseSchedule<F>,
    xt: &[F],
    t: usize,
    eps: &[F],
) -> Result<Vec<F>> {
    schedule.check_t(t, 0)?;
    if xt.len() != eps.len() {
        return Err(Error::DimensionMismatch {
            expected: xt.len(),
            got: eps.len(),
        });
    }
    let a = sqrt_alpha_bar(schedule, t)?;
    let b = (F::one() - schedule.alpha_bar(t)).sqrt();
    Ok(xt.iter().zip(eps).map(|(&x, &e)| (x - b * e) / a).collect())
}

/// `f(x_t, t)`: the model's estimate of `x_0`, for `1 <= t <= T`.
pub fn predict_x0<F: Scalar, P: EpsilonPredictor<F>>(
    model: &P,
    schedule: &NoiseSchedule<F>,
    xt: &[F],
    t: usize,
    cond: Option<&[F]>,
) -> Result<Vec<F>> {
    schedule.check_t(t, 1)?;
    let eps = model.predict(xt, t, cond)?;
    x0_from_eps(schedule, xt, t, &eps)
}

/// One DDIM move from `t` to `target` (either direction) with a single query
/// at `max(t, 1)`.
pub fn ddim_move<F: Scalar, P: EpsilonPredictor<F>>(
    model: &P,
    schedule: &NoiseSchedule<F>,
    xt: &[F],
    t: usize,
    target: usize,
    cond: Option<&[F]>,
) -> Result<Vec<F>> {
    schedule.check_t(t, 0)?;
    schedule.check_t(target, 0)?;
    // The network is only trained on 1..=T, so a clean input is queried at
    // the first noise level. With alpha_bar_0 = 1 the x0 estimate is x itself.
    let eps = model.predict(xt, t.max(1), cond)?;
    let x0 = x0_from_eps(schedule, xt, t, &eps)?;
    let a = schedule.alpha_bar(target).sqrt();
    let b = (F::one() - schedule.alpha_bar(target)).sqrt();
    let out: Vec<F> = x0.iter().zip(&eps).map(|(&x, &e)| a * x + b * e).collect();
    if !all_finite(&out) {
        return Err(Error::NonFinite(format!(
            "deterministic step {t} -> {target}"
        )));
    }
    Ok(out)
}

/// `phi(x_t, t)`: deterministic step from `t` to `t + 1`, `0 <= t < T`.
pub fn phi_step<F: Scalar, P: EpsilonPredictor<F>>(
    model: &P,
    schedule: &NoiseSchedule<F>,
    xt: &[F],
    t: usize,
    cond: Option<&[F]>,
) -> Result<Vec<F>> {
    phi_step_to(model, schedule, xt, t, t + 1, cond)
}

/// Strided `phi`: from `t` up to `target > t`.
pub fn phi_step_to<F: Scalar, P: EpsilonPredictor<F>>(
    model: &P,
    schedule: &NoiseSchedule<F>,
    xt: &[F],
    t: usize,
    target: usize,
    cond: Option<&[F]>,
) -> Result<Vec<F>> {
    if target <= t || target > schedule.num_steps() {
        return Err(Error::InvalidSpan {
            from: t,
            to: target,
        });
    }
    ddim_move(model, schedule, xt, t, target, cond)
}

/// `psi(x_t, t)`: deterministic step from `t` to `t - 1`, `1 <= t <= T`.
/// At `t = 1` this returns `f(x_1, 1)`.
pub fn psi_step<F: Scalar, P: EpsilonPredictor<F>>(
    model: &P,
    schedule: &NoiseSchedule<F>,
    xt: &[F],
    t: usize,
    cond: Option<&[F]>,
) -> Result<Vec<F>> {
    if t == 0 {
        return Err(Error::InvalidSpan { from: 0, to: 0 });
    }
    psi_step_to(model, schedule, xt, t, t - 1, cond)
}

/// Strided `psi`: from `t` down to `target < t`.
pub fn psi_step_to<F: Scalar, P: EpsilonPredictor<F>>(
    model: &P,
    schedule: &NoiseSchedule<F>,
    xt: &[F],
    t: usize,
    target: usize,
    cond: Option<&[F]>,
) -> Result<Vec<F>> {
    if target >= t || t > schedule.num_steps() {
        return Err(Error::InvalidSpan {
            from: t,
            to: target,
        });
    }
    ddim_move(model, schedule, xt, t, target, cond)
}

/// `Phi`: iterated `phi` from `config.t_start` up to `config.t_end`.
pub fn deterministic_reverse<F: Scalar, P: EpsilonPredictor<F>>(
    model: &P,
    schedule: &NoiseSchedule<F>,
    x: &[F],
    config: &TrajectoryConfig<F>,
) -> Result<Vec<F>> {
    if config.t_start >= config.t_end || config.t_end > schedule.num_steps() {
        return Err(Error::InvalidSpan {
            from: config.t_start,
            to: config.t_end,
        });
    }
    run_waypoints(model, schedule, x, config)
}

/// `Psi`: iterated `psi` from `config.t_start` down to `config.t_end`.
pub fn deterministic_denoise<F: Scalar, P: EpsilonPredictor<F>>(
    model: &P,
    schedule: &NoiseSchedule<F>,
    x: &[F],
    config: &TrajectoryConfig<F>,
) -> Result<Vec<F>> {
    if config.t_start <= config.t_end || config.t_start > schedule.num_steps() {
        return Err(Error::InvalidSpan {
            from: config.t_start,
            to: config.t_end,
        });
    }
    run_waypoints(model, schedule, x, config)
}

fn run_waypoints<F: Scalar, P: EpsilonPredictor<F>>(
    model: &P,
    schedule: &NoiseSchedule<F>,
    x: &[F],
    config: &TrajectoryConfig<F>,
) -> Result<Vec<F>> {
    let cond = config.conditioning.as_deref();
    let mut cur = x.to_vec();
    let mut t = config.t_start;
    for next in config.waypoints()? {
        cur = ddim_move(model, schedule, &cur, t, next, cond)?;
        t = next;
    }
    Ok(cur)
}

/// One stochastic denoising step `x_t -> x_{t-1}` with the standard mean
/// `(x_t - beta_t / sqrt(1 - a_t) eps) / sqrt(alpha_t)`. `noise` is scaled by
/// the posterior standard deviation and ignored at `t = 1`.
pub fn ancestral_step<F: Scalar, P: EpsilonPredictor<F>>(
    model: &P,
    schedule: &NoiseSchedule<F>,
    xt: &[F],
    t: usize,
    cond: Option<&[F]>,
    noise: Option<&[F]>,
) -> Result<Vec<F>> {
    schedule.check_t(t, 1)?;
    let eps = model.predict(xt, t, cond)?;
    let coef = schedule.beta(t) / (F::one() - schedule.alpha_bar(t)).sqrt();
    let inv_sqrt_alpha = F::one() / schedule.alpha(t).sqrt();
    let mut out: Vec<F> = xt
        .iter()
        .zip(&eps)
        .map(|(&x, &e)| inv_sqrt_alpha * (x - coef * e))
        .collect();
    if let (true, Some(z)) = (t > 1, noise) {
        let sigma = schedule.posterior_variance(t).sqrt();
        for (o, &zi) in out.iter_mut().zip(z) {
            *o = *o + sigma * zi;
        }
    }
    Ok(out)
}

pub(crate) fn standard_normal<F: Scalar>(rng: &mut ChaCha8Rng, d: usize) -> Vec<F> {
    (0..d)
        .map(|_| {
            let v: f64 = StandardNormal.sample(rng);
            F::lit(v)
        })
        .collect()
}

/// Per-sample RNG stream derived from `(seed, sample_id)`.
pub fn sample_rng(seed: u64, sample_id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(sample_id);
    rng
}

/// Runs the full chain from `x_T` down to `x_0`. With `rng = None` the
/// injected noise is zero. Returns every visited state, `x_T` first.
pub fn ancestral_trajectory<F: Scalar, P: EpsilonPredictor<F>>(
    model: &P,
    schedule: &NoiseSchedule<F>,
    x_t: Vec<F>,
    cond: Option<&[F]>,
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<Vec<Vec<F>>> {
    let d = x_t.len();
    let mut states = Vec::with_capacity(schedule.num_steps() + 1);
    states.push(x_t);
    for t in (1..=schedule.num_steps()).rev() {
        let noise = match rng.as_deref_mut() {
            Some(r) if t > 1 => Some(standard_normal::<F>(r, d)),
            _ => None,
        };
        let next = ancestral_step(
            model,
            schedule,
            states.last().unwrap(),
            t,
            cond,
            noise.as_deref(),
        )?;
        if !all_finite(&next) {
            return Err(Error::NonFinite(format!("ancestral sample at t = {t}")));
        }
        states.push(next);
    }
    Ok(states)
}

/// Draws `n` samples starting from seeded `x_T ~ N(0, I)`.
pub fn ancestral_sample<F: Scalar, P: EpsilonPredictor<F>>(
    model: &P,
    schedule: &NoiseSchedule<F>,
    n: usize,
    seed: u64,
    cond: Option<&[F]>,
) -> Result<Vec<Vec<F>>> {
    Ok(ancestral_sample_traced(model, schedule, n, seed, cond, false)?.0)
}

/// Final samples, plus every intermediate state when `record` is set.
#[allow(clippy::type_complexity)]
pub fn ancestral_sample_traced<F: Scalar, P: EpsilonPredictor<F>>(
    model: &P,
    schedule: &NoiseSchedule<F>,
    n: usize,
    seed: u64,
    cond: Option<&[F]>,
    record: bool,
) -> Result<(Vec<Vec<F>>, Option<Vec<Vec<Vec<F>>>>)> {
    let d = model.data_dim();
    let runs: Vec<Vec<Vec<F>>> = (0..n as u64)
        .into_par_iter()
        .map(|id| {
            let mut rng = sample_rng(seed, id);
            let x_t = standard_normal::<F>(&mut rng, d);
            let mut states = ancestral_trajectory(model, schedule, x_t, cond, Some(&mut rng))?;
            if !record {
                let last = states.pop().unwrap();
                states = vec![last];
            }
            Ok(states)
        })
        .collect::<Result<_>>()?;
    let samples = runs.iter().map(|s| s.last().unwrap().clone()).collect();
    Ok((samples, record.then_some(runs)))
}

/// Writes `(sample_id, t, component_index, value)` rows for recorded
/// trajectories (states ordered from `t = T` down to `t = 0`).
pub fn write_trajectory_csv<W: Write, F: Scalar>(
    mut w: W,
    trajectories: &[Vec<Vec<F>>],
) -> Result<()> {
    writeln!(w, "sample_id,t,component_index,value")?;
    for (id, states) in trajectories.iter().enumerate() {
        let num_steps = states.len() - 1;
        for (i, state) in states.iter().enumerate() {
            for (c, v) in state.iter().enumerate() {
                writeln!(w, "{id},{},{c},{}", num_steps - i, v.to_f64_lossy())?;
            }
        }
    }
    Ok(())
}
