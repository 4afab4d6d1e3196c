//! Closed-form Gaussian diffusion quantities.
//!
//! Timesteps are 1-based: `t` ranges over `1..=T`, and `t = 0` denotes the
//! clean data with `alpha_bar(0) = 1`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const DEFAULT_BETA_START: f64 = 1e-4;
pub const DEFAULT_BETA_END: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Linear,
}

/// Serializable description a schedule can be rebuilt from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleDescriptor {
    #[serde(rename = "T")]
    pub num_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub schedule_kind: ScheduleKind,
}

impl ScheduleDescriptor {
    pub fn build<F: Scalar>(&self) -> Result<NoiseSchedule<F>> {
        match self.schedule_kind {
            ScheduleKind::Linear => {
                NoiseSchedule::linear(self.num_steps, self.beta_start, self.beta_end)
            }
        }
    }
}

/// Precomputed variance schedule. Immutable once built.
#[derive(Clone, Debug)]
pub struct NoiseSchedule<F> {
    descriptor: ScheduleDescriptor,
    betas: Vec<F>,
    alphas: Vec<F>,
    // alpha_bars[0] = 1 is the t = 0 boundary, so this has T + 1 entries.
    alpha_bars: Vec<F>,
    posterior_variances: Vec<F>,
}

/// Mean and isotropic variance of `q(x_{t-1} | x_t, x_0)`.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianPosterior<F> {
    pub mean: Vec<F>,
    pub variance: F,
}

impl<F: Scalar> NoiseSchedule<F> {
    /// Linear beta schedule, endpoints inclusive.
    pub fn linear(num_steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if num_steps == 0 {
            return Err(Error::InvalidSchedule("T must be at least 1".into()));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::InvalidSchedule(format!(
                "need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
            )));
        }
        let betas: Vec<f64> = if num_steps == 1 {
            vec![beta_start]
        } else {
            let span = (num_steps - 1) as f64;
            (0..num_steps)
                .map(|i| beta_start + (beta_end - beta_start) * i as f64 / span)
                .collect()
        };
        let descriptor = ScheduleDescriptor {
            num_steps,
            beta_start,
            beta_end,
            schedule_kind: ScheduleKind::Linear,
        };
        Self::from_parts(descriptor, betas)
    }

    fn from_parts(descriptor: ScheduleDescriptor, betas: Vec<f64>) -> Result<Self> {
        if let Some(b) = betas.iter().find(|&&b| !(b > 0.0 && b < 1.0)) {
            return Err(Error::InvalidSchedule(format!("beta {b} outside (0, 1)")));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(betas.len() + 1);
        alpha_bars.push(1.0);
        for a in &alphas {
            let prev = *alpha_bars.last().unwrap();
            alpha_bars.push(prev * a);
        }
        let posterior_variances: Vec<f64> = (1..=betas.len())
            .map(|t| (1.0 - alpha_bars[t - 1]) / (1.0 - alpha_bars[t]) * betas[t - 1])
            .collect();
        let conv = |v: Vec<f64>| v.into_iter().map(F::lit).collect::<Vec<F>>();
        Ok(Self {
            descriptor,
            betas: conv(betas),
            alphas: conv(alphas),
            alpha_bars: conv(alpha_bars),
            posterior_variances: conv(posterior_variances),
        })
    }

    pub fn descriptor(&self) -> &ScheduleDescriptor {
        &self.descriptor
    }

    pub fn num_steps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[F] {
        &self.betas
    }

    pub fn alphas(&self) -> &[F] {
        &self.alphas
    }

    /// `alpha_bar` for `t = 1..=T`, excluding the boundary value.
    pub fn alpha_bars(&self) -> &[F] {
        &self.alpha_bars[1..]
    }

    pub fn posterior_variances(&self) -> &[F] {
        &self.posterior_variances
    }

    pub(crate) fn check_t(&self, t: usize, lo: usize) -> Result<()> {
        if t < lo || t > self.num_steps() {
            Err(Error::TimestepOutOfRange {
                t,
                lo,
                hi: self.num_steps(),
            })
        } else {
            Ok(())
        }
    }

    pub fn beta(&self, t: usize) -> F {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> F {
        self.alphas[t - 1]
    }

    /// Cumulative product up to `t`; `alpha_bar(0) == 1`.
    pub fn alpha_bar(&self, t: usize) -> F {
        self.alpha_bars[t]
    }

    pub fn posterior_variance(&self, t: usize) -> F {
        self.posterior_variances[t - 1]
    }

    /// `x_t = sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eps`.
    pub fn q_sample(&self, x0: &[F], t: usize, eps: &[F]) -> Result<Vec<F>> {
        self.check_t(t, 1)?;
        if x0.len() != eps.len() {
            return Err(Error::DimensionMismatch {
                expected: x0.len(),
                got: eps.len(),
            });
        }
        let ab = self.alpha_bar(t);
        let (a, b) = (ab.sqrt(), (F::one() - ab).sqrt());
        Ok(x0.iter().zip(eps).map(|(&x, &e)| a * x + b * e).collect())
    }

    /// Forward-process posterior `q(x_{t-1} | x_t, x_0)` for `2 <= t <= T`.
    pub fn true_posterior(&self, x0: &[F], xt: &[F], t: usize) -> Result<GaussianPosterior<F>> {
        self.check_t(t, 2)?;
        self.posterior_unchecked(x0, xt, t)
    }

    /// Like [`true_posterior`](Self::true_posterior) but also accepts `t = 1`
    /// under the `alpha_bar(0) = 1` convention, where the posterior collapses
    /// onto `x0` with zero variance.
    pub fn true_posterior_with_boundary(
        &self,
        x0: &[F],
        xt: &[F],
        t: usize,
    ) -> Result<GaussianPosterior<F>> {
        self.check_t(t, 1)?;
        self.posterior_unchecked(x0, xt, t)
    }

    fn posterior_unchecked(&self, x0: &[F], xt: &[F], t: usize) -> Result<GaussianPosterior<F>> {
        if x0.len() != xt.len() {
            return Err(Error::DimensionMismatch {
                expected: x0.len(),
                got: xt.len(),
            });
        }
        let (c0, ct) = self.posterior_mean_coefficients(t);
        let mean = x0.iter().zip(xt).map(|(&a, &b)| c0 * a + ct * b).collect();
        Ok(GaussianPosterior {
            mean,
            variance: self.posterior_variance(t),
        })
    }

    /// Coefficients `(c_x0, c_xt)` of the posterior mean at `t`.
    pub fn posterior_mean_coefficients(&self, t: usize) -> (F, F) {
        let ab = self.alpha_bar(t);
        let ab_prev = self.alpha_bar(t - 1);
        let denom = F::one() - ab;
        let c0 = ab_prev.sqrt() * self.beta(t) / denom;
        let ct = self.alpha(t).sqrt() * (F::one() - ab_prev) / denom;
        (c0, ct)
    }
}
