//! The noise predictor and the small dense network underneath it.

use std::io::{BufRead, Read, Write};
use std::sync::atomic::{AtomicUsize, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{all_finite, Scalar};
use crate::schedule::NoiseSchedule;

pub const DEFAULT_TIME_EMBEDDING_DIM: usize = 16;
const MAX_TIME_FREQUENCY: f64 = 100.0;
// Fixed chunking keeps the gradient reduction order independent of the
// number of worker threads.
const GRAD_CHUNK: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Silu,
    Tanh,
}

impl Activation {
    #[inline]
    fn apply<F: Scalar>(self, x: F) -> F {
        match self {
            Activation::Silu => x / (F::one() + (-x).exp()),
            Activation::Tanh => x.tanh(),
        }
    }

    #[inline]
    fn derivative<F: Scalar>(self, x: F) -> F {
        match self {
            Activation::Silu => {
                let s = F::one() / (F::one() + (-x).exp());
                s * (F::one() + x * (F::one() - s))
            }
            Activation::Tanh => {
                let y = x.tanh();
                F::one() - y * y
            }
        }
    }
}

/// Fully connected network with a linear output layer.
///
/// Parameters are stored flat, layer by layer: the row-major `out x in`
/// weight matrix followed by the `out` biases.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp<F> {
    dims: Vec<usize>,
    activation: Activation,
    params: Vec<F>,
}

/// Intermediate values kept by [`Mlp::forward_traced`] for the backward pass.
#[derive(Clone, Debug, Default)]
pub struct Trace<F> {
    // inputs[l] feeds layer l; pre[l] is layer l's affine output.
    inputs: Vec<Vec<F>>,
    pre: Vec<Vec<F>>,
}

impl<F: Scalar> Mlp<F> {
    pub fn param_count_for(dims: &[usize]) -> usize {
        dims.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    fn check_dims(dims: &[usize]) -> Result<()> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(Error::InvalidArchitecture(format!("layer sizes {dims:?}")));
        }
        Ok(())
    }

    pub fn zeros(dims: Vec<usize>, activation: Activation) -> Result<Self> {
        Self::check_dims(&dims)?;
        let params = vec![F::zero(); Self::param_count_for(&dims)];
        Ok(Self {
            dims,
            activation,
            params,
        })
    }

    /// Uniform `[-1/sqrt(fan_in), 1/sqrt(fan_in)]` initialization.
    pub fn init(dims: Vec<usize>, activation: Activation, seed: u64) -> Result<Self> {
        let mut net = Self::zeros(dims, activation)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut off = 0;
        for w in net.dims.windows(2) {
            let bound = 1.0 / (w[0] as f64).sqrt();
            for p in &mut net.params[off..off + w[0] * w[1] + w[1]] {
                *p = F::lit(rng.random_range(-bound..=bound));
            }
            off += w[0] * w[1] + w[1];
        }
        Ok(net)
    }

    pub fn from_params(dims: Vec<usize>, activation: Activation, params: Vec<F>) -> Result<Self> {
        Self::check_dims(&dims)?;
        let expected = Self::param_count_for(&dims);
        if params.len() != expected {
            return Err(Error::DimensionMismatch {
                expected,
                got: params.len(),
            });
        }
        Ok(Self {
            dims,
            activation,
            params,
        })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn params(&self) -> &[F] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [F] {
        &mut self.params
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.dims.last().unwrap()
    }

    pub fn forward(&self, input: &[F]) -> Vec<F> {
        self.forward_with(&self.params, input, None)
    }

    pub fn forward_traced(&self, input: &[F], trace: &mut Trace<F>) -> Vec<F> {
        self.forward_with(&self.params, input, Some(trace))
    }

    fn forward_with(&self, params: &[F], input: &[F], mut trace: Option<&mut Trace<F>>) -> Vec<F> {
        debug_assert_eq!(input.len(), self.input_dim());
        if let Some(tr) = trace.as_deref_mut() {
            tr.inputs.clear();
            tr.pre.clear();
        }
        let n_layers = self.dims.len() - 1;
        let mut h = input.to_vec();
        let mut off = 0;
        for (l, w) in self.dims.windows(2).enumerate() {
            let (n_in, n_out) = (w[0], w[1]);
            let weights = &params[off..off + n_in * n_out];
            let bias = &params[off + n_in * n_out..off + n_in * n_out + n_out];
            off += n_in * n_out + n_out;
            let z: Vec<F> = (0..n_out)
                .map(|o| {
                    let row = &weights[o * n_in..(o + 1) * n_in];
                    row.iter()
                        .zip(&h)
                        .fold(bias[o], |acc, (&wi, &hi)| acc + wi * hi)
                })
                .collect();
            let last = l + 1 == n_layers;
            let next = if last {
                z.clone()
            } else {
                z.iter().map(|&v| self.activation.apply(v)).collect()
            };
            if let Some(tr) = trace.as_deref_mut() {
                tr.inputs.push(std::mem::take(&mut h));
                tr.pre.push(z);
            }
            h = next;
        }
        h
    }

    /// Accumulates `d(loss)/d(params)` into `grad` given `d(loss)/d(output)`.
    /// Returns `d(loss)/d(input)`.
    pub fn backward(&self, trace: &Trace<F>, grad_output: &[F], grad: &mut [F]) -> Vec<F> {
        let n_layers = self.dims.len() - 1;
        let mut offsets = Vec::with_capacity(n_layers);
        let mut off = 0;
        for w in self.dims.windows(2) {
            offsets.push(off);
            off += w[0] * w[1] + w[1];
        }
        let mut delta = grad_output.to_vec();
        for l in (0..n_layers).rev() {
            let (n_in, n_out) = (self.dims[l], self.dims[l + 1]);
            if l + 1 != n_layers {
                for (d, &z) in delta.iter_mut().zip(&trace.pre[l]) {
                    *d = *d * self.activation.derivative(z);
                }
            }
            let off = offsets[l];
            let input = &trace.inputs[l];
            let (gw, gb) = grad[off..off + n_in * n_out + n_out].split_at_mut(n_in * n_out);
            let weights = &self.params[off..off + n_in * n_out];
            let mut delta_in = vec![F::zero(); n_in];
            for o in 0..n_out {
                let d = delta[o];
                gb[o] = gb[o] + d;
                let grow = &mut gw[o * n_in..(o + 1) * n_in];
                let wrow = &weights[o * n_in..(o + 1) * n_in];
                for i in 0..n_in {
                    grow[i] = grow[i] + d * input[i];
                    delta_in[i] = delta_in[i] + d * wrow[i];
                }
            }
            delta = delta_in;
        }
        delta
    }
}

/// Sinusoidal features of `t / T`: `[sin(w_i u), cos(w_i u)]` with
/// frequencies spaced geometrically from 1 to 100.
pub fn time_embedding<F: Scalar>(t: usize, num_steps: usize, dim: usize) -> Vec<F> {
    let half = dim / 2;
    let u = t as f64 / num_steps as f64;
    let mut out = Vec::with_capacity(dim);
    for i in 0..half {
        let freq = if half > 1 {
            MAX_TIME_FREQUENCY.powf(i as f64 / (half - 1) as f64)
        } else {
            1.0
        };
        out.push(F::lit((freq * u).sin()));
    }
    for i in 0..half {
        let freq = if half > 1 {
            MAX_TIME_FREQUENCY.powf(i as f64 / (half - 1) as f64)
        } else {
            1.0
        };
        out.push(F::lit((freq * u).cos()));
    }
    out
}

/// `[sin(2^i pi x_j)..., cos(2^i pi x_j)...]`, ordered by coordinate then octave.
pub fn coord_features<F: Scalar>(x: &[F], octaves: usize) -> Vec<F> {
    let mut sin = Vec::with_capacity(x.len() * octaves);
    let mut cos = Vec::with_capacity(x.len() * octaves);
    for &v in x {
        let mut scale = F::lit(std::f64::consts::PI);
        for _ in 0..octaves {
            let a = scale * v;
            sin.push(a.sin());
            cos.push(a.cos());
            scale = scale + scale;
        }
    }
    sin.extend(cos);
    sin
}

/// Anything that predicts the injected noise from `(x_t, t, condition)`.
pub trait EpsilonPredictor<F: Scalar>: Sync {
    fn data_dim(&self) -> usize;

    fn predict(&self, xt: &[F], t: usize, cond: Option<&[F]>) -> Result<Vec<F>>;
}

/// Architecture of an [`EpsilonModel`], also its serialized header.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    /// `[d, hidden..., d]`; the first layer additionally receives the time
    /// embedding and the condition vector.
    pub layer_dims: Vec<usize>,
    pub time_embedding_dim: usize,
    /// Octaves of sinusoidal features of `x_t` appended to the input
    /// (`sin(2^i pi x_j)`, `cos(2^i pi x_j)` for `i < coord_octaves`).
    #[serde(default)]
    pub coord_octaves: usize,
    pub condition_dim: usize,
    #[serde(default)]
    pub activation: Activation,
    /// Number of diffusion steps used to normalize `t`.
    pub num_steps: usize,
}

impl ModelSpec {
    pub fn new(data_dim: usize, hidden: &[usize], num_steps: usize) -> Self {
        let mut layer_dims = vec![data_dim];
        layer_dims.extend_from_slice(hidden);
        layer_dims.push(data_dim);
        Self {
            layer_dims,
            time_embedding_dim: DEFAULT_TIME_EMBEDDING_DIM,
            coord_octaves: 0,
            condition_dim: 0,
            activation: Activation::Silu,
            num_steps,
        }
    }

    pub fn data_dim(&self) -> usize {
        self.layer_dims[0]
    }

    fn network_dims(&self) -> Vec<usize> {
        let mut dims = self.layer_dims.clone();
        dims[0] += 2 * dims[0] * self.coord_octaves + self.time_embedding_dim + self.condition_dim;
        dims
    }

    pub fn param_count(&self) -> usize {
        Mlp::<f64>::param_count_for(&self.network_dims())
    }

    fn validate(&self) -> Result<()> {
        let dims = &self.layer_dims;
        if dims.len() < 2 || dims[0] != *dims.last().unwrap() {
            return Err(Error::InvalidArchitecture(format!(
                "layer_dims must start and end with the data dimension, got {dims:?}"
            )));
        }
        if !self.time_embedding_dim.is_multiple_of(2) {
            return Err(Error::InvalidArchitecture(
                "time_embedding_dim must be even".into(),
            ));
        }
        if self.num_steps == 0 {
            return Err(Error::InvalidArchitecture(
                "num_steps must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// One training example for the noise-prediction objective.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainItem<F> {
    pub x0: Vec<F>,
    pub t: usize,
    pub eps: Vec<F>,
    pub cond: Option<Vec<F>>,
}

/// Time-conditioned (and optionally condition-vector-conditioned) noise
/// predictor: an MLP over `[x_t, embed(t), cond]`.
#[derive(Clone, Debug, PartialEq)]
pub struct EpsilonModel<F> {
    spec: ModelSpec,
    net: Mlp<F>,
}

impl<F: Scalar> EpsilonModel<F> {
    pub fn init(spec: ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let net = Mlp::init(spec.network_dims(), spec.activation, seed)?;
        Ok(Self { spec, net })
    }

    pub fn zeros(spec: ModelSpec) -> Result<Self> {
        spec.validate()?;
        let net = Mlp::zeros(spec.network_dims(), spec.activation)?;
        Ok(Self { spec, net })
    }

    pub fn from_params(spec: ModelSpec, params: Vec<F>) -> Result<Self> {
        spec.validate()?;
        let net = Mlp::from_params(spec.network_dims(), spec.activation, params)?;
        Ok(Self { spec, net })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn params(&self) -> &[F] {
        self.net.params()
    }

    pub fn params_mut(&mut self) -> &mut [F] {
        self.net.params_mut()
    }

    pub fn param_count(&self) -> usize {
        self.net.params().len()
    }

    /// Same architecture with a different parameter vector (e.g. EMA weights).
    pub fn with_params(&self, params: Vec<F>) -> Result<Self> {
        Self::from_params(self.spec.clone(), params)
    }

    fn network_input(&self, xt: &[F], t: usize, cond: Option<&[F]>) -> Result<Vec<F>> {
        let d = self.spec.data_dim();
        if xt.len() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: xt.len(),
            });
        }
        if t == 0 || t > self.spec.num_steps {
            return Err(Error::TimestepOutOfRange {
                t,
                lo: 1,
                hi: self.spec.num_steps,
            });
        }
        let mut input = Vec::with_capacity(self.net.input_dim());
        input.extend_from_slice(xt);
        input.extend(coord_features(xt, self.spec.coord_octaves));
        input.extend(time_embedding::<F>(
            t,
            self.spec.num_steps,
            self.spec.time_embedding_dim,
        ));
        match (self.spec.condition_dim, cond) {
            (0, None) => {}
            (0, Some(_)) => return Err(Error::UnexpectedCondition),
            (k, None) => return Err(Error::MissingCondition(k)),
            (k, Some(c)) => {
                if c.len() != k {
                    return Err(Error::DimensionMismatch {
                        expected: k,
                        got: c.len(),
                    });
                }
                input.extend_from_slice(c);
            }
        }
        Ok(input)
    }

    pub fn forward(&self, xt: &[F], t: usize, cond: Option<&[F]>) -> Result<Vec<F>> {
        let input = self.network_input(xt, t, cond)?;
        Ok(self.net.forward(&input))
    }

    /// Mean over the batch of `||eps_theta(q_sample(x0, t, eps), t) - eps||^2`
    /// and its exact gradient with respect to the flat parameter vector.
    pub fn loss_and_gradient(
        &self,
        schedule: &NoiseSchedule<F>,
        batch: &[TrainItem<F>],
    ) -> Result<(F, Vec<F>)> {
        if batch.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let partials: Vec<Result<(F, Vec<F>)>> = batch
            .par_chunks(GRAD_CHUNK)
            .map(|chunk| {
                let mut grad = vec![F::zero(); self.param_count()];
                let mut loss = F::zero();
                let mut trace = Trace::default();
                for item in chunk {
                    let xt = schedule.q_sample(&item.x0, item.t, &item.eps)?;
                    let input = self.network_input(&xt, item.t, item.cond.as_deref())?;
                    let out = self.net.forward_traced(&input, &mut trace);
                    let diff: Vec<F> = out.iter().zip(&item.eps).map(|(&o, &e)| o - e).collect();
                    loss = loss + diff.iter().map(|&v| v * v).sum::<F>();
                    let two = F::lit(2.0);
                    let g_out: Vec<F> = diff.iter().map(|&v| two * v).collect();
                    self.net.backward(&trace, &g_out, &mut grad);
                }
                Ok((loss, grad))
            })
            .collect();
        let n = F::lit(batch.len() as f64);
        let mut total_loss = F::zero();
        let mut total_grad = vec![F::zero(); self.param_count()];
        for part in partials {
            let (l, g) = part?;
            total_loss = total_loss + l;
            for (a, b) in total_grad.iter_mut().zip(g) {
                *a = *a + b;
            }
        }
        for g in &mut total_grad {
            *g = *g / n;
        }
        Ok((total_loss / n, total_grad))
    }

    /// Loss only; used by the trainer for monitoring.
    pub fn loss(&self, schedule: &NoiseSchedule<F>, batch: &[TrainItem<F>]) -> Result<F> {
        if batch.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let mut total = F::zero();
        for item in batch {
            let xt = schedule.q_sample(&item.x0, item.t, &item.eps)?;
            let out = self.forward(&xt, item.t, item.cond.as_deref())?;
            total = total
                + out
                    .iter()
                    .zip(&item.eps)
                    .map(|(&o, &e)| (o - e) * (o - e))
                    .sum::<F>();
        }
        Ok(total / F::lit(batch.len() as f64))
    }

    /// Writes the header line and the little-endian `f64` parameter payload.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let header = ParamHeader {
            layer_dims: self.spec.layer_dims.clone(),
            time_embedding_dim: self.spec.time_embedding_dim,
            coord_octaves: self.spec.coord_octaves,
            condition_dim: self.spec.condition_dim,
            param_count: self.param_count(),
            activation: self.spec.activation,
            num_steps: self.spec.num_steps,
        };
        serde_json::to_writer(&mut w, &header)?;
        w.write_all(b"\n")?;
        write_f64_payload(&mut w, self.params())?;
        Ok(())
    }

    pub fn read_from<R: BufRead>(mut r: R) -> Result<Self> {
        let mut line = String::new();
        r.read_line(&mut line)?;
        let header: ParamHeader = serde_json::from_str(line.trim_end())?;
        let spec = ModelSpec {
            layer_dims: header.layer_dims,
            time_embedding_dim: header.time_embedding_dim,
            coord_octaves: header.coord_octaves,
            condition_dim: header.condition_dim,
            activation: header.activation,
            num_steps: header.num_steps,
        };
        if spec.param_count() != header.param_count {
            return Err(Error::Format(format!(
                "param_count {} inconsistent with architecture ({})",
                header.param_count,
                spec.param_count()
            )));
        }
        let params = read_f64_payload(&mut r, header.param_count)?;
        Self::from_params(spec, params)
    }
}

impl<F: Scalar> EpsilonPredictor<F> for EpsilonModel<F> {
    fn data_dim(&self) -> usize {
        self.spec.data_dim()
    }

    fn predict(&self, xt: &[F], t: usize, cond: Option<&[F]>) -> Result<Vec<F>> {
        self.forward(xt, t, cond)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ParamHeader {
    layer_dims: Vec<usize>,
    time_embedding_dim: usize,
    #[serde(default)]
    coord_octaves: usize,
    condition_dim: usize,
    param_count: usize,
    activation: Activation,
    num_steps: usize,
}

pub(crate) fn write_f64_payload<W: Write, F: Scalar>(w: &mut W, values: &[F]) -> Result<()> {
    let mut buf = Vec::with_capacity(values.len() * 8);
    for v in values {
        buf.extend_from_slice(&v.to_f64_lossy().to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub(crate) fn read_f64_payload<R: Read, F: Scalar>(r: &mut R, count: usize) -> Result<Vec<F>> {
    let mut buf = vec![0u8; count * 8];
    r.read_exact(&mut buf)
        .map_err(|e| Error::Format(format!("truncated parameter payload: {e}")))?;
    Ok(buf
        .chunks_exact(8)
        .map(|c| F::lit(f64::from_le_bytes(c.try_into().unwrap())))
        .collect())
}

/// Exponential moving average of the parameter vector.
#[derive(Clone, Debug, PartialEq)]
pub struct EmaState<F> {
    decay: F,
    shadow: Vec<F>,
}

impl<F: Scalar> EmaState<F> {
    pub fn new(decay: F, initial: Vec<F>) -> Result<Self> {
        if !(decay >= F::zero() && decay < F::one()) {
            return Err(Error::InvalidConfig(format!(
                "EMA decay {decay} outside [0, 1)"
            )));
        }
        Ok(Self {
            decay,
            shadow: initial,
        })
    }

    pub fn decay(&self) -> F {
        self.decay
    }

    pub fn shadow(&self) -> &[F] {
        &self.shadow
    }

    /// `shadow <- decay * shadow + (1 - decay) * params`.
    pub fn update(&mut self, params: &[F]) -> Result<()> {
        if params.len() != self.shadow.len() {
            return Err(Error::DimensionMismatch {
                expected: self.shadow.len(),
                got: params.len(),
            });
        }
        let keep = self.decay;
        let take = F::one() - keep;
        for (s, &p) in self.shadow.iter_mut().zip(params) {
            *s = keep * *s + take * p;
        }
        Ok(())
    }
}

/// Predicts the same vector everywhere.
#[derive(Clone, Debug)]
pub struct ConstantEpsilon<F> {
    pub value: Vec<F>,
}

impl<F: Scalar> ConstantEpsilon<F> {
    pub fn zeros(dim: usize) -> Self {
        Self {
            value: vec![F::zero(); dim],
        }
    }
}

impl<F: Scalar> EpsilonPredictor<F> for ConstantEpsilon<F> {
    fn data_dim(&self) -> usize {
        self.value.len()
    }

    fn predict(&self, xt: &[F], _t: usize, _cond: Option<&[F]>) -> Result<Vec<F>> {
        if xt.len() != self.value.len() {
            return Err(Error::DimensionMismatch {
                expected: self.value.len(),
                got: xt.len(),
            });
        }
        Ok(self.value.clone())
    }
}

/// Wraps a predictor and counts how many times it is queried.
#[derive(Debug)]
pub struct CountingPredictor<'a, P> {
    inner: &'a P,
    calls: AtomicUsize,
}

impl<'a, P> CountingPredictor<'a, P> {
    pub fn new(inner: &'a P) -> Self {
        Self {
            inner,
            calls: AtomicUsize::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn reset(&self) {
        self.calls.store(0, Ordering::SeqCst);
    }
}

impl<F: Scalar, P: EpsilonPredictor<F>> EpsilonPredictor<F> for CountingPredictor<'_, P> {
    fn data_dim(&self) -> usize {
        self.inner.data_dim()
    }

    fn predict(&self, xt: &[F], t: usize, cond: Option<&[F]>) -> Result<Vec<F>> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let out = self.inner.predict(xt, t, cond)?;
        if !all_finite(&out) {
            return Err(Error::NonFinite(format!("noise prediction at t = {t}")));
        }
        Ok(out)
    }
}
