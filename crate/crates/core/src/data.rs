//! Toy datasets, the member/hold-out split, and dataset files.

use std::collections::BTreeSet;
use std::f64::consts::PI;
use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const DATASET_FILE_VERSION: u32 = 1;
const MIXTURE_RADIUS: f64 = 0.7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Membership {
    Member,
    Holdout,
}

impl Membership {
    /// `m_i`: 1 for members, 0 for hold-out samples.
    pub fn label(self) -> u8 {
        match self {
            Membership::Member => 1,
            Membership::Holdout => 0,
        }
    }

    pub fn from_label(label: u8) -> Option<Self> {
        match label {
            1 => Some(Membership::Member),
            0 => Some(Membership::Holdout),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSample<F> {
    pub sample_id: u64,
    pub x0: Vec<F>,
    pub membership: Option<Membership>,
    pub condition: Option<Vec<F>>,
}

impl<F> LabeledSample<F> {
    pub fn is_member(&self) -> bool {
        self.membership == Some(Membership::Member)
    }
}

/// Generators for the desk-scale datasets. Coordinates land in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DistKind {
    /// Isotropic Gaussians centred on a circle of radius 0.7 (2-D only).
    GaussianMixture { modes: usize, spread: f64 },
    /// 2-D swiss roll with additive Gaussian noise of the given scale.
    SwissRoll { noise: f64 },
    /// `side x side` grayscale gratings, flattened row-major.
    TinyImageGrid { side: usize },
}

/// Height and width of image-shaped samples.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageShape {
    pub height: usize,
    pub width: usize,
}

impl DistKind {
    pub fn image_shape(&self) -> Option<ImageShape> {
        match self {
            DistKind::TinyImageGrid { side } => Some(ImageShape {
                height: *side,
                width: *side,
            }),
            _ => None,
        }
    }

    fn check_dim(&self, d: usize) -> Result<()> {
        let ok = match self {
            DistKind::GaussianMixture { modes, spread } => {
                if *modes == 0 || !(*spread >= 0.0) {
                    return Err(Error::InvalidDataset(
                        "mixture needs modes >= 1 and spread >= 0".into(),
                    ));
                }
                d == 2
            }
            DistKind::SwissRoll { noise } => {
                if !(*noise >= 0.0) {
                    return Err(Error::InvalidDataset(
                        "swiss roll noise must be >= 0".into(),
                    ));
                }
                d == 2
            }
            DistKind::TinyImageGrid { side } => *side > 0 && d == side * side,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidDataset(format!(
                "dimension {d} invalid for {self:?}"
            )))
        }
    }
}

pub fn mixture_center(mode: usize, modes: usize) -> [f64; 2] {
    let angle = 2.0 * PI * mode as f64 / modes as f64;
    [MIXTURE_RADIUS * angle.cos(), MIXTURE_RADIUS * angle.sin()]
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Seeded toy data with no membership assigned. For mixtures,
/// `conditional = true` attaches the one-hot mode index as the condition.
pub fn generate_toy<F: Scalar>(
    kind: &DistKind,
    n: usize,
    d: usize,
    seed: u64,
    conditional: bool,
) -> Result<Vec<LabeledSample<F>>> {
    if n < 2 {
        return Err(Error::InvalidDataset("need at least two samples".into()));
    }
    kind.check_dim(d)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    for id in 0..n as u64 {
        let (x, mode, modes) = match *kind {
            DistKind::GaussianMixture { modes, spread } => {
                let m = rng.random_range(0..modes);
                let c = mixture_center(m, modes);
                let x = vec![
                    c[0] + spread * normal(&mut rng),
                    c[1] + spread * normal(&mut rng),
                ];
                (x, m, modes)
            }
            DistKind::SwissRoll { noise } => {
                let theta = 1.5 * PI * (1.0 + 2.0 * rng.random::<f64>());
                let scale = 1.0 / (4.5 * PI);
                let x = vec![
                    theta * theta.cos() * scale + noise * normal(&mut rng),
                    theta * theta.sin() * scale + noise * normal(&mut rng),
                ];
                (x, 0, 1)
            }
            DistKind::TinyImageGrid { side } => {
                let fr = rng.random_range(0..3) as f64;
                let fc = rng.random_range(1..4) as f64;
                let phase = rng.random::<f64>() * 2.0 * PI;
                let amp = 0.5 + 0.5 * rng.random::<f64>();
                let x = (0..side * side)
                    .map(|i| {
                        let (r, c) = ((i / side) as f64, (i % side) as f64);
                        // the c^2 term breaks left-right symmetry
                        amp * (2.0 * PI * (fr * r + fc * c + 0.1 * c * c) / side as f64 + phase)
                            .sin()
                    })
                    .collect();
                (x, 0, 1)
            }
        };
        let x0 = x.into_iter().map(|v| F::lit(v.clamp(-1.0, 1.0))).collect();
        let condition =
            (conditional && matches!(kind, DistKind::GaussianMixture { .. })).then(|| {
                (0..modes)
                    .map(|j| if j == mode { F::one() } else { F::zero() })
                    .collect()
            });
        out.push(LabeledSample {
            sample_id: id,
            x0,
            membership: None,
            condition,
        });
    }
    Ok(out)
}

/// `D = D_M ∪ D_H`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub member_ids: BTreeSet<u64>,
    pub holdout_ids: BTreeSet<u64>,
    pub seed: u64,
    pub ratio: f64,
}

impl SplitAssignment {
    pub fn membership_of(&self, id: u64) -> Option<Membership> {
        if self.member_ids.contains(&id) {
            Some(Membership::Member)
        } else if self.holdout_ids.contains(&id) {
            Some(Membership::Holdout)
        } else {
            None
        }
    }

    /// Labels every sample. Fails if a sample already carries a different label.
    pub fn apply<F>(&self, samples: &mut [LabeledSample<F>]) -> Result<()> {
        for s in samples.iter_mut() {
            let m = self.membership_of(s.sample_id).ok_or_else(|| {
                Error::InvalidDataset(format!("sample {} not in split", s.sample_id))
            })?;
            match s.membership {
                Some(prev) if prev != m => {
                    return Err(Error::InvalidDataset(format!(
                        "sample {} relabelled from {prev:?} to {m:?}",
                        s.sample_id
                    )))
                }
                _ => s.membership = Some(m),
            }
        }
        Ok(())
    }
}

/// Uniformly random partition with `round_half_up(ratio * n)` members.
pub fn split<F>(samples: &[LabeledSample<F>], ratio: f64, seed: u64) -> Result<SplitAssignment> {
    if samples.len() < 2 {
        return Err(Error::InvalidDataset(
            "need at least two samples to split".into(),
        ));
    }
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::InvalidConfig(format!(
            "split ratio {ratio} outside (0, 1)"
        )));
    }
    let mut ids: Vec<u64> = samples.iter().map(|s| s.sample_id).collect();
    let unique: BTreeSet<u64> = ids.iter().copied().collect();
    if unique.len() != ids.len() {
        return Err(Error::InvalidDataset("duplicate sample ids".into()));
    }
    let n = ids.len();
    let n_members = ((ratio * n as f64 + 0.5).floor() as usize).clamp(1, n - 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ids.shuffle(&mut rng);
    Ok(SplitAssignment {
        member_ids: ids[..n_members].iter().copied().collect(),
        holdout_ids: ids[n_members..].iter().copied().collect(),
        seed,
        ratio,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RowEncoding {
    #[default]
    Csv,
    Binary,
}

/// Header line of a dataset file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetHeader {
    pub version: u32,
    pub d: usize,
    pub n: usize,
    pub dist_kind: DistKind,
    pub seed: u64,
    pub ratio: Option<f64>,
    pub split_seed: Option<u64>,
    pub condition_dim: usize,
    pub encoding: RowEncoding,
}

/// Samples plus their provenance.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset<F> {
    pub dist_kind: DistKind,
    pub seed: u64,
    pub samples: Vec<LabeledSample<F>>,
    pub split: Option<SplitAssignment>,
}

impl<F: Scalar> Dataset<F> {
    pub fn generate(
        kind: DistKind,
        n: usize,
        d: usize,
        seed: u64,
        conditional: bool,
    ) -> Result<Self> {
        let samples = generate_toy(&kind, n, d, seed, conditional)?;
        Ok(Self {
            dist_kind: kind,
            seed,
            samples,
            split: None,
        })
    }

    pub fn dim(&self) -> usize {
        self.samples.first().map_or(0, |s| s.x0.len())
    }

    pub fn condition_dim(&self) -> usize {
        self.samples
            .first()
            .and_then(|s| s.condition.as_ref())
            .map_or(0, |c| c.len())
    }

    pub fn assign_split(&mut self, ratio: f64, seed: u64) -> Result<&SplitAssignment> {
        let assignment = split(&self.samples, ratio, seed)?;
        assignment.apply(&mut self.samples)?;
        self.split = Some(assignment);
        Ok(self.split.as_ref().unwrap())
    }

    pub fn members(&self) -> Vec<LabeledSample<F>> {
        self.samples
            .iter()
            .filter(|s| s.is_member())
            .cloned()
            .collect()
    }

    pub fn holdouts(&self) -> Vec<LabeledSample<F>> {
        self.samples
            .iter()
            .filter(|s| s.membership == Some(Membership::Holdout))
            .cloned()
            .collect()
    }

    pub fn write_to<W: Write>(&self, mut w: W, encoding: RowEncoding) -> Result<()> {
        let d = self.dim();
        let cd = self.condition_dim();
        let header = DatasetHeader {
            version: DATASET_FILE_VERSION,
            d,
            n: self.samples.len(),
            dist_kind: self.dist_kind.clone(),
            seed: self.seed,
            ratio: self.split.as_ref().map(|s| s.ratio),
            split_seed: self.split.as_ref().map(|s| s.seed),
            condition_dim: cd,
            encoding,
        };
        serde_json::to_writer(&mut w, &header)?;
        w.write_all(b"\n")?;
        for s in &self.samples {
            let label = s.membership.map_or(u8::MAX, Membership::label);
            let values = s.x0.iter().chain(s.condition.iter().flatten());
            match encoding {
                RowEncoding::Csv => {
                    let mut line = s.sample_id.to_string();
                    line.push(',');
                    if label != u8::MAX {
                        line.push_str(&label.to_string());
                    }
                    for v in values {
                        line.push(',');
                        line.push_str(&v.to_f64_lossy().to_string());
                    }
                    line.push('\n');
                    w.write_all(line.as_bytes())?;
                }
                RowEncoding::Binary => {
                    w.write_all(&s.sample_id.to_le_bytes())?;
                    w.write_all(&[label])?;
                    for v in values {
                        w.write_all(&v.to_f64_lossy().to_le_bytes())?;
                    }
                }
            }
        }
        Ok(())
    }

    pub fn read_from<R: BufRead>(mut r: R) -> Result<Self> {
        let mut line = String::new();
        r.read_line(&mut line)?;
        let value: serde_json::Value = serde_json::from_str(line.trim_end())?;
        let version = value.get("version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
        if version != DATASET_FILE_VERSION {
            return Err(Error::VersionMismatch {
                found: version,
                expected: DATASET_FILE_VERSION,
            });
        }
        let header: DatasetHeader = serde_json::from_value(value)?;
        let width = header.d + header.condition_dim;
        let mut samples = Vec::with_capacity(header.n);
        for row in 0..header.n {
            let (id, label, values) = match header.encoding {
                RowEncoding::Csv => {
                    let mut line = String::new();
                    if r.read_line(&mut line)? == 0 {
                        return Err(Error::Format(format!(
                            "truncated dataset: {row} of {} rows",
                            header.n
                        )));
                    }
                    let mut fields = line.trim_end().split(',');
                    let id: u64 = parse_field(fields.next(), row)?;
                    let label = match fields.next() {
                        Some("") => u8::MAX,
                        other => parse_field(other, row)?,
                    };
                    let values = fields
                        .map(|f| parse_field::<f64>(Some(f), row))
                        .collect::<Result<Vec<_>>>()?;
                    (id, label, values)
                }
                RowEncoding::Binary => {
                    let mut buf = vec![0u8; 9 + 8 * width];
                    r.read_exact(&mut buf).map_err(|_| {
                        Error::Format(format!("truncated dataset: {row} of {} rows", header.n))
                    })?;
                    let id = u64::from_le_bytes(buf[..8].try_into().unwrap());
                    let values = buf[9..]
                        .chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                        .collect();
                    (id, buf[8], values)
                }
            };
            if values.len() != width {
                return Err(Error::Format(format!(
                    "row {row}: expected {width} values, got {}",
                    values.len()
                )));
            }
            let membership = match label {
                u8::MAX => None,
                l => Some(
                    Membership::from_label(l)
                        .ok_or_else(|| Error::Format(format!("row {row}: label {l}")))?,
                ),
            };
            let mut x0: Vec<F> = values.into_iter().map(F::lit).collect();
            let condition = (header.condition_dim > 0).then(|| x0.split_off(header.d));
            samples.push(LabeledSample {
                sample_id: id,
                x0,
                membership,
                condition,
            });
        }
        let split = match (header.ratio, header.split_seed) {
            (Some(ratio), Some(seed)) => {
                let mut member_ids = BTreeSet::new();
                let mut holdout_ids = BTreeSet::new();
                for s in &samples {
                    match s.membership {
                        Some(Membership::Member) => member_ids.insert(s.sample_id),
                        Some(Membership::Holdout) => holdout_ids.insert(s.sample_id),
                        None => {
                            return Err(Error::Format(format!(
                                "sample {} missing label",
                                s.sample_id
                            )))
                        }
                    };
                }
                Some(SplitAssignment {
                    member_ids,
                    holdout_ids,
                    seed,
                    ratio,
                })
            }
            _ => None,
        };
        Ok(Self {
            dist_kind: header.dist_kind,
            seed: header.seed,
            samples,
            split,
        })
    }
}

fn parse_field<T: std::str::FromStr>(field: Option<&str>, row: usize) -> Result<T> {
    field
        .and_then(|f| f.parse().ok())
        .ok_or_else(|| Error::Format(format!("row {row}: bad field {field:?}")))
}
