//! Attack evaluation: ROC, AUC, ASR, TPR at fixed FPR, and trial summaries.
//!
//! Scores carry an explicit [`Orientation`]. Tied scores form a single ROC
//! vertex and count as half a win in the AUC.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::data::Membership;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const DEFAULT_FPR_LEVELS: [f64; 2] = [0.01, 0.001];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Orientation {
    LowIsMember,
    HighIsMember,
}

impl Orientation {
    pub fn flipped(self) -> Self {
        match self {
            Orientation::LowIsMember => Orientation::HighIsMember,
            Orientation::HighIsMember => Orientation::LowIsMember,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScoredSample<F> {
    pub sample_id: u64,
    pub score: F,
    pub label: Membership,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub fpr: f64,
    pub tpr: f64,
}

/// Rank-ordered view of a score list: groups of tied scores sorted from most
/// to least member-like, with member/hold-out counts per group.
struct TieGroups<F> {
    // (score, members, holdouts)
    groups: Vec<(F, usize, usize)>,
    positives: usize,
    negatives: usize,
}

fn cmp_scores<F: Scalar>(a: F, b: F) -> Ordering {
    a.partial_cmp(&b).unwrap_or(Ordering::Equal)
}

impl<F: Scalar> TieGroups<F> {
    fn new(scored: &[ScoredSample<F>], orientation: Orientation) -> Result<Self> {
        if scored.is_empty() {
            return Err(Error::EmptyScores);
        }
        if scored.iter().any(|s| s.score.is_nan()) {
            return Err(Error::NonFinite("attack scores".into()));
        }
        let mut sorted: Vec<(F, Membership)> = scored.iter().map(|s| (s.score, s.label)).collect();
        match orientation {
            Orientation::HighIsMember => sorted.sort_by(|a, b| cmp_scores(b.0, a.0)),
            Orientation::LowIsMember => sorted.sort_by(|a, b| cmp_scores(a.0, b.0)),
        }
        let mut groups: Vec<(F, usize, usize)> = Vec::new();
        for (score, label) in sorted {
            let (p, n) = match label {
                Membership::Member => (1, 0),
                Membership::Holdout => (0, 1),
            };
            match groups.last_mut() {
                Some(g) if g.0 == score => {
                    g.1 += p;
                    g.2 += n;
                }
                _ => groups.push((score, p, n)),
            }
        }
        let positives: usize = groups.iter().map(|g| g.1).sum();
        let negatives: usize = groups.iter().map(|g| g.2).sum();
        if positives == 0 || negatives == 0 {
            return Err(Error::SingleClass);
        }
        Ok(Self {
            groups,
            positives,
            negatives,
        })
    }

    /// Cumulative `(true positives, false positives)` after each group,
    /// starting from `(0, 0)`.
    fn cumulative(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::with_capacity(self.groups.len() + 1);
        let (mut tp, mut fp) = (0, 0);
        out.push((0, 0));
        for g in &self.groups {
            tp += g.1;
            fp += g.2;
            out.push((tp, fp));
        }
        out
    }
}

pub fn roc_curve<F: Scalar>(
    scored: &[ScoredSample<F>],
    orientation: Orientation,
) -> Result<Vec<RocPoint>> {
    let g = TieGroups::new(scored, orientation)?;
    let (p, n) = (g.positives as f64, g.negatives as f64);
    Ok(g.cumulative()
        .into_iter()
        .map(|(tp, fp)| RocPoint {
            fpr: fp as f64 / n,
            tpr: tp as f64 / p,
        })
        .collect())
}

/// Trapezoidal area under a ROC polyline.
pub fn roc_area(points: &[RocPoint]) -> f64 {
    points
        .windows(2)
        .map(|w| (w[1].fpr - w[0].fpr) * (w[1].tpr + w[0].tpr) / 2.0)
        .sum()
}

/// Mann–Whitney statistic: probability a random member is ranked more
/// member-like than a random hold-out sample, ties counting 1/2.
pub fn auc<F: Scalar>(scored: &[ScoredSample<F>], orientation: Orientation) -> Result<f64> {
    let g = TieGroups::new(scored, orientation)?;
    // Walk from least to most member-like; each group beats every hold-out
    // sample ranked strictly below it.
    let mut wins2 = 0u128; // twice the U statistic
    let mut negatives_below = 0u128;
    for &(_, p, n) in g.groups.iter().rev() {
        wins2 += p as u128 * (2 * negatives_below + n as u128);
        negatives_below += n as u128;
    }
    Ok(wins2 as f64 / (2.0 * g.positives as f64 * g.negatives as f64))
}

/// A threshold rule and its balanced accuracy. For `LowIsMember`, samples
/// with `score <= tau` are predicted members; for `HighIsMember`,
/// `score >= tau`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Threshold {
    pub tau: f64,
    pub balanced_accuracy: f64,
}

/// Accuracy-maximizing threshold over the midpoints between consecutive
/// distinct scores (plus the two trivial rules). The first maximum in
/// most-conservative-first order wins.
pub fn best_threshold<F: Scalar>(
    scored: &[ScoredSample<F>],
    orientation: Orientation,
) -> Result<Threshold> {
    let g = TieGroups::new(scored, orientation)?;
    let (p, n) = (g.positives as f64, g.negatives as f64);
    let cum = g.cumulative();
    let scores: Vec<f64> = g.groups.iter().map(|x| x.0.to_f64_lossy()).collect();
    let sign = match orientation {
        Orientation::LowIsMember => 1.0,
        Orientation::HighIsMember => -1.0,
    };
    let mut best = Threshold {
        tau: f64::NAN,
        balanced_accuracy: f64::NEG_INFINITY,
    };
    for (i, &(tp, fp)) in cum.iter().enumerate() {
        let acc = 0.5 * (1.0 + tp as f64 / p - fp as f64 / n);
        if acc > best.balanced_accuracy {
            let tau = if i == 0 {
                scores[0] - sign * 1.0_f64.max(scores[0].abs())
            } else if i == scores.len() {
                scores[i - 1]
            } else {
                0.5 * (scores[i - 1] + scores[i])
            };
            best = Threshold {
                tau,
                balanced_accuracy: acc,
            };
        }
    }
    Ok(best)
}

/// Balanced accuracy of a fixed threshold rule.
pub fn accuracy_at<F: Scalar>(
    scored: &[ScoredSample<F>],
    orientation: Orientation,
    tau: f64,
) -> Result<f64> {
    let g = TieGroups::new(scored, orientation)?;
    let (mut tp, mut fp) = (0usize, 0usize);
    for s in scored {
        let v = s.score.to_f64_lossy();
        let predicted = match orientation {
            Orientation::LowIsMember => v <= tau,
            Orientation::HighIsMember => v >= tau,
        };
        if predicted {
            match s.label {
                Membership::Member => tp += 1,
                Membership::Holdout => fp += 1,
            }
        }
    }
    Ok(0.5 * (1.0 + tp as f64 / g.positives as f64 - fp as f64 / g.negatives as f64))
}

/// Best-threshold balanced accuracy.
pub fn asr<F: Scalar>(scored: &[ScoredSample<F>], orientation: Orientation) -> Result<f64> {
    Ok(best_threshold(scored, orientation)?.balanced_accuracy)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TprAtFpr {
    pub tpr: f64,
    /// FPR of the operating point actually used.
    pub fpr: f64,
    /// Set when `level * |hold-out| < 1`, i.e. the level is not resolvable
    /// and the value is the conservative zero-false-positive operating point.
    pub under_resolved: bool,
}

/// TPR of the step ROC at the largest achievable FPR not exceeding `level`.
pub fn tpr_at_fpr<F: Scalar>(
    scored: &[ScoredSample<F>],
    orientation: Orientation,
    level: f64,
) -> Result<TprAtFpr> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::InvalidConfig(format!(
            "FPR level {level} outside (0, 1)"
        )));
    }
    let g = TieGroups::new(scored, orientation)?;
    let n = g.negatives as f64;
    let max_fp = (level * n + 1e-9).floor() as usize;
    let (tp, fp) = g
        .cumulative()
        .into_iter()
        .take_while(|&(_, fp)| fp <= max_fp)
        .last()
        .unwrap();
    Ok(TprAtFpr {
        tpr: tp as f64 / g.positives as f64,
        fpr: fp as f64 / n,
        under_resolved: level * n < 1.0,
    })
}

fn fpr_key(level: f64) -> String {
    level.to_string()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub asr: f64,
    pub auc: f64,
    pub tpr_at_fpr: BTreeMap<String, f64>,
}

/// Scores, ROC, and metrics of one attack on one trial.
#[derive(Clone, Debug, PartialEq)]
pub struct AttackReport<F> {
    pub attack_name: String,
    pub orientation: Orientation,
    pub scored: Vec<ScoredSample<F>>,
    pub metrics: Metrics,
    pub roc_points: Vec<RocPoint>,
    pub threshold: Threshold,
}

impl<F: Scalar> AttackReport<F> {
    pub fn evaluate(
        attack_name: impl Into<String>,
        orientation: Orientation,
        scored: Vec<ScoredSample<F>>,
        fpr_levels: &[f64],
    ) -> Result<Self> {
        let roc_points = roc_curve(&scored, orientation)?;
        let threshold = best_threshold(&scored, orientation)?;
        let mut tpr = BTreeMap::new();
        for &level in fpr_levels {
            tpr.insert(fpr_key(level), tpr_at_fpr(&scored, orientation, level)?.tpr);
        }
        let metrics = Metrics {
            asr: threshold.balanced_accuracy,
            auc: auc(&scored, orientation)?,
            tpr_at_fpr: tpr,
        };
        Ok(Self {
            attack_name: attack_name.into(),
            orientation,
            scored,
            metrics,
            roc_points,
            threshold,
        })
    }

    pub fn trial_metrics(&self, seed: u64) -> TrialMetrics {
        TrialMetrics {
            attack: self.attack_name.clone(),
            seed,
            asr: self.metrics.asr,
            auc: self.metrics.auc,
            tpr_at_fpr: self.metrics.tpr_at_fpr.clone(),
        }
    }

    /// ROC as `fpr,tpr,log10_fpr` rows.
    pub fn write_roc_csv<W: Write>(&self, w: W) -> Result<()> {
        write_roc_csv(w, &self.roc_points)
    }
}

pub fn write_roc_csv<W: Write>(mut w: W, points: &[RocPoint]) -> Result<()> {
    writeln!(w, "fpr,tpr,log10_fpr")?;
    for p in points {
        writeln!(w, "{},{},{}", p.fpr, p.tpr, p.fpr.log10())?;
    }
    Ok(())
}

/// `sample_id,attack,t,score,label` rows; `t` is left empty for attacks
/// that are not tied to a single timestep.
pub fn write_scores_csv<W: Write, F: Scalar>(
    mut w: W,
    attack: &str,
    t: Option<usize>,
    scored: &[ScoredSample<F>],
) -> Result<()> {
    writeln!(w, "sample_id,attack,t,score,label")?;
    let t = t.map_or(String::new(), |t| t.to_string());
    for s in scored {
        writeln!(
            w,
            "{},{attack},{t},{},{}",
            s.sample_id,
            s.score.to_f64_lossy(),
            s.label.label()
        )?;
    }
    Ok(())
}

/// The per-trial metrics file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrialMetrics {
    pub attack: String,
    pub seed: u64,
    pub asr: f64,
    pub auc: f64,
    pub tpr_at_fpr: BTreeMap<String, f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Spread {
    pub mean: f64,
    pub median: f64,
    pub min: f64,
    pub max: f64,
}

impl Spread {
    pub fn of(values: &[f64]) -> Self {
        let mut v = values.to_vec();
        v.sort_by(|a, b| a.total_cmp(b));
        let n = v.len();
        let median = if n % 2 == 1 {
            v[n / 2]
        } else {
            0.5 * (v[n / 2 - 1] + v[n / 2])
        };
        Self {
            mean: v.iter().sum::<f64>() / n as f64,
            median,
            min: v[0],
            max: v[n - 1],
        }
    }

    pub fn range(&self) -> f64 {
        self.max - self.min
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialSummary {
    pub attack: String,
    pub trials: usize,
    pub seeds: Vec<u64>,
    pub asr: Spread,
    pub auc: Spread,
    pub tpr_at_fpr: BTreeMap<String, Spread>,
}

/// Mean/median/min/max of every metric across trials of one attack.
pub fn aggregate_trials(trials: &[TrialMetrics]) -> Result<TrialSummary> {
    let first = trials.first().ok_or(Error::EmptyScores)?;
    if let Some(other) = trials.iter().find(|t| t.attack != first.attack) {
        return Err(Error::MixedAttacks(
            first.attack.clone(),
            other.attack.clone(),
        ));
    }
    let collect =
        |f: &dyn Fn(&TrialMetrics) -> f64| Spread::of(&trials.iter().map(f).collect::<Vec<_>>());
    let mut tpr = BTreeMap::new();
    for key in first.tpr_at_fpr.keys() {
        let vals: Vec<f64> = trials
            .iter()
            .filter_map(|t| t.tpr_at_fpr.get(key).copied())
            .collect();
        if vals.len() == trials.len() {
            tpr.insert(key.clone(), Spread::of(&vals));
        }
    }
    let mut seeds: Vec<u64> = trials.iter().map(|t| t.seed).collect();
    seeds.sort_unstable();
    Ok(TrialSummary {
        attack: first.attack.clone(),
        trials: trials.len(),
        seeds,
        asr: collect(&|t| t.asr),
        auc: collect(&|t| t.auc),
        tpr_at_fpr: tpr,
    })
}
