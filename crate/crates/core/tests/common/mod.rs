//! Brute-force metric oracles shared by the test targets.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use secmi_core::data::Membership;
use secmi_core::metrics::{Orientation, ScoredSample};

/// Up to 20 scores on a coarse grid, so ties are common.
pub fn instance(seed: u64) -> Vec<ScoredSample<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(2..=20);
    let levels = rng.random_range(2..=8);
    let mut out: Vec<ScoredSample<f64>> = (0..n)
        .map(|i| ScoredSample {
            sample_id: i as u64,
            score: rng.random_range(0..levels) as f64 * 0.25 - 0.5,
            label: if rng.random::<bool>() {
                Membership::Member
            } else {
                Membership::Holdout
            },
        })
        .collect();
    // both classes must be present
    out[0].label = Membership::Member;
    out[1].label = Membership::Holdout;
    out
}

fn split(s: &[ScoredSample<f64>]) -> (Vec<f64>, Vec<f64>) {
    let m = s
        .iter()
        .filter(|x| x.label == Membership::Member)
        .map(|x| x.score)
        .collect();
    let h = s
        .iter()
        .filter(|x| x.label == Membership::Holdout)
        .map(|x| x.score)
        .collect();
    (m, h)
}

fn predicted(score: f64, tau: f64, o: Orientation) -> bool {
    match o {
        Orientation::LowIsMember => score <= tau,
        Orientation::HighIsMember => score >= tau,
    }
}

pub fn pairwise_auc(s: &[ScoredSample<f64>], o: Orientation) -> f64 {
    let (m, h) = split(s);
    let mut wins = 0.0;
    for &a in &m {
        for &b in &h {
            let better = match o {
                Orientation::LowIsMember => a < b,
                Orientation::HighIsMember => a > b,
            };
            if better {
                wins += 1.0;
            } else if a == b {
                wins += 0.5;
            }
        }
    }
    wins / (m.len() * h.len()) as f64
}

/// Every rule "predict member iff score beats tau" for tau at each observed
/// score plus one rule that predicts nobody.
fn operating_points(s: &[ScoredSample<f64>], o: Orientation) -> Vec<(usize, usize)> {
    let none = match o {
        Orientation::LowIsMember => f64::NEG_INFINITY,
        Orientation::HighIsMember => f64::INFINITY,
    };
    let mut taus: Vec<f64> = s.iter().map(|x| x.score).collect();
    taus.push(none);
    taus.iter()
        .map(|&tau| {
            let tp = s
                .iter()
                .filter(|x| x.label == Membership::Member && predicted(x.score, tau, o))
                .count();
            let fp = s
                .iter()
                .filter(|x| x.label == Membership::Holdout && predicted(x.score, tau, o))
                .count();
            (tp, fp)
        })
        .collect()
}

pub fn brute_asr(s: &[ScoredSample<f64>], o: Orientation) -> f64 {
    let (m, h) = split(s);
    let (p, n) = (m.len() as f64, h.len() as f64);
    operating_points(s, o)
        .into_iter()
        .map(|(tp, fp)| 0.5 * (1.0 + tp as f64 / p - fp as f64 / n))
        .fold(f64::NEG_INFINITY, f64::max)
}

pub fn brute_tpr(s: &[ScoredSample<f64>], o: Orientation, level: f64) -> f64 {
    let (m, h) = split(s);
    let max_fp = (level * h.len() as f64 + 1e-9).floor() as usize;
    operating_points(s, o)
        .into_iter()
        .filter(|&(_, fp)| fp <= max_fp)
        .map(|(tp, _)| tp as f64 / m.len() as f64)
        .fold(f64::NEG_INFINITY, f64::max)
}

pub const ORIENTATIONS: [Orientation; 2] = [Orientation::LowIsMember, Orientation::HighIsMember];
