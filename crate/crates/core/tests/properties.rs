use proptest::prelude::*;
use secmi_core::data::{split, DistKind, Membership, RowEncoding};
use secmi_core::metrics::{asr, auc, Orientation, ScoredSample};
use secmi_core::model::{EmaState, EpsilonModel, EpsilonPredictor, ModelSpec};
use secmi_core::sampler::{deterministic_denoise, deterministic_reverse, TrajectoryConfig};
use secmi_core::schedule::NoiseSchedule;
use secmi_core::{Dataset, NoiseScheduleF32};

fn scored(scores: &[f64], labels: &[bool]) -> Vec<ScoredSample<f64>> {
    scores
        .iter()
        .zip(labels)
        .enumerate()
        .map(|(i, (&score, &m))| ScoredSample {
            sample_id: i as u64,
            score,
            label: if m {
                Membership::Member
            } else {
                Membership::Holdout
            },
        })
        .collect()
}

fn scores_and_labels() -> impl Strategy<Value = (Vec<f64>, Vec<bool>)> {
    (2usize..40).prop_flat_map(|n| {
        (
            prop::collection::vec(-50i32..50, n)
                .prop_map(|v| v.into_iter().map(|x| x as f64 * 0.1).collect()),
            prop::collection::vec(any::<bool>(), n).prop_map(|mut l| {
                l[0] = true;
                l[1] = false;
                l
            }),
        )
    })
}

const LOW: Orientation = Orientation::LowIsMember;
const HIGH: Orientation = Orientation::HighIsMember;

proptest! {
    #[test]
    fn auc_invariant_under_monotone_transform((s, l) in scores_and_labels(), a in 0.1f64..5.0, b in -3.0f64..3.0) {
        let base = auc(&scored(&s, &l), LOW).unwrap();
        let affine: Vec<f64> = s.iter().map(|x| a * x + b).collect();
        let cubed: Vec<f64> = s.iter().map(|x| x * x * x).collect();
        prop_assert_eq!(auc(&scored(&affine, &l), LOW).unwrap(), base);
        prop_assert_eq!(auc(&scored(&cubed, &l), LOW).unwrap(), base);
    }

    #[test]
    fn orientation_flip_complements_auc((s, l) in scores_and_labels()) {
        let v = scored(&s, &l);
        let sum = auc(&v, LOW).unwrap() + auc(&v, HIGH).unwrap();
        prop_assert!((sum - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn asr_of_negated_scores_with_flipped_orientation((s, l) in scores_and_labels()) {
        let neg: Vec<f64> = s.iter().map(|x| -x).collect();
        prop_assert_eq!(asr(&scored(&s, &l), LOW).unwrap(), asr(&scored(&neg, &l), HIGH).unwrap());
        let a = asr(&scored(&s, &l), LOW).unwrap();
        prop_assert!((0.5..=1.0).contains(&a));
    }

    #[test]
    fn ema_stays_in_hull_of_history(
        decay in 0.0f64..0.999,
        history in prop::collection::vec(prop::collection::vec(-10.0f64..10.0, 3), 1..30),
    ) {
        let mut ema = EmaState::new(decay, vec![0.0; 3]).unwrap();
        let mut lo = [0.0f64; 3];
        let mut hi = [0.0f64; 3];
        for p in &history {
            ema.update(p).unwrap();
            for j in 0..3 {
                lo[j] = lo[j].min(p[j]);
                hi[j] = hi[j].max(p[j]);
                let s = ema.shadow()[j];
                prop_assert!(s >= lo[j] - 1e-9 && s <= hi[j] + 1e-9);
            }
        }
    }

    #[test]
    fn split_partitions_every_sample(n in 2usize..200, ratio in 0.05f64..0.95, seed in any::<u64>()) {
        let ds = Dataset::generate(DistKind::SwissRoll { noise: 0.05 }, n, 2, 1, false).unwrap();
        let a = split(&ds.samples, ratio, seed).unwrap();
        prop_assert!(a.member_ids.is_disjoint(&a.holdout_ids));
        prop_assert_eq!(a.member_ids.len() + a.holdout_ids.len(), n);
        prop_assert!(!a.member_ids.is_empty() && !a.holdout_ids.is_empty());
        let want = ((ratio * n as f64 + 0.5).floor() as usize).clamp(1, n - 1);
        prop_assert_eq!(a.member_ids.len(), want);
        prop_assert_eq!(split(&ds.samples, ratio, seed).unwrap(), a);
    }

    #[test]
    fn dataset_file_round_trip(n in 2usize..40, seed in any::<u64>(), split_seed in any::<u64>(), binary in any::<bool>()) {
        let kind = DistKind::GaussianMixture { modes: 8, spread: 0.3 };
        let mut ds = Dataset::generate(kind, n, 2, seed, true).unwrap();
        ds.assign_split(0.5, split_seed).unwrap();
        let enc = if binary { RowEncoding::Binary } else { RowEncoding::Csv };
        let mut buf = Vec::new();
        ds.write_to(&mut buf, enc).unwrap();
        prop_assert_eq!(Dataset::read_from(&buf[..]).unwrap(), ds);
    }

    #[test]
    fn model_file_round_trip(hidden in prop::collection::vec(1usize..12, 1..4), seed in any::<u64>(), octaves in 0usize..3) {
        let mut spec = ModelSpec::new(3, &hidden, 50);
        spec.coord_octaves = octaves;
        let m = EpsilonModel::<f64>::init(spec, seed).unwrap();
        let mut buf = Vec::new();
        m.write_to(&mut buf).unwrap();
        let back = EpsilonModel::<f64>::read_from(&buf[..]).unwrap();
        prop_assert_eq!(back.predict(&[0.1, 0.2, -0.3], 7, None).unwrap(), m.predict(&[0.1, 0.2, -0.3], 7, None).unwrap());
        prop_assert_eq!(back, m);
    }

    #[test]
    fn zero_model_round_trip_scales_by_alpha_bar_ratio(
        x in prop::collection::vec(-1.0f64..1.0, 2),
        from in 0usize..60,
        span in 1usize..40,
        k in 1usize..7,
    ) {
        let s = NoiseSchedule::<f64>::linear(100, 1e-4, 0.02).unwrap();
        let zero = secmi_core::model::ConstantEpsilon::zeros(2);
        let to = from + span;
        let up = deterministic_reverse(&zero, &s, &x, &TrajectoryConfig::new(from, to, k)).unwrap();
        let ratio = (s.alpha_bar(to) / s.alpha_bar(from)).sqrt();
        for (u, v) in up.iter().zip(&x) {
            prop_assert!((u - ratio * v).abs() <= 1e-12);
        }
        let down = deterministic_denoise(&zero, &s, &up, &TrajectoryConfig::new(to, from, k)).unwrap();
        for (d, v) in down.iter().zip(&x) {
            prop_assert!((d - v).abs() <= 1e-12);
        }
    }
}

#[test]
fn f32_schedule_tracks_f64() {
    let a = NoiseScheduleF32::linear(100, 1e-4, 0.02).unwrap();
    let b = NoiseSchedule::<f64>::linear(100, 1e-4, 0.02).unwrap();
    for t in 0..=100 {
        assert!((a.alpha_bar(t) as f64 - b.alpha_bar(t)).abs() < 1e-5);
    }
}
