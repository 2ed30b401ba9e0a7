//! Property tests for the invariants of perturbations, compression weights,
//! truncation, band profiles and the environment.

use interlat::analysis::{step_bands, truncate_ratio, BAND_MAX_K};
use interlat::channel::{curriculum_replace, GeneratorTag, LatentMessage};
use interlat::compression::{resample_indices, uncertainty_weights};
use interlat::minihouse::{generate_tasks, TaskCounts, Vocab, WorldKinds, INVALID_OBSERVATION};
use interlat::perturb::{
    apply_perturbation, haar_orthogonal, sample_moments, table_variants, PerturbationKind, PerturbationSpec,
};
use interlat::tensor::Tensor;
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn message(l: usize, d: usize, seed: u64, task: &str) -> LatentMessage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let values = Tensor::from_vec(l, d, (0..l * d).map(|_| rng.sample::<f32, _>(StandardNormal) * 2.0 + 1.0).collect());
    LatentMessage {
        values,
        source_task_id: task.into(),
        plan_tokens: (0..l as u32).map(|i| 3 + i % 5).collect(),
        generator_tag: GeneratorTag::InstructTeacher,
    }
}

fn matrix(t: &Tensor) -> DMatrix<f64> {
    DMatrix::from_fn(t.rows(), t.cols(), |i, j| t.get(i, j) as f64)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn uncertainty_weights_are_nonnegative_with_unit_mean(
        pairs in prop::collection::vec((0.0f64..5.0, 0.0f64..5.0), 1..50),
        tau in 0.5f64..6.0,
    ) {
        let (hb, hd): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        let w = uncertainty_weights(&hb, &hd, tau, 1e-9).unwrap();
        prop_assert_eq!(w.len(), hb.len());
        prop_assert!(w.iter().all(|&x| x >= 0.0));
        let mean = w.iter().sum::<f64>() / w.len() as f64;
        prop_assert!((mean - 1.0).abs() < 1e-9);
        if hb.iter().zip(&hd).all(|(b, d)| b <= d) {
            prop_assert!(w.iter().all(|&x| x == 1.0));
        }
    }

    #[test]
    fn resampled_indices_are_monotone_and_cover_endpoints(l in 1usize..200, k in 1usize..200) {
        let idx = resample_indices(l, k);
        prop_assert_eq!(idx.len(), k);
        prop_assert!(idx.windows(2).all(|w| w[0] <= w[1]));
        prop_assert!(idx.iter().all(|&i| i < l));
        prop_assert_eq!(idx[0], 0);
        if k >= 2 {
            prop_assert_eq!(*idx.last().unwrap(), l - 1);
        }
        if k == l {
            prop_assert_eq!(idx, (0..l).collect::<Vec<_>>());
        }
    }

    #[test]
    fn truncation_keeps_a_floor_prefix(l in 1usize..60, r in 0.0f64..=1.0, seed in any::<u64>()) {
        let msg = message(l, 3, seed, "t");
        let out = truncate_ratio(&msg, r).unwrap();
        let keep = (r * l as f64).floor() as usize;
        prop_assert_eq!(out.len(), keep);
        prop_assert_eq!(out.values.data(), &msg.values.data()[..keep * 3]);
        prop_assert_eq!(&out.plan_tokens[..], &msg.plan_tokens[..keep]);
    }

    #[test]
    fn curriculum_split_partitions_the_message(l in 1usize..60, r in 0.0f64..=1.0, seed in any::<u64>()) {
        let msg = message(l, 3, seed, "t");
        let (prefix, rest) = curriculum_replace(&msg, r).unwrap();
        prop_assert_eq!(prefix.rows() + rest.len(), l);
        prop_assert_eq!(prefix.data(), &msg.values.data()[..prefix.rows() * 3]);
        prop_assert_eq!(&rest[..], &msg.plan_tokens[prefix.rows()..]);
    }

    #[test]
    fn bands_are_monotone_and_bounded(raw in prop::collection::vec(0.0f64..1.0, 1..40)) {
        let total: f64 = raw.iter().sum();
        prop_assume!(total > 1e-9);
        let probs: Vec<f64> = raw.iter().map(|x| x / total).collect();
        let b = step_bands(&probs);
        prop_assert_eq!(b.bands.len(), BAND_MAX_K);
        prop_assert!(b.bands.windows(2).all(|w| w[0] <= w[1]));
        prop_assert!(b.bands.iter().all(|&x| (0.0..=1.0).contains(&x)));
        prop_assert!(b.s10 > 0.0 && b.s10 <= 1.0 + 1e-12);
        if probs.len() <= 10 {
            prop_assert!((b.s10 - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn haar_samples_are_orthogonal(d in 1usize..16, seed in any::<u64>()) {
        let q = haar_orthogonal(d, seed);
        let err = (q.transpose() * &q - DMatrix::<f64>::identity(d, d)).amax();
        prop_assert!(err < 1e-10);
    }

    #[test]
    fn random_rotation_preserves_moments(d in 2usize..10, extra in 2usize..30, seed in any::<u64>()) {
        let msg = message(d + extra, d, seed, "t");
        let out = apply_perturbation(&msg, &PerturbationSpec { kind: PerturbationKind::RandomRot, seed }, &[]).unwrap();
        let (m0, c0) = sample_moments(&matrix(&msg.values)).unwrap();
        let (m1, c1) = sample_moments(&matrix(&out.values)).unwrap();
        prop_assert!((m1 - &m0).amax() < 1e-4);
        prop_assert!((c1 - &c0).amax() / c0.amax() < 1e-4);
    }

    #[test]
    fn perturbations_are_deterministic_and_leave_the_input_alone(seed in any::<u64>(), which in 0usize..7) {
        let msg = message(12, 4, seed, "a");
        let other = message(9, 4, seed ^ 1, "b");
        let before = msg.clone();
        let kind = table_variants()[which];
        let spec = PerturbationSpec { kind, seed };
        let x = apply_perturbation(&msg, &spec, &[&msg, &other]).unwrap();
        let y = apply_perturbation(&msg, &spec, &[&msg, &other]).unwrap();
        prop_assert_eq!(&x, &y);
        prop_assert_eq!(&msg, &before);
        prop_assert_eq!(&x.generator_tag, &spec.tag());
        prop_assert_eq!(x.dim(), msg.dim());
        if kind == PerturbationKind::CrossTask {
            prop_assert_eq!(x.values, other.values);
        }
    }
}

#[test]
fn haar_marginals_match_uniform_rotation() {
    // Each entry of a Haar-distributed d×d orthogonal matrix has mean 0 and
    // variance 1/d.
    let d = 6;
    let n = 4000;
    let (mut sum, mut sq) = (DMatrix::<f64>::zeros(d, d), DMatrix::<f64>::zeros(d, d));
    for seed in 0..n {
        let q = haar_orthogonal(d, seed);
        sum += &q;
        sq += q.component_mul(&q);
    }
    let mean = sum / n as f64;
    let var = sq / n as f64;
    // Standard error of the mean is sqrt(1/(d n)) ≈ 0.0065.
    assert!(mean.amax() < 0.03, "entry means {mean}");
    assert!((var.add_scalar(-1.0 / d as f64)).amax() < 0.02, "entry variances {var}");
}

#[test]
fn cov_noise_adds_zero_mean_noise_scaled_by_strength() {
    let msg = message(4000, 3, 9, "t");
    let h = matrix(&msg.values);
    let spec = |strength| PerturbationSpec { kind: PerturbationKind::CovNoise { strength }, seed: 5 };
    let half = matrix(&apply_perturbation(&msg, &spec(0.5), &[]).unwrap().values) - &h;
    let full = matrix(&apply_perturbation(&msg, &spec(1.0), &[]).unwrap().values) - &h;
    // Same seed, same draws: the noise scales linearly with strength.
    assert!((&full - &half * 2.0).amax() < 1e-4);
    let (m, _) = sample_moments(&full).unwrap();
    assert!(m.amax() < 0.15, "noise mean {m}");
}

#[test]
fn cross_task_without_other_tasks_is_an_error() {
    let msg = message(5, 2, 1, "a");
    let same = message(5, 2, 2, "a");
    let spec = PerturbationSpec { kind: PerturbationKind::CrossTask, seed: 0 };
    assert!(apply_perturbation(&msg, &spec, &[&msg, &same]).is_err());
}

#[test]
fn random_walks_keep_the_world_consistent() {
    let kinds = WorldKinds::default();
    let vocab = Vocab::new(&kinds).unwrap();
    let counts = TaskCounts { train: 200, validation: 10, seen_eval: 10, unseen_eval: 10 };
    let sets = generate_tasks(21, counts, &kinds, &vocab).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for t in &sets.train {
        let mut s = t.initial.clone();
        let count = |s: &interlat::minihouse::State| {
            s.receptacles.iter().map(|r| r.contents.len()).sum::<usize>() + s.holding.is_some() as usize
        };
        let objects = count(&s);
        for _ in 0..40 {
            let cands = s.candidate_actions();
            let a = &cands[rng.random_range(0..cands.len())];
            let (obs, next, _) = s.step(Some(a));
            // Objects are never created or destroyed.
            assert_eq!(count(&next), objects);
            if obs == INVALID_OBSERVATION {
                assert_eq!(next, s);
            }
            s = next;
        }
    }
}
