use cmlp_tensor::{Mode, Rng, Tensor};
use crowdmlp::split_counting::{
    apply_decoupling, compute_losses, sample_mask, split_counting_loss, split_counting_step,
    uniform_samples, verify_decomposition, EnsembleSample, MaskPair, Rect, SplitBatch,
};
use crowdmlp::{CrowdMlp, ModelConfig};
use proptest::prelude::*;

fn random_image(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = Rng::new(seed);
    Tensor::from_fn(shape, |_| rng.uniform())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn masks_are_binary_and_bounded(side in 16usize..300, seed in any::<u64>()) {
        let m = sample_mask(&mut Rng::new(seed), side).unwrap();
        let (lo, hi) = (side.div_ceil(8), 7 * side / 8);
        prop_assert!((lo..=hi).contains(&m.rect.height));
        prop_assert!((lo..=hi).contains(&m.rect.width));
        prop_assert!(m.rect.top + m.rect.height <= side);
        prop_assert!(m.rect.left + m.rect.width <= side);
        let ones = m.mask.data().iter().filter(|v| **v == 1.0).count();
        prop_assert!(m.mask.data().iter().all(|v| *v == 0.0 || *v == 1.0));
        prop_assert_eq!(ones, m.area());
        let frac = m.area() as f64 / (side * side) as f64;
        prop_assert!(frac > 0.0156 && frac < 0.766, "area fraction {}", frac);
    }

    #[test]
    fn decoupled_parts_partition_the_image(side in 16usize..64, seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let image = Tensor::from_fn(&[3, side, side], |_| rng.uniform_range(-1.0, 1.0));
        let m = sample_mask(&mut rng, side).unwrap();
        let (p, n) = apply_decoupling(&image, &m).unwrap();
        for ((a, b), c) in p.data().iter().zip(n.data()).zip(image.data()) {
            prop_assert_eq!(a + b, *c);
            prop_assert_eq!(a * b, 0.0);
        }
    }

    #[test]
    fn total_loss_combines_the_terms(
        p_i in -100.0f64..100.0,
        p_p in -100.0f64..100.0,
        p_n in -100.0f64..100.0,
        c in 0.0f64..200.0,
    ) {
        let b = compute_losses(p_i, p_p, p_n, c);
        prop_assert!((b.total - (b.l_c + 0.5 * (b.l_ss + b.l_i))).abs() < 1e-12);
        prop_assert!(b.l_c >= 0.0 && b.l_ss >= 0.0 && b.l_i >= 0.0);
    }

    #[test]
    fn ensemble_identity_holds_pointwise(
        m1 in 0.0f64..1000.0,
        m23 in 0.0f64..1000.0,
        y in 0.0f64..1000.0,
    ) {
        let s = EnsembleSample { m1, m23, y };
        prop_assert!(s.residual() < 1e-6);
        prop_assert!(s.diversity() >= 0.0);
        prop_assert!(s.ensemble_error() <= s.average_error());
    }
}

#[test]
fn consistent_parts_reduce_the_loss_to_the_count_term() {
    let b = compute_losses(30.0, 10.0, 20.0, 30.0);
    assert_eq!((b.l_ss, b.l_i), (0.0, 0.0));
    assert_eq!(b.total, b.l_c);
}

#[test]
fn worked_loss_example() {
    // P_I = 50, parts 20 + 25, label 48.
    let b = compute_losses(50.0, 20.0, 25.0, 48.0);
    assert_eq!((b.l_c, b.l_ss, b.l_i), (2.0, 5.0, 3.0));
    assert_eq!(b.total, 6.0);
}

#[test]
fn identity_over_uniform_triples() {
    let samples = uniform_samples(10_000, 1000.0, &mut Rng::new(4));
    let report = verify_decomposition(&samples).unwrap();
    assert_eq!(report.samples, 10_000);
    assert!(report.max_residual < 1e-6);
    assert_eq!(report.ensemble_not_worse, 10_000);
}

#[test]
fn masks_replay_with_the_same_seed() {
    let a = sample_mask(&mut Rng::new(11), 128).unwrap();
    let b = sample_mask(&mut Rng::new(11), 128).unwrap();
    assert_eq!(a.rect, b.rect);
}

#[test]
fn mismatched_mask_is_rejected() {
    let m = sample_mask(&mut Rng::new(0), 32).unwrap();
    assert!(apply_decoupling(&Tensor::zeros(&[3, 16, 16]), &m).is_err());
}

fn tiny_batch(seed: u64) -> (Tensor, Vec<f64>) {
    (random_image(&[2, 3, 128, 128], seed), vec![23.0, 61.0])
}

#[test]
fn blank_image_with_full_mask_is_well_defined() {
    let model = CrowdMlp::new(&ModelConfig::tiny()).unwrap();
    let full = MaskPair::from_rect(
        Rect {
            top: 0,
            left: 0,
            height: 128,
            width: 128,
        },
        128,
    );
    let images = Tensor::zeros(&[1, 3, 128, 128]);
    let batch = SplitBatch::with_masks(&images, &[0.0], vec![full]).unwrap();
    assert!(batch.negative.data().iter().all(|v| *v == 0.0));
    let mut s = model.session(Mode::Eval, Rng::new(0));
    let out = split_counting_loss(&model, &mut s, &batch, true).unwrap();
    let b = out.bundle;
    assert!(b.l_ss.is_finite() && b.l_i.is_finite() && b.total.is_finite());
    assert!(s.gradients(out.loss).is_ok());
}

#[test]
fn three_passes_match_separate_predictions() {
    let model = CrowdMlp::new(&ModelConfig::tiny()).unwrap();
    let (images, counts) = tiny_batch(1);
    let batch = SplitBatch::sample(&images, &counts, &mut Rng::new(2)).unwrap();
    let mut s = model.session(Mode::Eval, Rng::new(0));
    let out = split_counting_loss(&model, &mut s, &batch, true).unwrap();
    let p_i = model.predict(&batch.whole).unwrap().0;
    let p_p = model.predict(&batch.positive).unwrap().0;
    let p_n = model.predict(&batch.negative).unwrap().0;
    for b in 0..2 {
        let expected = compute_losses(p_i[b], p_p[b], p_n[b], counts[b]);
        assert_eq!(out.per_example[b], expected);
    }
    let mean = (out.per_example[0].total + out.per_example[1].total) / 2.0;
    assert!((s.value(out.loss).data()[0] - mean).abs() < 1e-12);
}

#[test]
fn proxy_terms_change_the_gradients() {
    let model = CrowdMlp::new(&ModelConfig::tiny()).unwrap();
    let (images, counts) = tiny_batch(3);
    let with = split_counting_step(&model, &images, &counts, &mut Rng::new(5), Mode::Train, true)
        .unwrap();
    let without =
        split_counting_step(&model, &images, &counts, &mut Rng::new(5), Mode::Train, false)
            .unwrap();
    assert_eq!(without.bundle.l_ss, 0.0);
    assert_eq!(without.bundle.l_i, 0.0);
    assert_eq!(without.bundle.total, without.bundle.l_c);
    let mut diff = 0.0f64;
    for (a, b) in with.grads.iter().zip(without.grads.iter()) {
        if let (Some(a), Some(b)) = (a, b) {
            diff = diff.max(a.max_abs_diff(b));
        }
    }
    assert!(diff > 1e-6, "largest gradient difference {diff}");
}

#[test]
fn running_statistics_come_from_the_whole_pass() {
    let model = CrowdMlp::new(&ModelConfig::tiny()).unwrap();
    let (images, counts) = tiny_batch(4);
    let out =
        split_counting_step(&model, &images, &counts, &mut Rng::new(6), Mode::Train, true).unwrap();
    assert_eq!(out.bn_observations.len(), model.bn.len());
}

#[test]
fn step_is_deterministic_for_a_seed() {
    let model = CrowdMlp::new(&ModelConfig::tiny()).unwrap();
    let (images, counts) = tiny_batch(7);
    let run = || {
        split_counting_step(&model, &images, &counts, &mut Rng::new(8), Mode::Train, true).unwrap()
    };
    let (a, b) = (run(), run());
    assert_eq!(a.per_example, b.per_example);
    for (x, y) in a.grads.iter().zip(b.grads.iter()) {
        assert_eq!(x.map(|t| t.data().to_vec()), y.map(|t| t.data().to_vec()));
    }
}
