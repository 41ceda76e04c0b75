use cmlp_tensor::{BnRunning, Mode, Rng, Tape, Tensor};
use proptest::prelude::*;

fn tensor_strategy(max_rank: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(1usize..5, 1..=max_rank).prop_flat_map(|shape| {
        let n: usize = shape.iter().product();
        prop::collection::vec(-10.0f64..10.0, n)
            .prop_map(move |data| Tensor::new(shape.clone(), data).unwrap())
    })
}

proptest! {
    #[test]
    fn concat_then_split_reconstructs(
        a in tensor_strategy(3),
        extra in 1usize..4,
        seed in any::<u64>(),
    ) {
        let mut rng = Rng::new(seed);
        let axis = (seed as usize) % a.rank();
        let mut shape_b = a.shape().to_vec();
        shape_b[axis] = extra;
        let b = Tensor::from_fn(&shape_b, |_| rng.uniform());
        let mut t = Tape::new();
        let (va, vb) = (t.constant(a.clone()), t.constant(b.clone()));
        let joined = t.concat(&[va, vb], axis).unwrap();
        let parts = t.split(joined, axis, &[a.shape()[axis], extra]).unwrap();
        prop_assert_eq!(t.value(parts[0]), &a);
        prop_assert_eq!(t.value(parts[1]), &b);
    }

    #[test]
    fn double_transpose_is_identity(x in tensor_strategy(4), a in 0usize..4, b in 0usize..4) {
        let (a, b) = (a % x.rank(), b % x.rank());
        let mut t = Tape::new();
        let v = t.constant(x.clone());
        let y = t.transpose(v, a, b).unwrap();
        let z = t.transpose(y, a, b).unwrap();
        prop_assert_eq!(t.value(z), &x);
    }

    #[test]
    fn eval_dropout_is_exact_identity(x in tensor_strategy(3), p in 0.0f64..0.99, seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let mut t = Tape::new();
        let v = t.constant(x.clone());
        let y = t.dropout(v, p, &mut rng, Mode::Eval).unwrap();
        prop_assert_eq!(t.value(y), &x);
    }

    #[test]
    fn train_dropout_mask_is_reproducible(x in tensor_strategy(3), p in 0.01f64..0.9, seed in any::<u64>()) {
        let run = || {
            let mut rng = Rng::new(seed);
            let mut t = Tape::new();
            let v = t.constant(x.clone());
            let y = t.dropout(v, p, &mut rng, Mode::Train).unwrap();
            t.value(y).data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        };
        prop_assert_eq!(run(), run());
    }
}

/// Per-row loss of a small network in eval mode, summed over `rows`.
fn batch_loss_grads(x: &Tensor, w: &Tensor, rows: std::ops::Range<usize>) -> Tensor {
    let d = x.shape()[1];
    let sub = Tensor::new(
        vec![rows.len(), d],
        x.data()[rows.start * d..rows.end * d].to_vec(),
    )
    .unwrap();
    let mut t = Tape::new();
    let xv = t.constant(sub);
    let wv = t.param(w.clone());
    let b = t.constant(Tensor::full(&[w.shape()[1]], 0.1));
    let h = t.linear(xv, wv, b).unwrap();
    let g = t.constant(Tensor::full(&[w.shape()[1]], 1.2));
    let be = t.constant(Tensor::full(&[w.shape()[1]], -0.1));
    let running = BnRunning {
        mean: vec![0.2; w.shape()[1]],
        var: vec![0.7; w.shape()[1]],
    };
    let h = t.batch_norm(h, g, be, &running, 1, Mode::Eval, 0).unwrap();
    let h = t.relu(h);
    let l = t.sum(h);
    t.backward(l).unwrap().take(wv).unwrap()
}

#[test]
fn sub_batch_gradients_sum_to_full_batch() {
    let mut rng = Rng::new(21);
    let x = Tensor::from_fn(&[12, 5], |_| rng.uniform_range(-1.0, 1.0));
    let w = Tensor::from_fn(&[5, 3], |_| rng.uniform_range(-1.0, 1.0));
    let full = batch_loss_grads(&x, &w, 0..12);
    for k in [2, 3, 4, 6] {
        let step = 12 / k;
        let mut acc = Tensor::zeros(w.shape());
        for i in 0..k {
            acc.add_assign(&batch_loss_grads(&x, &w, i * step..(i + 1) * step))
                .unwrap();
        }
        assert!(acc.max_abs_diff(&full) < 1e-10, "k = {k}");
    }
}

#[test]
fn parallel_tapes_merge_like_sequential() {
    let mut rng = Rng::new(22);
    let x = Tensor::from_fn(&[8, 5], |_| rng.uniform_range(-1.0, 1.0));
    let w = Tensor::from_fn(&[5, 3], |_| rng.uniform_range(-1.0, 1.0));
    let sequential = {
        let mut a = batch_loss_grads(&x, &w, 0..4);
        a.add_assign(&batch_loss_grads(&x, &w, 4..8)).unwrap();
        a
    };
    let (a, b) = std::thread::scope(|s| {
        let ha = s.spawn(|| batch_loss_grads(&x, &w, 0..4));
        let hb = s.spawn(|| batch_loss_grads(&x, &w, 4..8));
        (ha.join().unwrap(), hb.join().unwrap())
    });
    let mut merged = a;
    merged.add_assign(&b).unwrap();
    assert_eq!(merged, sequential);
}
