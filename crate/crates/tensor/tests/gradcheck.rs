//! Analytic gradients of every primitive against central finite differences.

use cmlp_tensor::{finite_diff_check, BnRunning, Mode, Result, Rng, Tape, Tensor, Var};

const STEP: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn random(shape: &[usize], rng: &mut Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.uniform_range(-1.0, 1.0))
}

/// Values bounded away from zero so relu/abs kinks are never crossed by a step.
fn away_from_zero(shape: &[usize], rng: &mut Rng) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let m = rng.uniform_range(0.1, 1.0);
        if rng.bernoulli(0.5) {
            m
        } else {
            -m
        }
    })
}

/// Σ c_i y_i with fixed random weights, so no output direction cancels.
fn weighted_sum(t: &mut Tape, y: Var, seed: u64) -> Result<Var> {
    let mut rng = Rng::new(seed);
    let c = t.constant(Tensor::from_fn(t.shape(y), |_| rng.uniform_range(0.5, 1.5)));
    let p = t.mul(y, c)?;
    Ok(t.sum(p))
}

fn check(name: &str, err: f64) {
    println!("{name}: max relative error {err:.3e}");
    assert!(err < TOL, "{name}: {err}");
}

#[test]
fn quadratic_is_near_exact() {
    let x = Tensor::vector(vec![1.0, 2.0]);
    let err = finite_diff_check(
        |t, x| {
            let sq = t.mul(x, x)?;
            Ok(t.sum(sq))
        },
        &x,
        STEP,
    )
    .unwrap();
    assert!(err < 1e-7, "{err}");
}

#[test]
fn relu_sum_off_kink() {
    let x = Tensor::vector(vec![0.3, -0.8, 1.7, -2.2, 0.05]);
    let err = finite_diff_check(
        |t, x| {
            let r = t.relu(x);
            Ok(t.sum(r))
        },
        &x,
        STEP,
    )
    .unwrap();
    assert!(err < 1e-6, "{err}");
}

#[test]
fn linear_all_operands() {
    let mut rng = Rng::new(10);
    let (x, w, b) = (
        random(&[3, 4], &mut rng),
        random(&[4, 2], &mut rng),
        random(&[2], &mut rng),
    );
    let (w1, b1) = (w.clone(), b.clone());
    check(
        "linear/x",
        finite_diff_check(
            move |t, x| {
                let (w, b) = (t.constant(w1.clone()), t.constant(b1.clone()));
                let y = t.linear(x, w, b)?;
                weighted_sum(t, y, 1)
            },
            &x,
            STEP,
        )
        .unwrap(),
    );
    let (x2, b2) = (x.clone(), b.clone());
    check(
        "linear/w",
        finite_diff_check(
            move |t, w| {
                let (x, b) = (t.constant(x2.clone()), t.constant(b2.clone()));
                let y = t.linear(x, w, b)?;
                weighted_sum(t, y, 1)
            },
            &w,
            STEP,
        )
        .unwrap(),
    );
    check(
        "linear/b",
        finite_diff_check(
            move |t, b| {
                let (x, w) = (t.constant(x.clone()), t.constant(w.clone()));
                let y = t.linear(x, w, b)?;
                weighted_sum(t, y, 1)
            },
            &b,
            STEP,
        )
        .unwrap(),
    );
}

#[test]
fn conv2d_all_operands() {
    let mut rng = Rng::new(11);
    let x = random(&[2, 2, 5, 5], &mut rng);
    let k = random(&[3, 2, 3, 3], &mut rng);
    let b = random(&[3], &mut rng);
    for (stride, pad) in [(1, 1), (2, 1), (1, 0)] {
        let (k1, b1) = (k.clone(), b.clone());
        check(
            "conv2d/x",
            finite_diff_check(
                move |t, x| {
                    let (k, b) = (t.constant(k1.clone()), t.constant(b1.clone()));
                    let y = t.conv2d(x, k, b, stride, pad)?;
                    weighted_sum(t, y, 2)
                },
                &x,
                STEP,
            )
            .unwrap(),
        );
        let (x2, b2) = (x.clone(), b.clone());
        check(
            "conv2d/k",
            finite_diff_check(
                move |t, k| {
                    let (x, b) = (t.constant(x2.clone()), t.constant(b2.clone()));
                    let y = t.conv2d(x, k, b, stride, pad)?;
                    weighted_sum(t, y, 2)
                },
                &k,
                STEP,
            )
            .unwrap(),
        );
        let (x3, k3) = (x.clone(), k.clone());
        check(
            "conv2d/b",
            finite_diff_check(
                move |t, b| {
                    let (x, k) = (t.constant(x3.clone()), t.constant(k3.clone()));
                    let y = t.conv2d(x, k, b, stride, pad)?;
                    weighted_sum(t, y, 2)
                },
                &b,
                STEP,
            )
            .unwrap(),
        );
    }
}

#[test]
fn relu_and_abs() {
    let mut rng = Rng::new(12);
    let x = away_from_zero(&[4, 5], &mut rng);
    check(
        "relu",
        finite_diff_check(
            |t, x| {
                let y = t.relu(x);
                weighted_sum(t, y, 3)
            },
            &x,
            STEP,
        )
        .unwrap(),
    );
    check(
        "abs",
        finite_diff_check(
            |t, x| {
                let y = t.abs(x);
                weighted_sum(t, y, 3)
            },
            &x,
            STEP,
        )
        .unwrap(),
    );
}

#[test]
fn batch_norm_both_modes() {
    let mut rng = Rng::new(13);
    let x = random(&[3, 4, 5], &mut rng);
    let gamma = Tensor::from_fn(&[4], |i| 0.5 + i as f64 * 0.3);
    let beta = Tensor::from_fn(&[4], |i| i as f64 * 0.1 - 0.2);
    let running = BnRunning {
        mean: vec![0.1, -0.2, 0.3, 0.0],
        var: vec![0.5, 1.5, 1.0, 2.0],
    };
    for mode in [Mode::Train, Mode::Eval] {
        {
            let axis = 1;
            let (g1, b1, r1) = (gamma.clone(), beta.clone(), running.clone());
            check(
                "batch_norm/x",
                finite_diff_check(
                    move |t, x| {
                        let (g, b) = (t.constant(g1.clone()), t.constant(b1.clone()));
                        let y = t.batch_norm(x, g, b, &r1, axis, mode, 0)?;
                        weighted_sum(t, y, 4)
                    },
                    &x,
                    STEP,
                )
                .unwrap(),
            );
            let (x2, b2, r2) = (x.clone(), beta.clone(), running.clone());
            check(
                "batch_norm/gamma",
                finite_diff_check(
                    move |t, g| {
                        let (x, b) = (t.constant(x2.clone()), t.constant(b2.clone()));
                        let y = t.batch_norm(x, g, b, &r2, axis, mode, 0)?;
                        weighted_sum(t, y, 4)
                    },
                    &gamma,
                    STEP,
                )
                .unwrap(),
            );
            let (x3, g3, r3) = (x.clone(), gamma.clone(), running.clone());
            check(
                "batch_norm/beta",
                finite_diff_check(
                    move |t, b| {
                        let (x, g) = (t.constant(x3.clone()), t.constant(g3.clone()));
                        let y = t.batch_norm(x, g, b, &r3, axis, mode, 0)?;
                        weighted_sum(t, y, 4)
                    },
                    &beta,
                    STEP,
                )
                .unwrap(),
            );
        }
    }
    // normalization over the leading axis of a token matrix
    let x2 = random(&[6, 3], &mut rng);
    check(
        "batch_norm/rows",
        finite_diff_check(
            |t, x| {
                let g = t.constant(Tensor::full(&[3], 1.3));
                let b = t.constant(Tensor::zeros(&[3]));
                let y = t.batch_norm(x, g, b, &BnRunning::new(3), 1, Mode::Train, 0)?;
                weighted_sum(t, y, 5)
            },
            &x2,
            STEP,
        )
        .unwrap(),
    );
}

#[test]
fn dropout_masks() {
    let mut rng = Rng::new(14);
    let x = random(&[5, 6], &mut rng);
    check(
        "dropout",
        finite_diff_check(
            |t, x| {
                let mut r = Rng::new(99);
                let y = t.dropout(x, 0.3, &mut r, Mode::Train)?;
                weighted_sum(t, y, 6)
            },
            &x,
            STEP,
        )
        .unwrap(),
    );
    check(
        "dropout_rows",
        finite_diff_check(
            |t, x| {
                let mut r = Rng::new(98);
                let y = t.dropout_rows(x, 0.3, &mut r, Mode::Train)?;
                weighted_sum(t, y, 6)
            },
            &x,
            STEP,
        )
        .unwrap(),
    );
}

#[test]
fn max_pool() {
    let mut rng = Rng::new(15);
    let x = random(&[2, 4, 6], &mut rng);
    check(
        "max_pool2",
        finite_diff_check(
            |t, x| {
                let y = t.max_pool2(x)?;
                weighted_sum(t, y, 7)
            },
            &x,
            STEP,
        )
        .unwrap(),
    );
}

#[test]
fn layout_ops() {
    let mut rng = Rng::new(16);
    let x = random(&[2, 3, 4], &mut rng);
    check(
        "transpose",
        finite_diff_check(
            |t, x| {
                let y = t.transpose(x, 0, 2)?;
                weighted_sum(t, y, 8)
            },
            &x,
            STEP,
        )
        .unwrap(),
    );
    check(
        "reshape",
        finite_diff_check(
            |t, x| {
                let y = t.reshape(x, &[6, 4])?;
                weighted_sum(t, y, 8)
            },
            &x,
            STEP,
        )
        .unwrap(),
    );
    check(
        "concat+slice",
        finite_diff_check(
            |t, x| {
                let a = t.slice(x, 1, 0, 2)?;
                let b = t.slice(x, 1, 1, 2)?;
                let y = t.concat(&[b, a, x], 1)?;
                weighted_sum(t, y, 8)
            },
            &x,
            STEP,
        )
        .unwrap(),
    );
    check(
        "gather",
        finite_diff_check(
            |t, x| {
                let idx = vec![5, 0, 0, 23, 7, 11];
                let y = t.gather(x, idx, &[2, 3])?;
                weighted_sum(t, y, 8)
            },
            &x,
            STEP,
        )
        .unwrap(),
    );
    for axis in 0..3 {
        check(
            "reduce_mean",
            finite_diff_check(
                |t, x| {
                    let y = t.reduce_mean(x, axis)?;
                    weighted_sum(t, y, 8)
                },
                &x,
                STEP,
            )
            .unwrap(),
        );
    }
}

#[test]
fn arithmetic() {
    let mut rng = Rng::new(17);
    let x = random(&[7], &mut rng);
    let other = random(&[7], &mut rng);
    for op in 0..4 {
        let o = other.clone();
        check(
            "arith",
            finite_diff_check(
                move |t, x| {
                    let c = t.constant(o.clone());
                    let y = match op {
                        0 => t.add(x, c)?,
                        1 => t.sub(c, x)?,
                        2 => t.mul(x, c)?,
                        _ => t.scale(x, -2.5),
                    };
                    weighted_sum(t, y, 9)
                },
                &x,
                STEP,
            )
            .unwrap(),
        );
    }
    let s = Tensor::scalar(0.8);
    check(
        "abs_err",
        finite_diff_check(
            |t, a| {
                let b = t.constant(Tensor::scalar(-1.1));
                t.abs_err(a, b)
            },
            &s,
            STEP,
        )
        .unwrap(),
    );
}

#[test]
fn composite_chain() {
    // conv → BN → relu → pool → flatten → linear, gradient w.r.t. the kernel
    let mut rng = Rng::new(18);
    let img = random(&[2, 2, 4, 4], &mut rng);
    let k = random(&[3, 2, 3, 3], &mut rng);
    let w = random(&[12, 2], &mut rng);
    check(
        "composite",
        finite_diff_check(
            |t, k| {
                let x = t.constant(img.clone());
                let b = t.constant(Tensor::zeros(&[3]));
                let y = t.conv2d(x, k, b, 1, 1)?;
                let g = t.constant(Tensor::full(&[3], 1.0));
                let be = t.constant(Tensor::full(&[3], 0.2));
                let y = t.batch_norm(y, g, be, &BnRunning::new(3), 1, Mode::Train, 0)?;
                let y = t.relu(y);
                let y = t.max_pool2(y)?;
                let y = t.reshape(y, &[2, 12])?;
                let wv = t.constant(w.clone());
                let bv = t.constant(Tensor::zeros(&[2]));
                let y = t.linear(y, wv, bv)?;
                weighted_sum(t, y, 10)
            },
            &k,
            STEP,
        )
        .unwrap(),
    );
}
