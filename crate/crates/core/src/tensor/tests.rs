use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::check::grad_check;
use super::*;

const EPS: f32 = 1e-3;
const TOL: f64 = 1e-3;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Values bounded away from zero so kinks stay outside the difference stencil.
fn away_from_zero(shape: &[usize], seed: u64) -> Tensor {
    let mut r = rng(seed);
    let mut t = Tensor::uniform(shape, 0.1, 1.0, &mut r);
    for (i, v) in t.data_mut().iter_mut().enumerate() {
        if i % 2 == 1 {
            *v = -*v;
        }
    }
    t
}

/// `sum(y * w)` with a fixed pseudo-random `w`, giving O(1) gradients.
fn probe_sum(g: &mut Graph, y: Var) -> Result<Var> {
    let w = Tensor::uniform(g.shape(y), 0.5, 1.5, &mut rng(99));
    let w = g.constant(w);
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

fn check(name: &str, x: Tensor, f: impl Fn(&mut Graph, Var) -> Result<Var>) {
    let r = grad_check(f, &x, EPS).unwrap();
    assert!(r.max_rel_dev < TOL, "{name}: deviation {}", r.max_rel_dev);
}

#[test]
fn elementwise_ops_pass_grad_check() {
    let x = away_from_zero(&[3, 4], 1);
    check("relu", x.clone(), |g, x| {
        let y = g.relu(x);
        probe_sum(g, y)
    });
    check("leaky_relu", x.clone(), |g, x| {
        let y = g.leaky_relu(x, 0.2);
        probe_sum(g, y)
    });
    check("sigmoid", x.clone(), |g, x| {
        let y = g.sigmoid(x);
        probe_sum(g, y)
    });
    check("silu", x.clone(), |g, x| {
        let y = g.silu(x);
        probe_sum(g, y)
    });
    check("tanh", x.clone(), |g, x| {
        let y = g.tanh(x);
        probe_sum(g, y)
    });
    check("exp", x.clone(), |g, x| {
        let y = g.exp(x);
        probe_sum(g, y)
    });
    check("abs", x.clone(), |g, x| {
        let y = g.abs(x);
        probe_sum(g, y)
    });
    check("scale", x.clone(), |g, x| {
        let y = g.scale(x, -2.5);
        probe_sum(g, y)
    });
    check("add_scalar", x.clone(), |g, x| {
        let y = g.add_scalar(x, 3.0);
        let y = g.mul(y, x)?;
        probe_sum(g, y)
    });
    let pos = Tensor::uniform(&[3, 4], 0.2, 0.9, &mut rng(2));
    check("log_clamped", pos, |g, x| {
        let y = g.log_clamped(x, 1e-7, 1.0 - 1e-7);
        probe_sum(g, y)
    });
}

#[test]
fn binary_ops_with_broadcasting_pass_grad_check() {
    let x = away_from_zero(&[2, 3, 4], 3);
    let other = Tensor::uniform(&[3, 1], -1.0, 1.0, &mut rng(4));
    for op in ["add", "sub", "mul"] {
        check(op, x.clone(), |g, x| {
            let o = g.constant(other.clone());
            let y = match op {
                "add" => g.add(x, o)?,
                "sub" => g.sub(o, x)?,
                _ => g.mul(x, o)?,
            };
            let y = g.mul(y, x)?;
            probe_sum(g, y)
        });
    }
    // gradient into the broadcast operand
    let small = Tensor::uniform(&[4], -1.0, 1.0, &mut rng(5));
    check("mul broadcast operand", small, |g, b| {
        let big = g.constant(away_from_zero(&[2, 3, 4], 6));
        let y = g.mul(big, b)?;
        let y = g.add(y, b)?;
        probe_sum(g, y)
    });
}

#[test]
fn matmul_passes_grad_check() {
    let a = away_from_zero(&[2, 3, 4], 7);
    let b = Tensor::uniform(&[2, 4, 5], -1.0, 1.0, &mut rng(8));
    check("matmul lhs", a.clone(), |g, a| {
        let b = g.constant(b.clone());
        let y = g.matmul(a, b)?;
        probe_sum(g, y)
    });
    check("matmul rhs", b.clone(), |g, b| {
        let a = g.constant(a.clone());
        let y = g.matmul(a, b)?;
        probe_sum(g, y)
    });
    let shared = Tensor::uniform(&[4, 2], -1.0, 1.0, &mut rng(9));
    check("matmul shared rhs", shared, |g, w| {
        let a = g.constant(away_from_zero(&[2, 3, 4], 10));
        let y = g.matmul(a, w)?;
        probe_sum(g, y)
    });
}

#[test]
fn structural_ops_pass_grad_check() {
    let x = away_from_zero(&[2, 3, 4], 11);
    check("permute", x.clone(), |g, x| {
        let y = g.permute(x, &[2, 0, 1])?;
        let y = g.mul(y, y)?;
        probe_sum(g, y)
    });
    check("transpose_last", x.clone(), |g, x| {
        let y = g.transpose_last(x)?;
        probe_sum(g, y)
    });
    check("reshape", x.clone(), |g, x| {
        let y = g.reshape(x, &[6, 4])?;
        let y = g.sigmoid(y);
        probe_sum(g, y)
    });
    check("concat", x.clone(), |g, x| {
        let s = g.scale(x, 2.0);
        let y = g.concat(&[x, s, x], 1)?;
        let y = g.tanh(y);
        probe_sum(g, y)
    });
    check("narrow", x.clone(), |g, x| {
        let y = g.narrow(x, 2, 1, 2)?;
        let y = g.exp(y);
        probe_sum(g, y)
    });
}

#[test]
fn convolutions_pass_grad_check() {
    let x = away_from_zero(&[2, 2, 5, 5], 12);
    let w = Tensor::uniform(&[3, 2, 3, 3], -0.5, 0.5, &mut rng(13));
    let b = Tensor::uniform(&[3], -0.5, 0.5, &mut rng(14));
    for (stride, pad) in [(1, 1), (2, 1), (2, 0)] {
        check("conv2d input", x.clone(), |g, x| {
            let (wv, bv) = (g.constant(w.clone()), g.constant(b.clone()));
            let y = g.conv2d(x, wv, Some(bv), stride, pad)?;
            probe_sum(g, y)
        });
        check("conv2d weight", w.clone(), |g, wv| {
            let (xv, bv) = (g.constant(x.clone()), g.constant(b.clone()));
            let y = g.conv2d(xv, wv, Some(bv), stride, pad)?;
            probe_sum(g, y)
        });
        check("conv2d bias", b.clone(), |g, bv| {
            let (xv, wv) = (g.constant(x.clone()), g.constant(w.clone()));
            let y = g.conv2d(xv, wv, Some(bv), stride, pad)?;
            probe_sum(g, y)
        });
    }
    let xt = away_from_zero(&[2, 3, 3, 3], 15);
    let wt = Tensor::uniform(&[3, 2, 4, 4], -0.5, 0.5, &mut rng(16));
    let bt = Tensor::uniform(&[2], -0.5, 0.5, &mut rng(17));
    check("conv_transpose2d input", xt.clone(), |g, x| {
        let (wv, bv) = (g.constant(wt.clone()), g.constant(bt.clone()));
        let y = g.conv_transpose2d(x, wv, Some(bv), 2, 1)?;
        probe_sum(g, y)
    });
    check("conv_transpose2d weight", wt.clone(), |g, wv| {
        let (xv, bv) = (g.constant(xt.clone()), g.constant(bt.clone()));
        let y = g.conv_transpose2d(xv, wv, Some(bv), 2, 1)?;
        probe_sum(g, y)
    });
    check("conv_transpose2d bias", bt.clone(), |g, bv| {
        let (xv, wv) = (g.constant(xt.clone()), g.constant(wt.clone()));
        let y = g.conv_transpose2d(xv, wv, Some(bv), 2, 1)?;
        probe_sum(g, y)
    });
}

#[test]
fn normalisation_and_embedding_pass_grad_check() {
    let x = away_from_zero(&[3, 5], 18);
    check("softmax", x.clone(), |g, x| {
        let y = g.softmax(x)?;
        probe_sum(g, y)
    });
    let gamma = Tensor::uniform(&[5], 0.5, 1.5, &mut rng(19));
    let beta = Tensor::uniform(&[5], -0.5, 0.5, &mut rng(20));
    check("layer_norm input", x.clone(), |g, x| {
        let (gm, bt) = (g.constant(gamma.clone()), g.constant(beta.clone()));
        let y = g.layer_norm(x, gm, bt, 1e-5)?;
        probe_sum(g, y)
    });
    check("layer_norm gamma", gamma.clone(), |g, gm| {
        let (xv, bt) = (g.constant(x.clone()), g.constant(beta.clone()));
        let y = g.layer_norm(xv, gm, bt, 1e-5)?;
        probe_sum(g, y)
    });
    check("layer_norm beta", beta.clone(), |g, bt| {
        let (xv, gm) = (g.constant(x.clone()), g.constant(gamma.clone()));
        let y = g.layer_norm(xv, gm, bt, 1e-5)?;
        let y = g.mul(y, y)?;
        probe_sum(g, y)
    });
    check("embedding", away_from_zero(&[4, 3], 21), |g, t| {
        let y = g.embedding(t, &[2, 0, 2, 3])?;
        let y = g.tanh(y);
        probe_sum(g, y)
    });
}

#[test]
fn reductions_and_losses_pass_grad_check() {
    let x = away_from_zero(&[3, 4], 22);
    let target = Tensor::uniform(&[3, 4], -2.0, 2.0, &mut rng(23));
    check("sum", x.clone(), |g, x| {
        let y = g.mul(x, x)?;
        Ok(g.sum(y))
    });
    check("mean", x.clone(), |g, x| {
        let y = g.exp(x);
        Ok(g.mean(y))
    });
    check("mean_last", x.clone(), |g, x| {
        let y = g.mean_last(x)?;
        let y = g.mul(y, y)?;
        probe_sum(g, y)
    });
    check("l1_loss", x.clone(), |g, x| {
        let t = g.constant(target.clone());
        g.l1_loss(x, t)
    });
    check("mse_loss", x.clone(), |g, x| {
        let t = g.constant(target.clone());
        g.mse_loss(t, x)
    });
    check("cross_entropy", x.clone(), |g, x| g.cross_entropy(x, &[3, 0, 1]));
}

#[test]
fn sum_of_squares_example() {
    let x = Tensor::uniform(&[10], -2.0, 2.0, &mut rng(24));
    let r = grad_check(
        |g, x| {
            let y = g.mul(x, x)?;
            Ok(g.sum(y))
        },
        &x,
        EPS,
    )
    .unwrap();
    assert!(r.max_rel_dev < 1e-3);
    for (a, v) in r.analytic.iter().zip(x.data()) {
        assert!((a - 2.0 * v).abs() < 1e-6);
    }
}

#[test]
fn stop_gradient_blocks_one_factor() {
    let x = Tensor::uniform(&[6], 0.5, 2.0, &mut rng(25));
    let r = grad_check(
        |g, x| {
            let s = g.stop_gradient(x);
            let y = g.mul(s, x)?;
            Ok(g.sum(y))
        },
        &x,
        EPS,
    )
    .unwrap();
    for ((a, n), v) in r.analytic.iter().zip(&r.numeric).zip(x.data()) {
        assert_eq!(*a, *v);
        assert!((n - 2.0 * *v as f64).abs() < 1e-2);
    }
    assert!(r.max_rel_dev > 0.4);
}

#[test]
fn uniform_cross_entropy_is_log_vocab() {
    let mut g = Graph::new();
    let z = g.constant(Tensor::zeros(&[2, 512]));
    let l = g.cross_entropy(z, &[7, 400]).unwrap();
    assert!((g.scalar(l) - 512f64.ln()).abs() < 1e-6);
    assert!((g.scalar(l) - 6.2383).abs() < 1e-4);
}

#[test]
fn unit_kernel_conv_is_identity() {
    let x = Tensor::uniform(&[2, 1, 4, 3], -3.0, 3.0, &mut rng(26));
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let w = g.constant(Tensor::full(&[1, 1, 1, 1], 1.0));
    let y = g.conv2d(xv, w, None, 1, 0).unwrap();
    assert_eq!(g.value(y), &x);
}

#[test]
fn conv_matches_naive_loops() {
    let x = Tensor::uniform(&[1, 2, 4, 4], -1.0, 1.0, &mut rng(27));
    let w = Tensor::uniform(&[2, 2, 3, 3], -1.0, 1.0, &mut rng(28));
    let mut g = Graph::new();
    let (xv, wv) = (g.constant(x.clone()), g.constant(w.clone()));
    let y = g.conv2d(xv, wv, None, 2, 1).unwrap();
    assert_eq!(g.shape(y), &[1, 2, 2, 2]);
    let at = |c: usize, i: isize, j: isize| {
        if (0..4).contains(&i) && (0..4).contains(&j) {
            x.data()[(c * 4 + i as usize) * 4 + j as usize]
        } else {
            0.0
        }
    };
    for co in 0..2 {
        for oh in 0..2 {
            for ow in 0..2 {
                let mut s = 0.0;
                for ci in 0..2 {
                    for ki in 0..3 {
                        for kj in 0..3 {
                            let wv = w.data()[((co * 2 + ci) * 3 + ki) * 3 + kj];
                            s += wv * at(ci, (oh * 2 + ki) as isize - 1, (ow * 2 + kj) as isize - 1);
                        }
                    }
                }
                let got = g.data(y)[(co * 2 + oh) * 2 + ow];
                assert!((got - s).abs() < 1e-5);
            }
        }
    }
}

#[test]
fn transposed_conv_doubles_resolution() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(&[1, 4, 8, 8]));
    let w = g.constant(Tensor::zeros(&[4, 2, 4, 4]));
    let y = g.conv_transpose2d(x, w, None, 2, 1).unwrap();
    assert_eq!(g.shape(y), &[1, 2, 16, 16]);
}

#[test]
fn shape_errors_name_the_op() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[4, 2]));
    match g.matmul(a, b) {
        Err(Error::Shape(m)) => assert!(m.contains("matmul") && m.contains("[2, 3]")),
        other => panic!("unexpected {other:?}"),
    }
    assert!(matches!(g.add(a, b), Err(Error::Shape(m)) if m.contains("add")));
}

#[test]
fn non_scalar_root_is_contract_error() {
    let mut g = Graph::new();
    let a = g.input(Tensor::zeros(&[2]));
    let y = g.relu(a);
    assert!(matches!(g.backward(y), Err(Error::Contract(_))));
}

#[test]
fn backward_is_linear() {
    let x = away_from_zero(&[5], 29);
    let mut g = Graph::new();
    let xv = g.input(x);
    let s = g.sigmoid(xv);
    let f = g.sum(s);
    let sq = g.mul(xv, xv).unwrap();
    let h = g.mean(sq);
    let af = g.scale(f, 2.0);
    let bh = g.scale(h, -3.0);
    let combo = g.add(af, bh).unwrap();
    let (gf, gh, gc) = (
        g.backward(f).unwrap().dense(&g, xv),
        g.backward(h).unwrap().dense(&g, xv),
        g.backward(combo).unwrap().dense(&g, xv),
    );
    for i in 0..5 {
        assert!((gc[i] - (2.0 * gf[i] - 3.0 * gh[i])).abs() < 1e-6);
    }
}

#[test]
fn repeated_runs_are_deterministic() {
    let run = || {
        let mut g = Graph::new();
        let x = g.input(Tensor::randn(&[2, 3, 6, 6], 1.0, &mut rng(30)));
        let w = g.input(Tensor::randn(&[4, 3, 3, 3], 0.3, &mut rng(31)));
        let y = g.conv2d(x, w, None, 1, 1).unwrap();
        let y = g.tanh(y);
        let l = g.mean(y);
        let gr = g.backward(l).unwrap();
        (g.value(l).clone(), gr.dense(&g, w))
    };
    assert_eq!(run(), run());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn matmul_gradients_on_random_shapes(m in 1usize..4, k in 1usize..5, n in 1usize..4, seed in 0u64..1000) {
        let a = away_from_zero(&[m, k], seed);
        // positive entries keep the gradient clear of cancellation, where f32
        // central differences lose their significant digits
        let b = Tensor::uniform(&[k, n], 0.1, 1.0, &mut rng(seed + 1));
        let r = grad_check(|g, a| {
            let b = g.constant(b.clone());
            let y = g.matmul(a, b)?;
            let y = g.tanh(y);
            probe_sum(g, y)
        }, &a, EPS).unwrap();
        prop_assert!(r.max_rel_dev < TOL, "deviation {}", r.max_rel_dev);
    }

    #[test]
    fn stop_gradient_is_value_identity_and_gradient_free(len in 1usize..12, seed in 0u64..1000) {
        let x = Tensor::uniform(&[len], -3.0, 3.0, &mut rng(seed));
        let mut g = Graph::new();
        let xv = g.input(x.clone());
        let s = g.stop_gradient(xv);
        prop_assert_eq!(g.value(s), &x);
        let e = g.exp(s);
        let l = g.sum(e);
        let gr = g.backward(l).unwrap();
        prop_assert!(gr.get(xv).is_none());
    }

    #[test]
    fn conv_gradients_on_random_geometry(c in 1usize..3, hw in 3usize..6, k in 1usize..4, stride in 1usize..3, seed in 0u64..1000) {
        let pad = k / 2;
        let x = away_from_zero(&[1, c, hw, hw], seed);
        let w = Tensor::uniform(&[2, c, k, k], -0.5, 0.5, &mut rng(seed + 7));
        let r = grad_check(|g, x| {
            let w = g.constant(w.clone());
            let y = g.conv2d(x, w, None, stride, pad)?;
            probe_sum(g, y)
        }, &x, EPS).unwrap();
        prop_assert!(r.max_rel_dev < TOL, "deviation {}", r.max_rel_dev);
    }
}


#[test]
fn straight_through_copies_value_and_gradient() {
    let mut g = Graph::new();
    let x = g.input(Tensor::new(vec![3], vec![0.2, -1.0, 4.0]).unwrap());
    let t = g.input(Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap());
    let y = g.straight_through(x, t).unwrap();
    assert_eq!(g.data(y), &[1.0, 2.0, 3.0]);
    let sq = g.mul(y, y).unwrap();
    let l = g.sum(sq);
    let gr = g.backward(l).unwrap();
    assert_eq!(gr.get(x).unwrap(), gr.get(y).unwrap());
    assert_eq!(gr.get(x).unwrap(), &[2.0, 4.0, 6.0]);
    assert!(gr.get(t).is_none());
}

#[test]
fn parameters_of_two_stores_do_not_mix() {
    let mut a = ParamStore::new();
    let mut b = ParamStore::new();
    let ia = a.add("w", Tensor::full(&[2], 2.0));
    let ib = b.add("w", Tensor::full(&[2], 3.0));
    let mut g = Graph::new();
    let (va, vb) = (g.param(&a, ia), g.param(&b, ib));
    let p = g.mul(va, vb).unwrap();
    let l = g.sum(p);
    let gr = g.backward(l).unwrap();
    assert_eq!(gr.param_grads(&g, &a)[0].as_deref(), Some(&[3.0, 3.0][..]));
    assert_eq!(gr.param_grads(&g, &b)[0].as_deref(), Some(&[2.0, 2.0][..]));
}
