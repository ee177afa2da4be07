use super::*;
use crate::rng;
use proptest::prelude::*;
use rand::Rng;

fn rand_tensor64(shape: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor<f64> {
    let mut r = rng::rng_for(seed, 0xfd, 0);
    Tensor::from_fn(shape, |_| r.gen_range(lo..hi))
}

// ── matmul ──────────────────────────────────────────────────────────────

#[test]
fn matmul_identity() {
    let mut g = Graph::<f64>::new();
    let eye = g.constant(Tensor::from_fn(&[2, 2], |i| if i % 3 == 0 { 1.0 } else { 0.0 }));
    let a = g.constant(rand_tensor64(&[2, 3], 1, -1.0, 1.0));
    let out = g.matmul(eye, a).unwrap();
    assert_eq!(g.value(out).data(), g.value(a).data());
}

#[test]
fn matmul_zero() {
    let mut g = Graph::<f64>::new();
    let z = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(rand_tensor64(&[3, 4], 2, -1.0, 1.0));
    let out = g.matmul(z, b).unwrap();
    assert!(g.value(out).data().iter().all(|&v| v == 0.0));
    assert_eq!(g.shape(out), &[2, 4]);
}

#[test]
fn matmul_matches_triple_loop_oracle() {
    let a = rand_tensor64(&[4, 5], 3, -2.0, 2.0);
    let b = rand_tensor64(&[5, 3], 4, -2.0, 2.0);
    // Independent oracle: naive triple loop.
    let mut expect = vec![0.0f64; 4 * 3];
    for i in 0..4 {
        for j in 0..3 {
            let mut s = 0.0;
            for p in 0..5 {
                s += a.data()[i * 5 + p] * b.data()[p * 3 + j];
            }
            expect[i * 3 + j] = s;
        }
    }
    let mut g = Graph::new();
    let (ia, ib) = (g.constant(a), g.constant(b));
    let out = g.matmul(ia, ib).unwrap();
    for (got, want) in g.value(out).data().iter().zip(&expect) {
        assert!((got - want).abs() < 1e-6);
    }
}

#[test]
fn matmul_shape_mismatch_names_both_shapes() {
    let mut g = Graph::<f32>::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[4, 2]));
    let err = g.matmul(a, b).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
}

// ── conv2d ──────────────────────────────────────────────────────────────

#[test]
fn conv2d_identity_kernel() {
    let x = rand_tensor64(&[1, 5, 5], 5, -1.0, 1.0);
    let mut g = Graph::new();
    let xi = g.constant(x.clone());
    let k = g.constant(Tensor::full(&[1, 1, 1, 1], 1.0));
    let out = g.conv2d(xi, k, 1, Pad::Same).unwrap();
    assert_eq!(g.value(out).data(), x.data());
}

#[test]
fn conv2d_ones_kernel_constant_input() {
    let c = 0.37;
    let mut g = Graph::<f64>::new();
    let xi = g.constant(Tensor::full(&[1, 6, 6], c));
    let k = g.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
    let out = g.conv2d(xi, k, 1, Pad::Same).unwrap();
    let o = g.value(out);
    for y in 1..5 {
        for x in 1..5 {
            assert!((o.at3(0, y, x) - 9.0 * c).abs() < 1e-12);
        }
    }
    // Corner sees a 2x2 footprint.
    assert!((o.at3(0, 0, 0) - 4.0 * c).abs() < 1e-12);
}

/// Direct-summation convolution oracle, deliberately index-by-index.
fn conv_oracle(
    x: &Tensor<f64>,
    k: &Tensor<f64>,
    stride: usize,
    pad: usize,
) -> Tensor<f64> {
    let (ci, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (co, kh, kw) = (k.shape()[0], k.shape()[2], k.shape()[3]);
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let mut out = Tensor::zeros(&[co, oh, ow]);
    for o in 0..co {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0;
                for c in 0..ci {
                    for dy in 0..kh {
                        for dx in 0..kw {
                            let iy = (oy * stride + dy) as isize - pad as isize;
                            let ix = (ox * stride + dx) as isize - pad as isize;
                            if iy >= 0 && iy < h as isize && ix >= 0 && ix < w as isize {
                                acc += x.at3(c, iy as usize, ix as usize)
                                    * k.data()[((o * ci + c) * kh + dy) * kw + dx];
                            }
                        }
                    }
                }
                out.set3(o, oy, ox, acc);
            }
        }
    }
    out
}

#[test]
fn conv2d_matches_direct_summation_oracle() {
    for (seed, stride, pad) in [(7u64, 1usize, 1usize), (8, 2, 1), (9, 1, 0)] {
        let x = rand_tensor64(&[3, 7, 9], seed, -1.5, 1.5);
        let k = rand_tensor64(&[4, 3, 3, 3], seed + 100, -1.0, 1.0);
        let want = conv_oracle(&x, &k, stride, pad);
        let mut g = Graph::new();
        let (xi, ki) = (g.constant(x), g.constant(k));
        let out = g.conv2d(xi, ki, stride, Pad::Explicit(pad)).unwrap();
        assert_eq!(g.shape(out), want.shape());
        for (a, b) in g.value(out).data().iter().zip(want.data()) {
            assert!((a - b).abs() < 1e-5, "stride {stride} pad {pad}: {a} vs {b}");
        }
    }
}

#[test]
fn conv2d_non_integral_output_errors() {
    let mut g = Graph::<f32>::new();
    let x = g.constant(Tensor::zeros(&[1, 6, 6]));
    let k = g.constant(Tensor::zeros(&[1, 1, 3, 3]));
    // (6 - 3) % 2 != 0
    assert!(g.conv2d(x, k, 2, Pad::Explicit(0)).is_err());
    // Even kernels are rejected outright.
    let keven = g.constant(Tensor::zeros(&[1, 1, 2, 2]));
    assert!(g.conv2d(x, keven, 1, Pad::Explicit(0)).is_err());
}

// ── softmax ─────────────────────────────────────────────────────────────

#[test]
fn softmax_uniform_on_zero_row() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::zeros(&[2, 4]));
    let y = g.softmax(x, 1).unwrap();
    for &v in g.value(y).data() {
        assert!((v - 0.25).abs() < 1e-12);
    }
}

#[test]
fn softmax_shift_invariance() {
    let x = rand_tensor64(&[3, 5], 11, -3.0, 3.0);
    let shifted = x.map(|v| v + 17.5);
    let mut g = Graph::new();
    let (a, b) = (g.constant(x), g.constant(shifted));
    let (ya, yb) = (g.softmax(a, 1).unwrap(), g.softmax(b, 1).unwrap());
    for (u, v) in g.value(ya).data().iter().zip(g.value(yb).data()) {
        assert!((u - v).abs() < 1e-6);
    }
}

#[test]
fn softmax_analytic_quarter_three_quarters() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::new(vec![1, 2], vec![0.0, 3.0f64.ln()]).unwrap());
    let y = g.softmax(x, 1).unwrap();
    let d = g.value(y).data();
    assert!((d[0] - 0.25).abs() < 1e-12 && (d[1] - 0.75).abs() < 1e-12);
}

// ── group_norm ──────────────────────────────────────────────────────────

#[test]
fn group_norm_constant_input_yields_bias() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::full(&[4, 3, 3], 2.5));
    let gain = g.constant(Tensor::full(&[4], 1.3));
    let bias = g.constant(Tensor::from_fn(&[4], |i| i as f64 * 0.1));
    let y = g.group_norm(x, gain, bias, 2).unwrap();
    let out = g.value(y);
    for c in 0..4 {
        for j in 0..9 {
            // Zero variance: normalized value is 0 up to eps, output = bias.
            assert!((out.data()[c * 9 + j] - c as f64 * 0.1).abs() < 1e-9);
        }
    }
}

#[test]
fn group_norm_zero_mean_unit_gain() {
    let x = rand_tensor64(&[6, 4, 4], 13, -2.0, 2.0);
    let mut g = Graph::new();
    let xi = g.constant(x);
    let gain = g.constant(Tensor::full(&[6], 1.0));
    let bias = g.constant(Tensor::zeros(&[6]));
    let y = g.group_norm(xi, gain, bias, 3).unwrap();
    let out = g.value(y);
    for grp in 0..3 {
        let lo = grp * 2 * 16;
        let n = 2 * 16;
        let mean: f64 = out.data()[lo..lo + n].iter().sum::<f64>() / n as f64;
        assert!(mean.abs() <= 1e-5);
    }
}

#[test]
fn group_norm_matches_formula_oracle() {
    let x = rand_tensor64(&[4, 3, 5], 17, -1.0, 3.0);
    let gain = rand_tensor64(&[4], 18, 0.5, 1.5);
    let bias = rand_tensor64(&[4], 19, -0.5, 0.5);
    let groups = 2;
    // Explicit mean/var formula oracle.
    let (c, hw) = (4, 15);
    let cpg = c / groups;
    let mut want = vec![0.0f64; c * hw];
    for grp in 0..groups {
        let vals: Vec<f64> = (0..cpg * hw)
            .map(|j| x.data()[grp * cpg * hw + j])
            .collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
        for (j, &v) in vals.iter().enumerate() {
            let ch = grp * cpg + j / hw;
            want[grp * cpg * hw + j] =
                (v - mean) / (var + 1e-5).sqrt() * gain.data()[ch] + bias.data()[ch];
        }
    }
    let mut g = Graph::new();
    let (xi, gi, bi) = (g.constant(x), g.constant(gain), g.constant(bias));
    let y = g.group_norm(xi, gi, bi, groups).unwrap();
    for (a, b) in g.value(y).data().iter().zip(&want) {
        assert!((a - b).abs() < 1e-5);
    }
}

#[test]
fn group_norm_indivisible_errors() {
    let mut g = Graph::<f32>::new();
    let x = g.constant(Tensor::zeros(&[5, 2, 2]));
    let gain = g.constant(Tensor::zeros(&[5]));
    let bias = g.constant(Tensor::zeros(&[5]));
    assert!(g.group_norm(x, gain, bias, 2).is_err());
}

// ── backward ────────────────────────────────────────────────────────────

#[test]
fn backward_sum_gives_ones() {
    let mut g = Graph::<f64>::new();
    let x = g.leaf(rand_tensor64(&[3, 4], 21, -1.0, 1.0), true);
    let loss = g.sum_all(x);
    g.backward(loss).unwrap();
    assert!(g.grad(x).unwrap().data().iter().all(|&v| v == 1.0));
}

#[test]
fn backward_matmul_matches_finite_differences() {
    let x0 = rand_tensor64(&[3, 4], 22, -1.0, 1.0);
    let y0 = rand_tensor64(&[4, 2], 23, -1.0, 1.0);
    let rep = finite_diff_check_backward(
        |g, x| {
            let y = g.constant(y0.clone());
            let mm = g.matmul(x, y)?;
            Ok(g.sum_all(mm))
        },
        &x0,
        1e-4,
    )
    .unwrap();
    assert!(rep.pass, "rel err {}", rep.max_rel_err);
}

#[test]
fn backward_unreachable_leaf_gets_zero_grad() {
    let mut g = Graph::<f64>::new();
    let x = g.leaf(rand_tensor64(&[2, 2], 24, -1.0, 1.0), true);
    let detached = g.leaf(rand_tensor64(&[2, 2], 25, -1.0, 1.0), true);
    let loss = g.sum_all(x);
    g.backward(loss).unwrap();
    let zero = g.grad(detached).unwrap();
    assert!(zero.data().iter().all(|&v| v == 0.0));
}

#[test]
fn backward_rejects_non_scalar_loss() {
    let mut g = Graph::<f64>::new();
    let x = g.leaf(rand_tensor64(&[2, 2], 26, -1.0, 1.0), true);
    assert!(g.backward(x).is_err());
}

#[test]
fn backward_rejects_second_pass() {
    let mut g = Graph::<f64>::new();
    let x = g.leaf(rand_tensor64(&[2, 2], 27, -1.0, 1.0), true);
    let loss = g.sum_all(x);
    g.backward(loss).unwrap();
    assert!(g.backward(loss).is_err());
}

// ── finite_diff_check ───────────────────────────────────────────────────

#[test]
fn finite_diff_exact_for_linear() {
    let x = rand_tensor64(&[6], 31, -1.0, 1.0);
    let w = rand_tensor64(&[6], 32, -2.0, 2.0);
    let analytic = w.clone();
    let rep = finite_diff_check(
        |p| {
            Ok(p.data()
                .iter()
                .zip(w.data())
                .map(|(&a, &b)| a * b)
                .sum::<f64>())
        },
        &x,
        &analytic,
        1e-9,
    )
    .unwrap();
    assert!(rep.pass, "rel err {}", rep.max_rel_err);
}

#[test]
fn finite_diff_softmax_matmul_composite() {
    let x = rand_tensor64(&[3, 4], 33, -1.0, 1.0);
    let w = rand_tensor64(&[4, 4], 34, -1.0, 1.0);
    let probe = rand_tensor64(&[3, 4], 35, -1.0, 1.0);
    let rep = finite_diff_check_backward(
        |g, xid| {
            let wi = g.constant(w.clone());
            let mm = g.matmul(xid, wi)?;
            let sm = g.softmax(mm, 1)?;
            let pi = g.constant(probe.clone());
            let weighted = g.mul(sm, pi)?;
            Ok(g.sum_all(weighted))
        },
        &x,
        1e-6,
    )
    .unwrap();
    assert!(rep.pass, "rel err {}", rep.max_rel_err);
}

#[test]
fn finite_diff_detects_corrupted_gradient() {
    let x = rand_tensor64(&[5], 36, 0.5, 1.5);
    let w = rand_tensor64(&[5], 37, 0.5, 1.5);
    let corrupted = w.map(|v| v * 1.01);
    let rep = finite_diff_check(
        |p| {
            Ok(p.data()
                .iter()
                .zip(w.data())
                .map(|(&a, &b)| a * b)
                .sum::<f64>())
        },
        &x,
        &corrupted,
        1e-4,
    )
    .unwrap();
    assert!(!rep.pass);
}

// ── per-op gradient sweep ───────────────────────────────────────────────

/// Runs one op builder at both precisions: a 64-bit self-check at 1e-6 and
/// the 32-bit backward against 64-bit differences at 1e-4.
macro_rules! fd_case {
    ($name:expr, $x:expr, |$g:ident, $id:ident| $body:block) => {{
        let x64: Tensor<f64> = $x;
        let build64 = |$g: &mut Graph<f64>, $id: NodeId| -> crate::error::Result<NodeId> { $body };
        let rep64 = finite_diff_check_backward(&build64, &x64, 1e-6).unwrap();
        assert!(rep64.pass, "{}: f64 rel err {}", $name, rep64.max_rel_err);

        let build32 = |$g: &mut Graph<f32>, $id: NodeId| -> crate::error::Result<NodeId> { $body };
        let mut g32: Graph<f32> = Graph::new();
        let id32 = g32.leaf(x64.cast(), true);
        let loss32 = build32(&mut g32, id32).unwrap();
        g32.backward(loss32).unwrap();
        let grad32: Tensor<f64> = g32.grad(id32).unwrap().cast();
        let rep32 = finite_diff_check(
            |probe: &Tensor<f64>| {
                let mut gg: Graph<f64> = Graph::new();
                let pid = gg.leaf(probe.clone(), false);
                let l = build64(&mut gg, pid)?;
                Ok(gg.value(l).item())
            },
            &x64,
            &grad32,
            1e-4,
        )
        .unwrap();
        assert!(rep32.pass, "{}: f32 rel err {}", $name, rep32.max_rel_err);
    }};
}

#[test]
fn every_op_passes_finite_diff_on_random_shapes() {
    for trial in 0..5u64 {
        let s = trial; // vary shapes a little per trial
        let r = |sh: &[usize], k: u64| rand_tensor64(sh, 1000 + 17 * s + k, -1.2, 1.2);
        let m = 2 + (trial as usize % 3);

        fd_case!("add", r(&[m, 3], 1), |g, x| {
            let b = g.constant(rand_tensor64(&[m, 3], 90 + s, -1.0, 1.0).cast());
            let y = g.add(x, b)?;
            let w = g.constant(rand_tensor64(&[m, 3], 91 + s, -1.0, 1.0).cast());
            let y = g.mul(y, w)?;
            Ok(g.sum_all(y))
        });
        fd_case!("sub_scale", r(&[m, 3], 2), |g, x| {
            let b = g.constant(rand_tensor64(&[m, 3], 92 + s, -1.0, 1.0).cast());
            let y = g.sub(x, b)?;
            let y = g.scale(y, 1.7);
            Ok(g.sum_all(y))
        });
        fd_case!("mul", r(&[m, 4], 3), |g, x| {
            let b = g.constant(rand_tensor64(&[m, 4], 93 + s, -1.0, 1.0).cast());
            let y = g.mul(x, b)?;
            Ok(g.sum_all(y))
        });
        fd_case!("matmul_lhs", r(&[m, 4], 4), |g, x| {
            let b = g.constant(rand_tensor64(&[4, m], 94 + s, -1.0, 1.0).cast());
            let y = g.matmul(x, b)?;
            let w = g.constant(rand_tensor64(&[m, m], 95 + s, -1.0, 1.0).cast());
            let y = g.mul(y, w)?;
            Ok(g.sum_all(y))
        });
        fd_case!("matmul_rhs", r(&[4, m], 5), |g, x| {
            let a = g.constant(rand_tensor64(&[m, 4], 96 + s, -1.0, 1.0).cast());
            let y = g.matmul(a, x)?;
            Ok(g.sum_all(y))
        });
        fd_case!("transpose", r(&[m, 5], 6), |g, x| {
            let y = g.transpose2(x)?;
            let w = g.constant(rand_tensor64(&[5, m], 97 + s, -1.0, 1.0).cast());
            let y = g.mul(y, w)?;
            Ok(g.sum_all(y))
        });
        fd_case!("conv_same", r(&[2, 5, 5], 7), |g, x| {
            let k = g.constant(rand_tensor64(&[3, 2, 3, 3], 98 + s, -0.7, 0.7).cast());
            let y = g.conv2d(x, k, 1, Pad::Same)?;
            let w = g.constant(rand_tensor64(&[3, 5, 5], 99 + s, -1.0, 1.0).cast());
            let y = g.mul(y, w)?;
            Ok(g.sum_all(y))
        });
        fd_case!("conv_kernel_grad", r(&[2, 1, 3, 3], 8), |g, x| {
            let inp = g.constant(rand_tensor64(&[1, 6, 6], 100 + s, -1.0, 1.0).cast());
            let y = g.conv2d(inp, x, 1, Pad::Explicit(0))?;
            Ok(g.sum_all(y))
        });
        fd_case!("conv_stride2", r(&[1, 7, 7], 9), |g, x| {
            let k = g.constant(rand_tensor64(&[2, 1, 3, 3], 101 + s, -0.7, 0.7).cast());
            let y = g.conv2d(x, k, 2, Pad::Explicit(1))?;
            Ok(g.sum_all(y))
        });
        fd_case!("group_norm", r(&[4, 3, 3], 10), |g, x| {
            let gain = g.constant(rand_tensor64(&[4], 102 + s, 0.5, 1.5).cast());
            let bias = g.constant(rand_tensor64(&[4], 103 + s, -0.3, 0.3).cast());
            let y = g.group_norm(x, gain, bias, 2)?;
            let w = g.constant(rand_tensor64(&[4, 3, 3], 104 + s, -1.0, 1.0).cast());
            let y = g.mul(y, w)?;
            Ok(g.sum_all(y))
        });
        fd_case!("group_norm_gain", r(&[4], 11), |g, x| {
            let inp = g.constant(rand_tensor64(&[4, 3, 3], 105 + s, -1.0, 1.0).cast());
            let bias = g.constant(rand_tensor64(&[4], 106 + s, -0.3, 0.3).cast());
            let y = g.group_norm(inp, x, bias, 2)?;
            Ok(g.sum_all(y))
        });
        fd_case!("silu", r(&[m, 6], 12), |g, x| {
            let y = g.silu(x);
            let w = g.constant(rand_tensor64(&[m, 6], 107 + s, -1.0, 1.0).cast());
            let y = g.mul(y, w)?;
            Ok(g.sum_all(y))
        });
        fd_case!("softmax", r(&[m, 5], 13), |g, x| {
            let y = g.softmax(x, 1)?;
            let w = g.constant(rand_tensor64(&[m, 5], 108 + s, -1.0, 1.0).cast());
            let y = g.mul(y, w)?;
            Ok(g.sum_all(y))
        });
        fd_case!("log_softmax", r(&[m, 5], 14), |g, x| {
            let y = g.log_softmax(x, 1)?;
            let w = g.constant(rand_tensor64(&[m, 5], 109 + s, -1.0, 1.0).cast());
            let y = g.mul(y, w)?;
            Ok(g.sum_all(y))
        });
        fd_case!("reshape_concat", r(&[2, 4], 15), |g, x| {
            let y = g.reshape(x, &[1, 8])?;
            let b = g.constant(rand_tensor64(&[1, 8], 110 + s, -1.0, 1.0).cast());
            let y = g.concat0(&[y, b])?;
            let w = g.constant(rand_tensor64(&[2, 8], 111 + s, -1.0, 1.0).cast());
            let y = g.mul(y, w)?;
            Ok(g.sum_all(y))
        });
        fd_case!("max_pool2", r(&[2, 4, 4], 26), |g, x| {
            let y = g.max_pool2(x)?;
            let w = g.constant(rand_tensor64(&[2, 2, 2], 120 + s, -1.0, 1.0).cast());
            let y = g.mul(y, w)?;
            Ok(g.sum_all(y))
        });
        fd_case!("avg_pool2", r(&[2, 4, 4], 16), |g, x| {
            let y = g.avg_pool2(x)?;
            let w = g.constant(rand_tensor64(&[2, 2, 2], 112 + s, -1.0, 1.0).cast());
            let y = g.mul(y, w)?;
            Ok(g.sum_all(y))
        });
        fd_case!("upsample2", r(&[2, 3, 3], 17), |g, x| {
            let y = g.upsample2(x)?;
            let w = g.constant(rand_tensor64(&[2, 6, 6], 113 + s, -1.0, 1.0).cast());
            let y = g.mul(y, w)?;
            Ok(g.sum_all(y))
        });
        fd_case!("mean_all", r(&[3, 4], 18), |g, x| { Ok(g.mean_all(x)) });
        fd_case!("mean_spatial", r(&[3, 4, 2], 19), |g, x| {
            let y = g.mean_spatial(x)?;
            let w = g.constant(rand_tensor64(&[3], 114 + s, -1.0, 1.0).cast());
            let y = g.mul(y, w)?;
            Ok(g.sum_all(y))
        });
        fd_case!("sqrt_elem", rand_tensor64(&[3, 4], 1100 + s, 0.5, 2.0), |g, x| {
            let y = g.sqrt_elem(x);
            let w = g.constant(rand_tensor64(&[3, 4], 115 + s, -1.0, 1.0).cast());
            let y = g.mul(y, w)?;
            Ok(g.sum_all(y))
        });
        fd_case!("clamp01_interior", rand_tensor64(&[3, 4], 1200 + s, 0.05, 0.95), |g, x| {
            let y = g.clamp01(x);
            let w = g.constant(rand_tensor64(&[3, 4], 116 + s, -1.0, 1.0).cast());
            let y = g.mul(y, w)?;
            Ok(g.sum_all(y))
        });
        fd_case!("add_chan", r(&[3, 4, 4], 20), |g, x| {
            let b = g.constant(rand_tensor64(&[3], 117 + s, -1.0, 1.0).cast());
            let y = g.add_chan(x, b)?;
            let w = g.constant(rand_tensor64(&[3, 4, 4], 118 + s, -1.0, 1.0).cast());
            let y = g.mul(y, w)?;
            Ok(g.sum_all(y))
        });
        fd_case!("add_chan_bias", r(&[3], 21), |g, x| {
            let inp = g.constant(rand_tensor64(&[3, 4, 4], 119 + s, -1.0, 1.0).cast());
            let y = g.add_chan(inp, x)?;
            Ok(g.sum_all(y))
        });
    }
}

#[test]
fn forward_is_bit_deterministic() {
    let run = || {
        let mut g = Graph::<f32>::new();
        let x = g.constant(rand_tensor64(&[3, 8, 8], 55, -1.0, 1.0).cast());
        let k = g.constant(rand_tensor64(&[4, 3, 3, 3], 56, -0.5, 0.5).cast());
        let y = g.conv2d(x, k, 1, Pad::Same).unwrap();
        let y = g.silu(y);
        let y = g.avg_pool2(y).unwrap();
        let y = g.reshape(y, &[4, 16]).unwrap();
        let y = g.softmax(y, 1).unwrap();
        g.value(y).data().to_vec()
    };
    let (a, b) = (run(), run());
    assert_eq!(a, b);
    assert!(a.iter().all(|v| v.is_finite()));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    /// Stabilized softmax rows sum to 1 even for magnitudes up to 1e4.
    #[test]
    fn softmax_rows_sum_to_one(vals in proptest::collection::vec(-1.0e4f32..1.0e4, 12)) {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::new(vec![3, 4], vals).unwrap());
        let y = g.softmax(x, 1).unwrap();
        let out = g.value(y);
        prop_assert!(out.all_finite());
        for row in 0..3 {
            let s: f32 = out.data()[row * 4..(row + 1) * 4].iter().sum();
            prop_assert!((s - 1.0).abs() <= 1e-6);
        }
    }

    /// Projection of arbitrary finite inputs through the op set stays finite.
    #[test]
    fn ops_preserve_finiteness(vals in proptest::collection::vec(-100.0f32..100.0, 48)) {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::new(vec![3, 4, 4], vals).unwrap());
        let gain = g.constant(Tensor::full(&[3], 1.0));
        let bias = g.constant(Tensor::zeros(&[3]));
        let y = g.group_norm(x, gain, bias, 3).unwrap();
        let y = g.silu(y);
        let y = g.avg_pool2(y).unwrap();
        let y = g.upsample2(y).unwrap();
        let y = g.clamp01(y);
        prop_assert!(g.value(y).all_finite());
    }
}

// ── tensor value type ───────────────────────────────────────────────────

#[test]
fn tensor_new_rejects_mismatched_data() {
    assert!(Tensor::<f32>::new(vec![2, 3], vec![0.0; 5]).is_err());
    assert!(Tensor::<f32>::new(vec![2, 0], vec![]).is_err());
    assert!(Tensor::<f32>::new(vec![2, 3], vec![0.0; 6]).is_ok());
}

#[test]
fn tensor_cast_roundtrip() {
    let t = Tensor::<f64>::from_fn(&[3, 2], |i| i as f64 * 0.25);
    let back: Tensor<f64> = t.cast::<f32>().cast();
    assert_eq!(t.data(), back.data());
}

#[test]
fn tensor_binary_check() {
    let t = Tensor::<f32>::new(vec![4], vec![0.0, 1.0, 1.0, 0.0]).unwrap();
    assert!(t.is_binary());
    let t = Tensor::<f32>::new(vec![2], vec![0.5, 1.0]).unwrap();
    assert!(!t.is_binary());
}
