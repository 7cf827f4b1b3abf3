use phonebench::autodiff::{AttentionMask, Conv1dSpec, Graph};
use phonebench::rf::{AttnRange, BandMask};
use phonebench::{Error, Tensor};
use proptest::prelude::*;
use rand_distr::{Distribution, StandardNormal};

fn randn(shape: &[usize], seed: u64) -> Tensor {
    let mut r = phonebench::rng::seeded(seed);
    Tensor::from_fn(shape.to_vec(), |_| {
        let z: f64 = StandardNormal.sample(&mut r);
        z
    })
}

fn close(a: &Tensor, b: &Tensor, tol: f64) {
    assert_eq!(a.shape(), b.shape());
    let diff = a.max_abs_diff(b);
    assert!(diff < tol, "max abs diff {diff:e}");
}

fn naive_matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k, n) = (a.dim(0), a.dim(1), b.dim(1));
    Tensor::from_fn([m, n], |idx| {
        let (i, j) = (idx / n, idx % n);
        (0..k).map(|p| a.at(i, p) * b.at(p, j)).sum()
    })
}

#[test]
fn matmul_matches_triple_loop() {
    let a = randn(&[5, 7], 1);
    let b = randn(&[7, 3], 2);
    let mut g = Graph::new();
    let (av, bv) = (g.constant(a.clone()), g.constant(b.clone()));
    let c = g.matmul(av, bv).unwrap();
    close(g.value(c), &naive_matmul(&a, &b), 1e-12);
    let bt = g.constant(b.transpose());
    let c2 = g.matmul_bt(av, bt).unwrap();
    close(g.value(c2), &naive_matmul(&a, &b), 1e-12);
    let bad = g.constant(randn(&[4, 3], 3));
    assert!(matches!(g.matmul(av, bad), Err(Error::Shape { .. })));
}

#[test]
fn conv1d_matches_direct_sum() {
    let (c_in, c_out, t, k, groups, stride, pad) = (4, 6, 11, 3, 2, 2, 1);
    let x = randn(&[c_in, t], 4);
    let w = randn(&[c_out, c_in / groups, k], 5);
    let mut g = Graph::new();
    let (xv, wv) = (g.constant(x.clone()), g.constant(w.clone()));
    let y = g
        .conv1d(xv, wv, Conv1dSpec { stride, padding: pad, groups })
        .unwrap();
    let t_out = (t + 2 * pad - k) / stride + 1;
    let cpg_out = c_out / groups;
    let expected = Tensor::from_fn([c_out, t_out], |idx| {
        let (co, to) = (idx / t_out, idx % t_out);
        let grp = co / cpg_out;
        let mut acc = 0.0;
        for ci in 0..c_in / groups {
            for j in 0..k {
                let pos = (to * stride + j) as i64 - pad as i64;
                if pos >= 0 && (pos as usize) < t {
                    acc += w.data()[(co * (c_in / groups) + ci) * k + j]
                        * x.at(grp * (c_in / groups) + ci, pos as usize);
                }
            }
        }
        acc
    });
    close(g.value(y), &expected, 1e-12);
}

#[test]
fn long_conv1d_matches_direct_sum() {
    let (c, t, k) = (3, 700, 5);
    let x = randn(&[c, t], 6);
    let w = randn(&[c, c, k], 7);
    let mut g = Graph::new();
    let (xv, wv) = (g.constant(x.clone()), g.constant(w.clone()));
    let y = g.conv1d(xv, wv, Conv1dSpec { stride: 1, padding: 2, groups: 1 }).unwrap();
    let expected = Tensor::from_fn([c, t], |idx| {
        let (co, to) = (idx / t, idx % t);
        let mut acc = 0.0;
        for ci in 0..c {
            for j in 0..k {
                let pos = to as i64 + j as i64 - 2;
                if pos >= 0 && (pos as usize) < t {
                    acc += w.data()[(co * c + ci) * k + j] * x.at(ci, pos as usize);
                }
            }
        }
        acc
    });
    close(g.value(y), &expected, 1e-12);
}

#[test]
fn conv1d_identity_kernel_and_empty_output() {
    let x = randn(&[3, 8], 6);
    let mut w = Tensor::zeros([3, 1, 5]);
    for c in 0..3 {
        w.data_mut()[c * 5 + 2] = 1.0;
    }
    let mut g = Graph::new();
    let (xv, wv) = (g.constant(x.clone()), g.constant(w));
    let y = g.conv1d(xv, wv, Conv1dSpec::depthwise(5, 3)).unwrap();
    close(g.value(y), &x, 0.0 + 1e-15);
    let big = g.constant(Tensor::zeros([3, 1, 9]));
    let spec = Conv1dSpec {
        stride: 1,
        padding: 0,
        groups: 3,
    };
    assert!(matches!(g.conv1d(xv, big, spec), Err(Error::EmptyOutput { .. })));
}

#[test]
fn conv2d_matches_direct_sum() {
    let (ci_n, co_n, f, t) = (2, 3, 7, 9);
    let x = randn(&[ci_n, f, t], 7);
    let w = randn(&[co_n, ci_n, 3, 3], 8);
    let mut g = Graph::new();
    let (xv, wv) = (g.constant(x.clone()), g.constant(w.clone()));
    let y = g.conv2d(xv, wv, (2, 2), (1, 1)).unwrap();
    let (fo_n, to_n) = ((f + 2 - 3) / 2 + 1, (t + 2 - 3) / 2 + 1);
    assert_eq!(g.shape(y), &[co_n, fo_n, to_n]);
    let expected = Tensor::from_fn([co_n, fo_n, to_n], |idx| {
        let co = idx / (fo_n * to_n);
        let (fo, to) = ((idx / to_n) % fo_n, idx % to_n);
        let mut acc = 0.0;
        for ci in 0..ci_n {
            for a in 0..3 {
                for b in 0..3 {
                    let (fi, ti) = ((fo * 2 + a) as i64 - 1, (to * 2 + b) as i64 - 1);
                    if fi >= 0 && ti >= 0 && (fi as usize) < f && (ti as usize) < t {
                        acc += w.data()[((co * ci_n + ci) * 3 + a) * 3 + b]
                            * x.data()[(ci * f + fi as usize) * t + ti as usize];
                    }
                }
            }
        }
        acc
    });
    close(g.value(y), &expected, 1e-12);
}

#[test]
fn masked_softmax_matches_explicit_formula() {
    let t = 6;
    let scores = randn(&[2, t, t], 9);
    let mask = BandMask::new(t, AttnRange::Limited(1)).unwrap();
    let mut g = Graph::new();
    let sv = g.constant(scores.clone());
    let p = g.softmax_masked(sv, &mask).unwrap();
    let m = mask.to_matrix();
    let out = g.value(p);
    for h in 0..2 {
        for i in 0..t {
            let row = &scores.data()[(h * t + i) * t..(h * t + i + 1) * t];
            let z: f64 = (0..t).filter(|&j| m[i][j]).map(|j| row[j].exp()).sum();
            for j in 0..t {
                let expected = if m[i][j] { row[j].exp() / z } else { 0.0 };
                assert!((out.data()[(h * t + i) * t + j] - expected).abs() < 1e-12);
            }
        }
    }
}

/// Attention computed the slow way: explicit score matrix, masked softmax, weighted sum.
fn reference_attention(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize, range: AttnRange, valid: usize) -> Tensor {
    let (t, d) = (q.dim(0), q.dim(1));
    let dh = d / heads;
    let mut out = Tensor::zeros([t, d]);
    for h in 0..heads {
        for i in 0..valid {
            let admissible: Vec<usize> = (0..valid).filter(|&j| range.admits(i, j)).collect();
            let scores: Vec<f64> = admissible
                .iter()
                .map(|&j| (0..dh).map(|c| q.at(i, h * dh + c) * k.at(j, h * dh + c)).sum::<f64>() / (dh as f64).sqrt())
                .collect();
            let z: f64 = scores.iter().map(|s| s.exp()).sum();
            for (s, &j) in scores.iter().zip(&admissible) {
                for c in 0..dh {
                    out.data_mut()[i * d + h * dh + c] += s.exp() / z * v.at(j, h * dh + c);
                }
            }
        }
    }
    out
}

#[test]
fn fused_attention_matches_reference() {
    let (q, k, v) = (randn(&[9, 8], 10), randn(&[9, 8], 11), randn(&[9, 8], 12));
    for (range, valid, heads) in [
        (AttnRange::Unlimited, 9, 2),
        (AttnRange::Limited(0), 9, 4),
        (AttnRange::Limited(2), 7, 2),
        (AttnRange::Limited(20), 9, 1),
    ] {
        let mut g = Graph::new();
        let (qv, kv, vv) = (g.constant(q.clone()), g.constant(k.clone()), g.constant(v.clone()));
        let y = g.attention(qv, kv, vv, heads, AttentionMask::new(range, valid)).unwrap();
        close(g.value(y), &reference_attention(&q, &k, &v, heads, range, valid), 1e-12);
    }
}

#[test]
fn long_attention_agrees_across_graph_modes() {
    let t = 300;
    let (q, k, v) = (randn(&[t, 8], 13), randn(&[t, 8], 14), randn(&[t, 8], 15));
    for (range, valid, heads) in [
        (AttnRange::Unlimited, t, 2),
        (AttnRange::Unlimited, 261, 1),
        (AttnRange::Limited(40), 290, 2),
        (AttnRange::Limited(150), t, 4),
    ] {
        let expected = reference_attention(&q, &k, &v, heads, range, valid);
        let mut g = Graph::inference();
        let (qv, kv, vv) = (g.constant(q.clone()), g.constant(k.clone()), g.constant(v.clone()));
        let y = g.attention(qv, kv, vv, heads, AttentionMask::new(range, valid)).unwrap();
        close(g.value(y), &expected, 1e-12);
        let mut g = Graph::new();
        let (qv, kv, vv) = (g.param(q.clone()), g.param(k.clone()), g.param(v.clone()));
        let y = g.attention(qv, kv, vv, heads, AttentionMask::new(range, valid)).unwrap();
        close(g.value(y), &expected, 1e-12);
    }
}

#[test]
fn layer_and_batch_norm_match_formulas() {
    let x = randn(&[4, 10], 13);
    let gamma = randn(&[10], 14);
    let beta = randn(&[10], 15);
    let mut g = Graph::new();
    let (xv, gv, bv) = (g.constant(x.clone()), g.constant(gamma.clone()), g.constant(beta.clone()));
    let y = g.layer_norm(xv, gv, bv, 1e-5).unwrap();
    for i in 0..4 {
        let row = x.row(i);
        let mu = row.iter().sum::<f64>() / 10.0;
        let var = row.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / 10.0;
        for j in 0..10 {
            let e = (row[j] - mu) / (var + 1e-5).sqrt() * gamma.data()[j] + beta.data()[j];
            assert!((g.value(y).at(i, j) - e).abs() < 1e-12);
        }
    }

    let x = randn(&[3, 8], 16);
    let gb = g.constant(Tensor::full([3], 2.0));
    let bb = g.constant(Tensor::full([3], 0.5));
    let xv = g.constant(x.clone());
    let valid = 5;
    let (y, stats) = g.batch_norm_train(xv, gb, bb, 1e-5, valid).unwrap();
    for c in 0..3 {
        let row = &x.row(c)[..valid];
        let mu = row.iter().sum::<f64>() / valid as f64;
        let var = row.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / valid as f64;
        assert!((stats.mean[c] - mu).abs() < 1e-12);
        assert!((stats.var[c] - var).abs() < 1e-12);
        for t in 0..valid {
            let e = 2.0 * (row[t] - mu) / (var + 1e-5).sqrt() + 0.5;
            assert!((g.value(y).at(c, t) - e).abs() < 1e-12);
        }
    }
    let y2 = g
        .batch_norm_infer(xv, &stats.mean, &stats.var, gb, bb, 1e-5)
        .unwrap();
    for c in 0..3 {
        for t in 0..valid {
            assert!((g.value(y2).at(c, t) - g.value(y).at(c, t)).abs() < 1e-12);
        }
    }
    assert!(matches!(
        g.batch_norm_infer(xv, &[0.0; 3], &[1.0, -1.0, 1.0], gb, bb, 1e-5),
        Err(Error::InvalidStatistics(_))
    ));
}

#[test]
fn cross_entropy_matches_logsumexp() {
    let logits = randn(&[5, 4], 17);
    let labels = [0, 3, 1, 1, 2];
    let mut g = Graph::new();
    let lv = g.constant(logits.clone());
    let loss = g.cross_entropy(lv, &labels).unwrap();
    let expected = (0..5)
        .map(|i| {
            let row = logits.row(i);
            row.iter().map(|v| v.exp()).sum::<f64>().ln() - row[labels[i]]
        })
        .sum::<f64>()
        / 5.0;
    assert!((g.value(loss).item() - expected).abs() < 1e-12);
    let uniform = g.constant(Tensor::zeros([3, 37]));
    let l = g.cross_entropy(uniform, &[0, 5, 36]).unwrap();
    assert!((g.value(l).item() - 37f64.ln()).abs() < 1e-12);
    assert!(matches!(g.cross_entropy(uniform, &[0, 37, 1]), Err(Error::Label { frame: 1, .. })));
}

#[test]
fn backward_contract() {
    let mut g = Graph::new();
    let x = g.param(Tensor::new([3], vec![1.0, -2.0, 3.0]).unwrap());
    let y = g.mul(x, x).unwrap();
    assert!(matches!(g.backward(y), Err(Error::NonScalarSeed(_))));
    let s = g.sum(y).unwrap();
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[2.0, -4.0, 6.0]);
    assert!(matches!(g.backward(s), Err(Error::BackwardTwice)));
    g.zero_grad();
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[2.0, -4.0, 6.0]);
}

#[test]
fn non_finite_values_are_rejected() {
    let mut g = Graph::new();
    let x = g.param(Tensor::new([2], vec![1e308, 1e308]).unwrap());
    let err = g.add(x, x).unwrap_err();
    assert!(matches!(err, Error::NonFinite { op: "add" }));
}

#[test]
fn inference_graph_keeps_no_gradients() {
    let mut g = Graph::inference();
    assert!(!g.is_recording());
    let x = g.param(Tensor::full([2], 1.0));
    let s = g.sum(x).unwrap();
    assert_eq!(g.value(s).item(), 2.0);
    assert!(g.grad(x).is_none());
}

#[test]
fn zero_tail_is_masking() {
    let x = randn(&[3, 6], 18);
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let z = g.zero_tail(xv, 1, 4).unwrap();
    for c in 0..3 {
        assert_eq!(&g.value(z).row(c)[..4], &x.row(c)[..4]);
        assert!(g.value(z).row(c)[4..].iter().all(|&v| v == 0.0));
    }
    assert_eq!(g.zero_tail(xv, 1, 6).unwrap(), xv);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn band_mask_matches_definition(t in 1usize..20, r in 0usize..25) {
        let m = BandMask::new(t, AttnRange::Limited(r)).unwrap();
        let brute = (0..t).flat_map(|i| (0..t).map(move |j| (i, j))).filter(|&(i, j)| i.abs_diff(j) <= r).count();
        prop_assert_eq!(m.admissible_count(), brute);
        for i in 0..t {
            let (lo, hi) = m.row_bounds(i);
            prop_assert!(lo <= i && i < hi);
            prop_assert_eq!(hi - lo, (0..t).filter(|&j| i.abs_diff(j) <= r).count());
        }
        if r + 1 >= t {
            prop_assert_eq!(m.to_matrix(), BandMask::new(t, AttnRange::Unlimited).unwrap().to_matrix());
        }
    }

    #[test]
    fn wide_band_attention_equals_unlimited(t in 2usize..12, seed in 0u64..1000) {
        let (q, k, v) = (randn(&[t, 4], seed), randn(&[t, 4], seed + 1), randn(&[t, 4], seed + 2));
        let mut g = Graph::new();
        let (qv, kv, vv) = (g.constant(q), g.constant(k), g.constant(v));
        let a = g.attention(qv, kv, vv, 2, AttentionMask::new(AttnRange::Limited(t), t)).unwrap();
        let b = g.attention(qv, kv, vv, 2, AttentionMask::new(AttnRange::Unlimited, t)).unwrap();
        prop_assert_eq!(g.value(a), g.value(b));
    }

    #[test]
    fn sum_gradient_is_ones(rows in 1usize..6, cols in 1usize..6, seed in 0u64..1000) {
        let mut g = Graph::new();
        let x = g.param(randn(&[rows, cols], seed));
        let s = g.sum(x).unwrap();
        g.backward(s).unwrap();
        prop_assert!(g.grad(x).unwrap().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn matmul_distributes_over_addition(m in 1usize..5, k in 1usize..5, n in 1usize..5, seed in 0u64..1000) {
        let (a, b, c) = (randn(&[m, k], seed), randn(&[k, n], seed + 1), randn(&[k, n], seed + 2));
        let mut g = Graph::new();
        let (av, bv, cv) = (g.constant(a), g.constant(b), g.constant(c));
        let bc = g.add(bv, cv).unwrap();
        let lhs = g.matmul(av, bc).unwrap();
        let ab = g.matmul(av, bv).unwrap();
        let ac = g.matmul(av, cv).unwrap();
        let rhs = g.add(ab, ac).unwrap();
        prop_assert!(g.value(lhs).max_abs_diff(g.value(rhs)) < 1e-12);
    }
}
