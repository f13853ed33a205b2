use super::*;
use crate::gradcheck::grad_check_inputs_floor;
use crate::rng::SplitMix64;
use alloc::vec::Vec;
use proptest::prelude::*;

fn t(rows: &[&[f64]]) -> Tensor<f64> {
    Tensor::from_rows(rows).unwrap()
}

fn randt(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::randn(shape, 1.0, &mut SplitMix64::new(seed))
}

/// Reduce an arbitrary tensor to a scalar with fixed random weights so that
/// every output element contributes a distinct gradient.
fn weighted_sum(g: &mut Graph<f64>, x: Var, seed: u64) -> Result<Var> {
    let w = randt(g.shape(x), seed);
    let w = g.constant(w);
    let y = g.mul(x, w)?;
    Ok(g.sum(y))
}

#[test]
fn matmul_identity_and_hand_cases() {
    let mut g = Graph::new();
    let i2 = g.constant(t(&[&[1.0, 0.0], &[0.0, 1.0]]));
    let b = g.constant(t(&[&[3.0, 4.0], &[5.0, 6.0]]));
    let c = g.matmul(i2, b).unwrap();
    assert_eq!(g.value(c).data(), &[3.0, 4.0, 5.0, 6.0]);

    let a = g.constant(t(&[&[1.0, 2.0], &[3.0, 4.0]]));
    let ones = g.constant(t(&[&[1.0], &[1.0]]));
    let c = g.matmul(a, ones).unwrap();
    assert_eq!(g.value(c).shape(), &[2, 1]);
    assert_eq!(g.value(c).data(), &[3.0, 7.0]);
}

#[test]
fn matmul_matches_triple_loop() {
    let a = randt(&[3, 4], 1);
    let b = randt(&[4, 2], 2);
    let mut g = Graph::new();
    let (va, vb) = (g.constant(a.clone()), g.constant(b.clone()));
    let c = g.matmul(va, vb).unwrap();
    for i in 0..3 {
        for j in 0..2 {
            let mut s = 0.0;
            for k in 0..4 {
                s += a.at(i, k) * b.at(k, j);
            }
            assert!((g.value(c).at(i, j) - s).abs() < 1e-12);
        }
    }
}

#[test]
fn matmul_shape_mismatch_names_both_shapes() {
    let mut g = Graph::<f64>::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[2, 3]));
    match g.matmul(a, b) {
        Err(Error::Dimension { lhs, rhs, .. }) => {
            assert_eq!(lhs, vec![2, 3]);
            assert_eq!(rhs, vec![2, 3]);
        }
        other => panic!("expected dimension error, got {other:?}"),
    }
}

#[test]
fn softmax_examples() {
    let mut g = Graph::new();
    let x = g.constant(t(&[&[0.0, 0.0], &[core::f64::consts::LN_2, 0.0]]));
    let y = g.softmax_rows(x).unwrap();
    let v = g.value(y).data();
    assert!((v[0] - 0.5).abs() < 1e-15 && (v[1] - 0.5).abs() < 1e-15);
    assert!((v[2] - 2.0 / 3.0).abs() < 1e-15 && (v[3] - 1.0 / 3.0).abs() < 1e-15);
}

#[test]
fn softmax_matches_exp_over_sum() {
    let x = randt(&[1, 5], 9);
    let mut g = Graph::new();
    let vx = g.constant(x.clone());
    let y = g.softmax_rows(vx).unwrap();
    let z: f64 = x.data().iter().map(|v| v.exp()).sum();
    for j in 0..5 {
        assert!((g.value(y).data()[j] - x.data()[j].exp() / z).abs() < 1e-12);
    }
}

#[test]
fn softmax_degenerate_row() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(t(&[&[0.0, 1.0], &[f64::NEG_INFINITY, f64::NEG_INFINITY]]));
    assert_eq!(g.softmax_rows(x), Err(Error::DegenerateRow { row: 1 }));
}

#[test]
fn softmax_respects_neg_inf_mask() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(t(&[&[1.0, 2.0, 3.0]]));
    let mask: Arc<[bool]> = Arc::from(vec![false, true, false]);
    let m = g.masked_fill(x, mask, f64::NEG_INFINITY).unwrap();
    let y = g.softmax_rows(m).unwrap();
    let v = g.value(y).data();
    assert_eq!(v[1], 0.0);
    let e = (1.0f64).exp() + (3.0f64).exp();
    assert!((v[0] - 1.0f64.exp() / e).abs() < 1e-15);
}

#[test]
fn rmsnorm_examples() {
    let mut g = Graph::new();
    let x = g.constant(t(&[&[1.0, 1.0, 1.0, 1.0]]));
    let w = g.constant(Tensor::filled(&[4], 1.0));
    let y = g.rmsnorm(x, w, 0.0).unwrap();
    assert_eq!(g.value(y).data(), &[1.0; 4]);

    let z = g.constant(Tensor::zeros(&[1, 4]));
    let y = g.rmsnorm(z, w, 1e-6).unwrap();
    assert_eq!(g.value(y).data(), &[0.0; 4]);
    // Guarded: zero row with eps = 0 stays zero instead of NaN.
    let y = g.rmsnorm(z, w, 0.0).unwrap();
    assert_eq!(g.value(y).data(), &[0.0; 4]);
}

#[test]
fn rmsnorm_matches_scalar_loop() {
    let x = randt(&[1, 7], 4);
    let w = randt(&[7], 5);
    let mut g = Graph::new();
    let (vx, vw) = (g.constant(x.clone()), g.constant(w.clone()));
    let y = g.rmsnorm(vx, vw, 1e-5).unwrap();
    let mut ms = 0.0;
    for v in x.data() {
        ms += v * v;
    }
    let r = 1.0 / (ms / 7.0 + 1e-5).sqrt();
    for j in 0..7 {
        assert!((g.value(y).data()[j] - x.data()[j] * r * w.data()[j]).abs() < 1e-12);
    }
}

#[test]
fn cross_entropy_examples() {
    let mut g = Graph::<f64>::new();
    let logits = g.constant(Tensor::zeros(&[1, 64]));
    let l = g.cross_entropy(logits, &[5], usize::MAX).unwrap();
    assert!((g.value(l).scalar() - 4.1589).abs() < 1e-4);
    assert!((g.value(l).scalar() - 64f64.ln()).abs() < 1e-12);

    let mut sat = Tensor::zeros(&[1, 8]);
    sat.data_mut()[3] = 1e9;
    let s = g.constant(sat);
    let l = g.cross_entropy(s, &[3], usize::MAX).unwrap();
    assert!(g.value(l).scalar().abs() < 1e-9);

    let none = g.constant(Tensor::zeros(&[2, 8]));
    assert_eq!(g.cross_entropy(none, &[9, 9], 9), Err(Error::EmptyBatch));
    assert!(matches!(
        g.cross_entropy(none, &[8, 0], usize::MAX),
        Err(Error::Vocabulary { .. })
    ));
}

#[test]
fn cross_entropy_matches_logsumexp() {
    let x = randt(&[4, 8], 12);
    let targets = [1usize, 7, 99, 0];
    let mut g = Graph::new();
    let vx = g.constant(x.clone());
    let l = g.cross_entropy(vx, &targets, 99).unwrap();
    let mut want = 0.0;
    for (i, &tg) in targets.iter().enumerate() {
        if tg == 99 {
            continue;
        }
        let row = x.row(i);
        let lse = row.iter().map(|v| v.exp()).sum::<f64>().ln();
        want += lse - row[tg];
    }
    want /= 3.0;
    assert!((g.value(l).scalar() - want).abs() < 1e-10);
}

#[test]
fn cross_entropy_backward_is_softmax_minus_onehot() {
    let x = randt(&[2, 5], 3);
    let mut g = Graph::new();
    let vx = g.input(x.clone(), true);
    let l = g.cross_entropy(vx, &[2, 4], usize::MAX).unwrap();
    g.backward_inputs(l).unwrap();
    let gr = g.grad(vx).unwrap();
    for i in 0..2 {
        let row = x.row(i);
        let z: f64 = row.iter().map(|v| v.exp()).sum();
        for j in 0..5 {
            let onehot = if j == [2, 4][i] { 1.0 } else { 0.0 };
            let want = (row[j].exp() / z - onehot) / 2.0;
            assert!((gr[i * 5 + j] - want).abs() < 1e-14);
        }
    }
}

#[test]
fn grad_check_linear_and_detached() {
    let mut store = ParamStore::<f64>::new();
    let w = store.add("w", randt(&[3, 4], 1)).unwrap();
    let x = randt(&[4, 2], 2);
    let rep = crate::gradcheck::grad_check(&mut store, &[w], 1e-4, |g, s| {
        let vw = g.param(s, w);
        let vx = g.constant(x.clone());
        let y = g.matmul(vw, vx)?;
        Ok(g.sum(y))
    })
    .unwrap();
    assert!(rep.max_rel_err() < 1e-10, "{rep:?}");

    // Gradient through a detached copy is exactly zero.
    store.zero_grad();
    let mut g = Graph::new();
    let vw = g.param(&store, w);
    let d = g.detach(vw);
    let vx = g.constant(x.clone());
    let y = g.matmul(d, vx).unwrap();
    let s = g.sum(y);
    g.backward(s, &mut store).unwrap();
    assert!(store.get(w).grad.iter().all(|&v| v == 0.0));
}

#[test]
fn grad_check_rejects_frozen() {
    let mut store = ParamStore::<f64>::new();
    let w = store.add("w", randt(&[2, 2], 1)).unwrap();
    store.set_frozen(w, true);
    let r = crate::gradcheck::grad_check(&mut store, &[w], 1e-4, |g, s| {
        let v = g.param(s, w);
        Ok(g.sum(v))
    });
    assert!(matches!(r, Err(Error::Contract(_))));
}

#[test]
fn frozen_param_gets_no_gradient() {
    let mut store = ParamStore::<f64>::new();
    let a = store.add("a", randt(&[2, 2], 1)).unwrap();
    let b = store.add("b", randt(&[2, 2], 2)).unwrap();
    store.set_frozen(a, true);
    let mut g = Graph::new();
    let (va, vb) = (g.param(&store, a), g.param(&store, b));
    let c = g.matmul(va, vb).unwrap();
    let s = g.sum(c);
    g.backward(s, &mut store).unwrap();
    assert!(store.get(a).grad.iter().all(|&v| v == 0.0));
    assert!(g.grad(va).is_none());
    assert!(store.get(b).grad.iter().any(|&v| v != 0.0));
}

#[test]
fn batched_qk_pv_match_loops() {
    let (b, h, qr, kr, c) = (2usize, 2usize, 3usize, 4usize, 6usize);
    let hd = c / h;
    let q = randt(&[b * qr, c], 1);
    let k = randt(&[b * kr, c], 2);
    let p = randt(&[b * h * qr, kr], 3);
    let layout = HeadLayout {
        batch: b,
        heads: h,
        q_rows: qr,
        k_rows: kr,
        kv_shared: false,
    };
    let mut g = Graph::new();
    let (vq, vk, vp) = (g.constant(q.clone()), g.constant(k.clone()), g.constant(p.clone()));
    let s = g.batched_qk(vq, vk, layout, 0.5).unwrap();
    let o = g.batched_pv(vp, vk, layout).unwrap();
    for bi in 0..b {
        for hi in 0..h {
            for i in 0..qr {
                for j in 0..kr {
                    let mut want = 0.0;
                    for d in 0..hd {
                        want += q.at(bi * qr + i, hi * hd + d) * k.at(bi * kr + j, hi * hd + d);
                    }
                    let got = g.value(s).at((bi * h + hi) * qr + i, j);
                    assert!((got - 0.5 * want).abs() < 1e-12);
                }
                for d in 0..hd {
                    let mut want = 0.0;
                    for j in 0..kr {
                        want += p.at((bi * h + hi) * qr + i, j) * k.at(bi * kr + j, hi * hd + d);
                    }
                    assert!((g.value(o).at(bi * qr + i, hi * hd + d) - want).abs() < 1e-12);
                }
            }
        }
    }
}

#[test]
fn rope_preserves_pair_norms_and_position_zero() {
    let x = randt(&[3, 8], 7);
    let mut g = Graph::new();
    let vx = g.constant(x.clone());
    let y = g.rope(vx, 3, 2, 10000.0).unwrap();
    let y = g.value(y);
    assert_eq!(y.row(0), x.row(0));
    for r in 0..3 {
        for h in 0..2 {
            for d in 0..2 {
                let (a, b) = (h * 4 + d, h * 4 + d + 2);
                let n0 = x.at(r, a).powi(2) + x.at(r, b).powi(2);
                let n1 = y.at(r, a).powi(2) + y.at(r, b).powi(2);
                assert!((n0 - n1).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn rope_scores_depend_on_relative_offset() {
    // q at position i, k at position j: score depends only on i - j.
    let qv = randt(&[1, 4], 1);
    let kv = randt(&[1, 4], 2);
    let score = |i: usize, j: usize| {
        let mut rows_q = Vec::new();
        let mut rows_k = Vec::new();
        for p in 0..6 {
            rows_q.extend_from_slice(if p == i { qv.data() } else { &[0.0; 4] });
            rows_k.extend_from_slice(if p == j { kv.data() } else { &[0.0; 4] });
        }
        let mut g = Graph::new();
        let q = g.constant(Tensor::new(vec![6, 4], rows_q).unwrap());
        let k = g.constant(Tensor::new(vec![6, 4], rows_k).unwrap());
        let qr = g.rope(q, 6, 1, 10000.0).unwrap();
        let kr = g.rope(k, 6, 1, 10000.0).unwrap();
        let s = g.matmul_nt(qr, kr).unwrap();
        g.value(s).at(i, j)
    };
    assert!((score(3, 1) - score(5, 3)).abs() < 1e-12);
    assert!((score(2, 2) - score(0, 0)).abs() < 1e-12);
}

#[test]
fn forward_is_deterministic() {
    let run = || {
        let mut g = Graph::new();
        let a = g.constant(randt(&[4, 8], 5));
        let b = g.constant(randt(&[8, 3], 6));
        let c = g.matmul(a, b).unwrap();
        let s = g.softmax_rows(c).unwrap();
        g.value(s).clone()
    };
    assert_eq!(run(), run());
}

const H: f64 = 1e-5;
const OP_TOL: f64 = 1e-6;
/// Saturating ops (tanh, silu tails) give gradients near 1e-7 whose central
/// differences carry ~1e-11 truncation error; errors are taken relative to
/// at least this magnitude.
const OP_FLOOR: f64 = 1e-3;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn grad_matmul(seed in 0u64..10_000) {
        let e = grad_check_inputs_floor(OP_FLOOR, &[randt(&[3, 4], seed), randt(&[4, 2], seed + 1)], H, |g, v| {
            let c = g.matmul(v[0], v[1])?;
            weighted_sum(g, c, seed + 2)
        }).unwrap();
        prop_assert!(e < OP_TOL, "{}", e);
    }

    #[test]
    fn grad_matmul_nt_and_transpose(seed in 0u64..10_000) {
        let e = grad_check_inputs_floor(OP_FLOOR, &[randt(&[3, 4], seed), randt(&[5, 4], seed + 1)], H, |g, v| {
            let c = g.matmul_nt(v[0], v[1])?;
            let ct = g.transpose(c)?;
            weighted_sum(g, ct, seed + 2)
        }).unwrap();
        prop_assert!(e < OP_TOL, "{}", e);
    }

    #[test]
    fn grad_elementwise(seed in 0u64..10_000) {
        let e = grad_check_inputs_floor(OP_FLOOR, &[randt(&[2, 5], seed), randt(&[2, 5], seed + 1)], H, |g, v| {
            let a = g.add(v[0], v[1])?;
            let m = g.mul(a, v[0])?;
            let s = g.silu(m);
            let t = g.tanh(s);
            let sc = g.scale(t, 1.7);
            weighted_sum(g, sc, seed + 2)
        }).unwrap();
        prop_assert!(e < OP_TOL, "{}", e);
    }

    #[test]
    fn grad_softmax_masked(seed in 0u64..10_000) {
        let mask: Arc<[bool]> = Arc::from(vec![false, true, false, false, false, false, true, false]);
        let e = grad_check_inputs_floor(OP_FLOOR, &[randt(&[4, 4], seed)], H, move |g, v| {
            let m = g.masked_fill(v[0], mask.clone(), f64::NEG_INFINITY)?;
            let s = g.softmax_rows(m)?;
            weighted_sum(g, s, seed + 1)
        }).unwrap();
        prop_assert!(e < OP_TOL, "{}", e);
    }

    #[test]
    fn grad_rmsnorm(seed in 0u64..10_000) {
        let e = grad_check_inputs_floor(OP_FLOOR, &[randt(&[3, 6], seed), randt(&[6], seed + 1)], H, |g, v| {
            let y = g.rmsnorm(v[0], v[1], 1e-5)?;
            weighted_sum(g, y, seed + 2)
        }).unwrap();
        prop_assert!(e < OP_TOL, "{}", e);
    }

    #[test]
    fn grad_cross_entropy(seed in 0u64..10_000) {
        let e = grad_check_inputs_floor(OP_FLOOR, &[randt(&[4, 6], seed)], H, |g, v| {
            g.cross_entropy(v[0], &[0, 5, 7, 3], 7)
        }).unwrap();
        prop_assert!(e < OP_TOL, "{}", e);
    }

    #[test]
    fn grad_embedding_concat_slice(seed in 0u64..10_000) {
        let e = grad_check_inputs_floor(OP_FLOOR, &[randt(&[5, 4], seed), randt(&[2, 4], seed + 1)], H, |g, v| {
            let emb = g.embedding(v[0], &[3, 1, 3])?;
            let cat = g.concat_rows(&[emb, v[1]])?;
            let sl = g.slice_rows(cat, 1, 3)?;
            let a = g.slice_cols(sl, 0, 2)?;
            let b = g.slice_cols(sl, 2, 2)?;
            let cc = g.concat_cols(&[b, a])?;
            weighted_sum(g, cc, seed + 2)
        }).unwrap();
        prop_assert!(e < OP_TOL, "{}", e);
    }

    #[test]
    fn grad_rope(seed in 0u64..10_000) {
        let e = grad_check_inputs_floor(OP_FLOOR, &[randt(&[6, 8], seed)], H, |g, v| {
            let y = g.rope(v[0], 3, 2, 10000.0)?;
            weighted_sum(g, y, seed + 1)
        }).unwrap();
        prop_assert!(e < OP_TOL, "{}", e);
    }

    #[test]
    fn grad_batched_heads(seed in 0u64..10_000, shared in any::<bool>()) {
        let layout = HeadLayout { batch: 2, heads: 2, q_rows: 3, k_rows: 2, kv_shared: shared };
        let kv_rows = if shared { 2 } else { 4 };
        let inputs = [randt(&[6, 4], seed), randt(&[kv_rows, 4], seed + 1), randt(&[2], seed + 2)];
        let e = grad_check_inputs_floor(OP_FLOOR, &inputs, H, |g, v| {
            let s = g.batched_qk(v[0], v[1], layout, 0.7)?;
            let s = g.scale_heads(s, v[2], layout)?;
            let p = g.softmax_rows(s)?;
            let o = g.batched_pv(p, v[1], layout)?;
            weighted_sum(g, o, seed + 3)
        }).unwrap();
        prop_assert!(e < OP_TOL, "{}", e);
    }

    #[test]
    fn softmax_rows_are_stochastic(rows in proptest::collection::vec(proptest::collection::vec(-50.0f64..50.0, 1..9), 1..6)) {
        let c = rows[0].len();
        let flat: Vec<f64> = rows.iter().flat_map(|r| {
            let mut r = r.clone();
            r.resize(c, 0.0);
            r
        }).collect();
        let n = flat.len() / c;
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![n, c], flat).unwrap());
        let y = g.softmax_rows(x).unwrap();
        for i in 0..n {
            let row = g.value(y).row(i);
            prop_assert!(row.iter().all(|&v| v >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }
}

