use super::*;
use crate::autodiff::{grad_check, grad_check_params, Mode};
use crate::rng;
use rand::Rng as _;

fn random(seed: u64, rows: usize, cols: usize) -> Tensor<f64> {
    let mut r = rng::seeded(seed);
    Tensor::from_fn(vec![rows, cols], |_| r.gen_range(-1.5..1.5))
}

/// Plain-loop softmax attention, optionally causal.
fn naive_attention(q: &Tensor<f64>, k: &Tensor<f64>, v: &Tensor<f64>, causal: bool) -> Tensor<f64> {
    let (lq, dk, dv) = (q.rows(), q.cols(), v.cols());
    let mut out = Tensor::zeros(vec![lq, dv]);
    for i in 0..lq {
        let n = if causal { (i + 1).min(k.rows()) } else { k.rows() };
        let s: Vec<f64> = (0..n)
            .map(|j| (0..dk).map(|t| q.at(i, t) * k.at(j, t)).sum::<f64>() / (dk as f64).sqrt())
            .collect();
        let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = s.iter().map(|x| (x - m).exp()).collect();
        let z: f64 = e.iter().sum();
        for j in 0..n {
            for t in 0..dv {
                out.set(i, t, out.at(i, t) + e[j] / z * v.at(j, t));
            }
        }
    }
    out
}

fn run(
    q: &Tensor<f64>,
    k: &Tensor<f64>,
    v: &Tensor<f64>,
    f: impl FnOnce(&mut Graph<f64>, Var, Var, Var) -> Result<Var>,
) -> Result<Tensor<f64>> {
    let mut g = Graph::new(Mode::Eval).with_rng(rng::seeded(99));
    let (qv, kv, vv) = (g.constant(q.clone()), g.constant(k.clone()), g.constant(v.clone()));
    let o = f(&mut g, qv, kv, vv)?;
    Ok(g.value(o).clone())
}

fn max_diff(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn full_attention_matches_loop_oracle() {
    for causal in [false, true] {
        let (q, k, v) = (random(1, 5, 3), random(2, 5, 3), random(3, 5, 2));
        let out = run(&q, &k, &v, |g, q, k, v| full_attention(g, q, k, v, causal)).unwrap();
        assert!(max_diff(&out, &naive_attention(&q, &k, &v, causal)) < 1e-12);
    }
}

#[test]
fn full_attention_trivial_cases() {
    let (q, k, v) = (random(1, 1, 2), random(2, 1, 2), random(3, 1, 3));
    assert_eq!(run(&q, &k, &v, |g, q, k, v| full_attention(g, q, k, v, false)).unwrap().data(), v.data());

    let k = Tensor::from_fn(vec![4, 2], |i| [0.3, -0.7][i % 2]);
    let v = random(4, 4, 2);
    let out = run(&random(5, 3, 2), &k, &v, |g, q, k, v| full_attention(g, q, k, v, false)).unwrap();
    for i in 0..3 {
        for t in 0..2 {
            let mean = (0..4).map(|j| v.at(j, t)).sum::<f64>() / 4.0;
            assert!((out.at(i, t) - mean).abs() < 1e-12);
        }
    }
}

#[test]
fn full_attention_three_by_three_by_hand() {
    // d_k = 1 so the scale is 1; q = [0, ln 2, ln 3]ᵀ... kept one-dimensional
    let l2 = 2f64.ln();
    let q = Tensor::new(vec![3, 1], vec![0.0, 1.0, 1.0]).unwrap();
    let k = Tensor::new(vec![3, 1], vec![0.0, l2, 2.0 * l2]).unwrap();
    let v = Tensor::new(vec![3, 1], vec![1.0, 2.0, 3.0]).unwrap();
    let out = run(&q, &k, &v, |g, q, k, v| full_attention(g, q, k, v, false)).unwrap();
    // row 0: uniform → 2; rows 1,2: weights 1:2:4 → (1 + 4 + 12) / 7
    assert!((out.data()[0] - 2.0).abs() < 1e-12);
    assert!((out.data()[1] - 17.0 / 7.0).abs() < 1e-12);
    assert!((out.data()[2] - 17.0 / 7.0).abs() < 1e-12);
}

#[test]
fn shape_mismatch_is_an_error() {
    let (q, k, v) = (random(1, 3, 2), random(2, 3, 3), random(3, 3, 2));
    assert!(run(&q, &k, &v, |g, q, k, v| full_attention(g, q, k, v, false)).is_err());
    let (k, v) = (random(2, 3, 2), random(3, 4, 2));
    assert!(run(&q, &k, &v, |g, q, k, v| full_attention(g, q, k, v, false)).is_err());
}

#[test]
fn probsparse_degenerates_to_full_attention() {
    for l in 2..=16 {
        for dk in [1, 2, 4, 8] {
            for causal in [false, true] {
                let seed = (l * 100 + dk) as u64;
                let (q, k, v) = (random(seed, l, dk), random(seed + 1, l, dk), random(seed + 2, l, dk));
                let full = run(&q, &k, &v, |g, q, k, v| full_attention(g, q, k, v, causal)).unwrap();
                let sparse = run(&q, &k, &v, |g, q, k, v| probsparse_attention(g, q, k, v, l, l, causal)).unwrap();
                assert!(max_diff(&full, &sparse) < 1e-12, "L={l} dk={dk} causal={causal}");
            }
        }
    }
}

#[test]
fn probsparse_u3_on_eight_by_eight() {
    for causal in [false, true] {
        let (q, k, v) = (random(10, 8, 8), random(11, 8, 8), random(12, 8, 8));
        let sparse = run(&q, &k, &v, |g, q, k, v| probsparse_attention(g, q, k, v, 3, 8, causal)).unwrap();
        let full = naive_attention(&q, &k, &v, causal);
        let selected = sparsity_scores(&q, &k, 8, &mut rng::seeded(0)).unwrap().top(3);
        assert_eq!(selected.len(), 3);
        for i in 0..8 {
            for t in 0..8 {
                let want = if selected.contains(&i) {
                    full.at(i, t)
                } else {
                    let n = if causal { i + 1 } else { 8 };
                    (0..n).map(|j| v.at(j, t)).sum::<f64>() / n as f64
                };
                assert!((sparse.at(i, t) - want).abs() < 1e-12, "row {i} causal={causal}");
            }
        }
    }
}

#[test]
fn probsparse_rejects_bad_u() {
    let (q, k, v) = (random(1, 4, 2), random(2, 4, 2), random(3, 4, 2));
    assert!(run(&q, &k, &v, |g, q, k, v| probsparse_attention(g, q, k, v, 0, 4, false)).is_err());
    assert!(run(&q, &k, &v, |g, q, k, v| probsparse_attention(g, q, k, v, 5, 4, false)).is_err());
}

#[test]
fn sparsity_score_cases() {
    let q = Tensor::from_fn(vec![4, 2], |i| [0.5, 1.0][i % 2]);
    let k = random(1, 6, 2);
    let s = sparsity_scores(&q, &k, 6, &mut rng::seeded(0)).unwrap();
    assert!(s.scores.windows(2).all(|w| w[0] == w[1]));
    assert_eq!(s.top(2), vec![0, 1]);

    // query 0 orthogonal to both keys, query 1 aligned with key 0
    let q = Tensor::new(vec![2, 2], vec![0.0, 1.0, 1.0, 0.0]).unwrap();
    let k = Tensor::new(vec![2, 2], vec![2.0, 0.0, -1.0, 0.0]).unwrap();
    let s = sparsity_scores(&q, &k, 2, &mut rng::seeded(0)).unwrap();
    assert_eq!(s.scores[0], 0.0);
    // scores 2/√2 and -1/√2: max - mean = 1.5/√2
    assert!((s.scores[1] - 1.5 / 2f64.sqrt()).abs() < 1e-12);
    assert_eq!(s.top(1), vec![1]);

    let (q, k) = (random(3, 7, 3), random(4, 9, 3));
    let s = sparsity_scores(&q, &k, 9, &mut rng::seeded(0)).unwrap();
    for i in 0..7 {
        let dots: Vec<f64> = (0..9)
            .map(|j| (0..3).map(|t| q.at(i, t) * k.at(j, t)).sum::<f64>() / 3f64.sqrt())
            .collect();
        let want = dots.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - dots.iter().sum::<f64>() / 9.0;
        assert!((s.scores[i] - want).abs() < 1e-12);
    }
    let a = sparsity_scores(&q, &k, 4, &mut rng::seeded(5)).unwrap();
    let b = sparsity_scores(&q, &k, 4, &mut rng::seeded(5)).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.sampled_keys.len(), 4);
    assert!(sparsity_scores(&q, &k, 10, &mut rng::seeded(5)).is_err());
}

#[test]
fn counts_follow_log_rule() {
    assert_eq!(probsparse_count(5.0, 96), 23);
    assert_eq!(probsparse_count(5.0, 8), 8);
    assert_eq!(probsparse_count(5.0, 1), 1);
    assert_eq!(probsparse_count(5.0, 2048), 39);
}

#[test]
fn attention_rows_stay_in_convex_hull() {
    let (q, k, v) = (random(20, 9, 4), random(21, 9, 4), random(22, 9, 3));
    let out = run(&q, &k, &v, |g, q, k, v| full_attention(g, q, k, v, false)).unwrap();
    for t in 0..3 {
        let lo = (0..9).map(|j| v.at(j, t)).fold(f64::INFINITY, f64::min);
        let hi = (0..9).map(|j| v.at(j, t)).fold(f64::NEG_INFINITY, f64::max);
        for i in 0..9 {
            assert!(out.at(i, t) >= lo - 1e-12 && out.at(i, t) <= hi + 1e-12);
        }
    }
}

fn small_shape() -> InformerShape {
    InformerShape {
        d_model: 8,
        n_heads: 2,
        layers: 1,
        ff_hidden: 12,
        conv_kernel: 1,
        dropout: 0.0,
        input_len: 8,
        label_len: 4,
        horizon: 2,
        factor: 5.0,
    }
}

fn perturb(store: &mut ParamStore<f64>, seed: u64, amp: f64) {
    let mut r = rng::seeded(seed);
    for p in store.iter_mut() {
        for v in p.value.data_mut() {
            *v += r.gen_range(-amp..amp);
        }
    }
}

#[test]
fn single_head_identity_projections_reduce_to_attention() {
    let mut store = ParamStore::<f64>::new();
    let mha = MultiHeadAttention::new(&mut store, "a", 3, 1, AttentionKind::Full, false, &mut rng::seeded(1)).unwrap();
    for p in store.iter_mut() {
        let s = p.value.shape().to_vec();
        p.value = if s.len() == 2 {
            Tensor::from_fn(s, |i| if i / 3 == i % 3 { 1.0 } else { 0.0 })
        } else {
            Tensor::zeros(s)
        };
    }
    let x = random(3, 6, 3);
    let mut g = Graph::new(Mode::Eval);
    let xv = g.constant(x.clone());
    let y = mha.forward(&mut g, &store, xv, xv).unwrap();
    assert!(max_diff(g.value(y), &naive_attention(&x, &x, &x, false)) < 1e-12);
}

#[test]
fn head_permutation_symmetry() {
    let (d, heads) = (8, 2);
    let mut store = ParamStore::<f64>::new();
    let mha =
        MultiHeadAttention::new(&mut store, "a", d, heads, AttentionKind::Full, false, &mut rng::seeded(3)).unwrap();
    let x = random(4, 5, d);
    let eval = |store: &ParamStore<f64>| {
        let mut g = Graph::new(Mode::Eval);
        let xv = g.constant(x.clone());
        let y = mha.forward(&mut g, store, xv, xv).unwrap();
        g.value(y).clone()
    };
    let before = eval(&store);
    let mut swapped = store.clone();
    for part in ["q", "k", "v"] {
        for suffix in ["W", "b"] {
            let a = store.id(&format!("a.head0.{part}.{suffix}")).unwrap();
            let b = store.id(&format!("a.head1.{part}.{suffix}")).unwrap();
            *swapped.value_mut(a) = store.value(b).clone();
            *swapped.value_mut(b) = store.value(a).clone();
        }
    }
    let w = store.id("a.out.W").unwrap();
    let dk = d / heads;
    let orig = store.value(w).clone();
    *swapped.value_mut(w) = Tensor::from_fn(vec![d, d], |i| {
        let (r, col) = (i / d, i % d);
        orig.at(r, (col + dk) % d)
    });
    assert!(max_diff(&before, &eval(&swapped)) < 1e-12);
}

#[test]
fn indivisible_heads_is_a_config_error() {
    let mut store = ParamStore::<f64>::new();
    let err = MultiHeadAttention::new(&mut store, "a", 10, 3, AttentionKind::Full, false, &mut rng::seeded(1));
    assert!(matches!(err, Err(Error::Config(_))));
}

#[test]
fn multihead_gradients_match_finite_differences() {
    let mut store = ParamStore::<f64>::new();
    let kind = AttentionKind::ProbSparse { factor: 1.0 };
    let mha = MultiHeadAttention::new(&mut store, "a", 8, 2, kind, true, &mut rng::seeded(7)).unwrap();
    let x = random(8, 6, 8);
    let report = grad_check_params(
        &mut store,
        |g, st| {
            let xv = g.constant(x.clone());
            let y = mha.forward(g, st, xv, xv)?;
            let y = g.mul(y, y)?;
            g.mean(y)
        },
        1e-6,
        None,
    )
    .unwrap();
    assert!(report.max_rel_err < 1e-5, "{report:?}");
}

#[test]
fn zero_weight_encoder_block_is_identity() {
    for l in [4, 16, 64] {
        let mut s = small_shape();
        s.input_len = l;
        let mut store = ParamStore::<f64>::new();
        let block = EncoderBlock::new(&mut store, "informer.enc0", &s, &mut rng::seeded(1)).unwrap();
        for p in store.iter_mut() {
            p.value = Tensor::zeros(p.value.shape().to_vec());
        }
        let x = random(l as u64, l, 8);
        let mut g = Graph::new(Mode::Eval);
        let xv = g.constant(x.clone());
        let y = block.forward(&mut g, &store, xv).unwrap();
        assert_eq!(g.value(y).data(), x.data());
    }
}

#[test]
fn zero_weight_decoder_passes_tokens_through() {
    let s = small_shape();
    let mut store = ParamStore::<f64>::new();
    let core = InformerCore::new(&mut store, &s, &mut rng::seeded(1)).unwrap();
    for p in store.iter_mut() {
        p.value = Tensor::zeros(p.value.shape().to_vec());
    }
    let emb = random(5, 8, 8);
    let mut g = Graph::new(Mode::Eval);
    let ev = g.constant(emb.clone());
    let enc = core.encode(&mut g, &store, ev).unwrap();
    let tokens = core.decoder_tokens(&mut g, ev).unwrap();
    let dec = core.decode(&mut g, &store, tokens, enc).unwrap();
    assert_eq!(g.shape(dec), &[6, 8]);
    let pe = positional_encoding::<f64>(4, 6, 8);
    for i in 0..6 {
        for t in 0..8 {
            let want = if i < 4 { emb.at(4 + i, t) } else { 0.0 } + pe.at(i, t);
            assert_eq!(g.value(dec).at(i, t), want);
        }
    }
}

#[test]
fn label_len_longer_than_input_is_rejected() {
    let mut s = small_shape();
    s.label_len = 9;
    let err = InformerCore::new(&mut ParamStore::<f64>::new(), &s, &mut rng::seeded(1)).unwrap_err();
    assert!(matches!(err, Error::Config(ref v) if v[0].contains("label_len")), "{err}");
}

#[test]
fn decoder_self_attention_is_causal() {
    let s = small_shape();
    let mut store = ParamStore::<f64>::new();
    let block = DecoderBlock::new(&mut store, "informer.dec0", &s, &mut rng::seeded(2)).unwrap();
    perturb(&mut store, 3, 0.2);
    let x = random(6, 7, 8);
    let enc = random(7, 8, 8);
    let eval = |x: &Tensor<f64>| {
        let mut g = Graph::new(Mode::Eval);
        let (xv, ev) = (g.constant(x.clone()), g.constant(enc.clone()));
        let a = block.self_attention.forward(&mut g, &store, xv, xv).unwrap();
        let full = block.forward(&mut g, &store, xv, ev).unwrap();
        (g.value(a).clone(), g.value(full).clone())
    };
    let (base_attn, base_full) = eval(&x);
    for t_prime in 1..7 {
        let mut probe = x.clone();
        for c in 0..8 {
            probe.set(t_prime, c, probe.at(t_prime, c) + 1e-4);
        }
        let (attn, full) = eval(&probe);
        for t in 0..t_prime {
            for c in 0..8 {
                assert_eq!(attn.at(t, c), base_attn.at(t, c), "t={t} t'={t_prime}");
                assert_eq!(full.at(t, c), base_full.at(t, c), "t={t} t'={t_prime}");
            }
        }
        assert_ne!(attn.row(t_prime), base_attn.row(t_prime));
    }
}

#[test]
fn core_end_to_end_gradients() {
    let s = small_shape();
    let mut store = ParamStore::<f64>::new();
    let core = InformerCore::new(&mut store, &s, &mut rng::seeded(4)).unwrap();
    perturb(&mut store, 5, 0.1);
    let emb = random(6, 8, 8);
    let report = grad_check(
        |g, xv| {
            let y = core.forward(g, &store, xv)?;
            assert_eq!(g.shape(y), &[2, 8]);
            let y = g.mul(y, y)?;
            g.mean(y)
        },
        &emb,
        1e-6,
    )
    .unwrap();
    assert!(report.max_rel_err < 1e-5, "{report:?}");
    let report = grad_check_params(
        &mut store,
        |g, st| {
            let xv = g.constant(emb.clone());
            let y = core.forward(g, st, xv)?;
            let y = g.mul(y, y)?;
            g.mean(y)
        },
        1e-6,
        Some(6),
    )
    .unwrap();
    assert!(report.max_rel_err < 1e-5, "{report:?}");
}
