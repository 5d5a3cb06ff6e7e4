use rand::seq::index;

use crate::autodiff::{Graph, ParamStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::rng::{self, Rng};
use crate::scalar::{c, Scalar};

/// Per-query max-minus-mean measurement and the selected query set.
#[derive(Clone, Debug, PartialEq)]
pub struct SparsityScores {
    pub scores: Vec<f64>,
    /// Key indices the scores were computed against, ascending.
    pub sampled_keys: Vec<usize>,
}

impl SparsityScores {
    /// Indices of the `u` largest scores (ties to the lower index), ascending.
    pub fn top(&self, u: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.scores.len()).collect();
        order.sort_by(|&a, &b| self.scores[b].total_cmp(&self.scores[a]).then(a.cmp(&b)));
        order.truncate(u.min(self.scores.len()));
        order.sort_unstable();
        order
    }
}

/// `min(⌈factor · ln len⌉, len)`, at least 1.
pub fn probsparse_count(factor: f64, len: usize) -> usize {
    let n = (factor * (len as f64).ln()).ceil();
    (n.max(1.0) as usize).min(len.max(1))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum AttentionKind {
    Full,
    ProbSparse { factor: f64 },
}

fn dims<T: Scalar>(q: &Tensor<T>, k: &Tensor<T>) -> Result<(usize, usize, usize)> {
    let (sq, sk) = (q.shape(), k.shape());
    if sq.len() != 2 || sk.len() != 2 || sq[1] != sk[1] {
        return Err(Error::Shape {
            op: "attention",
            lhs: sq.to_vec(),
            rhs: sk.to_vec(),
        });
    }
    Ok((sq[0], sk[0], sq[1]))
}

/// Scores every query against `sample_size` keys drawn without replacement
/// (all keys when `sample_size == L_K`).
pub fn sparsity_scores<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    sample_size: usize,
    rng: &mut Rng,
) -> Result<SparsityScores> {
    let (lq, lk, dk) = dims(q, k)?;
    if sample_size == 0 || sample_size > lk {
        return Err(Error::invalid(format!("sample size {sample_size} outside 1..={lk}")));
    }
    let sampled_keys = if sample_size == lk {
        (0..lk).collect()
    } else {
        let mut v = index::sample(rng, lk, sample_size).into_vec();
        v.sort_unstable();
        v
    };
    let scale = 1.0 / (dk as f64).sqrt();
    let scores = (0..lq)
        .map(|i| {
            let qi = q.row(i);
            let mut max = f64::NEG_INFINITY;
            let mut sum = 0.0;
            for &j in &sampled_keys {
                let s = qi.iter().zip(k.row(j)).map(|(a, b)| a.to_f64_lossy() * b.to_f64_lossy()).sum::<f64>() * scale;
                max = max.max(s);
                sum += s;
            }
            max - sum / sampled_keys.len() as f64
        })
        .collect();
    Ok(SparsityScores { scores, sampled_keys })
}

fn causal_limits(rows: impl Iterator<Item = usize>, lk: usize) -> Vec<usize> {
    rows.map(|i| (i + 1).min(lk)).collect()
}

/// Exact `softmax(QKᵀ/√d_k)·V`, optionally causal (query `i` sees keys `..=i`).
pub fn full_attention<T: Scalar>(g: &mut Graph<T>, q: Var, k: Var, v: Var, causal: bool) -> Result<Var> {
    let (lq, lk, dk) = dims(g.value(q), g.value(k))?;
    if g.shape(v).first() != Some(&lk) {
        return Err(Error::Shape {
            op: "attention",
            lhs: g.shape(k).to_vec(),
            rhs: g.shape(v).to_vec(),
        });
    }
    let s = g.matmul_nt(q, k)?;
    let s = g.scale(s, c(1.0 / (dk as f64).sqrt()))?;
    let limits = causal.then(|| causal_limits(0..lq, lk));
    let p = g.softmax_limited(s, limits.as_deref())?;
    g.matmul(p, v)
}

/// Exact attention for the `u` top-scoring queries; every other query gets
/// the mean of `V` over the keys it may attend to.
pub fn probsparse_attention<T: Scalar>(
    g: &mut Graph<T>,
    q: Var,
    k: Var,
    v: Var,
    u: usize,
    sample_size: usize,
    causal: bool,
) -> Result<Var> {
    let (lq, lk, dk) = dims(g.value(q), g.value(k))?;
    if u == 0 || u > lq {
        return Err(Error::invalid(format!("probsparse u = {u} outside 1..={lq}")));
    }
    if g.shape(v).first() != Some(&lk) {
        return Err(Error::Shape {
            op: "attention",
            lhs: g.shape(k).to_vec(),
            rhs: g.shape(v).to_vec(),
        });
    }
    let scores = {
        let (qt, kt) = (g.value(q).clone(), g.value(k).clone());
        match g.rng_mut() {
            Some(r) => sparsity_scores(&qt, &kt, sample_size, r)?,
            // graphs without an RNG still sample reproducibly
            None => sparsity_scores(&qt, &kt, sample_size, &mut rng::stream(0, &[lq as u64, lk as u64]))?,
        }
    };
    let selected = scores.top(u);
    let base = g.cum_mean_rows(v, lq, causal)?;
    let qs = g.gather_rows(q, &selected)?;
    let s = g.matmul_nt(qs, k)?;
    let s = g.scale(s, c(1.0 / (dk as f64).sqrt()))?;
    let limits = causal.then(|| causal_limits(selected.iter().copied(), lk));
    let p = g.softmax_limited(s, limits.as_deref())?;
    let rows = g.matmul(p, v)?;
    g.scatter_rows(base, rows, &selected)
}

#[derive(Clone, Debug)]
pub struct HeadProjection {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
}

/// Multi-head attention with per-head projections `{name}.head{h}.{q,k,v}`
/// and output projection `{name}.out`.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub heads: Vec<HeadProjection>,
    pub out: Linear,
    pub kind: AttentionKind,
    pub causal: bool,
}

impl MultiHeadAttention {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        d: usize,
        n_heads: usize,
        kind: AttentionKind,
        causal: bool,
        rng: &mut Rng,
    ) -> Result<Self> {
        if n_heads == 0 || d % n_heads != 0 {
            return Err(Error::Config(vec![format!(
                "model width {d} is not divisible by {n_heads} heads"
            )]));
        }
        let dk = d / n_heads;
        let heads = (0..n_heads)
            .map(|h| {
                let p = format!("{name}.head{h}");
                Ok(HeadProjection {
                    q: Linear::new(store, &format!("{p}.q"), d, dk, rng)?,
                    k: Linear::new(store, &format!("{p}.k"), d, dk, rng)?,
                    v: Linear::new(store, &format!("{p}.v"), d, dk, rng)?,
                })
            })
            .collect::<Result<_>>()?;
        let out = Linear::new(store, &format!("{name}.out"), d, d, rng)?;
        Ok(Self {
            heads,
            out,
            kind,
            causal,
        })
    }

    /// Projects, runs `attn(q, k, v)` per head, concatenates and projects out.
    pub fn forward_with<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x_query: Var,
        x_kv: Var,
        attn: &mut dyn FnMut(&mut Graph<T>, Var, Var, Var) -> Result<Var>,
    ) -> Result<Var> {
        let mut outs = Vec::with_capacity(self.heads.len());
        for h in &self.heads {
            let q = h.q.forward(g, store, x_query)?;
            let k = h.k.forward(g, store, x_kv)?;
            let v = h.v.forward(g, store, x_kv)?;
            outs.push(attn(g, q, k, v)?);
        }
        let cat = g.concat_cols(&outs)?;
        self.out.forward(g, store, cat)
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x_query: Var, x_kv: Var) -> Result<Var> {
        let causal = self.causal;
        match self.kind {
            AttentionKind::Full => {
                self.forward_with(g, store, x_query, x_kv, &mut |g, q, k, v| full_attention(g, q, k, v, causal))
            }
            AttentionKind::ProbSparse { factor } => {
                let u = probsparse_count(factor, g.shape(x_query)[0]);
                let sample = probsparse_count(factor, g.shape(x_kv)[0]);
                self.forward_with(g, store, x_query, x_kv, &mut |g, q, k, v| {
                    probsparse_attention(g, q, k, v, u, sample, causal)
                })
            }
        }
    }
}
