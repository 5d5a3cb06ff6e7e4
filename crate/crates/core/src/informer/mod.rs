//! Long-sequence temporal model: ProbSparse multi-head self-attention in an
//! encoder of attention + convolution blocks, and a one-shot decoder that
//! fills zero placeholders for the forecast horizon.

mod attention;

pub use attention::{
    full_attention, probsparse_attention, probsparse_count, sparsity_scores, AttentionKind, HeadProjection,
    MultiHeadAttention, SparsityScores,
};

use crate::autodiff::{Graph, ParamStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::{positional_encoding, Conv1d};
use crate::rng::Rng;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug)]
pub struct InformerShape {
    pub d_model: usize,
    pub n_heads: usize,
    pub layers: usize,
    pub ff_hidden: usize,
    pub conv_kernel: usize,
    pub dropout: f64,
    pub input_len: usize,
    pub label_len: usize,
    pub horizon: usize,
    pub factor: f64,
}

/// Two time convolutions with ReLU between, wrapped in a residual.
#[derive(Clone, Debug)]
pub struct ConvPair {
    pub conv1: Conv1d,
    pub conv2: Conv1d,
}

impl ConvPair {
    fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, s: &InformerShape, rng: &mut Rng) -> Result<Self> {
        Ok(Self {
            conv1: Conv1d::new(store, &format!("{name}.conv1"), s.conv_kernel, s.d_model, s.ff_hidden, rng)?,
            conv2: Conv1d::new(store, &format!("{name}.conv2"), s.conv_kernel, s.ff_hidden, s.d_model, rng)?,
        })
    }

    fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var, dropout: f64) -> Result<Var> {
        let h = self.conv1.forward(g, store, x)?;
        let h = g.relu(h)?;
        let h = self.conv2.forward(g, store, h)?;
        let h = g.dropout(h, dropout)?;
        g.add(x, h)
    }
}

fn residual<T: Scalar>(g: &mut Graph<T>, x: Var, y: Var, dropout: f64) -> Result<Var> {
    let y = g.dropout(y, dropout)?;
    g.add(x, y)
}

#[derive(Clone, Debug)]
pub struct EncoderBlock {
    pub attention: MultiHeadAttention,
    pub ffn: ConvPair,
    pub dropout: f64,
}

impl EncoderBlock {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, s: &InformerShape, rng: &mut Rng) -> Result<Self> {
        let kind = AttentionKind::ProbSparse { factor: s.factor };
        Ok(Self {
            attention: MultiHeadAttention::new(store, &format!("{name}.attn"), s.d_model, s.n_heads, kind, false, rng)?,
            ffn: ConvPair::new(store, name, s, rng)?,
            dropout: s.dropout,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let a = self.attention.forward(g, store, x, x)?;
        let x = residual(g, x, a, self.dropout)?;
        self.ffn.forward(g, store, x, self.dropout)
    }
}

#[derive(Clone, Debug)]
pub struct DecoderBlock {
    pub self_attention: MultiHeadAttention,
    pub cross_attention: MultiHeadAttention,
    pub ffn: ConvPair,
    pub dropout: f64,
}

impl DecoderBlock {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, s: &InformerShape, rng: &mut Rng) -> Result<Self> {
        let sparse = AttentionKind::ProbSparse { factor: s.factor };
        Ok(Self {
            self_attention: MultiHeadAttention::new(
                store,
                &format!("{name}.self_attn"),
                s.d_model,
                s.n_heads,
                sparse,
                true,
                rng,
            )?,
            cross_attention: MultiHeadAttention::new(
                store,
                &format!("{name}.cross_attn"),
                s.d_model,
                s.n_heads,
                AttentionKind::Full,
                false,
                rng,
            )?,
            ffn: ConvPair::new(store, name, s, rng)?,
            dropout: s.dropout,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var, enc: Var) -> Result<Var> {
        let a = self.self_attention.forward(g, store, x, x)?;
        let x = residual(g, x, a, self.dropout)?;
        let c = self.cross_attention.forward(g, store, x, enc)?;
        let x = residual(g, x, c, self.dropout)?;
        self.ffn.forward(g, store, x, self.dropout)
    }
}

#[derive(Clone, Debug)]
pub struct InformerCore {
    pub encoder: Vec<EncoderBlock>,
    pub decoder: Vec<DecoderBlock>,
    pub shape: InformerShape,
}

impl InformerCore {
    /// Registers `informer.enc{i}.*` and `informer.dec{i}.*`.
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, s: &InformerShape, rng: &mut Rng) -> Result<Self> {
        let mut problems = Vec::new();
        if s.layers == 0 {
            problems.push("informer needs at least one layer".to_string());
        }
        if s.label_len > s.input_len {
            problems.push(format!("label_len {} exceeds input length {}", s.label_len, s.input_len));
        }
        if s.conv_kernel % 2 == 0 {
            problems.push(format!("conv kernel width {} must be odd", s.conv_kernel));
        }
        if !problems.is_empty() {
            return Err(Error::Config(problems));
        }
        let encoder = (0..s.layers)
            .map(|i| EncoderBlock::new(store, &format!("informer.enc{i}"), s, rng))
            .collect::<Result<_>>()?;
        let decoder = (0..s.layers)
            .map(|i| DecoderBlock::new(store, &format!("informer.dec{i}"), s, rng))
            .collect::<Result<_>>()?;
        Ok(Self {
            encoder,
            decoder,
            shape: *s,
        })
    }

    pub fn encode<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let mut h = x;
        for b in &self.encoder {
            h = b.forward(g, store, h)?;
        }
        Ok(h)
    }

    /// Decoder tokens: the last `label_len` embedded inputs followed by `H`
    /// zero rows, plus positional encoding continuing the input positions.
    pub fn decoder_tokens<T: Scalar>(&self, g: &mut Graph<T>, emb: Var) -> Result<Var> {
        let s = &self.shape;
        let start = s.input_len - s.label_len;
        let zeros = g.constant(Tensor::zeros(vec![s.horizon, s.d_model]));
        let tokens = if s.label_len > 0 {
            let label = g.slice_rows(emb, start, s.label_len)?;
            g.concat_rows(&[label, zeros])?
        } else {
            zeros
        };
        let pe = g.constant(positional_encoding(start, s.label_len + s.horizon, s.d_model));
        g.add(tokens, pe)
    }

    /// Runs the decoder stack, returning all `label_len + H` rows.
    pub fn decode<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, tokens: Var, enc: Var) -> Result<Var> {
        let mut h = tokens;
        for b in &self.decoder {
            h = b.forward(g, store, h, enc)?;
        }
        Ok(h)
    }

    /// `[L_x, d]` embedded input → `[H, d]` forecast embedding.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, emb: Var) -> Result<Var> {
        let s = &self.shape;
        if g.shape(emb) != [s.input_len, s.d_model] {
            return Err(Error::Shape {
                op: "informer",
                lhs: g.shape(emb).to_vec(),
                rhs: vec![s.input_len, s.d_model],
            });
        }
        let pe = g.constant(positional_encoding(0, s.input_len, s.d_model));
        let enc_in = g.add(emb, pe)?;
        let enc = self.encode(g, store, enc_in)?;
        let tokens = self.decoder_tokens(g, emb)?;
        let dec = self.decode(g, store, tokens, enc)?;
        g.slice_rows(dec, s.label_len, s.horizon)
    }
}

#[cfg(test)]
mod tests;
