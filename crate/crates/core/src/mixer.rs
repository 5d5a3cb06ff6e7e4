//! Feature fusion by stacked temporal-mixing and channel-mixing residual
//! blocks, followed by a projection to the model width.

use crate::autodiff::{Graph, ParamStore, Var};
use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::rng::Rng;
use crate::scalar::Scalar;

/// Two-layer MLP with ReLU and trailing dropout, applied along one axis.
#[derive(Clone, Debug)]
pub struct MixBranch {
    pub lin1: Linear,
    pub lin2: Linear,
}

impl MixBranch {
    fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, width: usize, hidden: usize, rng: &mut Rng) -> Result<Self> {
        Ok(Self {
            lin1: Linear::new(store, &format!("{name}.lin1"), width, hidden, rng)?,
            lin2: Linear::new(store, &format!("{name}.lin2"), hidden, width, rng)?,
        })
    }

    fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var, dropout: f64) -> Result<Var> {
        let h = self.lin1.forward(g, store, x)?;
        let h = g.relu(h)?;
        let h = self.lin2.forward(g, store, h)?;
        g.dropout(h, dropout)
    }
}

/// Residual unit `X + f_C(X + f_T(X))` over an `[L, C]` input.
#[derive(Clone, Debug)]
pub struct StBlock {
    /// Mixes along time, independently per channel (`L → h_T → L`).
    pub f_t: MixBranch,
    /// Mixes along channels, independently per time step (`C → h_C → C`).
    pub f_c: MixBranch,
    pub seq_len: usize,
    pub channels: usize,
    pub dropout: f64,
    pub prenorm: bool,
}

#[derive(Clone, Debug)]
pub struct MixerStack {
    pub blocks: Vec<StBlock>,
    pub out_proj: Linear,
}

#[derive(Clone, Copy, Debug)]
pub struct MixerShape {
    pub seq_len: usize,
    pub channels: usize,
    pub time_hidden: usize,
    pub channel_hidden: usize,
    pub d_model: usize,
    pub blocks: usize,
    pub dropout: f64,
    pub prenorm: bool,
}

impl StBlock {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, shape: &MixerShape, rng: &mut Rng) -> Result<Self> {
        Ok(Self {
            f_t: MixBranch::new(store, &format!("{name}.f_T"), shape.seq_len, shape.time_hidden, rng)?,
            f_c: MixBranch::new(store, &format!("{name}.f_C"), shape.channels, shape.channel_hidden, rng)?,
            seq_len: shape.seq_len,
            channels: shape.channels,
            dropout: shape.dropout,
            prenorm: shape.prenorm,
        })
    }

    fn check(&self, g: &Graph<impl Scalar>, x: Var) -> Result<()> {
        let s = g.shape(x);
        if s != [self.seq_len, self.channels] {
            return Err(Error::Shape {
                op: "st_block",
                lhs: s.to_vec(),
                rhs: vec![self.seq_len, self.channels],
            });
        }
        Ok(())
    }

    fn norm<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        if self.prenorm {
            g.layer_norm(x, 1e-5)
        } else {
            Ok(x)
        }
    }

    /// `f_T(X)`: the time-axis MLP applied to every channel column.
    pub fn temporal_mix<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        if g.shape(x).first() != Some(&self.seq_len) {
            return Err(Error::Shape {
                op: "temporal_mix",
                lhs: g.shape(x).to_vec(),
                rhs: vec![self.seq_len, self.channels],
            });
        }
        let xt = g.transpose(x)?;
        let y = self.f_t.forward(g, store, xt, self.dropout)?;
        g.transpose(y)
    }

    /// `f_C(X)`: the channel-axis MLP applied to every time step.
    pub fn channel_mix<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        if g.shape(x).last() != Some(&self.channels) {
            return Err(Error::Shape {
                op: "channel_mix",
                lhs: g.shape(x).to_vec(),
                rhs: vec![self.seq_len, self.channels],
            });
        }
        self.f_c.forward(g, store, x, self.dropout)
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        self.check(g, x)?;
        let xn = self.norm(g, x)?;
        let t = self.temporal_mix(g, store, xn)?;
        let inner = g.add(x, t)?;
        let inner = self.norm(g, inner)?;
        let c = self.channel_mix(g, store, inner)?;
        g.add(x, c)
    }
}

impl MixerStack {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, shape: &MixerShape, rng: &mut Rng) -> Result<Self> {
        if shape.blocks == 0 {
            return Err(Error::invalid("mixer needs at least one block"));
        }
        let blocks = (0..shape.blocks)
            .map(|i| StBlock::new(store, &format!("mixer.block{i}"), shape, rng))
            .collect::<Result<_>>()?;
        let out_proj = Linear::new(store, "mixer.out_proj", shape.channels, shape.d_model, rng)?;
        Ok(Self { blocks, out_proj })
    }

    /// `[L, C]` → `[L, d]`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let mut h = x;
        for b in &self.blocks {
            h = b.forward(g, store, h)?;
        }
        self.out_proj.forward(g, store, h)
    }
}
