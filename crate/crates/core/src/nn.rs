//! Parameterized building blocks shared by the model modules.

use crate::autodiff::{init, Graph, ParamId, ParamStore, Tensor, Var};
use crate::error::Result;
use crate::rng::Rng;
use crate::scalar::Scalar;

/// `y = x·Wᵀ + b`, parameters `{name}.W` `[out, in]` and `{name}.b` `[out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        let w = store.add(
            format!("{name}.W"),
            init::xavier_uniform(rng, vec![out_dim, in_dim], in_dim, out_dim),
        )?;
        let b = store.add(format!("{name}.b"), Tensor::zeros(vec![out_dim]))?;
        Ok(Self { w, b, in_dim, out_dim })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        g.linear(x, w, b)
    }

    pub fn param_ids(&self) -> [ParamId; 2] {
        [self.w, self.b]
    }
}

/// Same-padded time convolution, `{name}.K` `[width, in, out]` and `{name}.b`.
#[derive(Clone, Debug)]
pub struct Conv1d {
    pub kernel: ParamId,
    pub b: ParamId,
}

impl Conv1d {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        width: usize,
        in_ch: usize,
        out_ch: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        let kernel = store.add(
            format!("{name}.K"),
            init::xavier_uniform(rng, vec![width, in_ch, out_ch], width * in_ch, width * out_ch),
        )?;
        let b = store.add(format!("{name}.b"), Tensor::zeros(vec![out_ch]))?;
        Ok(Self { kernel, b })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let k = g.param(store, self.kernel);
        let b = g.param(store, self.b);
        let y = g.conv1d_time(x, k)?;
        g.add_row_bias(y, b)
    }
}

/// Standard sinusoidal position table for positions `start..start + len`.
pub fn positional_encoding<T: Scalar>(start: usize, len: usize, d: usize) -> Tensor<T> {
    Tensor::from_fn(vec![len, d], |idx| {
        let (p, i) = ((start + idx / d) as f64, idx % d);
        let freq = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
        let v = if i % 2 == 0 { (p * freq).sin() } else { (p * freq).cos() };
        T::from_f64_lossy(v)
    })
}
