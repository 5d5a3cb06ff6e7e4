//! Kolmogorov–Arnold layers: every input→output edge carries a learnable
//! univariate function `φ(x) = Σ_i c_i B_i(x) + w_b·x` built from uniform
//! B-splines on an extended knot vector.

use std::io::Write;

use crate::autodiff::{init, Graph, ParamId, ParamStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::scalar::{c, Scalar};

/// Uniform knot vector over `[lo, hi]` with `degree` extra knots on each side.
#[derive(Clone, Debug, PartialEq)]
pub struct SplineGrid {
    knots: Vec<f64>,
    grid_size: usize,
    degree: usize,
    lo: f64,
    hi: f64,
}

impl SplineGrid {
    pub fn new(lo: f64, hi: f64, grid_size: usize, degree: usize) -> Result<Self> {
        if grid_size == 0 {
            return Err(Error::invalid("spline grid size must be at least 1"));
        }
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return Err(Error::invalid(format!("invalid spline range [{lo}, {hi}]")));
        }
        let h = (hi - lo) / grid_size as f64;
        let knots = (0..=grid_size + 2 * degree)
            .map(|i| lo + (i as f64 - degree as f64) * h)
            .collect();
        Ok(Self {
            knots,
            grid_size,
            degree,
            lo,
            hi,
        })
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn grid_size(&self) -> usize {
        self.grid_size
    }

    pub fn range(&self) -> (f64, f64) {
        (self.lo, self.hi)
    }

    /// Number of basis functions, `G + k`.
    pub fn num_basis(&self) -> usize {
        self.grid_size + self.degree
    }

    /// Knot span `s` with `t_s <= x < t_{s+1}`, restricted to the interior.
    fn span(&self, x: f64) -> usize {
        let k = self.degree;
        let last = self.grid_size + k - 1;
        if x >= self.hi {
            return last;
        }
        let h = (self.hi - self.lo) / self.grid_size as f64;
        let mut s = (k + ((x - self.lo) / h).floor().max(0.0) as usize).min(last);
        // floor can land one off near knots
        while s > k && x < self.knots[s] {
            s -= 1;
        }
        while s < last && x >= self.knots[s + 1] {
            s += 1;
        }
        s
    }

    /// Writes all `G + k` basis values (and derivatives) at `x` into the
    /// output slices. Inputs outside the range are clamped and the return
    /// value reports it; clamped inputs have zero derivative.
    pub fn eval_basis(&self, x: f64, vals: &mut [f64], ders: &mut [f64]) -> bool {
        let k = self.degree;
        vals.iter_mut().for_each(|v| *v = 0.0);
        ders.iter_mut().for_each(|v| *v = 0.0);
        let clamped = !(self.lo..=self.hi).contains(&x);
        let x = x.clamp(self.lo, self.hi);
        let s = self.span(x);
        let t = &self.knots;

        // nonzero functions of degree j live at indices s-j..=s
        let mut n = vec![0.0; k + 1];
        let mut prev = vec![0.0; k + 1];
        let mut left = vec![0.0; k + 1];
        let mut right = vec![0.0; k + 1];
        n[0] = 1.0;
        for j in 1..=k {
            left[j] = x - t[s + 1 - j];
            right[j] = t[s + j] - x;
            if j == k {
                prev.copy_from_slice(&n);
            }
            let mut saved = 0.0;
            for r in 0..j {
                let tmp = n[r] / (right[r + 1] + left[j - r]);
                n[r] = saved + right[r + 1] * tmp;
                saved = left[j - r] * tmp;
            }
            n[j] = saved;
        }
        for (r, &v) in n.iter().enumerate() {
            vals[s - k + r] = v;
        }
        if k > 0 && !clamped {
            // B'_{i,k} = k/(t_{i+k}-t_i) B_{i,k-1} - k/(t_{i+k+1}-t_{i+1}) B_{i+1,k-1}
            let lower = |i: usize| -> f64 {
                if i + k > s && i <= s {
                    prev[i + k - 1 - s]
                } else {
                    0.0
                }
            };
            for i in s - k..=s {
                let kf = k as f64;
                ders[i] = kf * lower(i) / (t[i + k] - t[i]) - kf * lower(i + 1) / (t[i + k + 1] - t[i + 1]);
            }
        }
        clamped
    }

    pub fn basis(&self, x: f64) -> Vec<f64> {
        let mut v = vec![0.0; self.num_basis()];
        let mut d = vec![0.0; self.num_basis()];
        self.eval_basis(x, &mut v, &mut d);
        v
    }
}

/// `φ(x) = Σ c_i B_i(x) + w_b·x` for one edge, outside any graph.
pub fn edge_value(grid: &SplineGrid, coeffs: &[f64], base_weight: f64, x: f64) -> f64 {
    let b = grid.basis(x);
    b.iter().zip(coeffs).map(|(b, c)| b * c).sum::<f64>() + base_weight * x
}

#[derive(Clone, Debug)]
pub struct KanLayer {
    pub name: String,
    pub in_dim: usize,
    pub out_dim: usize,
    pub grid: SplineGrid,
    /// Coefficient vectors `[G + k]` indexed `out * in_dim + in`.
    coeffs: Vec<ParamId>,
    /// Residual weights `[1]` indexed `out * in_dim + in`.
    base: Vec<ParamId>,
}

impl KanLayer {
    /// Registers `{name}.edge{in}_{out}.c` and `.w_b` for every edge.
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        grid: SplineGrid,
        rng: &mut Rng,
    ) -> Result<Self> {
        let nb = grid.num_basis();
        let mut coeffs = vec![None; in_dim * out_dim];
        let mut base = vec![None; in_dim * out_dim];
        for i in 0..in_dim {
            for o in 0..out_dim {
                let e = format!("{name}.edge{i}_{o}");
                coeffs[o * in_dim + i] = Some(store.add(format!("{e}.c"), init::normal(rng, vec![nb], 0.02))?);
                let wb = init::xavier_uniform(rng, vec![1], in_dim, out_dim);
                base[o * in_dim + i] = Some(store.add(format!("{e}.w_b"), wb)?);
            }
        }
        Ok(Self {
            name: name.to_string(),
            in_dim,
            out_dim,
            grid,
            coeffs: coeffs.into_iter().map(Option::unwrap).collect(),
            base: base.into_iter().map(Option::unwrap).collect(),
        })
    }

    pub fn coeff_id(&self, input: usize, output: usize) -> ParamId {
        self.coeffs[output * self.in_dim + input]
    }

    pub fn base_id(&self, input: usize, output: usize) -> ParamId {
        self.base[output * self.in_dim + input]
    }

    /// All coefficient vectors as one `[out, in * (G + k)]` node.
    fn coeff_matrix<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>) -> Result<Var> {
        let parts: Vec<Var> = self.coeffs.iter().map(|&id| g.param(store, id)).collect();
        let flat = g.concat(&parts)?;
        g.reshape(flat, vec![self.out_dim, self.in_dim * self.grid.num_basis()])
    }

    /// `y_j = Σ_i φ_{i,j}(x_i)` row-wise for `x[rows, in]`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let s = g.shape(x).to_vec();
        if s.last() != Some(&self.in_dim) {
            return Err(Error::Shape {
                op: "kan_layer",
                lhs: s,
                rhs: vec![self.in_dim, self.out_dim],
            });
        }
        let grid = &self.grid;
        let basis = g.expand(x, grid.num_basis(), |v, vals, ders| {
            let mut bv = vec![0.0; vals.len()];
            let mut bd = vec![0.0; ders.len()];
            let clamped = grid.eval_basis(v.to_f64_lossy(), &mut bv, &mut bd);
            for (o, b) in vals.iter_mut().zip(&bv) {
                *o = c(*b);
            }
            for (o, b) in ders.iter_mut().zip(&bd) {
                *o = c(*b);
            }
            clamped
        })?;
        let cm = self.coeff_matrix(g, store)?;
        let spline = g.matmul_nt(basis, cm)?;
        let parts: Vec<Var> = self.base.iter().map(|&id| g.param(store, id)).collect();
        let wb = g.concat(&parts)?;
        let wb = g.reshape(wb, vec![self.out_dim, self.in_dim])?;
        let lin = g.matmul_nt(x, wb)?;
        g.add(spline, lin)
    }

    /// `mean |c|` over every coefficient of the layer.
    pub fn mean_abs_coeff<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>) -> Result<Var> {
        let parts: Vec<Var> = self.coeffs.iter().map(|&id| g.param(store, id)).collect();
        let flat = g.concat(&parts)?;
        let a = g.abs(flat)?;
        g.mean(a)
    }
}

/// Stack of KAN layers mapping `[rows, d]` to `[rows, 1]`.
#[derive(Clone, Debug)]
pub struct KanHead {
    pub layers: Vec<KanLayer>,
}

impl KanHead {
    /// `widths = [d, hidden.., 1]`; layers are named `kan.layer{i}`.
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, widths: &[usize], grid: &SplineGrid, rng: &mut Rng) -> Result<Self> {
        if widths.len() < 2 {
            return Err(Error::invalid("KAN head needs at least two widths"));
        }
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| KanLayer::new(store, &format!("kan.layer{i}"), w[0], w[1], grid.clone(), rng))
            .collect::<Result<_>>()?;
        Ok(Self { layers })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let mut h = x;
        for l in &self.layers {
            h = l.forward(g, store, h)?;
        }
        Ok(h)
    }

    /// `λ · mean |c|`, averaged over layers.
    pub fn sparsity_penalty<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, lambda: f64) -> Result<Var> {
        let parts = self
            .layers
            .iter()
            .map(|l| l.mean_abs_coeff(g, store))
            .collect::<Result<Vec<_>>>()?;
        let all = g.concat(&parts)?;
        let m = g.mean(all)?;
        g.scale(m, c(lambda))
    }

    /// Writes every learned edge function sampled at `points` inputs across
    /// the grid range as `layer,input,output,x,phi`.
    pub fn write_edges_csv<T: Scalar>(&self, store: &ParamStore<T>, points: usize, mut out: impl Write) -> Result<()> {
        writeln!(out, "layer,input,output,x,phi")?;
        for (li, layer) in self.layers.iter().enumerate() {
            let (lo, hi) = layer.grid.range();
            for i in 0..layer.in_dim {
                for o in 0..layer.out_dim {
                    let coeffs: Vec<f64> = store
                        .value(layer.coeff_id(i, o))
                        .data()
                        .iter()
                        .map(|v| v.to_f64_lossy())
                        .collect();
                    let wb = store.value(layer.base_id(i, o)).data()[0].to_f64_lossy();
                    for p in 0..points {
                        let x = lo + (hi - lo) * p as f64 / (points.max(2) - 1) as f64;
                        let y = edge_value(&layer.grid, &coeffs, wb, x);
                        writeln!(out, "{li},{i},{o},{x},{y}")?;
                    }
                }
            }
        }
        Ok(())
    }
}

/// Grid knots of every layer as buffers for checkpointing.
pub fn grid_buffers<T: Scalar>(head: &KanHead) -> Vec<(String, Tensor<T>)> {
    head.layers
        .iter()
        .map(|l| {
            let k: Vec<T> = l.grid.knots().iter().map(|&v| c(v)).collect();
            (format!("{}.grid", l.name), Tensor::from_vec(k))
        })
        .collect()
}

#[cfg(test)]
mod tests;
