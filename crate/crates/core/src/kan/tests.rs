use super::*;
use crate::autodiff::{grad_check, grad_check_params, Mode};
use crate::rng;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::Rng as _;

/// Textbook Cox–de Boor recursion with the 0/0 := 0 convention.
fn cox_de_boor(t: &[f64], i: usize, k: usize, x: f64) -> f64 {
    if k == 0 {
        return if t[i] <= x && x < t[i + 1] { 1.0 } else { 0.0 };
    }
    let mut v = 0.0;
    let d1 = t[i + k] - t[i];
    if d1 != 0.0 {
        v += (x - t[i]) / d1 * cox_de_boor(t, i, k - 1, x);
    }
    let d2 = t[i + k + 1] - t[i + 1];
    if d2 != 0.0 {
        v += (t[i + k + 1] - x) / d2 * cox_de_boor(t, i + 1, k - 1, x);
    }
    v
}

fn sample_points(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    let mut r = rng::seeded(n as u64);
    let mut pts: Vec<f64> = (0..n).map(|_| r.gen_range(lo..hi)).collect();
    pts.extend([lo, hi, 0.5 * (lo + hi)]);
    pts
}

#[test]
fn knot_vector_layout() {
    let g = SplineGrid::new(-3.0, 3.0, 8, 3).unwrap();
    assert_eq!(g.knots().len(), 8 + 2 * 3 + 1);
    assert_eq!(g.num_basis(), 11);
    assert!(g.knots().windows(2).all(|w| w[0] < w[1]));
    assert!((g.knots()[3] + 3.0).abs() < 1e-15);
    assert!((g.knots()[11] - 3.0).abs() < 1e-12);
    assert!(SplineGrid::new(-1.0, 1.0, 0, 3).is_err());
    assert!(SplineGrid::new(1.0, 1.0, 4, 3).is_err());
}

#[test]
fn partition_of_unity() {
    for k in 1..=5 {
        for gs in [1, 2, 3, 5, 8, 16, 32] {
            let g = SplineGrid::new(-3.0, 3.0, gs, k).unwrap();
            for x in sample_points(-3.0, 3.0, 200) {
                let s: f64 = g.basis(x).iter().sum();
                assert!((s - 1.0).abs() < 1e-12, "k={k} G={gs} x={x} sum={s}");
                assert!(g.basis(x).iter().all(|&b| b >= -1e-15));
            }
        }
    }
}

#[test]
fn degree_zero_is_an_indicator() {
    let g = SplineGrid::new(0.0, 4.0, 4, 0).unwrap();
    assert_eq!(g.basis(0.5), vec![1.0, 0.0, 0.0, 0.0]);
    assert_eq!(g.basis(1.0), vec![0.0, 1.0, 0.0, 0.0]);
    assert_eq!(g.basis(3.99), vec![0.0, 0.0, 0.0, 1.0]);
    assert_eq!(g.basis(4.0), vec![0.0, 0.0, 0.0, 1.0]);
}

#[test]
fn matches_recursive_oracle_values_and_derivatives() {
    for k in 0..=5 {
        let g = SplineGrid::new(-2.0, 1.0, 7, k).unwrap();
        let n = g.num_basis();
        for x in sample_points(-2.0, 1.0 - 1e-9, 100) {
            let mut v = vec![0.0; n];
            let mut d = vec![0.0; n];
            g.eval_basis(x, &mut v, &mut d);
            for i in 0..n {
                let want = cox_de_boor(g.knots(), i, k, x);
                assert!((v[i] - want).abs() < 1e-12, "k={k} i={i} x={x}");
                if k > 0 {
                    let h = 1e-6;
                    let fd = (cox_de_boor(g.knots(), i, k, x + h) - cox_de_boor(g.knots(), i, k, x - h)) / (2.0 * h);
                    // k = 1 derivatives jump at knots
                    let near_knot = g.knots().iter().any(|t| (t - x).abs() < 2.0 * h);
                    if !near_knot {
                        assert!((d[i] - fd).abs() < 1e-5 * (1.0 + fd.abs()), "k={k} i={i} x={x} {} {fd}", d[i]);
                    }
                }
            }
        }
    }
}

#[test]
fn local_support() {
    let g = SplineGrid::new(-3.0, 3.0, 8, 3).unwrap();
    let t = g.knots();
    for x in sample_points(-3.0, 3.0, 300) {
        for (i, b) in g.basis(x).into_iter().enumerate() {
            if x < t[i] || x > t[i + g.degree() + 1] {
                assert_eq!(b, 0.0, "i={i} x={x}");
            }
        }
    }
}

#[test]
fn continuous_at_interior_knots_and_right_boundary() {
    for k in 1..=4 {
        let g = SplineGrid::new(-1.0, 1.0, 6, k).unwrap();
        let (lo, hi) = g.range();
        let interior: Vec<f64> = g.knots().iter().copied().filter(|&t| t > lo && t < hi).collect();
        for x in interior.into_iter().chain([hi]) {
            let a = g.basis(x - 1e-10);
            let b = g.basis(x);
            for (p, q) in a.iter().zip(&b) {
                assert!((p - q).abs() < 1e-8, "k={k} x={x}");
            }
        }
    }
}

/// Least-squares spline fit of `f` on `m` points; returns max residual.
fn fit_residual(g: &SplineGrid, f: impl Fn(f64) -> f64, m: usize) -> f64 {
    let (lo, hi) = g.range();
    let xs: Vec<f64> = (0..m).map(|i| lo + (hi - lo) * i as f64 / (m - 1) as f64).collect();
    let n = g.num_basis();
    let a = DMatrix::from_fn(m, n, |r, col| g.basis(xs[r])[col]);
    let y = DVector::from_iterator(m, xs.iter().map(|&x| f(x)));
    let sol = a.clone().svd(true, true).solve(&y, 1e-14).unwrap();
    (a * sol - y).amax()
}

#[test]
fn reproduces_polynomials_up_to_its_degree() {
    for k in 1..=4 {
        let g = SplineGrid::new(-3.0, 3.0, 8, k).unwrap();
        for p in 0..=k {
            let r = fit_residual(&g, |x| (x * 0.7 - 0.2).powi(p as i32) + 0.3, 120);
            assert!(r < 1e-8, "k={k} p={p} r={r}");
        }
    }
}

#[test]
fn linear_fit_error_of_square_shrinks_with_grid() {
    let errs: Vec<f64> = [2, 4, 8, 16]
        .iter()
        .map(|&gs| fit_residual(&SplineGrid::new(-1.0, 1.0, gs, 1).unwrap(), |x| x * x, 400))
        .collect();
    for w in errs.windows(2) {
        assert!(w[1] < w[0] * 0.5, "{errs:?}");
    }
}

#[test]
fn out_of_range_inputs_clamp_and_count() {
    let grid = SplineGrid::new(-3.0, 3.0, 4, 3).unwrap();
    assert_eq!(grid.basis(10.0), grid.basis(3.0));
    let mut store = ParamStore::<f64>::new();
    let layer = KanLayer::new(&mut store, "kan.layer0", 2, 1, grid, &mut rng::seeded(1)).unwrap();
    let mut g = Graph::new(Mode::Eval);
    let x = g.constant(Tensor::new(vec![1, 2], vec![5.0, 0.0]).unwrap());
    layer.forward(&mut g, &store, x).unwrap();
    assert_eq!(g.stats.clamped, 1);
}

#[test]
fn two_input_layer_by_hand() {
    // degree 1, G = 2 on [0, 2]: hat functions centred at 0, 1, 2
    let grid = SplineGrid::new(0.0, 2.0, 2, 1).unwrap();
    let mut store = ParamStore::<f64>::new();
    let layer = KanLayer::new(&mut store, "kan.layer0", 2, 1, grid, &mut rng::seeded(1)).unwrap();
    *store.value_mut(layer.coeff_id(0, 0)) = Tensor::from_vec(vec![1.0, 2.0, 3.0]);
    *store.value_mut(layer.coeff_id(1, 0)) = Tensor::from_vec(vec![0.0, -1.0, 4.0]);
    *store.value_mut(layer.base_id(0, 0)) = Tensor::from_vec(vec![0.5]);
    *store.value_mut(layer.base_id(1, 0)) = Tensor::from_vec(vec![0.0]);
    let mut g = Graph::new(Mode::Eval);
    let x = g.constant(Tensor::new(vec![1, 2], vec![0.5, 1.5]).unwrap());
    let y = layer.forward(&mut g, &store, x).unwrap();
    // φ0(0.5) = 0.5·1 + 0.5·2 + 0.5·0.5 = 1.75; φ1(1.5) = 0.5·(-1) + 0.5·4 = 1.5
    assert!((g.value(y).data()[0] - 3.25).abs() < 1e-14);
    assert_eq!(g.shape(y), &[1, 1]);
}

#[test]
fn sparsity_penalty_hand_case() {
    let grid = SplineGrid::new(-1.0, 1.0, 1, 1).unwrap();
    let mut store = ParamStore::<f64>::new();
    let head = KanHead::new(&mut store, &[1, 1], &grid, &mut rng::seeded(1)).unwrap();
    *store.value_mut(head.layers[0].coeff_id(0, 0)) = Tensor::from_vec(vec![1.0, -1.0]);
    let mut g = Graph::new(Mode::Eval);
    let p = head.sparsity_penalty(&mut g, &store, 1.0).unwrap();
    assert_eq!(g.value(p).data(), &[1.0]);
    let p2 = head.sparsity_penalty(&mut g, &store, 0.25).unwrap();
    assert_eq!(g.value(p2).data(), &[0.25]);
}

#[test]
fn head_gradients_match_finite_differences() {
    let grid = SplineGrid::new(-3.0, 3.0, 5, 3).unwrap();
    let mut store = ParamStore::<f64>::new();
    let head = KanHead::new(&mut store, &[3, 4, 1], &grid, &mut rng::seeded(2)).unwrap();
    let mut r = rng::seeded(3);
    for p in store.iter_mut() {
        for v in p.value.data_mut() {
            *v += r.gen_range(-0.5..0.5);
        }
    }
    let x = Tensor::from_fn(vec![5, 3], |_| r.gen_range(-2.5..2.5));
    let report = grad_check_params(
        &mut store,
        |g, st| {
            let xv = g.constant(x.clone());
            let y = head.forward(g, st, xv)?;
            let y = g.mul(y, y)?;
            let m = g.mean(y)?;
            let pen = head.sparsity_penalty(g, st, 0.1)?;
            g.add(m, pen)
        },
        1e-6,
        None,
    )
    .unwrap();
    assert!(report.max_rel_err < 1e-5, "{report:?}");
    let report = grad_check(
        |g, xv| {
            let y = head.forward(g, &store, xv)?;
            let y = g.mul(y, y)?;
            g.mean(y)
        },
        &x,
        1e-6,
    )
    .unwrap();
    assert!(report.max_rel_err < 1e-5, "{report:?}");
}

#[test]
fn parameter_names_and_edge_dump() {
    let grid = SplineGrid::new(-3.0, 3.0, 8, 3).unwrap();
    let mut store = ParamStore::<f64>::new();
    let head = KanHead::new(&mut store, &[2, 3, 1], &grid, &mut rng::seeded(4)).unwrap();
    assert_eq!(store.by_name("kan.layer0.edge1_2.c").unwrap().value.shape(), &[11]);
    assert_eq!(store.by_name("kan.layer1.edge2_0.w_b").unwrap().value.shape(), &[1]);
    assert_eq!(store.len(), 2 * (2 * 3 + 3));
    let mut buf = Vec::new();
    head.write_edges_csv(&store, 5, &mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert_eq!(text.lines().count(), 1 + (6 + 3) * 5);
    let bufs = grid_buffers::<f64>(&head);
    assert_eq!(bufs[0].0, "kan.layer0.grid");
    assert_eq!(bufs[0].1.len(), 15);
}

proptest! {
    #[test]
    fn basis_sums_to_one_anywhere(x in -10.0f64..10.0, k in 0usize..6, gs in 1usize..33) {
        let g = SplineGrid::new(-3.0, 3.0, gs, k).unwrap();
        let s: f64 = g.basis(x).iter().sum();
        prop_assert!((s - 1.0).abs() < 1e-12);
    }
}

fn layer_output(layer: &KanLayer, store: &ParamStore<f64>, x: &[f64]) -> Vec<f64> {
    let mut g = Graph::new(Mode::Eval);
    let xv = g.constant(Tensor::new(vec![1, x.len()], x.to_vec()).unwrap());
    let y = layer.forward(&mut g, store, xv).unwrap();
    g.value(y).data().to_vec()
}

#[test]
fn edge_and_layer_reductions() {
    let grid = SplineGrid::new(-3.0, 3.0, 8, 3).unwrap();
    assert_eq!(edge_value(&grid, &[0.0; 11], 1.0, 1.25), 1.25);

    let mut store = ParamStore::<f64>::new();
    let one = KanLayer::new(&mut store, "one", 1, 1, grid.clone(), &mut rng::seeded(1)).unwrap();
    let coeffs = store.value(one.coeff_id(0, 0)).data().to_vec();
    let wb = store.value(one.base_id(0, 0)).data()[0];
    let y = layer_output(&one, &store, &[0.4]);
    assert!((y[0] - edge_value(&grid, &coeffs, wb, 0.4)).abs() < 1e-14);

    let two = KanLayer::new(&mut store, "two", 2, 1, grid.clone(), &mut rng::seeded(2)).unwrap();
    for i in 0..2 {
        *store.value_mut(two.coeff_id(i, 0)) = Tensor::zeros(vec![11]);
        *store.value_mut(two.base_id(i, 0)) = Tensor::zeros(vec![1]);
    }
    assert_eq!(layer_output(&two, &store, &[0.3, -1.2]), vec![0.0]);
    *store.value_mut(two.base_id(0, 0)) = Tensor::from_vec(vec![2.0]);
    *store.value_mut(two.base_id(1, 0)) = Tensor::from_vec(vec![3.0]);
    let y = layer_output(&two, &store, &[0.3, -1.2]);
    assert!((y[0] - (2.0 * 0.3 + 3.0 * -1.2)).abs() < 1e-14);
}
