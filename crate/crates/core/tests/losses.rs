use dns_pesqnet::autograd::{Graph, Tensor};
use dns_pesqnet::fcrn::complex_to_tensor;
use dns_pesqnet::losses::*;
use ndarray::{Array2, IxDyn};
use num_complex::Complex64;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_matrix(rows: usize, cols: usize, seed: u64) -> Array2<Complex64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array2::from_shape_fn((rows, cols), |_| Complex64::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)))
}

fn loop_mse(a: &Array2<Complex64>, b: &Array2<Complex64>) -> f64 {
    let mut s = 0.0;
    for i in 0..a.nrows() {
        for k in 0..a.ncols() {
            let d = a[[i, k]] - b[[i, k]];
            s += d.re * d.re + d.im * d.im;
        }
    }
    s / (a.nrows() * a.ncols()) as f64
}

#[test]
fn spectral_losses_match_loop_oracle() {
    let (e, s, r) = (random_matrix(2, 4, 1), random_matrix(2, 4, 2), random_matrix(2, 4, 3));
    assert!((loss_joint(&e, &s).unwrap() - loop_mse(&e, &s)).abs() < 1e-12);
    assert!((loss_noise(&e, &r).unwrap() - loop_mse(&e, &r)).abs() < 1e-12);
    let want = 0.9 * loop_mse(&e, &s) + 0.1 * loop_mse(&e, &r);
    assert!((loss_mse(&e, &s, &r, 0.9).unwrap() - want).abs() < 1e-12);
    assert_eq!(loss_joint(&s, &s).unwrap(), 0.0);
}

#[test]
fn single_bin_residual() {
    let e = Array2::from_elem((1, 1), Complex64::new(3.0, 4.0));
    let s = Array2::from_elem((1, 1), Complex64::new(0.0, 0.0));
    assert!((loss_joint(&e, &s).unwrap() - 25.0).abs() < 1e-12);
}

#[test]
fn weight_endpoints_select_one_term() {
    let (e, s, r) = (random_matrix(3, 5, 4), random_matrix(3, 5, 5), random_matrix(3, 5, 6));
    assert!((loss_mse(&e, &s, &r, 0.0).unwrap() - loss_noise(&e, &r).unwrap()).abs() < 1e-12);
    assert!((loss_mse(&e, &s, &r, 1.0).unwrap() - loss_joint(&e, &s).unwrap()).abs() < 1e-12);
    // Without reverberation the two targets coincide.
    assert_eq!(loss_noise(&e, &s).unwrap(), loss_joint(&e, &s).unwrap());
    assert!((loss_mse(&e, &s, &s, 0.9).unwrap() - loss_joint(&e, &s).unwrap()).abs() < 1e-12);
    assert!((loss_total(0.7, 2.5, 1.0).unwrap() - 0.7).abs() < 1e-12);
    assert!((loss_total(0.7, 2.5, 0.0).unwrap() - 2.5).abs() < 1e-12);
    assert!((loss_total(2.0, 4.0, 0.5).unwrap() - 3.0).abs() < 1e-12);
}

#[test]
fn score_losses() {
    assert_eq!(loss_pesq(3.0, 3.0), 0.0);
    assert!((loss_pesq(4.64, 1.04) - 12.96).abs() < 1e-12);
    assert_eq!(loss_pesq(1.5, 3.25), loss_pesq(3.25, 1.5));
    assert_eq!(loss_pesqnet(4.64), 0.0);
    assert!((loss_pesqnet(2.64) - 4.0).abs() < 1e-12);
}

#[test]
fn out_of_range_weights_are_rejected() {
    let (e, s) = (random_matrix(1, 2, 1), random_matrix(1, 2, 2));
    assert!(loss_mse(&e, &s, &s, 1.1).is_err());
    assert!(loss_total(1.0, 1.0, -0.1).is_err());
    assert!(loss_joint(&e, &random_matrix(2, 2, 3)).is_err());
}

#[test]
fn pesqnet_loss_gradient_points_upward() {
    for hat in [1.04, 2.0, 3.5, 4.6] {
        let mut g = Graph::new();
        let x = g.input_with_grad(Tensor::from_elem(IxDyn(&[1, 1]), hat));
        let l = graph_loss_pesqnet(&mut g, x);
        let d = g.backward(l).get(x).unwrap()[[0, 0]];
        assert!((d - 2.0 * (hat - 4.64)).abs() < 1e-12);
        assert!(d < 0.0);
    }
}

/// Relative error of the tape gradient of `f` against central differences.
fn gradient_error(x0: &Tensor, f: impl Fn(&mut Graph, dns_pesqnet::autograd::Var) -> dns_pesqnet::autograd::Var) -> f64 {
    let mut g = Graph::new();
    let x = g.input_with_grad(x0.clone());
    let y = f(&mut g, x);
    let analytic = g.backward(y).get(x).unwrap().clone();
    let eval = |t: Tensor| {
        let mut g = Graph::new();
        let x = g.constant(t);
        let y = f(&mut g, x);
        g.scalar(y)
    };
    let h = 1e-6;
    let mut num = Tensor::zeros(x0.raw_dim());
    for i in 0..x0.len() {
        let mut p = x0.clone();
        let mut m = x0.clone();
        p.as_slice_mut().unwrap()[i] += h;
        m.as_slice_mut().unwrap()[i] -= h;
        num.as_slice_mut().unwrap()[i] = (eval(p) - eval(m)) / (2.0 * h);
    }
    let diff = (&analytic - &num).mapv(|v| v * v).sum().sqrt();
    diff / num.mapv(|v| v * v).sum().sqrt().max(1e-12)
}

#[test]
fn loss_gradients_match_finite_differences() {
    for seed in 0..5 {
        let est = complex_to_tensor(&random_matrix(2, 4, seed));
        let s = complex_to_tensor(&random_matrix(2, 4, seed + 10));
        let r = complex_to_tensor(&random_matrix(2, 4, seed + 20));
        for beta in [0.0, 0.3, 0.9, 1.0] {
            let e = gradient_error(&est, |g, x| graph_loss_mse(g, x, &s, &r, beta));
            assert!(e <= 1e-4, "beta {beta}: {e}");
        }
        let e = gradient_error(&est, |g, x| {
            let m = graph_loss_mse(g, x, &s, &r, 0.5);
            let a = g.complex_abs(x);
            let q = g.sum(a);
            let q = g.scale(q, 0.05);
            let q = g.reshape(q, &[1, 1]);
            let p = graph_loss_pesqnet(g, q);
            graph_loss_total(g, m, p, 0.4)
        });
        assert!(e <= 1e-4, "total: {e}");
    }
}

proptest! {
    #[test]
    fn losses_are_nonnegative_and_affine(seed in 0u64..10_000, w in 0.0f64..1.0) {
        let (e, s, r) = (random_matrix(2, 4, seed), random_matrix(2, 4, seed + 1), random_matrix(2, 4, seed + 2));
        let j = loss_joint(&e, &s).unwrap();
        let n = loss_noise(&e, &r).unwrap();
        prop_assert!(j >= 0.0 && n >= 0.0);
        let m = loss_mse(&e, &s, &r, w).unwrap();
        prop_assert!((m - (w * j + (1.0 - w) * n)).abs() < 1e-12);
        // Affine: the midpoint of two weights gives the midpoint value.
        let lo = loss_mse(&e, &s, &r, 0.0).unwrap();
        let hi = loss_mse(&e, &s, &r, 1.0).unwrap();
        prop_assert!((loss_mse(&e, &s, &r, 0.5).unwrap() - 0.5 * (lo + hi)).abs() < 1e-12);
        let t = loss_total(j, n, w).unwrap();
        prop_assert!((t - (w * j + (1.0 - w) * n)).abs() < 1e-12);
        prop_assert!(loss_pesq(j, n) >= 0.0);
    }
}
