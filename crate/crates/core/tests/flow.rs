use bgflow_core::flowmatch::{cfg_combine, ode_solve, ot_path, Solver};
use bgflow_core::seed::stream_rng;
use ndarray::{Array1, Array2};
use proptest::prelude::*;
use rand::Rng;

fn random(rng: &mut impl Rng, r: usize, c: usize) -> Array2<f64> {
    Array2::from_shape_fn((r, c), |_| rng.random_range(-3.0..3.0))
}

#[test]
fn path_endpoints_and_constant_velocity() {
    let mut rng = stream_rng(1, 0);
    let sigma = 1e-5;
    for _ in 0..100 {
        let (r, c) = (rng.random_range(1..20), rng.random_range(1..20));
        let x0 = random(&mut rng, r, c);
        let x1 = random(&mut rng, r, c);
        let (w0, u0) = ot_path(&x0, &x1, 0.0, sigma).unwrap();
        let (w1, u1) = ot_path(&x0, &x1, 1.0, sigma).unwrap();
        assert!((&w0 - &x0).iter().all(|d| d.abs() < 1e-6));
        assert!((&w1 - &(&x1 + &(&x0 * sigma))).iter().all(|d| d.abs() < 1e-6));
        assert!((&u0 - &u1).iter().all(|d| *d == 0.0));
        // dw/dt equals u everywhere on the path
        let t: f64 = rng.random_range(0.0..0.9);
        let h = 0.1;
        let (wa, _) = ot_path(&x0, &x1, t, sigma).unwrap();
        let (wb, _) = ot_path(&x0, &x1, t + h, sigma).unwrap();
        assert!(((&wb - &wa) / h - &u0).iter().all(|d| d.abs() < 1e-6));
    }
}

#[test]
fn guidance_identities_are_exact() {
    let mut rng = stream_rng(2, 0);
    for _ in 0..100 {
        let c = random(&mut rng, 5, 7);
        let u = random(&mut rng, 5, 7);
        assert_eq!(cfg_combine(&c, &u, 0.0).unwrap(), c);
        let alpha = rng.random_range(0.0..3.0);
        assert_eq!(cfg_combine(&c, &c, alpha).unwrap(), c);
    }
}

fn slope(solver: Solver) -> f64 {
    let lambda: f64 = -1.3;
    let x0 = Array1::from(vec![1.0, -0.5, 2.0]);
    let exact = x0.mapv(|v: f64| v * lambda.exp());
    let steps = [8usize, 16, 32, 64, 128];
    let pts: Vec<(f64, f64)> = steps
        .iter()
        .map(|&n| {
            let x = ode_solve(|x: &Array1<f64>, _t| x * lambda, &x0, n, solver).unwrap();
            let err = (&x - &exact).iter().map(|d| d.abs()).fold(0.0, f64::max);
            ((1.0 / n as f64).ln(), err.ln())
        })
        .collect();
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    sxy / sxx
}

#[test]
fn solver_convergence_orders() {
    let e = slope(Solver::Euler);
    let m = slope(Solver::Midpoint);
    assert!((e - 1.0).abs() < 0.2, "euler slope {e}");
    assert!((m - 2.0).abs() < 0.2, "midpoint slope {m}");
}

proptest! {
    #[test]
    fn path_is_affine_in_t(t in 0.0f64..=1.0, seed in 0u64..1000) {
        let mut rng = stream_rng(seed, 0);
        let x0 = random(&mut rng, 3, 4);
        let x1 = random(&mut rng, 3, 4);
        let (w, u) = ot_path(&x0, &x1, t, 0.0).unwrap();
        let expect = &x0 + &(&u * t);
        prop_assert!((&w - &expect).iter().all(|d| d.abs() < 1e-12));
    }
}
