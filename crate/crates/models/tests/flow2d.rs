use bgflow_core::flowmatch::Solver;
use bgflow_models::adam::OptimizerConfig;
use bgflow_models::toyflow::FieldMlp;
use rand::Rng;
use rand_distr::StandardNormal;

#[test]
fn learned_flow_moves_gaussian_to_shifted_gaussian() {
    let mu = [3.0f32, -2.0];
    let mut field = FieldMlp::new(2, 64, 1);
    let opt = OptimizerConfig {
        lr: 2e-3,
        warmup_steps: 100,
        ..Default::default()
    };
    let losses = field
        .train(
            |rng| {
                mu.iter()
                    .map(|m| m + rng.sample::<f32, _>(StandardNormal))
                    .collect()
            },
            3000,
            256,
            &opt,
            2,
        )
        .unwrap();
    assert!(losses.iter().all(|l| l.is_finite()));

    let x = field.sample(10_000, 32, Solver::Midpoint, 3).unwrap();
    let n = x.nrows() as f64;
    let norm_mu = ((mu[0] * mu[0] + mu[1] * mu[1]) as f64).sqrt();
    for d in 0..2 {
        let col = x.column(d);
        let mean = col.iter().map(|v| *v as f64).sum::<f64>() / n;
        let var = col.iter().map(|v| (*v as f64 - mean).powi(2)).sum::<f64>() / n;
        assert!((mean - mu[d] as f64).abs() < 0.1 * norm_mu, "dim {d}: mean {mean}");
        assert!((var - 1.0).abs() < 0.2, "dim {d}: variance {var}");
    }
}
