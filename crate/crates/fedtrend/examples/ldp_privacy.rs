//! Local differential privacy: clients perturb uploads before
//! transmission. Shows the noise statistics and that the synthetic-data
//! method keeps its edge under noise.

use fedtrend::experiment::{run_experiment, ExperimentConfig, Method};
use fedtrend::flcore::{apply_ldp, NoiseKind};
use fedtrend::models::{init_params, ModelSpec};
use fedtrend::rng::Rng;

fn main() {
    // the mechanism itself
    let spec = ModelSpec::dlinear(24, 24).unwrap();
    let params = init_params(&spec, 0);
    let lambda = 0.001;
    let mut rng = Rng::from_seed(9);
    let noised = apply_ldp(&params, lambda, NoiseKind::Gaussian, &mut rng);
    let diffs: Vec<f64> = noised
        .flat()
        .iter()
        .zip(params.flat())
        .map(|(a, b)| a - b)
        .collect();
    let std = (diffs.iter().map(|d| d * d).sum::<f64>() / diffs.len() as f64).sqrt();
    println!(
        "perturbed {} parameters with gaussian scale {lambda}; sample std {std:.6}",
        params.len()
    );

    // end to end, with the default lambda of the +ldp method variants
    let mut cfg = ExperimentConfig::demo_fleet(0.8);
    cfg.seed = 3;
    for method in [Method::FedAvg, Method::FedAvgLdp, Method::FedTrendLdp] {
        cfg.method = method;
        let run = run_experiment(&cfg).unwrap();
        println!("{:14} final test MSE {:.4}", method.name(), run.final_mse);
    }
}
