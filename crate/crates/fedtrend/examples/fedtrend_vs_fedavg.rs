//! The headline comparison: plain weighted averaging against the
//! synthetic-data method on a heterogeneous fleet, same data, same seed.

use fedtrend::experiment::{run_experiment, ExperimentConfig, Method};

fn main() {
    let mut cfg = ExperimentConfig::demo_fleet(0.8);
    cfg.seed = 1;

    cfg.method = Method::FedAvg;
    let fedavg = run_experiment(&cfg).unwrap();
    cfg.method = Method::FedTrend;
    let fedtrend = run_experiment(&cfg).unwrap();

    println!("round   fedavg    fedtrend");
    for (a, t) in fedavg.reports.iter().zip(&fedtrend.reports).step_by(10) {
        println!("{:5}   {:.4}    {:.4}", a.round, a.test_mse, t.test_mse);
    }
    let improvement = (fedavg.final_mse - fedtrend.final_mse) / fedavg.final_mse * 100.0;
    println!(
        "\nfinal: fedavg {:.4} vs fedtrend {:.4} ({improvement:+.1}% on MSE)",
        fedavg.final_mse, fedtrend.final_mse
    );
    println!(
        "synthetic builds: {} client-side, {} global-side",
        fedtrend.ct_builds.len(),
        fedtrend.gt_builds.len()
    );
    let extra_bytes: u64 = fedtrend.reports.iter().map(|r| r.bytes_down_synth).sum();
    println!("extra download per client across the run: {extra_bytes} bytes");
}
