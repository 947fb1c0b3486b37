//! The data pipeline: synthesize a heterogeneous fleet, split it
//! chronologically, fit train-side normalization, and window every client.

use fedtrend::data::{gen_fleet, make_windows, normalize, split, FleetConfig, NormStats};

fn main() {
    for heterogeneity in [0.0, 0.8] {
        let cfg = FleetConfig {
            num_clients: 4,
            series_len: 300,
            heterogeneity,
            ..FleetConfig::default()
        };
        let store = gen_fleet(&cfg, 42).unwrap();
        println!("heterogeneity {heterogeneity}:");
        let (train, test) = split(&store, 0.7, 48).unwrap();
        let stats = NormStats::fit(&train);
        let train = normalize(&train, &stats).unwrap();
        let test = normalize(&test, &stats).unwrap();
        for (tc, sc) in train.clients.iter().zip(&test.clients) {
            let train_windows = make_windows(&tc.values, 24, 24, 1).unwrap();
            let test_windows = make_windows(&sc.values, 24, 24, 1).unwrap();
            let (mean, std) = stats.mean_std(&tc.id).unwrap();
            println!(
                "  {}: {} train pts -> {} windows, {} test pts -> {} windows (raw mean {mean:+.3}, std {std:.3})",
                tc.id,
                tc.values.len(),
                train_windows.len(),
                sc.values.len(),
                test_windows.len(),
            );
        }
    }
}
