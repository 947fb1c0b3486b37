//! Drives the round engine directly: local training on each client,
//! weighted aggregation, and per-round evaluation, without the scheduler.

use fedtrend::data::{gen_fleet, make_windows, normalize, split, FleetConfig, NormStats};
use fedtrend::flcore::{run_round, ClientState, RoundContext, TrainConfig};
use fedtrend::models::{init_params, Batch, ModelSpec};
use fedtrend::rng::derive_seed;

fn main() {
    let seed = 5;
    let fleet = FleetConfig {
        num_clients: 4,
        series_len: 800,
        heterogeneity: 0.5,
        ..FleetConfig::default()
    };
    let store = gen_fleet(&fleet, seed).unwrap();
    let (train, test) = split(&store, 0.7, 48).unwrap();
    let stats = NormStats::fit(&train);
    let train = normalize(&train, &stats).unwrap();
    let test = normalize(&test, &stats).unwrap();

    let spec = ModelSpec::dlinear(24, 24).unwrap();
    let clients: Vec<ClientState> = train
        .clients
        .iter()
        .enumerate()
        .map(|(i, c)| ClientState {
            id: c.id.clone(),
            train: make_windows(&c.values, 24, 24, 1).unwrap(),
            seed: derive_seed(seed, "client", i as u64),
        })
        .collect();
    let test_batches: Vec<Batch> = test
        .clients
        .iter()
        .map(|c| {
            let w = make_windows(&c.values, 24, 24, 1).unwrap();
            let pairs: Vec<(&[f64], &[f64])> = w
                .pairs
                .iter()
                .map(|p| (p.x.as_slice(), p.y.as_slice()))
                .collect();
            Batch::from_pairs(&pairs).unwrap()
        })
        .collect();

    let cfg = TrainConfig {
        lr: 5e-3,
        ..TrainConfig::default()
    };
    let mut global = init_params(&spec, derive_seed(seed, "init", 0));
    for round in 0..12 {
        let ctx = RoundContext {
            round,
            spec: &spec,
            clients: &clients,
            mixin: None,
            cfg: &cfg,
            participation: 1.0,
            parallel: true,
            master_seed: seed,
            test_batches: &test_batches,
        };
        let outcome = run_round(&ctx, &global).unwrap();
        let mean_train: f64 = outcome
            .report
            .client_train_loss
            .iter()
            .map(|(_, l)| l)
            .sum::<f64>()
            / outcome.report.client_train_loss.len() as f64;
        println!(
            "round {round:2}: train {mean_train:.4}  test MSE {:.4}  up/down per client {} / {} bytes",
            outcome.report.test_mse, outcome.report.bytes_up, outcome.report.bytes_down
        );
        global = outcome.new_global;
    }
}
