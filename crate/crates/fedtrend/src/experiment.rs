//! End-to-end experiment orchestration: the round loop with scheduled
//! trajectory recording, synthetic-dataset builds, dissemination and
//! post-aggregation refinement, plus the centralized and plain federated
//! baselines and the ablation switches.

use std::path::PathBuf;

use thiserror::Error;

use crate::condense::{
    build_dct, build_dgt, CondenseConfig, SyntheticDataset, TrajectoryBankCt, TrajectoryBankGt,
};
use crate::data::{
    gen_fleet, load_csv, make_windows, normalize, split, CsvLayout, DataError, FleetConfig,
    NormStats, SeriesStore, WindowDataset,
};
use crate::flcore::{
    evaluate, run_round, ClientState, FlError, RoundContext, RoundReport, TrainConfig,
};
use crate::logging;
use crate::models::{init_params, loss_on_tape, Batch, ModelError, ModelSpec};
use crate::numcore::{ParamVector, Tape};
use crate::rng::{derive_seed, Rng};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Fl(#[from] FlError),
}

/// Training method selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Centralized,
    FedAvg,
    FedProx,
    FedTrend,
    FedAvgLdp,
    FedTrendLdp,
}

impl Method {
    pub fn parse(s: &str) -> Option<Method> {
        Some(match s.to_ascii_lowercase().as_str() {
            "centralized" => Method::Centralized,
            "fedavg" => Method::FedAvg,
            "fedprox" => Method::FedProx,
            "fedtrend" => Method::FedTrend,
            "fedavg+ldp" => Method::FedAvgLdp,
            "fedtrend+ldp" => Method::FedTrendLdp,
            _ => return None,
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            Method::Centralized => "centralized",
            Method::FedAvg => "fedavg",
            Method::FedProx => "fedprox",
            Method::FedTrend => "fedtrend",
            Method::FedAvgLdp => "fedavg+ldp",
            Method::FedTrendLdp => "fedtrend+ldp",
        }
    }

    pub fn is_fedtrend(&self) -> bool {
        matches!(self, Method::FedTrend | Method::FedTrendLdp)
    }

    pub fn uses_ldp(&self) -> bool {
        matches!(self, Method::FedAvgLdp | Method::FedTrendLdp)
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Component switches mirroring the ablation rows: `no_cu` records all-ones
/// consistency masks, `no_dct` disables the client-trajectory dataset,
/// `no_dgt` disables the global-trajectory refinement. All three on turn
/// the method into plain weighted averaging.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct AblationFlags {
    pub no_cu: bool,
    pub no_dct: bool,
    pub no_dgt: bool,
}

impl AblationFlags {
    pub fn label_suffix(&self) -> String {
        let mut s = String::new();
        if self.no_cu {
            s.push_str("-cu");
        }
        if self.no_dct {
            s.push_str("-dct");
        }
        if self.no_dgt {
            s.push_str("-dgt");
        }
        s
    }
}

/// Where the experiment's series come from.
#[derive(Debug, Clone)]
pub enum DataSource {
    Fleet(FleetConfig),
    Csv { path: PathBuf, layout: CsvLayout },
}

/// Full experiment settings; defaults reproduce the reference setup
/// (80 rounds, rebuild intervals of 10, batch 256, SGD 5e-4).
#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub method: Method,
    pub rounds: usize,
    pub l_ct: usize,
    pub l_gt: usize,
    pub refine_steps: usize,
    pub refine_lr: f64,
    pub train: TrainConfig,
    pub condense_ct: CondenseConfig,
    pub condense_gt: CondenseConfig,
    pub model: ModelSpec,
    pub data: DataSource,
    pub seed: u64,
    pub train_frac: f64,
    pub participation: f64,
    pub parallel_clients: bool,
    pub ablation: AblationFlags,
}

impl ExperimentConfig {
    pub fn defaults(model: ModelSpec, data: DataSource) -> Self {
        ExperimentConfig {
            method: Method::FedTrend,
            rounds: 80,
            l_ct: 10,
            l_gt: 10,
            refine_steps: 10,
            refine_lr: 5e-4,
            train: TrainConfig::default(),
            condense_ct: CondenseConfig::ct_default(),
            condense_gt: CondenseConfig::gt_default(),
            model,
            data,
            seed: 42,
            train_frac: 0.7,
            participation: 1.0,
            parallel_clients: true,
            ablation: AblationFlags::default(),
        }
    }

    /// A small synthetic-fleet setup that converges within the default 80
    /// rounds on a couple of CPU cores: longer series give each client a
    /// few optimizer steps per round, the client learning rate is raised
    /// above the cross-device reference value, and the condensation rate
    /// is high enough for the matching loss to move in 300 iterations.
    pub fn demo_fleet(heterogeneity: f64) -> Self {
        let model = ModelSpec::dlinear(24, 24).expect("default model");
        let fleet = FleetConfig {
            series_len: 2000,
            heterogeneity,
            trend_slope: (-5e-4, 5e-4),
            noise_std: 0.05,
            ..FleetConfig::default()
        };
        let mut cfg = Self::defaults(model, DataSource::Fleet(fleet));
        cfg.train.lr = 5e-3;
        cfg.condense_ct.adam_lr = 1e-2;
        cfg.condense_gt.adam_lr = 1e-2;
        cfg
    }

    /// Rejects contradictory settings before round zero.
    pub fn validate(&self) -> Result<(), ExperimentError> {
        let fail = |msg: String| Err(ExperimentError::Config(msg));
        if self.rounds < 1 {
            return fail("rounds must be >= 1".into());
        }
        if self.l_ct < 1 || self.l_gt < 1 {
            return fail("rebuild intervals must be >= 1".into());
        }
        if self.method.is_fedtrend() && !self.ablation.no_dct && self.l_ct > self.rounds {
            return fail(format!(
                "l_ct {} exceeds rounds {}; the client synthetic dataset would never build",
                self.l_ct, self.rounds
            ));
        }
        if self.method.is_fedtrend()
            && !self.ablation.no_dgt
            && self.condense_gt.seg_len >= self.l_gt
        {
            return fail(format!(
                "gt segment length {} must be smaller than the rebuild interval {}",
                self.condense_gt.seg_len, self.l_gt
            ));
        }
        if !(self.train_frac > 0.0 && self.train_frac < 1.0) {
            return fail(format!(
                "train_frac must be in (0, 1), got {}",
                self.train_frac
            ));
        }
        if !(self.participation > 0.0 && self.participation <= 1.0) {
            return fail(format!(
                "participation must be in (0, 1], got {}",
                self.participation
            ));
        }
        if self.train.batch_size < 1 {
            return fail("batch_size must be >= 1".into());
        }
        if self.train.lr < 0.0 || self.refine_lr < 0.0 {
            return fail("learning rates must be >= 0".into());
        }
        if self.train.fedprox_mu < 0.0 || self.train.ldp_lambda < 0.0 {
            return fail("fedprox_mu and ldp_lambda must be >= 0".into());
        }
        self.model.validate()?;
        self.condense_ct
            .validate()
            .map_err(|e| ExperimentError::Config(e.to_string()))?;
        self.condense_gt
            .validate()
            .map_err(|e| ExperimentError::Config(e.to_string()))?;
        if let DataSource::Fleet(f) = &self.data {
            f.validate()?;
        }
        Ok(())
    }

    /// Training config with the method-implied defaults filled in: the
    /// `+ldp` variants default to noise scale 1e-3, and `fedprox` defaults
    /// to mu 0.01 when unset.
    pub fn effective_train(&self) -> TrainConfig {
        let mut cfg = self.train.clone();
        if self.method.uses_ldp() && cfg.ldp_lambda == 0.0 {
            cfg.ldp_lambda = 1e-3;
        }
        if !self.method.uses_ldp() {
            cfg.ldp_lambda = self.train.ldp_lambda;
        }
        if self.method == Method::FedProx && cfg.fedprox_mu == 0.0 {
            cfg.fedprox_mu = 0.01;
        }
        cfg
    }
}

/// One synthetic-dataset build with its matching-loss trace.
#[derive(Debug, Clone)]
pub struct BuildRecord {
    pub dataset: SyntheticDataset,
    pub trace: Vec<f64>,
}

/// Everything a finished run produced.
#[derive(Debug)]
pub struct RunResult {
    pub reports: Vec<RoundReport>,
    pub final_mse: f64,
    pub final_mae: f64,
    pub final_params: ParamVector,
    pub ct_builds: Vec<BuildRecord>,
    pub gt_builds: Vec<BuildRecord>,
}

/// Finetunes the aggregated global model on the synthetic dataset with
/// `steps` full-batch gradient steps. An empty dataset or zero steps is the
/// identity; a non-finite loss returns the unrefined input so a bad build
/// cannot destroy the round.
pub fn refine_global(
    spec: &ModelSpec,
    global: ParamVector,
    d_gt: Option<&SyntheticDataset>,
    steps: usize,
    lr: f64,
) -> ParamVector {
    let Some(d_gt) = d_gt else { return global };
    if steps == 0 || d_gt.size == 0 {
        return global;
    }
    let windows = d_gt.to_windows();
    let pairs: Vec<(&[f64], &[f64])> = windows
        .pairs
        .iter()
        .map(|p| (p.x.as_slice(), p.y.as_slice()))
        .collect();
    let Ok(batch) = Batch::from_pairs(&pairs) else {
        return global;
    };
    let mut params = global.clone();
    for _ in 0..steps {
        let tape = Tape::new();
        let p = tape.leaf(params.to_tensor());
        let x = tape.constant(batch.x.clone());
        let y = tape.constant(batch.y.clone());
        let Ok(objective) = loss_on_tape(&tape, spec, p, x, y) else {
            return global;
        };
        if !tape.value_item(objective).is_finite() {
            logging::warn("refinement loss is non-finite; keeping the unrefined global");
            return global;
        }
        let Ok(grads) = tape.grad(objective, &[p]) else {
            return global;
        };
        for (w, g) in params.flat_mut().iter_mut().zip(grads[0].data()) {
            *w -= lr * g;
        }
    }
    params
}

struct PreparedData {
    clients: Vec<ClientState>,
    test_batches: Vec<Batch>,
}

fn prepare_data(cfg: &ExperimentConfig) -> Result<PreparedData, ExperimentError> {
    let store: SeriesStore = match &cfg.data {
        DataSource::Fleet(fleet) => gen_fleet(fleet, derive_seed(cfg.seed, "fleet", 0))?,
        DataSource::Csv { path, layout } => load_csv(path, *layout)?,
    };
    let min_len = cfg.model.input_len + cfg.model.output_len;
    let (train_store, test_store) = split(&store, cfg.train_frac, min_len)?;
    let stats = NormStats::fit(&train_store);
    let train_store = normalize(&train_store, &stats)?;
    let test_store = normalize(&test_store, &stats)?;

    let mut clients = Vec::with_capacity(train_store.len());
    let mut test_batches = Vec::with_capacity(test_store.len());
    for (idx, (train_c, test_c)) in train_store
        .clients
        .iter()
        .zip(&test_store.clients)
        .enumerate()
    {
        let train = make_windows(
            &train_c.values,
            cfg.model.input_len,
            cfg.model.output_len,
            1,
        )?;
        let test = make_windows(&test_c.values, cfg.model.input_len, cfg.model.output_len, 1)?;
        clients.push(ClientState {
            id: train_c.id.clone(),
            train,
            seed: derive_seed(cfg.seed, "client", idx as u64),
        });
        let pairs: Vec<(&[f64], &[f64])> = test
            .pairs
            .iter()
            .map(|p| (p.x.as_slice(), p.y.as_slice()))
            .collect();
        test_batches.push(Batch::from_pairs(&pairs)?);
    }
    Ok(PreparedData {
        clients,
        test_batches,
    })
}

/// Runs the configured experiment end to end, producing one report per
/// round. Identical `(config, seed)` pairs produce identical results,
/// including under parallel client execution.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunResult, ExperimentError> {
    cfg.validate()?;
    let data = prepare_data(cfg)?;
    match cfg.method {
        Method::Centralized => run_centralized(cfg, &data),
        _ => run_federated(cfg, &data),
    }
}

/// Runs the ablated variant of the synthetic-data method.
pub fn ablate(cfg: &ExperimentConfig, flags: AblationFlags) -> Result<RunResult, ExperimentError> {
    let mut cfg = cfg.clone();
    cfg.method = if cfg.method.uses_ldp() {
        Method::FedTrendLdp
    } else {
        Method::FedTrend
    };
    cfg.ablation = flags;
    run_experiment(&cfg)
}

fn run_federated(
    cfg: &ExperimentConfig,
    data: &PreparedData,
) -> Result<RunResult, ExperimentError> {
    let spec = &cfg.model;
    let train_cfg = cfg.effective_train();
    let mut global = init_params(spec, derive_seed(cfg.seed, "init", 0));

    let build_ct_enabled = cfg.method.is_fedtrend() && !cfg.ablation.no_dct;
    let build_gt_enabled = cfg.method.is_fedtrend() && !cfg.ablation.no_dgt;

    let mut ct_bank = TrajectoryBankCt::new(cfg.l_ct);
    let mut gt_bank = TrajectoryBankGt::new();
    if build_ct_enabled {
        for client in &data.clients {
            ct_bank
                .record_client_update(&client.id, &global, 0)
                .expect("initial record");
        }
    }
    if build_gt_enabled {
        gt_bank.push(0, global.clone()).expect("initial global");
    }

    let mut d_ct_windows: Option<WindowDataset> = None;
    let mut d_gt: Option<SyntheticDataset> = None;
    let mut reports = Vec::with_capacity(cfg.rounds);
    let mut ct_builds = Vec::new();
    let mut gt_builds = Vec::new();

    for round in 0..cfg.rounds {
        let ctx = RoundContext {
            round,
            spec,
            clients: &data.clients,
            mixin: d_ct_windows.as_ref(),
            cfg: &train_cfg,
            participation: cfg.participation,
            parallel: cfg.parallel_clients,
            master_seed: cfg.seed,
            test_batches: &data.test_batches,
        };
        let outcome = run_round(&ctx, &global)?;
        let mut report = outcome.report;
        let aggregated = outcome.new_global;

        if build_ct_enabled {
            for (idx, params) in &outcome.updates {
                ct_bank
                    .record_client_update(&data.clients[*idx].id, params, round + 1)
                    .map_err(|e| ExperimentError::Config(e.to_string()))?;
            }
        }
        if build_gt_enabled {
            gt_bank
                .push(round + 1, aggregated.clone())
                .map_err(|e| ExperimentError::Config(e.to_string()))?;
        }

        // Refinement consumes only datasets built at strictly earlier
        // rounds; the rebuilds below happen afterwards.
        let next_global = if build_gt_enabled && d_gt.is_some() && cfg.refine_steps > 0 {
            let refined = refine_global(
                spec,
                aggregated.clone(),
                d_gt.as_ref(),
                cfg.refine_steps,
                cfg.refine_lr,
            );
            if !refined.bitwise_eq(&aggregated) {
                let (mse, mae) = evaluate(spec, &refined, &data.test_batches)?;
                report.test_mse = mse;
                report.test_mae = mae;
            }
            refined
        } else {
            aggregated
        };

        if build_ct_enabled && (round + 1) % cfg.l_ct == 0 {
            let seed = derive_seed(cfg.seed, "build-ct", (round + 1) as u64);
            match build_dct(&mut ct_bank, spec, &cfg.condense_ct, seed) {
                Ok((dataset, trace)) => {
                    report.bytes_down_synth += dataset.payload_bytes();
                    report.bytes_down += dataset.payload_bytes();
                    d_ct_windows = Some(dataset.to_windows());
                    ct_builds.push(BuildRecord { dataset, trace });
                }
                Err(e) => {
                    logging::warn(&format!(
                        "client-trajectory build failed at round {round}: {e}; keeping the previous dataset"
                    ));
                }
            }
        }
        if build_gt_enabled && (round + 1) % cfg.l_gt == 0 {
            let seed = derive_seed(cfg.seed, "build-gt", (round + 1) as u64);
            match build_dgt(&mut gt_bank, spec, &cfg.condense_gt, seed) {
                Ok((dataset, trace)) => {
                    gt_builds.push(BuildRecord {
                        dataset: dataset.clone(),
                        trace,
                    });
                    d_gt = Some(dataset);
                }
                Err(e) => {
                    logging::warn(&format!(
                        "global-trajectory build failed at round {round}: {e}; keeping the previous dataset"
                    ));
                }
            }
        }

        reports.push(report);
        global = next_global;
    }
    debug_assert_eq!(reports.len(), cfg.rounds);
    let final_mse = reports.last().map(|r| r.test_mse).unwrap_or(f64::NAN);
    let final_mae = reports.last().map(|r| r.test_mae).unwrap_or(f64::NAN);
    Ok(RunResult {
        reports,
        final_mse,
        final_mae,
        final_params: global,
        ct_builds,
        gt_builds,
    })
}

fn run_centralized(
    cfg: &ExperimentConfig,
    data: &PreparedData,
) -> Result<RunResult, ExperimentError> {
    let spec = &cfg.model;
    let train_cfg = cfg.effective_train();
    let mut params = init_params(spec, derive_seed(cfg.seed, "init", 0));

    // Pool every client's windows; the step budget per "round" matches the
    // per-client step count of a federated round.
    let pooled: Vec<(&[f64], &[f64])> = data
        .clients
        .iter()
        .flat_map(|c| {
            c.train
                .pairs
                .iter()
                .map(|p| (p.x.as_slice(), p.y.as_slice()))
        })
        .collect();
    if pooled.is_empty() {
        return Err(ExperimentError::Config("no training windows".into()));
    }
    let batch_size = train_cfg.batch_size.max(1);
    let steps_per_client: usize = data
        .clients
        .iter()
        .map(|c| c.train.len().div_ceil(batch_size))
        .sum::<usize>()
        .div_ceil(data.clients.len().max(1));
    let steps_per_round = steps_per_client.max(1) * train_cfg.local_epochs.max(1);

    let mut rng = Rng::from_seed(derive_seed(cfg.seed, "centralized", 0));
    let mut order: Vec<usize> = (0..pooled.len()).collect();
    rng.shuffle(&mut order);
    let mut cursor = 0usize;
    let mut velocity = vec![0.0; params.len()];
    let mut reports = Vec::with_capacity(cfg.rounds);

    for round in 0..cfg.rounds {
        let started = std::time::Instant::now();
        let mut loss_sum = 0.0;
        for _ in 0..steps_per_round {
            if cursor >= order.len() {
                rng.shuffle(&mut order);
                cursor = 0;
            }
            let take = batch_size.min(order.len() - cursor);
            let chunk: Vec<(&[f64], &[f64])> = order[cursor..cursor + take]
                .iter()
                .map(|&i| pooled[i])
                .collect();
            cursor += take;
            let batch = Batch::from_pairs(&chunk)?;
            let tape = Tape::new();
            let p = tape.leaf(params.to_tensor());
            let x = tape.constant(batch.x);
            let y = tape.constant(batch.y);
            let objective = loss_on_tape(&tape, spec, p, x, y)?;
            let value = tape.value_item(objective);
            if !value.is_finite() {
                return Err(ExperimentError::Config(format!(
                    "centralized loss diverged at round {round}"
                )));
            }
            loss_sum += value;
            if train_cfg.lr != 0.0 {
                let grads = tape.grad(objective, &[p]).map_err(FlError::from)?;
                for ((v, g), w) in velocity
                    .iter_mut()
                    .zip(grads[0].data())
                    .zip(params.flat_mut())
                {
                    *v = train_cfg.momentum * *v + g;
                    *w -= train_cfg.lr * *v;
                }
            }
        }
        let (test_mse, test_mae) = evaluate(spec, &params, &data.test_batches)?;
        reports.push(RoundReport {
            round,
            client_train_loss: vec![(
                "pooled".to_string(),
                loss_sum / steps_per_round.max(1) as f64,
            )],
            test_mse,
            test_mae,
            bytes_up: 0,
            bytes_down: 0,
            bytes_down_synth: 0,
            wall_time: started.elapsed(),
        });
    }
    let final_mse = reports.last().map(|r| r.test_mse).unwrap_or(f64::NAN);
    let final_mae = reports.last().map(|r| r.test_mae).unwrap_or(f64::NAN);
    Ok(RunResult {
        reports,
        final_mse,
        final_mae,
        final_params: params,
        ct_builds: Vec::new(),
        gt_builds: Vec::new(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fleet_cfg(heterogeneity: f64, series_len: usize) -> FleetConfig {
        FleetConfig {
            num_clients: 4,
            series_len,
            heterogeneity,
            ..FleetConfig::default()
        }
    }

    fn quick_config(method: Method, rounds: usize) -> ExperimentConfig {
        let model = ModelSpec::dlinear_with_kernel(8, 4, 5).unwrap();
        let mut cfg = ExperimentConfig::defaults(model, DataSource::Fleet(fleet_cfg(0.8, 120)));
        cfg.method = method;
        cfg.rounds = rounds;
        cfg.l_ct = 4;
        cfg.l_gt = 4;
        cfg.condense_ct = CondenseConfig {
            iterations: 20,
            size: 6,
            inner_steps: 2,
            ..CondenseConfig::ct_default()
        };
        cfg.condense_gt = CondenseConfig {
            iterations: 20,
            size: 4,
            inner_steps: 2,
            seg_len: 2,
            ..CondenseConfig::gt_default()
        };
        cfg.train.batch_size = 32;
        cfg.seed = 7;
        cfg
    }

    #[test]
    fn reports_one_per_round() {
        let cfg = quick_config(Method::FedAvg, 6);
        let result = run_experiment(&cfg).unwrap();
        assert_eq!(result.reports.len(), 6);
        for (i, r) in result.reports.iter().enumerate() {
            assert_eq!(r.round, i);
            assert!(r.test_mse.is_finite());
        }
    }

    #[test]
    fn identical_seeds_reproduce_bitwise() {
        let cfg = quick_config(Method::FedTrend, 8);
        let a = run_experiment(&cfg).unwrap();
        let b = run_experiment(&cfg).unwrap();
        assert!(a.final_params.bitwise_eq(&b.final_params));
        for (ra, rb) in a.reports.iter().zip(&b.reports) {
            assert_eq!(ra.test_mse.to_bits(), rb.test_mse.to_bits());
            assert_eq!(ra.test_mae.to_bits(), rb.test_mae.to_bits());
        }
    }

    #[test]
    fn parallel_flag_does_not_change_results() {
        let mut cfg = quick_config(Method::FedTrend, 6);
        let par = run_experiment(&cfg).unwrap();
        cfg.parallel_clients = false;
        let seq = run_experiment(&cfg).unwrap();
        assert!(par.final_params.bitwise_eq(&seq.final_params));
    }

    #[test]
    fn all_ablations_reduce_to_fedavg_bitwise() {
        let cfg = quick_config(Method::FedAvg, 8);
        let plain = run_experiment(&cfg).unwrap();
        let ablated = ablate(
            &cfg,
            AblationFlags {
                no_cu: true,
                no_dct: true,
                no_dgt: true,
            },
        )
        .unwrap();
        assert!(plain.final_params.bitwise_eq(&ablated.final_params));
        for (a, b) in plain.reports.iter().zip(&ablated.reports) {
            assert_eq!(a.test_mse.to_bits(), b.test_mse.to_bits());
            assert_eq!(a.bytes_down, b.bytes_down);
        }
    }

    #[test]
    fn fedavg_matches_manual_round_loop_bitwise() {
        let cfg = quick_config(Method::FedAvg, 5);
        let via_experiment = run_experiment(&cfg).unwrap();

        // the same loop written directly against the round engine
        let data = prepare_data(&cfg).unwrap();
        let train_cfg = cfg.effective_train();
        let mut global = init_params(&cfg.model, derive_seed(cfg.seed, "init", 0));
        for round in 0..cfg.rounds {
            let ctx = RoundContext {
                round,
                spec: &cfg.model,
                clients: &data.clients,
                mixin: None,
                cfg: &train_cfg,
                participation: 1.0,
                parallel: true,
                master_seed: cfg.seed,
                test_batches: &data.test_batches,
            };
            global = run_round(&ctx, &global).unwrap().new_global;
        }
        assert!(via_experiment.final_params.bitwise_eq(&global));
    }

    #[test]
    fn build_schedule_follows_intervals() {
        let cfg = quick_config(Method::FedTrend, 12);
        let result = run_experiment(&cfg).unwrap();
        // l_ct = l_gt = 4 over 12 rounds: builds at rounds 4, 8, 12
        assert_eq!(result.ct_builds.len(), 3);
        assert_eq!(result.gt_builds.len(), 3);
        for (k, b) in result.ct_builds.iter().enumerate() {
            assert_eq!(b.dataset.build_round, (k + 1) * 4);
        }
        // synthetic payload is accounted exactly on build rounds
        for (i, r) in result.reports.iter().enumerate() {
            if (i + 1) % 4 == 0 {
                assert!(r.bytes_down_synth > 0, "round {i} should carry payload");
            } else {
                assert_eq!(r.bytes_down_synth, 0, "round {i} should not");
            }
        }
    }

    #[test]
    fn no_dct_diverges_from_full_only_after_first_build_boundary() {
        let cfg = quick_config(Method::FedTrend, 10);
        let full = run_experiment(&cfg).unwrap();
        let no_dct = ablate(
            &cfg,
            AblationFlags {
                no_dct: true,
                ..Default::default()
            },
        )
        .unwrap();
        // l_ct = l_gt = 4: the first synthetic artifacts appear at the end
        // of round 3, so rounds 0..=3 must match exactly
        for i in 0..4 {
            assert_eq!(
                full.reports[i].test_mse.to_bits(),
                no_dct.reports[i].test_mse.to_bits(),
                "round {i} should be identical"
            );
        }
        let diverged = (4..10)
            .any(|i| full.reports[i].test_mse.to_bits() != no_dct.reports[i].test_mse.to_bits());
        assert!(diverged, "disabling the mix-in must change later rounds");
    }

    #[test]
    fn refine_zero_steps_is_identity() {
        let spec = ModelSpec::dlinear_with_kernel(6, 3, 3).unwrap();
        let global = init_params(&spec, 3);
        let out = refine_global(&spec, global.clone(), None, 10, 1e-3);
        assert!(out.bitwise_eq(&global));
    }

    #[test]
    fn refinement_reduces_loss_on_synthetic_data() {
        let spec = ModelSpec::dlinear_with_kernel(6, 3, 3).unwrap();
        let global = init_params(&spec, 3);
        let mut rng = Rng::from_seed(8);
        let size = 6;
        let synth = SyntheticDataset {
            input_len: 6,
            output_len: 3,
            size,
            xs: (0..size * 6).map(|_| rng.normal()).collect(),
            ys: (0..size * 3).map(|_| rng.normal()).collect(),
            opt: crate::condense::AdamState {
                m: vec![],
                v: vec![],
                t: 0,
            },
            provenance: crate::condense::Provenance::Gt,
            build_round: 0,
        };
        let windows = synth.to_windows();
        let pairs: Vec<(&[f64], &[f64])> = windows
            .pairs
            .iter()
            .map(|p| (p.x.as_slice(), p.y.as_slice()))
            .collect();
        let batch = Batch::from_pairs(&pairs).unwrap();
        let before = crate::models::loss(&spec, &global, &batch).unwrap();
        let refined = refine_global(&spec, global, Some(&synth), 10, 1e-3);
        let after = crate::models::loss(&spec, &refined, &batch).unwrap();
        assert!(
            after <= before,
            "refinement must not increase loss: {before} -> {after}"
        );
    }

    #[test]
    fn contradictory_config_rejected_before_round_zero() {
        let mut cfg = quick_config(Method::FedTrend, 3);
        cfg.l_ct = 10; // larger than rounds
        assert!(matches!(
            run_experiment(&cfg),
            Err(ExperimentError::Config(_))
        ));
    }

    #[test]
    fn centralized_runs_and_improves() {
        let mut cfg = quick_config(Method::Centralized, 20);
        cfg.train.lr = 5e-3;
        let result = run_experiment(&cfg).unwrap();
        assert_eq!(result.reports.len(), 20);
        let first = result.reports.first().unwrap().test_mse;
        let last = result.final_mse;
        assert!(
            last < first,
            "training should reduce MSE: {first} -> {last}"
        );
        assert_eq!(result.reports[0].bytes_up, 0);
    }
}
