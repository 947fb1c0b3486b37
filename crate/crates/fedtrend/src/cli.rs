//! Command-line entry point: TOML config with flag overrides, experiment
//! execution, fleet generation and synthetic-dataset inspection.
//!
//! Subcommands: `run`, `gen-data`, `inspect-synth`, `ablate`. Exit codes:
//! 0 success, 1 runtime failure, 2 usage or config error. The only
//! environment variable read is `FEDTREND_LOG` (log level).

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::condense::{CondenseConfig, Provenance, SyntheticDataset};
use crate::data::{gen_fleet, store_to_csv, CsvLayout, FleetConfig};
use crate::experiment::{
    ablate, run_experiment, AblationFlags, DataSource, ExperimentConfig, Method, RunResult,
};
use crate::flcore::{NoiseKind, TrainConfig};
use crate::models::{ModelSpec, DEFAULT_MLP_HIDDEN};
use crate::numcore::{ParamLayout, ParamVector};

// ---------------------------------------------------------------------
// config file schema
// ---------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub method: String,
    pub seed: u64,
    pub rounds: usize,
    pub model: ModelSection,
    pub train: TrainSection,
    pub data: DataSection,
    pub fedtrend: FedTrendSection,
    pub condense_ct: CondenseSection,
    pub condense_gt: CondenseSection,
    pub run: RunSection,
}

impl Default for FileConfig {
    fn default() -> Self {
        FileConfig {
            method: "fedtrend".into(),
            seed: 42,
            rounds: 80,
            model: ModelSection::default(),
            train: TrainSection::default(),
            data: DataSection::default(),
            fedtrend: FedTrendSection::default(),
            condense_ct: CondenseSection::ct(),
            condense_gt: CondenseSection::gt(),
            run: RunSection::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub kind: String,
    pub input_len: usize,
    pub output_len: usize,
    /// Moving-average width; 0 selects the clamped default.
    pub kernel: usize,
    pub hidden: Vec<usize>,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            kind: "dlinear".into(),
            input_len: 24,
            output_len: 24,
            kernel: 0,
            hidden: DEFAULT_MLP_HIDDEN.to_vec(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub local_epochs: usize,
    pub fedprox_mu: f64,
    pub ldp_lambda: f64,
    pub ldp_noise: String,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            lr: 5e-4,
            momentum: 0.9,
            batch_size: 256,
            local_epochs: 1,
            fedprox_mu: 0.0,
            ldp_lambda: 0.0,
            ldp_noise: "gaussian".into(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// `fleet` or `csv`.
    pub source: String,
    pub csv_path: String,
    /// `columns-as-clients` or `single-client`.
    pub csv_layout: String,
    pub train_frac: f64,
    pub fleet: FleetSection,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            source: "fleet".into(),
            csv_path: String::new(),
            csv_layout: "columns-as-clients".into(),
            train_frac: 0.7,
            fleet: FleetSection::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct FleetSection {
    pub num_clients: usize,
    pub series_len: usize,
    pub amplitude: [f64; 2],
    pub frequency: [f64; 2],
    pub phase: [f64; 2],
    pub trend_slope: [f64; 2],
    pub noise_std: f64,
    pub heterogeneity: f64,
}

impl Default for FleetSection {
    fn default() -> Self {
        let f = FleetConfig::default();
        FleetSection {
            num_clients: f.num_clients,
            series_len: f.series_len,
            amplitude: [f.amplitude.0, f.amplitude.1],
            frequency: [f.frequency.0, f.frequency.1],
            phase: [f.phase.0, f.phase.1],
            trend_slope: [f.trend_slope.0, f.trend_slope.1],
            noise_std: f.noise_std,
            heterogeneity: f.heterogeneity,
        }
    }
}

impl FleetSection {
    pub fn to_config(&self) -> FleetConfig {
        FleetConfig {
            num_clients: self.num_clients,
            series_len: self.series_len,
            amplitude: (self.amplitude[0], self.amplitude[1]),
            frequency: (self.frequency[0], self.frequency[1]),
            phase: (self.phase[0], self.phase[1]),
            trend_slope: (self.trend_slope[0], self.trend_slope[1]),
            noise_std: self.noise_std,
            heterogeneity: self.heterogeneity,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct FedTrendSection {
    pub l_ct: usize,
    pub l_gt: usize,
    pub refine_steps: usize,
    pub refine_lr: f64,
}

impl Default for FedTrendSection {
    fn default() -> Self {
        FedTrendSection {
            l_ct: 10,
            l_gt: 10,
            refine_steps: 10,
            refine_lr: 5e-4,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct CondenseSection {
    pub iterations: usize,
    pub adam_lr: f64,
    pub inner_steps: usize,
    pub inner_lr: f64,
    pub size: usize,
    pub seg_len: usize,
}

impl Default for CondenseSection {
    fn default() -> Self {
        CondenseSection::ct()
    }
}

impl CondenseSection {
    fn ct() -> Self {
        let c = CondenseConfig::ct_default();
        CondenseSection {
            iterations: c.iterations,
            adam_lr: c.adam_lr,
            inner_steps: c.inner_steps,
            inner_lr: c.inner_lr,
            size: c.size,
            seg_len: c.seg_len,
        }
    }

    fn gt() -> Self {
        let c = CondenseConfig::gt_default();
        CondenseSection {
            iterations: c.iterations,
            adam_lr: c.adam_lr,
            inner_steps: c.inner_steps,
            inner_lr: c.inner_lr,
            size: c.size,
            seg_len: c.seg_len,
        }
    }

    fn to_config(&self) -> CondenseConfig {
        CondenseConfig {
            iterations: self.iterations,
            adam_lr: self.adam_lr,
            inner_steps: self.inner_steps,
            inner_lr: self.inner_lr,
            size: self.size,
            seg_len: self.seg_len,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub participation: f64,
    pub parallel_clients: bool,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection {
            participation: 1.0,
            parallel_clients: true,
        }
    }
}

impl FileConfig {
    pub fn parse_toml(text: &str) -> Result<Self, String> {
        toml::from_str(text).map_err(|e| format!("config parse error: {e}"))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn model_spec(&self) -> Result<ModelSpec, String> {
        match self.model.kind.to_ascii_lowercase().as_str() {
            "dlinear" => if self.model.kernel == 0 {
                ModelSpec::dlinear(self.model.input_len, self.model.output_len)
            } else {
                ModelSpec::dlinear_with_kernel(
                    self.model.input_len,
                    self.model.output_len,
                    self.model.kernel,
                )
            }
            .map_err(|e| format!("model: {e}")),
            "mlp" => ModelSpec::mlp(
                self.model.input_len,
                self.model.output_len,
                self.model.hidden.clone(),
            )
            .map_err(|e| format!("model: {e}")),
            other => Err(format!("model.kind must be dlinear or mlp, got {other:?}")),
        }
    }

    pub fn to_experiment(&self) -> Result<ExperimentConfig, String> {
        let method = Method::parse(&self.method)
            .ok_or_else(|| format!("unknown method {:?}", self.method))?;
        let model = self.model_spec()?;
        let data = match self.data.source.to_ascii_lowercase().as_str() {
            "fleet" => DataSource::Fleet(self.data.fleet.to_config()),
            "csv" => {
                if self.data.csv_path.is_empty() {
                    return Err("data.csv_path required when data.source = \"csv\"".into());
                }
                let layout = match self.data.csv_layout.to_ascii_lowercase().as_str() {
                    "columns-as-clients" => CsvLayout::ColumnsAsClients,
                    "single-client" => CsvLayout::SingleClient,
                    other => {
                        return Err(format!(
                            "data.csv_layout must be columns-as-clients or single-client, got {other:?}"
                        ))
                    }
                };
                DataSource::Csv {
                    path: PathBuf::from(&self.data.csv_path),
                    layout,
                }
            }
            other => return Err(format!("data.source must be fleet or csv, got {other:?}")),
        };
        let ldp_noise = match self.train.ldp_noise.to_ascii_lowercase().as_str() {
            "gaussian" => NoiseKind::Gaussian,
            "laplace" => NoiseKind::Laplace,
            other => {
                return Err(format!(
                    "train.ldp_noise must be gaussian or laplace, got {other:?}"
                ))
            }
        };
        Ok(ExperimentConfig {
            method,
            rounds: self.rounds,
            l_ct: self.fedtrend.l_ct,
            l_gt: self.fedtrend.l_gt,
            refine_steps: self.fedtrend.refine_steps,
            refine_lr: self.fedtrend.refine_lr,
            train: TrainConfig {
                lr: self.train.lr,
                momentum: self.train.momentum,
                batch_size: self.train.batch_size,
                local_epochs: self.train.local_epochs,
                fedprox_mu: self.train.fedprox_mu,
                ldp_lambda: self.train.ldp_lambda,
                ldp_noise,
            },
            condense_ct: self.condense_ct.to_config(),
            condense_gt: self.condense_gt.to_config(),
            model,
            data,
            seed: self.seed,
            train_frac: self.data.train_frac,
            participation: self.run.participation,
            parallel_clients: self.run.parallel_clients,
            ablation: AblationFlags::default(),
        })
    }
}

// ---------------------------------------------------------------------
// command line
// ---------------------------------------------------------------------

#[derive(Debug, Parser)]
#[command(
    name = "fedtrend",
    about = "Federated time-series forecasting with trajectory-condensed synthetic data",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run an experiment and write metrics, result and model files.
    Run(RunArgs),
    /// Generate a synthetic heterogeneous fleet as CSV.
    GenData(GenDataArgs),
    /// Dump the synthetic datasets and loss traces of a finished run.
    InspectSynth(InspectArgs),
    /// Run component-ablated variants of the synthetic-data method.
    Ablate(AblateArgs),
}

#[derive(Debug, Args, Clone)]
struct RunArgs {
    /// TOML config file; flags below override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// centralized | fedavg | fedprox | fedtrend | fedavg+ldp | fedtrend+ldp
    #[arg(long)]
    method: Option<String>,
    /// Second method for a paired comparison on identical data and seed.
    #[arg(long)]
    method_b: Option<String>,
    #[arg(long)]
    rounds: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (created if missing).
    #[arg(long, default_value = "fedtrend_run")]
    out: PathBuf,
    /// Train on a CSV file instead of the generated fleet.
    #[arg(long)]
    data_csv: Option<PathBuf>,
    /// columns-as-clients | single-client
    #[arg(long)]
    csv_layout: Option<String>,
    #[arg(long)]
    clients: Option<usize>,
    #[arg(long)]
    series_len: Option<usize>,
    #[arg(long)]
    heterogeneity: Option<f64>,
}

#[derive(Debug, Args)]
struct GenDataArgs {
    /// Destination CSV path.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 8)]
    clients: usize,
    #[arg(long, default_value_t = 400)]
    series_len: usize,
    #[arg(long, default_value_t = 0.8)]
    heterogeneity: f64,
    #[arg(long, default_value_t = 0.1)]
    noise_std: f64,
    #[arg(long, default_value_t = 42)]
    seed: u64,
}

#[derive(Debug, Args)]
struct InspectArgs {
    /// Directory a previous `run` wrote.
    #[arg(long)]
    run_dir: PathBuf,
}

#[derive(Debug, Args)]
struct AblateArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Use all-ones consistency masks.
    #[arg(long)]
    no_cu: bool,
    /// Disable the client-trajectory synthetic dataset.
    #[arg(long)]
    no_dct: bool,
    /// Disable the global-trajectory refinement dataset.
    #[arg(long)]
    no_dgt: bool,
}

enum CliError {
    Usage(String),
    Runtime(String),
}

impl CliError {
    fn code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Runtime(m) => m,
        }
    }
}

/// Entry point used by the binary; returns the process exit code.
pub fn main() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap prints help/version on stdout with success
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let result = match cli.command {
        Command::Run(args) => cmd_run(&args, AblationFlags::default()),
        Command::GenData(args) => cmd_gen_data(&args),
        Command::InspectSynth(args) => cmd_inspect_synth(&args),
        Command::Ablate(args) => {
            let flags = AblationFlags {
                no_cu: args.no_cu,
                no_dct: args.no_dct,
                no_dgt: args.no_dgt,
            };
            cmd_run(&args.run, flags)
        }
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", e.message());
            e.code()
        }
    }
}

fn load_file_config(args: &RunArgs) -> Result<FileConfig, CliError> {
    let mut file = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| {
                CliError::Usage(format!("cannot read config {}: {e}", path.display()))
            })?;
            FileConfig::parse_toml(&text).map_err(CliError::Usage)?
        }
        None => FileConfig::default(),
    };
    if let Some(m) = &args.method {
        file.method = m.clone();
    }
    if let Some(r) = args.rounds {
        file.rounds = r;
    }
    if let Some(s) = args.seed {
        file.seed = s;
    }
    if let Some(path) = &args.data_csv {
        file.data.source = "csv".into();
        file.data.csv_path = path.display().to_string();
    }
    if let Some(layout) = &args.csv_layout {
        file.data.csv_layout = layout.clone();
    }
    if let Some(n) = args.clients {
        file.data.fleet.num_clients = n;
    }
    if let Some(n) = args.series_len {
        file.data.fleet.series_len = n;
    }
    if let Some(h) = args.heterogeneity {
        file.data.fleet.heterogeneity = h;
    }
    Ok(file)
}

fn method_label(method: Method, flags: &AblationFlags) -> String {
    format!("{}{}", method.name(), flags.label_suffix())
}

/// Stable metrics.csv schema; one row per round (per method in comparison
/// mode). Wall time is deliberately absent: the file must be byte-identical
/// across reruns of the same config and seed.
pub const METRICS_HEADER: &str =
    "round,method,seed,train_loss,test_mse,test_mae,bytes_up,bytes_down,bytes_down_synth";

fn metrics_rows(label: &str, seed: u64, result: &RunResult, out: &mut String) {
    for r in &result.reports {
        let train_loss = if r.client_train_loss.is_empty() {
            f64::NAN
        } else {
            r.client_train_loss.iter().map(|(_, l)| l).sum::<f64>()
                / r.client_train_loss.len() as f64
        };
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            r.round,
            label,
            seed,
            train_loss,
            r.test_mse,
            r.test_mae,
            r.bytes_up,
            r.bytes_down,
            r.bytes_down_synth
        );
    }
}

fn interleave_metrics(
    label_a: &str,
    a: &RunResult,
    label_b: &str,
    b: &RunResult,
    seed: u64,
) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{METRICS_HEADER}");
    for (ra, rb) in a.reports.iter().zip(&b.reports) {
        let mut row = String::new();
        metrics_rows_single(label_a, seed, ra, &mut row);
        metrics_rows_single(label_b, seed, rb, &mut row);
        out.push_str(&row);
    }
    out
}

fn metrics_rows_single(label: &str, seed: u64, r: &crate::flcore::RoundReport, out: &mut String) {
    let train_loss = if r.client_train_loss.is_empty() {
        f64::NAN
    } else {
        r.client_train_loss.iter().map(|(_, l)| l).sum::<f64>() / r.client_train_loss.len() as f64
    };
    let _ = writeln!(
        out,
        "{},{},{},{},{},{},{},{},{}",
        r.round,
        label,
        seed,
        train_loss,
        r.test_mse,
        r.test_mae,
        r.bytes_up,
        r.bytes_down,
        r.bytes_down_synth
    );
}

// ---------------------------------------------------------------------
// model.bin format: magic "FTPV", version u32, layout table, f64 values,
// all little-endian.
// ---------------------------------------------------------------------

pub fn write_model_bin(params: &ParamVector) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(b"FTPV");
    out.extend_from_slice(&1u32.to_le_bytes());
    let views = params.layout().views();
    out.extend_from_slice(&(views.len() as u32).to_le_bytes());
    for v in views {
        out.extend_from_slice(&(v.name.len() as u32).to_le_bytes());
        out.extend_from_slice(v.name.as_bytes());
        out.extend_from_slice(&(v.shape.len() as u32).to_le_bytes());
        for d in &v.shape {
            out.extend_from_slice(&(*d as u32).to_le_bytes());
        }
    }
    out.extend_from_slice(&(params.len() as u64).to_le_bytes());
    for w in params.flat() {
        out.extend_from_slice(&w.to_le_bytes());
    }
    out
}

pub fn read_model_bin(bytes: &[u8]) -> Result<ParamVector, String> {
    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize| -> Result<&[u8], String> {
        if *pos + n > bytes.len() {
            return Err("model file truncated".into());
        }
        let s = &bytes[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };
    let u32_at = |pos: &mut usize| -> Result<u32, String> {
        Ok(u32::from_le_bytes(take(pos, 4)?.try_into().unwrap()))
    };
    if take(&mut pos, 4)? != b"FTPV" {
        return Err("bad magic; not a model file".into());
    }
    let version = u32_at(&mut pos)?;
    if version != 1 {
        return Err(format!("unsupported model file version {version}"));
    }
    let n_views = u32_at(&mut pos)? as usize;
    let mut entries = Vec::with_capacity(n_views);
    for _ in 0..n_views {
        let name_len = u32_at(&mut pos)? as usize;
        let name = String::from_utf8(take(&mut pos, name_len)?.to_vec())
            .map_err(|_| "view name is not utf-8".to_string())?;
        let rank = u32_at(&mut pos)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u32_at(&mut pos)? as usize);
        }
        entries.push((name, shape));
    }
    let total = u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()) as usize;
    let mut flat = Vec::with_capacity(total);
    for _ in 0..total {
        flat.push(f64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()));
    }
    let layout = std::sync::Arc::new(ParamLayout::new(entries));
    ParamVector::new(layout, flat).map_err(|e| e.to_string())
}

// ---------------------------------------------------------------------
// synthetic dataset CSV: comment header with provenance and build round,
// then one window pair per row.
// ---------------------------------------------------------------------

pub fn synth_to_csv(ds: &SyntheticDataset) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "# provenance={}", ds.provenance.tag());
    let _ = writeln!(out, "# build_round={}", ds.build_round);
    let cols: Vec<String> = (0..ds.input_len)
        .map(|i| format!("x{i}"))
        .chain((0..ds.output_len).map(|i| format!("y{i}")))
        .collect();
    let _ = writeln!(out, "{}", cols.join(","));
    for i in 0..ds.size {
        let row: Vec<String> = ds.xs[i * ds.input_len..(i + 1) * ds.input_len]
            .iter()
            .chain(&ds.ys[i * ds.output_len..(i + 1) * ds.output_len])
            .map(|v| format!("{v}"))
            .collect();
        let _ = writeln!(out, "{}", row.join(","));
    }
    out
}

pub fn synth_from_csv(text: &str) -> Result<SyntheticDataset, String> {
    let mut provenance = None;
    let mut build_round = 0usize;
    let mut header: Option<Vec<String>> = None;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        if let Some(rest) = line.strip_prefix('#') {
            let rest = rest.trim();
            if let Some(v) = rest.strip_prefix("provenance=") {
                provenance = Some(match v {
                    "ct" => Provenance::Ct,
                    "gt" => Provenance::Gt,
                    other => return Err(format!("unknown provenance {other:?}")),
                });
            } else if let Some(v) = rest.strip_prefix("build_round=") {
                build_round = v.parse().map_err(|_| "bad build_round")?;
            }
            continue;
        }
        if header.is_none() {
            header = Some(line.split(',').map(|s| s.trim().to_string()).collect());
            continue;
        }
        let row: Result<Vec<f64>, _> = line.split(',').map(|s| s.trim().parse()).collect();
        rows.push(row.map_err(|_| format!("bad numeric row {line:?}"))?);
    }
    let header = header.ok_or("missing column header")?;
    let input_len = header.iter().filter(|c| c.starts_with('x')).count();
    let output_len = header.iter().filter(|c| c.starts_with('y')).count();
    if input_len == 0 || output_len == 0 {
        return Err("header must contain x* and y* columns".into());
    }
    let mut xs = Vec::with_capacity(rows.len() * input_len);
    let mut ys = Vec::with_capacity(rows.len() * output_len);
    for row in &rows {
        if row.len() != input_len + output_len {
            return Err("row width does not match header".into());
        }
        xs.extend_from_slice(&row[..input_len]);
        ys.extend_from_slice(&row[input_len..]);
    }
    Ok(SyntheticDataset {
        input_len,
        output_len,
        size: rows.len(),
        xs,
        ys,
        opt: crate::condense::AdamState {
            m: vec![],
            v: vec![],
            t: 0,
        },
        provenance: provenance.ok_or("missing provenance header")?,
        build_round,
    })
}

fn trace_to_csv(trace: &[f64]) -> String {
    let mut out = String::from("iteration,loss\n");
    for (i, v) in trace.iter().enumerate() {
        let _ = writeln!(out, "{i},{v}");
    }
    out
}

// ---------------------------------------------------------------------
// subcommands
// ---------------------------------------------------------------------

fn write_file(path: &Path, contents: &[u8]) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)
            .map_err(|e| CliError::Runtime(format!("mkdir {}: {e}", parent.display())))?;
    }
    std::fs::write(path, contents)
        .map_err(|e| CliError::Runtime(format!("write {}: {e}", path.display())))
}

fn write_synth_artifacts(out_dir: &Path, result: &RunResult) -> Result<(), CliError> {
    for (kind, builds) in [("ct", &result.ct_builds), ("gt", &result.gt_builds)] {
        for b in builds {
            let base = out_dir
                .join("synth")
                .join(format!("{}_round_{:05}", kind, b.dataset.build_round));
            write_file(
                &base.with_extension("csv"),
                synth_to_csv(&b.dataset).as_bytes(),
            )?;
            write_file(
                &base.with_extension("trace.csv"),
                trace_to_csv(&b.trace).as_bytes(),
            )?;
        }
    }
    Ok(())
}

fn cmd_run(args: &RunArgs, flags: AblationFlags) -> Result<(), CliError> {
    let started = std::time::Instant::now();
    let file = load_file_config(args)?;
    let mut cfg = file.to_experiment().map_err(CliError::Usage)?;
    cfg.ablation = flags;
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;

    let to_cli_error = |e: crate::experiment::ExperimentError| match e {
        crate::experiment::ExperimentError::Config(_)
        | crate::experiment::ExperimentError::Data(_) => CliError::Usage(e.to_string()),
        other => CliError::Runtime(other.to_string()),
    };
    let label_a = method_label(cfg.method, &flags);
    let result_a = if flags == AblationFlags::default() {
        run_experiment(&cfg)
    } else {
        ablate(&cfg, flags)
    }
    .map_err(to_cli_error)?;

    let result_b = match &args.method_b {
        Some(name) => {
            let mut cfg_b = cfg.clone();
            cfg_b.method = Method::parse(name)
                .ok_or_else(|| CliError::Usage(format!("unknown method {name:?}")))?;
            Some((
                method_label(cfg_b.method, &flags),
                run_experiment(&cfg_b).map_err(to_cli_error)?,
            ))
        }
        None => None,
    };

    let metrics = match &result_b {
        Some((label_b, b)) => interleave_metrics(&label_a, &result_a, label_b, b, cfg.seed),
        None => {
            let mut out = String::new();
            let _ = writeln!(out, "{METRICS_HEADER}");
            metrics_rows(&label_a, cfg.seed, &result_a, &mut out);
            out
        }
    };
    write_file(&args.out.join("metrics.csv"), metrics.as_bytes())?;
    write_file(
        &args.out.join("model.bin"),
        &write_model_bin(&result_a.final_params),
    )?;
    if let Some((_, b)) = &result_b {
        write_file(
            &args.out.join("model_b.bin"),
            &write_model_bin(&b.final_params),
        )?;
    }
    let snapshot = file.to_toml();
    write_file(&args.out.join("config_snapshot.toml"), snapshot.as_bytes())?;
    write_synth_artifacts(&args.out, &result_a)?;

    let result_json = serde_json::json!({
        "method": label_a,
        "seed": cfg.seed,
        "rounds": cfg.rounds,
        "final_mse": result_a.final_mse,
        "final_mae": result_a.final_mae,
        "method_b": result_b.as_ref().map(|(label, b)| serde_json::json!({
            "method": label,
            "final_mse": b.final_mse,
            "final_mae": b.final_mae,
        })),
        "wall_time_s": started.elapsed().as_secs_f64(),
        "files": {
            "metrics": "metrics.csv",
            "model": "model.bin",
            "config_snapshot": "config_snapshot.toml",
        },
        "config_snapshot": snapshot,
    });
    write_file(
        &args.out.join("result.json"),
        serde_json::to_string_pretty(&result_json)
            .expect("json serializes")
            .as_bytes(),
    )?;

    println!(
        "{label_a}: final test MSE {:.6} MAE {:.6} ({} rounds) -> {}",
        result_a.final_mse,
        result_a.final_mae,
        cfg.rounds,
        args.out.display()
    );
    if let Some((label_b, b)) = &result_b {
        println!(
            "{label_b}: final test MSE {:.6} MAE {:.6}",
            b.final_mse, b.final_mae
        );
    }
    Ok(())
}

fn cmd_gen_data(args: &GenDataArgs) -> Result<(), CliError> {
    let cfg = FleetConfig {
        num_clients: args.clients,
        series_len: args.series_len,
        heterogeneity: args.heterogeneity,
        noise_std: args.noise_std,
        ..FleetConfig::default()
    };
    let store = gen_fleet(&cfg, args.seed).map_err(|e| CliError::Usage(e.to_string()))?;
    write_file(&args.out, store_to_csv(&store).as_bytes())?;
    println!(
        "wrote {} clients x {} steps to {}",
        cfg.num_clients,
        cfg.series_len,
        args.out.display()
    );
    Ok(())
}

fn cmd_inspect_synth(args: &InspectArgs) -> Result<(), CliError> {
    let synth_dir = args.run_dir.join("synth");
    let entries = std::fs::read_dir(&synth_dir).map_err(|e| {
        CliError::Usage(format!(
            "run directory has no synthetic artifacts at {}: {e}",
            synth_dir.display()
        ))
    })?;
    let mut names: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().map(|e| e == "csv").unwrap_or(false))
        .collect();
    names.sort();
    if names.is_empty() {
        return Err(CliError::Usage(format!(
            "no synthetic artifacts in {}",
            synth_dir.display()
        )));
    }
    use std::io::Write as _;
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    let mut printed = 0usize;
    for path in &names {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Runtime(format!("read {}: {e}", path.display())))?;
        let name = path.file_name().unwrap_or_default().to_string_lossy();
        let wrote = if name.ends_with(".trace.csv") {
            writeln!(
                out,
                "== trace {name} ({} iterations)",
                text.lines().count().saturating_sub(1)
            )
            .and_then(|_| write!(out, "{text}"))
        } else {
            let ds = synth_from_csv(&text).map_err(CliError::Runtime)?;
            writeln!(
                out,
                "== dataset {name} provenance={} build_round={} pairs={}",
                ds.provenance.tag(),
                ds.build_round,
                ds.size
            )
            .and_then(|_| write!(out, "{text}"))
        };
        // a closed pipe (e.g. | head) ends the dump, not the process
        if wrote.is_err() {
            return Ok(());
        }
        printed += 1;
    }
    let _ = writeln!(out, "{printed} artifacts");
    Ok(())
}
