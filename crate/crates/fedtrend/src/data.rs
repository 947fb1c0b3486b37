//! Time-series loading, partitioning, windowing and synthesis.
//!
//! Real data enters as CSV (one value column per client, or a single
//! series); desk-scale experiments use [`gen_fleet`], which synthesizes a
//! heterogeneous fleet of sinusoid-plus-trend clients. Splits are strictly
//! chronological and normalization statistics come from the train side
//! only.

use std::fmt::Write as _;
use std::path::Path;

use thiserror::Error;

use crate::rng::{derive_seed, Rng};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{path} is empty")]
    EmptyFile { path: String },
    #[error("parse error at data row {row}, column {column}: {detail}")]
    Parse {
        row: usize,
        column: usize,
        detail: String,
    },
    #[error("file has no value columns")]
    NoValueColumns,
    #[error("single-client layout expects exactly one value column, found {0}")]
    SingleClientColumns(usize),
    #[error("duplicate client id {0}")]
    DuplicateClientId(String),
    #[error(
        "split leaves client {client} with train {train_len} / test {test_len}, need >= {min_len} per side"
    )]
    SplitTooShort {
        client: String,
        train_len: usize,
        test_len: usize,
        min_len: usize,
    },
    #[error("train fraction must be in (0, 1), got {0}")]
    BadFraction(f64),
    #[error("series of length {len} too short for windows of {lx}+{ly}")]
    SeriesTooShort { len: usize, lx: usize, ly: usize },
    #[error("window stride must be >= 1")]
    ZeroStride,
    #[error("normalization stats missing client {0}")]
    StatsMissingClient(String),
    #[error("fleet config invalid: {0}")]
    BadFleetConfig(String),
}

/// One client's raw series.
#[derive(Debug, Clone)]
pub struct ClientSeries {
    pub id: String,
    pub values: Vec<f64>,
    pub timestamps: Option<Vec<String>>,
}

/// A fleet of client series with unique ids.
#[derive(Debug, Clone, Default)]
pub struct SeriesStore {
    pub clients: Vec<ClientSeries>,
}

impl SeriesStore {
    pub fn new(clients: Vec<ClientSeries>) -> Result<Self, DataError> {
        let mut seen = std::collections::HashSet::new();
        for c in &clients {
            if !seen.insert(c.id.clone()) {
                return Err(DataError::DuplicateClientId(c.id.clone()));
            }
        }
        Ok(SeriesStore { clients })
    }

    pub fn len(&self) -> usize {
        self.clients.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clients.is_empty()
    }
}

/// How the value columns of a CSV map to clients.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CsvLayout {
    /// Every value column is one client (the multivariate-file scenario).
    ColumnsAsClients,
    /// The file holds a single client's series in one value column.
    SingleClient,
}

fn is_missing(cell: &str) -> bool {
    let t = cell.trim();
    t.is_empty() || t.eq_ignore_ascii_case("nan") || t.eq_ignore_ascii_case("na")
}

/// Loads a CSV with a header row. An optional first column named `date` or
/// `timestamp` (case-insensitive) is kept as labels but ignored for
/// modeling. Missing values are forward-filled; leading gaps are
/// back-filled from the first present value.
pub fn load_csv(path: &Path, layout: CsvLayout) -> Result<SeriesStore, DataError> {
    let text = std::fs::read_to_string(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    load_csv_str(&text, layout, &path.display().to_string())
}

pub fn load_csv_str(
    text: &str,
    layout: CsvLayout,
    path_label: &str,
) -> Result<SeriesStore, DataError> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines.next().ok_or_else(|| DataError::EmptyFile {
        path: path_label.to_string(),
    })?;
    let names: Vec<&str> = header.split(',').map(str::trim).collect();
    let has_date = names
        .first()
        .map(|n| n.eq_ignore_ascii_case("date") || n.eq_ignore_ascii_case("timestamp"))
        .unwrap_or(false);
    let first_value_col = usize::from(has_date);
    let value_names: Vec<String> = names[first_value_col..]
        .iter()
        .map(|s| s.to_string())
        .collect();
    if value_names.is_empty() {
        return Err(DataError::NoValueColumns);
    }
    if layout == CsvLayout::SingleClient && value_names.len() != 1 {
        return Err(DataError::SingleClientColumns(value_names.len()));
    }

    let mut timestamps: Vec<String> = Vec::new();
    // Option is None until the first present value back-fills the gap.
    let mut columns: Vec<Vec<Option<f64>>> = vec![Vec::new(); value_names.len()];
    for (row_idx, line) in lines.enumerate() {
        let cells: Vec<&str> = line.split(',').map(str::trim).collect();
        if has_date {
            timestamps.push(cells.first().copied().unwrap_or("").to_string());
        }
        for (col, column) in columns.iter_mut().enumerate() {
            let cell = cells.get(first_value_col + col).copied().unwrap_or("");
            if is_missing(cell) {
                column.push(None);
            } else {
                let v: f64 = cell.parse().map_err(|_| DataError::Parse {
                    row: row_idx + 1,
                    column: first_value_col + col + 1,
                    detail: format!("cannot parse {cell:?} as a number"),
                })?;
                column.push(Some(v));
            }
        }
    }
    if columns[0].is_empty() {
        return Err(DataError::EmptyFile {
            path: path_label.to_string(),
        });
    }

    let mut clients = Vec::with_capacity(columns.len());
    for (col, raw) in columns.into_iter().enumerate() {
        let first_present = raw
            .iter()
            .flatten()
            .next()
            .copied()
            .ok_or(DataError::Parse {
                row: 1,
                column: first_value_col + col + 1,
                detail: "column has no numeric values after fill policy".to_string(),
            })?;
        let mut last = first_present;
        let values: Vec<f64> = raw
            .into_iter()
            .map(|v| {
                if let Some(v) = v {
                    last = v;
                }
                last
            })
            .collect();
        clients.push(ClientSeries {
            id: value_names[col].clone(),
            values,
            timestamps: if has_date {
                Some(timestamps.clone())
            } else {
                None
            },
        });
    }
    SeriesStore::new(clients)
}

/// Serializes a store in the same CSV format `load_csv` reads.
pub fn store_to_csv(store: &SeriesStore) -> String {
    let mut out = String::new();
    let header: Vec<&str> = store.clients.iter().map(|c| c.id.as_str()).collect();
    let _ = writeln!(out, "{}", header.join(","));
    let rows = store
        .clients
        .iter()
        .map(|c| c.values.len())
        .max()
        .unwrap_or(0);
    for i in 0..rows {
        let row: Vec<String> = store
            .clients
            .iter()
            .map(|c| format!("{}", c.values[i]))
            .collect();
        let _ = writeln!(out, "{}", row.join(","));
    }
    out
}

/// Chronological prefix/suffix split per client. `min_len` is the shortest
/// usable side (callers pass `L_x + L_y`).
pub fn split(
    store: &SeriesStore,
    train_frac: f64,
    min_len: usize,
) -> Result<(SeriesStore, SeriesStore), DataError> {
    if !(train_frac > 0.0 && train_frac < 1.0) {
        return Err(DataError::BadFraction(train_frac));
    }
    let mut train = Vec::with_capacity(store.len());
    let mut test = Vec::with_capacity(store.len());
    for c in &store.clients {
        let n = c.values.len();
        let n_train = (n as f64 * train_frac).floor() as usize;
        let n_test = n - n_train;
        if n_train < min_len || n_test < min_len {
            return Err(DataError::SplitTooShort {
                client: c.id.clone(),
                train_len: n_train,
                test_len: n_test,
                min_len,
            });
        }
        let split_ts = |ts: &Option<Vec<String>>, range: std::ops::Range<usize>| {
            ts.as_ref().map(|t| t[range].to_vec())
        };
        train.push(ClientSeries {
            id: c.id.clone(),
            values: c.values[..n_train].to_vec(),
            timestamps: split_ts(&c.timestamps, 0..n_train),
        });
        test.push(ClientSeries {
            id: c.id.clone(),
            values: c.values[n_train..].to_vec(),
            timestamps: split_ts(&c.timestamps, n_train..n),
        });
    }
    Ok((
        SeriesStore { clients: train },
        SeriesStore { clients: test },
    ))
}

/// Per-client mean/std computed from the train split only.
#[derive(Debug, Clone)]
pub struct NormStats {
    pub per_client: Vec<(String, f64, f64)>,
}

impl NormStats {
    /// Fits z-score statistics on the given (train) store. The std is
    /// floored at 1e-8 so constant series normalize to zeros.
    pub fn fit(train: &SeriesStore) -> Self {
        let per_client = train
            .clients
            .iter()
            .map(|c| {
                let n = c.values.len() as f64;
                let mean = c.values.iter().sum::<f64>() / n;
                let var = c
                    .values
                    .iter()
                    .map(|v| (v - mean) * (v - mean))
                    .sum::<f64>()
                    / n;
                (c.id.clone(), mean, var.sqrt().max(1e-8))
            })
            .collect();
        NormStats { per_client }
    }

    fn lookup(&self, id: &str) -> Result<(f64, f64), DataError> {
        self.per_client
            .iter()
            .find(|(cid, _, _)| cid == id)
            .map(|(_, m, s)| (*m, *s))
            .ok_or_else(|| DataError::StatsMissingClient(id.to_string()))
    }

    pub fn mean_std(&self, id: &str) -> Option<(f64, f64)> {
        self.lookup(id).ok()
    }
}

/// Applies z-score normalization with the given (train-side) statistics.
pub fn normalize(store: &SeriesStore, stats: &NormStats) -> Result<SeriesStore, DataError> {
    map_store(store, stats, |v, mean, std| (v - mean) / std)
}

/// Exact inverse of [`normalize`] up to rounding.
pub fn denormalize(store: &SeriesStore, stats: &NormStats) -> Result<SeriesStore, DataError> {
    map_store(store, stats, |v, mean, std| v * std + mean)
}

fn map_store(
    store: &SeriesStore,
    stats: &NormStats,
    f: impl Fn(f64, f64, f64) -> f64,
) -> Result<SeriesStore, DataError> {
    let mut clients = Vec::with_capacity(store.len());
    for c in &store.clients {
        let (mean, std) = stats.lookup(&c.id)?;
        clients.push(ClientSeries {
            id: c.id.clone(),
            values: c.values.iter().map(|&v| f(v, mean, std)).collect(),
            timestamps: c.timestamps.clone(),
        });
    }
    Ok(SeriesStore { clients })
}

/// One supervised window pair: `x` holds `L_x` inputs, `y` the `L_y`
/// targets that immediately follow.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowPair {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
}

/// Ordered input/output window pairs sharing one `(L_x, L_y)` shape.
#[derive(Debug, Clone)]
pub struct WindowDataset {
    pub input_len: usize,
    pub output_len: usize,
    pub pairs: Vec<WindowPair>,
}

impl WindowDataset {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// Slides windows over a series: `x = [j, j+L_x)`, `y = [j+L_x, j+L_x+L_y)`,
/// starts advancing by `stride`.
pub fn make_windows(
    series: &[f64],
    input_len: usize,
    output_len: usize,
    stride: usize,
) -> Result<WindowDataset, DataError> {
    if stride == 0 {
        return Err(DataError::ZeroStride);
    }
    let need = input_len + output_len;
    if series.len() < need {
        return Err(DataError::SeriesTooShort {
            len: series.len(),
            lx: input_len,
            ly: output_len,
        });
    }
    let count = (series.len() - need) / stride + 1;
    let mut pairs = Vec::with_capacity(count);
    for w in 0..count {
        let j = w * stride;
        pairs.push(WindowPair {
            x: series[j..j + input_len].to_vec(),
            y: series[j + input_len..j + need].to_vec(),
        });
    }
    Ok(WindowDataset {
        input_len,
        output_len,
        pairs,
    })
}

/// Inclusive parameter range for one fleet knob.
pub type Range = (f64, f64);

/// Synthetic heterogeneous-fleet generator settings.
///
/// Client `i` receives `a*sin(2*pi*f*t + phi) + slope*t + noise` where each
/// per-client parameter is drawn from its range, contracted toward the
/// range midpoint by `1 - heterogeneity`. Heterogeneity 0 gives every
/// client identical parameters (noise streams still differ).
#[derive(Debug, Clone, PartialEq)]
pub struct FleetConfig {
    pub num_clients: usize,
    pub series_len: usize,
    pub amplitude: Range,
    pub frequency: Range,
    pub phase: Range,
    pub trend_slope: Range,
    pub noise_std: f64,
    pub heterogeneity: f64,
}

impl Default for FleetConfig {
    fn default() -> Self {
        FleetConfig {
            num_clients: 8,
            series_len: 400,
            amplitude: (0.5, 2.0),
            frequency: (0.02, 0.10),
            phase: (0.0, std::f64::consts::TAU),
            trend_slope: (-0.004, 0.004),
            noise_std: 0.1,
            heterogeneity: 0.8,
        }
    }
}

impl FleetConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        if self.num_clients == 0 {
            return Err(DataError::BadFleetConfig("num_clients must be >= 1".into()));
        }
        if self.series_len < 2 {
            return Err(DataError::BadFleetConfig("series_len must be >= 2".into()));
        }
        if !(0.0..=1.0).contains(&self.heterogeneity) {
            return Err(DataError::BadFleetConfig(format!(
                "heterogeneity must be in [0, 1], got {}",
                self.heterogeneity
            )));
        }
        if self.noise_std < 0.0 {
            return Err(DataError::BadFleetConfig("noise_std must be >= 0".into()));
        }
        if self.heterogeneity > 0.0 {
            for (name, (lo, hi)) in [
                ("amplitude", self.amplitude),
                ("frequency", self.frequency),
                ("phase", self.phase),
                ("trend_slope", self.trend_slope),
            ] {
                if hi <= lo {
                    return Err(DataError::BadFleetConfig(format!(
                        "{name} range must be non-degenerate when heterogeneity > 0"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Synthesizes a fleet of client series; deterministic for a fixed seed.
pub fn gen_fleet(config: &FleetConfig, seed: u64) -> Result<SeriesStore, DataError> {
    config.validate()?;
    let h = config.heterogeneity;
    let draw = |rng: &mut Rng, (lo, hi): Range| {
        let mid = 0.5 * (lo + hi);
        let u = rng.uniform(lo, hi);
        mid + h * (u - mid)
    };
    let mut clients = Vec::with_capacity(config.num_clients);
    for i in 0..config.num_clients {
        let mut prng = Rng::from_seed(derive_seed(seed, "fleet-params", i as u64));
        let a = draw(&mut prng, config.amplitude);
        let f = draw(&mut prng, config.frequency);
        let phi = draw(&mut prng, config.phase);
        let slope = draw(&mut prng, config.trend_slope);
        let mut nrng = Rng::from_seed(derive_seed(seed, "fleet-noise", i as u64));
        let values = (0..config.series_len)
            .map(|t| {
                let t = t as f64;
                a * (std::f64::consts::TAU * f * t + phi).sin()
                    + slope * t
                    + config.noise_std * nrng.normal()
            })
            .collect();
        clients.push(ClientSeries {
            id: format!("c{i}"),
            values,
            timestamps: None,
        });
    }
    SeriesStore::new(clients)
}
