//! The federated round engine: local training, aggregation, privacy noise
//! and per-round orchestration.
//!
//! Clients never see each other's data; a round hands every participant
//! the current global parameters (plus the optional synthetic mix-in
//! windows), trains locally with SGD+momentum, optionally perturbs the
//! upload with local differential-privacy noise, then reduces the uploads
//! with a dataset-size-weighted average.

use std::time::{Duration, Instant};

use thiserror::Error;

use crate::data::WindowDataset;
use crate::models::{loss_on_tape, Batch, ModelError, ModelSpec};
use crate::numcore::{NumError, ParamVector, Tape};
use crate::rng::{derive_seed, Rng};

#[derive(Debug, Error)]
pub enum FlError {
    #[error("no client updates to aggregate")]
    EmptyAggregation,
    #[error("client {client}: non-finite loss at round {round}, step {step}")]
    NonFiniteLoss {
        client: String,
        round: usize,
        step: usize,
    },
    #[error("client {client}: {source}")]
    Client {
        client: String,
        #[source]
        source: Box<FlError>,
    },
    #[error("synthetic mix-in windows are {got:?}, client windows are {expected:?}")]
    MixinShape {
        got: (usize, usize),
        expected: (usize, usize),
    },
    #[error("participation fraction must be in (0, 1], got {0}")]
    BadParticipation(f64),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Num(#[from] NumError),
}

/// Distribution of the local differential-privacy perturbation.
///
/// The reference formulation samples Gaussian noise; the Laplace variant is
/// kept selectable with `lambda` read as the distribution's scale.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum NoiseKind {
    #[default]
    Gaussian,
    Laplace,
}

/// Client-side training settings for one round.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub local_epochs: usize,
    pub fedprox_mu: f64,
    pub ldp_lambda: f64,
    pub ldp_noise: NoiseKind,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 5e-4,
            momentum: 0.9,
            batch_size: 256,
            local_epochs: 1,
            fedprox_mu: 0.0,
            ldp_lambda: 0.0,
            ldp_noise: NoiseKind::Gaussian,
        }
    }
}

/// One federated participant: id, private training windows, rng stream.
#[derive(Debug, Clone)]
pub struct ClientState {
    pub id: String,
    pub train: WindowDataset,
    pub seed: u64,
}

impl ClientState {
    /// Number of private window pairs; the aggregation weight.
    pub fn dataset_size(&self) -> usize {
        self.train.len()
    }
}

/// Per-round metrics and communication accounting (bytes are per
/// participating client).
#[derive(Debug, Clone)]
pub struct RoundReport {
    pub round: usize,
    pub client_train_loss: Vec<(String, f64)>,
    pub test_mse: f64,
    pub test_mae: f64,
    pub bytes_up: u64,
    pub bytes_down: u64,
    pub bytes_down_synth: u64,
    pub wall_time: Duration,
}

fn batch_from_indices(
    own: &WindowDataset,
    extra: Option<&WindowDataset>,
    indices: &[usize],
) -> Result<Batch, ModelError> {
    let pairs: Vec<(&[f64], &[f64])> = indices
        .iter()
        .map(|&i| {
            if i < own.len() {
                (own.pairs[i].x.as_slice(), own.pairs[i].y.as_slice())
            } else {
                let p = &extra.expect("index into mix-in").pairs[i - own.len()];
                (p.x.as_slice(), p.y.as_slice())
            }
        })
        .collect();
    Batch::from_pairs(&pairs)
}

/// Local training: initializes from the global parameters and runs
/// `local_epochs` of SGD+momentum over the client's windows concatenated
/// with the synthetic mix-in, shuffled per epoch by the client's stream.
/// With `fedprox_mu > 0` a proximal pull toward the global model is added
/// to the loss. Returns the trained parameters and the mean step loss.
pub fn local_train(
    spec: &ModelSpec,
    client: &ClientState,
    global: &ParamVector,
    mixin: Option<&WindowDataset>,
    cfg: &TrainConfig,
    round: usize,
) -> Result<(ParamVector, f64), FlError> {
    if let Some(m) = mixin {
        if m.input_len != client.train.input_len || m.output_len != client.train.output_len {
            return Err(FlError::MixinShape {
                got: (m.input_len, m.output_len),
                expected: (client.train.input_len, client.train.output_len),
            });
        }
    }
    let mut rng = Rng::from_seed(derive_seed(client.seed, "local-train", round as u64));
    let total = client.train.len() + mixin.map_or(0, |m| m.len());
    let mut indices: Vec<usize> = (0..total).collect();

    let mut params = global.clone();
    let mut velocity = vec![0.0; params.len()];
    let mut loss_sum = 0.0;
    let mut steps = 0usize;

    for _ in 0..cfg.local_epochs {
        rng.shuffle(&mut indices);
        // the last incomplete batch is kept
        for chunk in indices.chunks(cfg.batch_size.max(1)) {
            let batch = batch_from_indices(&client.train, mixin, chunk)?;
            let tape = Tape::new();
            let p = tape.leaf(params.to_tensor());
            let x = tape.constant(batch.x);
            let y = tape.constant(batch.y);
            let mut objective = loss_on_tape(&tape, spec, p, x, y)?;
            if cfg.fedprox_mu > 0.0 {
                let anchor = tape.constant(global.to_tensor());
                let d = tape.sub(p, anchor)?;
                let sq = tape.mul(d, d)?;
                let pen = tape.scale(tape.sum(sq), cfg.fedprox_mu / 2.0);
                objective = tape.add(objective, pen)?;
            }
            let loss_value = tape.value_item(objective);
            if !loss_value.is_finite() {
                return Err(FlError::NonFiniteLoss {
                    client: client.id.clone(),
                    round,
                    step: steps,
                });
            }
            loss_sum += loss_value;
            steps += 1;
            if cfg.lr != 0.0 {
                let grad = tape.grad(objective, &[p])?;
                for ((v, g), w) in velocity
                    .iter_mut()
                    .zip(grad[0].data())
                    .zip(params.flat_mut())
                {
                    *v = cfg.momentum * *v + g;
                    *w -= cfg.lr * *v;
                }
            }
        }
    }
    Ok((params, loss_sum / steps.max(1) as f64))
}

/// Dataset-size weighted average of client parameters.
pub fn aggregate(updates: &[(ParamVector, usize)]) -> Result<ParamVector, FlError> {
    let (first, _) = updates.first().ok_or(FlError::EmptyAggregation)?;
    let total: usize = updates.iter().map(|(_, n)| n).sum();
    let mut out = ParamVector::zeros(first.layout().clone());
    for (params, n) in updates {
        first.ensure_same_layout(params)?;
        out.add_scaled(params, *n as f64 / total as f64);
    }
    Ok(out)
}

/// Adds i.i.d. noise of scale `lambda` to every parameter; `lambda == 0`
/// returns the input unchanged.
pub fn apply_ldp(params: &ParamVector, lambda: f64, kind: NoiseKind, rng: &mut Rng) -> ParamVector {
    if lambda == 0.0 {
        return params.clone();
    }
    let mut out = params.clone();
    for w in out.flat_mut() {
        *w += match kind {
            NoiseKind::Gaussian => lambda * rng.normal(),
            NoiseKind::Laplace => rng.laplace(lambda),
        };
    }
    out
}

/// Pooled forecast error over pre-assembled test batches: elementwise mean
/// squared / absolute error across every window of every client.
pub fn evaluate(
    spec: &ModelSpec,
    params: &ParamVector,
    batches: &[Batch],
) -> Result<(f64, f64), FlError> {
    let mut sq = 0.0;
    let mut abs = 0.0;
    let mut count = 0usize;
    for batch in batches {
        let y_hat = crate::models::forward(spec, params, &batch.x)?;
        for (p, t) in y_hat.data().iter().zip(batch.y.data()) {
            let e = p - t;
            sq += e * e;
            abs += e.abs();
        }
        count += batch.y.numel();
    }
    Ok((sq / count.max(1) as f64, abs / count.max(1) as f64))
}

/// Inputs to one federated round.
pub struct RoundContext<'a> {
    pub round: usize,
    pub spec: &'a ModelSpec,
    pub clients: &'a [ClientState],
    /// Synthetic mix-in windows dispatched with the global model.
    pub mixin: Option<&'a WindowDataset>,
    pub cfg: &'a TrainConfig,
    /// Fraction of clients sampled uniformly without replacement (1 = all).
    pub participation: f64,
    pub parallel: bool,
    pub master_seed: u64,
    /// Pre-assembled held-out batches for the round evaluation.
    pub test_batches: &'a [Batch],
}

/// Result of one round: the aggregated global, the (post-noise) client
/// uploads for trajectory recording, and the round report.
pub struct RoundOutcome {
    pub new_global: ParamVector,
    pub updates: Vec<(usize, ParamVector)>,
    pub report: RoundReport,
}

fn train_one(
    ctx: &RoundContext,
    global: &ParamVector,
    idx: usize,
) -> Result<(ParamVector, f64), FlError> {
    let client = &ctx.clients[idx];
    let (mut params, train_loss) =
        local_train(ctx.spec, client, global, ctx.mixin, ctx.cfg, ctx.round).map_err(|e| {
            FlError::Client {
                client: client.id.clone(),
                source: Box::new(e),
            }
        })?;
    if ctx.cfg.ldp_lambda > 0.0 {
        let seed = derive_seed(
            derive_seed(ctx.master_seed, "ldp-round", ctx.round as u64),
            "ldp-client",
            idx as u64,
        );
        params = apply_ldp(
            &params,
            ctx.cfg.ldp_lambda,
            ctx.cfg.ldp_noise,
            &mut Rng::from_seed(seed),
        );
    }
    Ok((params, train_loss))
}

/// Executes one federated round. Participants run independently (in
/// parallel when enabled); the reduction is a single-threaded fold in
/// client-index order, so results are independent of scheduling.
pub fn run_round(ctx: &RoundContext, global: &ParamVector) -> Result<RoundOutcome, FlError> {
    let started = Instant::now();
    if !(ctx.participation > 0.0 && ctx.participation <= 1.0) {
        return Err(FlError::BadParticipation(ctx.participation));
    }
    let n = ctx.clients.len();
    let participants: Vec<usize> = if ctx.participation >= 1.0 {
        (0..n).collect()
    } else {
        let k = ((ctx.participation * n as f64).round() as usize).clamp(1, n);
        let mut rng = Rng::from_seed(derive_seed(
            ctx.master_seed,
            "participation",
            ctx.round as u64,
        ));
        rng.sample_indices(n, k)
    };

    let results: Vec<Result<(ParamVector, f64), FlError>> = if ctx.parallel {
        std::thread::scope(|scope| {
            let handles: Vec<_> = participants
                .iter()
                .map(|&idx| scope.spawn(move || train_one(ctx, global, idx)))
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("client thread"))
                .collect()
        })
    } else {
        participants
            .iter()
            .map(|&idx| train_one(ctx, global, idx))
            .collect()
    };

    let mut updates = Vec::with_capacity(participants.len());
    let mut client_train_loss = Vec::with_capacity(participants.len());
    for (&idx, result) in participants.iter().zip(results) {
        let (params, train_loss) = result?;
        client_train_loss.push((ctx.clients[idx].id.clone(), train_loss));
        updates.push((idx, params));
    }

    let weighted: Vec<(ParamVector, usize)> = updates
        .iter()
        .map(|(idx, p)| (p.clone(), ctx.clients[*idx].dataset_size()))
        .collect();
    let new_global = aggregate(&weighted)?;

    let (test_mse, test_mae) = evaluate(ctx.spec, &new_global, ctx.test_batches)?;
    let param_bytes = (global.len() * 8) as u64;
    let report = RoundReport {
        round: ctx.round,
        client_train_loss,
        test_mse,
        test_mae,
        bytes_up: param_bytes,
        bytes_down: param_bytes,
        bytes_down_synth: 0,
        wall_time: started.elapsed(),
    };
    Ok(RoundOutcome {
        new_global,
        updates,
        report,
    })
}
