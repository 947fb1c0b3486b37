//! Trajectory banks and the matching engine that condenses them into
//! learnable synthetic datasets.
//!
//! Two banks feed two builds. The client bank keeps, per client, the
//! parameter vectors at interval boundaries plus just enough rolling state
//! to test update-direction consistency at each boundary; the global bank
//! is the plain sequence of aggregated models. A build initializes random
//! `(X, Y)` pairs, repeatedly trains a model from a sampled segment start
//! on those pairs with unrolled gradient descent, measures the normalized
//! distance of the result to the segment end, and descends that distance
//! through the unrolled run into the synthetic tensors.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::data::{WindowDataset, WindowPair};
use crate::models::{loss_on_tape, ModelError, ModelSpec};
use crate::numcore::{unrolled_sgd, NumError, ParamVector, Tape, Tensor, Var};
use crate::rng::Rng;

const DISTANCE_EPS: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum CondenseError {
    #[error("delta lengths differ: {lhs} vs {rhs}")]
    DeltaLength { lhs: usize, rhs: usize },
    #[error("mask length {mask} does not match parameter count {params}")]
    MaskLength { mask: usize, params: usize },
    #[error("client {client}: update for round {got} arrived after round {last}")]
    OutOfOrderRound {
        client: String,
        got: usize,
        last: usize,
    },
    #[error("no completed trajectory segments to condense")]
    EmptyBank,
    #[error("global trajectory has {len} entries, need more than segment length {seg_len}")]
    BankTooShort { len: usize, seg_len: usize },
    #[error("non-finite matching loss at iteration {iteration}")]
    NonFiniteLoss { iteration: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Num(#[from] NumError),
}

/// Per-parameter consistency bits: 1 where two consecutive updates moved
/// the coordinate in the same direction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConsistencyMask {
    bits: Vec<bool>,
}

impl ConsistencyMask {
    pub fn all_ones(len: usize) -> Self {
        ConsistencyMask {
            bits: vec![true; len],
        }
    }

    pub fn from_bits(bits: Vec<bool>) -> Self {
        ConsistencyMask { bits }
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn ones(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    fn weights(&self) -> Vec<f64> {
        self.bits
            .iter()
            .map(|&b| if b { 1.0 } else { 0.0 })
            .collect()
    }
}

/// Elementwise sign-consistency of two consecutive update deltas: a
/// coordinate passes only when `prev * cur > 0`, so zero or opposite-signed
/// movements are masked out.
pub fn consistency_mask(
    prev_delta: &[f64],
    cur_delta: &[f64],
) -> Result<ConsistencyMask, CondenseError> {
    if prev_delta.len() != cur_delta.len() {
        return Err(CondenseError::DeltaLength {
            lhs: prev_delta.len(),
            rhs: cur_delta.len(),
        });
    }
    Ok(ConsistencyMask {
        bits: prev_delta
            .iter()
            .zip(cur_delta)
            .map(|(&p, &c)| p * c > 0.0)
            .collect(),
    })
}

/// One completed client-trajectory segment: boundary-to-boundary parameter
/// pair plus the consistency mask computed at completion.
#[derive(Debug, Clone)]
pub struct SegmentCt {
    pub client: String,
    pub start: ParamVector,
    pub end: ParamVector,
    pub mask: ConsistencyMask,
    pub end_round: usize,
}

#[derive(Debug)]
struct ClientTrack {
    pending_start: ParamVector,
    pending_start_round: usize,
    prev: ParamVector,
    prev_round: usize,
    prev_delta: Option<Vec<f64>>,
}

/// Bank of client model trajectories, recorded every round but persisting
/// only interval boundaries. Completed segments are drained by each build.
#[derive(Debug)]
pub struct TrajectoryBankCt {
    interval: usize,
    tracks: BTreeMap<String, ClientTrack>,
    completed: Vec<SegmentCt>,
}

impl TrajectoryBankCt {
    /// `interval` is the number of rounds between segment boundaries.
    pub fn new(interval: usize) -> Self {
        TrajectoryBankCt {
            interval: interval.max(1),
            tracks: BTreeMap::new(),
            completed: Vec::new(),
        }
    }

    pub fn completed_segments(&self) -> &[SegmentCt] {
        &self.completed
    }

    /// Number of parameter-sized vectors held for one client (the memory
    /// contract: at most start, previous params, previous delta).
    pub fn pending_vectors(&self, client: &str) -> usize {
        self.tracks
            .get(client)
            .map_or(0, |t| 2 + usize::from(t.prev_delta.is_some()))
    }

    /// Records a client upload. Rounds must arrive in increasing order per
    /// client; every round should be recorded so the boundary consistency
    /// check has two consecutive deltas available.
    pub fn record_client_update(
        &mut self,
        client: &str,
        params: &ParamVector,
        round: usize,
    ) -> Result<(), CondenseError> {
        let Some(track) = self.tracks.get_mut(client) else {
            self.tracks.insert(
                client.to_string(),
                ClientTrack {
                    pending_start: params.clone(),
                    pending_start_round: round,
                    prev: params.clone(),
                    prev_round: round,
                    prev_delta: None,
                },
            );
            return Ok(());
        };
        if round <= track.prev_round {
            return Err(CondenseError::OutOfOrderRound {
                client: client.to_string(),
                got: round,
                last: track.prev_round,
            });
        }
        if round > track.prev_round + 1 {
            // A participation gap breaks delta continuity; restart the
            // pending segment at this round.
            track.pending_start = params.clone();
            track.pending_start_round = round;
            track.prev = params.clone();
            track.prev_round = round;
            track.prev_delta = None;
            return Ok(());
        }
        let cur_delta: Vec<f64> = params
            .flat()
            .iter()
            .zip(track.prev.flat())
            .map(|(c, p)| c - p)
            .collect();
        if round.is_multiple_of(self.interval) {
            if round == track.pending_start_round + self.interval {
                let mask = match &track.prev_delta {
                    Some(prev) => consistency_mask(prev, &cur_delta)?,
                    // interval of one round has no previous delta yet
                    None => ConsistencyMask::all_ones(params.len()),
                };
                self.completed.push(SegmentCt {
                    client: client.to_string(),
                    start: track.pending_start.clone(),
                    end: params.clone(),
                    mask,
                    end_round: round,
                });
            }
            track.pending_start = params.clone();
            track.pending_start_round = round;
        }
        track.prev = params.clone();
        track.prev_round = round;
        track.prev_delta = Some(cur_delta);
        Ok(())
    }

    /// Inserts an already-completed segment, e.g. when replaying recorded
    /// checkpoints offline instead of live round uploads.
    pub fn insert_completed(&mut self, segment: SegmentCt) {
        self.completed.push(segment);
    }

    /// Drains the completed segments (the bank reset after every build).
    pub fn take_completed(&mut self) -> Vec<SegmentCt> {
        std::mem::take(&mut self.completed)
    }
}

/// The global-model trajectory: one parameter vector per round, append
/// only, drained whole by each build so consecutive builds never share a
/// segment.
#[derive(Debug, Default)]
pub struct TrajectoryBankGt {
    start_round: usize,
    params: Vec<ParamVector>,
}

impl TrajectoryBankGt {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Appends the aggregated global model of `round`; the index of each
    /// entry equals its round.
    pub fn push(&mut self, round: usize, params: ParamVector) -> Result<(), CondenseError> {
        let expected = self.start_round + self.params.len();
        if round != expected {
            return Err(CondenseError::OutOfOrderRound {
                client: "<global>".to_string(),
                got: round,
                last: expected.saturating_sub(1),
            });
        }
        self.params.push(params);
        Ok(())
    }

    /// Drains the recorded window, returning its first round and entries.
    pub fn take_window(&mut self) -> (usize, Vec<ParamVector>) {
        let start = self.start_round;
        self.start_round += self.params.len();
        (start, std::mem::take(&mut self.params))
    }
}

/// Normalized squared parameter distance restricted to unmasked elements:
/// `sum(m * (trained - end)^2) / max(sum(m * (start - end)^2), eps)`.
pub fn match_distance(
    w_trained: &ParamVector,
    w_end: &ParamVector,
    w_start: &ParamVector,
    mask: Option<&ConsistencyMask>,
) -> Result<f64, CondenseError> {
    w_trained.ensure_same_layout(w_end)?;
    w_trained.ensure_same_layout(w_start)?;
    if let Some(m) = mask {
        if m.len() != w_trained.len() {
            return Err(CondenseError::MaskLength {
                mask: m.len(),
                params: w_trained.len(),
            });
        }
    }
    let weight = |i: usize| mask.map_or(1.0, |m| if m.bits[i] { 1.0 } else { 0.0 });
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..w_trained.len() {
        let w = weight(i);
        let dn = w_trained.flat()[i] - w_end.flat()[i];
        let dd = w_start.flat()[i] - w_end.flat()[i];
        num += w * dn * dn;
        den += w * dd * dd;
    }
    Ok(num / den.max(DISTANCE_EPS))
}

/// Tape counterpart of [`match_distance`]; the denominator does not depend
/// on the trained parameters, so it enters as a plain scale factor.
pub fn match_distance_on_tape(
    tape: &Tape,
    w_trained: Var,
    w_end: &ParamVector,
    w_start: &ParamVector,
    mask: Option<&ConsistencyMask>,
) -> Result<Var, CondenseError> {
    let end_const = tape.constant(w_end.to_tensor());
    let diff = tape.sub(w_trained, end_const)?;
    let sq = tape.mul(diff, diff)?;
    let num = match mask {
        Some(m) => {
            let weights = tape.constant(Tensor::new(vec![m.len()], m.weights())?);
            let masked = tape.mul(sq, weights)?;
            tape.sum(masked)
        }
        None => tape.sum(sq),
    };
    let mut den = 0.0;
    for i in 0..w_end.len() {
        let w = mask.map_or(1.0, |m| if m.bits[i] { 1.0 } else { 0.0 });
        let d = w_start.flat()[i] - w_end.flat()[i];
        den += w * d * d;
    }
    Ok(tape.scale(num, 1.0 / den.max(DISTANCE_EPS)))
}

/// Where a synthetic dataset came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    /// Condensed from client trajectory segments.
    Ct,
    /// Condensed from the global-model trajectory.
    Gt,
}

impl Provenance {
    pub fn tag(&self) -> &'static str {
        match self {
            Provenance::Ct => "ct",
            Provenance::Gt => "gt",
        }
    }
}

/// Adam state over the concatenated `[xs | ys]` synthetic tensors.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(len: usize) -> Self {
        AdamState {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    fn step(&mut self, lr: f64, grads: &[f64], params: &mut [f64]) {
        self.t += 1;
        let bc1 = 1.0 - Self::BETA1.powi(self.t as i32);
        let bc2 = 1.0 - Self::BETA2.powi(self.t as i32);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            *m = Self::BETA1 * *m + (1.0 - Self::BETA1) * g;
            *v = Self::BETA2 * *v + (1.0 - Self::BETA2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p -= lr * m_hat / (v_hat.sqrt() + Self::EPS);
        }
    }
}

/// Learnable `(X, Y)` window pairs plus the optimizer state that shaped
/// them.
#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub input_len: usize,
    pub output_len: usize,
    pub size: usize,
    /// Row-major `(size, input_len)` inputs.
    pub xs: Vec<f64>,
    /// Row-major `(size, output_len)` targets.
    pub ys: Vec<f64>,
    pub opt: AdamState,
    pub provenance: Provenance,
    pub build_round: usize,
}

impl SyntheticDataset {
    fn random(spec: &ModelSpec, size: usize, provenance: Provenance, rng: &mut Rng) -> Self {
        let (lx, ly) = (spec.input_len, spec.output_len);
        SyntheticDataset {
            input_len: lx,
            output_len: ly,
            size,
            xs: (0..size * lx).map(|_| rng.normal()).collect(),
            ys: (0..size * ly).map(|_| rng.normal()).collect(),
            opt: AdamState::new(size * (lx + ly)),
            provenance,
            build_round: 0,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.xs.iter().chain(&self.ys).all(|v| v.is_finite())
    }

    /// The pairs as ordinary windows, ready to mix into local training.
    pub fn to_windows(&self) -> WindowDataset {
        let pairs = (0..self.size)
            .map(|i| WindowPair {
                x: self.xs[i * self.input_len..(i + 1) * self.input_len].to_vec(),
                y: self.ys[i * self.output_len..(i + 1) * self.output_len].to_vec(),
            })
            .collect();
        WindowDataset {
            input_len: self.input_len,
            output_len: self.output_len,
            pairs,
        }
    }

    /// Serialized size of one `(X, Y)` pair in bytes (f64 elements).
    pub fn pair_bytes(&self) -> u64 {
        ((self.input_len + self.output_len) * 8) as u64
    }

    /// Serialized payload of the whole dataset in bytes.
    pub fn payload_bytes(&self) -> u64 {
        self.pair_bytes() * self.size as u64
    }
}

/// Settings of one condensation build.
#[derive(Debug, Clone, PartialEq)]
pub struct CondenseConfig {
    /// Outer optimization iterations.
    pub iterations: usize,
    /// Adam learning rate on the synthetic tensors.
    pub adam_lr: f64,
    /// Unrolled gradient-descent steps of the inner training run.
    pub inner_steps: usize,
    /// Learning rate of the inner run.
    pub inner_lr: f64,
    /// Number of synthetic pairs.
    pub size: usize,
    /// Segment length in rounds; global-trajectory builds only.
    pub seg_len: usize,
}

impl CondenseConfig {
    pub fn ct_default() -> Self {
        CondenseConfig {
            iterations: 300,
            adam_lr: 3e-4,
            inner_steps: 5,
            inner_lr: 0.01,
            size: 20,
            seg_len: 5,
        }
    }

    pub fn gt_default() -> Self {
        CondenseConfig {
            size: 10,
            ..Self::ct_default()
        }
    }

    pub fn validate(&self) -> Result<(), CondenseError> {
        if self.iterations < 1 || self.size < 1 || self.inner_steps < 1 {
            return Err(CondenseError::Model(ModelError::InvalidSpec(
                "condensation needs iterations >= 1, size >= 1, inner_steps >= 1".into(),
            )));
        }
        Ok(())
    }
}

struct SegmentRef<'a> {
    start: &'a ParamVector,
    end: &'a ParamVector,
    mask: Option<&'a ConsistencyMask>,
}

/// The matching loop shared by both builds: sample a segment, train from
/// its start on the synthetic pairs, descend the masked distance to its
/// end into the synthetic tensors with Adam.
fn run_matching(
    spec: &ModelSpec,
    cfg: &CondenseConfig,
    seed: u64,
    segments: &[SegmentRef],
    provenance: Provenance,
    build_round: usize,
) -> Result<(SyntheticDataset, Vec<f64>), CondenseError> {
    cfg.validate()?;
    let mut rng = Rng::from_seed(seed);
    let mut synth = SyntheticDataset::random(spec, cfg.size, provenance, &mut rng);
    synth.build_round = build_round;
    let (lx, ly) = (spec.input_len, spec.output_len);
    let mut trace = Vec::with_capacity(cfg.iterations);

    for iteration in 0..cfg.iterations {
        let seg = &segments[rng.index(segments.len())];
        let tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![cfg.size, lx], synth.xs.clone())?);
        let y = tape.leaf(Tensor::new(vec![cfg.size, ly], synth.ys.clone())?);
        let w0 = tape.constant(seg.start.to_tensor());
        let trained =
            unrolled_sgd::<CondenseError>(&tape, w0, cfg.inner_steps, cfg.inner_lr, |t, w| {
                loss_on_tape(t, spec, w, x, y).map_err(CondenseError::from)
            })?;
        let dist = match_distance_on_tape(&tape, trained, seg.end, seg.start, seg.mask)?;
        let value = tape.value_item(dist);
        if !value.is_finite() {
            return Err(CondenseError::NonFiniteLoss { iteration });
        }
        let grads = tape.grad(dist, &[x, y])?;
        let mut all_grads = Vec::with_capacity(synth.xs.len() + synth.ys.len());
        all_grads.extend_from_slice(grads[0].data());
        all_grads.extend_from_slice(grads[1].data());
        let mut all_params = Vec::with_capacity(all_grads.len());
        all_params.extend_from_slice(&synth.xs);
        all_params.extend_from_slice(&synth.ys);
        synth.opt.step(cfg.adam_lr, &all_grads, &mut all_params);
        let x_len = synth.xs.len();
        synth.xs.copy_from_slice(&all_params[..x_len]);
        synth.ys.copy_from_slice(&all_params[x_len..]);
        trace.push(value);
    }
    Ok((synth, trace))
}

/// Condenses the drained client segments into a synthetic dataset,
/// sampling segments uniformly. Returns the dataset and the matching-loss
/// trace. The bank's completed segments are consumed even on failure, so a
/// failed build leaves the bank recording the next interval while the
/// caller keeps serving the previous dataset.
pub fn build_dct(
    bank: &mut TrajectoryBankCt,
    spec: &ModelSpec,
    cfg: &CondenseConfig,
    seed: u64,
) -> Result<(SyntheticDataset, Vec<f64>), CondenseError> {
    let segments = bank.take_completed();
    if segments.is_empty() {
        return Err(CondenseError::EmptyBank);
    }
    let build_round = segments.iter().map(|s| s.end_round).max().unwrap_or(0);
    let refs: Vec<SegmentRef> = segments
        .iter()
        .map(|s| SegmentRef {
            start: &s.start,
            end: &s.end,
            mask: Some(&s.mask),
        })
        .collect();
    run_matching(spec, cfg, seed, &refs, Provenance::Ct, build_round)
}

/// Condenses the drained global trajectory: segments are `(W[s], W[s +
/// seg_len])` with `s` sampled uniformly, no mask.
pub fn build_dgt(
    bank: &mut TrajectoryBankGt,
    spec: &ModelSpec,
    cfg: &CondenseConfig,
    seed: u64,
) -> Result<(SyntheticDataset, Vec<f64>), CondenseError> {
    if bank.len() <= cfg.seg_len {
        return Err(CondenseError::BankTooShort {
            len: bank.len(),
            seg_len: cfg.seg_len,
        });
    }
    let (start_round, window) = bank.take_window();
    let build_round = start_round + window.len() - 1;
    let refs: Vec<SegmentRef> = (0..window.len() - cfg.seg_len)
        .map(|s| SegmentRef {
            start: &window[s],
            end: &window[s + cfg.seg_len],
            mask: None,
        })
        .collect();
    run_matching(spec, cfg, seed, &refs, Provenance::Gt, build_round)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{init_params, ModelSpec};

    fn pv(values: &[f64]) -> ParamVector {
        let layout = std::sync::Arc::new(crate::numcore::ParamLayout::new(vec![(
            "w".into(),
            vec![values.len()],
        )]));
        ParamVector::new(layout, values.to_vec()).unwrap()
    }

    #[test]
    fn mask_same_sign_passes() {
        let m = consistency_mask(&[0.1], &[0.2]).unwrap();
        assert_eq!(m.bits(), &[true]);
    }

    #[test]
    fn mask_opposite_sign_fails() {
        let m = consistency_mask(&[0.1], &[-0.2]).unwrap();
        assert_eq!(m.bits(), &[false]);
    }

    #[test]
    fn mask_zero_is_inconsistent() {
        let m = consistency_mask(&[0.0], &[0.2]).unwrap();
        assert_eq!(m.bits(), &[false]);
    }

    #[test]
    fn mask_brute_force_sign_combinations() {
        // over {-, 0, +}^2 only (-,-) and (+,+) pass
        for p in [-1.0, 0.0, 1.0] {
            for c in [-1.0, 0.0, 1.0] {
                let m = consistency_mask(&[p], &[c]).unwrap();
                let expected = (p < 0.0 && c < 0.0) || (p > 0.0 && c > 0.0);
                assert_eq!(m.bits()[0], expected, "p={p} c={c}");
            }
        }
    }

    #[test]
    fn record_ten_rounds_completes_one_segment() {
        let spec = ModelSpec::dlinear_with_kernel(4, 2, 3).unwrap();
        let mut bank = TrajectoryBankCt::new(10);
        let mut history = Vec::new();
        for round in 0..=10 {
            let p = init_params(&spec, 100 + round as u64);
            bank.record_client_update("c0", &p, round).unwrap();
            history.push(p);
        }
        assert_eq!(bank.completed_segments().len(), 1);
        let seg = &bank.completed_segments()[0];
        assert!(seg.start.bitwise_eq(&history[0]));
        assert!(seg.end.bitwise_eq(&history[10]));
        assert_eq!(seg.end_round, 10);
        // the recorded mask equals the sign test on the last two deltas
        let d9: Vec<f64> = history[9]
            .flat()
            .iter()
            .zip(history[8].flat())
            .map(|(a, b)| a - b)
            .collect();
        let d10: Vec<f64> = history[10]
            .flat()
            .iter()
            .zip(history[9].flat())
            .map(|(a, b)| a - b)
            .collect();
        assert_eq!(seg.mask, consistency_mask(&d9, &d10).unwrap());
    }

    #[test]
    fn pending_storage_stays_within_three_vectors() {
        let spec = ModelSpec::dlinear_with_kernel(4, 2, 3).unwrap();
        let mut bank = TrajectoryBankCt::new(5);
        for round in 0..=23 {
            let p = init_params(&spec, round as u64);
            bank.record_client_update("c0", &p, round).unwrap();
            assert!(bank.pending_vectors("c0") <= 3);
        }
    }

    #[test]
    fn take_completed_empties_bank() {
        let spec = ModelSpec::dlinear_with_kernel(4, 2, 3).unwrap();
        let mut bank = TrajectoryBankCt::new(2);
        for round in 0..=6 {
            let p = init_params(&spec, round as u64);
            bank.record_client_update("c0", &p, round).unwrap();
        }
        assert_eq!(bank.completed_segments().len(), 3);
        let taken = bank.take_completed();
        assert_eq!(taken.len(), 3);
        assert!(bank.completed_segments().is_empty());
    }

    #[test]
    fn out_of_order_round_rejected() {
        let spec = ModelSpec::dlinear_with_kernel(4, 2, 3).unwrap();
        let mut bank = TrajectoryBankCt::new(5);
        let p = init_params(&spec, 0);
        bank.record_client_update("c0", &p, 3).unwrap();
        let err = bank.record_client_update("c0", &p, 3).unwrap_err();
        assert!(matches!(err, CondenseError::OutOfOrderRound { .. }));
    }

    #[test]
    fn distance_zero_when_trained_equals_end() {
        let start = pv(&[1.0, 2.0, 3.0]);
        let end = pv(&[0.5, 1.0, -1.0]);
        let d = match_distance(&end, &end, &start, None).unwrap();
        assert_eq!(d, 0.0);
    }

    #[test]
    fn distance_one_when_trained_equals_start() {
        let start = pv(&[1.0, 2.0, 3.0]);
        let end = pv(&[0.5, 1.0, -1.0]);
        let d = match_distance(&start, &end, &start, None).unwrap();
        assert!((d - 1.0).abs() < 1e-15);
    }

    #[test]
    fn masked_distance_matches_hand_arithmetic() {
        // mask keeps coordinates 0 and 2 of a 4-element vector
        let trained = pv(&[1.0, 9.0, 3.0, 9.0]);
        let end = pv(&[0.0, 0.0, 1.0, 0.0]);
        let start = pv(&[2.0, 5.0, 2.0, 5.0]);
        let mask = ConsistencyMask {
            bits: vec![true, false, true, false],
        };
        // num = (1-0)^2 + (3-1)^2 = 5 ; den = (2-0)^2 + (2-1)^2 = 5
        let d = match_distance(&trained, &end, &start, Some(&mask)).unwrap();
        assert!((d - 1.0).abs() < 1e-15);
    }

    #[test]
    fn distance_is_permutation_invariant() {
        let mut rng = Rng::from_seed(5);
        let n = 24;
        let a: Vec<f64> = (0..n).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let b: Vec<f64> = (0..n).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let c: Vec<f64> = (0..n).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let bits: Vec<bool> = (0..n).map(|_| rng.index(2) == 0).collect();
        let base = match_distance(
            &pv(&a),
            &pv(&b),
            &pv(&c),
            Some(&ConsistencyMask { bits: bits.clone() }),
        )
        .unwrap();
        let mut perm: Vec<usize> = (0..n).collect();
        rng.shuffle(&mut perm);
        let ap: Vec<f64> = perm.iter().map(|&i| a[i]).collect();
        let bp: Vec<f64> = perm.iter().map(|&i| b[i]).collect();
        let cp: Vec<f64> = perm.iter().map(|&i| c[i]).collect();
        let maskp = ConsistencyMask {
            bits: perm.iter().map(|&i| bits[i]).collect(),
        };
        let permuted = match_distance(&pv(&ap), &pv(&bp), &pv(&cp), Some(&maskp)).unwrap();
        assert!((base - permuted).abs() < 1e-12);
    }

    #[test]
    fn tape_distance_agrees_with_plain() {
        let trained = pv(&[0.3, -1.2, 0.8, 2.0]);
        let end = pv(&[0.1, -1.0, 1.0, 1.5]);
        let start = pv(&[1.0, 0.0, 0.0, 0.0]);
        let mask = ConsistencyMask {
            bits: vec![true, true, false, true],
        };
        let plain = match_distance(&trained, &end, &start, Some(&mask)).unwrap();
        let tape = Tape::new();
        let t = tape.leaf(trained.to_tensor());
        let d = match_distance_on_tape(&tape, t, &end, &start, Some(&mask)).unwrap();
        assert!((tape.value_item(d) - plain).abs() < 1e-15);
    }

    #[test]
    fn masked_coordinates_get_exactly_zero_gradient() {
        let end = pv(&[0.1, -1.0, 1.0, 1.5]);
        let start = pv(&[1.0, 0.0, 0.0, 0.0]);
        let mask = ConsistencyMask {
            bits: vec![true, false, true, false],
        };
        let tape = Tape::new();
        let t = tape.leaf(pv(&[0.3, -1.2, 0.8, 2.0]).to_tensor());
        let d = match_distance_on_tape(&tape, t, &end, &start, Some(&mask)).unwrap();
        let g = tape.grad(d, &[t]).unwrap();
        assert_eq!(g[0].data()[1], 0.0);
        assert_eq!(g[0].data()[3], 0.0);
        assert_ne!(g[0].data()[0], 0.0);
        assert_ne!(g[0].data()[2], 0.0);
    }

    #[test]
    fn meta_gradient_matches_finite_differences_small_model() {
        // <= 50 params, 2 inner steps, rel tol 1e-3
        let spec = ModelSpec::dlinear_with_kernel(3, 2, 1).unwrap();
        assert!(spec.param_count() <= 50);
        let cfg = CondenseConfig {
            iterations: 1,
            inner_steps: 2,
            inner_lr: 0.05,
            size: 4,
            ..CondenseConfig::ct_default()
        };
        let start = init_params(&spec, 1);
        let end = init_params(&spec, 2);

        let eval = |xs: &[f64], ys: &[f64]| -> (f64, Vec<f64>, Vec<f64>) {
            let tape = Tape::new();
            let x = tape.leaf(Tensor::new(vec![cfg.size, 3], xs.to_vec()).unwrap());
            let y = tape.leaf(Tensor::new(vec![cfg.size, 2], ys.to_vec()).unwrap());
            let w0 = tape.constant(start.to_tensor());
            let trained =
                unrolled_sgd::<CondenseError>(&tape, w0, cfg.inner_steps, cfg.inner_lr, |t, w| {
                    loss_on_tape(t, &spec, w, x, y).map_err(CondenseError::from)
                })
                .unwrap();
            let dist = match_distance_on_tape(&tape, trained, &end, &start, None).unwrap();
            let g = tape.grad(dist, &[x, y]).unwrap();
            (
                tape.value_item(dist),
                g[0].data().to_vec(),
                g[1].data().to_vec(),
            )
        };

        let mut rng = Rng::from_seed(3);
        let xs: Vec<f64> = (0..cfg.size * 3).map(|_| rng.normal()).collect();
        let ys: Vec<f64> = (0..cfg.size * 2).map(|_| rng.normal()).collect();
        let (_, gx, gy) = eval(&xs, &ys);

        let h = 1e-5;
        for i in (0..xs.len()).step_by(3) {
            let mut plus = xs.clone();
            plus[i] += h;
            let mut minus = xs.clone();
            minus[i] -= h;
            let fd = (eval(&plus, &ys).0 - eval(&minus, &ys).0) / (2.0 * h);
            let rel = (gx[i] - fd).abs() / fd.abs().max(1e-6);
            assert!(rel < 1e-3, "x[{i}]: analytic {} fd {fd}", gx[i]);
        }
        for i in (0..ys.len()).step_by(3) {
            let mut plus = ys.clone();
            plus[i] += h;
            let mut minus = ys.clone();
            minus[i] -= h;
            let fd = (eval(&xs, &plus).0 - eval(&xs, &minus).0) / (2.0 * h);
            let rel = (gy[i] - fd).abs() / fd.abs().max(1e-6);
            assert!(rel < 1e-3, "y[{i}]: analytic {} fd {fd}", gy[i]);
        }
    }

    /// Generates segments by genuinely training a tiny model, then checks
    /// the matching loss decreases.
    fn trained_segment(spec: &ModelSpec, seed: u64, steps: usize) -> (ParamVector, ParamVector) {
        use crate::data::make_windows;
        let mut rng = Rng::from_seed(seed);
        let series: Vec<f64> = (0..60)
            .map(|t| (t as f64 * 0.4).sin() + 0.02 * rng.normal())
            .collect();
        let ds = make_windows(&series, spec.input_len, spec.output_len, 1).unwrap();
        let pairs: Vec<(&[f64], &[f64])> = ds
            .pairs
            .iter()
            .map(|p| (p.x.as_slice(), p.y.as_slice()))
            .collect();
        let batch = crate::models::Batch::from_pairs(&pairs).unwrap();
        let start = init_params(spec, seed);
        let mut w = start.clone();
        for _ in 0..steps {
            let tape = Tape::new();
            let p = tape.leaf(w.to_tensor());
            let x = tape.constant(batch.x.clone());
            let y = tape.constant(batch.y.clone());
            let l = loss_on_tape(&tape, spec, p, x, y).unwrap();
            let g = tape.grad(l, &[p]).unwrap();
            for (wv, gv) in w.flat_mut().iter_mut().zip(g[0].data()) {
                *wv -= 0.05 * gv;
            }
        }
        (start, w)
    }

    #[test]
    fn build_dct_loss_trace_trends_down() {
        let spec = ModelSpec::dlinear_with_kernel(4, 2, 3).unwrap();
        let mut bank = TrajectoryBankCt::new(1);
        // fabricate completed segments from genuine training runs
        for c in 0..3u64 {
            let (start, end) = trained_segment(&spec, 40 + c, 8);
            bank.completed.push(SegmentCt {
                client: format!("c{c}"),
                start,
                end,
                mask: ConsistencyMask::all_ones(spec.param_count()),
                end_round: 10,
            });
        }
        let cfg = CondenseConfig {
            iterations: 120,
            adam_lr: 0.01,
            inner_steps: 3,
            inner_lr: 0.05,
            size: 8,
            seg_len: 5,
        };
        let (synth, trace) = build_dct(&mut bank, &spec, &cfg, 7).unwrap();
        assert!(synth.is_finite());
        assert_eq!(trace.len(), cfg.iterations);
        let head = trace.len() / 10;
        let first: f64 = trace[..head].iter().sum::<f64>() / head as f64;
        let last: f64 = trace[trace.len() - head..].iter().sum::<f64>() / head as f64;
        assert!(
            last <= first,
            "matching loss should not grow: first {first} last {last}"
        );
        // bank reset: consecutive builds never share a segment
        assert!(bank.completed_segments().is_empty());
        assert!(matches!(
            build_dct(&mut bank, &spec, &cfg, 7),
            Err(CondenseError::EmptyBank)
        ));
    }

    #[test]
    fn build_dgt_smoke_and_determinism() {
        let spec = ModelSpec::dlinear_with_kernel(4, 2, 3).unwrap();
        let cfg = CondenseConfig {
            iterations: 120,
            adam_lr: 0.01,
            inner_steps: 2,
            inner_lr: 0.05,
            size: 4,
            seg_len: 3,
        };
        let fill_bank = || {
            let mut bank = TrajectoryBankGt::new();
            let mut w = init_params(&spec, 50);
            bank.push(0, w.clone()).unwrap();
            for round in 1..=6 {
                let (_, next) = trained_segment(&spec, 50 + round as u64, 2);
                w = next;
                bank.push(round, w.clone()).unwrap();
            }
            bank
        };
        let (a, trace_a) = build_dgt(&mut fill_bank(), &spec, &cfg, 9).unwrap();
        let (b, trace_b) = build_dgt(&mut fill_bank(), &spec, &cfg, 9).unwrap();
        assert_eq!(trace_a, trace_b);
        assert_eq!(a.xs, b.xs);
        assert_eq!(a.ys, b.ys);
        assert_eq!(a.provenance, Provenance::Gt);
        assert_eq!(a.build_round, 6);
        // matching loss trends down, same property as the client build
        let head = trace_a.len() / 10;
        let first: f64 = trace_a[..head].iter().sum::<f64>() / head as f64;
        let last: f64 = trace_a[trace_a.len() - head..].iter().sum::<f64>() / head as f64;
        assert!(last <= first, "loss should not grow: {first} -> {last}");
    }

    #[test]
    fn build_dgt_requires_enough_history() {
        let spec = ModelSpec::dlinear_with_kernel(4, 2, 3).unwrap();
        let cfg = CondenseConfig {
            seg_len: 5,
            ..CondenseConfig::gt_default()
        };
        let mut bank = TrajectoryBankGt::new();
        for round in 0..5 {
            bank.push(round, init_params(&spec, round as u64)).unwrap();
        }
        assert!(matches!(
            build_dgt(&mut bank, &spec, &cfg, 0),
            Err(CondenseError::BankTooShort { len: 5, seg_len: 5 })
        ));
    }

    #[test]
    fn degenerate_gt_range_always_samples_first_segment() {
        // bank of exactly seg_len + 1 entries: only s = 0 is ever sampled,
        // so the build equals a single-segment build.
        let spec = ModelSpec::dlinear_with_kernel(4, 2, 3).unwrap();
        let cfg = CondenseConfig {
            iterations: 25,
            adam_lr: 0.01,
            inner_steps: 2,
            inner_lr: 0.05,
            size: 4,
            seg_len: 3,
        };
        let entries: Vec<ParamVector> = (0..=3).map(|i| init_params(&spec, 60 + i)).collect();
        let mut bank = TrajectoryBankGt::new();
        for (round, p) in entries.iter().enumerate() {
            bank.push(round, p.clone()).unwrap();
        }
        let (_, trace) = build_dgt(&mut bank, &spec, &cfg, 4).unwrap();

        let refs = [SegmentRef {
            start: &entries[0],
            end: &entries[3],
            mask: None,
        }];
        let (_, trace_single) = run_matching(&spec, &cfg, 4, &refs, Provenance::Gt, 3).unwrap();
        assert_eq!(trace, trace_single);
    }

    #[test]
    fn all_ones_mask_single_client_equals_unmasked_path() {
        let spec = ModelSpec::dlinear_with_kernel(4, 2, 3).unwrap();
        let (start, end) = trained_segment(&spec, 70, 6);
        let cfg = CondenseConfig {
            iterations: 30,
            adam_lr: 0.01,
            inner_steps: 2,
            inner_lr: 0.05,
            size: 4,
            seg_len: 5,
        };
        let mask = ConsistencyMask::all_ones(spec.param_count());
        let masked = [SegmentRef {
            start: &start,
            end: &end,
            mask: Some(&mask),
        }];
        let unmasked = [SegmentRef {
            start: &start,
            end: &end,
            mask: None,
        }];
        let (_, trace_m) = run_matching(&spec, &cfg, 11, &masked, Provenance::Ct, 0).unwrap();
        let (_, trace_u) = run_matching(&spec, &cfg, 11, &unmasked, Provenance::Ct, 0).unwrap();
        assert_eq!(trace_m, trace_u);
    }
}
