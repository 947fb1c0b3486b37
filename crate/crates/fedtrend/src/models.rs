//! Forecasting model definitions and the training loss.
//!
//! Two architectures are provided behind one [`ModelSpec`]: a decomposition
//! linear model (moving-average trend plus seasonal remainder, one linear
//! map each) and a plain MLP with ReLU hidden layers. Both are expressed
//! over a flat [`ParamVector`], so the federated machinery never needs to
//! know which model it is moving around.

use std::sync::Arc;

use thiserror::Error;

use crate::numcore::{NumError, ParamLayout, ParamVector, Tape, Tensor, Var};
use crate::rng::Rng;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model spec: {0}")]
    InvalidSpec(String),
    #[error("moving-average kernel must be odd, got {0}")]
    EvenKernel(usize),
    #[error("moving-average kernel {kernel} exceeds limit {max} for input length {input_len}")]
    KernelTooLarge {
        kernel: usize,
        max: usize,
        input_len: usize,
    },
    #[error("batch is empty")]
    EmptyBatch,
    #[error("input shape {got:?} does not match expected {expected:?}")]
    InputShape {
        got: Vec<usize>,
        expected: Vec<usize>,
    },
    #[error(transparent)]
    Num(#[from] NumError),
}

/// Default moving-average width of the decomposition model.
pub const DEFAULT_DLINEAR_KERNEL: usize = 25;

/// Default hidden widths of the MLP forecaster.
pub const DEFAULT_MLP_HIDDEN: &[usize] = &[64];

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ModelKind {
    /// Trend/seasonal decomposition with one linear layer per component.
    DLinear { kernel: usize },
    /// Dense layers with ReLU between and a linear head.
    Mlp { hidden: Vec<usize> },
}

/// Architecture plus input/output window lengths.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub input_len: usize,
    pub output_len: usize,
}

impl ModelSpec {
    /// Decomposition linear model with the default kernel, clamped to the
    /// largest odd value `<= 2 * input_len - 1`.
    pub fn dlinear(input_len: usize, output_len: usize) -> Result<Self, ModelError> {
        let max = 2 * input_len.max(1) - 1;
        let kernel = DEFAULT_DLINEAR_KERNEL.min(max);
        let kernel = if kernel.is_multiple_of(2) {
            kernel - 1
        } else {
            kernel
        };
        Self::dlinear_with_kernel(input_len, output_len, kernel.max(1))
    }

    pub fn dlinear_with_kernel(
        input_len: usize,
        output_len: usize,
        kernel: usize,
    ) -> Result<Self, ModelError> {
        let spec = ModelSpec {
            kind: ModelKind::DLinear { kernel },
            input_len,
            output_len,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn mlp(
        input_len: usize,
        output_len: usize,
        hidden: Vec<usize>,
    ) -> Result<Self, ModelError> {
        let spec = ModelSpec {
            kind: ModelKind::Mlp { hidden },
            input_len,
            output_len,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.input_len < 1 || self.output_len < 1 {
            return Err(ModelError::InvalidSpec(format!(
                "window lengths must be >= 1, got input {} output {}",
                self.input_len, self.output_len
            )));
        }
        match &self.kind {
            ModelKind::DLinear { kernel } => {
                if kernel.is_multiple_of(2) || *kernel < 1 {
                    return Err(ModelError::EvenKernel(*kernel));
                }
                let max = 2 * self.input_len - 1;
                if *kernel > max {
                    return Err(ModelError::KernelTooLarge {
                        kernel: *kernel,
                        max,
                        input_len: self.input_len,
                    });
                }
            }
            ModelKind::Mlp { hidden } => {
                if hidden.iter().any(|&h| h < 1) {
                    return Err(ModelError::InvalidSpec("hidden sizes must be >= 1".into()));
                }
            }
        }
        Ok(())
    }

    /// Parameter layout: weights stored as `(in, out)` so the forward pass
    /// is `x . W + b` without transposition.
    pub fn param_layout(&self) -> Arc<ParamLayout> {
        let (lx, ly) = (self.input_len, self.output_len);
        let entries = match &self.kind {
            ModelKind::DLinear { .. } => vec![
                ("trend.weight".to_string(), vec![lx, ly]),
                ("trend.bias".to_string(), vec![ly]),
                ("seasonal.weight".to_string(), vec![lx, ly]),
                ("seasonal.bias".to_string(), vec![ly]),
            ],
            ModelKind::Mlp { hidden } => {
                let mut sizes = vec![lx];
                sizes.extend_from_slice(hidden);
                sizes.push(ly);
                let mut entries = Vec::new();
                for (i, pair) in sizes.windows(2).enumerate() {
                    entries.push((format!("layer{i}.weight"), vec![pair[0], pair[1]]));
                    entries.push((format!("layer{i}.bias"), vec![pair[1]]));
                }
                entries
            }
        };
        Arc::new(ParamLayout::new(entries))
    }

    pub fn param_count(&self) -> usize {
        self.param_layout().total_len()
    }
}

/// Deterministic initialization: weights uniform in `+-1/sqrt(fan_in)`,
/// biases zero. `fan_in` is the input dimension of each linear map.
pub fn init_params(spec: &ModelSpec, seed: u64) -> ParamVector {
    let layout = spec.param_layout();
    let mut flat = vec![0.0; layout.total_len()];
    let mut rng = Rng::from_seed(seed);
    for view in layout.views() {
        if view.shape.len() == 2 {
            let bound = 1.0 / (view.shape[0] as f64).sqrt();
            for slot in &mut flat[view.offset..view.offset + view.numel()] {
                *slot = rng.uniform(-bound, bound);
            }
        }
        // bias views stay zero
    }
    ParamVector::new(layout, flat).expect("layout length")
}

/// An input/output window batch with shapes `(batch, L_x)` and `(batch, L_y)`.
#[derive(Debug, Clone)]
pub struct Batch {
    pub x: Tensor,
    pub y: Tensor,
}

impl Batch {
    pub fn new(x: Tensor, y: Tensor) -> Result<Self, ModelError> {
        if x.shape().len() != 2 || y.shape().len() != 2 || x.shape()[0] != y.shape()[0] {
            return Err(ModelError::InputShape {
                got: y.shape().to_vec(),
                expected: vec![x.shape()[0], y.shape().get(1).copied().unwrap_or(0)],
            });
        }
        Ok(Batch { x, y })
    }

    /// Assembles a batch from `(x, y)` rows; errors on an empty slice.
    pub fn from_pairs(pairs: &[(&[f64], &[f64])]) -> Result<Self, ModelError> {
        if pairs.is_empty() {
            return Err(ModelError::EmptyBatch);
        }
        let lx = pairs[0].0.len();
        let ly = pairs[0].1.len();
        let mut xs = Vec::with_capacity(pairs.len() * lx);
        let mut ys = Vec::with_capacity(pairs.len() * ly);
        for (x, y) in pairs {
            xs.extend_from_slice(x);
            ys.extend_from_slice(y);
        }
        Ok(Batch {
            x: Tensor::new(vec![pairs.len(), lx], xs)?,
            y: Tensor::new(vec![pairs.len(), ly], ys)?,
        })
    }

    pub fn len(&self) -> usize {
        self.x.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        false // construction rejects empty batches
    }
}

/// Column-weight matrix of the centered moving average with replicate edge
/// padding: `trend = x . M` for row vectors of length `input_len`.
pub fn moving_avg_matrix(input_len: usize, kernel: usize) -> Tensor {
    let half = (kernel - 1) / 2;
    let mut m = vec![0.0; input_len * input_len];
    for center in 0..input_len {
        for p in 0..kernel {
            // window position center - half + p, clamped to the series
            let pos = (center + p).saturating_sub(half).min(input_len - 1);
            m[pos * input_len + center] += 1.0 / kernel as f64;
        }
    }
    Tensor::new(vec![input_len, input_len], m).expect("kernel matrix")
}

/// Finds `(t, s)` with `t + s == x` exactly, keeping `t` within a couple of
/// ulps of the proposed trend value.
///
/// Rounding in `x - t0` can leave the reconstruction one ulp off, and when
/// `t` and `s` cancel, the sum lattice `t + k*ulp(s)` may straddle `x`; a
/// single-ulp nudge of `t` shifts the lattice parity so an exact split
/// exists. For measurement-resolution data this always converges; for
/// adversarial full-mantissa doubles an exact split may not exist at all,
/// in which case the closest reachable pair is returned.
fn ulp_of(v: f64) -> f64 {
    let v = v.abs().max(f64::MIN_POSITIVE);
    v.next_up() - v
}

fn exact_split(x: f64, t0: f64) -> (f64, f64) {
    let s0 = x - t0;
    if t0 + s0 == x {
        return (t0, s0);
    }
    // The sum t + s lives on the lattice of the largest operand. Snapping
    // t to that lattice makes x - t representable whenever x itself lies
    // on it, and then the reconstruction is exact by construction.
    let u = ulp_of(t0.abs().max(s0.abs()).max(x.abs()));
    let q = (t0 / u).round();
    if q.is_finite() {
        let t = q * u;
        let s = x - t;
        if t + s == x {
            return (t, s);
        }
    }
    // x is off the lattice (full-mantissa doubles under heavy
    // cancellation); no exact split exists, return the closest pair.
    (t0, s0)
}

/// Splits windows into (trend, seasonal) components.
///
/// The trend is the centered moving average with replicate padding of
/// `(kernel - 1) / 2` values on both ends; the seasonal part is the
/// remainder, nudged by at most one ulp so that `trend + seasonal == x`
/// holds exactly for every element.
pub fn decompose(x: &Tensor, kernel: usize) -> Result<(Tensor, Tensor), ModelError> {
    if x.shape().len() != 2 {
        return Err(ModelError::InputShape {
            got: x.shape().to_vec(),
            expected: vec![0, 0],
        });
    }
    let (batch, lx) = x.dims2();
    if kernel.is_multiple_of(2) || kernel < 1 {
        return Err(ModelError::EvenKernel(kernel));
    }
    let max = 2 * lx - 1;
    if kernel > max {
        return Err(ModelError::KernelTooLarge {
            kernel,
            max,
            input_len: lx,
        });
    }
    let half = (kernel - 1) / 2;
    let mut trend = vec![0.0; batch * lx];
    let mut seasonal = vec![0.0; batch * lx];
    for b in 0..batch {
        let row = &x.data()[b * lx..(b + 1) * lx];
        for center in 0..lx {
            let mut sum = 0.0;
            for p in 0..kernel {
                let pos = (center + p).saturating_sub(half).min(lx - 1);
                sum += row[pos];
            }
            let t = sum / kernel as f64;
            let xi = row[center];
            let (t, s) = exact_split(xi, t);
            trend[b * lx + center] = t;
            seasonal[b * lx + center] = s;
        }
    }
    Ok((
        Tensor::new(vec![batch, lx], trend)?,
        Tensor::new(vec![batch, lx], seasonal)?,
    ))
}

fn linear_on_tape(
    tape: &Tape,
    x: Var,
    params: Var,
    layout: &ParamLayout,
    weight: &str,
    bias: &str,
    batch: usize,
) -> Result<Var, NumError> {
    let w = layout.view(weight).expect("layout view");
    let b = layout.view(bias).expect("layout view");
    let wv = tape.view(params, w.offset, w.shape.clone())?;
    let bv = tape.view(params, b.offset, b.shape.clone())?;
    let xb = tape.matmul(x, wv)?;
    let brow = tape.repeat_row(bv, batch)?;
    tape.add(xb, brow)
}

/// Builds the model's forward pass on a tape. `params` must be the flat
/// parameter node; `x` a `(batch, L_x)` node.
pub fn forward_on_tape(
    tape: &Tape,
    spec: &ModelSpec,
    params: Var,
    x: Var,
) -> Result<Var, ModelError> {
    let x_shape = tape.value(x).shape().to_vec();
    if x_shape.len() != 2 || x_shape[1] != spec.input_len {
        return Err(ModelError::InputShape {
            got: x_shape,
            expected: vec![0, spec.input_len],
        });
    }
    let batch = x_shape[0];
    let layout = spec.param_layout();
    match &spec.kind {
        ModelKind::DLinear { kernel } => {
            let m = tape.constant(moving_avg_matrix(spec.input_len, *kernel));
            let trend = tape.matmul(x, m)?;
            let seasonal = tape.sub(x, trend)?;
            let t_out = linear_on_tape(
                tape,
                trend,
                params,
                &layout,
                "trend.weight",
                "trend.bias",
                batch,
            )?;
            let s_out = linear_on_tape(
                tape,
                seasonal,
                params,
                &layout,
                "seasonal.weight",
                "seasonal.bias",
                batch,
            )?;
            Ok(tape.add(t_out, s_out)?)
        }
        ModelKind::Mlp { hidden } => {
            let mut h = x;
            for i in 0..hidden.len() {
                let pre = linear_on_tape(
                    tape,
                    h,
                    params,
                    &layout,
                    &format!("layer{i}.weight"),
                    &format!("layer{i}.bias"),
                    batch,
                )?;
                h = tape.relu(pre);
            }
            let last = hidden.len();
            Ok(linear_on_tape(
                tape,
                h,
                params,
                &layout,
                &format!("layer{last}.weight"),
                &format!("layer{last}.bias"),
                batch,
            )?)
        }
    }
}

/// Mean squared error over all `batch * L_y` prediction elements, on tape.
pub fn loss_on_tape(
    tape: &Tape,
    spec: &ModelSpec,
    params: Var,
    x: Var,
    y: Var,
) -> Result<Var, ModelError> {
    let y_hat = forward_on_tape(tape, spec, params, x)?;
    let diff = tape.sub(y_hat, y)?;
    let sq = tape.mul(diff, diff)?;
    Ok(tape.mean(sq))
}

/// Forward pass over plain tensors.
pub fn forward(spec: &ModelSpec, params: &ParamVector, x: &Tensor) -> Result<Tensor, ModelError> {
    let tape = Tape::new();
    let p = tape.constant(params.to_tensor());
    let xv = tape.constant(x.clone());
    let out = forward_on_tape(&tape, spec, p, xv)?;
    Ok(tape.value(out))
}

/// Training loss (mean squared error) of a parameter vector on a batch.
pub fn loss(spec: &ModelSpec, params: &ParamVector, batch: &Batch) -> Result<f64, ModelError> {
    let tape = Tape::new();
    let p = tape.constant(params.to_tensor());
    let xv = tape.constant(batch.x.clone());
    let yv = tape.constant(batch.y.clone());
    let l = loss_on_tape(&tape, spec, p, xv, yv)?;
    Ok(tape.value_item(l))
}
