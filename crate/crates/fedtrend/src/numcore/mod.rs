//! Dense tensors, the reverse-mode tape, and flat parameter vectors.

mod tape;
mod tensor;
mod unroll;

pub use tape::{Tape, Var};
pub use tensor::{NumError, Tensor};
pub use unroll::unrolled_sgd;

use std::sync::Arc;

/// One named, shaped view into a flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl ViewSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Layout of a flat parameter vector: consecutive disjoint views that cover
/// the vector exactly.
#[derive(Debug, PartialEq)]
pub struct ParamLayout {
    views: Vec<ViewSpec>,
    total: usize,
}

impl ParamLayout {
    /// Builds a layout from `(name, shape)` pairs placed back to back.
    pub fn new(entries: Vec<(String, Vec<usize>)>) -> Self {
        let mut views = Vec::with_capacity(entries.len());
        let mut offset = 0;
        for (name, shape) in entries {
            let numel: usize = shape.iter().product();
            views.push(ViewSpec {
                name,
                shape,
                offset,
            });
            offset += numel;
        }
        ParamLayout {
            views,
            total: offset,
        }
    }

    pub fn total_len(&self) -> usize {
        self.total
    }

    pub fn views(&self) -> &[ViewSpec] {
        &self.views
    }

    pub fn view(&self, name: &str) -> Option<&ViewSpec> {
        self.views.iter().find(|v| v.name == name)
    }
}

/// Flat vector of model parameters with a shared shaped layout.
///
/// Every trajectory, aggregation and distance in the system operates on
/// this type; shaped views exist only to slice the flat storage for the
/// forward pass.
#[derive(Debug, Clone)]
pub struct ParamVector {
    layout: Arc<ParamLayout>,
    flat: Vec<f64>,
}

impl ParamVector {
    pub fn new(layout: Arc<ParamLayout>, flat: Vec<f64>) -> Result<Self, NumError> {
        if flat.len() != layout.total_len() {
            return Err(NumError::LayoutMismatch {
                detail: format!(
                    "flat length {} != layout total {}",
                    flat.len(),
                    layout.total_len()
                ),
            });
        }
        Ok(ParamVector { layout, flat })
    }

    pub fn zeros(layout: Arc<ParamLayout>) -> Self {
        let flat = vec![0.0; layout.total_len()];
        ParamVector { layout, flat }
    }

    pub fn layout(&self) -> &Arc<ParamLayout> {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.flat.len()
    }

    pub fn is_empty(&self) -> bool {
        self.flat.is_empty()
    }

    pub fn flat(&self) -> &[f64] {
        &self.flat
    }

    pub fn flat_mut(&mut self) -> &mut [f64] {
        &mut self.flat
    }

    pub fn into_flat(self) -> Vec<f64> {
        self.flat
    }

    /// The flat storage as a rank-1 tensor, for placement on a tape.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![self.flat.len()], self.flat.clone()).expect("param tensor")
    }

    pub fn from_tensor(layout: Arc<ParamLayout>, t: &Tensor) -> Result<Self, NumError> {
        ParamVector::new(layout, t.data().to_vec())
    }

    /// Slice of the flat data for a named view.
    pub fn view(&self, name: &str) -> Option<&[f64]> {
        let v = self.layout.view(name)?;
        Some(&self.flat[v.offset..v.offset + v.numel()])
    }

    pub fn same_layout(&self, other: &ParamVector) -> bool {
        Arc::ptr_eq(&self.layout, &other.layout) || self.layout == other.layout
    }

    pub fn ensure_same_layout(&self, other: &ParamVector) -> Result<(), NumError> {
        if self.same_layout(other) {
            Ok(())
        } else {
            Err(NumError::LayoutMismatch {
                detail: format!(
                    "{} views / {} params vs {} views / {} params",
                    self.layout.views().len(),
                    self.len(),
                    other.layout.views().len(),
                    other.len()
                ),
            })
        }
    }

    /// `self + alpha * other`, elementwise.
    pub fn add_scaled(&mut self, other: &ParamVector, alpha: f64) {
        debug_assert!(self.same_layout(other));
        for (a, b) in self.flat.iter_mut().zip(&other.flat) {
            *a += alpha * b;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.flat.iter().all(|v| v.is_finite())
    }

    pub fn l2_distance(&self, other: &ParamVector) -> f64 {
        debug_assert!(self.same_layout(other));
        self.flat
            .iter()
            .zip(&other.flat)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }

    pub fn bitwise_eq(&self, other: &ParamVector) -> bool {
        self.flat.len() == other.flat.len()
            && self
                .flat
                .iter()
                .zip(&other.flat)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}
