//! Minimal reverse-mode differentiable tensor engine.
//!
//! Tensors are dense, row-major `f64` arrays. Image-like tensors use the
//! `[channels, height, width]` layout, convolution kernels use
//! `[out_channels, in_channels, kh, kw]` and scalars have an empty shape.
//!
//! A [`Tape`] records every operation of one forward pass. Calling
//! [`Tape::backward`] on a scalar walks the tape in reverse and returns the
//! gradient of every node that depends on a differentiable leaf. Parameters
//! live outside the tape in a [`ParamSet`]; binding one with [`Tape::param`]
//! snapshots its values, and [`ParamSet::accumulate_grads`] adds the
//! resulting gradients back. Gradients accumulate until cleared, so two
//! backward passes without an intervening [`ParamSet::zero_grads`] or
//! [`sgd_step`] sum their contributions.

mod conv;
mod params;
mod resize;
mod tape;

pub use params::{clip_grad_norm, grad_norm, sgd_step, ParamSet, Stage};
pub use resize::ResizePlan;
pub use tape::{Gradients, NeighborWeights, Tape, Var};

use crate::error::{Error, Result};

/// Lower clamp applied before every logarithm.
pub const PROB_EPS: f64 = 1e-7;

/// Dense tensor with an optional gradient buffer of the same size.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffTensor {
    shape: Vec<usize>,
    values: Vec<f64>,
    grad: Option<Vec<f64>>,
}

impl DiffTensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        let expected = numel(&shape);
        if expected != values.len() {
            return Err(Error::shape(format!(
                "shape {:?} holds {} elements but {} values were given",
                shape,
                expected,
                values.len()
            )));
        }
        Ok(DiffTensor {
            shape,
            values,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = numel(&shape);
        DiffTensor {
            shape,
            values: vec![0.0; n],
            grad: None,
        }
    }

    pub fn filled(shape: Vec<usize>, value: f64) -> Self {
        let n = numel(&shape);
        DiffTensor {
            shape,
            values: vec![value; n],
            grad: None,
        }
    }

    pub fn scalar(value: f64) -> Self {
        DiffTensor {
            shape: Vec::new(),
            values: vec![value],
            grad: None,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    /// Adds `delta` into the gradient buffer, allocating it on first use.
    pub fn accumulate_grad(&mut self, delta: &[f64]) -> Result<()> {
        if delta.len() != self.values.len() {
            return Err(Error::shape(format!(
                "gradient of length {} for tensor of shape {:?}",
                delta.len(),
                self.shape
            )));
        }
        let grad = self.grad.get_or_insert_with(|| vec![0.0; delta.len()]);
        for (g, d) in grad.iter_mut().zip(delta) {
            *g += d;
        }
        Ok(())
    }

    pub(crate) fn ensure_grad(&mut self) {
        if self.grad.is_none() {
            self.grad = Some(vec![0.0; self.values.len()]);
        }
    }

    pub(crate) fn grad_mut(&mut self) -> Option<&mut Vec<f64>> {
        self.grad.as_mut()
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Splits a `[C, H, W]` shape.
pub(crate) fn chw(shape: &[usize]) -> Result<(usize, usize, usize)> {
    match shape {
        [c, h, w] => Ok((*c, *h, *w)),
        _ => Err(Error::shape(format!(
            "expected a [channels, height, width] tensor, got shape {shape:?}"
        ))),
    }
}

/// `[C, H, W]` extents of a tape node.
pub fn chw_of(tape: &Tape, v: Var) -> Result<(usize, usize, usize)> {
    chw(tape.shape(v))
}
