use serde::{Deserialize, Serialize};

use super::DiffTensor;
use crate::error::{Error, Result};

/// Which pipeline stage produced a parameter set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    /// Freshly initialized.
    Init,
    /// Offline training over the training set.
    Offline,
    /// Per-sequence fine-tuning on the annotated first frame.
    Sequence,
    /// Per-frame test-time adaptation.
    Frame,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Init => "init",
            Stage::Offline => "offline",
            Stage::Sequence => "sequence",
            Stage::Frame => "frame",
        }
    }

    pub fn parse(s: &str) -> Option<Stage> {
        match s {
            "init" => Some(Stage::Init),
            "offline" => Some(Stage::Offline),
            "sequence" => Some(Stage::Sequence),
            "frame" => Some(Stage::Frame),
            _ => None,
        }
    }
}

/// Named, ordered collection of trainable tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    stage: Stage,
    entries: Vec<(String, DiffTensor)>,
}

impl ParamSet {
    pub fn new(stage: Stage) -> Self {
        ParamSet {
            stage,
            entries: Vec::new(),
        }
    }

    pub fn stage(&self) -> Stage {
        self.stage
    }

    pub fn set_stage(&mut self, stage: Stage) {
        self.stage = stage;
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: DiffTensor) -> Result<()> {
        let name = name.into();
        if self.get(&name).is_some() {
            return Err(Error::invalid(format!("duplicate parameter name `{name}`")));
        }
        self.entries.push((name, tensor));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&DiffTensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut DiffTensor> {
        self.entries
            .iter_mut()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.get(name).is_some()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &DiffTensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut DiffTensor)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    /// Copy of the current values, gradients dropped.
    pub fn snapshot(&self) -> ParamSet {
        let mut copy = self.clone();
        copy.zero_grads();
        copy
    }

    /// Overwrites values and stage from a snapshot taken from this set.
    pub fn restore(&mut self, snapshot: &ParamSet) -> Result<()> {
        if snapshot.entries.len() != self.entries.len() {
            return Err(Error::invalid("snapshot has a different parameter layout"));
        }
        for ((name, dst), (src_name, src)) in self.entries.iter_mut().zip(&snapshot.entries) {
            if name != src_name || dst.shape() != src.shape() {
                return Err(Error::invalid(format!(
                    "snapshot parameter `{src_name}` does not match `{name}`"
                )));
            }
            dst.values_mut().copy_from_slice(src.values());
            dst.clear_grad();
        }
        self.stage = snapshot.stage;
        Ok(())
    }

    /// Drops all gradient buffers.
    pub fn zero_grads(&mut self) {
        for (_, t) in &mut self.entries {
            t.clear_grad();
        }
    }

    /// Adds the gradients a backward pass computed for this set's bound
    /// parameters. Every parameter ends up with a gradient buffer, zero if
    /// the loss does not depend on it.
    pub fn accumulate_grads(&mut self, tape: &super::Tape, grads: &super::Gradients) -> Result<()> {
        for (name, tensor) in &mut self.entries {
            tensor.ensure_grad();
            for var in tape.bound_vars(name) {
                if let Some(g) = grads.get(var) {
                    tensor.accumulate_grad(g)?;
                }
            }
        }
        Ok(())
    }

    /// Largest absolute difference between two layouts with equal names.
    pub fn max_abs_diff(&self, other: &ParamSet) -> Option<f64> {
        if self.entries.len() != other.entries.len() {
            return None;
        }
        let mut worst = 0.0f64;
        for ((n1, a), (n2, b)) in self.entries.iter().zip(&other.entries) {
            if n1 != n2 || a.shape() != b.shape() {
                return None;
            }
            for (x, y) in a.values().iter().zip(b.values()) {
                worst = worst.max((x - y).abs());
            }
        }
        Some(worst)
    }
}

/// Global L2 norm of all gradient buffers.
pub fn grad_norm(params: &ParamSet) -> f64 {
    params
        .iter()
        .filter_map(|(_, t)| t.grad())
        .flat_map(|g| g.iter())
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt()
}

/// Rescales every gradient so the global norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(params: &mut ParamSet, max_norm: f64) -> Result<f64> {
    if !(max_norm > 0.0) {
        return Err(Error::invalid(format!("clip norm must be positive, got {max_norm}")));
    }
    let norm = grad_norm(params);
    if norm > max_norm {
        let factor = max_norm / norm;
        for (_, t) in params.iter_mut() {
            if let Some(g) = t.grad_mut() {
                g.iter_mut().for_each(|v| *v *= factor);
            }
        }
    }
    Ok(norm)
}

/// Plain gradient descent: `value -= lr * grad`, then clears every gradient.
pub fn sgd_step(params: &mut ParamSet, lr: f64) -> Result<()> {
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(Error::invalid(format!(
            "learning rate must be positive, got {lr}"
        )));
    }
    if let Some((name, _)) = params.iter().find(|(_, t)| t.grad().is_none()) {
        return Err(Error::invalid(format!(
            "parameter `{name}` has no gradient; run backward first"
        )));
    }
    for (_, tensor) in params.iter_mut() {
        let grad = tensor.grad_mut().map(std::mem::take).unwrap_or_default();
        for (v, g) in tensor.values_mut().iter_mut().zip(&grad) {
            *v -= lr * g;
        }
        tensor.clear_grad();
    }
    Ok(())
}
