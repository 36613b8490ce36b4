//! Training objectives.
//!
//! All per-pixel losses are summed, not averaged, so learning rates scale
//! with frame area.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::ProbMap;
use crate::tensor::{chw_of, NeighborWeights, Tape, Var};

/// Channel holding the foreground probability in binary predictions.
pub const FOREGROUND: usize = 1;

/// Per-pixel cross-entropy `-ln pred(p, target(p))`, shape `[1, H, W]`.
pub fn seg_loss(tape: &mut Tape, pred: ProbMap, target: &[u8]) -> Result<Var> {
    let (c, h, w) = chw_of(tape, pred.var)?;
    if target.len() != h * w {
        return Err(Error::shape(format!(
            "target has {} labels for a {h}x{w} prediction",
            target.len()
        )));
    }
    if let Some(bad) = target.iter().find(|&&l| l as usize >= c) {
        return Err(Error::invalid(format!(
            "label {bad} out of range for {c} classes"
        )));
    }
    let plane = h * w;
    let mut onehot = vec![0.0; c * plane];
    for (p, &l) in target.iter().enumerate() {
        onehot[l as usize * plane + p] = 1.0;
    }
    let onehot = tape.constant_from(vec![c, h, w], onehot)?;
    let logp = tape.log(pred.var);
    let picked = tape.mul(onehot, logp)?;
    let total = tape.sum_channels(picked)?;
    Ok(tape.scale(total, -1.0))
}

/// `sum_p exp(beta * V(p)) * L(p)`. Gradients flow through both maps.
pub fn variance_weighted_loss(tape: &mut Tape, loss_map: Var, variance: Var, beta: f64) -> Result<Var> {
    if tape.shape(loss_map) != tape.shape(variance) {
        return Err(Error::shape(format!(
            "loss map {:?} and variance map {:?} differ",
            tape.shape(loss_map),
            tape.shape(variance)
        )));
    }
    let scaled = tape.scale(variance, beta);
    let weight = tape.exp(scaled);
    let weighted = tape.mul(weight, loss_map)?;
    Ok(tape.sum(weighted))
}

/// `sum_p exp(-V(p)) * L(p)` against pseudo-labels, with `V` held constant.
pub fn intra_loss(tape: &mut Tape, pred: ProbMap, pseudo_label: &[u8], variance: Var) -> Result<Var> {
    let loss_map = seg_loss(tape, pred, pseudo_label)?;
    let frozen = tape.stop_gradient(variance);
    variance_weighted_loss(tape, loss_map, frozen, -1.0)
}

/// Hard labels from a prediction: per-pixel argmax, ties to the lower class.
pub fn pseudo_labels(probs: &[f64], classes: usize) -> Vec<u8> {
    let plane = probs.len() / classes;
    (0..plane)
        .map(|p| {
            let mut best = 0;
            for c in 1..classes {
                if probs[c * plane + p] > probs[best * plane + p] {
                    best = c;
                }
            }
            best as u8
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BilateralConfig {
    /// Odd side length of the square neighbourhood.
    pub kernel: usize,
    /// Spatial standard deviation in pixels.
    pub sigma_spatial: f64,
    /// Intensity standard deviation, intensities in `[0, 1]`.
    pub sigma_intensity: f64,
}

impl Default for BilateralConfig {
    fn default() -> Self {
        BilateralConfig {
            kernel: 5,
            sigma_spatial: 2.0,
            sigma_intensity: 0.1,
        }
    }
}

impl BilateralConfig {
    pub fn validate(&self) -> Result<()> {
        if self.kernel == 0 || self.kernel % 2 == 0 {
            return Err(Error::config(format!(
                "bilateral kernel must be odd and at least 1, got {}",
                self.kernel
            )));
        }
        if !(self.sigma_spatial > 0.0 && self.sigma_intensity > 0.0) {
            return Err(Error::config("bilateral sigmas must be positive"));
        }
        Ok(())
    }
}

/// A `[3, H, W]` RGB frame with intensities in `[0, 1]`.
#[derive(Debug, Clone, Copy)]
pub struct FrameView<'a> {
    pub height: usize,
    pub width: usize,
    pub rgb: &'a [f64],
}

impl<'a> FrameView<'a> {
    pub fn new(height: usize, width: usize, rgb: &'a [f64]) -> Result<Self> {
        if rgb.len() != 3 * height * width {
            return Err(Error::shape(format!(
                "{} values do not form a 3x{height}x{width} frame",
                rgb.len()
            )));
        }
        Ok(FrameView { height, width, rgb })
    }

    fn dist2(&self, p: usize, other: &FrameView<'_>, q: usize) -> f64 {
        let (a, b) = (self.height * self.width, other.height * other.width);
        (0..3)
            .map(|c| {
                let d = self.rgb[c * a + p] - other.rgb[c * b + q];
                d * d
            })
            .sum()
    }
}

fn unnormalized_weight(
    p: (usize, usize),
    q: (usize, usize),
    current: &FrameView<'_>,
    previous: &FrameView<'_>,
    cfg: &BilateralConfig,
) -> f64 {
    let dy = p.0 as f64 - q.0 as f64;
    let dx = p.1 as f64 - q.1 as f64;
    let spatial = (dy * dy + dx * dx) / (2.0 * cfg.sigma_spatial * cfg.sigma_spatial);
    let pi = p.0 * current.width + p.1;
    let qi = q.0 * previous.width + q.1;
    let intensity =
        current.dist2(pi, previous, qi) / (2.0 * cfg.sigma_intensity * cfg.sigma_intensity);
    (-spatial - intensity).exp()
}

/// In-bounds `(row, col)` positions of the kernel centred at `p`.
fn kernel_positions(p: (usize, usize), h: usize, w: usize, k: usize) -> impl Iterator<Item = (usize, usize)> {
    let r = (k / 2) as isize;
    let (py, px) = (p.0 as isize, p.1 as isize);
    (-r..=r).flat_map(move |dy| {
        (-r..=r).filter_map(move |dx| {
            let (y, x) = (py + dy, px + dx);
            (y >= 0 && x >= 0 && y < h as isize && x < w as isize).then_some((y as usize, x as usize))
        })
    })
}

fn check_frames(current: &FrameView<'_>, previous: &FrameView<'_>) -> Result<()> {
    if current.height == 0 || current.width == 0 {
        return Err(Error::invalid("bilateral kernel is empty on a zero-sized frame"));
    }
    if (current.height, current.width) != (previous.height, previous.width) {
        return Err(Error::shape(format!(
            "frame extents differ: {}x{} vs {}x{}",
            current.height, current.width, previous.height, previous.width
        )));
    }
    Ok(())
}

/// Normalized bilateral weight between pixel `p` of the current frame and
/// pixel `q` of the previous frame; zero when `q` lies outside `p`'s kernel.
pub fn bilateral_weight(
    p: (usize, usize),
    q: (usize, usize),
    current: &FrameView<'_>,
    previous: &FrameView<'_>,
    cfg: &BilateralConfig,
) -> Result<f64> {
    cfg.validate()?;
    check_frames(current, previous)?;
    if p.0 >= current.height || p.1 >= current.width {
        return Err(Error::invalid(format!("pixel {p:?} outside the frame")));
    }
    let mut total = 0.0;
    let mut hit = None;
    for pos in kernel_positions(p, current.height, current.width, cfg.kernel) {
        let w = unnormalized_weight(p, pos, current, previous, cfg);
        total += w;
        if pos == q {
            hit = Some(w);
        }
    }
    Ok(hit.map_or(0.0, |w| w / total))
}

/// All normalized kernel weights for a frame pair.
pub fn bilateral_weights(
    current: &FrameView<'_>,
    previous: &FrameView<'_>,
    cfg: &BilateralConfig,
) -> Result<NeighborWeights> {
    cfg.validate()?;
    check_frames(current, previous)?;
    let (h, w) = (current.height, current.width);
    let mut offsets = Vec::with_capacity(h * w + 1);
    let mut neighbors = Vec::new();
    let mut weights = Vec::new();
    offsets.push(0);
    for y in 0..h {
        for x in 0..w {
            let start = weights.len();
            for pos in kernel_positions((y, x), h, w, cfg.kernel) {
                neighbors.push(pos.0 * w + pos.1);
                weights.push(unnormalized_weight((y, x), pos, current, previous, cfg));
            }
            let total: f64 = weights[start..].iter().sum();
            for v in &mut weights[start..] {
                *v /= total;
            }
            offsets.push(weights.len());
        }
    }
    Ok(NeighborWeights {
        height: h,
        width: w,
        offsets,
        neighbors,
        weights,
    })
}

/// `sum_p sum_{q in K_p} F(p, q) |Y_t(p) - Y_prev(q)|` on the foreground
/// channel. `previous_fg` is a constant map.
pub fn inter_loss(
    tape: &mut Tape,
    pred: ProbMap,
    previous_fg: &[f64],
    current: &FrameView<'_>,
    previous: &FrameView<'_>,
    cfg: &BilateralConfig,
) -> Result<Var> {
    let (_, h, w) = chw_of(tape, pred.var)?;
    if (h, w) != (current.height, current.width) {
        return Err(Error::shape(format!(
            "prediction {h}x{w} does not match frame {}x{}",
            current.height, current.width
        )));
    }
    let weights = bilateral_weights(current, previous, cfg)?;
    inter_loss_with(tape, pred, previous_fg, Arc::new(weights))
}

/// [`inter_loss`] with precomputed kernel weights.
pub fn inter_loss_with(
    tape: &mut Tape,
    pred: ProbMap,
    previous_fg: &[f64],
    weights: Arc<NeighborWeights>,
) -> Result<Var> {
    let fg = tape.select_channel(pred.var, FOREGROUND)?;
    tape.neighborhood_l1(fg, previous_fg.to_vec(), weights)
}

/// `L_intra + L_inter`.
pub fn online_loss(tape: &mut Tape, intra: Var, inter: Var) -> Result<Var> {
    tape.add(intra, inter)
}
