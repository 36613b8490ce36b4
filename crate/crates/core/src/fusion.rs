//! Multi-scale context aggregation and the scale-inconsistency variance map.
//!
//! The attention head reads the small-scale features concatenated with the
//! full-scale features resized onto the small-scale grid, and emits one
//! weight per pixel at that grid. The fused prediction is
//!
//! ```text
//! Y = U(U(A, s1) * M_s1, s2) + (1 - U(A, s2)) * M_s2
//! ```
//!
//! renormalized so every pixel's class vector sums to one. The variance map
//! is the per-pixel KL divergence `sum_c u_c * ln(u_c / m_c)` where `u` is
//! `M_s1` upsampled to the `s2` grid and `m` is `M_s2`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{DiffTensor, ParamSet, Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScaleConfig {
    pub s1: f64,
    pub s2: f64,
}

impl Default for ScaleConfig {
    fn default() -> Self {
        ScaleConfig { s1: 0.5, s2: 1.0 }
    }
}

impl ScaleConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.s1 > 0.0 && self.s1 < self.s2 && self.s2.is_finite()) {
            return Err(Error::config(format!(
                "scales must satisfy 0 < s1 < s2, got s1 = {}, s2 = {}",
                self.s1, self.s2
            )));
        }
        Ok(())
    }

    pub fn factor(&self, tag: ScaleTag) -> f64 {
        match tag {
            ScaleTag::S1 => self.s1,
            ScaleTag::S2 => self.s2,
        }
    }

    /// Grid extent of a `height x width` frame presented at `tag`.
    pub fn extent(&self, tag: ScaleTag, height: usize, width: usize) -> (usize, usize) {
        let s = self.factor(tag);
        let scaled = |n: usize| ((n as f64 * s).round() as usize).max(1);
        (scaled(height), scaled(width))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ScaleTag {
    S1,
    S2,
}

/// Class probabilities at one input scale.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbMap {
    pub var: Var,
    pub scale: ScaleTag,
}

impl ProbMap {
    pub fn new(var: Var, scale: ScaleTag) -> Self {
        ProbMap { var, scale }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionConfig {
    /// Channels of each backbone feature map.
    pub feature_channels: usize,
    /// Width of the two hidden 3x3 layers.
    pub width: usize,
}

impl AttentionConfig {
    pub fn new(feature_channels: usize) -> Self {
        AttentionConfig {
            feature_channels,
            width: 16,
        }
    }

    pub fn param_count(&self) -> usize {
        let (f, w) = (self.feature_channels, self.width);
        (w * 2 * f * 9 + w) + (w * w * 9 + w) + (w + 1)
    }

    pub fn infer(params: &ParamSet) -> Option<AttentionConfig> {
        let w1 = params.get("attention.conv1.weight")?;
        Some(AttentionConfig {
            feature_channels: w1.shape()[1] / 2,
            width: w1.shape()[0],
        })
    }
}

/// Adds the three attention layers to `params`. The hidden layers get
/// He-uniform weights; the final 1x1 layer starts at zero so the initial
/// attention is 0.5 everywhere, which makes the untrained head an exact
/// average of the two scales.
pub fn init_attention(seed: u64, cfg: &AttentionConfig, params: &mut ParamSet) -> Result<()> {
    if cfg.feature_channels == 0 || cfg.width == 0 {
        return Err(Error::config("attention widths must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let (f, w) = (cfg.feature_channels, cfg.width);
    let mut uniform = |shape: Vec<usize>, fan_in: usize| -> Result<DiffTensor> {
        let bound = (6.0 / fan_in as f64).sqrt();
        let n = shape.iter().product();
        DiffTensor::new(shape, (0..n).map(|_| rng.gen_range(-bound..bound)).collect())
    };
    params.insert("attention.conv1.weight", uniform(vec![w, 2 * f, 3, 3], 2 * f * 9)?)?;
    params.insert("attention.conv1.bias", DiffTensor::zeros(vec![w]))?;
    params.insert("attention.conv2.weight", uniform(vec![w, w, 3, 3], w * 9)?)?;
    params.insert("attention.conv2.bias", DiffTensor::zeros(vec![w]))?;
    params.insert("attention.conv3.weight", DiffTensor::zeros(vec![1, w, 1, 1]))?;
    params.insert("attention.conv3.bias", DiffTensor::zeros(vec![1]))?;
    Ok(())
}

/// Pixel attention `A` on the `feat_s1` grid, values in `[0, 1]`.
pub fn attention_forward(tape: &mut Tape, params: &ParamSet, feat_s1: Var, feat_s2: Var) -> Result<Var> {
    let s1 = tape.shape(feat_s1).to_vec();
    let s2 = tape.shape(feat_s2).to_vec();
    if s1.len() != 3 || s2.len() != 3 {
        return Err(Error::shape("attention features must be [C, H, W]"));
    }
    let expected = params
        .get("attention.conv1.weight")
        .map(|w| w.shape()[1])
        .ok_or_else(|| Error::invalid("parameter set has no attention head"))?;
    if s1[0] + s2[0] != expected {
        return Err(Error::shape(format!(
            "attention head expects {expected} input channels, features give {} + {}",
            s1[0], s2[0]
        )));
    }
    let resized = tape.bilinear_resize(feat_s2, s1[1], s1[2])?;
    let mut x = tape.concat_channels(&[feat_s1, resized])?;
    for (i, layer) in ["conv1", "conv2", "conv3"].iter().enumerate() {
        let w = tape.param(params, &format!("attention.{layer}.weight"))?;
        let b = tape.param(params, &format!("attention.{layer}.bias"))?;
        let pad = tape.shape(w)[2] / 2;
        x = tape.conv2d(x, w, 1, pad)?;
        x = tape.bias_add(x, b)?;
        x = if i < 2 { tape.silu(x) } else { tape.sigmoid(x) };
    }
    Ok(x)
}

fn check_scales(tape: &Tape, m_s1: ProbMap, m_s2: ProbMap) -> Result<()> {
    if m_s1.scale != ScaleTag::S1 || m_s2.scale != ScaleTag::S2 {
        return Err(Error::invalid(format!(
            "fusion expects (S1, S2) predictions, got ({:?}, {:?})",
            m_s1.scale, m_s2.scale
        )));
    }
    let (a, b) = (tape.shape(m_s1.var), tape.shape(m_s2.var));
    if a.len() != 3 || b.len() != 3 || a[0] != b[0] {
        return Err(Error::shape(format!(
            "prediction shapes {a:?} and {b:?} are incompatible"
        )));
    }
    Ok(())
}

fn extent(tape: &Tape, v: Var) -> (usize, usize) {
    let s = tape.shape(v);
    (s[1], s[2])
}

/// The fusion rule without renormalization.
pub fn fuse_unnormalized(tape: &mut Tape, attention: Var, m_s1: ProbMap, m_s2: ProbMap) -> Result<Var> {
    check_scales(tape, m_s1, m_s2)?;
    if tape.shape(attention).first() != Some(&1) {
        return Err(Error::shape("attention map must have a single channel"));
    }
    let (h1, w1) = extent(tape, m_s1.var);
    let (h2, w2) = extent(tape, m_s2.var);
    let a_s1 = tape.bilinear_resize(attention, h1, w1)?;
    let weighted_s1 = tape.mul(a_s1, m_s1.var)?;
    let small = tape.bilinear_resize(weighted_s1, h2, w2)?;
    let a_s2 = tape.bilinear_resize(attention, h2, w2)?;
    let keep = tape.one_minus(a_s2);
    let large = tape.mul(keep, m_s2.var)?;
    tape.add(small, large)
}

fn renormalize(tape: &mut Tape, x: Var) -> Result<Var> {
    let total = tape.sum_channels(x)?;
    tape.div(x, total)
}

/// Attention-weighted fusion at the `s2` grid, renormalized per pixel.
pub fn fuse(tape: &mut Tape, attention: Var, m_s1: ProbMap, m_s2: ProbMap) -> Result<ProbMap> {
    let raw = fuse_unnormalized(tape, attention, m_s1, m_s2)?;
    Ok(ProbMap::new(renormalize(tape, raw)?, ScaleTag::S2))
}

/// Baseline fusion: `(U(M_s1, s2) + M_s2) / 2`.
pub fn average_fuse(tape: &mut Tape, m_s1: ProbMap, m_s2: ProbMap) -> Result<ProbMap> {
    check_scales(tape, m_s1, m_s2)?;
    let (h2, w2) = extent(tape, m_s2.var);
    let up = tape.bilinear_resize(m_s1.var, h2, w2)?;
    let total = tape.add(up, m_s2.var)?;
    Ok(ProbMap::new(tape.scale(total, 0.5), ScaleTag::S2))
}

/// Per-pixel KL divergence of the upsampled `s1` prediction from the `s2`
/// prediction, `[1, H2, W2]`, clamped at zero.
pub fn variance_map(tape: &mut Tape, m_s1: ProbMap, m_s2: ProbMap) -> Result<Var> {
    check_scales(tape, m_s1, m_s2)?;
    let (h2, w2) = extent(tape, m_s2.var);
    let up = tape.bilinear_resize(m_s1.var, h2, w2)?;
    let log_up = tape.log(up);
    let log_ref = tape.log(m_s2.var);
    let ratio = tape.sub(log_up, log_ref)?;
    let terms = tape.mul(up, ratio)?;
    let kl = tape.sum_channels(terms)?;
    tape.clamp(kl, 0.0, f64::INFINITY)
}
