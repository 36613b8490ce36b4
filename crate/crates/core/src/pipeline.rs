//! Offline training, first-frame fine-tuning and sequential test-time
//! adaptation around one segmenter.
//!
//! Every frame is processed at two scales. The backbone sees the frame and
//! the previous foreground probability resized to each scale's grid; the two
//! predictions are fused (learned attention, plain average, or one scale
//! alone) on the `s2` grid, and their KL disagreement is kept as the variance
//! map.
//!
//! During [`run_sequence`] each object is tracked independently. For frame
//! `t >= 1` the model first predicts with the parameters left by frame
//! `t - 1`; that prediction supplies hard pseudo-labels and the variance map.
//! Then `adaptation_steps` gradient steps are taken on the intra-frame plus
//! inter-frame loss, and the frame is predicted again with the updated
//! parameters. The second prediction is emitted and becomes the guidance for
//! frame `t + 1`.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{self, BackboneConfig};
use crate::data::{resize_planes, Frame, Mask, SequenceInput, VideoSequence};
use crate::error::{Error, Result};
use crate::fusion::{self, AttentionConfig, ProbMap, ScaleConfig, ScaleTag};
use crate::losses::{self, BilateralConfig, FrameView, FOREGROUND};
use crate::tensor::{clip_grad_norm, sgd_step, ParamSet, Stage, Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionMode {
    /// Learned pixel attention over both scales.
    Attention,
    /// Mean of the two scales.
    Average,
    /// The `s1` prediction alone, upsampled.
    Small,
    /// The `s2` prediction alone.
    Large,
}

impl FusionMode {
    pub fn as_str(self) -> &'static str {
        match self {
            FusionMode::Attention => "attention",
            FusionMode::Average => "average",
            FusionMode::Small => "small",
            FusionMode::Large => "large",
        }
    }

    pub fn parse(s: &str) -> Option<FusionMode> {
        match s {
            "attention" => Some(FusionMode::Attention),
            "average" => Some(FusionMode::Average),
            "small" => Some(FusionMode::Small),
            "large" => Some(FusionMode::Large),
            _ => None,
        }
    }
}

/// Architecture of the full model. Stored in checkpoints.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub fusion: FusionMode,
    pub attention_width: usize,
    pub scales: ScaleConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            backbone: BackboneConfig::default(),
            fusion: FusionMode::Attention,
            attention_width: 16,
            scales: ScaleConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.scales.validate()?;
        if self.backbone.classes != 2 {
            return Err(Error::config(format!(
                "the pipeline segments one object at a time and needs 2 classes, got {}",
                self.backbone.classes
            )));
        }
        if self.fusion == FusionMode::Attention && self.attention_width == 0 {
            return Err(Error::config("attention width must be positive"));
        }
        Ok(())
    }

    pub fn attention(&self) -> Option<AttentionConfig> {
        (self.fusion == FusionMode::Attention).then(|| AttentionConfig {
            feature_channels: self.backbone.feature_channels(),
            width: self.attention_width,
        })
    }

    /// Checks that `params` holds exactly the layers this model uses.
    pub fn check_params(&self, params: &ParamSet) -> Result<()> {
        let found = BackboneConfig::infer(params)?;
        if found != self.backbone {
            return Err(Error::invalid(format!(
                "parameters describe backbone {found:?}, config says {:?}",
                self.backbone
            )));
        }
        match (self.attention(), AttentionConfig::infer(params)) {
            (Some(want), Some(have)) if want == have => Ok(()),
            (None, None) => Ok(()),
            (want, have) => Err(Error::invalid(format!(
                "attention head mismatch: config {want:?}, parameters {have:?}"
            ))),
        }
    }
}

/// Fresh parameters; the attention head is only created for attention fusion.
pub fn init_model(model: &ModelConfig, seed: u64) -> Result<ParamSet> {
    model.validate()?;
    let mut params = backbone::init_backbone(seed, &model.backbone)?;
    if let Some(att) = model.attention() {
        fusion::init_attention(seed, &att, &mut params)?;
    }
    Ok(params)
}

/// Everything a run needs besides data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub offline_epochs: usize,
    pub offline_lr: f64,
    /// The offline learning rate decays linearly to `offline_lr *
    /// offline_lr_floor` over the last step.
    pub offline_lr_floor: f64,
    /// Frames whose gradients are averaged per offline step.
    pub batch_frames: usize,
    pub finetune_steps: usize,
    pub finetune_lr: f64,
    pub adaptation_steps: usize,
    pub adaptation_lr: f64,
    pub beta: f64,
    pub bilateral: BilateralConfig,
    /// Maximum random shift, in pixels, of the mask used as guidance while
    /// training.
    pub guidance_jitter: usize,
    /// Upper bound on the global gradient norm of an offline step; `None`
    /// disables clipping.
    pub grad_clip: Option<f64>,
    /// Randomly permute and invert colour channels of offline samples.
    pub color_augment: bool,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            offline_epochs: 12,
            offline_lr: 1e-3,
            offline_lr_floor: 0.05,
            batch_frames: 1,
            finetune_steps: 0,
            finetune_lr: 1e-4,
            adaptation_steps: 0,
            adaptation_lr: 2e-5,
            beta: 1.0,
            bilateral: BilateralConfig::default(),
            guidance_jitter: 4,
            grad_clip: Some(300.0),
            color_augment: true,
            seed: 0,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.bilateral.validate()?;
        for (name, lr) in [
            ("offline_lr", self.offline_lr),
            ("finetune_lr", self.finetune_lr),
            ("adaptation_lr", self.adaptation_lr),
        ] {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(Error::config(format!("{name} must be positive, got {lr}")));
            }
        }
        if !(self.offline_lr_floor > 0.0 && self.offline_lr_floor <= 1.0) {
            return Err(Error::config(format!(
                "offline_lr_floor must lie in (0, 1], got {}",
                self.offline_lr_floor
            )));
        }
        if self.batch_frames == 0 {
            return Err(Error::config("batch_frames must be at least 1"));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0 && c.is_finite()) {
                return Err(Error::config(format!("grad_clip must be positive, got {c}")));
            }
        }
        if !self.beta.is_finite() {
            return Err(Error::config("beta must be finite"));
        }
        Ok(())
    }
}

/// A frame prepared at both scales.
#[derive(Debug, Clone)]
pub struct PreparedFrame {
    pub height: usize,
    pub width: usize,
    pub s1: (usize, usize),
    pub s2: (usize, usize),
    /// Planar RGB on each grid.
    pub planes_s1: Vec<f64>,
    pub planes_s2: Vec<f64>,
}

impl PreparedFrame {
    pub fn new(frame: &Frame, scales: &ScaleConfig) -> Self {
        let (h, w) = (frame.height, frame.width);
        let planar = frame.to_planar();
        let s1 = scales.extent(ScaleTag::S1, h, w);
        let s2 = scales.extent(ScaleTag::S2, h, w);
        PreparedFrame {
            height: h,
            width: w,
            s1,
            s2,
            planes_s1: resize_planes(&planar, 3, (h, w), s1),
            planes_s2: resize_planes(&planar, 3, (h, w), s2),
        }
    }

    /// Copy with the colour channels randomly permuted and independently
    /// inverted.
    fn recolored(&self, rng: &mut ChaCha8Rng) -> PreparedFrame {
        let mut order = [0, 1, 2];
        order.shuffle(rng);
        let invert: [bool; 3] = rng.gen();
        let remap = |planes: &[f64]| {
            let plane = planes.len() / 3;
            let mut out = Vec::with_capacity(planes.len());
            for c in 0..3 {
                let src = &planes[order[c] * plane..(order[c] + 1) * plane];
                out.extend(src.iter().map(|&v| if invert[c] { 1.0 - v } else { v }));
            }
            out
        };
        PreparedFrame {
            planes_s1: remap(&self.planes_s1),
            planes_s2: remap(&self.planes_s2),
            ..*self
        }
    }

    fn view_s2(&self) -> FrameView<'_> {
        FrameView {
            height: self.s2.0,
            width: self.s2.1,
            rgb: &self.planes_s2,
        }
    }
}

/// Graph nodes of one two-scale forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ForwardPass {
    pub fused: ProbMap,
    pub m_s1: ProbMap,
    pub m_s2: ProbMap,
    pub attention: Option<Var>,
    pub variance: Var,
}

/// Records one forward pass. `guidance` is a foreground probability map on
/// the frame grid.
pub fn forward_pass(
    tape: &mut Tape,
    params: &ParamSet,
    model: &ModelConfig,
    frame: &PreparedFrame,
    guidance: &[f64],
) -> Result<ForwardPass> {
    let (h, w) = (frame.height, frame.width);
    if guidance.len() != h * w {
        return Err(Error::shape(format!(
            "guidance has {} values for a {h}x{w} frame",
            guidance.len()
        )));
    }
    let run = |tape: &mut Tape, planes: &[f64], grid: (usize, usize)| -> Result<backbone::BackboneOutput> {
        let x = tape.constant_from(vec![3, grid.0, grid.1], planes.to_vec())?;
        let g = resize_planes(guidance, 1, (h, w), grid);
        let g = tape.constant_from(vec![1, grid.0, grid.1], g)?;
        backbone::forward(tape, params, x, g)
    };
    let out_s1 = run(tape, &frame.planes_s1, frame.s1)?;
    let out_s2 = run(tape, &frame.planes_s2, frame.s2)?;
    let m_s1 = ProbMap::new(out_s1.probs, ScaleTag::S1);
    let m_s2 = ProbMap::new(out_s2.probs, ScaleTag::S2);
    let mut attention = None;
    let fused = match model.fusion {
        FusionMode::Attention => {
            let a = fusion::attention_forward(tape, params, out_s1.features, out_s2.features)?;
            attention = Some(a);
            fusion::fuse(tape, a, m_s1, m_s2)?
        }
        FusionMode::Average => fusion::average_fuse(tape, m_s1, m_s2)?,
        FusionMode::Small => {
            let up = tape.bilinear_resize(m_s1.var, frame.s2.0, frame.s2.1)?;
            ProbMap::new(up, ScaleTag::S2)
        }
        FusionMode::Large => m_s2,
    };
    let variance = fusion::variance_map(tape, m_s1, m_s2)?;
    Ok(ForwardPass {
        fused,
        m_s1,
        m_s2,
        attention,
        variance,
    })
}

/// Values of one frame's prediction. Maps are planar; the fused map,
/// `m_s2` and the variance live on the `s2` grid, `m_s1` and the attention
/// on the `s1` grid.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameResult {
    pub t: usize,
    pub s1: (usize, usize),
    pub s2: (usize, usize),
    pub fused: Vec<f64>,
    pub m_s1: Vec<f64>,
    pub m_s2: Vec<f64>,
    pub attention: Option<Vec<f64>>,
    pub variance: Vec<f64>,
    /// Foreground probability on the frame grid; the guidance for `t + 1`.
    pub foreground: Vec<f64>,
}

impl FrameResult {
    fn collect(tape: &Tape, pass: &ForwardPass, frame: &PreparedFrame, t: usize) -> Self {
        let fused = tape.value(pass.fused.var).to_vec();
        let plane = frame.s2.0 * frame.s2.1;
        let fg = &fused[FOREGROUND * plane..(FOREGROUND + 1) * plane];
        let foreground = resize_planes(fg, 1, frame.s2, (frame.height, frame.width));
        FrameResult {
            t,
            s1: frame.s1,
            s2: frame.s2,
            m_s1: tape.value(pass.m_s1.var).to_vec(),
            m_s2: tape.value(pass.m_s2.var).to_vec(),
            attention: pass.attention.map(|a| tape.value(a).to_vec()),
            variance: tape.value(pass.variance).to_vec(),
            foreground,
            fused,
        }
    }
}

/// Prediction for one frame without any parameter update.
pub fn predict_frame(
    params: &ParamSet,
    model: &ModelConfig,
    frame: &Frame,
    guidance: &[f64],
) -> Result<FrameResult> {
    predict_prepared(params, model, &PreparedFrame::new(frame, &model.scales), guidance, 0)
}

fn predict_prepared(
    params: &ParamSet,
    model: &ModelConfig,
    frame: &PreparedFrame,
    guidance: &[f64],
    t: usize,
) -> Result<FrameResult> {
    let mut tape = Tape::new();
    let pass = forward_pass(&mut tape, params, model, frame, guidance)?;
    Ok(FrameResult::collect(&tape, &pass, frame, t))
}

fn object_map(mask: &Mask, label: u8) -> Vec<f64> {
    mask.labels
        .iter()
        .map(|&l| if l == label { 1.0 } else { 0.0 })
        .collect()
}

fn object_labels(mask: &Mask, label: u8) -> Vec<u8> {
    mask.labels.iter().map(|&l| u8::from(l == label)).collect()
}

/// Nearest-neighbour resize of a binary label map.
fn resize_labels(labels: &[u8], from: (usize, usize), to: (usize, usize)) -> Vec<u8> {
    if from == to {
        return labels.to_vec();
    }
    let mut out = Vec::with_capacity(to.0 * to.1);
    for y in 0..to.0 {
        let sy = (((y as f64 + 0.5) * from.0 as f64 / to.0 as f64) as usize).min(from.0 - 1);
        for x in 0..to.1 {
            let sx = (((x as f64 + 0.5) * from.1 as f64 / to.1 as f64) as usize).min(from.1 - 1);
            out.push(labels[sy * from.1 + sx]);
        }
    }
    out
}

/// Training-time corruption of a guidance mask, so the model learns to
/// work from imperfect soft predictions: a random shift of at most `jitter`
/// pixels per axis (uncovered pixels become background), a square dilation
/// or erosion of radius up to `jitter / 2`, a box blur of radius up to 2
/// and a contrast reduction towards 0.5 by a factor in `[0.4, 1]`.
fn jitter_map(map: &[f64], h: usize, w: usize, jitter: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    if jitter == 0 {
        return map.to_vec();
    }
    let j = jitter as isize;
    let dy = rng.gen_range(-j..=j);
    let dx = rng.gen_range(-j..=j);
    let mut out = vec![0.0; h * w];
    for y in 0..h as isize {
        let sy = y - dy;
        if sy < 0 || sy >= h as isize {
            continue;
        }
        for x in 0..w as isize {
            let sx = x - dx;
            if sx >= 0 && sx < w as isize {
                out[(y as usize) * w + x as usize] = map[(sy as usize) * w + sx as usize];
            }
        }
    }
    let r = j / 2;
    let radius = rng.gen_range(-r..=r);
    if radius != 0 {
        let pick = if radius > 0 { f64::max } else { f64::min };
        out = window_filter(&out, h, w, radius.unsigned_abs(), |acc, v| pick(acc, v), |acc, _| acc);
    }
    let blur = rng.gen_range(0..=2usize);
    if blur > 0 {
        out = window_filter(&out, h, w, blur, |acc, v| acc + v, |acc, n| acc / n as f64);
    }
    let contrast = rng.gen_range(0.4..=1.0);
    out.iter().map(|&v| 0.5 + contrast * (v - 0.5)).collect()
}

/// Folds every value in the clipped square window of the given radius.
fn window_filter(
    map: &[f64],
    h: usize,
    w: usize,
    radius: usize,
    fold: impl Fn(f64, f64) -> f64,
    finish: impl Fn(f64, usize) -> f64,
) -> Vec<f64> {
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let (y0, y1) = (y.saturating_sub(radius), (y + radius).min(h - 1));
            let (x0, x1) = (x.saturating_sub(radius), (x + radius).min(w - 1));
            let mut acc = map[y * w + x];
            let mut n = 0;
            for yy in y0..=y1 {
                for xx in x0..=x1 {
                    if (yy, xx) != (y, x) {
                        acc = fold(acc, map[yy * w + xx]);
                    }
                    n += 1;
                }
            }
            out[y * w + x] = finish(acc, n);
        }
    }
    out
}

/// Offline objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Objective {
    /// `sum_p exp(beta V(p)) L_seg(p)`.
    VarianceWeighted(f64),
    /// `sum_p L_seg(p)`.
    Plain,
}

/// One line of a training log.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LogEntry {
    pub step: usize,
    pub name: String,
    pub value: f64,
}

impl std::fmt::Display for LogEntry {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} {} {:.17e}", self.step, self.name, self.value)
    }
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub params: ParamSet,
    pub log: Vec<LogEntry>,
}

/// A supervised training example: frame `t` of a sequence for one object,
/// guided by that object's mask at `t - 1` (or `t` for the first frame).
#[derive(Debug, Clone, Copy)]
struct Sample {
    seq: usize,
    t: usize,
    label: u8,
}

struct TrainSet<'a> {
    sequences: &'a [VideoSequence],
    prepared: Vec<Vec<PreparedFrame>>,
    samples: Vec<Sample>,
}

impl<'a> TrainSet<'a> {
    fn new(sequences: &'a [VideoSequence], scales: &ScaleConfig) -> Result<Self> {
        if sequences.is_empty() {
            return Err(Error::invalid("training set is empty"));
        }
        let mut samples = Vec::new();
        for (i, seq) in sequences.iter().enumerate() {
            seq.validate()?;
            for (t, m) in seq.masks.iter().enumerate() {
                if m.is_none() {
                    return Err(Error::invalid(format!(
                        "training sequence {} has no mask for frame {t}",
                        seq.id
                    )));
                }
                for label in 1..=seq.object_count as u8 {
                    samples.push(Sample { seq: i, t, label });
                }
            }
        }
        let prepared = sequences
            .iter()
            .map(|s| s.frames.iter().map(|f| PreparedFrame::new(f, scales)).collect())
            .collect();
        Ok(TrainSet {
            sequences,
            prepared,
            samples,
        })
    }

    fn mask(&self, s: Sample, t: usize) -> &Mask {
        self.sequences[s.seq].masks[t].as_ref().expect("checked in TrainSet::new")
    }

    /// Loss of one sample on a fresh tape.
    fn loss(
        &self,
        tape: &mut Tape,
        params: &ParamSet,
        model: &ModelConfig,
        objective: Objective,
        s: Sample,
        frame: &PreparedFrame,
        guidance: &[f64],
    ) -> Result<Var> {
        let pass = forward_pass(tape, params, model, frame, guidance)?;
        let target = resize_labels(
            &object_labels(self.mask(s, s.t), s.label),
            (frame.height, frame.width),
            frame.s2,
        );
        let map = losses::seg_loss(tape, pass.fused, &target)?;
        match objective {
            Objective::VarianceWeighted(beta) => {
                losses::variance_weighted_loss(tape, map, pass.variance, beta)
            }
            Objective::Plain => Ok(tape.sum(map)),
        }
    }

    fn clean_guidance(&self, s: Sample) -> Vec<f64> {
        object_map(self.mask(s, s.t.saturating_sub(1)), s.label)
    }
}

/// Offline training on the variance-weighted loss with `cfg.beta`.
pub fn offline_train(sequences: &[VideoSequence], cfg: &RunConfig) -> Result<TrainReport> {
    offline_train_with(sequences, cfg, Objective::VarianceWeighted(cfg.beta))
}

/// Mini-batch gradient descent over every (frame, object) pair.
/// Each step averages the summed-pixel losses of `batch_frames` samples.
pub fn offline_train_with(
    sequences: &[VideoSequence],
    cfg: &RunConfig,
    objective: Objective,
) -> Result<TrainReport> {
    cfg.validate()?;
    let set = TrainSet::new(sequences, &cfg.model.scales)?;
    let model = &cfg.model;
    let mut params = init_model(model, cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(2);
    let mut order = set.samples.clone();
    let mut log = Vec::new();
    let mut step = 0;
    let total_steps = cfg.offline_epochs * order.len().div_ceil(cfg.batch_frames);
    for epoch in 0..cfg.offline_epochs {
        order.shuffle(&mut rng);
        let mut epoch_total = 0.0;
        for batch in order.chunks(cfg.batch_frames) {
            let mut batch_total = 0.0;
            for &s in batch {
                let frame = &set.prepared[s.seq][s.t];
                let guidance = jitter_map(
                    &set.clean_guidance(s),
                    frame.height,
                    frame.width,
                    cfg.guidance_jitter,
                    &mut rng,
                );
                let recolored;
                let frame = if cfg.color_augment && rng.gen_bool(0.5 * step as f64 / total_steps as f64) {
                    recolored = frame.recolored(&mut rng);
                    &recolored
                } else {
                    frame
                };
                let mut tape = Tape::new();
                let loss = set.loss(&mut tape, &params, model, objective, s, frame, &guidance)?;
                batch_total += tape.scalar(loss);
                tape.backward_into(loss, &mut params)?;
            }
            let mean = batch_total / batch.len() as f64;
            if !mean.is_finite() {
                return Err(Error::invalid(format!(
                    "training diverged at step {step} (loss {mean}); lower offline_lr"
                )));
            }
            let norm = match cfg.grad_clip {
                Some(c) => clip_grad_norm(&mut params, c * batch.len() as f64)?,
                None => crate::tensor::grad_norm(&params),
            } / batch.len() as f64;
            let progress = step as f64 / (total_steps - 1).max(1) as f64;
            let lr = cfg.offline_lr * (1.0 - (1.0 - cfg.offline_lr_floor) * progress);
            sgd_step(&mut params, lr / batch.len() as f64)?;
            log.push(LogEntry {
                step,
                name: "loss".into(),
                value: mean,
            });
            log.push(LogEntry {
                step,
                name: "grad_norm".into(),
                value: norm,
            });
            epoch_total += batch_total;
            step += 1;
        }
        log.push(LogEntry {
            step,
            name: format!("epoch{epoch}"),
            value: epoch_total / order.len() as f64,
        });
    }
    params.set_stage(if cfg.offline_epochs == 0 { Stage::Init } else { Stage::Offline });
    Ok(TrainReport { params, log })
}

/// Mean per-sample loss over a dataset with unshifted ground-truth guidance.
pub fn dataset_loss(
    params: &ParamSet,
    model: &ModelConfig,
    sequences: &[VideoSequence],
    objective: Objective,
) -> Result<f64> {
    let set = TrainSet::new(sequences, &model.scales)?;
    let mut total = 0.0;
    for &s in &set.samples {
        let mut tape = Tape::new();
        let frame = &set.prepared[s.seq][s.t];
        let loss = set.loss(&mut tape, params, model, objective, s, frame, &set.clean_guidance(s))?;
        total += tape.scalar(loss);
    }
    Ok(total / set.samples.len() as f64)
}

fn first_frame_loss(
    tape: &mut Tape,
    params: &ParamSet,
    model: &ModelConfig,
    frame: &PreparedFrame,
    guidance: &[f64],
    target: &[u8],
) -> Result<Var> {
    let pass = forward_pass(tape, params, model, frame, guidance)?;
    let map = losses::seg_loss(tape, pass.fused, target)?;
    Ok(tape.sum(map))
}

/// Summed cross-entropy of the first-frame prediction for one object, guided
/// by its own unshifted mask.
pub fn first_frame_objective(params: &ParamSet, model: &ModelConfig, frame: &Frame, mask: &Mask, label: u8) -> Result<f64> {
    let prepared = PreparedFrame::new(frame, &model.scales);
    let target = resize_labels(&object_labels(mask, label), (frame.height, frame.width), prepared.s2);
    let mut tape = Tape::new();
    let loss = first_frame_loss(&mut tape, params, model, &prepared, &object_map(mask, label), &target)?;
    Ok(tape.scalar(loss))
}

/// Fine-tunes a copy of `params` on the annotated first frame for object
/// `label`. The guidance is the first mask shifted at random each step.
pub fn online_finetune(
    params: &ParamSet,
    model: &ModelConfig,
    frame: &Frame,
    mask: &Mask,
    label: u8,
    cfg: &RunConfig,
) -> Result<ParamSet> {
    let mut tuned = params.snapshot();
    if cfg.finetune_steps == 0 {
        return Ok(tuned);
    }
    let prepared = PreparedFrame::new(frame, &model.scales);
    let target = resize_labels(&object_labels(mask, label), (frame.height, frame.width), prepared.s2);
    let clean = object_map(mask, label);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(3 + label as u64);
    for _ in 0..cfg.finetune_steps {
        let guidance = jitter_map(&clean, frame.height, frame.width, cfg.guidance_jitter, &mut rng);
        let mut tape = Tape::new();
        let loss = first_frame_loss(&mut tape, &tuned, model, &prepared, &guidance, &target)?;
        tape.backward_into(loss, &mut tuned)?;
        sgd_step(&mut tuned, cfg.finetune_lr)?;
    }
    tuned.set_stage(Stage::Sequence);
    Ok(tuned)
}

/// Online loss of frame `t` before and after its adaptation steps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AdaptationRecord {
    pub label: u8,
    pub t: usize,
    pub before: f64,
    pub after: f64,
}

/// Output of [`run_sequence`].
#[derive(Debug, Clone)]
pub struct SequenceRun {
    pub id: String,
    /// Per-object frame results, index `k - 1` for object `k`.
    pub objects: Vec<Vec<FrameResult>>,
    /// Merged label masks on the frame grid; frame 0 is the given mask.
    pub masks: Vec<Mask>,
    pub adaptation: Vec<AdaptationRecord>,
}

/// Fixed targets of one frame's adaptation.
struct AdaptTargets {
    pseudo: Vec<u8>,
    variance: Vec<f64>,
    previous_fg: Vec<f64>,
    weights: Arc<crate::tensor::NeighborWeights>,
}

fn online_objective(
    tape: &mut Tape,
    params: &ParamSet,
    model: &ModelConfig,
    frame: &PreparedFrame,
    guidance: &[f64],
    targets: &AdaptTargets,
) -> Result<(ForwardPass, Var)> {
    let pass = forward_pass(tape, params, model, frame, guidance)?;
    let v = tape.constant_from(vec![1, frame.s2.0, frame.s2.1], targets.variance.clone())?;
    let intra = losses::intra_loss(tape, pass.fused, &targets.pseudo, v)?;
    let inter = losses::inter_loss_with(tape, pass.fused, &targets.previous_fg, targets.weights.clone())?;
    Ok((pass, losses::online_loss(tape, intra, inter)?))
}

fn fg_on_s2(result: &FrameResult) -> Vec<f64> {
    let plane = result.s2.0 * result.s2.1;
    result.fused[FOREGROUND * plane..(FOREGROUND + 1) * plane].to_vec()
}

/// Tracks one object through the sequence, adapting as configured.
fn track_object(
    start: &ParamSet,
    cfg: &RunConfig,
    input: &SequenceInput<'_>,
    prepared: &[PreparedFrame],
    label: u8,
    records: &mut Vec<AdaptationRecord>,
) -> Result<Vec<FrameResult>> {
    let model = &cfg.model;
    let mut params = online_finetune(start, model, &input.frames[0], input.first_mask, label, cfg)?;
    let first = &prepared[0];
    let given = object_map(input.first_mask, label);
    let mut results = Vec::with_capacity(prepared.len());
    let mut head = predict_prepared(&params, model, first, &given, 0)?;
    // The annotated mask, not the prediction, is what frame 1 builds on.
    head.foreground = given.clone();
    let mut previous_fg_s2 = resize_planes(&given, 1, (first.height, first.width), first.s2);
    let mut guidance = given;
    results.push(head);
    for t in 1..prepared.len() {
        let frame = &prepared[t];
        let result = if cfg.adaptation_steps == 0 {
            predict_prepared(&params, model, frame, &guidance, t)?
        } else {
            let initial = predict_prepared(&params, model, frame, &guidance, t)?;
            let weights = losses::bilateral_weights(&frame.view_s2(), &prepared[t - 1].view_s2(), &cfg.bilateral)?;
            let targets = AdaptTargets {
                pseudo: losses::pseudo_labels(&initial.fused, model.backbone.classes),
                variance: initial.variance.clone(),
                previous_fg: previous_fg_s2.clone(),
                weights: Arc::new(weights),
            };
            let mut before = None;
            for _ in 0..cfg.adaptation_steps {
                let mut tape = Tape::new();
                let (_, loss) = online_objective(&mut tape, &params, model, frame, &guidance, &targets)?;
                before.get_or_insert(tape.scalar(loss));
                tape.backward_into(loss, &mut params)?;
                sgd_step(&mut params, cfg.adaptation_lr)?;
            }
            params.set_stage(Stage::Frame);
            let mut tape = Tape::new();
            let (pass, loss) = online_objective(&mut tape, &params, model, frame, &guidance, &targets)?;
            records.push(AdaptationRecord {
                label,
                t,
                before: before.expect("at least one step"),
                after: tape.scalar(loss),
            });
            FrameResult::collect(&tape, &pass, frame, t)
        };
        previous_fg_s2 = fg_on_s2(&result);
        guidance = result.foreground.clone();
        results.push(result);
    }
    Ok(results)
}

/// Per pixel, the object with the highest foreground probability, or
/// background when no object exceeds one half.
pub fn merge_objects(foregrounds: &[&[f64]], width: usize, height: usize) -> Mask {
    let mut labels = vec![0u8; width * height];
    for (p, out) in labels.iter_mut().enumerate() {
        let mut best = 0.5;
        for (k, fg) in foregrounds.iter().enumerate() {
            if fg[p] > best {
                best = fg[p];
                *out = k as u8 + 1;
            }
        }
    }
    Mask {
        width,
        height,
        labels,
    }
}

/// Segments a sequence starting from `params`. The caller's parameters are
/// never modified, so consecutive sequences start from the same state.
pub fn run_sequence(params: &ParamSet, input: SequenceInput<'_>, cfg: &RunConfig) -> Result<SequenceRun> {
    cfg.validate()?;
    cfg.model.check_params(params)?;
    if input.frames.is_empty() {
        return Err(Error::invalid(format!("sequence {} has no frames", input.id)));
    }
    if input.object_count == 0 {
        return Err(Error::invalid(format!("sequence {} has no objects", input.id)));
    }
    let prepared: Vec<PreparedFrame> = input
        .frames
        .iter()
        .map(|f| PreparedFrame::new(f, &cfg.model.scales))
        .collect();
    let mut objects = Vec::with_capacity(input.object_count);
    let mut adaptation = Vec::new();
    for label in 1..=input.object_count as u8 {
        objects.push(track_object(params, cfg, &input, &prepared, label, &mut adaptation)?);
    }
    let (w, h) = (input.frames[0].width, input.frames[0].height);
    let mut masks = vec![input.first_mask.clone()];
    for t in 1..input.frames.len() {
        let fgs: Vec<&[f64]> = objects.iter().map(|o| o[t].foreground.as_slice()).collect();
        masks.push(merge_objects(&fgs, w, h));
    }
    Ok(SequenceRun {
        id: input.id.to_string(),
        objects,
        masks,
        adaptation,
    })
}
