//! Region similarity J, boundary accuracy F and their decay over time.

use serde::Serialize;

use crate::data::Mask;
use crate::error::{Error, Result};

/// Default boundary matching tolerance in pixels.
pub const DEFAULT_TOLERANCE: usize = 1;

fn check_len(a: &[bool], b: &[bool]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::shape(format!(
            "masks have {} and {} pixels",
            a.len(),
            b.len()
        )));
    }
    Ok(())
}

/// Intersection over union; 1 when both masks are empty.
pub fn jaccard(pred: &[bool], gt: &[bool]) -> Result<f64> {
    check_len(pred, gt)?;
    let (mut inter, mut union) = (0usize, 0usize);
    for (&p, &g) in pred.iter().zip(gt) {
        inter += (p && g) as usize;
        union += (p || g) as usize;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// Foreground pixels with at least one in-bounds 4-neighbour in the
/// background.
pub fn boundary(mask: &[bool], width: usize) -> Vec<bool> {
    let height = if width == 0 { 0 } else { mask.len() / width };
    let mut out = vec![false; mask.len()];
    for y in 0..height {
        for x in 0..width {
            let i = y * width + x;
            if !mask[i] {
                continue;
            }
            out[i] = (x > 0 && !mask[i - 1])
                || (x + 1 < width && !mask[i + 1])
                || (y > 0 && !mask[i - width])
                || (y + 1 < height && !mask[i + width]);
        }
    }
    out
}

/// Marks every pixel within Chebyshev distance `tol` of a set pixel.
fn dilate(mask: &[bool], width: usize, tol: usize) -> Vec<bool> {
    let height = mask.len() / width;
    // Separable: rows, then columns.
    let mut rows = vec![false; mask.len()];
    for y in 0..height {
        for x in 0..width {
            if mask[y * width + x] {
                let (lo, hi) = (x.saturating_sub(tol), (x + tol).min(width - 1));
                rows[y * width + lo..=y * width + hi].fill(true);
            }
        }
    }
    let mut out = vec![false; mask.len()];
    for y in 0..height {
        for x in 0..width {
            if rows[y * width + x] {
                let (lo, hi) = (y.saturating_sub(tol), (y + tol).min(height - 1));
                for yy in lo..=hi {
                    out[yy * width + x] = true;
                }
            }
        }
    }
    out
}

fn matched_fraction(source: &[bool], reach: &[bool]) -> Option<f64> {
    let total = source.iter().filter(|&&b| b).count();
    if total == 0 {
        return None;
    }
    let hit = source.iter().zip(reach).filter(|(&s, &r)| s && r).count();
    Some(hit as f64 / total as f64)
}

/// Boundary F-measure with Chebyshev matching tolerance `tol`.
pub fn boundary_f(pred: &[bool], gt: &[bool], width: usize, tol: usize) -> Result<f64> {
    check_len(pred, gt)?;
    if width == 0 || pred.len() % width != 0 {
        return Err(Error::shape(format!(
            "{} pixels do not form rows of width {width}",
            pred.len()
        )));
    }
    let bp = boundary(pred, width);
    let bg = boundary(gt, width);
    let precision = matched_fraction(&bp, &dilate(&bg, width, tol));
    let recall = matched_fraction(&bg, &dilate(&bp, width, tol));
    let (p, r) = match (precision, recall) {
        (None, None) => return Ok(1.0),
        (None, Some(_)) => (1.0, 0.0),
        (Some(_), None) => (0.0, 1.0),
        (Some(p), Some(r)) => (p, r),
    };
    Ok(if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) })
}

/// Mean of the first quarter of `scores` minus the mean of the last quarter.
/// Quarters follow an even split with earlier parts taking the remainder.
/// `None` for fewer than four frames.
pub fn decay(scores: &[f64]) -> Option<f64> {
    let n = scores.len();
    if n < 4 {
        return None;
    }
    let size = |i: usize| n / 4 + usize::from(i < n % 4);
    let first = &scores[..size(0)];
    let last = &scores[n - size(3)..];
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    Some(mean(first) - mean(last))
}

pub fn jf_mean(j_mean: f64, f_mean: f64) -> f64 {
    (j_mean + f_mean) / 2.0
}

/// Scores of one sequence. Per-frame values are averaged over objects.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SequenceScore {
    pub id: String,
    /// Frame indices the per-frame lists refer to.
    pub frames: Vec<usize>,
    pub j: Vec<f64>,
    pub f: Vec<f64>,
    pub j_mean: f64,
    pub f_mean: f64,
    pub jf: f64,
    pub j_decay: Option<f64>,
    pub f_decay: Option<f64>,
}

fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        0.0
    } else {
        values.iter().sum::<f64>() / values.len() as f64
    }
}

/// Scores every annotated frame after the first.
pub fn score_sequence(
    id: &str,
    predictions: &[Mask],
    ground_truth: &[Option<Mask>],
    object_count: usize,
    tol: usize,
) -> Result<SequenceScore> {
    if predictions.len() != ground_truth.len() {
        return Err(Error::invalid(format!(
            "sequence {id}: {} predicted frames for {} annotated slots",
            predictions.len(),
            ground_truth.len()
        )));
    }
    if object_count == 0 {
        return Err(Error::invalid(format!("sequence {id} has no objects")));
    }
    let mut frames = Vec::new();
    let (mut js, mut fs) = (Vec::new(), Vec::new());
    for (t, (pred, gt)) in predictions.iter().zip(ground_truth).enumerate().skip(1) {
        let Some(gt) = gt else { continue };
        if (pred.width, pred.height) != (gt.width, gt.height) {
            return Err(Error::shape(format!(
                "sequence {id} frame {t}: prediction {}x{} vs ground truth {}x{}",
                pred.width, pred.height, gt.width, gt.height
            )));
        }
        let (mut j, mut f) = (0.0, 0.0);
        for k in 1..=object_count as u8 {
            let (p, g) = (pred.object(k), gt.object(k));
            j += jaccard(&p, &g)?;
            f += boundary_f(&p, &g, gt.width, tol)?;
        }
        frames.push(t);
        js.push(j / object_count as f64);
        fs.push(f / object_count as f64);
    }
    let (j_mean, f_mean) = (mean(&js), mean(&fs));
    Ok(SequenceScore {
        id: id.to_string(),
        j_decay: decay(&js),
        f_decay: decay(&fs),
        frames,
        j: js,
        f: fs,
        j_mean,
        f_mean,
        jf: jf_mean(j_mean, f_mean),
    })
}

/// Benchmark-level means over sequences.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Summary {
    pub sequences: usize,
    pub j_mean: f64,
    pub f_mean: f64,
    pub jf: f64,
    pub j_decay: f64,
    pub f_decay: f64,
}

pub fn summarize(scores: &[SequenceScore]) -> Summary {
    let pick = |f: fn(&SequenceScore) -> f64| mean(&scores.iter().map(f).collect::<Vec<_>>());
    let decays = |f: fn(&SequenceScore) -> Option<f64>| mean(&scores.iter().filter_map(f).collect::<Vec<_>>());
    let j_mean = pick(|s| s.j_mean);
    let f_mean = pick(|s| s.f_mean);
    Summary {
        sequences: scores.len(),
        j_mean,
        f_mean,
        jf: jf_mean(j_mean, f_mean),
        j_decay: decays(|s| s.j_decay),
        f_decay: decays(|s| s.f_decay),
    }
}
