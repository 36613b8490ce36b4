//! Frames, masks and video sequences.

mod io;
mod synthetic;

pub use io::{
    load_dataset, load_masks, load_sequence, read_pgm, read_ppm, save_dataset, save_masks,
    save_sequence, write_gray, write_pgm, write_ppm, SequenceManifest, MANIFEST,
};
pub use synthetic::{generate_dataset, generate_synthetic, ShapeKind, SyntheticConfig};

use crate::error::{Error, Result};
use crate::tensor::ResizePlan;

/// 8-bit RGB image, pixels interleaved row-major as in a binary PPM.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub width: usize,
    pub height: usize,
    pub rgb: Vec<u8>,
}

impl Frame {
    pub fn new(width: usize, height: usize, rgb: Vec<u8>) -> Result<Self> {
        if rgb.len() != 3 * width * height {
            return Err(Error::shape(format!(
                "{} bytes do not form a {width}x{height} RGB frame",
                rgb.len()
            )));
        }
        Ok(Frame { width, height, rgb })
    }

    /// Planar `[3, H, W]` intensities scaled to `[0, 1]`.
    pub fn to_planar(&self) -> Vec<f64> {
        let n = self.width * self.height;
        let mut out = vec![0.0; 3 * n];
        for (p, px) in self.rgb.chunks_exact(3).enumerate() {
            for c in 0..3 {
                out[c * n + p] = px[c] as f64 / 255.0;
            }
        }
        out
    }
}

/// Per-pixel object labels; 0 is background, object `k` is `k`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub width: usize,
    pub height: usize,
    pub labels: Vec<u8>,
}

impl Mask {
    pub fn new(width: usize, height: usize, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != width * height {
            return Err(Error::shape(format!(
                "{} labels do not form a {width}x{height} mask",
                labels.len()
            )));
        }
        Ok(Mask {
            width,
            height,
            labels,
        })
    }

    pub fn empty(width: usize, height: usize) -> Self {
        Mask {
            width,
            height,
            labels: vec![0; width * height],
        }
    }

    /// Binary mask of one object.
    pub fn object(&self, label: u8) -> Vec<bool> {
        self.labels.iter().map(|&l| l == label).collect()
    }

    pub fn max_label(&self) -> u8 {
        self.labels.iter().copied().max().unwrap_or(0)
    }

    pub fn area(&self, label: u8) -> usize {
        self.labels.iter().filter(|&&l| l == label).count()
    }
}

/// An annotated video. `masks[0]` is always present; later masks are used
/// for evaluation only.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoSequence {
    pub id: String,
    pub frames: Vec<Frame>,
    pub masks: Vec<Option<Mask>>,
    pub object_count: usize,
}

impl VideoSequence {
    pub fn new(id: impl Into<String>, frames: Vec<Frame>, masks: Vec<Option<Mask>>, object_count: usize) -> Result<Self> {
        let seq = VideoSequence {
            id: id.into(),
            frames,
            masks,
            object_count,
        };
        seq.validate()?;
        Ok(seq)
    }

    pub fn validate(&self) -> Result<()> {
        let first = self
            .frames
            .first()
            .ok_or_else(|| Error::invalid(format!("sequence {} has no frames", self.id)))?;
        if self.masks.len() != self.frames.len() {
            return Err(Error::invalid(format!(
                "sequence {}: {} mask slots for {} frames",
                self.id,
                self.masks.len(),
                self.frames.len()
            )));
        }
        if self.masks[0].is_none() {
            return Err(Error::invalid(format!(
                "sequence {} is missing its first-frame mask",
                self.id
            )));
        }
        for (t, f) in self.frames.iter().enumerate() {
            if (f.width, f.height) != (first.width, first.height) {
                return Err(Error::shape(format!(
                    "sequence {} frame {t} is {}x{}, expected {}x{}",
                    self.id, f.width, f.height, first.width, first.height
                )));
            }
        }
        for (t, m) in self.masks.iter().enumerate() {
            if let Some(m) = m {
                if (m.width, m.height) != (first.width, first.height) {
                    return Err(Error::shape(format!(
                        "sequence {} mask {t} is {}x{}, expected {}x{}",
                        self.id, m.width, m.height, first.width, first.height
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn width(&self) -> usize {
        self.frames[0].width
    }

    pub fn height(&self) -> usize {
        self.frames[0].height
    }

    /// The part of the sequence a segmenter may see: every frame plus the
    /// first annotation.
    pub fn input(&self) -> SequenceInput<'_> {
        SequenceInput {
            id: &self.id,
            frames: &self.frames,
            first_mask: self.masks[0].as_ref().expect("validated sequence"),
            object_count: self.object_count,
        }
    }
}

/// Test-time view of a sequence. Ground truth beyond the first frame is not
/// reachable from here.
#[derive(Debug, Clone, Copy)]
pub struct SequenceInput<'a> {
    pub id: &'a str,
    pub frames: &'a [Frame],
    pub first_mask: &'a Mask,
    pub object_count: usize,
}

/// Resizes stacked planes without recording a graph.
pub fn resize_planes(planes: &[f64], channels: usize, from: (usize, usize), to: (usize, usize)) -> Vec<f64> {
    if from == to {
        return planes.to_vec();
    }
    ResizePlan::new(from.0, from.1, to.0, to.1).forward(planes, channels)
}
