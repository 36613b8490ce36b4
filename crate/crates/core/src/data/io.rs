//! On-disk sequence layout.
//!
//! ```text
//! <sequence>/manifest.json
//! <sequence>/frames/00000.ppm   binary RGB (P6)
//! <sequence>/masks/00000.pgm    binary gray (P5), object k stored as value k
//! ```
//!
//! Mask files after the first are optional. A stored value of 255 is read as
//! label 1 so plain black/white exports load as single-object masks.

use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use image::codecs::pnm::{PnmDecoder, PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ColorType, DynamicImage, ExtendedColorType, ImageDecoder, ImageEncoder};
use serde::{Deserialize, Serialize};

use super::{Frame, Mask, VideoSequence};
use crate::error::{Error, Result};

pub const MANIFEST: &str = "manifest.json";
const BINARY_FOREGROUND: u8 = 255;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SequenceManifest {
    pub id: String,
    pub frame_count: usize,
    pub object_count: usize,
    pub width: usize,
    pub height: usize,
}

fn frame_path(dir: &Path, t: usize) -> PathBuf {
    dir.join("frames").join(format!("{t:05}.ppm"))
}

fn mask_path(dir: &Path, t: usize) -> PathBuf {
    dir.join("masks").join(format!("{t:05}.pgm"))
}

fn decode(path: &Path) -> Result<(u32, u32, ColorType, Vec<u8>)> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let decoder = PnmDecoder::new(BufReader::new(file)).map_err(|e| Error::format(path, e.to_string()))?;
    let (w, h) = decoder.dimensions();
    let color = decoder.color_type();
    let image = DynamicImage::from_decoder(decoder).map_err(|e| Error::format(path, e.to_string()))?;
    Ok((w, h, color, image.into_bytes()))
}

fn encode(path: &Path, bytes: &[u8], width: usize, height: usize, color: ExtendedColorType) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let subtype = match color {
        ExtendedColorType::L8 => PnmSubtype::Graymap(SampleEncoding::Binary),
        _ => PnmSubtype::Pixmap(SampleEncoding::Binary),
    };
    PnmEncoder::new(&mut out)
        .with_subtype(subtype)
        .write_image(bytes, width as u32, height as u32, color)
        .map_err(|e| match e {
            image::ImageError::IoError(io) => Error::io(path, io),
            other => Error::format(path, other.to_string()),
        })?;
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn read_ppm(path: &Path) -> Result<Frame> {
    let (w, h, color, bytes) = decode(path)?;
    if color != ColorType::Rgb8 {
        return Err(Error::format(path, format!("expected an 8-bit RGB image, found {color:?}")));
    }
    Frame::new(w as usize, h as usize, bytes)
}

pub fn write_ppm(path: &Path, frame: &Frame) -> Result<()> {
    encode(path, &frame.rgb, frame.width, frame.height, ExtendedColorType::Rgb8)
}

pub fn read_pgm(path: &Path) -> Result<Mask> {
    let (w, h, color, mut bytes) = decode(path)?;
    if color != ColorType::L8 {
        return Err(Error::format(path, format!("expected an 8-bit grayscale mask, found {color:?}")));
    }
    for v in &mut bytes {
        if *v == BINARY_FOREGROUND {
            *v = 1;
        }
    }
    Mask::new(w as usize, h as usize, bytes)
}

/// Writes arbitrary 8-bit gray values as a binary PGM.
pub fn write_gray(path: &Path, pixels: &[u8], width: usize, height: usize) -> Result<()> {
    encode(path, pixels, width, height, ExtendedColorType::L8)
}

pub fn write_pgm(path: &Path, mask: &Mask) -> Result<()> {
    if mask.labels.contains(&BINARY_FOREGROUND) {
        return Err(Error::invalid(format!(
            "label {BINARY_FOREGROUND} is reserved for binary exports"
        )));
    }
    encode(path, &mask.labels, mask.width, mask.height, ExtendedColorType::L8)
}

fn read_manifest(dir: &Path) -> Result<SequenceManifest> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))
}

pub fn load_sequence(dir: &Path) -> Result<VideoSequence> {
    let manifest = read_manifest(dir)?;
    let mut frames = Vec::with_capacity(manifest.frame_count);
    let mut masks = Vec::with_capacity(manifest.frame_count);
    for t in 0..manifest.frame_count {
        let frame = read_ppm(&frame_path(dir, t))?;
        if (frame.width, frame.height) != (manifest.width, manifest.height) {
            return Err(Error::format(
                frame_path(dir, t),
                format!(
                    "frame is {}x{}, manifest says {}x{}",
                    frame.width, frame.height, manifest.width, manifest.height
                ),
            ));
        }
        frames.push(frame);
        let mp = mask_path(dir, t);
        if mp.exists() {
            let mask = read_pgm(&mp)?;
            if (mask.width, mask.height) != (manifest.width, manifest.height) {
                return Err(Error::format(
                    &mp,
                    format!("mask is {}x{}, frames are {}x{}", mask.width, mask.height, manifest.width, manifest.height),
                ));
            }
            masks.push(Some(mask));
        } else if t == 0 {
            return Err(Error::invalid(format!(
                "sequence {} is missing its first-frame mask {}",
                manifest.id,
                mp.display()
            )));
        } else {
            masks.push(None);
        }
    }
    VideoSequence::new(manifest.id, frames, masks, manifest.object_count)
}

pub fn save_sequence(dir: &Path, seq: &VideoSequence) -> Result<()> {
    seq.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest = SequenceManifest {
        id: seq.id.clone(),
        frame_count: seq.len(),
        object_count: seq.object_count,
        width: seq.width(),
        height: seq.height(),
    };
    let path = dir.join(MANIFEST);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    for (t, frame) in seq.frames.iter().enumerate() {
        write_ppm(&frame_path(dir, t), frame)?;
    }
    for (t, mask) in seq.masks.iter().enumerate() {
        if let Some(mask) = mask {
            write_pgm(&mask_path(dir, t), mask)?;
        }
    }
    Ok(())
}

/// Every sequence directory directly under `root`, in name order.
pub fn load_dataset(root: &Path) -> Result<Vec<VideoSequence>> {
    let entries = fs::read_dir(root).map_err(|e| Error::io(root, e))?;
    let mut dirs = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(root, e))?;
        let path = entry.path();
        if path.join(MANIFEST).is_file() {
            dirs.push(path);
        }
    }
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::invalid(format!("no sequences found under {}", root.display())));
    }
    dirs.iter().map(|d| load_sequence(d)).collect()
}

/// Writes each sequence to `root/<id>`.
pub fn save_dataset(root: &Path, sequences: &[VideoSequence]) -> Result<()> {
    for seq in sequences {
        save_sequence(&root.join(&seq.id), seq)?;
    }
    Ok(())
}

/// Writes predicted masks as `dir/masks/%05d.pgm`.
pub fn save_masks(dir: &Path, masks: &[Mask]) -> Result<()> {
    for (t, m) in masks.iter().enumerate() {
        write_pgm(&mask_path(dir, t), m)?;
    }
    Ok(())
}

/// Reads consecutive `dir/masks/%05d.pgm` files starting at zero.
pub fn load_masks(dir: &Path) -> Result<Vec<Mask>> {
    let mut out = Vec::new();
    loop {
        let path = mask_path(dir, out.len());
        if !path.exists() {
            break;
        }
        out.push(read_pgm(&path)?);
    }
    if out.is_empty() {
        return Err(Error::invalid(format!("no masks found in {}", dir.join("masks").display())));
    }
    Ok(out)
}
