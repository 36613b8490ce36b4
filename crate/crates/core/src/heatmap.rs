//! Grayscale renderings of attention and variance maps.

use std::fs;
use std::path::Path;

use crate::data::write_gray;
use crate::error::{Error, Result};

/// An 8-bit heatmap and the value range mapped onto `0..=255`.
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
    pub min: f64,
    pub max: f64,
}

/// Ranges at or below this are treated as a constant map.
pub const FLAT_SPAN: f64 = 1e-12;

/// Min-max normalizes `values`. A constant map renders all black.
pub fn render(values: &[f64], width: usize, height: usize) -> Result<Heatmap> {
    if values.len() != width * height || values.is_empty() {
        return Err(Error::shape(format!(
            "{} values do not form a {width}x{height} map",
            values.len()
        )));
    }
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = max - min;
    let pixels = values
        .iter()
        .map(|&v| {
            if span > FLAT_SPAN {
                ((v - min) / span * 255.0).round() as u8
            } else {
                0
            }
        })
        .collect();
    Ok(Heatmap {
        width,
        height,
        pixels,
        min,
        max,
    })
}

impl Heatmap {
    /// Writes `<stem>.pgm` and `<stem>.txt` holding the value range.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_gray(&dir.join(format!("{stem}.pgm")), &self.pixels, self.width, self.height)?;
        let side = dir.join(format!("{stem}.txt"));
        let text = format!("min {:.17e}\nmax {:.17e}\n", self.min, self.max);
        fs::write(&side, text).map_err(|e| Error::io(&side, e))
    }
}
