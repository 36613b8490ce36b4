//! Procedural moving-shape videos with exact masks.
//!
//! Each sequence draws a textured background and `objects` textured shapes
//! that translate with a constant velocity (bouncing off the frame border)
//! and scale by `(1 + scale_rate)` per frame. An optional occluder bar
//! sweeps across the frame and hides whatever it covers. Per-frame sensor
//! noise of amplitude `noise + noise_drift * t` is added before quantizing
//! to 8 bits.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Frame, Mask, VideoSequence};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Disc,
    Rectangle,
    Blob,
}

impl ShapeKind {
    /// Largest distance from the centre relative to the nominal radius.
    fn outer(self) -> f64 {
        match self {
            ShapeKind::Disc => 1.0,
            ShapeKind::Rectangle => 1.0,
            ShapeKind::Blob => 1.0 + BLOB_AMPLITUDE,
        }
    }

    /// Smallest half-extent relative to the nominal radius.
    fn inner(self) -> f64 {
        match self {
            ShapeKind::Disc => 1.0,
            ShapeKind::Rectangle => MIN_ASPECT,
            ShapeKind::Blob => 1.0 - BLOB_AMPLITUDE,
        }
    }
}

const BLOB_AMPLITUDE: f64 = 0.25;
const MIN_ASPECT: f64 = 0.6;
const OCCLUDER_WIDTH: f64 = 6.0;
/// Minimum summed RGB distance between an object colour and the background.
const MIN_CONTRAST: f64 = 0.6;
/// Objects must stay at least this wide.
const MIN_OBJECT_SIZE: f64 = 4.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub width: usize,
    pub height: usize,
    pub frames: usize,
    pub sequences: usize,
    pub objects: usize,
    pub shapes: Vec<ShapeKind>,
    /// Nominal radius range at frame 0, in pixels.
    pub radius_min: f64,
    pub radius_max: f64,
    /// Translation speed in pixels per frame; direction is random.
    pub speed: f64,
    /// Relative size change per frame.
    pub scale_rate: f64,
    pub occluder: bool,
    /// Amplitude of the static background and object textures.
    pub texture: f64,
    /// Per-frame noise amplitude at frame 0.
    pub noise: f64,
    /// Increase of the noise amplitude per frame.
    pub noise_drift: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            width: 64,
            height: 64,
            frames: 20,
            sequences: 8,
            objects: 1,
            shapes: vec![ShapeKind::Disc, ShapeKind::Rectangle, ShapeKind::Blob],
            radius_min: 8.0,
            radius_max: 13.0,
            speed: 1.5,
            scale_rate: 0.0,
            occluder: false,
            texture: 0.08,
            noise: 0.03,
            noise_drift: 0.0,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::config(msg));
        if self.width < 8 || self.height < 8 {
            return bad(format!("frames must be at least 8x8, got {}x{}", self.width, self.height));
        }
        if self.frames < 2 {
            return bad(format!("need at least 2 frames, got {}", self.frames));
        }
        if self.objects == 0 || self.objects > 254 {
            return bad(format!("object count {} outside 1..=254", self.objects));
        }
        if self.shapes.is_empty() {
            return bad("no shape kinds enabled".into());
        }
        if !(self.radius_min > 0.0 && self.radius_min <= self.radius_max) {
            return bad(format!(
                "radius range [{}, {}] is empty",
                self.radius_min, self.radius_max
            ));
        }
        for (name, v) in [
            ("speed", self.speed),
            ("texture", self.texture),
            ("noise", self.noise),
            ("noise_drift", self.noise_drift),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be finite and non-negative, got {v}"));
            }
        }
        if !(self.scale_rate > -1.0 && self.scale_rate.is_finite()) {
            return bad(format!("scale_rate must be greater than -1, got {}", self.scale_rate));
        }
        let last = (self.frames - 1) as f64;
        let growth_hi = (1.0 + self.scale_rate).powf(last).max(1.0);
        let growth_lo = (1.0 + self.scale_rate).powf(last).min(1.0);
        let limit = self.width.min(self.height) as f64;
        for &shape in &self.shapes {
            let widest = 2.0 * self.radius_max * shape.outer() * growth_hi;
            if widest >= limit {
                return bad(format!(
                    "scale_rate {} grows a {shape:?} to {widest:.1} px, which no longer fits a {}x{} frame",
                    self.scale_rate, self.width, self.height
                ));
            }
            let narrowest = 2.0 * self.radius_min * shape.inner() * growth_lo;
            if narrowest < MIN_OBJECT_SIZE {
                return bad(format!(
                    "scale_rate {} shrinks a {shape:?} to {narrowest:.1} px, below the {MIN_OBJECT_SIZE} px minimum",
                    self.scale_rate
                ));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct ObjectTrack {
    shape: ShapeKind,
    radius: f64,
    aspect: f64,
    phase: f64,
    cx: f64,
    cy: f64,
    vx: f64,
    vy: f64,
    color: [f64; 3],
    texture_freq: f64,
}

impl ObjectTrack {
    fn contains(&self, x: f64, y: f64, radius: f64) -> bool {
        let (dx, dy) = (x - self.cx, y - self.cy);
        match self.shape {
            ShapeKind::Disc => dx * dx + dy * dy <= radius * radius,
            ShapeKind::Rectangle => dx.abs() <= radius && dy.abs() <= radius * self.aspect,
            ShapeKind::Blob => {
                let r = radius * (1.0 + BLOB_AMPLITUDE * (3.0 * dy.atan2(dx) + self.phase).sin());
                dx * dx + dy * dy <= r * r
            }
        }
    }

    /// Advances the centre by one frame, reflecting off the borders so the
    /// whole shape stays inside.
    fn step(&mut self, outer_radius: f64, width: f64, height: f64) {
        let reflect = |pos: &mut f64, vel: &mut f64, limit: f64| {
            let (lo, hi) = (outer_radius, limit - outer_radius);
            *pos += *vel;
            if *pos < lo {
                *pos = (2.0 * lo - *pos).min(hi);
                *vel = -*vel;
            } else if *pos > hi {
                *pos = (2.0 * hi - *pos).max(lo);
                *vel = -*vel;
            }
        };
        reflect(&mut self.cx, &mut self.vx, width);
        reflect(&mut self.cy, &mut self.vy, height);
    }
}

fn random_color(rng: &mut ChaCha8Rng) -> [f64; 3] {
    [rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.9)]
}

fn color_distance(a: [f64; 3], b: [f64; 3]) -> f64 {
    a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum()
}

/// Generates sequence number `index` of the configured dataset.
pub fn generate_synthetic(cfg: &SyntheticConfig, index: usize) -> Result<VideoSequence> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index as u64);
    let (w, h) = (cfg.width as f64, cfg.height as f64);

    let background = random_color(&mut rng);
    let bg_tilt = [rng.gen_range(-0.15..0.15), rng.gen_range(-0.15..0.15)];
    let bg_freq = rng.gen_range(0.15..0.5);
    let bg_phase = rng.gen_range(0.0..std::f64::consts::TAU);

    let growth_hi = (1.0 + cfg.scale_rate).powf((cfg.frames - 1) as f64).max(1.0);
    let mut objects = Vec::with_capacity(cfg.objects);
    for _ in 0..cfg.objects {
        let shape = cfg.shapes[rng.gen_range(0..cfg.shapes.len())];
        let radius = if cfg.radius_max > cfg.radius_min {
            rng.gen_range(cfg.radius_min..cfg.radius_max)
        } else {
            cfg.radius_min
        };
        let outer = radius * shape.outer() * growth_hi;
        let angle = rng.gen_range(0.0..std::f64::consts::TAU);
        // Object colours keep a minimum contrast with the background.
        let mut color = random_color(&mut rng);
        for _ in 0..32 {
            if color_distance(color, background) > MIN_CONTRAST {
                break;
            }
            color = random_color(&mut rng);
        }
        objects.push(ObjectTrack {
            shape,
            radius,
            aspect: rng.gen_range(MIN_ASPECT..1.0),
            phase: rng.gen_range(0.0..std::f64::consts::TAU),
            cx: rng.gen_range(outer..=(w - outer)),
            cy: rng.gen_range(outer..=(h - outer)),
            vx: cfg.speed * angle.cos(),
            vy: cfg.speed * angle.sin(),
            color,
            texture_freq: rng.gen_range(0.3..0.9),
        });
    }
    let occluder_color = random_color(&mut rng);
    let occluder_start = rng.gen_range(-OCCLUDER_WIDTH..w * 0.3);
    let occluder_speed = (w + OCCLUDER_WIDTH) / cfg.frames as f64;

    let mut frames = Vec::with_capacity(cfg.frames);
    let mut masks = Vec::with_capacity(cfg.frames);
    let n = cfg.width * cfg.height;
    for t in 0..cfg.frames {
        let growth = (1.0 + cfg.scale_rate).powi(t as i32);
        let amplitude = cfg.noise + cfg.noise_drift * t as f64;
        let occluder_x = occluder_start + occluder_speed * t as f64;
        let mut rgb = Vec::with_capacity(3 * n);
        let mut labels = vec![0u8; n];
        for py in 0..cfg.height {
            for px in 0..cfg.width {
                let (x, y) = (px as f64 + 0.5, py as f64 + 0.5);
                let wave = (bg_freq * x + bg_phase).sin() * (bg_freq * 0.7 * y).cos();
                let mut color = [0.0; 3];
                for c in 0..3 {
                    color[c] = background[c]
                        + bg_tilt[0] * (x / w - 0.5)
                        + bg_tilt[1] * (y / h - 0.5)
                        + cfg.texture * wave;
                }
                let mut label = 0u8;
                for (k, obj) in objects.iter().enumerate() {
                    if obj.contains(x, y, obj.radius * growth) {
                        label = k as u8 + 1;
                        let (u, v) = (x - obj.cx, y - obj.cy);
                        let pattern = (obj.texture_freq * (u + v)).sin();
                        for c in 0..3 {
                            color[c] = obj.color[c] + cfg.texture * pattern;
                        }
                    }
                }
                if cfg.occluder && x >= occluder_x && x < occluder_x + OCCLUDER_WIDTH {
                    label = 0;
                    color = occluder_color;
                }
                labels[py * cfg.width + px] = label;
                for c in color {
                    let noisy = if amplitude > 0.0 {
                        c + rng.gen_range(-amplitude..amplitude)
                    } else {
                        c
                    };
                    rgb.push((noisy.clamp(0.0, 1.0) * 255.0).round() as u8);
                }
            }
        }
        frames.push(Frame::new(cfg.width, cfg.height, rgb)?);
        masks.push(Some(Mask::new(cfg.width, cfg.height, labels)?));
        for obj in &mut objects {
            let next = (1.0 + cfg.scale_rate).powi(t as i32 + 1);
            obj.step(obj.radius * obj.shape.outer() * next.max(growth), w, h);
        }
    }
    VideoSequence::new(format!("seq{index:03}"), frames, masks, cfg.objects)
}

/// All `cfg.sequences` sequences.
pub fn generate_dataset(cfg: &SyntheticConfig) -> Result<Vec<VideoSequence>> {
    cfg.validate()?;
    (0..cfg.sequences).map(|i| generate_synthetic(cfg, i)).collect()
}
