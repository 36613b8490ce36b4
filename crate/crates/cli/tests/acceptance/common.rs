use msvos_core::losses::BilateralConfig;
use msvos_core::tensor::{DiffTensor, PROB_EPS};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Result of one criterion.
pub struct Outcome {
    pub pass: bool,
    pub detail: String,
}

impl Outcome {
    pub fn new(pass: bool, detail: impl Into<String>) -> Self {
        Outcome {
            pass,
            detail: detail.into(),
        }
    }
}

pub fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> DiffTensor {
    let n = shape.iter().product();
    DiffTensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// Planar class distributions `[c, h, w]` with every entry at least 0.05 / c.
pub fn random_probs(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> Vec<f64> {
    let plane = h * w;
    let mut out = vec![0.0; c * plane];
    for p in 0..plane {
        let raw: Vec<f64> = (0..c).map(|_| rng.gen_range(0.05..1.0)).collect();
        let total: f64 = raw.iter().sum();
        for k in 0..c {
            out[k * plane + p] = raw[k] / total;
        }
    }
    out
}

pub fn random_labels(rng: &mut ChaCha8Rng, c: usize, n: usize) -> Vec<u8> {
    (0..n).map(|_| rng.gen_range(0..c) as u8).collect()
}

pub fn random_rgb(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Vec<f64> {
    (0..3 * h * w).map(|_| rng.gen_range(0.0..1.0)).collect()
}

pub fn random_bilateral(rng: &mut ChaCha8Rng) -> BilateralConfig {
    BilateralConfig {
        kernel: [1, 3, 5][rng.gen_range(0..3)],
        sigma_spatial: rng.gen_range(0.5..3.0),
        sigma_intensity: rng.gen_range(0.2..1.0),
    }
}

/// Half-pixel-centre bilinear resize of one plane, one output pixel at a
/// time, blending along x then y as `a + t * (b - a)`.
pub fn resize_oracle(src: &[f64], h: usize, w: usize, th: usize, tw: usize) -> Vec<f64> {
    let coord = |i: usize, n_in: usize, n_out: usize| {
        let x = ((i as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
        let i0 = x.floor() as usize;
        let i1 = (i0 + 1).min(n_in - 1);
        (i0, i1, x - i0 as f64)
    };
    let mut out = vec![0.0; th * tw];
    for y in 0..th {
        let (y0, y1, fy) = coord(y, h, th);
        for x in 0..tw {
            let (x0, x1, fx) = coord(x, w, tw);
            let lerp = |a: f64, b: f64, t: f64| a + t * (b - a);
            let top = lerp(src[y0 * w + x0], src[y0 * w + x1], fx);
            let bottom = lerp(src[y1 * w + x0], src[y1 * w + x1], fx);
            out[y * tw + x] = lerp(top, bottom, fy);
        }
    }
    out
}

/// Per-pixel KL(up(m1) || m2).
pub fn kl_oracle(m1: &[f64], m2: &[f64], c: usize, (h1, w1): (usize, usize), (h2, w2): (usize, usize)) -> Vec<f64> {
    let ups: Vec<Vec<f64>> = (0..c)
        .map(|k| resize_oracle(&m1[k * h1 * w1..(k + 1) * h1 * w1], h1, w1, h2, w2))
        .collect();
    (0..h2 * w2)
        .map(|p| {
            let mut kl = 0.0;
            for k in 0..c {
                let u = ups[k][p].max(PROB_EPS);
                let m = m2[k * h2 * w2 + p].max(PROB_EPS);
                kl += ups[k][p] * (u.ln() - m.ln());
            }
            kl.max(0.0)
        })
        .collect()
}

/// Per-pixel cross-entropy of a planar distribution against labels.
pub fn seg_oracle(p: &[f64], target: &[u8], plane: usize) -> Vec<f64> {
    (0..plane)
        .map(|i| -(p[target[i] as usize * plane + i].max(PROB_EPS)).ln())
        .collect()
}

/// Normalized bilateral weight of pixel `q` in the previous frame for pixel
/// `p` in the current one.
pub fn weight_oracle(
    p: (usize, usize),
    q: (usize, usize),
    cur: &[f64],
    prev: &[f64],
    (h, w): (usize, usize),
    cfg: &BilateralConfig,
) -> f64 {
    let r = (cfg.kernel / 2) as isize;
    let raw = |qy: usize, qx: usize| {
        let dy = p.0 as f64 - qy as f64;
        let dx = p.1 as f64 - qx as f64;
        let mut d2 = 0.0;
        for c in 0..3 {
            let diff = cur[c * h * w + p.0 * w + p.1] - prev[c * h * w + qy * w + qx];
            d2 += diff * diff;
        }
        (-(dy * dy + dx * dx) / (2.0 * cfg.sigma_spatial.powi(2)) - d2 / (2.0 * cfg.sigma_intensity.powi(2))).exp()
    };
    let mut total = 0.0;
    let mut hit = 0.0;
    for dy in -r..=r {
        for dx in -r..=r {
            let (y, x) = (p.0 as isize + dy, p.1 as isize + dx);
            if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
                continue;
            }
            let v = raw(y as usize, x as usize);
            total += v;
            if (y as usize, x as usize) == q {
                hit = v;
            }
        }
    }
    hit / total
}

/// Sum over all pixel pairs of weight times absolute foreground difference.
pub fn inter_oracle(
    fg: &[f64],
    prev_fg: &[f64],
    cur: &[f64],
    prev: &[f64],
    (h, w): (usize, usize),
    cfg: &BilateralConfig,
) -> f64 {
    let mut total = 0.0;
    for py in 0..h {
        for px in 0..w {
            for qy in 0..h {
                for qx in 0..w {
                    let f = weight_oracle((py, px), (qy, qx), cur, prev, (h, w), cfg);
                    total += f * (fg[py * w + px] - prev_fg[qy * w + qx]).abs();
                }
            }
        }
    }
    total
}
