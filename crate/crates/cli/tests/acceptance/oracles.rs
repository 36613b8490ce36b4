use msvos_core::fusion::{fuse_unnormalized, variance_map, ProbMap, ScaleTag};
use msvos_core::losses::{
    bilateral_weight, bilateral_weights, inter_loss, seg_loss, variance_weighted_loss, BilateralConfig, FrameView,
};
use msvos_core::metrics::{boundary_f, decay, jaccard, jf_mean};
use msvos_core::tensor::{Tape, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::common::{
    inter_oracle, kl_oracle, random_bilateral, random_labels, random_probs, random_rgb, resize_oracle, seg_oracle,
    weight_oracle, Outcome,
};

const CASES: usize = 100;
const ORACLE_TOL: f64 = 1e-10;

struct Worst {
    cases: usize,
    err: f64,
}

impl Worst {
    fn new() -> Self {
        Worst { cases: 0, err: 0.0 }
    }

    fn see(&mut self, got: f64, expected: f64) {
        let e = (got - expected).abs();
        self.err = if e.is_nan() { f64::INFINITY } else { self.err.max(e) };
    }
}

fn constant(tape: &mut Tape, shape: Vec<usize>, values: &[f64]) -> Var {
    tape.constant_from(shape, values.to_vec()).unwrap()
}

fn variance_cases(rng: &mut ChaCha8Rng) -> Worst {
    let mut w = Worst::new();
    for _ in 0..CASES {
        let c = rng.gen_range(2..4);
        let (h1, w1) = (rng.gen_range(1..5), rng.gen_range(1..5));
        let (h2, w2) = (rng.gen_range(h1..9), rng.gen_range(w1..9));
        let m1 = random_probs(rng, c, h1, w1);
        let m2 = random_probs(rng, c, h2, w2);
        let mut tape = Tape::new();
        let v1 = constant(&mut tape, vec![c, h1, w1], &m1);
        let v2 = constant(&mut tape, vec![c, h2, w2], &m2);
        let v = variance_map(&mut tape, ProbMap::new(v1, ScaleTag::S1), ProbMap::new(v2, ScaleTag::S2)).unwrap();
        for (g, e) in tape.value(v).iter().zip(kl_oracle(&m1, &m2, c, (h1, w1), (h2, w2))) {
            w.see(*g, e);
        }
        w.cases += 1;
    }
    w
}

fn seg_cases(rng: &mut ChaCha8Rng) -> Worst {
    let mut w = Worst::new();
    for _ in 0..CASES {
        let c = rng.gen_range(2..5);
        let (h, wd) = (rng.gen_range(1..9), rng.gen_range(1..9));
        let p = random_probs(rng, c, h, wd);
        let t = random_labels(rng, c, h * wd);
        let mut tape = Tape::new();
        let v = constant(&mut tape, vec![c, h, wd], &p);
        let l = seg_loss(&mut tape, ProbMap::new(v, ScaleTag::S2), &t).unwrap();
        for (g, e) in tape.value(l).iter().zip(seg_oracle(&p, &t, h * wd)) {
            w.see(*g, e);
        }
        w.cases += 1;
    }
    w
}

fn bilateral_cases(rng: &mut ChaCha8Rng) -> Worst {
    let mut w = Worst::new();
    for _ in 0..CASES {
        let (h, wd) = (rng.gen_range(1..7), rng.gen_range(1..7));
        let cfg = random_bilateral(rng);
        let cur = random_rgb(rng, h, wd);
        let prev = random_rgb(rng, h, wd);
        let fc = FrameView::new(h, wd, &cur).unwrap();
        let fp = FrameView::new(h, wd, &prev).unwrap();
        let table = bilateral_weights(&fc, &fp, &cfg).unwrap();
        for y in 0..h {
            for x in 0..wd {
                let p = y * wd + x;
                let mut row = 0.0;
                for qy in 0..h {
                    for qx in 0..wd {
                        let e = weight_oracle((y, x), (qy, qx), &cur, &prev, (h, wd), &cfg);
                        w.see(bilateral_weight((y, x), (qy, qx), &fc, &fp, &cfg).unwrap(), e);
                        row += e;
                    }
                }
                for (q, v) in table.pixel(p) {
                    w.see(v, weight_oracle((y, x), (q / wd, q % wd), &cur, &prev, (h, wd), &cfg));
                }
                w.see(row, 1.0);
            }
        }
        w.cases += 1;
    }
    w
}

fn inter_cases(rng: &mut ChaCha8Rng) -> Worst {
    let mut w = Worst::new();
    for i in 0..CASES {
        let (h, wd) = if i == 0 { (6, 6) } else { (rng.gen_range(1..7), rng.gen_range(1..7)) };
        let cfg = random_bilateral(rng);
        let p = random_probs(rng, 2, h, wd);
        let prev_fg: Vec<f64> = (0..h * wd).map(|_| rng.gen_range(0.0..1.0)).collect();
        let cur = random_rgb(rng, h, wd);
        let prev = random_rgb(rng, h, wd);
        let mut tape = Tape::new();
        let v = constant(&mut tape, vec![2, h, wd], &p);
        let fc = FrameView::new(h, wd, &cur).unwrap();
        let fp = FrameView::new(h, wd, &prev).unwrap();
        let l = inter_loss(&mut tape, ProbMap::new(v, ScaleTag::S2), &prev_fg, &fc, &fp, &cfg).unwrap();
        w.see(tape.scalar(l), inter_oracle(&p[h * wd..], &prev_fg, &cur, &prev, (h, wd), &cfg));
        w.cases += 1;
    }
    w
}

pub fn oracle_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3000);
    let parts = [
        ("variance_map", variance_cases(&mut rng)),
        ("seg_loss", seg_cases(&mut rng)),
        ("bilateral_weight", bilateral_cases(&mut rng)),
        ("inter_loss", inter_cases(&mut rng)),
    ];
    let pass = parts.iter().all(|(_, w)| w.cases >= CASES && w.err <= ORACLE_TOL);
    let detail = parts
        .iter()
        .map(|(n, w)| format!("{n} {} cases max |diff| {:.1e}", w.cases, w.err))
        .collect::<Vec<_>>()
        .join("; ");
    Outcome::new(pass, detail)
}

pub fn fuse_endpoints() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3100);
    let mut mismatches = 0;
    let mut cases = 0;
    for _ in 0..CASES {
        let c = rng.gen_range(2..4);
        let (h1, w1) = (rng.gen_range(1..5), rng.gen_range(1..5));
        let (h2, w2) = (h1 * 2, w1 * 2);
        let m1 = random_probs(&mut rng, c, h1, w1);
        let m2 = random_probs(&mut rng, c, h2, w2);
        let up: Vec<f64> = (0..c)
            .flat_map(|k| resize_oracle(&m1[k * h1 * w1..(k + 1) * h1 * w1], h1, w1, h2, w2))
            .collect();
        for (a, expected) in [(1.0, &up), (0.0, &m2)] {
            let mut tape = Tape::new();
            let att = constant(&mut tape, vec![1, h1, w1], &vec![a; h1 * w1]);
            let v1 = constant(&mut tape, vec![c, h1, w1], &m1);
            let v2 = constant(&mut tape, vec![c, h2, w2], &m2);
            let raw =
                fuse_unnormalized(&mut tape, att, ProbMap::new(v1, ScaleTag::S1), ProbMap::new(v2, ScaleTag::S2))
                    .unwrap();
            if tape.value(raw) != expected.as_slice() {
                mismatches += 1;
            }
            cases += 1;
        }
    }
    Outcome::new(
        mismatches == 0,
        format!("{cases} endpoint cases, {mismatches} not bit-identical to the reference"),
    )
}

/// The library-level reductions; the adapt/infer identity is checked on the
/// command line in the determinism module.
pub fn loss_reductions() -> (Outcome, Outcome) {
    let mut rng = ChaCha8Rng::seed_from_u64(3200);
    let mut beta_bad = 0;
    for _ in 0..CASES {
        let (h, w) = (rng.gen_range(1..9), rng.gen_range(1..9));
        let p = random_probs(&mut rng, 2, h, w);
        let t = random_labels(&mut rng, 2, h * w);
        let var: Vec<f64> = (0..h * w).map(|_| rng.gen_range(0.0..3.0)).collect();
        let mut tape = Tape::new();
        let pv = constant(&mut tape, vec![2, h, w], &p);
        let l = seg_loss(&mut tape, ProbMap::new(pv, ScaleTag::S2), &t).unwrap();
        let plain: f64 = tape.value(l).iter().sum();
        let vv = constant(&mut tape, vec![1, h, w], &var);
        let weighted = variance_weighted_loss(&mut tape, l, vv, 0.0).unwrap();
        if tape.scalar(weighted) != plain {
            beta_bad += 1;
        }
    }
    let mut k1_bad = 0;
    for _ in 0..CASES {
        let (h, w) = (rng.gen_range(1..9), rng.gen_range(1..9));
        let cfg = BilateralConfig {
            kernel: 1,
            ..random_bilateral(&mut rng)
        };
        let p = random_probs(&mut rng, 2, h, w);
        let prev_fg: Vec<f64> = (0..h * w).map(|_| rng.gen_range(0.0..1.0)).collect();
        let img = random_rgb(&mut rng, h, w);
        let frame = FrameView::new(h, w, &img).unwrap();
        let mut tape = Tape::new();
        let pv = constant(&mut tape, vec![2, h, w], &p);
        let l = inter_loss(&mut tape, ProbMap::new(pv, ScaleTag::S2), &prev_fg, &frame, &frame, &cfg).unwrap();
        let l1: f64 = (0..h * w).map(|i| (p[h * w + i] - prev_fg[i]).abs()).sum();
        if tape.scalar(l) != l1 {
            k1_bad += 1;
        }
    }
    (
        Outcome::new(beta_bad == 0, format!("beta = 0: {beta_bad}/{CASES} cases differ from the plain sum")),
        Outcome::new(k1_bad == 0, format!("k = 1: {k1_bad}/{CASES} cases differ from temporal L1")),
    )
}

pub fn metric_examples() -> Outcome {
    let mut failures = Vec::new();
    let mut n = 0;
    let mut check = |name: &str, got: f64, expected: f64| {
        n += 1;
        if got != expected {
            failures.push(format!("{name}: {got} vs {expected}"));
        }
    };
    let (h, w) = (8, 8);
    let full = vec![true; h * w];
    let left: Vec<bool> = (0..h * w).map(|i| i % w < w / 2).collect();
    let right: Vec<bool> = left.iter().map(|b| !b).collect();
    let empty = vec![false; h * w];
    check("jaccard identical", jaccard(&left, &left).unwrap(), 1.0);
    check("jaccard disjoint", jaccard(&left, &right).unwrap(), 0.0);
    check("jaccard left half vs full", jaccard(&left, &full).unwrap(), 0.5);
    check("jaccard both empty", jaccard(&empty, &empty).unwrap(), 1.0);

    let square = |y0: usize, x0: usize| -> Vec<bool> {
        (0..16 * 16)
            .map(|i| (y0..y0 + 6).contains(&(i / 16)) && (x0..x0 + 6).contains(&(i % 16)))
            .collect()
    };
    let sq = square(5, 5);
    check("boundary_f identical", boundary_f(&sq, &sq, 16, 1).unwrap(), 1.0);
    check("boundary_f empty pred", boundary_f(&vec![false; 256], &sq, 16, 1).unwrap(), 0.0);
    check("boundary_f shifted square", boundary_f(&square(5, 6), &sq, 16, 1).unwrap(), 1.0);
    check("boundary_f both empty", boundary_f(&vec![false; 256], &vec![false; 256], 16, 1).unwrap(), 1.0);

    check("decay constant", decay(&[0.7; 8]).unwrap(), 0.0);
    check("decay [1,1,0,0]", decay(&[1.0, 1.0, 0.0, 0.0]).unwrap(), 1.0);
    let linear: Vec<f64> = (0..8).map(|i| 1.0 - i as f64 / 7.0).collect();
    let oracle = (linear[0] + linear[1]) / 2.0 - (linear[6] + linear[7]) / 2.0;
    check("decay linear", decay(&linear).unwrap(), oracle);
    check("decay of three frames is absent", f64::from(u8::from(decay(&[1.0, 0.5, 0.0]).is_none())), 1.0);

    check("jf_mean (1,1)", jf_mean(1.0, 1.0), 1.0);
    check("jf_mean (0,1)", jf_mean(0.0, 1.0), 0.5);
    let table = jf_mean(0.798, 0.806);
    // Reported to three decimals.
    check("jf_mean (0.798,0.806)", (table * 1000.0).round() / 1000.0, 0.802);
    Outcome::new(
        failures.is_empty(),
        if failures.is_empty() {
            format!("{n} examples reproduced, jf_mean(0.798, 0.806) = {table:.3}")
        } else {
            failures.join("; ")
        },
    )
}
