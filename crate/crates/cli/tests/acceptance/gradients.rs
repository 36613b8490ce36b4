use std::sync::Arc;
use std::time::{Duration, Instant};

use msvos_core::backbone::BackboneConfig;
use msvos_core::data::Frame;
use msvos_core::fusion::{
    attention_forward, average_fuse, fuse, fuse_unnormalized, variance_map, ProbMap, ScaleTag,
};
use msvos_core::gradcheck::{check_gradients, relative_error, DEFAULT_STEP};
use msvos_core::losses::{
    bilateral_weights, inter_loss_with, intra_loss, online_loss, pseudo_labels, seg_loss, variance_weighted_loss,
    BilateralConfig, FrameView,
};
use msvos_core::pipeline::{forward_pass, init_model, FusionMode, ModelConfig, PreparedFrame};
use msvos_core::tensor::{DiffTensor, NeighborWeights, ParamSet, Tape, Var};
use msvos_core::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::common::{random, random_labels, random_rgb, Outcome};

const TOL: f64 = 1e-4;
const BUDGET: Duration = Duration::from_secs(120);

fn weighted_sum(tape: &mut Tape, out: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = random(&mut rng, tape.shape(out), -1.0, 1.0);
    let w = tape.constant(w);
    let prod = tape.mul(out, w)?;
    Ok(tape.sum(prod))
}

type Check = (String, f64);

fn fd<F>(name: &str, f: F, inputs: &[DiffTensor]) -> Check
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let report = check_gradients(f, inputs, DEFAULT_STEP).unwrap();
    (name.to_string(), report.max_rel_error)
}

/// Step of the fourth-order stencil used on whole models.
const MODEL_STEP: f64 = 1e-3;

/// Worst relative error over every parameter entry. Whole-model losses are
/// large next to the gradients of deep layers, so the two-point difference
/// drowns in rounding; the five-point central stencil tolerates a larger step.
fn param_fd<F>(name: &str, params: &ParamSet, f: F) -> Check
where
    F: Fn(&mut Tape, &ParamSet) -> Result<Var>,
{
    let mut p = params.clone();
    p.zero_grads();
    let mut tape = Tape::new();
    let loss = f(&mut tape, &p).unwrap();
    tape.backward_into(loss, &mut p).unwrap();
    let eval = |q: &ParamSet| {
        let mut tape = Tape::new();
        let out = f(&mut tape, q).unwrap();
        tape.scalar(out)
    };
    let names: Vec<String> = params.names().map(str::to_string).collect();
    let mut worst = 0.0f64;
    let mut q = params.clone();
    for n in &names {
        let t = p.get(n).unwrap();
        let analytic = t.grad().map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; t.numel()]);
        for (j, &a) in analytic.iter().enumerate() {
            let orig = params.get(n).unwrap().values()[j];
            let mut at = |k: f64| {
                q.get_mut(n).unwrap().values_mut()[j] = orig + k * MODEL_STEP;
                eval(&q)
            };
            let (m2, m1, p1, p2) = (at(-2.0), at(-1.0), at(1.0), at(2.0));
            q.get_mut(n).unwrap().values_mut()[j] = orig;
            let numeric = (m2 - 8.0 * m1 + 8.0 * p1 - p2) / (12.0 * MODEL_STEP);
            worst = worst.max(relative_error(a, numeric));
        }
    }
    (name.to_string(), worst)
}

fn tensor_ops(rng: &mut ChaCha8Rng, out: &mut Vec<Check>) {
    let (h, w) = (rng.gen_range(3..9), rng.gen_range(3..9));
    let a = random(rng, &[3, h, w], -1.5, 1.5);
    let b = random(rng, &[3, h, w], -1.5, 1.5);
    let single = random(rng, &[1, h, w], -1.5, 1.5);
    let positive = random(rng, &[3, h, w], 0.2, 2.0);
    let positive_single = random(rng, &[1, h, w], 0.3, 2.0);
    let bias = random(rng, &[3], -0.5, 0.5);

    type Op = fn(&mut Tape, &[Var]) -> Result<Var>;
    let cases: Vec<(&str, Op, Vec<DiffTensor>)> = vec![
        ("add", |t, v| { let y = t.add(v[0], v[1])?; weighted_sum(t, y, 1) }, vec![a.clone(), b.clone()]),
        ("sub", |t, v| { let y = t.sub(v[0], v[1])?; weighted_sum(t, y, 2) }, vec![a.clone(), b.clone()]),
        ("mul", |t, v| { let y = t.mul(v[0], v[1])?; weighted_sum(t, y, 3) }, vec![a.clone(), b.clone()]),
        ("div", |t, v| { let y = t.div(v[0], v[1])?; weighted_sum(t, y, 4) }, vec![a.clone(), positive.clone()]),
        ("mul broadcast", |t, v| { let y = t.mul(v[0], v[1])?; weighted_sum(t, y, 5) }, vec![single.clone(), b.clone()]),
        ("sub broadcast", |t, v| { let y = t.sub(v[0], v[1])?; weighted_sum(t, y, 6) }, vec![a.clone(), single.clone()]),
        ("div broadcast", |t, v| { let y = t.div(v[0], v[1])?; weighted_sum(t, y, 7) }, vec![a.clone(), positive_single]),
        ("scale", |t, v| { let y = t.scale(v[0], -2.5); weighted_sum(t, y, 8) }, vec![a.clone()]),
        ("add_scalar", |t, v| { let y = t.add_scalar(v[0], 0.3); weighted_sum(t, y, 9) }, vec![a.clone()]),
        ("one_minus", |t, v| { let y = t.one_minus(v[0]); weighted_sum(t, y, 10) }, vec![a.clone()]),
        ("exp", |t, v| { let y = t.exp(v[0]); weighted_sum(t, y, 11) }, vec![a.clone()]),
        ("log", |t, v| { let y = t.log(v[0]); weighted_sum(t, y, 12) }, vec![positive.clone()]),
        ("sigmoid", |t, v| { let y = t.sigmoid(v[0]); weighted_sum(t, y, 13) }, vec![a.clone()]),
        ("silu", |t, v| { let y = t.silu(v[0]); weighted_sum(t, y, 14) }, vec![a.clone()]),
        ("abs", |t, v| { let y = t.abs(v[0]); weighted_sum(t, y, 15) }, vec![a.clone()]),
        ("clamp", |t, v| { let y = t.clamp(v[0], -0.5, 0.7)?; weighted_sum(t, y, 16) }, vec![a.clone()]),
        ("softmax_over_channels", |t, v| { let y = t.softmax_over_channels(v[0])?; weighted_sum(t, y, 17) }, vec![a.clone()]),
        ("concat_channels", |t, v| { let y = t.concat_channels(&[v[0], v[1], v[0]])?; weighted_sum(t, y, 18) }, vec![a.clone(), single.clone()]),
        ("sum_channels", |t, v| { let y = t.sum_channels(v[0])?; weighted_sum(t, y, 19) }, vec![a.clone()]),
        ("select_channel", |t, v| { let y = t.select_channel(v[0], 2)?; weighted_sum(t, y, 20) }, vec![a.clone()]),
        ("sum", |t, v| { let y = t.mul(v[0], v[0])?; Ok(t.sum(y)) }, vec![a.clone()]),
        ("mean", |t, v| { let y = t.mul(v[0], v[0])?; Ok(t.mean(y)) }, vec![a.clone()]),
        ("bias_add", |t, v| { let y = t.bias_add(v[0], v[1])?; weighted_sum(t, y, 21) }, vec![a.clone(), bias]),
    ];
    for (name, f, inputs) in cases {
        out.push(fd(name, f, &inputs));
    }

    for (stride, pad, k) in [(1, 1, 3), (2, 1, 3), (1, 0, 1), (2, 0, 2)] {
        let x = random(rng, &[2, h, w], -1.0, 1.0);
        let kern = random(rng, &[3, 2, k, k], -0.5, 0.5);
        out.push(fd(
            &format!("conv2d k{k} s{stride} p{pad}"),
            move |t, v| {
                let y = t.conv2d(v[0], v[1], stride, pad)?;
                weighted_sum(t, y, 22)
            },
            &[x, kern],
        ));
    }
    for (th, tw) in [(2 * h, 2 * w), (h.div_ceil(2), w.div_ceil(2)), (5, 7)] {
        let x = random(rng, &[2, h, w], -1.0, 1.0);
        out.push(fd(
            &format!("bilinear_resize {h}x{w} -> {th}x{tw}"),
            move |t, v| {
                let y = t.bilinear_resize(v[0], th, tw)?;
                weighted_sum(t, y, 23)
            },
            &[x],
        ));
    }

    // A random sparse neighbour table.
    let n = h * w;
    let mut offsets = vec![0];
    let mut neighbors = Vec::new();
    let mut weights = Vec::new();
    for _ in 0..n {
        for _ in 0..rng.gen_range(1..5) {
            neighbors.push(rng.gen_range(0..n));
            weights.push(rng.gen_range(0.05..1.0));
        }
        offsets.push(neighbors.len());
    }
    let table = Arc::new(NeighborWeights {
        height: h,
        width: w,
        offsets,
        neighbors,
        weights,
    });
    let targets: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
    let x = random(rng, &[1, h, w], 0.0, 1.0);
    out.push(fd(
        "neighborhood_l1",
        move |t, v| t.neighborhood_l1(v[0], targets.clone(), table.clone()),
        &[x],
    ));
}

fn fusion_and_losses(rng: &mut ChaCha8Rng, out: &mut Vec<Check>) {
    let (h1, w1) = (rng.gen_range(2..5), rng.gen_range(2..5));
    let (h2, w2) = (2 * h1, 2 * w1);
    let att = random(rng, &[1, h1, w1], 0.1, 0.9);
    let z1 = random(rng, &[2, h1, w1], -1.5, 1.5);
    let z2 = random(rng, &[2, h2, w2], -1.5, 1.5);
    let weights = random(rng, &[2, h2, w2], -1.0, 1.0);

    let wt = weights.clone();
    out.push(fd(
        "fuse",
        move |t, v| {
            let m1 = ProbMap::new(t.softmax_over_channels(v[1])?, ScaleTag::S1);
            let m2 = ProbMap::new(t.softmax_over_channels(v[2])?, ScaleTag::S2);
            let y = fuse(t, v[0], m1, m2)?;
            let w = t.constant(wt.clone());
            let y = t.mul(y.var, w)?;
            Ok(t.sum(y))
        },
        &[att.clone(), z1.clone(), z2.clone()],
    ));
    let wt = weights.clone();
    out.push(fd(
        "fuse before renormalization",
        move |t, v| {
            let m1 = ProbMap::new(t.softmax_over_channels(v[1])?, ScaleTag::S1);
            let m2 = ProbMap::new(t.softmax_over_channels(v[2])?, ScaleTag::S2);
            let y = fuse_unnormalized(t, v[0], m1, m2)?;
            let w = t.constant(wt.clone());
            let y = t.mul(y, w)?;
            Ok(t.sum(y))
        },
        &[att.clone(), z1.clone(), z2.clone()],
    ));
    let wt = weights.clone();
    out.push(fd(
        "average_fuse",
        move |t, v| {
            let m1 = ProbMap::new(t.softmax_over_channels(v[0])?, ScaleTag::S1);
            let m2 = ProbMap::new(t.softmax_over_channels(v[1])?, ScaleTag::S2);
            let y = average_fuse(t, m1, m2)?;
            let w = t.constant(wt.clone());
            let y = t.mul(y.var, w)?;
            Ok(t.sum(y))
        },
        &[z1.clone(), z2.clone()],
    ));
    out.push(fd(
        "variance_map",
        |t, v| {
            let m1 = ProbMap::new(t.softmax_over_channels(v[0])?, ScaleTag::S1);
            let m2 = ProbMap::new(t.softmax_over_channels(v[1])?, ScaleTag::S2);
            let var = variance_map(t, m1, m2)?;
            weighted_sum(t, var, 31)
        },
        &[z1.clone(), z2.clone()],
    ));

    let target = random_labels(rng, 2, h2 * w2);
    let var = random(rng, &[1, h2, w2], 0.0, 1.0);
    let tg = target.clone();
    out.push(fd(
        "seg_loss",
        move |t, v| {
            let p = ProbMap::new(t.softmax_over_channels(v[0])?, ScaleTag::S2);
            let l = seg_loss(t, p, &tg)?;
            Ok(t.sum(l))
        },
        &[z2.clone()],
    ));
    let tg = target.clone();
    out.push(fd(
        "variance_weighted_loss",
        move |t, v| {
            let p = ProbMap::new(t.softmax_over_channels(v[0])?, ScaleTag::S2);
            let l = seg_loss(t, p, &tg)?;
            variance_weighted_loss(t, l, v[1], 0.8)
        },
        &[z2.clone(), var.clone()],
    ));
    // The variance map enters the weighted objective through both scales.
    let tg = target.clone();
    out.push(fd(
        "weighted objective through fusion and variance",
        move |t, v| {
            let m1 = ProbMap::new(t.softmax_over_channels(v[1])?, ScaleTag::S1);
            let m2 = ProbMap::new(t.softmax_over_channels(v[2])?, ScaleTag::S2);
            let y = fuse(t, v[0], m1, m2)?;
            let l = seg_loss(t, y, &tg)?;
            let var = variance_map(t, m1, m2)?;
            variance_weighted_loss(t, l, var, 1.0)
        },
        &[att.clone(), z1.clone(), z2.clone()],
    ));

    let pseudo = {
        let mut tape = Tape::new();
        let zv = tape.constant(z2.clone());
        let p = tape.softmax_over_channels(zv).unwrap();
        pseudo_labels(tape.value(p), 2)
    };
    let vc = var.clone();
    let ps = pseudo.clone();
    out.push(fd(
        "intra_loss",
        move |t, v| {
            let p = ProbMap::new(t.softmax_over_channels(v[0])?, ScaleTag::S2);
            let frozen = t.constant(vc.clone());
            intra_loss(t, p, &ps, frozen)
        },
        &[z2.clone()],
    ));

    let cur = random_rgb(rng, h2, w2);
    let prev = random_rgb(rng, h2, w2);
    let prev_fg: Vec<f64> = (0..h2 * w2).map(|_| rng.gen_range(0.05..0.95)).collect();
    let cfg = BilateralConfig {
        kernel: 3,
        sigma_spatial: 1.5,
        sigma_intensity: 0.5,
    };
    let table = Arc::new(
        bilateral_weights(&FrameView::new(h2, w2, &cur).unwrap(), &FrameView::new(h2, w2, &prev).unwrap(), &cfg)
            .unwrap(),
    );
    let (pf, tb) = (prev_fg.clone(), table.clone());
    out.push(fd(
        "inter_loss",
        move |t, v| {
            let p = ProbMap::new(t.softmax_over_channels(v[0])?, ScaleTag::S2);
            inter_loss_with(t, p, &pf, tb.clone())
        },
        &[z2.clone()],
    ));
    out.push(fd(
        "online objective through fusion",
        move |t, v| {
            let m1 = ProbMap::new(t.softmax_over_channels(v[1])?, ScaleTag::S1);
            let m2 = ProbMap::new(t.softmax_over_channels(v[2])?, ScaleTag::S2);
            let y = fuse(t, v[0], m1, m2)?;
            let frozen = t.constant(var.clone());
            let intra = intra_loss(t, y, &pseudo, frozen)?;
            let inter = inter_loss_with(t, y, &prev_fg, table.clone())?;
            online_loss(t, intra, inter)
        },
        &[att, z1, z2],
    ));
}

fn tiny_model() -> ModelConfig {
    ModelConfig {
        backbone: BackboneConfig {
            widths: [2, 2, 3, 3],
            classes: 2,
        },
        fusion: FusionMode::Attention,
        attention_width: 2,
        ..ModelConfig::default()
    }
}

/// Every parameter of a full two-scale model under both objectives.
fn full_model(rng: &mut ChaCha8Rng, out: &mut Vec<Check>) {
    let model = tiny_model();
    let mut params = init_model(&model, rng.gen()).unwrap();
    // A non-zero final attention layer so every attention kernel gets gradient.
    for v in params.get_mut("attention.conv3.weight").unwrap().values_mut() {
        *v = rng.gen_range(-1.0..1.0);
    }
    let (h, w) = (8, 8);
    let rgb: Vec<u8> = (0..3 * h * w).map(|_| rng.gen()).collect();
    let frame = PreparedFrame::new(&Frame::new(w, h, rgb).unwrap(), &model.scales);
    let guidance: Vec<f64> = (0..h * w).map(|_| rng.gen_range(0.0..1.0)).collect();
    let target = random_labels(rng, 2, h * w);
    let g = guidance.clone();
    out.push(param_fd("full model, variance-weighted objective", &params, |t, p| {
        let pass = forward_pass(t, p, &model, &frame, &g)?;
        let l = seg_loss(t, pass.fused, &target)?;
        variance_weighted_loss(t, l, pass.variance, 1.0)
    }));

    let prev_rgb = random_rgb(rng, h, w);
    let table = Arc::new(
        bilateral_weights(
            &FrameView::new(h, w, &frame.planes_s2).unwrap(),
            &FrameView::new(h, w, &prev_rgb).unwrap(),
            &BilateralConfig::default(),
        )
        .unwrap(),
    );
    let prev_fg: Vec<f64> = (0..h * w).map(|_| rng.gen_range(0.0..1.0)).collect();
    let var: Vec<f64> = (0..h * w).map(|_| rng.gen_range(0.0..0.5)).collect();
    out.push(param_fd("full model, online objective", &params, |t, p| {
        let pass = forward_pass(t, p, &model, &frame, &guidance)?;
        let v = t.constant_from(vec![1, h, w], var.clone())?;
        let intra = intra_loss(t, pass.fused, &target, v)?;
        let inter = inter_loss_with(t, pass.fused, &prev_fg, table.clone())?;
        online_loss(t, intra, inter)
    }));

    let f1 = random(rng, &[model.backbone.feature_channels(), 4, 4], -1.0, 1.0);
    let f2 = random(rng, &[model.backbone.feature_channels(), 8, 8], -1.0, 1.0);
    out.push(param_fd("attention module", &params, |t, p| {
        let a = t.constant(f1.clone());
        let b = t.constant(f2.clone());
        let att = attention_forward(t, p, a, b)?;
        weighted_sum(t, att, 41)
    }));
}

pub fn run() -> Outcome {
    let start = Instant::now();
    let mut checks = Vec::new();
    for seed in 0..3 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        tensor_ops(&mut rng, &mut checks);
        fusion_and_losses(&mut rng, &mut checks);
    }
    full_model(&mut ChaCha8Rng::seed_from_u64(2000), &mut checks);
    let elapsed = start.elapsed();
    let failed: Vec<&Check> = checks.iter().filter(|(_, e)| !(*e <= TOL)).collect();
    for (name, err) in &failed {
        println!("    gradient check {name}: relative error {err:.3e}");
    }
    let worst = checks.iter().map(|(_, e)| *e).fold(0.0, f64::max);
    Outcome::new(
        failed.is_empty() && elapsed <= BUDGET,
        format!(
            "{} checks, worst relative error {worst:.2e} (limit {TOL:.0e}), {:.1}s (limit {}s)",
            checks.len(),
            elapsed.as_secs_f64(),
            BUDGET.as_secs()
        ),
    )
}
