use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use msvos_core::checkpoint::Checkpoint;
use msvos_core::data::{generate_dataset, load_dataset, load_masks, save_dataset, save_masks, SyntheticConfig, VideoSequence};
use msvos_core::heatmap::render;
use msvos_core::metrics::{score_sequence, summarize, SequenceScore, Summary, DEFAULT_TOLERANCE};
use msvos_core::pipeline::{offline_train, run_sequence, FrameResult, FusionMode, RunConfig, SequenceRun};
use msvos_core::tensor::ParamSet;

use crate::output::{create_dir, fmt_opt, io_error, read_json, write_json, write_text};
use crate::{
    CliError, CliResult, EvalArgs, GenDataArgs, InferArgs, InspectArgs, RunConfigArgs, SweepArgs, TrainArgs,
};

pub const CONFIG_FILE: &str = "config.json";
pub const RUN_MANIFEST: &str = "run.json";
pub const CHECKPOINT_FILE: &str = "model.ckpt";

fn out_dir(explicit: Option<PathBuf>, root: &Path, name: &str) -> PathBuf {
    explicit.unwrap_or_else(|| root.join(name))
}

fn invalid(msg: impl Into<String>) -> CliError {
    CliError::Validation(msg.into())
}

// ------------------------------------------------------------------ gen-data

pub fn gen_data(a: GenDataArgs, root: &Path) -> CliResult<()> {
    let mut cfg: SyntheticConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => SyntheticConfig::default(),
    };
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(v) = a.sequences {
        cfg.sequences = v;
    }
    if let Some(v) = a.frames {
        cfg.frames = v;
    }
    if let Some(v) = a.objects {
        cfg.objects = v;
    }
    if let Some(v) = a.scale_rate {
        cfg.scale_rate = v;
    }
    if let Some(v) = a.noise_drift {
        cfg.noise_drift = v;
    }
    // Nothing touches the disk before the config is known to be valid.
    cfg.validate()?;
    let out = out_dir(a.out, root, "data");
    create_dir(&out)?;
    write_json(&out.join(CONFIG_FILE), &cfg)?;
    let data = generate_dataset(&cfg)?;
    save_dataset(&out, &data)?;
    println!("wrote {} sequences to {}", data.len(), out.display());
    Ok(())
}

// --------------------------------------------------------------------- train

fn resolve_run_config(args: &RunConfigArgs) -> CliResult<RunConfig> {
    let mut cfg: RunConfig = match &args.config {
        Some(p) => read_json(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn parse_fusion(s: &str) -> CliResult<FusionMode> {
    FusionMode::parse(s).ok_or_else(|| invalid(format!("unknown fusion mode `{s}` (attention, average, small, large)")))
}

pub fn train(a: TrainArgs, root: &Path) -> CliResult<()> {
    let mut cfg = resolve_run_config(&a.run)?;
    if let Some(v) = a.beta {
        cfg.beta = v;
    }
    if let Some(f) = &a.fusion {
        cfg.model.fusion = parse_fusion(f)?;
    }
    if let Some(v) = a.epochs {
        cfg.offline_epochs = v;
    }
    if let Some(v) = a.lr {
        cfg.offline_lr = v;
    }
    cfg.validate()?;
    let out = out_dir(a.out, root, "train");
    create_dir(&out)?;
    write_json(&out.join(CONFIG_FILE), &cfg)?;
    let data = load_dataset(&a.data)?;
    info!("training on {} sequences", data.len());
    train_into(&data, &cfg, &out)?;
    println!("wrote {}", out.join(CHECKPOINT_FILE).display());
    Ok(())
}

/// Trains and writes `model.ckpt` and `train.log` into `out`.
fn train_into(data: &[VideoSequence], cfg: &RunConfig, out: &Path) -> CliResult<ParamSet> {
    let report = offline_train(data, cfg)?;
    let mut log = String::new();
    for entry in &report.log {
        writeln!(log, "{entry}").expect("string write");
    }
    write_text(&out.join("train.log"), &log)?;
    let ckpt = Checkpoint::new(cfg.model, report.params)?;
    ckpt.save(&out.join(CHECKPOINT_FILE))?;
    Ok(ckpt.params)
}

// ------------------------------------------------------------- infer / adapt

/// Echo of an infer or adapt invocation, enough to reproduce it.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub command: String,
    pub checkpoint: PathBuf,
    pub data: PathBuf,
    pub sequences: Vec<String>,
    pub config: RunConfig,
}

fn has_ground_truth(seq: &VideoSequence) -> bool {
    seq.masks.iter().skip(1).any(Option::is_some)
}

/// Segments every sequence, in parallel when asked. Scores are present for
/// sequences with ground truth beyond the first frame; it is read only after
/// the run.
pub fn segment_all(
    params: &ParamSet,
    data: &[VideoSequence],
    cfg: &RunConfig,
    parallel: bool,
) -> CliResult<Vec<(SequenceRun, Option<SequenceScore>)>> {
    let one = |seq: &VideoSequence| -> CliResult<(SequenceRun, Option<SequenceScore>)> {
        let run = run_sequence(params, seq.input(), cfg)?;
        let score = if has_ground_truth(seq) {
            Some(score_sequence(&seq.id, &run.masks, &seq.masks, seq.object_count, DEFAULT_TOLERANCE)?)
        } else {
            None
        };
        Ok((run, score))
    };
    if parallel {
        data.par_iter().map(one).collect()
    } else {
        data.iter().map(one).collect()
    }
}

fn frame_metrics(score: &SequenceScore) -> String {
    let mut s = String::from("t J F\n");
    for ((t, j), f) in score.frames.iter().zip(&score.j).zip(&score.f) {
        writeln!(s, "{t} {j:.6} {f:.6}").expect("string write");
    }
    s
}

fn adaptation_log(run: &SequenceRun) -> String {
    let mut s = String::from("object t before after\n");
    for r in &run.adaptation {
        writeln!(s, "{} {} {:.17e} {:.17e}", r.label, r.t, r.before, r.after).expect("string write");
    }
    s
}

fn write_heatmaps(dir: &Path, label: usize, r: &FrameResult) -> CliResult<()> {
    let dir = dir.join(format!("obj{label}"));
    if let Some(att) = &r.attention {
        render(att, r.s1.1, r.s1.0)?.save(&dir, &format!("attention_{:05}", r.t))?;
    }
    render(&r.variance, r.s2.1, r.s2.0)?.save(&dir, &format!("variance_{:05}", r.t))?;
    Ok(())
}

/// Per-sequence table plus the mean row.
pub fn score_table(scores: &[SequenceScore]) -> (String, Summary) {
    let mut s = format!("{:<12} {:>9} {:>9} {:>9} {:>9} {:>9}\n", "sequence", "J", "F", "J&F", "J-Decay", "F-Decay");
    for sc in scores {
        writeln!(
            s,
            "{:<12} {:>9.6} {:>9.6} {:>9.6} {:>9} {:>9}",
            sc.id,
            sc.j_mean,
            sc.f_mean,
            sc.jf,
            fmt_opt(sc.j_decay),
            fmt_opt(sc.f_decay)
        )
        .expect("string write");
    }
    let sum = summarize(scores);
    writeln!(
        s,
        "{:<12} {:>9.6} {:>9.6} {:>9.6} {:>9.6} {:>9.6}",
        "mean", sum.j_mean, sum.f_mean, sum.jf, sum.j_decay, sum.f_decay
    )
    .expect("string write");
    (s, sum)
}

/// Flat `key=value` lines.
fn summary_text(sum: &Summary) -> String {
    format!(
        "sequences={}\nj_mean={}\nf_mean={}\njf={}\nj_decay={}\nf_decay={}\n",
        sum.sequences, sum.j_mean, sum.f_mean, sum.jf, sum.j_decay, sum.f_decay
    )
}

pub fn infer(a: InferArgs, adapt: Option<(usize, Option<f64>)>, root: &Path) -> CliResult<()> {
    let mut cfg = resolve_run_config(&a.run)?;
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    cfg.model = ckpt.model;
    cfg.adaptation_steps = 0;
    if let Some((steps, lr)) = adapt {
        cfg.adaptation_steps = steps;
        if let Some(lr) = lr {
            cfg.adaptation_lr = lr;
        }
    }
    if let Some(v) = a.finetune_steps {
        cfg.finetune_steps = v;
    }
    cfg.validate()?;
    let command = if adapt.is_some() { "adapt" } else { "infer" };
    let out = out_dir(a.out, root, command);
    create_dir(&out)?;
    write_json(&out.join(CONFIG_FILE), &cfg)?;
    let data = load_dataset(&a.data)?;
    let manifest = RunManifest {
        command: command.to_string(),
        checkpoint: a.checkpoint.clone(),
        data: a.data.clone(),
        sequences: data.iter().map(|s| s.id.clone()).collect(),
        config: cfg.clone(),
    };
    write_json(&out.join(RUN_MANIFEST), &manifest)?;
    info!("{command}: {} sequences, {} adaptation steps", data.len(), cfg.adaptation_steps);
    let results = segment_all(&ckpt.params, &data, &cfg, a.parallel)?;
    let mut scores = Vec::new();
    for (run, score) in &results {
        let dir = out.join(&run.id);
        save_masks(&dir, &run.masks)?;
        write_json(&dir.join(RUN_MANIFEST), &manifest)?;
        if cfg.adaptation_steps > 0 {
            write_text(&dir.join("adaptation.txt"), &adaptation_log(run))?;
        }
        if a.heatmaps {
            for (k, frames) in run.objects.iter().enumerate() {
                for r in frames {
                    write_heatmaps(&dir.join("heatmaps"), k + 1, r)?;
                }
            }
        }
        if let Some(score) = score {
            write_text(&dir.join("metrics.txt"), &frame_metrics(score))?;
            scores.push(score.clone());
        }
    }
    if !scores.is_empty() {
        let (table, sum) = score_table(&scores);
        write_text(&out.join("metrics.txt"), &table)?;
        write_text(&out.join("summary.txt"), &summary_text(&sum))?;
        print!("{table}");
    }
    println!("wrote results to {}", out.display());
    Ok(())
}

// ---------------------------------------------------------------------- eval

/// Per-sequence metrics as printed by `eval`.
pub type EvalRow = SequenceScore;

fn result_ids(pred: &Path) -> CliResult<Vec<String>> {
    let entries = fs::read_dir(pred).map_err(|e| io_error(pred, e))?;
    let mut ids = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| io_error(pred, e))?;
        if entry.path().join("masks").is_dir() {
            ids.push(entry.file_name().to_string_lossy().into_owned());
        }
    }
    ids.sort();
    Ok(ids)
}

pub fn eval(a: EvalArgs) -> CliResult<()> {
    if let Some(out) = &a.out {
        create_dir(out)?;
        write_json(
            &out.join(CONFIG_FILE),
            &serde_json::json!({ "pred": a.pred, "gt": a.gt, "tolerance": a.tolerance }),
        )?;
    }
    let gt = load_dataset(&a.gt)?;
    let pred_ids = result_ids(&a.pred)?;
    let gt_ids: Vec<String> = gt.iter().map(|s| s.id.clone()).collect();
    let missing: Vec<&String> = gt_ids.iter().filter(|id| !pred_ids.contains(id)).collect();
    let extra: Vec<&String> = pred_ids.iter().filter(|id| !gt_ids.contains(id)).collect();
    if !missing.is_empty() || !extra.is_empty() {
        return Err(invalid(format!(
            "sequence ids differ; without predictions: {missing:?}; without ground truth: {extra:?}"
        )));
    }
    let mut scores = Vec::new();
    for seq in &gt {
        let masks = load_masks(&a.pred.join(&seq.id))?;
        scores.push(score_sequence(&seq.id, &masks, &seq.masks, seq.object_count, a.tolerance)?);
    }
    let (table, sum) = score_table(&scores);
    print!("{table}");
    if let Some(out) = &a.out {
        write_text(&out.join("metrics.txt"), &table)?;
        write_text(&out.join("summary.txt"), &summary_text(&sum))?;
        for sc in &scores {
            write_text(&out.join(&sc.id).join("metrics.txt"), &frame_metrics(sc))?;
        }
    }
    Ok(())
}

// --------------------------------------------------------------------- sweep

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Grid {
    /// Training dataset, relative to the grid file.
    pub train: PathBuf,
    /// Evaluation dataset, relative to the grid file.
    pub test: PathBuf,
    #[serde(default)]
    pub base: RunConfig,
    pub fusion: Vec<FusionMode>,
    pub beta: Vec<f64>,
    pub steps: Vec<usize>,
}

/// One cell of a sweep.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub fusion: FusionMode,
    pub beta: f64,
    pub steps: usize,
    pub j: f64,
    pub f: f64,
    pub jf: f64,
    pub j_decay: f64,
    pub f_decay: f64,
}

fn sweep_table(rows: &[SweepRow]) -> String {
    let mut s = format!(
        "{:<3} {:<3} {:<3} {:<9} {:>5} {:>5} {:>9} {:>9} {:>9} {:>9} {:>9}\n",
        "Ms", "Var", "Ada", "fusion", "beta", "steps", "J", "F", "J&F", "J-Decay", "F-Decay"
    );
    let mark = |b: bool| if b { "x" } else { "-" };
    for r in rows {
        writeln!(
            s,
            "{:<3} {:<3} {:<3} {:<9} {:>5} {:>5} {:>9.6} {:>9.6} {:>9.6} {:>9.6} {:>9.6}",
            mark(r.fusion == FusionMode::Attention),
            mark(r.beta != 0.0),
            mark(r.steps > 0),
            r.fusion.as_str(),
            r.beta,
            r.steps,
            r.j,
            r.f,
            r.jf,
            r.j_decay,
            r.f_decay
        )
        .expect("string write");
    }
    s
}

pub fn sweep(a: SweepArgs, root: &Path) -> CliResult<()> {
    let mut grid: Grid = read_json(&a.grid)?;
    let base_dir = a.grid.parent().unwrap_or(Path::new("")).to_path_buf();
    grid.train = base_dir.join(&grid.train);
    grid.test = base_dir.join(&grid.test);
    if grid.fusion.is_empty() || grid.beta.is_empty() || grid.steps.is_empty() {
        return Err(invalid("every sweep axis needs at least one value"));
    }
    grid.base.validate()?;
    let out = out_dir(a.out, root, "sweep");
    create_dir(&out)?;
    write_json(&out.join(CONFIG_FILE), &grid)?;
    let train_data = load_dataset(&grid.train)?;
    let test_data = load_dataset(&grid.test)?;
    if !test_data.iter().any(has_ground_truth) {
        return Err(invalid(format!("{} has no ground truth to score", grid.test.display())));
    }
    let cells: Vec<(FusionMode, f64)> = grid
        .fusion
        .iter()
        .flat_map(|&f| grid.beta.iter().map(move |&b| (f, b)))
        .collect();
    let cell = |&(fusion, beta): &(FusionMode, f64)| -> CliResult<Vec<SweepRow>> {
        let mut cfg = grid.base.clone();
        cfg.model.fusion = fusion;
        cfg.beta = beta;
        let dir = out.join("cells").join(format!("{}_beta{beta}", fusion.as_str()));
        create_dir(&dir)?;
        write_json(&dir.join(CONFIG_FILE), &cfg)?;
        info!("sweep: training {} beta {beta}", fusion.as_str());
        let params = train_into(&train_data, &cfg, &dir)?;
        let mut rows = Vec::new();
        for &steps in &grid.steps {
            let run_cfg = RunConfig {
                adaptation_steps: steps,
                ..cfg.clone()
            };
            let scores: Vec<SequenceScore> = segment_all(&params, &test_data, &run_cfg, false)?
                .into_iter()
                .filter_map(|(_, s)| s)
                .collect();
            let sum = summarize(&scores);
            rows.push(SweepRow {
                fusion,
                beta,
                steps,
                j: sum.j_mean,
                f: sum.f_mean,
                jf: sum.jf,
                j_decay: sum.j_decay,
                f_decay: sum.f_decay,
            });
        }
        Ok(rows)
    };
    let per_cell: Vec<Vec<SweepRow>> = if a.parallel {
        cells.par_iter().map(cell).collect::<CliResult<_>>()?
    } else {
        cells.iter().map(cell).collect::<CliResult<_>>()?
    };
    let rows: Vec<SweepRow> = per_cell.into_iter().flatten().collect();
    let table = sweep_table(&rows);
    write_text(&out.join("sweep.txt"), &table)?;
    write_json(&out.join("sweep.json"), &rows)?;
    print!("{table}");
    Ok(())
}

// ------------------------------------------------------------------- inspect

pub fn inspect(a: InspectArgs) -> CliResult<()> {
    let manifest: RunManifest = read_json(&a.results.join(RUN_MANIFEST))?;
    let out = a.out.clone().unwrap_or_else(|| a.results.join("inspect"));
    create_dir(&out)?;
    write_json(
        &out.join(CONFIG_FILE),
        &serde_json::json!({ "results": a.results, "frame": a.frame, "sequence": a.sequence }),
    )?;
    let ckpt = Checkpoint::load(&manifest.checkpoint)?;
    let mut cfg = manifest.config.clone();
    cfg.model = ckpt.model;
    let data = load_dataset(&manifest.data)?;
    let selected: Vec<&VideoSequence> = data
        .iter()
        .filter(|s| a.sequence.as_ref().map_or(true, |id| &s.id == id))
        .collect();
    if selected.is_empty() {
        return Err(invalid(format!("no sequence {:?} in {}", a.sequence, manifest.data.display())));
    }
    for seq in selected {
        if a.frame >= seq.len() {
            return Err(invalid(format!(
                "sequence {} has {} frames, frame {} requested",
                seq.id,
                seq.len(),
                a.frame
            )));
        }
        // Frames after `frame` cannot influence it.
        let input = msvos_core::data::SequenceInput {
            frames: &seq.frames[..=a.frame],
            ..seq.input()
        };
        let run = run_sequence(&ckpt.params, input, &cfg)?;
        for (k, frames) in run.objects.iter().enumerate() {
            write_heatmaps(&out.join(&seq.id), k + 1, &frames[a.frame])?;
        }
    }
    println!("wrote heatmaps to {}", out.display());
    Ok(())
}
