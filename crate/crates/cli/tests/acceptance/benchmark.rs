use std::time::{Duration, Instant};

use msvos_core::data::{generate_dataset, SyntheticConfig, VideoSequence};
use msvos_core::metrics::{score_sequence, summarize, Summary, DEFAULT_TOLERANCE};
use msvos_core::pipeline::{offline_train, run_sequence, AdaptationRecord, FusionMode, RunConfig};
use rayon::prelude::*;

use crate::common::Outcome;

pub const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];
const TRAIN: usize = 10;
const HELD_OUT: usize = 5;
const MODES: [FusionMode; 4] = [FusionMode::Attention, FusionMode::Average, FusionMode::Small, FusionMode::Large];
/// One point on the 0-100 scale the metrics are usually reported in.
const POINT: f64 = 0.01;
const ADAPT_STEPS: [usize; 3] = [0, 1, 3];
const DRIFT_SCALE_RATE: f64 = 0.02;
const DRIFT_NOISE: f64 = 0.004;

#[derive(Debug, Clone, Copy, PartialEq)]
enum Suite {
    Plain,
    Drift,
}

fn benchmark(suite: Suite, seed: u64) -> (Vec<VideoSequence>, Vec<VideoSequence>) {
    let mut cfg = SyntheticConfig {
        sequences: TRAIN + HELD_OUT,
        seed,
        ..SyntheticConfig::default()
    };
    if suite == Suite::Drift {
        cfg.scale_rate = DRIFT_SCALE_RATE;
        cfg.noise_drift = DRIFT_NOISE;
    }
    let mut data = generate_dataset(&cfg).unwrap();
    let test = data.split_off(TRAIN);
    (data, test)
}

struct Job {
    suite: Suite,
    fusion: FusionMode,
    beta: f64,
    seed: u64,
}

struct JobResult {
    /// Held-out summary per adaptation step count.
    summaries: Vec<(usize, Summary)>,
    records: Vec<(usize, Vec<AdaptationRecord>)>,
    elapsed: Duration,
}

fn run_job(job: &Job) -> JobResult {
    let start = Instant::now();
    let (train, test) = benchmark(job.suite, job.seed);
    let mut cfg = RunConfig {
        beta: job.beta,
        seed: job.seed,
        ..RunConfig::default()
    };
    cfg.model.fusion = job.fusion;
    let params = offline_train(&train, &cfg).unwrap().params;
    let steps: &[usize] = if job.suite == Suite::Drift { &ADAPT_STEPS } else { &[0] };
    let mut summaries = Vec::new();
    let mut records = Vec::new();
    for &s in steps {
        let run_cfg = RunConfig {
            adaptation_steps: s,
            ..cfg.clone()
        };
        let mut scores = Vec::new();
        let mut recs = Vec::new();
        for seq in &test {
            let run = run_sequence(&params, seq.input(), &run_cfg).unwrap();
            scores.push(score_sequence(&seq.id, &run.masks, &seq.masks, seq.object_count, DEFAULT_TOLERANCE).unwrap());
            recs.extend(run.adaptation);
        }
        summaries.push((s, summarize(&scores)));
        records.push((s, recs));
    }
    JobResult {
        summaries,
        records,
        elapsed: start.elapsed(),
    }
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = v.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

pub struct BenchmarkOutcomes {
    pub fusion: Outcome,
    pub variance: Outcome,
    pub adaptation: Outcome,
}

pub fn run() -> BenchmarkOutcomes {
    let mut jobs = Vec::new();
    for &seed in &SEEDS {
        for fusion in MODES {
            jobs.push(Job {
                suite: Suite::Plain,
                fusion,
                beta: 0.0,
                seed,
            });
        }
        jobs.push(Job {
            suite: Suite::Plain,
            fusion: FusionMode::Attention,
            beta: 1.0,
            seed,
        });
        jobs.push(Job {
            suite: Suite::Drift,
            fusion: FusionMode::Attention,
            beta: 1.0,
            seed,
        });
    }
    let start = Instant::now();
    let results: Vec<JobResult> = jobs.par_iter().map(run_job).collect();
    let total = start.elapsed();

    println!("    {:<6} {:<9} {:>4} {:>4} {:>5} {:>8} {:>8} {:>8} {:>8} {:>7}", "suite", "fusion", "beta", "seed", "steps", "J", "F", "J&F", "J-Decay", "time");
    for (job, r) in jobs.iter().zip(&results) {
        for (steps, s) in &r.summaries {
            println!(
                "    {:<6} {:<9} {:>4} {:>4} {:>5} {:>8.4} {:>8.4} {:>8.4} {:>8.4} {:>6.0}s",
                format!("{:?}", job.suite).to_lowercase(),
                job.fusion.as_str(),
                job.beta,
                job.seed,
                steps,
                s.j_mean,
                s.f_mean,
                s.jf,
                s.j_decay,
                r.elapsed.as_secs_f64()
            );
        }
    }
    let find = |suite: Suite, fusion: FusionMode, beta: f64, seed: u64| -> &JobResult {
        let i = jobs
            .iter()
            .position(|j| j.suite == suite && j.fusion == fusion && j.beta == beta && j.seed == seed)
            .unwrap();
        &results[i]
    };
    let base = |r: &JobResult| -> Summary { r.summaries[0].1 };

    // Fusion modes, mean held-out J&F over seeds.
    let mode_jf: Vec<(FusionMode, f64)> = MODES
        .iter()
        .map(|&m| (m, mean(SEEDS.iter().map(|&s| base(find(Suite::Plain, m, 0.0, s)).jf))))
        .collect();
    let jf = |m: FusionMode| mode_jf.iter().find(|(k, _)| *k == m).unwrap().1;
    let best_single = jf(FusionMode::Small).max(jf(FusionMode::Large));
    let attention_wins = jf(FusionMode::Attention) >= jf(FusionMode::Average);
    let average_close = jf(FusionMode::Average) >= best_single - 0.5 * POINT;
    let fusion = Outcome::new(
        attention_wins && average_close,
        format!(
            "mean J&F attention {:.4}, average {:.4}, small {:.4}, large {:.4}; attention >= average: {}; average >= best single - 0.5 pt: {}; {:.0}s for all benchmark runs",
            jf(FusionMode::Attention),
            jf(FusionMode::Average),
            jf(FusionMode::Small),
            jf(FusionMode::Large),
            attention_wins,
            average_close,
            total.as_secs_f64()
        ),
    );

    // Variance weighting, held-out F of attention fusion.
    let deltas: Vec<f64> = SEEDS
        .iter()
        .map(|&s| {
            base(find(Suite::Plain, FusionMode::Attention, 1.0, s)).f_mean
                - base(find(Suite::Plain, FusionMode::Attention, 0.0, s)).f_mean
        })
        .collect();
    let mean_delta = mean(deltas.iter().copied());
    let improved = deltas.iter().filter(|&&d| d > 0.0).count();
    let variance = Outcome::new(
        mean_delta >= -0.2 * POINT && improved >= 3,
        format!(
            "F change with beta = 1: mean {:+.2} pt, per seed [{}], improved on {improved}/5",
            mean_delta / POINT,
            deltas.iter().map(|d| format!("{:+.2}", d / POINT)).collect::<Vec<_>>().join(", ")
        ),
    );

    // Adaptation on the drifting suite.
    let decay_at = |steps: usize| {
        mean(SEEDS.iter().map(|&s| {
            let r = find(Suite::Drift, FusionMode::Attention, 1.0, s);
            r.summaries.iter().find(|(k, _)| *k == steps).unwrap().1.j_decay
        }))
    };
    let d0 = decay_at(0);
    let mut pass = true;
    let mut parts = vec![format!("J-Decay steps 0: {d0:.4}")];
    for steps in [1, 3] {
        let d = decay_at(steps);
        let recs: Vec<AdaptationRecord> = SEEDS
            .iter()
            .flat_map(|&s| {
                let r = find(Suite::Drift, FusionMode::Attention, 1.0, s);
                r.records.iter().find(|(k, _)| *k == steps).unwrap().1.clone()
            })
            .collect();
        let active: Vec<&AdaptationRecord> = recs.iter().filter(|r| r.before > 0.0).collect();
        let lowered = active.iter().filter(|r| r.after < r.before).count();
        let frac = lowered as f64 / active.len().max(1) as f64;
        pass &= d <= d0 && frac >= 0.9 && !active.is_empty();
        parts.push(format!(
            "steps {steps}: J-Decay {d:.4}, online loss lowered on {lowered}/{} frames ({:.1}%)",
            active.len(),
            100.0 * frac
        ));
    }
    let adaptation = Outcome::new(pass, parts.join("; "));
    BenchmarkOutcomes {
        fusion,
        variance,
        adaptation,
    }
}
