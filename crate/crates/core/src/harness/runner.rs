use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;

use super::config::{apply_point, point_tag, ExperimentConfig, SweepPoint};
use crate::error::{IkeError, Result};
use crate::eval::MetricsReport;
use crate::json::{write_atomic, write_json};
use crate::synth::StreamData;
use crate::trainer::{
    run_sequence_with, train_joint_upperbound, CameraOutcome, Hyperparams, SequenceConfig, TrainState, Variant,
};

/// Environment variable capping the number of worker threads.
pub const THREADS_ENV: &str = "IKE_LAB_THREADS";

/// One (seed, variant, order, sweep point) combination.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunPlan {
    pub run_id: String,
    pub seed: u64,
    pub variant: Variant,
    pub order: Vec<usize>,
    pub order_name: Option<String>,
    pub sweep: SweepPoint,
    pub hyper: Hyperparams,
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub plan: RunPlan,
    pub report: MetricsReport,
    pub cameras: Vec<CameraOutcome>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryRow {
    pub variant: Variant,
    pub order: String,
    pub sweep: String,
    pub seeds: Vec<u64>,
    pub fmap_mean: f64,
    pub fmap_std: f64,
    pub mean_map_mean: f64,
    pub mean_map_std: f64,
    pub final_nh_mean: f64,
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub runs: Vec<RunResult>,
    pub summary: Vec<SummaryRow>,
    pub output: PathBuf,
}

fn order_label(order: &[usize], name: &Option<String>) -> String {
    name.clone()
        .unwrap_or_else(|| order.iter().map(|c| c.to_string()).collect::<Vec<_>>().join("-"))
}

/// Expands a validated config into its runs, seeds outermost.
pub fn plan_runs(config: &ExperimentConfig) -> Result<Vec<RunPlan>> {
    config.validate()?;
    let (order, order_name) = config.resolve_order(config.n_cameras()?)?;
    let variants = config.variants.expand()?;
    let points = config.sweep.points();
    let mut plans = Vec::new();
    for &seed in &config.seeds {
        for point in &points {
            for &variant in &variants {
                let mut run_id = format!("{}_{}_s{seed}", variant.name(), order_label(&order, &order_name));
                if !point.is_empty() {
                    run_id.push('_');
                    run_id.push_str(&point_tag(point).replace(',', "_"));
                }
                plans.push(RunPlan {
                    run_id,
                    seed,
                    variant,
                    order: order.clone(),
                    order_name: order_name.clone(),
                    sweep: point.clone(),
                    hyper: apply_point(&config.hyper, point),
                });
            }
        }
    }
    Ok(plans)
}

/// Worker count: `jobs` if given, else the machine's parallelism, capped by
/// the environment variable when it is set.
pub fn worker_count(jobs: Option<usize>) -> Result<usize> {
    let mut n = jobs.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    if let Ok(cap) = std::env::var(THREADS_ENV) {
        let cap: usize = cap
            .trim()
            .parse()
            .map_err(|_| IkeError::Config(format!("{THREADS_ENV} must be a positive integer, got {cap:?}")))?;
        n = n.min(cap);
    }
    if n == 0 {
        return Err(IkeError::Config("worker count must be at least 1".into()));
    }
    Ok(n)
}

#[derive(Serialize)]
struct Checkpoint {
    step: usize,
    camera: usize,
    encoder: crate::encoder::EncoderSnapshot,
    memory: crate::memory::MemorySnapshot,
}

fn run_dir(output: &Path, run_id: &str) -> PathBuf {
    output.join("runs").join(run_id)
}

fn execute_one(
    config: &ExperimentConfig,
    plan: &RunPlan,
    data: &StreamData,
    upper_bound: Option<f64>,
) -> Result<RunResult> {
    let seq = SequenceConfig {
        run_id: plan.run_id.clone(),
        variant: plan.variant,
        order: plan.order.clone(),
        order_name: plan.order_name.clone(),
        hyper: plan.hyper.clone(),
        widths: config.widths.clone(),
        seed: plan.seed,
        gallery: config.gallery,
    };
    let dir = run_dir(&config.output, &plan.run_id);
    let mut observer = |step: usize, state: &TrainState| -> Result<()> {
        if !config.checkpoints {
            return Ok(());
        }
        let ckpt = Checkpoint {
            step,
            camera: plan.order[step],
            encoder: state.historical_encoder.snapshot(),
            memory: state.historical_memory.snapshot(),
        };
        write_json(&dir.join("checkpoints").join(format!("step_{step}.json")), &ckpt)
    };
    let outcome = run_sequence_with(data, &seq, &mut observer)?;
    let report = match upper_bound {
        Some(ub) => outcome.report.with_upper_bound(ub),
        None => outcome.report,
    };
    write_json(&dir.join("metrics.json"), &report)?;
    write_atomic(&dir.join("train_log.csv"), &train_log_csv(&plan.run_id, &outcome.cameras)?)?;
    Ok(RunResult {
        plan: plan.clone(),
        report,
        cameras: outcome.cameras,
    })
}

fn csv_bytes(header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for r in rows {
        w.write_record(&r)?;
    }
    w.into_inner().map_err(|e| IkeError::Io(e.into_error()))
}

fn float(v: f64) -> String {
    format!("{v:.16e}")
}

fn opt_float(v: Option<f64>) -> String {
    v.map(float).unwrap_or_default()
}

/// Per-epoch training log of one run.
pub fn train_log_csv(run_id: &str, cameras: &[CameraOutcome]) -> Result<Vec<u8>> {
    let rows = cameras.iter().flat_map(|c| {
        c.epochs.iter().map(move |e| {
            vec![
                run_id.to_string(),
                c.camera_id.to_string(),
                e.epoch.to_string(),
                float(e.loss.id),
                float(e.loss.id_hist),
                float(e.loss.kd),
                float(e.loss.mkd),
                float(e.loss.total),
                float(e.lr),
            ]
        })
    });
    csv_bytes(&["run_id", "camera", "epoch", "id", "id_hist", "kd", "mkd", "total", "lr"], rows)
}

/// One row per run and camera step.
pub fn metrics_csv(runs: &[RunResult]) -> Result<Vec<u8>> {
    let rows = runs.iter().flat_map(|r| {
        let rep = &r.report;
        (0..rep.per_camera_map.len()).map(move |k| {
            vec![
                rep.run_id.clone(),
                rep.seed.to_string(),
                rep.variant.name().to_string(),
                order_label(&rep.order, &rep.order_name),
                float(rep.hyper.lambda),
                float(rep.hyper.tau),
                float(rep.hyper.omega),
                k.to_string(),
                rep.order[k].to_string(),
                float(rep.per_camera_map[k]),
                rep.nh_trajectory[k].to_string(),
                opt_float(rep.assoc_precision[k]),
                opt_float(rep.forgetting.as_ref().map(|f| f[k])),
            ]
        })
    });
    csv_bytes(
        &[
            "run_id",
            "seed",
            "variant",
            "order",
            "lambda",
            "tau",
            "omega",
            "step",
            "camera",
            "map",
            "n_h",
            "assoc_precision",
            "forgetting",
        ],
        rows,
    )
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Aggregates runs over seeds, one row per (variant, order, sweep point),
/// in first-appearance order.
pub fn summarize(runs: &[RunResult]) -> Vec<SummaryRow> {
    let mut groups: Vec<((Variant, String, String), Vec<&RunResult>)> = Vec::new();
    for r in runs {
        let key = (
            r.plan.variant,
            order_label(&r.plan.order, &r.plan.order_name),
            point_tag(&r.plan.sweep),
        );
        match groups.iter_mut().find(|(k, _)| *k == key) {
            Some((_, v)) => v.push(r),
            None => groups.push((key, vec![r])),
        }
    }
    groups
        .into_iter()
        .map(|((variant, order, sweep), rs)| {
            let fmaps: Vec<f64> = rs.iter().map(|r| r.report.fmap).collect();
            let means: Vec<f64> = rs.iter().map(|r| r.report.mean_map).collect();
            let nh: Vec<f64> = rs
                .iter()
                .map(|r| r.report.nh_trajectory.last().copied().unwrap_or(0) as f64)
                .collect();
            let (fmap_mean, fmap_std) = mean_std(&fmaps);
            let (mean_map_mean, mean_map_std) = mean_std(&means);
            SummaryRow {
                variant,
                order,
                sweep,
                seeds: rs.iter().map(|r| r.plan.seed).collect(),
                fmap_mean,
                fmap_std,
                mean_map_mean,
                mean_map_std,
                final_nh_mean: mean_std(&nh).0,
            }
        })
        .collect()
}

pub fn summary_csv(rows: &[SummaryRow]) -> Result<Vec<u8>> {
    let body = rows.iter().map(|r| {
        vec![
            r.variant.name().to_string(),
            r.order.clone(),
            r.sweep.clone(),
            r.seeds.len().to_string(),
            r.seeds.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(";"),
            float(r.fmap_mean),
            float(r.fmap_std),
            float(r.mean_map_mean),
            float(r.mean_map_std),
            float(r.final_nh_mean),
        ]
    });
    csv_bytes(
        &[
            "variant",
            "order",
            "sweep",
            "n_seeds",
            "seeds",
            "fmap_mean",
            "fmap_std",
            "mean_map_mean",
            "mean_map_std",
            "final_nh_mean",
        ],
        body,
    )
}

#[derive(Serialize)]
struct UpperBoundEntry {
    seed: u64,
    sweep: String,
    map: f64,
}

#[derive(Serialize)]
struct ManifestRun<'a> {
    run_id: &'a str,
    seed: u64,
    variant: Variant,
    order: &'a [usize],
    sweep: &'a SweepPoint,
    metrics: PathBuf,
    train_log: PathBuf,
    checkpoints: Option<PathBuf>,
}

#[derive(Serialize)]
struct Manifest<'a> {
    config: &'a ExperimentConfig,
    metrics_json: &'static str,
    metrics_csv: &'static str,
    summary_csv: &'static str,
    runs: Vec<ManifestRun<'a>>,
    upper_bound: Vec<UpperBoundEntry>,
}

/// Runs every planned combination with at most `workers` threads and writes
/// all artifacts under the configured output directory.
pub fn run_experiment(config: &ExperimentConfig, workers: usize) -> Result<ExperimentOutcome> {
    let plans = plan_runs(config)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| IkeError::Config(format!("cannot start worker pool: {e}")))?;

    let mut data = BTreeMap::new();
    for &seed in &config.seeds {
        data.insert(seed, config.load_data(seed)?);
    }
    let points = config.sweep.points();

    let ub_jobs: Vec<(u64, &SweepPoint)> = if config.upper_bound {
        config.seeds.iter().flat_map(|&s| points.iter().map(move |p| (s, p))).collect()
    } else {
        Vec::new()
    };
    let upper: Vec<(u64, String, f64)> = pool.install(|| {
        ub_jobs
            .par_iter()
            .map(|&(seed, point)| {
                let hyper = apply_point(&config.hyper, point);
                let (_, map) = train_joint_upperbound(&data[&seed], &hyper, &config.widths, seed, config.gallery)?;
                Ok((seed, point_tag(point), map))
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let lookup_ub = |seed: u64, point: &SweepPoint| {
        let tag = point_tag(point);
        upper.iter().find(|(s, t, _)| *s == seed && *t == tag).map(|u| u.2)
    };

    let runs: Vec<RunResult> = pool.install(|| {
        plans
            .par_iter()
            .map(|p| execute_one(config, p, &data[&p.seed], lookup_ub(p.seed, &p.sweep)))
            .collect::<Result<Vec<_>>>()
    })?;

    let out = &config.output;
    let reports: Vec<&MetricsReport> = runs.iter().map(|r| &r.report).collect();
    write_json(&out.join("metrics.json"), &reports)?;
    write_atomic(&out.join("metrics.csv"), &metrics_csv(&runs)?)?;
    let summary = summarize(&runs);
    write_atomic(&out.join("summary.csv"), &summary_csv(&summary)?)?;

    let manifest = Manifest {
        config,
        metrics_json: "metrics.json",
        metrics_csv: "metrics.csv",
        summary_csv: "summary.csv",
        runs: runs
            .iter()
            .map(|r| {
                let dir = Path::new("runs").join(&r.plan.run_id);
                ManifestRun {
                    run_id: &r.plan.run_id,
                    seed: r.plan.seed,
                    variant: r.plan.variant,
                    order: &r.plan.order,
                    sweep: &r.plan.sweep,
                    metrics: dir.join("metrics.json"),
                    train_log: dir.join("train_log.csv"),
                    checkpoints: config.checkpoints.then(|| dir.join("checkpoints")),
                }
            })
            .collect(),
        upper_bound: upper
            .iter()
            .map(|(seed, sweep, map)| UpperBoundEntry {
                seed: *seed,
                sweep: sweep.clone(),
                map: *map,
            })
            .collect(),
    };
    write_json(&out.join("manifest.json"), &manifest)?;
    Ok(ExperimentOutcome {
        runs,
        summary,
        output: out.clone(),
    })
}
