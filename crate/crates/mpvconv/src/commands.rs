//! The five commands behind the CLI, exposed as library functions so tests
//! and examples can drive them directly. Exit-code policy: validation and
//! i/o problems map to 1, numerical failures (NaN loss, gradient-check
//! failure) to 2.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::Rng;

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::config::{DatasetKind, EvalSplit, RunConfig};
use crate::data::{generate_synthetic, load_dataset_dir, Dataset, SyntheticSpec};
use crate::error::{Error, Result};
use crate::gradcheck::{gradient_suite, SuiteRow, DEFAULT_SEEDS, DEFAULT_STEP, DEFAULT_TOL};
use crate::layer::CombinationMode;
use crate::model::{evaluate, train, EvalReport, LayerKind, Mpvcnn, MpvcnnConfig};
use crate::nn::ops::{conv3d, pointwise_linear};
use crate::nn::{seeded_rng, Mode};
use crate::tensor::Tensor;
use crate::voxel::{devoxelize_trilinear, scale_coords, voxelize_avg};

fn split_seed(base: u64, split: &str) -> u64 {
    seeded_rng(base, split).random()
}

/// Materialize the (train, val) datasets described by a run config.
pub fn build_datasets(rc: &RunConfig) -> Result<(Dataset<f32>, Dataset<f32>)> {
    match rc.dataset.kind {
        DatasetKind::Synthetic => {
            let train_spec = SyntheticSpec {
                n_samples: rc.dataset.train_samples,
                points_per_cloud: rc.dataset.points_per_cloud,
                noise_sigma: rc.dataset.noise_sigma,
            };
            let val_spec = SyntheticSpec {
                n_samples: rc.dataset.val_samples,
                ..train_spec.clone()
            };
            Ok((
                generate_synthetic(&train_spec, split_seed(rc.dataset.seed, "train-split"))?,
                generate_synthetic(&val_spec, split_seed(rc.dataset.seed, "val-split"))?,
            ))
        }
        DatasetKind::Dir => {
            let train_dir = rc.dataset.train_dir.as_ref().ok_or_else(|| {
                Error::InvalidArgument("dataset.train_dir is required to train".into())
            })?;
            let val_dir = rc.dataset.val_dir.as_ref().ok_or_else(|| {
                Error::InvalidArgument("dataset.val_dir is required to train".into())
            })?;
            Ok((load_dataset_dir(train_dir)?, load_dataset_dir(val_dir)?))
        }
    }
}

/// Path of the metrics log written next to a checkpoint.
pub fn metrics_log_path(checkpoint: &Path) -> PathBuf {
    PathBuf::from(format!("{}.log", checkpoint.display()))
}

/// Train per config, write the checkpoint and a tab-separated metrics log
/// (`epoch  loss  val_miou  val_macc`, one line per completed epoch).
pub fn cmd_train(config_path: &Path, out: &Path, seed_override: Option<u64>) -> Result<()> {
    let mut rc = RunConfig::load(config_path)?;
    if let Some(seed) = seed_override {
        rc.train.seed = seed;
    }
    let (train_set, val_set) = build_datasets(&rc)?;
    let mut model = Mpvcnn::<f32>::build(rc.model.clone(), rc.train.seed)?;
    let outcome = train(&mut model, &train_set, &val_set, &rc.train)?;

    save_checkpoint(
        out,
        &mut model,
        &outcome.adam,
        outcome.epochs_run as u64,
        &outcome.rng,
    )?;

    let mut log = String::new();
    for m in &outcome.metrics {
        writeln!(
            log,
            "{}\t{:.6}\t{:.6}\t{:.6}",
            m.epoch, m.train_loss, m.val_miou, m.val_macc
        )
        .expect("string write");
    }
    let log_path = metrics_log_path(out);
    std::fs::write(&log_path, &log).map_err(|e| Error::io(&log_path, e))?;

    let last = outcome.metrics.last().expect("at least one epoch");
    println!(
        "trained {} epochs: loss {:.6}, val mIoU {:.6}, val mAcc {:.6}",
        outcome.epochs_run, last.train_loss, last.val_miou, last.val_macc
    );
    println!("checkpoint: {}", out.display());
    println!("metrics log: {}", log_path.display());
    Ok(())
}

/// Format an evaluation report as the text the eval command prints.
pub fn format_eval_report(report: &EvalReport, part_names: Option<&[String]>) -> String {
    let mut out = String::new();
    writeln!(out, "shapes evaluated: {}", report.num_shapes).unwrap();
    writeln!(out, "mIoU: {:.6}", report.miou).unwrap();
    writeln!(out, "mAcc: {:.6}", report.macc).unwrap();
    writeln!(out, "accuracy: {:.6}", report.accuracy).unwrap();
    writeln!(out, "{:<12} {:>10} {:>10}", "class", "IoU", "recall").unwrap();
    for (cls, (iou, recall)) in report
        .per_class_iou
        .iter()
        .zip(&report.per_class_recall)
        .enumerate()
    {
        let name = part_names
            .and_then(|names| names.get(cls).cloned())
            .unwrap_or_else(|| format!("part{cls}"));
        let recall_text = if recall.is_nan() {
            "n/a".to_string()
        } else {
            format!("{recall:.6}")
        };
        writeln!(out, "{name:<12} {iou:>10.6} {recall_text:>10}").unwrap();
    }
    out
}

/// Evaluate a checkpoint on the dataset named by the config's `eval.split`.
pub fn cmd_eval(checkpoint: &Path, config_path: &Path, out: Option<&Path>) -> Result<EvalReport> {
    let rc = RunConfig::load(config_path)?;
    let mut loaded = load_checkpoint::<f32>(checkpoint)?;
    let set = match (rc.dataset.kind, rc.eval_split) {
        (DatasetKind::Synthetic, EvalSplit::Train) => build_datasets(&rc)?.0,
        (DatasetKind::Synthetic, EvalSplit::Val) => build_datasets(&rc)?.1,
        (DatasetKind::Dir, EvalSplit::Train) => {
            let dir = rc.dataset.train_dir.as_ref().ok_or_else(|| {
                Error::InvalidArgument("dataset.train_dir is required for eval.split=train".into())
            })?;
            load_dataset_dir(dir)?
        }
        (DatasetKind::Dir, EvalSplit::Val) => {
            let dir = rc.dataset.val_dir.as_ref().ok_or_else(|| {
                Error::InvalidArgument("dataset.val_dir is required for eval.split=val".into())
            })?;
            load_dataset_dir(dir)?
        }
    };
    let report = evaluate(&mut loaded.model, &set)?;
    let text = format_eval_report(&report, set.part_names.as_deref());
    print!("{text}");
    if let Some(path) = out {
        std::fs::write(path, &text).map_err(|e| Error::io(path, e))?;
    }
    Ok(report)
}

/// Format the gradient-suite rows as a fixed-width table.
pub fn format_gradcheck_report(rows: &[SuiteRow], seeds: &[u64]) -> String {
    let mut out = String::new();
    writeln!(
        out,
        "{:<28} {:>14} {:>8}   (tol {DEFAULT_TOL:.0e}, step {DEFAULT_STEP:.0e}, {} seeds)",
        "op",
        "max rel err",
        "status",
        seeds.len()
    )
    .unwrap();
    for row in rows {
        writeln!(
            out,
            "{:<28} {:>14.3e} {:>8}",
            row.name,
            row.max_relative_error,
            if row.passed { "ok" } else { "FAIL" }
        )
        .unwrap();
    }
    out
}

/// Run the gradient suite; a failure is a numerical error (exit code 2).
pub fn cmd_gradcheck(seed_override: Option<u64>, out: Option<&Path>) -> Result<()> {
    let seeds: Vec<u64> = match seed_override {
        Some(base) => (1..=5).map(|i| base.wrapping_add(i)).collect(),
        None => DEFAULT_SEEDS.to_vec(),
    };
    let rows = gradient_suite(&seeds, DEFAULT_STEP, DEFAULT_TOL)?;
    let text = format_gradcheck_report(&rows, &seeds);
    print!("{text}");
    if let Some(path) = out {
        std::fs::write(path, &text).map_err(|e| Error::io(path, e))?;
    }
    if let Some(bad) = rows.iter().find(|r| !r.passed) {
        return Err(Error::GradCheckFailed {
            op: bad.name.clone(),
            max_rel_err: bad.max_relative_error,
        });
    }
    Ok(())
}

/// One ablation run: a named configuration variant with its desk-scale
/// result and, where published, the full-scale reference mIoU.
#[derive(Clone, Debug)]
pub struct AblateRow {
    pub name: String,
    pub val_miou: f64,
    pub param_count: usize,
    pub reference_miou: Option<f64>,
}

/// Published full-scale ShapeNet mIoU for the combination modes A..H. These
/// come from half-width full-dataset GPU training and are shown for
/// orientation only; desk-scale runs are not comparable.
const REFERENCE_MODE_MIOU: [f64; 8] = [85.39, 85.50, 85.43, 85.58, 85.46, 85.54, 85.76, 85.57];
const REFERENCE_FUSION_OFF: f64 = 85.50;
const REFERENCE_ONE_CONV_OFF: f64 = 85.72;
const REFERENCE_RESOLUTION_1_5X: f64 = 85.55;
const REFERENCE_INIT_DEPTH_3: f64 = 85.33;

/// Expand the requested variant groups into named model configurations.
pub fn ablate_variants(rc: &RunConfig) -> Vec<(String, MpvcnnConfig, Option<f64>)> {
    let mut variants = Vec::new();
    for group in &rc.ablate_variants {
        match group.as_str() {
            "modes" => {
                for (i, mode) in CombinationMode::ALL.into_iter().enumerate() {
                    let mut cfg = rc.model.clone();
                    cfg.combination_mode = mode;
                    cfg.fusion_enabled = rc.model.fusion_enabled || mode.needs_fusion();
                    variants.push((
                        format!("mode_{mode}"),
                        cfg,
                        Some(REFERENCE_MODE_MIOU[i]),
                    ));
                }
            }
            "fusion" => {
                let mut cfg = rc.model.clone();
                cfg.fusion_enabled = false;
                cfg.combination_mode = CombinationMode::B;
                variants.push(("fusion_off".to_string(), cfg, Some(REFERENCE_FUSION_OFF)));
            }
            "one_conv" => {
                let mut cfg = rc.model.clone();
                cfg.one_by_one_conv = false;
                variants.push((
                    "one_by_one_off".to_string(),
                    cfg,
                    Some(REFERENCE_ONE_CONV_OFF),
                ));
            }
            "resolution" => {
                let mut cfg = rc.model.clone();
                for spec in &mut cfg.layer_specs {
                    if spec.kind == LayerKind::MpvConv {
                        spec.resolution = ((spec.resolution as f64) * 1.5).round() as usize;
                    }
                }
                variants.push((
                    "resolution_1.5x".to_string(),
                    cfg,
                    Some(REFERENCE_RESOLUTION_1_5X),
                ));
            }
            "depth" => {
                let mut cfg = rc.model.clone();
                cfg.init_conv_depth = 3;
                variants.push((
                    "init_depth_3".to_string(),
                    cfg,
                    Some(REFERENCE_INIT_DEPTH_3),
                ));
            }
            other => unreachable!("validated ablate group {other}"),
        }
    }
    variants
}

/// Train every requested variant on the config's dataset and collect the
/// best validation mIoU each reaches.
pub fn run_ablation(rc: &RunConfig) -> Result<Vec<AblateRow>> {
    let (train_set, val_set) = build_datasets(rc)?;
    let mut rows = Vec::new();
    for (name, cfg, reference) in ablate_variants(rc) {
        let mut model = Mpvcnn::<f32>::build(cfg, rc.train.seed)?;
        let outcome = train(&mut model, &train_set, &val_set, &rc.train)?;
        let best = outcome
            .metrics
            .iter()
            .map(|m| m.val_miou)
            .fold(f64::NEG_INFINITY, f64::max);
        rows.push(AblateRow {
            name,
            val_miou: best,
            param_count: model.parameter_count(),
            reference_miou: reference,
        });
    }
    Ok(rows)
}

pub fn format_ablation_table(rows: &[AblateRow]) -> String {
    let mut out = String::new();
    writeln!(
        out,
        "{:<18} {:>12} {:>10} {:>16}",
        "variant", "val mIoU", "params", "reference mIoU"
    )
    .unwrap();
    for row in rows {
        let reference = row
            .reference_miou
            .map(|v| format!("{v:.2}"))
            .unwrap_or_else(|| "-".to_string());
        writeln!(
            out,
            "{:<18} {:>12.6} {:>10} {:>16}",
            row.name, row.val_miou, row.param_count, reference
        )
        .unwrap();
    }
    writeln!(
        out,
        "note: reference mIoU values are published full-scale ShapeNet results for the"
    )
    .unwrap();
    writeln!(
        out,
        "corresponding configurations; they orient the table and are NOT expectations"
    )
    .unwrap();
    writeln!(out, "for these desk-scale runs.").unwrap();
    out
}

pub fn cmd_ablate(config_path: &Path, out: Option<&Path>) -> Result<()> {
    let rc = RunConfig::load(config_path)?;
    let rows = run_ablation(&rc)?;
    let text = format_ablation_table(&rows);
    print!("{text}");
    if let Some(path) = out {
        std::fs::write(path, &text).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

/// One benchmarked kernel: median wall time over the repetitions, relative
/// spread, and the approximate working set.
#[derive(Clone, Debug)]
pub struct BenchRow {
    pub name: String,
    pub median_ms: f64,
    pub spread_pct: f64,
    pub working_set_bytes: usize,
}

fn time_median(reps: usize, mut f: impl FnMut()) -> (f64, f64) {
    let mut times = Vec::with_capacity(reps);
    for _ in 0..reps {
        let start = Instant::now();
        f();
        times.push(start.elapsed().as_secs_f64() * 1e3);
    }
    times.sort_by(f64::total_cmp);
    let median = times[times.len() / 2];
    let spread = if median > 0.0 {
        (times[times.len() - 1] - times[0]) / median * 100.0
    } else {
        0.0
    };
    (median, spread)
}

/// Benchmark the bridging and conv kernels at the given sizes.
pub fn run_bench(points: usize, channels: usize, resolution: usize, reps: usize) -> Result<Vec<BenchRow>> {
    let mut rng = seeded_rng(0, "bench");
    let coords_hat: Vec<[f64; 3]> = (0..points)
        .map(|_| {
            [
                rng.random::<f64>(),
                rng.random::<f64>(),
                rng.random::<f64>(),
            ]
        })
        .collect();
    let features = Tensor::<f32>::from_fn(&[points, channels], |_| rng.random::<f32>());
    let f32_bytes = 4usize;

    let mut rows = Vec::new();

    let scaled = scale_coords(&coords_hat, resolution)?;
    let (median, spread) = time_median(reps, || {
        let _ = voxelize_avg(&scaled, &features).unwrap();
    });
    rows.push(BenchRow {
        name: format!("voxelize_avg n={points} c={channels} r={resolution}"),
        median_ms: median,
        spread_pct: spread,
        working_set_bytes: (points * channels + channels * resolution.pow(3)) * f32_bytes,
    });

    let grid = voxelize_avg(&scaled, &features)?;
    let (median, spread) = time_median(reps, || {
        let _ = devoxelize_trilinear(&grid, &scaled).unwrap();
    });
    rows.push(BenchRow {
        name: format!("devoxelize_trilinear n={points} c={channels} r={resolution}"),
        median_ms: median,
        spread_pct: spread,
        working_set_bytes: (points * channels + channels * resolution.pow(3)) * f32_bytes,
    });

    for r in [resolution, resolution * 2] {
        let input = Tensor::<f32>::from_fn(&[1, channels, r, r, r], |_| rng.random::<f32>());
        let weight =
            Tensor::<f32>::from_fn(&[channels, channels, 3, 3, 3], |_| rng.random::<f32>());
        let bias = Tensor::<f32>::zeros(&[channels]);
        let (median, spread) = time_median(reps, || {
            let _ = conv3d(&input, &weight, &bias, 1).unwrap();
        });
        rows.push(BenchRow {
            name: format!("conv3d k=3 c={channels} r={r}"),
            median_ms: median,
            spread_pct: spread,
            working_set_bytes: (2 * channels * r.pow(3) + channels * channels * 27) * f32_bytes,
        });
    }

    let input = Tensor::<f32>::from_fn(&[1, channels, points], |_| rng.random::<f32>());
    let weight = Tensor::<f32>::from_fn(&[channels, channels], |_| rng.random::<f32>());
    let bias = Tensor::<f32>::zeros(&[channels]);
    let (median, spread) = time_median(reps, || {
        let _ = pointwise_linear(&input, &weight, &bias).unwrap();
    });
    rows.push(BenchRow {
        name: format!("pointwise_linear n={points} c={channels}"),
        median_ms: median,
        spread_pct: spread,
        working_set_bytes: (2 * channels * points + channels * channels) * f32_bytes,
    });

    let mut layer = crate::layer::MpvConvLayer::<f32>::new(
        "bench",
        crate::layer::MpvConvConfig::new(channels, channels, resolution),
        0,
    )?;
    let coords_batch = vec![coords_hat.clone()];
    let layer_input = Tensor::<f32>::from_fn(&[1, channels, points], |_| rng.random::<f32>());
    let (median, spread) = time_median(reps, || {
        let _ = layer
            .forward(&coords_batch, &layer_input, Mode::Eval)
            .unwrap();
    });
    rows.push(BenchRow {
        name: format!("mpvconv_layer n={points} c={channels} r={resolution}"),
        median_ms: median,
        spread_pct: spread,
        working_set_bytes: (2 * channels * points + 8 * channels * resolution.pow(3))
            * f32_bytes,
    });

    Ok(rows)
}

pub fn format_bench_table(rows: &[BenchRow]) -> String {
    let mut out = String::new();
    writeln!(
        out,
        "{:<44} {:>12} {:>10} {:>14}",
        "kernel", "median ms", "spread %", "working set"
    )
    .unwrap();
    for row in rows {
        writeln!(
            out,
            "{:<44} {:>12.3} {:>10.1} {:>11} KiB",
            row.name,
            row.median_ms,
            row.spread_pct,
            row.working_set_bytes / 1024
        )
        .unwrap();
    }
    writeln!(
        out,
        "note: times are host-dependent trends, not contract values."
    )
    .unwrap();
    out
}

/// Benchmark with sizes from the config (first point-voxel layer and the
/// dataset point count) or with desk-scale defaults.
pub fn cmd_bench(config_path: Option<&Path>, out: Option<&Path>) -> Result<()> {
    let (points, channels, resolution) = match config_path {
        Some(path) => {
            let rc = RunConfig::load(path)?;
            let spec = rc
                .model
                .layer_specs
                .iter()
                .find(|s| s.kind == LayerKind::MpvConv);
            match spec {
                Some(spec) => (
                    rc.dataset.points_per_cloud,
                    spec.out_channels,
                    spec.resolution,
                ),
                None => (rc.dataset.points_per_cloud, 32, 16),
            }
        }
        None => (512, 32, 16),
    };
    let rows = run_bench(points, channels, resolution, 5)?;
    let text = format_bench_table(&rows);
    print!("{text}");
    if let Some(path) = out {
        std::fs::write(path, &text).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}
