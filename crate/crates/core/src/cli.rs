//! Verb implementations behind the `stela` binary.
//!
//! Every verb writes into `--out`: `report.csv` or `report.json` (plus
//! `report.schema.json`), `timings.csv` with wall-clock measurements, and
//! verb-specific files (`metrics_per_class.csv`, `model.ckpt`,
//! `neighborhood.csv`, `prepared.csv`, voxel caches).

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::bench::{bench_attention, loglog_slope};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::experiment::{
    class_table, config_echo, expand_grid, load_config_map, load_dataset, model_config, run_ablation, run_train,
    ConfigMap, DataSource, ExperimentConfig,
};
use crate::kitti_io::{write_sequence, LabelArray};
use crate::metrics::write_metrics_csv;
use crate::model::SegmentationModel;
use crate::report::{reports_to_json, write_reports_csv, RunReport, Timings, REPORT_SCHEMA};
use crate::sparse_grid::SparseVoxelSet;
use crate::synthetic::{motion_ambiguous_scenes, CLASS_NAMES};
use crate::train::evaluate;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum OutputFormat {
    #[default]
    Csv,
    Json,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CliOptions {
    pub config: Option<PathBuf>,
    pub seed: Option<u64>,
    pub out: PathBuf,
    pub format: OutputFormat,
}

fn config_map(opts: &CliOptions) -> Result<ConfigMap> {
    let mut map = match &opts.config {
        Some(p) => load_config_map(p)?,
        None => ConfigMap::new(),
    };
    if let Some(s) = opts.seed {
        map.insert("seed".into(), s.to_string());
    }
    Ok(map)
}

fn config(opts: &CliOptions) -> Result<ExperimentConfig> {
    ExperimentConfig::from_map(&config_map(opts)?)
}

fn out_path(opts: &CliOptions, name: &str) -> Result<PathBuf> {
    fs::create_dir_all(&opts.out).map_err(|e| Error::io(&opts.out, e))?;
    Ok(opts.out.join(name))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn write_outputs(opts: &CliOptions, reports: &[RunReport], timings: &Timings) -> Result<()> {
    match opts.format {
        OutputFormat::Csv => {
            let mut buf = Vec::new();
            write_reports_csv(&mut buf, reports).expect("writing to a Vec");
            write_file(&out_path(opts, "report.csv")?, &buf)?;
        }
        OutputFormat::Json => {
            write_file(&out_path(opts, "report.json")?, reports_to_json(reports).as_bytes())?;
            write_file(&out_path(opts, "report.schema.json")?, REPORT_SCHEMA.as_bytes())?;
        }
    }
    let mut buf = Vec::new();
    timings.write_csv(&mut buf).expect("writing to a Vec");
    write_file(&out_path(opts, "timings.csv")?, &buf)
}

fn write_per_class(opts: &CliOptions, report: &RunReport) -> Result<()> {
    let (Some(mean), false) = (report.eval_miou, report.eval_iou.is_empty()) else {
        return Ok(());
    };
    let iou = crate::metrics::IouReport {
        per_class: report.eval_iou.clone(),
        mean,
    };
    let mut buf = Vec::new();
    write_metrics_csv(&mut buf, &report.class_names, &iou).expect("writing to a Vec");
    write_file(&out_path(opts, "metrics_per_class.csv")?, &buf)
}

/// Trains per the config, evaluates on both splits and saves `model.ckpt`.
pub fn train_toy(opts: &CliOptions) -> Result<RunReport> {
    let cfg = config(opts)?;
    let r = run_train(&cfg, "train-toy")?;
    r.model.to_checkpoint().save(out_path(opts, "model.ckpt")?)?;
    write_per_class(opts, &r.report)?;
    write_outputs(opts, std::slice::from_ref(&r.report), &r.timings)?;
    Ok(r.report)
}

/// Runs every entry of the config grid.
pub fn ablate(opts: &CliOptions) -> Result<Vec<RunReport>> {
    let grid = expand_grid(&config_map(opts)?)
        .iter()
        .map(ExperimentConfig::from_map)
        .collect::<Result<Vec<_>>>()?;
    let (reports, timings) = run_ablation(&grid);
    write_outputs(opts, &reports, &timings)?;
    Ok(reports)
}

/// Evaluates a saved checkpoint on the held-out split.
pub fn eval(opts: &CliOptions) -> Result<RunReport> {
    let cfg = config(opts)?;
    let ckpt_path = match &cfg.checkpoint {
        Some(p) => p.clone(),
        None => opts.out.join("model.ckpt"),
    };
    let t0 = Instant::now();
    let ds = load_dataset(&cfg)?;
    let mut timings = Timings::default();
    timings.push("prepare", t0.elapsed());
    let table = class_table(&ds)?;
    let model =
        SegmentationModel::from_checkpoint(Checkpoint::load(&ckpt_path)?, &model_config(&cfg, ds.class_names.len()))?;
    let t0 = Instant::now();
    let (_, iou) = evaluate(&model, &ds.eval, &table)?;
    timings.push("evaluate", t0.elapsed());
    let report = RunReport {
        class_names: ds.class_names.clone(),
        eval_iou: iou.per_class,
        eval_miou: Some(iou.mean),
        param_count: model.param_count() as u64,
        ..RunReport::new("eval", config_echo(&cfg))
    };
    write_per_class(opts, &report)?;
    write_outputs(opts, std::slice::from_ref(&report), &timings)?;
    Ok(report)
}

/// Benchmarks local against global attention; slopes go to `timings.csv`.
pub fn bench(opts: &CliOptions) -> Result<RunReport> {
    let cfg = config(opts)?;
    let b = &cfg.bench;
    let (rows, measured) = bench_attention(
        &b.n,
        &b.k,
        b.feature_dim,
        b.key_dim,
        b.repeats,
        b.max_flops,
        &cfg.grid,
        cfg.seed,
    )?;
    let mut timings = Timings::default();
    for t in &measured {
        timings
            .entries
            .push((format!("local.n{}.k{}", t.n, t.k), t.local_seconds));
        timings
            .entries
            .push((format!("global.n{}.k{}", t.n, t.k), t.global_seconds));
    }
    for &k in &b.k {
        let pts: Vec<_> = measured.iter().filter(|t| t.k == k).collect();
        if pts.len() >= 2 {
            let ns: Vec<f64> = pts.iter().map(|t| t.n as f64).collect();
            let l: Vec<f64> = pts.iter().map(|t| t.local_seconds).collect();
            let g: Vec<f64> = pts.iter().map(|t| t.global_seconds).collect();
            timings
                .entries
                .push((format!("slope.local.k{k}"), loglog_slope(&ns, &l)));
            timings
                .entries
                .push((format!("slope.global.k{k}"), loglog_slope(&ns, &g)));
        }
    }
    let report = RunReport {
        bench: rows,
        ..RunReport::new("bench", config_echo(&cfg))
    };
    write_outputs(opts, std::slice::from_ref(&report), &timings)?;
    Ok(report)
}

/// Bins every sample, caches the occupied cells of each current frame
/// (feature = points per voxel) and, for synthetic data, also writes the
/// training scenes in KITTI layout under `dataset/`.
pub fn prepare(opts: &CliOptions) -> Result<RunReport> {
    let cfg = config(opts)?;
    let t0 = Instant::now();
    let ds = load_dataset(&cfg)?;
    let mut timings = Timings::default();
    timings.push("prepare", t0.elapsed());
    let mut summary = String::from("split,sample,points,voxels,past_voxels\n");
    let vox_dir = out_path(opts, "voxels")?;
    fs::create_dir_all(&vox_dir).map_err(|e| Error::io(&vox_dir, e))?;
    for (split, samples) in [("train", &ds.train), ("eval", &ds.eval)] {
        for (i, s) in samples.iter().enumerate() {
            let c = &s.current;
            let mut counts = ndarray::Array2::zeros((c.voxels.len(), 1));
            for &v in &c.point_to_voxel {
                counts[[v, 0]] += 1.0;
            }
            let set: SparseVoxelSet = c.voxels.with_features(counts)?;
            let mut buf = Vec::new();
            set.write_to(&mut buf).expect("writing to a Vec");
            write_file(&vox_dir.join(format!("{split}-{i:04}.vox")), &buf)?;
            let past: Vec<String> = s.past.iter().map(|p| p.voxels.len().to_string()).collect();
            summary.push_str(&format!(
                "{split},{i},{},{},{}\n",
                c.points.nrows(),
                c.voxels.len(),
                past.join(";")
            ));
        }
    }
    write_file(&out_path(opts, "prepared.csv")?, summary.as_bytes())?;
    if let DataSource::Synthetic {
        spec,
        train_pairs,
        seed,
        ..
    } = &cfg.data
    {
        let root = out_path(opts, "dataset")?;
        for (i, seq) in motion_ambiguous_scenes(spec, *train_pairs, *seed)?.iter().enumerate() {
            let scans: Vec<_> = seq.iter().map(|f| f.scan.clone()).collect();
            let labels: Vec<_> = seq
                .iter()
                .map(|f| LabelArray {
                    semantic: f.labels.clone(),
                    instance: vec![0; f.labels.len()],
                })
                .collect();
            let poses: Vec<_> = seq.iter().map(|f| f.pose).collect();
            write_sequence(&root, &format!("{i:02}"), &scans, &labels, &poses)?;
        }
        let classmap: String = CLASS_NAMES
            .iter()
            .enumerate()
            .map(|(i, n)| format!("{i} {i} {n}\n"))
            .collect();
        write_file(&root.join("synthetic.classmap"), classmap.as_bytes())?;
    }
    let report = RunReport {
        class_names: ds.class_names.clone(),
        ..RunReport::new("prepare", config_echo(&cfg))
    };
    write_outputs(opts, std::slice::from_ref(&report), &timings)?;
    Ok(report)
}

/// Writes the neighborhood table of training sample `sample` to
/// `neighborhood.csv`.
pub fn dump_neighborhood(opts: &CliOptions, sample: usize) -> Result<RunReport> {
    let cfg = config(opts)?;
    let ds = load_dataset(&cfg)?;
    let s = ds
        .train
        .get(sample)
        .ok_or_else(|| Error::Config(format!("sample {sample} out of range ({} samples)", ds.train.len())))?;
    let mut buf = Vec::new();
    s.tables.write_csv(&mut buf).expect("writing to a Vec");
    write_file(&out_path(opts, "neighborhood.csv")?, &buf)?;
    let report = RunReport::new("dump-neighborhood", config_echo(&cfg));
    write_outputs(opts, std::slice::from_ref(&report), &Timings::default())?;
    Ok(report)
}
