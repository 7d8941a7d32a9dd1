//! Experiment configuration, dataset assembly and the train / ablate / eval
//! runners behind the command-line verbs.
//!
//! Configuration files are flat `key = value` lines with `#` comments. For
//! `ablate`, the keys in [`GRID_KEYS`] may hold comma-separated lists; the
//! grid is their cartesian product in key order.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::kitti_io::{build_tiny_subset, read_labels, read_scan, ClassMap, SequenceManifest};
use crate::losses::ClassTable;
use crate::metrics::IouReport;
use crate::model::{prepare_sample, ModelConfig, Sample, SampleSpec, SegmentationModel};
use crate::neighborhood::KnnOptions;
use crate::report::{RunReport, RunStatus, Timings};
use crate::sparse_grid::GridConfig;
use crate::synthetic::{motion_ambiguous_scenes, MotionSceneSpec, PointCloudFrame, CLASS_NAMES};
use crate::train::{evaluate, train, Schedule};

/// Keys that may carry a list of values in an ablation grid.
pub const GRID_KEYS: [&str; 5] = ["aligned", "k", "mode", "n_past", "seed"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Stela,
    Baseline,
}

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Synthetic {
        spec: MotionSceneSpec,
        train_pairs: usize,
        eval_pairs: usize,
        seed: u64,
    },
    Kitti {
        root: PathBuf,
        train_sequence: String,
        eval_sequence: String,
        stride: usize,
        classmap: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchConfig {
    pub n: Vec<usize>,
    pub k: Vec<usize>,
    pub feature_dim: usize,
    pub key_dim: usize,
    pub repeats: usize,
    /// Sizes whose global FLOP count exceeds this are skipped.
    pub max_flops: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub k: usize,
    pub n_past: usize,
    pub aligned: bool,
    pub wrap_theta: bool,
    pub mode: Mode,
    pub grid: GridConfig,
    pub model: ModelConfig,
    pub schedule: Schedule,
    pub data: DataSource,
    pub bench: BenchConfig,
    pub checkpoint: Option<PathBuf>,
}

/// Raw `key → value` pairs of a configuration file.
pub type ConfigMap = BTreeMap<String, String>;

pub fn parse_config_text(text: &str) -> Result<ConfigMap> {
    let mut map = ConfigMap::new();
    for (no, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", no + 1)))?;
        let k = k.trim().to_string();
        if map.insert(k.clone(), v.trim().to_string()).is_some() {
            return Err(Error::Config(format!("line {}: duplicate key `{k}`", no + 1)));
        }
    }
    Ok(map)
}

pub fn load_config_map(path: impl AsRef<Path>) -> Result<ConfigMap> {
    let path = path.as_ref();
    parse_config_text(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
}

/// Cartesian product over the list-valued [`GRID_KEYS`].
pub fn expand_grid(map: &ConfigMap) -> Vec<ConfigMap> {
    let mut out = vec![map.clone()];
    for key in GRID_KEYS {
        let Some(v) = map.get(key) else { continue };
        let values: Vec<&str> = v.split(',').map(str::trim).collect();
        out = out
            .into_iter()
            .flat_map(|m| {
                values.iter().map(move |val| {
                    let mut m = m.clone();
                    m.insert(key.to_string(), val.to_string());
                    m
                })
            })
            .collect();
    }
    out
}

struct Reader<'a> {
    map: &'a ConfigMap,
    used: std::collections::BTreeSet<&'a str>,
}

impl<'a> Reader<'a> {
    fn raw(&mut self, key: &str) -> Option<&'a str> {
        let (k, v) = self.map.get_key_value(key)?;
        self.used.insert(k.as_str());
        Some(v.as_str())
    }

    fn get<T: std::str::FromStr>(&mut self, key: &str, default: T) -> Result<T> {
        match self.raw(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|_| Error::Config(format!("cannot parse `{key} = {v}`"))),
        }
    }

    fn list(&mut self, key: &str, default: &[usize]) -> Result<Vec<usize>> {
        match self.raw(key) {
            None => Ok(default.to_vec()),
            Some("") => Ok(Vec::new()),
            Some(v) => v
                .split(',')
                .map(|s| {
                    s.trim()
                        .parse()
                        .map_err(|_| Error::Config(format!("cannot parse `{key} = {v}`")))
                })
                .collect(),
        }
    }
}

impl ExperimentConfig {
    /// Builds a config from file pairs; unknown keys are rejected.
    pub fn from_map(map: &ConfigMap) -> Result<Self> {
        let mut r = Reader {
            map,
            used: Default::default(),
        };
        let seed = match r.raw("seed") {
            Some(v) => v
                .parse()
                .map_err(|_| Error::Config(format!("cannot parse `seed = {v}`")))?,
            None => return Err(Error::Config("`seed` is required".into())),
        };
        let d = GridConfig::default();
        let feature_dim: usize = r.get("feature_dim", d.feature_dim)?;
        let grid = GridConfig {
            rho_min: r.get("grid.rho_min", d.rho_min)?,
            rho_max: r.get("grid.rho_max", d.rho_max)?,
            z_min: r.get("grid.z_min", d.z_min)?,
            z_max: r.get("grid.z_max", d.z_max)?,
            h: r.get("grid.h", d.h)?,
            w: r.get("grid.w", d.w)?,
            l: r.get("grid.l", d.l)?,
            feature_dim,
            intensity_scale: r.get("grid.intensity_scale", d.intensity_scale)?,
        };
        grid.validate()?;
        let mode = match r.get("mode", "stela".to_string())?.as_str() {
            "stela" => Mode::Stela,
            "baseline" => Mode::Baseline,
            other => return Err(Error::Config(format!("unknown mode `{other}`"))),
        };
        let key_dim = r.get("key_dim", crate::attention::StelaParams::default_key_dim(feature_dim))?;
        let model = ModelConfig {
            feature_dim,
            encoder_hidden: r.list("encoder_hidden", &[64, 128, 256])?,
            backbone_stages: r.get("backbone_stages", 1)?,
            key_dim,
            key_hidden: r.get("key_hidden", feature_dim)?,
            classes: 0,
        };
        let s = Schedule::default();
        let schedule = Schedule {
            pretrain_epochs: r.get("epochs.pretrain", s.pretrain_epochs)?,
            warmup_epochs: r.get("epochs.warmup", s.warmup_epochs)?,
            finetune_epochs: r.get("epochs.finetune", s.finetune_epochs)?,
            pretrain_lr: r.get("lr.pretrain", s.pretrain_lr)?,
            warmup_lr: r.get("lr.warmup", s.warmup_lr)?,
            finetune_lr: r.get("lr.finetune", s.finetune_lr)?,
            plateau_patience: r.get("plateau.patience", s.plateau_patience)?,
            plateau_factor: r.get("plateau.factor", s.plateau_factor)?,
        };
        let data = match r.get("data", "synthetic".to_string())?.as_str() {
            "synthetic" => {
                let m = MotionSceneSpec::default();
                DataSource::Synthetic {
                    spec: MotionSceneSpec {
                        frames: r.get("synthetic.frames", m.frames)?,
                        ego_speed: r.get("synthetic.ego_speed", m.ego_speed)?,
                        object_speed: r.get("synthetic.object_speed", m.object_speed)?,
                        objects_per_scene: r.get("synthetic.objects", m.objects_per_scene)?,
                        points_per_object: r.get("synthetic.points_per_object", m.points_per_object)?,
                        min_range: r.get("synthetic.min_range", m.min_range)?,
                        max_range: r.get("synthetic.max_range", m.max_range)?,
                        ground_half_extent: r.get("synthetic.ground_half_extent", m.ground_half_extent)?,
                        ground_spacing: r.get("synthetic.ground_spacing", m.ground_spacing)?,
                        ..m
                    },
                    train_pairs: r.get("synthetic.train_pairs", 8)?,
                    eval_pairs: r.get("synthetic.eval_pairs", 4)?,
                    seed: r.get("synthetic.seed", 7)?,
                }
            }
            "kitti" => DataSource::Kitti {
                root: PathBuf::from(
                    r.raw("kitti.root")
                        .ok_or_else(|| Error::Config("`kitti.root` is required for kitti data".into()))?,
                ),
                train_sequence: r.get("kitti.train_sequence", "00".to_string())?,
                eval_sequence: r.get("kitti.eval_sequence", "08".to_string())?,
                stride: r.get("kitti.stride", 10)?,
                classmap: r.raw("kitti.classmap").map(PathBuf::from),
            },
            other => return Err(Error::Config(format!("unknown data source `{other}`"))),
        };
        let bench = BenchConfig {
            n: r.list("bench.n", &[1000, 2000, 4000, 8000])?,
            k: r.list("bench.k", &[16])?,
            feature_dim: r.get("bench.feature_dim", 32)?,
            key_dim: r.get("bench.key_dim", 8)?,
            repeats: r.get("bench.repeats", 3)?,
            max_flops: r.get("bench.max_flops", 50_000_000_000)?,
        };
        let cfg = Self {
            seed,
            k: r.get("k", 16)?,
            n_past: r.get("n_past", 2)?,
            aligned: r.get("aligned", true)?,
            wrap_theta: r.get("wrap_theta", false)?,
            mode,
            grid,
            model,
            schedule,
            data,
            bench,
            checkpoint: r.raw("checkpoint").map(PathBuf::from),
        };
        if let Some(k) = map.keys().find(|k| !r.used.contains(k.as_str())) {
            return Err(Error::Config(format!("unknown config key `{k}`")));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Config("k must be at least 1".into()));
        }
        if self.model.key_dim == 0 || self.model.key_hidden == 0 {
            return Err(Error::Config("key dims must be at least 1".into()));
        }
        if self.bench.repeats == 0 {
            return Err(Error::Config("bench.repeats must be at least 1".into()));
        }
        if !(self.schedule.plateau_factor > 0.0 && self.schedule.plateau_factor <= 1.0) {
            return Err(Error::Config("plateau.factor must be in (0, 1]".into()));
        }
        Ok(())
    }

    pub fn sample_spec(&self) -> SampleSpec {
        SampleSpec {
            n_past: self.n_past,
            k: self.k,
            aligned: self.aligned,
            knn: KnnOptions {
                wrap_theta: self.wrap_theta.then_some(self.grid.w as i32),
            },
        }
    }
}

/// Training and held-out samples plus class names.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub class_names: Vec<String>,
    pub train: Vec<Sample>,
    pub eval: Vec<Sample>,
}

/// Frames of one KITTI-layout sequence, labels remapped to train ids.
pub fn load_kitti_sequence(
    root: &Path,
    sequence: &str,
    stride: usize,
    classmap: &ClassMap,
) -> Result<Vec<PointCloudFrame>> {
    let manifest = build_tiny_subset(&SequenceManifest::discover(root, sequence)?, stride)?;
    if manifest.label_paths.is_empty() {
        return Err(Error::Data(format!("sequence {sequence} has no labels")));
    }
    (0..manifest.len())
        .map(|i| {
            let scan = read_scan(&manifest.scan_paths[i])?;
            let labels = read_labels(&manifest.label_paths[i], scan.len())?;
            Ok(PointCloudFrame {
                labels: classmap.remap_all(&labels),
                scan,
                pose: manifest.poses[i],
            })
        })
        .collect()
}

fn samples_for(
    frames: &[PointCloudFrame],
    times: impl Iterator<Item = usize>,
    cfg: &ExperimentConfig,
    classes: usize,
) -> Result<Vec<Sample>> {
    times
        .map(|t| prepare_sample(frames, t, &cfg.sample_spec(), &cfg.grid, classes))
        .collect()
}

pub fn load_dataset(cfg: &ExperimentConfig) -> Result<Dataset> {
    match &cfg.data {
        DataSource::Synthetic {
            spec,
            train_pairs,
            eval_pairs,
            seed,
        } => {
            let classes = CLASS_NAMES.len();
            let build = |pairs: usize, seed: u64| -> Result<Vec<Sample>> {
                let mut out = Vec::new();
                for seq in motion_ambiguous_scenes(spec, pairs, seed)? {
                    out.extend(samples_for(&seq, std::iter::once(seq.len() - 1), cfg, classes)?);
                }
                Ok(out)
            };
            Ok(Dataset {
                class_names: CLASS_NAMES.iter().map(|s| s.to_string()).collect(),
                train: build(*train_pairs, *seed)?,
                eval: build(*eval_pairs, seed.wrapping_add(1_000_003))?,
            })
        }
        DataSource::Kitti {
            root,
            train_sequence,
            eval_sequence,
            stride,
            classmap,
        } => {
            let map = match classmap {
                Some(p) => ClassMap::load(p)?,
                None => ClassMap::semantic_kitti(),
            };
            let classes = map.num_classes();
            let load = |seq: &str| -> Result<Vec<Sample>> {
                let frames = load_kitti_sequence(root, seq, *stride, &map)?;
                samples_for(&frames, 0..frames.len(), cfg, classes)
            };
            Ok(Dataset {
                class_names: map.class_names().to_vec(),
                train: load(train_sequence)?,
                eval: load(eval_sequence)?,
            })
        }
    }
}

/// Class weights from the training voxel labels.
pub fn class_table(ds: &Dataset) -> Result<ClassTable> {
    let labels: Vec<u16> = ds
        .train
        .iter()
        .flat_map(|s| s.current.voxel_labels.iter().copied())
        .collect();
    ClassTable::inverse_log_frequency(ds.class_names.clone(), &labels, crate::kitti_io::IGNORE_ID)
}

pub fn model_config(cfg: &ExperimentConfig, classes: usize) -> ModelConfig {
    ModelConfig {
        classes,
        ..cfg.model.clone()
    }
}

/// Multiply-adds in the correlation and aggregation steps, counted as two
/// operations each, over every valid neighbor slot of every sample.
pub fn attention_flops(samples: &[Sample], d: usize, dk: usize) -> u64 {
    samples
        .iter()
        .flat_map(|s| s.tables.frames.iter())
        .map(|t| t.neighbor_count.iter().sum::<usize>() as u64 * (2 * dk + 2 * d) as u64)
        .sum()
}

/// Bytes held by the largest sample's gathered keys, values, scores and
/// weights at 64-bit.
pub fn attention_memory_bytes(samples: &[Sample], d: usize, dk: usize) -> u64 {
    samples
        .iter()
        .map(|s| {
            let slots: usize = s.tables.frames.iter().map(|t| t.len() * t.k()).sum();
            (slots * (d + dk + 2) * 8) as u64
        })
        .max()
        .unwrap_or(0)
}

/// Everything a training run produces.
#[derive(Debug, Clone)]
pub struct TrainResult {
    pub report: RunReport,
    pub model: SegmentationModel,
    pub eval_iou: IouReport,
    pub timings: Timings,
}

/// Builds the dataset, trains per the config and evaluates on both splits.
pub fn run_train(cfg: &ExperimentConfig, name: &str) -> Result<TrainResult> {
    let mut timings = Timings::default();
    let t0 = Instant::now();
    let ds = load_dataset(cfg)?;
    timings.push("prepare", t0.elapsed());
    run_train_on(cfg, name, &ds, timings)
}

pub fn run_train_on(cfg: &ExperimentConfig, name: &str, ds: &Dataset, mut timings: Timings) -> Result<TrainResult> {
    let table = class_table(ds)?;
    let mcfg = model_config(cfg, ds.class_names.len());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let init = SegmentationModel::new(&mcfg, &cfg.grid, &mut rng)?;
    let t0 = Instant::now();
    let outcome = train(
        &mcfg,
        init,
        &ds.train,
        &table,
        &cfg.schedule,
        cfg.mode == Mode::Stela,
        cfg.seed,
    )?;
    timings.push("train", t0.elapsed());
    let t0 = Instant::now();
    let (_, train_iou) = evaluate(&outcome.model, &ds.train, &table)?;
    let (_, eval_iou) = evaluate(&outcome.model, &ds.eval, &table)?;
    timings.push("evaluate", t0.elapsed());
    let stela = cfg.mode == Mode::Stela;
    let (d, dk) = (cfg.model.feature_dim, cfg.model.key_dim);
    let report = RunReport {
        name: name.to_string(),
        status: RunStatus::Ok,
        error: None,
        config: config_echo(cfg),
        class_names: ds.class_names.clone(),
        train_iou: train_iou.per_class.clone(),
        train_miou: Some(train_iou.mean),
        eval_iou: eval_iou.per_class.clone(),
        eval_miou: Some(eval_iou.mean),
        epochs: outcome.log,
        attention_flops: if stela { attention_flops(&ds.eval, d, dk) } else { 0 },
        peak_memory_bytes: if stela {
            attention_memory_bytes(&ds.eval, d, dk)
        } else {
            0
        },
        param_count: outcome.model.param_count() as u64,
        bench: Vec::new(),
    };
    Ok(TrainResult {
        report,
        model: outcome.model,
        eval_iou,
        timings,
    })
}

/// One report per grid entry, in grid order. A failing entry is reported
/// as failed and the grid continues.
pub fn run_ablation(grid: &[ExperimentConfig]) -> (Vec<RunReport>, Timings) {
    let mut timings = Timings::default();
    let mut cache: Option<(DataKey, Dataset)> = None;
    let reports = grid
        .iter()
        .enumerate()
        .map(|(i, cfg)| {
            let name = format!("ablate-{i}");
            let key = DataKey::of(cfg);
            let t0 = Instant::now();
            let ds = match &cache {
                Some((k, ds)) if *k == key => Ok(ds.clone()),
                _ => load_dataset(cfg).inspect(|ds| cache = Some((key, ds.clone()))),
            };
            timings.push(&format!("{name}.prepare"), t0.elapsed());
            let result = ds.and_then(|ds| run_train_on(cfg, &name, &ds, Timings::default()));
            match result {
                Ok(r) => {
                    for (stage, secs) in r.timings.entries {
                        timings.entries.push((format!("{name}.{stage}"), secs));
                    }
                    r.report
                }
                Err(e) => RunReport::failed(&name, config_echo(cfg), &e),
            }
        })
        .collect();
    (reports, timings)
}

/// The config fields that determine the prepared samples.
#[derive(Debug, Clone, PartialEq)]
struct DataKey {
    data: DataSource,
    grid: GridConfig,
    spec: SampleSpec,
}

impl DataKey {
    fn of(cfg: &ExperimentConfig) -> Self {
        Self {
            data: cfg.data.clone(),
            grid: cfg.grid,
            spec: cfg.sample_spec(),
        }
    }
}

/// Canonical `key → value` view of a config, echoed into reports.
pub fn config_echo(cfg: &ExperimentConfig) -> BTreeMap<String, String> {
    let mut m = BTreeMap::new();
    let mut put = |k: &str, v: String| {
        m.insert(k.to_string(), v);
    };
    put("seed", cfg.seed.to_string());
    put("k", cfg.k.to_string());
    put("n_past", cfg.n_past.to_string());
    put("aligned", cfg.aligned.to_string());
    put("wrap_theta", cfg.wrap_theta.to_string());
    put(
        "mode",
        match cfg.mode {
            Mode::Stela => "stela",
            Mode::Baseline => "baseline",
        }
        .to_string(),
    );
    let g = &cfg.grid;
    put("grid.rho_min", g.rho_min.to_string());
    put("grid.rho_max", g.rho_max.to_string());
    put("grid.z_min", g.z_min.to_string());
    put("grid.z_max", g.z_max.to_string());
    put("grid.h", g.h.to_string());
    put("grid.w", g.w.to_string());
    put("grid.l", g.l.to_string());
    put("grid.intensity_scale", g.intensity_scale.to_string());
    put("feature_dim", cfg.model.feature_dim.to_string());
    put("key_dim", cfg.model.key_dim.to_string());
    put("key_hidden", cfg.model.key_hidden.to_string());
    put(
        "encoder_hidden",
        cfg.model
            .encoder_hidden
            .iter()
            .map(|w| w.to_string())
            .collect::<Vec<_>>()
            .join(","),
    );
    put("backbone_stages", cfg.model.backbone_stages.to_string());
    let s = &cfg.schedule;
    put("epochs.pretrain", s.pretrain_epochs.to_string());
    put("epochs.warmup", s.warmup_epochs.to_string());
    put("epochs.finetune", s.finetune_epochs.to_string());
    put("lr.pretrain", s.pretrain_lr.to_string());
    put("lr.warmup", s.warmup_lr.to_string());
    put("lr.finetune", s.finetune_lr.to_string());
    put("plateau.patience", s.plateau_patience.to_string());
    put("plateau.factor", s.plateau_factor.to_string());
    match &cfg.data {
        DataSource::Synthetic {
            spec,
            train_pairs,
            eval_pairs,
            seed,
        } => {
            put("data", "synthetic".into());
            put("synthetic.frames", spec.frames.to_string());
            put("synthetic.ego_speed", spec.ego_speed.to_string());
            put("synthetic.object_speed", spec.object_speed.to_string());
            put("synthetic.objects", spec.objects_per_scene.to_string());
            put("synthetic.points_per_object", spec.points_per_object.to_string());
            put("synthetic.min_range", spec.min_range.to_string());
            put("synthetic.max_range", spec.max_range.to_string());
            put("synthetic.ground_half_extent", spec.ground_half_extent.to_string());
            put("synthetic.ground_spacing", spec.ground_spacing.to_string());
            put("synthetic.train_pairs", train_pairs.to_string());
            put("synthetic.eval_pairs", eval_pairs.to_string());
            put("synthetic.seed", seed.to_string());
        }
        DataSource::Kitti {
            root,
            train_sequence,
            eval_sequence,
            stride,
            classmap,
        } => {
            put("data", "kitti".into());
            put("kitti.root", root.display().to_string());
            put("kitti.train_sequence", train_sequence.clone());
            put("kitti.eval_sequence", eval_sequence.clone());
            put("kitti.stride", stride.to_string());
            if let Some(c) = classmap {
                put("kitti.classmap", c.display().to_string());
            }
        }
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_and_reject() {
        let m = parse_config_text("seed = 3 # run seed\n\nk=8\n").unwrap();
        let c = ExperimentConfig::from_map(&m).unwrap();
        assert_eq!((c.seed, c.k, c.n_past, c.aligned), (3, 8, 2, true));
        assert!(parse_config_text("k 8").is_err());
        assert!(parse_config_text("k=1\nk=2").is_err());
        let m = parse_config_text("seed=1\nbogus=2").unwrap();
        assert!(matches!(ExperimentConfig::from_map(&m), Err(Error::Config(_))));
        let m = parse_config_text("k=4").unwrap();
        assert!(ExperimentConfig::from_map(&m).is_err());
        let m = parse_config_text("seed=1\nk=0").unwrap();
        assert!(ExperimentConfig::from_map(&m).is_err());
    }

    #[test]
    fn grid_is_cartesian_product() {
        let m = parse_config_text("seed=1,2\nk=4,8,16\naligned=true").unwrap();
        let g = expand_grid(&m);
        assert_eq!(g.len(), 6);
        assert_eq!(g[0]["k"], "4");
        assert_eq!(g[0]["seed"], "1");
        assert_eq!(g[1]["seed"], "2");
        assert_eq!(g[5]["k"], "16");
        assert!(g.iter().all(|c| ExperimentConfig::from_map(c).is_ok()));
    }

    #[test]
    fn echo_round_trips_through_parser() {
        let m = parse_config_text("seed=5\nk=4\nmode=baseline\nencoder_hidden=8,8").unwrap();
        let c = ExperimentConfig::from_map(&m).unwrap();
        let echo: ConfigMap = config_echo(&c);
        assert_eq!(ExperimentConfig::from_map(&echo).unwrap(), c);
    }
}
