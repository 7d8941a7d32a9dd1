//! Desk-scale segmentation network: point encoder, max-pool into voxels,
//! MLP backbone stages, optional temporal attention and a linear decoder.
//!
//! Frames are turned into [`PreparedFrame`]s once; everything parameter
//! independent (binning, voxel labels, neighborhood tables) is cached there.

use std::f64::consts::PI;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;

use crate::attention::{stela_backward, stela_forward, ForwardCache, StelaParamGrads, StelaParams};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::geometry::{align_to_frame, PointFeature};
use crate::kitti_io::{RawScan, IGNORE_ID};
use crate::losses::{combined_loss, ClassTable};
use crate::mlp::{Dense, Mlp, MlpCache, MlpGrads};
use crate::neighborhood::{KnnOptions, NeighborhoodTable};
use crate::sparse_grid::{partition_scan, voxel_max_pool, GridConfig, SparseVoxelSet, VoxelIndex};
use crate::synthetic::PointCloudFrame;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub feature_dim: usize,
    /// Hidden widths of the point encoder; the output width is `feature_dim`.
    pub encoder_hidden: Vec<usize>,
    /// Number of `D → D → D` MLP stages standing in for the encoder blocks.
    pub backbone_stages: usize,
    pub key_dim: usize,
    pub key_hidden: usize,
    pub classes: usize,
}

/// Binned, labeled frame ready for the network.
#[derive(Debug, Clone)]
pub struct PreparedFrame {
    /// Scaled point features, one row per in-bounds point.
    pub points: Array2<f64>,
    pub assignments: Vec<VoxelIndex>,
    /// Voxel row of every point.
    pub point_to_voxel: Vec<usize>,
    /// Occupied cells in sorted order (features unused, width 1).
    pub voxels: SparseVoxelSet,
    pub point_labels: Vec<u16>,
    /// Majority point label per voxel, smallest id on ties; ignore if every
    /// point of the voxel is ignored.
    pub voxel_labels: Vec<u16>,
}

/// A current frame with its past frames (nearest first) and the
/// neighborhood tables linking them.
#[derive(Debug, Clone)]
pub struct Sample {
    pub current: PreparedFrame,
    pub past: Vec<PreparedFrame>,
    pub tables: NeighborhoodTable,
}

/// Scale applied to the six point features before the encoder so that all
/// inputs are of order one.
pub fn input_scale(grid: &GridConfig) -> [f64; PointFeature::WIDTH] {
    let r = 1.0 / grid.rho_max;
    [r, r, r, r, 1.0 / PI, 1.0]
}

pub fn prepare_frame(scan: &RawScan, labels: &[u16], grid: &GridConfig, classes: usize) -> Result<PreparedFrame> {
    if labels.len() != scan.len() {
        return Err(Error::Data(format!(
            "{} labels for {} points",
            labels.len(),
            scan.len()
        )));
    }
    let part = partition_scan(scan, grid);
    let scale = input_scale(grid);
    let mut points = part.feature_matrix();
    for mut row in points.rows_mut() {
        for (v, s) in row.iter_mut().zip(scale) {
            *v *= s;
        }
    }
    let point_labels: Vec<u16> = part.source_rows.iter().map(|&r| labels[r]).collect();
    let mut cells = part.assignments.clone();
    cells.sort_unstable();
    cells.dedup();
    let point_to_voxel: Vec<usize> = part
        .assignments
        .iter()
        .map(|a| cells.binary_search(a).expect("cell listed"))
        .collect();
    let mut votes = vec![vec![0u32; classes]; cells.len()];
    for (&v, &l) in point_to_voxel.iter().zip(&point_labels) {
        if l != IGNORE_ID {
            *votes[v]
                .get_mut(l as usize)
                .ok_or_else(|| Error::Data(format!("label {l} outside {classes} classes")))? += 1;
        }
    }
    let voxel_labels = votes
        .iter()
        .map(|v| {
            let best = v.iter().copied().max().unwrap_or(0);
            if best == 0 {
                IGNORE_ID
            } else {
                v.iter().position(|&c| c == best).expect("max present") as u16
            }
        })
        .collect();
    let voxels = SparseVoxelSet::new(Array2::zeros((cells.len(), 1)), cells)?;
    Ok(PreparedFrame {
        points,
        assignments: part.assignments,
        point_to_voxel,
        voxels,
        point_labels,
        voxel_labels,
    })
}

/// How to assemble samples from a sequence.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleSpec {
    pub n_past: usize,
    pub k: usize,
    /// Transform past scans into the current sensor frame before binning.
    pub aligned: bool,
    pub knn: KnnOptions,
}

/// Builds the sample whose current frame is `frames[t]`. Frames before the
/// start of the sequence are simply missing.
pub fn prepare_sample(
    frames: &[PointCloudFrame],
    t: usize,
    spec: &SampleSpec,
    grid: &GridConfig,
    classes: usize,
) -> Result<Sample> {
    let cur = frames
        .get(t)
        .ok_or_else(|| Error::Config(format!("frame {t} out of range")))?;
    let current = prepare_frame(&cur.scan, &cur.labels, grid, classes)?;
    let mut past = Vec::new();
    for n in 1..=spec.n_past.min(t) {
        let f = &frames[t - n];
        let scan = if spec.aligned {
            align_to_frame(&f.scan, &f.pose, &cur.pose)
        } else {
            f.scan.clone()
        };
        past.push(prepare_frame(&scan, &f.labels, grid, classes)?);
    }
    let past_sets: Vec<SparseVoxelSet> = past.iter().map(|p| p.voxels.clone()).collect();
    let tables = NeighborhoodTable::build(&current.voxels, &past_sets, spec.k, spec.knn)?;
    Ok(Sample { current, past, tables })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentationModel {
    pub scale: [f64; PointFeature::WIDTH],
    pub encoder: Mlp,
    pub backbone: Vec<Mlp>,
    pub stela: Option<StelaParams>,
    pub decoder: Dense,
}

/// Which parameter groups receive updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Trainable {
    pub encoder: bool,
    pub backbone: bool,
    pub stela: bool,
    pub decoder: bool,
}

impl Trainable {
    pub const ALL: Self = Self {
        encoder: true,
        backbone: true,
        stela: true,
        decoder: true,
    };
    pub const STELA_ONLY: Self = Self {
        encoder: false,
        backbone: false,
        stela: true,
        decoder: false,
    };
}

#[derive(Debug, Clone)]
struct FrameCache {
    encoder: MlpCache,
    argmax: Array2<usize>,
    points: usize,
    backbone: Vec<MlpCache>,
}

/// Intermediates of [`SegmentationModel::forward`].
#[derive(Debug, Clone)]
pub struct ModelCache {
    current: FrameCache,
    past: Vec<FrameCache>,
    stela: Option<ForwardCache>,
    decoder_input: Array2<f64>,
}

#[derive(Debug, Clone)]
pub struct ModelGrads {
    pub encoder: Option<MlpGrads>,
    pub backbone: Option<Vec<MlpGrads>>,
    pub stela: Option<StelaParamGrads>,
    pub decoder: Option<(Array2<f64>, Array1<f64>)>,
}

fn add_grads(acc: &mut Option<MlpGrads>, g: MlpGrads) {
    match acc {
        Some(a) => a.add_assign(&g),
        None => *acc = Some(g),
    }
}

impl SegmentationModel {
    /// Xavier initialisation without the attention block.
    pub fn new<R: Rng + ?Sized>(cfg: &ModelConfig, grid: &GridConfig, rng: &mut R) -> Result<Self> {
        if cfg.feature_dim != grid.feature_dim {
            return Err(Error::Config(format!(
                "model feature dim {} differs from grid feature dim {}",
                cfg.feature_dim, grid.feature_dim
            )));
        }
        if cfg.classes == 0 {
            return Err(Error::Config("at least one class required".into()));
        }
        let d = cfg.feature_dim;
        let mut widths = vec![PointFeature::WIDTH];
        widths.extend(&cfg.encoder_hidden);
        widths.push(d);
        let encoder = Mlp::xavier(&widths, rng)?;
        let backbone = (0..cfg.backbone_stages)
            .map(|_| Mlp::xavier(&[d, d, d], rng))
            .collect::<Result<_>>()?;
        let decoder = Dense::xavier(d, cfg.classes, false, rng);
        Ok(Self {
            scale: input_scale(grid),
            encoder,
            backbone,
            stela: None,
            decoder,
        })
    }

    pub fn attach_stela<R: Rng + ?Sized>(&mut self, cfg: &ModelConfig, rng: &mut R) -> Result<()> {
        self.stela = Some(StelaParams::xavier(cfg.feature_dim, cfg.key_dim, cfg.key_hidden, rng)?);
        Ok(())
    }

    pub fn classes(&self) -> usize {
        self.decoder.output_dim()
    }

    pub fn param_count(&self) -> usize {
        let mut n = self.encoder.param_count()
            + self.backbone.iter().map(Mlp::param_count).sum::<usize>()
            + self.decoder.weight.len()
            + self.decoder.bias.len();
        if let Some(s) = &self.stela {
            n += s.key_adapter.param_count()
                + s.gate_t.weight.len()
                + s.gate_t.bias.len()
                + s.gate_m.weight.len()
                + s.gate_m.bias.len();
        }
        n
    }

    fn encode_frame(&self, f: &PreparedFrame) -> Result<(Array2<f64>, FrameCache)> {
        let (enc, enc_cache) = self.encoder.forward_cached(f.points.view());
        let pooled = voxel_max_pool(enc.view(), &f.assignments)?;
        let mut h = pooled.voxels.features().clone();
        let mut caches = Vec::with_capacity(self.backbone.len());
        for stage in &self.backbone {
            let (out, c) = stage.forward_cached(h.view());
            h = out;
            caches.push(c);
        }
        Ok((
            h,
            FrameCache {
                encoder: enc_cache,
                argmax: pooled.argmax,
                points: f.points.nrows(),
                backbone: caches,
            },
        ))
    }

    fn backward_frame(
        &self,
        cache: &FrameCache,
        grad: Array2<f64>,
        train: Trainable,
        enc_acc: &mut Option<MlpGrads>,
        bb_acc: &mut [Option<MlpGrads>],
    ) {
        if !(train.encoder || train.backbone) {
            return;
        }
        let mut g = grad;
        for (i, stage) in self.backbone.iter().enumerate().rev() {
            let (dx, gp) = stage.backward(&cache.backbone[i], g.view());
            if train.backbone {
                add_grads(&mut bb_acc[i], gp);
            }
            g = dx;
        }
        if !train.encoder {
            return;
        }
        let mut d_points = Array2::zeros((cache.points, g.ncols()));
        for ((v, c), &p) in cache.argmax.indexed_iter() {
            d_points[[p, c]] += g[[v, c]];
        }
        let (_, gp) = self.encoder.backward(&cache.encoder, d_points.view());
        add_grads(enc_acc, gp);
    }

    /// Per-voxel logits for the current frame. The attention block is used
    /// when present and `use_stela` is set.
    pub fn forward(&self, sample: &Sample, use_stela: bool) -> Result<(Array2<f64>, ModelCache)> {
        let (cur, cur_cache) = self.encode_frame(&sample.current)?;
        let mut past_caches = Vec::new();
        let (fused, stela_cache) = match (&self.stela, use_stela) {
            (Some(params), true) => {
                let mut past_sets = Vec::with_capacity(sample.past.len());
                for p in &sample.past {
                    let (h, c) = self.encode_frame(p)?;
                    past_sets.push(p.voxels.with_features(h)?);
                    past_caches.push(c);
                }
                let cur_set = sample.current.voxels.with_features(cur.clone())?;
                let (out, cache) = stela_forward(&cur_set, &past_sets, &sample.tables, params)?;
                (out.0, Some(cache))
            }
            (None, true) => return Err(Error::Usage("model has no attention block".into())),
            (_, false) => (cur, None),
        };
        let logits = self.decoder.forward(fused.view());
        Ok((
            logits,
            ModelCache {
                current: cur_cache,
                past: past_caches,
                stela: stela_cache,
                decoder_input: fused,
            },
        ))
    }

    pub fn backward(&self, cache: &ModelCache, grad_logits: ArrayView2<f64>, train: Trainable) -> Result<ModelGrads> {
        let decoder = train
            .decoder
            .then(|| (grad_logits.t().dot(&cache.decoder_input), grad_logits.sum_axis(Axis(0))));
        let d_fused = grad_logits.dot(&self.decoder.weight);
        let mut enc_acc = None;
        let mut bb_acc: Vec<Option<MlpGrads>> = vec![None; self.backbone.len()];
        let mut stela = None;
        match (&cache.stela, &self.stela) {
            (Some(sc), Some(params)) => {
                let g = stela_backward(params, Some(sc), d_fused.view())?;
                if train.stela {
                    stela = Some(g.params);
                }
                self.backward_frame(&cache.current, g.current, train, &mut enc_acc, &mut bb_acc);
                for (pc, gp) in cache.past.iter().zip(g.past) {
                    self.backward_frame(pc, gp, train, &mut enc_acc, &mut bb_acc);
                }
            }
            (Some(_), None) => return Err(Error::Usage("cache holds attention state the model lacks".into())),
            (None, _) => self.backward_frame(&cache.current, d_fused, train, &mut enc_acc, &mut bb_acc),
        }
        let backbone = if train.backbone {
            Some(
                bb_acc
                    .into_iter()
                    .zip(&self.backbone)
                    .map(|(g, m)| g.unwrap_or_else(|| MlpGrads::zeros_like(m)))
                    .collect(),
            )
        } else {
            None
        };
        Ok(ModelGrads {
            encoder: if train.encoder {
                Some(enc_acc.unwrap_or_else(|| MlpGrads::zeros_like(&self.encoder)))
            } else {
                None
            },
            backbone,
            stela,
            decoder,
        })
    }

    pub fn apply(&mut self, grads: &ModelGrads, lr: f64) {
        if let Some(g) = &grads.encoder {
            self.encoder.sgd_step(g, lr);
        }
        if let Some(gs) = &grads.backbone {
            for (m, g) in self.backbone.iter_mut().zip(gs) {
                m.sgd_step(g, lr);
            }
        }
        if let (Some(g), Some(p)) = (&grads.stela, &mut self.stela) {
            p.sgd_step(g, lr);
        }
        if let Some((w, b)) = &grads.decoder {
            self.decoder.weight.scaled_add(-lr, w);
            self.decoder.bias.scaled_add(-lr, b);
        }
    }

    /// Loss on the current frame's voxel labels and the parameter gradients.
    pub fn loss_and_grads(
        &self,
        sample: &Sample,
        table: &ClassTable,
        use_stela: bool,
        train: Trainable,
    ) -> Result<(f64, ModelGrads)> {
        let (logits, cache) = self.forward(sample, use_stela)?;
        let (loss, g) = combined_loss(logits.view(), &sample.current.voxel_labels, table)?;
        if !loss.is_finite() {
            return Err(Error::Divergence(format!("loss became {loss}")));
        }
        Ok((loss, self.backward(&cache, g.view(), train)?))
    }

    /// Class of every in-bounds point of the current frame: the argmax of
    /// its voxel's logits, lowest class on ties.
    pub fn predict_points(&self, sample: &Sample, use_stela: bool) -> Result<Vec<u16>> {
        let (logits, _) = self.forward(sample, use_stela)?;
        let voxel_pred: Vec<u16> = logits
            .rows()
            .into_iter()
            .map(|r| {
                let mut best = 0;
                for (c, &v) in r.iter().enumerate() {
                    if v > r[best] {
                        best = c;
                    }
                }
                best as u16
            })
            .collect();
        Ok(sample.current.point_to_voxel.iter().map(|&v| voxel_pred[v]).collect())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::default();
        c.insert("input_scale", Array1::from(self.scale.to_vec()).into_dyn());
        put_mlp(&mut c, "encoder", &self.encoder);
        for (i, m) in self.backbone.iter().enumerate() {
            put_mlp(&mut c, &format!("backbone.{i}"), m);
        }
        if let Some(s) = &self.stela {
            put_mlp(&mut c, "stela.key_adapter", &s.key_adapter);
            put_dense(&mut c, "stela.gate_t", &s.gate_t);
            put_dense(&mut c, "stela.gate_m", &s.gate_m);
        }
        put_dense(&mut c, "decoder", &self.decoder);
        c
    }

    /// Rebuilds a model from a checkpoint using the layer shapes of `cfg`.
    pub fn from_checkpoint(mut c: Checkpoint, cfg: &ModelConfig) -> Result<Self> {
        let scale = c.take("input_scale", &[PointFeature::WIDTH])?;
        let mut s = [0.0; PointFeature::WIDTH];
        s.iter_mut().zip(scale.iter()).for_each(|(a, b)| *a = *b);
        let d = cfg.feature_dim;
        let mut widths = vec![PointFeature::WIDTH];
        widths.extend(&cfg.encoder_hidden);
        widths.push(d);
        let encoder = take_mlp(&mut c, "encoder", &widths)?;
        let backbone = (0..cfg.backbone_stages)
            .map(|i| take_mlp(&mut c, &format!("backbone.{i}"), &[d, d, d]))
            .collect::<Result<_>>()?;
        let stela = if c.tensors.contains_key("stela.gate_t.weight") {
            Some(StelaParams::new(
                take_mlp(&mut c, "stela.key_adapter", &[d, cfg.key_hidden, cfg.key_dim])?,
                take_dense(&mut c, "stela.gate_t", 2 * d, d)?,
                take_dense(&mut c, "stela.gate_m", 2 * d, d)?,
            )?)
        } else {
            None
        };
        let decoder = take_dense(&mut c, "decoder", d, cfg.classes)?;
        if let Some(name) = c.tensors.keys().next() {
            return Err(Error::Corruption(format!("unexpected tensor `{name}` in checkpoint")));
        }
        Ok(Self {
            scale: s,
            encoder,
            backbone,
            stela,
            decoder,
        })
    }
}

fn put_dense(c: &mut Checkpoint, prefix: &str, l: &Dense) {
    c.insert(format!("{prefix}.weight"), l.weight.clone().into_dyn());
    c.insert(format!("{prefix}.bias"), l.bias.clone().into_dyn());
}

fn put_mlp(c: &mut Checkpoint, prefix: &str, m: &Mlp) {
    for (i, l) in m.layers.iter().enumerate() {
        put_dense(c, &format!("{prefix}.{i}"), l);
    }
}

fn take_dense(c: &mut Checkpoint, prefix: &str, input: usize, output: usize) -> Result<Dense> {
    let w = c.take(&format!("{prefix}.weight"), &[output, input])?;
    let b = c.take(&format!("{prefix}.bias"), &[output])?;
    Ok(Dense {
        weight: w.into_dimensionality().expect("rank checked"),
        bias: b.into_dimensionality().expect("rank checked"),
        relu: false,
    })
}

/// Rectifier on every layer but the last.
fn take_mlp(c: &mut Checkpoint, prefix: &str, widths: &[usize]) -> Result<Mlp> {
    let n = widths.len() - 1;
    let layers = (0..n)
        .map(|i| {
            let mut l = take_dense(c, &format!("{prefix}.{i}"), widths[i], widths[i + 1])?;
            l.relu = i + 1 < n;
            Ok(l)
        })
        .collect::<Result<Vec<_>>>()?;
    Mlp::new(layers)
}
