//! Cylindrical partitioning and the sparse (features, indices) layout.
//!
//! A frame is binned on a `H × W × L` (range × azimuth × height) grid. Each
//! occupied cell keeps one `D`-vector: the channel-wise max over the encoded
//! features of its points. [`SparseVoxelSet`] is the "pseudo point cloud" view
//! of that grid, [`DenseGrid`] the full tensor.

use std::f64::consts::PI;
use std::io::{Read, Write};

use ndarray::{s, Array2, Array4, ArrayView2, ArrayViewMut2, Axis};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{build_point_features, to_cylindrical, CylCoord, PointFeature};
use crate::kitti_io::RawScan;
use crate::mlp::Mlp;

/// `(h, w, l)` = (range bin, azimuth bin, height bin).
pub type VoxelIndex = [i32; 3];

const CONTAINER_VERSION: u8 = 1;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridConfig {
    pub rho_min: f64,
    pub rho_max: f64,
    pub z_min: f64,
    pub z_max: f64,
    /// range bins
    pub h: usize,
    /// azimuth bins
    pub w: usize,
    /// height bins
    pub l: usize,
    pub feature_dim: usize,
    /// Multiplier applied to intensity when building point features.
    pub intensity_scale: f64,
}

impl Default for GridConfig {
    /// 240×180×16 over ρ ∈ [0, 50) m and z ∈ [-4, 2) m.
    fn default() -> Self {
        Self {
            rho_min: 0.0,
            rho_max: 50.0,
            z_min: -4.0,
            z_max: 2.0,
            h: 240,
            w: 180,
            l: 16,
            feature_dim: 32,
            intensity_scale: 1.0,
        }
    }
}

impl GridConfig {
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<()> {
        if !(self.rho_min >= 0.0 && self.rho_max > self.rho_min) {
            return Err(Error::Config(format!(
                "need 0 <= rho_min < rho_max, got [{}, {})",
                self.rho_min, self.rho_max
            )));
        }
        if !(self.z_max > self.z_min) || !self.z_min.is_finite() || !self.z_max.is_finite() {
            return Err(Error::Config(format!(
                "need z_min < z_max, got [{}, {})",
                self.z_min, self.z_max
            )));
        }
        if self.h == 0 || self.w == 0 || self.l == 0 || self.feature_dim == 0 {
            return Err(Error::Config(
                "grid resolution and feature dim must be at least 1".into(),
            ));
        }
        if !self.intensity_scale.is_finite() {
            return Err(Error::Config("intensity_scale must be finite".into()));
        }
        Ok(())
    }

    pub fn cell_count(&self) -> usize {
        self.h * self.w * self.l
    }

    pub fn contains(&self, idx: &VoxelIndex) -> bool {
        (0..self.h as i32).contains(&idx[0])
            && (0..self.w as i32).contains(&idx[1])
            && (0..self.l as i32).contains(&idx[2])
    }
}

fn bin(value: f64, lo: f64, hi: f64, n: usize) -> i32 {
    let b = ((value - lo) / ((hi - lo) / n as f64)).floor() as i64;
    // rounding can push a value just below `hi` into bin n
    b.clamp(0, n as i64 - 1) as i32
}

/// Grid cell of a cylindrical coordinate, `None` if ρ or z is outside the
/// half-open bounds. θ ∈ [-π, π) always lands in a bin.
pub fn voxel_index(cyl: &CylCoord, cfg: &GridConfig) -> Option<VoxelIndex> {
    if !(cyl.rho >= cfg.rho_min && cyl.rho < cfg.rho_max && cyl.z >= cfg.z_min && cyl.z < cfg.z_max) {
        return None;
    }
    Some([
        bin(cyl.rho, cfg.rho_min, cfg.rho_max, cfg.h),
        bin(cyl.theta, -PI, PI, cfg.w),
        bin(cyl.z, cfg.z_min, cfg.z_max, cfg.l),
    ])
}

/// Point features and voxel assignments of the in-bounds points of a scan.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Partition {
    pub features: Vec<PointFeature>,
    pub assignments: Vec<VoxelIndex>,
    /// Position of each kept point in the source scan.
    pub source_rows: Vec<usize>,
}

impl Partition {
    pub fn feature_matrix(&self) -> Array2<f64> {
        let mut m = Array2::zeros((self.features.len(), PointFeature::WIDTH));
        for (mut row, f) in m.rows_mut().into_iter().zip(&self.features) {
            row.assign(&ndarray::aview1(f.as_slice()));
        }
        m
    }
}

/// Drops out-of-bounds points and bins the rest.
pub fn partition_scan(scan: &RawScan, cfg: &GridConfig) -> Partition {
    let mut out = Partition::default();
    for (row, p) in scan.points.iter().enumerate() {
        let xyz = p.xyz();
        let cyl = to_cylindrical(xyz);
        if let Some(idx) = voxel_index(&cyl, cfg) {
            out.features
                .push(build_point_features(xyz, cyl, p.intensity * cfg.intensity_scale));
            out.assignments.push(idx);
            out.source_rows.push(row);
        }
    }
    out
}

/// Row-sorted (features, indices) pairs for the occupied cells of a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseVoxelSet {
    features: Array2<f64>,
    indices: Vec<VoxelIndex>,
}

impl SparseVoxelSet {
    /// Requires indices strictly increasing in lexicographic order.
    pub fn new(features: Array2<f64>, indices: Vec<VoxelIndex>) -> Result<Self> {
        if features.nrows() != indices.len() {
            return Err(Error::InvariantViolation(format!(
                "{} feature rows but {} indices",
                features.nrows(),
                indices.len()
            )));
        }
        if let Some(w) = indices.windows(2).find(|w| w[0] >= w[1]) {
            return Err(Error::InvariantViolation(format!(
                "indices not strictly increasing at {:?} -> {:?}",
                w[0], w[1]
            )));
        }
        Ok(Self { features, indices })
    }

    /// Sorts rows by index; duplicate indices are an error.
    pub fn from_unsorted(features: Array2<f64>, indices: Vec<VoxelIndex>) -> Result<Self> {
        if features.nrows() != indices.len() {
            return Err(Error::InvariantViolation("row count mismatch".into()));
        }
        let mut order: Vec<usize> = (0..indices.len()).collect();
        order.sort_by_key(|&i| indices[i]);
        let sorted_idx: Vec<VoxelIndex> = order.iter().map(|&i| indices[i]).collect();
        let sorted_feat = features.select(Axis(0), &order);
        Self::new(sorted_feat, sorted_idx)
    }

    pub fn empty(dim: usize) -> Self {
        Self {
            features: Array2::zeros((0, dim)),
            indices: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn features(&self) -> &Array2<f64> {
        &self.features
    }

    pub fn features_mut(&mut self) -> ArrayViewMut2<'_, f64> {
        self.features.view_mut()
    }

    pub fn indices(&self) -> &[VoxelIndex] {
        &self.indices
    }

    /// Replaces the features, keeping the indices. Row count must match.
    pub fn with_features(&self, features: Array2<f64>) -> Result<Self> {
        if features.nrows() != self.len() {
            return Err(Error::InvariantViolation("row count mismatch".into()));
        }
        Ok(Self {
            features,
            indices: self.indices.clone(),
        })
    }

    pub fn row_of(&self, idx: &VoxelIndex) -> Option<usize> {
        self.indices.binary_search(idx).ok()
    }

    pub fn check_bounds(&self, cfg: &GridConfig) -> Result<()> {
        match self.indices.iter().find(|i| !cfg.contains(i)) {
            Some(i) => Err(Error::InvariantViolation(format!(
                "index {i:?} outside {}x{}x{} grid",
                cfg.h, cfg.w, cfg.l
            ))),
            None => Ok(()),
        }
    }

    /// Length-prefixed little-endian container: version byte, `N` and `D` as
    /// `u32`, then `N` `i32` triples, then `N × D` `f32`s.
    pub fn write_to<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        out.write_all(&[CONTAINER_VERSION])?;
        out.write_all(&(self.len() as u32).to_le_bytes())?;
        out.write_all(&(self.dim() as u32).to_le_bytes())?;
        for idx in &self.indices {
            for c in idx {
                out.write_all(&c.to_le_bytes())?;
            }
        }
        for v in self.features.iter() {
            out.write_all(&(*v as f32).to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut input: R) -> Result<Self> {
        let corrupt = |e: std::io::Error| Error::Corruption(format!("voxel container: {e}"));
        let mut byte = [0u8; 1];
        input.read_exact(&mut byte).map_err(corrupt)?;
        if byte[0] != CONTAINER_VERSION {
            return Err(Error::Corruption(format!(
                "unsupported voxel container version {}",
                byte[0]
            )));
        }
        let mut word = [0u8; 4];
        input.read_exact(&mut word).map_err(corrupt)?;
        let n = u32::from_le_bytes(word) as usize;
        input.read_exact(&mut word).map_err(corrupt)?;
        let d = u32::from_le_bytes(word) as usize;
        let mut indices = Vec::with_capacity(n);
        for _ in 0..n {
            let mut idx = [0i32; 3];
            for c in &mut idx {
                input.read_exact(&mut word).map_err(corrupt)?;
                *c = i32::from_le_bytes(word);
            }
            indices.push(idx);
        }
        let mut values = Vec::with_capacity(n * d);
        for _ in 0..n * d {
            input.read_exact(&mut word).map_err(corrupt)?;
            values.push(f32::from_le_bytes(word) as f64);
        }
        let features = Array2::from_shape_vec((n, d), values).map_err(|e| Error::Corruption(e.to_string()))?;
        Self::new(features, indices)
    }
}

/// A `D × H × W × L` feature tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseGrid {
    pub values: Array4<f64>,
}

impl DenseGrid {
    pub fn zeros(cfg: &GridConfig) -> Self {
        Self {
            values: Array4::zeros((cfg.feature_dim, cfg.h, cfg.w, cfg.l)),
        }
    }
}

/// Result of reducing point features into voxels.
#[derive(Debug, Clone)]
pub struct PooledVoxels {
    pub voxels: SparseVoxelSet,
    /// For every voxel row and channel, the point that supplied the maximum.
    pub argmax: Array2<usize>,
    /// For every input point, the voxel row it landed in.
    pub point_to_voxel: Vec<usize>,
}

/// Channel-wise max of `point_features` rows sharing a voxel index.
/// Ties keep the earliest point; `-0.0` is normalised to `+0.0` so the
/// output does not depend on input order.
pub fn voxel_max_pool(point_features: ArrayView2<f64>, assignments: &[VoxelIndex]) -> Result<PooledVoxels> {
    if point_features.nrows() != assignments.len() {
        return Err(Error::Config(format!(
            "{} point features but {} assignments",
            point_features.nrows(),
            assignments.len()
        )));
    }
    let d = point_features.ncols();
    let mut order: Vec<usize> = (0..assignments.len()).collect();
    order.sort_by_key(|&i| (assignments[i], i));

    let mut indices: Vec<VoxelIndex> = Vec::new();
    let mut rows: Vec<f64> = Vec::new();
    let mut argmax: Vec<usize> = Vec::new();
    let mut point_to_voxel = vec![0usize; assignments.len()];
    for &p in &order {
        let idx = assignments[p];
        if indices.last() != Some(&idx) {
            indices.push(idx);
            rows.extend(point_features.row(p).iter().map(|v| v + 0.0));
            argmax.extend(std::iter::repeat_n(p, d));
        } else {
            let base = rows.len() - d;
            for (c, &v) in point_features.row(p).iter().enumerate() {
                if v > rows[base + c] {
                    rows[base + c] = v + 0.0;
                    argmax[base + c] = p;
                }
            }
        }
        point_to_voxel[p] = indices.len() - 1;
    }
    let n = indices.len();
    Ok(PooledVoxels {
        voxels: SparseVoxelSet::new(Array2::from_shape_vec((n, d), rows).expect("row-major buffer"), indices)?,
        argmax: Array2::from_shape_vec((n, d), argmax).expect("row-major buffer"),
        point_to_voxel,
    })
}

/// Runs the point encoder over a batch of rows, parallel over row chunks.
pub fn encode_rows(params: &Mlp, x: ArrayView2<f64>) -> Array2<f64> {
    const CHUNK: usize = 2048;
    if x.nrows() <= CHUNK {
        return params.forward(x);
    }
    let parts: Vec<Array2<f64>> = x
        .axis_chunks_iter(Axis(0), CHUNK)
        .collect::<Vec<_>>()
        .into_par_iter()
        .map(|c| params.forward(c))
        .collect();
    let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
    ndarray::concatenate(Axis(0), &views).expect("same width")
}

/// Encodes each point with the MLP and max-pools the results per voxel.
pub fn encode_points(
    frame: &[PointFeature],
    assignments: &[VoxelIndex],
    params: &Mlp,
    cfg: &GridConfig,
) -> Result<SparseVoxelSet> {
    if params.input_dim() != PointFeature::WIDTH {
        return Err(Error::Config(format!(
            "encoder expects {} inputs, point features have {}",
            params.input_dim(),
            PointFeature::WIDTH
        )));
    }
    if params.output_dim() != cfg.feature_dim {
        return Err(Error::Config(format!(
            "encoder outputs {} channels, grid feature dim is {}",
            params.output_dim(),
            cfg.feature_dim
        )));
    }
    if frame.len() != assignments.len() {
        return Err(Error::Config("points and assignments differ in length".into()));
    }
    let mut x = Array2::zeros((frame.len(), PointFeature::WIDTH));
    for (mut row, f) in x.rows_mut().into_iter().zip(frame) {
        row.assign(&ndarray::aview1(f.as_slice()));
    }
    let encoded = encode_rows(params, x.view());
    Ok(voxel_max_pool(encoded.view(), assignments)?.voxels)
}

/// Emits every voxel whose feature vector is not all zero, in index order.
pub fn decompose(grid: &DenseGrid, cfg: &GridConfig) -> Result<SparseVoxelSet> {
    let shape = grid.values.shape();
    if shape != [cfg.feature_dim, cfg.h, cfg.w, cfg.l] {
        return Err(Error::Config(format!("grid shape {shape:?} does not match config")));
    }
    let mut indices = Vec::new();
    let mut rows = Vec::new();
    for h in 0..cfg.h {
        for w in 0..cfg.w {
            for l in 0..cfg.l {
                let v = grid.values.slice(s![.., h, w, l]);
                if v.iter().any(|&x| x != 0.0) {
                    indices.push([h as i32, w as i32, l as i32]);
                    rows.extend(v.iter().copied());
                }
            }
        }
    }
    let n = indices.len();
    SparseVoxelSet::new(
        Array2::from_shape_vec((n, cfg.feature_dim), rows).expect("row-major buffer"),
        indices,
    )
}

/// Scatters a sparse set back into a zero-initialised dense grid.
pub fn densify(sparse: &SparseVoxelSet, cfg: &GridConfig) -> Result<DenseGrid> {
    if sparse.dim() != cfg.feature_dim {
        return Err(Error::Config(format!(
            "sparse set has {} channels, config {}",
            sparse.dim(),
            cfg.feature_dim
        )));
    }
    sparse.check_bounds(cfg)?;
    let mut grid = DenseGrid::zeros(cfg);
    let mut seen = std::collections::HashSet::with_capacity(sparse.len());
    for (row, idx) in sparse.indices().iter().enumerate() {
        if !seen.insert(*idx) {
            return Err(Error::InvariantViolation(format!("duplicate voxel index {idx:?}")));
        }
        let [h, w, l] = idx.map(|c| c as usize);
        grid.values
            .slice_mut(s![.., h, w, l])
            .assign(&sparse.features().row(row));
    }
    Ok(grid)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn default_grid() -> GridConfig {
        GridConfig::default()
    }

    fn small(d: usize) -> GridConfig {
        GridConfig {
            h: 4,
            w: 5,
            l: 3,
            feature_dim: d,
            ..GridConfig::default()
        }
    }

    #[test]
    fn voxel_corner_and_edges() {
        let cfg = default_grid();
        let c = CylCoord {
            rho: 0.0,
            theta: -PI,
            z: -4.0,
        };
        assert_eq!(voxel_index(&c, &cfg), Some([0, 0, 0]));
        let c = CylCoord {
            rho: 49.999,
            theta: 0.0,
            z: 0.0,
        };
        assert_eq!(voxel_index(&c, &cfg).unwrap()[0], 239);
        let c = CylCoord {
            rho: 50.0,
            theta: 0.0,
            z: 0.0,
        };
        assert_eq!(voxel_index(&c, &cfg), None);
        let c = CylCoord {
            rho: 1.0,
            theta: PI - 1e-16,
            z: 2.0 - 1e-15,
        };
        let idx = voxel_index(&c, &cfg).unwrap();
        assert_eq!((idx[1], idx[2]), (179, 15));
        let c = CylCoord {
            rho: 1.0,
            theta: 0.0,
            z: -4.0001,
        };
        assert_eq!(voxel_index(&c, &cfg), None);
    }

    #[test]
    fn config_validation() {
        assert!(GridConfig::default().validate().is_ok());
        let bad = GridConfig {
            rho_max: 0.0,
            ..GridConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = GridConfig {
            l: 0,
            ..GridConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn encode_single_point_identity() {
        let cfg = small(8);
        let f = PointFeature([1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let out = encode_points(&[f], &[[1, 2, 0]], &Mlp::identity(6, 8), &cfg).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(
            out.features().row(0).to_vec(),
            vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 0.0, 0.0]
        );
    }

    #[test]
    fn encode_max_of_one_hots() {
        let cfg = small(6);
        let e1 = PointFeature([1.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        let e2 = PointFeature([0.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
        let out = encode_points(&[e1, e2], &[[0, 0, 0], [0, 0, 0]], &Mlp::identity(6, 6), &cfg).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out.features().row(0).to_vec(), vec![1.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn encode_rejects_width_mismatch() {
        let cfg = small(4);
        let f = PointFeature([0.0; 6]);
        assert!(matches!(
            encode_points(&[f], &[[0, 0, 0]], &Mlp::identity(5, 4), &cfg),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            encode_points(&[f], &[[0, 0, 0]], &Mlp::identity(6, 3), &cfg),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn decompose_examples() {
        let cfg = small(2);
        assert!(decompose(&DenseGrid::zeros(&cfg), &cfg).unwrap().is_empty());
        let mut g = DenseGrid::zeros(&cfg);
        g.values[[0, 0, 0, 0]] = 1.0;
        g.values[[1, 1, 1, 1]] = -2.0;
        let s = decompose(&g, &cfg).unwrap();
        assert_eq!(s.indices(), &[[0, 0, 0], [1, 1, 1]]);
        assert_eq!(s.features(), &array![[1.0, 0.0], [0.0, -2.0]]);
    }

    #[test]
    fn densify_examples() {
        let cfg = small(3);
        assert_eq!(
            densify(&SparseVoxelSet::empty(3), &cfg).unwrap(),
            DenseGrid::zeros(&cfg)
        );
        let s = SparseVoxelSet::new(array![[0.0, 1.0, 0.0]], vec![[0, 0, 0]]).unwrap();
        let g = densify(&s, &cfg).unwrap();
        let nonzero: Vec<_> = g.values.indexed_iter().filter(|(_, v)| **v != 0.0).collect();
        assert_eq!(nonzero.len(), 1);
        assert_eq!(nonzero[0].0, (1, 0, 0, 0));
    }

    #[test]
    fn sparse_set_rejects_duplicates_and_out_of_bounds() {
        let f = array![[1.0], [2.0]];
        assert!(SparseVoxelSet::new(f.clone(), vec![[0, 0, 1], [0, 0, 1]]).is_err());
        assert!(SparseVoxelSet::from_unsorted(f.clone(), vec![[0, 0, 1], [0, 0, 1]]).is_err());
        let s = SparseVoxelSet::from_unsorted(f, vec![[9, 0, 0], [0, 0, 1]]).unwrap();
        assert_eq!(s.indices(), &[[0, 0, 1], [9, 0, 0]]);
        assert!(densify(&s, &small(1)).is_err());
    }

    #[test]
    fn container_round_trip_and_corruption() {
        let s = SparseVoxelSet::new(array![[0.5, -1.25], [3.0, 4.0]], vec![[0, 1, 2], [3, 0, 0]]).unwrap();
        let mut buf = Vec::new();
        s.write_to(&mut buf).unwrap();
        assert_eq!(buf.len(), 1 + 4 + 4 + 2 * 12 + 4 * 4);
        assert_eq!(SparseVoxelSet::read_from(&buf[..]).unwrap(), s);
        assert!(SparseVoxelSet::read_from(&buf[..buf.len() - 1]).is_err());
        let mut bad = buf.clone();
        bad[0] = 9;
        assert!(matches!(SparseVoxelSet::read_from(&bad[..]), Err(Error::Corruption(_))));
    }

    #[test]
    fn encode_is_permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cfg = small(8);
        let mlp = Mlp::xavier(&[6, 16, 8], &mut rng).unwrap();
        let pts: Vec<PointFeature> = (0..50)
            .map(|_| PointFeature(std::array::from_fn(|_| rng.random_range(-2.0..2.0))))
            .collect();
        let asg: Vec<VoxelIndex> = (0..50)
            .map(|_| [rng.random_range(0..2), rng.random_range(0..2), 0])
            .collect();
        let a = encode_points(&pts, &asg, &mlp, &cfg).unwrap();
        let mut perm: Vec<usize> = (0..50).collect();
        perm.reverse();
        perm.swap(3, 17);
        let pts2: Vec<_> = perm.iter().map(|&i| pts[i]).collect();
        let asg2: Vec<_> = perm.iter().map(|&i| asg[i]).collect();
        let b = encode_points(&pts2, &asg2, &mlp, &cfg).unwrap();
        assert_eq!(a.indices(), b.indices());
        for (x, y) in a.features().iter().zip(b.features().iter()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
        assert!(a.len() <= 4);
    }

    fn arb_sparse() -> impl Strategy<Value = SparseVoxelSet> {
        proptest::collection::btree_map(
            (0i32..4, 0i32..5, 0i32..3),
            proptest::collection::vec(-5.0f64..5.0, 2),
            0..20,
        )
        .prop_map(|m| {
            let mut idx = Vec::new();
            let mut rows = Vec::new();
            for ((h, w, l), mut v) in m {
                if v.iter().all(|x| *x == 0.0) {
                    v[0] = 1.0;
                }
                idx.push([h, w, l]);
                rows.extend(v);
            }
            let n = idx.len();
            SparseVoxelSet::new(Array2::from_shape_vec((n, 2), rows).unwrap(), idx).unwrap()
        })
    }

    proptest! {
        #[test]
        fn decompose_inverts_densify(s in arb_sparse()) {
            let cfg = small(2);
            prop_assert_eq!(decompose(&densify(&s, &cfg).unwrap(), &cfg).unwrap(), s);
        }
    }
}
