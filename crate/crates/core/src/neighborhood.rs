//! k-nearest occupied voxels of a past frame, in grid-index space.
//!
//! Distances are Euclidean over the integer `(h, w, l)` triples and are
//! compared as exact squared integers. Ties go to the smaller past row.
//! [`knn_neighborhood`] uses a spatial hash with ring expansion;
//! [`knn_bruteforce`] is the exhaustive reference it must agree with.

use std::collections::HashMap;
use std::io::Write;

use ndarray::{Array2, Array3, ArrayView2};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::sparse_grid::{SparseVoxelSet, VoxelIndex};

/// Marks padding slots in [`Neighborhood::neighbor_indices`].
pub const INVALID_SLOT: usize = usize::MAX;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct KnnOptions {
    /// Measure azimuth distance around the seam with this period (normally
    /// the grid's `W`). Off by default.
    pub wrap_theta: Option<i32>,
}

/// Neighbors of every query voxel within one past frame.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Neighborhood {
    k: usize,
    /// `N × k`, row-major; [`INVALID_SLOT`] past `neighbor_count[i]`.
    pub neighbor_indices: Vec<usize>,
    pub neighbor_count: Vec<usize>,
    /// `N × k` squared distances; `i64::MAX` on padding slots.
    pub sq_distances: Vec<i64>,
}

impl Neighborhood {
    fn from_rows(k: usize, rows: Vec<Vec<(i64, usize)>>) -> Self {
        let n = rows.len();
        let mut neighbor_indices = vec![INVALID_SLOT; n * k];
        let mut sq_distances = vec![i64::MAX; n * k];
        let mut neighbor_count = Vec::with_capacity(n);
        for (i, row) in rows.into_iter().enumerate() {
            neighbor_count.push(row.len());
            for (j, (d, p)) in row.into_iter().enumerate() {
                neighbor_indices[i * k + j] = p;
                sq_distances[i * k + j] = d;
            }
        }
        Self {
            k,
            neighbor_indices,
            neighbor_count,
            sq_distances,
        }
    }

    pub fn k(&self) -> usize {
        self.k
    }

    /// Number of query rows.
    pub fn len(&self) -> usize {
        self.neighbor_count.len()
    }

    pub fn is_empty(&self) -> bool {
        self.neighbor_count.is_empty()
    }

    pub fn is_valid(&self, i: usize, j: usize) -> bool {
        j < self.neighbor_count[i]
    }

    /// Valid past rows of query `i`, nearest first.
    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbor_indices[i * self.k..i * self.k + self.neighbor_count[i]]
    }

    pub fn distance(&self, i: usize, j: usize) -> f64 {
        if self.is_valid(i, j) {
            (self.sq_distances[i * self.k + j] as f64).sqrt()
        } else {
            f64::INFINITY
        }
    }

    /// The `N × k` validity mask.
    pub fn mask(&self) -> Array2<bool> {
        Array2::from_shape_fn((self.len(), self.k), |(i, j)| self.is_valid(i, j))
    }
}

/// One [`Neighborhood`] per past frame; entry 0 is the frame at `t - 1`.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct NeighborhoodTable {
    pub frames: Vec<Neighborhood>,
}

impl NeighborhoodTable {
    pub fn build(current: &SparseVoxelSet, past: &[SparseVoxelSet], k: usize, opts: KnnOptions) -> Result<Self> {
        let frames = past
            .iter()
            .map(|p| knn_neighborhood_with(current, p, k, opts))
            .collect::<Result<_>>()?;
        Ok(Self { frames })
    }

    /// Debug dump, one line per valid slot: `i,n,j_rank,past_row,distance`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "i,n,j_rank,past_row,distance")?;
        for (f, nb) in self.frames.iter().enumerate() {
            for i in 0..nb.len() {
                for (j, p) in nb.neighbors(i).iter().enumerate() {
                    writeln!(out, "{},{},{},{},{}", i, f + 1, j, p, nb.distance(i, j))?;
                }
            }
        }
        Ok(())
    }
}

fn sq_dist(a: &VoxelIndex, b: &VoxelIndex, opts: KnnOptions) -> i64 {
    let dh = (a[0] - b[0]) as i64;
    let dl = (a[2] - b[2]) as i64;
    let mut dw = (a[1] - b[1]) as i64;
    if let Some(period) = opts.wrap_theta {
        let p = period as i64;
        dw = dw.abs().min((dw - p).abs()).min((dw + p).abs());
    }
    dh * dh + dw * dw + dl * dl
}

fn check_k(k: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::Config("k must be at least 1".into()));
    }
    Ok(())
}

/// Full distance list plus stable sort, row by row.
pub fn knn_bruteforce(query: &SparseVoxelSet, past: &SparseVoxelSet, k: usize) -> Result<Neighborhood> {
    knn_bruteforce_with(query, past, k, KnnOptions::default())
}

pub fn knn_bruteforce_with(
    query: &SparseVoxelSet,
    past: &SparseVoxelSet,
    k: usize,
    opts: KnnOptions,
) -> Result<Neighborhood> {
    check_k(k)?;
    let rows = query
        .indices()
        .iter()
        .map(|q| {
            let mut all: Vec<(i64, usize)> = past
                .indices()
                .iter()
                .enumerate()
                .map(|(j, p)| (sq_dist(q, p, opts), j))
                .collect();
            // stable: equal distances keep ascending row order
            all.sort_by_key(|&(d, _)| d);
            all.truncate(k);
            all
        })
        .collect();
    Ok(Neighborhood::from_rows(k, rows))
}

pub fn knn_neighborhood(query: &SparseVoxelSet, past: &SparseVoxelSet, k: usize) -> Result<Neighborhood> {
    knn_neighborhood_with(query, past, k, KnnOptions::default())
}

pub fn knn_neighborhood_with(
    query: &SparseVoxelSet,
    past: &SparseVoxelSet,
    k: usize,
    opts: KnnOptions,
) -> Result<Neighborhood> {
    check_k(k)?;
    if past.is_empty() {
        return Ok(Neighborhood::from_rows(k, vec![Vec::new(); query.len()]));
    }
    let hash = SpatialHash::build(past.indices(), k);
    let rows = query
        .indices()
        .par_iter()
        .map(|q| match opts.wrap_theta {
            None => hash.knn(q, k),
            Some(period) => {
                // the wrapped distance is the minimum over the shifted copies
                let mut merged: HashMap<usize, i64> = HashMap::new();
                for shift in [-period, 0, period] {
                    let shifted = [q[0], q[1] + shift, q[2]];
                    for (d, row) in hash.knn(&shifted, k) {
                        let e = merged.entry(row).or_insert(d);
                        *e = (*e).min(d);
                    }
                }
                let mut all: Vec<(i64, usize)> = merged.into_iter().map(|(r, d)| (d, r)).collect();
                all.sort_unstable();
                all.truncate(k);
                all
            }
        })
        .collect();
    Ok(Neighborhood::from_rows(k, rows))
}

/// Uniform hash grid over index triples, cell edge `cell` voxels.
#[derive(Debug)]
struct SpatialHash<'a> {
    points: &'a [VoxelIndex],
    cell: i64,
    cells: HashMap<[i64; 3], Vec<usize>>,
    lo: [i64; 3],
    hi: [i64; 3],
}

impl<'a> SpatialHash<'a> {
    fn build(points: &'a [VoxelIndex], k: usize) -> Self {
        let mut lo = [i64::MAX; 3];
        let mut hi = [i64::MIN; 3];
        for p in points {
            for a in 0..3 {
                lo[a] = lo[a].min(p[a] as i64);
                hi[a] = hi[a].max(p[a] as i64);
            }
        }
        // aim for about k points per cell under uniform occupancy
        let volume: f64 = (0..3).map(|a| (hi[a] - lo[a] + 1) as f64).product();
        let cell = ((volume * k as f64 / points.len() as f64).cbrt().round() as i64).max(1);
        let mut cells: HashMap<[i64; 3], Vec<usize>> = HashMap::new();
        for (row, p) in points.iter().enumerate() {
            cells
                .entry(Self::cell_of(p.map(|c| c as i64), cell))
                .or_default()
                .push(row);
        }
        Self {
            points,
            cell,
            cells,
            lo: Self::cell_of(lo, cell),
            hi: Self::cell_of(hi, cell),
        }
    }

    fn cell_of(p: [i64; 3], cell: i64) -> [i64; 3] {
        p.map(|c| c.div_euclid(cell))
    }

    fn knn(&self, q: &VoxelIndex, k: usize) -> Vec<(i64, usize)> {
        let qc = Self::cell_of(q.map(|c| c as i64), self.cell);
        // rings beyond this Chebyshev radius contain no occupied cell
        let max_ring = (0..3)
            .map(|a| (qc[a] - self.lo[a]).abs().max((self.hi[a] - qc[a]).abs()))
            .max()
            .unwrap_or(0);
        let mut best: Vec<(i64, usize)> = Vec::with_capacity(2 * k);
        let mut visited = 0usize;
        for r in 0..=max_ring {
            self.visit_shell(qc, r, |rows| {
                visited += rows.len();
                for &row in rows {
                    let p = &self.points[row];
                    let d: i64 = (0..3).map(|a| ((p[a] - q[a]) as i64).pow(2)).sum();
                    best.push((d, row));
                }
            });
            if best.len() > k {
                best.select_nth_unstable(k - 1);
                best.truncate(k);
            }
            if visited == self.points.len() {
                break;
            }
            // anything in ring r+1 or beyond is at least r*cell+1 away on some axis
            let bound = r * self.cell + 1;
            if best.len() == k && best.iter().map(|b| b.0).max().unwrap_or(0) < bound * bound {
                break;
            }
        }
        best.sort_unstable();
        best
    }

    fn visit_shell(&self, qc: [i64; 3], r: i64, mut f: impl FnMut(&[usize])) {
        let range = |a: usize| {
            let lo = (-r).max(self.lo[a] - qc[a]);
            let hi = r.min(self.hi[a] - qc[a]);
            lo..=hi
        };
        for dx in range(0) {
            for dy in range(1) {
                let on_face = dx.abs() == r || dy.abs() == r;
                let mut visit = |dz: i64| {
                    if let Some(rows) = self.cells.get(&[qc[0] + dx, qc[1] + dy, qc[2] + dz]) {
                        f(rows);
                    }
                };
                if on_face {
                    for dz in range(2) {
                        visit(dz);
                    }
                } else {
                    let zr = range(2);
                    if zr.contains(&-r) {
                        visit(-r);
                    }
                    if r != 0 && zr.contains(&r) {
                        visit(r);
                    }
                }
            }
        }
    }
}

/// Neighbor features and indices laid out as dense `N × k` blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct GatheredNeighbors {
    /// `N × k × D`; zero on invalid slots.
    pub features: Array3<f64>,
    /// `N × k × 3`; zero on invalid slots.
    pub indices: Array3<i32>,
    pub mask: Array2<bool>,
}

pub fn gather_neighbors(past: &SparseVoxelSet, table: &Neighborhood) -> Result<GatheredNeighbors> {
    let features = gather_rows(past.features().view(), table)?;
    let (n, k) = (table.len(), table.k());
    let mut indices = Array3::zeros((n, k, 3));
    for i in 0..n {
        for (j, &row) in table.neighbors(i).iter().enumerate() {
            for a in 0..3 {
                indices[[i, j, a]] = past.indices()[row][a];
            }
        }
    }
    Ok(GatheredNeighbors {
        features,
        indices,
        mask: table.mask(),
    })
}

/// Copies `source` rows into an `N × k × C` block following `table`.
pub fn gather_rows(source: ArrayView2<f64>, table: &Neighborhood) -> Result<Array3<f64>> {
    let (n, k, c) = (table.len(), table.k(), source.ncols());
    let mut out = Array3::zeros((n, k, c));
    for i in 0..n {
        for (j, &row) in table.neighbors(i).iter().enumerate() {
            if row >= source.nrows() {
                return Err(Error::Corruption(format!(
                    "neighbor row {row} out of range for a past set of {}",
                    source.nrows()
                )));
            }
            out.slice_mut(ndarray::s![i, j, ..]).assign(&source.row(row));
        }
    }
    Ok(out)
}
