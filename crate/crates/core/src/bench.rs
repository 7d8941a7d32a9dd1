//! Local-versus-global attention benchmark with exact FLOP instrumentation.
//!
//! Both kernels run the correlation and aggregation steps in `f32` on
//! precomputed keys and neighborhood tables. Each key dot product counts
//! `2·D_K` operations and each weighted value accumulation `2·D`; softmax
//! exponentials are not counted. Local attention therefore performs exactly
//! `N·k·(2·D_K + 2·D)` operations and global attention `N·N_past·(2·D_K + 2·D)`.

use std::collections::BTreeSet;
use std::time::Instant;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::neighborhood::{knn_neighborhood, Neighborhood};
use crate::report::BenchRow;
use crate::sparse_grid::{GridConfig, SparseVoxelSet, VoxelIndex};

/// Row-major `f32` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct MatF32 {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

impl MatF32 {
    pub fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            rows,
            cols,
            data: (0..rows * cols).map(|_| rng.random_range(-1.0f32..1.0)).collect(),
        }
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }
}

fn dot(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Softmax-weighted sum of `values` rows listed in `rows`, scored against
/// `q`. Returns the operations performed.
fn attend_row(
    q: &[f32],
    keys: &MatF32,
    values: &MatF32,
    rows: impl Iterator<Item = usize> + Clone,
    scale: f32,
    out: &mut [f32],
) -> u64 {
    let mut flops = 0u64;
    let scores: Vec<f32> = rows
        .clone()
        .map(|j| {
            flops += 2 * keys.cols as u64;
            dot(q, keys.row(j)) * scale
        })
        .collect();
    let m = scores.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    if m == f32::NEG_INFINITY {
        return flops;
    }
    let weights: Vec<f32> = scores.iter().map(|s| (s - m).exp()).collect();
    let z: f32 = weights.iter().sum();
    for (w, j) in weights.iter().zip(rows) {
        let w = w / z;
        for (o, v) in out.iter_mut().zip(values.row(j)) {
            *o += w * v;
        }
        flops += 2 * values.cols as u64;
    }
    flops
}

/// Memory tensor from each query's neighbor list. Returns `(N × D, ops)`.
pub fn local_attention_f32(q: &MatF32, keys: &MatF32, values: &MatF32, table: &Neighborhood) -> (MatF32, u64) {
    let d = values.cols;
    let scale = 1.0 / (keys.cols as f32).sqrt();
    let mut out = vec![0.0f32; q.rows * d];
    let flops = out
        .par_chunks_mut(d)
        .enumerate()
        .map(|(i, o)| attend_row(q.row(i), keys, values, table.neighbors(i).iter().copied(), scale, o))
        .sum();
    (
        MatF32 {
            rows: q.rows,
            cols: d,
            data: out,
        },
        flops,
    )
}

/// Memory tensor from every past row. Returns `(N × D, ops)`.
pub fn global_attention_f32(q: &MatF32, keys: &MatF32, values: &MatF32) -> (MatF32, u64) {
    let d = values.cols;
    let scale = 1.0 / (keys.cols as f32).sqrt();
    let mut out = vec![0.0f32; q.rows * d];
    let flops = out
        .par_chunks_mut(d)
        .enumerate()
        .map(|(i, o)| attend_row(q.row(i), keys, values, 0..keys.rows, scale, o))
        .sum();
    (
        MatF32 {
            rows: q.rows,
            cols: d,
            data: out,
        },
        flops,
    )
}

/// Closed-form operation count for `n` queries with `slots` keys each.
pub fn attention_flop_formula(n: usize, slots: usize, key_dim: usize, feature_dim: usize) -> u64 {
    (n * slots * (2 * key_dim + 2 * feature_dim)) as u64
}

/// `n` distinct occupied cells drawn uniformly from the grid.
pub fn random_occupancy(n: usize, grid: &GridConfig, rng: &mut ChaCha8Rng) -> Result<SparseVoxelSet> {
    if n > grid.cell_count() {
        return Err(Error::Config(format!(
            "{n} voxels do not fit in {} cells",
            grid.cell_count()
        )));
    }
    let mut set = BTreeSet::new();
    while set.len() < n {
        set.insert([
            rng.random_range(0..grid.h as i32),
            rng.random_range(0..grid.w as i32),
            rng.random_range(0..grid.l as i32),
        ]);
    }
    let idx: Vec<VoxelIndex> = set.into_iter().collect();
    SparseVoxelSet::new(Array2::zeros((n, 1)), idx)
}

/// Timings of one benchmark size, medians over repeats.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchTiming {
    pub n: usize,
    pub k: usize,
    pub local_seconds: f64,
    pub global_seconds: f64,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

/// Times local and global attention with `N_past = N` on random occupancy
/// of `grid`. Sizes whose global count exceeds `max_flops` are skipped.
#[allow(clippy::too_many_arguments)]
pub fn bench_attention(
    n_grid: &[usize],
    k_grid: &[usize],
    feature_dim: usize,
    key_dim: usize,
    repeats: usize,
    max_flops: u64,
    grid: &GridConfig,
    seed: u64,
) -> Result<(Vec<BenchRow>, Vec<BenchTiming>)> {
    if repeats == 0 || feature_dim == 0 || key_dim == 0 {
        return Err(Error::Config("repeats and dims must be at least 1".into()));
    }
    let mut rows = Vec::new();
    let mut timings = Vec::new();
    for &n in n_grid {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ n as u64);
        let cur = random_occupancy(n, grid, &mut rng)?;
        let past = random_occupancy(n, grid, &mut rng)?;
        let q = MatF32::random(n, key_dim, &mut rng);
        let keys = MatF32::random(n, key_dim, &mut rng);
        let values = MatF32::random(n, feature_dim, &mut rng);
        for &k in k_grid {
            let global_flops = attention_flop_formula(n, n, key_dim, feature_dim);
            let mut row = BenchRow {
                n,
                k,
                feature_dim,
                key_dim,
                local_flops: 0,
                global_flops: 0,
                skipped: global_flops > max_flops,
            };
            if row.skipped {
                eprintln!("bench: skipping N={n}, k={k}: {global_flops} global operations exceed the budget");
                rows.push(row);
                continue;
            }
            let table = knn_neighborhood(&cur, &past, k)?;
            let mut lt = Vec::new();
            let mut gt = Vec::new();
            for _ in 0..repeats {
                let t = Instant::now();
                let (_, f) = local_attention_f32(&q, &keys, &values, &table);
                lt.push(t.elapsed().as_secs_f64());
                row.local_flops = f;
                let t = Instant::now();
                let (_, f) = global_attention_f32(&q, &keys, &values);
                gt.push(t.elapsed().as_secs_f64());
                row.global_flops = f;
            }
            timings.push(BenchTiming {
                n,
                k,
                local_seconds: median(lt),
                global_seconds: median(gt),
            });
            rows.push(row);
        }
    }
    Ok((rows, timings))
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn loglog_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let cov: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let var: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    cov / var
}
