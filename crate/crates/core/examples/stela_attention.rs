//! Runs the local temporal attention block on random voxel sets, inspects
//! the attention weights and compares against global cross-attention once
//! the neighborhood covers every past voxel.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stela::attention::{global_cross_attention, stela_forward, StelaParams};
use stela::neighborhood::{KnnOptions, NeighborhoodTable};
use stela::sparse_grid::{SparseVoxelSet, VoxelIndex};

fn random_set(rng: &mut ChaCha8Rng, n: usize, d: usize) -> stela::Result<SparseVoxelSet> {
    let idx: Vec<VoxelIndex> = (0..n)
        .map(|_| [rng.random_range(0..20), rng.random_range(0..20), rng.random_range(0..4)])
        .collect();
    let mut idx = idx;
    idx.sort();
    idx.dedup();
    let feats = Array2::from_shape_simple_fn((idx.len(), d), || rng.random_range(-1.0..1.0));
    SparseVoxelSet::new(feats, idx)
}

fn main() -> stela::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let d = 16;
    let current = random_set(&mut rng, 200, d)?;
    let past = vec![random_set(&mut rng, 180, d)?, random_set(&mut rng, 150, d)?];
    let params = StelaParams::xavier(d, StelaParams::default_key_dim(d), d, &mut rng)?;

    let tables = NeighborhoodTable::build(&current, &past, 16, KnnOptions::default())?;
    let (fused, cache) = stela_forward(&current, &past, &tables, &params)?;
    let w = cache.attention();
    let row0: Vec<String> = w.weights.iter().map(|f| format!("{:.3}", f.row(0).sum())).collect();
    println!(
        "fused {:?}; voxel 0 attention mass per past frame: {}",
        fused.0.dim(),
        row0.join(", ")
    );

    let k = past.iter().map(|p| p.len()).max().unwrap_or(1);
    let full = NeighborhoodTable::build(&current, &past, k, KnnOptions::default())?;
    let (local, _) = stela_forward(&current, &past, &full, &params)?;
    let global = global_cross_attention(&current, &past, &params)?;
    let diff = (&local.0 - &global.0).iter().fold(0.0f64, |m, v| m.max(v.abs()));
    println!("k = {k} (all past voxels): max |local - global| = {diff:.2e}");
    Ok(())
}
