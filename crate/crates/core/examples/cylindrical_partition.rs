//! Bins a synthetic scan into the cylindrical grid, max-pools encoded point
//! features per voxel and round-trips the sparse set through a dense grid.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use stela::geometry::to_cylindrical;
use stela::mlp::Mlp;
use stela::sparse_grid::{decompose, densify, encode_points, partition_scan, voxel_index, GridConfig};
use stela::synthetic::{motion_ambiguous_scenes, MotionSceneSpec};

fn main() -> stela::Result<()> {
    let cfg = GridConfig {
        rho_max: 16.0,
        z_min: -2.0,
        z_max: 1.0,
        h: 32,
        w: 90,
        l: 6,
        feature_dim: 8,
        ..GridConfig::default()
    };
    let p = [3.0, 4.0, -1.0];
    println!(
        "point {p:?} -> {:?} -> cell {:?}",
        to_cylindrical(p),
        voxel_index(&to_cylindrical(p), &cfg)
    );

    let frame = &motion_ambiguous_scenes(&MotionSceneSpec::default(), 1, 0)?[0][2];
    let part = partition_scan(&frame.scan, &cfg);
    let encoder = Mlp::xavier(&[6, 16, cfg.feature_dim], &mut ChaCha8Rng::seed_from_u64(0))?;
    let voxels = encode_points(&part.features, &part.assignments, &encoder, &cfg)?;
    println!(
        "{} points, {} in bounds, {} occupied of {} cells",
        frame.scan.len(),
        part.features.len(),
        voxels.len(),
        cfg.cell_count()
    );

    let dense = densify(&voxels, &cfg)?;
    let back = decompose(&dense, &cfg)?;
    println!(
        "dense shape {:?}, sparse round trip exact: {}",
        dense.values.shape(),
        back == voxels
    );
    Ok(())
}
