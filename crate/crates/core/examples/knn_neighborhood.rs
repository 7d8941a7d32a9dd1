//! Builds local neighborhoods between a current frame and its aligned past
//! frames and checks the accelerated search against brute force.

use stela::model::{prepare_sample, SampleSpec};
use stela::neighborhood::knn_bruteforce;
use stela::sparse_grid::GridConfig;
use stela::synthetic::{motion_ambiguous_scenes, MotionSceneSpec};

fn main() -> stela::Result<()> {
    let grid = GridConfig {
        rho_max: 16.0,
        z_min: -2.0,
        z_max: 1.0,
        h: 32,
        w: 90,
        l: 6,
        ..GridConfig::default()
    };
    let frames = &motion_ambiguous_scenes(&MotionSceneSpec::default(), 1, 0)?[0];
    let spec = SampleSpec {
        n_past: 2,
        k: 8,
        aligned: true,
        knn: Default::default(),
    };
    let sample = prepare_sample(frames, frames.len() - 1, &spec, &grid, 3)?;

    let cur = &sample.current.voxels;
    for (n, (table, past)) in sample.tables.frames.iter().zip(&sample.past).enumerate() {
        let exact = knn_bruteforce(cur, &past.voxels, spec.k)? == *table;
        let mean: f64 = (0..table.len()).map(|i| table.distance(i, 0)).sum::<f64>() / table.len() as f64;
        println!(
            "t-{}: {} past voxels, mean nearest distance {mean:.3} cells, matches brute force: {exact}",
            n + 1,
            past.voxels.len()
        );
    }
    let i = cur.len() / 2;
    println!("voxel {:?} neighbors in t-1:", cur.indices()[i]);
    for (j, &row) in sample.tables.frames[0].neighbors(i).iter().enumerate() {
        println!(
            "  {:?} at {:.3}",
            sample.past[0].voxels.indices()[row],
            sample.tables.frames[0].distance(i, j)
        );
    }
    Ok(())
}
