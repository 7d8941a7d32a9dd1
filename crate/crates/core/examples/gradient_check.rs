//! Compares the hand-written attention backward pass against central finite
//! differences for every parameter of the block.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stela::attention::{stela_backward, stela_forward, StelaParams};
use stela::neighborhood::{KnnOptions, NeighborhoodTable};
use stela::sparse_grid::{SparseVoxelSet, VoxelIndex};

fn main() -> stela::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let d = 4;
    let set = |rng: &mut ChaCha8Rng, cells: &[VoxelIndex]| {
        SparseVoxelSet::new(
            Array2::from_shape_simple_fn((cells.len(), d), || rng.random_range(-1.0..1.0)),
            cells.to_vec(),
        )
    };
    let current = set(&mut rng, &[[0, 0, 0], [0, 1, 0], [1, 0, 1], [2, 2, 0]])?;
    let past = vec![set(&mut rng, &[[0, 0, 1], [1, 1, 0], [2, 1, 1]])?];
    let tables = NeighborhoodTable::build(&current, &past, 2, KnnOptions::default())?;
    let mut params = StelaParams::xavier(d, 3, 5, &mut rng)?;
    let upstream = Array2::from_shape_simple_fn((current.len(), d), || rng.random_range(-1.0..1.0));

    let (_, cache) = stela_forward(&current, &past, &tables, &params)?;
    let analytic = stela_backward(&params, Some(&cache), upstream.view())?.params.values();

    let objective = |p: &StelaParams| -> stela::Result<f64> {
        Ok((&stela_forward(&current, &past, &tables, p)?.0 .0 * &upstream).sum())
    };
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for (i, a) in analytic.iter().enumerate() {
        let orig = *params.params_mut()[i];
        *params.params_mut()[i] = orig + h;
        let up = objective(&params)?;
        *params.params_mut()[i] = orig - h;
        let down = objective(&params)?;
        *params.params_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * h);
        worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-2));
    }
    println!("{} parameters, max relative error {worst:.2e}", analytic.len());
    Ok(())
}
