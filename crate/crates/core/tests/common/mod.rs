//! Independent reference implementations shared by the integration tests.
//! Everything here is written with plain loops and `Vec`s so it does not
//! share code paths with the library.
#![allow(dead_code)]

use std::collections::BTreeSet;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stela::attention::StelaParams;
use stela::mlp::Mlp;
use stela::sparse_grid::{SparseVoxelSet, VoxelIndex};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// `n` distinct random indices in `[0, extent)³`, random features.
pub fn random_set(rng: &mut ChaCha8Rng, n: usize, extent: [i32; 3], dim: usize) -> SparseVoxelSet {
    let cap = (extent[0] * extent[1] * extent[2]) as usize;
    assert!(n <= cap);
    let mut idx = BTreeSet::new();
    while idx.len() < n {
        idx.insert([
            rng.random_range(0..extent[0]),
            rng.random_range(0..extent[1]),
            rng.random_range(0..extent[2]),
        ]);
    }
    let idx: Vec<VoxelIndex> = idx.into_iter().collect();
    let feats = Array2::from_shape_simple_fn((n, dim), || rng.random_range(-1.0..1.0));
    SparseVoxelSet::new(feats, idx).unwrap()
}

/// StelaParams with random non-zero biases so every code path is exercised.
pub fn random_params(rng: &mut ChaCha8Rng, d: usize, dk: usize, hidden: usize) -> StelaParams {
    let mut p = StelaParams::xavier(d, dk, hidden, rng).unwrap();
    for v in p.params_mut() {
        *v += rng.random_range(-0.2..0.2);
    }
    p
}

pub fn mlp_loop(mlp: &Mlp, x: &[f64]) -> Vec<f64> {
    let mut h = x.to_vec();
    for l in &mlp.layers {
        let mut out = vec![0.0; l.output_dim()];
        for (o, out_v) in out.iter_mut().enumerate() {
            let mut acc = l.bias[o];
            for (i, hv) in h.iter().enumerate() {
                acc += l.weight[[o, i]] * hv;
            }
            *out_v = if l.relu { acc.max(0.0) } else { acc };
        }
        h = out;
    }
    h
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// σ(G_t[v; m]) ⊙ v + σ(G_M[v; m]) ⊙ m, one row, with loops.
pub fn fuse_loop(p: &StelaParams, v: &[f64], m: &[f64]) -> Vec<f64> {
    let z: Vec<f64> = v.iter().chain(m.iter()).copied().collect();
    let d = v.len();
    (0..d)
        .map(|o| {
            let mut at = p.gate_t.bias[o];
            let mut am = p.gate_m.bias[o];
            for (i, zi) in z.iter().enumerate() {
                at += p.gate_t.weight[[o, i]] * zi;
                am += p.gate_m.weight[[o, i]] * zi;
            }
            sigmoid(at) * v[o] + sigmoid(am) * m[o]
        })
        .collect()
}

/// Cross-attention from every current voxel to every voxel of every past
/// frame, followed by the gated fusion.
pub fn global_attention_oracle(current: &SparseVoxelSet, past: &[SparseVoxelSet], p: &StelaParams) -> Vec<Vec<f64>> {
    let dk = p.key_dim() as f64;
    let row = |s: &SparseVoxelSet, i: usize| s.features().row(i).to_vec();
    (0..current.len())
        .map(|i| {
            let v = row(current, i);
            let q = mlp_loop(&p.key_adapter, &v);
            let mut scores = Vec::new();
            let mut values = Vec::new();
            for f in past {
                for j in 0..f.len() {
                    let vj = row(f, j);
                    let kj = mlp_loop(&p.key_adapter, &vj);
                    let dot: f64 = q.iter().zip(&kj).map(|(a, b)| a * b).sum();
                    scores.push(dot / dk.sqrt());
                    values.push(vj);
                }
            }
            let mut m = vec![0.0; v.len()];
            if !scores.is_empty() {
                let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
                let z: f64 = e.iter().sum();
                for (w, val) in e.iter().zip(&values) {
                    for (mc, vc) in m.iter_mut().zip(val) {
                        *mc += w / z * vc;
                    }
                }
            }
            fuse_loop(p, &v, &m)
        })
        .collect()
}

/// Central difference of `f` at `x[i]`.
pub fn central_diff(f: &mut dyn FnMut() -> f64, x: &mut f64, h: f64) -> f64 {
    let orig = *x;
    *x = orig + h;
    let fp = f();
    *x = orig - h;
    let fm = f();
    *x = orig;
    (fp - fm) / (2.0 * h)
}

/// Relative error with an absolute floor so that near-zero gradients are
/// compared in absolute terms.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-2)
}

/// Outcome of a finite-difference sweep.
#[derive(Debug, Default, Clone, Copy)]
pub struct GradCheck {
    pub max_rel_err: f64,
    pub checked: usize,
    /// Entries skipped because the perturbation crossed a rectifier kink.
    pub skipped_kinks: usize,
}

impl GradCheck {
    fn record(&mut self, analytic: f64, numeric: f64) {
        self.max_rel_err = self.max_rel_err.max(rel_err(analytic, numeric));
        self.checked += 1;
    }
}

fn relu_pattern(p: &StelaParams, sets: &[&SparseVoxelSet]) -> Vec<bool> {
    let mut out = Vec::new();
    for s in sets {
        for row in s.features().rows() {
            let x = row.to_vec();
            let mut h = x;
            for l in &p.key_adapter.layers {
                let mut next = vec![0.0; l.output_dim()];
                for (o, nv) in next.iter_mut().enumerate() {
                    let mut acc = l.bias[o];
                    for (i, hv) in h.iter().enumerate() {
                        acc += l.weight[[o, i]] * hv;
                    }
                    if l.relu {
                        out.push(acc > 0.0);
                    }
                    *nv = if l.relu { acc.max(0.0) } else { acc };
                }
                h = next;
            }
        }
    }
    out
}

/// Checks `stela_backward` against central differences of
/// `Σ upstream ⊙ stela_forward(...)` for every input and parameter entry.
pub fn stela_fd_check(seed: u64, step: f64) -> GradCheck {
    use stela::attention::{stela_backward, stela_forward};
    use stela::neighborhood::{KnnOptions, NeighborhoodTable};

    let mut r = rng(seed);
    let d = 4;
    let dk = 3;
    let n_past = 1 + (seed % 3) as usize;
    let mut current = random_set(&mut r, 6, [4, 4, 2], d);
    let mut past: Vec<SparseVoxelSet> = (0..n_past)
        .map(|f| random_set(&mut r, 2 + 3 * f, [4, 4, 2], d))
        .collect();
    let k = 3;
    let mut params = random_params(&mut r, d, dk, 5);
    let upstream = Array2::from_shape_simple_fn((current.len(), d), || r.random_range(-1.0..1.0));
    let tables = NeighborhoodTable::build(&current, &past, k, KnnOptions::default()).unwrap();

    let (_, cache) = stela_forward(&current, &past, &tables, &params).unwrap();
    let grads = stela_backward(&params, Some(&cache), upstream.view()).unwrap();

    let mut result = GradCheck::default();
    let objective = |c: &SparseVoxelSet, p: &[SparseVoxelSet], prm: &StelaParams| -> f64 {
        let (out, _) = stela_forward(c, p, &tables, prm).unwrap();
        (&out.0 * &upstream).sum()
    };
    let pattern_at = |c: &SparseVoxelSet, p: &[SparseVoxelSet], prm: &StelaParams| {
        let mut sets = vec![c];
        sets.extend(p.iter());
        relu_pattern(prm, &sets)
    };

    let nudge = |which: usize,
                 idx: usize,
                 delta: f64,
                 current: &mut SparseVoxelSet,
                 past: &mut [SparseVoxelSet],
                 params: &mut StelaParams| {
        match which {
            0 => current.features_mut().as_slice_mut().unwrap()[idx] += delta,
            1..=9 => past[which - 1].features_mut().as_slice_mut().unwrap()[idx] += delta,
            _ => *params.params_mut().into_iter().nth(idx).unwrap() += delta,
        }
    };
    let eval = |which: usize,
                idx: usize,
                delta: f64,
                current: &mut SparseVoxelSet,
                past: &mut [SparseVoxelSet],
                params: &mut StelaParams|
     -> (f64, Vec<bool>) {
        nudge(which, idx, delta, current, past, params);
        let f = objective(current, past, params);
        let pat = pattern_at(current, past, params);
        nudge(which, idx, -delta, current, past, params);
        (f, pat)
    };

    let mut targets: Vec<(usize, usize, f64)> = Vec::new();
    for (i, g) in grads.current.iter().enumerate() {
        targets.push((0, i, *g));
    }
    for (f, gp) in grads.past.iter().enumerate() {
        for (i, g) in gp.iter().enumerate() {
            targets.push((f + 1, i, *g));
        }
    }
    for (i, g) in grads.params.values().into_iter().enumerate() {
        targets.push((10, i, g));
    }
    for (which, idx, analytic) in targets {
        let (fp, pp) = eval(which, idx, step, &mut current, &mut past, &mut params);
        let (fm, pm) = eval(which, idx, -step, &mut current, &mut past, &mut params);
        if pp != pm {
            result.skipped_kinks += 1;
            continue;
        }
        result.record(analytic, (fp - fm) / (2.0 * step));
    }
    result
}
