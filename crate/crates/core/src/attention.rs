//! Temporal local cross-attention over gathered past-frame neighborhoods.
//!
//! For current voxel `i` with neighbors `j` in past frame `n`:
//!
//! ```text
//! C(i,j,n) = <γ(V_t(i)), γ(V_local(i,j,n))> / sqrt(D_K)
//! P(i,·,·) = softmax over every valid (j, n) jointly
//! M(i)     = Σ_{j,n} P(i,j,n) · V_local(i,j,n)
//! out(i)   = σ(G_t[V_t(i); M(i)]) ⊙ V_t(i) + σ(G_M[V_t(i); M(i)]) ⊙ M(i)
//! ```
//!
//! The key adapter `γ` is shared by both sides. Values are the raw neighbor
//! features. Invalid (padding) slots never receive weight; a row without any
//! valid slot gets `M(i) = 0`.

use ndarray::{concatenate, s, Array1, Array2, Array3, ArrayView2, Axis, Zip};
use rand::Rng;

use crate::error::{Error, Result};
use crate::mlp::{Dense, Mlp, MlpCache, MlpGrads};
use crate::neighborhood::{gather_rows, Neighborhood, NeighborhoodTable};
use crate::sparse_grid::SparseVoxelSet;

/// Learned parameters: key adapter `γ: D → D_K` and the two fusion gates
/// `G_t, G_M: 2D → D`.
#[derive(Debug, Clone, PartialEq)]
pub struct StelaParams {
    pub key_adapter: Mlp,
    pub gate_t: Dense,
    pub gate_m: Dense,
}

impl StelaParams {
    pub fn new(key_adapter: Mlp, gate_t: Dense, gate_m: Dense) -> Result<Self> {
        let d = key_adapter.input_dim();
        for (name, g) in [("gate_t", &gate_t), ("gate_m", &gate_m)] {
            if g.input_dim() != 2 * d || g.output_dim() != d || g.bias.len() != d {
                return Err(Error::Config(format!(
                    "{name} must map {} -> {d}, got {} -> {}",
                    2 * d,
                    g.input_dim(),
                    g.output_dim()
                )));
            }
            if g.relu {
                return Err(Error::Config(format!("{name} must be linear")));
            }
            if !g.weight.iter().chain(g.bias.iter()).all(|v| v.is_finite()) {
                return Err(Error::Config(format!("{name} has non-finite weights")));
            }
        }
        Ok(Self {
            key_adapter,
            gate_t,
            gate_m,
        })
    }

    /// `D / 4`, but at least 8.
    pub fn default_key_dim(feature_dim: usize) -> usize {
        (feature_dim / 4).max(8)
    }

    /// Two-layer key adapter `D → hidden → D_K` and Xavier-initialised gates.
    pub fn xavier<R: Rng + ?Sized>(feature_dim: usize, key_dim: usize, hidden: usize, rng: &mut R) -> Result<Self> {
        if key_dim == 0 {
            return Err(Error::Config("key dim must be at least 1".into()));
        }
        let key_adapter = Mlp::xavier(&[feature_dim, hidden, key_dim], rng)?;
        let gate_t = Dense::xavier(2 * feature_dim, feature_dim, false, rng);
        let gate_m = Dense::xavier(2 * feature_dim, feature_dim, false, rng);
        Self::new(key_adapter, gate_t, gate_m)
    }

    /// Identity key adapter (`D_K = D`) and all-zero gates.
    pub fn identity_keys_zero_gates(feature_dim: usize) -> Self {
        Self {
            key_adapter: Mlp::identity(feature_dim, feature_dim),
            gate_t: Dense::zeros(2 * feature_dim, feature_dim, false),
            gate_m: Dense::zeros(2 * feature_dim, feature_dim, false),
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.key_adapter.input_dim()
    }

    pub fn key_dim(&self) -> usize {
        self.key_adapter.output_dim()
    }

    pub fn params_mut(&mut self) -> Vec<&mut f64> {
        let mut out = self.key_adapter.params_mut();
        for g in [&mut self.gate_t, &mut self.gate_m] {
            out.extend(g.weight.iter_mut().chain(g.bias.iter_mut()));
        }
        out
    }

    pub fn sgd_step(&mut self, grads: &StelaParamGrads, lr: f64) {
        self.key_adapter.sgd_step(&grads.key_adapter, lr);
        self.gate_t.weight.scaled_add(-lr, &grads.gate_t_weight);
        self.gate_t.bias.scaled_add(-lr, &grads.gate_t_bias);
        self.gate_m.weight.scaled_add(-lr, &grads.gate_m_weight);
        self.gate_m.bias.scaled_add(-lr, &grads.gate_m_bias);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StelaParamGrads {
    pub key_adapter: MlpGrads,
    pub gate_t_weight: Array2<f64>,
    pub gate_t_bias: Array1<f64>,
    pub gate_m_weight: Array2<f64>,
    pub gate_m_bias: Array1<f64>,
}

impl StelaParamGrads {
    /// Same order as [`StelaParams::params_mut`].
    pub fn values(&self) -> Vec<f64> {
        let mut out: Vec<f64> = self.key_adapter.values().collect();
        out.extend(self.gate_t_weight.iter().chain(self.gate_t_bias.iter()));
        out.extend(self.gate_m_weight.iter().chain(self.gate_m_bias.iter()));
        out
    }
}

/// Correlation scores per past frame (`N × k` each), `-inf` on invalid slots.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationBlock {
    pub scores: Vec<Array2<f64>>,
    pub masks: Vec<Array2<bool>>,
    /// Query count, kept so that zero past frames still yields `N` rows.
    pub rows: usize,
}

/// Attention weights per past frame (`N × k` each).
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMask {
    pub weights: Vec<Array2<f64>>,
    pub rows: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MemoryTensor(pub Array2<f64>);

#[derive(Debug, Clone, PartialEq)]
pub struct FusedFeatures(pub Array2<f64>);

pub fn compute_keys(v: ArrayView2<f64>, params: &StelaParams) -> Result<Array2<f64>> {
    if v.ncols() != params.feature_dim() {
        return Err(Error::Config(format!(
            "features have {} channels, key adapter expects {}",
            v.ncols(),
            params.feature_dim()
        )));
    }
    Ok(params.key_adapter.forward(v))
}

/// Scaled dot products between each query key and its gathered neighbor keys.
pub fn correlate(
    keys_q: ArrayView2<f64>,
    keys_local: &[Array3<f64>],
    masks: &[Array2<bool>],
    key_dim: usize,
) -> CorrelationBlock {
    let scale = 1.0 / (key_dim as f64).sqrt();
    let scores = keys_local
        .iter()
        .zip(masks)
        .map(|(local, mask)| {
            let mut c = Array2::from_elem(mask.raw_dim(), f64::NEG_INFINITY);
            Zip::from(c.rows_mut())
                .and(keys_q.rows())
                .and(local.outer_iter())
                .and(mask.rows())
                .par_for_each(|mut c_row, q, nbrs, m| {
                    for (j, nb) in nbrs.outer_iter().enumerate() {
                        if m[j] {
                            c_row[j] = q.dot(&nb) * scale;
                        }
                    }
                });
            c
        })
        .collect();
    CorrelationBlock {
        scores,
        masks: masks.to_vec(),
        rows: keys_q.nrows(),
    }
}

/// Softmax over every valid slot of every frame, per query row.
pub fn attention_softmax(block: &CorrelationBlock) -> AttentionMask {
    let mut weights: Vec<Array2<f64>> = block.scores.iter().map(|c| Array2::zeros(c.raw_dim())).collect();
    for i in 0..block.rows {
        let mut c_max = f64::NEG_INFINITY;
        for (c, m) in block.scores.iter().zip(&block.masks) {
            for (v, ok) in c.row(i).iter().zip(m.row(i)) {
                if *ok {
                    c_max = c_max.max(*v);
                }
            }
        }
        if c_max == f64::NEG_INFINITY {
            continue;
        }
        let mut total = 0.0;
        for ((c, m), p) in block.scores.iter().zip(&block.masks).zip(weights.iter_mut()) {
            for ((v, ok), w) in c.row(i).iter().zip(m.row(i)).zip(p.row_mut(i)) {
                if *ok {
                    *w = (v - c_max).exp();
                    total += *w;
                }
            }
        }
        for p in weights.iter_mut() {
            p.row_mut(i).mapv_inplace(|w| w / total);
        }
    }
    AttentionMask {
        weights,
        rows: block.rows,
    }
}

/// `M(i) = Σ_{j,n} P(i,j,n) V_local(i,j,n)`; invalid slots carry zero weight.
pub fn aggregate_memory(p: &AttentionMask, values_local: &[Array3<f64>], feature_dim: usize) -> MemoryTensor {
    let mut m = Array2::zeros((p.rows, feature_dim));
    for (w, vals) in p.weights.iter().zip(values_local) {
        Zip::from(m.rows_mut())
            .and(w.rows())
            .and(vals.outer_iter())
            .par_for_each(|mut m_row, w_row, v| {
                for (j, &wj) in w_row.iter().enumerate() {
                    if wj != 0.0 {
                        m_row.scaled_add(wj, &v.row(j));
                    }
                }
            });
    }
    MemoryTensor(m)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

struct FuseParts {
    z: Array2<f64>,
    g_t: Array2<f64>,
    g_m: Array2<f64>,
    out: Array2<f64>,
}

fn fuse_parts(v_t: ArrayView2<f64>, m: ArrayView2<f64>, params: &StelaParams) -> FuseParts {
    let z = concatenate(Axis(1), &[v_t, m]).expect("same row count");
    let g_t = params.gate_t.forward(z.view()).mapv(sigmoid);
    let g_m = params.gate_m.forward(z.view()).mapv(sigmoid);
    let out = &g_t * &v_t + &g_m * &m;
    FuseParts { z, g_t, g_m, out }
}

/// Gated fusion of current features and memory.
pub fn fuse(v_t: ArrayView2<f64>, memory: &MemoryTensor, params: &StelaParams) -> Result<FusedFeatures> {
    let d = params.feature_dim();
    if v_t.ncols() != d || memory.0.ncols() != d || v_t.nrows() != memory.0.nrows() {
        return Err(Error::Config(format!(
            "fuse expects two N×{d} inputs, got {:?} and {:?}",
            v_t.shape(),
            memory.0.shape()
        )));
    }
    Ok(FusedFeatures(fuse_parts(v_t, memory.0.view(), params).out))
}

/// Everything the backward pass needs from a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    v_t: Array2<f64>,
    past_rows: Vec<usize>,
    tables: Vec<Neighborhood>,
    q_cache: MlpCache,
    q_keys: Array2<f64>,
    past_caches: Vec<MlpCache>,
    local_keys: Vec<Array3<f64>>,
    local_values: Vec<Array3<f64>>,
    attention: AttentionMask,
    memory: Array2<f64>,
    z: Array2<f64>,
    g_t: Array2<f64>,
    g_m: Array2<f64>,
}

impl ForwardCache {
    pub fn attention(&self) -> &AttentionMask {
        &self.attention
    }

    pub fn memory(&self) -> &Array2<f64> {
        &self.memory
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StelaGrads {
    pub current: Array2<f64>,
    pub past: Vec<Array2<f64>>,
    pub params: StelaParamGrads,
}

fn check_inputs(
    current: &SparseVoxelSet,
    past: &[SparseVoxelSet],
    tables: &NeighborhoodTable,
    params: &StelaParams,
) -> Result<()> {
    let d = params.feature_dim();
    if current.dim() != d || past.iter().any(|p| p.dim() != d) {
        return Err(Error::Config(format!("voxel features must have {d} channels")));
    }
    if tables.frames.len() != past.len() {
        return Err(Error::Config(format!(
            "{} neighborhood tables for {} past frames",
            tables.frames.len(),
            past.len()
        )));
    }
    if tables.frames.iter().any(|t| t.len() != current.len()) {
        return Err(Error::Config(
            "neighborhood table rows differ from current voxel count".into(),
        ));
    }
    Ok(())
}

/// Full forward pass; returns the fused features and the cache for
/// [`stela_backward`].
pub fn stela_forward(
    current: &SparseVoxelSet,
    past: &[SparseVoxelSet],
    tables: &NeighborhoodTable,
    params: &StelaParams,
) -> Result<(FusedFeatures, ForwardCache)> {
    check_inputs(current, past, tables, params)?;
    let d = params.feature_dim();
    let v_t = current.features().clone();
    let (q_keys, q_cache) = params.key_adapter.forward_cached(v_t.view());

    let mut past_caches = Vec::with_capacity(past.len());
    let mut local_keys = Vec::with_capacity(past.len());
    let mut local_values = Vec::with_capacity(past.len());
    let mut masks = Vec::with_capacity(past.len());
    for (p, table) in past.iter().zip(&tables.frames) {
        let (keys, cache) = params.key_adapter.forward_cached(p.features().view());
        local_keys.push(gather_rows(keys.view(), table)?);
        local_values.push(gather_rows(p.features().view(), table)?);
        masks.push(table.mask());
        past_caches.push(cache);
    }

    let block = correlate(q_keys.view(), &local_keys, &masks, params.key_dim());
    let attention = attention_softmax(&block);
    let memory = aggregate_memory(&attention, &local_values, d).0;
    let parts = fuse_parts(v_t.view(), memory.view(), params);
    let cache = ForwardCache {
        v_t,
        past_rows: past.iter().map(|p| p.len()).collect(),
        tables: tables.frames.clone(),
        q_cache,
        q_keys,
        past_caches,
        local_keys,
        local_values,
        attention,
        memory,
        z: parts.z,
        g_t: parts.g_t,
        g_m: parts.g_m,
    };
    Ok((FusedFeatures(parts.out), cache))
}

/// Exact gradients of `Σ upstream ⊙ out` with respect to the current and
/// past features and every parameter tensor.
pub fn stela_backward(
    params: &StelaParams,
    cache: Option<&ForwardCache>,
    upstream: ArrayView2<f64>,
) -> Result<StelaGrads> {
    let cache = cache.ok_or_else(|| Error::Usage("backward called without a forward cache".into()))?;
    let (n, d) = cache.v_t.dim();
    if upstream.dim() != (n, d) {
        return Err(Error::Usage(format!(
            "upstream gradient is {:?}, forward output was {n}×{d}",
            upstream.shape()
        )));
    }
    let dk = params.key_dim();
    let scale = 1.0 / (dk as f64).sqrt();

    // gates
    let da_t = &upstream * &cache.v_t * &cache.g_t * cache.g_t.mapv(|g| 1.0 - g);
    let da_m = &upstream * &cache.memory * &cache.g_m * cache.g_m.mapv(|g| 1.0 - g);
    let gate_t_weight = da_t.t().dot(&cache.z);
    let gate_t_bias = da_t.sum_axis(Axis(0));
    let gate_m_weight = da_m.t().dot(&cache.z);
    let gate_m_bias = da_m.sum_axis(Axis(0));
    let dz = da_t.dot(&params.gate_t.weight) + da_m.dot(&params.gate_m.weight);
    let mut d_current = &upstream * &cache.g_t + dz.slice(s![.., ..d]);
    let d_memory = &upstream * &cache.g_m + dz.slice(s![.., d..]);

    // dP(i,j,n) = <dM(i), V_local(i,j,n)>
    let d_p: Vec<Array2<f64>> = cache
        .local_values
        .iter()
        .zip(&cache.attention.weights)
        .map(|(vals, w)| {
            let mut dp = Array2::zeros(w.raw_dim());
            Zip::from(dp.rows_mut())
                .and(d_memory.rows())
                .and(vals.outer_iter())
                .par_for_each(|mut dp_row, dm, v| {
                    for (j, nb) in v.outer_iter().enumerate() {
                        dp_row[j] = dm.dot(&nb);
                    }
                });
            dp
        })
        .collect();

    // joint softmax backward: dC = P (dP - Σ P dP)
    let mut row_dot = Array1::<f64>::zeros(n);
    for (w, dp) in cache.attention.weights.iter().zip(&d_p) {
        row_dot += &(w * dp).sum_axis(Axis(1));
    }
    let d_c: Vec<Array2<f64>> = cache
        .attention
        .weights
        .iter()
        .zip(&d_p)
        .map(|(w, dp)| {
            let mut dc = dp - &row_dot.view().insert_axis(Axis(1));
            dc *= w;
            dc
        })
        .collect();

    let mut d_q_keys = Array2::<f64>::zeros((n, dk));
    let mut d_past: Vec<Array2<f64>> = cache.past_rows.iter().map(|&r| Array2::zeros((r, d))).collect();
    let mut key_grads = MlpGrads::zeros_like(&params.key_adapter);
    for f in 0..cache.tables.len() {
        let table = &cache.tables[f];
        let (w, dc) = (&cache.attention.weights[f], &d_c[f]);
        let lk = &cache.local_keys[f];
        let mut d_past_keys = Array2::<f64>::zeros((cache.past_rows[f], dk));
        // sequential scatter keeps the accumulation order fixed
        for i in 0..n {
            for (j, &row) in table.neighbors(i).iter().enumerate() {
                let (pij, dcij) = (w[[i, j]], dc[[i, j]]);
                d_past[f].row_mut(row).scaled_add(pij, &d_memory.row(i));
                d_q_keys.row_mut(i).scaled_add(dcij * scale, &lk.slice(s![i, j, ..]));
                d_past_keys.row_mut(row).scaled_add(dcij * scale, &cache.q_keys.row(i));
            }
        }
        let (dx, g) = params.key_adapter.backward(&cache.past_caches[f], d_past_keys.view());
        d_past[f] += &dx;
        key_grads.add_assign(&g);
    }
    let (dx, g) = params.key_adapter.backward(&cache.q_cache, d_q_keys.view());
    d_current += &dx;
    key_grads.add_assign(&g);

    Ok(StelaGrads {
        current: d_current,
        past: d_past,
        params: StelaParamGrads {
            key_adapter: key_grads,
            gate_t_weight,
            gate_t_bias,
            gate_m_weight,
            gate_m_bias,
        },
    })
}

/// Attention over every voxel of every past frame, no neighborhood
/// restriction. Used as the dense comparison point for benchmarks.
pub fn global_cross_attention(
    current: &SparseVoxelSet,
    past: &[SparseVoxelSet],
    params: &StelaParams,
) -> Result<FusedFeatures> {
    let d = params.feature_dim();
    let v_t = current.features();
    let q = compute_keys(v_t.view(), params)?;
    let keys: Vec<Array2<f64>> = past
        .iter()
        .map(|p| compute_keys(p.features().view(), params))
        .collect::<Result<_>>()?;
    let scale = 1.0 / (params.key_dim() as f64).sqrt();
    let mut memory = Array2::zeros((current.len(), d));
    Zip::from(memory.rows_mut()).and(q.rows()).par_for_each(|mut m, qi| {
        let scores: Vec<Array1<f64>> = keys.iter().map(|k| k.dot(&qi) * scale).collect();
        let c_max = scores
            .iter()
            .flat_map(|s| s.iter().copied())
            .fold(f64::NEG_INFINITY, f64::max);
        if c_max == f64::NEG_INFINITY {
            return;
        }
        let mut total = 0.0;
        for (s, p) in scores.iter().zip(past) {
            for (row, &c) in s.iter().enumerate() {
                let w = (c - c_max).exp();
                total += w;
                m.scaled_add(w, &p.features().row(row));
            }
        }
        m.mapv_inplace(|v| v / total);
    });
    fuse(v_t.view(), &MemoryTensor(memory), params)
}

/// Stateful wrapper that keeps the last forward cache around.
#[derive(Debug, Clone)]
pub struct StelaModule {
    pub params: StelaParams,
    cache: Option<ForwardCache>,
}

impl StelaModule {
    pub fn new(params: StelaParams) -> Self {
        Self { params, cache: None }
    }

    pub fn forward(
        &mut self,
        current: &SparseVoxelSet,
        past: &[SparseVoxelSet],
        tables: &NeighborhoodTable,
    ) -> Result<FusedFeatures> {
        let (out, cache) = stela_forward(current, past, tables, &self.params)?;
        self.cache = Some(cache);
        Ok(out)
    }

    pub fn backward(&self, upstream: ArrayView2<f64>) -> Result<StelaGrads> {
        stela_backward(&self.params, self.cache.as_ref(), upstream)
    }

    pub fn cache(&self) -> Option<&ForwardCache> {
        self.cache.as_ref()
    }

    pub fn clear(&mut self) {
        self.cache = None;
    }
}
