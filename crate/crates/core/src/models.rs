//! Scoring models over user/item embedding tables with exact manual gradients.
//!
//! Parameters live in two groups: per-user / per-item embedding tables (updated
//! sparsely) and dense head weights. The layout per kind is
//!
//! | kind | tables                                         | dense                                        |
//! |------|------------------------------------------------|----------------------------------------------|
//! | Pop  | –                                              | –                                            |
//! | MF   | user emb, item emb, user bias, item bias       | –                                            |
//! | GMF  | user emb, item emb                             | output weights `1×d`                         |
//! | MLP  | user emb, item emb                             | `W_l, b_l` per hidden layer, output `w, b`   |
//! | NCF  | GMF user, GMF item, MLP user, MLP item         | `W_l, b_l` per hidden layer, fusion `w, b`   |

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::data::{Batch, SplitDataset};
use crate::error::{Error, Result};
use crate::numerics::{dot, DenseMatrix};

pub const INIT_STD: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ModelKind {
    Pop,
    MF,
    GMF,
    MLP,
    NCF,
}

impl ModelKind {
    pub const TRAINABLE: [ModelKind; 4] = [
        ModelKind::MF,
        ModelKind::GMF,
        ModelKind::MLP,
        ModelKind::NCF,
    ];
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ModelKind::Pop => "Pop",
            ModelKind::MF => "MF",
            ModelKind::GMF => "GMF",
            ModelKind::MLP => "MLP",
            ModelKind::NCF => "NCF",
        };
        f.write_str(s)
    }
}

impl FromStr for ModelKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "pop" => Ok(ModelKind::Pop),
            "mf" | "cf" => Ok(ModelKind::MF),
            "gmf" => Ok(ModelKind::GMF),
            "mlp" => Ok(ModelKind::MLP),
            "ncf" => Ok(ModelKind::NCF),
            other => Err(Error::config(format!("unknown model kind {:?}", other))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Side {
    User,
    Item,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingTable {
    pub side: Side,
    pub weights: DenseMatrix,
}

/// A scoring model `f(u, i)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecModel {
    kind: ModelKind,
    dim: usize,
    n_users: usize,
    n_items: usize,
    layer_spec: Vec<usize>,
    tables: Vec<EmbeddingTable>,
    dense: Vec<DenseMatrix>,
    pop_scores: Vec<f64>,
}

/// Gradients mirroring a [`RecModel`]: sparse rows for each embedding table and
/// full matrices for the dense head.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGradients {
    pub tables: Vec<BTreeMap<usize, Vec<f64>>>,
    pub dense: Vec<DenseMatrix>,
}

impl ModelGradients {
    pub fn zeros_like(model: &RecModel) -> Self {
        ModelGradients {
            tables: vec![BTreeMap::new(); model.tables.len()],
            dense: model
                .dense
                .iter()
                .map(|m| DenseMatrix::zeros(m.rows(), m.cols()))
                .collect(),
        }
    }

    fn add_row(&mut self, table: usize, row: usize, values: &[f64], scale: f64) {
        let entry = self.tables[table]
            .entry(row)
            .or_insert_with(|| vec![0.0; values.len()]);
        for (e, v) in entry.iter_mut().zip(values) {
            *e += scale * v;
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for t in &mut self.tables {
            for row in t.values_mut() {
                row.iter_mut().for_each(|x| *x *= factor);
            }
        }
        for d in &mut self.dense {
            d.as_mut_slice().iter_mut().for_each(|x| *x *= factor);
        }
    }

    pub fn squared_norm(&self) -> f64 {
        let t: f64 = self
            .tables
            .iter()
            .flat_map(|t| t.values())
            .flat_map(|r| r.iter())
            .map(|x| x * x)
            .sum();
        t + self
            .dense
            .iter()
            .map(DenseMatrix::squared_norm)
            .sum::<f64>()
    }

    /// Flattens into the parameter order of [`RecModel::params_flat`].
    pub fn to_flat(&self, model: &RecModel) -> Vec<f64> {
        let mut out = Vec::with_capacity(model.n_params());
        for (t, table) in model.tables.iter().enumerate() {
            let cols = table.weights.cols();
            for r in 0..table.weights.rows() {
                match self.tables[t].get(&r) {
                    Some(g) => out.extend_from_slice(g),
                    None => out.extend(std::iter::repeat_n(0.0, cols)),
                }
            }
        }
        for d in &self.dense {
            out.extend_from_slice(d.as_slice());
        }
        out
    }
}

/// Activations kept from a forward pass through the MLP tower.
#[derive(Debug, Default)]
struct TowerCache {
    input: Vec<f64>,
    pre: Vec<Vec<f64>>,
    post: Vec<Vec<f64>>,
}

fn glorot<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> DenseMatrix {
    let a = (6.0 / (rows + cols) as f64).sqrt();
    let dist = Uniform::new_inclusive(-a, a).expect("valid glorot bound");
    let data = (0..rows * cols).map(|_| dist.sample(rng)).collect();
    DenseMatrix::from_vec(rows, cols, data).expect("shape")
}

fn normal_table<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> DenseMatrix {
    let dist = Normal::new(0.0, INIT_STD).expect("valid std");
    let data = (0..rows * cols).map(|_| dist.sample(rng)).collect();
    DenseMatrix::from_vec(rows, cols, data).expect("shape")
}

/// Default MLP tower `[2d → d → d/2 → 1]`: hidden sizes `[d, max(d/2, 1)]`.
pub fn default_layer_spec(dim: usize) -> Vec<usize> {
    vec![dim, (dim / 2).max(1)]
}

/// Builds a freshly initialized model.
///
/// Embeddings are drawn from `N(0, 0.01²)`, head weights Glorot-uniform, biases
/// zero. `layer_spec` gives the hidden sizes of the MLP tower (MLP and NCF only);
/// `None` selects [`default_layer_spec`].
pub fn init_model<R: Rng + ?Sized>(
    kind: ModelKind,
    n_users: usize,
    n_items: usize,
    dim: usize,
    layer_spec: Option<&[usize]>,
    rng: &mut R,
) -> Result<RecModel> {
    if dim == 0 {
        return Err(Error::config("hidden dimension must be at least 1"));
    }
    let layer_spec = match kind {
        ModelKind::MLP | ModelKind::NCF => layer_spec
            .map(<[usize]>::to_vec)
            .unwrap_or_else(|| default_layer_spec(dim)),
        _ => Vec::new(),
    };
    if layer_spec.contains(&0) {
        return Err(Error::config("hidden layer sizes must be positive"));
    }
    let user = |rng: &mut R| EmbeddingTable {
        side: Side::User,
        weights: normal_table(n_users, dim, rng),
    };
    let item = |rng: &mut R| EmbeddingTable {
        side: Side::Item,
        weights: normal_table(n_items, dim, rng),
    };
    let mut tables = Vec::new();
    let mut dense = Vec::new();
    let tower = |rng: &mut R, dense: &mut Vec<DenseMatrix>| -> usize {
        let mut fan_in = 2 * dim;
        for &h in &layer_spec {
            dense.push(glorot(h, fan_in, rng));
            dense.push(DenseMatrix::zeros(1, h));
            fan_in = h;
        }
        fan_in
    };
    match kind {
        ModelKind::Pop => {}
        ModelKind::MF => {
            tables.push(user(rng));
            tables.push(item(rng));
            tables.push(EmbeddingTable {
                side: Side::User,
                weights: DenseMatrix::zeros(n_users, 1),
            });
            tables.push(EmbeddingTable {
                side: Side::Item,
                weights: DenseMatrix::zeros(n_items, 1),
            });
        }
        ModelKind::GMF => {
            tables.push(user(rng));
            tables.push(item(rng));
            dense.push(glorot(1, dim, rng));
        }
        ModelKind::MLP => {
            tables.push(user(rng));
            tables.push(item(rng));
            let last = tower(rng, &mut dense);
            dense.push(glorot(1, last, rng));
            dense.push(DenseMatrix::zeros(1, 1));
        }
        ModelKind::NCF => {
            tables.push(user(rng));
            tables.push(item(rng));
            tables.push(user(rng));
            tables.push(item(rng));
            let last = tower(rng, &mut dense);
            dense.push(glorot(1, dim + last, rng));
            dense.push(DenseMatrix::zeros(1, 1));
        }
    }
    Ok(RecModel {
        kind,
        dim,
        n_users,
        n_items,
        layer_spec,
        tables,
        dense,
        pop_scores: if kind == ModelKind::Pop {
            vec![0.0; n_items]
        } else {
            Vec::new()
        },
    })
}

/// Sets Pop scores to train-set interaction counts.
pub fn pop_fit(model: &mut RecModel, split: &SplitDataset) -> Result<()> {
    if model.kind != ModelKind::Pop {
        return Err(Error::config(format!(
            "pop_fit requires a Pop model, got {}",
            model.kind
        )));
    }
    if split.n_items != model.n_items {
        return Err(Error::config("split catalog size differs from model"));
    }
    model.pop_scores = split
        .item_train_counts()
        .into_iter()
        .map(|c| c as f64)
        .collect();
    Ok(())
}

impl RecModel {
    pub fn kind(&self) -> ModelKind {
        self.kind
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_users(&self) -> usize {
        self.n_users
    }

    pub fn n_items(&self) -> usize {
        self.n_items
    }

    pub fn layer_spec(&self) -> &[usize] {
        &self.layer_spec
    }

    pub fn tables(&self) -> &[EmbeddingTable] {
        &self.tables
    }

    pub fn tables_mut(&mut self) -> &mut [EmbeddingTable] {
        &mut self.tables
    }

    pub fn dense(&self) -> &[DenseMatrix] {
        &self.dense
    }

    pub fn dense_mut(&mut self) -> &mut [DenseMatrix] {
        &mut self.dense
    }

    pub fn pop_scores(&self) -> &[f64] {
        &self.pop_scores
    }

    pub fn is_trainable(&self) -> bool {
        self.kind != ModelKind::Pop
    }

    /// User embedding table (the GMF-path table for NCF).
    pub fn user_emb(&self) -> Option<&DenseMatrix> {
        self.tables.first().map(|t| &t.weights)
    }

    pub fn item_emb(&self) -> Option<&DenseMatrix> {
        self.tables.get(1).map(|t| &t.weights)
    }

    pub fn n_params(&self) -> usize {
        self.tables
            .iter()
            .map(|t| t.weights.as_slice().len())
            .sum::<usize>()
            + self.dense.iter().map(|d| d.as_slice().len()).sum::<usize>()
    }

    pub fn params_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        for t in &self.tables {
            out.extend_from_slice(t.weights.as_slice());
        }
        for d in &self.dense {
            out.extend_from_slice(d.as_slice());
        }
        out
    }

    pub fn set_params_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.n_params() {
            return Err(Error::config(format!(
                "flat parameter length {} != {}",
                flat.len(),
                self.n_params()
            )));
        }
        let mut off = 0;
        for t in &mut self.tables {
            let n = t.weights.as_slice().len();
            t.weights
                .as_mut_slice()
                .copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        for d in &mut self.dense {
            let n = d.as_slice().len();
            d.as_mut_slice().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.tables.iter().all(|t| t.weights.is_finite())
            && self.dense.iter().all(DenseMatrix::is_finite)
            && self.pop_scores.iter().all(|x| x.is_finite())
    }

    /// Bit pattern hash of every parameter, for determinism audits.
    pub fn fingerprint(&self) -> u64 {
        // FNV-1a over the raw f64 bits.
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut feed = |x: f64| {
            for b in x.to_bits().to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        };
        for t in &self.tables {
            t.weights.as_slice().iter().copied().for_each(&mut feed);
        }
        for d in &self.dense {
            d.as_slice().iter().copied().for_each(&mut feed);
        }
        self.pop_scores.iter().copied().for_each(&mut feed);
        h
    }

    fn check_ids(&self, u: usize, i: usize) -> Result<()> {
        if u >= self.n_users || i >= self.n_items {
            return Err(Error::Lookup(format!(
                "pair ({}, {}) outside model id space {}x{}",
                u, i, self.n_users, self.n_items
            )));
        }
        Ok(())
    }

    pub fn score(&self, u: usize, i: usize) -> Result<f64> {
        self.check_ids(u, i)?;
        Ok(self.score_unchecked(u, i))
    }

    /// Scores a pair without bounds checks beyond slice indexing.
    pub fn score_unchecked(&self, u: usize, i: usize) -> f64 {
        match self.kind {
            ModelKind::Pop => self.pop_scores[i],
            ModelKind::MF => {
                dot(self.tables[0].weights.row(u), self.tables[1].weights.row(i))
                    + self.tables[2].weights.get(u, 0)
                    + self.tables[3].weights.get(i, 0)
            }
            ModelKind::GMF => {
                let (p, q) = (self.tables[0].weights.row(u), self.tables[1].weights.row(i));
                let w = self.dense[0].as_slice();
                p.iter().zip(q).zip(w).map(|((a, b), w)| a * b * w).sum()
            }
            ModelKind::MLP => {
                let mut cache = TowerCache::default();
                let h = self.tower_forward(0, u, i, &mut cache);
                let n = self.dense.len();
                dot(self.dense[n - 2].as_slice(), &h) + self.dense[n - 1].get(0, 0)
            }
            ModelKind::NCF => {
                let mut cache = TowerCache::default();
                let h = self.tower_forward(2, u, i, &mut cache);
                let n = self.dense.len();
                let w = self.dense[n - 2].as_slice();
                let (p, q) = (self.tables[0].weights.row(u), self.tables[1].weights.row(i));
                let gmf: f64 = p
                    .iter()
                    .zip(q)
                    .zip(&w[..self.dim])
                    .map(|((a, b), w)| a * b * w)
                    .sum();
                gmf + dot(&w[self.dim..], &h) + self.dense[n - 1].get(0, 0)
            }
        }
    }

    /// Runs the ReLU tower on `[p_u ; q_i]` taken from tables `t0, t0 + 1`.
    fn tower_forward(&self, t0: usize, u: usize, i: usize, cache: &mut TowerCache) -> Vec<f64> {
        let mut x: Vec<f64> = self.tables[t0].weights.row(u).to_vec();
        x.extend_from_slice(self.tables[t0 + 1].weights.row(i));
        cache.input = x.clone();
        for l in 0..self.layer_spec.len() {
            let w = &self.dense[2 * l];
            let b = self.dense[2 * l + 1].as_slice();
            let mut z = w.matvec(&x);
            for (zj, bj) in z.iter_mut().zip(b) {
                *zj += bj;
            }
            let a: Vec<f64> = z.iter().map(|&v| v.max(0.0)).collect();
            cache.pre.push(z);
            cache.post.push(a.clone());
            x = a;
        }
        x
    }

    /// Backpropagates `d_out` (gradient w.r.t. the tower output) into the tower
    /// weights and the two input embedding rows.
    fn tower_backward(
        &self,
        t0: usize,
        u: usize,
        i: usize,
        cache: &TowerCache,
        d_out: Vec<f64>,
        grads: &mut ModelGradients,
    ) {
        let mut delta = d_out;
        for l in (0..self.layer_spec.len()).rev() {
            for (d, &z) in delta.iter_mut().zip(&cache.pre[l]) {
                if z <= 0.0 {
                    *d = 0.0;
                }
            }
            let input = if l == 0 {
                &cache.input
            } else {
                &cache.post[l - 1]
            };
            grads.dense[2 * l].add_outer(&delta, input, 1.0);
            for (g, d) in grads.dense[2 * l + 1].as_mut_slice().iter_mut().zip(&delta) {
                *g += d;
            }
            delta = self.dense[2 * l].matvec_t(&delta);
        }
        let d = self.dim;
        grads.add_row(t0, u, &delta[..d], 1.0);
        grads.add_row(t0 + 1, i, &delta[d..], 1.0);
    }

    /// Adds `upstream · ∂score(u, i)/∂params` into `grads`; returns the score.
    pub fn accumulate_grad(
        &self,
        u: usize,
        i: usize,
        upstream: f64,
        grads: &mut ModelGradients,
    ) -> f64 {
        match self.kind {
            ModelKind::Pop => self.pop_scores[i],
            ModelKind::MF => {
                let (p, q) = (self.tables[0].weights.row(u), self.tables[1].weights.row(i));
                grads.add_row(0, u, q, upstream);
                grads.add_row(1, i, p, upstream);
                grads.add_row(2, u, &[1.0], upstream);
                grads.add_row(3, i, &[1.0], upstream);
                self.score_unchecked(u, i)
            }
            ModelKind::GMF => {
                let (p, q) = (self.tables[0].weights.row(u), self.tables[1].weights.row(i));
                let w = self.dense[0].as_slice();
                let gp: Vec<f64> = q.iter().zip(w).map(|(q, w)| q * w).collect();
                let gq: Vec<f64> = p.iter().zip(w).map(|(p, w)| p * w).collect();
                let pq: Vec<f64> = p.iter().zip(q).map(|(p, q)| p * q).collect();
                grads.add_row(0, u, &gp, upstream);
                grads.add_row(1, i, &gq, upstream);
                for (g, v) in grads.dense[0].as_mut_slice().iter_mut().zip(&pq) {
                    *g += upstream * v;
                }
                pq.iter().zip(w).map(|(a, b)| a * b).sum()
            }
            ModelKind::MLP => {
                let mut cache = TowerCache::default();
                let h = self.tower_forward(0, u, i, &mut cache);
                let n = self.dense.len();
                let w_out = self.dense[n - 2].as_slice().to_vec();
                let s = dot(&w_out, &h) + self.dense[n - 1].get(0, 0);
                for (g, v) in grads.dense[n - 2].as_mut_slice().iter_mut().zip(&h) {
                    *g += upstream * v;
                }
                grads.dense[n - 1].as_mut_slice()[0] += upstream;
                let d_out = w_out.iter().map(|w| w * upstream).collect();
                self.tower_backward(0, u, i, &cache, d_out, grads);
                s
            }
            ModelKind::NCF => {
                let mut cache = TowerCache::default();
                let h = self.tower_forward(2, u, i, &mut cache);
                let n = self.dense.len();
                let d = self.dim;
                let w = self.dense[n - 2].as_slice().to_vec();
                let (p, q) = (self.tables[0].weights.row(u), self.tables[1].weights.row(i));
                let pq: Vec<f64> = p.iter().zip(q).map(|(p, q)| p * q).collect();
                let s = dot(&w[..d], &pq) + dot(&w[d..], &h) + self.dense[n - 1].get(0, 0);

                let gp: Vec<f64> = q.iter().zip(&w[..d]).map(|(q, w)| q * w).collect();
                let gq: Vec<f64> = p.iter().zip(&w[..d]).map(|(p, w)| p * w).collect();
                grads.add_row(0, u, &gp, upstream);
                grads.add_row(1, i, &gq, upstream);
                {
                    let gw = grads.dense[n - 2].as_mut_slice();
                    for (g, v) in gw[..d].iter_mut().zip(&pq) {
                        *g += upstream * v;
                    }
                    for (g, v) in gw[d..].iter_mut().zip(&h) {
                        *g += upstream * v;
                    }
                }
                grads.dense[n - 1].as_mut_slice()[0] += upstream;
                let d_out = w[d..].iter().map(|w| w * upstream).collect();
                self.tower_backward(2, u, i, &cache, d_out, grads);
                s
            }
        }
    }

    /// Minimum |pre-activation| over the ReLU tower for a pair; `None` for kinds
    /// without a tower. Finite-difference checks use this to stay off kinks.
    pub fn min_abs_preactivation(&self, u: usize, i: usize) -> Option<f64> {
        let t0 = match self.kind {
            ModelKind::MLP => 0,
            ModelKind::NCF => 2,
            _ => return None,
        };
        let mut cache = TowerCache::default();
        self.tower_forward(t0, u, i, &mut cache);
        cache.pre.iter().flatten().map(|z| z.abs()).reduce(f64::min)
    }
}

/// Exact gradients of `Σ_j upstream_j · score(u_j, i_j)`.
pub fn score_grad(model: &RecModel, batch: &Batch, upstream: &[f64]) -> Result<ModelGradients> {
    if upstream.len() != batch.len() {
        return Err(Error::config(format!(
            "upstream length {} != batch length {}",
            upstream.len(),
            batch.len()
        )));
    }
    let mut grads = ModelGradients::zeros_like(model);
    for ((u, i, _), &w) in batch.iter().zip(upstream) {
        model.check_ids(u, i)?;
        model.accumulate_grad(u, i, w, &mut grads);
    }
    Ok(grads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::finite_diff_grad;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn mf_zero_embeddings_score_zero() {
        let mut m = init_model(ModelKind::MF, 2, 2, 4, None, &mut rng(0)).unwrap();
        let zeros = vec![0.0; m.n_params()];
        m.set_params_flat(&zeros).unwrap();
        assert_eq!(m.score(1, 1).unwrap(), 0.0);
    }

    #[test]
    fn gmf_all_ones_scores_dim() {
        let d = 6;
        let mut m = init_model(ModelKind::GMF, 2, 3, d, None, &mut rng(0)).unwrap();
        let ones = vec![1.0; m.n_params()];
        m.set_params_flat(&ones).unwrap();
        assert_eq!(m.score(0, 2).unwrap(), d as f64);
    }

    #[test]
    fn pop_scores_are_counts() {
        let split = SplitDataset::new(
            3,
            4,
            vec![vec![0, 1], vec![0], vec![0, 2]],
            vec![3, 3, 3],
            vec![1, 2, 1],
        )
        .unwrap();
        let mut m = init_model(ModelKind::Pop, 3, 4, 8, None, &mut rng(0)).unwrap();
        assert!(m.pop_scores().iter().all(|&s| s == 0.0));
        pop_fit(&mut m, &split).unwrap();
        assert_eq!(m.score(0, 0).unwrap(), 3.0);
        assert_eq!(m.score(2, 0).unwrap(), 3.0);
        assert_eq!(m.score(1, 3).unwrap(), 0.0);
        let mut mf = init_model(ModelKind::MF, 3, 4, 2, None, &mut rng(0)).unwrap();
        assert!(pop_fit(&mut mf, &split).is_err());
    }

    #[test]
    fn score_rejects_out_of_range() {
        let m = init_model(ModelKind::MF, 2, 2, 2, None, &mut rng(0)).unwrap();
        assert!(matches!(m.score(2, 0), Err(Error::Lookup(_))));
    }

    #[test]
    fn init_shapes_and_determinism() {
        let a = init_model(ModelKind::NCF, 7, 9, 32, None, &mut rng(4)).unwrap();
        let b = init_model(ModelKind::NCF, 7, 9, 32, None, &mut rng(4)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.user_emb().unwrap().shape(), (7, 32));
        assert_eq!(a.item_emb().unwrap().shape(), (9, 32));
        let mlp = init_model(ModelKind::MLP, 7, 9, 32, None, &mut rng(4)).unwrap();
        assert_eq!(mlp.dense()[0].shape(), (32, 64));
        assert_eq!(mlp.dense()[2].shape(), (16, 32));
        assert_eq!(mlp.dense()[4].shape(), (1, 16));
    }

    #[test]
    fn mf_bilinear_grad() {
        let m = init_model(ModelKind::MF, 3, 3, 4, None, &mut rng(1)).unwrap();
        let mut b = Batch::default();
        b.push(1, 2, 1.0);
        let g = score_grad(&m, &b, &[1.0]).unwrap();
        assert_eq!(g.tables[0][&1], m.tables()[1].weights.row(2));
        assert_eq!(g.tables[1][&2], m.tables()[0].weights.row(1));
        let zero = score_grad(&m, &b, &[0.0]).unwrap();
        assert_eq!(zero.squared_norm(), 0.0);
    }

    #[test]
    fn gmf_ones_matches_mf_without_bias() {
        let mut gmf = init_model(ModelKind::GMF, 4, 5, 3, None, &mut rng(2)).unwrap();
        let mut mf = init_model(ModelKind::MF, 4, 5, 3, None, &mut rng(2)).unwrap();
        gmf.dense_mut()[0].as_mut_slice().fill(1.0);
        mf.tables_mut()[0] = gmf.tables()[0].clone();
        mf.tables_mut()[1] = gmf.tables()[1].clone();
        for u in 0..4 {
            for i in 0..5 {
                let a = gmf.score(u, i).unwrap();
                let b = mf.score(u, i).unwrap();
                assert!((a - b).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        for kind in ModelKind::TRAINABLE {
            let mut m = init_model(kind, 5, 5, 3, None, &mut rng(11)).unwrap();
            // Larger parameters than the default init keep the tower away from
            // ReLU kinks.
            let big: Vec<f64> = {
                let mut r = rng(12);
                (0..m.n_params())
                    .map(|_| r.random_range(-1.0..1.0))
                    .collect()
            };
            m.set_params_flat(&big).unwrap();
            let mut batch = Batch::default();
            batch.push(0, 1, 1.0);
            batch.push(3, 1, -1.0);
            batch.push(3, 4, 1.0);
            let up = [0.7, -1.3, 0.4];
            let g = score_grad(&m, &batch, &up).unwrap().to_flat(&m);
            let base = m.params_flat();
            let mut probe = m.clone();
            let num = finite_diff_grad(
                |x| {
                    probe.set_params_flat(x).unwrap();
                    batch
                        .iter()
                        .zip(&up)
                        .map(|((u, i, _), w)| w * probe.score_unchecked(u, i))
                        .sum()
                },
                &base,
                1e-5,
            )
            .unwrap();
            for (a, n) in g.iter().zip(&num) {
                assert!(
                    crate::numerics::relative_error(*a, *n, 1e-4) < 1e-5,
                    "{kind}: {a} vs {n}"
                );
            }
        }
    }

    #[test]
    fn score_locality() {
        let m = init_model(ModelKind::NCF, 4, 4, 3, None, &mut rng(5)).unwrap();
        let before = m.score(1, 2).unwrap();
        let mut m2 = m.clone();
        for t in m2.tables_mut() {
            let row = match t.side {
                Side::User => 0,
                Side::Item => 3,
            };
            t.weights.row_mut(row).iter_mut().for_each(|x| *x += 1.0);
        }
        assert_eq!(m2.score(1, 2).unwrap(), before);
    }
}
