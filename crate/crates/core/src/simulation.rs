//! Two-stage semi-synthetic click generator with ground-truth relevance and
//! exposure probabilities.
//!
//! Stage one fits a relevance model on explicit ratings and an occurrence model
//! on which pairs were rated, then perturbs both with Gaussian noise to obtain
//! `p_rel(u, i)` and `p_exp1(u, i)`. Stage two refits an implicit factor model on
//! the stage-one clicks and shifts the log exposure by `kappa · cos(x_u, z_i)`.
//! Final clicks are Bernoulli draws with probability `p_rel · p_exp2`.

use std::collections::HashMap;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{
    filter_users, leave_last_split, sample_excluding, Batch, Interaction, InteractionLog,
    SplitDataset,
};
use crate::error::{Error, Result};
use crate::models::{init_model, ModelGradients, ModelKind, RecModel};
use crate::numerics::{dot, logistic_loss, logistic_loss_grad, sigmoid, AdamConfig};
use crate::training::{ModelOptimizer, OptimizerKind};

/// Lower clamp applied to every exposure probability.
pub const EXPOSURE_FLOOR: f64 = 1e-6;

/// Dense per-(user, item) probability grid; `NaN` marks a missing entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbTable {
    n_users: usize,
    n_items: usize,
    values: Vec<f64>,
}

impl ProbTable {
    pub fn filled(n_users: usize, n_items: usize, value: f64) -> Self {
        ProbTable {
            n_users,
            n_items,
            values: vec![value; n_users * n_items],
        }
    }

    pub fn empty(n_users: usize, n_items: usize) -> Self {
        Self::filled(n_users, n_items, f64::NAN)
    }

    pub fn from_fn(n_users: usize, n_items: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut values = Vec::with_capacity(n_users * n_items);
        for u in 0..n_users {
            for i in 0..n_items {
                values.push(f(u, i));
            }
        }
        ProbTable {
            n_users,
            n_items,
            values,
        }
    }

    pub fn n_users(&self) -> usize {
        self.n_users
    }

    pub fn n_items(&self) -> usize {
        self.n_items
    }

    pub fn get(&self, u: usize, i: usize) -> Option<f64> {
        if u >= self.n_users || i >= self.n_items {
            return None;
        }
        let v = self.values[u * self.n_items + i];
        (!v.is_nan()).then_some(v)
    }

    pub fn set(&mut self, u: usize, i: usize, p: f64) {
        self.values[u * self.n_items + i] = p;
    }

    pub fn clear(&mut self, u: usize, i: usize) {
        self.set(u, i, f64::NAN);
    }

    /// Every entry present and inside `(0, 1]`.
    pub fn is_valid_probability_grid(&self) -> bool {
        self.values.iter().all(|&p| p > 0.0 && p <= 1.0)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Writes `user<TAB>item<TAB>p` lines keyed by raw ids, skipping missing
    /// entries.
    pub fn write_triples(
        &self,
        path: &Path,
        user_ids: &[String],
        item_ids: &[String],
    ) -> Result<()> {
        if user_ids.len() != self.n_users || item_ids.len() != self.n_items {
            return Err(Error::config("id lists do not match the table shape"));
        }
        let mut out = String::with_capacity(self.values.len() * 24);
        for (u, uid) in user_ids.iter().enumerate() {
            for (i, iid) in item_ids.iter().enumerate() {
                if let Some(p) = self.get(u, i) {
                    out.push_str(&format!("{uid}\t{iid}\t{p:?}\n"));
                }
            }
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    /// Reads a triples file into the id space given by `user_ids` × `item_ids`.
    /// Triples for unknown ids are ignored; uncovered pairs stay missing.
    pub fn read_triples(path: &Path, user_ids: &[String], item_ids: &[String]) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let users: HashMap<&str, usize> = user_ids
            .iter()
            .enumerate()
            .map(|(k, s)| (s.as_str(), k))
            .collect();
        let items: HashMap<&str, usize> = item_ids
            .iter()
            .enumerate()
            .map(|(k, s)| (s.as_str(), k))
            .collect();
        let mut table = ProbTable::empty(user_ids.len(), item_ids.len());
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let parse_err = |msg: &str| Error::Parse {
                path: path.to_path_buf(),
                line: n + 1,
                msg: msg.to_string(),
            };
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 3 {
                return Err(parse_err("expected user, item, probability"));
            }
            let p: f64 = fields[2]
                .parse()
                .map_err(|_| parse_err("probability is not a number"))?;
            if !(p > 0.0 && p <= 1.0) {
                return Err(parse_err("probability outside (0, 1]"));
            }
            if let (Some(&u), Some(&i)) = (users.get(fields[0]), items.get(fields[1])) {
                table.set(u, i, p);
            }
        }
        Ok(table)
    }

    /// The same probabilities indexed by another id space sharing raw ids.
    pub fn remap(
        &self,
        from_users: &[String],
        from_items: &[String],
        to_users: &[String],
        to_items: &[String],
    ) -> ProbTable {
        let users: HashMap<&str, usize> = from_users
            .iter()
            .enumerate()
            .map(|(k, s)| (s.as_str(), k))
            .collect();
        let items: HashMap<&str, usize> = from_items
            .iter()
            .enumerate()
            .map(|(k, s)| (s.as_str(), k))
            .collect();
        let user_map: Vec<Option<usize>> = to_users
            .iter()
            .map(|s| users.get(s.as_str()).copied())
            .collect();
        let item_map: Vec<Option<usize>> = to_items
            .iter()
            .map(|s| items.get(s.as_str()).copied())
            .collect();
        ProbTable::from_fn(to_users.len(), to_items.len(), |u, i| {
            match (user_map[u], item_map[i]) {
                (Some(a), Some(b)) => self.get(a, b).unwrap_or(f64::NAN),
                _ => f64::NAN,
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    /// Latent dimension of the simulator's factor models.
    pub d_sim: usize,
    /// Standard deviation of the relevance noise.
    pub sigma1: f64,
    /// Standard deviation of the log-exposure noise.
    pub sigma2: f64,
    /// Scale of the stage-two exposure shift.
    pub kappa: f64,
    /// Subtracted from the predicted rating before the sigmoid.
    pub relevance_offset: f64,
    /// Replace the fitted occurrence model by this constant probability.
    pub occurrence_constant: Option<f64>,
    pub seed: u64,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub negs_per_pos: usize,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            d_sim: 8,
            sigma1: 0.5,
            sigma2: 0.5,
            kappa: 1.0,
            relevance_offset: 0.0,
            occurrence_constant: None,
            seed: 0,
            epochs: 30,
            lr: 0.05,
            batch_size: 256,
            negs_per_pos: 4,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma1 >= 0.0 && self.sigma2 >= 0.0) {
            return Err(Error::config("sigma1 and sigma2 must be >= 0"));
        }
        if !self.kappa.is_finite() || !self.relevance_offset.is_finite() {
            return Err(Error::config("kappa and relevance_offset must be finite"));
        }
        if self.d_sim == 0 || self.batch_size == 0 {
            return Err(Error::config("d_sim and batch_size must be >= 1"));
        }
        if self.lr.is_nan() || self.lr <= 0.0 {
            return Err(Error::config("simulator lr must be > 0"));
        }
        if let Some(c) = self.occurrence_constant {
            if !(c > 0.0 && c <= 1.0) {
                return Err(Error::config("occurrence_constant must lie in (0, 1]"));
            }
        }
        Ok(())
    }
}

/// Predicts `E[R | observed]` as global mean plus a biased MF score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelevanceModel {
    pub mf: RecModel,
    pub global_mean: f64,
}

impl RelevanceModel {
    pub fn predict(&self, u: usize, i: usize) -> f64 {
        self.global_mean + self.mf.score_unchecked(u, i)
    }

    /// Root mean squared error over the given ratings.
    pub fn rmse(&self, log: &InteractionLog) -> f64 {
        let se: f64 = log
            .interactions
            .iter()
            .map(|it| (self.predict(it.user, it.item) - it.value).powi(2))
            .sum();
        (se / log.len().max(1) as f64).sqrt()
    }
}

/// Fits the relevance model with mean-squared error on observed ratings.
pub fn fit_relevance_model(explicit: &InteractionLog, cfg: &SimConfig) -> Result<RelevanceModel> {
    cfg.validate()?;
    if explicit.is_empty() {
        return Err(Error::config("no ratings to fit the relevance model on"));
    }
    if let Some(bad) = explicit
        .interactions
        .iter()
        .find(|it| !(1.0..=5.0).contains(&it.value))
    {
        return Err(Error::config(format!(
            "rating {} for user {} is outside [1, 5]",
            bad.value, explicit.user_ids[bad.user]
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let global_mean =
        explicit.interactions.iter().map(|it| it.value).sum::<f64>() / explicit.len() as f64;
    let mut mf = init_model(
        ModelKind::MF,
        explicit.n_users(),
        explicit.n_items(),
        cfg.d_sim,
        None,
        &mut rng,
    )?;
    let mut opt = ModelOptimizer::new(&mf, OptimizerKind::Adam, AdamConfig::default());
    let mut order: Vec<usize> = (0..explicit.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let n = chunk.len() as f64;
            let mut grads = ModelGradients::zeros_like(&mf);
            for &k in chunk {
                let it = explicit.interactions[k];
                let resid = mf.score_unchecked(it.user, it.item) - (it.value - global_mean);
                mf.accumulate_grad(it.user, it.item, 2.0 * resid / n, &mut grads);
            }
            opt.step(&mut mf, &grads, cfg.lr, 0.0)?;
        }
        if !mf.is_finite() {
            return Err(Error::Divergence(format!(
                "relevance model diverged at epoch {}",
                epoch + 1
            )));
        }
    }
    Ok(RelevanceModel { mf, global_mean })
}

/// Logistic MF on binarized interactions with uniform negative sampling.
/// `positives[u]` must be sorted and deduplicated.
pub fn fit_implicit_mf(
    n_users: usize,
    n_items: usize,
    positives: &[Vec<usize>],
    cfg: &SimConfig,
    rng: &mut ChaCha8Rng,
) -> Result<RecModel> {
    let mut mf = init_model(ModelKind::MF, n_users, n_items, cfg.d_sim, None, rng)?;
    let mut opt = ModelOptimizer::new(&mf, OptimizerKind::Adam, AdamConfig::default());
    let mut pairs: Vec<(usize, usize)> = positives
        .iter()
        .enumerate()
        .flat_map(|(u, items)| items.iter().map(move |&i| (u, i)))
        .collect();
    if pairs.is_empty() {
        return Ok(mf);
    }
    for epoch in 0..cfg.epochs {
        pairs.shuffle(rng);
        let mut batch = Batch::with_capacity(cfg.batch_size);
        let flush =
            |batch: &mut Batch, mf: &mut RecModel, opt: &mut ModelOptimizer| -> Result<()> {
                if batch.is_empty() {
                    return Ok(());
                }
                let n = batch.len() as f64;
                let mut grads = ModelGradients::zeros_like(mf);
                for (u, i, y) in batch.iter() {
                    let s = mf.score_unchecked(u, i);
                    mf.accumulate_grad(u, i, logistic_loss_grad(y, s) / n, &mut grads);
                }
                opt.step(mf, &grads, cfg.lr, 0.0)?;
                *batch = Batch::with_capacity(cfg.batch_size);
                Ok(())
            };
        for &(u, i) in &pairs {
            batch.push(u, i, 1.0);
            let avail = n_items - positives[u].len();
            for j in sample_excluding(&positives[u], n_items, cfg.negs_per_pos.min(avail), rng) {
                batch.push(u, j, -1.0);
            }
            if batch.len() >= cfg.batch_size {
                flush(&mut batch, &mut mf, &mut opt)?;
            }
        }
        flush(&mut batch, &mut mf, &mut opt)?;
        if !mf.is_finite() {
            return Err(Error::Divergence(format!(
                "implicit factor model diverged at epoch {}",
                epoch + 1
            )));
        }
    }
    Ok(mf)
}

/// Mean logistic loss of an implicit model on all grid pairs, positives
/// labelled +1.
pub fn implicit_grid_loss(mf: &RecModel, positives: &[Vec<usize>]) -> f64 {
    let mut total = 0.0;
    for (u, items) in positives.iter().enumerate() {
        for i in 0..mf.n_items() {
            let y = if items.binary_search(&i).is_ok() {
                1.0
            } else {
                -1.0
            };
            total += logistic_loss(y, mf.score_unchecked(u, i));
        }
    }
    total / (positives.len() * mf.n_items()).max(1) as f64
}

/// `p̂(observed)` for each pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum OccurrenceModel {
    Fitted(RecModel),
    Constant(f64),
}

impl OccurrenceModel {
    pub fn prob(&self, u: usize, i: usize) -> f64 {
        match self {
            OccurrenceModel::Fitted(mf) => sigmoid(mf.score_unchecked(u, i)),
            OccurrenceModel::Constant(p) => *p,
        }
    }
}

fn distinct_items_by_user(log: &InteractionLog) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new(); log.n_users()];
    for it in &log.interactions {
        out[it.user].push(it.item);
    }
    for items in &mut out {
        items.sort_unstable();
        items.dedup();
    }
    out
}

/// Fits `p̂(observed)` on which pairs carry a rating, or returns the configured
/// constant.
pub fn fit_occurrence_model(explicit: &InteractionLog, cfg: &SimConfig) -> Result<OccurrenceModel> {
    cfg.validate()?;
    if let Some(c) = cfg.occurrence_constant {
        return Ok(OccurrenceModel::Constant(c));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let positives = distinct_items_by_user(explicit);
    let mf = fit_implicit_mf(
        explicit.n_users(),
        explicit.n_items(),
        &positives,
        cfg,
        &mut rng,
    )?;
    Ok(OccurrenceModel::Fitted(mf))
}

/// Output of the first stage.
#[derive(Debug, Clone, PartialEq)]
pub struct Stage1 {
    pub p_relevance: ProbTable,
    pub exposure: ProbTable,
    /// Clicked pairs, sorted by user then item.
    pub clicks: Vec<(usize, usize)>,
}

fn normal(std: f64) -> Normal<f64> {
    Normal::new(0.0, std).expect("std validated non-negative")
}

fn draw_clicks<R: Rng + ?Sized>(
    p_rel: &ProbTable,
    p_exp: &ProbTable,
    rng: &mut R,
) -> Vec<(usize, usize)> {
    let mut clicks = Vec::new();
    for u in 0..p_rel.n_users() {
        for i in 0..p_rel.n_items() {
            let p =
                p_rel.values()[u * p_rel.n_items() + i] * p_exp.values()[u * p_exp.n_items() + i];
            if rng.random_bool(p.clamp(0.0, 1.0)) {
                clicks.push((u, i));
            }
        }
    }
    clicks
}

/// Noisy relevance and exposure tables over the full grid, and one click draw.
pub fn stage1_generate<R: Rng + ?Sized>(
    relevance: &RelevanceModel,
    occurrence: &OccurrenceModel,
    cfg: &SimConfig,
    rng: &mut R,
) -> Result<Stage1> {
    cfg.validate()?;
    let (n_users, n_items) = (relevance.mf.n_users(), relevance.mf.n_items());
    if let OccurrenceModel::Fitted(mf) = occurrence {
        if mf.n_users() != n_users || mf.n_items() != n_items {
            return Err(Error::config(
                "relevance and occurrence models use different id spaces",
            ));
        }
    }
    let (e1, e2) = (normal(cfg.sigma1), normal(cfg.sigma2));
    let mut p_relevance = ProbTable::empty(n_users, n_items);
    let mut exposure = ProbTable::empty(n_users, n_items);
    for u in 0..n_users {
        for i in 0..n_items {
            let noise1 = e1.sample(rng);
            let noise2 = e2.sample(rng);
            let rel = sigmoid(relevance.predict(u, i) - cfg.relevance_offset + noise1);
            p_relevance.set(u, i, rel.max(f64::MIN_POSITIVE));
            let exp = (occurrence.prob(u, i) * noise2.exp()).clamp(EXPOSURE_FLOOR, 1.0);
            exposure.set(u, i, exp);
        }
    }
    let clicks = draw_clicks(&p_relevance, &exposure, rng);
    Ok(Stage1 {
        p_relevance,
        exposure,
        clicks,
    })
}

/// Per-pair exposure shift `kappa · cos(x_u, z_i)` from the user and item
/// embeddings of an implicit model; zero-norm factors give no shift.
pub fn exposure_shift(mf: &RecModel, kappa: f64, u: usize, i: usize) -> f64 {
    let (Some(x), Some(z)) = (mf.user_emb(), mf.item_emb()) else {
        return 0.0;
    };
    let (x, z) = (x.row(u), z.row(i));
    let nx = dot(x, x).sqrt();
    let nz = dot(z, z).sqrt();
    if nx == 0.0 || nz == 0.0 {
        return 0.0;
    }
    kappa * dot(x, z) / (nx * nz)
}

/// Final exposure table and clicks.
#[derive(Debug, Clone, PartialEq)]
pub struct Stage2 {
    pub exposure: ProbTable,
    pub clicks: Vec<(usize, usize)>,
}

pub fn stage2_generate(stage1: &Stage1, cfg: &SimConfig, rng: &mut ChaCha8Rng) -> Result<Stage2> {
    cfg.validate()?;
    let (n_users, n_items) = (stage1.exposure.n_users(), stage1.exposure.n_items());
    let exposure = if cfg.kappa == 0.0 {
        stage1.exposure.clone()
    } else {
        let mut positives = vec![Vec::new(); n_users];
        for &(u, i) in &stage1.clicks {
            positives[u].push(i);
        }
        let mf = fit_implicit_mf(n_users, n_items, &positives, cfg, rng)?;
        ProbTable::from_fn(n_users, n_items, |u, i| {
            let p1 = stage1.exposure.values()[u * n_items + i];
            (p1 * exposure_shift(&mf, cfg.kappa, u, i).exp()).clamp(EXPOSURE_FLOOR, 1.0)
        })
    };
    let clicks = draw_clicks(&stage1.p_relevance, &exposure, rng);
    Ok(Stage2 { exposure, clicks })
}

/// Final simulator output on the explicit dataset's id space.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleDataset {
    pub user_ids: Vec<String>,
    pub item_ids: Vec<String>,
    /// Implicit clicks (value 1) with a shuffled per-user order.
    pub clicks: Vec<Interaction>,
    pub p_relevance: ProbTable,
    pub p_exposure: ProbTable,
    pub stage1_exposure: ProbTable,
}

impl OracleDataset {
    pub fn n_users(&self) -> usize {
        self.user_ids.len()
    }

    pub fn n_items(&self) -> usize {
        self.item_ids.len()
    }

    /// `p_rel · p_exp` for one pair.
    pub fn click_prob(&self, u: usize, i: usize) -> Option<f64> {
        Some(self.p_relevance.get(u, i)? * self.p_exposure.get(u, i)?)
    }

    /// Clicks as an interaction log over the full simulated id space (users
    /// without clicks included).
    pub fn click_log(&self) -> Result<InteractionLog> {
        InteractionLog::from_dense(
            self.clicks.clone(),
            self.user_ids.clone(),
            self.item_ids.clone(),
        )
    }

    /// Filters the click log, splits it leave-last-two-out and re-indexes the
    /// oracle tables on the resulting id space.
    pub fn prepare(&self, min_n: usize, max_n: usize) -> Result<PreparedOracle> {
        let log = filter_users(&self.click_log()?, min_n, max_n)?;
        let split = leave_last_split(&log)?;
        let remap =
            |t: &ProbTable| t.remap(&self.user_ids, &self.item_ids, &log.user_ids, &log.item_ids);
        Ok(PreparedOracle {
            p_exposure: remap(&self.p_exposure),
            p_relevance: remap(&self.p_relevance),
            log,
            split,
        })
    }
}

/// An oracle dataset ready for training and evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedOracle {
    pub log: InteractionLog,
    pub split: SplitDataset,
    pub p_exposure: ProbTable,
    pub p_relevance: ProbTable,
}

/// Full pipeline: relevance and occurrence fits, stage one, stage two.
pub fn generate_semi_synthetic(
    explicit: &InteractionLog,
    cfg: &SimConfig,
) -> Result<OracleDataset> {
    cfg.validate()?;
    let relevance = fit_relevance_model(explicit, cfg)?;
    let occurrence = fit_occurrence_model(explicit, cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(2);
    let stage1 = stage1_generate(&relevance, &occurrence, cfg, &mut rng)?;
    let stage2 = stage2_generate(&stage1, cfg, &mut rng)?;

    let mut by_user = vec![Vec::new(); explicit.n_users()];
    for &(u, i) in &stage2.clicks {
        by_user[u].push(i);
    }
    let mut clicks = Vec::with_capacity(stage2.clicks.len());
    for (u, items) in by_user.iter_mut().enumerate() {
        items.shuffle(&mut rng);
        clicks.extend(items.iter().enumerate().map(|(order, &item)| Interaction {
            user: u,
            item,
            value: 1.0,
            order,
        }));
    }
    Ok(OracleDataset {
        user_ids: explicit.user_ids.clone(),
        item_ids: explicit.item_ids.clone(),
        clicks,
        p_relevance: stage1.p_relevance,
        p_exposure: stage2.exposure,
        stage1_exposure: stage1.exposure,
    })
}

/// Shape of a synthetic explicit-rating dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlantedConfig {
    pub n_users: usize,
    pub n_items: usize,
    pub rank: usize,
    /// Mean number of rated items per user.
    pub ratings_per_user: usize,
    /// Item `k` (by popularity) is rated with weight `(k + 1)^-exponent`.
    pub popularity_exponent: f64,
    /// Standard deviation of rating noise.
    pub noise: f64,
    pub seed: u64,
}

impl Default for PlantedConfig {
    fn default() -> Self {
        PlantedConfig {
            n_users: 300,
            n_items: 200,
            rank: 4,
            ratings_per_user: 30,
            popularity_exponent: 0.8,
            noise: 0.3,
            seed: 0,
        }
    }
}

/// Explicit ratings in `[1, 5]` from a planted low-rank matrix, observed with
/// popularity-skewed sampling.
pub fn planted_ratings(cfg: &PlantedConfig) -> Result<InteractionLog> {
    if cfg.n_users == 0 || cfg.n_items == 0 || cfg.rank == 0 {
        return Err(Error::config(
            "planted dataset needs users, items and rank >= 1",
        ));
    }
    if cfg.ratings_per_user == 0 || cfg.ratings_per_user > cfg.n_items {
        return Err(Error::config("ratings_per_user must lie in [1, n_items]"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let std = normal(1.0 / (cfg.rank as f64).sqrt());
    let users: Vec<Vec<f64>> = (0..cfg.n_users)
        .map(|_| (0..cfg.rank).map(|_| std.sample(&mut rng)).collect())
        .collect();
    let items: Vec<Vec<f64>> = (0..cfg.n_items)
        .map(|_| (0..cfg.rank).map(|_| std.sample(&mut rng)).collect())
        .collect();
    let weights: Vec<f64> = (0..cfg.n_items)
        .map(|k| ((k + 1) as f64).powf(-cfg.popularity_exponent))
        .collect();
    let noise = normal(cfg.noise);
    let mut interactions = Vec::new();
    for (u, x) in users.iter().enumerate() {
        let lo = (cfg.ratings_per_user / 2).max(3).min(cfg.n_items);
        let hi = (cfg.ratings_per_user * 3 / 2).max(lo).min(cfg.n_items);
        let count = rng.random_range(lo..=hi);
        let chosen =
            rand::seq::index::sample_weighted(&mut rng, cfg.n_items, |k| weights[k], count)
                .map_err(|e| Error::config(format!("weighted sampling failed: {e}")))?;
        let mut chosen = chosen.into_vec();
        chosen.shuffle(&mut rng);
        for (order, i) in chosen.into_iter().enumerate() {
            let r = 3.0 + 1.5 * dot(x, &items[i]) + noise.sample(&mut rng);
            interactions.push(Interaction {
                user: u,
                item: i,
                value: r.clamp(1.0, 5.0),
                order,
            });
        }
    }
    InteractionLog::from_dense(
        interactions,
        (0..cfg.n_users).map(|u| format!("u{u}")).collect(),
        (0..cfg.n_items).map(|i| format!("i{i}")).collect(),
    )
}

/// Summary written next to the oracle tables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleManifest {
    pub sim: SimConfig,
    pub n_users: usize,
    pub n_items: usize,
    pub n_clicks: usize,
    /// Whether the stage-two exposure table equals the stage-one table.
    pub stage2_equals_stage1: bool,
    pub files: Vec<String>,
}

pub const CLICKS_FILE: &str = "clicks.tsv";
pub const RELEVANCE_FILE: &str = "p_relevance.tsv";
pub const EXPOSURE_FILE: &str = "p_exposure.tsv";
pub const STAGE1_EXPOSURE_FILE: &str = "stage1_exposure.tsv";
pub const MANIFEST_FILE: &str = "manifest.json";

/// Writes clicks (`user item 1 order`, raw ids), the three probability tables
/// and a manifest into `dir`.
pub fn write_oracle(dir: &Path, oracle: &OracleDataset, cfg: &SimConfig) -> Result<OracleManifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let clicks_path = dir.join(CLICKS_FILE);
    let mut f = fs::File::create(&clicks_path).map_err(|e| Error::io(&clicks_path, e))?;
    let mut buf = String::new();
    for it in &oracle.clicks {
        buf.push_str(&format!(
            "{}\t{}\t1\t{}\n",
            oracle.user_ids[it.user], oracle.item_ids[it.item], it.order
        ));
    }
    f.write_all(buf.as_bytes())
        .map_err(|e| Error::io(&clicks_path, e))?;
    let (u, i) = (&oracle.user_ids, &oracle.item_ids);
    oracle
        .p_relevance
        .write_triples(&dir.join(RELEVANCE_FILE), u, i)?;
    oracle
        .p_exposure
        .write_triples(&dir.join(EXPOSURE_FILE), u, i)?;
    oracle
        .stage1_exposure
        .write_triples(&dir.join(STAGE1_EXPOSURE_FILE), u, i)?;
    let manifest = OracleManifest {
        sim: cfg.clone(),
        n_users: oracle.n_users(),
        n_items: oracle.n_items(),
        n_clicks: oracle.clicks.len(),
        stage2_equals_stage1: oracle.p_exposure == oracle.stage1_exposure,
        files: [
            CLICKS_FILE,
            RELEVANCE_FILE,
            EXPOSURE_FILE,
            STAGE1_EXPOSURE_FILE,
        ]
        .iter()
        .map(|s| s.to_string())
        .collect(),
    };
    let json = serde_json::to_string_pretty(&manifest)?;
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<OracleManifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Ok(serde_json::from_str(&text)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rank1_log() -> InteractionLog {
        let a: Vec<f64> = (0..30).map(|u| -1.0 + 2.0 * u as f64 / 29.0).collect();
        let b: Vec<f64> = (0..20).map(|i| -1.5 + 3.0 * i as f64 / 19.0).collect();
        let mut interactions = Vec::new();
        for (u, au) in a.iter().enumerate() {
            for (i, bi) in b.iter().enumerate() {
                interactions.push(Interaction {
                    user: u,
                    item: i,
                    value: 3.0 + au * bi,
                    order: i,
                });
            }
        }
        InteractionLog::from_dense(
            interactions,
            (0..30).map(|u| u.to_string()).collect(),
            (0..20).map(|i| i.to_string()).collect(),
        )
        .unwrap()
    }

    #[test]
    fn rank_one_ratings_are_recovered() {
        let cfg = SimConfig {
            d_sim: 2,
            epochs: 300,
            lr: 0.02,
            batch_size: 64,
            ..SimConfig::default()
        };
        let model = fit_relevance_model(&rank1_log(), &cfg).unwrap();
        let rmse = model.rmse(&rank1_log());
        assert!(rmse < 0.1, "rmse {rmse}");
    }

    #[test]
    fn constant_ratings_predict_the_constant() {
        let mut log = rank1_log();
        for it in &mut log.interactions {
            it.value = 4.0;
        }
        let model = fit_relevance_model(
            &log,
            &SimConfig {
                epochs: 5,
                ..SimConfig::default()
            },
        )
        .unwrap();
        assert!((model.predict(3, 4) - 4.0).abs() < 0.05);
    }

    #[test]
    fn relevance_rejects_out_of_range_ratings() {
        let mut log = rank1_log();
        log.interactions[0].value = 6.0;
        assert!(fit_relevance_model(&log, &SimConfig::default()).is_err());
    }

    #[test]
    fn occurrence_outputs_are_probabilities_and_track_frequency() {
        let cfg = PlantedConfig {
            n_users: 80,
            n_items: 40,
            ratings_per_user: 10,
            popularity_exponent: 1.2,
            ..PlantedConfig::default()
        };
        let log = planted_ratings(&cfg).unwrap();
        let occ = fit_occurrence_model(
            &log,
            &SimConfig {
                epochs: 20,
                ..SimConfig::default()
            },
        )
        .unwrap();
        let mean_p = |i: usize| (0..80).map(|u| occ.prob(u, i)).sum::<f64>() / 80.0;
        for u in 0..80 {
            for i in 0..40 {
                let p = occ.prob(u, i);
                assert!(p > 0.0 && p < 1.0);
            }
        }
        // Item 0 is the most popular, the tail items are rarely rated.
        let tail = (30..40).map(mean_p).sum::<f64>() / 10.0;
        assert!(mean_p(0) > tail);
    }

    fn small_models(n_users: usize, n_items: usize) -> (RelevanceModel, OccurrenceModel) {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mf = init_model(ModelKind::MF, n_users, n_items, 2, None, &mut rng).unwrap();
        (
            RelevanceModel {
                mf,
                global_mean: 0.5,
            },
            OccurrenceModel::Constant(0.4),
        )
    }

    #[test]
    fn zero_noise_tables_are_deterministic() {
        let (rel, occ) = small_models(4, 5);
        let cfg = SimConfig {
            sigma1: 0.0,
            sigma2: 0.0,
            ..SimConfig::default()
        };
        let a = stage1_generate(&rel, &occ, &cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let b = stage1_generate(&rel, &occ, &cfg, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert_eq!(a.p_relevance, b.p_relevance);
        assert_eq!(a.exposure, b.exposure);
        assert_eq!(a.exposure.get(1, 1), Some(0.4));
        assert_eq!(a.p_relevance.get(2, 3), Some(sigmoid(rel.predict(2, 3))));
    }

    #[test]
    fn certain_probabilities_click_everything() {
        let (mut rel, _) = small_models(3, 4);
        rel.global_mean = 800.0;
        let cfg = SimConfig {
            sigma1: 0.0,
            sigma2: 0.0,
            ..SimConfig::default()
        };
        let s = stage1_generate(
            &rel,
            &OccurrenceModel::Constant(1.0),
            &cfg,
            &mut ChaCha8Rng::seed_from_u64(0),
        )
        .unwrap();
        assert_eq!(s.clicks.len(), 12);
    }

    #[test]
    fn click_frequency_matches_probability() {
        let p_rel = ProbTable::filled(1, 1, 0.6);
        let p_exp = ProbTable::filled(1, 1, 0.35);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let reps = 10_000;
        let hits: usize = (0..reps)
            .map(|_| draw_clicks(&p_rel, &p_exp, &mut rng).len())
            .sum();
        let p = 0.6 * 0.35;
        let sd = (p * (1.0 - p) / reps as f64).sqrt();
        assert!((hits as f64 / reps as f64 - p).abs() < 3.0 * sd);
    }

    #[test]
    fn zero_kappa_keeps_stage_one_exposure() {
        let (rel, occ) = small_models(6, 7);
        let cfg = SimConfig {
            kappa: 0.0,
            ..SimConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let s1 = stage1_generate(&rel, &occ, &cfg, &mut rng).unwrap();
        let s2 = stage2_generate(&s1, &cfg, &mut rng).unwrap();
        assert_eq!(s2.exposure, s1.exposure);
    }

    #[test]
    fn aligned_factors_raise_exposure() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut mf = init_model(ModelKind::MF, 2, 2, 2, None, &mut rng).unwrap();
        mf.tables_mut()[0]
            .weights
            .row_mut(0)
            .copy_from_slice(&[1.0, 0.0]);
        mf.tables_mut()[1]
            .weights
            .row_mut(0)
            .copy_from_slice(&[2.0, 0.0]);
        mf.tables_mut()[1]
            .weights
            .row_mut(1)
            .copy_from_slice(&[-1.0, 0.0]);
        assert!((exposure_shift(&mf, 3.0, 0, 0) - 3.0).abs() < 1e-12);
        assert!((exposure_shift(&mf, 3.0, 0, 1) + 3.0).abs() < 1e-12);
    }

    fn planted_small() -> InteractionLog {
        planted_ratings(&PlantedConfig {
            n_users: 40,
            n_items: 30,
            ratings_per_user: 8,
            ..PlantedConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn pipeline_is_deterministic_and_complete() {
        let log = planted_small();
        let cfg = SimConfig {
            epochs: 5,
            ..SimConfig::default()
        };
        let a = generate_semi_synthetic(&log, &cfg).unwrap();
        let b = generate_semi_synthetic(&log, &cfg).unwrap();
        assert_eq!(a, b);
        for t in [&a.p_relevance, &a.p_exposure, &a.stage1_exposure] {
            assert_eq!((t.n_users(), t.n_items()), (40, 30));
            assert!(t.is_valid_probability_grid());
        }
        let clicks = a.click_log().unwrap();
        assert!(clicks.interactions.iter().all(|it| it.value == 1.0));
        for u in 0..40 {
            for i in 0..30 {
                let p = a.click_prob(u, i).unwrap();
                assert_eq!(
                    p,
                    a.p_relevance.get(u, i).unwrap() * a.p_exposure.get(u, i).unwrap()
                );
            }
        }
    }

    #[test]
    fn uniform_exposure_equals_occurrence_constant() {
        let cfg = SimConfig {
            epochs: 3,
            kappa: 0.0,
            sigma2: 0.0,
            occurrence_constant: Some(0.3),
            ..SimConfig::default()
        };
        let o = generate_semi_synthetic(&planted_small(), &cfg).unwrap();
        assert!(o.p_exposure.values().iter().all(|&p| p == 0.3));
    }

    #[test]
    fn oracle_round_trip_through_raw_ids() {
        let cfg = SimConfig {
            epochs: 3,
            ..SimConfig::default()
        };
        let o = generate_semi_synthetic(&planted_small(), &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let manifest = write_oracle(dir.path(), &o, &cfg).unwrap();
        assert_eq!(manifest.n_clicks, o.clicks.len());
        assert_eq!(read_manifest(dir.path()).unwrap(), manifest);
        let back =
            ProbTable::read_triples(&dir.path().join(EXPOSURE_FILE), &o.user_ids, &o.item_ids)
                .unwrap();
        assert_eq!(back, o.p_exposure);

        let prepared = o.prepare(3, usize::MAX).unwrap();
        let remapped = o.p_exposure.remap(
            &o.user_ids,
            &o.item_ids,
            &prepared.log.user_ids,
            &prepared.log.item_ids,
        );
        assert_eq!(remapped, prepared.p_exposure);
        for (u, uid) in prepared.log.user_ids.iter().enumerate() {
            let ou = o.user_ids.iter().position(|s| s == uid).unwrap();
            let i = prepared.split.test[u];
            let oi = o
                .item_ids
                .iter()
                .position(|s| *s == prepared.log.item_ids[i])
                .unwrap();
            assert_eq!(prepared.p_exposure.get(u, i), o.p_exposure.get(ou, oi));
        }
    }

    #[test]
    fn missing_entries_read_back_as_none() {
        let mut t = ProbTable::filled(2, 2, 0.5);
        t.clear(1, 0);
        assert_eq!(t.get(1, 0), None);
        assert_eq!(t.get(5, 0), None);
        assert!(!t.is_valid_probability_grid());
    }
}
