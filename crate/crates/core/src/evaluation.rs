//! Sampled-candidate ranking evaluation: Hit@K and NDCG@K under standard,
//! oracle-unbiased, popularity-debiased and robust (learned propensity) weighting.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{sample_negatives, SplitDataset};
use crate::error::{Error, Result};
use crate::models::RecModel;
use crate::propensity::{g_beta, PropensityHead, DEFAULT_MU};
use crate::simulation::ProbTable;

/// Anything that scores (user, item) pairs.
pub trait Scorer {
    fn score_pair(&self, user: usize, item: usize) -> f64;
}

impl Scorer for RecModel {
    fn score_pair(&self, user: usize, item: usize) -> f64 {
        self.score_unchecked(user, item)
    }
}

impl<F: Fn(usize, usize) -> f64> Scorer for F {
    fn score_pair(&self, user: usize, item: usize) -> f64 {
        self(user, item)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Weighting {
    Standard,
    OracleUnbiased,
    PopularityDebiased,
    Robust,
}

impl std::str::FromStr for Weighting {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "standard" => Ok(Weighting::Standard),
            "oracleunbiased" | "oracle" | "unbiased" => Ok(Weighting::OracleUnbiased),
            "popularitydebiased" | "popularity" => Ok(Weighting::PopularityDebiased),
            "robust" => Ok(Weighting::Robust),
            other => Err(Error::config(format!("unknown weighting {:?}", other))),
        }
    }
}

impl std::fmt::Display for Weighting {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:?}", self)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalProtocol {
    /// Sampled negatives per test user (ignored with `full_catalog`).
    pub n_eval_negatives: usize,
    pub cutoffs: Vec<usize>,
    pub weighting: Weighting,
    /// Report the self-normalized weighted mean as the headline number.
    pub self_normalize: bool,
    /// Floor applied to every evaluation propensity.
    pub mu: f64,
    /// Rank against every item the user never interacted with.
    pub full_catalog: bool,
}

impl Default for EvalProtocol {
    fn default() -> Self {
        EvalProtocol {
            n_eval_negatives: 100,
            cutoffs: vec![1, 5, 10],
            weighting: Weighting::Standard,
            self_normalize: false,
            mu: DEFAULT_MU,
            full_catalog: false,
        }
    }
}

impl EvalProtocol {
    pub fn validate(&self) -> Result<()> {
        if self.cutoffs.is_empty() || self.cutoffs.contains(&0) {
            return Err(Error::config("cutoffs must be nonempty and positive"));
        }
        if self.cutoffs.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config("cutoffs must be strictly ascending"));
        }
        let max_k = *self.cutoffs.last().expect("nonempty");
        if !self.full_catalog && self.n_eval_negatives + 1 < max_k {
            return Err(Error::config(format!(
                "n_eval_negatives ({}) must be at least max cutoff - 1 ({})",
                self.n_eval_negatives,
                max_k - 1
            )));
        }
        if !(self.mu > 0.0 && self.mu < 0.5) {
            return Err(Error::config("evaluation mu must lie in (0, 0.5)"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Target {
    Validation,
    Test,
}

/// One user's ranking task. `items` holds the positive and its negatives in
/// tie-break order.
#[derive(Debug, Clone, PartialEq)]
pub struct UserCandidates {
    pub user: usize,
    pub positive: usize,
    pub items: Vec<usize>,
}

/// Draws the candidate lists for every user (ascending user id).
pub fn build_candidates<R: Rng + ?Sized>(
    split: &SplitDataset,
    target: Target,
    protocol: &EvalProtocol,
    rng: &mut R,
) -> Result<Vec<UserCandidates>> {
    let mut out = Vec::with_capacity(split.n_users);
    for user in 0..split.n_users {
        let positive = match target {
            Target::Validation => split.val[user],
            Target::Test => split.test[user],
        };
        let mut items = if protocol.full_catalog {
            (0..split.n_items)
                .filter(|&i| !split.is_known(user, i))
                .collect()
        } else {
            sample_negatives(user, protocol.n_eval_negatives, split, rng)?
        };
        items.push(positive);
        items.shuffle(rng);
        out.push(UserCandidates {
            user,
            positive,
            items,
        });
    }
    Ok(out)
}

/// 1 + (candidates scoring strictly above the positive) + (tied candidates
/// placed before it in `scores` order).
pub fn rank_in_order(scores: &[f64], positive_index: usize) -> usize {
    let sp = scores[positive_index];
    let above = scores.iter().filter(|&&s| s > sp).count();
    let ties_before = scores[..positive_index]
        .iter()
        .filter(|&&s| s == sp)
        .count();
    1 + above + ties_before
}

/// Rank of `positive` among itself and `negatives`, ties broken by a seeded
/// shuffle of the candidate list.
pub fn rank_position<S: Scorer + ?Sized, R: Rng + ?Sized>(
    scorer: &S,
    user: usize,
    positive: usize,
    negatives: &[usize],
    rng: &mut R,
) -> usize {
    let mut items: Vec<usize> = negatives.to_vec();
    items.push(positive);
    items.shuffle(rng);
    candidate_rank(scorer, user, positive, &items)
}

fn candidate_rank<S: Scorer + ?Sized>(
    scorer: &S,
    user: usize,
    positive: usize,
    items: &[usize],
) -> usize {
    let scores: Vec<f64> = items.iter().map(|&i| scorer.score_pair(user, i)).collect();
    let pos = items
        .iter()
        .position(|&i| i == positive)
        .expect("positive present in candidates");
    rank_in_order(&scores, pos)
}

pub fn hit_at_k(rank: usize, k: usize) -> f64 {
    if rank <= k {
        1.0
    } else {
        0.0
    }
}

pub fn ndcg_at_k(rank: usize, k: usize) -> f64 {
    if rank <= k {
        1.0 / ((rank + 1) as f64).log2()
    } else {
        0.0
    }
}

/// Where per-user propensities come from in weighted modes.
#[derive(Debug, Clone, Copy)]
pub enum WeightSource<'a> {
    None,
    Robust {
        g: &'a RecModel,
        head: &'a PropensityHead,
    },
    Oracle(&'a ProbTable),
    /// Train popularity frequencies normalized to (0, 1].
    Popularity(&'a [f64]),
}

/// Item popularity normalized by the most popular item's count.
pub fn popularity_propensities(split: &SplitDataset) -> Vec<f64> {
    let counts = split.item_train_counts();
    let max = counts.iter().copied().max().unwrap_or(0).max(1) as f64;
    counts.into_iter().map(|c| c as f64 / max).collect()
}

/// Per-candidate-set importance weights `1 / max(propensity, mu)`.
pub fn user_weights(
    candidates: &[UserCandidates],
    weighting: Weighting,
    source: WeightSource<'_>,
    mu: f64,
) -> Result<Vec<f64>> {
    let floor = |p: f64| 1.0 / p.max(mu);
    match (weighting, source) {
        (Weighting::Standard, _) => Ok(vec![1.0; candidates.len()]),
        (Weighting::Robust, WeightSource::Robust { g, head }) => Ok(candidates
            .iter()
            .map(|c| floor(g_beta(g.score_unchecked(c.user, c.positive), 1.0, head)))
            .collect()),
        (Weighting::OracleUnbiased, WeightSource::Oracle(table)) => {
            let mut missing = Vec::new();
            let mut w = Vec::with_capacity(candidates.len());
            for c in candidates {
                match table.get(c.user, c.positive) {
                    Some(p) => w.push(floor(p)),
                    None => missing.push((c.user, c.positive)),
                }
            }
            if !missing.is_empty() {
                let shown: Vec<String> = missing
                    .iter()
                    .take(20)
                    .map(|(u, i)| format!("({u}, {i})"))
                    .collect();
                return Err(Error::Evaluation(format!(
                    "oracle exposure table has no entry for {} test pair(s): {}{}",
                    missing.len(),
                    shown.join(", "),
                    if missing.len() > 20 { ", ..." } else { "" }
                )));
            }
            Ok(w)
        }
        (Weighting::PopularityDebiased, WeightSource::Popularity(pop)) => Ok(candidates
            .iter()
            .map(|c| floor(pop.get(c.positive).copied().unwrap_or(0.0)))
            .collect()),
        (w, _) => Err(Error::Evaluation(format!(
            "weighting {} needs a matching weight source",
            w
        ))),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub hit: f64,
    pub ndcg: f64,
    pub hit_se: f64,
    pub ndcg_se: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CutoffReport {
    pub k: usize,
    /// `Σ m_u w_u / N` (the plain mean under Standard weighting).
    pub raw: MetricSummary,
    /// `Σ m_u w_u / Σ w_u`; weighted modes only.
    pub self_normalized: Option<MetricSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub weighting: Weighting,
    pub protocol: EvalProtocol,
    pub seed: Option<u64>,
    pub n_users: usize,
    pub cutoffs: Vec<CutoffReport>,
    /// `(Σw)² / Σw²` for weighted modes.
    pub effective_sample_size: Option<f64>,
    /// Raw weighted values above 1 were produced.
    pub exceeds_unit: bool,
}

impl EvalReport {
    fn headline(&self, k: usize) -> Option<&MetricSummary> {
        let c = self.cutoffs.iter().find(|c| c.k == k)?;
        Some(match (&c.self_normalized, self.protocol.self_normalize) {
            (Some(sn), true) => sn,
            _ => &c.raw,
        })
    }

    pub fn hit(&self, k: usize) -> Option<f64> {
        self.headline(k).map(|m| m.hit)
    }

    pub fn ndcg(&self, k: usize) -> Option<f64> {
        self.headline(k).map(|m| m.ndcg)
    }

    /// Aligned-column text rendering.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "weighting={} users={} negatives={} full_catalog={} mu={} seed={}",
            self.weighting,
            self.n_users,
            self.protocol.n_eval_negatives,
            self.protocol.full_catalog,
            self.protocol.mu,
            self.seed.map_or("-".to_string(), |v| v.to_string())
        );
        if let Some(ess) = self.effective_sample_size {
            let _ = writeln!(s, "effective_sample_size={:.2}", ess);
        }
        let _ = writeln!(
            s,
            "{:>4}  {:>10}  {:>10}  {:>10}  {:>10}",
            "K", "Hit", "NDCG", "Hit(SN)", "NDCG(SN)"
        );
        for c in &self.cutoffs {
            let (hs, ns) = match &c.self_normalized {
                Some(m) => (format!("{:.4}", m.hit), format!("{:.4}", m.ndcg)),
                None => ("-".to_string(), "-".to_string()),
            };
            let _ = writeln!(
                s,
                "{:>4}  {:>10.4}  {:>10.4}  {:>10}  {:>10}",
                c.k, c.raw.hit, c.raw.ndcg, hs, ns
            );
        }
        if self.exceeds_unit {
            let _ = writeln!(
                s,
                "note: raw weighted values exceed 1; the self-normalized columns are bounded"
            );
        }
        s
    }
}

fn mean_se(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Self-normalized mean and its delta-method standard error.
fn snips(values: &[f64], weights: &[f64]) -> (f64, f64) {
    let sw: f64 = weights.iter().sum();
    let est = values.iter().zip(weights).map(|(m, w)| m * w).sum::<f64>() / sw;
    let wbar = sw / weights.len() as f64;
    let infl: Vec<f64> = values
        .iter()
        .zip(weights)
        .map(|(m, w)| w * (m - est) / wbar)
        .collect();
    (est, mean_se(&infl).1)
}

/// Ranks of every candidate set, in input order.
pub fn rank_candidates<S: Scorer + ?Sized>(
    scorer: &S,
    candidates: &[UserCandidates],
) -> Vec<usize> {
    candidates
        .iter()
        .map(|c| candidate_rank(scorer, c.user, c.positive, &c.items))
        .collect()
}

/// Evaluates precomputed candidate sets.
pub fn evaluate_candidates<S: Scorer + ?Sized>(
    scorer: &S,
    candidates: &[UserCandidates],
    protocol: &EvalProtocol,
    source: WeightSource<'_>,
) -> Result<EvalReport> {
    protocol.validate()?;
    if candidates.is_empty() {
        return Err(Error::Evaluation("no users to evaluate".to_string()));
    }
    let ranks = rank_candidates(scorer, candidates);
    let weights = user_weights(candidates, protocol.weighting, source, protocol.mu)?;
    let weighted = protocol.weighting != Weighting::Standard;
    let n = candidates.len() as f64;
    let mut exceeds_unit = false;
    let cutoffs = protocol
        .cutoffs
        .iter()
        .map(|&k| {
            let hits: Vec<f64> = ranks.iter().map(|&r| hit_at_k(r, k)).collect();
            let ndcgs: Vec<f64> = ranks.iter().map(|&r| ndcg_at_k(r, k)).collect();
            let wh: Vec<f64> = hits.iter().zip(&weights).map(|(m, w)| m * w).collect();
            let wn: Vec<f64> = ndcgs.iter().zip(&weights).map(|(m, w)| m * w).collect();
            let (hit, hit_se) = mean_se(&wh);
            let (ndcg, ndcg_se) = mean_se(&wn);
            if hit > 1.0 || ndcg > 1.0 {
                exceeds_unit = true;
            }
            let self_normalized = weighted.then(|| {
                let (h, hse) = snips(&hits, &weights);
                let (d, dse) = snips(&ndcgs, &weights);
                MetricSummary {
                    hit: h,
                    ndcg: d,
                    hit_se: hse,
                    ndcg_se: dse,
                }
            });
            CutoffReport {
                k,
                raw: MetricSummary {
                    hit,
                    ndcg,
                    hit_se,
                    ndcg_se,
                },
                self_normalized,
            }
        })
        .collect();
    let effective_sample_size = weighted.then(|| {
        let s: f64 = weights.iter().sum();
        let s2: f64 = weights.iter().map(|w| w * w).sum();
        s * s / s2
    });
    debug_assert!(n > 0.0);
    Ok(EvalReport {
        weighting: protocol.weighting,
        protocol: protocol.clone(),
        seed: None,
        n_users: candidates.len(),
        cutoffs,
        effective_sample_size,
        exceeds_unit,
    })
}

/// Test-set evaluation with freshly drawn candidates.
pub fn evaluate<S: Scorer + ?Sized, R: Rng + ?Sized>(
    scorer: &S,
    split: &SplitDataset,
    protocol: &EvalProtocol,
    source: WeightSource<'_>,
    rng: &mut R,
) -> Result<EvalReport> {
    protocol.validate()?;
    let candidates = build_candidates(split, Target::Test, protocol, rng)?;
    evaluate_candidates(scorer, &candidates, protocol, source)
}

/// Difference between the oracle-weighted and the standard NDCG@10, with its
/// standard error over test users.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GapEstimate {
    pub gap: f64,
    pub std_error: f64,
}

/// `|OracleUnbiased NDCG@10 − Standard NDCG@10|`, self-normalized when the
/// protocol asks for it.
pub fn unbiased_gap<S: Scorer + ?Sized, R: Rng + ?Sized>(
    scorer: &S,
    oracle: &ProbTable,
    split: &SplitDataset,
    protocol: &EvalProtocol,
    rng: &mut R,
) -> Result<GapEstimate> {
    protocol.validate()?;
    let candidates = build_candidates(split, Target::Test, protocol, rng)?;
    let ranks = rank_candidates(scorer, &candidates);
    let weights = user_weights(
        &candidates,
        Weighting::OracleUnbiased,
        WeightSource::Oracle(oracle),
        protocol.mu,
    )?;
    let m: Vec<f64> = ranks.iter().map(|&r| ndcg_at_k(r, 10)).collect();
    let (standard, _) = mean_se(&m);
    let (diff, se) = if protocol.self_normalize {
        let (sn, _) = snips(&m, &weights);
        let wbar = weights.iter().sum::<f64>() / weights.len() as f64;
        let infl: Vec<f64> = m
            .iter()
            .zip(&weights)
            .map(|(mu, w)| w * (mu - sn) / wbar - (mu - standard))
            .collect();
        (sn - standard, mean_se(&infl).1)
    } else {
        let d: Vec<f64> = m
            .iter()
            .zip(&weights)
            .map(|(mu, w)| mu * (w - 1.0))
            .collect();
        mean_se(&d)
    };
    Ok(GapEstimate {
        gap: diff.abs(),
        std_error: se,
    })
}
