//! ERM, two-stage propensity-score (PS) and adversarial counterfactual (ACL)
//! training.
//!
//! The ACL objective over a batch is
//!
//! ```text
//! J(θ, β, ψ) = mean_j[ ℓ(y_j, f_θ(u_j, i_j)) / G_β(g_ψ(u_j, i_j), y_j) ] − α · reg(g_ψ)
//! ```
//!
//! `θ` and `β` descend on `J`, `ψ` ascends on it. Each batch is used for one
//! descent step followed by one ascent step, and both learning rates are divided
//! by their discounts after every epoch.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{make_batches, Batch, SplitDataset};
use crate::error::{Error, Result};
use crate::evaluation::{
    build_candidates, evaluate_candidates, EvalProtocol, Target, UserCandidates, WeightSource,
};
use crate::models::{init_model, pop_fit, ModelGradients, ModelKind, RecModel};
use crate::numerics::{
    adam_step, logistic_loss, logistic_loss_grad, sgd_step, sparse_adam_step, sparse_sgd_step,
    AdamConfig, AdamState, DenseMatrix,
};
use crate::propensity::{
    g_beta, g_beta_grads, item_feedback_rate, regularizer_grad, regularizer_loss, PropensityHead,
    RegularizerInput, RegularizerKind, DEFAULT_MU,
};

/// Objective magnitude treated as divergence.
pub const DIVERGENCE_LIMIT: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainMode {
    Erm,
    Ps,
    Acl,
}

impl std::fmt::Display for TrainMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TrainMode::Erm => "erm",
            TrainMode::Ps => "ps",
            TrainMode::Acl => "acl",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    /// Sparse Adam on embedding tables, Adam on dense weights.
    Adam,
    /// Plain gradient steps.
    Sgd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub f_kind: ModelKind,
    pub g_kind: ModelKind,
    pub dim: usize,
    pub layer_spec: Option<Vec<usize>>,
    /// Initial learning rate of `f` and `β`.
    pub r_theta: f64,
    /// Initial learning rate of `g`.
    pub r_psi: f64,
    pub d_theta: f64,
    pub d_psi: f64,
    pub alpha: f64,
    pub reg_kind: RegularizerKind,
    pub mu: f64,
    pub batch_size: usize,
    pub negs_per_pos: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub objective_tol: f64,
    pub l2: f64,
    pub seed: u64,
    pub optimizer: OptimizerKind,
    pub adam: AdamConfig,
    /// Sampled negatives per user for the per-epoch validation ranking.
    pub val_negatives: usize,
    /// Users sampled per batch for the popularity-correlation regularizer.
    pub popularity_users: usize,
    /// Keep `β` fixed at its initial value.
    pub freeze_head: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: TrainMode::Acl,
            f_kind: ModelKind::MF,
            g_kind: ModelKind::MF,
            dim: 32,
            layer_spec: None,
            r_theta: 0.01,
            r_psi: 0.05,
            d_theta: 1.02,
            d_psi: 1.0,
            alpha: 1.0,
            reg_kind: RegularizerKind::FeedbackLoss,
            mu: DEFAULT_MU,
            batch_size: 256,
            negs_per_pos: 4,
            max_epochs: 50,
            patience: 10,
            objective_tol: 1e-3,
            l2: 0.0,
            seed: 0,
            optimizer: OptimizerKind::Adam,
            adam: AdamConfig::default(),
            val_negatives: 100,
            popularity_users: 64,
            freeze_head: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::config(m.to_string()));
        if !(self.r_theta >= 0.0 && self.r_psi >= 0.0) {
            return bad("learning rates must be non-negative");
        }
        if !(self.d_theta >= 1.0 && self.d_psi >= 1.0) {
            return bad("learning-rate discounts must be >= 1");
        }
        if self.alpha.is_nan() || self.alpha < 0.0 {
            return bad("alpha must be >= 0");
        }
        if self.patience < 1 {
            return bad("patience must be >= 1");
        }
        if self.batch_size < 1 {
            return bad("batch_size must be >= 1");
        }
        if self.dim < 1 {
            return bad("dim must be >= 1");
        }
        if self.l2.is_nan() || self.l2 < 0.0 {
            return bad("l2 must be >= 0");
        }
        if !(self.mu > 0.0 && self.mu < 0.5) {
            return bad("mu must lie in (0, 0.5)");
        }
        if self.val_negatives + 1 < 10 {
            return bad("val_negatives must be at least 9 for Hit@10");
        }
        Ok(())
    }

    fn val_protocol(&self) -> EvalProtocol {
        EvalProtocol {
            n_eval_negatives: self.val_negatives,
            cutoffs: vec![10],
            ..EvalProtocol::default()
        }
    }
}

/// Optimizer state for every parameter of one model.
#[derive(Debug, Clone)]
pub struct ModelOptimizer {
    kind: OptimizerKind,
    tables: Vec<AdamState>,
    dense: Vec<AdamState>,
}

impl ModelOptimizer {
    pub fn new(model: &RecModel, kind: OptimizerKind, adam: AdamConfig) -> Self {
        ModelOptimizer {
            kind,
            tables: model
                .tables()
                .iter()
                .map(|t| AdamState::for_param(&t.weights, adam))
                .collect(),
            dense: model
                .dense()
                .iter()
                .map(|d| AdamState::for_param(d, adam))
                .collect(),
        }
    }

    /// Descends along `grads`. With `l2 > 0` the penalty `l2·‖p‖²` is added for
    /// the touched embedding rows and every dense weight.
    pub fn step(
        &mut self,
        model: &mut RecModel,
        grads: &ModelGradients,
        lr: f64,
        l2: f64,
    ) -> Result<()> {
        for (t, (table, rows)) in model.tables_mut().iter_mut().zip(&grads.tables).enumerate() {
            let owned;
            let rows = if l2 > 0.0 {
                let mut r = rows.clone();
                for (&row, g) in r.iter_mut() {
                    for (gv, pv) in g.iter_mut().zip(table.weights.row(row)) {
                        *gv += 2.0 * l2 * pv;
                    }
                }
                owned = r;
                &owned
            } else {
                rows
            };
            match self.kind {
                OptimizerKind::Adam => {
                    sparse_adam_step(&mut table.weights, rows, &mut self.tables[t], lr)?
                }
                OptimizerKind::Sgd => sparse_sgd_step(&mut table.weights, rows, lr)?,
            }
        }
        for (d, (param, grad)) in model.dense_mut().iter_mut().zip(&grads.dense).enumerate() {
            let owned;
            let grad = if l2 > 0.0 {
                let mut g = grad.clone();
                for (gv, pv) in g.as_mut_slice().iter_mut().zip(param.as_slice()) {
                    *gv += 2.0 * l2 * pv;
                }
                owned = g;
                &owned
            } else {
                grad
            };
            match self.kind {
                OptimizerKind::Adam => adam_step(param, grad, &mut self.dense[d], lr)?,
                OptimizerKind::Sgd => sgd_step(param, grad, lr)?,
            }
        }
        Ok(())
    }
}

/// Optimizer for the three head coefficients.
#[derive(Debug, Clone)]
pub struct HeadOptimizer {
    kind: OptimizerKind,
    state: AdamState,
}

impl HeadOptimizer {
    pub fn new(kind: OptimizerKind, adam: AdamConfig) -> Self {
        HeadOptimizer {
            kind,
            state: AdamState::new(1, 3, adam),
        }
    }

    pub fn step(&mut self, head: &mut PropensityHead, grad: [f64; 3], lr: f64) -> Result<()> {
        let mut p = DenseMatrix::from_vec(1, 3, head.beta().to_vec())?;
        let g = DenseMatrix::from_vec(1, 3, grad.to_vec())?;
        match self.kind {
            OptimizerKind::Adam => adam_step(&mut p, &g, &mut self.state, lr)?,
            OptimizerKind::Sgd => sgd_step(&mut p, &g, lr)?,
        }
        let s = p.as_slice();
        head.set_beta([s[0], s[1], s[2]]);
        Ok(())
    }
}

/// Mean logistic loss of `model` on `batch`.
pub fn batch_loss(model: &RecModel, batch: &Batch) -> f64 {
    batch
        .iter()
        .map(|(u, i, y)| logistic_loss(y, model.score_unchecked(u, i)))
        .sum::<f64>()
        / batch.len() as f64
}

/// Mean logistic loss and its gradient.
pub fn batch_loss_grad(model: &RecModel, batch: &Batch) -> (f64, ModelGradients) {
    weighted_loss_grad(model, batch, None)
}

/// `mean_j ℓ_j / G_j` (or plain `mean_j ℓ_j` when `propensity` is `None`) and its
/// gradient with respect to the scored model. The two share one code path so
/// constant weights scale every intermediate exactly.
fn weighted_loss_grad(
    model: &RecModel,
    batch: &Batch,
    propensity: Option<(&RecModel, &PropensityHead)>,
) -> (f64, ModelGradients) {
    let n = batch.len() as f64;
    let mut grads = ModelGradients::zeros_like(model);
    let mut total = 0.0;
    for (u, i, y) in batch.iter() {
        let s = model.score_unchecked(u, i);
        let (loss, dloss) = match propensity {
            None => (logistic_loss(y, s), logistic_loss_grad(y, s)),
            Some((g, head)) => {
                let p = g_beta(g.score_unchecked(u, i), y, head);
                (logistic_loss(y, s) / p, logistic_loss_grad(y, s) / p)
            }
        };
        total += loss;
        model.accumulate_grad(u, i, dloss / n, &mut grads);
    }
    (total / n, grads)
}

/// Components of the ACL objective on one batch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AclParts {
    pub objective: f64,
    pub weighted_f_loss: f64,
    pub reg_term: f64,
}

/// Regularizer data that lives outside the feedback batches.
#[derive(Debug, Clone, PartialEq)]
pub enum RegularizerData {
    /// Uses each feedback batch itself.
    Feedback,
    /// Observed exposure labels (+1 exposed, −1 not); consumed in batch-sized
    /// chunks, cycling.
    Exposure(Batch),
    /// Per-item positive feedback rates; users are sampled per batch.
    Popularity { feedback_rate: Vec<f64> },
}

impl RegularizerData {
    /// Builds the data a regularizer kind needs from the split (exposure labels
    /// must be supplied separately).
    pub fn for_kind(
        kind: RegularizerKind,
        split: &SplitDataset,
        exposure: Option<Batch>,
    ) -> Result<Self> {
        match kind {
            RegularizerKind::FeedbackLoss => Ok(RegularizerData::Feedback),
            RegularizerKind::PopularityCorrelation => Ok(RegularizerData::Popularity {
                feedback_rate: item_feedback_rate(split),
            }),
            RegularizerKind::ExposureLoss => match exposure {
                Some(b) if !b.is_empty() => Ok(RegularizerData::Exposure(b)),
                _ => Err(Error::config(
                    "ExposureLoss regularizer requires observed exposure labels",
                )),
            },
        }
    }

    fn kind(&self) -> RegularizerKind {
        match self {
            RegularizerData::Feedback => RegularizerKind::FeedbackLoss,
            RegularizerData::Exposure(_) => RegularizerKind::ExposureLoss,
            RegularizerData::Popularity { .. } => RegularizerKind::PopularityCorrelation,
        }
    }
}

/// Regularizer input for one batch: a concrete borrowed view.
pub enum RegView<'a> {
    Pairs(Batch),
    Borrowed(RegularizerInput<'a>),
}

impl RegView<'_> {
    pub fn input(&self) -> RegularizerInput<'_> {
        match self {
            RegView::Pairs(b) => RegularizerInput::Pairs(b),
            RegView::Borrowed(i) => *i,
        }
    }
}

/// Chooses what the regularizer sees for batch number `batch_index`.
fn reg_view<'a>(
    data: &'a RegularizerData,
    batch: &'a Batch,
    batch_index: usize,
    users: &'a [usize],
) -> RegView<'a> {
    match data {
        RegularizerData::Feedback => RegView::Borrowed(RegularizerInput::Pairs(batch)),
        RegularizerData::Exposure(all) => {
            let size = batch.len().max(1);
            let chunks = all.len().div_ceil(size);
            let c = batch_index % chunks;
            let lo = c * size;
            let hi = (lo + size).min(all.len());
            RegView::Pairs(Batch {
                users: all.users[lo..hi].to_vec(),
                items: all.items[lo..hi].to_vec(),
                labels: all.labels[lo..hi].to_vec(),
            })
        }
        RegularizerData::Popularity { feedback_rate } => {
            RegView::Borrowed(RegularizerInput::Popularity {
                users,
                feedback_rate,
            })
        }
    }
}

/// The batch ACL objective.
pub fn acl_loss(
    f: &RecModel,
    g: &RecModel,
    head: &PropensityHead,
    batch: &Batch,
    alpha: f64,
    reg_kind: RegularizerKind,
    reg_input: RegularizerInput<'_>,
) -> Result<AclParts> {
    if batch.is_empty() {
        return Err(Error::config("acl_loss needs a nonempty batch"));
    }
    let mut weighted = 0.0;
    for (u, i, y) in batch.iter() {
        let fs = f.score(u, i)?;
        let p = g_beta(g.score(u, i)?, y, head);
        weighted += logistic_loss(y, fs) / p;
    }
    let weighted_f_loss = weighted / batch.len() as f64;
    let reg_term = if alpha == 0.0 {
        0.0
    } else {
        regularizer_loss(reg_kind, g, reg_input)?.value
    };
    Ok(AclParts {
        objective: weighted_f_loss - alpha * reg_term,
        weighted_f_loss,
        reg_term,
    })
}

/// Gradients of the batch ACL objective w.r.t. `θ` and `β`. The regularizer does
/// not depend on either, so `α` does not enter.
pub fn acl_theta_grads(
    f: &RecModel,
    g: &RecModel,
    head: &PropensityHead,
    batch: &Batch,
) -> (f64, ModelGradients, [f64; 3]) {
    let n = batch.len() as f64;
    let mut grads = ModelGradients::zeros_like(f);
    let mut beta = [0.0; 3];
    let mut total = 0.0;
    for (u, i, y) in batch.iter() {
        let fs = f.score_unchecked(u, i);
        let gs = g.score_unchecked(u, i);
        let p = g_beta(gs, y, head);
        debug_assert!(
            (1.0..=1.0 / head.mu + 1e-9).contains(&(1.0 / p)),
            "importance weight out of bounds"
        );
        let loss = logistic_loss(y, fs);
        total += loss / p;
        f.accumulate_grad(u, i, logistic_loss_grad(y, fs) / p / n, &mut grads);
        let hg = g_beta_grads(gs, y, head, -loss / (p * p) / n);
        beta[0] += hg.beta0;
        beta[1] += hg.beta1;
        beta[2] += hg.beta2;
    }
    (total / n, grads, beta)
}

/// Gradient of the batch ACL objective w.r.t. `ψ` (ascent direction).
pub fn acl_psi_grads(
    f: &RecModel,
    g: &RecModel,
    head: &PropensityHead,
    batch: &Batch,
    alpha: f64,
    reg_kind: RegularizerKind,
    reg_input: RegularizerInput<'_>,
) -> Result<(AclParts, ModelGradients)> {
    let n = batch.len() as f64;
    let mut grads = ModelGradients::zeros_like(g);
    let mut total = 0.0;
    for (u, i, y) in batch.iter() {
        let fs = f.score_unchecked(u, i);
        let gs = g.score_unchecked(u, i);
        let p = g_beta(gs, y, head);
        let loss = logistic_loss(y, fs);
        total += loss / p;
        let hg = g_beta_grads(gs, y, head, -loss / (p * p) / n);
        if hg.g_score != 0.0 {
            g.accumulate_grad(u, i, hg.g_score, &mut grads);
        }
    }
    let reg_term = if alpha == 0.0 {
        0.0
    } else {
        regularizer_grad(reg_kind, g, reg_input, -alpha, &mut grads)?.value
    };
    let weighted_f_loss = total / n;
    Ok((
        AclParts {
            objective: weighted_f_loss - alpha * reg_term,
            weighted_f_loss,
            reg_term,
        },
        grads,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopMode {
    /// Stop when the metric has not improved by more than `tol` over its running
    /// best for `patience` epochs.
    Metric,
    /// Stop when consecutive values have changed by less than `tol` for
    /// `patience` epochs.
    Objective,
}

pub fn early_stop_check(history: &[f64], patience: usize, tol: f64, mode: StopMode) -> bool {
    if history.is_empty() || patience == 0 {
        return false;
    }
    match mode {
        StopMode::Metric => {
            let mut best = history[0];
            let mut last = 0;
            for (k, &v) in history.iter().enumerate().skip(1) {
                if v > best + tol {
                    best = v;
                    last = k;
                }
            }
            history.len() - 1 - last >= patience
        }
        StopMode::Objective => {
            let stable = history
                .windows(2)
                .rev()
                .take_while(|w| (w[1] - w[0]).abs() < tol)
                .count();
            stable >= patience
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "reason")]
pub enum StopReason {
    EarlyStopped,
    Converged,
    MaxEpochs,
    Diverged { epoch: usize, objective: f64 },
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub objective: f64,
    pub weighted_f_loss: Option<f64>,
    pub reg_term: Option<f64>,
    pub lr_theta: f64,
    pub lr_psi: Option<f64>,
    pub f_val_hit10: f64,
    pub f_val_ndcg10: f64,
    pub g_val_hit10: Option<f64>,
    pub g_val_ndcg10: Option<f64>,
    pub beta: Option<[f64; 3]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub epochs: usize,
    pub lr_theta: f64,
    pub lr_psi: f64,
    pub objective_history: Vec<f64>,
    pub val_hit_history: Vec<f64>,
    pub records: Vec<EpochRecord>,
    /// Epoch (1-based) of the returned checkpoint.
    pub best_epoch: usize,
    /// Parameter fingerprint of `f` after each epoch.
    pub fingerprints: Vec<u64>,
    pub stop_reason: StopReason,
}

impl TrainState {
    fn new(cfg: &TrainConfig) -> Self {
        TrainState {
            epochs: 0,
            lr_theta: cfg.r_theta,
            lr_psi: cfg.r_psi,
            objective_history: Vec::new(),
            val_hit_history: Vec::new(),
            records: Vec::new(),
            best_epoch: 0,
            fingerprints: Vec::new(),
            stop_reason: StopReason::MaxEpochs,
        }
    }

    pub fn diverged(&self) -> bool {
        matches!(self.stop_reason, StopReason::Diverged { .. })
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: RecModel,
    pub head: Option<PropensityHead>,
    pub state: TrainState,
}

#[derive(Debug, Clone)]
pub struct AclOutcome {
    pub f: RecModel,
    pub g: RecModel,
    pub head: PropensityHead,
    pub state: TrainState,
}

#[derive(Debug, Clone)]
pub struct PsOutcome {
    pub f: RecModel,
    pub g: RecModel,
    pub head: PropensityHead,
    pub g_state: TrainState,
    pub state: TrainState,
}

const VALIDATION_STREAM: u64 = 0x5eed_0001;
const PS_STAGE1_STREAM: u64 = 0x5eed_0002;
const INIT_F_STREAM: u64 = 0x5eed_0003;
const INIT_G_STREAM: u64 = 0x5eed_0004;
const POPULARITY_STREAM: u64 = 0x5eed_0005;

/// Derives an independent generator for one purpose from the run seed.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Fresh `f` (and `g`) for a config, using fixed seed streams.
pub fn init_f(cfg: &TrainConfig, split: &SplitDataset) -> Result<RecModel> {
    init_model(
        cfg.f_kind,
        split.n_users,
        split.n_items,
        cfg.dim,
        cfg.layer_spec.as_deref(),
        &mut stream_rng(cfg.seed, INIT_F_STREAM),
    )
}

pub fn init_g(cfg: &TrainConfig, split: &SplitDataset) -> Result<RecModel> {
    init_model(
        cfg.g_kind,
        split.n_users,
        split.n_items,
        cfg.dim,
        cfg.layer_spec.as_deref(),
        &mut stream_rng(cfg.seed, INIT_G_STREAM),
    )
}

fn validation_candidates(cfg: &TrainConfig, split: &SplitDataset) -> Result<Vec<UserCandidates>> {
    build_candidates(
        split,
        Target::Validation,
        &cfg.val_protocol(),
        &mut stream_rng(cfg.seed, VALIDATION_STREAM),
    )
}

fn validate_at10(
    model: &RecModel,
    candidates: &[UserCandidates],
    cfg: &TrainConfig,
) -> Result<(f64, f64)> {
    let rep = evaluate_candidates(model, candidates, &cfg.val_protocol(), WeightSource::None)?;
    Ok((rep.hit(10).unwrap_or(0.0), rep.ndcg(10).unwrap_or(0.0)))
}

fn check_split(model: &RecModel, split: &SplitDataset) -> Result<()> {
    if model.n_users() != split.n_users || model.n_items() != split.n_items {
        return Err(Error::config(format!(
            "model id space {}x{} does not match split {}x{}",
            model.n_users(),
            model.n_items(),
            split.n_users,
            split.n_items
        )));
    }
    Ok(())
}

/// Shared loop for ERM and the PS second stage: minimizes the (optionally
/// propensity-weighted) mean logistic loss with early stopping on validation
/// Hit@10, returning the best-validation checkpoint.
fn weighted_erm(
    mut model: RecModel,
    split: &SplitDataset,
    cfg: &TrainConfig,
    mut propensity: Option<(&RecModel, PropensityHead)>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    check_split(&model, split)?;
    let mut state = TrainState::new(cfg);
    if !model.is_trainable() {
        pop_fit(&mut model, split)?;
        let candidates = validation_candidates(cfg, split)?;
        let (h, n) = validate_at10(&model, &candidates, cfg)?;
        state.val_hit_history.push(h);
        state.records.push(EpochRecord {
            epoch: 0,
            objective: 0.0,
            weighted_f_loss: None,
            reg_term: None,
            lr_theta: 0.0,
            lr_psi: None,
            f_val_hit10: h,
            f_val_ndcg10: n,
            g_val_hit10: None,
            g_val_ndcg10: None,
            beta: None,
        });
        state.stop_reason = StopReason::Converged;
        return Ok(TrainOutcome {
            model,
            head: propensity.map(|(_, h)| h),
            state,
        });
    }
    let candidates = validation_candidates(cfg, split)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = ModelOptimizer::new(&model, cfg.optimizer, cfg.adam);
    let mut head_opt = HeadOptimizer::new(cfg.optimizer, cfg.adam);
    let mut best = (model.clone(), propensity.as_ref().map(|(_, h)| *h));
    let mut best_hit = f64::NEG_INFINITY;
    let lr = cfg.r_theta;

    for epoch in 1..=cfg.max_epochs {
        let batches = make_batches(split, cfg.batch_size, cfg.negs_per_pos, &mut rng)?;
        let mut sum = 0.0;
        for batch in &batches {
            let (loss, grads) = match &propensity {
                None => weighted_loss_grad(&model, batch, None),
                Some((g, head)) => weighted_loss_grad(&model, batch, Some((g, head))),
            };
            if !loss.is_finite() {
                state.stop_reason = StopReason::Diverged {
                    epoch,
                    objective: loss,
                };
                break;
            }
            sum += loss;
            opt.step(&mut model, &grads, lr, cfg.l2)?;
            if let Some((g, head)) = propensity.as_mut() {
                if !cfg.freeze_head {
                    let (_, _, beta_grad) = acl_theta_grads(&model, g, head, batch);
                    head_opt.step(head, beta_grad, lr)?;
                }
            }
        }
        if state.diverged() || !model.is_finite() {
            if !state.diverged() {
                state.stop_reason = StopReason::Diverged {
                    epoch,
                    objective: f64::NAN,
                };
            }
            log::warn!("training diverged at epoch {epoch}; returning best checkpoint");
            break;
        }
        let objective = sum / batches.len().max(1) as f64;
        let (hit, ndcg) = validate_at10(&model, &candidates, cfg)?;
        state.epochs = epoch;
        state.objective_history.push(objective);
        state.val_hit_history.push(hit);
        state.fingerprints.push(model.fingerprint());
        state.records.push(EpochRecord {
            epoch,
            objective,
            weighted_f_loss: propensity.as_ref().map(|_| objective),
            reg_term: None,
            lr_theta: lr,
            lr_psi: None,
            f_val_hit10: hit,
            f_val_ndcg10: ndcg,
            g_val_hit10: None,
            g_val_ndcg10: None,
            beta: propensity.as_ref().map(|(_, h)| h.beta()),
        });
        if hit > best_hit {
            best_hit = hit;
            best = (model.clone(), propensity.as_ref().map(|(_, h)| *h));
            state.best_epoch = epoch;
        }
        if early_stop_check(&state.val_hit_history, cfg.patience, 0.0, StopMode::Metric) {
            state.stop_reason = StopReason::EarlyStopped;
            break;
        }
    }
    Ok(TrainOutcome {
        model: best.0,
        head: best.1,
        state,
    })
}

/// Plain ERM on the logistic loss.
pub fn erm_train(model: RecModel, split: &SplitDataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    weighted_erm(model, split, cfg, None)
}

/// Second PS stage: propensity-weighted ERM of `f` against a frozen `g`; `β` is
/// trained alongside `f` unless `cfg.freeze_head`.
pub fn ps_stage2(
    f: RecModel,
    g: &RecModel,
    head: PropensityHead,
    split: &SplitDataset,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    check_split(g, split)?;
    weighted_erm(f, split, cfg, Some((g, head)))
}

/// Two-stage propensity-score baseline: fit `g` by ERM on the feedback, freeze
/// it, then train `f` by propensity-weighted ERM.
pub fn ps_train(split: &SplitDataset, cfg: &TrainConfig) -> Result<PsOutcome> {
    cfg.validate()?;
    let stage1_cfg = TrainConfig {
        seed: stream_rng(cfg.seed, PS_STAGE1_STREAM).next_u64_seed(),
        ..cfg.clone()
    };
    let g_out = erm_train(init_g(cfg, split)?, split, &stage1_cfg)?;
    let g = g_out.model;
    let head = PropensityHead::neutral(cfg.mu)?;
    let f_out = ps_stage2(init_f(cfg, split)?, &g, head, split, cfg)?;
    Ok(PsOutcome {
        f: f_out.model,
        head: f_out.head.unwrap_or(head),
        g,
        g_state: g_out.state,
        state: f_out.state,
    })
}

trait NextSeed {
    fn next_u64_seed(self) -> u64;
}

impl NextSeed for ChaCha8Rng {
    fn next_u64_seed(mut self) -> u64 {
        rand::RngCore::next_u64(&mut self)
    }
}

/// Two-timescale gradient descent–ascent on the ACL objective.
///
/// Per batch: a descent step on `θ` and `β` with `lr_theta`, then an ascent step
/// on `ψ` with `lr_psi` on the same batch. After each epoch the rates are divided
/// by `d_theta` / `d_psi`. Training stops once the epoch objective has changed by
/// less than `objective_tol` for `patience` consecutive epochs, at `max_epochs`,
/// or on divergence (returning the last finite end-of-epoch state).
pub fn acl_train(
    f: RecModel,
    g: RecModel,
    head: PropensityHead,
    split: &SplitDataset,
    cfg: &TrainConfig,
    reg: &RegularizerData,
) -> Result<AclOutcome> {
    cfg.validate()?;
    check_split(&f, split)?;
    check_split(&g, split)?;
    if !f.is_trainable() || !g.is_trainable() {
        return Err(Error::config("ACL needs trainable f and g (not Pop)"));
    }
    if reg.kind() != cfg.reg_kind {
        return Err(Error::config(format!(
            "regularizer data is for {:?} but config asks for {:?}",
            reg.kind(),
            cfg.reg_kind
        )));
    }
    let candidates = validation_candidates(cfg, split)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut pop_rng = stream_rng(cfg.seed, POPULARITY_STREAM);
    let (mut f, mut g, mut head) = (f, g, head);
    let mut f_opt = ModelOptimizer::new(&f, cfg.optimizer, cfg.adam);
    let mut g_opt = ModelOptimizer::new(&g, cfg.optimizer, cfg.adam);
    let mut head_opt = HeadOptimizer::new(cfg.optimizer, cfg.adam);
    let mut state = TrainState::new(cfg);
    let mut last_good = (f.clone(), g.clone(), head);
    let all_users: Vec<usize> = (0..split.n_users).collect();

    'epochs: for epoch in 1..=cfg.max_epochs {
        let (lr_theta, lr_psi) = (state.lr_theta, state.lr_psi);
        let batches = make_batches(split, cfg.batch_size, cfg.negs_per_pos, &mut rng)?;
        let (mut obj_sum, mut wf_sum, mut reg_sum) = (0.0, 0.0, 0.0);
        for (b, batch) in batches.iter().enumerate() {
            let users: Vec<usize> = match reg {
                RegularizerData::Popularity { .. } => {
                    let m = cfg.popularity_users.min(split.n_users).max(1);
                    rand::seq::index::sample(&mut pop_rng, all_users.len(), m).into_vec()
                }
                _ => Vec::new(),
            };
            let view = reg_view(reg, batch, b, &users);

            // Descent on θ and β.
            let (_, f_grads, beta_grad) = acl_theta_grads(&f, &g, &head, batch);
            let parts = acl_loss(&f, &g, &head, batch, cfg.alpha, cfg.reg_kind, view.input())?;
            if !parts.objective.is_finite() || parts.objective.abs() > DIVERGENCE_LIMIT {
                state.stop_reason = StopReason::Diverged {
                    epoch,
                    objective: parts.objective,
                };
                break 'epochs;
            }
            obj_sum += parts.objective;
            wf_sum += parts.weighted_f_loss;
            reg_sum += parts.reg_term;
            f_opt.step(&mut f, &f_grads, lr_theta, cfg.l2)?;
            if !cfg.freeze_head {
                head_opt.step(&mut head, beta_grad, lr_theta)?;
            }

            // Ascent on ψ: the optimizer descends on −J.
            let (_, mut g_grads) =
                acl_psi_grads(&f, &g, &head, batch, cfg.alpha, cfg.reg_kind, view.input())?;
            g_grads.scale(-1.0);
            g_opt.step(&mut g, &g_grads, lr_psi, cfg.l2)?;
        }
        if !f.is_finite() || !g.is_finite() || !head.beta().iter().all(|b| b.is_finite()) {
            state.stop_reason = StopReason::Diverged {
                epoch,
                objective: f64::NAN,
            };
            break;
        }
        let nb = batches.len().max(1) as f64;
        let objective = obj_sum / nb;
        let (fh, fnd) = validate_at10(&f, &candidates, cfg)?;
        let (gh, gnd) = validate_at10(&g, &candidates, cfg)?;
        state.epochs = epoch;
        state.objective_history.push(objective);
        state.val_hit_history.push(fh);
        state.fingerprints.push(f.fingerprint());
        state.records.push(EpochRecord {
            epoch,
            objective,
            weighted_f_loss: Some(wf_sum / nb),
            reg_term: Some(reg_sum / nb),
            lr_theta,
            lr_psi: Some(lr_psi),
            f_val_hit10: fh,
            f_val_ndcg10: fnd,
            g_val_hit10: Some(gh),
            g_val_ndcg10: Some(gnd),
            beta: Some(head.beta()),
        });
        state.best_epoch = epoch;
        last_good = (f.clone(), g.clone(), head);
        state.lr_theta = lr_theta / cfg.d_theta;
        state.lr_psi = lr_psi / cfg.d_psi;
        if early_stop_check(
            &state.objective_history,
            cfg.patience,
            cfg.objective_tol,
            StopMode::Objective,
        ) {
            state.stop_reason = StopReason::Converged;
            break;
        }
    }
    if state.diverged() {
        log::warn!("ACL training diverged; returning last finite epoch");
    }
    let (f, g, head) = last_good;
    Ok(AclOutcome { f, g, head, state })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::AdamConfig;

    #[test]
    fn early_stop_examples() {
        let inc: Vec<f64> = (0..20).map(|x| x as f64).collect();
        assert!(!early_stop_check(&inc, 10, 0.0, StopMode::Metric));
        let mut h = vec![0.1, 0.2, 0.3];
        h.extend(std::iter::repeat_n(0.3, 9));
        assert!(!early_stop_check(&h, 10, 0.0, StopMode::Metric));
        h.push(0.3);
        assert_eq!(h.len(), 13);
        assert!(early_stop_check(&h, 10, 0.0, StopMode::Metric));
        assert!(!early_stop_check(&[0.5, 0.4], 10, 0.0, StopMode::Metric));

        let flat = vec![1.0, 0.5, 0.4999, 0.4998, 0.4997];
        assert!(early_stop_check(&flat, 3, 1e-3, StopMode::Objective));
        assert!(!early_stop_check(&flat, 4, 1e-3, StopMode::Objective));
    }

    fn random_split(n_users: usize, n_items: usize, per_user: usize, seed: u64) -> SplitDataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut train = Vec::new();
        let (mut val, mut test) = (Vec::new(), Vec::new());
        for _ in 0..n_users {
            let items = rand::seq::index::sample(&mut rng, n_items, per_user + 2).into_vec();
            val.push(items[per_user]);
            test.push(items[per_user + 1]);
            train.push(items[..per_user].to_vec());
        }
        SplitDataset::new(n_users, n_items, train, val, test).unwrap()
    }

    fn small_cfg() -> TrainConfig {
        TrainConfig {
            dim: 4,
            batch_size: 32,
            max_epochs: 3,
            val_negatives: 9,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn dominant_item_is_ranked_first() {
        let base = random_split(30, 20, 4, 1);
        let train: Vec<Vec<usize>> = base
            .train
            .iter()
            .enumerate()
            .map(|(u, t)| {
                let mut t: Vec<usize> = t
                    .iter()
                    .copied()
                    .filter(|&i| i != 0 && i != base.val[u] && i != base.test[u])
                    .collect();
                t.push(0);
                t
            })
            .collect();
        let val = base
            .val
            .iter()
            .map(|&i| if i == 0 { 1 } else { i })
            .collect::<Vec<_>>();
        let test = base
            .test
            .iter()
            .map(|&i| if i == 0 { 2 } else { i })
            .collect::<Vec<_>>();
        let train: Vec<Vec<usize>> = train
            .into_iter()
            .enumerate()
            .map(|(u, t)| {
                t.into_iter()
                    .filter(|&i| i != val[u] && i != test[u])
                    .collect()
            })
            .collect();
        let split = SplitDataset::new(30, 20, train, val, test).unwrap();
        let cfg = TrainConfig {
            max_epochs: 40,
            patience: 40,
            r_theta: 0.05,
            ..small_cfg()
        };
        let out = erm_train(init_f(&cfg, &split).unwrap(), &split, &cfg).unwrap();
        for u in 0..30 {
            let top = out.model.score(u, 0).unwrap();
            for i in 1..20 {
                assert!(top > out.model.score(u, i).unwrap(), "user {u} item {i}");
            }
        }
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let split = random_split(10, 20, 3, 2);
        let cfg = TrainConfig {
            r_theta: 0.0,
            ..small_cfg()
        };
        let init = init_f(&cfg, &split).unwrap();
        let out = erm_train(init.clone(), &split, &cfg).unwrap();
        assert_eq!(out.model.params_flat(), init.params_flat());
    }

    #[test]
    fn plateau_stops_exactly_patience_after_best() {
        let split = random_split(10, 20, 3, 3);
        let cfg = TrainConfig {
            r_theta: 0.0,
            patience: 4,
            max_epochs: 30,
            ..small_cfg()
        };
        let out = erm_train(init_f(&cfg, &split).unwrap(), &split, &cfg).unwrap();
        assert_eq!(out.state.best_epoch, 1);
        assert_eq!(out.state.epochs, 5);
        assert_eq!(out.state.stop_reason, StopReason::EarlyStopped);
    }

    fn models(split: &SplitDataset, kind: ModelKind, seed: u64) -> (RecModel, RecModel) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (
            init_model(kind, split.n_users, split.n_items, 3, None, &mut rng).unwrap(),
            init_model(kind, split.n_users, split.n_items, 3, None, &mut rng).unwrap(),
        )
    }

    fn one_batch(split: &SplitDataset, seed: u64) -> Batch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        make_batches(split, 1000, 2, &mut rng).unwrap().remove(0)
    }

    #[test]
    fn acl_loss_constant_weight_and_zero_alpha() {
        let split = random_split(6, 8, 2, 4);
        let (f, g) = models(&split, ModelKind::MF, 0);
        let batch = one_batch(&split, 0);
        let head = PropensityHead::neutral(0.05).unwrap();
        let input = RegularizerInput::Pairs(&batch);
        let zero = acl_loss(
            &f,
            &g,
            &head,
            &batch,
            0.0,
            RegularizerKind::FeedbackLoss,
            input,
        )
        .unwrap();
        assert_eq!(zero.objective, zero.weighted_f_loss);
        let plain = batch_loss(&f, &batch);
        assert!((zero.weighted_f_loss - 2.0 * plain).abs() < 1e-12);
        let full = acl_loss(
            &f,
            &g,
            &head,
            &batch,
            2.0,
            RegularizerKind::FeedbackLoss,
            input,
        )
        .unwrap();
        assert!((full.objective - (full.weighted_f_loss - 2.0 * full.reg_term)).abs() < 1e-12);
    }

    #[test]
    fn theta_gradient_does_not_depend_on_alpha() {
        let split = random_split(6, 8, 2, 5);
        let (f, g) = models(&split, ModelKind::GMF, 1);
        let batch = one_batch(&split, 1);
        let head = PropensityHead::new([0.2, 0.7, -0.3], 0.05).unwrap();
        let (_, a, ba) = acl_theta_grads(&f, &g, &head, &batch);
        let (_, b, bb) = acl_theta_grads(&f, &g, &head, &batch);
        assert_eq!(a.to_flat(&f), b.to_flat(&f));
        assert_eq!(ba, bb);
        let (p0, _) = acl_psi_grads(
            &f,
            &g,
            &head,
            &batch,
            0.0,
            RegularizerKind::FeedbackLoss,
            RegularizerInput::Pairs(&batch),
        )
        .unwrap();
        let (p1, _) = acl_psi_grads(
            &f,
            &g,
            &head,
            &batch,
            1.0,
            RegularizerKind::FeedbackLoss,
            RegularizerInput::Pairs(&batch),
        )
        .unwrap();
        assert_eq!(p0.weighted_f_loss, p1.weighted_f_loss);
    }

    #[test]
    fn first_order_change_matches_prediction() {
        let split = random_split(8, 10, 3, 6);
        let (mut f, mut g) = models(&split, ModelKind::MF, 2);
        let batch = one_batch(&split, 2);
        let head = PropensityHead::new([0.1, 0.5, 0.2], 0.05).unwrap();
        let input = RegularizerInput::Pairs(&batch);
        let kind = RegularizerKind::FeedbackLoss;
        let before = acl_loss(&f, &g, &head, &batch, 1.0, kind, input)
            .unwrap()
            .objective;
        let (_, tg, _) = acl_theta_grads(&f, &g, &head, &batch);
        let (_, pg) = acl_psi_grads(&f, &g, &head, &batch, 1.0, kind, input).unwrap();
        let (rt, rp) = (1e-6, 5e-6);
        let predicted = -rt * tg.squared_norm() + rp * pg.squared_norm();
        let mut ng = pg.clone();
        ng.scale(-1.0);
        ModelOptimizer::new(&f, OptimizerKind::Sgd, AdamConfig::default())
            .step(&mut f, &tg, rt, 0.0)
            .unwrap();
        ModelOptimizer::new(&g, OptimizerKind::Sgd, AdamConfig::default())
            .step(&mut g, &ng, rp, 0.0)
            .unwrap();
        let after = acl_loss(&f, &g, &head, &batch, 1.0, kind, input)
            .unwrap()
            .objective;
        let measured = after - before;
        assert!(
            (measured - predicted).abs() < 1e-3 * predicted.abs(),
            "{measured} vs {predicted}"
        );
    }

    #[test]
    fn discount_two_halves_rates_each_epoch() {
        let split = random_split(10, 20, 3, 7);
        let cfg = TrainConfig {
            d_theta: 2.0,
            d_psi: 2.0,
            max_epochs: 4,
            patience: 10,
            ..small_cfg()
        };
        let (f, g) = models(&split, ModelKind::MF, 3);
        let out = acl_train(
            f,
            g,
            PropensityHead::neutral(0.05).unwrap(),
            &split,
            &cfg,
            &RegularizerData::Feedback,
        )
        .unwrap();
        for (k, rec) in out.state.records.iter().enumerate() {
            let scale = 2f64.powi(k as i32);
            assert_eq!(rec.lr_theta, cfg.r_theta / scale);
            assert_eq!(rec.lr_psi, Some(cfg.r_psi / scale));
        }
        assert_eq!(out.state.objective_history.len(), out.state.epochs);
    }

    #[test]
    fn acl_training_is_deterministic() {
        let split = random_split(12, 20, 4, 8);
        let cfg = small_cfg();
        let run = || {
            let (f, g) = models(&split, ModelKind::NCF, 4);
            acl_train(
                f,
                g,
                PropensityHead::neutral(0.05).unwrap(),
                &split,
                &cfg,
                &RegularizerData::Feedback,
            )
            .unwrap()
        };
        let (a, b) = (run(), run());
        assert_eq!(a.state, b.state);
        assert_eq!(a.g.fingerprint(), b.g.fingerprint());
    }

    #[test]
    fn popularity_regularizer_runs() {
        let split = random_split(12, 20, 4, 9);
        let cfg = TrainConfig {
            reg_kind: RegularizerKind::PopularityCorrelation,
            popularity_users: 5,
            ..small_cfg()
        };
        let reg = RegularizerData::for_kind(cfg.reg_kind, &split, None).unwrap();
        let (f, g) = models(&split, ModelKind::MF, 5);
        let out = acl_train(
            f,
            g,
            PropensityHead::neutral(0.05).unwrap(),
            &split,
            &cfg,
            &reg,
        )
        .unwrap();
        assert!(out
            .state
            .records
            .iter()
            .all(|r| r.reg_term.unwrap().is_finite()));
        assert!(RegularizerData::for_kind(RegularizerKind::ExposureLoss, &split, None).is_err());
    }

    #[test]
    fn ps_with_frozen_neutral_head_matches_erm_at_double_rate() {
        let split = random_split(15, 20, 4, 10);
        let erm_cfg = TrainConfig {
            optimizer: OptimizerKind::Sgd,
            r_theta: 0.2,
            max_epochs: 4,
            ..small_cfg()
        };
        let ps_cfg = TrainConfig {
            r_theta: 0.1,
            freeze_head: true,
            ..erm_cfg.clone()
        };
        let g = init_g(&erm_cfg, &split).unwrap();
        let erm = erm_train(init_f(&erm_cfg, &split).unwrap(), &split, &erm_cfg).unwrap();
        let ps = ps_stage2(
            init_f(&ps_cfg, &split).unwrap(),
            &g,
            PropensityHead::neutral(0.05).unwrap(),
            &split,
            &ps_cfg,
        )
        .unwrap();
        assert_eq!(erm.state.fingerprints, ps.state.fingerprints);
        assert_eq!(erm.model.params_flat(), ps.model.params_flat());
        assert_eq!(ps.head.unwrap().beta(), [0.0; 3]);
    }

    #[test]
    fn ps_with_pop_g_weights_follow_popularity() {
        let split = random_split(20, 20, 3, 11);
        let cfg = TrainConfig {
            g_kind: ModelKind::Pop,
            ..small_cfg()
        };
        let out = ps_train(&split, &cfg).unwrap();
        let counts = split.item_train_counts();
        let head = PropensityHead::new([0.0, 0.1, 0.0], 0.05).unwrap();
        for a in 0..20 {
            for b in 0..20 {
                if counts[a] > counts[b] {
                    let pa = g_beta(out.g.score(0, a).unwrap(), 1.0, &head);
                    let pb = g_beta(out.g.score(0, b).unwrap(), 1.0, &head);
                    assert!(pa >= pb);
                }
            }
        }
    }

    #[test]
    fn config_validation() {
        let mut c = TrainConfig::default();
        assert!(c.validate().is_ok());
        c.d_theta = 0.5;
        assert!(c.validate().is_err());
        c = TrainConfig {
            patience: 0,
            ..TrainConfig::default()
        };
        assert!(c.validate().is_err());
    }
}
