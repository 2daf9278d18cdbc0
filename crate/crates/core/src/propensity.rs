//! The logistic exposure head `G_β(g, y) = σ(β0 + β1·g + β2·y)` with a
//! propensity floor, and the surrogate regularizers that tie the adversarial
//! exposure model `g` to the data.

use serde::{Deserialize, Serialize};

use crate::data::{Batch, SplitDataset};
use crate::error::{Error, Result};
use crate::models::{ModelGradients, RecModel};
use crate::numerics::{logistic_loss, logistic_loss_grad, sigmoid};

/// Upper clamp of every propensity.
pub const PROPENSITY_CEILING: f64 = 1.0 - 1e-6;

pub const DEFAULT_MU: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PropensityHead {
    pub beta0: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub mu: f64,
}

impl PropensityHead {
    /// `β = (0, 0, 0)`: every propensity starts at 0.5.
    pub fn neutral(mu: f64) -> Result<Self> {
        Self::new([0.0; 3], mu)
    }

    pub fn new(beta: [f64; 3], mu: f64) -> Result<Self> {
        if !(mu > 0.0 && mu < 0.5) {
            return Err(Error::config(format!(
                "propensity floor mu must lie in (0, 0.5), got {}",
                mu
            )));
        }
        Ok(PropensityHead {
            beta0: beta[0],
            beta1: beta[1],
            beta2: beta[2],
            mu,
        })
    }

    pub fn beta(&self) -> [f64; 3] {
        [self.beta0, self.beta1, self.beta2]
    }

    pub fn set_beta(&mut self, beta: [f64; 3]) {
        self.beta0 = beta[0];
        self.beta1 = beta[1];
        self.beta2 = beta[2];
    }

    fn raw(&self, g_score: f64, y: f64) -> f64 {
        sigmoid(self.beta0 + self.beta1 * g_score + self.beta2 * y)
    }
}

/// Clamped propensity in `[mu, 1 - 1e-6]`.
pub fn g_beta(g_score: f64, y: f64, head: &PropensityHead) -> f64 {
    head.raw(g_score, y).clamp(head.mu, PROPENSITY_CEILING)
}

/// Gradients of `upstream · g_beta(..)`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct HeadGrads {
    pub beta0: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub g_score: f64,
}

impl HeadGrads {
    pub fn as_array(&self) -> [f64; 3] {
        [self.beta0, self.beta1, self.beta2]
    }
}

/// Chain-rule gradients through the head; all zero where the clamp is active.
pub fn g_beta_grads(g_score: f64, y: f64, head: &PropensityHead, upstream: f64) -> HeadGrads {
    let p = head.raw(g_score, y);
    if p < head.mu || p > PROPENSITY_CEILING {
        return HeadGrads::default();
    }
    let dz = upstream * p * (1.0 - p);
    HeadGrads {
        beta0: dz,
        beta1: dz * g_score,
        beta2: dz * y,
        g_score: dz * head.beta1,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RegularizerKind {
    /// Logistic loss of `g` on observed exposure labels.
    ExposureLoss,
    /// Negated correlation between per-item mean `σ(g)` and the item's positive
    /// feedback rate.
    PopularityCorrelation,
    /// Logistic loss of `g` on the feedback batch itself.
    FeedbackLoss,
}

/// What a regularizer is evaluated on.
#[derive(Debug, Clone, Copy)]
pub enum RegularizerInput<'a> {
    /// Labelled pairs: the feedback batch (FeedbackLoss) or exposure labels
    /// with exposed = +1 (ExposureLoss).
    Pairs(&'a Batch),
    /// Users over which to average `σ(g(u, i))`, and each item's feedback rate.
    Popularity {
        users: &'a [usize],
        feedback_rate: &'a [f64],
    },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegularizerValue {
    pub value: f64,
    /// Set when the correlation is undefined (zero variance); `value` is 0 then.
    pub degenerate: bool,
}

/// Fraction of users with the item in their train list.
pub fn item_feedback_rate(split: &SplitDataset) -> Vec<f64> {
    let n = split.n_users.max(1) as f64;
    split
        .item_train_counts()
        .into_iter()
        .map(|c| c as f64 / n)
        .collect()
}

fn check_input(kind: RegularizerKind, input: &RegularizerInput<'_>) -> Result<()> {
    match (kind, input) {
        (
            RegularizerKind::FeedbackLoss | RegularizerKind::ExposureLoss,
            RegularizerInput::Pairs(b),
        ) => {
            if b.is_empty() {
                Err(Error::config(format!(
                    "{:?} needs a nonempty set of pairs",
                    kind
                )))
            } else {
                Ok(())
            }
        }
        (
            RegularizerKind::PopularityCorrelation,
            RegularizerInput::Popularity {
                users,
                feedback_rate,
            },
        ) => {
            if feedback_rate.len() < 2 || users.is_empty() {
                Err(Error::config(
                    "popularity correlation needs at least 2 items and 1 user",
                ))
            } else {
                Ok(())
            }
        }
        _ => Err(Error::config(format!(
            "regularizer {:?} given the wrong kind of input",
            kind
        ))),
    }
}

/// Correlation terms shared by value and gradient: per-item mean propensities
/// and the resulting (possibly degenerate) correlation.
fn popularity_stats(g: &RecModel, users: &[usize], rate: &[f64]) -> (Vec<f64>, Option<f64>) {
    let m = users.len() as f64;
    let means: Vec<f64> = (0..rate.len())
        .map(|i| {
            users
                .iter()
                .map(|&u| sigmoid(g.score_unchecked(u, i)))
                .sum::<f64>()
                / m
        })
        .collect();
    let corr = crate::numerics::pearson(&means, rate);
    (means, corr)
}

pub fn regularizer_loss(
    kind: RegularizerKind,
    g: &RecModel,
    input: RegularizerInput<'_>,
) -> Result<RegularizerValue> {
    check_input(kind, &input)?;
    match input {
        RegularizerInput::Pairs(batch) => {
            let sum: f64 = batch
                .iter()
                .map(|(u, i, y)| g.score(u, i).map(|s| logistic_loss(y, s)))
                .sum::<Result<f64>>()?;
            Ok(RegularizerValue {
                value: sum / batch.len() as f64,
                degenerate: false,
            })
        }
        RegularizerInput::Popularity {
            users,
            feedback_rate,
        } => {
            if feedback_rate.len() != g.n_items() {
                return Err(Error::config("feedback rate length differs from catalog"));
            }
            let (_, corr) = popularity_stats(g, users, feedback_rate);
            Ok(match corr {
                Some(c) => RegularizerValue {
                    value: -c,
                    degenerate: false,
                },
                None => {
                    log::warn!("popularity correlation undefined (zero variance); using 0");
                    RegularizerValue {
                        value: 0.0,
                        degenerate: true,
                    }
                }
            })
        }
    }
}

/// Adds `scale · ∂reg/∂ψ` into `grads` and returns the regularizer value.
pub fn regularizer_grad(
    kind: RegularizerKind,
    g: &RecModel,
    input: RegularizerInput<'_>,
    scale: f64,
    grads: &mut ModelGradients,
) -> Result<RegularizerValue> {
    check_input(kind, &input)?;
    match input {
        RegularizerInput::Pairs(batch) => {
            let n = batch.len() as f64;
            let mut sum = 0.0;
            for (u, i, y) in batch.iter() {
                let s = g.score(u, i)?;
                sum += logistic_loss(y, s);
                g.accumulate_grad(u, i, scale * logistic_loss_grad(y, s) / n, grads);
            }
            Ok(RegularizerValue {
                value: sum / n,
                degenerate: false,
            })
        }
        RegularizerInput::Popularity {
            users,
            feedback_rate,
        } => {
            if feedback_rate.len() != g.n_items() {
                return Err(Error::config("feedback rate length differs from catalog"));
            }
            let (means, corr) = popularity_stats(g, users, feedback_rate);
            let Some(corr) = corr else {
                log::warn!("popularity correlation undefined (zero variance); using 0");
                return Ok(RegularizerValue {
                    value: 0.0,
                    degenerate: true,
                });
            };
            let k = means.len() as f64;
            let ma = means.iter().sum::<f64>() / k;
            let mb = feedback_rate.iter().sum::<f64>() / k;
            let a: Vec<f64> = means.iter().map(|x| x - ma).collect();
            let b: Vec<f64> = feedback_rate.iter().map(|x| x - mb).collect();
            let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
            let m = users.len() as f64;
            for i in 0..means.len() {
                // ∂corr/∂a_i; centering terms cancel because Σ ã = Σ b̃ = 0.
                let dcorr = b[i] / (na * nb) - corr * a[i] / (na * na);
                let d_mean = -dcorr * scale;
                for &u in users {
                    let s = g.score_unchecked(u, i);
                    let p = sigmoid(s);
                    g.accumulate_grad(u, i, d_mean * p * (1.0 - p) / m, grads);
                }
            }
            Ok(RegularizerValue {
                value: -corr,
                degenerate: false,
            })
        }
    }
}
