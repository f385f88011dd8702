//! Task losses and the token- and channel-sparsity penalties.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{Graph, NodeId, Real, Tensor};
use crate::transformer::ScoreVector;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Mse,
    CrossEntropy,
}

impl TaskKind {
    /// Default token-sparsity weight for the task family.
    pub fn default_lambda_token(self) -> f64 {
        match self {
            TaskKind::Mse => 1e-4,
            TaskKind::CrossEntropy => 1e-3,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossConfig {
    pub lambda_token: f64,
    pub lambda_channel: f64,
    pub task: TaskKind,
    /// One weight per modality.
    pub task_weights: Vec<f64>,
}

impl LossConfig {
    pub fn new(task: TaskKind, modalities: usize) -> Self {
        LossConfig { lambda_token: task.default_lambda_token(), lambda_channel: 0.0, task, task_weights: vec![1.0; modalities] }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v >= 0.0;
        if !ok(self.lambda_token) || !ok(self.lambda_channel) || !self.task_weights.iter().all(|&w| ok(w)) {
            return Err(Error::Config("loss weights must be finite and nonnegative".into()));
        }
        Ok(())
    }
}

/// Per-token prediction target.
#[derive(Clone, Debug, PartialEq)]
pub enum Target<T: Real> {
    Values(Tensor<T>),
    Classes(Vec<usize>),
}

/// Mean squared error, or mean cross-entropy over tokens.
pub fn task_loss<T: Real>(g: &mut Graph<T>, prediction: NodeId, target: &Target<T>, kind: TaskKind) -> Result<NodeId> {
    match (kind, target) {
        (TaskKind::Mse, Target::Values(t)) => g.mse(prediction, t.clone()),
        (TaskKind::CrossEntropy, Target::Classes(c)) => g.cross_entropy(prediction, c.clone()),
        (k, _) => Err(Error::Contract(format!("target kind does not match task {k:?}"))),
    }
}

/// `Σ_m Σ_l Σ_n s`, averaged over the batch. Scores are nonnegative, so no
/// absolute value is taken.
pub fn token_pruning_loss<T: Real>(g: &mut Graph<T>, scores: &[ScoreVector]) -> Result<NodeId> {
    let mut acc: Option<NodeId> = None;
    for s in scores {
        let mut t = g.sum(s.values);
        if s.batch != 1 {
            t = g.scale(t, T::lit(1.0 / s.batch as f64));
        }
        acc = Some(match acc {
            None => t,
            Some(a) => g.add(a, t)?,
        });
    }
    Ok(acc.unwrap_or_else(|| g.constant(Tensor::scalar(T::zero()))))
}

/// `Σ ‖γ‖₁` over the given scale vectors.
pub fn channel_pruning_loss<T: Real>(g: &mut Graph<T>, gammas: &[NodeId]) -> Result<NodeId> {
    let mut acc: Option<NodeId> = None;
    for &gm in gammas {
        let t = g.abs_sum(gm);
        acc = Some(match acc {
            None => t,
            Some(a) => g.add(a, t)?,
        });
    }
    Ok(acc.unwrap_or_else(|| g.constant(Tensor::scalar(T::zero()))))
}

#[derive(Clone, Debug)]
pub struct LossTerms {
    pub total: NodeId,
    pub task: Vec<NodeId>,
    pub token: NodeId,
    pub channel: NodeId,
}

/// `Σ_m w_m L_m + λ₁ · token + λ₂ · channel`. Zero weights drop their term.
pub fn total_loss<T: Real>(
    g: &mut Graph<T>,
    task_losses: &[NodeId],
    scores: &[ScoreVector],
    gammas: &[NodeId],
    cfg: &LossConfig,
) -> Result<LossTerms> {
    cfg.validate()?;
    if task_losses.is_empty() || task_losses.len() != cfg.task_weights.len() {
        return Err(Error::Contract(format!(
            "{} task losses for {} task weights",
            task_losses.len(),
            cfg.task_weights.len()
        )));
    }
    let mut total: Option<NodeId> = None;
    for (&l, &w) in task_losses.iter().zip(&cfg.task_weights) {
        if w == 0.0 {
            continue;
        }
        let t = if w == 1.0 { l } else { g.scale(l, T::lit(w)) };
        total = Some(match total {
            None => t,
            Some(a) => g.add(a, t)?,
        });
    }
    let mut total = match total {
        Some(t) => t,
        None => g.constant(Tensor::scalar(T::zero())),
    };
    let token = token_pruning_loss(g, scores)?;
    let channel = channel_pruning_loss(g, gammas)?;
    if cfg.lambda_token != 0.0 {
        let t = g.scale(token, T::lit(cfg.lambda_token));
        total = g.add(total, t)?;
    }
    if cfg.lambda_channel != 0.0 {
        let t = g.scale(channel, T::lit(cfg.lambda_channel));
        total = g.add(total, t)?;
    }
    Ok(LossTerms { total, task: task_losses.to_vec(), token, channel })
}
