//! Pair losses, group penalties on the node heads, and their proximal maps.

use serde::{Deserialize, Serialize};

use crate::autodiff::{AutodiffError, Tape, Tensor, Var};
use crate::model::{ForwardTrace, GroupTag, MpnnModel, TapeForward};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LossVariant {
    /// Uncommon-node loss only.
    #[serde(rename = "ucn")]
    Ucn,
    /// Common plus uncommon node loss.
    #[serde(rename = "n")]
    N,
    /// Node loss with group lasso on the heads.
    #[serde(rename = "n-gl")]
    NGl,
    /// Node loss with sparse group lasso on the heads.
    #[serde(rename = "n-sgl")]
    NSgl,
}

impl LossVariant {
    pub const ALL: [LossVariant; 4] = [
        LossVariant::Ucn,
        LossVariant::N,
        LossVariant::NGl,
        LossVariant::NSgl,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LossVariant::Ucn => "ucn",
            LossVariant::N => "n",
            LossVariant::NGl => "n-gl",
            LossVariant::NSgl => "n-sgl",
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        LossVariant::ALL.into_iter().find(|v| v.name() == name)
    }

    pub fn uses_common_loss(self) -> bool {
        !matches!(self, LossVariant::Ucn)
    }

    pub fn is_penalized(self) -> bool {
        matches!(self, LossVariant::NGl | LossVariant::NSgl)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub variant: LossVariant,
    pub lambda: f64,
    /// Only read by [`LossVariant::NSgl`].
    pub alpha: f64,
    pub node_loss_weight: f64,
}

impl LossConfig {
    pub fn new(variant: LossVariant) -> Self {
        LossConfig {
            variant,
            lambda: 1e-3,
            alpha: 0.5,
            node_loss_weight: 1.0,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(format!("lambda must be >= 0, got {}", self.lambda));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(format!("alpha must be in [0, 1], got {}", self.alpha));
        }
        if !(self.node_loss_weight >= 0.0 && self.node_loss_weight.is_finite()) {
            return Err(format!(
                "node_loss_weight must be >= 0, got {}",
                self.node_loss_weight
            ));
        }
        Ok(())
    }
}

/// Flattened head parameters, one block per penalty group.
#[derive(Debug, Clone, PartialEq)]
pub struct PenaltyGroups {
    pub beta_cn: Vec<f64>,
    pub beta_ucn: Vec<f64>,
}

impl PenaltyGroups {
    pub fn from_model(model: &MpnnModel) -> Self {
        let collect = |tag| {
            model
                .parameters()
                .iter()
                .filter(|p| p.group == tag)
                .flat_map(|p| p.tensor.data().iter().copied())
                .collect()
        };
        PenaltyGroups {
            beta_cn: collect(GroupTag::CnHead),
            beta_ucn: collect(GroupTag::UcnHead),
        }
    }

    pub fn p_cn(&self) -> usize {
        self.beta_cn.len()
    }

    pub fn p_ucn(&self) -> usize {
        self.beta_ucn.len()
    }
}

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn l1(v: &[f64]) -> f64 {
    v.iter().map(|x| x.abs()).sum()
}

/// `(yhat_i - y_i)^2 + (yhat_j - y_j)^2`
pub fn loss_mse(pred: (f64, f64), target: (f64, f64)) -> f64 {
    (pred.0 - target.0).powi(2) + (pred.1 - target.1).powi(2)
}

/// Node loss from the scalarized head outputs of both compounds. The UCN
/// variant keeps only the uncommon term.
pub fn loss_node(
    trace_i: &ForwardTrace,
    trace_j: &ForwardTrace,
    target: (f64, f64),
    variant: LossVariant,
) -> f64 {
    let ucn = (trace_i.score_ucn - target.0).powi(2) + (trace_j.score_ucn - target.1).powi(2);
    if variant.uses_common_loss() {
        let cn = (trace_i.score_cn - target.0).powi(2) + (trace_j.score_cn - target.1).powi(2);
        cn + ucn
    } else {
        ucn
    }
}

/// `lambda * (sqrt(p_cn) ||beta_cn|| + sqrt(p_ucn) ||beta_ucn||)`
pub fn penalty_group_lasso(groups: &PenaltyGroups, lambda: f64) -> f64 {
    lambda
        * ((groups.p_cn() as f64).sqrt() * l2(&groups.beta_cn)
            + (groups.p_ucn() as f64).sqrt() * l2(&groups.beta_ucn))
}

/// `(1 - alpha) * GL(beta) + alpha * lambda * ||beta||_1`, with `beta` both
/// groups concatenated.
pub fn penalty_sparse_group_lasso(groups: &PenaltyGroups, lambda: f64, alpha: f64) -> f64 {
    (1.0 - alpha) * penalty_group_lasso(groups, lambda)
        + alpha * lambda * (l1(&groups.beta_cn) + l1(&groups.beta_ucn))
}

/// Penalty value for the configured variant; zero for unpenalized ones.
pub fn penalty(groups: &PenaltyGroups, config: &LossConfig) -> f64 {
    match config.variant {
        LossVariant::Ucn | LossVariant::N => 0.0,
        LossVariant::NGl => penalty_group_lasso(groups, config.lambda),
        LossVariant::NSgl => penalty_sparse_group_lasso(groups, config.lambda, config.alpha),
    }
}

/// Block soft-thresholding: the proximal map of `t * lambda * sqrt(p) * ||.||_2`.
pub fn prox_group_lasso(block: &[f64], t: f64, lambda: f64, p: usize) -> Vec<f64> {
    let threshold = t * lambda * (p as f64).sqrt();
    if threshold == 0.0 {
        return block.to_vec();
    }
    let norm = l2(block);
    if norm <= threshold {
        return vec![0.0; block.len()];
    }
    let shrink = 1.0 - threshold / norm;
    block.iter().map(|x| shrink * x).collect()
}

pub fn soft_threshold(x: f64, threshold: f64) -> f64 {
    if x > threshold {
        x - threshold
    } else if x < -threshold {
        x + threshold
    } else {
        0.0
    }
}

/// Proximal map of `t * SGL` restricted to one group: elementwise
/// soft-threshold at `t * alpha * lambda`, then block soft-threshold at
/// `t * (1 - alpha) * lambda * sqrt(p)`.
pub fn prox_sparse_group_lasso(block: &[f64], t: f64, lambda: f64, alpha: f64, p: usize) -> Vec<f64> {
    let l1_threshold = t * alpha * lambda;
    let shrunk: Vec<f64> = if l1_threshold == 0.0 {
        block.to_vec()
    } else {
        block.iter().map(|&x| soft_threshold(x, l1_threshold)).collect()
    };
    prox_group_lasso(&shrunk, t, (1.0 - alpha) * lambda, p)
}

/// Applies the variant's proximal step with step size `t` to both head
/// groups of `model`, in place. No-op for unpenalized variants or
/// `lambda == 0`.
pub fn apply_prox(model: &mut MpnnModel, config: &LossConfig, t: f64) {
    if !config.variant.is_penalized() || config.lambda == 0.0 {
        return;
    }
    for tag in [GroupTag::CnHead, GroupTag::UcnHead] {
        let indices = model.group_indices(tag);
        let block: Vec<f64> = indices
            .iter()
            .flat_map(|&i| model.parameters()[i].tensor.data().iter().copied())
            .collect();
        let p = block.len();
        let updated = match config.variant {
            LossVariant::NGl => prox_group_lasso(&block, t, config.lambda, p),
            _ => prox_sparse_group_lasso(&block, t, config.lambda, config.alpha, p),
        };
        let mut offset = 0;
        for &i in &indices {
            let data = model.parameters_mut()[i].tensor.data_mut();
            let n = data.len();
            data.copy_from_slice(&updated[offset..offset + n]);
            offset += n;
        }
    }
}

/// Loss terms of one pair recorded on a tape.
#[derive(Debug, Clone, Copy)]
pub struct PairLoss {
    pub total: Var,
    pub mse: Var,
    pub node: Var,
}

/// Smooth pair objective `L_MSE + node_loss_weight * L_N` on the tape.
pub fn pair_loss_on_tape(
    tape: &mut Tape,
    fwd_i: &TapeForward,
    fwd_j: &TapeForward,
    target: (f64, f64),
    config: &LossConfig,
) -> Result<PairLoss, AutodiffError> {
    let yi = tape.constant(Tensor::matrix(1, 1, vec![target.0])?);
    let yj = tape.constant(Tensor::matrix(1, 1, vec![target.1])?);
    let squared = |tape: &mut Tape, a: Var, y: Var| -> Result<Var, AutodiffError> {
        let d = tape.sub(a, y)?;
        let sq = tape.square(d)?;
        tape.sum(sq)
    };
    let ei = squared(tape, fwd_i.prediction, yi)?;
    let ej = squared(tape, fwd_j.prediction, yj)?;
    let mse = tape.add(ei, ej)?;

    let ui = squared(tape, fwd_i.score_ucn, yi)?;
    let uj = squared(tape, fwd_j.score_ucn, yj)?;
    let mut node = tape.add(ui, uj)?;
    if config.variant.uses_common_loss() {
        let ci = squared(tape, fwd_i.score_cn, yi)?;
        let cj = squared(tape, fwd_j.score_cn, yj)?;
        let cn = tape.add(ci, cj)?;
        node = tape.add(cn, node)?;
    }
    let weighted = tape.scale(node, config.node_loss_weight)?;
    let total = tape.add(mse, weighted)?;
    Ok(PairLoss { total, mse, node })
}
