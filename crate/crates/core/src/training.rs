//! Per-pair training loop with Adam, proximal head updates and early
//! stopping on validation RMSE.

use std::path::Path;
use std::time::Instant;

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Tape, Tensor};
use crate::evaluation::{pcc, rmse, MetricError};
use crate::losses::{apply_prox, pair_loss_on_tape, penalty, LossConfig, PenaltyGroups};
use crate::model::{
    decode_checkpoint, encode_checkpoint, Checkpoint, CheckpointError, GraphInput, Mode,
    ModelConfig, ModelError, MpnnModel,
};
use crate::pairs::{CliffPair, DatasetSplit};

pub const TRAIN_REPORT_SCHEMA: &str = "train-report/1";

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("{0} set is empty")]
    EmptySet(&'static str),
    #[error("non-finite loss {value} at epoch {epoch}, pair {pair_id}")]
    Divergence {
        epoch: usize,
        pair_id: String,
        value: f64,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub min_delta: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            max_epochs: 300,
            patience: 20,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            min_delta: 1e-6,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let err = |m: String| Err(TrainError::Config(m));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return err(format!("learning_rate must be > 0, got {}", self.learning_rate));
        }
        if self.max_epochs == 0 {
            return err("max_epochs must be positive".into());
        }
        if self.patience >= self.max_epochs {
            return err(format!(
                "patience ({}) must be below max_epochs ({})",
                self.patience, self.max_epochs
            ));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return err("beta1 and beta2 must lie in [0, 1)".into());
        }
        if !(self.epsilon > 0.0) || !(self.min_delta >= 0.0) {
            return err("epsilon must be > 0 and min_delta >= 0".into());
        }
        Ok(())
    }
}

/// Adam state for every model parameter.
#[derive(Debug, Clone)]
pub struct Adam {
    beta1: f64,
    beta2: f64,
    epsilon: f64,
    step: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(model: &MpnnModel, config: &TrainConfig) -> Self {
        let zeros: Vec<Vec<f64>> = model
            .parameters()
            .iter()
            .map(|p| vec![0.0; p.tensor.numel()])
            .collect();
        Adam {
            beta1: config.beta1,
            beta2: config.beta2,
            epsilon: config.epsilon,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One update; a missing gradient counts as zero.
    pub fn step(&mut self, model: &mut MpnnModel, grads: &[Option<Tensor>], lr: f64) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        for (k, param) in model.parameters_mut().iter_mut().enumerate() {
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            let g = grads[k].as_ref().map(|t| t.data());
            for (i, w) in param.tensor.data_mut().iter_mut().enumerate() {
                let gi = g.map_or(0.0, |g| g[i]);
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                *w -= lr * m_hat / (v_hat.sqrt() + self.epsilon);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Means over the epoch's pairs.
    pub train_mse: f64,
    pub train_node: f64,
    /// Penalty of the parameters at the end of the epoch.
    pub penalty: f64,
    pub train_total: f64,
    pub val_rmse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub schema: String,
    pub model_config: ModelConfig,
    pub loss_config: LossConfig,
    pub train_config: TrainConfig,
    pub n_train: usize,
    pub n_validation: usize,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub stopped_epoch: usize,
    pub best_val_rmse: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint_hash: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub manifest_hash: Option<String>,
    /// Not serialized, so that reports of identical runs are identical.
    #[serde(skip)]
    pub wall_time_secs: f64,
}

impl TrainReport {
    pub fn val_curve(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.val_rmse).collect()
    }
}

struct PairStep {
    mse: f64,
    node: f64,
}

fn train_pair(
    model: &mut MpnnModel,
    adam: &mut Adam,
    pair: &CliffPair,
    loss_config: &LossConfig,
    lr: f64,
    epoch: usize,
) -> Result<PairStep, TrainError> {
    let mut tape = Tape::new();
    let pv = model.register(&mut tape, true);
    let run = |tape: &mut Tape, graph, common: &[bool], uncommon: &[bool]| {
        let input = GraphInput::from_graph(graph);
        let ax = tape.constant(input.atom_x.clone());
        let ex = tape.constant(input.edge_x.clone());
        model.forward_on_tape(tape, &pv, ax, ex, &input, common, uncommon, Mode::Train)
    };
    let fwd_i = run(&mut tape, &pair.graph_i, &pair.common_mask_i, &pair.uncommon_mask_i)?;
    let fwd_j = run(&mut tape, &pair.graph_j, &pair.common_mask_j, &pair.uncommon_mask_j)?;
    let loss = pair_loss_on_tape(&mut tape, &fwd_i, &fwd_j, (pair.y_i, pair.y_j), loss_config)?;
    let total = tape.value(loss.total).data()[0];
    if !total.is_finite() {
        return Err(TrainError::Divergence {
            epoch,
            pair_id: pair.pair_id.clone(),
            value: total,
        });
    }
    let step = PairStep {
        mse: tape.value(loss.mse).data()[0],
        node: tape.value(loss.node).data()[0],
    };
    let mut grads = tape.backward(loss.total)?;
    let grads: Vec<Option<Tensor>> = pv.0.iter().map(|&v| grads.take(v)).collect();
    adam.step(model, &grads, lr);
    model.update_running_stats(&fwd_i.batch_stats);
    model.update_running_stats(&fwd_j.batch_stats);
    apply_prox(model, loss_config, lr);
    Ok(step)
}

/// Trains `model` on `split.train`, early-stopping on `split.validation`.
/// Returns the parameters of the best validation epoch.
pub fn train(
    mut model: MpnnModel,
    split: &DatasetSplit,
    loss_config: &LossConfig,
    config: &TrainConfig,
) -> Result<(MpnnModel, TrainReport), TrainError> {
    config.validate()?;
    loss_config.validate().map_err(TrainError::Config)?;
    if split.train.is_empty() {
        return Err(TrainError::EmptySet("training"));
    }
    if split.validation.is_empty() {
        return Err(TrainError::EmptySet("validation"));
    }
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut adam = Adam::new(&model, config);
    let mut order: Vec<usize> = (0..split.train.len()).collect();

    let mut epochs = Vec::new();
    let mut best = (model.clone(), 0usize, f64::INFINITY);
    let mut anchor = (0usize, f64::INFINITY);
    for epoch in 0..config.max_epochs {
        order.shuffle(&mut rng);
        let (mut mse, mut node) = (0.0, 0.0);
        for &k in &order {
            let step = train_pair(&mut model, &mut adam, &split.train[k], loss_config, config.learning_rate, epoch)?;
            mse += step.mse;
            node += step.node;
        }
        let n = split.train.len() as f64;
        let pen = penalty(&PenaltyGroups::from_model(&model), loss_config);
        let val = evaluate_rmse(&model, &split.validation)?;
        if !val.is_finite() {
            return Err(TrainError::Divergence {
                epoch,
                pair_id: "<validation>".into(),
                value: val,
            });
        }
        let record = EpochRecord {
            epoch,
            train_mse: mse / n,
            train_node: node / n,
            penalty: pen,
            train_total: (mse + loss_config.node_loss_weight * node) / n + pen,
            val_rmse: val,
        };
        debug!(
            "epoch {epoch}: train {:.6} val_rmse {:.6}",
            record.train_total, record.val_rmse
        );
        epochs.push(record);
        if val < best.2 {
            best = (model.clone(), epoch, val);
        }
        if val < anchor.1 - config.min_delta {
            anchor = (epoch, val);
        }
        if epoch - anchor.0 >= config.patience {
            break;
        }
    }
    let stopped_epoch = epochs.len() - 1;
    let wall = started.elapsed().as_secs_f64();
    info!(
        "trained {} epochs (best {} val_rmse {:.4}) in {wall:.2}s",
        epochs.len(),
        best.1,
        best.2
    );
    let (best_model, best_epoch, best_val) = best;
    let report = TrainReport {
        schema: TRAIN_REPORT_SCHEMA.to_string(),
        model_config: best_model.config().clone(),
        loss_config: *loss_config,
        train_config: config.clone(),
        n_train: split.train.len(),
        n_validation: split.validation.len(),
        epochs,
        best_epoch,
        stopped_epoch,
        best_val_rmse: best_val,
        checkpoint_hash: None,
        manifest_hash: None,
        wall_time_secs: wall,
    };
    Ok((best_model, report))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairPrediction {
    pub pair_id: String,
    pub target_id: String,
    pub pred_i: f64,
    pub pred_j: f64,
    pub y_i: f64,
    pub y_j: f64,
}

/// Eval-mode predictions of both compounds of each pair, under the pair
/// masks.
pub fn predict_split(model: &MpnnModel, pairs: &[CliffPair]) -> Result<Vec<PairPrediction>, TrainError> {
    pairs
        .par_iter()
        .map(|p| {
            let ti = model.forward_eval(&GraphInput::from_graph(&p.graph_i), &p.common_mask_i, &p.uncommon_mask_i)?;
            let tj = model.forward_eval(&GraphInput::from_graph(&p.graph_j), &p.common_mask_j, &p.uncommon_mask_j)?;
            Ok(PairPrediction {
                pair_id: p.pair_id.clone(),
                target_id: p.target_id.clone(),
                pred_i: ti.prediction,
                pred_j: tj.prediction,
                y_i: p.y_i,
                y_j: p.y_j,
            })
        })
        .collect()
}

fn flatten(predictions: &[PairPrediction]) -> (Vec<f64>, Vec<f64>) {
    predictions
        .iter()
        .flat_map(|p| [(p.pred_i, p.y_i), (p.pred_j, p.y_j)])
        .unzip()
}

fn evaluate_rmse(model: &MpnnModel, pairs: &[CliffPair]) -> Result<f64, TrainError> {
    let (pred, truth) = flatten(&predict_split(model, pairs)?);
    Ok(rmse(&pred, &truth)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitEvaluation {
    pub predictions: Vec<PairPrediction>,
    pub rmse: f64,
    pub pcc: f64,
}

/// Predictions plus RMSE and PCC over every compound occurrence.
pub fn evaluate_split(model: &MpnnModel, pairs: &[CliffPair]) -> Result<SplitEvaluation, TrainError> {
    let predictions = predict_split(model, pairs)?;
    let (pred, truth) = flatten(&predictions);
    Ok(SplitEvaluation {
        rmse: rmse(&pred, &truth)?,
        pcc: pcc(&pred, &truth)?,
        predictions,
    })
}

pub fn save_checkpoint(
    model: &MpnnModel,
    loss_config: Option<&LossConfig>,
    path: &Path,
) -> Result<String, TrainError> {
    let bytes = encode_checkpoint(model, loss_config);
    std::fs::write(path, &bytes)?;
    Ok(crate::model::checkpoint_hash(&bytes))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, TrainError> {
    let bytes = std::fs::read(path)?;
    Ok(decode_checkpoint(&bytes)?)
}
