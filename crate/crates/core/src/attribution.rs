//! Per-atom attributions (CAM, Grad-CAM, gradient x input, integrated
//! gradients) and the cliff-derived ground-truth coloring.
//!
//! All methods explain the standalone prediction: every atom in both
//! readout masks, eval-mode batchnorm.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Tape, Tensor};
use crate::model::{GraphInput, ModelError, Mode, MpnnModel};
use crate::pairs::CliffPair;

#[derive(Debug, Error)]
pub enum AttributionError {
    #[error("unknown attribution method {0:?}")]
    UnknownMethod(String),
    #[error("integrated gradients needs at least one step")]
    NoSteps,
    #[error("pair {0} has equal activities; no cliff direction")]
    NoDirection(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Cam,
    GradCam,
    GradInput,
    Ig,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Cam, Method::GradCam, Method::GradInput, Method::Ig];

    pub fn name(self) -> &'static str {
        match self {
            Method::Cam => "cam",
            Method::GradCam => "gradcam",
            Method::GradInput => "gradinput",
            Method::Ig => "ig",
        }
    }

    pub fn parse(name: &str) -> Result<Self, AttributionError> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == name)
            .ok_or_else(|| AttributionError::UnknownMethod(name.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttributionConfig {
    /// Riemann steps for integrated gradients.
    pub ig_steps: usize,
}

impl Default for AttributionConfig {
    fn default() -> Self {
        AttributionConfig { ig_steps: 64 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionMap {
    pub node_values: Vec<f64>,
    /// Per directed edge; empty once redistributed.
    pub edge_values: Vec<f64>,
    /// `(source, target)` of each entry in `edge_values`.
    pub edges: Vec<(usize, usize)>,
    pub method: Method,
    /// Hash of the checkpoint that produced the map.
    pub model_ref: String,
}

impl AttributionMap {
    pub fn total(&self) -> f64 {
        self.node_values.iter().sum::<f64>() + self.edge_values.iter().sum::<f64>()
    }
}

/// Moves half of every directed-edge value onto each endpoint.
pub fn redistribute_edges(mut map: AttributionMap) -> AttributionMap {
    for (&value, &(s, t)) in map.edge_values.iter().zip(&map.edges) {
        map.node_values[s] += 0.5 * value;
        map.node_values[t] += 0.5 * value;
    }
    map.edge_values.clear();
    map.edges.clear();
    map
}

/// A scalar function of node and edge feature matrices with gradients.
pub trait FeatureFunction {
    /// `(f, df/d atom_x, df/d edge_x)`.
    fn value_and_gradients(
        &self,
        atom_x: &Tensor,
        edge_x: &Tensor,
    ) -> Result<(f64, Tensor, Tensor), AttributionError>;
}

/// The standalone model prediction as a function of the input features of
/// one fixed graph.
pub struct ModelFunction<'a> {
    pub model: &'a MpnnModel,
    pub input: &'a GraphInput,
}

impl FeatureFunction for ModelFunction<'_> {
    fn value_and_gradients(
        &self,
        atom_x: &Tensor,
        edge_x: &Tensor,
    ) -> Result<(f64, Tensor, Tensor), AttributionError> {
        let mut tape = Tape::new();
        let pv = self.model.register(&mut tape, false);
        let ax = tape.leaf(atom_x.clone(), true);
        let ex = tape.leaf(edge_x.clone(), true);
        let all = vec![true; self.input.num_atoms()];
        let fwd = self
            .model
            .forward_on_tape(&mut tape, &pv, ax, ex, self.input, &all, &all, Mode::Eval)?;
        let out = tape.sum(fwd.prediction)?;
        let mut grads = tape.backward(out)?;
        let ga = grads
            .take(ax)
            .unwrap_or_else(|| Tensor::zeros(atom_x.shape()));
        let ge = grads
            .take(ex)
            .unwrap_or_else(|| Tensor::zeros(edge_x.shape()));
        Ok((tape.value(out).item().expect("scalar"), ga, ge))
    }
}

fn row_dot(values: &Tensor, weights: &Tensor) -> Vec<f64> {
    let (rows, cols) = values.dims2().unwrap_or((0, 0));
    if cols == 0 {
        return vec![0.0; rows];
    }
    values
        .data()
        .chunks(cols)
        .zip(weights.data().chunks(cols))
        .map(|(x, w)| x.iter().zip(w).map(|(a, b)| a * b).sum())
        .collect()
}

/// Gradient x input for nodes and edges, before redistribution.
pub fn gradient_x_input(
    f: &dyn FeatureFunction,
    atom_x: &Tensor,
    edge_x: &Tensor,
) -> Result<(Vec<f64>, Vec<f64>), AttributionError> {
    let (_, ga, ge) = f.value_and_gradients(atom_x, edge_x)?;
    Ok((row_dot(atom_x, &ga), row_dot(edge_x, &ge)))
}

/// Integrated gradients from the all-zero baseline with `steps`
/// right-endpoint Riemann points, for nodes and edges.
pub fn integrated_gradients(
    f: &dyn FeatureFunction,
    atom_x: &Tensor,
    edge_x: &Tensor,
    steps: usize,
) -> Result<(Vec<f64>, Vec<f64>), AttributionError> {
    if steps == 0 {
        return Err(AttributionError::NoSteps);
    }
    let scaled = |t: &Tensor, a: f64| {
        Tensor::new(t.shape().to_vec(), t.data().iter().map(|v| a * v).collect()).expect("shape")
    };
    let mut sum_a = vec![0.0; atom_x.numel()];
    let mut sum_e = vec![0.0; edge_x.numel()];
    for s in 1..=steps {
        let alpha = s as f64 / steps as f64;
        let (_, ga, ge) = f.value_and_gradients(&scaled(atom_x, alpha), &scaled(edge_x, alpha))?;
        sum_a.iter_mut().zip(ga.data()).for_each(|(acc, g)| *acc += g);
        sum_e.iter_mut().zip(ge.data()).for_each(|(acc, g)| *acc += g);
    }
    let mean = |t: &Tensor, sum: Vec<f64>| {
        Tensor::new(t.shape().to_vec(), sum.into_iter().map(|g| g / steps as f64).collect())
            .expect("shape")
    };
    Ok((
        row_dot(atom_x, &mean(atom_x, sum_a)),
        row_dot(edge_x, &mean(edge_x, sum_e)),
    ))
}

/// CAM and Grad-CAM need the final node embeddings `h` and the gradient of
/// the prediction with respect to them.
fn class_activation(
    model: &MpnnModel,
    input: &GraphInput,
    method: Method,
) -> Result<Vec<f64>, AttributionError> {
    let mut tape = Tape::new();
    let pv = model.register(&mut tape, false);
    let ax = tape.leaf(input.atom_x.clone(), true);
    let ex = tape.constant(input.edge_x.clone());
    let all = vec![true; input.num_atoms()];
    let fwd = model.forward_on_tape(&mut tape, &pv, ax, ex, input, &all, &all, Mode::Eval)?;
    let out = tape.sum(fwd.prediction)?;
    let grads = tape.backward(out)?;
    let h = tape.value(fwd.node_embeddings());
    let (n, width) = h.dims2().unwrap_or((0, 0));
    let weights: Vec<f64> = match method {
        Method::Cam => {
            // the head path is affine in the pooled embedding, so the
            // effective weight is d y / d pooled, summed over both readouts
            let mut w = vec![0.0; width];
            for readout in [fwd.readout_cn, fwd.readout_ucn] {
                if let Some(g) = grads.get(readout) {
                    w.iter_mut().zip(g.data()).for_each(|(a, b)| *a += b);
                }
            }
            w
        }
        _ => {
            let mut alpha = vec![0.0; width];
            if let Some(g) = grads.get(fwd.node_embeddings()) {
                for row in g.data().chunks(width) {
                    alpha.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                }
            }
            alpha.iter_mut().for_each(|a| *a /= n as f64);
            alpha
        }
    };
    Ok(h
        .data()
        .chunks(width.max(1))
        .take(n)
        .map(|row| row.iter().zip(&weights).map(|(a, b)| a * b).sum())
        .collect())
}

/// Attribution map for one compound. Gradient x input and integrated
/// gradients return edge values that still need [`redistribute_edges`].
pub fn attribute(
    model: &MpnnModel,
    input: &GraphInput,
    method: Method,
    config: &AttributionConfig,
    model_ref: &str,
) -> Result<AttributionMap, AttributionError> {
    let edges: Vec<(usize, usize)> = input
        .sources
        .iter()
        .copied()
        .zip(input.targets.iter().copied())
        .collect();
    let f = ModelFunction { model, input };
    let (node_values, edge_values) = match method {
        Method::Cam | Method::GradCam => (class_activation(model, input, method)?, Vec::new()),
        Method::GradInput => gradient_x_input(&f, &input.atom_x, &input.edge_x)?,
        Method::Ig => integrated_gradients(&f, &input.atom_x, &input.edge_x, config.ig_steps)?,
    };
    Ok(AttributionMap {
        edges: if edge_values.is_empty() { Vec::new() } else { edges },
        node_values,
        edge_values,
        method,
        model_ref: model_ref.to_string(),
    })
}

/// [`attribute`] followed by edge redistribution.
pub fn attribute_nodes(
    model: &MpnnModel,
    input: &GraphInput,
    method: Method,
    config: &AttributionConfig,
    model_ref: &str,
) -> Result<AttributionMap, AttributionError> {
    Ok(redistribute_edges(attribute(model, input, method, config, model_ref)?))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroundTruthColoring {
    /// `+1`, `-1` or `0` per atom.
    pub labels: Vec<i8>,
}

/// Uncommon atoms of the more active compound are `+1`, those of the less
/// active one `-1`; common atoms are `0`.
pub fn ground_truth(
    pair: &CliffPair,
) -> Result<(GroundTruthColoring, GroundTruthColoring), AttributionError> {
    if pair.y_i == pair.y_j {
        return Err(AttributionError::NoDirection(pair.pair_id.clone()));
    }
    let sign_i: i8 = if pair.y_i > pair.y_j { 1 } else { -1 };
    let color = |mask: &[bool], sign: i8| GroundTruthColoring {
        labels: mask.iter().map(|&u| if u { sign } else { 0 }).collect(),
    };
    Ok((
        color(&pair.uncommon_mask_i, sign_i),
        color(&pair.uncommon_mask_j, -sign_i),
    ))
}
