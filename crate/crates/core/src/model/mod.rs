//! Edge-conditioned message-passing regressor with separate common and
//! uncommon node heads.
//!
//! Pipeline for one compound:
//!
//! 1. `x = node_embed(atom features)`, `e = edge_embed(bond features)`
//! 2. three rounds of `h_v <- relu(bn(root(h_v) + mean_{w->v} W(e_wv) h_w))`
//!    where `W(e)` is a `hidden x hidden` matrix produced by a single linear
//!    map of the edge embedding
//! 3. masked mean readouts over the common and uncommon atoms, one linear
//!    head each, then `y = out(combine([a_cn, a_ucn]))`
//!
//! Each head also owns a linear `hidden -> 1` scalarizer used by the node
//! loss. Head and scalarizer parameters carry the group tags the penalties
//! act on.

mod checkpoint;

pub use checkpoint::{
    checkpoint_hash, decode_checkpoint, encode_checkpoint, Checkpoint, CheckpointError,
    CHECKPOINT_MAGIC, CHECKPOINT_SCHEMA,
};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, BatchStats, RunningStats, Tape, Tensor, Var};
use crate::molgraph::{
    atom_features, bond_features, MolecularGraph, ATOM_FEATURE_WIDTH, BOND_FEATURE_WIDTH,
};

pub const MESSAGE_LAYERS: usize = 3;
pub const BATCHNORM_MOMENTUM: f64 = 0.1;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("mask has {got} entries for a graph with {expected} atoms")]
    MaskLength { expected: usize, got: usize },
    #[error("{what} feature width {got} does not match the model ({expected})")]
    FeatureWidth {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    Mean,
}

/// How the message-layer batchnorm normalizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BatchNormMode {
    /// Subtract the graph's own node mean, divide by the running standard
    /// deviation; identical in train and eval mode.
    Centered,
    /// Graph mean and variance in train mode, running mean and variance in
    /// eval mode.
    Standard,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub hidden_dim: usize,
    pub message_layers: usize,
    pub atom_feature_width: usize,
    pub bond_feature_width: usize,
    pub aggregation: Aggregation,
    pub batch_norm: BatchNormMode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::with_hidden(64)
    }
}

impl ModelConfig {
    pub fn with_hidden(hidden_dim: usize) -> Self {
        ModelConfig {
            hidden_dim,
            message_layers: MESSAGE_LAYERS,
            atom_feature_width: ATOM_FEATURE_WIDTH,
            bond_feature_width: BOND_FEATURE_WIDTH,
            aggregation: Aggregation::Mean,
            batch_norm: BatchNormMode::Centered,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.message_layers != MESSAGE_LAYERS {
            return Err(ModelError::Config(format!(
                "message_layers must be {MESSAGE_LAYERS}, got {}",
                self.message_layers
            )));
        }
        if self.hidden_dim < 4 {
            return Err(ModelError::Config(format!(
                "hidden_dim must be at least 4, got {}",
                self.hidden_dim
            )));
        }
        if self.atom_feature_width != ATOM_FEATURE_WIDTH
            || self.bond_feature_width != BOND_FEATURE_WIDTH
        {
            return Err(ModelError::Config(format!(
                "feature widths must be ({ATOM_FEATURE_WIDTH}, {BOND_FEATURE_WIDTH}), got ({}, {})",
                self.atom_feature_width, self.bond_feature_width
            )));
        }
        Ok(())
    }

    /// Closed-form parameter count with `H = hidden_dim`, `A`/`B` the atom
    /// and bond feature widths and `L` message layers:
    /// `(A+1)H + (B+1)H + L(H^3 + 2H^2 + 3H) + 2(H+1)^2 + 2H^2 + 2H + 1`.
    pub fn parameter_count(&self) -> usize {
        let h = self.hidden_dim;
        let embed = (self.atom_feature_width + 1) * h + (self.bond_feature_width + 1) * h;
        let conv = h * h * h + h * h // edge net
            + h * h + h // root
            + 2 * h; // batchnorm scale and shift
        let heads = 2 * (h * h + h + h + 1);
        let combine = 2 * h * h + h;
        let out = h + 1;
        embed + self.message_layers * conv + heads + combine + out
    }
}

/// Which penalty group, if any, a parameter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupTag {
    CnHead,
    UcnHead,
    Other,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub tensor: Tensor,
    pub group: GroupTag,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Linear {
    weight: usize,
    bias: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct ConvLayer {
    edge_net: Linear,
    root: Linear,
    bn_scale: usize,
    bn_shift: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct Layout {
    node_embed: Linear,
    edge_embed: Linear,
    convs: Vec<ConvLayer>,
    head_cn: Linear,
    head_ucn: Linear,
    scalar_cn: Linear,
    scalar_ucn: Linear,
    combine: Linear,
    out: Linear,
}

/// Name, shape, group and fan-in of one parameter.
type ParamSpec = (String, Vec<usize>, GroupTag, usize);

/// Parameter shapes in storage order, plus the index layout.
fn build_layout(config: &ModelConfig) -> (Vec<ParamSpec>, Layout) {
    let h = config.hidden_dim;
    let mut specs: Vec<ParamSpec> = Vec::new();
    let linear = |specs: &mut Vec<_>, name: &str, fan_in: usize, fan_out: usize, group| {
        let weight = specs.len();
        specs.push((format!("{name}.weight"), vec![fan_in, fan_out], group, fan_in));
        specs.push((format!("{name}.bias"), vec![fan_out], group, fan_in));
        Linear {
            weight,
            bias: weight + 1,
        }
    };
    let node_embed = linear(&mut specs, "node_embed", config.atom_feature_width, h, GroupTag::Other);
    let edge_embed = linear(&mut specs, "edge_embed", config.bond_feature_width, h, GroupTag::Other);
    let mut convs = Vec::with_capacity(config.message_layers);
    for l in 0..config.message_layers {
        let edge_net = linear(&mut specs, &format!("conv{l}.edge_net"), h, h * h, GroupTag::Other);
        let root = linear(&mut specs, &format!("conv{l}.root"), h, h, GroupTag::Other);
        let bn_scale = specs.len();
        specs.push((format!("conv{l}.bn.scale"), vec![h], GroupTag::Other, 0));
        specs.push((format!("conv{l}.bn.shift"), vec![h], GroupTag::Other, 0));
        convs.push(ConvLayer {
            edge_net,
            root,
            bn_scale,
            bn_shift: bn_scale + 1,
        });
    }
    let head_cn = linear(&mut specs, "head_cn", h, h, GroupTag::CnHead);
    let scalar_cn = linear(&mut specs, "head_cn.scalar", h, 1, GroupTag::CnHead);
    let head_ucn = linear(&mut specs, "head_ucn", h, h, GroupTag::UcnHead);
    let scalar_ucn = linear(&mut specs, "head_ucn.scalar", h, 1, GroupTag::UcnHead);
    let combine = linear(&mut specs, "combine", 2 * h, h, GroupTag::Other);
    let out = linear(&mut specs, "out", h, 1, GroupTag::Other);
    (
        specs,
        Layout {
            node_embed,
            edge_embed,
            convs,
            head_cn,
            head_ucn,
            scalar_cn,
            scalar_ucn,
            combine,
            out,
        },
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Featurized graph ready for the forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphInput {
    pub atom_x: Tensor,
    pub edge_x: Tensor,
    pub sources: Vec<usize>,
    pub targets: Vec<usize>,
}

impl GraphInput {
    pub fn from_graph(graph: &MolecularGraph) -> Self {
        let n = graph.num_atoms();
        let edges = bond_features(graph);
        let e = edges.num_edges();
        GraphInput {
            atom_x: Tensor::matrix(n, ATOM_FEATURE_WIDTH, atom_features(graph)).expect("width"),
            edge_x: Tensor::matrix(e, BOND_FEATURE_WIDTH, edges.values).expect("width"),
            sources: edges.edges.iter().map(|&(s, _)| s).collect(),
            targets: edges.edges.iter().map(|&(_, t)| t).collect(),
        }
    }

    pub fn num_atoms(&self) -> usize {
        self.atom_x.dims2().map_or(0, |(r, _)| r)
    }

    pub fn num_edges(&self) -> usize {
        self.sources.len()
    }
}

/// First occurrence of each distinct row, and each row's index into that
/// list.
fn distinct_rows(x: &Tensor) -> (Vec<usize>, Vec<usize>) {
    let (rows, cols) = x.dims2().unwrap_or((0, 0));
    let mut first: Vec<usize> = Vec::new();
    let mut inverse = Vec::with_capacity(rows);
    for r in 0..rows {
        let row = &x.data()[r * cols..(r + 1) * cols];
        match first.iter().position(|&f| &x.data()[f * cols..(f + 1) * cols] == row) {
            Some(k) => inverse.push(k),
            None => {
                inverse.push(first.len());
                first.push(r);
            }
        }
    }
    (first, inverse)
}

/// Tape handles for every model parameter, in storage order.
#[derive(Debug, Clone)]
pub struct ParamVars(pub Vec<Var>);

/// Tape handles produced by one forward pass.
#[derive(Debug, Clone)]
pub struct TapeForward {
    /// Post-ReLU node activations of each message layer; the last entry is
    /// the final node embedding `h`.
    pub layers: Vec<Var>,
    pub readout_cn: Var,
    pub readout_ucn: Var,
    pub head_cn: Var,
    pub head_ucn: Var,
    pub score_cn: Var,
    pub score_ucn: Var,
    pub prediction: Var,
    pub batch_stats: Vec<BatchStats>,
}

impl TapeForward {
    pub fn node_embeddings(&self) -> Var {
        *self.layers.last().expect("three layers")
    }
}

/// Plain-value snapshot of a forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    pub layer_activations: Vec<Tensor>,
    pub node_embeddings: Tensor,
    pub readout_cn: Tensor,
    pub readout_ucn: Tensor,
    pub head_cn: Tensor,
    pub head_ucn: Tensor,
    /// Scalarized common head output, used by the node loss.
    pub score_cn: f64,
    pub score_ucn: f64,
    pub prediction: f64,
}

impl ForwardTrace {
    fn from_tape(tape: &Tape, fwd: &TapeForward) -> Self {
        let item = |v: Var| tape.value(v).item().expect("scalar");
        ForwardTrace {
            layer_activations: fwd.layers.iter().map(|&v| tape.value(v).clone()).collect(),
            node_embeddings: tape.value(fwd.node_embeddings()).clone(),
            readout_cn: tape.value(fwd.readout_cn).clone(),
            readout_ucn: tape.value(fwd.readout_ucn).clone(),
            head_cn: tape.value(fwd.head_cn).clone(),
            head_ucn: tape.value(fwd.head_ucn).clone(),
            score_cn: item(fwd.score_cn),
            score_ucn: item(fwd.score_ucn),
            prediction: item(fwd.prediction),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MpnnModel {
    config: ModelConfig,
    params: Vec<Parameter>,
    running: Vec<RunningStats>,
    layout: Layout,
}

impl MpnnModel {
    /// Uniform `[-1/sqrt(fan_in), 1/sqrt(fan_in)]` weights and biases;
    /// batchnorm scale 1 and shift 0; running statistics start at mean 0,
    /// variance 1.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (specs, layout) = build_layout(config);
        let params = specs
            .into_iter()
            .map(|(name, shape, group, fan_in)| {
                let n: usize = shape.iter().product();
                let data = if name.ends_with(".bn.scale") {
                    vec![1.0; n]
                } else if name.ends_with(".bn.shift") {
                    vec![0.0; n]
                } else {
                    let bound = 1.0 / (fan_in as f64).sqrt();
                    (0..n).map(|_| rng.random_range(-bound..=bound)).collect()
                };
                Parameter {
                    name,
                    tensor: Tensor::new(shape, data).expect("shape"),
                    group,
                }
            })
            .collect();
        Ok(MpnnModel {
            config: config.clone(),
            params,
            running: vec![RunningStats::identity(config.hidden_dim); config.message_layers],
            layout,
        })
    }

    /// Rebuilds a model from stored tensors; shapes must match the layout
    /// implied by `config`.
    pub fn from_parts(
        config: ModelConfig,
        tensors: Vec<(String, Tensor)>,
        running: Vec<RunningStats>,
    ) -> Result<Self, ModelError> {
        config.validate()?;
        let (specs, layout) = build_layout(&config);
        if specs.len() != tensors.len() || running.len() != config.message_layers {
            return Err(ModelError::Config(format!(
                "expected {} tensors and {} running stats, got {} and {}",
                specs.len(),
                config.message_layers,
                tensors.len(),
                running.len()
            )));
        }
        let mut params = Vec::with_capacity(specs.len());
        for ((name, shape, group, _), (got_name, tensor)) in specs.into_iter().zip(tensors) {
            if name != got_name || shape != tensor.shape() {
                return Err(ModelError::Config(format!(
                    "tensor {got_name} {:?} does not match expected {name} {shape:?}",
                    tensor.shape()
                )));
            }
            params.push(Parameter {
                name,
                tensor,
                group,
            });
        }
        for stats in &running {
            if stats.mean.len() != config.hidden_dim || stats.var.len() != config.hidden_dim {
                return Err(ModelError::Config("running statistics width".into()));
            }
        }
        Ok(MpnnModel {
            config,
            params,
            running,
            layout,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn parameters(&self) -> &[Parameter] {
        &self.params
    }

    pub fn parameters_mut(&mut self) -> &mut [Parameter] {
        &mut self.params
    }

    pub fn running_stats(&self) -> &[RunningStats] {
        &self.running
    }

    pub fn running_stats_mut(&mut self) -> &mut [RunningStats] {
        &mut self.running
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    /// Indices of the parameters tagged with `group`, in storage order.
    pub fn group_indices(&self, group: GroupTag) -> Vec<usize> {
        self.params
            .iter()
            .enumerate()
            .filter(|(_, p)| p.group == group)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn register(&self, tape: &mut Tape, requires_grad: bool) -> ParamVars {
        ParamVars(
            self.params
                .iter()
                .map(|p| tape.leaf(p.tensor.clone(), requires_grad))
                .collect(),
        )
    }

    fn linear(&self, tape: &mut Tape, pv: &ParamVars, layer: Linear, x: Var) -> Result<Var, ModelError> {
        let y = tape.matmul(x, pv.0[layer.weight])?;
        Ok(tape.add_row(y, pv.0[layer.bias])?)
    }

    fn check_masks(&self, num_atoms: usize, masks: [&[bool]; 2]) -> Result<(), ModelError> {
        for m in masks {
            if m.len() != num_atoms {
                return Err(ModelError::MaskLength {
                    expected: num_atoms,
                    got: m.len(),
                });
            }
        }
        Ok(())
    }

    /// Forward pass on an existing tape with caller-provided feature
    /// variables (so that attributions can differentiate through them).
    #[allow(clippy::too_many_arguments)]
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape,
        pv: &ParamVars,
        atom_x: Var,
        edge_x: Var,
        input: &GraphInput,
        common_mask: &[bool],
        uncommon_mask: &[bool],
        mode: Mode,
    ) -> Result<TapeForward, ModelError> {
        let n = input.num_atoms();
        self.check_masks(n, [common_mask, uncommon_mask])?;
        let atom_width = tape.value(atom_x).dims2().map_or(0, |(_, c)| c);
        if atom_width != self.config.atom_feature_width {
            return Err(ModelError::FeatureWidth {
                what: "atom",
                expected: self.config.atom_feature_width,
                got: atom_width,
            });
        }
        let bond_width = tape.value(edge_x).dims2().map_or(0, |(_, c)| c);
        if bond_width != self.config.bond_feature_width {
            return Err(ModelError::FeatureWidth {
                what: "bond",
                expected: self.config.bond_feature_width,
                got: bond_width,
            });
        }

        let l = &self.layout;
        let mut h = self.linear(tape, pv, l.node_embed, atom_x)?;
        let e = self.linear(tape, pv, l.edge_embed, edge_x)?;
        // Constant edge features repeat across edges; the edge network then
        // runs once per distinct row.
        let distinct = if tape.requires_grad(edge_x) {
            None
        } else {
            let (first, inverse) = distinct_rows(tape.value(edge_x));
            Some((tape.gather_rows(e, &first)?, inverse))
        };

        let mut layers = Vec::with_capacity(l.convs.len());
        let mut batch_stats = Vec::new();
        for (idx, conv) in l.convs.iter().enumerate() {
            let weights = match &distinct {
                Some((rows, inverse)) => {
                    let w = self.linear(tape, pv, conv.edge_net, *rows)?;
                    tape.gather_rows(w, inverse)?
                }
                None => self.linear(tape, pv, conv.edge_net, e)?,
            };
            let neighbors = tape.gather_rows(h, &input.sources)?;
            let messages = tape.row_matvec(weights, neighbors)?;
            let aggregate = tape.scatter_mean(messages, &input.targets, n)?;
            let rooted = self.linear(tape, pv, conv.root, h)?;
            let pre = tape.add(rooted, aggregate)?;
            let (scale, shift) = (pv.0[conv.bn_scale], pv.0[conv.bn_shift]);
            let running = &self.running[idx];
            let normed = match (mode, self.config.batch_norm) {
                (Mode::Train, BatchNormMode::Standard) => {
                    let (y, stats) = tape.batch_norm_train(pre, scale, shift)?;
                    batch_stats.push(stats);
                    y
                }
                (Mode::Train, BatchNormMode::Centered) => {
                    let (y, stats) = tape.batch_norm_centered(pre, scale, shift, &running.var)?;
                    batch_stats.push(stats);
                    y
                }
                (Mode::Eval, BatchNormMode::Standard) => {
                    tape.batch_norm_eval(pre, scale, shift, Some(running))?
                }
                (Mode::Eval, BatchNormMode::Centered) => {
                    tape.batch_norm_centered(pre, scale, shift, &running.var)?.0
                }
            };
            h = tape.relu(normed)?;
            layers.push(h);
        }

        let readout_cn = tape.masked_mean(h, common_mask)?;
        let readout_ucn = tape.masked_mean(h, uncommon_mask)?;
        let head_cn = self.linear(tape, pv, l.head_cn, readout_cn)?;
        let head_ucn = self.linear(tape, pv, l.head_ucn, readout_ucn)?;
        let score_cn = self.linear(tape, pv, l.scalar_cn, head_cn)?;
        let score_ucn = self.linear(tape, pv, l.scalar_ucn, head_ucn)?;
        let joined = tape.concat_cols(&[head_cn, head_ucn])?;
        let combined = self.linear(tape, pv, l.combine, joined)?;
        let prediction = self.linear(tape, pv, l.out, combined)?;
        Ok(TapeForward {
            layers,
            readout_cn,
            readout_ucn,
            head_cn,
            head_ucn,
            score_cn,
            score_ucn,
            prediction,
            batch_stats,
        })
    }

    /// Folds one training batch into the running statistics.
    pub fn update_running_stats(&mut self, batch: &[BatchStats]) {
        for (running, stats) in self.running.iter_mut().zip(batch) {
            running.update(stats, BATCHNORM_MOMENTUM);
        }
    }

    /// Forward pass for one compound in a pair context. Train mode updates
    /// the batchnorm running statistics; eval mode leaves the model as is.
    pub fn forward(
        &mut self,
        graph: &MolecularGraph,
        common_mask: &[bool],
        uncommon_mask: &[bool],
        mode: Mode,
    ) -> Result<ForwardTrace, ModelError> {
        let input = GraphInput::from_graph(graph);
        let (trace, stats) = self.forward_input(&input, common_mask, uncommon_mask, mode)?;
        if mode == Mode::Train {
            self.update_running_stats(&stats);
        }
        Ok(trace)
    }

    /// Eval-mode forward; never mutates the model.
    pub fn forward_eval(
        &self,
        input: &GraphInput,
        common_mask: &[bool],
        uncommon_mask: &[bool],
    ) -> Result<ForwardTrace, ModelError> {
        Ok(self.forward_input(input, common_mask, uncommon_mask, Mode::Eval)?.0)
    }

    fn forward_input(
        &self,
        input: &GraphInput,
        common_mask: &[bool],
        uncommon_mask: &[bool],
        mode: Mode,
    ) -> Result<(ForwardTrace, Vec<BatchStats>), ModelError> {
        let mut tape = Tape::new();
        let pv = self.register(&mut tape, false);
        let atom_x = tape.constant(input.atom_x.clone());
        let edge_x = tape.constant(input.edge_x.clone());
        let fwd = self.forward_on_tape(
            &mut tape,
            &pv,
            atom_x,
            edge_x,
            input,
            common_mask,
            uncommon_mask,
            mode,
        )?;
        Ok((ForwardTrace::from_tape(&tape, &fwd), fwd.batch_stats))
    }

    /// Standalone affinity estimate: both heads read the whole graph.
    pub fn predict_affinity(&self, graph: &MolecularGraph) -> Result<f64, ModelError> {
        let all = vec![true; graph.num_atoms()];
        let input = GraphInput::from_graph(graph);
        Ok(self.forward_eval(&input, &all, &all)?.prediction)
    }
}
