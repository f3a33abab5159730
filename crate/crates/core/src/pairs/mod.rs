//! Activity-cliff pairs: MCS matching, pair generation, splitting and
//! threshold filtering.

mod io;
mod mcs;
mod synthetic;

pub use io::{
    pic50_from_ic50_nm, read_compounds_csv, read_pairs_jsonl, write_compounds_csv,
    write_pairs_jsonl, CompoundTable, SkippedRow, PAIR_SCHEMA,
};
pub use mcs::{is_valid_common_substructure, max_common_substructure, McsResult};
pub use synthetic::{
    element_contribution, generate_synthetic_dataset, PlantedCompound, SyntheticConfig, SyntheticDataset,
    DECORATION_LIBRARY, SCAFFOLD_LIBRARY,
};

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::molgraph::MolecularGraph;

#[derive(Debug, Error)]
pub enum PairsError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("target {target} has {count} pairs; at least 3 are needed to split")]
    TooFewPairsForTarget { target: String, count: usize },
    #[error("{0} pairs given; at least 10 are needed to split")]
    TooFewPairs(usize),
    #[error("compounds CSV row {row}: {message}")]
    Csv { row: usize, message: String },
    #[error("pairs file line {line}: {message}")]
    Jsonl { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairGenConfig {
    pub min_mcs_fraction: f64,
    /// Minimum `|y_i - y_j|` in log units.
    pub min_delta: f64,
    pub min_pairs_per_target: usize,
    /// Search steps allowed per MCS before falling back to the best found.
    pub mcs_node_budget: u64,
}

impl Default for PairGenConfig {
    fn default() -> Self {
        PairGenConfig {
            min_mcs_fraction: 0.5,
            min_delta: 1.0,
            min_pairs_per_target: 50,
            mcs_node_budget: 2_000_000,
        }
    }
}

impl PairGenConfig {
    pub fn validate(&self) -> Result<(), PairsError> {
        if !(0.0..=1.0).contains(&self.min_mcs_fraction) {
            return Err(PairsError::Config(format!(
                "min_mcs_fraction must be in [0, 1], got {}",
                self.min_mcs_fraction
            )));
        }
        if !(self.min_delta >= 0.0 && self.min_delta.is_finite()) {
            return Err(PairsError::Config(format!(
                "min_delta must be >= 0, got {}",
                self.min_delta
            )));
        }
        if self.mcs_node_budget == 0 {
            return Err(PairsError::Config("mcs_node_budget must be positive".into()));
        }
        Ok(())
    }
}

/// One compound with its activity as pIC50.
#[derive(Debug, Clone, PartialEq)]
pub struct Compound {
    pub id: String,
    pub target_id: String,
    pub graph: MolecularGraph,
    pub pic50: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CliffPair {
    pub pair_id: String,
    pub target_id: String,
    pub compound_i: String,
    pub compound_j: String,
    pub graph_i: MolecularGraph,
    pub graph_j: MolecularGraph,
    pub y_i: f64,
    pub y_j: f64,
    pub common_mask_i: Vec<bool>,
    pub common_mask_j: Vec<bool>,
    pub uncommon_mask_i: Vec<bool>,
    pub uncommon_mask_j: Vec<bool>,
    pub mcs_fraction: f64,
    pub mapping: Vec<(usize, usize)>,
    pub mcs_truncated: bool,
}

impl CliffPair {
    /// Builds the pair record for compounds `i` and `j` from their MCS.
    pub fn from_mcs(target_id: &str, ci: &Compound, cj: &Compound, mcs: &McsResult) -> Self {
        let mut common_i = vec![false; ci.graph.num_atoms()];
        let mut common_j = vec![false; cj.graph.num_atoms()];
        for &(u, v) in &mcs.mapping {
            common_i[u] = true;
            common_j[v] = true;
        }
        CliffPair {
            pair_id: format!("{target_id}:{}:{}", ci.id, cj.id),
            target_id: target_id.to_string(),
            compound_i: ci.id.clone(),
            compound_j: cj.id.clone(),
            graph_i: ci.graph.clone(),
            graph_j: cj.graph.clone(),
            y_i: ci.pic50,
            y_j: cj.pic50,
            uncommon_mask_i: common_i.iter().map(|c| !c).collect(),
            uncommon_mask_j: common_j.iter().map(|c| !c).collect(),
            common_mask_i: common_i,
            common_mask_j: common_j,
            mcs_fraction: mcs.min_fraction(),
            mapping: mcs.mapping.clone(),
            mcs_truncated: mcs.truncated,
        }
    }

    pub fn delta(&self) -> f64 {
        self.y_i - self.y_j
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TargetSummary {
    pub compounds: usize,
    pub candidates: usize,
    /// Candidates passing the activity-difference filter, before the MCS.
    pub delta_passing: usize,
    pub kept: usize,
    pub truncated_mcs: usize,
    /// Dropped for having fewer than `min_pairs_per_target` pairs.
    pub dropped: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairGeneration {
    pub pairs: Vec<CliffPair>,
    pub targets: BTreeMap<String, TargetSummary>,
}

/// All cliff pairs within each target. Compounds are paired in input order
/// (`i` before `j`); the output is sorted by `(target_id, pair_id)`.
pub fn generate_cliff_pairs(
    compounds: &[Compound],
    config: &PairGenConfig,
) -> Result<PairGeneration, PairsError> {
    config.validate()?;
    let mut by_target: BTreeMap<&str, Vec<&Compound>> = BTreeMap::new();
    for c in compounds {
        by_target.entry(c.target_id.as_str()).or_default().push(c);
    }
    let mut pairs = Vec::new();
    let mut targets = BTreeMap::new();
    for (target, members) in by_target {
        let candidates: Vec<(usize, usize)> = (0..members.len())
            .flat_map(|i| (i + 1..members.len()).map(move |j| (i, j)))
            .collect();
        let passing: Vec<(usize, usize)> = candidates
            .iter()
            .copied()
            .filter(|&(i, j)| (members[i].pic50 - members[j].pic50).abs() >= config.min_delta)
            .collect();
        let found: Vec<CliffPair> = passing
            .par_iter()
            .filter_map(|&(i, j)| {
                let mcs = max_common_substructure(&members[i].graph, &members[j].graph, config);
                (mcs.min_fraction() >= config.min_mcs_fraction)
                    .then(|| CliffPair::from_mcs(target, members[i], members[j], &mcs))
            })
            .collect();
        let summary = TargetSummary {
            compounds: members.len(),
            candidates: candidates.len(),
            delta_passing: passing.len(),
            kept: found.len(),
            truncated_mcs: found.iter().filter(|p| p.mcs_truncated).count(),
            dropped: found.len() < config.min_pairs_per_target,
        };
        if summary.dropped {
            log::info!(
                "target {target}: {} pairs < {}, dropped",
                found.len(),
                config.min_pairs_per_target
            );
        } else {
            pairs.extend(found);
        }
        targets.insert(target.to_string(), summary);
    }
    pairs.sort_by(|a, b| (&a.target_id, &a.pair_id).cmp(&(&b.target_id, &b.pair_id)));
    Ok(PairGeneration { pairs, targets })
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<CliffPair>,
    pub validation: Vec<CliffPair>,
    pub test: Vec<CliffPair>,
    pub seed: u64,
}

impl DatasetSplit {
    pub fn sizes(&self) -> (usize, usize, usize) {
        (self.train.len(), self.validation.len(), self.test.len())
    }
}

fn check_ratios(ratios: (f64, f64, f64)) -> Result<(), PairsError> {
    let (a, b, c) = ratios;
    if [a, b, c].iter().any(|r| !(*r >= 0.0)) || ((a + b + c) - 1.0).abs() > 1e-9 {
        return Err(PairsError::Config(format!(
            "split ratios must be non-negative and sum to 1, got {ratios:?}"
        )));
    }
    Ok(())
}

/// Cut points `floor(n * r_train)` and `floor(n * (r_train + r_val))`.
/// Whatever the two floors leave over lands in the test slice.
pub fn split_sizes(n: usize, ratios: (f64, f64, f64)) -> (usize, usize, usize) {
    // the epsilon absorbs representation error, e.g. 0.7 + 0.1 < 0.8
    let cut = |r: f64| ((n as f64 * r + 1e-9).floor() as usize).min(n);
    let first = cut(ratios.0);
    let second = cut(ratios.0 + ratios.1).max(first);
    (first, second - first, n - second)
}

fn group_by_target(pairs: &[CliffPair]) -> BTreeMap<&str, Vec<&CliffPair>> {
    let mut groups: BTreeMap<&str, Vec<&CliffPair>> = BTreeMap::new();
    for p in pairs {
        groups.entry(p.target_id.as_str()).or_default().push(p);
    }
    for members in groups.values_mut() {
        members.sort_by(|a, b| a.pair_id.cmp(&b.pair_id));
    }
    groups
}

/// Pair-level split: per target (in id order) a seeded shuffle, then
/// contiguous train/validation/test slices; slices are concatenated across
/// targets.
pub fn split_pairs(
    pairs: &[CliffPair],
    ratios: (f64, f64, f64),
    seed: u64,
) -> Result<DatasetSplit, PairsError> {
    check_ratios(ratios)?;
    if pairs.len() < 10 {
        return Err(PairsError::TooFewPairs(pairs.len()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut split = DatasetSplit {
        train: Vec::new(),
        validation: Vec::new(),
        test: Vec::new(),
        seed,
    };
    for (target, mut members) in group_by_target(pairs) {
        if members.len() < 3 {
            return Err(PairsError::TooFewPairsForTarget {
                target: target.to_string(),
                count: members.len(),
            });
        }
        members.shuffle(&mut rng);
        let (a, b, _) = split_sizes(members.len(), ratios);
        split.train.extend(members[..a].iter().map(|p| (*p).clone()));
        split.validation.extend(members[a..a + b].iter().map(|p| (*p).clone()));
        split.test.extend(members[a + b..].iter().map(|p| (*p).clone()));
    }
    Ok(split)
}

/// Compound-disjoint variant: compounds of each target are shuffled and
/// sliced by the ratios; a pair joins the split holding both of its
/// compounds and is discarded when they land in different splits.
/// Returns the split and the number of discarded pairs.
pub fn split_pairs_compound_disjoint(
    pairs: &[CliffPair],
    ratios: (f64, f64, f64),
    seed: u64,
) -> Result<(DatasetSplit, usize), PairsError> {
    check_ratios(ratios)?;
    if pairs.len() < 10 {
        return Err(PairsError::TooFewPairs(pairs.len()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut split = DatasetSplit {
        train: Vec::new(),
        validation: Vec::new(),
        test: Vec::new(),
        seed,
    };
    let mut discarded = 0;
    for (target, members) in group_by_target(pairs) {
        if members.len() < 3 {
            return Err(PairsError::TooFewPairsForTarget {
                target: target.to_string(),
                count: members.len(),
            });
        }
        let compounds: BTreeSet<&str> = members
            .iter()
            .flat_map(|p| [p.compound_i.as_str(), p.compound_j.as_str()])
            .collect();
        let mut compounds: Vec<&str> = compounds.into_iter().collect();
        compounds.shuffle(&mut rng);
        let (a, b, _) = split_sizes(compounds.len(), ratios);
        let slot: BTreeMap<&str, usize> = compounds
            .iter()
            .enumerate()
            .map(|(k, c)| (*c, if k < a { 0 } else if k < a + b { 1 } else { 2 }))
            .collect();
        for p in members {
            let (si, sj) = (slot[p.compound_i.as_str()], slot[p.compound_j.as_str()]);
            match (si == sj).then_some(si) {
                Some(0) => split.train.push(p.clone()),
                Some(1) => split.validation.push(p.clone()),
                Some(_) => split.test.push(p.clone()),
                None => discarded += 1,
            }
        }
    }
    Ok((split, discarded))
}

/// Pairs whose MCS fraction is at least `threshold`.
pub fn filter_by_threshold(pairs: &[CliffPair], threshold: f64) -> Vec<CliffPair> {
    pairs
        .iter()
        .filter(|p| p.mcs_fraction >= threshold)
        .cloned()
        .collect()
}
