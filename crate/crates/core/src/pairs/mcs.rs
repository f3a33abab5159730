//! Exact maximum common connected induced substructure.
//!
//! Each candidate subgraph is grown from a seed pair `(a, b)` where `a` is
//! the smallest g1 index in the subgraph. The frontier atom with the
//! smallest index is either mapped to some compatible g2 atom or excluded
//! for the rest of the branch, so every (subgraph, mapping) is visited at
//! most once. Branches are cut with a per-label counting bound over the
//! atoms still reachable on both sides.

use serde::{Deserialize, Serialize};

use super::PairGenConfig;
use crate::molgraph::{BondOrder, MolecularGraph};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McsResult {
    /// `(g1 index, g2 index)`, sorted by g1 index.
    pub mapping: Vec<(usize, usize)>,
    pub size: usize,
    pub fraction_1: f64,
    pub fraction_2: f64,
    /// The step budget ran out; `mapping` is the best found so far.
    pub truncated: bool,
}

impl McsResult {
    pub fn min_fraction(&self) -> f64 {
        self.fraction_1.min(self.fraction_2)
    }
}

fn label(graph: &MolecularGraph, v: usize) -> (usize, bool) {
    let a = &graph.atoms[v];
    (a.element.index(), a.aromatic)
}

struct Side {
    labels: Vec<usize>,
    adjacency: Vec<Vec<usize>>,
    bonds: Vec<Vec<Option<BondOrder>>>,
}

impl Side {
    fn new(graph: &MolecularGraph) -> Self {
        let adjacency = graph
            .adjacency()
            .into_iter()
            .map(|nbrs| nbrs.into_iter().map(|(w, _)| w).collect())
            .collect();
        Side {
            labels: (0..graph.num_atoms())
                .map(|v| {
                    let (e, arom) = label(graph, v);
                    e * 2 + arom as usize
                })
                .collect(),
            adjacency,
            bonds: graph.bond_table(),
        }
    }

    fn len(&self) -> usize {
        self.labels.len()
    }
}

const NUM_LABELS: usize = 32;
const UNMAPPED: usize = usize::MAX;

struct Search<'a> {
    g1: &'a Side,
    g2: &'a Side,
    map12: Vec<usize>,
    map21: Vec<usize>,
    excluded: Vec<bool>,
    seed: usize,
    size: usize,
    best: Vec<(usize, usize)>,
    /// Whether `best` came from the seed currently being searched.
    best_from_seed: bool,
    steps: u64,
    budget: u64,
    truncated: bool,
}

impl Search<'_> {
    fn allowed1(&self, v: usize) -> bool {
        v > self.seed && self.map12[v] == UNMAPPED && !self.excluded[v]
    }

    /// Atoms still reachable from the current mapping on each side, counted
    /// per label; the sum of per-label minima bounds the possible growth.
    fn bound(&self) -> usize {
        let reach = |side: &Side, mapped: &dyn Fn(usize) -> bool, open: &dyn Fn(usize) -> bool| {
            let mut counts = [0usize; NUM_LABELS];
            let mut seen = vec![false; side.len()];
            let mut stack: Vec<usize> = (0..side.len()).filter(|&v| mapped(v)).collect();
            for &v in &stack {
                seen[v] = true;
            }
            while let Some(v) = stack.pop() {
                for &w in &side.adjacency[v] {
                    if !seen[w] && open(w) {
                        seen[w] = true;
                        counts[side.labels[w]] += 1;
                        stack.push(w);
                    }
                }
            }
            counts
        };
        let c1 = reach(self.g1, &|v| self.map12[v] != UNMAPPED, &|v| self.allowed1(v));
        let c2 = reach(self.g2, &|v| self.map21[v] != UNMAPPED, &|v| self.map21[v] == UNMAPPED);
        self.size + c1.iter().zip(&c2).map(|(a, b)| a.min(b)).sum::<usize>()
    }

    fn consistent(&self, u: usize, v: usize) -> bool {
        if self.g1.labels[u] != self.g2.labels[v] || self.map21[v] != UNMAPPED {
            return false;
        }
        (0..self.g1.len()).all(|u2| {
            let v2 = self.map12[u2];
            v2 == UNMAPPED || self.g1.bonds[u][u2] == self.g2.bonds[v][v2]
        })
    }

    fn current_mapping(&self) -> Vec<(usize, usize)> {
        (0..self.g1.len())
            .filter(|&u| self.map12[u] != UNMAPPED)
            .map(|u| (u, self.map12[u]))
            .collect()
    }

    fn record(&mut self) {
        let better = self.size > self.best.len()
            || (self.size == self.best.len() && self.current_mapping() < self.best);
        if better {
            self.best = self.current_mapping();
            self.best_from_seed = true;
        }
    }

    fn grow(&mut self) {
        if self.truncated {
            return;
        }
        self.steps += 1;
        if self.steps > self.budget {
            self.truncated = true;
            return;
        }
        self.record();
        let bound = self.bound();
        if bound == self.size {
            return;
        }
        // ties only matter while the incumbent comes from this seed; later
        // seeds start with a lexicographically larger pair
        if bound < self.best.len() || (bound == self.best.len() && !self.best_from_seed) {
            return;
        }
        let frontier = (0..self.g1.len()).find(|&u| {
            self.allowed1(u)
                && self.g1.adjacency[u]
                    .iter()
                    .any(|&w| self.map12[w] != UNMAPPED)
        });
        let Some(u) = frontier else {
            return;
        };
        for v in 0..self.g2.len() {
            if self.consistent(u, v) {
                self.map12[u] = v;
                self.map21[v] = u;
                self.size += 1;
                self.grow();
                self.size -= 1;
                self.map12[u] = UNMAPPED;
                self.map21[v] = UNMAPPED;
            }
        }
        self.excluded[u] = true;
        self.grow();
        self.excluded[u] = false;
    }
}

/// Maximum connected common induced substructure under element+aromatic
/// atom matching and bond-order matching. Among maximum mappings the
/// lexicographically smallest `(g1, g2)` sequence is returned.
pub fn max_common_substructure(
    g1: &MolecularGraph,
    g2: &MolecularGraph,
    config: &PairGenConfig,
) -> McsResult {
    let s1 = Side::new(g1);
    let s2 = Side::new(g2);
    let (n1, n2) = (s1.len(), s2.len());
    let mut search = Search {
        g1: &s1,
        g2: &s2,
        map12: vec![UNMAPPED; n1],
        map21: vec![UNMAPPED; n2],
        excluded: vec![false; n1],
        seed: 0,
        size: 0,
        best: Vec::new(),
        best_from_seed: false,
        steps: 0,
        budget: config.mcs_node_budget,
        truncated: false,
    };
    'seeds: for a in 0..n1 {
        // every subgraph seeded at `a` uses only atoms >= a
        let remaining = n1 - a;
        if remaining < search.best.len() || (remaining == search.best.len() && !search.best.is_empty()) {
            break;
        }
        for b in 0..n2 {
            if s1.labels[a] != s2.labels[b] {
                continue;
            }
            search.seed = a;
            search.best_from_seed = false;
            search.map12[a] = b;
            search.map21[b] = a;
            search.size = 1;
            search.grow();
            search.map12[a] = UNMAPPED;
            search.map21[b] = UNMAPPED;
            search.size = 0;
            if search.truncated {
                break 'seeds;
            }
        }
    }
    let size = search.best.len();
    let fraction = |n: usize| if n == 0 { 0.0 } else { size as f64 / n as f64 };
    McsResult {
        fraction_1: fraction(n1),
        fraction_2: fraction(n2),
        size,
        mapping: search.best,
        truncated: search.truncated,
    }
}

/// Checks the structural contract of a mapping: injective, label
/// preserving, induced bond-order preserving and connected in g1.
pub fn is_valid_common_substructure(
    g1: &MolecularGraph,
    g2: &MolecularGraph,
    mapping: &[(usize, usize)],
) -> bool {
    let n1 = g1.num_atoms();
    let n2 = g2.num_atoms();
    let mut seen1 = vec![false; n1];
    let mut seen2 = vec![false; n2];
    for &(u, v) in mapping {
        if u >= n1 || v >= n2 || seen1[u] || seen2[v] || label(g1, u) != label(g2, v) {
            return false;
        }
        seen1[u] = true;
        seen2[v] = true;
    }
    let (b1, b2) = (g1.bond_table(), g2.bond_table());
    for &(u, v) in mapping {
        for &(u2, v2) in mapping {
            if b1[u][u2] != b2[v][v2] {
                return false;
            }
        }
    }
    if mapping.is_empty() {
        return true;
    }
    let mut reached = vec![false; n1];
    let mut stack = vec![mapping[0].0];
    reached[mapping[0].0] = true;
    while let Some(u) = stack.pop() {
        for (w, _) in g1.adjacency()[u].iter().copied() {
            if seen1[w] && !reached[w] {
                reached[w] = true;
                stack.push(w);
            }
        }
    }
    mapping.iter().all(|&(u, _)| reached[u])
}
