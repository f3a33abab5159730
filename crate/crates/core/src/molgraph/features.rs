use serde::{Deserialize, Serialize};

use super::{Element, MolecularGraph};

/// element (11) + degree 0..=5 (6) + charge {-1, 0, +1} (3) + aromatic (1)
/// + explicit H 0..=4 (5)
pub const ATOM_FEATURE_WIDTH: usize = 26;
/// bond order (4) + in_ring (1)
pub const BOND_FEATURE_WIDTH: usize = 5;

const DEGREE_OFFSET: usize = 11;
const CHARGE_OFFSET: usize = DEGREE_OFFSET + 6;
const AROMATIC_OFFSET: usize = CHARGE_OFFSET + 3;
const HYDROGEN_OFFSET: usize = AROMATIC_OFFSET + 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureConfig {
    pub atom_feature_width: usize,
    pub bond_feature_width: usize,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig {
            atom_feature_width: ATOM_FEATURE_WIDTH,
            bond_feature_width: BOND_FEATURE_WIDTH,
        }
    }
}

/// Directed edge features: bond `b` emits edge `2b` (first endpoint to
/// second) and `2b + 1` (reverse), both with the same feature row.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeFeatures {
    /// Row-major `(2 * num_bonds) x BOND_FEATURE_WIDTH`.
    pub values: Vec<f64>,
    /// `(source, target)` per directed edge.
    pub edges: Vec<(usize, usize)>,
}

impl EdgeFeatures {
    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn row(&self, edge: usize) -> &[f64] {
        &self.values[edge * BOND_FEATURE_WIDTH..(edge + 1) * BOND_FEATURE_WIDTH]
    }
}

/// Row-major `num_atoms x ATOM_FEATURE_WIDTH` node feature matrix.
pub fn atom_features(graph: &MolecularGraph) -> Vec<f64> {
    let n = graph.num_atoms();
    let mut degree = vec![0usize; n];
    for bond in &graph.bonds {
        degree[bond.endpoints.0] += 1;
        degree[bond.endpoints.1] += 1;
    }
    let mut out = vec![0.0; n * ATOM_FEATURE_WIDTH];
    for (v, atom) in graph.atoms.iter().enumerate() {
        let row = &mut out[v * ATOM_FEATURE_WIDTH..(v + 1) * ATOM_FEATURE_WIDTH];
        debug_assert!(Element::ALL.contains(&atom.element));
        row[atom.element.index()] = 1.0;
        row[DEGREE_OFFSET + degree[v].min(5)] = 1.0;
        row[CHARGE_OFFSET + (atom.formal_charge.clamp(-1, 1) + 1) as usize] = 1.0;
        if atom.aromatic {
            row[AROMATIC_OFFSET] = 1.0;
        }
        row[HYDROGEN_OFFSET + (atom.explicit_h as usize).min(4)] = 1.0;
    }
    out
}

pub fn bond_features(graph: &MolecularGraph) -> EdgeFeatures {
    let mut values = Vec::with_capacity(graph.num_bonds() * 2 * BOND_FEATURE_WIDTH);
    let mut edges = Vec::with_capacity(graph.num_bonds() * 2);
    for bond in &graph.bonds {
        let mut row = [0.0; BOND_FEATURE_WIDTH];
        row[bond.order.index()] = 1.0;
        if bond.in_ring {
            row[4] = 1.0;
        }
        let (u, v) = bond.endpoints;
        for edge in [(u, v), (v, u)] {
            values.extend_from_slice(&row);
            edges.push(edge);
        }
    }
    EdgeFeatures { values, edges }
}
