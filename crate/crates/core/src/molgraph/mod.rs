//! Molecular graphs parsed from SMILES and their fixed-width featurization.
//!
//! The parser is structural: it checks the grammar, materializes ring
//! closures, and flags ring bonds, but it does not sanitize valences or
//! perceive aromaticity beyond what the text spells out (lowercase atoms and
//! `:` bonds).

mod features;
mod smiles;

pub use features::{
    atom_features, bond_features, EdgeFeatures, FeatureConfig, ATOM_FEATURE_WIDTH,
    BOND_FEATURE_WIDTH,
};
pub use smiles::{parse_smiles, SmilesError, SmilesErrorKind};

use std::fmt;

use serde::{Deserialize, Serialize};

/// Elements accepted by the parser, in feature one-hot order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Element {
    B,
    C,
    N,
    O,
    P,
    S,
    F,
    Cl,
    Br,
    I,
    Si,
}

impl Element {
    pub const ALL: [Element; 11] = [
        Element::B,
        Element::C,
        Element::N,
        Element::O,
        Element::P,
        Element::S,
        Element::F,
        Element::Cl,
        Element::Br,
        Element::I,
        Element::Si,
    ];

    pub fn symbol(self) -> &'static str {
        match self {
            Element::B => "B",
            Element::C => "C",
            Element::N => "N",
            Element::O => "O",
            Element::P => "P",
            Element::S => "S",
            Element::F => "F",
            Element::Cl => "Cl",
            Element::Br => "Br",
            Element::I => "I",
            Element::Si => "Si",
        }
    }

    pub fn from_symbol(symbol: &str) -> Option<Element> {
        Element::ALL.iter().copied().find(|e| e.symbol() == symbol)
    }

    /// Position of this element in the one-hot block.
    pub fn index(self) -> usize {
        self as usize
    }

    /// Whether a lowercase (aromatic) spelling exists in the supported grammar.
    pub fn can_be_aromatic(self) -> bool {
        matches!(
            self,
            Element::B | Element::C | Element::N | Element::O | Element::P | Element::S
        )
    }
}

impl fmt::Display for Element {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.symbol())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Atom {
    pub element: Element,
    pub formal_charge: i8,
    pub aromatic: bool,
    /// Hydrogen count written inside a bracket atom. Organic-subset atoms
    /// carry zero: hydrogens are never inferred from valence.
    pub explicit_h: u8,
}

impl Atom {
    pub fn new(element: Element) -> Self {
        Atom {
            element,
            formal_charge: 0,
            aromatic: false,
            explicit_h: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BondOrder {
    Single,
    Double,
    Triple,
    Aromatic,
}

impl BondOrder {
    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Bond {
    pub endpoints: (usize, usize),
    pub order: BondOrder,
    pub in_ring: bool,
}

impl Bond {
    /// The atom on the other side of the bond, if `atom` is an endpoint.
    pub fn other(&self, atom: usize) -> Option<usize> {
        match self.endpoints {
            (a, b) if a == atom => Some(b),
            (a, b) if b == atom => Some(a),
            _ => None,
        }
    }
}

/// A connected molecule. Atom order follows the left-to-right order of atom
/// tokens in `source_smiles`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MolecularGraph {
    pub atoms: Vec<Atom>,
    pub bonds: Vec<Bond>,
    pub source_smiles: String,
}

impl MolecularGraph {
    pub fn num_atoms(&self) -> usize {
        self.atoms.len()
    }

    pub fn num_bonds(&self) -> usize {
        self.bonds.len()
    }

    /// Neighbor lists as (neighbor, bond index), in bond order.
    pub fn adjacency(&self) -> Vec<Vec<(usize, usize)>> {
        let mut adj = vec![Vec::new(); self.atoms.len()];
        for (b, bond) in self.bonds.iter().enumerate() {
            let (u, v) = bond.endpoints;
            adj[u].push((v, b));
            adj[v].push((u, b));
        }
        adj
    }

    /// Dense bond lookup: `table[u][v]` is the order of the bond between
    /// `u` and `v`, if any.
    pub fn bond_table(&self) -> Vec<Vec<Option<BondOrder>>> {
        let n = self.atoms.len();
        let mut table = vec![vec![None; n]; n];
        for bond in &self.bonds {
            let (u, v) = bond.endpoints;
            table[u][v] = Some(bond.order);
            table[v][u] = Some(bond.order);
        }
        table
    }

    pub fn degree(&self, atom: usize) -> usize {
        self.bonds
            .iter()
            .filter(|b| b.endpoints.0 == atom || b.endpoints.1 == atom)
            .count()
    }

    pub fn is_connected(&self) -> bool {
        if self.atoms.is_empty() {
            return true;
        }
        let adj = self.adjacency();
        let mut seen = vec![false; self.atoms.len()];
        let mut stack = vec![0];
        seen[0] = true;
        while let Some(u) = stack.pop() {
            for &(v, _) in &adj[u] {
                if !seen[v] {
                    seen[v] = true;
                    stack.push(v);
                }
            }
        }
        seen.into_iter().all(|s| s)
    }

    /// Returns a copy with atoms reordered so that new atom `i` is old atom
    /// `order[i]`. Bond list order is preserved; endpoints are remapped.
    pub fn permuted(&self, order: &[usize]) -> MolecularGraph {
        assert_eq!(order.len(), self.atoms.len(), "permutation length");
        let mut inverse = vec![usize::MAX; order.len()];
        for (new, &old) in order.iter().enumerate() {
            inverse[old] = new;
        }
        MolecularGraph {
            atoms: order.iter().map(|&old| self.atoms[old].clone()).collect(),
            bonds: self
                .bonds
                .iter()
                .map(|b| Bond {
                    endpoints: (inverse[b.endpoints.0], inverse[b.endpoints.1]),
                    order: b.order,
                    in_ring: b.in_ring,
                })
                .collect(),
            source_smiles: self.source_smiles.clone(),
        }
    }
}

/// Marks every bond that lies on a cycle. A bond is a ring bond exactly when
/// removing it keeps its endpoints connected.
pub(crate) fn ring_bonds(num_atoms: usize, bonds: &[(usize, usize)]) -> Vec<bool> {
    let mut adj = vec![Vec::new(); num_atoms];
    for (b, &(u, v)) in bonds.iter().enumerate() {
        adj[u].push((v, b));
        adj[v].push((u, b));
    }
    bonds
        .iter()
        .enumerate()
        .map(|(skip, &(start, goal))| {
            let mut seen = vec![false; num_atoms];
            let mut stack = vec![start];
            seen[start] = true;
            while let Some(u) = stack.pop() {
                if u == goal {
                    return true;
                }
                for &(v, b) in &adj[u] {
                    if b != skip && !seen[v] {
                        seen[v] = true;
                        stack.push(v);
                    }
                }
            }
            false
        })
        .collect()
}
