//! Planted-effect compounds: `scaffold + decoration`, with
//! `pIC50 = base(scaffold) + effect(decoration) + noise`.
//!
//! A decoration's effect is the sum of fixed per-element contributions of
//! its atoms, so a model can in principle recover atom-level signal.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Compound, PairsError};
use crate::molgraph::{parse_smiles, Element};

/// Scaffolds end on the attachment atom; a decoration written directly
/// after the scaffold bonds to it.
pub const SCAFFOLD_LIBRARY: [&str; 8] = [
    "c1ccc2ccccc2c1",
    "O=C(Nc1ccccc1)c1ccccc1",
    "c1ccc2[nH]ccc2c1",
    "C1CCN(CC1)C(=O)c1ccccc1",
    "CC(C)(C)OC(=O)Nc1ccccc1",
    "O=S(=O)(Nc1ccccc1)c1ccccc1",
    "c1ccc2ncccc2c1",
    "CN1CCN(CC1)c1ccccc1",
];

pub const DECORATION_LIBRARY: [&str; 24] = [
    "F",
    "Cl",
    "Br",
    "I",
    "O",
    "N",
    "C",
    "S",
    "CC",
    "OC",
    "NC",
    "SC",
    "C#N",
    "C(F)(F)F",
    "C(=O)O",
    "C(=O)N",
    "OCC",
    "N(C)C",
    "CCO",
    "CCN",
    "C(C)C",
    "OC(F)(F)F",
    "CCl",
    "S(=O)(=O)C",
];

/// Per-atom contribution of a decoration atom to pIC50.
pub fn element_contribution(element: Element) -> f64 {
    match element {
        Element::C => 0.2,
        Element::N => -0.9,
        Element::O => -0.6,
        Element::F => 0.8,
        Element::Cl => 1.3,
        Element::Br => 1.6,
        Element::I => 2.0,
        Element::S => 0.6,
        Element::B | Element::P | Element::Si => 0.0,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub scaffolds: usize,
    pub decorations: usize,
    pub noise_sd: f64,
    pub seed: u64,
    pub target_id: String,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            scaffolds: 4,
            decorations: 16,
            noise_sd: 0.1,
            seed: 0,
            target_id: "SYN1".to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedCompound {
    pub compound_id: String,
    pub scaffold: usize,
    pub decoration: usize,
    pub base: f64,
    pub effect: f64,
    pub noise: f64,
    /// Atom indices (in the compound graph) belonging to the decoration.
    pub decoration_atoms: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    pub compounds: Vec<Compound>,
    pub planted: Vec<PlantedCompound>,
    pub scaffold_bases: Vec<f64>,
    pub decoration_effects: Vec<f64>,
}

/// Every scaffold combined with every decoration, scaffold-major. Scaffold
/// bases are drawn uniformly from `[5, 7]`.
pub fn generate_synthetic_dataset(config: &SyntheticConfig) -> Result<SyntheticDataset, PairsError> {
    if config.scaffolds == 0 || config.scaffolds > SCAFFOLD_LIBRARY.len() {
        return Err(PairsError::Config(format!(
            "scaffolds must be in 1..={}, got {}",
            SCAFFOLD_LIBRARY.len(),
            config.scaffolds
        )));
    }
    if config.decorations == 0 || config.decorations > DECORATION_LIBRARY.len() {
        return Err(PairsError::Config(format!(
            "decorations must be in 1..={}, got {}",
            DECORATION_LIBRARY.len(),
            config.decorations
        )));
    }
    if !(config.noise_sd >= 0.0 && config.noise_sd.is_finite()) {
        return Err(PairsError::Config(format!(
            "noise_sd must be >= 0, got {}",
            config.noise_sd
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let scaffold_bases: Vec<f64> = (0..config.scaffolds)
        .map(|_| rng.random_range(5.0..7.0))
        .collect();
    let decoration_effects: Vec<f64> = DECORATION_LIBRARY[..config.decorations]
        .iter()
        .map(|d| {
            let g = parse_smiles(d).expect("library decoration parses");
            g.atoms.iter().map(|a| element_contribution(a.element)).sum()
        })
        .collect();
    let noise = Normal::new(0.0, config.noise_sd.max(f64::MIN_POSITIVE)).expect("finite sd");

    let mut compounds = Vec::new();
    let mut planted = Vec::new();
    for (s, scaffold) in SCAFFOLD_LIBRARY[..config.scaffolds].iter().enumerate() {
        let scaffold_atoms = parse_smiles(scaffold).expect("library scaffold parses").num_atoms();
        for (d, decoration) in DECORATION_LIBRARY[..config.decorations].iter().enumerate() {
            let smiles = format!("{scaffold}{decoration}");
            let graph = parse_smiles(&smiles).expect("scaffold + decoration parses");
            let eps = if config.noise_sd == 0.0 {
                0.0
            } else {
                noise.sample(&mut rng)
            };
            let id = format!("{}-s{s:02}-d{d:02}", config.target_id);
            let pic50 = scaffold_bases[s] + decoration_effects[d] + eps;
            planted.push(PlantedCompound {
                compound_id: id.clone(),
                scaffold: s,
                decoration: d,
                base: scaffold_bases[s],
                effect: decoration_effects[d],
                noise: eps,
                decoration_atoms: (scaffold_atoms..graph.num_atoms()).collect(),
            });
            compounds.push(Compound {
                id,
                target_id: config.target_id.clone(),
                graph,
                pic50,
            });
        }
    }
    Ok(SyntheticDataset {
        compounds,
        planted,
        scaffold_bases,
        decoration_effects,
    })
}
