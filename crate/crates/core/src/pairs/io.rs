use std::io::{BufRead, Read, Write};

use serde::{Deserialize, Serialize};

use super::{CliffPair, Compound, PairsError};
use crate::molgraph::{parse_smiles, SmilesError};

pub const PAIR_SCHEMA: &str = "cliffpair/1";
const COMPOUND_HEADER: [&str; 4] = ["compound_id", "target_id", "smiles", "ic50_nm"];

/// `9 - log10(IC50 / nM)`, i.e. `-log10` of the molar IC50.
pub fn pic50_from_ic50_nm(ic50_nm: f64) -> f64 {
    9.0 - ic50_nm.log10()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SkippedRow {
    /// 1-based data row (the header is row 0).
    pub row: usize,
    pub compound_id: String,
    pub error: SmilesError,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompoundTable {
    pub compounds: Vec<Compound>,
    pub skipped: Vec<SkippedRow>,
}

#[derive(Deserialize)]
struct CompoundRow {
    compound_id: String,
    target_id: String,
    smiles: String,
    ic50_nm: f64,
}

/// Reads `compound_id,target_id,smiles,ic50_nm`. Structural problems (bad
/// header, wrong field count, unparseable or non-positive IC50) fail with
/// the row number. SMILES that do not parse are skipped and reported, or
/// fail the read when `strict`.
pub fn read_compounds_csv<R: Read>(reader: R, strict: bool) -> Result<CompoundTable, PairsError> {
    let mut csv = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let header = csv.headers().map_err(|e| PairsError::Csv {
        row: 0,
        message: e.to_string(),
    })?;
    if header.iter().collect::<Vec<_>>() != COMPOUND_HEADER {
        return Err(PairsError::Csv {
            row: 0,
            message: format!("expected header {}", COMPOUND_HEADER.join(",")),
        });
    }
    let mut table = CompoundTable {
        compounds: Vec::new(),
        skipped: Vec::new(),
    };
    for (k, record) in csv.deserialize::<CompoundRow>().enumerate() {
        let row = k + 1;
        let rec = record.map_err(|e| PairsError::Csv {
            row,
            message: e.to_string(),
        })?;
        if !(rec.ic50_nm > 0.0 && rec.ic50_nm.is_finite()) {
            return Err(PairsError::Csv {
                row,
                message: format!("ic50_nm must be positive, got {}", rec.ic50_nm),
            });
        }
        if rec.compound_id.is_empty() || rec.target_id.is_empty() {
            return Err(PairsError::Csv {
                row,
                message: "empty compound_id or target_id".into(),
            });
        }
        match parse_smiles(&rec.smiles) {
            Ok(graph) => table.compounds.push(Compound {
                id: rec.compound_id,
                target_id: rec.target_id,
                graph,
                pic50: pic50_from_ic50_nm(rec.ic50_nm),
            }),
            Err(error) if strict => {
                return Err(PairsError::Csv {
                    row,
                    message: format!("compound {}: {error}", rec.compound_id),
                })
            }
            Err(error) => {
                log::warn!("row {row}: skipping compound {}: {error}", rec.compound_id);
                table.skipped.push(SkippedRow {
                    row,
                    compound_id: rec.compound_id,
                    error,
                });
            }
        }
    }
    Ok(table)
}

/// Writes compounds with `ic50_nm = 10^(9 - pIC50)`.
pub fn write_compounds_csv<W: Write>(writer: W, compounds: &[Compound]) -> Result<(), PairsError> {
    let mut csv = csv::Writer::from_writer(writer);
    let to_io = |e: csv::Error| PairsError::Io(std::io::Error::other(e));
    csv.write_record(COMPOUND_HEADER).map_err(to_io)?;
    for c in compounds {
        let ic50 = 10f64.powf(9.0 - c.pic50);
        csv.write_record([
            c.id.as_str(),
            c.target_id.as_str(),
            c.graph.source_smiles.as_str(),
            &ic50.to_string(),
        ])
        .map_err(to_io)?;
    }
    csv.flush()?;
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct PairRecord {
    schema: String,
    pair_id: String,
    target_id: String,
    compound_i: String,
    compound_j: String,
    smiles_i: String,
    smiles_j: String,
    y_i: f64,
    y_j: f64,
    common_mask_i: Vec<u8>,
    common_mask_j: Vec<u8>,
    uncommon_mask_i: Vec<u8>,
    uncommon_mask_j: Vec<u8>,
    mcs_fraction: f64,
    mapping: Vec<[usize; 2]>,
    mcs_truncated: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    manifest_hash: Option<String>,
}

fn bits(mask: &[bool]) -> Vec<u8> {
    mask.iter().map(|&b| b as u8).collect()
}

/// One JSON object per line, in slice order.
pub fn write_pairs_jsonl<W: Write>(
    mut writer: W,
    pairs: &[CliffPair],
    manifest_hash: Option<&str>,
) -> Result<(), PairsError> {
    for p in pairs {
        let record = PairRecord {
            schema: PAIR_SCHEMA.to_string(),
            pair_id: p.pair_id.clone(),
            target_id: p.target_id.clone(),
            compound_i: p.compound_i.clone(),
            compound_j: p.compound_j.clone(),
            smiles_i: p.graph_i.source_smiles.clone(),
            smiles_j: p.graph_j.source_smiles.clone(),
            y_i: p.y_i,
            y_j: p.y_j,
            common_mask_i: bits(&p.common_mask_i),
            common_mask_j: bits(&p.common_mask_j),
            uncommon_mask_i: bits(&p.uncommon_mask_i),
            uncommon_mask_j: bits(&p.uncommon_mask_j),
            mcs_fraction: p.mcs_fraction,
            mapping: p.mapping.iter().map(|&(u, v)| [u, v]).collect(),
            mcs_truncated: p.mcs_truncated,
            manifest_hash: manifest_hash.map(str::to_string),
        };
        serde_json::to_writer(&mut writer, &record).map_err(std::io::Error::other)?;
        writer.write_all(b"\n")?;
    }
    writer.flush()?;
    Ok(())
}

fn mask(bits: &[u8], expected: usize, what: &str) -> Result<Vec<bool>, String> {
    if bits.len() != expected {
        return Err(format!("{what} has {} entries, expected {expected}", bits.len()));
    }
    bits.iter()
        .map(|&b| match b {
            0 => Ok(false),
            1 => Ok(true),
            other => Err(format!("{what} contains {other}")),
        })
        .collect()
}

fn decode_record(record: PairRecord) -> Result<CliffPair, String> {
    if record.schema != PAIR_SCHEMA {
        return Err(format!("unsupported schema {:?}", record.schema));
    }
    let graph_i = parse_smiles(&record.smiles_i).map_err(|e| format!("smiles_i: {e}"))?;
    let graph_j = parse_smiles(&record.smiles_j).map_err(|e| format!("smiles_j: {e}"))?;
    let (ni, nj) = (graph_i.num_atoms(), graph_j.num_atoms());
    let common_mask_i = mask(&record.common_mask_i, ni, "common_mask_i")?;
    let common_mask_j = mask(&record.common_mask_j, nj, "common_mask_j")?;
    let uncommon_mask_i = mask(&record.uncommon_mask_i, ni, "uncommon_mask_i")?;
    let uncommon_mask_j = mask(&record.uncommon_mask_j, nj, "uncommon_mask_j")?;
    let complementary = |c: &[bool], u: &[bool]| c.iter().zip(u).all(|(a, b)| a != b);
    if !complementary(&common_mask_i, &uncommon_mask_i)
        || !complementary(&common_mask_j, &uncommon_mask_j)
    {
        return Err("common and uncommon masks are not complementary".into());
    }
    let mapping: Vec<(usize, usize)> = record.mapping.iter().map(|&[u, v]| (u, v)).collect();
    if mapping.iter().any(|&(u, v)| u >= ni || v >= nj) {
        return Err("mapping index out of range".into());
    }
    Ok(CliffPair {
        pair_id: record.pair_id,
        target_id: record.target_id,
        compound_i: record.compound_i,
        compound_j: record.compound_j,
        graph_i,
        graph_j,
        y_i: record.y_i,
        y_j: record.y_j,
        common_mask_i,
        common_mask_j,
        uncommon_mask_i,
        uncommon_mask_j,
        mcs_fraction: record.mcs_fraction,
        mapping,
        mcs_truncated: record.mcs_truncated,
    })
}

/// Reads a `cliffpair/1` file; blank lines are ignored.
pub fn read_pairs_jsonl<R: BufRead>(reader: R) -> Result<Vec<CliffPair>, PairsError> {
    let mut pairs = Vec::new();
    for (k, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fail = |message: String| PairsError::Jsonl {
            line: k + 1,
            message,
        };
        let record: PairRecord = serde_json::from_str(&line).map_err(|e| fail(e.to_string()))?;
        pairs.push(decode_record(record).map_err(fail)?);
    }
    Ok(pairs)
}
