//! Regression metrics, attribution scores, the Wilcoxon signed-rank test
//! and the MCS-threshold sweep.

use std::collections::BTreeMap;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

use crate::attribution::{
    attribute_nodes, ground_truth, AttributionConfig, AttributionError, AttributionMap,
    GroundTruthColoring, Method,
};
use crate::model::{GraphInput, MpnnModel};
use crate::pairs::{filter_by_threshold, CliffPair};

pub const SWEEP_SCHEMA: &str = "sweep-report/1";

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("series lengths differ: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("{needed} points needed, got {got}")]
    TooFewPoints { needed: usize, got: usize },
    #[error("correlation undefined for a constant series")]
    UndefinedCorrelation,
    #[error("all paired differences are zero")]
    AllZeroDifferences,
    #[error("no targets to aggregate")]
    NoTargets,
    #[error("threshold list is empty")]
    NoThresholds,
    #[error(transparent)]
    Attribution(#[from] AttributionError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn check_lengths(pred: &[f64], truth: &[f64], needed: usize) -> Result<(), MetricError> {
    if pred.len() != truth.len() {
        return Err(MetricError::LengthMismatch(pred.len(), truth.len()));
    }
    if pred.len() < needed {
        return Err(MetricError::TooFewPoints {
            needed,
            got: pred.len(),
        });
    }
    Ok(())
}

pub fn rmse(pred: &[f64], truth: &[f64]) -> Result<f64, MetricError> {
    check_lengths(pred, truth, 2)?;
    let sse: f64 = pred.iter().zip(truth).map(|(p, t)| (p - t).powi(2)).sum();
    Ok((sse / pred.len() as f64).sqrt())
}

/// Pearson correlation.
pub fn pcc(pred: &[f64], truth: &[f64]) -> Result<f64, MetricError> {
    check_lengths(pred, truth, 2)?;
    let n = pred.len() as f64;
    let mp = pred.iter().sum::<f64>() / n;
    let mt = truth.iter().sum::<f64>() / n;
    let (mut cov, mut vp, mut vt) = (0.0, 0.0, 0.0);
    for (p, t) in pred.iter().zip(truth) {
        cov += (p - mp) * (t - mt);
        vp += (p - mp).powi(2);
        vt += (t - mt).powi(2);
    }
    if vp == 0.0 || vt == 0.0 {
        return Err(MetricError::UndefinedCorrelation);
    }
    Ok((cov / (vp.sqrt() * vt.sqrt())).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetMetrics {
    pub target_id: String,
    pub rmse: f64,
    pub pcc: f64,
    /// Test pairs of the target; the aggregation weight.
    pub n_pairs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub per_target: Vec<TargetMetrics>,
    pub avg_rmse: f64,
    pub avg_pcc: f64,
    pub weighted_rmse: f64,
    pub weighted_pcc: f64,
}

/// Equal-weight and pair-count-weighted means over targets.
pub fn aggregate(per_target: &[TargetMetrics]) -> Result<MetricReport, MetricError> {
    if per_target.is_empty() {
        return Err(MetricError::NoTargets);
    }
    let k = per_target.len() as f64;
    let total: usize = per_target.iter().map(|t| t.n_pairs).sum();
    let weighted = |f: &dyn Fn(&TargetMetrics) -> f64| {
        if total == 0 {
            per_target.iter().map(f).sum::<f64>() / k
        } else {
            per_target.iter().map(|t| f(t) * t.n_pairs as f64).sum::<f64>() / total as f64
        }
    };
    Ok(MetricReport {
        per_target: per_target.to_vec(),
        avg_rmse: per_target.iter().map(|t| t.rmse).sum::<f64>() / k,
        avg_pcc: per_target.iter().map(|t| t.pcc).sum::<f64>() / k,
        weighted_rmse: weighted(&|t| t.rmse),
        weighted_pcc: weighted(&|t| t.pcc),
    })
}

fn uncommon_mean(values: &[f64], mask: &[bool]) -> f64 {
    let (sum, count) = values
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .fold((0.0, 0usize), |(s, c), (v, _)| (s + v, c + 1));
    if count == 0 {
        0.0
    } else {
        sum / count as f64
    }
}

fn sign(x: f64) -> i8 {
    if x > 0.0 {
        1
    } else if x < 0.0 {
        -1
    } else {
        0
    }
}

/// 1 when the uncommon-atom attribution means order the pair like its
/// activities; a zero difference never counts as a match.
pub fn global_direction(pair: &CliffPair, map_i: &AttributionMap, map_j: &AttributionMap) -> u8 {
    debug_assert!(map_i.edge_values.is_empty() && map_j.edge_values.is_empty());
    let s_i = uncommon_mean(&map_i.node_values, &pair.uncommon_mask_i);
    let s_j = uncommon_mean(&map_j.node_values, &pair.uncommon_mask_j);
    let predicted = sign(s_i - s_j);
    (predicted != 0 && predicted == sign(pair.y_i - pair.y_j)) as u8
}

/// Fraction of labelled atoms whose attribution sign matches the label, or
/// `None` when no atom is labelled.
pub fn atom_accuracy(map: &AttributionMap, truth: &GroundTruthColoring) -> Option<f64> {
    let labelled: Vec<(f64, i8)> = map
        .node_values
        .iter()
        .zip(&truth.labels)
        .filter(|(_, &l)| l != 0)
        .map(|(&v, &l)| (v, l))
        .collect();
    if labelled.is_empty() {
        return None;
    }
    let hits = labelled.iter().filter(|(v, l)| sign(*v) == *l).count();
    Some(hits as f64 / labelled.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WilcoxonResult {
    /// `min(W+, W-)`.
    pub statistic: f64,
    pub p_value: f64,
    pub n_effective: usize,
    pub exact: bool,
}

/// Largest effective sample size handled by exact enumeration.
pub const WILCOXON_EXACT_MAX: usize = 25;

/// Two-sided Wilcoxon signed-rank test on `x - y`. Zero differences are
/// dropped and tied magnitudes share mid-ranks. Exact for up to 25
/// non-zero differences, otherwise the tie-corrected normal approximation
/// with continuity correction.
pub fn wilcoxon_signed_rank(x: &[f64], y: &[f64]) -> Result<WilcoxonResult, MetricError> {
    check_lengths(x, y, 1)?;
    let mut diffs: Vec<f64> = x.iter().zip(y).map(|(a, b)| a - b).filter(|d| *d != 0.0).collect();
    if diffs.is_empty() {
        return Err(MetricError::AllZeroDifferences);
    }
    diffs.sort_by(|a, b| a.abs().total_cmp(&b.abs()));
    let n = diffs.len();
    // ranks are doubled so that mid-ranks stay integral
    let mut ranks2 = vec![0u64; n];
    let mut tie_term = 0.0;
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && diffs[j + 1].abs() == diffs[i].abs() {
            j += 1;
        }
        for r in &mut ranks2[i..=j] {
            *r = (i + j + 2) as u64;
        }
        let t = (j - i + 1) as f64;
        tie_term += t * t * t - t;
        i = j + 1;
    }
    let total2: u64 = ranks2.iter().sum();
    let plus2: u64 = diffs
        .iter()
        .zip(&ranks2)
        .filter(|(d, _)| **d > 0.0)
        .map(|(_, r)| r)
        .sum();
    let w2 = plus2.min(total2 - plus2);
    let statistic = w2 as f64 / 2.0;

    if n <= WILCOXON_EXACT_MAX {
        // counts[s]: sign assignments whose doubled positive-rank sum is s
        let mut counts = vec![0u64; total2 as usize + 1];
        counts[0] = 1;
        let mut reach = 0usize;
        for &r in &ranks2 {
            let r = r as usize;
            for s in (0..=reach).rev() {
                if counts[s] != 0 {
                    counts[s + r] += counts[s];
                }
            }
            reach += r;
        }
        let tail: u64 = counts[..=w2 as usize].iter().sum();
        let p = (2.0 * tail as f64 / 2f64.powi(n as i32)).min(1.0);
        return Ok(WilcoxonResult {
            statistic,
            p_value: p,
            n_effective: n,
            exact: true,
        });
    }
    let nf = n as f64;
    let mean = nf * (nf + 1.0) / 4.0;
    let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie_term / 48.0;
    let z = ((statistic - mean).abs() - 0.5).max(0.0) / var.sqrt();
    let normal = Normal::standard();
    Ok(WilcoxonResult {
        statistic,
        p_value: (2.0 * normal.cdf(-z)).min(1.0),
        n_effective: n,
        exact: false,
    })
}

/// `0.50, 0.55, ..., 0.95`.
pub fn default_thresholds() -> Vec<f64> {
    (0..10).map(|k| (50 + 5 * k) as f64 / 100.0).collect()
}

/// Redistributed attribution maps keyed by compound id then method.
pub type CompoundMaps = BTreeMap<String, BTreeMap<Method, AttributionMap>>;

/// Attribution maps for every compound appearing in `pairs`.
pub fn compound_maps(
    model: &MpnnModel,
    model_ref: &str,
    pairs: &[CliffPair],
    methods: &[Method],
    config: &AttributionConfig,
) -> Result<CompoundMaps, MetricError> {
    let mut graphs = BTreeMap::new();
    for p in pairs {
        graphs.entry(p.compound_i.clone()).or_insert(&p.graph_i);
        graphs.entry(p.compound_j.clone()).or_insert(&p.graph_j);
    }
    let jobs: Vec<(&String, GraphInput, Method)> = graphs
        .iter()
        .flat_map(|(id, g)| {
            let input = GraphInput::from_graph(g);
            methods.iter().map(move |&m| (id, input.clone(), m))
        })
        .collect();
    let maps: Vec<AttributionMap> = jobs
        .par_iter()
        .map(|(_, input, m)| attribute_nodes(model, input, *m, config, model_ref))
        .collect::<Result<_, _>>()?;
    let mut out: CompoundMaps = BTreeMap::new();
    for ((id, _, m), map) in jobs.iter().zip(maps) {
        out.entry((*id).clone()).or_default().insert(*m, map);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirectionPoint {
    pub threshold: f64,
    pub method: Method,
    pub mean_g_dir: f64,
    /// Mean atom accuracy over both compounds of each pair, skipping
    /// compounds without labelled atoms; `None` if no compound qualifies.
    pub mean_atom_accuracy: Option<f64>,
    pub n_pairs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirectionReport {
    pub model: String,
    pub model_ref: String,
    pub points: Vec<DirectionPoint>,
}

impl DirectionReport {
    /// Per-threshold means of `method`, in threshold order.
    pub fn series(&self, method: Method) -> Vec<f64> {
        self.points
            .iter()
            .filter(|p| p.method == method)
            .map(|p| p.mean_g_dir)
            .collect()
    }
}

/// Scores one model over the threshold grid from precomputed maps.
/// Thresholds without surviving pairs are returned separately.
pub fn direction_report(
    label: &str,
    model_ref: &str,
    pairs: &[CliffPair],
    maps: &CompoundMaps,
    methods: &[Method],
    thresholds: &[f64],
) -> (DirectionReport, Vec<f64>) {
    let mut points = Vec::new();
    let mut skipped = Vec::new();
    for &t in thresholds {
        let kept = filter_by_threshold(pairs, t);
        if kept.is_empty() {
            skipped.push(t);
            continue;
        }
        for &method in methods {
            let mut hits = 0usize;
            let mut accuracy = Vec::new();
            for p in &kept {
                let (mi, mj) = (&maps[&p.compound_i][&method], &maps[&p.compound_j][&method]);
                hits += global_direction(p, mi, mj) as usize;
                if let Ok((ti, tj)) = ground_truth(p) {
                    accuracy.extend(atom_accuracy(mi, &ti));
                    accuracy.extend(atom_accuracy(mj, &tj));
                }
            }
            points.push(DirectionPoint {
                threshold: t,
                method,
                mean_g_dir: hits as f64 / kept.len() as f64,
                mean_atom_accuracy: (!accuracy.is_empty())
                    .then(|| accuracy.iter().sum::<f64>() / accuracy.len() as f64),
                n_pairs: kept.len(),
            });
        }
    }
    (
        DirectionReport {
            model: label.to_string(),
            model_ref: model_ref.to_string(),
            points,
        },
        skipped,
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodComparison {
    pub method: Method,
    pub sweep_mean_a: f64,
    pub sweep_mean_b: f64,
    /// `100 * (b - a) / a`; `None` when `a` is zero.
    pub percent_change: Option<f64>,
    pub wilcoxon: Option<WilcoxonResult>,
    /// Why `wilcoxon` is missing, e.g. identical series.
    pub wilcoxon_error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub schema: String,
    pub thresholds: Vec<f64>,
    pub skipped_thresholds: Vec<f64>,
    pub model_a: DirectionReport,
    pub model_b: DirectionReport,
    pub comparisons: Vec<MethodComparison>,
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Compares two models over the threshold grid: per method, the sweep
/// means, their percent change and a Wilcoxon test over the paired
/// per-threshold means (`b` against `a`).
pub fn compare_direction_reports(
    a: DirectionReport,
    b: DirectionReport,
    methods: &[Method],
    thresholds: &[f64],
    skipped: Vec<f64>,
) -> SweepReport {
    let comparisons = methods
        .iter()
        .map(|&method| {
            let (sa, sb) = (a.series(method), b.series(method));
            let (ma, mb) = (mean(&sa), mean(&sb));
            let test = wilcoxon_signed_rank(&sb, &sa);
            MethodComparison {
                method,
                sweep_mean_a: ma,
                sweep_mean_b: mb,
                percent_change: (ma != 0.0).then(|| 100.0 * (mb - ma) / ma),
                wilcoxon_error: test.as_ref().err().map(|e| e.to_string()),
                wilcoxon: test.ok(),
            }
        })
        .collect();
    SweepReport {
        schema: SWEEP_SCHEMA.to_string(),
        thresholds: thresholds.to_vec(),
        skipped_thresholds: skipped,
        model_a: a,
        model_b: b,
        comparisons,
    }
}

/// Full sweep: attributions for both models, per-threshold direction
/// scores and the paired comparison.
#[allow(clippy::too_many_arguments)]
pub fn threshold_sweep(
    test_pairs: &[CliffPair],
    model_a: (&str, &MpnnModel, &str),
    model_b: (&str, &MpnnModel, &str),
    methods: &[Method],
    thresholds: &[f64],
    config: &AttributionConfig,
) -> Result<SweepReport, MetricError> {
    if thresholds.is_empty() {
        return Err(MetricError::NoThresholds);
    }
    let (label_a, ma, ref_a) = model_a;
    let (label_b, mb, ref_b) = model_b;
    let maps_a = compound_maps(ma, ref_a, test_pairs, methods, config)?;
    let maps_b = compound_maps(mb, ref_b, test_pairs, methods, config)?;
    let (ra, skipped) = direction_report(label_a, ref_a, test_pairs, &maps_a, methods, thresholds);
    let (rb, _) = direction_report(label_b, ref_b, test_pairs, &maps_b, methods, thresholds);
    Ok(compare_direction_reports(ra, rb, methods, thresholds, skipped))
}

/// Flat plotting table: `threshold,method,model,mean_g_dir,n_pairs`.
pub fn write_sweep_csv<W: Write>(writer: W, reports: &[&DirectionReport]) -> Result<(), MetricError> {
    let mut csv = csv::Writer::from_writer(writer);
    let to_io = |e: csv::Error| MetricError::Io(std::io::Error::other(e));
    csv.write_record(["threshold", "method", "model", "mean_g_dir", "n_pairs"])
        .map_err(to_io)?;
    for report in reports {
        for p in &report.points {
            csv.write_record([
                p.threshold.to_string(),
                p.method.name().to_string(),
                report.model.clone(),
                p.mean_g_dir.to_string(),
                p.n_pairs.to_string(),
            ])
            .map_err(to_io)?;
        }
    }
    csv.flush()?;
    Ok(())
}
