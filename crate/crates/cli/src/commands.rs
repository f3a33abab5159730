//! Subcommand implementations. Each one snapshots its resolved arguments in
//! a run manifest before writing outputs that embed the manifest hash.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use log::{info, warn};
use serde::{Deserialize, Serialize};

use cliffkit::attribution::{attribute_nodes, ground_truth, AttributionConfig, Method};
use cliffkit::evaluation::{
    aggregate, default_thresholds, pcc, rmse, threshold_sweep, write_sweep_csv, MetricReport,
    SweepReport, TargetMetrics,
};
use cliffkit::losses::{LossConfig, LossVariant};
use cliffkit::model::{
    checkpoint_hash, decode_checkpoint, encode_checkpoint, BatchNormMode, GraphInput, ModelConfig,
    MpnnModel,
};
use cliffkit::pairs::{
    generate_cliff_pairs, generate_synthetic_dataset, read_compounds_csv, read_pairs_jsonl,
    split_pairs, split_pairs_compound_disjoint, write_compounds_csv, write_pairs_jsonl, CliffPair,
    DatasetSplit, PairGenConfig, SyntheticConfig, TargetSummary,
};
use cliffkit::training::{evaluate_split, predict_split, train, TrainConfig};

use crate::failure::{Failure, Outcome};
use crate::manifest::{sidecar, RunManifest};
use crate::render::{normalize_values, render_svg, spring_layout, Panel};

pub const PAIRS_SUMMARY_SCHEMA: &str = "pairs-summary/1";
pub const EVAL_REPORT_SCHEMA: &str = "eval-report/1";
pub const ATTRIBUTION_SCHEMA: &str = "attribution/1";

fn write_json<T: Serialize>(path: &Path, value: &T) -> Outcome<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    fs::write(path, bytes).map_err(|e| Failure::input(e).context(format!("writing {}", path.display())))
}

fn create(path: &Path) -> Outcome<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Failure::input(e).context(format!("creating {}", path.display())))
}

fn open(path: &Path) -> Outcome<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| Failure::input(e).context(format!("opening {}", path.display())))
}

fn load_pairs(path: &Path) -> Outcome<Vec<CliffPair>> {
    read_pairs_jsonl(open(path)?).map_err(|e| Failure::input(e).context(format!("reading {}", path.display())))
}

fn load_model(path: &Path) -> Outcome<(MpnnModel, Option<LossConfig>, String)> {
    let bytes = fs::read(path).map_err(|e| Failure::input(e).context(format!("reading {}", path.display())))?;
    let checkpoint = decode_checkpoint(&bytes).map_err(|e| Failure::from(e).context(format!("loading {}", path.display())))?;
    Ok((checkpoint.model, checkpoint.loss_config, checkpoint_hash(&bytes)))
}

fn ratios(values: &[f64]) -> Outcome<(f64, f64, f64)> {
    match values {
        [a, b, c] => Ok((*a, *b, *c)),
        _ => Err(Failure::input(anyhow::anyhow!(
            "--split takes three comma-separated ratios, got {}",
            values.len()
        ))),
    }
}

fn parse_methods(names: &[String]) -> Outcome<Vec<Method>> {
    names.iter().map(|n| Method::parse(n).map_err(Failure::from)).collect()
}

/// Options shared by every subcommand that re-derives the dataset split.
#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct SplitArgs {
    /// Train, validation and test ratios.
    #[arg(long = "split", value_delimiter = ',', default_values_t = [0.7, 0.1, 0.2])]
    pub ratios: Vec<f64>,
    /// Assign whole compounds to one part, discarding pairs that straddle parts.
    #[arg(long)]
    pub disjoint: bool,
}

fn make_split(pairs: &[CliffPair], args: &SplitArgs, seed: u64) -> Outcome<DatasetSplit> {
    let r = ratios(&args.ratios)?;
    if args.disjoint {
        let (split, discarded) = split_pairs_compound_disjoint(pairs, r, seed)?;
        info!("compound-disjoint split discarded {discarded} pairs");
        Ok(split)
    } else {
        Ok(split_pairs(pairs, r, seed)?)
    }
}

// ---------------------------------------------------------------- generate

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct GenerateArgs {
    /// Compounds CSV to write.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 4)]
    pub scaffolds: usize,
    #[arg(long, default_value_t = 16)]
    pub decorations: usize,
    /// Standard deviation of the pIC50 noise.
    #[arg(long, default_value_t = 0.1)]
    pub noise_sd: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "SYN1")]
    pub target_id: String,
}

pub fn generate(args: &GenerateArgs) -> Outcome<()> {
    let manifest_path = sidecar(&args.out, "manifest.json");
    let manifest = RunManifest::new("generate", args, Some(args.seed), &[], vec![args.out.clone()])?;
    let data = generate_synthetic_dataset(&SyntheticConfig {
        scaffolds: args.scaffolds,
        decorations: args.decorations,
        noise_sd: args.noise_sd,
        seed: args.seed,
        target_id: args.target_id.clone(),
    })?;
    manifest.write(&manifest_path)?;
    let mut w = create(&args.out)?;
    write_compounds_csv(&mut w, &data.compounds)?;
    w.flush()?;
    println!("wrote {} compounds to {}", data.compounds.len(), args.out.display());
    Ok(())
}

// ------------------------------------------------------------------- pairs

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct PairsArgs {
    /// Input CSV with header `compound_id,target_id,smiles,ic50_nm`.
    #[arg(long)]
    pub compounds: PathBuf,
    /// Cliff-pair JSONL to write; a summary goes to `<out>.summary.json`.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    pub min_fraction: f64,
    #[arg(long, default_value_t = 1.0)]
    pub min_delta: f64,
    #[arg(long, default_value_t = 50)]
    pub min_pairs: usize,
    /// Search steps per MCS before keeping the best mapping found.
    #[arg(long, default_value_t = 2_000_000)]
    pub mcs_budget: u64,
    /// Fail on SMILES that do not parse instead of skipping them.
    #[arg(long)]
    pub strict: bool,
}

#[derive(Serialize)]
struct SkippedRecord {
    row: usize,
    compound_id: String,
    error: String,
}

#[derive(Serialize)]
struct PairsSummary {
    schema: &'static str,
    manifest_hash: String,
    config: PairGenConfig,
    n_compounds: usize,
    n_pairs: usize,
    targets: BTreeMap<String, TargetSummary>,
    skipped_rows: Vec<SkippedRecord>,
}

pub fn pairs(args: &PairsArgs) -> Outcome<()> {
    let summary_path = sidecar(&args.out, "summary.json");
    let manifest_path = sidecar(&args.out, "manifest.json");
    let manifest = RunManifest::new(
        "pairs",
        args,
        None,
        &[&args.compounds],
        vec![args.out.clone(), summary_path.clone()],
    )?;
    let table = read_compounds_csv(open(&args.compounds)?, args.strict)
        .map_err(|e| Failure::input(e).context(format!("reading {}", args.compounds.display())))?;
    for s in &table.skipped {
        warn!("row {} ({}): skipped, {}", s.row, s.compound_id, s.error);
    }
    let config = PairGenConfig {
        min_mcs_fraction: args.min_fraction,
        min_delta: args.min_delta,
        min_pairs_per_target: args.min_pairs,
        mcs_node_budget: args.mcs_budget,
    };
    let generation = generate_cliff_pairs(&table.compounds, &config)?;
    let hash = manifest.write(&manifest_path)?;
    let mut w = create(&args.out)?;
    write_pairs_jsonl(&mut w, &generation.pairs, Some(&hash))?;
    w.flush()?;
    for (target, t) in &generation.targets {
        if t.dropped {
            warn!("target {target}: dropped with {} pairs (< {})", t.kept, args.min_pairs);
        }
        if t.truncated_mcs > 0 {
            warn!("target {target}: {} MCS searches hit the step budget", t.truncated_mcs);
        }
    }
    write_json(
        &summary_path,
        &PairsSummary {
            schema: PAIRS_SUMMARY_SCHEMA,
            manifest_hash: hash,
            config,
            n_compounds: table.compounds.len(),
            n_pairs: generation.pairs.len(),
            targets: generation.targets,
            skipped_rows: table
                .skipped
                .iter()
                .map(|s| SkippedRecord {
                    row: s.row,
                    compound_id: s.compound_id.clone(),
                    error: s.error.to_string(),
                })
                .collect(),
        },
    )?;
    println!(
        "wrote {} pairs from {} compounds to {}",
        generation.pairs.len(),
        table.compounds.len(),
        args.out.display()
    );
    Ok(())
}

// ------------------------------------------------------------------- train

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BatchNormArg {
    Centered,
    Standard,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct TrainArgs {
    #[arg(long)]
    pub pairs: PathBuf,
    #[arg(long, value_parser = ["ucn", "n", "n-gl", "n-sgl"], default_value = "n")]
    pub variant: String,
    #[arg(long, default_value_t = 1e-3)]
    pub lambda: f64,
    #[arg(long, default_value_t = 0.5)]
    pub alpha: f64,
    #[arg(long, default_value_t = 1.0)]
    pub node_weight: f64,
    /// Seeds the split, the initialization and the pair order.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 64)]
    pub hidden: usize,
    #[arg(long, value_enum, default_value_t = BatchNormArg::Centered)]
    pub batch_norm: BatchNormArg,
    #[arg(long, default_value_t = 1e-3)]
    pub learning_rate: f64,
    #[arg(long, default_value_t = 300)]
    pub max_epochs: usize,
    #[arg(long, default_value_t = 20)]
    pub patience: usize,
    #[command(flatten)]
    pub split: SplitArgs,
    /// Checkpoint to write; the report goes to `<out>.report.json`.
    #[arg(long)]
    pub out: PathBuf,
}

pub fn train_cmd(args: &TrainArgs) -> Outcome<()> {
    let report_path = sidecar(&args.out, "report.json");
    let manifest_path = sidecar(&args.out, "manifest.json");
    let manifest = RunManifest::new(
        "train",
        args,
        Some(args.seed),
        &[&args.pairs],
        vec![args.out.clone(), report_path.clone()],
    )?;
    let pairs = load_pairs(&args.pairs)?;
    let split = make_split(&pairs, &args.split, args.seed)?;
    let variant = LossVariant::parse(&args.variant).expect("validated by clap");
    let loss = LossConfig {
        variant,
        lambda: args.lambda,
        alpha: args.alpha,
        node_loss_weight: args.node_weight,
    };
    let model_config = ModelConfig {
        batch_norm: match args.batch_norm {
            BatchNormArg::Centered => BatchNormMode::Centered,
            BatchNormArg::Standard => BatchNormMode::Standard,
        },
        ..ModelConfig::with_hidden(args.hidden)
    };
    model_config.validate().map_err(Failure::input)?;
    let model = MpnnModel::init(&model_config, args.seed).map_err(Failure::input)?;
    let config = TrainConfig {
        learning_rate: args.learning_rate,
        max_epochs: args.max_epochs,
        patience: args.patience,
        seed: args.seed,
        ..TrainConfig::default()
    };
    info!(
        "training {} on {} / {} / {} pairs",
        variant.name(),
        split.train.len(),
        split.validation.len(),
        split.test.len()
    );
    let (best, mut report) = train(model, &split, &loss, &config)?;
    let hash = manifest.write(&manifest_path)?;
    let bytes = encode_checkpoint(&best, Some(&loss));
    fs::write(&args.out, &bytes)?;
    report.checkpoint_hash = Some(checkpoint_hash(&bytes));
    report.manifest_hash = Some(hash);
    write_json(&report_path, &report)?;
    info!("training took {:.1}s", report.wall_time_secs);
    if !split.test.is_empty() {
        match evaluate_split(&best, &split.test) {
            Ok(e) => println!("test RMSE {:.4}, PCC {:.4} over {} pairs", e.rmse, e.pcc, split.test.len()),
            Err(e) => warn!("test metrics unavailable: {e}"),
        }
    }
    println!(
        "best epoch {} of {} (validation RMSE {:.4}); wrote {}",
        report.best_epoch,
        report.stopped_epoch + 1,
        report.best_val_rmse,
        args.out.display()
    );
    Ok(())
}

// -------------------------------------------------------------------- eval

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct EvalArgs {
    #[arg(long)]
    pub pairs: PathBuf,
    /// One checkpoint for metrics; two for the paired threshold sweep
    /// (first is the baseline).
    #[arg(long = "checkpoint", required = true, num_args = 1)]
    pub checkpoints: Vec<PathBuf>,
    /// Display names, one per checkpoint.
    #[arg(long, value_delimiter = ',')]
    pub labels: Vec<String>,
    #[arg(long, value_delimiter = ',', default_values_t = Method::ALL.map(|m| m.name().to_string()))]
    pub methods: Vec<String>,
    #[arg(long, value_delimiter = ',', default_values_t = default_thresholds())]
    pub thresholds: Vec<f64>,
    #[arg(long, default_value_t = 64)]
    pub ig_steps: usize,
    /// Split seed; match the seed used for training.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub split: SplitArgs,
    /// Report JSON; with two checkpoints the sweep table also goes to
    /// `<out>.csv`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Serialize)]
struct ModelMetrics {
    label: String,
    checkpoint: PathBuf,
    checkpoint_hash: String,
    rmse: f64,
    pcc: f64,
    targets: MetricReport,
}

#[derive(Serialize)]
struct EvalReport {
    schema: &'static str,
    manifest_hash: String,
    split_seed: u64,
    n_test_pairs: usize,
    models: Vec<ModelMetrics>,
    #[serde(skip_serializing_if = "Option::is_none")]
    sweep: Option<SweepReport>,
}

fn target_metrics(model: &MpnnModel, pairs: &[CliffPair]) -> Outcome<MetricReport> {
    let mut by_target: BTreeMap<&str, (Vec<f64>, Vec<f64>, usize)> = BTreeMap::new();
    for p in predict_split(model, pairs)? {
        let entry = by_target.entry(pairs.iter().find(|q| q.pair_id == p.pair_id).map_or("", |q| q.target_id.as_str())).or_default();
        entry.0.extend([p.pred_i, p.pred_j]);
        entry.1.extend([p.y_i, p.y_j]);
        entry.2 += 1;
    }
    let targets = by_target
        .into_iter()
        .map(|(target, (pred, truth, n))| {
            Ok(TargetMetrics {
                target_id: target.to_string(),
                rmse: rmse(&pred, &truth)?,
                pcc: pcc(&pred, &truth).map_err(|e| Failure::from(e).context(format!("target {target}")))?,
                n_pairs: n,
            })
        })
        .collect::<Outcome<Vec<_>>>()?;
    Ok(aggregate(&targets)?)
}

pub fn eval(args: &EvalArgs) -> Outcome<()> {
    if args.checkpoints.len() > 2 {
        return Err(Failure::input(anyhow::anyhow!("at most two checkpoints can be compared")));
    }
    if !args.labels.is_empty() && args.labels.len() != args.checkpoints.len() {
        return Err(Failure::input(anyhow::anyhow!("--labels needs one name per checkpoint")));
    }
    let methods = parse_methods(&args.methods)?;
    let csv_path = sidecar(&args.out, "csv");
    let mut outputs = vec![args.out.clone()];
    if args.checkpoints.len() == 2 {
        outputs.push(csv_path.clone());
    }
    let mut inputs: Vec<&Path> = vec![&args.pairs];
    inputs.extend(args.checkpoints.iter().map(PathBuf::as_path));
    let manifest = RunManifest::new("eval", args, Some(args.seed), &inputs, outputs)?;

    let pairs = load_pairs(&args.pairs)?;
    let split = make_split(&pairs, &args.split, args.seed)?;
    if split.test.is_empty() {
        return Err(Failure::input(anyhow::anyhow!("the test split is empty")));
    }
    let mut models = Vec::new();
    let mut metrics = Vec::new();
    for (k, path) in args.checkpoints.iter().enumerate() {
        let (model, loss, hash) = load_model(path)?;
        let label = args.labels.get(k).cloned().unwrap_or_else(|| match &loss {
            Some(l) => format!("{}-{}", l.variant.name(), k),
            None => format!("model-{k}"),
        });
        let overall = evaluate_split(&model, &split.test)?;
        metrics.push(ModelMetrics {
            label: label.clone(),
            checkpoint: path.clone(),
            checkpoint_hash: hash.clone(),
            rmse: overall.rmse,
            pcc: overall.pcc,
            targets: target_metrics(&model, &split.test)?,
        });
        println!("{label}: test RMSE {:.4}, PCC {:.4}", overall.rmse, overall.pcc);
        models.push((label, model, hash));
    }
    let sweep = if let [(la, ma, ha), (lb, mb, hb)] = models.as_slice() {
        let config = AttributionConfig { ig_steps: args.ig_steps };
        let report = threshold_sweep(
            &split.test,
            (la, ma, ha),
            (lb, mb, hb),
            &methods,
            &args.thresholds,
            &config,
        )?;
        for t in &report.skipped_thresholds {
            warn!("threshold {t}: no surviving test pairs");
        }
        for c in &report.comparisons {
            println!(
                "{}: mean g_dir {:.4} -> {:.4}, p = {}",
                c.method.name(),
                c.sweep_mean_a,
                c.sweep_mean_b,
                c.wilcoxon.as_ref().map_or("n/a".to_string(), |w| format!("{:.4}", w.p_value))
            );
        }
        Some(report)
    } else {
        None
    };
    let hash = manifest.write(&sidecar(&args.out, "manifest.json"))?;
    if let Some(report) = &sweep {
        let mut w = create(&csv_path)?;
        write_sweep_csv(&mut w, &[&report.model_a, &report.model_b])?;
        w.flush()?;
    }
    write_json(
        &args.out,
        &EvalReport {
            schema: EVAL_REPORT_SCHEMA,
            manifest_hash: hash,
            split_seed: args.seed,
            n_test_pairs: split.test.len(),
            models: metrics,
            sweep,
        },
    )
}

// --------------------------------------------------------------- attribute

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Subset {
    Test,
    All,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct AttributeArgs {
    #[arg(long)]
    pub pairs: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, value_delimiter = ',', default_values_t = Method::ALL.map(|m| m.name().to_string()))]
    pub methods: Vec<String>,
    #[arg(long, default_value_t = 64)]
    pub ig_steps: usize,
    /// Compounds of the test split only, or of every pair.
    #[arg(long, value_enum, default_value_t = Subset::Test)]
    pub subset: Subset,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub split: SplitArgs,
    /// Attribution JSONL to write.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionRecord {
    pub schema: String,
    pub compound_id: String,
    pub smiles: String,
    pub method: Method,
    pub model_ref: String,
    /// Per atom, edge contributions already split onto their endpoints.
    pub node_values: Vec<f64>,
    pub manifest_hash: String,
}

pub fn attribute_cmd(args: &AttributeArgs) -> Outcome<()> {
    let methods = parse_methods(&args.methods)?;
    let manifest = RunManifest::new(
        "attribute",
        args,
        Some(args.seed),
        &[&args.pairs, &args.checkpoint],
        vec![args.out.clone()],
    )?;
    let pairs = load_pairs(&args.pairs)?;
    let selected = match args.subset {
        Subset::All => pairs,
        Subset::Test => make_split(&pairs, &args.split, args.seed)?.test,
    };
    let (model, _, model_ref) = load_model(&args.checkpoint)?;
    let mut compounds = BTreeMap::new();
    for p in &selected {
        compounds.entry(p.compound_i.clone()).or_insert(&p.graph_i);
        compounds.entry(p.compound_j.clone()).or_insert(&p.graph_j);
    }
    let config = AttributionConfig { ig_steps: args.ig_steps };
    let hash = manifest.write(&sidecar(&args.out, "manifest.json"))?;
    let mut w = create(&args.out)?;
    for (id, graph) in &compounds {
        let input = GraphInput::from_graph(graph);
        for &method in &methods {
            let map = attribute_nodes(&model, &input, method, &config, &model_ref)?;
            let record = AttributionRecord {
                schema: ATTRIBUTION_SCHEMA.to_string(),
                compound_id: id.clone(),
                smiles: graph.source_smiles.clone(),
                method,
                model_ref: model_ref.clone(),
                node_values: map.node_values,
                manifest_hash: hash.clone(),
            };
            serde_json::to_writer(&mut w, &record)?;
            w.write_all(b"\n")?;
        }
    }
    w.flush()?;
    println!(
        "wrote {} attribution records for {} compounds to {}",
        compounds.len() * methods.len(),
        compounds.len(),
        args.out.display()
    );
    Ok(())
}

// ------------------------------------------------------------------ render

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct RenderArgs {
    #[arg(long)]
    pub pairs: PathBuf,
    #[arg(long)]
    pub attributions: PathBuf,
    #[arg(long)]
    pub pair_id: String,
    /// Needed when the attribution file holds several methods.
    #[arg(long)]
    pub method: Option<String>,
    /// Needed when the attribution file holds several models.
    #[arg(long)]
    pub model_ref: Option<String>,
    #[arg(long, default_value_t = 0)]
    pub layout_seed: u64,
    /// Directory receiving one SVG per compound.
    #[arg(long)]
    pub out_dir: PathBuf,
}

fn file_stem(text: &str) -> String {
    text.chars()
        .map(|c| if c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.') { c } else { '_' })
        .collect()
}

fn read_attributions(path: &Path) -> Outcome<Vec<AttributionRecord>> {
    let mut records = Vec::new();
    for (k, line) in open(path)?.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: AttributionRecord = serde_json::from_str(&line)
            .map_err(|e| Failure::input(e).context(format!("{} line {}", path.display(), k + 1)))?;
        if record.schema != ATTRIBUTION_SCHEMA {
            return Err(Failure::compat(anyhow::anyhow!(
                "{} line {}: unsupported schema {:?}",
                path.display(),
                k + 1,
                record.schema
            )));
        }
        records.push(record);
    }
    Ok(records)
}

fn pick<'a>(
    records: &'a [AttributionRecord],
    compound: &str,
    method: Option<Method>,
    model_ref: Option<&str>,
) -> Outcome<&'a AttributionRecord> {
    let hits: Vec<&AttributionRecord> = records
        .iter()
        .filter(|r| r.compound_id == compound)
        .filter(|r| method.is_none_or(|m| r.method == m))
        .filter(|r| model_ref.is_none_or(|m| r.model_ref == m))
        .collect();
    match hits.as_slice() {
        [] => Err(Failure::input(anyhow::anyhow!("no attribution record for compound {compound}"))),
        [one] => Ok(one),
        _ => Err(Failure::input(anyhow::anyhow!(
            "{} records match compound {compound}; choose --method and --model-ref",
            hits.len()
        ))),
    }
}

pub fn render(args: &RenderArgs) -> Outcome<()> {
    let method = args.method.as_deref().map(Method::parse).transpose()?;
    fs::create_dir_all(&args.out_dir)?;
    let stem = file_stem(&args.pair_id);
    let pairs = load_pairs(&args.pairs)?;
    let pair = pairs
        .iter()
        .find(|p| p.pair_id == args.pair_id)
        .ok_or_else(|| Failure::input(anyhow::anyhow!("pair {} not found", args.pair_id)))?;
    let records = read_attributions(&args.attributions)?;
    let record_i = pick(&records, &pair.compound_i, method, args.model_ref.as_deref())?;
    let record_j = pick(&records, &pair.compound_j, method, args.model_ref.as_deref())?;
    let (truth_i, truth_j) = ground_truth(pair)?;
    let sides = [
        (&pair.compound_i, &pair.graph_i, record_i, truth_i, pair.y_i),
        (&pair.compound_j, &pair.graph_j, record_j, truth_j, pair.y_j),
    ];
    let outputs: Vec<PathBuf> = sides
        .iter()
        .map(|(id, _, r, _, _)| args.out_dir.join(format!("{}.{}.svg", file_stem(id), r.method.name())))
        .collect();
    let manifest = RunManifest::new("render", args, None, &[&args.pairs, &args.attributions], outputs.clone())?;
    let hash = manifest.write(&args.out_dir.join(format!("{stem}.manifest.json")))?;
    for ((id, graph, record, truth, y), path) in sides.iter().zip(&outputs) {
        if record.node_values.len() != graph.num_atoms() {
            return Err(Failure::compat(anyhow::anyhow!(
                "attribution for {id} has {} values for {} atoms",
                record.node_values.len(),
                graph.num_atoms()
            )));
        }
        let layout = spring_layout(graph, args.layout_seed);
        let values = normalize_values(&record.node_values);
        let labels: Vec<f64> = truth.labels.iter().map(|&l| l as f64).collect();
        let svg = render_svg(
            graph,
            &layout,
            &format!("{id} (pIC50 {y:.2})"),
            &[
                Panel { title: format!("{id}: {}", record.method.name()), values: &values },
                Panel { title: "ground truth".to_string(), values: &labels },
            ],
            &hash,
        );
        fs::write(path, svg)?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

// ------------------------------------------------------------------ replay

#[derive(Args, Debug, Clone)]
pub struct ReplayArgs {
    /// Manifest written by an earlier run.
    #[arg(long)]
    pub manifest: PathBuf,
}

pub fn replay(args: &ReplayArgs) -> Outcome<()> {
    let manifest = RunManifest::read(&args.manifest)?;
    if manifest.tool_version != env!("CARGO_PKG_VERSION") {
        warn!(
            "manifest written by version {}, replaying with {}",
            manifest.tool_version,
            env!("CARGO_PKG_VERSION")
        );
    }
    manifest.verify_inputs()?;
    let value = manifest.args.clone();
    let bad = |e: serde_json::Error| Failure::compat(e).context("manifest arguments do not fit this version");
    match manifest.subcommand.as_str() {
        "generate" => generate(&serde_json::from_value(value).map_err(bad)?),
        "pairs" => pairs(&serde_json::from_value(value).map_err(bad)?),
        "train" => train_cmd(&serde_json::from_value(value).map_err(bad)?),
        "eval" => eval(&serde_json::from_value(value).map_err(bad)?),
        "attribute" => attribute_cmd(&serde_json::from_value(value).map_err(bad)?),
        "render" => render(&serde_json::from_value(value).map_err(bad)?),
        other => Err(Failure::compat(anyhow::anyhow!("unknown subcommand {other:?} in manifest"))),
    }
}
