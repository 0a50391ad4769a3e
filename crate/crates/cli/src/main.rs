use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::json;

use medmerge::analysis::{
    activation_names, aggregate_mean_w, dump_activations, export_heatmap, heatmap_csv, heatmap_rows,
};
use medmerge::checkpoint::{load_expecting, Checkpoint};
use medmerge::data::{generate_synth, pack_from_manifest, Family, SplitSizes, SynthTaskSpec, TEST};
use medmerge::merge::{zero_source, MergePair, MergeWeights};
use medmerge::nn::Network;
use medmerge::train::{
    evaluate_checkpoint, run_ft, run_lpft, run_medmerge, run_merge_probe, run_simple_average, target_start,
    train_source, MedMergeOptions, RunRecord, StageConfig,
};
use medmerge::{DType, LabeledDataset, MetricsReport, ModelSpec, Scalar};

#[derive(Parser)]
#[command(
    name = "medmerge",
    version,
    about = "Learned per-kernel merging of two convolutional backbones"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Serialize, Deserialize, Debug, Clone)]
#[serde(rename_all = "kebab-case")]
enum Command {
    /// Generate or convert datasets
    #[command(subcommand)]
    Dataset(DatasetCommand),
    /// Train a source model from scratch or from another checkpoint's backbone
    TrainSource(TrainSourceArgs),
    /// Fine-tune every parameter of a checkpoint on a target task
    Ft(FtArgs),
    /// Linear probe, then fine-tune
    Lpft(LpftArgs),
    /// Merge two checkpoints with learned per-kernel weights, then fine-tune
    Medmerge(MedMergeArgs),
    /// Evaluate a checkpoint on one split
    Eval(EvalArgs),
    /// Write the per-layer merge-weight summary as CSV
    Heatmap(HeatmapArgs),
    /// Write eval-mode activations of selected layers
    DumpActivations(DumpArgs),
    /// Re-run a recorded experiment from its config.json into a new directory
    Replay(ReplayArgs),
    /// Print a built-in model spec as TOML
    Spec(SpecArgs),
}

#[derive(Subcommand, Serialize, Deserialize, Debug, Clone)]
#[serde(rename_all = "kebab-case")]
enum DatasetCommand {
    /// Generate a synthetic task
    Gen(GenArgs),
    /// Pack raw arrays described by a TOML manifest
    Pack(PackArgs),
    /// Print shape, classes and per-split histograms
    Info(InfoArgs),
}

#[derive(ValueEnum, Serialize, Deserialize, Debug, Clone, Copy, PartialEq, Eq)]
#[serde(rename_all = "lowercase")]
enum FamilyArg {
    /// Horizontal or vertical stripes at two frequencies
    Frequency,
    /// Block, ring, dots and bars shapes
    Blob,
    /// Stripe orientation crossed with a shape; needs both feature kinds
    Mixed,
}

impl From<FamilyArg> for Family {
    fn from(f: FamilyArg) -> Self {
        match f {
            FamilyArg::Frequency => Family::Frequency,
            FamilyArg::Blob => Family::Blob,
            FamilyArg::Mixed => Family::Mixed,
        }
    }
}

#[derive(ValueEnum, Serialize, Deserialize, Debug, Clone, Copy, PartialEq, Eq, Default)]
#[serde(rename_all = "lowercase")]
enum DTypeArg {
    #[default]
    F32,
    F64,
}

impl From<DTypeArg> for DType {
    fn from(d: DTypeArg) -> Self {
        match d {
            DTypeArg::F32 => DType::F32,
            DTypeArg::F64 => DType::F64,
        }
    }
}

#[derive(Args, Serialize, Deserialize, Debug, Clone)]
struct GenArgs {
    #[arg(long, value_enum)]
    family: FamilyArg,
    #[arg(long, default_value_t = 600)]
    train: usize,
    #[arg(long, default_value_t = 150)]
    val: usize,
    #[arg(long, default_value_t = 300)]
    test: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Standard deviation of the additive pixel noise
    #[arg(long, default_value_t = 0.2)]
    noise: f64,
    #[arg(long, default_value_t = 16)]
    image_size: usize,
    /// Relative class frequencies, e.g. 4,2,2,1; balanced when omitted
    #[arg(long, value_delimiter = ',')]
    class_weights: Vec<f64>,
    #[arg(long, value_enum, default_value_t)]
    dtype: DTypeArg,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Serialize, Deserialize, Debug, Clone)]
struct PackArgs {
    /// TOML manifest naming the raw image and label files and the splits
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Serialize, Deserialize, Debug, Clone)]
struct InfoArgs {
    data: PathBuf,
}

/// Optimizer settings of one stage; unset values take the stage defaults.
#[derive(Args, Serialize, Deserialize, Debug, Clone, Default)]
struct StageOpts {
    /// AdamW learning rate [default: 1e-5]
    #[arg(long)]
    lr: Option<f64>,
    /// [default: 50]
    #[arg(long)]
    epochs: Option<usize>,
    /// [default: 64]
    #[arg(long)]
    batch_size: Option<usize>,
    /// AdamW decoupled weight decay [default: 0.01]
    #[arg(long)]
    weight_decay: Option<f64>,
}

/// Settings of a probe stage followed by a fine-tuning stage.
#[derive(Args, Serialize, Deserialize, Debug, Clone, Default)]
struct TwoStageOpts {
    /// Probe learning rate [default: 1e-4]
    #[arg(long)]
    lp_lr: Option<f64>,
    /// Probe epochs [default: 50]
    #[arg(long)]
    lp_epochs: Option<usize>,
    /// Fine-tuning learning rate [default: 1e-5]
    #[arg(long)]
    ft_lr: Option<f64>,
    /// Fine-tuning epochs [default: 50]
    #[arg(long)]
    ft_epochs: Option<usize>,
    /// Batch size of both stages [default: 64]
    #[arg(long)]
    batch_size: Option<usize>,
    /// AdamW decoupled weight decay of both stages [default: 0.01]
    #[arg(long)]
    weight_decay: Option<f64>,
}

#[derive(Args, Serialize, Deserialize, Debug, Clone)]
struct RunOpts {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Arithmetic used for training and evaluation
    #[arg(long, value_enum, default_value_t)]
    dtype: DTypeArg,
    /// Output directory; created if missing
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Serialize, Deserialize, Debug, Clone)]
struct TrainSourceArgs {
    #[arg(long)]
    data: PathBuf,
    /// Built-in spec name or path to a TOML spec; classes follow the dataset
    #[arg(long, default_value = "smallnet")]
    spec: String,
    /// Source task tag stored in the checkpoint manifest
    #[arg(long)]
    task: Option<String>,
    /// Start from this checkpoint's backbone instead of a seeded init
    #[arg(long)]
    init: Option<PathBuf>,
    #[command(flatten)]
    stage: StageOpts,
    #[command(flatten)]
    run: RunOpts,
}

#[derive(Args, Serialize, Deserialize, Debug, Clone)]
struct FtArgs {
    #[arg(long)]
    init: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    stage: StageOpts,
    #[command(flatten)]
    run: RunOpts,
}

#[derive(Args, Serialize, Deserialize, Debug, Clone)]
struct LpftArgs {
    #[arg(long)]
    init: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    stages: TwoStageOpts,
    #[command(flatten)]
    run: RunOpts,
}

#[derive(ValueEnum, Serialize, Deserialize, Debug, Clone, Copy, PartialEq, Eq)]
#[serde(rename_all = "lowercase")]
enum Side {
    B,
    C,
}

#[derive(ValueEnum, Serialize, Deserialize, Debug, Clone, Copy, PartialEq, Eq)]
#[serde(rename_all = "kebab-case")]
enum Baseline {
    /// Average both backbones, then LP-FT
    SimpleAverage,
}

#[derive(Args, Serialize, Deserialize, Debug, Clone)]
struct MedMergeArgs {
    /// Source b and source c checkpoints; merge weights are reported toward b
    #[arg(long, num_args = 2, value_names = ["B", "C"])]
    pair: Vec<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    /// Keep batch norm at its mean initialization during the probe
    #[arg(long)]
    ablate_frozen_bn: bool,
    /// Replace one source with an all-zero backbone
    #[arg(long, value_enum)]
    zero_source: Option<Side>,
    /// Run a baseline on the same pair instead of the learned merge
    #[arg(long, value_enum, conflicts_with_all = ["ablate_frozen_bn", "lp_only"])]
    baseline: Option<Baseline>,
    /// Stop after the merge probe
    #[arg(long)]
    lp_only: bool,
    #[command(flatten)]
    stages: TwoStageOpts,
    #[command(flatten)]
    run: RunOpts,
}

#[derive(Args, Serialize, Deserialize, Debug, Clone)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = TEST)]
    split: String,
    #[arg(long, value_enum, default_value_t)]
    dtype: DTypeArg,
    /// Also write the report here as JSON
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Serialize, Deserialize, Debug, Clone)]
struct HeatmapArgs {
    /// Merge weights file (.mmw)
    #[arg(long)]
    weights: PathBuf,
    /// Built-in spec name or path to a TOML spec
    #[arg(long, default_value = "smallnet")]
    spec: String,
    /// CSV destination; stdout when omitted
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Serialize, Deserialize, Debug, Clone)]
struct DumpArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = TEST)]
    split: String,
    /// Number of leading samples of the split to run
    #[arg(long, default_value_t = 8)]
    count: usize,
    /// Comma-separated layer names; every layer when omitted
    #[arg(long, value_delimiter = ',')]
    layers: Vec<String>,
    #[arg(long, value_enum, default_value_t)]
    dtype: DTypeArg,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Serialize, Deserialize, Debug, Clone)]
struct ReplayArgs {
    /// config.json written by an earlier run
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Serialize, Deserialize, Debug, Clone)]
struct SpecArgs {
    #[arg(default_value = "smallnet")]
    name: String,
    #[arg(long, default_value_t = 4)]
    classes: usize,
}

const CONFIG_FILE: &str = "config.json";
const RECORD_FILE: &str = "record.jsonl";
const SUMMARY_FILE: &str = "summary.json";
const TIMING_FILE: &str = "timing.json";
const MODEL_FILE: &str = "model.mmck";
const BAKED_FILE: &str = "baked.mmck";
const WEIGHTS_FILE: &str = "merge_weights.mmw";
const HEATMAP_FILE: &str = "heatmap.csv";

/// Calls a generic command body with the element type chosen at run time.
macro_rules! dispatch {
    ($dtype:expr, $f:ident($($arg:expr),*)) => {
        match $dtype {
            DTypeArg::F32 => $f::<f32>($($arg),*),
            DTypeArg::F64 => $f::<f64>($($arg),*),
        }
    };
}

fn main() -> Result<()> {
    execute(Cli::parse().command)
}

fn execute(command: Command) -> Result<()> {
    match &command {
        Command::Dataset(DatasetCommand::Gen(a)) => dataset_gen(a),
        Command::Dataset(DatasetCommand::Pack(a)) => {
            let ds = pack_from_manifest(&a.manifest)?;
            ds.save_packed(&a.out)?;
            print_info(&ds);
            Ok(())
        }
        Command::Dataset(DatasetCommand::Info(a)) => {
            print_info(&load_data(&a.data)?);
            Ok(())
        }
        Command::TrainSource(a) => dispatch!(a.run.dtype, train_source_cmd(&command, a)),
        Command::Ft(a) => dispatch!(a.run.dtype, ft_cmd(&command, a)),
        Command::Lpft(a) => dispatch!(a.run.dtype, lpft_cmd(&command, a)),
        Command::Medmerge(a) => dispatch!(a.run.dtype, medmerge_cmd(&command, a)),
        Command::Eval(a) => dispatch!(a.dtype, eval_cmd(a)),
        Command::Heatmap(a) => heatmap_cmd(a),
        Command::DumpActivations(a) => dispatch!(a.dtype, dump_cmd(a)),
        Command::Replay(a) => replay(a),
        Command::Spec(a) => {
            print!("{}", builtin_spec(&a.name, a.classes)?.to_toml_string());
            Ok(())
        }
    }
}

fn dataset_gen(a: &GenArgs) -> Result<()> {
    let mut spec = SynthTaskSpec::new(
        a.family.into(),
        SplitSizes {
            train: a.train,
            val: a.val,
            test: a.test,
        },
        a.seed,
    );
    spec.noise_std = a.noise;
    spec.image_size = a.image_size;
    spec.class_weights = a.class_weights.clone();
    spec.dtype = a.dtype.into();
    let ds = generate_synth(&spec)?;
    ds.save_packed(&a.out)?;
    print_info(&ds);
    Ok(())
}

fn print_info(ds: &LabeledDataset) {
    println!(
        "{}: {} samples of {:?}, dtype {}",
        ds.name,
        ds.len(),
        ds.image_shape(),
        ds.images.dtype()
    );
    println!("classes: {}", ds.class_names.join(", "));
    for name in ds.splits.keys() {
        let h = ds.histogram(name).expect("listed split");
        println!("{name}: {} {:?}", h.iter().sum::<usize>(), h);
    }
}

fn load_data(path: &Path) -> Result<LabeledDataset> {
    LabeledDataset::load_packed(path).with_context(|| format!("loading dataset {}", path.display()))
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn builtin_spec(name: &str, classes: usize) -> Result<ModelSpec> {
    match name {
        "smallnet" => Ok(ModelSpec::smallnet(classes)),
        _ => match name.strip_prefix("smallnet").and_then(|n| n.parse().ok()) {
            Some(blocks) if (1..=3).contains(&blocks) => Ok(ModelSpec::smallnet_prefix(blocks, classes)),
            _ => bail!("unknown built-in spec `{name}`; built-ins are smallnet, smallnet1, smallnet2"),
        },
    }
}

/// A built-in name or a TOML file.
fn resolve_spec(arg: &str, classes: usize) -> Result<ModelSpec> {
    let path = Path::new(arg);
    if path.exists() {
        let spec = ModelSpec::load(path).with_context(|| format!("loading spec {arg}"))?;
        return Ok(spec.with_classes(classes));
    }
    builtin_spec(arg, classes)
}

fn apply(
    mut cfg: StageConfig,
    lr: Option<f64>,
    epochs: Option<usize>,
    batch: Option<usize>,
    wd: Option<f64>,
    dtype: DTypeArg,
) -> StageConfig {
    if let Some(lr) = lr {
        cfg = cfg.with_lr(lr);
    }
    if let Some(e) = epochs {
        cfg = cfg.with_epochs(e);
    }
    if let Some(b) = batch {
        cfg = cfg.with_batch_size(b);
    }
    if let Some(wd) = wd {
        cfg.optimizer.weight_decay = wd;
    }
    cfg.dtype = dtype.into();
    cfg
}

fn single_stage(s: &StageOpts, run: &RunOpts) -> StageConfig {
    apply(
        StageConfig::ft(run.seed),
        s.lr,
        s.epochs,
        s.batch_size,
        s.weight_decay,
        run.dtype,
    )
}

fn two_stage(s: &TwoStageOpts, run: &RunOpts) -> (StageConfig, StageConfig) {
    (
        apply(
            StageConfig::lp(run.seed),
            s.lp_lr,
            s.lp_epochs,
            s.batch_size,
            s.weight_decay,
            run.dtype,
        ),
        apply(
            StageConfig::ft(run.seed),
            s.ft_lr,
            s.ft_epochs,
            s.batch_size,
            s.weight_decay,
            run.dtype,
        ),
    )
}

/// Output directory of one run. Everything except `timing.json` is a
/// function of the config.
struct RunDir {
    path: PathBuf,
}

impl RunDir {
    fn create(path: &Path, command: &Command, stages: &[&StageConfig]) -> Result<Self> {
        fs::create_dir_all(path).with_context(|| format!("creating {}", path.display()))?;
        let dir = Self {
            path: path.to_path_buf(),
        };
        dir.write_json(
            CONFIG_FILE,
            &json!({
                "version": env!("CARGO_PKG_VERSION"),
                "command": command,
                "stages": stages,
            }),
        )?;
        Ok(dir)
    }

    fn file(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    fn write_json(&self, name: &str, value: &serde_json::Value) -> Result<()> {
        let path = self.file(name);
        let text = serde_json::to_string_pretty(value)? + "\n";
        fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
    }

    fn finish(&self, record: &RunRecord, mut summary: serde_json::Value) -> Result<()> {
        let path = self.file(RECORD_FILE);
        fs::write(&path, record.to_jsonl()).with_context(|| format!("writing {}", path.display()))?;
        summary["stages"] = record
            .stages
            .iter()
            .map(|s| {
                json!({
                    "stage": s.stage,
                    "best_epoch": s.best_epoch,
                    "best_val_macro_f1": s.best().val_macro_f1,
                    "final_val_loss": s.last().val_loss,
                    "trainable": s.trainable,
                })
            })
            .collect();
        self.write_json(SUMMARY_FILE, &summary)?;
        let timing: Vec<_> = record
            .stages
            .iter()
            .map(|s| json!({ "stage": s.stage, "elapsed_secs": s.elapsed_secs }))
            .collect();
        self.write_json(TIMING_FILE, &json!(timing))
    }
}

fn test_report<T: Scalar>(ck: &Checkpoint, ds: &LabeledDataset) -> Result<Option<MetricsReport>> {
    match ds.split(TEST) {
        Ok(idx) if !idx.is_empty() => Ok(Some(evaluate_checkpoint::<T>(ck, ds, TEST)?)),
        _ => Ok(None),
    }
}

fn train_source_cmd<T: Scalar>(command: &Command, a: &TrainSourceArgs) -> Result<()> {
    let ds = load_data(&a.data)?;
    let spec = resolve_spec(&a.spec, ds.class_count())?;
    let cfg = single_stage(&a.stage, &a.run);
    let dir = RunDir::create(&a.run.out, command, &[&cfg])?;
    let init = a.init.as_deref().map(load_checkpoint).transpose()?;
    let task = a.task.clone().unwrap_or_else(|| ds.name.clone());
    let (ck, record) = train_source::<T>(&spec, &ds, &cfg, init.as_ref().map(|c| &c.tree), &task)?;
    ck.save(&dir.file(MODEL_FILE))?;
    let report = test_report::<T>(&ck, &ds)?;
    dir.finish(
        &RunRecord { stages: vec![record] },
        json!({ "checkpoint": MODEL_FILE, "test": report }),
    )
}

fn ft_cmd<T: Scalar>(command: &Command, a: &FtArgs) -> Result<()> {
    let ds = load_data(&a.data)?;
    let init = load_checkpoint(&a.init)?;
    let cfg = single_stage(&a.stage, &a.run);
    let dir = RunDir::create(&a.run.out, command, &[&cfg])?;
    let (ck, record) = run_ft::<T>(&init, &ds, &cfg)?;
    ck.save(&dir.file(MODEL_FILE))?;
    let report = test_report::<T>(&ck, &ds)?;
    dir.finish(&record, json!({ "checkpoint": MODEL_FILE, "test": report }))
}

fn lpft_cmd<T: Scalar>(command: &Command, a: &LpftArgs) -> Result<()> {
    let ds = load_data(&a.data)?;
    let init = load_checkpoint(&a.init)?;
    let (lp, ft) = two_stage(&a.stages, &a.run);
    let dir = RunDir::create(&a.run.out, command, &[&lp, &ft])?;
    let (ck, record) = run_lpft::<T>(&init, &ds, &lp, &ft)?;
    ck.save(&dir.file(MODEL_FILE))?;
    let report = test_report::<T>(&ck, &ds)?;
    dir.finish(&record, json!({ "checkpoint": MODEL_FILE, "test": report }))
}

fn medmerge_cmd<T: Scalar>(command: &Command, a: &MedMergeArgs) -> Result<()> {
    ensure!(a.pair.len() == 2, "--pair takes exactly two checkpoints");
    let ds = load_data(&a.data)?;
    let b = load_checkpoint(&a.pair[0])?;
    let spec = b.spec().clone();
    let c = load_expecting(&a.pair[1], &spec).with_context(|| {
        format!(
            "loading checkpoint {} as the partner of {}",
            a.pair[1].display(),
            a.pair[0].display()
        )
    })?;
    let (mut tree_b, mut tree_c) = (b.tree, c.tree);
    match a.zero_source {
        Some(Side::B) => tree_b = zero_source::<T>(&spec)?,
        Some(Side::C) => tree_c = zero_source::<T>(&spec)?,
        None => {}
    }
    let pair = MergePair::new(tree_b, tree_c, spec)?;
    let (lp, ft) = two_stage(&a.stages, &a.run);
    let stages: Vec<&StageConfig> = if a.lp_only { vec![&lp] } else { vec![&lp, &ft] };
    let dir = RunDir::create(&a.run.out, command, &stages)?;

    if a.baseline == Some(Baseline::SimpleAverage) {
        let (ck, record) = run_simple_average::<T>(&pair, &ds, &lp, &ft)?;
        ck.save(&dir.file(MODEL_FILE))?;
        let report = test_report::<T>(&ck, &ds)?;
        return dir.finish(&record, json!({ "checkpoint": MODEL_FILE, "test": report }));
    }

    let opts = MedMergeOptions {
        frozen_bn: a.ablate_frozen_bn,
    };
    let write_weights = |mw: &MergeWeights, spec: &ModelSpec| -> Result<f64> {
        mw.save(&dir.file(WEIGHTS_FILE))?;
        export_heatmap(mw, spec, &dir.file(HEATMAP_FILE))?;
        Ok(aggregate_mean_w(mw))
    };
    if a.lp_only {
        let (net, record) = run_merge_probe::<T>(&pair, &ds, &lp, opts)?;
        let mw = net.merge_weights()?;
        let mean_w = write_weights(&mw, &net.spec)?;
        return dir.finish(
            &RunRecord { stages: vec![record] },
            json!({ "merge_weights": WEIGHTS_FILE, "heatmap": HEATMAP_FILE, "mean_w": mean_w }),
        );
    }
    let outcome = run_medmerge::<T>(&pair, &ds, &lp, &ft, opts)?;
    let mean_w = write_weights(&outcome.merge_weights, outcome.baked.spec())?;
    outcome.baked.save(&dir.file(BAKED_FILE))?;
    outcome.checkpoint.save(&dir.file(MODEL_FILE))?;
    let report = test_report::<T>(&outcome.checkpoint, &ds)?;
    dir.finish(
        &outcome.record,
        json!({
            "checkpoint": MODEL_FILE,
            "baked": BAKED_FILE,
            "merge_weights": WEIGHTS_FILE,
            "heatmap": HEATMAP_FILE,
            "mean_w": mean_w,
            "test": report,
        }),
    )
}

fn eval_cmd<T: Scalar>(a: &EvalArgs) -> Result<()> {
    let ds = load_data(&a.data)?;
    let ck = load_checkpoint(&a.checkpoint)?;
    let report = evaluate_checkpoint::<T>(&ck, &ds, &a.split)?;
    let text = serde_json::to_string_pretty(&json!({ "split": a.split, "report": report }))? + "\n";
    if let Some(out) = &a.out {
        fs::write(out, &text).with_context(|| format!("writing {}", out.display()))?;
    }
    print!("{text}");
    Ok(())
}

fn heatmap_cmd(a: &HeatmapArgs) -> Result<()> {
    let mw = MergeWeights::load(&a.weights).with_context(|| format!("loading {}", a.weights.display()))?;
    // classes do not enter the backbone, any count will do
    let spec = resolve_spec(&a.spec, 2)?;
    match &a.out {
        Some(out) => {
            export_heatmap(&mw, &spec, out)?;
        }
        None => print!("{}", heatmap_csv(&heatmap_rows(&mw, &spec)?)),
    }
    Ok(())
}

fn dump_cmd<T: Scalar>(a: &DumpArgs) -> Result<()> {
    let ds = load_data(&a.data)?;
    let ck = load_checkpoint(&a.checkpoint)?;
    // pretrained checkpoints get a fresh head for the dataset; only `logits` depends on it
    let (spec, tree) = target_start::<T>(&ck, &ds, ck.manifest.seed)?;
    let mut net = Network::<T>::from_tree(&spec, &tree.cast::<T>())?;
    let idx = ds.split(&a.split)?;
    ensure!(
        a.count >= 1 && a.count <= idx.len(),
        "--count must be between 1 and {} for split `{}`",
        idx.len(),
        a.split
    );
    let input = ds.images.to::<T>().gather_rows(&idx[..a.count])?;
    let layers = if a.layers.is_empty() {
        activation_names(&spec)
    } else {
        a.layers.clone()
    };
    let tree = dump_activations(&mut net, &input, &layers, &a.out)?;
    for (name, t) in tree.iter() {
        println!("{name} {:?}", t.shape());
    }
    Ok(())
}

fn replay(a: &ReplayArgs) -> Result<()> {
    let text = fs::read_to_string(&a.config).with_context(|| format!("reading {}", a.config.display()))?;
    let value: serde_json::Value =
        serde_json::from_str(&text).with_context(|| format!("parsing {}", a.config.display()))?;
    let mut command: Command = serde_json::from_value(value["command"].clone())
        .with_context(|| format!("{} does not hold a recorded command", a.config.display()))?;
    match &mut command {
        Command::TrainSource(x) => x.run.out = a.out.clone(),
        Command::Ft(x) => x.run.out = a.out.clone(),
        Command::Lpft(x) => x.run.out = a.out.clone(),
        Command::Medmerge(x) => x.run.out = a.out.clone(),
        other => bail!("only training runs can be replayed, not {other:?}"),
    }
    execute(command)
}
