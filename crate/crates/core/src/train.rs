//! Training regimes: source pretraining, fine-tuning, linear probing and the
//! merge pipeline (probe over the virtual merged graph, bake, fine-tune).
//!
//! Every stage evaluates on the validation split after each epoch and hands
//! the epoch with the best validation macro-F1 to the next stage (earliest
//! epoch on ties). Epoch 0 in a record is the untrained starting point,
//! evaluated in eval mode on both splits.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, Manifest, Stage};
use crate::data::{LabeledDataset, TRAIN, VAL};
use crate::error::{Error, Result};
use crate::merge::{bake, bn_mean_init, simple_average, MergePair, MergeWeights};
use crate::metrics::{argmax_rows, MetricsReport};
use crate::nn::{cross_entropy, AdamW, AdamWConfig, Mode, Network, TrainableCount};
use crate::params::ParamTree;
use crate::tensor::{DType, Scalar, Tensor};
use crate::zoo::{init_head, init_params, ModelSpec};

const EVAL_CHUNK: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageKind {
    Lp,
    Ft,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub stage: StageKind,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
    pub seed: u64,
    pub dtype: DType,
}

impl StageConfig {
    /// Linear probing: lr 1e-4, 50 epochs, batch 64.
    pub fn lp(seed: u64) -> Self {
        Self {
            stage: StageKind::Lp,
            epochs: 50,
            batch_size: 64,
            optimizer: AdamWConfig::with_lr(1e-4),
            seed,
            dtype: DType::F32,
        }
    }

    /// Fine-tuning: lr 1e-5, 50 epochs, batch 64.
    pub fn ft(seed: u64) -> Self {
        Self {
            stage: StageKind::Ft,
            optimizer: AdamWConfig::with_lr(1e-5),
            ..Self::lp(seed)
        }
    }

    pub fn lr(&self) -> f64 {
        self.optimizer.lr
    }

    pub fn with_lr(mut self, lr: f64) -> Self {
        self.optimizer.lr = lr;
        self
    }

    pub fn with_epochs(mut self, epochs: usize) -> Self {
        self.epochs = epochs;
        self
    }

    pub fn with_batch_size(mut self, batch_size: usize) -> Self {
        self.batch_size = batch_size;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.optimizer.validate()?;
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidArgument(
                "epochs and batch size must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_macro_f1: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: String,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub trainable: TrainableSummary,
    pub elapsed_secs: f64,
}

/// Timing is not part of a record's identity.
impl PartialEq for StageRecord {
    fn eq(&self, other: &Self) -> bool {
        self.stage == other.stage
            && self.epochs == other.epochs
            && self.best_epoch == other.best_epoch
            && self.trainable == other.trainable
    }
}

impl StageRecord {
    pub fn best(&self) -> &EpochRecord {
        &self.epochs[self.best_epoch]
    }

    pub fn last(&self) -> &EpochRecord {
        self.epochs.last().expect("records always hold epoch 0")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainableSummary {
    pub merge_logits: usize,
    pub conv: usize,
    pub bn: usize,
    pub head: usize,
}

impl From<TrainableCount> for TrainableSummary {
    fn from(c: TrainableCount) -> Self {
        Self {
            merge_logits: c.merge_logits,
            conv: c.conv,
            bn: c.bn,
            head: c.head,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub stages: Vec<StageRecord>,
}

impl RunRecord {
    /// One JSON object per epoch line, then a `{"summary": …}` line.
    /// Wall-clock time is left out so reruns produce identical text.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for s in &self.stages {
            for e in &s.epochs {
                let line = serde_json::json!({
                    "stage": s.stage,
                    "epoch": e.epoch,
                    "train_loss": e.train_loss,
                    "val_loss": e.val_loss,
                    "val_macro_f1": e.val_macro_f1,
                });
                out.push_str(&line.to_string());
                out.push('\n');
            }
        }
        let summary: Vec<_> = self
            .stages
            .iter()
            .map(|s| {
                serde_json::json!({
                    "stage": s.stage,
                    "best_epoch": s.best_epoch,
                    "best_val_macro_f1": s.best().val_macro_f1,
                    "trainable": s.trainable,
                })
            })
            .collect();
        out.push_str(&serde_json::json!({ "summary": summary }).to_string());
        out.push('\n');
        out
    }

    pub fn stage(&self, name: &str) -> Option<&StageRecord> {
        self.stages.iter().find(|s| s.stage == name)
    }
}

/// Mean cross-entropy and metrics of an eval-mode pass over `split`.
pub fn evaluate<T: Scalar>(net: &mut Network<T>, ds: &LabeledDataset, split: &str) -> Result<(f64, MetricsReport)> {
    if net.spec.classes != ds.class_count() {
        return Err(Error::InvalidArgument(format!(
            "model predicts {} classes, dataset `{}` has {}",
            net.spec.classes,
            ds.name,
            ds.class_count()
        )));
    }
    let idx = ds.split(split)?;
    if idx.is_empty() {
        return Err(Error::EmptySplit(split.to_string()));
    }
    let images = ds.images.to::<T>();
    let k = ds.class_count();
    let (mut loss_sum, mut preds, mut labels) = (0.0, Vec::with_capacity(idx.len()), Vec::with_capacity(idx.len()));
    for chunk in idx.chunks(EVAL_CHUNK) {
        let x = images.gather_rows(chunk)?;
        let y: Vec<usize> = chunk.iter().map(|&i| ds.labels[i]).collect();
        let logits = net.forward(&x, Mode::Eval)?;
        let (loss, _) = cross_entropy(&logits, &y)?;
        loss_sum += loss.as_f64() * chunk.len() as f64;
        preds.extend(argmax_rows(&logits.to_f64_vec(), k));
        labels.extend(y);
    }
    let report = MetricsReport::compute(&preds, &labels, k)?;
    Ok((loss_sum / idx.len() as f64, report))
}

/// Evaluates a stored checkpoint in dtype `T`.
pub fn evaluate_checkpoint<T: Scalar>(ck: &Checkpoint, ds: &LabeledDataset, split: &str) -> Result<MetricsReport> {
    let mut net = Network::<T>::from_tree(ck.spec(), &ck.tree)?;
    Ok(evaluate(&mut net, ds, split)?.1)
}

fn check_dataset(spec: &ModelSpec, ds: &LabeledDataset) -> Result<()> {
    if ds.class_count() != spec.classes {
        return Err(Error::InvalidArgument(format!(
            "spec `{}` has {} classes, dataset `{}` has {}",
            spec.name,
            spec.classes,
            ds.name,
            ds.class_count()
        )));
    }
    if ds.image_shape() != spec.input_shape {
        return Err(Error::Shape(format!(
            "dataset images are {:?}, spec `{}` expects {:?}",
            ds.image_shape(),
            spec.name,
            spec.input_shape
        )));
    }
    if ds.split(TRAIN)?.is_empty() {
        return Err(Error::EmptySplit(TRAIN.into()));
    }
    if ds.split(VAL)?.is_empty() {
        return Err(Error::EmptySplit(VAL.into()));
    }
    Ok(())
}

/// Runs one stage on whatever parameters of `net` are trainable and returns
/// the best-validation network together with its record.
pub fn fit<T: Scalar>(
    mut net: Network<T>,
    ds: &LabeledDataset,
    cfg: &StageConfig,
    stage: &str,
) -> Result<(Network<T>, StageRecord)> {
    cfg.validate()?;
    check_dataset(&net.spec, ds)?;
    let start = Instant::now();
    let trainable = TrainableSummary::from(net.trainable_count());
    let mut opt = AdamW::<T>::new(cfg.optimizer)?;
    let (train_loss, _) = evaluate(&mut net, ds, TRAIN)?;
    let (val_loss, val) = evaluate(&mut net, ds, VAL)?;
    let mut epochs = vec![EpochRecord {
        epoch: 0,
        train_loss,
        val_loss,
        val_macro_f1: val.macro_f1,
    }];
    let mut best: Option<(usize, f64, Network<T>)> = None;
    for epoch in 1..=cfg.epochs {
        let (mut loss_sum, mut count) = (0.0, 0usize);
        for (x, y) in ds.batches::<T>(TRAIN, cfg.batch_size, cfg.seed, epoch as u64, true)? {
            let logits = net.forward(&x, Mode::Train)?;
            let (loss, grad) = cross_entropy(&logits, &y)?;
            net.backward(&grad)?;
            opt.step(net.parameters_mut())?;
            loss_sum += loss.as_f64() * y.len() as f64;
            count += y.len();
        }
        net.clear_cache();
        let (val_loss, val) = evaluate(&mut net, ds, VAL)?;
        epochs.push(EpochRecord {
            epoch,
            train_loss: loss_sum / count as f64,
            val_loss,
            val_macro_f1: val.macro_f1,
        });
        if best.as_ref().is_none_or(|(_, f1, _)| val.macro_f1 > *f1) {
            best = Some((epoch, val.macro_f1, net.clone()));
        }
    }
    let (best_epoch, _, best_net) = best.expect("at least one epoch");
    let record = StageRecord {
        stage: stage.to_string(),
        epochs,
        best_epoch,
        trainable,
        elapsed_secs: start.elapsed().as_secs_f64(),
    };
    Ok((best_net, record))
}

/// Trains a model on a source task from a seeded init, or from the
/// backbone of `init` with a fresh head.
pub fn train_source<T: Scalar>(
    spec: &ModelSpec,
    ds: &LabeledDataset,
    cfg: &StageConfig,
    init: Option<&ParamTree>,
    task: &str,
) -> Result<(Checkpoint, StageRecord)> {
    spec.validate()?;
    let mut tree = init_params::<T>(spec, cfg.seed)?;
    if let Some(init) = init {
        for (k, v) in init.backbone() {
            if !tree.contains(k) {
                return Err(Error::Incongruent(format!(
                    "init carries `{k}`, spec `{}` does not",
                    spec.name
                )));
            }
            tree.insert(k, v.to::<T>());
        }
    }
    let net = Network::<T>::from_tree(spec, &tree)?;
    let (net, record) = fit(net, ds, cfg, "source")?;
    let ck = Checkpoint::new(net.to_tree()?, Manifest::new(spec, task, cfg.seed, Stage::Pretrained));
    Ok((ck, record))
}

/// Parameters to start a target-task stage from: the checkpoint's backbone
/// and, for `pretrained` checkpoints, a head freshly drawn from `seed` for
/// the dataset's classes. Later-stage checkpoints keep their head.
pub fn target_start<T: Scalar>(init: &Checkpoint, ds: &LabeledDataset, seed: u64) -> Result<(ModelSpec, ParamTree)> {
    let spec = init.spec().with_classes(ds.class_count());
    let mut tree = init
        .tree
        .filtered(|k| k.starts_with(crate::params::names::BACKBONE_PREFIX));
    if init.manifest.stage == Stage::Pretrained {
        tree.extend_from(&init_head::<T>(&spec, seed)?);
    } else {
        if init.spec().classes != ds.class_count() {
            return Err(Error::InvalidArgument(format!(
                "{} checkpoint has a {}-class head, dataset has {} classes",
                init.manifest.stage.as_str(),
                init.spec().classes,
                ds.class_count()
            )));
        }
        tree.extend_from(&init.tree.filtered(|k| k.starts_with(crate::params::names::HEAD_PREFIX)));
    }
    Ok((spec, tree.cast::<T>()))
}

/// Fine-tunes every parameter.
pub fn run_ft<T: Scalar>(init: &Checkpoint, ds: &LabeledDataset, cfg: &StageConfig) -> Result<(Checkpoint, RunRecord)> {
    let (spec, tree) = target_start::<T>(init, ds, cfg.seed)?;
    let mut net = Network::<T>::from_tree(&spec, &tree)?;
    net.unfreeze_all();
    let (net, record) = fit(net, ds, cfg, "ft")?;
    let manifest = Manifest::new(&spec, &ds.name, cfg.seed, Stage::Finetuned);
    Ok((
        Checkpoint::new(net.to_tree()?, manifest),
        RunRecord { stages: vec![record] },
    ))
}

/// Trains only the head; conv kernels and batch norm stay frozen.
pub fn run_lp<T: Scalar>(init: &Checkpoint, ds: &LabeledDataset, cfg: &StageConfig) -> Result<(Checkpoint, RunRecord)> {
    let (spec, tree) = target_start::<T>(init, ds, cfg.seed)?;
    let mut net = Network::<T>::from_tree(&spec, &tree)?;
    net.freeze_for_linear_probe();
    let (net, record) = fit(net, ds, cfg, "lp")?;
    let manifest = Manifest::new(&spec, &ds.name, cfg.seed, Stage::Lp);
    Ok((
        Checkpoint::new(net.to_tree()?, manifest),
        RunRecord { stages: vec![record] },
    ))
}

pub fn run_lpft<T: Scalar>(
    init: &Checkpoint,
    ds: &LabeledDataset,
    lp_cfg: &StageConfig,
    ft_cfg: &StageConfig,
) -> Result<(Checkpoint, RunRecord)> {
    let (lp_ck, mut record) = run_lp::<T>(init, ds, lp_cfg)?;
    let (ft_ck, ft_record) = run_ft::<T>(&lp_ck, ds, ft_cfg)?;
    record.stages.extend(ft_record.stages);
    Ok((ft_ck, record))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MedMergeOptions {
    /// Hold batch norm at its mean initialization during the probe.
    pub frozen_bn: bool,
}

#[derive(Debug, Clone)]
pub struct MedMergeOutcome {
    pub checkpoint: Checkpoint,
    pub baked: Checkpoint,
    pub merge_weights: MergeWeights,
    pub record: RunRecord,
}

/// Probe over the virtual merged graph.
pub fn run_merge_probe<T: Scalar>(
    pair: &MergePair,
    ds: &LabeledDataset,
    lp_cfg: &StageConfig,
    opts: MedMergeOptions,
) -> Result<(Network<T>, StageRecord)> {
    if pair.is_degenerate() {
        return Err(Error::Degenerate("both sources have all-zero kernels".into()));
    }
    let target = MergePair {
        spec: pair.spec.with_classes(ds.class_count()),
        ..pair.clone()
    };
    let head = init_head::<T>(&target.spec, lp_cfg.seed)?;
    let mut net = Network::<T>::virtual_merged(
        &target,
        &MergeWeights::init(&target.spec)?,
        &bn_mean_init(&target)?,
        &head,
    )?;
    net.set_bn_frozen(opts.frozen_bn);
    fit(net, ds, lp_cfg, "merge-lp")
}

/// Probe the merge coefficients, batch norm and head; bake; fine-tune.
pub fn run_medmerge<T: Scalar>(
    pair: &MergePair,
    ds: &LabeledDataset,
    lp_cfg: &StageConfig,
    ft_cfg: &StageConfig,
    opts: MedMergeOptions,
) -> Result<MedMergeOutcome> {
    let (net, lp_record) = run_merge_probe::<T>(pair, ds, lp_cfg, opts)?;
    let merge_weights = net.merge_weights()?;
    let target = MergePair {
        spec: net.spec.clone(),
        ..pair.clone()
    };
    let tree = bake::<T>(&target, &merge_weights, &net.bn_tree(), &net.head_tree())?;
    let baked = Checkpoint::new(tree, Manifest::new(&target.spec, &ds.name, lp_cfg.seed, Stage::Baked));
    let (checkpoint, ft_record) = run_ft::<T>(&baked, ds, ft_cfg)?;
    let mut record = RunRecord {
        stages: vec![lp_record],
    };
    record.stages.extend(ft_record.stages);
    Ok(MedMergeOutcome {
        checkpoint,
        baked,
        merge_weights,
        record,
    })
}

/// Weight-averaging baseline: average both backbones, then LP-FT.
pub fn run_simple_average<T: Scalar>(
    pair: &MergePair,
    ds: &LabeledDataset,
    lp_cfg: &StageConfig,
    ft_cfg: &StageConfig,
) -> Result<(Checkpoint, RunRecord)> {
    let tree = simple_average::<T>(pair, lp_cfg.seed)?;
    let init = Checkpoint::new(
        tree,
        Manifest::new(&pair.spec, "simple-average", lp_cfg.seed, Stage::Pretrained),
    );
    run_lpft::<T>(&init, ds, lp_cfg, ft_cfg)
}

/// Logits as a plain f64 buffer, for comparisons across graph variants.
pub fn eval_logits<T: Scalar>(net: &mut Network<T>, x: &Tensor<T>) -> Result<Vec<f64>> {
    Ok(net.forward(x, Mode::Eval)?.to_f64_vec())
}
