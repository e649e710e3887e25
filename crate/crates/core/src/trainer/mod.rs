//! Three-phase training: warm-up on the clustering objective alone,
//! head-only fine-tuning, then main training with alternating head types.

mod config;
mod metrics;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use config::{Alternation, MiPairs, Mode, PhaseValues, TrainConfig};
pub use metrics::{read_metrics, write_metrics, MetricRow};

use crate::data::{DatasetSplit, Sample};
use crate::error::{Error, Result};
use crate::evaluator::{accuracy, cluster_mapping, hard_truths, macro_f1, predict_samples};
use crate::image::Image;
use crate::losses;
use crate::network::container::Container;
use crate::network::optim::Adam;
use crate::network::{build_network, softmax, HeadType, Model, ModelConfig, Normalization, Phase};
use crate::sampler::{BatchSchedule, Pools, TripleItem};

pub const CONFIG_FILE: &str = "config.toml";
pub const METRICS_FILE: &str = "metrics.csv";
pub const STATE_FILE: &str = "state.bin";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const LAST_CHECKPOINT: &str = "last.ckpt";

/// Even batches train normal heads, odd batches overclustering heads.
pub fn alternate_schedule(batch_index: usize) -> HeadType {
    if batch_index % 2 == 0 {
        HeadType::Normal
    } else {
        HeadType::Overcluster
    }
}

pub fn head_type_for(alternation: Alternation, epoch: usize, batch_index: usize) -> HeadType {
    match alternation {
        Alternation::Batch => alternate_schedule(batch_index),
        Alternation::Epoch => alternate_schedule(epoch),
    }
}

/// Loss values of one step, averaged over the heads of the trained type.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub supervised: f64,
    /// Negated mutual information.
    pub unsupervised: f64,
    pub total: f64,
}

/// Settings of a single update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOptions {
    pub lambda_s: f64,
    pub lambda_u: f64,
    pub train_backbone: bool,
    pub mi_pairs: MiPairs,
    pub ce_inverse_unlabeled: bool,
    pub phase: Phase,
    pub epoch: usize,
    pub batch: usize,
}

impl StepOptions {
    fn divergence(&self, term: &str) -> Error {
        Error::Divergence {
            term: term.to_string(),
            phase: self.phase.to_string(),
            epoch: self.epoch,
            batch: self.batch,
        }
    }
}

/// Forward pass of all views through every head of `head_type` and
/// accumulation of parameter gradients. Gradients are reset first.
pub fn compute_gradients(
    model: &mut Model,
    batch: &[TripleItem],
    head_type: HeadType,
    opts: &StepOptions,
) -> Result<LossBreakdown> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    model.zero_grad();
    let n = batch.len();
    let labeled: Vec<usize> = (0..n).filter(|&i| batch[i].label.is_some()).collect();
    let ce_rows: Vec<usize> = if opts.ce_inverse_unlabeled {
        (0..n).collect()
    } else {
        labeled.clone()
    };
    let mi_rows: Vec<usize> = match opts.mi_pairs {
        MiPairs::All => (0..n).collect(),
        MiPairs::Unlabeled => (0..n)
            .filter(|&i| matches!(batch[i].source, crate::sampler::SampleRef::Unlabeled(_)))
            .collect(),
    };
    let use_x3 = head_type == HeadType::Overcluster && opts.lambda_s > 0.0 && !ce_rows.is_empty();
    let views = if use_x3 { 3 } else { 2 };
    let mut images: Vec<&Image> = batch.iter().map(|t| &t.x1).collect();
    images.extend(batch.iter().map(|t| &t.x2));
    if use_x3 {
        images.extend(batch.iter().map(|t| &t.x3));
    }
    let rows = views * n;
    let (features, cache) = model.forward_features(&images)?;
    let mut dfeat = vec![0.0f32; features.len()];
    let heads = model.heads(head_type).len();
    let width = model.config().head_width(head_type);
    let mut sum_s = 0.0;
    let mut sum_mi = 0.0;
    for j in 0..heads {
        let logits = model.heads(head_type)[j].forward(&features, rows);
        let probs: Vec<Vec<f64>> = logits.chunks_exact(width).map(softmax).collect();
        let mut grad = vec![vec![0.0f64; width]; rows];

        let ls = match head_type {
            HeadType::Normal if !labeled.is_empty() => {
                let scale = 0.5 / labeled.len() as f64;
                let mut total = 0.0;
                for &i in &labeled {
                    let class = batch[i].label.expect("labeled item");
                    let target = crate::data::LabelDistribution::one_hot(class, width);
                    for row in [i, n + i] {
                        total += losses::cross_entropy(&probs[row], target.probs())?;
                        let g = losses::cross_entropy_grad(&probs[row], target.probs());
                        for (acc, gv) in grad[row].iter_mut().zip(g) {
                            *acc += opts.lambda_s * scale * gv;
                        }
                    }
                }
                total * scale
            }
            HeadType::Overcluster if use_x3 => {
                let scale = 1.0 / ce_rows.len() as f64;
                let mut total = 0.0;
                for &i in &ce_rows {
                    let (a, b, c) = (i, n + i, 2 * n + i);
                    total += losses::ce_inverse_loss(&probs[a], &probs[b], &probs[c])?;
                    let g = losses::ce_inverse_loss_grad(&probs[a], &probs[b], &probs[c]);
                    for (row, gr) in [a, b, c].into_iter().zip(g) {
                        for (acc, gv) in grad[row].iter_mut().zip(gr) {
                            *acc += opts.lambda_s * scale * gv;
                        }
                    }
                }
                total * scale
            }
            _ => 0.0,
        };
        if !ls.is_finite() {
            return Err(opts.divergence(match head_type {
                HeadType::Normal => "cross_entropy",
                HeadType::Overcluster => "ce_inverse",
            }));
        }

        let mi = if mi_rows.is_empty() {
            0.0
        } else {
            let a: Vec<Vec<f64>> = mi_rows.iter().map(|&i| probs[i].clone()).collect();
            let b: Vec<Vec<f64>> = mi_rows.iter().map(|&i| probs[n + i].clone()).collect();
            let mi = losses::mutual_information(&losses::joint_matrix(&a, &b)?);
            if !mi.is_finite() {
                return Err(opts.divergence("mutual_information"));
            }
            if opts.lambda_u > 0.0 {
                let (ga, gb) = losses::mutual_information_input_grad(&a, &b)?;
                for (k, &i) in mi_rows.iter().enumerate() {
                    for c in 0..width {
                        grad[i][c] -= opts.lambda_u * ga[k][c];
                        grad[n + i][c] -= opts.lambda_u * gb[k][c];
                    }
                }
            }
            mi
        };
        sum_s += ls;
        sum_mi += mi;

        let inv_heads = 1.0 / heads as f64;
        let mut dlogits = Vec::with_capacity(rows * width);
        for (p, g) in probs.iter().zip(&grad) {
            dlogits.extend(losses::softmax_backward(p, g).into_iter().map(|v| (v * inv_heads) as f32));
        }
        if dlogits.iter().any(|v| !v.is_finite()) {
            return Err(opts.divergence("gradient"));
        }
        model.heads_mut(head_type)[j].backward(&features, &dlogits, rows, &mut dfeat);
    }
    if opts.train_backbone {
        model.backbone_mut().backward(&cache, &dfeat);
    }
    let supervised = sum_s / heads as f64;
    let unsupervised = -sum_mi / heads as f64;
    Ok(LossBreakdown {
        supervised,
        unsupervised,
        total: losses::total_loss(supervised, -unsupervised, opts.lambda_s, opts.lambda_u),
    })
}

/// One optimizer update on the heads of `head_type`, plus the backbone
/// unless it is frozen.
pub fn train_step(
    model: &mut Model,
    optim: &mut Adam,
    batch: &[TripleItem],
    head_type: HeadType,
    opts: &StepOptions,
    lr: f64,
) -> Result<LossBreakdown> {
    let losses = compute_gradients(model, batch, head_type, opts)?;
    let mut params = model.step_params_mut(head_type, opts.train_backbone);
    if params.iter().any(|p| p.grad.iter().any(|g| !g.is_finite())) {
        return Err(opts.divergence("gradient"));
    }
    optim.step(&mut params, lr as f32);
    Ok(losses)
}

/// Position in the phase sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Progress {
    pub phase_index: usize,
    /// Next epoch to run within the current phase.
    pub epoch: usize,
    /// Epochs completed over all phases.
    pub epochs_done: usize,
    /// Batches completed over all phases.
    pub batches_done: u64,
}

#[derive(Debug, Clone)]
pub struct BestSnapshot {
    pub val_f1: f64,
    pub phase: Phase,
    pub epoch: usize,
    pub model: Model,
}

/// Summary of a finished epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochReport {
    pub phase: Phase,
    pub epoch: usize,
    pub rows: Vec<MetricRow>,
    pub improved: bool,
}

/// Owns the model, optimizer and run history.
pub struct Trainer {
    cfg: TrainConfig,
    model: Model,
    optim: Adam,
    progress: Progress,
    history: Vec<MetricRow>,
    best: Option<BestSnapshot>,
}

/// Model shape implied by the data and the run config.
pub fn model_config_for(cfg: &TrainConfig, split: &DatasetSplit, k_gt: usize) -> Result<ModelConfig> {
    let first = split
        .labeled
        .first()
        .ok_or_else(|| Error::config("labeled pool", "is empty"))?;
    let (c, h, w) = first.image.dims();
    let channels = cfg.augmentation.output_channels(c);
    if let Some(expected) = cfg.input_channels {
        if expected != channels {
            return Err(Error::config(
                "input_channels",
                format!("config says {expected}, data and augmentation give {channels}"),
            ));
        }
    }
    let model_cfg = ModelConfig {
        backbone: cfg.backbone,
        input_channels: channels,
        image_height: h,
        image_width: w,
        k_gt,
        k: cfg.k.unwrap_or_else(|| ModelConfig::default_k(k_gt)),
        heads_per_type: cfg.heads_per_type,
    };
    model_cfg.validate()?;
    Ok(model_cfg)
}

impl Trainer {
    /// Fresh model; input statistics come from the labeled pool's images.
    pub fn new(cfg: TrainConfig, split: &DatasetSplit, k_gt: usize) -> Result<Self> {
        cfg.validate()?;
        let model_cfg = model_config_for(&cfg, split, k_gt)?;
        let mut model = build_network(&model_cfg, cfg.seed)?;
        let pre: Vec<Image> = split.labeled.iter().map(|s| cfg.augmentation.preprocess(&s.image)).collect();
        model.set_normalization(Normalization::from_images(&pre, model_cfg.input_channels))?;
        Ok(Trainer {
            optim: Adam::new(cfg.adam),
            cfg,
            model,
            progress: Progress {
                phase_index: 0,
                epoch: 0,
                epochs_done: 0,
                batches_done: 0,
            },
            history: Vec::new(),
            best: None,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn model_mut(&mut self) -> &mut Model {
        &mut self.model
    }

    pub fn history(&self) -> &[MetricRow] {
        &self.history
    }

    pub fn progress(&self) -> Progress {
        self.progress
    }

    pub fn best(&self) -> Option<&BestSnapshot> {
        self.best.as_ref()
    }

    /// Best validated model, or the current one if none was validated.
    pub fn best_model(&self) -> &Model {
        self.best.as_ref().map_or(&self.model, |b| &b.model)
    }

    /// Phase of the next epoch, skipping phases with zero epochs.
    pub fn current_phase(&mut self) -> Option<Phase> {
        let phases = self.cfg.mode.phases();
        while self.progress.phase_index < phases.len() {
            let phase = phases[self.progress.phase_index];
            if self.progress.epoch < self.cfg.epochs.get(phase) {
                return Some(phase);
            }
            self.progress.phase_index += 1;
            self.progress.epoch = 0;
            self.optim.reset();
        }
        None
    }

    pub fn is_finished(&mut self) -> bool {
        self.current_phase().is_none()
    }

    /// Runs the next epoch; `None` once every phase is complete.
    pub fn run_epoch(&mut self, split: &DatasetSplit) -> Result<Option<EpochReport>> {
        let Some(phase) = self.current_phase() else {
            return Ok(None);
        };
        self.model.set_phase(phase);
        let supervised = phase != Phase::WarmUp;
        let opts_base = StepOptions {
            lambda_s: if supervised { self.cfg.lambda_s } else { 0.0 },
            lambda_u: self.cfg.lambda_u,
            train_backbone: phase != Phase::HeadFinetune,
            mi_pairs: self.cfg.mi_pairs,
            ce_inverse_unlabeled: self.cfg.ce_inverse_unlabeled,
            phase,
            epoch: self.progress.epoch,
            batch: 0,
        };
        let lr = self.cfg.lr.get(phase);
        let pools = Pools::new(&split.labeled, &split.unlabeled, supervised)?;
        let schedule = BatchSchedule::new(self.cfg.ratio(), split.labeled.len(), split.unlabeled.len(), self.cfg.seed)?;
        let epoch_key = self.progress.epochs_done;
        let per_epoch = schedule.batches_per_epoch();
        let mut sums = [(0.0f64, 0.0f64, 0usize); 2];
        for (b, items) in schedule.epoch(epoch_key).iter().enumerate() {
            let head_type = head_type_for(self.cfg.alternation, self.progress.epoch, self.progress.epoch * per_epoch + b);
            let batch = schedule.materialize(items, &pools, &self.cfg.augmentation, self.progress.batches_done);
            let opts = StepOptions { batch: b, ..opts_base };
            let l = train_step(&mut self.model, &mut self.optim, &batch, head_type, &opts, lr)?;
            let slot = &mut sums[head_type as usize];
            slot.0 += l.supervised;
            slot.1 += l.unsupervised;
            slot.2 += 1;
            self.progress.batches_done += 1;
        }
        let validation = if supervised && !split.validation.is_empty() {
            Some(self.validate(&split.validation)?)
        } else {
            None
        };
        let mut rows = Vec::new();
        for head_type in [HeadType::Normal, HeadType::Overcluster] {
            let (s, u, count) = sums[head_type as usize];
            if count == 0 {
                continue;
            }
            let val = validation.as_ref().map(|v| v[head_type as usize]);
            rows.push(MetricRow {
                phase,
                epoch: self.progress.epoch,
                head_type,
                loss_s: s / count as f64,
                loss_u: u / count as f64,
                val_f1: val.map(|v| v.0),
                val_acc: val.map(|v| v.1),
            });
        }
        let mut improved = false;
        if let Some(v) = &validation {
            let f1 = v[HeadType::Normal as usize].0;
            if self.best.as_ref().is_none_or(|b| f1 > b.val_f1) {
                self.best = Some(BestSnapshot {
                    val_f1: f1,
                    phase,
                    epoch: self.progress.epoch,
                    model: self.model.clone(),
                });
                improved = true;
            }
        }
        log::info!(
            "{phase} epoch {}: {}",
            self.progress.epoch,
            rows.iter()
                .map(|r| format!(
                    "{} loss_s={:.4} loss_u={:.4} val_f1={}",
                    r.head_type,
                    r.loss_s,
                    r.loss_u,
                    r.val_f1.map_or("-".into(), |v| format!("{v:.4}"))
                ))
                .collect::<Vec<_>>()
                .join(", ")
        );
        self.history.extend(rows.iter().cloned());
        let report = EpochReport {
            phase,
            epoch: self.progress.epoch,
            rows,
            improved,
        };
        self.progress.epoch += 1;
        self.progress.epochs_done += 1;
        Ok(Some(report))
    }

    /// Best-head `(macro-F1, accuracy)` on validation for each head type;
    /// overclustering heads are mapped on the validation split itself.
    fn validate(&self, validation: &[Sample]) -> Result<[(f64, f64); 2]> {
        let truths = hard_truths(validation)?;
        let preds = predict_samples(&self.model, &self.cfg.augmentation, validation)?;
        let cfg = self.model.config();
        let mut out = [(f64::NEG_INFINITY, 0.0); 2];
        for head_type in [HeadType::Normal, HeadType::Overcluster] {
            for j in 0..cfg.heads_per_type {
                let p = preds.head(head_type, j);
                let mapped = match head_type {
                    HeadType::Normal => p.to_vec(),
                    HeadType::Overcluster => cluster_mapping(p, &truths, cfg.k, cfg.k_gt, "val")?.apply(p),
                };
                let f1 = macro_f1(&mapped, &truths, cfg.k_gt)?;
                if f1 > out[head_type as usize].0 {
                    out[head_type as usize] = (f1, accuracy(&mapped, &truths)?);
                }
            }
        }
        Ok(out)
    }

    /// Runs every remaining epoch.
    pub fn run(&mut self, split: &DatasetSplit) -> Result<()> {
        while self.run_epoch(split)?.is_some() {}
        Ok(())
    }

    /// Serializes everything needed to continue the run.
    pub fn state_container(&self) -> Container {
        let mut c = self.model.to_container();
        let model_meta = std::mem::take(&mut c.metadata);
        c.kind = "train-state".into();
        let adam = self.optim.export(&mut c);
        let best = self.best.as_ref().map(|b| {
            for p in b.model.params() {
                c.insert(format!("best.{}", p.name), p.shape.clone(), p.value.clone());
            }
            serde_json::json!({ "val_f1": b.val_f1, "phase": b.phase, "epoch": b.epoch })
        });
        c.metadata = serde_json::json!({
            "model": model_meta,
            "config": self.cfg.to_toml(),
            "progress": self.progress,
            "history": self.history,
            "adam": adam,
            "best": best,
        });
        c
    }

    pub fn save_state(&self, path: &Path) -> Result<()> {
        self.state_container().save(path)
    }

    pub fn from_state(c: &Container) -> Result<Self> {
        c.expect_kind("train-state")?;
        let meta = &c.metadata;
        let bad = |what: &str, e: &dyn std::fmt::Display| Error::Checkpoint(format!("training state {what}: {e}"));
        let cfg_text = meta["config"].as_str().ok_or_else(|| bad("config", &"missing"))?;
        let cfg = TrainConfig::from_toml(cfg_text)?;
        let model_part = |prefix: &str, phase: Option<serde_json::Value>| -> Result<Model> {
            let mut sub = Container::new("model", meta["model"].clone());
            if let Some(p) = phase {
                sub.metadata["phase"] = p;
            }
            for (name, t) in &c.tensors {
                let plain = match prefix {
                    "" if !name.starts_with("adam.") && !name.starts_with("best.") => Some(name.as_str()),
                    "" => None,
                    _ => name.strip_prefix(prefix),
                };
                if let Some(plain) = plain {
                    sub.insert(plain, t.shape.clone(), t.data.clone());
                }
            }
            Model::from_container(&sub)
        };
        let model = model_part("", None)?;
        let best = match &meta["best"] {
            serde_json::Value::Null => None,
            b => Some(BestSnapshot {
                val_f1: b["val_f1"].as_f64().ok_or_else(|| bad("best score", &"missing"))?,
                phase: serde_json::from_value(b["phase"].clone()).map_err(|e| bad("best phase", &e))?,
                epoch: b["epoch"].as_u64().ok_or_else(|| bad("best epoch", &"missing"))? as usize,
                model: model_part("best.", Some(b["phase"].clone()))?,
            }),
        };
        Ok(Trainer {
            optim: Adam::import(&meta["adam"], c)?,
            progress: serde_json::from_value(meta["progress"].clone()).map_err(|e| bad("progress", &e))?,
            history: serde_json::from_value(meta["history"].clone()).map_err(|e| bad("history", &e))?,
            cfg,
            model,
            best,
        })
    }

    pub fn load_state(path: &Path) -> Result<Self> {
        Self::from_state(&Container::load(path)?)
    }
}

/// Options for [`train_in_dir`].
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Continue from the directory's saved state.
    pub resume: bool,
    /// Stop after this many epochs in this invocation.
    pub max_epochs: Option<usize>,
    /// Checkpoint whose backbone weights initialize a fresh run.
    pub init_backbone: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    pub finished: bool,
    pub best_checkpoint: PathBuf,
    pub last_checkpoint: PathBuf,
    pub epochs_run: usize,
}

/// Trains inside a run directory. The config is written before the first
/// step; metrics, state and checkpoints are refreshed after every epoch.
pub fn train_in_dir(
    cfg: &TrainConfig,
    split: &DatasetSplit,
    k_gt: usize,
    dir: &Path,
    opts: &RunOptions,
) -> Result<RunOutcome> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let config_path = dir.join(CONFIG_FILE);
    let state_path = dir.join(STATE_FILE);
    let mut trainer = if opts.resume {
        if !state_path.is_file() {
            return Err(Error::config("resume", format!("no saved state in {}", dir.display())));
        }
        let t = Trainer::load_state(&state_path)?;
        if t.config() != cfg {
            return Err(Error::config(
                "resume",
                "the given config differs from the one the run was started with",
            ));
        }
        t
    } else {
        cfg.validate()?;
        cfg.save(&config_path)?;
        let mut t = Trainer::new(cfg.clone(), split, k_gt)?;
        if let Some(path) = &opts.init_backbone {
            t.model_mut().load_backbone_from(path)?;
        }
        t
    };
    let best_path = dir.join(BEST_CHECKPOINT);
    let last_path = dir.join(LAST_CHECKPOINT);
    let mut epochs_run = 0;
    while opts.max_epochs.is_none_or(|m| epochs_run < m) {
        let Some(report) = trainer.run_epoch(split)? else {
            break;
        };
        epochs_run += 1;
        write_metrics(&dir.join(METRICS_FILE), trainer.history())?;
        trainer.model().save(&last_path)?;
        if report.improved {
            trainer.best_model().save(&best_path)?;
        }
        trainer.save_state(&state_path)?;
    }
    let finished = trainer.is_finished();
    if finished && trainer.best().is_none() {
        trainer.model().save(&best_path)?;
    }
    if finished && epochs_run == 0 && !last_path.is_file() {
        trainer.model().save(&last_path)?;
    }
    Ok(RunOutcome {
        finished,
        best_checkpoint: best_path,
        last_checkpoint: last_path,
        epochs_run,
    })
}
