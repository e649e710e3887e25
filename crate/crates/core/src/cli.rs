//! The `foc` command line. [`run`] parses arguments, executes one command
//! and returns the process exit status.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::data::{load_manifest, read_samples, DatasetSplit, PartitionConfig, Sample};
use crate::error::{Error, Result};
use crate::evaluator::{
    consistency_from_experts, evaluate_model, file_sha256, predict_samples, read_expert_judgments,
    write_expert_judgments, ConsistencyReport, EvalReport, EvalSet, ExpertJudgment,
};
use crate::image::Image;
use crate::network::{HeadType, Model};
use crate::plot;
use crate::synce::{build_synce, SynSubsetKind, SynceConfig, HOLDOUT_MANIFEST};
use crate::trainer::{read_metrics, train_in_dir, Mode, RunOptions, TrainConfig, CONFIG_FILE};

pub const DATA_ROOT_ENV: &str = "FOC_DATA_ROOT";
pub const SEED_ENV: &str = "FOC_SEED";

#[derive(Debug, Parser)]
#[command(name = "foc", version, about = "Semi-supervised training with overclustering heads for fuzzy labels")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic colored-ellipse dataset.
    GenSynce(GenSynceArgs),
    /// Train a model into a run directory.
    Train(TrainArgs),
    /// Score a checkpoint and write a JSON report.
    Eval(EvalArgs),
    /// Cluster consistency from expert judgments or the ground-truth proxy.
    Consistency(ConsistencyArgs),
    /// Emit figures from metrics, reports and checkpoints.
    Plot(PlotArgs),
}

#[derive(Debug, Args)]
pub struct GenSynceArgs {
    #[arg(long, env = DATA_ROOT_ENV)]
    pub out: PathBuf,
    #[arg(long, env = SEED_ENV, default_value_t = 0)]
    pub seed: u64,
    /// Certain images per split.
    #[arg(long, default_value_t = 1800)]
    pub certain: usize,
    /// Fuzzy images per split.
    #[arg(long, default_value_t = 1000)]
    pub fuzzy: usize,
    #[arg(long, default_value_t = 32)]
    pub image_size: usize,
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// Dataset root; manifest image paths are relative to it.
    #[arg(long, env = DATA_ROOT_ENV)]
    pub data: Option<PathBuf>,
    /// SynCE labeling subset.
    #[arg(long, conflicts_with = "manifest")]
    pub subset: Option<SynSubsetKind>,
    /// Manifest file, relative to the data root unless absolute.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

impl DataArgs {
    fn root(&self) -> Result<&Path> {
        self.data
            .as_deref()
            .ok_or_else(|| Error::config("data", format!("pass --data or set {DATA_ROOT_ENV}")))
    }

    fn manifest_path(&self) -> Result<PathBuf> {
        let root = self.root()?;
        Ok(match (&self.manifest, self.subset) {
            (Some(m), _) => root.join(m),
            (None, Some(kind)) => root.join(kind.manifest_name()),
            (None, None) => root.join(SynSubsetKind::Fuzzy.manifest_name()),
        })
    }

    fn load(&self, cfg: &TrainConfig) -> Result<(usize, DatasetSplit)> {
        let partition = PartitionConfig {
            val_fraction: cfg.val_fraction,
            seed: cfg.seed,
        };
        load_manifest(self.root()?, &self.manifest_path()?, &partition)
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// TOML run config; defaults apply to missing keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub data: DataArgs,
    /// Run directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub mode: Option<Mode>,
    #[arg(long, env = SEED_ENV)]
    pub seed: Option<u64>,
    /// Continue the run saved in the run directory.
    #[arg(long)]
    pub resume: bool,
    /// Stop after this many epochs.
    #[arg(long)]
    pub max_epochs: Option<usize>,
    /// Checkpoint providing initial backbone weights.
    #[arg(long)]
    pub init_backbone: Option<PathBuf>,
}

/// Split of the loaded dataset a report is computed on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum TargetSplit {
    Unlabeled,
    Validation,
    Labeled,
    /// Every image of the data root's holdout manifest.
    Holdout,
}

impl TargetSplit {
    fn name(self) -> &'static str {
        match self {
            TargetSplit::Unlabeled => "unlabeled",
            TargetSplit::Validation => "validation",
            TargetSplit::Labeled => "labeled",
            TargetSplit::Holdout => "holdout",
        }
    }
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, value_enum, default_value_t = TargetSplit::Unlabeled)]
    pub split: TargetSplit,
    #[arg(long)]
    pub report: PathBuf,
    /// Run config for preprocessing and partitioning; by default the
    /// `config.toml` next to the checkpoint, if any.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, env = SEED_ENV)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct ConsistencyArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Expert CSV `path,cluster,consistent`; without it the ground-truth
    /// proxy is used.
    #[arg(long)]
    pub judgments: Option<PathBuf>,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, value_enum, default_value_t = TargetSplit::Unlabeled)]
    pub split: TargetSplit,
    #[arg(long)]
    pub report: PathBuf,
    /// Also write the proxy judgments as an expert file to edit.
    #[arg(long)]
    pub export_judgments: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, env = SEED_ENV)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct PlotArgs {
    #[arg(long)]
    pub metrics: Option<PathBuf>,
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Checkpoint whose best overclustering head drives the cluster grid.
    #[arg(long, requires = "data")]
    pub checkpoint: Option<PathBuf>,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, value_enum, default_value_t = TargetSplit::Unlabeled)]
    pub split: TargetSplit,
    #[arg(long, default_value_t = 10)]
    pub per_cluster: usize,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

/// Consistency output file.
#[derive(Debug, Clone, PartialEq, Serialize, serde::Deserialize)]
pub struct ConsistencyOutput {
    pub checkpoint_sha256: String,
    /// `expert` or `proxy`.
    pub source: String,
    /// Overclustering head the proxy judgments were taken from.
    pub head: Option<usize>,
    pub consistency: ConsistencyReport,
}

/// Parses `args` (including the program name) and executes the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(&cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn execute(command: &Command) -> Result<()> {
    match command {
        Command::GenSynce(a) => gen_synce(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Consistency(a) => consistency(a),
        Command::Plot(a) => plot_cmd(a),
    }
}

fn gen_synce(a: &GenSynceArgs) -> Result<()> {
    let cfg = SynceConfig {
        certain_count: a.certain,
        fuzzy_count: a.fuzzy,
        image_size: a.image_size,
        seed: a.seed,
    };
    let summary = build_synce(&cfg, &a.out)?;
    println!("{} images in {}", summary.images, summary.out_dir.display());
    for (kind, [train, val, unlabeled]) in &summary.manifests {
        println!("{:<6} train {train:>5}  val {val:>5}  unlabeled {unlabeled:>5}", kind.as_str());
    }
    Ok(())
}

fn train(a: &TrainArgs) -> Result<()> {
    let mut cfg = match (&a.config, a.resume) {
        (Some(path), _) => TrainConfig::load(path)?,
        (None, true) => TrainConfig::load(&a.out.join(CONFIG_FILE))?,
        (None, false) => TrainConfig::default(),
    };
    if let Some(mode) = a.mode {
        if mode != cfg.mode {
            cfg = cfg.with_mode(mode);
        }
    }
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    let (k_gt, split) = a.data.load(&cfg)?;
    log::info!(
        "{} labeled, {} unlabeled, {} validation samples, {k_gt} classes",
        split.labeled.len(),
        split.unlabeled.len(),
        split.validation.len()
    );
    let opts = RunOptions {
        resume: a.resume,
        max_epochs: a.max_epochs,
        init_backbone: a.init_backbone.clone(),
    };
    let outcome = train_in_dir(&cfg, &split, k_gt, &a.out, &opts)?;
    println!(
        "{} epochs run, {}; best checkpoint {}",
        outcome.epochs_run,
        if outcome.finished { "finished" } else { "stopped early" },
        outcome.best_checkpoint.display()
    );
    Ok(())
}

fn eval_config(explicit: Option<&Path>, checkpoint: &Path, seed: Option<u64>) -> Result<TrainConfig> {
    let beside = checkpoint.parent().map(|p| p.join(CONFIG_FILE));
    let mut cfg = match (explicit, beside) {
        (Some(p), _) => TrainConfig::load(p)?,
        (None, Some(p)) if p.is_file() => TrainConfig::load(&p)?,
        _ => TrainConfig::default(),
    };
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

/// Loads the dataset and the requested target samples.
fn target_samples(data: &DataArgs, cfg: &TrainConfig, split: TargetSplit) -> Result<(DatasetSplit, Vec<Sample>)> {
    let (_, loaded) = data.load(cfg)?;
    let target = match split {
        TargetSplit::Unlabeled => loaded.unlabeled.clone(),
        TargetSplit::Validation => loaded.validation.clone(),
        TargetSplit::Labeled => loaded.labeled.clone(),
        TargetSplit::Holdout => read_samples(data.root()?, &data.root()?.join(HOLDOUT_MANIFEST))?.1,
    };
    if target.is_empty() {
        return Err(Error::Data(format!("the {} split is empty", split.name())));
    }
    Ok((loaded, target))
}

fn report_for(
    checkpoint: &Path,
    data: &DataArgs,
    cfg: &TrainConfig,
    split: TargetSplit,
) -> Result<(EvalReport, Vec<Sample>, Model)> {
    let model = Model::load(checkpoint)?;
    let (loaded, target) = target_samples(data, cfg, split)?;
    let validation = EvalSet {
        name: "validation",
        samples: &loaded.validation,
    };
    let target_set = EvalSet {
        name: split.name(),
        samples: &target,
    };
    let mut report = evaluate_model(&model, &cfg.augmentation, &validation, &target_set, &target_set)?;
    report.checkpoint_sha256 = Some(file_sha256(checkpoint)?);
    Ok((report, target, model))
}

fn eval(a: &EvalArgs) -> Result<()> {
    let cfg = eval_config(a.config.as_deref(), &a.checkpoint, a.seed)?;
    let (report, _, _) = report_for(&a.checkpoint, &a.data, &cfg, a.split)?;
    report.save(&a.report)?;
    println!(
        "{} ({} images): normal head {} macro-F1 {:.4} accuracy {:.4}; overclustering head {} macro-F1 {:.4} accuracy {:.4}",
        a.split.name(),
        report.target_size,
        report.best_normal.head,
        report.best_normal.macro_f1,
        report.best_normal.accuracy,
        report.best_overcluster.head,
        report.best_overcluster.macro_f1,
        report.best_overcluster.accuracy,
    );
    Ok(())
}

fn consistency(a: &ConsistencyArgs) -> Result<()> {
    let checkpoint_sha256 = file_sha256(&a.checkpoint)?;
    let output = if let Some(path) = &a.judgments {
        let rows = read_expert_judgments(path)?;
        ConsistencyOutput {
            checkpoint_sha256,
            source: "expert".into(),
            head: None,
            consistency: consistency_from_experts(&rows)?,
        }
    } else {
        let cfg = eval_config(a.config.as_deref(), &a.checkpoint, a.seed)?;
        let (report, target, model) = report_for(&a.checkpoint, &a.data, &cfg, a.split)?;
        if let Some(path) = &a.export_judgments {
            let head = report.best_overcluster.head;
            let preds = predict_samples(&model, &cfg.augmentation, &target)?;
            let clusters = preds.head(HeadType::Overcluster, head);
            let mapped = report.mapping.apply(clusters);
            let rows: Vec<ExpertJudgment> = target
                .iter()
                .zip(clusters)
                .zip(mapped)
                .map(|((s, &cluster), class)| ExpertJudgment {
                    path: s.id.clone(),
                    cluster,
                    consistent: s.hard_label() == Some(class),
                })
                .collect();
            write_expert_judgments(path, &rows)?;
        }
        ConsistencyOutput {
            checkpoint_sha256,
            source: "proxy".into(),
            head: Some(report.best_overcluster.head),
            consistency: report.consistency,
        }
    };
    let text = serde_json::to_string_pretty(&output).expect("report serializes");
    std::fs::write(&a.report, text + "\n").map_err(|e| Error::io(&a.report, e))?;
    println!(
        "{} consistency: overall {:.4}, per-cluster mean {:.4} (std {:.4}) over {} clusters",
        output.source,
        output.consistency.overall,
        output.consistency.mean,
        output.consistency.std,
        output.consistency.per_cluster.len()
    );
    Ok(())
}

fn plot_cmd(a: &PlotArgs) -> Result<()> {
    if a.metrics.is_none() && a.report.is_none() && a.checkpoint.is_none() {
        return Err(Error::config("plot", "nothing to plot; pass --metrics, --report or --checkpoint"));
    }
    std::fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    let mut written = Vec::new();
    if let Some(path) = &a.metrics {
        let out = a.out.join(plot::LOSS_FIGURE);
        plot::plot_loss_curves(&read_metrics(path)?, &out)?;
        written.push(out);
    }
    if let Some(path) = &a.report {
        let report = EvalReport::load(path)?;
        let names = (report.k_gt == crate::synce::NUM_CLASSES).then_some(&crate::synce::CLASS_NAMES[..]);
        let out = a.out.join(plot::F1_FIGURE);
        plot::plot_per_class_f1(&report, names, &out)?;
        written.push(out);
    }
    if let Some(checkpoint) = &a.checkpoint {
        let cfg = eval_config(a.config.as_deref(), checkpoint, None)?;
        let (report, target, model) = report_for(checkpoint, &a.data, &cfg, a.split)?;
        let preds = predict_samples(&model, &cfg.augmentation, &target)?;
        let clusters = preds.head(HeadType::Overcluster, report.best_overcluster.head);
        let images: Vec<&Image> = target.iter().map(|s| &s.image).collect();
        let out = a.out.join(plot::GRID_FIGURE);
        plot::cluster_grid(&images, clusters, a.per_cluster, &out)?;
        written.push(out);
    }
    for p in written {
        println!("wrote {}", p.display());
    }
    Ok(())
}
