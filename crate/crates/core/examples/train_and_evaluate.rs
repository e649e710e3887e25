//! End to end on a miniature synthetic dataset: generate, train all three
//! phases into a run directory, score the best checkpoint and draw figures.
//!
//! RUST_LOG=info cargo run --release --example train_and_evaluate

use foc::data::{load_manifest, PartitionConfig};
use foc::evaluator::{evaluate_model, file_sha256, EvalSet};
use foc::network::Model;
use foc::plot;
use foc::synce::{build_synce, SynSubsetKind, SynceConfig, CLASS_NAMES};
use foc::trainer::{read_metrics, train_in_dir, PhaseValues, RunOptions, TrainConfig, METRICS_FILE};

fn main() -> foc::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let root = std::env::temp_dir().join("foc-train-demo");
    let data = root.join("data");
    build_synce(
        &SynceConfig {
            certain_count: 120,
            fuzzy_count: 60,
            image_size: 24,
            seed: 0,
        },
        &data,
    )?;

    let cfg = TrainConfig {
        batch_size: 24,
        repetitions: 2,
        heads_per_type: 3,
        epochs: PhaseValues {
            warm_up: 3,
            head_finetune: 2,
            main: 6,
        },
        lr: PhaseValues {
            warm_up: 1e-3,
            head_finetune: 1e-3,
            main: 1e-3,
        },
        ..TrainConfig::default()
    };
    let partition = PartitionConfig {
        val_fraction: cfg.val_fraction,
        seed: cfg.seed,
    };
    let (k_gt, split) = load_manifest(&data, &data.join(SynSubsetKind::Fuzzy.manifest_name()), &partition)?;
    let run = root.join("run");
    let outcome = train_in_dir(&cfg, &split, k_gt, &run, &RunOptions::default())?;

    let model = Model::load(&outcome.best_checkpoint)?;
    let validation = EvalSet {
        name: "validation",
        samples: &split.validation,
    };
    let target = EvalSet {
        name: "unlabeled",
        samples: &split.unlabeled,
    };
    let mut report = evaluate_model(&model, &cfg.augmentation, &validation, &target, &target)?;
    report.checkpoint_sha256 = Some(file_sha256(&outcome.best_checkpoint)?);
    report.save(&run.join("report.json"))?;
    println!(
        "unlabeled split: normal head {} macro-F1 {:.3}, overclustering head {} mapped macro-F1 {:.3}, consistency {:.3}",
        report.best_normal.head,
        report.best_normal.macro_f1,
        report.best_overcluster.head,
        report.best_overcluster.macro_f1,
        report.consistency.overall
    );

    plot::plot_loss_curves(&read_metrics(&run.join(METRICS_FILE))?, &run.join(plot::LOSS_FIGURE))?;
    plot::plot_per_class_f1(&report, Some(&CLASS_NAMES), &run.join(plot::F1_FIGURE))?;
    println!("run directory: {}", run.display());
    Ok(())
}
