use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use foc::cli::ConsistencyOutput;
use foc::data::read_manifest;
use foc::evaluator::{file_sha256, EvalReport};
use foc::trainer::{read_metrics, TrainConfig};

fn foc(args: &[&str], envs: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_foc"));
    cmd.args(args).env_remove("FOC_DATA_ROOT").env_remove("FOC_SEED").env("RUST_LOG", "warn");
    for (k, v) in envs {
        cmd.env(k, v);
    }
    cmd.output().expect("binary runs")
}

fn ok(out: Output) -> Output {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn mini_synce(dir: &Path, seed: &str) -> PathBuf {
    let data = dir.join("data");
    ok(foc(
        &["gen-synce", "--out", s(&data), "--seed", seed, "--certain", "18", "--fuzzy", "10", "--image-size", "16"],
        &[],
    ));
    data
}

const SMALL_RUN: &str = "
batch_size = 8
repetitions = 1
heads_per_type = 2

[epochs]
warm_up = 1
head_finetune = 1
main = 2
";

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let p = dir.join("run.toml");
    std::fs::write(&p, text).unwrap();
    p
}

#[test]
fn gen_synce_miniature_counts_and_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let data = mini_synce(dir.path(), "4");
    let again = dir.path().join("again");
    ok(foc(
        &["gen-synce", "--out", s(&again), "--certain", "18", "--fuzzy", "10", "--image-size", "16"],
        &[("FOC_SEED", "4")],
    ));
    for name in ["ideal.csv", "real.csv", "fuzzy.csv", "holdout.csv", "synce_meta.csv"] {
        assert_eq!(
            file_sha256(&data.join(name)).unwrap(),
            file_sha256(&again.join(name)).unwrap(),
            "{name}"
        );
    }
    let count = |name: &str, split: &str| {
        let (_, rows) = read_manifest(&data.join(name)).unwrap();
        rows.iter().filter(|r| r.split.as_str() == split).count()
    };
    // 28 images per generated split; fuzzy training images become unlabeled.
    assert_eq!([count("fuzzy.csv", "train"), count("fuzzy.csv", "val"), count("fuzzy.csv", "unlabeled")], [18, 28, 38]);
    assert_eq!([count("ideal.csv", "train"), count("ideal.csv", "val"), count("ideal.csv", "unlabeled")], [28, 28, 28]);
    assert_eq!(std::fs::read_dir(data.join("images/train")).unwrap().count(), 28);
}

#[test]
fn gen_synce_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(foc(&["gen-synce"], &[("FOC_DATA_ROOT", s(dir.path()))]));
    assert!(String::from_utf8_lossy(&out.stdout).contains("8400 images"));
    for name in ["ideal.csv", "real.csv", "fuzzy.csv", "synce_meta.csv"] {
        assert!(dir.path().join(name).is_file(), "{name}");
    }
    let (k, rows) = read_manifest(&dir.path().join("fuzzy.csv")).unwrap();
    assert_eq!(k, 6);
    let fractional = |votes: &[u64]| votes.iter().filter(|&&v| v > 0).count() > 1;
    assert!(rows.iter().filter(|r| r.split.as_str() == "train").all(|r| !fractional(&r.votes)));
    let fuzzy_unlabeled = rows
        .iter()
        .filter(|r| r.split.as_str() == "unlabeled" && fractional(&r.votes))
        .count();
    assert_eq!(fuzzy_unlabeled, 2000);
}

#[test]
fn foc_light_runs_one_phase_and_resume_matches() {
    let dir = tempfile::tempdir().unwrap();
    let data = mini_synce(dir.path(), "1");
    let cfg = write_config(dir.path(), SMALL_RUN);

    let light = dir.path().join("light");
    ok(foc(
        &["train", "--config", s(&cfg), "--data", s(&data), "--subset", "fuzzy", "--out", s(&light), "--mode", "foc-light"],
        &[],
    ));
    let rows = read_metrics(&light.join("metrics.csv")).unwrap();
    assert!(!rows.is_empty());
    assert!(rows.iter().all(|r| r.phase.as_str() == "main"));

    let full = dir.path().join("full");
    let part = dir.path().join("part");
    let base = ["train", "--config", s(&cfg), "--data", s(&data), "--subset", "fuzzy"];
    ok(foc(&[&base[..], &["--out", s(&full)]].concat(), &[]));
    let first = ok(foc(&[&base[..], &["--out", s(&part), "--max-epochs", "3"]].concat(), &[]));
    assert!(String::from_utf8_lossy(&first.stdout).contains("stopped early"));
    ok(foc(&["train", "--data", s(&data), "--subset", "fuzzy", "--out", s(&part), "--resume"], &[]));
    assert_eq!(
        std::fs::read(full.join("metrics.csv")).unwrap(),
        std::fs::read(part.join("metrics.csv")).unwrap()
    );
    assert_eq!(
        file_sha256(&full.join("last.ckpt")).unwrap(),
        file_sha256(&part.join("last.ckpt")).unwrap()
    );
}

#[test]
fn seed_flag_wins_over_environment() {
    let dir = tempfile::tempdir().unwrap();
    let data = mini_synce(dir.path(), "1");
    let cfg = write_config(dir.path(), "mode = \"foc-light\"\nlambda_u = 0.0\nrepetitions = 1\nheads_per_type = 1\nbatch_size = 8\nepochs.main = 1\n");
    let env_run = dir.path().join("env");
    ok(foc(
        &["train", "--config", s(&cfg), "--subset", "ideal", "--out", s(&env_run)],
        &[("FOC_SEED", "5"), ("FOC_DATA_ROOT", s(&data))],
    ));
    assert_eq!(TrainConfig::load(&env_run.join("config.toml")).unwrap().seed, 5);
    let flag_run = dir.path().join("flag");
    ok(foc(
        &["train", "--config", s(&cfg), "--subset", "ideal", "--out", s(&flag_run), "--seed", "6", "--data", s(&data)],
        &[("FOC_SEED", "5"), ("FOC_DATA_ROOT", "/nonexistent")],
    ));
    assert_eq!(TrainConfig::load(&flag_run.join("config.toml")).unwrap().seed, 6);
}

#[test]
fn exit_codes_follow_error_kind() {
    let dir = tempfile::tempdir().unwrap();
    let data = mini_synce(dir.path(), "2");
    let run = |cfg_text: &str, data: &Path| {
        let cfg = write_config(dir.path(), cfg_text);
        foc(
            &["train", "--config", s(&cfg), "--data", s(data), "--out", s(&dir.path().join("run"))],
            &[],
        )
    };
    let bad_key = run("lambda_s = -2.0\n", &data);
    assert_eq!(bad_key.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&bad_key.stderr).contains("lambda_s"));

    let unknown = run("[augmentation]\nsharpen = 1\n", &data);
    assert_eq!(unknown.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&unknown.stderr).contains("sharpen"));

    let missing = run(SMALL_RUN, &dir.path().join("nowhere"));
    assert_eq!(missing.status.code(), Some(3));

    let diverge = run(&format!("{SMALL_RUN}\n[lr]\nwarm_up = 1e30\nhead_finetune = 1e30\nmain = 1e30\n"), &data);
    assert_eq!(diverge.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&diverge.stderr).contains("diverged"));

    assert_eq!(foc(&["train", "--bogus"], &[]).status.code(), Some(2));
}

#[test]
fn eval_consistency_and_plot_on_a_memorized_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let data = mini_synce(dir.path(), "3");
    // Long training of a single head on the ideal subset memorizes the
    // labeled images, which makes the checkpoint an oracle for that split.
    let cfg = write_config(
        dir.path(),
        "mode = \"foc-light\"\nlambda_u = 0.0\nrepetitions = 1\nheads_per_type = 1\nr = 0.0\nbatch_size = 14\n\
         epochs.main = 60\nlr.main = 3e-3\n\n[augmentation]\ncrop_min = 1.0\ncrop_max = 1.0\nflip_prob = 0.0\nbrightness = 0.0\nhue_degrees = 0.0\n",
    );
    let run = dir.path().join("run");
    ok(foc(&["train", "--config", s(&cfg), "--data", s(&data), "--subset", "ideal", "--out", s(&run)], &[]));
    let ckpt = run.join("last.ckpt");
    let report_path = dir.path().join("report.json");
    let common = ["--checkpoint", s(&ckpt), "--data", s(&data), "--subset", "ideal", "--split", "labeled"];
    ok(foc(&[&["eval"][..], &common, &["--report", s(&report_path)]].concat(), &[]));
    let report = EvalReport::load(&report_path).unwrap();
    assert_eq!(report.checkpoint_sha256.as_deref(), Some(file_sha256(&ckpt).unwrap().as_str()));
    assert_eq!(report.target_size, 28);
    assert_eq!(report.best_normal.macro_f1, 1.0);
    assert_eq!(report.best_normal.accuracy, 1.0);

    let cons_path = dir.path().join("consistency.json");
    let judgments = dir.path().join("judgments.csv");
    ok(foc(
        &[&["consistency"][..], &common, &["--report", s(&cons_path), "--export-judgments", s(&judgments)]].concat(),
        &[],
    ));
    let proxy: ConsistencyOutput = serde_json::from_str(&std::fs::read_to_string(&cons_path).unwrap()).unwrap();
    assert_eq!(proxy.source, "proxy");
    assert_eq!(proxy.consistency, report.consistency);

    let expert_path = dir.path().join("expert.json");
    ok(foc(
        &["consistency", "--checkpoint", s(&ckpt), "--judgments", s(&judgments), "--report", s(&expert_path)],
        &[],
    ));
    let expert: ConsistencyOutput = serde_json::from_str(&std::fs::read_to_string(&expert_path).unwrap()).unwrap();
    assert_eq!(expert.source, "expert");
    assert_eq!(expert.consistency, proxy.consistency);

    let figures = dir.path().join("figures");
    ok(foc(
        &[&["plot", "--metrics", s(&run.join("metrics.csv")), "--report", s(&report_path), "--out", s(&figures)][..], &common[..]]
            .concat(),
        &[],
    ));
    for name in ["loss_curves.svg", "per_class_f1.svg", "cluster_grid.png"] {
        assert!(std::fs::metadata(figures.join(name)).unwrap().len() > 0, "{name}");
    }
}

#[test]
fn plot_on_a_two_epoch_metrics_file() {
    let dir = tempfile::tempdir().unwrap();
    let data = mini_synce(dir.path(), "5");
    let cfg = write_config(dir.path(), "mode = \"warm-up-only\"\nbatch_size = 8\nheads_per_type = 1\nepochs.warm_up = 2\n");
    let run = dir.path().join("run");
    ok(foc(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&run)], &[]));
    assert_eq!(read_metrics(&run.join("metrics.csv")).unwrap().len(), 4);
    let figures = dir.path().join("figures");
    ok(foc(&["plot", "--metrics", s(&run.join("metrics.csv")), "--out", s(&figures)], &[]));
    assert!(std::fs::metadata(figures.join("loss_curves.svg")).unwrap().len() > 0);
    assert_eq!(foc(&["plot", "--out", s(&figures)], &[]).status.code(), Some(2));
}
