use std::path::Path;
use std::process::{Command, Output};

use uniseg_lab::experiment::{DataSize, DataSource, ExperimentConfig, FixtureName};
use uniseg_lab::losses::LossKind;
use uniseg_lab::model::HeadKind;
use uniseg_lab::trainer::TrainConfig;

const TINY: [&str; 8] = [
    "--train-images",
    "4",
    "--test-images",
    "2",
    "--height",
    "8",
    "--width",
    "8",
];

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_uniseg-lab"))
        .current_dir(dir)
        .args(args)
        .output()
        .unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn write_train_config(dir: &Path, loss: LossKind, head: HeadKind) {
    let config = TrainConfig {
        max_iters: 60,
        ..TrainConfig::new(loss, head)
    };
    std::fs::write(dir.join("train.json"), serde_json::to_string(&config).unwrap()).unwrap();
}

#[test]
fn gen_is_byte_identical_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    let args = ["gen", "--seed", "5", "--out"];
    for out in ["a", "b"] {
        let mut a = args.to_vec();
        a.push(out);
        a.extend(TINY);
        assert_eq!(code(&run(dir.path(), &a)), 0);
    }
    for file in ["manifest.json", "train/FINE/000001.features.bin", "test/COARSE/000000.labels.bin"] {
        let a = std::fs::read(dir.path().join("a").join(file)).unwrap();
        let b = std::fs::read(dir.path().join("b").join(file)).unwrap();
        assert_eq!(a, b, "{file}");
    }
}

#[test]
fn train_on_a_dump_then_relations() {
    let dir = tempfile::tempdir().unwrap();
    let mut gen = vec!["gen", "--out", "data"];
    gen.extend(TINY);
    assert_eq!(code(&run(dir.path(), &gen)), 0);
    write_train_config(dir.path(), LossKind::CrBce, HeadKind::Cosine);
    let out = run(
        dir.path(),
        &["train", "--config", "train.json", "--data", "data", "--out", "run"],
    );
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    for file in [
        "checkpoint.json",
        "metrics.json",
        "loss_curve.csv",
        "stage1_checkpoint.json",
        "similarity.csv",
        "multilabels.csv",
        "tau.json",
        "run.log",
    ] {
        assert!(dir.path().join("run").join(file).exists(), "{file}");
    }
    let metrics: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("run/metrics.json")).unwrap()).unwrap();
    assert_eq!(metrics["iterations"], 60);
    assert!(metrics["eval"]["FINE"]["miou"].is_number());
    let curve = std::fs::read_to_string(dir.path().join("run/loss_curve.csv")).unwrap();
    assert_eq!(curve.lines().count(), 61);

    let out = run(
        dir.path(),
        &["relations", "--checkpoint", "run/stage1_checkpoint.json", "--data", "data", "--out", "rel"],
    );
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.path().join("rel/multilabels.csv").exists());
}

#[test]
fn relations_rejects_a_linear_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    write_train_config(dir.path(), LossKind::Ce, HeadKind::Linear);
    let mut train = vec!["train", "--config", "train.json", "--out", "run"];
    train.extend(TINY);
    assert_eq!(code(&run(dir.path(), &train)), 0);
    let mut rel = vec!["relations", "--checkpoint", "run/checkpoint.json", "--out", "rel"];
    rel.extend(TINY);
    assert_eq!(code(&run(dir.path(), &rel)), 2);
}

#[test]
fn bad_inputs_exit_with_usage_code() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("broken.json"), "{ not json").unwrap();
    std::fs::write(
        dir.path().join("badloss.json"),
        serde_json::to_string(&TrainConfig::new(LossKind::Ce, HeadKind::Linear))
            .unwrap()
            .replace("\"CE\"", "\"HINGE\""),
    )
    .unwrap();
    assert_eq!(code(&run(dir.path(), &["train", "--config", "broken.json"])), 2);
    assert_eq!(code(&run(dir.path(), &["train", "--config", "badloss.json"])), 2);
    assert_eq!(code(&run(dir.path(), &["train"])), 2);
    assert_eq!(code(&run(dir.path(), &["no-such-command"])), 2);
    assert_eq!(code(&run(dir.path(), &["gradcheck", "--loss", "HINGE"])), 2);
}

#[test]
fn gradcheck_passes_and_corruption_fails() {
    let dir = tempfile::tempdir().unwrap();
    let ok = run(dir.path(), &["gradcheck"]);
    assert_eq!(code(&ok), 0);
    let text = String::from_utf8(ok.stdout).unwrap();
    assert_eq!(text.lines().filter(|l| l.starts_with("PASS")).count(), 6);
    let bad = run(dir.path(), &["gradcheck", "--loss", "CE", "--corrupt"]);
    assert_eq!(code(&bad), 1);
    assert!(String::from_utf8(bad.stdout).unwrap().contains("FAIL"));
}

#[test]
fn conflict_demo_writes_both_tables() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&run(dir.path(), &["conflict-demo", "--out", "cd", "--pixels", "20"])), 0);
    let rows = std::fs::read_to_string(dir.path().join("cd/conflict.csv")).unwrap();
    assert_eq!(rows.lines().count(), 1 + 9);
    let rider_ce = rows.lines().find(|l| l.starts_with("CE,rider")).unwrap();
    assert!(rider_ce.ends_with("true"));
    let sweep = std::fs::read_to_string(dir.path().join("cd/overlap_sweep.csv")).unwrap();
    assert_eq!(sweep.lines().count(), 1 + 15);
}

#[test]
fn experiment_covers_every_held_out_dataset_and_loss() {
    let dir = tempfile::tempdir().unwrap();
    let config = ExperimentConfig {
        seeds: vec![0, 1],
        data: DataSize {
            train_images: 4,
            test_images: 2,
            height: 8,
            width: 8,
        },
        train: TrainConfig {
            max_iters: 30,
            ..TrainConfig::new(LossKind::Ce, HeadKind::Linear)
        },
        ..ExperimentConfig::fixture(FixtureName::Default)
    };
    assert_eq!(config.source, DataSource::Fixture(FixtureName::Default));
    std::fs::write(dir.path().join("exp.json"), serde_json::to_string(&config).unwrap()).unwrap();
    let out = run(
        dir.path(),
        &["experiment", "--config", "exp.json", "--out", "exp", "--threads", "2"],
    );
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let agg = std::fs::read_to_string(dir.path().join("exp/results_aggregated.csv")).unwrap();
    assert_eq!(agg.lines().count(), 1 + 2 * 3);
    for held in ["COARSE", "FINE"] {
        for loss in ["CE", "NULL_BCE", "CR_BCE"] {
            assert!(
                agg.lines().any(|l| l.contains(held) && l.contains(&format!(",{loss},"))),
                "{held} {loss}"
            );
        }
    }
    let rows = std::fs::read_to_string(dir.path().join("exp/results.csv")).unwrap();
    assert_eq!(rows.lines().count(), 1 + 2 * 3 * 2);

    // one thread or two, same numbers
    let out = run(
        dir.path(),
        &["experiment", "--config", "exp.json", "--out", "exp1", "--threads", "1"],
    );
    assert_eq!(code(&out), 0);
    assert_eq!(
        std::fs::read(dir.path().join("exp/results.csv")).unwrap(),
        std::fs::read(dir.path().join("exp1/results.csv")).unwrap()
    );
}
