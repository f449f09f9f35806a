//! End-to-end checks of the `dood` executable.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use dood::checkpoint::{load_checkpoint, Model};
use dood::tensor_store::DType;
use dood::read_tensor;

fn dood(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dood"))
        .args(args)
        .env_remove("DOOD_SEED")
        .output()
        .expect("spawn dood")
}

fn ok(args: &[&str]) {
    let out = dood(args);
    assert!(
        out.status.success(),
        "dood {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Tiny benchmark with an oracle checkpoint.
fn small_bench(dir: &Path, dim: &str) {
    ok(&[
        "synth", "--out", p(dir), "--n-maps", "3", "--n-train-maps", "2", "--height", "8", "--width", "8",
        "--dim", dim, "--oracle", "--seed", "4",
    ]);
}

#[test]
fn score_rejects_channel_mismatch() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    small_bench(&a, "16");
    small_bench(&b, "8");
    let out = dood(&[
        "score", "--checkpoint", p(&a.join("oracle")), "--features", p(&b.join("test/features")),
        "--out", p(&tmp.path().join("s")),
    ]);
    assert_eq!(out.status.code(), Some(3));
    let err = String::from_utf8_lossy(&out.stderr);
    assert_eq!(err.lines().count(), 1, "{err}");
    assert!(err.contains("C = 16") && err.contains("C = 8"), "{err}");
}

#[test]
fn eval_on_empty_directory_fails() {
    let tmp = tempfile::tempdir().unwrap();
    let empty = tmp.path().join("empty");
    fs::create_dir(&empty).unwrap();
    let out = dood(&["eval", "--scores", p(&empty), "--masks", p(&empty), "--out", p(&tmp.path().join("e"))]);
    assert_eq!(out.status.code(), Some(3));
    assert!(!out.stderr.is_empty());
}

#[test]
fn usage_errors_exit_with_2() {
    assert_eq!(dood(&["train"]).status.code(), Some(2));
    assert_eq!(dood(&["score", "--timesteps", "9..3"]).status.code(), Some(2));
    let tmp = tempfile::tempdir().unwrap();
    small_bench(tmp.path(), "16");
    // baselines are single-timestep only
    let out = dood(&[
        "score", "--checkpoint", p(&tmp.path().join("oracle")), "--features",
        p(&tmp.path().join("test/features")), "--out", p(&tmp.path().join("s")), "--score-kind", "mse-score",
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn short_training_writes_loadable_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    small_bench(tmp.path(), "16");
    let ck = tmp.path().join("ck");
    ok(&[
        "train", "--features", p(&tmp.path().join("train/features")), "--out", p(&ck), "--iterations", "10",
        "--batch-size", "32", "--threads", "1",
    ]);
    let loaded = load_checkpoint(&ck).unwrap();
    assert!(matches!(loaded.model, Model::Mlp(_)));
    assert_eq!(loaded.train.unwrap().iterations, 10);
    assert_eq!(read_tensor(ck.join("loss.dtf")).unwrap().shape(), &[10, 1]);
    let manifest = fs::read_to_string(ck.join("run_manifest.txt")).unwrap();
    assert!(manifest.starts_with("command=train\n"));
    assert!(manifest.contains("\niterations=10\n"));
}

#[test]
fn score_writes_patch_pixel_and_heatmap() {
    let tmp = tempfile::tempdir().unwrap();
    small_bench(tmp.path(), "16");
    let s = tmp.path().join("s");
    ok(&[
        "score", "--checkpoint", p(&tmp.path().join("oracle")), "--features",
        p(&tmp.path().join("test/features/map_0001.dtf")), "--out", p(&s), "--timesteps", "1..5", "--upsample",
        "2", "--heatmap",
    ]);
    assert_eq!(read_tensor(s.join("patch/map_0001.dtf")).unwrap().shape(), &[8, 8]);
    assert_eq!(read_tensor(s.join("pixel/map_0001.dtf")).unwrap().shape(), &[16, 16]);
    let heat = read_tensor(s.join("heatmap/map_0001.dtf")).unwrap();
    assert_eq!(heat.dtype(), DType::Uint8);
    let h = heat.as_u8().unwrap();
    assert_eq!((*h.iter().min().unwrap(), *h.iter().max().unwrap()), (0, 255));
    assert!(s.join("run_manifest.txt").is_file());
}

#[test]
fn ablate_table_shape_and_oracle_ceiling() {
    let tmp = tempfile::tempdir().unwrap();
    small_bench(tmp.path(), "16");
    let run = |kinds: &str, ts: &str, out: &str| {
        ok(&[
            "ablate", "--bench", p(&tmp.path().join("test")), "--checkpoint", p(&tmp.path().join("oracle")),
            "--out", p(&tmp.path().join(out)), "--kinds", kinds, "--timesteps", ts,
        ]);
        fs::read_to_string(tmp.path().join(out).join("ablate.tsv")).unwrap()
    };
    let single = run("directional", "1", "a1");
    let rows: Vec<&str> = single.lines().skip(1).collect();
    assert_eq!(rows.len(), 2);
    assert!(rows[0].starts_with("directional\t1\t"));
    assert!(rows[1].starts_with("directional\taggregated\t"));

    let table = run("directional,mse-score", "1..4", "a2");
    let rows: Vec<Vec<&str>> = table.lines().skip(1).map(|l| l.split('\t').collect()).collect();
    assert_eq!(rows.len(), 2 * 4 + 1);
    for r in rows.iter().filter(|r| r[0] == "directional") {
        let ap: f64 = r[2].parse().unwrap();
        assert!(ap >= 0.99, "{r:?}");
    }
    let curve = read_tensor(tmp.path().join("a2/ap_curve.dtf")).unwrap();
    assert_eq!(curve.shape(), &[2, 4]);
}

#[test]
fn seed_comes_from_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let run = |dir: &str, env: Option<&str>, extra: &[&str]| {
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_dood"));
        cmd.env_remove("DOOD_SEED");
        if let Some(s) = env {
            cmd.env("DOOD_SEED", s);
        }
        let out_dir = tmp.path().join(dir);
        let mut args = vec!["synth", "--out", p(&out_dir), "--n-maps", "1", "--n-train-maps", "1", "--height", "4", "--width", "4"];
        args.extend_from_slice(extra);
        assert!(cmd.args(&args).status().unwrap().success());
        fs::read(out_dir.join("test/features/map_0000.dtf")).unwrap()
    };
    let from_env = run("env", Some("11"), &[]);
    let from_flag = run("flag", None, &["--seed", "11"]);
    let default = run("default", None, &[]);
    assert_eq!(from_env, from_flag);
    assert_ne!(from_env, default);
    let manifest = fs::read_to_string(tmp.path().join("env/run_manifest.txt")).unwrap();
    assert!(manifest.contains("\nseed=11\n"));
}

#[test]
fn stats_report_has_one_row_per_channel() {
    let tmp = tempfile::tempdir().unwrap();
    small_bench(tmp.path(), "8");
    let out = tmp.path().join("st");
    ok(&["stats", "--features", p(&tmp.path().join("train/features")), "--out", p(&out)]);
    let report = fs::read_to_string(out.join("stats.tsv")).unwrap();
    assert_eq!(report.lines().count(), 1 + 8);
    assert!(report.starts_with("channel\tmin\tmax\tmean\tstd\n"));
}

#[test]
fn compound_scoring_with_logits() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(&[
        "synth", "--out", p(d), "--n-maps", "2", "--n-train-maps", "2", "--height", "6", "--width", "6",
        "--pixels-per-patch", "2", "--logit-signal", "2", "--seed", "9",
    ]);
    let ck = d.join("ck");
    ok(&[
        "train", "--features", p(&d.join("train/features")), "--out", p(&ck), "--iterations", "5",
        "--batch-size", "16", "--learning-rate", "1e-2", "--score-stats", "--logits", p(&d.join("train/logits")),
        "--timesteps", "1..3",
    ]);
    let s = d.join("s");
    ok(&[
        "score", "--checkpoint", p(&ck), "--features", p(&d.join("test/features")), "--logits",
        p(&d.join("test/logits")), "--out", p(&s), "--timesteps", "1..3",
    ]);
    for sub in ["pixel", "uncertainty", "compound"] {
        assert_eq!(read_tensor(s.join(sub).join("map_0000.dtf")).unwrap().shape(), &[12, 12], "{sub}");
    }
    ok(&["eval", "--scores", p(&s.join("compound")), "--masks", p(&d.join("test/masks")), "--out", p(&d.join("e"))]);
    let report = fs::read_to_string(d.join("e/eval_report.tsv")).unwrap();
    assert_eq!(report.lines().count(), 1 + 2 + 1);

    // compounding needs uncertainty constants in the checkpoint
    let bare = d.join("bare");
    ok(&["train", "--features", p(&d.join("train/features")), "--out", p(&bare), "--iterations", "2", "--batch-size", "8"]);
    let out = dood(&[
        "score", "--checkpoint", p(&bare), "--features", p(&d.join("test/features")), "--logits",
        p(&d.join("test/logits")), "--out", p(&d.join("s2")),
    ]);
    assert_eq!(out.status.code(), Some(3));
}
