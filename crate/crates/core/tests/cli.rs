use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use hcd_core::harness::{
    read_ablation, read_metrics, ABLATION_FILE, CHECKPOINT_FILE, METRICS_FILE,
};

fn hcd(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hcd"))
        .args(args)
        .current_dir(cwd)
        .output()
        .unwrap()
}

fn text(b: &[u8]) -> String {
    String::from_utf8_lossy(b).into_owned()
}

const TINY_CONFIG: &str = r#"{
  "dataset": "d.hcdx",
  "teacher": "t.hcdt",
  "test_count": 40,
  "channels": [4, 8],
  "record_timing": false,
  "hcd": {"stages": [1, 2], "m": 4, "d": 8},
  "sgd": {"epochs": 2, "batch_size": 16}
}"#;

fn tiny_inputs(dir: &Path) {
    let o = hcd(
        &[
            "gen-data", "--kind", "blobs", "--n", "160", "--k", "4", "--height", "8", "--width",
            "8", "--out", "d.hcdx",
        ],
        dir,
    );
    assert_eq!(o.status.code(), Some(0), "{}", text(&o.stderr));
    let o = hcd(
        &[
            "gen-teacher",
            "--data",
            "d.hcdx",
            "--d",
            "8",
            "--out",
            "t.hcdt",
        ],
        dir,
    );
    assert_eq!(o.status.code(), Some(0), "{}", text(&o.stderr));
    fs::write(dir.join("c.json"), TINY_CONFIG).unwrap();
}

#[test]
fn help_exits_zero_and_unknown_flag_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let o = hcd(&["--help"], dir.path());
    assert_eq!(o.status.code(), Some(0));
    assert!(text(&o.stdout).contains("gradcheck"));
    let o = hcd(&["train", "--bogus"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(text(&o.stderr).contains("Usage"));
    let o = hcd(&["frobnicate"], dir.path());
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn train_and_ablate_require_seed_and_out() {
    let dir = tempfile::tempdir().unwrap();
    for args in [
        &["train", "--config", "c.json", "--out", "r"][..],
        &["train", "--config", "c.json", "--seed", "0"][..],
        &["ablate", "--axis", "n", "--out", "r"][..],
        &["ablate", "--axis", "n", "--seed", "0"][..],
    ] {
        assert_eq!(hcd(args, dir.path()).status.code(), Some(1), "{args:?}");
    }
}

#[test]
fn full_pipeline_through_the_binary() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    tiny_inputs(d);

    let o = hcd(
        &[
            "train", "--method", "hcd", "--config", "c.json", "--seed", "0", "--out", "runs/",
            "--quiet",
        ],
        d,
    );
    assert_eq!(o.status.code(), Some(0), "{}", text(&o.stderr));
    let rows = read_metrics(&d.join("runs").join(METRICS_FILE)).unwrap();
    assert_eq!(rows.len(), 2);
    assert!(d.join("runs").join(CHECKPOINT_FILE).exists());

    let o = hcd(
        &[
            "eval",
            "--checkpoint",
            "runs/checkpoint.hcdp",
            "--data",
            "d.hcdx",
            "--test-count",
            "40",
        ],
        d,
    );
    assert_eq!(o.status.code(), Some(0), "{}", text(&o.stderr));
    let printed = format!("top-1 accuracy {:.2}%", rows[1].test_acc);
    assert!(text(&o.stdout).contains(&printed), "{}", text(&o.stdout));

    let o = hcd(
        &[
            "ablate", "--config", "c.json", "--axis", "n", "--values", "1,2", "--seed", "0",
            "--seeds", "0,1", "--epochs", "1", "--out", "abl",
        ],
        d,
    );
    assert_eq!(o.status.code(), Some(0), "{}", text(&o.stderr));
    assert_eq!(
        read_ablation(&d.join("abl").join(ABLATION_FILE))
            .unwrap()
            .len(),
        4
    );
}

#[test]
fn flags_override_the_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    tiny_inputs(d);
    let o = hcd(
        &[
            "train", "--config", "c.json", "--method", "ce", "--epochs", "1", "--seed", "3",
            "--out", "r", "--quiet",
        ],
        d,
    );
    assert_eq!(o.status.code(), Some(0), "{}", text(&o.stderr));
    let rows = read_metrics(&d.join("r").join(METRICS_FILE)).unwrap();
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0].seed, 3);
    assert_eq!(rows[0].sub_ce, 0.0);
}

#[test]
fn validation_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    tiny_inputs(d);
    let base = [
        "train", "--config", "c.json", "--seed", "0", "--out", "r", "--quiet",
    ];
    for extra in [
        &["--tau", "-1"][..],
        &["--stages", "1+7"][..],
        &["--fusion", "ratio:0.2:0.2"][..],
        &["--n", "0"][..],
    ] {
        let args: Vec<&str> = base.iter().chain(extra).copied().collect();
        let o = hcd(&args, d);
        assert_eq!(o.status.code(), Some(1), "{extra:?}: {}", text(&o.stderr));
    }
    fs::write(d.join("bad.json"), r#"{"dataset": "d.hcdx", "gamma": 1}"#).unwrap();
    let o = hcd(
        &["train", "--config", "bad.json", "--seed", "0", "--out", "r"],
        d,
    );
    assert_eq!(o.status.code(), Some(1));
    // teacher width does not match the configured d
    fs::write(
        d.join("wide.json"),
        TINY_CONFIG.replace("\"d\": 8", "\"d\": 32"),
    )
    .unwrap();
    let o = hcd(
        &[
            "train",
            "--config",
            "wide.json",
            "--seed",
            "0",
            "--out",
            "r",
        ],
        d,
    );
    assert_eq!(o.status.code(), Some(1), "{}", text(&o.stderr));
    assert!(text(&o.stderr).contains("d=8"));
}

#[test]
fn runtime_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let o = hcd(
        &[
            "train",
            "--data",
            "missing.hcdx",
            "--method",
            "ce",
            "--seed",
            "0",
            "--out",
            "r",
        ],
        d,
    );
    assert_eq!(o.status.code(), Some(2), "{}", text(&o.stderr));
    fs::write(d.join("junk.hcdx"), b"not a dataset at all, just bytes").unwrap();
    let o = hcd(
        &["eval", "--checkpoint", "junk.hcdx", "--data", "junk.hcdx"],
        d,
    );
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn gradcheck_prints_the_max_relative_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = hcd(&["gradcheck", "--batch", "4"], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", text(&o.stderr));
    let out = text(&o.stdout);
    let line = out.lines().find(|l| l.starts_with("max rel err")).unwrap();
    let value: f64 = line.split_whitespace().nth(3).unwrap().parse().unwrap();
    assert!(value <= 1e-4);
}
