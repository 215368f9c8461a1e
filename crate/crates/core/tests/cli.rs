use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::json;

fn bin(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_branchscope"))
        .args(args)
        .current_dir(cwd)
        .output()
        .unwrap()
}

fn write_config(dir: &Path) {
    let cfg = json!({
        "dataset": "data/manifest.json",
        "output_dir": "out",
        "k": 4,
        "seed": 3,
        "bootstrap_resamples": 40,
        "train": {"iterations": 25, "depth": 3, "learning_rate": 0.1, "worker_parallelism": 2},
        "eig_ks": [1, 2, 4],
        "synth": {
            "classes": ["A01", "A02", "A03", "bonafide"],
            "rows": 8,
            "cols": 16,
            "samples_per_class": 30,
            "k": 4,
            "seed": 3,
            "score_separation": 1.5,
            "strategy_map": {"A01": {"EXPERT": "B0"}, "A02": {"EXPERT": "B1"}, "A03": "CONSENSUS"}
        }
    });
    fs::write(
        dir.join("config.json"),
        serde_json::to_string_pretty(&cfg).unwrap(),
    )
    .unwrap();
}

fn ok(o: &Output) {
    assert!(
        o.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&o.stderr)
    );
}

#[test]
fn staged_commands_match_full_run() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write_config(d);
    ok(&bin(
        &["--config", "config.json", "--out", "data", "synth"],
        d,
    ));
    assert!(d.join("data/manifest.json").is_file());

    ok(&bin(&["--config", "config.json", "run"], d));
    for f in [
        "model.json",
        "shap_values.csv",
        "table1.csv",
        "summary.json",
        "strategy_matrix.svg",
    ] {
        assert!(d.join("out").join(f).is_file(), "missing {f}");
    }

    for step in ["extract", "train", "shap", "aggregate", "classify"] {
        ok(&bin(
            &["--config", "config.json", "--out", "staged", step],
            d,
        ));
    }
    for f in ["features.json", "features.csv", "attribution.json"] {
        assert!(d.join("staged").join(f).is_file(), "missing {f}");
    }
    for f in [
        "model.json",
        "shap_values.csv",
        "table1.csv",
        "table3_phi.csv",
        "table4_shares.csv",
        "summary.json",
    ] {
        assert!(
            fs::read(d.join("out").join(f)).unwrap() == fs::read(d.join("staged").join(f)).unwrap(),
            "{f} differs"
        );
    }

    // report re-renders identical bytes from summary.json
    let before = fs::read(d.join("out/table1.csv")).unwrap();
    fs::remove_file(d.join("out/table1.csv")).unwrap();
    ok(&bin(&["--config", "config.json", "report"], d));
    assert!(fs::read(d.join("out/table1.csv")).unwrap() == before);
}

#[test]
fn ablations_write_their_tables() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write_config(d);
    ok(&bin(
        &["--config", "config.json", "--out", "data", "synth"],
        d,
    ));
    ok(&bin(
        &["--config", "config.json", "ablate-eig", "--ks", "1,2,4"],
        d,
    ));
    let eig = fs::read_to_string(d.join("out/eig_ablation.csv")).unwrap();
    assert_eq!(eig.lines().count(), 4);
    assert!(eig.starts_with("k,f1_macro,memory_bytes"));
    ok(&bin(&["--config", "config.json", "ablate-penalty"], d));
    let pen = fs::read_to_string(d.join("out/penalty_ablation.csv")).unwrap();
    assert!(pen.starts_with("attack,LINEAR,QUADRATIC,EXPONENTIAL,NONE"));
    assert!(pen.lines().last().unwrap().starts_with("kendall_tau,1"));
}

#[test]
fn same_seed_gives_identical_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write_config(d);
    ok(&bin(
        &["--config", "config.json", "--out", "data", "synth"],
        d,
    ));
    ok(&bin(&["--config", "config.json", "--out", "r1", "run"], d));
    ok(&bin(
        &[
            "--config",
            "config.json",
            "--out",
            "r2",
            "--jobs",
            "1",
            "run",
        ],
        d,
    ));
    for f in [
        "model.json",
        "shap_values.csv",
        "table1.csv",
        "table4_shares.csv",
        "strategy_matrix.svg",
        "summary.json",
    ] {
        assert!(
            fs::read(d.join("r1").join(f)).unwrap() == fs::read(d.join("r2").join(f)).unwrap(),
            "{f}"
        );
    }
    ok(&bin(
        &[
            "--config",
            "config.json",
            "--out",
            "r3",
            "--seed",
            "4",
            "run",
        ],
        d,
    ));
    // the seed drives the EER bootstrap
    assert!(
        fs::read(d.join("r1/summary.json")).unwrap()
            != fs::read(d.join("r3/summary.json")).unwrap()
    );
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    // missing config file
    let o = bin(&["--config", "nope.json", "run"], d);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("config"));
    // unknown key
    fs::write(d.join("bad.json"), r#"{"kk": 1}"#).unwrap();
    assert_eq!(
        bin(&["--config", "bad.json", "run"], d).status.code(),
        Some(2)
    );
    // invalid training parameters
    fs::write(d.join("bad.json"), r#"{"train": {"depth": 0}}"#).unwrap();
    assert_eq!(
        bin(&["--config", "bad.json", "run"], d).status.code(),
        Some(2)
    );
    // no dataset configured
    assert_eq!(bin(&["run"], d).status.code(), Some(2));
    // dataset path that does not exist
    fs::write(
        d.join("cfg.json"),
        r#"{"dataset": "missing/manifest.json"}"#,
    )
    .unwrap();
    let o = bin(&["--config", "cfg.json", "run"], d);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("dataio"));
    // synth without a synth section
    assert_eq!(bin(&["synth"], d).status.code(), Some(2));
    // clap usage error
    assert_eq!(bin(&["frobnicate"], d).status.code(), Some(2));
}
