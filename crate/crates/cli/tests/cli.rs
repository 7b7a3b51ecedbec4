use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn revcd(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_revcd"))
        .args(args)
        .current_dir(cwd)
        .env_remove("REVCD_THREADS")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn ok(o: &Output) {
    assert_eq!(
        o.status.code(),
        Some(0),
        "stdout:\n{}\nstderr:\n{}",
        stdout(o),
        stderr(o)
    );
}

fn train_tiny(dir: &Path, out: &str) {
    ok(&revcd(
        &[
            "train",
            "--synthetic",
            "tiny",
            "--output",
            out,
            "--deterministic",
            "-q",
        ],
        dir,
    ));
}

#[test]
fn deterministic_training_is_byte_identical() {
    let d = tempfile::tempdir().unwrap();
    train_tiny(d.path(), "a");
    let a = fs::read(d.path().join("a/checkpoint.bin")).unwrap();
    train_tiny(d.path(), "a");
    let b = fs::read(d.path().join("a/checkpoint.bin")).unwrap();
    assert_eq!(a, b);
    let csv = fs::read_to_string(d.path().join("a/loss_history.csv")).unwrap();
    assert!(csv.starts_with("step,rec,noise,cls,total\n"));
}

#[test]
fn periodic_checkpoints_are_written() {
    let d = tempfile::tempdir().unwrap();
    ok(&revcd(
        &[
            "train",
            "--synthetic",
            "tiny",
            "--output",
            "r",
            "--checkpoint-every",
            "4",
            "-q",
        ],
        d.path(),
    ));
    assert!(d.path().join("r/checkpoint-4.bin").is_file());
    assert!(d.path().join("r/checkpoint-8.bin").is_file());
}

#[test]
fn missing_dataset_is_a_usage_error_naming_the_path() {
    let d = tempfile::tempdir().unwrap();
    let o = revcd(&["train", "--data", "/no/such/revcd-data"], d.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("/no/such/revcd-data"));
}

#[test]
fn unknown_subcommand_and_bad_thread_cap_are_usage_errors() {
    let d = tempfile::tempdir().unwrap();
    assert_eq!(revcd(&["frobnicate"], d.path()).status.code(), Some(2));
    let o = Command::new(env!("CARGO_BIN_EXE_revcd"))
        .args(["verify", "--only", "prior_kl"])
        .env("REVCD_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn corrupt_checkpoint_is_an_io_error() {
    let d = tempfile::tempdir().unwrap();
    fs::write(d.path().join("bad.bin"), b"not a checkpoint").unwrap();
    let o = revcd(&["eval", "--checkpoint", "bad.bin"], d.path());
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn dump_config_reparses_identically() {
    let d = tempfile::tempdir().unwrap();
    let first = revcd(
        &[
            "train",
            "--synthetic",
            "default",
            "--seed",
            "4",
            "--epochs",
            "3",
            "--dump-config",
        ],
        d.path(),
    );
    ok(&first);
    fs::write(d.path().join("c.json"), stdout(&first)).unwrap();
    let second = revcd(&["train", "--config", "c.json", "--dump-config"], d.path());
    ok(&second);
    assert_eq!(stdout(&first), stdout(&second));
    let v: Value = serde_json::from_str(&stdout(&first)).unwrap();
    assert_eq!(v["seed"], 4);
    assert_eq!(v["train"]["seed"], 4);
    assert_eq!(v["train"]["epochs"], 3);
    assert_eq!(v["schedule"]["T"], 200);
}

#[test]
fn flags_override_file_values() {
    let d = tempfile::tempdir().unwrap();
    let base = revcd(&["train", "--synthetic", "tiny", "--dump-config"], d.path());
    fs::write(d.path().join("c.json"), stdout(&base)).unwrap();
    let o = revcd(
        &[
            "train",
            "--config",
            "c.json",
            "--lr",
            "0.5",
            "--lambda3",
            "2",
            "--dump-config",
        ],
        d.path(),
    );
    let v: Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["train"]["adam"]["lr"], 0.5);
    assert_eq!(v["train"]["loss"]["lambda3"], 2.0);
}

#[test]
fn oracle_sampler_scores_perfectly() {
    let d = tempfile::tempdir().unwrap();
    let o = revcd(
        &["eval", "--oracle-sampler", "--synthetic", "tiny"],
        d.path(),
    );
    ok(&o);
    assert!(
        stdout(&o).contains("S=100.0 U=100.0 H=100.0"),
        "{}",
        stdout(&o)
    );
}

#[test]
fn metrics_json_follows_schema_and_zsl_mode_lists_unseen_only() {
    let d = tempfile::tempdir().unwrap();
    train_tiny(d.path(), "r");
    for mode in ["gzsl", "zsl"] {
        let out = format!("{mode}.json");
        ok(&revcd(
            &[
                "eval",
                "--checkpoint",
                "r/checkpoint.bin",
                "--mode",
                mode,
                "--output",
                &out,
            ],
            d.path(),
        ));
        let v: Value =
            serde_json::from_str(&fs::read_to_string(d.path().join(&out)).unwrap()).unwrap();
        for key in ["S", "U", "H", "zsl_unseen"] {
            let x = v[key].as_f64().unwrap();
            assert!((0.0..=1.0).contains(&x), "{key}={x}");
        }
        let rows = v["per_class"].as_array().unwrap();
        assert!(!rows.is_empty());
        for r in rows {
            assert!(r["class_id"].is_u64() && r["n"].is_u64() && r["accuracy"].is_f64());
            let split = r["split"].as_str().unwrap();
            assert!(split == "seen" || split == "unseen");
            if mode == "zsl" {
                assert_eq!(split, "unseen");
            }
        }
    }
}

#[test]
fn sampling_accounting_and_guidance_identity() {
    let d = tempfile::tempdir().unwrap();
    train_tiny(d.path(), "r");
    let ck = "r/checkpoint.bin";
    ok(&revcd(
        &[
            "sample",
            "--checkpoint",
            ck,
            "--output",
            "g0.bin",
            "--g",
            "0",
            "--log-trajectory",
            "t.csv",
        ],
        d.path(),
    ));
    ok(&revcd(
        &[
            "sample",
            "--checkpoint",
            ck,
            "--output",
            "plain.bin",
            "--no-guidance",
        ],
        d.path(),
    ));
    let g0 = fs::read(d.path().join("g0.bin")).unwrap();
    assert_eq!(g0, fs::read(d.path().join("plain.bin")).unwrap());
    // tiny preset: 3 unseen classes x 20 test rows, d_s = 8
    assert_eq!(g0.len(), 60 * 8 * 4);

    let traj = fs::read_to_string(d.path().join("t.csv")).unwrap();
    let lines: Vec<&str> = traj.lines().collect();
    assert_eq!(lines[0], "t,mean_cos_dist");
    assert_eq!(lines.len() - 1, 20);
    assert!(lines[1].starts_with("20,") && lines[20].starts_with("1,"));
}

#[test]
fn sampling_raw_features_preserves_row_count() {
    let d = tempfile::tempdir().unwrap();
    train_tiny(d.path(), "r");
    let x: Vec<u8> = (0..7 * 16)
        .flat_map(|i| (i as f32 * 0.01).to_le_bytes())
        .collect();
    fs::write(d.path().join("x.bin"), &x).unwrap();
    ok(&revcd(
        &[
            "sample",
            "--checkpoint",
            "r/checkpoint.bin",
            "--features",
            "x.bin",
            "--output",
            "s.bin",
        ],
        d.path(),
    ));
    assert_eq!(fs::read(d.path().join("s.bin")).unwrap().len(), 7 * 8 * 4);

    fs::write(d.path().join("odd.bin"), &x[..4 * 15]).unwrap();
    let o = revcd(
        &[
            "sample",
            "--checkpoint",
            "r/checkpoint.bin",
            "--features",
            "odd.bin",
            "--output",
            "s.bin",
        ],
        d.path(),
    );
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn sweep_writes_one_csv_row_per_value() {
    let d = tempfile::tempdir().unwrap();
    ok(&revcd(
        &[
            "sweep",
            "--synthetic",
            "tiny",
            "--lambda3",
            "0,0.1,1",
            "--csv",
            "sweep.csv",
        ],
        d.path(),
    ));
    let csv = fs::read_to_string(d.path().join("sweep.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "lambda3,S,U,H,zsl_unseen");
    assert_eq!(lines.len(), 4);
    assert!(lines[3].starts_with("1,"));
}

#[test]
fn generated_dataset_trains_from_disk() {
    let d = tempfile::tempdir().unwrap();
    ok(&revcd(
        &[
            "gen-synthetic",
            "--output",
            "ds",
            "--per-class",
            "10",
            "--seed",
            "2",
        ],
        d.path(),
    ));
    assert!(d.path().join("ds/manifest.json").is_file());
    let base = revcd(&["train", "--synthetic", "tiny", "--dump-config"], d.path());
    fs::write(d.path().join("c.json"), stdout(&base)).unwrap();
    ok(&revcd(
        &[
            "train", "--config", "c.json", "--data", "ds", "--output", "r", "-q",
        ],
        d.path(),
    ));
    ok(&revcd(
        &["eval", "--checkpoint", "r/checkpoint.bin"],
        d.path(),
    ));
}

#[test]
fn verify_passes_and_negative_control_fails() {
    let d = tempfile::tempdir().unwrap();
    let o = revcd(&["verify"], d.path());
    ok(&o);
    assert_eq!(
        stdout(&o).lines().filter(|l| l.starts_with("PASS")).count(),
        4
    );
    let o = revcd(&["verify", "--negate", "cfg"], d.path());
    assert_eq!(o.status.code(), Some(1));
    let fails: Vec<String> = stdout(&o)
        .lines()
        .filter(|l| l.starts_with("FAIL"))
        .map(String::from)
        .collect();
    assert_eq!(fails.len(), 1);
    assert!(fails[0].contains("cfg"));
}
