use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use eri_core::featstore::{Dataset, DatasetManifest, Split};
use eri_core::objectives::label_corr_matrix;
use eri_core::trainer::split_targets;
use serde_json::Value;

fn eri(cwd: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_eri"))
        .current_dir(cwd)
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn summary(dir: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(dir.join("run_summary.json")).unwrap()).unwrap()
}

const SMALL: &str = r#"{"hp.hidden_dim": 16, "hp.num_heads": 2, "hp.num_layers": 1, "hp.max_epochs": 2}"#;

fn small_config(dir: &Path) -> PathBuf {
    let p = dir.join("small.json");
    fs::write(&p, SMALL).unwrap();
    p
}

#[test]
fn synth_train_eval_on_defaults() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    for cmd in ["synth", "train", "eval"] {
        let o = eri(d, &[cmd, "--out", "run"]);
        assert_eq!(code(&o), 0, "{cmd}: {}", String::from_utf8_lossy(&o.stderr));
        let s = summary(&d.join("run"));
        assert_eq!(s["command"], cmd);
        assert_eq!(s["status"], "ok");
        assert_eq!(s["seed"], 0);
    }
    let m: Value = serde_json::from_str(&fs::read_to_string(d.join("run/metrics.json")).unwrap()).unwrap();
    assert_eq!(m["n_samples"], 50);
    assert!(m["mean_pcc"].as_f64().unwrap().is_finite());
    for f in ["checkpoint.ckpt", "history.jsonl", "predictions_val.csv"] {
        assert!(d.join("run").join(f).exists(), "{f}");
    }
    let csv = fs::read_to_string(d.join("run/predictions_val.csv")).unwrap();
    assert!(csv.starts_with("sample_id,e0,e1,e2,e3,e4,e5,e6\n"));
    assert_eq!(csv.lines().count(), 51);
}

#[test]
fn missing_manifest_is_a_data_error() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("nowhere").join("manifest.jsonl");
    let o = eri(tmp.path(), &["train", "--out", "o", "--manifest", missing.to_str().unwrap()]);
    assert_eq!(code(&o), 3);
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains(missing.to_str().unwrap()), "{err}");
    let s = summary(&tmp.path().join("o"));
    assert_eq!(s["status"], "error");
    assert_eq!(s["exit_code"], 3);
    assert!(s["error"].as_str().unwrap().contains("nowhere"));
}

#[test]
fn labelcorr_matches_oracle() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    assert_eq!(code(&eri(d, &["synth", "--out", "ds", "--seed", "3"])), 0);
    let o = eri(d, &["labelcorr", "--manifest", "ds/manifest.jsonl", "--out", "lc"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));

    let text = fs::read_to_string(d.join("lc/label_corr.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap().split(',').count(), 7);
    let m: Vec<Vec<f64>> = lines
        .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
        .collect();
    assert_eq!(m.len(), 7);

    let ds = Dataset::load(&DatasetManifest::load(d.join("ds/manifest.jsonl")).unwrap()).unwrap();
    let (_, labels) = split_targets(&ds, Split::Train).unwrap();
    let oracle = label_corr_matrix(&labels).unwrap();
    for i in 0..7 {
        assert_eq!(m[i].len(), 7);
        assert_eq!(m[i][i], 1.0);
        for j in 0..7 {
            assert_eq!(m[i][j], m[j][i]);
            assert!((m[i][j] - oracle[i][j]).abs() <= 5e-7, "{i},{j}");
        }
    }
}

#[test]
fn config_errors_exit_2_and_name_the_key() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let cases = [
        (r#"{"hp.bogus": 1}"#, "hp.bogus"),
        (r#"{"hp.hidden_dim": "wide"}"#, "hp.hidden_dim"),
        (r#"{"seed": -4}"#, "seed"),
        (r#"{"colour": "red"}"#, "colour"),
        (r#"{"hp.hidden_dim": 30, "hp.num_heads": 4}"#, "hidden_dim"),
        (r#"{"hp.loss_kind": "pcc", "hp.batch_size": 1}"#, "batch_size"),
    ];
    for (i, (cfg, key)) in cases.iter().enumerate() {
        let p = d.join(format!("c{i}.json"));
        fs::write(&p, cfg).unwrap();
        let out = format!("o{i}");
        let o = eri(d, &["train", "--config", p.to_str().unwrap(), "--out", &out]);
        assert_eq!(code(&o), 2, "{cfg}");
        let err = String::from_utf8_lossy(&o.stderr);
        assert!(err.contains(key), "{cfg}: {err}");
        assert_eq!(summary(&d.join(&out))["exit_code"], 2);
    }
    let o = eri(d, &["train", "--out", "x", "--config", "absent.json"]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("absent.json"));
}

#[test]
fn precedence_flag_over_file_over_default() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    assert_eq!(code(&eri(d, &["synth", "--out", "ds", "--seed", "1"])), 0);
    fs::write(
        d.join("c.json"),
        r#"{"seed": 5, "hp.loss_kind": "pcc", "hp.hidden_dim": 16, "hp.num_heads": 2, "hp.num_layers": 1, "hp.max_epochs": 1}"#,
    )
    .unwrap();
    let run = |out: &str, extra: &[&str]| {
        let mut args = vec!["train", "--manifest", "ds/manifest.jsonl", "--config", "c.json", "--out", out];
        args.extend_from_slice(extra);
        assert_eq!(code(&eri(d, &args)), 0);
        summary(&d.join(out))
    };
    let file = run("a", &[]);
    assert_eq!(file["seed"], 5);
    assert_eq!(file["config"]["hp"]["seed"], 5);
    assert_eq!(file["config"]["hp"]["loss_kind"], "pcc");
    assert_eq!(file["config"]["hp"]["hidden_dim"], 16);
    assert_eq!(file["config"]["hp"]["batch_size"], 8);
    assert_eq!(file["config"]["parallelism"], 1);

    let flag = run("b", &["--seed", "9", "--loss", "mse"]);
    assert_eq!(flag["seed"], 9);
    assert_eq!(flag["config"]["hp"]["seed"], 9);
    assert_eq!(flag["config"]["hp"]["loss_kind"], "mse");
    assert_eq!(flag["config"]["hp"]["hidden_dim"], 16);
}

/// Artifact bytes with wall-clock fields removed.
fn artifacts(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(p) = stack.pop() {
        for e in fs::read_dir(&p).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
                continue;
            }
            let mut bytes = fs::read(&path).unwrap();
            if path.file_name().unwrap() == "history.jsonl" {
                let lines: Vec<String> = String::from_utf8(bytes)
                    .unwrap()
                    .lines()
                    .map(|l| {
                        let mut v: Value = serde_json::from_str(l).unwrap();
                        v.as_object_mut().unwrap().remove("wall_time_s");
                        v.to_string()
                    })
                    .collect();
                bytes = lines.join("\n").into_bytes();
            }
            out.push((path.strip_prefix(dir).unwrap().display().to_string(), bytes));
        }
    }
    out.sort();
    out
}

#[test]
fn reruns_reproduce_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let mut runs = Vec::new();
    for r in 0..2 {
        let d = tmp.path().join(format!("r{r}"));
        fs::create_dir(&d).unwrap();
        let cfg = small_config(&d);
        let cfg = cfg.to_str().unwrap();
        for cmd in ["synth", "train", "eval", "labelcorr"] {
            let o = eri(&d, &[cmd, "--config", cfg, "--out", "out", "--seed", "7"]);
            assert_eq!(code(&o), 0, "{cmd}: {}", String::from_utf8_lossy(&o.stderr));
        }
        fs::copy(d.join("out/checkpoint.ckpt"), d.join("out/m0.ckpt")).unwrap();
        let o = eri(&d, &["ensemble", "--config", cfg, "--out", "out", "--members", "out/m0.ckpt,out/checkpoint.ckpt"]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        runs.push(artifacts(&d.join("out")));
    }
    assert_eq!(runs[0].len(), runs[1].len());
    for (a, b) in runs[0].iter().zip(&runs[1]) {
        assert_eq!(a.0, b.0);
        assert!(a.1 == b.1, "{} differs", a.0);
    }
    let names: Vec<&str> = runs[0].iter().map(|(n, _)| n.as_str()).collect();
    for f in ["ensemble_report.csv", "ensemble_predictions_val.csv", "label_corr.csv", "metrics.json"] {
        assert!(names.contains(&f), "{f}");
    }
}

#[test]
fn tune_writes_tables() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    fs::write(
        d.join("t.json"),
        r#"{"synth.n_train": 16, "synth.n_val": 8, "space.hidden_dim": [8, 16], "space.batch_size": [2, 4],
            "space.max_epochs_per_trial": 2, "hp.num_heads": 2, "hp.num_layers": 1}"#,
    )
    .unwrap();
    assert_eq!(code(&eri(d, &["synth", "--config", "t.json", "--out", "o"])), 0);
    let o = eri(d, &["tune", "--config", "t.json", "--out", "o", "--trials", "3", "--parallelism", "2"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let rows = fs::read_to_string(d.join("o/trials.jsonl")).unwrap();
    assert_eq!(rows.lines().count(), 3);
    let s: Value = serde_json::from_str(&fs::read_to_string(d.join("o/search_summary.json")).unwrap()).unwrap();
    assert_eq!(s["trials"], 3);
    assert_eq!(summary(&d.join("o"))["config"]["space"]["trials"], 3);
}

#[test]
fn ensemble_without_members_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    assert_eq!(code(&eri(d, &["synth", "--out", "o"])), 0);
    let o = eri(d, &["ensemble", "--out", "o"]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("members"));
    let o = eri(d, &["ensemble", "--out", "o", "--members", "o/missing.ckpt"]);
    assert_eq!(code(&o), 3);
    assert!(String::from_utf8_lossy(&o.stderr).contains("missing.ckpt"));
}
