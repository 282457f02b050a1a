use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn unisoma(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_unisoma"))
        .args(args)
        .env_remove("UNISOMA_DATA_DIR")
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().display().to_string(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn generate(out: &Path, seed: &str) -> Output {
    unisoma(&["generate", "--kind", "bilateral_press", "--samples", "10", "--seed", seed, "--steps", "3", "--out", out.to_str().unwrap()])
}

#[test]
fn verify_passes_on_fresh_parameters() {
    let o = unisoma(&["verify", "--cases", "10"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let out = String::from_utf8_lossy(&o.stdout);
    assert!(out.lines().all(|l| l.starts_with("PASS")), "{out}");
}

#[test]
fn unknown_subcommand_is_a_usage_error() {
    let o = unisoma(&["frobnicate"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("Usage"));
}

#[test]
fn generating_twice_gives_identical_directories() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert_eq!(generate(&a, "3").status.code(), Some(0));
    assert_eq!(generate(&b, "3").status.code(), Some(0));
    assert_eq!(tree(&a), tree(&b));
    let c = dir.path().join("c");
    assert_eq!(generate(&c, "4").status.code(), Some(0));
    assert_ne!(tree(&a), tree(&c));
}

#[test]
fn eval_with_missing_checkpoint_fails_with_a_message() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    assert_eq!(generate(&data, "0").status.code(), Some(0));
    let o = unisoma(&[
        "eval",
        "--data",
        data.to_str().unwrap(),
        "--checkpoint",
        dir.path().join("nope.ckpt").to_str().unwrap(),
        "--out",
        dir.path().join("eval").to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("nope.ckpt"), "{}", stderr(&o));
}

#[test]
fn bad_config_key_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let o = unisoma(&["generate", "--kind", "cavity_grip", "--out", dir.path().join("d").to_str().unwrap(), "--set", "scenario.spacing=-1"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("spacing"), "{}", stderr(&o));
    let o = unisoma(&["generate", "--kind", "cavity_grip", "--out", dir.path().join("d").to_str().unwrap(), "--set", "scenario.wobble=1"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("wobble"), "{}", stderr(&o));
}

#[test]
fn train_eval_and_rollout_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    assert_eq!(generate(&data, "1").status.code(), Some(0));
    let d = data.to_str().unwrap();
    let tiny = ["--epochs", "2", "--channels", "8", "--slices", "4", "--layers", "1", "--k", "2"];
    let mut runs = Vec::new();
    for name in ["run1", "run2"] {
        let out = dir.path().join(name);
        let mut args = vec!["train", "--data", d, "--out", out.to_str().unwrap()];
        args.extend(tiny);
        let o = unisoma(&args);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
        runs.push(out);
    }
    assert_eq!(tree(&runs[0]), tree(&runs[1]));

    let ckpt = runs[0].join("checkpoint.ckpt");
    let eval = dir.path().join("eval");
    let o = unisoma(&["eval", "--data", d, "--checkpoint", ckpt.to_str().unwrap(), "--out", eval.to_str().unwrap(), "--jobs", "2"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(eval.join("metrics.csv").exists());

    let manifest: serde_json::Value = serde_json::from_slice(&fs::read(data.join("manifest.json")).unwrap()).unwrap();
    let id = manifest["splits"]["test"][0].as_u64().unwrap().to_string();
    let roll = dir.path().join("roll");
    let o = unisoma(&["rollout", "--data", d, "--checkpoint", ckpt.to_str().unwrap(), "--sample", &id, "--out", roll.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(fs::read_dir(&roll).unwrap().count() >= 3);
}

#[test]
fn freeze_baseline_needs_no_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    assert_eq!(generate(&data, "2").status.code(), Some(0));
    let o = unisoma(&[
        "eval",
        "--data",
        data.to_str().unwrap(),
        "--baseline",
        "freeze",
        "--out",
        dir.path().join("eval").to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(String::from_utf8_lossy(&o.stdout).contains("geometry"));
}
