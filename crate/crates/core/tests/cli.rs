use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use serde_json::Value;

fn decoy(root: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_decoy"))
        .args(args)
        .arg("--out")
        .arg(root)
        .output()
        .expect("spawn decoy")
}

fn run_dir(out: &Output) -> PathBuf {
    let stdout = String::from_utf8_lossy(&out.stdout);
    PathBuf::from(stdout.lines().next().expect("run dir on stdout"))
}

fn manifest(dir: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap()
}

/// A briefly trained checkpoint shared by every test in this file.
fn checkpoint() -> &'static str {
    static CKPT: OnceLock<(tempfile::TempDir, String)> = OnceLock::new();
    &CKPT
        .get_or_init(|| {
            let tmp = tempfile::tempdir().unwrap();
            let out = decoy(tmp.path(), &["train", "--set", "train.steps=40", "--set", "train.corpus_size=32"]);
            assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
            let ckpt = run_dir(&out).join("checkpoint").to_string_lossy().into_owned();
            (tmp, ckpt)
        })
        .1
}

fn common() -> Vec<String> {
    [
        format!("checkpoint={}", checkpoint()),
        "data.count=2".into(),
        "attack.iterations=2".into(),
        "sampler.inference_steps=4".into(),
    ]
    .into_iter()
    .flat_map(|s| ["--set".to_string(), s])
    .collect()
}

fn with_common<'a>(head: &[&'a str], common: &'a [String], tail: &[&'a str]) -> Vec<&'a str> {
    head.iter().copied().chain(common.iter().map(String::as_str)).chain(tail.iter().copied()).collect()
}

fn stderr_line(out: &Output) -> String {
    let e = String::from_utf8_lossy(&out.stderr).into_owned();
    assert_eq!(e.trim_end().lines().count(), 1, "stderr should be one line: {e:?}");
    e
}

#[test]
fn unknown_key_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    let out = decoy(tmp.path(), &["inpaint", "--set", "attack.nonsense=1"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr_line(&out).contains("kind=config"));
}

#[test]
fn bad_subcommand_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    let out = decoy(tmp.path(), &["frobnicate"]);
    assert_eq!(out.status.code(), Some(2));
    stderr_line(&out);
}

#[test]
fn malformed_config_file_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.json");
    std::fs::write(&cfg, "{ not json").unwrap();
    let out = decoy(tmp.path(), &["inpaint", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    stderr_line(&out);
}

#[test]
fn missing_checkpoint_directory_exits_3() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("nope");
    let set = format!("checkpoint={}", missing.display());
    let out = decoy(tmp.path(), &["inpaint", "--set", &set]);
    assert_eq!(out.status.code(), Some(3));
    stderr_line(&out);
}

#[test]
fn protect_writes_manifest_and_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let c = common();
    let out = decoy(tmp.path(), &with_common(&["protect"], &c, &[]));
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let dir = run_dir(&out);
    let m = manifest(&dir);
    assert_eq!(m["command"], "protect");
    assert_eq!(m["protect_calls"], 2);
    assert_eq!(m["corpus_seeds"].as_array().unwrap().len(), 2);
    assert!(m["checkpoint_hash"].as_str().unwrap().len() == 64);
    assert_eq!(m["config"]["attack"]["iterations"], 2);
    for f in ["original.ppm", "protected.ppm", "protected.tnsr", "delta.tnsr", "loss.csv", "probe.csv", "attack.json"] {
        let p = dir.join("test00000").join(f);
        assert!(p.is_file(), "missing {}", p.display());
        assert!(m["outputs"].as_array().unwrap().iter().any(|o| o == &format!("test00000/{f}")));
    }
    let loss = std::fs::read_to_string(dir.join("test00000/loss.csv")).unwrap();
    assert_eq!(loss.lines().count(), 3);
}

#[test]
fn zero_budget_evaluate_matches_oracle() {
    let tmp = tempfile::tempdir().unwrap();
    let c = common();
    let out = decoy(tmp.path(), &with_common(&["evaluate"], &c, &["--set", "attack.epsilon=0"]));
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(run_dir(&out).join("metrics.csv")).unwrap();
    let mut lines = csv.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let psnr = header.iter().position(|h| *h == "psnr_vs_oracle").unwrap();
    let delta = header.iter().position(|h| *h == "content_mass_delta").unwrap();
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 2);
    for r in rows {
        assert_eq!(r[psnr], "inf");
        assert_eq!(r[delta], "0.000000");
    }
}

#[test]
fn reruns_are_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let c = common();
    let a = run_dir(&decoy(tmp.path(), &with_common(&["protect"], &c, &[])));
    let b = run_dir(&decoy(tmp.path(), &with_common(&["protect"], &c, &[])));
    assert_ne!(a, b);
    for f in ["protected.tnsr", "delta.tnsr", "loss.csv", "probe.csv"] {
        let x = std::fs::read(a.join("test00001").join(f)).unwrap();
        let y = std::fs::read(b.join("test00001").join(f)).unwrap();
        assert_eq!(x, y, "{f} differs");
    }
}

#[test]
fn thread_count_does_not_change_results() {
    let tmp = tempfile::tempdir().unwrap();
    let c = common();
    let a = run_dir(&decoy(tmp.path(), &with_common(&["inpaint"], &c, &["--set", "threads=1"])));
    let b = run_dir(&decoy(tmp.path(), &with_common(&["inpaint"], &c, &["--set", "threads=2"])));
    let f = "test00001/inpaint_s0.tnsr";
    assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap());
}

#[test]
fn render_delta_of_protect_output() {
    let tmp = tempfile::tempdir().unwrap();
    let c = common();
    let p = run_dir(&decoy(tmp.path(), &with_common(&["protect"], &c, &[])));
    let prot = format!("inputs.protected={}", p.join("test00000/protected.ppm").display());
    let orig = format!("inputs.original={}", p.join("test00000/original.ppm").display());
    let out = decoy(tmp.path(), &["render-delta", "--set", &prot, "--set", &orig]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    let max: f64 = stdout
        .lines()
        .find_map(|l| l.strip_prefix("max_abs_delta="))
        .unwrap()
        .parse()
        .unwrap();
    // Two signed steps of 2/255, quantized through 8-bit PPM.
    assert!(max > 0.0 && max <= 4.0 / 255.0 + 1e-6, "{max}");
    assert!(run_dir(&out).join("delta.ppm").is_file());
}

#[test]
fn sampler_sweep_protects_once_per_image() {
    let tmp = tempfile::tempdir().unwrap();
    let c = common();
    let spec = r#"sweep={"axis":"inference_steps","values":[4,6,8]}"#;
    let out = decoy(tmp.path(), &with_common(&["sweep"], &c, &["--set", spec]));
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let dir = run_dir(&out);
    assert_eq!(manifest(&dir)["protect_calls"], 2);
    let csv = std::fs::read_to_string(dir.join("sweep.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().filter(|l| !l.starts_with('#')).skip(1).collect();
    assert_eq!(rows.len(), 6);
    // Sorted by value, then image.
    assert!(rows[0].starts_with("4,test00000,") && rows[5].starts_with("8,test00001,"));
}

#[test]
fn epsilon_sweep_protects_once_per_value_and_image() {
    let tmp = tempfile::tempdir().unwrap();
    let c = common();
    let spec = r#"sweep={"axis":"epsilon","values":["0","2/255"]}"#;
    let out = decoy(tmp.path(), &with_common(&["sweep"], &c, &["--set", spec]));
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(manifest(&run_dir(&out))["protect_calls"], 4);
}

#[test]
fn attribute_writes_heatmaps() {
    let tmp = tempfile::tempdir().unwrap();
    let c = common();
    let out = decoy(tmp.path(), &with_common(&["attribute"], &c, &[]));
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let dir = run_dir(&out);
    let m = manifest(&dir);
    let outputs: Vec<&str> = m["outputs"].as_array().unwrap().iter().filter_map(Value::as_str).collect();
    assert!(outputs.iter().any(|o| o.ends_with("heatmaps.csv")));
    assert!(outputs.iter().any(|o| o.ends_with("token_00.pgm")));
    for o in outputs {
        assert!(dir.join(o).is_file(), "{o}");
    }
}
