use std::path::Path;
use std::process::{Command, Output};

fn hisp(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hisp"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn json_field(stdout: &[u8], key: &str) -> f64 {
    let v: serde_json::Value = serde_json::from_slice(stdout).expect("JSON report");
    v[key]
        .as_f64()
        .unwrap_or_else(|| panic!("no numeric field {key}"))
}

const DET: &str = "\
1,-1,100,100,40,100,0.9,-1,-1,-1
2,-1,102,100,40,100,0.9,-1,-1,-1
3,-1,104,101,40,100,0.9,-1,-1,-1
4,-1,106,100,40,100,0.9,-1,-1,-1
";

#[test]
fn track_writes_a_result_file() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("det.txt"), DET).unwrap();
    let out = hisp(
        &["track", "--det", "det.txt", "--out", "res.txt"],
        dir.path(),
    );
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let res = std::fs::read_to_string(dir.path().join("res.txt")).unwrap();
    assert!(res.lines().count() >= 3);
}

#[test]
fn evaluate_prints_a_json_report() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("gt.txt"), DET.replace(",-1,1", ",1,1")).unwrap();
    let out = hisp(
        &["evaluate", "--res", "gt.txt", "--gt", "gt.txt"],
        dir.path(),
    );
    assert!(out.status.success());
    assert_eq!(json_field(&out.stdout, "mota"), 1.0);
    assert_eq!(json_field(&out.stdout, "idsw"), 0.0);
}

#[test]
fn simulated_easy_run_scores_well() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert!(hisp(&["simulate", "--seed", "7", "--preset", "easy"], d)
        .status
        .success());
    let out = hisp(&["track", "--det", "det.txt", "--out", "res.txt"], d);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let out = hisp(&["evaluate", "--res", "res.txt", "--gt", "gt.txt"], d);
    assert!(out.status.success());
    let mota = json_field(&out.stdout, "mota");
    assert!(mota >= 0.8, "MOTA {mota}");
}

#[test]
fn generated_config_reproduces_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let sim = d.join("sim");
    let sim = sim.to_str().unwrap();
    assert!(hisp(
        &[
            "simulate",
            "--seed",
            "3",
            "--preset",
            "hard",
            "--frames",
            "40",
            "--out-dir",
            sim
        ],
        d
    )
    .status
    .success());
    assert!(d.join("sim/features.csv").exists());
    for name in ["a.txt", "b.txt"] {
        let out = hisp(&["track", "--config", "sim/run.toml", "--out", name], d);
        assert!(
            out.status.success(),
            "{}",
            String::from_utf8_lossy(&out.stderr)
        );
    }
    assert_eq!(
        std::fs::read(d.join("a.txt")).unwrap(),
        std::fs::read(d.join("b.txt")).unwrap()
    );
}

#[test]
fn inspect_emits_one_line_per_frame() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("det.txt"), DET).unwrap();
    let out = hisp(&["inspect", "--det", "det.txt"], dir.path());
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(text.lines().count(), 4);
    assert!(text
        .lines()
        .all(|l| l.starts_with('{') && l.contains("\"hypotheses\"")));
}

#[test]
fn sweep_writes_csv() {
    let dir = tempfile::tempdir().unwrap();
    let out = hisp(
        &[
            "sweep",
            "--detection-probs",
            "0.9",
            "--clutter-means",
            "2",
            "--seeds",
            "1",
        ],
        dir.path(),
    );
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let text = String::from_utf8(out.stdout).unwrap();
    let mut lines = text.lines();
    assert!(lines
        .next()
        .unwrap()
        .starts_with("detection_prob,clutter_mean,seed,mota"));
    assert_eq!(lines.count(), 1);
}

#[test]
fn overrides_apply_and_are_validated() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("det.txt"), DET).unwrap();
    let ok = hisp(
        &[
            "track", "--det", "det.txt", "--out", "r.txt", "--set", "window=3",
        ],
        dir.path(),
    );
    assert!(ok.status.success());
    let bad = hisp(
        &[
            "track",
            "--det",
            "det.txt",
            "--out",
            "r.txt",
            "--set",
            "detection_prob=0.999",
        ],
        dir.path(),
    );
    assert_eq!(bad.status.code(), Some(2));
    let unknown = hisp(
        &[
            "track",
            "--det",
            "det.txt",
            "--out",
            "r.txt",
            "--set",
            "nonsense=1",
        ],
        dir.path(),
    );
    assert_eq!(unknown.status.code(), Some(2));
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = hisp(&["track", "--bogus"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
}

#[test]
fn missing_input_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = hisp(
        &["track", "--det", "absent.txt", "--out", "r.txt"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn help_exits_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(hisp(&["--help"], dir.path()).status.code(), Some(0));
}
