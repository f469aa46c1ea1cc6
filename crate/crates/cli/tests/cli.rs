use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn ltn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ltn"))
        .args(args)
        .env("LTN_DETERMINISTIC", "1")
        .output()
        .expect("binary runs")
}

fn small_config(dir: &Path, extra: &str) -> String {
    let path = dir.join("run.cfg");
    fs::write(
        &path,
        format!(
            "steps = 12\nbatch_size = 4\nqueue_capacity = 64\ndim = 16\nbasis_size = 2\n\
             probe_train_streams = 20\nprobe_test_streams = 20\nprobe_epochs = 20\n{extra}"
        ),
    )
    .unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn selftest_passes() {
    let out = ltn(&["selftest"]);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(out.status.success(), "{stdout}");
    assert!(stdout.contains("0 failed"));
}

#[test]
fn pretrain_is_byte_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), "");
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        let o = ltn(&[
            "pretrain",
            "--config",
            &cfg,
            "--seed",
            "7",
            "--out",
            out.to_str().unwrap(),
        ]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    for file in ["metrics.jsonl", "checkpoint.ltn", "config.txt"] {
        assert_eq!(
            fs::read(a.join(file)).unwrap(),
            fs::read(b.join(file)).unwrap(),
            "{file}"
        );
    }
    let header = fs::read_to_string(a.join("metrics.jsonl")).unwrap();
    assert!(header.lines().next().unwrap().contains("\"seed\":7"));
}

#[test]
fn probe_and_align_from_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), "");
    let run = dir.path().join("run");
    let run_s = run.to_str().unwrap();
    assert!(ltn(&["pretrain", "--config", &cfg, "--out", run_s]).status.success());
    let ck = run.join("checkpoint.ltn");
    let ck_s = ck.to_str().unwrap();

    assert!(ltn(&["probe", "--checkpoint", ck_s, "--out", run_s]).status.success());
    let probe: serde_json::Value = serde_json::from_slice(&fs::read(run.join("probe.json")).unwrap()).unwrap();
    let acc = probe["representation"]["test_accuracy"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&acc));
    assert_eq!(probe["config"]["dim"], "16");

    assert!(ltn(&["align", "--checkpoint", ck_s, "--out", run_s]).status.success());
    let csv = fs::read_to_string(run.join("alignment.csv")).unwrap();
    assert!(csv.starts_with("# "));
    let rows: Vec<&str> = csv.lines().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(rows[0], "segment_index,t_start,coord_1,coord_2");
    assert_eq!(rows.len(), 21);
}

#[test]
fn unknown_key_exits_two_and_names_it() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), "warp_factor = 9\n");
    let o = ltn(&[
        "pretrain",
        "--config",
        &cfg,
        "--out",
        dir.path().join("x").to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("warp_factor"));
}

#[test]
fn invalid_value_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), "temperature = -1\n");
    let o = ltn(&[
        "pretrain",
        "--config",
        &cfg,
        "--out",
        dir.path().join("x").to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("temperature"));
}

#[test]
fn missing_config_file_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let o = ltn(&[
        "pretrain",
        "--config",
        "/nonexistent/run.cfg",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn divergence_exits_three_with_step() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), "learning_rate = 1e300\n");
    let o = ltn(&[
        "pretrain",
        "--config",
        &cfg,
        "--out",
        dir.path().join("x").to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("at step"));
}

#[test]
fn corrupt_checkpoint_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let ck = dir.path().join("bad.ltn");
    fs::write(&ck, b"not a checkpoint").unwrap();
    let o = ltn(&[
        "probe",
        "--checkpoint",
        ck.to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn small_ablation_is_worker_independent() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), "");
    let mut tables = Vec::new();
    for workers in ["1", "3"] {
        let out = dir.path().join(format!("ab{workers}"));
        let o = Command::new(env!("CARGO_BIN_EXE_ltn"))
            .args(["ablate", "--config", &cfg, "--out", out.to_str().unwrap()])
            .args(["--seeds", "2", "--axes", "positives", "--workers", workers])
            .output()
            .unwrap();
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        tables.push(fs::read_to_string(out.join("summary.tsv")).unwrap());
        assert!(out.join("summary.json").exists());
    }
    assert_eq!(tables[0], tables[1]);
    let rows: Vec<&str> = tables[0].lines().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(rows.len(), 4);
    assert!(rows[1].starts_with("positives\tP=1\t"));
}

#[test]
fn unknown_axis_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let o = ltn(&["ablate", "--axes", "colour", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}
