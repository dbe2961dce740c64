use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn hpgcg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hpgcg"))
        .args(args)
        .env_remove("HPGCG_THREADS")
        .output()
        .expect("failed to launch the binary")
}

fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stdout_json(out: &Output) -> serde_json::Value {
    assert!(
        out.status.success(),
        "exit {:?}: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).unwrap()
}

fn make_dataset(dir: &Path, name: &str, patch: usize, seed: u64) -> PathBuf {
    let path = dir.join(name);
    let out = hpgcg(&[
        "make-dataset",
        "--synthetic",
        "1",
        "--synthetic-size",
        "8",
        "--patch-size",
        &patch.to_string(),
        "--stride",
        &patch.to_string(),
        "--variance",
        "0.01",
        "--seed",
        &seed.to_string(),
        "--out",
        path_str(&path),
    ]);
    let v = stdout_json(&out);
    assert_eq!(v["patch_size"], patch);
    path
}

fn train_args<'a>(data: &'a str, out: &'a str, trace: &'a str) -> Vec<&'a str> {
    vec![
        "train",
        "--data",
        data,
        "--out",
        out,
        "--trace",
        trace,
        "--lambda",
        "1",
        "--tolerance",
        "1e-4",
        "--max-iterations",
        "3000",
    ]
}

#[test]
fn training_writes_a_monotone_trace() {
    let dir = tempfile::tempdir().unwrap();
    let data = make_dataset(dir.path(), "set.json", 4, 1);
    let model = dir.path().join("model.json");
    let trace = dir.path().join("trace.csv");
    let v = stdout_json(&hpgcg(&train_args(
        path_str(&data),
        path_str(&model),
        path_str(&trace),
    )));
    assert_eq!(v["kind"], "quadratic");
    assert!(model.is_file());

    let text = std::fs::read_to_string(&trace).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("k,residual,theta,objective"));
    let objectives: Vec<f64> = lines
        .map(|l| l.rsplit(',').next().unwrap().parse().unwrap())
        .collect();
    assert_eq!(
        objectives.len(),
        v["iterations"].as_u64().unwrap() as usize + 1
    );
    for w in objectives.windows(2) {
        assert!(
            w[1] <= w[0] + 1e-10 * (1.0 + w[0].abs()),
            "{} -> {}",
            w[0],
            w[1]
        );
    }

    let rc = hpgcg(&[
        "rate-check",
        "--trace",
        path_str(&trace),
        "--k-min",
        "10",
        "--k-max",
        "2000",
    ]);
    let code = rc.status.code();
    let check: serde_json::Value = serde_json::from_slice(&rc.stdout).unwrap();
    assert_eq!(check["k_min"], 10);
    assert_eq!(
        code,
        Some(if check["pass"].as_bool().unwrap() {
            0
        } else {
            1
        })
    );
}

#[test]
fn rate_check_rejects_a_plateau() {
    let dir = tempfile::tempdir().unwrap();
    let trace = dir.path().join("flat.csv");
    let mut text = String::from("k,residual,theta,objective\n");
    for k in 0..=200 {
        text.push_str(&format!("{k},1e-3,5e-1,1e0\n"));
    }
    text.push_str("201,0e0,,0e0\n");
    std::fs::write(&trace, text).unwrap();
    let out = hpgcg(&["rate-check", "--trace", path_str(&trace)]);
    assert_eq!(out.status.code(), Some(1));
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["pass"], false);

    std::fs::write(&trace, "not,a,trace\n").unwrap();
    let out = hpgcg(&["rate-check", "--trace", path_str(&trace)]);
    assert_eq!(out.status.code(), Some(1));
    let e: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(e["error"], "format");
}

fn write_flat_pgm(path: &Path, size: usize, level: u8) {
    let mut bytes = format!("P5\n{size} {size}\n255\n").into_bytes();
    bytes.extend(std::iter::repeat_n(level, size * size));
    std::fs::write(path, bytes).unwrap();
}

#[test]
fn flat_image_is_returned_unchanged() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("flat.pgm");
    let output = dir.path().join("out.pgm");
    let tiles = dir.path().join("tiles");
    let map = dir.path().join("alpha.csv");
    std::fs::create_dir(&tiles).unwrap();
    write_flat_pgm(&input, 10, 128);
    let v = stdout_json(&hpgcg(&[
        "denoise",
        "--input",
        path_str(&input),
        "--out",
        path_str(&output),
        "--alpha",
        "0.1",
        "--patch-size",
        "4",
        "--maxval",
        "255",
        "--alpha-map",
        path_str(&map),
        "--patch-dir",
        path_str(&tiles),
    ]));
    assert!(v.is_object());
    assert_eq!(
        std::fs::read(&output).unwrap(),
        std::fs::read(&input).unwrap()
    );
    // a 10×10 image holds 2×2 whole tiles
    let rows = std::fs::read_to_string(&map).unwrap();
    assert_eq!(rows.lines().count(), 1 + 4);
    assert!(rows.starts_with("row,col,alpha,status,gap"));
    assert_eq!(std::fs::read_dir(&tiles).unwrap().count(), 4);
    assert!(tiles.join("tile_0001_0001.pgm").is_file());
}

#[test]
fn mismatched_patch_size_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let small = make_dataset(dir.path(), "small.json", 2, 1);
    let large = make_dataset(dir.path(), "large.json", 4, 1);
    let model = dir.path().join("model.json");
    stdout_json(&hpgcg(&[
        "train",
        "--data",
        path_str(&small),
        "--out",
        path_str(&model),
        "--max-iterations",
        "50",
    ]));
    let report = dir.path().join("report.json");
    let named = format!("q={}", path_str(&model));
    let out = hpgcg(&[
        "eval",
        "--data",
        path_str(&large),
        "--model",
        &named,
        "--out",
        path_str(&report),
    ]);
    assert_eq!(out.status.code(), Some(2));
    let e: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(e["error"], "dimension");
    assert!(!report.exists());

    let out = hpgcg(&[
        "train",
        "--data",
        path_str(&small),
        "--out",
        path_str(&model),
        "--lambda",
        "-1",
    ]);
    assert_eq!(out.status.code(), Some(2));
    let out = hpgcg(&["train", "--bogus"]);
    assert_eq!(out.status.code(), Some(2));
    let e: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(e["error"], "usage");
}

#[test]
fn single_threaded_reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let data = make_dataset(dir.path(), "set.json", 4, 7);
    let data_bytes = std::fs::read(&data).unwrap();
    let payload = data.with_extension("bin");
    let payload_bytes = std::fs::read(&payload).unwrap();

    let mut runs = Vec::new();
    for (i, threads) in ["1", "1", "3"].iter().enumerate() {
        let model = dir.path().join(format!("m{i}.json"));
        let trace = dir.path().join(format!("t{i}.csv"));
        let mut args = vec!["--threads", threads];
        args.extend(train_args(
            path_str(&data),
            path_str(&model),
            path_str(&trace),
        ));
        stdout_json(&hpgcg(&args));
        runs.push((
            std::fs::read(model.with_extension("bin")).unwrap(),
            std::fs::read(&trace).unwrap(),
        ));
    }
    assert_eq!(runs[0], runs[1]);
    // the reductions run in a fixed order, so the thread count does not matter either
    assert_eq!(runs[0], runs[2]);

    // the dataset was only read
    assert_eq!(std::fs::read(&data).unwrap(), data_bytes);
    assert_eq!(std::fs::read(&payload).unwrap(), payload_bytes);

    let again = make_dataset(dir.path(), "again.json", 4, 7);
    assert_eq!(
        std::fs::read(again.with_extension("bin")).unwrap(),
        payload_bytes
    );
}

#[test]
fn failed_runs_leave_no_partial_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let data = make_dataset(dir.path(), "set.json", 2, 3);
    let model = dir.path().join("model.json");
    // the trace target is a directory, so writing it fails after the model is saved
    let trace = dir.path().join("trace_dir");
    std::fs::create_dir(&trace).unwrap();
    let out = hpgcg(&[
        "train",
        "--data",
        path_str(&data),
        "--out",
        path_str(&model),
        "--trace",
        path_str(&trace),
        "--max-iterations",
        "20",
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(!model.exists());
    assert!(!model.with_extension("bin").exists());
    assert!(trace.is_dir());

    let out = hpgcg(&["train", "--data", path_str(&data), "--out", path_str(&data)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(data.is_file());
}

#[test]
fn gap_check_reports_a_valid_decomposition() {
    let out = hpgcg(&[
        "gap-check",
        "--size",
        "4",
        "--samples",
        "5",
        "--seed",
        "2",
        "--tolerance",
        "1e-10",
    ]);
    let v = stdout_json(&out);
    assert!(v.is_object());
}

#[test]
fn eval_with_the_constant_grid() {
    let dir = tempfile::tempdir().unwrap();
    let data = make_dataset(dir.path(), "set.json", 2, 5);
    let report = dir.path().join("report.json");
    let csv = dir.path().join("report.csv");
    let cache = dir.path().join("oracle.json");
    let args = [
        "eval",
        "--data",
        path_str(&data),
        "--constant-grid",
        "--out",
        path_str(&report),
        "--csv",
        path_str(&csv),
        "--oracle-cache",
        path_str(&cache),
        "--oracle-tolerance",
        "1e-4",
    ];
    stdout_json(&hpgcg(&args));
    let r: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(r["models"].as_array().unwrap().len(), 8);
    assert_eq!(r["count"], 16);
    assert!(cache.is_file());
    let first = std::fs::read(&report).unwrap();
    stdout_json(&hpgcg(&args));
    assert_eq!(std::fs::read(&report).unwrap(), first);
}
