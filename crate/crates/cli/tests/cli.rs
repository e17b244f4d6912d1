use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use rtf_forge::dataset::Dataset;
use rtf_forge::eval::evaluate;
use rtf_forge::regressors::LinearInterpModel;
use rtf_forge_cli::commands::*;
use rtf_forge_cli::ExperimentConfig;

const TINY: &str = r#"
[room]
dims = [4.0, 6.0, 3.0]
rt60 = 0.2

[mics]
positions = [[1.91, 1.0, 1.4], [2.09, 1.0, 1.4]]

[grid]
origin = [1.5, 2.5, 1.0]
extent = [0.1, 0.1, 0.05]
spacing = 0.05

[measurement]
seed = 3

[model]
kind = "dnn"

[model.dnn]
hidden = [8]

[model.dnn.train]
max_epochs = 3
batch_size = 4

[eval]
n_eval_poses = 12
eval_seed = 5

[sweep]
models = ["linear"]
repeats = 3
"#;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_rtf-forge"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn gen(dir: &Path, text: &str) -> (PathBuf, PathBuf) {
    let cfg = write_config(dir, "cfg.toml", text);
    let out = dir.join("data");
    let o = run(&["gen", "--config", s(&cfg), "--out", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    (cfg, out)
}

#[test]
fn gen_writes_a_partitioned_reproducible_split() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, out) = gen(dir.path(), TINY);
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join(MANIFEST_FILE)).unwrap()).unwrap();
    let rows = &manifest["rows"];
    let total: u64 = ["train", "dev", "test"].iter().map(|k| rows[k].as_u64().unwrap()).sum();
    assert_eq!(total, 18);
    assert_eq!(rows["train"], 9);

    let first: Vec<Vec<u8>> = [TRAIN_FILE, DEV_FILE, TEST_FILE].iter().map(|f| fs::read(out.join(f)).unwrap()).collect();
    let o = run(&["gen", "--config", s(&cfg), "--out", s(&out)]);
    assert!(o.status.success());
    for (f, before) in [TRAIN_FILE, DEV_FILE, TEST_FILE].iter().zip(first) {
        assert_eq!(fs::read(out.join(f)).unwrap(), before, "{f} changed on rerun");
    }

    // the manifest reproduces the run
    let again = dir.path().join("again");
    let o = run(&["gen", "--config", s(&out.join(MANIFEST_FILE)), "--out", s(&again)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(fs::read(again.join(TRAIN_FILE)).unwrap(), fs::read(out.join(TRAIN_FILE)).unwrap());
}

#[test]
fn invalid_config_exits_2_naming_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "bad.toml", &TINY.replace("spacing = 0.05", "spacing = 0"));
    let o = run(&["gen", "--config", s(&cfg), "--out", s(&dir.path().join("x"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("grid.spacing"), "{}", stderr(&o));
    assert!(!dir.path().join("x").join(TRAIN_FILE).exists());

    let cfg = write_config(dir.path(), "unknown.toml", &TINY.replace("[eval]", "[eval]\nbogus = 1"));
    let o = run(&["gen", "--config", s(&cfg)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("bogus"));

    let o = run(&["gen", "--config", s(&dir.path().join("absent.toml"))]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn train_reports_capability_and_runtime_errors() {
    let dir = tempfile::tempdir().unwrap();
    let (_, data) = gen(dir.path(), TINY);

    let ff = write_config(dir.path(), "ff.toml", &TINY.replace("kind = \"dnn\"", "kind = \"free_field\""));
    let o = run(&["train", "--config", s(&ff), "--data", s(&data), "--out", s(&dir.path().join("ff"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("requires no training"));

    let aff = write_config(
        dir.path(),
        "aff.toml",
        &TINY.replace("kind = \"dnn\"", "kind = \"affine\"\n[model.affine]\nregions = 3"),
    );
    let o = run(&["train", "--config", s(&aff), "--data", s(&data), "--out", s(&dir.path().join("aff"))]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("region"), "{}", stderr(&o));

    let dnn = dir.path().join("dnn");
    let cfg = dir.path().join("cfg.toml");
    let o = run(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&dnn)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let history = fs::read_to_string(dnn.join(HISTORY_FILE)).unwrap();
    let fit: serde_json::Value = serde_json::from_str(&fs::read_to_string(dnn.join(FIT_FILE)).unwrap()).unwrap();
    assert_eq!(history.lines().count() - 1, fit["epochs"].as_u64().unwrap() as usize);

    let o = run(&["train", "--config", s(&cfg), "--data", s(&dir.path().join("nowhere"))]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn eval_free_field_on_anechoic_data() {
    let dir = tempfile::tempdir().unwrap();
    let text = TINY.replace("rt60 = 0.2", "rt60 = 0.0").replace("kind = \"dnn\"", "kind = \"free_field\"");
    let (cfg, data) = gen(dir.path(), &text);
    let out = dir.path().join("eval");
    let o = run(&["eval", "--config", s(&cfg), "--data", s(&data.join(TEST_FILE)), "--out", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join(REPORT_FILE)).unwrap()).unwrap();
    // the kernel rolls off near Nyquist, so the oracle holds below aliasing
    let ild = report["ild_mae"].as_array().unwrap();
    let below: Vec<f64> = ild
        .iter()
        .enumerate()
        .take_while(|(k, _)| *k as f64 * 16000.0 / 1024.0 < 952.778)
        .map(|(_, v)| v.as_f64().unwrap())
        .collect();
    assert_eq!(below.len(), 61);
    assert!(below.iter().sum::<f64>() / 61.0 < 0.1);
    assert!(report["ipd_mae"][10].as_f64().unwrap() < 0.02);
    let mut keys: Vec<&str> = report.as_object().unwrap().keys().map(String::as_str).collect();
    keys.sort();
    assert_eq!(
        keys,
        [
            "ild_ci", "ild_ci_mean", "ild_mae", "ild_mae_mean", "ipd_ci", "ipd_ci_mean", "ipd_mae", "ipd_mae_mean",
            "meta", "n_samples"
        ]
    );
    let curve = fs::read_to_string(out.join(CURVE_FILE)).unwrap();
    assert_eq!(curve.lines().count(), 514);
    assert!(curve.lines().next().unwrap().contains("aliasing_hz=952.778"));

    // off-lattice poses with targets generated on demand
    let o = run(&["eval", "--config", s(&cfg), "--out", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
}

/// Rewrites the JSON header of an RTFD file.
fn patch_header(path: &Path, f: impl FnOnce(&mut serde_json::Value)) {
    let bytes = fs::read(path).unwrap();
    let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let mut header: serde_json::Value = serde_json::from_slice(&bytes[16..16 + len]).unwrap();
    f(&mut header);
    let text = serde_json::to_vec(&header).unwrap();
    let mut out = bytes[..8].to_vec();
    out.extend_from_slice(&(text.len() as u64).to_le_bytes());
    out.extend_from_slice(&text);
    out.extend_from_slice(&bytes[16 + len..]);
    fs::write(path, out).unwrap();
}

#[test]
fn eval_rejects_mismatched_headers() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, data) = gen(dir.path(), &TINY.replace("kind = \"dnn\"", "kind = \"free_field\""));
    let test = data.join(TEST_FILE);
    patch_header(&test, |h| h["n_bins"] = 257.into());
    let o = run(&["eval", "--config", s(&cfg), "--data", s(&test), "--out", s(&dir.path().join("e"))]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(!dir.path().join("e").join(REPORT_FILE).exists());

    let o = run(&["eval", "--config", s(&cfg), "--model", s(&dir.path().join("none.rtfm"))]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn sweeps_count_rows_and_validate_lists() {
    let dir = tempfile::tempdir().unwrap();
    let text = TINY
        .replace("extent = [0.1, 0.1, 0.05]", "extent = [0.2, 0.2, 0.1]")
        .replace("[eval]", "[eval]\norigin = [1.5, 2.5, 1.05]\nextent = [0.2, 0.2, 0.0]");
    let cfg = write_config(dir.path(), "cfg.toml", &text);
    let out = dir.path().join("sweep");
    let o = run(&["sweep-distance", "--config", s(&cfg), "--factors", "1,2", "--out", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let table = fs::read_to_string(out.join(DISTANCE_TABLE)).unwrap();
    assert_eq!(table.lines().count(), 1 + 2);

    let o = run(&["sweep-distance", "--config", s(&cfg), "--factors", "0", "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(2));

    let empty = write_config(dir.path(), "empty.toml", &TINY.replace("repeats = 3", "repeats = 3\nsnrs = []"));
    let o = run(&["sweep-snr", "--config", s(&empty), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn snr_sweep_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let text = TINY
        .replace("seed = 3", "seed = 3\nmode = \"noise_excited\"\nduration = 0.1")
        .replace("[model.dnn]", "[model.linear]\nmode = \"inverse_distance\"\nneighbors = 4\nexponent = 1.0\n\n[model.dnn]");
    let cfg = write_config(dir.path(), "cfg.toml", &text);
    let tables: Vec<String> = ["a", "b"]
        .iter()
        .map(|d| {
            let out = dir.path().join(d);
            let o = run(&["sweep-snr", "--config", s(&cfg), "--snrs", "20,10", "--out", s(&out)]);
            assert!(o.status.success(), "{}", stderr(&o));
            fs::read_to_string(out.join(SNR_TABLE)).unwrap()
        })
        .collect();
    assert_eq!(tables[0], tables[1]);
    assert_eq!(tables[0].lines().count(), 3);
}

#[test]
fn repeat_measure_reports_metadata() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "cfg.toml", TINY);
    let out = dir.path().join("rep");
    let o = run(&["repeat-measure", "--config", s(&cfg), "--repeats", "1"]);
    assert_eq!(o.status.code(), Some(2));
    let o = run(&["repeat-measure", "--config", s(&cfg), "--repeats", "3", "--duration", "0.2", "--out", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join(REPORT_FILE)).unwrap()).unwrap();
    assert_eq!(report["meta"]["repeats"], 3);
    assert_eq!(report["meta"]["duration"], 0.2);
    assert!(report["ild_mae_mean"].as_f64().unwrap() > 0.0);
}

#[test]
fn export_features_writes_the_ild_block() {
    let dir = tempfile::tempdir().unwrap();
    let (_, data) = gen(dir.path(), TINY);
    let csv = dir.path().join("ild.csv");
    let o = run(&["export-features", "--data", s(&data.join(TRAIN_FILE)), "--out", s(&csv)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let ds = Dataset::load(&data.join(TRAIN_FILE)).unwrap();
    let text = fs::read_to_string(&csv).unwrap();
    assert_eq!(text.lines().count(), ds.len());
    for (line, row) in text.lines().zip(ds.targets.outer_iter()) {
        let vals: Vec<f64> = line.split(',').map(|v| v.parse().unwrap()).collect();
        assert_eq!(vals.len(), 513);
        for (v, t) in vals.iter().zip(row.iter()) {
            let t = *t as f64;
            assert!((v - t).abs() <= 5e-6 * t.abs().max(1e-30));
        }
    }
    let o = run(&["export-features", "--data", s(&dir.path().join("gone.rtfd")), "--out", s(&csv)]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn thread_cap_is_validated() {
    let dir = tempfile::tempdir().unwrap();
    let (_, data) = gen(dir.path(), TINY);
    let (src, dst) = (data.join(DEV_FILE), dir.path().join("o.csv"));
    let args = ["export-features", "--data", s(&src), "--out", s(&dst)];
    let o = bin().args(args).env("RTF_FORGE_THREADS", "1").output().unwrap();
    assert!(o.status.success());
    let o = bin().args(args).env("RTF_FORGE_THREADS", "zero").output().unwrap();
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn linear_interpolation_is_exact_at_training_poses() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, data) = gen(dir.path(), TINY);
    let cfg = ExperimentConfig::load(&cfg).unwrap();
    let train = load_dataset(&data.join(TRAIN_FILE), Some(&cfg)).unwrap();
    let model = LinearInterpModel::fit_dataset(&train, cfg.model.linear).unwrap();
    let r = evaluate(&model, &train.pose_list(), &train.features()).unwrap();
    assert!(r.ild_mae_mean < 1e-5 && r.ipd_mae_mean < 1e-5, "{} {}", r.ild_mae_mean, r.ipd_mae_mean);
}
