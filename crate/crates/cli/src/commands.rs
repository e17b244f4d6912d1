use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rtf_forge::dataset::{generate_dataset, random_poses, Dataset, MeasurementMode, Pipeline, LAYOUT_ILD_IPD};
use rtf_forge::eval::{
    aliasing_frequency, evaluate, export_curve, measurement_error_experiment, sig6, EvalReport, FreqErrorCurve,
};
use rtf_forge::nn::TrainOutcome;
use rtf_forge::persist::write_atomic;
use rtf_forge::regressors::{
    self, DnnRegressor, FreeFieldModel, LinearInterpModel, ModelKind, PiecewiseAffineModel, Regressor,
};
use rtf_forge::room_sim::Pose;
use rtf_forge::rtf::FeatureVector;
use rtf_forge::{FEATURE_DIM, FFT_SIZE, N_BINS};
use serde::Serialize;

use crate::config::{EvalTarget, ExperimentConfig};
use crate::error::{CliError, CliResult};

pub const TRAIN_FILE: &str = "train.rtfd";
pub const DEV_FILE: &str = "dev.rtfd";
pub const TEST_FILE: &str = "test.rtfd";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const MODEL_FILE: &str = "model.rtfm";
pub const HISTORY_FILE: &str = "history.csv";
pub const FIT_FILE: &str = "fit.json";
pub const REPORT_FILE: &str = "report.json";
pub const CURVE_FILE: &str = "curve.csv";
pub const DISTANCE_TABLE: &str = "sweep_distance.csv";
pub const SNR_TABLE: &str = "sweep_snr.csv";

fn ensure_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(&format!("creating {}", dir.display()), e))
}

fn write_json(path: &Path, value: &impl Serialize) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).map_err(rtf_forge::Error::from)?;
    Ok(write_atomic(path, text.as_bytes())?)
}

/// Loads a dataset and checks it against the build's feature layout and
/// the config's sample rate.
pub fn load_dataset(path: &Path, cfg: Option<&ExperimentConfig>) -> CliResult<Dataset> {
    if !path.is_file() {
        return Err(CliError::Validation(format!("missing dataset file {}", path.display())));
    }
    let data = Dataset::load(path).map_err(|e| match e {
        rtf_forge::Error::Io(io) => CliError::Validation(format!("{}: {io}", path.display())),
        other => other.into(),
    })?;
    let h = &data.header;
    let mismatch = |what: &str, got: String, want: String| {
        CliError::Validation(format!("{}: header {what} is {got}, expected {want}", path.display()))
    };
    if h.fft_size != FFT_SIZE {
        return Err(mismatch("fft_size", h.fft_size.to_string(), FFT_SIZE.to_string()));
    }
    if h.n_bins != N_BINS {
        return Err(mismatch("n_bins", h.n_bins.to_string(), N_BINS.to_string()));
    }
    if h.layout != LAYOUT_ILD_IPD {
        return Err(mismatch("layout", h.layout.clone(), LAYOUT_ILD_IPD.into()));
    }
    if h.target_dim != FEATURE_DIM {
        return Err(mismatch("target_dim", h.target_dim.to_string(), FEATURE_DIM.to_string()));
    }
    if let Some(cfg) = cfg {
        if h.sample_rate != cfg.room.sample_rate {
            return Err(mismatch(
                "sample_rate",
                h.sample_rate.to_string(),
                cfg.room.sample_rate.to_string(),
            ));
        }
    }
    Ok(data)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GenSummary {
    pub train: usize,
    pub dev: usize,
    pub test: usize,
}

/// Generates the grid dataset, splits it and writes the three files plus
/// a manifest that can be fed back as `--config`.
pub fn cmd_gen(cfg: &ExperimentConfig, out: &Path) -> CliResult<GenSummary> {
    let pipeline = cfg.pipeline()?;
    let grid = cfg.grid()?;
    let data = generate_dataset(&pipeline, &grid, cfg.measurement.seed)?;
    let split = data.split(cfg.split.spec())?;
    ensure_dir(out)?;
    split.train.save(&out.join(TRAIN_FILE))?;
    split.dev.save(&out.join(DEV_FILE))?;
    split.test.save(&out.join(TEST_FILE))?;
    let summary = GenSummary {
        train: split.train.len(),
        dev: split.dev.len(),
        test: split.test.len(),
    };
    let manifest = serde_json::json!({
        "config": cfg,
        "rows": summary,
        "grid_counts": grid.counts,
        "train": split.train.manifest(),
        "dev": split.dev.manifest(),
        "test": split.test.manifest(),
    });
    write_json(&out.join(MANIFEST_FILE), &manifest)?;
    Ok(summary)
}

/// Fits `kind` on the given splits. The free-field model needs no data.
pub fn fit_model(
    cfg: &ExperimentConfig,
    kind: ModelKind,
    train: &Dataset,
    dev: &Dataset,
) -> CliResult<(Box<dyn Regressor>, Option<TrainOutcome>)> {
    Ok(match kind {
        ModelKind::FreeField => (Box::new(free_field(cfg)?), None),
        ModelKind::Linear => (Box::new(LinearInterpModel::fit_dataset(train, cfg.model.linear)?), None),
        ModelKind::Affine => (Box::new(PiecewiseAffineModel::fit_dataset(train, &cfg.model.affine)?), None),
        ModelKind::Dnn => {
            let (m, outcome) = DnnRegressor::fit(train, dev, &cfg.model.dnn)?;
            (Box::new(m), Some(outcome))
        }
    })
}

fn free_field(cfg: &ExperimentConfig) -> CliResult<FreeFieldModel> {
    Ok(FreeFieldModel::new(cfg.mic_array()?, cfg.room.c, cfg.room.sample_rate))
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainSummary {
    pub kind: ModelKind,
    pub n_train: usize,
    pub n_dev: usize,
    pub epochs: Option<usize>,
    pub best_epoch: Option<usize>,
    pub best_dev_loss: Option<f64>,
    /// Training pairs per region (affine).
    pub region_counts: Option<Vec<usize>>,
}

pub fn history_csv(outcome: &TrainOutcome) -> String {
    let mut s = String::from("epoch,train_loss,dev_loss,learning_rate\n");
    for h in &outcome.history {
        let _ = writeln!(
            s,
            "{},{},{},{}",
            h.epoch,
            sig6(h.train_loss),
            sig6(h.dev_loss),
            sig6(h.learning_rate)
        );
    }
    s
}

pub fn cmd_train(cfg: &ExperimentConfig, data_dir: &Path, out: &Path) -> CliResult<TrainSummary> {
    let kind = cfg.model.kind;
    if kind == ModelKind::FreeField {
        return Err(CliError::Validation("model kind free_field requires no training".into()));
    }
    let train = load_dataset(&data_dir.join(TRAIN_FILE), Some(cfg))?;
    let dev = load_dataset(&data_dir.join(DEV_FILE), Some(cfg))?;
    let mut region_counts = None;
    let (model, outcome): (Box<dyn Regressor>, _) = if kind == ModelKind::Affine {
        let m = PiecewiseAffineModel::fit_dataset(&train, &cfg.model.affine)?;
        region_counts = Some(m.counts.clone());
        (Box::new(m), None)
    } else {
        fit_model(cfg, kind, &train, &dev)?
    };
    ensure_dir(out)?;
    model.save(&out.join(MODEL_FILE))?;
    let mut summary = TrainSummary {
        kind,
        n_train: train.len(),
        n_dev: dev.len(),
        epochs: None,
        best_epoch: None,
        best_dev_loss: None,
        region_counts,
    };
    if let Some(o) = &outcome {
        write_atomic(&out.join(HISTORY_FILE), history_csv(o).as_bytes())?;
        summary.epochs = Some(o.history.len());
        summary.best_epoch = Some(o.best_epoch);
        summary.best_dev_loss = Some(o.best_dev_loss);
    }
    write_json(&out.join(FIT_FILE), &summary)?;
    Ok(summary)
}

/// Seeded off-lattice poses with analytic targets from the configured room.
pub fn eval_set(cfg: &ExperimentConfig) -> CliResult<(Vec<Pose>, Vec<FeatureVector>)> {
    let (origin, extent) = cfg.eval_box();
    let poses = random_poses(origin, extent, cfg.eval.n_eval_poses, cfg.eval.eval_seed);
    let pipeline = Pipeline::new(cfg.room_spec()?, cfg.mic_array()?, MeasurementMode::Analytic)?;
    let rows = pipeline.measure_all(&poses, cfg.eval.eval_seed)?;
    let targets = rows
        .outer_iter()
        .map(|r| FeatureVector::from_slice(r.as_slice().expect("standard layout")))
        .collect::<rtf_forge::Result<_>>()?;
    Ok((poses, targets))
}

fn write_report(cfg: &ExperimentConfig, report: &EvalReport, out: &Path) -> CliResult<()> {
    ensure_dir(out)?;
    write_json(&out.join(REPORT_FILE), report)?;
    let fa = aliasing_frequency(cfg.mic_spacing(), cfg.room.c)?;
    let curve = FreqErrorCurve::new(report, cfg.room.sample_rate, fa)?;
    export_curve(&curve, &out.join(CURVE_FILE))?;
    Ok(())
}

/// Scores a saved model (or the free-field model when `model` is absent
/// and the config asks for it) on `test` when given, else on off-lattice
/// poses.
pub fn cmd_eval(cfg: &ExperimentConfig, model: Option<&Path>, test: Option<&Path>, out: &Path) -> CliResult<EvalReport> {
    let regressor: Box<dyn Regressor> = match model {
        Some(p) if !p.is_file() => {
            return Err(CliError::Validation(format!("missing model file {}", p.display())));
        }
        Some(p) => regressors::load(p)?,
        None if cfg.model.kind == ModelKind::FreeField => Box::new(free_field(cfg)?),
        None => {
            return Err(CliError::Validation(format!(
                "--model is required for model kind {}",
                cfg.model.kind
            )))
        }
    };
    let mut report = match test {
        Some(path) => {
            let data = load_dataset(path, Some(cfg))?;
            if data.header.direct_normalized {
                return Err(CliError::Validation(format!(
                    "{}: direct-path normalized targets cannot be scored",
                    path.display()
                )));
            }
            let mut r = evaluate(regressor.as_ref(), &data.pose_list(), &data.features())?;
            r.meta.dataset = Some(path.display().to_string());
            r
        }
        None if cfg.eval.target == EvalTarget::TestSplit => {
            return Err(CliError::Validation("eval.target = test_split needs --data".into()));
        }
        None => {
            let (poses, targets) = eval_set(cfg)?;
            let mut r = evaluate(regressor.as_ref(), &poses, &targets)?;
            r.meta.dataset = Some(format!("off_lattice:{}:{}", cfg.eval.n_eval_poses, cfg.eval.eval_seed));
            r
        }
    };
    report.meta.spacing = Some(cfg.grid.spacing);
    report.meta.snr_db = cfg.measurement.snr;
    write_report(cfg, &report, out)?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub model: ModelKind,
    /// Decimation factor (distance sweep).
    pub factor: Option<usize>,
    pub spacing: f64,
    pub snr_db: Option<f64>,
    pub n_train: usize,
    pub ild_mae: f64,
    pub ild_ci: f64,
    pub ipd_mae: f64,
    pub ipd_ci: f64,
}

impl SweepRow {
    fn new(model: ModelKind, spacing: f64, n_train: usize, r: &EvalReport) -> Self {
        SweepRow {
            model,
            factor: None,
            spacing,
            snr_db: None,
            n_train,
            ild_mae: r.ild_mae_mean,
            ild_ci: r.ild_ci_mean,
            ipd_mae: r.ipd_mae_mean,
            ipd_ci: r.ipd_ci_mean,
        }
    }
}

pub fn table_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from("model,factor,spacing,snr_db,n_train,ild_mae,ild_ci,ipd_mae,ipd_ci\n");
    let opt = |v: Option<String>| v.unwrap_or_default();
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{}",
            r.model,
            opt(r.factor.map(|f| f.to_string())),
            sig6(r.spacing),
            opt(r.snr_db.map(sig6)),
            r.n_train,
            sig6(r.ild_mae),
            sig6(r.ild_ci),
            sig6(r.ipd_mae),
            sig6(r.ipd_ci)
        );
    }
    s
}

fn load_or_generate(cfg: &ExperimentConfig, data_dir: Option<&Path>) -> CliResult<(Dataset, Dataset)> {
    if let Some(dir) = data_dir {
        return Ok((
            load_dataset(&dir.join(TRAIN_FILE), Some(cfg))?,
            load_dataset(&dir.join(DEV_FILE), Some(cfg))?,
        ));
    }
    let data = generate_dataset(&cfg.pipeline()?, &cfg.grid()?, cfg.measurement.seed)?;
    let split = data.split(cfg.split.spec())?;
    Ok((split.train, split.dev))
}

fn check_models(models: &[ModelKind]) -> CliResult<()> {
    if models.is_empty() {
        return Err(CliError::Validation("sweep.models: list is empty".into()));
    }
    Ok(())
}

/// Refits every configured model on the decimated training lattice and
/// scores all of them on one shared set of evaluation poses. The dev split
/// is not decimated; it only drives early stopping.
pub fn cmd_sweep_distance(
    cfg: &ExperimentConfig,
    factors: &[usize],
    data_dir: Option<&Path>,
    out: Option<&Path>,
) -> CliResult<Vec<SweepRow>> {
    if factors.is_empty() {
        return Err(CliError::Validation("--factors: list is empty".into()));
    }
    if factors.contains(&0) {
        return Err(CliError::Validation("--factors: factors must be >= 1".into()));
    }
    check_models(&cfg.sweep.models)?;
    let (train, dev) = load_or_generate(cfg, data_dir)?;
    if train.header.lattice.is_none() {
        return Err(CliError::Validation("distance sweep needs a lattice dataset".into()));
    }
    let (poses, targets) = eval_set(cfg)?;
    let mut rows = Vec::new();
    for &kind in &cfg.sweep.models {
        for &f in factors {
            let tr = train.decimate(f)?;
            let (model, _) = fit_model(cfg, kind, &tr, &dev)?;
            let report = evaluate(model.as_ref(), &poses, &targets)?;
            let mut row = SweepRow::new(kind, cfg.grid.spacing * f as f64, tr.len(), &report);
            row.factor = Some(f);
            rows.push(row);
        }
    }
    if let Some(dir) = out {
        ensure_dir(dir)?;
        write_atomic(&dir.join(DISTANCE_TABLE), table_csv(&rows).as_bytes())?;
    }
    Ok(rows)
}

/// Regenerates noise-excited training data at each SNR, refits and scores
/// against analytic off-lattice targets.
pub fn cmd_sweep_snr(cfg: &ExperimentConfig, snrs: &[f64], out: Option<&Path>) -> CliResult<Vec<SweepRow>> {
    if snrs.is_empty() {
        return Err(CliError::Validation("--snrs: list is empty".into()));
    }
    if snrs.iter().any(|s| !s.is_finite()) {
        return Err(CliError::Validation("--snrs: values must be finite".into()));
    }
    check_models(&cfg.sweep.models)?;
    let (poses, targets) = eval_set(cfg)?;
    let grid = cfg.grid()?;
    let mut rows = Vec::new();
    for &snr in snrs {
        let pipeline = cfg.pipeline()?.with_mode(MeasurementMode::NoiseExcited {
            duration: cfg.measurement.duration,
            snr_db: Some(snr),
        })?;
        let data = generate_dataset(&pipeline, &grid, cfg.measurement.seed)?;
        let split = data.split(cfg.split.spec())?;
        for &kind in &cfg.sweep.models {
            let (model, _) = fit_model(cfg, kind, &split.train, &split.dev)?;
            let report = evaluate(model.as_ref(), &poses, &targets)?;
            let mut row = SweepRow::new(kind, cfg.grid.spacing, split.train.len(), &report);
            row.snr_db = Some(snr);
            rows.push(row);
        }
    }
    if let Some(dir) = out {
        ensure_dir(dir)?;
        write_atomic(&dir.join(SNR_TABLE), table_csv(&rows).as_bytes())?;
    }
    Ok(rows)
}

/// Repeated noise-excited measurement of the probe pose.
pub fn cmd_repeat_measure(
    cfg: &ExperimentConfig,
    repeats: usize,
    duration: Option<f64>,
    out: Option<&Path>,
) -> CliResult<EvalReport> {
    if repeats < 2 {
        return Err(CliError::Validation(format!("--repeats must be >= 2, got {repeats}")));
    }
    let duration = duration.unwrap_or(cfg.measurement.duration);
    if !(duration.is_finite() && duration > 0.0) {
        return Err(CliError::Validation(format!("--duration must be positive, got {duration}")));
    }
    let pipeline = cfg.pipeline()?.with_mode(MeasurementMode::NoiseExcited {
        duration,
        snr_db: cfg.measurement.snr,
    })?;
    let report = measurement_error_experiment(&pipeline, &cfg.probe_pose(), repeats, cfg.measurement.seed)?;
    if let Some(dir) = out {
        write_report(cfg, &report, dir)?;
    }
    Ok(report)
}

/// Writes the ILD block, one row per pose and one column per bin.
pub fn cmd_export_features(dataset: &Path, out: &Path) -> CliResult<usize> {
    let data = load_dataset(dataset, None)?;
    let mut s = String::with_capacity(data.len() * N_BINS * 10);
    for row in data.targets.outer_iter() {
        let line: Vec<String> = row.iter().take(N_BINS).map(|v| sig6(*v as f64)).collect();
        s.push_str(&line.join(","));
        s.push('\n');
    }
    if let Some(dir) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        ensure_dir(dir)?;
    }
    write_atomic(out, s.as_bytes())?;
    Ok(data.len())
}

/// Output directory: the flag when given, else the config's `out_dir`.
pub fn resolve_out(cfg: Option<&ExperimentConfig>, flag: Option<PathBuf>) -> PathBuf {
    flag.or_else(|| cfg.map(|c| c.out_dir.clone())).unwrap_or_else(|| PathBuf::from("."))
}
