//! Per-frequency mean absolute errors with normal-approximation 95%
//! confidence intervals, frequency curves and the repeated-measurement
//! experiment.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{MeasurementMode, Pipeline};
use crate::persist::write_atomic;
use crate::regressors::Regressor;
use crate::room_sim::Pose;
use crate::rtf::{bin_frequencies, ipd_error, FeatureVector};
use crate::{Error, Result, N_BINS};

/// z-value of the two-sided 95% normal interval.
pub const Z95: f64 = 1.96;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalMeta {
    pub regressor: Option<String>,
    pub dataset: Option<String>,
    pub spacing: Option<f64>,
    pub snr_db: Option<f64>,
    pub duration: Option<f64>,
    pub repeats: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalReport {
    /// dB per bin
    pub ild_mae: Vec<f64>,
    pub ild_ci: Vec<f64>,
    /// radians per bin
    pub ipd_mae: Vec<f64>,
    pub ipd_ci: Vec<f64>,
    pub ild_mae_mean: f64,
    /// Half-width over the per-sample, bin-averaged errors.
    pub ild_ci_mean: f64,
    pub ipd_mae_mean: f64,
    pub ipd_ci_mean: f64,
    pub n_samples: usize,
    pub meta: EvalMeta,
}

/// Mean and 95% half-width of `xs` (sample std, N - 1 divisor).
pub fn mean_ci(xs: &[f64]) -> Result<(f64, f64)> {
    let n = xs.len();
    if n < 2 {
        return Err(Error::InsufficientSamples(format!(
            "a confidence interval needs at least 2 samples, got {n}"
        )));
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    Ok((mean, Z95 * (var.sqrt() / (n as f64).sqrt())))
}

fn column_stats(rows: &[Vec<f64>], bins: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    let stats: Vec<(f64, f64)> = (0..bins)
        .into_par_iter()
        .map(|k| mean_ci(&rows.iter().map(|r| r[k]).collect::<Vec<_>>()))
        .collect::<Result<_>>()?;
    Ok(stats.into_iter().unzip())
}

fn row_means(rows: &[Vec<f64>]) -> Vec<f64> {
    rows.iter().map(|r| r.iter().sum::<f64>() / r.len() as f64).collect()
}

/// Absolute ILD error and wrapped IPD distance, per sample and bin.
pub fn abs_errors(preds: &[FeatureVector], targets: &[FeatureVector]) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    if preds.len() != targets.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} targets",
            preds.len(),
            targets.len()
        )));
    }
    preds
        .par_iter()
        .zip(targets)
        .map(|(p, t)| {
            if p.n_bins() != t.n_bins() {
                return Err(Error::Shape("feature vectors differ in bin count".into()));
            }
            let ild = p.ild.iter().zip(&t.ild).map(|(a, b)| (a - b).abs()).collect();
            Ok((ild, ipd_error(p, t)?))
        })
        .collect::<Result<Vec<_>>>()
        .map(|v| v.into_iter().unzip())
}

pub fn mae_per_freq(preds: &[FeatureVector], targets: &[FeatureVector]) -> Result<EvalReport> {
    if preds.len() < 2 {
        return Err(Error::InsufficientSamples(format!(
            "evaluation needs at least 2 samples, got {}",
            preds.len()
        )));
    }
    let (ild, ipd) = abs_errors(preds, targets)?;
    let bins = preds[0].n_bins();
    let (ild_mae, ild_ci) = column_stats(&ild, bins)?;
    let (ipd_mae, ipd_ci) = column_stats(&ipd, bins)?;
    let (_, ild_ci_mean) = mean_ci(&row_means(&ild))?;
    let (_, ipd_ci_mean) = mean_ci(&row_means(&ipd))?;
    Ok(EvalReport {
        ild_mae_mean: ild_mae.iter().sum::<f64>() / bins as f64,
        ipd_mae_mean: ipd_mae.iter().sum::<f64>() / bins as f64,
        ild_mae,
        ild_ci,
        ipd_mae,
        ipd_ci,
        ild_ci_mean,
        ipd_ci_mean,
        n_samples: preds.len(),
        meta: EvalMeta::default(),
    })
}

/// Predicts every pose and scores against `targets`.
pub fn evaluate(model: &dyn Regressor, poses: &[Pose], targets: &[FeatureVector]) -> Result<EvalReport> {
    let preds = model.predict_many(poses)?;
    let mut report = mae_per_freq(&preds, targets)?;
    report.meta.regressor = Some(model.kind().name().to_string());
    Ok(report)
}

/// Frequency above which the pair's phase difference becomes ambiguous.
pub fn aliasing_frequency(mic_spacing: f64, c: f64) -> Result<f64> {
    if !(mic_spacing.is_finite() && mic_spacing > 0.0) {
        return Err(Error::DegenerateGeometry(format!(
            "microphone spacing must be positive, got {mic_spacing}"
        )));
    }
    Ok(c / (2.0 * mic_spacing))
}

/// Scores `repeats` noise-excited measurements of one pose against its
/// analytic AIR-ratio features. Repeat `r` uses seed `seed ^ r`.
pub fn measurement_error_experiment(pipeline: &Pipeline, pose: &Pose, repeats: usize, seed: u64) -> Result<EvalReport> {
    if repeats < 2 {
        return Err(Error::InsufficientSamples(format!("repeats must be >= 2, got {repeats}")));
    }
    let (h1, h2) = pipeline.airs(pose)?;
    let reference = pipeline
        .with_mode(MeasurementMode::Analytic)?
        .measure_airs(pose, &h1, &h2, seed)?;
    let measured: Vec<FeatureVector> = (0..repeats as u64)
        .into_par_iter()
        .map(|r| pipeline.measure_airs(pose, &h1, &h2, seed ^ r))
        .collect::<Result<_>>()?;
    let mut report = mae_per_freq(&measured, &vec![reference; repeats])?;
    report.meta.repeats = Some(repeats);
    if let MeasurementMode::NoiseExcited { duration, snr_db } = pipeline.mode {
        report.meta.duration = Some(duration);
        report.meta.snr_db = snr_db;
    }
    Ok(report)
}

/// The single header line is a comment: `# <columns> aliasing_hz=<f_a>`.
const CURVE_COLUMNS: &str = "freq_bin,freq_hz,ild_mae,ild_ci,ipd_mae,ipd_ci";

#[derive(Debug, Clone, PartialEq)]
pub struct FreqErrorCurve {
    pub freqs: Vec<f64>,
    pub ild_mae: Vec<f64>,
    pub ild_ci: Vec<f64>,
    pub ipd_mae: Vec<f64>,
    pub ipd_ci: Vec<f64>,
    pub aliasing_hz: f64,
}

impl FreqErrorCurve {
    pub fn new(report: &EvalReport, sample_rate: f64, aliasing_hz: f64) -> Result<Self> {
        if report.ild_mae.len() != N_BINS {
            return Err(Error::Shape(format!(
                "curve needs {N_BINS} bins, report has {}",
                report.ild_mae.len()
            )));
        }
        Ok(FreqErrorCurve {
            freqs: bin_frequencies(sample_rate),
            ild_mae: report.ild_mae.clone(),
            ild_ci: report.ild_ci.clone(),
            ipd_mae: report.ipd_mae.clone(),
            ipd_ci: report.ipd_ci.clone(),
            aliasing_hz,
        })
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("# {CURVE_COLUMNS} aliasing_hz={}\n", sig6(self.aliasing_hz));
        for k in 0..self.freqs.len() {
            let _ = writeln!(
                s,
                "{k},{},{},{},{},{}",
                sig6(self.freqs[k]),
                sig6(self.ild_mae[k]),
                sig6(self.ild_ci[k]),
                sig6(self.ipd_mae[k]),
                sig6(self.ipd_ci[k])
            );
        }
        s
    }

    pub fn parse_csv(text: &str) -> Result<Self> {
        let bad = |line: usize, msg: &str| Error::Data(format!("curve line {}: {msg}", line + 1));
        let mut lines = text.lines().enumerate();
        let (_, first) = lines.next().ok_or_else(|| bad(0, "empty file"))?;
        let aliasing_hz = first
            .strip_prefix("# ")
            .and_then(|h| h.strip_prefix(CURVE_COLUMNS))
            .and_then(|h| h.trim().strip_prefix("aliasing_hz="))
            .and_then(|v| v.trim().parse().ok())
            .ok_or_else(|| bad(0, "missing header comment"))?;
        let mut curve = FreqErrorCurve {
            freqs: vec![],
            ild_mae: vec![],
            ild_ci: vec![],
            ipd_mae: vec![],
            ipd_ci: vec![],
            aliasing_hz,
        };
        for (i, line) in lines {
            let v: Vec<f64> = line
                .split(',')
                .map(|f| f.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| bad(i, &e.to_string()))?;
            if v.len() != 6 {
                return Err(bad(i, "expected 6 columns"));
            }
            curve.freqs.push(v[1]);
            curve.ild_mae.push(v[2]);
            curve.ild_ci.push(v[3]);
            curve.ipd_mae.push(v[4]);
            curve.ipd_ci.push(v[5]);
        }
        Ok(curve)
    }
}

pub fn export_curve(curve: &FreqErrorCurve, path: &Path) -> Result<()> {
    write_atomic(path, curve.to_csv().as_bytes())
}

/// Renders `v` with six significant digits.
pub fn sig6(v: f64) -> String {
    if v == 0.0 || !v.is_finite() {
        return format!("{v}");
    }
    let exp = v.abs().log10().floor() as i32;
    if (-5..6).contains(&exp) {
        let s = format!("{:.*}", (5 - exp).max(0) as usize, v);
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s
        }
    } else {
        format!("{v:.5e}")
    }
}
