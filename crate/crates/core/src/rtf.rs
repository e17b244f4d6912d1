//! Relative transfer functions and their ILD/IPD feature representation.
//!
//! Transfer functions use the `exp(+j 2 pi f t)` convention of the
//! free-field Green's function `exp(j 2 pi f d / c) / (4 pi d)`, so a
//! channel delayed by `n` samples relative to the reference has phase
//! `+2 pi k n / 1024`. Measured RTFs are the conjugate of the ratio of
//! standard (`exp(-j ...)`) DFTs, which keeps them directly comparable
//! with [`free_field_rtf`].

use std::f64::consts::PI;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::room_sim::{distance, AirSignal, MicArray, Pose};
use crate::signal::{real_dft, StftFrames};
use crate::{Error, Result, FEATURE_DIM, FFT_SIZE, N_BINS};

/// Relative magnitude floor applied wherever a division or a log could blow up.
pub const MAGNITUDE_FLOOR: f64 = 1e-12;

/// Tolerance on `sin^2 + cos^2 = 1` for renormalized IPD blocks.
pub const UNIT_NORM_TOL: f64 = 1e-6;

/// A value together with the number of bins that hit a floor or fallback.
#[derive(Debug, Clone, PartialEq)]
pub struct Flagged<T> {
    pub value: T,
    pub flagged: usize,
}

/// Complex RTF `H2(f) / H1(f)` over the 513-bin grid.
#[derive(Debug, Clone, PartialEq)]
pub struct RtfVector {
    pub bins: Vec<Complex64>,
}

impl RtfVector {
    pub fn new(bins: Vec<Complex64>) -> Result<Self> {
        if bins.len() != N_BINS {
            return Err(Error::Size(format!(
                "RTF must have {N_BINS} bins, got {}",
                bins.len()
            )));
        }
        if bins.iter().any(|c| !(c.re.is_finite() && c.im.is_finite())) {
            return Err(Error::Numeric("RTF contains non-finite values".into()));
        }
        Ok(RtfVector { bins })
    }

    pub fn ones() -> Self {
        RtfVector {
            bins: vec![Complex64::new(1.0, 0.0); N_BINS],
        }
    }
}

/// Target layout of a feature vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetLayout {
    /// `[ild | sin ipd | cos ipd]`
    IldIpd,
    /// `[re | im]` of the RTF, carried for completeness.
    ReIm,
}

/// ILD (dB) and IPD as a (sin, cos) pair per bin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub ild: Vec<f64>,
    pub ipd_sin: Vec<f64>,
    pub ipd_cos: Vec<f64>,
}

impl FeatureVector {
    /// Concatenated `[ild | sin | cos]` layout.
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(3 * self.ild.len());
        v.extend_from_slice(&self.ild);
        v.extend_from_slice(&self.ipd_sin);
        v.extend_from_slice(&self.ipd_cos);
        v
    }

    pub fn from_slice(v: &[f64]) -> Result<Self> {
        if v.len() != FEATURE_DIM {
            return Err(Error::Shape(format!(
                "feature vector must have {FEATURE_DIM} entries, got {}",
                v.len()
            )));
        }
        Ok(FeatureVector {
            ild: v[..N_BINS].to_vec(),
            ipd_sin: v[N_BINS..2 * N_BINS].to_vec(),
            ipd_cos: v[2 * N_BINS..].to_vec(),
        })
    }

    pub fn n_bins(&self) -> usize {
        self.ild.len()
    }

    /// Per-bin phase `atan2(sin, cos)`.
    pub fn phases(&self) -> Vec<f64> {
        self.ipd_sin
            .iter()
            .zip(&self.ipd_cos)
            .map(|(s, c)| s.atan2(*c))
            .collect()
    }

    /// Largest deviation of `sin^2 + cos^2` from one.
    pub fn unit_norm_deviation(&self) -> f64 {
        self.ipd_sin
            .iter()
            .zip(&self.ipd_cos)
            .map(|(s, c)| (s * s + c * c - 1.0).abs())
            .fold(0.0, f64::max)
    }

    pub fn is_unit_norm(&self) -> bool {
        self.unit_norm_deviation() <= UNIT_NORM_TOL
    }

    /// Rebuilds `10^(ild/20) (cos + j sin)`.
    pub fn to_rtf(&self) -> RtfVector {
        RtfVector {
            bins: self
                .ild
                .iter()
                .zip(&self.ipd_sin)
                .zip(&self.ipd_cos)
                .map(|((l, s), c)| Complex64::new(*c, *s) * 10f64.powf(l / 20.0))
                .collect(),
        }
    }
}

/// Wraps an angle into `(-pi, pi]`.
pub fn wrap_phase(x: f64) -> f64 {
    let w = x.rem_euclid(2.0 * PI);
    if w > PI {
        w - 2.0 * PI
    } else {
        w
    }
}

fn floor_reference(reference: &mut [Complex64]) -> Result<usize> {
    let peak = reference.iter().map(|c| c.norm()).fold(0.0, f64::max);
    if !(peak > 0.0) {
        return Err(Error::DegenerateReference);
    }
    let floor = MAGNITUDE_FLOOR * peak;
    let mut flagged = 0;
    for c in reference.iter_mut() {
        let mag = c.norm();
        if mag < floor {
            *c = if mag > 0.0 {
                *c * (floor / mag)
            } else {
                Complex64::new(floor, 0.0)
            };
            flagged += 1;
        }
    }
    Ok(flagged)
}

/// Spectrum of a response sampled on the 1024-point bin grid. Responses
/// longer than 1024 samples are transformed at the next power of two and
/// decimated so the reverberant tail is not wrapped.
pub fn air_spectrum(samples: &[f64], len: usize) -> Vec<Complex64> {
    let n = len.max(FFT_SIZE).next_power_of_two();
    let stride = n / FFT_SIZE;
    let full = real_dft(samples, n);
    (0..N_BINS).map(|k| full[k * stride]).collect()
}

/// `H2(f) / H1(f)` from two impulse responses.
pub fn rtf_from_airs(h1: &AirSignal, h2: &AirSignal) -> Result<Flagged<RtfVector>> {
    if h1.sample_rate != h2.sample_rate {
        return Err(Error::RateMismatch(h1.sample_rate, h2.sample_rate));
    }
    if h1.samples.iter().all(|x| *x == 0.0) {
        return Err(Error::DegenerateReference);
    }
    let len = h1.len().max(h2.len());
    let mut r = air_spectrum(&h1.samples, len);
    let s = air_spectrum(&h2.samples, len);
    let flagged = floor_reference(&mut r)?;
    let bins = s.iter().zip(&r).map(|(a, b)| (a / b).conj()).collect();
    Ok(Flagged {
        value: RtfVector::new(bins)?,
        flagged,
    })
}

/// Cross-spectral estimate `sum A2 conj(A1) / sum |A1|^2` over frames,
/// expressed in the `+j` convention.
pub fn rtf_from_signals(a1: &StftFrames, a2: &StftFrames) -> Result<Flagged<RtfVector>> {
    if a1.frames.is_empty() || a2.frames.is_empty() {
        return Err(Error::Size("no STFT frames".into()));
    }
    if a1.frames.len() != a2.frames.len() {
        return Err(Error::Size(format!(
            "frame counts differ: {} vs {}",
            a1.frames.len(),
            a2.frames.len()
        )));
    }
    if a1.frames.len() < 4 {
        return Err(Error::Size(format!(
            "cross-spectral estimate needs at least 4 frames, got {}",
            a1.frames.len()
        )));
    }
    let mut cross = vec![Complex64::new(0.0, 0.0); N_BINS];
    let mut auto = vec![0.0; N_BINS];
    for (f1, f2) in a1.frames.iter().zip(&a2.frames) {
        if f1.bins.len() != N_BINS || f2.bins.len() != N_BINS {
            return Err(Error::Size("frame size is not 513 bins".into()));
        }
        for k in 0..N_BINS {
            // conj(A2 conj(A1)) in the +j convention
            cross[k] += f2.bins[k].conj() * f1.bins[k];
            auto[k] += f1.bins[k].norm_sqr();
        }
    }
    // Floor on the reference magnitude sqrt(sum |A1|^2), as for AIRs.
    let peak = auto.iter().cloned().fold(0.0, f64::max).sqrt();
    if !(peak > 0.0) {
        return Err(Error::DegenerateReference);
    }
    let floor = MAGNITUDE_FLOOR * peak;
    let mut flagged = 0;
    let bins = cross
        .iter()
        .zip(&auto)
        .map(|(c, a)| {
            let mag = a.sqrt();
            if mag < floor {
                flagged += 1;
                // keep the cross-spectrum phase, use the floored magnitude
                let scale = if mag > 0.0 { 1.0 / (floor * mag) } else { 1.0 / (floor * floor) };
                c * scale
            } else {
                c / a
            }
        })
        .collect();
    Ok(Flagged {
        value: RtfVector::new(bins)?,
        flagged,
    })
}

/// Bin frequencies `k * fs / 1024` in Hz.
pub fn bin_frequencies(sample_rate: f64) -> Vec<f64> {
    (0..N_BINS)
        .map(|k| k as f64 * sample_rate / FFT_SIZE as f64)
        .collect()
}

/// Ratio of the direct-path Green's functions:
/// `(d1 / d2) exp(j 2 pi f (d2 - d1) / c)`.
pub fn free_field_rtf(source: &Pose, mics: &MicArray, c: f64, sample_rate: f64) -> Result<RtfVector> {
    let d1 = distance(&source.position, &mics.mics[0].position);
    let d2 = distance(&source.position, &mics.mics[1].position);
    if !(d1 > 0.0 && d2 > 0.0) {
        return Err(Error::DegenerateGeometry(
            "source coincides with a microphone".into(),
        ));
    }
    let ratio = d1 / d2;
    let bins = bin_frequencies(sample_rate)
        .into_iter()
        .map(|f| Complex64::from_polar(ratio, 2.0 * PI * f * (d2 - d1) / c))
        .collect();
    Ok(RtfVector { bins })
}

/// ILD in dB and the IPD as (sin, cos).
pub fn features_from_rtf(h: &RtfVector) -> Flagged<FeatureVector> {
    let n = h.bins.len();
    let mut fv = FeatureVector {
        ild: Vec::with_capacity(n),
        ipd_sin: Vec::with_capacity(n),
        ipd_cos: Vec::with_capacity(n),
    };
    let mut flagged = 0;
    for c in &h.bins {
        let mut mag = c.norm();
        if mag < MAGNITUDE_FLOOR {
            mag = MAGNITUDE_FLOOR;
            flagged += 1;
        }
        let (s, co) = c.arg().sin_cos();
        fv.ild.push(20.0 * mag.log10());
        fv.ipd_sin.push(s);
        fv.ipd_cos.push(co);
    }
    Flagged { value: fv, flagged }
}

/// Real/imaginary target layout `[re | im]`.
pub fn re_im_from_rtf(h: &RtfVector) -> Vec<f64> {
    h.bins
        .iter()
        .map(|c| c.re)
        .chain(h.bins.iter().map(|c| c.im))
        .collect()
}

/// `H(f) / H_d(f)`.
pub fn normalize_by_direct(h: &RtfVector, direct: &RtfVector) -> Result<RtfVector> {
    if h.bins.len() != direct.bins.len() {
        return Err(Error::Size("RTF lengths differ".into()));
    }
    if let Some(k) = direct.bins.iter().position(|c| c.norm() == 0.0) {
        return Err(Error::DegenerateNormalizer(k));
    }
    Ok(RtfVector {
        bins: h.bins.iter().zip(&direct.bins).map(|(a, b)| a / b).collect(),
    })
}

/// Inverse of [`normalize_by_direct`].
pub fn denormalize_by_direct(h: &RtfVector, direct: &RtfVector) -> Result<RtfVector> {
    if h.bins.len() != direct.bins.len() {
        return Err(Error::Size("RTF lengths differ".into()));
    }
    Ok(RtfVector {
        bins: h.bins.iter().zip(&direct.bins).map(|(a, b)| a * b).collect(),
    })
}

/// Applies the direct-path normalization in the feature domain: the ILD
/// shifts by the direct ILD and the phase rotates by the direct phase.
pub fn denormalize_features(v: &FeatureVector, direct: &FeatureVector) -> FeatureVector {
    let mut out = v.clone();
    for k in 0..v.n_bins() {
        out.ild[k] = v.ild[k] + direct.ild[k];
        let (s, c) = (v.ipd_sin[k], v.ipd_cos[k]);
        let (ds, dc) = (direct.ipd_sin[k], direct.ipd_cos[k]);
        out.ipd_sin[k] = s * dc + c * ds;
        out.ipd_cos[k] = c * dc - s * ds;
    }
    out
}

/// Scales each (sin, cos) pair to unit length; pairs with norm below
/// 1e-12 become (0, 1) and are flagged.
pub fn ipd_renormalize(v: &FeatureVector) -> Flagged<FeatureVector> {
    let mut out = v.clone();
    let flagged = renormalize_pairs(&mut out.ipd_sin, &mut out.ipd_cos);
    Flagged {
        value: out,
        flagged,
    }
}

pub(crate) fn renormalize_pairs(sin: &mut [f64], cos: &mut [f64]) -> usize {
    let mut flagged = 0;
    for (s, c) in sin.iter_mut().zip(cos.iter_mut()) {
        let r = (*s * *s + *c * *c).sqrt();
        if r < MAGNITUDE_FLOOR {
            *s = 0.0;
            *c = 1.0;
            flagged += 1;
        } else {
            *s /= r;
            *c /= r;
        }
    }
    flagged
}

/// Wrapped angular distance per bin, in radians.
pub fn ipd_error(pred: &FeatureVector, target: &FeatureVector) -> Result<Vec<f64>> {
    if pred.n_bins() != target.n_bins() {
        return Err(Error::Shape("feature vectors differ in bin count".into()));
    }
    for (name, v) in [("prediction", pred), ("target", target)] {
        let dev = v.unit_norm_deviation();
        if dev > UNIT_NORM_TOL {
            return Err(Error::Contract(format!(
                "{name} IPD block is not unit-norm (deviation {dev:.3e})"
            )));
        }
    }
    Ok(pred
        .phases()
        .iter()
        .zip(target.phases())
        .map(|(p, t)| wrap_phase(p - t).abs())
        .collect())
}
