//! FFT, STFT, convolution and seeded noise generation.

use std::cell::RefCell;
use std::f64::consts::PI;
use std::sync::Arc;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::{Fft, FftPlanner};

use crate::room_sim::AirSignal;
use crate::{Error, Result, FFT_SIZE, N_BINS};

/// Default STFT hop (50% overlap of a 1024-sample Hann window).
pub const DEFAULT_HOP: usize = 512;

/// Below this output size convolution is done by direct summation.
const DIRECT_CONV_LIMIT: usize = 4096;

#[derive(Debug, Clone, PartialEq)]
pub struct TimeSeries {
    pub samples: Vec<f64>,
    pub sample_rate: f64,
}

impl TimeSeries {
    pub fn new(samples: Vec<f64>, sample_rate: f64) -> Self {
        TimeSeries {
            samples,
            sample_rate,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Mean-square power.
    pub fn power(&self) -> f64 {
        mean_square(&self.samples)
    }
}

/// One-sided spectrum of a real [`FFT_SIZE`]-point frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum {
    pub bins: Vec<Complex64>,
    pub sample_rate: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StftFrames {
    pub frames: Vec<Spectrum>,
    pub window: String,
    pub window_len: usize,
    pub hop: usize,
}

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

fn forward_plan(n: usize) -> Arc<dyn Fft<f64>> {
    PLANNER.with(|p| p.borrow_mut().plan_fft_forward(n))
}

fn inverse_plan(n: usize) -> Arc<dyn Fft<f64>> {
    PLANNER.with(|p| p.borrow_mut().plan_fft_inverse(n))
}

fn mean_square(x: &[f64]) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64
}

/// Full complex DFT of a zero-padded real sequence of length `n`.
pub fn real_dft(x: &[f64], n: usize) -> Vec<Complex64> {
    let mut buf: Vec<Complex64> = x
        .iter()
        .take(n)
        .map(|&v| Complex64::new(v, 0.0))
        .collect();
    buf.resize(n, Complex64::new(0.0, 0.0));
    forward_plan(n).process(&mut buf);
    buf
}

/// 513-bin one-sided spectrum of exactly 1024 samples.
pub fn fft(x: &[f64], sample_rate: f64) -> Result<Spectrum> {
    if x.len() != FFT_SIZE {
        return Err(Error::Size(format!(
            "fft expects {FFT_SIZE} samples, got {}",
            x.len()
        )));
    }
    let mut bins = real_dft(x, FFT_SIZE);
    bins.truncate(N_BINS);
    Ok(Spectrum { bins, sample_rate })
}

/// Inverse of [`fft`], using Hermitian symmetry to rebuild the full spectrum.
pub fn ifft(spectrum: &Spectrum) -> Result<Vec<f64>> {
    if spectrum.bins.len() != N_BINS {
        return Err(Error::Size(format!(
            "ifft expects {N_BINS} bins, got {}",
            spectrum.bins.len()
        )));
    }
    let mut full = Vec::with_capacity(FFT_SIZE);
    full.extend_from_slice(&spectrum.bins);
    full.extend(spectrum.bins[1..N_BINS - 1].iter().rev().map(|c| c.conj()));
    inverse_plan(FFT_SIZE).process(&mut full);
    Ok(full.iter().map(|c| c.re / FFT_SIZE as f64).collect())
}

/// Periodic Hann window.
pub fn hann(len: usize) -> Vec<f64> {
    (0..len)
        .map(|n| 0.5 - 0.5 * (2.0 * PI * n as f64 / len as f64).cos())
        .collect()
}

pub fn frame_count(len: usize, win: usize, hop: usize) -> usize {
    if len < win {
        0
    } else {
        (len - win) / hop + 1
    }
}

/// Hann-windowed, hop-advanced framewise [`fft`].
pub fn stft(x: &TimeSeries, win: usize, hop: usize) -> Result<StftFrames> {
    if win != FFT_SIZE {
        return Err(Error::Size(format!(
            "stft window must be {FFT_SIZE}, got {win}"
        )));
    }
    if hop == 0 {
        return Err(Error::Size("stft hop must be positive".into()));
    }
    if x.len() < win {
        return Err(Error::Size(format!(
            "signal of {} samples is shorter than one {win}-sample window",
            x.len()
        )));
    }
    let window = hann(win);
    let mut frame = vec![0.0; win];
    let frames = (0..frame_count(x.len(), win, hop))
        .map(|l| {
            let start = l * hop;
            for ((dst, src), w) in frame.iter_mut().zip(&x.samples[start..start + win]).zip(&window) {
                *dst = src * w;
            }
            fft(&frame, x.sample_rate)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(StftFrames {
        frames,
        window: "hann".into(),
        window_len: win,
        hop,
    })
}

fn convolve_direct(x: &[f64], h: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; x.len() + h.len() - 1];
    for (i, xi) in x.iter().enumerate() {
        if *xi == 0.0 {
            continue;
        }
        for (j, hj) in h.iter().enumerate() {
            out[i + j] += xi * hj;
        }
    }
    out
}

fn convolve_fft(x: &[f64], h: &[f64]) -> Vec<f64> {
    let out_len = x.len() + h.len() - 1;
    let n = out_len.next_power_of_two();
    let mut a = real_dft(x, n);
    let b = real_dft(h, n);
    for (u, v) in a.iter_mut().zip(&b) {
        *u *= v;
    }
    inverse_plan(n).process(&mut a);
    a.iter().take(out_len).map(|c| c.re / n as f64).collect()
}

/// Full linear convolution of two real sequences.
pub fn convolve_samples(x: &[f64], h: &[f64]) -> Result<Vec<f64>> {
    if x.is_empty() || h.is_empty() {
        return Err(Error::Size("cannot convolve an empty sequence".into()));
    }
    let out_len = x.len() + h.len() - 1;
    if out_len <= DIRECT_CONV_LIMIT || x.len().min(h.len()) <= 16 {
        Ok(convolve_direct(x, h))
    } else {
        Ok(convolve_fft(x, h))
    }
}

/// `x * h`, of length `len(x) + len(h) - 1`.
pub fn convolve(x: &TimeSeries, h: &AirSignal) -> Result<TimeSeries> {
    if x.sample_rate != h.sample_rate {
        return Err(Error::RateMismatch(x.sample_rate, h.sample_rate));
    }
    Ok(TimeSeries::new(
        convolve_samples(&x.samples, &h.samples)?,
        x.sample_rate,
    ))
}

/// Zero-mean unit-variance Gaussian noise: ChaCha8 uniforms through Box-Muller.
pub fn white_noise(seed: u64, n: usize, sample_rate: f64) -> Result<TimeSeries> {
    if n == 0 {
        return Err(Error::Size("white noise length must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::with_capacity(n + 1);
    while samples.len() < n {
        // u1 in (0, 1] keeps the logarithm finite.
        let u1 = 1.0 - rng.gen::<f64>();
        let u2 = rng.gen::<f64>();
        let r = (-2.0 * u1.ln()).sqrt();
        let (s, c) = (2.0 * PI * u2).sin_cos();
        samples.push(r * c);
        samples.push(r * s);
    }
    samples.truncate(n);
    Ok(TimeSeries::new(samples, sample_rate))
}

/// Gain applied to noise so the mix reaches `snr_db`.
pub fn snr_gain(signal_power: f64, noise_power: f64, snr_db: f64) -> f64 {
    (signal_power / (noise_power * 10f64.powf(snr_db / 10.0))).sqrt()
}

/// `x + gamma * noise` with `gamma` chosen so the mean-square SNR equals `snr_db`.
pub fn add_noise_at_snr(x: &TimeSeries, noise: &TimeSeries, snr_db: f64) -> Result<TimeSeries> {
    if x.sample_rate != noise.sample_rate {
        return Err(Error::RateMismatch(x.sample_rate, noise.sample_rate));
    }
    if x.len() != noise.len() {
        return Err(Error::Size(format!(
            "signal has {} samples but noise has {}",
            x.len(),
            noise.len()
        )));
    }
    let px = x.power();
    let pn = noise.power();
    if !(px > 0.0) {
        return Err(Error::DegeneratePower("signal has zero power".into()));
    }
    if !(pn > 0.0) {
        return Err(Error::DegeneratePower("noise has zero power".into()));
    }
    let gamma = snr_gain(px, pn, snr_db);
    Ok(TimeSeries::new(
        x.samples
            .iter()
            .zip(&noise.samples)
            .map(|(s, v)| s + gamma * v)
            .collect(),
        x.sample_rate,
    ))
}
