//! Shoebox-room impulse responses via the image-source method.
//!
//! Every image within `speed_of_sound * length / sample_rate` of the
//! microphone contributes `beta^reflections / (4 pi d)` at a fractional
//! delay rendered with a 64-tap Hann-windowed sinc kernel.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub type Vec3 = [f64; 3];

pub const DEFAULT_SPEED_OF_SOUND: f64 = 343.0;
pub const DEFAULT_SAMPLE_RATE: f64 = 16_000.0;

/// Half-width of the fractional-delay kernel in taps.
pub const KERNEL_HALF_WIDTH: usize = 32;

pub fn distance(a: &Vec3, b: &Vec3) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoomSpec {
    pub dims: Vec3,
    pub rt60: f64,
    pub reflection: f64,
    pub speed_of_sound: f64,
    pub sample_rate: f64,
}

impl RoomSpec {
    /// Room whose wall reflection coefficient is calibrated to `rt60`.
    pub fn from_rt60(dims: Vec3, rt60: f64) -> Result<Self> {
        let reflection = reflection_from_rt60(dims, rt60)?;
        let room = RoomSpec {
            dims,
            rt60,
            reflection,
            speed_of_sound: DEFAULT_SPEED_OF_SOUND,
            sample_rate: DEFAULT_SAMPLE_RATE,
        };
        room.validate()?;
        Ok(room)
    }

    pub fn anechoic(dims: Vec3) -> Result<Self> {
        Self::from_rt60(dims, 0.0)
    }

    pub fn with_sample_rate(mut self, sample_rate: f64) -> Result<Self> {
        self.sample_rate = sample_rate;
        self.validate()?;
        Ok(self)
    }

    pub fn with_speed_of_sound(mut self, c: f64) -> Result<Self> {
        self.speed_of_sound = c;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.iter().any(|d| !(d.is_finite() && *d > 0.0)) {
            return Err(Error::InvalidRoom(format!(
                "dimensions must be strictly positive, got {:?}",
                self.dims
            )));
        }
        if !(0.0..1.0).contains(&self.reflection) {
            return Err(Error::InvalidRoom(format!(
                "reflection coefficient {} outside [0, 1)",
                self.reflection
            )));
        }
        if !(self.sample_rate.is_finite() && self.sample_rate > 0.0) {
            return Err(Error::InvalidRoom(format!(
                "sample rate must be positive, got {}",
                self.sample_rate
            )));
        }
        if !(self.speed_of_sound.is_finite() && self.speed_of_sound > 0.0) {
            return Err(Error::InvalidRoom(format!(
                "speed of sound must be positive, got {}",
                self.speed_of_sound
            )));
        }
        Ok(())
    }

    pub fn contains(&self, p: &Vec3) -> bool {
        p.iter().zip(&self.dims).all(|(x, l)| *x > 0.0 && x < l)
    }

    pub fn volume(&self) -> f64 {
        self.dims.iter().product()
    }
}

/// Source or receiver pose. Orientation is carried but unused by the
/// omnidirectional simulator.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Pose {
    pub position: Vec3,
    #[serde(default)]
    pub azimuth: f64,
    #[serde(default)]
    pub elevation: f64,
    #[serde(default)]
    pub rotation: f64,
}

impl Pose {
    pub fn at(position: Vec3) -> Self {
        Pose {
            position,
            ..Pose::default()
        }
    }
}

/// Two-microphone receiver. Microphone 1 is the RTF reference channel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MicArray {
    pub mics: [Pose; 2],
}

impl MicArray {
    pub fn new(first: Pose, second: Pose) -> Result<Self> {
        let array = MicArray {
            mics: [first, second],
        };
        if !(array.spacing() > 0.0) {
            return Err(Error::DegenerateGeometry(
                "microphone positions coincide".into(),
            ));
        }
        Ok(array)
    }

    /// Pair centred on `center`, separated by `spacing` along x.
    pub fn pair_along_x(center: Vec3, spacing: f64) -> Result<Self> {
        let half = spacing / 2.0;
        Self::new(
            Pose::at([center[0] - half, center[1], center[2]]),
            Pose::at([center[0] + half, center[1], center[2]]),
        )
    }

    pub fn spacing(&self) -> f64 {
        distance(&self.mics[0].position, &self.mics[1].position)
    }

    pub fn reference(&self) -> &Pose {
        &self.mics[0]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AirSignal {
    pub samples: Vec<f64>,
    pub sample_rate: f64,
}

impl AirSignal {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn energy(&self) -> f64 {
        self.samples.iter().map(|x| x * x).sum()
    }
}

/// Sabine inversion: `alpha = 0.161 V / (S rt60)`, `beta = sqrt(max(0, 1 - alpha))`.
pub fn reflection_from_rt60(dims: Vec3, rt60: f64) -> Result<f64> {
    if dims.iter().any(|d| !(d.is_finite() && *d > 0.0)) {
        return Err(Error::InvalidRoom(format!(
            "dimensions must be strictly positive, got {dims:?}"
        )));
    }
    if !(rt60.is_finite() && rt60 >= 0.0) {
        return Err(Error::InvalidRoom(format!("rt60 must be >= 0, got {rt60}")));
    }
    if rt60 == 0.0 {
        return Ok(0.0);
    }
    let [lx, ly, lz] = dims;
    let volume = lx * ly * lz;
    let surface = 2.0 * (lx * ly + lx * lz + ly * lz);
    let alpha = 0.161 * volume / (surface * rt60);
    Ok((1.0 - alpha).max(0.0).sqrt())
}

/// Direct-path propagation time in seconds.
pub fn direct_delay(source: &Pose, mic: &Pose, c: f64) -> Result<f64> {
    let d = distance(&source.position, &mic.position);
    if !(d > 0.0) {
        return Err(Error::DegenerateGeometry(
            "source and microphone coincide".into(),
        ));
    }
    Ok(d / c)
}

/// Per-offset tables for the windowed-sinc kernel so each image costs one
/// `sin`/`cos` pair instead of one per tap.
struct KernelTables {
    sin_m: Vec<f64>,
    cos_m: Vec<f64>,
}

impl KernelTables {
    fn new() -> Self {
        let half = KERNEL_HALF_WIDTH as f64;
        let offsets = Self::offsets();
        KernelTables {
            sin_m: offsets.clone().map(|m| (PI * m as f64 / half).sin()).collect(),
            cos_m: offsets.map(|m| (PI * m as f64 / half).cos()).collect(),
        }
    }

    fn offsets() -> std::ops::RangeInclusive<i64> {
        -(KERNEL_HALF_WIDTH as i64 - 1)..=KERNEL_HALF_WIDTH as i64
    }

    /// Adds `amplitude * kernel(t - delay)` into `out` for the 64 taps around `delay`.
    fn render(&self, out: &mut [f64], delay: f64, amplitude: f64) {
        let base = delay.floor();
        let frac = delay - base;
        let base = base as i64;
        let half = KERNEL_HALF_WIDTH as f64;
        // sin(pi f) = sin(pi (1 - f)) keeps precision as f approaches 1
        let sin_frac = if frac > 0.5 {
            (PI * (1.0 - frac)).sin()
        } else {
            (PI * frac).sin()
        };
        let (sin_w, cos_w) = (PI * frac / half).sin_cos();
        for (idx, m) in Self::offsets().enumerate() {
            let t = base + m;
            if t < 0 {
                continue;
            }
            let Some(slot) = out.get_mut(t as usize) else {
                break;
            };
            let x = m as f64 - frac;
            // sin(pi (m - frac)) = -(-1)^m sin(pi frac)
            let sinc = if x == 0.0 {
                1.0
            } else {
                let sign = if m % 2 == 0 { -1.0 } else { 1.0 };
                sign * sin_frac / (PI * x)
            };
            // cos(pi (m - frac) / half) by the angle-difference identity
            let window =
                0.5 * (1.0 + self.cos_m[idx] * cos_w + self.sin_m[idx] * sin_w);
            *slot += amplitude * sinc * window;
        }
    }
}

fn check_inside(room: &RoomSpec, what: &'static str, p: &Vec3) -> Result<()> {
    if room.contains(p) {
        Ok(())
    } else {
        Err(Error::OutOfBounds { what, position: *p })
    }
}

/// Image-source impulse response of `length` samples from `source` to `mic`.
pub fn simulate_air(room: &RoomSpec, source: &Pose, mic: &Pose, length: usize) -> Result<AirSignal> {
    room.validate()?;
    check_inside(room, "source", &source.position)?;
    check_inside(room, "microphone", &mic.position)?;
    let c = room.speed_of_sound;
    let fs = room.sample_rate;
    let direct = direct_delay(source, mic, c)? * fs;
    if (length as f64) < direct.ceil() {
        return Err(Error::InsufficientLength {
            needed: direct.ceil() as usize,
            got: length,
        });
    }

    let radius = c * length as f64 / fs;
    let beta = room.reflection;
    let tables = KernelTables::new();
    let mut out = vec![0.0; length];
    let s = source.position;
    let r = mic.position;

    // Candidate image coordinates and reflection counts per axis:
    // x = (1 - 2q) s + 2 n L, with |n - q| + |n| reflections.
    let axis_images = |axis: usize| -> Vec<(f64, u32)> {
        let l = room.dims[axis];
        let n_max = (radius / (2.0 * l)).ceil() as i64 + 1;
        let mut images = Vec::new();
        for n in -n_max..=n_max {
            for q in 0..=1i64 {
                let pos = (1 - 2 * q) as f64 * s[axis] + 2.0 * n as f64 * l;
                if (pos - r[axis]).abs() <= radius {
                    let order = ((n - q).abs() + n.abs()) as u32;
                    images.push((pos - r[axis], order));
                }
            }
        }
        images
    };
    let xs = axis_images(0);
    let ys = axis_images(1);
    let zs = axis_images(2);
    let max_order = xs
        .iter()
        .chain(&ys)
        .chain(&zs)
        .map(|(_, o)| *o)
        .max()
        .unwrap_or(0) as usize
        * 3;
    let beta_pow: Vec<f64> = (0..=max_order as i32).map(|k| beta.powi(k)).collect();
    let radius_sq = radius * radius;

    for &(dx, ox) in &xs {
        for &(dy, oy) in &ys {
            let dxy = dx * dx + dy * dy;
            if dxy > radius_sq {
                continue;
            }
            for &(dz, oz) in &zs {
                let d_sq = dxy + dz * dz;
                if d_sq > radius_sq {
                    continue;
                }
                let order = (ox + oy + oz) as usize;
                let gain = beta_pow[order];
                if gain == 0.0 {
                    continue;
                }
                let d = d_sq.sqrt();
                tables.render(&mut out, d / c * fs, gain / (4.0 * PI * d));
            }
        }
    }

    Ok(AirSignal {
        samples: out,
        sample_rate: fs,
    })
}

/// Reverberation time from Schroeder backward integration: a line fitted to
/// the energy decay curve between -5 dB and -25 dB, extrapolated to -60 dB.
pub fn schroeder_rt60(air: &AirSignal) -> Option<f64> {
    let mut edc: Vec<f64> = air.samples.iter().rev().scan(0.0, |acc, x| {
        *acc += x * x;
        Some(*acc)
    }).collect();
    edc.reverse();
    let total = *edc.first()?;
    if total <= 0.0 {
        return None;
    }
    let (mut n, mut sx, mut sy, mut sxx, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for (i, e) in edc.iter().enumerate() {
        let db = 10.0 * (e / total).log10();
        if (-25.0..=-5.0).contains(&db) {
            let t = i as f64 / air.sample_rate;
            n += 1.0;
            sx += t;
            sy += db;
            sxx += t * t;
            sxy += t * db;
        }
    }
    if n < 2.0 {
        return None;
    }
    let slope = (n * sxy - sx * sy) / (n * sxx - sx * sx);
    (slope < 0.0).then(|| -60.0 / slope)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn sabine_inversion_matches_hand_value() {
        let beta = reflection_from_rt60([4.0, 6.0, 3.0], 0.3).unwrap();
        let alpha = 0.161 * 72.0 / (108.0 * 0.3);
        assert_relative_eq!(alpha, 0.357_777_777, epsilon = 1e-8);
        assert_relative_eq!(beta, (1.0f64 - alpha).sqrt(), epsilon = 1e-15);
        assert!((beta - 0.8013).abs() < 1e-4);
    }

    #[test]
    fn sabine_clamps_to_anechoic() {
        assert_eq!(reflection_from_rt60([4.0, 6.0, 3.0], 0.0).unwrap(), 0.0);
        assert_eq!(reflection_from_rt60([4.0, 6.0, 3.0], 1e-6).unwrap(), 0.0);
        assert_eq!(reflection_from_rt60([1.0, 1.0, 1.0], 0.161 / 6.0).unwrap(), 0.0);
    }

    #[test]
    fn sabine_rejects_bad_room() {
        assert!(matches!(
            reflection_from_rt60([0.0, 1.0, 1.0], 0.3),
            Err(Error::InvalidRoom(_))
        ));
    }

    #[test]
    fn direct_delay_examples() {
        let a = Pose::at([0.0, 0.0, 0.0]);
        assert_relative_eq!(
            direct_delay(&a, &Pose::at([3.0, 0.0, 0.0]), 343.0).unwrap(),
            8.746_355_685e-3,
            epsilon = 1e-12
        );
        assert_relative_eq!(
            direct_delay(&a, &Pose::at([0.0, 0.343, 0.0]), 343.0).unwrap(),
            1e-3,
            epsilon = 1e-15
        );
        assert!(matches!(
            direct_delay(&a, &a, 343.0),
            Err(Error::DegenerateGeometry(_))
        ));
    }

    #[test]
    fn direct_delay_is_reciprocal() {
        let a = Pose::at([1.0, 2.0, 0.5]);
        let b = Pose::at([3.2, 0.4, 1.9]);
        assert_eq!(
            direct_delay(&a, &b, 343.0).unwrap(),
            direct_delay(&b, &a, 343.0).unwrap()
        );
    }

    fn anechoic() -> RoomSpec {
        RoomSpec::anechoic([10.0, 10.0, 10.0]).unwrap()
    }

    #[test]
    fn anechoic_unit_distance_arrival() {
        let room = anechoic();
        let src = Pose::at([5.0, 5.0, 5.0]);
        let mic = Pose::at([6.0, 5.0, 5.0]);
        let air = simulate_air(&room, &src, &mic, 256).unwrap();
        // The windowed sinc sums to ~1, so the area equals the arrival gain.
        let area: f64 = air.samples.iter().sum();
        assert_relative_eq!(area, 1.0 / (4.0 * PI), max_relative = 1e-2);
        let centroid: f64 = air
            .samples
            .iter()
            .enumerate()
            .map(|(i, x)| i as f64 * x)
            .sum::<f64>()
            / area;
        assert!((centroid - 16000.0 / 343.0).abs() < 0.05, "{centroid}");
    }

    #[test]
    fn integer_delay_is_a_scaled_impulse() {
        let room = anechoic();
        let d = 343.0 / 16000.0 * 80.0;
        let src = Pose::at([2.0, 5.0, 5.0]);
        let mic = Pose::at([2.0 + d, 5.0, 5.0]);
        let air = simulate_air(&room, &src, &mic, 200).unwrap();
        let delay = distance(&src.position, &mic.position) / 343.0 * 16000.0;
        assert!((delay - 80.0).abs() < 1e-9);
        let gain = 1.0 / (4.0 * PI * d);
        assert_relative_eq!(air.samples[80], gain, max_relative = 1e-9);
        for (i, x) in air.samples.iter().enumerate() {
            if i != 80 {
                assert!(x.abs() < 1e-9 * gain, "sample {i} = {x}");
            }
        }
    }

    #[test]
    fn causal_before_direct_arrival() {
        let room = RoomSpec::from_rt60([4.0, 6.0, 3.0], 0.3).unwrap();
        let src = Pose::at([2.0, 3.5, 1.5]);
        let mic = Pose::at([1.0, 1.0, 1.4]);
        let air = simulate_air(&room, &src, &mic, 2048).unwrap();
        let delay = direct_delay(&src, &mic, 343.0).unwrap() * 16000.0;
        let first = (delay - KERNEL_HALF_WIDTH as f64).floor() as usize;
        assert!(air.samples[..first].iter().all(|x| *x == 0.0));
        assert!(air.samples[first..].iter().any(|x| *x != 0.0));
    }

    #[test]
    fn inverse_square_energy_law() {
        let room = RoomSpec::anechoic([20.0, 20.0, 20.0]).unwrap();
        let src = Pose::at([5.0, 10.0, 10.0]);
        let energies: Vec<f64> = [1.0, 2.0, 4.0]
            .iter()
            .map(|d| {
                let mic = Pose::at([5.0 + d, 10.0, 10.0]);
                simulate_air(&room, &src, &mic, 512).unwrap().energy()
            })
            .collect();
        let reference = energies[0] * (4.0 * PI).powi(2);
        for (e, d) in energies.iter().zip([1.0f64, 2.0, 4.0]) {
            let scaled = e * (4.0 * PI * d).powi(2);
            assert_relative_eq!(scaled, reference, max_relative = 1e-2);
        }
        assert!(energies[0] > energies[1] && energies[1] > energies[2]);
    }

    #[test]
    fn deterministic_output() {
        let room = RoomSpec::from_rt60([4.0, 6.0, 3.0], 0.2).unwrap();
        let src = Pose::at([2.0, 3.0, 1.2]);
        let mic = Pose::at([1.91, 1.0, 1.4]);
        let a = simulate_air(&room, &src, &mic, 1600).unwrap();
        let b = simulate_air(&room, &src, &mic, 1600).unwrap();
        assert_eq!(a.samples, b.samples);
    }

    #[test]
    fn rejects_bad_inputs() {
        let room = RoomSpec::from_rt60([4.0, 6.0, 3.0], 0.2).unwrap();
        let inside = Pose::at([2.0, 3.0, 1.0]);
        let outside = Pose::at([5.0, 3.0, 1.0]);
        assert!(matches!(
            simulate_air(&room, &outside, &inside, 1000),
            Err(Error::OutOfBounds { what: "source", .. })
        ));
        assert!(matches!(
            simulate_air(&room, &inside, &outside, 1000),
            Err(Error::OutOfBounds { what: "microphone", .. })
        ));
        let far = Pose::at([2.0, 5.5, 1.0]);
        assert!(matches!(
            simulate_air(&room, &inside, &far, 10),
            Err(Error::InsufficientLength { .. })
        ));
    }

    #[test]
    fn schroeder_recovers_requested_rt60() {
        let room = RoomSpec::from_rt60([4.0, 6.0, 3.0], 0.2).unwrap();
        let pairs = [
            ([2.5, 4.0, 1.6], [1.0, 1.2, 1.4]),
            ([1.5, 2.5, 1.0], [2.0, 1.0, 1.4]),
            ([1.0, 4.0, 2.0], [3.0, 2.0, 1.0]),
        ];
        for (s, m) in pairs {
            let air = simulate_air(&room, &Pose::at(s), &Pose::at(m), 6400).unwrap();
            let t = schroeder_rt60(&air).unwrap();
            assert!((t - 0.2).abs() <= 0.25 * 0.2, "measured rt60 {t}");
        }
    }
}
