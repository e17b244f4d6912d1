//! Pose lattices, dataset generation, splits, decimation and the RTFD file.
//!
//! RTFD layout: magic `RTFD`, version (u32 LE), header length (u64 LE),
//! UTF-8 JSON header, then poses (`n x 3`) and targets (`n x 1539`) as
//! little-endian f32, row-major.

use std::fs;
use std::path::Path;

use ndarray::{Array2, ArrayView1, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::persist::{write_atomic, ByteReader, ByteWriter};
use crate::room_sim::{simulate_air, AirSignal, MicArray, Pose, RoomSpec, Vec3};
use crate::rtf::{
    denormalize_features, features_from_rtf, free_field_rtf, rtf_from_airs, rtf_from_signals, FeatureVector,
    UNIT_NORM_TOL,
};
use crate::signal::{add_noise_at_snr, convolve, stft, white_noise, DEFAULT_HOP};
use crate::{Error, Result, FEATURE_DIM, FFT_SIZE, N_BINS};

pub const DATASET_MAGIC: [u8; 4] = *b"RTFD";
pub const DATASET_VERSION: u32 = 1;
pub const POSE_DIM: usize = 3;

/// Minimum distance between any lattice point and a wall.
pub const WALL_CLEARANCE: f64 = 0.1;

/// Uniform lattice `origin + (i, j, k) * spacing`, z fastest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingGrid {
    pub origin: Vec3,
    pub extent: Vec3,
    pub spacing: f64,
    pub counts: [usize; 3],
}

impl SamplingGrid {
    pub fn new(origin: Vec3, extent: Vec3, spacing: f64) -> Result<Self> {
        if !(spacing.is_finite() && spacing > 0.0) {
            return Err(Error::Bounds(format!("spacing must be positive, got {spacing}")));
        }
        if extent.iter().chain(&origin).any(|v| !v.is_finite()) || extent.iter().any(|e| *e < 0.0) {
            return Err(Error::Bounds(format!("invalid extent {extent:?} or origin {origin:?}")));
        }
        // The small slack keeps e.g. 0.3 / 0.05 from rounding down to 5.
        let counts = extent.map(|e| (e / spacing + 1e-9).floor() as usize + 1);
        Ok(SamplingGrid {
            origin,
            extent,
            spacing,
            counts,
        })
    }

    pub fn len(&self) -> usize {
        self.counts.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn point(&self, idx: [usize; 3]) -> Vec3 {
        [0, 1, 2].map(|a| self.origin[a] + idx[a] as f64 * self.spacing)
    }

    /// Lattice indices in storage order.
    pub fn indices(&self) -> Vec<[u32; 3]> {
        let [nx, ny, nz] = self.counts;
        let mut out = Vec::with_capacity(self.len());
        for i in 0..nx {
            for j in 0..ny {
                for k in 0..nz {
                    out.push([i as u32, j as u32, k as u32]);
                }
            }
        }
        out
    }

    pub fn poses(&self) -> Vec<Pose> {
        self.indices()
            .iter()
            .map(|ix| Pose::at(self.point(ix.map(|v| v as usize))))
            .collect()
    }

    /// Far corner actually occupied by lattice points.
    pub fn last_point(&self) -> Vec3 {
        self.point(self.counts.map(|c| c - 1))
    }

    pub fn check_inside(&self, room: &RoomSpec) -> Result<()> {
        let lo = self.origin;
        let hi = self.last_point();
        for a in 0..3 {
            if lo[a] < WALL_CLEARANCE - 1e-12 || hi[a] > room.dims[a] - WALL_CLEARANCE + 1e-12 {
                return Err(Error::Bounds(format!(
                    "lattice spans {lo:?}..{hi:?}, room {:?} needs {WALL_CLEARANCE} m clearance",
                    room.dims
                )));
            }
        }
        Ok(())
    }
}

pub fn build_grid(room: &RoomSpec, origin: Vec3, extent: Vec3, spacing: f64) -> Result<SamplingGrid> {
    let grid = SamplingGrid::new(origin, extent, spacing)?;
    grid.check_inside(room)?;
    Ok(grid)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum MeasurementMode {
    /// Exact ratio of the simulated AIR spectra.
    Analytic,
    /// White-noise excitation, optional per-channel noise, STFT estimate.
    NoiseExcited { duration: f64, snr_db: Option<f64> },
}

impl MeasurementMode {
    pub fn validate(&self) -> Result<()> {
        if let MeasurementMode::NoiseExcited { duration, snr_db } = self {
            if !(duration.is_finite() && *duration > 0.0) {
                return Err(Error::Data(format!("excitation duration must be positive, got {duration}")));
            }
            if let Some(s) = snr_db {
                if !s.is_finite() {
                    return Err(Error::Data(format!("snr must be finite, got {s}")));
                }
            }
        }
        Ok(())
    }
}

/// Everything that determines a feature row apart from the pose and seed.
#[derive(Debug, Clone, PartialEq)]
pub struct Pipeline {
    pub room: RoomSpec,
    pub mics: MicArray,
    pub mode: MeasurementMode,
    pub air_length: usize,
    /// Divide each RTF by its free-field counterpart.
    pub direct_normalized: bool,
}

/// Response length covering the requested decay, at least one frame.
pub fn default_air_length(room: &RoomSpec) -> usize {
    ((room.rt60 * room.sample_rate).ceil() as usize).max(FFT_SIZE).next_power_of_two()
}

impl Pipeline {
    pub fn new(room: RoomSpec, mics: MicArray, mode: MeasurementMode) -> Result<Self> {
        room.validate()?;
        mode.validate()?;
        for m in &mics.mics {
            if !room.contains(&m.position) {
                return Err(Error::OutOfBounds {
                    what: "microphone",
                    position: m.position,
                });
            }
        }
        Ok(Pipeline {
            air_length: default_air_length(&room),
            room,
            mics,
            mode,
            direct_normalized: false,
        })
    }

    pub fn with_mode(&self, mode: MeasurementMode) -> Result<Self> {
        mode.validate()?;
        Ok(Pipeline { mode, ..self.clone() })
    }

    /// Feature vector for one source pose. `seed` drives the excitation
    /// and additive noise; analytic mode ignores it.
    pub fn measure(&self, source: &Pose, seed: u64) -> Result<FeatureVector> {
        let (h1, h2) = self.airs(source)?;
        self.measure_airs(source, &h1, &h2, seed)
    }

    /// Responses from `source` to both microphones.
    pub fn airs(&self, source: &Pose) -> Result<(AirSignal, AirSignal)> {
        let [m1, m2] = &self.mics.mics;
        Ok((
            simulate_air(&self.room, source, m1, self.air_length)?,
            simulate_air(&self.room, source, m2, self.air_length)?,
        ))
    }

    /// [`Pipeline::measure`] with precomputed responses.
    pub fn measure_airs(&self, source: &Pose, h1: &AirSignal, h2: &AirSignal, seed: u64) -> Result<FeatureVector> {
        let rtf = match self.mode {
            MeasurementMode::Analytic => rtf_from_airs(h1, h2)?.value,
            MeasurementMode::NoiseExcited { duration, snr_db } => {
                let fs = self.room.sample_rate;
                let n = (duration * fs).round() as usize;
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let excitation = white_noise(rng.next_u64(), n, fs)?;
                let mut y1 = convolve(&excitation, h1)?;
                let mut y2 = convolve(&excitation, h2)?;
                if let Some(snr) = snr_db {
                    let (s1, s2) = (rng.next_u64(), rng.next_u64());
                    y1 = add_noise_at_snr(&y1, &white_noise(s1, y1.len(), fs)?, snr)?;
                    y2 = add_noise_at_snr(&y2, &white_noise(s2, y2.len(), fs)?, snr)?;
                }
                let a1 = stft(&y1, FFT_SIZE, DEFAULT_HOP)?;
                let a2 = stft(&y2, FFT_SIZE, DEFAULT_HOP)?;
                rtf_from_signals(&a1, &a2)?.value
            }
        };
        let feats = features_from_rtf(&rtf).value;
        if self.direct_normalized {
            let direct = self.free_field(source)?;
            return Ok(denormalize_features(&feats, &invert_features(&direct)));
        }
        Ok(feats)
    }

    pub fn free_field(&self, source: &Pose) -> Result<FeatureVector> {
        let h = free_field_rtf(source, &self.mics, self.room.speed_of_sound, self.room.sample_rate)?;
        Ok(features_from_rtf(&h).value)
    }

    /// Rows for `poses` in parallel, seeding pose `i` with `seed ^ i`.
    pub fn measure_all(&self, poses: &[Pose], seed: u64) -> Result<Array2<f64>> {
        for (i, p) in poses.iter().enumerate() {
            if !self.room.contains(&p.position) {
                return Err(Error::at_pose(
                    i,
                    Error::OutOfBounds {
                        what: "source",
                        position: p.position,
                    },
                ));
            }
        }
        let rows: Vec<Vec<f64>> = poses
            .par_iter()
            .enumerate()
            .map(|(i, p)| {
                self.measure(p, seed ^ i as u64)
                    .map(|f| f.to_vec())
                    .map_err(|e| Error::at_pose(i, e))
            })
            .collect::<Result<_>>()?;
        let mut out = Array2::zeros((poses.len(), FEATURE_DIM));
        for (mut dst, src) in out.axis_iter_mut(Axis(0)).zip(&rows) {
            dst.assign(&ArrayView1::from(src.as_slice()));
        }
        Ok(out)
    }
}

/// Feature vector of `1 / H`: negated ILD, conjugated phase.
pub fn invert_features(v: &FeatureVector) -> FeatureVector {
    FeatureVector {
        ild: v.ild.iter().map(|x| -x).collect(),
        ipd_sin: v.ipd_sin.iter().map(|x| -x).collect(),
        ipd_cos: v.ipd_cos.clone(),
    }
}

/// Lattice placement of every row, when the rows come from a grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatticeMeta {
    pub origin: Vec3,
    pub spacing: f64,
    pub counts: [usize; 3],
    pub indices: Vec<[u32; 3]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetHeader {
    pub sample_rate: f64,
    pub fft_size: usize,
    pub n_bins: usize,
    pub layout: String,
    pub room: RoomSpec,
    pub mics: MicArray,
    pub mode: MeasurementMode,
    pub seed: u64,
    pub air_length: usize,
    pub direct_normalized: bool,
    pub n_rows: usize,
    pub pose_dim: usize,
    pub target_dim: usize,
    #[serde(default)]
    pub subset: Option<String>,
    #[serde(default)]
    pub lattice: Option<LatticeMeta>,
}

pub const LAYOUT_ILD_IPD: &str = "ild_ipd";

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub header: DatasetHeader,
    /// `n x 3` source positions.
    pub poses: Array2<f32>,
    /// `n x 1539` targets `[ild | sin | cos]`.
    pub targets: Array2<f32>,
}

pub fn generate_dataset(pipeline: &Pipeline, grid: &SamplingGrid, seed: u64) -> Result<Dataset> {
    grid.check_inside(&pipeline.room)?;
    let poses = grid.poses();
    let mut data = generate_at(pipeline, &poses, seed)?;
    data.header.lattice = Some(LatticeMeta {
        origin: grid.origin,
        spacing: grid.spacing,
        counts: grid.counts,
        indices: grid.indices(),
    });
    Ok(data)
}

/// Dataset over arbitrary poses, without lattice metadata.
pub fn generate_at(pipeline: &Pipeline, poses: &[Pose], seed: u64) -> Result<Dataset> {
    let targets = pipeline.measure_all(poses, seed)?.mapv(|v| v as f32);
    let mut pose_rows = Array2::zeros((poses.len(), POSE_DIM));
    for (mut row, p) in pose_rows.axis_iter_mut(Axis(0)).zip(poses) {
        for a in 0..POSE_DIM {
            row[a] = p.position[a] as f32;
        }
    }
    let header = DatasetHeader {
        sample_rate: pipeline.room.sample_rate,
        fft_size: FFT_SIZE,
        n_bins: N_BINS,
        layout: LAYOUT_ILD_IPD.into(),
        room: pipeline.room.clone(),
        mics: pipeline.mics,
        mode: pipeline.mode,
        seed,
        air_length: pipeline.air_length,
        direct_normalized: pipeline.direct_normalized,
        n_rows: poses.len(),
        pose_dim: POSE_DIM,
        target_dim: FEATURE_DIM,
        subset: None,
        lattice: None,
    };
    Ok(Dataset {
        header,
        poses: pose_rows,
        targets,
    })
}

/// Seeded uniform positions inside the box `origin .. origin + extent`.
pub fn random_poses(origin: Vec3, extent: Vec3, n: usize, seed: u64) -> Vec<Pose> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| Pose::at([0, 1, 2].map(|a| origin[a] + rng.gen::<f64>() * extent[a])))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum SplitSpec {
    /// Even rows train; the rest alternate dev, test.
    Alternating,
    /// Seeded shuffle, then 50/25/25.
    Random { seed: u64 },
}

pub struct Split {
    pub train: Dataset,
    pub dev: Dataset,
    pub test: Dataset,
}

pub fn split_indices(n: usize, spec: SplitSpec) -> Result<[Vec<usize>; 3]> {
    if n < 4 {
        return Err(Error::Data(format!("split needs at least 4 rows, got {n}")));
    }
    match spec {
        SplitSpec::Alternating => {
            let train = (0..n).step_by(2).collect();
            let rest: Vec<usize> = (1..n).step_by(2).collect();
            let dev = rest.iter().step_by(2).copied().collect();
            let test = rest.iter().skip(1).step_by(2).copied().collect();
            Ok([train, dev, test])
        }
        SplitSpec::Random { seed } => {
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            let n_train = n / 2;
            let n_dev = n / 4;
            let mut train = order[..n_train].to_vec();
            let mut dev = order[n_train..n_train + n_dev].to_vec();
            let mut test = order[n_train + n_dev..].to_vec();
            train.sort_unstable();
            dev.sort_unstable();
            test.sort_unstable();
            Ok([train, dev, test])
        }
    }
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.poses.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn pose(&self, i: usize) -> Pose {
        let r = self.poses.row(i);
        Pose::at([r[0] as f64, r[1] as f64, r[2] as f64])
    }

    pub fn pose_list(&self) -> Vec<Pose> {
        (0..self.len()).map(|i| self.pose(i)).collect()
    }

    pub fn positions_f64(&self) -> Array2<f64> {
        self.poses.mapv(f64::from)
    }

    pub fn targets_f64(&self) -> Array2<f64> {
        self.targets.mapv(f64::from)
    }

    pub fn feature(&self, i: usize) -> FeatureVector {
        let row: Vec<f64> = self.targets.row(i).iter().map(|v| *v as f64).collect();
        FeatureVector::from_slice(&row).expect("row width checked on construction")
    }

    pub fn features(&self) -> Vec<FeatureVector> {
        (0..self.len()).map(|i| self.feature(i)).collect()
    }

    /// Rows `idx` in the given order, keeping lattice placement.
    pub fn select(&self, idx: &[usize], subset: Option<&str>) -> Dataset {
        let mut header = self.header.clone();
        header.n_rows = idx.len();
        if let Some(s) = subset {
            header.subset = Some(s.into());
        }
        if let Some(l) = &mut header.lattice {
            l.indices = idx.iter().map(|i| l.indices[*i]).collect();
        }
        Dataset {
            header,
            poses: self.poses.select(Axis(0), idx),
            targets: self.targets.select(Axis(0), idx),
        }
    }

    pub fn split(&self, spec: SplitSpec) -> Result<Split> {
        let [train, dev, test] = split_indices(self.len(), spec)?;
        Ok(Split {
            train: self.select(&train, Some("train")),
            dev: self.select(&dev, Some("dev")),
            test: self.select(&test, Some("test")),
        })
    }

    /// Keeps rows whose lattice indices are all multiples of `factor`,
    /// re-indexing them on the coarser lattice.
    pub fn decimate(&self, factor: usize) -> Result<Dataset> {
        if factor == 0 {
            return Err(Error::Contract("decimation factor must be >= 1".into()));
        }
        let lattice = self
            .header
            .lattice
            .as_ref()
            .ok_or_else(|| Error::Contract("decimation needs lattice metadata".into()))?;
        let f = factor as u32;
        let keep: Vec<usize> = lattice
            .indices
            .iter()
            .enumerate()
            .filter(|(_, ix)| ix.iter().all(|v| v % f == 0))
            .map(|(i, _)| i)
            .collect();
        let mut out = self.select(&keep, None);
        let l = out.header.lattice.as_mut().expect("kept above");
        l.spacing *= factor as f64;
        l.counts = l.counts.map(|c| (c - 1) / factor + 1);
        for ix in &mut l.indices {
            *ix = ix.map(|v| v / f);
        }
        Ok(out)
    }

    fn check_shapes(&self) -> Result<()> {
        let h = &self.header;
        if h.fft_size != FFT_SIZE || h.n_bins != N_BINS || h.target_dim != FEATURE_DIM || h.pose_dim != POSE_DIM {
            return Err(Error::Data(format!(
                "unsupported layout: fft_size {}, n_bins {}, pose_dim {}, target_dim {}",
                h.fft_size, h.n_bins, h.pose_dim, h.target_dim
            )));
        }
        if h.layout != LAYOUT_ILD_IPD {
            return Err(Error::Data(format!("unsupported target layout {:?}", h.layout)));
        }
        if self.poses.dim() != (h.n_rows, POSE_DIM) || self.targets.dim() != (h.n_rows, FEATURE_DIM) {
            return Err(Error::Shape("arrays disagree with the header row count".into()));
        }
        if let Some(l) = &h.lattice {
            if l.indices.len() != h.n_rows {
                return Err(Error::Shape("lattice index count disagrees with the row count".into()));
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.check_shapes()?;
        let json = serde_json::to_vec(&self.header)?;
        let mut w = ByteWriter::new();
        w.bytes(&DATASET_MAGIC);
        w.u32(DATASET_VERSION);
        w.u64(json.len() as u64);
        w.bytes(&json);
        w.f32s(self.poses.as_standard_layout().as_slice().expect("standard layout"));
        w.f32s(self.targets.as_standard_layout().as_slice().expect("standard layout"));
        Ok(w.into_inner())
    }

    pub fn from_bytes(data: &[u8]) -> Result<Dataset> {
        let mut r = ByteReader::new(data);
        let magic = r.take(4, "magic")?;
        if magic != DATASET_MAGIC {
            return Err(Error::format(
                0,
                format!("bad magic {:?}, expected \"RTFD\"", String::from_utf8_lossy(magic)),
            ));
        }
        let version = r.u32("version")?;
        if version != DATASET_VERSION {
            return Err(Error::format(
                4,
                format!("unsupported dataset version {version}, expected {DATASET_VERSION}"),
            ));
        }
        let header_len = r.u64("header length")?;
        let header_at = r.offset();
        let header_len = usize::try_from(header_len).map_err(|_| Error::format(header_at, "header length overflow"))?;
        let raw = r.take(header_len, "header")?;
        let header: DatasetHeader =
            serde_json::from_slice(raw).map_err(|e| Error::format(header_at, format!("bad header: {e}")))?;
        let body_at = r.offset();
        let n = header.n_rows;
        let pose_count = n
            .checked_mul(header.pose_dim)
            .ok_or_else(|| Error::format(body_at, "row count overflow"))?;
        let target_count = n
            .checked_mul(header.target_dim)
            .ok_or_else(|| Error::format(body_at, "row count overflow"))?;
        let poses = r.f32s(pose_count, "poses")?;
        let targets_at = r.offset();
        let targets = r.f32s(target_count, "targets")?;
        r.expect_end("targets")?;
        let data = Dataset {
            poses: Array2::from_shape_vec((n, header.pose_dim), poses)
                .map_err(|e| Error::format(body_at, e.to_string()))?,
            targets: Array2::from_shape_vec((n, header.target_dim), targets)
                .map_err(|e| Error::format(targets_at, e.to_string()))?,
            header,
        };
        data.check_shapes().map_err(|e| Error::format(header_at, e.to_string()))?;
        let row_bytes = (FEATURE_DIM * 4) as u64;
        for (i, row) in data.targets.axis_iter(Axis(0)).enumerate() {
            let dev = (0..N_BINS)
                .map(|k| {
                    let (s, c) = (row[N_BINS + k] as f64, row[2 * N_BINS + k] as f64);
                    (s * s + c * c - 1.0).abs()
                })
                .fold(0.0, f64::max);
            if !(dev <= UNIT_NORM_TOL) {
                return Err(Error::format(
                    targets_at + i as u64 * row_bytes,
                    format!("row {i}: IPD block deviates from unit norm by {dev:e}"),
                ));
            }
        }
        Ok(data)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Dataset> {
        Dataset::from_bytes(&fs::read(path)?)
    }

    /// Header summary without the per-row lattice indices.
    pub fn manifest(&self) -> serde_json::Value {
        let mut v = serde_json::to_value(&self.header).expect("header serializes");
        if let Some(l) = v.get_mut("lattice").and_then(|l| l.as_object_mut()) {
            l.remove("indices");
        }
        v
    }
}
