//! Experiment configuration: one TOML file with nested blocks.

use std::fs;
use std::path::{Path, PathBuf};

use rtf_forge::dataset::{build_grid, MeasurementMode, Pipeline, SamplingGrid, SplitSpec};
use rtf_forge::nn::TrainConfig;
use rtf_forge::regressors::{AffineConfig, DnnConfig, InterpMode, ModelKind};
use rtf_forge::room_sim::{MicArray, Pose, RoomSpec, Vec3, DEFAULT_SAMPLE_RATE, DEFAULT_SPEED_OF_SOUND};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    pub room: RoomBlock,
    pub mics: MicsBlock,
    pub grid: GridBlock,
    #[serde(default)]
    pub measurement: MeasurementBlock,
    #[serde(default)]
    pub split: SplitBlock,
    #[serde(default)]
    pub model: ModelBlock,
    #[serde(default)]
    pub eval: EvalBlock,
    #[serde(default)]
    pub sweep: SweepBlock,
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("runs")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoomBlock {
    pub dims: Vec3,
    pub rt60: f64,
    #[serde(default = "default_fs")]
    pub sample_rate: f64,
    #[serde(default = "default_c")]
    pub c: f64,
}

fn default_fs() -> f64 {
    DEFAULT_SAMPLE_RATE
}

fn default_c() -> f64 {
    DEFAULT_SPEED_OF_SOUND
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MicsBlock {
    /// Reference microphone first.
    pub positions: [Vec3; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridBlock {
    pub origin: Vec3,
    pub extent: Vec3,
    pub spacing: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModeName {
    Analytic,
    NoiseExcited,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MeasurementBlock {
    pub mode: ModeName,
    /// Excitation length in seconds (noise-excited mode).
    pub duration: f64,
    /// Per-channel SNR in dB; absent means noiseless.
    pub snr: Option<f64>,
    pub seed: u64,
    pub direct_normalized: bool,
}

impl Default for MeasurementBlock {
    fn default() -> Self {
        MeasurementBlock {
            mode: ModeName::Analytic,
            duration: 1.0,
            snr: None,
            seed: 0,
            direct_normalized: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitBlock {
    pub rule: SplitRule,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitRule {
    Alternating,
    Random,
}

impl Default for SplitBlock {
    fn default() -> Self {
        SplitBlock {
            rule: SplitRule::Alternating,
            seed: 0,
        }
    }
}

impl SplitBlock {
    pub fn spec(&self) -> SplitSpec {
        match self.rule {
            SplitRule::Alternating => SplitSpec::Alternating,
            SplitRule::Random => SplitSpec::Random { seed: self.seed },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelBlock {
    pub kind: ModelKind,
    pub linear: InterpMode,
    pub affine: AffineConfig,
    pub dnn: DnnConfig,
}

impl Default for ModelBlock {
    fn default() -> Self {
        ModelBlock {
            kind: ModelKind::Dnn,
            linear: InterpMode::default(),
            affine: AffineConfig::default(),
            dnn: DnnConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalTarget {
    /// Seeded random poses with analytic targets.
    OffLattice,
    TestSplit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalBlock {
    pub n_eval_poses: usize,
    pub eval_seed: u64,
    pub target: EvalTarget,
    /// Box for the random poses; defaults to the grid box.
    pub origin: Option<Vec3>,
    pub extent: Option<Vec3>,
}

impl Default for EvalBlock {
    fn default() -> Self {
        EvalBlock {
            n_eval_poses: 1000,
            eval_seed: 1,
            target: EvalTarget::OffLattice,
            origin: None,
            extent: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepBlock {
    pub models: Vec<ModelKind>,
    pub factors: Vec<usize>,
    pub snrs: Vec<f64>,
    pub repeats: usize,
    /// Source for the repeated measurement; defaults to the grid centre.
    pub pose: Option<Vec3>,
}

impl Default for SweepBlock {
    fn default() -> Self {
        SweepBlock {
            models: vec![ModelKind::Linear, ModelKind::Dnn],
            factors: vec![1, 2, 4],
            snrs: vec![30.0, 20.0, 10.0],
            repeats: 200,
            pose: None,
        }
    }
}

fn invalid(key: &str, msg: impl std::fmt::Display) -> CliError {
    CliError::Validation(format!("{key}: {msg}"))
}

fn check_positive(key: &str, v: f64) -> CliResult<()> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(invalid(key, format!("must be positive, got {v}")))
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> CliResult<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| CliError::Validation(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a TOML config, or the `config` entry of an emitted manifest.
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Validation(format!("cannot read config {}: {e}", path.display())))?;
        if path.extension().is_some_and(|e| e == "json") {
            let v: serde_json::Value =
                serde_json::from_str(&text).map_err(|e| CliError::Validation(format!("manifest: {e}")))?;
            let inner = v
                .get("config")
                .cloned()
                .ok_or_else(|| CliError::Validation("manifest: missing `config` entry".into()))?;
            let cfg: ExperimentConfig =
                serde_json::from_value(inner).map_err(|e| CliError::Validation(format!("manifest config: {e}")))?;
            cfg.validate()?;
            return Ok(cfg);
        }
        Self::parse(&text)
    }

    pub fn validate(&self) -> CliResult<()> {
        for (i, d) in self.room.dims.iter().enumerate() {
            check_positive(&format!("room.dims[{i}]"), *d)?;
        }
        if !(self.room.rt60.is_finite() && self.room.rt60 >= 0.0) {
            return Err(invalid("room.rt60", format!("must be >= 0, got {}", self.room.rt60)));
        }
        check_positive("room.sample_rate", self.room.sample_rate)?;
        check_positive("room.c", self.room.c)?;
        let room = self.room_spec()?;
        for (i, p) in self.mics.positions.iter().enumerate() {
            if !room.contains(p) {
                return Err(invalid(&format!("mics.positions[{i}]"), format!("{p:?} lies outside the room")));
            }
        }
        if self.mics.positions[0] == self.mics.positions[1] {
            return Err(invalid("mics.positions", "microphones coincide"));
        }
        check_positive("grid.spacing", self.grid.spacing)?;
        for (i, e) in self.grid.extent.iter().enumerate() {
            if !(e.is_finite() && *e >= 0.0) {
                return Err(invalid(&format!("grid.extent[{i}]"), format!("must be >= 0, got {e}")));
            }
        }
        self.grid().map_err(|e| invalid("grid", e))?;
        if self.measurement.mode == ModeName::NoiseExcited {
            check_positive("measurement.duration", self.measurement.duration)?;
        }
        if let Some(s) = self.measurement.snr {
            if !s.is_finite() {
                return Err(invalid("measurement.snr", "must be finite"));
            }
        }
        if self.eval.n_eval_poses < 2 {
            return Err(invalid("eval.n_eval_poses", "must be >= 2"));
        }
        if let Some(e) = self.eval.extent {
            if e.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
                return Err(invalid("eval.extent", "entries must be >= 0"));
            }
        }
        let (o, e) = self.eval_box();
        for corner in [o, [o[0] + e[0], o[1] + e[1], o[2] + e[2]]] {
            if !room.contains(&corner) {
                return Err(invalid("eval", format!("evaluation box corner {corner:?} lies outside the room")));
            }
        }
        if self.model.affine.regions == 0 {
            return Err(invalid("model.affine.regions", "must be >= 1"));
        }
        if self.model.dnn.hidden.is_empty() || self.model.dnn.hidden.contains(&0) {
            return Err(invalid("model.dnn.hidden", "layer sizes must be positive"));
        }
        self.model
            .dnn
            .train
            .validate()
            .map_err(|e| invalid("model.dnn.train", e))?;
        if let InterpMode::InverseDistance { neighbors, .. } = self.model.linear {
            if neighbors == 0 {
                return Err(invalid("model.linear.neighbors", "must be >= 1"));
            }
        }
        if let InterpMode::AxisPair { axis } = self.model.linear {
            if axis > 2 {
                return Err(invalid("model.linear.axis", format!("must be 0, 1 or 2, got {axis}")));
            }
        }
        if self.sweep.factors.contains(&0) {
            return Err(invalid("sweep.factors", "factors must be >= 1"));
        }
        Ok(())
    }

    pub fn room_spec(&self) -> CliResult<RoomSpec> {
        let room = RoomSpec::from_rt60(self.room.dims, self.room.rt60)
            .and_then(|r| r.with_sample_rate(self.room.sample_rate))
            .and_then(|r| r.with_speed_of_sound(self.room.c))
            .map_err(|e| invalid("room", e))?;
        Ok(room)
    }

    pub fn mic_array(&self) -> CliResult<MicArray> {
        let [a, b] = self.mics.positions;
        MicArray::new(Pose::at(a), Pose::at(b)).map_err(|e| invalid("mics.positions", e))
    }

    pub fn mic_spacing(&self) -> f64 {
        let [a, b] = self.mics.positions;
        (0..3).map(|i| (a[i] - b[i]).powi(2)).sum::<f64>().sqrt()
    }

    pub fn grid(&self) -> rtf_forge::Result<SamplingGrid> {
        let room = RoomSpec::from_rt60(self.room.dims, self.room.rt60)?;
        build_grid(&room, self.grid.origin, self.grid.extent, self.grid.spacing)
    }

    pub fn mode(&self) -> MeasurementMode {
        match self.measurement.mode {
            ModeName::Analytic => MeasurementMode::Analytic,
            ModeName::NoiseExcited => MeasurementMode::NoiseExcited {
                duration: self.measurement.duration,
                snr_db: self.measurement.snr,
            },
        }
    }

    pub fn pipeline(&self) -> CliResult<Pipeline> {
        let mut p = Pipeline::new(self.room_spec()?, self.mic_array()?, self.mode())?;
        p.direct_normalized = self.measurement.direct_normalized;
        Ok(p)
    }

    pub fn eval_box(&self) -> (Vec3, Vec3) {
        (
            self.eval.origin.unwrap_or(self.grid.origin),
            self.eval.extent.unwrap_or(self.grid.extent),
        )
    }

    /// Source position for the repeated measurement.
    pub fn probe_pose(&self) -> Pose {
        let g = &self.grid;
        Pose::at(self.sweep.pose.unwrap_or([
            g.origin[0] + g.extent[0] / 2.0,
            g.origin[1] + g.extent[1] / 2.0,
            g.origin[2] + g.extent[2] / 2.0,
        ]))
    }

    pub fn train_config(&self) -> &TrainConfig {
        &self.model.dnn.train
    }
}
