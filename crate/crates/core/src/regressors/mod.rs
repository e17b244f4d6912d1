//! Pose to feature-vector regressors behind one interface.

mod affine;
mod dnn;
mod free_field;
mod linear;

use std::fmt;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::persist::{ByteReader, ByteWriter, Container, Section};
use crate::room_sim::{MicArray, Pose, Vec3};
use crate::rtf::{ipd_renormalize, FeatureVector};
use crate::{Error, Result};

pub use affine::{AffineConfig, PiecewiseAffineModel};
pub use dnn::{DnnConfig, DnnRegressor};
pub use free_field::FreeFieldModel;
pub use linear::{InterpMode, LinearInterpModel};

const KIND_TAG: [u8; 4] = *b"KIND";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    FreeField,
    Linear,
    Affine,
    Dnn,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::FreeField => "free_field",
            ModelKind::Linear => "linear",
            ModelKind::Affine => "affine",
            ModelKind::Dnn => "dnn",
        }
    }

    fn code(self) -> u8 {
        match self {
            ModelKind::FreeField => 0,
            ModelKind::Linear => 1,
            ModelKind::Affine => 2,
            ModelKind::Dnn => 3,
        }
    }

    fn from_code(code: u8, offset: u64) -> Result<Self> {
        Ok(match code {
            0 => ModelKind::FreeField,
            1 => ModelKind::Linear,
            2 => ModelKind::Affine,
            3 => ModelKind::Dnn,
            other => return Err(Error::format(offset, format!("unknown model kind {other}"))),
        })
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Predicts a renormalized 1539-dimensional feature vector for a pose.
pub trait Regressor: Send + Sync {
    fn kind(&self) -> ModelKind;

    fn needs_fit(&self) -> bool {
        true
    }

    fn needs_grid(&self) -> bool {
        false
    }

    fn predict(&self, pose: &Pose) -> Result<FeatureVector>;

    fn predict_many(&self, poses: &[Pose]) -> Result<Vec<FeatureVector>> {
        poses.par_iter().map(|p| self.predict(p)).collect()
    }

    /// Kind-specific sections, without the kind marker.
    fn sections(&self) -> Vec<Section>;

    fn to_container(&self) -> Container {
        let mut sections = vec![Section::new(KIND_TAG, vec![self.kind().code()])];
        sections.extend(self.sections());
        Container { sections }
    }

    fn save(&self, path: &Path) -> Result<()> {
        self.to_container().write(path)
    }
}

pub fn from_container(c: &Container) -> Result<Box<dyn Regressor>> {
    let kind_section = c.section(&KIND_TAG)?;
    let mut r = kind_section.reader();
    let kind = ModelKind::from_code(r.u8("model kind")?, kind_section.offset)?;
    Ok(match kind {
        ModelKind::FreeField => Box::new(FreeFieldModel::from_container(c)?),
        ModelKind::Linear => Box::new(LinearInterpModel::from_container(c)?),
        ModelKind::Affine => Box::new(PiecewiseAffineModel::from_container(c)?),
        ModelKind::Dnn => Box::new(DnnRegressor::from_container(c)?),
    })
}

pub fn load(path: &Path) -> Result<Box<dyn Regressor>> {
    from_container(&Container::read(path)?)
}

pub(crate) fn finish(raw: &[f64]) -> Result<FeatureVector> {
    Ok(ipd_renormalize(&FeatureVector::from_slice(raw)?).value)
}

pub(crate) fn position_rows(data: &Dataset) -> Vec<Vec3> {
    data.pose_list().iter().map(|p| p.position).collect()
}

pub(crate) fn require_raw_targets(data: &Dataset) -> Result<()> {
    if data.header.direct_normalized {
        return Err(Error::Contract(
            "regressors fit raw feature targets; dataset is direct-path normalized".into(),
        ));
    }
    Ok(())
}

pub(crate) fn write_mics(w: &mut ByteWriter, mics: &MicArray, c: f64, fs: f64) {
    for m in &mics.mics {
        w.f64s(&m.position);
    }
    w.f64(c);
    w.f64(fs);
}

pub(crate) fn read_mics(r: &mut ByteReader<'_>) -> Result<(MicArray, f64, f64)> {
    let at = r.offset();
    let p1 = r.f64s(3, "mic 1")?;
    let p2 = r.f64s(3, "mic 2")?;
    let c = r.f64("speed of sound")?;
    let fs = r.f64("sample rate")?;
    let mics = MicArray::new(Pose::at([p1[0], p1[1], p1[2]]), Pose::at([p2[0], p2[1], p2[2]]))
        .map_err(|e| Error::format(at, e.to_string()))?;
    Ok((mics, c, fs))
}
