use ndarray::{Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use super::{finish, read_mics, write_mics, ModelKind, Regressor};
use crate::dataset::{invert_features, Dataset};
use crate::nn::{
    decode_model, decode_standardizer, encode_model, encode_standardizer, train, IpdBlock, MlpModel, Standardizer,
    TrainConfig, TrainOutcome, DEFAULT_HIDDEN,
};
use crate::persist::{ByteWriter, Container, Section};
use crate::room_sim::{MicArray, Pose, Vec3};
use crate::rtf::{denormalize_features, features_from_rtf, free_field_rtf, FeatureVector};
use crate::{Error, Result, FEATURE_DIM};

const MLP_TAG: [u8; 4] = *b"MLP ";
const STD_TAG: [u8; 4] = *b"STDZ";
const DNN_TAG: [u8; 4] = *b"DNN ";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DnnConfig {
    pub hidden: Vec<usize>,
    pub train: TrainConfig,
    pub init_seed: u64,
    /// Learn the residual after removing the direct-path RTF.
    pub direct_normalized: bool,
}

impl Default for DnnConfig {
    fn default() -> Self {
        DnnConfig {
            hidden: DEFAULT_HIDDEN.to_vec(),
            train: TrainConfig::default(),
            init_seed: 0,
            direct_normalized: false,
        }
    }
}

/// Geometry needed to undo the direct-path normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct DirectPath {
    pub mics: MicArray,
    pub speed_of_sound: f64,
    pub sample_rate: f64,
}

impl DirectPath {
    fn features(&self, p: &Vec3) -> Result<FeatureVector> {
        let h = free_field_rtf(&Pose::at(*p), &self.mics, self.speed_of_sound, self.sample_rate)?;
        Ok(features_from_rtf(&h).value)
    }

    fn normalize_rows(&self, poses: &[Vec3], y: ArrayView2<f64>) -> Result<Array2<f64>> {
        let mut out = y.to_owned();
        for (p, mut row) in poses.iter().zip(out.axis_iter_mut(Axis(0))) {
            let v = FeatureVector::from_slice(&row.to_vec())?;
            let n = denormalize_features(&v, &invert_features(&self.features(p)?));
            row.assign(&ndarray::Array1::from(n.to_vec()));
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DnnRegressor {
    pub model: MlpModel,
    pub inputs: Standardizer,
    pub direct: Option<DirectPath>,
}

fn pose_matrix(poses: &[Vec3]) -> Array2<f64> {
    Array2::from_shape_fn((poses.len(), 3), |(i, j)| poses[i][j])
}

impl DnnRegressor {
    pub fn fit(train_set: &Dataset, dev_set: &Dataset, config: &DnnConfig) -> Result<(Self, TrainOutcome)> {
        super::require_raw_targets(train_set)?;
        super::require_raw_targets(dev_set)?;
        let h = &train_set.header;
        let direct = config.direct_normalized.then(|| DirectPath {
            mics: h.mics,
            speed_of_sound: h.room.speed_of_sound,
            sample_rate: h.sample_rate,
        });
        Self::fit_arrays(
            &super::position_rows(train_set),
            train_set.targets_f64().view(),
            &super::position_rows(dev_set),
            dev_set.targets_f64().view(),
            config,
            direct,
        )
    }

    /// Fits on raw feature targets; `direct` enables the residual target.
    pub fn fit_arrays(
        train_poses: &[Vec3],
        train_y: ArrayView2<f64>,
        dev_poses: &[Vec3],
        dev_y: ArrayView2<f64>,
        config: &DnnConfig,
        direct: Option<DirectPath>,
    ) -> Result<(Self, TrainOutcome)> {
        if train_y.ncols() != FEATURE_DIM || dev_y.ncols() != FEATURE_DIM {
            return Err(Error::Shape(format!("targets must have {FEATURE_DIM} columns")));
        }
        if config.hidden.is_empty() || config.hidden.contains(&0) {
            return Err(Error::Data("hidden layer sizes must be non-empty and positive".into()));
        }
        let train_x = pose_matrix(train_poses);
        let dev_x = pose_matrix(dev_poses);
        let inputs = Standardizer::fit(train_x.view());
        let (ty, dy) = match &direct {
            Some(d) => (d.normalize_rows(train_poses, train_y)?, d.normalize_rows(dev_poses, dev_y)?),
            None => (train_y.to_owned(), dev_y.to_owned()),
        };
        let mut sizes = vec![3];
        sizes.extend(&config.hidden);
        sizes.push(FEATURE_DIM);
        let model = MlpModel::init(&sizes, config.init_seed)?.with_ipd_block(IpdBlock::FEATURES)?;
        let outcome = train(
            model,
            inputs.apply(train_x.view())?.view(),
            ty.view(),
            inputs.apply(dev_x.view())?.view(),
            dy.view(),
            &config.train,
        )?;
        let reg = DnnRegressor {
            model: outcome.model.clone(),
            inputs,
            direct,
        };
        Ok((reg, outcome))
    }

    fn predict_positions(&self, poses: &[Vec3]) -> Result<Vec<FeatureVector>> {
        let x = self.inputs.apply(pose_matrix(poses).view())?;
        let y = self.model.predict(x.view())?;
        poses
            .iter()
            .zip(y.axis_iter(Axis(0)))
            .map(|(p, row)| {
                let v = FeatureVector::from_slice(&row.to_vec())?;
                let v = match &self.direct {
                    Some(d) => denormalize_features(&v, &d.features(p)?),
                    None => v,
                };
                finish(&v.to_vec())
            })
            .collect()
    }

    pub(crate) fn from_container(c: &Container) -> Result<Self> {
        let model = decode_model(&mut c.section(&MLP_TAG)?.reader())?;
        let inputs = decode_standardizer(&mut c.section(&STD_TAG)?.reader())?;
        let s = c.section(&DNN_TAG)?;
        let mut r = s.reader();
        let direct = match r.u8("direct flag")? {
            0 => None,
            _ => {
                let (mics, speed_of_sound, sample_rate) = read_mics(&mut r)?;
                Some(DirectPath {
                    mics,
                    speed_of_sound,
                    sample_rate,
                })
            }
        };
        r.expect_end("dnn section")?;
        if model.input_size() != inputs.mean.len() || model.output_size() != FEATURE_DIM {
            return Err(Error::format(s.offset, "network shape does not match a pose-to-feature model"));
        }
        Ok(DnnRegressor { model, inputs, direct })
    }
}

impl Regressor for DnnRegressor {
    fn kind(&self) -> ModelKind {
        ModelKind::Dnn
    }

    fn predict(&self, pose: &Pose) -> Result<FeatureVector> {
        Ok(self.predict_positions(&[pose.position])?.remove(0))
    }

    fn predict_many(&self, poses: &[Pose]) -> Result<Vec<FeatureVector>> {
        let positions: Vec<Vec3> = poses.iter().map(|p| p.position).collect();
        let mut out = Vec::with_capacity(poses.len());
        for chunk in positions.chunks(256) {
            out.extend(self.predict_positions(chunk)?);
        }
        Ok(out)
    }

    fn sections(&self) -> Vec<Section> {
        let mut m = ByteWriter::new();
        encode_model(&self.model, &mut m);
        let mut s = ByteWriter::new();
        encode_standardizer(&self.inputs, &mut s);
        let mut d = ByteWriter::new();
        match &self.direct {
            Some(dp) => {
                d.u8(1);
                write_mics(&mut d, &dp.mics, dp.speed_of_sound, dp.sample_rate);
            }
            None => d.u8(0),
        }
        vec![
            Section::new(MLP_TAG, m.into_inner()),
            Section::new(STD_TAG, s.into_inner()),
            Section::new(DNN_TAG, d.into_inner()),
        ]
    }
}
