use super::{read_mics, write_mics, ModelKind, Regressor};
use crate::persist::{ByteWriter, Container, Section};
use crate::room_sim::{MicArray, Pose};
use crate::rtf::{features_from_rtf, free_field_rtf, FeatureVector};
use crate::Result;

const TAG: [u8; 4] = *b"FFLD";

/// Direct-path model; needs only the receiver geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct FreeFieldModel {
    pub mics: MicArray,
    pub speed_of_sound: f64,
    pub sample_rate: f64,
}

impl FreeFieldModel {
    pub fn new(mics: MicArray, speed_of_sound: f64, sample_rate: f64) -> Self {
        FreeFieldModel {
            mics,
            speed_of_sound,
            sample_rate,
        }
    }

    pub(crate) fn from_container(c: &Container) -> Result<Self> {
        let s = c.section(&TAG)?;
        let mut r = s.reader();
        let (mics, c, fs) = read_mics(&mut r)?;
        r.expect_end("free-field section")?;
        Ok(FreeFieldModel::new(mics, c, fs))
    }
}

impl Regressor for FreeFieldModel {
    fn kind(&self) -> ModelKind {
        ModelKind::FreeField
    }

    fn needs_fit(&self) -> bool {
        false
    }

    fn predict(&self, pose: &Pose) -> Result<FeatureVector> {
        let h = free_field_rtf(pose, &self.mics, self.speed_of_sound, self.sample_rate)?;
        Ok(features_from_rtf(&h).value)
    }

    fn sections(&self) -> Vec<Section> {
        let mut w = ByteWriter::new();
        write_mics(&mut w, &self.mics, self.speed_of_sound, self.sample_rate);
        vec![Section::new(TAG, w.into_inner())]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::regressors::from_container;
    use crate::N_BINS;

    fn model() -> FreeFieldModel {
        FreeFieldModel::new(MicArray::pair_along_x([2.0, 1.0, 1.4], 0.18).unwrap(), 343.0, 16000.0)
    }

    #[test]
    fn symmetric_source_gives_unit_rtf() {
        let f = model().predict(&Pose::at([2.0, 3.0, 1.4])).unwrap();
        for k in 0..N_BINS {
            assert!(f.ild[k].abs() < 1e-12);
            assert!(f.ipd_sin[k].abs() < 1e-12);
            assert!((f.ipd_cos[k] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn distance_ratio_sets_ild() {
        let mics = MicArray::new(Pose::at([0.0, 0.0, 0.0]), Pose::at([3.0, 0.0, 0.0])).unwrap();
        let m = FreeFieldModel::new(mics, 343.0, 16000.0);
        let f = m.predict(&Pose::at([1.0, 0.0, 0.0])).unwrap();
        let expect = 20.0 * 0.5f64.log10();
        assert!(f.ild.iter().all(|v| (v - expect).abs() < 1e-9));
        assert!((expect + 6.0206).abs() < 1e-4);
    }

    #[test]
    fn equals_module_composition_and_round_trips() {
        let m = model();
        let p = Pose::at([1.3, 2.2, 0.9]);
        let direct = features_from_rtf(&free_field_rtf(&p, &m.mics, 343.0, 16000.0).unwrap()).value;
        assert_eq!(m.predict(&p).unwrap(), direct);
        let back = from_container(&Container::from_bytes(&m.to_container().to_bytes()).unwrap()).unwrap();
        assert_eq!(back.predict(&p).unwrap(), direct);
        assert!(!back.needs_fit());
    }
}
