use std::collections::BTreeMap;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use super::{finish, ModelKind, Regressor};
use crate::dataset::{Dataset, LatticeMeta};
use crate::persist::{ByteReader, ByteWriter, Container, Section};
use crate::room_sim::{distance, Pose, Vec3};
use crate::rtf::FeatureVector;
use crate::{Error, Result};

const TAG: [u8; 4] = *b"LINR";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum InterpMode {
    /// Normalized weights `1 / (d + 1e-9)^exponent` over the nearest
    /// `neighbors` stored poses.
    InverseDistance { neighbors: usize, exponent: f64 },
    /// Mean of the two lattice neighbours bracketing the query along `axis`.
    AxisPair { axis: usize },
}

impl Default for InterpMode {
    fn default() -> Self {
        InterpMode::AxisPair { axis: 2 }
    }
}

impl InterpMode {
    fn validate(&self) -> Result<()> {
        match *self {
            InterpMode::InverseDistance { neighbors, exponent } => {
                if neighbors == 0 {
                    return Err(Error::Data("neighbour count must be >= 1".into()));
                }
                if !(exponent.is_finite() && exponent > 0.0) {
                    return Err(Error::Data(format!("weight exponent must be positive, got {exponent}")));
                }
            }
            InterpMode::AxisPair { axis } => {
                if axis > 2 {
                    return Err(Error::Data(format!("axis must be 0, 1 or 2, got {axis}")));
                }
            }
        }
        Ok(())
    }
}

/// Lattice rows grouped into lines along the interpolation axis.
#[derive(Debug, Clone, PartialEq)]
struct AxisLines {
    origin: Vec3,
    spacing: f64,
    axis: usize,
    /// `(other index a, other index b) -> [(index along axis, row)]`, sorted.
    lines: BTreeMap<(u32, u32), Vec<(u32, usize)>>,
}

impl AxisLines {
    fn new(lattice: &LatticeMeta, axis: usize) -> Self {
        let (a, b) = other_axes(axis);
        let mut lines: BTreeMap<(u32, u32), Vec<(u32, usize)>> = BTreeMap::new();
        for (row, ix) in lattice.indices.iter().enumerate() {
            lines.entry((ix[a], ix[b])).or_default().push((ix[axis], row));
        }
        for v in lines.values_mut() {
            v.sort_unstable();
        }
        AxisLines {
            origin: lattice.origin,
            spacing: lattice.spacing,
            axis,
            lines,
        }
    }

    /// Rows and weights for a query, or an extrapolation error.
    fn neighbours(&self, p: &Vec3) -> Result<Vec<(usize, f64)>> {
        let u = [0, 1, 2].map(|d| (p[d] - self.origin[d]) / self.spacing);
        let (a, b) = other_axes(self.axis);
        let key = (u[a].round(), u[b].round());
        let line = if key.0 >= 0.0 && key.1 >= 0.0 {
            self.lines.get(&(key.0 as u32, key.1 as u32))
        } else {
            None
        };
        let line = match line {
            Some(l) => l,
            None => {
                // Nearest populated line in the orthogonal plane.
                self.lines
                    .iter()
                    .min_by(|x, y| {
                        let dx = (x.0 .0 as f64 - u[a]).powi(2) + (x.0 .1 as f64 - u[b]).powi(2);
                        let dy = (y.0 .0 as f64 - u[a]).powi(2) + (y.0 .1 as f64 - u[b]).powi(2);
                        dx.total_cmp(&dy)
                    })
                    .map(|(_, l)| l)
                    .ok_or_else(|| Error::Data("no stored lattice rows".into()))?
            }
        };
        let t = u[self.axis];
        if let Some((_, row)) = line.iter().find(|(k, _)| (*k as f64 - t).abs() < 1e-6) {
            return Ok(vec![(*row, 1.0)]);
        }
        let below = line.iter().rev().find(|(k, _)| (*k as f64) < t);
        let above = line.iter().find(|(k, _)| (*k as f64) > t);
        match (below, above) {
            (Some((_, r0)), Some((_, r1))) => Ok(vec![(*r0, 0.5), (*r1, 0.5)]),
            _ => Err(Error::Extrapolation(format!(
                "query {p:?} is not bracketed by two lattice nodes along axis {}",
                self.axis
            ))),
        }
    }
}

fn other_axes(axis: usize) -> (usize, usize) {
    match axis {
        0 => (1, 2),
        1 => (0, 2),
        _ => (0, 1),
    }
}

/// Interpolates stored training targets.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearInterpModel {
    pub mode: InterpMode,
    poses: Vec<Vec3>,
    targets: Array2<f64>,
    lattice: Option<LatticeMeta>,
    lines: Option<AxisLines>,
}

impl LinearInterpModel {
    pub fn fit(
        poses: &[Vec3],
        targets: ArrayView2<f64>,
        lattice: Option<&LatticeMeta>,
        mode: InterpMode,
    ) -> Result<Self> {
        mode.validate()?;
        if poses.len() != targets.nrows() {
            return Err(Error::Shape("pose and target row counts differ".into()));
        }
        if poses.is_empty() {
            return Err(Error::Data("no training pairs".into()));
        }
        let lines = match mode {
            InterpMode::InverseDistance { neighbors, .. } => {
                if poses.len() < neighbors {
                    return Err(Error::Data(format!(
                        "{neighbors} neighbours requested but only {} training pairs",
                        poses.len()
                    )));
                }
                None
            }
            InterpMode::AxisPair { axis } => {
                let l = lattice.ok_or_else(|| Error::Contract("axis-pair interpolation needs lattice metadata".into()))?;
                if l.indices.len() != poses.len() {
                    return Err(Error::Shape("lattice index count differs from pose count".into()));
                }
                Some(AxisLines::new(l, axis))
            }
        };
        Ok(LinearInterpModel {
            mode,
            poses: poses.to_vec(),
            targets: targets.to_owned(),
            lattice: lattice.cloned(),
            lines,
        })
    }

    pub fn fit_dataset(data: &Dataset, mode: InterpMode) -> Result<Self> {
        super::require_raw_targets(data)?;
        Self::fit(
            &super::position_rows(data),
            data.targets_f64().view(),
            data.header.lattice.as_ref(),
            mode,
        )
    }

    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    /// Stored rows and their normalized weights for a query position.
    pub fn weights(&self, p: &Vec3) -> Result<Vec<(usize, f64)>> {
        match self.mode {
            InterpMode::AxisPair { .. } => self.lines.as_ref().expect("built on fit").neighbours(p),
            InterpMode::InverseDistance { neighbors, exponent } => {
                let mut d: Vec<(f64, usize)> = self.poses.iter().map(|q| distance(p, q)).zip(0..).collect();
                let cmp = |x: &(f64, usize), y: &(f64, usize)| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1));
                if neighbors < d.len() {
                    d.select_nth_unstable_by(neighbors - 1, cmp);
                    d.truncate(neighbors);
                }
                d.sort_unstable_by(cmp);
                if d[0].0 < 1e-12 {
                    return Ok(vec![(d[0].1, 1.0)]);
                }
                let raw: Vec<f64> = d.iter().map(|(di, _)| (di + 1e-9).powf(-exponent)).collect();
                let total: f64 = raw.iter().sum();
                Ok(d.iter().zip(raw).map(|((_, i), w)| (*i, w / total)).collect())
            }
        }
    }

    /// Weighted combination before IPD renormalization.
    pub fn interpolate(&self, p: &Vec3) -> Result<Vec<f64>> {
        let w = self.weights(p)?;
        let mut out = vec![0.0; self.targets.ncols()];
        for (row, wi) in w {
            for (o, t) in out.iter_mut().zip(self.targets.row(row)) {
                *o += wi * t;
            }
        }
        Ok(out)
    }

    pub(crate) fn from_container(c: &Container) -> Result<Self> {
        let s = c.section(&TAG)?;
        let mut r = s.reader();
        let mode = match r.u8("interpolation mode")? {
            0 => InterpMode::InverseDistance {
                neighbors: r.u32("neighbour count")? as usize,
                exponent: r.f64("weight exponent")?,
            },
            1 => InterpMode::AxisPair {
                axis: r.u32("axis")? as usize,
            },
            other => return Err(Error::format(r.offset() - 1, format!("unknown interpolation mode {other}"))),
        };
        let n = r.u64("row count")? as usize;
        let dim = r.u32("target width")? as usize;
        let flat = r.f64s(n.checked_mul(3).ok_or_else(|| Error::format(r.offset(), "row count overflow"))?, "poses")?;
        let poses: Vec<Vec3> = flat.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
        let at = r.offset();
        let targets = Array2::from_shape_vec((n, dim), r.f64s(n * dim, "targets")?)
            .map_err(|e| Error::format(at, e.to_string()))?;
        let lattice = match r.u8("lattice flag")? {
            0 => None,
            _ => Some(read_lattice(&mut r, n)?),
        };
        r.expect_end("interpolation section")?;
        let at = s.offset;
        Self::fit(&poses, targets.view(), lattice.as_ref(), mode).map_err(|e| Error::format(at, e.to_string()))
    }
}

fn read_lattice(r: &mut ByteReader<'_>, n: usize) -> Result<LatticeMeta> {
    let o = r.f64s(3, "lattice origin")?;
    let spacing = r.f64("lattice spacing")?;
    let mut counts = [0usize; 3];
    for c in &mut counts {
        *c = r.u64("lattice count")? as usize;
    }
    let mut indices = Vec::with_capacity(n);
    for _ in 0..n {
        indices.push([r.u32("index")?, r.u32("index")?, r.u32("index")?]);
    }
    Ok(LatticeMeta {
        origin: [o[0], o[1], o[2]],
        spacing,
        counts,
        indices,
    })
}

impl Regressor for LinearInterpModel {
    fn kind(&self) -> ModelKind {
        ModelKind::Linear
    }

    fn needs_grid(&self) -> bool {
        matches!(self.mode, InterpMode::AxisPair { .. })
    }

    fn predict(&self, pose: &Pose) -> Result<FeatureVector> {
        finish(&self.interpolate(&pose.position)?)
    }

    fn sections(&self) -> Vec<Section> {
        let mut w = ByteWriter::new();
        match self.mode {
            InterpMode::InverseDistance { neighbors, exponent } => {
                w.u8(0);
                w.u32(neighbors as u32);
                w.f64(exponent);
            }
            InterpMode::AxisPair { axis } => {
                w.u8(1);
                w.u32(axis as u32);
            }
        }
        w.u64(self.poses.len() as u64);
        w.u32(self.targets.ncols() as u32);
        for p in &self.poses {
            w.f64s(p);
        }
        w.f64s(self.targets.as_standard_layout().as_slice().expect("standard layout"));
        match &self.lattice {
            None => w.u8(0),
            Some(l) => {
                w.u8(1);
                w.f64s(&l.origin);
                w.f64(l.spacing);
                for c in l.counts {
                    w.u64(c as u64);
                }
                for ix in &l.indices {
                    for v in ix {
                        w.u32(*v);
                    }
                }
            }
        }
        vec![Section::new(TAG, w.into_inner())]
    }
}
