use nalgebra::{DMatrix, Matrix3, Vector3};
use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{finish, ModelKind, Regressor};
use crate::dataset::Dataset;
use crate::persist::{ByteWriter, Container, Section};
use crate::room_sim::{Pose, Vec3};
use crate::rtf::FeatureVector;
use crate::{Error, Result};

const TAG: [u8; 4] = *b"AFFN";
const POSE_DIM: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AffineConfig {
    pub regions: usize,
    pub seed: u64,
    pub iterations: usize,
    pub restarts: usize,
    pub ridge: f64,
}

impl Default for AffineConfig {
    fn default() -> Self {
        AffineConfig {
            regions: 64,
            seed: 0,
            iterations: 50,
            restarts: 3,
            ridge: 1e-6,
        }
    }
}

/// One affine map per k-means cell of pose space.
#[derive(Debug, Clone, PartialEq)]
pub struct PiecewiseAffineModel {
    pub centroids: Vec<Vec3>,
    /// `(outputs, 3)` per region.
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
    /// Training pairs assigned to each region.
    pub counts: Vec<usize>,
}

fn sq_dist(a: &Vec3, b: &Vec3) -> f64 {
    (0..3).map(|i| (a[i] - b[i]).powi(2)).sum()
}

fn nearest(centroids: &[Vec3], p: &Vec3) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (k, c) in centroids.iter().enumerate() {
        let d = sq_dist(c, p);
        if d < best_d {
            best_d = d;
            best = k;
        }
    }
    best
}

/// Lloyd iterations from seeded random initial centroids; the restart with
/// the lowest within-cluster sum of squares wins.
pub fn kmeans(points: &[Vec3], k: usize, iterations: usize, restarts: usize, seed: u64) -> Result<Vec<Vec3>> {
    if k == 0 {
        return Err(Error::Data("region count must be >= 1".into()));
    }
    if points.len() < k {
        return Err(Error::EmptyRegion {
            region: points.len(),
            count: 0,
            needed: POSE_DIM + 1,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<(f64, Vec<Vec3>)> = None;
    for _ in 0..restarts.max(1) {
        let mut centroids: Vec<Vec3> = sample(&mut rng, points.len(), k).iter().map(|i| points[i]).collect();
        let mut assign = vec![0usize; points.len()];
        for _ in 0..iterations {
            for (a, p) in assign.iter_mut().zip(points) {
                *a = nearest(&centroids, p);
            }
            let mut sums = vec![[0.0; 3]; k];
            let mut counts = vec![0usize; k];
            for (a, p) in assign.iter().zip(points) {
                counts[*a] += 1;
                for d in 0..3 {
                    sums[*a][d] += p[d];
                }
            }
            let mut moved = false;
            for c in 0..k {
                if counts[c] > 0 {
                    let next = sums[c].map(|s| s / counts[c] as f64);
                    moved |= next != centroids[c];
                    centroids[c] = next;
                }
            }
            if !moved {
                break;
            }
        }
        let inertia: f64 = points.iter().map(|p| sq_dist(p, &centroids[nearest(&centroids, p)])).sum();
        if best.as_ref().is_none_or(|(b, _)| inertia < *b) {
            best = Some((inertia, centroids));
        }
    }
    Ok(best.expect("at least one restart").1)
}

impl PiecewiseAffineModel {
    pub fn fit(poses: &[Vec3], targets: ArrayView2<f64>, config: &AffineConfig) -> Result<Self> {
        if poses.len() != targets.nrows() {
            return Err(Error::Shape("pose and target row counts differ".into()));
        }
        if !(config.ridge >= 0.0) {
            return Err(Error::Data("ridge must be non-negative".into()));
        }
        let centroids = kmeans(poses, config.regions, config.iterations, config.restarts, config.seed)?;
        let mut members: Vec<Vec<usize>> = vec![Vec::new(); centroids.len()];
        for (i, p) in poses.iter().enumerate() {
            members[nearest(&centroids, p)].push(i);
        }
        let needed = POSE_DIM + 1;
        if let Some((region, m)) = members.iter().enumerate().find(|(_, m)| m.len() < needed) {
            return Err(Error::EmptyRegion {
                region,
                count: m.len(),
                needed,
            });
        }
        let mut weights = Vec::with_capacity(centroids.len());
        let mut biases = Vec::with_capacity(centroids.len());
        for (region, idx) in members.iter().enumerate() {
            let (a, b) = ridge_fit(poses, targets, idx, config.ridge)
                .map_err(|e| Error::Numeric(format!("region {region}: {e}")))?;
            weights.push(a);
            biases.push(b);
        }
        Ok(PiecewiseAffineModel {
            centroids,
            weights,
            biases,
            counts: members.iter().map(Vec::len).collect(),
        })
    }

    pub fn fit_dataset(data: &Dataset, config: &AffineConfig) -> Result<Self> {
        super::require_raw_targets(data)?;
        Self::fit(&super::position_rows(data), data.targets_f64().view(), config)
    }

    pub fn regions(&self) -> usize {
        self.centroids.len()
    }

    pub fn region_of(&self, p: &Vec3) -> usize {
        nearest(&self.centroids, p)
    }

    /// `A_k p + b_k` for the region containing `p`, before renormalization.
    pub fn apply(&self, p: &Vec3) -> Vec<f64> {
        let k = self.region_of(p);
        let x = Array1::from(p.to_vec());
        (self.weights[k].dot(&x) + &self.biases[k]).to_vec()
    }

    pub(crate) fn from_container(c: &Container) -> Result<Self> {
        let s = c.section(&TAG)?;
        let mut r = s.reader();
        let k = r.u32("region count")? as usize;
        let dim = r.u32("output width")? as usize;
        let mut model = PiecewiseAffineModel {
            centroids: Vec::with_capacity(k),
            weights: Vec::with_capacity(k),
            biases: Vec::with_capacity(k),
            counts: Vec::with_capacity(k),
        };
        for _ in 0..k {
            let c = r.f64s(3, "centroid")?;
            model.centroids.push([c[0], c[1], c[2]]);
            model.counts.push(r.u64("region count")? as usize);
            let w = r.f64s(dim * POSE_DIM, "region weights")?;
            model.weights.push(Array2::from_shape_vec((dim, POSE_DIM), w).expect("shape"));
            model.biases.push(Array1::from(r.f64s(dim, "region bias")?));
        }
        r.expect_end("affine section")?;
        Ok(model)
    }
}

/// Ridge least squares on centred data, so the bias is not shrunk.
fn ridge_fit(poses: &[Vec3], targets: ArrayView2<f64>, idx: &[usize], ridge: f64) -> Result<(Array2<f64>, Array1<f64>)> {
    let n = idx.len() as f64;
    let mut xm = [0.0; 3];
    for i in idx {
        for d in 0..3 {
            xm[d] += poses[*i][d] / n;
        }
    }
    let rows = targets.select(Axis(0), idx);
    let ym = rows.mean_axis(Axis(0)).expect("non-empty region");
    let mut xtx = Matrix3::<f64>::zeros();
    let mut xc = DMatrix::<f64>::zeros(idx.len(), 3);
    for (r, i) in idx.iter().enumerate() {
        let v = Vector3::new(poses[*i][0] - xm[0], poses[*i][1] - xm[1], poses[*i][2] - xm[2]);
        xtx += v * v.transpose();
        for d in 0..3 {
            xc[(r, d)] = v[d];
        }
    }
    xtx += Matrix3::identity() * ridge;
    let chol = xtx
        .cholesky()
        .ok_or_else(|| Error::Numeric("normal equations are not positive definite".into()))?;
    let dim = targets.ncols();
    let mut a = Array2::zeros((dim, POSE_DIM));
    // X^T Yc for every output column at once
    let yc = &rows - &ym;
    let mut xty = Array2::<f64>::zeros((POSE_DIM, dim));
    for (r, yrow) in yc.axis_iter(Axis(0)).enumerate() {
        for d in 0..3 {
            let x = xc[(r, d)];
            xty.row_mut(d).scaled_add(x, &yrow);
        }
    }
    for j in 0..dim {
        let sol = chol.solve(&Vector3::new(xty[[0, j]], xty[[1, j]], xty[[2, j]]));
        if !sol.iter().all(|v| v.is_finite()) {
            return Err(Error::Numeric("non-finite region weights".into()));
        }
        for d in 0..3 {
            a[[j, d]] = sol[d];
        }
    }
    let xmv = Array1::from(xm.to_vec());
    let b = &ym - &a.dot(&xmv);
    Ok((a, b))
}

impl Regressor for PiecewiseAffineModel {
    fn kind(&self) -> ModelKind {
        ModelKind::Affine
    }

    fn predict(&self, pose: &Pose) -> Result<FeatureVector> {
        finish(&self.apply(&pose.position))
    }

    fn sections(&self) -> Vec<Section> {
        let mut w = ByteWriter::new();
        w.u32(self.regions() as u32);
        w.u32(self.biases.first().map_or(0, |b| b.len()) as u32);
        for k in 0..self.regions() {
            w.f64s(&self.centroids[k]);
            w.u64(self.counts[k] as u64);
            w.f64s(self.weights[k].as_standard_layout().as_slice().expect("standard layout"));
            w.f64s(self.biases[k].as_slice().expect("contiguous"));
        }
        vec![Section::new(TAG, w.into_inner())]
    }
}
