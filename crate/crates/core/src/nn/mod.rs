//! Minimal feedforward network trained from scratch.
//!
//! Hidden layers compute `relu(layer_norm(W a + b))`; the output layer is
//! affine, optionally followed by per-bin unit normalization of the IPD
//! (sin, cos) block. Arrays are `(examples, features)`.

mod adam;
mod checkpoint;
mod train;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::rtf::MAGNITUDE_FLOOR;
use crate::signal::white_noise;
use crate::{Error, Result, N_BINS};

pub use adam::AdamState;
pub use checkpoint::{decode_model, decode_standardizer, encode_model, encode_standardizer};
pub use train::{train, EarlyStopping, EpochRecord, StopDecision, TrainConfig, TrainOutcome};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Default hidden topology.
pub const DEFAULT_HIDDEN: [usize; 3] = [1024, 1024, 1024];

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gain: Array1<f64>,
    pub bias: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    /// `(out, in)`
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    /// Present on hidden layers.
    pub norm: Option<LayerNorm>,
}

impl Dense {
    pub fn in_size(&self) -> usize {
        self.weight.ncols()
    }

    pub fn out_size(&self) -> usize {
        self.weight.nrows()
    }
}

/// Location of the (sin, cos) block inside the output vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct IpdBlock {
    pub sin_start: usize,
    pub cos_start: usize,
    pub bins: usize,
}

impl IpdBlock {
    /// `[ild | sin | cos]` over the 513-bin grid.
    pub const FEATURES: IpdBlock = IpdBlock {
        sin_start: N_BINS,
        cos_start: 2 * N_BINS,
        bins: N_BINS,
    };

    fn end(&self) -> usize {
        self.sin_start.max(self.cos_start) + self.bins
    }
}

/// Layers run in order; all but the last are hidden (layer norm + ReLU
/// when `norm` is set, plain ReLU otherwise).
#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    pub layers: Vec<Dense>,
    pub ipd: Option<IpdBlock>,
}

/// Per-dimension input standardization. Constant dimensions pass through.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Standardizer {
    pub fn fit(x: ArrayView2<f64>) -> Self {
        let n = x.nrows().max(1) as f64;
        let mut mean = Vec::with_capacity(x.ncols());
        let mut scale = Vec::with_capacity(x.ncols());
        for col in x.axis_iter(Axis(1)) {
            let m = col.sum() / n;
            let var = col.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n;
            if var.sqrt() > 1e-12 * (1.0 + m.abs()) {
                mean.push(m);
                scale.push(var.sqrt());
            } else {
                mean.push(0.0);
                scale.push(1.0);
            }
        }
        Standardizer { mean, scale }
    }

    pub fn identity(dim: usize) -> Self {
        Standardizer {
            mean: vec![0.0; dim],
            scale: vec![1.0; dim],
        }
    }

    pub fn apply(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        if x.ncols() != self.mean.len() {
            return Err(Error::Shape(format!(
                "standardizer expects {} inputs, got {}",
                self.mean.len(),
                x.ncols()
            )));
        }
        let mut out = x.to_owned();
        for (mut col, (m, s)) in out.axis_iter_mut(Axis(1)).zip(self.mean.iter().zip(&self.scale)) {
            col.mapv_inplace(|v| (v - m) / s);
        }
        Ok(out)
    }
}

/// Intermediates kept by [`MlpModel::forward`] for [`MlpModel::backward`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    inputs: Vec<Array2<f64>>,
    xhat: Vec<Option<Array2<f64>>>,
    inv_std: Vec<Option<Array1<f64>>>,
    pre_relu: Vec<Array2<f64>>,
    raw_output: Array2<f64>,
    renormalized: bool,
}

/// Gradients aligned with [`MlpModel::params_mut`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<DenseGrad>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseGrad {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub gain: Option<Array1<f64>>,
    pub beta: Option<Array1<f64>>,
}

impl Gradients {
    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut out = Vec::new();
        for g in &self.layers {
            out.push(g.weight.as_slice().expect("contiguous"));
            out.push(g.bias.as_slice().expect("contiguous"));
            if let (Some(gain), Some(beta)) = (&g.gain, &g.beta) {
                out.push(gain.as_slice().expect("contiguous"));
                out.push(beta.as_slice().expect("contiguous"));
            }
        }
        out
    }

    pub fn is_zero(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| *v == 0.0))
    }
}

/// Layer normalization of one vector (biased variance).
pub fn layer_norm(a: ArrayView1<f64>, gain: ArrayView1<f64>, bias: ArrayView1<f64>, eps: f64) -> Result<Array1<f64>> {
    if a.len() < 2 {
        return Err(Error::Shape(format!(
            "layer norm needs at least 2 features, got {}",
            a.len()
        )));
    }
    if gain.len() != a.len() || bias.len() != a.len() {
        return Err(Error::Shape("layer norm gain/bias length mismatch".into()));
    }
    let n = a.len() as f64;
    let mean = a.sum() / n;
    let var = a.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let inv = 1.0 / (var + eps).sqrt();
    Ok(Zip::from(&a)
        .and(&gain)
        .and(&bias)
        .map_collect(|v, g, b| (v - mean) * inv * g + b))
}

/// Standard normal draws with the white-noise generator.
fn gaussian(seed: u64, n: usize) -> Vec<f64> {
    if n == 0 {
        return Vec::new();
    }
    white_noise(seed, n, 1.0).map(|t| t.samples).unwrap_or_default()
}

impl MlpModel {
    /// Weights ~ N(0, 1/in_size), zero biases, unit layer-norm gains.
    pub fn init(sizes: &[usize], seed: u64) -> Result<Self> {
        if sizes.len() < 3 {
            return Err(Error::Shape(format!(
                "topology needs input, at least one hidden layer and output, got {sizes:?}"
            )));
        }
        if sizes.contains(&0) {
            return Err(Error::Shape(format!("zero-width layer in {sizes:?}")));
        }
        let mut seeder = ChaCha8Rng::seed_from_u64(seed);
        let n_layers = sizes.len() - 1;
        let layers = (0..n_layers)
            .map(|i| {
                let (fan_in, fan_out) = (sizes[i], sizes[i + 1]);
                let std = (1.0 / fan_in as f64).sqrt();
                let draws = gaussian(rand::RngCore::next_u64(&mut seeder), fan_in * fan_out);
                let weight = Array2::from_shape_vec((fan_out, fan_in), draws)
                    .expect("shape")
                    .mapv(|v| v * std);
                let hidden = i + 1 < n_layers;
                Dense {
                    weight,
                    bias: Array1::zeros(fan_out),
                    norm: (hidden && fan_out >= 2).then(|| LayerNorm {
                        gain: Array1::ones(fan_out),
                        bias: Array1::zeros(fan_out),
                    }),
                }
            })
            .collect();
        Ok(MlpModel { layers, ipd: None })
    }

    pub fn with_ipd_block(mut self, block: IpdBlock) -> Result<Self> {
        if block.end() > self.output_size() {
            return Err(Error::Shape(format!(
                "IPD block ends at {} but output has {} units",
                block.end(),
                self.output_size()
            )));
        }
        self.ipd = Some(block);
        Ok(self)
    }

    pub fn input_size(&self) -> usize {
        self.layers.first().map_or(0, Dense::in_size)
    }

    pub fn output_size(&self) -> usize {
        self.layers.last().map_or(0, Dense::out_size)
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![self.input_size()];
        s.extend(self.layers.iter().map(Dense::out_size));
        s
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::Shape("model has no layers".into()));
        }
        for (i, pair) in self.layers.windows(2).enumerate() {
            if pair[0].out_size() != pair[1].in_size() {
                return Err(Error::Shape(format!(
                    "layer {i} outputs {} but layer {} expects {}",
                    pair[0].out_size(),
                    i + 1,
                    pair[1].in_size()
                )));
            }
        }
        for (i, l) in self.layers.iter().enumerate() {
            if l.bias.len() != l.out_size() {
                return Err(Error::Shape(format!("layer {i} bias length mismatch")));
            }
            if let Some(n) = &l.norm {
                if n.gain.len() != l.out_size() || n.bias.len() != l.out_size() {
                    return Err(Error::Shape(format!("layer {i} norm length mismatch")));
                }
            }
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    pub fn params(&self) -> Vec<&[f64]> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.push(l.weight.as_slice().expect("contiguous"));
            out.push(l.bias.as_slice().expect("contiguous"));
            if let Some(n) = &l.norm {
                out.push(n.gain.as_slice().expect("contiguous"));
                out.push(n.bias.as_slice().expect("contiguous"));
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::new();
        for l in &mut self.layers {
            out.push(l.weight.as_slice_mut().expect("contiguous"));
            out.push(l.bias.as_slice_mut().expect("contiguous"));
            if let Some(n) = &mut l.norm {
                out.push(n.gain.as_slice_mut().expect("contiguous"));
                out.push(n.bias.as_slice_mut().expect("contiguous"));
            }
        }
        out
    }

    /// Batched forward pass. `renormalize` applies the IPD post-map when
    /// the model has an IPD block.
    pub fn forward(&self, x: ArrayView2<f64>, renormalize: bool) -> Result<(Array2<f64>, ForwardCache)> {
        if x.ncols() != self.input_size() {
            return Err(Error::Shape(format!(
                "model expects {} inputs, got {}",
                self.input_size(),
                x.ncols()
            )));
        }
        let n_layers = self.layers.len();
        let mut cache = ForwardCache {
            inputs: Vec::with_capacity(n_layers),
            xhat: Vec::with_capacity(n_layers),
            inv_std: Vec::with_capacity(n_layers),
            pre_relu: Vec::with_capacity(n_layers),
            raw_output: Array2::zeros((0, 0)),
            renormalized: false,
        };
        let mut a = x.as_standard_layout().into_owned();
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = a.dot(&layer.weight.t()).as_standard_layout().into_owned();
            z += &layer.bias;
            let last = i + 1 == n_layers;
            cache.inputs.push(a);
            if last {
                cache.xhat.push(None);
                cache.inv_std.push(None);
                a = z;
                break;
            }
            let pre = if let Some(norm) = &layer.norm {
                let (y, xhat, inv) = layer_norm_rows(&z, norm);
                cache.xhat.push(Some(xhat));
                cache.inv_std.push(Some(inv));
                y
            } else {
                cache.xhat.push(None);
                cache.inv_std.push(None);
                z
            };
            a = pre.mapv(|v| v.max(0.0));
            cache.pre_relu.push(pre);
        }
        if a.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite activation in forward pass".into()));
        }
        cache.raw_output = a.clone();
        if renormalize {
            if let Some(block) = self.ipd {
                renormalize_rows(&mut a, block);
                cache.renormalized = true;
            }
        }
        Ok((a, cache))
    }

    pub fn predict(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        Ok(self.forward(x, true)?.0)
    }

    /// MSE (mean over batch and outputs, no 1/2) and its exact gradient.
    pub fn backward(&self, cache: &ForwardCache, output: ArrayView2<f64>, target: ArrayView2<f64>) -> Result<(f64, Gradients)> {
        if output.dim() != target.dim() {
            return Err(Error::Shape(format!(
                "output {:?} vs target {:?}",
                output.dim(),
                target.dim()
            )));
        }
        if cache.inputs.len() != self.layers.len() {
            return Err(Error::Shape("forward cache does not match the model".into()));
        }
        let count = output.len() as f64;
        let diff = &output - &target;
        let loss = diff.iter().map(|d| d * d).sum::<f64>() / count;
        let mut grad = diff.mapv(|d| 2.0 * d / count);

        if cache.renormalized {
            let block = self.ipd.expect("renormalized without block");
            grad = renormalize_backward(&cache.raw_output, &grad, block);
        }

        let n_layers = self.layers.len();
        let mut grads: Vec<DenseGrad> = Vec::with_capacity(n_layers);
        for i in (0..n_layers).rev() {
            let layer = &self.layers[i];
            let mut gain_grad = None;
            let mut beta_grad = None;
            let dz = if i + 1 == n_layers {
                grad
            } else {
                let pre = &cache.pre_relu[i];
                let dpre = Zip::from(&grad).and(pre).map_collect(|g, p| if *p > 0.0 { *g } else { 0.0 });
                match (&layer.norm, &cache.xhat[i], &cache.inv_std[i]) {
                    (Some(norm), Some(xhat), Some(inv)) => {
                        gain_grad = Some((&dpre * xhat).sum_axis(Axis(0)));
                        beta_grad = Some(dpre.sum_axis(Axis(0)));
                        layer_norm_backward(&dpre, xhat, inv, &norm.gain)
                    }
                    _ => dpre,
                }
            };
            let input = &cache.inputs[i];
            let weight = dz.t().dot(input).as_standard_layout().into_owned();
            let bias = dz.sum_axis(Axis(0)).as_standard_layout().into_owned();
            if i > 0 {
                grad = dz.dot(&layer.weight);
            } else {
                grad = Array2::zeros((0, 0));
            }
            grads.push(DenseGrad {
                weight,
                bias,
                gain: gain_grad,
                beta: beta_grad,
            });
        }
        grads.reverse();
        Ok((loss, Gradients { layers: grads }))
    }

    /// Convenience: forward, then MSE gradient.
    pub fn loss_and_gradients(&self, x: ArrayView2<f64>, target: ArrayView2<f64>, renormalize: bool) -> Result<(f64, Gradients)> {
        let (out, cache) = self.forward(x, renormalize)?;
        self.backward(&cache, out.view(), target)
    }

    /// MSE without gradients, evaluated in chunks.
    pub fn mse(&self, x: ArrayView2<f64>, target: ArrayView2<f64>, renormalize: bool) -> Result<f64> {
        let mut total = 0.0;
        let chunk = 512;
        let mut start = 0;
        while start < x.nrows() {
            let end = (start + chunk).min(x.nrows());
            let (out, _) = self.forward(x.slice(ndarray::s![start..end, ..]), renormalize)?;
            let t = target.slice(ndarray::s![start..end, ..]);
            total += Zip::from(&out).and(&t).fold(0.0, |acc, o, y| acc + (o - y).powi(2));
            start = end;
        }
        Ok(total / target.len().max(1) as f64)
    }
}

/// Largest entrywise disagreement between analytic gradients and central
/// finite differences of the MSE loss. Entries are compared relative to
/// `max(|analytic|, |numeric|, floor)`.
pub fn gradient_check(
    model: &MlpModel,
    x: ArrayView2<f64>,
    target: ArrayView2<f64>,
    renormalize: bool,
    step: f64,
    floor: f64,
) -> Result<f64> {
    let (_, grads) = model.loss_and_gradients(x, target, renormalize)?;
    let analytic: Vec<Vec<f64>> = grads.tensors().iter().map(|t| t.to_vec()).collect();
    let mut probe = model.clone();
    let mut worst = 0.0f64;
    for (t, a) in analytic.iter().enumerate() {
        for j in 0..a.len() {
            let orig = probe.params()[t][j];
            probe.params_mut()[t][j] = orig + step;
            let plus = probe.mse(x, target, renormalize)?;
            probe.params_mut()[t][j] = orig - step;
            let minus = probe.mse(x, target, renormalize)?;
            probe.params_mut()[t][j] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let scale = a[j].abs().max(numeric.abs()).max(floor);
            worst = worst.max((a[j] - numeric).abs() / scale);
        }
    }
    Ok(worst)
}

fn layer_norm_rows(z: &Array2<f64>, norm: &LayerNorm) -> (Array2<f64>, Array2<f64>, Array1<f64>) {
    let n = z.ncols() as f64;
    let mut xhat = z.clone();
    let mut inv = Array1::zeros(z.nrows());
    for (mut row, inv_i) in xhat.axis_iter_mut(Axis(0)).zip(inv.iter_mut()) {
        let mean = row.sum() / n;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let s = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        row.mapv_inplace(|v| (v - mean) * s);
        *inv_i = s;
    }
    let y = &xhat * &norm.gain + &norm.bias;
    (y, xhat, inv)
}

fn layer_norm_backward(dy: &Array2<f64>, xhat: &Array2<f64>, inv: &Array1<f64>, gain: &Array1<f64>) -> Array2<f64> {
    let n = dy.ncols() as f64;
    let dxhat = dy * gain;
    let mut dz = Array2::zeros(dy.dim());
    Zip::from(dz.rows_mut())
        .and(dxhat.rows())
        .and(xhat.rows())
        .and(inv)
        .for_each(|mut out, g, xh, s| {
            let mean_g = g.sum() / n;
            let mean_gx = g.dot(&xh) / n;
            Zip::from(&mut out)
                .and(&g)
                .and(&xh)
                .for_each(|o, gi, xi| *o = s * (gi - mean_g - xi * mean_gx));
        });
    dz
}

fn renormalize_rows(a: &mut Array2<f64>, block: IpdBlock) {
    for mut row in a.axis_iter_mut(Axis(0)) {
        let row = row.as_slice_mut().expect("contiguous row");
        let (head, tail) = row.split_at_mut(block.cos_start.max(block.sin_start));
        let (sin, cos) = if block.sin_start < block.cos_start {
            (&mut head[block.sin_start..block.sin_start + block.bins], &mut tail[..block.bins])
        } else {
            (&mut tail[..block.bins], &mut head[block.cos_start..block.cos_start + block.bins])
        };
        crate::rtf::renormalize_pairs(sin, cos);
    }
}

/// Jacobian of `(s, c) -> (s, c) / r` applied to the upstream gradient.
/// Degenerate pairs (r below the floor) map to a constant and pass no gradient.
fn renormalize_backward(raw: &Array2<f64>, grad: &Array2<f64>, block: IpdBlock) -> Array2<f64> {
    let mut out = grad.clone();
    for ((raw_row, g_row), mut o_row) in raw.rows().into_iter().zip(grad.rows()).zip(out.rows_mut()) {
        for k in 0..block.bins {
            let (si, ci) = (block.sin_start + k, block.cos_start + k);
            let (s, c) = (raw_row[si], raw_row[ci]);
            let r = (s * s + c * c).sqrt();
            if r < MAGNITUDE_FLOOR {
                o_row[si] = 0.0;
                o_row[ci] = 0.0;
                continue;
            }
            let r3 = r * r * r;
            let (gs, gc) = (g_row[si], g_row[ci]);
            let cross = gs * c - gc * s;
            o_row[si] = c * cross / r3;
            o_row[ci] = -s * cross / r3;
        }
    }
    out
}
