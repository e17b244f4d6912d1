//! Byte encoding of a network and its input standardizer. Parameters are
//! stored as little-endian f64 so a save/load round trip is bit-exact.

use ndarray::{Array1, Array2};

use super::{Dense, IpdBlock, LayerNorm, MlpModel, Standardizer};
use crate::persist::{ByteReader, ByteWriter};
use crate::{Error, Result};

pub fn encode_model(model: &MlpModel, w: &mut ByteWriter) {
    let sizes = model.sizes();
    w.u32(sizes.len() as u32);
    for s in &sizes {
        w.u32(*s as u32);
    }
    match model.ipd {
        Some(b) => {
            w.u8(1);
            w.u32(b.sin_start as u32);
            w.u32(b.cos_start as u32);
            w.u32(b.bins as u32);
        }
        None => w.u8(0),
    }
    for l in &model.layers {
        w.u8(l.norm.is_some() as u8);
        w.f64s(l.weight.as_slice().expect("contiguous"));
        w.f64s(l.bias.as_slice().expect("contiguous"));
        if let Some(n) = &l.norm {
            w.f64s(n.gain.as_slice().expect("contiguous"));
            w.f64s(n.bias.as_slice().expect("contiguous"));
        }
    }
}

pub fn decode_model(r: &mut ByteReader<'_>) -> Result<MlpModel> {
    let start = r.offset();
    let n = r.u32("layer count")? as usize;
    if n < 2 {
        return Err(Error::format(start, format!("topology has {n} sizes, need at least 2")));
    }
    let sizes = (0..n)
        .map(|_| r.u32("layer width").map(|v| v as usize))
        .collect::<Result<Vec<_>>>()?;
    let ipd = match r.u8("ipd flag")? {
        0 => None,
        1 => Some(IpdBlock {
            sin_start: r.u32("ipd sin start")? as usize,
            cos_start: r.u32("ipd cos start")? as usize,
            bins: r.u32("ipd bins")? as usize,
        }),
        other => return Err(Error::format(r.offset() - 1, format!("bad ipd flag {other}"))),
    };
    let mut layers = Vec::with_capacity(n - 1);
    for pair in sizes.windows(2) {
        let (fan_in, fan_out) = (pair[0], pair[1]);
        let has_norm = match r.u8("norm flag")? {
            0 => false,
            1 => true,
            other => return Err(Error::format(r.offset() - 1, format!("bad norm flag {other}"))),
        };
        let weight = Array2::from_shape_vec((fan_out, fan_in), r.f64s(fan_in * fan_out, "weights")?)
            .expect("shape");
        let bias = Array1::from(r.f64s(fan_out, "bias")?);
        let norm = if has_norm {
            Some(LayerNorm {
                gain: Array1::from(r.f64s(fan_out, "norm gain")?),
                bias: Array1::from(r.f64s(fan_out, "norm bias")?),
            })
        } else {
            None
        };
        layers.push(Dense { weight, bias, norm });
    }
    let model = MlpModel { layers, ipd };
    model.validate().map_err(|e| Error::format(start, e.to_string()))?;
    Ok(model)
}

pub fn encode_standardizer(s: &Standardizer, w: &mut ByteWriter) {
    w.u32(s.mean.len() as u32);
    w.f64s(&s.mean);
    w.f64s(&s.scale);
}

pub fn decode_standardizer(r: &mut ByteReader<'_>) -> Result<Standardizer> {
    let n = r.u32("standardizer width")? as usize;
    Ok(Standardizer {
        mean: r.f64s(n, "standardizer mean")?,
        scale: r.f64s(n, "standardizer scale")?,
    })
}
