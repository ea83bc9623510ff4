//! Self-describing binary checkpoints for [`MlpVelocityModel`].
//!
//! Layout (all little-endian):
//! `"RFCK" | u32 version | u32 dim | u32 time_embed | u32 n_hidden |
//!  n_hidden x u32 | u64 seed | u64 train_steps | str sampler_desc |
//!  per layer: weights then bias as f64`.
//!
//! Round trips are bit-identical; any structural mismatch fails with the
//! byte offset of the violation.

use std::fs;
use std::path::Path;

use crate::binio::{Reader, Writer};
use crate::error::{Error, Result};
use crate::model::{Linear, MlpVelocityModel, TIME_EMBED_WIDTH};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"RFCK";
const VERSION: u32 = 1;

pub fn encode(model: &MlpVelocityModel) -> Vec<u8> {
    let mut w = Writer::new(MAGIC, VERSION);
    w.put_u32(model.dim() as u32);
    w.put_u32(TIME_EMBED_WIDTH as u32);
    w.put_u32(model.hidden().len() as u32);
    for &h in model.hidden() {
        w.put_u32(h as u32);
    }
    w.put_u64(model.seed());
    w.put_u64(model.train_steps);
    w.put_str(&model.sampler_desc);
    for layer in &model.layers {
        w.put_f64_slice(layer.w.data());
        w.put_f64_slice(layer.b.data());
    }
    w.finish()
}

pub fn decode(bytes: &[u8]) -> Result<MlpVelocityModel> {
    let mut r = Reader::new(bytes, MAGIC, VERSION, "checkpoint")?;
    let dim = r.get_u32("dim")? as usize;
    let declared_embed = r.get_u32("time embed width")? as usize;
    if declared_embed != TIME_EMBED_WIDTH {
        return Err(Error::format(
            r.offset() - 4,
            format!("time embedding width {declared_embed} unsupported (expected {TIME_EMBED_WIDTH})"),
        ));
    }
    if dim == 0 {
        return Err(Error::format(r.offset() - 8, "dim must be positive"));
    }
    let n_hidden = r.get_u32("hidden layer count")? as usize;
    let mut hidden = Vec::with_capacity(n_hidden);
    for _ in 0..n_hidden {
        let h = r.get_u32("hidden width")? as usize;
        if h == 0 {
            return Err(Error::format(r.offset() - 4, "hidden width must be positive"));
        }
        hidden.push(h);
    }
    let seed = r.get_u64("seed")?;
    let train_steps = r.get_u64("train steps")?;
    let sampler_desc = r.get_str("sampler descriptor")?;

    let mut widths = Vec::with_capacity(n_hidden + 2);
    widths.push(dim + TIME_EMBED_WIDTH);
    widths.extend_from_slice(&hidden);
    widths.push(dim);
    let mut layers = Vec::with_capacity(widths.len() - 1);
    for pair in widths.windows(2) {
        let (fan_in, fan_out) = (pair[0], pair[1]);
        let w = r.get_f64_vec(fan_in * fan_out, "layer weights")?;
        let b = r.get_f64_vec(fan_out, "layer bias")?;
        layers.push(Linear {
            w: Tensor::from_vec(vec![fan_in, fan_out], w)?,
            b: Tensor::from_vec(vec![fan_out], b)?,
        });
    }
    r.expect_eof()?;
    Ok(MlpVelocityModel::from_parts(
        dim,
        hidden,
        layers,
        seed,
        train_steps,
        sampler_desc,
    ))
}

pub fn save(model: &MlpVelocityModel, path: &Path) -> Result<()> {
    fs::write(path, encode(model))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<MlpVelocityModel> {
    let bytes = fs::read(path)?;
    decode(&bytes)
}
