//! `VFN1` checkpoint files.
//!
//! Layout (little-endian): magic `VFN1`, `u32` version, `u32` layer count,
//! `(u32 in, u32 out)` per layer, `u32` activation id, then for every layer
//! its `in x out` weights row-major followed by its `out` biases as `f64`,
//! then the input box as six `f64` (min xyz, max xyz).

use std::fs;
use std::path::Path;

use nalgebra::DMatrix;

use super::{InputScale, Layer, VelocityFieldParams};
use crate::autodiff::Activation;
use crate::error::{Error, Result};
use crate::geometry::Vec3;

const MAGIC: [u8; 4] = *b"VFN1";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn save_checkpoint(params: &VelocityFieldParams, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    params.validate()?;
    let mut buf = Vec::with_capacity(64 + 8 * params.parameter_count());
    buf.extend_from_slice(&MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(params.layers.len() as u32).to_le_bytes());
    for l in &params.layers {
        buf.extend_from_slice(&(l.fan_in() as u32).to_le_bytes());
        buf.extend_from_slice(&(l.fan_out() as u32).to_le_bytes());
    }
    buf.extend_from_slice(&params.activation.id().to_le_bytes());
    for l in &params.layers {
        for r in 0..l.fan_in() {
            for c in 0..l.fan_out() {
                buf.extend_from_slice(&l.weight[(r, c)].to_le_bytes());
            }
        }
        for c in 0..l.fan_out() {
            buf.extend_from_slice(&l.bias[(0, c)].to_le_bytes());
        }
    }
    let s = &params.input_scale;
    for v in s.min.iter().chain(s.max.iter()) {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    ctx: String,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Truncated {
                context: self.ctx.clone(),
                expected: self.pos + n - self.bytes.len(),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<VelocityFieldParams> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut rd = Reader {
        bytes: &bytes,
        pos: 0,
        ctx: format!("checkpoint {}", path.display()),
    };
    let magic: [u8; 4] = rd.take(4)?.try_into().unwrap();
    if magic != MAGIC {
        return Err(Error::BadMagic {
            context: rd.ctx,
            expected: MAGIC,
            found: magic,
        });
    }
    let version = rd.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::VersionMismatch {
            context: "checkpoint".into(),
            found: version,
            supported: CHECKPOINT_VERSION,
        });
    }
    let count = rd.u32()? as usize;
    if count == 0 || count > 4096 {
        return Err(Error::format(
            &rd.ctx,
            format!("implausible layer count {count}"),
        ));
    }
    let mut shapes = Vec::with_capacity(count);
    for _ in 0..count {
        shapes.push((rd.u32()? as usize, rd.u32()? as usize));
    }
    let act_id = rd.u32()?;
    let activation = Activation::from_id(act_id)
        .ok_or_else(|| Error::format(&rd.ctx, format!("unknown activation id {act_id}")))?;
    let mut layers = Vec::with_capacity(count);
    for &(fan_in, fan_out) in &shapes {
        let mut weight = DMatrix::zeros(fan_in, fan_out);
        for r in 0..fan_in {
            for c in 0..fan_out {
                weight[(r, c)] = rd.f64()?;
            }
        }
        let mut bias = DMatrix::zeros(1, fan_out);
        for c in 0..fan_out {
            bias[(0, c)] = rd.f64()?;
        }
        layers.push(Layer { weight, bias });
    }
    let mut b = [0.0; 6];
    for v in &mut b {
        *v = rd.f64()?;
    }
    if rd.pos != bytes.len() {
        return Err(Error::format(
            &rd.ctx,
            format!("{} trailing bytes", bytes.len() - rd.pos),
        ));
    }
    let input_scale = InputScale {
        min: Vec3::new(b[0], b[1], b[2]),
        max: Vec3::new(b[3], b[4], b[5]),
    };
    VelocityFieldParams::new(layers, activation, input_scale)
        .map_err(|e| Error::format(&rd.ctx, e.to_string()))
}
