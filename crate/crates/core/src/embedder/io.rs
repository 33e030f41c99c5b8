//! Binary weight files.
//!
//! All integers and floats are little-endian:
//!
//! ```text
//! magic        4 bytes  "OAEM"
//! version      u32      MODEL_FORMAT_VERSION
//! variant      u8       b'A' | b'B' | b'C'
//! seed         u64
//! input_size   u32
//! in_channels  u32
//! layer_count  u32
//! layers       layer_count records, each a u8 tag then its payload:
//!   0 shift    f64 offset
//!   1 conv     u32 in_c, u32 out_c, u32 kernel, u32 stride,
//!              f64 weight[out_c*in_c*kernel*kernel], f64 bias[out_c]
//!   2 tanh     (none)
//!   3 gap      (none)
//!   4 linear   u32 in_dim, u32 out_dim, f64 weight[out_dim*in_dim], f64 bias[out_dim]
//!   5 l2norm   (none)
//! ```

use std::path::Path;

use super::{Conv2d, EmbeddingModel, Layer, Linear, Variant};
use crate::error::{Error, Result};

pub const MODEL_FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"OAEM";

pub fn save_model(model: &EmbeddingModel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode(model)).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<EmbeddingModel> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|m| Error::format(path, m))
}

pub(crate) fn encode(model: &EmbeddingModel) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, MODEL_FORMAT_VERSION);
    out.push(model.variant.tag());
    out.extend_from_slice(&model.seed.to_le_bytes());
    put_u32(&mut out, model.input_size as u32);
    put_u32(&mut out, model.in_channels as u32);
    put_u32(&mut out, model.layers.len() as u32);
    for layer in &model.layers {
        match layer {
            Layer::Shift(s) => {
                out.push(0);
                put_f64s(&mut out, &[*s]);
            }
            Layer::Conv(c) => {
                out.push(1);
                for v in [c.in_c, c.out_c, c.kernel, c.stride] {
                    put_u32(&mut out, v as u32);
                }
                put_f64s(&mut out, &c.weight);
                put_f64s(&mut out, &c.bias);
            }
            Layer::Tanh => out.push(2),
            Layer::GlobalAvgPool => out.push(3),
            Layer::Linear(l) => {
                out.push(4);
                put_u32(&mut out, l.in_dim as u32);
                put_u32(&mut out, l.out_dim as u32);
                put_f64s(&mut out, &l.weight);
                put_f64s(&mut out, &l.bias);
            }
            Layer::L2Normalize => out.push(5),
        }
    }
    out
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_f64s(out: &mut Vec<u8>, vs: &[f64]) {
    for v in vs {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let s = self
            .bytes
            .get(self.pos..self.pos + n)
            .ok_or_else(|| format!("truncated model file at byte {}", self.pos))?;
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> std::result::Result<u8, String> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> std::result::Result<usize, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> std::result::Result<Vec<f64>, String> {
        let raw = self.take(n.checked_mul(8).ok_or("layer too large")?)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

pub(crate) fn decode(bytes: &[u8]) -> std::result::Result<EmbeddingModel, String> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err("not a model file (bad magic)".into());
    }
    let version = r.u32()? as u32;
    if version != MODEL_FORMAT_VERSION {
        return Err(format!("unsupported model format version {version}"));
    }
    let tag = r.u8()?;
    let variant = Variant::from_tag(tag).ok_or_else(|| format!("unknown variant tag {tag}"))?;
    let seed = r.u64()?;
    let input_size = r.u32()?;
    let in_channels = r.u32()?;
    let count = r.u32()?;
    let mut layers = Vec::with_capacity(count.min(64));
    for _ in 0..count {
        let layer = match r.u8()? {
            0 => Layer::Shift(r.f64s(1)?[0]),
            1 => {
                let (in_c, out_c, kernel, stride) = (r.u32()?, r.u32()?, r.u32()?, r.u32()?);
                if kernel % 2 == 0 || stride == 0 {
                    return Err(format!("bad conv geometry k={kernel} s={stride}"));
                }
                Layer::Conv(Conv2d {
                    in_c,
                    out_c,
                    kernel,
                    stride,
                    weight: r.f64s(out_c * in_c * kernel * kernel)?,
                    bias: r.f64s(out_c)?,
                })
            }
            2 => Layer::Tanh,
            3 => Layer::GlobalAvgPool,
            4 => {
                let (in_dim, out_dim) = (r.u32()?, r.u32()?);
                Layer::Linear(Linear {
                    in_dim,
                    out_dim,
                    weight: r.f64s(in_dim * out_dim)?,
                    bias: r.f64s(out_dim)?,
                })
            }
            5 => Layer::L2Normalize,
            t => return Err(format!("unknown layer tag {t}")),
        };
        layers.push(layer);
    }
    if r.pos != bytes.len() {
        return Err(format!("{} trailing bytes", bytes.len() - r.pos));
    }
    Ok(EmbeddingModel {
        variant,
        seed,
        input_size,
        in_channels,
        layers,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedder::build_reference_model;

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        for v in Variant::ALL {
            let model = build_reference_model(17, v);
            let path = dir.path().join(format!("{v}.bin"));
            save_model(&model, &path).unwrap();
            assert_eq!(load_model(&path).unwrap(), model);
        }
    }

    #[test]
    fn rejects_corrupt_files() {
        let bytes = encode(&build_reference_model(1, Variant::A));
        assert!(decode(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode(&bad).is_err());
        let mut extra = bytes;
        extra.push(0);
        assert!(decode(&extra).is_err());
    }
}
