//! Binary persistence for adapters and dense weights.
//!
//! Adapter files start with `PSLR`, dense-weight files with `PSLW`. Both are
//! little-endian, end with a CRC32 of every preceding byte, and reject
//! trailing data.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::lora::{Activation, DenseModel, Linear, LoraAdapter};
use crate::nn::Matrix;

pub const ADAPTER_MAGIC: &[u8; 4] = b"PSLR";
pub const WEIGHTS_MAGIC: &[u8; 4] = b"PSLW";
pub const FORMAT_VERSION: u32 = 1;

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn new(magic: &[u8; 4]) -> Self {
        let mut w = Self { buf: magic.to_vec() };
        w.u32(FORMAT_VERSION);
        w
    }

    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn len(&mut self, v: usize) -> Result<()> {
        let v = u32::try_from(v).map_err(|_| Error::Invalid(format!("{v} does not fit in u32")))?;
        self.u32(v);
        Ok(())
    }

    fn str(&mut self, s: &str) -> Result<()> {
        self.len(s.len())?;
        self.buf.extend_from_slice(s.as_bytes());
        Ok(())
    }

    fn floats(&mut self, xs: &[f32]) {
        for x in xs {
            self.buf.extend_from_slice(&x.to_le_bytes());
        }
    }

    fn finish(mut self) -> Vec<u8> {
        let crc = crc32fast::hash(&self.buf);
        self.u32(crc);
        self.buf
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn corrupt<T>(&self, offset: usize, reason: impl Into<String>) -> Result<T> {
        Err(Error::Corrupt {
            offset,
            reason: reason.into(),
        })
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        match self.pos.checked_add(n) {
            Some(end) if end <= self.bytes.len() => {
                let out = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(out)
            }
            _ => self.corrupt(self.pos, format!("truncated while reading {what}")),
        }
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn open(bytes: &'a [u8], magic: &[u8; 4]) -> Result<Self> {
        let mut r = Self { bytes, pos: 0 };
        if bytes.len() < 12 {
            return r.corrupt(bytes.len(), "file shorter than header and checksum");
        }
        let body = bytes.len() - 4;
        let stored = u32::from_le_bytes([bytes[body], bytes[body + 1], bytes[body + 2], bytes[body + 3]]);
        if r.take(4, "magic")? != magic {
            return r.corrupt(
                0,
                format!("bad magic, expected {:?}", std::str::from_utf8(magic).unwrap_or("?")),
            );
        }
        let version = r.u32("version")?;
        if version != FORMAT_VERSION {
            return r.corrupt(4, format!("unsupported version {version}"));
        }
        if crc32fast::hash(&bytes[..body]) != stored {
            return r.corrupt(body, "checksum mismatch");
        }
        r.bytes = &bytes[..body];
        Ok(r)
    }

    fn dim(&mut self, what: &str) -> Result<usize> {
        let at = self.pos;
        let v = self.u32(what)? as usize;
        if v == 0 {
            return self.corrupt(at, format!("{what} is zero"));
        }
        Ok(v)
    }

    fn str(&mut self, what: &str) -> Result<String> {
        let n = self.u32(what)? as usize;
        let at = self.pos;
        let raw = self.take(n, what)?;
        match std::str::from_utf8(raw) {
            Ok(s) => Ok(s.to_owned()),
            Err(_) => self.corrupt(at, format!("{what} is not UTF-8")),
        }
    }

    fn matrix(&mut self, rows: usize, cols: usize, what: &str) -> Result<Matrix> {
        let n = rows
            .checked_mul(cols)
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::Corrupt {
                offset: self.pos,
                reason: format!("{what} size overflows"),
            })?;
        let raw = self.take(n, what)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Matrix::new(rows, cols, data)
    }

    fn finish(self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return self.corrupt(self.pos, format!("{} trailing bytes", self.bytes.len() - self.pos));
        }
        Ok(())
    }
}

pub fn encode_adapters(adapters: &[LoraAdapter]) -> Result<Vec<u8>> {
    let mut w = Writer::new(ADAPTER_MAGIC);
    w.len(adapters.len())?;
    for a in adapters {
        let (d, k) = a.dims();
        w.u32(a.task_index);
        w.str(&a.layer_id)?;
        w.len(d)?;
        w.len(k)?;
        w.len(a.rank())?;
        w.floats(a.a().data());
        w.floats(a.b().data());
    }
    Ok(w.finish())
}

pub fn decode_adapters(bytes: &[u8]) -> Result<Vec<LoraAdapter>> {
    let mut r = Reader::open(bytes, ADAPTER_MAGIC)?;
    let count = r.u32("adapter count")? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let task_index = r.u32("task index")?;
        let layer_id = r.str("layer id")?;
        let d = r.dim("d")?;
        let k = r.dim("k")?;
        let at = r.pos;
        let rank = r.dim("r")?;
        if rank > d.min(k) {
            return r.corrupt(at, format!("rank {rank} exceeds min({d}, {k})"));
        }
        let a = r.matrix(d, rank, "A")?;
        let b = r.matrix(rank, k, "B")?;
        out.push(LoraAdapter::from_parts(task_index, layer_id, a, b)?);
    }
    r.finish()?;
    Ok(out)
}

pub fn write_adapters(path: &Path, adapters: &[LoraAdapter]) -> Result<()> {
    fs::write(path, encode_adapters(adapters)?)?;
    Ok(())
}

pub fn read_adapters(path: &Path) -> Result<Vec<LoraAdapter>> {
    decode_adapters(&fs::read(path)?)
}

pub fn encode_weights(model: &DenseModel) -> Result<Vec<u8>> {
    let mut w = Writer::new(WEIGHTS_MAGIC);
    w.u32(match model.activation {
        Activation::Tanh => 0,
        Activation::Identity => 1,
    });
    w.len(model.layers.len())?;
    for l in &model.layers {
        w.str(&l.id)?;
        w.len(l.weight.rows())?;
        w.len(l.weight.cols())?;
        w.floats(l.weight.data());
        w.floats(l.bias.data());
    }
    Ok(w.finish())
}

pub fn decode_weights(bytes: &[u8]) -> Result<DenseModel> {
    let mut r = Reader::open(bytes, WEIGHTS_MAGIC)?;
    let at = r.pos;
    let activation = match r.u32("activation")? {
        0 => Activation::Tanh,
        1 => Activation::Identity,
        other => return r.corrupt(at, format!("unknown activation tag {other}")),
    };
    let at = r.pos;
    let count = r.dim("layer count")?;
    let mut layers = Vec::with_capacity(count.min(1 << 10));
    for _ in 0..count {
        let id = r.str("layer id")?;
        let d = r.dim("rows")?;
        let k = r.dim("cols")?;
        let weight = r.matrix(d, k, "weight")?;
        let bias = r.matrix(1, k, "bias")?;
        layers.push(Linear::new(id, weight, bias)?);
    }
    r.finish()?;
    DenseModel::new(layers, activation).map_err(|e| Error::Corrupt {
        offset: at,
        reason: e.to_string(),
    })
}

pub fn write_weights(path: &Path, model: &DenseModel) -> Result<()> {
    fs::write(path, encode_weights(model)?)?;
    Ok(())
}

pub fn read_weights(path: &Path) -> Result<DenseModel> {
    decode_weights(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Vec<LoraAdapter> {
        let mut a = LoraAdapter::new(1, "fc1", (4, 3), 2, 7).unwrap();
        a.set_factors(a.a().clone(), Matrix::from_fn(2, 3, |r, c| (r + c) as f32 * 0.5 - 0.75))
            .unwrap();
        vec![a, LoraAdapter::new(2, "fc2", (3, 2), 1, 9).unwrap()]
    }

    #[test]
    fn adapter_round_trip() {
        let ads = sample();
        let bytes = encode_adapters(&ads).unwrap();
        assert_eq!(&bytes[..4], b"PSLR");
        let back = decode_adapters(&bytes).unwrap();
        assert_eq!(back, ads);
        assert_eq!(encode_adapters(&back).unwrap(), bytes);
        assert_eq!(decode_adapters(&encode_adapters(&[]).unwrap()).unwrap(), vec![]);
    }

    #[test]
    fn trailing_and_truncated() {
        let bytes = encode_adapters(&sample()).unwrap();
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(matches!(decode_adapters(&extra), Err(Error::Corrupt { .. })));
        for cut in [0, 3, 11, bytes.len() - 1] {
            assert!(
                matches!(decode_adapters(&bytes[..cut]), Err(Error::Corrupt { .. })),
                "cut {cut}"
            );
        }
    }

    #[test]
    fn bad_magic_names_offset_zero() {
        let mut bytes = encode_adapters(&sample()).unwrap();
        bytes[0] = b'X';
        match decode_adapters(&bytes) {
            Err(Error::Corrupt { offset, .. }) => assert_eq!(offset, 0),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn weights_round_trip() {
        let m = DenseModel::init_mlp(5, 4, 3, 1);
        let bytes = encode_weights(&m).unwrap();
        let back = decode_weights(&bytes).unwrap();
        assert_eq!(back, m);
        assert_eq!(encode_weights(&back).unwrap(), bytes);
        assert!(decode_adapters(&bytes).is_err());
    }
}
