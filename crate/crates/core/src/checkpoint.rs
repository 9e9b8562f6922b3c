//! Binary checkpoint format.
//!
//! ```text
//! "AGMT1"
//! u64 record count
//! per record: u32 name length, name (UTF-8), u32 rank, u64 × rank dims,
//!             f64 × product(dims) data
//! ```
//! All integers and floats are little-endian.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::Model;
use crate::optim::Adam;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 5] = b"AGMT1";

/// Serializes named tensors in the given order.
pub fn encode_records(records: &[(String, &Tensor)]) -> Vec<u8> {
    let mut out = MAGIC.to_vec();
    out.extend((records.len() as u64).to_le_bytes());
    for (name, t) in records {
        out.extend((name.len() as u32).to_le_bytes());
        out.extend(name.as_bytes());
        out.extend((t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend((d as u64).to_le_bytes());
        }
        for &v in t.data() {
            out.extend(v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize, what: &str) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint(format!("truncated while reading {what}")))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

pub fn decode_records(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    if bytes.get(..MAGIC.len()) != Some(&MAGIC[..]) {
        return Err(Error::Checkpoint("bad magic (expected AGMT1)".into()));
    }
    let mut r = Reader {
        bytes,
        pos: MAGIC.len(),
    };
    let count = r.u64("record count")?;
    let mut out = Vec::new();
    for k in 0..count {
        let len = r.u32("name length")? as usize;
        let name = String::from_utf8(r.take(len, "record name")?.to_vec())
            .map_err(|_| Error::Checkpoint(format!("record {k} has a non-UTF-8 name")))?;
        let rank = r.u32(&name)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64(&name)? as usize);
        }
        let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let n = n.ok_or_else(|| Error::Checkpoint(format!("record {name} has an absurd shape {shape:?}")))?;
        let raw = r.take(n.saturating_mul(8), &name)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let t = Tensor::new(&shape, data).map_err(|e| Error::Checkpoint(format!("record {name}: {e}")))?;
        out.push((name, t));
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(out)
}

fn adam_records(model: &Model, adam: &Adam) -> Result<Vec<(String, Tensor)>> {
    let mut out = vec![("adam.step".to_string(), Tensor::scalar(adam.step as f64))];
    for (k, (name, _, t)) in model.named_params().iter().enumerate() {
        out.push((format!("adam.m.{name}"), Tensor::new(t.shape(), adam.m[k].clone())?));
        out.push((format!("adam.v.{name}"), Tensor::new(t.shape(), adam.v[k].clone())?));
    }
    Ok(out)
}

/// Model parameters followed by the optimizer state.
pub fn encode_checkpoint(model: &Model, adam: &Adam) -> Result<Vec<u8>> {
    let extra = adam_records(model, adam)?;
    let mut records: Vec<(String, &Tensor)> = model
        .named_params()
        .into_iter()
        .map(|(n, _, t)| (n, t))
        .collect();
    records.extend(extra.iter().map(|(n, t)| (n.clone(), t)));
    Ok(encode_records(&records))
}

pub fn save_checkpoint(path: &Path, model: &Model, adam: &Adam) -> Result<()> {
    let bytes = encode_checkpoint(model, adam)?;
    // Write-then-rename so an interrupted save never leaves a torn file.
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Overwrites `model` and `adam` with the checkpoint's records. Both must
/// already be shaped for the configuration the checkpoint was trained with.
pub fn restore_checkpoint(bytes: &[u8], model: &mut Model, adam: &mut Adam) -> Result<()> {
    let mut records: std::collections::HashMap<String, Tensor> = decode_records(bytes)?.into_iter().collect();
    let mut take = |name: &str, shape: &[usize]| -> Result<Tensor> {
        let t = records
            .remove(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing record {name}")))?;
        if t.shape() != shape {
            return Err(Error::Checkpoint(format!(
                "record {name} has shape {:?}, the configured model expects {shape:?}",
                t.shape()
            )));
        }
        Ok(t)
    };
    let names: Vec<(String, Vec<usize>)> = model
        .named_params()
        .iter()
        .map(|(n, _, t)| (n.clone(), t.shape().to_vec()))
        .collect();
    let mut params = Vec::with_capacity(names.len());
    let mut m = Vec::with_capacity(names.len());
    let mut v = Vec::with_capacity(names.len());
    for (name, shape) in &names {
        params.push(take(name, shape)?);
        m.push(take(&format!("adam.m.{name}"), shape)?.into_data());
        v.push(take(&format!("adam.v.{name}"), shape)?.into_data());
    }
    let step = take("adam.step", &[1])?.data()[0];
    if !(step >= 0.0 && step.fract() == 0.0) {
        return Err(Error::Checkpoint(format!("adam.step is not a count: {step}")));
    }
    if let Some(extra) = records.keys().min() {
        return Err(Error::Checkpoint(format!("unexpected record {extra}")));
    }
    for (dst, src) in model.params_mut().into_iter().zip(params) {
        *dst = src;
    }
    adam.m = m;
    adam.v = v;
    adam.step = step as u64;
    Ok(())
}

pub fn load_checkpoint(path: &Path, model: &mut Model, adam: &mut Adam) -> Result<()> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    restore_checkpoint(&bytes, model, adam).map_err(|e| match e {
        Error::Checkpoint(msg) => Error::Checkpoint(format!("{}: {msg}", path.display())),
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn records_round_trip() {
        let a = Tensor::new(&[2, 3], vec![1.0, -2.5, 3.0, f64::MIN_POSITIVE, 0.0, 1e300]).unwrap();
        let b = Tensor::scalar(7.0);
        let bytes = encode_records(&[("a".into(), &a), ("b.c".into(), &b)]);
        let back = decode_records(&bytes).unwrap();
        assert_eq!(back, vec![("a".to_string(), a), ("b.c".to_string(), b)]);
        // 5 magic + 8 count + (4+1+4+16+48) + (4+3+4+8+8)
        assert_eq!(bytes.len(), 5 + 8 + 73 + 27);
    }

    #[test]
    fn bad_magic_and_truncation() {
        let t = Tensor::scalar(1.0);
        let bytes = encode_records(&[("x".into(), &t)]);
        let mut bad = bytes.clone();
        bad[0] = b'B';
        assert!(matches!(decode_records(&bad), Err(Error::Checkpoint(_))));
        for cut in [3, 10, bytes.len() - 1] {
            assert!(matches!(decode_records(&bytes[..cut]), Err(Error::Checkpoint(_))), "{cut}");
        }
    }
}
