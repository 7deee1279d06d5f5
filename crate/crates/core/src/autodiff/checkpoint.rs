//! Binary parameter checkpoints.
//!
//! Layout (little-endian): magic `IVCK`, `u32` version, `u32` set count, then
//! for each set its name, `u32` parameter count and per parameter: name,
//! `u32` rank, `u64` dims, data, Adam first and second moments (all `f64`)
//! and the set's `u64` step count. Strings are `u32` length + UTF-8 bytes.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::param::ParamSet;
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"IVCK";
pub const CHECKPOINT_VERSION: u32 = 1;

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

fn put_f64s(out: &mut Vec<u8>, vals: &[f64]) {
    for v in vals {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode_checkpoint(sets: &[&ParamSet]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(sets.len() as u32).to_le_bytes());
    for ps in sets {
        put_str(&mut out, ps.name());
        out.extend_from_slice(&(ps.len() as u32).to_le_bytes());
        for p in ps.params() {
            put_str(&mut out, &p.name);
            out.extend_from_slice(&(p.value.shape().len() as u32).to_le_bytes());
            for &d in p.value.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            put_f64s(&mut out, p.value.data());
            put_f64s(&mut out, &p.adam_m);
            put_f64s(&mut out, &p.adam_v);
            out.extend_from_slice(&ps.step_count().to_le_bytes());
        }
    }
    out
}

pub fn write_checkpoint(path: &Path, sets: &[&ParamSet]) -> Result<()> {
    let bytes = encode_checkpoint(sets);
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::format(self.path, "truncated checkpoint"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| Error::format(self.path, "size overflow"))?)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let raw = self.take(n)?;
        String::from_utf8(raw.to_vec()).map_err(|_| Error::format(self.path, "invalid UTF-8 name"))
    }
}

pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<Vec<ParamSet>> {
    let mut r = Reader { buf: bytes, pos: 0, path };
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(Error::format(path, "bad magic, not a parameter checkpoint"));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::format(path, format!("unsupported checkpoint version {version}")));
    }
    let n_sets = r.u32()?;
    let mut sets = Vec::with_capacity(n_sets as usize);
    for _ in 0..n_sets {
        let mut ps = ParamSet::new(r.string()?);
        let n_params = r.u32()?;
        let mut step = 0;
        for _ in 0..n_params {
            let name = r.string()?;
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let numel: usize = shape.iter().product();
            let data = r.f64s(numel)?;
            let m = r.f64s(numel)?;
            let v = r.f64s(numel)?;
            step = r.u64()?;
            let idx = ps.add(name, Tensor::new(shape, data)?);
            let p = &mut ps.params_mut()[idx];
            p.adam_m = m;
            p.adam_v = v;
        }
        ps.restore_state(step);
        sets.push(ps);
    }
    if r.pos != bytes.len() {
        return Err(Error::format(path, "trailing bytes after checkpoint"));
    }
    Ok(sets)
}

pub fn read_checkpoint(path: &Path) -> Result<Vec<ParamSet>> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::AdamConfig;

    #[test]
    fn round_trip_preserves_values_and_state() {
        let mut ps = ParamSet::new("theta_G");
        ps.add("a.weight", Tensor::matrix(2, 2, vec![1.0, -2.0, 0.5, 1e-300]).unwrap());
        ps.add("a.bias", Tensor::row(vec![3.0, 4.0]));
        for p in ps.params_mut() {
            p.grad.iter_mut().for_each(|g| *g = 0.1);
        }
        ps.adam_step(&AdamConfig::default());
        let other = ParamSet::new("theta_U");
        let bytes = encode_checkpoint(&[&ps, &other]);
        assert_eq!(&bytes[..4], b"IVCK");
        let back = decode_checkpoint(&bytes, Path::new("mem")).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0].fingerprint(), ps.fingerprint());
        assert_eq!(back[0].params()[0].adam_m, ps.params()[0].adam_m);
        assert_eq!(back[0].params()[1].adam_v, ps.params()[1].adam_v);
        assert_eq!(back[0].step_count(), 1);
        assert_eq!(back[1].name(), "theta_U");
    }

    #[test]
    fn bad_magic_names_the_file() {
        let err = decode_checkpoint(b"NOPE\x01\x00\x00\x00", Path::new("x.ivck")).unwrap_err();
        assert!(err.to_string().contains("x.ivck"));
    }
}
