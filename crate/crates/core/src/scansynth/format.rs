//! Binary observation files ("PUDF").

use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::Point3;

pub const PUDF_MAGIC: &[u8; 4] = b"PUDF";
pub const PUDF_VERSION: u32 = 1;
/// View id used for complete ground-truth clouds.
pub const GT_VIEW: u32 = u32::MAX;

/// One synthesized partial scan.
#[derive(Clone, Debug, PartialEq)]
pub struct PartialObservation {
    pub instance_id: u32,
    pub view_id: u32,
    pub camera: Point3,
    pub surface: Vec<Point3>,
    /// `(x, y, z, d)` with `d ≥ 0` the distance to the seen surface.
    pub udf: Vec<[f64; 4]>,
}

pub fn encode_observation(o: &PartialObservation) -> Vec<u8> {
    let mut b = Vec::with_capacity(32 + o.surface.len() * 24 + o.udf.len() * 32);
    b.extend_from_slice(PUDF_MAGIC);
    b.extend_from_slice(&PUDF_VERSION.to_le_bytes());
    b.extend_from_slice(&o.instance_id.to_le_bytes());
    b.extend_from_slice(&o.view_id.to_le_bytes());
    for c in o.camera {
        b.extend_from_slice(&c.to_le_bytes());
    }
    b.extend_from_slice(&(o.surface.len() as u32).to_le_bytes());
    for p in &o.surface {
        for c in p {
            b.extend_from_slice(&c.to_le_bytes());
        }
    }
    b.extend_from_slice(&(o.udf.len() as u32).to_le_bytes());
    for s in &o.udf {
        for c in s {
            b.extend_from_slice(&c.to_le_bytes());
        }
    }
    b
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::format(self.path, "truncated observation file"));
        }
        let s = &self.buf[self.pos..self.pos + n];
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

pub fn decode_observation(bytes: &[u8], path: &Path) -> Result<PartialObservation> {
    let mut r = Reader { buf: bytes, pos: 0, path };
    if r.take(4)? != PUDF_MAGIC {
        return Err(Error::format(path, "bad magic (expected PUDF)"));
    }
    let version = r.u32()?;
    if version != PUDF_VERSION {
        return Err(Error::format(path, format!("unsupported PUDF version {version}")));
    }
    let instance_id = r.u32()?;
    let view_id = r.u32()?;
    let camera = [r.f64()?, r.f64()?, r.f64()?];
    let n = r.u32()? as usize;
    let mut surface = Vec::with_capacity(n.min(1 << 24));
    for _ in 0..n {
        surface.push([r.f64()?, r.f64()?, r.f64()?]);
    }
    let m = r.u32()? as usize;
    let mut udf = Vec::with_capacity(m.min(1 << 24));
    for _ in 0..m {
        udf.push([r.f64()?, r.f64()?, r.f64()?, r.f64()?]);
    }
    if r.pos != bytes.len() {
        return Err(Error::format(path, "trailing bytes after observation"));
    }
    Ok(PartialObservation {
        instance_id,
        view_id,
        camera,
        surface,
        udf,
    })
}

pub fn write_observation(path: &Path, o: &PartialObservation) -> Result<()> {
    std::fs::write(path, encode_observation(o)).map_err(|e| Error::io(path, e))
}

pub fn read_observation(path: &Path) -> Result<PartialObservation> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_observation(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_bad_magic() {
        let o = PartialObservation {
            instance_id: 3,
            view_id: 7,
            camera: [0.0, 2.0, 0.0],
            surface: vec![[0.1, 0.2, 0.3]],
            udf: vec![[0.0, 0.0, 0.0, 0.5]],
        };
        let bytes = encode_observation(&o);
        let p = Path::new("x.pudf");
        assert_eq!(decode_observation(&bytes, p).unwrap(), o);
        let mut bad = bytes.clone();
        bad[0] = b'Q';
        let err = decode_observation(&bad, p).unwrap_err().to_string();
        assert!(err.contains("x.pudf") && err.contains("magic"), "{err}");
        assert!(decode_observation(&bytes[..bytes.len() - 1], p).is_err());
    }
}
