//! `HSC1` cube files: magic `HSC1`, little-endian `u32` H, W, C, then
//! `H·W·C` little-endian `f32` values in `(h, w, c)` order. Masks and
//! measurements are stored with `C = 1`.

use std::path::Path;

use super::{HsiCube, Mask, Measurement};
use crate::error::Result;
use crate::fileio::{push_f32s, write_atomic, ByteReader};

pub const HSC_MAGIC: &[u8; 4] = b"HSC1";

pub fn encode_hsc(height: usize, width: usize, channels: usize, data: &[f64]) -> Vec<u8> {
    debug_assert_eq!(data.len(), height * width * channels);
    let mut out = HSC_MAGIC.to_vec();
    for d in [height, width, channels] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    push_f32s(&mut out, data);
    out
}

/// Decodes to `(H, W, C, values)`.
pub fn decode_hsc(bytes: &[u8], path: &Path) -> Result<(usize, usize, usize, Vec<f64>)> {
    let mut r = ByteReader::new(bytes, path);
    if r.take(4)? != HSC_MAGIC {
        return Err(r.fail("missing HSC1 magic"));
    }
    let (h, w, c) = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
    if h == 0 || w == 0 || c == 0 {
        return Err(r.fail(format!("zero dimension in {h}x{w}x{c}")));
    }
    let n = h
        .checked_mul(w)
        .and_then(|v| v.checked_mul(c))
        .ok_or_else(|| r.fail("dimensions overflow"))?;
    let data = r.f32s(n)?;
    if !r.at_end() {
        return Err(r.fail("trailing bytes after payload"));
    }
    if data.iter().any(|v| !v.is_finite()) {
        return Err(r.fail("non-finite value in payload"));
    }
    Ok((h, w, c, data))
}

pub fn read_hsc(path: &Path) -> Result<(usize, usize, usize, Vec<f64>)> {
    let bytes = std::fs::read(path)?;
    decode_hsc(&bytes, path)
}

pub fn write_hsc(path: &Path, height: usize, width: usize, channels: usize, data: &[f64]) -> Result<()> {
    write_atomic(path, &encode_hsc(height, width, channels, data))
}

fn expect_single_channel(path: &Path, what: &str, c: usize) -> Result<()> {
    if c != 1 {
        return Err(crate::error::Error::Format {
            path: path.to_path_buf(),
            reason: format!("{what} files must have C = 1, found C = {c}"),
        });
    }
    Ok(())
}

impl HsiCube {
    pub fn read(path: &Path) -> Result<Self> {
        let (h, w, c, data) = read_hsc(path)?;
        Self::new(h, w, c, data)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_hsc(path, self.height, self.width, self.bands, &self.data)
    }
}

impl Mask {
    pub fn read(path: &Path) -> Result<Self> {
        let (h, w, c, data) = read_hsc(path)?;
        expect_single_channel(path, "mask", c)?;
        Self::new(h, w, data)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_hsc(path, self.height, self.width, 1, &self.data)
    }
}

impl Measurement {
    pub fn read(path: &Path) -> Result<Self> {
        let (h, w, c, data) = read_hsc(path)?;
        expect_single_channel(path, "measurement", c)?;
        Self::new(h, w, data)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_hsc(path, self.height, self.width, 1, &self.data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout_is_bit_exact() {
        let bytes = encode_hsc(1, 2, 1, &[1.0, -0.5]);
        let mut want = b"HSC1".to_vec();
        for v in [1u32, 2, 1] {
            want.extend_from_slice(&v.to_le_bytes());
        }
        want.extend_from_slice(&1.0f32.to_le_bytes());
        want.extend_from_slice(&(-0.5f32).to_le_bytes());
        assert_eq!(bytes, want);
    }

    #[test]
    fn rejects_malformed() {
        let p = Path::new("x.hsc");
        assert!(decode_hsc(b"HSC2\0\0\0\0", p).is_err());
        let mut bytes = encode_hsc(2, 2, 1, &[0.0; 4]);
        bytes.pop();
        assert!(decode_hsc(&bytes, p).is_err());
        let mut bytes = encode_hsc(1, 1, 1, &[0.0]);
        bytes.push(0);
        assert!(decode_hsc(&bytes, p).is_err());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("cube.hsc");
        let cube = HsiCube::from_fn(3, 2, 4, |h, w, b| (h + 2 * w) as f64 * 0.25 + b as f64);
        cube.write(&p).unwrap();
        assert_eq!(HsiCube::read(&p).unwrap(), cube);
        assert!(Mask::read(&p).is_err());
    }
}
