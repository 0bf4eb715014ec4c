//! Binary container for a Gaussian field.
//!
//! Layout (little-endian): magic `GSVR`, `u32` version, `u64` count `N`,
//! then `N×3` means, `N×3` log-scales, `N×4` quaternions and `N`
//! intensities, all `f32`.

use std::fs;
use std::io::{Cursor, Read};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::error::{Error, Result};
use crate::geom::GaussianField;

pub const MAGIC: &[u8; 4] = b"GSVR";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 16;

pub fn encode_field(field: &GaussianField) -> Vec<u8> {
    let n = field.count();
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * 11 * n);
    out.extend_from_slice(MAGIC);
    let put = |v: f64, out: &mut Vec<u8>| out.write_f32::<LittleEndian>(v as f32).unwrap();
    out.write_u32::<LittleEndian>(VERSION).unwrap();
    out.write_u64::<LittleEndian>(n as u64).unwrap();
    for v in field.means.iter().flatten() {
        put(*v, &mut out);
    }
    for v in field.log_scales.iter().flatten() {
        put(*v, &mut out);
    }
    for v in field.quats.iter().flatten() {
        put(*v, &mut out);
    }
    for v in &field.intensities {
        put(*v, &mut out);
    }
    out
}

pub fn decode_field(bytes: &[u8], path: &Path) -> Result<GaussianField> {
    let bad = |d: String| Error::format(path, d);
    if bytes.len() < HEADER_LEN || &bytes[..4] != MAGIC {
        return Err(bad("missing GSVR magic".into()));
    }
    let mut c = Cursor::new(&bytes[4..]);
    let version = c.read_u32::<LittleEndian>()?;
    if version != VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let n = c.read_u64::<LittleEndian>()?;
    let expected = (n as u128) * 44 + HEADER_LEN as u128;
    if bytes.len() as u128 != expected {
        return Err(bad(format!(
            "{} bytes for {n} primitives, expected {expected}",
            bytes.len()
        )));
    }
    let n = n as usize;
    let mut read = |len: usize| -> Result<Vec<f64>> {
        let mut raw = vec![0u8; 4 * len];
        c.read_exact(&mut raw)?;
        Ok(raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
            .collect())
    };
    let means = read(3 * n)?;
    let log_scales = read(3 * n)?;
    let quats = read(4 * n)?;
    let intensities = read(n)?;
    GaussianField::new(
        means.chunks_exact(3).map(|v| [v[0], v[1], v[2]]).collect(),
        log_scales.chunks_exact(3).map(|v| [v[0], v[1], v[2]]).collect(),
        quats.chunks_exact(4).map(|v| [v[0], v[1], v[2], v[3]]).collect(),
        intensities,
    )
}

pub fn write_field(field: &GaussianField, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_field(field))?;
    Ok(())
}

pub fn read_field(path: impl AsRef<Path>) -> Result<GaussianField> {
    let path = path.as_ref();
    decode_field(&fs::read(path)?, path)
}
