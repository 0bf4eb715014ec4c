//! Minimal NIfTI-1 reader and writer.
//!
//! Reads single-file (`n+1`) and header/image pair (`ni1`) volumes in either
//! byte order with data types uint8, int16, float32 and float64. Writes
//! little-endian float32 single files with an sform affine.

use std::fs;
use std::io::Cursor;
use std::path::{Path, PathBuf};

use byteorder::{BigEndian, ByteOrder, LittleEndian, ReadBytesExt, WriteBytesExt};
use nalgebra::{Matrix3, Matrix4, Vector3};

use crate::error::{Error, Result};
use crate::geom::VolumeGrid;
use crate::motion::SliceStack;

const HEADER_SIZE: usize = 348;
const VOX_OFFSET: usize = 352;

const DT_UINT8: i16 = 2;
const DT_INT16: i16 = 4;
const DT_FLOAT32: i16 = 16;
const DT_FLOAT64: i16 = 64;

/// Linear map from stored intensities to normalized ones:
/// `normalized = (raw − offset) / scale`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Normalization {
    pub offset: f64,
    pub scale: f64,
}

impl Normalization {
    pub const IDENTITY: Normalization = Normalization {
        offset: 0.0,
        scale: 1.0,
    };

    pub fn apply(&self, v: f64) -> f64 {
        (v - self.offset) / self.scale
    }

    pub fn invert(&self, v: f64) -> f64 {
        v * self.scale + self.offset
    }
}

/// Intensity normalization applied on read.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum NormalizeMode {
    Identity,
    /// Map the given lower and upper percentiles to 0 and 1 (no clipping).
    Percentile { low: f64, high: f64 },
}

impl Default for NormalizeMode {
    fn default() -> Self {
        NormalizeMode::Percentile {
            low: 0.5,
            high: 99.5,
        }
    }
}

/// Linear-interpolated percentile (`q` in `[0, 100]`) of unsorted data.
pub fn percentile(values: &[f64], q: f64) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let pos = (q / 100.0).clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

fn normalization_for(values: &[f64], mode: NormalizeMode) -> Normalization {
    match mode {
        NormalizeMode::Identity => Normalization::IDENTITY,
        NormalizeMode::Percentile { low, high } => {
            let lo = percentile(values, low);
            let hi = percentile(values, high);
            let scale = if hi > lo { hi - lo } else { 1.0 };
            Normalization { offset: lo, scale }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NiftiImage {
    pub grid: VolumeGrid,
    pub normalization: Normalization,
}

struct Header {
    dims: [usize; 3],
    datatype: i16,
    vox_offset: usize,
    slope: f64,
    inter: f64,
    affine: Matrix4<f64>,
    big_endian: bool,
    single_file: bool,
}

fn unsupported(field: &'static str, detail: impl Into<String>) -> Error {
    Error::Unsupported {
        field,
        detail: detail.into(),
    }
}

fn parse_header<B: ByteOrder>(buf: &[u8], path: &Path, big_endian: bool) -> Result<Header> {
    let i16_at = |o: usize| B::read_i16(&buf[o..o + 2]);
    let f32_at = |o: usize| B::read_f32(&buf[o..o + 4]) as f64;

    let magic = &buf[344..348];
    let single_file = match magic {
        b"n+1\0" => true,
        b"ni1\0" => false,
        _ => return Err(Error::format(path, format!("bad magic {magic:?}"))),
    };

    let dim: Vec<i16> = (0..8).map(|k| i16_at(40 + 2 * k)).collect();
    let ndim = dim[0];
    if !(1..=7).contains(&ndim) {
        return Err(unsupported("dim", format!("dim[0] = {ndim}")));
    }
    let ndim = ndim as usize;
    if dim[1..=ndim].iter().any(|&d| d < 1) {
        return Err(unsupported("dim", format!("non-positive extent in {dim:?}")));
    }
    if ndim > 3 && dim[4..=ndim].iter().any(|&d| d != 1) {
        return Err(unsupported("dim", format!("only 3D volumes are supported, got {dim:?}")));
    }
    let ext = |k: usize| if k <= ndim { dim[k] as usize } else { 1 };
    let dims = [ext(1), ext(2), ext(3)];

    let datatype = i16_at(70);
    if ![DT_UINT8, DT_INT16, DT_FLOAT32, DT_FLOAT64].contains(&datatype) {
        return Err(unsupported("datatype", format!("code {datatype}")));
    }
    let mut pixdim = [0.0; 8];
    for (k, p) in pixdim.iter_mut().enumerate() {
        *p = f32_at(76 + 4 * k);
    }
    let vox_offset = f32_at(108);
    if !(vox_offset >= 0.0) || vox_offset.fract() != 0.0 {
        return Err(Error::format(path, format!("vox_offset {vox_offset}")));
    }
    let slope = f32_at(112);
    let inter = f32_at(116);
    let (slope, inter) = if slope == 0.0 || !slope.is_finite() {
        (1.0, 0.0)
    } else {
        (slope, if inter.is_finite() { inter } else { 0.0 })
    };

    let qform_code = i16_at(252);
    let sform_code = i16_at(254);
    let affine = if sform_code > 0 {
        let mut a = Matrix4::identity();
        for r in 0..3 {
            for c in 0..4 {
                a[(r, c)] = f32_at(280 + 16 * r + 4 * c);
            }
        }
        a
    } else if qform_code > 0 {
        let (b, c, d) = (f32_at(256), f32_at(260), f32_at(264));
        let a = (1.0 - (b * b + c * c + d * d)).max(0.0).sqrt();
        let r = Matrix3::new(
            a * a + b * b - c * c - d * d,
            2.0 * (b * c - a * d),
            2.0 * (b * d + a * c),
            2.0 * (b * c + a * d),
            a * a + c * c - b * b - d * d,
            2.0 * (c * d - a * b),
            2.0 * (b * d - a * c),
            2.0 * (c * d + a * b),
            a * a + d * d - c * c - b * b,
        );
        let qfac = if pixdim[0] < 0.0 { -1.0 } else { 1.0 };
        let s = Matrix3::from_diagonal(&Vector3::new(pixdim[1], pixdim[2], qfac * pixdim[3]));
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&(r * s));
        m[(0, 3)] = f32_at(268);
        m[(1, 3)] = f32_at(272);
        m[(2, 3)] = f32_at(276);
        m
    } else {
        let mut m = Matrix4::identity();
        for k in 0..3 {
            m[(k, k)] = if pixdim[k + 1] > 0.0 { pixdim[k + 1] } else { 1.0 };
        }
        m
    };

    Ok(Header {
        dims,
        datatype,
        vox_offset: vox_offset as usize,
        slope,
        inter,
        affine,
        big_endian,
        single_file,
    })
}

fn decode<B: ByteOrder>(bytes: &[u8], datatype: i16, n: usize) -> Vec<f64> {
    let mut c = Cursor::new(bytes);
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let v = match datatype {
            DT_UINT8 => c.read_u8().map(f64::from),
            DT_INT16 => c.read_i16::<B>().map(f64::from),
            DT_FLOAT32 => c.read_f32::<B>().map(f64::from),
            _ => c.read_f64::<B>(),
        };
        out.push(v.expect("length checked"));
    }
    out
}

fn bytes_per_voxel(datatype: i16) -> usize {
    match datatype {
        DT_UINT8 => 1,
        DT_INT16 => 2,
        DT_FLOAT32 => 4,
        _ => 8,
    }
}

fn companion_image(path: &Path) -> PathBuf {
    path.with_extension("img")
}

/// Reads a volume, applies `scl_slope`/`scl_inter`, then normalizes.
pub fn read_nifti(path: impl AsRef<Path>, mode: NormalizeMode) -> Result<NiftiImage> {
    let path = path.as_ref();
    let buf = fs::read(path)?;
    if buf.len() < HEADER_SIZE {
        return Err(Error::format(path, format!("only {} bytes", buf.len())));
    }
    let header = if LittleEndian::read_i32(&buf[0..4]) == HEADER_SIZE as i32 {
        parse_header::<LittleEndian>(&buf, path, false)?
    } else if BigEndian::read_i32(&buf[0..4]) == HEADER_SIZE as i32 {
        parse_header::<BigEndian>(&buf, path, true)?
    } else {
        return Err(Error::format(path, "sizeof_hdr is not 348"));
    };

    let n = header.dims.iter().product::<usize>();
    let data_buf;
    let bytes: &[u8] = if header.single_file {
        &buf
    } else {
        data_buf = fs::read(companion_image(path))?;
        &data_buf
    };
    let need = header.vox_offset + n * bytes_per_voxel(header.datatype);
    if bytes.len() < need {
        return Err(Error::format(path, format!("data needs {need} bytes, file has {}", bytes.len())));
    }
    let slice = &bytes[header.vox_offset..need];
    let raw = if header.big_endian {
        decode::<BigEndian>(slice, header.datatype, n)
    } else {
        decode::<LittleEndian>(slice, header.datatype, n)
    };
    let scaled: Vec<f64> = raw.iter().map(|v| v * header.slope + header.inter).collect();
    let normalization = normalization_for(&scaled, mode);
    let mut grid = VolumeGrid::new(header.dims, header.affine)?;
    grid.data = scaled.iter().map(|&v| normalization.apply(v)).collect();
    Ok(NiftiImage {
        grid,
        normalization,
    })
}

/// Writes `grid` as float32 with its affine as sform. When `denormalize` is
/// given, values are mapped back to the original intensity scale.
pub fn write_nifti(grid: &VolumeGrid, path: impl AsRef<Path>, denormalize: Option<&Normalization>) -> Result<()> {
    let bytes = encode_nifti(grid, denormalize)?;
    fs::write(path, bytes)?;
    Ok(())
}

pub fn encode_nifti(grid: &VolumeGrid, denormalize: Option<&Normalization>) -> Result<Vec<u8>> {
    if grid.dims.iter().any(|&d| d > i16::MAX as usize) {
        return Err(unsupported("dim", "extent exceeds i16"));
    }
    let mut h = vec![0u8; VOX_OFFSET];
    LittleEndian::write_i32(&mut h[0..4], HEADER_SIZE as i32);
    h[38] = b'r';
    let dim = [3, grid.dims[0] as i16, grid.dims[1] as i16, grid.dims[2] as i16, 1, 1, 1, 1];
    for (k, d) in dim.iter().enumerate() {
        LittleEndian::write_i16(&mut h[40 + 2 * k..], *d);
    }
    LittleEndian::write_i16(&mut h[70..], DT_FLOAT32);
    LittleEndian::write_i16(&mut h[72..], 32);
    let sp = grid.spacing();
    let pixdim = [1.0, sp[0], sp[1], sp[2], 0.0, 0.0, 0.0, 0.0];
    for (k, p) in pixdim.iter().enumerate() {
        LittleEndian::write_f32(&mut h[76 + 4 * k..], *p as f32);
    }
    LittleEndian::write_f32(&mut h[108..], VOX_OFFSET as f32);
    LittleEndian::write_f32(&mut h[112..], 1.0);
    LittleEndian::write_f32(&mut h[116..], 0.0);
    h[123] = 2; // mm
    LittleEndian::write_i16(&mut h[254..], 1);
    for r in 0..3 {
        for c in 0..4 {
            LittleEndian::write_f32(&mut h[280 + 16 * r + 4 * c..], grid.affine[(r, c)] as f32);
        }
    }
    h[344..348].copy_from_slice(b"n+1\0");

    let mut out = h;
    out.reserve(4 * grid.len());
    for &v in &grid.data {
        let v = denormalize.map_or(v, |n| n.invert(v));
        out.write_f32::<LittleEndian>(v as f32)?;
    }
    Ok(out)
}

/// Reads a slice stack: the third voxel axis is the slice axis. Voxels of
/// `mask_path` that are non-zero are kept; without a mask every voxel is.
pub fn read_stack(path: impl AsRef<Path>, mask_path: Option<&Path>, mode: NormalizeMode) -> Result<(SliceStack, Normalization)> {
    let img = read_nifti(path.as_ref(), mode)?;
    let mask = match mask_path {
        Some(m) => {
            let mimg = read_nifti(m, NormalizeMode::Identity)?;
            if mimg.grid.dims != img.grid.dims {
                return Err(Error::format(m, "mask shape differs from the stack"));
            }
            mimg.grid.data.iter().map(|&v| v != 0.0).collect()
        }
        None => vec![true; img.grid.len()],
    };
    let sp = img.grid.spacing();
    let stack = SliceStack::new(
        img.grid.dims,
        img.grid.affine,
        img.grid.data,
        mask,
        0.5 * (sp[0] + sp[1]),
        sp[2],
    )?;
    Ok((stack, img.normalization))
}

/// A stack as a volume; its mask as a separate 0/1 volume.
pub fn stack_volumes(stack: &SliceStack) -> Result<(VolumeGrid, VolumeGrid)> {
    let mut img = VolumeGrid::new(stack.dims, stack.affine)?;
    img.data = stack.data.clone();
    let mut mask = img.clone();
    mask.data = stack.mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
    Ok((img, mask))
}
