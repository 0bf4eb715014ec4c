//! 8-bit grayscale PNG montages of volume slices.
//!
//! Slices perpendicular to the chosen axis are tiled row-major on a grid of
//! `cols = ⌈√n⌉` columns and `rows = ⌈n / cols⌉` rows. Intensities are
//! windowed to the 0.5–99.5 percentile range of the masked voxels.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use crate::error::{Error, Result};
use crate::geom::VolumeGrid;
use crate::io::nifti::percentile;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    X,
    Y,
    Z,
}

impl std::str::FromStr for Axis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "x" => Ok(Axis::X),
            "y" => Ok(Axis::Y),
            "z" => Ok(Axis::Z),
            _ => Err(Error::invalid(format!("axis `{s}` is not one of x, y, z"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Montage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
    pub window: (f64, f64),
}

pub fn tiling(n: usize) -> (usize, usize) {
    let cols = (n as f64).sqrt().ceil() as usize;
    (cols, n.div_ceil(cols.max(1)))
}

/// Gray level of `v` under window `(lo, hi)`; a flat window maps to mid-gray.
pub fn window_level(v: f64, lo: f64, hi: f64) -> u8 {
    if !(hi > lo) {
        return 128;
    }
    (255.0 * ((v - lo) / (hi - lo)).clamp(0.0, 1.0)).round() as u8
}

pub fn render_montage(grid: &VolumeGrid, axis: Axis) -> Montage {
    let [nx, ny, nz] = grid.dims;
    // (slice count, tile width, tile height, voxel index of (slice, u, v))
    let (n, w, h): (usize, usize, usize) = match axis {
        Axis::X => (nx, ny, nz),
        Axis::Y => (ny, nx, nz),
        Axis::Z => (nz, nx, ny),
    };
    let at = |s: usize, u: usize, v: usize| match axis {
        Axis::X => grid.index(s, u, v),
        Axis::Y => grid.index(u, s, v),
        Axis::Z => grid.index(u, v, s),
    };
    let masked: Vec<f64> = (0..grid.len())
        .filter(|&i| grid.is_masked(i))
        .map(|i| grid.data[i])
        .collect();
    let lo = percentile(&masked, 0.5);
    let hi = percentile(&masked, 99.5);
    let (cols, rows) = tiling(n);
    let width = cols * w;
    let height = rows * h;
    let fill = if hi > lo { 0 } else { 128 };
    let mut pixels = vec![fill; width * height];
    for s in 0..n {
        let (tr, tc) = (s / cols, s % cols);
        for v in 0..h {
            for u in 0..w {
                let px = (tr * h + v) * width + tc * w + u;
                pixels[px] = window_level(grid.data[at(s, u, v)], lo, hi);
            }
        }
    }
    Montage {
        width,
        height,
        pixels,
        window: (lo, hi),
    }
}

pub fn export_slices(grid: &VolumeGrid, axis: Axis, path: impl AsRef<Path>) -> Result<Montage> {
    let m = render_montage(grid, axis);
    let file = BufWriter::new(File::create(path.as_ref())?);
    let mut enc = png::Encoder::new(file, m.width as u32, m.height as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::Eight);
    let to_err = |e: png::EncodingError| Error::Io(std::io::Error::other(e));
    let mut writer = enc.write_header().map_err(to_err)?;
    writer.write_image_data(&m.pixels).map_err(to_err)?;
    writer.finish().map_err(to_err)?;
    Ok(m)
}
