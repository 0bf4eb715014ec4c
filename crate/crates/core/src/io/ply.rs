//! ASCII PLY point clouds of Gaussian fields.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::geom::{shrink_for_viz, GaussianField};

const PROPERTIES: [&str; 11] = [
    "x", "y", "z", "scale_0", "scale_1", "scale_2", "rot_w", "rot_x", "rot_y", "rot_z", "intensity",
];

/// One vertex per primitive: position, principal-axis lengths multiplied by
/// `gamma`, orientation quaternion and intensity.
pub fn encode_pointcloud(field: &GaussianField, gamma: f64) -> Result<String> {
    let f = shrink_for_viz(field, gamma)?;
    let mut s = String::new();
    s.push_str("ply\nformat ascii 1.0\n");
    writeln!(s, "comment principal axes scaled by {gamma}").unwrap();
    writeln!(s, "element vertex {}", f.count()).unwrap();
    for p in PROPERTIES {
        writeln!(s, "property double {p}").unwrap();
    }
    s.push_str("end_header\n");
    for j in 0..f.count() {
        let m = f.means[j];
        let sc = f.scales(j);
        let q = f.quats[j];
        writeln!(
            s,
            "{} {} {} {} {} {} {} {} {} {} {}",
            m[0], m[1], m[2], sc[0], sc[1], sc[2], q[0], q[1], q[2], q[3], f.intensities[j]
        )
        .unwrap();
    }
    Ok(s)
}

pub fn export_pointcloud(field: &GaussianField, gamma: f64, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_pointcloud(field, gamma)?)?;
    Ok(())
}

/// Reads a file written by [`export_pointcloud`] back into a field, taking
/// the stored axis lengths as scales.
pub fn read_pointcloud(path: impl AsRef<Path>) -> Result<GaussianField> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    let bad = |d: &str| Error::format(path, d.to_string());
    let (head, body) = text.split_once("end_header\n").ok_or_else(|| bad("no end_header"))?;
    let count: usize = head
        .lines()
        .find_map(|l| l.strip_prefix("element vertex "))
        .and_then(|n| n.trim().parse().ok())
        .ok_or_else(|| bad("no vertex count"))?;
    let mut means = Vec::with_capacity(count);
    let mut log_scales = Vec::with_capacity(count);
    let mut quats = Vec::with_capacity(count);
    let mut intensities = Vec::with_capacity(count);
    for line in body.lines().take(count) {
        let v: Vec<f64> = line
            .split_whitespace()
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| bad("unparsable vertex"))?;
        if v.len() != PROPERTIES.len() {
            return Err(bad("wrong number of vertex properties"));
        }
        means.push([v[0], v[1], v[2]]);
        log_scales.push([v[3].ln(), v[4].ln(), v[5].ln()]);
        quats.push([v[6], v[7], v[8], v[9]]);
        intensities.push(v[10]);
    }
    if means.len() != count {
        return Err(bad("fewer vertices than declared"));
    }
    GaussianField::new(means, log_scales, quats, intensities)
}
