//! Reconstruction quality metrics over a voxel mask, and slice motion error.
//!
//! Conventions:
//! - the data range is `max − min` of the ground truth inside the mask;
//! - PSNR of identical volumes is reported as [`PSNR_CAP`];
//! - SSIM uses a 7³ Gaussian window (σ = 1.5 voxels) with `K1 = 0.01`,
//!   `K2 = 0.03`; windows are renormalized where they leave the volume.

use nalgebra::{Matrix3, UnitQuaternion, Vector3};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::geom::{GaussianField, VolumeGrid};
use crate::motion::SliceState;

pub const PSNR_CAP: f64 = 99.0;

const SSIM_RADIUS: usize = 3;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn check_pair(pred: &VolumeGrid, gt: &VolumeGrid, mask: &[bool]) -> Result<usize> {
    if pred.dims != gt.dims {
        return Err(Error::invalid(format!(
            "volume shapes differ: {:?} vs {:?}",
            pred.dims, gt.dims
        )));
    }
    if mask.len() != gt.len() {
        return Err(Error::invalid("mask size does not match the volumes"));
    }
    let n = mask.iter().filter(|&&m| m).count();
    if n == 0 {
        return Err(Error::invalid("metric mask is empty"));
    }
    Ok(n)
}

/// `max − min` of `gt` over the mask.
pub fn data_range(gt: &VolumeGrid, mask: &[bool]) -> f64 {
    let (lo, hi) = gt
        .data
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), (&v, _)| {
            (lo.min(v), hi.max(v))
        });
    hi - lo
}

pub fn mse(pred: &VolumeGrid, gt: &VolumeGrid, mask: &[bool]) -> Result<f64> {
    let n = check_pair(pred, gt, mask)?;
    let sum: f64 = pred
        .data
        .iter()
        .zip(&gt.data)
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|((p, g), _)| (p - g) * (p - g))
        .sum();
    Ok(sum / n as f64)
}

pub fn psnr(pred: &VolumeGrid, gt: &VolumeGrid, mask: &[bool]) -> Result<f64> {
    let err = mse(pred, gt, mask)?;
    let range = data_range(gt, mask);
    if err == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (range * range / err).log10()).min(PSNR_CAP))
}

/// Pearson correlation over the mask.
pub fn ncc(pred: &VolumeGrid, gt: &VolumeGrid, mask: &[bool]) -> Result<f64> {
    let n = check_pair(pred, gt, mask)? as f64;
    let pairs = || {
        pred.data
            .iter()
            .zip(&gt.data)
            .zip(mask)
            .filter(|(_, &m)| m)
            .map(|((&p, &g), _)| (p, g))
    };
    let (sp, sg) = pairs().fold((0.0, 0.0), |(a, b), (p, g)| (a + p, b + g));
    let (mp, mg) = (sp / n, sg / n);
    let (mut cov, mut vp, mut vg) = (0.0, 0.0, 0.0);
    for (p, g) in pairs() {
        cov += (p - mp) * (g - mg);
        vp += (p - mp) * (p - mp);
        vg += (g - mg) * (g - mg);
    }
    if vp <= 0.0 || vg <= 0.0 {
        return Err(Error::UndefinedMetric(
            "NCC needs non-zero variance in both volumes".into(),
        ));
    }
    Ok((cov / (vp.sqrt() * vg.sqrt())).clamp(-1.0, 1.0))
}

fn ssim_kernel() -> Vec<f64> {
    let r = SSIM_RADIUS as i64;
    let w: Vec<f64> = (-r..=r)
        .map(|d| (-(d * d) as f64 / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Separable weighted local mean with out-of-volume taps dropped and the
/// remaining weights renormalized.
fn local_mean(data: &[f64], dims: [usize; 3], kernel: &[f64]) -> Vec<f64> {
    let r = SSIM_RADIUS as i64;
    let mut cur = data.to_vec();
    let stride = [1, dims[0], dims[0] * dims[1]];
    for axis in 0..3 {
        let n = dims[axis] as i64;
        let mut next = vec![0.0; cur.len()];
        for (idx, out) in next.iter_mut().enumerate() {
            let c = ((idx / stride[axis]) % dims[axis]) as i64;
            let base = idx - (c as usize) * stride[axis];
            let (mut acc, mut wsum) = (0.0, 0.0);
            for d in -r..=r {
                let p = c + d;
                if p < 0 || p >= n {
                    continue;
                }
                let w = kernel[(d + r) as usize];
                acc += w * cur[base + p as usize * stride[axis]];
                wsum += w;
            }
            *out = acc / wsum;
        }
        cur = next;
    }
    cur
}

/// Mean luminance and contrast-structure terms of SSIM over the mask.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct SsimComponents {
    pub ssim: f64,
    pub luminance: f64,
    pub contrast_structure: f64,
}

pub fn ssim_components(
    pred: &VolumeGrid,
    gt: &VolumeGrid,
    mask: &[bool],
    range: f64,
) -> Result<SsimComponents> {
    let n = check_pair(pred, gt, mask)? as f64;
    let dims = gt.dims;
    let k = ssim_kernel();
    let x = &pred.data;
    let y = &gt.data;
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(y).map(|(a, b)| a * b).collect();
    let mx = local_mean(x, dims, &k);
    let my = local_mean(y, dims, &k);
    let exx = local_mean(&xx, dims, &k);
    let eyy = local_mean(&yy, dims, &k);
    let exy = local_mean(&xy, dims, &k);
    let c1 = (SSIM_K1 * range).powi(2);
    let c2 = (SSIM_K2 * range).powi(2);
    let (mut s, mut l, mut cs) = (0.0, 0.0, 0.0);
    for i in (0..mask.len()).filter(|&i| mask[i]) {
        let vx = (exx[i] - mx[i] * mx[i]).max(0.0);
        let vy = (eyy[i] - my[i] * my[i]).max(0.0);
        let cxy = exy[i] - mx[i] * my[i];
        let lum = (2.0 * mx[i] * my[i] + c1) / (mx[i] * mx[i] + my[i] * my[i] + c1);
        let con = (2.0 * cxy + c2) / (vx + vy + c2);
        s += lum * con;
        l += lum;
        cs += con;
    }
    Ok(SsimComponents {
        ssim: s / n,
        luminance: l / n,
        contrast_structure: cs / n,
    })
}

pub fn ssim_with_range(pred: &VolumeGrid, gt: &VolumeGrid, mask: &[bool], range: f64) -> Result<f64> {
    Ok(ssim_components(pred, gt, mask, range)?.ssim)
}

pub fn ssim(pred: &VolumeGrid, gt: &VolumeGrid, mask: &[bool]) -> Result<f64> {
    check_pair(pred, gt, mask)?;
    ssim_with_range(pred, gt, mask, data_range(gt, mask))
}

/// Mask grown by a `(2r+1)³` box; the voxels SSIM windows on `mask` read.
pub fn dilate_mask(mask: &[bool], dims: [usize; 3], r: usize) -> Vec<bool> {
    let mut cur = mask.to_vec();
    let stride = [1, dims[0], dims[0] * dims[1]];
    for axis in 0..3 {
        let mut next = cur.clone();
        for idx in 0..cur.len() {
            if !cur[idx] {
                continue;
            }
            let c = (idx / stride[axis]) % dims[axis];
            let lo = c.saturating_sub(r);
            let hi = (c + r).min(dims[axis] - 1);
            let base = idx - c * stride[axis];
            for p in lo..=hi {
                next[base + p * stride[axis]] = true;
            }
        }
        cur = next;
    }
    cur
}

pub fn window_support(mask: &[bool], dims: [usize; 3]) -> Vec<bool> {
    dilate_mask(mask, dims, SSIM_RADIUS)
}

/// One row of an evaluation table.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct MetricRow {
    pub psnr: f64,
    pub ssim: f64,
    pub ncc: f64,
}

pub fn evaluate_all(pred: &VolumeGrid, gt: &VolumeGrid, mask: &[bool]) -> Result<MetricRow> {
    Ok(MetricRow {
        psnr: psnr(pred, gt, mask)?,
        ssim: ssim(pred, gt, mask)?,
        ncc: ncc(pred, gt, mask)?,
    })
}

/// Rotation angle in radians, accurate near zero.
pub fn rotation_angle(r: &Matrix3<f64>) -> f64 {
    let s = Vector3::new(r[(2, 1)] - r[(1, 2)], r[(0, 2)] - r[(2, 0)], r[(1, 0)] - r[(0, 1)]).norm()
        * 0.5;
    let c = 0.5 * (r.trace() - 1.0);
    s.atan2(c)
}

fn log_so3(r: &Matrix3<f64>) -> Vector3<f64> {
    UnitQuaternion::from_matrix(r).scaled_axis()
}

fn exp_so3(v: &Vector3<f64>) -> Matrix3<f64> {
    *UnitQuaternion::from_scaled_axis(*v)
        .to_rotation_matrix()
        .matrix()
}

const COINCIDENT: f64 = 1e-12;

/// Weiszfeld iteration for a geometric median. `residual(c, i)` is the
/// tangent vector from the current estimate to sample `i`; `retract` moves
/// the estimate along a tangent step.
fn weiszfeld<C: Clone>(
    start: C,
    n: usize,
    residual: impl Fn(&C, usize) -> Vector3<f64>,
    retract: impl Fn(&C, &Vector3<f64>) -> C,
) -> C {
    let mut cur = start;
    for _ in 0..500 {
        let mut num = Vector3::zeros();
        let mut den = 0.0;
        let mut coincident = 0usize;
        for i in 0..n {
            let v = residual(&cur, i);
            let d = v.norm();
            if d < COINCIDENT {
                coincident += 1;
            } else {
                num += v / d;
                den += 1.0 / d;
            }
        }
        // Subgradient optimality at a sample point.
        if den == 0.0 || (coincident > 0 && num.norm() <= coincident as f64) {
            break;
        }
        let step = num / den;
        cur = retract(&cur, &step);
        if step.norm() < 1e-15 {
            break;
        }
    }
    cur
}

/// Sample minimizing the summed distance to all others.
fn medoid(n: usize, dist: impl Fn(usize, usize) -> f64) -> usize {
    (0..n)
        .map(|a| (a, (0..n).map(|b| dist(a, b)).sum::<f64>()))
        .min_by(|x, y| x.1.total_cmp(&y.1))
        .map(|(a, _)| a)
        .unwrap_or(0)
}

/// Per-slice motion error after removing the global gauge transform.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct MotionError {
    pub degrees: f64,
    pub mm: f64,
}

/// Rotation (degrees) and translation (mm) error of each slice pose.
///
/// A global rigid transform `G` applied to every estimated pose leaves the
/// data term unchanged, so it is removed first: `G` is the robust
/// (geometric-median) alignment of the estimated poses to the true ones,
/// fitted to rotations first and then to translations.
pub fn motion_error(estimated: &[SliceState], truth: &[SliceState]) -> Result<Vec<MotionError>> {
    if estimated.len() != truth.len() {
        return Err(Error::invalid(format!(
            "{} estimated vs {} true slice poses",
            estimated.len(),
            truth.len()
        )));
    }
    let n = truth.len();
    if n == 0 {
        return Ok(Vec::new());
    }
    let r_est: Vec<Matrix3<f64>> = estimated.iter().map(|s| s.rotation()).collect::<Result<_>>()?;
    let r_true: Vec<Matrix3<f64>> = truth.iter().map(|s| s.rotation()).collect::<Result<_>>()?;
    let (r_g, t_g) = gauge_from(estimated, truth, &r_est, &r_true);
    Ok((0..n)
        .map(|i| MotionError {
            degrees: rotation_angle(&(r_est[i] * (r_g * r_true[i]).transpose())).to_degrees(),
            mm: (Vector3::from(estimated[i].trans) - r_g * Vector3::from(truth[i].trans) - t_g).norm(),
        })
        .collect())
}

/// The global rigid transform `x ↦ R x + t` taking the true frame to the
/// estimated one, as removed by [`motion_error`].
pub fn pose_gauge(estimated: &[SliceState], truth: &[SliceState]) -> Result<(Matrix3<f64>, Vector3<f64>)> {
    if estimated.len() != truth.len() || truth.is_empty() {
        return Err(Error::invalid(format!(
            "{} estimated vs {} true slice poses",
            estimated.len(),
            truth.len()
        )));
    }
    let r_est: Vec<Matrix3<f64>> = estimated.iter().map(|s| s.rotation()).collect::<Result<_>>()?;
    let r_true: Vec<Matrix3<f64>> = truth.iter().map(|s| s.rotation()).collect::<Result<_>>()?;
    Ok(gauge_from(estimated, truth, &r_est, &r_true))
}

/// Maps a field reconstructed under `estimated` poses into the frame of the
/// `truth` poses, so that it can be compared voxel-wise with the reference.
pub fn align_field(field: &GaussianField, estimated: &[SliceState], truth: &[SliceState]) -> Result<GaussianField> {
    let (r, t) = pose_gauge(estimated, truth)?;
    let mut out = field.clone();
    out.transform_rigid(&r.transpose(), &(-(r.transpose() * t)));
    Ok(out)
}

fn gauge_from(
    estimated: &[SliceState],
    truth: &[SliceState],
    r_est: &[Matrix3<f64>],
    r_true: &[Matrix3<f64>],
) -> (Matrix3<f64>, Vector3<f64>) {
    let n = truth.len();
    let rel: Vec<Matrix3<f64>> = r_est.iter().zip(r_true).map(|(e, t)| e * t.transpose()).collect();
    let start = rel[medoid(n, |a, b| rotation_angle(&(rel[a].transpose() * rel[b])))];
    let r_g = weiszfeld(
        start,
        n,
        |c, i| log_so3(&(c.transpose() * rel[i])),
        |c, v| c * exp_so3(v),
    );
    let u: Vec<Vector3<f64>> = (0..n)
        .map(|i| Vector3::from(estimated[i].trans) - r_g * Vector3::from(truth[i].trans))
        .collect();
    let start = u[medoid(n, |a, b| (u[a] - u[b]).norm())];
    let t_g = weiszfeld(start, n, |c, i| u[i] - c, |c, v| c + v);
    (r_g, t_g)
}

pub fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.total_cmp(b));
    let n = values.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}
