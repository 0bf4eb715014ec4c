//! Slice acquisition forward model.
//!
//! The PSF is an anisotropic Gaussian defined in slice coordinates. Because a
//! Gaussian convolved with a Gaussian is a Gaussian, blurring a primitive by
//! the PSF only adds covariances, so the observed intensity is the normalized
//! weighted sum evaluated with `Σ_j + R Σ_PSF Rᵀ` in place of `Σ_j`.
//!
//! [`mc_oracle_render`] integrates the same acquisition by stratified Monte
//! Carlo sampling of the PSF and exists to check the closed form.

use nalgebra::Matrix3;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::geom::{gaussian_weight, normalized_sum, sub3, GaussianField, Sym3};
use crate::knn::Neighbors;

/// `FWHM = 2·sqrt(2·ln 2)·σ`.
pub fn fwhm_to_sigma(fwhm: f64) -> f64 {
    fwhm / (2.0 * (2.0 * std::f64::consts::LN_2).sqrt())
}

/// Mapping from acquisition geometry to PSF widths.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PsfConvention {
    /// In-plane FWHM as a multiple of the pixel size.
    pub inplane_fwhm_factor: f64,
    /// Through-plane FWHM as a multiple of the slice thickness.
    pub through_fwhm_factor: f64,
}

impl Default for PsfConvention {
    fn default() -> Self {
        PsfConvention {
            inplane_fwhm_factor: 1.2,
            through_fwhm_factor: 1.0,
        }
    }
}

/// Gaussian PSF with standard deviations along the slice axes
/// `(in-plane x, in-plane y, through-plane)`, in mm.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PsfModel {
    pub sigma: [f64; 3],
}

impl PsfModel {
    pub fn from_sigmas(sigma: [f64; 3]) -> Result<Self> {
        if sigma.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
            return Err(Error::invalid(format!("PSF widths {sigma:?} must be >= 0")));
        }
        Ok(PsfModel { sigma })
    }

    /// The zero-width PSF: observations sample the field directly.
    pub fn disabled() -> Self {
        PsfModel { sigma: [0.0; 3] }
    }

    pub fn is_disabled(&self) -> bool {
        self.sigma == [0.0; 3]
    }

    /// `Σ_PSF` in slice coordinates.
    pub fn covariance(&self) -> Sym3 {
        Sym3::diag(self.sigma.map(|s| s * s))
    }

    /// `R Σ_PSF Rᵀ` for a slice whose axes are the columns of `r`.
    pub fn world_covariance(&self, r: &Matrix3<f64>) -> Sym3 {
        self.covariance().congruence(r)
    }
}

pub fn build_psf(inplane_res: f64, thickness: f64) -> Result<PsfModel> {
    build_psf_with(inplane_res, thickness, &PsfConvention::default())
}

pub fn build_psf_with(inplane_res: f64, thickness: f64, conv: &PsfConvention) -> Result<PsfModel> {
    if !(inplane_res > 0.0) || !(thickness > 0.0) {
        return Err(Error::invalid(format!(
            "PSF needs positive resolution and thickness, got {inplane_res} and {thickness}"
        )));
    }
    let s_in = fwhm_to_sigma(conv.inplane_fwhm_factor * inplane_res);
    let s_th = fwhm_to_sigma(conv.through_fwhm_factor * thickness);
    PsfModel::from_sigmas([s_in, s_in, s_th])
}

/// `Σ_obs = Σ_j + R Σ_PSF Rᵀ`.
pub fn convolve_covariance(cov: &Sym3, rotation: &Matrix3<f64>, psf: &PsfModel) -> Sym3 {
    cov.add(&psf.world_covariance(rotation))
}

/// Normalized weighted sum at `x` with every covariance widened by
/// `psf_world`. Covariance inverses are formed on the fly.
#[inline]
pub(crate) fn render_point(
    x: [f64; 3],
    psf_world: &Sym3,
    ids: &[u32],
    field: &GaussianField,
    covs: &[Sym3],
    delta: f64,
) -> Result<f64> {
    let mut num = 0.0;
    let mut den = 0.0;
    for &id in ids {
        let j = id as usize;
        let inv = covs[j].add(psf_world).inverse().ok_or_else(|| Error::Degenerate {
            index: j,
            detail: "observed covariance lost positive definiteness".into(),
        })?;
        let (w, _, _) = gaussian_weight(&inv, sub3(x, field.means[j]));
        num += field.intensities[j] * w;
        den += w;
    }
    Ok(num / (den + delta))
}

/// Observed intensity `σ_i · V_obs(x)` at motion-corrected points.
///
/// `slice_rotations[p]` is the effective rotation of the slice that point `p`
/// belongs to; it orients the PSF.
pub fn render_observed(
    points: &[[f64; 3]],
    slice_rotations: &[Matrix3<f64>],
    field: &GaussianField,
    psf: &PsfModel,
    neighbors: &Neighbors,
    sigma_slice: &[f64],
    delta: f64,
) -> Result<Vec<f64>> {
    let m = points.len();
    if slice_rotations.len() != m || sigma_slice.len() != m {
        return Err(Error::invalid(format!(
            "{m} points but {} rotations and {} slice scalars",
            slice_rotations.len(),
            sigma_slice.len()
        )));
    }
    neighbors.check(m, field.count())?;
    let covs = field.covariances()?;
    points
        .par_iter()
        .enumerate()
        .map(|(p, x)| {
            let psf_world = psf.world_covariance(&slice_rotations[p]);
            Ok(sigma_slice[p] * render_point(*x, &psf_world, neighbors.row(p), field, &covs, delta)?)
        })
        .collect()
}

/// Latin-hypercube samples of `N(point, R Σ_PSF Rᵀ)`, stratified along the
/// PSF principal axes.
pub fn stratified_psf_samples(
    point: [f64; 3],
    rotation: &Matrix3<f64>,
    psf: &PsfModel,
    n_samples: usize,
    seed: u64,
) -> Vec<[f64; 3]> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    let n = n_samples.max(1);
    let mut z = vec![[0.0f64; 3]; n];
    let mut strata: Vec<usize> = (0..n).collect();
    for axis in 0..3 {
        strata.shuffle(&mut rng);
        for (s, zs) in z.iter_mut().enumerate() {
            let u = (strata[s] as f64 + rng.random::<f64>()) / n as f64;
            let u = u.clamp(f64::EPSILON, 1.0 - f64::EPSILON);
            zs[axis] = normal.inverse_cdf(u) * psf.sigma[axis];
        }
    }
    z.into_iter()
        .map(|zs| {
            let mut y = point;
            for (r, yr) in y.iter_mut().enumerate() {
                *yr += rotation[(r, 0)] * zs[0] + rotation[(r, 1)] * zs[1] + rotation[(r, 2)] * zs[2];
            }
            y
        })
        .collect()
}

/// Monte-Carlo estimate of `(V * φ)(point)`: the mean of the PSF-free field
/// over stratified PSF samples, each evaluated on the neighbor list `ids`.
#[allow(clippy::too_many_arguments)]
pub fn mc_oracle_render(
    point: [f64; 3],
    rotation: &Matrix3<f64>,
    field: &GaussianField,
    psf: &PsfModel,
    ids: &[u32],
    n_samples: usize,
    seed: u64,
    delta: f64,
) -> Result<f64> {
    if n_samples == 0 {
        return Err(Error::invalid("the oracle needs at least one sample"));
    }
    let covs = field.covariances()?;
    let mut inv = vec![Sym3::ZERO; field.count()];
    for &id in ids {
        let j = id as usize;
        inv[j] = covs[j].inverse().ok_or_else(|| Error::Degenerate {
            index: j,
            detail: "covariance is not invertible".into(),
        })?;
    }
    let samples = stratified_psf_samples(point, rotation, psf, n_samples, seed);
    let total: f64 = samples
        .iter()
        .map(|y| normalized_sum(*y, ids, field, &inv, delta))
        .sum();
    Ok(total / n_samples as f64)
}
