//! Synthetic ground truth and simulated thick-slice acquisitions.
//!
//! Simulated slices integrate the ground-truth raster against the slice PSF
//! by direct quadrature with trilinear interpolation. This path shares no
//! code with the closed-form renderer in [`crate::forward`].

use nalgebra::{Matrix3, Matrix4, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forward::{build_psf_with, PsfConvention, PsfModel};
use crate::geom::{axis_angle_quat, quat_mul, quat_to_rotation, VolumeGrid};
use crate::metrics::dilate_mask;
use crate::motion::{SliceStack, SliceState};

pub const DEFAULT_GT_SPACING: f64 = 0.5;

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Analytic brain-like phantom in a cube of half-width `half_fov` mm.
///
/// In ellipsoidal radius `r` (1 on the outer surface) the tissue classes
/// are, from outside in: background, a bright fluid rim, a dark cortical
/// band whose inner surface is folded, and white matter containing two
/// bright ventricles and two low-contrast deep nuclei. Class boundaries are
/// logistic with width `edge` in units of `r`.
#[derive(Clone, Debug, PartialEq)]
pub struct Phantom {
    pub half_fov: f64,
    pub radii: [f64; 3],
    pub edge: f64,
    pub fold_frequency: [f64; 2],
    pub fold_phase: [f64; 2],
    /// (center, radii) in units of `half_fov`.
    pub ventricles: [([f64; 3], [f64; 3]); 2],
    pub nuclei: [([f64; 3], [f64; 3]); 2],
}

pub const FLUID: f64 = 0.85;
pub const CORTEX: f64 = 0.45;
pub const WHITE: f64 = 0.65;
pub const VENTRICLE: f64 = 0.95;
pub const NUCLEUS: f64 = 0.58;

impl Phantom {
    pub fn new(size: usize, spacing: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut jitter = |s: f64| rng.random_range(-s..s);
        let tau = std::f64::consts::TAU;
        let fold_phase = [jitter(0.5) * tau, jitter(0.5) * tau];
        let fold_frequency = [7.0 + jitter(1.0).round(), 6.0 + jitter(1.0).round()];
        let dv = jitter(0.03);
        let dn = jitter(0.03);
        Phantom {
            half_fov: 0.5 * size as f64 * spacing,
            radii: [0.85, 0.72, 0.66],
            edge: 0.04,
            fold_frequency,
            fold_phase,
            ventricles: [
                ([-0.12, 0.05 + dv, 0.05], [0.07, 0.22, 0.10]),
                ([0.12, 0.05 + dv, 0.05], [0.07, 0.22, 0.10]),
            ],
            nuclei: [
                ([-0.28 + dn, -0.05, -0.08], [0.10, 0.13, 0.09]),
                ([0.28 + dn, -0.05, -0.08], [0.10, 0.13, 0.09]),
            ],
        }
    }

    /// Ellipsoidal radius of a world point (1 on the outer surface).
    pub fn radius(&self, p: [f64; 3]) -> f64 {
        (0..3)
            .map(|k| (p[k] / (self.half_fov * self.radii[k])).powi(2))
            .sum::<f64>()
            .sqrt()
    }

    pub fn inside(&self, p: [f64; 3]) -> bool {
        self.radius(p) <= 1.0
    }

    fn fold(&self, p: [f64; 3]) -> f64 {
        let u = [0, 1, 2].map(|k| p[k] / self.radii[k]);
        let theta = u[2].atan2((u[0] * u[0] + u[1] * u[1]).sqrt());
        let phi = u[1].atan2(u[0]);
        (self.fold_frequency[0] * theta + self.fold_phase[0]).sin()
            * (self.fold_frequency[1] * phi + self.fold_phase[1]).cos()
    }

    fn blob(&self, p: [f64; 3], (c, r): ([f64; 3], [f64; 3])) -> f64 {
        let d = (0..3)
            .map(|k| ((p[k] / self.half_fov - c[k]) / r[k]).powi(2))
            .sum::<f64>()
            .sqrt();
        sigmoid((1.0 - d) / (2.0 * self.edge))
    }

    /// Intensity at a world point; zero outside the outer ellipsoid.
    pub fn intensity(&self, p: [f64; 3]) -> f64 {
        let r = self.radius(p);
        if r > 1.0 {
            return 0.0;
        }
        let f = self.fold(p);
        let s = |x: f64| sigmoid(x / self.edge);
        let r_fluid = 0.90 - 0.015 * (1.0 + f);
        let r_white = 0.74 + 0.06 * f;
        let mut v = WHITE;
        v += (CORTEX - WHITE) * s(r - r_white);
        v += (FLUID - CORTEX) * s(r - r_fluid);
        for b in self.ventricles {
            v += (VENTRICLE - v) * self.blob(p, b);
        }
        for b in self.nuclei {
            v += (NUCLEUS - v) * self.blob(p, b);
        }
        v * s(0.955 - r)
    }
}

/// `size³` raster of [`Phantom`] at `DEFAULT_GT_SPACING`, centered on the
/// world origin, with the outer-ellipsoid mask.
pub fn make_phantom(size: usize, seed: u64) -> Result<VolumeGrid> {
    make_phantom_with(size, DEFAULT_GT_SPACING, seed)
}

/// Smallest phantom whose anatomy is resolved at all.
pub const MIN_PHANTOM_SIZE: usize = 32;

pub fn make_phantom_with(size: usize, spacing: f64, seed: u64) -> Result<VolumeGrid> {
    if size < MIN_PHANTOM_SIZE {
        return Err(Error::invalid(format!("phantom size {size} below {MIN_PHANTOM_SIZE}")));
    }
    let ph = Phantom::new(size, spacing, seed);
    let grid = VolumeGrid::centered([size; 3], spacing)?;
    let centers: Vec<[f64; 3]> = (0..grid.len()).map(|i| grid.voxel_center(i)).collect();
    let mask = centers.iter().map(|&p| ph.inside(p)).collect();
    let data = centers.par_iter().map(|&p| ph.intensity(p)).collect();
    let mut grid = grid.with_mask(mask)?;
    grid.data = data;
    Ok(grid)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MotionParams {
    /// Per-axis rotation bound in degrees.
    pub rot_max: f64,
    /// Per-axis translation bound in mm.
    pub trans_max: f64,
    pub seed: u64,
}

impl Default for MotionParams {
    fn default() -> Self {
        MotionParams {
            rot_max: 6.0,
            trans_max: 4.0,
            seed: 0,
        }
    }
}

/// Slice orientation of a stack: which world axis is the slice normal.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Orientation {
    Axial,
    Coronal,
    Sagittal,
}

impl Orientation {
    pub const ALL: [Orientation; 3] = [Orientation::Axial, Orientation::Coronal, Orientation::Sagittal];

    /// Proper rotation whose columns are the in-plane axes and the normal.
    pub fn rotation(self) -> Matrix3<f64> {
        let e = |k: usize| Vector3::ith(k, 1.0);
        let (a, b, c) = match self {
            Orientation::Axial => (e(0), e(1), e(2)),
            Orientation::Coronal => (e(2), e(0), e(1)),
            Orientation::Sagittal => (e(1), e(2), e(0)),
        };
        Matrix3::from_columns(&[a, b, c])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AcquisitionParams {
    pub inplane: f64,
    pub thickness: f64,
    /// Noise standard deviation as a fraction of the ground-truth range.
    pub noise_std: f64,
    pub orientations: Vec<Orientation>,
    pub psf: PsfConvention,
    /// When false, slices sample the ground truth at pixel centers.
    pub psf_enabled: bool,
    /// Stack masks are the ground-truth mask grown by this many voxels.
    pub mask_dilation: usize,
    pub seed: u64,
}

impl Default for AcquisitionParams {
    fn default() -> Self {
        AcquisitionParams {
            inplane: 0.5,
            thickness: 3.0,
            noise_std: 0.02,
            orientations: Orientation::ALL.to_vec(),
            psf: PsfConvention::default(),
            psf_enabled: true,
            mask_dilation: 4,
            seed: 0,
        }
    }
}

impl AcquisitionParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.inplane > 0.0) || !(self.thickness > 0.0) {
            return Err(Error::invalid("pixel size and thickness must be positive"));
        }
        if !(self.noise_std >= 0.0) {
            return Err(Error::invalid("noise_std must be non-negative"));
        }
        Ok(())
    }
}

/// Quadrature nodes and normalized weights for a truncated 1D Gaussian.
/// Nodes are spaced at most `max_step` mm and at most `sigma / 2`.
fn gauss_nodes(sigma: f64, max_step: f64) -> Vec<(f64, f64)> {
    if sigma <= 0.0 {
        return vec![(0.0, 1.0)];
    }
    let reach = 3.0 * sigma;
    let h = (sigma / 2.0).min(max_step);
    let half = (reach / h).ceil() as i64;
    let h = reach / half as f64;
    let raw: Vec<(f64, f64)> = (-half..=half)
        .map(|i| {
            let z = i as f64 * h;
            (z, (-0.5 * z * z / (sigma * sigma)).exp())
        })
        .collect();
    let total: f64 = raw.iter().map(|n| n.1).sum();
    raw.into_iter().map(|(z, w)| (z, w / total)).collect()
}

/// PSF-weighted average of `gt` around a world point, the PSF axes being the
/// columns of `rot`.
pub fn psf_integral(gt: &VolumeGrid, point: [f64; 3], rot: &Matrix3<f64>, psf: &PsfModel) -> f64 {
    let spacing = gt.spacing().iter().cloned().fold(f64::INFINITY, f64::min);
    let nodes = psf.sigma.map(|s| gauss_nodes(s, 0.5 * spacing));
    let to_index = gt.world_to_index_matrix();
    let lin = to_index.fixed_view::<3, 3>(0, 0) * rot;
    let base = to_index * nalgebra::Vector4::new(point[0], point[1], point[2], 1.0);
    let mut acc = 0.0;
    for &(a, wa) in &nodes[0] {
        for &(b, wb) in &nodes[1] {
            for &(c, wc) in &nodes[2] {
                let d = lin * Vector3::new(a, b, c);
                acc += wa * wb * wc * gt.trilinear([base[0] + d[0], base[1] + d[1], base[2] + d[2]]);
            }
        }
    }
    acc
}

/// One random rigid perturbation: rotations about x, y, z and a translation,
/// each uniform within the bounds.
fn draw_motion(rng: &mut impl Rng, m: &MotionParams) -> SliceState {
    let mut q = crate::geom::IDENTITY_QUAT;
    for axis in 0..3 {
        let angle = if m.rot_max > 0.0 {
            rng.random_range(-m.rot_max..=m.rot_max).to_radians()
        } else {
            0.0
        };
        let mut ax = [0.0; 3];
        ax[axis] = 1.0;
        q = quat_mul(&axis_angle_quat(ax, angle), &q);
    }
    let trans = std::array::from_fn(|_| {
        if m.trans_max > 0.0 {
            rng.random_range(-m.trans_max..=m.trans_max)
        } else {
            0.0
        }
    });
    SliceState {
        quat: q,
        trans,
        ..SliceState::default()
    }
}

/// Nominal stack geometry covering the ground-truth field of view.
pub fn stack_geometry(gt: &VolumeGrid, acq: &AcquisitionParams, orientation: Orientation) -> ([usize; 3], Matrix4<f64>) {
    let sp = gt.spacing();
    let fov = (0..3).map(|k| gt.dims[k] as f64 * sp[k]).fold(0.0, f64::max);
    let n_in = (fov / acq.inplane - 1e-9).ceil() as usize;
    let n_sl = (fov / acq.thickness - 1e-9).ceil() as usize;
    let rot = orientation.rotation();
    let scaled = rot * Matrix3::from_diagonal(&Vector3::new(acq.inplane, acq.inplane, acq.thickness));
    let center = gt.index_to_world([
        0.5 * (gt.dims[0] as f64 - 1.0),
        0.5 * (gt.dims[1] as f64 - 1.0),
        0.5 * (gt.dims[2] as f64 - 1.0),
    ]);
    let half = Vector3::new(
        0.5 * (n_in as f64 - 1.0),
        0.5 * (n_in as f64 - 1.0),
        0.5 * (n_sl as f64 - 1.0),
    );
    let t = Vector3::from(center) - scaled * half;
    let mut a = Matrix4::identity();
    a.fixed_view_mut::<3, 3>(0, 0).copy_from(&scaled);
    a.fixed_view_mut::<3, 1>(0, 3).copy_from(&t);
    ([n_in, n_in, n_sl], a)
}

/// A simulated stack together with its noise-free version and the true
/// per-slice motion.
#[derive(Clone, Debug)]
pub struct SimulatedStack {
    pub stack: SliceStack,
    pub clean: Vec<f64>,
    pub truth: Vec<SliceState>,
}

/// Simulates one stack. Slice `k` of the stack is acquired at
/// `R_k·x₀ + t_k` for nominal pixel positions `x₀`; the returned states are
/// exactly these `(R_k, t_k)`, i.e. the correction that undoes the motion.
pub fn simulate_stack(
    gt: &VolumeGrid,
    acq: &AcquisitionParams,
    motion: &MotionParams,
    orientation: Orientation,
    stack_index: u64,
) -> Result<SimulatedStack> {
    acq.validate()?;
    let sp = gt.spacing();
    if sp.iter().any(|&s| s > acq.inplane + 1e-12) {
        return Err(Error::invalid("ground truth is coarser than the slice pixels"));
    }
    let (dims, affine) = stack_geometry(gt, acq, orientation);
    let psf = if acq.psf_enabled {
        build_psf_with(acq.inplane, acq.thickness, &acq.psf)?
    } else {
        PsfModel::disabled()
    };
    let stack_rot = orientation.rotation();
    let [nx, ny, ns] = dims;

    let truth: Vec<SliceState> = (0..ns)
        .map(|k| {
            let mut rng = ChaCha8Rng::seed_from_u64(motion.seed);
            rng.set_stream(stack_index * 100_000 + k as u64);
            draw_motion(&mut rng, motion)
        })
        .collect();

    let lift = |i: usize, j: usize, k: usize| {
        let h = affine * nalgebra::Vector4::new(i as f64, j as f64, k as f64, 1.0);
        Vector3::new(h[0], h[1], h[2])
    };
    let clean: Vec<f64> = (0..ns)
        .into_par_iter()
        .flat_map_iter(|k| {
            let r = quat_to_rotation(&truth[k].quat).expect("unit quaternion");
            let t = Vector3::from(truth[k].trans);
            let eff = r * stack_rot;
            let mut out = Vec::with_capacity(nx * ny);
            for j in 0..ny {
                for i in 0..nx {
                    let x = r * lift(i, j, k) + t;
                    out.push(psf_integral(gt, [x[0], x[1], x[2]], &eff, &psf));
                }
            }
            out
        })
        .collect();

    let gt_mask = gt.mask.clone().unwrap_or_else(|| vec![true; gt.len()]);
    let grown = dilate_mask(&gt_mask, gt.dims, acq.mask_dilation);
    let to_index = gt.world_to_index_matrix();
    let mut mask = Vec::with_capacity(clean.len());
    for k in 0..ns {
        for j in 0..ny {
            for i in 0..nx {
                let p = lift(i, j, k);
                let g = to_index * nalgebra::Vector4::new(p[0], p[1], p[2], 1.0);
                let idx: Option<[usize; 3]> = (0..3)
                    .map(|a| {
                        let v = g[a].round();
                        (v >= 0.0 && (v as usize) < gt.dims[a]).then_some(v as usize)
                    })
                    .collect::<Option<Vec<_>>>()
                    .map(|v| [v[0], v[1], v[2]]);
                mask.push(idx.is_some_and(|[a, b, c]| grown[gt.index(a, b, c)]));
            }
        }
    }

    let range = crate::metrics::data_range(gt, &gt_mask);
    let noise_sd = acq.noise_std * range;
    let mut data = clean.clone();
    if noise_sd > 0.0 {
        let normal = Normal::new(0.0, noise_sd).map_err(|e| Error::invalid(e.to_string()))?;
        for (k, slice) in data.chunks_mut(nx * ny).enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(acq.seed);
            rng.set_stream(stack_index * 100_000 + k as u64);
            for v in slice {
                *v += normal.sample(&mut rng);
            }
        }
    }
    let stack = SliceStack::new(dims, affine, data, mask, acq.inplane, acq.thickness)?;
    Ok(SimulatedStack { stack, clean, truth })
}

/// One stack per configured orientation; truth states are concatenated in
/// stack order, matching [`crate::motion::init_states`].
pub fn simulate_stacks(
    gt: &VolumeGrid,
    acq: &AcquisitionParams,
    motion: &MotionParams,
) -> Result<Vec<SimulatedStack>> {
    acq.orientations
        .iter()
        .enumerate()
        .map(|(s, &o)| simulate_stack(gt, acq, motion, o, s as u64))
        .collect()
}
