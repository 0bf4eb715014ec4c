//! Rotation and covariance algebra, the Gaussian field, and PSF-free field
//! evaluation.
//!
//! Quaternions are stored as `[w, x, y, z]` and are normalized inside every
//! consumer, so a stored quaternion never has to be unit length.

use nalgebra::{Matrix3, Matrix4, Vector3, Vector4};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::knn::{NeighborIndex, Neighbors};

/// Denominator stabilizer of the normalized weighted sum.
pub const DEFAULT_DELTA: f64 = 1e-8;

/// Smallest admissible covariance eigenvalue (mm²).
pub const EIGEN_FLOOR: f64 = 1e-6;

/// Exponents below this are clamped before `exp`.
pub const EXPONENT_FLOOR: f64 = -80.0;

pub type Quat = [f64; 4];

pub const IDENTITY_QUAT: Quat = [1.0, 0.0, 0.0, 0.0];

/// Symmetric 3×3 matrix stored as its upper triangle.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Sym3 {
    pub xx: f64,
    pub xy: f64,
    pub xz: f64,
    pub yy: f64,
    pub yz: f64,
    pub zz: f64,
}

impl Sym3 {
    pub const ZERO: Sym3 = Sym3 {
        xx: 0.0,
        xy: 0.0,
        xz: 0.0,
        yy: 0.0,
        yz: 0.0,
        zz: 0.0,
    };

    pub fn diag(d: [f64; 3]) -> Self {
        Sym3 {
            xx: d[0],
            yy: d[1],
            zz: d[2],
            ..Sym3::ZERO
        }
    }

    /// Symmetric part of `m`.
    pub fn from_matrix(m: &Matrix3<f64>) -> Self {
        Sym3 {
            xx: m[(0, 0)],
            xy: 0.5 * (m[(0, 1)] + m[(1, 0)]),
            xz: 0.5 * (m[(0, 2)] + m[(2, 0)]),
            yy: m[(1, 1)],
            yz: 0.5 * (m[(1, 2)] + m[(2, 1)]),
            zz: m[(2, 2)],
        }
    }

    pub fn to_matrix(&self) -> Matrix3<f64> {
        Matrix3::new(
            self.xx, self.xy, self.xz, self.xy, self.yy, self.yz, self.xz, self.yz, self.zz,
        )
    }

    /// `a aᵀ` scaled by `s`.
    #[inline]
    pub fn outer(a: [f64; 3], s: f64) -> Self {
        Sym3 {
            xx: s * a[0] * a[0],
            xy: s * a[0] * a[1],
            xz: s * a[0] * a[2],
            yy: s * a[1] * a[1],
            yz: s * a[1] * a[2],
            zz: s * a[2] * a[2],
        }
    }

    #[inline]
    pub fn add(&self, o: &Sym3) -> Sym3 {
        Sym3 {
            xx: self.xx + o.xx,
            xy: self.xy + o.xy,
            xz: self.xz + o.xz,
            yy: self.yy + o.yy,
            yz: self.yz + o.yz,
            zz: self.zz + o.zz,
        }
    }

    #[inline]
    pub fn add_assign(&mut self, o: &Sym3) {
        *self = self.add(o);
    }

    pub fn trace(&self) -> f64 {
        self.xx + self.yy + self.zz
    }

    #[inline]
    pub fn det(&self) -> f64 {
        self.xx * (self.yy * self.zz - self.yz * self.yz)
            - self.xy * (self.xy * self.zz - self.yz * self.xz)
            + self.xz * (self.xy * self.yz - self.yy * self.xz)
    }

    /// Inverse via cofactors. Returns `None` when the determinant is not
    /// strictly positive.
    #[inline]
    pub fn inverse(&self) -> Option<Sym3> {
        let c_xx = self.yy * self.zz - self.yz * self.yz;
        let c_xy = self.xz * self.yz - self.xy * self.zz;
        let c_xz = self.xy * self.yz - self.xz * self.yy;
        let det = self.xx * c_xx + self.xy * c_xy + self.xz * c_xz;
        if !(det > 0.0) || !det.is_finite() {
            return None;
        }
        let inv = 1.0 / det;
        Some(Sym3 {
            xx: c_xx * inv,
            xy: c_xy * inv,
            xz: c_xz * inv,
            yy: (self.xx * self.zz - self.xz * self.xz) * inv,
            yz: (self.xy * self.xz - self.xx * self.yz) * inv,
            zz: (self.xx * self.yy - self.xy * self.xy) * inv,
        })
    }

    #[inline]
    pub fn mul_vec(&self, v: [f64; 3]) -> [f64; 3] {
        [
            self.xx * v[0] + self.xy * v[1] + self.xz * v[2],
            self.xy * v[0] + self.yy * v[1] + self.yz * v[2],
            self.xz * v[0] + self.yz * v[1] + self.zz * v[2],
        ]
    }

    /// `R S Rᵀ`.
    pub fn congruence(&self, r: &Matrix3<f64>) -> Sym3 {
        Sym3::from_matrix(&(r * self.to_matrix() * r.transpose()))
    }

    /// Eigenvalues in ascending order.
    pub fn eigenvalues(&self) -> [f64; 3] {
        let eig = self.to_matrix().symmetric_eigenvalues();
        let mut v = [eig[0], eig[1], eig[2]];
        v.sort_by(|a, b| a.total_cmp(b));
        v
    }
}

/// Symmetric positive-definite covariance (mm²).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Covariance3(pub Sym3);

impl Covariance3 {
    pub fn matrix(&self) -> Matrix3<f64> {
        self.0.to_matrix()
    }

    pub fn trace(&self) -> f64 {
        self.0.trace()
    }
}

#[inline]
pub fn quat_norm(q: &Quat) -> f64 {
    (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt()
}

/// Rotation matrix of `q / ‖q‖`.
pub fn quat_to_rotation(q: &Quat) -> Result<Matrix3<f64>> {
    let n = quat_norm(q);
    if !(n > 0.0) || !n.is_finite() {
        return Err(Error::invalid(format!(
            "quaternion {q:?} has zero or non-finite norm"
        )));
    }
    Ok(unit_quat_to_rotation(&[q[0] / n, q[1] / n, q[2] / n, q[3] / n]))
}

#[inline]
pub(crate) fn unit_quat_to_rotation(q: &Quat) -> Matrix3<f64> {
    let [w, x, y, z] = *q;
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// Quaternion `[w, x, y, z]` (with `w ≥ 0`) of a proper rotation matrix.
pub fn rotation_to_quat(r: &Matrix3<f64>) -> Quat {
    let uq = nalgebra::UnitQuaternion::from_matrix(r);
    let q = uq.quaternion();
    let out = [q.w, q.i, q.j, q.k];
    if out[0] < 0.0 {
        out.map(|c| -c)
    } else {
        out
    }
}

/// Rotation by `angle` radians about `axis` (need not be unit length).
pub fn axis_angle_quat(axis: [f64; 3], angle: f64) -> Quat {
    let n = (axis[0] * axis[0] + axis[1] * axis[1] + axis[2] * axis[2]).sqrt();
    let (s, c) = (0.5 * angle).sin_cos();
    [c, s * axis[0] / n, s * axis[1] / n, s * axis[2] / n]
}

/// Hamilton product `a ⊗ b`, i.e. the rotation `R(a) R(b)`.
pub fn quat_mul(a: &Quat, b: &Quat) -> Quat {
    [
        a[0] * b[0] - a[1] * b[1] - a[2] * b[2] - a[3] * b[3],
        a[0] * b[1] + a[1] * b[0] + a[2] * b[3] - a[3] * b[2],
        a[0] * b[2] - a[1] * b[3] + a[2] * b[0] + a[3] * b[1],
        a[0] * b[3] + a[1] * b[2] - a[2] * b[1] + a[3] * b[0],
    ]
}

/// Pulls a gradient with respect to `R(q/‖q‖)` back to the raw quaternion.
pub fn quat_rotation_vjp(q: &Quat, d_rot: &Matrix3<f64>) -> Quat {
    let n = quat_norm(q);
    let [w, x, y, z] = [q[0] / n, q[1] / n, q[2] / n, q[3] / n];
    let g = |r: usize, c: usize| d_rot[(r, c)];

    let dw = 2.0
        * (-z * g(0, 1) + y * g(0, 2) + z * g(1, 0) - x * g(1, 2) - y * g(2, 0) + x * g(2, 1));
    let dx = 2.0
        * (y * g(0, 1) + z * g(0, 2) + y * g(1, 0) - 2.0 * x * g(1, 1) - w * g(1, 2)
            + z * g(2, 0)
            + w * g(2, 1)
            - 2.0 * x * g(2, 2));
    let dy = 2.0
        * (-2.0 * y * g(0, 0) + x * g(0, 1) + w * g(0, 2) + x * g(1, 0) + z * g(1, 2)
            - w * g(2, 0)
            + z * g(2, 1)
            - 2.0 * y * g(2, 2));
    let dz = 2.0
        * (-2.0 * z * g(0, 0) - w * g(0, 1) + x * g(0, 2) + w * g(1, 0) - 2.0 * z * g(1, 1)
            + y * g(1, 2)
            + x * g(2, 0)
            + y * g(2, 1));

    // Project out the radial direction and undo the normalization.
    let dq = Vector4::new(dw, dx, dy, dz);
    let u = Vector4::new(w, x, y, z);
    let t = (dq - u * u.dot(&dq)) / n;
    [t[0], t[1], t[2], t[3]]
}

/// `Σ = R diag(exp(2·log_s)) Rᵀ`.
pub fn build_covariance(log_s: &[f64; 3], q: &Quat) -> Result<Covariance3> {
    let r = quat_to_rotation(q)?;
    Ok(Covariance3(covariance_from_rotation(log_s, &r)))
}

#[inline]
pub(crate) fn covariance_from_rotation(log_s: &[f64; 3], r: &Matrix3<f64>) -> Sym3 {
    let v = [
        (2.0 * log_s[0]).exp(),
        (2.0 * log_s[1]).exp(),
        (2.0 * log_s[2]).exp(),
    ];
    let e = |a: usize, b: usize| {
        r[(a, 0)] * v[0] * r[(b, 0)] + r[(a, 1)] * v[1] * r[(b, 1)] + r[(a, 2)] * v[2] * r[(b, 2)]
    };
    Sym3 {
        xx: e(0, 0),
        xy: e(0, 1),
        xz: e(0, 2),
        yy: e(1, 1),
        yz: e(1, 2),
        zz: e(2, 2),
    }
}

/// The learnable cloud of anisotropic Gaussian primitives, stored as
/// parallel arrays. Every primitive owns exactly 11 scalars.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianField {
    pub means: Vec<[f64; 3]>,
    pub log_scales: Vec<[f64; 3]>,
    pub quats: Vec<Quat>,
    pub intensities: Vec<f64>,
}

impl GaussianField {
    pub const PARAMS_PER_PRIMITIVE: usize = 11;

    pub fn new(
        means: Vec<[f64; 3]>,
        log_scales: Vec<[f64; 3]>,
        quats: Vec<Quat>,
        intensities: Vec<f64>,
    ) -> Result<Self> {
        let n = means.len();
        if n == 0 {
            return Err(Error::invalid("a Gaussian field needs at least one primitive"));
        }
        if log_scales.len() != n || quats.len() != n || intensities.len() != n {
            return Err(Error::invalid(format!(
                "array lengths disagree: means {n}, log_scales {}, quats {}, intensities {}",
                log_scales.len(),
                quats.len(),
                intensities.len()
            )));
        }
        Ok(GaussianField {
            means,
            log_scales,
            quats,
            intensities,
        })
    }

    /// One primitive, isotropic with standard deviation `scale`.
    pub fn isotropic(means: Vec<[f64; 3]>, scale: f64, intensities: Vec<f64>) -> Result<Self> {
        let n = means.len();
        let ls = scale.ln();
        GaussianField::new(means, vec![[ls; 3]; n], vec![IDENTITY_QUAT; n], intensities)
    }

    pub fn count(&self) -> usize {
        self.means.len()
    }

    pub fn scales(&self, j: usize) -> [f64; 3] {
        self.log_scales[j].map(f64::exp)
    }

    pub fn rotation(&self, j: usize) -> Result<Matrix3<f64>> {
        quat_to_rotation(&self.quats[j])
    }

    /// Moves every primitive by the rigid map `x ↦ r x + t` (`r` a rotation).
    pub fn transform_rigid(&mut self, r: &Matrix3<f64>, t: &Vector3<f64>) {
        let qr = rotation_to_quat(r);
        for (mu, q) in self.means.iter_mut().zip(self.quats.iter_mut()) {
            *mu = arr3(&(r * vec3(*mu) + t));
            *q = quat_mul(&qr, q);
        }
    }

    /// All covariances, checked against [`EIGEN_FLOOR`].
    pub fn covariances(&self) -> Result<Vec<Sym3>> {
        (0..self.count())
            .map(|j| {
                check_scales(j, &self.log_scales[j])?;
                let r = self.rotation(j)?;
                Ok(covariance_from_rotation(&self.log_scales[j], &r))
            })
            .collect()
    }

    /// Inverse covariances, checked against [`EIGEN_FLOOR`].
    pub fn inverse_covariances(&self) -> Result<Vec<Sym3>> {
        let covs = self.covariances()?;
        covs.iter()
            .enumerate()
            .map(|(j, c)| {
                c.inverse().ok_or_else(|| Error::Degenerate {
                    index: j,
                    detail: "covariance is not invertible".into(),
                })
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        for j in 0..self.count() {
            if !self.means[j].iter().all(|v| v.is_finite()) || !self.intensities[j].is_finite() {
                return Err(Error::invalid(format!("primitive {j} has non-finite values")));
            }
            check_scales(j, &self.log_scales[j])?;
            quat_to_rotation(&self.quats[j])?;
        }
        Ok(())
    }
}

fn check_scales(j: usize, log_s: &[f64; 3]) -> Result<()> {
    for &ls in log_s {
        let var = (2.0 * ls).exp();
        if !(var >= EIGEN_FLOOR) || !var.is_finite() {
            return Err(Error::Degenerate {
                index: j,
                detail: format!("eigenvalue {var:e} outside [{EIGEN_FLOOR:e}, inf)"),
            });
        }
    }
    Ok(())
}

/// Gaussian weight `exp(-½ vᵀ A v)` with the exponent clamped from below.
/// Also returns `A v` and whether the clamp was active.
#[inline]
pub(crate) fn gaussian_weight(inv_cov: &Sym3, v: [f64; 3]) -> (f64, [f64; 3], bool) {
    let a = inv_cov.mul_vec(v);
    let m = v[0] * a[0] + v[1] * a[1] + v[2] * a[2];
    let e = -0.5 * m;
    if e < EXPONENT_FLOOR {
        (EXPONENT_FLOOR.exp(), a, true)
    } else {
        (e.exp(), a, false)
    }
}

#[inline]
pub(crate) fn sub3(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

/// Normalized weighted sum at `x` over the listed primitives, using
/// precomputed inverse covariances.
#[inline]
pub(crate) fn normalized_sum(
    x: [f64; 3],
    ids: &[u32],
    field: &GaussianField,
    inv_covs: &[Sym3],
    delta: f64,
) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for &id in ids {
        let j = id as usize;
        let (w, _, _) = gaussian_weight(&inv_covs[j], sub3(x, field.means[j]));
        num += field.intensities[j] * w;
        den += w;
    }
    num / (den + delta)
}

/// Field value `V(x)` at every point, restricted to the listed neighbors.
pub fn evaluate_field(
    points: &[[f64; 3]],
    field: &GaussianField,
    neighbors: &Neighbors,
    delta: f64,
) -> Result<Vec<f64>> {
    neighbors.check(points.len(), field.count())?;
    let inv = field.inverse_covariances()?;
    Ok(points
        .par_iter()
        .enumerate()
        .map(|(p, x)| normalized_sum(*x, neighbors.row(p), field, &inv, delta))
        .collect())
}

/// Copy of `field` with every scale multiplied by `gamma`.
pub fn shrink_for_viz(field: &GaussianField, gamma: f64) -> Result<GaussianField> {
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(Error::invalid(format!("shrink factor {gamma} not in (0, 1]")));
    }
    let shift = gamma.ln();
    let mut out = field.clone();
    for ls in &mut out.log_scales {
        for v in ls.iter_mut() {
            *v += shift;
        }
    }
    Ok(out)
}

/// A raster with an index→mm affine. Voxels are stored x-fastest.
#[derive(Clone, Debug, PartialEq)]
pub struct VolumeGrid {
    pub dims: [usize; 3],
    pub affine: Matrix4<f64>,
    pub data: Vec<f64>,
    pub mask: Option<Vec<bool>>,
}

impl VolumeGrid {
    pub fn new(dims: [usize; 3], affine: Matrix4<f64>) -> Result<Self> {
        if dims.contains(&0) {
            return Err(Error::invalid(format!("grid dims {dims:?} contain zero")));
        }
        if !affine.is_invertible() {
            return Err(Error::invalid("grid affine is singular"));
        }
        let n = dims[0] * dims[1] * dims[2];
        Ok(VolumeGrid {
            dims,
            affine,
            data: vec![0.0; n],
            mask: None,
        })
    }

    /// Isotropic grid whose center voxel sits at the world origin.
    pub fn centered(dims: [usize; 3], spacing: f64) -> Result<Self> {
        let mut a = Matrix4::identity();
        for k in 0..3 {
            a[(k, k)] = spacing;
            a[(k, 3)] = -0.5 * (dims[k] as f64 - 1.0) * spacing;
        }
        VolumeGrid::new(dims, a)
    }

    /// Axis-aligned grid of voxel size `spacing` whose voxel centers cover
    /// every point, padded by `margin` mm on each side.
    pub fn bounding(points: &[[f64; 3]], spacing: f64, margin: f64) -> Result<Self> {
        if points.is_empty() || !(spacing > 0.0) || !(margin >= 0.0) {
            return Err(Error::invalid("bounding grid needs points, a positive spacing and a non-negative margin"));
        }
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for p in points {
            for k in 0..3 {
                lo[k] = lo[k].min(p[k]);
                hi[k] = hi[k].max(p[k]);
            }
        }
        let mut a = Matrix4::identity();
        let mut dims = [0; 3];
        for k in 0..3 {
            let extent = hi[k] - lo[k] + 2.0 * margin;
            dims[k] = (extent / spacing).ceil() as usize + 1;
            let center = 0.5 * (lo[k] + hi[k]);
            a[(k, k)] = spacing;
            a[(k, 3)] = center - 0.5 * (dims[k] as f64 - 1.0) * spacing;
        }
        VolumeGrid::new(dims, a)
    }

    pub fn with_mask(mut self, mask: Vec<bool>) -> Result<Self> {
        if mask.len() != self.len() {
            return Err(Error::invalid(format!(
                "mask has {} voxels, grid has {}",
                mask.len(),
                self.len()
            )));
        }
        self.mask = Some(mask);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    #[inline]
    pub fn coords(&self, idx: usize) -> [usize; 3] {
        let i = idx % self.dims[0];
        let j = (idx / self.dims[0]) % self.dims[1];
        let k = idx / (self.dims[0] * self.dims[1]);
        [i, j, k]
    }

    /// World position of a (possibly fractional) voxel index.
    #[inline]
    pub fn index_to_world(&self, ijk: [f64; 3]) -> [f64; 3] {
        let a = &self.affine;
        let mut out = [0.0; 3];
        for (r, o) in out.iter_mut().enumerate() {
            *o = a[(r, 0)] * ijk[0] + a[(r, 1)] * ijk[1] + a[(r, 2)] * ijk[2] + a[(r, 3)];
        }
        out
    }

    pub fn voxel_center(&self, idx: usize) -> [f64; 3] {
        let [i, j, k] = self.coords(idx);
        self.index_to_world([i as f64, j as f64, k as f64])
    }

    pub fn world_to_index_matrix(&self) -> Matrix4<f64> {
        self.affine.try_inverse().expect("affine checked at construction")
    }

    /// Column norms of the affine's linear part.
    pub fn spacing(&self) -> [f64; 3] {
        let l = self.affine.fixed_view::<3, 3>(0, 0);
        [l.column(0).norm(), l.column(1).norm(), l.column(2).norm()]
    }

    pub fn is_masked(&self, idx: usize) -> bool {
        self.mask.as_ref().is_none_or(|m| m[idx])
    }

    pub fn masked_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.is_masked(i)).collect()
    }

    /// Trilinear interpolation at a fractional index; zero outside the grid.
    #[inline]
    pub fn trilinear(&self, p: [f64; 3]) -> f64 {
        let [nx, ny, nz] = self.dims;
        let fx = p[0].floor();
        let fy = p[1].floor();
        let fz = p[2].floor();
        let (tx, ty, tz) = (p[0] - fx, p[1] - fy, p[2] - fz);
        let (x0, y0, z0) = (fx as i64, fy as i64, fz as i64);
        let mut acc = 0.0;
        for dz in 0..2 {
            let z = z0 + dz;
            if z < 0 || z >= nz as i64 {
                continue;
            }
            let wz = if dz == 0 { 1.0 - tz } else { tz };
            for dy in 0..2 {
                let y = y0 + dy;
                if y < 0 || y >= ny as i64 {
                    continue;
                }
                let wy = if dy == 0 { 1.0 - ty } else { ty };
                for dx in 0..2 {
                    let x = x0 + dx;
                    if x < 0 || x >= nx as i64 {
                        continue;
                    }
                    let wx = if dx == 0 { 1.0 - tx } else { tx };
                    acc += wx * wy * wz * self.data[self.index(x as usize, y as usize, z as usize)];
                }
            }
        }
        acc
    }
}

/// Fills `grid` with the field evaluated at voxel centers (no PSF).
///
/// Voxels outside the grid mask are set to zero; without a mask every voxel
/// is evaluated.
pub fn rasterize(field: &GaussianField, grid: &VolumeGrid, k: usize, delta: f64) -> Result<VolumeGrid> {
    let index = NeighborIndex::build(&field.means, k)?;
    rasterize_with_index(field, &index, grid, k, delta)
}

pub fn rasterize_with_index(
    field: &GaussianField,
    index: &NeighborIndex,
    grid: &VolumeGrid,
    k: usize,
    delta: f64,
) -> Result<VolumeGrid> {
    let voxels = grid.masked_indices();
    let points: Vec<[f64; 3]> = voxels.iter().map(|&v| grid.voxel_center(v)).collect();
    let neighbors = index.query(&points, k)?;
    let values = evaluate_field(&points, field, &neighbors, delta)?;
    let mut out = grid.clone();
    out.data.iter_mut().for_each(|v| *v = 0.0);
    for (v, val) in voxels.into_iter().zip(values) {
        out.data[v] = val;
    }
    Ok(out)
}

pub fn vec3(a: [f64; 3]) -> Vector3<f64> {
    Vector3::new(a[0], a[1], a[2])
}

pub fn arr3(v: &Vector3<f64>) -> [f64; 3] {
    [v[0], v[1], v[2]]
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_quat(rng: &mut impl Rng) -> Quat {
        loop {
            let q: Quat = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
            if quat_norm(&q) > 1e-3 {
                return q;
            }
        }
    }

    fn random_field(rng: &mut impl Rng, n: usize) -> GaussianField {
        let means = (0..n)
            .map(|_| std::array::from_fn(|_| rng.random_range(-3.0..3.0)))
            .collect();
        let ls = (0..n)
            .map(|_| std::array::from_fn(|_| rng.random_range(-0.5f64..0.7)))
            .collect();
        let qs = (0..n).map(|_| random_quat(rng)).collect();
        let cs = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
        GaussianField::new(means, ls, qs, cs).unwrap()
    }

    #[test]
    fn identity_and_half_turn() {
        let r = quat_to_rotation(&IDENTITY_QUAT).unwrap();
        assert_eq!(r, Matrix3::identity());
        let r = quat_to_rotation(&[0.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(r, Matrix3::from_diagonal(&Vector3::new(-1.0, -1.0, 1.0)));
    }

    #[test]
    fn zero_quaternion_rejected() {
        assert!(matches!(
            quat_to_rotation(&[0.0; 4]),
            Err(Error::InvalidParameter(_))
        ));
    }

    #[test]
    fn rotation_is_scale_and_sign_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            let q = random_quat(&mut rng);
            let n = quat_norm(&q);
            let unit = q.map(|c| c / n);
            let neg = q.map(|c| -c);
            let r = quat_to_rotation(&q).unwrap();
            let ru = quat_to_rotation(&unit).unwrap();
            let rn = quat_to_rotation(&neg).unwrap();
            assert!((r - ru).abs().max() < 1e-12);
            assert!((r - rn).abs().max() < 1e-12);
            assert!((r.transpose() * r - Matrix3::identity()).abs().max() < 1e-12);
            assert_relative_eq!(r.determinant(), 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn rotation_quat_roundtrip_and_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            let a = random_quat(&mut rng);
            let b = random_quat(&mut rng);
            let ra = quat_to_rotation(&a).unwrap();
            let rb = quat_to_rotation(&b).unwrap();
            let back = quat_to_rotation(&rotation_to_quat(&ra)).unwrap();
            assert!((back - ra).abs().max() < 1e-12);
            let rab = quat_to_rotation(&quat_mul(&a, &b)).unwrap();
            assert!((rab - ra * rb).abs().max() < 1e-12);
        }
    }

    #[test]
    fn quaternion_vjp_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let q = random_quat(&mut rng);
            let g = Matrix3::from_fn(|_, _| rng.random_range(-1.0..1.0));
            let f = |q: &Quat| (quat_to_rotation(q).unwrap().component_mul(&g)).sum();
            let analytic = quat_rotation_vjp(&q, &g);
            for c in 0..4 {
                let h = 1e-6;
                let mut qp = q;
                let mut qm = q;
                qp[c] += h;
                qm[c] -= h;
                let fd = (f(&qp) - f(&qm)) / (2.0 * h);
                assert!((fd - analytic[c]).abs() < 1e-7, "{fd} vs {}", analytic[c]);
            }
        }
    }

    #[test]
    fn covariance_examples() {
        let c = build_covariance(&[0.0; 3], &IDENTITY_QUAT).unwrap();
        assert_eq!(c.matrix(), Matrix3::identity());
        let c = build_covariance(&[2f64.ln(), 0.0, 0.0], &IDENTITY_QUAT).unwrap();
        assert_relative_eq!(
            c.matrix(),
            Matrix3::from_diagonal(&Vector3::new(4.0, 1.0, 1.0)),
            epsilon = 1e-14
        );
    }

    #[test]
    fn covariance_trace_is_rotation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..1000 {
            let ls: [f64; 3] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
            let q = random_quat(&mut rng);
            let c = build_covariance(&ls, &q).unwrap();
            let c0 = build_covariance(&ls, &IDENTITY_QUAT).unwrap();
            assert_relative_eq!(c.trace(), c0.trace(), max_relative = 1e-12);
            assert!(c.0.eigenvalues()[0] > 0.0);
        }
    }

    #[test]
    fn sym_inverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let c = build_covariance(&[0.1, -0.3, 0.4], &random_quat(&mut rng)).unwrap();
        let inv = c.0.inverse().unwrap();
        assert!((inv.to_matrix() * c.matrix() - Matrix3::identity()).abs().max() < 1e-12);
        assert!(Sym3::ZERO.inverse().is_none());
    }

    #[test]
    fn single_gaussian_at_mean() {
        let f = GaussianField::isotropic(vec![[1.0, 2.0, 3.0]], 1.3, vec![0.7]).unwrap();
        let nb = Neighbors::new(1, vec![0]);
        let v = evaluate_field(&[[1.0, 2.0, 3.0]], &f, &nb, DEFAULT_DELTA).unwrap();
        assert_eq!(v[0], 0.7 / (1.0 + DEFAULT_DELTA));
    }

    #[test]
    fn symmetric_pair_matches_dense_sum() {
        let c = 0.6;
        let f = GaussianField::isotropic(vec![[-1.0, 0.0, 0.0], [1.0, 0.0, 0.0]], 0.8, vec![c, c])
            .unwrap();
        let nb = Neighbors::new(2, vec![0, 1]);
        let v = evaluate_field(&[[0.0; 3]], &f, &nb, DEFAULT_DELTA).unwrap()[0];
        let w = (-0.5f64 / 0.64).exp();
        assert_relative_eq!(v, c * 2.0 * w / (2.0 * w + DEFAULT_DELTA), max_relative = 1e-14);
    }

    #[test]
    fn far_point_vanishes() {
        let f = GaussianField::isotropic(vec![[0.0; 3], [0.5, 0.0, 0.0]], 0.5, vec![1.0, 0.9])
            .unwrap();
        let nb = Neighbors::new(2, vec![0, 1]);
        // Mahalanobis distance well above 40.
        let v = evaluate_field(&[[30.0, 0.0, 0.0]], &f, &nb, DEFAULT_DELTA).unwrap()[0];
        assert!(v.abs() < 1e-12);
    }

    #[test]
    fn degenerate_primitive_is_named() {
        let f = GaussianField::new(
            vec![[0.0; 3], [1.0; 3]],
            vec![[0.0; 3], [-8.0, 0.0, 0.0]],
            vec![IDENTITY_QUAT; 2],
            vec![1.0, 1.0],
        )
        .unwrap();
        let nb = Neighbors::new(2, vec![0, 1]);
        match evaluate_field(&[[0.0; 3]], &f, &nb, DEFAULT_DELTA) {
            Err(Error::Degenerate { index, .. }) => assert_eq!(index, 1),
            other => panic!("expected degeneracy error, got {other:?}"),
        }
    }

    #[test]
    fn global_rotation_equivariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let f = random_field(&mut rng, 12);
        let q0 = random_quat(&mut rng);
        let r0 = quat_to_rotation(&q0).unwrap();
        let mut g = f.clone();
        for j in 0..g.count() {
            g.means[j] = arr3(&(r0 * vec3(f.means[j])));
            g.quats[j] = quat_mul(&q0, &f.quats[j]);
        }
        let pts: Vec<[f64; 3]> = (0..50)
            .map(|_| std::array::from_fn(|_| rng.random_range(-3.0..3.0)))
            .collect();
        let rpts: Vec<[f64; 3]> = pts.iter().map(|p| arr3(&(r0 * vec3(*p)))).collect();
        let nb = Neighbors::dense(pts.len(), f.count());
        let a = evaluate_field(&pts, &f, &nb, DEFAULT_DELTA).unwrap();
        let b = evaluate_field(&rpts, &g, &nb, DEFAULT_DELTA).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() <= 1e-9 * x.abs().max(1e-12), "{x} vs {y}");
        }
    }

    #[test]
    fn bounded_for_nonnegative_intensities() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let f = random_field(&mut rng, 20);
        let cmax = f.intensities.iter().cloned().fold(0.0, f64::max);
        let pts: Vec<[f64; 3]> = (0..500)
            .map(|_| std::array::from_fn(|_| rng.random_range(-6.0..6.0)))
            .collect();
        let nb = Neighbors::dense(pts.len(), f.count());
        for v in evaluate_field(&pts, &f, &nb, DEFAULT_DELTA).unwrap() {
            assert!((0.0..=cmax).contains(&v));
        }
    }

    #[test]
    fn dense_knn_equals_explicit_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let f = random_field(&mut rng, 15);
        let pts: Vec<[f64; 3]> = (0..40)
            .map(|_| std::array::from_fn(|_| rng.random_range(-3.0..3.0)))
            .collect();
        let index = NeighborIndex::build(&f.means, f.count()).unwrap();
        let knn = index.query(&pts, f.count()).unwrap();
        let a = evaluate_field(&pts, &f, &knn, DEFAULT_DELTA).unwrap();
        let covs = f.covariances().unwrap();
        for (p, x) in pts.iter().enumerate() {
            let mut num = 0.0;
            let mut den = 0.0;
            for j in 0..f.count() {
                let inv = covs[j].to_matrix().try_inverse().unwrap();
                let v = vec3(*x) - vec3(f.means[j]);
                let w = (-0.5 * v.dot(&(inv * v))).exp();
                num += f.intensities[j] * w;
                den += w;
            }
            assert_relative_eq!(a[p], num / (den + DEFAULT_DELTA), max_relative = 1e-10);
        }
    }

    #[test]
    fn shrink_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let f = random_field(&mut rng, 5);
        assert_eq!(shrink_for_viz(&f, 1.0).unwrap(), f);
        let h = shrink_for_viz(&f, 0.5).unwrap();
        for j in 0..f.count() {
            for k in 0..3 {
                assert_relative_eq!(h.scales(j)[k], 0.5 * f.scales(j)[k], max_relative = 1e-14);
            }
            assert_eq!(h.means[j], f.means[j]);
            assert_eq!(h.quats[j], f.quats[j]);
        }
        let twice = shrink_for_viz(&shrink_for_viz(&f, 0.25).unwrap(), 0.25).unwrap();
        let once = shrink_for_viz(&f, 0.0625).unwrap();
        for j in 0..f.count() {
            for k in 0..3 {
                assert_relative_eq!(twice.log_scales[j][k], once.log_scales[j][k], epsilon = 1e-14);
            }
        }
        assert_eq!(twice.means, once.means);
        assert_eq!(twice.intensities, once.intensities);
        assert!(shrink_for_viz(&f, 0.0).is_err());
        assert!(shrink_for_viz(&f, -1.0).is_err());
    }

    #[test]
    fn rasterize_examples() {
        let grid = VolumeGrid::centered([21, 21, 21], 0.25).unwrap();
        let mu = [0.3, -0.45, 0.8];
        let f = GaussianField::isotropic(vec![mu, [4.0, 4.0, 4.0]], 0.6, vec![1.0, 0.0]).unwrap();
        let out = rasterize(&f, &grid, 2, DEFAULT_DELTA).unwrap();
        let argmax = (0..out.len())
            .max_by(|&a, &b| out.data[a].total_cmp(&out.data[b]))
            .unwrap();
        let c = out.voxel_center(argmax);
        for k in 0..3 {
            assert!((c[k] - mu[k]).abs() <= 0.125 + 1e-12);
        }
        let again = rasterize(&shrink_for_viz(&f, 1.0).unwrap(), &grid, 2, DEFAULT_DELTA).unwrap();
        assert_eq!(again.data, out.data);

        let masked = grid.clone().with_mask(vec![false; grid.len()]).unwrap();
        let empty = rasterize(&f, &masked, 2, DEFAULT_DELTA).unwrap();
        assert!(empty.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn trilinear_reproduces_grid_values() {
        let mut g = VolumeGrid::centered([4, 5, 6], 1.0).unwrap();
        for (i, v) in g.data.iter_mut().enumerate() {
            *v = i as f64;
        }
        assert_eq!(g.trilinear([1.0, 2.0, 3.0]), g.data[g.index(1, 2, 3)]);
        let mid = g.trilinear([1.5, 2.0, 3.0]);
        assert_relative_eq!(mid, 0.5 * (g.data[g.index(1, 2, 3)] + g.data[g.index(2, 2, 3)]));
        assert_eq!(g.trilinear([-5.0, 0.0, 0.0]), 0.0);
    }

    #[test]
    fn bounding_grid_covers_its_points() {
        let pts = [[-1.2, 0.0, 3.0], [2.3, -4.0, 3.0], [0.0, 1.0, 3.4]];
        let g = VolumeGrid::bounding(&pts, 0.5, 1.0).unwrap();
        let first = g.voxel_center(0);
        let last = g.voxel_center(g.len() - 1);
        for p in pts {
            for k in 0..3 {
                assert!(first[k] <= p[k] - 1.0 + 1e-12 && p[k] + 1.0 <= last[k] + 1e-12);
            }
        }
        assert!(g.dims.iter().zip([3.5, 5.0, 0.4]).all(|(&d, e)| (d as f64 - 1.0) * 0.5 < e + 2.0 + 0.5));
        assert!(VolumeGrid::bounding(&[], 0.5, 0.0).is_err());
    }
}
