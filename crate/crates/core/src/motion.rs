//! Slice stacks, pixel lifting, and per-slice rigid corrections.
//!
//! A slice's pose is the stack geometry followed by a learnable correction
//! `x = R(q_i)·x₀ + t_i`. The correction also rotates the PSF, so the
//! through-plane blur follows the slice normal wherever the slice moves.

use nalgebra::{Matrix3, Matrix4, Vector4};

use crate::error::{Error, Result};
use crate::forward::{build_psf_with, PsfConvention, PsfModel};
use crate::geom::{quat_to_rotation, Quat, IDENTITY_QUAT};

/// One acquisition: `nx × ny` pixels per slice, `n_slices` slices.
///
/// The affine maps `(i, j, slice)` to millimetres. Pixel values are stored
/// with `i` fastest and the slice index slowest.
#[derive(Clone, Debug, PartialEq)]
pub struct SliceStack {
    pub dims: [usize; 3],
    pub affine: Matrix4<f64>,
    pub data: Vec<f64>,
    pub mask: Vec<bool>,
    pub inplane: f64,
    pub thickness: f64,
}

impl SliceStack {
    pub fn new(
        dims: [usize; 3],
        affine: Matrix4<f64>,
        data: Vec<f64>,
        mask: Vec<bool>,
        inplane: f64,
        thickness: f64,
    ) -> Result<Self> {
        let n = dims.iter().product::<usize>();
        if n == 0 {
            return Err(Error::invalid(format!("stack dims {dims:?} contain zero")));
        }
        if data.len() != n || mask.len() != n {
            return Err(Error::invalid(format!(
                "stack {dims:?} has {} values and {} mask entries",
                data.len(),
                mask.len()
            )));
        }
        if !affine.is_invertible() {
            return Err(Error::invalid("stack affine is singular"));
        }
        if !(inplane > 0.0) || !(thickness > 0.0) {
            return Err(Error::invalid(format!(
                "stack spacing {inplane} and thickness {thickness} must be positive"
            )));
        }
        Ok(SliceStack {
            dims,
            affine,
            data,
            mask,
            inplane,
            thickness,
        })
    }

    pub fn n_slices(&self) -> usize {
        self.dims[2]
    }

    pub fn pixels_per_slice(&self) -> usize {
        self.dims[0] * self.dims[1]
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, slice: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * slice)
    }

    pub fn masked_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// Orientation of the slice axes: the normalized affine columns
    /// (in-plane x, in-plane y, slice normal).
    pub fn rotation(&self) -> Matrix3<f64> {
        let l = self.affine.fixed_view::<3, 3>(0, 0).into_owned();
        Matrix3::from_columns(&[
            l.column(0).normalize(),
            l.column(1).normalize(),
            l.column(2).normalize(),
        ])
    }

    pub fn psf(&self, conv: &PsfConvention) -> Result<PsfModel> {
        build_psf_with(self.inplane, self.thickness, conv)
    }
}

/// Applies the stack affine to `(u_x, u_y, slice_idx)`.
pub fn lift_pixel(stack: &SliceStack, slice_idx: usize, u: [f64; 2]) -> Result<[f64; 3]> {
    let [nx, ny, ns] = stack.dims;
    let inside = |v: f64, n: usize| v >= -0.5 && v <= n as f64 - 0.5;
    if slice_idx >= ns || !inside(u[0], nx) || !inside(u[1], ny) {
        return Err(Error::OutOfBounds(format!(
            "pixel {u:?} on slice {slice_idx} outside stack {:?}",
            stack.dims
        )));
    }
    Ok(lift_unchecked(&stack.affine, [u[0], u[1], slice_idx as f64]))
}

#[inline]
pub(crate) fn lift_unchecked(affine: &Matrix4<f64>, p: [f64; 3]) -> [f64; 3] {
    let h = affine * Vector4::new(p[0], p[1], p[2], 1.0);
    [h[0], h[1], h[2]]
}

/// Learnable per-slice state.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SliceState {
    pub quat: Quat,
    /// Translation in mm.
    pub trans: [f64; 3],
    /// Log of the slice intensity scalar.
    pub log_sigma: f64,
    /// Log-scale of the slice residuals; the outlier weight is `exp(-eta)`.
    pub eta: f64,
}

impl Default for SliceState {
    fn default() -> Self {
        SliceState {
            quat: IDENTITY_QUAT,
            trans: [0.0; 3],
            log_sigma: 0.0,
            eta: 0.0,
        }
    }
}

impl SliceState {
    pub fn sigma(&self) -> f64 {
        self.log_sigma.exp()
    }

    pub fn weight(&self) -> f64 {
        (-self.eta).exp()
    }

    pub fn rotation(&self) -> Result<Matrix3<f64>> {
        quat_to_rotation(&self.quat)
    }
}

/// Corrected position `R(q)·x₀ + t` and effective slice rotation
/// `R(q)·R_stack`.
pub fn apply_correction(
    state: &SliceState,
    stack_rotation: &Matrix3<f64>,
    x0: [f64; 3],
) -> Result<([f64; 3], Matrix3<f64>)> {
    let r = state.rotation()?;
    Ok((transform_point(&r, &state.trans, x0), r * stack_rotation))
}

#[inline]
pub(crate) fn transform_point(r: &Matrix3<f64>, t: &[f64; 3], x0: [f64; 3]) -> [f64; 3] {
    let mut x = [0.0; 3];
    for (row, xr) in x.iter_mut().enumerate() {
        *xr = r[(row, 0)] * x0[0] + r[(row, 1)] * x0[1] + r[(row, 2)] * x0[2] + t[row];
    }
    x
}

/// Identity corrections for every slice of every stack, in stack order.
pub fn init_states(stacks: &[SliceStack]) -> Vec<SliceState> {
    let total: usize = stacks.iter().map(SliceStack::n_slices).sum();
    vec![SliceState::default(); total]
}

/// Static description of one slice inside a [`SampleSet`].
#[derive(Clone, Debug)]
pub struct SliceInfo {
    pub stack: usize,
    pub index_in_stack: usize,
    pub stack_rotation: Matrix3<f64>,
    pub psf: PsfModel,
    /// Number of masked pixels contributed by this slice.
    pub n_points: usize,
}

/// A corrected observation, ready to render.
#[derive(Clone, Debug)]
pub struct SamplePoint {
    pub world: [f64; 3],
    pub rotation: Matrix3<f64>,
    pub slice: usize,
    pub observed: f64,
    pub stack: usize,
}

/// All masked pixels of a set of stacks, lifted to world space.
#[derive(Clone, Debug)]
pub struct SampleSet {
    pub nominal: Vec<[f64; 3]>,
    pub slice: Vec<u32>,
    pub observed: Vec<f64>,
    pub slices: Vec<SliceInfo>,
}

impl SampleSet {
    /// Collects masked pixels. With `psf_enabled == false` every slice gets
    /// the zero-width PSF.
    pub fn from_stacks(stacks: &[SliceStack], conv: &PsfConvention, psf_enabled: bool) -> Result<Self> {
        let mut set = SampleSet {
            nominal: Vec::new(),
            slice: Vec::new(),
            observed: Vec::new(),
            slices: Vec::new(),
        };
        for (s, stack) in stacks.iter().enumerate() {
            let psf = if psf_enabled {
                stack.psf(conv)?
            } else {
                PsfModel::disabled()
            };
            let rot = stack.rotation();
            for k in 0..stack.n_slices() {
                let gid = set.slices.len() as u32;
                let mut n_points = 0;
                for j in 0..stack.dims[1] {
                    for i in 0..stack.dims[0] {
                        let idx = stack.index(i, j, k);
                        if !stack.mask[idx] {
                            continue;
                        }
                        let v = stack.data[idx];
                        if !v.is_finite() {
                            return Err(Error::invalid(format!(
                                "non-finite intensity in stack {s}, slice {k}"
                            )));
                        }
                        set.nominal
                            .push(lift_unchecked(&stack.affine, [i as f64, j as f64, k as f64]));
                        set.slice.push(gid);
                        set.observed.push(v);
                        n_points += 1;
                    }
                }
                set.slices.push(SliceInfo {
                    stack: s,
                    index_in_stack: k,
                    stack_rotation: rot,
                    psf,
                    n_points,
                });
            }
        }
        Ok(set)
    }

    pub fn len(&self) -> usize {
        self.nominal.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nominal.is_empty()
    }

    pub fn n_slices(&self) -> usize {
        self.slices.len()
    }

    /// Corrected positions and per-slice effective rotations.
    pub fn corrected(&self, states: &[SliceState]) -> Result<(Vec<[f64; 3]>, Vec<Matrix3<f64>>)> {
        if states.len() != self.n_slices() {
            return Err(Error::invalid(format!(
                "{} slice states for {} slices",
                states.len(),
                self.n_slices()
            )));
        }
        let rots: Vec<Matrix3<f64>> = states
            .iter()
            .map(SliceState::rotation)
            .collect::<Result<_>>()?;
        let positions = self
            .nominal
            .iter()
            .zip(&self.slice)
            .map(|(x0, &s)| {
                let s = s as usize;
                transform_point(&rots[s], &states[s].trans, *x0)
            })
            .collect();
        let eff = rots
            .iter()
            .zip(&self.slices)
            .map(|(r, info)| r * info.stack_rotation)
            .collect();
        Ok((positions, eff))
    }

    pub fn sample_points(&self, states: &[SliceState]) -> Result<Vec<SamplePoint>> {
        let (pos, eff) = self.corrected(states)?;
        Ok(pos
            .into_iter()
            .enumerate()
            .map(|(p, world)| {
                let s = self.slice[p] as usize;
                SamplePoint {
                    world,
                    rotation: eff[s],
                    slice: s,
                    observed: self.observed[p],
                    stack: self.slices[s].stack,
                }
            })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forward::render_observed;
    use crate::geom::{axis_angle_quat, GaussianField, DEFAULT_DELTA};
    use crate::knn::NeighborIndex;
    use approx::assert_relative_eq;
    use nalgebra::Vector3;

    fn stack_with_affine(affine: Matrix4<f64>, dims: [usize; 3]) -> SliceStack {
        let n = dims.iter().product();
        SliceStack::new(dims, affine, vec![0.5; n], vec![true; n], 0.5, 3.0).unwrap()
    }

    #[test]
    fn lift_examples() {
        let s = stack_with_affine(Matrix4::identity(), [4, 4, 2]);
        assert_eq!(lift_pixel(&s, 0, [0.0, 0.0]).unwrap(), [0.0; 3]);
        let a = Matrix4::from_diagonal(&Vector4::new(0.5, 0.5, 3.0, 1.0));
        let s = stack_with_affine(a, [8, 8, 3]);
        assert_eq!(lift_pixel(&s, 1, [2.0, 4.0]).unwrap(), [1.0, 2.0, 3.0]);
        assert!(lift_pixel(&s, 3, [0.0, 0.0]).is_err());
        assert!(lift_pixel(&s, 0, [9.0, 0.0]).is_err());
    }

    #[test]
    fn lift_inverts_through_affine() {
        let r = quat_to_rotation(&[0.9, 0.2, -0.3, 0.1]).unwrap();
        let mut a = Matrix4::identity();
        let lin = r * Matrix3::from_diagonal(&Vector3::new(0.5, 0.5, 3.0));
        a.fixed_view_mut::<3, 3>(0, 0).copy_from(&lin);
        a[(0, 3)] = -7.0;
        a[(1, 3)] = 2.5;
        a[(2, 3)] = 11.0;
        let s = stack_with_affine(a, [16, 16, 5]);
        let inv = a.try_inverse().unwrap();
        for k in 0..5 {
            for &(u, v) in &[(0.0, 0.0), (3.0, 7.5), (15.0, 15.0)] {
                let x = lift_pixel(&s, k, [u, v]).unwrap();
                let back = inv * Vector4::new(x[0], x[1], x[2], 1.0);
                assert!((back[0] - u).abs() < 1e-9);
                assert!((back[1] - v).abs() < 1e-9);
                assert!((back[2] - k as f64).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn correction_examples() {
        let rs = quat_to_rotation(&[0.5, 0.5, 0.5, 0.5]).unwrap();
        let id = SliceState::default();
        let (x, r) = apply_correction(&id, &rs, [1.0, -2.0, 0.5]).unwrap();
        assert_eq!(x, [1.0, -2.0, 0.5]);
        assert_eq!(r, rs);

        let t = SliceState {
            trans: [1.0, 2.0, 3.0],
            ..SliceState::default()
        };
        let (x, _) = apply_correction(&t, &rs, [1.0, -2.0, 0.5]).unwrap();
        assert_eq!(x, [2.0, 0.0, 3.5]);
    }

    #[test]
    fn ten_degree_rotation_about_z() {
        let angle = 10f64.to_radians();
        let st = SliceState {
            quat: axis_angle_quat([0.0, 0.0, 1.0], angle),
            ..SliceState::default()
        };
        for i in 0..24 {
            let phi = i as f64 * std::f64::consts::TAU / 24.0;
            let x0 = [3.0 * phi.cos(), 3.0 * phi.sin(), 0.7];
            let (x, _) = apply_correction(&st, &Matrix3::identity(), x0).unwrap();
            let a = Vector3::new(x0[0], x0[1], 0.0);
            let b = Vector3::new(x[0], x[1], 0.0);
            assert_relative_eq!(a.angle(&b), angle, epsilon = 1e-12);
            assert_relative_eq!(a.cross(&b)[2].signum(), 1.0);
            assert_relative_eq!(x[2], 0.7, epsilon = 1e-15);
        }
    }

    #[test]
    fn correction_is_rigid() {
        let st = SliceState {
            quat: [0.3, -0.7, 0.2, 0.5],
            trans: [4.0, -1.0, 2.0],
            ..SliceState::default()
        };
        let pts: Vec<[f64; 3]> = (0..10)
            .map(|i| [i as f64 * 0.7 - 3.0, (i * i) as f64 * 0.1, 1.5 - i as f64])
            .collect();
        let moved: Vec<[f64; 3]> = pts
            .iter()
            .map(|p| apply_correction(&st, &Matrix3::identity(), *p).unwrap().0)
            .collect();
        for a in 0..pts.len() {
            for b in 0..a {
                let d0 = crate::knn::squared_distance(&pts[a], &pts[b]).sqrt();
                let d1 = crate::knn::squared_distance(&moved[a], &moved[b]).sqrt();
                assert!((d0 - d1).abs() <= 1e-9 * d0);
            }
        }
    }

    #[test]
    fn psf_tilts_with_slice() {
        let psf = crate::forward::build_psf(0.5, 3.0).unwrap();
        for deg in [1.0f64, 4.0, 6.0, 20.0] {
            let theta = deg.to_radians();
            let st = SliceState {
                quat: axis_angle_quat([1.0, 0.0, 0.0], theta),
                ..SliceState::default()
            };
            let (_, r_eff) = apply_correction(&st, &Matrix3::identity(), [0.0; 3]).unwrap();
            let cov = psf.world_covariance(&r_eff).to_matrix();
            let eig = cov.symmetric_eigen();
            let top = (0..3)
                .max_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]))
                .unwrap();
            let v = eig.eigenvectors.column(top);
            let tilt = v.dot(&Vector3::z()).abs().clamp(-1.0, 1.0).acos();
            assert_relative_eq!(tilt, theta, epsilon = 1e-9);
        }
    }

    #[test]
    fn identity_states_bypass_motion() {
        let a = Matrix4::from_diagonal(&Vector4::new(0.5, 0.5, 3.0, 1.0));
        let stacks = vec![stack_with_affine(a, [6, 6, 2]), stack_with_affine(a, [5, 5, 3])];
        let states = init_states(&stacks);
        assert_eq!(states.len(), 5);
        assert!(states.iter().all(|s| *s == SliceState::default()));

        let set = SampleSet::from_stacks(&stacks, &PsfConvention::default(), true).unwrap();
        let field = GaussianField::isotropic(
            vec![[0.5, 0.5, 0.0], [1.5, 1.0, 3.0], [0.0, 2.0, 6.0]],
            1.0,
            vec![0.1, 0.5, 0.9],
        )
        .unwrap();
        let index = NeighborIndex::build(&field.means, 3).unwrap();
        let nb = index.query(&set.nominal, 3).unwrap();
        let sig = vec![1.0; set.len()];
        let direct_rots: Vec<_> = set.slice.iter().map(|&s| set.slices[s as usize].stack_rotation).collect();
        let (pos, eff) = set.corrected(&states).unwrap();
        let rots: Vec<_> = set.slice.iter().map(|&s| eff[s as usize]).collect();
        let psf = set.slices[0].psf;
        let bypass = render_observed(&set.nominal, &direct_rots, &field, &psf, &nb, &sig, DEFAULT_DELTA).unwrap();
        let through = render_observed(&pos, &rots, &field, &psf, &nb, &sig, DEFAULT_DELTA).unwrap();
        assert_eq!(bypass, through);
    }

    #[test]
    fn sample_set_counts_masked_pixels() {
        let a = Matrix4::identity();
        let mut s = stack_with_affine(a, [3, 3, 2]);
        s.mask[0] = false;
        s.mask[10] = false;
        let set = SampleSet::from_stacks(&[s], &PsfConvention::default(), false).unwrap();
        assert_eq!(set.len(), 16);
        assert_eq!(set.slices[0].n_points, 8);
        assert_eq!(set.slices[1].n_points, 8);
        assert!(set.slices[0].psf.is_disabled());
        let pts = set.sample_points(&[SliceState::default(); 2]).unwrap();
        assert_eq!(pts[8].slice, 1);
        assert_eq!(pts[8].stack, 0);
    }
}
