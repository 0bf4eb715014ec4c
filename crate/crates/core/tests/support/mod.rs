//! Fixtures shared by integration tests in this crate and the acceptance
//! suite of the CLI crate.
#![allow(dead_code)]

use gsvr::forward::PsfConvention;
use gsvr::geom::{axis_angle_quat, GaussianField, Quat};
use gsvr::knn::{NeighborIndex, Neighbors};
use gsvr::motion::{SampleSet, SliceStack, SliceState};
use gsvr::train::{backward, compute_loss, Batch, Gradients, LossConfig, Reduction};
use nalgebra::{Matrix3, Matrix4, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Stack whose pixel grid is centered on `center`, with in-plane axes and
/// slice normal given by the columns of `rot`.
pub fn oriented_stack(
    rot: &Matrix3<f64>,
    n: usize,
    n_slices: usize,
    inplane: f64,
    thickness: f64,
    center: [f64; 3],
    data: Vec<f64>,
) -> SliceStack {
    let scaled = rot * Matrix3::from_diagonal(&Vector3::new(inplane, inplane, thickness));
    let half = Vector3::new((n as f64 - 1.0) / 2.0, (n as f64 - 1.0) / 2.0, (n_slices as f64 - 1.0) / 2.0);
    let t = Vector3::from(center) - scaled * half;
    let mut a = Matrix4::identity();
    a.fixed_view_mut::<3, 3>(0, 0).copy_from(&scaled);
    a.fixed_view_mut::<3, 1>(0, 3).copy_from(&t);
    let len = n * n * n_slices;
    SliceStack::new([n, n, n_slices], a, data, vec![true; len], inplane, thickness).unwrap()
}

pub fn random_rotation(rng: &mut impl Rng, max_angle: f64) -> Matrix3<f64> {
    let q = axis_angle_quat(
        [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)],
        rng.random_range(0.0..max_angle),
    );
    gsvr::geom::quat_to_rotation(&q).unwrap()
}

/// Quaternion with a random rotation and a norm away from one.
fn raw_quat(rng: &mut impl Rng, max_angle: f64) -> Quat {
    let q = axis_angle_quat(
        [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)],
        rng.random_range(0.0..max_angle),
    );
    let s = rng.random_range(0.8..1.25);
    q.map(|c| c * s)
}

pub struct Problem {
    pub samples: SampleSet,
    pub neighbors: Neighbors,
    pub field: GaussianField,
    pub states: Vec<SliceState>,
    pub cfg: LossConfig,
}

impl Problem {
    pub fn batch(&self) -> Batch<'_> {
        Batch::full(&self.samples, &self.neighbors)
    }

    pub fn loss(&self, field: &GaussianField, states: &[SliceState]) -> f64 {
        compute_loss(&self.batch(), field, states, &self.cfg).unwrap().total
    }

    pub fn gradients(&self) -> Gradients {
        backward(&self.batch(), &self.field, &self.states, &self.cfg).unwrap().1
    }
}

/// `n_gaussians` random anisotropic primitives observed by `n_slices`
/// single-slice stacks of random orientation, with non-trivial slice states.
/// Neighbor lists are computed once and frozen.
pub fn random_problem(seed: u64, n_gaussians: usize, n_slices: usize, k: usize) -> Problem {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let means: Vec<[f64; 3]> = (0..n_gaussians)
        .map(|_| std::array::from_fn(|_| rng.random_range(-3.0..3.0)))
        .collect();
    let log_scales: Vec<[f64; 3]> = (0..n_gaussians)
        .map(|_| std::array::from_fn(|_| rng.random_range(0.5f64..1.6).ln()))
        .collect();
    let quats: Vec<Quat> = (0..n_gaussians).map(|_| raw_quat(&mut rng, 3.0)).collect();
    let intensities: Vec<f64> = (0..n_gaussians).map(|_| rng.random_range(0.2..1.0)).collect();
    let field = GaussianField::new(means, log_scales, quats, intensities).unwrap();

    let n = 6;
    let stacks: Vec<SliceStack> = (0..n_slices)
        .map(|_| {
            let rot = random_rotation(&mut rng, 3.0);
            let center = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
            let data = (0..n * n).map(|_| rng.random_range(0.0..1.0)).collect();
            oriented_stack(&rot, n, 1, 1.0, 2.5, center, data)
        })
        .collect();
    let samples = SampleSet::from_stacks(&stacks, &PsfConvention::default(), true).unwrap();
    let states: Vec<SliceState> = (0..n_slices)
        .map(|_| SliceState {
            quat: raw_quat(&mut rng, 0.3),
            trans: std::array::from_fn(|_| rng.random_range(-0.5..0.5)),
            log_sigma: rng.random_range(-0.2..0.2),
            eta: rng.random_range(-0.3..0.3),
        })
        .collect();

    let (pos, _) = samples.corrected(&states).unwrap();
    let neighbors = NeighborIndex::build(&field.means, k).unwrap().query(&pos, k).unwrap();
    let cfg = LossConfig {
        lambda_reg: 0.05,
        s_target: 1.2,
        outlier_weighting: true,
        data_reduction: if seed.is_multiple_of(2) { Reduction::Mean } else { Reduction::Sum },
        reg_reduction: Reduction::Mean,
        ..LossConfig::default()
    };
    Problem {
        samples,
        neighbors,
        field,
        states,
        cfg,
    }
}

/// Which learnable scalar to perturb.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Param {
    Mean,
    LogScale,
    Quat,
    Intensity,
    SliceQuat,
    SliceTrans,
    LogSigma,
    Eta,
}

pub const ALL_PARAMS: [Param; 8] = [
    Param::Mean,
    Param::LogScale,
    Param::Quat,
    Param::Intensity,
    Param::SliceQuat,
    Param::SliceTrans,
    Param::LogSigma,
    Param::Eta,
];

fn scalar_mut<'a>(
    p: Param,
    field: &'a mut GaussianField,
    states: &'a mut [SliceState],
    i: usize,
    c: usize,
) -> &'a mut f64 {
    match p {
        Param::Mean => &mut field.means[i][c],
        Param::LogScale => &mut field.log_scales[i][c],
        Param::Quat => &mut field.quats[i][c],
        Param::Intensity => &mut field.intensities[i],
        Param::SliceQuat => &mut states[i].quat[c],
        Param::SliceTrans => &mut states[i].trans[c],
        Param::LogSigma => &mut states[i].log_sigma,
        Param::Eta => &mut states[i].eta,
    }
}

fn analytic(p: Param, g: &Gradients, i: usize, c: usize) -> f64 {
    match p {
        Param::Mean => g.field.means[i][c],
        Param::LogScale => g.field.log_scales[i][c],
        Param::Quat => g.field.quats[i][c],
        Param::Intensity => g.field.intensities[i],
        Param::SliceQuat => g.slices[i].quat[c],
        Param::SliceTrans => g.slices[i].trans[c],
        Param::LogSigma => g.slices[i].log_sigma,
        Param::Eta => g.slices[i].eta,
    }
}

fn shape(p: Param, prob: &Problem) -> (usize, usize) {
    let n = prob.field.count();
    let s = prob.states.len();
    match p {
        Param::Mean | Param::LogScale => (n, 3),
        Param::Quat => (n, 4),
        Param::Intensity => (n, 1),
        Param::SliceQuat => (s, 4),
        Param::SliceTrans => (s, 3),
        Param::LogSigma | Param::Eta => (s, 1),
    }
}

/// Fourth-order central difference of the loss along one scalar.
fn finite_difference(prob: &Problem, p: Param, i: usize, c: usize, h: f64) -> f64 {
    let eval = |d: f64| {
        let mut f = prob.field.clone();
        let mut s = prob.states.clone();
        *scalar_mut(p, &mut f, &mut s, i, c) += d;
        prob.loss(&f, &s)
    };
    (8.0 * (eval(h) - eval(-h)) - (eval(2.0 * h) - eval(-2.0 * h))) / (12.0 * h)
}

/// Largest relative error between analytic and numeric gradients over every
/// scalar of a parameter class. Entries where both are below `1e-7` in
/// magnitude are compared absolutely.
pub fn max_relative_error(prob: &Problem, g: &Gradients, p: Param) -> f64 {
    let (n, d) = shape(p, prob);
    let mut worst: f64 = 0.0;
    for i in 0..n {
        for c in 0..d {
            let a = analytic(p, g, i, c);
            let f = finite_difference(prob, p, i, c, 1e-5);
            let denom = a.abs().max(f.abs()).max(1e-7);
            worst = worst.max((a - f).abs() / denom);
        }
    }
    worst
}
