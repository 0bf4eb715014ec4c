//! Loss and its analytic gradient.
//!
//! Data term: L1 between observed pixels and `σ_i · V_obs(x)`, optionally
//! with a per-slice Laplace scale `exp(η_i)`. Regularizer: squared distance
//! of every primitive scale to a target scale.
//!
//! The backward pass is fused with the forward pass. For one point `x` in
//! slice `i` and neighbor `j`, with `A = Σ_obs⁻¹`, `v = x − μ_j`, `a = A v`
//! and `m = vᵀ a`:
//!
//! ```text
//! w = exp(−m/2)            V = Σ c w / (Σ w + δ)
//! ∂V/∂c_j = w / W          ∂V/∂w_j = (c_j − V) / W
//! ∂m/∂x = 2a = −∂m/∂μ_j    ∂m/∂Σ_obs = −a aᵀ
//! ```
//!
//! `Σ_obs = Σ_j + R_i C_i R_iᵀ` where `C_i` is the PSF in stack-aligned world
//! axes, so a covariance gradient `G` reaches both the primitive and the
//! slice rotation (`2 G R_i C_i`). Per-primitive covariance gradients are
//! pulled back to log-scales and quaternions once per batch.

use std::ops::Range;

use nalgebra::Matrix3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{gaussian_weight, quat_rotation_vjp, sub3, GaussianField, Quat, Sym3};
use crate::knn::Neighbors;
use crate::motion::{transform_point, SampleSet, SliceState};

/// How per-point and per-primitive terms are combined.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    Sum,
    Mean,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub lambda_reg: f64,
    /// Target primitive scale in mm.
    pub s_target: f64,
    pub outlier_weighting: bool,
    /// Maximum number of points per optimizer step.
    pub point_budget: usize,
    pub data_reduction: Reduction,
    pub reg_reduction: Reduction,
    pub delta: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda_reg: 2.5e-3,
            s_target: 1.6,
            outlier_weighting: false,
            point_budget: 10_000_000,
            data_reduction: Reduction::Mean,
            reg_reduction: Reduction::Mean,
            delta: crate::geom::DEFAULT_DELTA,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_reg >= 0.0) {
            return Err(Error::invalid("lambda_reg must be non-negative"));
        }
        if !(self.s_target > 0.0) {
            return Err(Error::invalid("s_target must be positive"));
        }
        if self.point_budget == 0 {
            return Err(Error::invalid("point_budget must be positive"));
        }
        if !(self.delta > 0.0) {
            return Err(Error::invalid("delta must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct LossBreakdown {
    pub data: f64,
    pub reg: f64,
    pub total: f64,
}

/// A contiguous range of points from a sample set with their neighbor
/// lists. `neighbors` rows are indexed by global point id.
#[derive(Clone, Debug)]
pub struct Batch<'a> {
    pub samples: &'a SampleSet,
    pub neighbors: &'a Neighbors,
    pub range: Range<usize>,
}

impl<'a> Batch<'a> {
    pub fn full(samples: &'a SampleSet, neighbors: &'a Neighbors) -> Self {
        Batch {
            samples,
            neighbors,
            range: 0..samples.len(),
        }
    }

    pub fn len(&self) -> usize {
        self.range.len()
    }

    pub fn is_empty(&self) -> bool {
        self.range.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FieldGrads {
    pub means: Vec<[f64; 3]>,
    pub log_scales: Vec<[f64; 3]>,
    pub quats: Vec<Quat>,
    pub intensities: Vec<f64>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SliceGrads {
    pub quat: Quat,
    pub trans: [f64; 3],
    pub log_sigma: f64,
    pub eta: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub field: FieldGrads,
    pub slices: Vec<SliceGrads>,
}

/// Per-slice quantities shared by every point of the slice.
struct SliceCtx {
    rot: Matrix3<f64>,
    trans: [f64; 3],
    /// PSF covariance in world axes before the motion rotation.
    psf_stack: Sym3,
    /// PSF covariance after the motion rotation.
    psf_world: Sym3,
    sigma: f64,
    weight: f64,
}

#[derive(Clone, Default)]
struct SliceAcc {
    trans: [f64; 3],
    rot: Matrix3<f64>,
    /// Summed covariance gradient of the slice's observed covariances.
    cov: Sym3,
    log_sigma: f64,
    abs_residual: f64,
    count: usize,
}

struct Partial {
    data: f64,
    means: Vec<[f64; 3]>,
    covs: Vec<Sym3>,
    intensities: Vec<f64>,
    slices: Vec<SliceAcc>,
}

impl Partial {
    fn new(n: usize, n_slices: usize, grads: bool) -> Self {
        let n = if grads { n } else { 0 };
        Partial {
            data: 0.0,
            means: vec![[0.0; 3]; n],
            covs: vec![Sym3::ZERO; n],
            intensities: vec![0.0; n],
            slices: vec![SliceAcc::default(); n_slices],
        }
    }

    fn merge(&mut self, o: &Partial) {
        self.data += o.data;
        for (a, b) in self.means.iter_mut().zip(&o.means) {
            for k in 0..3 {
                a[k] += b[k];
            }
        }
        for (a, b) in self.covs.iter_mut().zip(&o.covs) {
            a.add_assign(b);
        }
        for (a, b) in self.intensities.iter_mut().zip(&o.intensities) {
            *a += b;
        }
        for (a, b) in self.slices.iter_mut().zip(&o.slices) {
            for k in 0..3 {
                a.trans[k] += b.trans[k];
            }
            a.rot += b.rot;
            a.cov.add_assign(&b.cov);
            a.log_sigma += b.log_sigma;
            a.abs_residual += b.abs_residual;
            a.count += b.count;
        }
    }
}

/// Fixed chunking so reductions do not depend on the thread count.
fn chunk_len(points: usize) -> usize {
    points.div_ceil(64).max(4096)
}

fn slice_contexts(samples: &SampleSet, states: &[SliceState]) -> Result<Vec<SliceCtx>> {
    if states.len() != samples.n_slices() {
        return Err(Error::invalid(format!(
            "{} slice states for {} slices",
            states.len(),
            samples.n_slices()
        )));
    }
    states
        .iter()
        .zip(&samples.slices)
        .map(|(st, info)| {
            let rot = st.rotation()?;
            let psf_stack = info.psf.world_covariance(&info.stack_rotation);
            Ok(SliceCtx {
                rot,
                trans: st.trans,
                psf_stack,
                psf_world: psf_stack.congruence(&rot),
                sigma: st.sigma(),
                weight: st.weight(),
            })
        })
        .collect()
}

fn degenerate(j: usize) -> Error {
    Error::Degenerate {
        index: j,
        detail: "observed covariance lost positive definiteness".into(),
    }
}

struct Kernel<'a> {
    samples: &'a SampleSet,
    neighbors: &'a Neighbors,
    field: &'a GaussianField,
    covs: &'a [Sym3],
    ctx: &'a [SliceCtx],
    /// Per-point data weight before the outlier factor.
    scale: f64,
    outlier: bool,
    delta: f64,
    grads: bool,
}

/// Per-worker scratch: inverse observed covariances cached per
/// (slice, primitive) and the per-neighbor forward values of one point.
struct Scratch {
    inv: Vec<Sym3>,
    stamp: Vec<u32>,
    terms: Vec<(f64, [f64; 3], bool)>,
}

/// Forward values of one point.
struct PointEval {
    slice: usize,
    x0: [f64; 3],
    value: f64,
    big_w: f64,
    pred: f64,
}

impl Kernel<'_> {
    fn scratch(&self) -> Scratch {
        let n = self.field.count();
        Scratch {
            inv: vec![Sym3::ZERO; n],
            stamp: vec![u32::MAX; n],
            terms: vec![(0.0, [0.0; 3], false); self.neighbors.k()],
        }
    }

    #[inline]
    fn forward(&self, p: usize, sc: &mut Scratch) -> Result<PointEval> {
        let s = self.samples.slice[p] as usize;
        let c = &self.ctx[s];
        let x0 = self.samples.nominal[p];
        let x = transform_point(&c.rot, &c.trans, x0);
        let mut num = 0.0;
        let mut den = 0.0;
        for (t, &id) in self.neighbors.row(p).iter().enumerate() {
            let j = id as usize;
            // Points are stored slice by slice, so the cache rarely resets.
            if sc.stamp[j] != s as u32 {
                sc.inv[j] = self.covs[j].add(&c.psf_world).inverse().ok_or_else(|| degenerate(j))?;
                sc.stamp[j] = s as u32;
            }
            let wa = gaussian_weight(&sc.inv[j], sub3(x, self.field.means[j]));
            num += self.field.intensities[j] * wa.0;
            den += wa.0;
            sc.terms[t] = wa;
        }
        let big_w = den + self.delta;
        let value = num / big_w;
        let pred = c.sigma * value;
        if !pred.is_finite() {
            return Err(Error::Divergence { epoch: 0, slice: s });
        }
        Ok(PointEval {
            slice: s,
            x0,
            value,
            big_w,
            pred,
        })
    }

    fn run(&self, range: Range<usize>) -> Result<Partial> {
        let mut acc = Partial::new(self.field.count(), self.ctx.len(), self.grads);
        let mut sc = self.scratch();
        for p in range {
            let PointEval {
                slice: s,
                x0,
                value: v,
                big_w,
                pred,
            } = self.forward(p, &mut sc)?;
            let c = &self.ctx[s];
            let r = pred - self.samples.observed[p];
            let wgt = if self.outlier { c.weight } else { 1.0 };
            acc.data += self.scale * wgt * r.abs();
            let sa = &mut acc.slices[s];
            sa.abs_residual += r.abs();
            sa.count += 1;
            if !self.grads {
                continue;
            }

            let g = self.scale * wgt * sign(r);
            if g == 0.0 {
                continue;
            }
            sa.log_sigma += g * pred;
            let g_v = g * c.sigma;
            let mut dx = [0.0; 3];
            let mut g_cov = Sym3::ZERO;
            for (t, &id) in self.neighbors.row(p).iter().enumerate() {
                let j = id as usize;
                let (w, a, clamped) = sc.terms[t];
                acc.intensities[j] += g_v * w / big_w;
                if clamped {
                    continue;
                }
                let dm = g_v * (self.field.intensities[j] - v) / big_w * (-0.5 * w);
                for q in 0..3 {
                    acc.means[j][q] -= 2.0 * dm * a[q];
                    dx[q] += 2.0 * dm * a[q];
                }
                let d_cov = Sym3::outer(a, -dm);
                acc.covs[j].add_assign(&d_cov);
                g_cov.add_assign(&d_cov);
            }
            for q in 0..3 {
                sa.trans[q] += dx[q];
                for r_ in 0..3 {
                    sa.rot[(q, r_)] += dx[q] * x0[r_];
                }
            }
            sa.cov.add_assign(&g_cov);
        }
        Ok(acc)
    }
}

#[inline]
fn sign(r: f64) -> f64 {
    if r > 0.0 {
        1.0
    } else if r < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn reduction_scale(red: Reduction, n: usize) -> f64 {
    match red {
        Reduction::Sum => 1.0,
        Reduction::Mean => 1.0 / n.max(1) as f64,
    }
}

fn regularizer(field: &GaussianField, cfg: &LossConfig) -> (f64, Vec<[f64; 3]>) {
    let coef = cfg.lambda_reg * reduction_scale(cfg.reg_reduction, field.count());
    let mut total = 0.0;
    let grads = field
        .log_scales
        .iter()
        .map(|ls| {
            let mut g = [0.0; 3];
            for k in 0..3 {
                let s = ls[k].exp();
                let d = s - cfg.s_target;
                total += d * d;
                g[k] = coef * 2.0 * d * s;
            }
            g
        })
        .collect();
    (coef * total, grads)
}

fn evaluate(
    batch: &Batch,
    field: &GaussianField,
    states: &[SliceState],
    cfg: &LossConfig,
    grads: bool,
) -> Result<(LossBreakdown, Option<Gradients>)> {
    cfg.validate()?;
    let samples = batch.samples;
    if batch.range.end > samples.len() {
        return Err(Error::OutOfBounds(format!(
            "batch {:?} beyond {} points",
            batch.range,
            samples.len()
        )));
    }
    batch.neighbors.check(samples.len(), field.count())?;
    let ctx = slice_contexts(samples, states)?;
    let covs = field.covariances()?;
    let kernel = Kernel {
        samples,
        neighbors: batch.neighbors,
        field,
        covs: &covs,
        ctx: &ctx,
        scale: reduction_scale(cfg.data_reduction, batch.len()),
        outlier: cfg.outlier_weighting,
        delta: cfg.delta,
        grads,
    };

    let step = chunk_len(batch.len());
    let starts: Vec<usize> = batch.range.clone().step_by(step).collect();
    let partials: Vec<Partial> = starts
        .par_iter()
        .map(|&a| kernel.run(a..(a + step).min(batch.range.end)))
        .collect::<Result<_>>()?;
    let mut acc = Partial::new(field.count(), ctx.len(), grads);
    for p in &partials {
        acc.merge(p);
    }

    let mut data = acc.data;
    if cfg.outlier_weighting {
        let scale = reduction_scale(cfg.data_reduction, batch.len());
        for (sa, st) in acc.slices.iter().zip(states) {
            data += scale * sa.count as f64 * st.eta;
        }
    }
    let (reg, reg_grads) = regularizer(field, cfg);
    let loss = LossBreakdown {
        data,
        reg,
        total: data + reg,
    };
    if !loss.total.is_finite() {
        let slice = acc
            .slices
            .iter()
            .position(|s| !s.abs_residual.is_finite())
            .unwrap_or(0);
        return Err(Error::Divergence { epoch: 0, slice });
    }
    if !grads {
        return Ok((loss, None));
    }

    let n = field.count();
    let mut log_scales = reg_grads;
    let mut quats = vec![[0.0; 4]; n];
    for j in 0..n {
        let g = acc.covs[j].to_matrix();
        if g.iter().all(|&v| v == 0.0) {
            continue;
        }
        let q = field.quats[j];
        let r = field.rotation(j)?;
        let s2 = field.log_scales[j].map(|l| (2.0 * l).exp());
        let gr = 2.0 * g * r;
        // ∂L/∂log s_k = 2 s_k² (Rᵀ G R)_kk ; ∂L/∂R = 2 G R S²
        let mut d_rot = Matrix3::zeros();
        for k in 0..3 {
            let mut rgr = 0.0;
            for row in 0..3 {
                rgr += r[(row, k)] * gr[(row, k)];
                d_rot[(row, k)] = gr[(row, k)] * s2[k];
            }
            log_scales[j][k] += s2[k] * rgr;
        }
        quats[j] = quat_rotation_vjp(&q, &d_rot);
    }

    let scale = reduction_scale(cfg.data_reduction, batch.len());
    let slices = acc
        .slices
        .iter()
        .zip(&ctx)
        .zip(states)
        .map(|((sa, c), st)| {
            let d_rot = sa.rot + 2.0 * sa.cov.to_matrix() * c.rot * c.psf_stack.to_matrix();
            let eta = if cfg.outlier_weighting {
                scale * (sa.count as f64 - c.weight * sa.abs_residual)
            } else {
                0.0
            };
            SliceGrads {
                quat: quat_rotation_vjp(&st.quat, &d_rot),
                trans: sa.trans,
                log_sigma: sa.log_sigma,
                eta,
            }
        })
        .collect();

    Ok((
        loss,
        Some(Gradients {
            field: FieldGrads {
                means: acc.means,
                log_scales,
                quats,
                intensities: acc.intensities,
            },
            slices,
        }),
    ))
}

/// Loss on `batch` with the neighbor lists held fixed.
pub fn compute_loss(
    batch: &Batch,
    field: &GaussianField,
    states: &[SliceState],
    cfg: &LossConfig,
) -> Result<LossBreakdown> {
    Ok(evaluate(batch, field, states, cfg, false)?.0)
}

/// Loss and its gradient with respect to every learnable parameter.
pub fn backward(
    batch: &Batch,
    field: &GaussianField,
    states: &[SliceState],
    cfg: &LossConfig,
) -> Result<(LossBreakdown, Gradients)> {
    let (loss, grads) = evaluate(batch, field, states, cfg, true)?;
    Ok((loss, grads.expect("gradients requested")))
}

/// Predicted intensities `σ_i · V_obs` of the batch points, computed exactly
/// as in the loss.
pub fn predict(
    batch: &Batch,
    field: &GaussianField,
    states: &[SliceState],
    delta: f64,
) -> Result<Vec<f64>> {
    if batch.range.end > batch.samples.len() {
        return Err(Error::OutOfBounds(format!("batch {:?} beyond the sample set", batch.range)));
    }
    batch.neighbors.check(batch.samples.len(), field.count())?;
    let ctx = slice_contexts(batch.samples, states)?;
    let covs = field.covariances()?;
    let kernel = Kernel {
        samples: batch.samples,
        neighbors: batch.neighbors,
        field,
        covs: &covs,
        ctx: &ctx,
        scale: 1.0,
        outlier: false,
        delta,
        grads: false,
    };
    let step = chunk_len(batch.len());
    let starts: Vec<usize> = batch.range.clone().step_by(step).collect();
    let parts: Vec<Vec<f64>> = starts
        .par_iter()
        .map(|&a| {
            let mut sc = kernel.scratch();
            (a..(a + step).min(batch.range.end))
                .map(|p| kernel.forward(p, &mut sc).map(|e| e.pred))
                .collect()
        })
        .collect::<Result<_>>()?;
    Ok(parts.concat())
}
