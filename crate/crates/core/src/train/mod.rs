//! Joint optimization of the field and the per-slice states.

mod adamw;
mod loss;

use std::time::Instant;

use serde::{Deserialize, Serialize};

pub use adamw::{AdamParams, Moments};
pub use loss::{
    backward, compute_loss, predict, Batch, FieldGrads, Gradients, LossBreakdown, LossConfig, Reduction,
    SliceGrads,
};

use crate::error::{Error, Result};
use crate::forward::PsfConvention;
use nalgebra::{Matrix3, Vector3};

use crate::geom::{arr3, quat_mul, quat_norm, quat_rotation_vjp, quat_to_rotation, rotation_to_quat, rasterize_with_index, vec3, GaussianField, VolumeGrid};
use crate::init::{init_field, sample_init_positions, InitConfig};
use crate::knn::{NeighborIndex, Neighbors};
use crate::metrics::{align_field, psnr, ssim, window_support};
use crate::motion::{init_states, SampleSet, SliceStack, SliceState};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LearningRates {
    pub means: f64,
    pub log_scales: f64,
    pub quats: f64,
    pub intensities: f64,
    pub motion_rotation: f64,
    pub motion_translation: f64,
    pub log_sigma: f64,
    pub eta: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        LearningRates {
            means: 2.5e-2,
            log_scales: 2.5e-2,
            quats: 1e-2,
            intensities: 1e-2,
            motion_rotation: 2.5e-3,
            motion_translation: 1e-1,
            log_sigma: 1e-2,
            eta: 1e-2,
        }
    }
}

impl LearningRates {
    fn all(&self) -> [f64; 8] {
        [
            self.means,
            self.log_scales,
            self.quats,
            self.intensities,
            self.motion_rotation,
            self.motion_translation,
            self.log_sigma,
            self.eta,
        ]
    }
}

/// Step decay: the rate is multiplied by `factor` every `every` epochs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StepSchedule {
    pub factor: f64,
    pub every: usize,
}

impl Default for StepSchedule {
    fn default() -> Self {
        StepSchedule {
            factor: 0.5,
            every: 200,
        }
    }
}

pub fn lr_at(epoch: usize, base: f64, schedule: &StepSchedule) -> f64 {
    base * schedule.factor.powi((epoch / schedule.every.max(1)) as i32)
}

/// A rigid motion applied jointly to the field and every slice pose, or a
/// common rescaling of intensities and slice scales, leaves the loss
/// unchanged. The gauge picks one representative.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Gauge {
    Free,
    /// Hold the best-covered slice of the first stack fixed.
    AnchorSlice,
    /// After every step, move the field and all slices together so that the
    /// sample-weighted mean slice motion is the identity and the weighted
    /// mean log-scale is zero.
    MeanMotion,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub epochs: usize,
    pub lr: LearningRates,
    pub schedule: StepSchedule,
    pub adam: AdamParams,
    pub knn_refresh_every: usize,
    pub top_k: usize,
    /// Epochs during which slice motion stays at its initial value.
    pub motion_warmup: usize,
    pub freeze_motion: bool,
    /// Learn the per-slice intensity scalars.
    pub learn_slice_scale: bool,
    /// How the global pose and intensity-scale ambiguity is resolved.
    pub gauge: Gauge,
    pub nonnegative_intensities: bool,
    /// Lower bound applied to every log-scale after each step.
    pub min_log_scale: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            epochs: 500,
            lr: LearningRates::default(),
            schedule: StepSchedule::default(),
            adam: AdamParams::default(),
            knn_refresh_every: 50,
            top_k: 50,
            motion_warmup: 10,
            freeze_motion: false,
            learn_slice_scale: true,
            gauge: Gauge::MeanMotion,
            nonnegative_intensities: false,
            min_log_scale: 1e-3f64.ln(),
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::invalid("epochs must be positive"));
        }
        if self.lr.all().iter().any(|&r| !(r > 0.0)) {
            return Err(Error::invalid("learning rates must be positive"));
        }
        if !(self.schedule.factor > 0.0) || self.schedule.every == 0 {
            return Err(Error::invalid("scheduler needs a positive factor and period"));
        }
        if self.knn_refresh_every == 0 || self.top_k == 0 {
            return Err(Error::invalid("knn_refresh_every and top_k must be positive"));
        }
        let a = &self.adam;
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || !(a.eps > 0.0) {
            return Err(Error::invalid("AdamW betas must be in [0, 1) and eps positive"));
        }
        Ok(())
    }
}

/// Everything [`fit`] needs besides the data.
#[derive(Clone, Debug, PartialEq)]
pub struct FitConfig {
    pub init: InitConfig,
    pub loss: LossConfig,
    pub optim: OptimConfig,
    pub psf: PsfConvention,
    pub psf_enabled: bool,
    /// Evaluate against the reference every this many epochs (0: never,
    /// except the first and last epoch).
    pub metric_every: usize,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            init: InitConfig::default(),
            loss: LossConfig::default(),
            optim: OptimConfig::default(),
            psf: PsfConvention::default(),
            psf_enabled: true,
            metric_every: 0,
        }
    }
}

/// One row of the training history. Row 0 describes the initial field;
/// row `e` holds the loss measured during epoch `e` and metrics after it.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub data_loss: f64,
    pub reg_loss: f64,
    pub total_loss: f64,
    pub wall_clock_s: f64,
    pub psnr: Option<f64>,
    pub ssim: Option<f64>,
}

const GROUPS: usize = 8;

/// Optimizer moments for every parameter group plus loop bookkeeping.
#[derive(Clone, Debug)]
pub struct TrainState {
    /// Order: means, log-scales, quaternions, intensities, motion rotation,
    /// motion translation, log-sigma, eta.
    pub moments: [Moments; GROUPS],
    pub epoch: usize,
    pub index: Option<NeighborIndex>,
    pub history: Vec<EpochRecord>,
    /// Slice whose motion and intensity scale are held fixed.
    pub anchor: Option<usize>,
    /// Per-slice rotation centers used for the motion update (world origin
    /// when absent).
    pub pivots: Vec<[f64; 3]>,
    /// Per-slice weights of the mean-motion gauge (sample counts).
    pub gauge_weights: Vec<f64>,
}

impl TrainState {
    pub fn new(n_primitives: usize, n_slices: usize) -> Self {
        let n = n_primitives;
        let s = n_slices;
        TrainState {
            moments: [
                Moments::new(3 * n),
                Moments::new(3 * n),
                Moments::new(4 * n),
                Moments::new(n),
                Moments::new(4 * s),
                Moments::new(3 * s),
                Moments::new(s),
                Moments::new(s),
            ],
            epoch: 0,
            index: None,
            history: Vec::new(),
            anchor: None,
            pivots: Vec::new(),
            gauge_weights: Vec::new(),
        }
    }
}

fn slice_group<const D: usize>(
    states: &mut [SliceState],
    get: impl Fn(&mut SliceState) -> &mut [f64; D],
) -> Vec<f64> {
    states.iter_mut().flat_map(|s| *get(s)).collect()
}

fn scatter<const D: usize>(
    states: &mut [SliceState],
    flat: &[f64],
    get: impl Fn(&mut SliceState) -> &mut [f64; D],
) {
    for (s, chunk) in states.iter_mut().zip(flat.chunks_exact(D)) {
        get(s).copy_from_slice(chunk);
    }
}

/// Applies the rigid map `x ↦ Gᵀ(x − c)` to the field and every slice pose,
/// with `G` the chordal mean of the slice rotations and `c` the mean
/// translation (both weighted). The rendered observations do not change.
pub fn recenter_pose(field: &mut GaussianField, states: &mut [SliceState], weights: &[f64]) {
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) {
        return;
    }
    let mut m = Matrix3::zeros();
    let mut c = Vector3::zeros();
    for (s, &w) in states.iter().zip(weights) {
        if let Ok(r) = quat_to_rotation(&s.quat) {
            m += r * w;
        }
        c += vec3(s.trans) * w;
    }
    c /= total;
    let svd = m.svd(true, true);
    let (Some(u), Some(v_t)) = (svd.u, svd.v_t) else {
        return;
    };
    let d = (u * v_t).determinant().signum();
    let g = u * Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d)) * v_t;
    let gt = g.transpose();
    let qg = rotation_to_quat(&gt);
    for s in states.iter_mut() {
        s.quat = quat_mul(&qg, &s.quat);
        s.trans = arr3(&(gt * (vec3(s.trans) - c)));
    }
    field.transform_rigid(&gt, &(-(gt * c)));
}

/// Shifts slice log-scales to a zero weighted mean and rescales the field
/// intensities to compensate.
pub fn recenter_scale(field: &mut GaussianField, states: &mut [SliceState], weights: &[f64]) {
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) {
        return;
    }
    let mean = states.iter().zip(weights).map(|(s, w)| s.log_sigma * w).sum::<f64>() / total;
    for s in states.iter_mut() {
        s.log_sigma -= mean;
    }
    let k = mean.exp();
    field.intensities.iter_mut().for_each(|c| *c *= k);
}

fn renormalize(q: &mut [f64; 4]) {
    let n = quat_norm(q);
    if n > 0.0 && n.is_finite() {
        q.iter_mut().for_each(|v| *v /= n);
    }
}

/// One AdamW update of every active group at `epoch`, followed by the
/// log-scale floor and, if enabled, the intensity sign constraint.
pub fn adamw_step(
    state: &mut TrainState,
    field: &mut GaussianField,
    states: &mut [SliceState],
    grads: &Gradients,
    cfg: &OptimConfig,
    outlier_weighting: bool,
    epoch: usize,
) {
    let lr = cfg.lr.all().map(|b| lr_at(epoch, b, &cfg.schedule));
    let hp = &cfg.adam;
    let [m_mu, m_ls, m_q, m_c, m_rot, m_tr, m_sig, m_eta] = &mut state.moments;
    m_mu.step(field.means.as_flattened_mut(), grads.field.means.as_flattened(), lr[0], hp);
    m_ls.step(field.log_scales.as_flattened_mut(), grads.field.log_scales.as_flattened(), lr[1], hp);
    m_q.step(field.quats.as_flattened_mut(), grads.field.quats.as_flattened(), lr[2], hp);
    // The loss ignores quaternion norm, but Adam's per-coordinate steps do
    // not; left alone the norm drifts and rescales the effective step size.
    field.quats.iter_mut().for_each(renormalize);
    m_c.step(&mut field.intensities, &grads.field.intensities, lr[3], hp);

    let anchor = state.anchor;
    let anchored = |i: usize| anchor == Some(i);
    let motion = !cfg.freeze_motion && epoch >= cfg.motion_warmup;
    if motion {
        // Poses are stepped in coordinates centered on each slice's pivot c:
        // x = R(x₀ − c) + c + t', so t = t' + c − R·c.
        let pivot = |i: usize| state.pivots.get(i).copied().map(vec3).unwrap_or_else(Vector3::zeros);
        let mut gq = Vec::with_capacity(4 * states.len());
        let mut gt = Vec::with_capacity(3 * states.len());
        for (i, (s, g)) in states.iter().zip(&grads.slices).enumerate() {
            if anchored(i) {
                gq.extend([0.0; 4]);
                gt.extend([0.0; 3]);
                continue;
            }
            let c = pivot(i);
            let extra = quat_rotation_vjp(&s.quat, &(-vec3(g.trans) * c.transpose()));
            gq.extend((0..4).map(|k| g.quat[k] + extra[k]));
            gt.extend(g.trans);
        }
        let shift = |s: &SliceState, c: &Vector3<f64>| -> Vector3<f64> {
            let r = quat_to_rotation(&s.quat).unwrap_or_else(|_| Matrix3::identity());
            c - r * c
        };
        let mut tc: Vec<f64> = states
            .iter()
            .enumerate()
            .flat_map(|(i, s)| {
                let c = pivot(i);
                arr3(&(vec3(s.trans) - shift(s, &c)))
            })
            .collect();
        let mut p = slice_group(states, |s| &mut s.quat);
        m_rot.step(&mut p, &gq, lr[4], hp);
        scatter(states, &p, |s| &mut s.quat);
        states.iter_mut().for_each(|s| renormalize(&mut s.quat));
        m_tr.step(&mut tc, &gt, lr[5], hp);
        for (i, (s, t)) in states.iter_mut().zip(tc.chunks_exact(3)).enumerate() {
            let c = pivot(i);
            s.trans = arr3(&(Vector3::new(t[0], t[1], t[2]) + shift(s, &c)));
        }
    }

    if cfg.learn_slice_scale {
        let g: Vec<f64> = grads
            .slices
            .iter()
            .enumerate()
            .map(|(i, g)| if anchored(i) { 0.0 } else { g.log_sigma })
            .collect();
        let mut p: Vec<f64> = states.iter().map(|s| s.log_sigma).collect();
        m_sig.step(&mut p, &g, lr[6], hp);
        for (s, v) in states.iter_mut().zip(p) {
            s.log_sigma = v;
        }
    }

    if outlier_weighting {
        let g: Vec<f64> = grads.slices.iter().map(|g| g.eta).collect();
        let mut p: Vec<f64> = states.iter().map(|s| s.eta).collect();
        m_eta.step(&mut p, &g, lr[7], hp);
        for (s, v) in states.iter_mut().zip(p) {
            s.eta = v;
        }
    }

    if cfg.gauge == Gauge::MeanMotion && state.gauge_weights.len() == states.len() {
        if motion {
            recenter_pose(field, states, &state.gauge_weights);
        }
        if cfg.learn_slice_scale {
            recenter_scale(field, states, &state.gauge_weights);
        }
    }

    for v in field.log_scales.as_flattened_mut() {
        *v = v.max(cfg.min_log_scale);
    }
    if cfg.nonnegative_intensities {
        for c in &mut field.intensities {
            *c = c.max(0.0);
        }
    }
}

/// Ground truth the training history is scored against.
#[derive(Clone, Copy, Debug)]
pub struct Truth<'a> {
    pub volume: &'a VolumeGrid,
    /// True slice poses. When given, each scored field is first moved into
    /// their frame, removing the unobservable global pose.
    pub poses: Option<&'a [SliceState]>,
}

impl<'a> Truth<'a> {
    pub fn volume(volume: &'a VolumeGrid) -> Self {
        Truth { volume, poses: None }
    }

    pub fn with_poses(volume: &'a VolumeGrid, poses: &'a [SliceState]) -> Self {
        Truth {
            volume,
            poses: Some(poses),
        }
    }
}

/// Only voxels that some SSIM window centered in the mask can see are
/// rasterized.
struct Reference<'a> {
    truth: Truth<'a>,
    mask: Vec<bool>,
    support: VolumeGrid,
}

impl<'a> Reference<'a> {
    fn new(truth: Truth<'a>) -> Result<Self> {
        let gt = truth.volume;
        let mask = gt.mask.clone().unwrap_or_else(|| vec![true; gt.len()]);
        let support = gt.clone().with_mask(window_support(&mask, gt.dims))?;
        Ok(Reference { truth, mask, support })
    }

    fn score(&self, field: &GaussianField, states: &[SliceState], k: usize, delta: f64) -> Result<(f64, f64)> {
        let aligned;
        let field = match self.truth.poses {
            Some(poses) => {
                aligned = align_field(field, states, poses)?;
                &aligned
            }
            None => field,
        };
        let index = NeighborIndex::build(&field.means, k)?;
        let pred = rasterize_with_index(field, &index, &self.support, k, delta)?;
        let gt = self.truth.volume;
        Ok((psnr(&pred, gt, &self.mask)?, ssim(&pred, gt, &self.mask)?))
    }
}

#[derive(Clone, Debug)]
pub struct FitOutput {
    pub field: GaussianField,
    pub states: Vec<SliceState>,
    pub history: Vec<EpochRecord>,
}

/// Initializes a field from the stacks and optimizes it jointly with the
/// slice motion. `reference`, when given, is scored into the history.
pub fn fit(stacks: &[SliceStack], cfg: &FitConfig, reference: Option<Truth<'_>>) -> Result<FitOutput> {
    if stacks.is_empty() {
        return Err(Error::invalid("at least one stack is required"));
    }
    let samples = SampleSet::from_stacks(stacks, &cfg.psf, cfg.psf_enabled)?;
    let field = init_field(&sample_init_positions(stacks, &cfg.init)?, &cfg.init)?;
    let states = init_states(stacks);
    fit_from(&samples, field, states, cfg, reference)
}

fn neighbors_for(
    samples: &SampleSet,
    field: &GaussianField,
    states: &[SliceState],
    k: usize,
    epoch: usize,
) -> Result<(NeighborIndex, Neighbors)> {
    let mut index = NeighborIndex::build(&field.means, k)?;
    index.epoch = epoch;
    let (pos, _) = samples.corrected(states)?;
    let nb = index.query(&pos, k)?;
    Ok((index, nb))
}

/// Mean nominal position of each slice's samples.
pub fn slice_centroids(samples: &SampleSet) -> Vec<[f64; 3]> {
    let mut sum = vec![[0.0; 3]; samples.slices.len()];
    for (p, &s) in samples.nominal.iter().zip(&samples.slice) {
        for k in 0..3 {
            sum[s as usize][k] += p[k];
        }
    }
    sum.iter()
        .zip(&samples.slices)
        .map(|(s, info)| {
            let n = info.n_points.max(1) as f64;
            [s[0] / n, s[1] / n, s[2] / n]
        })
        .collect()
}

/// The slice of the first stack with the most samples (lowest index on ties).
pub fn anchor_slice(samples: &SampleSet) -> Option<usize> {
    samples
        .slices
        .iter()
        .enumerate()
        .filter(|(_, s)| s.stack == 0 && s.n_points > 0)
        .max_by(|a, b| a.1.n_points.cmp(&b.1.n_points).then(b.0.cmp(&a.0)))
        .map(|(i, _)| i)
}

fn at_epoch(e: Error, epoch: usize) -> Error {
    match e {
        Error::Divergence { slice, .. } => Error::Divergence { epoch, slice },
        other => other,
    }
}

/// Optimizes a given field and set of slice states.
pub fn fit_from(
    samples: &SampleSet,
    mut field: GaussianField,
    mut states: Vec<SliceState>,
    cfg: &FitConfig,
    reference: Option<Truth<'_>>,
) -> Result<FitOutput> {
    cfg.loss.validate()?;
    cfg.optim.validate()?;
    field.validate()?;
    if samples.is_empty() {
        return Err(Error::invalid("no masked pixels to fit"));
    }
    let opt = &cfg.optim;
    let k = opt.top_k.min(field.count());
    let reference = reference.map(Reference::new).transpose()?;
    let score = |f: &GaussianField, st: &[SliceState]| -> Result<(Option<f64>, Option<f64>)> {
        match &reference {
            Some(r) => r.score(f, st, k, cfg.loss.delta).map(|(p, s)| (Some(p), Some(s))),
            None => Ok((None, None)),
        }
    };

    let start = Instant::now();
    let mut state = TrainState::new(field.count(), states.len());
    match opt.gauge {
        Gauge::AnchorSlice => state.anchor = anchor_slice(samples),
        Gauge::MeanMotion => state.gauge_weights = samples.slices.iter().map(|s| s.n_points as f64).collect(),
        Gauge::Free => {}
    }
    state.pivots = slice_centroids(samples);
    let (index, mut neighbors) = neighbors_for(samples, &field, &states, k, 0)?;
    state.index = Some(index);

    let initial = compute_loss(&Batch::full(samples, &neighbors), &field, &states, &cfg.loss)
        .map_err(|e| at_epoch(e, 0))?;
    let (p0, s0) = score(&field, &states)?;
    state.history.push(EpochRecord {
        epoch: 0,
        lr: lr_at(0, opt.lr.means, &opt.schedule),
        data_loss: initial.data,
        reg_loss: initial.reg,
        total_loss: initial.total,
        wall_clock_s: start.elapsed().as_secs_f64(),
        psnr: p0,
        ssim: s0,
    });

    let budget = cfg.loss.point_budget;
    for epoch in 0..opt.epochs {
        state.epoch = epoch;
        if epoch > 0 && epoch % opt.knn_refresh_every == 0 {
            let (index, nb) = neighbors_for(samples, &field, &states, k, epoch)?;
            state.index = Some(index);
            neighbors = nb;
        }
        let mut sum = LossBreakdown::default();
        let mut batches = 0usize;
        for lo in (0..samples.len()).step_by(budget) {
            let batch = Batch {
                samples,
                neighbors: &neighbors,
                range: lo..(lo + budget).min(samples.len()),
            };
            let (loss, grads) =
                backward(&batch, &field, &states, &cfg.loss).map_err(|e| at_epoch(e, epoch + 1))?;
            adamw_step(
                &mut state,
                &mut field,
                &mut states,
                &grads,
                opt,
                cfg.loss.outlier_weighting,
                epoch,
            );
            sum.data += loss.data;
            sum.reg += loss.reg;
            sum.total += loss.total;
            batches += 1;
        }
        let nb = batches as f64;
        let done = epoch + 1;
        let evaluate = reference.is_some()
            && (done == opt.epochs || (cfg.metric_every > 0 && done % cfg.metric_every == 0));
        let (p, s) = if evaluate { score(&field, &states)? } else { (None, None) };
        let rec = EpochRecord {
            epoch: done,
            lr: lr_at(epoch, opt.lr.means, &opt.schedule),
            data_loss: sum.data / nb,
            reg_loss: sum.reg / nb,
            total_loss: sum.total / nb,
            wall_clock_s: start.elapsed().as_secs_f64(),
            psnr: p,
            ssim: s,
        };
        if done % 25 == 0 || done == opt.epochs {
            log::info!(
                "epoch {done}/{}: loss {:.6} (data {:.6}, reg {:.6}){}",
                opt.epochs,
                rec.total_loss,
                rec.data_loss,
                rec.reg_loss,
                match (p, s) {
                    (Some(p), Some(s)) => format!(", PSNR {p:.2} dB, SSIM {s:.4}"),
                    _ => String::new(),
                }
            );
        }
        state.history.push(rec);
    }

    Ok(FitOutput {
        field,
        states,
        history: state.history,
    })
}
