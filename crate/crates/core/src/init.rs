//! Content-adaptive initialization.
//!
//! Primitive means are drawn from the masked pixels of all stacks with
//! probability `∝ (1 − λ)·‖∇I‖ + λ`, so `λ = 0` places primitives only where
//! the slices have edges and `λ = 1` samples uniformly.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{GaussianField, IDENTITY_QUAT};
use crate::motion::{lift_unchecked, SliceStack};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "value")]
pub enum IntensityPolicy {
    /// Intensity of the pixel the mean was drawn from.
    SourcePixel,
    Constant(f64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InitConfig {
    pub n_gaussians: usize,
    pub lambda_init: f64,
    pub seed: u64,
    /// Initial isotropic standard deviation in mm.
    pub init_scale: f64,
    pub intensity: IntensityPolicy,
}

impl Default for InitConfig {
    fn default() -> Self {
        InitConfig {
            n_gaussians: 50_000,
            lambda_init: 0.0,
            seed: 0,
            init_scale: 1.6,
            intensity: IntensityPolicy::SourcePixel,
        }
    }
}

impl InitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_gaussians == 0 {
            return Err(Error::invalid("n_gaussians must be positive"));
        }
        if !(0.0..=1.0).contains(&self.lambda_init) {
            return Err(Error::invalid(format!(
                "lambda_init {} not in [0, 1]",
                self.lambda_init
            )));
        }
        if !(self.init_scale > 0.0) {
            return Err(Error::invalid("init_scale must be positive"));
        }
        Ok(())
    }
}

/// Per-pixel central-difference gradient magnitude in pixel units, computed
/// independently on each slice. Borders replicate the edge pixel; pixels
/// outside the mask get zero.
pub fn gradient_magnitude(stack: &SliceStack) -> Vec<f64> {
    let [nx, ny, ns] = stack.dims;
    let mut out = vec![0.0; stack.data.len()];
    for k in 0..ns {
        for j in 0..ny {
            for i in 0..nx {
                let idx = stack.index(i, j, k);
                if !stack.mask[idx] {
                    continue;
                }
                let at = |ii: usize, jj: usize| stack.data[stack.index(ii, jj, k)];
                let gx = 0.5 * (at((i + 1).min(nx - 1), j) - at(i.saturating_sub(1), j));
                let gy = 0.5 * (at(i, (j + 1).min(ny - 1)) - at(i, j.saturating_sub(1)));
                out[idx] = (gx * gx + gy * gy).sqrt();
            }
        }
    }
    out
}

/// A masked pixel of one of the input stacks.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PixelRef {
    pub stack: usize,
    /// Flat index into the stack's data.
    pub index: usize,
}

/// Draws `cfg.n_gaussians` pixels with replacement from the pooled masked
/// pixels of all stacks.
pub fn sample_init_pixels(stacks: &[SliceStack], cfg: &InitConfig) -> Result<Vec<PixelRef>> {
    cfg.validate()?;
    let mut pixels = Vec::new();
    let mut weights = Vec::new();
    for (s, stack) in stacks.iter().enumerate() {
        let grad = gradient_magnitude(stack);
        for (idx, &m) in stack.mask.iter().enumerate() {
            if m {
                pixels.push(PixelRef { stack: s, index: idx });
                weights.push((1.0 - cfg.lambda_init) * grad[idx] + cfg.lambda_init);
            }
        }
    }
    if pixels.is_empty() {
        return Err(Error::invalid("no masked pixels to initialize from"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let dist = match WeightedIndex::new(&weights) {
        Ok(d) => d,
        Err(_) => {
            log::warn!("initialization probability mass is zero; sampling uniformly");
            WeightedIndex::new(vec![1.0; pixels.len()]).expect("uniform weights")
        }
    };
    Ok((0..cfg.n_gaussians)
        .map(|_| pixels[dist.sample(&mut rng)])
        .collect())
}

/// Sampled positions (mm) and the intensities of their source pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct InitSamples {
    pub positions: Vec<[f64; 3]>,
    pub intensities: Vec<f64>,
}

pub fn sample_init_positions(stacks: &[SliceStack], cfg: &InitConfig) -> Result<InitSamples> {
    let picks = sample_init_pixels(stacks, cfg)?;
    let mut positions = Vec::with_capacity(picks.len());
    let mut intensities = Vec::with_capacity(picks.len());
    for p in picks {
        let stack = &stacks[p.stack];
        let [nx, ny, _] = stack.dims;
        let (i, j, k) = (p.index % nx, (p.index / nx) % ny, p.index / (nx * ny));
        positions.push(lift_unchecked(&stack.affine, [i as f64, j as f64, k as f64]));
        intensities.push(stack.data[p.index]);
    }
    Ok(InitSamples {
        positions,
        intensities,
    })
}

/// Isotropic, axis-aligned primitives at the sampled positions.
pub fn init_field(samples: &InitSamples, cfg: &InitConfig) -> Result<GaussianField> {
    cfg.validate()?;
    if samples.positions.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::invalid("non-finite initial position"));
    }
    let n = samples.positions.len();
    let intensities = match cfg.intensity {
        IntensityPolicy::SourcePixel => samples.intensities.clone(),
        IntensityPolicy::Constant(c) => vec![c; n],
    };
    GaussianField::new(
        samples.positions.clone(),
        vec![[cfg.init_scale.ln(); 3]; n],
        vec![IDENTITY_QUAT; n],
        intensities,
    )
}
