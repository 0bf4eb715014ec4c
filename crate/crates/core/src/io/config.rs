//! TOML run configuration shared by every CLI subcommand.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forward::PsfConvention;
use crate::init::{InitConfig, IntensityPolicy};
use crate::simulate::{AcquisitionParams, MotionParams, Orientation, DEFAULT_GT_SPACING};
use crate::train::{FitConfig, LossConfig, OptimConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub n_gaussians: usize,
    pub lambda_init: f64,
    pub init_scale: f64,
    pub intensity: IntensityPolicy,
}

impl Default for ModelSection {
    fn default() -> Self {
        let i = InitConfig::default();
        ModelSection {
            n_gaussians: i.n_gaussians,
            lambda_init: i.lambda_init,
            init_scale: i.init_scale,
            intensity: i.intensity,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PsfSection {
    pub enabled: bool,
    pub inplane_fwhm_factor: f64,
    pub through_fwhm_factor: f64,
}

impl Default for PsfSection {
    fn default() -> Self {
        let c = PsfConvention::default();
        PsfSection {
            enabled: true,
            inplane_fwhm_factor: c.inplane_fwhm_factor,
            through_fwhm_factor: c.through_fwhm_factor,
        }
    }
}

impl PsfSection {
    pub fn convention(&self) -> PsfConvention {
        PsfConvention {
            inplane_fwhm_factor: self.inplane_fwhm_factor,
            through_fwhm_factor: self.through_fwhm_factor,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulationSection {
    /// Ground-truth voxels per axis.
    pub size: usize,
    /// Ground-truth voxel size in mm.
    pub spacing: f64,
    pub inplane: f64,
    pub thickness: f64,
    pub noise_std: f64,
    pub orientations: Vec<Orientation>,
    pub mask_dilation: usize,
    pub rot_max: f64,
    pub trans_max: f64,
}

impl Default for SimulationSection {
    fn default() -> Self {
        let a = AcquisitionParams::default();
        let m = MotionParams::default();
        SimulationSection {
            size: 64,
            spacing: DEFAULT_GT_SPACING,
            inplane: a.inplane,
            thickness: a.thickness,
            noise_std: a.noise_std,
            orientations: a.orientations,
            mask_dilation: a.mask_dilation,
            rot_max: m.rot_max,
            trans_max: m.trans_max,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    /// Score against the reference every this many epochs (0: first and last only).
    pub metric_every: usize,
    /// Axis-length multiplier for point-cloud export.
    pub ply_gamma: f64,
    /// Slice axis of PNG montages: "x", "y" or "z".
    pub png_axis: String,
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection {
            metric_every: 25,
            ply_gamma: 1.0,
            png_axis: "z".into(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Root seed. Phantom, motion, noise and initialization draw from
    /// distinct seeds derived from it.
    pub seed: u64,
    pub model: ModelSection,
    pub loss: LossConfig,
    pub optim: OptimConfig,
    pub psf: PsfSection,
    pub simulation: SimulationSection,
    pub output: OutputSection,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml(&fs::read_to_string(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_toml()?)?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        self.optim.validate()?;
        self.acquisition().validate()?;
        if self.model.n_gaussians == 0 || !(self.model.init_scale > 0.0) {
            return Err(Error::invalid("n_gaussians and init_scale must be positive"));
        }
        if self.simulation.size < crate::simulate::MIN_PHANTOM_SIZE || !(self.simulation.spacing > 0.0) {
            return Err(Error::invalid(format!(
                "simulation size must be at least {} and spacing positive",
                crate::simulate::MIN_PHANTOM_SIZE
            )));
        }
        self.output.png_axis.parse::<crate::io::Axis>()?;
        Ok(())
    }

    pub fn phantom_seed(&self) -> u64 {
        self.seed
    }

    pub fn fit_config(&self) -> FitConfig {
        FitConfig {
            init: InitConfig {
                n_gaussians: self.model.n_gaussians,
                lambda_init: self.model.lambda_init,
                seed: self.seed.wrapping_add(3),
                init_scale: self.model.init_scale,
                intensity: self.model.intensity,
            },
            loss: self.loss.clone(),
            optim: self.optim.clone(),
            psf: self.psf.convention(),
            psf_enabled: self.psf.enabled,
            metric_every: self.output.metric_every,
        }
    }

    pub fn acquisition(&self) -> AcquisitionParams {
        let s = &self.simulation;
        AcquisitionParams {
            inplane: s.inplane,
            thickness: s.thickness,
            noise_std: s.noise_std,
            orientations: s.orientations.clone(),
            psf: self.psf.convention(),
            psf_enabled: self.psf.enabled,
            mask_dilation: s.mask_dilation,
            seed: self.seed.wrapping_add(2),
        }
    }

    pub fn motion(&self) -> MotionParams {
        MotionParams {
            rot_max: self.simulation.rot_max,
            trans_max: self.simulation.trans_max,
            seed: self.seed.wrapping_add(1),
        }
    }
}
