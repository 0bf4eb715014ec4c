use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use gsvr::geom::{rasterize, GaussianField, VolumeGrid};
use gsvr::io::{
    export_pointcloud, export_slices, read_field, read_history, read_nifti, read_poses, read_stack, stack_volumes,
    write_field, write_history, write_nifti, write_poses, Axis, NormalizeMode, Normalization, RunConfig,
};
use gsvr::metrics::{align_field, evaluate_all, median, motion_error};
use gsvr::motion::{SliceStack, SliceState};
use gsvr::simulate::{make_phantom_with, simulate_stacks, Orientation};
use gsvr::train::{fit, Truth};
use log::info;

use crate::{ConvergenceArgs, EvaluateArgs, ExportArgs, ReconstructArgs, SimulateArgs};

#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Data(gsvr::Error),
    /// A data error while reading or writing a named file.
    File(PathBuf, gsvr::Error),
}

impl Failure {
    pub fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Data(_) | Failure::File(..) => 2,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Usage(m) => f.write_str(m),
            Failure::Data(e) => write!(f, "{e}"),
            Failure::File(p, e) => write!(f, "{}: {e}", p.display()),
        }
    }
}

impl From<gsvr::Error> for Failure {
    fn from(e: gsvr::Error) -> Self {
        Failure::Data(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Data(e.into())
    }
}

type Outcome<T = ()> = std::result::Result<T, Failure>;

/// Attaches `path` to I/O failures, which do not name the file themselves.
fn at(path: &Path) -> impl Fn(gsvr::Error) -> Failure + '_ {
    move |e| match e {
        gsvr::Error::Io(_) | gsvr::Error::Csv(_) => Failure::File(path.to_path_buf(), e),
        other => Failure::Data(other),
    }
}

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

/// Reads `path` if given (defaults otherwise) and applies `--seed`.
pub fn load_config(path: Option<&Path>, seed: Option<u64>) -> Outcome<RunConfig> {
    let mut cfg = match path {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| usage(format!("cannot read config {}: {e}", p.display())))?;
            RunConfig::from_toml(&text).map_err(|e| usage(format!("{}: {e}", p.display())))?
        }
        None => RunConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn checked(cfg: RunConfig) -> Outcome<RunConfig> {
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    Ok(cfg)
}

fn mask_volume(grid: &VolumeGrid, mask: &[bool]) -> VolumeGrid {
    let mut m = grid.clone();
    m.mask = None;
    m.data = mask.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
    m
}

pub fn simulate(mut cfg: RunConfig, a: &SimulateArgs) -> Outcome {
    let s = &mut cfg.simulation;
    if let Some(v) = a.size {
        s.size = v;
    }
    if let Some(n) = a.stacks {
        s.orientations = Orientation::ALL[..n as usize].to_vec();
    }
    if let Some(v) = a.thickness {
        s.thickness = v;
    }
    if let Some(v) = a.inplane {
        s.inplane = v;
    }
    if let Some(v) = a.noise {
        s.noise_std = v;
    }
    if let Some(v) = a.rot_max {
        s.rot_max = v;
    }
    if let Some(v) = a.trans_max {
        s.trans_max = v;
    }
    if a.no_psf {
        cfg.psf.enabled = false;
    }
    let cfg = checked(cfg)?;
    fs::create_dir_all(&a.out)?;

    let gt = make_phantom_with(cfg.simulation.size, cfg.simulation.spacing, cfg.phantom_seed())?;
    let mask = gt.mask.clone().unwrap_or_else(|| vec![true; gt.len()]);
    write_nifti(&gt, a.out.join("gt.nii"), None)?;
    write_nifti(&mask_volume(&gt, &mask), a.out.join("gt_mask.nii"), None)?;
    export_slices(&gt, cfg.output.png_axis.parse()?, a.out.join("gt.png"))?;

    let sims = simulate_stacks(&gt, &cfg.acquisition(), &cfg.motion())?;
    let mut truth = Vec::new();
    let mut counts = Vec::new();
    for (k, sim) in sims.iter().enumerate() {
        let (img, m) = stack_volumes(&sim.stack)?;
        write_nifti(&img, a.out.join(format!("stack_{k}.nii")), None)?;
        write_nifti(&m, a.out.join(format!("stack_{k}_mask.nii")), None)?;
        truth.extend_from_slice(&sim.truth);
        counts.push(sim.stack.n_slices());
        info!(
            "stack {k} ({:?}): {:?} voxels, {} masked",
            cfg.simulation.orientations[k],
            sim.stack.dims,
            sim.stack.masked_count()
        );
    }
    write_poses(&truth, &counts, a.out.join("truth.csv"))?;
    cfg.save(a.out.join("config.toml"))?;
    println!("wrote {} stacks and ground truth to {}", sims.len(), a.out.display());
    Ok(())
}

fn masked_pixel_centers(stacks: &[SliceStack]) -> Vec<[f64; 3]> {
    let mut pts = Vec::new();
    for st in stacks {
        let [nx, ny, ns] = st.dims;
        for s in 0..ns {
            for j in 0..ny {
                for i in 0..nx {
                    if st.mask[st.index(i, j, s)] {
                        let p = st.affine * nalgebra::Vector4::new(i as f64, j as f64, s as f64, 1.0);
                        pts.push([p[0], p[1], p[2]]);
                    }
                }
            }
        }
    }
    pts
}

fn read_mask(path: &Path, like: &VolumeGrid) -> Outcome<Vec<bool>> {
    let m = read_nifti(path, NormalizeMode::Identity).map_err(at(path))?.grid;
    if m.dims != like.dims {
        return Err(gsvr::Error::Format {
            path: path.to_path_buf(),
            detail: format!("mask shape {:?} differs from volume shape {:?}", m.dims, like.dims),
        }
        .into());
    }
    Ok(m.data.iter().map(|&v| v != 0.0).collect())
}

pub fn reconstruct(mut cfg: RunConfig, a: &ReconstructArgs) -> Outcome {
    if !a.masks.is_empty() && a.masks.len() != a.stacks.len() {
        return Err(usage(format!("{} masks given for {} stacks", a.masks.len(), a.stacks.len())));
    }
    if let Some(v) = a.epochs {
        cfg.optim.epochs = v;
    }
    if let Some(v) = a.n_gaussians {
        cfg.model.n_gaussians = v;
    }
    if let Some(v) = a.top_k {
        cfg.optim.top_k = v;
    }
    if let Some(v) = a.lambda_reg {
        cfg.loss.lambda_reg = v;
    }
    if let Some(v) = a.metric_every {
        cfg.output.metric_every = v;
    }
    if a.no_psf {
        cfg.psf.enabled = false;
    }
    if a.spacing.is_some_and(|s| !(s > 0.0)) {
        return Err(usage("--spacing must be positive"));
    }
    let cfg = checked(cfg)?;

    let mut stacks = Vec::with_capacity(a.stacks.len());
    let mut norms = Vec::with_capacity(a.stacks.len());
    for (k, path) in a.stacks.iter().enumerate() {
        let mask = a.masks.get(k).map(PathBuf::as_path);
        let (st, n) = read_stack(path, mask, NormalizeMode::default()).map_err(at(mask.filter(|m| !m.exists()).unwrap_or(path)))?;
        info!("{}: {:?} voxels, {} masked", path.display(), st.dims, st.masked_count());
        stacks.push(st);
        norms.push(n);
    }
    let norm: Normalization = norms[0];

    let reference = match &a.reference {
        Some(p) => {
            let mut g = read_nifti(p, NormalizeMode::Identity).map_err(at(p))?.grid;
            let mask = match &a.reference_mask {
                Some(m) => read_mask(m, &g)?,
                None => vec![true; g.len()],
            };
            // Scored in the units the stacks were normalized to.
            g.data.iter_mut().for_each(|v| *v = norm.apply(*v));
            Some(g.with_mask(mask)?)
        }
        None => None,
    };
    let truth: Option<Vec<SliceState>> = a.truth.as_ref().map(|p| read_poses(p).map_err(at(p))).transpose()?;
    let total: usize = stacks.iter().map(SliceStack::n_slices).sum();
    if let Some(t) = &truth {
        if t.len() != total {
            return Err(gsvr::Error::Format {
                path: a.truth.clone().unwrap_or_default(),
                detail: format!("{} poses for {total} slices", t.len()),
            }
            .into());
        }
    }

    let fc = cfg.fit_config();
    let scored = reference.as_ref().map(|g| Truth {
        volume: g,
        poses: truth.as_deref(),
    });
    let out = fit(&stacks, &fc, scored)?;

    fs::create_dir_all(&a.out)?;
    write_field(&out.field, a.out.join("field.gsvr"))?;
    write_history(&out.history, a.out.join("history.csv"))?;
    let counts: Vec<usize> = stacks.iter().map(SliceStack::n_slices).collect();
    write_poses(&out.states, &counts, a.out.join("poses.csv"))?;
    cfg.save(a.out.join("config.toml"))?;

    let field = match &truth {
        Some(t) => align_field(&out.field, &out.states, t)?,
        None => out.field.clone(),
    };
    let mut grid = match &reference {
        Some(g) => {
            let mut g = g.clone();
            g.mask = None;
            g
        }
        None => {
            let spacing = a
                .spacing
                .unwrap_or_else(|| stacks.iter().map(|s| s.inplane).fold(f64::INFINITY, f64::min));
            VolumeGrid::bounding(&masked_pixel_centers(&stacks), spacing, 0.0)?
        }
    };
    let k = cfg.optim.top_k.min(field.count());
    grid.data = rasterize(&field, &grid, k, cfg.loss.delta)?.data;
    write_nifti(&grid, a.out.join("volume.nii"), Some(&norm))?;
    export_slices(&grid, cfg.output.png_axis.parse()?, a.out.join("volume.png"))?;

    let last = out.history.last().expect("history has the initial row");
    println!(
        "{} epochs in {:.1} s, final loss {:.6}",
        cfg.optim.epochs, last.wall_clock_s, last.total_loss
    );
    if let (Some(first), Some(p), Some(s)) = (out.history.first(), last.psnr, last.ssim) {
        println!(
            "PSNR {:.2} dB (epoch 0: {:.2} dB), SSIM {:.4} (epoch 0: {:.4})",
            p,
            first.psnr.unwrap_or(f64::NAN),
            s,
            first.ssim.unwrap_or(f64::NAN)
        );
    }
    if let Some(t) = &truth {
        let errs = motion_error(&out.states, t)?;
        let mut deg: Vec<f64> = errs.iter().map(|e| e.degrees).collect();
        let mut mm: Vec<f64> = errs.iter().map(|e| e.mm).collect();
        println!("median slice motion error {:.2} deg, {:.2} mm", median(&mut deg), median(&mut mm));
    }
    println!("wrote results to {}", a.out.display());
    Ok(())
}

pub fn evaluate(a: &EvaluateArgs) -> Outcome {
    let pred = read_nifti(&a.pred, NormalizeMode::Identity).map_err(at(&a.pred))?.grid;
    let gt = read_nifti(&a.gt, NormalizeMode::Identity).map_err(at(&a.gt))?.grid;
    let mask = match &a.mask {
        Some(m) => read_mask(m, &gt)?,
        None => vec![true; gt.len()],
    };
    let row = evaluate_all(&pred, &gt, &mask)?;
    println!("{:<6} {:>10}", "metric", "value");
    println!("{:<6} {:>10.4}", "psnr", row.psnr);
    println!("{:<6} {:>10.4}", "ssim", row.ssim);
    println!("{:<6} {:>10.4}", "ncc", row.ncc);
    if let Some(out) = &a.out {
        let mut w = csv::Writer::from_path(out).map_err(gsvr::Error::from)?;
        w.serialize(row).map_err(gsvr::Error::from)?;
        w.flush()?;
    }
    Ok(())
}

fn export_grid(field: &GaussianField, a: &ExportArgs) -> Outcome<VolumeGrid> {
    match &a.grid {
        Some(p) => {
            let g = read_nifti(p, NormalizeMode::Identity).map_err(at(p))?.grid;
            let mut out = VolumeGrid::new(g.dims, g.affine)?;
            out.mask = None;
            Ok(out)
        }
        None => {
            if !(a.spacing > 0.0) {
                return Err(usage("--spacing must be positive"));
            }
            let margin = field
                .log_scales
                .iter()
                .flatten()
                .fold(0.0f64, |m, &l| m.max(l.exp()));
            Ok(VolumeGrid::bounding(&field.means, a.spacing, 2.0 * margin)?)
        }
    }
}

pub fn export(cfg: RunConfig, a: &ExportArgs) -> Outcome {
    if a.ply.is_none() && a.png.is_none() && a.nifti.is_none() {
        return Err(usage("nothing to export: give --ply, --png or --nifti"));
    }
    let gamma = a.gamma.unwrap_or(cfg.output.ply_gamma);
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(usage(format!("--gamma {gamma} is outside (0, 1]")));
    }
    let axis: Axis = a
        .axis
        .as_deref()
        .unwrap_or(&cfg.output.png_axis)
        .parse()
        .map_err(|e: gsvr::Error| usage(e.to_string()))?;
    let cfg = checked(cfg)?;

    let field = read_field(&a.field).map_err(at(&a.field))?;
    if let Some(p) = &a.ply {
        export_pointcloud(&field, gamma, p)?;
        println!("wrote {} points to {}", field.count(), p.display());
    }
    if a.png.is_some() || a.nifti.is_some() {
        let mut grid = export_grid(&field, a)?;
        grid.data = rasterize(&field, &grid, cfg.optim.top_k.min(field.count()), cfg.loss.delta)?.data;
        if let Some(p) = &a.nifti {
            write_nifti(&grid, p, None)?;
            println!("wrote {:?} volume to {}", grid.dims, p.display());
        }
        if let Some(p) = &a.png {
            let m = export_slices(&grid, axis, p)?;
            println!("wrote {}x{} montage to {}", m.width, m.height, p.display());
        }
    }
    Ok(())
}

#[derive(serde::Serialize)]
struct CurveRow {
    epoch: usize,
    budget_fraction: f64,
    wall_clock_s: f64,
    total_loss: f64,
    psnr: f64,
    ssim: f64,
}

pub fn convergence(a: &ConvergenceArgs) -> Outcome {
    let history = read_history(&a.history).map_err(at(&a.history))?;
    let budget = history.iter().map(|r| r.epoch).max().unwrap_or(0).max(1) as f64;
    let rows: Vec<CurveRow> = history
        .iter()
        .filter_map(|r| {
            Some(CurveRow {
                epoch: r.epoch,
                budget_fraction: r.epoch as f64 / budget,
                wall_clock_s: r.wall_clock_s,
                total_loss: r.total_loss,
                psnr: r.psnr?,
                ssim: r.ssim?,
            })
        })
        .collect();
    if rows.is_empty() {
        return Err(gsvr::Error::Format {
            path: a.history.clone(),
            detail: "no scored epochs; reconstruct with --reference".into(),
        }
        .into());
    }
    let mut w = csv::Writer::from_path(&a.out).map_err(gsvr::Error::from)?;
    for r in &rows {
        w.serialize(r).map_err(gsvr::Error::from)?;
    }
    w.flush()?;
    match rows.iter().find(|r| r.ssim >= a.ssim_target) {
        Some(r) => println!(
            "SSIM reaches {} at epoch {} ({:.0}% of the budget, {:.1} s)",
            a.ssim_target,
            r.epoch,
            100.0 * r.budget_fraction,
            r.wall_clock_s
        ),
        None => println!("SSIM never reaches {}", a.ssim_target),
    }
    let last = rows.last().expect("checked non-empty");
    println!("final PSNR {:.2} dB, SSIM {:.4} over {} scored epochs", last.psnr, last.ssim, rows.len());
    Ok(())
}
