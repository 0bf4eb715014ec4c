//! File formats: NIfTI-1 volumes, field snapshots, point clouds, PNG
//! montages, run configuration, slice poses and training history.

pub mod config;
pub mod field_file;
pub mod history;
pub mod montage;
pub mod nifti;
pub mod ply;
pub mod poses;

pub use config::RunConfig;
pub use field_file::{read_field, write_field};
pub use history::{read_history, write_history};
pub use montage::{export_slices, render_montage, Axis, Montage};
pub use nifti::{read_nifti, read_stack, stack_volumes, write_nifti, NiftiImage, NormalizeMode, Normalization};
pub use ply::{export_pointcloud, read_pointcloud};
pub use poses::{read_poses, write_poses};
