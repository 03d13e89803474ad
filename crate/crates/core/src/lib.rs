//! Interactive corrective-annotation training for 3D volumetric segmentation.
//!
//! A server trains a residual, group-normalised 3D U-Net continuously on
//! sparse corrections that an annotator makes to the model's own
//! predictions. Corrections are scoped to a bounding box; only annotated
//! voxels contribute to the loss. The annotator can be a person using a
//! client application or the deterministic [`sim_annotator`] oracle.
//!
//! Module map:
//!
//! - [`volume_io`]: NIfTI volumes and masks, windowing and cropping.
//! - [`annotation`]: sparse foreground/background corrections.
//! - [`unet3d`]: network, masked loss, patch sampling, sliding-window inference.
//! - [`scheduler`]: train/validation split, epoch sizing, model selection, restarts.
//! - [`server`]: the in-process service, its HTTP front end, and a client.
//! - [`metrics`]: dice, mean dose and running statistics.
//! - [`interaction_log`]: UI event logs and per-image annotation durations.
//! - [`sim_annotator`]: synthetic data and the oracle annotator.
//! - [`analysis`]: CSV and plot emitters used by the command line tool.

pub mod analysis;
pub mod annotation;
mod error;
pub mod interaction_log;
pub mod metrics;
pub mod scheduler;
pub mod server;
pub mod sim_annotator;
pub mod unet3d;
pub mod volume_io;

pub use annotation::{merge_corrected, Segmentation, SparseAnnotation};
pub use error::{Error, Result};
pub use volume_io::{BoundingBox, Volume, WindowPreset};

/// A voxel index `(x, y, z)` in (width, height, depth) order.
pub type Voxel = [usize; 3];

/// Binary voxel grid.
pub type Mask = ndarray::Array3<bool>;
