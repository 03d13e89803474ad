//! Sliding-window prediction over a bounding box.

use ndarray::Array3;

use super::config::NetworkConfig;
use super::network::UNet;
use super::params::ModelParameters;
use super::sampling::extract_region;
use crate::annotation::Segmentation;
use crate::{BoundingBox, Error, Result, Volume, Voxel};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InferenceOptions {
    /// Window step per axis; `None` means half the patch.
    pub stride: Option<Voxel>,
    /// A voxel is foreground when its averaged probability exceeds this.
    pub threshold: f32,
}

impl Default for InferenceOptions {
    fn default() -> Self {
        Self {
            stride: None,
            threshold: 0.5,
        }
    }
}

impl InferenceOptions {
    pub fn stride_for(&self, patch: Voxel) -> Voxel {
        self.stride
            .unwrap_or([patch[0] / 2, patch[1] / 2, patch[2] / 2])
            .map(|s| s.max(1))
    }
}

/// Window start offsets along one axis of length `len`.
///
/// Starts are `0, s, 2s, ...` while the window fits, plus a final window
/// flush with the end. An axis shorter than the patch gets one window at 0.
/// A stride wider than the patch is narrowed to it so every voxel is covered.
pub fn tile_starts(len: usize, patch: usize, stride: usize) -> Vec<usize> {
    if len <= patch {
        return vec![0];
    }
    let last = len - patch;
    let mut starts: Vec<usize> = (0..=last).step_by(stride.clamp(1, patch.max(1))).collect();
    if *starts.last().unwrap() != last {
        starts.push(last);
    }
    starts
}

/// Window origins, in box-local coordinates, in x-major order.
pub fn window_origins(extent: Voxel, patch: Voxel, stride: Voxel) -> Vec<Voxel> {
    let [xs, ys, zs] = [0, 1, 2].map(|a| tile_starts(extent[a], patch[a], stride[a]));
    let mut out = Vec::with_capacity(xs.len() * ys.len() * zs.len());
    for &x in &xs {
        for &y in &ys {
            for &z in &zs {
                out.push([x, y, z]);
            }
        }
    }
    out
}

/// Averaged foreground probability for every voxel of `bbox`.
///
/// Each window is a full patch read from the volume starting at the window
/// origin; where it runs past the volume edge it is filled with the pad
/// value. Only the part inside the box is accumulated.
pub fn predict_box(
    cfg: &NetworkConfig,
    params: &ModelParameters,
    volume: &Volume,
    bbox: &BoundingBox,
    opts: &InferenceOptions,
) -> Result<Array3<f32>> {
    bbox.check_fits(volume.dims())?;
    let net = UNet::new(cfg, params)?;
    let patch = cfg.patch_dims;
    let extent = bbox.extent();
    let mut sum = Array3::<f64>::zeros((extent[0], extent[1], extent[2]));
    let mut count = Array3::<u32>::zeros((extent[0], extent[1], extent[2]));
    for local in window_origins(extent, patch, opts.stride_for(patch)) {
        let origin = bbox.to_global(&local);
        let image = extract_region(&volume.grid, origin, patch, cfg.pad_value);
        let probs = net.forward(&image)?;
        let covered = [0, 1, 2].map(|a| patch[a].min(extent[a] - local[a]));
        for i in 0..covered[0] {
            for j in 0..covered[1] {
                for k in 0..covered[2] {
                    let at = [local[0] + i, local[1] + j, local[2] + k];
                    sum[at] += f64::from(probs[[i, j, k]]);
                    count[at] += 1;
                }
            }
        }
    }
    Ok(ndarray::Zip::from(&sum)
        .and(&count)
        .map_collect(|&s, &c| (s / f64::from(c)) as f32))
}

/// Segment the region inside `bbox`.
pub fn segment(
    cfg: &NetworkConfig,
    params: &ModelParameters,
    volume: &Volume,
    bbox: &BoundingBox,
    opts: &InferenceOptions,
) -> Result<Segmentation> {
    if !(0.0..=1.0).contains(&opts.threshold) {
        return Err(Error::Config(format!("threshold {} outside [0, 1]", opts.threshold)));
    }
    let probs = predict_box(cfg, params, volume, bbox, opts)?;
    let mask = probs.mapv(|p| p > opts.threshold);
    Segmentation::new(volume.id.clone(), *bbox, mask, opts.threshold)
}
