//! Patch extraction and annotation-guided patch sampling.

use std::sync::Arc;

use ndarray::{s, Array3};
use rand::Rng;

use crate::annotation::SparseAnnotation;
use crate::{BoundingBox, Error, Result, Volume, Voxel};

/// An annotated volume prepared for repeated patch sampling.
#[derive(Debug, Clone)]
pub struct TrainingItem {
    pub volume: Arc<Volume>,
    /// Full-extent label grid (0 none, 1 background, 2 foreground).
    pub labels: Array3<u8>,
    pub bbox: BoundingBox,
    annotated: Vec<Voxel>,
}

impl TrainingItem {
    pub fn new(volume: Arc<Volume>, ann: &SparseAnnotation) -> Result<Self> {
        if ann.volume_id != volume.id {
            return Err(Error::InvalidAnnotation(format!(
                "annotation for '{}' paired with volume '{}'",
                ann.volume_id, volume.id
            )));
        }
        let labels = ann.to_labels(volume.dims())?;
        let annotated = ann.fg.iter().chain(ann.bg.iter()).copied().collect();
        Ok(Self {
            volume,
            labels,
            bbox: ann.bbox,
            annotated,
        })
    }

    pub fn annotated_voxels(&self) -> &[Voxel] {
        &self.annotated
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatchSample {
    pub image: Array3<f32>,
    pub labels: Array3<u8>,
    /// Volume coordinates of the patch's first voxel.
    pub origin: Voxel,
}

/// Copy a `dims`-sized region starting at `origin`; voxels past the
/// volume's far edge take `fill`.
pub fn extract_region<T: Copy>(grid: &Array3<T>, origin: Voxel, dims: Voxel, fill: T) -> Array3<T> {
    let (w, h, d) = grid.dim();
    let extent = [w, h, d];
    let mut out = Array3::from_elem((dims[0], dims[1], dims[2]), fill);
    let hi: [usize; 3] = [0, 1, 2].map(|a| (origin[a] + dims[a]).min(extent[a]));
    if (0..3).all(|a| origin[a] < hi[a]) {
        let len = [0, 1, 2].map(|a| hi[a] - origin[a]);
        out.slice_mut(s![..len[0], ..len[1], ..len[2]]).assign(&grid.slice(s![
            origin[0]..hi[0],
            origin[1]..hi[1],
            origin[2]..hi[2]
        ]));
    }
    out
}

/// Draw a patch that contains at least one annotated voxel.
///
/// An annotated voxel is chosen uniformly, then the patch origin is chosen
/// uniformly among the in-bounds placements that cover it. Along an axis
/// where the volume is shorter than the patch the origin is 0 and the patch
/// is padded.
pub fn sample_patch<R: Rng + ?Sized>(item: &TrainingItem, dims: Voxel, pad_value: f32, rng: &mut R) -> Result<PatchSample> {
    if item.annotated.is_empty() {
        return Err(Error::Empty("annotation has no annotated voxels to sample around"));
    }
    let anchor = item.annotated[rng.random_range(0..item.annotated.len())];
    let extent = item.volume.dims();
    let mut origin = [0usize; 3];
    for a in 0..3 {
        if extent[a] > dims[a] {
            let lo = (anchor[a] + 1).saturating_sub(dims[a]);
            let hi = anchor[a].min(extent[a] - dims[a]);
            origin[a] = rng.random_range(lo..=hi);
        }
    }
    Ok(PatchSample {
        image: extract_region(&item.volume.grid, origin, dims, pad_value),
        labels: extract_region(&item.labels, origin, dims, 0),
        origin,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume_io::BoundingBox;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn volume(dims: Voxel) -> Arc<Volume> {
        let grid = Array3::from_shape_fn((dims[0], dims[1], dims[2]), |(x, y, z)| (x + 100 * y + 10_000 * z) as f32);
        Arc::new(Volume::new("v", grid, [1.0; 3]).unwrap())
    }

    #[test]
    fn single_voxel_is_always_inside() {
        let vol = volume([40, 30, 20]);
        let ann = SparseAnnotation::new("v", vol.full_box(), [[33, 4, 17]], []).unwrap();
        let item = TrainingItem::new(vol.clone(), &ann).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..200 {
            let p = sample_patch(&item, [8, 8, 4], -1024.0, &mut rng).unwrap();
            assert_eq!(p.labels.iter().filter(|&&l| l == 2).count(), 1);
            let local = [33 - p.origin[0], 4 - p.origin[1], 17 - p.origin[2]];
            assert_eq!(p.labels[local], 2);
            assert_eq!(p.image[local], vol.grid[[33, 4, 17]]);
            assert!((0..3).all(|a| p.origin[a] + [8, 8, 4][a] <= vol.dims()[a]));
        }
    }

    #[test]
    fn small_volume_is_padded() {
        let vol = volume([5, 6, 3]);
        let ann = SparseAnnotation::new("v", vol.full_box(), [], [[4, 5, 2]]).unwrap();
        let item = TrainingItem::new(vol, &ann).unwrap();
        let p = sample_patch(&item, [8, 8, 4], -1024.0, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(p.origin, [0, 0, 0]);
        assert_eq!(p.labels[[4, 5, 2]], 1);
        assert_eq!(p.image[[7, 7, 3]], -1024.0);
        assert_eq!(p.image[[4, 5, 2]], 4.0 + 500.0 + 20_000.0);
    }

    #[test]
    fn empty_annotation_is_rejected() {
        let vol = volume([8, 8, 8]);
        let ann = SparseAnnotation::empty("v", BoundingBox::full([8, 8, 8]));
        let item = TrainingItem::new(vol, &ann).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        assert!(matches!(sample_patch(&item, [4, 4, 4], 0.0, &mut rng), Err(Error::Empty(_))));
    }
}
