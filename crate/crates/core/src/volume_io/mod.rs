//! Volumes, masks and bounding boxes, read from and written to NIfTI files.
//!
//! Grids are indexed `(x, y, z)`, i.e. (width, height, depth). Images are
//! held as `f32` Hounsfield units; masks are written as 8-bit grids.

pub mod nifti;

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use ndarray::{s, Array3, ShapeBuilder};
use serde::{Deserialize, Serialize};

use crate::{Error, Mask, Result, Voxel};

/// Grid shape and placement of a volume, without its intensities.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Geometry {
    pub dims: Voxel,
    pub spacing: [f32; 3],
    pub affine: [[f64; 4]; 4],
}

impl Geometry {
    /// Geometry of the sub-grid covered by `bbox`, placed so that world
    /// coordinates of retained voxels are unchanged.
    pub fn crop(&self, bbox: &BoundingBox) -> Result<Geometry> {
        bbox.check_fits(self.dims)?;
        let mut affine = self.affine;
        for (r, row) in affine.iter_mut().enumerate().take(3) {
            let shift: f64 = (0..3).map(|c| self.affine[r][c] * bbox.min[c] as f64).sum();
            row[3] += shift;
        }
        Ok(Geometry {
            dims: bbox.extent(),
            spacing: self.spacing,
            affine,
        })
    }
}

/// A 3D scalar image in Hounsfield units.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub id: String,
    pub grid: Array3<f32>,
    /// Voxel size in millimetres along (x, y, z).
    pub spacing: [f32; 3],
    /// Voxel index to world transform.
    pub affine: [[f64; 4]; 4],
}

impl Volume {
    pub fn new(id: impl Into<String>, grid: Array3<f32>, spacing: [f32; 3]) -> Result<Self> {
        let affine = nifti::scale_affine(spacing);
        Self::with_affine(id, grid, spacing, affine)
    }

    pub fn with_affine(
        id: impl Into<String>,
        grid: Array3<f32>,
        spacing: [f32; 3],
        affine: [[f64; 4]; 4],
    ) -> Result<Self> {
        if grid.is_empty() {
            return Err(Error::Empty("volume grid"));
        }
        if spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::Config(format!("spacing {spacing:?} must be positive")));
        }
        if grid.iter().any(|v| !v.is_finite()) {
            return Err(Error::Malformed("volume contains non-finite values".into()));
        }
        Ok(Self {
            id: id.into(),
            grid: grid.as_standard_layout().into_owned(),
            spacing,
            affine,
        })
    }

    pub fn dims(&self) -> Voxel {
        let (w, h, d) = self.grid.dim();
        [w, h, d]
    }

    pub fn geometry(&self) -> Geometry {
        Geometry {
            dims: self.dims(),
            spacing: self.spacing,
            affine: self.affine,
        }
    }

    pub fn full_box(&self) -> BoundingBox {
        BoundingBox::full(self.dims())
    }
}

/// Axis-aligned voxel box with inclusive corners.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BoundingBox {
    pub min: Voxel,
    pub max: Voxel,
}

impl BoundingBox {
    pub fn new(min: Voxel, max: Voxel) -> Result<Self> {
        if (0..3).any(|a| min[a] > max[a]) {
            return Err(Error::Config(format!("box min {min:?} exceeds max {max:?}")));
        }
        Ok(Self { min, max })
    }

    /// The box covering a whole grid of the given extent.
    pub fn full(extent: Voxel) -> Self {
        Self {
            min: [0; 3],
            max: extent.map(|e| e.saturating_sub(1)),
        }
    }

    /// Smallest box containing every voxel, or `None` for an empty set.
    pub fn enclosing<'a>(voxels: impl IntoIterator<Item = &'a Voxel>) -> Option<Self> {
        let mut it = voxels.into_iter();
        let first = *it.next()?;
        let (mut min, mut max) = (first, first);
        for v in it {
            for a in 0..3 {
                min[a] = min[a].min(v[a]);
                max[a] = max[a].max(v[a]);
            }
        }
        Some(Self { min, max })
    }

    /// Smallest box containing every set voxel of a mask.
    pub fn of_mask(mask: &Mask) -> Option<Self> {
        let voxels: Vec<Voxel> = mask
            .indexed_iter()
            .filter(|(_, &m)| m)
            .map(|((x, y, z), _)| [x, y, z])
            .collect();
        Self::enclosing(&voxels)
    }

    /// Per-axis size in voxels.
    pub fn extent(&self) -> Voxel {
        [0, 1, 2].map(|a| self.max[a] - self.min[a] + 1)
    }

    pub fn voxel_count(&self) -> usize {
        self.extent().iter().product()
    }

    pub fn contains(&self, v: &Voxel) -> bool {
        (0..3).all(|a| self.min[a] <= v[a] && v[a] <= self.max[a])
    }

    pub fn fits(&self, extent: Voxel) -> bool {
        (0..3).all(|a| self.max[a] < extent[a])
    }

    pub fn check_fits(&self, extent: Voxel) -> Result<()> {
        if self.fits(extent) {
            Ok(())
        } else {
            Err(Error::BoxOutOfRange {
                min: self.min,
                max: self.max,
                extent,
            })
        }
    }

    /// Grow by `margin` voxels on every side, clipped to `extent`.
    pub fn dilate(&self, margin: usize, extent: Voxel) -> Self {
        Self {
            min: self.min.map(|m| m.saturating_sub(margin)),
            max: [0, 1, 2].map(|a| (self.max[a] + margin).min(extent[a] - 1)),
        }
    }

    /// Translate a volume voxel into box-local coordinates.
    pub fn to_local(&self, v: &Voxel) -> Voxel {
        [0, 1, 2].map(|a| v[a] - self.min[a])
    }

    pub fn to_global(&self, local: &Voxel) -> Voxel {
        [0, 1, 2].map(|a| local[a] + self.min[a])
    }
}

impl fmt::Display for BoundingBox {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let [a, b, c] = self.min;
        let [d, e, g] = self.max;
        write!(f, "{a},{b},{c},{d},{e},{g}")
    }
}

impl FromStr for BoundingBox {
    type Err = Error;

    /// Parses `x0,y0,z0,x1,y1,z1`.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<usize> = s
            .split(',')
            .map(|p| p.trim().parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Malformed(format!("bounding box '{s}': {e}")))?;
        match parts[..] {
            [a, b, c, d, e, f] => Self::new([a, b, c], [d, e, f]),
            _ => Err(Error::Malformed(format!("bounding box '{s}' needs 6 integers"))),
        }
    }
}

/// A display intensity window in Hounsfield units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowPreset {
    pub name: String,
    pub lower: f32,
    pub upper: f32,
}

impl WindowPreset {
    pub fn new(name: impl Into<String>, lower: f32, upper: f32) -> Result<Self> {
        if !(lower < upper) {
            return Err(Error::Config(format!("window lower {lower} must be below upper {upper}")));
        }
        Ok(Self {
            name: name.into(),
            lower,
            upper,
        })
    }

    /// Soft-tissue window around the heart, -125 HU to 250 HU.
    pub fn mediastinal() -> Self {
        Self {
            name: "mediastinal".into(),
            lower: -125.0,
            upper: 250.0,
        }
    }

    pub fn by_name(name: &str) -> Option<Self> {
        match name {
            "mediastinal" => Some(Self::mediastinal()),
            "lung" => Some(Self::new("lung", -1350.0, 150.0).unwrap()),
            "bone" => Some(Self::new("bone", -450.0, 1050.0).unwrap()),
            _ => None,
        }
    }

    pub fn apply(&self, hu: f32) -> f32 {
        ((hu - self.lower) / (self.upper - self.lower)).clamp(0.0, 1.0)
    }
}

/// Volume id derived from a file name: the basename without `.nii.gz` / `.nii`.
pub fn volume_id_from_path(path: &Path) -> String {
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    for ext in [".nii.gz", ".nii"] {
        if let Some(stem) = name.strip_suffix(ext) {
            return stem.to_string();
        }
    }
    name
}

pub(crate) fn grid_from_fortran<T: Clone>(dims: Voxel, values: Vec<T>) -> Array3<T> {
    Array3::from_shape_vec((dims[0], dims[1], dims[2]).f(), values)
        .expect("value count matches dims")
        .as_standard_layout()
        .into_owned()
}

pub(crate) fn fortran_values<T: Clone>(grid: &Array3<T>) -> Vec<T> {
    grid.t().iter().cloned().collect()
}

pub fn load_volume(path: impl AsRef<Path>) -> Result<Volume> {
    let path = path.as_ref();
    let data = nifti::read_file(path)?;
    let values = data.values.iter().map(|&v| v as f32).collect();
    Volume::with_affine(
        volume_id_from_path(path),
        grid_from_fortran(data.dims, values),
        data.spacing,
        data.affine,
    )
}

/// Decode an in-memory NIfTI payload into a volume with the given id.
pub fn volume_from_bytes(id: &str, bytes: &[u8]) -> Result<Volume> {
    let data = nifti::decode(bytes)?;
    let values = data.values.iter().map(|&v| v as f32).collect();
    Volume::with_affine(id, grid_from_fortran(data.dims, values), data.spacing, data.affine)
}

pub fn volume_to_bytes(volume: &Volume) -> Result<Vec<u8>> {
    let values = fortran_values(&volume.grid);
    nifti::encode(
        volume.dims(),
        volume.spacing,
        &volume.affine,
        &volume.id,
        nifti::Payload::F32(&values),
    )
}

pub fn save_volume(volume: &Volume, path: impl AsRef<Path>) -> Result<()> {
    nifti::write_file(path.as_ref(), &volume_to_bytes(volume)?)
}

/// Encode an 8-bit label grid with the given geometry.
pub(crate) fn labels_to_bytes(labels: &Array3<u8>, reference: &Geometry, descrip: &str) -> Result<Vec<u8>> {
    let dims = labels.dim();
    if [dims.0, dims.1, dims.2] != reference.dims {
        return Err(Error::ShapeMismatch {
            expected: reference.dims.to_vec(),
            found: vec![dims.0, dims.1, dims.2],
        });
    }
    let values = fortran_values(labels);
    nifti::encode(
        reference.dims,
        reference.spacing,
        &reference.affine,
        descrip,
        nifti::Payload::U8(&values),
    )
}

/// Read an integer label grid; every value must be a non-negative integer.
pub(crate) fn labels_from_data(data: &nifti::NiftiData) -> Result<Array3<i64>> {
    let values = data
        .values
        .iter()
        .map(|&v| {
            if v.fract() == 0.0 && v.is_finite() {
                Ok(v as i64)
            } else {
                Err(Error::Malformed(format!("non-integer label value {v}")))
            }
        })
        .collect::<Result<Vec<i64>>>()?;
    Ok(grid_from_fortran(data.dims, values))
}

/// Write a binary mask as an 8-bit grid carrying `reference`'s geometry.
pub fn save_mask(mask: &Mask, reference: &Volume, path: impl AsRef<Path>) -> Result<()> {
    let labels = mask.mapv(u8::from);
    nifti::write_file(path.as_ref(), &labels_to_bytes(&labels, &reference.geometry(), "mask")?)
}

/// Read a mask; any non-zero voxel is foreground.
pub fn load_mask(path: impl AsRef<Path>) -> Result<Mask> {
    let data = nifti::read_file(path.as_ref())?;
    Ok(grid_from_fortran(data.dims, data.values.iter().map(|&v| v != 0.0).collect()))
}

/// Map intensities through a window to `[0, 1]`.
pub fn window_normalize(volume: &Volume, preset: &WindowPreset) -> Array3<f32> {
    volume.grid.mapv(|v| preset.apply(v))
}

/// Extract the sub-volume covered by `bbox`.
///
/// The result keeps the id and spacing; its affine is shifted so world
/// coordinates of every retained voxel are unchanged.
pub fn crop(volume: &Volume, bbox: &BoundingBox) -> Result<Volume> {
    bbox.check_fits(volume.dims())?;
    let grid = volume
        .grid
        .slice(s![
            bbox.min[0]..=bbox.max[0],
            bbox.min[1]..=bbox.max[1],
            bbox.min[2]..=bbox.max[2]
        ])
        .to_owned();
    Ok(Volume {
        id: volume.id.clone(),
        grid,
        spacing: volume.spacing,
        affine: volume.geometry().crop(bbox)?.affine,
    })
}

/// Crop a mask to a box.
pub fn crop_mask(mask: &Mask, bbox: &BoundingBox) -> Result<Mask> {
    let (w, h, d) = mask.dim();
    bbox.check_fits([w, h, d])?;
    Ok(mask
        .slice(s![
            bbox.min[0]..=bbox.max[0],
            bbox.min[1]..=bbox.max[1],
            bbox.min[2]..=bbox.max[2]
        ])
        .to_owned())
}
