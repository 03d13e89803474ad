//! Sparse corrective annotations and corrected contours.
//!
//! An annotation marks voxels the model got wrong: foreground corrections
//! (`fg`) on false negatives and background corrections (`bg`) on false
//! positives. Both sets live inside the bounding box that scoped the
//! prediction.
//!
//! On disk an annotation is a label grid over the full volume extent:
//! 0 = unannotated, 1 = background correction, 2 = foreground correction.
//! The bounding box is kept in the header description field as
//! `bbox=x0,y0,z0,x1,y1,z1`.

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;

use ndarray::Array3;

use crate::volume_io::{self, nifti, volume_id_from_path, BoundingBox, Geometry, Volume};
use crate::{Error, Mask, Result, Voxel};

pub const LABEL_NONE: u8 = 0;
pub const LABEL_BG: u8 = 1;
pub const LABEL_FG: u8 = 2;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SparseAnnotation {
    pub volume_id: String,
    pub bbox: BoundingBox,
    /// Voxels corrected to foreground.
    pub fg: BTreeSet<Voxel>,
    /// Voxels corrected to background.
    pub bg: BTreeSet<Voxel>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Brush {
    Foreground,
    Background,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    /// The voxel is in both the foreground and background sets.
    Overlap(Voxel),
    OutsideBox { voxel: Voxel, brush: Brush },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::Overlap(v) => write!(f, "voxel {v:?} is both foreground and background"),
            Violation::OutsideBox { voxel, brush } => {
                write!(f, "{brush:?} voxel {voxel:?} lies outside the bounding box")
            }
        }
    }
}

impl SparseAnnotation {
    pub fn empty(volume_id: impl Into<String>, bbox: BoundingBox) -> Self {
        Self {
            volume_id: volume_id.into(),
            bbox,
            fg: BTreeSet::new(),
            bg: BTreeSet::new(),
        }
    }

    /// Build an annotation, rejecting overlapping or out-of-box voxels.
    pub fn new(
        volume_id: impl Into<String>,
        bbox: BoundingBox,
        fg: impl IntoIterator<Item = Voxel>,
        bg: impl IntoIterator<Item = Voxel>,
    ) -> Result<Self> {
        let ann = Self {
            volume_id: volume_id.into(),
            bbox,
            fg: fg.into_iter().collect(),
            bg: bg.into_iter().collect(),
        };
        ann.validate().map_err(violations_error)?;
        Ok(ann)
    }

    /// Report every disjointness and containment violation.
    pub fn validate(&self) -> std::result::Result<(), Vec<Violation>> {
        let mut out: Vec<Violation> = self
            .fg
            .intersection(&self.bg)
            .map(|v| Violation::Overlap(*v))
            .collect();
        for (set, brush) in [(&self.fg, Brush::Foreground), (&self.bg, Brush::Background)] {
            out.extend(
                set.iter()
                    .filter(|v| !self.bbox.contains(v))
                    .map(|v| Violation::OutsideBox { voxel: *v, brush }),
            );
        }
        if out.is_empty() {
            Ok(())
        } else {
            Err(out)
        }
    }

    pub fn annotated_count(&self) -> usize {
        self.fg.len() + self.bg.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fg.is_empty() && self.bg.is_empty()
    }

    /// Label grid over a full volume extent.
    pub fn to_labels(&self, extent: Voxel) -> Result<Array3<u8>> {
        self.bbox.check_fits(extent)?;
        let mut labels = Array3::from_elem((extent[0], extent[1], extent[2]), LABEL_NONE);
        for v in &self.bg {
            labels[*v] = LABEL_BG;
        }
        for v in &self.fg {
            labels[*v] = LABEL_FG;
        }
        Ok(labels)
    }

    /// Rebuild from a full-extent label grid. Without an explicit box the
    /// box encloses the annotated voxels (or is the full extent when empty).
    pub fn from_labels(
        volume_id: impl Into<String>,
        labels: &Array3<i64>,
        bbox: Option<BoundingBox>,
    ) -> Result<Self> {
        let mut fg = BTreeSet::new();
        let mut bg = BTreeSet::new();
        for ((x, y, z), &value) in labels.indexed_iter() {
            match value {
                0 => {}
                1 => {
                    bg.insert([x, y, z]);
                }
                2 => {
                    fg.insert([x, y, z]);
                }
                other => {
                    return Err(Error::BadLabel {
                        value: other,
                        voxel: [x, y, z],
                    })
                }
            }
        }
        let (w, h, d) = labels.dim();
        let extent = [w, h, d];
        let bbox = match bbox {
            Some(b) => {
                b.check_fits(extent)?;
                b
            }
            None => BoundingBox::enclosing(fg.iter().chain(bg.iter()))
                .unwrap_or_else(|| BoundingBox::full(extent)),
        };
        let ann = Self {
            volume_id: volume_id.into(),
            bbox,
            fg,
            bg,
        };
        ann.validate().map_err(violations_error)?;
        Ok(ann)
    }

    /// Box-local label grid (`LABEL_*` values) over the bounding box.
    pub fn box_labels(&self) -> Array3<u8> {
        let [w, h, d] = self.bbox.extent();
        let mut labels = Array3::from_elem((w, h, d), LABEL_NONE);
        for v in &self.bg {
            labels[self.bbox.to_local(v)] = LABEL_BG;
        }
        for v in &self.fg {
            labels[self.bbox.to_local(v)] = LABEL_FG;
        }
        labels
    }
}

pub(crate) fn violations_error(violations: Vec<Violation>) -> Error {
    let shown: Vec<String> = violations.iter().take(8).map(|v| v.to_string()).collect();
    let more = violations.len().saturating_sub(shown.len());
    let mut msg = shown.join("; ");
    if more > 0 {
        msg.push_str(&format!("; and {more} more"));
    }
    Error::InvalidAnnotation(msg)
}

/// A thresholded model prediction scoped to a bounding box.
#[derive(Debug, Clone, PartialEq)]
pub struct Segmentation {
    pub volume_id: String,
    pub bbox: BoundingBox,
    /// Mask over the box extents.
    pub mask: Mask,
    pub threshold_used: f32,
}

impl Segmentation {
    pub fn new(volume_id: impl Into<String>, bbox: BoundingBox, mask: Mask, threshold_used: f32) -> Result<Self> {
        let (w, h, d) = mask.dim();
        if [w, h, d] != bbox.extent() {
            return Err(Error::ShapeMismatch {
                expected: bbox.extent().to_vec(),
                found: vec![w, h, d],
            });
        }
        Ok(Self {
            volume_id: volume_id.into(),
            bbox,
            mask,
            threshold_used,
        })
    }

    /// Empty prediction over a box, used before any model exists.
    pub fn empty(volume_id: impl Into<String>, bbox: BoundingBox) -> Self {
        let [w, h, d] = bbox.extent();
        Self {
            volume_id: volume_id.into(),
            bbox,
            mask: Mask::from_elem((w, h, d), false),
            threshold_used: 0.5,
        }
    }

    /// Paste the box-scoped mask into an all-background full-volume grid.
    pub fn to_full(&self, extent: Voxel) -> Result<Mask> {
        self.bbox.check_fits(extent)?;
        let mut full = Mask::from_elem((extent[0], extent[1], extent[2]), false);
        for ((x, y, z), &m) in self.mask.indexed_iter() {
            if m {
                full[self.bbox.to_global(&[x, y, z])] = true;
            }
        }
        Ok(full)
    }
}

/// The corrected contour: `(prediction ∪ fg) \ bg`, over the box extents.
pub fn merge_corrected(seg: &Segmentation, ann: &SparseAnnotation) -> Result<Mask> {
    if seg.volume_id != ann.volume_id {
        return Err(Error::InvalidAnnotation(format!(
            "annotation for '{}' applied to segmentation of '{}'",
            ann.volume_id, seg.volume_id
        )));
    }
    if seg.bbox != ann.bbox {
        return Err(Error::InvalidAnnotation(format!(
            "annotation box {} differs from segmentation box {}",
            ann.bbox, seg.bbox
        )));
    }
    ann.validate().map_err(violations_error)?;
    let mut out = seg.mask.clone();
    for v in &ann.fg {
        out[seg.bbox.to_local(v)] = true;
    }
    for v in &ann.bg {
        out[seg.bbox.to_local(v)] = false;
    }
    Ok(out)
}

fn descrip_for(bbox: &BoundingBox) -> String {
    format!("bbox={bbox}")
}

fn bbox_from_descrip(descrip: &str) -> Result<Option<BoundingBox>> {
    descrip
        .split_whitespace()
        .find_map(|tok| tok.strip_prefix("bbox="))
        .map(str::parse)
        .transpose()
}

/// Encode an annotation as a NIfTI label grid over the full volume extent.
pub fn annotation_to_bytes(ann: &SparseAnnotation, geometry: &Geometry) -> Result<Vec<u8>> {
    ann.validate().map_err(violations_error)?;
    let labels = ann.to_labels(geometry.dims)?;
    volume_io::labels_to_bytes(&labels, geometry, &descrip_for(&ann.bbox))
}

pub fn annotation_from_bytes(volume_id: &str, bytes: &[u8]) -> Result<SparseAnnotation> {
    let data = nifti::decode(bytes)?;
    let bbox = bbox_from_descrip(&data.descrip)?;
    let labels = volume_io::labels_from_data(&data)?;
    SparseAnnotation::from_labels(volume_id, &labels, bbox)
}

pub fn save_annotation(ann: &SparseAnnotation, reference: &Volume, path: impl AsRef<Path>) -> Result<()> {
    if ann.volume_id != reference.id {
        return Err(Error::InvalidAnnotation(format!(
            "annotation for '{}' written against volume '{}'",
            ann.volume_id, reference.id
        )));
    }
    let bytes = annotation_to_bytes(ann, &reference.geometry())?;
    nifti::write_file(path.as_ref(), &bytes)
}

/// Encode a segmentation as an 8-bit mask over its box, placed in the
/// volume described by `volume`.
pub fn segmentation_to_bytes(seg: &Segmentation, volume: &Geometry) -> Result<Vec<u8>> {
    let local = volume.crop(&seg.bbox)?;
    let descrip = format!("{} threshold={}", descrip_for(&seg.bbox), seg.threshold_used);
    volume_io::labels_to_bytes(&seg.mask.mapv(u8::from), &local, &descrip)
}

pub fn segmentation_from_bytes(volume_id: &str, bytes: &[u8]) -> Result<Segmentation> {
    let data = nifti::decode(bytes)?;
    let bbox = bbox_from_descrip(&data.descrip)?
        .ok_or_else(|| Error::Malformed("segmentation file carries no bbox".into()))?;
    let threshold = data
        .descrip
        .split_whitespace()
        .find_map(|tok| tok.strip_prefix("threshold="))
        .map(|t| t.parse::<f32>().map_err(|_| Error::Malformed(format!("bad threshold '{t}'"))))
        .transpose()?
        .unwrap_or(0.5);
    let labels = volume_io::labels_from_data(&data)?;
    Segmentation::new(volume_id, bbox, labels.mapv(|v| v != 0), threshold)
}

/// Read an annotation file; the volume id is the file's basename.
pub fn load_annotation(path: impl AsRef<Path>) -> Result<SparseAnnotation> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    annotation_from_bytes(&volume_id_from_path(path), &bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bx(min: Voxel, max: Voxel) -> BoundingBox {
        BoundingBox::new(min, max).unwrap()
    }

    fn seg_with(voxels: &[Voxel]) -> Segmentation {
        let bbox = bx([1, 1, 1], [4, 4, 4]);
        let mut s = Segmentation::empty("v", bbox);
        for v in voxels {
            s.mask[bbox.to_local(v)] = true;
        }
        s
    }

    #[test]
    fn merge_cases() {
        let seg = seg_with(&[[2, 2, 2], [3, 3, 3]]);
        let empty = SparseAnnotation::empty("v", seg.bbox);
        assert_eq!(merge_corrected(&seg, &empty).unwrap(), seg.mask);

        let ann = SparseAnnotation::new("v", seg.bbox, [[1, 1, 1]], [[3, 3, 3]]).unwrap();
        let out = merge_corrected(&seg, &ann).unwrap();
        assert!(out[[0, 0, 0]]);
        assert!(!out[[2, 2, 2]]);
        assert!(out[[1, 1, 1]]);
    }

    #[test]
    fn merge_rejects_mismatches() {
        let seg = seg_with(&[]);
        let other_id = SparseAnnotation::empty("w", seg.bbox);
        assert!(merge_corrected(&seg, &other_id).is_err());
        let other_box = SparseAnnotation::empty("v", bx([0, 0, 0], [4, 4, 4]));
        assert!(merge_corrected(&seg, &other_box).is_err());
        let mut bad = SparseAnnotation::empty("v", seg.bbox);
        bad.fg.insert([2, 2, 2]);
        bad.bg.insert([2, 2, 2]);
        assert!(matches!(merge_corrected(&seg, &bad), Err(Error::InvalidAnnotation(_))));
    }

    #[test]
    fn validate_reports_coordinates() {
        let bbox = bx([0, 0, 0], [3, 3, 3]);
        assert!(SparseAnnotation::new("v", bbox, [[0, 0, 0]], [[1, 1, 1]]).is_ok());

        let mut ann = SparseAnnotation::empty("v", bbox);
        ann.fg.insert([2, 2, 2]);
        ann.bg.insert([2, 2, 2]);
        assert_eq!(ann.validate().unwrap_err(), vec![Violation::Overlap([2, 2, 2])]);

        let mut ann = SparseAnnotation::empty("v", bbox);
        ann.fg.insert([5, 0, 0]);
        assert_eq!(
            ann.validate().unwrap_err(),
            vec![Violation::OutsideBox {
                voxel: [5, 0, 0],
                brush: Brush::Foreground
            }]
        );
    }

    fn reference() -> Volume {
        Volume::new("case7", Array3::zeros((6, 5, 4)), [1.0, 1.0, 2.0]).unwrap()
    }

    #[test]
    fn segmentation_bytes_round_trip() {
        let vol = reference();
        let bbox = bx([1, 1, 1], [3, 4, 2]);
        let mut mask = Mask::from_elem((3, 4, 2), false);
        mask[[0, 3, 1]] = true;
        mask[[2, 0, 0]] = true;
        let seg = Segmentation::new("case7", bbox, mask, 0.5).unwrap();
        let bytes = segmentation_to_bytes(&seg, &vol.geometry()).unwrap();
        assert_eq!(segmentation_from_bytes("case7", &bytes).unwrap(), seg);
        let data = nifti::decode(&bytes).unwrap();
        assert_eq!(data.affine[2][3], 2.0, "cropped origin shifted by one 2 mm slice");
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("case7.nii.gz");
        let bbox = bx([1, 0, 0], [4, 3, 2]);
        let ann = SparseAnnotation::new("case7", bbox, [[1, 0, 0], [4, 3, 2]], [[2, 2, 1]]).unwrap();
        save_annotation(&ann, &reference(), &path).unwrap();
        assert_eq!(load_annotation(&path).unwrap(), ann);

        let empty = SparseAnnotation::empty("case7", bbox);
        save_annotation(&empty, &reference(), &path).unwrap();
        let back = load_annotation(&path).unwrap();
        assert!(back.is_empty());
        assert_eq!(back.bbox, bbox);
    }

    #[test]
    fn label_three_is_rejected() {
        let vol = reference();
        let mut labels = Array3::<u8>::zeros((6, 5, 4));
        labels[[1, 1, 1]] = 3;
        let bytes = volume_io::labels_to_bytes(&labels, &vol.geometry(), "").unwrap();
        assert!(matches!(
            annotation_from_bytes("case7", &bytes),
            Err(Error::BadLabel { value: 3, voxel: [1, 1, 1] })
        ));
    }

    #[test]
    fn box_defaults_to_annotated_extent() {
        let vol = reference();
        let mut labels = Array3::<u8>::zeros((6, 5, 4));
        labels[[1, 1, 1]] = 2;
        labels[[3, 2, 1]] = 1;
        let bytes = volume_io::labels_to_bytes(&labels, &vol.geometry(), "").unwrap();
        let ann = annotation_from_bytes("case7", &bytes).unwrap();
        assert_eq!(ann.bbox, bx([1, 1, 1], [3, 2, 1]));
    }

    fn arb_case() -> impl Strategy<Value = (Segmentation, SparseAnnotation)> {
        let bits = proptest::collection::vec(any::<bool>(), 64);
        let labels = proptest::collection::vec(0u8..3, 64);
        (bits, labels).prop_map(|(bits, labels)| {
            let bbox = bx([0, 0, 0], [3, 3, 3]);
            let mask = Mask::from_shape_vec((4, 4, 4), bits).unwrap();
            let seg = Segmentation::new("p", bbox, mask, 0.5).unwrap();
            let mut ann = SparseAnnotation::empty("p", bbox);
            for (i, l) in labels.into_iter().enumerate() {
                let v = [i / 16, (i / 4) % 4, i % 4];
                match l {
                    LABEL_FG => ann.fg.insert(v),
                    LABEL_BG => ann.bg.insert(v),
                    _ => false,
                };
            }
            (seg, ann)
        })
    }

    proptest! {
        #[test]
        fn merge_properties((seg, ann) in arb_case()) {
            let once = merge_corrected(&seg, &ann).unwrap();
            let reseg = Segmentation::new("p", seg.bbox, once.clone(), 0.5).unwrap();
            prop_assert_eq!(&merge_corrected(&reseg, &ann).unwrap(), &once);

            let changed = once.iter().zip(seg.mask.iter()).filter(|(a, b)| a != b).count();
            prop_assert!(changed <= ann.annotated_count());

            for ((x, y, z), &m) in seg.mask.indexed_iter() {
                let v = [x, y, z];
                if !ann.fg.contains(&v) && !ann.bg.contains(&v) {
                    prop_assert_eq!(once[v], m);
                }
            }
        }
    }
}
