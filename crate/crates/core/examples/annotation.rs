//! Sparse corrections on top of a model prediction.

use iml3d::annotation::{load_annotation, save_annotation, LABEL_BG, LABEL_FG};
use iml3d::{merge_corrected, BoundingBox, Segmentation, SparseAnnotation, Volume};
use ndarray::Array3;

fn main() -> iml3d::Result<()> {
    let volume = Volume::new("case", Array3::zeros((32, 32, 16)), [1.0; 3])?;
    let bbox = BoundingBox::new([4, 4, 2], [19, 19, 11])?;

    // The model predicted a cube; the annotator adds two voxels it missed
    // and removes one it got wrong.
    let pred = Array3::from_shape_fn((16, 16, 10), |(x, y, z)| (4..10).contains(&x) && (4..10).contains(&y) && z < 6);
    let seg = Segmentation::new("case", bbox, pred, 0.5)?;
    let ann = SparseAnnotation::new("case", bbox, [[14, 10, 4], [14, 11, 4]], [[8, 8, 2]])?;
    println!("{} annotated voxels in {bbox}", ann.annotated_count());

    let labels = ann.box_labels();
    let fg = labels.iter().filter(|&&l| l == LABEL_FG).count();
    let bg = labels.iter().filter(|&&l| l == LABEL_BG).count();
    println!("box label grid {:?}: {fg} fg, {bg} bg", labels.dim());

    let corrected = merge_corrected(&seg, &ann)?;
    let before = seg.mask.iter().filter(|&&v| v).count();
    let after = corrected.iter().filter(|&&v| v).count();
    println!("foreground {before} -> {after} after the correction");

    // Overlapping labels are rejected.
    let bad = SparseAnnotation::new("case", bbox, [[8, 8, 2]], [[8, 8, 2]]);
    println!("fg and bg on the same voxel: {}", bad.unwrap_err());

    let dir = tempfile::tempdir().expect("temp dir");
    let path = dir.path().join("case.nii.gz");
    save_annotation(&ann, &volume, &path)?;
    let back = load_annotation(&path)?;
    assert_eq!(back.fg, ann.fg);
    println!("round trip through {} keeps bbox {}", path.display(), back.bbox);
    Ok(())
}
