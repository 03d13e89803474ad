//! Write a volume to NIfTI, read it back, window it and crop it.

use iml3d::volume_io::{crop, load_volume, save_volume, window_normalize};
use iml3d::{BoundingBox, Volume, WindowPreset};
use ndarray::Array3;

fn main() -> iml3d::Result<()> {
    let grid = Array3::from_shape_fn((48, 40, 24), |(x, y, z)| {
        let d = ((x as f32 - 24.0).powi(2) + (y as f32 - 20.0).powi(2) + (2.0 * z as f32 - 24.0).powi(2)).sqrt();
        if d < 12.0 { 80.0 } else { -900.0 }
    });
    let volume = Volume::new("phantom", grid, [0.8, 0.8, 2.5])?;

    let dir = tempfile::tempdir().expect("temp dir");
    let path = dir.path().join("phantom.nii.gz");
    save_volume(&volume, &path)?;
    let back = load_volume(&path)?;
    println!("{} -> id {}, dims {:?}, spacing {:?}", path.display(), back.id, back.dims(), back.spacing);
    assert_eq!(back.grid, volume.grid);

    for name in ["mediastinal", "lung", "bone"] {
        let preset = WindowPreset::by_name(name).expect("known preset");
        let w = window_normalize(&back, &preset);
        let bright = w.iter().filter(|&&v| v > 0.5).count();
        println!("{name:>12} [{}, {}]: {bright} voxels above mid-grey", preset.lower, preset.upper);
    }

    let bbox = BoundingBox::new([12, 8, 6], [35, 31, 17])?;
    let sub = crop(&back, &bbox)?;
    let a = sub.geometry().affine;
    println!("crop {bbox}: dims {:?}, origin at ({:.1}, {:.1}, {:.1}) mm", sub.dims(), a[0][3], a[1][3], a[2][3]);
    Ok(())
}
