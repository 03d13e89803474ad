//! Segment a box with overlapping windows and compare strides.

use iml3d::sim_annotator::make_synthetic_dataset;
use iml3d::unet3d::inference::window_origins;
use iml3d::unet3d::{init_params, predict_box, InferenceOptions, NetworkConfig};

fn main() -> iml3d::Result<()> {
    let cfg = NetworkConfig {
        base_features: 4,
        levels: 2,
        downsample: vec![[2, 2, 2]],
        groupnorm_groups: 2,
        patch_dims: [16, 16, 16],
        ..NetworkConfig::default()
    };
    let params = init_params(&cfg, 1)?;
    let case = make_synthetic_dataset(1, [48, 48, 32], 4)?.remove(0);
    let bbox = case.truth_box().dilate(4, case.volume.dims());

    // An untrained network: the numbers show how window overlap changes the
    // averaged probabilities, not segmentation quality.
    let mut reference = None;
    for stride in [None, Some([16, 16, 16]), Some([4, 4, 4])] {
        let opts = InferenceOptions { stride, ..InferenceOptions::default() };
        let s = opts.stride_for(cfg.patch_dims);
        let windows = window_origins(bbox.extent(), cfg.patch_dims, s).len();
        let t = std::time::Instant::now();
        let probs = predict_box(&cfg, &params, &case.volume, &bbox, &opts)?;
        let secs = t.elapsed().as_secs_f64();
        let reference = reference.get_or_insert_with(|| probs.clone());
        let dev = probs.iter().zip(reference.iter()).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
        println!("stride {s:?}: {windows} windows, mean p {:.4}, max |p - p_default| {dev:.4}, {secs:.2} s", probs.mean().unwrap());
    }
    Ok(())
}
