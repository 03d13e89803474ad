//! Fit a small network to one sparsely annotated image.

use std::sync::Arc;

use iml3d::unet3d::{init_params, sample_patch, train_step, NetworkConfig, OptimizerConfig, Sgd, TrainingItem};
use iml3d::sim_annotator::{dense_annotation, make_synthetic_dataset};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> iml3d::Result<()> {
    let cfg = NetworkConfig {
        base_features: 4,
        levels: 2,
        downsample: vec![[2, 2, 2]],
        groupnorm_groups: 2,
        patch_dims: [16, 16, 16],
        batch_size: 2,
        ..NetworkConfig::default()
    };
    let case = make_synthetic_dataset(1, [32, 32, 32], 2)?.remove(0);
    let bbox = case.truth_box().dilate(3, case.volume.dims());
    let ann = dense_annotation(&case.volume.id, &case.truth, &bbox)?;
    let item = TrainingItem::new(Arc::new(case.volume), &ann)?;
    println!("{} parameters, {} annotated voxels", init_params(&cfg, 0)?.len(), ann.annotated_count());

    let mut params = init_params(&cfg, 0)?;
    let mut sgd = Sgd::new(OptimizerConfig::default());
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for step in 0..60 {
        let batch = (0..cfg.batch_size)
            .map(|_| sample_patch(&item, cfg.patch_dims, cfg.pad_value, &mut rng))
            .collect::<iml3d::Result<Vec<_>>>()?;
        let loss = train_step(&cfg, &mut params, &mut sgd, &batch)?;
        if step % 10 == 0 || step == 59 {
            println!("step {step:>2}: loss {loss:.4}");
        }
    }
    Ok(())
}
