//! Split rule, epoch sizing and best-checkpoint selection without a server.

use std::sync::Arc;

use iml3d::scheduler::{
    epoch_length, maybe_restart, run_epoch, DatasetSplit, EpochOptions, SchedulerConfig, TrainerState, TrainingData,
};
use iml3d::sim_annotator::{dense_annotation, make_synthetic_dataset};
use iml3d::unet3d::{NetworkConfig, OptimizerConfig, TrainingItem};

fn main() -> iml3d::Result<()> {
    let mut split = DatasetSplit::default();
    let seq: String = (0..18)
        .map(|i| split.assign(format!("img{i}")).map(|s| s.dir_name().chars().next().unwrap()))
        .collect::<iml3d::Result<_>>()?;
    println!("arrival splits: {seq}");
    for v in [0, 10, 50, 400] {
        println!("epoch length with {v} val patches: {}", epoch_length(v));
    }

    let net = NetworkConfig {
        base_features: 2,
        levels: 2,
        downsample: vec![[2, 2, 2]],
        groupnorm_groups: 1,
        patch_dims: [8, 8, 8],
        batch_size: 2,
        ..NetworkConfig::default()
    };
    let cases = make_synthetic_dataset(4, [24, 24, 24], 6)?;
    let mut split = DatasetSplit::default();
    let mut data = TrainingData::default();
    for c in cases {
        let bbox = c.truth_box().dilate(2, c.volume.dims());
        let ann = dense_annotation(&c.volume.id, &c.truth, &bbox)?;
        let s = split.assign(c.volume.id.clone())?;
        data.push(s, TrainingItem::new(Arc::new(c.volume), &ann)?, net.patch_dims)?;
    }
    println!("train {}, val {} ({} val patches)", data.train.len(), data.val.len(), data.val_patches);

    let sched = SchedulerConfig::default();
    let mut state = TrainerState::new(&net, &sched, OptimizerConfig::default(), 3)?;
    let dir = tempfile::tempdir().expect("temp dir");
    let opts = EpochOptions { checkpoint_dir: Some(dir.path().to_path_buf()), ..EpochOptions::default() };
    for _ in 0..8 {
        let r = run_epoch(&mut state, &data, &net, &opts)?;
        println!(
            "epoch {}: {} samples, loss {:.4}, val dice {:.4}{}",
            r.epoch_index,
            r.samples,
            r.mean_loss.unwrap_or(f64::NAN),
            r.val_dice.unwrap_or(f64::NAN),
            if r.improved { "  (new best, saved)" } else { "" }
        );
        maybe_restart(&mut state, &net, 1)?;
    }
    println!("best {:.4}, {} epochs since", state.best_val_dice().unwrap_or(0.0), state.epochs_without_progress);
    Ok(())
}
