//! Run the oracle annotator against an in-process server.

use iml3d::server::{Pacing, Server, ServerConfig, Service};
use iml3d::sim_annotator::{make_synthetic_dataset, run_session, OracleConfig};
use iml3d::unet3d::NetworkConfig;

fn main() -> iml3d::Result<()> {
    env_logger::init();
    let root = tempfile::tempdir().expect("temp dir");
    let server = Server::open(ServerConfig {
        root: root.path().to_path_buf(),
        network: NetworkConfig {
            base_features: 4,
            levels: 2,
            downsample: vec![[2, 2, 2]],
            groupnorm_groups: 2,
            patch_dims: [16, 16, 16],
            batch_size: 2,
            ..NetworkConfig::default()
        },
        pacing: Pacing::Lockstep,
        ..ServerConfig::default()
    })?;
    let cases = make_synthetic_dataset(10, [32, 32, 32], 8)?;
    for c in &cases {
        server.register_volume(&c.volume)?;
    }

    let cfg = OracleConfig { epochs_per_image: 2, ..OracleConfig::default() };
    let report = run_session(&cases, &server, &cfg, "demo")?;
    println!("{:>9} {:>5} {:>10} {:>10}", "image", "split", "dice", "annotated");
    for r in &report.rows {
        println!("{:>9} {:>5} {:>10.4} {:>10}", r.volume_id, r.split, r.dice_pred_corrected, r.annotated_voxels);
    }
    let st = server.status()?;
    println!("epoch {}, best val dice {:?}", st.epoch_index, st.best_val_dice);
    server.shutdown()?;
    Ok(())
}
