//! Serve the API on a local port and drive it with the blocking client.
//!
//! Pass `--serve` to keep the server up on 127.0.0.1:8000 for a browser
//! client after the demo runs.

use std::time::Duration;

use iml3d::server::client::Client;
use iml3d::server::{http, Pacing, Server, ServerConfig, Service};
use iml3d::sim_annotator::{dense_annotation, make_synthetic_dataset};
use iml3d::unet3d::NetworkConfig;
use iml3d::Error;

fn main() -> iml3d::Result<()> {
    let keep = std::env::args().any(|a| a == "--serve");
    let root = tempfile::tempdir().expect("temp dir");
    let server = Server::open(ServerConfig {
        root: root.path().to_path_buf(),
        network: NetworkConfig {
            base_features: 2,
            levels: 2,
            downsample: vec![[2, 2, 2]],
            groupnorm_groups: 1,
            patch_dims: [8, 8, 8],
            batch_size: 2,
            ..NetworkConfig::default()
        },
        pacing: Pacing::Lockstep,
        ..ServerConfig::default()
    })?;
    let cases = make_synthetic_dataset(3, [24, 24, 24], 12)?;
    for c in &cases {
        server.register_volume(&c.volume)?;
    }
    let addr = if keep { "127.0.0.1:8000" } else { "127.0.0.1:0" };
    let handle = http::spawn(server.clone(), addr)?;
    let client = Client::new(handle.url());
    client.wait_ready(Duration::from_secs(5))?;
    println!("listening on {}", handle.url());

    println!("volumes: {:?}", client.volume_ids()?);
    let g = client.geometry("synth_000")?;
    println!("synth_000 geometry: dims {:?}, spacing {:?}", g.dims, g.spacing);

    let bbox = cases[2].truth_box().dilate(2, g.dims);
    match client.request_segmentation("synth_002", &bbox) {
        Err(Error::ModelNotReady) => println!("segment before any checkpoint: 503 model_not_ready"),
        other => println!("unexpected: {other:?}"),
    }

    for c in &cases[..2] {
        let b = c.truth_box().dilate(2, c.volume.dims());
        let ack = client.submit_annotation(&dense_annotation(&c.volume.id, &c.truth, &b)?)?;
        println!("submitted {} -> {} (train {}, val {})", ack.volume_id, ack.split, ack.train_size, ack.val_size);
    }
    let st = client.advance(5)?;
    println!("after 5 epochs: best val dice {:?} at epoch {:?}", st.best_val_dice, st.best_epoch);
    let seg = client.request_segmentation("synth_002", &bbox)?;
    println!("segmentation of synth_002: {} fg voxels in {}", seg.mask.iter().filter(|&&v| v).count(), seg.bbox);
    println!("split on the server: {:?}", client.split()?);

    if keep {
        client.start_training()?;
        println!("serving until interrupted");
        loop {
            std::thread::park();
        }
    }
    client.stop_training()?;
    handle.shutdown();
    server.shutdown()?;
    Ok(())
}
