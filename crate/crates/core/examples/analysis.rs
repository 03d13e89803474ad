//! Turn a session report into the CSV tables and SVG plots.
//!
//! Usage: `cargo run --example analysis -- [report.csv]`. Without a report a
//! made-up one is used.

use std::path::PathBuf;

use iml3d::analysis::{self, DiceColumn};
use iml3d::sim_annotator::{read_report, SessionRow};

fn fake_report() -> Vec<SessionRow> {
    (1..=120)
        .map(|i| {
            let t = i as f64 / 120.0;
            let wobble = ((i * 37) % 11) as f64 / 100.0;
            SessionRow {
                index: i,
                volume_id: format!("img{i:03}"),
                split: if i % 6 == 2 { "val" } else { "train" }.into(),
                bootstrap: i <= 2,
                dice_pred_corrected: (0.55 + 0.4 * t + wobble).min(1.0),
                dice_corrected_truth: 1.0,
                annotated_voxels: (5000.0 * (1.0 - t)) as usize + 20,
                fg_voxels: 0,
                bg_voxels: 0,
                predicted_voxels: 0,
                dose_abs_diff: Some(2.5 * (1.0 - t) + wobble * 3.0),
                epoch_at_submit: 2 * i as u64,
                best_val_dice: None,
            }
        })
        .collect()
}

fn main() -> iml3d::Result<()> {
    let rows = match std::env::args().nth(1) {
        Some(p) => read_report(p)?,
        None => fake_report(),
    };
    let out = PathBuf::from(std::env::var("OUT").unwrap_or_else(|_| "target/analysis-example".into()));

    let dice = analysis::dice_series(&rows, DiceColumn::PredCorrected, analysis::DICE_WINDOW)?;
    let last = dice.last().expect("non-empty report");
    println!("final running dice {:.3} +/- {:.3}", last.running_mean, last.running_std);
    let dose = analysis::dose_series(&rows, 20.0)?;
    let bands = analysis::dose_bands(&dose.iter().map(|r| r.abs_diff).collect::<Vec<_>>());
    for b in &bands {
        println!(
            "images {}-{}: {:.0}% below 0.25 Gy, {:.0}% in [0.25, 1], {:.0}% above 1 Gy",
            b.first, b.last, b.below_pct, b.mid_pct, b.high_pct
        );
    }

    let mut written = analysis::write_dice(&out, "dice", &dice)?.to_vec();
    written.extend(analysis::write_dose(&out, "dose", &dose)?);
    written.extend(analysis::write_dose_bands(&out, "dose_bands", &bands)?);
    for p in written {
        println!("wrote {}", p.display());
    }
    Ok(())
}
