//! Dice, mean dose and the running statistics used for reporting.

use iml3d::metrics::{dice, dose_abs_diff, gaussian_running_mean, mean_dose, running_stats, DoseMatrix};
use ndarray::Array3;

fn main() -> iml3d::Result<()> {
    let ball = |r: f64| {
        Array3::from_shape_fn((32, 32, 32), |(x, y, z)| {
            let d = [x, y, z].iter().map(|&v| (v as f64 - 16.0).powi(2)).sum::<f64>();
            d.sqrt() <= r
        })
    };
    let truth = ball(8.0);
    for r in [6.0, 7.5, 8.0, 9.0] {
        println!("dice(ball r={r}, ball r=8) = {:.4}", dice(&ball(r), &truth)?);
    }

    // Dose falls off linearly from the centre plane.
    let dose = DoseMatrix::new("ball", Array3::from_shape_fn((32, 32, 32), |(x, _, _)| 70.0 - 2.0 * (x as f32 - 16.0).abs()))?;
    println!("mean dose in truth: {:.3} Gy", mean_dose(&dose, &truth)?);
    println!("|mean dose difference| for r=9 vs r=8: {:.3} Gy", dose_abs_diff(&dose, &ball(9.0), &truth)?);

    let series: Vec<f64> = (0..12).map(|i| 0.6 + 0.03 * i as f64 + if i % 3 == 0 { 0.05 } else { 0.0 }).collect();
    let stats = running_stats(&series, 4)?;
    let smooth = gaussian_running_mean(&series, 2.0)?;
    println!("{:>3} {:>7} {:>7} {:>7} {:>7}", "i", "value", "mean4", "std4", "gauss");
    for (i, ((v, s), g)) in series.iter().zip(&stats).zip(&smooth).enumerate() {
        println!("{i:>3} {v:>7.3} {:>7.3} {:>7.3} {g:>7.3}", s.mean, s.std);
    }
    Ok(())
}
