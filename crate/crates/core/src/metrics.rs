//! Dice, mean organ dose and running statistics.

use std::io::Write;

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::{Error, Mask, Result};

fn check_shapes(a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(Error::ShapeMismatch {
            expected: a.to_vec(),
            found: b.to_vec(),
        });
    }
    Ok(())
}

/// `2|a ∩ b| / (|a| + |b|)`, with two empty masks scoring 1.
pub fn dice(a: &Mask, b: &Mask) -> Result<f64> {
    check_shapes(a.shape(), b.shape())?;
    let (mut both, mut total) = (0u64, 0u64);
    for (&x, &y) in a.iter().zip(b.iter()) {
        both += u64::from(x && y);
        total += u64::from(x) + u64::from(y);
    }
    Ok(if total == 0 { 1.0 } else { 2.0 * both as f64 / total as f64 })
}

/// Absorbed dose in Gy per voxel of a volume.
#[derive(Debug, Clone, PartialEq)]
pub struct DoseMatrix {
    pub volume_id: String,
    pub grid: Array3<f32>,
}

impl DoseMatrix {
    pub fn new(volume_id: impl Into<String>, grid: Array3<f32>) -> Result<Self> {
        if let Some(v) = grid.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
            return Err(Error::Malformed(format!("dose value {v} is not a finite non-negative number")));
        }
        Ok(Self {
            volume_id: volume_id.into(),
            grid,
        })
    }
}

/// Mean dose over the voxels of `mask`.
pub fn mean_dose(dose: &DoseMatrix, mask: &Mask) -> Result<f64> {
    check_shapes(dose.grid.shape(), mask.shape())?;
    let (mut sum, mut n) = (0.0f64, 0u64);
    for (&d, &m) in dose.grid.iter().zip(mask.iter()) {
        if m {
            sum += f64::from(d);
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::Empty("mask for mean dose"));
    }
    Ok(sum / n as f64)
}

/// `|mean_dose(pred) - mean_dose(corrected)|`.
pub fn dose_abs_diff(dose: &DoseMatrix, pred: &Mask, corrected: &Mask) -> Result<f64> {
    Ok((mean_dose(dose, pred)? - mean_dose(dose, corrected)?).abs())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WindowStat {
    pub mean: f64,
    /// Population standard deviation of the window.
    pub std: f64,
}

/// Trailing-window mean and standard deviation at every index. Early
/// indices use all values seen so far.
pub fn running_stats(series: &[f64], window: usize) -> Result<Vec<WindowStat>> {
    if series.is_empty() {
        return Err(Error::Empty("series"));
    }
    if window == 0 {
        return Err(Error::Config("window must be at least 1".into()));
    }
    Ok((0..series.len())
        .map(|i| {
            let w = &series[(i + 1).saturating_sub(window)..=i];
            let n = w.len() as f64;
            let mean = w.iter().sum::<f64>() / n;
            let var = w.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            WindowStat { mean, std: var.sqrt() }
        })
        .collect())
}

/// Gaussian kernels are truncated at this many bandwidths.
pub const GAUSSIAN_TRUNCATE: f64 = 4.0;

/// Default kernel bandwidth in index units.
pub const DEFAULT_BANDWIDTH: f64 = 120.0;

/// Kernel-weighted mean of the series around every index, with weights
/// `exp(-d² / 2σ²)` over index distance `d` normalised over the indices
/// that exist.
pub fn gaussian_running_mean(series: &[f64], bandwidth: f64) -> Result<Vec<f64>> {
    if !(bandwidth > 0.0) {
        return Err(Error::Config(format!("bandwidth {bandwidth} must be positive")));
    }
    let reach = (GAUSSIAN_TRUNCATE * bandwidth).ceil() as usize;
    Ok((0..series.len())
        .map(|i| {
            let lo = i.saturating_sub(reach);
            let hi = (i + reach).min(series.len() - 1);
            let (mut num, mut den) = (0.0, 0.0);
            for (j, v) in series.iter().enumerate().take(hi + 1).skip(lo) {
                let d = j as f64 - i as f64;
                let w = (-d * d / (2.0 * bandwidth * bandwidth)).exp();
                num += w * v;
                den += w;
            }
            num / den
        })
        .collect())
}

/// One row of a per-image metric CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesRow {
    pub index: usize,
    pub volume_id: String,
    pub value: f64,
}

/// Write `index,volume_id,value` rows.
pub fn write_series_csv<W: Write>(out: W, rows: &[SeriesRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r).map_err(|e| Error::Malformed(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::Malformed(e.to_string()))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn mask_of(dims: (usize, usize, usize), on: &[[usize; 3]]) -> Mask {
        let mut m = Mask::from_elem(dims, false);
        for v in on {
            m[*v] = true;
        }
        m
    }

    #[test]
    fn dice_cases() {
        let a = mask_of((4, 4, 4), &[[0, 0, 0], [1, 1, 1]]);
        let b = mask_of((4, 4, 4), &[[2, 2, 2]]);
        assert_eq!(dice(&a, &a).unwrap(), 1.0);
        assert_eq!(dice(&a, &b).unwrap(), 0.0);
        let empty = Mask::from_elem((4, 4, 4), false);
        assert_eq!(dice(&empty, &empty).unwrap(), 1.0);
        assert_eq!(dice(&empty, &a).unwrap(), 0.0);
        assert!(dice(&a, &Mask::from_elem((4, 4, 3), false)).is_err());
        // |a| = |b| = 8 with 4 shared voxels.
        let a8: Vec<[usize; 3]> = (0..8).map(|i| [i % 4, i / 4, 0]).collect();
        let b8: Vec<[usize; 3]> = (4..12).map(|i| [i % 4, i / 4, 0]).collect();
        assert_eq!(dice(&mask_of((4, 4, 1), &a8), &mask_of((4, 4, 1), &b8)).unwrap(), 0.5);
    }

    #[test]
    fn dose_cases() {
        let uniform = DoseMatrix::new("v", Array3::from_elem((3, 3, 3), 2.0)).unwrap();
        assert_eq!(mean_dose(&uniform, &mask_of((3, 3, 3), &[[0, 1, 2], [2, 2, 2]])).unwrap(), 2.0);
        let mut g = Array3::zeros((3, 1, 1));
        g[[0, 0, 0]] = 1.0;
        g[[1, 0, 0]] = 3.0;
        g[[2, 0, 0]] = 8.0;
        let dose = DoseMatrix::new("v", g).unwrap();
        let pred = mask_of((3, 1, 1), &[[0, 0, 0], [1, 0, 0]]);
        assert_eq!(mean_dose(&dose, &pred).unwrap(), 2.0);
        // Corrected adds the 8 Gy voxel: mean 4, so the deviation is 2.
        let corrected = mask_of((3, 1, 1), &[[0, 0, 0], [1, 0, 0], [2, 0, 0]]);
        assert_eq!(dose_abs_diff(&dose, &pred, &corrected).unwrap(), 2.0);
        assert_eq!(dose_abs_diff(&dose, &corrected, &pred).unwrap(), 2.0);
        assert_eq!(dose_abs_diff(&dose, &pred, &pred).unwrap(), 0.0);
        assert!(matches!(
            mean_dose(&dose, &Mask::from_elem((3, 1, 1), false)),
            Err(Error::Empty(_))
        ));
        assert!(DoseMatrix::new("v", Array3::from_elem((1, 1, 1), -1.0)).is_err());
    }

    #[test]
    fn running_stats_cases() {
        let series: Vec<f64> = (1..=100).map(f64::from).collect();
        let s = running_stats(&series, 60).unwrap();
        assert_eq!(s[99].mean, 70.5);
        assert_eq!(s[0].mean, 1.0);
        let flat = running_stats(&[0.75; 30], 7).unwrap();
        assert!(flat.iter().all(|w| w.mean == 0.75 && w.std == 0.0));
        let ones = running_stats(&series, 1).unwrap();
        assert!(ones.iter().zip(&series).all(|(w, v)| w.mean == *v));
        assert!(running_stats(&[], 3).is_err());
        assert!(running_stats(&[1.0], 0).is_err());
    }

    #[test]
    fn gaussian_cases() {
        let flat = gaussian_running_mean(&[3.0; 50], 10.0).unwrap();
        assert!(flat.iter().all(|v| (v - 3.0).abs() < 1e-12));
        let series: Vec<f64> = (0..200).map(|i| ((i as f64) * 0.37).sin() * 5.0 + 2.0).collect();
        let sharp = gaussian_running_mean(&series, 1e-3).unwrap();
        assert!(sharp.iter().zip(&series).all(|(a, b)| (a - b).abs() < 1e-12));
        // A series symmetric about its midpoint keeps its global mean.
        let sym: Vec<f64> = (0..101).map(|i| ((i as f64) - 50.0).abs().sqrt()).collect();
        let smooth = gaussian_running_mean(&sym, 6.0).unwrap();
        let m0 = sym.iter().sum::<f64>() / 101.0;
        let m1 = smooth.iter().sum::<f64>() / 101.0;
        assert!((m0 - m1).abs() < 0.05 * m0, "{m0} vs {m1}");
        assert!(gaussian_running_mean(&sym, 0.0).is_err());
    }

    #[test]
    fn csv_rows() {
        let mut buf = Vec::new();
        let rows = vec![SeriesRow {
            index: 1,
            volume_id: "a".into(),
            value: 0.5,
        }];
        write_series_csv(&mut buf, &rows).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "index,volume_id,value\n1,a,0.5\n");
    }

    fn arb_masks() -> impl Strategy<Value = (Mask, Mask)> {
        (1usize..6, 1usize..6, 1usize..6).prop_flat_map(|(w, h, d)| {
            let n = w * h * d;
            (
                proptest::collection::vec(any::<bool>(), n),
                proptest::collection::vec(any::<bool>(), n),
            )
                .prop_map(move |(a, b)| {
                    (
                        Mask::from_shape_vec((w, h, d), a).unwrap(),
                        Mask::from_shape_vec((w, h, d), b).unwrap(),
                    )
                })
        })
    }

    proptest! {
        #[test]
        fn dice_properties((a, b) in arb_masks()) {
            let ab = dice(&a, &b).unwrap();
            prop_assert_eq!(ab, dice(&b, &a).unwrap());
            prop_assert!((0.0..=1.0).contains(&ab));
            prop_assert_eq!(dice(&a, &a).unwrap(), 1.0);
        }

        #[test]
        fn mean_dose_is_bounded(values in proptest::collection::vec(0.0f32..70.0, 27), bits in proptest::collection::vec(any::<bool>(), 27)) {
            prop_assume!(bits.iter().any(|&b| b));
            let dose = DoseMatrix::new("v", Array3::from_shape_vec((3, 3, 3), values.clone()).unwrap()).unwrap();
            let mask = Mask::from_shape_vec((3, 3, 3), bits.clone()).unwrap();
            let m = mean_dose(&dose, &mask).unwrap();
            let inside: Vec<f64> = values.iter().zip(&bits).filter(|(_, &b)| b).map(|(&v, _)| f64::from(v)).collect();
            let lo = inside.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = inside.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(m >= lo - 1e-9 && m <= hi + 1e-9);
            // Reversing voxel order leaves the mean unchanged.
            let rev_v: Vec<f32> = values.iter().rev().cloned().collect();
            let rev_b: Vec<bool> = bits.iter().rev().cloned().collect();
            let m2 = mean_dose(
                &DoseMatrix::new("v", Array3::from_shape_vec((3, 3, 3), rev_v).unwrap()).unwrap(),
                &Mask::from_shape_vec((3, 3, 3), rev_b).unwrap(),
            ).unwrap();
            prop_assert!((m - m2).abs() < 1e-9);
        }

        #[test]
        fn wide_window_is_global(series in proptest::collection::vec(-5.0f64..5.0, 1..80)) {
            let s = running_stats(&series, series.len() + 3).unwrap();
            let last = s.last().unwrap();
            let n = series.len() as f64;
            let mean = series.iter().sum::<f64>() / n;
            let std = (series.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
            prop_assert!((last.mean - mean).abs() < 1e-9);
            prop_assert!((last.std - std).abs() < 1e-9);
        }
    }
}
