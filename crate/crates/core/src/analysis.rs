//! Figure data for a finished session: per-image dice with a running mean,
//! annotation durations, and dose deviation with band percentages.
//!
//! Each analysis returns its table, and the `write_*` helpers put that same
//! table into a CSV and an SVG plot so the plot never shows
//! numbers the CSV lacks.

use std::path::{Path, PathBuf};

use plotters::prelude::*;
use serde::{Deserialize, Serialize};

use crate::interaction_log::{durations, whole_log_period, AnnotationPeriod, EventKind, InteractionEvent};
use crate::metrics::{gaussian_running_mean, running_stats};
use crate::sim_annotator::SessionRow;
use crate::{Error, Result};

/// Running window for the dice figure, in images.
pub const DICE_WINDOW: usize = 60;

/// Lower edge of the smallest reported dose band, in Gy.
pub const DOSE_BAND_LOW: f64 = 0.25;
/// Edge between the two reported dose bands, in Gy.
pub const DOSE_BAND_HIGH: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiceColumn {
    /// Model prediction against the corrected mask.
    PredCorrected,
    /// Corrected mask against ground truth.
    CorrectedTruth,
}

impl std::str::FromStr for DiceColumn {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pred_corrected" => Ok(Self::PredCorrected),
            "corrected_truth" => Ok(Self::CorrectedTruth),
            _ => Err(Error::Malformed(format!("unknown dice column '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiceRow {
    pub index: usize,
    pub volume_id: String,
    pub dice: f64,
    pub running_mean: f64,
    pub running_std: f64,
}

pub fn dice_series(rows: &[SessionRow], column: DiceColumn, window: usize) -> Result<Vec<DiceRow>> {
    let values: Vec<f64> = rows
        .iter()
        .map(|r| match column {
            DiceColumn::PredCorrected => r.dice_pred_corrected,
            DiceColumn::CorrectedTruth => r.dice_corrected_truth,
        })
        .collect();
    let stats = running_stats(&values, window)?;
    Ok(rows
        .iter()
        .zip(values)
        .zip(stats)
        .map(|((r, dice), s)| DiceRow {
            index: r.index,
            volume_id: r.volume_id.clone(),
            dice,
            running_mean: s.mean,
            running_std: s.std,
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DurationRow {
    /// Position in the order images were first opened, from 1.
    pub index: usize,
    pub volume_id: String,
    pub seconds: f64,
}

/// Per-image durations in the order images were first opened. Without
/// periods the whole log is one period.
pub fn duration_series(
    events: &[InteractionEvent],
    periods: Option<&[AnnotationPeriod]>,
    threshold: f64,
) -> Result<Vec<DurationRow>> {
    if events.is_empty() {
        return Err(Error::Empty("event log"));
    }
    let whole;
    let periods = match periods {
        Some(p) => p,
        None => {
            whole = whole_log_period(events);
            &whole[..]
        }
    };
    let totals = durations(events, periods, threshold);
    let mut order: Vec<&str> = Vec::new();
    for e in events.iter().filter(|e| e.kind == EventKind::OpenFile) {
        if !order.contains(&e.volume_id.as_str()) {
            order.push(&e.volume_id);
        }
    }
    Ok(order
        .into_iter()
        .filter_map(|id| totals.get(id).map(|s| (id, *s)))
        .enumerate()
        .map(|(i, (id, seconds))| DurationRow {
            index: i + 1,
            volume_id: id.to_string(),
            seconds,
        })
        .collect())
}

/// Mean duration of the first and last `k` images.
pub fn first_last_means(rows: &[DurationRow], k: usize) -> Option<(f64, f64)> {
    if k == 0 || rows.len() < k {
        return None;
    }
    let mean = |r: &[DurationRow]| r.iter().map(|r| r.seconds).sum::<f64>() / k as f64;
    Some((mean(&rows[..k]), mean(&rows[rows.len() - k..])))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DoseRow {
    pub index: usize,
    pub volume_id: String,
    pub abs_diff: f64,
    pub gaussian_mean: f64,
}

pub fn dose_series(rows: &[SessionRow], bandwidth: f64) -> Result<Vec<DoseRow>> {
    let picked: Vec<(&SessionRow, f64)> = rows.iter().filter_map(|r| r.dose_abs_diff.map(|d| (r, d))).collect();
    if picked.is_empty() {
        return Err(Error::Empty("dose differences"));
    }
    let values: Vec<f64> = picked.iter().map(|(_, d)| *d).collect();
    let smooth = gaussian_running_mean(&values, bandwidth)?;
    Ok(picked
        .iter()
        .zip(smooth)
        .map(|((r, d), g)| DoseRow {
            index: r.index,
            volume_id: r.volume_id.clone(),
            abs_diff: *d,
            gaussian_mean: g,
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DoseBandRow {
    pub group: usize,
    /// First and last image index (1-based positions in the series).
    pub first: usize,
    pub last: usize,
    pub count: usize,
    /// Below the lowest reported band.
    pub below_pct: f64,
    /// Within `[0.25, 1]` Gy.
    pub mid_pct: f64,
    /// Above 1 Gy.
    pub high_pct: f64,
}

/// Split positions `0..n` into three contiguous groups at
/// `floor(k n / 3)`.
pub fn thirds(n: usize) -> [std::ops::Range<usize>; 3] {
    let cut = |k: usize| k * n / 3;
    [cut(0)..cut(1), cut(1)..cut(2), cut(2)..cut(3)]
}

pub fn dose_bands(diffs: &[f64]) -> Vec<DoseBandRow> {
    thirds(diffs.len())
        .into_iter()
        .enumerate()
        .filter(|(_, r)| !r.is_empty())
        .map(|(g, range)| {
            let part = &diffs[range.clone()];
            let n = part.len() as f64;
            let pct = |f: &dyn Fn(f64) -> bool| 100.0 * part.iter().filter(|d| f(**d)).count() as f64 / n;
            DoseBandRow {
                group: g + 1,
                first: range.start + 1,
                last: range.end,
                count: part.len(),
                below_pct: pct(&|d| d < DOSE_BAND_LOW),
                mid_pct: pct(&|d| (DOSE_BAND_LOW..=DOSE_BAND_HIGH).contains(&d)),
                high_pct: pct(&|d| d > DOSE_BAND_HIGH),
            }
        })
        .collect()
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Malformed(format!("{}: {e}", path.display())))?;
    for r in rows {
        w.serialize(r).map_err(|e| Error::Malformed(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::Malformed(format!("{}: {e}", path.display())))?;
    r.deserialize()
        .map(|row| row.map_err(|e| Error::Malformed(format!("{}: {e}", path.display()))))
        .collect()
}

fn plot_err(e: impl std::fmt::Display) -> Error {
    Error::Malformed(format!("plot: {e}"))
}

struct Series<'a> {
    label: &'a str,
    points: Vec<(f64, f64)>,
    color: RGBColor,
    line: bool,
}

fn line_plot(path: &Path, title: &str, y_label: &str, series: &[Series], band: Option<(&[f64], &[f64], &[f64])>) -> Result<()> {
    let all = series.iter().flat_map(|s| s.points.iter());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, 0.0f64, f64::MIN);
    for (x, y) in all {
        x0 = x0.min(*x);
        x1 = x1.max(*x);
        y0 = y0.min(*y);
        y1 = y1.max(*y);
    }
    if let Some((_, lo, hi)) = band {
        y0 = lo.iter().fold(y0, |a, b| a.min(*b));
        y1 = hi.iter().fold(y1, |a, b| a.max(*b));
    }
    if x1 <= x0 {
        x1 = x0 + 1.0;
    }
    if y1 <= y0 {
        y1 = y0 + 1.0;
    }
    let root = SVGBackend::new(path, (900, 500)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(40)
        .y_label_area_size(60)
        .build_cartesian_2d(x0..x1, y0..y1 * 1.05)
        .map_err(plot_err)?;
    chart
        .configure_mesh()
        .x_desc("image")
        .y_desc(y_label)
        .draw()
        .map_err(plot_err)?;
    if let Some((xs, lo, hi)) = band {
        let poly: Vec<(f64, f64)> = xs
            .iter()
            .zip(hi)
            .map(|(x, y)| (*x, *y))
            .chain(xs.iter().zip(lo).rev().map(|(x, y)| (*x, *y)))
            .collect();
        chart
            .draw_series(std::iter::once(Polygon::new(poly, BLUE.mix(0.15).filled())))
            .map_err(plot_err)?;
    }
    for s in series {
        let color = s.color;
        if s.line {
            chart
                .draw_series(LineSeries::new(s.points.iter().copied(), color.stroke_width(2)))
                .map_err(plot_err)?
                .label(s.label)
                .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 18, y)], color));
        } else {
            chart
                .draw_series(PointSeries::of_element(s.points.iter().copied(), 2, color.filled(), &|c, r, st| {
                    Circle::new(c, r, st)
                }))
                .map_err(plot_err)?
                .label(s.label)
                .legend(move |(x, y)| Circle::new((x + 9, y), 3, color.filled()));
        }
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(plot_err)?;
    root.present().map_err(plot_err)
}

/// Write `<stem>.csv` and `<stem>.svg` into `dir`; returns both paths.
pub fn write_dice(dir: &Path, stem: &str, rows: &[DiceRow]) -> Result<[PathBuf; 2]> {
    let (csv_path, svg_path) = paths(dir, stem)?;
    write_csv(&csv_path, rows)?;
    let xs: Vec<f64> = rows.iter().map(|r| r.index as f64).collect();
    let lo: Vec<f64> = rows.iter().map(|r| r.running_mean - r.running_std).collect();
    let hi: Vec<f64> = rows.iter().map(|r| r.running_mean + r.running_std).collect();
    line_plot(
        &svg_path,
        "Dice per image",
        "dice",
        &[
            Series {
                label: "dice",
                points: rows.iter().map(|r| (r.index as f64, r.dice)).collect(),
                color: RGBColor(90, 90, 90),
                line: false,
            },
            Series {
                label: "running mean",
                points: rows.iter().map(|r| (r.index as f64, r.running_mean)).collect(),
                color: BLUE,
                line: true,
            },
        ],
        Some((&xs, &lo, &hi)),
    )?;
    Ok([csv_path, svg_path])
}

pub fn write_durations(dir: &Path, stem: &str, rows: &[DurationRow]) -> Result<[PathBuf; 2]> {
    let (csv_path, svg_path) = paths(dir, stem)?;
    write_csv(&csv_path, rows)?;
    line_plot(
        &svg_path,
        "Annotation duration per image",
        "seconds",
        &[Series {
            label: "duration",
            points: rows.iter().map(|r| (r.index as f64, r.seconds)).collect(),
            color: RED,
            line: false,
        }],
        None,
    )?;
    Ok([csv_path, svg_path])
}

pub fn write_dose(dir: &Path, stem: &str, rows: &[DoseRow]) -> Result<[PathBuf; 2]> {
    let (csv_path, svg_path) = paths(dir, stem)?;
    write_csv(&csv_path, rows)?;
    line_plot(
        &svg_path,
        "Absolute mean dose difference",
        "Gy",
        &[
            Series {
                label: "difference",
                points: rows.iter().map(|r| (r.index as f64, r.abs_diff)).collect(),
                color: RGBColor(90, 90, 90),
                line: false,
            },
            Series {
                label: "gaussian running mean",
                points: rows.iter().map(|r| (r.index as f64, r.gaussian_mean)).collect(),
                color: BLUE,
                line: true,
            },
        ],
        None,
    )?;
    Ok([csv_path, svg_path])
}

/// Grouped bars for the two reported bands in each group.
pub fn write_dose_bands(dir: &Path, stem: &str, rows: &[DoseBandRow]) -> Result<[PathBuf; 2]> {
    let (csv_path, svg_path) = paths(dir, stem)?;
    write_csv(&csv_path, rows)?;
    let top = rows.iter().map(|r| r.mid_pct.max(r.high_pct)).fold(1.0, f64::max);
    let root = SVGBackend::new(&svg_path, (700, 450)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption("Images per dose-difference band", ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(40)
        .y_label_area_size(50)
        .build_cartesian_2d(0.0..rows.len() as f64, 0.0..top * 1.1)
        .map_err(plot_err)?;
    let labels: Vec<String> = rows.iter().map(|r| format!("{}-{}", r.first, r.last)).collect();
    chart
        .configure_mesh()
        .disable_x_mesh()
        .x_labels(rows.len().max(1))
        .x_label_formatter(&|x| {
            let i = x.floor() as usize;
            labels.get(i).cloned().unwrap_or_default()
        })
        .y_desc("% of images")
        .draw()
        .map_err(plot_err)?;
    for (offset, color, label, get) in [
        (0.15, BLUE, "0.25 to 1 Gy", (|r: &DoseBandRow| r.mid_pct) as fn(&DoseBandRow) -> f64),
        (0.5, RED, "over 1 Gy", |r: &DoseBandRow| r.high_pct),
    ] {
        chart
            .draw_series(rows.iter().enumerate().map(|(i, r)| {
                let x = i as f64 + offset;
                Rectangle::new([(x, 0.0), (x + 0.33, get(r))], color.filled())
            }))
            .map_err(plot_err)?
            .label(label)
            .legend(move |(x, y)| Rectangle::new([(x, y - 5), (x + 12, y + 5)], color.filled()));
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(plot_err)?;
    root.present().map_err(plot_err)?;
    drop(chart);
    drop(root);
    Ok([csv_path, svg_path])
}

fn paths(dir: &Path, stem: &str) -> Result<(PathBuf, PathBuf)> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    Ok((dir.join(format!("{stem}.csv")), dir.join(format!("{stem}.svg"))))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::interaction_log::INACTIVITY_THRESHOLD;

    fn row(i: usize, d: f64, dose: Option<f64>) -> SessionRow {
        SessionRow {
            index: i,
            volume_id: format!("v{i}"),
            split: "train".into(),
            bootstrap: false,
            dice_pred_corrected: d,
            dice_corrected_truth: 1.0,
            annotated_voxels: 0,
            fg_voxels: 0,
            bg_voxels: 0,
            predicted_voxels: 0,
            dose_abs_diff: dose,
            epoch_at_submit: 0,
            best_val_dice: None,
        }
    }

    #[test]
    fn constant_dice_gives_flat_running_mean() {
        let rows: Vec<_> = (1..=100).map(|i| row(i, 0.75, None)).collect();
        let s = dice_series(&rows, DiceColumn::PredCorrected, DICE_WINDOW).unwrap();
        assert!(s.iter().all(|r| r.running_mean == 0.75 && r.running_std == 0.0));
    }

    #[test]
    fn hand_bucketed_bands() {
        let bands = dose_bands(&[0.1, 0.5, 1.5]);
        assert_eq!(bands.len(), 3);
        assert_eq!((bands[0].below_pct, bands[0].mid_pct, bands[0].high_pct), (100.0, 0.0, 0.0));
        assert_eq!((bands[1].below_pct, bands[1].mid_pct, bands[1].high_pct), (0.0, 100.0, 0.0));
        assert_eq!((bands[2].below_pct, bands[2].mid_pct, bands[2].high_pct), (0.0, 0.0, 100.0));
        // Band edges are inclusive of 0.25 and 1.
        let edges = dose_bands(&[0.25, 1.0, 1.0000001]);
        assert_eq!(edges[0].mid_pct, 100.0);
        assert_eq!(edges[1].mid_pct, 100.0);
        assert_eq!(edges[2].high_pct, 100.0);
    }

    #[test]
    fn thirds_match_the_published_grouping() {
        assert_eq!(thirds(933), [0..311, 311..622, 622..933]);
        assert_eq!(thirds(10), [0..3, 3..6, 6..10]);
        assert_eq!(thirds(2), [0..0, 0..1, 1..2]);
        assert_eq!(dose_bands(&[0.3, 2.0]).len(), 2);
    }

    #[test]
    fn durations_follow_open_order_and_delegate() {
        use EventKind::*;
        let ev = |t, k, id: &str| InteractionEvent::new(t, k, id);
        let events = vec![
            ev(0.0, OpenFile, "b"),
            ev(5.0, MouseDown, "b"),
            ev(7.0, Save, "b"),
            ev(8.0, OpenFile, "a"),
            ev(60.0, MouseDown, "a"),
            ev(63.0, Save, "a"),
        ];
        let rows = duration_series(&events, None, INACTIVITY_THRESHOLD).unwrap();
        let direct = durations(&events, &whole_log_period(&events), INACTIVITY_THRESHOLD);
        assert_eq!(rows.iter().map(|r| r.volume_id.as_str()).collect::<Vec<_>>(), ["b", "a"]);
        assert_eq!(rows[0].seconds, direct["b"]);
        assert_eq!(rows[1].seconds, direct["a"]);
        assert_eq!((rows[0].seconds, rows[1].seconds), (8.0, 3.0));
        assert_eq!(first_last_means(&rows, 1), Some((8.0, 3.0)));
        assert_eq!(first_last_means(&rows, 3), None);
    }

    #[test]
    fn csv_twin_holds_plotted_values() {
        let dir = tempfile::tempdir().unwrap();
        let rows: Vec<_> = (1..=30).map(|i| row(i, i as f64 / 30.0, Some(0.05 * i as f64))).collect();
        let dice = dice_series(&rows, DiceColumn::PredCorrected, 7).unwrap();
        let [c, s] = write_dice(dir.path(), "dice", &dice).unwrap();
        assert_eq!(read_csv::<DiceRow>(&c).unwrap(), dice);
        assert!(std::fs::read_to_string(s).unwrap().starts_with("<svg"));
        let dose = dose_series(&rows, 5.0).unwrap();
        let [c, _] = write_dose(dir.path(), "dose", &dose).unwrap();
        assert_eq!(read_csv::<DoseRow>(&c).unwrap(), dose);
        let bands = dose_bands(&dose.iter().map(|r| r.abs_diff).collect::<Vec<_>>());
        let [c, s] = write_dose_bands(dir.path(), "bands", &bands).unwrap();
        assert_eq!(read_csv::<DoseBandRow>(&c).unwrap(), bands);
        assert!(s.exists());
    }

    #[test]
    fn dose_without_values_is_an_error() {
        assert!(matches!(dose_series(&[row(1, 0.5, None)], 120.0), Err(Error::Empty(_))));
    }
}
