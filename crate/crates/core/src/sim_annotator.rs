//! Synthetic volumes and a deterministic oracle annotator.
//!
//! The oracle plays the annotator's part in the loop: it asks the service for
//! a prediction, corrects it against ground truth, submits the correction and
//! waits for training to move on.

use std::collections::VecDeque;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::Array3;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::annotation::{merge_corrected, Segmentation, SparseAnnotation};
use crate::interaction_log::{EventKind, InteractionEvent};
use crate::metrics::{dice, dose_abs_diff, DoseMatrix};
use crate::server::Service;
use crate::volume_io::{crop_mask, load_mask, load_volume, save_mask, save_volume, volume_id_from_path};
use crate::{BoundingBox, Error, Mask, Result, Volume, Voxel};

/// One synthetic image with its ground truth and a dose field.
#[derive(Debug, Clone)]
pub struct SyntheticCase {
    pub volume: Volume,
    pub truth: Mask,
    pub dose: DoseMatrix,
    /// Semi-axes of the organ ellipsoid in voxels, when generated here.
    pub radii: Option<[f64; 3]>,
}

impl SyntheticCase {
    pub fn truth_box(&self) -> BoundingBox {
        BoundingBox::of_mask(&self.truth).expect("ground truth is non-empty")
    }
}

/// Volume intensities in HU.
const BACKGROUND_HU: f64 = -50.0;
const ORGAN_HU: (f64, f64) = (60.0, 100.0);
const DISTRACTOR_HU: (f64, f64) = (300.0, 500.0);
const NOISE_SIGMA: f64 = 20.0;

/// `n` volumes of shape `dims`, each holding one ellipsoidal organ plus a few
/// bright spheres, with Gaussian noise. Ids are `synth_000`, `synth_001`, ...
pub fn make_synthetic_dataset(n: usize, dims: Voxel, seed: u64) -> Result<Vec<SyntheticCase>> {
    if n == 0 {
        return Err(Error::Empty("synthetic dataset size"));
    }
    if dims.iter().any(|&d| d < 16) {
        return Err(Error::Config(format!("synthetic dims {dims:?} must be at least 16 per axis")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, NOISE_SIGMA).expect("valid sigma");
    let ext = dims.map(|d| d as f64);
    (0..n)
        .map(|i| {
            let radii = [0, 1, 2].map(|a| rng.random_range(0.14..0.24) * ext[a]);
            let center = [0, 1, 2].map(|a| rng.random_range(radii[a] + 2.0..ext[a] - radii[a] - 2.0));
            let organ_hu = rng.random_range(ORGAN_HU.0..ORGAN_HU.1);
            let spheres: Vec<([f64; 3], f64, f64)> = (0..rng.random_range(1..=3))
                .map(|_| {
                    let r = rng.random_range(0.05..0.09) * ext[0];
                    let c = [0, 1, 2].map(|a| rng.random_range(r..ext[a] - r));
                    (c, r, rng.random_range(DISTRACTOR_HU.0..DISTRACTOR_HU.1))
                })
                .collect();
            let target = [0, 1, 2].map(|a| rng.random_range(0.2..0.8) * ext[a]);
            let inside = |p: [f64; 3]| (0..3).map(|a| ((p[a] - center[a]) / radii[a]).powi(2)).sum::<f64>() <= 1.0;
            let mut grid = Array3::<f32>::zeros((dims[0], dims[1], dims[2]));
            let mut truth = Mask::from_elem((dims[0], dims[1], dims[2]), false);
            let mut dose = Array3::<f32>::zeros((dims[0], dims[1], dims[2]));
            for ((x, y, z), v) in grid.indexed_iter_mut() {
                let p = [x as f64, y as f64, z as f64];
                let mut hu = BACKGROUND_HU;
                if inside(p) {
                    hu = organ_hu;
                    truth[[x, y, z]] = true;
                } else if let Some(s) = spheres.iter().find(|(c, r, _)| dist2(p, *c) <= r * r) {
                    hu = s.2;
                }
                *v = (hu + noise.sample(&mut rng)) as f32;
                let d2 = dist2(p, target) / (0.25 * ext[0]).powi(2);
                dose[[x, y, z]] = (60.0 * (-0.5 * d2).exp()) as f32;
            }
            let id = format!("synth_{i:03}");
            Ok(SyntheticCase {
                volume: Volume::new(id.clone(), grid, [1.0; 3])?,
                truth,
                dose: DoseMatrix::new(id, dose)?,
                radii: Some(radii),
            })
        })
        .collect()
}

fn dist2(a: [f64; 3], b: [f64; 3]) -> f64 {
    (0..3).map(|i| (a[i] - b[i]).powi(2)).sum()
}

/// Where a dataset lives on disk. Every directory holds one
/// `<id>.nii.gz` per case.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetDirs {
    pub volumes: PathBuf,
    pub truth: PathBuf,
    pub dose: PathBuf,
}

impl DatasetDirs {
    /// `data/volumes`, `truth` and `dose` under `root`, so a dataset root
    /// can double as a server root.
    pub fn under(root: impl AsRef<Path>) -> Self {
        let root = root.as_ref();
        Self {
            volumes: root.join("data").join("volumes"),
            truth: root.join("truth"),
            dose: root.join("dose"),
        }
    }
}

pub fn save_dataset(cases: &[SyntheticCase], dirs: &DatasetDirs) -> Result<()> {
    for dir in [&dirs.volumes, &dirs.truth, &dirs.dose] {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    for c in cases {
        let name = format!("{}.nii.gz", c.volume.id);
        save_volume(&c.volume, dirs.volumes.join(&name))?;
        save_mask(&c.truth, &c.volume, dirs.truth.join(&name))?;
        let mut dose = c.volume.clone();
        dose.grid = c.dose.grid.clone();
        save_volume(&dose, dirs.dose.join(&name))?;
    }
    Ok(())
}

/// Load every case that has a ground-truth file, in id order.
pub fn load_dataset(dirs: &DatasetDirs) -> Result<Vec<SyntheticCase>> {
    let mut ids: Vec<String> = std::fs::read_dir(&dirs.truth)
        .map_err(|e| Error::io(&dirs.truth, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.to_str().is_some_and(|s| s.ends_with(".nii.gz")))
        .map(|p| volume_id_from_path(&p))
        .collect();
    ids.sort();
    if ids.is_empty() {
        return Err(Error::Empty("dataset"));
    }
    ids.into_iter()
        .map(|id| {
            let name = format!("{id}.nii.gz");
            let mut volume = load_volume(dirs.volumes.join(&name))?;
            volume.id = id.clone();
            let truth = load_mask(dirs.truth.join(&name))?;
            let dose = DoseMatrix::new(id, load_volume(dirs.dose.join(&name))?.grid)?;
            if truth.dim() != volume.grid.dim() || dose.grid.dim() != volume.grid.dim() {
                return Err(Error::ShapeMismatch {
                    expected: volume.grid.shape().to_vec(),
                    found: truth.shape().to_vec(),
                });
            }
            Ok(SyntheticCase {
                volume,
                truth,
                dose,
                radii: None,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ComponentPolicy {
    /// Annotate whole 6-connected error regions, biggest first.
    LargestComponentsFirst,
    /// Annotate error voxels drawn uniformly at random.
    Uniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OracleConfig {
    /// Share of error voxels annotated per image, in (0, 1].
    pub correction_fraction: f64,
    pub component_policy: ComponentPolicy,
    /// Annotate the whole box from ground truth while no model is ready.
    pub dense_bootstrap: bool,
    pub seed: u64,
    /// Ground-truth box dilation in voxels.
    pub box_margin: usize,
    /// Scheduler epochs to wait after each submission.
    pub epochs_per_image: u64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            correction_fraction: 1.0,
            component_policy: ComponentPolicy::LargestComponentsFirst,
            dense_bootstrap: true,
            seed: 0,
            box_margin: 8,
            epochs_per_image: 2,
        }
    }
}

impl OracleConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.correction_fraction > 0.0 && self.correction_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "correction_fraction {} outside (0, 1]",
                self.correction_fraction
            )));
        }
        Ok(())
    }
}

fn id_seed(seed: u64, id: &str) -> u64 {
    // FNV-1a, so per-image streams do not depend on visiting order.
    id.bytes()
        .fold(0xcbf2_9ce4_8422_2325u64 ^ seed, |h, b| (h ^ u64::from(b)).wrapping_mul(0x100_0000_01b3))
}

/// 6-connected components of `mask`, each in breadth-first order from its
/// first voxel in scan order.
pub fn components(mask: &Mask) -> Vec<Vec<Voxel>> {
    let (w, h, d) = mask.dim();
    let mut seen = Mask::from_elem((w, h, d), false);
    let mut out = Vec::new();
    for (start, &on) in mask.indexed_iter() {
        let start = [start.0, start.1, start.2];
        if !on || seen[start] {
            continue;
        }
        seen[start] = true;
        let mut comp = Vec::new();
        let mut queue = VecDeque::from([start]);
        while let Some(v) = queue.pop_front() {
            comp.push(v);
            for a in 0..3 {
                for up in [false, true] {
                    let mut n = v;
                    if up {
                        n[a] += 1;
                        if n[a] >= [w, h, d][a] {
                            continue;
                        }
                    } else if n[a] == 0 {
                        continue;
                    } else {
                        n[a] -= 1;
                    }
                    if mask[n] && !seen[n] {
                        seen[n] = true;
                        queue.push_back(n);
                    }
                }
            }
        }
        out.push(comp);
    }
    out
}

/// Corrections for a prediction: false negatives become foreground strokes,
/// false positives background strokes.
///
/// `truth` covers the whole volume. At most `correction_fraction` of the
/// error voxels are annotated, and always at least one when there is any
/// error.
pub fn correct(pred: &Segmentation, truth: &Mask, cfg: &OracleConfig) -> Result<SparseAnnotation> {
    cfg.validate()?;
    let local_truth = crop_mask(truth, &pred.bbox)?;
    let missed = ndarray::Zip::from(&local_truth).and(&pred.mask).map_collect(|&t, &p| t && !p);
    let extra = ndarray::Zip::from(&local_truth).and(&pred.mask).map_collect(|&t, &p| p && !t);
    let errors = missed.iter().filter(|&&v| v).count() + extra.iter().filter(|&&v| v).count();
    if errors == 0 {
        return Ok(SparseAnnotation::empty(pred.volume_id.clone(), pred.bbox));
    }
    let budget = ((cfg.correction_fraction * errors as f64).floor() as usize).clamp(1, errors);
    // (is foreground, voxels)
    let mut chosen: Vec<(bool, Voxel)> = Vec::with_capacity(budget);
    match cfg.component_policy {
        ComponentPolicy::LargestComponentsFirst => {
            let mut comps: Vec<(bool, Vec<Voxel>)> = components(&missed)
                .into_iter()
                .map(|c| (true, c))
                .chain(components(&extra).into_iter().map(|c| (false, c)))
                .collect();
            // Stable sort keeps scan order among equal sizes.
            comps.sort_by(|a, b| b.1.len().cmp(&a.1.len()));
            'outer: for (fg, comp) in comps {
                for v in comp {
                    if chosen.len() == budget {
                        break 'outer;
                    }
                    chosen.push((fg, v));
                }
            }
        }
        ComponentPolicy::Uniform => {
            let mut all: Vec<(bool, Voxel)> = missed
                .indexed_iter()
                .filter(|(_, &on)| on)
                .map(|((x, y, z), _)| (true, [x, y, z]))
                .chain(extra.indexed_iter().filter(|(_, &on)| on).map(|((x, y, z), _)| (false, [x, y, z])))
                .collect();
            let mut rng = ChaCha8Rng::seed_from_u64(id_seed(cfg.seed, &pred.volume_id));
            all.shuffle(&mut rng);
            all.truncate(budget);
            chosen = all;
        }
    }
    let to_global = |v: &Voxel| pred.bbox.to_global(v);
    SparseAnnotation::new(
        pred.volume_id.clone(),
        pred.bbox,
        chosen.iter().filter(|(fg, _)| *fg).map(|(_, v)| to_global(v)),
        chosen.iter().filter(|(fg, _)| !*fg).map(|(_, v)| to_global(v)),
    )
}

/// Full ground truth inside `bbox`: every box voxel is annotated.
pub fn dense_annotation(volume_id: &str, truth: &Mask, bbox: &BoundingBox) -> Result<SparseAnnotation> {
    let local = crop_mask(truth, bbox)?;
    let fg = local.indexed_iter().filter(|(_, &t)| t).map(|((x, y, z), _)| bbox.to_global(&[x, y, z]));
    let bg = local.indexed_iter().filter(|(_, &t)| !t).map(|((x, y, z), _)| bbox.to_global(&[x, y, z]));
    SparseAnnotation::new(volume_id, *bbox, fg.collect::<Vec<_>>(), bg.collect::<Vec<_>>())
}

/// One row of the session report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionRow {
    /// 1-based position in annotation order.
    pub index: usize,
    pub volume_id: String,
    pub split: String,
    pub bootstrap: bool,
    pub dice_pred_corrected: f64,
    pub dice_corrected_truth: f64,
    pub annotated_voxels: usize,
    pub fg_voxels: usize,
    pub bg_voxels: usize,
    pub predicted_voxels: usize,
    pub dose_abs_diff: Option<f64>,
    /// Scheduler epochs completed when the image was submitted.
    pub epoch_at_submit: u64,
    pub best_val_dice: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingRow {
    pub index: usize,
    pub volume_id: String,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SessionReport {
    pub rows: Vec<SessionRow>,
    pub timings: Vec<TimingRow>,
    /// Simulated client events, as sent to the service.
    pub events: Vec<InteractionEvent>,
}

impl SessionReport {
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        write_rows(path.as_ref(), &self.rows)
    }

    pub fn write_timings_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        write_rows(path.as_ref(), &self.timings)
    }

    pub fn mean_over(&self, rows: std::ops::Range<usize>, f: impl Fn(&SessionRow) -> f64) -> f64 {
        let rows = &self.rows[rows];
        rows.iter().map(f).sum::<f64>() / rows.len() as f64
    }
}

pub fn read_report(path: impl AsRef<Path>) -> Result<Vec<SessionRow>> {
    let path = path.as_ref();
    let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::Malformed(format!("{}: {e}", path.display())))?;
    rdr.deserialize()
        .map(|r| r.map_err(|e| Error::Malformed(format!("{}: {e}", path.display()))))
        .collect()
}

fn write_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Malformed(format!("{}: {e}", path.display())))?;
    for r in rows {
        w.serialize(r).map_err(|e| Error::Malformed(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Simulated client activity for one image on a clock that advances with
/// the amount of correction work: a stroke per started 40 voxels.
fn simulated_events(clock: &mut f64, volume_id: &str, annotated: usize) -> Vec<InteractionEvent> {
    let mut out = vec![InteractionEvent::new(*clock, EventKind::OpenFile, volume_id)];
    let mut at = |dt: f64, kind: EventKind, out: &mut Vec<InteractionEvent>| {
        *clock += dt;
        out.push(InteractionEvent::new(*clock, kind, volume_id));
    };
    at(3.0, EventKind::AxialSliceChange, &mut out);
    for _ in 0..annotated.div_ceil(40) {
        at(1.0, EventKind::MouseDown, &mut out);
        at(2.0, EventKind::MouseRelease, &mut out);
        at(1.0, EventKind::AxialSliceChange, &mut out);
    }
    at(2.0, EventKind::Save, &mut out);
    *clock += 1.0;
    out
}

/// Drive one annotation session over `cases` in order.
pub fn run_session(cases: &[SyntheticCase], service: &dyn Service, cfg: &OracleConfig, session: &str) -> Result<SessionReport> {
    cfg.validate()?;
    let mut report = SessionReport::default();
    let mut clock = 0.0;
    for (i, case) in cases.iter().enumerate() {
        let started = Instant::now();
        let id = &case.volume.id;
        let bbox = case.truth_box().dilate(cfg.box_margin, case.volume.dims());
        let (pred, ann, bootstrap) = match service.request_segmentation(id, &bbox) {
            Ok(pred) => {
                let ann = correct(&pred, &case.truth, cfg)?;
                (pred, ann, false)
            }
            Err(Error::ModelNotReady) => {
                let pred = Segmentation::empty(id.clone(), bbox);
                let ann = if cfg.dense_bootstrap {
                    dense_annotation(id, &case.truth, &bbox)?
                } else {
                    correct(&pred, &case.truth, cfg)?
                };
                (pred, ann, true)
            }
            Err(e) => return Err(e),
        };
        let corrected = merge_corrected(&pred, &ann)?;
        let extent = case.volume.dims();
        let pred_full = pred.to_full(extent)?;
        let corrected_full = Segmentation::new(id.clone(), bbox, corrected.clone(), pred.threshold_used)?.to_full(extent)?;
        let dose_diff = match (pred_full.iter().any(|&v| v), corrected_full.iter().any(|&v| v)) {
            (true, true) => Some(dose_abs_diff(&case.dose, &pred_full, &corrected_full)?),
            _ => None,
        };
        let events = simulated_events(&mut clock, id, ann.annotated_count());
        service.record_events(session, &events)?;
        report.events.extend(events);
        let ack = service.submit_annotation(&ann)?;
        let status = service.advance(cfg.epochs_per_image)?;
        report.rows.push(SessionRow {
            index: i + 1,
            volume_id: id.clone(),
            split: ack.split.to_string(),
            bootstrap,
            dice_pred_corrected: dice(&pred.mask, &corrected)?,
            dice_corrected_truth: dice(&corrected_full, &case.truth)?,
            annotated_voxels: ann.annotated_count(),
            fg_voxels: ann.fg.len(),
            bg_voxels: ann.bg.len(),
            predicted_voxels: pred.mask.iter().filter(|&&v| v).count(),
            dose_abs_diff: dose_diff,
            epoch_at_submit: ack.epoch_index,
            best_val_dice: status.best_val_dice,
        });
        report.timings.push(TimingRow {
            index: i + 1,
            volume_id: id.clone(),
            seconds: started.elapsed().as_secs_f64(),
        });
        log::info!(
            "image {} {id}: dice(pred, corrected) {:.4}, {} voxels annotated",
            i + 1,
            report.rows.last().unwrap().dice_pred_corrected,
            ann.annotated_count()
        );
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn dataset_is_deterministic_and_sane() {
        let a = make_synthetic_dataset(3, [32, 32, 24], 5).unwrap();
        let b = make_synthetic_dataset(3, [32, 32, 24], 5).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.volume, y.volume);
            assert_eq!(x.truth, y.truth);
            assert_eq!(x.dose, y.dose);
        }
        for c in &a {
            let n = c.truth.iter().filter(|&&v| v).count() as f64;
            assert!(n > 0.0);
            let analytic = 4.0 / 3.0 * std::f64::consts::PI * c.radii.unwrap().iter().product::<f64>();
            assert!((n - analytic).abs() / analytic < 0.10, "{n} vs {analytic}");
        }
        assert!(make_synthetic_dataset(1, [15, 32, 32], 0).is_err());
        let dir = tempfile::tempdir().unwrap();
        let dirs = DatasetDirs::under(dir.path());
        save_dataset(&a, &dirs).unwrap();
        let back = load_dataset(&dirs).unwrap();
        assert_eq!(back.len(), 3);
        for (x, y) in a.iter().zip(&back) {
            assert_eq!(x.volume.grid, y.volume.grid);
            assert_eq!(x.volume.id, y.volume.id);
            assert_eq!(x.truth, y.truth);
            assert_eq!(x.dose, y.dose);
        }
        assert!(make_synthetic_dataset(0, [32, 32, 32], 0).is_err());
    }

    fn fixture() -> (Mask, Segmentation) {
        let mut truth = Mask::from_elem((12, 12, 12), false);
        let mut pred = Mask::from_elem((12, 12, 12), false);
        for x in 2..8 {
            for y in 2..8 {
                for z in 2..8 {
                    truth[[x, y, z]] = true;
                }
            }
        }
        for x in 3..10 {
            for y in 2..8 {
                for z in 2..6 {
                    pred[[x, y, z]] = true;
                }
            }
        }
        let bbox = BoundingBox::full([12, 12, 12]);
        (truth, Segmentation::new("v", bbox, pred, 0.5).unwrap())
    }

    #[test]
    fn correction_cases() {
        let (truth, pred) = fixture();
        let cfg = OracleConfig::default();
        let perfect = Segmentation::new("v", pred.bbox, truth.clone(), 0.5).unwrap();
        assert!(correct(&perfect, &truth, &cfg).unwrap().is_empty());
        let empty = Segmentation::empty("v", pred.bbox);
        let ann = correct(&empty, &truth, &cfg).unwrap();
        assert!(ann.bg.is_empty());
        assert_eq!(ann.fg.len(), truth.iter().filter(|&&v| v).count());
        let full = correct(&pred, &truth, &cfg).unwrap();
        assert_eq!(merge_corrected(&pred, &full).unwrap(), truth);
    }

    #[test]
    fn half_fraction_on_hundred_errors() {
        // 100 false negatives in one row of voxels.
        let mut truth = Mask::from_elem((100, 2, 2), false);
        for x in 0..100 {
            truth[[x, 0, 0]] = true;
        }
        let pred = Segmentation::empty("v", BoundingBox::full([100, 2, 2]));
        for policy in [ComponentPolicy::LargestComponentsFirst, ComponentPolicy::Uniform] {
            let cfg = OracleConfig {
                correction_fraction: 0.5,
                component_policy: policy,
                ..OracleConfig::default()
            };
            let ann = correct(&pred, &truth, &cfg).unwrap();
            assert!(ann.annotated_count() <= 50 && ann.annotated_count() > 0);
            assert!(ann.fg.iter().all(|v| truth[*v]));
        }
    }

    #[test]
    fn components_are_six_connected() {
        let mut m = Mask::from_elem((4, 4, 4), false);
        m[[0, 0, 0]] = true;
        m[[1, 1, 0]] = true; // diagonal only: separate
        m[[1, 0, 0]] = true; // joins both
        m[[3, 3, 3]] = true;
        let c = components(&m);
        assert_eq!(c.len(), 2);
        assert_eq!(c[0].len(), 3);
    }

    fn arb_pair() -> impl Strategy<Value = (Mask, Mask, f64, bool)> {
        (
            proptest::collection::vec(any::<bool>(), 6 * 5 * 4),
            proptest::collection::vec(any::<bool>(), 6 * 5 * 4),
            0.01f64..=1.0,
            any::<bool>(),
        )
            .prop_map(|(t, p, f, uniform)| {
                (
                    Mask::from_shape_vec((6, 5, 4), t).unwrap(),
                    Mask::from_shape_vec((6, 5, 4), p).unwrap(),
                    f,
                    uniform,
                )
            })
    }

    fn sym_diff(a: &Mask, b: &Mask) -> usize {
        a.iter().zip(b.iter()).filter(|(x, y)| x != y).count()
    }

    proptest! {
        #[test]
        fn oracle_only_marks_errors((truth, pred_mask, f, uniform) in arb_pair()) {
            let pred = Segmentation::new("v", BoundingBox::full([6, 5, 4]), pred_mask.clone(), 0.5).unwrap();
            let cfg = OracleConfig {
                correction_fraction: f,
                component_policy: if uniform { ComponentPolicy::Uniform } else { ComponentPolicy::LargestComponentsFirst },
                ..OracleConfig::default()
            };
            let ann = correct(&pred, &truth, &cfg).unwrap();
            for v in &ann.fg { prop_assert!(truth[*v] && !pred_mask[*v]); }
            for v in &ann.bg { prop_assert!(!truth[*v] && pred_mask[*v]); }
            let errors = sym_diff(&truth, &pred_mask);
            prop_assert!(ann.annotated_count() as f64 <= (f * errors as f64).floor().max(1.0));
            let merged = merge_corrected(&pred, &ann).unwrap();
            if errors > 0 {
                prop_assert!(sym_diff(&merged, &truth) < errors);
            }
            let full = correct(&pred, &truth, &OracleConfig::default()).unwrap();
            prop_assert_eq!(merge_corrected(&pred, &full).unwrap(), truth);
        }
    }
}
