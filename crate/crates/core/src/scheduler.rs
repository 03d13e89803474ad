//! Continuous training: split assignment, epoch sizing, model selection and
//! restarts.
//!
//! The scheduler owns no threads. [`crate::server`] drives it from its
//! trainer loop, and tests drive it directly.

use std::collections::VecDeque;
use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::annotation::{SparseAnnotation, LABEL_FG, LABEL_NONE};
use crate::unet3d::{
    init_params, predict_box, sample_patch, train_step, Checkpoint, InferenceOptions, ModelParameters, NetworkConfig,
    OptimizerConfig, Sgd, TrainingItem,
};
use crate::volume_io::nifti::atomic_write;
use crate::{Error, Result, Voxel};

/// Training images per validation image that must exist before another
/// image goes to validation.
pub const TRAIN_VAL_RATIO: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SchedulerConfig {
    pub restart_enabled: bool,
    pub restart_threshold: u32,
    pub epoch: EpochPolicy,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        Self {
            restart_enabled: true,
            restart_threshold: 60,
            epoch: EpochPolicy::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn dir_name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.dir_name())
    }
}

/// Annotated volume ids in arrival order, partitioned into train and val.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train_ids: Vec<String>,
    pub val_ids: Vec<String>,
}

impl DatasetSplit {
    /// Where the next arrival goes: the first image trains, the second
    /// validates, and later ones validate only while the training set is at
    /// least five times the validation set.
    pub fn next_split(&self) -> Split {
        let (t, v) = (self.train_ids.len(), self.val_ids.len());
        if t + v == 0 {
            Split::Train
        } else if v == 0 || t >= TRAIN_VAL_RATIO * v {
            Split::Val
        } else {
            Split::Train
        }
    }

    pub fn assign(&mut self, id: impl Into<String>) -> Result<Split> {
        let id = id.into();
        if self.split_of(&id).is_some() {
            return Err(Error::DuplicateId(id));
        }
        let split = self.next_split();
        match split {
            Split::Train => self.train_ids.push(id),
            Split::Val => self.val_ids.push(id),
        }
        Ok(split)
    }

    pub fn split_of(&self, id: &str) -> Option<Split> {
        if self.train_ids.iter().any(|t| t == id) {
            Some(Split::Train)
        } else if self.val_ids.iter().any(|v| v == id) {
            Some(Split::Val)
        } else {
            None
        }
    }

    pub fn len(&self) -> usize {
        self.train_ids.len() + self.val_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Epoch length as a function of validation patch count `v`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct EpochPolicy {
    pub base_no_val: usize,
    pub floor: usize,
    pub multiplier: usize,
}

impl Default for EpochPolicy {
    fn default() -> Self {
        Self {
            base_no_val: 128,
            floor: 64,
            multiplier: 2,
        }
    }
}

impl EpochPolicy {
    pub fn length(&self, v: usize) -> usize {
        if v == 0 {
            self.base_no_val
        } else {
            self.floor.max(self.multiplier * v)
        }
    }
}

/// Training samples per epoch with the default policy.
pub fn epoch_length(v: usize) -> usize {
    EpochPolicy::default().length(v)
}

/// Patch-sized tiles of the annotation's box that hold at least one
/// annotated voxel. The box is tiled without overlap from its min corner.
pub fn annotated_tiles(ann: &SparseAnnotation, patch: Voxel) -> usize {
    let extent = ann.bbox.extent();
    let tiles = [0, 1, 2].map(|a| extent[a].div_ceil(patch[a]));
    let mut hit = vec![false; tiles.iter().product()];
    for v in ann.fg.iter().chain(&ann.bg) {
        let l = ann.bbox.to_local(v);
        let t = [0, 1, 2].map(|a| l[a] / patch[a]);
        hit[(t[0] * tiles[1] + t[1]) * tiles[2] + t[2]] = true;
    }
    hit.into_iter().filter(|&h| h).count()
}

/// Annotated images ready for training, plus the validation patch count.
#[derive(Debug, Clone, Default)]
pub struct TrainingData {
    pub train: Vec<TrainingItem>,
    pub val: Vec<TrainingItem>,
    /// Patches containing annotation across the validation images.
    pub val_patches: usize,
}

impl TrainingData {
    pub fn push(&mut self, split: Split, item: TrainingItem, patch: Voxel) -> Result<()> {
        match split {
            Split::Train => self.train.push(item),
            Split::Val => {
                let ann = SparseAnnotation::from_labels(
                    item.volume.id.clone(),
                    &item.labels.mapv(i64::from),
                    Some(item.bbox),
                )?;
                self.val_patches += annotated_tiles(&ann, patch);
                self.val.push(item);
            }
        }
        Ok(())
    }
}

/// Draws training images without replacement: indices come from
/// consecutive random permutations of the image list.
#[derive(Debug, Clone)]
pub struct ImageSampler {
    rng: ChaCha8Rng,
    queue: VecDeque<usize>,
    n: usize,
}

impl ImageSampler {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            queue: VecDeque::new(),
            n: 0,
        }
    }

    pub fn next_index(&mut self, n: usize) -> usize {
        assert!(n > 0, "sampling from an empty image list");
        if n != self.n {
            self.queue.clear();
            self.n = n;
        }
        if self.queue.is_empty() {
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut self.rng);
            self.queue.extend(perm);
        }
        self.queue.pop_front().expect("queue refilled")
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }
}

/// Everything the trainer loop mutates.
#[derive(Debug, Clone)]
pub struct TrainerState {
    pub params: ModelParameters,
    pub optimizer: Sgd,
    pub epochs_without_progress: u32,
    pub best_checkpoint: Option<Arc<Checkpoint>>,
    pub restart_enabled: bool,
    pub restart_threshold: u32,
    pub running: bool,
    /// Completed epochs over the life of the session.
    pub epoch_index: u64,
    pub restarts: u32,
    pub sampler: ImageSampler,
    seed: u64,
}

impl TrainerState {
    pub fn new(net: &NetworkConfig, sched: &SchedulerConfig, opt: OptimizerConfig, seed: u64) -> Result<Self> {
        Ok(Self {
            params: init_params(net, seed)?,
            optimizer: Sgd::new(opt),
            epochs_without_progress: 0,
            best_checkpoint: None,
            restart_enabled: sched.restart_enabled,
            restart_threshold: sched.restart_threshold,
            running: false,
            epoch_index: 0,
            restarts: 0,
            sampler: ImageSampler::new(seed ^ 0x5eed_5a3b_1e00_0000),
            seed,
        })
    }

    pub fn best_val_dice(&self) -> Option<f64> {
        self.best_checkpoint.as_ref().map(|c| c.meta.val_dice)
    }

    /// Seed for the parameters drawn by the next restart.
    pub fn restart_seed(&self) -> u64 {
        self.seed.wrapping_add(u64::from(self.restarts) + 1)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochReport {
    pub epoch_index: u64,
    pub samples: usize,
    pub mean_loss: Option<f64>,
    pub skipped_steps: usize,
    pub val_dice: Option<f64>,
    /// A new best checkpoint was saved.
    pub improved: bool,
    pub checkpoint_path: Option<PathBuf>,
}

#[derive(Debug, Clone, Default)]
pub struct EpochOptions {
    /// Where new best checkpoints are written; `None` keeps them in memory.
    pub checkpoint_dir: Option<PathBuf>,
    pub inference: InferenceOptions,
    pub policy: EpochPolicy,
}

/// Train for one epoch, validate, and update model selection.
pub fn run_epoch(
    state: &mut TrainerState,
    data: &TrainingData,
    net: &NetworkConfig,
    opts: &EpochOptions,
) -> Result<EpochReport> {
    if data.train.is_empty() {
        return Err(Error::Empty("training set"));
    }
    let samples = opts.policy.length(data.val_patches);
    let mut losses = Vec::new();
    let mut skipped = 0;
    let mut drawn = 0;
    while drawn < samples {
        let take = net.batch_size.min(samples - drawn);
        let mut batch = Vec::with_capacity(take);
        for _ in 0..take {
            let item = &data.train[state.sampler.next_index(data.train.len())];
            batch.push(sample_patch(item, net.patch_dims, net.pad_value, state.sampler.rng())?);
        }
        drawn += take;
        match train_step(net, &mut state.params, &mut state.optimizer, &batch) {
            Ok(loss) => losses.push(loss),
            Err(Error::NonFiniteLoss(v)) => {
                log::warn!("skipping step with non-finite loss {v}");
                skipped += 1;
            }
            Err(e) => return Err(e),
        }
    }
    state.epoch_index += 1;
    let val_dice = validation_dice(net, &state.params, &data.val, &opts.inference)?;
    let mut improved = false;
    let mut checkpoint_path = None;
    if let Some(dice) = val_dice {
        if state.best_val_dice().is_none_or(|best| dice > best) {
            let ckpt = Checkpoint::new(net.clone(), state.params.clone(), state.epoch_index, dice)?;
            if let Some(dir) = &opts.checkpoint_dir {
                checkpoint_path = Some(ckpt.save(dir)?);
            }
            state.best_checkpoint = Some(Arc::new(ckpt));
            state.epochs_without_progress = 0;
            improved = true;
        } else {
            state.epochs_without_progress += 1;
        }
    }
    Ok(EpochReport {
        epoch_index: state.epoch_index,
        samples,
        mean_loss: (!losses.is_empty()).then(|| losses.iter().sum::<f64>() / losses.len() as f64),
        skipped_steps: skipped,
        val_dice,
        improved,
        checkpoint_path,
    })
}

/// New annotations arrived: progress counting starts over.
pub fn on_new_data(state: &mut TrainerState) {
    state.epochs_without_progress = 0;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RestartOutcome {
    Unchanged,
    /// Parameters were reinitialised; the best checkpoint is kept.
    Restarted,
    /// The threshold was reached with restarts disabled; training stops.
    Halted,
}

pub fn maybe_restart(state: &mut TrainerState, net: &NetworkConfig, seed: u64) -> Result<RestartOutcome> {
    if state.epochs_without_progress < state.restart_threshold {
        return Ok(RestartOutcome::Unchanged);
    }
    if !state.restart_enabled {
        state.running = false;
        return Ok(RestartOutcome::Halted);
    }
    state.params = init_params(net, seed)?;
    state.optimizer.reset();
    state.epochs_without_progress = 0;
    state.restarts += 1;
    Ok(RestartOutcome::Restarted)
}

/// Voxel counts behind a pooled dice score.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct DiceCounts {
    pub intersection: u64,
    pub predicted: u64,
    pub labelled: u64,
}

impl DiceCounts {
    pub fn dice(&self) -> f64 {
        let denom = self.predicted + self.labelled;
        if denom == 0 {
            1.0
        } else {
            2.0 * self.intersection as f64 / denom as f64
        }
    }
}

/// Counts over the annotated voxels of one image, given the thresholded
/// prediction over the annotation's box.
pub fn annotated_dice_counts(item: &TrainingItem, pred_in_box: &ndarray::Array3<bool>) -> DiceCounts {
    let mut c = DiceCounts::default();
    for v in item.annotated_voxels() {
        let label = item.labels[*v];
        debug_assert_ne!(label, LABEL_NONE);
        let p = pred_in_box[item.bbox.to_local(v)];
        let t = label == LABEL_FG;
        c.intersection += u64::from(p && t);
        c.predicted += u64::from(p);
        c.labelled += u64::from(t);
    }
    c
}

/// Dice of thresholded predictions against foreground labels, over the
/// annotated voxels of every validation image with counts pooled across
/// images. `None` for an empty validation set.
pub fn validation_dice(
    net: &NetworkConfig,
    params: &ModelParameters,
    val: &[TrainingItem],
    opts: &InferenceOptions,
) -> Result<Option<f64>> {
    if val.is_empty() {
        return Ok(None);
    }
    let mut total = DiceCounts::default();
    for item in val {
        let probs = predict_box(net, params, &item.volume, &item.bbox, opts)?;
        let c = annotated_dice_counts(item, &probs.mapv(|p| p > opts.threshold));
        total.intersection += c.intersection;
        total.predicted += c.predicted;
        total.labelled += c.labelled;
    }
    Ok(Some(total.dice()))
}

/// What the server reports and persists in `status.json`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainerStatus {
    pub running: bool,
    pub epoch_index: u64,
    pub epochs_without_progress: u32,
    pub best_val_dice: Option<f64>,
    pub best_epoch: Option<u64>,
    pub last_val_dice: Option<f64>,
    pub last_loss: Option<f64>,
    pub train_size: usize,
    pub val_size: usize,
    pub restarts: u32,
}

impl TrainerStatus {
    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let json = serde_json::to_vec_pretty(self).expect("status serialises");
        atomic_write(path.as_ref(), &json)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_slice(&bytes).map_err(|e| Error::Malformed(format!("{}: {e}", path.display())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::{BoundingBox, Volume};
    use ndarray::Array3;
    use proptest::prelude::*;

    #[test]
    fn epoch_length_table() {
        assert_eq!(epoch_length(0), 128);
        assert_eq!(epoch_length(10), 64);
        assert_eq!(epoch_length(32), 64);
        assert_eq!(epoch_length(33), 66);
        assert_eq!(epoch_length(100), 200);
    }

    #[test]
    fn first_eight_arrivals() {
        let mut split = DatasetSplit::default();
        let seq: String = (0..8)
            .map(|i| match split.assign(format!("img{i}")).unwrap() {
                Split::Train => 'T',
                Split::Val => 'V',
            })
            .collect();
        assert_eq!(seq, "TVTTTTVT");
        assert!(matches!(split.assign("img3"), Err(Error::DuplicateId(_))));
    }

    proptest! {
        #[test]
        fn split_sizes_stay_bounded(n in 1usize..400) {
            let mut split = DatasetSplit::default();
            for i in 0..n {
                split.assign(i.to_string()).unwrap();
                let (t, v) = (split.train_ids.len(), split.val_ids.len());
                prop_assert!(t >= v);
                prop_assert!(t < TRAIN_VAL_RATIO * v + TRAIN_VAL_RATIO);
                prop_assert!(t + 5 >= TRAIN_VAL_RATIO * v);
            }
        }
    }

    #[test]
    fn sampler_draws_each_image_once_per_pass() {
        let mut s = ImageSampler::new(4);
        for _ in 0..5 {
            let mut pass: Vec<usize> = (0..7).map(|_| s.next_index(7)).collect();
            pass.sort_unstable();
            assert_eq!(pass, (0..7).collect::<Vec<_>>());
        }
    }

    #[test]
    fn sampler_frequencies_are_uniform() {
        let mut s = ImageSampler::new(9);
        let mut counts = [0usize; 6];
        // 1000 draws do not divide into whole passes, which is fine.
        for _ in 0..1000 {
            counts[s.next_index(6)] += 1;
        }
        assert!(counts.iter().all(|&c| (166..=167).contains(&c)), "{counts:?}");
    }

    #[test]
    fn annotated_tile_count() {
        let bbox = BoundingBox::new([0, 0, 0], [19, 9, 9]).unwrap();
        let ann = SparseAnnotation::new("v", bbox, [[0, 0, 0], [9, 9, 9], [10, 0, 0]], [[19, 9, 9]]).unwrap();
        assert_eq!(annotated_tiles(&ann, [10, 10, 10]), 2);
        assert_eq!(annotated_tiles(&ann, [5, 5, 5]), 4);
        assert_eq!(annotated_tiles(&SparseAnnotation::empty("v", bbox), [4, 4, 4]), 0);
    }

    fn tiny() -> NetworkConfig {
        NetworkConfig {
            base_features: 2,
            levels: 2,
            downsample: vec![[2, 2, 2]],
            groupnorm_groups: 1,
            patch_dims: [4, 4, 4],
            batch_size: 2,
            ..NetworkConfig::default()
        }
    }

    fn state(restart_enabled: bool) -> TrainerState {
        let sched = SchedulerConfig {
            restart_enabled,
            ..SchedulerConfig::default()
        };
        TrainerState::new(&tiny(), &sched, OptimizerConfig::default(), 1).unwrap()
    }

    #[test]
    fn restart_fires_at_threshold_only_when_enabled() {
        let net = tiny();
        let mut s = state(true);
        s.best_checkpoint = Some(Arc::new(Checkpoint::new(net.clone(), s.params.clone(), 3, 0.7).unwrap()));
        s.epochs_without_progress = 59;
        let before = s.params.clone();
        assert_eq!(maybe_restart(&mut s, &net, 99).unwrap(), RestartOutcome::Unchanged);
        assert_eq!(s.params, before);
        s.epochs_without_progress = 60;
        assert_eq!(maybe_restart(&mut s, &net, 99).unwrap(), RestartOutcome::Restarted);
        assert_ne!(s.params, before);
        assert_eq!(s.params, init_params(&net, 99).unwrap());
        assert_eq!(s.epochs_without_progress, 0);
        assert_eq!(s.best_val_dice(), Some(0.7));

        let mut off = state(false);
        off.running = true;
        off.epochs_without_progress = 60;
        let before = off.params.clone();
        assert_eq!(maybe_restart(&mut off, &net, 99).unwrap(), RestartOutcome::Halted);
        assert!(!off.running);
        assert_eq!(off.params, before);
    }

    #[test]
    fn new_data_resets_counter() {
        let mut s = state(true);
        s.epochs_without_progress = 59;
        on_new_data(&mut s);
        assert_eq!(s.epochs_without_progress, 0);
        on_new_data(&mut s);
        assert_eq!(s.epochs_without_progress, 0);
        assert_eq!(maybe_restart(&mut s, &tiny(), 1).unwrap(), RestartOutcome::Unchanged);
    }

    fn item(id: &str, seed: f32) -> TrainingItem {
        let grid = Array3::from_shape_fn((8, 8, 8), |(x, y, z)| if x < 4 { 80.0 + seed } else { -60.0 + (y + z) as f32 });
        let vol = Arc::new(Volume::new(id, grid, [1.0; 3]).unwrap());
        let ann = SparseAnnotation::new(id, vol.full_box(), [[1, 1, 1], [2, 5, 3]], [[6, 2, 2], [7, 7, 7]]).unwrap();
        TrainingItem::new(vol, &ann).unwrap()
    }

    #[test]
    fn selection_and_counter_rules() {
        let net = tiny();
        let mut data = TrainingData::default();
        data.push(Split::Train, item("a", 0.0), net.patch_dims).unwrap();
        let opts = EpochOptions::default();
        let mut s = state(true);
        // No validation images: no score, no selection.
        let r = run_epoch(&mut s, &data, &net, &opts).unwrap();
        assert_eq!((r.samples, r.val_dice, r.improved), (128, None, false));
        assert!(s.best_checkpoint.is_none());

        data.push(Split::Val, item("b", 5.0), net.patch_dims).unwrap();
        assert_eq!(data.val_patches, 4);
        let r = run_epoch(&mut s, &data, &net, &opts).unwrap();
        assert_eq!(r.samples, 64);
        assert!(r.improved, "first scored epoch always saves");
        assert_eq!(s.best_val_dice(), r.val_dice);
        assert_eq!(s.best_checkpoint.as_ref().unwrap().meta.epoch_index, 2);

        // With a zero learning rate the score repeats exactly: a tie.
        s.optimizer = Sgd::new(OptimizerConfig {
            learning_rate: 0.0,
            ..OptimizerConfig::default()
        });
        for k in 1..=5 {
            let r = run_epoch(&mut s, &data, &net, &opts).unwrap();
            assert!(!r.improved);
            assert_eq!(s.epochs_without_progress, k);
        }
        // Forcing the stored best below the current score makes the next
        // epoch a strict improvement.
        let mut lowered = (**s.best_checkpoint.as_ref().unwrap()).clone();
        lowered.meta.val_dice = -1.0;
        s.best_checkpoint = Some(Arc::new(lowered));
        let r = run_epoch(&mut s, &data, &net, &opts).unwrap();
        assert!(r.improved);
        assert_eq!(s.epochs_without_progress, 0);
    }

    #[test]
    fn empty_training_set_is_an_error() {
        let mut s = state(true);
        let r = run_epoch(&mut s, &TrainingData::default(), &tiny(), &EpochOptions::default());
        assert!(matches!(r, Err(Error::Empty(_))));
    }

    #[test]
    fn status_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("status.json");
        let st = TrainerStatus {
            running: true,
            epoch_index: 4,
            best_val_dice: Some(0.5),
            train_size: 3,
            ..TrainerStatus::default()
        };
        st.write(&path).unwrap();
        assert_eq!(TrainerStatus::read(&path).unwrap(), st);
    }
}
