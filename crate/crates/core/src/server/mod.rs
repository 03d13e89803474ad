//! The training service.
//!
//! [`Server`] owns the data directory, a trainer thread and the published
//! best checkpoint. [`http`] exposes it over HTTP and [`client`] talks to
//! that front end; both sides implement [`Service`], which is all the
//! simulator needs.
//!
//! Directory layout under the root:
//!
//! ```text
//! data/volumes/<id>.nii.gz      registered images
//! annotations/train/<id>.nii.gz
//! annotations/val/<id>.nii.gz
//! annotations/arrivals.log      split decisions in arrival order
//! annotations/incoming/         watched folder (optional ingestion path)
//! checkpoints/epoch_*_dice_*.ckpt
//! events/<session>.log
//! status.json
//! ```

pub mod client;
pub mod http;

use std::collections::{BTreeMap, HashMap};
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Condvar, Mutex, MutexGuard, RwLock};
use std::thread::JoinHandle;

use serde::{Deserialize, Serialize};

use crate::annotation::{load_annotation, save_annotation, violations_error, Segmentation, SparseAnnotation};
use crate::interaction_log::{EventLog, InteractionEvent};
use crate::scheduler::{
    maybe_restart, on_new_data, run_epoch, DatasetSplit, EpochOptions, RestartOutcome, SchedulerConfig, Split,
    TrainerState, TrainerStatus, TrainingData,
};
use crate::unet3d::checkpoint::{best_checkpoint, list_checkpoints};
use crate::unet3d::{segment, Checkpoint, InferenceOptions, NetworkConfig, OptimizerConfig, TrainingItem};
use crate::volume_io::{load_volume, volume_id_from_path, Geometry};
use crate::{BoundingBox, Error, Result, Volume, Voxel};

/// The operations an annotator needs, in process or over the network.
pub trait Service {
    fn status(&self) -> Result<TrainerStatus>;
    fn volume_ids(&self) -> Result<Vec<String>>;
    fn geometry(&self, volume_id: &str) -> Result<Geometry>;
    fn submit_annotation(&self, ann: &SparseAnnotation) -> Result<SubmitAck>;
    fn request_segmentation(&self, volume_id: &str, bbox: &BoundingBox) -> Result<Segmentation>;
    fn start_training(&self) -> Result<TrainerStatus>;
    fn stop_training(&self) -> Result<TrainerStatus>;
    /// Block until `epochs` more epochs have completed or training stops.
    /// In lockstep pacing this is also what allows those epochs to run.
    fn advance(&self, epochs: u64) -> Result<TrainerStatus>;
    fn record_events(&self, session: &str, events: &[InteractionEvent]) -> Result<()>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubmitAck {
    pub volume_id: String,
    pub split: Split,
    pub train_size: usize,
    pub val_size: usize,
    /// Epochs completed when the annotation was accepted.
    pub epoch_index: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pacing {
    /// Train continuously.
    Free,
    /// Run only the epochs granted through [`Service::advance`], which makes
    /// a simulated session reproducible.
    Lockstep,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ServerConfig {
    pub root: PathBuf,
    pub network: NetworkConfig,
    pub optimizer: OptimizerConfig,
    pub scheduler: SchedulerConfig,
    pub seed: u64,
    pub pacing: Pacing,
    /// Sliding-window step; half a patch when absent.
    pub inference_stride: Option<Voxel>,
    pub threshold: f32,
    /// Continue training at startup when annotations already exist.
    pub resume_training: bool,
}

impl Default for ServerConfig {
    fn default() -> Self {
        Self {
            root: PathBuf::from("."),
            network: NetworkConfig::default(),
            optimizer: OptimizerConfig::default(),
            scheduler: SchedulerConfig::default(),
            seed: 0,
            pacing: Pacing::Free,
            inference_stride: None,
            threshold: 0.5,
            resume_training: true,
        }
    }
}

impl ServerConfig {
    pub fn inference(&self) -> InferenceOptions {
        InferenceOptions {
            stride: self.inference_stride,
            threshold: self.threshold,
        }
    }
}

/// Paths under the server root.
#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
    pub volumes: PathBuf,
    pub train: PathBuf,
    pub val: PathBuf,
    pub incoming: PathBuf,
    pub arrivals: PathBuf,
    pub checkpoints: PathBuf,
    pub events: PathBuf,
    pub status: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        let root = root.into();
        Self {
            volumes: root.join("data").join("volumes"),
            train: root.join("annotations").join("train"),
            val: root.join("annotations").join("val"),
            incoming: root.join("annotations").join("incoming"),
            arrivals: root.join("annotations").join("arrivals.log"),
            checkpoints: root.join("checkpoints"),
            events: root.join("events"),
            status: root.join("status.json"),
            root,
        }
    }

    pub fn split_dir(&self, split: Split) -> &Path {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
        }
    }

    pub fn annotation_path(&self, split: Split, id: &str) -> PathBuf {
        self.split_dir(split).join(format!("{id}.nii.gz"))
    }

    fn create(&self) -> Result<()> {
        for d in [&self.volumes, &self.train, &self.val, &self.incoming, &self.checkpoints, &self.events] {
            fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
        }
        Ok(())
    }
}

/// Read the arrival log: one `id<TAB>split` line per accepted annotation.
pub fn read_arrivals(path: &Path) -> Result<DatasetSplit> {
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(DatasetSplit::default()),
        Err(e) => return Err(Error::io(path, e)),
    };
    let mut split = DatasetSplit::default();
    for line in text.lines().filter(|l| !l.is_empty()) {
        let (id, which) = line
            .split_once('\t')
            .ok_or_else(|| Error::Malformed(format!("arrival line '{line}'")))?;
        if split.split_of(id).is_some() {
            return Err(Error::DuplicateId(id.to_string()));
        }
        match which {
            "train" => split.train_ids.push(id.to_string()),
            "val" => split.val_ids.push(id.to_string()),
            other => return Err(Error::Malformed(format!("unknown split '{other}'"))),
        }
    }
    Ok(split)
}

#[derive(Debug, Default)]
struct Shared {
    split: DatasetSplit,
    pending: Vec<(Split, SparseAnnotation)>,
    status: TrainerStatus,
    stop_requested: bool,
    trainer_alive: bool,
    epoch_budget: u64,
    last_error: Option<String>,
}

struct Core {
    state: TrainerState,
    data: TrainingData,
}

struct Inner {
    cfg: ServerConfig,
    layout: Layout,
    shared: Mutex<Shared>,
    changed: Condvar,
    core: Mutex<Core>,
    published: RwLock<Option<Arc<Checkpoint>>>,
    volume_index: Mutex<BTreeMap<String, PathBuf>>,
    volume_cache: Mutex<HashMap<String, Arc<Volume>>>,
    /// Serialises submissions end to end.
    submit_lock: Mutex<()>,
    event_logs: Mutex<HashMap<String, EventLog>>,
    trainer: Mutex<Option<JoinHandle<()>>>,
}

/// A cheaply cloneable handle to a running service.
#[derive(Clone)]
pub struct Server {
    inner: Arc<Inner>,
}

fn lock<T>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|p| p.into_inner())
}

impl Server {
    /// Open a server over `cfg.root`, recovering any previous session found
    /// there: the split from the arrival log, annotations from the split
    /// directories, and the best checkpoint.
    pub fn open(cfg: ServerConfig) -> Result<Self> {
        cfg.network.validate()?;
        if !cfg.root.is_dir() {
            return Err(Error::NotFound(cfg.root.clone()));
        }
        let layout = Layout::new(&cfg.root);
        layout.create()?;
        let split = read_arrivals(&layout.arrivals)?;
        let best = best_checkpoint(&layout.checkpoints)?;
        if let Some(b) = &best {
            if b.config != cfg.network {
                return Err(Error::Config(format!(
                    "checkpoints in {} were trained with a different network config",
                    layout.checkpoints.display()
                )));
            }
        }
        let mut state = TrainerState::new(&cfg.network, &cfg.scheduler, cfg.optimizer.clone(), cfg.seed)?;
        let previous = TrainerStatus::read(&layout.status).ok();
        let last_ckpt_epoch = list_checkpoints(&layout.checkpoints)?
            .last()
            .map_or(0, |(_, m)| m.epoch_index);
        state.epoch_index = previous.as_ref().map_or(0, |s| s.epoch_index).max(last_ckpt_epoch);
        state.restarts = previous.as_ref().map_or(0, |s| s.restarts);
        if let Some(b) = &best {
            state.params = b.parameters.clone();
        }
        let best = best.map(Arc::new);
        state.best_checkpoint = best.clone();

        let server = Self {
            inner: Arc::new(Inner {
                shared: Mutex::new(Shared::default()),
                changed: Condvar::new(),
                core: Mutex::new(Core {
                    state,
                    data: TrainingData::default(),
                }),
                published: RwLock::new(best),
                volume_index: Mutex::new(BTreeMap::new()),
                volume_cache: Mutex::new(HashMap::new()),
                submit_lock: Mutex::new(()),
                event_logs: Mutex::new(HashMap::new()),
                trainer: Mutex::new(None),
                layout,
                cfg,
            }),
        };
        server.rescan_volumes()?;
        {
            let mut core = lock(&server.inner.core);
            for (ids, which) in [(&split.train_ids, Split::Train), (&split.val_ids, Split::Val)] {
                for id in ids {
                    let ann = load_annotation(server.inner.layout.annotation_path(which, id))?;
                    let item = TrainingItem::new(server.volume(id)?, &ann)?;
                    core.data.push(which, item, server.inner.cfg.network.patch_dims)?;
                }
            }
            let mut sh = lock(&server.inner.shared);
            sh.split = split;
            sh.status = server.snapshot_status(&core.state, &sh.split, false);
            sh.status.last_val_dice = previous.as_ref().and_then(|p| p.last_val_dice);
            sh.status.last_loss = previous.as_ref().and_then(|p| p.last_loss);
            sh.epoch_budget = core.state.epoch_index;
            sh.status.write(&server.inner.layout.status)?;
        }
        let has_train = !lock(&server.inner.shared).split.train_ids.is_empty();
        if has_train && server.inner.cfg.resume_training {
            server.ensure_trainer();
        }
        Ok(server)
    }

    pub fn config(&self) -> &ServerConfig {
        &self.inner.cfg
    }

    pub fn layout(&self) -> &Layout {
        &self.inner.layout
    }

    pub fn split(&self) -> DatasetSplit {
        lock(&self.inner.shared).split.clone()
    }

    pub fn best_checkpoint(&self) -> Option<Arc<Checkpoint>> {
        self.inner.published.read().unwrap_or_else(|p| p.into_inner()).clone()
    }

    pub fn last_error(&self) -> Option<String> {
        lock(&self.inner.shared).last_error.clone()
    }

    /// Re-index the volume directory.
    pub fn rescan_volumes(&self) -> Result<usize> {
        let dir = &self.inner.layout.volumes;
        let mut index = BTreeMap::new();
        for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
            let path = entry.map_err(|e| Error::io(dir, e))?.path();
            let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
            if name.ends_with(".nii.gz") || name.ends_with(".nii") {
                index.insert(volume_id_from_path(&path), path);
            }
        }
        let n = index.len();
        *lock(&self.inner.volume_index) = index;
        Ok(n)
    }

    /// Copy a volume into the data directory and index it.
    pub fn register_volume(&self, volume: &Volume) -> Result<()> {
        let path = self.inner.layout.volumes.join(format!("{}.nii.gz", volume.id));
        crate::volume_io::save_volume(volume, &path)?;
        lock(&self.inner.volume_index).insert(volume.id.clone(), path);
        lock(&self.inner.volume_cache).remove(&volume.id);
        Ok(())
    }

    pub fn volume(&self, id: &str) -> Result<Arc<Volume>> {
        if let Some(v) = lock(&self.inner.volume_cache).get(id) {
            return Ok(v.clone());
        }
        let mut path = lock(&self.inner.volume_index).get(id).cloned();
        if path.is_none() {
            self.rescan_volumes()?;
            path = lock(&self.inner.volume_index).get(id).cloned();
        }
        let path = path.ok_or_else(|| Error::UnknownVolume(id.to_string()))?;
        let mut vol = load_volume(&path)?;
        vol.id = id.to_string();
        let vol = Arc::new(vol);
        lock(&self.inner.volume_cache).insert(id.to_string(), vol.clone());
        Ok(vol)
    }

    fn snapshot_status(&self, state: &TrainerState, split: &DatasetSplit, running: bool) -> TrainerStatus {
        let best = state.best_checkpoint.as_ref();
        TrainerStatus {
            running,
            epoch_index: state.epoch_index,
            epochs_without_progress: state.epochs_without_progress,
            best_val_dice: best.map(|c| c.meta.val_dice),
            best_epoch: best.map(|c| c.meta.epoch_index),
            last_val_dice: None,
            last_loss: None,
            train_size: split.train_ids.len(),
            val_size: split.val_ids.len(),
            restarts: state.restarts,
        }
    }

    fn ensure_trainer(&self) {
        let mut slot = lock(&self.inner.trainer);
        {
            let mut sh = lock(&self.inner.shared);
            if sh.trainer_alive {
                return;
            }
            sh.trainer_alive = true;
            sh.stop_requested = false;
            sh.status.running = true;
            sh.last_error = None;
        }
        if let Some(old) = slot.take() {
            let _ = old.join();
        }
        let me = self.clone();
        *slot = Some(
            std::thread::Builder::new()
                .name("trainer".into())
                .spawn(move || me.trainer_loop())
                .expect("spawn trainer thread"),
        );
    }

    fn trainer_loop(&self) {
        let inner = &self.inner;
        let lockstep = inner.cfg.pacing == Pacing::Lockstep;
        let finish = |error: Option<String>| {
            let mut sh = lock(&inner.shared);
            sh.trainer_alive = false;
            sh.status.running = false;
            if let Some(e) = error {
                log::error!("training stopped: {e}");
                sh.last_error = Some(e);
            }
            if let Err(e) = sh.status.write(&inner.layout.status) {
                log::error!("writing status: {e}");
            }
            inner.changed.notify_all();
        };
        loop {
            let new_data = {
                let mut sh = lock(&inner.shared);
                loop {
                    if sh.stop_requested {
                        break;
                    }
                    if lockstep && sh.status.epoch_index >= sh.epoch_budget {
                        sh = inner.changed.wait(sh).unwrap_or_else(|p| p.into_inner());
                        continue;
                    }
                    break;
                }
                if sh.stop_requested {
                    drop(sh);
                    return finish(None);
                }
                std::mem::take(&mut sh.pending)
            };
            let mut core = lock(&inner.core);
            let Core { state, data } = &mut *core;
            if !new_data.is_empty() {
                for (which, ann) in new_data {
                    let item = match self.volume(&ann.volume_id).and_then(|v| TrainingItem::new(v, &ann)) {
                        Ok(item) => item,
                        Err(e) => return finish(Some(e.to_string())),
                    };
                    if let Err(e) = data.push(which, item, inner.cfg.network.patch_dims) {
                        return finish(Some(e.to_string()));
                    }
                }
                on_new_data(state);
            }
            let opts = EpochOptions {
                checkpoint_dir: Some(inner.layout.checkpoints.clone()),
                inference: inner.cfg.inference(),
                policy: inner.cfg.scheduler.epoch,
            };
            let report = match run_epoch(state, data, &inner.cfg.network, &opts) {
                Ok(r) => r,
                Err(e) => return finish(Some(e.to_string())),
            };
            if report.improved {
                *inner.published.write().unwrap_or_else(|p| p.into_inner()) = state.best_checkpoint.clone();
            }
            let seed = state.restart_seed();
            let outcome = match maybe_restart(state, &inner.cfg.network, seed) {
                Ok(o) => o,
                Err(e) => return finish(Some(e.to_string())),
            };
            if outcome == RestartOutcome::Restarted {
                log::info!("restarting from fresh parameters after epoch {}", state.epoch_index);
            }
            log::debug!(
                "epoch {}: loss {:?}, val dice {:?}, stale {}",
                report.epoch_index,
                report.mean_loss,
                report.val_dice,
                state.epochs_without_progress
            );
            let halted = outcome == RestartOutcome::Halted;
            {
                let mut sh = lock(&inner.shared);
                let mut status = self.snapshot_status(state, &sh.split, !halted);
                status.last_val_dice = report.val_dice.or(sh.status.last_val_dice);
                status.last_loss = report.mean_loss;
                sh.status = status;
                if let Err(e) = sh.status.write(&inner.layout.status) {
                    log::error!("writing status: {e}");
                }
                inner.changed.notify_all();
            }
            drop(core);
            if halted {
                log::info!("no progress for {} epochs; training halted", inner.cfg.scheduler.restart_threshold);
                return finish(None);
            }
        }
    }

    fn persist_submission(&self, ann: &SparseAnnotation, volume: &Volume) -> Result<SubmitAck> {
        let inner = &self.inner;
        let which = {
            let sh = lock(&inner.shared);
            if sh.split.split_of(&ann.volume_id).is_some() {
                return Err(Error::DuplicateId(ann.volume_id.clone()));
            }
            sh.split.next_split()
        };
        save_annotation(ann, volume, inner.layout.annotation_path(which, &ann.volume_id))?;
        let arrivals = &inner.layout.arrivals;
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(arrivals)
            .map_err(|e| Error::io(arrivals, e))?;
        f.write_all(format!("{}\t{}\n", ann.volume_id, which).as_bytes())
            .and_then(|_| f.sync_data())
            .map_err(|e| Error::io(arrivals, e))?;
        let mut sh = lock(&inner.shared);
        let assigned = sh.split.assign(ann.volume_id.clone())?;
        debug_assert_eq!(assigned, which);
        sh.pending.push((which, ann.clone()));
        sh.status.train_size = sh.split.train_ids.len();
        sh.status.val_size = sh.split.val_ids.len();
        inner.changed.notify_all();
        Ok(SubmitAck {
            volume_id: ann.volume_id.clone(),
            split: which,
            train_size: sh.status.train_size,
            val_size: sh.status.val_size,
            epoch_index: sh.status.epoch_index,
        })
    }

    /// Submit every annotation file waiting in the incoming folder, in name
    /// order, removing each once accepted. Rejected files stay in place.
    pub fn ingest_incoming(&self) -> Result<Vec<SubmitAck>> {
        let dir = &self.inner.layout.incoming;
        let mut paths: Vec<PathBuf> = fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.to_str().is_some_and(|s| s.ends_with(".nii.gz") || s.ends_with(".nii")))
            .collect();
        paths.sort();
        let mut acks = Vec::new();
        for path in paths {
            match load_annotation(&path).and_then(|ann| self.submit_annotation(&ann)) {
                Ok(ack) => {
                    fs::remove_file(&path).map_err(|e| Error::io(&path, e))?;
                    acks.push(ack);
                }
                Err(e) => log::warn!("not ingesting {}: {e}", path.display()),
            }
        }
        Ok(acks)
    }

    /// Poll the incoming folder every `interval` on a background thread.
    pub fn watch_incoming(&self, interval: std::time::Duration) -> JoinHandle<()> {
        let me = self.clone();
        std::thread::spawn(move || loop {
            if let Err(e) = me.ingest_incoming() {
                log::warn!("incoming folder: {e}");
            }
            std::thread::sleep(interval);
        })
    }

    /// Stop training and wait for the trainer thread to exit.
    pub fn shutdown(&self) -> Result<TrainerStatus> {
        self.stop_training()
    }
}

impl Service for Server {
    fn status(&self) -> Result<TrainerStatus> {
        Ok(lock(&self.inner.shared).status.clone())
    }

    fn volume_ids(&self) -> Result<Vec<String>> {
        self.rescan_volumes()?;
        Ok(lock(&self.inner.volume_index).keys().cloned().collect())
    }

    fn geometry(&self, volume_id: &str) -> Result<Geometry> {
        Ok(self.volume(volume_id)?.geometry())
    }

    fn submit_annotation(&self, ann: &SparseAnnotation) -> Result<SubmitAck> {
        ann.validate().map_err(violations_error)?;
        let _serial = lock(&self.inner.submit_lock);
        let volume = self.volume(&ann.volume_id)?;
        ann.bbox.check_fits(volume.dims())?;
        let ack = self.persist_submission(ann, &volume)?;
        self.ensure_trainer();
        Ok(ack)
    }

    fn request_segmentation(&self, volume_id: &str, bbox: &BoundingBox) -> Result<Segmentation> {
        let volume = self.volume(volume_id)?;
        bbox.check_fits(volume.dims())?;
        let ckpt = self.best_checkpoint().ok_or(Error::ModelNotReady)?;
        segment(&ckpt.config, &ckpt.parameters, &volume, bbox, &self.inner.cfg.inference())
    }

    fn start_training(&self) -> Result<TrainerStatus> {
        if lock(&self.inner.shared).split.train_ids.is_empty() {
            return Err(Error::Empty("training set"));
        }
        self.ensure_trainer();
        self.status()
    }

    fn stop_training(&self) -> Result<TrainerStatus> {
        {
            let mut sh = lock(&self.inner.shared);
            sh.stop_requested = true;
            self.inner.changed.notify_all();
        }
        if let Some(handle) = lock(&self.inner.trainer).take() {
            let _ = handle.join();
        }
        self.status()
    }

    fn advance(&self, epochs: u64) -> Result<TrainerStatus> {
        let mut sh = lock(&self.inner.shared);
        let target = sh.status.epoch_index + epochs;
        if self.inner.cfg.pacing == Pacing::Lockstep {
            sh.epoch_budget = sh.epoch_budget.max(target);
            self.inner.changed.notify_all();
        }
        while sh.trainer_alive && sh.status.epoch_index < target {
            sh = self.inner.changed.wait(sh).unwrap_or_else(|p| p.into_inner());
        }
        if let Some(e) = &sh.last_error {
            return Err(Error::Config(format!("trainer failed: {e}")));
        }
        Ok(sh.status.clone())
    }

    fn record_events(&self, session: &str, events: &[InteractionEvent]) -> Result<()> {
        let mut logs = lock(&self.inner.event_logs);
        let log = match logs.entry(session.to_string()) {
            std::collections::hash_map::Entry::Occupied(o) => o.into_mut(),
            std::collections::hash_map::Entry::Vacant(v) => v.insert(EventLog::for_session(&self.inner.layout.events, session)?),
        };
        events.iter().try_for_each(|e| log.record(e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::annotation::LABEL_FG;
    use ndarray::Array3;

    fn tiny() -> NetworkConfig {
        NetworkConfig {
            base_features: 2,
            levels: 2,
            downsample: vec![[2, 2, 2]],
            groupnorm_groups: 1,
            patch_dims: [8, 8, 8],
            batch_size: 2,
            ..NetworkConfig::default()
        }
    }

    fn setup(pacing: Pacing) -> (tempfile::TempDir, Server) {
        let dir = tempfile::tempdir().unwrap();
        let server = Server::open(ServerConfig {
            root: dir.path().to_path_buf(),
            network: tiny(),
            pacing,
            scheduler: SchedulerConfig {
                epoch: crate::scheduler::EpochPolicy {
                    base_no_val: 4,
                    floor: 4,
                    multiplier: 1,
                },
                ..SchedulerConfig::default()
            },
            ..ServerConfig::default()
        })
        .unwrap();
        for i in 0..4 {
            let grid = Array3::from_shape_fn((12, 12, 10), |(x, y, z)| ((x + y + z + i) % 5) as f32 * 30.0);
            server
                .register_volume(&Volume::new(format!("img{i}"), grid, [1.0; 3]).unwrap())
                .unwrap();
        }
        (dir, server)
    }

    fn ann(id: &str) -> SparseAnnotation {
        let bbox = BoundingBox::new([1, 1, 1], [9, 9, 8]).unwrap();
        SparseAnnotation::new(id, bbox, [[2, 2, 2], [3, 2, 2]], [[8, 8, 7]]).unwrap()
    }

    #[test]
    fn fresh_server_status_and_not_ready() {
        let (_d, server) = setup(Pacing::Lockstep);
        let st = server.status().unwrap();
        assert!(!st.running);
        assert_eq!(st.best_val_dice, None);
        assert_eq!((st.train_size, st.val_size), (0, 0));
        let bbox = BoundingBox::new([0, 0, 0], [3, 3, 3]).unwrap();
        assert!(matches!(server.request_segmentation("img0", &bbox), Err(Error::ModelNotReady)));
        assert!(matches!(
            server.request_segmentation("nope", &bbox),
            Err(Error::UnknownVolume(_))
        ));
        // Stopping an idle server is a no-op.
        assert!(!server.stop_training().unwrap().running);
    }

    #[test]
    fn submissions_split_train_and_start_training() {
        let (d, server) = setup(Pacing::Lockstep);
        let a = server.submit_annotation(&ann("img0")).unwrap();
        assert_eq!(a.split, Split::Train);
        let st = server.status().unwrap();
        assert!(st.running);
        assert_eq!(st.train_size, 1);
        assert!(d.path().join("annotations/train/img0.nii.gz").exists());
        let b = server.submit_annotation(&ann("img1")).unwrap();
        assert_eq!(b.split, Split::Val);
        assert!(d.path().join("annotations/val/img1.nii.gz").exists());
        assert!(matches!(server.submit_annotation(&ann("img1")), Err(Error::DuplicateId(_))));
        let mut bad = ann("img2");
        bad.bg.insert([2, 2, 2]);
        assert!(matches!(server.submit_annotation(&bad), Err(Error::InvalidAnnotation(m)) if m.contains("[2, 2, 2]")));
        assert!(matches!(server.submit_annotation(&ann("ghost")), Err(Error::UnknownVolume(_))));

        let st = server.advance(2).unwrap();
        assert_eq!(st.epoch_index, 2);
        assert!(st.best_val_dice.is_some());
        let bbox = BoundingBox::new([2, 2, 2], [9, 10, 6]).unwrap();
        let s1 = server.request_segmentation("img3", &bbox).unwrap();
        let s2 = server.request_segmentation("img3", &bbox).unwrap();
        assert_eq!(s1, s2);
        assert_eq!(s1.mask.dim(), (8, 9, 5));
        let st = server.stop_training().unwrap();
        assert!(!st.running);
        assert_eq!(st.epoch_index, 2, "lockstep runs only granted epochs");
    }

    #[test]
    fn restart_recovers_split_and_best() {
        let (d, server) = setup(Pacing::Lockstep);
        for i in 0..3 {
            server.submit_annotation(&ann(&format!("img{i}"))).unwrap();
        }
        server.advance(3).unwrap();
        let before = server.stop_training().unwrap();
        let split = server.split();
        let best = server.best_checkpoint().unwrap();
        drop(server);
        let again = Server::open(ServerConfig {
            root: d.path().to_path_buf(),
            network: tiny(),
            pacing: Pacing::Lockstep,
            ..ServerConfig::default()
        })
        .unwrap();
        assert_eq!(again.split(), split);
        assert_eq!(*again.best_checkpoint().unwrap(), *best);
        let st = again.status().unwrap();
        assert_eq!(st.best_val_dice, before.best_val_dice);
        assert_eq!(st.epoch_index, before.epoch_index);
        assert_eq!((st.train_size, st.val_size), (2, 1));
        again.stop_training().unwrap();
    }

    #[test]
    fn incoming_folder_is_ingested() {
        let (d, server) = setup(Pacing::Lockstep);
        let vol = server.volume("img2").unwrap();
        let path = d.path().join("annotations/incoming/img2.nii.gz");
        save_annotation(&ann("img2"), &vol, &path).unwrap();
        let acks = server.ingest_incoming().unwrap();
        assert_eq!(acks.len(), 1);
        assert!(!path.exists());
        let stored = load_annotation(d.path().join("annotations/train/img2.nii.gz")).unwrap();
        assert_eq!(stored.fg.len(), 2);
        assert_eq!(stored.to_labels(vol.dims()).unwrap()[[2, 2, 2]], LABEL_FG);
        server.stop_training().unwrap();
    }

    #[test]
    fn events_are_logged_per_session() {
        let (d, server) = setup(Pacing::Free);
        let e = InteractionEvent::new(1.0, crate::interaction_log::EventKind::OpenFile, "img0");
        server.record_events("s1", std::slice::from_ref(&e)).unwrap();
        let read = crate::interaction_log::read_events(d.path().join("events/s1.log")).unwrap();
        assert_eq!(read, vec![e]);
        assert!(server.record_events("s1", &[InteractionEvent::new(0.5, crate::interaction_log::EventKind::Save, "img0")]).is_err());
    }

    #[test]
    fn missing_root_is_an_error() {
        let cfg = ServerConfig {
            root: PathBuf::from("/definitely/not/here"),
            ..ServerConfig::default()
        };
        assert!(Server::open(cfg).is_err());
    }
}
