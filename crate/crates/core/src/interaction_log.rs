//! Client interaction events and per-image annotation durations.
//!
//! A log is a text file with one `timestamp<TAB>kind<TAB>volume_id` line per
//! event. Timestamps are seconds and never decrease within a log.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Gaps of at least this many seconds count as inactivity.
pub const INACTIVITY_THRESHOLD: f64 = 20.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    OpenFile,
    Save,
    AxialSliceChange,
    SagittalSliceChange,
    ZoomChange,
    MouseDown,
    MouseRelease,
}

impl EventKind {
    pub const ALL: [EventKind; 7] = [
        EventKind::OpenFile,
        EventKind::Save,
        EventKind::AxialSliceChange,
        EventKind::SagittalSliceChange,
        EventKind::ZoomChange,
        EventKind::MouseDown,
        EventKind::MouseRelease,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            EventKind::OpenFile => "open_file",
            EventKind::Save => "save",
            EventKind::AxialSliceChange => "axial_slice_change",
            EventKind::SagittalSliceChange => "sagittal_slice_change",
            EventKind::ZoomChange => "zoom_change",
            EventKind::MouseDown => "mouse_down",
            EventKind::MouseRelease => "mouse_release",
        }
    }
}

impl fmt::Display for EventKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EventKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Malformed(format!("unknown event kind '{s}'")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InteractionEvent {
    pub timestamp: f64,
    pub kind: EventKind,
    pub volume_id: String,
}

impl InteractionEvent {
    pub fn new(timestamp: f64, kind: EventKind, volume_id: impl Into<String>) -> Self {
        Self {
            timestamp,
            kind,
            volume_id: volume_id.into(),
        }
    }

    fn to_line(&self) -> String {
        format!("{}\t{}\t{}\n", self.timestamp, self.kind, self.volume_id)
    }

    fn parse_line(line: &str) -> Result<Self> {
        let mut parts = line.splitn(3, '\t');
        let (Some(ts), Some(kind), Some(id)) = (parts.next(), parts.next(), parts.next()) else {
            return Err(Error::Malformed(format!("event line '{line}' needs three fields")));
        };
        let timestamp: f64 = ts
            .parse()
            .map_err(|_| Error::Malformed(format!("bad timestamp '{ts}'")))?;
        if !timestamp.is_finite() {
            return Err(Error::Malformed(format!("bad timestamp '{ts}'")));
        }
        Ok(Self::new(timestamp, kind.parse()?, id))
    }
}

/// An append-only event log file.
#[derive(Debug)]
pub struct EventLog {
    path: PathBuf,
    last: Option<f64>,
}

impl EventLog {
    /// Open or create a log, continuing after any events already in it.
    pub fn open(path: impl Into<PathBuf>) -> Result<Self> {
        let path = path.into();
        let last = match read_events(&path) {
            Ok(events) => events.last().map(|e| e.timestamp),
            Err(Error::NotFound(_)) => None,
            Err(e) => return Err(e),
        };
        Ok(Self { path, last })
    }

    /// The log for `session` under an events directory.
    pub fn for_session(events_dir: impl AsRef<Path>, session: &str) -> Result<Self> {
        if session.is_empty() || !session.chars().all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c)) || session.starts_with('.') {
            return Err(Error::Malformed(format!("invalid session name '{session}'")));
        }
        Self::open(events_dir.as_ref().join(format!("{session}.log")))
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Append an event and flush it to disk.
    pub fn record(&mut self, event: &InteractionEvent) -> Result<()> {
        if !event.timestamp.is_finite() {
            return Err(Error::Malformed(format!("timestamp {}", event.timestamp)));
        }
        if event.volume_id.contains(['\t', '\n']) {
            return Err(Error::Malformed("volume id contains a tab or newline".into()));
        }
        if let Some(last) = self.last {
            if event.timestamp < last {
                return Err(Error::OutOfOrder {
                    last,
                    found: event.timestamp,
                });
            }
        }
        if let Some(dir) = self.path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&self.path)
            .map_err(|e| Error::io(&self.path, e))?;
        f.write_all(event.to_line().as_bytes())
            .and_then(|_| f.sync_data())
            .map_err(|e| Error::io(&self.path, e))?;
        self.last = Some(event.timestamp);
        Ok(())
    }
}

pub fn read_events(path: impl AsRef<Path>) -> Result<Vec<InteractionEvent>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let events: Vec<InteractionEvent> = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(InteractionEvent::parse_line)
        .collect::<Result<_>>()?;
    for pair in events.windows(2) {
        if pair[1].timestamp < pair[0].timestamp {
            return Err(Error::OutOfOrder {
                last: pair[0].timestamp,
                found: pair[1].timestamp,
            });
        }
    }
    Ok(events)
}

/// An interval during which the annotator reported working.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnnotationPeriod {
    pub start: f64,
    pub stop: f64,
}

impl AnnotationPeriod {
    pub fn new(start: f64, stop: f64) -> Result<Self> {
        if !(start < stop) {
            return Err(Error::Malformed(format!("period [{start}, {stop}] is empty")));
        }
        Ok(Self { start, stop })
    }

    pub fn contains(&self, t: f64) -> bool {
        self.start <= t && t <= self.stop
    }
}

/// Read periods from a CSV with `start,stop` columns.
pub fn read_periods(path: impl AsRef<Path>) -> Result<Vec<AnnotationPeriod>> {
    let path = path.as_ref();
    let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::Malformed(format!("{}: {e}", path.display())))?;
    rdr.deserialize::<AnnotationPeriod>()
        .map(|r| {
            let p = r.map_err(|e| Error::Malformed(format!("{}: {e}", path.display())))?;
            AnnotationPeriod::new(p.start, p.stop)
        })
        .collect()
}

/// Seconds spent on each image.
///
/// Each period is processed on its own: events inside it are walked in
/// order, and the gap between consecutive events is credited to the file
/// opened most recently unless it is `threshold` seconds or longer. The gap
/// that ends at an `open_file` still belongs to the previous file. The open
/// file carries over into later periods, but no gap spans two periods.
pub fn durations(events: &[InteractionEvent], periods: &[AnnotationPeriod], threshold: f64) -> BTreeMap<String, f64> {
    let mut out = BTreeMap::new();
    let mut current: Option<&str> = None;
    for period in periods {
        let mut prev: Option<f64> = None;
        for e in events.iter().filter(|e| period.contains(e.timestamp)) {
            if let (Some(p), Some(file)) = (prev, current) {
                let gap = e.timestamp - p;
                if gap < threshold {
                    *out.entry(file.to_string()).or_insert(0.0) += gap;
                }
            }
            if e.kind == EventKind::OpenFile {
                current = Some(&e.volume_id);
                out.entry(e.volume_id.clone()).or_insert(0.0);
            }
            prev = Some(e.timestamp);
        }
    }
    out
}

/// A single period covering every event, for logs without period records.
pub fn whole_log_period(events: &[InteractionEvent]) -> Vec<AnnotationPeriod> {
    match (events.first(), events.last()) {
        (Some(a), Some(b)) if a.timestamp < b.timestamp => vec![AnnotationPeriod {
            start: a.timestamp,
            stop: b.timestamp,
        }],
        _ => Vec::new(),
    }
}
