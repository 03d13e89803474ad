//! Blocking HTTP client for the API in [`super::http`].

use std::collections::HashMap;
use std::sync::Mutex;
use std::time::Duration;

use serde::de::DeserializeOwned;
use serde::Serialize;

use super::http::{AdvanceRequest, ErrorBody, EventsRequest, SegmentRequest, NIFTI_CONTENT_TYPE};
use super::{Service, SubmitAck};
use crate::annotation::{annotation_to_bytes, segmentation_from_bytes, Segmentation, SparseAnnotation};
use crate::interaction_log::InteractionEvent;
use crate::scheduler::{DatasetSplit, TrainerStatus};
use crate::volume_io::{volume_from_bytes, Geometry};
use crate::{BoundingBox, Error, Result, Volume};

const BODY_LIMIT: u64 = 1 << 30;

type HttpResponse = ureq::http::Response<ureq::Body>;

pub struct Client {
    base: String,
    agent: ureq::Agent,
    geometries: Mutex<HashMap<String, Geometry>>,
}

impl Client {
    /// `base` is e.g. `http://127.0.0.1:8000`.
    pub fn new(base: impl Into<String>) -> Self {
        let agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_connect(Some(Duration::from_secs(10)))
            .build()
            .into();
        Self {
            base: base.into().trim_end_matches('/').to_string(),
            agent,
            geometries: Mutex::new(HashMap::new()),
        }
    }

    pub fn base_url(&self) -> &str {
        &self.base
    }

    fn url(&self, path: &str) -> String {
        format!("{}{}", self.base, path)
    }

    fn check(&self, result: std::result::Result<HttpResponse, ureq::Error>) -> Result<HttpResponse> {
        let mut resp = result.map_err(|e| Error::Unreachable(format!("{}: {e}", self.base)))?;
        let status = resp.status().as_u16();
        if (200..300).contains(&status) {
            return Ok(resp);
        }
        let bytes = read_bytes(&mut resp)?;
        let body: Option<ErrorBody> = serde_json::from_slice(&bytes).ok();
        let message = body.as_ref().map_or_else(|| String::from_utf8_lossy(&bytes).into_owned(), |b| b.message.clone());
        Err(match (status, body.as_ref().map(|b| b.error.as_str())) {
            (503, Some("model_not_ready")) => Error::ModelNotReady,
            (404, Some("unknown_volume")) => Error::UnknownVolume(message),
            (409, Some("duplicate")) => Error::DuplicateId(message),
            (422, Some("invalid_annotation")) => Error::InvalidAnnotation(message),
            _ => Error::Rejected { status, message },
        })
    }

    fn get_bytes(&self, path: &str) -> Result<Vec<u8>> {
        let mut resp = self.check(self.agent.get(&self.url(path)).call())?;
        read_bytes(&mut resp)
    }

    fn get_json<T: DeserializeOwned>(&self, path: &str) -> Result<T> {
        parse(&self.get_bytes(path)?)
    }

    fn post_json<B: Serialize, T: DeserializeOwned>(&self, path: &str, body: &B) -> Result<T> {
        let mut resp = self.post_json_raw(path, body)?;
        parse(&read_bytes(&mut resp)?)
    }

    fn post_json_raw<B: Serialize>(&self, path: &str, body: &B) -> Result<HttpResponse> {
        let json = serde_json::to_vec(body).map_err(|e| Error::Malformed(e.to_string()))?;
        self.check(
            self.agent
                .post(&self.url(path))
                .header("content-type", "application/json")
                .send(&json[..]),
        )
    }

    fn post_empty<T: DeserializeOwned>(&self, path: &str) -> Result<T> {
        let mut resp = self.check(self.agent.post(&self.url(path)).send_empty())?;
        parse(&read_bytes(&mut resp)?)
    }

    pub fn split(&self) -> Result<DatasetSplit> {
        self.get_json("/split")
    }

    /// Download a volume with its raw intensities.
    pub fn volume(&self, id: &str) -> Result<Volume> {
        volume_from_bytes(id, &self.get_bytes(&format!("/volumes/{id}"))?)
    }

    /// Trigger ingestion of the server's watched folder.
    pub fn ingest(&self) -> Result<Vec<SubmitAck>> {
        self.post_empty("/ingest")
    }

    /// Wait until `/status` answers or `timeout` passes.
    pub fn wait_ready(&self, timeout: Duration) -> Result<TrainerStatus> {
        let start = std::time::Instant::now();
        loop {
            match self.status() {
                Ok(s) => return Ok(s),
                Err(Error::Unreachable(_)) if start.elapsed() < timeout => std::thread::sleep(Duration::from_millis(50)),
                Err(e) => return Err(e),
            }
        }
    }
}

fn read_bytes(resp: &mut HttpResponse) -> Result<Vec<u8>> {
    resp.body_mut()
        .with_config()
        .limit(BODY_LIMIT)
        .read_to_vec()
        .map_err(|e| Error::Unreachable(format!("reading response: {e}")))
}

fn parse<T: DeserializeOwned>(bytes: &[u8]) -> Result<T> {
    serde_json::from_slice(bytes).map_err(|e| Error::Malformed(format!("response body: {e}")))
}

impl Service for Client {
    fn status(&self) -> Result<TrainerStatus> {
        self.get_json("/status")
    }

    fn volume_ids(&self) -> Result<Vec<String>> {
        self.get_json("/volumes")
    }

    fn geometry(&self, volume_id: &str) -> Result<Geometry> {
        if let Some(g) = self.geometries.lock().unwrap_or_else(|p| p.into_inner()).get(volume_id) {
            return Ok(*g);
        }
        let g: Geometry = self.get_json(&format!("/volumes/{volume_id}/geometry"))?;
        self.geometries
            .lock()
            .unwrap_or_else(|p| p.into_inner())
            .insert(volume_id.to_string(), g);
        Ok(g)
    }

    fn submit_annotation(&self, ann: &SparseAnnotation) -> Result<SubmitAck> {
        let bytes = annotation_to_bytes(ann, &self.geometry(&ann.volume_id)?)?;
        let mut resp = self.check(
            self.agent
                .post(&self.url(&format!("/annotate/{}", ann.volume_id)))
                .header("content-type", NIFTI_CONTENT_TYPE)
                .send(&bytes[..]),
        )?;
        parse(&read_bytes(&mut resp)?)
    }

    fn request_segmentation(&self, volume_id: &str, bbox: &BoundingBox) -> Result<Segmentation> {
        let req = SegmentRequest {
            volume_id: volume_id.to_string(),
            bbox: *bbox,
        };
        let mut resp = self.post_json_raw("/segment", &req)?;
        segmentation_from_bytes(volume_id, &read_bytes(&mut resp)?)
    }

    fn start_training(&self) -> Result<TrainerStatus> {
        self.post_empty("/start")
    }

    fn stop_training(&self) -> Result<TrainerStatus> {
        self.post_empty("/stop")
    }

    fn advance(&self, epochs: u64) -> Result<TrainerStatus> {
        self.post_json("/advance", &AdvanceRequest { epochs })
    }

    fn record_events(&self, session: &str, events: &[InteractionEvent]) -> Result<()> {
        let req = EventsRequest {
            session: session.to_string(),
            events: events.to_vec(),
        };
        self.post_json_raw("/events", &req).map(drop)
    }
}
