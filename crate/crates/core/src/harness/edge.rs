//! Edge-side inference and the device's view of the link to it.

use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{BackendError, BackendRequest, ModelBackend, Role};
use crate::calibration::{CalibrationError, TemperatureModel};
use crate::config::NetworkModel;
use crate::token_ops::{unpack, TokenOpsError};
use crate::types::{validate_options, Action, TypeError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Up,
    Down,
}

/// One-way delay of a payload: half the round trip plus serialization at
/// the direction's bandwidth.
pub fn simulate_network(payload_bytes: usize, direction: Direction, model: &NetworkModel) -> f64 {
    let mbps = match direction {
        Direction::Up => model.up_mbps,
        Direction::Down => model.down_mbps,
    };
    model.rtt_ms / 2.0 + 8.0 * payload_bytes as f64 / (mbps * 1e6) * 1e3
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OffloadRequest {
    pub query_id: u64,
    pub question: String,
    pub options: Vec<char>,
    pub density: u32,
    pub n_frames: u32,
    /// `TBT1` token payload.
    pub payload: Vec<u8>,
}

impl OffloadRequest {
    /// Bytes on the uplink, counting the fixed framing fields.
    pub fn approx_wire_bytes(&self) -> usize {
        self.payload.len() + self.question.len() + self.options.len() + 32
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OffloadResponse {
    pub query_id: u64,
    pub answer: char,
    pub kappa: f64,
    /// Large-model compute time.
    pub edge_ms: f64,
    /// Wall time the server spent on the request.
    pub server_ms: f64,
}

#[derive(Debug, Error)]
pub enum EdgeError {
    #[error(transparent)]
    Payload(#[from] TokenOpsError),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Calibration(#[from] CalibrationError),
    #[error("bad request: {0}")]
    BadRequest(String),
}

impl EdgeError {
    /// Stable numeric code carried by wire error messages.
    pub fn code(&self) -> u16 {
        match self {
            EdgeError::Payload(TokenOpsError::CorruptPayload(_)) => 1,
            EdgeError::Payload(_) => 2,
            EdgeError::Backend(BackendError::MissingRecord { .. }) => 3,
            EdgeError::Backend(_) => 4,
            EdgeError::Calibration(_) => 5,
            EdgeError::BadRequest(_) => 6,
        }
    }
}

impl From<TypeError> for EdgeError {
    fn from(e: TypeError) -> Self {
        EdgeError::BadRequest(e.to_string())
    }
}

/// Large model plus its temperature; answers offloaded token payloads.
#[derive(Clone)]
pub struct EdgeService {
    pub backend: Arc<dyn ModelBackend>,
    pub temperature: TemperatureModel,
}

impl EdgeService {
    pub fn new(backend: Arc<dyn ModelBackend>, temperature: TemperatureModel) -> Self {
        Self {
            backend,
            temperature,
        }
    }

    pub fn handle(&self, req: &OffloadRequest) -> Result<OffloadResponse, EdgeError> {
        let t0 = Instant::now();
        validate_options(&req.options)?;
        let tokens = unpack(&req.payload)?;
        if tokens.tokens_per_frame != req.density as usize || tokens.frames != req.n_frames as usize
        {
            return Err(EdgeError::BadRequest(format!(
                "payload is {}x{} but the request declares {} frames at density {}",
                tokens.frames, tokens.tokens_per_frame, req.n_frames, req.density
            )));
        }
        let resp = self.backend.answer(&BackendRequest {
            query_id: req.query_id,
            question: &req.question,
            options: &req.options,
            role: Role::Large,
            density: Some(Action::new(req.density)),
            tokens: &tokens,
        })?;
        if resp.logits.len() != req.options.len() {
            return Err(EdgeError::BadRequest(format!(
                "backend returned {} logits for {} options",
                resp.logits.len(),
                req.options.len()
            )));
        }
        let dist = self.temperature.apply(&resp.logits)?;
        Ok(OffloadResponse {
            query_id: req.query_id,
            answer: req.options[dist.argmax()],
            kappa: dist.confidence,
            edge_ms: resp.compute_ms,
            server_ms: t0.elapsed().as_secs_f64() * 1e3,
        })
    }
}

#[derive(Debug, Error)]
pub enum LinkError {
    #[error("offload timed out after {0:.1} s")]
    Timeout(f64),
    #[error("edge error {code}: {message}")]
    Remote { code: u16, message: String },
    #[error("transport: {0}")]
    Transport(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinkReply {
    pub response: OffloadResponse,
    /// Time attributed to the network in both directions.
    pub network_ms: f64,
    /// Real time spent inside `offload`.
    pub wall_ms: f64,
}

/// The device's connection to an edge node.
pub trait EdgeLink {
    fn offload(&mut self, req: &OffloadRequest) -> Result<LinkReply, LinkError>;
}

/// In-process edge with the analytic network model.
pub struct SimulatedLink {
    pub service: EdgeService,
    pub network: NetworkModel,
    pub response_bytes: usize,
}

impl EdgeLink for SimulatedLink {
    fn offload(&mut self, req: &OffloadRequest) -> Result<LinkReply, LinkError> {
        let t0 = Instant::now();
        let response = self.service.handle(req).map_err(|e| LinkError::Remote {
            code: e.code(),
            message: e.to_string(),
        })?;
        let network_ms = simulate_network(req.approx_wire_bytes(), Direction::Up, &self.network)
            + simulate_network(self.response_bytes, Direction::Down, &self.network);
        Ok(LinkReply {
            response,
            network_ms,
            wall_ms: t0.elapsed().as_secs_f64() * 1e3,
        })
    }
}
