//! Stand-ins for the small (device) and large (edge) models.
//!
//! Both backends share one vision encoder: the device tokenizes sampled
//! frames once and the edge model consumes merged copies of those tokens.

mod synthetic;
mod trace;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use synthetic::{
    AgreementCoupling, DensityResponse, QueryLatents, SyntheticBackend, SyntheticProfile,
    VideoModel,
};
pub use trace::{
    read_trace, read_trace_file, validate_trace, write_trace, write_trace_file, TraceBackend,
    TraceHeader, TraceRecord, TraceSummary, TRACE_SCHEMA, TRACE_VERSION,
};

use crate::types::{Action, LogitVector, Query, TokenTensor, TypeError, VideoMetadata};

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("no trace record for query {qid} ({role:?}, density {density:?})")]
    MissingRecord {
        qid: u64,
        role: Role,
        density: Option<u32>,
    },
    #[error("invalid profile: {0}")]
    Profile(String),
    #[error("trace line {line}: {message}")]
    Trace { line: usize, message: String },
    #[error("frame {frame} is outside the {frames} recorded frames")]
    FrameOutOfRange { frame: u64, frames: usize },
    #[error("query {0} has no video the backend can describe")]
    UnsupportedVideo(u64),
    #[error(transparent)]
    Tensor(#[from] TypeError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Small,
    Large,
}

/// What the model sees: the question, its options and the vision tokens.
#[derive(Debug, Clone, Copy)]
pub struct BackendRequest<'a> {
    pub query_id: u64,
    pub question: &'a str,
    pub options: &'a [char],
    pub role: Role,
    /// Merged density for the large model; `None` means raw tokens.
    pub density: Option<Action>,
    pub tokens: &'a TokenTensor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendResponse {
    pub logits: LogitVector,
    /// Question token embeddings; filled for the small role only.
    pub question_embeddings: Vec<Vec<f32>>,
    /// Model compute time on its own hardware.
    pub compute_ms: f64,
    /// Ground truth, when the backend knows it.
    pub correct: Option<bool>,
}

/// Affine cost model for the stages the simulator does not execute for real.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ComputeModel {
    /// Decoding a keyframe after a seek.
    pub keyframe_decode_ms: f64,
    /// Decoding one predicted frame in sequence.
    pub interframe_decode_ms: f64,
    pub preprocess_ms_per_frame: f64,
    pub encode_ms_per_frame: f64,
    pub small_lm_base_ms: f64,
    pub small_lm_ms_per_token: f64,
    pub large_lm_base_ms: f64,
    pub large_lm_ms_per_token: f64,
    /// Edge tokenization runs this many times faster than the device's.
    pub edge_speedup: f64,
    /// Frames per pipeline batch.
    pub batch_frames: usize,
    /// Compressed video bitrate used for raw uploads.
    pub video_mbps: f64,
    /// Size of an answer message on the downlink.
    pub response_bytes: usize,
}

impl Default for ComputeModel {
    fn default() -> Self {
        Self {
            keyframe_decode_ms: 2.0,
            interframe_decode_ms: 0.3,
            preprocess_ms_per_frame: 0.4,
            encode_ms_per_frame: 3.0,
            small_lm_base_ms: 90.0,
            small_lm_ms_per_token: 0.02,
            large_lm_base_ms: 150.0,
            large_lm_ms_per_token: 0.1,
            edge_speedup: 4.0,
            batch_frames: 16,
            video_mbps: 1.5,
            response_bytes: 64,
        }
    }
}

impl ComputeModel {
    /// Per-frame decode cost when `frames` (sorted) are decoded in order,
    /// seeking to the nearest preceding keyframe whenever that is cheaper
    /// than rolling forward.
    pub fn decode_costs(&self, meta: &VideoMetadata, frames: &[u64]) -> Vec<f64> {
        let keys = &meta.keyframe_indices;
        let mut pos: Option<u64> = None;
        frames
            .iter()
            .map(|&f| {
                let k = match keys.partition_point(|&k| k <= f) {
                    0 => 0,
                    i => keys[i - 1],
                };
                let seek = self.keyframe_decode_ms + self.interframe_decode_ms * (f - k) as f64;
                let cost = match pos {
                    Some(p) if p >= k && p < f => self.interframe_decode_ms * (f - p) as f64,
                    Some(p) if p == f => 0.0,
                    _ => seek,
                };
                pos = Some(f);
                cost
            })
            .collect()
    }

    pub fn small_lm_ms(&self, tokens: usize) -> f64 {
        self.small_lm_base_ms + self.small_lm_ms_per_token * tokens as f64
    }

    pub fn large_lm_ms(&self, tokens: usize) -> f64 {
        self.large_lm_base_ms + self.large_lm_ms_per_token * tokens as f64
    }

    pub fn video_bytes(&self, meta: &VideoMetadata) -> u64 {
        (meta.duration_s * self.video_mbps * 1e6 / 8.0).round() as u64
    }
}

pub trait ModelBackend: Send + Sync {
    /// Metadata of a video the backend owns (synthetic or recorded).
    fn video_metadata(&self, query: &Query) -> Result<VideoMetadata, BackendError>;

    /// Shared vision encoder: raw tokens of the given frames, in order.
    fn encode_frames(&self, query: &Query, frames: &[u64]) -> Result<TokenTensor, BackendError>;

    fn answer(&self, req: &BackendRequest<'_>) -> Result<BackendResponse, BackendError>;

    fn compute(&self) -> &ComputeModel;

    fn raw_tokens_per_frame(&self) -> usize;

    /// Index of the correct option, when known.
    fn ground_truth(&self, query: &Query) -> Option<usize>;
}
