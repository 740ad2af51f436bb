//! One query end to end: device tokenization, local answer, routing and,
//! when needed, an offload to the edge. Also the baseline serving strategies
//! and the benchmark runner built on top.

mod bench;
mod edge;
mod setup;

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use bench::{
    export_trace, run_benchmark, run_solution, run_summary, summarize, BenchReport, BenchSource,
    BenchSpec, RunSummary, SolutionReport,
};
pub use edge::{
    simulate_network, Direction, EdgeError, EdgeLink, EdgeService, LinkError, LinkReply,
    OffloadRequest, OffloadResponse, SimulatedLink,
};
pub use setup::{fit_edge_temperature, prepare_models, split_profiling, PreparedModels};

use crate::backends::{BackendError, BackendRequest, BackendResponse, ModelBackend, Role};
use crate::bandit::{proxy_bit, BanditError, DensityPolicy};
use crate::calibration::{CalibrationError, TemperatureModel};
use crate::config::SystemConfig;
use crate::features::{build_context, FeatureError, LocalArtifacts, PcaModel};
use crate::pipeline::{flow_shop_makespan, frame_batches, run_pipeline, HandlerError};
use crate::router::route;
use crate::sampler::{fixed_rate_indices, select_frames, uniform_subsample, SamplerError};
use crate::token_ops::{merge_to_density, pack, TokenOpsError};
use crate::types::{Action, DelayBreakdown, Query, TokenTensor, VideoMetadata};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Sampler(#[from] SamplerError),
    #[error("tokenization pipeline: {0}")]
    Pipeline(String),
    #[error(transparent)]
    Calibration(#[from] CalibrationError),
    #[error(transparent)]
    Features(#[from] FeatureError),
    #[error(transparent)]
    Bandit(#[from] BanditError),
    #[error(transparent)]
    TokenOps(#[from] TokenOpsError),
    #[error("profiling ratio must be in (0, 1), got {0}")]
    InvalidRatio(f64),
    #[error("{0} needs a density policy")]
    MissingPolicy(Solution),
    #[error("{0} uploads raw video and only runs in the simulator")]
    RequiresSimulator(Solution),
    #[error("not enough labelled profiling data: {0}")]
    Profiling(String),
    #[error("{0}")]
    Invalid(String),
}

impl HarnessError {
    /// Trace gaps are skipped with a warning rather than aborting a run.
    pub fn is_missing_record(&self) -> bool {
        matches!(
            self,
            HarnessError::Backend(BackendError::MissingRecord { .. })
        )
    }
}

/// Serving strategy under test.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum Solution {
    /// Small model only, standard sampling, no pipelining.
    DeviceNative,
    /// Raw video uploaded; the edge tokenizes and answers.
    EdgeHosted,
    /// Device tokenizes, the edge answers every query from native-density tokens.
    Collaborative,
    QuickGrasp,
    /// QuickGrasp with the bandit replaced by one density.
    FixedDensity(u32),
    /// QuickGrasp routing, but escalations upload raw video.
    NoSharing,
}

impl Solution {
    pub fn baselines() -> [Solution; 4] {
        [
            Solution::DeviceNative,
            Solution::EdgeHosted,
            Solution::Collaborative,
            Solution::QuickGrasp,
        ]
    }
}

impl fmt::Display for Solution {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Solution::DeviceNative => f.write_str("device-native"),
            Solution::EdgeHosted => f.write_str("edge-hosted"),
            Solution::Collaborative => f.write_str("collaborative"),
            Solution::QuickGrasp => f.write_str("quickgrasp"),
            Solution::FixedDensity(a) => write!(f, "fixed:{a}"),
            Solution::NoSharing => f.write_str("no-sharing"),
        }
    }
}

impl FromStr for Solution {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let lower = s.trim().to_ascii_lowercase();
        let norm = lower.replace('_', "-");
        Ok(match norm.as_str() {
            "device-native" | "devicenative" => Solution::DeviceNative,
            "edge-hosted" | "edgehosted" => Solution::EdgeHosted,
            "collaborative" => Solution::Collaborative,
            "quickgrasp" => Solution::QuickGrasp,
            "no-sharing" | "nosharing" => Solution::NoSharing,
            other => {
                let a = other
                    .strip_prefix("fixed:")
                    .or_else(|| other.strip_prefix("fixed-"))
                    .and_then(|v| v.parse::<u32>().ok())
                    .filter(|&a| a > 0)
                    .ok_or_else(|| HarnessError::Invalid(format!("unknown solution {s:?}")))?;
                Solution::FixedDensity(a)
            }
        })
    }
}

impl From<Solution> for String {
    fn from(s: Solution) -> Self {
        s.to_string()
    }
}

impl TryFrom<String> for Solution {
    type Error = HarnessError;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

/// Tokens of one query plus the simulated device time spent producing them.
#[derive(Debug, Clone)]
pub struct Tokenized {
    pub meta: VideoMetadata,
    pub frames: Vec<u64>,
    pub tokens: TokenTensor,
    /// Decode, sampling and preprocessing time not hidden behind encoding.
    pub decode_sample_ms: f64,
    pub encode_ms: f64,
}

impl Tokenized {
    pub fn device_ms(&self) -> f64 {
        self.decode_sample_ms + self.encode_ms
    }
}

/// Per-batch simulated `[decode, preprocess, encode]` durations.
pub fn batch_durations(
    backend: &dyn ModelBackend,
    meta: &VideoMetadata,
    frames: &[u64],
) -> (Vec<Vec<u64>>, Vec<[f64; 3]>) {
    let c = backend.compute();
    let costs = c.decode_costs(meta, frames);
    let batches = frame_batches(frames, c.batch_frames);
    let mut durations = Vec::with_capacity(batches.len());
    let mut offset = 0;
    for b in &batches {
        let decode: f64 = costs[offset..offset + b.len()].iter().sum();
        offset += b.len();
        let n = b.len() as f64;
        durations.push([
            decode,
            c.preprocess_ms_per_frame * n,
            c.encode_ms_per_frame * n,
        ]);
    }
    (batches, durations)
}

/// Keyframe-aligned sampling followed by the staged pipeline. The stages
/// really run on their own threads; the reported times come from the cost
/// model on the flow-shop clock.
pub fn tokenize_keyframes(
    backend: &dyn ModelBackend,
    query: &Query,
    cfg: &SystemConfig,
) -> Result<Tokenized, HarnessError> {
    let meta = backend.video_metadata(query)?;
    let sample = select_frames(&meta, cfg)?;
    let (batches, durations) = batch_durations(backend, &meta, &sample.indices);
    let (tokens, _) = run_pipeline(
        batches,
        |_, b: Vec<u64>| Ok(b),
        |_, b: Vec<u64>| Ok(b),
        |_, b: Vec<u64>| {
            backend
                .encode_frames(query, &b)
                .map_err(|e| Box::new(e) as HandlerError)
        },
        cfg.queue_capacity,
    )
    .map_err(|e| HarnessError::Pipeline(e.to_string()))?;
    let encode_ms: f64 = durations.iter().map(|d| d[2]).sum();
    let makespan = flow_shop_makespan(&durations);
    Ok(Tokenized {
        meta,
        frames: sample.indices,
        tokens,
        decode_sample_ms: makespan - encode_ms,
        encode_ms,
    })
}

/// Same frames, tokens and simulated times as [`tokenize_keyframes`], without
/// spawning the stage workers. Used for bulk offline profiling.
pub fn tokenize_keyframes_sequential(
    backend: &dyn ModelBackend,
    query: &Query,
    cfg: &SystemConfig,
) -> Result<Tokenized, HarnessError> {
    let meta = backend.video_metadata(query)?;
    let sample = select_frames(&meta, cfg)?;
    let (_, durations) = batch_durations(backend, &meta, &sample.indices);
    let tokens = backend.encode_frames(query, &sample.indices)?;
    let encode_ms: f64 = durations.iter().map(|d| d[2]).sum();
    Ok(Tokenized {
        meta,
        frames: sample.indices,
        tokens,
        decode_sample_ms: flow_shop_makespan(&durations) - encode_ms,
        encode_ms,
    })
}

/// One frame per second capped at `n_max`, every stage run back to back.
pub fn tokenize_baseline(
    backend: &dyn ModelBackend,
    query: &Query,
    cfg: &SystemConfig,
) -> Result<Tokenized, HarnessError> {
    let meta = backend.video_metadata(query)?;
    meta.validate().map_err(SamplerError::from)?;
    let fixed = fixed_rate_indices(&meta);
    let frames = if fixed.len() as u64 > cfg.n_max {
        uniform_subsample(&fixed, cfg.n_max as usize)?
    } else {
        fixed
    };
    let (_, durations) = batch_durations(backend, &meta, &frames);
    let tokens = backend.encode_frames(query, &frames)?;
    Ok(Tokenized {
        meta,
        frames,
        tokens,
        decode_sample_ms: durations.iter().map(|d| d[0] + d[1]).sum(),
        encode_ms: durations.iter().map(|d| d[2]).sum(),
    })
}

/// What happened to one query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryOutcome {
    pub query_id: u64,
    pub solution: Solution,
    pub escalated: bool,
    /// Density sent to the edge, if tokens were offloaded.
    pub density: Option<u32>,
    pub answer: usize,
    pub letter: char,
    pub correct: Option<bool>,
    pub kappa_small: Option<f64>,
    pub kappa_large: Option<f64>,
    pub proxy_bit: Option<bool>,
    pub n_frames: usize,
    pub payload_bytes: usize,
    pub delay: DelayBreakdown,
    /// The edge was unreachable and the local answer was used instead.
    pub degraded: bool,
}

/// Device-side state that persists across queries.
pub struct Orchestrator {
    pub cfg: SystemConfig,
    pub backend: Arc<dyn ModelBackend>,
    pub small_temperature: TemperatureModel,
    pub pca_txt: PcaModel,
    pub pca_vis: PcaModel,
    pub policy: Option<DensityPolicy>,
    /// Density the large model was built for; used when no policy chooses.
    pub native_density: u32,
    /// Edge model reached by raw-video uploads, which bypass the token link.
    pub raw_edge: Option<EdgeService>,
}

fn ms_since(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

struct Offloaded {
    answer: usize,
    kappa: f64,
    network_ms: f64,
    edge_ms: f64,
}

impl Orchestrator {
    pub fn from_models(
        cfg: SystemConfig,
        backend: Arc<dyn ModelBackend>,
        models: &PreparedModels,
        native_density: u32,
    ) -> Self {
        let policy = DensityPolicy::new(models.extractor.clone(), models.state.clone(), &cfg);
        Self {
            raw_edge: Some(EdgeService::new(
                backend.clone(),
                models.large_temperature.clone(),
            )),
            cfg,
            backend,
            small_temperature: models.small_temperature.clone(),
            pca_txt: models.pca_txt.clone(),
            pca_vis: models.pca_vis.clone(),
            policy: Some(policy),
            native_density,
        }
    }

    fn small_answer(
        &self,
        query: &Query,
        tokens: &TokenTensor,
    ) -> Result<BackendResponse, HarnessError> {
        Ok(self.backend.answer(&BackendRequest {
            query_id: query.id,
            question: &query.question,
            options: &query.options,
            role: Role::Small,
            density: None,
            tokens,
        })?)
    }

    fn outcome(
        &self,
        query: &Query,
        solution: Solution,
        answer: usize,
        n_frames: usize,
    ) -> QueryOutcome {
        QueryOutcome {
            query_id: query.id,
            solution,
            escalated: false,
            density: None,
            answer,
            letter: query.options[answer],
            correct: self.backend.ground_truth(query).map(|gt| gt == answer),
            kappa_small: None,
            kappa_large: None,
            proxy_bit: None,
            n_frames,
            payload_bytes: 0,
            delay: DelayBreakdown::default(),
            degraded: false,
        }
    }

    fn set_answer(&self, out: &mut QueryOutcome, query: &Query, answer: usize) {
        out.answer = answer;
        out.letter = query.options[answer];
        out.correct = self.backend.ground_truth(query).map(|gt| gt == answer);
    }

    /// Raw video plus question up, answer down; the edge re-tokenizes at its
    /// own speed and answers at native density.
    fn raw_video_offload(
        &self,
        solution: Solution,
        query: &Query,
        tk: &Tokenized,
        edge_tokenize_ms: f64,
    ) -> Result<Offloaded, HarnessError> {
        let svc = self
            .raw_edge
            .as_ref()
            .ok_or(HarnessError::RequiresSimulator(solution))?;
        let merged = merge_to_density(&tk.tokens, Action::new(self.native_density))?;
        let resp = svc.backend.answer(&BackendRequest {
            query_id: query.id,
            question: &query.question,
            options: &query.options,
            role: Role::Large,
            density: Some(Action::new(self.native_density)),
            tokens: &merged.tokens,
        })?;
        let dist = svc.temperature.apply(&resp.logits)?;
        let c = self.backend.compute();
        let up = c.video_bytes(&tk.meta) as usize + query.question.len() + query.options.len() + 32;
        Ok(Offloaded {
            answer: dist.argmax(),
            kappa: dist.confidence,
            network_ms: simulate_network(up, Direction::Up, &self.cfg.network)
                + simulate_network(c.response_bytes, Direction::Down, &self.cfg.network),
            edge_ms: edge_tokenize_ms + resp.compute_ms,
        })
    }

    /// Sends merged tokens over the link. `Err` carries the wall time lost
    /// before giving up.
    fn token_offload(
        &self,
        query: &Query,
        tokens: &TokenTensor,
        action: Action,
        link: &mut dyn EdgeLink,
        out: &mut QueryOutcome,
    ) -> Result<(Offloaded, f64), (HarnessError, f64)> {
        let t = Instant::now();
        let merged = merge_to_density(tokens, action).map_err(|e| (e.into(), 0.0))?;
        let payload = pack(&merged.tokens).map_err(|e| (e.into(), 0.0))?;
        let req = OffloadRequest {
            query_id: query.id,
            question: query.question.clone(),
            options: query.options.clone(),
            density: action.density,
            n_frames: tokens.frames as u32,
            payload,
        };
        out.delay.merge_compress_ms = ms_since(t);
        out.density = Some(action.density);
        out.payload_bytes = req.payload.len();
        let t = Instant::now();
        let reply = link.offload(&req);
        let wall = ms_since(t);
        let reply = reply.map_err(|e| (HarnessError::Invalid(e.to_string()), wall))?;
        let answer = query
            .options
            .iter()
            .position(|&c| c == reply.response.answer)
            .filter(|_| reply.response.query_id == query.id)
            .ok_or_else(|| {
                (
                    HarnessError::Invalid(format!(
                        "edge answered {:?} for query {}",
                        reply.response.answer, reply.response.query_id
                    )),
                    wall,
                )
            })?;
        Ok((
            Offloaded {
                answer,
                kappa: reply.response.kappa,
                network_ms: reply.network_ms,
                edge_ms: reply.response.edge_ms,
            },
            wall,
        ))
    }

    /// Answers one query. Link failures fall back to the local answer; any
    /// other error means the query could not be served at all.
    pub fn answer_query(
        &mut self,
        query: &Query,
        solution: Solution,
        link: &mut dyn EdgeLink,
    ) -> Result<QueryOutcome, HarnessError> {
        match solution {
            Solution::DeviceNative => self.device_native(query),
            Solution::EdgeHosted => self.edge_hosted(query),
            Solution::Collaborative => self.collaborative(query, link),
            Solution::QuickGrasp | Solution::FixedDensity(_) | Solution::NoSharing => {
                self.local_first(query, solution, link)
            }
        }
    }

    fn device_native(&self, query: &Query) -> Result<QueryOutcome, HarnessError> {
        let tk = tokenize_baseline(self.backend.as_ref(), query, &self.cfg)?;
        let small = self.small_answer(query, &tk.tokens)?;
        let dist = self.small_temperature.apply(&small.logits)?;
        let mut out = self.outcome(
            query,
            Solution::DeviceNative,
            dist.argmax(),
            tk.frames.len(),
        );
        out.kappa_small = Some(dist.confidence);
        out.delay = DelayBreakdown {
            decode_sample_ms: tk.decode_sample_ms,
            encode_ms: tk.encode_ms,
            local_lm_ms: small.compute_ms,
            ..Default::default()
        }
        .seal();
        Ok(out)
    }

    fn edge_hosted(&self, query: &Query) -> Result<QueryOutcome, HarnessError> {
        let tk = tokenize_baseline(self.backend.as_ref(), query, &self.cfg)?;
        let speedup = self.backend.compute().edge_speedup;
        let off =
            self.raw_video_offload(Solution::EdgeHosted, query, &tk, tk.device_ms() / speedup)?;
        let mut out = self.outcome(query, Solution::EdgeHosted, off.answer, tk.frames.len());
        out.escalated = true;
        out.density = Some(self.native_density);
        out.kappa_large = Some(off.kappa);
        out.payload_bytes = self.backend.compute().video_bytes(&tk.meta) as usize;
        out.delay = DelayBreakdown {
            network_ms: off.network_ms,
            edge_lm_ms: off.edge_ms,
            ..Default::default()
        }
        .seal();
        Ok(out)
    }

    fn collaborative(
        &self,
        query: &Query,
        link: &mut dyn EdgeLink,
    ) -> Result<QueryOutcome, HarnessError> {
        let tk = tokenize_baseline(self.backend.as_ref(), query, &self.cfg)?;
        let mut out = self.outcome(query, Solution::Collaborative, 0, tk.frames.len());
        out.escalated = true;
        out.delay.decode_sample_ms = tk.decode_sample_ms;
        out.delay.encode_ms = tk.encode_ms;
        let t0 = Instant::now();
        let action = Action::new(self.native_density);
        match self.token_offload(query, &tk.tokens, action, link, &mut out) {
            Ok((off, wall)) => {
                self.set_answer(&mut out, query, off.answer);
                out.kappa_large = Some(off.kappa);
                out.delay.network_ms = off.network_ms;
                out.delay.edge_lm_ms = off.edge_ms;
                out.delay.total_ms =
                    tk.device_ms() + (ms_since(t0) - wall) + off.network_ms + off.edge_ms;
            }
            Err((e, wall)) => {
                log::warn!("query {}: offload failed, answering locally: {e}", query.id);
                let control = ms_since(t0) - wall;
                let small = self.small_answer(query, &tk.tokens)?;
                let dist = self.small_temperature.apply(&small.logits)?;
                self.set_answer(&mut out, query, dist.argmax());
                out.kappa_small = Some(dist.confidence);
                out.degraded = true;
                out.delay.local_lm_ms = small.compute_ms;
                out.delay.network_ms = wall;
                out.delay.total_ms = tk.device_ms() + control + wall + small.compute_ms;
            }
        }
        Ok(out)
    }

    fn local_first(
        &mut self,
        query: &Query,
        solution: Solution,
        link: &mut dyn EdgeLink,
    ) -> Result<QueryOutcome, HarnessError> {
        if solution == Solution::QuickGrasp && self.policy.is_none() {
            return Err(HarnessError::MissingPolicy(solution));
        }
        let tk = tokenize_keyframes(self.backend.as_ref(), query, &self.cfg)?;
        let small = self.small_answer(query, &tk.tokens)?;
        let local_ms = tk.device_ms() + small.compute_ms;

        let t0 = Instant::now();
        let dist = self.small_temperature.apply(&small.logits)?;
        let routing = route(&dist, self.cfg.tau_route);
        let mut out = self.outcome(query, solution, dist.argmax(), tk.frames.len());
        out.kappa_small = Some(dist.confidence);
        out.delay.decode_sample_ms = tk.decode_sample_ms;
        out.delay.encode_ms = tk.encode_ms;
        out.delay.local_lm_ms = small.compute_ms;
        if !routing.escalates() {
            out.delay.decision_ms = ms_since(t0);
            out.delay.total_ms = local_ms + out.delay.decision_ms;
            return Ok(out);
        }
        out.escalated = true;

        if solution == Solution::NoSharing {
            out.delay.decision_ms = ms_since(t0);
            let speedup = self.backend.compute().edge_speedup;
            let off = self.raw_video_offload(solution, query, &tk, tk.device_ms() / speedup)?;
            self.set_answer(&mut out, query, off.answer);
            out.density = Some(self.native_density);
            out.kappa_large = Some(off.kappa);
            out.payload_bytes = self.backend.compute().video_bytes(&tk.meta) as usize;
            out.delay.network_ms = off.network_ms;
            out.delay.edge_lm_ms = off.edge_ms;
            // The raw offload's real work stands in for the edge and is
            // replaced by its simulated cost.
            out.delay.total_ms = local_ms + out.delay.decision_ms + off.network_ms + off.edge_ms;
            return Ok(out);
        }

        let (action, latent) = match solution {
            Solution::FixedDensity(a) => (Action::new(a), None),
            _ => {
                let ctx = build_context(
                    LocalArtifacts {
                        n_frames: tk.tokens.frames,
                        dist: &dist,
                        question_embeddings: &small.question_embeddings,
                        tokens: &tk.tokens,
                    },
                    &self.pca_txt,
                    &self.pca_vis,
                    self.cfg.top_clips,
                )?;
                let policy = self
                    .policy
                    .as_mut()
                    .ok_or(HarnessError::MissingPolicy(solution))?;
                let decision = policy.choose(&ctx)?;
                (decision.action, Some(decision.latent))
            }
        };
        out.delay.decision_ms = ms_since(t0);

        let link_wall = match self.token_offload(query, &tk.tokens, action, link, &mut out) {
            Ok((off, wall)) => {
                self.set_answer(&mut out, query, off.answer);
                out.kappa_large = Some(off.kappa);
                out.delay.network_ms = off.network_ms;
                out.delay.edge_lm_ms = off.edge_ms;
                if let (Some(latent), Some(policy)) = (latent, self.policy.as_mut()) {
                    let t = Instant::now();
                    let bit = proxy_bit(off.kappa, self.cfg.tau_proxy);
                    policy.observe(action, &latent, bit)?;
                    out.proxy_bit = Some(bit);
                    out.delay.decision_ms += ms_since(t);
                }
                wall
            }
            Err((e, wall)) => {
                log::warn!(
                    "query {}: offload failed, keeping the local answer: {e}",
                    query.id
                );
                out.degraded = true;
                out.delay.network_ms = wall;
                wall
            }
        };
        out.delay.total_ms =
            local_ms + (ms_since(t0) - link_wall) + out.delay.network_ms + out.delay.edge_lm_ms;
        Ok(out)
    }
}
