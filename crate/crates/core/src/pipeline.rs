//! Three-stage decode → preprocess → encode pipeline over frame batches.
//!
//! Each stage runs on its own thread and hands batches downstream through a
//! bounded FIFO, so stage work for different batches overlaps while output
//! order and content stay identical to running the stages back to back.

use std::error::Error as StdError;
use std::sync::mpsc::sync_channel;
use std::thread;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::types::{TokenTensor, TypeError};

pub type HandlerError = Box<dyn StdError + Send + Sync>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Stage {
    Decode,
    Preprocess,
    Encode,
}

impl Stage {
    pub const ALL: [Stage; 3] = [Stage::Decode, Stage::Preprocess, Stage::Encode];
}

#[derive(Debug, Error)]
#[error("{stage:?} failed on batch {batch}: {source}")]
pub struct StageFailure<R> {
    pub batch: usize,
    pub stage: Stage,
    #[source]
    pub source: HandlerError,
    /// Outputs of the batches that finished before the failure, in order.
    pub completed: Vec<R>,
}

#[derive(Debug, Error)]
pub enum PipelineError<R> {
    #[error("pipeline needs at least one batch")]
    NoBatches,
    #[error("queue capacity must be >= 1")]
    InvalidQueueCapacity,
    #[error(transparent)]
    Stage(#[from] StageFailure<R>),
    #[error("encoder outputs do not concatenate: {0}")]
    Shape(TypeError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Span {
    pub start_ms: f64,
    pub end_ms: f64,
}

impl Span {
    pub fn duration_ms(&self) -> f64 {
        self.end_ms - self.start_ms
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchTiming {
    pub batch: usize,
    pub decode: Option<Span>,
    pub preprocess: Option<Span>,
    pub encode: Option<Span>,
}

impl BatchTiming {
    pub fn span(&self, stage: Stage) -> Option<Span> {
        match stage {
            Stage::Decode => self.decode,
            Stage::Preprocess => self.preprocess,
            Stage::Encode => self.encode,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub batches: Vec<BatchTiming>,
    pub makespan_ms: f64,
    /// Sum of every stage duration, i.e. the cost without overlap.
    pub sequential_estimate_ms: f64,
    pub queue_capacity: usize,
}

impl PipelineReport {
    pub fn busy_ms(&self, stage: Stage) -> f64 {
        self.batches
            .iter()
            .filter_map(|b| b.span(stage))
            .map(|s| s.duration_ms())
            .sum()
    }

    pub fn max_stage_busy_ms(&self) -> f64 {
        Stage::ALL
            .iter()
            .map(|&s| self.busy_ms(s))
            .fold(0.0, f64::max)
    }
}

type Spans = Vec<(usize, Span)>;
type Failed = Option<(usize, HandlerError)>;

fn join<T>(h: thread::ScopedJoinHandle<'_, T>) -> T {
    h.join()
        .unwrap_or_else(|panic| std::panic::resume_unwind(panic))
}

fn ms_since(t0: Instant) -> f64 {
    t0.elapsed().as_secs_f64() * 1e3
}

/// Runs the chain with every stage on its own worker.
///
/// With capacity `q`, a stage's outputs alive at once are bounded by q + 1:
/// q − 1 queued, one held by the consumer and one waiting on a full queue.
pub fn run_stages<B, P, Q, R, D, F, G>(
    batches: Vec<B>,
    decode: D,
    preprocess: F,
    encode: G,
    queue_capacity: usize,
) -> Result<(Vec<R>, PipelineReport), PipelineError<R>>
where
    B: Send,
    P: Send,
    Q: Send,
    R: Send,
    D: Fn(usize, B) -> Result<P, HandlerError> + Sync,
    F: Fn(usize, P) -> Result<Q, HandlerError> + Sync,
    G: Fn(usize, Q) -> Result<R, HandlerError> + Sync,
{
    if batches.is_empty() {
        return Err(PipelineError::NoBatches);
    }
    if queue_capacity == 0 {
        return Err(PipelineError::InvalidQueueCapacity);
    }
    let n = batches.len();
    let t0 = Instant::now();
    let (tx1, rx1) = sync_channel::<(usize, P)>(queue_capacity - 1);
    let (tx2, rx2) = sync_channel::<(usize, Q)>(queue_capacity - 1);
    let (decode, preprocess, encode) = (&decode, &preprocess, &encode);

    let (dec, pre, (outputs, enc)) = thread::scope(|s| {
        let dec = s.spawn(move || -> (Spans, Failed) {
            let mut spans = Vec::new();
            for (i, b) in batches.into_iter().enumerate() {
                let start_ms = ms_since(t0);
                let r = decode(i, b);
                spans.push((
                    i,
                    Span {
                        start_ms,
                        end_ms: ms_since(t0),
                    },
                ));
                match r {
                    Ok(p) => {
                        if tx1.send((i, p)).is_err() {
                            break;
                        }
                    }
                    Err(e) => return (spans, Some((i, e))),
                }
            }
            (spans, None)
        });
        let pre = s.spawn(move || -> (Spans, Failed) {
            let mut spans = Vec::new();
            for (i, p) in rx1 {
                let start_ms = ms_since(t0);
                let r = preprocess(i, p);
                spans.push((
                    i,
                    Span {
                        start_ms,
                        end_ms: ms_since(t0),
                    },
                ));
                match r {
                    Ok(q) => {
                        if tx2.send((i, q)).is_err() {
                            break;
                        }
                    }
                    Err(e) => return (spans, Some((i, e))),
                }
            }
            (spans, None)
        });
        let enc = s.spawn(move || -> (Vec<R>, (Spans, Failed)) {
            let mut spans = Vec::new();
            let mut out = Vec::new();
            for (i, q) in rx2 {
                let start_ms = ms_since(t0);
                let r = encode(i, q);
                spans.push((
                    i,
                    Span {
                        start_ms,
                        end_ms: ms_since(t0),
                    },
                ));
                match r {
                    Ok(v) => out.push(v),
                    Err(e) => return (out, (spans, Some((i, e)))),
                }
            }
            (out, (spans, None))
        });
        let dec = join(dec);
        let pre = join(pre);
        let (out, enc) = join(enc);
        (dec, pre, (out, enc))
    });
    let makespan_ms = ms_since(t0);

    let mut timings: Vec<BatchTiming> = (0..n)
        .map(|batch| BatchTiming {
            batch,
            decode: None,
            preprocess: None,
            encode: None,
        })
        .collect();
    let mut failures = Vec::new();
    for (stage, (spans, failed)) in [
        (Stage::Decode, dec),
        (Stage::Preprocess, pre),
        (Stage::Encode, enc),
    ] {
        for (i, span) in spans {
            let t = &mut timings[i];
            match stage {
                Stage::Decode => t.decode = Some(span),
                Stage::Preprocess => t.preprocess = Some(span),
                Stage::Encode => t.encode = Some(span),
            }
        }
        if let Some((batch, e)) = failed {
            failures.push((batch, stage, e));
        }
    }
    // The earliest failure in sequential order wins, matching what a
    // non-pipelined run would report.
    if let Some((batch, stage, source)) = failures
        .into_iter()
        .min_by_key(|(batch, stage, _)| (*batch, *stage))
    {
        return Err(StageFailure {
            batch,
            stage,
            source,
            completed: outputs,
        }
        .into());
    }
    let sequential_estimate_ms = timings
        .iter()
        .flat_map(|t| Stage::ALL.map(|s| t.span(s)))
        .flatten()
        .map(|s| s.duration_ms())
        .sum();
    Ok((
        outputs,
        PipelineReport {
            batches: timings,
            makespan_ms,
            sequential_estimate_ms,
            queue_capacity,
        },
    ))
}

/// Reference execution: every stage of batch i before any stage of batch i+1.
pub fn run_sequential<B, P, Q, R, D, F, G>(
    batches: Vec<B>,
    decode: D,
    preprocess: F,
    encode: G,
) -> Result<Vec<R>, PipelineError<R>>
where
    D: Fn(usize, B) -> Result<P, HandlerError>,
    F: Fn(usize, P) -> Result<Q, HandlerError>,
    G: Fn(usize, Q) -> Result<R, HandlerError>,
{
    if batches.is_empty() {
        return Err(PipelineError::NoBatches);
    }
    let mut out = Vec::with_capacity(batches.len());
    for (i, b) in batches.into_iter().enumerate() {
        let fail = |stage, source| StageFailure {
            batch: i,
            stage,
            source,
            completed: Vec::new(),
        };
        let r = decode(i, b)
            .map_err(|e| fail(Stage::Decode, e))
            .and_then(|p| preprocess(i, p).map_err(|e| fail(Stage::Preprocess, e)))
            .and_then(|q| encode(i, q).map_err(|e| fail(Stage::Encode, e)));
        match r {
            Ok(v) => out.push(v),
            Err(mut f) => {
                f.completed = out;
                return Err(f.into());
            }
        }
    }
    Ok(out)
}

/// Pipelined conversion whose encoder emits token tensors, concatenated
/// along the frame axis in batch order.
pub fn run_pipeline<B, P, Q, D, F, G>(
    batches: Vec<B>,
    decode: D,
    preprocess: F,
    encode: G,
    queue_capacity: usize,
) -> Result<(TokenTensor, PipelineReport), PipelineError<TokenTensor>>
where
    B: Send,
    P: Send,
    Q: Send,
    D: Fn(usize, B) -> Result<P, HandlerError> + Sync,
    F: Fn(usize, P) -> Result<Q, HandlerError> + Sync,
    G: Fn(usize, Q) -> Result<TokenTensor, HandlerError> + Sync,
{
    let (parts, report) = run_stages(batches, decode, preprocess, encode, queue_capacity)?;
    let tensor = TokenTensor::concat_frames(&parts).map_err(PipelineError::Shape)?;
    Ok((tensor, report))
}

/// Completion time of the last batch when each stage starts a batch as soon
/// as it is free and the previous stage has finished that batch. Used as the
/// simulated clock; queue blocking is not modelled.
pub fn flow_shop_makespan(durations: &[[f64; 3]]) -> f64 {
    let mut done = [0.0f64; 3];
    for d in durations {
        let mut ready = 0.0f64;
        for (stage, t) in d.iter().enumerate() {
            done[stage] = done[stage].max(ready) + t;
            ready = done[stage];
        }
    }
    done[2]
}

/// Splits sampled frame indices into consecutive batches of `batch_size`.
pub fn frame_batches(indices: &[u64], batch_size: usize) -> Vec<Vec<u64>> {
    indices
        .chunks(batch_size.max(1))
        .map(<[u64]>::to_vec)
        .collect()
}
