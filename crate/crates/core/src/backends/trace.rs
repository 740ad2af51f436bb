//! Replay of recorded model outputs.
//!
//! A trace is JSON lines: a header object first, then one record per
//! (query, role, density). Files ending in `.zst` are Zstandard-compressed.
//!
//! ```text
//! {"schema":"tokenbridge-trace","version":1,"actions":[2,4,8,16,32],"raw_tokens_per_frame":32,...}
//! {"qid":7,"role":"small","density":null,"options":["A","B","C","D"],"gt":"C","logits":[...],
//!  "h_txt":[...],"h_vis":[[...],...],"n_frames":64,"t_ms":212.5}
//! ```
//!
//! `h_txt` is the pooled question embedding. `h_vis` holds the raw vision
//! tokens of the sampled frames, `n_frames × raw_tokens_per_frame` rows.
//! Large-role records leave both empty.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{BackendError, BackendRequest, BackendResponse, ComputeModel, ModelBackend, Role};
use crate::types::{
    validate_options, FrameRate, LogitVector, Query, TokenTensor, VideoMetadata, VideoRef,
    DEFAULT_CLIP_SIZE,
};

pub const TRACE_SCHEMA: &str = "tokenbridge-trace";
pub const TRACE_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceHeader {
    pub schema: String,
    pub version: u32,
    pub actions: Vec<u32>,
    pub raw_tokens_per_frame: usize,
    /// Which model layer the embeddings were taken from, if known.
    #[serde(default)]
    pub embedding_layer: Option<String>,
    #[serde(default)]
    pub source: Option<String>,
}

impl TraceHeader {
    pub fn new(actions: Vec<u32>, raw_tokens_per_frame: usize) -> Self {
        Self {
            schema: TRACE_SCHEMA.into(),
            version: TRACE_VERSION,
            actions,
            raw_tokens_per_frame,
            embedding_layer: None,
            source: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub qid: u64,
    pub role: Role,
    pub density: Option<u32>,
    pub options: Vec<char>,
    pub gt: Option<char>,
    pub logits: Vec<f64>,
    #[serde(default)]
    pub h_txt: Vec<f32>,
    #[serde(default)]
    pub h_vis: Vec<Vec<f32>>,
    pub n_frames: usize,
    pub t_ms: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub question: Option<String>,
}

type Key = (u64, Role, Option<u32>);

impl TraceRecord {
    fn key(&self) -> Key {
        (self.qid, self.role, self.density)
    }

    /// Every schema violation of this record.
    pub fn problems(&self, header: &TraceHeader) -> Vec<String> {
        let mut out = Vec::new();
        if let Err(e) = validate_options(&self.options) {
            out.push(e.to_string());
        }
        if self.logits.len() != self.options.len() {
            out.push(format!(
                "{} logits for {} options",
                self.logits.len(),
                self.options.len()
            ));
        }
        if self.logits.iter().any(|v| !v.is_finite()) {
            out.push("non-finite logit".into());
        }
        if let Some(g) = self.gt {
            if !self.options.contains(&g) {
                out.push(format!("ground truth {g:?} is not an option"));
            }
        }
        if self.n_frames == 0 {
            out.push("n_frames must be >= 1".into());
        }
        if !(self.t_ms.is_finite() && self.t_ms >= 0.0) {
            out.push("t_ms must be a non-negative number".into());
        }
        match self.role {
            Role::Small => {
                if self.density.is_some() {
                    out.push("small-role records carry no density".into());
                }
                if self.h_txt.is_empty() {
                    out.push("small-role record without h_txt".into());
                }
                let want = self.n_frames * header.raw_tokens_per_frame;
                if self.h_vis.len() != want {
                    out.push(format!(
                        "h_vis has {} rows, expected n_frames × raw_tokens_per_frame = {want}",
                        self.h_vis.len()
                    ));
                }
                if let Some(r) = self.h_vis.iter().find(|r| r.len() != self.h_txt.len()) {
                    out.push(format!(
                        "h_vis row of width {} vs h_txt width {}",
                        r.len(),
                        self.h_txt.len()
                    ));
                }
                if self
                    .h_txt
                    .iter()
                    .chain(self.h_vis.iter().flatten())
                    .any(|v| !v.is_finite())
                {
                    out.push("non-finite embedding value".into());
                }
            }
            Role::Large => match self.density {
                None => out.push("large-role record without density".into()),
                Some(a) if !header.actions.contains(&a) => {
                    out.push(format!("density {a} is not in the header's action set"))
                }
                _ => {}
            },
        }
        out
    }
}

fn open(path: &Path) -> Result<Box<dyn BufRead>, BackendError> {
    let file = File::open(path)?;
    if path.extension().is_some_and(|e| e == "zst") {
        Ok(Box::new(BufReader::new(zstd::stream::read::Decoder::new(
            file,
        )?)))
    } else {
        Ok(Box::new(BufReader::new(file)))
    }
}

fn parse_header(line: &str) -> Result<TraceHeader, BackendError> {
    let header: TraceHeader = serde_json::from_str(line).map_err(|e| BackendError::Trace {
        line: 1,
        message: format!("bad header: {e}"),
    })?;
    if header.schema != TRACE_SCHEMA {
        return Err(BackendError::Trace {
            line: 1,
            message: format!("schema {:?}, expected {TRACE_SCHEMA:?}", header.schema),
        });
    }
    if header.version != TRACE_VERSION {
        return Err(BackendError::Trace {
            line: 1,
            message: format!("unsupported trace version {}", header.version),
        });
    }
    Ok(header)
}

/// Reads and validates a whole trace; the first problem is an error.
pub fn read_trace(reader: impl BufRead) -> Result<(TraceHeader, Vec<TraceRecord>), BackendError> {
    let mut lines = reader.lines().enumerate();
    let header = loop {
        match lines.next() {
            None => {
                return Err(BackendError::Trace {
                    line: 1,
                    message: "empty trace".into(),
                })
            }
            Some((_, l)) => {
                let l = l?;
                if !l.trim().is_empty() {
                    break parse_header(&l)?;
                }
            }
        }
    };
    let mut records = Vec::new();
    let mut seen = BTreeSet::new();
    for (i, line) in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fail = |message: String| BackendError::Trace {
            line: i + 1,
            message,
        };
        let rec: TraceRecord = serde_json::from_str(&line).map_err(|e| fail(e.to_string()))?;
        if let Some(p) = rec.problems(&header).into_iter().next() {
            return Err(fail(p));
        }
        if !seen.insert(rec.key()) {
            return Err(fail(format!("duplicate record for query {}", rec.qid)));
        }
        records.push(rec);
    }
    Ok((header, records))
}

pub fn read_trace_file(path: &Path) -> Result<(TraceHeader, Vec<TraceRecord>), BackendError> {
    read_trace(open(path)?)
}

pub fn write_trace(
    mut w: impl Write,
    header: &TraceHeader,
    records: &[TraceRecord],
) -> Result<(), BackendError> {
    serde_json::to_writer(&mut w, header).map_err(std::io::Error::from)?;
    w.write_all(b"\n")?;
    for r in records {
        serde_json::to_writer(&mut w, r).map_err(std::io::Error::from)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Writes plain JSON lines, or Zstandard-compressed when the path ends in `.zst`.
pub fn write_trace_file(
    path: &Path,
    header: &TraceHeader,
    records: &[TraceRecord],
) -> Result<(), BackendError> {
    let file = File::create(path)?;
    if path.extension().is_some_and(|e| e == "zst") {
        let mut enc = zstd::stream::write::Encoder::new(file, crate::token_ops::ZSTD_LEVEL)?;
        write_trace(&mut enc, header, records)?;
        enc.finish()?;
        Ok(())
    } else {
        write_trace(std::io::BufWriter::new(file), header, records)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TraceSummary {
    pub records: usize,
    pub queries: usize,
    /// `line: message` for every violation found.
    pub errors: Vec<String>,
    /// (qid, density) pairs without a large-role record.
    pub missing: Vec<(u64, u32)>,
}

impl TraceSummary {
    pub fn is_valid(&self) -> bool {
        self.errors.is_empty()
    }
}

/// Checks a trace end to end and reports every problem instead of stopping
/// at the first.
pub fn validate_trace(reader: impl BufRead) -> Result<TraceSummary, BackendError> {
    let mut summary = TraceSummary::default();
    let mut header = None;
    let mut seen = BTreeSet::new();
    let mut small = BTreeSet::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let Some(h) = &header else {
            match parse_header(&line) {
                Ok(h) => header = Some(h),
                Err(e) => {
                    summary.errors.push(e.to_string());
                    return Ok(summary);
                }
            }
            continue;
        };
        summary.records += 1;
        match serde_json::from_str::<TraceRecord>(&line) {
            Err(e) => summary.errors.push(format!("line {}: {e}", i + 1)),
            Ok(rec) => {
                for p in rec.problems(h) {
                    summary.errors.push(format!("line {}: {p}", i + 1));
                }
                if !seen.insert(rec.key()) {
                    summary.errors.push(format!(
                        "line {}: duplicate record for query {}",
                        i + 1,
                        rec.qid
                    ));
                }
                if rec.role == Role::Small {
                    small.insert(rec.qid);
                }
            }
        }
    }
    let Some(h) = header else {
        summary.errors.push("empty trace".into());
        return Ok(summary);
    };
    summary.queries = small.len();
    for &q in &small {
        for &a in &h.actions {
            if !seen.contains(&(q, Role::Large, Some(a))) {
                summary.missing.push((q, a));
            }
        }
    }
    Ok(summary)
}

#[derive(Debug, Clone)]
pub struct TraceBackend {
    pub header: TraceHeader,
    records: HashMap<Key, TraceRecord>,
    compute: ComputeModel,
}

impl TraceBackend {
    pub fn new(
        header: TraceHeader,
        records: Vec<TraceRecord>,
        compute: ComputeModel,
    ) -> Result<Self, BackendError> {
        let mut map = HashMap::with_capacity(records.len());
        for (i, r) in records.into_iter().enumerate() {
            if let Some(p) = r.problems(&header).into_iter().next() {
                return Err(BackendError::Trace {
                    line: i + 2,
                    message: p,
                });
            }
            if map.insert(r.key(), r).is_some() {
                return Err(BackendError::Trace {
                    line: i + 2,
                    message: "duplicate record".into(),
                });
            }
        }
        Ok(Self {
            header,
            records: map,
            compute,
        })
    }

    pub fn open(path: &Path, compute: ComputeModel) -> Result<Self, BackendError> {
        let (h, r) = read_trace_file(path)?;
        Self::new(h, r, compute)
    }

    pub fn record(
        &self,
        qid: u64,
        role: Role,
        density: Option<u32>,
    ) -> Result<&TraceRecord, BackendError> {
        self.records
            .get(&(qid, role, density))
            .ok_or(BackendError::MissingRecord { qid, role, density })
    }

    /// One query per small-role record, in id order.
    pub fn queries(&self) -> Vec<Query> {
        let small: BTreeMap<u64, &TraceRecord> = self
            .records
            .values()
            .filter(|r| r.role == Role::Small)
            .map(|r| (r.qid, r))
            .collect();
        small
            .into_values()
            .map(|r| Query {
                id: r.qid,
                video: VideoRef::Trace(r.qid.to_string()),
                question: r
                    .question
                    .clone()
                    .unwrap_or_else(|| format!("trace question {}", r.qid)),
                options: r.options.clone(),
            })
            .collect()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

impl ModelBackend for TraceBackend {
    /// Recorded frames stand for the whole video: every one a keyframe, 1 FPS.
    fn video_metadata(&self, query: &Query) -> Result<VideoMetadata, BackendError> {
        let r = self.record(query.id, Role::Small, None)?;
        let n = r.n_frames as u64;
        Ok(VideoMetadata::new(
            n,
            FrameRate::integer(1),
            (0..n).collect(),
        ))
    }

    fn encode_frames(&self, query: &Query, frames: &[u64]) -> Result<TokenTensor, BackendError> {
        let r = self.record(query.id, Role::Small, None)?;
        let tpf = self.header.raw_tokens_per_frame;
        let dim = r.h_txt.len();
        let mut data = Vec::with_capacity(frames.len() * tpf * dim);
        for &f in frames {
            let f = f as usize;
            if f >= r.n_frames {
                return Err(BackendError::FrameOutOfRange {
                    frame: f as u64,
                    frames: r.n_frames,
                });
            }
            for row in &r.h_vis[f * tpf..(f + 1) * tpf] {
                data.extend_from_slice(row);
            }
        }
        Ok(TokenTensor::new(
            frames.len(),
            tpf,
            dim,
            DEFAULT_CLIP_SIZE,
            data,
        )?)
    }

    fn answer(&self, req: &BackendRequest<'_>) -> Result<BackendResponse, BackendError> {
        let density = match req.role {
            Role::Small => None,
            Role::Large => req.density.map(|a| a.density),
        };
        let r = self.record(req.query_id, req.role, density)?;
        let logits = LogitVector::new(r.logits.clone());
        let correct =
            r.gt.and_then(|g| r.options.iter().position(|&o| o == g))
                .map(|g| logits.argmax() == g);
        Ok(BackendResponse {
            question_embeddings: match req.role {
                Role::Small => vec![r.h_txt.clone()],
                Role::Large => Vec::new(),
            },
            logits,
            compute_ms: r.t_ms,
            correct,
        })
    }

    fn compute(&self) -> &ComputeModel {
        &self.compute
    }

    fn raw_tokens_per_frame(&self) -> usize {
        self.header.raw_tokens_per_frame
    }

    fn ground_truth(&self, query: &Query) -> Option<usize> {
        let r = self.record(query.id, Role::Small, None).ok()?;
        r.gt.and_then(|g| r.options.iter().position(|&o| o == g))
    }
}
