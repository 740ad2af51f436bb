//! Shared domain types.
//!
//! Everything here is a plain value type: cheap to clone, immutable once
//! validated and safe to share across threads.

use std::fmt;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Largest option set accepted by any benchmark (letters `A`..=`F`).
pub const MAX_OPTIONS: usize = 6;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TypeError {
    #[error("question must not be empty")]
    EmptyQuestion,
    #[error("expected 2..={MAX_OPTIONS} options, got {0}")]
    OptionCount(usize),
    #[error("option letter {0:?} outside 'A'..='F'")]
    OptionLetter(char),
    #[error("duplicate option letter {0:?}")]
    DuplicateOption(char),
    #[error("invalid video metadata: {0}")]
    Metadata(String),
    #[error("tensor shape {frames}x{tokens_per_frame}x{dim} does not match {len} values")]
    ShapeMismatch {
        frames: usize,
        tokens_per_frame: usize,
        dim: usize,
        len: usize,
    },
    #[error("tensor contains a non-finite value at position {0}")]
    NonFinite(usize),
    #[error("tensor dimensions must be positive")]
    EmptyTensor,
    #[error("action set: {0}")]
    ActionSet(String),
}

/// Where a query's video lives.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VideoRef {
    Path(PathBuf),
    Trace(String),
    Synthetic(u64),
}

/// Unit of service: one video, one closed-ended question, its option letters.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Query {
    pub id: u64,
    pub video: VideoRef,
    pub question: String,
    pub options: Vec<char>,
}

impl Query {
    pub fn new(
        id: u64,
        video: VideoRef,
        question: impl Into<String>,
        options: Vec<char>,
    ) -> Result<Self, TypeError> {
        let q = Self {
            id,
            video,
            question: question.into(),
            options,
        };
        q.validate()?;
        Ok(q)
    }

    pub fn validate(&self) -> Result<(), TypeError> {
        if self.question.trim().is_empty() {
            return Err(TypeError::EmptyQuestion);
        }
        validate_options(&self.options)
    }
}

/// Checks an option list: 2..=6 unique letters from `A`..=`F`.
pub fn validate_options(options: &[char]) -> Result<(), TypeError> {
    if !(2..=MAX_OPTIONS).contains(&options.len()) {
        return Err(TypeError::OptionCount(options.len()));
    }
    for (i, &c) in options.iter().enumerate() {
        if !('A'..='F').contains(&c) {
            return Err(TypeError::OptionLetter(c));
        }
        if options[..i].contains(&c) {
            return Err(TypeError::DuplicateOption(c));
        }
    }
    Ok(())
}

/// The first `n` option letters, `A` onwards.
pub fn option_letters(n: usize) -> Vec<char> {
    (0..n.min(MAX_OPTIONS))
        .map(|i| (b'A' + i as u8) as char)
        .collect()
}

/// Frame rate as a reduced rational `num / den`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FrameRate {
    pub num: u64,
    pub den: u64,
}

impl FrameRate {
    pub fn new(num: u64, den: u64) -> Self {
        assert!(den > 0, "frame rate denominator must be positive");
        let g = gcd(num, den).max(1);
        Self {
            num: num / g,
            den: den / g,
        }
    }

    pub fn integer(fps: u64) -> Self {
        Self::new(fps, 1)
    }

    /// Nearest rational with denominator 1000 (exact for integer and
    /// NTSC-style rates such as 29.97).
    pub fn from_f64(fps: f64) -> Option<Self> {
        if !fps.is_finite() || fps <= 0.0 {
            return None;
        }
        let num = (fps * 1000.0).round();
        if num < 1.0 || num > u64::MAX as f64 {
            return None;
        }
        Some(Self::new(num as u64, 1000))
    }

    pub fn as_f64(&self) -> f64 {
        self.num as f64 / self.den as f64
    }

    /// Frames per second rounded half-up; the 1 FPS sampling stride.
    pub fn rounded(&self) -> u64 {
        (2 * self.num + self.den) / (2 * self.den)
    }
}

impl fmt::Display for FrameRate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.den == 1 {
            write!(f, "{}", self.num)
        } else {
            write!(f, "{}/{}", self.num, self.den)
        }
    }
}

fn gcd(mut a: u64, mut b: u64) -> u64 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

/// Container-level facts needed by the frame sampler.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoMetadata {
    pub frame_count: u64,
    pub fps: FrameRate,
    /// 0-based, strictly increasing random-access points.
    pub keyframe_indices: Vec<u64>,
    pub duration_s: f64,
}

impl VideoMetadata {
    /// Builds metadata whose duration is derived from `frame_count / fps`.
    pub fn new(frame_count: u64, fps: FrameRate, keyframe_indices: Vec<u64>) -> Self {
        let duration_s = frame_count as f64 / fps.as_f64();
        Self {
            frame_count,
            fps,
            keyframe_indices,
            duration_s,
        }
    }

    pub fn validate(&self) -> Result<(), TypeError> {
        let bad = |m: String| Err(TypeError::Metadata(m));
        if self.frame_count == 0 {
            return bad("frame_count must be >= 1".into());
        }
        if self.fps.num == 0 || self.fps.den == 0 {
            return bad("fps must be positive".into());
        }
        match self.keyframe_indices.first() {
            None => return bad("keyframe list is empty".into()),
            Some(&k) if k != 0 => return bad(format!("first keyframe is {k}, expected 0")),
            _ => {}
        }
        for w in self.keyframe_indices.windows(2) {
            if w[1] <= w[0] {
                return bad(format!("keyframes not strictly increasing at {}", w[1]));
            }
        }
        if let Some(&last) = self.keyframe_indices.last() {
            if last >= self.frame_count {
                return bad(format!(
                    "keyframe {last} beyond frame_count {}",
                    self.frame_count
                ));
            }
        }
        let period = 1.0 / self.fps.as_f64();
        let expected = self.frame_count as f64 * period;
        if !(self.duration_s.is_finite() && (self.duration_s - expected).abs() <= period + 1e-9) {
            return bad(format!(
                "duration {:.3}s inconsistent with {} frames at {} fps",
                self.duration_s, self.frame_count, self.fps
            ));
        }
        Ok(())
    }
}

/// Which branch of the keyframe-aligned sampler produced the indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SampleSource {
    AllFrames,
    Keyframes,
    KeyframeSubsample,
    FixedRateFallback,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleIndices {
    pub indices: Vec<u64>,
    pub source: SampleSource,
}

impl SampleIndices {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Vision tokens, row-major `frames x tokens_per_frame x dim`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenTensor {
    pub frames: usize,
    pub tokens_per_frame: usize,
    pub dim: usize,
    /// Frames per clip; clips group consecutive frames.
    pub clip_size: usize,
    pub data: Vec<f32>,
}

pub const DEFAULT_CLIP_SIZE: usize = 4;

impl TokenTensor {
    pub fn new(
        frames: usize,
        tokens_per_frame: usize,
        dim: usize,
        clip_size: usize,
        data: Vec<f32>,
    ) -> Result<Self, TypeError> {
        let t = Self {
            frames,
            tokens_per_frame,
            dim,
            clip_size,
            data,
        };
        t.validate()?;
        Ok(t)
    }

    pub fn zeros(frames: usize, tokens_per_frame: usize, dim: usize) -> Self {
        Self {
            frames,
            tokens_per_frame,
            dim,
            clip_size: DEFAULT_CLIP_SIZE,
            data: vec![0.0; frames * tokens_per_frame * dim],
        }
    }

    pub fn validate(&self) -> Result<(), TypeError> {
        if self.frames == 0 || self.tokens_per_frame == 0 || self.dim == 0 || self.clip_size == 0 {
            return Err(TypeError::EmptyTensor);
        }
        let expected = self
            .frames
            .checked_mul(self.tokens_per_frame)
            .and_then(|v| v.checked_mul(self.dim));
        if expected != Some(self.data.len()) {
            return Err(TypeError::ShapeMismatch {
                frames: self.frames,
                tokens_per_frame: self.tokens_per_frame,
                dim: self.dim,
                len: self.data.len(),
            });
        }
        if let Some(pos) = self.data.iter().position(|v| !v.is_finite()) {
            return Err(TypeError::NonFinite(pos));
        }
        Ok(())
    }

    pub fn num_tokens(&self) -> usize {
        self.frames * self.tokens_per_frame
    }

    pub fn token(&self, index: usize) -> &[f32] {
        &self.data[index * self.dim..(index + 1) * self.dim]
    }

    pub fn tokens(&self) -> impl Iterator<Item = &[f32]> {
        self.data.chunks_exact(self.dim)
    }

    pub fn frame(&self, frame: usize) -> &[f32] {
        let stride = self.tokens_per_frame * self.dim;
        &self.data[frame * stride..(frame + 1) * stride]
    }

    /// `ceil(frames / clip_size)`.
    pub fn num_clips(&self) -> usize {
        self.frames.div_ceil(self.clip_size)
    }

    /// Token index range covered by clip `t`.
    pub fn clip_tokens(&self, clip: usize) -> std::ops::Range<usize> {
        let first = clip * self.clip_size;
        let last = ((clip + 1) * self.clip_size).min(self.frames);
        first * self.tokens_per_frame..last * self.tokens_per_frame
    }

    /// Concatenates tensors along the frame axis. All parts must agree on
    /// `tokens_per_frame`, `dim` and `clip_size`.
    pub fn concat_frames(parts: &[TokenTensor]) -> Result<Self, TypeError> {
        let first = parts.first().ok_or(TypeError::EmptyTensor)?;
        let mut data = Vec::with_capacity(parts.iter().map(|p| p.data.len()).sum());
        let mut frames = 0;
        for p in parts {
            if p.tokens_per_frame != first.tokens_per_frame
                || p.dim != first.dim
                || p.clip_size != first.clip_size
            {
                return Err(TypeError::ShapeMismatch {
                    frames: p.frames,
                    tokens_per_frame: p.tokens_per_frame,
                    dim: p.dim,
                    len: p.data.len(),
                });
            }
            frames += p.frames;
            data.extend_from_slice(&p.data);
        }
        Ok(Self {
            frames,
            tokens_per_frame: first.tokens_per_frame,
            dim: first.dim,
            clip_size: first.clip_size,
            data,
        })
    }

    /// Size of the uncompressed little-endian body in bytes.
    pub fn raw_bytes(&self) -> usize {
        self.data.len() * std::mem::size_of::<f32>()
    }
}

/// Raw logits of the option letters, aligned with `Query::options`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LogitVector {
    pub values: Vec<f64>,
}

impl LogitVector {
    pub fn new(values: Vec<f64>) -> Self {
        Self { values }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Index of the largest logit; the first one wins ties.
    pub fn argmax(&self) -> usize {
        argmax(&self.values)
    }
}

pub(crate) fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Temperature-scaled option distribution with its summary statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibratedDistribution {
    pub probs: Vec<f64>,
    pub confidence: f64,
    pub margin: f64,
    pub entropy_norm: f64,
    pub temperature: f64,
}

impl CalibratedDistribution {
    pub fn argmax(&self) -> usize {
        argmax(&self.probs)
    }
}

/// Token density: vision tokens kept per frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Action {
    pub density: u32,
}

impl Action {
    pub const fn new(density: u32) -> Self {
        Self { density }
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.density)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<u32>", into = "Vec<u32>")]
pub struct ActionSet {
    densities: Vec<u32>,
}

impl ActionSet {
    pub fn new(densities: Vec<u32>) -> Result<Self, TypeError> {
        if densities.is_empty() {
            return Err(TypeError::ActionSet("must not be empty".into()));
        }
        if densities[0] == 0 {
            return Err(TypeError::ActionSet("densities must be >= 1".into()));
        }
        if densities.windows(2).any(|w| w[1] <= w[0]) {
            return Err(TypeError::ActionSet(
                "densities must be strictly increasing".into(),
            ));
        }
        Ok(Self { densities })
    }

    /// Additionally checks every density fits the raw tokens per frame.
    pub fn validate_for_raw(&self, raw_tokens_per_frame: usize) -> Result<(), TypeError> {
        match self.max() {
            Some(m) if m as usize > raw_tokens_per_frame => Err(TypeError::ActionSet(format!(
                "density {m} exceeds raw tokens per frame {raw_tokens_per_frame}"
            ))),
            _ => Ok(()),
        }
    }

    pub fn len(&self) -> usize {
        self.densities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.densities.is_empty()
    }

    pub fn get(&self, index: usize) -> Option<Action> {
        self.densities.get(index).copied().map(Action::new)
    }

    pub fn iter(&self) -> impl Iterator<Item = Action> + '_ {
        self.densities.iter().copied().map(Action::new)
    }

    pub fn densities(&self) -> &[u32] {
        &self.densities
    }

    pub fn index_of(&self, action: Action) -> Option<usize> {
        self.densities.iter().position(|&d| d == action.density)
    }

    pub fn max(&self) -> Option<u32> {
        self.densities.last().copied()
    }
}

impl Default for ActionSet {
    fn default() -> Self {
        Self {
            densities: vec![2, 4, 8, 16, 32],
        }
    }
}

impl TryFrom<Vec<u32>> for ActionSet {
    type Error = TypeError;

    fn try_from(v: Vec<u32>) -> Result<Self, Self::Error> {
        Self::new(v)
    }
}

impl From<ActionSet> for Vec<u32> {
    fn from(a: ActionSet) -> Self {
        a.densities
    }
}

/// Per-query response delay, split by stage. All values in milliseconds.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct DelayBreakdown {
    pub decode_sample_ms: f64,
    pub encode_ms: f64,
    pub local_lm_ms: f64,
    pub decision_ms: f64,
    pub merge_compress_ms: f64,
    pub network_ms: f64,
    pub edge_lm_ms: f64,
    pub total_ms: f64,
}

impl DelayBreakdown {
    pub fn components_sum(&self) -> f64 {
        self.decode_sample_ms
            + self.encode_ms
            + self.local_lm_ms
            + self.decision_ms
            + self.merge_compress_ms
            + self.network_ms
            + self.edge_lm_ms
    }

    /// Sets `total_ms` to the sum of the components.
    pub fn seal(mut self) -> Self {
        self.total_ms = self.components_sum();
        self
    }

    /// `|total - sum(components)|`.
    pub fn accounting_error(&self) -> f64 {
        (self.total_ms - self.components_sum()).abs()
    }

    pub fn add(&mut self, other: &DelayBreakdown) {
        self.decode_sample_ms += other.decode_sample_ms;
        self.encode_ms += other.encode_ms;
        self.local_lm_ms += other.local_lm_ms;
        self.decision_ms += other.decision_ms;
        self.merge_compress_ms += other.merge_compress_ms;
        self.network_ms += other.network_ms;
        self.edge_lm_ms += other.edge_lm_ms;
        self.total_ms += other.total_ms;
    }

    pub fn scale(&mut self, k: f64) {
        self.decode_sample_ms *= k;
        self.encode_ms *= k;
        self.local_lm_ms *= k;
        self.decision_ms *= k;
        self.merge_compress_ms *= k;
        self.network_ms *= k;
        self.edge_lm_ms *= k;
        self.total_ms *= k;
    }
}
