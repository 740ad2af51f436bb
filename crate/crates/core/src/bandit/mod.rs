//! Neural linear bandit for choosing the offloaded token density.

mod bundle;
mod linear;
mod mlp;

use std::io::{BufRead, Write};

use rand::rngs::StdRng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use bundle::{read_bundle, write_bundle, ModelBundle, BUNDLE_MAGIC, BUNDLE_VERSION};
pub use linear::{compute_reward, proxy_bit, ArmScore, ArmState, BanditState, Reward, Selection};
pub use mlp::{
    sigmoid, train_extractor, train_network, Extractor, ExtractorConfig, FrozenLayer, Gradients,
    Network, Optimizer, TrainReport, MIN_PROFILING_ROWS,
};

use crate::config::SystemConfig;
use crate::features::ContextVector;
use crate::types::Action;

#[derive(Debug, Error)]
pub enum BanditError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("row {row}: density {density} is not in the action set")]
    UnknownAction { row: usize, density: u32 },
    #[error("profiling dataset is empty")]
    EmptyDataset,
    #[error("arm {0} is not positive definite")]
    SingularArm(u32),
    #[error("prior precision must be positive, got {0}")]
    InvalidPrior(f64),
    #[error("malformed model: {0}")]
    Shape(String),
    #[error("bad bundle: {0}")]
    Bundle(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("profiling row {line}: {message}")]
    Parse { line: usize, message: String },
}

/// One offline profiling observation: did density `density` answer correctly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfilingRow {
    pub context: Vec<f64>,
    pub density: u32,
    pub label: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ProfilingDataset {
    pub rows: Vec<ProfilingRow>,
}

impl ProfilingDataset {
    pub fn context_dim(&self) -> Option<usize> {
        self.rows.first().map(|r| r.context.len())
    }

    pub fn read_jsonl(reader: impl BufRead) -> Result<Self, BanditError> {
        let mut rows = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let row = serde_json::from_str(&line).map_err(|e| BanditError::Parse {
                line: i + 1,
                message: e.to_string(),
            })?;
            rows.push(row);
        }
        Ok(Self { rows })
    }

    pub fn write_jsonl(&self, mut w: impl Write) -> Result<(), BanditError> {
        for r in &self.rows {
            serde_json::to_writer(&mut w, r).map_err(std::io::Error::from)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }
}

/// Frozen extractor plus arm posteriors, driven by a seeded RNG.
#[derive(Debug, Clone)]
pub struct DensityPolicy {
    pub extractor: Extractor,
    pub state: BanditState,
    pub lambda: f64,
    pub alpha: f64,
    rng: StdRng,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyDecision {
    pub action: Action,
    pub latent: Vec<f64>,
    pub scores: Vec<ArmScore>,
}

impl DensityPolicy {
    pub fn new(extractor: Extractor, state: BanditState, cfg: &SystemConfig) -> Self {
        Self {
            extractor,
            state,
            lambda: cfg.lambda_tradeoff,
            alpha: cfg.alpha_ts,
            rng: StdRng::seed_from_u64(cfg.seed ^ 0x00BA_4D17),
        }
    }

    pub fn reseed(&mut self, seed: u64) {
        self.rng = StdRng::seed_from_u64(seed);
    }

    pub fn choose(&mut self, ctx: &ContextVector) -> Result<PolicyDecision, BanditError> {
        let latent = self.extractor.forward(&ctx.to_vec())?;
        let sel = self.state.select_action(
            &latent,
            ctx.n_frames as usize,
            self.lambda,
            self.alpha,
            &mut self.rng,
        )?;
        Ok(PolicyDecision {
            action: sel.action,
            latent,
            scores: sel.scores,
        })
    }

    pub fn observe(
        &mut self,
        action: Action,
        latent: &[f64],
        bit: bool,
    ) -> Result<(), BanditError> {
        self.state.update(action, latent, bit)
    }
}
