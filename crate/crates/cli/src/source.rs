//! Where queries come from: a recorded trace or a synthetic profile.

use std::path::PathBuf;
use std::sync::Arc;

use anyhow::{Context, Result};
use clap::Args;
use tokenbridge_core::backends::{
    ComputeModel, ModelBackend, SyntheticBackend, SyntheticProfile, TraceBackend,
};
use tokenbridge_core::harness::{BenchSpec, Solution};
use tokenbridge_core::{Query, SystemConfig};

#[derive(Args, Clone, Debug)]
pub struct SourceArgs {
    /// Replay a recorded trace instead of the synthetic models.
    #[arg(long, conflicts_with_all = ["profile", "queries", "agreement", "gamma"])]
    pub trace: Option<PathBuf>,
    /// Synthetic profile as JSON; missing fields keep their defaults.
    #[arg(long)]
    pub profile: Option<PathBuf>,
    /// Synthetic queries per run.
    #[arg(long)]
    pub queries: Option<usize>,
    /// Target small/large answer agreement of the synthetic models.
    #[arg(long)]
    pub agreement: Option<f64>,
    /// Logit scale of the synthetic models; above 1 is overconfident.
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long, default_value_t = 0.3)]
    pub profiling_ratio: f64,
    /// Density used by the baselines that do not choose one.
    #[arg(long, default_value_t = 16)]
    pub native_density: u32,
}

pub const DEFAULT_QUERIES: usize = 2000;

#[allow(clippy::large_enum_variant)]
pub enum Source {
    Synthetic {
        profile: SyntheticProfile,
        queries: usize,
    },
    Trace(Arc<TraceBackend>),
}

impl SourceArgs {
    pub fn load(&self, seed: u64) -> Result<Source> {
        if let Some(path) = &self.trace {
            let t = TraceBackend::open(path, ComputeModel::default())
                .with_context(|| format!("loading trace {}", path.display()))?;
            return Ok(Source::Trace(Arc::new(t)));
        }
        let mut profile: SyntheticProfile = match &self.profile {
            Some(p) => serde_json::from_slice(
                &std::fs::read(p).with_context(|| format!("reading {}", p.display()))?,
            )
            .with_context(|| format!("parsing profile {}", p.display()))?,
            None => SyntheticProfile::default(),
        };
        profile.seed = seed;
        if let Some(a) = self.agreement {
            profile.agreement = Some(a);
        }
        if let Some(g) = self.gamma {
            profile.gamma = g;
        }
        Ok(Source::Synthetic {
            profile,
            queries: self.queries.unwrap_or(DEFAULT_QUERIES),
        })
    }
}

impl Source {
    pub fn backend(&self) -> Result<(Arc<dyn ModelBackend>, Vec<Query>)> {
        Ok(match self {
            Source::Synthetic { profile, queries } => {
                let b = SyntheticBackend::new(profile.clone())?;
                let q = b.queries(0, *queries);
                (Arc::new(b), q)
            }
            Source::Trace(t) => (t.clone(), t.queries()),
        })
    }

    pub fn bench_spec(
        self,
        args: &SourceArgs,
        cfg: &SystemConfig,
        solutions: Vec<Solution>,
        runs: usize,
    ) -> BenchSpec {
        let mut spec = match self {
            Source::Synthetic { profile, queries } => BenchSpec::synthetic(profile, queries),
            Source::Trace(t) => BenchSpec::trace(t),
        };
        spec.runs = runs;
        spec.seed = cfg.seed;
        spec.profiling_ratio = args.profiling_ratio;
        spec.native_density = args.native_density;
        spec.solutions = solutions;
        spec.extractor = tokenbridge_core::bandit::ExtractorConfig::from_system(cfg);
        spec.config = cfg.clone();
        spec
    }
}
