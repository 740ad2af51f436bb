//! Repeated-seed benchmark runs and their reports.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{
    prepare_models, split_profiling, tokenize_keyframes_sequential, EdgeLink, EdgeService,
    HarnessError, Orchestrator, QueryOutcome, SimulatedLink, Solution,
};
use crate::backends::{
    BackendRequest, ModelBackend, Role, SyntheticBackend, SyntheticProfile, TraceBackend,
    TraceHeader, TraceRecord,
};
use crate::bandit::ExtractorConfig;
use crate::config::SystemConfig;
use crate::features::pool_text;
use crate::token_ops::merge_to_density;
use crate::types::{DelayBreakdown, Query};

#[derive(Clone)]
#[allow(clippy::large_enum_variant)]
pub enum BenchSource {
    /// A fresh synthetic population per run, seeded by the run seed.
    Synthetic(SyntheticProfile),
    /// The same recorded queries every run; only the split and policy seeds change.
    Trace(Arc<TraceBackend>),
}

#[derive(Clone)]
pub struct BenchSpec {
    pub source: BenchSource,
    /// Queries per run for synthetic sources.
    pub queries: usize,
    pub runs: usize,
    pub seed: u64,
    pub profiling_ratio: f64,
    pub solutions: Vec<Solution>,
    pub native_density: u32,
    pub config: SystemConfig,
    pub extractor: ExtractorConfig,
    /// Points kept in each exported delay CDF.
    pub cdf_points: usize,
}

impl BenchSpec {
    pub fn synthetic(profile: SyntheticProfile, queries: usize) -> Self {
        let config = SystemConfig::default();
        Self {
            source: BenchSource::Synthetic(profile),
            queries,
            runs: 5,
            seed: 0,
            profiling_ratio: 0.3,
            solutions: Solution::baselines().to_vec(),
            native_density: 16,
            extractor: ExtractorConfig::from_system(&config),
            config,
            cdf_points: 200,
        }
    }

    pub fn trace(trace: Arc<TraceBackend>) -> Self {
        let n = trace.queries().len();
        Self {
            source: BenchSource::Trace(trace),
            ..Self::synthetic(SyntheticProfile::default(), n)
        }
    }
}

/// One solution in one seeded run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub run: usize,
    pub seed: u64,
    pub answered: usize,
    pub skipped: usize,
    pub accuracy: f64,
    pub mean_delay_ms: f64,
    pub offload_fraction: f64,
    pub small_temperature: f64,
    pub large_temperature: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolutionReport {
    pub solution: Solution,
    pub answered: usize,
    pub skipped: usize,
    pub degraded: usize,
    /// Mean of the per-run accuracies and their sample standard deviation.
    pub accuracy_mean: f64,
    pub accuracy_std: f64,
    pub delay_mean_ms: f64,
    pub delay_p50_ms: f64,
    pub delay_p90_ms: f64,
    pub delay_p99_ms: f64,
    /// Per-stage means over every answered query.
    pub breakdown: DelayBreakdown,
    pub offload_fraction: f64,
    /// Offloaded token density -> query count.
    pub density_histogram: BTreeMap<u32, usize>,
    pub max_accounting_error_ms: f64,
    /// Mean decision plus merge/compress time over mean total delay.
    pub overhead_fraction: f64,
    /// Evenly spaced quantiles of the total delay, ascending.
    pub delay_cdf_ms: Vec<f64>,
    pub runs: Vec<RunSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub runs: usize,
    pub seed: u64,
    pub profiling_ratio: f64,
    pub queries_per_run: usize,
    pub solutions: Vec<SolutionReport>,
}

impl BenchReport {
    pub fn solution(&self, s: Solution) -> Option<&SolutionReport> {
        self.solutions.iter().find(|r| r.solution == s)
    }
}

/// Serves `queries` in order. Trace gaps are counted and skipped.
pub fn run_solution(
    orch: &mut Orchestrator,
    queries: &[Query],
    solution: Solution,
    link: &mut dyn EdgeLink,
) -> Result<(Vec<QueryOutcome>, usize), HarnessError> {
    let mut outcomes = Vec::with_capacity(queries.len());
    let mut skipped = 0;
    for q in queries {
        match orch.answer_query(q, solution, link) {
            Ok(o) => outcomes.push(o),
            Err(e) if e.is_missing_record() => {
                log::warn!("query {} skipped: {e}", q.id);
                skipped += 1;
            }
            Err(e) => return Err(e),
        }
    }
    Ok((outcomes, skipped))
}

/// Nearest-rank percentile of sorted data.
fn percentile(sorted: &[f64], p: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let rank = ((p / 100.0) * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

/// Aggregates one run; `temps` are the fitted (small, large) temperatures.
pub fn run_summary(
    run: usize,
    seed: u64,
    outcomes: &[QueryOutcome],
    skipped: usize,
    temps: (f64, f64),
) -> RunSummary {
    let n = outcomes.len().max(1) as f64;
    RunSummary {
        run,
        seed,
        answered: outcomes.len(),
        skipped,
        accuracy: outcomes.iter().filter(|o| o.correct == Some(true)).count() as f64 / n,
        mean_delay_ms: mean(outcomes.iter().map(|o| o.delay.total_ms)),
        offload_fraction: outcomes.iter().filter(|o| o.escalated).count() as f64 / n,
        small_temperature: temps.0,
        large_temperature: temps.1,
    }
}

/// Pools the outcomes of every run of one solution.
pub fn summarize(
    solution: Solution,
    runs: &[(RunSummary, Vec<QueryOutcome>)],
    cdf_points: usize,
) -> SolutionReport {
    let all: Vec<&QueryOutcome> = runs.iter().flat_map(|(_, o)| o).collect();
    let mut totals: Vec<f64> = all.iter().map(|o| o.delay.total_ms).collect();
    totals.sort_by(f64::total_cmp);
    let mut breakdown = DelayBreakdown::default();
    for o in &all {
        breakdown.add(&o.delay);
    }
    breakdown.scale(1.0 / all.len().max(1) as f64);
    let mut density_histogram = BTreeMap::new();
    for o in &all {
        if let Some(a) = o.density.filter(|_| o.escalated && !o.degraded) {
            *density_histogram.entry(a).or_insert(0) += 1;
        }
    }
    let accs: Vec<f64> = runs.iter().map(|(s, _)| s.accuracy).collect();
    let acc_mean = mean(accs.iter().copied());
    let acc_std = if accs.len() > 1 {
        (accs.iter().map(|a| (a - acc_mean).powi(2)).sum::<f64>() / (accs.len() - 1) as f64).sqrt()
    } else {
        0.0
    };
    let delay_cdf_ms = match (totals.len(), cdf_points) {
        (0, _) | (_, 0) => Vec::new(),
        (n, k) if n <= k => totals.clone(),
        (n, k) => (0..k)
            .map(|i| totals[i * (n - 1) / (k - 1).max(1)])
            .collect(),
    };
    SolutionReport {
        solution,
        answered: all.len(),
        skipped: runs.iter().map(|(s, _)| s.skipped).sum(),
        degraded: all.iter().filter(|o| o.degraded).count(),
        accuracy_mean: acc_mean,
        accuracy_std: acc_std,
        delay_mean_ms: breakdown.total_ms,
        delay_p50_ms: percentile(&totals, 50.0),
        delay_p90_ms: percentile(&totals, 90.0),
        delay_p99_ms: percentile(&totals, 99.0),
        offload_fraction: all.iter().filter(|o| o.escalated).count() as f64
            / all.len().max(1) as f64,
        density_histogram,
        max_accounting_error_ms: all
            .iter()
            .map(|o| o.delay.accounting_error())
            .fold(0.0, f64::max),
        overhead_fraction: (breakdown.decision_ms + breakdown.merge_compress_ms)
            / breakdown.total_ms,
        breakdown,
        delay_cdf_ms,
        runs: runs.iter().map(|(s, _)| s.clone()).collect(),
    }
}

/// Runs every solution on `spec.runs` seeded splits. Each solution starts
/// from the same prepared models, and the policy learns online only within
/// its own run.
pub fn run_benchmark(spec: &BenchSpec) -> Result<BenchReport, HarnessError> {
    if spec.runs == 0 {
        return Err(HarnessError::Invalid("at least one run is required".into()));
    }
    let mut per_solution: Vec<Vec<(RunSummary, Vec<QueryOutcome>)>> =
        vec![Vec::new(); spec.solutions.len()];
    let mut queries_per_run = 0;
    for run in 0..spec.runs {
        let seed = spec.seed.wrapping_add(run as u64);
        let (backend, queries): (Arc<dyn ModelBackend>, Vec<Query>) = match &spec.source {
            BenchSource::Synthetic(profile) => {
                let b = SyntheticBackend::new(SyntheticProfile {
                    seed,
                    ..profile.clone()
                })?;
                let q = b.queries(0, spec.queries);
                (Arc::new(b), q)
            }
            BenchSource::Trace(t) => (t.clone(), t.queries()),
        };
        queries_per_run = queries.len();
        let (profiling, test) = split_profiling(&queries, spec.profiling_ratio, seed)?;
        let cfg = SystemConfig {
            seed,
            ..spec.config.clone()
        };
        let extractor = ExtractorConfig {
            seed,
            ..spec.extractor.clone()
        };
        let models = prepare_models(backend.as_ref(), &profiling, &cfg, &extractor)?;
        let temps = (
            models.small_temperature.temperature,
            models.large_temperature.temperature,
        );
        for (k, &solution) in spec.solutions.iter().enumerate() {
            let mut orch = Orchestrator::from_models(
                cfg.clone(),
                backend.clone(),
                &models,
                spec.native_density,
            );
            let mut link = SimulatedLink {
                service: EdgeService::new(backend.clone(), models.large_temperature.clone()),
                network: cfg.network,
                response_bytes: backend.compute().response_bytes,
            };
            let (outcomes, skipped) = run_solution(&mut orch, &test, solution, &mut link)?;
            per_solution[k].push((
                run_summary(run, seed, &outcomes, skipped + models.skipped, temps),
                outcomes,
            ));
        }
    }
    Ok(BenchReport {
        runs: spec.runs,
        seed: spec.seed,
        profiling_ratio: spec.profiling_ratio,
        queries_per_run,
        solutions: spec
            .solutions
            .iter()
            .zip(&per_solution)
            .map(|(&s, runs)| summarize(s, runs, spec.cdf_points))
            .collect(),
    })
}

/// Records what the synthetic models produce for `queries` as a replayable
/// trace: the small model on raw tokens, the large one at every density.
pub fn export_trace(
    backend: &SyntheticBackend,
    queries: &[Query],
    cfg: &SystemConfig,
) -> Result<(TraceHeader, Vec<TraceRecord>), HarnessError> {
    let header = TraceHeader::new(
        cfg.actions.densities().to_vec(),
        backend.raw_tokens_per_frame(),
    );
    let mut records = Vec::with_capacity(queries.len() * (1 + cfg.actions.len()));
    for q in queries {
        let tk = tokenize_keyframes_sequential(backend, q, cfg)?;
        let gt = backend.ground_truth(q).map(|i| q.options[i]);
        let small = backend.answer(&BackendRequest {
            query_id: q.id,
            question: &q.question,
            options: &q.options,
            role: Role::Small,
            density: None,
            tokens: &tk.tokens,
        })?;
        let h_txt = pool_text(&small.question_embeddings)?;
        records.push(TraceRecord {
            qid: q.id,
            role: Role::Small,
            density: None,
            options: q.options.clone(),
            gt,
            logits: small.logits.values,
            h_txt: h_txt.iter().map(|&v| v as f32).collect(),
            h_vis: tk.tokens.tokens().map(<[f32]>::to_vec).collect(),
            n_frames: tk.tokens.frames,
            t_ms: small.compute_ms,
            question: Some(q.question.clone()),
        });
        for a in cfg.actions.iter() {
            let merged = merge_to_density(&tk.tokens, a)?;
            let r = backend.answer(&BackendRequest {
                query_id: q.id,
                question: &q.question,
                options: &q.options,
                role: Role::Large,
                density: Some(a),
                tokens: &merged.tokens,
            })?;
            records.push(TraceRecord {
                qid: q.id,
                role: Role::Large,
                density: Some(a.density),
                options: q.options.clone(),
                gt,
                logits: r.logits.values,
                h_txt: Vec::new(),
                h_vis: Vec::new(),
                n_frames: tk.tokens.frames,
                t_ms: r.compute_ms,
                question: None,
            });
        }
    }
    Ok((header, records))
}
