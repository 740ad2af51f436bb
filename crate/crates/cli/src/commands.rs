use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::thread::sleep;
use std::time::Duration;

use anyhow::{bail, ensure, Context, Result};
use serde::Serialize;
use serde_json::json;
use tokenbridge_core::backends::{read_trace_file, Role};
use tokenbridge_core::bandit::{write_bundle, ModelBundle};
use tokenbridge_core::calibration::{constrained_softmax, ece, fit_temperature, TemperatureModel};
use tokenbridge_core::config::ConfigBuilder;
use tokenbridge_core::harness::{
    fit_edge_temperature, prepare_models, run_benchmark, run_solution, run_summary,
    split_profiling, summarize, BenchReport, EdgeService, Orchestrator, Solution,
};
use tokenbridge_core::pipeline::{flow_shop_makespan, run_pipeline, HandlerError};
use tokenbridge_core::probe::probe_path;
use tokenbridge_core::sampler::select_frames;
use tokenbridge_core::{LogitVector, NetworkModel, SystemConfig, TokenTensor};
use tokenbridge_transport::{EdgeServer, TcpLink};

use crate::{BenchKind, Cli, Command, GlobalArgs};

fn load_config(g: &GlobalArgs) -> Result<SystemConfig> {
    let mut cfg = SystemConfig::load(g.config.as_deref()).context("loading config")?;
    if let Some(seed) = g.seed {
        cfg.seed = seed;
    }
    if let Some(n) = &g.network {
        cfg.network = NetworkModel::parse_triplet(n)?;
    }
    // Re-validate after the command-line overrides.
    Ok(ConfigBuilder::from_config(cfg).build()?)
}

fn emit<T: Serialize>(g: &GlobalArgs, value: &T) -> Result<()> {
    match &g.out {
        Some(path) => {
            let mut w = BufWriter::new(
                File::create(path).with_context(|| format!("creating {}", path.display()))?,
            );
            serde_json::to_writer_pretty(&mut w, value)?;
            writeln!(w)?;
            w.flush()?;
        }
        None => {
            let mut out = std::io::stdout().lock();
            serde_json::to_writer_pretty(&mut out, value)?;
            writeln!(out)?;
        }
    }
    Ok(())
}

pub fn run(cli: Cli) -> Result<()> {
    let g = &cli.global;
    let cfg = load_config(g)?;
    match cli.command {
        Command::Probe { video } => emit(g, &probe_path(&video)?),
        Command::Sample {
            video,
            n_min,
            n_max,
        } => {
            let meta = probe_path(&video)?;
            let mut b = ConfigBuilder::from_config(cfg);
            if let Some(v) = n_min {
                b.set("n_min", &(v as i64).into())?;
            }
            if let Some(v) = n_max {
                b.set("n_max", &(v as i64).into())?;
            }
            let cfg = b.build()?;
            let s = select_frames(&meta, &cfg)?;
            emit(
                g,
                &json!({ "indices": s.indices, "source": s.source, "count": s.indices.len(), "frame_count": meta.frame_count }),
            )
        }
        Command::Calibrate { trace, role } => calibrate(g, &cfg, &trace, &role),
        Command::TrainExtractor { profiling } => train(g, &cfg, &profiling),
        Command::ServeEdge {
            listen,
            temperature,
            source,
        } => {
            let (backend, queries) = source.load(cfg.seed)?.backend()?;
            let temperature = match temperature {
                Some(t) => parse_temperature(&t)?,
                None => {
                    let (profiling, _) =
                        split_profiling(&queries, source.profiling_ratio, cfg.seed)?;
                    fit_edge_temperature(backend.as_ref(), &profiling, &cfg)?
                }
            };
            let server = EdgeServer::bind(&listen, EdgeService::new(backend, temperature.clone()))
                .with_context(|| format!("binding {listen}"))?;
            // Scripts read this line to find an ephemeral port.
            println!(
                "listening on {} (large-model T = {:.4})",
                server.local_addr()?,
                temperature.temperature
            );
            std::io::stdout().flush()?;
            server.serve()?;
            Ok(())
        }
        Command::RunDevice {
            edge,
            solution,
            limit,
            source,
        } => {
            let (backend, queries) = source.load(cfg.seed)?.backend()?;
            let (profiling, mut test) =
                split_profiling(&queries, source.profiling_ratio, cfg.seed)?;
            if let Some(n) = limit {
                test.truncate(n);
            }
            let extractor = tokenbridge_core::bandit::ExtractorConfig::from_system(&cfg);
            let models = prepare_models(backend.as_ref(), &profiling, &cfg, &extractor)?;
            let timeout = Duration::from_secs_f64(cfg.offload_timeout_s);
            let mut link = TcpLink::connect(edge.as_str(), timeout)
                .with_context(|| format!("connecting to {edge}"))?;
            let mut orch =
                Orchestrator::from_models(cfg.clone(), backend, &models, source.native_density);
            let (outcomes, skipped) = run_solution(&mut orch, &test, solution, &mut link)?;
            let temps = (
                models.small_temperature.temperature,
                models.large_temperature.temperature,
            );
            let summary = run_summary(0, cfg.seed, &outcomes, skipped + models.skipped, temps);
            let report = BenchReport {
                runs: 1,
                seed: cfg.seed,
                profiling_ratio: source.profiling_ratio,
                queries_per_run: queries.len(),
                solutions: vec![summarize(solution, &[(summary, outcomes)], 200)],
            };
            emit(g, &report)
        }
        Command::Simulate { solution, source } => {
            let spec = source
                .load(cfg.seed)?
                .bench_spec(&source, &cfg, vec![solution], 1);
            emit(g, &run_benchmark(&spec)?)
        }
        Command::Bench {
            kind:
                Some(BenchKind::Pipeline {
                    stage_times,
                    batches,
                    capacity,
                }),
            ..
        } => bench_pipeline(g, &stage_times, batches, capacity),
        Command::Bench {
            kind: None,
            solution,
            runs,
            source,
        } => {
            let solutions = if solution.is_empty() {
                Solution::baselines().to_vec()
            } else {
                solution
            };
            let spec = source
                .load(cfg.seed)?
                .bench_spec(&source, &cfg, solutions, runs);
            let report = run_benchmark(&spec)?;
            for s in &report.solutions {
                eprintln!(
                    "{:<16} accuracy {:.3} ± {:.3}  delay {:>8.1} ms (p90 {:.1})  offload {:>5.1}%",
                    s.solution.to_string(),
                    s.accuracy_mean,
                    s.accuracy_std,
                    s.delay_mean_ms,
                    s.delay_p90_ms,
                    100.0 * s.offload_fraction
                );
            }
            emit(g, &report)
        }
    }
}

fn parse_temperature(s: &str) -> Result<TemperatureModel> {
    if let Ok(t) = s.parse::<f64>() {
        ensure!(t.is_finite() && t > 0.0, "temperature must be positive");
        return Ok(TemperatureModel {
            temperature: t,
            ..TemperatureModel::identity()
        });
    }
    let v: serde_json::Value =
        serde_json::from_slice(&std::fs::read(s).with_context(|| format!("reading {s}"))?)?;
    let t = v["T"]
        .as_f64()
        .with_context(|| format!("{s} has no numeric \"T\""))?;
    parse_temperature(&t.to_string())
}

fn calibrate(g: &GlobalArgs, cfg: &SystemConfig, trace: &Path, role: &str) -> Result<()> {
    let role = if role == "small" {
        Role::Small
    } else {
        Role::Large
    };
    let (_, records) = read_trace_file(trace)?;
    let samples: Vec<(LogitVector, usize)> = records
        .iter()
        .filter(|r| r.role == role)
        .filter_map(|r| {
            let truth = r.options.iter().position(|&c| Some(c) == r.gt)?;
            Some((LogitVector::new(r.logits.clone()), truth))
        })
        .collect();
    ensure!(
        !samples.is_empty(),
        "no {role:?} records with ground truth in {}",
        trace.display()
    );
    let model = fit_temperature(&samples)?;
    let preds = |t: f64| -> Result<Vec<(f64, bool)>> {
        samples
            .iter()
            .map(|(z, y)| {
                let d = constrained_softmax(z, t)?;
                Ok((d.confidence, d.argmax() == *y))
            })
            .collect()
    };
    let before = ece(&preds(1.0)?, cfg.ece_bins);
    let after = ece(&preds(model.temperature)?, cfg.ece_bins);
    emit(
        g,
        &json!({
            "role": role,
            "T": model.temperature,
            "n": samples.len(),
            "fit_nll": model.fit_nll,
            "warning": model.warning,
            "ece_before": before.ece,
            "ece_after": after.ece,
            "bins": after.bins,
            "bins_before": before.bins,
        }),
    )
}

fn train(g: &GlobalArgs, cfg: &SystemConfig, profiling: &Path) -> Result<()> {
    let trace = tokenbridge_core::backends::TraceBackend::open(profiling, Default::default())?;
    let queries = trace.queries();
    let extractor = tokenbridge_core::bandit::ExtractorConfig::from_system(cfg);
    let models = prepare_models(&trace, &queries, cfg, &extractor)?;
    let bundle = ModelBundle {
        extractor: models.extractor.clone(),
        pcas: vec![models.pca_txt.clone(), models.pca_vis.clone()],
        state: models.state.clone(),
    };
    let path = g.out.clone().unwrap_or_else(|| PathBuf::from("model.tbx"));
    let mut w = BufWriter::new(
        File::create(&path).with_context(|| format!("creating {}", path.display()))?,
    );
    write_bundle(&bundle, &mut w)?;
    w.flush()?;
    let summary = json!({
        "bundle": path,
        "queries": queries.len(),
        "skipped": models.skipped,
        "train": models.train,
        "small_temperature": models.small_temperature.temperature,
        "large_temperature": models.large_temperature.temperature,
    });
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(())
}

fn bench_pipeline(g: &GlobalArgs, times: &[f64], batches: usize, capacity: usize) -> Result<()> {
    let &[d, p, e] = times else {
        bail!(
            "--stage-times takes exactly three values, got {}",
            times.len()
        );
    };
    ensure!(
        times.iter().all(|t| t.is_finite() && *t >= 0.0),
        "stage times must be non-negative"
    );
    let nap = |ms: f64| sleep(Duration::from_secs_f64(ms / 1e3));
    let (tokens, report) = run_pipeline(
        (0..batches).collect(),
        |_, b: usize| -> Result<usize, HandlerError> {
            nap(d);
            Ok(b)
        },
        |_, b| -> Result<usize, HandlerError> {
            nap(p);
            Ok(b)
        },
        |_, b| -> Result<TokenTensor, HandlerError> {
            nap(e);
            Ok(TokenTensor::new(1, 1, 1, 1, vec![b as f32])?)
        },
        capacity,
    )
    .map_err(|err| anyhow::anyhow!("{err}"))?;
    ensure!(tokens.frames == batches, "pipeline lost batches");
    emit(
        g,
        &json!({
            "report": report,
            "flow_shop_ms": flow_shop_makespan(&vec![[d, p, e]; batches]),
        }),
    )
}
