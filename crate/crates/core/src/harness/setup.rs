//! Offline preparation on the profiling split: temperatures, PCA bases, the
//! frozen extractor and the warm-started arms.

use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::SeedableRng;

use super::{tokenize_keyframes_sequential, HarnessError};
use crate::backends::{BackendRequest, ModelBackend, Role};
use crate::bandit::{
    train_extractor, BanditState, Extractor, ExtractorConfig, ProfilingDataset, ProfilingRow,
    TrainReport,
};
use crate::calibration::{fit_temperature, TemperatureModel};
use crate::config::SystemConfig;
use crate::features::{
    clip_relevance, fit_pca, pool_text, pool_vision, spectral_complexity, ContextVector, PcaModel,
};
use crate::token_ops::merge_to_density;
use crate::types::{LogitVector, Query};

/// Seeded uniform split into `(profiling, test)`; both keep input order.
pub fn split_profiling<T: Clone>(
    items: &[T],
    ratio: f64,
    seed: u64,
) -> Result<(Vec<T>, Vec<T>), HarnessError> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(HarnessError::InvalidRatio(ratio));
    }
    let mut idx: Vec<usize> = (0..items.len()).collect();
    idx.shuffle(&mut StdRng::seed_from_u64(seed));
    let n_prof = (ratio * items.len() as f64).round() as usize;
    let mut in_prof = vec![false; items.len()];
    for &i in &idx[..n_prof] {
        in_prof[i] = true;
    }
    let mut prof = Vec::with_capacity(n_prof);
    let mut test = Vec::with_capacity(items.len() - n_prof);
    for (item, p) in items.iter().zip(in_prof) {
        if p {
            prof.push(item.clone());
        } else {
            test.push(item.clone());
        }
    }
    Ok((prof, test))
}

#[derive(Debug, Clone)]
pub struct PreparedModels {
    pub small_temperature: TemperatureModel,
    pub large_temperature: TemperatureModel,
    pub pca_txt: PcaModel,
    pub pca_vis: PcaModel,
    pub extractor: Extractor,
    pub state: BanditState,
    pub train: TrainReport,
    pub profiling: ProfilingDataset,
    /// Profiling queries dropped for missing records or ground truth.
    pub skipped: usize,
}

/// Everything context-related that does not depend on the fitted models.
struct Observation {
    small: LogitVector,
    truth: usize,
    h_txt: Vec<f64>,
    h_vis: Vec<f64>,
    n_frames: usize,
    s_max: f64,
    s_mean: f64,
    s_cplx: f64,
    large: Vec<LogitVector>,
}

fn observe(
    backend: &dyn ModelBackend,
    q: &Query,
    cfg: &SystemConfig,
) -> Result<Option<Observation>, HarnessError> {
    let Some(truth) = backend.ground_truth(q) else {
        return Ok(None);
    };
    let tk = tokenize_keyframes_sequential(backend, q, cfg)?;
    let small = backend.answer(&BackendRequest {
        query_id: q.id,
        question: &q.question,
        options: &q.options,
        role: Role::Small,
        density: None,
        tokens: &tk.tokens,
    })?;
    let h_txt = pool_text(&small.question_embeddings)?;
    let rel = clip_relevance(&h_txt, &tk.tokens)?;
    let s_cplx = spectral_complexity(&tk.tokens, &rel.scores, cfg.top_clips)?;
    let mut large = Vec::with_capacity(cfg.actions.len());
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
        large.push(r.logits);
    }
    Ok(Some(Observation {
        small: small.logits,
        truth,
        h_vis: pool_vision(&tk.tokens)?,
        h_txt,
        n_frames: tk.tokens.frames,
        s_max: rel.s_max,
        s_mean: rel.s_mean,
        s_cplx,
        large,
    }))
}

/// Fits every offline model from the profiling queries. Labels are ground
/// truth: whether the large model answers correctly at each density.
pub fn prepare_models(
    backend: &dyn ModelBackend,
    queries: &[Query],
    cfg: &SystemConfig,
    extractor_cfg: &ExtractorConfig,
) -> Result<PreparedModels, HarnessError> {
    let mut obs = Vec::with_capacity(queries.len());
    let mut skipped = 0;
    for q in queries {
        match observe(backend, q, cfg) {
            Ok(Some(o)) => obs.push(o),
            Ok(None) => skipped += 1,
            Err(e) if e.is_missing_record() => {
                log::warn!("profiling query {} skipped: {e}", q.id);
                skipped += 1;
            }
            Err(e) => return Err(e),
        }
    }
    if obs.len() <= cfg.pca_dim {
        return Err(HarnessError::Profiling(format!(
            "{} usable queries for a {}-dimensional PCA",
            obs.len(),
            cfg.pca_dim
        )));
    }

    let small_samples: Vec<(LogitVector, usize)> =
        obs.iter().map(|o| (o.small.clone(), o.truth)).collect();
    let large_samples: Vec<(LogitVector, usize)> = obs
        .iter()
        .flat_map(|o| o.large.iter().map(move |z| (z.clone(), o.truth)))
        .collect();
    let small_temperature = fit_temperature(&small_samples)?;
    let large_temperature = fit_temperature(&large_samples)?;

    let h_txt: Vec<Vec<f64>> = obs.iter().map(|o| o.h_txt.clone()).collect();
    let h_vis: Vec<Vec<f64>> = obs.iter().map(|o| o.h_vis.clone()).collect();
    let pca_txt = fit_pca(&h_txt, cfg.pca_dim)?;
    let pca_vis = fit_pca(&h_vis, cfg.pca_dim)?;

    let mut rows = Vec::with_capacity(obs.len() * cfg.actions.len());
    for o in &obs {
        let dist = small_temperature.apply(&o.small)?;
        let ctx = ContextVector {
            n_frames: o.n_frames as f64,
            kappa: dist.confidence,
            margin: dist.margin,
            entropy: dist.entropy_norm,
            z_txt: pca_txt.project(&o.h_txt)?,
            z_vis: pca_vis.project(&o.h_vis)?,
            s_max: o.s_max,
            s_mean: o.s_mean,
            s_cplx: o.s_cplx,
        };
        ctx.validate()?;
        let context = ctx.to_vec();
        for (a, z) in cfg.actions.iter().zip(&o.large) {
            rows.push(ProfilingRow {
                context: context.clone(),
                density: a.density,
                label: z.argmax() == o.truth,
            });
        }
    }
    let profiling = ProfilingDataset { rows };
    let (extractor, train) = train_extractor(&profiling, &cfg.actions, extractor_cfg)?;
    let state = BanditState::warm_start(&cfg.actions, &extractor, &profiling, cfg.lambda0)?;
    Ok(PreparedModels {
        small_temperature,
        large_temperature,
        pca_txt,
        pca_vis,
        extractor,
        state,
        train,
        profiling,
        skipped,
    })
}

/// Fits only the large-model temperature, over every density. This is all an
/// edge node needs from the profiling split.
pub fn fit_edge_temperature(
    backend: &dyn ModelBackend,
    queries: &[Query],
    cfg: &SystemConfig,
) -> Result<TemperatureModel, HarnessError> {
    let mut samples = Vec::new();
    for q in queries {
        let Some(truth) = backend.ground_truth(q) else {
            continue;
        };
        let tk = match tokenize_keyframes_sequential(backend, q, cfg) {
            Ok(tk) => tk,
            Err(e) if e.is_missing_record() => continue,
            Err(e) => return Err(e),
        };
        for a in cfg.actions.iter() {
            let merged = merge_to_density(&tk.tokens, a)?;
            let r = backend.answer(&BackendRequest {
                query_id: q.id,
                question: &q.question,
                options: &q.options,
                role: Role::Large,
                density: Some(a),
                tokens: &merged.tokens,
            });
            match r {
                Ok(r) => samples.push((r.logits, truth)),
                Err(e) => {
                    let e = HarnessError::from(e);
                    if !e.is_missing_record() {
                        return Err(e);
                    }
                }
            }
        }
    }
    Ok(fit_temperature(&samples)?)
}
