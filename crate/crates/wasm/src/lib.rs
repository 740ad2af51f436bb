//! Browser bindings for three library operations. Each returns a JSON
//! string; the plain `*_json` functions are the same logic without the
//! JavaScript boundary, so they can be tested natively.

use serde_json::json;
use tokenbridge_core::backends::{ModelBackend, SyntheticBackend, SyntheticProfile};
use tokenbridge_core::calibration::constrained_softmax;
use tokenbridge_core::harness::{simulate_network, Direction};
use tokenbridge_core::sampler::select_frames;
use tokenbridge_core::token_ops::{merge_to_density, pack};
use tokenbridge_core::{
    ActionSet, FrameRate, LogitVector, NetworkModel, SystemConfig, VideoMetadata,
};
use wasm_bindgen::prelude::*;

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

/// Frame selection for a video with a fixed keyframe interval.
pub fn sample_frames_json(
    frame_count: u64,
    fps: f64,
    gop: u64,
    n_min: u64,
    n_max: u64,
) -> Result<String, String> {
    if !(fps.is_finite() && fps > 0.0) {
        return Err("fps must be positive".into());
    }
    if frame_count == 0 || gop == 0 {
        return Err("frame count and keyframe interval must be positive".into());
    }
    let keys: Vec<u64> = (0..frame_count).step_by(gop as usize).collect();
    let meta = VideoMetadata::new(
        frame_count,
        FrameRate::new((fps * 1000.0).round() as u64, 1000),
        keys,
    );
    let cfg = SystemConfig {
        n_min,
        n_max,
        ..SystemConfig::default()
    };
    let s = select_frames(&meta, &cfg).map_err(err)?;
    Ok(json!({
        "indices": s.indices,
        "source": s.source,
        "keyframes": meta.keyframe_indices.len(),
        "duration_s": meta.duration_s,
    })
    .to_string())
}

/// Temperature-scaled distribution of comma-separated logits.
pub fn calibrate_json(logits: &str, temperature: f64) -> Result<String, String> {
    let values = logits
        .split(',')
        .map(|s| s.trim().parse::<f64>().map_err(|e| format!("{s:?}: {e}")))
        .collect::<Result<Vec<_>, _>>()?;
    let d = constrained_softmax(&LogitVector::new(values), temperature).map_err(err)?;
    Ok(json!({
        "probs": d.probs,
        "argmax": d.argmax(),
        "confidence": d.confidence,
        "margin": d.margin,
        "entropy": d.entropy_norm,
    })
    .to_string())
}

/// Payload size and simulated transfer time at every density, for synthetic
/// tokens of `frames` frames and `dim` channels.
pub fn offload_plan_json(
    frames: usize,
    dim: usize,
    seed: u64,
    up: f64,
    down: f64,
    rtt: f64,
) -> Result<String, String> {
    if !(1..=512).contains(&frames) || !(1..=1024).contains(&dim) {
        return Err("frames must be in 1..=512 and dim in 1..=1024".into());
    }
    let network = NetworkModel {
        up_mbps: up,
        down_mbps: down,
        rtt_ms: rtt,
    };
    if [up, down, rtt].iter().any(|v| !v.is_finite() || *v < 0.0) || up == 0.0 || down == 0.0 {
        return Err("bandwidths must be positive and the RTT non-negative".into());
    }
    let backend = SyntheticBackend::new(SyntheticProfile {
        seed,
        token_dim: dim,
        ..SyntheticProfile::default()
    })
    .map_err(err)?;
    let query = &backend.queries(0, 1)[0];
    let indices: Vec<u64> = (0..frames as u64).collect();
    let raw = backend.encode_frames(query, &indices).map_err(err)?;
    let rows = ActionSet::default()
        .iter()
        .map(|a| {
            let merged = merge_to_density(&raw, a).map_err(err)?;
            let payload = pack(&merged.tokens).map_err(err)?;
            let uncompressed = merged.tokens.data.len() * 4;
            Ok(json!({
                "density": a.density,
                "tokens": merged.tokens.frames * merged.tokens.tokens_per_frame,
                "raw_bytes": uncompressed,
                "payload_bytes": payload.len(),
                "upload_ms": simulate_network(payload.len(), Direction::Up, &network),
                "download_ms": simulate_network(64, Direction::Down, &network),
            }))
        })
        .collect::<Result<Vec<_>, String>>()?;
    Ok(
        json!({ "frames": frames, "raw_tokens_per_frame": raw.tokens_per_frame, "levels": rows })
            .to_string(),
    )
}

#[wasm_bindgen]
pub fn sample_frames(
    frame_count: u64,
    fps: f64,
    gop: u64,
    n_min: u64,
    n_max: u64,
) -> Result<String, JsError> {
    sample_frames_json(frame_count, fps, gop, n_min, n_max).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn calibrate(logits: &str, temperature: f64) -> Result<String, JsError> {
    calibrate_json(logits, temperature).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn offload_plan(
    frames: usize,
    dim: usize,
    seed: u64,
    up: f64,
    down: f64,
    rtt: f64,
) -> Result<String, JsError> {
    offload_plan_json(frames, dim, seed, up, down, rtt).map_err(|e| JsError::new(&e))
}
