use serde_json::Value;
use tokenbridge_wasm::{calibrate_json, offload_plan_json, sample_frames_json};

fn parse(s: Result<String, String>) -> Value {
    serde_json::from_str(&s.unwrap()).unwrap()
}

#[test]
fn sampling_follows_the_keyframes() {
    let v = parse(sample_frames_json(3000, 30.0, 30, 8, 128));
    let idx: Vec<u64> = serde_json::from_value(v["indices"].clone()).unwrap();
    assert_eq!(v["source"], "Keyframes");
    assert_eq!(idx, (0..3000).step_by(30).collect::<Vec<_>>());

    let v = parse(sample_frames_json(3000, 30.0, 30, 8, 64));
    let idx: Vec<u64> = serde_json::from_value(v["indices"].clone()).unwrap();
    assert_eq!(v["source"], "KeyframeSubsample");
    assert_eq!(idx.len(), 64);
    assert!(idx.iter().all(|i| i % 30 == 0) && idx.windows(2).all(|w| w[0] < w[1]));

    let short = parse(sample_frames_json(5, 30.0, 1, 8, 64));
    assert_eq!(short["source"], "AllFrames");
    assert!(sample_frames_json(10, 0.0, 1, 1, 2).is_err());
    assert!(sample_frames_json(10, 30.0, 0, 1, 2).is_err());
}

#[test]
fn temperature_flattens_but_keeps_the_answer() {
    let sharp = parse(calibrate_json("4, 1, 0.5, -2", 0.5));
    let flat = parse(calibrate_json("4, 1, 0.5, -2", 3.0));
    assert_eq!(sharp["argmax"], 0);
    assert_eq!(flat["argmax"], 0);
    assert!(sharp["confidence"].as_f64().unwrap() > flat["confidence"].as_f64().unwrap());
    let p: Vec<f64> = serde_json::from_value(flat["probs"].clone()).unwrap();
    assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    assert!(calibrate_json("1, x", 1.0).is_err());
    assert!(calibrate_json("1, 2", 0.0).is_err());
}

#[test]
fn payload_grows_with_density() {
    let v = parse(offload_plan_json(8, 16, 1, 59.0, 119.0, 9.0));
    let levels = v["levels"].as_array().unwrap();
    assert_eq!(levels.len(), 5);
    let bytes: Vec<u64> = levels
        .iter()
        .map(|l| l["payload_bytes"].as_u64().unwrap())
        .collect();
    assert!(bytes.windows(2).all(|w| w[0] < w[1]), "{bytes:?}");
    for l in levels {
        let up = l["upload_ms"].as_f64().unwrap();
        let b = l["payload_bytes"].as_f64().unwrap();
        assert!((up - (4.5 + 8.0 * b / 59e6 * 1e3)).abs() < 1e-9);
        assert_eq!(l["tokens"], 8 * l["density"].as_u64().unwrap());
    }
    assert!(offload_plan_json(0, 16, 1, 59.0, 119.0, 9.0).is_err());
    assert!(offload_plan_json(8, 16, 1, 0.0, 119.0, 9.0).is_err());
}
