use std::io::BufReader;

use tokenbridge_core::backends::*;
use tokenbridge_core::calibration::constrained_softmax;
use tokenbridge_core::router::{route, RoutingDecision};
use tokenbridge_core::{Action, TokenTensor};

fn dummy_tokens() -> TokenTensor {
    TokenTensor::zeros(2, 32, 16)
}

fn ask(b: &SyntheticBackend, qid: u64, role: Role, density: Option<u32>) -> BackendResponse {
    let options = ['A', 'B', 'C', 'D'];
    let tokens = dummy_tokens();
    b.answer(&BackendRequest {
        query_id: qid,
        question: "q",
        options: &options,
        role,
        density: density.map(Action::new),
        tokens: &tokens,
    })
    .unwrap()
}

// Plain equal-width binning, kept separate from the library's ECE.
fn binned_ece(samples: &[(f64, bool)], bins: usize) -> f64 {
    let mut conf = vec![0.0; bins];
    let mut hits = vec![0.0; bins];
    let mut count = vec![0usize; bins];
    for &(c, ok) in samples {
        let b = ((c * bins as f64) as usize).min(bins - 1);
        conf[b] += c;
        hits[b] += ok as u8 as f64;
        count[b] += 1;
    }
    (0..bins)
        .filter(|&b| count[b] > 0)
        .map(|b| (hits[b] - conf[b]).abs() / samples.len() as f64)
        .sum()
}

fn softmax_max(logits: &[f64]) -> f64 {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = logits.iter().map(|v| (v - m).exp()).sum();
    1.0 / z
}

#[test]
fn unit_gamma_confidences_are_calibrated() {
    let b = SyntheticBackend::new(SyntheticProfile::default()).unwrap();
    let samples: Vec<(f64, bool)> = (0..10_000)
        .map(|q| {
            let r = ask(&b, q, Role::Small, None);
            (softmax_max(&r.logits.values), r.correct.unwrap())
        })
        .collect();
    let e = binned_ece(&samples, 10);
    assert!(e < 0.02, "ECE {e}");
}

#[test]
fn gamma_makes_confidences_overconfident() {
    let p = SyntheticProfile {
        gamma: 2.0,
        ..Default::default()
    };
    let b = SyntheticBackend::new(p).unwrap();
    let samples: Vec<(f64, bool)> = (0..5_000)
        .map(|q| {
            let r = ask(&b, q, Role::Small, None);
            (softmax_max(&r.logits.values), r.correct.unwrap())
        })
        .collect();
    let mean_conf = samples.iter().map(|s| s.0).sum::<f64>() / samples.len() as f64;
    let acc = samples.iter().filter(|s| s.1).count() as f64 / samples.len() as f64;
    assert!(mean_conf > acc + 0.05, "conf {mean_conf} acc {acc}");
    assert!(binned_ece(&samples, 10) > 0.05);
}

#[test]
fn inverted_u_peaks_at_sixteen() {
    let b = SyntheticBackend::new(SyntheticProfile::default()).unwrap();
    let densities = [2u32, 4, 8, 16, 32];
    let acc: Vec<f64> = densities
        .iter()
        .map(|&a| {
            (0..10_000)
                .filter(|&q| ask(&b, q, Role::Large, Some(a)).correct.unwrap())
                .count() as f64
                / 1e4
        })
        .collect();
    let best = (0..5).max_by(|&i, &j| acc[i].total_cmp(&acc[j])).unwrap();
    assert!((2..=4).contains(&best), "accuracies {acc:?}");
    assert!(
        acc[0] < acc[best] && acc[4] < acc[best] && acc[0] < acc[1],
        "{acc:?}"
    );
}

#[test]
fn monotone_response_never_decreases() {
    let p = SyntheticProfile {
        response: DensityResponse::Monotone,
        ..Default::default()
    };
    let b = SyntheticBackend::new(p).unwrap();
    for q in 0..2_000 {
        let mut prev = false;
        for a in [2u32, 4, 8, 16, 32] {
            let ok = ask(&b, q, Role::Large, Some(a)).correct.unwrap();
            assert!(ok || !prev, "query {q} lost correctness at density {a}");
            prev = ok;
        }
    }
}

#[test]
fn agreement_matches_the_target() {
    for target in [0.62, 0.70, 0.76] {
        let p = SyntheticProfile {
            agreement: Some(target),
            seed: 9,
            ..Default::default()
        };
        let b = SyntheticBackend::new(p).unwrap();
        let agree = (0..10_000)
            .filter(|&q| {
                ask(&b, q, Role::Small, None).logits.argmax()
                    == ask(&b, q, Role::Large, Some(16)).logits.argmax()
            })
            .count() as f64
            / 1e4;
        assert!(
            (agree - target).abs() <= 0.03,
            "target {target}, measured {agree}"
        );
    }
}

#[test]
fn perfect_small_model_is_always_accepted() {
    let p = SyntheticProfile {
        small_accuracy: [1.0, 1.0],
        agreement: None,
        ..Default::default()
    };
    let b = SyntheticBackend::new(p).unwrap();
    let mut accepted = 0;
    for q in 0..1_000 {
        let r = ask(&b, q, Role::Small, None);
        assert_eq!(r.correct, Some(true));
        let d = constrained_softmax(&r.logits, 1.0).unwrap();
        if matches!(route(&d, 0.6), RoutingDecision::AcceptLocal(_)) {
            accepted += 1;
        }
    }
    assert!(accepted >= 995, "{accepted}");
}

#[test]
fn synthetic_streams_are_deterministic() {
    let a = SyntheticBackend::new(SyntheticProfile {
        seed: 4,
        ..Default::default()
    })
    .unwrap();
    let b = SyntheticBackend::new(SyntheticProfile {
        seed: 4,
        ..Default::default()
    })
    .unwrap();
    let c = SyntheticBackend::new(SyntheticProfile {
        seed: 5,
        ..Default::default()
    })
    .unwrap();
    let q = &a.queries(10, 1)[0];
    assert_eq!(a.video_metadata(q).unwrap(), b.video_metadata(q).unwrap());
    assert_eq!(
        a.encode_frames(q, &[0, 30, 31]).unwrap(),
        b.encode_frames(q, &[0, 30, 31]).unwrap()
    );
    for id in 0..50 {
        assert_eq!(
            ask(&a, id, Role::Small, None),
            ask(&b, id, Role::Small, None)
        );
        assert_eq!(
            ask(&a, id, Role::Large, Some(8)),
            ask(&b, id, Role::Large, Some(8))
        );
    }
    assert!((0..50).any(|id| ask(&a, id, Role::Small, None) != ask(&c, id, Role::Small, None)));
}

#[test]
fn encoded_frames_do_not_depend_on_batching() {
    let b = SyntheticBackend::new(SyntheticProfile::default()).unwrap();
    let q = &b.queries(3, 1)[0];
    let all = b.encode_frames(q, &[0, 5, 9, 40]).unwrap();
    let parts = [
        b.encode_frames(q, &[0, 5]).unwrap(),
        b.encode_frames(q, &[9, 40]).unwrap(),
    ];
    assert_eq!(TokenTensor::concat_frames(&parts).unwrap(), all);
}

fn small_record(qid: u64) -> TraceRecord {
    TraceRecord {
        qid,
        role: Role::Small,
        density: None,
        options: vec!['A', 'B', 'C'],
        gt: Some('B'),
        logits: vec![0.1, 1.25, -0.5],
        h_txt: vec![0.5, -0.25],
        h_vis: vec![vec![1.0, 0.0]; 2 * 4],
        n_frames: 2,
        t_ms: 120.5,
        question: Some("what happens?".into()),
    }
}

fn large_record(qid: u64, density: u32) -> TraceRecord {
    TraceRecord {
        qid,
        role: Role::Large,
        density: Some(density),
        options: vec!['A', 'B', 'C'],
        gt: Some('B'),
        logits: vec![2.0, 0.1 * density as f64, 0.0],
        h_txt: vec![],
        h_vis: vec![],
        n_frames: 2,
        t_ms: 300.0 + density as f64,
        question: None,
    }
}

fn header() -> TraceHeader {
    TraceHeader::new(vec![2, 4], 4)
}

#[test]
fn trace_replays_records_verbatim() {
    let recs = vec![small_record(1), large_record(1, 2), large_record(1, 4)];
    let mut buf = Vec::new();
    write_trace(&mut buf, &header(), &recs).unwrap();
    let (h, back) = read_trace(BufReader::new(buf.as_slice())).unwrap();
    assert_eq!(h, header());
    assert_eq!(back, recs);

    let t = TraceBackend::new(h, back, ComputeModel::default()).unwrap();
    let q = &t.queries()[0];
    assert_eq!(q.question, "what happens?");
    let tokens = t.encode_frames(q, &[1]).unwrap();
    assert_eq!(
        (tokens.frames, tokens.tokens_per_frame, tokens.dim),
        (1, 4, 2)
    );
    let r = t
        .answer(&BackendRequest {
            query_id: 1,
            question: &q.question,
            options: &q.options,
            role: Role::Large,
            density: Some(Action::new(4)),
            tokens: &tokens,
        })
        .unwrap();
    assert_eq!(r.logits.values, recs[2].logits);
    assert_eq!(r.compute_ms, 304.0);
    assert_eq!(r.correct, Some(false));
    assert_eq!(t.ground_truth(q), Some(1));
}

#[test]
fn uncaptured_density_is_a_missing_record() {
    let t = TraceBackend::new(
        header(),
        vec![small_record(1), large_record(1, 2)],
        ComputeModel::default(),
    )
    .unwrap();
    let tokens = dummy_tokens();
    let err = t
        .answer(&BackendRequest {
            query_id: 1,
            question: "q",
            options: &['A', 'B', 'C'],
            role: Role::Large,
            density: Some(Action::new(4)),
            tokens: &tokens,
        })
        .unwrap_err();
    assert!(matches!(
        err,
        BackendError::MissingRecord {
            qid: 1,
            density: Some(4),
            ..
        }
    ));
}

#[test]
fn validator_reports_every_problem() {
    let mut bad = small_record(2);
    bad.logits.pop();
    bad.gt = Some('F');
    let mut wrong_density = large_record(1, 8);
    wrong_density.t_ms = -1.0;
    let recs = vec![small_record(1), large_record(1, 2), bad, wrong_density];
    let mut buf = Vec::new();
    write_trace(&mut buf, &header(), &recs).unwrap();
    buf.extend_from_slice(b"{not json}\n");
    let s = validate_trace(BufReader::new(buf.as_slice())).unwrap();
    assert!(!s.is_valid());
    assert_eq!(s.records, 5);
    assert_eq!(s.errors.len(), 5, "{:?}", s.errors);
    assert!(s.missing.contains(&(1, 4)));
    assert!(read_trace(BufReader::new(buf.as_slice())).is_err());
}

#[test]
fn compressed_trace_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let recs = vec![small_record(5), large_record(5, 2), large_record(5, 4)];
    for name in ["t.jsonl", "t.jsonl.zst"] {
        let path = dir.path().join(name);
        write_trace_file(&path, &header(), &recs).unwrap();
        let (_, back) = read_trace_file(&path).unwrap();
        assert_eq!(back, recs);
    }
    let raw = std::fs::read(dir.path().join("t.jsonl.zst")).unwrap();
    assert_eq!(&raw[..4], &[0x28, 0xB5, 0x2F, 0xFD]);
}

#[test]
fn bad_headers_are_rejected() {
    for text in [
        "",
        "{\"schema\":\"other\",\"version\":1,\"actions\":[2],\"raw_tokens_per_frame\":2}\n",
    ] {
        assert!(read_trace(BufReader::new(text.as_bytes())).is_err());
    }
}
