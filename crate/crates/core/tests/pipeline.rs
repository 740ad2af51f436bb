use std::thread::sleep;
use std::time::Duration;

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use tokenbridge_core::pipeline::{
    run_pipeline, run_sequential, run_stages, HandlerError, PipelineError, Stage,
};
use tokenbridge_core::TokenTensor;

// Permutation flow shop without blocking:
// C(i, j) = max(C(i-1, j), C(i, j-1)) + t(i, j).
fn flow_shop(times: &[[f64; 3]]) -> f64 {
    let n = times.len();
    let mut c = vec![[0.0f64; 3]; n];
    for i in 0..n {
        for j in 0..3 {
            let above = if i > 0 { c[i - 1][j] } else { 0.0 };
            let left = if j > 0 { c[i][j - 1] } else { 0.0 };
            c[i][j] = above.max(left) + times[i][j];
        }
    }
    c[n - 1][2]
}

fn nap(ms: f64) {
    sleep(Duration::from_secs_f64(ms / 1e3));
}

fn sleepy_run(times: &[[f64; 3]], capacity: usize) -> f64 {
    let batches: Vec<usize> = (0..times.len()).collect();
    let (out, report) = run_stages(
        batches,
        |i, b: usize| -> Result<usize, HandlerError> {
            nap(times[i][0]);
            Ok(b)
        },
        |i, b| -> Result<usize, HandlerError> {
            nap(times[i][1]);
            Ok(b)
        },
        |i, b| -> Result<usize, HandlerError> {
            nap(times[i][2]);
            Ok(b)
        },
        capacity,
    )
    .unwrap();
    assert_eq!(out, (0..times.len()).collect::<Vec<_>>());
    assert!(report.makespan_ms >= report.max_stage_busy_ms() - 1e-9);
    assert!(report.makespan_ms <= report.sequential_estimate_ms + times.len() as f64);
    report.makespan_ms
}

#[test]
fn makespan_tracks_the_flow_shop_oracle() {
    let example = [[10.0, 5.0, 8.0]; 3];
    assert_eq!(flow_shop(&example), 43.0);
    let got = sleepy_run(&example, 2);
    assert!((got - 43.0).abs() <= 4.3, "makespan {got}");

    let mut rng = StdRng::seed_from_u64(3);
    for _ in 0..6 {
        let n = rng.random_range(2..8);
        let times: Vec<[f64; 3]> = (0..n)
            .map(|_| {
                [
                    rng.random_range(3.0..15.0),
                    rng.random_range(3.0..15.0),
                    rng.random_range(3.0..15.0),
                ]
            })
            .collect();
        let want = flow_shop(&times);
        let got = sleepy_run(&times, n);
        assert!(
            (got - want).abs() <= 0.1 * want,
            "makespan {got} vs oracle {want} for {times:?}"
        );
    }
}

/// Deterministic per-batch transform built from random coefficients.
#[derive(Clone)]
struct Handlers {
    scale: [f32; 3],
    shift: [f32; 3],
    dim: usize,
    jitter_us: [u64; 3],
}

impl Handlers {
    fn random(rng: &mut StdRng) -> Self {
        Self {
            scale: [
                rng.random_range(-2.0..2.0),
                rng.random_range(-2.0..2.0),
                rng.random_range(-2.0..2.0),
            ],
            shift: [
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            ],
            dim: rng.random_range(1..6),
            jitter_us: [
                rng.random_range(0..300),
                rng.random_range(0..300),
                rng.random_range(0..300),
            ],
        }
    }

    fn stage(&self, s: usize, i: usize, v: Vec<f32>) -> Vec<f32> {
        if self.jitter_us[s] > 0 {
            sleep(Duration::from_micros(self.jitter_us[s] * (i as u64 % 3)));
        }
        v.into_iter()
            .enumerate()
            .map(|(k, x)| (x * self.scale[s] + self.shift[s] * k as f32).sin() * (i + 1) as f32)
            .collect()
    }

    fn encode(&self, i: usize, v: Vec<f32>) -> TokenTensor {
        let v = self.stage(2, i, v);
        let tpf = v.len() / self.dim;
        TokenTensor::new(1, tpf, self.dim, 4, v).unwrap()
    }
}

#[test]
fn pipelined_output_is_bit_identical_to_sequential() {
    let mut rng = StdRng::seed_from_u64(100);
    for set in 0..100 {
        let h = Handlers::random(&mut rng);
        let n = rng.random_range(1..12);
        let tokens = rng.random_range(1..8) * h.dim;
        let batches: Vec<Vec<f32>> = (0..n)
            .map(|_| (0..tokens).map(|_| rng.random_range(-5.0..5.0)).collect())
            .collect();
        let cap = rng.random_range(1..4);
        let (piped, _) = run_pipeline(
            batches.clone(),
            |i, b| Ok(h.stage(0, i, b)),
            |i, b| Ok(h.stage(1, i, b)),
            |i, b| Ok(h.encode(i, b)),
            cap,
        )
        .unwrap();
        let seq = run_sequential(
            batches,
            |i, b| -> Result<_, HandlerError> { Ok(h.stage(0, i, b)) },
            |i, b| Ok(h.stage(1, i, b)),
            |i, b| Ok(h.encode(i, b)),
        )
        .unwrap();
        let seq = TokenTensor::concat_frames(&seq).unwrap();
        let bits = |t: &TokenTensor| t.data.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(
            (piped.frames, piped.tokens_per_frame),
            (seq.frames, seq.tokens_per_frame),
            "set {set}"
        );
        assert_eq!(bits(&piped), bits(&seq), "set {set}");
    }
}

#[test]
fn failure_reports_batch_and_stage() {
    let err = run_stages(
        vec![0u32, 1, 2, 3],
        |_, b| Ok(b),
        |i, b| if i == 2 { Err("boom".into()) } else { Ok(b) },
        |_, b| Ok(b * 10),
        2,
    )
    .unwrap_err();
    match err {
        PipelineError::Stage(f) => {
            assert_eq!((f.batch, f.stage), (2, Stage::Preprocess));
            assert_eq!(f.completed, vec![0, 10]);
        }
        other => panic!("unexpected {other}"),
    }
}
