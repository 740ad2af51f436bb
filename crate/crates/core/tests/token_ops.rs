use proptest::prelude::*;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use tokenbridge_core::token_ops::*;
use tokenbridge_core::{Action, TokenTensor};

fn tensor(frames: usize, tpf: usize, dim: usize, data: Vec<f32>) -> TokenTensor {
    TokenTensor::new(frames, tpf, dim, 4, data).unwrap()
}

// Group membership by integer division, valid when density divides tpf.
fn oracle_merge(t: &TokenTensor, density: usize) -> Vec<f64> {
    let size = t.tokens_per_frame / density;
    let mut out = vec![0.0; t.frames * density * t.dim];
    for f in 0..t.frames {
        for tok in 0..t.tokens_per_frame {
            let g = tok / size;
            for c in 0..t.dim {
                let v = t.data[(f * t.tokens_per_frame + tok) * t.dim + c] as f64;
                out[(f * density + g) * t.dim + c] += v / size as f64;
            }
        }
    }
    out
}

#[test]
fn matches_group_mean_oracle() {
    let mut rng = StdRng::seed_from_u64(3);
    for density in [1u32, 2, 4, 8, 16, 32] {
        let t = tensor(
            3,
            32,
            5,
            (0..3 * 32 * 5)
                .map(|_| rng.random_range(-4.0..4.0))
                .collect(),
        );
        let got = merge_to_density(&t, Action::new(density)).unwrap();
        let want = oracle_merge(&t, density as usize);
        assert_eq!(got.tokens.tokens_per_frame, density as usize);
        for (g, w) in got.tokens.data.iter().zip(&want) {
            assert!(
                (*g as f64 - w).abs() < 1e-5,
                "density {density}: {g} vs {w}"
            );
        }
    }
}

#[test]
fn constant_tokens_stay_constant() {
    let t = tensor(2, 12, 3, vec![0.75; 72]);
    for d in 1..=12 {
        let m = merge_to_density(&t, Action::new(d)).unwrap();
        assert!(m.tokens.data.iter().all(|&v| v == 0.75), "density {d}");
        assert_eq!(m.indivisible, 12 % d != 0);
    }
}

#[test]
fn zero_tensor_compresses_below_one_percent() {
    let t = TokenTensor::zeros(64, 8, 256);
    let raw = 64 * 8 * 256 * 4;
    assert_eq!(raw, 524_288);
    let p = pack(&t).unwrap();
    assert!(p.len() * 100 < raw, "{} bytes", p.len());
    assert_eq!(unpack(&p).unwrap(), t);
}

#[test]
fn noise_round_trips_within_overhead() {
    let mut rng = StdRng::seed_from_u64(11);
    let n = 16 * 8 * 64;
    let data: Vec<f32> = (0..n)
        .map(|_| f32::from_bits(rng.random_range(0..0x7f00_0000u32)))
        .collect();
    let t = tensor(16, 8, 64, data);
    let p = pack(&t).unwrap();
    let raw = n * 4;
    assert!(
        p.len() <= raw + HEADER_LEN + raw / 255 + 128,
        "{} vs raw {raw}",
        p.len()
    );
    let back = unpack(&p).unwrap();
    let bits = |t: &TokenTensor| t.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&back), bits(&t));
}

fn arb_tensor() -> impl Strategy<Value = TokenTensor> {
    (1usize..4, 1usize..20, 1usize..5).prop_flat_map(|(f, tpf, dim)| {
        proptest::collection::vec(-100.0f32..100.0, f * tpf * dim)
            .prop_map(move |data| TokenTensor::new(f, tpf, dim, 4, data).unwrap())
    })
}

proptest! {
    #[test]
    fn merge_is_linear(t in arb_tensor(), seed in any::<u64>(), c in -3.0f32..3.0) {
        let mut rng = StdRng::seed_from_u64(seed);
        let density = rng.random_range(1..=t.tokens_per_frame) as u32;
        let y: Vec<f32> = (0..t.data.len()).map(|_| rng.random_range(-100.0..100.0)).collect();
        let yt = TokenTensor::new(t.frames, t.tokens_per_frame, t.dim, 4, y.clone()).unwrap();
        let sum = TokenTensor::new(t.frames, t.tokens_per_frame, t.dim, 4,
            t.data.iter().zip(&y).map(|(a, b)| a + b).collect()).unwrap();
        let scaled = TokenTensor::new(t.frames, t.tokens_per_frame, t.dim, 4,
            t.data.iter().map(|a| c * a).collect()).unwrap();
        let a = Action::new(density);
        let mx = merge_to_density(&t, a).unwrap().tokens.data;
        let my = merge_to_density(&yt, a).unwrap().tokens.data;
        let ms = merge_to_density(&sum, a).unwrap().tokens.data;
        let mc = merge_to_density(&scaled, a).unwrap().tokens.data;
        for i in 0..mx.len() {
            prop_assert!((ms[i] - (mx[i] + my[i])).abs() < 1e-3);
            prop_assert!((mc[i] - c * mx[i]).abs() < 1e-3);
        }
    }

    #[test]
    fn divisible_merge_preserves_global_mean(t in arb_tensor(), pick in any::<prop::sample::Index>()) {
        let divisors: Vec<usize> = (1..=t.tokens_per_frame).filter(|d| t.tokens_per_frame % d == 0).collect();
        let d = *pick.get(&divisors);
        let m = merge_to_density(&t, Action::new(d as u32)).unwrap();
        prop_assert!(!m.indivisible);
        let mean = |v: &[f32]| v.iter().map(|&x| x as f64).sum::<f64>() / v.len() as f64;
        prop_assert!((mean(&m.tokens.data) - mean(&t.data)).abs() < 1e-4);
        prop_assert_eq!(m.tokens.frames, t.frames);
        prop_assert_eq!(m.tokens.dim, t.dim);
    }

    #[test]
    fn pack_unpack_identity(t in arb_tensor()) {
        let p = pack(&t).unwrap();
        prop_assert_eq!(&unpack(&p).unwrap(), &t);
        prop_assert_eq!(pack(&unpack(&p).unwrap()).unwrap(), p);
    }

    #[test]
    fn random_bytes_never_panic(bytes in proptest::collection::vec(any::<u8>(), 0..200)) {
        let _ = unpack(&bytes);
    }
}
