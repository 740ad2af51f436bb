use proptest::prelude::*;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use tokenbridge_core::sampler::{select_frames, uniform_subsample};
use tokenbridge_core::{FrameRate, SampleSource, SystemConfig, VideoMetadata};

// Line-by-line transliteration of the selection algorithm, with exact
// integer rounding for the evenly spaced positions.
fn oracle(
    frame_count: u64,
    fps: (u64, u64),
    keys: &[u64],
    n_min: usize,
    n_max: usize,
) -> (Vec<u64>, SampleSource) {
    let positions = |len: usize, k: usize| -> Vec<usize> {
        if k == 1 {
            return vec![0];
        }
        let (num, den) = ((len - 1) as u128, (k - 1) as u128);
        (0..k as u128)
            .map(|j| ((2 * j * num + den) / (2 * den)) as usize)
            .collect()
    };
    if frame_count < n_min as u64 {
        return ((0..frame_count).collect(), SampleSource::AllFrames);
    }
    if keys.len() > n_max {
        let picked = positions(keys.len(), n_max)
            .into_iter()
            .map(|p| keys[p])
            .collect();
        return (picked, SampleSource::KeyframeSubsample);
    }
    if keys.len() < n_min {
        let stride = ((2 * fps.0 + fps.1) / (2 * fps.1)).max(1);
        let mut fixed = Vec::new();
        let mut f = 0;
        while f < frame_count {
            fixed.push(f);
            f += stride;
        }
        if fixed.len() > n_max {
            fixed = positions(fixed.len(), n_max)
                .into_iter()
                .map(|p| fixed[p])
                .collect();
        }
        return (fixed, SampleSource::FixedRateFallback);
    }
    (keys.to_vec(), SampleSource::Keyframes)
}

fn cfg(n_min: u64, n_max: u64) -> SystemConfig {
    SystemConfig {
        n_min,
        n_max,
        ..SystemConfig::default()
    }
}

fn evenly_keyed(frame_count: u64, n_keys: u64) -> Vec<u64> {
    let mut keys: Vec<u64> = (0..n_keys)
        .map(|i| i * frame_count / n_keys.max(1))
        .collect();
    keys.dedup();
    keys
}

fn check(frame_count: u64, fps: (u64, u64), keys: Vec<u64>, n_min: u64, n_max: u64) {
    let meta = VideoMetadata::new(frame_count, FrameRate::new(fps.0, fps.1), keys.clone());
    let got = select_frames(&meta, &cfg(n_min, n_max)).unwrap();
    let (want, source) = oracle(frame_count, fps, &keys, n_min as usize, n_max as usize);
    assert_eq!(
        got.source,
        source,
        "frames {frame_count} keys {} bounds {n_min}..{n_max}",
        keys.len()
    );
    assert_eq!(
        got.indices,
        want,
        "frames {frame_count} keys {} bounds {n_min}..{n_max}",
        keys.len()
    );
}

#[test]
fn every_branch_boundary_matches_the_oracle() {
    let (n_min, n_max) = (64u64, 512u64);
    // frame_count straddling n_min, key counts straddling both bounds.
    for frame_count in [1, 63, 64, 65, 2000, 20_000] {
        for n_keys in [1u64, 63, 64, 65, 511, 512, 513, 2000] {
            if n_keys > frame_count {
                continue;
            }
            check(
                frame_count,
                (30, 1),
                evenly_keyed(frame_count, n_keys),
                n_min,
                n_max,
            );
        }
    }
    // Fallback capped at n_max, fractional and sub-one rates.
    check(100_000, (30, 1), vec![0, 50_000], n_min, n_max);
    check(5_000, (30_000, 1001), vec![0], n_min, n_max);
    check(5_000, (1, 2), vec![0], n_min, n_max);
    check(5_000, (5, 2), vec![0], n_min, n_max);
    // n_min == n_max.
    check(1_000, (25, 1), evenly_keyed(1_000, 64), 64, 64);
    check(1_000, (25, 1), evenly_keyed(1_000, 65), 64, 64);
}

#[test]
fn documented_examples() {
    let meta = VideoMetadata::new(50, FrameRate::integer(30), vec![0]);
    let s = select_frames(&meta, &cfg(64, 512)).unwrap();
    assert_eq!(
        (s.indices, s.source),
        ((0..50).collect(), SampleSource::AllFrames)
    );

    let meta = VideoMetadata::new(
        100,
        FrameRate::integer(30),
        (0..9).map(|i| i * 10).collect(),
    );
    let s = select_frames(&meta, &cfg(1, 6)).unwrap();
    assert_eq!(s.indices, vec![0, 20, 30, 50, 60, 80]);
    assert_eq!(s.source, SampleSource::KeyframeSubsample);

    let meta = VideoMetadata::new(1000, FrameRate::integer(25), evenly_keyed(1000, 30));
    let s = select_frames(&meta, &cfg(64, 512)).unwrap();
    assert_eq!(s.indices, (0..40).map(|i| i * 25).collect::<Vec<u64>>());
    assert_eq!(s.source, SampleSource::FixedRateFallback);

    let list: Vec<u64> = (0..100).collect();
    assert_eq!(uniform_subsample(&list, 2).unwrap(), vec![0, 99]);
    let nine: Vec<u64> = (0..9).collect();
    assert_eq!(uniform_subsample(&nine, 9).unwrap(), nine);
    assert_eq!(uniform_subsample(&nine, 6).unwrap(), vec![0, 2, 3, 5, 6, 8]);
}

#[test]
fn randomized_metadata_matches_the_oracle() {
    let mut rng = StdRng::seed_from_u64(11);
    for _ in 0..2_000 {
        let frame_count = rng.random_range(1..50_000u64);
        let fps = (rng.random_range(1..120u64), rng.random_range(1..4u64));
        let n_keys = rng.random_range(1..=frame_count.min(1_500));
        let mut keys: Vec<u64> = (0..n_keys)
            .map(|_| rng.random_range(1..frame_count.max(2)))
            .collect();
        keys.push(0);
        keys.retain(|&k| k < frame_count);
        keys.sort_unstable();
        keys.dedup();
        let n_min = rng.random_range(1..200u64);
        let n_max = rng.random_range(n_min..1_000);
        check(frame_count, fps, keys, n_min, n_max);
    }
}

proptest! {
    #[test]
    fn size_bounds_and_alignment(
        frame_count in 1u64..30_000,
        fps in 1u64..90,
        gop in 1u64..400,
        n_min in 1u64..128,
        extra in 0u64..600,
    ) {
        let n_max = n_min + extra;
        let keys: Vec<u64> = (0..frame_count).step_by(gop as usize).collect();
        let meta = VideoMetadata::new(frame_count, FrameRate::integer(fps), keys.clone());
        let s = select_frames(&meta, &cfg(n_min, n_max)).unwrap();
        let upper = n_max.max(frame_count.div_ceil(fps)) as usize;
        prop_assert!(s.len() <= upper);
        prop_assert!(s.indices.iter().all(|&i| i < frame_count));
        prop_assert!(s.indices.windows(2).all(|w| w[0] < w[1]));
        if s.source != SampleSource::FixedRateFallback {
            prop_assert!(s.len() as u64 >= n_min.min(frame_count));
        }
        if matches!(s.source, SampleSource::Keyframes | SampleSource::KeyframeSubsample) {
            prop_assert!(s.indices.iter().all(|i| keys.binary_search(i).is_ok()));
        }
    }
}
