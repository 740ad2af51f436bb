//! Keyframe-aligned frame selection with a fixed-rate fallback.

use thiserror::Error;

use crate::config::SystemConfig;
use crate::types::{SampleIndices, SampleSource, TypeError, VideoMetadata};

#[derive(Debug, Error, PartialEq)]
pub enum SamplerError {
    #[error("invalid metadata: {0}")]
    InvalidMetadata(#[from] TypeError),
    #[error("invalid bounds: n_min {n_min} > n_max {n_max}")]
    InvalidBounds { n_min: usize, n_max: usize },
    #[error("cannot pick {k} of {len} elements")]
    BadCount { k: usize, len: usize },
}

/// Position of the `j`-th of `k` evenly spaced picks from a list of `len`,
/// endpoints included, rounded half up.
pub fn subsample_position(j: usize, k: usize, len: usize) -> usize {
    if k <= 1 {
        return 0;
    }
    let (j, k, last) = (j as u128, k as u128, (len - 1) as u128);
    // round(j·last/(k−1)) with halves going up, in exact integers.
    ((2 * j * last + (k - 1)) / (2 * (k - 1))) as usize
}

/// Picks `k` evenly spaced elements of `list`, keeping both ends when k ≥ 2.
pub fn uniform_subsample<T: Copy>(list: &[T], k: usize) -> Result<Vec<T>, SamplerError> {
    if k == 0 || k > list.len() {
        return Err(SamplerError::BadCount { k, len: list.len() });
    }
    Ok((0..k)
        .map(|j| list[subsample_position(j, k, list.len())])
        .collect())
}

/// Frames at one-second spacing (stride `round(fps)`, at least 1) from frame 0.
pub fn fixed_rate_indices(meta: &VideoMetadata) -> Vec<u64> {
    let stride = meta.fps.rounded().max(1);
    (0..meta.frame_count).step_by(stride as usize).collect()
}

pub fn select_frames(
    meta: &VideoMetadata,
    cfg: &SystemConfig,
) -> Result<SampleIndices, SamplerError> {
    meta.validate()?;
    let (n_min, n_max) = (cfg.n_min as usize, cfg.n_max as usize);
    if n_min > n_max || n_max == 0 {
        return Err(SamplerError::InvalidBounds { n_min, n_max });
    }
    let keys = &meta.keyframe_indices;
    let (indices, source) = if meta.frame_count < n_min as u64 {
        ((0..meta.frame_count).collect(), SampleSource::AllFrames)
    } else if keys.len() > n_max {
        (
            uniform_subsample(keys, n_max)?,
            SampleSource::KeyframeSubsample,
        )
    } else if keys.len() < n_min {
        let fixed = fixed_rate_indices(meta);
        let capped = if fixed.len() > n_max {
            uniform_subsample(&fixed, n_max)?
        } else {
            fixed
        };
        (capped, SampleSource::FixedRateFallback)
    } else {
        (keys.clone(), SampleSource::Keyframes)
    };
    Ok(SampleIndices { indices, source })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::FrameRate;
    use proptest::prelude::*;

    fn cfg(n_min: u64, n_max: u64) -> SystemConfig {
        SystemConfig {
            n_min,
            n_max,
            ..SystemConfig::default()
        }
    }

    #[test]
    fn short_video_takes_every_frame() {
        let meta = VideoMetadata::new(50, FrameRate::integer(30), vec![0, 25]);
        let s = select_frames(&meta, &cfg(64, 512)).unwrap();
        assert_eq!(s.indices, (0..50).collect::<Vec<_>>());
        assert_eq!(s.source, SampleSource::AllFrames);
    }

    #[test]
    fn too_many_keyframes_are_subsampled() {
        let keys: Vec<u64> = (0..9).map(|i| i * 10).collect();
        let meta = VideoMetadata::new(90, FrameRate::integer(30), keys);
        let s = select_frames(&meta, &cfg(2, 6)).unwrap();
        assert_eq!(s.indices, vec![0, 20, 30, 50, 60, 80]);
        assert_eq!(s.source, SampleSource::KeyframeSubsample);
    }

    #[test]
    fn sparse_keyframes_fall_back_to_one_fps() {
        let keys: Vec<u64> = (0..30).map(|i| i * 33).collect();
        let meta = VideoMetadata::new(1000, FrameRate::integer(25), keys);
        let s = select_frames(&meta, &cfg(64, 512)).unwrap();
        assert_eq!(s.indices, (0..40).map(|i| i * 25).collect::<Vec<_>>());
        assert_eq!(s.source, SampleSource::FixedRateFallback);
    }

    #[test]
    fn long_fallback_is_capped_at_n_max() {
        let meta = VideoMetadata::new(30 * 3600, FrameRate::integer(30), vec![0]);
        let s = select_frames(&meta, &cfg(64, 512)).unwrap();
        assert_eq!(s.len(), 512);
        assert_eq!(s.indices[0], 0);
        assert_eq!(*s.indices.last().unwrap(), 30 * 3599);
    }

    #[test]
    fn sub_one_fps_uses_stride_one() {
        let meta = VideoMetadata::new(100, FrameRate::new(1, 3), vec![0]);
        let s = select_frames(&meta, &cfg(64, 512)).unwrap();
        assert_eq!(s.indices, (0..100).collect::<Vec<_>>());
    }

    #[test]
    fn fractional_rate_rounds_stride() {
        let meta = VideoMetadata::new(3000, FrameRate::new(30000, 1001), vec![0]);
        let s = select_frames(&meta, &cfg(64, 512)).unwrap();
        assert_eq!(s.indices[1], 30);
    }

    #[test]
    fn enough_keyframes_are_used_verbatim() {
        let keys: Vec<u64> = (0..100).map(|i| i * 9).collect();
        let meta = VideoMetadata::new(900, FrameRate::integer(30), keys.clone());
        let s = select_frames(&meta, &cfg(64, 512)).unwrap();
        assert_eq!(s.indices, keys);
        assert_eq!(s.source, SampleSource::Keyframes);
    }

    #[test]
    fn uniform_subsample_examples() {
        let nine: Vec<u64> = (0..9).collect();
        assert_eq!(uniform_subsample(&nine, 9).unwrap(), nine);
        assert_eq!(uniform_subsample(&nine, 6).unwrap(), vec![0, 2, 3, 5, 6, 8]);
        let hundred: Vec<u64> = (0..100).collect();
        assert_eq!(uniform_subsample(&hundred, 2).unwrap(), vec![0, 99]);
        assert_eq!(uniform_subsample(&hundred, 1).unwrap(), vec![0]);
        assert_eq!(
            uniform_subsample(&nine, 10),
            Err(SamplerError::BadCount { k: 10, len: 9 })
        );
        assert!(uniform_subsample(&nine, 0).is_err());
    }

    #[test]
    fn rejects_bad_inputs() {
        let meta = VideoMetadata::new(100, FrameRate::integer(30), vec![5]);
        assert!(matches!(
            select_frames(&meta, &cfg(64, 512)),
            Err(SamplerError::InvalidMetadata(_))
        ));
        let meta = VideoMetadata::new(100, FrameRate::integer(30), vec![0]);
        assert!(matches!(
            select_frames(&meta, &cfg(65, 64)),
            Err(SamplerError::InvalidBounds { .. })
        ));
    }

    proptest! {
        #[test]
        fn subsample_is_strictly_increasing(len in 1usize..5000, kf in 0.0f64..1.0) {
            let k = 1 + ((len - 1) as f64 * kf) as usize;
            let list: Vec<usize> = (0..len).collect();
            let out = uniform_subsample(&list, k).unwrap();
            prop_assert_eq!(out.len(), k);
            prop_assert!(out.windows(2).all(|w| w[0] < w[1]));
            prop_assert_eq!(out[0], 0);
            if k >= 2 {
                prop_assert_eq!(*out.last().unwrap(), len - 1);
            }
        }
    }
}
