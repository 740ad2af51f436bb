use std::io::Cursor;

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use tokenbridge_core::probe::fixture::{mdat_payload_range, Mp4Fixture, RecordingReader};
use tokenbridge_core::probe::{probe_mp4, probe_mp4_reader, ProbeError};
use tokenbridge_core::{FrameRate, VideoMetadata};

fn random_meta(rng: &mut StdRng) -> VideoMetadata {
    let frame_count = rng.random_range(1..20_000u64);
    let fps = match rng.random_range(0..3) {
        0 => FrameRate::integer(rng.random_range(1..=120)),
        1 => FrameRate::new(30_000, 1001),
        _ => FrameRate::new(rng.random_range(1..=240), rng.random_range(1..=8)),
    };
    let keys = match rng.random_range(0..4) {
        0 => (0..frame_count).collect(),
        1 => vec![0],
        _ => {
            let gop = rng.random_range(1..=frame_count.min(600));
            (0..frame_count).step_by(gop as usize).collect()
        }
    };
    VideoMetadata::new(frame_count, fps, keys)
}

#[test]
fn randomized_fixtures_round_trip() {
    let mut rng = StdRng::seed_from_u64(0x4D50);
    for i in 0..60 {
        let meta = random_meta(&mut rng);
        let mut fx = Mp4Fixture::from_metadata(&meta);
        fx.mdat_first = rng.random_bool(0.5);
        fx.audio_track = rng.random_bool(0.3);
        fx.mdhd_v1 = rng.random_bool(0.3);
        fx.largesize_mdat = rng.random_bool(0.2);
        fx.mdat_len = rng.random_range(0..20_000);
        let bytes = fx.build();
        let got = probe_mp4(&bytes).unwrap_or_else(|e| panic!("fixture {i}: {e}"));
        assert_eq!(got, meta, "fixture {i}");
    }
}

#[test]
fn pixel_payload_is_never_read() {
    let mut rng = StdRng::seed_from_u64(7);
    for _ in 0..20 {
        let meta = random_meta(&mut rng);
        let fx = Mp4Fixture {
            mdat_len: 64 * 1024,
            ..Mp4Fixture::from_metadata(&meta)
        };
        let bytes = fx.build();
        let mdat = mdat_payload_range(&bytes).unwrap();
        let mut reader = RecordingReader::new(Cursor::new(bytes.clone()));
        assert_eq!(probe_mp4_reader(&mut reader).unwrap(), meta);
        assert!(reader.untouched(&mdat));

        let mut zeroed = bytes;
        zeroed[mdat].fill(0);
        assert_eq!(probe_mp4(&zeroed).unwrap(), meta);
    }
}

#[test]
fn truncations_are_errors_not_panics() {
    let bytes = Mp4Fixture {
        mdat_first: false,
        sync_samples: Some(vec![1, 31, 61, 91]),
        ..Default::default()
    }
    .build();
    let meta = probe_mp4(&bytes).unwrap();
    assert_eq!(meta.keyframe_indices, vec![0, 30, 60, 90]);
    let mut saw_malformed = false;
    for cut in 0..bytes.len() {
        match probe_mp4(&bytes[..cut]) {
            Err(ProbeError::MalformedContainer(_)) => saw_malformed = true,
            Err(_) => {}
            Ok(m) => assert_eq!(m, meta, "cut at {cut}"),
        }
    }
    assert!(saw_malformed);
}
