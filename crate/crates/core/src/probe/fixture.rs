//! Writer for minimal ISO BMFF files with known sample tables, plus a reader
//! wrapper that logs which byte ranges were touched.

use std::io::{self, Read, Seek, SeekFrom};
use std::ops::Range;

use crate::types::VideoMetadata;

#[derive(Debug, Clone, PartialEq)]
pub struct Mp4Fixture {
    pub sample_count: u32,
    pub timescale: u32,
    pub sample_delta: u32,
    /// Overrides `sample_delta` with explicit `stts` runs when set.
    pub time_to_sample: Option<Vec<(u32, u32)>>,
    /// 1-based; `None` omits the `stss` box.
    pub sync_samples: Option<Vec<u32>>,
    pub mdat_len: usize,
    pub mdat_fill: u8,
    pub video_track: bool,
    /// Adds a sound track before the video track.
    pub audio_track: bool,
    pub mdhd_v1: bool,
    pub largesize_mdat: bool,
    /// Place `mdat` ahead of `moov` (the common "not fast-start" layout).
    pub mdat_first: bool,
}

impl Default for Mp4Fixture {
    fn default() -> Self {
        Self {
            sample_count: 100,
            timescale: 30,
            sample_delta: 1,
            time_to_sample: None,
            sync_samples: Some(vec![1]),
            mdat_len: 4096,
            mdat_fill: 0x5A,
            video_track: true,
            audio_track: false,
            mdhd_v1: false,
            largesize_mdat: false,
            mdat_first: true,
        }
    }
}

impl Mp4Fixture {
    /// A constant-rate fixture whose probe result equals `meta`.
    ///
    /// Panics if the frame rate or frame count does not fit in 32 bits.
    pub fn from_metadata(meta: &VideoMetadata) -> Self {
        let all_sync = meta.keyframe_indices.len() as u64 == meta.frame_count;
        Self {
            sample_count: u32::try_from(meta.frame_count).expect("frame count fits u32"),
            timescale: u32::try_from(meta.fps.num).expect("fps numerator fits u32"),
            sample_delta: u32::try_from(meta.fps.den).expect("fps denominator fits u32"),
            sync_samples: if all_sync {
                None
            } else {
                Some(
                    meta.keyframe_indices
                        .iter()
                        .map(|&k| k as u32 + 1)
                        .collect(),
                )
            },
            ..Self::default()
        }
    }

    pub fn build(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend(boxed(b"ftyp", &{
            let mut b = Vec::new();
            b.extend(b"isom");
            b.extend(512u32.to_be_bytes());
            b.extend(b"isomiso2avc1mp41");
            b
        }));
        let mdat_header = if self.largesize_mdat { 16 } else { 8 };
        // Chunk offsets depend on where mdat lands, and moov's size does not
        // depend on the offset value, so build moov once to learn its length.
        let moov_len = self.moov(0).len();
        let mdat_payload_at = if self.mdat_first {
            out.len() + mdat_header
        } else {
            out.len() + moov_len + mdat_header
        };
        let moov = self.moov(mdat_payload_at as u32);
        let mdat = self.mdat();
        if self.mdat_first {
            out.extend(mdat);
            out.extend(moov);
        } else {
            out.extend(moov);
            out.extend(mdat);
        }
        out
    }

    fn mdat(&self) -> Vec<u8> {
        let payload = vec![self.mdat_fill; self.mdat_len];
        if self.largesize_mdat {
            let mut b = Vec::with_capacity(16 + payload.len());
            b.extend(1u32.to_be_bytes());
            b.extend(b"mdat");
            b.extend((16 + payload.len() as u64).to_be_bytes());
            b.extend(payload);
            b
        } else {
            boxed(b"mdat", &payload)
        }
    }

    fn stts(&self) -> Vec<(u32, u32)> {
        self.time_to_sample
            .clone()
            .unwrap_or_else(|| vec![(self.sample_count, self.sample_delta)])
    }

    fn duration(&self) -> u64 {
        self.stts().iter().map(|&(c, d)| c as u64 * d as u64).sum()
    }

    fn moov(&self, chunk_offset: u32) -> Vec<u8> {
        let mut body = Vec::new();
        body.extend(full_box(b"mvhd", 0, &{
            let mut b = Vec::new();
            b.extend(0u32.to_be_bytes());
            b.extend(0u32.to_be_bytes());
            b.extend(self.timescale.to_be_bytes());
            b.extend((self.duration() as u32).to_be_bytes());
            b.extend(0x0001_0000u32.to_be_bytes()); // rate 1.0
            b.extend(0x0100u16.to_be_bytes()); // volume 1.0
            b.extend([0u8; 10]);
            b.extend(identity_matrix());
            b.extend([0u8; 24]);
            b.extend(3u32.to_be_bytes()); // next track id
            b
        }));
        if self.audio_track {
            body.extend(self.trak(
                2,
                b"soun",
                48_000,
                &[(self.sample_count, 1024)],
                None,
                chunk_offset,
            ));
        }
        if self.video_track {
            body.extend(self.trak(
                1,
                b"vide",
                self.timescale,
                &self.stts(),
                self.sync_samples.as_deref(),
                chunk_offset,
            ));
        }
        boxed(b"moov", &body)
    }

    fn trak(
        &self,
        track_id: u32,
        handler: &[u8; 4],
        timescale: u32,
        stts: &[(u32, u32)],
        stss: Option<&[u32]>,
        chunk_offset: u32,
    ) -> Vec<u8> {
        let samples: u32 = stts.iter().map(|&(c, _)| c).sum();
        let duration: u64 = stts.iter().map(|&(c, d)| c as u64 * d as u64).sum();

        let tkhd = full_box(b"tkhd", 3, &{
            let mut b = Vec::new();
            b.extend(0u32.to_be_bytes());
            b.extend(0u32.to_be_bytes());
            b.extend(track_id.to_be_bytes());
            b.extend(0u32.to_be_bytes());
            b.extend((duration as u32).to_be_bytes());
            b.extend([0u8; 16]);
            b.extend(identity_matrix());
            b.extend((320u32 << 16).to_be_bytes());
            b.extend((240u32 << 16).to_be_bytes());
            b
        });

        let mdhd = if self.mdhd_v1 {
            full_box(b"mdhd", 1, &{
                let mut b = Vec::new();
                b.extend(0u64.to_be_bytes());
                b.extend(0u64.to_be_bytes());
                b.extend(timescale.to_be_bytes());
                b.extend(duration.to_be_bytes());
                b.extend(0x55c4u16.to_be_bytes()); // "und"
                b.extend(0u16.to_be_bytes());
                b
            })
        } else {
            full_box(b"mdhd", 0, &{
                let mut b = Vec::new();
                b.extend(0u32.to_be_bytes());
                b.extend(0u32.to_be_bytes());
                b.extend(timescale.to_be_bytes());
                b.extend((duration as u32).to_be_bytes());
                b.extend(0x55c4u16.to_be_bytes());
                b.extend(0u16.to_be_bytes());
                b
            })
        };

        let hdlr = full_box(b"hdlr", 0, &{
            let mut b = Vec::new();
            b.extend(0u32.to_be_bytes());
            b.extend(handler);
            b.extend([0u8; 12]);
            b.extend(b"fixture\0");
            b
        });

        let entry = if handler == b"vide" {
            boxed(b"avc1", &{
                let mut b = vec![0u8; 6];
                b.extend(1u16.to_be_bytes()); // data_reference_index
                b.extend([0u8; 16]);
                b.extend(320u16.to_be_bytes());
                b.extend(240u16.to_be_bytes());
                b.extend(0x0048_0000u32.to_be_bytes());
                b.extend(0x0048_0000u32.to_be_bytes());
                b.extend(0u32.to_be_bytes());
                b.extend(1u16.to_be_bytes()); // frame_count
                b.extend([0u8; 32]);
                b.extend(0x0018u16.to_be_bytes());
                b.extend((-1i16).to_be_bytes());
                b
            })
        } else {
            boxed(b"mp4a", &{
                let mut b = vec![0u8; 6];
                b.extend(1u16.to_be_bytes());
                b.extend([0u8; 8]);
                b.extend(2u16.to_be_bytes());
                b.extend(16u16.to_be_bytes());
                b.extend([0u8; 4]);
                b.extend((timescale << 16).to_be_bytes());
                b
            })
        };
        let stsd = full_box(b"stsd", 0, &{
            let mut b = Vec::new();
            b.extend(1u32.to_be_bytes());
            b.extend(entry);
            b
        });
        let stts_box = full_box(b"stts", 0, &{
            let mut b = Vec::new();
            b.extend((stts.len() as u32).to_be_bytes());
            for &(c, d) in stts {
                b.extend(c.to_be_bytes());
                b.extend(d.to_be_bytes());
            }
            b
        });
        let stsc = full_box(b"stsc", 0, &{
            let mut b = Vec::new();
            b.extend(1u32.to_be_bytes());
            b.extend(1u32.to_be_bytes());
            b.extend(samples.max(1).to_be_bytes());
            b.extend(1u32.to_be_bytes());
            b
        });
        let sample_size = (self.mdat_len as u32 / samples.max(1)).max(1);
        let stsz = full_box(b"stsz", 0, &{
            let mut b = Vec::new();
            b.extend(sample_size.to_be_bytes());
            b.extend(samples.to_be_bytes());
            b
        });
        let stco = full_box(b"stco", 0, &{
            let mut b = Vec::new();
            b.extend(1u32.to_be_bytes());
            b.extend(chunk_offset.to_be_bytes());
            b
        });

        let mut stbl = Vec::new();
        stbl.extend(stsd);
        stbl.extend(stts_box);
        if let Some(sync) = stss {
            stbl.extend(full_box(b"stss", 0, &{
                let mut b = Vec::new();
                b.extend((sync.len() as u32).to_be_bytes());
                for &s in sync {
                    b.extend(s.to_be_bytes());
                }
                b
            }));
        }
        stbl.extend(stsc);
        stbl.extend(stsz);
        stbl.extend(stco);

        let media_header = if handler == b"vide" {
            full_box(b"vmhd", 1, &[0u8; 8])
        } else {
            full_box(b"smhd", 0, &[0u8; 4])
        };
        let dinf = boxed(
            b"dinf",
            &full_box(b"dref", 0, &{
                let mut b = Vec::new();
                b.extend(1u32.to_be_bytes());
                b.extend(full_box(b"url ", 1, &[]));
                b
            }),
        );
        let mut minf = Vec::new();
        minf.extend(media_header);
        minf.extend(dinf);
        minf.extend(boxed(b"stbl", &stbl));

        let mut mdia = Vec::new();
        mdia.extend(mdhd);
        mdia.extend(hdlr);
        mdia.extend(boxed(b"minf", &minf));

        let mut trak = Vec::new();
        trak.extend(tkhd);
        trak.extend(boxed(b"mdia", &mdia));
        boxed(b"trak", &trak)
    }
}

fn boxed(kind: &[u8; 4], body: &[u8]) -> Vec<u8> {
    let mut b = Vec::with_capacity(8 + body.len());
    b.extend(((8 + body.len()) as u32).to_be_bytes());
    b.extend(kind);
    b.extend(body);
    b
}

fn full_box(kind: &[u8; 4], version: u8, body: &[u8]) -> Vec<u8> {
    let mut b = Vec::with_capacity(4 + body.len());
    b.push(version);
    b.extend([0u8; 3]);
    b.extend(body);
    boxed(kind, &b)
}

fn identity_matrix() -> Vec<u8> {
    [0x0001_0000u32, 0, 0, 0, 0x0001_0000, 0, 0, 0, 0x4000_0000]
        .iter()
        .flat_map(|v| v.to_be_bytes())
        .collect()
}

/// Offset of the first top-level box of type `kind`.
pub fn find_box(bytes: &[u8], kind: &[u8; 4]) -> Option<usize> {
    let mut pos = 0usize;
    while pos + 8 <= bytes.len() {
        let size32 = u32::from_be_bytes(bytes[pos..pos + 4].try_into().ok()?) as u64;
        let size = match size32 {
            0 => (bytes.len() - pos) as u64,
            1 => u64::from_be_bytes(bytes.get(pos + 8..pos + 16)?.try_into().ok()?),
            s => s,
        };
        if &bytes[pos + 4..pos + 8] == kind {
            return Some(pos);
        }
        if size < 8 {
            return None;
        }
        pos = pos.checked_add(size as usize)?;
    }
    None
}

/// Byte range of the top-level `mdat` payload.
pub fn mdat_payload_range(bytes: &[u8]) -> Option<Range<usize>> {
    let at = find_box(bytes, b"mdat")?;
    let size32 = u32::from_be_bytes(bytes[at..at + 4].try_into().ok()?);
    let (size, header) = match size32 {
        0 => ((bytes.len() - at) as u64, 8),
        1 => (
            u64::from_be_bytes(bytes[at + 8..at + 16].try_into().ok()?),
            16,
        ),
        s => (s as u64, 8),
    };
    Some(at + header..at + size as usize)
}

/// Wraps a reader and logs every byte range returned by `read`.
#[derive(Debug)]
pub struct RecordingReader<R> {
    inner: R,
    pos: u64,
    reads: Vec<Range<usize>>,
}

impl<R> RecordingReader<R> {
    pub fn new(inner: R) -> Self {
        Self {
            inner,
            pos: 0,
            reads: Vec::new(),
        }
    }

    pub fn reads(&self) -> &[Range<usize>] {
        &self.reads
    }

    pub fn bytes_read(&self) -> usize {
        self.reads.iter().map(|r| r.len()).sum()
    }

    /// True when no logged read overlaps `range`.
    pub fn untouched(&self, range: &Range<usize>) -> bool {
        self.reads
            .iter()
            .all(|r| r.is_empty() || r.end <= range.start || r.start >= range.end)
    }
}

impl<R: Read> Read for RecordingReader<R> {
    fn read(&mut self, buf: &mut [u8]) -> io::Result<usize> {
        let n = self.inner.read(buf)?;
        let start = self.pos as usize;
        self.reads.push(start..start + n);
        self.pos += n as u64;
        Ok(n)
    }
}

impl<R: Seek> Seek for RecordingReader<R> {
    fn seek(&mut self, from: SeekFrom) -> io::Result<u64> {
        self.pos = self.inner.seek(from)?;
        Ok(self.pos)
    }
}
