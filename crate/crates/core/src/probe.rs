//! Video metadata extraction without decoding.
//!
//! ISO BMFF (MP4/MOV) files are parsed natively: only the `moov` tree is
//! read, `mdat` and every other non-metadata box are skipped with a seek.
//! Other containers are described by a JSON sidecar at `<video>.meta.json`.

use std::fs::File;
use std::io::{self, BufReader, Read, Seek, SeekFrom};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::types::{FrameRate, VideoMetadata};

pub mod fixture;

#[derive(Debug, Error)]
pub enum ProbeError {
    #[error("malformed container: {0}")]
    MalformedContainer(String),
    #[error("no video track")]
    NoVideoTrack,
    #[error("no sync sample table; every sample is a sync sample")]
    MissingSyncTable,
    #[error("sidecar {0} not found")]
    SidecarMissing(PathBuf),
    #[error("sidecar schema: {0}")]
    SchemaError(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

fn malformed(msg: impl Into<String>) -> ProbeError {
    ProbeError::MalformedContainer(msg.into())
}

/// Sample tables of one video track, as stored (1-based sync numbers).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mp4SampleTables {
    pub sample_count: u32,
    pub timescale: u32,
    /// `None` when the track has no `stss` box.
    pub sync_samples: Option<Vec<u32>>,
    /// Run-length `(sample_count, sample_delta)` entries from `stts`.
    pub time_to_sample: Vec<(u32, u32)>,
}

impl Mp4SampleTables {
    pub fn sync_sample_indices(&self) -> Result<&[u32], ProbeError> {
        self.sync_samples
            .as_deref()
            .ok_or(ProbeError::MissingSyncTable)
    }

    /// Duration of sample `i` (0-based) in timescale units.
    pub fn sample_duration(&self, i: u32) -> Option<u32> {
        let mut first = 0u64;
        for &(count, delta) in &self.time_to_sample {
            if (i as u64) < first + count as u64 {
                return Some(delta);
            }
            first += count as u64;
        }
        None
    }

    pub fn total_duration(&self) -> u64 {
        self.time_to_sample
            .iter()
            .map(|&(c, d)| c as u64 * d as u64)
            .sum()
    }

    /// Converts to sampler metadata, applying the "all samples are sync
    /// samples" convention when `stss` is absent.
    pub fn to_metadata(&self) -> Result<VideoMetadata, ProbeError> {
        if self.sample_count == 0 {
            return Err(malformed("video track has no samples"));
        }
        if self.timescale == 0 {
            return Err(malformed("media timescale is zero"));
        }
        let stts_samples: u64 = self.time_to_sample.iter().map(|&(c, _)| c as u64).sum();
        if stts_samples != self.sample_count as u64 {
            return Err(malformed(format!(
                "stts covers {stts_samples} samples, stsz declares {}",
                self.sample_count
            )));
        }
        let total = self.total_duration();
        if total == 0 {
            return Err(malformed("track duration is zero"));
        }
        let fps = FrameRate::new(self.sample_count as u64 * self.timescale as u64, total);
        let keyframes = match self.sync_sample_indices() {
            Ok(sync) => sync.iter().map(|&s| s as u64 - 1).collect(),
            Err(ProbeError::MissingSyncTable) => (0..self.sample_count as u64).collect(),
            Err(e) => return Err(e),
        };
        Ok(VideoMetadata::new(self.sample_count as u64, fps, keyframes))
    }
}

/// Probes an in-memory MP4/MOV file.
pub fn probe_mp4(bytes: &[u8]) -> Result<VideoMetadata, ProbeError> {
    probe_mp4_reader(io::Cursor::new(bytes))
}

pub fn probe_mp4_reader<R: Read + Seek>(reader: R) -> Result<VideoMetadata, ProbeError> {
    read_sample_tables(reader)?.to_metadata()
}

// Metadata boxes are small; anything beyond this is treated as corrupt.
const MAX_LEAF_BOX: u64 = 64 << 20;

#[derive(Debug, Clone, Copy)]
struct BoxHeader {
    kind: [u8; 4],
    /// Offset of the payload (after size/type/largesize).
    body_start: u64,
    end: u64,
}

fn read_exact_or_malformed<R: Read>(
    r: &mut R,
    buf: &mut [u8],
    what: &str,
) -> Result<(), ProbeError> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => malformed(format!("truncated {what}")),
        _ => ProbeError::Io(e),
    })
}

fn read_box_header<R: Read + Seek>(
    r: &mut R,
    pos: u64,
    parent_end: u64,
) -> Result<BoxHeader, ProbeError> {
    if parent_end - pos < 8 {
        return Err(malformed(format!(
            "{} stray bytes at offset {pos}",
            parent_end - pos
        )));
    }
    r.seek(SeekFrom::Start(pos))?;
    let mut head = [0u8; 8];
    read_exact_or_malformed(r, &mut head, "box header")?;
    let size32 = u32::from_be_bytes([head[0], head[1], head[2], head[3]]) as u64;
    let kind = [head[4], head[5], head[6], head[7]];
    let (size, header_len) = match size32 {
        0 => (parent_end - pos, 8),
        1 => {
            let mut large = [0u8; 8];
            read_exact_or_malformed(r, &mut large, "largesize")?;
            (u64::from_be_bytes(large), 16)
        }
        s => (s, 8),
    };
    if size < header_len {
        return Err(malformed(format!(
            "box {} at {pos} has impossible size {size}",
            fourcc(&kind)
        )));
    }
    let end = pos
        .checked_add(size)
        .ok_or_else(|| malformed("box size overflow"))?;
    if end > parent_end {
        return Err(malformed(format!(
            "box {} at {pos} extends to {end}, beyond its parent ({parent_end})",
            fourcc(&kind)
        )));
    }
    Ok(BoxHeader {
        kind,
        body_start: pos + header_len,
        end,
    })
}

fn fourcc(kind: &[u8; 4]) -> String {
    kind.iter()
        .map(|&b| if b.is_ascii_graphic() { b as char } else { '?' })
        .collect()
}

fn children<R: Read + Seek>(r: &mut R, start: u64, end: u64) -> Result<Vec<BoxHeader>, ProbeError> {
    let mut out = Vec::new();
    let mut pos = start;
    while pos < end {
        let h = read_box_header(r, pos, end)?;
        pos = h.end;
        out.push(h);
    }
    Ok(out)
}

fn read_body<R: Read + Seek>(r: &mut R, h: &BoxHeader) -> Result<Vec<u8>, ProbeError> {
    let len = h.end - h.body_start;
    if len > MAX_LEAF_BOX {
        return Err(malformed(format!(
            "{} box too large ({len} bytes)",
            fourcc(&h.kind)
        )));
    }
    r.seek(SeekFrom::Start(h.body_start))?;
    let mut buf = vec![0u8; len as usize];
    read_exact_or_malformed(r, &mut buf, &fourcc(&h.kind))?;
    Ok(buf)
}

/// Big-endian cursor over one box body.
struct Body<'a> {
    kind: &'static str,
    data: &'a [u8],
    pos: usize,
}

impl<'a> Body<'a> {
    fn new(kind: &'static str, data: &'a [u8]) -> Self {
        Self { kind, data, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], ProbeError> {
        if self.data.len() - self.pos < n {
            return Err(malformed(format!("{} box truncated", self.kind)));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, ProbeError> {
        let b = self.take(4)?;
        Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self) -> Result<u64, ProbeError> {
        let b = self.take(8)?;
        let mut a = [0u8; 8];
        a.copy_from_slice(b);
        Ok(u64::from_be_bytes(a))
    }

    /// Reads the full-box version byte and skips the flags.
    fn version(&mut self) -> Result<u8, ProbeError> {
        Ok(self.take(4)?[0])
    }

    /// Entry count checked against the remaining bytes.
    fn count(&mut self, entry_size: usize) -> Result<usize, ProbeError> {
        let n = self.u32()? as usize;
        if n.saturating_mul(entry_size) > self.data.len() - self.pos {
            return Err(malformed(format!(
                "{} entry count {n} exceeds box",
                self.kind
            )));
        }
        Ok(n)
    }
}

#[derive(Default)]
struct TrackScan {
    handler: Option<[u8; 4]>,
    timescale: Option<u32>,
    sample_entries: Option<u32>,
    stts: Option<Vec<(u32, u32)>>,
    stss: Option<Vec<u32>>,
    sample_count: Option<u32>,
}

/// Reads the sample tables of the first video track.
pub fn read_sample_tables<R: Read + Seek>(mut r: R) -> Result<Mp4SampleTables, ProbeError> {
    let len = r.seek(SeekFrom::End(0))?;
    let top = children(&mut r, 0, len)?;
    let moov = top
        .iter()
        .find(|h| &h.kind == b"moov")
        .ok_or_else(|| malformed("no moov box"))?;
    for trak in children(&mut r, moov.body_start, moov.end)?
        .iter()
        .filter(|h| &h.kind == b"trak")
    {
        let mut scan = TrackScan::default();
        scan_container(&mut r, trak, &mut scan)?;
        if scan.handler != Some(*b"vide") {
            continue;
        }
        return finish_track(scan);
    }
    Err(ProbeError::NoVideoTrack)
}

fn scan_container<R: Read + Seek>(
    r: &mut R,
    parent: &BoxHeader,
    scan: &mut TrackScan,
) -> Result<(), ProbeError> {
    for h in children(r, parent.body_start, parent.end)? {
        match &h.kind {
            b"mdia" | b"minf" | b"stbl" => scan_container(r, &h, scan)?,
            b"mdhd" => {
                let data = read_body(r, &h)?;
                let mut b = Body::new("mdhd", &data);
                let v = b.version()?;
                if v == 1 {
                    b.u64()?;
                    b.u64()?;
                } else {
                    b.u32()?;
                    b.u32()?;
                }
                scan.timescale = Some(b.u32()?);
            }
            b"hdlr" => {
                let data = read_body(r, &h)?;
                let mut b = Body::new("hdlr", &data);
                b.version()?;
                b.u32()?; // pre_defined
                let t = b.take(4)?;
                scan.handler = Some([t[0], t[1], t[2], t[3]]);
            }
            b"stsd" => {
                let data = read_body(r, &h)?;
                let mut b = Body::new("stsd", &data);
                b.version()?;
                scan.sample_entries = Some(b.u32()?);
            }
            b"stts" => {
                let data = read_body(r, &h)?;
                let mut b = Body::new("stts", &data);
                b.version()?;
                let n = b.count(8)?;
                let mut entries = Vec::with_capacity(n);
                for _ in 0..n {
                    entries.push((b.u32()?, b.u32()?));
                }
                scan.stts = Some(entries);
            }
            b"stss" => {
                let data = read_body(r, &h)?;
                let mut b = Body::new("stss", &data);
                b.version()?;
                let n = b.count(4)?;
                let mut samples = Vec::with_capacity(n);
                for _ in 0..n {
                    samples.push(b.u32()?);
                }
                scan.stss = Some(samples);
            }
            b"stsz" => {
                let data = read_body(r, &h)?;
                let mut b = Body::new("stsz", &data);
                b.version()?;
                let uniform = b.u32()?;
                let count = b.u32()?;
                if uniform == 0 && (count as usize).saturating_mul(4) > data.len() - b.pos {
                    return Err(malformed("stsz sample table truncated"));
                }
                scan.sample_count = Some(count);
            }
            b"stz2" => {
                let data = read_body(r, &h)?;
                let mut b = Body::new("stz2", &data);
                b.version()?;
                b.u32()?; // reserved + field_size
                scan.sample_count = Some(b.u32()?);
            }
            _ => {}
        }
    }
    Ok(())
}

fn finish_track(scan: TrackScan) -> Result<Mp4SampleTables, ProbeError> {
    let timescale = scan
        .timescale
        .ok_or_else(|| malformed("video track without mdhd"))?;
    match scan.sample_entries {
        Some(n) if n >= 1 => {}
        Some(_) => return Err(malformed("stsd has no sample entries")),
        None => return Err(malformed("video track without stsd")),
    }
    let time_to_sample = scan
        .stts
        .ok_or_else(|| malformed("video track without stts"))?;
    let sample_count = match scan.sample_count {
        Some(n) => n,
        None => {
            let n: u64 = time_to_sample.iter().map(|&(c, _)| c as u64).sum();
            u32::try_from(n).map_err(|_| malformed("sample count overflow"))?
        }
    };
    if let Some(sync) = &scan.stss {
        let mut prev = 0u32;
        for &s in sync {
            if s == 0 || s > sample_count || s <= prev {
                return Err(malformed(format!(
                    "sync sample {s} invalid (count {sample_count}, previous {prev})"
                )));
            }
            prev = s;
        }
    }
    Ok(Mp4SampleTables {
        sample_count,
        timescale,
        sync_samples: scan.stss,
        time_to_sample,
    })
}

/// On-disk sidecar document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub frame_count: u64,
    pub fps: f64,
    pub keyframes: Vec<u64>,
}

impl Sidecar {
    pub fn to_metadata(&self) -> Result<VideoMetadata, ProbeError> {
        let schema = |m: String| Err(ProbeError::SchemaError(m));
        if self.frame_count == 0 {
            return schema("frame_count must be >= 1".into());
        }
        let Some(fps) = FrameRate::from_f64(self.fps) else {
            return schema(format!("fps {} must be a positive number", self.fps));
        };
        if self.keyframes.first() != Some(&0) {
            return schema("keyframes must start with frame 0".into());
        }
        for w in self.keyframes.windows(2) {
            if w[1] <= w[0] {
                return schema(format!("keyframes not strictly increasing at {}", w[1]));
            }
        }
        if let Some(&k) = self.keyframes.iter().find(|&&k| k >= self.frame_count) {
            return schema(format!("keyframe {k} >= frame_count {}", self.frame_count));
        }
        Ok(VideoMetadata::new(
            self.frame_count,
            fps,
            self.keyframes.clone(),
        ))
    }
}

/// `<video>.meta.json`; a path already ending in `.meta.json` is returned as is.
pub fn sidecar_path(video: &Path) -> PathBuf {
    if video.to_string_lossy().ends_with(".meta.json") {
        return video.to_path_buf();
    }
    let mut s = video.as_os_str().to_owned();
    s.push(".meta.json");
    PathBuf::from(s)
}

pub fn probe_sidecar(video: &Path) -> Result<VideoMetadata, ProbeError> {
    let path = sidecar_path(video);
    let text = match std::fs::read_to_string(&path) {
        Ok(t) => t,
        Err(e) if e.kind() == io::ErrorKind::NotFound => {
            return Err(ProbeError::SidecarMissing(path))
        }
        Err(e) => return Err(e.into()),
    };
    let doc: Sidecar =
        serde_json::from_str(&text).map_err(|e| ProbeError::SchemaError(e.to_string()))?;
    doc.to_metadata()
}

const ISO_BMFF_EXTENSIONS: &[&str] = &["mp4", "m4v", "mov", "3gp"];

/// Native parse for ISO BMFF extensions, sidecar for everything else.
pub fn probe_path(video: &Path) -> Result<VideoMetadata, ProbeError> {
    let ext = video
        .extension()
        .map(|e| e.to_string_lossy().to_ascii_lowercase())
        .unwrap_or_default();
    if ISO_BMFF_EXTENSIONS.contains(&ext.as_str()) {
        let file = File::open(video)?;
        probe_mp4_reader(BufReader::new(file))
    } else {
        probe_sidecar(video)
    }
}
