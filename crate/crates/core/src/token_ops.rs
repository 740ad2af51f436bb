//! Token merging to a target density and the `TBT1` payload codec.
//!
//! Payload layout (little-endian):
//!
//! ```text
//! "TBT1" u16 version u32 frames u32 tokens_per_frame u32 dim u8 dtype u8 clip_size u32 crc32
//! zstd frame of frames*tokens_per_frame*dim f32 values
//! ```
//!
//! The checksum covers the uncompressed body.

use thiserror::Error;

use crate::types::{Action, TokenTensor, TypeError};

pub const PAYLOAD_MAGIC: &[u8; 4] = b"TBT1";
pub const PAYLOAD_VERSION: u16 = 1;
pub const HEADER_LEN: usize = 24;
pub const DTYPE_F32: u8 = 0;
pub const ZSTD_LEVEL: i32 = 3;

// Refuse to allocate more than this for a decoded body.
const MAX_BODY_BYTES: usize = 1 << 31;

#[derive(Debug, Error)]
pub enum TokenOpsError {
    #[error("density {density} exceeds {available} tokens per frame")]
    DensityTooLarge { density: u32, available: usize },
    #[error("density must be positive")]
    ZeroDensity,
    #[error("corrupt payload: {0}")]
    CorruptPayload(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error(transparent)]
    Tensor(#[from] TypeError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Merged {
    pub tokens: TokenTensor,
    /// Groups were sized by balanced partition because the density does not
    /// divide the per-frame token count.
    pub indivisible: bool,
}

/// Half-open token range of group `g` when `len` tokens are split into `groups`.
pub fn group_bounds(len: usize, groups: usize, g: usize) -> (usize, usize) {
    (g * len / groups, (g + 1) * len / groups)
}

/// Average-pools each frame's token sequence into `a.density` contiguous groups.
pub fn merge_to_density(raw: &TokenTensor, a: Action) -> Result<Merged, TokenOpsError> {
    raw.validate()?;
    let groups = a.density as usize;
    let tpf = raw.tokens_per_frame;
    if groups == 0 {
        return Err(TokenOpsError::ZeroDensity);
    }
    if groups > tpf {
        return Err(TokenOpsError::DensityTooLarge {
            density: a.density,
            available: tpf,
        });
    }
    let dim = raw.dim;
    let mut out = Vec::with_capacity(raw.frames * groups * dim);
    let mut acc = vec![0.0f64; dim];
    for frame in raw.data.chunks_exact(tpf * dim) {
        for g in 0..groups {
            let (lo, hi) = group_bounds(tpf, groups, g);
            acc.iter_mut().for_each(|v| *v = 0.0);
            for tok in frame[lo * dim..hi * dim].chunks_exact(dim) {
                for (s, &x) in acc.iter_mut().zip(tok) {
                    *s += x as f64;
                }
            }
            let count = (hi - lo) as f64;
            out.extend(acc.iter().map(|s| (s / count) as f32));
        }
    }
    Ok(Merged {
        tokens: TokenTensor::new(raw.frames, groups, dim, raw.clip_size, out)?,
        indivisible: tpf % groups != 0,
    })
}

fn header_u32(v: usize, what: &str) -> Result<[u8; 4], TokenOpsError> {
    u32::try_from(v)
        .map(u32::to_le_bytes)
        .map_err(|_| TokenOpsError::ShapeMismatch(format!("{what} {v} does not fit in u32")))
}

pub fn pack(tokens: &TokenTensor) -> Result<Vec<u8>, TokenOpsError> {
    tokens.validate()?;
    let clip = u8::try_from(tokens.clip_size).map_err(|_| {
        TokenOpsError::ShapeMismatch(format!("clip size {} exceeds 255", tokens.clip_size))
    })?;
    let body: Vec<u8> = tokens.data.iter().flat_map(|v| v.to_le_bytes()).collect();
    let crc = crc32fast::hash(&body);
    let compressed = zstd::bulk::compress(&body, ZSTD_LEVEL)
        .map_err(|e| TokenOpsError::CorruptPayload(format!("compression failed: {e}")))?;

    let mut out = Vec::with_capacity(HEADER_LEN + compressed.len());
    out.extend_from_slice(PAYLOAD_MAGIC);
    out.extend_from_slice(&PAYLOAD_VERSION.to_le_bytes());
    out.extend_from_slice(&header_u32(tokens.frames, "frames")?);
    out.extend_from_slice(&header_u32(tokens.tokens_per_frame, "tokens per frame")?);
    out.extend_from_slice(&header_u32(tokens.dim, "dim")?);
    out.push(DTYPE_F32);
    out.push(clip);
    out.extend_from_slice(&crc.to_le_bytes());
    out.extend_from_slice(&compressed);
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PayloadHeader {
    pub version: u16,
    pub frames: usize,
    pub tokens_per_frame: usize,
    pub dim: usize,
    pub dtype: u8,
    pub clip_size: usize,
    pub crc32: u32,
}

impl PayloadHeader {
    pub fn parse(payload: &[u8]) -> Result<Self, TokenOpsError> {
        if payload.len() < HEADER_LEN {
            return Err(TokenOpsError::CorruptPayload(format!(
                "{} bytes is shorter than the header",
                payload.len()
            )));
        }
        if &payload[..4] != PAYLOAD_MAGIC {
            return Err(TokenOpsError::CorruptPayload("bad magic".into()));
        }
        let u32_at = |o: usize| u32::from_le_bytes(payload[o..o + 4].try_into().unwrap());
        let h = Self {
            version: u16::from_le_bytes([payload[4], payload[5]]),
            frames: u32_at(6) as usize,
            tokens_per_frame: u32_at(10) as usize,
            dim: u32_at(14) as usize,
            dtype: payload[18],
            clip_size: payload[19] as usize,
            crc32: u32_at(20),
        };
        if h.version != PAYLOAD_VERSION {
            return Err(TokenOpsError::CorruptPayload(format!(
                "unsupported version {}",
                h.version
            )));
        }
        if h.dtype != DTYPE_F32 {
            return Err(TokenOpsError::CorruptPayload(format!(
                "unknown dtype {}",
                h.dtype
            )));
        }
        Ok(h)
    }

    pub fn body_bytes(&self) -> Result<usize, TokenOpsError> {
        self.frames
            .checked_mul(self.tokens_per_frame)
            .and_then(|v| v.checked_mul(self.dim))
            .and_then(|v| v.checked_mul(4))
            .filter(|&v| v <= MAX_BODY_BYTES)
            .ok_or_else(|| {
                TokenOpsError::ShapeMismatch(format!(
                    "{}x{}x{} is too large",
                    self.frames, self.tokens_per_frame, self.dim
                ))
            })
    }
}

pub fn unpack(payload: &[u8]) -> Result<TokenTensor, TokenOpsError> {
    let h = PayloadHeader::parse(payload)?;
    let expected = h.body_bytes()?;
    let body = zstd::bulk::decompress(&payload[HEADER_LEN..], expected)
        .map_err(|e| TokenOpsError::CorruptPayload(format!("zstd: {e}")))?;
    if body.len() != expected {
        return Err(TokenOpsError::CorruptPayload(format!(
            "body has {} bytes, header implies {expected}",
            body.len()
        )));
    }
    if crc32fast::hash(&body) != h.crc32 {
        return Err(TokenOpsError::CorruptPayload("checksum mismatch".into()));
    }
    let data = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(TokenTensor::new(
        h.frames,
        h.tokens_per_frame,
        h.dim,
        h.clip_size,
        data,
    )?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_frame(values: &[f32]) -> TokenTensor {
        TokenTensor::new(1, values.len(), 1, 4, values.to_vec()).unwrap()
    }

    #[test]
    fn group_means() {
        let m = merge_to_density(&scalar_frame(&[1.0, 3.0, 5.0, 7.0]), Action::new(2)).unwrap();
        assert_eq!(m.tokens.data, vec![2.0, 6.0]);
        assert!(!m.indivisible);
    }

    #[test]
    fn full_density_is_identity() {
        let t = scalar_frame(&[0.1, -2.0, 9.5]);
        let m = merge_to_density(&t, Action::new(3)).unwrap();
        assert_eq!(m.tokens, t);
    }

    #[test]
    fn balanced_partition_when_indivisible() {
        let m =
            merge_to_density(&scalar_frame(&[1.0, 2.0, 3.0, 4.0, 5.0]), Action::new(2)).unwrap();
        assert!(m.indivisible);
        // Groups {1,2} and {3,4,5}.
        assert_eq!(m.tokens.data, vec![1.5, 4.0]);
        let sizes: Vec<usize> = (0..3)
            .map(|g| {
                let (lo, hi) = group_bounds(7, 3, g);
                hi - lo
            })
            .collect();
        assert_eq!(sizes, vec![2, 2, 3]);
    }

    #[test]
    fn density_errors() {
        let t = scalar_frame(&[1.0, 2.0]);
        assert!(matches!(
            merge_to_density(&t, Action::new(0)),
            Err(TokenOpsError::ZeroDensity)
        ));
        assert!(matches!(
            merge_to_density(&t, Action::new(4)),
            Err(TokenOpsError::DensityTooLarge {
                density: 4,
                available: 2
            })
        ));
    }

    #[test]
    fn header_layout() {
        let t = TokenTensor::new(2, 3, 1, 7, vec![0.0; 6]).unwrap();
        let p = pack(&t).unwrap();
        assert_eq!(&p[..4], b"TBT1");
        let h = PayloadHeader::parse(&p).unwrap();
        assert_eq!(
            (h.frames, h.tokens_per_frame, h.dim, h.clip_size),
            (2, 3, 1, 7)
        );
        assert_eq!(h.crc32, crc32fast::hash(&[0u8; 24]));
        assert_eq!(&p[HEADER_LEN..HEADER_LEN + 4], &[0x28, 0xB5, 0x2F, 0xFD]);
    }

    #[test]
    fn truncated_and_flipped_payloads_are_corrupt() {
        let t = TokenTensor::new(2, 4, 3, 4, (0..24).map(|i| i as f32 * 0.37).collect()).unwrap();
        let p = pack(&t).unwrap();
        for cut in [0, 10, HEADER_LEN, p.len() - 1] {
            assert!(
                matches!(unpack(&p[..cut]), Err(TokenOpsError::CorruptPayload(_))),
                "cut {cut}"
            );
        }
        let mut bad = p.clone();
        bad[21] ^= 0xFF;
        assert!(matches!(
            unpack(&bad),
            Err(TokenOpsError::CorruptPayload(_))
        ));
    }

    #[test]
    fn header_shape_disagreeing_with_body() {
        let t = TokenTensor::new(2, 4, 3, 4, vec![1.0; 24]).unwrap();
        let mut p = pack(&t).unwrap();
        p[6] = 1;
        assert!(unpack(&p).is_err());
        p[6] = 3;
        assert!(unpack(&p).is_err());
    }

    #[test]
    fn oversized_clip_is_rejected() {
        let t = TokenTensor::new(1, 1, 1, 300, vec![1.0]).unwrap();
        assert!(matches!(pack(&t), Err(TokenOpsError::ShapeMismatch(_))));
    }
}
