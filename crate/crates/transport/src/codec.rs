//! Length-prefixed binary frames.
//!
//! `u32 LE length | u8 type | body`, where `length` counts the type byte and
//! the body. Every body opens with a `u64 LE` query id (zero for the
//! handshake; the nonce for ping/pong). Integers and floats are
//! little-endian; strings are `u32` length-prefixed UTF-8.

use std::io::{self, Read, Write};

use thiserror::Error;
use tokenbridge_core::harness::{OffloadRequest, OffloadResponse};

pub const PROTOCOL_VERSION: u16 = 1;
pub const MIN_PROTOCOL_VERSION: u16 = 1;
/// Largest accepted `length` field.
pub const MAX_FRAME_LEN: u32 = 256 << 20;

/// Error codes that belong to the protocol itself; edge failures use the
/// codes of [`tokenbridge_core::harness::EdgeError::code`].
pub mod codes {
    pub const UNSUPPORTED_VERSION: u16 = 100;
    pub const MALFORMED_FRAME: u16 = 101;
    pub const UNEXPECTED_MESSAGE: u16 = 102;
    pub const INTERNAL: u16 = 103;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum MessageType {
    Hello = 1,
    HelloAck = 2,
    OffloadRequest = 3,
    OffloadResponse = 4,
    Error = 5,
    Ping = 6,
    Pong = 7,
}

impl TryFrom<u8> for MessageType {
    type Error = WireError;

    fn try_from(b: u8) -> Result<Self, WireError> {
        Ok(match b {
            1 => Self::Hello,
            2 => Self::HelloAck,
            3 => Self::OffloadRequest,
            4 => Self::OffloadResponse,
            5 => Self::Error,
            6 => Self::Ping,
            7 => Self::Pong,
            other => return Err(WireError::UnknownType(other)),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Message {
    Hello {
        version: u16,
    },
    HelloAck {
        version: u16,
    },
    OffloadRequest(OffloadRequest),
    OffloadResponse(OffloadResponse),
    Error {
        query_id: u64,
        code: u16,
        message: String,
    },
    Ping {
        nonce: u64,
    },
    Pong {
        nonce: u64,
    },
}

impl Message {
    pub fn kind(&self) -> MessageType {
        match self {
            Message::Hello { .. } => MessageType::Hello,
            Message::HelloAck { .. } => MessageType::HelloAck,
            Message::OffloadRequest(_) => MessageType::OffloadRequest,
            Message::OffloadResponse(_) => MessageType::OffloadResponse,
            Message::Error { .. } => MessageType::Error,
            Message::Ping { .. } => MessageType::Ping,
            Message::Pong { .. } => MessageType::Pong,
        }
    }

    pub fn query_id(&self) -> u64 {
        match self {
            Message::Hello { .. } | Message::HelloAck { .. } => 0,
            Message::OffloadRequest(r) => r.query_id,
            Message::OffloadResponse(r) => r.query_id,
            Message::Error { query_id, .. } => *query_id,
            Message::Ping { nonce } | Message::Pong { nonce } => *nonce,
        }
    }
}

#[derive(Debug, Error)]
pub enum WireError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("connection closed")]
    Closed,
    #[error("need {0} more bytes")]
    Incomplete(usize),
    #[error("frame length {0} exceeds the limit")]
    FrameTooLarge(u32),
    #[error("empty frame")]
    EmptyFrame,
    #[error("unknown message type {0}")]
    UnknownType(u8),
    #[error("malformed {kind:?} body: {reason}")]
    Malformed { kind: MessageType, reason: String },
    #[error("option {0:?} is not a single ASCII byte")]
    NonAsciiOption(char),
    #[error("field too long for the wire: {0} bytes")]
    FieldTooLong(usize),
}

impl WireError {
    /// Whether the byte stream can no longer be trusted to be at a frame
    /// boundary.
    pub fn is_fatal(&self) -> bool {
        matches!(
            self,
            WireError::Io(_)
                | WireError::Closed
                | WireError::Incomplete(_)
                | WireError::FrameTooLarge(_)
        )
    }
}

fn put_str(out: &mut Vec<u8>, s: &[u8]) -> Result<(), WireError> {
    let n = u32::try_from(s.len()).map_err(|_| WireError::FieldTooLong(s.len()))?;
    out.extend_from_slice(&n.to_le_bytes());
    out.extend_from_slice(s);
    Ok(())
}

/// Serializes one message as a complete frame.
pub fn encode(msg: &Message) -> Result<Vec<u8>, WireError> {
    let mut body = Vec::with_capacity(64);
    body.push(msg.kind() as u8);
    body.extend_from_slice(&msg.query_id().to_le_bytes());
    match msg {
        Message::Hello { version } | Message::HelloAck { version } => {
            body.extend_from_slice(&version.to_le_bytes())
        }
        Message::OffloadRequest(r) => {
            body.extend_from_slice(&r.density.to_le_bytes());
            body.extend_from_slice(&r.n_frames.to_le_bytes());
            let n = u8::try_from(r.options.len())
                .map_err(|_| WireError::FieldTooLong(r.options.len()))?;
            body.push(n);
            for &c in &r.options {
                if !c.is_ascii() {
                    return Err(WireError::NonAsciiOption(c));
                }
                body.push(c as u8);
            }
            put_str(&mut body, r.question.as_bytes())?;
            put_str(&mut body, &r.payload)?;
        }
        Message::OffloadResponse(r) => {
            if !r.answer.is_ascii() {
                return Err(WireError::NonAsciiOption(r.answer));
            }
            body.push(r.answer as u8);
            for v in [r.kappa, r.edge_ms, r.server_ms] {
                body.extend_from_slice(&v.to_le_bytes());
            }
        }
        Message::Error { code, message, .. } => {
            body.extend_from_slice(&code.to_le_bytes());
            put_str(&mut body, message.as_bytes())?;
        }
        Message::Ping { .. } | Message::Pong { .. } => {}
    }
    let len = u32::try_from(body.len()).map_err(|_| WireError::FieldTooLong(body.len()))?;
    if len > MAX_FRAME_LEN {
        return Err(WireError::FrameTooLarge(len));
    }
    let mut frame = Vec::with_capacity(4 + body.len());
    frame.extend_from_slice(&len.to_le_bytes());
    frame.extend_from_slice(&body);
    Ok(frame)
}

struct Cursor<'a> {
    buf: &'a [u8],
    kind: MessageType,
}

impl<'a> Cursor<'a> {
    fn bad(&self, reason: impl Into<String>) -> WireError {
        WireError::Malformed {
            kind: self.kind,
            reason: reason.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], WireError> {
        if self.buf.len() < n {
            return Err(self.bad(format!("needs {n} more bytes, {} left", self.buf.len())));
        }
        let (head, tail) = self.buf.split_at(n);
        self.buf = tail;
        Ok(head)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N], WireError> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    fn u8(&mut self) -> Result<u8, WireError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, WireError> {
        Ok(u16::from_le_bytes(self.array()?))
    }

    fn u32(&mut self) -> Result<u32, WireError> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn u64(&mut self) -> Result<u64, WireError> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    fn f64(&mut self) -> Result<f64, WireError> {
        Ok(f64::from_le_bytes(self.array()?))
    }

    fn bytes(&mut self) -> Result<&'a [u8], WireError> {
        let n = self.u32()? as usize;
        self.take(n)
    }

    fn string(&mut self) -> Result<String, WireError> {
        let b = self.bytes()?;
        String::from_utf8(b.to_vec()).map_err(|_| self.bad("string is not UTF-8"))
    }

    fn ascii(&mut self) -> Result<char, WireError> {
        let b = self.u8()?;
        if b.is_ascii() {
            Ok(b as char)
        } else {
            Err(self.bad(format!("option byte {b:#04x} is not ASCII")))
        }
    }
}

/// Decodes the body of a frame (type byte onwards).
pub fn decode_body(body: &[u8]) -> Result<Message, WireError> {
    let (&t, rest) = body.split_first().ok_or(WireError::EmptyFrame)?;
    let kind = MessageType::try_from(t)?;
    let mut c = Cursor { buf: rest, kind };
    let qid = c.u64()?;
    let msg = match kind {
        MessageType::Hello | MessageType::HelloAck => {
            if qid != 0 {
                return Err(c.bad("handshake query id must be zero"));
            }
            let version = c.u16()?;
            if kind == MessageType::Hello {
                Message::Hello { version }
            } else {
                Message::HelloAck { version }
            }
        }
        MessageType::OffloadRequest => {
            let density = c.u32()?;
            let n_frames = c.u32()?;
            let n = c.u8()? as usize;
            let options = (0..n).map(|_| c.ascii()).collect::<Result<Vec<_>, _>>()?;
            let question = c.string()?;
            let payload = c.bytes()?.to_vec();
            Message::OffloadRequest(OffloadRequest {
                query_id: qid,
                question,
                options,
                density,
                n_frames,
                payload,
            })
        }
        MessageType::OffloadResponse => Message::OffloadResponse(OffloadResponse {
            query_id: qid,
            answer: c.ascii()?,
            kappa: c.f64()?,
            edge_ms: c.f64()?,
            server_ms: c.f64()?,
        }),
        MessageType::Error => Message::Error {
            query_id: qid,
            code: c.u16()?,
            message: c.string()?,
        },
        MessageType::Ping => Message::Ping { nonce: qid },
        MessageType::Pong => Message::Pong { nonce: qid },
    };
    if !c.buf.is_empty() {
        return Err(c.bad(format!("{} trailing bytes", c.buf.len())));
    }
    Ok(msg)
}

/// Decodes the frame at the start of `buf`, returning the message and the
/// bytes consumed.
pub fn decode(buf: &[u8]) -> Result<(Message, usize), WireError> {
    if buf.len() < 4 {
        return Err(WireError::Incomplete(4 - buf.len()));
    }
    let len = u32::from_le_bytes(buf[..4].try_into().expect("4 bytes"));
    if len > MAX_FRAME_LEN {
        return Err(WireError::FrameTooLarge(len));
    }
    let end = 4 + len as usize;
    if buf.len() < end {
        return Err(WireError::Incomplete(end - buf.len()));
    }
    Ok((decode_body(&buf[4..end])?, end))
}

/// Reads one frame. A clean end of stream before the length prefix is
/// [`WireError::Closed`]; a malformed body leaves the stream at the next
/// frame boundary.
pub fn read_message(r: &mut impl Read) -> Result<Message, WireError> {
    let mut len = [0u8; 4];
    let mut got = 0;
    while got < 4 {
        match r.read(&mut len[got..]) {
            Ok(0) if got == 0 => return Err(WireError::Closed),
            Ok(0) => return Err(WireError::Io(io::ErrorKind::UnexpectedEof.into())),
            Ok(n) => got += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    let len = u32::from_le_bytes(len);
    if len > MAX_FRAME_LEN {
        return Err(WireError::FrameTooLarge(len));
    }
    let mut body = vec![0u8; len as usize];
    r.read_exact(&mut body)?;
    decode_body(&body)
}

pub fn write_message(w: &mut impl Write, msg: &Message) -> Result<(), WireError> {
    w.write_all(&encode(msg)?)?;
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ping_layout() {
        let f = encode(&Message::Ping { nonce: 0x0102 }).unwrap();
        assert_eq!(f, vec![9, 0, 0, 0, 6, 2, 1, 0, 0, 0, 0, 0, 0]);
        assert_eq!(decode(&f).unwrap(), (Message::Ping { nonce: 0x0102 }, 13));
    }

    #[test]
    fn short_buffers_ask_for_more() {
        let f = encode(&Message::Hello { version: 1 }).unwrap();
        for cut in 0..f.len() {
            assert!(matches!(decode(&f[..cut]), Err(WireError::Incomplete(_))));
        }
    }

    #[test]
    fn trailing_bytes_are_rejected() {
        let mut f = encode(&Message::Pong { nonce: 3 }).unwrap();
        f.push(0);
        f[0] += 1;
        assert!(matches!(decode(&f), Err(WireError::Malformed { .. })));
    }
}
