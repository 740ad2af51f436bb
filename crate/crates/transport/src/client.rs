//! Device side of the protocol: a session with at most one request in
//! flight, and the [`EdgeLink`] the orchestrator drives.

use std::io;
use std::net::{SocketAddr, TcpStream, ToSocketAddrs};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use thiserror::Error;
use tokenbridge_core::harness::{EdgeLink, LinkError, LinkReply, OffloadRequest, OffloadResponse};

use crate::codec::{read_message, write_message, Message, WireError, PROTOCOL_VERSION};

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(120);

#[derive(Debug, Error)]
pub enum SessionError {
    #[error("cannot reach {addr}: {source}")]
    Connect { addr: String, source: io::Error },
    #[error("handshake: {0}")]
    Handshake(String),
    #[error(transparent)]
    Wire(#[from] WireError),
}

struct Conn {
    stream: TcpStream,
    version: u16,
}

/// One logical device↔edge session. Requests hold the connection for their
/// whole round trip, so concurrent callers queue here instead of on the
/// wire. After a timeout or transport failure the connection is dropped and
/// the next request reconnects.
pub struct EdgeSession {
    addrs: Vec<SocketAddr>,
    timeout: Duration,
    conn: Mutex<Option<Conn>>,
}

fn is_timeout(e: &WireError) -> bool {
    matches!(e, WireError::Io(io) if matches!(io.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut))
}

impl EdgeSession {
    pub fn connect(addr: impl ToSocketAddrs, timeout: Duration) -> Result<Self, SessionError> {
        let addrs: Vec<SocketAddr> = addr
            .to_socket_addrs()
            .map_err(|e| SessionError::Connect {
                addr: "<unresolved>".into(),
                source: e,
            })?
            .collect();
        let s = Self {
            addrs,
            timeout,
            conn: Mutex::new(None),
        };
        *s.conn.lock().expect("session lock") = Some(s.open()?);
        Ok(s)
    }

    fn open(&self) -> Result<Conn, SessionError> {
        let mut stream = TcpStream::connect_timeout(
            self.addrs
                .first()
                .ok_or_else(|| SessionError::Handshake("no address".into()))?,
            self.timeout,
        )
        .map_err(|e| SessionError::Connect {
            addr: format!("{:?}", self.addrs),
            source: e,
        })?;
        let _ = stream.set_nodelay(true);
        stream
            .set_read_timeout(Some(self.timeout))
            .map_err(WireError::from)?;
        stream
            .set_write_timeout(Some(self.timeout))
            .map_err(WireError::from)?;
        write_message(
            &mut stream,
            &Message::Hello {
                version: PROTOCOL_VERSION,
            },
        )?;
        match read_message(&mut stream)? {
            Message::HelloAck { version } if version <= PROTOCOL_VERSION => {
                Ok(Conn { stream, version })
            }
            Message::HelloAck { version } => Err(SessionError::Handshake(format!(
                "edge chose unknown version {version}"
            ))),
            Message::Error { code, message, .. } => Err(SessionError::Handshake(format!(
                "edge error {code}: {message}"
            ))),
            other => Err(SessionError::Handshake(format!(
                "unexpected {:?}",
                other.kind()
            ))),
        }
    }

    /// Negotiated protocol version of the current connection.
    pub fn version(&self) -> Option<u16> {
        self.conn
            .lock()
            .expect("session lock")
            .as_ref()
            .map(|c| c.version)
    }

    fn round_trip(&self, msg: &Message) -> Result<Message, LinkError> {
        let mut guard = self.conn.lock().expect("session lock");
        if guard.is_none() {
            *guard = Some(
                self.open()
                    .map_err(|e| LinkError::Transport(e.to_string()))?,
            );
        }
        let conn = guard.as_mut().expect("connection present");
        let result =
            write_message(&mut conn.stream, msg).and_then(|_| read_message(&mut conn.stream));
        match result {
            Ok(reply) => Ok(reply),
            Err(e) => {
                // A late reply would desynchronize the stream; start over.
                *guard = None;
                if is_timeout(&e) {
                    Err(LinkError::Timeout(self.timeout.as_secs_f64()))
                } else {
                    Err(LinkError::Transport(e.to_string()))
                }
            }
        }
    }

    pub fn offload(&self, req: &OffloadRequest) -> Result<OffloadResponse, LinkError> {
        match self.round_trip(&Message::OffloadRequest(req.clone()))? {
            Message::OffloadResponse(r) if r.query_id == req.query_id => Ok(r),
            Message::Error { code, message, .. } => Err(LinkError::Remote { code, message }),
            other => {
                *self.conn.lock().expect("session lock") = None;
                Err(LinkError::Transport(format!(
                    "expected the response to query {}, got {:?} for {}",
                    req.query_id,
                    other.kind(),
                    other.query_id()
                )))
            }
        }
    }

    /// Round-trip time of a ping, in milliseconds.
    pub fn ping(&self, nonce: u64) -> Result<f64, LinkError> {
        let t0 = Instant::now();
        match self.round_trip(&Message::Ping { nonce })? {
            Message::Pong { nonce: n } if n == nonce => Ok(t0.elapsed().as_secs_f64() * 1e3),
            other => Err(LinkError::Transport(format!(
                "expected Pong, got {:?}",
                other.kind()
            ))),
        }
    }
}

/// Offloads over a real socket. The network share of the delay is the wall
/// time minus what the server reports for itself.
#[derive(Clone)]
pub struct TcpLink {
    pub session: Arc<EdgeSession>,
}

impl TcpLink {
    pub fn connect(addr: impl ToSocketAddrs, timeout: Duration) -> Result<Self, SessionError> {
        Ok(Self {
            session: Arc::new(EdgeSession::connect(addr, timeout)?),
        })
    }
}

impl EdgeLink for TcpLink {
    fn offload(&mut self, req: &OffloadRequest) -> Result<LinkReply, LinkError> {
        let t0 = Instant::now();
        let result = self.session.offload(req);
        let wall_ms = t0.elapsed().as_secs_f64() * 1e3;
        match result {
            Ok(response) => Ok(LinkReply {
                network_ms: (wall_ms - response.server_ms).max(0.0),
                response,
                wall_ms,
            }),
            Err(e) => {
                if matches!(e, LinkError::Timeout(_) | LinkError::Transport(_)) {
                    log::warn!(
                        "query {}: edge unavailable ({e}); degraded mode, answering locally",
                        req.query_id
                    );
                }
                Err(e)
            }
        }
    }
}
