//! Device↔edge wire protocol over TCP: framing, the edge server and the
//! device session. See `PROTOCOL.md` at the repository root for the byte
//! layout.

pub mod client;
pub mod codec;
pub mod server;

pub use client::{EdgeSession, SessionError, TcpLink, DEFAULT_TIMEOUT};
pub use codec::{
    decode, encode, read_message, write_message, Message, MessageType, WireError, PROTOCOL_VERSION,
};
pub use server::{EdgeServer, ServerHandle};
