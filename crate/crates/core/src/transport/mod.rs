//! Sessions and streams between publisher, relay and subscribers.
//!
//! [`sim`] is the deterministic virtual-time backend used by the harness
//! and every test; [`socket`] carries the same stream model over TCP.

pub mod framing;
pub mod sim;
pub mod socket;

use thiserror::Error;

pub use framing::{GroupHeader, StreamItem, StreamKind, StreamParser};
pub use sim::{
    EndpointId, Link, NetEvent, NetEventKind, Received, SessionId, SimNetwork, StreamId,
    VirtualClock,
};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TransportError {
    #[error("unknown endpoint {0}")]
    UnknownEndpoint(u32),
    #[error("unknown session {0}")]
    UnknownSession(u32),
    #[error("unknown stream {0}")]
    UnknownStream(u32),
    #[error("endpoint is not part of this session")]
    NotOnSession,
    #[error("session disconnected")]
    Disconnected,
    #[error("stream {0} already finished by sender")]
    StreamClosed(u32),
    #[error("stream {0} was reset by the peer")]
    StreamReset(u32),
    #[error("virtual time cap exceeded: next event at {at_ms} ms, cap {cap_ms} ms")]
    Timeout { at_ms: u64, cap_ms: u64 },
    #[error("socket: {0}")]
    Io(String),
}

impl From<std::io::Error> for TransportError {
    fn from(e: std::io::Error) -> Self {
        match e.kind() {
            std::io::ErrorKind::UnexpectedEof
            | std::io::ErrorKind::ConnectionReset
            | std::io::ErrorKind::ConnectionAborted
            | std::io::ErrorKind::BrokenPipe => TransportError::Disconnected,
            _ => TransportError::Io(e.to_string()),
        }
    }
}
