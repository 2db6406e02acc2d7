//! Stream multiplexing over one TCP connection.
//!
//! Each record is `Stream ID (i)`, a one-byte record kind (data, fin,
//! reset), `Length (i)` and the payload. Stream payloads are the same bytes
//! the simulated backend carries, so the [`super::framing`] parser works on
//! either. Connection initiators allocate even stream ids, acceptors odd.

use std::io::{BufReader, Read, Write};
use std::net::{TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicU32, Ordering};
use std::sync::{Arc, Mutex};

use super::{StreamId, TransportError};
use crate::wire;

const RECORD_DATA: u8 = 0;
const RECORD_FIN: u8 = 1;
const RECORD_RESET: u8 = 2;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SocketEvent {
    Data { stream: StreamId, bytes: Vec<u8> },
    Finished { stream: StreamId },
    Reset { stream: StreamId },
}

/// Write half; cheap to clone and safe to use from several threads.
/// Records are written whole under a lock, so per-stream order holds.
#[derive(Clone)]
pub struct SocketSender {
    writer: Arc<Mutex<TcpStream>>,
    next_stream: Arc<AtomicU32>,
}

impl SocketSender {
    pub fn open_stream(&self) -> StreamId {
        StreamId(self.next_stream.fetch_add(2, Ordering::Relaxed))
    }

    fn write_record(&self, stream: StreamId, kind: u8, bytes: &[u8]) -> Result<(), TransportError> {
        let mut rec = Vec::with_capacity(bytes.len() + 10);
        wire::write_varint(&mut rec, u64::from(stream.0)).expect("u32 fits a varint");
        rec.push(kind);
        wire::write_varint(&mut rec, bytes.len() as u64).expect("length fits a varint");
        rec.extend_from_slice(bytes);
        let mut w = self.writer.lock().map_err(|_| TransportError::Disconnected)?;
        w.write_all(&rec)?;
        Ok(())
    }

    pub fn send(&self, stream: StreamId, bytes: &[u8]) -> Result<(), TransportError> {
        self.write_record(stream, RECORD_DATA, bytes)
    }

    pub fn finish(&self, stream: StreamId) -> Result<(), TransportError> {
        self.write_record(stream, RECORD_FIN, &[])
    }

    pub fn reset(&self, stream: StreamId) -> Result<(), TransportError> {
        self.write_record(stream, RECORD_RESET, &[])
    }

    pub fn close(&self) -> Result<(), TransportError> {
        let w = self.writer.lock().map_err(|_| TransportError::Disconnected)?;
        w.shutdown(std::net::Shutdown::Both)?;
        Ok(())
    }
}

pub struct SocketConnection {
    reader: BufReader<TcpStream>,
    sender: SocketSender,
}

impl SocketConnection {
    fn new(stream: TcpStream, initiator: bool) -> Result<Self, TransportError> {
        stream.set_nodelay(true)?;
        let reader = BufReader::new(stream.try_clone()?);
        Ok(SocketConnection {
            reader,
            sender: SocketSender {
                writer: Arc::new(Mutex::new(stream)),
                next_stream: Arc::new(AtomicU32::new(if initiator { 0 } else { 1 })),
            },
        })
    }

    pub fn connect(addr: impl ToSocketAddrs) -> Result<Self, TransportError> {
        Self::new(TcpStream::connect(addr)?, true)
    }

    pub fn accept(listener: &TcpListener) -> Result<Self, TransportError> {
        let (stream, _) = listener.accept()?;
        Self::new(stream, false)
    }

    pub fn sender(&self) -> SocketSender {
        self.sender.clone()
    }

    pub fn open_stream(&self) -> StreamId {
        self.sender.open_stream()
    }

    pub fn send(&self, stream: StreamId, bytes: &[u8]) -> Result<(), TransportError> {
        self.sender.send(stream, bytes)
    }

    pub fn finish(&self, stream: StreamId) -> Result<(), TransportError> {
        self.sender.finish(stream)
    }

    fn read_varint(&mut self) -> Result<u64, TransportError> {
        let mut buf = [0u8; 8];
        self.reader.read_exact(&mut buf[..1])?;
        let len = 1usize << (buf[0] >> 6);
        self.reader.read_exact(&mut buf[1..len])?;
        let (v, _) = wire::decode_varint(&buf[..len]).map_err(|e| TransportError::Io(e.to_string()))?;
        Ok(v)
    }

    /// Blocks until the next record. A closed peer yields
    /// [`TransportError::Disconnected`].
    pub fn recv(&mut self) -> Result<SocketEvent, TransportError> {
        let stream = self.read_varint()?;
        let stream = StreamId(
            u32::try_from(stream).map_err(|_| TransportError::Io(format!("stream id {stream} too large")))?,
        );
        let mut kind = [0u8];
        self.reader.read_exact(&mut kind)?;
        let len = self.read_varint()?;
        let mut bytes = vec![0u8; len as usize];
        self.reader.read_exact(&mut bytes)?;
        match kind[0] {
            RECORD_DATA => Ok(SocketEvent::Data { stream, bytes }),
            RECORD_FIN => Ok(SocketEvent::Finished { stream }),
            RECORD_RESET => Ok(SocketEvent::Reset { stream }),
            other => Err(TransportError::Io(format!("unknown record kind {other}"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transport::framing::{self, StreamItem, StreamParser};
    use crate::wire::ControlMessage;

    fn loopback() -> (SocketConnection, SocketConnection) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let server = std::thread::spawn(move || SocketConnection::accept(&listener).unwrap());
        let client = SocketConnection::connect(addr).unwrap();
        (client, server.join().unwrap())
    }

    #[test]
    fn ordered_delivery_and_fin() {
        let (client, mut server) = loopback();
        let s = client.open_stream();
        assert_eq!(s, StreamId(0));
        client.send(s, &[1, 2, 3]).unwrap();
        client.send(s, &[4]).unwrap();
        client.finish(s).unwrap();
        assert_eq!(server.recv().unwrap(), SocketEvent::Data { stream: s, bytes: vec![1, 2, 3] });
        assert_eq!(server.recv().unwrap(), SocketEvent::Data { stream: s, bytes: vec![4] });
        assert_eq!(server.recv().unwrap(), SocketEvent::Finished { stream: s });
        assert_eq!(server.open_stream(), StreamId(1));
    }

    #[test]
    fn control_messages_over_tcp() {
        let (client, mut server) = loopback();
        let s = client.open_stream();
        let mut bytes = framing::control_stream_preamble();
        wire::write_message(&mut bytes, &ControlMessage::SubscribeOk { subscribe_id: 9 }).unwrap();
        // split mid-message
        client.send(s, &bytes[..2]).unwrap();
        client.send(s, &bytes[2..]).unwrap();
        let mut parser = StreamParser::new();
        let mut items = Vec::new();
        while items.is_empty() {
            let SocketEvent::Data { bytes, .. } = server.recv().unwrap() else {
                panic!("expected data");
            };
            parser.push(&bytes);
            while let Some(item) = parser.next_item().unwrap() {
                items.push(item);
            }
        }
        assert_eq!(items, [StreamItem::Control(ControlMessage::SubscribeOk { subscribe_id: 9 })]);
    }

    #[test]
    fn concurrent_senders_keep_per_stream_order() {
        let (client, mut server) = loopback();
        let handles: Vec<_> = (0..4)
            .map(|_| {
                let tx = client.sender();
                std::thread::spawn(move || {
                    let s = tx.open_stream();
                    for i in 0..50u8 {
                        tx.send(s, &[i]).unwrap();
                    }
                    s
                })
            })
            .collect();
        let streams: Vec<StreamId> = handles.into_iter().map(|h| h.join().unwrap()).collect();
        let mut seen = std::collections::BTreeMap::<StreamId, Vec<u8>>::new();
        for _ in 0..200 {
            if let SocketEvent::Data { stream, bytes } = server.recv().unwrap() {
                seen.entry(stream).or_default().extend(bytes);
            }
        }
        for s in streams {
            assert_eq!(seen[&s], (0..50).collect::<Vec<u8>>());
        }
    }

    #[test]
    fn peer_close_is_disconnect() {
        let (client, mut server) = loopback();
        client.sender().close().unwrap();
        drop(client);
        assert_eq!(server.recv(), Err(TransportError::Disconnected));
    }
}
