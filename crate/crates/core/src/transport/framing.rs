//! Byte layout of streams.
//!
//! Every unidirectional stream starts with a Stream Type varint:
//!
//! * `0x00` control: a sequence of control messages.
//! * `0x01` group: Group ID, frame count, then one object per frame, each
//!   prefixed by its byte length.

use thiserror::Error;

use crate::wire::{self, ControlMessage, WireError};

pub const STREAM_CONTROL: u64 = 0x00;
pub const STREAM_GROUP: u64 = 0x01;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FramingError {
    #[error(transparent)]
    Wire(#[from] WireError),
    #[error("unknown stream type {0:#x}")]
    UnknownStreamType(u64),
    #[error("group stream carried more objects than its header announced ({0})")]
    ExtraObject(u64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GroupHeader {
    pub group_id: u64,
    pub frame_count: u64,
}

pub fn control_stream_preamble() -> Vec<u8> {
    vec![STREAM_CONTROL as u8]
}

pub fn encode_group_header(header: GroupHeader) -> Result<Vec<u8>, WireError> {
    let mut buf = Vec::with_capacity(8);
    wire::write_varint(&mut buf, STREAM_GROUP)?;
    wire::write_varint(&mut buf, header.group_id)?;
    wire::write_varint(&mut buf, header.frame_count)?;
    Ok(buf)
}

pub fn encode_object(payload: &[u8]) -> Result<Vec<u8>, WireError> {
    let mut buf = Vec::with_capacity(payload.len() + 4);
    wire::write_varint(&mut buf, payload.len() as u64)?;
    buf.extend_from_slice(payload);
    Ok(buf)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StreamKind {
    Control,
    Group,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum StreamItem {
    Control(ControlMessage),
    GroupHeader(GroupHeader),
    Object(Vec<u8>),
}

/// Incremental parser for one incoming stream. Feed bytes with
/// [`StreamParser::push`] and drain items with [`StreamParser::next_item`].
#[derive(Debug, Default)]
pub struct StreamParser {
    buf: Vec<u8>,
    pos: usize,
    kind: Option<StreamKind>,
    header: Option<GroupHeader>,
    objects: u64,
}

impl StreamParser {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, bytes: &[u8]) {
        if self.pos > 0 && self.pos == self.buf.len() {
            self.buf.clear();
            self.pos = 0;
        }
        self.buf.extend_from_slice(bytes);
    }

    pub fn kind(&self) -> Option<StreamKind> {
        self.kind
    }

    pub fn header(&self) -> Option<GroupHeader> {
        self.header
    }

    /// Objects parsed so far on a group stream.
    pub fn objects_seen(&self) -> u64 {
        self.objects
    }

    /// True when nothing is buffered past the last complete item.
    pub fn is_drained(&self) -> bool {
        self.pos == self.buf.len()
    }

    fn take_varint(&mut self) -> Result<Option<u64>, FramingError> {
        match wire::decode_varint(&self.buf[self.pos..]) {
            Ok((v, n)) => {
                self.pos += n;
                Ok(Some(v))
            }
            Err(WireError::Incomplete { .. }) => Ok(None),
            Err(e) => Err(e.into()),
        }
    }

    /// Returns the next complete item, or `None` when more bytes are needed.
    pub fn next_item(&mut self) -> Result<Option<StreamItem>, FramingError> {
        let kind = match self.kind {
            Some(kind) => kind,
            None => {
                let Some(t) = self.take_varint()? else {
                    return Ok(None);
                };
                let kind = match t {
                    STREAM_CONTROL => StreamKind::Control,
                    STREAM_GROUP => StreamKind::Group,
                    other => return Err(FramingError::UnknownStreamType(other)),
                };
                self.kind = Some(kind);
                kind
            }
        };
        let start = self.pos;
        let item = self.parse_item(kind);
        if !matches!(item, Ok(Some(_))) {
            self.pos = start;
        }
        item
    }

    fn parse_item(&mut self, kind: StreamKind) -> Result<Option<StreamItem>, FramingError> {
        match kind {
            StreamKind::Control => match wire::decode_message(&self.buf[self.pos..]) {
                Ok((msg, n)) => {
                    self.pos += n;
                    Ok(Some(StreamItem::Control(msg)))
                }
                Err(WireError::Incomplete { .. }) => Ok(None),
                Err(e) => Err(e.into()),
            },
            StreamKind::Group => {
                if self.header.is_none() {
                    let Some(group_id) = self.take_varint()? else {
                        return Ok(None);
                    };
                    let Some(frame_count) = self.take_varint()? else {
                        return Ok(None);
                    };
                    let header = GroupHeader {
                        group_id,
                        frame_count,
                    };
                    self.header = Some(header);
                    return Ok(Some(StreamItem::GroupHeader(header)));
                }
                let Some(len) = self.take_varint()? else {
                    return Ok(None);
                };
                let end = self.pos as u64 + len;
                if (self.buf.len() as u64) < end {
                    return Ok(None);
                }
                let header = self.header.expect("checked above");
                if self.objects >= header.frame_count {
                    return Err(FramingError::ExtraObject(header.frame_count));
                }
                let payload = self.buf[self.pos..end as usize].to_vec();
                self.pos = end as usize;
                self.objects += 1;
                Ok(Some(StreamItem::Object(payload)))
            }
        }
    }
}
