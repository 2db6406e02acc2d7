//! Control-message codec: QUIC-style varints, the ANALYZE/FILTER subscription
//! parameters, and the APPROVE message.
//!
//! Every message is `Type (i)`, `Length (i)`, then the body. The message
//! Length counts its own bytes as well as the body; the Length in front of a
//! category block counts only the block.
//! Length fields are always computed by the encoder; the decoder checks
//! every one of them against the bytes that the fields actually occupy.

use std::fmt;

use thiserror::Error;

/// Largest value representable by a varint (2^62 - 1).
pub const VARINT_MAX: u64 = (1 << 62) - 1;

pub const MSG_SUBSCRIBE_UPDATE: u64 = 0x02;
pub const MSG_SUBSCRIBE: u64 = 0x03;
pub const MSG_SUBSCRIBE_OK: u64 = 0x04;
pub const MSG_APPROVE: u64 = 0x41;

pub const PARAM_ANALYZE: u64 = 0x05;
pub const PARAM_FILTER: u64 = 0x06;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum WireError {
    #[error("varint value {0} exceeds 2^62-1")]
    VarIntRange(u64),
    #[error("input truncated: {needed} more byte(s) required")]
    Incomplete { needed: usize },
    #[error("{field}: declared length {declared} but fields occupy {actual}")]
    LengthMismatch {
        field: &'static str,
        declared: u64,
        actual: u64,
    },
    #[error("duplicate category {0:#x}")]
    DuplicateCategory(u64),
    #[error("unknown message type {0:#x}")]
    UnknownMessageType(u64),
    #[error("track name is not valid UTF-8")]
    InvalidTrackName,
}

pub type Result<T> = std::result::Result<T, WireError>;

/// A value in `[0, 2^62 - 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct VarInt(u64);

impl VarInt {
    pub const MAX: VarInt = VarInt(VARINT_MAX);

    pub fn new(value: u64) -> Result<Self> {
        if value > VARINT_MAX {
            return Err(WireError::VarIntRange(value));
        }
        Ok(VarInt(value))
    }

    pub fn into_inner(self) -> u64 {
        self.0
    }

    /// Number of bytes in the minimal encoding.
    pub fn encoded_len(self) -> usize {
        varint_len(self.0)
    }
}

impl TryFrom<u64> for VarInt {
    type Error = WireError;

    fn try_from(value: u64) -> Result<Self> {
        VarInt::new(value)
    }
}

impl From<VarInt> for u64 {
    fn from(v: VarInt) -> u64 {
        v.0
    }
}

fn varint_len(value: u64) -> usize {
    if value < 1 << 6 {
        1
    } else if value < 1 << 14 {
        2
    } else if value < 1 << 30 {
        4
    } else {
        8
    }
}

/// Appends the minimal encoding of `value` to `buf`.
pub fn write_varint(buf: &mut Vec<u8>, value: u64) -> Result<()> {
    if value > VARINT_MAX {
        return Err(WireError::VarIntRange(value));
    }
    match varint_len(value) {
        1 => buf.push(value as u8),
        2 => buf.extend_from_slice(&(value as u16 | 0x4000).to_be_bytes()),
        4 => buf.extend_from_slice(&(value as u32 | 0x8000_0000).to_be_bytes()),
        _ => buf.extend_from_slice(&(value | 0xc000_0000_0000_0000).to_be_bytes()),
    }
    Ok(())
}

pub fn encode_varint(value: u64) -> Result<Vec<u8>> {
    let mut buf = Vec::with_capacity(8);
    write_varint(&mut buf, value)?;
    Ok(buf)
}

/// Decodes one varint from the front of `bytes`, returning the value and the
/// number of bytes consumed. Non-minimal encodings are accepted.
pub fn decode_varint(bytes: &[u8]) -> Result<(u64, usize)> {
    let first = *bytes.first().ok_or(WireError::Incomplete { needed: 1 })?;
    let len = 1usize << (first >> 6);
    if bytes.len() < len {
        return Err(WireError::Incomplete {
            needed: len - bytes.len(),
        });
    }
    let mut value = u64::from(first & 0x3f);
    for b in &bytes[1..len] {
        value = (value << 8) | u64::from(*b);
    }
    Ok((value, len))
}

/// Content category carried in ANALYZE, FILTER and APPROVE.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct CategoryType(pub u64);

impl CategoryType {
    pub const STROBE: CategoryType = CategoryType(0x01);
    pub const SMOKING: CategoryType = CategoryType(0x02);
    pub const ALCOHOL: CategoryType = CategoryType(0x03);

    pub fn code(self) -> u64 {
        self.0
    }

    pub fn name(self) -> Option<&'static str> {
        match self {
            Self::STROBE => Some("STROBE"),
            Self::SMOKING => Some("SMOKING"),
            Self::ALCOHOL => Some("ALCOHOL"),
            _ => None,
        }
    }

    /// Parses a category name (case-insensitive) or a numeric code such as `0x07` or `7`.
    pub fn parse(s: &str) -> Option<CategoryType> {
        match s.to_ascii_uppercase().as_str() {
            "STROBE" => Some(Self::STROBE),
            "SMOKING" => Some(Self::SMOKING),
            "ALCOHOL" => Some(Self::ALCOHOL),
            other => {
                let code = match other.strip_prefix("0X") {
                    Some(hex) => u64::from_str_radix(hex, 16).ok()?,
                    None => other.parse().ok()?,
                };
                (code <= VARINT_MAX).then_some(CategoryType(code))
            }
        }
    }
}

impl fmt::Debug for CategoryType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(self, f)
    }
}

impl fmt::Display for CategoryType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.name() {
            Some(name) => f.write_str(name),
            None => write!(f, "{:#x}", self.0),
        }
    }
}

impl serde::Serialize for CategoryType {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> serde::Deserialize<'de> for CategoryType {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        CategoryType::parse(&s)
            .ok_or_else(|| serde::de::Error::custom(format!("unknown category `{s}`")))
    }
}

/// Ordered list of distinct categories.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, serde::Serialize)]
#[serde(transparent)]
pub struct CategorySet(Vec<CategoryType>);

impl CategorySet {
    pub fn new(categories: Vec<CategoryType>) -> Result<Self> {
        for (i, c) in categories.iter().enumerate() {
            if categories[..i].contains(c) {
                return Err(WireError::DuplicateCategory(c.0));
            }
        }
        Ok(CategorySet(categories))
    }

    pub fn empty() -> Self {
        CategorySet(Vec::new())
    }

    /// Builds a set from an iterator, silently dropping repeats.
    pub fn collect_unique(categories: impl IntoIterator<Item = CategoryType>) -> Self {
        let mut out = Vec::new();
        for c in categories {
            if !out.contains(&c) {
                out.push(c);
            }
        }
        CategorySet(out)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn contains(&self, c: CategoryType) -> bool {
        self.0.contains(&c)
    }

    pub fn iter(&self) -> impl Iterator<Item = CategoryType> + '_ {
        self.0.iter().copied()
    }

    pub fn as_slice(&self) -> &[CategoryType] {
        &self.0
    }

    pub fn is_subset_of(&self, other: &CategorySet) -> bool {
        self.iter().all(|c| other.contains(c))
    }

    /// Byte length of the encoded block, including the leading Categories Length.
    pub fn encoded_len(&self) -> usize {
        let inner = self.inner_len();
        varint_len(inner as u64) + inner
    }

    fn inner_len(&self) -> usize {
        varint_len(self.0.len() as u64) + self.0.iter().map(|c| varint_len(c.0)).sum::<usize>()
    }

    pub fn encode(&self, buf: &mut Vec<u8>) -> Result<()> {
        write_varint(buf, self.inner_len() as u64)?;
        write_varint(buf, self.0.len() as u64)?;
        for c in &self.0 {
            write_varint(buf, c.0)?;
        }
        Ok(())
    }

    fn decode(r: &mut Reader<'_>) -> Result<Self> {
        let declared = r.varint()?;
        let mut block = r.sub_reader(declared)?;
        let count = block.varint_in_block("Categories Length", declared)?;
        let mut categories = Vec::with_capacity(count.min(64) as usize);
        for _ in 0..count {
            categories.push(CategoryType(
                block.varint_in_block("Categories Length", declared)?,
            ));
        }
        block.finish("Categories Length", declared)?;
        CategorySet::new(categories)
    }
}

impl<'de> serde::Deserialize<'de> for CategorySet {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let v = Vec::<CategoryType>::deserialize(d)?;
        CategorySet::new(v).map_err(serde::de::Error::custom)
    }
}

impl FromIterator<CategoryType> for CategorySet {
    fn from_iter<I: IntoIterator<Item = CategoryType>>(iter: I) -> Self {
        CategorySet::collect_unique(iter)
    }
}

/// A subscription parameter. ANALYZE and FILTER carry a category block;
/// any other type is kept as opaque bytes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Parameter {
    Analyze(CategorySet),
    Filter(CategorySet),
    Unknown { param_type: u64, payload: Vec<u8> },
}

impl Parameter {
    pub fn param_type(&self) -> u64 {
        match self {
            Parameter::Analyze(_) => PARAM_ANALYZE,
            Parameter::Filter(_) => PARAM_FILTER,
            Parameter::Unknown { param_type, .. } => *param_type,
        }
    }

    fn payload(&self) -> Result<Vec<u8>> {
        match self {
            Parameter::Analyze(set) | Parameter::Filter(set) => {
                let mut buf = Vec::with_capacity(set.encoded_len());
                set.encode(&mut buf)?;
                Ok(buf)
            }
            Parameter::Unknown { payload, .. } => Ok(payload.clone()),
        }
    }

    pub fn encode(&self, buf: &mut Vec<u8>) -> Result<()> {
        let payload = self.payload()?;
        write_varint(buf, self.param_type())?;
        write_varint(buf, payload.len() as u64)?;
        buf.extend_from_slice(&payload);
        Ok(())
    }

    fn decode(r: &mut Reader<'_>) -> Result<Self> {
        let param_type = r.varint()?;
        let declared = r.varint()?;
        let mut payload = r.sub_reader(declared)?;
        match param_type {
            PARAM_ANALYZE | PARAM_FILTER => {
                let set = CategorySet::decode(&mut payload).map_err(|e| match e {
                    WireError::Incomplete { .. } => WireError::LengthMismatch {
                        field: "Parameter Length",
                        declared,
                        actual: declared + 1,
                    },
                    other => other,
                })?;
                payload.finish("Parameter Length", declared)?;
                Ok(if param_type == PARAM_ANALYZE {
                    Parameter::Analyze(set)
                } else {
                    Parameter::Filter(set)
                })
            }
            _ => Ok(Parameter::Unknown {
                param_type,
                payload: payload.rest().to_vec(),
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Subscribe {
    pub subscribe_id: u64,
    pub track_name: String,
    pub priority: u64,
    pub parameters: Vec<Parameter>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubscribeUpdate {
    pub subscribe_id: u64,
    pub parameters: Vec<Parameter>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Approve {
    pub subscribe_id: u64,
    pub group_id: u64,
    pub categories: CategorySet,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ControlMessage {
    Subscribe(Subscribe),
    SubscribeUpdate(SubscribeUpdate),
    SubscribeOk { subscribe_id: u64 },
    Approve(Approve),
}

impl ControlMessage {
    pub fn type_code(&self) -> u64 {
        match self {
            ControlMessage::Subscribe(_) => MSG_SUBSCRIBE,
            ControlMessage::SubscribeUpdate(_) => MSG_SUBSCRIBE_UPDATE,
            ControlMessage::SubscribeOk { .. } => MSG_SUBSCRIBE_OK,
            ControlMessage::Approve(_) => MSG_APPROVE,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ControlMessage::Subscribe(_) => "SUBSCRIBE",
            ControlMessage::SubscribeUpdate(_) => "SUBSCRIBE_UPDATE",
            ControlMessage::SubscribeOk { .. } => "SUBSCRIBE_OK",
            ControlMessage::Approve(_) => "APPROVE",
        }
    }
}

fn encode_parameters(buf: &mut Vec<u8>, params: &[Parameter]) -> Result<()> {
    write_varint(buf, params.len() as u64)?;
    for p in params {
        p.encode(buf)?;
    }
    Ok(())
}

/// Encodes `msg`, appending to `buf`.
pub fn write_message(buf: &mut Vec<u8>, msg: &ControlMessage) -> Result<()> {
    let mut body = Vec::new();
    match msg {
        ControlMessage::Subscribe(s) => {
            write_varint(&mut body, s.subscribe_id)?;
            write_varint(&mut body, s.track_name.len() as u64)?;
            body.extend_from_slice(s.track_name.as_bytes());
            write_varint(&mut body, s.priority)?;
            encode_parameters(&mut body, &s.parameters)?;
        }
        ControlMessage::SubscribeUpdate(u) => {
            write_varint(&mut body, u.subscribe_id)?;
            encode_parameters(&mut body, &u.parameters)?;
        }
        ControlMessage::SubscribeOk { subscribe_id } => {
            write_varint(&mut body, *subscribe_id)?;
        }
        ControlMessage::Approve(a) => {
            write_varint(&mut body, a.subscribe_id)?;
            write_varint(&mut body, a.group_id)?;
            a.categories.encode(&mut body)?;
        }
    }
    write_varint(buf, msg.type_code())?;
    write_varint(buf, length_field(body.len() as u64)?)?;
    buf.extend_from_slice(&body);
    Ok(())
}

/// The message Length counts every byte after the Type, itself included.
fn length_field(body_len: u64) -> Result<u64> {
    [1u64, 2, 4, 8]
        .into_iter()
        .map(|n| body_len + n)
        .find(|&total| VarInt::new(total).is_ok_and(|v| v.encoded_len() as u64 == total - body_len))
        .ok_or(WireError::VarIntRange(body_len))
}

pub fn encode_message(msg: &ControlMessage) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    write_message(&mut buf, msg)?;
    Ok(buf)
}

/// Decodes one message from the front of `bytes`.
///
/// Returns [`WireError::Incomplete`] when the buffer holds only a prefix of a
/// message, so callers reading from a stream can wait for more data.
pub fn decode_message(bytes: &[u8]) -> Result<(ControlMessage, usize)> {
    let mut r = Reader::new(bytes);
    let msg_type = r.varint()?;
    let length_at = r.pos;
    let declared = r.varint()?;
    let own = (r.pos - length_at) as u64;
    let Some(body_len) = declared.checked_sub(own) else {
        return Err(WireError::LengthMismatch {
            field: "Length",
            declared,
            actual: own,
        });
    };
    let mut body = r.sub_reader(body_len)?;
    let msg = decode_body(msg_type, &mut body).map_err(|e| match e {
        // The body ran out before its fields did: Length was too small.
        WireError::Incomplete { .. } => WireError::LengthMismatch {
            field: "Length",
            declared,
            actual: declared + 1,
        },
        other => other,
    })?;
    body.finish("Length", declared)?;
    Ok((msg, r.pos))
}

fn decode_parameters(r: &mut Reader<'_>) -> Result<Vec<Parameter>> {
    let count = r.varint()?;
    let mut params = Vec::with_capacity(count.min(16) as usize);
    for _ in 0..count {
        params.push(Parameter::decode(r)?);
    }
    Ok(params)
}

fn decode_body(msg_type: u64, r: &mut Reader<'_>) -> Result<ControlMessage> {
    Ok(match msg_type {
        MSG_SUBSCRIBE => {
            let subscribe_id = r.varint()?;
            let name_len = r.varint()?;
            let name = r.bytes(name_len)?;
            let track_name = std::str::from_utf8(name)
                .map_err(|_| WireError::InvalidTrackName)?
                .to_owned();
            let priority = r.varint()?;
            let parameters = decode_parameters(r)?;
            ControlMessage::Subscribe(Subscribe {
                subscribe_id,
                track_name,
                priority,
                parameters,
            })
        }
        MSG_SUBSCRIBE_UPDATE => {
            let subscribe_id = r.varint()?;
            let parameters = decode_parameters(r)?;
            ControlMessage::SubscribeUpdate(SubscribeUpdate {
                subscribe_id,
                parameters,
            })
        }
        MSG_SUBSCRIBE_OK => ControlMessage::SubscribeOk {
            subscribe_id: r.varint()?,
        },
        MSG_APPROVE => {
            let subscribe_id = r.varint()?;
            let group_id = r.varint()?;
            let categories = CategorySet::decode(r)?;
            ControlMessage::Approve(Approve {
                subscribe_id,
                group_id,
                categories,
            })
        }
        other => return Err(WireError::UnknownMessageType(other)),
    })
}

/// Cursor over a byte slice.
struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    fn rest(&self) -> &'a [u8] {
        &self.buf[self.pos..]
    }

    fn varint(&mut self) -> Result<u64> {
        let (v, n) = decode_varint(self.rest())?;
        self.pos += n;
        Ok(v)
    }

    fn bytes(&mut self, len: u64) -> Result<&'a [u8]> {
        let avail = self.rest().len();
        if (avail as u64) < len {
            return Err(WireError::Incomplete {
                needed: (len - avail as u64).min(usize::MAX as u64) as usize,
            });
        }
        let out = &self.rest()[..len as usize];
        self.pos += len as usize;
        Ok(out)
    }

    /// Splits off the next `len` bytes as a nested reader.
    fn sub_reader(&mut self, len: u64) -> Result<Reader<'a>> {
        self.bytes(len).map(Reader::new)
    }

    /// Reads a varint that must lie entirely within this (length-bounded) block.
    fn varint_in_block(&mut self, field: &'static str, declared: u64) -> Result<u64> {
        self.varint().map_err(|e| match e {
            WireError::Incomplete { needed } => WireError::LengthMismatch {
                field,
                declared,
                actual: declared + needed as u64,
            },
            other => other,
        })
    }

    fn finish(&self, field: &'static str, declared: u64) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(WireError::LengthMismatch {
                field,
                declared,
                actual: self.pos as u64,
            });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn approve_example() -> ControlMessage {
        ControlMessage::Approve(Approve {
            subscribe_id: 1,
            group_id: 7,
            categories: CategorySet::new(vec![CategoryType::STROBE]).unwrap(),
        })
    }

    #[test]
    fn varint_examples() {
        assert_eq!(encode_varint(0).unwrap(), vec![0x00]);
        assert_eq!(encode_varint(65).unwrap(), vec![0x40, 0x41]);
        assert_eq!(encode_varint(1 << 62), Err(WireError::VarIntRange(1 << 62)));
        assert_eq!(decode_varint(&[0x00]).unwrap(), (0, 1));
        assert_eq!(decode_varint(&[0x40, 0x41]).unwrap(), (65, 2));
        assert_eq!(decode_varint(&[0x40]), Err(WireError::Incomplete { needed: 1 }));
        assert_eq!(decode_varint(&[]), Err(WireError::Incomplete { needed: 1 }));
    }

    #[test]
    fn varint_length_boundaries() {
        for (v, len) in [
            (63, 1),
            (64, 2),
            (16383, 2),
            (16384, 4),
            ((1 << 30) - 1, 4),
            (1 << 30, 8),
            (VARINT_MAX, 8),
        ] {
            let enc = encode_varint(v).unwrap();
            assert_eq!(enc.len(), len, "value {v}");
            assert_eq!(decode_varint(&enc).unwrap(), (v, len));
        }
        assert_eq!(
            encode_varint(VARINT_MAX).unwrap(),
            vec![0xff, 0xff, 0xff, 0xff, 0xff, 0xff, 0xff, 0xff]
        );
    }

    #[test]
    fn non_minimal_varint_accepted() {
        assert_eq!(decode_varint(&[0x40, 0x05]).unwrap(), (5, 2));
        assert_eq!(decode_varint(&[0x80, 0, 0, 0x05]).unwrap(), (5, 4));
    }

    #[test]
    fn approve_layout() {
        // type 0x41 (2 bytes), length, sub id, group id, cat-length, count, STROBE
        let bytes = encode_message(&approve_example()).unwrap();
        assert_eq!(bytes, vec![0x40, 0x41, 0x06, 0x01, 0x07, 0x02, 0x01, 0x01]);
        let (msg, n) = decode_message(&bytes).unwrap();
        assert_eq!(msg, approve_example());
        assert_eq!(n, bytes.len());
    }

    #[test]
    fn approve_length_off_by_one() {
        let mut short = encode_message(&approve_example()).unwrap();
        short[2] = 0x05;
        assert!(matches!(
            decode_message(&short),
            Err(WireError::LengthMismatch { field: "Length", .. })
        ));

        let mut long = encode_message(&approve_example()).unwrap();
        long[2] = 0x07;
        assert_eq!(decode_message(&long), Err(WireError::Incomplete { needed: 1 }));
        // With a following byte present the body has one unparsed byte.
        long.push(0x00);
        assert!(matches!(
            decode_message(&long),
            Err(WireError::LengthMismatch { field: "Length", .. })
        ));
    }

    #[test]
    fn filter_parameter_payload() {
        let p = Parameter::Filter(
            CategorySet::new(vec![CategoryType::SMOKING, CategoryType::ALCOHOL]).unwrap(),
        );
        let mut buf = Vec::new();
        p.encode(&mut buf).unwrap();
        assert_eq!(buf, vec![0x06, 0x04, 0x03, 0x02, 0x02, 0x03]);
    }

    #[test]
    fn subscribe_empty_params_round_trip() {
        let msg = ControlMessage::Subscribe(Subscribe {
            subscribe_id: 3,
            track_name: "webcam".into(),
            priority: 0,
            parameters: vec![],
        });
        let bytes = encode_message(&msg).unwrap();
        assert_eq!(decode_message(&bytes).unwrap(), (msg, bytes.len()));
    }

    #[test]
    fn unknown_parameter_preserved() {
        // SUBSCRIBE id=1, track "a", priority 0, 1 param: type 0x07 len 2 [0xaa, 0xbb]
        let bytes = [0x03, 0x0a, 0x01, 0x01, b'a', 0x00, 0x01, 0x07, 0x02, 0xaa, 0xbb];
        let (msg, n) = decode_message(&bytes).unwrap();
        assert_eq!(n, bytes.len());
        let ControlMessage::Subscribe(s) = &msg else {
            panic!("expected SUBSCRIBE, got {msg:?}");
        };
        assert_eq!(
            s.parameters,
            vec![Parameter::Unknown {
                param_type: 7,
                payload: vec![0xaa, 0xbb]
            }]
        );
        assert_eq!(encode_message(&msg).unwrap(), bytes);
    }

    #[test]
    fn unknown_message_type() {
        assert_eq!(
            decode_message(&[0x10, 0x01]),
            Err(WireError::UnknownMessageType(0x10))
        );
    }

    #[test]
    fn duplicate_categories_rejected() {
        assert_eq!(
            CategorySet::new(vec![CategoryType::STROBE, CategoryType::STROBE]),
            Err(WireError::DuplicateCategory(1))
        );
        // Hand-built APPROVE with [STROBE, STROBE].
        let bytes = [0x40, 0x41, 0x07, 0x01, 0x07, 0x03, 0x02, 0x01, 0x01];
        assert_eq!(decode_message(&bytes), Err(WireError::DuplicateCategory(1)));
    }

    #[test]
    fn categories_length_mismatch() {
        // cat-length says 3 but the block holds count=1 + one category = 2 bytes,
        // and the message Length covers the extra byte.
        let bytes = [0x40, 0x41, 0x07, 0x01, 0x07, 0x03, 0x01, 0x01, 0x09];
        assert!(matches!(
            decode_message(&bytes),
            Err(WireError::LengthMismatch {
                field: "Categories Length",
                ..
            })
        ));
        // count says 2 but only one category fits in the block
        let bytes = [0x40, 0x41, 0x06, 0x01, 0x07, 0x02, 0x02, 0x01];
        assert!(matches!(
            decode_message(&bytes),
            Err(WireError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn invalid_track_name() {
        // id, name len 1, name 0xff, priority, param count
        let bytes = [0x03, 0x06, 0x01, 0x01, 0xff, 0x00, 0x00];
        assert_eq!(decode_message(&bytes), Err(WireError::InvalidTrackName));
    }

    #[test]
    fn category_parse_and_display() {
        assert_eq!(CategoryType::parse("strobe"), Some(CategoryType::STROBE));
        assert_eq!(CategoryType::parse("0x07"), Some(CategoryType(7)));
        assert_eq!(CategoryType::parse("12"), Some(CategoryType(12)));
        assert_eq!(CategoryType::parse("nope"), None);
        assert_eq!(CategoryType(0x07).to_string(), "0x7");
        assert_eq!(CategoryType::ALCOHOL.to_string(), "ALCOHOL");
        let json = serde_json::to_string(&CategorySet::collect_unique([
            CategoryType::STROBE,
            CategoryType(9),
        ]))
        .unwrap();
        assert_eq!(json, r#"["STROBE","0x9"]"#);
    }

    #[test]
    fn oversized_fields_rejected_on_encode() {
        let msg = ControlMessage::SubscribeOk {
            subscribe_id: 1 << 62,
        };
        assert_eq!(encode_message(&msg), Err(WireError::VarIntRange(1 << 62)));
    }
}
