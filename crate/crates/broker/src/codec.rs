//! MQTT 3.1.1 framing for the packet subset the broker speaks:
//! CONNECT/CONNACK, PUBLISH/PUBACK (QoS 0 and 1), SUBSCRIBE/SUBACK,
//! UNSUBSCRIBE/UNSUBACK, PINGREQ/PINGRESP and DISCONNECT.

use std::io::{self, Read, Write};

/// Largest application payload accepted in a PUBLISH.
pub const MAX_PAYLOAD: usize = 256 * 1024;
/// Largest remaining length the decoder will buffer.
pub const MAX_REMAINING: usize = MAX_PAYLOAD + 64 * 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum QoS {
    AtMostOnce = 0,
    AtLeastOnce = 1,
}

impl QoS {
    pub fn from_u8(v: u8) -> Option<Self> {
        match v {
            0 => Some(QoS::AtMostOnce),
            1 => Some(QoS::AtLeastOnce),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Connect {
    pub client_id: String,
    pub keep_alive: u16,
    pub clean_session: bool,
    pub username: Option<String>,
    pub password: Option<Vec<u8>>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Publish {
    pub dup: bool,
    pub qos: QoS,
    pub retain: bool,
    pub topic: String,
    /// Present iff `qos` is 1.
    pub packet_id: Option<u16>,
    pub payload: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Packet {
    Connect(Connect),
    ConnAck { session_present: bool, code: u8 },
    Publish(Publish),
    PubAck { packet_id: u16 },
    Subscribe { packet_id: u16, filters: Vec<(String, u8)> },
    SubAck { packet_id: u16, codes: Vec<u8> },
    Unsubscribe { packet_id: u16, filters: Vec<String> },
    UnsubAck { packet_id: u16 },
    PingReq,
    PingResp,
    Disconnect,
}

pub const CONNACK_ACCEPTED: u8 = 0;
pub const CONNACK_BAD_PROTOCOL: u8 = 1;
pub const CONNACK_ID_REJECTED: u8 = 2;
pub const SUBACK_FAILURE: u8 = 0x80;

#[derive(Debug, thiserror::Error)]
pub enum CodecError {
    #[error("io: {0}")]
    Io(#[from] io::Error),
    #[error("malformed remaining length")]
    BadRemainingLength,
    #[error("packet too large ({0} bytes)")]
    TooLarge(usize),
    #[error("unsupported packet type {0:#04x}")]
    UnsupportedType(u8),
    #[error("invalid fixed header flags {0:#04x}")]
    BadFlags(u8),
    #[error("truncated packet")]
    Truncated,
    #[error("invalid utf-8 string")]
    BadUtf8,
    #[error("protocol violation: {0}")]
    Protocol(&'static str),
}

fn encode_remaining_length(mut len: usize, out: &mut Vec<u8>) {
    loop {
        let mut byte = (len % 128) as u8;
        len /= 128;
        if len > 0 {
            byte |= 0x80;
        }
        out.push(byte);
        if len == 0 {
            break;
        }
    }
}

fn put_u16(out: &mut Vec<u8>, v: u16) {
    out.extend_from_slice(&v.to_be_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_bytes(out, s.as_bytes());
}

fn put_bytes(out: &mut Vec<u8>, b: &[u8]) {
    put_u16(out, b.len() as u16);
    out.extend_from_slice(b);
}

impl Packet {
    pub fn encode(&self) -> Vec<u8> {
        let mut body = Vec::new();
        let first: u8 = match self {
            Packet::Connect(c) => {
                put_str(&mut body, "MQTT");
                body.push(4);
                let mut flags = 0u8;
                if c.clean_session {
                    flags |= 0x02;
                }
                if c.password.is_some() {
                    flags |= 0x40;
                }
                if c.username.is_some() {
                    flags |= 0x80;
                }
                body.push(flags);
                put_u16(&mut body, c.keep_alive);
                put_str(&mut body, &c.client_id);
                if let Some(u) = &c.username {
                    put_str(&mut body, u);
                }
                if let Some(p) = &c.password {
                    put_bytes(&mut body, p);
                }
                0x10
            }
            Packet::ConnAck {
                session_present,
                code,
            } => {
                body.push(*session_present as u8);
                body.push(*code);
                0x20
            }
            Packet::Publish(p) => {
                put_str(&mut body, &p.topic);
                if let Some(id) = p.packet_id {
                    put_u16(&mut body, id);
                }
                body.extend_from_slice(&p.payload);
                0x30 | ((p.dup as u8) << 3) | ((p.qos as u8) << 1) | p.retain as u8
            }
            Packet::PubAck { packet_id } => {
                put_u16(&mut body, *packet_id);
                0x40
            }
            Packet::Subscribe { packet_id, filters } => {
                put_u16(&mut body, *packet_id);
                for (f, q) in filters {
                    put_str(&mut body, f);
                    body.push(*q);
                }
                0x82
            }
            Packet::SubAck { packet_id, codes } => {
                put_u16(&mut body, *packet_id);
                body.extend_from_slice(codes);
                0x90
            }
            Packet::Unsubscribe { packet_id, filters } => {
                put_u16(&mut body, *packet_id);
                for f in filters {
                    put_str(&mut body, f);
                }
                0xA2
            }
            Packet::UnsubAck { packet_id } => {
                put_u16(&mut body, *packet_id);
                0xB0
            }
            Packet::PingReq => 0xC0,
            Packet::PingResp => 0xD0,
            Packet::Disconnect => 0xE0,
        };
        let mut out = Vec::with_capacity(body.len() + 5);
        out.push(first);
        encode_remaining_length(body.len(), &mut out);
        out.extend_from_slice(&body);
        out
    }

}

/// Size on the wire of a PUBLISH with this topic, payload length and QoS.
pub fn publish_frame_len(topic: &str, payload_len: usize, qos: QoS) -> usize {
    let body = 2 + topic.len() + payload_len + if qos == QoS::AtLeastOnce { 2 } else { 0 };
    let mut len_bytes = Vec::with_capacity(4);
    encode_remaining_length(body, &mut len_bytes);
    1 + len_bytes.len() + body
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn u8(&mut self) -> Result<u8, CodecError> {
        let b = *self.buf.get(self.pos).ok_or(CodecError::Truncated)?;
        self.pos += 1;
        Ok(b)
    }

    fn u16(&mut self) -> Result<u16, CodecError> {
        Ok(u16::from_be_bytes([self.u8()?, self.u8()?]))
    }

    fn bytes(&mut self) -> Result<&'a [u8], CodecError> {
        let n = self.u16()? as usize;
        let end = self.pos + n;
        let s = self.buf.get(self.pos..end).ok_or(CodecError::Truncated)?;
        self.pos = end;
        Ok(s)
    }

    fn string(&mut self) -> Result<String, CodecError> {
        let b = self.bytes()?;
        let s = std::str::from_utf8(b).map_err(|_| CodecError::BadUtf8)?;
        if s.contains('\0') {
            return Err(CodecError::BadUtf8);
        }
        Ok(s.to_owned())
    }

    fn rest(&mut self) -> &'a [u8] {
        let r = &self.buf[self.pos..];
        self.pos = self.buf.len();
        r
    }

    fn done(&self) -> bool {
        self.pos == self.buf.len()
    }
}

/// Parses the remaining-length varint at the start of `buf`.
/// Returns `(length, bytes_used)` or `None` if more bytes are needed.
pub fn decode_remaining_length(buf: &[u8]) -> Result<Option<(usize, usize)>, CodecError> {
    let mut mult = 1usize;
    let mut value = 0usize;
    for (i, &b) in buf.iter().enumerate() {
        if i == 4 {
            return Err(CodecError::BadRemainingLength);
        }
        value += (b & 0x7F) as usize * mult;
        if b & 0x80 == 0 {
            // Non-minimal encodings (trailing zero continuation) are rejected.
            if i > 0 && b == 0 {
                return Err(CodecError::BadRemainingLength);
            }
            return Ok(Some((value, i + 1)));
        }
        mult *= 128;
    }
    if buf.len() >= 4 {
        return Err(CodecError::BadRemainingLength);
    }
    Ok(None)
}

fn decode_body(first: u8, body: &[u8]) -> Result<Packet, CodecError> {
    let kind = first >> 4;
    let flags = first & 0x0F;
    let mut c = Cursor { buf: body, pos: 0 };
    let require_flags = |want: u8| {
        if flags == want {
            Ok(())
        } else {
            Err(CodecError::BadFlags(first))
        }
    };
    let packet = match kind {
        1 => {
            require_flags(0)?;
            let proto = c.string()?;
            let level = c.u8()?;
            if proto != "MQTT" || level != 4 {
                return Err(CodecError::Protocol("unsupported protocol name or level"));
            }
            let cf = c.u8()?;
            if cf & 0x01 != 0 {
                return Err(CodecError::Protocol("reserved connect flag set"));
            }
            let keep_alive = c.u16()?;
            let client_id = c.string()?;
            if cf & 0x04 != 0 {
                // Will messages are not supported; parse and discard.
                c.string()?;
                c.bytes()?;
            }
            let username = if cf & 0x80 != 0 { Some(c.string()?) } else { None };
            let password = if cf & 0x40 != 0 {
                Some(c.bytes()?.to_vec())
            } else {
                None
            };
            Packet::Connect(Connect {
                client_id,
                keep_alive,
                clean_session: cf & 0x02 != 0,
                username,
                password,
            })
        }
        2 => {
            require_flags(0)?;
            let ack = c.u8()?;
            Packet::ConnAck {
                session_present: ack & 1 == 1,
                code: c.u8()?,
            }
        }
        3 => {
            let qos = QoS::from_u8((flags >> 1) & 0x03)
                .ok_or(CodecError::Protocol("QoS 2 is not supported"))?;
            let topic = c.string()?;
            let packet_id = match qos {
                QoS::AtMostOnce => None,
                QoS::AtLeastOnce => Some(c.u16()?),
            };
            if packet_id == Some(0) {
                return Err(CodecError::Protocol("packet id 0"));
            }
            let payload = c.rest().to_vec();
            if payload.len() > MAX_PAYLOAD {
                return Err(CodecError::TooLarge(payload.len()));
            }
            Packet::Publish(Publish {
                dup: flags & 0x08 != 0,
                qos,
                retain: flags & 0x01 != 0,
                topic,
                packet_id,
                payload,
            })
        }
        4 => {
            require_flags(0)?;
            Packet::PubAck {
                packet_id: c.u16()?,
            }
        }
        8 => {
            require_flags(2)?;
            let packet_id = c.u16()?;
            let mut filters = Vec::new();
            while !c.done() {
                let f = c.string()?;
                let q = c.u8()?;
                if q > 2 {
                    return Err(CodecError::Protocol("bad requested QoS"));
                }
                filters.push((f, q));
            }
            if filters.is_empty() {
                return Err(CodecError::Protocol("empty subscribe"));
            }
            Packet::Subscribe { packet_id, filters }
        }
        9 => {
            require_flags(0)?;
            let packet_id = c.u16()?;
            Packet::SubAck {
                packet_id,
                codes: c.rest().to_vec(),
            }
        }
        10 => {
            require_flags(2)?;
            let packet_id = c.u16()?;
            let mut filters = Vec::new();
            while !c.done() {
                filters.push(c.string()?);
            }
            if filters.is_empty() {
                return Err(CodecError::Protocol("empty unsubscribe"));
            }
            Packet::Unsubscribe { packet_id, filters }
        }
        11 => {
            require_flags(0)?;
            Packet::UnsubAck {
                packet_id: c.u16()?,
            }
        }
        12 => {
            require_flags(0)?;
            Packet::PingReq
        }
        13 => {
            require_flags(0)?;
            Packet::PingResp
        }
        14 => {
            require_flags(0)?;
            Packet::Disconnect
        }
        _ => return Err(CodecError::UnsupportedType(first)),
    };
    if !c.done() {
        return Err(CodecError::Protocol("trailing bytes in packet"));
    }
    Ok(packet)
}

/// Decodes one packet from the front of `buf`. `Ok(None)` means incomplete.
pub fn decode(buf: &[u8]) -> Result<Option<(Packet, usize)>, CodecError> {
    let Some(&first) = buf.first() else {
        return Ok(None);
    };
    let Some((len, used)) = decode_remaining_length(&buf[1..])? else {
        return Ok(None);
    };
    if len > MAX_REMAINING {
        return Err(CodecError::TooLarge(len));
    }
    let start = 1 + used;
    if buf.len() < start + len {
        return Ok(None);
    }
    let packet = decode_body(first, &buf[start..start + len])?;
    Ok(Some((packet, start + len)))
}

/// Blocking read of a single packet. Returns the packet and its wire size.
pub fn read_packet<R: Read>(r: &mut R) -> Result<(Packet, usize), CodecError> {
    let mut first = [0u8; 1];
    r.read_exact(&mut first)?;
    let mut len_bytes = Vec::with_capacity(4);
    let len = loop {
        let mut b = [0u8; 1];
        r.read_exact(&mut b)?;
        len_bytes.push(b[0]);
        if let Some((len, _)) = decode_remaining_length(&len_bytes)? {
            break len;
        }
    };
    if len > MAX_REMAINING {
        return Err(CodecError::TooLarge(len));
    }
    let mut body = vec![0u8; len];
    r.read_exact(&mut body)?;
    Ok((decode_body(first[0], &body)?, 1 + len_bytes.len() + len))
}

pub fn write_packet<W: Write>(w: &mut W, p: &Packet) -> io::Result<usize> {
    let bytes = p.encode();
    w.write_all(&bytes)?;
    Ok(bytes.len())
}
