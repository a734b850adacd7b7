//! Datagram layout.
//!
//! ```text
//! byte 0     magic 0xA5
//! byte 1     flags: bit7 reply, bit6 error, bit0 op (0 read, 1 write)
//! byte 2     sequence id
//! byte 3     register count (1..=64; 0 in error replies)
//! bytes 4-7  base address, big-endian, 4-byte aligned
//! then       count x 32-bit big-endian values (write requests, success replies)
//!            or one error-code byte (error replies)
//! ```

use std::fmt;

use thiserror::Error;

pub const MAGIC: u8 = 0xA5;
pub const HEADER_LEN: usize = 8;
pub const MAX_COUNT: u8 = 64;
pub const MAX_DATAGRAM: usize = HEADER_LEN + MAX_COUNT as usize * 4;

const FLAG_REPLY: u8 = 0x80;
const FLAG_ERROR: u8 = 0x40;
const FLAG_WRITE: u8 = 0x01;
const FLAG_RESERVED: u8 = !(FLAG_REPLY | FLAG_ERROR | FLAG_WRITE);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Op {
    Read,
    Write,
}

/// Error code carried by an error reply.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ErrorCode {
    UnknownAddress,
    ReadOnly,
    BadCount,
    /// Value rejected by the register's validator.
    BadValue,
    Other(u8),
}

impl ErrorCode {
    pub fn as_u8(self) -> u8 {
        match self {
            Self::UnknownAddress => 0x01,
            Self::ReadOnly => 0x02,
            Self::BadCount => 0x03,
            Self::BadValue => 0x04,
            Self::Other(c) => c,
        }
    }

    pub fn from_u8(c: u8) -> Self {
        match c {
            0x01 => Self::UnknownAddress,
            0x02 => Self::ReadOnly,
            0x03 => Self::BadCount,
            0x04 => Self::BadValue,
            c => Self::Other(c),
        }
    }
}

impl fmt::Display for ErrorCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Self::UnknownAddress => "unknown-address",
            Self::ReadOnly => "read-only",
            Self::BadCount => "bad-count",
            Self::BadValue => "bad-value",
            Self::Other(_) => "unknown-error",
        };
        write!(f, "{name} ({:#04x})", self.as_u8())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum PacketKind {
    Request,
    Reply,
    ErrorReply(ErrorCode),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct RegPacket {
    pub op: Op,
    pub kind: PacketKind,
    pub seq: u8,
    pub addr: u32,
    pub count: u8,
    pub data: Vec<u32>,
}

impl RegPacket {
    pub fn read_request(seq: u8, addr: u32, count: u8) -> Self {
        Self {
            op: Op::Read,
            kind: PacketKind::Request,
            seq,
            addr,
            count,
            data: Vec::new(),
        }
    }

    pub fn write_request(seq: u8, addr: u32, data: Vec<u32>) -> Self {
        Self {
            op: Op::Write,
            kind: PacketKind::Request,
            seq,
            addr,
            count: data.len().min(u8::MAX as usize) as u8,
            data,
        }
    }

    /// Success reply echoing `req`.
    pub fn reply_to(req: &RegPacket, data: Vec<u32>) -> Self {
        Self {
            op: req.op,
            kind: PacketKind::Reply,
            seq: req.seq,
            addr: req.addr,
            count: req.count,
            data,
        }
    }

    pub fn error_reply(op: Op, seq: u8, addr: u32, code: ErrorCode) -> Self {
        Self {
            op,
            kind: PacketKind::ErrorReply(code),
            seq,
            addr,
            count: 0,
            data: Vec::new(),
        }
    }

    pub fn is_request(&self) -> bool {
        self.kind == PacketKind::Request
    }

    pub fn error_code(&self) -> Option<ErrorCode> {
        match self.kind {
            PacketKind::ErrorReply(c) => Some(c),
            _ => None,
        }
    }

    /// Addresses covered by this packet.
    pub fn addresses(&self) -> impl Iterator<Item = u32> + '_ {
        (0..self.count as u32).map(move |i| self.addr.wrapping_add(4 * i))
    }

    fn flags(&self) -> u8 {
        let mut f = match self.op {
            Op::Read => 0,
            Op::Write => FLAG_WRITE,
        };
        match self.kind {
            PacketKind::Request => {}
            PacketKind::Reply => f |= FLAG_REPLY,
            PacketKind::ErrorReply(_) => f |= FLAG_REPLY | FLAG_ERROR,
        }
        f
    }

    fn carries_data(&self) -> bool {
        match self.kind {
            PacketKind::Request => self.op == Op::Write,
            PacketKind::Reply => true,
            PacketKind::ErrorReply(_) => false,
        }
    }

    fn validate(&self) -> Result<(), InvalidPacket> {
        if self.addr % 4 != 0 {
            return Err(InvalidPacket::Misaligned(self.addr));
        }
        if let PacketKind::ErrorReply(_) = self.kind {
            if self.count != 0 || !self.data.is_empty() {
                return Err(InvalidPacket::ErrorWithData);
            }
            return Ok(());
        }
        if self.count == 0 || self.count > MAX_COUNT {
            return Err(InvalidPacket::Count(self.count));
        }
        let expected = if self.carries_data() {
            self.count as usize
        } else {
            0
        };
        if self.data.len() != expected {
            return Err(InvalidPacket::DataLength {
                count: self.count,
                words: self.data.len(),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum InvalidPacket {
    #[error("address {0:#x} is not 4-byte aligned")]
    Misaligned(u32),
    #[error("register count {0} outside 1..=64")]
    Count(u8),
    #[error("count {count} does not match {words} data words")]
    DataLength { count: u8, words: usize },
    #[error("error replies carry no data")]
    ErrorWithData,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MalformedReason {
    BadMagic,
    Truncated,
    TrailingBytes,
    BadCount,
    Misaligned,
    BadFlags,
}

impl fmt::Display for MalformedReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Self::BadMagic => "bad-magic",
            Self::Truncated => "truncated",
            Self::TrailingBytes => "trailing-bytes",
            Self::BadCount => "bad-count",
            Self::Misaligned => "misaligned-address",
            Self::BadFlags => "bad-flags",
        };
        f.write_str(s)
    }
}

/// Decode failure. `seq` is set when the header was long enough to recover it.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("malformed register packet: {reason}")]
pub struct Malformed {
    pub reason: MalformedReason,
    pub seq: Option<u8>,
    pub op: Option<Op>,
    pub addr: Option<u32>,
    pub is_request: bool,
}

pub fn encode_packet(p: &RegPacket) -> Result<Vec<u8>, InvalidPacket> {
    p.validate()?;
    let mut out = Vec::with_capacity(HEADER_LEN + p.data.len() * 4 + 1);
    out.extend_from_slice(&[MAGIC, p.flags(), p.seq, p.count]);
    out.extend_from_slice(&p.addr.to_be_bytes());
    for v in &p.data {
        out.extend_from_slice(&v.to_be_bytes());
    }
    if let PacketKind::ErrorReply(code) = p.kind {
        out.push(code.as_u8());
    }
    Ok(out)
}

pub fn decode_packet(bytes: &[u8]) -> Result<RegPacket, Malformed> {
    let mut m = Malformed {
        reason: MalformedReason::BadMagic,
        seq: None,
        op: None,
        addr: None,
        is_request: false,
    };
    if bytes.first() != Some(&MAGIC) {
        return Err(m);
    }
    if bytes.len() < HEADER_LEN {
        m.reason = MalformedReason::Truncated;
        return Err(m);
    }
    let flags = bytes[1];
    let seq = bytes[2];
    let count = bytes[3];
    let addr = u32::from_be_bytes(bytes[4..8].try_into().unwrap());
    let op = if flags & FLAG_WRITE != 0 {
        Op::Write
    } else {
        Op::Read
    };
    m.seq = Some(seq);
    m.op = Some(op);
    m.addr = Some(addr);
    m.is_request = flags & FLAG_REPLY == 0;
    let fail = |mut m: Malformed, reason| {
        m.reason = reason;
        Err(m)
    };

    if flags & FLAG_RESERVED != 0 || (flags & FLAG_ERROR != 0 && flags & FLAG_REPLY == 0) {
        return fail(m, MalformedReason::BadFlags);
    }
    let body = &bytes[HEADER_LEN..];
    if flags & FLAG_ERROR != 0 {
        if count != 0 {
            return fail(m, MalformedReason::BadCount);
        }
        return match body.len() {
            0 => fail(m, MalformedReason::Truncated),
            1 => Ok(RegPacket::error_reply(op, seq, addr, ErrorCode::from_u8(body[0]))),
            _ => fail(m, MalformedReason::TrailingBytes),
        };
    }
    if count == 0 || count > MAX_COUNT {
        return fail(m, MalformedReason::BadCount);
    }
    if addr % 4 != 0 {
        return fail(m, MalformedReason::Misaligned);
    }
    let is_reply = flags & FLAG_REPLY != 0;
    let data_words = if is_reply || op == Op::Write {
        count as usize
    } else {
        0
    };
    let need = data_words * 4;
    if body.len() < need {
        return fail(m, MalformedReason::Truncated);
    }
    if body.len() > need {
        return fail(m, MalformedReason::TrailingBytes);
    }
    let data = body
        .chunks_exact(4)
        .map(|c| u32::from_be_bytes(c.try_into().unwrap()))
        .collect();
    Ok(RegPacket {
        op,
        kind: if is_reply {
            PacketKind::Reply
        } else {
            PacketKind::Request
        },
        seq,
        addr,
        count,
        data,
    })
}
