//! SOP/EOP word-stream framing.
//!
//! A frame travels over the FIFO interface as a gap-free run of 64-bit words:
//!
//! ```text
//! word 0        magic 0xD00DF00D (hi 32) | payload length in bytes (lo 32)   <- sop
//! word 1        board_id (16) | reserved (16) | frame_id (32)
//! word 2        trigger_id (32) | reserved (32)
//! word 3..3+n   payload, n = length / 8
//! word 3+n      reserved zero (hi 32) | CRC-32 (lo 32)                       <- eop
//! ```
//!
//! All words are big-endian on the wire. The CRC is the standard reflected
//! CRC-32 (poly 0x04C11DB7, init and xorout 0xFFFFFFFF) over the serialized
//! header and payload bytes.
//!
//! Two decoders are provided: [`FrameDecoder`] consumes [`WordEvent`]s with
//! explicit delimiters, [`StreamDecoder`] consumes a raw byte stream (a TCP
//! connection) and finds frame boundaries from the header length field.

use std::fmt;

use bytes::Bytes;
use thiserror::Error;

pub const FRAME_MAGIC: u32 = 0xD00D_F00D;
pub const HEADER_WORDS: usize = 3;
pub const WORD_BYTES: usize = 8;
/// Header plus checksum trailer, in bytes.
pub const FRAMING_OVERHEAD: usize = (HEADER_WORDS + 1) * WORD_BYTES;
/// Largest payload the decoders accept unless configured otherwise.
pub const DEFAULT_MAX_PAYLOAD: u32 = 64 * 1024 * 1024;

/// One beat of the FIFO interface.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct WordEvent {
    pub data: u64,
    pub sop: bool,
    pub eop: bool,
    pub valid: bool,
}

impl WordEvent {
    pub const fn word(data: u64) -> Self {
        Self {
            data,
            sop: false,
            eop: false,
            valid: true,
        }
    }

    /// An idle cycle (write strobe low).
    pub const fn idle() -> Self {
        Self {
            data: 0,
            sop: false,
            eop: false,
            valid: false,
        }
    }

    /// Delimiters are only meaningful on valid beats.
    pub fn is_well_formed(&self) -> bool {
        self.valid || !(self.sop || self.eop)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum InvalidFrame {
    #[error("payload length {0} is not a positive multiple of 8")]
    PayloadLength(usize),
    #[error("payload length {0} does not fit the 32-bit length field")]
    PayloadTooLarge(usize),
}

/// One detector readout frame.
#[derive(Clone, PartialEq, Eq)]
pub struct Frame {
    board_id: u16,
    frame_id: u32,
    trigger_id: u32,
    payload: Bytes,
    checksum: u32,
}

impl Frame {
    pub fn new(
        board_id: u16,
        frame_id: u32,
        trigger_id: u32,
        payload: impl Into<Bytes>,
    ) -> Result<Self, InvalidFrame> {
        let payload = payload.into();
        validate_payload_len(payload.len())?;
        let header = header_words(board_id, frame_id, trigger_id, payload.len() as u32);
        let checksum = checksum(&header, &payload);
        Ok(Self {
            board_id,
            frame_id,
            trigger_id,
            payload,
            checksum,
        })
    }

    pub fn board_id(&self) -> u16 {
        self.board_id
    }

    pub fn frame_id(&self) -> u32 {
        self.frame_id
    }

    pub fn trigger_id(&self) -> u32 {
        self.trigger_id
    }

    pub fn payload(&self) -> &Bytes {
        &self.payload
    }

    pub fn checksum(&self) -> u32 {
        self.checksum
    }

    pub fn header_words(&self) -> [u64; HEADER_WORDS] {
        header_words(
            self.board_id,
            self.frame_id,
            self.trigger_id,
            self.payload.len() as u32,
        )
    }

    /// Bytes this frame occupies on the wire, framing included.
    pub fn serialized_len(&self) -> usize {
        serialized_len(self.payload.len())
    }

    pub fn word_count(&self) -> usize {
        self.serialized_len() / WORD_BYTES
    }

    /// Appends the wire representation to `out`.
    pub fn write_to(&self, out: &mut Vec<u8>) {
        out.reserve(self.serialized_len());
        for w in self.header_words() {
            out.extend_from_slice(&w.to_be_bytes());
        }
        out.extend_from_slice(&self.payload);
        out.extend_from_slice(&(self.checksum as u64).to_be_bytes());
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.serialized_len());
        self.write_to(&mut out);
        out
    }
}

impl fmt::Debug for Frame {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Frame")
            .field("board_id", &self.board_id)
            .field("frame_id", &self.frame_id)
            .field("trigger_id", &self.trigger_id)
            .field("payload_len", &self.payload.len())
            .field("checksum", &format_args!("{:#010x}", self.checksum))
            .finish()
    }
}

pub fn serialized_len(payload_len: usize) -> usize {
    payload_len + FRAMING_OVERHEAD
}

fn validate_payload_len(len: usize) -> Result<(), InvalidFrame> {
    if len == 0 || len % WORD_BYTES != 0 {
        return Err(InvalidFrame::PayloadLength(len));
    }
    if len > u32::MAX as usize {
        return Err(InvalidFrame::PayloadTooLarge(len));
    }
    Ok(())
}

fn header_words(board_id: u16, frame_id: u32, trigger_id: u32, len: u32) -> [u64; HEADER_WORDS] {
    [
        (FRAME_MAGIC as u64) << 32 | len as u64,
        (board_id as u64) << 48 | frame_id as u64,
        (trigger_id as u64) << 32,
    ]
}

/// CRC-32 over the big-endian header words followed by the payload bytes.
pub fn checksum(header: &[u64; HEADER_WORDS], payload: &[u8]) -> u32 {
    let mut h = crc32fast::Hasher::new();
    for w in header {
        h.update(&w.to_be_bytes());
    }
    h.update(payload);
    h.finalize()
}

/// Serializes a frame into its delimited word sequence.
pub fn encode_frame(frame: &Frame) -> Vec<WordEvent> {
    let n = frame.word_count();
    let mut out = Vec::with_capacity(n);
    for w in frame.header_words() {
        out.push(WordEvent::word(w));
    }
    for chunk in frame.payload.chunks_exact(WORD_BYTES) {
        out.push(WordEvent::word(u64::from_be_bytes(chunk.try_into().unwrap())));
    }
    out.push(WordEvent::word(frame.checksum as u64));
    out[0].sop = true;
    out[n - 1].eop = true;
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FramingErrorKind {
    /// End delimiter seen with no frame open.
    EopBeforeSop,
    /// Start delimiter seen while a frame was still open.
    SopWhileOpen,
    /// Valid data outside any frame.
    DataOutsideFrame,
    /// An idle beat between sop and eop.
    GapInFrame,
    /// First header word does not carry the frame magic.
    BadMagic,
    /// Header length field is zero, unaligned or over the limit.
    BadLength { declared: u32 },
    /// Word count between sop and eop disagrees with the length field.
    LengthMismatch { expected_words: u64, observed_words: u64 },
    ChecksumMismatch { expected: u32, computed: u32 },
    /// Trailer reserved bits are not zero.
    BadTrailer,
    /// Stream ended inside a frame.
    Truncated,
}

impl fmt::Display for FramingErrorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::EopBeforeSop => write!(f, "eop before sop"),
            Self::SopWhileOpen => write!(f, "sop while a frame is open"),
            Self::DataOutsideFrame => write!(f, "valid data outside a frame"),
            Self::GapInFrame => write!(f, "invalid word inside a frame"),
            Self::BadMagic => write!(f, "bad frame magic"),
            Self::BadLength { declared } => write!(f, "bad payload length {declared}"),
            Self::LengthMismatch {
                expected_words,
                observed_words,
            } => write!(
                f,
                "length mismatch: header implies {expected_words} words, saw {observed_words}"
            ),
            Self::ChecksumMismatch { expected, computed } => write!(
                f,
                "checksum mismatch: trailer {expected:#010x}, computed {computed:#010x}"
            ),
            Self::BadTrailer => write!(f, "nonzero reserved bits in checksum word"),
            Self::Truncated => write!(f, "stream ended inside a frame"),
        }
    }
}

/// A decode failure. `offset` counts words for [`FrameDecoder`] and bytes
/// for [`StreamDecoder`], from the start of the stream.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{kind} at offset {offset} (frame_id {frame_id:?})")]
pub struct FramingError {
    pub kind: FramingErrorKind,
    pub frame_id: Option<u32>,
    pub offset: u64,
}

#[derive(Debug, Clone, Copy)]
struct ParsedHeader {
    board_id: u16,
    frame_id: u32,
    trigger_id: u32,
    len: u32,
}

fn parse_header(words: &[u64; HEADER_WORDS]) -> ParsedHeader {
    ParsedHeader {
        len: words[0] as u32,
        board_id: (words[1] >> 48) as u16,
        frame_id: words[1] as u32,
        trigger_id: (words[2] >> 32) as u32,
    }
}

/// Validates a complete header + payload + trailer and builds the frame.
fn finish_frame(
    words: &[u64; HEADER_WORDS],
    hdr: &ParsedHeader,
    payload: Bytes,
    trailer: u64,
) -> Result<Frame, FramingErrorKind> {
    if trailer >> 32 != 0 {
        return Err(FramingErrorKind::BadTrailer);
    }
    let expected = trailer as u32;
    let computed = checksum(words, &payload);
    if expected != computed {
        return Err(FramingErrorKind::ChecksumMismatch { expected, computed });
    }
    Ok(Frame {
        board_id: hdr.board_id,
        frame_id: hdr.frame_id,
        trigger_id: hdr.trigger_id,
        payload,
        checksum: computed,
    })
}

fn check_len(len: u32, max: u32) -> Result<(), FramingErrorKind> {
    if len == 0 || len % WORD_BYTES as u32 != 0 || len > max {
        Err(FramingErrorKind::BadLength { declared: len })
    } else {
        Ok(())
    }
}

#[derive(Debug)]
enum WordState {
    Idle,
    /// Discarding until the next sop.
    Resync,
    Open {
        start: u64,
        header: [u64; HEADER_WORDS],
        parsed: Option<ParsedHeader>,
        words: u64,
        payload: Vec<u8>,
    },
}

/// Incremental decoder for delimited word streams.
///
/// Output does not depend on how the input is chunked.
#[derive(Debug)]
pub struct FrameDecoder {
    state: WordState,
    offset: u64,
    max_payload: u32,
}

impl Default for FrameDecoder {
    fn default() -> Self {
        Self::new()
    }
}

impl FrameDecoder {
    pub fn new() -> Self {
        Self::with_max_payload(DEFAULT_MAX_PAYLOAD)
    }

    pub fn with_max_payload(max_payload: u32) -> Self {
        Self {
            state: WordState::Idle,
            offset: 0,
            max_payload,
        }
    }

    /// True when no frame is open.
    pub fn is_idle(&self) -> bool {
        !matches!(self.state, WordState::Open { .. })
    }

    /// Words consumed so far.
    pub fn offset(&self) -> u64 {
        self.offset
    }

    pub fn feed(&mut self, events: &[WordEvent]) -> Vec<Result<Frame, FramingError>> {
        let mut out = Vec::new();
        for ev in events {
            if let Some(r) = self.push(*ev) {
                out.push(r);
            }
        }
        out
    }

    pub fn push(&mut self, ev: WordEvent) -> Option<Result<Frame, FramingError>> {
        let offset = self.offset;
        self.offset += 1;
        let err = |kind, frame_id| FramingError {
            kind,
            frame_id,
            offset,
        };

        match &mut self.state {
            WordState::Idle | WordState::Resync => {
                if !ev.valid {
                    return None;
                }
                if ev.sop {
                    return self.open(ev, offset);
                }
                if matches!(self.state, WordState::Resync) {
                    return None;
                }
                self.state = WordState::Resync;
                let kind = if ev.eop {
                    FramingErrorKind::EopBeforeSop
                } else {
                    FramingErrorKind::DataOutsideFrame
                };
                Some(Err(err(kind, None)))
            }
            WordState::Open {
                parsed,
                header,
                words,
                payload,
                ..
            } => {
                let frame_id = parsed.map(|p| p.frame_id);
                if !ev.valid {
                    self.state = WordState::Resync;
                    return Some(Err(err(FramingErrorKind::GapInFrame, frame_id)));
                }
                if ev.sop {
                    // The new sop starts the next frame; the open one is lost.
                    // The abandoned frame is reported; if the new header is
                    // itself bad the decoder is left resyncing.
                    let e = err(FramingErrorKind::SopWhileOpen, frame_id);
                    let _ = self.open(ev, offset);
                    return Some(Err(e));
                }
                let idx = *words as usize;
                *words += 1;
                if idx < HEADER_WORDS {
                    header[idx] = ev.data;
                    if idx == HEADER_WORDS - 1 {
                        *parsed = Some(parse_header(header));
                    }
                } else {
                    let p = parsed.expect("header parsed");
                    let payload_words = p.len as u64 / WORD_BYTES as u64;
                    let expected_words = HEADER_WORDS as u64 + payload_words + 1;
                    if !ev.eop {
                        if *words >= expected_words {
                            let observed_words = *words;
                            self.state = WordState::Resync;
                            return Some(Err(err(
                                FramingErrorKind::LengthMismatch {
                                    expected_words,
                                    observed_words,
                                },
                                frame_id,
                            )));
                        }
                        payload.extend_from_slice(&ev.data.to_be_bytes());
                        return None;
                    }
                }
                if !ev.eop {
                    return None;
                }
                // eop
                let observed_words = *words;
                let state = std::mem::replace(&mut self.state, WordState::Idle);
                let WordState::Open {
                    header,
                    parsed,
                    payload,
                    ..
                } = state
                else {
                    unreachable!()
                };
                let Some(p) = parsed else {
                    return Some(Err(err(
                        FramingErrorKind::LengthMismatch {
                            expected_words: HEADER_WORDS as u64 + 2,
                            observed_words,
                        },
                        None,
                    )));
                };
                let expected_words = HEADER_WORDS as u64 + p.len as u64 / WORD_BYTES as u64 + 1;
                if observed_words != expected_words {
                    return Some(Err(err(
                        FramingErrorKind::LengthMismatch {
                            expected_words,
                            observed_words,
                        },
                        Some(p.frame_id),
                    )));
                }
                Some(
                    finish_frame(&header, &p, Bytes::from(payload), ev.data)
                        .map_err(|kind| err(kind, Some(p.frame_id))),
                )
            }
        }
    }

    fn open(&mut self, ev: WordEvent, offset: u64) -> Option<Result<Frame, FramingError>> {
        let err = |kind| {
            Some(Err(FramingError {
                kind,
                frame_id: None,
                offset,
            }))
        };
        if (ev.data >> 32) as u32 != FRAME_MAGIC {
            self.state = WordState::Resync;
            return err(FramingErrorKind::BadMagic);
        }
        let len = ev.data as u32;
        if let Err(kind) = check_len(len, self.max_payload) {
            self.state = WordState::Resync;
            return err(kind);
        }
        if ev.eop {
            self.state = WordState::Idle;
            return err(FramingErrorKind::LengthMismatch {
                expected_words: HEADER_WORDS as u64 + len as u64 / WORD_BYTES as u64 + 1,
                observed_words: 1,
            });
        }
        let mut header = [0u64; HEADER_WORDS];
        header[0] = ev.data;
        self.state = WordState::Open {
            start: offset,
            header,
            parsed: None,
            words: 1,
            payload: Vec::with_capacity(len as usize),
        };
        None
    }

    /// Reports a frame left open at end of input, if any.
    pub fn finish(self) -> Option<FramingError> {
        match self.state {
            WordState::Open { start, parsed, .. } => Some(FramingError {
                kind: FramingErrorKind::Truncated,
                frame_id: parsed.map(|p| p.frame_id),
                offset: start,
            }),
            _ => None,
        }
    }
}

/// One-shot decode. The decoder is returned so callers can inspect or
/// continue from the residual state.
pub fn decode_stream(events: &[WordEvent]) -> (Vec<Result<Frame, FramingError>>, FrameDecoder) {
    let mut dec = FrameDecoder::new();
    let out = dec.feed(events);
    (out, dec)
}

/// Byte-stream decoder for frames carried back-to-back over TCP.
///
/// Boundaries come from the header length field. On error the decoder skips
/// one word and scans word-aligned for the next magic.
#[derive(Debug)]
pub struct StreamDecoder {
    buf: Vec<u8>,
    /// Stream offset of `buf[0]`.
    base: u64,
    resyncing: bool,
    max_payload: u32,
}

impl Default for StreamDecoder {
    fn default() -> Self {
        Self::new()
    }
}

enum Step {
    Frame(Frame, usize),
    Error(FramingError, usize),
    /// Skip silently while resyncing.
    Skip(usize),
    NeedMore,
}

impl StreamDecoder {
    pub fn new() -> Self {
        Self::with_max_payload(DEFAULT_MAX_PAYLOAD)
    }

    pub fn with_max_payload(max_payload: u32) -> Self {
        Self {
            buf: Vec::new(),
            base: 0,
            resyncing: false,
            max_payload,
        }
    }

    /// Bytes consumed and decided so far.
    pub fn offset(&self) -> u64 {
        self.base
    }

    pub fn buffered(&self) -> usize {
        self.buf.len()
    }

    /// Feeds bytes, appending results to `out`.
    pub fn feed_into(&mut self, mut data: &[u8], out: &mut Vec<Result<Frame, FramingError>>) {
        // Fast path: parse straight from the caller's slice while nothing is
        // buffered.
        if self.buf.is_empty() {
            loop {
                match self.step(data) {
                    Step::NeedMore => break,
                    step => data = &data[self.apply(step, out)..],
                }
            }
            self.buf.extend_from_slice(data);
            return;
        }
        self.buf.extend_from_slice(data);
        let mut pos = 0;
        loop {
            let buf = std::mem::take(&mut self.buf);
            let step = self.step(&buf[pos..]);
            self.buf = buf;
            match step {
                Step::NeedMore => break,
                step => pos += self.apply(step, out),
            }
        }
        self.buf.drain(..pos);
    }

    pub fn feed(&mut self, data: &[u8]) -> Vec<Result<Frame, FramingError>> {
        let mut out = Vec::new();
        self.feed_into(data, &mut out);
        out
    }

    /// Ends the stream; reports leftover bytes that never formed a frame.
    pub fn finish(self) -> Option<FramingError> {
        if self.buf.is_empty() || self.resyncing {
            return None;
        }
        let frame_id = (self.buf.len() >= 2 * WORD_BYTES)
            .then(|| u32::from_be_bytes(self.buf[12..16].try_into().unwrap()));
        Some(FramingError {
            kind: FramingErrorKind::Truncated,
            frame_id,
            offset: self.base,
        })
    }

    fn apply(&mut self, step: Step, out: &mut Vec<Result<Frame, FramingError>>) -> usize {
        let n = match step {
            Step::Frame(f, n) => {
                self.resyncing = false;
                out.push(Ok(f));
                n
            }
            Step::Error(e, n) => {
                self.resyncing = true;
                out.push(Err(e));
                n
            }
            Step::Skip(n) => n,
            Step::NeedMore => 0,
        };
        self.base += n as u64;
        n
    }

    fn step(&self, data: &[u8]) -> Step {
        if data.len() < WORD_BYTES {
            return Step::NeedMore;
        }
        let w0 = u64::from_be_bytes(data[..8].try_into().unwrap());
        let err = |kind, frame_id| {
            if self.resyncing {
                Step::Skip(WORD_BYTES)
            } else {
                Step::Error(
                    FramingError {
                        kind,
                        frame_id,
                        offset: self.base,
                    },
                    WORD_BYTES,
                )
            }
        };
        if (w0 >> 32) as u32 != FRAME_MAGIC {
            return err(FramingErrorKind::BadMagic, None);
        }
        let len = w0 as u32;
        if let Err(kind) = check_len(len, self.max_payload) {
            return err(kind, None);
        }
        let total = serialized_len(len as usize);
        if data.len() < total {
            return Step::NeedMore;
        }
        let word = |i: usize| u64::from_be_bytes(data[i * 8..i * 8 + 8].try_into().unwrap());
        let header = [w0, word(1), word(2)];
        let hdr = parse_header(&header);
        let payload_end = HEADER_WORDS * WORD_BYTES + len as usize;
        let payload = Bytes::copy_from_slice(&data[HEADER_WORDS * WORD_BYTES..payload_end]);
        let trailer = word(total / WORD_BYTES - 1);
        match finish_frame(&header, &hdr, payload, trailer) {
            Ok(frame) => Step::Frame(frame, total),
            // A corrupted length can make a bogus span look complete; report
            // it regardless of resync state since a magic was found.
            Err(kind) => Step::Error(
                FramingError {
                    kind,
                    frame_id: Some(hdr.frame_id),
                    offset: self.base,
                },
                WORD_BYTES,
            ),
        }
    }
}

/// Converts a byte stream into undelimited word beats (test and tooling helper).
pub fn words_from_bytes(bytes: &[u8]) -> impl Iterator<Item = u64> + '_ {
    bytes
        .chunks_exact(WORD_BYTES)
        .map(|c| u64::from_be_bytes(c.try_into().unwrap()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn frame(board: u16, id: u32, len: usize) -> Frame {
        let payload: Vec<u8> = (0..len).map(|i| (i as u8).wrapping_mul(31)).collect();
        Frame::new(board, id, id.wrapping_mul(3), payload).unwrap()
    }

    fn random_frame(rng: &mut impl Rng) -> Frame {
        let words = rng.random_range(1..=64);
        let mut payload = vec![0u8; words * 8];
        rng.fill(&mut payload[..]);
        Frame::new(rng.random(), rng.random(), rng.random(), payload).unwrap()
    }

    /// Bitwise reflected CRC-32, independent of the table-driven crate.
    fn crc32_reference(data: &[u8]) -> u32 {
        let mut crc = 0xFFFF_FFFFu32;
        for &b in data {
            crc ^= b as u32;
            for _ in 0..8 {
                let mask = (crc & 1).wrapping_neg();
                crc = (crc >> 1) ^ (0xEDB8_8320 & mask);
            }
        }
        !crc
    }

    #[test]
    fn crc_matches_reference_check_value() {
        assert_eq!(crc32_reference(b"123456789"), 0xCBF4_3926);
        let f = frame(7, 11, 40);
        let bytes = f.to_bytes();
        let covered = &bytes[..bytes.len() - 8];
        assert_eq!(f.checksum(), crc32_reference(covered));
    }

    #[test]
    fn header_layout_is_bit_exact() {
        let f = Frame::new(0x0102, 0x0A0B_0C0D, 0x1122_3344, vec![0u8; 16]).unwrap();
        let b = f.to_bytes();
        assert_eq!(b.len(), 16 + 32);
        assert_eq!(&b[0..8], &[0xD0, 0x0D, 0xF0, 0x0D, 0, 0, 0, 16]);
        assert_eq!(&b[8..16], &[0x01, 0x02, 0, 0, 0x0A, 0x0B, 0x0C, 0x0D]);
        assert_eq!(&b[16..24], &[0x11, 0x22, 0x33, 0x44, 0, 0, 0, 0]);
        assert_eq!(&b[40..44], &[0, 0, 0, 0]);
        assert_eq!(u32::from_be_bytes(b[44..48].try_into().unwrap()), f.checksum());
    }

    #[test]
    fn minimal_frame_is_five_words() {
        let f = Frame::new(1, 0, 0, vec![0u8; 8]).unwrap();
        let w = encode_frame(&f);
        assert_eq!(w.len(), 5);
        assert!(w[0].sop && !w[0].eop);
        assert!(w[4].eop && !w[4].sop);
    }

    #[test]
    fn word_count_arithmetic() {
        let f = frame(1, 0, 160);
        let w = encode_frame(&f);
        assert_eq!(w.len(), 24);
        assert_eq!(w.iter().filter(|e| e.sop).count(), 1);
        assert_eq!(w.iter().filter(|e| e.eop).count(), 1);
    }

    #[test]
    fn rejects_bad_payload_lengths() {
        assert_eq!(
            Frame::new(1, 0, 0, Vec::new()).unwrap_err(),
            InvalidFrame::PayloadLength(0)
        );
        assert_eq!(
            Frame::new(1, 0, 0, vec![0u8; 12]).unwrap_err(),
            InvalidFrame::PayloadLength(12)
        );
    }

    #[test]
    fn delimiters_and_valid_flags_on_random_frames() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let f = random_frame(&mut rng);
            let w = encode_frame(&f);
            let sops: Vec<_> = (0..w.len()).filter(|&i| w[i].sop).collect();
            let eops: Vec<_> = (0..w.len()).filter(|&i| w[i].eop).collect();
            assert_eq!(sops, vec![0]);
            assert_eq!(eops, vec![w.len() - 1]);
            assert!(w.iter().all(|e| e.valid && e.is_well_formed()));
            assert_eq!(w.len(), 4 + f.payload().len() / 8);
        }
    }

    #[test]
    fn round_trip() {
        let f = frame(3, 9, 64);
        let (out, dec) = decode_stream(&encode_frame(&f));
        assert_eq!(out, vec![Ok(f)]);
        assert!(dec.is_idle());
    }

    #[test]
    fn eop_first_is_an_error() {
        let mut ev = WordEvent::word(5);
        ev.eop = true;
        let (out, _) = decode_stream(&[ev]);
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].as_ref().unwrap_err().kind, FramingErrorKind::EopBeforeSop);
    }

    #[test]
    fn idle_between_frames_is_skipped_but_not_inside() {
        let a = frame(1, 0, 16);
        let b = frame(1, 1, 16);
        let mut s = vec![WordEvent::idle(); 3];
        s.extend(encode_frame(&a));
        s.extend([WordEvent::idle(); 2]);
        s.extend(encode_frame(&b));
        let (out, _) = decode_stream(&s);
        assert_eq!(out, vec![Ok(a.clone()), Ok(b)]);

        let mut gapped = encode_frame(&a);
        gapped.insert(4, WordEvent::idle());
        let (out, _) = decode_stream(&gapped);
        assert_eq!(out.len(), 1);
        let e = out[0].as_ref().unwrap_err();
        assert_eq!(e.kind, FramingErrorKind::GapInFrame);
        assert_eq!(e.frame_id, Some(0));
    }

    #[test]
    fn sop_while_open_reports_and_restarts() {
        let a = frame(1, 4, 16);
        let b = frame(1, 5, 16);
        let mut s = encode_frame(&a);
        s.truncate(4);
        s.extend(encode_frame(&b));
        let (out, _) = decode_stream(&s);
        assert_eq!(out.len(), 2);
        let e = out[0].as_ref().unwrap_err();
        assert_eq!(e.kind, FramingErrorKind::SopWhileOpen);
        assert_eq!(e.frame_id, Some(4));
        assert_eq!(out[1], Ok(b));
    }

    #[test]
    fn resync_discards_until_next_sop() {
        let a = frame(2, 1, 24);
        let mut s = vec![WordEvent::word(1), WordEvent::word(2)];
        let mut eop = WordEvent::word(3);
        eop.eop = true;
        s.push(eop);
        s.extend(encode_frame(&a));
        let (out, _) = decode_stream(&s);
        assert_eq!(out.len(), 2);
        assert_eq!(out[0].as_ref().unwrap_err().kind, FramingErrorKind::DataOutsideFrame);
        assert_eq!(out[1], Ok(a));
    }

    #[test]
    fn length_word_disagreeing_with_count() {
        let a = frame(2, 8, 24);
        let mut s = encode_frame(&a);
        // drop one payload word, keep eop
        s.remove(4);
        let (out, _) = decode_stream(&s);
        let e = out[0].as_ref().unwrap_err();
        assert_eq!(
            e.kind,
            FramingErrorKind::LengthMismatch {
                expected_words: 7,
                observed_words: 6
            }
        );
        assert_eq!(e.frame_id, Some(8));

        // missing eop: overflow detected once the count is exceeded
        let mut s = encode_frame(&a);
        s.last_mut().unwrap().eop = false;
        s.push(WordEvent::word(0));
        let (out, _) = decode_stream(&s);
        assert!(matches!(
            out[0].as_ref().unwrap_err().kind,
            FramingErrorKind::LengthMismatch { .. }
        ));
    }

    #[test]
    fn checksum_mismatch_names_frame() {
        let a = frame(2, 77, 24);
        let mut s = encode_frame(&a);
        s[5].data ^= 1 << 40;
        let (out, _) = decode_stream(&s);
        let e = out[0].as_ref().unwrap_err();
        assert!(matches!(e.kind, FramingErrorKind::ChecksumMismatch { .. }));
        assert_eq!(e.frame_id, Some(77));
        assert_eq!(e.offset, 6); // detected at the eop word
    }

    #[test]
    fn truncated_stream_reported_on_finish() {
        let a = frame(2, 3, 24);
        let mut s = encode_frame(&a);
        s.truncate(4);
        let (out, dec) = decode_stream(&s);
        assert!(out.is_empty());
        let e = dec.finish().unwrap();
        assert_eq!(e.kind, FramingErrorKind::Truncated);
        assert_eq!(e.frame_id, Some(3));
    }

    #[test]
    fn stream_decoder_matches_word_decoder() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let frames: Vec<_> = (0..50).map(|_| random_frame(&mut rng)).collect();
        let mut bytes = Vec::new();
        for f in &frames {
            f.write_to(&mut bytes);
        }
        let mut dec = StreamDecoder::new();
        let mut out = Vec::new();
        let mut rest = &bytes[..];
        while !rest.is_empty() {
            let n = rng.random_range(1..=rest.len().min(500));
            dec.feed_into(&rest[..n], &mut out);
            rest = &rest[n..];
        }
        let got: Vec<_> = out.into_iter().map(Result::unwrap).collect();
        assert_eq!(got, frames);
        assert_eq!(dec.offset(), bytes.len() as u64);
        assert!(dec.finish().is_none());
    }

    #[test]
    fn stream_decoder_resyncs_after_garbage() {
        let a = frame(1, 0, 16);
        let b = frame(1, 1, 16);
        let mut bytes = vec![0xEEu8; 24];
        a.write_to(&mut bytes);
        let mut bad = b.to_bytes();
        bad[30] ^= 0x10;
        bytes.extend_from_slice(&bad);
        b.write_to(&mut bytes);
        let out = StreamDecoder::new().feed(&bytes);
        assert_eq!(out.len(), 4);
        assert_eq!(out[0].as_ref().unwrap_err().kind, FramingErrorKind::BadMagic);
        assert_eq!(out[0].as_ref().unwrap_err().offset, 0);
        assert_eq!(out[1], Ok(a));
        assert_eq!(out[2].as_ref().unwrap_err().frame_id, Some(1));
        assert_eq!(out[3], Ok(b));
    }

    #[test]
    fn stream_decoder_rejects_oversized_length() {
        let mut dec = StreamDecoder::with_max_payload(64);
        let f = frame(1, 0, 128);
        let out = dec.feed(&f.to_bytes());
        assert_eq!(
            out[0].as_ref().unwrap_err().kind,
            FramingErrorKind::BadLength { declared: 128 }
        );
    }

    #[test]
    fn empty_stream_is_clean() {
        let mut dec = StreamDecoder::new();
        assert!(dec.feed(&[]).is_empty());
        assert!(dec.finish().is_none());
    }
}
