//! Deterministic frame payloads.
//!
//! Board frames carry ChaCha8 keystream bytes keyed by the run seed and
//! selected by `(board_id, frame_id)`, so the sink can regenerate and compare
//! them with no side channel. Traffic-generator frames all repeat one fixed
//! payload.

use bytes::Bytes;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::framing::Frame;

/// Stream id reserved for the traffic generator's repeating payload.
const TRAFFIC_STREAM: u64 = u64::MAX;

fn keyed_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn board_stream(board_id: u16, frame_id: u32) -> u64 {
    (board_id as u64) << 32 | frame_id as u64
}

pub fn board_payload(seed: u64, board_id: u16, frame_id: u32, len: usize) -> Bytes {
    let mut buf = vec![0u8; len];
    keyed_rng(seed, board_stream(board_id, frame_id)).fill_bytes(&mut buf);
    buf.into()
}

/// The generator payload is independent of the run seed so that a sink can
/// recognize it without configuration.
pub fn traffic_payload(len: usize) -> Bytes {
    let mut buf = vec![0u8; len];
    keyed_rng(0, TRAFFIC_STREAM).fill_bytes(&mut buf);
    buf.into()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ContentClass {
    /// Matches the keyed board payload for its header.
    Board,
    /// The repeating traffic-generator payload.
    Generator,
    Mismatch,
}

/// Classifies received frames by content. Caches the generator pattern.
#[derive(Debug, Clone)]
pub struct ContentVerifier {
    seed: u64,
    traffic: Bytes,
    scratch: Vec<u8>,
}

impl ContentVerifier {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            traffic: Bytes::new(),
            scratch: Vec::new(),
        }
    }

    pub fn classify(&mut self, frame: &Frame) -> ContentClass {
        let payload = frame.payload();
        if self.traffic.len() < payload.len() {
            self.traffic = traffic_payload(payload.len().next_power_of_two());
        }
        // The keystream is a prefix code in length, so one long cached
        // pattern covers every shorter frame.
        if payload[..] == self.traffic[..payload.len()] {
            return ContentClass::Generator;
        }
        self.scratch.resize(payload.len(), 0);
        keyed_rng(self.seed, board_stream(frame.board_id(), frame.frame_id()))
            .fill_bytes(&mut self.scratch);
        if payload[..] == self.scratch[..] {
            ContentClass::Board
        } else {
            ContentClass::Mismatch
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_key_same_bytes() {
        assert_eq!(board_payload(1, 3, 7, 64), board_payload(1, 3, 7, 64));
    }

    #[test]
    fn distinct_frames_distinct_bytes() {
        assert_ne!(board_payload(1, 1, 0, 64), board_payload(1, 1, 1, 64));
        assert_ne!(board_payload(1, 1, 0, 64), board_payload(1, 2, 0, 64));
        assert_ne!(board_payload(1, 1, 0, 64), board_payload(2, 1, 0, 64));
    }

    #[test]
    fn shorter_payload_is_prefix() {
        let long = board_payload(5, 1, 1, 256);
        let short = board_payload(5, 1, 1, 64);
        assert_eq!(&long[..64], &short[..]);
        assert_eq!(&traffic_payload(256)[..64], &traffic_payload(64)[..]);
    }

    #[test]
    fn classification() {
        let mut v = ContentVerifier::new(9);
        let b = Frame::new(2, 4, 0, board_payload(9, 2, 4, 128)).unwrap();
        assert_eq!(v.classify(&b), ContentClass::Board);
        let g = Frame::new(2, 5, 0, traffic_payload(1024)).unwrap();
        assert_eq!(v.classify(&g), ContentClass::Generator);
        let g2 = Frame::new(2, 6, 0, traffic_payload(24)).unwrap();
        assert_eq!(v.classify(&g2), ContentClass::Generator);
        // right bytes, wrong header key
        let wrong = Frame::new(2, 5, 0, board_payload(9, 2, 4, 128)).unwrap();
        assert_eq!(v.classify(&wrong), ContentClass::Mismatch);
        // wrong seed
        let mut other = ContentVerifier::new(10);
        assert_eq!(other.classify(&b), ContentClass::Mismatch);
    }
}
