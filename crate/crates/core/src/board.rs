//! One readout board: register file, frame generator and data cache.

use bytes::Bytes;
use serde::{Deserialize, Serialize};

use crate::buffer::{BoundedFrameFifo, DEFAULT_CAPACITY};
use crate::framing::{self, Frame};
use crate::payload::{board_payload, traffic_payload};
use crate::regproto::{
    handle_datagram, handle_request, Access, RegPacket, RegisterFile, DATA_RATE_CTRL,
    DEFAULT_FRAME_SIZE, FIFO_OCCUPANCY, FRAME_SIZE, OVERFLOW_COUNT, THROUGHPUT_COUNT, TRIGGER_CTRL,
};
use crate::transport::{offered_rate, GeneratorSpec, LinkModel};

/// 64 KiB: a traffic generator stalls quickly instead of queueing.
pub const TRAFFIC_FIFO_CAPACITY: u64 = 64 << 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeneratorMode {
    /// One frame per trigger tick at `frame_rate_hz`.
    #[default]
    Trigger,
    /// Token-bucket paced at `DATA_RATE_CTRL`; frames that find the cache
    /// full are dropped and counted.
    Rate,
    /// Paced at `DATA_RATE_CTRL` but waits for cache space, repeating one
    /// fixed payload.
    Traffic,
}

fn default_frame_rate() -> u32 {
    1000
}

fn default_payload() -> u32 {
    DEFAULT_FRAME_SIZE
}

fn default_true() -> bool {
    true
}

fn default_clock() -> f64 {
    80e6
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoardConfig {
    pub board_id: u16,
    #[serde(default)]
    pub generator: GeneratorMode,
    #[serde(default = "default_frame_rate")]
    pub frame_rate_hz: u32,
    /// Reset value of `FRAME_SIZE`; a multiple of 8.
    #[serde(default = "default_payload")]
    pub frame_payload_bytes: u32,
    /// Defaults to 8 GiB, or 64 KiB for the traffic generator.
    #[serde(default)]
    pub fifo_capacity_bytes: Option<u64>,
    /// Slow-control port in real mode; 0 picks a free one.
    #[serde(default)]
    pub udp_port: u16,
    /// Reset value of `DATA_RATE_CTRL` in kbps.
    #[serde(default)]
    pub rate_kbps: u32,
    /// Traffic source parameters; when set they determine the reset rate.
    #[serde(default)]
    pub traffic: Option<GeneratorSpec>,
    /// Reset state of `TRIGGER_CTRL` bit 0, which gates every generator.
    #[serde(default = "default_true")]
    pub enabled: bool,
    /// Board logic clock. Informational.
    #[serde(default = "default_clock")]
    pub clock_hz: f64,
    /// Link toward the next board; the chain default when absent.
    #[serde(default)]
    pub link: Option<LinkModel>,
}

impl BoardConfig {
    pub fn new(board_id: u16) -> Self {
        Self {
            board_id,
            generator: GeneratorMode::Trigger,
            frame_rate_hz: default_frame_rate(),
            frame_payload_bytes: default_payload(),
            fifo_capacity_bytes: None,
            udp_port: 0,
            rate_kbps: 0,
            traffic: None,
            enabled: true,
            clock_hz: default_clock(),
            link: None,
        }
    }

    pub fn fifo_capacity(&self) -> u64 {
        self.fifo_capacity_bytes.unwrap_or(match self.generator {
            GeneratorMode::Traffic => TRAFFIC_FIFO_CAPACITY,
            _ => DEFAULT_CAPACITY,
        })
    }

    /// Reset value of `DATA_RATE_CTRL`.
    pub fn initial_rate_kbps(&self) -> u32 {
        match &self.traffic {
            Some(spec) => (offered_rate(spec) / 1000.0).round().min(u32::MAX as f64) as u32,
            None => self.rate_kbps,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        let id = self.board_id;
        if self.frame_payload_bytes % 8 != 0 {
            return Err(format!("board {id}: frame_payload_bytes must be a multiple of 8"));
        }
        if self.generator == GeneratorMode::Trigger && self.frame_rate_hz == 0 {
            return Err(format!("board {id}: frame_rate_hz must be positive"));
        }
        if let Some(spec) = &self.traffic {
            spec.validate().map_err(|e| format!("board {id}: {e}"))?;
        }
        if let Some(link) = &self.link {
            link.validate().map_err(|e| format!("board {id}: {e}"))?;
        }
        let frame = framing::serialized_len(self.frame_payload_bytes as usize) as u64;
        if self.fifo_capacity() < frame {
            return Err(format!("board {id}: cache smaller than one frame"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct BoardStats {
    pub board_id: u16,
    pub generated: u64,
    pub generated_bytes: u64,
    pub overflows: u64,
    pub first_overflow_ns: Option<u64>,
    pub fifo_high_water_bytes: u64,
    /// Serialized bytes sent on the output link.
    pub sent_bytes: u64,
    pub sent_frames: u64,
}

/// Register file, generator state and cache of one board. The transport
/// around it (virtual or threaded) drives it.
#[derive(Debug, Clone)]
pub struct Board {
    cfg: BoardConfig,
    seed: u64,
    regs: RegisterFile,
    fifo: BoundedFrameFifo,
    next_frame_id: u32,
    traffic: Bytes,
    stats: BoardStats,
}

impl Board {
    pub fn new(cfg: BoardConfig, seed: u64) -> Self {
        let mut regs = RegisterFile::for_board(cfg.board_id, cfg.frame_payload_bytes);
        regs.define(DATA_RATE_CTRL, Access::ReadWrite, cfg.initial_rate_kbps());
        let enable = RegPacket::write_request(0, TRIGGER_CTRL, vec![cfg.enabled as u32]);
        let reply = handle_request(&enable, &mut regs);
        debug_assert!(reply.error_code().is_none());
        Self {
            fifo: BoundedFrameFifo::new(cfg.fifo_capacity()),
            stats: BoardStats {
                board_id: cfg.board_id,
                ..Default::default()
            },
            cfg,
            seed,
            regs,
            next_frame_id: 0,
            traffic: Bytes::new(),
        }
    }

    pub fn id(&self) -> u16 {
        self.cfg.board_id
    }

    pub fn config(&self) -> &BoardConfig {
        &self.cfg
    }

    pub fn registers(&self) -> &RegisterFile {
        &self.regs
    }

    pub fn fifo(&self) -> &BoundedFrameFifo {
        &self.fifo
    }

    pub fn fifo_mut(&mut self) -> &mut BoundedFrameFifo {
        &mut self.fifo
    }

    pub fn stats(&self) -> BoardStats {
        BoardStats {
            overflows: self.fifo.overflow_count(),
            fifo_high_water_bytes: self.fifo.high_water(),
            ..self.stats.clone()
        }
    }

    pub fn enabled(&self) -> bool {
        self.regs.get(TRIGGER_CTRL).unwrap_or(0) & 1 == 1
    }

    pub fn rate_bps(&self) -> u64 {
        self.regs.get(DATA_RATE_CTRL).unwrap_or(0) as u64 * 1000
    }

    pub fn payload_len(&self) -> usize {
        self.regs.get(FRAME_SIZE).unwrap_or(0) as usize
    }

    pub fn frame_len(&self) -> usize {
        framing::serialized_len(self.payload_len())
    }

    pub fn frames_generated(&self) -> u64 {
        self.stats.generated
    }

    /// Builds the next frame in sequence. `trigger_id` is the tick number in
    /// trigger mode and the frame number otherwise.
    pub fn make_frame(&mut self, trigger_id: Option<u32>) -> Frame {
        let id = self.next_frame_id;
        self.next_frame_id = id.wrapping_add(1);
        let len = self.payload_len();
        let payload = match self.cfg.generator {
            GeneratorMode::Traffic => {
                if self.traffic.len() != len {
                    self.traffic = traffic_payload(len);
                }
                self.traffic.clone()
            }
            _ => board_payload(self.seed, self.cfg.board_id, id, len),
        };
        self.stats.generated += 1;
        let frame = Frame::new(self.cfg.board_id, id, trigger_id.unwrap_or(id), payload)
            .expect("FRAME_SIZE is validated to whole words");
        self.stats.generated_bytes += frame.serialized_len() as u64;
        frame
    }

    /// Queues a generated frame; a full cache drops it.
    pub fn offer(&mut self, frame: Frame, now_ns: u64) -> bool {
        let ok = self.fifo.push(frame);
        if !ok && self.stats.first_overflow_ns.is_none() {
            self.stats.first_overflow_ns = Some(now_ns);
        }
        ok
    }

    pub fn note_sent(&mut self, frame: &Frame) {
        self.stats.sent_frames += 1;
        self.stats.sent_bytes += frame.serialized_len() as u64;
    }

    pub fn handle_datagram(&mut self, bytes: &[u8]) -> Option<Vec<u8>> {
        handle_datagram(bytes, &mut self.regs)
    }

    /// Latches the monitoring registers at the end of a sampling window.
    pub fn close_window(&mut self, window_bytes: u64) {
        let sat = |v: u64| v.min(u32::MAX as u64) as u32;
        self.regs.set_internal(THROUGHPUT_COUNT, sat(window_bytes));
        self.regs.set_internal(FIFO_OCCUPANCY, sat(self.fifo.occupancy()));
        self.regs.set_internal(OVERFLOW_COUNT, sat(self.fifo.overflow_count()));
    }
}

/// Integer token bucket in virtual nanoseconds. Tokens are kept in
/// bit-nanoseconds per second so that refills are exact.
#[derive(Debug, Clone)]
pub struct TokenBucket {
    rate_bps: u64,
    tokens: u128,
    cap: u128,
    last_ns: u64,
}

const NS: u128 = 1_000_000_000;

impl TokenBucket {
    /// Starts full.
    pub fn new(rate_bps: u64, capacity_bits: u64, now_ns: u64) -> Self {
        let cap = capacity_bits as u128 * NS;
        Self {
            rate_bps,
            tokens: cap,
            cap,
            last_ns: now_ns,
        }
    }

    pub fn rate_bps(&self) -> u64 {
        self.rate_bps
    }

    pub fn refill(&mut self, now_ns: u64) {
        let dt = now_ns.saturating_sub(self.last_ns) as u128;
        self.tokens = (self.tokens + dt * self.rate_bps as u128).min(self.cap);
        self.last_ns = self.last_ns.max(now_ns);
    }

    /// Accrual up to `now_ns` uses the old rate.
    pub fn set_rate(&mut self, now_ns: u64, rate_bps: u64) {
        self.refill(now_ns);
        self.rate_bps = rate_bps;
    }

    pub fn set_capacity(&mut self, capacity_bits: u64) {
        self.cap = capacity_bits as u128 * NS;
        self.tokens = self.tokens.min(self.cap);
    }

    pub fn try_take(&mut self, now_ns: u64, bits: u64) -> bool {
        self.refill(now_ns);
        let cost = bits as u128 * NS;
        if self.tokens >= cost {
            self.tokens -= cost;
            true
        } else {
            false
        }
    }

    /// Nanoseconds until `bits` are available, `None` at zero rate.
    pub fn wait_ns(&self, bits: u64) -> Option<u64> {
        let cost = bits as u128 * NS;
        if self.tokens >= cost {
            return Some(0);
        }
        if self.rate_bps == 0 {
            return None;
        }
        Some((cost - self.tokens).div_ceil(self.rate_bps as u128) as u64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::regproto::{decode_packet, encode_packet};

    #[test]
    fn reset_registers_follow_config() {
        let mut cfg = BoardConfig::new(3);
        cfg.frame_payload_bytes = 2048;
        cfg.rate_kbps = 500;
        let b = Board::new(cfg.clone(), 0);
        assert!(b.enabled());
        assert_eq!(b.rate_bps(), 500_000);
        assert_eq!(b.payload_len(), 2048);
        assert_eq!(b.registers().get(0), Some(3));
        cfg.enabled = false;
        cfg.traffic = Some(GeneratorSpec::new(156.25e6, 64, 1.0));
        let b = Board::new(cfg, 0);
        assert!(!b.enabled());
        assert_eq!(b.rate_bps(), 10_000_000_000);
    }

    #[test]
    fn frames_follow_frame_size_register() {
        let mut b = Board::new(BoardConfig::new(1), 9);
        let f0 = b.make_frame(Some(0));
        assert_eq!(f0.payload().len(), 1024);
        let req = encode_packet(&RegPacket::write_request(1, FRAME_SIZE, vec![64])).unwrap();
        let reply = decode_packet(&b.handle_datagram(&req).unwrap()).unwrap();
        assert_eq!(reply.data, [64]);
        let f1 = b.make_frame(Some(1));
        assert_eq!((f1.frame_id(), f1.payload().len()), (1, 64));
        assert_eq!(f1.payload(), &board_payload(9, 1, 1, 64));
    }

    #[test]
    fn traffic_frames_share_payload() {
        let mut cfg = BoardConfig::new(1);
        cfg.generator = GeneratorMode::Traffic;
        let mut b = Board::new(cfg, 0);
        assert_eq!(b.fifo().capacity(), TRAFFIC_FIFO_CAPACITY);
        let a = b.make_frame(None);
        let c = b.make_frame(None);
        assert_eq!(a.payload(), c.payload());
        assert_eq!(c.trigger_id(), 1);
    }

    #[test]
    fn overflow_time_and_window_registers() {
        let mut cfg = BoardConfig::new(1);
        cfg.fifo_capacity_bytes = Some(2 * 1056);
        let mut b = Board::new(cfg, 0);
        for t in 0..3 {
            let f = b.make_frame(None);
            b.offer(f, t * 10);
        }
        assert_eq!(b.stats().first_overflow_ns, Some(20));
        b.close_window(12345);
        let r = b.registers();
        assert_eq!(r.get(THROUGHPUT_COUNT), Some(12345));
        assert_eq!(r.get(FIFO_OCCUPANCY), Some(2112));
        assert_eq!(r.get(OVERFLOW_COUNT), Some(1));
    }

    #[test]
    fn bucket_long_run_rate() {
        // 1056-byte frames at 1 Gbps: one per 8448 ns
        let bits = 1056 * 8;
        let mut tb = TokenBucket::new(1_000_000_000, bits, 0);
        let mut now = 0;
        let mut sent = 0u64;
        while now < 10_000_000 {
            if tb.try_take(now, bits) {
                sent += 1;
            }
            now += tb.wait_ns(bits).unwrap().max(1);
        }
        // the full bucket at t=0 adds one frame
        assert_eq!(sent, 10_000_000 / 8448 + 1);
    }

    #[test]
    fn bucket_rate_change_and_zero() {
        let mut tb = TokenBucket::new(1000, 8000, 0);
        assert!(tb.try_take(0, 8000));
        tb.set_rate(4_000_000_000, 0); // 4 s at 1 kbps: 4000 bits accrued
        assert_eq!(tb.wait_ns(8000), None);
        tb.set_rate(4_000_000_000, 4000);
        assert_eq!(tb.wait_ns(8000), Some(1_000_000_000));
    }
}
