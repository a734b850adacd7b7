use serde::{Deserialize, Deserializer, Serialize};

use crate::framing::Frame;
use crate::measure::Arrival;

/// Where a link's idle words go within each period of `P + G` cycles.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GapPlacement {
    /// `P` data words back to back, then `G` idle words.
    #[default]
    Burst,
    /// The `G` idle words interleaved evenly among the `P` data words.
    Spread,
}

fn one() -> u32 {
    1
}

fn sixty_four() -> u32 {
    64
}

/// Accepts `5e9` as well as `5000000000` in config files.
pub(crate) fn lenient_u64<'de, D: Deserializer<'de>>(d: D) -> Result<u64, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Num {
        Int(u64),
        Float(f64),
    }
    match Num::deserialize(d)? {
        Num::Int(v) => Ok(v),
        Num::Float(v) if v >= 0.0 && v.fract() == 0.0 && v < u64::MAX as f64 => Ok(v as u64),
        Num::Float(v) => Err(serde::de::Error::custom(format!(
            "expected a non-negative integer, got {v}"
        ))),
    }
}

/// A serial link moving `word_bits`-wide words at `rate_bps`, inserting
/// `gap_words` idle words for every `words_per_packet` data words.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LinkModel {
    #[serde(deserialize_with = "lenient_u64")]
    pub rate_bps: u64,
    #[serde(default = "one")]
    pub words_per_packet: u32,
    #[serde(default)]
    pub gap_words: u32,
    #[serde(default)]
    pub placement: GapPlacement,
    #[serde(default = "sixty_four")]
    pub word_bits: u32,
}

impl LinkModel {
    pub fn gapless(rate_bps: u64) -> Self {
        Self {
            rate_bps,
            words_per_packet: 1,
            gap_words: 0,
            placement: GapPlacement::Burst,
            word_bits: 64,
        }
    }

    pub fn with_gap(mut self, words_per_packet: u32, gap_words: u32, placement: GapPlacement) -> Self {
        self.words_per_packet = words_per_packet;
        self.gap_words = gap_words;
        self.placement = placement;
        self
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.rate_bps == 0 {
            return Err("link rate must be positive".into());
        }
        if self.words_per_packet == 0 {
            return Err("words_per_packet must be positive".into());
        }
        if self.word_bits == 0 || self.word_bits % 8 != 0 {
            return Err("word_bits must be a positive multiple of 8".into());
        }
        Ok(())
    }

    pub fn duty(&self) -> f64 {
        self.words_per_packet as f64 / self.period() as f64
    }

    pub fn effective_rate_bps(&self) -> f64 {
        self.rate_bps as f64 * self.duty()
    }

    fn period(&self) -> u64 {
        self.words_per_packet as u64 + self.gap_words as u64
    }

    fn word_bytes(&self) -> u64 {
        self.word_bits as u64 / 8
    }

    /// Cycle offset, from the pattern base, of the `i`-th data word.
    fn position(&self, i: u64) -> u64 {
        let p = self.words_per_packet as u64;
        let t = self.period();
        match self.placement {
            GapPlacement::Burst => (i / p) * t + i % p,
            GapPlacement::Spread => ((i + 1) * t).div_ceil(p) - 1,
        }
    }

    /// Number of data words whose cycle offset is at most `m`.
    fn words_through(&self, m: u64) -> u64 {
        let p = self.words_per_packet as u64;
        let t = self.period();
        match self.placement {
            GapPlacement::Burst => (m + 1) / t * p + ((m + 1) % t).min(p),
            GapPlacement::Spread => ((m as u128 + 1) * p as u128 / t as u128) as u64,
        }
    }

    /// Start time of cycle `c`, rounded up to whole nanoseconds.
    fn cycle_ns_ceil(&self, c: u64) -> u64 {
        let num = c as u128 * self.word_bits as u128 * 1_000_000_000;
        num.div_ceil(self.rate_bps as u128) as u64
    }

    /// First cycle starting at or after `t_ns`.
    fn cycle_at_or_after(&self, t_ns: u64) -> u64 {
        let num = t_ns as u128 * self.rate_bps as u128;
        num.div_ceil(self.word_bits as u128 * 1_000_000_000) as u64
    }

    /// Cycles completed by a credit time strictly before `t_ns`.
    fn cycles_before(&self, t_ns: u64) -> u64 {
        if t_ns == 0 {
            return 0;
        }
        let num = (t_ns - 1) as u128 * self.rate_bps as u128;
        (num / (self.word_bits as u128 * 1_000_000_000)) as u64
    }
}

/// One frame's passage over a [`VirtualLink`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Transfer {
    model: LinkModel,
    base: u64,
    first: u64,
    words: u64,
    /// Start of the first data word's cycle.
    pub start_ns: u64,
    /// Completion of the last data word.
    pub end_ns: u64,
}

impl Transfer {
    pub fn bytes(&self) -> u64 {
        self.words * self.model.word_bytes()
    }

    fn word_done_ns(&self, i: u64) -> u64 {
        self.model
            .cycle_ns_ceil(self.base + self.model.position(i) + 1)
    }

    /// Splits the transfer at multiples of `grid_ns`. Each piece carries
    /// the bytes whose words complete inside one grid cell, stamped with the
    /// completion time of its last word.
    pub fn pieces(&self, grid_ns: u64) -> Vec<Arrival> {
        let m = &self.model;
        let last = self.first + self.words - 1;
        let mut out = Vec::new();
        let mut done = self.first;
        let mut cell = self.word_done_ns(self.first) / grid_ns;
        while done <= last {
            let boundary = (cell + 1) * grid_ns;
            let cycles = m.cycles_before(boundary);
            let through = if cycles > self.base {
                m.words_through(cycles - self.base - 1).min(last + 1)
            } else {
                0
            };
            if through > done {
                out.push(Arrival {
                    time_ns: self.word_done_ns(through - 1),
                    bytes: (through - done) * m.word_bytes(),
                });
                done = through;
            }
            cell += 1;
        }
        out
    }
}

/// Lossless, order-preserving serial link in virtual time.
#[derive(Debug, Clone)]
pub struct VirtualLink {
    model: LinkModel,
    base: u64,
    next_index: u64,
    busy_until_ns: u64,
    end_cycle: u64,
    bytes_carried: u64,
}

impl VirtualLink {
    pub fn new(model: LinkModel) -> Self {
        Self {
            model,
            base: 0,
            next_index: 0,
            busy_until_ns: 0,
            end_cycle: 0,
            bytes_carried: 0,
        }
    }

    pub fn model(&self) -> &LinkModel {
        &self.model
    }

    /// End of the last scheduled transfer.
    pub fn busy_until_ns(&self) -> u64 {
        self.busy_until_ns
    }

    pub fn bytes_carried(&self) -> u64 {
        self.bytes_carried
    }

    /// Schedules `bytes` (a multiple of the word size) ready at `ready_ns`.
    /// The gap pattern continues across back-to-back transfers and restarts
    /// after the link has idled past its next permitted data cycle.
    pub fn schedule(&mut self, ready_ns: u64, bytes: u64) -> Transfer {
        let m = self.model;
        debug_assert_eq!(bytes % m.word_bytes(), 0);
        let words = bytes / m.word_bytes();
        assert!(words > 0, "empty transfer");
        // Nanosecond rounding must not turn back-to-back into idle.
        let ready = if ready_ns <= self.busy_until_ns {
            self.end_cycle
        } else {
            m.cycle_at_or_after(ready_ns)
        };
        let next = self.base + m.position(self.next_index);
        if ready > next {
            self.base = ready;
            self.next_index = 0;
        }
        let t = Transfer {
            model: m,
            base: self.base,
            first: self.next_index,
            words,
            start_ns: m.cycle_ns_ceil(self.base + m.position(self.next_index)),
            end_ns: 0,
        };
        let t = Transfer {
            end_ns: t.word_done_ns(self.next_index + words - 1),
            ..t
        };
        self.end_cycle = self.base + m.position(self.next_index + words - 1) + 1;
        self.next_index += words;
        self.busy_until_ns = t.end_ns;
        self.bytes_carried += bytes;
        t
    }
}

/// Pushes a timed frame stream through a link; returns arrival times.
pub fn virtual_link_transfer(
    model: LinkModel,
    input: impl IntoIterator<Item = (u64, Frame)>,
) -> Vec<(u64, Frame)> {
    let mut link = VirtualLink::new(model);
    input
        .into_iter()
        .map(|(ready, f)| {
            let at = ready.max(link.busy_until_ns());
            let t = link.schedule(at, f.serialized_len() as u64);
            (t.end_ns, f)
        })
        .collect()
}

/// Traffic generator parameters: `clock_hz` cycles of `word_bits` with a
/// fraction `duty` carrying valid data.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub clock_hz: f64,
    #[serde(default = "sixty_four")]
    pub word_bits: u32,
    #[serde(default = "full_duty")]
    pub duty: f64,
}

fn full_duty() -> f64 {
    1.0
}

impl GeneratorSpec {
    pub const CLOCK_125MHZ: f64 = 125e6;
    pub const CLOCK_156_25MHZ: f64 = 156.25e6;

    pub fn new(clock_hz: f64, word_bits: u32, duty: f64) -> Self {
        Self {
            clock_hz,
            word_bits,
            duty,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.clock_hz >= 0.0 && self.clock_hz.is_finite()) {
            return Err(format!("bad clock {}", self.clock_hz));
        }
        if !(0.0..=1.0).contains(&self.duty) {
            return Err(format!("duty {} outside [0, 1]", self.duty));
        }
        Ok(())
    }
}

pub fn offered_rate(spec: &GeneratorSpec) -> f64 {
    spec.clock_hz * spec.word_bits as f64 * spec.duty
}
