use std::collections::BTreeMap;

use serde::Serialize;

use crate::framing::{Frame, FramingError, StreamDecoder};
use crate::measure::{Arrival, MeasureError, Sampler};
use crate::payload::{ContentClass, ContentVerifier};

/// Errors kept verbatim in the audit; the rest are only counted.
const KEPT_ERRORS: usize = 64;

/// Per-board receive record.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct BoardAudit {
    pub frames: u64,
    /// Serialized bytes.
    pub bytes: u64,
    /// Frame ids missing from the sequence, including trailing ones once the
    /// generated count is known.
    pub gaps: u64,
    /// Frames whose id did not advance the sequence.
    pub out_of_order: u64,
    pub board_content: u64,
    pub generator_content: u64,
    pub content_mismatches: u64,
    /// Received frame ids as inclusive runs.
    pub runs: Vec<(u32, u32)>,
    pub first_arrival_ns: u64,
    pub last_arrival_ns: u64,
    pub generated: Option<u64>,
    #[serde(skip)]
    next: u64,
}

impl BoardAudit {
    fn record(&mut self, frame: &Frame, class: ContentClass, at_ns: u64) {
        let id = frame.frame_id();
        if self.frames == 0 {
            self.first_arrival_ns = at_ns;
        }
        self.frames += 1;
        self.bytes += frame.serialized_len() as u64;
        self.last_arrival_ns = at_ns;
        match class {
            ContentClass::Board => self.board_content += 1,
            ContentClass::Generator => self.generator_content += 1,
            ContentClass::Mismatch => self.content_mismatches += 1,
        }
        let id64 = id as u64;
        if id64 < self.next {
            self.out_of_order += 1;
            return;
        }
        self.gaps += id64 - self.next;
        match self.runs.last_mut() {
            Some(run) if id64 == self.next => run.1 = id,
            _ => self.runs.push((id, id)),
        }
        self.next = id64 + 1;
    }

    fn set_generated(&mut self, generated: u64) {
        self.generated = Some(generated);
        self.gaps += generated.saturating_sub(self.next);
        self.next = self.next.max(generated);
    }
}

/// Sink-side integrity record.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct Audit {
    pub boards: BTreeMap<u16, BoardAudit>,
    pub framing_errors: u64,
    pub framing_error_log: Vec<String>,
}

impl Audit {
    pub fn record(&mut self, frame: &Frame, class: ContentClass, at_ns: u64) {
        self.boards
            .entry(frame.board_id())
            .or_default()
            .record(frame, class, at_ns);
    }

    pub fn record_error(&mut self, e: &FramingError) {
        self.framing_errors += 1;
        if self.framing_error_log.len() < KEPT_ERRORS {
            self.framing_error_log.push(e.to_string());
        }
    }

    /// Counts ids never received at the end of a board's sequence.
    pub fn set_generated(&mut self, board_id: u16, generated: u64) {
        self.boards.entry(board_id).or_default().set_generated(generated);
    }

    pub fn frames(&self) -> u64 {
        self.boards.values().map(|b| b.frames).sum()
    }

    pub fn gaps(&self) -> u64 {
        self.boards.values().map(|b| b.gaps).sum()
    }

    pub fn content_mismatches(&self) -> u64 {
        self.boards.values().map(|b| b.content_mismatches).sum()
    }

    pub fn out_of_order(&self) -> u64 {
        self.boards.values().map(|b| b.out_of_order).sum()
    }

    /// No framing errors, reordering or corrupted payloads. Gaps are judged
    /// separately against the overflow counters.
    pub fn is_clean(&self) -> bool {
        self.framing_errors == 0 && self.content_mismatches() == 0 && self.out_of_order() == 0
    }
}

/// Decodes, verifies and times everything reaching the end of the chain.
#[derive(Debug)]
pub struct Sink {
    verifier: ContentVerifier,
    audit: Audit,
    sampler: Sampler,
    decoder: StreamDecoder,
    decoded: Vec<Result<Frame, FramingError>>,
    scratch: Vec<u8>,
}

impl Sink {
    pub fn new(seed: u64, window_us: u64) -> Result<Self, MeasureError> {
        Ok(Self {
            verifier: ContentVerifier::new(seed),
            audit: Audit::default(),
            sampler: Sampler::new(window_us)?,
            decoder: StreamDecoder::new(),
            decoded: Vec::new(),
            scratch: Vec::new(),
        })
    }

    pub fn audit(&self) -> &Audit {
        &self.audit
    }

    pub fn audit_mut(&mut self) -> &mut Audit {
        &mut self.audit
    }

    pub fn sampler(&self) -> &Sampler {
        &self.sampler
    }

    /// Accounts bytes at `time_ns` without decoding them. Earlier
    /// timestamps are clamped to the latest seen.
    pub fn record_arrival(&mut self, mut a: Arrival) -> Result<(), MeasureError> {
        if let Some(last) = self.sampler.last_time_ns() {
            a.time_ns = a.time_ns.max(last);
        }
        self.sampler.record(a)
    }

    /// One read from a byte stream, decoded with that stream's decoder.
    pub fn ingest(
        &mut self,
        decoder: &mut StreamDecoder,
        time_ns: u64,
        bytes: &[u8],
    ) -> Result<(), MeasureError> {
        self.record_arrival(Arrival {
            time_ns,
            bytes: bytes.len() as u64,
        })?;
        decoder.feed_into(bytes, &mut self.decoded);
        self.drain_decoded(time_ns);
        Ok(())
    }

    /// A frame delivered by a virtual link. It is serialized and decoded
    /// like wire bytes; `pieces` give its byte arrival times.
    pub fn ingest_frame(&mut self, frame: &Frame, pieces: &[Arrival]) -> Result<(), MeasureError> {
        for &p in pieces {
            self.sampler.record(p)?;
        }
        let at = pieces.last().map_or(0, |p| p.time_ns);
        self.scratch.clear();
        frame.write_to(&mut self.scratch);
        self.decoder.feed_into(&self.scratch, &mut self.decoded);
        self.drain_decoded(at);
        Ok(())
    }

    /// Reports an unterminated frame left in a stream decoder.
    pub fn close_stream(&mut self, decoder: StreamDecoder) {
        if let Some(e) = decoder.finish() {
            self.audit.record_error(&e);
        }
    }

    fn drain_decoded(&mut self, at_ns: u64) {
        for r in self.decoded.drain(..) {
            match r {
                Ok(f) => {
                    let class = self.verifier.classify(&f);
                    self.audit.record(&f, class, at_ns);
                }
                Err(e) => self.audit.record_error(&e),
            }
        }
    }

    pub fn finish(mut self) -> (Audit, Sampler) {
        let d = std::mem::take(&mut self.decoder);
        self.close_stream(d);
        (self.audit, self.sampler)
    }
}
