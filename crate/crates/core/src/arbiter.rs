//! Round-robin polling arbiter with whole-frame granularity.

use std::collections::VecDeque;

use crate::buffer::BoundedFrameFifo;
use crate::framing::Frame;

/// Something the arbiter can poll for a ready frame.
pub trait FrameSource {
    fn has_frame(&self) -> bool;
    fn peek(&self) -> Option<&Frame>;
    fn take(&mut self) -> Option<Frame>;
}

impl FrameSource for BoundedFrameFifo {
    fn has_frame(&self) -> bool {
        !self.is_empty()
    }

    fn peek(&self) -> Option<&Frame> {
        self.front()
    }

    fn take(&mut self) -> Option<Frame> {
        self.pop()
    }
}

impl FrameSource for VecDeque<Frame> {
    fn has_frame(&self) -> bool {
        !self.is_empty()
    }

    fn peek(&self) -> Option<&Frame> {
        self.front()
    }

    fn take(&mut self) -> Option<Frame> {
        self.pop_front()
    }
}

/// Polls N inputs in cyclic order starting at the cursor. The cursor moves
/// to the input after the one served; an idle poll leaves it in place.
#[derive(Debug, Clone)]
pub struct PollingArbiter {
    cursor: usize,
    grants: Vec<u64>,
}

impl PollingArbiter {
    pub fn new(inputs: usize) -> Self {
        assert!(inputs > 0, "arbiter needs at least one input");
        Self {
            cursor: 0,
            grants: vec![0; inputs],
        }
    }

    pub fn inputs(&self) -> usize {
        self.grants.len()
    }

    pub fn cursor(&self) -> usize {
        self.cursor
    }

    pub fn grants(&self) -> &[u64] {
        &self.grants
    }

    /// Grants one ready input, or `None` when nothing is ready.
    pub fn grant(&mut self, mut ready: impl FnMut(usize) -> bool) -> Option<usize> {
        let n = self.grants.len();
        let idx = (0..n)
            .map(|i| (self.cursor + i) % n)
            .find(|&idx| ready(idx))?;
        self.cursor = (idx + 1) % n;
        self.grants[idx] += 1;
        Some(idx)
    }

    /// Takes one whole frame from the first ready source in cyclic order.
    pub fn next_frame<S: FrameSource + ?Sized>(
        &mut self,
        sources: &mut [&mut S],
    ) -> Option<(usize, Frame)> {
        debug_assert_eq!(sources.len(), self.inputs());
        let idx = self.grant(|i| sources[i].has_frame())?;
        let frame = sources[idx].take().expect("ready source yields a frame");
        Some((idx, frame))
    }
}
