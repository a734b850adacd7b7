//! Bounded frame FIFO standing in for the DDR3 data cache.
//!
//! Capacity is accounted in serialized bytes. A frame that does not fit is
//! dropped whole and counted; the producer is never blocked.

use std::collections::VecDeque;

use crate::framing::Frame;

/// 8 GiB.
pub const DEFAULT_CAPACITY: u64 = 8 << 30;

#[derive(Debug, Clone)]
pub struct BoundedFrameFifo {
    capacity: u64,
    occupancy: u64,
    queue: VecDeque<Frame>,
    overflow_count: u64,
    accepted: u64,
    popped: u64,
    high_water: u64,
}

impl Default for BoundedFrameFifo {
    fn default() -> Self {
        Self::new(DEFAULT_CAPACITY)
    }
}

impl BoundedFrameFifo {
    pub fn new(capacity_bytes: u64) -> Self {
        Self {
            capacity: capacity_bytes,
            occupancy: 0,
            queue: VecDeque::new(),
            overflow_count: 0,
            accepted: 0,
            popped: 0,
            high_water: 0,
        }
    }

    pub fn capacity(&self) -> u64 {
        self.capacity
    }

    pub fn occupancy(&self) -> u64 {
        self.occupancy
    }

    pub fn len(&self) -> usize {
        self.queue.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queue.is_empty()
    }

    pub fn overflow_count(&self) -> u64 {
        self.overflow_count
    }

    pub fn accepted(&self) -> u64 {
        self.accepted
    }

    pub fn popped(&self) -> u64 {
        self.popped
    }

    /// Highest occupancy seen, in bytes.
    pub fn high_water(&self) -> u64 {
        self.high_water
    }

    pub fn fits(&self, serialized_len: usize) -> bool {
        self.occupancy + serialized_len as u64 <= self.capacity
    }

    pub fn push(&mut self, frame: Frame) -> bool {
        let size = frame.serialized_len();
        if !self.fits(size) {
            self.overflow_count += 1;
            return false;
        }
        self.occupancy += size as u64;
        self.high_water = self.high_water.max(self.occupancy);
        self.accepted += 1;
        self.queue.push_back(frame);
        true
    }

    pub fn pop(&mut self) -> Option<Frame> {
        let f = self.queue.pop_front()?;
        self.occupancy -= f.serialized_len() as u64;
        self.popped += 1;
        Some(f)
    }

    pub fn front(&self) -> Option<&Frame> {
        self.queue.front()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn frame(id: u32, payload: usize) -> Frame {
        Frame::new(1, id, id, vec![id as u8; payload]).unwrap()
    }

    #[test]
    fn push_accounts_serialized_size() {
        let mut q = BoundedFrameFifo::default();
        assert_eq!(q.capacity(), 8 * 1024 * 1024 * 1024);
        assert!(q.push(frame(0, 1024)));
        assert_eq!(q.occupancy(), 1056);
    }

    #[test]
    fn full_fifo_drops_whole_frame() {
        let mut q = BoundedFrameFifo::new(1056 * 2);
        assert!(q.push(frame(0, 1024)));
        assert!(q.push(frame(1, 1024)));
        assert!(!q.push(frame(2, 1024)));
        assert_eq!(q.overflow_count(), 1);
        assert_eq!(q.occupancy(), 2112);
        // a smaller frame that fits is still accepted later
        q.pop();
        assert!(q.push(frame(3, 8)));
    }

    #[test]
    fn fifo_order_and_empty_pop() {
        let mut q = BoundedFrameFifo::new(1 << 20);
        assert!(q.pop().is_none());
        q.push(frame(1, 8));
        q.push(frame(2, 8));
        assert_eq!(q.pop().unwrap().frame_id(), 1);
        assert_eq!(q.pop().unwrap().frame_id(), 2);
        assert!(q.pop().is_none());
        assert_eq!(q.occupancy(), 0);
    }

    #[test]
    fn zero_drain_burst_retained_iff_within_capacity() {
        // burst of B bytes into capacity C with no drain
        for (frames, cap_frames) in [(10usize, 10u64), (11, 10), (3, 10)] {
            let mut q = BoundedFrameFifo::new(cap_frames * 40);
            for i in 0..frames {
                q.push(frame(i as u32, 8));
            }
            let burst = frames as u64 * 40;
            assert_eq!(q.occupancy(), burst.min(cap_frames * 40));
            assert_eq!(q.overflow_count() == 0, burst <= q.capacity());
        }
    }

    #[test]
    fn matches_reference_queue_model() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let cap = 4096u64;
        let mut q = BoundedFrameFifo::new(cap);
        let mut model: VecDeque<(u32, u64)> = VecDeque::new();
        let mut drops = 0u64;
        for i in 0..10_000u32 {
            if rng.random_bool(0.55) {
                let payload = rng.random_range(1..=32) * 8;
                let size = payload as u64 + 32;
                let used: u64 = model.iter().map(|m| m.1).sum();
                let fits = used + size <= cap;
                assert_eq!(q.push(frame(i, payload)), fits);
                if fits {
                    model.push_back((i, size));
                } else {
                    drops += 1;
                }
            } else {
                assert_eq!(q.pop().map(|f| f.frame_id()), model.pop_front().map(|m| m.0));
            }
            assert_eq!(q.occupancy(), model.iter().map(|m| m.1).sum::<u64>());
            assert!(q.occupancy() <= cap);
            assert_eq!(q.accepted(), q.popped() + q.len() as u64);
        }
        assert_eq!(q.overflow_count(), drops);
    }
}
