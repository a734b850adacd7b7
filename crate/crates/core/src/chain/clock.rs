use std::cmp::Reverse;
use std::collections::BinaryHeap;

/// Discrete-event queue in integer nanoseconds. Events at equal times pop in
/// insertion order, which keeps runs reproducible.
#[derive(Debug)]
pub struct VirtualClock<E> {
    now: u64,
    seq: u64,
    heap: BinaryHeap<Reverse<(u64, u64, Slot<E>)>>,
}

/// Ordering wrapper that never compares the payload.
#[derive(Debug)]
struct Slot<E>(E);

impl<E> PartialEq for Slot<E> {
    fn eq(&self, _: &Self) -> bool {
        true
    }
}
impl<E> Eq for Slot<E> {}
impl<E> PartialOrd for Slot<E> {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl<E> Ord for Slot<E> {
    fn cmp(&self, _: &Self) -> std::cmp::Ordering {
        std::cmp::Ordering::Equal
    }
}

impl<E> Default for VirtualClock<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E> VirtualClock<E> {
    pub fn new() -> Self {
        Self {
            now: 0,
            seq: 0,
            heap: BinaryHeap::new(),
        }
    }

    pub fn now(&self) -> u64 {
        self.now
    }

    pub fn pending(&self) -> usize {
        self.heap.len()
    }

    /// Times in the past are treated as now.
    pub fn schedule(&mut self, at_ns: u64, ev: E) {
        let at = at_ns.max(self.now);
        self.heap.push(Reverse((at, self.seq, Slot(ev))));
        self.seq += 1;
    }

    pub fn pop(&mut self) -> Option<(u64, E)> {
        let Reverse((t, _, Slot(ev))) = self.heap.pop()?;
        self.now = t;
        Some((t, ev))
    }
}
