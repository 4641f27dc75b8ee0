//! Bounded reordering of timestamped events.

use std::cmp::{Ordering, Reverse};
use std::collections::BinaryHeap;

use crate::model::Timestamp;

/// Default buffer capacity, in events.
pub const DEFAULT_REORDER_CAPACITY: usize = 65536;

struct Entry<T> {
    t: Timestamp,
    seq: u64,
    item: T,
}

impl<T> PartialEq for Entry<T> {
    fn eq(&self, other: &Self) -> bool {
        (self.t, self.seq) == (other.t, other.seq)
    }
}

impl<T> Eq for Entry<T> {}

impl<T> PartialOrd for Entry<T> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl<T> Ord for Entry<T> {
    fn cmp(&self, other: &Self) -> Ordering {
        (self.t, self.seq).cmp(&(other.t, other.seq))
    }
}

/// Min-heap keyed on (timestamp, arrival order).
///
/// Whenever more than `capacity` events are held, the earliest one is
/// released. An event older than the last released one can no longer be
/// put in place; it is released immediately and reported as an overflow.
/// With at most `capacity` positions of displacement the output is sorted
/// by timestamp, and events with equal timestamps keep their arrival order.
pub struct ReorderBuffer<T> {
    heap: BinaryHeap<Reverse<Entry<T>>>,
    capacity: usize,
    seq: u64,
    last_emitted: Option<Timestamp>,
    overflow: u64,
}

impl<T> ReorderBuffer<T> {
    pub fn new(capacity: usize) -> Self {
        ReorderBuffer {
            heap: BinaryHeap::new(),
            capacity,
            seq: 0,
            last_emitted: None,
            overflow: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.heap.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }

    /// Events released out of order so far.
    pub fn overflow_count(&self) -> u64 {
        self.overflow
    }

    /// Adds an event; `emit(t, item, overflowed)` receives released events.
    pub fn push(&mut self, t: Timestamp, item: T, mut emit: impl FnMut(Timestamp, T, bool)) {
        if self.last_emitted.is_some_and(|last| t < last) {
            self.overflow += 1;
            emit(t, item, true);
            return;
        }
        self.heap.push(Reverse(Entry { t, seq: self.seq, item }));
        self.seq += 1;
        if self.heap.len() > self.capacity {
            let Reverse(e) = self.heap.pop().expect("non-empty");
            self.last_emitted = Some(e.t);
            emit(e.t, e.item, false);
        }
    }

    /// Releases everything still buffered, in order.
    pub fn drain(&mut self, mut emit: impl FnMut(Timestamp, T, bool)) {
        while let Some(Reverse(e)) = self.heap.pop() {
            self.last_emitted = Some(e.t);
            emit(e.t, e.item, false);
        }
    }

    /// Drops everything still buffered, returning how many were dropped.
    pub fn discard(&mut self) -> usize {
        let n = self.heap.len();
        self.heap.clear();
        n
    }
}

/// Reorders a whole sequence. Returns the output and the overflow count.
pub fn reorder<T>(events: impl IntoIterator<Item = (Timestamp, T)>, capacity: usize) -> (Vec<(Timestamp, T)>, u64) {
    let mut buf = ReorderBuffer::new(capacity);
    let mut out = Vec::new();
    for (t, item) in events {
        buf.push(t, item, |t, item, _| out.push((t, item)));
    }
    buf.drain(|t, item, _| out.push((t, item)));
    (out, buf.overflow_count())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ts(v: &[(Timestamp, char)]) -> Vec<Timestamp> {
        v.iter().map(|e| e.0).collect()
    }

    #[test]
    fn small_displacement_is_sorted() {
        let (out, overflow) = reorder([(5, 'a'), (3, 'b'), (7, 'c')], 2);
        assert_eq!(ts(&out), [3, 5, 7]);
        assert_eq!(overflow, 0);
    }

    #[test]
    fn ties_keep_arrival_order() {
        let (out, _) = reorder([(2, 'a'), (1, 'x'), (2, 'b'), (2, 'c')], 8);
        assert_eq!(out.iter().map(|e| e.1).collect::<String>(), "xabc");
    }

    #[test]
    fn overflow_is_flagged_and_passed_through() {
        let (out, overflow) = reorder([(10, 'a'), (11, 'b'), (12, 'c'), (1, 'd')], 1);
        assert_eq!(ts(&out), [10, 11, 1, 12]);
        assert_eq!(overflow, 1);
    }

    #[test]
    fn zero_capacity_passes_through() {
        let (out, overflow) = reorder([(3, 'a'), (1, 'b')], 0);
        assert_eq!(ts(&out), [3, 1]);
        assert_eq!(overflow, 1);
    }
}
