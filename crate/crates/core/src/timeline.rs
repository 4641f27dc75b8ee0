//! Per-thread on-CPU/off-CPU activity.
//!
//! Off-CPU intervals come from pairing each `switch_out` with the next
//! `switch_in` of the same thread. On-CPU time is the complement of the
//! off-CPU intervals within the thread's lifetime, so the segments of a
//! thread always tile `[spawn_t, exit_t)` exactly.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{StackId, Tid, Timestamp};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ActivityState {
    #[serde(rename = "on")]
    OnCpu,
    #[serde(rename = "off")]
    OffCpu,
}

/// Half-open interval `[start, end)` of one activity state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActivitySegment {
    pub start: Timestamp,
    pub end: Timestamp,
    pub state: ActivityState,
    /// Blocking stack; present iff the segment is off-CPU.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sid: Option<StackId>,
    /// Closed by the end of the thread's lifetime rather than a switch-in.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub synthetic: bool,
}

impl ActivitySegment {
    pub fn duration(&self) -> u64 {
        self.end - self.start
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Lifetime {
    pub start: Timestamp,
    pub end: Timestamp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OffInterval {
    pub start: Timestamp,
    pub end: Timestamp,
    pub sid: StackId,
    pub synthetic: bool,
}

impl OffInterval {
    pub fn duration(&self) -> u64 {
        self.end - self.start
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SwitchEvent {
    Out { t: Timestamp, sid: StackId },
    In { t: Timestamp },
}

#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
pub enum TimelineError {
    #[error("thread {tid} switched out at {t} while already off-CPU since {pending_since}")]
    NestedSwitchOut {
        tid: Tid,
        t: Timestamp,
        pending_since: Timestamp,
    },
}

/// Result of feeding one switch event to a [`SwitchPairer`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PairStep {
    /// Nothing completed yet.
    Pending,
    /// An off-CPU interval completed.
    Closed(OffInterval),
    /// A switch-in with no pending switch-out; ignored.
    OrphanIn,
    /// A second switch-out before a switch-in. The first interval was closed
    /// at the second switch-out (lenient mode only).
    Nested(OffInterval),
}

/// Incremental switch pairing for one thread.
#[derive(Debug, Clone, Default)]
pub struct SwitchPairer {
    pending: Option<(Timestamp, StackId)>,
}

impl SwitchPairer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn is_off(&self) -> bool {
        self.pending.is_some()
    }

    /// Feeds one event. In strict mode a nested switch-out is an error and
    /// leaves the pairer unchanged.
    pub fn push(&mut self, tid: Tid, ev: SwitchEvent, strict: bool) -> Result<PairStep, TimelineError> {
        match ev {
            SwitchEvent::Out { t, sid } => match self.pending {
                None => {
                    self.pending = Some((t, sid));
                    Ok(PairStep::Pending)
                }
                Some((since, prev_sid)) => {
                    if strict {
                        return Err(TimelineError::NestedSwitchOut {
                            tid,
                            t,
                            pending_since: since,
                        });
                    }
                    self.pending = Some((t, sid));
                    Ok(PairStep::Nested(OffInterval {
                        start: since,
                        end: t,
                        sid: prev_sid,
                        synthetic: true,
                    }))
                }
            },
            SwitchEvent::In { t } => match self.pending.take() {
                None => Ok(PairStep::OrphanIn),
                Some((since, sid)) => Ok(PairStep::Closed(OffInterval {
                    start: since,
                    end: t,
                    sid,
                    synthetic: false,
                })),
            },
        }
    }

    /// Closes a pending switch-out at the end of the thread's lifetime.
    pub fn close(&mut self, exit_t: Timestamp) -> Option<OffInterval> {
        self.pending.take().map(|(since, sid)| OffInterval {
            start: since,
            end: exit_t.max(since),
            sid,
            synthetic: true,
        })
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PairOutcome {
    pub intervals: Vec<OffInterval>,
    pub orphan_switch_in: u64,
    pub nested_switch_out: u64,
}

/// Pairs a thread's switch events (sorted by t, within `lifetime`) into
/// off-CPU intervals.
pub fn pair_switches(
    tid: Tid,
    events: &[SwitchEvent],
    lifetime: Lifetime,
    strict: bool,
) -> Result<PairOutcome, TimelineError> {
    let mut pairer = SwitchPairer::new();
    let mut out = PairOutcome::default();
    for &ev in events {
        match pairer.push(tid, ev, strict)? {
            PairStep::Pending => {}
            PairStep::Closed(iv) => out.intervals.push(iv),
            PairStep::OrphanIn => out.orphan_switch_in += 1,
            PairStep::Nested(iv) => {
                out.nested_switch_out += 1;
                out.intervals.push(iv);
            }
        }
    }
    out.intervals.extend(pairer.close(lifetime.end));
    out.intervals.retain(|iv| iv.end > iv.start);
    Ok(out)
}

/// Incremental tiling of a lifetime into on/off segments.
///
/// Off intervals must arrive sorted, disjoint and inside the lifetime. On
/// segments are emitted lazily when the next off interval (or the end of
/// the lifetime) bounds them.
#[derive(Debug, Clone)]
pub struct SegmentBuilder {
    cursor: Timestamp,
}

impl SegmentBuilder {
    pub fn new(start: Timestamp) -> Self {
        SegmentBuilder { cursor: start }
    }

    pub fn push_off(&mut self, iv: &OffInterval, mut emit: impl FnMut(ActivitySegment)) {
        if iv.end <= iv.start {
            return;
        }
        if iv.start > self.cursor {
            emit(ActivitySegment {
                start: self.cursor,
                end: iv.start,
                state: ActivityState::OnCpu,
                sid: None,
                synthetic: false,
            });
        }
        emit(ActivitySegment {
            start: iv.start.max(self.cursor),
            end: iv.end,
            state: ActivityState::OffCpu,
            sid: Some(iv.sid),
            synthetic: iv.synthetic,
        });
        self.cursor = self.cursor.max(iv.end);
    }

    pub fn finish(self, end: Timestamp, mut emit: impl FnMut(ActivitySegment)) {
        if end > self.cursor {
            emit(ActivitySegment {
                start: self.cursor,
                end,
                state: ActivityState::OnCpu,
                sid: None,
                synthetic: false,
            });
        }
    }
}

/// Fills the complement of `off` within `lifetime` with on-CPU segments.
pub fn build_segments(off: &[OffInterval], lifetime: Lifetime) -> Vec<ActivitySegment> {
    let mut out = Vec::with_capacity(off.len() * 2 + 1);
    let mut builder = SegmentBuilder::new(lifetime.start);
    for iv in off {
        builder.push_off(iv, |s| out.push(s));
    }
    builder.finish(lifetime.end, |s| out.push(s));
    out
}

/// The persisted timeline of one thread.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ThreadTimeline {
    pub tid: Tid,
    pub spawn_t: Timestamp,
    pub exit_t: Timestamp,
    pub segments: Vec<ActivitySegment>,
}

impl ThreadTimeline {
    pub fn on_ns(&self) -> u64 {
        self.total(ActivityState::OnCpu)
    }

    pub fn off_ns(&self) -> u64 {
        self.total(ActivityState::OffCpu)
    }

    fn total(&self, state: ActivityState) -> u64 {
        self.segments
            .iter()
            .filter(|s| s.state == state)
            .map(ActivitySegment::duration)
            .sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Bucket {
    pub index: u64,
    pub dominant: ActivityState,
    pub on_ns: u64,
    pub off_ns: u64,
}

/// Buckets of `bucket_ns` nanoseconds aligned to t = 0. Only buckets that
/// overlap some segment are emitted. Ties go to off-CPU.
pub fn downsample(segments: &[ActivitySegment], bucket_ns: u64) -> Vec<Bucket> {
    assert!(bucket_ns > 0, "bucket_ns must be positive");
    let mut out: Vec<Bucket> = Vec::new();
    for seg in segments {
        let mut t = seg.start;
        while t < seg.end {
            let index = t / bucket_ns;
            let bucket_end = (index + 1).saturating_mul(bucket_ns);
            let upto = seg.end.min(bucket_end);
            let len = upto - t;
            let bucket = match out.last_mut() {
                Some(b) if b.index == index => b,
                _ => {
                    out.push(Bucket {
                        index,
                        dominant: ActivityState::OffCpu,
                        on_ns: 0,
                        off_ns: 0,
                    });
                    out.last_mut().expect("just pushed")
                }
            };
            match seg.state {
                ActivityState::OnCpu => bucket.on_ns += len,
                ActivityState::OffCpu => bucket.off_ns += len,
            }
            t = upto;
        }
    }
    for b in &mut out {
        b.dominant = if b.on_ns > b.off_ns {
            ActivityState::OnCpu
        } else {
            ActivityState::OffCpu
        };
    }
    out
}

/// Number of buckets `downsample` would produce at most for a lifetime.
pub fn bucket_count(lifetime: Lifetime, bucket_ns: u64) -> u64 {
    if lifetime.end <= lifetime.start {
        return 0;
    }
    (lifetime.end - 1) / bucket_ns - lifetime.start / bucket_ns + 1
}

#[cfg(test)]
mod tests {
    use super::*;
    use ActivityState::*;

    const LIFE: Lifetime = Lifetime { start: 0, end: 100 };

    fn seg(start: u64, end: u64, state: ActivityState) -> ActivitySegment {
        ActivitySegment {
            start,
            end,
            state,
            sid: (state == OffCpu).then_some(1),
            synthetic: false,
        }
    }

    #[test]
    fn pairs_out_with_next_in() {
        let out = pair_switches(
            1,
            &[SwitchEvent::Out { t: 40, sid: 7 }, SwitchEvent::In { t: 60 }],
            LIFE,
            true,
        )
        .unwrap();
        assert_eq!(
            out.intervals,
            vec![OffInterval { start: 40, end: 60, sid: 7, synthetic: false }]
        );
    }

    #[test]
    fn unmatched_out_closes_at_exit() {
        let out = pair_switches(1, &[SwitchEvent::Out { t: 40, sid: 7 }], LIFE, true).unwrap();
        assert_eq!(
            out.intervals,
            vec![OffInterval { start: 40, end: 100, sid: 7, synthetic: true }]
        );
    }

    #[test]
    fn orphan_in_is_counted() {
        let out = pair_switches(1, &[SwitchEvent::In { t: 10 }], LIFE, true).unwrap();
        assert!(out.intervals.is_empty());
        assert_eq!(out.orphan_switch_in, 1);
    }

    #[test]
    fn nested_out_strict_and_lenient() {
        let evs = [
            SwitchEvent::Out { t: 10, sid: 1 },
            SwitchEvent::Out { t: 30, sid: 2 },
            SwitchEvent::In { t: 50 },
        ];
        assert!(matches!(
            pair_switches(1, &evs, LIFE, true),
            Err(TimelineError::NestedSwitchOut { t: 30, pending_since: 10, .. })
        ));
        let out = pair_switches(1, &evs, LIFE, false).unwrap();
        assert_eq!(out.nested_switch_out, 1);
        assert_eq!(
            out.intervals,
            vec![
                OffInterval { start: 10, end: 30, sid: 1, synthetic: true },
                OffInterval { start: 30, end: 50, sid: 2, synthetic: false },
            ]
        );
    }

    #[test]
    fn segments_fill_complement() {
        let segs = build_segments(
            &[OffInterval { start: 40, end: 60, sid: 1, synthetic: false }],
            LIFE,
        );
        assert_eq!(segs, vec![seg(0, 40, OnCpu), seg(40, 60, OffCpu), seg(60, 100, OnCpu)]);
        assert_eq!(segs.iter().map(ActivitySegment::duration).sum::<u64>(), 100);
    }

    #[test]
    fn no_off_is_single_on_segment() {
        assert_eq!(build_segments(&[], LIFE), vec![seg(0, 100, OnCpu)]);
    }

    #[test]
    fn full_off_is_single_off_segment() {
        let segs = build_segments(
            &[OffInterval { start: 0, end: 100, sid: 1, synthetic: false }],
            LIFE,
        );
        assert_eq!(segs, vec![seg(0, 100, OffCpu)]);
    }

    #[test]
    fn downsample_mixed_bucket() {
        let b = downsample(&[seg(0, 9, OnCpu), seg(9, 10, OffCpu)], 10);
        assert_eq!(b, vec![Bucket { index: 0, dominant: OnCpu, on_ns: 9, off_ns: 1 }]);
    }

    #[test]
    fn downsample_tie_goes_off() {
        let b = downsample(&[seg(0, 5, OnCpu), seg(5, 10, OffCpu)], 10);
        assert_eq!(b, vec![Bucket { index: 0, dominant: OffCpu, on_ns: 5, off_ns: 5 }]);
    }

    #[test]
    fn downsample_empty() {
        assert!(downsample(&[], 10).is_empty());
    }

    #[test]
    fn downsample_spans_buckets() {
        let b = downsample(&[seg(5, 25, OnCpu)], 10);
        let cover: Vec<_> = b.iter().map(|b| (b.index, b.on_ns)).collect();
        assert_eq!(cover, [(0, 5), (1, 10), (2, 5)]);
        assert_eq!(bucket_count(Lifetime { start: 5, end: 25 }, 10), 3);
    }
}
