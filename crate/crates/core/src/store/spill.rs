//! Per-thread append-only buffers for timeline segments and chart spans.
//!
//! Segment and span counts grow with the event count, so once a thread's
//! in-memory buffer reaches its threshold the records are appended to a
//! file in the session's staging directory. Reading replays the file and
//! then the in-memory tail.

use std::fs::{File, OpenOptions};
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::PathBuf;

use crate::flame::{ChartSpan, Channel};
use crate::timeline::{ActivitySegment, ActivityState};

const RECORD_BYTES: usize = 26;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpillRecord {
    Segment(ActivitySegment),
    Span(ChartSpan),
}

impl SpillRecord {
    fn encode(&self) -> [u8; RECORD_BYTES] {
        let (tag, a, b, sid, flag) = match *self {
            SpillRecord::Segment(s) => (
                match s.state {
                    ActivityState::OnCpu => 0u8,
                    ActivityState::OffCpu => 1,
                },
                s.start,
                s.end,
                s.sid.unwrap_or(0),
                s.synthetic as u8,
            ),
            SpillRecord::Span(s) => (
                match s.channel {
                    Channel::Hot => 2u8,
                    Channel::Cold => 3,
                },
                s.t_start,
                s.duration_ns,
                s.sid,
                0,
            ),
        };
        let mut out = [0u8; RECORD_BYTES];
        out[0] = tag;
        out[1..9].copy_from_slice(&a.to_le_bytes());
        out[9..17].copy_from_slice(&b.to_le_bytes());
        out[17..25].copy_from_slice(&sid.to_le_bytes());
        out[25] = flag;
        out
    }

    fn decode(buf: &[u8; RECORD_BYTES]) -> io::Result<Self> {
        let word = |r: std::ops::Range<usize>| u64::from_le_bytes(buf[r].try_into().expect("8 bytes"));
        let (a, b, sid) = (word(1..9), word(9..17), word(17..25));
        Ok(match buf[0] {
            tag @ (0 | 1) => SpillRecord::Segment(ActivitySegment {
                start: a,
                end: b,
                state: if tag == 0 { ActivityState::OnCpu } else { ActivityState::OffCpu },
                sid: (sid != 0).then_some(sid),
                synthetic: buf[25] != 0,
            }),
            tag @ (2 | 3) => SpillRecord::Span(ChartSpan {
                t_start: a,
                duration_ns: b,
                sid,
                channel: if tag == 2 { Channel::Hot } else { Channel::Cold },
            }),
            _ => return Err(io::Error::new(io::ErrorKind::InvalidData, "corrupt spill record")),
        })
    }
}

#[derive(Debug)]
pub struct SpillBuffer {
    path: Option<PathBuf>,
    threshold: usize,
    mem: Vec<SpillRecord>,
    on_disk: bool,
}

impl SpillBuffer {
    /// Buffer that never leaves memory.
    pub fn in_memory() -> Self {
        SpillBuffer {
            path: None,
            threshold: usize::MAX,
            mem: Vec::new(),
            on_disk: false,
        }
    }

    /// Buffer that moves to `path` whenever `threshold` records accumulate.
    pub fn on_disk(path: PathBuf, threshold: usize) -> Self {
        SpillBuffer {
            path: Some(path),
            threshold: threshold.max(1),
            mem: Vec::new(),
            on_disk: false,
        }
    }

    pub fn push(&mut self, rec: SpillRecord) -> io::Result<()> {
        self.mem.push(rec);
        if self.mem.len() >= self.threshold {
            self.flush()?;
        }
        Ok(())
    }

    fn flush(&mut self) -> io::Result<()> {
        let Some(path) = &self.path else {
            return Ok(());
        };
        if self.mem.is_empty() {
            return Ok(());
        }
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        let mut w = BufWriter::new(file);
        for rec in self.mem.drain(..) {
            w.write_all(&rec.encode())?;
        }
        w.flush()?;
        self.on_disk = true;
        Ok(())
    }

    /// All records in push order.
    pub fn records(&self) -> io::Result<SpillIter<'_>> {
        let file = match (&self.path, self.on_disk) {
            (Some(p), true) => Some(BufReader::new(File::open(p)?)),
            _ => None,
        };
        Ok(SpillIter {
            file,
            mem: self.mem.iter(),
        })
    }

    pub fn segments(&self) -> io::Result<impl Iterator<Item = io::Result<ActivitySegment>> + '_> {
        Ok(self.records()?.filter_map(|r| match r {
            Ok(SpillRecord::Segment(s)) => Some(Ok(s)),
            Ok(SpillRecord::Span(_)) => None,
            Err(e) => Some(Err(e)),
        }))
    }

    pub fn spans(&self, channel: Channel) -> io::Result<impl Iterator<Item = io::Result<ChartSpan>> + '_> {
        Ok(self.records()?.filter_map(move |r| match r {
            Ok(SpillRecord::Span(s)) if s.channel == channel => Some(Ok(s)),
            Ok(_) => None,
            Err(e) => Some(Err(e)),
        }))
    }
}

pub struct SpillIter<'a> {
    file: Option<BufReader<File>>,
    mem: std::slice::Iter<'a, SpillRecord>,
}

impl Iterator for SpillIter<'_> {
    type Item = io::Result<SpillRecord>;

    fn next(&mut self) -> Option<Self::Item> {
        if let Some(file) = &mut self.file {
            let mut buf = [0u8; RECORD_BYTES];
            match file.read_exact(&mut buf) {
                Ok(()) => return Some(SpillRecord::decode(&buf)),
                Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => self.file = None,
                Err(e) => {
                    self.file = None;
                    return Some(Err(e));
                }
            }
        }
        self.mem.next().map(|r| Ok(*r))
    }
}
