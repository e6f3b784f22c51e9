//! Shared-memory race detection at barrier-phase granularity.
//!
//! Two accesses to the same cell race when they happen in the same phase of
//! the same block, come from different threads, and at least one of them is
//! a write. Execution order inside a phase is irrelevant.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum RaceKind {
    WriteWrite,
    ReadWrite,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Race {
    pub block: usize,
    pub phase: usize,
    pub buffer: String,
    pub index: usize,
    /// Thread whose access exposed the race.
    pub thread: usize,
    pub other_thread: usize,
    pub kind: RaceKind,
}

impl fmt::Display for Race {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let kind = match self.kind {
            RaceKind::WriteWrite => "write/write",
            RaceKind::ReadWrite => "read/write",
        };
        write!(
            f,
            "block {} phase {}: {} on {}[{}] between threads {} and {}",
            self.block, self.phase, kind, self.buffer, self.index, self.other_thread, self.thread
        )
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct RaceReport {
    /// First `cap` races in detection order.
    pub races: Vec<Race>,
    /// Number of racy (block, phase, cell) triples.
    pub total: usize,
}

impl RaceReport {
    pub fn is_empty(&self) -> bool {
        self.total == 0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AccessRecord {
    pub phase: usize,
    pub block: usize,
    pub thread: usize,
    pub write: bool,
    /// Shared storage region (alias group).
    pub region: usize,
    pub index: usize,
}

impl AccessRecord {
    /// `phase block thread op region index`
    pub fn to_line(&self, region_names: &[String]) -> String {
        format!(
            "{} {} {} {} {} {}",
            self.phase,
            self.block,
            self.thread,
            if self.write { "W" } else { "R" },
            region_names.get(self.region).map_or("?", |s| s.as_str()),
            self.index
        )
    }
}

#[derive(Clone, Copy, Debug)]
struct Cell {
    stamp: u64,
    w: [i32; 2],
    r: [i32; 2],
    reported: bool,
}

const EMPTY: Cell = Cell { stamp: 0, w: [-1, -1], r: [-1, -1], reported: false };

fn other(ids: &[i32; 2], t: i32) -> Option<usize> {
    ids.iter().find(|&&x| x >= 0 && x != t).map(|&x| x as usize)
}

fn note(ids: &mut [i32; 2], t: i32) {
    if ids[0] < 0 {
        ids[0] = t;
    } else if ids[0] != t && ids[1] < 0 {
        ids[1] = t;
    }
}

/// Online detector over dense per-region cell state.
#[derive(Clone, Debug)]
pub struct RaceDetector {
    cells: Vec<Vec<Cell>>,
    names: Vec<String>,
    cap: usize,
    report: RaceReport,
    block: usize,
    phase: usize,
    epoch: u64,
}

impl RaceDetector {
    pub fn new(region_sizes: &[usize], names: Vec<String>, cap: usize) -> RaceDetector {
        RaceDetector {
            cells: region_sizes.iter().map(|&n| vec![EMPTY; n]).collect(),
            names,
            cap,
            report: RaceReport::default(),
            block: 0,
            phase: 0,
            epoch: 1,
        }
    }

    pub fn set_position(&mut self, block: usize, phase: usize) {
        if (block, phase) != (self.block, self.phase) {
            self.block = block;
            self.phase = phase;
            self.epoch += 1;
        }
    }

    pub fn access(&mut self, region: usize, index: usize, thread: usize, write: bool) {
        let Some(cell) = self.cells.get_mut(region).and_then(|c| c.get_mut(index)) else {
            return;
        };
        if cell.stamp != self.epoch {
            *cell = Cell { stamp: self.epoch, ..EMPTY };
        }
        let t = thread as i32;
        let hit = if write {
            other(&cell.w, t)
                .map(|o| (o, RaceKind::WriteWrite))
                .or_else(|| other(&cell.r, t).map(|o| (o, RaceKind::ReadWrite)))
        } else {
            other(&cell.w, t).map(|o| (o, RaceKind::ReadWrite))
        };
        if write {
            note(&mut cell.w, t);
        } else {
            note(&mut cell.r, t);
        }
        if let Some((o, kind)) = hit {
            if !cell.reported {
                cell.reported = true;
                self.report.total += 1;
                if self.report.races.len() < self.cap {
                    self.report.races.push(Race {
                        block: self.block,
                        phase: self.phase,
                        buffer: self.names.get(region).cloned().unwrap_or_default(),
                        index,
                        thread,
                        other_thread: o,
                        kind,
                    });
                }
            }
        }
    }

    pub fn finish(self) -> RaceReport {
        self.report
    }
}

/// Replays a recorded access log through the same detector.
pub fn detect_races(log: &[AccessRecord], region_sizes: &[usize], names: Vec<String>, cap: usize) -> RaceReport {
    let mut d = RaceDetector::new(region_sizes, names, cap);
    for r in log {
        d.set_position(r.block, r.phase);
        d.access(r.region, r.index, r.thread, r.write);
    }
    d.finish()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(phase: usize, thread: usize, write: bool, index: usize) -> AccessRecord {
        AccessRecord { phase, block: 0, thread, write, region: 0, index }
    }

    fn run(log: &[AccessRecord]) -> RaceReport {
        detect_races(log, &[8], vec!["s".into()], 8)
    }

    #[test]
    fn same_phase_write_read() {
        assert_eq!(run(&[rec(0, 0, true, 3), rec(0, 1, false, 3)]).total, 1);
        assert_eq!(run(&[rec(0, 1, false, 3), rec(0, 0, true, 3)]).total, 1);
    }

    #[test]
    fn barrier_separates() {
        assert!(run(&[rec(0, 0, true, 3), rec(1, 1, false, 3)]).is_empty());
    }

    #[test]
    fn same_thread_is_fine() {
        assert!(run(&[rec(0, 2, true, 3), rec(0, 2, false, 3), rec(0, 2, true, 3)]).is_empty());
    }

    #[test]
    fn readers_only() {
        assert!(run(&[rec(0, 0, false, 1), rec(0, 1, false, 1)]).is_empty());
    }

    #[test]
    fn write_after_two_readers() {
        let r = run(&[rec(0, 0, false, 1), rec(0, 1, false, 1), rec(0, 0, true, 1)]);
        assert_eq!(r.total, 1);
        assert_eq!(r.races[0].other_thread, 1);
        assert_eq!(r.races[0].kind, RaceKind::ReadWrite);
    }
}
