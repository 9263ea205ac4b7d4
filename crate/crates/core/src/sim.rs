//! Deterministic discrete-event substrate.
//!
//! A single global queue ordered by `(fire_time, insertion sequence)`. Time is
//! integer microseconds and only moves forward, to the fire time of the event
//! being dequeued (or to the horizon passed to [`EventQueue::run_until`]).

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::fmt::Write as _;

use thiserror::Error;

/// Simulated time in microseconds.
pub type Micros = u64;

pub const MICROS_PER_MS: Micros = 1_000;
pub const MICROS_PER_SEC: Micros = 1_000_000;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SimError {
    #[error("event at {at}us is in the past (now {now}us)")]
    PastEvent { at: Micros, now: Micros },
    #[error("horizon {t_end}us is before current time {now}us")]
    PastHorizon { t_end: Micros, now: Micros },
}

/// A dequeued event.
#[derive(Debug, Clone, PartialEq)]
pub struct Event<E> {
    pub fire_time: Micros,
    pub seq: u64,
    pub kind: E,
}

struct Entry<E> {
    fire_time: Micros,
    seq: u64,
    kind: E,
}

impl<E> PartialEq for Entry<E> {
    fn eq(&self, other: &Self) -> bool {
        self.fire_time == other.fire_time && self.seq == other.seq
    }
}

impl<E> Eq for Entry<E> {}

impl<E> PartialOrd for Entry<E> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl<E> Ord for Entry<E> {
    // BinaryHeap is a max-heap; invert so the earliest (time, seq) pops first.
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .fire_time
            .cmp(&self.fire_time)
            .then_with(|| other.seq.cmp(&self.seq))
    }
}

/// The simulation clock. Never decreases.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SimClock {
    now: Micros,
}

impl SimClock {
    pub fn now(&self) -> Micros {
        self.now
    }

    fn advance_to(&mut self, t: Micros) {
        debug_assert!(t >= self.now, "clock moved backwards");
        self.now = t;
    }
}

pub struct EventQueue<E> {
    heap: BinaryHeap<Entry<E>>,
    next_seq: u64,
    clock: SimClock,
}

impl<E> Default for EventQueue<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E> EventQueue<E> {
    pub fn new() -> Self {
        Self {
            heap: BinaryHeap::new(),
            next_seq: 0,
            clock: SimClock::default(),
        }
    }

    pub fn now(&self) -> Micros {
        self.clock.now()
    }

    pub fn clock(&self) -> SimClock {
        self.clock
    }

    pub fn len(&self) -> usize {
        self.heap.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }

    /// Enqueue `kind` to fire at `at`. Returns the insertion sequence number.
    pub fn schedule(&mut self, at: Micros, kind: E) -> Result<u64, SimError> {
        if at < self.clock.now() {
            return Err(SimError::PastEvent {
                at,
                now: self.clock.now(),
            });
        }
        let seq = self.next_seq;
        self.next_seq += 1;
        self.heap.push(Entry {
            fire_time: at,
            seq,
            kind,
        });
        Ok(seq)
    }

    /// Schedule relative to the current time. Cannot fail.
    pub fn schedule_in(&mut self, delay: Micros, kind: E) -> u64 {
        let at = self.clock.now() + delay;
        self.schedule(at, kind).expect("future event")
    }

    pub fn peek_time(&self) -> Option<Micros> {
        self.heap.peek().map(|e| e.fire_time)
    }

    /// Dequeue the next event if it fires at or before `t_end`, advancing the clock.
    pub fn pop_until(&mut self, t_end: Micros) -> Option<Event<E>> {
        if self.heap.peek()?.fire_time > t_end {
            return None;
        }
        let entry = self.heap.pop()?;
        self.clock.advance_to(entry.fire_time);
        Some(Event {
            fire_time: entry.fire_time,
            seq: entry.seq,
            kind: entry.kind,
        })
    }

    /// Move the clock forward without processing anything. Used once every
    /// event up to `t` has been handled.
    pub fn advance_to(&mut self, t: Micros) -> Result<(), SimError> {
        if t < self.clock.now() {
            return Err(SimError::PastHorizon {
                t_end: t,
                now: self.clock.now(),
            });
        }
        if let Some(next) = self.peek_time() {
            debug_assert!(next > t, "advancing past pending events");
        }
        self.clock.advance_to(t);
        Ok(())
    }

    /// Process every event with fire time `<= t_end` through `handler`, then
    /// set the clock to `t_end`. The handler may schedule further events.
    pub fn run_until<F>(&mut self, t_end: Micros, mut handler: F) -> Result<usize, SimError>
    where
        F: FnMut(&mut Self, Event<E>),
    {
        if t_end < self.clock.now() {
            return Err(SimError::PastHorizon {
                t_end,
                now: self.clock.now(),
            });
        }
        let mut processed = 0;
        while let Some(ev) = self.pop_until(t_end) {
            handler(self, ev);
            processed += 1;
        }
        self.clock.advance_to(t_end);
        Ok(processed)
    }
}

/// Verbosity of the event log.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Default)]
pub enum LogLevel {
    #[default]
    Info,
    Trace,
}

impl std::str::FromStr for LogLevel {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "info" => Ok(LogLevel::Info),
            "trace" => Ok(LogLevel::Trace),
            other => Err(format!("unknown log level {other:?} (expected trace|info)")),
        }
    }
}

/// Tab-separated event log: `time_us<TAB>kind<TAB>detail...`.
#[derive(Debug, Clone, Default)]
pub struct EventLog {
    level: LogLevel,
    lines: Vec<String>,
}

impl EventLog {
    pub fn new(level: LogLevel) -> Self {
        Self {
            level,
            lines: Vec::new(),
        }
    }

    pub fn level(&self) -> LogLevel {
        self.level
    }

    pub fn enabled(&self, level: LogLevel) -> bool {
        level <= self.level
    }

    pub fn record(&mut self, level: LogLevel, time: Micros, kind: &str, fields: &[&dyn std::fmt::Display]) {
        if !self.enabled(level) {
            return;
        }
        let mut line = format!("{time}\t{kind}");
        for f in fields {
            let _ = write!(line, "\t{f}");
        }
        self.lines.push(line);
    }

    pub fn lines(&self) -> &[String] {
        &self.lines
    }

    pub fn render(&self) -> String {
        let mut out = String::with_capacity(self.lines.iter().map(|l| l.len() + 1).sum());
        for l in &self.lines {
            out.push_str(l);
            out.push('\n');
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ties_dequeue_in_insertion_order() {
        let mut q = EventQueue::new();
        q.schedule(5, "e1").unwrap();
        q.schedule(5, "e2").unwrap();
        q.schedule(3, "e0").unwrap();
        let order: Vec<_> = std::iter::from_fn(|| q.pop_until(10).map(|e| e.kind)).collect();
        assert_eq!(order, vec!["e0", "e1", "e2"]);
    }

    #[test]
    fn schedule_at_now_goes_after_existing_same_time_events() {
        let mut q = EventQueue::new();
        q.schedule(0, 1).unwrap();
        q.schedule(0, 2).unwrap();
        let first = q.pop_until(0).unwrap();
        assert_eq!(first.kind, 1);
        q.schedule(q.now(), 3).unwrap();
        assert_eq!(q.pop_until(0).unwrap().kind, 2);
        assert_eq!(q.pop_until(0).unwrap().kind, 3);
    }

    #[test]
    fn past_event_rejected() {
        let mut q: EventQueue<()> = EventQueue::new();
        q.run_until(100, |_, _| {}).unwrap();
        assert_eq!(q.schedule(99, ()), Err(SimError::PastEvent { at: 99, now: 100 }));
    }

    #[test]
    fn empty_run_advances_clock() {
        let mut q: EventQueue<()> = EventQueue::new();
        let n = q.run_until(10 * MICROS_PER_MS, |_, _| {}).unwrap();
        assert_eq!(n, 0);
        assert_eq!(q.now(), 10_000);
    }

    #[test]
    fn run_until_stops_at_horizon() {
        let mut q = EventQueue::new();
        for ms in 1..=3 {
            q.schedule(ms * MICROS_PER_MS, ms).unwrap();
        }
        let n = q.run_until(2 * MICROS_PER_MS, |_, _| {}).unwrap();
        assert_eq!(n, 2);
        assert_eq!(q.now(), 2_000);
        assert_eq!(q.len(), 1);
    }

    #[test]
    fn handler_can_schedule_more_work() {
        let mut q = EventQueue::new();
        q.schedule(0, 0u32).unwrap();
        let mut seen = Vec::new();
        q.run_until(100, |q, ev| {
            seen.push((ev.fire_time, ev.kind));
            if ev.kind < 4 {
                q.schedule_in(10, ev.kind + 1);
            }
        })
        .unwrap();
        assert_eq!(seen, vec![(0, 0), (10, 1), (20, 2), (30, 3), (40, 4)]);
    }

    #[test]
    fn log_respects_level() {
        let mut log = EventLog::new(LogLevel::Info);
        log.record(LogLevel::Trace, 1, "ROUTE", &[&"a"]);
        log.record(LogLevel::Info, 2, "PHASE", &[&"boot"]);
        assert_eq!(log.render(), "2\tPHASE\tboot\n");
    }
}
