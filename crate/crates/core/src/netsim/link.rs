use std::fmt::Display;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::BandwidthTrace;
use crate::cost::LinkModel;
use crate::sched::Direction;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Transfer {
    pub start: f64,
    pub serialized: f64,
    pub delivered: f64,
}

/// Two FIFO half-links driven by one bandwidth trace. Serialization integrates
/// the trace from the moment a message reaches the head of its queue, so an
/// outage stalls it until bandwidth returns.
#[derive(Clone, Debug)]
pub struct SimLink {
    trace: BandwidthTrace,
    link: LinkModel,
    tails: [f64; 2],
    delivered: [f64; 2],
    jitter: f64,
    rng: ChaCha8Rng,
}

impl SimLink {
    pub fn new(trace: BandwidthTrace, link: LinkModel) -> Self {
        SimLink {
            trace,
            link,
            tails: [0.0; 2],
            delivered: [0.0; 2],
            jitter: 0.0,
            rng: ChaCha8Rng::seed_from_u64(0),
        }
    }

    /// Adds a uniform extra delay in `[0, max_extra)` seconds to every message.
    /// Deliveries on one direction still never overtake each other.
    pub fn with_jitter(mut self, max_extra: f64, seed: u64) -> Self {
        self.jitter = max_extra.max(0.0);
        self.rng = ChaCha8Rng::seed_from_u64(seed);
        self
    }

    pub fn trace(&self) -> &BandwidthTrace {
        &self.trace
    }

    pub fn link(&self) -> LinkModel {
        self.link
    }

    pub fn transfer(&mut self, dir: Direction, payload: u64, now: f64) -> Transfer {
        let d = dir as usize;
        let start = now.max(self.tails[d]);
        let bits = (payload + self.link.header_bytes) as f64 * 8.0;
        let serialized = self.trace.finish_time(start, bits);
        self.tails[d] = serialized;
        let extra = if self.jitter > 0.0 {
            self.rng.gen_range(0.0..self.jitter)
        } else {
            0.0
        };
        let delivered = (serialized + self.link.latency + extra).max(self.delivered[d]);
        self.delivered[d] = delivered;
        Transfer {
            start,
            serialized,
            delivered,
        }
    }

    pub fn reset(&mut self) {
        self.tails = [0.0; 2];
        self.delivered = [0.0; 2];
    }
}

/// Timestamped simulation events, one per line.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EventLog {
    lines: Vec<String>,
}

impl EventLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&mut self, t: f64, kind: &str, detail: impl Display) {
        self.lines.push(format!("{:.9} {} {}", t, kind, detail));
    }

    pub fn append(&mut self, other: EventLog) {
        self.lines.extend(other.lines);
    }

    pub fn lines(&self) -> &[String] {
        &self.lines
    }

    pub fn to_text(&self) -> String {
        let mut s = self.lines.join("\n");
        if !s.is_empty() {
            s.push('\n');
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_megabyte_at_80_mbps() {
        let t = BandwidthTrace::constant(80e6, 10.0).unwrap();
        let mut l = SimLink::new(
            t,
            LinkModel {
                latency: 0.0,
                header_bytes: 0,
            },
        );
        let x = l.transfer(Direction::ToServer, 1_000_000, 0.0);
        assert!((x.delivered - 0.1).abs() < 1e-12);
    }

    #[test]
    fn fifo_and_independent_directions() {
        let t = BandwidthTrace::constant(8e6, 10.0).unwrap();
        let mut l = SimLink::new(
            t,
            LinkModel {
                latency: 0.01,
                header_bytes: 0,
            },
        );
        let a = l.transfer(Direction::ToServer, 1_000_000, 0.0);
        let b = l.transfer(Direction::ToServer, 1_000_000, 0.5);
        let c = l.transfer(Direction::ToRobot, 1_000_000, 0.5);
        assert!((a.delivered - 1.01).abs() < 1e-12);
        assert!((b.start - 1.0).abs() < 1e-12 && (b.delivered - 2.01).abs() < 1e-12);
        assert!((c.delivered - 1.51).abs() < 1e-12);
    }

    #[test]
    fn outage_stalls_delivery() {
        let t = BandwidthTrace::new("o", vec![(0.0, 80e6), (0.05, 0.0), (0.45, 80e6)]).unwrap();
        let mut l = SimLink::new(t, LinkModel::ideal());
        let x = l.transfer(Direction::ToServer, 1_000_000, 0.0);
        assert!((x.delivered - 0.5).abs() < 1e-12);
    }

    #[test]
    fn jitter_keeps_order() {
        let t = BandwidthTrace::constant(1e9, 10.0).unwrap();
        let mut l = SimLink::new(t, LinkModel::default()).with_jitter(0.01, 5);
        let mut last = 0.0;
        for k in 0..50 {
            let x = l.transfer(Direction::ToRobot, 100, k as f64 * 1e-4);
            assert!(x.delivered >= last);
            last = x.delivered;
        }
    }

    #[test]
    fn event_log_format() {
        let mut log = EventLog::new();
        log.record(0.5, "send", "layer 3");
        assert_eq!(log.to_text(), "0.500000000 send layer 3\n");
    }
}
