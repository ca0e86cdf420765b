//! Deterministic discrete-event message scheduler.
//!
//! Virtual time is in microseconds. Each sender serialises its outgoing
//! messages on a virtual link: a message becomes ready when the sender's link
//! is free and is delivered one latency later. Latency is a fixed
//! per-message cost plus a per-kilobyte cost over the encoded frame size, so
//! identical seeds, configs and inputs give bit-identical event traces.

use std::cmp::Reverse;
use std::collections::{BinaryHeap, HashMap};

use thiserror::Error;

use crate::network::message::Envelope;
use crate::overlay::PeerId;

/// Default calibration: one 1 KB message costs 1147 us of virtual time, so
/// one thousand of them serialise to about 1147 ms.
pub const DEFAULT_PER_MESSAGE_US: u64 = 574;
pub const DEFAULT_PER_KB_US: u64 = 573;

#[derive(Clone, Copy, Debug)]
pub struct SimConfig {
    pub seed: u64,
    pub per_message_us: u64,
    pub per_kb_us: u64,
    /// Livelock guard: processing more events than this aborts the run.
    pub max_events: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            seed: 0,
            per_message_us: DEFAULT_PER_MESSAGE_US,
            per_kb_us: DEFAULT_PER_KB_US,
            max_events: 100_000_000,
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SimError {
    #[error("livelock guard tripped after {0} events")]
    LivelockGuard(u64),
    #[error("destination {0} not registered")]
    Unreachable(PeerId),
}

/// One delivery in the global trace.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TraceEvent {
    pub time_us: u64,
    pub from: PeerId,
    pub to: PeerId,
    pub tag: u8,
    pub bytes: usize,
}

struct Pending {
    deliver_at: u64,
    seq: u64,
    env: Envelope,
}

impl PartialEq for Pending {
    fn eq(&self, other: &Self) -> bool {
        (self.deliver_at, self.seq) == (other.deliver_at, other.seq)
    }
}
impl Eq for Pending {}
impl PartialOrd for Pending {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Pending {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        (self.deliver_at, self.seq).cmp(&(other.deliver_at, other.seq))
    }
}

/// The event queue plus clock, counters and optional delivery trace.
pub struct Simulator {
    cfg: SimConfig,
    clock_us: u64,
    seq: u64,
    events_processed: u64,
    queue: BinaryHeap<Reverse<Pending>>,
    sender_ready: HashMap<PeerId, u64>,
    pub messages_sent: u64,
    pub bytes_sent: u64,
    pub trace_enabled: bool,
    pub trace: Vec<TraceEvent>,
}

impl Simulator {
    pub fn new(cfg: SimConfig) -> Self {
        Simulator {
            cfg,
            clock_us: 0,
            seq: 0,
            events_processed: 0,
            queue: BinaryHeap::new(),
            sender_ready: HashMap::new(),
            messages_sent: 0,
            bytes_sent: 0,
            trace_enabled: false,
            trace: Vec::new(),
        }
    }

    pub fn config(&self) -> &SimConfig {
        &self.cfg
    }

    pub fn now_us(&self) -> u64 {
        self.clock_us
    }

    pub fn message_cost_us(&self, frame_bytes: usize) -> u64 {
        self.cfg.per_message_us + (frame_bytes as u64 * self.cfg.per_kb_us) / 1024
    }

    /// Queue a message for delivery. FIFO per sender; the sender's link
    /// serialises transmissions.
    pub fn send(&mut self, env: Envelope) {
        let bytes = env.encoded_len();
        let ready = self
            .sender_ready
            .get(&env.from)
            .copied()
            .unwrap_or(0)
            .max(self.clock_us);
        let deliver_at = ready + self.message_cost_us(bytes);
        self.sender_ready.insert(env.from, deliver_at);
        self.messages_sent += 1;
        self.bytes_sent += bytes as u64;
        self.seq += 1;
        self.queue.push(Reverse(Pending {
            deliver_at,
            seq: self.seq,
            env,
        }));
    }

    pub fn in_flight(&self) -> usize {
        self.queue.len()
    }

    /// Pop the next delivery, advancing the clock.
    pub fn next_delivery(&mut self) -> Result<Option<Envelope>, SimError> {
        let Some(Reverse(p)) = self.queue.pop() else {
            return Ok(None);
        };
        self.events_processed += 1;
        if self.events_processed > self.cfg.max_events {
            return Err(SimError::LivelockGuard(self.events_processed));
        }
        self.clock_us = self.clock_us.max(p.deliver_at);
        if self.trace_enabled {
            self.trace.push(TraceEvent {
                time_us: p.deliver_at,
                from: p.env.from,
                to: p.env.to,
                tag: p.env.msg.tag(),
                bytes: p.env.encoded_len(),
            });
        }
        Ok(Some(p.env))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::message::Message;

    fn env(from: u64, to: u64, rid: u64) -> Envelope {
        Envelope {
            from: PeerId(from),
            from_addr: String::new(),
            to: PeerId(to),
            request_id: rid,
            msg: Message::StatusRequest,
        }
    }

    #[test]
    fn per_pair_fifo_order() {
        let mut sim = Simulator::new(SimConfig::default());
        sim.send(env(0, 1, 1));
        sim.send(env(0, 1, 2));
        let a = sim.next_delivery().unwrap().unwrap();
        let b = sim.next_delivery().unwrap().unwrap();
        assert_eq!(a.request_id, 1);
        assert_eq!(b.request_id, 2);
    }

    #[test]
    fn identical_seed_identical_trace() {
        let run = || {
            let mut sim = Simulator::new(SimConfig::default());
            sim.trace_enabled = true;
            for i in 0..10 {
                sim.send(env(i % 3, (i + 1) % 3, i));
            }
            while sim.next_delivery().unwrap().is_some() {}
            sim.trace
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn thousand_1kb_messages_cost_1147ms() {
        let mut sim = Simulator::new(SimConfig::default());
        // pad the payload so the whole frame is exactly 1 KB
        let skeleton = Envelope {
            from: PeerId(0),
            from_addr: String::new(),
            to: PeerId(1),
            request_id: 0,
            msg: Message::Error {
                code: 0,
                detail: String::new(),
            },
        };
        let pad = 1024 - skeleton.encoded_len();
        for _ in 0..1000 {
            sim.send(Envelope {
                msg: Message::Error {
                    code: 0,
                    detail: "x".repeat(pad),
                },
                ..skeleton.clone()
            });
        }
        while sim.next_delivery().unwrap().is_some() {}
        let elapsed_ms = sim.now_us() as f64 / 1000.0;
        assert!(
            (elapsed_ms - 1147.0).abs() / 1147.0 < 0.01,
            "elapsed {elapsed_ms} ms"
        );
    }

    #[test]
    fn livelock_guard_trips() {
        let mut sim = Simulator::new(SimConfig {
            max_events: 3,
            ..SimConfig::default()
        });
        for i in 0..5 {
            sim.send(env(0, 1, i));
        }
        let mut last = Ok(None);
        for _ in 0..5 {
            last = sim.next_delivery();
            if last.is_err() {
                break;
            }
        }
        assert_eq!(last, Err(SimError::LivelockGuard(4)));
    }
}
