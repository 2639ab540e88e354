//! Slot-stepped finite-buffer queue with strict priority across QoS classes.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QosClass {
    /// 0 is the highest priority.
    pub id: u8,
    /// Loss bound `l_qs` as a fraction in (0, 1].
    pub max_loss: f64,
    /// Delay bound `τ_qs` in ms.
    pub max_delay_ms: f64,
    /// Packets of this class carry a deadline of `max_delay_ms` and are
    /// dropped once it passes.
    #[serde(default)]
    pub expires: bool,
}

impl QosClass {
    pub fn new(id: u8, max_loss: f64, max_delay_ms: f64) -> Self {
        Self {
            id,
            max_loss,
            max_delay_ms,
            expires: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.max_loss > 0.0 && self.max_loss <= 1.0) {
            return Err(Error::Config(format!("class {}: max_loss {} outside (0, 1]", self.id, self.max_loss)));
        }
        if !(self.max_delay_ms > 0.0) {
            return Err(Error::Config(format!("class {}: max_delay_ms must be > 0", self.id)));
        }
        Ok(())
    }
}

pub fn validate_classes(classes: &[QosClass]) -> Result<()> {
    for (i, c) in classes.iter().enumerate() {
        c.validate()?;
        if classes[..i].iter().any(|o| o.id == c.id) {
            return Err(Error::Config(format!("duplicate QoS class id {}", c.id)));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Packet {
    pub id: u64,
    pub flow: usize,
    /// Index into the node's class queues (0 = highest priority).
    pub class: usize,
    pub born_slot: u64,
    pub deadline_slot: Option<u64>,
}

#[derive(Debug, Clone, Copy)]
struct Queued {
    packet: Packet,
    enqueue_slot: u64,
    seq: u64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct ClassTally {
    pub arrived: u64,
    pub served: u64,
    /// Tail drops, expiries and resize evictions.
    pub dropped: u64,
    pub expired: u64,
    pub cumulative_delay_ms: f64,
}

impl ClassTally {
    pub fn loss_fraction(&self) -> f64 {
        if self.arrived == 0 {
            0.0
        } else {
            self.dropped as f64 / self.arrived as f64
        }
    }

    pub fn mean_delay_ms(&self) -> f64 {
        if self.served == 0 {
            0.0
        } else {
            self.cumulative_delay_ms / self.served as f64
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DropReason {
    TailDrop,
    Expired,
    Resize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Served {
    pub packet: Packet,
    pub delay_ms: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct StepOutcome {
    pub served: Vec<Served>,
    pub dropped: Vec<(Packet, DropReason)>,
}

/// Per-class view of one slot, used by the count-based [`NodeState::step`].
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ClassStep {
    pub served: u64,
    pub dropped: u64,
    pub delays_ms: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct NodeState {
    buffer_capacity: usize,
    service_rate: f64,
    carry: f64,
    queues: Vec<VecDeque<Queued>>,
    tallies: Vec<ClassTally>,
    now: u64,
    tick_ms: f64,
    next_seq: u64,
    next_anon_id: u64,
}

impl NodeState {
    pub fn new(classes: usize, buffer_capacity: usize, service_rate: f64, tick_ms: f64) -> Self {
        assert!(classes > 0, "a node needs at least one class");
        Self {
            buffer_capacity,
            service_rate: service_rate.max(0.0),
            carry: 0.0,
            queues: vec![VecDeque::new(); classes],
            tallies: vec![ClassTally::default(); classes],
            now: 0,
            tick_ms,
            next_seq: 0,
            next_anon_id: 0,
        }
    }

    pub fn buffer_capacity(&self) -> usize {
        self.buffer_capacity
    }

    pub fn service_rate(&self) -> f64 {
        self.service_rate
    }

    pub fn now(&self) -> u64 {
        self.now
    }

    pub fn occupancy(&self) -> usize {
        self.queues.iter().map(VecDeque::len).sum()
    }

    pub fn queued(&self, class: usize) -> usize {
        self.queues[class].len()
    }

    pub fn tallies(&self) -> &[ClassTally] {
        &self.tallies
    }

    pub fn class_count(&self) -> usize {
        self.queues.len()
    }

    /// Aggregate tally over classes.
    pub fn total_tally(&self) -> ClassTally {
        self.tallies.iter().fold(ClassTally::default(), |mut acc, t| {
            acc.arrived += t.arrived;
            acc.served += t.served;
            acc.dropped += t.dropped;
            acc.expired += t.expired;
            acc.cumulative_delay_ms += t.cumulative_delay_ms;
            acc
        })
    }

    /// Count-based step: `arrivals[c]` anonymous packets of class `c`.
    pub fn step(&mut self, arrivals: &[u64]) -> Vec<ClassStep> {
        let mut packets = Vec::new();
        for (class, &count) in arrivals.iter().enumerate() {
            for _ in 0..count {
                packets.push(Packet {
                    id: self.next_anon_id,
                    flow: 0,
                    class,
                    born_slot: self.now,
                    deadline_slot: None,
                });
                self.next_anon_id += 1;
            }
        }
        let outcome = self.step_packets(packets);
        let mut per_class = vec![ClassStep::default(); self.queues.len()];
        for s in &outcome.served {
            per_class[s.packet.class].served += 1;
            per_class[s.packet.class].delays_ms.push(s.delay_ms);
        }
        for (p, _) in &outcome.dropped {
            per_class[p.class].dropped += 1;
        }
        per_class
    }

    /// One slot: expire overdue packets, serve in strict priority, then
    /// enqueue arrivals in class order with tail drop.
    pub fn step_packets(&mut self, mut arrivals: Vec<Packet>) -> StepOutcome {
        let mut out = StepOutcome::default();
        let now = self.now;

        for (class, queue) in self.queues.iter_mut().enumerate() {
            if queue.iter().all(|q| q.packet.deadline_slot.is_none_or(|d| d >= now)) {
                continue;
            }
            let tally = &mut self.tallies[class];
            queue.retain(|q| {
                let keep = q.packet.deadline_slot.is_none_or(|d| d >= now);
                if !keep {
                    tally.dropped += 1;
                    tally.expired += 1;
                    out.dropped.push((q.packet, DropReason::Expired));
                }
                keep
            });
        }

        let available = self.carry + self.service_rate;
        let budget = available.floor();
        self.carry = available - budget;
        let mut budget = budget as u64;
        for (class, queue) in self.queues.iter_mut().enumerate() {
            while budget > 0 {
                let Some(q) = queue.pop_front() else { break };
                let delay_ms = (now - q.enqueue_slot) as f64 * self.tick_ms;
                let tally = &mut self.tallies[class];
                tally.served += 1;
                tally.cumulative_delay_ms += delay_ms;
                out.served.push(Served {
                    packet: q.packet,
                    delay_ms,
                });
                budget -= 1;
            }
        }

        arrivals.sort_by_key(|p| p.class);
        let mut occupancy = self.occupancy();
        for packet in arrivals {
            let tally = &mut self.tallies[packet.class];
            tally.arrived += 1;
            if occupancy < self.buffer_capacity {
                self.queues[packet.class].push_back(Queued {
                    packet,
                    enqueue_slot: now,
                    seq: self.next_seq,
                });
                self.next_seq += 1;
                occupancy += 1;
            } else {
                tally.dropped += 1;
                out.dropped.push((packet, DropReason::TailDrop));
            }
        }

        self.now += 1;
        out
    }

    /// Applies a new buffer size and service rate; evicts the most recently
    /// enqueued packets if the buffer shrinks below the occupancy.
    pub fn resize(&mut self, buffer_capacity: usize, service_rate: f64) -> Vec<Packet> {
        self.buffer_capacity = buffer_capacity;
        self.service_rate = service_rate.max(0.0);
        let mut evicted = Vec::new();
        while self.occupancy() > self.buffer_capacity {
            let class = self
                .queues
                .iter()
                .enumerate()
                .filter_map(|(c, q)| q.back().map(|b| (c, b.seq)))
                .max_by_key(|&(_, seq)| seq)
                .map(|(c, _)| c)
                .expect("occupancy > 0 implies a non-empty queue");
            let q = self.queues[class].pop_back().expect("non-empty");
            self.tallies[class].dropped += 1;
            evicted.push(q.packet);
        }
        evicted
    }
}

/// Outcome of the count-only single-class recurrence.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct LossTally {
    pub arrived: u64,
    pub served: u64,
    pub dropped: u64,
    pub queued: u64,
}

impl LossTally {
    pub fn loss_fraction(&self) -> f64 {
        if self.arrived == 0 {
            0.0
        } else {
            self.dropped as f64 / self.arrived as f64
        }
    }
}

/// Same recurrence as a single-class [`NodeState`] without deadlines, on
/// counts only. Calibration runs this in its inner loop.
pub fn simulate_loss(arrivals: &[u64], buffer_capacity: usize, service_rate: f64) -> LossTally {
    let cap = buffer_capacity as u64;
    let rate = service_rate.max(0.0);
    let mut carry = 0.0f64;
    let mut backlog = 0u64;
    let mut tally = LossTally::default();
    for &a in arrivals {
        let available = carry + rate;
        let budget = available.floor();
        carry = available - budget;
        let served = backlog.min(budget as u64);
        backlog -= served;
        tally.served += served;
        let admitted = a.min(cap - backlog);
        backlog += admitted;
        tally.arrived += a;
        tally.dropped += a - admitted;
    }
    tally.queued = backlog;
    tally
}
