//! Seeded discrete-event simulation of an eventually synchronous network.
//!
//! Events pop in `(time, seq)` order, where `seq` is a global insertion
//! counter, so a configuration and a seed fix the whole run.

pub mod adversary;

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::chain::{Height, Round};
use crate::crypto::Address;
use crate::messages::NetMessage;
use crate::node::{Effect, Node, Observation};

pub use adversary::Strategy;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PreGstDelay {
    Range { min: u64, max: u64 },
    /// Nothing sent before GST arrives.
    Infinite,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreGst {
    pub delay: PreGstDelay,
    #[serde(default)]
    pub loss: f64,
}

impl Default for PreGst {
    fn default() -> Self {
        PreGst {
            delay: PreGstDelay::Range { min: 1, max: 1 },
            loss: 0.0,
        }
    }
}

/// Drops messages on matching links sent during `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DropRule {
    pub from: Option<Address>,
    pub to: Option<Address>,
    pub start: u64,
    pub end: u64,
}

impl DropRule {
    fn matches(&self, from: Address, to: Address, t: u64) -> bool {
        self.from.is_none_or(|f| f == from)
            && self.to.is_none_or(|x| x == to)
            && (self.start..self.end).contains(&t)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkConfig {
    pub gst: u64,
    pub delta: u64,
    pub pre_gst: PreGst,
    pub drop_matrix: Vec<DropRule>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StopCondition {
    #[serde(default)]
    pub max_time: Option<u64>,
    /// Every honest node has a chain of at least this height.
    #[serde(default)]
    pub target_height: Option<Height>,
    #[serde(default)]
    pub max_events: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    TargetHeight,
    MaxTime,
    MaxEvents,
    QueueEmpty,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Event {
    Deliver { from: usize, to: usize, msg: Box<NetMessage> },
    Timer { node: usize, height: Height, round: Round },
    Scripted { node: usize, action: usize },
}

#[derive(Debug)]
struct Queued {
    time: u64,
    seq: u64,
    event: Event,
}

impl PartialEq for Queued {
    fn eq(&self, other: &Self) -> bool {
        (self.time, self.seq) == (other.time, other.seq)
    }
}

impl Eq for Queued {}

impl Ord for Queued {
    // Reversed: BinaryHeap is a max-heap.
    fn cmp(&self, other: &Self) -> Ordering {
        (other.time, other.seq).cmp(&(self.time, self.seq))
    }
}

impl PartialOrd for Queued {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// An observation made by node `node` at `time`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Record {
    pub time: u64,
    pub node: usize,
    #[serde(flatten)]
    pub observation: Observation,
}

pub struct World {
    now: u64,
    seq: u64,
    events: u64,
    queue: BinaryHeap<Queued>,
    nodes: Vec<Node>,
    index: BTreeMap<Address, usize>,
    byzantine: BTreeMap<usize, Strategy>,
    net: NetworkConfig,
    rng: ChaCha8Rng,
    records: Vec<Record>,
    trace: Option<Vec<String>>,
}

impl World {
    pub fn new(
        nodes: Vec<Node>,
        byzantine: BTreeMap<usize, Strategy>,
        net: NetworkConfig,
        seed: u64,
        trace: bool,
    ) -> Self {
        let index = nodes.iter().enumerate().map(|(i, n)| (n.address(), i)).collect();
        let mut world = World {
            now: 0,
            seq: 0,
            events: 0,
            queue: BinaryHeap::new(),
            nodes,
            index,
            byzantine,
            net,
            rng: ChaCha8Rng::seed_from_u64(seed),
            records: Vec::new(),
            trace: trace.then(Vec::new),
        };
        let scripted: Vec<(usize, Vec<u64>)> = world
            .byzantine
            .iter()
            .filter_map(|(&i, s)| match s {
                Strategy::Scripted(actions) => Some((i, actions.iter().map(|a| a.at).collect())),
                _ => None,
            })
            .collect();
        for (node, times) in scripted {
            for (action, at) in times.into_iter().enumerate() {
                world.push(at, Event::Scripted { node, action });
            }
        }
        for i in 0..world.nodes.len() {
            let effects = world.nodes[i].start();
            world.route(i, effects, "START", Value::Null);
        }
        world
    }

    pub fn now(&self) -> u64 {
        self.now
    }

    pub fn events_processed(&self) -> u64 {
        self.events
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn node_index(&self, a: &Address) -> Option<usize> {
        self.index.get(a).copied()
    }

    pub fn is_byzantine(&self, i: usize) -> bool {
        self.byzantine.contains_key(&i)
    }

    pub fn byzantine(&self) -> &BTreeMap<usize, Strategy> {
        &self.byzantine
    }

    pub fn honest(&self) -> impl Iterator<Item = (usize, &Node)> {
        self.nodes
            .iter()
            .enumerate()
            .filter(|(i, _)| !self.byzantine.contains_key(i))
    }

    pub fn records(&self) -> &[Record] {
        &self.records
    }

    pub fn network(&self) -> &NetworkConfig {
        &self.net
    }

    pub fn trace(&self) -> Option<&[String]> {
        self.trace.as_deref()
    }

    fn push(&mut self, time: u64, event: Event) {
        self.queue.push(Queued { time, seq: self.seq, event });
        self.seq += 1;
    }

    /// Arrival time for a message sent now, or `None` if it is lost.
    fn delivery_time(&mut self, from: usize, to: usize) -> Option<u64> {
        let (fa, ta) = (self.nodes[from].address(), self.nodes[to].address());
        let now = self.now;
        if self.net.drop_matrix.iter().any(|r| r.matches(fa, ta, now)) {
            return None;
        }
        let delta = self.net.delta.max(1);
        let gst = self.net.gst;
        if now >= gst {
            return Some(now + self.rng.random_range(1..=delta));
        }
        if self.net.pre_gst.loss > 0.0 && self.rng.random_bool(self.net.pre_gst.loss.min(1.0)) {
            return None;
        }
        match self.net.pre_gst.delay {
            PreGstDelay::Infinite => None,
            PreGstDelay::Range { min, max } => {
                let d = self.rng.random_range(min.max(1)..=max.max(min).max(1));
                let repair = gst + self.rng.random_range(1..=delta);
                Some((now + d).min(repair))
            }
        }
    }

    fn send(&mut self, from: usize, to: Address, msg: NetMessage) {
        let Some(to) = self.node_index(&to) else {
            return;
        };
        if to == from {
            return;
        }
        if let Some(at) = self.delivery_time(from, to) {
            self.push(at, Event::Deliver { from, to, msg: Box::new(msg) });
        }
    }

    fn route(&mut self, i: usize, effects: Vec<Effect>, kind: &str, input: Value) {
        let effects = match self.byzantine.get(&i) {
            Some(s) => adversary::apply(s, &self.nodes[i], effects),
            None => effects,
        };
        if let Some(trace) = self.trace.as_mut() {
            let actions: Vec<Value> = effects.iter().map(effect_summary).collect();
            let node = &self.nodes[i];
            let line = json!({
                "time": self.now,
                "node": i,
                "height": node.next_height(),
                "round": node.instance().map(|x| x.current_round()),
                "event_kind": kind,
                "message": input,
                "actions": actions,
            });
            trace.push(line.to_string());
        }
        for e in effects {
            match e {
                Effect::Multicast { to, msg } => {
                    let msg = NetMessage::Consensus(msg);
                    for t in to {
                        self.send(i, t, msg.clone());
                    }
                }
                Effect::Broadcast(fb) => {
                    let msg = NetMessage::FinalisedBlock(fb);
                    let peers = self.nodes[i].peers().to_vec();
                    for t in peers {
                        self.send(i, t, msg.clone());
                    }
                }
                Effect::Send { to, msg } => self.send(i, to, msg),
                Effect::StartTimer { height, round, duration } => {
                    let at = self.now.saturating_add(duration);
                    self.push(at, Event::Timer { node: i, height, round });
                }
                Effect::Observed(observation) => self.records.push(Record {
                    time: self.now,
                    node: i,
                    observation,
                }),
            }
        }
    }

    /// Processes the earliest event; false once the queue is empty.
    pub fn step(&mut self) -> bool {
        let Some(Queued { time, event, .. }) = self.queue.pop() else {
            return false;
        };
        self.now = time;
        self.events += 1;
        match event {
            Event::Deliver { from, to, msg } => {
                let sender = self.nodes[from].address();
                let summary = if self.trace.is_some() {
                    let mut s = msg.summary();
                    s["from"] = json!(from);
                    s
                } else {
                    Value::Null
                };
                let effects = self.nodes[to].handle(sender, *msg);
                self.route(to, effects, "DELIVER", summary);
            }
            Event::Timer { node, height, round } => {
                let effects = self.nodes[node].handle_timer(height, round);
                self.route(node, effects, "TIMER", json!({"height": height, "round": round}));
            }
            Event::Scripted { node, action } => self.scripted(node, action),
        }
        true
    }

    fn scripted(&mut self, node: usize, action: usize) {
        let Some(Strategy::Scripted(actions)) = self.byzantine.get(&node) else {
            return;
        };
        let a = actions[action].clone();
        let n = &self.nodes[node];
        let Some(msg) = adversary::scripted_message(n, &a.message) else {
            return;
        };
        let targets: Vec<Address> = match &a.to {
            Some(idx) => idx.iter().filter_map(|&i| self.nodes.get(i).map(Node::address)).collect(),
            None => n.chain().next_validators().iter().copied().collect(),
        };
        if let Some(t) = self.trace.as_mut() {
            t.push(
                json!({"time": self.now, "node": node, "event_kind": "SCRIPTED", "message": msg.summary()})
                    .to_string(),
            );
        }
        let msg = NetMessage::Consensus(msg);
        for to in targets {
            self.send(node, to, msg.clone());
        }
    }

    /// Lowest chain height over honest nodes.
    pub fn min_honest_height(&self) -> Height {
        self.honest().map(|(_, n)| n.chain().height()).min().unwrap_or(0)
    }

    pub fn run(&mut self, stop: StopCondition) -> StopReason {
        loop {
            if let Some(target) = stop.target_height {
                if self.min_honest_height() >= target {
                    return StopReason::TargetHeight;
                }
            }
            if stop.max_events.is_some_and(|m| self.events >= m) {
                return StopReason::MaxEvents;
            }
            match self.queue.peek() {
                None => return StopReason::QueueEmpty,
                Some(q) if stop.max_time.is_some_and(|m| q.time > m) => {
                    self.now = stop.max_time.unwrap().max(self.now);
                    return StopReason::MaxTime;
                }
                Some(_) => {}
            }
            self.step();
        }
    }
}

fn effect_summary(e: &Effect) -> Value {
    match e {
        Effect::Multicast { to, msg } => json!({"action": "MULTICAST", "to": to.len(), "message": msg.summary()}),
        Effect::Broadcast(fb) => json!({"action": "BROADCAST", "height": fb.height(), "round": fb.proof.round}),
        Effect::Send { to, msg } => json!({"action": "SEND", "to": to, "message": msg.summary()}),
        Effect::StartTimer { height, round, duration } => {
            json!({"action": "START_TIMER", "height": height, "round": round, "duration": duration})
        }
        Effect::Observed(o) => json!({"action": "OBSERVED", "observation": o}),
    }
}
