//! Deterministic discrete-event engine.
//!
//! Time is an integer tick. Messages are delivered in `(delivered_tick,
//! msg_id)` order, which is a total order, so a run is fully determined by
//! the seed and the handlers.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::model::{AgentId, DelayModel, UnitModel};
use crate::negotiation::WorkingMemory;
use crate::observer::AnomalyReport;
use crate::rng::{self, Stream};
use crate::topology::Topology;

pub type Tick = u64;

/// A participant on the message bus.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Endpoint {
    Agent(AgentId),
    /// The central controller. It never negotiates.
    Central,
}

impl Endpoint {
    pub fn agent(&self) -> Option<AgentId> {
        match self {
            Endpoint::Agent(a) => Some(*a),
            Endpoint::Central => None,
        }
    }
}

impl From<AgentId> for Endpoint {
    fn from(a: AgentId) -> Self {
        Endpoint::Agent(a)
    }
}

impl fmt::Display for Endpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Endpoint::Agent(a) => a.fmt(f),
            Endpoint::Central => f.write_str("CC"),
        }
    }
}

impl FromStr for Endpoint {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "CC" {
            Ok(Endpoint::Central)
        } else {
            s.parse().map(Endpoint::Agent)
        }
    }
}

impl Serialize for Endpoint {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Endpoint {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum MessageKind {
    WorkingMemoryUpdate,
    BlacklistNotice,
    TopologyPush,
    TaskHandover,
    EscalationReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Payload {
    Memory(WorkingMemory),
    Blacklist {
        suspects: Vec<AgentId>,
    },
    Topology {
        topology: Topology,
        excluded: Vec<AgentId>,
    },
    Handover {
        unit: UnitModel,
        previous_owner: AgentId,
    },
    Escalation {
        report: AnomalyReport,
    },
}

impl Payload {
    pub fn kind(&self) -> MessageKind {
        match self {
            Payload::Memory(_) => MessageKind::WorkingMemoryUpdate,
            Payload::Blacklist { .. } => MessageKind::BlacklistNotice,
            Payload::Topology { .. } => MessageKind::TopologyPush,
            Payload::Handover { .. } => MessageKind::TaskHandover,
            Payload::Escalation { .. } => MessageKind::EscalationReport,
        }
    }
}

/// A message on the bus, with its scheduled delivery.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NegotiationMessage {
    pub msg_id: u64,
    pub sender: Endpoint,
    pub receiver: Endpoint,
    pub sent_tick: Tick,
    pub delivered_tick: Tick,
    pub kind: MessageKind,
    pub content: Payload,
}

/// A message before the bus assigns it an id and a delivery tick.
#[derive(Debug, Clone, PartialEq)]
pub struct Outgoing {
    pub sender: Endpoint,
    pub receiver: Endpoint,
    pub content: Payload,
}

impl Outgoing {
    pub fn new(sender: impl Into<Endpoint>, receiver: impl Into<Endpoint>, content: Payload) -> Self {
        Outgoing {
            sender: sender.into(),
            receiver: receiver.into(),
            content,
        }
    }
}

/// One processed (or suppressed) message in the trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub interval: u32,
    pub tick: Tick,
    pub delivered: bool,
    pub message: NegotiationMessage,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EventTrace {
    pub events: Vec<TraceEvent>,
    /// Delivered messages per interval index.
    pub counters: BTreeMap<u32, u64>,
}

impl EventTrace {
    pub fn delivered(&self) -> impl Iterator<Item = &TraceEvent> {
        self.events.iter().filter(|e| e.delivered)
    }

    pub fn count(&self, interval: u32) -> u64 {
        self.counters.get(&interval).copied().unwrap_or(0)
    }

    /// Recounts delivered messages per interval from the raw event list.
    pub fn recount(&self) -> BTreeMap<u32, u64> {
        let mut out = BTreeMap::new();
        for e in self.delivered() {
            *out.entry(e.interval).or_insert(0) += 1;
        }
        out
    }

    pub fn interval(&self, interval: u32) -> impl Iterator<Item = &TraceEvent> {
        self.events.iter().filter(move |e| e.interval == interval)
    }

    /// One JSON object per line, fields of [`NegotiationMessage`] plus
    /// `interval` and `delivered`.
    pub fn write_jsonl(&self, mut w: impl Write) -> std::io::Result<()> {
        for e in &self.events {
            let line = serde_json::to_string(&ExportRecord::from(e)).map_err(std::io::Error::other)?;
            writeln!(w, "{line}")?;
        }
        Ok(())
    }

    pub fn read_jsonl(text: &str) -> Result<EventTrace> {
        let mut trace = EventTrace::default();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let rec: ExportRecord = serde_json::from_str(line).map_err(|e| Error::Parse(e.to_string()))?;
            trace.push(rec.into());
        }
        Ok(trace)
    }

    /// CSV columns: interval, msg_id, sender, receiver, sent_tick,
    /// delivered_tick, delivered, kind, content (JSON).
    pub fn write_csv(&self, w: impl Write) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(TRACE_CSV_COLUMNS)
            .map_err(|e| Error::Parse(e.to_string()))?;
        for e in &self.events {
            let m = &e.message;
            let content = serde_json::to_string(&m.content).map_err(|e| Error::Parse(e.to_string()))?;
            wtr.write_record([
                e.interval.to_string(),
                m.msg_id.to_string(),
                m.sender.to_string(),
                m.receiver.to_string(),
                m.sent_tick.to_string(),
                m.delivered_tick.to_string(),
                e.delivered.to_string(),
                format!("{:?}", m.kind),
                content,
            ])
            .map_err(|e| Error::Parse(e.to_string()))?;
        }
        wtr.flush().map_err(|e| Error::Parse(e.to_string()))
    }

    fn push(&mut self, e: TraceEvent) {
        if e.delivered {
            *self.counters.entry(e.interval).or_insert(0) += 1;
        }
        self.events.push(e);
    }
}

pub const TRACE_CSV_COLUMNS: [&str; 9] = [
    "interval",
    "msg_id",
    "sender",
    "receiver",
    "sent_tick",
    "delivered_tick",
    "delivered",
    "kind",
    "content",
];

#[derive(Serialize, Deserialize)]
struct ExportRecord {
    interval: u32,
    msg_id: u64,
    sender: Endpoint,
    receiver: Endpoint,
    sent_tick: Tick,
    delivered_tick: Tick,
    delivered: bool,
    kind: MessageKind,
    content: Payload,
}

impl From<&TraceEvent> for ExportRecord {
    fn from(e: &TraceEvent) -> Self {
        let m = e.message.clone();
        ExportRecord {
            interval: e.interval,
            msg_id: m.msg_id,
            sender: m.sender,
            receiver: m.receiver,
            sent_tick: m.sent_tick,
            delivered_tick: m.delivered_tick,
            delivered: e.delivered,
            kind: m.kind,
            content: m.content,
        }
    }
}

impl From<ExportRecord> for TraceEvent {
    fn from(r: ExportRecord) -> Self {
        TraceEvent {
            interval: r.interval,
            tick: r.delivered_tick,
            delivered: r.delivered,
            message: NegotiationMessage {
                msg_id: r.msg_id,
                sender: r.sender,
                receiver: r.receiver,
                sent_tick: r.sent_tick,
                delivered_tick: r.delivered_tick,
                kind: r.kind,
                content: r.content,
            },
        }
    }
}

/// Receives delivered messages. Handlers may send further messages through
/// the kernel they are given.
pub trait Handler {
    fn deliver(&mut self, kernel: &mut Kernel, message: &NegotiationMessage);
}

impl<F: FnMut(&mut Kernel, &NegotiationMessage)> Handler for F {
    fn deliver(&mut self, kernel: &mut Kernel, message: &NegotiationMessage) {
        self(kernel, message)
    }
}

pub struct Kernel {
    now: Tick,
    interval: u32,
    next_id: u64,
    delay: DelayModel,
    delay_rng: ChaCha8Rng,
    queue: BTreeMap<(Tick, u64), NegotiationMessage>,
    bus_excluded: BTreeSet<Endpoint>,
    blocks: BTreeMap<Endpoint, BTreeSet<Endpoint>>,
    trace: EventTrace,
    tick_cap: Option<Tick>,
}

impl Kernel {
    pub fn new(seed: u64, delay: DelayModel) -> Self {
        Kernel {
            now: 0,
            interval: 0,
            next_id: 0,
            delay,
            delay_rng: rng::stream(seed, Stream::Delay),
            queue: BTreeMap::new(),
            bus_excluded: BTreeSet::new(),
            blocks: BTreeMap::new(),
            trace: EventTrace::default(),
            tick_cap: None,
        }
    }

    pub fn now(&self) -> Tick {
        self.now
    }

    pub fn interval(&self) -> u32 {
        self.interval
    }

    pub fn set_interval(&mut self, interval: u32) {
        self.interval = interval;
    }

    /// Moves the clock forward without processing anything.
    pub fn advance_to(&mut self, tick: Tick) {
        self.now = self.now.max(tick);
    }

    /// Absolute tick beyond which `run_until` fails; `None` disables the cap.
    pub fn set_tick_cap(&mut self, cap: Option<Tick>) {
        self.tick_cap = cap;
    }

    /// Id the next sent message will get.
    pub fn next_msg_id(&self) -> u64 {
        self.next_id
    }

    pub fn is_idle(&self) -> bool {
        self.queue.is_empty()
    }

    pub fn pending(&self) -> usize {
        self.queue.len()
    }

    pub fn pending_of_kind(&self, kind: MessageKind) -> usize {
        self.queue.values().filter(|m| m.kind == kind).count()
    }

    pub fn trace(&self) -> &EventTrace {
        &self.trace
    }

    pub fn into_trace(self) -> EventTrace {
        self.trace
    }

    /// Removes an endpoint from the bus: everything it sends or is sent is
    /// recorded as suppressed from now on.
    pub fn exclude(&mut self, endpoint: Endpoint) {
        self.bus_excluded.insert(endpoint);
    }

    pub fn is_excluded(&self, endpoint: Endpoint) -> bool {
        self.bus_excluded.contains(&endpoint)
    }

    pub fn excluded(&self) -> &BTreeSet<Endpoint> {
        &self.bus_excluded
    }

    /// Local receive filter: `receiver` drops everything `sender` sends it.
    pub fn block(&mut self, receiver: Endpoint, sender: Endpoint) {
        self.blocks.entry(receiver).or_default().insert(sender);
    }

    pub fn draw_delay(&mut self) -> Tick {
        self.delay_rng
            .gen_range(self.delay.min_ticks..=self.delay.max_ticks)
    }

    /// Assigns an id and a delivery tick and queues the message.
    pub fn send(&mut self, out: Outgoing) -> &NegotiationMessage {
        let delay = self.draw_delay();
        let msg_id = self.next_id;
        self.next_id += 1;
        let delivered_tick = self.now + delay;
        let msg = NegotiationMessage {
            msg_id,
            sender: out.sender,
            receiver: out.receiver,
            sent_tick: self.now,
            delivered_tick,
            kind: out.content.kind(),
            content: out.content,
        };
        self.queue.entry((delivered_tick, msg_id)).or_insert(msg)
    }

    pub fn send_all(&mut self, out: impl IntoIterator<Item = Outgoing>) {
        for o in out {
            self.send(o);
        }
    }

    fn suppressed(&self, m: &NegotiationMessage) -> bool {
        self.bus_excluded.contains(&m.sender)
            || self.bus_excluded.contains(&m.receiver)
            || self
                .blocks
                .get(&m.receiver)
                .is_some_and(|b| b.contains(&m.sender))
    }

    /// Processes queued messages in order until `condition` holds or the
    /// queue drains. Returns the tick reached.
    pub fn run_until<H, C>(&mut self, handler: &mut H, mut condition: C) -> Result<Tick>
    where
        H: Handler + ?Sized,
        C: FnMut(&Kernel) -> bool,
    {
        loop {
            if condition(self) {
                return Ok(self.now);
            }
            let Some((&(tick, _), _)) = self.queue.first_key_value() else {
                return Ok(self.now);
            };
            if let Some(cap) = self.tick_cap {
                if tick > cap {
                    return Err(Error::NonConvergence {
                        interval: self.interval,
                        cap,
                        tick,
                        partial: Box::new(self.trace.clone()),
                    });
                }
            }
            let (_, msg) = self.queue.pop_first().expect("peeked");
            self.now = tick;
            let delivered = !self.suppressed(&msg);
            self.trace.push(TraceEvent {
                interval: self.interval,
                tick,
                delivered,
                message: msg.clone(),
            });
            if delivered {
                handler.deliver(self, &msg);
            }
        }
    }

    /// Runs until the queue is empty.
    pub fn run_to_quiescence<H: Handler + ?Sized>(&mut self, handler: &mut H) -> Result<Tick> {
        self.run_until(handler, |_| false)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn notice(from: u32, to: u32) -> Outgoing {
        Outgoing::new(AgentId(from), AgentId(to), Payload::Blacklist { suspects: vec![] })
    }

    #[test]
    fn degenerate_delay_is_exact() {
        let mut k = Kernel::new(1, DelayModel { min_ticks: 1, max_ticks: 1 });
        k.advance_to(5);
        let m = k.send(notice(0, 1));
        assert_eq!(m.sent_tick, 5);
        assert_eq!(m.delivered_tick, 6);
    }

    #[test]
    fn delays_are_seeded() {
        let draw = || {
            let mut k = Kernel::new(9, DelayModel { min_ticks: 1, max_ticks: 5 });
            (0..50).map(|_| k.send(notice(0, 1)).delivered_tick).collect::<Vec<_>>()
        };
        let a = draw();
        assert_eq!(a, draw());
        assert!(a.iter().all(|t| (1..=5).contains(t)));
        assert!(a.iter().collect::<BTreeSet<_>>().len() > 1);
    }

    #[test]
    fn msg_ids_strictly_increase() {
        let mut k = Kernel::new(1, DelayModel::default());
        let ids: Vec<u64> = (0..10).map(|_| k.send(notice(0, 1)).msg_id).collect();
        assert!(ids.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn excluded_receiver_is_suppressed() {
        let mut k = Kernel::new(1, DelayModel { min_ticks: 1, max_ticks: 1 });
        k.exclude(Endpoint::Agent(AgentId(1)));
        k.send(notice(0, 1));
        let mut hits = 0;
        k.run_to_quiescence(&mut |_: &mut Kernel, _: &NegotiationMessage| hits += 1)
            .unwrap();
        assert_eq!(hits, 0);
        let e = &k.trace().events[0];
        assert!(!e.delivered);
        assert_eq!(k.trace().count(0), 0);
    }

    #[test]
    fn block_filters_one_direction_only() {
        let mut k = Kernel::new(1, DelayModel { min_ticks: 1, max_ticks: 1 });
        k.block(Endpoint::Agent(AgentId(1)), Endpoint::Agent(AgentId(0)));
        k.send(notice(0, 1));
        k.send(notice(1, 0));
        k.run_to_quiescence(&mut |_: &mut Kernel, _: &NegotiationMessage| {}).unwrap();
        let flags: Vec<bool> = k.trace().events.iter().map(|e| e.delivered).collect();
        assert_eq!(flags, vec![false, true]);
    }

    #[test]
    fn empty_queue_returns_current_tick() {
        let mut k = Kernel::new(1, DelayModel::default());
        k.advance_to(17);
        let t = k.run_to_quiescence(&mut |_: &mut Kernel, _: &NegotiationMessage| {}).unwrap();
        assert_eq!(t, 17);
    }

    #[test]
    fn stops_at_first_tick_meeting_condition() {
        // A ping-pong pair that never stops.
        let mut k = Kernel::new(3, DelayModel { min_ticks: 1, max_ticks: 3 });
        k.send(notice(0, 1));
        let mut echo = |k: &mut Kernel, m: &NegotiationMessage| {
            k.send(Outgoing::new(m.receiver, m.sender, m.content.clone()));
        };
        let mut processed = Vec::new();
        let t = k
            .run_until(&mut echo, |k| {
                processed.push(k.now());
                k.now() >= 100
            })
            .unwrap();
        assert!(t >= 100);
        assert!(processed.iter().filter(|&&p| p >= 100).count() == 1);
        assert!(t - 100 <= 3);
    }

    #[test]
    fn tick_cap_reports_partial_trace() {
        let mut k = Kernel::new(3, DelayModel { min_ticks: 1, max_ticks: 1 });
        k.set_tick_cap(Some(10));
        k.send(notice(0, 1));
        let mut echo = |k: &mut Kernel, m: &NegotiationMessage| {
            k.send(Outgoing::new(m.receiver, m.sender, m.content.clone()));
        };
        match k.run_to_quiescence(&mut echo) {
            Err(Error::NonConvergence { partial, cap, .. }) => {
                assert_eq!(cap, 10);
                assert_eq!(partial.events.len(), 10);
            }
            other => panic!("expected non-convergence, got {other:?}"),
        }
    }

    #[test]
    fn delivery_order_is_tick_then_id() {
        let mut k = Kernel::new(11, DelayModel { min_ticks: 1, max_ticks: 6 });
        for i in 0..40 {
            k.send(notice(i % 3, (i + 1) % 3));
        }
        k.run_to_quiescence(&mut |_: &mut Kernel, _: &NegotiationMessage| {}).unwrap();
        let keys: Vec<(Tick, u64)> = k
            .trace()
            .events
            .iter()
            .map(|e| (e.tick, e.message.msg_id))
            .collect();
        assert!(keys.windows(2).all(|w| w[0] < w[1]));
        assert!(k.trace().events.iter().all(|e| e.tick > e.message.sent_tick));
    }

    #[test]
    fn endpoint_text_round_trip() {
        for e in [Endpoint::Central, Endpoint::Agent(AgentId(4))] {
            assert_eq!(e.to_string().parse::<Endpoint>().unwrap(), e);
        }
    }
}
