//! Gossip-based self-consumption negotiation.
//!
//! Each agent keeps a working memory: the latest schedule choice it knows
//! for every peer plus the best complete candidate seen so far. On any change
//! it best-responds with one of its feasible schedules, keeps the better of
//! its own proposal and the candidate, and fans the memory out to its
//! neighbours. Negotiation ends when no message is in flight.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::attack;
use crate::error::{Error, Result};
use crate::kernel::{Kernel, MessageKind, NegotiationMessage, Outgoing, Payload, Tick};
use crate::model::{AgentId, AttackConfig, Schedule, UnitModel};
use crate::topology::Topology;

/// L1 distance between the aggregate and the target profile.
pub fn objective(aggregate: &[f64], target: &[f64]) -> Result<f64> {
    if aggregate.len() != target.len() {
        return Err(Error::InvalidArgument(format!(
            "aggregate has {} slots, target has {}",
            aggregate.len(),
            target.len()
        )));
    }
    Ok(l1(aggregate, target))
}

fn l1(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}

/// Index of the feasible schedule that brings `others + schedule` closest to
/// the target. Ties go to the lowest index.
pub fn choose_best_schedule(feasible: &[Schedule], others: &[f64], target: &[f64]) -> usize {
    let mut best = (0, f64::INFINITY);
    let mut sum = vec![0.0; others.len()];
    for (i, s) in feasible.iter().enumerate() {
        for ((acc, o), v) in sum.iter_mut().zip(others).zip(s.values()) {
            *acc = o + v;
        }
        let d = l1(&sum, target);
        if d < best.1 {
            best = (i, d);
        }
    }
    best.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Entry {
    pub schedule: Schedule,
    pub revision: u32,
}

/// A joint assignment and its objective.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub assignment: BTreeMap<AgentId, Entry>,
    pub objective: f64,
}

impl Candidate {
    pub fn new(assignment: BTreeMap<AgentId, Entry>, target: &Schedule) -> Self {
        let objective = l1(&aggregate(assignment.values().map(|e| &e.schedule), target.len()), target.values());
        Candidate { assignment, objective }
    }

    pub fn coverage(&self) -> usize {
        self.assignment.len()
    }

    pub fn aggregate(&self, len: usize) -> Vec<f64> {
        aggregate(self.assignment.values().map(|e| &e.schedule), len)
    }

    fn recompute(&mut self, target: &Schedule) {
        self.objective = l1(&self.aggregate(target.len()), target.values());
    }

    /// Total preference order: more agents covered, then lower objective,
    /// then the lexicographically smaller assignment.
    pub fn preference(&self, other: &Candidate) -> Ordering {
        other
            .coverage()
            .cmp(&self.coverage())
            .then(self.objective.total_cmp(&other.objective))
            .then_with(|| {
                for ((a, ea), (b, eb)) in self.assignment.iter().zip(&other.assignment) {
                    let c = a.cmp(b).then_with(|| {
                        ea.schedule
                            .values()
                            .iter()
                            .zip(eb.schedule.values())
                            .map(|(x, y)| x.total_cmp(y))
                            .find(|o| o.is_ne())
                            .unwrap_or(Ordering::Equal)
                    });
                    if c.is_ne() {
                        return c;
                    }
                }
                Ordering::Equal
            })
    }

    fn is_better_than(&self, other: &Candidate) -> bool {
        self.preference(other) == Ordering::Less
    }
}

pub fn aggregate<'a>(schedules: impl IntoIterator<Item = &'a Schedule>, len: usize) -> Vec<f64> {
    let mut out = vec![0.0; len];
    for s in schedules {
        for (o, v) in out.iter_mut().zip(s.values()) {
            *o += v;
        }
    }
    out
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct WorkingMemory {
    pub entries: BTreeMap<AgentId, Entry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub best_candidate: Option<Candidate>,
}

/// Merges `received` into `local` in place. Returns whether anything changed.
fn merge_into(local: &mut WorkingMemory, received: &WorkingMemory) -> bool {
    let mut changed = false;
    for (id, e) in &received.entries {
        match local.entries.get(id) {
            Some(l) if l.revision >= e.revision => {}
            _ => {
                local.entries.insert(*id, e.clone());
                changed = true;
            }
        }
    }
    if let Some(r) = &received.best_candidate {
        let replace = match &local.best_candidate {
            None => true,
            Some(l) => r.is_better_than(l),
        };
        if replace {
            local.best_candidate = Some(r.clone());
            changed = true;
        }
    }
    changed
}

/// Per-agent entry with the higher revision wins (ties keep the local one);
/// the candidate is replaced only by a strictly preferred one.
pub fn merge_memories(local: &WorkingMemory, received: &WorkingMemory) -> (WorkingMemory, bool) {
    let mut merged = local.clone();
    let changed = merge_into(&mut merged, received);
    (merged, changed)
}

/// Every combination of one schedule from each set, summed slot-wise.
pub fn cross_sum(a: &[Schedule], b: &[Schedule]) -> Vec<Schedule> {
    a.iter().flat_map(|x| b.iter().map(move |y| x.plus(y))).collect()
}

/// Negotiation state of one agent.
#[derive(Debug, Clone)]
pub struct NegotiationAgent {
    pub id: AgentId,
    units: Vec<UnitModel>,
    feasible: Vec<Schedule>,
    pub neighbors: BTreeSet<AgentId>,
    pub topology_generation: u64,
    pub blacklist: BTreeSet<AgentId>,
    memory: WorkingMemory,
    history: Vec<Schedule>,
    active: bool,
    candidate_log: Vec<(usize, f64)>,
}

impl NegotiationAgent {
    pub fn new(id: AgentId, unit: UnitModel) -> Self {
        let feasible = unit.feasible_schedules.clone();
        NegotiationAgent {
            id,
            units: vec![unit],
            feasible,
            neighbors: BTreeSet::new(),
            topology_generation: 0,
            blacklist: BTreeSet::new(),
            memory: WorkingMemory::default(),
            history: Vec::new(),
            active: false,
            candidate_log: Vec::new(),
        }
    }

    pub fn units(&self) -> &[UnitModel] {
        &self.units
    }

    pub fn feasible(&self) -> &[Schedule] {
        &self.feasible
    }

    /// Takes over another unit; the agent now schedules both jointly.
    pub fn adopt_unit(&mut self, unit: UnitModel) {
        self.feasible = cross_sum(&self.feasible, &unit.feasible_schedules);
        self.units.push(unit);
    }

    /// Drops every unit; an isolated agent keeps running but owns nothing.
    pub fn release_units(&mut self) -> Vec<UnitModel> {
        self.feasible.clear();
        std::mem::take(&mut self.units)
    }

    pub fn memory(&self) -> &WorkingMemory {
        &self.memory
    }

    pub fn best(&self) -> Option<&Candidate> {
        self.memory.best_candidate.as_ref()
    }

    pub fn is_active(&self) -> bool {
        self.active
    }

    /// The schedule this agent currently commits to, if it took part.
    pub fn committed(&self) -> Option<&Schedule> {
        self.memory.entries.get(&self.id).map(|e| &e.schedule)
    }

    /// `(coverage, objective)` of every candidate this agent held this interval.
    pub fn candidate_log(&self) -> &[(usize, f64)] {
        &self.candidate_log
    }

    pub fn reset_for_interval(&mut self) {
        self.memory = WorkingMemory::default();
        self.history.clear();
        self.active = false;
        self.candidate_log.clear();
    }

    /// Removes a suspect from the neighbour set and from the working memory.
    /// Returns whether the memory changed.
    pub fn exclude(&mut self, suspect: AgentId, target: &Schedule) -> bool {
        self.blacklist.insert(suspect);
        self.neighbors.remove(&suspect);
        let mut changed = self.memory.entries.remove(&suspect).is_some();
        if let Some(c) = &mut self.memory.best_candidate {
            if c.assignment.remove(&suspect).is_some() {
                c.recompute(target);
                changed = true;
            }
        }
        if changed {
            self.log_candidate();
        }
        changed
    }

    /// Brings a received memory into this agent's frame: blacklisted agents
    /// are dropped, its own entries are replaced by what it actually chose at
    /// that revision, and the candidate objective is recomputed.
    fn normalize(&self, received: &WorkingMemory, target: &Schedule) -> WorkingMemory {
        let mut m = received.clone();
        m.entries.retain(|a, _| *a != self.id && !self.blacklist.contains(a));
        if let Some(c) = &mut m.best_candidate {
            c.assignment.retain(|a, _| !self.blacklist.contains(a));
            if let Some(own) = c.assignment.get_mut(&self.id) {
                if let Some(truth) = self.history.get(own.revision as usize) {
                    own.schedule = truth.clone();
                }
            }
            c.recompute(target);
            if c.assignment.is_empty() {
                m.best_candidate = None;
            }
        }
        m
    }

    /// One protocol step. Returns the memory to send to every neighbour, or
    /// `None` when nothing changed.
    pub fn negotiation_round(&mut self, incoming: &[WorkingMemory], target: &Schedule) -> Option<WorkingMemory> {
        if self.feasible.is_empty() {
            return None;
        }
        let mut changed = !self.active;
        self.active = true;
        for rec in incoming {
            let rec = self.normalize(rec, target);
            changed |= merge_into(&mut self.memory, &rec);
        }
        if !changed {
            return None;
        }
        self.decide(target);
        Some(self.memory.clone())
    }

    /// Re-evaluates the own choice after an external change (exclusion,
    /// new unit) and returns the memory to fan out.
    pub fn refresh(&mut self, target: &Schedule) -> Option<WorkingMemory> {
        if !self.active || self.feasible.is_empty() {
            return None;
        }
        self.decide(target);
        Some(self.memory.clone())
    }

    fn entry_for(&self, value: &Schedule) -> Entry {
        match self.memory.entries.get(&self.id) {
            Some(e) if &e.schedule == value => e.clone(),
            _ => Entry {
                schedule: value.clone(),
                revision: self.history.len() as u32,
            },
        }
    }

    fn commit(&mut self, entry: Entry) {
        if entry.revision as usize == self.history.len() {
            self.history.push(entry.schedule.clone());
        }
        self.memory.entries.insert(self.id, entry);
    }

    fn decide(&mut self, target: &Schedule) {
        let len = target.len();
        let others = aggregate(
            self.memory
                .entries
                .iter()
                .filter(|(a, _)| **a != self.id)
                .map(|(_, e)| &e.schedule),
            len,
        );
        let idx = choose_best_schedule(&self.feasible, &others, target.values());
        let proposal = self.entry_for(&self.feasible[idx].clone());
        let mut config = self.memory.entries.clone();
        config.insert(self.id, proposal.clone());
        let cand = Candidate::new(config, target);

        let adopt = match &self.memory.best_candidate {
            None => true,
            Some(best) => cand.is_better_than(best),
        };
        if adopt {
            self.commit(proposal);
            self.memory.best_candidate = Some(cand);
            self.log_candidate();
            return;
        }
        let fallback = self
            .best()
            .and_then(|b| b.assignment.get(&self.id))
            .map(|e| e.schedule.clone())
            .filter(|s| self.feasible.contains(s));
        match fallback {
            Some(s) => {
                let e = self.entry_for(&s);
                self.commit(e);
            }
            None => self.commit(proposal),
        }
    }

    fn log_candidate(&mut self) {
        if let Some(c) = &self.memory.best_candidate {
            self.candidate_log.push((c.coverage(), c.objective));
        }
    }
}

/// The agreed cluster schedule of one interval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterSchedule {
    pub schedules: BTreeMap<AgentId, Schedule>,
    pub aggregate: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NegotiationOutcome {
    pub schedule: ClusterSchedule,
    /// Objective of the consensus candidate as the honest agents see it.
    pub consensus_objective: f64,
    /// Objective of what the participants actually committed to.
    pub realized_objective: f64,
    pub convergence_ticks: Tick,
    pub message_count: u64,
}

/// Attack parameters applied to the wire view of compromised senders.
#[derive(Debug, Clone)]
pub struct AttackHook {
    pub compromised: BTreeSet<AgentId>,
    pub config: AttackConfig,
}

/// All negotiating agents of a community plus the bookkeeping for one
/// interval.
#[derive(Debug, Clone)]
pub struct Cluster {
    pub agents: BTreeMap<AgentId, NegotiationAgent>,
    pub target: Schedule,
    pub attack: Option<AttackHook>,
    interval: u32,
    start_tick: Tick,
    last_memory_tick: Tick,
}

impl Cluster {
    pub fn new(agents: impl IntoIterator<Item = NegotiationAgent>, target: Schedule) -> Self {
        Cluster {
            agents: agents.into_iter().map(|a| (a.id, a)).collect(),
            target,
            attack: None,
            interval: 0,
            start_tick: 0,
            last_memory_tick: 0,
        }
    }

    pub fn from_units(units: impl IntoIterator<Item = (AgentId, UnitModel)>, target: Schedule) -> Self {
        Cluster::new(units.into_iter().map(|(id, u)| NegotiationAgent::new(id, u)), target)
    }

    pub fn apply_topology(&mut self, t: &Topology) {
        for (id, a) in &mut self.agents {
            a.neighbors = t.neighbors(*id).difference(&a.blacklist).copied().collect();
            a.topology_generation = t.generation;
        }
    }

    pub fn interval(&self) -> u32 {
        self.interval
    }

    pub fn start_tick(&self) -> Tick {
        self.start_tick
    }

    pub fn is_compromised(&self, a: AgentId) -> bool {
        self.attack.as_ref().is_some_and(|h| h.compromised.contains(&a))
    }

    pub fn begin_interval(&mut self, interval: u32, now: Tick) {
        self.interval = interval;
        self.start_tick = now;
        self.last_memory_tick = now;
        for a in self.agents.values_mut() {
            a.reset_for_interval();
        }
    }

    /// Restarts the convergence clock, e.g. after a reconfiguration step.
    pub fn mark_start(&mut self, now: Tick) {
        self.start_tick = now;
        self.last_memory_tick = now;
    }

    /// Wire messages for a memory fan-out, with tampering applied when the
    /// sender is compromised and the attack is active.
    pub fn fan_out(&self, from: AgentId, memory: WorkingMemory) -> Vec<Outgoing> {
        let Some(agent) = self.agents.get(&from) else {
            return Vec::new();
        };
        let mut payload = Payload::Memory(memory);
        if let Some(h) = &self.attack {
            if h.compromised.contains(&from) {
                // Validation guarantees a replacement exists in replace mode.
                let _ = attack::tamper_payload(&mut payload, from, &h.config, self.interval);
            }
        }
        agent
            .neighbors
            .iter()
            .filter(|n| !agent.blacklist.contains(n))
            .map(|n| Outgoing::new(from, *n, payload.clone()))
            .collect()
    }

    pub fn initiate(&mut self, kernel: &mut Kernel, initiator: AgentId) {
        let target = self.target.clone();
        let out = self
            .agents
            .get_mut(&initiator)
            .and_then(|a| a.negotiation_round(&[], &target));
        if let Some(m) = out {
            kernel.send_all(self.fan_out(initiator, m));
        }
    }

    /// Handles a delivered working-memory message.
    pub fn on_memory(&mut self, kernel: &mut Kernel, msg: &NegotiationMessage) {
        let (Some(to), Some(from), Payload::Memory(mem)) = (msg.receiver.agent(), msg.sender.agent(), &msg.content)
        else {
            return;
        };
        self.last_memory_tick = kernel.now();
        let target = self.target.clone();
        let Some(agent) = self.agents.get_mut(&to) else {
            return;
        };
        if agent.blacklist.contains(&from) {
            return;
        }
        if let Some(m) = agent.negotiation_round(std::slice::from_ref(mem), &target) {
            kernel.send_all(self.fan_out(to, m));
        }
    }

    /// Re-runs the decision of an agent after an external change and sends
    /// the result if the agent is part of the running negotiation.
    pub fn refresh(&mut self, kernel: &mut Kernel, id: AgentId) {
        let target = self.target.clone();
        if let Some(m) = self.agents.get_mut(&id).and_then(|a| a.refresh(&target)) {
            kernel.send_all(self.fan_out(id, m));
        }
    }

    /// Lowest-id active honest agent; its candidate is the consensus.
    pub fn reference_agent(&self) -> Option<&NegotiationAgent> {
        self.agents
            .values()
            .filter(|a| a.is_active() && a.best().is_some())
            .find(|a| !self.is_compromised(a.id))
            .or_else(|| self.agents.values().find(|a| a.is_active() && a.best().is_some()))
    }

    pub fn outcome(&self, kernel: &Kernel) -> NegotiationOutcome {
        let len = self.target.len();
        let (schedules, consensus) = match self.reference_agent().and_then(|a| a.best()) {
            Some(c) => {
                let schedules: BTreeMap<AgentId, Schedule> = c
                    .assignment
                    .iter()
                    .map(|(id, e)| {
                        let truth = self
                            .agents
                            .get(id)
                            .and_then(|a| a.committed())
                            .cloned()
                            .unwrap_or_else(|| e.schedule.clone());
                        (*id, truth)
                    })
                    .collect();
                (schedules, c.objective)
            }
            None => (BTreeMap::new(), l1(&vec![0.0; len], self.target.values())),
        };
        let agg = aggregate(schedules.values(), len);
        let realized = l1(&agg, self.target.values());
        NegotiationOutcome {
            schedule: ClusterSchedule {
                schedules,
                aggregate: agg,
            },
            consensus_objective: consensus,
            realized_objective: realized,
            convergence_ticks: self.last_memory_tick.saturating_sub(self.start_tick),
            message_count: kernel.trace().count(self.interval),
        }
    }
}

/// Runs one negotiation episode to quiescence.
pub fn run_negotiation(
    interval: u32,
    kernel: &mut Kernel,
    cluster: &mut Cluster,
    initiator: AgentId,
    tick_cap: Tick,
) -> Result<NegotiationOutcome> {
    kernel.set_interval(interval);
    cluster.begin_interval(interval, kernel.now());
    kernel.set_tick_cap(Some(kernel.now() + tick_cap));
    cluster.initiate(kernel, initiator);
    let mut handler = |k: &mut Kernel, m: &NegotiationMessage| {
        if m.kind == MessageKind::WorkingMemoryUpdate {
            cluster.on_memory(k, m);
        }
    };
    kernel.run_to_quiescence(&mut handler)?;
    Ok(cluster.outcome(kernel))
}
