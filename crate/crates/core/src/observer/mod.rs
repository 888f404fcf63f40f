//! Information-level projection, observer scopes and the anomaly-detection
//! pipeline.
//!
//! Observers watch delivered working-memory messages. Each message is
//! projected to the observer's information level, filtered by its scope and
//! fed to a set of pluggable detectors. Observations from intervals before
//! the incident form the training window; detection runs from the incident
//! onward.

mod constraint;
mod statistical;
mod traffic;

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

pub use constraint::ConstraintDetector;
pub use statistical::StatisticalDetector;
pub use traffic::TrafficDetector;

use crate::error::{Error, Result};
use crate::kernel::{EventTrace, MessageKind, Payload, Tick, TraceEvent};
use crate::model::{AgentId, ObserverArch, Schedule, ScenarioConfig, UnitType};
use crate::rng::{self, Stream};

pub const DEFAULT_THETA: f64 = 5.0;
pub const DEFAULT_CONSECUTIVE: usize = 2;
pub const DEFAULT_EPSILON: f64 = 1e-6;
pub const DEFAULT_STAT_FLOOR: f64 = 1.0;
pub const DEFAULT_MIN_TRAINING: usize = 5;
pub const RANDOM_GROUPS: usize = 4;

/// The feasible-set view available at level 4.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnitConstraints {
    pub digest: u64,
    pub feasible: Vec<Schedule>,
}

impl UnitConstraints {
    pub fn new(feasible: Vec<Schedule>) -> Self {
        UnitConstraints {
            digest: digest(&feasible),
            feasible,
        }
    }
}

/// FNV-1a over the bit patterns of every value.
pub fn digest(schedules: &[Schedule]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for s in schedules {
        for v in s.values().iter().chain(std::iter::once(&f64::NAN)) {
            for b in v.to_bits().to_le_bytes() {
                h ^= u64::from(b);
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        }
    }
    h
}

/// What an observer learns about one message at a given information level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub level: u8,
    pub sender: AgentId,
    pub interval: u32,
    pub timestamp: Tick,
    pub delay_ticks: Option<Tick>,
    pub traffic_window_count: Option<u64>,
    pub content_values: Option<Vec<f64>>,
    pub unit_constraints: Option<UnitConstraints>,
}

impl Observation {
    /// Names of the populated fields.
    pub fn field_set(&self) -> BTreeSet<&'static str> {
        let mut f = BTreeSet::from(["level", "sender", "interval", "timestamp"]);
        if self.delay_ticks.is_some() {
            f.insert("delay_ticks");
        }
        if self.traffic_window_count.is_some() {
            f.insert("traffic_window_count");
        }
        if self.content_values.is_some() {
            f.insert("content_values");
        }
        if self.unit_constraints.is_some() {
            f.insert("unit_constraints");
        }
        f
    }
}

/// Side information an observer can attach to an event: the sender's running
/// message count within the interval and its constraints at send time.
#[derive(Debug, Clone, Default)]
pub struct EventContext<'a> {
    pub traffic_window_count: u64,
    pub unit_constraints: Option<&'a UnitConstraints>,
}

/// Projects a message event to an information level. The event is not
/// modified.
pub fn project(event: &TraceEvent, level: u8, ctx: &EventContext<'_>) -> Result<Observation> {
    if !(1..=4).contains(&level) {
        return Err(Error::InvalidArgument(format!("information level {level} not in 1..=4")));
    }
    let m = &event.message;
    let sender = m
        .sender
        .agent()
        .ok_or_else(|| Error::InvalidArgument(format!("event {} was not sent by an agent", m.msg_id)))?;
    let content = || match &m.content {
        Payload::Memory(mem) => mem
            .entries
            .get(&sender)
            .map(|e| e.schedule.0.clone())
            .unwrap_or_default(),
        _ => Vec::new(),
    };
    Ok(Observation {
        level,
        sender,
        interval: event.interval,
        timestamp: m.sent_tick,
        delay_ticks: (level >= 2).then(|| m.delivered_tick - m.sent_tick),
        traffic_window_count: (level >= 2).then_some(ctx.traffic_window_count),
        content_values: (level >= 3).then(content),
        unit_constraints: if level >= 4 { ctx.unit_constraints.cloned() } else { None },
    })
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ScopeKind {
    Centralized,
    Decentralized(AgentId),
    GroupedByType(UnitType),
    GroupedRandom(u32),
}

/// The set of agents an observer instance may see.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObserverScope {
    pub kind: ScopeKind,
    pub members: BTreeSet<AgentId>,
}

impl ObserverScope {
    pub fn centralized(agents: impl IntoIterator<Item = AgentId>) -> Self {
        ObserverScope {
            kind: ScopeKind::Centralized,
            members: agents.into_iter().collect(),
        }
    }

    pub fn decentralized(agent: AgentId) -> Self {
        ObserverScope {
            kind: ScopeKind::Decentralized(agent),
            members: BTreeSet::from([agent]),
        }
    }

    pub fn by_type(t: UnitType, agents: &[(AgentId, UnitType)]) -> Self {
        ObserverScope {
            kind: ScopeKind::GroupedByType(t),
            members: agents.iter().filter(|(_, u)| *u == t).map(|(a, _)| *a).collect(),
        }
    }

    pub fn contains(&self, a: AgentId) -> bool {
        self.members.contains(&a)
    }
}

/// Seeded partition of the agents into `groups` random groups.
pub fn random_groups(agents: &[AgentId], groups: usize, seed: u64) -> Vec<ObserverScope> {
    let mut shuffled = agents.to_vec();
    shuffled.sort();
    shuffled.shuffle(&mut rng::stream(seed, Stream::Grouping));
    let groups = groups.clamp(1, shuffled.len().max(1));
    (0..groups)
        .map(|g| ObserverScope {
            kind: ScopeKind::GroupedRandom(g as u32),
            members: shuffled.iter().skip(g).step_by(groups).copied().collect(),
        })
        .collect()
}

/// Events whose sender belongs to the scope.
pub fn scope_filter<'a>(events: impl IntoIterator<Item = &'a TraceEvent>, scope: &ObserverScope) -> Vec<&'a TraceEvent> {
    events
        .into_iter()
        .filter(|e| e.message.sender.agent().is_some_and(|a| scope.contains(a)))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnomalyReport {
    pub suspect: AgentId,
    pub first_flagged_interval: u32,
    pub score: f64,
    pub detector: String,
    pub scope: ObserverScope,
}

/// A detector's verdict about one sender.
#[derive(Debug, Clone, PartialEq)]
pub struct Flag {
    pub suspect: AgentId,
    pub interval: u32,
    pub score: f64,
}

/// A pluggable anomaly detector. Detectors see observations in delivery
/// order; `finish_interval` is called once after the last observation of
/// each detection interval.
pub trait Detector: Send {
    fn name(&self) -> &'static str;
    /// Lowest information level whose fields the detector needs.
    fn min_level(&self) -> u8;
    /// Every flag carries a score of at least this value.
    fn threshold(&self) -> f64;
    fn train(&mut self, training: &[Observation]) -> Result<()>;
    fn observe(&mut self, obs: &Observation) -> Option<Flag>;
    fn finish_interval(&mut self, _interval: u32) -> Vec<Flag> {
        Vec::new()
    }
    /// Stops judging a sender whose baseline no longer describes it.
    fn retire(&mut self, agent: AgentId);
}

/// Tunable detector constants.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectorParams {
    pub theta: f64,
    pub consecutive: usize,
    pub epsilon: f64,
    pub stat_floor: f64,
    pub min_training: usize,
}

impl Default for DetectorParams {
    fn default() -> Self {
        DetectorParams {
            theta: DEFAULT_THETA,
            consecutive: DEFAULT_CONSECUTIVE,
            epsilon: DEFAULT_EPSILON,
            stat_floor: DEFAULT_STAT_FLOOR,
            min_training: DEFAULT_MIN_TRAINING,
        }
    }
}

/// Per-agent feasible sets over time. A change applies to every message
/// with an id at or above the recorded one.
#[derive(Debug, Clone, Default)]
pub struct ConstraintBook {
    timeline: BTreeMap<AgentId, Vec<(u64, UnitConstraints)>>,
}

impl ConstraintBook {
    pub fn new(initial: impl IntoIterator<Item = (AgentId, Vec<Schedule>)>) -> Self {
        ConstraintBook {
            timeline: initial
                .into_iter()
                .map(|(a, f)| (a, vec![(0, UnitConstraints::new(f))]))
                .collect(),
        }
    }

    pub fn record(&mut self, agent: AgentId, from_msg_id: u64, feasible: Vec<Schedule>) {
        self.timeline
            .entry(agent)
            .or_default()
            .push((from_msg_id, UnitConstraints::new(feasible)));
    }

    pub fn at(&self, agent: AgentId, msg_id: u64) -> Option<&UnitConstraints> {
        self.timeline
            .get(&agent)?
            .iter()
            .rev()
            .find(|(from, _)| *from <= msg_id)
            .map(|(_, c)| c)
    }
}

fn is_observable(e: &TraceEvent) -> bool {
    e.delivered && e.message.kind == MessageKind::WorkingMemoryUpdate && e.message.sender.agent().is_some()
}

/// Projects every observable event of the scope at `level`, in trace order.
pub fn observe_events<'a>(
    events: impl IntoIterator<Item = &'a TraceEvent>,
    scope: &ObserverScope,
    level: u8,
    book: &ConstraintBook,
) -> Result<Vec<Observation>> {
    let mut counts: BTreeMap<(u32, AgentId), u64> = BTreeMap::new();
    let mut out = Vec::new();
    for e in scope_filter(events.into_iter().filter(|e| is_observable(e)), scope) {
        let sender = e.message.sender.agent().expect("observable");
        let c = counts.entry((e.interval, sender)).or_insert(0);
        *c += 1;
        let ctx = EventContext {
            traffic_window_count: *c,
            unit_constraints: book.at(sender, e.message.msg_id),
        };
        out.push(project(e, level, &ctx)?);
    }
    Ok(out)
}

/// One detector attached to one scope at one information level.
pub struct Branch {
    pub scope: ObserverScope,
    pub level: u8,
    detector: Box<dyn Detector>,
    training: Vec<Observation>,
    counts: BTreeMap<(u32, AgentId), u64>,
    trained: bool,
    disabled: bool,
    flagged: BTreeSet<AgentId>,
}

impl Branch {
    pub fn new(scope: ObserverScope, level: u8, detector: Box<dyn Detector>) -> Self {
        Branch {
            scope,
            level,
            detector,
            training: Vec::new(),
            counts: BTreeMap::new(),
            trained: false,
            disabled: false,
            flagged: BTreeSet::new(),
        }
    }

    pub fn detector_name(&self) -> &'static str {
        self.detector.name()
    }

    /// Whether training failed and the branch stays silent.
    pub fn is_disabled(&self) -> bool {
        self.disabled
    }

    fn project(&mut self, e: &TraceEvent, book: &ConstraintBook) -> Result<Observation> {
        let sender = e.message.sender.agent().expect("observable");
        let c = self.counts.entry((e.interval, sender)).or_insert(0);
        *c += 1;
        let ctx = EventContext {
            traffic_window_count: *c,
            unit_constraints: book.at(sender, e.message.msg_id),
        };
        project(e, self.level, &ctx)
    }

    fn ensure_trained(&mut self) {
        if !self.trained {
            self.trained = true;
            if self.detector.train(&self.training).is_err() {
                self.disabled = true;
            }
            self.training.clear();
        }
    }

    fn report(&mut self, f: Flag) -> Option<AnomalyReport> {
        debug_assert!(f.score >= self.detector.threshold());
        self.flagged.insert(f.suspect).then(|| AnomalyReport {
            suspect: f.suspect,
            first_flagged_interval: f.interval,
            score: f.score,
            detector: self.detector.name().to_string(),
            scope: self.scope.clone(),
        })
    }

    /// Feeds one completed interval. Returns reports about newly flagged
    /// senders.
    fn process<'a>(
        &mut self,
        interval: u32,
        incident: u32,
        events: impl IntoIterator<Item = &'a TraceEvent>,
        book: &ConstraintBook,
    ) -> Result<Vec<AnomalyReport>> {
        let mut obs = Vec::new();
        for e in events {
            if is_observable(e) && self.scope.contains(e.message.sender.agent().expect("observable")) {
                obs.push(self.project(e, book)?);
            }
        }
        if interval < incident {
            self.training.extend(obs);
            return Ok(Vec::new());
        }
        self.ensure_trained();
        if self.disabled {
            return Ok(Vec::new());
        }
        let mut flags = Vec::new();
        for o in &obs {
            flags.extend(self.detector.observe(o));
        }
        flags.extend(self.detector.finish_interval(interval));
        Ok(flags.into_iter().filter_map(|f| self.report(f)).collect())
    }
}

/// Runs one detector over a training window and a detection stream.
pub fn run_detector(
    detector: &mut dyn Detector,
    training: &[Observation],
    detection: &[Observation],
    scope: &ObserverScope,
) -> Result<Vec<AnomalyReport>> {
    detector.train(training)?;
    let name = detector.name().to_string();
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    let mut push = |f: Flag, out: &mut Vec<AnomalyReport>| {
        if seen.insert(f.suspect) {
            out.push(AnomalyReport {
                suspect: f.suspect,
                first_flagged_interval: f.interval,
                score: f.score,
                detector: name.clone(),
                scope: scope.clone(),
            });
        }
    };
    let mut current: Option<u32> = None;
    for o in detection {
        if let Some(c) = current.filter(|c| *c != o.interval) {
            for f in detector.finish_interval(c) {
                push(f, &mut out);
            }
        }
        current = Some(o.interval);
        if let Some(f) = detector.observe(o) {
            push(f, &mut out);
        }
    }
    if let Some(c) = current {
        for f in detector.finish_interval(c) {
            push(f, &mut out);
        }
    }
    Ok(out)
}

/// Flags senders whose values match no feasible schedule.
pub fn detect_constraint(observations: &[Observation], scope: &ObserverScope, epsilon: f64) -> Vec<AnomalyReport> {
    run_detector(&mut ConstraintDetector::new(epsilon), &[], observations, scope).unwrap_or_default()
}

/// Median/MAD value detector trained on `training`.
pub fn detect_statistical(
    training: &[Observation],
    observations: &[Observation],
    scope: &ObserverScope,
    params: DetectorParams,
) -> Result<Vec<AnomalyReport>> {
    run_detector(&mut StatisticalDetector::new(params), training, observations, scope)
}

/// Rate and delay detector. An empty training window yields no reports.
pub fn detect_traffic(
    training: &[Observation],
    observations: &[Observation],
    scope: &ObserverScope,
    params: DetectorParams,
) -> Vec<AnomalyReport> {
    run_detector(&mut TrafficDetector::new(params), training, observations, scope).unwrap_or_default()
}

/// Keeps the earliest report per suspect; ties keep the first seen.
pub fn dedup_reports(reports: impl IntoIterator<Item = AnomalyReport>) -> Vec<AnomalyReport> {
    let mut best: BTreeMap<AgentId, AnomalyReport> = BTreeMap::new();
    for r in reports {
        match best.get(&r.suspect) {
            Some(b) if b.first_flagged_interval <= r.first_flagged_interval => {}
            _ => {
                best.insert(r.suspect, r);
            }
        }
    }
    let mut out: Vec<_> = best.into_values().collect();
    out.sort_by_key(|r| (r.first_flagged_interval, r.suspect));
    out
}

/// Static description of the observer layer of a run.
#[derive(Debug, Clone)]
pub struct ObserverSetup {
    pub arch: ObserverArch,
    pub level: u8,
    pub incident_interval: u32,
    pub seed: u64,
    pub agents: Vec<(AgentId, UnitType)>,
    pub params: DetectorParams,
}

impl ObserverSetup {
    pub fn from_config(cfg: &ScenarioConfig) -> Self {
        ObserverSetup {
            arch: cfg.observer_arch,
            level: cfg.info_level,
            incident_interval: cfg.incident_interval,
            seed: cfg.seed,
            agents: cfg.agents.iter().map(|a| (a.agent_id, a.unit.unit_type)).collect(),
            params: DetectorParams::default(),
        }
    }

    fn ids(&self) -> Vec<AgentId> {
        self.agents.iter().map(|(a, _)| *a).collect()
    }

    /// Scopes of a single-level architecture.
    pub fn scopes(&self, arch: ObserverArch) -> Vec<ObserverScope> {
        match arch {
            ObserverArch::Centralized => vec![ObserverScope::centralized(self.ids())],
            ObserverArch::Decentralized | ObserverArch::MultiLeveled => {
                self.ids().into_iter().map(ObserverScope::decentralized).collect()
            }
            ObserverArch::GroupedByType => UnitType::ALL
                .iter()
                .map(|t| ObserverScope::by_type(*t, &self.agents))
                .filter(|s| !s.members.is_empty())
                .collect(),
            ObserverArch::GroupedRandom => random_groups(&self.ids(), RANDOM_GROUPS, self.seed),
        }
    }

    fn detectors_for(&self, level: u8) -> Vec<Box<dyn Detector>> {
        let mut d: Vec<Box<dyn Detector>> = vec![Box::new(TrafficDetector::new(self.params))];
        if level >= 3 {
            d.push(Box::new(StatisticalDetector::new(self.params)));
        }
        if level >= 4 {
            d.push(Box::new(ConstraintDetector::new(self.params.epsilon)));
        }
        d
    }

    pub fn branches(&self) -> Vec<Branch> {
        let mut out = Vec::new();
        if self.arch == ObserverArch::MultiLeveled {
            let central = ObserverScope::centralized(self.ids());
            out.push(Branch::new(central, 2, Box::new(TrafficDetector::new(self.params))));
            for scope in self.scopes(ObserverArch::Decentralized) {
                out.push(Branch::new(scope.clone(), 4, Box::new(StatisticalDetector::new(self.params))));
                out.push(Branch::new(scope, 4, Box::new(ConstraintDetector::new(self.params.epsilon))));
            }
            return out;
        }
        for scope in self.scopes(self.arch) {
            for d in self.detectors_for(self.level) {
                out.push(Branch::new(scope.clone(), self.level, d));
            }
        }
        out
    }
}

/// Incremental observer layer: fed one completed interval at a time.
pub struct ObserverEngine {
    branches: Vec<Branch>,
    incident: u32,
    raw: Vec<AnomalyReport>,
    reported: BTreeSet<AgentId>,
}

impl ObserverEngine {
    pub fn new(setup: &ObserverSetup) -> Self {
        ObserverEngine::from_branches(setup.branches(), setup.incident_interval)
    }

    pub fn from_branches(branches: Vec<Branch>, incident: u32) -> Self {
        ObserverEngine {
            branches,
            incident,
            raw: Vec::new(),
            reported: BTreeSet::new(),
        }
    }

    pub fn branches(&self) -> &[Branch] {
        &self.branches
    }

    /// Processes the events of one finished interval and returns reports
    /// about suspects not reported before.
    pub fn process_interval<'a>(
        &mut self,
        interval: u32,
        events: impl IntoIterator<Item = &'a TraceEvent> + Clone,
        book: &ConstraintBook,
    ) -> Result<Vec<AnomalyReport>> {
        let mut new = Vec::new();
        for b in &mut self.branches {
            new.extend(b.process(interval, self.incident, events.clone(), book)?);
        }
        self.raw.extend(new.iter().cloned());
        let fresh: Vec<AnomalyReport> = dedup_reports(new)
            .into_iter()
            .filter(|r| !self.reported.contains(&r.suspect))
            .collect();
        self.reported.extend(fresh.iter().map(|r| r.suspect));
        Ok(fresh)
    }

    pub fn retire(&mut self, agent: AgentId) {
        for b in &mut self.branches {
            b.detector.retire(agent);
        }
    }

    /// Every first flag of every branch.
    pub fn raw_reports(&self) -> &[AnomalyReport] {
        &self.raw
    }

    /// Earliest report per suspect.
    pub fn reports(&self) -> Vec<AnomalyReport> {
        dedup_reports(self.raw.iter().cloned())
    }
}

/// Runs an observer setup over a complete trace.
pub fn run_observer(trace: &EventTrace, setup: &ObserverSetup, book: &ConstraintBook) -> Result<Vec<AnomalyReport>> {
    run_branches(trace, setup.branches(), setup.incident_interval, book)
}

/// Replays a complete trace through an arbitrary set of branches.
pub fn run_branches(
    trace: &EventTrace,
    branches: Vec<Branch>,
    incident: u32,
    book: &ConstraintBook,
) -> Result<Vec<AnomalyReport>> {
    let mut engine = ObserverEngine::from_branches(branches, incident);
    let mut by_interval: BTreeMap<u32, Vec<&TraceEvent>> = BTreeMap::new();
    for e in &trace.events {
        by_interval.entry(e.interval).or_default().push(e);
    }
    for (i, evs) in by_interval {
        engine.process_interval(i, evs.iter().copied(), book)?;
    }
    Ok(engine.reports())
}

/// Centralized traffic detection at level 2 combined with decentralized
/// value and constraint detection at level 4.
pub fn run_multi_leveled(trace: &EventTrace, setup: &ObserverSetup, book: &ConstraintBook) -> Result<Vec<AnomalyReport>> {
    if setup.arch != ObserverArch::MultiLeveled {
        return Err(Error::InvalidArgument(format!("observer architecture is {:?}", setup.arch)));
    }
    run_observer(trace, setup, book)
}

/// Writes reports as one JSON object per line.
pub fn write_reports_jsonl(reports: &[AnomalyReport], mut w: impl std::io::Write) -> std::io::Result<()> {
    for r in reports {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

/// Robust location and spread of a sample: median and MAD.
pub(crate) fn median_mad(values: &[f64]) -> (f64, f64) {
    let med = median(values);
    let dev: Vec<f64> = values.iter().map(|v| (v - med).abs()).collect();
    (med, median(&dev))
}

pub(crate) fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}
