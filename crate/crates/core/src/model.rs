//! Domain types shared by every other module: agents, units, schedules and
//! the scenario configuration.

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::rng::{self, Stream};

/// Identifier of a negotiating agent. Rendered as `A<n>`; ordering follows `n`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct AgentId(pub u32);

impl fmt::Display for AgentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "A{}", self.0)
    }
}

impl FromStr for AgentId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        s.strip_prefix('A')
            .and_then(|n| n.parse().ok())
            .map(AgentId)
            .ok_or_else(|| Error::Parse(format!("bad agent id {s:?}")))
    }
}

impl Serialize for AgentId {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for AgentId {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Active-power vector in kW, one value per slot of a negotiation.
/// Production is negative, consumption positive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(transparent)]
pub struct Schedule(pub Vec<f64>);

impl Schedule {
    pub fn zeros(len: usize) -> Self {
        Schedule(vec![0.0; len])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    /// Element-wise sum. Lengths must match.
    pub fn plus(&self, other: &Schedule) -> Schedule {
        debug_assert_eq!(self.len(), other.len());
        Schedule(self.0.iter().zip(&other.0).map(|(a, b)| a + b).collect())
    }

    pub fn add_assign(&mut self, other: &Schedule) {
        debug_assert_eq!(self.len(), other.len());
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            *a += b;
        }
    }
}

impl From<Vec<f64>> for Schedule {
    fn from(v: Vec<f64>) -> Self {
        Schedule(v)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum UnitType {
    Wind,
    PV,
    Battery,
    Household,
}

impl UnitType {
    pub const ALL: [UnitType; 4] = [UnitType::Wind, UnitType::PV, UnitType::Battery, UnitType::Household];
}

impl fmt::Display for UnitType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            UnitType::Wind => "Wind",
            UnitType::PV => "PV",
            UnitType::Battery => "Battery",
            UnitType::Household => "Household",
        };
        f.write_str(s)
    }
}

/// A distributed energy resource and its flexibility: the finite set of
/// schedules it can be asked to run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnitModel {
    pub unit_id: String,
    pub unit_type: UnitType,
    pub feasible_schedules: Vec<Schedule>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentSpec {
    pub agent_id: AgentId,
    pub unit: UnitModel,
    #[serde(default)]
    pub is_compromised: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TopologyParams {
    pub k: usize,
    pub rewire_probability: f64,
}

impl Default for TopologyParams {
    fn default() -> Self {
        TopologyParams {
            k: 4,
            rewire_probability: 0.1,
        }
    }
}

/// Uniform integer message delay, in ticks, inclusive on both ends.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DelayModel {
    pub min_ticks: u64,
    pub max_ticks: u64,
}

impl Default for DelayModel {
    fn default() -> Self {
        DelayModel {
            min_ticks: 1,
            max_ticks: 4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum AttackMode {
    Scale,
    Offset,
    Replace,
}

/// False-data-injection parameters for compromised agents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub mode: AttackMode,
    pub scale_factor: f64,
    pub offset_kw: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub replacement: Option<Schedule>,
    pub active_from_interval: u32,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            mode: AttackMode::Scale,
            scale_factor: 3.0,
            offset_kw: 0.0,
            replacement: None,
            active_from_interval: DEFAULT_INCIDENT_INTERVAL,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ObserverArch {
    Centralized,
    Decentralized,
    GroupedByType,
    GroupedRandom,
    MultiLeveled,
}

impl ObserverArch {
    pub const ALL: [ObserverArch; 5] = [
        ObserverArch::Centralized,
        ObserverArch::Decentralized,
        ObserverArch::GroupedByType,
        ObserverArch::GroupedRandom,
        ObserverArch::MultiLeveled,
    ];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ControllerArch {
    None,
    Centralized,
    Decentralized,
    MultiLeveled,
}

impl ControllerArch {
    pub const ALL: [ControllerArch; 4] = [
        ControllerArch::None,
        ControllerArch::Centralized,
        ControllerArch::Decentralized,
        ControllerArch::MultiLeveled,
    ];
}

/// When controllers act on reports.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum ControlTiming {
    /// Reports are held until the configured control interval.
    #[default]
    Gated,
    /// Reports are acted on at the start of the interval after detection.
    Immediate,
}

macro_rules! arch_from_str {
    ($ty:ident { $($name:literal => $variant:ident),* $(,)? }) => {
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                fmt::Debug::fmt(self, f)
            }
        }

        impl FromStr for $ty {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s.to_ascii_lowercase().as_str() {
                    $($name => Ok($ty::$variant),)*
                    _ => Err(Error::Parse(format!("unknown {} {s:?}", stringify!($ty)))),
                }
            }
        }
    };
}

arch_from_str!(ObserverArch {
    "centralized" => Centralized,
    "decentralized" => Decentralized,
    "groupedbytype" => GroupedByType,
    "grouped-by-type" => GroupedByType,
    "groupedrandom" => GroupedRandom,
    "grouped-random" => GroupedRandom,
    "multileveled" => MultiLeveled,
    "multi-leveled" => MultiLeveled,
});

arch_from_str!(ControllerArch {
    "none" => None,
    "centralized" => Centralized,
    "decentralized" => Decentralized,
    "multileveled" => MultiLeveled,
    "multi-leveled" => MultiLeveled,
});

pub const DEFAULT_INCIDENT_INTERVAL: u32 = 20;
pub const DEFAULT_CONTROL_INTERVAL: u32 = 36;
pub const DEFAULT_NUM_INTERVALS: u32 = 60;
pub const DEFAULT_SCHEDULE_LEN: usize = 4;
pub const DEFAULT_SCHEDULES_PER_UNIT: usize = 20;
pub const DEFAULT_TICK_CAP: u64 = 10_000;

fn default_tick_cap() -> u64 {
    DEFAULT_TICK_CAP
}

/// Complete description of one simulation run. Immutable once validated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub seed: u64,
    pub num_intervals: u32,
    pub intervals_per_negotiation: usize,
    pub incident_interval: u32,
    pub control_interval: u32,
    pub info_level: u8,
    pub observer_arch: ObserverArch,
    pub controller_arch: ControllerArch,
    #[serde(default)]
    pub control_timing: ControlTiming,
    /// Hard cap on ticks a single interval may take before it is declared
    /// non-convergent.
    #[serde(default = "default_tick_cap")]
    pub max_ticks_per_interval: u64,
    /// Aggregate power profile the community aims for; zeros when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<Schedule>,
    pub topology_params: TopologyParams,
    pub delay_model: DelayModel,
    pub attack: AttackConfig,
    pub agents: Vec<AgentSpec>,
}

impl ScenarioConfig {
    pub fn target(&self) -> Schedule {
        self.target
            .clone()
            .unwrap_or_else(|| Schedule::zeros(self.intervals_per_negotiation))
    }

    pub fn agent_ids(&self) -> Vec<AgentId> {
        self.agents.iter().map(|a| a.agent_id).collect()
    }

    pub fn compromised(&self) -> BTreeSet<AgentId> {
        self.agents
            .iter()
            .filter(|a| a.is_compromised)
            .map(|a| a.agent_id)
            .collect()
    }

    /// Same scenario with every agent honest.
    pub fn without_attack(&self) -> ScenarioConfig {
        let mut cfg = self.clone();
        for a in &mut cfg.agents {
            a.is_compromised = false;
        }
        cfg
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml()?).map_err(|e| Error::io(path, e))
    }
}

/// A single failed invariant, addressed by a dotted path into the config.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub path: String,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.path, self.message)
    }
}

/// Checks every scenario invariant and returns all violations found.
pub fn validate_scenario(cfg: &ScenarioConfig) -> std::result::Result<(), Vec<Violation>> {
    let mut v = Vec::new();
    let mut push = |path: &str, message: &str| {
        v.push(Violation {
            path: path.to_string(),
            message: message.to_string(),
        })
    };

    if cfg.intervals_per_negotiation == 0 {
        push("intervals_per_negotiation", "must be at least 1");
    }
    if cfg.incident_interval == 0 {
        push("incident_interval", "must be positive");
    }
    if cfg.control_interval <= cfg.incident_interval {
        push("control_interval", "control before incident");
    }
    if cfg.num_intervals <= cfg.control_interval {
        push("num_intervals", "must exceed control_interval");
    }
    if !(1..=4).contains(&cfg.info_level) {
        push("info_level", "must be in 1..=4");
    }
    if cfg.max_ticks_per_interval == 0 {
        push("max_ticks_per_interval", "must be positive");
    }
    if cfg.delay_model.min_ticks == 0 {
        push("delay_model.min_ticks", "must be at least 1");
    }
    if cfg.delay_model.min_ticks > cfg.delay_model.max_ticks {
        push("delay_model", "min_ticks exceeds max_ticks");
    }
    if let Some(t) = &cfg.target {
        if t.len() != cfg.intervals_per_negotiation {
            push("target", "length differs from intervals_per_negotiation");
        }
        if !t.is_finite() {
            push("target", "non-finite value");
        }
    }

    let n = cfg.agents.len();
    let tp = cfg.topology_params;
    if n == 0 {
        push("agents", "no agents");
    }
    if !tp.k.is_multiple_of(2) || tp.k < 2 {
        push("topology_params.k", "must be even and at least 2");
    }
    if n > 0 && tp.k >= n {
        push("topology_params.k", "must be smaller than the number of agents");
    }
    if !(0.0..=1.0).contains(&tp.rewire_probability) {
        push("topology_params.rewire_probability", "must lie in [0, 1]");
    }

    let mut agent_ids = BTreeSet::new();
    let mut unit_ids = BTreeSet::new();
    for (i, a) in cfg.agents.iter().enumerate() {
        let base = format!("agents[{i}]");
        if !agent_ids.insert(a.agent_id) {
            push(&format!("{base}.agent_id"), "duplicate agent id");
        }
        if !unit_ids.insert(a.unit.unit_id.as_str()) {
            push(&format!("{base}.unit.unit_id"), "duplicate unit id");
        }
        if a.unit.feasible_schedules.is_empty() {
            push(&format!("{base}.unit.feasible_schedules"), "feasible_schedules empty");
        }
        for (j, s) in a.unit.feasible_schedules.iter().enumerate() {
            let path = format!("{base}.unit.feasible_schedules[{j}]");
            if s.len() != cfg.intervals_per_negotiation {
                push(&path, "length differs from intervals_per_negotiation");
            }
            if !s.is_finite() {
                push(&path, "non-finite value");
            }
        }
    }

    let atk = &cfg.attack;
    match atk.mode {
        AttackMode::Scale => {
            if !atk.scale_factor.is_finite() || (0.99..=1.01).contains(&atk.scale_factor) {
                push("attack.scale_factor", "scale attack is a no-op");
            }
        }
        AttackMode::Offset => {
            if !atk.offset_kw.is_finite() {
                push("attack.offset_kw", "non-finite offset");
            }
        }
        AttackMode::Replace => match &atk.replacement {
            None => push("attack.replacement", "replace mode requires a replacement schedule"),
            Some(r) if r.len() != cfg.intervals_per_negotiation || !r.is_finite() => {
                push("attack.replacement", "replacement must be a finite schedule of the negotiation length")
            }
            Some(_) => {}
        },
    }
    if atk.active_from_interval >= cfg.num_intervals.max(1) {
        push("attack.active_from_interval", "attack never becomes active");
    }

    if v.is_empty() {
        Ok(())
    } else {
        Err(v)
    }
}

/// Largest per-slot deviation of a feasible schedule from its unit's base profile.
pub const FLEX_KW: i32 = 2;

/// Range of base-profile magnitudes per unit type, in whole kW. Every
/// magnitude exceeds `FLEX_KW`, so flexing never flips a slot's sign.
fn base_magnitude(t: UnitType) -> (i32, i32) {
    match t {
        UnitType::Wind => (3, 5),
        UnitType::PV => (3, 5),
        UnitType::Battery => (4, 6),
        UnitType::Household => (7, 9),
    }
}

/// Generation is negative, consumption positive; a battery charges or
/// discharges per slot.
fn base_profile(t: UnitType, len: usize, rng: &mut impl Rng) -> Vec<i32> {
    let (lo, hi) = base_magnitude(t);
    (0..len)
        .map(|_| {
            let m = rng.gen_range(lo..=hi);
            match t {
                UnitType::Wind | UnitType::PV => -m,
                UnitType::Household => m,
                UnitType::Battery if rng.gen_bool(0.5) => m,
                UnitType::Battery => -m,
            }
        })
        .collect()
}

/// Nudges base profiles by whole kW, within each type's magnitude range,
/// until every slot's community sum is within 1 kW of zero or no unit can
/// move further.
fn balance_bases(types: &[UnitType], bases: &mut [Vec<i32>], rng: &mut impl Rng) {
    let len = bases.first().map_or(0, Vec::len);
    for t in 0..len {
        loop {
            let sum: i32 = bases.iter().map(|b| b[t]).sum();
            if sum.abs() <= 1 {
                break;
            }
            let step = -sum.signum();
            let movable: Vec<usize> = (0..bases.len())
                .filter(|&i| {
                    let (lo, hi) = base_magnitude(types[i]);
                    let (v, w) = (bases[i][t], bases[i][t] + step);
                    v.signum() == w.signum() && (lo..=hi).contains(&w.abs())
                })
                .collect();
            let Some(&i) = movable.choose(rng) else {
                break;
            };
            bases[i][t] += step;
        }
    }
}

/// `count` distinct schedules within `FLEX_KW` of a base profile. The two
/// bounding profiles (every slot fully up or fully down) are always present.
fn sample_feasible_set(base: &[i32], count: usize, rng: &mut impl Rng) -> Vec<Schedule> {
    let distinct_max = (2 * FLEX_KW as usize + 1).saturating_pow(base.len() as u32);
    let count = count.clamp(2, distinct_max);
    let shifted = |d: i32| Schedule(base.iter().map(|b| f64::from(b + d)).collect());
    let mut out: Vec<Schedule> = vec![shifted(-FLEX_KW), shifted(FLEX_KW)];
    while out.len() < count {
        let s = Schedule(
            base.iter()
                .map(|b| f64::from(b + rng.gen_range(-FLEX_KW..=FLEX_KW)))
                .collect(),
        );
        if !out.contains(&s) {
            out.push(s);
        }
    }
    out
}

/// Builds the default community: unit types assigned round-robin, seeded
/// feasible sets, and one compromised agent.
pub fn generate_default_scenario(seed: u64, n_agents: usize) -> Result<ScenarioConfig> {
    if n_agents < 4 {
        return Err(Error::InvalidArgument(format!(
            "need at least 4 agents, got {n_agents}"
        )));
    }
    let mut rng = rng::stream(seed, Stream::Scenario);
    let types: Vec<UnitType> = (0..n_agents).map(|i| UnitType::ALL[i % UnitType::ALL.len()]).collect();
    let mut bases: Vec<Vec<i32>> = types
        .iter()
        .map(|t| base_profile(*t, DEFAULT_SCHEDULE_LEN, &mut rng))
        .collect();
    balance_bases(&types, &mut bases, &mut rng);
    let agents: Vec<AgentSpec> = (0..n_agents)
        .map(|i| {
            let unit_type = types[i];
            let feasible_schedules = sample_feasible_set(&bases[i], DEFAULT_SCHEDULES_PER_UNIT, &mut rng);
            AgentSpec {
                agent_id: AgentId(i as u32),
                unit: UnitModel {
                    unit_id: format!("{}-{i}", unit_type.to_string().to_lowercase()),
                    unit_type,
                    feasible_schedules,
                },
                is_compromised: false,
            }
        })
        .collect();
    let mut agents = agents;
    let ids: Vec<usize> = (0..n_agents).collect();
    let compromised = *ids.choose(&mut rng).expect("n_agents >= 4");
    agents[compromised].is_compromised = true;

    Ok(ScenarioConfig {
        seed,
        num_intervals: DEFAULT_NUM_INTERVALS,
        intervals_per_negotiation: DEFAULT_SCHEDULE_LEN,
        incident_interval: DEFAULT_INCIDENT_INTERVAL,
        control_interval: DEFAULT_CONTROL_INTERVAL,
        info_level: 4,
        observer_arch: ObserverArch::MultiLeveled,
        controller_arch: ControllerArch::Centralized,
        control_timing: ControlTiming::Gated,
        max_ticks_per_interval: DEFAULT_TICK_CAP,
        target: None,
        topology_params: TopologyParams {
            k: if n_agents > 4 { 4 } else { 2 },
            rewire_probability: 0.1,
        },
        delay_model: DelayModel::default(),
        attack: AttackConfig::default(),
        agents,
    })
}
