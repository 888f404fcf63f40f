//! Run orchestration: negotiation every interval, the observer after each
//! interval and controller reactions at interval starts.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use crate::controller::{self, ControlAction, ControllerState};
use crate::error::{Error, Result};
use crate::kernel::{Endpoint, EventTrace, Handler, Kernel, MessageKind, NegotiationMessage, Tick};
use crate::metrics::{classify_phase, IntervalRecord};
use crate::model::{validate_scenario, AgentId, ControlTiming, ControllerArch, ScenarioConfig};
use crate::negotiation::{AttackHook, Cluster, NegotiationAgent, NegotiationOutcome};
use crate::observer::{AnomalyReport, ConstraintBook, ObserverEngine, ObserverSetup, ScopeKind};
use crate::rng::{self, Stream};
use crate::topology::{build_small_world, Topology};

/// Knobs that are not part of the scenario.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SimOptions {
    /// When false the central controller is cut off from the bus.
    pub central_reachable: bool,
}

impl Default for SimOptions {
    fn default() -> Self {
        SimOptions { central_reachable: true }
    }
}

/// Everything a finished run produced.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub records: Vec<IntervalRecord>,
    pub outcomes: Vec<NegotiationOutcome>,
    pub trace: EventTrace,
    /// Earliest report per suspect.
    pub reports: Vec<AnomalyReport>,
    /// First flag of every detector branch.
    pub raw_reports: Vec<AnomalyReport>,
    pub actions: Vec<ControlAction>,
    pub propagation: Vec<controller::Propagation>,
    pub final_blacklist: BTreeSet<AgentId>,
    pub final_topology: Topology,
    /// Tick at which each interval's negotiation was started.
    pub interval_starts: Vec<Tick>,
    /// Tick at which the controller first acted.
    pub control_tick: Option<Tick>,
    pub degraded: bool,
    pub compromised: BTreeSet<AgentId>,
    /// Feasible-set size of every agent at the end of the run.
    pub feasible_sizes: BTreeMap<AgentId, usize>,
}

impl RunOutcome {
    /// Tick at which the last agent learned about `suspect`.
    pub fn gossip_completion(&self, suspect: AgentId) -> Option<Tick> {
        self.propagation.iter().filter(|p| p.suspect == suspect).map(|p| p.tick).max()
    }
}

struct World {
    cluster: Cluster,
    control: ControllerState,
    book: ConstraintBook,
    fault: Option<Error>,
}

impl Handler for World {
    fn deliver(&mut self, kernel: &mut Kernel, m: &NegotiationMessage) {
        match m.kind {
            MessageKind::WorkingMemoryUpdate => self.cluster.on_memory(kernel, m),
            MessageKind::BlacklistNotice => controller::handle_notice(m, kernel, &mut self.cluster, &mut self.control),
            MessageKind::TopologyPush => controller::handle_push(m, kernel, &mut self.cluster, &mut self.control),
            MessageKind::TaskHandover => controller::handle_handover(m, kernel, &mut self.cluster, &mut self.book),
            MessageKind::EscalationReport => {
                if let Err(e) = controller::handle_escalation(m, kernel, &mut self.cluster, &mut self.control) {
                    self.fault.get_or_insert(e);
                }
            }
        }
    }
}

/// Agent hosting the local observer and controller for `suspect`: its
/// lowest-id neighbour.
pub fn host_of(cluster: &Cluster, suspect: AgentId) -> Option<AgentId> {
    cluster
        .agents
        .values()
        .find(|a| a.id != suspect && a.neighbors.contains(&suspect))
        .map(|a| a.id)
}

pub struct Simulation {
    cfg: ScenarioConfig,
    kernel: Kernel,
    world: World,
    observer: ObserverEngine,
    initiator_rng: ChaCha8Rng,
    pending: Vec<AnomalyReport>,
    records: Vec<IntervalRecord>,
    outcomes: Vec<NegotiationOutcome>,
    interval_starts: Vec<Tick>,
    control_tick: Option<Tick>,
    degraded: bool,
}

impl Simulation {
    pub fn new(cfg: &ScenarioConfig, options: SimOptions) -> Result<Self> {
        validate_scenario(cfg).map_err(Error::Validation)?;
        let ids = cfg.agent_ids();
        let topology = build_small_world(&ids, cfg.topology_params.k, cfg.topology_params.rewire_probability, cfg.seed)?;
        let mut cluster = Cluster::new(
            cfg.agents.iter().map(|a| NegotiationAgent::new(a.agent_id, a.unit.clone())),
            cfg.target(),
        );
        cluster.apply_topology(&topology);
        let compromised = cfg.compromised();
        if !compromised.is_empty() {
            cluster.attack = Some(AttackHook {
                compromised,
                config: cfg.attack.clone(),
            });
        }
        let book = ConstraintBook::new(cfg.agents.iter().map(|a| (a.agent_id, a.unit.feasible_schedules.clone())));
        let mut kernel = Kernel::new(cfg.seed, cfg.delay_model);
        if !options.central_reachable {
            kernel.exclude(Endpoint::Central);
        }
        Ok(Simulation {
            cfg: cfg.clone(),
            kernel,
            world: World {
                cluster,
                control: ControllerState::new(cfg.controller_arch, topology),
                book,
                fault: None,
            },
            observer: ObserverEngine::new(&ObserverSetup::from_config(cfg)),
            initiator_rng: rng::stream(cfg.seed, Stream::Initiator),
            pending: Vec::new(),
            records: Vec::new(),
            outcomes: Vec::new(),
            interval_starts: Vec::new(),
            control_tick: None,
            degraded: false,
        })
    }

    pub fn cluster(&self) -> &Cluster {
        &self.world.cluster
    }

    pub fn kernel(&self) -> &Kernel {
        &self.kernel
    }

    fn control_allowed(&self, interval: u32) -> bool {
        match self.cfg.control_timing {
            ControlTiming::Gated => interval >= self.cfg.control_interval,
            ControlTiming::Immediate => true,
        }
    }

    fn run_to_quiescence(&mut self) -> Result<()> {
        self.kernel
            .set_tick_cap(Some(self.kernel.now() + self.cfg.max_ticks_per_interval));
        self.kernel.run_to_quiescence(&mut self.world)?;
        if let Some(e) = self.world.fault.take() {
            if matches!(e, Error::DegradedSystem(_)) {
                self.degraded = true;
            } else {
                return Err(e);
            }
        }
        Ok(())
    }

    fn react(&mut self) -> Result<()> {
        let pending = std::mem::take(&mut self.pending);
        if pending.is_empty() {
            return Ok(());
        }
        let w = &mut self.world;
        let before = w.control.actions.len();
        let mut central_acted = false;
        for r in &pending {
            let to_central = match self.cfg.controller_arch {
                ControllerArch::None => continue,
                ControllerArch::Centralized => true,
                ControllerArch::Decentralized => false,
                ControllerArch::MultiLeveled => !matches!(r.scope.kind, ScopeKind::Decentralized(_)),
            };
            if to_central {
                match controller::centralized_react(r, &mut self.kernel, &mut w.cluster, &mut w.control) {
                    Ok(a) => central_acted |= !a.is_empty(),
                    Err(Error::DegradedSystem(_)) => self.degraded = true,
                    Err(e) => return Err(e),
                }
                continue;
            }
            let Some(host) = host_of(&w.cluster, r.suspect) else {
                continue;
            };
            if self.cfg.controller_arch == ControllerArch::MultiLeveled {
                controller::multi_leveled_react(r, host, &mut self.kernel, &mut w.cluster, &mut w.control);
            } else {
                controller::decentralized_react(r, host, &mut self.kernel, &mut w.cluster, &mut w.control);
            }
        }
        if w.control.actions.len() > before {
            self.control_tick.get_or_insert(self.kernel.now());
        }
        // The central controller reconfigures before negotiation resumes.
        if central_acted {
            self.run_to_quiescence()?;
        }
        Ok(())
    }

    fn choose_initiator(&mut self) -> Option<AgentId> {
        let c = &self.world.cluster;
        let shunned: BTreeSet<AgentId> = c
            .agents
            .values()
            .filter(|a| !c.is_compromised(a.id))
            .flat_map(|a| a.blacklist.iter().copied())
            .collect();
        let eligible: Vec<AgentId> = c
            .agents
            .values()
            .filter(|a| !a.feasible().is_empty())
            .filter(|a| !shunned.contains(&a.id) && !self.kernel.is_excluded(Endpoint::Agent(a.id)))
            .map(|a| a.id)
            .collect();
        eligible.choose(&mut self.initiator_rng).copied()
    }

    fn snapshot(&self) -> BTreeMap<AgentId, (BTreeSet<AgentId>, usize)> {
        self.world
            .cluster
            .agents
            .values()
            .map(|a| (a.id, (a.neighbors.clone(), a.units().len())))
            .collect()
    }

    /// Runs one interval: control actions, negotiation, observation.
    pub fn step(&mut self, interval: u32) -> Result<IntervalRecord> {
        self.kernel.set_interval(interval);
        self.world.cluster.begin_interval(interval, self.kernel.now());
        let before = self.snapshot();
        if self.cfg.controller_arch != ControllerArch::None && self.control_allowed(interval) {
            self.react()?;
        }

        self.world.cluster.mark_start(self.kernel.now());
        self.interval_starts.push(self.kernel.now());
        if let Some(init) = self.choose_initiator() {
            self.world.cluster.initiate(&mut self.kernel, init);
        }
        self.run_to_quiescence()?;

        let outcome = self.world.cluster.outcome(&self.kernel);
        let record = IntervalRecord {
            interval,
            convergence_ticks: outcome.convergence_ticks,
            solution_quality: outcome.realized_objective,
            message_count: outcome.message_count,
            phase: classify_phase(interval, &self.cfg)?,
        };
        self.outcomes.push(outcome);
        self.records.push(record.clone());

        // Baselines of agents whose neighbourhood or units changed no longer apply.
        let after = self.snapshot();
        for (id, state) in &after {
            if before.get(id) != Some(state) {
                self.observer.retire(*id);
            }
        }
        let events: Vec<_> = self.kernel.trace().interval(interval).collect();
        let fresh = self
            .observer
            .process_interval(interval, events.iter().copied(), &self.world.book)?;
        if self.cfg.controller_arch != ControllerArch::None {
            self.pending.extend(fresh);
        }
        self.kernel.advance_to(self.kernel.now() + 1);
        Ok(record)
    }

    pub fn run(mut self) -> Result<RunOutcome> {
        for i in 0..self.cfg.num_intervals {
            self.step(i)?;
        }
        let final_blacklist = controller::final_blacklist(&self.world.control, &self.world.cluster);
        let feasible_sizes = self
            .world
            .cluster
            .agents
            .values()
            .map(|a| (a.id, a.feasible().len()))
            .collect();
        Ok(RunOutcome {
            records: self.records,
            outcomes: self.outcomes,
            trace: self.kernel.into_trace(),
            reports: self.observer.reports(),
            raw_reports: self.observer.raw_reports().to_vec(),
            actions: self.world.control.actions,
            propagation: self.world.control.propagation,
            final_blacklist,
            final_topology: self.world.control.topology,
            interval_starts: self.interval_starts,
            control_tick: self.control_tick,
            degraded: self.degraded || self.world.control.degraded,
            compromised: self.cfg.compromised(),
            feasible_sizes,
        })
    }
}

/// Validates and runs a scenario with default options.
pub fn run_scenario(cfg: &ScenarioConfig) -> Result<RunOutcome> {
    Simulation::new(cfg, SimOptions::default())?.run()
}
