//! Mitigation: local exclusion with blacklist gossip, central topology push
//! with task reassignment, and the escalating combination of both.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::{Endpoint, Kernel, NegotiationMessage, Outgoing, Payload, Tick};
use crate::model::{AgentId, ControllerArch};
use crate::negotiation::Cluster;
use crate::observer::{AnomalyReport, ConstraintBook};
use crate::topology::{rebuild_excluding, Topology};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case")]
pub enum ActionKind {
    ExcludeLocal { suspect: AgentId },
    BlacklistNotice { suspects: Vec<AgentId>, recipient: AgentId },
    TopologyPush { topology: Topology, excluded: Vec<AgentId> },
    TaskReassignment { unit_id: String, new_owner: AgentId },
    Escalate { suspect: AgentId },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Issuer {
    Central,
    Local(AgentId),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlAction {
    #[serde(flatten)]
    pub kind: ActionKind,
    pub issued_tick: Tick,
    pub issuer: Issuer,
}

/// Who told whom about which suspect, and when.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Propagation {
    pub from: Endpoint,
    pub to: AgentId,
    pub suspect: AgentId,
    pub tick: Tick,
}

/// Controller-side state of a run. Per-agent blacklists live with the agents.
#[derive(Debug, Clone)]
pub struct ControllerState {
    pub arch: ControllerArch,
    /// The central controller's view of the communication topology.
    pub topology: Topology,
    pub central_blacklist: BTreeSet<AgentId>,
    pub actions: Vec<ControlAction>,
    pub propagation: Vec<Propagation>,
    pub degraded: bool,
}

impl ControllerState {
    pub fn new(arch: ControllerArch, topology: Topology) -> Self {
        ControllerState {
            arch,
            topology,
            central_blacklist: BTreeSet::new(),
            actions: Vec::new(),
            propagation: Vec::new(),
            degraded: false,
        }
    }

    fn log(&mut self, kind: ActionKind, issued_tick: Tick, issuer: Issuer) -> ControlAction {
        let a = ControlAction {
            kind,
            issued_tick,
            issuer,
        };
        self.actions.push(a.clone());
        a
    }

    /// Tick at which the last agent learned about `suspect`.
    pub fn gossip_completion(&self, suspect: AgentId) -> Option<Tick> {
        self.propagation.iter().filter(|p| p.suspect == suspect).map(|p| p.tick).max()
    }
}

/// Agent managing the fewest units; ties go to the lowest id.
pub fn reassign_task(candidates: &[(AgentId, usize)]) -> Result<AgentId> {
    candidates
        .iter()
        .min_by_key(|(id, load)| (*load, *id))
        .map(|(id, _)| *id)
        .ok_or_else(|| Error::DegradedSystem("no agent can take over the task".into()))
}

/// Union of the central blacklist and every agent's local one.
pub fn final_blacklist(state: &ControllerState, cluster: &Cluster) -> BTreeSet<AgentId> {
    let mut out = state.central_blacklist.clone();
    for a in cluster.agents.values() {
        if !cluster.is_compromised(a.id) {
            out.extend(a.blacklist.iter().copied());
        }
    }
    out
}

/// Excludes the suspect from the bus, pushes a rebuilt topology to every
/// remaining agent and hands the suspect's units to the least-loaded one.
pub fn centralized_react(
    report: &AnomalyReport,
    kernel: &mut Kernel,
    cluster: &mut Cluster,
    state: &mut ControllerState,
) -> Result<Vec<ControlAction>> {
    let suspect = report.suspect;
    if state.central_blacklist.contains(&suspect) {
        return Ok(Vec::new());
    }
    let mut excluded = state.central_blacklist.clone();
    excluded.insert(suspect);
    let remaining: Vec<AgentId> = state.topology.nodes().difference(&excluded).copied().collect();
    if remaining.len() < 2 {
        state.degraded = true;
        return Err(Error::DegradedSystem(format!(
            "excluding {suspect} would leave {} agent(s)",
            remaining.len()
        )));
    }
    let topology = rebuild_excluding(&state.topology, &excluded)?;
    state.central_blacklist.insert(suspect);
    state.topology = topology.clone();
    kernel.exclude(Endpoint::Agent(suspect));
    let now = kernel.now();
    let excluded_list: Vec<AgentId> = excluded.iter().copied().collect();

    let mut actions = vec![state.log(
        ActionKind::TopologyPush {
            topology: topology.clone(),
            excluded: excluded_list.clone(),
        },
        now,
        Issuer::Central,
    )];
    for a in &remaining {
        kernel.send(Outgoing::new(
            Endpoint::Central,
            *a,
            Payload::Topology {
                topology: topology.clone(),
                excluded: excluded_list.clone(),
            },
        ));
    }

    let units = cluster
        .agents
        .get_mut(&suspect)
        .map(|a| a.release_units())
        .unwrap_or_default();
    let mut loads: Vec<(AgentId, usize)> = remaining
        .iter()
        .map(|a| (*a, cluster.agents.get(a).map_or(0, |x| x.units().len())))
        .collect();
    for unit in units {
        let owner = reassign_task(&loads)?;
        if let Some(l) = loads.iter_mut().find(|(a, _)| *a == owner) {
            l.1 += 1;
        }
        actions.push(state.log(
            ActionKind::TaskReassignment {
                unit_id: unit.unit_id.clone(),
                new_owner: owner,
            },
            now,
            Issuer::Central,
        ));
        kernel.send(Outgoing::new(
            Endpoint::Central,
            owner,
            Payload::Handover {
                unit,
                previous_owner: suspect,
            },
        ));
    }
    Ok(actions)
}

/// Adds `suspect` to `at`'s blacklist, closes the link in both directions and
/// tells every remaining neighbour except `skip`. Returns nothing when the
/// suspect was already known.
fn exclude_and_notify(
    at: AgentId,
    suspect: AgentId,
    from: Endpoint,
    skip: Option<AgentId>,
    kernel: &mut Kernel,
    cluster: &mut Cluster,
    state: &mut ControllerState,
) -> Vec<ControlAction> {
    if at == suspect || cluster.is_compromised(at) {
        return Vec::new();
    }
    let target = cluster.target.clone();
    let Some(agent) = cluster.agents.get_mut(&at) else {
        return Vec::new();
    };
    if agent.blacklist.contains(&suspect) {
        return Vec::new();
    }
    agent.exclude(suspect, &target);
    let neighbors: Vec<AgentId> = agent.neighbors.iter().copied().filter(|n| Some(*n) != skip).collect();
    kernel.block(Endpoint::Agent(at), Endpoint::Agent(suspect));
    kernel.block(Endpoint::Agent(suspect), Endpoint::Agent(at));
    let now = kernel.now();
    state.propagation.push(Propagation {
        from,
        to: at,
        suspect,
        tick: now,
    });
    let issuer = Issuer::Local(at);
    let mut actions = vec![state.log(ActionKind::ExcludeLocal { suspect }, now, issuer)];
    for n in neighbors {
        kernel.send(Outgoing::new(at, n, Payload::Blacklist { suspects: vec![suspect] }));
        actions.push(state.log(
            ActionKind::BlacklistNotice {
                suspects: vec![suspect],
                recipient: n,
            },
            now,
            issuer,
        ));
    }
    cluster.refresh(kernel, at);
    actions
}

/// Local exclusion at `at` followed by blacklist notices to its neighbours.
pub fn decentralized_react(
    report: &AnomalyReport,
    at: AgentId,
    kernel: &mut Kernel,
    cluster: &mut Cluster,
    state: &mut ControllerState,
) -> Vec<ControlAction> {
    exclude_and_notify(at, report.suspect, Endpoint::Agent(at), None, kernel, cluster, state)
}

/// Local reaction plus an escalation to the central controller.
pub fn multi_leveled_react(
    report: &AnomalyReport,
    at: AgentId,
    kernel: &mut Kernel,
    cluster: &mut Cluster,
    state: &mut ControllerState,
) -> Vec<ControlAction> {
    let mut actions = decentralized_react(report, at, kernel, cluster, state);
    if actions.is_empty() {
        return actions;
    }
    kernel.send(Outgoing::new(at, Endpoint::Central, Payload::Escalation { report: report.clone() }));
    actions.push(state.log(
        ActionKind::Escalate {
            suspect: report.suspect,
        },
        kernel.now(),
        Issuer::Local(at),
    ));
    actions
}

/// A delivered blacklist notice: learn new suspects and forward them.
pub fn handle_notice(msg: &NegotiationMessage, kernel: &mut Kernel, cluster: &mut Cluster, state: &mut ControllerState) {
    let (Some(at), Payload::Blacklist { suspects }) = (msg.receiver.agent(), &msg.content) else {
        return;
    };
    let from = msg.sender.agent();
    for s in suspects {
        exclude_and_notify(at, *s, msg.sender, from, kernel, cluster, state);
    }
}

/// A delivered topology push. Stale generations are discarded.
pub fn handle_push(msg: &NegotiationMessage, kernel: &mut Kernel, cluster: &mut Cluster, state: &mut ControllerState) {
    let (Some(at), Payload::Topology { topology, excluded }) = (msg.receiver.agent(), &msg.content) else {
        return;
    };
    let target = cluster.target.clone();
    let Some(agent) = cluster.agents.get_mut(&at) else {
        return;
    };
    if topology.generation <= agent.topology_generation {
        return;
    }
    for s in excluded {
        if !agent.blacklist.contains(s) {
            agent.exclude(*s, &target);
            state.propagation.push(Propagation {
                from: msg.sender,
                to: at,
                suspect: *s,
                tick: kernel.now(),
            });
        }
    }
    agent.neighbors = topology
        .neighbors(at)
        .into_iter()
        .filter(|n| !agent.blacklist.contains(n))
        .collect();
    agent.topology_generation = topology.generation;
    cluster.refresh(kernel, at);
}

/// A delivered task handover: the receiver adopts the unit.
pub fn handle_handover(msg: &NegotiationMessage, kernel: &mut Kernel, cluster: &mut Cluster, book: &mut ConstraintBook) {
    let (Some(at), Payload::Handover { unit, .. }) = (msg.receiver.agent(), &msg.content) else {
        return;
    };
    let Some(agent) = cluster.agents.get_mut(&at) else {
        return;
    };
    agent.adopt_unit(unit.clone());
    book.record(at, kernel.next_msg_id(), agent.feasible().to_vec());
    cluster.refresh(kernel, at);
}

/// A delivered escalation: the central controller acts on it.
pub fn handle_escalation(
    msg: &NegotiationMessage,
    kernel: &mut Kernel,
    cluster: &mut Cluster,
    state: &mut ControllerState,
) -> Result<Vec<ControlAction>> {
    match &msg.content {
        Payload::Escalation { report } => centralized_react(report, kernel, cluster, state),
        _ => Ok(Vec::new()),
    }
}
