use std::collections::BTreeSet;

use super::{Detector, Flag, Observation};
use crate::error::Result;
use crate::model::{AgentId, Schedule};

/// Smallest Chebyshev distance from `values` to any feasible schedule.
pub fn distance_to_feasible(values: &[f64], feasible: &[Schedule]) -> f64 {
    feasible
        .iter()
        .map(|f| {
            if f.len() != values.len() {
                return f64::INFINITY;
            }
            values
                .iter()
                .zip(f.values())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max)
        })
        .fold(f64::INFINITY, f64::min)
}

/// Flags reported values that no feasible schedule explains.
#[derive(Debug, Clone)]
pub struct ConstraintDetector {
    epsilon: f64,
    retired: BTreeSet<AgentId>,
}

impl ConstraintDetector {
    pub fn new(epsilon: f64) -> Self {
        ConstraintDetector {
            epsilon,
            retired: BTreeSet::new(),
        }
    }
}

impl Detector for ConstraintDetector {
    fn name(&self) -> &'static str {
        "constraint"
    }

    fn min_level(&self) -> u8 {
        4
    }

    fn threshold(&self) -> f64 {
        self.epsilon
    }

    fn train(&mut self, _training: &[Observation]) -> Result<()> {
        Ok(())
    }

    fn observe(&mut self, obs: &Observation) -> Option<Flag> {
        if self.retired.contains(&obs.sender) {
            return None;
        }
        let values = obs.content_values.as_ref()?;
        let constraints = obs.unit_constraints.as_ref()?;
        let d = distance_to_feasible(values, &constraints.feasible);
        (d > self.epsilon).then_some(Flag {
            suspect: obs.sender,
            interval: obs.interval,
            score: d,
        })
    }

    fn retire(&mut self, agent: AgentId) {
        self.retired.insert(agent);
    }
}
