use std::collections::{BTreeMap, BTreeSet};

use super::{median_mad, Detector, DetectorParams, Flag, Observation};
use crate::error::{Error, Result};
use crate::model::AgentId;

const MAD_SCALE: f64 = 1.4826;

#[derive(Debug, Clone)]
struct Baseline {
    location: Vec<f64>,
    spread: Vec<f64>,
    digest: Option<u64>,
    run: usize,
}

/// Per-sender, per-slot robust z-score on reported values.
#[derive(Debug, Clone)]
pub struct StatisticalDetector {
    params: DetectorParams,
    baselines: BTreeMap<AgentId, Baseline>,
    retired: BTreeSet<AgentId>,
}

impl StatisticalDetector {
    pub fn new(params: DetectorParams) -> Self {
        StatisticalDetector {
            params,
            baselines: BTreeMap::new(),
            retired: BTreeSet::new(),
        }
    }

    /// Largest per-slot robust z of `values` against the sender's baseline.
    pub fn score(&self, sender: AgentId, values: &[f64]) -> Option<f64> {
        let b = self.baselines.get(&sender)?;
        if values.len() != b.location.len() {
            return Some(f64::INFINITY);
        }
        Some(
            values
                .iter()
                .zip(b.location.iter().zip(&b.spread))
                .map(|(v, (m, s))| (v - m).abs() / s)
                .fold(0.0, f64::max),
        )
    }
}

impl Detector for StatisticalDetector {
    fn name(&self) -> &'static str {
        "statistical"
    }

    fn min_level(&self) -> u8 {
        3
    }

    fn threshold(&self) -> f64 {
        self.params.theta
    }

    fn train(&mut self, training: &[Observation]) -> Result<()> {
        let mut by_sender: BTreeMap<AgentId, Vec<&Observation>> = BTreeMap::new();
        for o in training.iter().filter(|o| o.content_values.as_ref().is_some_and(|c| !c.is_empty())) {
            by_sender.entry(o.sender).or_default().push(o);
        }
        for (sender, obs) in by_sender {
            if obs.len() < self.params.min_training {
                continue;
            }
            let len = obs[0].content_values.as_ref().map_or(0, Vec::len);
            let mut location = Vec::with_capacity(len);
            let mut spread = Vec::with_capacity(len);
            for slot in 0..len {
                let col: Vec<f64> = obs
                    .iter()
                    .filter_map(|o| o.content_values.as_ref().and_then(|c| c.get(slot)).copied())
                    .collect();
                let (med, mad) = median_mad(&col);
                location.push(med);
                spread.push((MAD_SCALE * mad).max(self.params.stat_floor));
            }
            let digest = obs.last().and_then(|o| o.unit_constraints.as_ref()).map(|c| c.digest);
            self.baselines.insert(
                sender,
                Baseline {
                    location,
                    spread,
                    digest,
                    run: 0,
                },
            );
        }
        if self.baselines.is_empty() {
            return Err(Error::InsufficientTraining(format!(
                "no sender has {} training observations",
                self.params.min_training
            )));
        }
        Ok(())
    }

    fn observe(&mut self, obs: &Observation) -> Option<Flag> {
        if self.retired.contains(&obs.sender) {
            return None;
        }
        let values = obs.content_values.as_ref()?;
        let z = self.score(obs.sender, values)?;
        let b = self.baselines.get_mut(&obs.sender)?;
        // A changed feasible set invalidates the baseline.
        if let (Some(trained), Some(now)) = (b.digest, obs.unit_constraints.as_ref()) {
            if trained != now.digest {
                return None;
            }
        }
        if z > self.params.theta {
            b.run += 1;
        } else {
            b.run = 0;
        }
        (b.run >= self.params.consecutive).then_some(Flag {
            suspect: obs.sender,
            interval: obs.interval,
            score: z,
        })
    }

    fn retire(&mut self, agent: AgentId) {
        self.retired.insert(agent);
    }
}
