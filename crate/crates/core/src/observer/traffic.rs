use std::collections::{BTreeMap, BTreeSet};

use super::{median_mad, Detector, DetectorParams, Flag, Observation};
use crate::error::{Error, Result};
use crate::model::AgentId;

const MAD_SCALE: f64 = 1.4826;
const MIN_TRAINING_INTERVALS: usize = 3;

#[derive(Debug, Clone, Copy)]
struct Robust {
    location: f64,
    spread: f64,
}

impl Robust {
    fn fit(values: &[f64]) -> Self {
        let (location, mad) = median_mad(values);
        Robust {
            location,
            spread: (MAD_SCALE * mad).max(0.1 * location.abs()).max(1.0),
        }
    }

    fn z(&self, v: f64) -> f64 {
        (v - self.location).abs() / self.spread
    }
}

#[derive(Debug, Clone)]
struct Baseline {
    count: Robust,
    delay: Option<Robust>,
    run: usize,
}

#[derive(Debug, Clone, Default)]
struct Window {
    count: u64,
    delays: Vec<f64>,
}

/// Per-sender message rate and mean delay against training margins.
#[derive(Debug, Clone)]
pub struct TrafficDetector {
    params: DetectorParams,
    baselines: BTreeMap<AgentId, Baseline>,
    window: BTreeMap<AgentId, Window>,
    retired: BTreeSet<AgentId>,
}

impl TrafficDetector {
    pub fn new(params: DetectorParams) -> Self {
        TrafficDetector {
            params,
            baselines: BTreeMap::new(),
            window: BTreeMap::new(),
            retired: BTreeSet::new(),
        }
    }
}

fn windows(obs: &[Observation]) -> BTreeMap<AgentId, BTreeMap<u32, Window>> {
    let mut out: BTreeMap<AgentId, BTreeMap<u32, Window>> = BTreeMap::new();
    for o in obs {
        let w = out.entry(o.sender).or_default().entry(o.interval).or_default();
        w.count += 1;
        if let Some(d) = o.delay_ticks {
            w.delays.push(d as f64);
        }
    }
    out
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

impl Detector for TrafficDetector {
    fn name(&self) -> &'static str {
        "traffic"
    }

    fn min_level(&self) -> u8 {
        1
    }

    fn threshold(&self) -> f64 {
        self.params.theta
    }

    fn train(&mut self, training: &[Observation]) -> Result<()> {
        for (sender, per_interval) in windows(training) {
            if per_interval.len() < MIN_TRAINING_INTERVALS {
                continue;
            }
            let counts: Vec<f64> = per_interval.values().map(|w| w.count as f64).collect();
            let delays: Vec<f64> = per_interval.values().filter_map(|w| mean(&w.delays)).collect();
            self.baselines.insert(
                sender,
                Baseline {
                    count: Robust::fit(&counts),
                    delay: (!delays.is_empty()).then(|| Robust::fit(&delays)),
                    run: 0,
                },
            );
        }
        if self.baselines.is_empty() {
            return Err(Error::InsufficientTraining(format!(
                "no sender active in {MIN_TRAINING_INTERVALS} training intervals"
            )));
        }
        Ok(())
    }

    fn observe(&mut self, obs: &Observation) -> Option<Flag> {
        let w = self.window.entry(obs.sender).or_default();
        w.count += 1;
        if let Some(d) = obs.delay_ticks {
            w.delays.push(d as f64);
        }
        None
    }

    fn finish_interval(&mut self, interval: u32) -> Vec<Flag> {
        let window = std::mem::take(&mut self.window);
        let mut flags = Vec::new();
        for (sender, b) in &mut self.baselines {
            if self.retired.contains(sender) {
                continue;
            }
            let Some(w) = window.get(sender) else {
                b.run = 0;
                continue;
            };
            let mut z = b.count.z(w.count as f64);
            if let (Some(d), Some(m)) = (b.delay, mean(&w.delays)) {
                z = z.max(d.z(m));
            }
            if z > self.params.theta {
                b.run += 1;
            } else {
                b.run = 0;
            }
            if b.run >= self.params.consecutive {
                flags.push(Flag {
                    suspect: *sender,
                    interval,
                    score: z,
                });
            }
        }
        flags
    }

    fn retire(&mut self, agent: AgentId) {
        self.retired.insert(agent);
    }
}

