//! Brute-force references shared by the oracle and acceptance targets.

#![allow(dead_code)]

use ocgrid::kernel::Kernel;
use ocgrid::model::{AgentId, DelayModel, Schedule, UnitModel, UnitType};
use ocgrid::negotiation::{choose_best_schedule, run_negotiation, Cluster};
use ocgrid::topology::build_small_world;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const SLOTS: usize = 4;
pub const ORACLE_AGENTS: usize = 6;

pub fn l1_to_zero(parts: &[&[f64]]) -> f64 {
    (0..SLOTS).map(|t| parts.iter().map(|p| p[t]).sum::<f64>().abs()).sum()
}

/// Six agents, 2..=5 integer schedules each.
pub fn instance(seed: u64) -> Vec<Vec<Schedule>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..ORACLE_AGENTS)
        .map(|_| {
            let n = rng.gen_range(2..=5);
            (0..n)
                .map(|_| Schedule((0..SLOTS).map(|_| f64::from(rng.gen_range(-6..=6))).collect()))
                .collect()
        })
        .collect()
}

/// Minimum objective over the full cartesian product.
pub fn global_optimum(sets: &[Vec<Schedule>]) -> f64 {
    let mut best = f64::INFINITY;
    let mut idx = vec![0usize; sets.len()];
    loop {
        let parts: Vec<&[f64]> = idx.iter().zip(sets).map(|(i, s)| s[*i].values()).collect();
        best = best.min(l1_to_zero(&parts));
        let mut k = 0;
        while k < sets.len() {
            idx[k] += 1;
            if idx[k] < sets[k].len() {
                break;
            }
            idx[k] = 0;
            k += 1;
        }
        if k == sets.len() {
            return best;
        }
    }
}

/// Negotiates one instance and checks the converged assignment against
/// enumeration: complete, correctly valued, no improving unilateral move.
pub fn check_oracle_instance(seed: u64) -> Result<(), String> {
    let sets = instance(seed);
    let ids: Vec<AgentId> = (0..ORACLE_AGENTS as u32).map(AgentId).collect();
    let mut cluster = Cluster::from_units(
        sets.iter().enumerate().map(|(i, f)| {
            (
                AgentId(i as u32),
                UnitModel {
                    unit_id: format!("u{i}"),
                    unit_type: UnitType::Battery,
                    feasible_schedules: f.clone(),
                },
            )
        }),
        Schedule::zeros(SLOTS),
    );
    cluster.apply_topology(&build_small_world(&ids, 2, 0.2, seed).map_err(|e| e.to_string())?);
    let mut kernel = Kernel::new(seed, DelayModel { min_ticks: 1, max_ticks: 4 });
    let initiator = AgentId((seed % ORACLE_AGENTS as u64) as u32);
    let out = run_negotiation(0, &mut kernel, &mut cluster, initiator, 100_000).map_err(|e| e.to_string())?;
    if out.schedule.schedules.len() != ORACLE_AGENTS {
        return Err(format!("seed {seed}: incomplete assignment"));
    }
    let chosen: Vec<&[f64]> = ids.iter().map(|a| out.schedule.schedules[a].values()).collect();
    let value = l1_to_zero(&chosen);
    if (value - out.realized_objective).abs() > 1e-9 {
        return Err(format!("seed {seed}: reported {} but assignment scores {value}", out.realized_objective));
    }
    for (i, set) in sets.iter().enumerate() {
        for alt in set {
            let mut parts = chosen.clone();
            parts[i] = alt.values();
            if l1_to_zero(&parts) < value - 1e-9 {
                return Err(format!("seed {seed}: agent {i} can improve on {value}"));
            }
        }
    }
    if value < global_optimum(&sets) - 1e-9 {
        return Err(format!("seed {seed}: beats the global optimum"));
    }
    Ok(())
}

/// Compares `choose_best_schedule` with a linear argmin on random cases.
pub fn check_argmin_cases(cases: usize) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    for case in 0..cases {
        let n = rng.gen_range(1..=12);
        let feasible: Vec<Schedule> = (0..n)
            .map(|_| Schedule((0..SLOTS).map(|_| f64::from(rng.gen_range(-5..=5))).collect()))
            .collect();
        let others: Vec<f64> = (0..SLOTS).map(|_| f64::from(rng.gen_range(-15..=15))).collect();
        let target: Vec<f64> = (0..SLOTS).map(|_| f64::from(rng.gen_range(-3..=3))).collect();
        let mut arg = 0;
        let mut min = f64::INFINITY;
        for (i, f) in feasible.iter().enumerate() {
            let d: f64 = (0..SLOTS).map(|t| (others[t] + f.values()[t] - target[t]).abs()).sum();
            // Strict comparison keeps the lowest index on ties.
            if d < min {
                min = d;
                arg = i;
            }
        }
        let got = choose_best_schedule(&feasible, &others, &target);
        if got != arg {
            return Err(format!("case {case}: got {got}, argmin {arg}"));
        }
    }
    Ok(())
}
