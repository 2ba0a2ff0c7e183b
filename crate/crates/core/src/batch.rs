//! Batch work: many independent random sessions, and exhaustive sweeps of
//! the allocation rules. With the `parallel` feature these fan out over a
//! rayon pool; [`run_sequential`] and [`sweep_sequential`] are always
//! available and produce identical results.

use serde::{Deserialize, Serialize};

use crate::orchestrator::Mode;
use crate::schema::{Domain, HumanToolProfile};
use crate::sim::{random_scenario, run_checked, RunOutcome, SimParams};
use crate::taskgraph::{allocate, Actor, AllocationPolicy, RequirementFlag, TaskNode};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub outcome: Result<RunOutcome, String>,
}

fn one(seed: u64, params: &SimParams, mode: Mode) -> SeedResult {
    let scenario = random_scenario(seed, params);
    let outcome = run_checked(&format!("sim-{seed}"), &scenario, mode).map_err(|e| e.to_string());
    SeedResult { seed, outcome }
}

pub fn run_sequential(seeds: &[u64], params: &SimParams, mode: Mode) -> Vec<SeedResult> {
    seeds.iter().map(|s| one(*s, params, mode)).collect()
}

#[cfg(feature = "parallel")]
pub fn run_parallel(seeds: &[u64], params: &SimParams, mode: Mode) -> Vec<SeedResult> {
    use rayon::prelude::*;
    seeds.par_iter().map(|s| one(*s, params, mode)).collect()
}

/// Parallel when the feature is on, sequential otherwise. Output order
/// follows `seeds` either way.
pub fn run(seeds: &[u64], params: &SimParams, mode: Mode) -> Vec<SeedResult> {
    #[cfg(feature = "parallel")]
    {
        run_parallel(seeds, params, mode)
    }
    #[cfg(not(feature = "parallel"))]
    {
        run_sequential(seeds, params, mode)
    }
}

/// One point of the allocation grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub flags_mask: u8,
    pub cognitive_creativity: u8,
    pub external_interaction: u8,
    pub capability_threshold: u8,
    pub delegation_cutoff: u8,
}

/// The grid: every flag subset, every creativity/interaction score pair,
/// and the given thresholds and cutoffs.
pub fn sweep_grid(thresholds: &[u8], cutoffs: &[u8]) -> Vec<SweepPoint> {
    let mut out = Vec::with_capacity(256 * 25 * thresholds.len() * cutoffs.len());
    for mask in 0..=255u8 {
        for cc in 1..=5u8 {
            for ei in 1..=5u8 {
                for &t in thresholds {
                    for &d in cutoffs {
                        out.push(SweepPoint {
                            flags_mask: mask,
                            cognitive_creativity: cc,
                            external_interaction: ei,
                            capability_threshold: t,
                            delegation_cutoff: d,
                        });
                    }
                }
            }
        }
    }
    out
}

/// Profile used for a sweep point. Scores outside the swept pair are fixed
/// at `base`; delegation is swept separately through the cutoff.
pub fn sweep_profile(point: &SweepPoint, base: u8) -> HumanToolProfile {
    let mut p = HumanToolProfile::uniform("sweep", Domain::Generic, base);
    p.capabilities.cognitive_creativity = crate::schema::DimensionScore::new(point.cognitive_creativity).expect("1..=5");
    p.capabilities.external_interaction = crate::schema::DimensionScore::new(point.external_interaction).expect("1..=5");
    p
}

/// Actor chosen by `allocate` at one grid point.
pub fn allocate_point(point: &SweepPoint, base: u8) -> Actor {
    let node = TaskNode::leaf("leaf", "sweep", RequirementFlag::subset(point.flags_mask));
    let policy = AllocationPolicy::with_thresholds(point.capability_threshold, point.delegation_cutoff);
    allocate(&node, &sweep_profile(point, base), &policy).expect("valid sweep input").actor()
}

pub fn sweep_sequential(points: &[SweepPoint], base: u8) -> Vec<Actor> {
    points.iter().map(|p| allocate_point(p, base)).collect()
}

#[cfg(feature = "parallel")]
pub fn sweep_parallel(points: &[SweepPoint], base: u8) -> Vec<Actor> {
    use rayon::prelude::*;
    points.par_iter().map(|p| allocate_point(p, base)).collect()
}

pub fn sweep(points: &[SweepPoint], base: u8) -> Vec<Actor> {
    #[cfg(feature = "parallel")]
    {
        sweep_parallel(points, base)
    }
    #[cfg(not(feature = "parallel"))]
    {
        sweep_sequential(points, base)
    }
}
