//! Route-then-escalate execution and experiment metrics.

use std::io::Write;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calibration::ThresholdTable;
use crate::error::{invalid, Error, Result};
use crate::portfolio::{QualityOutcome, World};
use crate::rng::{rng_for, stream};
use crate::router::RouterModel;
use crate::workload::{Query, TaskKind};

/// Constant per-query router inference overhead.
pub const ROUTER_OVERHEAD_MS: f64 = 4.2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Attempt {
    pub tier: usize,
    pub outcome: QualityOutcome,
    pub escalated: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CascadeTrace {
    pub query_id: u64,
    pub task_id: usize,
    pub entry_tier: usize,
    pub attempts: Vec<Attempt>,
    pub final_tier: usize,
    pub cumulative_cost: f64,
    pub final_quality: f64,
    pub final_pass: bool,
    pub latency_ms: f64,
}

impl CascadeTrace {
    pub fn escalations(&self) -> usize {
        self.attempts.len() - 1
    }
}

/// Run one query from `entry`, escalating while `u > delta[k][t]`. With no
/// thresholds the first attempt is final.
pub fn run_from(
    world: &World,
    entry: usize,
    thresholds: Option<&ThresholdTable>,
    query: &Query,
    run_seed: u64,
    overhead_ms: f64,
) -> CascadeTrace {
    let top = world.num_tiers() - 1;
    let mut attempts: Vec<Attempt> = Vec::new();
    let mut tier = entry;
    loop {
        let outcome = world.evaluate(tier, query, run_seed);
        let escalate = tier < top
            && thresholds
                .and_then(|t| t.delta(tier, query.task_id))
                .is_some_and(|delta| outcome.uncertainty > delta);
        attempts.push(Attempt { tier, outcome, escalated: escalate });
        if !escalate {
            break;
        }
        tier += 1;
    }
    let last = &attempts.last().expect("at least one attempt").outcome;
    let (final_quality, final_pass) = (last.quality, last.passes);
    let cumulative_cost = attempts.iter().map(|a| a.outcome.cost).sum();
    let latency_ms = overhead_ms + attempts.iter().map(|a| a.outcome.latency_ms).sum::<f64>();
    CascadeTrace {
        query_id: query.query_id,
        task_id: query.task_id,
        entry_tier: entry,
        final_tier: tier,
        attempts,
        cumulative_cost,
        final_quality,
        final_pass,
        latency_ms,
    }
}

pub fn execute_cascade(
    world: &World,
    router: &RouterModel,
    thresholds: &ThresholdTable,
    query: &Query,
    run_seed: u64,
) -> Result<CascadeTrace> {
    let entry = router.predict_tier(query)?;
    Ok(run_from(world, entry, Some(thresholds), query, run_seed, ROUTER_OVERHEAD_MS))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Policy {
    /// Learned router plus calibrated cascade.
    Routed,
    AlwaysTop,
    AlwaysT2,
    Random,
    RuleBased,
}

impl Policy {
    pub const ALL: [Policy; 5] = [Policy::Routed, Policy::AlwaysTop, Policy::AlwaysT2, Policy::Random, Policy::RuleBased];

    pub fn name(self) -> &'static str {
        match self {
            Policy::Routed => "routed",
            Policy::AlwaysTop => "always_t4",
            Policy::AlwaysT2 => "always_t2",
            Policy::Random => "random",
            Policy::RuleBased => "rule_based",
        }
    }

    pub fn needs_router(self) -> bool {
        self == Policy::Routed
    }
}

impl std::str::FromStr for Policy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Policy::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| invalid(format!("unknown policy `{s}` (expected one of routed, always_t4, always_t2, random, rule_based)")))
    }
}

impl std::fmt::Display for Policy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentMetrics {
    pub policy: Policy,
    pub queries: usize,
    pub quality_ratio: f64,
    pub cost_ratio: f64,
    pub mean_quality: f64,
    pub pass_rate: f64,
    pub total_cost: f64,
    pub reference_total_cost: f64,
    /// Share of queries by final tier.
    pub tier_shares: Vec<f64>,
    /// Escalated attempts over attempts, per tier.
    pub escalation_rate: Vec<f64>,
    pub sla_violation_rate: f64,
    pub coverage_violation_rate: f64,
    pub p50_latency_ms: f64,
    pub p99_latency_ms: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentRun {
    pub metrics: ExperimentMetrics,
    pub traces: Vec<CascadeTrace>,
}

/// Nearest-rank percentile of an unsorted sample.
pub fn percentile(values: &[f64], q: f64) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = ((q * v.len() as f64).ceil() as usize).clamp(1, v.len());
    v[rank - 1]
}

pub(crate) fn entry_for(policy: Policy, world: &World, router: Option<&RouterModel>, query: &Query, run_seed: u64) -> Result<usize> {
    let top = world.num_tiers() - 1;
    Ok(match policy {
        Policy::Routed => router.expect("checked").predict_tier(query)?,
        Policy::AlwaysTop => top,
        Policy::AlwaysT2 => 1.min(top),
        Policy::Random => rng_for(run_seed, &[stream::RANDOM_POLICY, query.query_id]).random_range(0..=top),
        Policy::RuleBased => match world.tasks[query.task_id].kind {
            TaskKind::Structured => 0,
            TaskKind::Generation => 2.min(top),
        },
    })
}

pub fn run_traces(
    policy: Policy,
    world: &World,
    queries: &[Query],
    router: Option<&RouterModel>,
    thresholds: Option<&ThresholdTable>,
    run_seed: u64,
) -> Result<Vec<CascadeTrace>> {
    if policy.needs_router() && (router.is_none() || thresholds.is_none()) {
        return Err(Error::Missing(format!("policy {policy} needs a trained router and a threshold table")));
    }
    let (cascade, overhead) = if policy == Policy::Routed { (thresholds, ROUTER_OVERHEAD_MS) } else { (None, 0.0) };
    queries
        .par_iter()
        .map(|q| {
            let entry = entry_for(policy, world, router, q, run_seed)?;
            Ok(run_from(world, entry, cascade, q, run_seed, overhead))
        })
        .collect()
}

/// Aggregate traces against the always-top-tier reference traces.
///
/// Cost ratio is computed from per-tier token totals,
/// `sum_k (c_k / c_K) * tokens_k / tokens_ref`, which is the ratio of metered
/// costs without floating-point summation drift.
pub fn summarize(policy: Policy, world: &World, queries: &[Query], traces: &[CascadeTrace], reference: &[CascadeTrace]) -> ExperimentMetrics {
    let k = world.num_tiers();
    let n = traces.len().max(1) as f64;
    let top_cost = world.portfolio.tiers[k - 1].cost_per_1k;
    let mut tokens = vec![0u64; k];
    let mut attempts = vec![0u64; k];
    let mut escalated = vec![0u64; k];
    let mut finals = vec![0u64; k];
    let (mut viol, mut lower_attempts) = (0u64, 0u64);
    for tr in traces {
        finals[tr.final_tier] += 1;
        for a in &tr.attempts {
            tokens[a.tier] += a.outcome.tokens as u64;
            attempts[a.tier] += 1;
            escalated[a.tier] += a.escalated as u64;
            if a.tier + 1 < k {
                lower_attempts += 1;
                viol += (!a.escalated && !a.outcome.passes) as u64;
            }
        }
    }
    let ref_tokens: u64 = reference.iter().map(|t| t.attempts.iter().map(|a| a.outcome.tokens as u64).sum::<u64>()).sum();
    let cost_ratio = if ref_tokens == 0 {
        0.0
    } else {
        (0..k)
            .map(|t| (world.portfolio.tiers[t].cost_per_1k / top_cost) * (tokens[t] as f64 / ref_tokens as f64))
            .sum()
    };
    let mean_quality = traces.iter().map(|t| t.final_quality).sum::<f64>() / n;
    let ref_quality = reference.iter().map(|t| t.final_quality).sum::<f64>() / reference.len().max(1) as f64;
    let latencies: Vec<f64> = traces.iter().map(|t| t.latency_ms).collect();
    let sla = traces
        .iter()
        .zip(queries)
        .filter(|(t, q)| t.latency_ms > world.tasks[q.task_id].sla_latency_ms)
        .count();
    ExperimentMetrics {
        policy,
        queries: traces.len(),
        quality_ratio: if ref_quality > 0.0 { mean_quality / ref_quality } else { 0.0 },
        cost_ratio,
        mean_quality,
        pass_rate: traces.iter().filter(|t| t.final_pass).count() as f64 / n,
        total_cost: traces.iter().map(|t| t.cumulative_cost).sum(),
        reference_total_cost: reference.iter().map(|t| t.cumulative_cost).sum(),
        tier_shares: finals.iter().map(|&c| c as f64 / n).collect(),
        escalation_rate: (0..k)
            .map(|t| if attempts[t] == 0 { 0.0 } else { escalated[t] as f64 / attempts[t] as f64 })
            .collect(),
        sla_violation_rate: sla as f64 / n,
        coverage_violation_rate: if lower_attempts == 0 { 0.0 } else { viol as f64 / lower_attempts as f64 },
        p50_latency_ms: percentile(&latencies, 0.50),
        p99_latency_ms: percentile(&latencies, 0.99),
    }
}

/// Run a policy over a workload. The always-top-tier run is recomputed with
/// the same seed as the ratio denominator.
pub fn run_experiment(
    policy: Policy,
    world: &World,
    queries: &[Query],
    router: Option<&RouterModel>,
    thresholds: Option<&ThresholdTable>,
    run_seed: u64,
) -> Result<ExperimentRun> {
    if queries.is_empty() {
        return Err(invalid("empty workload"));
    }
    let traces = run_traces(policy, world, queries, router, thresholds, run_seed)?;
    let reference = if policy == Policy::AlwaysTop {
        traces.clone()
    } else {
        run_traces(Policy::AlwaysTop, world, queries, None, None, run_seed)?
    };
    let metrics = summarize(policy, world, queries, &traces, &reference);
    Ok(ExperimentRun { metrics, traces })
}

/// `query_id,task_id,entry_tier,final_tier,attempts,cost,quality,pass,latency_ms`
pub fn write_traces_csv<W: Write>(traces: &[CascadeTrace], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["query_id", "task_id", "entry_tier", "final_tier", "attempts", "cost", "quality", "pass", "latency_ms"])?;
    for t in traces {
        w.write_record([
            t.query_id.to_string(),
            t.task_id.to_string(),
            (t.entry_tier + 1).to_string(),
            (t.final_tier + 1).to_string(),
            t.attempts.len().to_string(),
            format!("{:.6}", t.cumulative_cost),
            format!("{:.6}", t.final_quality),
            (t.final_pass as u8).to_string(),
            format!("{:.6}", t.latency_ms),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::portfolio::Portfolio;
    use crate::router::RouterDims;
    use crate::workload::default_tasks;

    fn world() -> World {
        World { tasks: default_tasks(), portfolio: Portfolio::default() }
    }

    fn query(tokens: u32, difficulty: f64) -> Query {
        Query { query_id: 3, task_id: 0, difficulty, features: vec![0.0; 4], token_len: tokens, shifted: false }
    }

    fn forced_router(tier: usize) -> RouterModel {
        let dims = RouterDims { tasks: 6, features: 4, embed: 2, hidden: 3, tiers: 4 };
        let mut m = RouterModel::zeros(dims);
        let n = m.params.len();
        m.params[n - 4 + tier] = 5.0;
        m
    }

    #[test]
    fn top_entry_single_attempt() {
        let w = world();
        let t = execute_cascade(&w, &forced_router(3), &ThresholdTable::uniform(4, 6, 0.0), &query(1000, 0.5), 1).unwrap();
        assert_eq!(t.attempts.len(), 1);
        assert_eq!(t.cumulative_cost, 8.0);
        assert!(!t.attempts[0].escalated);
    }

    #[test]
    fn full_ladder_with_always_escalate() {
        let w = world();
        let t = execute_cascade(&w, &forced_router(0), &ThresholdTable::uniform(4, 6, 0.0), &query(1000, 0.1), 1).unwrap();
        assert_eq!(t.attempts.iter().map(|a| a.tier).collect::<Vec<_>>(), vec![0, 1, 2, 3]);
        assert_eq!(t.cumulative_cost, 0.01 + 0.10 + 0.80 + 8.00);
        assert!(t.attempts[..3].iter().all(|a| a.escalated));
        assert!(!t.attempts[3].escalated);
    }

    #[test]
    fn never_escalate_thresholds() {
        let w = world();
        for d in [0.0, 0.5, 1.0] {
            let t = execute_cascade(&w, &forced_router(0), &ThresholdTable::uniform(4, 6, 1.0), &query(200, d), 2).unwrap();
            assert_eq!(t.attempts.len(), 1);
        }
    }

    #[test]
    fn policy_names_round_trip() {
        for p in Policy::ALL {
            assert_eq!(p.name().parse::<Policy>().unwrap(), p);
        }
        assert!("frugal".parse::<Policy>().is_err());
    }

    #[test]
    fn routed_policy_requires_router() {
        let w = world();
        let qs = vec![query(10, 0.2)];
        assert!(matches!(run_experiment(Policy::Routed, &w, &qs, None, None, 0), Err(Error::Missing(_))));
    }

    #[test]
    fn percentile_nearest_rank() {
        let v: Vec<f64> = (1..=100).map(|i| i as f64).collect();
        assert_eq!(percentile(&v, 0.99), 99.0);
        assert_eq!(percentile(&v, 0.5), 50.0);
        assert_eq!(percentile(&[], 0.5), 0.0);
    }
}
