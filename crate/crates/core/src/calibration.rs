//! Conformal escalation thresholds.
//!
//! Each non-top tier `k` and task `t` gets a threshold `delta[k][t]`; a response
//! with uncertainty above it is escalated. Cells are populated the way
//! deployment populates them: calibration queries are routed by the router and
//! cascaded upward tier by tier, so tier `k`'s cell sees exactly the traffic
//! that reaches tier `k` under the thresholds already fitted below it.
//!
//! Two threshold rules are available:
//!
//! * [`ThresholdRule::RiskControl`] (default) picks the largest threshold whose
//!   calibration risk satisfies `(n * R(delta) + 1) / (n + 1) <= alpha`, with
//!   loss `1[fail and u <= delta]`. This bounds the expected accepted-but-failed
//!   rate by `alpha` under exchangeability, for any oracle.
//! * [`ThresholdRule::CorrectQuantile`] takes the `ceil((1 - alpha)(n0 + 1))`-th
//!   smallest uncertainty among correctly-handled examples. It controls how
//!   many correct answers get escalated, not how many failures slip through.

use std::io::{Read, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::cascade::execute_cascade;
use crate::error::{invalid, Error, Result};
use crate::portfolio::World;
use crate::router::RouterModel;
use crate::workload::Query;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdRule {
    #[default]
    RiskControl,
    CorrectQuantile,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CalibrationConfig {
    pub alpha: f64,
    pub rule: ThresholdRule,
    /// Cap on calibration examples per (tier, task) cell; the first arrivals are kept.
    pub max_per_cell: Option<usize>,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        CalibrationConfig { alpha: 0.05, rule: ThresholdRule::RiskControl, max_per_cell: Some(500) }
    }
}

impl CalibrationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::Config(format!("alpha {} outside (0,1)", self.alpha)));
        }
        if self.max_per_cell == Some(0) {
            return Err(Error::Config("max_per_cell must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CellThreshold {
    pub delta: f64,
    pub n_calib: usize,
    /// Correctly-handled calibration examples in the cell.
    pub n0: usize,
    pub degenerate: bool,
}

/// Thresholds for tiers `0..K-1`; the top tier never escalates.
#[derive(Debug, Clone, PartialEq)]
pub struct ThresholdTable {
    pub alpha: f64,
    pub rule: ThresholdRule,
    pub num_tiers: usize,
    pub num_tasks: usize,
    cells: Vec<CellThreshold>,
}

impl ThresholdTable {
    /// The same threshold in every cell; handy for always/never-escalate setups.
    pub fn uniform(num_tiers: usize, num_tasks: usize, delta: f64) -> Self {
        let cell = CellThreshold { delta, n_calib: 0, n0: 0, degenerate: false };
        ThresholdTable {
            alpha: 0.0,
            rule: ThresholdRule::RiskControl,
            num_tiers,
            num_tasks,
            cells: vec![cell; num_tiers.saturating_sub(1) * num_tasks],
        }
    }

    pub fn cell(&self, tier: usize, task: usize) -> Option<&CellThreshold> {
        (tier + 1 < self.num_tiers).then(|| &self.cells[tier * self.num_tasks + task])
    }

    pub fn delta(&self, tier: usize, task: usize) -> Option<f64> {
        self.cell(tier, task).map(|c| c.delta)
    }

    /// Overwrite one cell's threshold. Panics for the top tier.
    pub fn set_delta(&mut self, tier: usize, task: usize, delta: f64) {
        assert!(tier + 1 < self.num_tiers, "the top tier has no threshold");
        self.cells[tier * self.num_tasks + task].delta = delta;
    }

    pub fn cells(&self) -> impl Iterator<Item = (usize, usize, &CellThreshold)> {
        self.cells.iter().enumerate().map(move |(i, c)| (i / self.num_tasks, i % self.num_tasks, c))
    }

    /// CSV columns `tier,task,delta,n_calib,n0,degenerate`; tier is one-based.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["tier", "task", "delta", "n_calib", "n0", "degenerate"])?;
        for (k, t, c) in self.cells() {
            w.write_record([
                (k + 1).to_string(),
                t.to_string(),
                format!("{:?}", c.delta),
                c.n_calib.to_string(),
                c.n0.to_string(),
                c.degenerate.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(reader: R, num_tiers: usize, num_tasks: usize, alpha: f64, rule: ThresholdRule) -> Result<Self> {
        let bad = |detail: String| Error::Parse { what: "threshold table", detail };
        let mut table = ThresholdTable::uniform(num_tiers, num_tasks, 0.0);
        table.alpha = alpha;
        table.rule = rule;
        let mut seen = vec![false; table.cells.len()];
        let mut r = csv::Reader::from_reader(reader);
        for rec in r.records() {
            let rec = rec?;
            if rec.len() != 6 {
                return Err(bad(format!("expected 6 columns, found {}", rec.len())));
            }
            let num = |i: usize| rec[i].parse::<usize>().map_err(|_| bad(format!("bad integer `{}`", &rec[i])));
            let tier = num(0)?;
            let task = num(1)?;
            if tier == 0 || tier >= num_tiers || task >= num_tasks {
                return Err(bad(format!("cell ({tier},{task}) outside table")));
            }
            let delta: f64 = rec[2].parse().map_err(|_| bad(format!("bad delta `{}`", &rec[2])))?;
            let degenerate: bool = rec[5].parse().map_err(|_| bad(format!("bad flag `{}`", &rec[5])))?;
            let idx = (tier - 1) * num_tasks + task;
            table.cells[idx] = CellThreshold { delta, n_calib: num(3)?, n0: num(4)?, degenerate };
            seen[idx] = true;
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(bad(format!("missing cell ({},{})", i / num_tasks + 1, i % num_tasks)));
        }
        Ok(table)
    }
}

// ceil() that ignores representation error just above an integer, so
// (1 - 0.05) * 20 lands on 19 rather than 20.
fn robust_ceil(x: f64) -> usize {
    (x - 1e-9).ceil().max(0.0) as usize
}

/// `ceil((1 - alpha)(n0 + 1))`-th smallest correctly-handled uncertainty.
/// Returns `(delta, degenerate)`: no correct examples gives `(0, true)`, an
/// index beyond `n0` saturates to `(1, true)`.
pub fn correct_quantile_threshold(correct_uncertainties: &[f64], alpha: f64) -> (f64, bool) {
    let n0 = correct_uncertainties.len();
    if n0 == 0 {
        return (0.0, true);
    }
    let idx = robust_ceil((1.0 - alpha) * (n0 + 1) as f64);
    if idx > n0 {
        return (1.0, true);
    }
    let mut sorted = correct_uncertainties.to_vec();
    sorted.sort_by(f64::total_cmp);
    (sorted[idx.max(1) - 1], false)
}

/// Largest candidate threshold in `{0} ∪ {u_i} ∪ {1}` whose calibration risk
/// satisfies `#{failed, u <= delta} + 1 <= alpha (n + 1)`. Returns
/// `(delta, degenerate)`; a cell with no correct examples, or where even
/// `delta = 0` is infeasible, degenerates to always-escalate.
pub fn risk_control_threshold(samples: &[(f64, bool)], alpha: f64) -> (f64, bool) {
    let n = samples.len();
    if samples.iter().all(|&(_, failed)| failed) {
        return (0.0, true);
    }
    let budget = alpha * (n + 1) as f64 + 1e-9;
    let mut sorted = samples.to_vec();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    let feasible = |failures: usize| (failures + 1) as f64 <= budget;
    if !feasible(sorted.iter().filter(|&&(u, f)| f && u <= 0.0).count()) {
        return (0.0, true);
    }
    let mut best = 0.0;
    let mut failures = 0usize;
    let mut i = 0;
    while i < sorted.len() {
        let u = sorted[i].0;
        // all samples tied at u enter together
        while i < sorted.len() && sorted[i].0 == u {
            failures += sorted[i].1 as usize;
            i += 1;
        }
        if !feasible(failures) {
            return (best, false);
        }
        best = u;
    }
    (1.0, false)
}

/// Fit one cell's threshold from `(uncertainty, failed)` samples.
pub fn fit_cell(samples: &[(f64, bool)], alpha: f64, rule: ThresholdRule) -> CellThreshold {
    let n0 = samples.iter().filter(|s| !s.1).count();
    let (delta, degenerate) = match rule {
        ThresholdRule::RiskControl => risk_control_threshold(samples, alpha),
        ThresholdRule::CorrectQuantile => {
            let correct: Vec<f64> = samples.iter().filter(|s| !s.1).map(|s| s.0).collect();
            correct_quantile_threshold(&correct, alpha)
        }
    };
    CellThreshold { delta, n_calib: samples.len(), n0, degenerate }
}

pub fn calibrate_thresholds(
    world: &World,
    router: &RouterModel,
    calib_queries: &[Query],
    config: &CalibrationConfig,
    run_seed: u64,
) -> Result<ThresholdTable> {
    config.validate()?;
    if calib_queries.is_empty() {
        return Err(invalid("empty calibration set"));
    }
    let num_tiers = world.num_tiers();
    let num_tasks = world.num_tasks();
    let mut reach: Vec<usize> = calib_queries
        .par_iter()
        .map(|q| router.predict_tier(q))
        .collect::<Result<_>>()?;
    let mut table = ThresholdTable::uniform(num_tiers, num_tasks, 0.0);
    table.alpha = config.alpha;
    table.rule = config.rule;
    let cap = config.max_per_cell.unwrap_or(usize::MAX);

    for k in 0..num_tiers.saturating_sub(1) {
        let members: Vec<usize> = (0..calib_queries.len()).filter(|&i| reach[i] == k).collect();
        let outcomes: Vec<(f64, bool)> = members
            .par_iter()
            .map(|&i| {
                let o = world.evaluate(k, &calib_queries[i], run_seed);
                (o.uncertainty, !o.passes)
            })
            .collect();
        let mut per_task: Vec<Vec<(f64, bool)>> = vec![Vec::new(); num_tasks];
        for (&i, &s) in members.iter().zip(&outcomes) {
            let cell = &mut per_task[calib_queries[i].task_id];
            if cell.len() < cap {
                cell.push(s);
            }
        }
        for (t, samples) in per_task.iter().enumerate() {
            table.cells[k * num_tasks + t] = fit_cell(samples, config.alpha, config.rule);
        }
        for (&i, &(u, _)) in members.iter().zip(&outcomes) {
            if u > table.cells[k * num_tasks + calib_queries[i].task_id].delta {
                reach[i] = k + 1;
            }
        }
    }
    Ok(table)
}

/// Standard Wilson score interval for `successes` out of `total`.
pub fn wilson_interval(successes: u64, total: u64, confidence: f64) -> Result<(f64, f64)> {
    if total == 0 {
        return Err(invalid("Wilson interval needs at least one trial"));
    }
    if successes > total {
        return Err(invalid("successes exceed total"));
    }
    if !(confidence > 0.0 && confidence < 1.0) {
        return Err(invalid("confidence must lie in (0,1)"));
    }
    let z = Normal::new(0.0, 1.0).expect("unit normal").inverse_cdf(1.0 - (1.0 - confidence) / 2.0);
    let n = total as f64;
    let p = successes as f64 / n;
    let z2 = z * z;
    let denom = 1.0 + z2 / n;
    let center = (p + z2 / (2.0 * n)) / denom;
    let half = z / denom * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt();
    let low = if successes == 0 { 0.0 } else { (center - half).max(0.0) };
    let high = if successes == total { 1.0 } else { (center + half).min(1.0) };
    Ok((low, high))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoverageReport {
    pub violations: u64,
    pub total: u64,
    pub rate: f64,
    /// 95% Wilson interval; absent for zero-traffic cells.
    pub wilson: Option<(f64, f64)>,
}

impl CoverageReport {
    pub fn new(violations: u64, total: u64) -> Self {
        if total == 0 {
            return CoverageReport { violations: 0, total: 0, rate: 0.0, wilson: None };
        }
        CoverageReport {
            violations,
            total,
            rate: violations as f64 / total as f64,
            wilson: wilson_interval(violations, total, 0.95).ok(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellCoverage {
    pub tier: usize,
    pub task: usize,
    pub report: CoverageReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageSummary {
    pub cells: Vec<CellCoverage>,
    pub pooled: CoverageReport,
}

/// Count accepted-but-failed responses (`u <= delta` and quality below the
/// task threshold) among the responses each non-top tier produced.
pub fn coverage_check(
    world: &World,
    router: &RouterModel,
    thresholds: &ThresholdTable,
    test_queries: &[Query],
    run_seed: u64,
    max_per_cell: Option<usize>,
) -> Result<CoverageSummary> {
    let num_tasks = world.num_tasks();
    let lower = world.num_tiers().saturating_sub(1);
    let traces = test_queries
        .par_iter()
        .map(|q| execute_cascade(world, router, thresholds, q, run_seed))
        .collect::<Result<Vec<_>>>()?;
    let cap = max_per_cell.unwrap_or(usize::MAX) as u64;
    let mut counts = vec![(0u64, 0u64); lower * num_tasks];
    for trace in &traces {
        for a in &trace.attempts {
            if a.tier >= lower {
                continue;
            }
            let c = &mut counts[a.tier * num_tasks + trace.task_id];
            if c.1 < cap {
                c.1 += 1;
                c.0 += (!a.escalated && !a.outcome.passes) as u64;
            }
        }
    }
    let cells: Vec<CellCoverage> = counts
        .iter()
        .enumerate()
        .map(|(i, &(v, n))| CellCoverage { tier: i / num_tasks, task: i % num_tasks, report: CoverageReport::new(v, n) })
        .collect();
    let (v, n) = counts.iter().fold((0, 0), |acc, c| (acc.0 + c.0, acc.1 + c.1));
    Ok(CoverageSummary { cells, pooled: CoverageReport::new(v, n) })
}
