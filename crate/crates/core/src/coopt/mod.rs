//! Failure-driven co-optimization of the router and the cheap tiers.
//!
//! Each iteration collects escalated queries from training traffic, clusters
//! them per task in the router's hidden space, ranks clusters by
//! `size * mean quality gap`, and grants each selected cluster a localized
//! capability patch on every non-top tier. The router is then retrained on
//! labels from the patched portfolio and thresholds are recalibrated. The loop
//! stops when the cost ratio moves less than `epsilon`.
//!
//! Patches live in feature space. A cluster's patch is centred on the mean
//! feature vector of its members, and its radius is the configured quantile
//! of member distances from that centre.

pub mod kmeans;
pub mod pca;

use std::collections::HashMap;
use std::io::Write;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::calibration::ThresholdTable;
use crate::cascade::{run_traces, CascadeTrace, ExperimentMetrics, Policy};
use crate::config::{CooptConfig, RunConfig};
use crate::error::{invalid, Result};
use crate::experiment::{cheap_share, evaluate_policy, fit_thresholds, label_seed, Pipeline};
use crate::portfolio::{squared_distance, CapabilityPatch, World};
use crate::rng::{derive_seed, rng_for, stream};
use crate::router::{label_queries, normalized_costs, train_from, RouterModel, TrainingConfig};
use crate::workload::Query;

use self::kmeans::kmeans_with_silhouette;
use self::pca::pca_project;

#[derive(Debug, Clone, PartialEq)]
pub struct FailureRecord {
    pub query: Query,
    pub entry_tier: usize,
    /// Tiers whose answer was escalated, in order.
    pub escalated_from: Vec<usize>,
    /// Router hidden activation for the query.
    pub hidden: Vec<f64>,
    /// Task threshold minus the best escalated answer's quality, floored at 0.
    pub quality_gap: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FailureCluster {
    pub cluster_id: usize,
    pub task_id: usize,
    /// Centroid in the reduced space.
    pub centroid: Vec<f64>,
    /// Indices into the failure list.
    pub member_ids: Vec<usize>,
    pub size: usize,
    pub mean_quality_gap: f64,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CooptState {
    pub iteration: usize,
    pub cost_ratio_history: Vec<f64>,
    pub quality_ratio_history: Vec<f64>,
    pub patches: Vec<CapabilityPatch>,
    pub epsilon: f64,
    pub converged: bool,
}

/// How patch centroids are chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistillMode {
    /// Cluster centroids of ranked failure clusters.
    Targeted,
    /// Uniformly drawn failures, with the targeted run's patch count, tiers,
    /// radii and boosts.
    Random,
}

pub fn collect_failures(traces: &[CascadeTrace], queries: &[Query], router: &RouterModel, world: &World) -> Result<Vec<FailureRecord>> {
    let by_id: HashMap<u64, &Query> = queries.iter().map(|q| (q.query_id, q)).collect();
    traces
        .iter()
        .filter(|t| t.escalations() > 0)
        .map(|t| {
            let query = *by_id.get(&t.query_id).ok_or_else(|| invalid(format!("trace for unknown query {}", t.query_id)))?;
            let escalated: Vec<_> = t.attempts.iter().filter(|a| a.escalated).collect();
            let best = escalated.iter().map(|a| a.outcome.quality).fold(f64::NEG_INFINITY, f64::max);
            Ok(FailureRecord {
                query: query.clone(),
                entry_tier: t.entry_tier,
                escalated_from: escalated.iter().map(|a| a.tier).collect(),
                hidden: router.forward(query)?.hidden,
                quality_gap: (world.tau(query.task_id) - best).max(0.0),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ClusteringSummary {
    /// Per task: chosen k, silhouette, retained variance, trivial flag.
    pub per_task: Vec<(usize, usize, f64, f64, bool)>,
}

/// Cluster failures separately for each task.
pub fn cluster_failures(
    failures: &[FailureRecord],
    num_tasks: usize,
    config: &CooptConfig,
    seed: u64,
) -> Result<(Vec<FailureCluster>, ClusteringSummary)> {
    let mut clusters = Vec::new();
    let mut summary = ClusteringSummary::default();
    for task in 0..num_tasks {
        let members: Vec<usize> = (0..failures.len()).filter(|&i| failures[i].query.task_id == task).collect();
        if members.is_empty() {
            continue;
        }
        let hidden: Vec<Vec<f64>> = members.iter().map(|&i| failures[i].hidden.clone()).collect();
        let (points, retained) = if hidden.len() >= 2 {
            let dim = config.max_pca_dim.min(hidden[0].len());
            let p = pca_project(&hidden, dim)?;
            (p.projected, p.retained_variance)
        } else {
            (hidden, 1.0)
        };
        let c = kmeans_with_silhouette(&points, &config.candidate_ks, derive_seed(seed, &[task as u64]));
        summary.per_task.push((task, c.chosen_k, c.silhouette, retained, c.trivial));
        let k = c.assignment.iter().max().map_or(0, |m| m + 1);
        for local in 0..k {
            let ids: Vec<usize> = (0..members.len()).filter(|&j| c.assignment[j] == local).map(|j| members[j]).collect();
            if ids.is_empty() {
                continue;
            }
            let locals: Vec<&Vec<f64>> = (0..members.len()).filter(|&j| c.assignment[j] == local).map(|j| &points[j]).collect();
            let dim = locals[0].len();
            let centroid: Vec<f64> = (0..dim).map(|d| locals.iter().map(|p| p[d]).sum::<f64>() / locals.len() as f64).collect();
            let mean_gap = ids.iter().map(|&i| failures[i].quality_gap).sum::<f64>() / ids.len() as f64;
            clusters.push(FailureCluster {
                cluster_id: clusters.len(),
                task_id: task,
                centroid,
                size: ids.len(),
                member_ids: ids,
                mean_quality_gap: mean_gap,
                score: 0.0,
            });
            let last = clusters.last_mut().expect("just pushed");
            last.score = last.size as f64 * last.mean_quality_gap;
        }
    }
    Ok((clusters, summary))
}

/// Per task, the `top_n` clusters by descending score, ties to the smaller id.
pub fn rank_and_select(clusters: &[FailureCluster], top_n: usize) -> Vec<FailureCluster> {
    let mut tasks: Vec<usize> = clusters.iter().map(|c| c.task_id).collect();
    tasks.sort_unstable();
    tasks.dedup();
    let mut out = Vec::new();
    for task in tasks {
        let mut group: Vec<&FailureCluster> = clusters.iter().filter(|c| c.task_id == task).collect();
        group.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.cluster_id.cmp(&b.cluster_id)));
        out.extend(group.into_iter().take(top_n).cloned());
    }
    out
}

fn fraction_count(n: usize, fraction: f64) -> usize {
    ((n as f64 * fraction) - 1e-9).ceil().max(0.0) as usize
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistillSet {
    /// Per selected cluster, its hardest members (failure indices).
    pub hardest: Vec<Vec<usize>>,
    /// In-distribution samples kept against forgetting.
    pub in_distribution: Vec<Query>,
}

impl DistillSet {
    pub fn failure_count(&self) -> usize {
        self.hardest.iter().map(Vec::len).sum()
    }

    pub fn queries(&self, failures: &[FailureRecord]) -> Vec<Query> {
        let mut out: Vec<Query> = self.hardest.iter().flatten().map(|&i| failures[i].query.clone()).collect();
        out.extend(self.in_distribution.iter().cloned());
        out
    }
}

pub fn build_distill_set(
    selected: &[FailureCluster],
    failures: &[FailureRecord],
    pool: &[Query],
    config: &CooptConfig,
    seed: u64,
) -> DistillSet {
    let hardest: Vec<Vec<usize>> = selected
        .iter()
        .map(|c| {
            let mut ids = c.member_ids.clone();
            ids.sort_by(|&a, &b| {
                failures[b]
                    .quality_gap
                    .total_cmp(&failures[a].quality_gap)
                    .then(failures[a].query.query_id.cmp(&failures[b].query.query_id))
            });
            ids.truncate(fraction_count(c.size, config.hardest_fraction));
            ids
        })
        .collect();
    let total: usize = hardest.iter().map(Vec::len).sum();
    let extra = fraction_count(total, config.in_distribution_fraction).min(pool.len());
    let mut rng = rng_for(seed, &[stream::DISTILL]);
    let mut picks = index::sample(&mut rng, pool.len(), extra).into_vec();
    picks.sort_unstable();
    DistillSet { hardest, in_distribution: picks.into_iter().map(|i| pool[i].clone()).collect() }
}

/// Mean feature vector of a cluster and the quantile of member distances to it.
pub fn feature_region(members: &[usize], failures: &[FailureRecord], quantile: f64) -> (Vec<f64>, f64) {
    let dim = failures[members[0]].query.features.len();
    let n = members.len() as f64;
    let centroid: Vec<f64> = (0..dim).map(|d| members.iter().map(|&i| failures[i].query.features[d]).sum::<f64>() / n).collect();
    let mut dists: Vec<f64> = members.iter().map(|&i| squared_distance(&failures[i].query.features, &centroid).sqrt()).collect();
    dists.sort_by(f64::total_cmp);
    let rank = ((quantile * dists.len() as f64).ceil() as usize).clamp(1, dists.len());
    (centroid, dists[rank - 1])
}

/// New patches for every non-top tier and selected cluster, appended to `existing`.
pub fn apply_distillation(
    existing: &[CapabilityPatch],
    selected: &[FailureCluster],
    failures: &[FailureRecord],
    world: &World,
    eta: f64,
    radius_quantile: f64,
) -> Vec<CapabilityPatch> {
    let top = world.portfolio.top();
    let teacher = world.portfolio.tiers[top].capability;
    let mut out = existing.to_vec();
    for c in selected {
        let (centroid, radius) = feature_region(&c.member_ids, failures, radius_quantile);
        for tier in 0..top {
            out.push(CapabilityPatch {
                tier,
                task_id: c.task_id,
                centroid: centroid.clone(),
                radius,
                boost: eta * (teacher - world.portfolio.tiers[tier].capability),
            });
        }
    }
    out
}

/// Replace each patch's centre with a uniformly drawn failure's features,
/// keeping tier, radius and boost.
pub fn randomize_patches(patches: &[CapabilityPatch], failures: &[FailureRecord], seed: u64) -> Vec<CapabilityPatch> {
    let mut rng = rng_for(seed, &[stream::ABLATION]);
    patches
        .iter()
        .map(|p| {
            let f = &failures[rng.random_range(0..failures.len())];
            CapabilityPatch { task_id: f.query.task_id, centroid: f.query.features.clone(), ..p.clone() }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterationRecord {
    pub iteration: usize,
    pub metrics: ExperimentMetrics,
    pub failures: usize,
    pub clusters_selected: usize,
    pub distill_size: usize,
    pub patches_total: usize,
}

#[derive(Debug, Clone)]
pub struct CooptOutcome {
    pub state: CooptState,
    pub history: Vec<IterationRecord>,
    pub world: World,
    pub router: RouterModel,
    pub thresholds: ThresholdTable,
}

fn retrain(world: &World, train_set: &[Query], config: &TrainingConfig, router: &RouterModel, seed: u64, iteration: usize) -> Result<RouterModel> {
    let examples = label_queries(world, train_set, label_seed(seed));
    let cfg = TrainingConfig { seed: derive_seed(seed, &[stream::TRAIN, config.seed, iteration as u64]), ..*config };
    Ok(train_from(&examples, &cfg, router.clone(), &normalized_costs(world))?.0)
}

/// Run the co-optimization loop from a fitted pipeline.
pub fn coopt_loop(config: &RunConfig, base: &Pipeline, mode: DistillMode) -> Result<CooptOutcome> {
    let cc = &config.coopt;
    cc.validate()?;
    let seed = base.seed;
    let evaluate = |world: &World, router: &RouterModel, th: &ThresholdTable| {
        evaluate_policy(Policy::Routed, world, &base.data.eval, Some(router), Some(th), seed).map(|r| r.metrics)
    };
    let mut world = base.world.clone();
    let mut router = base.router.clone();
    let mut thresholds = base.thresholds.clone();
    let m0 = evaluate(&world, &router, &thresholds)?;
    let mut state = CooptState {
        iteration: 0,
        cost_ratio_history: vec![m0.cost_ratio],
        quality_ratio_history: vec![m0.quality_ratio],
        patches: world.portfolio.patches.clone(),
        epsilon: cc.epsilon,
        converged: false,
    };
    let mut history =
        vec![IterationRecord { iteration: 0, metrics: m0, failures: 0, clusters_selected: 0, distill_size: 0, patches_total: state.patches.len() }];

    while state.iteration < cc.max_iterations {
        let it = state.iteration + 1;
        let it_seed = derive_seed(seed, &[stream::DISTILL, it as u64]);
        let traces = run_traces(Policy::Routed, &world, &base.data.train, Some(&router), Some(&thresholds), label_seed(seed))?;
        let failures = collect_failures(&traces, &base.data.train, &router, &world)?;
        if failures.is_empty() {
            state.converged = true;
            break;
        }
        let (clusters, _) = cluster_failures(&failures, world.num_tasks(), cc, it_seed)?;
        let selected = rank_and_select(&clusters, cc.top_n);
        let distill = build_distill_set(&selected, &failures, &base.data.train, cc, it_seed);
        let fresh = apply_distillation(&[], &selected, &failures, &world, cc.eta, cc.radius_quantile);
        let fresh = match mode {
            DistillMode::Targeted => fresh,
            DistillMode::Random => randomize_patches(&fresh, &failures, it_seed),
        };
        state.patches.extend(fresh);
        world = world.with_patches(state.patches.clone());
        router = retrain(&world, &base.data.train, &config.router, &router, seed, it)?;
        thresholds = fit_thresholds(&world, &router, &base.data.calib, &config.calibration, seed)?;
        let m = evaluate(&world, &router, &thresholds)?;

        state.iteration = it;
        let prev = *state.cost_ratio_history.last().expect("nonempty history");
        state.cost_ratio_history.push(m.cost_ratio);
        state.quality_ratio_history.push(m.quality_ratio);
        history.push(IterationRecord {
            iteration: it,
            metrics: m,
            failures: failures.len(),
            clusters_selected: selected.len(),
            distill_size: distill.failure_count() + distill.in_distribution.len(),
            patches_total: state.patches.len(),
        });
        if (state.cost_ratio_history[it] - prev).abs() < cc.epsilon {
            state.converged = true;
            break;
        }
    }
    Ok(CooptOutcome { state, history, world, router, thresholds })
}

/// `iteration,quality_ratio,cost_ratio,t1t2_share,t4_share,clusters_selected,patches_total`
pub fn write_history_csv<W: Write>(history: &[IterationRecord], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["iteration", "quality_ratio", "cost_ratio", "t1t2_share", "t4_share", "clusters_selected", "patches_total"])?;
    for r in history {
        w.write_record([
            r.iteration.to_string(),
            format!("{:.6}", r.metrics.quality_ratio),
            format!("{:.6}", r.metrics.cost_ratio),
            format!("{:.6}", cheap_share(&r.metrics)),
            format!("{:.6}", r.metrics.tier_shares.last().copied().unwrap_or(0.0)),
            r.clusters_selected.to_string(),
            r.patches_total.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cascade::Attempt;
    use crate::portfolio::{Portfolio, QualityOutcome};
    use crate::router::RouterDims;
    use crate::workload::default_tasks;

    fn world() -> World {
        World { tasks: default_tasks(), portfolio: Portfolio::default() }
    }

    fn query(id: u64, task: usize, features: Vec<f64>) -> Query {
        Query { query_id: id, task_id: task, difficulty: 0.5, features, token_len: 100, shifted: false }
    }

    fn attempt(tier: usize, quality: f64, escalated: bool) -> Attempt {
        let outcome = QualityOutcome { quality, passes: false, uncertainty: 0.5, tokens: 100, cost: 0.0, latency_ms: 0.0 };
        Attempt { tier, outcome, escalated }
    }

    fn trace(id: u64, task: usize, attempts: Vec<Attempt>) -> CascadeTrace {
        let last = attempts.last().unwrap().clone();
        CascadeTrace {
            query_id: id,
            task_id: task,
            entry_tier: attempts[0].tier,
            final_tier: last.tier,
            cumulative_cost: 0.0,
            final_quality: last.outcome.quality,
            final_pass: last.outcome.passes,
            latency_ms: 0.0,
            attempts,
        }
    }

    fn failure(id: u64, task: usize, gap: f64, features: Vec<f64>) -> FailureRecord {
        FailureRecord { query: query(id, task, features), entry_tier: 0, escalated_from: vec![0], hidden: vec![0.0; 2], quality_gap: gap }
    }

    fn cluster(id: usize, task: usize, score: f64) -> FailureCluster {
        FailureCluster { cluster_id: id, task_id: task, centroid: vec![], member_ids: vec![], size: 1, mean_quality_gap: score, score }
    }

    #[test]
    fn failures_counted_and_gap_from_best_escalated_answer() {
        let w = world();
        let router = RouterModel::zeros(RouterDims { tasks: 6, features: 2, embed: 2, hidden: 3, tiers: 4 });
        let queries: Vec<Query> = (0..3).map(|i| query(i, 0, vec![0.0, 0.0])).collect();
        let traces = vec![
            trace(0, 0, vec![attempt(0, 0.6, true), attempt(1, 0.8, true), attempt(2, 0.95, false)]),
            trace(1, 0, vec![attempt(1, 0.9, false)]),
            trace(2, 0, vec![attempt(0, 0.95, true), attempt(1, 0.97, false)]),
        ];
        let f = collect_failures(&traces, &queries, &router, &w).unwrap();
        assert_eq!(f.len(), 2);
        assert!((f[0].quality_gap - 0.10).abs() < 1e-12);
        assert_eq!(f[0].escalated_from, vec![0, 1]);
        assert_eq!(f[1].quality_gap, 0.0);
        assert_eq!(f[0].hidden.len(), 3);
        assert!(collect_failures(&traces[1..2], &queries, &router, &w).unwrap().is_empty());
    }

    #[test]
    fn ranking_sorts_ties_and_truncates() {
        let cs = vec![cluster(0, 0, 3.0), cluster(1, 0, 1.0), cluster(2, 0, 2.0)];
        let ids: Vec<usize> = rank_and_select(&cs, 2).iter().map(|c| c.cluster_id).collect();
        assert_eq!(ids, vec![0, 2]);
        let eq = vec![cluster(4, 1, 1.0), cluster(2, 1, 1.0), cluster(3, 1, 1.0)];
        let ids: Vec<usize> = rank_and_select(&eq, 2).iter().map(|c| c.cluster_id).collect();
        assert_eq!(ids, vec![2, 3]);
        assert_eq!(rank_and_select(&cs, 10).len(), 3);
    }

    #[test]
    fn distill_set_counts_and_ties() {
        let failures: Vec<FailureRecord> = (0..10).map(|i| failure(10 - i, 0, 0.1 * i as f64, vec![0.0])).collect();
        let mut c = cluster(0, 0, 1.0);
        c.member_ids = (0..10).collect();
        c.size = 10;
        let pool: Vec<Query> = (0..50).map(|i| query(100 + i, 0, vec![0.0])).collect();
        let d = build_distill_set(std::slice::from_ref(&c), &failures, &pool, &CooptConfig::default(), 1);
        assert_eq!(d.hardest, vec![vec![9, 8, 7]]);
        assert_eq!(d.in_distribution.len(), 1);

        let flat: Vec<FailureRecord> = (0..10).map(|i| failure(10 - i, 0, 0.2, vec![0.0])).collect();
        let d = build_distill_set(&[c], &flat, &pool, &CooptConfig::default(), 1);
        assert_eq!(d.hardest, vec![vec![9, 8, 7]]);
        assert_eq!(fraction_count(100, 0.2), 20);
        assert_eq!(fraction_count(10, 0.3), 3);
    }

    #[test]
    fn zero_eta_patches_have_no_effect_and_cap_holds() {
        let w = world();
        let failures: Vec<FailureRecord> = (0..4).map(|i| failure(i, 0, 0.1, vec![i as f64, 0.0])).collect();
        let mut c = cluster(0, 0, 1.0);
        c.member_ids = (0..4).collect();
        let patches = apply_distillation(&[], &[c.clone()], &failures, &w, 0.0, 0.9);
        assert_eq!(patches.len(), 3);
        let q = query(9, 0, vec![1.5, 0.0]);
        let patched = w.with_patches(patches);
        for k in 0..4 {
            assert_eq!(patched.portfolio.effective_capability(k, &q), w.portfolio.effective_capability(k, &q));
        }
        let full = w.with_patches(apply_distillation(&[], &[c], &failures, &w, 1.0, 0.9));
        for k in 0..3 {
            let cap = full.portfolio.effective_capability(k, &q);
            assert!((cap - (0.95 - 0.01)).abs() < 1e-12 && cap < 0.95);
        }
    }

    #[test]
    fn region_radius_is_member_quantile() {
        let failures: Vec<FailureRecord> = [-1.0, 1.0, -3.0, 3.0].iter().enumerate().map(|(i, &x)| failure(i as u64, 0, 0.0, vec![x])).collect();
        let (c, r) = feature_region(&[0, 1, 2, 3], &failures, 0.5);
        assert_eq!(c, vec![0.0]);
        assert_eq!(r, 1.0);
        assert_eq!(feature_region(&[0, 1, 2, 3], &failures, 0.9).1, 3.0);
    }

    #[test]
    fn random_patches_keep_budget() {
        let failures: Vec<FailureRecord> = (0..5).map(|i| failure(i, i as usize % 2, 0.1, vec![i as f64])).collect();
        let p = CapabilityPatch { tier: 1, task_id: 0, centroid: vec![9.0], radius: 0.7, boost: 0.2 };
        let r = randomize_patches(&[p.clone(), p], &failures, 3);
        assert_eq!(r.len(), 2);
        for x in &r {
            assert_eq!((x.tier, x.radius, x.boost), (1, 0.7, 0.2));
            assert!(failures.iter().any(|f| f.query.features == x.centroid && f.query.task_id == x.task_id));
        }
    }
}
