//! End-to-end pipeline on a [`RunConfig`]: data sets, router training,
//! threshold calibration, policy evaluation and parameter sweeps.
//!
//! Every random choice hangs off the run seed through a named stream, so a
//! pipeline is a pure function of `(config, seed)`.

use std::io::Write;

use serde::Serialize;

use crate::calibration::{calibrate_thresholds, CalibrationConfig, ThresholdTable};
use crate::cascade::{run_experiment, ExperimentMetrics, ExperimentRun, Policy};
use crate::config::{RunConfig, SweepParameter, SweepSpec};
use crate::error::{invalid, Result};
use crate::portfolio::{Portfolio, World};
use crate::rng::{derive_seed, stream};
use crate::router::{label_queries, normalized_costs, train, RouterModel, TrainingConfig, TrainingReport};
use crate::workload::{apply_shift, generate_workload, Query, ShiftScenario};

#[derive(Debug, Clone, PartialEq)]
pub struct Datasets {
    pub train: Vec<Query>,
    pub calib: Vec<Query>,
    pub eval: Vec<Query>,
}

pub fn build_world(config: &RunConfig) -> Result<World> {
    Ok(World { tasks: config.workload.tasks.clone(), portfolio: config.portfolio.portfolio()? })
}

pub fn generate_datasets(config: &RunConfig, seed: u64) -> Result<Datasets> {
    let w = &config.workload;
    Ok(Datasets {
        train: generate_workload(&w.workload(w.train_count), derive_seed(seed, &[stream::TRAIN_SET]))?,
        calib: generate_workload(&w.workload(w.calib_count), derive_seed(seed, &[stream::CALIB_SET]))?,
        eval: generate_workload(&w.workload(w.eval_count), derive_seed(seed, &[stream::EVAL_SET]))?,
    })
}

/// Run seeds for the three phases; each phase sees independent oracle draws.
pub fn label_seed(seed: u64) -> u64 {
    derive_seed(seed, &[stream::LABELS])
}
pub fn calib_seed(seed: u64) -> u64 {
    derive_seed(seed, &[stream::CALIB_RUN])
}
pub fn eval_seed(seed: u64) -> u64 {
    derive_seed(seed, &[stream::EVAL_RUN])
}

/// Label the training set under `world` and fit a router.
pub fn fit_router(world: &World, train_set: &[Query], config: &TrainingConfig, seed: u64) -> Result<(RouterModel, TrainingReport)> {
    let examples = label_queries(world, train_set, label_seed(seed));
    let cfg = TrainingConfig { seed: derive_seed(seed, &[stream::TRAIN, config.seed]), ..*config };
    train(&examples, &cfg, world.num_tasks(), &normalized_costs(world))
}

pub fn fit_thresholds(
    world: &World,
    router: &RouterModel,
    calib_set: &[Query],
    config: &CalibrationConfig,
    seed: u64,
) -> Result<ThresholdTable> {
    calibrate_thresholds(world, router, calib_set, config, calib_seed(seed))
}

pub fn evaluate_policy(
    policy: Policy,
    world: &World,
    eval_set: &[Query],
    router: Option<&RouterModel>,
    thresholds: Option<&ThresholdTable>,
    seed: u64,
) -> Result<ExperimentRun> {
    run_experiment(policy, world, eval_set, router, thresholds, eval_seed(seed))
}

/// A trained and calibrated system.
#[derive(Debug, Clone)]
pub struct Pipeline {
    pub seed: u64,
    pub world: World,
    pub data: Datasets,
    pub router: RouterModel,
    pub training: TrainingReport,
    pub thresholds: ThresholdTable,
}

impl Pipeline {
    pub fn build(config: &RunConfig, seed: u64) -> Result<Pipeline> {
        let world = build_world(config)?;
        let data = generate_datasets(config, seed)?;
        Self::fit(config, seed, world, data)
    }

    pub fn fit(config: &RunConfig, seed: u64, world: World, data: Datasets) -> Result<Pipeline> {
        let (router, training) = fit_router(&world, &data.train, &config.router, seed)?;
        let thresholds = fit_thresholds(&world, &router, &data.calib, &config.calibration, seed)?;
        Ok(Pipeline { seed, world, data, router, training, thresholds })
    }

    pub fn evaluate(&self, policy: Policy) -> Result<ExperimentRun> {
        evaluate_policy(policy, &self.world, &self.data.eval, Some(&self.router), Some(&self.thresholds), self.seed)
    }
}

/// Scale every task threshold, keeping it inside `(0, 1)`.
pub fn scale_thresholds(world: &World, scale: f64) -> World {
    let mut w = world.clone();
    for t in &mut w.tasks {
        t.quality_threshold = (t.quality_threshold * scale).clamp(1e-3, 1.0 - 1e-3);
    }
    w
}

/// Reprice tiers so the top tier costs `ratio` times the cheapest.
///
/// Prices are interpolated on a log scale, `c_k' = c_1 (c_k / c_1)^g` with
/// `g = ln(ratio) / ln(c_K / c_1)`, which keeps the tier order, reproduces the
/// original prices at the original ratio and makes all tiers equal at ratio 1.
pub fn rescale_costs(portfolio: &Portfolio, ratio: f64) -> Result<Portfolio> {
    if !(ratio >= 1.0) {
        return Err(invalid(format!("cost ratio {ratio} must be at least 1")));
    }
    let c1 = portfolio.tiers[0].cost_per_1k;
    let span = (portfolio.tiers[portfolio.top()].cost_per_1k / c1).ln();
    let mut p = portfolio.clone();
    if span <= 0.0 {
        return Ok(p);
    }
    let g = ratio.ln() / span;
    for t in &mut p.tiers {
        t.cost_per_1k = c1 * (t.cost_per_1k / c1).powf(g);
    }
    Ok(p)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub parameter: SweepParameter,
    pub value: f64,
    pub quality_ratio: f64,
    pub cost_ratio: f64,
    pub savings: f64,
    pub cheap_share: f64,
    pub coverage_violation_rate: f64,
    pub p99_latency_ms: f64,
}

impl SweepRow {
    fn from_metrics(parameter: SweepParameter, value: f64, m: &ExperimentMetrics) -> Self {
        SweepRow {
            parameter,
            value,
            quality_ratio: m.quality_ratio,
            cost_ratio: m.cost_ratio,
            savings: 1.0 - m.cost_ratio,
            cheap_share: cheap_share(m),
            coverage_violation_rate: m.coverage_violation_rate,
            p99_latency_ms: m.p99_latency_ms,
        }
    }
}

/// Final-tier share of the two cheapest tiers.
pub fn cheap_share(m: &ExperimentMetrics) -> f64 {
    m.tier_shares.iter().take(2).sum()
}

/// Evaluate the routed policy at every value of one parameter.
///
/// Threshold-side parameters (`alpha`) recalibrate with the base router;
/// parameters that change labels or the loss (`tau_scale`, `lambda_*`)
/// retrain and recalibrate; `cost_ratio` reprices with routing and thresholds
/// unchanged; `shift` perturbs only the evaluation set.
pub fn run_sweep(config: &RunConfig, base: &Pipeline, spec: &SweepSpec) -> Result<Vec<SweepRow>> {
    spec.validate()?;
    let seed = base.seed;
    spec.values
        .iter()
        .map(|&v| {
            let metrics = match spec.parameter {
                SweepParameter::Alpha => {
                    let cal = CalibrationConfig { alpha: v, ..config.calibration };
                    let th = fit_thresholds(&base.world, &base.router, &base.data.calib, &cal, seed)?;
                    evaluate_policy(Policy::Routed, &base.world, &base.data.eval, Some(&base.router), Some(&th), seed)?.metrics
                }
                SweepParameter::TauScale => {
                    let world = scale_thresholds(&base.world, v);
                    Pipeline::fit(config, seed, world, base.data.clone())?.evaluate(Policy::Routed)?.metrics
                }
                SweepParameter::LambdaCost | SweepParameter::LambdaQuality => {
                    let mut cfg = config.clone();
                    if spec.parameter == SweepParameter::LambdaCost {
                        cfg.router.lambda_cost = v;
                    } else {
                        cfg.router.lambda_quality = v;
                    }
                    Pipeline::fit(&cfg, seed, base.world.clone(), base.data.clone())?.evaluate(Policy::Routed)?.metrics
                }
                SweepParameter::CostRatio => {
                    let world = World { tasks: base.world.tasks.clone(), portfolio: rescale_costs(&base.world.portfolio, v)? };
                    evaluate_policy(Policy::Routed, &world, &base.data.eval, Some(&base.router), Some(&base.thresholds), seed)?
                        .metrics
                }
                SweepParameter::Shift => {
                    let scenario = if v == 0.0 {
                        ShiftScenario::NONE
                    } else {
                        ShiftScenario::new(config.sweep.shift_kind, v)?
                    };
                    let shifted = apply_shift(&base.data.eval, scenario, derive_seed(seed, &[stream::SHIFT]))?;
                    evaluate_policy(Policy::Routed, &base.world, &shifted, Some(&base.router), Some(&base.thresholds), seed)?
                        .metrics
                }
            };
            Ok(SweepRow::from_metrics(spec.parameter, v, &metrics))
        })
        .collect()
}

/// `parameter,value,quality_ratio,cost_ratio,savings,t1t2_share,coverage_violation_rate,p99_ms`
pub fn write_sweep_csv<W: Write>(rows: &[SweepRow], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record([
        "parameter",
        "value",
        "quality_ratio",
        "cost_ratio",
        "savings",
        "t1t2_share",
        "coverage_violation_rate",
        "p99_ms",
    ])?;
    for r in rows {
        w.write_record([
            r.parameter.name().to_string(),
            format!("{:.6}", r.value),
            format!("{:.6}", r.quality_ratio),
            format!("{:.6}", r.cost_ratio),
            format!("{:.6}", r.savings),
            format!("{:.6}", r.cheap_share),
            format!("{:.6}", r.coverage_violation_rate),
            format!("{:.6}", r.p99_latency_ms),
        ])?;
    }
    w.flush()?;
    Ok(())
}
