//! Run configuration: one TOML file describes one reproducible experiment.
//!
//! Every section has defaults, so an empty file is the reference setup.
//! Unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::calibration::CalibrationConfig;
use crate::cascade::Policy;
use crate::error::{Error, Result};
use crate::portfolio::{default_tiers, Link, Portfolio, ServiceModel, TierSpec};
use crate::router::TrainingConfig;
use crate::workload::{default_tasks, validate_tasks, ShiftKind, TaskSpec, WorkloadConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorkloadSection {
    pub feature_dim: usize,
    pub feature_noise: f64,
    pub embedding_seed: u64,
    pub train_count: usize,
    pub calib_count: usize,
    pub eval_count: usize,
    pub tasks: Vec<TaskSpec>,
}

impl Default for WorkloadSection {
    fn default() -> Self {
        WorkloadSection {
            feature_dim: 16,
            feature_noise: 0.3,
            embedding_seed: 7,
            train_count: 6_000,
            calib_count: 30_000,
            eval_count: 10_000,
            tasks: default_tasks(),
        }
    }
}

impl WorkloadSection {
    pub fn workload(&self, count: usize) -> WorkloadConfig {
        WorkloadConfig {
            tasks: self.tasks.clone(),
            feature_dim: self.feature_dim,
            feature_noise: self.feature_noise,
            embedding_seed: self.embedding_seed,
            count,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PortfolioSection {
    pub link: Link,
    pub cap_margin: f64,
    pub service: ServiceModel,
    pub tiers: Vec<TierSpec>,
}

impl Default for PortfolioSection {
    fn default() -> Self {
        let p = Portfolio::default();
        PortfolioSection { link: p.link, cap_margin: p.cap_margin, service: p.service_model, tiers: default_tiers() }
    }
}

impl PortfolioSection {
    pub fn portfolio(&self) -> Result<Portfolio> {
        let p = Portfolio {
            tiers: self.tiers.clone(),
            link: self.link,
            cap_margin: self.cap_margin,
            service_model: self.service,
            patches: Vec::new(),
        };
        p.validate()?;
        Ok(p)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CooptConfig {
    /// Stop once consecutive cost ratios differ by less than this.
    pub epsilon: f64,
    pub max_iterations: usize,
    /// Fraction of the gap to the top tier's capability granted by a patch.
    pub eta: f64,
    /// Clusters kept per task.
    pub top_n: usize,
    pub candidate_ks: Vec<usize>,
    pub max_pca_dim: usize,
    /// Share of each selected cluster, hardest first, put in the distillation set.
    pub hardest_fraction: f64,
    /// In-distribution samples added, relative to the selected failures.
    pub in_distribution_fraction: f64,
    /// Member-distance quantile used as the patch radius.
    pub radius_quantile: f64,
    /// Allowed drop of quality ratio below its first value.
    pub quality_tolerance: f64,
}

impl Default for CooptConfig {
    fn default() -> Self {
        CooptConfig {
            epsilon: 0.005,
            max_iterations: 10,
            eta: 0.6,
            top_n: 5,
            candidate_ks: vec![5, 10, 20],
            max_pca_dim: 128,
            hardest_fraction: 0.3,
            in_distribution_fraction: 0.2,
            radius_quantile: 0.9,
            quality_tolerance: 0.01,
        }
    }
}

impl CooptConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("coopt: {m}")));
        if !(self.epsilon > 0.0) {
            return bad("epsilon must be positive");
        }
        if self.max_iterations == 0 || self.top_n == 0 || self.max_pca_dim == 0 {
            return bad("max_iterations, top_n and max_pca_dim must be positive");
        }
        if !(self.eta > 0.0 && self.eta <= 1.0) {
            return bad("eta must lie in (0,1]");
        }
        if self.candidate_ks.is_empty() || self.candidate_ks.contains(&0) {
            return bad("candidate_ks must be nonempty and positive");
        }
        if !(self.hardest_fraction > 0.0 && self.hardest_fraction <= 1.0) {
            return bad("hardest_fraction must lie in (0,1]");
        }
        if !(self.in_distribution_fraction >= 0.0) || !(self.radius_quantile > 0.0 && self.radius_quantile <= 1.0) {
            return bad("in_distribution_fraction must be non-negative and radius_quantile in (0,1]");
        }
        if !(self.quality_tolerance >= 0.0) {
            return bad("quality_tolerance must be non-negative");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LatencyConfig {
    pub arrival_rates_per_min: Vec<f64>,
    pub duration_s: f64,
    pub warmup_s: f64,
    pub policies: Vec<Policy>,
}

impl Default for LatencyConfig {
    fn default() -> Self {
        LatencyConfig {
            arrival_rates_per_min: vec![1_000.0, 5_000.0, 10_000.0, 20_000.0],
            duration_s: 300.0,
            warmup_s: 30.0,
            policies: vec![Policy::Routed, Policy::AlwaysTop],
        }
    }
}

impl LatencyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.arrival_rates_per_min.is_empty() || self.arrival_rates_per_min.iter().any(|r| !(*r > 0.0)) {
            return Err(Error::Config("latency: arrival rates must be positive".into()));
        }
        if !(self.warmup_s >= 0.0 && self.warmup_s < self.duration_s) {
            return Err(Error::Config("latency: need 0 <= warmup_s < duration_s".into()));
        }
        if self.policies.is_empty() {
            return Err(Error::Config("latency: at least one policy".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParameter {
    Alpha,
    TauScale,
    LambdaCost,
    LambdaQuality,
    CostRatio,
    Shift,
}

impl SweepParameter {
    pub const ALL: [SweepParameter; 6] = [
        SweepParameter::Alpha,
        SweepParameter::TauScale,
        SweepParameter::LambdaCost,
        SweepParameter::LambdaQuality,
        SweepParameter::CostRatio,
        SweepParameter::Shift,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SweepParameter::Alpha => "alpha",
            SweepParameter::TauScale => "tau_scale",
            SweepParameter::LambdaCost => "lambda_cost",
            SweepParameter::LambdaQuality => "lambda_quality",
            SweepParameter::CostRatio => "cost_ratio",
            SweepParameter::Shift => "shift",
        }
    }
}

impl std::str::FromStr for SweepParameter {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SweepParameter::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown sweep parameter {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepSpec {
    pub parameter: SweepParameter,
    pub values: Vec<f64>,
}

impl SweepSpec {
    pub fn validate(&self) -> Result<()> {
        let name = self.parameter.name();
        if self.values.is_empty() {
            return Err(Error::Config(format!("sweep {name}: no values")));
        }
        if !self.values.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::Config(format!("sweep {name}: values must be strictly increasing")));
        }
        let ok = match self.parameter {
            SweepParameter::Alpha => self.values.iter().all(|&a| a > 0.0 && a < 1.0),
            SweepParameter::LambdaCost | SweepParameter::LambdaQuality => self.values.iter().all(|&v| v >= 0.0),
            SweepParameter::TauScale | SweepParameter::CostRatio => self.values.iter().all(|&v| v > 0.0),
            SweepParameter::Shift => self.values.iter().all(|&v| (0.0..=1.0).contains(&v)),
        };
        if !ok {
            return Err(Error::Config(format!("sweep {name}: value out of range")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSection {
    pub alpha: Vec<f64>,
    pub tau_scale: Vec<f64>,
    pub lambda_cost: Vec<f64>,
    pub lambda_quality: Vec<f64>,
    /// Ratios of the top tier's price to the cheapest tier's.
    pub cost_ratio: Vec<f64>,
    pub shift: Vec<f64>,
    pub shift_kind: ShiftKind,
}

impl Default for SweepSection {
    fn default() -> Self {
        SweepSection {
            alpha: vec![0.01, 0.03, 0.05, 0.10, 0.15],
            tau_scale: vec![0.90, 0.95, 1.0, 1.05, 1.10],
            lambda_cost: vec![0.1, 0.2, 0.3, 0.5],
            lambda_quality: vec![0.25, 0.5, 0.75, 1.0],
            cost_ratio: vec![50.0, 100.0, 200.0, 400.0, 800.0],
            shift: vec![0.0, 0.1, 0.2, 0.3],
            shift_kind: ShiftKind::DifficultyShift,
        }
    }
}

impl SweepSection {
    pub fn spec(&self, parameter: SweepParameter) -> SweepSpec {
        let values = match parameter {
            SweepParameter::Alpha => &self.alpha,
            SweepParameter::TauScale => &self.tau_scale,
            SweepParameter::LambdaCost => &self.lambda_cost,
            SweepParameter::LambdaQuality => &self.lambda_quality,
            SweepParameter::CostRatio => &self.cost_ratio,
            SweepParameter::Shift => &self.shift,
        };
        SweepSpec { parameter, values: values.clone() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub workload: WorkloadSection,
    pub portfolio: PortfolioSection,
    pub router: TrainingConfig,
    pub calibration: CalibrationConfig,
    pub coopt: CooptConfig,
    pub latency: LatencyConfig,
    pub sweep: SweepSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 42,
            output_dir: PathBuf::from("runs/reference"),
            workload: WorkloadSection::default(),
            portfolio: PortfolioSection::default(),
            router: TrainingConfig::default(),
            calibration: CalibrationConfig::default(),
            coopt: CooptConfig::default(),
            latency: LatencyConfig::default(),
            sweep: SweepSection::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        validate_tasks(&self.workload.tasks)?;
        self.workload.workload(1).validate()?;
        if self.workload.train_count < 2 || self.workload.calib_count == 0 || self.workload.eval_count == 0 {
            return Err(Error::Config("workload: train_count >= 2 and positive calib/eval counts required".into()));
        }
        self.portfolio.portfolio()?;
        self.router.validate()?;
        self.calibration.validate()?;
        self.coopt.validate()?;
        self.latency.validate()?;
        for p in SweepParameter::ALL {
            self.sweep.spec(p).validate()?;
        }
        Ok(())
    }
}
