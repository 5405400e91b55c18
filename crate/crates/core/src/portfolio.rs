//! Parametric model oracles for the tiers of a portfolio.
//!
//! Tier `k` answers a query of difficulty `d` with quality
//! `clamp01(link((c - d) / s) + N(0, noise))`, where `c` is the tier's
//! effective capability. Its uncertainty is the mean of `(1 - p_i)` over
//! `L = min(tokens, 64)` per-token confidences drawn from a Beta distribution
//! with mean `link((c - d) / s_u)`. Tier indices are zero-based in code and
//! printed one-based (`T1`..`TK`) in every artifact.

use rand_distr::{Beta, Distribution, Exp, LogNormal, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng_for, stream};
use crate::workload::{Query, TaskSpec};

/// Cap on the number of simulated token confidences per response.
pub const UNCERTAINTY_TOKENS: u32 = 64;
const CONFIDENCE_CLAMP: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Link {
    #[default]
    Logistic,
    Probit,
}

impl Link {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Link::Logistic => 1.0 / (1.0 + (-x).exp()),
            Link::Probit => 0.5 * statrs::function::erf::erfc(-x / std::f64::consts::SQRT_2),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ServiceModel {
    #[default]
    Exponential,
    /// Log-normal service with the same mean as the exponential model.
    LogNormal { sigma: f64 },
}

impl ServiceModel {
    /// Sample a service time in seconds for a server with the given rate.
    pub fn sample<R: rand::Rng + ?Sized>(&self, rate: f64, rng: &mut R) -> f64 {
        match *self {
            ServiceModel::Exponential => Exp::new(rate).expect("positive rate").sample(rng),
            ServiceModel::LogNormal { sigma } => {
                let mu = (1.0 / rate).ln() - 0.5 * sigma * sigma;
                LogNormal::new(mu, sigma).expect("valid log-normal").sample(rng)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TierSpec {
    pub name: String,
    /// Price per 1K output tokens.
    pub cost_per_1k: f64,
    pub capability: f64,
    #[serde(default = "default_scale")]
    pub quality_scale: f64,
    #[serde(default = "default_quality_noise")]
    pub quality_noise: f64,
    #[serde(default = "default_scale")]
    pub uncertainty_scale: f64,
    /// Beta concentration of simulated token confidences.
    #[serde(default = "default_concentration")]
    pub confidence_concentration: f64,
    pub workers: usize,
    /// Completions per second per worker.
    pub service_rate: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rate_limit_per_sec: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub burst: Option<f64>,
}

fn default_scale() -> f64 {
    0.08
}
fn default_quality_noise() -> f64 {
    0.02
}
fn default_concentration() -> f64 {
    40.0
}

impl TierSpec {
    pub fn new(name: &str, cost_per_1k: f64, capability: f64, workers: usize, service_rate: f64) -> Self {
        TierSpec {
            name: name.to_string(),
            cost_per_1k,
            capability,
            quality_scale: default_scale(),
            quality_noise: default_quality_noise(),
            uncertainty_scale: default_scale(),
            confidence_concentration: default_concentration(),
            workers,
            service_rate,
            rate_limit_per_sec: None,
            burst: None,
        }
    }

    pub fn cost_for(&self, tokens: u32) -> f64 {
        self.cost_per_1k * tokens as f64 / 1000.0
    }
}

/// Localized capability boost, the stand-in for targeted distillation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CapabilityPatch {
    pub tier: usize,
    pub task_id: usize,
    pub centroid: Vec<f64>,
    pub radius: f64,
    pub boost: f64,
}

impl CapabilityPatch {
    pub fn covers(&self, query: &Query) -> bool {
        query.task_id == self.task_id
            && self.centroid.len() == query.features.len()
            && squared_distance(&self.centroid, &query.features) <= self.radius * self.radius
    }
}

pub(crate) fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QualityOutcome {
    pub quality: f64,
    pub passes: bool,
    pub uncertainty: f64,
    pub tokens: u32,
    pub cost: f64,
    pub latency_ms: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Portfolio {
    pub tiers: Vec<TierSpec>,
    pub link: Link,
    /// Patched capability stays at least this far below the top tier.
    pub cap_margin: f64,
    pub service_model: ServiceModel,
    pub patches: Vec<CapabilityPatch>,
}

pub fn default_tiers() -> Vec<TierSpec> {
    let mut t4 = TierSpec::new("T4", 8.00, 0.95, 1, 2.5);
    t4.rate_limit_per_sec = Some(60.0);
    t4.burst = Some(60.0);
    vec![
        TierSpec::new("T1", 0.01, 0.35, 8, 100.0),
        TierSpec::new("T2", 0.10, 0.55, 4, 60.0),
        TierSpec::new("T3", 0.80, 0.75, 4, 25.0),
        t4,
    ]
}

impl Default for Portfolio {
    fn default() -> Self {
        Portfolio {
            tiers: default_tiers(),
            link: Link::Logistic,
            cap_margin: 0.01,
            service_model: ServiceModel::Exponential,
            patches: Vec::new(),
        }
    }
}

impl Portfolio {
    pub fn new(tiers: Vec<TierSpec>) -> Result<Self> {
        let p = Portfolio { tiers, ..Portfolio::default() };
        p.validate()?;
        Ok(p)
    }

    pub fn num_tiers(&self) -> usize {
        self.tiers.len()
    }

    pub fn top(&self) -> usize {
        self.tiers.len() - 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.tiers.is_empty() {
            return Err(Error::Config("portfolio needs at least one tier".into()));
        }
        for (i, t) in self.tiers.iter().enumerate() {
            let bad = |what: &str| Error::Config(format!("tier T{} ({}): {what}", i + 1, t.name));
            if !(t.cost_per_1k > 0.0) {
                return Err(bad("cost_per_1k must be positive"));
            }
            if !(t.quality_scale > 0.0 && t.uncertainty_scale > 0.0 && t.confidence_concentration > 0.0) {
                return Err(bad("scales and concentration must be positive"));
            }
            if !(t.quality_noise >= 0.0) {
                return Err(bad("quality_noise must be non-negative"));
            }
            if t.workers == 0 {
                return Err(bad("workers must be at least 1"));
            }
            if !(t.service_rate > 0.0) {
                return Err(bad("service_rate must be positive"));
            }
            if t.rate_limit_per_sec.is_some_and(|r| !(r > 0.0)) || t.burst.is_some_and(|b| !(b >= 1.0)) {
                return Err(bad("rate limit must be positive and burst at least 1"));
            }
            if i > 0 {
                let prev = &self.tiers[i - 1];
                if !(t.cost_per_1k > prev.cost_per_1k) {
                    return Err(bad("costs must be strictly increasing by tier"));
                }
                if !(t.capability > prev.capability) {
                    return Err(bad("capabilities must be strictly increasing by tier"));
                }
            }
        }
        if !(self.cap_margin > 0.0) {
            return Err(Error::Config("cap_margin must be positive".into()));
        }
        if let ServiceModel::LogNormal { sigma } = self.service_model {
            if !(sigma > 0.0) {
                return Err(Error::Config("log-normal sigma must be positive".into()));
            }
        }
        Ok(())
    }

    pub fn with_patches(&self, patches: Vec<CapabilityPatch>) -> Self {
        Portfolio { patches, ..self.clone() }
    }

    /// Base capability plus every covering patch's boost, capped below the top tier.
    pub fn effective_capability(&self, tier: usize, query: &Query) -> f64 {
        let base = self.tiers[tier].capability;
        if tier == self.top() {
            return base;
        }
        let boost: f64 = self
            .patches
            .iter()
            .filter(|p| p.tier == tier && p.covers(query))
            .map(|p| p.boost)
            .sum();
        if boost <= 0.0 {
            return base;
        }
        let cap = self.tiers[self.top()].capability - self.cap_margin;
        (base + boost).min(cap).max(base)
    }

    /// Noiseless quality of `tier` on `query`.
    pub fn expected_quality(&self, tier: usize, query: &Query) -> f64 {
        let spec = &self.tiers[tier];
        let c = self.effective_capability(tier, query);
        self.link.apply((c - query.difficulty) / spec.quality_scale)
    }

    /// Mean of the token-confidence distribution.
    pub fn mean_confidence(&self, tier: usize, query: &Query) -> f64 {
        let spec = &self.tiers[tier];
        let c = self.effective_capability(tier, query);
        self.link
            .apply((c - query.difficulty) / spec.uncertainty_scale)
            .clamp(CONFIDENCE_CLAMP, 1.0 - CONFIDENCE_CLAMP)
    }

    /// One seeded oracle evaluation. Quality noise, token confidences and
    /// latency use separate sub-streams, so changing capability leaves the
    /// quality-noise and latency draws untouched.
    pub fn evaluate(&self, tier: usize, query: &Query, tau: f64, seed: u64) -> QualityOutcome {
        let spec = &self.tiers[tier];
        let mut quality = self.expected_quality(tier, query);
        if spec.quality_noise > 0.0 {
            let mut rng = rng_for(seed, &[0]);
            quality += Normal::new(0.0, spec.quality_noise).expect("noise").sample(&mut rng);
        }
        let quality = quality.clamp(0.0, 1.0);

        let m = self.mean_confidence(tier, query);
        let kappa = spec.confidence_concentration;
        let beta = Beta::new(m * kappa, (1.0 - m) * kappa).expect("valid confidence Beta");
        let mut rng = rng_for(seed, &[1]);
        let len = query.token_len.min(UNCERTAINTY_TOKENS).max(1);
        let total: f64 = (0..len).map(|_| 1.0 - beta.sample(&mut rng)).sum();
        let uncertainty = (total / len as f64).clamp(0.0, 1.0);

        let mut rng = rng_for(seed, &[2]);
        let latency_ms = 1000.0 * self.service_model.sample(spec.service_rate, &mut rng);

        QualityOutcome {
            quality,
            passes: quality >= tau,
            uncertainty,
            tokens: query.token_len,
            cost: spec.cost_for(query.token_len),
            latency_ms,
        }
    }
}

/// Seed for the evaluation of `query_id` at `tier` within one run.
pub fn evaluation_seed(run_seed: u64, query_id: u64, tier: usize) -> u64 {
    derive_seed(run_seed, &[stream::EVALUATE, query_id, tier as u64])
}

/// Tasks plus portfolio: everything needed to grade a response.
#[derive(Debug, Clone, PartialEq)]
pub struct World {
    pub tasks: Vec<TaskSpec>,
    pub portfolio: Portfolio,
}

impl World {
    pub fn tau(&self, task: usize) -> f64 {
        self.tasks[task].quality_threshold
    }

    pub fn num_tiers(&self) -> usize {
        self.portfolio.num_tiers()
    }

    pub fn num_tasks(&self) -> usize {
        self.tasks.len()
    }

    pub fn evaluate(&self, tier: usize, query: &Query, run_seed: u64) -> QualityOutcome {
        self.portfolio.evaluate(
            tier,
            query,
            self.tau(query.task_id),
            evaluation_seed(run_seed, query.query_id, tier),
        )
    }

    /// Cheapest tier whose single seeded evaluation passes, if any.
    pub fn cheapest_sufficient_tier(&self, query: &Query, run_seed: u64) -> Option<usize> {
        (0..self.num_tiers()).find(|&k| self.evaluate(k, query, run_seed).passes)
    }

    pub fn with_patches(&self, patches: Vec<CapabilityPatch>) -> World {
        World { tasks: self.tasks.clone(), portfolio: self.portfolio.with_patches(patches) }
    }
}
