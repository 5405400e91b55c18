//! Seeded synthetic query populations.
//!
//! A query carries a latent difficulty in `[0, 1]` that the router never sees,
//! and an observable feature vector: a task-specific affine embedding of the
//! difficulty plus isotropic Gaussian noise. The embedding depends only on the
//! workload's `embedding_seed`, so training, calibration and evaluation sets
//! drawn with different seeds share one feature geometry.

use std::io::Write;

use rand::distr::weighted::WeightedIndex;
use rand::seq::index;
use rand::Rng;
use rand_distr::{Beta, Distribution, LogNormal, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::rng::{rng_for, stream};

pub const MAX_TOKENS: u32 = 4096;
/// Norm of the feature offset carried by domain-shifted queries.
pub const DOMAIN_OFFSET_NORM: f64 = 3.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Structured,
    Generation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub name: String,
    /// Task quality threshold on the oracle quality scale.
    pub quality_threshold: f64,
    pub mix_weight: f64,
    #[serde(default = "default_sla_ms")]
    pub sla_latency_ms: f64,
    pub kind: TaskKind,
    #[serde(default = "default_beta_a")]
    pub difficulty_a: f64,
    #[serde(default = "default_beta_b")]
    pub difficulty_b: f64,
    pub token_median: f64,
    #[serde(default = "default_token_sigma")]
    pub token_sigma: f64,
}

fn default_sla_ms() -> f64 {
    500.0
}
fn default_beta_a() -> f64 {
    2.0
}
fn default_beta_b() -> f64 {
    5.0
}
fn default_token_sigma() -> f64 {
    0.5
}

impl TaskSpec {
    pub fn new(name: &str, tau: f64, weight: f64, kind: TaskKind, token_median: f64) -> Self {
        TaskSpec {
            name: name.to_string(),
            quality_threshold: tau,
            mix_weight: weight,
            sla_latency_ms: default_sla_ms(),
            kind,
            difficulty_a: default_beta_a(),
            difficulty_b: default_beta_b(),
            token_median,
            token_sigma: default_token_sigma(),
        }
    }
}

/// The six reference tasks with their thresholds mapped onto the oracle scale.
pub fn default_tasks() -> Vec<TaskSpec> {
    use TaskKind::*;
    vec![
        TaskSpec::new("fin_ner", 0.90, 0.20, Structured, 120.0),
        TaskSpec::new("fin_summarization", 0.42, 0.15, Generation, 400.0),
        TaskSpec::new("cs_intent", 0.92, 0.25, Structured, 20.0),
        TaskSpec::new("cs_response", 0.65, 0.15, Generation, 250.0),
        TaskSpec::new("legal_clause", 0.88, 0.15, Structured, 150.0),
        TaskSpec::new("legal_risk", 0.82, 0.10, Structured, 60.0),
    ]
}

pub fn validate_tasks(tasks: &[TaskSpec]) -> Result<()> {
    if tasks.is_empty() {
        return Err(Error::Config("at least one task is required".into()));
    }
    let total: f64 = tasks.iter().map(|t| t.mix_weight).sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("task mix weights sum to {total}, expected 1")));
    }
    for t in tasks {
        if !(t.quality_threshold > 0.0 && t.quality_threshold < 1.0) {
            return Err(Error::Config(format!(
                "task {}: quality_threshold {} outside (0,1)",
                t.name, t.quality_threshold
            )));
        }
        if !(t.mix_weight >= 0.0) {
            return Err(Error::Config(format!("task {}: negative mix weight", t.name)));
        }
        if !(t.difficulty_a > 0.0 && t.difficulty_b > 0.0) {
            return Err(Error::Config(format!(
                "task {}: Beta({}, {}) needs positive parameters",
                t.name, t.difficulty_a, t.difficulty_b
            )));
        }
        if !(t.sla_latency_ms > 0.0) || !(t.token_median >= 1.0) || !(t.token_sigma >= 0.0) {
            return Err(Error::Config(format!("task {}: invalid latency/token settings", t.name)));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorkloadConfig {
    pub tasks: Vec<TaskSpec>,
    pub feature_dim: usize,
    pub feature_noise: f64,
    pub embedding_seed: u64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Query {
    pub query_id: u64,
    pub task_id: usize,
    pub difficulty: f64,
    pub features: Vec<f64>,
    pub token_len: u32,
    /// Set on queries moved to the unseen embedding region by a domain shift.
    pub shifted: bool,
}

/// Task-specific affine embedding of difficulty into feature space.
#[derive(Debug, Clone)]
pub struct FeatureEmbedding {
    weights: Vec<Vec<f64>>,
    offsets: Vec<Vec<f64>>,
}

impl FeatureEmbedding {
    pub fn new(num_tasks: usize, feature_dim: usize, embedding_seed: u64) -> Self {
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let mut weights = Vec::with_capacity(num_tasks);
        let mut offsets = Vec::with_capacity(num_tasks);
        for t in 0..num_tasks {
            let mut rng = rng_for(embedding_seed, &[stream::EMBEDDING, t as u64]);
            weights.push((0..feature_dim).map(|_| normal.sample(&mut rng)).collect());
            offsets.push((0..feature_dim).map(|_| normal.sample(&mut rng)).collect());
        }
        FeatureEmbedding { weights, offsets }
    }

    pub fn embed(&self, task: usize, difficulty: f64) -> Vec<f64> {
        self.weights[task]
            .iter()
            .zip(&self.offsets[task])
            .map(|(w, b)| difficulty * w + b)
            .collect()
    }

    pub fn direction(&self, task: usize) -> &[f64] {
        &self.weights[task]
    }
}

impl WorkloadConfig {
    pub fn validate(&self) -> Result<()> {
        validate_tasks(&self.tasks)?;
        if self.count == 0 {
            return Err(invalid("workload count must be at least 1"));
        }
        if self.feature_dim == 0 {
            return Err(invalid("feature dimension must be at least 1"));
        }
        if !(self.feature_noise >= 0.0) {
            return Err(invalid("feature noise must be non-negative"));
        }
        Ok(())
    }

    pub fn embedding(&self) -> FeatureEmbedding {
        FeatureEmbedding::new(self.tasks.len(), self.feature_dim, self.embedding_seed)
    }
}

pub fn generate_workload(config: &WorkloadConfig, seed: u64) -> Result<Vec<Query>> {
    config.validate()?;
    let embedding = config.embedding();
    let mix = WeightedIndex::new(config.tasks.iter().map(|t| t.mix_weight))
        .map_err(|e| Error::Config(format!("task mix: {e}")))?;
    let betas = config
        .tasks
        .iter()
        .map(|t| Beta::new(t.difficulty_a, t.difficulty_b).map_err(|e| invalid(e.to_string())))
        .collect::<Result<Vec<_>>>()?;
    let tokens = config
        .tasks
        .iter()
        .map(|t| LogNormal::new(t.token_median.ln(), t.token_sigma).map_err(|e| invalid(e.to_string())))
        .collect::<Result<Vec<_>>>()?;
    let noise = Normal::new(0.0, config.feature_noise).map_err(|e| invalid(e.to_string()))?;

    let mut rng = rng_for(seed, &[stream::WORKLOAD]);
    let queries = (0..config.count)
        .map(|i| {
            let task = mix.sample(&mut rng);
            let difficulty = betas[task].sample(&mut rng).clamp(0.0, 1.0);
            let raw_tokens: f64 = tokens[task].sample(&mut rng);
            let token_len = (raw_tokens.round() as u32).clamp(1, MAX_TOKENS);
            let mut features = embedding.embed(task, difficulty);
            if config.feature_noise > 0.0 {
                for f in &mut features {
                    *f += noise.sample(&mut rng);
                }
            }
            Query {
                query_id: i as u64,
                task_id: task,
                difficulty,
                features,
                token_len,
                shifted: false,
            }
        })
        .collect();
    Ok(queries)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShiftKind {
    None,
    DifficultyShift,
    DomainShift,
    TaskMixShift,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShiftScenario {
    pub kind: ShiftKind,
    pub magnitude: f64,
}

impl ShiftScenario {
    pub const NONE: ShiftScenario = ShiftScenario { kind: ShiftKind::None, magnitude: 0.0 };

    pub fn new(kind: ShiftKind, magnitude: f64) -> Result<Self> {
        let s = ShiftScenario { kind, magnitude };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        match self.kind {
            ShiftKind::None if self.magnitude != 0.0 => Err(invalid("shift kind none requires magnitude 0")),
            ShiftKind::DomainShift | ShiftKind::TaskMixShift
                if !(0.0..=1.0).contains(&self.magnitude) =>
            {
                Err(invalid(format!("shift magnitude {} outside [0,1]", self.magnitude)))
            }
            _ if !(self.magnitude >= 0.0) => Err(invalid("shift magnitude must be non-negative")),
            _ => Ok(()),
        }
    }
}

/// Apply a distribution shift to a query population.
///
/// * difficulty shift: every difficulty moves up by the magnitude, clamped to 1.
///   Features are left untouched, so the router does not see the change.
/// * domain shift: exactly `floor(magnitude * n)` queries get a seeded feature
///   offset of norm [`DOMAIN_OFFSET_NORM`] and are flagged `shifted`.
/// * task-mix shift: the population is resampled so task frequencies become
///   `(1 - m) * p + m * reverse(p)`, where `p` is the observed mix.
pub fn apply_shift(queries: &[Query], scenario: ShiftScenario, seed: u64) -> Result<Vec<Query>> {
    if queries.is_empty() {
        return Err(invalid("cannot shift an empty query list"));
    }
    scenario.validate()?;
    let mut out = queries.to_vec();
    match scenario.kind {
        ShiftKind::None => {}
        ShiftKind::DifficultyShift => {
            for q in &mut out {
                q.difficulty = (q.difficulty + scenario.magnitude).clamp(0.0, 1.0);
            }
        }
        ShiftKind::DomainShift => {
            let mut rng = rng_for(seed, &[stream::SHIFT, 1]);
            let dim = out[0].features.len();
            let normal = Normal::new(0.0, 1.0).expect("unit normal");
            let mut offset: Vec<f64> = (0..dim).map(|_| normal.sample(&mut rng)).collect();
            let norm = offset.iter().map(|v| v * v).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
            for v in &mut offset {
                *v *= DOMAIN_OFFSET_NORM / norm;
            }
            let n_shift = (scenario.magnitude * out.len() as f64).floor() as usize;
            for i in index::sample(&mut rng, out.len(), n_shift) {
                let q = &mut out[i];
                for (f, o) in q.features.iter_mut().zip(&offset) {
                    *f += o;
                }
                q.shifted = true;
            }
        }
        ShiftKind::TaskMixShift => {
            let num_tasks = out.iter().map(|q| q.task_id).max().unwrap_or(0) + 1;
            let mut by_task: Vec<Vec<usize>> = vec![Vec::new(); num_tasks];
            for (i, q) in queries.iter().enumerate() {
                by_task[q.task_id].push(i);
            }
            let n = queries.len() as f64;
            let observed: Vec<f64> = by_task.iter().map(|v| v.len() as f64 / n).collect();
            let m = scenario.magnitude;
            let target: Vec<f64> = (0..num_tasks)
                .map(|t| {
                    let w = (1.0 - m) * observed[t] + m * observed[num_tasks - 1 - t];
                    if by_task[t].is_empty() { 0.0 } else { w }
                })
                .collect();
            let mix = WeightedIndex::new(&target).map_err(|e| invalid(format!("task mix shift: {e}")))?;
            let mut rng = rng_for(seed, &[stream::SHIFT, 2]);
            out = (0..queries.len())
                .map(|i| {
                    let t = mix.sample(&mut rng);
                    let src = by_task[t][rng.random_range(0..by_task[t].len())];
                    let mut q = queries[src].clone();
                    q.query_id = i as u64;
                    q
                })
                .collect();
        }
    }
    Ok(out)
}

pub fn write_workload_csv<W: Write>(queries: &[Query], writer: W) -> Result<()> {
    let dim = queries.first().map_or(0, |q| q.features.len());
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["query_id".to_string(), "task_id".into(), "difficulty".into(), "token_len".into()];
    header.extend((0..dim).map(|i| format!("f{i}")));
    w.write_record(&header)?;
    for q in queries {
        let mut rec = vec![
            q.query_id.to_string(),
            q.task_id.to_string(),
            format!("{:.6}", q.difficulty),
            q.token_len.to_string(),
        ];
        rec.extend(q.features.iter().map(|f| format!("{f:.6}")));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}
