//! Task-conditioned difficulty router.
//!
//! Input is the query's feature vector concatenated with a learned task
//! embedding; one rectified hidden layer feeds a softmax over tiers. Training
//! minimizes
//!
//! ```text
//! CE(p, label) + lambda_cost * sum_k p_k c_k / c_K + lambda_quality * sum_k p_k fail_k
//! ```
//!
//! averaged over the batch, with plain mini-batch gradient descent and early
//! stopping on a held-out split.

use std::fmt::Write as _;
use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::portfolio::World;
use crate::rng::{rng_for, stream};
use crate::workload::Query;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RouterDims {
    pub tasks: usize,
    pub features: usize,
    pub embed: usize,
    pub hidden: usize,
    pub tiers: usize,
}

impl RouterDims {
    fn input(&self) -> usize {
        self.features + self.embed
    }

    pub fn num_params(&self) -> usize {
        self.tasks * self.embed + self.input() * self.hidden + self.hidden + self.hidden * self.tiers + self.tiers
    }

    // offsets into the flat parameter vector
    fn w1(&self) -> usize {
        self.tasks * self.embed
    }
    fn b1(&self) -> usize {
        self.w1() + self.input() * self.hidden
    }
    fn w2(&self) -> usize {
        self.b1() + self.hidden
    }
    fn b2(&self) -> usize {
        self.w2() + self.hidden * self.tiers
    }
}

/// Router parameters stored as one flat vector in the order
/// task embeddings (T x E), hidden weights ((F+E) x H), hidden bias (H),
/// output weights (H x K), output bias (K); all row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct RouterModel {
    pub dims: RouterDims,
    pub params: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Forward {
    pub probabilities: Vec<f64>,
    pub hidden: Vec<f64>,
    pub logits: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledExample {
    pub query: Query,
    /// Zero-based cheapest sufficient tier; queries no tier satisfies get the top tier.
    pub tier_label: usize,
    pub pass_vector: Vec<bool>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    pub lambda_cost: f64,
    pub lambda_quality: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub patience: usize,
    pub validation_fraction: f64,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub seed: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            lambda_cost: 0.3,
            lambda_quality: 0.5,
            learning_rate: 0.05,
            batch_size: 64,
            epochs: 60,
            patience: 3,
            validation_fraction: 0.2,
            embed_dim: 8,
            hidden_dim: 32,
            seed: 0,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_cost >= 0.0 && self.lambda_quality >= 0.0) {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        if !(self.learning_rate > 0.0) || self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("learning rate, batch size and epochs must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::Config("validation_fraction must lie in [0,1)".into()));
        }
        if self.embed_dim == 0 || self.hidden_dim == 0 {
            return Err(Error::Config("embed_dim and hidden_dim must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lambda_cost: f64,
    pub lambda_quality: f64,
}

impl From<&TrainingConfig> for LossWeights {
    fn from(c: &TrainingConfig) -> Self {
        LossWeights { lambda_cost: c.lambda_cost, lambda_quality: c.lambda_quality }
    }
}

pub(crate) fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Index of the largest value; ties go to the lowest (cheapest) index.
pub fn argmax_tier(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

impl RouterModel {
    pub fn zeros(dims: RouterDims) -> Self {
        RouterModel { dims, params: vec![0.0; dims.num_params()] }
    }

    /// Xavier-uniform weights, small Gaussian task embeddings, zero biases.
    pub fn init(dims: RouterDims, seed: u64) -> Self {
        let mut m = RouterModel::zeros(dims);
        let mut rng = rng_for(seed, &[stream::TRAIN, 0]);
        let emb = Normal::new(0.0, 0.1).expect("normal");
        for v in &mut m.params[..dims.w1()] {
            *v = emb.sample(&mut rng);
        }
        let a1 = (6.0 / (dims.input() + dims.hidden) as f64).sqrt();
        for v in &mut m.params[dims.w1()..dims.b1()] {
            *v = rng.random_range(-a1..a1);
        }
        let a2 = (6.0 / (dims.hidden + dims.tiers) as f64).sqrt();
        for v in &mut m.params[dims.w2()..dims.b2()] {
            *v = rng.random_range(-a2..a2);
        }
        m
    }

    pub fn task_embedding(&self, task: usize) -> &[f64] {
        let e = self.dims.embed;
        &self.params[task * e..(task + 1) * e]
    }

    fn check(&self, query: &Query) -> Result<()> {
        if query.features.len() != self.dims.features {
            return Err(Error::DimensionMismatch { expected: self.dims.features, got: query.features.len() });
        }
        if query.task_id >= self.dims.tasks {
            return Err(invalid(format!("task id {} outside router's {} tasks", query.task_id, self.dims.tasks)));
        }
        Ok(())
    }

    fn forward_parts(&self, query: &Query) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let d = self.dims;
        let mut input = Vec::with_capacity(d.input());
        input.extend_from_slice(&query.features);
        input.extend_from_slice(self.task_embedding(query.task_id));

        let w1 = &self.params[d.w1()..d.b1()];
        let mut pre = self.params[d.b1()..d.w2()].to_vec();
        for (i, &x) in input.iter().enumerate() {
            if x != 0.0 {
                let row = &w1[i * d.hidden..(i + 1) * d.hidden];
                for (z, w) in pre.iter_mut().zip(row) {
                    *z += x * w;
                }
            }
        }
        let hidden: Vec<f64> = pre.iter().map(|&z| z.max(0.0)).collect();
        let w2 = &self.params[d.w2()..d.b2()];
        let mut logits = self.params[d.b2()..].to_vec();
        for (j, &h) in hidden.iter().enumerate() {
            if h != 0.0 {
                let row = &w2[j * d.tiers..(j + 1) * d.tiers];
                for (z, w) in logits.iter_mut().zip(row) {
                    *z += h * w;
                }
            }
        }
        (input, pre, logits)
    }

    pub fn forward(&self, query: &Query) -> Result<Forward> {
        self.check(query)?;
        let (_, pre, logits) = self.forward_parts(query);
        Ok(Forward {
            probabilities: softmax(&logits),
            hidden: pre.iter().map(|&z| z.max(0.0)).collect(),
            logits,
        })
    }

    pub fn predict_tier(&self, query: &Query) -> Result<usize> {
        Ok(argmax_tier(&self.forward(query)?.probabilities))
    }

    /// Write the checkpoint text format. Values use the shortest
    /// representation that parses back to the same bits.
    pub fn write_checkpoint<W: Write>(&self, mut w: W) -> Result<()> {
        let d = self.dims;
        let mut out = String::new();
        writeln!(out, "tierroute-router v1").unwrap();
        writeln!(
            out,
            "dims tasks={} features={} embed={} hidden={} tiers={}",
            d.tasks, d.features, d.embed, d.hidden, d.tiers
        )
        .unwrap();
        let tensors: [(&str, usize, usize, usize); 5] = [
            ("task_embeddings", d.tasks, d.embed, 0),
            ("hidden_weights", d.input(), d.hidden, d.w1()),
            ("hidden_bias", 1, d.hidden, d.b1()),
            ("output_weights", d.hidden, d.tiers, d.w2()),
            ("output_bias", 1, d.tiers, d.b2()),
        ];
        for (name, rows, cols, off) in tensors {
            writeln!(out, "tensor {name} {rows} {cols}").unwrap();
            for r in 0..rows {
                let row = &self.params[off + r * cols..off + (r + 1) * cols];
                let line: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
                writeln!(out, "{}", line.join(" ")).unwrap();
            }
        }
        w.write_all(out.as_bytes())?;
        Ok(())
    }

    pub fn read_checkpoint<R: BufRead>(r: R) -> Result<Self> {
        let bad = |detail: String| Error::Parse { what: "router checkpoint", detail };
        let mut lines = r.lines();
        let mut next = || -> Result<String> {
            lines.next().ok_or_else(|| bad("unexpected end of file".into()))?.map_err(Error::from)
        };
        if next()?.trim() != "tierroute-router v1" {
            return Err(bad("unknown header".into()));
        }
        let dims_line = next()?;
        let mut vals = [0usize; 5];
        let keys = ["tasks", "features", "embed", "hidden", "tiers"];
        let fields: Vec<&str> = dims_line.split_whitespace().collect();
        if fields.len() != 6 || fields[0] != "dims" {
            return Err(bad(format!("bad dims line: {dims_line}")));
        }
        for (i, key) in keys.iter().enumerate() {
            let (k, v) = fields[i + 1].split_once('=').ok_or_else(|| bad(format!("bad dims field {}", fields[i + 1])))?;
            if k != *key {
                return Err(bad(format!("expected {key}, found {k}")));
            }
            vals[i] = v.parse().map_err(|_| bad(format!("bad integer {v}")))?;
        }
        let dims = RouterDims { tasks: vals[0], features: vals[1], embed: vals[2], hidden: vals[3], tiers: vals[4] };
        let mut params = Vec::with_capacity(dims.num_params());
        let expected = [
            ("task_embeddings", dims.tasks, dims.embed),
            ("hidden_weights", dims.input(), dims.hidden),
            ("hidden_bias", 1, dims.hidden),
            ("output_weights", dims.hidden, dims.tiers),
            ("output_bias", 1, dims.tiers),
        ];
        for (name, rows, cols) in expected {
            let header = next()?;
            if header.split_whitespace().collect::<Vec<_>>() != ["tensor", name, &rows.to_string(), &cols.to_string()] {
                return Err(bad(format!("expected tensor {name} {rows} {cols}, found `{header}`")));
            }
            for _ in 0..rows {
                let line = next()?;
                let row: Vec<f64> = line
                    .split_whitespace()
                    .map(|t| t.parse::<f64>().map_err(|_| bad(format!("bad float {t}"))))
                    .collect::<Result<_>>()?;
                if row.len() != cols {
                    return Err(bad(format!("tensor {name}: row has {} values, expected {cols}", row.len())));
                }
                params.extend(row);
            }
        }
        Ok(RouterModel { dims, params })
    }
}

/// Composite loss and its exact gradient with respect to every parameter.
///
/// `normalized_costs[k]` is `c_k / c_K`.
pub fn composite_loss(
    model: &RouterModel,
    batch: &[LabeledExample],
    weights: LossWeights,
    normalized_costs: &[f64],
) -> Result<(f64, Vec<f64>)> {
    if batch.is_empty() {
        return Err(invalid("empty batch"));
    }
    let d = model.dims;
    if normalized_costs.len() != d.tiers {
        return Err(Error::DimensionMismatch { expected: d.tiers, got: normalized_costs.len() });
    }
    let mut grad = vec![0.0; d.num_params()];
    let mut loss = 0.0;
    let scale = 1.0 / batch.len() as f64;
    let w1 = &model.params[d.w1()..d.b1()];
    let w2 = &model.params[d.w2()..d.b2()];

    let mut g_logits = vec![0.0; d.tiers];
    let mut g_pre = vec![0.0; d.hidden];
    for ex in batch {
        model.check(&ex.query)?;
        if ex.pass_vector.len() != d.tiers || ex.tier_label >= d.tiers {
            return Err(invalid("label or pass vector does not match router tiers"));
        }
        let (input, pre, logits) = model.forward_parts(&ex.query);
        let p = softmax(&logits);
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let log_sum = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
        let ce = log_sum - logits[ex.tier_label];
        let fail: Vec<f64> = ex.pass_vector.iter().map(|&ok| if ok { 0.0 } else { 1.0 }).collect();
        let exp_cost: f64 = p.iter().zip(normalized_costs).map(|(a, b)| a * b).sum();
        let exp_fail: f64 = p.iter().zip(&fail).map(|(a, b)| a * b).sum();
        loss += ce + weights.lambda_cost * exp_cost + weights.lambda_quality * exp_fail;

        // d/dz_j sum_k p_k v_k = p_j (v_j - sum_k p_k v_k)
        for k in 0..d.tiers {
            let onehot = if k == ex.tier_label { 1.0 } else { 0.0 };
            g_logits[k] = scale
                * ((p[k] - onehot)
                    + weights.lambda_cost * p[k] * (normalized_costs[k] - exp_cost)
                    + weights.lambda_quality * p[k] * (fail[k] - exp_fail));
        }
        for (k, g) in g_logits.iter().enumerate() {
            grad[d.b2() + k] += g;
        }
        for j in 0..d.hidden {
            let h = pre[j].max(0.0);
            let row = &w2[j * d.tiers..(j + 1) * d.tiers];
            let mut back = 0.0;
            for k in 0..d.tiers {
                grad[d.w2() + j * d.tiers + k] += h * g_logits[k];
                back += row[k] * g_logits[k];
            }
            g_pre[j] = if pre[j] > 0.0 { back } else { 0.0 };
            grad[d.b1() + j] += g_pre[j];
        }
        let emb_off = ex.query.task_id * d.embed;
        for (i, &x) in input.iter().enumerate() {
            let row = &w1[i * d.hidden..(i + 1) * d.hidden];
            let mut back = 0.0;
            for j in 0..d.hidden {
                grad[d.w1() + i * d.hidden + j] += x * g_pre[j];
                back += row[j] * g_pre[j];
            }
            if i >= d.features {
                grad[emb_off + i - d.features] += back;
            }
        }
    }
    Ok((loss * scale, grad))
}

/// Normalized tier costs `c_k / c_K` for the cost term.
pub fn normalized_costs(world: &World) -> Vec<f64> {
    let top = world.portfolio.tiers.last().expect("nonempty portfolio").cost_per_1k;
    world.portfolio.tiers.iter().map(|t| t.cost_per_1k / top).collect()
}

/// Label queries by evaluating every (query, tier) pair once.
pub fn label_queries(world: &World, queries: &[Query], run_seed: u64) -> Vec<LabeledExample> {
    let k = world.num_tiers();
    queries
        .par_iter()
        .map(|q| {
            let pass_vector: Vec<bool> = (0..k).map(|t| world.evaluate(t, q, run_seed).passes).collect();
            let tier_label = pass_vector.iter().position(|&p| p).unwrap_or(k - 1);
            LabeledExample { query: q.clone(), tier_label, pass_vector }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainingReport {
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub best_validation_loss: f64,
    pub train_accuracy: f64,
}

pub fn train(
    examples: &[LabeledExample],
    config: &TrainingConfig,
    num_tasks: usize,
    normalized_costs: &[f64],
) -> Result<(RouterModel, TrainingReport)> {
    config.validate()?;
    let first = examples.first().ok_or_else(|| invalid("empty training set"))?;
    let dims = RouterDims {
        tasks: num_tasks,
        features: first.query.features.len(),
        embed: config.embed_dim,
        hidden: config.hidden_dim,
        tiers: normalized_costs.len(),
    };
    train_from(examples, config, RouterModel::init(dims, config.seed), normalized_costs)
}

/// Continue training from `initial`. Early stopping keeps `initial` when no
/// epoch improves its validation loss.
pub fn train_from(
    examples: &[LabeledExample],
    config: &TrainingConfig,
    initial: RouterModel,
    normalized_costs: &[f64],
) -> Result<(RouterModel, TrainingReport)> {
    config.validate()?;
    if examples.is_empty() {
        return Err(invalid("empty training set"));
    }
    if initial.dims.tiers != normalized_costs.len() {
        return Err(Error::DimensionMismatch { expected: initial.dims.tiers, got: normalized_costs.len() });
    }
    let weights = LossWeights::from(config);
    let mut model = initial;

    let mut rng = rng_for(config.seed, &[stream::TRAIN, 1]);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    order.shuffle(&mut rng);
    let n_val = if examples.len() >= 2 {
        ((examples.len() as f64 * config.validation_fraction).round() as usize).min(examples.len() - 1)
    } else {
        0
    };
    let (val_idx, train_idx) = order.split_at(n_val);
    let val: Vec<LabeledExample> = val_idx.iter().map(|&i| examples[i].clone()).collect();
    let mut train_set: Vec<LabeledExample> = train_idx.iter().map(|&i| examples[i].clone()).collect();
    let monitor = if val.is_empty() { train_set.clone() } else { val };

    let eval = |m: &RouterModel| composite_loss(m, &monitor, weights, normalized_costs).map(|(l, _)| l);
    let mut best = model.clone();
    let mut best_loss = eval(&model)?;
    let mut best_epoch = 0;
    let mut stale = 0;
    let mut epochs_run = 0;
    for epoch in 1..=config.epochs {
        epochs_run = epoch;
        train_set.shuffle(&mut rng);
        for batch in train_set.chunks(config.batch_size) {
            let (_, grad) = composite_loss(&model, batch, weights, normalized_costs)?;
            for (p, g) in model.params.iter_mut().zip(&grad) {
                *p -= config.learning_rate * g;
            }
        }
        let loss = eval(&model)?;
        if loss < best_loss {
            best_loss = loss;
            best = model.clone();
            best_epoch = epoch;
            stale = 0;
        } else {
            stale += 1;
            if stale >= config.patience {
                break;
            }
        }
    }
    let correct = examples
        .iter()
        .filter(|ex| best.predict_tier(&ex.query).map(|t| t == ex.tier_label).unwrap_or(false))
        .count();
    let report = TrainingReport {
        epochs_run,
        best_epoch,
        best_validation_loss: best_loss,
        train_accuracy: correct as f64 / examples.len() as f64,
    };
    Ok((best, report))
}
