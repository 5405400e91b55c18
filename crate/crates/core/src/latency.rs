//! Discrete-event simulation of the tiered serving system.
//!
//! Every tier is a FIFO station. A station either has `c` identical servers
//! (M/M/c) or, when the tier carries a rate limit, a token bucket that admits
//! requests into unlimited parallel service. A request follows the tier path
//! its cascade takes: the escalation decision is known when it is dispatched,
//! but it only joins the next tier's queue once the current service ends.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, VecDeque};
use std::io::Write;

use rand::Rng;
use rand_distr::{Distribution, Exp};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calibration::ThresholdTable;
use crate::cascade::{entry_for, percentile, run_from, Policy, ROUTER_OVERHEAD_MS};
use crate::error::{invalid, Error, Result};
use crate::portfolio::{ServiceModel, TierSpec, World};
use crate::rng::{derive_seed, rng_for, stream};
use crate::router::RouterModel;
use crate::workload::Query;

/// Erlang-C waiting probability and mean queueing delay of an M/M/c queue.
pub fn erlang_c_wait(c: usize, lambda: f64, mu: f64) -> Result<(f64, f64)> {
    if c == 0 || !(lambda >= 0.0) || !(mu > 0.0) {
        return Err(invalid("erlang_c_wait needs c >= 1, lambda >= 0 and mu > 0"));
    }
    let capacity = c as f64 * mu;
    if lambda >= capacity {
        return Err(Error::Unstable { offered: lambda, capacity });
    }
    let a = lambda / mu;
    // Erlang-B by recursion, then Erlang-C from it
    let mut b = 1.0;
    for k in 1..=c {
        b = a * b / (k as f64 + a * b);
    }
    let rho = a / c as f64;
    let p_wait = b / (1.0 - rho * (1.0 - b));
    Ok((p_wait, p_wait / (capacity - lambda)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LoadProfile {
    pub arrival_rate_per_min: f64,
    pub duration_s: f64,
    /// Arrivals before this time are excluded from statistics.
    pub warmup_s: f64,
}

impl LoadProfile {
    pub fn validate(&self) -> Result<()> {
        if !(self.arrival_rate_per_min > 0.0) {
            return Err(invalid("arrival rate must be positive"));
        }
        if !(self.warmup_s >= 0.0 && self.warmup_s < self.duration_s) {
            return Err(invalid("need 0 <= warmup_s < duration_s"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Station {
    /// `None` means unlimited parallel service.
    pub servers: Option<usize>,
    pub service_rate: f64,
    /// Token bucket admission as (tokens per second, burst).
    pub bucket: Option<(f64, f64)>,
}

impl Station {
    pub fn from_tier(tier: &TierSpec) -> Station {
        match tier.rate_limit_per_sec {
            Some(rate) => Station { servers: None, service_rate: tier.service_rate, bucket: Some((rate, tier.burst.unwrap_or(rate))) },
            None => Station { servers: Some(tier.workers), service_rate: tier.service_rate, bucket: None },
        }
    }

    /// Sustainable throughput in requests per second.
    pub fn capacity(&self) -> f64 {
        let servers = self.servers.map_or(f64::INFINITY, |c| c as f64 * self.service_rate);
        let bucket = self.bucket.map_or(f64::INFINITY, |(r, _)| r);
        servers.min(bucket)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Job {
    pub arrival_s: f64,
    /// Stations visited in order.
    pub route: Vec<usize>,
    pub sla_ms: f64,
    pub overhead_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TierQueueStats {
    pub tier: usize,
    /// Visits entering the station inside the measurement window.
    pub visits: u64,
    pub throughput_per_s: f64,
    pub capacity_per_s: f64,
    pub mean_wait_ms: f64,
    pub mean_sojourn_ms: f64,
    pub p50_ms: f64,
    pub p99_ms: f64,
    pub utilization: f64,
    /// Time-averaged number of requests queued or in service.
    pub mean_in_system: f64,
    pub unstable: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueueStats {
    pub tiers: Vec<TierQueueStats>,
    pub completions: u64,
    pub mean_wait_ms: f64,
    pub mean_latency_ms: f64,
    pub p50_ms: f64,
    pub p99_ms: f64,
    pub sla_violation_rate: f64,
    pub unstable: bool,
    /// Digest of the processed event sequence.
    pub trace_hash: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Kind {
    Arrival(usize),
    Done { station: usize, job: usize },
    Token(usize),
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Event {
    time: f64,
    seq: u64,
    kind: Kind,
}

impl Eq for Event {}

impl Ord for Event {
    fn cmp(&self, other: &Self) -> Ordering {
        other.time.total_cmp(&self.time).then(other.seq.cmp(&self.seq))
    }
}

impl PartialOrd for Event {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

#[derive(Debug, Default)]
struct StationState {
    queue: VecDeque<(usize, f64)>,
    busy: usize,
    tokens: f64,
    refilled_at: f64,
    token_pending: bool,
    in_system: usize,
    last_change: f64,
    area_in_system: f64,
    area_busy: f64,
    visits: u64,
    waits: Vec<f64>,
    sojourns: Vec<f64>,
}

struct Fnv(u64);

impl Fnv {
    fn mix(&mut self, x: u64) {
        for b in x.to_le_bytes() {
            self.0 ^= b as u64;
            self.0 = self.0.wrapping_mul(0x0100_0000_01b3);
        }
    }
}

struct Sim<'a> {
    stations: &'a [Station],
    service: ServiceModel,
    jobs: &'a [Job],
    window: (f64, f64),
    heap: BinaryHeap<Event>,
    seq: u64,
    st: Vec<StationState>,
    stage: Vec<usize>,
    entered: Vec<f64>,
    queue_wait: Vec<f64>,
    finished: Vec<Option<f64>>,
    rng: rand_chacha::ChaCha8Rng,
    hash: Fnv,
}

const TOKEN_EPS: f64 = 1e-9;

impl Sim<'_> {
    fn push(&mut self, time: f64, kind: Kind) {
        self.seq += 1;
        self.heap.push(Event { time, seq: self.seq, kind });
    }

    fn overlap(&self, a: f64, b: f64) -> f64 {
        (b.min(self.window.1) - a.max(self.window.0)).max(0.0)
    }

    fn account(&mut self, s: usize, now: f64) {
        let (last, n, busy) = (self.st[s].last_change, self.st[s].in_system as f64, self.st[s].busy as f64);
        let dt = self.overlap(last, now);
        let state = &mut self.st[s];
        state.area_in_system += n * dt;
        state.area_busy += busy * dt;
        state.last_change = now;
    }

    fn enter(&mut self, s: usize, job: usize, now: f64) {
        self.account(s, now);
        let in_window = now >= self.window.0 && now < self.window.1;
        let state = &mut self.st[s];
        state.in_system += 1;
        state.visits += in_window as u64;
        state.queue.push_back((job, now));
        self.entered[job] = now;
        self.dispatch(s, now);
    }

    fn dispatch(&mut self, s: usize, now: f64) {
        let station = self.stations[s];
        if let Some((rate, burst)) = station.bucket {
            let state = &mut self.st[s];
            state.tokens = (state.tokens + rate * (now - state.refilled_at)).min(burst);
            state.refilled_at = now;
        }
        loop {
            let state = &self.st[s];
            if state.queue.is_empty() || station.servers.is_some_and(|c| state.busy >= c) {
                break;
            }
            if station.bucket.is_some() && state.tokens < 1.0 - TOKEN_EPS {
                if !state.token_pending {
                    let (rate, _) = station.bucket.expect("bucket");
                    let at = now + (1.0 - state.tokens) / rate;
                    self.st[s].token_pending = true;
                    self.push(at, Kind::Token(s));
                }
                break;
            }
            self.account(s, now);
            let state = &mut self.st[s];
            if station.bucket.is_some() {
                state.tokens = (state.tokens - 1.0).max(0.0);
            }
            let (job, entered) = state.queue.pop_front().expect("nonempty queue");
            state.busy += 1;
            let wait = now - entered;
            if entered >= self.window.0 && entered < self.window.1 {
                state.waits.push(wait);
            }
            self.queue_wait[job] += wait;
            let service = self.service.sample(station.service_rate, &mut self.rng);
            self.push(now + service, Kind::Done { station: s, job });
        }
    }

    fn run(mut self) -> (Vec<StationState>, Vec<Option<f64>>, Vec<f64>, u64) {
        for (i, j) in self.jobs.iter().enumerate() {
            self.push(j.arrival_s, Kind::Arrival(i));
        }
        while let Some(ev) = self.heap.pop() {
            self.hash.mix(ev.time.to_bits());
            match ev.kind {
                Kind::Arrival(job) => {
                    self.hash.mix(job as u64);
                    let first = self.jobs[job].route[0];
                    self.enter(first, job, ev.time);
                }
                Kind::Done { station, job } => {
                    self.hash.mix(((station as u64) << 48) ^ job as u64);
                    self.account(station, ev.time);
                    let entered = self.entered[job];
                    let state = &mut self.st[station];
                    state.busy -= 1;
                    state.in_system -= 1;
                    if entered >= self.window.0 && entered < self.window.1 {
                        state.sojourns.push(ev.time - entered);
                    }
                    self.stage[job] += 1;
                    match self.jobs[job].route.get(self.stage[job]) {
                        Some(&next) => self.enter(next, job, ev.time),
                        None => self.finished[job] = Some(ev.time),
                    }
                    self.dispatch(station, ev.time);
                }
                Kind::Token(s) => {
                    self.hash.mix(0xffff_0000 ^ s as u64);
                    self.st[s].token_pending = false;
                    self.dispatch(s, ev.time);
                }
            }
        }
        (self.st, self.finished, self.queue_wait, self.hash.0)
    }
}

/// Simulate a fixed job list to completion. Statistics cover jobs (and
/// station visits) that start inside `[warmup_s, horizon_s)`.
pub fn simulate_jobs(
    stations: &[Station],
    service: ServiceModel,
    jobs: &[Job],
    warmup_s: f64,
    horizon_s: f64,
    seed: u64,
) -> Result<QueueStats> {
    if stations.is_empty() {
        return Err(invalid("no stations"));
    }
    if stations.iter().any(|s| !(s.service_rate > 0.0) || s.servers == Some(0)) {
        return Err(invalid("every station needs a positive service rate and at least one server"));
    }
    if stations.iter().any(|s| s.bucket.is_some_and(|(r, b)| !(r > 0.0) || !(b >= 1.0))) {
        return Err(invalid("token buckets need a positive rate and burst >= 1"));
    }
    if jobs.iter().any(|j| j.route.is_empty() || j.route.iter().any(|&r| r >= stations.len())) {
        return Err(invalid("every job needs a nonempty route over existing stations"));
    }
    let st = stations
        .iter()
        .map(|s| StationState { tokens: s.bucket.map_or(0.0, |(_, b)| b), ..StationState::default() })
        .collect();
    let sim = Sim {
        stations,
        service,
        jobs,
        window: (warmup_s, horizon_s),
        heap: BinaryHeap::with_capacity(jobs.len() + 16),
        seq: 0,
        st,
        stage: vec![0; jobs.len()],
        entered: vec![0.0; jobs.len()],
        queue_wait: vec![0.0; jobs.len()],
        finished: vec![None; jobs.len()],
        rng: rng_for(seed, &[stream::LATENCY, 1]),
        hash: Fnv(0xcbf2_9ce4_8422_2325),
    };
    let (states, finished, queue_wait, trace_hash) = sim.run();

    let window = horizon_s - warmup_s;
    let tiers: Vec<TierQueueStats> = states
        .iter()
        .zip(stations)
        .enumerate()
        .map(|(i, (s, station))| {
            let throughput = s.visits as f64 / window;
            let capacity = station.capacity();
            let utilization = match station.servers {
                Some(c) => s.area_busy / (c as f64 * window),
                None => station.bucket.map_or(0.0, |(r, _)| (throughput / r).min(1.0)),
            };
            let mean = |v: &[f64]| if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 };
            TierQueueStats {
                tier: i,
                visits: s.visits,
                throughput_per_s: throughput,
                capacity_per_s: capacity,
                mean_wait_ms: 1000.0 * mean(&s.waits),
                mean_sojourn_ms: 1000.0 * mean(&s.sojourns),
                p50_ms: 1000.0 * percentile(&s.sojourns, 0.50),
                p99_ms: 1000.0 * percentile(&s.sojourns, 0.99),
                utilization: utilization.min(1.0),
                mean_in_system: s.area_in_system / window,
                unstable: throughput >= capacity,
            }
        })
        .collect();

    let mut latencies = Vec::new();
    let mut waits = Vec::new();
    let mut violations = 0u64;
    for ((job, done), wait) in jobs.iter().zip(&finished).zip(&queue_wait) {
        if job.arrival_s < warmup_s || job.arrival_s >= horizon_s {
            continue;
        }
        let done = done.expect("every job completes");
        let ms = 1000.0 * (done - job.arrival_s) + job.overhead_ms;
        violations += (ms > job.sla_ms) as u64;
        latencies.push(ms);
        waits.push(1000.0 * wait);
    }
    let n = latencies.len().max(1) as f64;
    Ok(QueueStats {
        unstable: tiers.iter().any(|t| t.unstable),
        tiers,
        completions: latencies.len() as u64,
        mean_wait_ms: waits.iter().sum::<f64>() / n,
        mean_latency_ms: latencies.iter().sum::<f64>() / n,
        p50_ms: percentile(&latencies, 0.50),
        p99_ms: percentile(&latencies, 0.99),
        sla_violation_rate: violations as f64 / n,
        trace_hash,
    })
}

/// Poisson arrival times on `[0, duration_s)`.
pub fn poisson_arrivals(rate_per_s: f64, duration_s: f64, seed: u64) -> Result<Vec<f64>> {
    if !(rate_per_s > 0.0) {
        return Err(invalid("arrival rate must be positive"));
    }
    let exp = Exp::new(rate_per_s).map_err(|e| invalid(e.to_string()))?;
    let mut rng = rng_for(seed, &[stream::LATENCY, 0]);
    let mut t = 0.0;
    let mut out = Vec::new();
    loop {
        t += exp.sample(&mut rng);
        if t >= duration_s {
            return Ok(out);
        }
        out.push(t);
    }
}

/// Serve Poisson traffic drawn from `pool` under a routing policy.
#[allow(clippy::too_many_arguments)]
pub fn simulate_load(
    policy: Policy,
    world: &World,
    pool: &[Query],
    router: Option<&RouterModel>,
    thresholds: Option<&ThresholdTable>,
    profile: &LoadProfile,
    seed: u64,
) -> Result<QueueStats> {
    profile.validate()?;
    if pool.is_empty() {
        return Err(invalid("empty query pool"));
    }
    if policy.needs_router() && (router.is_none() || thresholds.is_none()) {
        return Err(Error::Missing(format!("policy {policy} needs a trained router and a threshold table")));
    }
    let arrivals = poisson_arrivals(profile.arrival_rate_per_min / 60.0, profile.duration_s, seed)?;
    let run_seed = derive_seed(seed, &[stream::LATENCY, 2]);
    let mut pick = rng_for(seed, &[stream::LATENCY, 3]);
    let picks: Vec<usize> = arrivals.iter().map(|_| pick.random_range(0..pool.len())).collect();
    let (cascade, overhead) = if policy == Policy::Routed { (thresholds, ROUTER_OVERHEAD_MS) } else { (None, 0.0) };
    let jobs = arrivals
        .par_iter()
        .zip(picks.par_iter())
        .enumerate()
        .map(|(i, (&t, &p))| {
            let q = Query { query_id: i as u64, ..pool[p].clone() };
            let entry = entry_for(policy, world, router, &q, run_seed)?;
            let trace = run_from(world, entry, cascade, &q, run_seed, overhead);
            Ok(Job {
                arrival_s: t,
                route: trace.attempts.iter().map(|a| a.tier).collect(),
                sla_ms: world.tasks[q.task_id].sla_latency_ms,
                overhead_ms: overhead,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let stations: Vec<Station> = world.portfolio.tiers.iter().map(Station::from_tier).collect();
    simulate_jobs(&stations, world.portfolio.service_model, &jobs, profile.warmup_s, profile.duration_s, seed)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LatencyRow {
    pub arrival_rate_per_min: f64,
    pub policy: Policy,
    pub stats: QueueStats,
}

/// Every (arrival rate, policy) point, simulated in parallel.
#[allow(clippy::too_many_arguments)]
pub fn latency_sweep(
    world: &World,
    pool: &[Query],
    router: Option<&RouterModel>,
    thresholds: Option<&ThresholdTable>,
    rates_per_min: &[f64],
    policies: &[Policy],
    duration_s: f64,
    warmup_s: f64,
    seed: u64,
) -> Result<Vec<LatencyRow>> {
    let points: Vec<(f64, Policy)> = rates_per_min.iter().flat_map(|&r| policies.iter().map(move |&p| (r, p))).collect();
    points
        .par_iter()
        .map(|&(rate, policy)| {
            let profile = LoadProfile { arrival_rate_per_min: rate, duration_s, warmup_s };
            let stats = simulate_load(policy, world, pool, router, thresholds, &profile, seed)?;
            Ok(LatencyRow { arrival_rate_per_min: rate, policy, stats })
        })
        .collect()
}

/// `arrival_rate_per_min,policy,p50_ms,p99_ms,sla_violation_rate,unstable_flag`
pub fn write_latency_csv<W: Write>(rows: &[LatencyRow], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["arrival_rate_per_min", "policy", "p50_ms", "p99_ms", "sla_violation_rate", "unstable_flag"])?;
    for r in rows {
        w.write_record([
            format!("{:.6}", r.arrival_rate_per_min),
            r.policy.name().to_string(),
            format!("{:.6}", r.stats.p50_ms),
            format!("{:.6}", r.stats.p99_ms),
            format!("{:.6}", r.stats.sla_violation_rate),
            (r.stats.unstable as u8).to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
