//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Run with `cargo test -p tierroute-cli --test acceptance`. Every criterion
//! runs even if an earlier one fails; the process exits non-zero on any FAIL.

use std::collections::BTreeMap;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use tierroute::calibration::{correct_quantile_threshold, coverage_check, risk_control_threshold, ThresholdTable};
use tierroute::cascade::{run_from, Policy};
use tierroute::config::{RunConfig, SweepParameter};
use tierroute::coopt::kmeans::kmeans;
use tierroute::coopt::pca::covariance_eigen;
use tierroute::coopt::{coopt_loop, DistillMode};
use tierroute::experiment::{cheap_share, eval_seed, run_sweep, Pipeline};
use tierroute::latency::{erlang_c_wait, poisson_arrivals, simulate_jobs, Job, Station};
use tierroute::portfolio::{Portfolio, ServiceModel, World};
use tierroute::rng::rng_for;
use tierroute::router::{composite_loss, LabeledExample, LossWeights, RouterDims, RouterModel};
use tierroute::workload::{apply_shift, default_tasks, generate_workload, Query, ShiftKind, ShiftScenario};

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict { pass, detail: detail.into() }
}

const SEEDS_COVERAGE: u64 = 20;
const TEST_POOL: usize = 100_000;
const TEST_PER_CELL: usize = 10_000;
/// Large enough that the rarest (tier, task) cell sees 500 calibration queries.
const CALIB_POOL: usize = 90_000;

fn reference() -> RunConfig {
    RunConfig::default()
}

/// Criteria 1 and 2 share the per-seed pipelines.
fn coverage_and_shift() -> (Verdict, Verdict) {
    let mut cfg = reference();
    cfg.workload.calib_count = CALIB_POOL;
    let clock = Instant::now();
    let mut rates = Vec::new();
    let mut min_calib = usize::MAX;
    let mut min_test = u64::MAX;
    let mut systems = Vec::new();
    for seed in 0..SEEDS_COVERAGE {
        let p = Pipeline::build(&cfg, seed).expect("pipeline");
        let pool = generate_workload(&cfg.workload.workload(TEST_POOL), seed ^ 0x7e57).expect("test pool");
        let cov = coverage_check(&p.world, &p.router, &p.thresholds, &pool, eval_seed(seed), Some(TEST_PER_CELL)).expect("coverage");
        rates.push(cov.pooled.rate);
        min_calib = min_calib.min(p.thresholds.cells().map(|(_, _, c)| c.n_calib).min().unwrap_or(0));
        min_test = min_test.min(cov.cells.iter().map(|c| c.report.total).min().unwrap_or(0));
        systems.push((p, pool));
    }
    let elapsed = clock.elapsed().as_secs_f64();
    let mean = rates.iter().sum::<f64>() / rates.len() as f64;
    let c1 = verdict(
        mean <= 0.06 && elapsed < 60.0,
        format!(
            "mean accepted-but-failed rate {mean:.4} over {SEEDS_COVERAGE} seeds (limit 0.06), per-seed max {:.4}, smallest calibration cell {min_calib}, smallest test cell {min_test}, {elapsed:.1}s (limit 60s)",
            rates.iter().cloned().fold(0.0, f64::max)
        ),
    );

    let shift = ShiftScenario::new(ShiftKind::DifficultyShift, 0.2).expect("shift");
    let mut raised = 0;
    let mut deltas = Vec::new();
    for (seed, ((p, pool), base)) in systems.iter().zip(&rates).enumerate() {
        let shifted = apply_shift(pool, shift, seed as u64).expect("shift");
        let cov = coverage_check(&p.world, &p.router, &p.thresholds, &shifted, eval_seed(seed as u64), Some(TEST_PER_CELL)).expect("coverage");
        raised += (cov.pooled.rate > *base) as usize;
        deltas.push(cov.pooled.rate - base);
    }
    let c2 = verdict(
        raised >= 18,
        format!(
            "difficulty shift 0.2 raised the pooled violation rate in {raised}/{SEEDS_COVERAGE} seeds (need 18), mean increase {:.4}",
            deltas.iter().sum::<f64>() / deltas.len() as f64
        ),
    );
    (c1, c2)
}

fn cost_exactness() -> Verdict {
    let world = World { tasks: default_tasks(), portfolio: Portfolio::default() };
    let cfg = reference().workload.workload(1_000);
    let queries = generate_workload(&cfg, 3).expect("workload");
    let mut rng = rng_for(99, &[]);
    let mut mismatches = 0;
    let mut escalations = 0;
    for q in &queries {
        let mut table = ThresholdTable::uniform(4, world.num_tasks(), 0.0);
        for k in 0..3 {
            for t in 0..world.num_tasks() {
                table.set_delta(k, t, rng.random_range(0.0..0.6));
            }
        }
        let entry = rng.random_range(0..4);
        let trace = run_from(&world, entry, Some(&table), q, 17, 0.0);
        let mut oracle = 0.0;
        for a in &trace.attempts {
            oracle += world.portfolio.tiers[a.tier].cost_per_1k * a.outcome.tokens as f64 / 1000.0;
        }
        escalations += trace.escalations();
        mismatches += (trace.cumulative_cost.to_bits() != oracle.to_bits()) as usize;
    }
    let hand = Query { query_id: 0, task_id: 0, difficulty: 0.5, features: vec![0.0; 16], token_len: 1000, shifted: false };
    let mut ladder = ThresholdTable::uniform(4, world.num_tasks(), -1.0);
    ladder.set_delta(2, 0, 2.0);
    let t = run_from(&world, 0, Some(&ladder), &hand, 1, 0.0);
    let tiers: Vec<usize> = t.attempts.iter().map(|a| a.tier).collect();
    let ok = mismatches == 0 && escalations > 0 && tiers == vec![0, 1, 2] && t.cumulative_cost == 0.91;
    verdict(
        ok,
        format!(
            "{mismatches} mismatches over 1000 traces ({escalations} escalations); T1->T2->T3 at 1K tokens = {:?}",
            t.cumulative_cost
        ),
    )
}

fn gradient_check() -> Verdict {
    let dims = RouterDims { tasks: 3, features: 5, embed: 4, hidden: 8, tiers: 4 };
    let costs = [0.01 / 8.0, 0.1 / 8.0, 0.8 / 8.0, 1.0];
    let weights = LossWeights { lambda_cost: 0.3, lambda_quality: 0.5 };
    let normal = Normal::new(0.0, 1.0).unwrap();
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for pair in 0..20u64 {
        let mut rng = rng_for(1000 + pair, &[]);
        let mut model = RouterModel::init(dims, pair);
        for p in &mut model.params {
            *p += 0.5 * normal.sample(&mut rng);
        }
        let batch: Vec<LabeledExample> = (0..16)
            .map(|i| {
                let query = Query {
                    query_id: i,
                    task_id: rng.random_range(0..dims.tasks),
                    difficulty: 0.5,
                    features: (0..dims.features).map(|_| normal.sample(&mut rng)).collect(),
                    token_len: 10,
                    shifted: false,
                };
                let pass_vector: Vec<bool> = (0..dims.tiers).map(|_| rng.random_bool(0.6)).collect();
                LabeledExample { query, tier_label: rng.random_range(0..dims.tiers), pass_vector }
            })
            .collect();
        let (_, analytic) = composite_loss(&model, &batch, weights, &costs).unwrap();
        for i in 0..model.params.len() {
            let mut plus = model.clone();
            plus.params[i] += h;
            let mut minus = model.clone();
            minus.params[i] -= h;
            let lp = composite_loss(&plus, &batch, weights, &costs).unwrap().0;
            let lm = composite_loss(&minus, &batch, weights, &costs).unwrap().0;
            let numeric = (lp - lm) / (2.0 * h);
            let scale = analytic[i].abs().max(numeric.abs()).max(1e-8);
            worst = worst.max((analytic[i] - numeric).abs() / scale);
        }
    }
    verdict(worst < 1e-5, format!("max relative error {worst:.2e} over 20 model/batch pairs (limit 1e-5)"))
}

fn queueing_oracle() -> Verdict {
    let (c, mu) = (4usize, 1.0);
    let mut ok = true;
    let mut parts = Vec::new();
    for rho in [0.3, 0.7, 0.9] {
        let clock = Instant::now();
        let lambda = rho * c as f64 * mu;
        let warmup = 1_000.0;
        let horizon = warmup + 1.01e6 / lambda;
        let jobs: Vec<Job> = poisson_arrivals(lambda, horizon, 11)
            .unwrap()
            .into_iter()
            .map(|t| Job { arrival_s: t, route: vec![0], sla_ms: f64::INFINITY, overhead_ms: 0.0 })
            .collect();
        let stations = [Station { servers: Some(c), service_rate: mu, bucket: None }];
        let s = simulate_jobs(&stations, ServiceModel::Exponential, &jobs, warmup, horizon, 11).unwrap();
        let (_, expected) = erlang_c_wait(c, lambda, mu).unwrap();
        let tier = &s.tiers[0];
        let wait_err = (tier.mean_wait_ms / 1000.0 - expected).abs() / expected;
        let little = (tier.mean_in_system - tier.throughput_per_s * tier.mean_sojourn_ms / 1000.0).abs() / tier.mean_in_system;
        let secs = clock.elapsed().as_secs_f64();
        ok &= wait_err <= 0.05 && little <= 0.03 && s.completions >= 1_000_000 && secs < 120.0;
        parts.push(format!("rho={rho}: wait err {:.2}%, Little err {:.2}%, {} completions, {secs:.1}s", 100.0 * wait_err, 100.0 * little, s.completions));
    }
    verdict(ok, parts.join("; "))
}

fn coopt_convergence(cfg: &RunConfig, base: &Pipeline) -> Verdict {
    let out = coopt_loop(cfg, base, DistillMode::Targeted).expect("coopt");
    let s = &out.state;
    let costs = &s.cost_ratio_history;
    let quals = &s.quality_ratio_history;
    let shares: Vec<f64> = out.history.iter().map(|r| cheap_share(&r.metrics)).collect();
    let cost_ok = costs.windows(2).all(|w| w[1] <= w[0]);
    let floor = quals[0] - cfg.coopt.quality_tolerance;
    let quality_ok = quals.iter().all(|&q| q >= floor);
    let share_ok = shares.windows(2).all(|w| w[1] >= w[0]);
    let fmt = |v: &[f64]| v.iter().map(|x| format!("{x:.4}")).collect::<Vec<_>>().join(" ");
    verdict(
        s.converged && s.iteration <= 5 && cost_ok && quality_ok && share_ok,
        format!(
            "converged={} in {} iterations; cost [{}]; quality [{}] (floor {floor:.4}); T1+T2 share [{}]",
            s.converged,
            s.iteration,
            fmt(costs),
            fmt(quals),
            fmt(&shares)
        ),
    )
}

fn targeted_vs_random(cfg: &RunConfig) -> Verdict {
    let mut one = cfg.clone();
    one.coopt.max_iterations = 1;
    let (mut targeted, mut random) = (Vec::new(), Vec::new());
    for i in 0..5u64 {
        let seed = cfg.seed + i;
        let base = Pipeline::build(cfg, seed).expect("pipeline");
        let t = coopt_loop(&one, &base, DistillMode::Targeted).expect("targeted");
        let r = coopt_loop(&one, &base, DistillMode::Random).expect("random");
        let c0 = t.state.cost_ratio_history[0];
        assert_eq!(t.history[1].patches_total, r.history[1].patches_total);
        targeted.push((c0 - t.state.cost_ratio_history[1]) / c0);
        random.push((c0 - r.state.cost_ratio_history[1]) / c0);
    }
    let mt = targeted.iter().sum::<f64>() / 5.0;
    let mr = random.iter().sum::<f64>() / 5.0;
    let fmt = |v: &[f64]| v.iter().map(|x| format!("{:.1}%", 100.0 * x)).collect::<Vec<_>>().join(" ");
    verdict(
        mr > 0.0 && mt >= 1.5 * mr,
        format!(
            "mean cost-ratio reduction targeted {:.1}% vs random {:.1}% (ratio {:.2}, need 1.5); targeted [{}], random [{}]",
            100.0 * mt,
            100.0 * mr,
            mt / mr,
            fmt(&targeted),
            fmt(&random)
        ),
    )
}

fn sweeps(cfg: &RunConfig, base: &Pipeline) -> Verdict {
    let column = |p: SweepParameter, f: fn(&tierroute::experiment::SweepRow) -> f64| -> Vec<f64> {
        run_sweep(cfg, base, &cfg.sweep.spec(p)).expect("sweep").iter().map(f).collect()
    };
    let alpha = column(SweepParameter::Alpha, |r| r.cost_ratio);
    let tau = column(SweepParameter::TauScale, |r| r.cost_ratio);
    let savings = column(SweepParameter::CostRatio, |r| r.savings);
    let dec = alpha.windows(2).all(|w| w[1] < w[0]);
    let inc_tau = tau.windows(2).all(|w| w[1] > w[0]);
    let inc_sav = savings.windows(2).all(|w| w[1] > w[0]);
    let fmt = |v: &[f64]| v.iter().map(|x| format!("{x:.4}")).collect::<Vec<_>>().join(" ");
    verdict(
        dec && inc_tau && inc_sav,
        format!(
            "cost vs alpha [{}] decreasing={dec}; cost vs tau scale [{}] increasing={inc_tau}; savings vs price ratio [{}] increasing={inc_sav}",
            fmt(&alpha),
            fmt(&tau),
            fmt(&savings)
        ),
    )
}

fn baselines(base: &Pipeline) -> Verdict {
    let top = base.evaluate(Policy::AlwaysTop).unwrap().metrics;
    let t2 = base.evaluate(Policy::AlwaysT2).unwrap().metrics;
    let routed = base.evaluate(Policy::Routed).unwrap().metrics;
    let random = base.evaluate(Policy::Random).unwrap().metrics;
    let ok = top.quality_ratio == 1.0
        && top.cost_ratio == 1.0
        && t2.cost_ratio == 0.0125
        && routed.cost_ratio < random.cost_ratio
        && routed.quality_ratio >= random.quality_ratio;
    verdict(
        ok,
        format!(
            "always_t4 quality {:?} cost {:?}; always_t2 cost {:?}; routed (q {:.4}, c {:.4}) vs random (q {:.4}, c {:.4})",
            top.quality_ratio, top.cost_ratio, t2.cost_ratio, routed.quality_ratio, routed.cost_ratio, random.quality_ratio, random.cost_ratio
        ),
    )
}

const SMALL_CONFIG: &str = r#"
seed = 5

[workload]
train_count = 1500
calib_count = 8000
eval_count = 1500

[router]
epochs = 8

[coopt]
max_iterations = 2

[latency]
arrival_rates_per_min = [2000.0, 20000.0]
duration_s = 40.0
warmup_s = 5.0

[sweep]
tau_scale = [0.95, 1.05]
lambda_cost = [0.1, 0.5]
lambda_quality = [0.5]
"#;

fn run_cli(config: &Path, out: &Path) -> Result<(), String> {
    let bin = env!("CARGO_BIN_EXE_tierroute");
    let steps: [&[&str]; 10] = [
        &["generate"],
        &["train-router"],
        &["calibrate"],
        &["simulate"],
        &["report"],
        &["coopt"],
        &["coopt", "--random"],
        &["latency"],
        &["sweep"],
        &["simulate", "--policy", "always_t2"],
    ];
    for args in steps {
        let status = Command::new(bin)
            .arg("--config")
            .arg(config)
            .arg("--out")
            .arg(out)
            .args(args)
            .output()
            .map_err(|e| e.to_string())?;
        if !status.status.success() {
            return Err(format!("{args:?} failed: {}", String::from_utf8_lossy(&status.stderr)));
        }
    }
    Ok(())
}

fn snapshot(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap())
        .filter(|e| e.file_name() != "run_manifest.json")
        .map(|e| (e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).unwrap()))
        .collect()
}

fn determinism() -> Verdict {
    let tmp = tempfile::tempdir().unwrap();
    let config = tmp.path().join("small.toml");
    std::fs::write(&config, SMALL_CONFIG).unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    if let Err(e) = run_cli(&config, &a).and_then(|_| run_cli(&config, &b)) {
        return verdict(false, e);
    }
    let (sa, sb) = (snapshot(&a), snapshot(&b));
    let differing: Vec<&String> = sa.keys().filter(|k| sa.get(*k) != sb.get(*k)).collect();
    verdict(
        differing.is_empty() && sa.len() == sb.len() && sa.len() >= 20,
        format!("{} artifact files compared across two runs of every subcommand; differing: {differing:?}", sa.len()),
    )
}

/// Smallest correctly-handled uncertainty `v` with at least
/// `ceil((1 - alpha)(n0 + 1))` correct uncertainties at or below it.
fn quantile_oracle(us: &[f64], alpha: f64) -> f64 {
    let n0 = us.len();
    let mut need = 0;
    while (need as f64) < (1.0 - alpha) * (n0 + 1) as f64 - 1e-9 {
        need += 1;
    }
    if need > n0 {
        return 1.0;
    }
    let need = need.max(1);
    us.iter()
        .copied()
        .filter(|&v| us.iter().filter(|&&u| u <= v).count() >= need)
        .fold(f64::INFINITY, f64::min)
}

fn risk_oracle(samples: &[(f64, bool)], alpha: f64) -> f64 {
    let n = samples.len() as f64;
    let mut candidates: Vec<f64> = vec![0.0, 1.0];
    candidates.extend(samples.iter().map(|s| s.0));
    candidates
        .into_iter()
        .filter(|&d| {
            let fails = samples.iter().filter(|&&(u, f)| f && u <= d).count() as f64;
            fails + 1.0 <= alpha * (n + 1.0) + 1e-9
        })
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Characteristic polynomial by Faddeev-LeVerrier, roots by bisection
/// between Gershgorin bounds.
fn eigen_oracle(m: &[[f64; 4]; 4]) -> Vec<f64> {
    let n = 4;
    // M_k = A M_{k-1} + c_{n-k+1} I, c_{n-k} = -tr(A M_k) / k
    let mut coeffs = vec![1.0];
    let mut mk = [[0.0; 4]; 4];
    for k in 1..=n {
        let c_prev = *coeffs.last().unwrap();
        let mut next = [[0.0; 4]; 4];
        for i in 0..n {
            for j in 0..n {
                next[i][j] = (0..n).map(|l| m[i][l] * mk[l][j]).sum();
            }
            next[i][i] += c_prev;
        }
        mk = next;
        let trace: f64 = (0..n).map(|i| (0..n).map(|l| m[i][l] * mk[l][i]).sum::<f64>()).sum();
        coeffs.push(-trace / k as f64);
    }
    let poly = |x: f64| coeffs.iter().fold(0.0, |acc, &a| acc * x + a);
    let bound = (0..n).map(|i| (0..n).map(|j| m[i][j].abs()).sum::<f64>()).fold(0.0, f64::max) + 1.0;
    let grid = 20_000;
    let mut roots = Vec::new();
    let step = 2.0 * bound / grid as f64;
    for g in 0..grid {
        let (mut lo, mut hi) = (-bound + g as f64 * step, -bound + (g + 1) as f64 * step);
        let (flo, fhi) = (poly(lo), poly(hi));
        if flo == 0.0 {
            roots.push(lo);
            continue;
        }
        if flo * fhi > 0.0 {
            continue;
        }
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if poly(lo) * poly(mid) <= 0.0 {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        roots.push(0.5 * (lo + hi));
    }
    roots.sort_by(|a, b| b.total_cmp(a));
    roots
}

fn exhaustive_two_means(points: &[Vec<f64>]) -> f64 {
    let n = points.len();
    let mut best = f64::INFINITY;
    for mask in 1..(1u32 << n) - 1 {
        let mut cost = 0.0;
        for side in [true, false] {
            let members: Vec<&Vec<f64>> = (0..n).filter(|&i| ((mask >> i) & 1 == 1) == side).map(|i| &points[i]).collect();
            let dim = members[0].len();
            let mean: Vec<f64> = (0..dim).map(|d| members.iter().map(|p| p[d]).sum::<f64>() / members.len() as f64).collect();
            cost += members.iter().map(|p| p.iter().zip(&mean).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()).sum::<f64>();
        }
        best = best.min(cost);
    }
    best
}

fn small_oracles() -> Verdict {
    let mut rng = rng_for(2024, &[]);
    let normal = Normal::new(0.0, 1.0).unwrap();

    let mut quantile_bad = 0;
    let mut risk_bad = 0;
    for _ in 0..2_000 {
        let n = rng.random_range(0..30);
        let alpha = [0.05, 0.1, 0.2, 0.5][rng.random_range(0..4)];
        let samples: Vec<(f64, bool)> = (0..n).map(|_| ((rng.random_range(0..20) as f64) / 20.0, rng.random_bool(0.3))).collect();
        let correct: Vec<f64> = samples.iter().filter(|s| !s.1).map(|s| s.0).collect();
        if !correct.is_empty() && correct_quantile_threshold(&correct, alpha).0 != quantile_oracle(&correct, alpha) {
            quantile_bad += 1;
        }
        if correct.is_empty() {
            continue;
        }
        let oracle = risk_oracle(&samples, alpha);
        let (delta, degenerate) = risk_control_threshold(&samples, alpha);
        let expected = if oracle == f64::NEG_INFINITY { 0.0 } else { oracle };
        if delta != expected || (oracle == f64::NEG_INFINITY) != degenerate && !(degenerate && expected == 0.0) {
            risk_bad += 1;
        }
    }

    let mut eig_err: f64 = 0.0;
    for _ in 0..200 {
        let pts: Vec<Vec<f64>> = (0..12).map(|_| (0..4).map(|d| normal.sample(&mut rng) * (1.0 + d as f64)).collect()).collect();
        let (mean, values, _) = covariance_eigen(&pts).unwrap();
        let mut cov = [[0.0; 4]; 4];
        for p in &pts {
            for i in 0..4 {
                for j in 0..4 {
                    cov[i][j] += (p[i] - mean[i]) * (p[j] - mean[j]) / (pts.len() - 1) as f64;
                }
            }
        }
        let oracle = eigen_oracle(&cov);
        if oracle.len() != 4 {
            eig_err = f64::INFINITY;
            continue;
        }
        for (a, b) in values.iter().zip(&oracle) {
            eig_err = eig_err.max((a - b).abs() / b.abs().max(1.0));
        }
    }

    let mut kmeans_bad = 0;
    for trial in 0..300u64 {
        let n = rng.random_range(3..=8);
        let pts: Vec<Vec<f64>> = (0..n).map(|_| (0..2).map(|_| normal.sample(&mut rng)).collect()).collect();
        let fit = kmeans(&pts, 2, trial);
        let best = exhaustive_two_means(&pts);
        if (fit.inertia - best).abs() > 1e-9 * best.max(1.0) {
            kmeans_bad += 1;
        }
    }
    verdict(
        quantile_bad == 0 && risk_bad == 0 && eig_err <= 1e-8 && kmeans_bad == 0,
        format!(
            "quantile mismatches {quantile_bad}/2000, risk-control mismatches {risk_bad}, max 4x4 eigenvalue error {eig_err:.1e} (limit 1e-8), k-means (k=2, n<=8) mismatches {kmeans_bad}/300"
        ),
    )
}

fn main() {
    // libtest flags such as --nocapture are accepted and ignored
    let clock = Instant::now();
    let mut results: Vec<(u32, &str, Verdict)> = Vec::new();
    let (c1, c2) = coverage_and_shift();
    results.push((1, "conformal marginal coverage", c1));
    results.push((2, "coverage degradation under shift", c2));
    results.push((3, "cumulative cost exactness", cost_exactness()));
    results.push((4, "composite-loss gradient", gradient_check()));
    results.push((5, "queueing oracle", queueing_oracle()));
    let cfg = reference();
    let base = Pipeline::build(&cfg, cfg.seed).expect("reference pipeline");
    results.push((6, "co-optimization convergence", coopt_convergence(&cfg, &base)));
    results.push((7, "targeted beats random distillation", targeted_vs_random(&cfg)));
    results.push((8, "sweep monotonicities", sweeps(&cfg, &base)));
    results.push((9, "baseline anchors", baselines(&base)));
    results.push((10, "byte-identical reruns", determinism()));
    results.push((11, "small-instance oracles", small_oracles()));

    let mut failed = 0;
    for (id, name, v) in &results {
        println!("{} criterion {id:>2} ({name}): {}", if v.pass { "PASS" } else { "FAIL" }, v.detail);
        failed += (!v.pass) as usize;
    }
    println!("{} of {} criteria passed in {:.1}s", results.len() - failed, results.len(), clock.elapsed().as_secs_f64());
    if failed > 0 {
        std::process::exit(1);
    }
}
