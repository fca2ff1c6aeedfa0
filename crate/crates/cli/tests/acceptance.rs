//! End-to-end acceptance suite. Every criterion is evaluated, one result
//! line is printed per criterion, and the test fails if any criterion does.
//! Trained toy models are cached so criteria 6 to 9 share them.
//!
//! Run with `cargo test -p adaplan-cli --test acceptance -- --nocapture` to
//! see the result lines as they are produced.

use std::collections::BTreeMap;
use std::sync::OnceLock;
use std::time::Instant;

use adaplan_core::cost::CostModel;
use adaplan_core::data::{make_synthetic_dataset, Sample, Split};
use adaplan_core::harness::{evaluate, policy_for, spearman, SweepReport};
use adaplan_core::model::{ModelConfig, SwitchDesign};
use adaplan_core::numerics::Rng;
use adaplan_core::scheduler::{argmax_plan, sample_plan, LatencyBudget, SchedulerLogits};
use adaplan_core::training::{train, Arm};
use adaplan_core::{AdaptiveModel, ExperimentConfig, PlanPolicy};
use adaplan_oracle::checks::sampler_agreement;
use adaplan_oracle::exhaustive::{feasible_plan_nlls, within_best_quantile};
use adaplan_oracle::gradient::{gradient_check, DEFAULT_EPS};
use adaplan_oracle::ReferenceModel;

const SEEDS: [u64; 3] = [0, 1, 2];
const LAMBDAS: [f64; 3] = [0.1, 1.0, 10.0];

struct Outcome {
    id: usize,
    name: &'static str,
    passed: bool,
    detail: String,
    secs: f64,
}

fn run(id: usize, name: &'static str, f: impl FnOnce() -> (bool, String)) -> Outcome {
    let t = Instant::now();
    let (passed, detail) = f();
    let o = Outcome {
        id,
        name,
        passed,
        detail,
        secs: t.elapsed().as_secs_f64(),
    };
    println!("{}", line(&o));
    o
}

fn line(o: &Outcome) -> String {
    format!(
        "[{}] {}. {} ({:.1}s): {}",
        if o.passed { "PASS" } else { "FAIL" },
        o.id,
        o.name,
        o.secs,
        o.detail
    )
}

struct Trained {
    exp: ExperimentConfig,
    model: AdaptiveModel<f32>,
    sweep: SweepReport,
}

fn eval_samples(exp: &ExperimentConfig) -> &'static [Sample] {
    static EVAL: OnceLock<Vec<Sample>> = OnceLock::new();
    EVAL.get_or_init(|| make_synthetic_dataset(&exp.task, exp.eval.n_samples, exp.eval.data_seed, Split::Eval).unwrap())
}

fn train_arm(arm: Arm, seed: u64) -> Trained {
    let mut exp = ExperimentConfig::toy();
    exp.train.arm = arm;
    exp.train.seed = seed;
    let t = Instant::now();
    let model = train(&exp, &mut |_| {}).unwrap().model;
    let samples = eval_samples(&exp);
    let (sweep, _) = evaluate(
        &model,
        &exp,
        samples,
        &exp.eval.budgets,
        &policy_for(&arm, seed),
        &arm.label(),
        seed,
    )
    .unwrap();
    let acc: Vec<String> = sweep.rows.iter().map(|r| format!("{}:{:.1}", r.budget, r.accuracy)).collect();
    println!("    trained {} seed={seed} in {:.0}s; accuracy {}", arm.label(), t.elapsed().as_secs_f64(), acc.join(" "));
    Trained { exp, model, sweep }
}

/// Every trained arm, keyed by label and seed; built once.
fn trained() -> &'static BTreeMap<(String, u64), Trained> {
    static ALL: OnceLock<BTreeMap<(String, u64), Trained>> = OnceLock::new();
    ALL.get_or_init(|| {
        let mut runs: Vec<(Arm, u64)> = Vec::new();
        for &s in &SEEDS {
            runs.push((Arm::Probabilistic, s));
            runs.push((Arm::Random, s));
        }
        runs.push((Arm::Base, 0));
        for &lambda in &LAMBDAS {
            runs.push((Arm::Deterministic { lambda }, 0));
        }
        runs.into_iter()
            .map(|(arm, s)| ((arm.label(), s), train_arm(arm, s)))
            .collect()
    })
}

fn get(arm: Arm, seed: u64) -> &'static Trained {
    &trained()[&(arm.label(), seed)]
}

fn low_budget_mean(r: &SweepReport) -> f64 {
    let low: Vec<f64> = r.rows.iter().filter(|row| row.budget <= 0.75).map(|row| row.accuracy).collect();
    low.iter().sum::<f64>() / low.len() as f64
}

fn mean_accuracy(r: &SweepReport) -> f64 {
    r.rows.iter().map(|row| row.accuracy).sum::<f64>() / r.rows.len() as f64
}

fn flops_calibration() -> (bool, String) {
    let cfg = ModelConfig::llava_like();
    let cost = CostModel::new(&cfg, 620).unwrap();
    let base = cost.base_flops();
    let l = LatencyBudget::for_cost(0.6, &cost).unwrap();
    let plan = argmax_plan(&SchedulerLogits::uniform(cost.n_switches()), l, &cost);
    let ratio = cost.plan_flops(&plan) / base;
    let ok = (7.7e12..=9.5e12).contains(&base) && (0.59..=0.61).contains(&ratio);
    (ok, format!("base {:.2} TFLOPs (7.7..9.5), ratio at 0.60 = {ratio:.4} (0.59..0.61)", base / 1e12))
}

fn adherence_costs() -> Vec<(&'static str, CostModel)> {
    let mut head = ExperimentConfig::toy();
    head.model.switch_design = SwitchDesign::HeadLevel;
    let layer = ExperimentConfig::toy();
    let mut big = ModelConfig::llava_like();
    big.switch_design = SwitchDesign::HeadLevel;
    big.switchable_start_layer = Some(30);
    vec![
        ("toy layer", layer.cost_model().unwrap()),
        ("toy head", head.cost_model().unwrap()),
        ("7B layer", CostModel::new(&ModelConfig::llava_like(), 620).unwrap()),
        ("7B head", CostModel::new(&big, 620).unwrap()),
    ]
}

fn budget_adherence() -> (bool, String) {
    let costs = adherence_costs();
    let mut rng = Rng::new(2024);
    let (mut infeasible, mut errors) = (0usize, 0usize);
    let n = 10_000;
    for i in 0..n {
        let (_, cost) = &costs[i % costs.len()];
        let lo = cost.l_min().max(0.5);
        let b = rng.uniform_range(lo, 1.0);
        let logits: Vec<f64> = (0..cost.n_switches()).map(|_| 3.0 * rng.normal()).collect();
        let outcome = std::panic::catch_unwind(|| -> Result<bool, adaplan_core::Error> {
            let l = LatencyBudget::for_cost(b, cost)?;
            let logits = SchedulerLogits::new(logits.clone())?;
            let mut draw = Rng::new(i as u64);
            let sampled = sample_plan(&logits, l, cost, &mut draw);
            let greedy = argmax_plan(&logits, l, cost);
            Ok(cost.is_feasible(&sampled, b) && cost.is_feasible(&greedy, b))
        });
        match outcome {
            Ok(Ok(true)) => {}
            Ok(Ok(false)) => infeasible += 1,
            _ => errors += 1,
        }
    }
    let names: Vec<&str> = costs.iter().map(|(n, _)| *n).collect();
    (
        infeasible == 0 && errors == 0,
        format!("{n} triples over {names:?}: {infeasible} infeasible, {errors} errors"),
    )
}

fn utilization() -> (bool, String) {
    let cfg = ModelConfig::llava_like();
    let cost = CostModel::new(&cfg, 620).unwrap();
    let mut rng = Rng::new(7);
    let mut parts = Vec::new();
    let mut total = 0.0;
    let mut count = 0usize;
    for b in [0.65, 0.75, 0.85, 0.95] {
        let l = LatencyBudget::for_cost(b, &cost).unwrap();
        let mut sum = 0.0;
        for _ in 0..1000 {
            let logits = SchedulerLogits::new((0..cost.n_switches()).map(|_| rng.normal()).collect()).unwrap();
            sum += cost.utilization(&sample_plan(&logits, l, &cost, &mut rng), b);
        }
        parts.push(format!("{b}:{:.2}%", 100.0 * sum / 1000.0));
        total += sum;
        count += 1000;
    }
    let mean = 100.0 * total / count as f64;
    (
        cost.n_switches() == 16 && mean >= 96.0,
        format!("{} switches, mean {mean:.2}% (>= 96) [{}]", cost.n_switches(), parts.join(" ")),
    )
}

fn sampler() -> (bool, String) {
    let tvs = sampler_agreement(10, 200_000, 11).unwrap();
    let worst = tvs.iter().copied().fold(0.0, f64::max);
    (worst < 0.01, format!("max TV {worst:.4} over {} vectors (< 0.01)", tvs.len()))
}

fn gradients() -> (bool, String) {
    let r = gradient_check(3, 2, 0.8, DEFAULT_EPS).unwrap();
    (
        r.theta_rel_err < 1e-4 && r.phi_rel_err < 1e-3 && r.phi_norm > 0.0,
        format!(
            "theta rel err {:.2e} (< 1e-4, {} params), phi rel err {:.2e} (< 1e-3, {} params)",
            r.theta_rel_err, r.n_theta, r.phi_rel_err, r.n_phi
        ),
    )
}

fn full_budget_identity() -> (bool, String) {
    let t = get(Arm::Probabilistic, 0);
    let cost = t.exp.cost_model().unwrap();
    let reference = ReferenceModel::new(&t.model.config, &t.model.params);
    let samples = make_synthetic_dataset(&t.exp.task, 1000, 77, Split::Eval).unwrap();
    let l = LatencyBudget::for_cost(1.0, &cost).unwrap();
    let mut diff = 0;
    for s in &samples {
        let lib = t.model.infer(s, l, &cost, &PlanPolicy::Greedy).unwrap();
        if lib.answer != reference.generate(s, s.answer.len()) {
            diff += 1;
        }
    }
    (diff == 0, format!("{diff} of {} answers differ from the plain transformer", samples.len()))
}

fn adaptivity() -> (bool, String) {
    let prob = get(Arm::Probabilistic, 0);
    let base = get(Arm::Base, 0);
    let full = prob.sweep.row(1.0).unwrap().accuracy;
    let base_full = base.sweep.row(1.0).unwrap().accuracy;
    let parity = (full - base_full).abs() <= 2.0;

    let xs: Vec<f64> = prob.sweep.rows.iter().map(|r| r.budget).collect();
    let ys: Vec<f64> = prob.sweep.rows.iter().map(|r| r.accuracy).collect();
    let rho = spearman(&xs, &ys).unwrap_or(f64::NAN);
    let trend = xs.len() >= 6 && rho >= 0.8;

    let p: f64 = SEEDS.iter().map(|&s| low_budget_mean(&get(Arm::Probabilistic, s).sweep)).sum::<f64>() / 3.0;
    let r: f64 = SEEDS.iter().map(|&s| low_budget_mean(&get(Arm::Random, s).sweep)).sum::<f64>() / 3.0;
    let beats = p > r;
    (
        parity && trend && beats,
        format!(
            "(a) full budget {full:.1}% vs base {base_full:.1}% [{}]; (b) spearman {rho:.3} over {} budgets [{}]; \
             (c) mean accuracy at l<=0.75 over 3 seeds: probabilistic {p:.2}% vs random {r:.2}% [{}]",
            ok(parity),
            xs.len(),
            ok(trend),
            ok(beats)
        ),
    )
}

fn ok(b: bool) -> &'static str {
    if b {
        "ok"
    } else {
        "fail"
    }
}

fn deterministic_trend() -> (bool, String) {
    let prob = &get(Arm::Probabilistic, 0).sweep;
    let (lambda, best) = LAMBDAS
        .iter()
        .map(|&lambda| (lambda, &get(Arm::Deterministic { lambda }, 0).sweep))
        .max_by(|a, b| mean_accuracy(a.1).total_cmp(&mean_accuracy(b.1)))
        .unwrap();
    let mut hits = Vec::new();
    for row in &best.rows {
        let p = prob.row(row.budget).unwrap();
        if row.success_rate < 100.0 {
            hits.push(format!("l={} success {:.1}%", row.budget, row.success_rate));
        } else if row.mean_utilization <= p.mean_utilization - 5.0 {
            hits.push(format!(
                "l={} utilization {:.1}% vs {:.1}%",
                row.budget, row.mean_utilization, p.mean_utilization
            ));
        }
    }
    let detail = format!(
        "best lambda {lambda} (mean accuracy {:.1}%); {}",
        mean_accuracy(best),
        if hits.is_empty() { "no separating budget".to_string() } else { hits.join(", ") }
    );
    (!hits.is_empty(), detail)
}

fn scheduler_quality() -> (bool, String) {
    let t = get(Arm::Probabilistic, 0);
    let cost = t.exp.cost_model().unwrap();
    let l = 0.75;
    let lb = LatencyBudget::for_cost(l, &cost).unwrap();
    let samples = &eval_samples(&t.exp)[..200];
    let mut good = 0;
    let mut n_plans = 0;
    for s in samples {
        let all = feasible_plan_nlls(&t.model, s, l, &cost).unwrap();
        n_plans = all.len();
        let plan = argmax_plan(&t.model.scheduler_logits(s, lb).unwrap(), lb, &cost);
        let mine = t.model.answer_nll(s, lb, &plan).unwrap();
        let values: Vec<f64> = all.iter().map(|(_, v)| *v).collect();
        if within_best_quantile(mine, &values, 0.1) {
            good += 1;
        }
    }
    let frac = good as f64 / samples.len() as f64;
    (
        frac >= 0.8,
        format!(
            "argmax plan in best decile of {n_plans} feasible plans on {good}/{} samples ({:.1}%, >= 80%)",
            samples.len(),
            100.0 * frac
        ),
    )
}

#[test]
fn acceptance() {
    let mut outcomes = vec![
        run(1, "FLOPs calibration", flops_calibration),
        run(2, "hard budget adherence", budget_adherence),
        run(3, "utilization", utilization),
        run(4, "sampler vs exact enumeration", sampler),
        run(5, "gradient fidelity", gradients),
    ];
    let t = Instant::now();
    println!("    training {} toy models", trained().len());
    println!("    training done in {:.0}s", t.elapsed().as_secs_f64());
    outcomes.extend([
        run(6, "full-budget identity", full_budget_identity),
        run(7, "end-to-end adaptivity", adaptivity),
        run(8, "deterministic baseline separation", deterministic_trend),
        run(9, "scheduler vs exhaustive search", scheduler_quality),
    ]);
    println!("\nacceptance summary");
    for o in &outcomes {
        println!("{}", line(o));
    }
    let failed: Vec<usize> = outcomes.iter().filter(|o| !o.passed).map(|o| o.id).collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
