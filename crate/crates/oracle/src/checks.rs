//! Named oracle checks with JSON-serializable outcomes.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use adaplan_core::cost::CostModel;
use adaplan_core::data::{make_synthetic_dataset, Split};
use adaplan_core::model::SwitchDesign;
use adaplan_core::numerics::Rng;
use adaplan_core::scheduler::{sample_plan, LatencyBudget, SchedulerLogits};
use adaplan_core::{AdaptiveModel, ExperimentConfig, PlanPolicy};

use crate::enumeration::{budgeted_distribution, enumerate_plans, exact_set_probability, total_variation};
use crate::exhaustive::exhaustive_best_plan;
use crate::gradient::{gradient_check, DEFAULT_EPS};
use crate::reference::ReferenceModel;
use crate::surgery::{surgery_difference, SURGERY_TOLERANCE};
use crate::{Error, Result};

pub const CHECK_NAMES: [&str; 7] = [
    "set-probability",
    "enumeration",
    "sampler",
    "gradient",
    "surgery",
    "exhaustive",
    "reference",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    /// The measured quantity compared against `threshold`.
    pub metric: f64,
    pub threshold: f64,
    pub detail: String,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CheckOptions {
    pub seed: u64,
    /// Plans drawn per logit vector in the sampler check.
    pub draws: usize,
    pub vectors: usize,
}

impl Default for CheckOptions {
    fn default() -> Self {
        CheckOptions {
            seed: 0,
            draws: 200_000,
            vectors: 10,
        }
    }
}

/// TV distance between `draws` sampled plans and the exact distribution for
/// `vectors` random logit vectors with `K = 6` unit-cost switches and room
/// for three.
pub fn sampler_agreement(vectors: usize, draws: usize, seed: u64) -> Result<Vec<f64>> {
    let cost = CostModel::from_parts(1, 0.0, vec![1.0; 6])?;
    let l = LatencyBudget::for_cost(0.5, &cost)?;
    let mut rng = Rng::new(seed);
    (0..vectors)
        .map(|v| {
            let logits: Vec<f64> = (0..6).map(|_| 1.5 * rng.normal()).collect();
            let exact = enumerate_plans(&logits, 3)?;
            let exact: BTreeMap<Vec<bool>, f64> = exact.plans.into_iter().collect();
            let sl = SchedulerLogits::new(logits)?;
            let mut draw_rng = rng.fork(v as u64);
            let mut counts = BTreeMap::new();
            for _ in 0..draws {
                let p = sample_plan(&sl, l, &cost, &mut draw_rng);
                *counts.entry(p.bits().to_vec()).or_insert(0usize) += 1;
            }
            Ok(total_variation(&counts, &exact))
        })
        .collect()
}

fn result(name: &str, metric: f64, threshold: f64, passed: bool, detail: String) -> CheckResult {
    CheckResult {
        name: name.to_string(),
        passed,
        metric,
        threshold,
        detail,
    }
}

fn small_exp(design: SwitchDesign) -> ExperimentConfig {
    let mut exp = ExperimentConfig::toy();
    exp.model.d_model = 16;
    exp.model.d_mlp = 32;
    exp.model.switch_design = design;
    if design == SwitchDesign::HeadLevel {
        exp.model.n_layers = 2;
        exp.model.n_heads = 2;
        exp.model.switchable_start_layer = Some(1);
    }
    exp
}

pub fn run_check(name: &str, opts: &CheckOptions) -> Result<CheckResult> {
    match name {
        "set-probability" => {
            let a = exact_set_probability(&[3f64.ln(), 0.0], &[true, false])?;
            let b = exact_set_probability(&[0.0; 3], &[true, true, false])?;
            let c = exact_set_probability(&[0.4, -1.0, 2.0], &[true; 3])?;
            let err = (a - 0.75).abs().max((b - 1.0 / 3.0).abs()).max((c - 1.0).abs());
            Ok(result(name, err, 1e-12, err < 1e-12, format!("P=0.75:{a} P=1/3:{b} P(full)=1:{c}")))
        }
        "enumeration" => {
            let mut rng = Rng::new(opts.seed);
            let mut worst: f64 = 0.0;
            for _ in 0..20 {
                let logits: Vec<f64> = (0..6).map(|_| 2.0 * rng.normal()).collect();
                worst = worst.max((enumerate_plans(&logits, 3)?.total() - 1.0).abs());
                let costs: Vec<f64> = (0..6).map(|_| 0.2 + rng.uniform()).collect();
                let d = budgeted_distribution(&logits, &costs, 2.0, 1e-9)?;
                worst = worst.max((d.values().sum::<f64>() - 1.0).abs());
            }
            Ok(result(name, worst, 1e-10, worst < 1e-10, "max |sum - 1| over 40 distributions".into()))
        }
        "sampler" => {
            let tvs = sampler_agreement(opts.vectors, opts.draws, opts.seed)?;
            let worst = tvs.iter().copied().fold(0.0, f64::max);
            Ok(result(name, worst, 0.01, worst < 0.01, format!("TV per vector: {tvs:?}")))
        }
        "gradient" => {
            let r = gradient_check(opts.seed, 2, 0.8, DEFAULT_EPS)?;
            let passed = r.theta_rel_err < 1e-4 && r.phi_rel_err < 1e-3 && r.phi_norm > 0.0;
            Ok(result(
                name,
                r.theta_rel_err.max(r.phi_rel_err),
                1e-4,
                passed,
                format!("theta {:.3e} (< 1e-4), phi {:.3e} (< 1e-3)", r.theta_rel_err, r.phi_rel_err),
            ))
        }
        "surgery" => {
            let exp = small_exp(SwitchDesign::HeadLevel);
            let model = AdaptiveModel::<f32>::init(exp.model.clone(), &mut Rng::new(opts.seed))?;
            let s = &make_synthetic_dataset(&exp.task, 1, opts.seed, Split::Eval)?[0];
            let x = model.prompt(s, LatencyBudget::new(1.0, 0.0)?)?;
            let mut worst: f64 = 0.0;
            for id in 0..exp.model.n_switches() {
                worst = worst.max(surgery_difference(&model, &x, id)?);
            }
            Ok(result(
                name,
                worst,
                SURGERY_TOLERANCE,
                worst < SURGERY_TOLERANCE,
                format!("{} switches", exp.model.n_switches()),
            ))
        }
        "exhaustive" => {
            let exp = small_exp(SwitchDesign::LayerLevel);
            let cost = exp.cost_model()?;
            let model = AdaptiveModel::<f32>::init(exp.model.clone(), &mut Rng::new(opts.seed))?;
            let s = &make_synthetic_dataset(&exp.task, 1, opts.seed, Split::Eval)?[0];
            let l = 0.75;
            let lb = LatencyBudget::for_cost(l, &cost)?;
            let (_, best) = exhaustive_best_plan(&model, s, l, &cost)?;
            let mut rng = Rng::new(opts.seed ^ 1);
            let mut worst_gap = f64::INFINITY;
            for _ in 0..100 {
                let logits = SchedulerLogits::new((0..cost.n_switches()).map(|_| rng.normal()).collect())?;
                let p = sample_plan(&logits, lb, &cost, &mut rng);
                worst_gap = worst_gap.min(model.answer_nll(s, lb, &p)? - best);
            }
            Ok(result(
                name,
                worst_gap,
                0.0,
                worst_gap >= 0.0,
                "min over 100 random feasible plans of NLL(plan) - NLL(best)".into(),
            ))
        }
        "reference" => {
            let exp = small_exp(SwitchDesign::LayerLevel);
            let cost = exp.cost_model()?;
            let model = AdaptiveModel::<f32>::init(exp.model.clone(), &mut Rng::new(opts.seed))?;
            let r = ReferenceModel::new(&model.config, &model.params);
            let data = make_synthetic_dataset(&exp.task, 50, opts.seed, Split::Eval)?;
            let l = LatencyBudget::for_cost(1.0, &cost)?;
            let mut mismatches = 0;
            for s in &data {
                let lib = model.infer(s, l, &cost, &PlanPolicy::Greedy)?;
                if lib.answer != r.generate(s, s.answer.len()) {
                    mismatches += 1;
                }
            }
            Ok(result(
                name,
                mismatches as f64,
                0.0,
                mismatches == 0,
                format!("{mismatches} of {} answers differ", data.len()),
            ))
        }
        other => Err(Error::Invalid(format!(
            "unknown check {other:?}; expected one of {CHECK_NAMES:?}"
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fast_checks_pass() {
        let opts = CheckOptions {
            draws: 20_000,
            vectors: 2,
            ..CheckOptions::default()
        };
        for name in ["set-probability", "enumeration", "surgery", "exhaustive", "reference"] {
            let r = run_check(name, &opts).unwrap();
            assert!(r.passed, "{r:?}");
        }
        assert!(run_check("nope", &opts).is_err());
    }

    #[test]
    fn sampler_tv_is_small_with_moderate_draws() {
        let tvs = sampler_agreement(2, 50_000, 3).unwrap();
        assert!(tvs.iter().all(|&t| t < 0.02), "{tvs:?}");
    }
}
