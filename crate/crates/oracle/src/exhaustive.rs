//! Constrained plan search by full enumeration.

use adaplan_core::cost::CostModel;
use adaplan_core::data::Sample;
use adaplan_core::model::ExecutionPlan;
use adaplan_core::scheduler::LatencyBudget;
use adaplan_core::AdaptiveModel;

use crate::{Error, Result};

pub const MAX_EXHAUSTIVE_K: usize = 16;

/// Every plan whose FLOPs fit budget `l`, in ascending bit-mask order.
pub fn feasible_plans(cost: &CostModel, l: f64) -> Result<Vec<ExecutionPlan>> {
    let k = cost.n_switches();
    if k > MAX_EXHAUSTIVE_K {
        return Err(Error::Bound {
            what: "switches",
            got: k,
            max: MAX_EXHAUSTIVE_K,
        });
    }
    Ok((0u32..(1 << k))
        .map(|mask| ExecutionPlan::new((0..k).map(|i| mask >> i & 1 == 1).collect()))
        .filter(|p| cost.is_feasible(p, l))
        .collect())
}

/// Answer NLL of `sample` under every feasible plan at budget `l`.
pub fn feasible_plan_nlls(
    model: &AdaptiveModel<f32>,
    sample: &Sample,
    l: f64,
    cost: &CostModel,
) -> Result<Vec<(ExecutionPlan, f64)>> {
    let plans = feasible_plans(cost, l)?;
    let lb = LatencyBudget::for_cost(l, cost)?;
    let nlls = model.answer_nll_many(sample, lb, &plans)?;
    Ok(plans.into_iter().zip(nlls).collect())
}

/// The feasible plan of least answer NLL; ties go to the earliest plan in
/// mask order.
pub fn exhaustive_best_plan(
    model: &AdaptiveModel<f32>,
    sample: &Sample,
    l: f64,
    cost: &CostModel,
) -> Result<(ExecutionPlan, f64)> {
    let all = feasible_plan_nlls(model, sample, l, cost)?;
    let mut best: Option<(ExecutionPlan, f64)> = None;
    for (p, v) in all {
        if best.as_ref().is_none_or(|(_, b)| v < *b) {
            best = Some((p, v));
        }
    }
    best.ok_or_else(|| Error::Invalid("no feasible plan".into()))
}

/// Whether `value` is no worse than the `q`-quantile of `all` (lower is
/// better), taking the `ceil(q·n)`-th smallest value as the cutoff.
pub fn within_best_quantile(value: f64, all: &[f64], q: f64) -> bool {
    if all.is_empty() {
        return false;
    }
    let mut sorted = all.to_vec();
    sorted.sort_by(f64::total_cmp);
    let idx = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len()) - 1;
    value <= sorted[idx]
}

#[cfg(test)]
mod tests {
    use super::*;
    use adaplan_core::data::{make_synthetic_dataset, Split};
    use adaplan_core::numerics::Rng;
    use adaplan_core::scheduler::sample_plan;
    use adaplan_core::scheduler::SchedulerLogits;
    use adaplan_core::ExperimentConfig;

    fn setup() -> (ExperimentConfig, AdaptiveModel<f32>, Vec<Sample>, CostModel) {
        let mut exp = ExperimentConfig::toy();
        exp.model.d_model = 16;
        exp.model.d_mlp = 32;
        let model = AdaptiveModel::init(exp.model.clone(), &mut Rng::new(5)).unwrap();
        let data = make_synthetic_dataset(&exp.task, 3, 2, Split::Eval).unwrap();
        let cost = exp.cost_model().unwrap();
        (exp, model, data, cost)
    }

    #[test]
    fn quantile_cutoff() {
        let all: Vec<f64> = (1..=20).map(f64::from).collect();
        assert!(within_best_quantile(2.0, &all, 0.1));
        assert!(!within_best_quantile(2.5, &all, 0.1));
        assert!(within_best_quantile(1.0, &[1.0], 0.1));
    }

    #[test]
    fn best_plan_dominates_random_feasible_plans() {
        let (_, model, data, cost) = setup();
        assert_eq!(cost.n_switches(), 6);
        let l = 0.75;
        let lb = LatencyBudget::for_cost(l, &cost).unwrap();
        let mut rng = Rng::new(1);
        for s in &data {
            let (best, v) = exhaustive_best_plan(&model, s, l, &cost).unwrap();
            assert!(cost.is_feasible(&best, l));
            let again = exhaustive_best_plan(&model, s, l, &cost).unwrap();
            assert_eq!(again, (best, v));
            for _ in 0..100 {
                let logits = SchedulerLogits::new((0..6).map(|_| rng.normal()).collect()).unwrap();
                let p = sample_plan(&logits, lb, &cost, &mut rng);
                assert!(v <= model.answer_nll(s, lb, &p).unwrap());
            }
        }
    }

    #[test]
    fn full_budget_prefers_full_model_when_constructed() {
        // Zeroing the output projections of every switchable block makes all
        // plans equivalent; then all-ones is within 1e-6 of the minimum.
        let (_, mut model, data, cost) = setup();
        let split = model.config.split_layer();
        for lw in &mut model.params.model.layers[split..] {
            lw.wo = adaplan_core::numerics::Tensor::zeros(lw.wo.shape());
            lw.w_down = adaplan_core::numerics::Tensor::zeros(lw.w_down.shape());
            lw.b_down = adaplan_core::numerics::Tensor::zeros(lw.b_down.shape());
        }
        let all = feasible_plan_nlls(&model, &data[0], 1.0, &cost).unwrap();
        assert_eq!(all.len(), 64);
        let min = all.iter().map(|(_, v)| *v).fold(f64::INFINITY, f64::min);
        let full = all.iter().find(|(p, _)| p.count_on() == 6).unwrap().1;
        assert!(full <= min + 1e-6);
    }

    #[test]
    fn bound_is_enforced() {
        let cost = CostModel::from_parts(4, 1.0, vec![1.0; 17]).unwrap();
        let err = feasible_plans(&cost, 1.0).unwrap_err();
        assert!(err.to_string().contains("enumeration bound exceeded"));
    }
}
