//! Budget-respecting plan selection.
//!
//! All samplers share one loop: keep the switches whose cost still fits the
//! remaining budget, pick one of them, pay for it, repeat until nothing fits.
//! When every affordable switch fits at once they are all taken without a
//! draw; this is the only possible outcome of the remaining draws anyway.
//! With uniform costs the loop turns on exactly `affordable_count(l)`
//! switches.

use crate::cost::CostModel;
use crate::error::{Error, Result};
use crate::model::ExecutionPlan;
use crate::numerics::kernels;
use crate::numerics::{CustomOp, Graph, Rng, Scalar, Tensor, Var};

use super::{LatencyBudget, SchedulerLogits};

/// Runs the selection loop, calling `pick` with the affordable set (ascending
/// ids) whenever a choice has to be made.
pub fn select_with(
    k: usize,
    l: LatencyBudget,
    cost: &CostModel,
    mut pick: impl FnMut(&[usize]) -> usize,
) -> ExecutionPlan {
    debug_assert_eq!(k, cost.n_switches());
    let costs = cost.costs();
    let tol = cost.tolerance();
    let mut remaining = cost.allowance(l.value()) - cost.fixed_flops();
    let mut on = vec![false; k];
    let mut affordable = Vec::with_capacity(k);
    loop {
        affordable.clear();
        affordable.extend((0..k).filter(|&i| !on[i] && costs[i] <= remaining + tol));
        if affordable.is_empty() {
            break;
        }
        let total: f64 = affordable.iter().map(|&i| costs[i]).sum();
        if total <= remaining + tol {
            for &i in &affordable {
                on[i] = true;
            }
            break;
        }
        let i = pick(&affordable);
        on[i] = true;
        remaining -= costs[i];
    }
    ExecutionPlan::new(on)
}

/// Draws a plan from the without-replacement distribution: each round picks
/// one affordable switch with probability proportional to `η_i`.
pub fn sample_plan(logits: &SchedulerLogits, l: LatencyBudget, cost: &CostModel, rng: &mut Rng) -> ExecutionPlan {
    let pi = logits.pi();
    select_with(pi.len(), l, cost, |aff| {
        let mut w: Vec<f64> = aff.iter().map(|&i| pi[i]).collect();
        kernels::softmax_in_place(&mut w);
        aff[rng.categorical(&w)]
    })
}

/// Greedy plan: highest-logit affordable switch each round, ties to the
/// lowest id.
pub fn argmax_plan(logits: &SchedulerLogits, l: LatencyBudget, cost: &CostModel) -> ExecutionPlan {
    let pi = logits.pi();
    select_with(pi.len(), l, cost, |aff| {
        let mut best = aff[0];
        for &i in &aff[1..] {
            if pi[i] > pi[best] {
                best = i;
            }
        }
        best
    })
}

/// One Gumbel-softmax draw: soft weights over the affordable set and the
/// index (into `affordable`) of their argmax.
#[derive(Clone, Debug, PartialEq)]
pub struct GumbelRound {
    pub affordable: Vec<usize>,
    pub weights: Vec<f64>,
    pub chosen: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GumbelDraws {
    pub plan: ExecutionPlan,
    pub rounds: Vec<GumbelRound>,
    pub tau: f64,
}

impl GumbelDraws {
    /// Per-switch sum of the soft weights of all rounds, plus 1 for switches
    /// taken without a draw.
    pub fn soft_gates(&self) -> Vec<f64> {
        let mut s: Vec<f64> = self.plan.bits().iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
        for r in &self.rounds {
            s[r.affordable[r.chosen]] -= 1.0;
            for (&i, &w) in r.affordable.iter().zip(&r.weights) {
                s[i] += w;
            }
        }
        s
    }

    /// `∂gates/∂π` applied to an upstream gradient over gates.
    fn logit_grad(&self, upstream: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; upstream.len()];
        for r in &self.rounds {
            let dot: f64 = r.affordable.iter().zip(&r.weights).map(|(&i, &w)| upstream[i] * w).sum();
            for (&i, &w) in r.affordable.iter().zip(&r.weights) {
                g[i] += w * (upstream[i] - dot) / self.tau;
            }
        }
        g
    }
}

/// Selection loop driven by Gumbel-perturbed logits. One Gumbel sample is
/// drawn per affordable switch per round, in ascending id order.
pub fn gumbel_draws(pi: &[f64], l: LatencyBudget, cost: &CostModel, tau: f64, rng: &mut Rng) -> Result<GumbelDraws> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::Temperature(tau));
    }
    let mut rounds = Vec::new();
    let plan = select_with(pi.len(), l, cost, |aff| {
        let z: Vec<f64> = aff.iter().map(|&i| (pi[i] + rng.gumbel()) / tau).collect();
        let chosen = kernels::argmax(&z);
        let mut weights = z;
        kernels::softmax_in_place(&mut weights);
        rounds.push(GumbelRound {
            affordable: aff.to_vec(),
            weights,
            chosen,
        });
        aff[chosen]
    });
    Ok(GumbelDraws { plan, rounds, tau })
}

/// What the differentiable sampler emits in the forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Relaxation {
    /// Hard 0/1 gates; gradients flow through the soft weights.
    StraightThrough,
    /// The soft weights themselves. Used to check the backward rule against
    /// finite differences, which cannot see through a hard forward.
    Soft,
}

struct GumbelOp {
    draws: Vec<GumbelDraws>,
}

impl<F: Scalar> CustomOp<F> for GumbelOp {
    fn name(&self) -> &'static str {
        "gumbel_plan"
    }

    fn backward(&self, _: &[&Tensor<F>], _: &Tensor<F>, grad: &Tensor<F>) -> Vec<Option<Tensor<F>>> {
        let k = grad.cols();
        let mut out = Vec::with_capacity(grad.len());
        for (b, d) in self.draws.iter().enumerate() {
            let up: Vec<f64> = grad.row(b).iter().map(|v| v.as_f64()).collect();
            out.extend(d.logit_grad(&up).into_iter().map(F::of));
        }
        vec![Some(Tensor::matrix(self.draws.len(), k, out).expect("gradient shape"))]
    }
}

/// Samples one plan per row of `logits` (`batch × K`) and records gates on
/// the tape. Returns the gate node and the draws.
pub fn sample_plan_differentiable<F: Scalar>(
    g: &mut Graph<'_, F>,
    logits: Var,
    budgets: &[LatencyBudget],
    cost: &CostModel,
    tau: f64,
    mode: Relaxation,
    rng: &mut Rng,
) -> Result<(Var, Vec<GumbelDraws>)> {
    let t = g.value(logits);
    let (batch, k) = t.dims2();
    if batch != budgets.len() || k != cost.n_switches() {
        return Err(Error::shape("sample_plan_differentiable", t.shape(), &[budgets.len(), cost.n_switches()]));
    }
    let mut draws = Vec::with_capacity(batch);
    let mut value = Vec::with_capacity(batch * k);
    for (b, &l) in budgets.iter().enumerate() {
        let pi: Vec<f64> = t.row(b).iter().map(|v| v.as_f64()).collect();
        if pi.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite);
        }
        let d = gumbel_draws(&pi, l, cost, tau, rng)?;
        match mode {
            Relaxation::StraightThrough => {
                value.extend(d.plan.bits().iter().map(|&on| if on { F::one() } else { F::zero() }))
            }
            Relaxation::Soft => value.extend(d.soft_gates().into_iter().map(F::of)),
        }
        draws.push(d);
    }
    let value = Tensor::matrix(batch, k, value)?;
    let op = GumbelOp { draws: draws.clone() };
    Ok((g.custom(&[logits], value, Box::new(op)), draws))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn uniform_cost(k: usize, fixed: f64) -> CostModel {
        CostModel::from_parts(1, fixed, vec![1.0; k]).unwrap()
    }

    fn budget_for(cost: &CostModel, n_on: usize) -> LatencyBudget {
        let l = (cost.fixed_flops() + n_on as f64) / cost.base_flops();
        LatencyBudget::for_cost(l, cost).unwrap()
    }

    #[test]
    fn full_budget_turns_everything_on() {
        let cost = uniform_cost(5, 5.0);
        let logits = SchedulerLogits::new(vec![3.0, -1.0, 0.0, 9.0, -4.0]).unwrap();
        let l = LatencyBudget::for_cost(1.0, &cost).unwrap();
        assert_eq!(sample_plan(&logits, l, &cost, &mut Rng::new(0)), ExecutionPlan::all_on(5));
        assert_eq!(argmax_plan(&logits, l, &cost), ExecutionPlan::all_on(5));
    }

    #[test]
    fn single_draw_follows_softmax() {
        let cost = uniform_cost(2, 2.0);
        let l = budget_for(&cost, 1);
        let logits = SchedulerLogits::new(vec![3f64.ln(), 0.0]).unwrap();
        let mut rng = Rng::new(9);
        let n = 100_000;
        let hits = (0..n).filter(|_| sample_plan(&logits, l, &cost, &mut rng).is_on(0)).count();
        assert!((hits as f64 / n as f64 - 0.75).abs() < 0.01);
    }

    #[test]
    fn equal_logits_give_equal_pairs() {
        let cost = uniform_cost(3, 3.0);
        let l = budget_for(&cost, 2);
        let logits = SchedulerLogits::uniform(3);
        let mut rng = Rng::new(4);
        let mut counts = [0usize; 3];
        let n = 60_000;
        for _ in 0..n {
            let p = sample_plan(&logits, l, &cost, &mut rng);
            assert_eq!(p.count_on(), 2);
            let off = (0..3).find(|&i| !p.is_on(i)).unwrap();
            counts[off] += 1;
        }
        for c in counts {
            assert!((c as f64 / n as f64 - 1.0 / 3.0).abs() < 0.01);
        }
    }

    #[test]
    fn greedy_takes_top_logits_and_breaks_ties_low() {
        let cost = uniform_cost(4, 4.0);
        let l = budget_for(&cost, 2);
        let desc = SchedulerLogits::new(vec![4.0, 3.0, 2.0, 1.0]).unwrap();
        assert_eq!(argmax_plan(&desc, l, &cost), ExecutionPlan::from_selected(4, &[0, 1]));
        assert_eq!(argmax_plan(&SchedulerLogits::uniform(4), l, &cost), ExecutionPlan::from_selected(4, &[0, 1]));
        let mixed = SchedulerLogits::new(vec![0.0, 5.0, 1.0, 5.0]).unwrap();
        assert_eq!(argmax_plan(&mixed, l, &cost), ExecutionPlan::from_selected(4, &[1, 3]));
    }

    #[test]
    fn heterogeneous_costs_stay_feasible_and_maximal() {
        let cost = CostModel::from_parts(1, 10.0, vec![3.0, 1.0, 3.0, 1.0, 2.5, 0.5]).unwrap();
        let mut rng = Rng::new(2);
        for _ in 0..2_000 {
            let l = LatencyBudget::for_cost(rng.uniform_range(cost.l_min(), 1.0), &cost).unwrap();
            let logits = SchedulerLogits::new((0..6).map(|_| 3.0 * rng.normal()).collect()).unwrap();
            for plan in [sample_plan(&logits, l, &cost, &mut rng), argmax_plan(&logits, l, &cost)] {
                assert!(cost.is_feasible(&plan, l.value()));
                let slack = cost.allowance(l.value()) - cost.plan_flops(&plan);
                for i in (0..6).filter(|&i| !plan.is_on(i)) {
                    assert!(cost.costs()[i] > slack + cost.tolerance());
                }
            }
        }
    }

    #[test]
    fn gumbel_hard_plan_obeys_the_same_rules() {
        let cost = uniform_cost(6, 6.0);
        let mut rng = Rng::new(8);
        for n_on in 0..=6 {
            let l = budget_for(&cost, n_on);
            let pi: Vec<f64> = (0..6).map(|_| rng.normal()).collect();
            let d = gumbel_draws(&pi, l, &cost, 1.0, &mut rng).unwrap();
            assert_eq!(d.plan.count_on(), n_on);
            assert!(cost.is_feasible(&d.plan, l.value()));
        }
        assert!(gumbel_draws(&[0.0; 6], budget_for(&cost, 2), &cost, 0.0, &mut rng).is_err());
    }

    #[test]
    fn gumbel_argmax_matches_categorical_sampling() {
        let cost = uniform_cost(4, 4.0);
        let l = budget_for(&cost, 2);
        let pi = vec![1.0, 0.0, -0.5, 0.7];
        let logits = SchedulerLogits::new(pi.clone()).unwrap();
        let (mut a, mut b) = (std::collections::HashMap::new(), std::collections::HashMap::new());
        let n = 100_000;
        let (mut r1, mut r2) = (Rng::new(1), Rng::new(2));
        for _ in 0..n {
            *a.entry(sample_plan(&logits, l, &cost, &mut r1)).or_insert(0usize) += 1;
            *b.entry(gumbel_draws(&pi, l, &cost, 1.0, &mut r2).unwrap().plan).or_insert(0usize) += 1;
        }
        let tv: f64 = a
            .keys()
            .chain(b.keys())
            .collect::<std::collections::HashSet<_>>()
            .into_iter()
            .map(|p| (*a.get(p).unwrap_or(&0) as f64 - *b.get(p).unwrap_or(&0) as f64).abs() / n as f64)
            .sum::<f64>()
            / 2.0;
        assert!(tv < 0.01, "{tv}");
    }

    /// Soft gates built from tape primitives, then snapped with a
    /// straight-through node, give the same logit gradient as the fused op.
    #[test]
    fn straight_through_matches_composed_soft_path() {
        let cost = uniform_cost(5, 5.0);
        let budgets = [budget_for(&cost, 2), budget_for(&cost, 3)];
        let mut rng = Rng::new(3);
        let pi = Tensor::<f64>::from_fn(&[2, 5], |_| rng.normal());
        let up = Tensor::<f64>::from_fn(&[2, 5], |_| rng.normal());

        let mut g = Graph::new();
        let lv = g.param(&pi);
        let (gates, draws) = sample_plan_differentiable(
            &mut g,
            lv,
            &budgets,
            &cost,
            0.7,
            Relaxation::StraightThrough,
            &mut Rng::new(5),
        )
        .unwrap();
        for (b, d) in draws.iter().enumerate() {
            let bits: Vec<f64> = d.plan.bits().iter().map(|&x| if x { 1.0 } else { 0.0 }).collect();
            assert_eq!(g.value(gates).row(b), bits.as_slice());
        }
        let upc = g.constant(up.clone());
        let prod = g.mul(gates, upc).unwrap();
        let loss = g.sum(prod);
        let fused = g.backward(loss).wrt(lv, &pi);

        // Composed reference: per round, softmax((π_A + noise)/τ) via tape ops.
        let mut g2 = Graph::new();
        let lv2 = g2.param(&pi);
        let mut soft_rows = Vec::new();
        for (b, d) in draws.iter().enumerate() {
            let row = g2.gather_rows(lv2, &[b]).unwrap();
            let mut acc: Option<Var> = None;
            for r in &d.rounds {
                let sel = g2.select_cols(row, &r.affordable).unwrap();
                // Recover the noise from the recorded weights: z = log w + c.
                let z: Vec<f64> = r.weights.iter().map(|w| w.ln()).collect();
                let noise: Vec<f64> = r
                    .affordable
                    .iter()
                    .zip(&z)
                    .map(|(&i, &zi)| zi * d.tau - pi.row(b)[i])
                    .collect();
                let nz = Tensor::row_vector(noise);
                let shifted = g2.add_const(sel, &nz).unwrap();
                let scaled = g2.scale(shifted, 1.0 / d.tau);
                let w = g2.softmax_rows(scaled);
                let full = g2.scatter_cols(w, &r.affordable, 5).unwrap();
                acc = Some(match acc {
                    None => full,
                    Some(a) => g2.add(a, full).unwrap(),
                });
            }
            let soft = acc.unwrap_or_else(|| g2.constant(Tensor::zeros(&[1, 5])));
            let bits: Vec<f64> = d.plan.bits().iter().map(|&x| if x { 1.0 } else { 0.0 }).collect();
            soft_rows.push(g2.straight_through(soft, Tensor::row_vector(bits)).unwrap());
        }
        let gates2 = g2.concat_rows(&soft_rows).unwrap();
        let upc2 = g2.constant(up);
        let prod2 = g2.mul(gates2, upc2).unwrap();
        let loss2 = g2.sum(prod2);
        let composed = g2.backward(loss2).wrt(lv2, &pi);
        assert!(fused.max_abs_diff(&composed) < 1e-12);
        assert!(fused.data().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn saturated_budget_has_no_draws_and_no_gradient() {
        let cost = uniform_cost(4, 4.0);
        let l = LatencyBudget::for_cost(1.0, &cost).unwrap();
        let pi = Tensor::<f64>::from_fn(&[1, 4], |i| i as f64);
        let mut g = Graph::new();
        let lv = g.param(&pi);
        let (gates, draws) =
            sample_plan_differentiable(&mut g, lv, &[l], &cost, 1.0, Relaxation::StraightThrough, &mut Rng::new(1))
                .unwrap();
        assert!(draws[0].rounds.is_empty());
        let loss = g.sum(gates);
        assert!(g.backward(loss).wrt(lv, &pi).data().iter().all(|&v| v == 0.0));
    }
}
