//! Exact plan probabilities by brute force.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const MAX_ENUMERATION_K: usize = 10;

fn check_bound(k: usize) -> Result<()> {
    if k > MAX_ENUMERATION_K {
        return Err(Error::Bound {
            what: "switches",
            got: k,
            max: MAX_ENUMERATION_K,
        });
    }
    Ok(())
}

fn weights(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    logits.iter().map(|&p| (p - m).exp()).collect()
}

/// Probability that drawing `k = |plan|` switches one at a time, each draw
/// proportional to `exp(logit)` over the switches not drawn yet, selects
/// exactly the set `plan`. Sums the draw probability of every ordering.
pub fn exact_set_probability(logits: &[f64], plan: &[bool]) -> Result<f64> {
    check_bound(logits.len())?;
    if plan.len() != logits.len() {
        return Err(Error::Invalid(format!(
            "plan has {} bits for {} logits",
            plan.len(),
            logits.len()
        )));
    }
    let w = weights(logits);
    let total: f64 = w.iter().sum();
    let chosen: Vec<usize> = (0..plan.len()).filter(|&i| plan[i]).collect();
    let mut used = vec![false; chosen.len()];
    Ok(orderings(&w, &chosen, &mut used, total))
}

fn orderings(w: &[f64], chosen: &[usize], used: &mut [bool], remaining: f64) -> f64 {
    if used.iter().all(|&u| u) {
        return 1.0;
    }
    let mut acc = 0.0;
    for j in 0..chosen.len() {
        if used[j] {
            continue;
        }
        let i = chosen[j];
        used[j] = true;
        acc += w[i] / remaining * orderings(w, chosen, used, remaining - w[i]);
        used[j] = false;
    }
    acc
}

/// Every `k`-subset of `K` switches with its exact probability.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanEnumeration {
    pub n_switches: usize,
    pub k: usize,
    pub plans: Vec<(Vec<bool>, f64)>,
}

impl PlanEnumeration {
    pub fn total(&self) -> f64 {
        self.plans.iter().map(|(_, p)| p).sum()
    }

    pub fn probability(&self, plan: &[bool]) -> f64 {
        self.plans.iter().find(|(p, _)| p == plan).map_or(0.0, |(_, q)| *q)
    }
}

pub fn enumerate_plans(logits: &[f64], k: usize) -> Result<PlanEnumeration> {
    let n = logits.len();
    check_bound(n)?;
    if k > n {
        return Err(Error::Invalid(format!("k = {k} exceeds K = {n}")));
    }
    let mut plans = Vec::new();
    for mask in 0u32..(1 << n) {
        if mask.count_ones() as usize != k {
            continue;
        }
        let plan: Vec<bool> = (0..n).map(|i| mask >> i & 1 == 1).collect();
        let p = exact_set_probability(logits, &plan)?;
        plans.push((plan, p));
    }
    Ok(PlanEnumeration {
        n_switches: n,
        k,
        plans,
    })
}

/// Exact distribution of the budgeted selection process with arbitrary
/// costs: each round, the switches still off whose cost fits the remaining
/// allowance form the candidate set; when all candidates fit together they
/// are all taken, otherwise one is drawn proportional to `exp(logit)`.
pub fn budgeted_distribution(
    logits: &[f64],
    costs: &[f64],
    allowance: f64,
    tol: f64,
) -> Result<BTreeMap<Vec<bool>, f64>> {
    check_bound(logits.len())?;
    let w = weights(logits);
    let mut out = BTreeMap::new();
    let mut on = vec![false; w.len()];
    walk(&w, costs, allowance, tol, &mut on, 1.0, &mut out);
    Ok(out)
}

fn walk(
    w: &[f64],
    costs: &[f64],
    left: f64,
    tol: f64,
    on: &mut Vec<bool>,
    p: f64,
    out: &mut BTreeMap<Vec<bool>, f64>,
) {
    let cands: Vec<usize> = (0..w.len()).filter(|&i| !on[i] && costs[i] <= left + tol).collect();
    let need: f64 = cands.iter().map(|&i| costs[i]).sum();
    if cands.is_empty() || need <= left + tol {
        let mut plan = on.clone();
        for &i in &cands {
            plan[i] = true;
        }
        *out.entry(plan).or_insert(0.0) += p;
        return;
    }
    let z: f64 = cands.iter().map(|&i| w[i]).sum();
    for &i in &cands {
        on[i] = true;
        walk(w, costs, left - costs[i], tol, on, p * w[i] / z, out);
        on[i] = false;
    }
}

/// Total-variation distance between an empirical histogram and an exact
/// distribution.
pub fn total_variation(counts: &BTreeMap<Vec<bool>, usize>, exact: &BTreeMap<Vec<bool>, f64>) -> f64 {
    let n: usize = counts.values().sum();
    let mut keys: Vec<&Vec<bool>> = counts.keys().chain(exact.keys()).collect();
    keys.sort();
    keys.dedup();
    0.5 * keys
        .into_iter()
        .map(|k| {
            let e = counts.get(k).copied().unwrap_or(0) as f64 / n.max(1) as f64;
            (e - exact.get(k).copied().unwrap_or(0.0)).abs()
        })
        .sum::<f64>()
}
