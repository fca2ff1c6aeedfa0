//! Prefill FLOPs accounting.
//!
//! Per transformer layer at sequence length `n`, width `d`, MLP width `m`:
//!
//! | term                         | FLOPs                       |
//! |------------------------------|-----------------------------|
//! | Q, K, V, O projections       | `4 · 2·n·d²`                |
//! | scores and weighted values   | `2 · 2·n²·d`                |
//! | MLP (plain / gated)          | `2·n·d·m · 2` / `2·n·d·m · 3` |
//!
//! The LM head adds `2·d·V` for the last prompt position (zero when `n = 0`).
//! Embeddings, norms, softmax and the latency encoder are not counted.
//! Decoding is not counted either: budgets constrain prefill only.
//!
//! A head-level attention switch costs `1/H` of the layer's attention terms
//! and an MLP-group switch `1/H` of its MLP term. Layers below the split and
//! the LM head form `fixed_flops`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ExecutionPlan, MlpKind, ModelConfig, SwitchKind};

pub fn attention_projection_flops(config: &ModelConfig, seq_len: usize) -> f64 {
    let (n, d) = (seq_len as f64, config.d_model as f64);
    4.0 * 2.0 * n * d * d
}

pub fn attention_core_flops(config: &ModelConfig, seq_len: usize) -> f64 {
    let (n, d) = (seq_len as f64, config.d_model as f64);
    2.0 * 2.0 * n * n * d
}

pub fn mlp_flops(config: &ModelConfig, seq_len: usize) -> f64 {
    let (n, d, m) = (seq_len as f64, config.d_model as f64, config.d_mlp as f64);
    let matrices = match config.mlp {
        MlpKind::Plain => 2.0,
        MlpKind::Gated => 3.0,
    };
    2.0 * n * d * m * matrices
}

pub fn attention_flops(config: &ModelConfig, seq_len: usize) -> f64 {
    attention_projection_flops(config, seq_len) + attention_core_flops(config, seq_len)
}

pub fn layer_flops(config: &ModelConfig, seq_len: usize) -> f64 {
    attention_flops(config, seq_len) + mlp_flops(config, seq_len)
}

pub fn head_flops(config: &ModelConfig, seq_len: usize) -> f64 {
    attention_flops(config, seq_len) / config.n_heads as f64
}

pub fn mlp_group_flops(config: &ModelConfig, seq_len: usize) -> f64 {
    mlp_flops(config, seq_len) / config.n_heads as f64
}

pub fn lm_head_flops(config: &ModelConfig, seq_len: usize) -> f64 {
    if seq_len == 0 {
        return 0.0;
    }
    2.0 * config.d_model as f64 * config.vocab_size as f64
}

/// FLOPs of the non-switchable part: layers below the split, then the LM
/// head. The model's own FLOP tally accumulates in the same order.
pub fn fixed_flops(config: &ModelConfig, seq_len: usize) -> f64 {
    let mut acc = 0.0;
    for _ in 0..config.split_layer() {
        acc += layer_flops(config, seq_len);
    }
    acc + lm_head_flops(config, seq_len)
}

/// FLOPs of a full prefill with every switch on.
pub fn base_prefill_flops(config: &ModelConfig, seq_len: usize) -> f64 {
    let mut acc = 0.0;
    for _ in 0..config.n_layers {
        acc += layer_flops(config, seq_len);
    }
    acc + lm_head_flops(config, seq_len)
}

/// Cost of each switch at `seq_len`, indexed by switch id.
pub fn switch_costs(config: &ModelConfig, seq_len: usize) -> Vec<f64> {
    config
        .topology()
        .descriptors()
        .iter()
        .map(|d| match d.kind {
            SwitchKind::Block => layer_flops(config, seq_len),
            SwitchKind::AttnHead => head_flops(config, seq_len),
            SwitchKind::MlpGroup => mlp_group_flops(config, seq_len),
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostModel {
    seq_len: usize,
    fixed_flops: f64,
    costs: Vec<f64>,
    base_flops: f64,
}

impl CostModel {
    pub fn new(config: &ModelConfig, seq_len: usize) -> Result<Self> {
        if seq_len == 0 {
            return Err(Error::Config("cost model needs seq_len > 0".into()));
        }
        Self::from_parts(seq_len, fixed_flops(config, seq_len), switch_costs(config, seq_len))
    }

    /// Builds a cost model from an explicit cost table. The base cost is
    /// `fixed + Σ costs`.
    pub fn from_parts(seq_len: usize, fixed_flops: f64, costs: Vec<f64>) -> Result<Self> {
        if !(fixed_flops.is_finite() && fixed_flops >= 0.0)
            || costs.iter().any(|c| !(c.is_finite() && *c > 0.0))
        {
            return Err(Error::Config("switch costs must be positive and finite".into()));
        }
        let base_flops = fixed_flops + costs.iter().sum::<f64>();
        Ok(CostModel {
            seq_len,
            fixed_flops,
            costs,
            base_flops,
        })
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn fixed_flops(&self) -> f64 {
        self.fixed_flops
    }

    pub fn base_flops(&self) -> f64 {
        self.base_flops
    }

    pub fn costs(&self) -> &[f64] {
        &self.costs
    }

    pub fn n_switches(&self) -> usize {
        self.costs.len()
    }

    /// Smallest admissible budget: the fixed fraction of the base cost.
    pub fn l_min(&self) -> f64 {
        self.fixed_flops / self.base_flops
    }

    /// FLOPs allowed at budget `l`.
    pub fn allowance(&self, l: f64) -> f64 {
        l * self.base_flops
    }

    /// Slack absorbed when comparing against an allowance, so that a plan
    /// whose cost equals the allowance up to rounding counts as feasible.
    pub fn tolerance(&self) -> f64 {
        1e-9 * self.base_flops
    }

    pub fn plan_flops(&self, plan: &ExecutionPlan) -> f64 {
        let mut acc = self.fixed_flops;
        for i in plan.selected() {
            acc += self.costs[i];
        }
        acc
    }

    pub fn utilization(&self, plan: &ExecutionPlan, l: f64) -> f64 {
        self.plan_flops(plan) / self.allowance(l)
    }

    pub fn is_feasible(&self, plan: &ExecutionPlan, l: f64) -> bool {
        self.plan_flops(plan) <= self.allowance(l) + self.tolerance()
    }

    /// Largest `k` with `fixed + k·c ≤ l·base`, taking `c` as the first
    /// switch cost. Meant for uniform-cost topologies.
    pub fn affordable_count(&self, l: f64) -> usize {
        let Some(&c) = self.costs.first() else {
            return 0;
        };
        let room = self.allowance(l) - self.fixed_flops + self.tolerance();
        if room <= 0.0 {
            return 0;
        }
        ((room / c).floor() as usize).min(self.costs.len())
    }

    pub fn is_uniform(&self) -> bool {
        self.costs.windows(2).all(|w| w[0] == w[1])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::SwitchDesign;

    fn llava_like() -> ModelConfig {
        ModelConfig::llava_like()
    }

    #[test]
    fn llava_scale_prefill_is_about_eight_teraflops() {
        let f = base_prefill_flops(&llava_like(), 620);
        assert!((7.7e12..9.5e12).contains(&f), "{f}");
    }

    #[test]
    fn zero_length_costs_nothing() {
        assert_eq!(base_prefill_flops(&llava_like(), 0), 0.0);
    }

    #[test]
    fn projection_terms_scale_quadratically_in_width() {
        let cfg = llava_like();
        let mut wide = cfg.clone();
        wide.d_model *= 2;
        let r = attention_projection_flops(&wide, 100) / attention_projection_flops(&cfg, 100);
        assert_eq!(r, 4.0);
    }

    #[test]
    fn fixed_plus_switches_is_base() {
        for design in [SwitchDesign::LayerLevel, SwitchDesign::HeadLevel] {
            let mut cfg = llava_like();
            cfg.switch_design = design;
            let cm = CostModel::new(&cfg, 620).unwrap();
            let direct = base_prefill_flops(&cfg, 620);
            assert!(((cm.base_flops() - direct) / direct).abs() < 1e-9);
        }
    }

    #[test]
    fn full_plan_uses_full_budget() {
        let cm = CostModel::new(&llava_like(), 620).unwrap();
        let plan = ExecutionPlan::all_on(cm.n_switches());
        assert!((cm.utilization(&plan, 1.0) - 1.0).abs() < 1e-12);
        let empty = ExecutionPlan::all_off(cm.n_switches());
        assert!((cm.utilization(&empty, cm.l_min()) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn uniform_thirty_two_layer_counts() {
        // Every block costs exactly 1/32 of the base model.
        let cm = CostModel::from_parts(1, 16.0, vec![1.0; 16]).unwrap();
        assert_eq!(cm.affordable_count(1.0), 16);
        assert_eq!(cm.affordable_count(cm.l_min()), 0);
        assert_eq!(cm.affordable_count(0.75), 8);
        let k = cm.affordable_count(0.60);
        let plan = ExecutionPlan::from_selected(16, &(0..k).collect::<Vec<_>>());
        assert_eq!(cm.plan_flops(&plan) / cm.base_flops(), 0.59375);
    }

    #[test]
    fn llava_budget_sixty_percent() {
        let cm = CostModel::new(&llava_like(), 620).unwrap();
        let k = cm.affordable_count(0.60);
        let plan = ExecutionPlan::from_selected(16, &(0..k).collect::<Vec<_>>());
        let ratio = cm.plan_flops(&plan) / cm.base_flops();
        assert!((0.59..=0.61).contains(&ratio), "{ratio}");
    }

    #[test]
    fn from_parts_rejects_nonpositive_costs() {
        assert!(CostModel::from_parts(1, 1.0, vec![1.0, 0.0]).is_err());
        assert!(CostModel::from_parts(1, f64::NAN, vec![1.0]).is_err());
    }
}
