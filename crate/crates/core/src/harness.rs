//! Budget sweeps, inspection dumps and merged reports.
//!
//! Output schemas are listed in `docs/output-schemas.md`.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adaptive::{AdaptiveModel, PlanPolicy};
use crate::cost::CostModel;
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::experiment::ExperimentConfig;
use crate::model::{SwitchKind, SwitchTopology};
use crate::scheduler::LatencyBudget;
use crate::training::Arm;

pub const SWEEP_SCHEMA: &str = "adaplan-sweep/1";

/// One sample evaluated at one budget.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub arm: String,
    pub sample_id: u64,
    pub budget: f64,
    pub plan: String,
    pub plan_flops: f64,
    pub feasible: bool,
    /// Plan FLOPs over the budget's allowance.
    pub utilization: f64,
    pub correct: bool,
    /// Generated ids, space separated, end-of-answer excluded.
    pub answer: String,
}

/// Aggregates at one budget. Percentages are in `[0, 100]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BudgetSummary {
    pub budget: f64,
    pub accuracy: f64,
    pub mean_flops: f64,
    pub success_rate: f64,
    pub mean_utilization: f64,
    pub n_samples: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub schema: String,
    pub arm: String,
    pub policy: String,
    pub seed: u64,
    pub budgets: Vec<f64>,
    pub l_min: f64,
    pub rows: Vec<BudgetSummary>,
    pub config: ExperimentConfig,
}

impl SweepReport {
    pub fn row(&self, budget: f64) -> Option<&BudgetSummary> {
        self.rows.iter().find(|r| r.budget == budget)
    }
}

/// The inference policy used to evaluate a trained arm.
pub fn policy_for(arm: &Arm, seed: u64) -> PlanPolicy {
    match arm {
        Arm::Probabilistic => PlanPolicy::Greedy,
        Arm::Deterministic { .. } => PlanPolicy::Threshold,
        Arm::Random => PlanPolicy::Uniform { seed },
        Arm::Base => PlanPolicy::Full,
    }
}

fn policy_name(p: &PlanPolicy) -> String {
    match p {
        PlanPolicy::Greedy => "greedy".into(),
        PlanPolicy::Threshold => "threshold".into(),
        PlanPolicy::Uniform { seed } => format!("uniform(seed={seed})"),
        PlanPolicy::Full => "full".into(),
        PlanPolicy::Fixed(plan) => format!("fixed({plan})"),
    }
}

/// Sorted, de-duplicated budgets; every one must lie in `[l_min, 1]`.
pub fn normalize_budgets(budgets: &[f64], cost: &CostModel) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(budgets.len());
    for &b in budgets {
        LatencyBudget::for_cost(b, cost)?;
        out.push(b);
    }
    out.sort_by(f64::total_cmp);
    out.dedup();
    Ok(out)
}

fn join_ids(ids: &[usize]) -> String {
    ids.iter().map(|t| t.to_string()).collect::<Vec<_>>().join(" ")
}

/// Evaluates every sample at every budget. Records come back ordered by
/// budget, then by sample. Work runs on the current rayon pool; results do
/// not depend on the thread count.
pub fn evaluate(
    model: &AdaptiveModel<f32>,
    exp: &ExperimentConfig,
    samples: &[Sample],
    budgets: &[f64],
    policy: &PlanPolicy,
    arm: &str,
    seed: u64,
) -> Result<(SweepReport, Vec<EvalRecord>)> {
    let cost = exp.cost_model()?;
    let budgets = normalize_budgets(budgets, &cost)?;
    let mut records = Vec::with_capacity(budgets.len() * samples.len());
    let mut rows = Vec::with_capacity(budgets.len());
    for &b in &budgets {
        let l = LatencyBudget::for_cost(b, &cost)?;
        let batch: Vec<EvalRecord> = samples
            .par_iter()
            .map(|s| {
                let inf = model.infer(s, l, &cost, policy)?;
                let plan_flops = cost.plan_flops(&inf.plan);
                Ok(EvalRecord {
                    arm: arm.to_string(),
                    sample_id: s.id,
                    budget: b,
                    plan: inf.plan.to_string(),
                    plan_flops,
                    feasible: cost.is_feasible(&inf.plan, b),
                    utilization: cost.utilization(&inf.plan, b),
                    correct: inf.answer.first() == s.label().first(),
                    answer: join_ids(&inf.answer),
                })
            })
            .collect::<Result<_>>()?;
        rows.push(summarize(b, &batch));
        records.extend(batch);
    }
    let report = SweepReport {
        schema: SWEEP_SCHEMA.to_string(),
        arm: arm.to_string(),
        policy: policy_name(policy),
        seed,
        budgets,
        l_min: cost.l_min(),
        rows,
        config: exp.clone(),
    };
    Ok((report, records))
}

fn summarize(budget: f64, records: &[EvalRecord]) -> BudgetSummary {
    let n = records.len().max(1) as f64;
    let pct = |f: &dyn Fn(&EvalRecord) -> bool| 100.0 * records.iter().filter(|r| f(r)).count() as f64 / n;
    BudgetSummary {
        budget,
        accuracy: pct(&|r| r.correct),
        mean_flops: records.iter().map(|r| r.plan_flops).sum::<f64>() / n,
        success_rate: pct(&|r| r.feasible),
        mean_utilization: 100.0 * records.iter().map(|r| r.utilization).sum::<f64>() / n,
        n_samples: records.len(),
    }
}

pub fn write_records_csv(records: &[EvalRecord], w: impl std::io::Write) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for r in records {
        out.serialize(r)?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_records_csv(r: impl std::io::Read) -> Result<Vec<EvalRecord>> {
    let mut rd = csv::Reader::from_reader(r);
    rd.deserialize().map(|x| x.map_err(Error::from)).collect()
}

/// Switch states of one layer. Block-level layers use `block`; head-level
/// layers use `heads` and `mlp_groups`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerPlan {
    pub layer: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub block: Option<bool>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub heads: Vec<bool>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub mlp_groups: Vec<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InspectDump {
    pub sample_id: u64,
    pub budget: f64,
    pub plan: String,
    pub layers: Vec<LayerPlan>,
    pub logits: Vec<f64>,
    pub probabilities: Vec<f64>,
    pub plan_flops: f64,
    pub utilization: f64,
    pub answer: Vec<usize>,
    pub gold: Vec<usize>,
    /// Layer whose output feeds the scheduler.
    pub attention_layer: usize,
    /// Latency-token attention at `attention_layer`, one full row per head.
    pub attention: Vec<Vec<f64>>,
    /// The first `n_visual_tokens` entries of each row in `attention`.
    pub visual_attention: Vec<Vec<f64>>,
}

pub fn layer_plans(topology: &SwitchTopology, bits: &[bool]) -> Vec<LayerPlan> {
    let mut by_layer: BTreeMap<usize, LayerPlan> = BTreeMap::new();
    for d in topology.descriptors() {
        let e = by_layer.entry(d.layer_index).or_insert(LayerPlan {
            layer: d.layer_index,
            block: None,
            heads: Vec::new(),
            mlp_groups: Vec::new(),
        });
        let on = bits[d.switch_id];
        match d.kind {
            SwitchKind::Block => e.block = Some(on),
            SwitchKind::AttnHead => e.heads.push(on),
            SwitchKind::MlpGroup => e.mlp_groups.push(on),
        }
    }
    by_layer.into_values().collect()
}

pub fn inspect(
    model: &AdaptiveModel<f32>,
    exp: &ExperimentConfig,
    sample: &Sample,
    budget: f64,
    policy: &PlanPolicy,
) -> Result<InspectDump> {
    let cost = exp.cost_model()?;
    let l = LatencyBudget::for_cost(budget, &cost)?;
    let inf = model.infer(sample, l, &cost, policy)?;
    let layer = model.config.split_layer().saturating_sub(1);
    let attention: Vec<Vec<f64>> = inf.attention[layer]
        .iter()
        .map(|h| h.as_ref().map(|row| row.iter().map(|&v| v as f64).collect()).unwrap_or_default())
        .collect();
    let nv = model.config.n_visual_tokens;
    let visual_attention = attention.iter().map(|r| r.iter().take(nv).copied().collect()).collect();
    Ok(InspectDump {
        sample_id: sample.id,
        budget,
        plan: inf.plan.to_string(),
        layers: layer_plans(&model.config.topology(), inf.plan.bits()),
        logits: inf.logits.pi().to_vec(),
        probabilities: inf.logits.probabilities(),
        plan_flops: cost.plan_flops(&inf.plan),
        utilization: cost.utilization(&inf.plan, budget),
        answer: inf.answer,
        gold: sample.label().to_vec(),
        attention_layer: layer,
        attention,
        visual_attention,
    })
}

/// Spearman rank correlation with average ranks for ties. `None` when
/// either side is constant or the lengths differ.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Option<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return None;
    }
    let rx = average_ranks(xs);
    let ry = average_ranks(ys);
    pearson(&rx, &ry)
}

fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return None;
    }
    Some(sab / (saa * sbb).sqrt())
}

/// Merged report rows, CSV text and a Markdown table.
#[derive(Clone, Debug, PartialEq)]
pub struct Report {
    pub rows: Vec<(String, BudgetSummary)>,
    pub csv: String,
    pub markdown: String,
}

fn arm_rank(arm: &str) -> u8 {
    if arm.starts_with("probabilistic") {
        0
    } else if arm.starts_with("deterministic") {
        1
    } else if arm.starts_with("random") {
        2
    } else if arm.starts_with("base") {
        3
    } else {
        4
    }
}

/// Merges sweeps into one table ordered by arm then budget. Overlapping
/// `(arm, budget)` rows must agree exactly.
pub fn report(sweeps: &[SweepReport]) -> Result<Report> {
    let mut merged: BTreeMap<(u8, String, u64), BudgetSummary> = BTreeMap::new();
    for s in sweeps {
        if s.schema != SWEEP_SCHEMA {
            return Err(Error::Schema(format!("expected {SWEEP_SCHEMA}, got {:?}", s.schema)));
        }
        for row in &s.rows {
            if !row.budget.is_finite() || !(0.0..=100.0).contains(&row.success_rate) {
                return Err(Error::Schema(format!("bad row in sweep for {}", s.arm)));
            }
            let key = (arm_rank(&s.arm), s.arm.clone(), row.budget.to_bits());
            match merged.get(&key) {
                Some(prev) if prev != row => {
                    return Err(Error::Schema(format!(
                        "conflicting rows for {} at budget {}",
                        s.arm, row.budget
                    )))
                }
                _ => {
                    merged.insert(key, row.clone());
                }
            }
        }
    }
    let mut rows: Vec<(String, BudgetSummary)> = merged.into_iter().map(|((_, arm, _), r)| (arm, r)).collect();
    rows.sort_by(|a, b| {
        (arm_rank(&a.0), &a.0)
            .cmp(&(arm_rank(&b.0), &b.0))
            .then(a.1.budget.total_cmp(&b.1.budget))
    });

    let mut csv = String::from("arm,budget,accuracy,mean_flops,success_rate,mean_utilization,n_samples\n");
    let mut markdown = String::from(
        "| arm | budget | accuracy (%) | mean FLOPs | success (%) | utilization (%) | n |\n\
         |---|---:|---:|---:|---:|---:|---:|\n",
    );
    for (arm, r) in &rows {
        let _ = writeln!(
            csv,
            "{},{},{:.4},{:.6e},{:.4},{:.4},{}",
            csv_field(arm),
            r.budget,
            r.accuracy,
            r.mean_flops,
            r.success_rate,
            r.mean_utilization,
            r.n_samples
        );
        let _ = writeln!(
            markdown,
            "| {} | {:.2} | {:.1} | {:.4e} | {:.1} | {:.1} | {} |",
            arm, r.budget, r.accuracy, r.mean_flops, r.success_rate, r.mean_utilization, r.n_samples
        );
    }
    Ok(Report { rows, csv, markdown })
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}
