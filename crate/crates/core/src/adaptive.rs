//! End-to-end adaptive inference for one sample: encode the budget, run the
//! always-on layers, ask the scheduler for a plan, finish the prefill under
//! that plan and decode greedily.

use crate::cost::CostModel;
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::model::{ExecutionPlan, FrontState, ModelConfig, ModelView};
use crate::numerics::{kernels, Rng, Scalar, Tensor};
use crate::params::Params;
use crate::scheduler::{argmax_plan, sample_plan, LatencyBudget, SchedulerLogits};

/// How a plan is chosen at inference time.
#[derive(Clone, Debug, PartialEq)]
pub enum PlanPolicy {
    /// Greedy most-probable plan from the scheduler logits.
    Greedy,
    /// Switch `i` on iff `sigmoid(π_i) ≥ 0.5`; may exceed the budget.
    Threshold,
    /// A plan drawn with uniform logits, seeded per sample and budget.
    Uniform { seed: u64 },
    /// Every switch on, latency token encoded at `l = 1`.
    Full,
    Fixed(ExecutionPlan),
}

#[derive(Clone, Debug)]
pub struct Inference<F> {
    pub logits: SchedulerLogits,
    pub plan: ExecutionPlan,
    pub flops: f64,
    pub answer: Vec<usize>,
    /// Attention of the latency token, per layer and head.
    pub attention: Vec<Vec<Option<Vec<F>>>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdaptiveModel<F: Scalar = f32> {
    pub config: ModelConfig,
    pub params: Params<F>,
}

impl<F: Scalar> AdaptiveModel<F> {
    pub fn new(config: ModelConfig, params: Params<F>) -> Result<Self> {
        config.validate()?;
        if params.scheduler.n_switches() != config.n_switches() {
            return Err(Error::Config("scheduler head does not match the switch count".into()));
        }
        Ok(AdaptiveModel { config, params })
    }

    pub fn init(config: ModelConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let params = Params::init(&config, rng);
        Ok(AdaptiveModel { config, params })
    }

    pub fn view(&self) -> ModelView<'_, F> {
        ModelView::new(&self.config, &self.params.model)
    }

    /// `[visual, query, latency]` embedding for `sample` at budget `l`.
    pub fn prompt(&self, sample: &Sample, l: LatencyBudget) -> Result<Tensor<F>> {
        let token = self.params.scheduler.encode_latency(l)?;
        self.view().assemble_prompt(&sample.features.cast(), &sample.query, token.data())
    }

    /// Prompt followed by the teacher-forced answer inputs.
    pub fn teacher_forced_input(&self, sample: &Sample, l: LatencyBudget) -> Result<Tensor<F>> {
        let prompt = self.prompt(sample, l)?;
        let ans = self.view().embed_text(sample.answer_inputs(), prompt.rows())?;
        Tensor::concat_rows(&[&prompt, &ans])
    }

    pub fn logits_from(&self, front: &FrontState<F>, latency_row: usize) -> Result<SchedulerLogits> {
        self.params.scheduler.logits(front.hidden().row(latency_row))
    }

    fn choose(
        &self,
        policy: &PlanPolicy,
        logits: &SchedulerLogits,
        sample: &Sample,
        l: LatencyBudget,
        cost: &CostModel,
    ) -> ExecutionPlan {
        let k = self.config.n_switches();
        match policy {
            PlanPolicy::Greedy => argmax_plan(logits, l, cost),
            PlanPolicy::Threshold => ExecutionPlan::new(logits.pi().iter().map(|&p| p >= 0.0).collect()),
            PlanPolicy::Uniform { seed } => {
                let stream = sample.id.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ l.value().to_bits();
                sample_plan(&SchedulerLogits::uniform(k), l, cost, &mut Rng::new(*seed).fork(stream))
            }
            PlanPolicy::Full => ExecutionPlan::all_on(k),
            PlanPolicy::Fixed(p) => p.clone(),
        }
    }

    /// Plans, prefills and greedily answers `sample` at budget `l`.
    pub fn infer(&self, sample: &Sample, l: LatencyBudget, cost: &CostModel, policy: &PlanPolicy) -> Result<Inference<F>> {
        let token_budget = match policy {
            PlanPolicy::Full => LatencyBudget::new(1.0, 0.0)?,
            _ => l,
        };
        let prompt = self.prompt(sample, token_budget)?;
        let view = self.view();
        let front = view.prefill_front(&prompt)?;
        let logits = self.logits_from(&front, prompt.rows() - 1)?;
        let plan = self.choose(policy, &logits, sample, l, cost);
        let out = view.prefill_back(front, &plan)?;
        let attention = out.attention.clone();
        let flops = out.flops;
        let answer = view.generate_from(out, &plan, sample.answer.len(), crate::data::END_OF_ANSWER)?;
        Ok(Inference {
            logits,
            plan,
            flops,
            answer,
            attention,
        })
    }

    /// Scheduler logits for `sample` at budget `l`.
    pub fn scheduler_logits(&self, sample: &Sample, l: LatencyBudget) -> Result<SchedulerLogits> {
        let prompt = self.prompt(sample, l)?;
        let front = self.view().prefill_front(&prompt)?;
        self.logits_from(&front, prompt.rows() - 1)
    }

    /// Mean answer-token NLL of `sample` under each plan; the always-on
    /// layers run once.
    pub fn answer_nll_many(&self, sample: &Sample, l: LatencyBudget, plans: &[ExecutionPlan]) -> Result<Vec<f64>> {
        let x = self.teacher_forced_input(sample, l)?;
        let view = self.view();
        let front = view.prefill_front(&x)?;
        let first = x.rows() - sample.answer.len();
        plans
            .iter()
            .map(|plan| {
                let out = view.prefill_back(front.clone(), plan)?;
                let mut nll = 0.0;
                for (i, &t) in sample.answer.iter().enumerate() {
                    let row: Vec<f64> = out.logits.row(first + i).iter().map(|v| v.as_f64()).collect();
                    nll += kernels::log_sum_exp(&row) - row[t];
                }
                Ok(nll / sample.answer.len() as f64)
            })
            .collect()
    }

    pub fn answer_nll(&self, sample: &Sample, l: LatencyBudget, plan: &ExecutionPlan) -> Result<f64> {
        Ok(self.answer_nll_many(sample, l, std::slice::from_ref(plan))?[0])
    }
}
