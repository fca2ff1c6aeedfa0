//! Joint training of the transformer and the scheduler, plus the baseline
//! arms it is compared against.

mod adam;

pub use adam::{clip_grad_norm, grad_norm, Adam};

use serde::{Deserialize, Serialize};

use crate::adaptive::AdaptiveModel;
use crate::cost::CostModel;
use crate::data::{make_synthetic_dataset, Sample, Split};
use crate::error::{Error, Result};
use crate::experiment::ExperimentConfig;
use crate::model::{ExecutionPlan, GraphModel, SequenceInput};
use crate::numerics::{kernels, Graph, Rng, Scalar, Tensor, Var};
use crate::params::{ModelParams, Params};
use crate::scheduler::{sample_plan, sample_plan_differentiable, LatencyBudget, Relaxation, SchedulerLogits};

/// What is trained and how plans are produced during training.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Arm {
    /// Plans sampled without replacement under the budget, Gumbel-softmax
    /// straight-through gradients into the scheduler.
    Probabilistic,
    /// Independent sigmoid gates binarized at 0.5 (straight-through) and a
    /// hinge penalty `lambda · max(0, plan_flops/base − l)`.
    Deterministic { lambda: f64 },
    /// Plans sampled with uniform logits; the scheduler head is unused.
    Random,
    /// No switching: every switch on, budget fixed at 1.
    Base,
}

impl Arm {
    pub fn label(&self) -> String {
        match self {
            Arm::Probabilistic => "probabilistic".into(),
            Arm::Deterministic { lambda } => format!("deterministic(lambda={lambda})"),
            Arm::Random => "random".into(),
            Arm::Base => "base".into(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    /// Cosine decay to 10% of the peak after warmup.
    Cosine,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub arm: Arm,
    pub budget_range: [f64; 2],
    /// Fraction of training samples given the full budget `l = 1` instead
    /// of a draw from `budget_range`. Without it a model trained from
    /// scratch rarely sees the full plan.
    #[serde(default)]
    pub full_budget_share: f64,
    /// Leading steps trained as the base arm (full plan, `l = 1`) before
    /// the configured arm takes over, so the arm adapts a model that
    /// already uses every layer. Counted within `steps`, so a value of at least
    /// `steps` trains the base arm throughout.
    #[serde(default)]
    pub full_plan_steps: usize,
    pub learning_rate: f64,
    pub schedule: LrSchedule,
    pub warmup_steps: usize,
    pub batch_size: usize,
    pub steps: usize,
    pub tau: f64,
    pub grad_clip: Option<f64>,
    pub seed: u64,
    pub data_seed: u64,
    pub train_samples: usize,
    pub log_every: usize,
}

impl TrainConfig {
    pub fn validate(&self, l_min: f64) -> Result<()> {
        let [lo, hi] = self.budget_range;
        if !(lo >= l_min - 1e-12 && lo <= hi && hi <= 1.0) {
            return Err(Error::Config(format!(
                "budget_range [{lo}, {hi}] must lie within [{l_min:.4}, 1]"
            )));
        }
        if !(0.0..=1.0).contains(&self.full_budget_share) {
            return Err(Error::Config("full_budget_share must lie in [0, 1]".into()));
        }
        if let Arm::Deterministic { lambda } = self.arm {
            if !(lambda >= 0.0 && lambda.is_finite()) {
                return Err(Error::Config("lambda must be non-negative".into()));
            }
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Temperature(self.tau));
        }
        if self.batch_size == 0 || self.train_samples == 0 || !(self.learning_rate > 0.0) {
            return Err(Error::Config("batch_size, train_samples and learning_rate must be positive".into()));
        }
        Ok(())
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        let peak = self.learning_rate;
        if step < self.warmup_steps {
            return peak * (step + 1) as f64 / self.warmup_steps as f64;
        }
        match self.schedule {
            LrSchedule::Constant => peak,
            LrSchedule::Cosine => {
                let span = (self.steps.saturating_sub(self.warmup_steps)).max(1) as f64;
                let t = ((step - self.warmup_steps) as f64 / span).min(1.0);
                peak * (0.1 + 0.9 * 0.5 * (1.0 + (std::f64::consts::PI * t).cos()))
            }
        }
    }
}

/// Result of one forward/backward pass over a batch.
#[derive(Clone, Debug)]
pub struct StepOutput<F: Scalar> {
    pub loss: f64,
    pub grads: Params<F>,
    pub budgets: Vec<f64>,
    pub plans: Vec<ExecutionPlan>,
    /// Fraction of answer tokens predicted correctly (teacher forced).
    pub token_accuracy: f64,
}

/// Per-step knobs that tests need to control.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepOptions {
    pub relaxation: Relaxation,
    /// Overrides the sampled budgets with one value for the whole batch.
    pub fixed_budget: Option<f64>,
}

impl Default for StepOptions {
    fn default() -> Self {
        StepOptions {
            relaxation: Relaxation::StraightThrough,
            fixed_budget: None,
        }
    }
}

/// One training step of any arm: returns the loss and gradients for every
/// parameter. `rng` supplies budgets and plan noise.
pub fn training_step<F: Scalar>(
    model: &AdaptiveModel<F>,
    batch: &[&Sample],
    cost: &CostModel,
    cfg: &TrainConfig,
    opts: StepOptions,
    rng: &mut Rng,
) -> Result<StepOutput<F>> {
    let mcfg = &model.config;
    let n = batch.len();
    let budgets: Vec<f64> = match (cfg.arm, opts.fixed_budget) {
        (Arm::Base, _) => vec![1.0; n],
        (_, Some(l)) => vec![l; n],
        _ => {
            let [lo, hi] = cfg.budget_range;
            (0..n)
                .map(|_| {
                    if cfg.full_budget_share > 0.0 && rng.uniform() < cfg.full_budget_share {
                        1.0
                    } else {
                        rng.uniform_range(lo, hi)
                    }
                })
                .collect()
        }
    };
    let lbs = budgets
        .iter()
        .map(|&l| LatencyBudget::for_cost(l, cost))
        .collect::<Result<Vec<_>>>()?;

    let mut g: Graph<'_, F> = Graph::new();
    let pv: ModelParams<Var> = model.params.map(&mut |_, t| g.param(t));
    let gm = GraphModel::new(mcfg, &pv.model);
    let features: Vec<Tensor<F>> = batch.iter().map(|s| s.features.cast()).collect();
    let inputs: Vec<SequenceInput<'_, F>> = batch
        .iter()
        .zip(&features)
        .map(|(s, f)| SequenceInput {
            features: f,
            query: &s.query,
            answer_inputs: s.answer_inputs(),
        })
        .collect();
    let latency = pv.scheduler.graph_encode(&mut g, &budgets)?;
    let (x, layout) = gm.embed(&mut g, &inputs, latency)?;
    let split = mcfg.split_layer();
    let x = gm.layers(&mut g, 0..split, x, layout, None)?;
    let prompt_len = layout.seq - batch[0].answer_inputs().len();
    let lat_rows: Vec<usize> = (0..n).map(|b| layout.row(b, prompt_len - 1)).collect();
    let k = mcfg.n_switches();

    let mut penalty = None;
    let (gates, plans) = match cfg.arm {
        Arm::Base => (None, vec![ExecutionPlan::all_on(k); n]),
        Arm::Random => {
            let uniform = SchedulerLogits::uniform(k);
            let plans: Vec<_> = lbs.iter().map(|&l| sample_plan(&uniform, l, cost, rng)).collect();
            (Some(g.constant(plan_matrix(&plans)?)), plans)
        }
        Arm::Probabilistic => {
            let h = g.gather_rows(x, &lat_rows)?;
            let logits = pv.scheduler.graph_logits(&mut g, h)?;
            let (gates, draws) =
                sample_plan_differentiable(&mut g, logits, &lbs, cost, cfg.tau, opts.relaxation, rng)?;
            (Some(gates), draws.into_iter().map(|d| d.plan).collect())
        }
        Arm::Deterministic { lambda } => {
            let h = g.gather_rows(x, &lat_rows)?;
            let logits = pv.scheduler.graph_logits(&mut g, h)?;
            let soft = g.sigmoid(logits);
            let lt = g.value(logits);
            let plans: Vec<_> = (0..n)
                .map(|b| ExecutionPlan::new(lt.row(b).iter().map(|&v| v >= F::zero()).collect()))
                .collect();
            let gates = match opts.relaxation {
                Relaxation::StraightThrough => g.straight_through(soft, plan_matrix(&plans)?)?,
                Relaxation::Soft => soft,
            };
            // Plan cost as a fraction of the base cost, minus the budget.
            let base = cost.base_flops();
            let col = Tensor::matrix(k, 1, cost.costs().iter().map(|c| F::of(c / base)).collect())?;
            let colv = g.constant(col);
            let frac = g.matmul(gates, colv)?;
            let offset = Tensor::matrix(n, 1, budgets.iter().map(|&l| F::of(cost.l_min() - l)).collect())?;
            let over = g.add_const(frac, &offset)?;
            let hinge = g.relu(over);
            let mean = g.mean(hinge);
            penalty = Some(g.scale(mean, lambda));
            (Some(gates), plans)
        }
    };

    let x = gm.layers(&mut g, split..mcfg.n_layers, x, layout, gates)?;
    let na = batch[0].answer.len();
    let mut rows = Vec::with_capacity(n * na);
    let mut targets = Vec::with_capacity(n * na);
    for (b, s) in batch.iter().enumerate() {
        for (i, &t) in s.answer.iter().enumerate() {
            rows.push(layout.row(b, prompt_len - 1 + i));
            targets.push(t);
        }
    }
    let logits = gm.logits_at(&mut g, x, &rows)?;
    let lt = g.value(logits);
    let hits = (0..rows.len()).filter(|&r| kernels::argmax(lt.row(r)) == targets[r]).count();
    let nll = g.cross_entropy(logits, &targets)?;
    let loss = match penalty {
        Some(p) => g.add(nll, p)?,
        None => nll,
    };
    let value = g.scalar(loss).as_f64();
    if !value.is_finite() {
        return Err(Error::NonFiniteLoss { step: 0, loss: value });
    }
    let grads = g.backward(loss);
    let mut vars = Vec::new();
    pv.visit(&mut |_, &v| vars.push(v));
    let mut i = 0;
    let grads = model.params.map(&mut |_, t| {
        i += 1;
        grads.wrt(vars[i - 1], t)
    });
    Ok(StepOutput {
        loss: value,
        grads,
        budgets,
        plans,
        token_accuracy: hits as f64 / rows.len() as f64,
    })
}

fn plan_matrix<F: Scalar>(plans: &[ExecutionPlan]) -> Result<Tensor<F>> {
    let k = plans.first().map_or(0, |p| p.len());
    let data = plans
        .iter()
        .flat_map(|p| p.bits().iter().map(|&b| if b { F::one() } else { F::zero() }))
        .collect();
    Tensor::matrix(plans.len(), k, data)
}

/// One row of the training log, averaged over the steps since the previous
/// row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: usize,
    pub loss: f64,
    pub budget_mean: f64,
    pub utilization_mean: f64,
    pub success_rate: f64,
    pub accuracy: f64,
}

pub struct TrainOutcome {
    pub model: AdaptiveModel<f32>,
    pub log: Vec<LogRow>,
}

#[derive(Default)]
struct Window {
    steps: usize,
    loss: f64,
    budget: f64,
    utilization: f64,
    success: f64,
    accuracy: f64,
    plans: usize,
}

/// Trains from scratch as configured. `on_log` sees every log row as it is
/// produced.
pub fn train(exp: &ExperimentConfig, on_log: &mut dyn FnMut(&LogRow)) -> Result<TrainOutcome> {
    exp.validate()?;
    let cfg = &exp.train;
    let cost = exp.cost_model()?;
    let data = make_synthetic_dataset(&exp.task, cfg.train_samples, cfg.data_seed, Split::Train)?;
    let root = Rng::new(cfg.seed);
    let mut model = AdaptiveModel::init(exp.model.clone(), &mut root.fork(0))?;
    let mut step_rng = root.fork(1);
    let mut order_rng = root.fork(2);
    let mut adam = Adam::new(&model.params);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut cursor = order.len();
    let mut log = Vec::new();
    let mut w = Window::default();
    let log_every = cfg.log_every.max(1);
    let warmup_cfg = TrainConfig {
        arm: Arm::Base,
        ..cfg.clone()
    };

    for step in 0..cfg.steps {
        let phase = if step < cfg.full_plan_steps { &warmup_cfg } else { cfg };
        let mut batch = Vec::with_capacity(cfg.batch_size);
        while batch.len() < cfg.batch_size {
            if cursor == order.len() {
                order_rng.shuffle(&mut order);
                cursor = 0;
            }
            batch.push(&data[order[cursor]]);
            cursor += 1;
        }
        let out = training_step(&model, &batch, &cost, phase, StepOptions::default(), &mut step_rng).map_err(|e| match e {
            Error::NonFiniteLoss { loss, .. } => Error::NonFiniteLoss { step, loss },
            other => other,
        })?;
        let mut grads = out.grads;
        if let Some(c) = cfg.grad_clip {
            clip_grad_norm(&mut grads, c);
        }
        adam.update(&mut model.params, &grads, cfg.lr_at(step));
        if !model.params.is_finite() {
            return Err(Error::NonFiniteLoss { step, loss: out.loss });
        }

        w.steps += 1;
        w.loss += out.loss;
        w.accuracy += out.token_accuracy;
        for (plan, &l) in out.plans.iter().zip(&out.budgets) {
            w.plans += 1;
            w.budget += l;
            w.utilization += cost.utilization(plan, l);
            w.success += f64::from(u8::from(cost.is_feasible(plan, l)));
        }
        if (step + 1) % log_every == 0 || step + 1 == cfg.steps {
            let (s, p) = (w.steps as f64, w.plans as f64);
            let row = LogRow {
                step: step + 1,
                loss: w.loss / s,
                budget_mean: w.budget / p,
                utilization_mean: w.utilization / p,
                success_rate: 100.0 * w.success / p,
                accuracy: w.accuracy / s,
            };
            log::debug!("step {} loss {:.4} acc {:.3}", row.step, row.loss, row.accuracy);
            on_log(&row);
            log.push(row);
            w = Window::default();
        }
    }
    Ok(TrainOutcome { model, log })
}

pub fn write_log_csv<W: std::io::Write>(rows: &[LogRow], out: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(out);
    for r in rows {
        wtr.serialize(r)?;
    }
    wtr.flush()?;
    Ok(())
}
