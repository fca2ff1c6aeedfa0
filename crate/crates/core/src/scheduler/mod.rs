//! The latency-conditioned scheduler: a sinusoidal code of the budget fed
//! through a small MLP to form the latency token, and a linear head that
//! turns the processed latency token into one logit per switch.

mod sampling;

pub use sampling::{
    argmax_plan, gumbel_draws, sample_plan, sample_plan_differentiable, select_with, GumbelDraws,
    GumbelRound, Relaxation,
};

use serde::{Deserialize, Serialize};

use crate::cost::CostModel;
use crate::error::{Error, Result};
use crate::model::normal_init as normal;
use crate::numerics::kernels::{self, LAYER_NORM_EPS};
use crate::numerics::{Graph, Rng, Scalar, Tensor, Var};

/// Width of the sinusoidal budget code.
pub const CODE_DIM: usize = 256;
/// Longest period of the frequency ladder.
pub const CODE_BASE: f64 = 10_000.0;
/// A budget `l` is encoded at position `CODE_SCALE · l`.
pub const CODE_SCALE: f64 = 1_000.0;

/// Budget `l`: allowed fraction of the full model's prefill FLOPs.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LatencyBudget(f64);

impl LatencyBudget {
    /// Accepts `l` in `[l_min, 1]`.
    pub fn new(l: f64, l_min: f64) -> Result<Self> {
        const SLACK: f64 = 1e-12;
        if !(l.is_finite() && l >= l_min - SLACK && l <= 1.0 + SLACK) {
            return Err(Error::BudgetOutOfRange { value: l, l_min });
        }
        Ok(LatencyBudget(l.min(1.0)))
    }

    pub fn for_cost(l: f64, cost: &CostModel) -> Result<Self> {
        Self::new(l, cost.l_min())
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

/// Sinusoidal code of a budget: pairs `(sin(p·ω_i), cos(p·ω_i))` with
/// `ω_i = CODE_BASE^(-2i/CODE_DIM)` and `p = CODE_SCALE · l`.
pub fn sinusoid_code(l: f64) -> Vec<f64> {
    let p = CODE_SCALE * l;
    let mut code = Vec::with_capacity(CODE_DIM);
    for i in 0..CODE_DIM / 2 {
        let w = CODE_BASE.powf(-2.0 * i as f64 / CODE_DIM as f64);
        code.push((p * w).sin());
        code.push((p * w).cos());
    }
    code
}

/// Scheduler logits `π`, one per switch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SchedulerLogits(Vec<f64>);

impl SchedulerLogits {
    pub fn new(pi: Vec<f64>) -> Result<Self> {
        if pi.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite);
        }
        Ok(SchedulerLogits(pi))
    }

    pub fn uniform(k: usize) -> Self {
        SchedulerLogits(vec![0.0; k])
    }

    pub fn pi(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// `η = softmax(π)`.
    pub fn probabilities(&self) -> Vec<f64> {
        let mut p = self.0.clone();
        kernels::softmax_in_place(&mut p);
        p
    }
}

/// Latency encoder `Linear → LayerNorm → GELU → Linear` and the scheduler
/// head.
#[derive(Clone, Debug, PartialEq)]
pub struct SchedulerWeights<T> {
    pub enc_w1: T,
    pub enc_b1: T,
    pub enc_ln_g: T,
    pub enc_ln_b: T,
    pub enc_w2: T,
    pub enc_b2: T,
    pub head_w: T,
    pub head_b: T,
}

impl<T> SchedulerWeights<T> {
    const NAMES: [&'static str; 8] = [
        "latency.w1",
        "latency.b1",
        "latency.ln.g",
        "latency.ln.b",
        "latency.w2",
        "latency.b2",
        "scheduler.head.w",
        "scheduler.head.b",
    ];

    fn leaves(&self) -> [&T; 8] {
        [
            &self.enc_w1,
            &self.enc_b1,
            &self.enc_ln_g,
            &self.enc_ln_b,
            &self.enc_w2,
            &self.enc_b2,
            &self.head_w,
            &self.head_b,
        ]
    }

    pub fn visit<'a>(&'a self, f: &mut dyn FnMut(String, &'a T)) {
        for (name, t) in Self::NAMES.iter().zip(self.leaves()) {
            f(name.to_string(), t);
        }
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(String, &mut T)) {
        let leaves = [
            &mut self.enc_w1,
            &mut self.enc_b1,
            &mut self.enc_ln_g,
            &mut self.enc_ln_b,
            &mut self.enc_w2,
            &mut self.enc_b2,
            &mut self.head_w,
            &mut self.head_b,
        ];
        for (name, t) in Self::NAMES.iter().zip(leaves) {
            f(name.to_string(), t);
        }
    }

    pub fn map<'a, U>(&'a self, f: &mut dyn FnMut(String, &'a T) -> U) -> SchedulerWeights<U> {
        let [w1, b1, g, b, w2, b2, hw, hb] = self.leaves();
        let mut m = |i: usize, t: &'a T| f(Self::NAMES[i].to_string(), t);
        SchedulerWeights {
            enc_w1: m(0, w1),
            enc_b1: m(1, b1),
            enc_ln_g: m(2, g),
            enc_ln_b: m(3, b),
            enc_w2: m(4, w2),
            enc_b2: m(5, b2),
            head_w: m(6, hw),
            head_b: m(7, hb),
        }
    }
}

impl<F: Scalar> SchedulerWeights<Tensor<F>> {
    /// Random encoder, zero head (uniform initial plans).
    pub fn init(d_model: usize, n_switches: usize, rng: &mut Rng) -> Self {
        let d = d_model;
        SchedulerWeights {
            enc_w1: normal(&[CODE_DIM, d], 1.0 / (CODE_DIM as f64).sqrt(), rng),
            enc_b1: Tensor::zeros(&[d]),
            enc_ln_g: Tensor::full(&[d], F::one()),
            enc_ln_b: Tensor::zeros(&[d]),
            enc_w2: normal(&[d, d], 1.0 / (d as f64).sqrt(), rng),
            enc_b2: Tensor::zeros(&[d]),
            head_w: Tensor::zeros(&[d, n_switches]),
            head_b: Tensor::zeros(&[n_switches]),
        }
    }

    pub fn n_switches(&self) -> usize {
        self.head_b.len()
    }

    /// Latency token `z^s` for `l`, a `1 × d_model` row.
    pub fn encode_latency(&self, l: LatencyBudget) -> Result<Tensor<F>> {
        let code = Tensor::row_vector(sinusoid_code(l.value()).into_iter().map(F::of).collect());
        let mut h = kernels::matmul(&code, &self.enc_w1)?;
        kernels::add_row_bias(&mut h, &self.enc_b1)?;
        let h = kernels::gelu(&kernels::layer_norm(&h, &self.enc_ln_g, &self.enc_ln_b, LAYER_NORM_EPS)?);
        let mut out = kernels::matmul(&h, &self.enc_w2)?;
        kernels::add_row_bias(&mut out, &self.enc_b2)?;
        Ok(out)
    }

    /// Logits from the latency-token hidden state at the split layer.
    pub fn logits(&self, hidden: &[F]) -> Result<SchedulerLogits> {
        if hidden.len() != self.head_w.rows() {
            return Err(Error::shape("scheduler_logits", &[hidden.len()], self.head_w.shape()));
        }
        let h = Tensor::row_vector(hidden.to_vec());
        let mut out = kernels::matmul(&h, &self.head_w)?;
        kernels::add_row_bias(&mut out, &self.head_b)?;
        SchedulerLogits::new(out.data().iter().map(|v| v.as_f64()).collect())
    }
}

impl SchedulerWeights<Var> {
    /// Latency tokens for a batch of budgets, `batch × d_model`.
    pub fn graph_encode<F: Scalar>(&self, g: &mut Graph<'_, F>, budgets: &[f64]) -> Result<Var> {
        let data = budgets.iter().flat_map(|&l| sinusoid_code(l)).map(F::of).collect();
        let codes = g.constant(Tensor::matrix(budgets.len(), CODE_DIM, data)?);
        let h = g.matmul(codes, self.enc_w1)?;
        let h = g.add_row(h, self.enc_b1)?;
        let h = g.layer_norm(h, self.enc_ln_g, self.enc_ln_b)?;
        let h = g.gelu(h);
        let out = g.matmul(h, self.enc_w2)?;
        g.add_row(out, self.enc_b2)
    }

    /// Logits for a batch of latency-token hidden states, `batch × K`.
    pub fn graph_logits<F: Scalar>(&self, g: &mut Graph<'_, F>, hidden: Var) -> Result<Var> {
        let out = g.matmul(hidden, self.head_w)?;
        g.add_row(out, self.head_b)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn code_of_zero_is_sin_zero_cos_one() {
        let c = sinusoid_code(0.0);
        assert_eq!(c.len(), CODE_DIM);
        for pair in c.chunks(2) {
            assert_eq!(pair, [0.0, 1.0]);
        }
    }

    #[test]
    fn codes_differ_as_the_formula_says() {
        let (a, b) = (sinusoid_code(0.6), sinusoid_code(0.9));
        let dist = a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        // Each pair contributes |e^{iθa} - e^{iθb}|² = 2 - 2cos(θa - θb).
        let direct = (0..CODE_DIM / 2)
            .map(|i| {
                let w = 10_000f64.powf(-(i as f64) / 128.0);
                2.0 - 2.0 * (1000.0 * 0.3 * w).cos()
            })
            .sum::<f64>()
            .sqrt();
        assert!((dist - direct).abs() < 1e-9);
    }

    #[test]
    fn nearby_budgets_get_distinct_codes() {
        let mut prev = sinusoid_code(0.5);
        for i in 1..=500 {
            let c = sinusoid_code(0.5 + i as f64 * 0.001);
            assert_ne!(c, prev);
            prev = c;
        }
    }

    #[test]
    fn budget_range_is_enforced() {
        assert!(LatencyBudget::new(0.49, 0.5).is_err());
        assert!(LatencyBudget::new(1.01, 0.5).is_err());
        assert!(LatencyBudget::new(f64::NAN, 0.5).is_err());
        let err = LatencyBudget::new(0.2, 0.5).unwrap_err().to_string();
        assert!(err.contains("budget out of range [l_min, 1]"), "{err}");
        assert_eq!(LatencyBudget::new(0.75, 0.5).unwrap().value(), 0.75);
    }

    #[test]
    fn encoding_is_deterministic() {
        let w = SchedulerWeights::<Tensor<f32>>::init(8, 4, &mut Rng::new(1));
        let l = LatencyBudget::new(0.7, 0.5).unwrap();
        assert_eq!(w.encode_latency(l).unwrap(), w.encode_latency(l).unwrap());
    }

    #[test]
    fn fresh_head_gives_uniform_probabilities() {
        let w = SchedulerWeights::<Tensor<f32>>::init(8, 4, &mut Rng::new(1));
        let logits = w.logits(&[0.3; 8]).unwrap();
        assert_eq!(logits.pi(), [0.0; 4]);
        assert_eq!(logits.probabilities(), [0.25; 4]);
    }

    #[test]
    fn logits_are_head_matmul() {
        let mut rng = Rng::new(5);
        let mut w = SchedulerWeights::<Tensor<f64>>::init(6, 3, &mut rng);
        w.head_w = Tensor::from_fn(&[6, 3], |_| rng.normal());
        w.head_b = Tensor::from_fn(&[3], |_| rng.normal());
        let h: Vec<f64> = (0..6).map(|_| rng.normal()).collect();
        let got = w.logits(&h).unwrap();
        for j in 0..3 {
            let want: f64 = (0..6).map(|i| h[i] * w.head_w.row(i)[j]).sum::<f64>() + w.head_b.data()[j];
            assert!((got.pi()[j] - want).abs() < 1e-12);
        }
        let shifted = SchedulerLogits::new(got.pi().iter().map(|v| v + 4.0).collect()).unwrap();
        let (p, q) = (got.probabilities(), shifted.probabilities());
        assert!(p.iter().zip(&q).all(|(a, b)| (a - b).abs() < 1e-12));
        assert!(w.logits(&[0.0; 5]).is_err());
    }

    #[test]
    fn graph_encoder_matches_direct() {
        let w = SchedulerWeights::<Tensor<f32>>::init(8, 4, &mut Rng::new(1));
        let mut g = Graph::new();
        let wv = w.map(&mut |_, t| g.param(t));
        let z = wv.graph_encode(&mut g, &[0.6, 0.8]).unwrap();
        let direct = w.encode_latency(LatencyBudget::new(0.8, 0.5).unwrap()).unwrap();
        assert_eq!(g.value(z).row(1), direct.data());
    }
}
