//! Central finite differences in 64-bit arithmetic.

use serde::{Deserialize, Serialize};

use adaplan_core::data::{make_synthetic_dataset, Split};
use adaplan_core::model::{MlpKind, SwitchDesign};
use adaplan_core::numerics::{Rng, Tensor};
use adaplan_core::scheduler::Relaxation;
use adaplan_core::training::{training_step, Arm, StepOptions};
use adaplan_core::{AdaptiveModel, ExperimentConfig, Params};

use crate::Result;

pub const DEFAULT_EPS: f64 = 1e-4;

/// `(f(x + ε e_i) − f(x − ε e_i)) / 2ε` for every coordinate `i`.
pub fn finite_difference_gradient(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], eps: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + eps;
            let up = f(&probe);
            probe[i] = x[i] - eps;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * eps)
        })
        .collect()
}

/// Finite-difference gradient of `loss` with respect to every parameter
/// tensor, in visiting order.
pub fn finite_difference_params(
    params: &Params<f64>,
    loss: &mut dyn FnMut(&Params<f64>) -> f64,
    eps: f64,
) -> Vec<(String, Vec<f64>)> {
    let names = params.names();
    let mut work = params.clone();
    let mut out = Vec::with_capacity(names.len());
    for (ti, name) in names.into_iter().enumerate() {
        let mut len = 0;
        edit(&mut work, ti, &mut |t| len = t.len());
        let mut grad = Vec::with_capacity(len);
        for j in 0..len {
            let mut x = 0.0;
            edit(&mut work, ti, &mut |t| {
                x = t.data()[j];
                t.data_mut()[j] = x + eps;
            });
            let up = loss(&work);
            edit(&mut work, ti, &mut |t| t.data_mut()[j] = x - eps);
            let down = loss(&work);
            edit(&mut work, ti, &mut |t| t.data_mut()[j] = x);
            grad.push((up - down) / (2.0 * eps));
        }
        out.push((name, grad));
    }
    out
}

fn edit(p: &mut Params<f64>, n: usize, f: &mut dyn FnMut(&mut Tensor<f64>)) {
    let mut i = 0;
    p.visit_mut(&mut |_, t| {
        if i == n {
            f(t);
        }
        i += 1;
    });
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, or 0 when both are zero.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = na.max(nb);
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Scheduler-side parameters: the latency encoder and the scheduler head.
pub fn is_scheduler_param(name: &str) -> bool {
    name.starts_with("latency.") || name.starts_with("scheduler.")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradientReport {
    pub theta_rel_err: f64,
    pub phi_rel_err: f64,
    pub theta_norm: f64,
    pub phi_norm: f64,
    pub n_theta: usize,
    pub n_phi: usize,
    pub loss: f64,
}

/// Experiment used by the gradient check: two layers, `d_model = 16`, head
/// level switches on the second layer.
pub fn gradient_check_config() -> ExperimentConfig {
    let mut exp = ExperimentConfig::toy();
    exp.model.n_layers = 2;
    exp.model.d_model = 16;
    exp.model.n_heads = 2;
    exp.model.d_mlp = 32;
    exp.model.switch_design = SwitchDesign::HeadLevel;
    exp.model.switchable_start_layer = Some(1);
    exp.model.mlp = MlpKind::Plain;
    exp.train.budget_range = [0.8, 1.0];
    exp
}

/// Compares the analytic gradient of one probabilistic training step
/// (soft relaxation, Gumbel noise frozen by reseeding) with central
/// differences over every parameter.
pub fn gradient_check(seed: u64, batch: usize, budget: f64, eps: f64) -> Result<GradientReport> {
    let exp = gradient_check_config();
    let cost = exp.cost_model()?;
    let rng = Rng::new(seed);
    let mut model = AdaptiveModel::<f64>::init(exp.model.clone(), &mut rng.fork(0))?;
    // A zero scheduler head makes the logits uniform; use generic values.
    let mut head_rng = rng.fork(1);
    for v in model.params.scheduler.head_w.data_mut() {
        *v = 0.5 * head_rng.normal();
    }
    let data = make_synthetic_dataset(&exp.task, batch, seed, Split::Eval)?;
    let refs: Vec<_> = data.iter().collect();
    let mut cfg = exp.train.clone();
    cfg.arm = Arm::Probabilistic;
    let opts = StepOptions {
        relaxation: Relaxation::Soft,
        fixed_budget: Some(budget),
    };
    let noise_seed = seed ^ 0x5eed;

    let out = training_step(&model, &refs, &cost, &cfg, opts, &mut Rng::new(noise_seed))?;
    let mut analytic = Vec::new();
    out.grads.visit(&mut |n, t| analytic.push((n, t.data().to_vec())));

    let config = exp.model.clone();
    let mut loss = |p: &Params<f64>| {
        let m = AdaptiveModel {
            config: config.clone(),
            params: p.clone(),
        };
        training_step(&m, &refs, &cost, &cfg, opts, &mut Rng::new(noise_seed))
            .map(|o| o.loss)
            .unwrap_or(f64::NAN)
    };
    let numeric = finite_difference_params(&model.params, &mut loss, eps);

    let (mut ta, mut tn, mut pa, mut pn) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for ((name, a), (_, n)) in analytic.into_iter().zip(numeric) {
        if is_scheduler_param(&name) {
            pa.extend(a);
            pn.extend(n);
        } else {
            ta.extend(a);
            tn.extend(n);
        }
    }
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    Ok(GradientReport {
        theta_rel_err: relative_error(&ta, &tn),
        phi_rel_err: relative_error(&pa, &pn),
        theta_norm: norm(&ta),
        phi_norm: norm(&pa),
        n_theta: ta.len(),
        n_phi: pa.len(),
        loss: out.loss,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_matches_analytic() {
        // f(x) = Σ a_i x_i² + x_0 x_1; central differences are exact for
        // quadratics up to rounding.
        let a = [1.5, -2.0, 0.25];
        let mut f = |x: &[f64]| a.iter().zip(x).map(|(a, x)| a * x * x).sum::<f64>() + x[0] * x[1];
        let x = [0.3, -1.2, 2.0];
        let g = finite_difference_gradient(&mut f, &x, 1e-4);
        let want = [2.0 * a[0] * x[0] + x[1], 2.0 * a[1] * x[1] + x[0], 2.0 * a[2] * x[2]];
        for (g, w) in g.iter().zip(want) {
            assert!((g - w).abs() < 1e-8, "{g} vs {w}");
        }
    }

    #[test]
    fn error_shrinks_quadratically_for_cubic() {
        let mut f = |x: &[f64]| x[0].powi(3);
        let e1 = (finite_difference_gradient(&mut f, &[1.0], 1e-2)[0] - 3.0).abs();
        let e2 = (finite_difference_gradient(&mut f, &[1.0], 1e-3)[0] - 3.0).abs();
        assert!((e1 / e2 - 100.0).abs() < 1.0);
    }

    #[test]
    fn relative_error_basics() {
        assert_eq!(relative_error(&[0.0], &[0.0]), 0.0);
        assert!((relative_error(&[1.0, 0.0], &[0.0, 1.0]) - 2f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn params_fd_visits_every_entry() {
        let exp = gradient_check_config();
        let p = Params::<f64>::init(&exp.model, &mut Rng::new(0));
        let mut loss = |q: &Params<f64>| q.scheduler.head_b.sum();
        let g = finite_difference_params(&p, &mut loss, 1e-4);
        let total: usize = g.iter().map(|(_, v)| v.len()).sum();
        assert_eq!(total, p.n_elements());
        for (name, v) in &g {
            let want = if name == "scheduler.head.b" { 1.0 } else { 0.0 };
            assert!(v.iter().all(|&x| (x - want).abs() < 1e-9), "{name}");
        }
    }
}
