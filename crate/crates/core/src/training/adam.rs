use crate::numerics::{Scalar, Tensor};
use crate::params::Params;

/// Adam without weight decay. Moments are kept in `f64`.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new<F: Scalar>(params: &Params<F>) -> Self {
        let mut m = Vec::new();
        params.visit(&mut |_, t| m.push(vec![0.0; t.len()]));
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            v: m.clone(),
            m,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update with learning rate `lr`.
    pub fn update<F: Scalar>(&mut self, params: &mut Params<F>, grads: &Params<F>, lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let mut gs: Vec<&Tensor<F>> = Vec::new();
        grads.visit(&mut |_, g| gs.push(g));
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        let mut idx = 0;
        let (ms, vs) = (&mut self.m, &mut self.v);
        params.visit_mut(&mut |_, p| {
            let (m, v, g) = (&mut ms[idx], &mut vs[idx], gs[idx]);
            for (((pv, &gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                let gv = gv.as_f64();
                *mv = b1 * *mv + (1.0 - b1) * gv;
                *vv = b2 * *vv + (1.0 - b2) * gv * gv;
                let upd = lr * (*mv / c1) / ((*vv / c2).sqrt() + eps);
                *pv = F::of(pv.as_f64() - upd);
            }
            idx += 1;
        });
    }
}

/// Global L2 norm of a gradient set.
pub fn grad_norm<F: Scalar>(grads: &Params<F>) -> f64 {
    let mut s = 0.0;
    grads.visit(&mut |_, g| s += g.data().iter().map(|v| v.as_f64().powi(2)).sum::<f64>());
    s.sqrt()
}

/// Rescales `grads` so their global norm is at most `max_norm`.
pub fn clip_grad_norm<F: Scalar>(grads: &mut Params<F>, max_norm: f64) -> f64 {
    let norm = grad_norm(grads);
    if norm > max_norm {
        let s = F::of(max_norm / norm);
        grads.visit_mut(&mut |_, g| g.scale_assign(s));
    }
    norm
}
