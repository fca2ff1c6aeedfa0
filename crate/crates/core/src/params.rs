use crate::model::{ModelConfig, ModelWeights};
use crate::numerics::{Rng, Scalar, Tensor};
use crate::scheduler::SchedulerWeights;

/// All learnable weights: the transformer and the scheduler (latency
/// encoder and head).
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    pub model: ModelWeights<T>,
    pub scheduler: SchedulerWeights<T>,
}

pub type Params<F = f32> = ModelParams<Tensor<F>>;

impl<T> ModelParams<T> {
    pub fn visit<'a>(&'a self, f: &mut dyn FnMut(String, &'a T)) {
        self.model.visit(f);
        self.scheduler.visit(f);
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(String, &mut T)) {
        self.model.visit_mut(f);
        self.scheduler.visit_mut(f);
    }

    pub fn map<'a, U>(&'a self, f: &mut dyn FnMut(String, &'a T) -> U) -> ModelParams<U> {
        ModelParams {
            model: self.model.map(f),
            scheduler: self.scheduler.map(f),
        }
    }

    pub fn names(&self) -> Vec<String> {
        let mut out = Vec::new();
        self.visit(&mut |n, _| out.push(n));
        out
    }
}

impl<F: Scalar> Params<F> {
    pub fn init(config: &ModelConfig, rng: &mut Rng) -> Self {
        let model = ModelWeights::init(config, &mut rng.fork(0));
        let scheduler = SchedulerWeights::init(config.d_model, config.n_switches(), &mut rng.fork(1));
        ModelParams { model, scheduler }
    }

    pub fn cast<G: Scalar>(&self) -> Params<G> {
        self.map(&mut |_, t| t.cast())
    }

    pub fn n_elements(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, t| n += t.len());
        n
    }

    pub fn is_finite(&self) -> bool {
        let mut ok = true;
        self.visit(&mut |_, t| ok &= t.is_finite());
        ok
    }
}
