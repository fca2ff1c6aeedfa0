use crate::numerics::{Rng, Scalar, Tensor};

use super::{MlpKind, ModelConfig};

/// Parameters of one transformer block. Generic over the leaf type so the
/// same structure holds tensors, tape variables or optimizer state.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerWeights<T> {
    pub ln1_g: T,
    pub ln1_b: T,
    pub wq: T,
    pub wk: T,
    pub wv: T,
    pub wo: T,
    pub ln2_g: T,
    pub ln2_b: T,
    pub w_up: T,
    pub b_up: T,
    pub w_gate: Option<T>,
    pub w_down: T,
    pub b_down: T,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelWeights<T> {
    pub token_emb: T,
    pub pos_emb: T,
    pub vis_proj_w: T,
    pub vis_proj_b: T,
    pub layers: Vec<LayerWeights<T>>,
    pub final_norm_g: T,
    pub final_norm_b: T,
    pub lm_head: T,
}

impl<T> LayerWeights<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a T)) {
        let mut put = |name: &str, t: &'a T| f(format!("{prefix}.{name}"), t);
        put("ln1.g", &self.ln1_g);
        put("ln1.b", &self.ln1_b);
        put("attn.wq", &self.wq);
        put("attn.wk", &self.wk);
        put("attn.wv", &self.wv);
        put("attn.wo", &self.wo);
        put("ln2.g", &self.ln2_g);
        put("ln2.b", &self.ln2_b);
        put("mlp.w_up", &self.w_up);
        put("mlp.b_up", &self.b_up);
        if let Some(g) = &self.w_gate {
            put("mlp.w_gate", g);
        }
        put("mlp.w_down", &self.w_down);
        put("mlp.b_down", &self.b_down);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut T)) {
        let mut put = |name: &str, t: &mut T| f(format!("{prefix}.{name}"), t);
        put("ln1.g", &mut self.ln1_g);
        put("ln1.b", &mut self.ln1_b);
        put("attn.wq", &mut self.wq);
        put("attn.wk", &mut self.wk);
        put("attn.wv", &mut self.wv);
        put("attn.wo", &mut self.wo);
        put("ln2.g", &mut self.ln2_g);
        put("ln2.b", &mut self.ln2_b);
        put("mlp.w_up", &mut self.w_up);
        put("mlp.b_up", &mut self.b_up);
        if let Some(g) = &mut self.w_gate {
            put("mlp.w_gate", g);
        }
        put("mlp.w_down", &mut self.w_down);
        put("mlp.b_down", &mut self.b_down);
    }

    fn map<'a, U>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a T) -> U) -> LayerWeights<U> {
        let mut m = |name: &str, t: &'a T| f(format!("{prefix}.{name}"), t);
        LayerWeights {
            ln1_g: m("ln1.g", &self.ln1_g),
            ln1_b: m("ln1.b", &self.ln1_b),
            wq: m("attn.wq", &self.wq),
            wk: m("attn.wk", &self.wk),
            wv: m("attn.wv", &self.wv),
            wo: m("attn.wo", &self.wo),
            ln2_g: m("ln2.g", &self.ln2_g),
            ln2_b: m("ln2.b", &self.ln2_b),
            w_up: m("mlp.w_up", &self.w_up),
            b_up: m("mlp.b_up", &self.b_up),
            w_gate: self.w_gate.as_ref().map(|g| m("mlp.w_gate", g)),
            w_down: m("mlp.w_down", &self.w_down),
            b_down: m("mlp.b_down", &self.b_down),
        }
    }
}

impl<T> ModelWeights<T> {
    /// Calls `f` on every leaf with its stable name, in a fixed order.
    pub fn visit<'a>(&'a self, f: &mut dyn FnMut(String, &'a T)) {
        f("embed.token".into(), &self.token_emb);
        f("embed.pos".into(), &self.pos_emb);
        f("visual.proj.w".into(), &self.vis_proj_w);
        f("visual.proj.b".into(), &self.vis_proj_b);
        for (i, l) in self.layers.iter().enumerate() {
            l.visit(&format!("layers.{i}"), f);
        }
        f("final_norm.g".into(), &self.final_norm_g);
        f("final_norm.b".into(), &self.final_norm_b);
        f("lm_head".into(), &self.lm_head);
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(String, &mut T)) {
        f("embed.token".into(), &mut self.token_emb);
        f("embed.pos".into(), &mut self.pos_emb);
        f("visual.proj.w".into(), &mut self.vis_proj_w);
        f("visual.proj.b".into(), &mut self.vis_proj_b);
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.visit_mut(&format!("layers.{i}"), f);
        }
        f("final_norm.g".into(), &mut self.final_norm_g);
        f("final_norm.b".into(), &mut self.final_norm_b);
        f("lm_head".into(), &mut self.lm_head);
    }

    pub fn map<'a, U>(&'a self, f: &mut dyn FnMut(String, &'a T) -> U) -> ModelWeights<U> {
        ModelWeights {
            token_emb: f("embed.token".into(), &self.token_emb),
            pos_emb: f("embed.pos".into(), &self.pos_emb),
            vis_proj_w: f("visual.proj.w".into(), &self.vis_proj_w),
            vis_proj_b: f("visual.proj.b".into(), &self.vis_proj_b),
            layers: self
                .layers
                .iter()
                .enumerate()
                .map(|(i, l)| l.map(&format!("layers.{i}"), f))
                .collect(),
            final_norm_g: f("final_norm.g".into(), &self.final_norm_g),
            final_norm_b: f("final_norm.b".into(), &self.final_norm_b),
            lm_head: f("lm_head".into(), &self.lm_head),
        }
    }
}

pub(crate) fn normal<F: Scalar>(shape: &[usize], std: f64, rng: &mut Rng) -> Tensor<F> {
    Tensor::from_fn(shape, |_| F::of(std * rng.normal()))
}

impl<F: Scalar> ModelWeights<Tensor<F>> {
    /// Random initialization. Linear maps draw from `N(0, 1/fan_in)`;
    /// residual output projections are further shrunk by `sqrt(2·n_layers)`.
    pub fn init(config: &ModelConfig, rng: &mut Rng) -> Self {
        let (d, m, v) = (config.d_model, config.d_mlp, config.vocab_size);
        let lin = |fan_in: usize| 1.0 / (fan_in as f64).sqrt();
        let resid = 1.0 / (2.0 * config.n_layers as f64).sqrt();
        let token_emb = normal(&[v, d], 1.0, rng);
        let pos_emb = normal(&[config.max_seq_len, d], 0.1, rng);
        let vis_proj_w = normal(&[config.d_visual, d], lin(config.d_visual), rng);
        let layers = (0..config.n_layers)
            .map(|_| LayerWeights {
                ln1_g: Tensor::full(&[d], F::one()),
                ln1_b: Tensor::zeros(&[d]),
                wq: normal(&[d, d], lin(d), rng),
                wk: normal(&[d, d], lin(d), rng),
                wv: normal(&[d, d], lin(d), rng),
                wo: normal(&[d, d], lin(d) * resid, rng),
                ln2_g: Tensor::full(&[d], F::one()),
                ln2_b: Tensor::zeros(&[d]),
                w_up: normal(&[d, m], lin(d), rng),
                b_up: Tensor::zeros(&[m]),
                w_gate: (config.mlp == MlpKind::Gated).then(|| normal(&[d, m], lin(d), rng)),
                w_down: normal(&[m, d], lin(m) * resid, rng),
                b_down: Tensor::zeros(&[d]),
            })
            .collect();
        ModelWeights {
            token_emb,
            pos_emb,
            vis_proj_w,
            vis_proj_b: Tensor::zeros(&[d]),
            layers,
            final_norm_g: Tensor::full(&[d], F::one()),
            final_norm_b: Tensor::zeros(&[d]),
            lm_head: normal(&[d, v], lin(d), rng),
        }
    }

    pub fn cast<G: Scalar>(&self) -> ModelWeights<Tensor<G>> {
        self.map(&mut |_, t| t.cast())
    }
}
