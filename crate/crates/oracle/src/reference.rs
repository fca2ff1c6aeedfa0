//! A plain transformer written with scalar loops, sharing only the weight
//! tensors with the main library. Every decoding step recomputes the whole
//! sequence; there is no cache and no switching.

use adaplan_core::data::{Sample, END_OF_ANSWER};
use adaplan_core::model::{MlpKind, ModelConfig};
use adaplan_core::numerics::Tensor;
use adaplan_core::Params;

const EPS: f32 = 1e-5;

type Mat = Vec<Vec<f32>>;

fn rows(t: &Tensor<f32>) -> Mat {
    let c = t.shape()[t.shape().len() - 1];
    t.data().chunks(c).map(|r| r.to_vec()).collect()
}

fn vecmat(x: &[f32], w: &Tensor<f32>) -> Vec<f32> {
    let cols = w.shape()[1];
    let mut out = vec![0.0f32; cols];
    for (j, o) in out.iter_mut().enumerate() {
        let mut s = 0.0f32;
        for (i, &xi) in x.iter().enumerate() {
            s += xi * w.data()[i * cols + j];
        }
        *o = s;
    }
    out
}

fn add_into(a: &mut [f32], b: &[f32]) {
    for (x, y) in a.iter_mut().zip(b) {
        *x += *y;
    }
}

fn norm(x: &[f32], g: &Tensor<f32>, b: &Tensor<f32>) -> Vec<f32> {
    let n = x.len() as f32;
    let mean = x.iter().sum::<f32>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / n;
    let inv = 1.0 / (var + EPS).sqrt();
    x.iter()
        .zip(g.data().iter().zip(b.data()))
        .map(|(v, (gg, bb))| (v - mean) * inv * gg + bb)
        .collect()
}

fn gelu(x: f32) -> f32 {
    let c = (2.0f64 / std::f64::consts::PI).sqrt() as f32;
    0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())
}

pub struct ReferenceModel<'a> {
    cfg: &'a ModelConfig,
    p: &'a Params<f32>,
}

impl<'a> ReferenceModel<'a> {
    pub fn new(cfg: &'a ModelConfig, p: &'a Params<f32>) -> Self {
        ReferenceModel { cfg, p }
    }

    /// Latency token for budget `l`: sinusoid code through the encoder MLP.
    pub fn latency_token(&self, l: f64) -> Vec<f32> {
        let s = &self.p.scheduler;
        let dim = s.enc_w1.shape()[0];
        let mut code = Vec::with_capacity(dim);
        for i in 0..dim / 2 {
            let w = 10_000f64.powf(-2.0 * i as f64 / dim as f64);
            let a = 1000.0 * l * w;
            code.push(a.sin() as f32);
            code.push(a.cos() as f32);
        }
        let mut h = vecmat(&code, &s.enc_w1);
        add_into(&mut h, s.enc_b1.data());
        let h: Vec<f32> = norm(&h, &s.enc_ln_g, &s.enc_ln_b).into_iter().map(gelu).collect();
        let mut out = vecmat(&h, &s.enc_w2);
        add_into(&mut out, s.enc_b2.data());
        out
    }

    /// Embedded prompt rows followed by embedded `tokens`.
    fn embed(&self, sample: &Sample, latency: &[f32], tokens: &[usize]) -> Mat {
        let w = &self.p.model;
        let emb = rows(&w.token_emb);
        let pos = rows(&w.pos_emb);
        let mut xs: Mat = Vec::new();
        for f in rows(&sample.features) {
            let mut v = vecmat(&f, &w.vis_proj_w);
            add_into(&mut v, w.vis_proj_b.data());
            xs.push(v);
        }
        for &t in &sample.query {
            xs.push(emb[t].clone());
        }
        xs.push(latency.to_vec());
        for &t in tokens {
            xs.push(emb[t].clone());
        }
        for (i, x) in xs.iter_mut().enumerate() {
            add_into(x, &pos[i]);
        }
        xs
    }

    /// Logits of the last position.
    pub fn last_logits(&self, mut xs: Mat) -> Vec<f32> {
        let cfg = self.cfg;
        let (h, dh) = (cfg.n_heads, cfg.d_model / cfg.n_heads);
        let scale = 1.0 / (dh as f32).sqrt();
        for lw in &self.p.model.layers {
            let a: Mat = xs.iter().map(|x| norm(x, &lw.ln1_g, &lw.ln1_b)).collect();
            let q: Mat = a.iter().map(|r| vecmat(r, &lw.wq)).collect();
            let k: Mat = a.iter().map(|r| vecmat(r, &lw.wk)).collect();
            let v: Mat = a.iter().map(|r| vecmat(r, &lw.wv)).collect();
            for i in 0..xs.len() {
                let mut o = vec![0.0f32; cfg.d_model];
                for head in 0..h {
                    let c = head * dh..(head + 1) * dh;
                    let mut s: Vec<f32> = (0..=i)
                        .map(|j| q[i][c.clone()].iter().zip(&k[j][c.clone()]).map(|(x, y)| x * y).sum::<f32>() * scale)
                        .collect();
                    let m = s.iter().copied().fold(f32::NEG_INFINITY, f32::max);
                    let z: f32 = s.iter_mut().map(|e| {
                        *e = (*e - m).exp();
                        *e
                    }).sum();
                    for (j, e) in s.iter().enumerate() {
                        for (t, oo) in c.clone().zip(&mut o[c.clone()]) {
                            *oo += e / z * v[j][t];
                        }
                    }
                }
                let proj = vecmat(&o, &lw.wo);
                add_into(&mut xs[i], &proj);
            }
            for x in xs.iter_mut() {
                let b = norm(x, &lw.ln2_g, &lw.ln2_b);
                let mut u = vecmat(&b, &lw.w_up);
                add_into(&mut u, lw.b_up.data());
                let hid: Vec<f32> = match (cfg.mlp, &lw.w_gate) {
                    (MlpKind::Gated, Some(wg)) => {
                        vecmat(&b, wg).into_iter().zip(u).map(|(g, v)| gelu(g) * v).collect()
                    }
                    _ => u.into_iter().map(gelu).collect(),
                };
                let mut m = vecmat(&hid, &lw.w_down);
                add_into(&mut m, lw.b_down.data());
                add_into(x, &m);
            }
        }
        let w = &self.p.model;
        let last = norm(xs.last().expect("non-empty sequence"), &w.final_norm_g, &w.final_norm_b);
        vecmat(&last, &w.lm_head)
    }

    /// Greedy answer with the latency token at `l = 1`; at most `max_len`
    /// tokens, stopping before the end-of-answer token.
    pub fn generate(&self, sample: &Sample, max_len: usize) -> Vec<usize> {
        let lat = self.latency_token(1.0);
        let mut out = Vec::new();
        while out.len() < max_len {
            let logits = self.last_logits(self.embed(sample, &lat, &out));
            let mut best = 0;
            for (i, &v) in logits.iter().enumerate() {
                if v > logits[best] {
                    best = i;
                }
            }
            if best == END_OF_ANSWER {
                break;
            }
            out.push(best);
            if sample.features.rows() + sample.query.len() + 1 + out.len() > self.cfg.max_seq_len {
                break;
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use adaplan_core::data::{make_synthetic_dataset, Split};
    use adaplan_core::numerics::Rng;
    use adaplan_core::scheduler::LatencyBudget;
    use adaplan_core::{AdaptiveModel, ExperimentConfig, PlanPolicy};

    #[test]
    fn agrees_with_library_at_full_budget() {
        for mlp in [MlpKind::Plain, MlpKind::Gated] {
            let mut exp = ExperimentConfig::toy();
            exp.model.d_model = 16;
            exp.model.d_mlp = 32;
            exp.model.mlp = mlp;
            let model = AdaptiveModel::<f32>::init(exp.model.clone(), &mut Rng::new(9)).unwrap();
            let cost = exp.cost_model().unwrap();
            let r = ReferenceModel::new(&model.config, &model.params);
            for s in make_synthetic_dataset(&exp.task, 20, 4, Split::Eval).unwrap() {
                let l = LatencyBudget::for_cost(1.0, &cost).unwrap();
                let lib = model.infer(&s, l, &cost, &PlanPolicy::Greedy).unwrap();
                assert_eq!(r.generate(&s, s.answer.len()), lib.answer);

                let x = model.prompt(&s, l).unwrap();
                let lib_last = model.view().forward_prefill(&x, &lib.plan).unwrap();
                let ref_last = r.last_logits(r.embed(&s, &r.latency_token(1.0), &[]));
                for (a, b) in lib_last.last_logits().iter().zip(&ref_last) {
                    assert!((a - b).abs() < 1e-4, "{a} vs {b}");
                }
            }
        }
    }
}
