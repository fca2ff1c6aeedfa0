//! Single-sample inference: prefill over a prompt, then cached greedy
//! decoding. Switched-off blocks and heads are skipped outright; switched-off
//! MLP groups have their channels zeroed before the down-projection.

use crate::cost;
use crate::error::{Error, Result};
use crate::numerics::kernels::{self, LAYER_NORM_EPS};
use crate::numerics::{Scalar, Tensor};

use super::{ExecutionPlan, LayerWeights, MlpKind, ModelConfig, ModelWeights, SwitchDesign};

#[derive(Clone, Copy)]
pub struct ModelView<'a, F: Scalar> {
    pub config: &'a ModelConfig,
    pub weights: &'a ModelWeights<Tensor<F>>,
}

/// Keys and values of one executed head, `len × head_dim` each.
#[derive(Clone, Debug, Default)]
struct HeadCache<F> {
    k: Vec<F>,
    v: Vec<F>,
}

#[derive(Clone, Debug)]
pub struct KvCache<F> {
    plan: Option<ExecutionPlan>,
    len: usize,
    /// `layers[l][h]` is `None` for heads that do not run under the plan.
    layers: Vec<Vec<Option<HeadCache<F>>>>,
}

impl<F> KvCache<F> {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn plan(&self) -> Option<&ExecutionPlan> {
        self.plan.as_ref()
    }
}

/// State after the always-on layers: enough to read the latency token and
/// to finish the prefill once a plan is chosen.
#[derive(Clone, Debug)]
pub struct FrontState<F> {
    x: Tensor<F>,
    hidden_states: Vec<Tensor<F>>,
    attention: Vec<Vec<Option<Vec<F>>>>,
    cache: KvCache<F>,
    flops: f64,
}

impl<F: Scalar> FrontState<F> {
    /// Hidden state of the last row (the latency token of a prompt) at the
    /// output of the last always-on layer.
    pub fn last_row(&self) -> &[F] {
        self.x.row(self.x.rows() - 1)
    }

    pub fn hidden(&self) -> &Tensor<F> {
        &self.x
    }
}

#[derive(Clone, Debug)]
pub struct PrefillOutput<F> {
    /// Embedded input followed by the output of every layer.
    pub hidden_states: Vec<Tensor<F>>,
    /// `rows × vocab` logits.
    pub logits: Tensor<F>,
    /// Attention probabilities of the last row, per layer and head; `None`
    /// for layers or heads that did not run.
    pub attention: Vec<Vec<Option<Vec<F>>>>,
    /// Prefill FLOPs actually executed.
    pub flops: f64,
    pub cache: KvCache<F>,
}

impl<F: Scalar> PrefillOutput<F> {
    pub fn last_logits(&self) -> &[F] {
        self.logits.row(self.logits.rows() - 1)
    }
}

/// Which parts of a layer run.
struct LayerMask {
    heads: Vec<bool>,
    groups: Vec<bool>,
}

impl<'a, F: Scalar> ModelView<'a, F> {
    pub fn new(config: &'a ModelConfig, weights: &'a ModelWeights<Tensor<F>>) -> Self {
        ModelView { config, weights }
    }

    /// Linear projection of per-token visual features.
    pub fn encode_visual(&self, features: &Tensor<F>) -> Result<Tensor<F>> {
        let w = self.weights;
        if features.cols() != self.config.d_visual {
            return Err(Error::shape("encode_visual", features.shape(), w.vis_proj_w.shape()));
        }
        let mut out = kernels::matmul(features, &w.vis_proj_w)?;
        kernels::add_row_bias(&mut out, &w.vis_proj_b)?;
        Ok(out)
    }

    /// Token embeddings plus position embeddings starting at `offset`.
    pub fn embed_text(&self, ids: &[usize], offset: usize) -> Result<Tensor<F>> {
        let mut out = kernels::embedding_lookup(&self.weights.token_emb, ids)?;
        self.add_positions(&mut out, offset)?;
        Ok(out)
    }

    fn add_positions(&self, x: &mut Tensor<F>, offset: usize) -> Result<()> {
        let max = self.config.max_seq_len;
        if offset + x.rows() > max {
            return Err(Error::SequenceTooLong {
                len: offset + x.rows(),
                max,
            });
        }
        for i in 0..x.rows() {
            let p = self.weights.pos_emb.row(offset + i);
            for (v, &pv) in x.row_mut(i).iter_mut().zip(p) {
                *v = *v + pv;
            }
        }
        Ok(())
    }

    /// Builds `[visual tokens, query tokens, latency token]` with positions.
    pub fn assemble_prompt(
        &self,
        features: &Tensor<F>,
        query: &[usize],
        latency_token: &[F],
    ) -> Result<Tensor<F>> {
        let mut visual = self.encode_visual(features)?;
        self.add_positions(&mut visual, 0)?;
        let text = self.embed_text(query, visual.rows())?;
        let mut lat = Tensor::row_vector(latency_token.to_vec());
        if lat.cols() != self.config.d_model {
            return Err(Error::shape("latency token", lat.shape(), &[self.config.d_model]));
        }
        self.add_positions(&mut lat, visual.rows() + text.rows())?;
        Tensor::concat_rows(&[&visual, &text, &lat])
    }

    fn mask(&self, layer: usize, plan: &ExecutionPlan) -> LayerMask {
        let cfg = self.config;
        let h = cfg.n_heads;
        match cfg.switch_design {
            _ if layer < cfg.split_layer() => LayerMask {
                heads: vec![true; h],
                groups: vec![true; h],
            },
            SwitchDesign::LayerLevel => {
                let on = plan.is_on(layer - cfg.split_layer());
                LayerMask {
                    heads: vec![on; h],
                    groups: vec![on; h],
                }
            }
            SwitchDesign::HeadLevel => LayerMask {
                heads: (0..h).map(|i| plan.is_on(cfg.head_switch(layer, i).unwrap())).collect(),
                groups: (0..h).map(|i| plan.is_on(cfg.group_switch(layer, i).unwrap())).collect(),
            },
        }
    }

    fn layer_flops(&self, mask: &LayerMask, seq: usize) -> f64 {
        let cfg = self.config;
        if cfg.switch_design == SwitchDesign::LayerLevel {
            return if mask.heads[0] { cost::layer_flops(cfg, seq) } else { 0.0 };
        }
        let mut acc = 0.0;
        for _ in mask.heads.iter().filter(|&&b| b) {
            acc += cost::head_flops(cfg, seq);
        }
        for _ in mask.groups.iter().filter(|&&b| b) {
            acc += cost::mlp_group_flops(cfg, seq);
        }
        acc
    }

    /// Runs one block over new rows `x`, appending their keys and values to
    /// `cache`. Returns the block output, or `x` itself when nothing runs.
    fn layer(
        &self,
        lw: &LayerWeights<Tensor<F>>,
        x: &Tensor<F>,
        mask: &LayerMask,
        cache: &mut [Option<HeadCache<F>>],
        prior: usize,
        attention: Option<&mut Vec<Option<Vec<F>>>>,
    ) -> Result<Tensor<F>> {
        let cfg = self.config;
        if cfg.switch_design == SwitchDesign::LayerLevel && !mask.heads[0] {
            return Ok(x.clone());
        }
        let (rows, d) = x.dims2();
        let dh = cfg.head_dim();
        let scale = F::of(1.0 / (dh as f64).sqrt());

        let a = kernels::layer_norm(x, &lw.ln1_g, &lw.ln1_b, LAYER_NORM_EPS)?;
        let mut o = Tensor::zeros(&[rows, d]);
        let mut last_probs = vec![None; cfg.n_heads];
        let mut probs = vec![F::zero(); prior + rows];
        for h in (0..cfg.n_heads).filter(|&h| mask.heads[h]) {
            let cols = h * dh..(h + 1) * dh;
            let q = kernels::matmul_cols(&a, &lw.wq, cols.clone())?;
            let k = kernels::matmul_cols(&a, &lw.wk, cols.clone())?;
            let v = kernels::matmul_cols(&a, &lw.wv, cols.clone())?;
            let hc = cache[h].get_or_insert_with(HeadCache::default);
            hc.k.extend_from_slice(k.data());
            hc.v.extend_from_slice(v.data());
            for i in 0..rows {
                let n_keys = prior + i + 1;
                let out = &mut o.row_mut(i)[cols.clone()];
                kernels::attention_row(q.row(i), &hc.k, &hc.v, dh, 0, n_keys, scale, &mut probs, out);
            }
            last_probs[h] = Some(probs.clone());
        }
        if let Some(slot) = attention {
            *slot = last_probs;
        }
        let y = if mask.heads.iter().any(|&b| b) {
            kernels::add(x, &kernels::matmul(&o, &lw.wo)?)?
        } else {
            x.clone()
        };

        let b = kernels::layer_norm(&y, &lw.ln2_g, &lw.ln2_b, LAYER_NORM_EPS)?;
        let mut u = kernels::matmul(&b, &lw.w_up)?;
        kernels::add_row_bias(&mut u, &lw.b_up)?;
        let mut hid = match (cfg.mlp, &lw.w_gate) {
            (MlpKind::Gated, Some(wg)) => {
                let gate = kernels::gelu(&kernels::matmul(&b, wg)?);
                let data = gate.data().iter().zip(u.data()).map(|(&g, &v)| g * v).collect();
                Tensor::new(u.shape().to_vec(), data)?
            }
            (MlpKind::Plain, None) => kernels::gelu(&u),
            _ => return Err(Error::Config("MLP weights do not match mlp kind".into())),
        };
        let gw = cfg.group_width();
        for (g, _) in mask.groups.iter().enumerate().filter(|(_, &on)| !on) {
            for r in 0..rows {
                for v in &mut hid.row_mut(r)[g * gw..(g + 1) * gw] {
                    *v = F::zero();
                }
            }
        }
        let mut m = kernels::matmul(&hid, &lw.w_down)?;
        kernels::add_row_bias(&mut m, &lw.b_down)?;
        kernels::add(&y, &m)
    }

    fn empty_cache(&self) -> KvCache<F> {
        KvCache {
            plan: None,
            len: 0,
            layers: vec![vec![None; self.config.n_heads]; self.config.n_layers],
        }
    }

    fn check_input(&self, x: &Tensor<F>) -> Result<()> {
        if x.cols() != self.config.d_model {
            return Err(Error::shape("prefill", x.shape(), &[x.rows(), self.config.d_model]));
        }
        if x.rows() > self.config.max_seq_len {
            return Err(Error::SequenceTooLong {
                len: x.rows(),
                max: self.config.max_seq_len,
            });
        }
        Ok(())
    }

    /// Runs the always-on layers over an embedded sequence.
    pub fn prefill_front(&self, x: &Tensor<F>) -> Result<FrontState<F>> {
        self.check_input(x)?;
        let cfg = self.config;
        let seq = x.rows();
        let mut cache = self.empty_cache();
        let mut attention = vec![Vec::new(); cfg.n_layers];
        let mut hidden_states = vec![x.clone()];
        let full = LayerMask {
            heads: vec![true; cfg.n_heads],
            groups: vec![true; cfg.n_heads],
        };
        let mut flops = 0.0;
        let mut cur = x.clone();
        for l in 0..cfg.split_layer() {
            cur = self.layer(
                &self.weights.layers[l],
                &cur,
                &full,
                &mut cache.layers[l],
                0,
                Some(&mut attention[l]),
            )?;
            flops += cost::layer_flops(cfg, seq);
            hidden_states.push(cur.clone());
        }
        flops += cost::lm_head_flops(cfg, seq);
        cache.len = seq;
        Ok(FrontState {
            x: cur,
            hidden_states,
            attention,
            cache,
            flops,
        })
    }

    /// Runs the switchable layers under `plan` and the output head.
    pub fn prefill_back(&self, front: FrontState<F>, plan: &ExecutionPlan) -> Result<PrefillOutput<F>> {
        let cfg = self.config;
        plan.check_len(cfg.n_switches())?;
        let FrontState {
            x: mut cur,
            mut hidden_states,
            mut attention,
            mut cache,
            mut flops,
        } = front;
        let seq = cur.rows();
        for l in cfg.split_layer()..cfg.n_layers {
            let mask = self.mask(l, plan);
            cur = self.layer(
                &self.weights.layers[l],
                &cur,
                &mask,
                &mut cache.layers[l],
                0,
                Some(&mut attention[l]),
            )?;
            flops += self.layer_flops(&mask, seq);
            hidden_states.push(cur.clone());
        }
        let logits = self.head(&cur)?;
        cache.plan = Some(plan.clone());
        Ok(PrefillOutput {
            hidden_states,
            logits,
            attention,
            flops,
            cache,
        })
    }

    pub fn forward_prefill(&self, x: &Tensor<F>, plan: &ExecutionPlan) -> Result<PrefillOutput<F>> {
        plan.check_len(self.config.n_switches())?;
        let front = self.prefill_front(x)?;
        self.prefill_back(front, plan)
    }

    fn head(&self, x: &Tensor<F>) -> Result<Tensor<F>> {
        let w = self.weights;
        let n = kernels::layer_norm(x, &w.final_norm_g, &w.final_norm_b, LAYER_NORM_EPS)?;
        kernels::matmul(&n, &w.lm_head)
    }

    /// Feeds one more token through the cache; returns next-token logits.
    pub fn decode_step(&self, cache: &mut KvCache<F>, token: usize, plan: &ExecutionPlan) -> Result<Vec<F>> {
        if cache.plan.as_ref() != Some(plan) {
            return Err(Error::PlanChanged);
        }
        let mut cur = self.embed_text(&[token], cache.len)?;
        for l in 0..self.config.n_layers {
            let mask = self.mask(l, plan);
            cur = self.layer(&self.weights.layers[l], &cur, &mask, &mut cache.layers[l], cache.len, None)?;
        }
        cache.len += 1;
        Ok(self.head(&cur)?.into_data())
    }

    /// Greedy decoding after a prefill of `x`. Stops after emitting `stop`
    /// (not included in the result) or after `max_len` tokens.
    pub fn generate(&self, x: &Tensor<F>, plan: &ExecutionPlan, max_len: usize, stop: usize) -> Result<Vec<usize>> {
        let out = self.forward_prefill(x, plan)?;
        self.generate_from(out, plan, max_len, stop)
    }

    /// Greedy decoding continuing an existing prefill.
    pub fn generate_from(
        &self,
        prefill: PrefillOutput<F>,
        plan: &ExecutionPlan,
        max_len: usize,
        stop: usize,
    ) -> Result<Vec<usize>> {
        let mut answer = Vec::new();
        if max_len == 0 {
            return Ok(answer);
        }
        let mut next = kernels::argmax(prefill.last_logits());
        let mut cache = prefill.cache;
        loop {
            if next == stop {
                break;
            }
            answer.push(next);
            if answer.len() == max_len || cache.len >= self.config.max_seq_len {
                break;
            }
            next = kernels::argmax(&self.decode_step(&mut cache, next, plan)?);
        }
        Ok(answer)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cost::CostModel;
    use crate::model::tests::config;
    use crate::numerics::Rng;

    fn setup(design: SwitchDesign, mlp: MlpKind) -> (ModelConfig, ModelWeights<Tensor<f32>>) {
        let mut cfg = config(design);
        cfg.mlp = mlp;
        let w = ModelWeights::init(&cfg, &mut Rng::new(3));
        (cfg, w)
    }

    fn input(cfg: &ModelConfig, rows: usize, seed: u64) -> Tensor<f32> {
        let mut rng = Rng::new(seed);
        Tensor::from_fn(&[rows, cfg.d_model], |_| rng.normal() as f32)
    }

    #[test]
    fn visual_projection_matches_matmul() {
        let (cfg, w) = setup(SwitchDesign::LayerLevel, MlpKind::Plain);
        let view = ModelView::new(&cfg, &w);
        let mut rng = Rng::new(1);
        let feats = Tensor::from_fn(&[3, cfg.d_visual], |_| rng.normal() as f32);
        let out = view.encode_visual(&feats).unwrap();
        assert_eq!(out, kernels::matmul(&feats, &w.vis_proj_w).unwrap());
        assert!(view.encode_visual(&Tensor::zeros(&[3, 4])).is_err());
    }

    #[test]
    fn identity_projector_passes_features_through() {
        let (mut cfg, mut w) = setup(SwitchDesign::LayerLevel, MlpKind::Plain);
        cfg.d_visual = cfg.d_model;
        w.vis_proj_w = Tensor::identity(cfg.d_model);
        let view = ModelView::new(&cfg, &w);
        let feats = input(&cfg, 3, 9);
        assert_eq!(view.encode_visual(&feats).unwrap(), feats);
        let zero = Tensor::zeros(&[3, cfg.d_model]);
        assert_eq!(view.encode_visual(&zero).unwrap(), zero);
    }

    #[test]
    fn text_rows_are_table_rows_plus_position() {
        let (cfg, w) = setup(SwitchDesign::LayerLevel, MlpKind::Plain);
        let view = ModelView::new(&cfg, &w);
        let e = view.embed_text(&[4, 7, 4], 2).unwrap();
        for j in 0..cfg.d_model {
            assert_eq!(e.row(1)[j], w.token_emb.row(7)[j] + w.pos_emb.row(3)[j]);
        }
        assert_eq!(view.embed_text(&[], 0).unwrap().rows(), 0);
        let again = view.embed_text(&[4], 2).unwrap();
        assert_eq!(again.row(0), e.row(0));
        assert!(view.embed_text(&[cfg.vocab_size], 0).is_err());
    }

    #[test]
    fn switched_off_block_is_exact_identity() {
        let (cfg, w) = setup(SwitchDesign::LayerLevel, MlpKind::Plain);
        let view = ModelView::new(&cfg, &w);
        let x = input(&cfg, 5, 2);
        let plan = ExecutionPlan::from_selected(2, &[1]);
        let out = view.forward_prefill(&x, &plan).unwrap();
        assert_eq!(out.hidden_states[3], out.hidden_states[2]);
        assert_ne!(out.hidden_states[4], out.hidden_states[3]);
        let none = view.forward_prefill(&x, &ExecutionPlan::all_off(2)).unwrap();
        assert_eq!(none.hidden_states[4], none.hidden_states[2]);
    }

    #[test]
    fn decode_matches_recomputed_prefill() {
        for design in [SwitchDesign::LayerLevel, SwitchDesign::HeadLevel] {
            for mlp in [MlpKind::Plain, MlpKind::Gated] {
                let (cfg, w) = setup(design, mlp);
                let view = ModelView::new(&cfg, &w);
                let k = cfg.n_switches();
                let plan = ExecutionPlan::new((0..k).map(|i| i % 3 != 1).collect());
                let x = input(&cfg, 6, 5);
                let mut out = view.forward_prefill(&x, &plan).unwrap();
                let logits = view.decode_step(&mut out.cache, 3, &plan).unwrap();
                let ext = Tensor::concat_rows(&[&x, &view.embed_text(&[3], 6).unwrap()]).unwrap();
                let full = view.forward_prefill(&ext, &plan).unwrap();
                let diff = logits
                    .iter()
                    .zip(full.last_logits())
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0f32, f32::max);
                assert!(diff < 1e-5, "{design:?} {mlp:?}: {diff}");
            }
        }
    }

    #[test]
    fn plan_cannot_change_mid_generation() {
        let (cfg, w) = setup(SwitchDesign::LayerLevel, MlpKind::Plain);
        let view = ModelView::new(&cfg, &w);
        let x = input(&cfg, 4, 5);
        let mut out = view.forward_prefill(&x, &ExecutionPlan::all_on(2)).unwrap();
        let err = view.decode_step(&mut out.cache, 1, &ExecutionPlan::all_off(2));
        assert!(matches!(err, Err(Error::PlanChanged)));
        assert!(view.forward_prefill(&x, &ExecutionPlan::all_on(3)).is_err());
    }

    #[test]
    fn zero_length_generation_is_empty() {
        let (cfg, w) = setup(SwitchDesign::LayerLevel, MlpKind::Plain);
        let view = ModelView::new(&cfg, &w);
        let x = input(&cfg, 4, 5);
        assert!(view.generate(&x, &ExecutionPlan::all_on(2), 0, 0).unwrap().is_empty());
        let ans = view.generate(&x, &ExecutionPlan::all_on(2), 3, usize::MAX).unwrap();
        assert_eq!(ans.len(), 3);
    }

    #[test]
    fn sequence_length_is_bounded() {
        let (cfg, w) = setup(SwitchDesign::LayerLevel, MlpKind::Plain);
        let view = ModelView::new(&cfg, &w);
        let x = input(&cfg, cfg.max_seq_len + 1, 5);
        assert!(matches!(
            view.forward_prefill(&x, &ExecutionPlan::all_on(2)),
            Err(Error::SequenceTooLong { .. })
        ));
    }

    #[test]
    fn executed_flops_match_cost_model() {
        for design in [SwitchDesign::LayerLevel, SwitchDesign::HeadLevel] {
            let (cfg, w) = setup(design, MlpKind::Plain);
            let view = ModelView::new(&cfg, &w);
            let cm = CostModel::new(&cfg, 6).unwrap();
            let x = input(&cfg, 6, 1);
            let k = cfg.n_switches();
            let mut rng = Rng::new(4);
            for _ in 0..10 {
                let plan = ExecutionPlan::new((0..k).map(|_| rng.uniform() < 0.5).collect());
                let out = view.forward_prefill(&x, &plan).unwrap();
                assert_eq!(out.flops, cm.plan_flops(&plan));
                for i in (0..k).filter(|&i| !plan.is_on(i)) {
                    let mut bits = plan.bits().to_vec();
                    bits[i] = true;
                    let more = view.forward_prefill(&x, &ExecutionPlan::new(bits)).unwrap();
                    assert!(more.flops > out.flops);
                }
            }
        }
    }

    #[test]
    fn head_level_masking_ignores_switched_off_parameters() {
        let (cfg, mut w) = setup(SwitchDesign::HeadLevel, MlpKind::Plain);
        let x = input(&cfg, 5, 8);
        // Head 1 and MLP group 0 of layer 2 off.
        let mut bits = vec![true; cfg.n_switches()];
        bits[cfg.head_switch(2, 1).unwrap()] = false;
        bits[cfg.group_switch(2, 0).unwrap()] = false;
        let plan = ExecutionPlan::new(bits);
        let before = ModelView::new(&cfg, &w).forward_prefill(&x, &plan).unwrap().logits;
        let dh = cfg.head_dim();
        let gw = cfg.group_width();
        let lw = &mut w.layers[2];
        for r in 0..cfg.d_model {
            for c in dh..2 * dh {
                lw.wq.row_mut(r)[c] = 7.0;
                lw.wv.row_mut(r)[c] = -3.0;
            }
            for c in 0..gw {
                lw.w_up.row_mut(r)[c] = 5.0;
            }
        }
        for r in 0..gw {
            lw.w_down.row_mut(r).fill(11.0);
        }
        let after = ModelView::new(&cfg, &w).forward_prefill(&x, &plan).unwrap().logits;
        assert_eq!(before, after);
    }

    #[test]
    fn latency_row_attention_is_normalized() {
        let (cfg, w) = setup(SwitchDesign::HeadLevel, MlpKind::Plain);
        let view = ModelView::new(&cfg, &w);
        let x = input(&cfg, 7, 8);
        let out = view.forward_prefill(&x, &ExecutionPlan::all_on(cfg.n_switches())).unwrap();
        for layer in &out.attention {
            for head in layer {
                let s: f32 = head.as_ref().unwrap().iter().sum();
                assert!((s - 1.0).abs() < 1e-5);
            }
        }
    }
}
