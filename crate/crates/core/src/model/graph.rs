//! Batched forward pass recorded on the autodiff tape.
//!
//! Every sample in a batch has the same sequence length, so the batch is a
//! single `[batch·seq × d]` matrix. Switches enter as a `[batch × K]` gate
//! matrix multiplied into the block outputs (layer-level) or into the head
//! outputs and MLP channels (head-level). With 0/1 gates this computes the
//! same values as the inference path.

use crate::error::{Error, Result};
use crate::numerics::{Graph, Scalar, Tensor, Var};

use super::{LayerWeights, MlpKind, ModelConfig, ModelWeights, SwitchDesign};

/// Row layout of a batch of equal-length sequences.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BatchLayout {
    pub batch: usize,
    pub seq: usize,
}

impl BatchLayout {
    pub fn rows(&self) -> usize {
        self.batch * self.seq
    }

    /// Row index of position `pos` of sample `b`.
    pub fn row(&self, b: usize, pos: usize) -> usize {
        b * self.seq + pos
    }
}

/// Per-sample inputs of one training sequence.
pub struct SequenceInput<'a, F> {
    /// `n_visual_tokens × d_visual`
    pub features: &'a Tensor<F>,
    /// Query tokens, followed in the sequence by the latency token.
    pub query: &'a [usize],
    /// Tokens fed after the latency token (teacher forcing).
    pub answer_inputs: &'a [usize],
}

pub struct GraphModel<'c> {
    pub config: &'c ModelConfig,
    pub weights: &'c ModelWeights<Var>,
}

impl<'c> GraphModel<'c> {
    pub fn new(config: &'c ModelConfig, weights: &'c ModelWeights<Var>) -> Self {
        GraphModel { config, weights }
    }

    /// Embeds `[visual, query, latency, answer inputs]` for each sample.
    /// `latency` is `[batch × d_model]`.
    pub fn embed<F: Scalar>(
        &self,
        g: &mut Graph<'_, F>,
        inputs: &[SequenceInput<'_, F>],
        latency: Var,
    ) -> Result<(Var, BatchLayout)> {
        let cfg = self.config;
        let w = self.weights;
        let batch = inputs.len();
        let first = inputs.first().ok_or_else(|| Error::Config("empty batch".into()))?;
        let (nv, nq, na) = (first.features.rows(), first.query.len(), first.answer_inputs.len());
        let seq = nv + nq + 1 + na;
        if seq > cfg.max_seq_len {
            return Err(Error::SequenceTooLong {
                len: seq,
                max: cfg.max_seq_len,
            });
        }
        let mut feats = Vec::with_capacity(batch);
        let mut ids = Vec::with_capacity(batch * (nq + na));
        for s in inputs {
            if s.features.rows() != nv || s.query.len() != nq || s.answer_inputs.len() != na {
                return Err(Error::Config("batch sequences differ in layout".into()));
            }
            feats.push(s.features);
            ids.extend_from_slice(s.query);
        }
        for s in inputs {
            ids.extend_from_slice(s.answer_inputs);
        }
        let feats = g.constant(Tensor::concat_rows(&feats)?);
        let visual = g.matmul(feats, w.vis_proj_w)?;
        let visual = g.add_row(visual, w.vis_proj_b)?;
        let text = g.gather_rows(w.token_emb, &ids)?;
        let stacked = g.concat_rows(&[visual, text, latency])?;

        // Row offsets of each part inside `stacked`.
        let text0 = batch * nv;
        let ans0 = text0 + batch * nq;
        let lat0 = ans0 + batch * na;
        let mut order = Vec::with_capacity(batch * seq);
        for b in 0..batch {
            order.extend((0..nv).map(|i| b * nv + i));
            order.extend((0..nq).map(|i| text0 + b * nq + i));
            order.push(lat0 + b);
            order.extend((0..na).map(|i| ans0 + b * na + i));
        }
        let x = g.gather_rows(stacked, &order)?;
        let positions: Vec<usize> = (0..batch).flat_map(|_| 0..seq).collect();
        let pos = g.gather_rows(w.pos_emb, &positions)?;
        let x = g.add(x, pos)?;
        Ok((x, BatchLayout { batch, seq }))
    }

    /// One block. `gates` is `[batch × K]` and is ignored below the split.
    pub fn layer<F: Scalar>(
        &self,
        g: &mut Graph<'_, F>,
        index: usize,
        x: Var,
        layout: BatchLayout,
        gates: Option<Var>,
    ) -> Result<Var> {
        let cfg = self.config;
        let lw: &LayerWeights<Var> = &self.weights.layers[index];
        let gates = gates.filter(|_| index >= cfg.split_layer());
        let (h, dh, gw) = (cfg.n_heads, cfg.head_dim(), cfg.group_width());

        let a = g.layer_norm(x, lw.ln1_g, lw.ln1_b)?;
        let q = g.matmul(a, lw.wq)?;
        let k = g.matmul(a, lw.wk)?;
        let v = g.matmul(a, lw.wv)?;
        let mut o = g.attention(q, k, v, layout.batch, layout.seq, h)?;
        let mut block_gate = None;
        if let Some(gv) = gates {
            match cfg.switch_design {
                SwitchDesign::HeadLevel => {
                    let start = cfg.head_switch(index, 0).expect("switchable layer");
                    let e = g.expand_gates(gv, start, h, layout.seq, dh)?;
                    o = g.mul(o, e)?;
                }
                SwitchDesign::LayerLevel => {
                    let col = cfg.block_switch(index).expect("switchable layer");
                    block_gate = Some(g.expand_gates(gv, col, 1, layout.seq, cfg.d_model)?);
                }
            }
        }
        let mut attn = g.matmul(o, lw.wo)?;
        if let Some(e) = block_gate {
            attn = g.mul(attn, e)?;
        }
        let y = g.add(x, attn)?;

        let b = g.layer_norm(y, lw.ln2_g, lw.ln2_b)?;
        let u = g.matmul(b, lw.w_up)?;
        let u = g.add_row(u, lw.b_up)?;
        let mut hid = match (cfg.mlp, lw.w_gate) {
            (MlpKind::Gated, Some(wg)) => {
                let gate = g.matmul(b, wg)?;
                let gate = g.gelu(gate);
                g.mul(gate, u)?
            }
            (MlpKind::Plain, None) => g.gelu(u),
            _ => return Err(Error::Config("MLP weights do not match mlp kind".into())),
        };
        if let (Some(gv), SwitchDesign::HeadLevel) = (gates, cfg.switch_design) {
            let start = cfg.group_switch(index, 0).expect("switchable layer");
            let e = g.expand_gates(gv, start, h, layout.seq, gw)?;
            hid = g.mul(hid, e)?;
        }
        let m = g.matmul(hid, lw.w_down)?;
        let mut m = g.add_row(m, lw.b_down)?;
        if let Some(e) = block_gate {
            m = g.mul(m, e)?;
        }
        g.add(y, m)
    }

    /// Layers `range` in order.
    pub fn layers<F: Scalar>(
        &self,
        g: &mut Graph<'_, F>,
        range: std::ops::Range<usize>,
        mut x: Var,
        layout: BatchLayout,
        gates: Option<Var>,
    ) -> Result<Var> {
        for l in range {
            x = self.layer(g, l, x, layout, gates)?;
        }
        Ok(x)
    }

    /// Output logits of the selected rows.
    pub fn logits_at<F: Scalar>(&self, g: &mut Graph<'_, F>, x: Var, rows: &[usize]) -> Result<Var> {
        let w = self.weights;
        let sel = g.gather_rows(x, rows)?;
        let n = g.layer_norm(sel, w.final_norm_g, w.final_norm_b)?;
        g.matmul(n, w.lm_head)
    }
}
