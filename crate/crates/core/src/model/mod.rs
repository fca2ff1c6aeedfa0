//! Decoder-only transformer whose latter layers are gated by binary switches.
//!
//! Two switch layouts are supported. [`SwitchDesign::LayerLevel`] puts one
//! switch on each block from `split_layer()` onward; a switched-off block is
//! bypassed through its residual connection. [`SwitchDesign::HeadLevel`]
//! puts one switch on every attention head and one on every contiguous group
//! of `d_mlp / n_heads` MLP channels in those same layers.

mod graph;
mod infer;
mod weights;

pub use graph::{BatchLayout, GraphModel, SequenceInput};
pub use infer::{FrontState, KvCache, ModelView, PrefillOutput};
pub use weights::{LayerWeights, ModelWeights};
pub(crate) use weights::normal as normal_init;

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SwitchDesign {
    LayerLevel,
    HeadLevel,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum MlpKind {
    /// `gelu(x W_up + b_up) W_down + b_down`
    #[default]
    Plain,
    /// `(gelu(x W_gate) ⊙ (x W_up + b_up)) W_down + b_down`
    Gated,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_mlp: usize,
    pub vocab_size: usize,
    pub n_visual_tokens: usize,
    /// Width of the per-token visual features fed to the projector.
    pub d_visual: usize,
    pub max_seq_len: usize,
    pub switch_design: SwitchDesign,
    /// First switchable layer; `n_layers / 2` when absent.
    #[serde(default)]
    pub switchable_start_layer: Option<usize>,
    #[serde(default)]
    pub mlp: MlpKind,
}

impl ModelConfig {
    /// A 7B-scale multimodal decoder (32 layers, width 4096, gated MLP,
    /// 576 visual tokens); only used for FLOP accounting.
    pub fn llava_like() -> Self {
        ModelConfig {
            n_layers: 32,
            d_model: 4096,
            n_heads: 32,
            d_mlp: 11008,
            vocab_size: 32000,
            n_visual_tokens: 576,
            d_visual: 1024,
            max_seq_len: 2048,
            switch_design: SwitchDesign::LayerLevel,
            switchable_start_layer: None,
            mlp: MlpKind::Gated,
        }
    }

    pub fn split_layer(&self) -> usize {
        self.switchable_start_layer.unwrap_or(self.n_layers / 2)
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Channels per MLP switch group.
    pub fn group_width(&self) -> usize {
        self.d_mlp / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let split = self.split_layer();
        if self.n_layers < 2 || split == 0 || split >= self.n_layers {
            return bad(format!(
                "switchable_start_layer must satisfy 0 < {split} < n_layers = {}",
                self.n_layers
            ));
        }
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return bad(format!("d_model {} not divisible by n_heads {}", self.d_model, self.n_heads));
        }
        if self.d_mlp % self.n_heads != 0 {
            return bad(format!("d_mlp {} not a multiple of n_heads {}", self.d_mlp, self.n_heads));
        }
        if self.vocab_size == 0 || self.max_seq_len == 0 || self.d_visual == 0 {
            return bad("vocab_size, max_seq_len and d_visual must be positive".into());
        }
        Ok(())
    }

    /// Number of switches `K`.
    pub fn n_switches(&self) -> usize {
        let layers = self.n_layers - self.split_layer();
        match self.switch_design {
            SwitchDesign::LayerLevel => layers,
            SwitchDesign::HeadLevel => layers * 2 * self.n_heads,
        }
    }

    /// Switch id of the block switch of `layer` (layer-level design).
    pub fn block_switch(&self, layer: usize) -> Option<usize> {
        (self.switch_design == SwitchDesign::LayerLevel && layer >= self.split_layer())
            .then(|| layer - self.split_layer())
    }

    /// Switch id of attention head `head` in `layer` (head-level design).
    pub fn head_switch(&self, layer: usize, head: usize) -> Option<usize> {
        (self.switch_design == SwitchDesign::HeadLevel && layer >= self.split_layer())
            .then(|| (layer - self.split_layer()) * 2 * self.n_heads + head)
    }

    /// Switch id of MLP channel group `group` in `layer` (head-level design).
    pub fn group_switch(&self, layer: usize, group: usize) -> Option<usize> {
        (self.switch_design == SwitchDesign::HeadLevel && layer >= self.split_layer())
            .then(|| (layer - self.split_layer()) * 2 * self.n_heads + self.n_heads + group)
    }

    pub fn topology(&self) -> SwitchTopology {
        SwitchTopology::new(self)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SwitchKind {
    Block,
    AttnHead,
    MlpGroup,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SwitchDescriptor {
    pub switch_id: usize,
    pub kind: SwitchKind,
    pub layer_index: usize,
    pub group_index: usize,
}

/// The ordered list of switches of a configuration. Ids are `0..K` with
/// layers ascending; within a head-level layer, heads come before MLP
/// groups.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SwitchTopology {
    descriptors: Vec<SwitchDescriptor>,
}

impl SwitchTopology {
    pub fn new(config: &ModelConfig) -> Self {
        let mut descriptors = Vec::with_capacity(config.n_switches());
        for layer in config.split_layer()..config.n_layers {
            match config.switch_design {
                SwitchDesign::LayerLevel => descriptors.push(SwitchDescriptor {
                    switch_id: descriptors.len(),
                    kind: SwitchKind::Block,
                    layer_index: layer,
                    group_index: 0,
                }),
                SwitchDesign::HeadLevel => {
                    for kind in [SwitchKind::AttnHead, SwitchKind::MlpGroup] {
                        for g in 0..config.n_heads {
                            descriptors.push(SwitchDescriptor {
                                switch_id: descriptors.len(),
                                kind,
                                layer_index: layer,
                                group_index: g,
                            });
                        }
                    }
                }
            }
        }
        SwitchTopology { descriptors }
    }

    pub fn len(&self) -> usize {
        self.descriptors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.descriptors.is_empty()
    }

    pub fn descriptors(&self) -> &[SwitchDescriptor] {
        &self.descriptors
    }
}

/// Binary switch configuration `s`. Serialized as a bit string, switch 0
/// first.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub struct ExecutionPlan {
    bits: Vec<bool>,
}

impl ExecutionPlan {
    pub fn new(bits: Vec<bool>) -> Self {
        ExecutionPlan { bits }
    }

    pub fn all_on(k: usize) -> Self {
        ExecutionPlan { bits: vec![true; k] }
    }

    pub fn all_off(k: usize) -> Self {
        ExecutionPlan { bits: vec![false; k] }
    }

    /// Plan with exactly the listed switches on.
    pub fn from_selected(k: usize, selected: &[usize]) -> Self {
        let mut bits = vec![false; k];
        for &i in selected {
            bits[i] = true;
        }
        ExecutionPlan { bits }
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn is_on(&self, switch: usize) -> bool {
        self.bits[switch]
    }

    pub fn count_on(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn selected(&self) -> impl Iterator<Item = usize> + '_ {
        self.bits.iter().enumerate().filter(|(_, &b)| b).map(|(i, _)| i)
    }

    pub fn check_len(&self, k: usize) -> Result<()> {
        if self.bits.len() != k {
            return Err(Error::PlanLength {
                got: self.bits.len(),
                expected: k,
            });
        }
        Ok(())
    }
}

impl fmt::Display for ExecutionPlan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for &b in &self.bits {
            f.write_str(if b { "1" } else { "0" })?;
        }
        Ok(())
    }
}

impl From<ExecutionPlan> for String {
    fn from(p: ExecutionPlan) -> String {
        p.to_string()
    }
}

impl TryFrom<String> for ExecutionPlan {
    type Error = String;

    fn try_from(s: String) -> Result<Self, String> {
        s.chars()
            .map(|c| match c {
                '0' => Ok(false),
                '1' => Ok(true),
                other => Err(format!("invalid plan bit {other:?}")),
            })
            .collect::<Result<Vec<_>, _>>()
            .map(ExecutionPlan::new)
    }
}
