//! Switch masking compared against editing the weights directly.

use adaplan_core::model::{ExecutionPlan, SwitchKind};
use adaplan_core::numerics::{Scalar, Tensor};
use adaplan_core::AdaptiveModel;

use crate::{Error, Result};

pub const SURGERY_TOLERANCE: f64 = 1e-5;

fn zero_rows<F: Scalar>(t: &mut Tensor<F>, rows: std::ops::Range<usize>) {
    for r in rows {
        for v in t.row_mut(r) {
            *v = F::zero();
        }
    }
}

/// Max abs difference between the prefill logits with switch `switch_id`
/// off (all others on) and the logits of the all-on model whose weights
/// feeding that head or MLP group into the residual stream are zeroed.
pub fn surgery_difference<F: Scalar>(model: &AdaptiveModel<F>, x: &Tensor<F>, switch_id: usize) -> Result<f64> {
    let cfg = &model.config;
    let topo = cfg.topology();
    let d = *topo
        .descriptors()
        .get(switch_id)
        .ok_or_else(|| Error::Invalid(format!("switch {switch_id} out of range")))?;
    let k = cfg.n_switches();
    let mut bits = vec![true; k];
    bits[switch_id] = false;
    let masked = model.view().forward_prefill(x, &ExecutionPlan::new(bits))?;

    let mut edited = model.clone();
    let lw = &mut edited.params.model.layers[d.layer_index];
    match d.kind {
        SwitchKind::AttnHead => {
            let dh = cfg.head_dim();
            zero_rows(&mut lw.wo, d.group_index * dh..(d.group_index + 1) * dh);
        }
        SwitchKind::MlpGroup => {
            let gw = cfg.group_width();
            zero_rows(&mut lw.w_down, d.group_index * gw..(d.group_index + 1) * gw);
        }
        SwitchKind::Block => {
            return Err(Error::Invalid("surgery applies to head-level switches".into()));
        }
    }
    let full = edited.view().forward_prefill(x, &ExecutionPlan::all_on(k))?;
    Ok(masked
        .logits
        .data()
        .iter()
        .zip(full.logits.data())
        .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
        .fold(0.0, f64::max))
}

pub fn parameter_surgery_check<F: Scalar>(model: &AdaptiveModel<F>, x: &Tensor<F>, switch_id: usize) -> Result<bool> {
    Ok(surgery_difference(model, x, switch_id)? < SURGERY_TOLERANCE)
}
