//! Whole-experiment configuration: model, task, training and evaluation.

use serde::{Deserialize, Serialize};

use crate::cost::CostModel;
use crate::data::{TaskMode, TaskSpec};
use crate::error::{Error, Result};
use crate::model::{MlpKind, ModelConfig, SwitchDesign};
use crate::training::{Arm, LrSchedule, TrainConfig};

pub const DEFAULT_BUDGETS: [f64; 7] = [0.5, 0.6, 0.65, 0.75, 0.85, 0.95, 1.0];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub budgets: Vec<f64>,
    pub n_samples: usize,
    pub data_seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            budgets: DEFAULT_BUDGETS.to_vec(),
            n_samples: 500,
            data_seed: 1001,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub task: TaskSpec,
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalConfig,
}

impl ExperimentConfig {
    /// The small count-mod setup: 8 layers, 6 layer-level switches, a 4x4
    /// grid and a modulus above the cell count, so the answer is the count.
    pub fn toy() -> Self {
        let task = TaskSpec {
            mode: TaskMode::CountMod,
            grid: 4,
            modulus: 17,
            ..TaskSpec::default()
        };
        let model = ModelConfig {
            n_layers: 8,
            d_model: 32,
            n_heads: 4,
            d_mlp: 64,
            vocab_size: task.vocab_size(),
            n_visual_tokens: task.n_cells(),
            d_visual: task.d_visual,
            max_seq_len: task.sequence_len(),
            switch_design: SwitchDesign::LayerLevel,
            switchable_start_layer: Some(2),
            mlp: MlpKind::Plain,
        };
        let train = TrainConfig {
            arm: Arm::Probabilistic,
            budget_range: [0.4, 1.0],
            full_budget_share: 0.2,
            full_plan_steps: 1000,
            learning_rate: 3e-3,
            schedule: LrSchedule::Cosine,
            warmup_steps: 100,
            batch_size: 32,
            steps: 1500,
            tau: 1.0,
            grad_clip: Some(1.0),
            seed: 0,
            data_seed: 1,
            train_samples: 100_000,
            log_every: 50,
        };
        ExperimentConfig {
            model,
            task,
            train,
            eval: EvalConfig {
                n_samples: 1000,
                ..EvalConfig::default()
            },
        }
    }

    pub fn cost_model(&self) -> Result<CostModel> {
        CostModel::new(&self.model, self.task.prompt_len())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.task.validate()?;
        let m = &self.model;
        let t = &self.task;
        if m.vocab_size < t.vocab_size() || m.n_visual_tokens != t.n_cells() || m.d_visual != t.d_visual {
            return Err(Error::Config(format!(
                "model does not fit the task: needs vocab >= {}, {} visual tokens of width {}",
                t.vocab_size(),
                t.n_cells(),
                t.d_visual
            )));
        }
        if m.max_seq_len < t.sequence_len() {
            return Err(Error::Config(format!("max_seq_len must be at least {}", t.sequence_len())));
        }
        let l_min = self.cost_model()?.l_min();
        self.train.validate(l_min)?;
        if let Some(&b) = self.eval.budgets.iter().find(|&&b| !(b >= l_min - 1e-12 && b <= 1.0)) {
            return Err(Error::BudgetOutOfRange { value: b, l_min });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_config_is_valid_and_round_trips() {
        let c = ExperimentConfig::toy();
        c.validate().unwrap();
        let s = serde_json::to_string(&c).unwrap();
        assert_eq!(serde_json::from_str::<ExperimentConfig>(&s).unwrap(), c);
        assert_eq!(c.model.n_switches(), 6);
    }

    #[test]
    fn budgets_below_fixed_cost_are_rejected() {
        let mut c = ExperimentConfig::toy();
        c.eval.budgets = vec![0.1];
        assert!(c.validate().is_err());
    }
}
