use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::moco::MoCoConfig;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub optimizer: OptimizerConfig,
    pub pretrain: PretrainConfig,
    pub amt2: Amt2Config,
    pub moco: MoCoConfig,
    pub finetune: FinetuneConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub momentum: f64,
    /// Global gradient-norm ceiling per step.
    pub grad_clip: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub coco_pretrain_epochs: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Amt2Config {
    pub amt2_iterations: usize,
    pub moco_steps_per_iter: usize,
    pub moco_batch_size: usize,
    pub moco_learning_rate: f64,
    pub adaption_steps_per_iter: usize,
    pub adaption_batch_size: usize,
    pub adaption_learning_rate: f64,
    /// Weight of the anchor term against plain decay inside the penalty.
    pub alpha: f64,
    /// Multiplier on the penalty when added to the instance loss.
    pub l2sp_weight: f64,
    pub freeze_backbone_in_adaption: bool,
    pub reset_queue_per_iter: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub l2sp_finetune: bool,
    pub alpha: f64,
    pub l2sp_weight: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            momentum: 0.9,
            grad_clip: Some(5.0),
        }
    }
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.03,
            batch_size: 4,
            coco_pretrain_epochs: 12,
        }
    }
}

impl Default for Amt2Config {
    fn default() -> Self {
        Self {
            amt2_iterations: 10,
            moco_steps_per_iter: 50,
            moco_batch_size: 8,
            moco_learning_rate: 0.03,
            adaption_steps_per_iter: 10,
            adaption_batch_size: 4,
            adaption_learning_rate: 0.01,
            alpha: 0.1,
            l2sp_weight: 0.01,
            freeze_backbone_in_adaption: false,
            reset_queue_per_iter: false,
        }
    }
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.03,
            batch_size: 2,
            steps: 200,
            l2sp_finetune: false,
            alpha: 0.1,
            l2sp_weight: 0.01,
        }
    }
}

fn positive(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::arg(format!("{name} must be positive, got {v}")))
    }
}

fn at_least_one(name: &str, v: usize) -> Result<()> {
    if v >= 1 {
        Ok(())
    } else {
        Err(Error::arg(format!("{name} must be at least 1")))
    }
}

fn unit_interval(name: &str, v: f64) -> Result<()> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(Error::arg(format!("{name} must lie in [0, 1], got {v}")))
    }
}

impl TrainConfig {
    /// Epoch and fine-tune step counts may be zero (the phase is then a
    /// no-op); every other count must be at least one.
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.moco.validate()?;
        let o = &self.optimizer;
        if !(0.0..1.0).contains(&o.momentum) {
            return Err(Error::arg(format!("optimizer momentum must lie in [0, 1), got {}", o.momentum)));
        }
        if let Some(c) = o.grad_clip {
            positive("grad_clip", c)?;
        }
        let p = &self.pretrain;
        positive("pretrain.learning_rate", p.learning_rate)?;
        at_least_one("pretrain.batch_size", p.batch_size)?;
        let a = &self.amt2;
        at_least_one("amt2.amt2_iterations", a.amt2_iterations)?;
        at_least_one("amt2.moco_steps_per_iter", a.moco_steps_per_iter)?;
        at_least_one("amt2.moco_batch_size", a.moco_batch_size)?;
        at_least_one("amt2.adaption_steps_per_iter", a.adaption_steps_per_iter)?;
        at_least_one("amt2.adaption_batch_size", a.adaption_batch_size)?;
        positive("amt2.moco_learning_rate", a.moco_learning_rate)?;
        positive("amt2.adaption_learning_rate", a.adaption_learning_rate)?;
        unit_interval("amt2.alpha", a.alpha)?;
        if a.l2sp_weight < 0.0 || !a.l2sp_weight.is_finite() {
            return Err(Error::arg("amt2.l2sp_weight must be non-negative"));
        }
        if a.moco_batch_size > self.moco.queue_size {
            return Err(Error::arg("amt2.moco_batch_size exceeds the MoCo queue size"));
        }
        let f = &self.finetune;
        positive("finetune.learning_rate", f.learning_rate)?;
        at_least_one("finetune.batch_size", f.batch_size)?;
        unit_interval("finetune.alpha", f.alpha)?;
        if f.l2sp_weight < 0.0 || !f.l2sp_weight.is_finite() {
            return Err(Error::arg("finetune.l2sp_weight must be non-negative"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        TrainConfig::default().validate().unwrap();
    }

    #[test]
    fn invalid_values_rejected() {
        let mut c = TrainConfig::default();
        c.amt2.alpha = 1.5;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::default();
        c.pretrain.learning_rate = 0.0;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::default();
        c.amt2.amt2_iterations = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn json_round_trip() {
        let c = TrainConfig::default();
        let s = serde_json::to_string(&c).unwrap();
        assert_eq!(serde_json::from_str::<TrainConfig>(&s).unwrap(), c);
        let partial: TrainConfig = serde_json::from_str(r#"{"seed": 4, "amt2": {"alpha": 0.5}}"#).unwrap();
        assert_eq!(partial.seed, 4);
        assert_eq!(partial.amt2.alpha, 0.5);
        assert_eq!(partial.amt2.amt2_iterations, 10);
    }
}
