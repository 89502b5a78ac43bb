use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dualflow::{Ablation, ModelConfig};
use crate::error::{Error, Result};
use crate::tensorad::AdamWConfig;

/// Budget and optimizer of one training stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageConfig {
    pub steps: u64,
    /// Samples per optimizer step.
    pub batch: usize,
    /// Micro-batches per optimizer step; must divide `batch`.
    pub accumulation: usize,
    pub optim: AdamWConfig,
}

impl StageConfig {
    pub fn with_steps(steps: u64) -> Self {
        Self {
            steps,
            ..Self::default()
        }
    }
}

impl Default for StageConfig {
    fn default() -> Self {
        Self {
            steps: 300,
            batch: 8,
            accumulation: 1,
            optim: AdamWConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub train: usize,
    pub heldout: usize,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train: 512,
            heldout: 64,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleSettings {
    pub steps: usize,
    pub cfg_scale: f64,
    /// Keep each step's predicted endpoint inside the pixel range.
    pub clip: bool,
}

impl Default for SampleSettings {
    fn default() -> Self {
        Self {
            steps: 50,
            cfg_scale: 6.0,
            clip: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Held-out records to evaluate; 0 means all.
    pub records: usize,
    /// Records sampled together.
    pub batch: usize,
    /// Flow time of the teacher-forced reconstruction used for PSNR.
    pub psnr_t: f64,
    pub psnr_cap: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            records: 0,
            batch: 8,
            psnr_t: 0.5,
            psnr_cap: 60.0,
        }
    }
}

/// Everything a run needs besides the data itself.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub ablation: Ablation,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub stage0: StageConfig,
    pub stage1: StageConfig,
    pub stage2: StageConfig,
    /// DiT layers whose fused features feed the pose module per stage-2 step.
    pub layer_selection: usize,
    /// Probability of replacing the condition with the null token during training.
    pub cond_dropout: f64,
    pub sample: SampleSettings,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            ablation: Ablation::Full,
            data: DataConfig::default(),
            model: ModelConfig::default(),
            stage0: StageConfig::with_steps(300),
            stage1: StageConfig::with_steps(300),
            stage2: StageConfig::with_steps(600),
            layer_selection: 3,
            cond_dropout: 0.1,
            sample: SampleSettings::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Format(format!("run config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        for (name, s) in [("stage0", &self.stage0), ("stage1", &self.stage1), ("stage2", &self.stage2)] {
            if s.steps == 0 {
                return Err(Error::invalid(format!("{name}.steps must be positive")));
            }
            if s.batch == 0 || s.accumulation == 0 || s.batch % s.accumulation != 0 {
                return Err(Error::invalid(format!(
                    "{name}: accumulation {} must divide batch {}",
                    s.accumulation, s.batch
                )));
            }
        }
        if !(1..=self.model.blocks).contains(&self.layer_selection) {
            return Err(Error::invalid(format!(
                "layer_selection {} must lie in 1..={}",
                self.layer_selection, self.model.blocks
            )));
        }
        if !(0.0..=1.0).contains(&self.cond_dropout) {
            return Err(Error::invalid("cond_dropout must lie in [0, 1]"));
        }
        if self.sample.steps == 0 || !self.sample.cfg_scale.is_finite() {
            return Err(Error::invalid("sampling needs steps >= 1 and a finite cfg scale"));
        }
        if self.eval.batch == 0 || !(0.0..1.0).contains(&self.eval.psnr_t) {
            return Err(Error::invalid("eval.batch must be positive and eval.psnr_t in [0, 1)"));
        }
        if self.data.train == 0 || self.data.heldout == 0 {
            return Err(Error::invalid("both data splits need records"));
        }
        Ok(())
    }

    pub fn stage(&self, stage: Stage) -> &StageConfig {
        match stage {
            Stage::Pretrain => &self.stage0,
            Stage::Motion => &self.stage1,
            Stage::Joint => &self.stage2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    /// Video branch alone on RGB latents.
    Pretrain,
    /// Motion branch alone on motion latents.
    Motion,
    /// Everything but the video branch, with the total loss.
    Joint,
}

impl Stage {
    pub fn index(self) -> u64 {
        match self {
            Stage::Pretrain => 0,
            Stage::Motion => 1,
            Stage::Joint => 2,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        assert_eq!(RunConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
        assert_eq!(cfg.stage2.steps, 600);
        assert_eq!(cfg.sample.cfg_scale, 6.0);
    }

    #[test]
    fn partial_files_fill_defaults() {
        let cfg = RunConfig::from_toml("seed = 3\nablation = \"pass-fused\"\n[stage2]\nsteps = 10\n").unwrap();
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.ablation, Ablation::PassFused);
        assert_eq!(cfg.stage2.steps, 10);
        assert_eq!(cfg.stage2.batch, 8);
    }

    #[test]
    fn invalid_settings_are_rejected() {
        for text in [
            "[stage1]\nsteps = 0\n",
            "layer_selection = 0\n",
            "layer_selection = 5\n",
            "[stage0]\nbatch = 6\naccumulation = 4\n",
            "ablation = \"bogus\"\n",
            "unknown = 1\n",
        ] {
            assert!(RunConfig::from_toml(text).is_err(), "{text}");
        }
    }
}
