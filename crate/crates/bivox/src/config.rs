//! Model dimensions and training schedules.

use crate::error::{Error, Result};
use crate::vocab::Vocabulary;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Every dimension and hyperparameter of the model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Backbone hidden width.
    pub d_h: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    /// Grouping factor: raw speech tokens fused into one backbone step.
    pub k: usize,
    /// Speech token embedding width on the input side.
    pub d_s: usize,
    /// Ungroup projection width; must be divisible by `k`.
    pub d_g: usize,
    /// Speech refiner width, depth and heads.
    pub srh_d: usize,
    pub srh_layers: usize,
    pub srh_heads: usize,
    pub v_t: u32,
    pub v_s: u32,
    /// Text-head loss weight.
    pub lambda: f64,
    /// Refiner loss weight.
    pub mu: f64,
    /// Hard bound on backbone steps per sequence.
    pub max_steps: usize,
    /// Tie the text head to the text embedding table.
    pub tie_text_head: bool,
    /// When false, replace the refiner with a parallel split head
    /// (one `d_h → k·v_s` projection chopped into k token distributions).
    pub srh_enabled: bool,
    /// Reset the refiner context at every group boundary instead of letting
    /// it span the whole utterance (ablation switch).
    pub srh_group_reset: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_h: 64,
            n_layers: 2,
            n_heads: 4,
            d_ff: 256,
            k: 5,
            d_s: 32,
            d_g: 80,
            srh_d: 32,
            srh_layers: 2,
            srh_heads: 2,
            v_t: 128,
            v_s: 64,
            lambda: 1.0,
            mu: 1.0,
            max_steps: 512,
            tie_text_head: false,
            srh_enabled: true,
            srh_group_reset: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k < 1 {
            return Err(Error::Config("k must be at least 1".into()));
        }
        if self.d_g % self.k != 0 {
            return Err(Error::Config(format!(
                "d_g {} must be divisible by k {}",
                self.d_g, self.k
            )));
        }
        if self.d_h % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_h {} must be divisible by n_heads {}",
                self.d_h, self.n_heads
            )));
        }
        if self.srh_d % self.srh_heads != 0 {
            return Err(Error::Config(format!(
                "srh_d {} must be divisible by srh_heads {}",
                self.srh_d, self.srh_heads
            )));
        }
        if self.lambda < 0.0 || self.mu < 0.0 {
            return Err(Error::Config("loss weights must be nonnegative".into()));
        }
        if self.max_steps < 1 {
            return Err(Error::Config("max_steps must be positive".into()));
        }
        self.vocab()?;
        Ok(())
    }

    pub fn vocab(&self) -> Result<Vocabulary> {
        Vocabulary::new(self.v_t, self.v_s)
    }

    /// Width of one ungrouped chunk (one refiner position's conditioning).
    pub fn chunk_width(&self) -> usize {
        self.d_g / self.k
    }

    /// Raw speech positions the refiner may span in one sequence.
    pub fn max_speech_positions(&self) -> usize {
        self.max_steps * self.k
    }

    /// Hidden width of the refiner feed-forward block.
    pub fn srh_ff(&self) -> usize {
        self.srh_d * 4
    }

    /// A same-shape config with a different grouping factor; the chunk width
    /// is held fixed so the refiner is identical across factors.
    pub fn with_grouping(&self, k: usize) -> ModelConfig {
        let chunk = self.chunk_width();
        ModelConfig {
            k,
            d_g: chunk * k,
            ..self.clone()
        }
    }
}

/// Training stage of the pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    PretrainSrh,
    Stage1,
    Stage2,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::PretrainSrh => "pretrain_srh",
            Stage::Stage1 => "stage1",
            Stage::Stage2 => "stage2",
        }
    }

    pub fn from_name(s: &str) -> Option<Stage> {
        match s {
            "pretrain_srh" | "pretrain-srh" => Some(Stage::PretrainSrh),
            "stage1" => Some(Stage::Stage1),
            "stage2" => Some(Stage::Stage2),
            _ => None,
        }
    }
}

/// One stage's optimization schedule: linear warmup into cosine decay.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSchedule {
    pub stage: Stage,
    pub lr_start: f64,
    pub lr_end: f64,
    pub warmup_fraction: f64,
    pub total_steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Interpolation weight of the inter-stage checkpoint merge.
    pub alpha: f64,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        TrainSchedule::stage1(400)
    }
}

impl TrainSchedule {
    pub fn stage1(total_steps: usize) -> Self {
        TrainSchedule {
            stage: Stage::Stage1,
            lr_start: 1e-4,
            lr_end: 1e-5,
            warmup_fraction: 0.02,
            total_steps,
            batch_size: 8,
            seed: 0,
            alpha: 0.0,
        }
    }

    pub fn stage2(total_steps: usize) -> Self {
        TrainSchedule {
            stage: Stage::Stage2,
            lr_start: 2e-5,
            lr_end: 2e-6,
            ..TrainSchedule::stage1(total_steps)
        }
    }

    /// Refiner pretraining reuses the stage-one schedule.
    pub fn pretrain_srh(total_steps: usize) -> Self {
        TrainSchedule {
            stage: Stage::PretrainSrh,
            ..TrainSchedule::stage1(total_steps)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr_start >= self.lr_end && self.lr_end > 0.0) {
            return Err(Error::Config(format!(
                "learning rates must satisfy lr_start >= lr_end > 0, got {} -> {}",
                self.lr_start, self.lr_end
            )));
        }
        if !(0.0..=1.0).contains(&self.warmup_fraction) {
            return Err(Error::Config("warmup_fraction must be in [0,1]".into()));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config("alpha must be in [0,1]".into()));
        }
        if self.batch_size < 1 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        Ok(())
    }

    /// Learning rate at a zero-based step.
    pub fn lr_at(&self, step: usize) -> f64 {
        if self.total_steps == 0 {
            return self.lr_end;
        }
        let warmup = (self.warmup_fraction * self.total_steps as f64).round() as usize;
        if step < warmup {
            return self.lr_start * (step + 1) as f64 / warmup as f64;
        }
        let decay_len = (self.total_steps - warmup).max(1);
        let progress = (step - warmup) as f64 / decay_len as f64;
        let progress = progress.min(1.0);
        self.lr_end
            + 0.5 * (self.lr_start - self.lr_end) * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

/// On-disk training configuration: the model plus one schedule.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub schedule: TrainSchedule,
}

impl TrainConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: TrainConfig = toml::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.model.validate()?;
        cfg.schedule.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = toml::to_string_pretty(self)
            .map_err(|e| Error::Config(format!("serialize: {e}")))?;
        std::fs::write(path, text)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid() {
        ModelConfig::default().validate().unwrap();
        TrainSchedule::default().validate().unwrap();
    }

    #[test]
    fn invariants_are_enforced() {
        let mut c = ModelConfig::default();
        c.d_g = 81;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::default();
        c.n_heads = 3;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::default();
        c.lambda = -0.5;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::default();
        c.k = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn schedule_warms_up_then_decays_to_end() {
        let s = TrainSchedule::stage1(1000);
        let warmup = 20; // 2% of 1000
        assert!(s.lr_at(0) < s.lr_start / 2.0);
        assert!((s.lr_at(warmup - 1) - s.lr_start).abs() < 1e-12);
        assert!((s.lr_at(999) - s.lr_end).abs() < s.lr_start * 1e-2);
        for step in [0, 5, 50, 500, 999] {
            assert!(s.lr_at(step) <= s.lr_start + 1e-15);
            assert!(s.lr_at(step) > 0.0);
        }
    }

    #[test]
    fn stage_defaults_follow_the_two_stage_recipe() {
        let s1 = TrainSchedule::stage1(100);
        assert_eq!((s1.lr_start, s1.lr_end), (1e-4, 1e-5));
        let s2 = TrainSchedule::stage2(100);
        assert_eq!((s2.lr_start, s2.lr_end), (2e-5, 2e-6));
        assert_eq!(s1.warmup_fraction, 0.02);
        assert_eq!(s1.alpha, 0.0);
    }

    #[test]
    fn grouping_variant_keeps_chunk_width() {
        let c = ModelConfig::default();
        for k in [1, 2, 4, 5, 8] {
            let v = c.with_grouping(k);
            v.validate().unwrap();
            assert_eq!(v.chunk_width(), c.chunk_width());
            assert_eq!(v.k, k);
        }
    }

    #[test]
    fn train_config_round_trips_through_toml() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("train.toml");
        let cfg = TrainConfig {
            model: ModelConfig::default(),
            schedule: TrainSchedule::stage2(123),
        };
        cfg.save(&path).unwrap();
        let loaded = TrainConfig::load(&path).unwrap();
        assert_eq!(loaded, cfg);
    }
}
