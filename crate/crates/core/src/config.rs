//! JSON run configuration.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attack::AttackConfig;
use crate::data::{load_rgd, synth_shapes, Dataset, SplitTag, SynthSpec};
use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::losses::{AttackTarget, LossMode};
use crate::models::ModelConfig;
use crate::optim::AdamConfig;
use crate::train::{MetricsConfig, TrainConfig, TrainMode};

pub const EFFECTIVE_CONFIG_FILE: &str = "effective_config.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSource {
    Synth(SynthSpec),
    Files { train: PathBuf, test: PathBuf },
}

impl Default for DatasetSource {
    fn default() -> Self {
        DatasetSource::Synth(SynthSpec::default())
    }
}

impl DatasetSource {
    pub fn load(&self) -> Result<(Dataset, Dataset)> {
        match self {
            DatasetSource::Synth(spec) => synth_shapes(spec),
            DatasetSource::Files { train, test } => {
                Ok((load_rgd(train, SplitTag::Train)?, load_rgd(test, SplitTag::Test)?))
            }
        }
    }
}

/// Training hyperparameters other than mode, attack, model and seed, which
/// live at the top level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub d_steps_per_g_step: usize,
    pub gan_optimizer: AdamConfig,
    pub classifier_optimizer: AdamConfig,
    pub attack_enabled: bool,
    pub attack_target: AttackTarget,
    pub lambda: f64,
    pub loss_mode: LossMode,
    pub finetune_epochs: Option<usize>,
    pub metrics: MetricsConfig,
    /// Generator checkpoint for `adv_train_augmented`.
    pub generator_checkpoint: Option<PathBuf>,
    /// Train an oracle classifier so GAN runs can report oracle scores.
    pub oracle: bool,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            epochs: t.epochs,
            batch_size: t.batch_size,
            d_steps_per_g_step: t.d_steps_per_g_step,
            gan_optimizer: t.gan_optimizer,
            classifier_optimizer: t.classifier_optimizer,
            attack_enabled: t.attack_enabled,
            attack_target: t.attack_target,
            lambda: t.lambda,
            loss_mode: t.loss_mode,
            finetune_epochs: t.finetune_epochs,
            metrics: t.metrics,
            generator_checkpoint: None,
            oracle: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub deltas: Vec<f64>,
    pub steps: usize,
    /// Step size as a fraction of each radius.
    pub step_fraction: f64,
    pub random_start: bool,
    pub oracle_samples: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            deltas: (0..=10).map(|i| i as f64 / 100.0).collect(),
            steps: 20,
            step_fraction: 0.125,
            random_start: true,
            oracle_samples: 200,
        }
    }
}

impl EvalSection {
    /// Evaluation attack at unit radius; rescale with `AttackConfig::at_radius`.
    pub fn attack_template(&self, pixel: &AttackConfig) -> AttackConfig {
        AttackConfig {
            delta_max: 1.0,
            steps: self.steps,
            step_size: self.step_fraction,
            random_start: self.random_start,
            pixel_min: pixel.pixel_min,
            pixel_max: pixel.pixel_max,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub mode: TrainMode,
    pub dataset: DatasetSource,
    pub model: ModelConfig,
    pub train: TrainSection,
    pub attack: AttackConfig,
    pub eval: EvalSection,
    pub seed: u64,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            mode: TrainMode::Robgan,
            dataset: DatasetSource::default(),
            model: ModelConfig::default(),
            train: TrainSection::default(),
            attack: AttackConfig::training(0.1),
            eval: EvalSection::default(),
            seed: 0,
            out_dir: PathBuf::from("runs/default"),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let c = |e: Error| match e {
            Error::Config(_) => e,
            other => Error::Config(other.to_string()),
        };
        self.train_config().validate().map_err(c)?;
        if self.eval.steps > 0 && !(self.eval.step_fraction > 0.0) {
            return Err(Error::Config("eval.step_fraction must be > 0".into()));
        }
        if self.eval.deltas.iter().any(|d| !(0.0..=2.0).contains(d))
            || self.eval.deltas.windows(2).any(|w| w[0] > w[1])
        {
            return Err(Error::Config("eval.deltas must be sorted and within [0, 2]".into()));
        }
        if let DatasetSource::Synth(spec) = &self.dataset {
            if spec.num_classes != self.model.num_classes
                || spec.size != self.model.height
                || spec.size != self.model.width
                || self.model.channels != 1
            {
                return Err(Error::Config(format!(
                    "synthetic dataset ({} classes, {}x{}x1) does not fit the model",
                    spec.num_classes, spec.size, spec.size
                )));
            }
        }
        Ok(())
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            mode: self.mode,
            epochs: t.epochs,
            batch_size: t.batch_size,
            d_steps_per_g_step: t.d_steps_per_g_step,
            gan_optimizer: t.gan_optimizer.clone(),
            classifier_optimizer: t.classifier_optimizer.clone(),
            attack: self.attack.clone(),
            attack_enabled: t.attack_enabled,
            attack_target: t.attack_target,
            lambda: t.lambda,
            loss_mode: t.loss_mode,
            finetune_epochs: t.finetune_epochs,
            seed: self.seed,
            model: self.model.clone(),
            metrics: t.metrics.clone(),
        }
    }

    /// The configuration with every defaulted option spelled out.
    pub fn effective(&self) -> Self {
        let mut out = self.clone();
        out.train.finetune_epochs = Some(self.train_config().resolved_finetune_epochs());
        out.train.metrics.eval_delta = Some(self.train.metrics.eval_delta.unwrap_or(self.attack.delta_max));
        out
    }

    pub fn write_effective(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join(EFFECTIVE_CONFIG_FILE);
        let json = serde_json::to_string_pretty(&self.effective()).expect("config serializes");
        write_atomic(&path, json.as_bytes())?;
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_object_gives_defaults() {
        let cfg = RunConfig::from_json("{}").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.eval.deltas.len(), 11);
    }

    #[test]
    fn unknown_keys_rejected_at_every_level() {
        for text in [
            r#"{"modee": "clean"}"#,
            r#"{"train": {"epoch": 3}}"#,
            r#"{"attack": {"delta": 0.1}}"#,
            r#"{"dataset": {"synth": {"sed": 1}}}"#,
            r#"{"eval": {"delta": [0.1]}}"#,
        ] {
            assert!(matches!(RunConfig::from_json(text), Err(Error::Config(_))), "{text}");
        }
    }

    #[test]
    fn effective_config_round_trips_and_is_a_fixed_point() {
        let cfg = RunConfig::from_json(r#"{"mode": "clean", "train": {"epochs": 5}, "seed": 3}"#).unwrap();
        let eff = cfg.effective();
        assert_eq!(eff.train.finetune_epochs, Some(1));
        assert_eq!(eff.train.metrics.eval_delta, Some(0.1));
        let text = serde_json::to_string(&eff).unwrap();
        let back = RunConfig::from_json(&text).unwrap();
        assert_eq!(back, eff);
        assert_eq!(back.effective(), eff);
        assert_eq!(back.train_config().hash(), eff.train_config().hash());
    }

    #[test]
    fn invalid_values_are_config_errors() {
        for text in [
            r#"{"train": {"epochs": 0}}"#,
            r#"{"attack": {"delta_max": 3.0}}"#,
            r#"{"eval": {"deltas": [0.1, 0.0]}}"#,
            r#"{"dataset": {"synth": {"num_classes": 3}}}"#,
            r#"{"mode": "gan"}"#,
        ] {
            assert!(matches!(RunConfig::from_json(text), Err(Error::Config(_))), "{text}");
        }
    }

    #[test]
    fn eval_template_scales_with_radius() {
        let t = EvalSection::default().attack_template(&AttackConfig::training(0.1));
        let a = t.at_radius(0.08);
        assert_eq!(a.steps, 20);
        assert!((a.step_size - 0.01).abs() < 1e-15);
    }
}
