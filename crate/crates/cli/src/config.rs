//! Experiment configuration file.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use slu_core::corpus::DataFormat;
use slu_core::lm::LmConfig;
use slu_core::model::SluConfig;
use slu_core::schedules::ScheduleConfig;
use slu_core::train::TrainOptions;
use slu_core::transfer::Condition;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    /// Condition trained by `train`.
    pub condition: Condition,
    /// Conditions compared by `sweep`.
    pub conditions: Vec<Condition>,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub data: DataConfig,
    pub optimizer: OptimizerConfig,
    pub model: SluConfig,
    pub schedule: ScheduleSettings,
    pub lm: LmConfig,
    pub sweep: SweepConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            name: "experiment".into(),
            condition: Condition::NoUt,
            conditions: vec![Condition::NoUt, Condition::Elmol],
            seed: 1,
            out_dir: PathBuf::from("runs"),
            data: DataConfig::default(),
            optimizer: OptimizerConfig::default(),
            model: SluConfig::default(),
            schedule: ScheduleSettings::default(),
            lm: LmConfig::default(),
            sweep: SweepConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub format: DataFormat,
    /// Directory with `train`, `dev` and `test` files.
    pub target: Option<PathBuf>,
    /// Labeled source-domain directory for supervised transfer.
    pub source: Option<PathBuf>,
    /// Plain-text files (one sentence per line) for LM pretraining. When
    /// empty, the label-free training text of target and source is used.
    pub unlabeled: Vec<PathBuf>,
    /// Held-out LM text; otherwise a seeded fraction of the pretraining text.
    pub lm_heldout: Option<PathBuf>,
    pub heldout_fraction: f64,
    /// `word v1 v2 ...` vectors for the pretrained-vectors condition.
    pub word_vectors: Option<PathBuf>,
    /// LM checkpoint used by the ELMo and ELMoL conditions.
    pub lm_checkpoint: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            format: DataFormat::ConllTsv,
            target: None,
            source: None,
            unlabeled: Vec::new(),
            lm_heldout: None,
            heldout_fraction: 0.01,
            word_vectors: None,
            lm_checkpoint: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub algorithm: String,
    pub lr: f64,
    pub batch_size: usize,
    pub clip_norm: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            algorithm: "adam".into(),
            lr: 0.0005,
            batch_size: 32,
            clip_norm: 5.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SchedulePreset {
    /// `full` for ELMoL conditions, `vanilla` otherwise (source stage:
    /// `guf-discr` for ELMoL, `vanilla` otherwise).
    Auto,
    Vanilla,
    Guf,
    GufDiscr,
    Full,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleSettings {
    pub preset: SchedulePreset,
    pub source_preset: SchedulePreset,
    pub unfreeze_epoch: usize,
    pub discr_ratio: f64,
    /// Peak rate after unfreezing; defaults to the optimizer rate.
    pub peak_lr: Option<f64>,
    pub warm_fraction: f64,
    pub floor_ratio: f64,
    pub max_epochs: usize,
    pub patience: usize,
}

impl Default for ScheduleSettings {
    fn default() -> Self {
        ScheduleSettings {
            preset: SchedulePreset::Auto,
            source_preset: SchedulePreset::Auto,
            unfreeze_epoch: 12,
            discr_ratio: 2.5,
            peak_lr: None,
            warm_fraction: 0.125,
            floor_ratio: 10.0,
            max_epochs: 25,
            patience: 5,
        }
    }
}

impl ScheduleSettings {
    fn build(&self, preset: SchedulePreset, lr: f64) -> ScheduleConfig {
        let mut cfg = ScheduleConfig {
            base_lr: lr,
            unfreeze_epoch: 0,
            discr_ratio: 1.0,
            tlr_peak: lr,
            tlr_warm_fraction: self.warm_fraction,
            tlr_floor_ratio: 1.0,
            max_epochs: self.max_epochs,
            patience: self.patience,
        };
        if matches!(preset, SchedulePreset::Guf | SchedulePreset::GufDiscr | SchedulePreset::Full) {
            cfg.unfreeze_epoch = self.unfreeze_epoch;
        }
        if matches!(preset, SchedulePreset::GufDiscr | SchedulePreset::Full) {
            cfg.discr_ratio = self.discr_ratio;
        }
        if preset == SchedulePreset::Full {
            cfg.tlr_peak = self.peak_lr.unwrap_or(lr);
            cfg.tlr_floor_ratio = self.floor_ratio;
        }
        cfg
    }

    /// `(target schedule, source schedule)` for `condition`.
    pub fn resolve(&self, condition: Condition, lr: f64) -> (ScheduleConfig, ScheduleConfig) {
        let elmol = condition.base() == Condition::Elmol;
        let target = match self.preset {
            SchedulePreset::Auto if elmol => SchedulePreset::Full,
            SchedulePreset::Auto => SchedulePreset::Vanilla,
            p => p,
        };
        let source = match self.source_preset {
            SchedulePreset::Auto if elmol => SchedulePreset::GufDiscr,
            SchedulePreset::Auto => SchedulePreset::Vanilla,
            p => p,
        };
        (self.build(target, lr), self.build(source, lr))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub sizes: Vec<usize>,
    pub seeds: Vec<u64>,
    /// Runs trained concurrently.
    pub parallelism: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            sizes: vec![100, 200, 500, 1000, 2000, 5000, 10000],
            seeds: (1..=5).collect(),
            parallelism: 1,
        }
    }
}

impl ExperimentConfig {
    /// Reads a TOML file; relative paths inside it are taken relative to the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let mut cfg: ExperimentConfig =
            toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.out_dir);
        let d = &mut self.data;
        for p in [&mut d.target, &mut d.source, &mut d.lm_heldout, &mut d.word_vectors, &mut d.lm_checkpoint]
            .into_iter()
            .flatten()
        {
            fix(p);
        }
        d.unlabeled.iter_mut().for_each(fix);
    }

    pub fn validate(&self) -> Result<()> {
        if !self.optimizer.algorithm.eq_ignore_ascii_case("adam") {
            bail!("unsupported optimizer `{}` (only adam is available)", self.optimizer.algorithm);
        }
        if !(self.optimizer.lr > 0.0) || self.optimizer.batch_size == 0 {
            bail!("optimizer lr must be positive and batch_size non-zero");
        }
        if !(0.0..1.0).contains(&self.model.dropout) || self.model.l2 < 0.0 {
            bail!("dropout must lie in [0, 1) and l2 must be non-negative");
        }
        if !(self.data.heldout_fraction > 0.0 && self.data.heldout_fraction < 1.0) {
            bail!("heldout_fraction must lie strictly between 0 and 1");
        }
        self.lm.validate()?;
        for c in std::iter::once(self.condition).chain(self.conditions.iter().copied()) {
            let (t, s) = self.schedule.resolve(c, self.optimizer.lr);
            t.validate()?;
            s.validate()?;
        }
        Ok(())
    }

    pub fn train_options(&self) -> TrainOptions {
        TrainOptions {
            batch_size: self.optimizer.batch_size,
            clip_norm: self.optimizer.clip_norm,
            seed: self.seed,
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).unwrap_or_else(|e| format!("# could not render settings: {e}"))
    }
}
