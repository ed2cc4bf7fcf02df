//! Fine-tuning schedules: gradual unfreezing, discriminative per-group
//! learning rates, slanted triangular learning rates and early stopping.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{EMBEDDING, GROUPS, SHARED_BIRNN};

/// Groups below the task heads; they get the reduced discriminative rate
/// and stay frozen until the unfreeze epoch.
pub const LOWER_GROUPS: [&str; 2] = [EMBEDDING, SHARED_BIRNN];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    /// Learning rate of the heads-only phase.
    pub base_lr: f64,
    /// First epoch (0-based) at which the lower groups train.
    pub unfreeze_epoch: usize,
    /// Lower-group rate = upper-group rate / `discr_ratio`.
    pub discr_ratio: f64,
    /// Upper-group rate peak once everything trains; with
    /// `tlr_floor_ratio == 1` the rate is constant at this value.
    pub tlr_peak: f64,
    /// Position of the peak as a fraction of all updates after unfreezing.
    pub tlr_warm_fraction: f64,
    /// The schedule starts and ends at `tlr_peak / tlr_floor_ratio`.
    pub tlr_floor_ratio: f64,
    pub max_epochs: usize,
    pub patience: usize,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig::vanilla(0.0005)
    }
}

/// Candidate peak rates for the unfrozen phase, chosen on dev data.
pub const PEAK_LR_GRID: [f64; 3] = [1e-4, 2.5e-4, 5e-4];

impl ScheduleConfig {
    /// Every group trains from the start at a constant rate.
    pub fn vanilla(lr: f64) -> Self {
        ScheduleConfig {
            base_lr: lr,
            unfreeze_epoch: 0,
            discr_ratio: 1.0,
            tlr_peak: lr,
            tlr_warm_fraction: 0.125,
            tlr_floor_ratio: 1.0,
            max_epochs: 25,
            patience: 5,
        }
    }

    /// Heads first, then everything, at a constant rate.
    pub fn guf(lr: f64, unfreeze_epoch: usize) -> Self {
        ScheduleConfig {
            unfreeze_epoch,
            ..ScheduleConfig::vanilla(lr)
        }
    }

    /// Gradual unfreezing with discriminative rates, constant otherwise.
    pub fn guf_discr(lr: f64, unfreeze_epoch: usize) -> Self {
        ScheduleConfig {
            discr_ratio: 2.5,
            ..ScheduleConfig::guf(lr, unfreeze_epoch)
        }
    }

    /// Gradual unfreezing, discriminative rates and the triangular schedule.
    pub fn full(lr: f64, unfreeze_epoch: usize, peak: f64) -> Self {
        ScheduleConfig {
            tlr_peak: peak,
            tlr_floor_ratio: 10.0,
            ..ScheduleConfig::guf_discr(lr, unfreeze_epoch)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [self.base_lr, self.discr_ratio, self.tlr_peak, self.tlr_floor_ratio];
        if positive.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
            return Err(Error::Validation("schedule rates and ratios must be positive".into()));
        }
        if !(self.tlr_warm_fraction > 0.0 && self.tlr_warm_fraction < 1.0) {
            return Err(Error::Validation("tlr_warm_fraction must lie strictly between 0 and 1".into()));
        }
        if self.max_epochs == 0 {
            return Err(Error::Validation("max_epochs must be positive".into()));
        }
        Ok(())
    }

    /// Upper-group rate at update `step` of the unfrozen phase (`total`
    /// updates planned). Before unfreezing the rate is `base_lr`.
    pub fn upper_lr(&self, epoch: usize, step: usize, total: usize) -> Result<f64> {
        if epoch < self.unfreeze_epoch {
            Ok(self.base_lr)
        } else {
            tlr_lr(step, total, self)
        }
    }
}

/// Slanted triangular rate: linear from `peak / floor_ratio` at step 0 up
/// to `peak` at `floor(total * warm_fraction)`, then linear back down to
/// `peak / floor_ratio` at `total`.
pub fn tlr_lr(step: usize, total: usize, cfg: &ScheduleConfig) -> Result<f64> {
    if total == 0 {
        return Err(Error::InvalidArgument("triangular schedule needs at least one update".into()));
    }
    if step > total {
        return Err(Error::InvalidArgument(format!("step {step} beyond the {total} planned updates")));
    }
    let peak = cfg.tlr_peak;
    let floor = peak / cfg.tlr_floor_ratio;
    let cut = ((total as f64 * cfg.tlr_warm_fraction).floor() as usize).clamp(1, total);
    let lr = if step == cut {
        peak
    } else if step < cut {
        floor + (peak - floor) * step as f64 / cut as f64
    } else if step == total {
        floor
    } else {
        peak - (peak - floor) * (step - cut) as f64 / (total - cut) as f64
    };
    Ok(lr)
}

/// Rate for `group` given the upper-group rate `base`.
pub fn group_lr(group: &str, base: f64, cfg: &ScheduleConfig) -> Result<f64> {
    if LOWER_GROUPS.contains(&group) {
        Ok(base / cfg.discr_ratio)
    } else if GROUPS.contains(&group) {
        Ok(base)
    } else {
        Err(Error::InvalidArgument(format!("unknown parameter group `{group}`")))
    }
}

/// Groups trained during `epoch` (0-based).
pub fn unfreeze_plan(epoch: usize, cfg: &ScheduleConfig) -> Vec<&'static str> {
    GROUPS
        .iter()
        .copied()
        .filter(|g| epoch >= cfg.unfreeze_epoch || !LOWER_GROUPS.contains(g))
        .collect()
}

/// Index of the best score; ties go to the earliest epoch. `None` for an
/// empty history.
pub fn early_stop(history: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &v) in history.iter().enumerate() {
        if best.map_or(true, |b| v > history[b]) {
            best = Some(i);
        }
    }
    best
}

/// Whether training should halt after the epochs in `history`. Patience
/// only counts epochs from `cfg.unfreeze_epoch` on, so the heads-only phase
/// cannot end training before the lower groups have been tuned.
pub fn should_stop(history: &[f64], cfg: &ScheduleConfig) -> bool {
    if history.len() >= cfg.max_epochs {
        return true;
    }
    if cfg.patience == 0 || history.len() <= cfg.unfreeze_epoch {
        return false;
    }
    let tail = &history[cfg.unfreeze_epoch..];
    let best = early_stop(tail).expect("non-empty");
    tail.len() - 1 - best >= cfg.patience
}
