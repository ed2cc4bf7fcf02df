//! SLU training loop: mini-batch Adam with per-group learning rates,
//! gradual unfreezing, dev-based early stopping and freeze audits.

use std::collections::BTreeMap;

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::Utterance;
use crate::error::{Error, Result};
use crate::metrics::{evaluate, EvalPair, MetricReport};
use crate::model::{group_of, SluModel};
use crate::nn::{Adam, Params};
use crate::schedules::{group_lr, should_stop, unfreeze_plan, ScheduleConfig};
use crate::train_util::{clip_grad_norm, fingerprint};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainOptions {
    pub batch_size: usize,
    /// Global gradient-norm cap; 0 disables clipping.
    pub clip_norm: f64,
    pub seed: u64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            batch_size: 32,
            clip_norm: 5.0,
            seed: 1,
        }
    }
}

/// Learning rates used for one update.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrPoint {
    pub epoch: usize,
    /// Update index within the unfrozen phase; `None` before unfreezing.
    pub phase_step: Option<usize>,
    pub upper: f64,
    pub lower: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub dev: MetricReport,
    /// Dev ICA + dev EF1, the early-stopping criterion.
    pub score: f64,
    pub trainable: Vec<String>,
    /// Groups verified bit-identical across the epoch.
    pub frozen: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct FitOutcome {
    /// Parameters from the best dev epoch.
    pub model: SluModel,
    pub best_epoch: usize,
    pub history: Vec<EpochRecord>,
    pub lr_trace: Vec<LrPoint>,
}

/// Predictions for `utterances` paired with their gold labels.
pub fn predict_pairs(model: &SluModel, utterances: &[Utterance]) -> Result<Vec<EvalPair>> {
    utterances
        .par_iter()
        .map(|u| {
            let p = model.predict(&u.tokens)?;
            Ok(EvalPair {
                gold_intent: u.intent.clone(),
                gold_tags: u.bio_tags.clone(),
                pred_intent: p.intent,
                pred_tags: p.tags,
            })
        })
        .collect()
}

pub fn evaluate_model(model: &SluModel, utterances: &[Utterance]) -> Result<MetricReport> {
    evaluate(&predict_pairs(model, utterances)?)
}

/// Fingerprints of the groups in `groups`, plus the frozen LM under `"lm"`.
fn snapshot(model: &SluModel, groups: &[&str]) -> BTreeMap<String, u64> {
    let mut out: BTreeMap<String, u64> = groups
        .iter()
        .map(|g| (g.to_string(), fingerprint(model, &[g])))
        .collect();
    if let Some(lm) = model.frozen_lm() {
        out.insert("lm".into(), fingerprint(lm, &[]));
    }
    out
}

/// Trains `model` on `train`, keeping the epoch with the best dev
/// ICA + EF1. Frozen groups (and a frozen LM) are checked bit-for-bit after
/// every epoch; any change is a [`Error::FreezeViolation`].
pub fn fit(
    mut model: SluModel,
    train: &[Utterance],
    dev: &[Utterance],
    schedule: &ScheduleConfig,
    opts: &TrainOptions,
) -> Result<FitOutcome> {
    schedule.validate()?;
    if train.is_empty() || dev.is_empty() {
        return Err(Error::InvalidArgument("training needs non-empty train and dev sets".into()));
    }
    if opts.batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be positive".into()));
    }
    for u in train.iter().chain(dev) {
        model.label_space.check(u)?;
    }
    let batches = train.len().div_ceil(opts.batch_size);
    let phase_total = schedule.max_epochs.saturating_sub(schedule.unfreeze_epoch) * batches;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut adam = Adam::new();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut phase_step = 0usize;
    let mut global_step = 0usize;
    let mut history: Vec<EpochRecord> = Vec::new();
    let mut lr_trace = Vec::new();
    let mut best: Option<(usize, f64, SluModel)> = None;
    let model_groups = model.groups();

    for epoch in 0..schedule.max_epochs {
        let plan = unfreeze_plan(epoch, schedule);
        let trainable: Vec<&str> = model_groups.iter().copied().filter(|g| plan.contains(g)).collect();
        let frozen: Vec<&str> = model_groups.iter().copied().filter(|g| !plan.contains(g)).collect();
        let before = snapshot(&model, &frozen);

        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(opts.batch_size) {
            global_step += 1;
            model.zero_grad();
            let scale = 1.0 / chunk.len() as f64;
            let mut loss = 0.0;
            for &i in chunk {
                loss += model.accumulate_gradients(&train[i], scale, Some(&mut rng))?.total() * scale;
            }
            loss += model.l2_penalty();
            if !loss.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    step: global_step,
                    loss,
                });
            }
            model.add_l2_grad();
            model.visit_mut("", &mut |name, p| {
                if !trainable.contains(&group_of(name)) {
                    p.grad.fill(0.0);
                }
            });
            if opts.clip_norm > 0.0 {
                clip_grad_norm(&mut model, opts.clip_norm);
            }

            let unfrozen = epoch >= schedule.unfreeze_epoch;
            let upper = schedule.upper_lr(epoch, phase_step, phase_total)?;
            let mut rates = BTreeMap::new();
            for g in &trainable {
                rates.insert(*g, group_lr(g, upper, schedule)?);
            }
            model.visit_mut("", &mut |name, p| {
                if let Some(&lr) = rates.get(group_of(name)) {
                    adam.step(name, p, lr);
                }
            });
            lr_trace.push(LrPoint {
                epoch,
                phase_step: unfrozen.then_some(phase_step),
                upper,
                lower: group_lr(crate::model::SHARED_BIRNN, upper, schedule)?,
            });
            if unfrozen {
                phase_step += 1;
            }
            epoch_loss += loss;
        }

        let after = snapshot(&model, &frozen);
        if let Some((group, _)) = before.iter().find(|(g, v)| after.get(*g) != Some(v)) {
            return Err(Error::FreezeViolation(format!("group `{group}` changed during epoch {epoch}")));
        }

        let report = evaluate_model(&model, dev)?;
        let score = report.ica + report.ef1;
        info!(
            "epoch {epoch}: loss {:.4}, dev {report}",
            epoch_loss / batches as f64
        );
        debug!("epoch {epoch}: trainable {trainable:?}, frozen {frozen:?}");
        if best.as_ref().map_or(true, |(_, s, _)| score > *s) {
            best = Some((epoch, score, model.clone()));
        }
        history.push(EpochRecord {
            epoch,
            train_loss: epoch_loss / batches as f64,
            dev: report,
            score,
            trainable: trainable.iter().map(|s| s.to_string()).collect(),
            frozen: before.keys().cloned().collect(),
        });
        let scores: Vec<f64> = history.iter().map(|h| h.score).collect();
        if should_stop(&scores, schedule) {
            break;
        }
    }
    let (best_epoch, _, mut model) = best.expect("at least one epoch");
    model.zero_grad();
    Ok(FitOutcome {
        model,
        best_epoch,
        history,
        lr_trace,
    })
}
