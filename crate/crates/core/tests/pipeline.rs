//! Model training, freezing contracts and the transfer pipelines.

mod common;

use common::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use slu_core::corpus::Vocabulary;
use slu_core::model::{replace_heads, InputLayer, SluConfig, SluModel, CRF, LABEL_HEADS};
use slu_core::nn::Params;
use slu_core::schedules::{group_lr, tlr_lr, ScheduleConfig};
use slu_core::train::{evaluate_model, fit, TrainOptions};
use slu_core::train_util::fingerprint;
use slu_core::transfer::{run, train_elmo_plus_st, train_elmol_plus_st, Condition, RunRecord};

fn opts(batch_size: usize) -> TrainOptions {
    TrainOptions {
        batch_size,
        seed: 9,
        ..TrainOptions::default()
    }
}

#[test]
fn memorizes_a_small_training_set() {
    let data = memorization_set();
    let vocab = Vocabulary::build(data.iter().map(|u| &u.tokens), 1);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let input = InputLayer::trainable(vocab, 16, &mut rng);
    let config = SluConfig {
        hidden: 16,
        dropout: 0.0,
        l2: 0.0,
        ..SluConfig::default()
    };
    let model = SluModel::new(toy_space(), input, config, 2).unwrap();
    let schedule = ScheduleConfig {
        max_epochs: 60,
        patience: 0,
        ..ScheduleConfig::vanilla(0.01)
    };
    let out = fit(model, &data, &data, &schedule, &opts(2)).unwrap();
    let report = evaluate_model(&out.model, &data).unwrap();
    assert_eq!(report.ica, 1.0, "{report}");
    assert_eq!(report.ef1, 1.0, "{report}");
    assert_eq!(report.ser, 0.0);
}

#[test]
fn frozen_elmo_lm_is_bit_identical_after_training() {
    let model = toy_elmo(3);
    let before = model.frozen_lm().unwrap().clone();
    let print = fingerprint(&before, &[]);
    let schedule = ScheduleConfig {
        max_epochs: 3,
        ..ScheduleConfig::vanilla(0.01)
    };
    let data = memorization_set();
    let out = fit(model, &data, &data, &schedule, &opts(4)).unwrap();
    let after = out.model.frozen_lm().unwrap();
    assert_eq!(*after, before);
    assert_eq!(fingerprint(after, &[]), print);
    // The mixing weights are trainable and do move.
    let mut moved = false;
    out.model.mixing.as_ref().unwrap().visit("", &mut |_, p| moved |= p.value.iter().any(|v| *v != 0.0 && *v != 1.0));
    assert!(moved);
}

#[test]
fn gradual_unfreezing_keeps_lower_groups_bit_identical() {
    let model = toy_elmol(4);
    let lower = ["embedding", "shared_birnn"];
    let print = fingerprint(&model, &lower);
    let upper_print = fingerprint(&model, &["et_birnn", "ic_birnn", "crf"]);
    let data = memorization_set();
    let schedule = ScheduleConfig {
        max_epochs: 2,
        patience: 0,
        ..ScheduleConfig::guf(0.01, 2)
    };
    let out = fit(model.clone(), &data, &data, &schedule, &opts(4)).unwrap();
    for h in &out.history {
        assert!(h.frozen.iter().any(|g| g == "shared_birnn"));
        assert!(!h.trainable.iter().any(|g| g == "shared_birnn"));
    }
    assert_eq!(fingerprint(&out.model, &lower), print);
    assert_ne!(fingerprint(&out.model, &["et_birnn", "ic_birnn", "crf"]), upper_print);

    let schedule = ScheduleConfig { max_epochs: 3, ..schedule };
    let out = fit(model, &data, &data, &schedule, &opts(4)).unwrap();
    assert_eq!(out.history[2].frozen, Vec::<String>::new());
    assert!(out.history[2].trainable.iter().any(|g| g == "shared_birnn"));
}

#[test]
fn schedule_composition_matches_hand_expansion() {
    let schedule = ScheduleConfig {
        max_epochs: 5,
        patience: 0,
        ..ScheduleConfig::full(0.003, 2, 0.004)
    };
    let data = memorization_set();
    let out = fit(toy_no_ut(5), &data, &data, &schedule, &opts(3)).unwrap();
    let batches = data.len().div_ceil(3);
    let total = (schedule.max_epochs - schedule.unfreeze_epoch) * batches;
    assert_eq!(out.lr_trace.len(), schedule.max_epochs * batches);
    for p in &out.lr_trace {
        match p.phase_step {
            None => {
                assert!(p.epoch < 2);
                assert_eq!(p.upper, 0.003);
            }
            Some(step) => {
                let hand = hand_tlr(step, total, 0.004, 10.0, 0.125);
                assert!((p.upper - hand).abs() <= 1e-15, "step {step}: {} vs {hand}", p.upper);
                assert_eq!(p.upper, tlr_lr(step, total, &schedule).unwrap());
            }
        }
        assert_eq!(p.lower, p.upper / 2.5);
        assert_eq!(group_lr("shared_birnn", p.upper, &schedule).unwrap(), p.lower);
        assert_eq!(group_lr("crf", p.upper, &schedule).unwrap(), p.upper);
    }
    let steps: Vec<usize> = out.lr_trace.iter().filter_map(|p| p.phase_step).collect();
    assert_eq!(steps, (0..total).collect::<Vec<_>>());
}

#[test]
fn replace_heads_resizes_to_the_target_labels() {
    let (source, target) = transfer_datasets();
    let lm = transfer_lm(1);
    let bundle = lm.export_shared_layer().unwrap();
    let model = SluModel::from_shared_layer(source.label_space.clone(), &bundle, SluConfig { hidden: 8, ..SluConfig::default() }, 1).unwrap();
    let keep: Vec<&str> = model.groups().into_iter().filter(|g| !LABEL_HEADS.contains(g)).collect();
    let swapped = replace_heads(&model, target.label_space.clone(), &keep, 2).unwrap();
    assert_eq!(swapped.intent.bias.value.len(), target.label_space.intents().len());
    assert_eq!(swapped.et_proj.bias.value.len(), target.label_space.num_tags());
    assert_eq!(fingerprint(&swapped, &keep), fingerprint(&model, &keep));
    let pred = swapped.predict(&target.test[0].tokens).unwrap();
    assert!(target.label_space.intent_index(&pred.intent).is_some());
    assert!(replace_heads(&model, target.label_space.clone(), &[CRF], 2).is_err());
    assert!(replace_heads(&model, target.label_space.clone(), &["bogus"], 2).is_err());
}

#[test]
fn elmol_plus_st_runs_three_stages_with_discriminative_rates() {
    let spec = transfer_spec(Condition::ElmolSt, Some(transfer_lm(1)), 1);
    let out = train_elmol_plus_st(&spec).unwrap();
    let r = &out.record;
    assert_eq!(r.stage_names(), ["lm-pretrain", "source-finetune", "target-finetune"]);
    let source = spec.source.as_ref().unwrap();
    assert_eq!(r.source.as_ref(), Some(&source.name));
    assert_eq!(r.stages[1].dataset, source.name);
    assert_eq!(r.stages[2].dataset, spec.target.name);
    for stage in &r.stages[1..] {
        assert!(!stage.lr_trace.is_empty());
        for p in &stage.lr_trace {
            assert_eq!(p.lower, p.upper / 2.5);
        }
        let first = &stage.epochs[0];
        assert!(first.frozen.iter().any(|g| g == "shared_birnn"));
        assert!(first.frozen.iter().any(|g| g == "embedding"));
    }
    assert_eq!(
        out.model.intent.bias.value.len(),
        spec.target.label_space.intents().len()
    );
    assert!(train_elmo_plus_st(&spec).is_err());
}

fn zero_clock(mut r: RunRecord) -> RunRecord {
    r.wall_clock_secs = 0.0;
    r
}

#[test]
fn runs_are_deterministic_given_the_seed() {
    let lm = transfer_lm(1);
    for condition in [Condition::NoUt, Condition::ElmolSt] {
        let spec = transfer_spec(condition, Some(lm.clone()), 4);
        let a = zero_clock(run(&spec).unwrap().record);
        let b = zero_clock(run(&spec).unwrap().record);
        assert_eq!(a, b, "{condition}");
    }
}

#[test]
fn elmo_plus_st_keeps_the_lm_frozen_across_stages() {
    let lm = transfer_lm(2);
    let print = fingerprint(lm.as_ref(), &[]);
    let spec = transfer_spec(Condition::ElmoSt, Some(lm.clone()), 2);
    let out = train_elmo_plus_st(&spec).unwrap();
    let prints: Vec<u64> = out.record.stages.iter().filter_map(|s| s.lm_fingerprint).collect();
    assert_eq!(prints, vec![print; 3]);
    assert_eq!(*out.model.frozen_lm().unwrap(), *lm);
}

#[test]
fn pipelines_reject_missing_inputs() {
    let spec = transfer_spec(Condition::Elmol, None, 1);
    assert!(run(&spec).is_err());
    let spec = transfer_spec(Condition::Elmol, Some(transfer_lm(2)), 1);
    assert!(run(&spec).is_err());
    let mut spec = transfer_spec(Condition::NoUtSt, None, 1);
    spec.source = None;
    assert!(run(&spec).is_err());
    let spec = transfer_spec(Condition::Pretrained, None, 1);
    assert!(run(&spec).is_err());
}
