use halt_core::features::featurize_all;
use halt_core::model::{self, Batch, HaltModel, Mode};
use halt_core::synth;
use halt_core::training::{self, AdamHyper, AdamState, TrainConfig};
use halt_core::{FeatureSequence, HaltError};

fn easy_sets(n_train: usize, n_val: usize) -> (Vec<FeatureSequence>, Vec<FeatureSequence>) {
    let spec = synth::fixture_a();
    let [train, val, _] = synth::split_sets(&spec, "easy", [n_train, n_val, 1], 3).unwrap();
    (train, val)
}

fn quick_config(max_epochs: usize) -> TrainConfig {
    TrainConfig {
        max_epochs,
        seed: 4,
        ..synth::desk_train_config()
    }
}

#[test]
fn separable_set_is_learned() {
    let (train, val) = easy_sets(300, 100);
    let model = HaltModel::new(synth::desk_model_config(), 1).unwrap();
    let out = training::train(model, &train, &val, &quick_config(15)).unwrap();
    assert!(out.best_metric >= 0.95, "{:?}", out.log);
    let recomputed = training::validation_macro_f1(&out.best_model, &val).unwrap();
    assert!((recomputed - out.best_metric).abs() <= 1e-12);
    assert_eq!(out.best_model.metadata["weight_decay_mode"], "coupled");
}

#[test]
fn runs_are_reproducible() {
    let (train, val) = easy_sets(60, 20);
    let run = || {
        let model = HaltModel::new(synth::desk_model_config(), 9).unwrap();
        training::train(model, &train, &val, &quick_config(3)).unwrap()
    };
    let (a, b) = (run(), run());
    assert_eq!(a.log, b.log);
    assert_eq!(a.best_model.params, b.best_model.params);
    assert_eq!(a.log.len(), 3);
    assert_eq!(training::format_log(&a.log).lines().count(), 3);
}

#[test]
fn decreasing_monitor_stops_after_patience() {
    let (train, _) = easy_sets(8, 2);
    let model = HaltModel::new(synth::desk_model_config(), 2).unwrap();
    let mut calls = 0;
    let mut first = None;
    let cfg = TrainConfig {
        early_stop_patience: TrainConfig::default().early_stop_patience,
        ..quick_config(100)
    };
    let out = training::train_with_monitor(model, &train, &cfg, |m| {
        calls += 1;
        if calls == 1 {
            first = Some(m.params.clone());
        }
        Ok(1.0 - calls as f64 * 0.01)
    })
    .unwrap();
    assert_eq!(out.log.len(), 16);
    assert_eq!(out.best_epoch, 1);
    assert_eq!(Some(out.best_model.params), first);
}

#[test]
fn partial_batches_are_trained_and_lr_is_logged() {
    let (train, val) = easy_sets(37, 10);
    let model = HaltModel::new(synth::desk_model_config(), 2).unwrap();
    let cfg = TrainConfig {
        batch_size: 16,
        ..quick_config(2)
    };
    let out = training::train(model, &train, &val, &cfg).unwrap();
    assert!(out.log.iter().all(|e| e.lr == cfg.lr && e.train_loss.is_finite()));
}

#[test]
fn fixed_batch_loss_decreases_at_default_lr() {
    let (train, _) = easy_sets(64, 2);
    let refs: Vec<&FeatureSequence> = train.iter().collect();
    let batch = Batch::from_sequences(&refs);
    let defaults = TrainConfig::default();
    let mut mean = vec![0.0; 6];
    for seed in 0..5 {
        let mut m = HaltModel::new(synth::desk_model_config(), seed).unwrap();
        let mut state = AdamState::new(m.param_count());
        for step in 0..=5 {
            let lg = model::loss_and_grad(&m, &batch, Mode::Inference).unwrap();
            mean[step] += lg.loss / 5.0;
            if step == 5 {
                break;
            }
            let mut g = model::loss_and_grad(&m, &batch, Mode::Train { seed: step as u64 })
                .unwrap()
                .param_grads;
            training::clip_global_norm(&mut g, 1.0);
            training::adam_step(&mut m.params, &g, &mut state, defaults.lr, defaults.weight_decay, AdamHyper::default())
                .unwrap();
        }
    }
    assert!(mean.windows(2).all(|w| w[1] < w[0]), "{mean:?}");
}

#[test]
fn numeric_fault_keeps_last_checkpoint() {
    let (mut train, val) = easy_sets(10, 4);
    train[3].rows[0][0] = f64::NAN;
    let model = HaltModel::new(synth::desk_model_config(), 2).unwrap();
    let init = model.params.clone();
    let out = training::train(model, &train, &val, &quick_config(3)).unwrap();
    assert!(out.fault.as_deref().unwrap().contains("numeric"), "{:?}", out.fault);
    assert_eq!(out.best_model.params, init);
    assert!(out.log.is_empty());
}

#[test]
fn empty_validation_is_rejected() {
    let (train, _) = easy_sets(4, 2);
    let model = HaltModel::new(synth::desk_model_config(), 2).unwrap();
    let err = training::train(model, &train, &[], &quick_config(1)).unwrap_err();
    assert!(matches!(err, HaltError::Precondition(_)));
}

#[test]
fn invalid_config_is_rejected() {
    let (train, val) = easy_sets(4, 2);
    let model = HaltModel::new(synth::desk_model_config(), 2).unwrap();
    let cfg = TrainConfig {
        batch_size: 0,
        ..TrainConfig::default()
    };
    assert!(matches!(training::train(model, &train, &val, &cfg), Err(HaltError::Config(_))));
}

#[test]
fn featurized_emulator_sets_are_compatible() {
    let spec = synth::fixture_a();
    let seqs = featurize_all(&synth::generate(&spec, "qa", 4, 0).unwrap());
    let m = HaltModel::new(synth::desk_model_config(), 0).unwrap();
    for s in &seqs {
        model::check_compatible(&m, s).unwrap();
    }
}
