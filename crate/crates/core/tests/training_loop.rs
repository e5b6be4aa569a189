mod common;

use common::{mini_data, mini_model};
use grasp::model::{encode_checkpoint, ParamGroup};
use grasp::synthdata::SceneInstance;
use grasp::training::{
    bce, cosine_lr, dice, evaluate_loss, train, AdamW, AdamWSettings, LossBreakdown, LossTargets,
    TrainConfig, TrainEvent, TrainOutcome,
};
use grasp::GraspError;
use proptest::prelude::*;

fn quick(steps: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        steps,
        batch_size: 4,
        seed,
        ..TrainConfig::default()
    }
}

fn run(data: &[SceneInstance], cfg: &TrainConfig) -> TrainOutcome {
    train(mini_model(1), data, cfg, |_| Ok(())).unwrap()
}

fn assert_identity(b: &LossBreakdown) {
    assert!(
        (b.l_total - (b.l_amodal + 1.5 * (b.bce_occ + b.dice_occ))).abs() < 1e-12,
        "{b}"
    );
    assert!(
        (b.l_amodal - (b.bce_amodal + b.dice_amodal)).abs() < 1e-12,
        "{b}"
    );
    assert!(
        (b.l_occluded - 1.5 * (b.bce_occ + b.dice_occ)).abs() < 1e-12,
        "{b}"
    );
}

#[test]
fn training_is_bit_reproducible() {
    let data = mini_data(50, 6);
    let a = run(&data, &quick(8, 3));
    let b = run(&data, &quick(8, 3));
    assert_eq!(
        encode_checkpoint(&a.model, 8, None),
        encode_checkpoint(&b.model, 8, None)
    );
    assert_eq!(a.curve, b.curve);
    let c = run(&data, &quick(8, 4));
    assert_ne!(a.model, c.model);
}

#[test]
fn frozen_encoder_is_never_updated() {
    let data = mini_data(51, 4);
    let before = mini_model(1);
    let after = run(&data, &quick(5, 0)).model;
    for (p, q) in before.store().params().iter().zip(after.store().params()) {
        assert_eq!(
            p.group == ParamGroup::EncoderFrozen,
            p.value == q.value,
            "{}",
            p.name
        );
    }
}

#[test]
fn nan_parameter_stops_training() {
    let data = mini_data(52, 2);
    let mut model = mini_model(1);
    let id = model.store().slots().proj_w;
    model.store_mut().get_mut(id).data_mut()[0] = f64::NAN;
    let err = train(model, &data, &quick(3, 0), |_| Ok(())).unwrap_err();
    assert!(
        matches!(err, GraspError::NonFiniteLoss { step: 1, .. }),
        "{err}"
    );
}

#[test]
fn breakdown_satisfies_weighting_identity() {
    let data = mini_data(53, 4);
    let out = run(&data, &quick(5, 1));
    out.curve.iter().for_each(|r| assert_identity(&r.loss));
    for inst in &data {
        let inputs = out.model.inputs(&inst.image, &inst.visible).unwrap();
        let targets = LossTargets::new(&inst.amodal, &inst.visible).unwrap();
        assert_identity(&evaluate_loss(&out.model, &inputs, &targets, 1.5).unwrap());
    }
}

#[test]
fn zero_logits_cost_ln2() {
    for n in [1usize, 2, 7, 64, 256] {
        let target: Vec<f64> = (0..n).map(|i| (i % 3 == 0) as u8 as f64).collect();
        assert_eq!(
            bce(&vec![0.0; n], &target).unwrap(),
            std::f64::consts::LN_2,
            "n = {n}"
        );
    }
}

#[test]
fn dice_hand_values() {
    // p = ½ everywhere, half the pixels set: 1 − (2·1 + ε)/(2 + 2 + ε).
    let d = dice(&[0.0; 4], &[1.0, 1.0, 0.0, 0.0]).unwrap();
    assert!((d - 0.5).abs() < 1e-6);
    let perfect = dice(&[50.0, 50.0, -50.0], &[1.0, 1.0, 0.0]).unwrap();
    assert!(perfect.abs() < 1e-12);
}

#[test]
fn loss_falls_during_training() {
    let data = mini_data(54, 16);
    let cfg = TrainConfig {
        steps: 60,
        batch_size: 8,
        ..TrainConfig::default()
    };
    let out = run(&data, &cfg);
    let mean = |r: &[grasp::training::LossRecord]| {
        r.iter().map(|x| x.loss.l_total).sum::<f64>() / r.len() as f64
    };
    let (first, last) = (mean(&out.curve[..10]), mean(&out.curve[50..]));
    assert!(last < first, "{first} -> {last}");
}

#[test]
fn checkpoint_events_follow_interval() {
    let data = mini_data(55, 2);
    let cfg = TrainConfig {
        checkpoint_every: 3,
        ..quick(7, 0)
    };
    let mut seen = Vec::new();
    train(mini_model(1), &data, &cfg, |e| {
        if let TrainEvent::Checkpoint { step, .. } = e {
            seen.push(step);
        }
        Ok(())
    })
    .unwrap();
    assert_eq!(seen, vec![3, 6]);
}

#[test]
fn invalid_settings_are_config_errors() {
    let data = mini_data(56, 1);
    for cfg in [
        TrainConfig {
            lr: 0.0,
            ..quick(1, 0)
        },
        TrainConfig {
            steps: 0,
            ..quick(1, 0)
        },
        TrainConfig {
            noise_probability: 2.0,
            ..quick(1, 0)
        },
    ] {
        let err = train(mini_model(1), &data, &cfg, |_| Ok(())).unwrap_err();
        assert!(matches!(err, GraspError::Config(_)));
    }
    assert!(train(mini_model(1), &[], &quick(1, 0), |_| Ok(())).is_err());
}

#[test]
fn cosine_schedule_endpoints() {
    assert_eq!(cosine_lr(3e-3, 0, 100), 3e-3);
    assert!((cosine_lr(3e-3, 50, 100) - 1.5e-3).abs() < 1e-18);
    assert_eq!(cosine_lr(3e-3, 100, 100), 0.0);
}

proptest! {
    #[test]
    fn cosine_schedule_is_monotone(total in 1usize..500, step in 0usize..500) {
        prop_assert!(cosine_lr(1.0, step + 1, total) <= cosine_lr(1.0, step, total));
    }
}

#[test]
fn first_adamw_step_matches_hand_update() {
    let mut model = mini_model(2);
    let settings = AdamWSettings {
        beta1: 0.9,
        beta2: 0.999,
        eps: 1e-8,
        weight_decay: 0.1,
    };
    let before: Vec<_> = model.store().params().to_vec();
    let grads: Vec<_> = before
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let mut g = p.value.clone();
            g.data_mut()
                .iter_mut()
                .enumerate()
                .for_each(|(j, x)| *x = ((i + j) % 5) as f64 - 2.0);
            Some(g)
        })
        .collect();
    let mut opt = AdamW::new(model.store(), settings);
    let lr = 0.01;
    opt.step(model.store_mut(), &grads, lr);
    for ((p, q), g) in before.iter().zip(model.store().params()).zip(&grads) {
        let decay = if p.value.rank() >= 2 { 0.1 } else { 0.0 };
        for ((w0, w1), gj) in p
            .value
            .data()
            .iter()
            .zip(q.value.data())
            .zip(g.as_ref().unwrap().data())
        {
            // After one step both bias-corrected moments equal the raw gradient.
            let expected = if p.group == ParamGroup::EncoderFrozen {
                *w0
            } else {
                w0 - lr * (gj / (gj.abs() + 1e-8) + decay * w0)
            };
            assert!((w1 - expected).abs() < 1e-12, "{}", p.name);
        }
    }
    assert_eq!(opt.steps_taken(), 1);
}
