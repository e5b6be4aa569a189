//! Structural checks on the model, shared by the contract tests and the
//! acceptance run.

use grasp::evalkit::{predict, threshold_logits, two_pass};
use grasp::geometry::BinaryMask;
use grasp::model::{network, ForwardTrace, GraspConfig, GraspModel, ModelSeeds, ParamGroup};
use grasp::synthdata::SceneInstance;
use grasp::tensor::{Tape, Tensor};
use grasp::training::{bce_on_tape, dice_on_tape, LossTargets};

use super::{mini_data, mini_model, randomize_trainable};

fn bits(t: &Tensor) -> Vec<u64> {
    t.data().iter().map(|v| v.to_bits()).collect()
}

fn same_outputs(a: &ForwardTrace, b: &ForwardTrace) -> bool {
    bits(&a.logits_amodal) == bits(&b.logits_amodal) && bits(&a.logits_occ) == bits(&b.logits_occ)
}

/// A randomized miniature model, so that no identity holds by accident of
/// zero-initialized parameters.
pub fn trained_like(seed: u64) -> GraspModel {
    let mut m = mini_model(seed);
    randomize_trainable(&mut m, seed + 1000);
    m
}

/// Whether a freshly initialized model ignores its visible-mask input: the
/// ground truth, an empty mask and a full mask give identical logits.
pub fn vm_invariant_at_init(config: &GraspConfig, seed: u64, data: &[SceneInstance]) -> bool {
    let model = GraspModel::new(config.clone(), ModelSeeds::from_base(seed)).unwrap();
    data.iter().all(|inst| {
        let (h, w) = inst.visible.dims();
        let reference = model.forward(&inst.image, &inst.visible).unwrap();
        [
            BinaryMask::empty(h, w),
            BinaryMask::full(h, w),
            inst.amodal.clone(),
        ]
        .iter()
        .all(|v| same_outputs(&reference, &model.forward(&inst.image, v).unwrap()))
    })
}

/// Whether enabling the SDF query direction leaves a fresh model's outputs
/// unchanged.
pub fn sdf_mod_invariant_at_init(config: &GraspConfig, seed: u64, data: &[SceneInstance]) -> bool {
    let plain = GraspModel::new(config.clone(), ModelSeeds::from_base(seed)).unwrap();
    let modulated = GraspModel::new(
        GraspConfig {
            sdf_query_mod: true,
            ..config.clone()
        },
        ModelSeeds::from_base(seed),
    )
    .unwrap();
    data.iter().all(|inst| {
        same_outputs(
            &plain.forward(&inst.image, &inst.visible).unwrap(),
            &modulated.forward(&inst.image, &inst.visible).unwrap(),
        )
    })
}

/// Counts of instances where forcing the gate to 1 (resp. 0) reproduces
/// decoding `H` (resp. `F′`) bit for bit, both as logits and as thresholded
/// predictions.
pub fn gate_identity_hits(model: &GraspModel, data: &[SceneInstance]) -> (usize, usize) {
    let ones = model.with_gate_override(Some(1.0)).unwrap();
    let zeros = model.with_gate_override(Some(0.0)).unwrap();
    let mut hits = (0, 0);
    for inst in data {
        let (h, w) = inst.visible.dims();
        let learned = model.forward(&inst.image, &inst.visible).unwrap();
        for (forced, source, count) in [
            (&ones, &learned.h, &mut hits.0),
            (&zeros, &learned.f_prime, &mut hits.1),
        ] {
            let trace = forced.forward(&inst.image, &inst.visible).unwrap();
            let (occ, amodal) = model.decode_tokens(source).unwrap();
            let predicted = predict(forced, &inst.image, &inst.visible, 0.5).unwrap();
            let expected = (
                threshold_logits(&amodal, h, w, 0.5).unwrap(),
                threshold_logits(&occ, h, w, 0.5).unwrap(),
            );
            if bits(&trace.logits_occ) == bits(&occ)
                && bits(&trace.logits_amodal) == bits(&amodal)
                && predicted == expected
            {
                *count += 1;
            }
        }
    }
    hits
}

/// Gradient of the occluded loss alone: the largest magnitude reaching any
/// amodal-branch parameter, and the largest reaching the occluded branch.
pub fn occluded_loss_gradients(model: &GraspModel, inst: &SceneInstance) -> (f64, f64) {
    let mut tape = Tape::new();
    let bound = model.store().bind(&mut tape, true);
    let inputs = model.inputs(&inst.image, &inst.visible).unwrap();
    let trace = model
        .forward_on_tape(&mut tape, &bound.slots, &inputs)
        .unwrap();
    let targets = LossTargets::new(&inst.amodal, &inst.visible).unwrap();
    let target = tape.constant(model.to_tokens(&targets.occluded));
    let bce = bce_on_tape(&mut tape, trace.logits_occ, target).unwrap();
    let dice = dice_on_tape(&mut tape, trace.logits_occ, target).unwrap();
    let loss = tape.add(bce, dice).unwrap();
    let grads = tape.backward(loss).unwrap();
    let mut amodal: f64 = 0.0;
    let mut occluded: f64 = 0.0;
    for (p, &v) in model.store().params().iter().zip(&bound.vars) {
        let peak = grads.get(v).map_or(0.0, |g| {
            g.data().iter().fold(0.0_f64, |m, x| m.max(x.abs()))
        });
        match p.group {
            ParamGroup::DecoderAmodal => amodal = amodal.max(peak),
            ParamGroup::DecoderOccluded => occluded = occluded.max(peak),
            _ => {}
        }
    }
    (amodal, occluded)
}

/// Largest change in amodal logits when `F_o` is shifted by `eps` while
/// `F_a` is held fixed.
pub fn amodal_response_to_occluded_features(
    model: &GraspModel,
    inst: &SceneInstance,
    eps: f64,
) -> f64 {
    let trace = model.forward(&inst.image, &inst.visible).unwrap();
    let amodal_logits = |f_o: Tensor| {
        let mut tape = Tape::new();
        let bound = model.store().bind(&mut tape, false);
        let f_o = tape.constant(f_o);
        let f_a = tape.constant(trace.f_a.clone());
        let (_, logits) = network::decode_heads(&mut tape, &bound.slots, f_o, f_a).unwrap();
        tape.value(logits).clone()
    };
    let base = amodal_logits(trace.f_o.clone());
    let mut shifted = trace.f_o.clone();
    shifted.data_mut().iter_mut().for_each(|x| *x += eps);
    let moved = amodal_logits(shifted);
    base.data()
        .iter()
        .zip(moved.data())
        .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
}

/// Outcome of the two-pass protocol on a set of instances.
pub struct TwoPassAudit {
    pub instances: usize,
    /// Traces holding exactly two passes.
    pub two_passes: usize,
    /// Traces whose `V_ref` equals the pixelwise `Â₁ ∧ ¬Ô₁` and whose second
    /// pass was fed it (or the original mask after a fallback).
    pub exact: usize,
    pub fallbacks: usize,
}

pub fn audit_two_pass(model: &GraspModel, data: &[SceneInstance]) -> TwoPassAudit {
    let mut audit = TwoPassAudit {
        instances: data.len(),
        two_passes: 0,
        exact: 0,
        fallbacks: 0,
    };
    for inst in data {
        let t = two_pass(model, &inst.image, &inst.visible, 0.5).unwrap();
        if t.passes.len() != 2 {
            continue;
        }
        audit.two_passes += 1;
        let (a, o) = (&t.passes[0].amodal, &t.passes[0].occluded);
        let (h, w) = a.dims();
        let expected = BinaryMask::from_fn(h, w, |r, c| a.get(r, c) && !o.get(r, c));
        let fed = if expected.is_empty() {
            &inst.visible
        } else {
            &expected
        };
        if t.v_ref == expected && t.fell_back == expected.is_empty() && &t.passes[1].v_input == fed
        {
            audit.exact += 1;
        }
        audit.fallbacks += usize::from(t.fell_back);
    }
    audit
}

/// A miniature model whose amodal head predicts nothing, forcing `V_ref = ∅`.
pub fn blind_amodal_model(seed: u64) -> GraspModel {
    let mut model = trained_like(seed);
    let id = model.store().slots().amo_head_b;
    model
        .store_mut()
        .get_mut(id)
        .data_mut()
        .iter_mut()
        .for_each(|b| *b = -100.0);
    model
}

/// Default two-pass audit inputs: a randomized model and a blind one, each on
/// a small miniature dataset.
pub fn two_pass_audits(seed: u64) -> (TwoPassAudit, TwoPassAudit) {
    let data = mini_data(seed + 500, 4);
    (
        audit_two_pass(&trained_like(seed), &data),
        audit_two_pass(&blind_amodal_model(seed), &data),
    )
}
