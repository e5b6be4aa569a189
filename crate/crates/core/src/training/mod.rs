//! Losses, optimizer and the training loop.

mod loss;
mod optim;

use std::fmt::Write as _;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use loss::{
    bce, bce_on_tape, dice, dice_on_tape, total_loss, LossBreakdown, LossTargets, LossVars,
    DICE_SMOOTHING, OCCLUDED_WEIGHT,
};
pub use optim::{cosine_lr, AdamW, AdamWSettings};

use crate::error::{GraspError, Result};
use crate::geometry::BinaryMask;
use crate::model::{GraspModel, ModelInputs};
use crate::seed::{self, Purpose};
use crate::synthdata::{mixed_vm, SceneInstance};
use crate::tensor::{Tape, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Initial learning rate, decayed to zero along a cosine.
    pub lr: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Probability of feeding a perturbed visible mask instead of the clean one.
    pub noise_probability: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub occluded_weight: f64,
    /// Emit a checkpoint event every this many steps; 0 disables.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 3e-3,
            steps: 2000,
            batch_size: 8,
            seed: 0,
            noise_probability: 0.5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
            occluded_weight: OCCLUDED_WEIGHT,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(GraspError::Config(m.to_string()));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("learning rate must be positive");
        }
        if self.steps == 0 {
            return bad("at least one step is required");
        }
        if self.batch_size == 0 {
            return bad("batch size must be positive");
        }
        if !(0.0..=1.0).contains(&self.noise_probability) {
            return bad("noise probability must lie in [0, 1]");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.eps <= 0.0
        {
            return bad("invalid Adam moment settings");
        }
        if self.weight_decay < 0.0 || self.occluded_weight < 0.0 {
            return bad("weights must be nonnegative");
        }
        Ok(())
    }

    pub fn adamw(&self) -> AdamWSettings {
        AdamWSettings {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }
}

/// One row of the loss curve.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    /// 1-based step index.
    pub step: usize,
    pub lr: f64,
    pub loss: LossBreakdown,
}

pub enum TrainEvent<'a> {
    Step(&'a LossRecord),
    Checkpoint { step: usize, model: &'a GraspModel },
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: GraspModel,
    pub curve: Vec<LossRecord>,
}

/// Gradients of one instance's total loss, one entry per parameter in store
/// order (`None` where no gradient reaches).
pub fn instance_gradients(
    model: &GraspModel,
    inputs: &ModelInputs,
    targets: &LossTargets,
    occluded_weight: f64,
) -> Result<(Vec<Option<Tensor>>, LossBreakdown)> {
    let mut tape = Tape::new();
    let bound = model.store().bind(&mut tape, true);
    let trace = model.forward_on_tape(&mut tape, &bound.slots, inputs)?;
    let amodal = tape.constant(model.to_tokens(&targets.amodal));
    let occluded = tape.constant(model.to_tokens(&targets.occluded));
    let losses = total_loss(
        &mut tape,
        trace.logits_amodal,
        trace.logits_occ,
        amodal,
        occluded,
        occluded_weight,
    )?;
    let breakdown = losses.breakdown(&tape);
    let mut grads = tape.backward(losses.l_total)?;
    Ok((
        bound.vars.iter().map(|&v| grads.take(v)).collect(),
        breakdown,
    ))
}

/// Mean loss breakdown of `model` on given inputs and targets, without gradients.
pub fn evaluate_loss(
    model: &GraspModel,
    inputs: &ModelInputs,
    targets: &LossTargets,
    occluded_weight: f64,
) -> Result<LossBreakdown> {
    let mut tape = Tape::new();
    let bound = model.store().bind(&mut tape, false);
    let trace = model.forward_on_tape(&mut tape, &bound.slots, inputs)?;
    let amodal = tape.constant(model.to_tokens(&targets.amodal));
    let occluded = tape.constant(model.to_tokens(&targets.occluded));
    let losses = total_loss(
        &mut tape,
        trace.logits_amodal,
        trace.logits_occ,
        amodal,
        occluded,
        occluded_weight,
    )?;
    Ok(losses.breakdown(&tape))
}

/// Input mask for instance slot `slot` of step `step`.
pub fn step_visible_mask(
    cfg: &TrainConfig,
    visible: &BinaryMask,
    step: usize,
    slot: usize,
) -> BinaryMask {
    let index = (step * cfg.batch_size + slot) as u64;
    mixed_vm(
        visible,
        seed::derive(cfg.seed, Purpose::Noise, index),
        cfg.noise_probability,
    )
}

/// Instance indices of step `step`, drawn uniformly with replacement.
pub fn batch_indices(cfg: &TrainConfig, step: usize, n: usize) -> Vec<usize> {
    let mut rng = seed::rng(seed::derive(cfg.seed, Purpose::Batch, step as u64));
    (0..cfg.batch_size)
        .map(|_| rng.random_range(0..n))
        .collect()
}

/// Runs `cfg.steps` AdamW steps on mean-reduced minibatch losses.
///
/// Per-instance gradients may be computed in parallel; they are summed in
/// batch order, so results are bit-reproducible for a given seed.
pub fn train(
    mut model: GraspModel,
    data: &[SceneInstance],
    cfg: &TrainConfig,
    mut on_event: impl FnMut(TrainEvent<'_>) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(GraspError::Invalid("training split is empty".into()));
    }
    let mut opt = AdamW::new(model.store(), cfg.adamw());
    let mut curve = Vec::with_capacity(cfg.steps);
    let n_params = model.store().params().len();

    for step in 0..cfg.steps {
        let lr = cosine_lr(cfg.lr, step, cfg.steps);
        let batch = batch_indices(cfg, step, data.len());
        let results: Vec<Result<(Vec<Option<Tensor>>, LossBreakdown)>> = batch
            .par_iter()
            .enumerate()
            .map(|(slot, &i)| {
                let inst = &data[i];
                let vm = step_visible_mask(cfg, &inst.visible, step, slot);
                let inputs = model.inputs(&inst.image, &vm)?;
                let targets = LossTargets::new(&inst.amodal, &inst.visible)?;
                instance_gradients(&model, &inputs, &targets, cfg.occluded_weight)
            })
            .collect();

        let mut sum: Vec<Option<Tensor>> = vec![None; n_params];
        let mut parts = Vec::with_capacity(batch.len());
        for r in results {
            let (grads, breakdown) = r?;
            parts.push(breakdown);
            for (acc, g) in sum.iter_mut().zip(grads) {
                let Some(g) = g else { continue };
                match acc {
                    Some(a) => a
                        .data_mut()
                        .iter_mut()
                        .zip(g.data())
                        .for_each(|(x, y)| *x += y),
                    None => *acc = Some(g),
                }
            }
        }
        let scale = 1.0 / batch.len() as f64;
        for g in sum.iter_mut().flatten() {
            g.data_mut().iter_mut().for_each(|x| *x *= scale);
        }
        let loss = LossBreakdown::mean(&parts);
        if !loss.is_finite() || sum.iter().flatten().any(|g| !g.is_finite()) {
            return Err(GraspError::NonFiniteLoss {
                step: step + 1,
                breakdown: loss.to_string(),
            });
        }
        opt.step(model.store_mut(), &sum, lr);

        let record = LossRecord {
            step: step + 1,
            lr,
            loss,
        };
        on_event(TrainEvent::Step(&record))?;
        curve.push(record);
        if cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0 {
            on_event(TrainEvent::Checkpoint {
                step: step + 1,
                model: &model,
            })?;
        }
    }
    Ok(TrainOutcome { model, curve })
}

/// Loss curve as CSV: `step,lr,` followed by every breakdown field. Each
/// line of `comment` becomes a leading `#` line.
pub fn loss_csv(curve: &[LossRecord], comment: Option<&str>) -> String {
    let mut s = String::new();
    if let Some(c) = comment {
        for line in c.lines() {
            let _ = writeln!(s, "# {line}");
        }
    }
    s.push_str("step,lr");
    for f in LossBreakdown::FIELDS {
        s.push(',');
        s.push_str(f);
    }
    s.push('\n');
    for r in curve {
        let _ = write!(s, "{},{}", r.step, r.lr);
        for v in r.loss.values() {
            let _ = write!(s, ",{v}");
        }
        s.push('\n');
    }
    s
}
