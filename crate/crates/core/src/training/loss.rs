//! Segmentation losses on the tape.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{GraspError, Result};
use crate::geometry::BinaryMask;
use crate::tensor::{Tape, Tensor, Var};

pub const DICE_SMOOTHING: f64 = 1e-6;
pub const OCCLUDED_WEIGHT: f64 = 1.5;

/// Mean binary cross-entropy in logit form, `mean(softplus(x) − x·t)`.
pub fn bce_on_tape(tape: &mut Tape, logits: Var, target: Var) -> Result<Var> {
    let sp = tape.softplus(logits);
    let xt = tape.mul(logits, target)?;
    let per_pixel = tape.sub(sp, xt)?;
    Ok(tape.mean(per_pixel))
}

/// `1 − (2Σpg + ε)/(Σp + Σg + ε)` with `p = σ(logits)`.
pub fn dice_on_tape(tape: &mut Tape, logits: Var, target: Var) -> Result<Var> {
    let g_total = tape.value(target).sum();
    let p = tape.sigmoid(logits);
    let pg = tape.mul(p, target)?;
    let inter = tape.sum(pg);
    let num = tape.scale(inter, 2.0);
    let num = tape.shift(num, DICE_SMOOTHING);
    let p_total = tape.sum(p);
    let den = tape.shift(p_total, g_total + DICE_SMOOTHING);
    let ratio = tape.div(num, den)?;
    let neg = tape.scale(ratio, -1.0);
    Ok(tape.shift(neg, 1.0))
}

fn evaluate(
    logits: &[f64],
    target: &[f64],
    f: fn(&mut Tape, Var, Var) -> Result<Var>,
) -> Result<f64> {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::vector(logits.to_vec()));
    let t = tape.constant(Tensor::vector(target.to_vec()));
    let out = f(&mut tape, x, t)?;
    Ok(tape.value(out).item())
}

/// Value of [`bce_on_tape`] for plain slices.
pub fn bce(logits: &[f64], target: &[f64]) -> Result<f64> {
    evaluate(logits, target, bce_on_tape)
}

/// Value of [`dice_on_tape`] for plain slices.
pub fn dice(logits: &[f64], target: &[f64]) -> Result<f64> {
    evaluate(logits, target, dice_on_tape)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub bce_amodal: f64,
    pub dice_amodal: f64,
    pub bce_occ: f64,
    pub dice_occ: f64,
    pub l_amodal: f64,
    pub l_occluded: f64,
    pub l_total: f64,
}

impl LossBreakdown {
    pub const FIELDS: [&'static str; 7] = [
        "bce_amodal",
        "dice_amodal",
        "bce_occ",
        "dice_occ",
        "l_amodal",
        "l_occluded",
        "l_total",
    ];

    pub fn values(&self) -> [f64; 7] {
        [
            self.bce_amodal,
            self.dice_amodal,
            self.bce_occ,
            self.dice_occ,
            self.l_amodal,
            self.l_occluded,
            self.l_total,
        ]
    }

    pub fn is_finite(&self) -> bool {
        self.values().iter().all(|v| v.is_finite())
    }

    /// Field-wise mean.
    pub fn mean(items: &[LossBreakdown]) -> LossBreakdown {
        let n = items.len().max(1) as f64;
        let mut acc = [0.0; 7];
        for it in items {
            for (a, v) in acc.iter_mut().zip(it.values()) {
                *a += v;
            }
        }
        LossBreakdown {
            bce_amodal: acc[0] / n,
            dice_amodal: acc[1] / n,
            bce_occ: acc[2] / n,
            dice_occ: acc[3] / n,
            l_amodal: acc[4] / n,
            l_occluded: acc[5] / n,
            l_total: acc[6] / n,
        }
    }
}

impl fmt::Display for LossBreakdown {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, (name, v)) in Self::FIELDS.iter().zip(self.values()).enumerate() {
            if i > 0 {
                f.write_str(" ")?;
            }
            write!(f, "{name}={v}")?;
        }
        Ok(())
    }
}

/// Supervision targets in raster order. The occluded target is always
/// `A ∖ V` of the ground truth, whatever mask the network was fed.
#[derive(Clone, Debug)]
pub struct LossTargets {
    pub amodal: Vec<f64>,
    pub occluded: Vec<f64>,
}

impl LossTargets {
    pub fn new(amodal: &BinaryMask, visible_gt: &BinaryMask) -> Result<Self> {
        if !visible_gt.is_subset_of(amodal)? {
            return Err(GraspError::Integrity(
                "ground-truth visible mask is not contained in the amodal mask".into(),
            ));
        }
        let occluded = amodal.diff(visible_gt)?;
        let as_f64 = |m: &BinaryMask| m.bits().iter().map(|&b| b as u8 as f64).collect();
        Ok(LossTargets {
            amodal: as_f64(amodal),
            occluded: as_f64(&occluded),
        })
    }
}

/// Loss nodes recorded on a tape.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub bce_amodal: Var,
    pub dice_amodal: Var,
    pub bce_occ: Var,
    pub dice_occ: Var,
    pub l_amodal: Var,
    pub l_occluded: Var,
    pub l_total: Var,
}

impl LossVars {
    pub fn breakdown(&self, tape: &Tape) -> LossBreakdown {
        let v = |x: Var| tape.value(x).item();
        LossBreakdown {
            bce_amodal: v(self.bce_amodal),
            dice_amodal: v(self.dice_amodal),
            bce_occ: v(self.bce_occ),
            dice_occ: v(self.dice_occ),
            l_amodal: v(self.l_amodal),
            l_occluded: v(self.l_occluded),
            l_total: v(self.l_total),
        }
    }
}

/// `L_total = (bce_a + dice_a) + w·(bce_o + dice_o)`, with logits and
/// targets in the same (token) layout.
pub fn total_loss(
    tape: &mut Tape,
    logits_amodal: Var,
    logits_occ: Var,
    amodal_target: Var,
    occluded_target: Var,
    occluded_weight: f64,
) -> Result<LossVars> {
    let bce_amodal = bce_on_tape(tape, logits_amodal, amodal_target)?;
    let dice_amodal = dice_on_tape(tape, logits_amodal, amodal_target)?;
    let bce_occ = bce_on_tape(tape, logits_occ, occluded_target)?;
    let dice_occ = dice_on_tape(tape, logits_occ, occluded_target)?;
    let l_amodal = tape.add(bce_amodal, dice_amodal)?;
    let occ_sum = tape.add(bce_occ, dice_occ)?;
    let l_occluded = tape.scale(occ_sum, occluded_weight);
    let l_total = tape.add(l_amodal, l_occluded)?;
    Ok(LossVars {
        bce_amodal,
        dice_amodal,
        bce_occ,
        dice_occ,
        l_amodal,
        l_occluded,
        l_total,
    })
}
