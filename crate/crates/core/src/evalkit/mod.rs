//! Evaluation: thresholded predictions, mask IoU metrics, the oracle and
//! standard visible-mask protocols, two-pass refinement, gate interventions
//! and stratified tables.

mod stats;

use std::fmt::Write as _;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use stats::{
    attention_stats, gate_stats, grid_position, in_bin, js_divergence, AttentionSample,
    AttentionStats, GateBin, GateSample, GateStats, GridPosition, Summary,
};

use crate::error::{GraspError, Result};
use crate::geometry::{iou, BinaryMask};
use crate::model::{ForwardTrace, GraspModel};
use crate::pgm::GrayImage;
use crate::seed::{self, Purpose};
use crate::synthdata::{perturb_vm, SceneInstance};
use crate::tensor::{sigmoid, Tensor};

pub const OCC_RATIO_BINS: [(f64, f64); 4] = [(0.0, 0.25), (0.25, 0.5), (0.5, 0.75), (0.75, 1.0)];
pub const VM_IOU_BINS: [(f64, f64); 5] = [
    (0.5, 0.65),
    (0.65, 0.75),
    (0.75, 0.85),
    (0.85, 0.95),
    (0.95, 1.0),
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Protocol {
    /// Ground-truth visible mask as input.
    Oracle,
    /// Perturbed visible mask standing in for an upstream detector.
    Standard,
}

impl FromStr for Protocol {
    type Err = GraspError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "oracle" => Ok(Protocol::Oracle),
            "standard" => Ok(Protocol::Standard),
            other => Err(GraspError::Config(format!("unknown protocol `{other}`"))),
        }
    }
}

/// What the occluded IoU compares against the ground-truth occluded mask.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OccOperand {
    #[default]
    OccludedHead,
    /// `Â ∖ V_gt`.
    AmodalMinusVisible,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalOptions {
    pub protocol: Protocol,
    pub gate_override: Option<f64>,
    pub two_pass: bool,
    /// Union the amodal prediction with the input visible mask.
    pub postprocess: bool,
    pub threshold: f64,
    pub occ_operand: OccOperand,
    /// Base seed of the standard-protocol perturbations.
    pub seed: u64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            protocol: Protocol::Oracle,
            gate_override: None,
            two_pass: false,
            postprocess: false,
            threshold: 0.5,
            occ_operand: OccOperand::OccludedHead,
            seed: 0,
        }
    }
}

impl EvalOptions {
    pub fn tag(&self) -> String {
        let base = match self.protocol {
            Protocol::Oracle => "oracle",
            Protocol::Standard => "standard",
        };
        match self.gate_override {
            Some(c) => format!("intervention {c} ({base})"),
            None => base.to_string(),
        }
    }
}

/// Masks from `sigmoid(logits) > threshold`, logits in raster order.
pub fn threshold_logits(
    logits: &Tensor,
    height: usize,
    width: usize,
    threshold: f64,
) -> Result<BinaryMask> {
    BinaryMask::new(
        height,
        width,
        logits
            .data()
            .iter()
            .map(|&x| sigmoid(x) > threshold)
            .collect(),
    )
}

/// `(Â, Ô)` for one forward pass.
pub fn predict(
    model: &GraspModel,
    image: &GrayImage,
    v_input: &BinaryMask,
    threshold: f64,
) -> Result<(BinaryMask, BinaryMask)> {
    let trace = model.forward(image, v_input)?;
    masks_of(&trace, image, threshold)
}

fn masks_of(
    trace: &ForwardTrace,
    image: &GrayImage,
    threshold: f64,
) -> Result<(BinaryMask, BinaryMask)> {
    let (h, w) = (image.height, image.width);
    Ok((
        threshold_logits(&trace.logits_amodal, h, w, threshold)?,
        threshold_logits(&trace.logits_occ, h, w, threshold)?,
    ))
}

pub fn postprocess_union(amodal: &BinaryMask, v_input: &BinaryMask) -> Result<BinaryMask> {
    amodal.union(v_input)
}

#[derive(Clone, Debug)]
pub struct PassRecord {
    pub v_input: BinaryMask,
    pub amodal: BinaryMask,
    pub occluded: BinaryMask,
    pub trace: ForwardTrace,
}

#[derive(Clone, Debug)]
pub struct TwoPassTrace {
    pub passes: Vec<PassRecord>,
    /// `Â₁ ∖ Ô₁`.
    pub v_ref: BinaryMask,
    /// Pass two was fed `v_pred` because `v_ref` came out empty.
    pub fell_back: bool,
}

impl TwoPassTrace {
    pub fn last(&self) -> &PassRecord {
        self.passes.last().expect("two passes recorded")
    }
}

fn run_pass(
    model: &GraspModel,
    image: &GrayImage,
    v_input: &BinaryMask,
    threshold: f64,
) -> Result<PassRecord> {
    let trace = model.forward(image, v_input)?;
    let (amodal, occluded) = masks_of(&trace, image, threshold)?;
    Ok(PassRecord {
        v_input: v_input.clone(),
        amodal,
        occluded,
        trace,
    })
}

/// Predicts with `v_pred`, refines the visible mask to `Â₁ ∖ Ô₁`, and
/// predicts once more. Never iterates further.
pub fn two_pass(
    model: &GraspModel,
    image: &GrayImage,
    v_pred: &BinaryMask,
    threshold: f64,
) -> Result<TwoPassTrace> {
    let first = run_pass(model, image, v_pred, threshold)?;
    let v_ref = first.amodal.diff(&first.occluded)?;
    let fell_back = v_ref.is_empty();
    let second_input = if fell_back { v_pred } else { &v_ref };
    let second = run_pass(model, image, second_input, threshold)?;
    Ok(TwoPassTrace {
        passes: vec![first, second],
        v_ref,
        fell_back,
    })
}

/// Output of a predictor on one instance.
#[derive(Clone, Debug)]
pub struct Prediction {
    pub amodal: BinaryMask,
    pub occluded: BinaryMask,
    pub passes: usize,
    pub gate: Option<Vec<f64>>,
    pub attention: Option<AttentionSample>,
}

pub trait Predictor: Sync {
    /// Predicts amodal and occluded masks. Ground truth on `instance` is
    /// available to test stubs; real models read only the image.
    fn predict(&self, instance: &SceneInstance, v_input: &BinaryMask) -> Result<Prediction>;

    /// Token grid side, when gate values are reported.
    fn grid(&self) -> Option<usize> {
        None
    }
}

/// Returns the ground-truth masks.
pub struct GroundTruthStub;

impl Predictor for GroundTruthStub {
    fn predict(&self, instance: &SceneInstance, _: &BinaryMask) -> Result<Prediction> {
        Ok(Prediction {
            amodal: instance.amodal.clone(),
            occluded: instance.occluded.clone(),
            passes: 1,
            gate: None,
            attention: None,
        })
    }
}

/// Predicts nothing.
pub struct EmptyStub;

impl Predictor for EmptyStub {
    fn predict(&self, instance: &SceneInstance, _: &BinaryMask) -> Result<Prediction> {
        let (h, w) = instance.amodal.dims();
        Ok(Prediction {
            amodal: BinaryMask::empty(h, w),
            occluded: BinaryMask::empty(h, w),
            passes: 1,
            gate: None,
            attention: None,
        })
    }
}

pub struct ModelPredictor<'a> {
    pub model: &'a GraspModel,
    pub threshold: f64,
    pub two_pass: bool,
}

impl Predictor for ModelPredictor<'_> {
    fn predict(&self, instance: &SceneInstance, v_input: &BinaryMask) -> Result<Prediction> {
        let record = if self.two_pass {
            let mut t = two_pass(self.model, &instance.image, v_input, self.threshold)?;
            let passes = t.passes.len();
            let last = t.passes.pop().expect("two passes recorded");
            (last, passes)
        } else {
            (
                run_pass(self.model, &instance.image, v_input, self.threshold)?,
                1,
            )
        };
        let (rec, passes) = record;
        Ok(Prediction {
            amodal: rec.amodal,
            occluded: rec.occluded,
            passes,
            gate: Some(rec.trace.gate),
            attention: Some(AttentionSample {
                dbar: rec.trace.dbar,
                attn: rec.trace.attn_spm,
            }),
        })
    }

    fn grid(&self) -> Option<usize> {
        Some(self.model.config().grid())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstanceRow {
    pub index: usize,
    pub scene_seed: u64,
    pub depth: usize,
    pub full_iou: f64,
    /// `None` when the ground-truth occluded region is empty.
    pub occ_iou: Option<f64>,
    pub occ_ratio: f64,
    /// Overlap of the input visible mask with the ground truth (standard protocol).
    pub vm_iou: Option<f64>,
    pub mean_gate: Option<f64>,
    pub passes: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StratKey {
    OccRatio,
    VmIou,
}

impl FromStr for StratKey {
    type Err = GraspError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "occ_ratio" => Ok(StratKey::OccRatio),
            "vm_iou" => Ok(StratKey::VmIou),
            other => Err(GraspError::Config(format!(
                "unknown stratification key `{other}`"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stratum {
    pub lo: f64,
    pub hi: f64,
    pub n: usize,
    pub occ_miou: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StratumTable {
    pub key: StratKey,
    pub bins: Vec<Stratum>,
    /// Occluded instances whose key falls outside every bin.
    pub outside: usize,
}

fn mean(values: impl IntoIterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values
        .into_iter()
        .fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// Occluded-instance mean occluded IoU per bin.
pub fn stratify(rows: &[InstanceRow], key: StratKey, bins: &[(f64, f64)]) -> Result<StratumTable> {
    if bins.is_empty()
        || bins
            .iter()
            .any(|&(lo, hi)| lo.partial_cmp(&hi) != Some(std::cmp::Ordering::Less))
    {
        return Err(GraspError::Config("bins must be nonempty intervals".into()));
    }
    let mut keyed = Vec::new();
    for r in rows {
        let Some(occ) = r.occ_iou else { continue };
        let k = match key {
            StratKey::OccRatio => r.occ_ratio,
            StratKey::VmIou => r.vm_iou.ok_or_else(|| {
                GraspError::Config("rows carry no vm_iou; use the standard protocol".into())
            })?,
        };
        keyed.push((k, occ));
    }
    let table: Vec<Stratum> = bins
        .iter()
        .enumerate()
        .map(|(i, &(lo, hi))| {
            let last = i + 1 == bins.len();
            let members: Vec<f64> = keyed
                .iter()
                .filter(|(k, _)| in_bin(*k, lo, hi, last))
                .map(|&(_, o)| o)
                .collect();
            Stratum {
                lo,
                hi,
                n: members.len(),
                occ_miou: mean(members),
            }
        })
        .collect();
    let inside: usize = table.iter().map(|s| s.n).sum();
    Ok(StratumTable {
        key,
        bins: table,
        outside: keyed.len() - inside,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub version: String,
    pub tag: String,
    pub options: EvalOptions,
    pub n_instances: usize,
    pub n_occluded: usize,
    pub full_miou: f64,
    pub occ_miou: Option<f64>,
    pub by_occ_ratio: StratumTable,
    pub by_vm_iou: Option<StratumTable>,
    pub gate: Option<GateStats>,
    pub attention: Option<AttentionStats>,
    pub rows: Vec<InstanceRow>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<serde_json::Value>,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Per-instance rows; each line of `comment` becomes a leading `#` line.
    pub fn to_csv(&self, comment: Option<&str>) -> String {
        let mut s = String::new();
        write_comment(&mut s, comment);
        s.push_str("index,scene_seed,depth,full_iou,occ_iou,occ_ratio,vm_iou,mean_gate,passes\n");
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{}",
                r.index,
                r.scene_seed,
                r.depth,
                r.full_iou,
                opt(r.occ_iou),
                r.occ_ratio,
                opt(r.vm_iou),
                opt(r.mean_gate),
                r.passes
            );
        }
        s
    }
}

fn write_comment(s: &mut String, comment: Option<&str>) {
    if let Some(c) = comment {
        for line in c.lines() {
            let _ = writeln!(s, "# {line}");
        }
    }
}

/// Visible-mask input of instance `index` under `options`.
pub fn protocol_input(options: &EvalOptions, instance: &SceneInstance, index: usize) -> BinaryMask {
    match options.protocol {
        Protocol::Oracle => instance.visible.clone(),
        Protocol::Standard => perturb_vm(
            &instance.visible,
            seed::derive(options.seed, Purpose::Eval, index as u64),
        ),
    }
}

struct Scored {
    row: InstanceRow,
    gate: Option<Vec<f64>>,
    attention: Option<AttentionSample>,
}

fn score(
    predictor: &dyn Predictor,
    options: &EvalOptions,
    inst: &SceneInstance,
    index: usize,
) -> Result<Scored> {
    let v_input = protocol_input(options, inst, index);
    let p = predictor.predict(inst, &v_input)?;
    let amodal = if options.postprocess {
        postprocess_union(&p.amodal, &v_input)?
    } else {
        p.amodal
    };
    let occ_pred = match options.occ_operand {
        OccOperand::OccludedHead => p.occluded,
        OccOperand::AmodalMinusVisible => amodal.diff(&inst.visible)?,
    };
    let occ_iou = if inst.occluded.is_empty() {
        None
    } else {
        Some(iou(&occ_pred, &inst.occluded)?)
    };
    let vm_iou = match options.protocol {
        Protocol::Oracle => None,
        Protocol::Standard => Some(iou(&v_input, &inst.visible)?),
    };
    Ok(Scored {
        row: InstanceRow {
            index,
            scene_seed: inst.seed,
            depth: inst.depth,
            full_iou: iou(&amodal, &inst.amodal)?,
            occ_iou,
            occ_ratio: inst.occ_ratio,
            vm_iou,
            mean_gate: p.gate.as_ref().and_then(|g| mean(g.iter().copied())),
            passes: p.passes,
        },
        gate: p.gate,
        attention: p.attention,
    })
}

/// Scores `predictor` on every instance. The gate override in `options` is
/// the caller's to apply; see [`evaluate_model`].
pub fn evaluate(
    predictor: &dyn Predictor,
    instances: &[SceneInstance],
    options: &EvalOptions,
) -> Result<EvalReport> {
    if instances.is_empty() {
        return Err(GraspError::Invalid("evaluation set is empty".into()));
    }
    if !(0.0..1.0).contains(&options.threshold) {
        return Err(GraspError::Config(format!(
            "threshold {} outside [0, 1)",
            options.threshold
        )));
    }
    let scored: Vec<Scored> = instances
        .par_iter()
        .enumerate()
        .map(|(i, inst)| score(predictor, options, inst, i))
        .collect::<Result<_>>()?;

    let mut rows = Vec::with_capacity(scored.len());
    let mut gates = Vec::new();
    let mut attention = Vec::new();
    for s in scored {
        if let Some(g) = s.gate {
            gates.push(GateSample {
                occ_ratio: s.row.occ_ratio,
                gate: g,
            });
        }
        if let Some(a) = s.attention {
            attention.push(a);
        }
        rows.push(s.row);
    }
    let full_miou = mean(rows.iter().map(|r| r.full_iou)).expect("nonempty");
    let occ_miou = mean(rows.iter().filter_map(|r| r.occ_iou));
    let n_occluded = rows.iter().filter(|r| r.occ_iou.is_some()).count();
    let by_occ_ratio = stratify(&rows, StratKey::OccRatio, &OCC_RATIO_BINS)?;
    let by_vm_iou = match options.protocol {
        Protocol::Standard => Some(stratify(&rows, StratKey::VmIou, &VM_IOU_BINS)?),
        Protocol::Oracle => None,
    };
    let gate = match predictor.grid() {
        Some(g) if gates.len() == rows.len() => Some(gate_stats(&gates, g, &OCC_RATIO_BINS)),
        _ => None,
    };
    let attention = (attention.len() == rows.len()).then(|| attention_stats(&attention));
    Ok(EvalReport {
        version: crate::VERSION.to_string(),
        tag: options.tag(),
        options: options.clone(),
        n_instances: rows.len(),
        n_occluded,
        full_miou,
        occ_miou,
        by_occ_ratio,
        by_vm_iou,
        gate,
        attention,
        rows,
        provenance: None,
    })
}

/// Evaluates `model` with the options' gate override applied.
pub fn evaluate_model(
    model: &GraspModel,
    instances: &[SceneInstance],
    options: &EvalOptions,
) -> Result<EvalReport> {
    let model = model.with_gate_override(options.gate_override)?;
    let predictor = ModelPredictor {
        model: &model,
        threshold: options.threshold,
        two_pass: options.two_pass,
    };
    evaluate(&predictor, instances, options)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub gate_override: Option<f64>,
    pub full_miou: f64,
    pub occ_miou: Option<f64>,
    pub occ_by_ratio: Vec<Option<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub version: String,
    pub protocol: Protocol,
    pub rows: Vec<AblationRow>,
}

pub const INTERVENTIONS: [Option<f64>; 4] = [None, Some(0.0), Some(0.5), Some(1.0)];

/// Learned gate against constant gates 0, 0.5 and 1 on the same weights.
pub fn ablate(
    model: &GraspModel,
    instances: &[SceneInstance],
    options: &EvalOptions,
) -> Result<AblationTable> {
    let mut rows = Vec::with_capacity(INTERVENTIONS.len());
    for c in INTERVENTIONS {
        let opts = EvalOptions {
            gate_override: c,
            ..options.clone()
        };
        let r = evaluate_model(model, instances, &opts)?;
        rows.push(AblationRow {
            gate_override: c,
            full_miou: r.full_miou,
            occ_miou: r.occ_miou,
            occ_by_ratio: r.by_occ_ratio.bins.iter().map(|b| b.occ_miou).collect(),
        });
    }
    Ok(AblationTable {
        version: crate::VERSION.to_string(),
        protocol: options.protocol,
        rows,
    })
}

impl AblationTable {
    pub fn to_csv(&self, comment: Option<&str>) -> String {
        let mut s = String::new();
        write_comment(&mut s, comment);
        s.push_str("gate,full_miou,occ_miou");
        for (lo, hi) in OCC_RATIO_BINS {
            let _ = write!(s, ",occ_{lo}_{hi}");
        }
        s.push('\n');
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for r in &self.rows {
            let label = r
                .gate_override
                .map(|c| c.to_string())
                .unwrap_or_else(|| "learned".into());
            let _ = write!(s, "{label},{},{}", r.full_miou, opt(r.occ_miou));
            for v in &r.occ_by_ratio {
                let _ = write!(s, ",{}", opt(*v));
            }
            s.push('\n');
        }
        s
    }
}

/// Token-grid gate values as a `size×size` grayscale image, 255 at `s = 1`.
pub fn gate_heatmap(gate: &[f64], grid: usize, size: usize) -> Result<GrayImage> {
    if gate.len() != grid * grid || grid == 0 || !size.is_multiple_of(grid) {
        return Err(GraspError::dim(
            "gate_heatmap",
            &[grid * grid],
            &[gate.len()],
        ));
    }
    let cell = size / grid;
    let data = (0..size * size)
        .map(|i| {
            let (r, c) = (i / size / cell, i % size / cell);
            (gate[r * grid + c].clamp(0.0, 1.0) * 255.0).round() as u8
        })
        .collect();
    GrayImage::new(size, size, data)
}
