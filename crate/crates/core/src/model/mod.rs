//! The amodal segmentation network.
//!
//! Pipeline per instance: a frozen patch encoder produces tokens `F`; a
//! visible-mask encoder and residual cross-attention give `F′`; the tokens
//! query a learnable prototype bank for `H`; a per-token gate driven by the
//! pooled signed distance to the visible mask blends `F′` toward `H`; a
//! dual-head decoder emits occluded and amodal logits, with information
//! flowing only from the occluded branch into the amodal one.

mod checkpoint;
pub mod network;
mod params;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint,
    CHECKPOINT_VERSION,
};
pub use network::{gate_value, ModelInputs, TapeTrace};
pub(crate) use params::standard_normal;
pub use params::{AttnSlots, Bound, ModelSeeds, Param, ParamGroup, ParamStore, Slots};

use crate::error::{GraspError, Result};
use crate::geometry::{pool_to_grid, sdf, BinaryMask};
use crate::pgm::GrayImage;
use crate::tensor::{Tape, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GraspConfig {
    /// Square input side in pixels.
    pub image_size: usize,
    pub patch: usize,
    /// Token width `D`.
    pub dim: usize,
    pub heads: usize,
    /// Prototype count `N_p`.
    pub prototypes: usize,
    /// Width of the frozen encoder blocks.
    pub frozen_width: usize,
    pub decoder_width: usize,
    /// Adds `d̄·d_dir` to the prototype queries.
    pub sdf_query_mod: bool,
    /// Replaces the learned gate by a constant in `[0, 1]`.
    pub gate_override: Option<f64>,
}

impl Default for GraspConfig {
    fn default() -> Self {
        GraspConfig {
            image_size: 64,
            patch: 8,
            dim: 64,
            heads: 4,
            prototypes: 32,
            frozen_width: 64,
            decoder_width: 64,
            sdf_query_mod: false,
            gate_override: None,
        }
    }
}

impl GraspConfig {
    /// 16×16 input, `D = 8`, four prototypes: small enough for exhaustive
    /// finite-difference checks.
    pub fn miniature() -> Self {
        GraspConfig {
            image_size: 16,
            patch: 4,
            dim: 8,
            heads: 2,
            prototypes: 4,
            frozen_width: 8,
            decoder_width: 8,
            sdf_query_mod: false,
            gate_override: None,
        }
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch
    }

    pub fn tokens(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(GraspError::Config(msg));
        if self.patch == 0 || self.image_size == 0 || !self.image_size.is_multiple_of(self.patch) {
            return bad(format!(
                "image size {} is not a multiple of patch {}",
                self.image_size, self.patch
            ));
        }
        if self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return bad(format!(
                "token dim {} is not divisible by {} heads",
                self.dim, self.heads
            ));
        }
        if !self.dim.is_multiple_of(4) {
            return bad(format!("token dim {} must be a multiple of 4", self.dim));
        }
        if self.prototypes == 0 {
            return bad("at least one prototype is required".into());
        }
        if self.frozen_width == 0 || self.decoder_width == 0 {
            return bad("layer widths must be positive".into());
        }
        if let Some(c) = self.gate_override {
            if !(0.0..=1.0).contains(&c) {
                return bad(format!("gate override {c} outside [0, 1]"));
            }
        }
        Ok(())
    }
}

/// Values of every intermediate of one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    pub f: Tensor,
    pub f_v: Tensor,
    pub f_prime: Tensor,
    pub h: Tensor,
    pub delta: Tensor,
    pub dbar: Vec<f64>,
    pub gate: Vec<f64>,
    pub f_out: Tensor,
    pub f_o: Tensor,
    pub f_a: Tensor,
    /// `heads×L×L` visible-mask attention.
    pub attn_vm: Tensor,
    /// `heads×L×N_p` prototype attention.
    pub attn_spm: Tensor,
    /// `H×W` raster logits.
    pub logits_occ: Tensor,
    pub logits_amodal: Tensor,
}

/// Trainable parameter counts per group.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCounts {
    pub trainable: BTreeMap<ParamGroup, usize>,
    pub frozen: usize,
    pub total_trainable: usize,
}

impl ParamCounts {
    pub fn group(&self, group: ParamGroup) -> usize {
        self.trainable.get(&group).copied().unwrap_or(0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GraspModel {
    config: GraspConfig,
    seeds: ModelSeeds,
    store: ParamStore,
}

impl GraspModel {
    pub fn new(config: GraspConfig, seeds: ModelSeeds) -> Result<Self> {
        config.validate()?;
        let store = ParamStore::init(&config, seeds);
        Ok(GraspModel {
            config,
            seeds,
            store,
        })
    }

    /// Reassembles a model from stored parameters, checking names and shapes
    /// against the layout `config` implies.
    pub fn from_params(config: GraspConfig, seeds: ModelSeeds, params: Vec<Param>) -> Result<Self> {
        let mut model = GraspModel::new(config, seeds)?;
        if params.len() != model.store.params.len() {
            return Err(GraspError::Integrity(format!(
                "expected {} parameters, found {}",
                model.store.params.len(),
                params.len()
            )));
        }
        for (slot, p) in model.store.params.iter_mut().zip(params) {
            if slot.name != p.name || slot.value.shape() != p.value.shape() || slot.group != p.group
            {
                return Err(GraspError::Integrity(format!(
                    "parameter {} {:?} does not match expected {} {:?}",
                    p.name,
                    p.value.shape(),
                    slot.name,
                    slot.value.shape()
                )));
            }
            *slot = p;
        }
        Ok(model)
    }

    pub fn config(&self) -> &GraspConfig {
        &self.config
    }

    pub fn seeds(&self) -> ModelSeeds {
        self.seeds
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn set_gate_override(&mut self, value: Option<f64>) -> Result<()> {
        let mut config = self.config.clone();
        config.gate_override = value;
        config.validate()?;
        self.config = config;
        Ok(())
    }

    /// Copy of the model with the gate forced to `value`.
    pub fn with_gate_override(&self, value: Option<f64>) -> Result<Self> {
        let mut m = self.clone();
        m.set_gate_override(value)?;
        Ok(m)
    }

    /// Learned gate scalars `(α, β)`.
    pub fn gate_params(&self) -> (f64, f64) {
        let s = self.store.slots();
        (
            self.store.get(s.alpha).item(),
            self.store.get(s.beta).item(),
        )
    }

    pub fn gamma(&self) -> f64 {
        self.store.get(self.store.slots().gamma).item()
    }

    pub fn inputs(&self, image: &GrayImage, visible: &BinaryMask) -> Result<ModelInputs> {
        let n = self.config.image_size;
        if (image.height, image.width) != (n, n) {
            return Err(GraspError::Config(format!(
                "image is {}×{}, model expects {n}×{n}",
                image.height, image.width
            )));
        }
        if visible.dims() != (n, n) {
            return Err(GraspError::dim(
                "forward",
                &[n, n],
                &[visible.height(), visible.width()],
            ));
        }
        let g = self.config.grid();
        Ok(ModelInputs {
            patches: network::patchify(&image.values(), n, self.config.patch),
            vm: network::vm_features(visible, self.config.patch),
            dbar: pool_to_grid(&sdf(visible), g, g)?,
        })
    }

    /// Records the forward pass on `tape` with the given parameter binding.
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape,
        bound: &Slots<crate::tensor::Var>,
        inputs: &ModelInputs,
    ) -> Result<TapeTrace> {
        network::forward_on_tape(tape, bound, &self.config, inputs)
    }

    pub fn forward(&self, image: &GrayImage, visible: &BinaryMask) -> Result<ForwardTrace> {
        let inputs = self.inputs(image, visible)?;
        self.forward_inputs(&inputs)
    }

    pub fn forward_inputs(&self, inputs: &ModelInputs) -> Result<ForwardTrace> {
        let mut tape = Tape::new();
        let bound = self.store.bind(&mut tape, false);
        let t = self.forward_on_tape(&mut tape, &bound.slots, inputs)?;
        let v = |x| tape.value(x).clone();
        Ok(ForwardTrace {
            f: v(t.f),
            f_v: v(t.f_v),
            f_prime: v(t.f_prime),
            h: v(t.h),
            delta: v(t.delta),
            dbar: inputs.dbar.clone(),
            gate: tape.value(t.s).data().to_vec(),
            f_out: v(t.f_out),
            f_o: v(t.f_o),
            f_a: v(t.f_a),
            logits_occ: self.to_raster(tape.value(t.logits_occ)),
            logits_amodal: self.to_raster(tape.value(t.logits_amodal)),
            attn_vm: t.attn_vm,
            attn_spm: t.attn_spm,
        })
    }

    /// Runs only the decoder on given `L×D` tokens; returns raster
    /// `(occluded, amodal)` logits.
    pub fn decode_tokens(&self, f_out: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut tape = Tape::new();
        let bound = self.store.bind(&mut tape, false);
        let x = tape.constant(f_out.clone());
        let d = network::decode(&mut tape, &bound.slots, x)?;
        Ok((
            self.to_raster(tape.value(d.logits_occ)),
            self.to_raster(tape.value(d.logits_amodal)),
        ))
    }

    /// Token-layout `L×p²` values to an `H×W` raster.
    pub fn to_raster(&self, tokens: &Tensor) -> Tensor {
        network::unpatchify(tokens, self.config.image_size, self.config.patch)
    }

    /// Raster values to token layout.
    pub fn to_tokens(&self, raster: &[f64]) -> Tensor {
        network::patchify(raster, self.config.image_size, self.config.patch)
    }

    pub fn count_params(&self) -> ParamCounts {
        let mut trainable = BTreeMap::new();
        let mut frozen = 0;
        for p in self.store.params() {
            if p.group.is_frozen() {
                frozen += p.value.numel();
            } else {
                *trainable.entry(p.group).or_insert(0) += p.value.numel();
            }
        }
        let total_trainable = trainable.values().sum();
        ParamCounts {
            trainable,
            frozen,
            total_trainable,
        }
    }
}
