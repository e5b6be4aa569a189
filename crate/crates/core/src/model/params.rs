//! Parameter storage: a flat list of named tensors plus a typed index into it.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::GraspConfig;
use crate::seed;
use crate::tensor::{AttentionWeights, Tape, Tensor, Var};

/// Parameter groups used for accounting, optimizer masks and checkpoints.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    /// Random patch-encoder blocks; never updated.
    EncoderFrozen,
    EncoderProjection,
    /// Visible-mask MLP, its cross-attention and the residual scale.
    VmEncoder,
    Prototypes,
    SpmAttention,
    Gate,
    SdfDirection,
    DecoderTrunk,
    DecoderOccluded,
    /// Amodal branch, fusion layer and amodal head.
    DecoderAmodal,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 10] = [
        ParamGroup::EncoderFrozen,
        ParamGroup::EncoderProjection,
        ParamGroup::VmEncoder,
        ParamGroup::Prototypes,
        ParamGroup::SpmAttention,
        ParamGroup::Gate,
        ParamGroup::SdfDirection,
        ParamGroup::DecoderTrunk,
        ParamGroup::DecoderOccluded,
        ParamGroup::DecoderAmodal,
    ];

    pub fn is_frozen(self) -> bool {
        self == ParamGroup::EncoderFrozen
    }

    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::EncoderFrozen => "encoder_frozen",
            ParamGroup::EncoderProjection => "encoder_projection",
            ParamGroup::VmEncoder => "vm_encoder",
            ParamGroup::Prototypes => "prototypes",
            ParamGroup::SpmAttention => "spm_attention",
            ParamGroup::Gate => "gate",
            ParamGroup::SdfDirection => "sdf_direction",
            ParamGroup::DecoderTrunk => "decoder_trunk",
            ParamGroup::DecoderOccluded => "decoder_occluded",
            ParamGroup::DecoderAmodal => "decoder_amodal",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub group: ParamGroup,
    pub value: Tensor,
}

/// Attention projections addressed by slot.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttnSlots<T> {
    pub wq: T,
    pub wk: T,
    pub wv: T,
    pub wo: T,
}

/// Every parameter of the network, generic over how it is addressed:
/// `Slots<usize>` indexes the flat store, `Slots<Var>` a bound tape.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Slots<T> {
    pub frozen_w: Vec<T>,
    pub frozen_b: Vec<T>,
    pub proj_w: T,
    pub proj_b: T,
    pub vm_w1: T,
    pub vm_b1: T,
    pub vm_w2: T,
    pub vm_b2: T,
    pub vm_attn: AttnSlots<T>,
    pub gamma: T,
    pub prototypes: T,
    pub spm_attn: AttnSlots<T>,
    pub alpha: T,
    pub beta: T,
    pub sdf_dir: Option<T>,
    pub trunk_w1: T,
    pub trunk_b1: T,
    pub trunk_w2: T,
    pub trunk_b2: T,
    pub occ_w: T,
    pub occ_b: T,
    pub occ_head_w: T,
    pub occ_head_b: T,
    pub amo_w: T,
    pub amo_b: T,
    pub fuse_w: T,
    pub fuse_b: T,
    pub amo_head_w: T,
    pub amo_head_b: T,
}

impl<T: Copy> Slots<T> {
    pub fn map<U>(&self, f: impl Fn(T) -> U) -> Slots<U> {
        let attn = |a: &AttnSlots<T>| AttnSlots {
            wq: f(a.wq),
            wk: f(a.wk),
            wv: f(a.wv),
            wo: f(a.wo),
        };
        Slots {
            frozen_w: self.frozen_w.iter().map(|&x| f(x)).collect(),
            frozen_b: self.frozen_b.iter().map(|&x| f(x)).collect(),
            proj_w: f(self.proj_w),
            proj_b: f(self.proj_b),
            vm_w1: f(self.vm_w1),
            vm_b1: f(self.vm_b1),
            vm_w2: f(self.vm_w2),
            vm_b2: f(self.vm_b2),
            vm_attn: attn(&self.vm_attn),
            gamma: f(self.gamma),
            prototypes: f(self.prototypes),
            spm_attn: attn(&self.spm_attn),
            alpha: f(self.alpha),
            beta: f(self.beta),
            sdf_dir: self.sdf_dir.map(&f),
            trunk_w1: f(self.trunk_w1),
            trunk_b1: f(self.trunk_b1),
            trunk_w2: f(self.trunk_w2),
            trunk_b2: f(self.trunk_b2),
            occ_w: f(self.occ_w),
            occ_b: f(self.occ_b),
            occ_head_w: f(self.occ_head_w),
            occ_head_b: f(self.occ_head_b),
            amo_w: f(self.amo_w),
            amo_b: f(self.amo_b),
            fuse_w: f(self.fuse_w),
            fuse_b: f(self.fuse_b),
            amo_head_w: f(self.amo_head_w),
            amo_head_b: f(self.amo_head_b),
        }
    }
}

impl From<AttnSlots<Var>> for AttentionWeights {
    fn from(a: AttnSlots<Var>) -> Self {
        AttentionWeights {
            wq: a.wq,
            wk: a.wk,
            wv: a.wv,
            wo: a.wo,
        }
    }
}

/// Seeds for the two independent initialization streams.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSeeds {
    pub frozen: u64,
    pub init: u64,
}

impl ModelSeeds {
    pub fn from_base(base: u64) -> Self {
        ModelSeeds {
            frozen: seed::derive(base, seed::Purpose::Frozen, 0),
            init: seed::derive(base, seed::Purpose::Init, 0),
        }
    }
}

/// Flat parameter list plus its slot layout.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore {
    pub(crate) params: Vec<Param>,
    pub(crate) slots: Slots<usize>,
}

enum Init {
    Zeros,
    /// Normal with standard deviation `1/√fan_in`, `fan_in` being the first extent.
    FanIn,
    Normal(f64),
}

struct Builder {
    params: Vec<Param>,
    frozen_rng: ChaCha8Rng,
    init_rng: ChaCha8Rng,
}

impl Builder {
    fn add(&mut self, name: &str, group: ParamGroup, shape: &[usize], init: Init) -> usize {
        let numel: usize = shape.iter().product();
        let rng = if group.is_frozen() {
            &mut self.frozen_rng
        } else {
            &mut self.init_rng
        };
        let std = match init {
            Init::Zeros => 0.0,
            Init::FanIn => 1.0 / (shape[0] as f64).sqrt(),
            Init::Normal(s) => s,
        };
        let data = if std == 0.0 {
            vec![0.0; numel]
        } else {
            let normal = Normal::new(0.0, std).expect("positive standard deviation");
            (0..numel).map(|_| normal.sample(rng)).collect()
        };
        self.params.push(Param {
            name: name.to_string(),
            group,
            value: Tensor::new(shape.to_vec(), data).expect("positive extents"),
        });
        self.params.len() - 1
    }

    fn attn(&mut self, prefix: &str, group: ParamGroup, d: usize) -> AttnSlots<usize> {
        AttnSlots {
            wq: self.add(&format!("{prefix}.wq"), group, &[d, d], Init::FanIn),
            wk: self.add(&format!("{prefix}.wk"), group, &[d, d], Init::FanIn),
            wv: self.add(&format!("{prefix}.wv"), group, &[d, d], Init::FanIn),
            wo: self.add(&format!("{prefix}.wo"), group, &[d, d], Init::FanIn),
        }
    }
}

impl ParamStore {
    /// Fresh parameters. The frozen blocks draw only from `seeds.frozen`, so
    /// two models sharing that seed share their encoder.
    pub fn init(config: &GraspConfig, seeds: ModelSeeds) -> Self {
        use ParamGroup::*;
        let mut b = Builder {
            params: Vec::new(),
            frozen_rng: seed::rng(seeds.frozen),
            init_rng: seed::rng(seeds.init),
        };
        let p2 = config.patch * config.patch;
        let (e, d, h) = (config.frozen_width, config.dim, config.decoder_width);

        let mut frozen_w = Vec::with_capacity(4);
        let mut frozen_b = Vec::with_capacity(4);
        for k in 0..4 {
            let fan_in = if k == 0 { p2 } else { e };
            frozen_w.push(b.add(
                &format!("encoder.block{k}.w"),
                EncoderFrozen,
                &[fan_in, e],
                Init::FanIn,
            ));
            frozen_b.push(b.add(
                &format!("encoder.block{k}.b"),
                EncoderFrozen,
                &[e],
                Init::Normal(0.1),
            ));
        }
        let proj_w = b.add(
            "encoder.proj.w",
            EncoderProjection,
            &[4 * e, d],
            Init::FanIn,
        );
        let proj_b = b.add("encoder.proj.b", EncoderProjection, &[d], Init::Zeros);

        let vm_in = p2 + 3;
        let vm_w1 = b.add("vm.mlp1.w", VmEncoder, &[vm_in, d], Init::FanIn);
        let vm_b1 = b.add("vm.mlp1.b", VmEncoder, &[d], Init::Zeros);
        let vm_w2 = b.add("vm.mlp2.w", VmEncoder, &[d, d], Init::FanIn);
        let vm_b2 = b.add("vm.mlp2.b", VmEncoder, &[d], Init::Zeros);
        let vm_attn = b.attn("vm.attn", VmEncoder, d);
        let gamma = b.add("vm.gamma", VmEncoder, &[1], Init::Zeros);

        let prototypes = b.add(
            "spm.prototypes",
            Prototypes,
            &[config.prototypes, d],
            Init::Normal(1.0),
        );
        let spm_attn = b.attn("spm.attn", SpmAttention, d);

        let alpha = b.add("gate.alpha", Gate, &[1], Init::Zeros);
        let beta = b.add("gate.beta", Gate, &[1], Init::Zeros);

        let trunk_w1 = b.add("decoder.trunk1.w", DecoderTrunk, &[d, h], Init::FanIn);
        let trunk_b1 = b.add("decoder.trunk1.b", DecoderTrunk, &[h], Init::Zeros);
        let trunk_w2 = b.add("decoder.trunk2.w", DecoderTrunk, &[h, h], Init::FanIn);
        let trunk_b2 = b.add("decoder.trunk2.b", DecoderTrunk, &[h], Init::Zeros);
        let occ_w = b.add(
            "decoder.occ_branch.w",
            DecoderOccluded,
            &[h, h],
            Init::FanIn,
        );
        let occ_b = b.add("decoder.occ_branch.b", DecoderOccluded, &[h], Init::Zeros);
        let occ_head_w = b.add("decoder.occ_head.w", DecoderOccluded, &[h, p2], Init::FanIn);
        let occ_head_b = b.add("decoder.occ_head.b", DecoderOccluded, &[p2], Init::Zeros);
        let amo_w = b.add(
            "decoder.amodal_branch.w",
            DecoderAmodal,
            &[h, h],
            Init::FanIn,
        );
        let amo_b = b.add("decoder.amodal_branch.b", DecoderAmodal, &[h], Init::Zeros);
        let fuse_w = b.add("decoder.fuse.w", DecoderAmodal, &[2 * h, h], Init::FanIn);
        let fuse_b = b.add("decoder.fuse.b", DecoderAmodal, &[h], Init::Zeros);
        let amo_head_w = b.add(
            "decoder.amodal_head.w",
            DecoderAmodal,
            &[h, p2],
            Init::FanIn,
        );
        let amo_head_b = b.add("decoder.amodal_head.b", DecoderAmodal, &[p2], Init::Zeros);

        // Last and zero-filled, so toggling it leaves every other tensor unchanged.
        let sdf_dir = config
            .sdf_query_mod
            .then(|| b.add("spm.sdf_direction", SdfDirection, &[d], Init::Zeros));

        let slots = Slots {
            frozen_w,
            frozen_b,
            proj_w,
            proj_b,
            vm_w1,
            vm_b1,
            vm_w2,
            vm_b2,
            vm_attn,
            gamma,
            prototypes,
            spm_attn,
            alpha,
            beta,
            sdf_dir,
            trunk_w1,
            trunk_b1,
            trunk_w2,
            trunk_b2,
            occ_w,
            occ_b,
            occ_head_w,
            occ_head_b,
            amo_w,
            amo_b,
            fuse_w,
            fuse_b,
            amo_head_w,
            amo_head_b,
        };
        ParamStore {
            params: b.params,
            slots,
        }
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn slots(&self) -> &Slots<usize> {
        &self.slots
    }

    pub fn get(&self, id: usize) -> &Tensor {
        &self.params[id].value
    }

    pub fn get_mut(&mut self, id: usize) -> &mut Tensor {
        &mut self.params[id].value
    }

    pub fn by_name(&self, name: &str) -> Option<&Param> {
        self.params.iter().find(|p| p.name == name)
    }

    /// Records every parameter on `tape`: trainable ones as differentiable
    /// leaves, frozen ones as constants. With `differentiable == false`
    /// everything is a constant.
    pub fn bind(&self, tape: &mut Tape, differentiable: bool) -> Bound {
        let vars: Vec<Var> = self
            .params
            .iter()
            .map(|p| {
                if differentiable && !p.group.is_frozen() {
                    tape.leaf(p.value.clone())
                } else {
                    tape.constant(p.value.clone())
                }
            })
            .collect();
        let slots = self.slots.map(|i| vars[i]);
        Bound { vars, slots }
    }
}

/// Parameters recorded on a tape.
#[derive(Clone, Debug)]
pub struct Bound {
    /// One variable per parameter, in store order.
    pub vars: Vec<Var>,
    pub slots: Slots<Var>,
}

/// Standard normal draws.
pub(crate) fn standard_normal(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    (0..n).map(|_| normal.sample(rng)).collect()
}
