//! Tape-level building blocks of the forward pass.

use super::params::Slots;
use super::GraspConfig;
use crate::error::Result;
use crate::geometry::BinaryMask;
use crate::tensor::{multihead_cross_attention, sigmoid, Tape, Tensor, Var};

/// Splits a row-major `size×size` raster into `L×p²` patch rows, patches in
/// row-major grid order.
pub fn patchify(values: &[f64], size: usize, patch: usize) -> Tensor {
    let grid = size / patch;
    let mut out = Vec::with_capacity(values.len());
    for gr in 0..grid {
        for gc in 0..grid {
            for r in 0..patch {
                let start = (gr * patch + r) * size + gc * patch;
                out.extend_from_slice(&values[start..start + patch]);
            }
        }
    }
    Tensor::new(vec![grid * grid, patch * patch], out).expect("patch layout is consistent")
}

/// Inverse of [`patchify`].
pub fn unpatchify(tokens: &Tensor, size: usize, patch: usize) -> Tensor {
    let grid = size / patch;
    let data = tokens.data();
    let mut out = vec![0.0; size * size];
    for (t, row) in data.chunks(patch * patch).enumerate() {
        let (gr, gc) = (t / grid, t % grid);
        for r in 0..patch {
            let start = (gr * patch + r) * size + gc * patch;
            out[start..start + patch].copy_from_slice(&row[r * patch..(r + 1) * patch]);
        }
    }
    Tensor::new(vec![size, size], out).expect("raster layout is consistent")
}

/// Fixed 2-D sinusoidal position code, `L×D`: the first half of the channels
/// encodes the token row, the second half the column.
pub fn positional_encoding(grid: usize, dim: usize) -> Tensor {
    let half = dim / 2;
    let mut out = Vec::with_capacity(grid * grid * dim);
    for t in 0..grid * grid {
        for pos in [t / grid, t % grid] {
            for k in 0..half / 2 {
                let freq = 1.0 / 100f64.powf(2.0 * k as f64 / half as f64);
                let angle = pos as f64 * freq;
                out.push(angle.sin());
                out.push(angle.cos());
            }
        }
    }
    Tensor::new(vec![grid * grid, dim], out).expect("dim divisible by four")
}

/// Per-token input of the visible-mask encoder: the patch's occupancy bits,
/// their mean, and the token's grid coordinates scaled to `[-1, 1]`.
pub fn vm_features(mask: &BinaryMask, patch: usize) -> Tensor {
    let size = mask.height();
    let grid = size / patch;
    let bits: Vec<f64> = mask.bits().iter().map(|&b| b as u8 as f64).collect();
    let occupancy = patchify(&bits, size, patch);
    let p2 = patch * patch;
    let coord = |i: usize| {
        if grid > 1 {
            2.0 * i as f64 / (grid - 1) as f64 - 1.0
        } else {
            0.0
        }
    };
    let mut out = Vec::with_capacity(grid * grid * (p2 + 3));
    for t in 0..grid * grid {
        let row = occupancy.row(t);
        out.extend_from_slice(row);
        out.push(row.iter().sum::<f64>() / p2 as f64);
        out.push(coord(t / grid));
        out.push(coord(t % grid));
    }
    Tensor::new(vec![grid * grid, p2 + 3], out).expect("feature layout is consistent")
}

fn linear(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    tape.add_row(y, b)
}

/// Frozen random blocks followed by the trainable projection: block 0 maps
/// the centered patch `2x − 1` to the frozen width through `tanh`, blocks
/// 1–3 are residual `tanh` layers, and the four block outputs are
/// concatenated before projecting to the token width.
pub fn encode(tape: &mut Tape, p: &Slots<Var>, patches: Var) -> Result<Var> {
    let x = tape.scale(patches, 2.0);
    let x = tape.shift(x, -1.0);
    let mut outputs = Vec::with_capacity(4);
    let mut h = x;
    for k in 0..4 {
        let z = linear(tape, h, p.frozen_w[k], p.frozen_b[k])?;
        let z = tape.tanh(z);
        h = if k == 0 { z } else { tape.add(h, z)? };
        outputs.push(h);
    }
    let stacked = tape.concat(&outputs, 1)?;
    linear(tape, stacked, p.proj_w, p.proj_b)
}

pub struct VmFusion {
    pub f_v: Var,
    pub f_prime: Var,
    /// Cross-attention output before scaling by γ.
    pub attended: Var,
    pub attn: Tensor,
}

/// `F′ = F + γ·CrossAttn(Q = F + pe, K = F_v, V = F_v)`.
pub fn vm_encode_fuse(
    tape: &mut Tape,
    p: &Slots<Var>,
    f: Var,
    vm_in: Var,
    pe: Var,
    heads: usize,
) -> Result<VmFusion> {
    let z = linear(tape, vm_in, p.vm_w1, p.vm_b1)?;
    let z = tape.gelu(z);
    let f_v = linear(tape, z, p.vm_w2, p.vm_b2)?;
    let query = tape.add(f, pe)?;
    let ca = multihead_cross_attention(tape, query, f_v, f_v, &p.vm_attn.into(), heads)?;
    let scaled = tape.mul_scalar(ca.output, p.gamma)?;
    let f_prime = tape.add(f, scaled)?;
    Ok(VmFusion {
        f_v,
        f_prime,
        attended: ca.output,
        attn: ca.attn,
    })
}

pub struct PriorRetrieval {
    pub h: Var,
    pub delta: Var,
    pub attn: Tensor,
}

/// Soft retrieval from the prototype bank, `H = CrossAttn(Q, K = P, V = P)`
/// with `Q = F′`, or `Q = F′ + d̄ ⊗ d_dir` when a direction is supplied.
pub fn spm(
    tape: &mut Tape,
    p: &Slots<Var>,
    f_prime: Var,
    dbar: Var,
    sdf_dir: Option<Var>,
    heads: usize,
) -> Result<PriorRetrieval> {
    let query = match sdf_dir {
        Some(dir) => {
            let l = tape.value(dbar).numel();
            let d = tape.value(dir).numel();
            let col = tape.reshape(dbar, &[l, 1])?;
            let row = tape.reshape(dir, &[1, d])?;
            let offset = tape.matmul(col, row)?;
            tape.add(f_prime, offset)?
        }
        None => f_prime,
    };
    let ca = multihead_cross_attention(
        tape,
        query,
        p.prototypes,
        p.prototypes,
        &p.spm_attn.into(),
        heads,
    )?;
    let delta = tape.sub(ca.output, f_prime)?;
    Ok(PriorRetrieval {
        h: ca.output,
        delta,
        attn: ca.attn,
    })
}

/// `σ(α·d̄ + β)` for a single token.
pub fn gate_value(dbar: f64, alpha: f64, beta: f64) -> f64 {
    sigmoid(alpha * dbar + beta)
}

/// Per-token gate on the tape; `alpha` and `beta` are one-element variables.
pub fn gate(tape: &mut Tape, dbar: Var, alpha: Var, beta: Var) -> Result<Var> {
    let z = tape.mul_scalar(dbar, alpha)?;
    let z = tape.add_scalar(z, beta)?;
    Ok(tape.sigmoid(z))
}

/// `F_out = F′ + s ⊙ Δ`, with `s` broadcast over channels. Evaluated as a
/// per-row blend so that `s = 0` and `s = 1` reproduce `F′` and `H` exactly.
pub fn inject(tape: &mut Tape, f_prime: Var, h: Var, s: Var) -> Result<Var> {
    tape.blend_rows(f_prime, h, s)
}

pub struct Decoded {
    pub f_o: Var,
    pub f_a: Var,
    /// `L×p²` token-layout logits.
    pub logits_occ: Var,
    pub logits_amodal: Var,
}

/// Shared trunk, then the occluded and amodal branches.
pub fn decode_branches(tape: &mut Tape, p: &Slots<Var>, f_out: Var) -> Result<(Var, Var)> {
    let t = linear(tape, f_out, p.trunk_w1, p.trunk_b1)?;
    let t = tape.gelu(t);
    let t = linear(tape, t, p.trunk_w2, p.trunk_b2)?;
    let t = tape.gelu(t);
    let f_o = linear(tape, t, p.occ_w, p.occ_b)?;
    let f_o = tape.gelu(f_o);
    let f_a = linear(tape, t, p.amo_w, p.amo_b)?;
    let f_a = tape.gelu(f_a);
    Ok((f_o, f_a))
}

/// The occluded head reads `F_o` alone; the amodal head reads the fusion of
/// `[F_a; F_o]`.
pub fn decode_heads(tape: &mut Tape, p: &Slots<Var>, f_o: Var, f_a: Var) -> Result<(Var, Var)> {
    let logits_occ = linear(tape, f_o, p.occ_head_w, p.occ_head_b)?;
    let both = tape.concat(&[f_a, f_o], 1)?;
    let fused = linear(tape, both, p.fuse_w, p.fuse_b)?;
    let fused = tape.gelu(fused);
    let logits_amodal = linear(tape, fused, p.amo_head_w, p.amo_head_b)?;
    Ok((logits_occ, logits_amodal))
}

pub fn decode(tape: &mut Tape, p: &Slots<Var>, f_out: Var) -> Result<Decoded> {
    let (f_o, f_a) = decode_branches(tape, p, f_out)?;
    let (logits_occ, logits_amodal) = decode_heads(tape, p, f_o, f_a)?;
    Ok(Decoded {
        f_o,
        f_a,
        logits_occ,
        logits_amodal,
    })
}

/// Non-learned per-instance inputs.
#[derive(Clone, Debug)]
pub struct ModelInputs {
    /// `L×p²` pixel intensities in `[0, 1]`.
    pub patches: Tensor,
    /// `L×(p²+3)` visible-mask features.
    pub vm: Tensor,
    /// Pooled normalized SDF of the visible mask, one value per token.
    pub dbar: Vec<f64>,
}

/// Every intermediate of one forward pass, as tape variables.
#[derive(Clone, Debug)]
pub struct TapeTrace {
    pub f: Var,
    pub f_v: Var,
    pub f_prime: Var,
    pub h: Var,
    pub delta: Var,
    pub dbar: Var,
    pub s: Var,
    pub f_out: Var,
    pub f_o: Var,
    pub f_a: Var,
    pub logits_occ: Var,
    pub logits_amodal: Var,
    pub attn_vm: Tensor,
    pub attn_spm: Tensor,
}

/// The full pipeline on `tape`.
pub fn forward_on_tape(
    tape: &mut Tape,
    p: &Slots<Var>,
    config: &GraspConfig,
    inputs: &ModelInputs,
) -> Result<TapeTrace> {
    let patches = tape.constant(inputs.patches.clone());
    let vm_in = tape.constant(inputs.vm.clone());
    let pe = tape.constant(positional_encoding(config.grid(), config.dim));
    let dbar = tape.constant(Tensor::vector(inputs.dbar.clone()));

    let f = encode(tape, p, patches)?;
    let fusion = vm_encode_fuse(tape, p, f, vm_in, pe, config.heads)?;
    let prior = spm(tape, p, fusion.f_prime, dbar, p.sdf_dir, config.heads)?;
    let s = match config.gate_override {
        Some(c) => tape.constant(Tensor::full(&[inputs.dbar.len()], c)),
        None => gate(tape, dbar, p.alpha, p.beta)?,
    };
    let f_out = inject(tape, fusion.f_prime, prior.h, s)?;
    let dec = decode(tape, p, f_out)?;
    Ok(TapeTrace {
        f,
        f_v: fusion.f_v,
        f_prime: fusion.f_prime,
        h: prior.h,
        delta: prior.delta,
        dbar,
        s,
        f_out,
        f_o: dec.f_o,
        f_a: dec.f_a,
        logits_occ: dec.logits_occ,
        logits_amodal: dec.logits_amodal,
        attn_vm: fusion.attn,
        attn_spm: prior.attn,
    })
}
