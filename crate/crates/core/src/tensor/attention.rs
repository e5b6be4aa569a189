use super::{Tape, Tensor, Var};
use crate::error::{GraspError, Result};

/// Projection matrices of one attention layer, each `D×D`, applied on the
/// right (`X·W`).
#[derive(Clone, Copy, Debug)]
pub struct AttentionWeights {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
}

#[derive(Debug)]
pub struct AttentionOutput {
    /// `L_q×D`.
    pub output: Var,
    /// `heads×L_q×L_k` attention weights; every row sums to one.
    pub attn: Tensor,
}

/// Standard multi-head cross-attention:
/// `concat_h(softmax(Q_h K_hᵀ / √(D/heads)) V_h) · W_o`.
pub fn multihead_cross_attention(
    tape: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    weights: &AttentionWeights,
    heads: usize,
) -> Result<AttentionOutput> {
    let (lq, d) = tape.value(q).dims2()?;
    let (lk, dk) = tape.value(k).dims2()?;
    if dk != d || tape.value(v).shape() != [lk, d] {
        return Err(GraspError::dim(
            "multihead_cross_attention",
            tape.value(q).shape(),
            tape.value(k).shape(),
        ));
    }
    if heads == 0 || d % heads != 0 {
        return Err(GraspError::Config(format!(
            "token dim {d} is not divisible by {heads} heads"
        )));
    }
    let head_dim = d / heads;
    let scale = 1.0 / (head_dim as f64).sqrt();

    let qp = tape.matmul(q, weights.wq)?;
    let kp = tape.matmul(k, weights.wk)?;
    let vp = tape.matmul(v, weights.wv)?;

    let mut attn = Vec::with_capacity(heads * lq * lk);
    let mut per_head = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = tape.narrow(qp, 1, h * head_dim, head_dim)?;
        let kh = tape.narrow(kp, 1, h * head_dim, head_dim)?;
        let vh = tape.narrow(vp, 1, h * head_dim, head_dim)?;
        let kt = tape.transpose(kh)?;
        let scores = tape.matmul(qh, kt)?;
        let scores = tape.scale(scores, scale);
        let weights_h = tape.softmax(scores, 1)?;
        attn.extend_from_slice(tape.value(weights_h).data());
        per_head.push(tape.matmul(weights_h, vh)?);
    }
    let merged = if heads == 1 {
        per_head[0]
    } else {
        tape.concat(&per_head, 1)?
    };
    let output = tape.matmul(merged, weights.wo)?;
    Ok(AttentionOutput {
        output,
        attn: Tensor::new(vec![heads, lq, lk], attn)?,
    })
}
