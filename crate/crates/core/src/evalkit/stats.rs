//! Gate and prototype-attention statistics.

use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;

/// Token position class on the square token grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GridPosition {
    Center,
    Edge,
    Corner,
}

pub fn grid_position(token: usize, grid: usize) -> GridPosition {
    let (r, c) = (token / grid, token % grid);
    let last = grid - 1;
    let on_row = r == 0 || r == last;
    let on_col = c == 0 || c == last;
    match (on_row, on_col) {
        (true, true) => GridPosition::Corner,
        (false, false) => GridPosition::Center,
        _ => GridPosition::Edge,
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub n: usize,
    pub mean: Option<f64>,
    pub std: Option<f64>,
}

impl Summary {
    /// Population mean and standard deviation.
    pub fn of(values: &[f64]) -> Self {
        if values.is_empty() {
            return Summary::default();
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Summary {
            n: values.len(),
            mean: Some(mean),
            std: Some(var.sqrt()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GateBin {
    pub lo: f64,
    pub hi: f64,
    /// Per-instance mean gate over instances in the bin.
    pub gate: Summary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GateStats {
    pub by_occ_ratio: Vec<GateBin>,
    pub center: Summary,
    pub edge: Summary,
    pub corner: Summary,
}

/// One instance's gate values with its occlusion ratio.
#[derive(Clone, Debug)]
pub struct GateSample {
    pub occ_ratio: f64,
    pub gate: Vec<f64>,
}

pub fn gate_stats(samples: &[GateSample], grid: usize, bins: &[(f64, f64)]) -> GateStats {
    let instance_means: Vec<(f64, f64)> = samples
        .iter()
        .map(|s| {
            (
                s.occ_ratio,
                s.gate.iter().sum::<f64>() / s.gate.len() as f64,
            )
        })
        .collect();
    let by_occ_ratio = bins
        .iter()
        .enumerate()
        .map(|(i, &(lo, hi))| {
            let last = i + 1 == bins.len();
            let vals: Vec<f64> = instance_means
                .iter()
                .filter(|(r, _)| in_bin(*r, lo, hi, last))
                .map(|&(_, m)| m)
                .collect();
            GateBin {
                lo,
                hi,
                gate: Summary::of(&vals),
            }
        })
        .collect();
    let mut by_pos: [Vec<f64>; 3] = Default::default();
    for s in samples {
        for (t, &g) in s.gate.iter().enumerate() {
            let k = match grid_position(t, grid) {
                GridPosition::Center => 0,
                GridPosition::Edge => 1,
                GridPosition::Corner => 2,
            };
            by_pos[k].push(g);
        }
    }
    GateStats {
        by_occ_ratio,
        center: Summary::of(&by_pos[0]),
        edge: Summary::of(&by_pos[1]),
        corner: Summary::of(&by_pos[2]),
    }
}

/// Half-open `[lo, hi)`, closed on the right for the last bin.
pub fn in_bin(x: f64, lo: f64, hi: f64, last: bool) -> bool {
    x >= lo && (x < hi || (last && x <= hi))
}

fn entropy_bits(p: &[f64]) -> f64 {
    -p.iter()
        .filter(|&&x| x > 0.0)
        .map(|&x| x * x.log2())
        .sum::<f64>()
}

/// Jensen–Shannon divergence in bits, in `[0, 1]`.
pub fn js_divergence(p: &[f64], q: &[f64]) -> f64 {
    let m: Vec<f64> = p.iter().zip(q).map(|(a, b)| 0.5 * (a + b)).collect();
    let jsd = entropy_bits(&m) - 0.5 * (entropy_bits(p) + entropy_bits(q));
    jsd.clamp(0.0, 1.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionStats {
    /// Instances with both token groups present.
    pub instances: usize,
    /// Instances skipped because one group was empty.
    pub skipped: usize,
    /// Mean over instances of the per-instance divergence between groups.
    pub jsd_mean: Option<f64>,
    /// Divergence between the group distributions pooled over all tokens.
    pub jsd_pooled: Option<f64>,
    pub top1_occluded: Option<f64>,
    pub top1_visible: Option<f64>,
    pub occluded_tokens: usize,
    pub visible_tokens: usize,
}

/// One instance's pooled SDF and its `heads×L×N_p` prototype attention.
#[derive(Clone, Debug)]
pub struct AttentionSample {
    pub dbar: Vec<f64>,
    pub attn: Tensor,
}

/// Head-averaged attention distribution of every token, `L` rows of `N_p`.
fn head_mean(attn: &Tensor) -> Vec<Vec<f64>> {
    let s = attn.shape();
    let (heads, l, n) = (s[0], s[1], s[2]);
    let d = attn.data();
    (0..l)
        .map(|t| {
            (0..n)
                .map(|j| (0..heads).map(|h| d[(h * l + t) * n + j]).sum::<f64>() / heads as f64)
                .collect()
        })
        .collect()
}

/// Tokens with positive pooled SDF count as occluded, the rest as visible.
pub fn attention_stats(samples: &[AttentionSample]) -> AttentionStats {
    let mut per_instance = Vec::new();
    let mut skipped = 0;
    let mut pooled: [Option<Vec<f64>>; 2] = [None, None];
    let mut counts = [0usize; 2];
    let mut top1: [Vec<f64>; 2] = Default::default();
    for s in samples {
        let rows = head_mean(&s.attn);
        let groups: [Vec<&Vec<f64>>; 2] = [
            rows.iter()
                .zip(&s.dbar)
                .filter(|(_, &d)| d > 0.0)
                .map(|(r, _)| r)
                .collect(),
            rows.iter()
                .zip(&s.dbar)
                .filter(|(_, &d)| d <= 0.0)
                .map(|(r, _)| r)
                .collect(),
        ];
        if groups.iter().any(|g| g.is_empty()) {
            skipped += 1;
            continue;
        }
        let mut means = Vec::with_capacity(2);
        for (k, g) in groups.iter().enumerate() {
            let n = g[0].len();
            let mut mean = vec![0.0; n];
            for row in g {
                for (m, v) in mean.iter_mut().zip(row.iter()) {
                    *m += v;
                }
                top1[k].push(row.iter().cloned().fold(f64::MIN, f64::max));
            }
            let acc = pooled[k].get_or_insert_with(|| vec![0.0; n]);
            for (a, m) in acc.iter_mut().zip(&mean) {
                *a += m;
            }
            counts[k] += g.len();
            mean.iter_mut().for_each(|m| *m /= g.len() as f64);
            means.push(mean);
        }
        per_instance.push(js_divergence(&means[0], &means[1]));
    }
    let avg = |v: &[f64]| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
    let jsd_pooled = match (&pooled[0], &pooled[1]) {
        (Some(a), Some(b)) => {
            let na: Vec<f64> = a.iter().map(|x| x / counts[0] as f64).collect();
            let nb: Vec<f64> = b.iter().map(|x| x / counts[1] as f64).collect();
            Some(js_divergence(&na, &nb))
        }
        _ => None,
    };
    AttentionStats {
        instances: per_instance.len(),
        skipped,
        jsd_mean: avg(&per_instance),
        jsd_pooled,
        top1_occluded: avg(&top1[0]),
        top1_visible: avg(&top1[1]),
        occluded_tokens: counts[0],
        visible_tokens: counts[1],
    }
}
