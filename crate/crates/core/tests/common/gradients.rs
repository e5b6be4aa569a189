//! Finite-difference cases for every tape op and the miniature model.

use grasp::model::{GraspConfig, GraspModel};
use grasp::tensor::{multihead_cross_attention, AttentionWeights, Tape, Tensor, Var};
use grasp::training::{evaluate_loss, instance_gradients, LossTargets};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{
    gradcheck, mini_data, mini_model, random_tensor, randomize_trainable, rel_error, rng, FD_STEP,
};

pub const SEEDS: u64 = 50;
pub const TOLERANCE: f64 = 1e-4;

type OpCase = (
    &'static str,
    fn(&mut ChaCha8Rng) -> Vec<Tensor>,
    fn(&mut Tape, &[Var]) -> Var,
);

fn dims(r: &mut ChaCha8Rng) -> (usize, usize) {
    (r.random_range(1..5), r.random_range(1..5))
}

fn pair(r: &mut ChaCha8Rng) -> Vec<Tensor> {
    let (m, n) = dims(r);
    vec![random_tensor(r, &[m, n]), random_tensor(r, &[m, n])]
}

fn single(r: &mut ChaCha8Rng) -> Vec<Tensor> {
    let (m, n) = dims(r);
    vec![random_tensor(r, &[m, n])]
}

/// Values at least 0.1 away from the kink at zero.
fn away_from_zero(r: &mut ChaCha8Rng) -> Vec<Tensor> {
    let mut t = single(r);
    for v in t[0].data_mut() {
        *v = v.signum() * (v.abs() + 0.1);
    }
    t
}

fn with_scalar(r: &mut ChaCha8Rng) -> Vec<Tensor> {
    let mut t = single(r);
    t.push(random_tensor(r, &[1]));
    t
}

fn op_cases() -> Vec<OpCase> {
    vec![
        (
            "matmul",
            |r| {
                let (m, k) = dims(r);
                let n = r.random_range(1..5);
                vec![random_tensor(r, &[m, k]), random_tensor(r, &[k, n])]
            },
            |t, v| t.matmul(v[0], v[1]).unwrap(),
        ),
        ("add", pair, |t, v| t.add(v[0], v[1]).unwrap()),
        ("sub", pair, |t, v| t.sub(v[0], v[1]).unwrap()),
        ("mul", pair, |t, v| t.mul(v[0], v[1]).unwrap()),
        (
            "div",
            |r| {
                let mut p = pair(r);
                for d in p[1].data_mut() {
                    *d = d.signum() * (d.abs() + 0.5);
                }
                p
            },
            |t, v| t.div(v[0], v[1]).unwrap(),
        ),
        ("scale", single, |t, v| t.scale(v[0], -1.7)),
        ("shift", single, |t, v| t.shift(v[0], 0.3)),
        ("mul_scalar", with_scalar, |t, v| {
            t.mul_scalar(v[0], v[1]).unwrap()
        }),
        ("add_scalar", with_scalar, |t, v| {
            t.add_scalar(v[0], v[1]).unwrap()
        }),
        ("sigmoid", single, |t, v| t.sigmoid(v[0])),
        ("relu", away_from_zero, |t, v| t.relu(v[0])),
        ("tanh", single, |t, v| t.tanh(v[0])),
        ("gelu", single, |t, v| t.gelu(v[0])),
        ("softplus", single, |t, v| t.softplus(v[0])),
        ("softmax_rows", single, |t, v| t.softmax(v[0], 1).unwrap()),
        ("softmax_cols", single, |t, v| t.softmax(v[0], 0).unwrap()),
        (
            "concat_cols",
            |r| {
                let (m, n) = dims(r);
                vec![random_tensor(r, &[m, n]), random_tensor(r, &[m, 2])]
            },
            |t, v| t.concat(&[v[0], v[1]], 1).unwrap(),
        ),
        (
            "concat_rows",
            |r| {
                let (m, n) = dims(r);
                vec![random_tensor(r, &[m, n]), random_tensor(r, &[3, n])]
            },
            |t, v| t.concat(&[v[0], v[1]], 0).unwrap(),
        ),
        (
            "narrow",
            |r| vec![random_tensor(r, &[3, 5])],
            |t, v| t.narrow(v[0], 1, 1, 3).unwrap(),
        ),
        (
            "reshape",
            |r| vec![random_tensor(r, &[2, 6])],
            |t, v| t.reshape(v[0], &[3, 4]).unwrap(),
        ),
        ("transpose", single, |t, v| t.transpose(v[0]).unwrap()),
        ("sum", single, |t, v| t.sum(v[0])),
        ("mean", single, |t, v| t.mean(v[0])),
        (
            "add_row",
            |r| {
                let (m, n) = dims(r);
                vec![random_tensor(r, &[m, n]), random_tensor(r, &[n])]
            },
            |t, v| t.add_row(v[0], v[1]).unwrap(),
        ),
        (
            "scale_rows",
            |r| {
                let (m, n) = dims(r);
                vec![random_tensor(r, &[m, n]), random_tensor(r, &[m])]
            },
            |t, v| t.scale_rows(v[0], v[1]).unwrap(),
        ),
        (
            "blend_rows",
            |r| {
                let (m, n) = dims(r);
                let s = Tensor::vector((0..m).map(|_| r.random_range(0.05..0.95)).collect());
                vec![random_tensor(r, &[m, n]), random_tensor(r, &[m, n]), s]
            },
            |t, v| t.blend_rows(v[0], v[1], v[2]).unwrap(),
        ),
        (
            "cross_attention",
            |r| {
                let (lq, lk) = (r.random_range(1..4), r.random_range(1..4));
                let d = 4;
                let mut v = vec![
                    random_tensor(r, &[lq, d]),
                    random_tensor(r, &[lk, d]),
                    random_tensor(r, &[lk, d]),
                ];
                for _ in 0..4 {
                    v.push(random_tensor(r, &[d, d]));
                }
                v
            },
            |t, v| {
                let w = AttentionWeights {
                    wq: v[3],
                    wk: v[4],
                    wv: v[5],
                    wo: v[6],
                };
                multihead_cross_attention(t, v[0], v[1], v[2], &w, 2)
                    .unwrap()
                    .output
            },
        ),
        (
            "bce",
            |r| {
                let (m, n) = dims(r);
                let t = Tensor::new(
                    vec![m, n],
                    (0..m * n).map(|_| r.random_range(0..2) as f64).collect(),
                )
                .unwrap();
                vec![random_tensor(r, &[m, n]), t]
            },
            |t, v| grasp::training::bce_on_tape(t, v[0], v[1]).unwrap(),
        ),
        ("dice", single, |t, v| {
            let shape = t.value(v[0]).shape().to_vec();
            let n = shape.iter().product::<usize>();
            let target =
                Tensor::new(shape, (0..n).map(|i| (i % 3 == 0) as u8 as f64).collect()).unwrap();
            let target = t.constant(target);
            grasp::training::dice_on_tape(t, v[0], target).unwrap()
        }),
    ]
}

/// Worst relative error of each op over all seeds.
pub fn op_errors() -> Vec<(&'static str, f64)> {
    op_cases()
        .into_iter()
        .map(|(name, make, f)| {
            let worst = (0..SEEDS)
                .map(|s| gradcheck(&make(&mut rng(s)), &f))
                .fold(0.0, f64::max);
            (name, worst)
        })
        .collect()
}

/// Worst relative error of the full miniature model's parameter gradients,
/// checked on up to `per_param` random entries of every trainable tensor.
pub fn model_error(seed: u64, sdf_query_mod: bool, per_param: usize) -> f64 {
    let mut model = mini_model(seed);
    if sdf_query_mod {
        let cfg = GraspConfig {
            sdf_query_mod: true,
            ..GraspConfig::miniature()
        };
        model = GraspModel::new(cfg, model.seeds()).unwrap();
    }
    randomize_trainable(&mut model, seed ^ 0x5eed);
    let data = mini_data(seed * 1000 + 1, 2);
    let inst = &data[seed as usize % data.len()];
    let inputs = model.inputs(&inst.image, &inst.visible).unwrap();
    let targets = LossTargets::new(&inst.amodal, &inst.visible).unwrap();
    let (grads, _) = instance_gradients(&model, &inputs, &targets, 1.5).unwrap();

    let mut r = rng(seed);
    let mut worst: f64 = 0.0;
    for (pi, p) in model.store().params().iter().enumerate() {
        if p.group.is_frozen() {
            assert!(grads[pi].is_none(), "frozen {} received a gradient", p.name);
            continue;
        }
        let analytic = grads[pi]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(p.value.shape()));
        for _ in 0..per_param.min(p.value.numel()) {
            let j = r.random_range(0..p.value.numel());
            let loss_at = |delta: f64| {
                let mut m = model.clone();
                m.store_mut().params_mut()[pi].value.data_mut()[j] += delta;
                evaluate_loss(&m, &inputs, &targets, 1.5).unwrap().l_total
            };
            let numeric = (loss_at(FD_STEP) - loss_at(-FD_STEP)) / (2.0 * FD_STEP);
            worst = worst.max(rel_error(analytic.data()[j], numeric));
        }
    }
    worst
}
