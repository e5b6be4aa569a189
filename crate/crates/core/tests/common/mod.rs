//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

pub mod contracts;
pub mod fixtures;
pub mod gradients;

use grasp::geometry::{edt, squared_distance_to, BinaryMask};
use grasp::model::{GraspConfig, GraspModel, ModelSeeds};
use grasp::probe::{ridge_fit, ProbePosition, ProbeSet};
use grasp::synthdata::{generate_dataset, SceneConfig, SceneInstance};
use grasp::tensor::{Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub const FD_STEP: f64 = 1e-5;
/// Magnitude below which gradient entries are compared absolutely.
pub const REL_FLOOR: f64 = 1e-3;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(-1.5..1.5)).collect(),
    )
    .unwrap()
}

/// Largest relative error between the tape gradient of `Σ w⊙f(inputs)` and
/// its central finite difference, for a fixed random weighting `w`.
pub fn gradcheck(inputs: &[Tensor], f: &dyn Fn(&mut Tape, &[Var]) -> Var) -> f64 {
    let weighted = |tape: &mut Tape, vars: &[Var], w: &mut Option<Tensor>| -> Var {
        let y = f(tape, vars);
        let shape = tape.value(y).shape().to_vec();
        let wt = w
            .get_or_insert_with(|| random_tensor(&mut rng(0xfeed), &shape))
            .clone();
        let wv = tape.constant(wt);
        let prod = tape.mul(y, wv).unwrap();
        tape.sum(prod)
    };
    let mut w = None;
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = weighted(&mut tape, &vars, &mut w);
    let grads = tape.backward(out).unwrap();

    let value_at = |perturbed: &[Tensor], w: &mut Option<Tensor>| -> f64 {
        let mut t = Tape::new();
        let vs: Vec<Var> = perturbed.iter().map(|x| t.constant(x.clone())).collect();
        let o = weighted(&mut t, &vs, w);
        t.value(o).item()
    };
    let mut worst: f64 = 0.0;
    for (i, input) in inputs.iter().enumerate() {
        let analytic = grads
            .get(vars[i])
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(input.shape()));
        for j in 0..input.numel() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= FD_STEP;
            let numeric = (value_at(&plus, &mut w) - value_at(&minus, &mut w)) / (2.0 * FD_STEP);
            worst = worst.max(rel_error(analytic.data()[j], numeric));
        }
    }
    worst
}

/// Squared distance from every pixel to the nearest pixel whose value is
/// `class`, by exhaustive search. `None` when no such pixel exists.
pub fn brute_force_sq_distance(mask: &BinaryMask, class: bool) -> Vec<Option<u64>> {
    let (h, w) = mask.dims();
    let targets: Vec<(i64, i64)> = (0..h * w)
        .filter(|&i| mask.bits()[i] == class)
        .map(|i| ((i / w) as i64, (i % w) as i64))
        .collect();
    (0..h * w)
        .map(|i| {
            let (r, c) = ((i / w) as i64, (i % w) as i64);
            targets
                .iter()
                .map(|&(y, x)| ((y - r).pow(2) + (x - c).pow(2)) as u64)
                .min()
        })
        .collect()
}

/// Random mask of overlapping rectangles and scattered pixels.
pub fn random_mask(rng: &mut ChaCha8Rng, h: usize, w: usize) -> BinaryMask {
    let mut m = BinaryMask::empty(h, w);
    for _ in 0..rng.random_range(0..4) {
        let (r0, c0) = (rng.random_range(0..h), rng.random_range(0..w));
        let (r1, c1) = (
            (r0 + rng.random_range(1..h / 2)).min(h),
            (c0 + rng.random_range(1..w / 2)).min(w),
        );
        for r in r0..r1 {
            for c in c0..c1 {
                m.set(r, c, true);
            }
        }
    }
    let density = rng.random_range(0.0..0.05);
    for r in 0..h {
        for c in 0..w {
            if rng.random_bool(density) {
                m.set(r, c, true);
            }
        }
    }
    m
}

/// Ridge weights and intercept from the uncentered augmented normal
/// equations, solved by LU: `[X 1]` with the penalty on the weights only.
pub fn normal_equations_ridge(x: &[f64], dim: usize, y: &[f64], lambda: f64) -> (Vec<f64>, f64) {
    let n = y.len();
    let a = nalgebra::DMatrix::from_fn(
        n,
        dim + 1,
        |i, j| if j < dim { x[i * dim + j] } else { 1.0 },
    );
    let mut lhs = a.transpose() * &a;
    for j in 0..dim {
        lhs[(j, j)] += lambda;
    }
    let rhs = a.transpose() * nalgebra::DVector::from_column_slice(y);
    let sol = lhs.lu().solve(&rhs).expect("nonsingular");
    (sol.as_slice()[..dim].to_vec(), sol[dim])
}

pub fn mini_scene() -> SceneConfig {
    SceneConfig {
        size: 16,
        ..SceneConfig::default()
    }
}

pub fn mini_data(base: u64, scenes: usize) -> Vec<SceneInstance> {
    generate_dataset(base, scenes, &mini_scene()).unwrap()
}

pub fn mini_model(seed: u64) -> GraspModel {
    GraspModel::new(GraspConfig::miniature(), ModelSeeds::from_base(seed)).unwrap()
}

/// Moves every trainable parameter off its initial value, including the
/// zero-initialized scalars, so that every path carries gradient.
pub fn randomize_trainable(model: &mut GraspModel, seed: u64) {
    let mut r = rng(seed);
    for p in model.store_mut().params_mut() {
        if p.group.is_frozen() {
            continue;
        }
        let scale = if p.value.numel() == 1 { 0.8 } else { 0.3 };
        for v in p.value.data_mut() {
            *v += r.random_range(-scale..scale);
        }
    }
}

/// Masks whose exact transform disagrees with exhaustive search, out of `n`.
pub fn edt_mismatches(n: u64) -> usize {
    (0..n)
        .filter(|&s| {
            let m = random_mask(&mut rng(s), 32, 32);
            let exact = edt(&m);
            let to_true = brute_force_sq_distance(&m, true);
            let to_false = brute_force_sq_distance(&m, false);
            let expected: Vec<Option<u64>> = m
                .bits()
                .iter()
                .enumerate()
                .map(|(i, &b)| if b { to_false[i] } else { to_true[i] })
                .collect();
            exact.squared != expected || squared_distance_to(&m, true) != to_true
        })
        .count()
}

/// Largest coefficient relative error against the LU normal-equations solve
/// over `trials` random 20×5 systems.
pub fn ridge_vs_normal_equations(trials: u64) -> f64 {
    let mut worst: f64 = 0.0;
    for s in 0..trials {
        let mut r = rng(s);
        let x: Vec<f64> = (0..100).map(|_| r.random_range(-2.0..2.0)).collect();
        let y: Vec<f64> = (0..20).map(|_| r.random_range(-1.0..1.0)).collect();
        let lambda = [1e-3, 1.0, 10.0][s as usize % 3];
        let fit = ridge_fit(&x, 5, &y, lambda).unwrap();
        let (w, b) = normal_equations_ridge(&x, 5, &y, lambda);
        for (a, e) in fit
            .weights
            .iter()
            .chain([&fit.intercept])
            .zip(w.iter().chain([&b]))
        {
            worst = worst.max((a - e).abs() / e.abs().max(1e-12));
        }
    }
    worst
}

/// Gaussian features of `tokens_per_instance` tokens each, with targets
/// either planted along one coordinate or independent of the features.
pub fn synthetic_set(
    instances: usize,
    tokens_per_instance: usize,
    dim: usize,
    planted: bool,
    seed: u64,
) -> ProbeSet {
    let mut r = rng(seed);
    let n = instances * tokens_per_instance;
    let x: Vec<f64> = (0..n * dim)
        .map(|_| StandardNormal.sample(&mut r))
        .collect();
    let y: Vec<f64> = (0..n)
        .map(|i| {
            if planted {
                0.4 * x[i * dim + dim - 1] - 0.1
            } else {
                r.random_range(-1.0..1.0)
            }
        })
        .collect();
    let instance = (0..n).map(|i| i / tokens_per_instance).collect();
    ProbeSet::new(ProbePosition::RandomBaseline, dim, x, y, instance).unwrap()
}
