//! Linear probing of the pooled signed distance from token features.
//!
//! Features are read either before or after the visible-mask cross-attention,
//! or drawn as seeded Gaussian noise of the same shape as a floor. A ridge
//! regression on column-centered features is fit on an instance-level split.

use std::fmt::Write as _;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{GraspError, Result};
use crate::model::{standard_normal, GraspModel};
use crate::seed::{self, Purpose};
use crate::synthdata::SceneInstance;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbePosition {
    /// Encoder tokens `F`.
    PreCa,
    /// Fused tokens `F′`.
    PostCa,
    RandomBaseline,
}

impl ProbePosition {
    pub const ALL: [ProbePosition; 3] = [
        ProbePosition::PreCa,
        ProbePosition::PostCa,
        ProbePosition::RandomBaseline,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ProbePosition::PreCa => "pre_ca",
            ProbePosition::PostCa => "post_ca",
            ProbePosition::RandomBaseline => "random_baseline",
        }
    }
}

impl FromStr for ProbePosition {
    type Err = GraspError;

    fn from_str(s: &str) -> Result<Self> {
        ProbePosition::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| GraspError::Config(format!("unknown probe position `{s}`")))
    }
}

/// Token features `x` (row-major `n×dim`) with their pooled SDF targets.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeSet {
    pub position: ProbePosition,
    pub dim: usize,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    /// Source instance of every token.
    pub instance: Vec<usize>,
}

impl ProbeSet {
    pub fn new(
        position: ProbePosition,
        dim: usize,
        x: Vec<f64>,
        y: Vec<f64>,
        instance: Vec<usize>,
    ) -> Result<Self> {
        if dim == 0 || x.len() != y.len() * dim || instance.len() != y.len() {
            return Err(GraspError::dim(
                "ProbeSet",
                &[y.len(), dim],
                &[x.len(), instance.len()],
            ));
        }
        Ok(ProbeSet {
            position,
            dim,
            x,
            y,
            instance,
        })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.x[i * self.dim..(i + 1) * self.dim]
    }
}

fn probe_seed(seed: u64, index: usize) -> u64 {
    seed::derive(seed, Purpose::Probe, index as u64 + 1)
}

/// Features at all three positions for every instance, fed the ground-truth
/// visible mask.
pub fn extract_probe_sets(
    model: &GraspModel,
    instances: &[SceneInstance],
    seed: u64,
) -> Result<[ProbeSet; 3]> {
    let per_instance: Vec<(Vec<f64>, Vec<f64>, Vec<f64>)> = instances
        .par_iter()
        .map(|inst| {
            let t = model.forward(&inst.image, &inst.visible)?;
            Ok((t.f.into_data(), t.f_prime.into_data(), t.dbar))
        })
        .collect::<Result<_>>()?;
    let dim = model.config().dim;
    let mut sets = ProbePosition::ALL.map(|p| ProbeSet {
        position: p,
        dim,
        x: Vec::new(),
        y: Vec::new(),
        instance: Vec::new(),
    });
    for (i, (f, f_prime, dbar)) in per_instance.into_iter().enumerate() {
        let noise = standard_normal(&mut seed::rng(probe_seed(seed, i)), f.len());
        for (set, x) in sets.iter_mut().zip([f, f_prime, noise]) {
            set.x.extend(x);
            set.y.extend_from_slice(&dbar);
            set.instance.extend(std::iter::repeat_n(i, dbar.len()));
        }
    }
    Ok(sets)
}

pub fn extract_probe_set(
    model: &GraspModel,
    instances: &[SceneInstance],
    position: ProbePosition,
    seed: u64,
) -> Result<ProbeSet> {
    let [pre, post, random] = extract_probe_sets(model, instances, seed)?;
    Ok(match position {
        ProbePosition::PreCa => pre,
        ProbePosition::PostCa => post,
        ProbePosition::RandomBaseline => random,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RidgeModel {
    pub weights: Vec<f64>,
    pub intercept: f64,
}

impl RidgeModel {
    pub fn predict(&self, row: &[f64]) -> f64 {
        self.intercept
            + row
                .iter()
                .zip(&self.weights)
                .map(|(a, b)| a * b)
                .sum::<f64>()
    }
}

/// In-place Cholesky factor `A = LLᵀ` of a symmetric `n×n` matrix; only the
/// lower triangle is read and written.
fn cholesky(a: &mut [f64], n: usize) -> Result<()> {
    let scale = (0..n)
        .map(|i| a[i * n + i].abs())
        .fold(0.0, f64::max)
        .max(f64::MIN_POSITIVE);
    let tol = n as f64 * f64::EPSILON * scale;
    for j in 0..n {
        let mut d = a[j * n + j];
        for k in 0..j {
            d -= a[j * n + k] * a[j * n + k];
        }
        if d <= tol {
            return Err(GraspError::Singular(
                "normal equations are singular; use a positive ridge penalty".into(),
            ));
        }
        let d = d.sqrt();
        a[j * n + j] = d;
        for i in j + 1..n {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= a[i * n + k] * a[j * n + k];
            }
            a[i * n + j] = s / d;
        }
    }
    Ok(())
}

fn cholesky_solve(l: &[f64], n: usize, b: &mut [f64]) {
    for i in 0..n {
        let s: f64 = (0..i).map(|k| l[i * n + k] * b[k]).sum();
        b[i] = (b[i] - s) / l[i * n + i];
    }
    for i in (0..n).rev() {
        let s: f64 = (i + 1..n).map(|k| l[k * n + i] * b[k]).sum();
        b[i] = (b[i] - s) / l[i * n + i];
    }
}

/// Solves `(XcᵀXc + λI)w = Xcᵀ(y − ȳ)` for column-centered `Xc` and
/// recovers the intercept `ȳ − x̄·w`. `x` is row-major `n×dim`.
pub fn ridge_fit(x: &[f64], dim: usize, y: &[f64], lambda: f64) -> Result<RidgeModel> {
    let n = y.len();
    if dim == 0 || x.len() != n * dim {
        return Err(GraspError::dim("ridge_fit", &[n, dim], &[x.len()]));
    }
    if n <= dim {
        return Err(GraspError::Invalid(format!(
            "{n} samples cannot fit {dim} features"
        )));
    }
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(GraspError::Config(format!(
            "ridge penalty {lambda} must be finite and nonnegative"
        )));
    }
    let mut x_mean = vec![0.0; dim];
    for row in x.chunks_exact(dim) {
        for (m, v) in x_mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    x_mean.iter_mut().for_each(|m| *m /= n as f64);
    let y_mean = y.iter().sum::<f64>() / n as f64;

    let mut gram = vec![0.0; dim * dim];
    let mut rhs = vec![0.0; dim];
    let mut centered = vec![0.0; dim];
    for (row, &yi) in x.chunks_exact(dim).zip(y) {
        for ((c, v), m) in centered.iter_mut().zip(row).zip(&x_mean) {
            *c = v - m;
        }
        let yc = yi - y_mean;
        for i in 0..dim {
            rhs[i] += centered[i] * yc;
            let ci = centered[i];
            for j in 0..=i {
                gram[i * dim + j] += ci * centered[j];
            }
        }
    }
    for i in 0..dim {
        gram[i * dim + i] += lambda;
    }
    cholesky(&mut gram, dim)?;
    cholesky_solve(&gram, dim, &mut rhs);
    let intercept = y_mean - x_mean.iter().zip(&rhs).map(|(a, b)| a * b).sum::<f64>();
    Ok(RidgeModel {
        weights: rhs,
        intercept,
    })
}

/// `1 − SS_res/SS_tot`, undefined when the targets have no variance.
pub fn r_squared(truth: &[f64], predicted: &[f64]) -> Option<f64> {
    if truth.is_empty() {
        return None;
    }
    let mean = truth.iter().sum::<f64>() / truth.len() as f64;
    let ss_tot: f64 = truth.iter().map(|t| (t - mean) * (t - mean)).sum();
    let ss_res: f64 = truth
        .iter()
        .zip(predicted)
        .map(|(t, p)| (t - p) * (t - p))
        .sum();
    (ss_tot > 0.0).then(|| 1.0 - ss_res / ss_tot)
}

/// Fraction of tokens whose predicted side of the boundary (outside when
/// positive) matches the truth.
pub fn sign_accuracy(truth: &[f64], predicted: &[f64]) -> f64 {
    if truth.is_empty() {
        return 0.0;
    }
    let hits = truth
        .iter()
        .zip(predicted)
        .filter(|(t, p)| (**t > 0.0) == (**p > 0.0))
        .count();
    hits as f64 / truth.len() as f64
}

/// Marks a seeded `train_fraction` of instances as training instances.
pub fn instance_split(n_instances: usize, train_fraction: f64, seed: u64) -> Result<Vec<bool>> {
    if n_instances < 2 || !(0.0 < train_fraction && train_fraction < 1.0) {
        return Err(GraspError::Invalid(format!(
            "cannot split {n_instances} instances at fraction {train_fraction}"
        )));
    }
    let n_train =
        ((n_instances as f64 * train_fraction).round() as usize).clamp(1, n_instances - 1);
    let mut order: Vec<usize> = (0..n_instances).collect();
    order.shuffle(&mut seed::rng(seed::derive(seed, Purpose::Probe, 0)));
    let mut is_train = vec![false; n_instances];
    for &i in &order[..n_train] {
        is_train[i] = true;
    }
    Ok(is_train)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub position: ProbePosition,
    /// `None` when the test targets are constant.
    pub r2: Option<f64>,
    pub sign_accuracy: f64,
    pub n_train: usize,
    pub n_test: usize,
    pub lambda: f64,
}

#[derive(Clone, Debug)]
pub struct ProbeOutcome {
    pub result: ProbeResult,
    pub model: RidgeModel,
    /// `(true, predicted)` for every test token.
    pub pairs: Vec<(f64, f64)>,
}

/// Fits on tokens of training instances and scores on the rest.
pub fn fit_probe(set: &ProbeSet, is_train: &[bool], lambda: f64) -> Result<ProbeOutcome> {
    let (mut x_train, mut y_train) = (Vec::new(), Vec::new());
    let mut test = Vec::new();
    for i in 0..set.len() {
        let inst = set.instance[i];
        let Some(&train) = is_train.get(inst) else {
            return Err(GraspError::Invalid(format!(
                "token of unknown instance {inst}"
            )));
        };
        if train {
            x_train.extend_from_slice(set.row(i));
            y_train.push(set.y[i]);
        } else {
            test.push(i);
        }
    }
    let model = ridge_fit(&x_train, set.dim, &y_train, lambda)?;
    let pairs: Vec<(f64, f64)> = test
        .iter()
        .map(|&i| (set.y[i], model.predict(set.row(i))))
        .collect();
    let (truth, pred): (Vec<f64>, Vec<f64>) = pairs.iter().copied().unzip();
    Ok(ProbeOutcome {
        result: ProbeResult {
            position: set.position,
            r2: r_squared(&truth, &pred),
            sign_accuracy: sign_accuracy(&truth, &pred),
            n_train: y_train.len(),
            n_test: test.len(),
            lambda,
        },
        model,
        pairs,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub version: String,
    pub lambda: f64,
    pub seed: u64,
    pub train_instances: usize,
    pub test_instances: usize,
    pub results: Vec<ProbeResult>,
    /// R² after minus R² before the visible-mask attention.
    pub delta_post_minus_pre: Option<f64>,
    #[serde(skip)]
    pub pairs: Vec<(ProbePosition, f64, f64)>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<serde_json::Value>,
}

pub const TRAIN_FRACTION: f64 = 0.8;

pub fn probe_report(
    model: &GraspModel,
    instances: &[SceneInstance],
    lambda: f64,
    seed: u64,
) -> Result<ProbeReport> {
    let is_train = instance_split(instances.len(), TRAIN_FRACTION, seed)?;
    let sets = extract_probe_sets(model, instances, seed)?;
    let mut results = Vec::with_capacity(3);
    let mut pairs = Vec::new();
    for set in &sets {
        let out = fit_probe(set, &is_train, lambda)?;
        pairs.extend(out.pairs.iter().map(|&(t, p)| (set.position, t, p)));
        results.push(out.result);
    }
    let delta_post_minus_pre = match (results[1].r2, results[0].r2) {
        (Some(b), Some(a)) => Some(b - a),
        _ => None,
    };
    let train_instances = is_train.iter().filter(|&&t| t).count();
    Ok(ProbeReport {
        version: crate::VERSION.to_string(),
        lambda,
        seed,
        train_instances,
        test_instances: instances.len() - train_instances,
        results,
        delta_post_minus_pre,
        pairs,
        provenance: None,
    })
}

impl ProbeReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// `position,true,predicted` rows of every test token.
    pub fn pairs_csv(&self, comment: Option<&str>) -> String {
        let mut s = String::new();
        if let Some(c) = comment {
            for line in c.lines() {
                let _ = writeln!(s, "# {line}");
            }
        }
        s.push_str("position,true,predicted\n");
        for (p, t, q) in &self.pairs {
            let _ = writeln!(s, "{},{t},{q}", p.name());
        }
        s
    }
}
