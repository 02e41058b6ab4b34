//! Stitching error on boundary pairs never seen together in training.

use rand::Rng;
use serde::Serialize;

use crate::error::Result;
use crate::flow::{plan, VelocityField};
use crate::model::Conditioning;
use crate::ndauto::Array;
use crate::world::{rng_for, CrossArm, Dataset};

/// The eight ordered pairs of adjacent cross arms (e.g. left → top). The
/// cross dataset only ever contains opposite pairs.
pub fn same_side_pairs() -> Vec<(CrossArm, CrossArm)> {
    let mut out = Vec::with_capacity(8);
    for a in CrossArm::ALL {
        for b in CrossArm::ALL {
            if a != b && b != a.opposite() {
                out.push((a, b));
            }
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StitchResult {
    pub label: String,
    pub errors: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    /// Largest `‖x_{t+1} − x_t‖` over all plans, normalised units.
    pub max_jump: f64,
    /// Largest deviation of planned endpoints from the requested ones.
    pub endpoint_error: f64,
}

impl StitchResult {
    pub fn from_errors(
        label: impl Into<String>,
        errors: Vec<f64>,
        max_jump: f64,
        endpoint_error: f64,
    ) -> Self {
        let (mean, std) = mean_std(&errors);
        Self {
            label: label.into(),
            errors,
            mean,
            std,
            max_jump,
            endpoint_error,
        }
    }
}

pub(crate) fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (0.0, 0.0);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Mean squared difference between the first/last planned states and the
/// requested boundary states, per plan. Inpainted plans are read at
/// indices 1 and T−2 because their true endpoints are clamped.
pub fn stitch_errors(
    plans: &Array,
    start: &Array,
    goal: &Array,
    conditioning: Conditioning,
) -> Vec<f64> {
    let [b, t, d] = plans.shape()[..] else {
        panic!("plans must be [B, T, D]")
    };
    let (first, last) = match conditioning {
        Conditioning::Inpaint => (1, t - 2),
        Conditioning::Direct => (0, t - 1),
    };
    (0..b)
        .map(|bi| {
            let p = &plans.data()[bi * t * d..(bi + 1) * t * d];
            let mut sq = 0.0;
            for j in 0..d {
                let e0 = p[first * d + j] - start.data()[bi * d + j];
                let e1 = p[last * d + j] - goal.data()[bi * d + j];
                sq += e0 * e0 + e1 * e1;
            }
            sq / (2 * d) as f64
        })
        .collect()
}

/// Largest inter-step jump over a batch of plans.
pub fn max_jump(plans: &Array) -> f64 {
    let [b, t, d] = plans.shape()[..] else {
        panic!("plans must be [B, T, D]")
    };
    let mut worst: f64 = 0.0;
    for bi in 0..b {
        let p = &plans.data()[bi * t * d..(bi + 1) * t * d];
        for k in 0..t - 1 {
            let s: f64 = (0..d)
                .map(|j| (p[(k + 1) * d + j] - p[k * d + j]).powi(2))
                .sum();
            worst = worst.max(s.sqrt());
        }
    }
    worst
}

/// Normalised boundary states for a batch of same-side requests.
pub fn same_side_batch(dataset: &Dataset, batch: usize, rng: &mut impl Rng) -> (Array, Array) {
    let pairs = same_side_pairs();
    let d = dataset.state_dim();
    let (mut s, mut g) = (Vec::with_capacity(batch * d), Vec::with_capacity(batch * d));
    for _ in 0..batch {
        let (a, b) = pairs[rng.gen_range(0..pairs.len())];
        let mut x = dataset.env.cross_endpoint(a, [0.0; 2]);
        let mut y = dataset.env.cross_endpoint(b, [0.0; 2]);
        dataset.stats.normalize(&mut x);
        dataset.stats.normalize(&mut y);
        s.extend(x);
        g.extend(y);
    }
    (
        Array::new(&[batch, d], s).expect("start shape"),
        Array::new(&[batch, d], g).expect("goal shape"),
    )
}

/// Plans `n_batches × batch_size` same-side requests and scores them.
pub fn stitching_benchmark(
    field: &dyn VelocityField,
    dataset: &Dataset,
    n_batches: usize,
    batch_size: usize,
    n_steps: usize,
    seed: u64,
    label: &str,
) -> Result<StitchResult> {
    let mut errors = Vec::with_capacity(n_batches * batch_size);
    let (mut jump, mut ends): (f64, f64) = (0.0, 0.0);
    for k in 0..n_batches {
        let mut rng = rng_for(seed, k as u64);
        let (start, goal) = same_side_batch(dataset, batch_size, &mut rng);
        let mut req = crate::flow::PlanRequest::new(start.clone(), goal.clone(), dataset.horizon);
        req.n_steps = n_steps;
        req.seed = rng.gen();
        let plans = plan(field, &req, None)?;
        errors.extend(stitch_errors(&plans, &start, &goal, field.conditioning()));
        jump = jump.max(max_jump(&plans));
        let (s, g) = crate::flow::endpoints(&plans);
        for (a, b) in s
            .data()
            .iter()
            .chain(g.data())
            .zip(start.data().iter().chain(goal.data()))
        {
            ends = ends.max((a - b).abs());
        }
    }
    Ok(StitchResult::from_errors(label, errors, jump, ends))
}

/// One stitching benchmark per `(label, net, dataset)` cell, identical
/// protocol and seed for every cell.
pub fn augmentation_benchmark(
    cells: &[(&str, &dyn VelocityField, &Dataset)],
    n_batches: usize,
    batch_size: usize,
    n_steps: usize,
    seed: u64,
) -> Result<Vec<StitchResult>> {
    cells
        .iter()
        .map(|(label, field, ds)| {
            stitching_benchmark(*field, ds, n_batches, batch_size, n_steps, seed, label)
        })
        .collect()
}
