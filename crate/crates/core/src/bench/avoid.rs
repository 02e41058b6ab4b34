//! Obstacle-avoidance sweep over obstacle radii, plus the two diagnostics
//! that explain its failures: dynamics consistency and mode collapse.

use serde::Serialize;

use crate::error::Result;
use crate::flow::{plan, CostFrame, GuidanceSpec, PlanRequest, VelocityField};
use crate::ndauto::Array;
use crate::world::{collision_points, sdf_circle, CrossArm, Env, Obstacle};

/// Settings shared by every radius of a sweep.
#[derive(Clone, Debug)]
pub struct AvoidTask {
    pub frame: CostFrame,
    pub horizon: usize,
    pub n_steps: usize,
    pub guidance: GuidanceSpec,
    pub use_split: bool,
    pub trials: usize,
    pub goal_tolerance: f64,
    pub seed: u64,
}

impl AvoidTask {
    /// Left-to-right crossing at rest, in environment units.
    pub fn endpoints(&self) -> (Vec<f64>, Vec<f64>) {
        let env = &self.frame.env;
        (
            env.cross_endpoint(CrossArm::Left, [0.0; 2]),
            env.cross_endpoint(CrossArm::Right, [0.0; 2]),
        )
    }

    /// Obstacle of radius `r` centred where the straight plan passes half way.
    pub fn obstacle(&self, r: f64) -> Obstacle {
        let (s, g) = self.endpoints();
        let mid: Vec<f64> = s.iter().zip(&g).map(|(a, b)| 0.5 * (a + b)).collect();
        let pts = collision_points(&self.frame.env, &mid);
        Obstacle::new(pts.last().expect("at least one collision point").0, r)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AvoidTrial {
    pub radius: f64,
    pub trial: usize,
    pub success: bool,
    pub min_sdf: f64,
    pub goal_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AvoidResult {
    pub label: String,
    pub radii: Vec<f64>,
    pub success_rates: Vec<f64>,
    /// Largest radius with success rate ≥ [`RELIABLE_RATE`], or 0.
    pub max_reliable_radius: f64,
    pub scale: f64,
    pub use_split: bool,
}

pub const RELIABLE_RATE: f64 = 0.9;

fn normalized_batch(frame: &CostFrame, state: &[f64], b: usize) -> Array {
    let mut s = state.to_vec();
    frame.stats.normalize(&mut s);
    let d = s.len();
    Array::from_fn(&[b, d], |i| s[i % d])
}

/// Plans `trials` left-to-right crossings around an obstacle of radius `r`
/// (no obstacle for `r = 0`), returning plans in environment units.
pub fn avoid_plans(
    field: &dyn VelocityField,
    task: &AvoidTask,
    r: f64,
    seed: u64,
) -> Result<Vec<f64>> {
    let (s, g) = task.endpoints();
    let mut req = PlanRequest::new(
        normalized_batch(&task.frame, &s, task.trials),
        normalized_batch(&task.frame, &g, task.trials),
        task.horizon,
    );
    req.n_steps = task.n_steps;
    req.seed = seed;
    req.inference_split = task.use_split;
    let mut spec = task.guidance.clone();
    spec.obstacles = if r > 0.0 {
        vec![task.obstacle(r)]
    } else {
        vec![]
    };
    req.guidance = Some(spec);
    let mut plans = plan(field, &req, Some(&task.frame))?.into_data();
    task.frame.stats.denormalize(&mut plans);
    Ok(plans)
}

/// Executes one plan and scores it: the goal must be reached and every
/// collision point must stay strictly outside the obstacle.
pub fn score_trial(
    env: &Env,
    plan: &[f64],
    start: &[f64],
    goal: &[f64],
    obstacle: Option<&Obstacle>,
    tol: f64,
) -> (bool, f64, f64) {
    let run = env.track(plan, start);
    let d = env.state_dim();
    let p = env.position_dim();
    let last = &run[run.len() - d..];
    let goal_error = (0..p)
        .map(|i| (last[i] - goal[i]).powi(2))
        .sum::<f64>()
        .sqrt();
    let min_sdf = match obstacle {
        Some(o) => run
            .chunks_exact(d)
            .flat_map(|x| collision_points(env, x))
            .map(|(q, _)| sdf_circle(q, o))
            .fold(f64::INFINITY, f64::min),
        None => f64::INFINITY,
    };
    let ok = goal_error.is_finite() && goal_error <= tol && min_sdf > 0.0;
    (ok, min_sdf, goal_error)
}

/// Success rate per radius and the largest reliably avoided radius.
pub fn avoid_sweep(
    field: &dyn VelocityField,
    task: &AvoidTask,
    radii: &[f64],
    label: &str,
) -> Result<(AvoidResult, Vec<AvoidTrial>)> {
    let (s, g) = task.endpoints();
    let d = task.frame.env.state_dim();
    let block = task.horizon * d;
    let mut trials = Vec::with_capacity(radii.len() * task.trials);
    let mut rates = Vec::with_capacity(radii.len());
    for (ri, &r) in radii.iter().enumerate() {
        let plans = avoid_plans(field, task, r, task.seed.wrapping_add(ri as u64))?;
        let obstacle = (r > 0.0).then(|| task.obstacle(r));
        let mut ok = 0;
        for k in 0..task.trials {
            let p = &plans[k * block..(k + 1) * block];
            let (success, min_sdf, goal_error) = score_trial(
                &task.frame.env,
                p,
                &s,
                &g,
                obstacle.as_ref(),
                task.goal_tolerance,
            );
            ok += success as usize;
            trials.push(AvoidTrial {
                radius: r,
                trial: k,
                success,
                min_sdf,
                goal_error,
            });
        }
        rates.push(ok as f64 / task.trials as f64);
    }
    let max_reliable_radius = radii
        .iter()
        .zip(&rates)
        .filter(|(_, rate)| **rate >= RELIABLE_RATE)
        .map(|(r, _)| *r)
        .fold(0.0, f64::max);
    Ok((
        AvoidResult {
            label: label.to_string(),
            radii: radii.to_vec(),
            success_rates: rates,
            max_reliable_radius,
            scale: task.guidance.scale,
            use_split: task.use_split,
        },
        trials,
    ))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Consistency {
    /// Largest `‖x_{k+1} − x_k‖` in environment units.
    pub max_jump: f64,
    /// Largest violation of `p_{k+1} = p_k + dt·v_{k+1}` (the integrator the
    /// environments step with).
    pub residual: f64,
    /// Largest implied per-coordinate acceleration `|Δv| / dt`.
    pub max_accel: f64,
}

/// Dynamics-consistency diagnostics of a `[T, D]` trajectory.
pub fn consistency_probe(traj: &[f64], env: &Env) -> Consistency {
    let d = env.state_dim();
    let p = env.position_dim();
    let dt = env.dt();
    let mut out = Consistency {
        max_jump: 0.0,
        residual: 0.0,
        max_accel: 0.0,
    };
    for (a, b) in traj.chunks_exact(d).zip(traj.chunks_exact(d).skip(1)) {
        let jump = a
            .iter()
            .zip(b)
            .map(|(x, y)| (y - x).powi(2))
            .sum::<f64>()
            .sqrt();
        let res = (0..p)
            .map(|i| (b[i] - a[i] - dt * b[p + i]).powi(2))
            .sum::<f64>()
            .sqrt();
        let acc = (0..p)
            .map(|i| ((b[p + i] - a[p + i]) / dt).abs())
            .fold(0.0, f64::max);
        out.max_jump = out.max_jump.max(jump);
        out.residual = out.residual.max(res);
        out.max_accel = out.max_accel.max(acc);
    }
    out
}

/// How guided plans differ from unguided ones with the same noise.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct BendProfile {
    pub step: u64,
    /// Mean drift of the first and last free states.
    pub translate: f64,
    /// Midpoint deviation beyond the rigid drift.
    pub bend: f64,
}

/// Compares guided and unguided plans of one network: `d(k)` is the mean
/// position deviation at index `k`, `translate = (d(1) + d(T−2)) / 2` and
/// `bend = d(T/2) − translate`.
pub fn bend_profile(
    field: &dyn VelocityField,
    task: &AvoidTask,
    radius: f64,
    step: u64,
) -> Result<BendProfile> {
    let guided = avoid_plans(field, task, radius, task.seed)?;
    let mut free = task.clone();
    free.guidance.scale = 0.0;
    let unguided = avoid_plans(field, &free, radius, task.seed)?;
    let d = task.frame.env.state_dim();
    let p = task.frame.env.position_dim();
    let t = task.horizon;
    let dev = |k: usize| {
        (0..task.trials)
            .map(|b| {
                let i = (b * t + k) * d;
                (0..p)
                    .map(|j| (guided[i + j] - unguided[i + j]).powi(2))
                    .sum::<f64>()
                    .sqrt()
            })
            .sum::<f64>()
            / task.trials as f64
    };
    let translate = 0.5 * (dev(1) + dev(t - 2));
    Ok(BendProfile {
        step,
        translate,
        bend: dev(t / 2) - translate,
    })
}

/// Bend/translate profile over a series of checkpoints `(step, net)`.
pub fn mode_collapse_probe(
    series: &[(u64, &dyn VelocityField)],
    task: &AvoidTask,
    radius: f64,
) -> Result<Vec<BendProfile>> {
    series
        .iter()
        .map(|(step, field)| bend_profile(*field, task, radius, *step))
        .collect()
}

/// True when, over the final half of `profile`, the bend metric never falls
/// more than `tolerance` (fraction) below its running peak in that window.
pub fn bend_holds(profile: &[BendProfile], tolerance: f64) -> bool {
    let tail = &profile[profile.len() / 2..];
    let mut peak = f64::NEG_INFINITY;
    tail.iter().all(|p| {
        peak = peak.max(p.bend);
        p.bend >= (1.0 - tolerance) * peak
    })
}
