//! Desk-scale environments and their scripted collection controllers.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{AugmentScheme, SchemeKind};
use crate::error::{Error, Result};

/// 2-D double integrator: state `(px, py, vx, vy)`, control = acceleration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ParticleEnv {
    pub dt: f64,
    pub a_max: f64,
    pub kp: f64,
    pub kd: f64,
}

impl Default for ParticleEnv {
    fn default() -> Self {
        Self {
            dt: 0.05,
            a_max: 3.0,
            kp: 5.0,
            kd: 4.0,
        }
    }
}

/// Planar 3-link arm with point masses at the link tips: state `(q, q̇)`,
/// control = joint torque.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArmEnv {
    pub dt: f64,
    pub link_lengths: [f64; 3],
    pub link_masses: [f64; 3],
    pub torque_max: f64,
    pub kp: f64,
    pub kd: f64,
    /// Sample points per link for collision checks.
    pub points_per_link: usize,
}

impl Default for ArmEnv {
    fn default() -> Self {
        Self {
            dt: 0.05,
            link_lengths: [0.5, 0.4, 0.3],
            link_masses: [1.0, 1.0, 1.0],
            torque_max: 20.0,
            kp: 100.0,
            kd: 20.0,
            points_per_link: 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Env {
    Particle(ParticleEnv),
    Arm(ArmEnv),
}

/// Which end of the cross a boundary state sits on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CrossArm {
    Left,
    Right,
    Bottom,
    Top,
}

impl CrossArm {
    pub const ALL: [CrossArm; 4] = [
        CrossArm::Left,
        CrossArm::Right,
        CrossArm::Bottom,
        CrossArm::Top,
    ];

    pub fn opposite(self) -> Self {
        match self {
            CrossArm::Left => CrossArm::Right,
            CrossArm::Right => CrossArm::Left,
            CrossArm::Bottom => CrossArm::Top,
            CrossArm::Top => CrossArm::Bottom,
        }
    }

    /// Unit direction of the arm from the cross centre.
    pub fn direction(self) -> [f64; 2] {
        match self {
            CrossArm::Left => [-1.0, 0.0],
            CrossArm::Right => [1.0, 0.0],
            CrossArm::Bottom => [0.0, -1.0],
            CrossArm::Top => [0.0, 1.0],
        }
    }

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(c: u8) -> Option<Self> {
        Self::ALL.get(c as usize).copied()
    }
}

/// Rejected rollouts are redrawn up to this many times.
pub const ROLLOUT_RETRIES: usize = 10;

const DIVERGENCE_BOUND: f64 = 1e3;

// Plan-tracking gains (critically damped, ~0.3 s time constant).
const TRACK_KP: f64 = 40.0;
const TRACK_KD: f64 = 12.6;

/// Per-step record of what the collection controller did.
#[derive(Clone, Debug, Default)]
pub struct RolloutLog {
    /// Injected control noise per step (empty for schemes without control noise).
    pub noise: Vec<Vec<f64>>,
    /// Applied (clipped) control per step.
    pub controls: Vec<Vec<f64>>,
}

impl Env {
    pub fn particle() -> Self {
        Env::Particle(ParticleEnv::default())
    }

    pub fn arm() -> Self {
        Env::Arm(ArmEnv::default())
    }

    pub fn name(&self) -> &'static str {
        match self {
            Env::Particle(_) => "particle",
            Env::Arm(_) => "arm",
        }
    }

    pub fn id(&self) -> u8 {
        match self {
            Env::Particle(_) => 0,
            Env::Arm(_) => 1,
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "particle" => Ok(Self::particle()),
            "arm" => Ok(Self::arm()),
            _ => Err(Error::Config(format!(
                "unknown env `{name}` (valid: particle, arm)"
            ))),
        }
    }

    pub fn from_id(id: u8) -> Option<Self> {
        match id {
            0 => Some(Self::particle()),
            1 => Some(Self::arm()),
            _ => None,
        }
    }

    pub fn state_dim(&self) -> usize {
        match self {
            Env::Particle(_) => 4,
            Env::Arm(_) => 6,
        }
    }

    pub fn control_dim(&self) -> usize {
        match self {
            Env::Particle(_) => 2,
            Env::Arm(_) => 3,
        }
    }

    /// Number of leading state entries that are positions; the rest are velocities.
    pub fn position_dim(&self) -> usize {
        self.state_dim() / 2
    }

    pub fn dt(&self) -> f64 {
        match self {
            Env::Particle(p) => p.dt,
            Env::Arm(a) => a.dt,
        }
    }

    pub fn control_limit(&self) -> f64 {
        match self {
            Env::Particle(p) => p.a_max,
            Env::Arm(a) => a.torque_max,
        }
    }

    /// Rest state at the end of a cross arm (optionally nudged by `offset`
    /// in the two cross coordinates).
    pub fn cross_endpoint(&self, arm: CrossArm, offset: [f64; 2]) -> Vec<f64> {
        let [dx, dy] = arm.direction();
        match self {
            Env::Particle(_) => vec![dx + offset[0], dy + offset[1], 0.0, 0.0],
            Env::Arm(_) => {
                const CENTRE: [f64; 3] = [0.0, 0.9, -0.6];
                const REACH: f64 = 0.6;
                vec![
                    CENTRE[0] + REACH * dx + offset[0],
                    CENTRE[1] + REACH * dy + offset[1],
                    CENTRE[2],
                    0.0,
                    0.0,
                    0.0,
                ]
            }
        }
    }

    /// Rolls out the scripted controller for `horizon` states (the first is
    /// `start`). Divergent rollouts are redrawn.
    pub fn rollout(
        &self,
        start: &[f64],
        goal: &[f64],
        scheme: &AugmentScheme,
        horizon: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<(Vec<f64>, RolloutLog)> {
        let d = self.state_dim();
        if start.len() != d || goal.len() != d {
            return Err(Error::dim(
                "rollout",
                format!(
                    "states must have {d} entries, got {} and {}",
                    start.len(),
                    goal.len()
                ),
            ));
        }
        if horizon < 2 {
            return Err(Error::Config(format!(
                "rollout horizon must be ≥ 2, got {horizon}"
            )));
        }
        let mut last = String::new();
        for _ in 0..ROLLOUT_RETRIES {
            let (states, log) = self.rollout_once(start, goal, scheme, horizon, rng);
            match states
                .iter()
                .position(|v| !v.is_finite() || v.abs() > DIVERGENCE_BOUND)
            {
                None => return Ok((states, log)),
                Some(i) => last = format!("state entry {i} = {}", states[i]),
            }
        }
        Err(Error::Rollout {
            attempts: ROLLOUT_RETRIES,
            detail: last,
        })
    }

    fn rollout_once(
        &self,
        start: &[f64],
        goal: &[f64],
        scheme: &AugmentScheme,
        horizon: usize,
        rng: &mut ChaCha8Rng,
    ) -> (Vec<f64>, RolloutLog) {
        let d = self.state_dim();
        let p = self.position_dim();
        let nu = self.control_dim();
        let mut start = start.to_vec();
        let mut goal = goal.to_vec();
        if scheme.kind == SchemeKind::RandomPos {
            for i in 0..p {
                start[i] += rng.gen_range(-1.0..=1.0) * scheme.pos_range;
                goal[i] += rng.gen_range(-1.0..=1.0) * scheme.pos_range;
            }
        }
        let noise_std = scheme.noise_std.unwrap_or(0.3 * self.control_limit());
        let normal = Normal::new(0.0, noise_std.max(0.0)).expect("finite std");
        let mut force = ForceEpisodes::default();
        let mut log = RolloutLog::default();
        let mut states = Vec::with_capacity(horizon * d);
        states.extend_from_slice(&start);
        let mut x = start.clone();
        for step in 0..horizon - 1 {
            let mut u = self.control(&x, &start, &goal, step, horizon);
            let noise: Option<Vec<f64>> = match scheme.kind {
                SchemeKind::ActionNoise => Some((0..nu).map(|_| normal.sample(rng)).collect()),
                SchemeKind::SameNoise => {
                    let n = normal.sample(rng);
                    Some(vec![n; nu])
                }
                _ => None,
            };
            if let Some(n) = &noise {
                for (ui, ni) in u.iter_mut().zip(n) {
                    *ui += ni;
                }
                log.noise.push(n.clone());
            }
            let lim = self.control_limit();
            for ui in u.iter_mut() {
                *ui = ui.clamp(-lim, lim);
            }
            log.controls.push(u.clone());
            let ext = if scheme.kind == SchemeKind::RandomForces {
                force.next(rng, nu, scheme.force_scale * lim, scheme.force_prob)
            } else {
                vec![0.0; nu]
            };
            x = self.step(&x, &u, &ext);
            states.extend_from_slice(&x);
        }
        (states, log)
    }

    /// Scripted controller: PD to the goal for the particle, computed torque
    /// tracking a minimum-jerk joint reference for the arm.
    fn control(
        &self,
        x: &[f64],
        start: &[f64],
        goal: &[f64],
        step: usize,
        horizon: usize,
    ) -> Vec<f64> {
        match self {
            Env::Particle(e) => (0..2)
                .map(|i| e.kp * (goal[i] - x[i]) - e.kd * x[2 + i])
                .collect(),
            Env::Arm(e) => {
                let duration = 0.85 * (horizon - 1) as f64 * e.dt;
                let t = step as f64 * e.dt;
                let (s, sd, sdd) = min_jerk(t / duration);
                let mut acc = [0.0; 3];
                for i in 0..3 {
                    let delta = goal[i] - start[i];
                    let q_ref = start[i] + delta * s;
                    let qd_ref = delta * sd / duration;
                    let qdd_ref = delta * sdd / (duration * duration);
                    acc[i] = qdd_ref + e.kp * (q_ref - x[i]) + e.kd * (qd_ref - x[3 + i]);
                }
                let q = [x[0], x[1], x[2]];
                let qd = [x[3], x[4], x[5]];
                let (m, bias) = e.dynamics(&q, &qd);
                (0..3)
                    .map(|i| (0..3).map(|j| m[i][j] * acc[j]).sum::<f64>() + bias[i])
                    .collect()
            }
        }
    }

    /// Executes a planned `[T, D]` state sequence from `start` with a
    /// control-limited tracking controller and returns the realised states.
    /// Plans whose steps the actuators cannot follow drift off course.
    pub fn track(&self, plan: &[f64], start: &[f64]) -> Vec<f64> {
        let d = self.state_dim();
        let horizon = plan.len() / d;
        let lim = self.control_limit();
        let dt = self.dt();
        let mut x = start.to_vec();
        let mut out = Vec::with_capacity(plan.len());
        out.extend_from_slice(&x);
        for k in 0..horizon.saturating_sub(1) {
            let r = &plan[k * d..(k + 1) * d];
            let next = &plan[(k + 1) * d..(k + 2) * d];
            let n = d / 2;
            let acc: Vec<f64> = (0..n)
                .map(|i| {
                    (next[n + i] - r[n + i]) / dt
                        + TRACK_KP * (r[i] - x[i])
                        + TRACK_KD * (r[n + i] - x[n + i])
                })
                .collect();
            let mut u = match self {
                Env::Particle(_) => acc,
                Env::Arm(e) => {
                    let (m, bias) = e.dynamics(&[x[0], x[1], x[2]], &[x[3], x[4], x[5]]);
                    (0..3)
                        .map(|i| (0..3).map(|j| m[i][j] * acc[j]).sum::<f64>() + bias[i])
                        .collect()
                }
            };
            for ui in u.iter_mut() {
                *ui = ui.clamp(-lim, lim);
            }
            x = self.step(&x, &u, &vec![0.0; u.len()]);
            out.extend_from_slice(&x);
        }
        out
    }

    /// One symplectic-Euler step (velocity first, then position) under
    /// control `u` and external generalized force `ext`.
    pub fn step(&self, x: &[f64], u: &[f64], ext: &[f64]) -> Vec<f64> {
        match self {
            Env::Particle(e) => {
                let vx = x[2] + e.dt * (u[0] + ext[0]);
                let vy = x[3] + e.dt * (u[1] + ext[1]);
                vec![x[0] + e.dt * vx, x[1] + e.dt * vy, vx, vy]
            }
            Env::Arm(e) => {
                let q = [x[0], x[1], x[2]];
                let qd = [x[3], x[4], x[5]];
                let (m, bias) = e.dynamics(&q, &qd);
                let rhs = [
                    u[0] + ext[0] - bias[0],
                    u[1] + ext[1] - bias[1],
                    u[2] + ext[2] - bias[2],
                ];
                let qdd = solve3(&m, &rhs);
                let mut out = vec![0.0; 6];
                for i in 0..3 {
                    let mut v = qd[i] + e.dt * qdd[i];
                    let mut p = q[i] + e.dt * v;
                    if p.abs() > std::f64::consts::PI {
                        p = p.clamp(-std::f64::consts::PI, std::f64::consts::PI);
                        v = 0.0;
                    }
                    out[i] = p;
                    out[3 + i] = v;
                }
                out
            }
        }
    }
}

/// Randomly timed external pushes.
#[derive(Default)]
struct ForceEpisodes {
    remaining: usize,
    force: Vec<f64>,
}

impl ForceEpisodes {
    fn next(&mut self, rng: &mut ChaCha8Rng, dim: usize, scale: f64, prob: f64) -> Vec<f64> {
        if self.remaining == 0 && rng.gen_bool(prob.clamp(0.0, 1.0)) {
            self.remaining = rng.gen_range(5..=15);
            let dir: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
            let norm = dir
                .iter()
                .map(|v: &f64| v * v)
                .sum::<f64>()
                .sqrt()
                .max(1e-12);
            let mag = rng.gen_range(0.0..=scale);
            self.force = dir.iter().map(|v| v / norm * mag).collect();
        }
        if self.remaining > 0 {
            self.remaining -= 1;
            self.force.clone()
        } else {
            vec![0.0; dim]
        }
    }
}

/// Minimum-jerk profile and its first two derivatives on `[0, 1]`, held at the ends.
fn min_jerk(tau: f64) -> (f64, f64, f64) {
    if tau >= 1.0 {
        return (1.0, 0.0, 0.0);
    }
    let t = tau.max(0.0);
    let s = t * t * t * (10.0 - 15.0 * t + 6.0 * t * t);
    let sd = 30.0 * t * t * (1.0 - t) * (1.0 - t);
    let sdd = 60.0 * t * (1.0 - t) * (1.0 - 2.0 * t);
    (s, sd, sdd)
}

impl ArmEnv {
    /// Mass matrix and velocity-product bias `c(q, q̇)` with `M q̈ + c = τ`.
    pub fn dynamics(&self, q: &[f64; 3], qd: &[f64; 3]) -> ([[f64; 3]; 3], [f64; 3]) {
        let mut phi = [0.0; 3];
        let mut phid = [0.0; 3];
        let (mut a, mut ad) = (0.0, 0.0);
        for i in 0..3 {
            a += q[i];
            ad += qd[i];
            phi[i] = a;
            phid[i] = ad;
        }
        let l = self.link_lengths;
        let mut m = [[0.0; 3]; 3];
        let mut bias = [0.0; 3];
        for j in 0..3 {
            // Jacobian of tip j and its velocity-product acceleration.
            let mut jac = [[0.0; 3]; 2];
            let mut acc = [0.0; 2];
            for i in 0..=j {
                let (s, c) = phi[i].sin_cos();
                for col in 0..=i {
                    jac[0][col] += -l[i] * s;
                    jac[1][col] += l[i] * c;
                }
                acc[0] -= l[i] * phid[i] * phid[i] * c;
                acc[1] -= l[i] * phid[i] * phid[i] * s;
            }
            let mass = self.link_masses[j];
            for r in 0..3 {
                for c in 0..3 {
                    m[r][c] += mass * (jac[0][r] * jac[0][c] + jac[1][r] * jac[1][c]);
                }
                bias[r] += mass * (jac[0][r] * acc[0] + jac[1][r] * acc[1]);
            }
        }
        for (i, row) in m.iter_mut().enumerate() {
            row[i] += 0.01; // rotor inertia keeps M well conditioned
        }
        (m, bias)
    }
}

fn solve3(m: &[[f64; 3]; 3], b: &[f64; 3]) -> [f64; 3] {
    let det = |a: &[[f64; 3]; 3]| {
        a[0][0] * (a[1][1] * a[2][2] - a[1][2] * a[2][1])
            - a[0][1] * (a[1][0] * a[2][2] - a[1][2] * a[2][0])
            + a[0][2] * (a[1][0] * a[2][1] - a[1][1] * a[2][0])
    };
    let d = det(m);
    let mut out = [0.0; 3];
    for (col, o) in out.iter_mut().enumerate() {
        let mut mc = *m;
        for r in 0..3 {
            mc[r][col] = b[r];
        }
        *o = det(&mc) / d;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn solve3_inverts_mass_matrix() {
        let arm = ArmEnv::default();
        let (m, _) = arm.dynamics(&[0.3, -0.7, 1.1], &[0.0; 3]);
        let x = solve3(&m, &[1.0, -2.0, 0.5]);
        for r in 0..3 {
            let lhs: f64 = (0..3).map(|c| m[r][c] * x[c]).sum();
            assert!((lhs - [1.0, -2.0, 0.5][r]).abs() < 1e-12);
        }
    }

    #[test]
    fn arm_energy_is_conserved_without_torque() {
        // Kinetic energy ½ q̇ᵀ M q̇ drifts only by integration error.
        let env = Env::arm();
        let Env::Arm(arm) = &env else { unreachable!() };
        let energy = |x: &[f64]| {
            let (m, _) = arm.dynamics(&[x[0], x[1], x[2]], &[x[3], x[4], x[5]]);
            let qd = [x[3], x[4], x[5]];
            0.5 * (0..3)
                .map(|r| (0..3).map(|c| qd[r] * m[r][c] * qd[c]).sum::<f64>())
                .sum::<f64>()
        };
        let mut x = vec![0.1, 0.5, -0.4, 0.3, -0.2, 0.4];
        let e0 = energy(&x);
        let arm_small = Env::Arm(ArmEnv {
            dt: 0.001,
            ..arm.clone()
        });
        for _ in 0..500 {
            x = arm_small.step(&x, &[0.0; 3], &[0.0; 3]);
        }
        assert!(
            (energy(&x) - e0).abs() / e0 < 0.02,
            "{} vs {e0}",
            energy(&x)
        );
    }

    #[test]
    fn arm_tracks_joint_goal() {
        let env = Env::arm();
        let start = env.cross_endpoint(CrossArm::Left, [0.0; 2]);
        let goal = env.cross_endpoint(CrossArm::Right, [0.0; 2]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (states, _) = env
            .rollout(&start, &goal, &AugmentScheme::none(), 64, &mut rng)
            .unwrap();
        let last = &states[63 * 6..];
        for i in 0..3 {
            assert!(
                (last[i] - goal[i]).abs() < 0.02,
                "joint {i}: {} vs {}",
                last[i],
                goal[i]
            );
        }
    }

    #[test]
    fn particle_control_respects_limit() {
        let env = Env::particle();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let scheme = AugmentScheme::new(SchemeKind::ActionNoise);
        let (_, log) = env
            .rollout(
                &[-1.0, 0.0, 0.0, 0.0],
                &[1.0, 0.0, 0.0, 0.0],
                &scheme,
                64,
                &mut rng,
            )
            .unwrap();
        assert!(log.controls.iter().flatten().all(|u| u.abs() <= 3.0));
    }

    #[test]
    fn divergent_rollouts_are_rejected_after_retries() {
        let env = Env::Particle(ParticleEnv {
            kp: -1e4,
            kd: -1e4,
            a_max: 1e9,
            ..ParticleEnv::default()
        });
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let err = env
            .rollout(
                &[-1.0, 0.0, 0.0, 0.0],
                &[1.0, 0.0, 0.0, 0.0],
                &AugmentScheme::none(),
                64,
                &mut rng,
            )
            .unwrap_err();
        assert!(matches!(
            err,
            Error::Rollout {
                attempts: ROLLOUT_RETRIES,
                ..
            }
        ));
    }
}
