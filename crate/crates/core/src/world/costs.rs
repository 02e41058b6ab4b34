//! Planning costs with analytic gradients, evaluated in environment units.

use serde::{Deserialize, Serialize};

use super::Env;

/// Hinge margin: points closer than this to an obstacle surface are penalised.
pub const DEFAULT_MARGIN: f64 = 0.03;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Obstacle {
    pub center: [f64; 2],
    pub radius: f64,
}

impl Obstacle {
    pub fn new(center: [f64; 2], radius: f64) -> Self {
        Self { center, radius }
    }
}

pub fn sdf_circle(p: [f64; 2], o: &Obstacle) -> f64 {
    (p[0] - o.center[0]).hypot(p[1] - o.center[1]) - o.radius
}

/// Gradient of [`sdf_circle`]; zero at the centre where it is undefined.
pub fn sdf_circle_grad(p: [f64; 2], o: &Obstacle) -> [f64; 2] {
    let (dx, dy) = (p[0] - o.center[0], p[1] - o.center[1]);
    let n = dx.hypot(dy);
    if n == 0.0 {
        [0.0, 0.0]
    } else {
        [dx / n, dy / n]
    }
}

/// Sample points of a planar chain rooted at the origin: `k` evenly spaced
/// points per link, the last one at the link tip.
pub fn fk_planar(q: &[f64; 3], lengths: &[f64; 3], k: usize) -> Vec<[f64; 2]> {
    let mut pts = Vec::with_capacity(3 * k);
    let (mut base, mut phi) = ([0.0, 0.0], 0.0);
    for i in 0..3 {
        phi += q[i];
        let (s, c) = phi.sin_cos();
        for j in 1..=k {
            let f = j as f64 / k as f64 * lengths[i];
            pts.push([base[0] + f * c, base[1] + f * s]);
        }
        base = [base[0] + lengths[i] * c, base[1] + lengths[i] * s];
    }
    pts
}

/// `∂p/∂q` for every point returned by [`fk_planar`], as `[row x, row y]`.
pub fn fk_planar_jacobian(q: &[f64; 3], lengths: &[f64; 3], k: usize) -> Vec<[[f64; 3]; 2]> {
    let mut phi = [0.0; 3];
    let mut acc = 0.0;
    for i in 0..3 {
        acc += q[i];
        phi[i] = acc;
    }
    let mut out = Vec::with_capacity(3 * k);
    for i in 0..3 {
        for j in 1..=k {
            let f = j as f64 / k as f64;
            let mut jac = [[0.0; 3]; 2];
            for link in 0..=i {
                let len = if link == i {
                    f * lengths[i]
                } else {
                    lengths[link]
                };
                let (s, c) = phi[link].sin_cos();
                // link angle depends on every joint up to and including `link`
                for m in 0..=link {
                    jac[0][m] -= len * s;
                    jac[1][m] += len * c;
                }
            }
            out.push(jac);
        }
    }
    out
}

/// Collision points of one state and their Jacobians with respect to the
/// state's position entries.
pub fn collision_points(env: &Env, state: &[f64]) -> Vec<([f64; 2], Vec<[f64; 2]>)> {
    match env {
        Env::Particle(_) => vec![([state[0], state[1]], vec![[1.0, 0.0], [0.0, 1.0]])],
        Env::Arm(arm) => {
            let q = [state[0], state[1], state[2]];
            let pts = fk_planar(&q, &arm.link_lengths, arm.points_per_link);
            let jacs = fk_planar_jacobian(&q, &arm.link_lengths, arm.points_per_link);
            pts.into_iter()
                .zip(jacs)
                .map(|(p, j)| (p, (0..3).map(|m| [j[0][m], j[1][m]]).collect()))
                .collect()
        }
    }
}

/// `Σ_t Σ_points Σ_obstacles max(0, margin − sdf)` over a row-major
/// `[T, D]` trajectory, with its gradient.
pub fn collision_cost(
    states: &[f64],
    env: &Env,
    obstacles: &[Obstacle],
    margin: f64,
) -> (f64, Vec<f64>) {
    let d = env.state_dim();
    let mut grad = vec![0.0; states.len()];
    let mut cost = 0.0;
    for (row, g) in states.chunks_exact(d).zip(grad.chunks_exact_mut(d)) {
        for (p, jac) in collision_points(env, row) {
            for o in obstacles {
                let gap = margin - sdf_circle(p, o);
                if gap > 0.0 {
                    cost += gap;
                    let s = sdf_circle_grad(p, o);
                    for (m, col) in jac.iter().enumerate() {
                        g[m] -= s[0] * col[0] + s[1] * col[1];
                    }
                }
            }
        }
    }
    (cost, grad)
}

/// `Σ_t ‖x_{t+1} − x_t‖²` over the first `pos_dim` entries of each state.
pub fn smoothness_cost(states: &[f64], d: usize, pos_dim: usize) -> (f64, Vec<f64>) {
    let t = states.len() / d;
    let mut grad = vec![0.0; states.len()];
    let mut cost = 0.0;
    for i in 0..t.saturating_sub(1) {
        for j in 0..pos_dim {
            let diff = states[(i + 1) * d + j] - states[i * d + j];
            cost += diff * diff;
            grad[(i + 1) * d + j] += 2.0 * diff;
            grad[i * d + j] -= 2.0 * diff;
        }
    }
    (cost, grad)
}
