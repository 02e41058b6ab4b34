//! Environments, scripted data collection, augmentation schemes and
//! differentiable planning costs.

mod costs;
mod dataset;
mod env;

pub use costs::{
    collision_cost, collision_points, fk_planar, fk_planar_jacobian, sdf_circle, sdf_circle_grad,
    smoothness_cost, Obstacle, DEFAULT_MARGIN,
};
pub use dataset::{
    make_cross_dataset, make_straight_dataset, rng_for, Dataset, NormStats, DEFAULT_LANE,
};
pub use env::{ArmEnv, CrossArm, Env, ParticleEnv, RolloutLog, ROLLOUT_RETRIES};

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default episode length.
pub const HORIZON: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchemeKind {
    None,
    ActionNoise,
    SameNoise,
    RandomPos,
    RandomForces,
}

impl SchemeKind {
    pub const ALL: [SchemeKind; 5] = [
        SchemeKind::None,
        SchemeKind::ActionNoise,
        SchemeKind::SameNoise,
        SchemeKind::RandomPos,
        SchemeKind::RandomForces,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SchemeKind::None => "none",
            SchemeKind::ActionNoise => "action_noise",
            SchemeKind::SameNoise => "same_noise",
            SchemeKind::RandomPos => "random_pos",
            SchemeKind::RandomForces => "random_forces",
        }
    }

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(c: u8) -> Option<Self> {
        Self::ALL.get(c as usize).copied()
    }
}

impl FromStr for SchemeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| {
                let names: Vec<_> = Self::ALL.iter().map(|k| k.name()).collect();
                Error::Config(format!(
                    "unknown scheme `{s}` (valid: {})",
                    names.join(", ")
                ))
            })
    }
}

impl std::fmt::Display for SchemeKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// How collection rollouts are perturbed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentScheme {
    pub kind: SchemeKind,
    /// Control noise std in control units; `None` means 0.3 × the control limit.
    pub noise_std: Option<f64>,
    /// Half-width of the uniform start/goal position perturbation.
    pub pos_range: f64,
    /// External force magnitude bound as a fraction of the control limit.
    pub force_scale: f64,
    /// Per-step probability that a force episode begins.
    pub force_prob: f64,
}

impl Default for AugmentScheme {
    fn default() -> Self {
        Self::new(SchemeKind::ActionNoise)
    }
}

impl AugmentScheme {
    pub fn new(kind: SchemeKind) -> Self {
        Self {
            kind,
            noise_std: None,
            pos_range: 0.2,
            force_scale: 1.0,
            force_prob: 0.05,
        }
    }

    pub fn none() -> Self {
        Self::new(SchemeKind::None)
    }

    pub fn with_noise_std(mut self, std: f64) -> Self {
        self.noise_std = Some(std);
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |name: &str, v: f64| {
            Error::Config(format!("scheme {name} must be finite and ≥ 0, got {v}"))
        };
        if let Some(s) = self.noise_std {
            if !(s.is_finite() && s >= 0.0) {
                return Err(bad("noise_std", s));
            }
        }
        for (name, v) in [
            ("pos_range", self.pos_range),
            ("force_scale", self.force_scale),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(bad(name, v));
            }
        }
        if !(0.0..=1.0).contains(&self.force_prob) {
            return Err(Error::Config(format!(
                "scheme force_prob must lie in [0, 1], got {}",
                self.force_prob
            )));
        }
        Ok(())
    }
}

/// A fixed-horizon state sequence in environment units.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    /// Row-major `[T, D]`.
    pub states: Vec<f64>,
    pub state_dim: usize,
    pub dt: f64,
    pub env_id: u8,
    pub scheme: Option<SchemeKind>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.states.len() / self.state_dim
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn state(&self, i: usize) -> &[f64] {
        &self.states[i * self.state_dim..(i + 1) * self.state_dim]
    }
}

/// Largest absolute pairwise Pearson correlation between control
/// dimensions of the injected noise, over at least `steps` control steps.
/// Schemes that inject no control noise report 0.
pub fn noise_correlation(
    env: &Env,
    scheme: &AugmentScheme,
    steps: usize,
    seed: u64,
) -> Result<f64> {
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(steps);
    let mut episode = 0u64;
    while rows.len() < steps {
        let mut rng = rng_for(seed, episode);
        let start = env.cross_endpoint(CrossArm::Left, [0.0; 2]);
        let goal = env.cross_endpoint(CrossArm::Right, [0.0; 2]);
        let (_, log) = env.rollout(&start, &goal, scheme, HORIZON, &mut rng)?;
        if log.noise.is_empty() {
            return Ok(0.0);
        }
        rows.extend(log.noise);
        episode += 1;
    }
    Ok(max_cross_correlation(&rows))
}

pub(crate) fn max_cross_correlation(rows: &[Vec<f64>]) -> f64 {
    let n = rows.len() as f64;
    let dim = rows.first().map_or(0, Vec::len);
    let mean: Vec<f64> = (0..dim)
        .map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n)
        .collect();
    let mut worst: f64 = 0.0;
    for a in 0..dim {
        for b in a + 1..dim {
            let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
            for r in rows {
                let (x, y) = (r[a] - mean[a], r[b] - mean[b]);
                sab += x * y;
                saa += x * x;
                sbb += y * y;
            }
            let denom = (saa * sbb).sqrt();
            if denom > 0.0 {
                worst = worst.max((sab / denom).abs());
            }
        }
    }
    worst
}
