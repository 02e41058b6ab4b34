//! Trajectory collections with min-max normalisation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::{AugmentScheme, CrossArm, Env, Trajectory, HORIZON};
use crate::error::{Error, Result};

/// Half-width of the lateral lane spread in the straight-line dataset.
pub const DEFAULT_LANE: f64 = 0.5;

const ENDPOINT_JITTER: f64 = 0.02;

/// Independent random stream for work item `index` under `seed`.
pub fn rng_for(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Per-dimension min/max; maps `[min, max]` onto `[−1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct NormStats {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl NormStats {
    pub fn from_states(states: &[f64], d: usize) -> Self {
        let mut min = vec![f64::INFINITY; d];
        let mut max = vec![f64::NEG_INFINITY; d];
        for row in states.chunks_exact(d) {
            for j in 0..d {
                min[j] = min[j].min(row[j]);
                max[j] = max[j].max(row[j]);
            }
        }
        Self { min, max }
    }

    pub fn dim(&self) -> usize {
        self.min.len()
    }

    /// Half-range per dimension; constant dimensions use 1 so the map stays invertible.
    pub fn scale(&self, j: usize) -> f64 {
        let h = 0.5 * (self.max[j] - self.min[j]);
        if h > 0.0 {
            h
        } else {
            1.0
        }
    }

    pub fn center(&self, j: usize) -> f64 {
        0.5 * (self.max[j] + self.min[j])
    }

    /// Normalises a row-major block of states in place.
    pub fn normalize(&self, x: &mut [f64]) {
        let d = self.dim();
        for (i, v) in x.iter_mut().enumerate() {
            let j = i % d;
            *v = (*v - self.center(j)) / self.scale(j);
        }
    }

    pub fn denormalize(&self, x: &mut [f64]) {
        let d = self.dim();
        for (i, v) in x.iter_mut().enumerate() {
            let j = i % d;
            *v = *v * self.scale(j) + self.center(j);
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub env: Env,
    pub scheme: AugmentScheme,
    pub horizon: usize,
    /// Raw states in environment units, `[count, T, D]` row-major.
    pub states: Vec<f64>,
    /// `(start arm, end arm)` per trajectory.
    pub labels: Vec<(CrossArm, CrossArm)>,
    pub stats: NormStats,
}

impl Dataset {
    pub fn from_parts(
        env: Env,
        scheme: AugmentScheme,
        horizon: usize,
        states: Vec<f64>,
        labels: Vec<(CrossArm, CrossArm)>,
    ) -> Result<Self> {
        let d = env.state_dim();
        if labels.is_empty() || states.len() != labels.len() * horizon * d {
            return Err(Error::dim(
                "dataset",
                format!(
                    "{} values for {} trajectories of [{horizon}, {d}]",
                    states.len(),
                    labels.len()
                ),
            ));
        }
        if let Some(i) = states.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("dataset value {i} is not finite")));
        }
        let stats = NormStats::from_states(&states, d);
        Ok(Self {
            env,
            scheme,
            horizon,
            states,
            labels,
            stats,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn state_dim(&self) -> usize {
        self.env.state_dim()
    }

    fn block(&self) -> usize {
        self.horizon * self.state_dim()
    }

    pub fn raw(&self, i: usize) -> &[f64] {
        &self.states[i * self.block()..(i + 1) * self.block()]
    }

    pub fn trajectory(&self, i: usize) -> Trajectory {
        Trajectory {
            states: self.raw(i).to_vec(),
            state_dim: self.state_dim(),
            dt: self.env.dt(),
            env_id: self.env.id(),
            scheme: Some(self.scheme.kind),
        }
    }

    pub fn normalized(&self, i: usize) -> Vec<f64> {
        let mut x = self.raw(i).to_vec();
        self.stats.normalize(&mut x);
        x
    }

    /// Largest `‖x_{t+1} − x_t‖` over all trajectories, in normalised units.
    pub fn max_step_jump(&self) -> f64 {
        let d = self.state_dim();
        (0..self.len())
            .map(|i| {
                let x = self.normalized(i);
                x.chunks_exact(d)
                    .zip(x.chunks_exact(d).skip(1))
                    .map(|(a, b)| {
                        a.iter()
                            .zip(b)
                            .map(|(p, q)| (q - p) * (q - p))
                            .sum::<f64>()
                            .sqrt()
                    })
                    .fold(0.0, f64::max)
            })
            .fold(0.0, f64::max)
    }

    /// Content hash of the stored trajectories and labels.
    pub fn fingerprint(&self) -> u64 {
        let mut h = Sha256::new();
        h.update([self.env.id(), self.scheme.kind.code()]);
        h.update((self.horizon as u64).to_le_bytes());
        for v in &self.states {
            h.update(v.to_le_bytes());
        }
        for (a, b) in &self.labels {
            h.update([a.code(), b.code()]);
        }
        let digest = h.finalize();
        u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
    }
}

fn collect(
    env: &Env,
    scheme: &AugmentScheme,
    count: usize,
    seed: u64,
    mut endpoints: impl FnMut(usize, &mut ChaCha8Rng) -> (CrossArm, CrossArm, Vec<f64>, Vec<f64>),
) -> Result<Dataset> {
    scheme.validate()?;
    let d = env.state_dim();
    let mut states = Vec::with_capacity(count * HORIZON * d);
    let mut labels = Vec::with_capacity(count);
    for i in 0..count {
        let mut rng = rng_for(seed, i as u64);
        let (a, b, start, goal) = endpoints(i, &mut rng);
        let (traj, _) = env.rollout(&start, &goal, scheme, HORIZON, &mut rng)?;
        states.extend(traj);
        labels.push((a, b));
    }
    Dataset::from_parts(env.clone(), scheme.clone(), HORIZON, states, labels)
}

fn jitter(rng: &mut ChaCha8Rng) -> [f64; 2] {
    [
        rng.gen_range(-ENDPOINT_JITTER..=ENDPOINT_JITTER),
        rng.gen_range(-ENDPOINT_JITTER..=ENDPOINT_JITTER),
    ]
}

/// Straight crossings between opposite arms of the cross, cycling through
/// the four directed pairs so each gets `n_per_direction` trajectories.
pub fn make_cross_dataset(
    env: &Env,
    n_per_direction: usize,
    scheme: &AugmentScheme,
    seed: u64,
) -> Result<Dataset> {
    if n_per_direction == 0 {
        return Err(Error::Config("n_per_direction must be ≥ 1".into()));
    }
    collect(env, scheme, 4 * n_per_direction, seed, |i, rng| {
        let a = CrossArm::ALL[i % 4];
        let b = a.opposite();
        let start = env.cross_endpoint(a, jitter(rng));
        let goal = env.cross_endpoint(b, jitter(rng));
        (a, b, start, goal)
    })
}

/// Left↔right crossings on lanes offset uniformly in `[−lane, lane]`; the
/// lane is shared by start and goal so every trajectory is straight.
pub fn make_straight_dataset(
    env: &Env,
    count: usize,
    scheme: &AugmentScheme,
    lane: f64,
    seed: u64,
) -> Result<Dataset> {
    if count == 0 {
        return Err(Error::Config("dataset size must be ≥ 1".into()));
    }
    if !(lane.is_finite() && lane >= 0.0) {
        return Err(Error::Config(format!(
            "lane half-width must be finite and ≥ 0, got {lane}"
        )));
    }
    collect(env, scheme, count, seed, |i, rng| {
        let (a, b) = if i % 2 == 0 {
            (CrossArm::Left, CrossArm::Right)
        } else {
            (CrossArm::Right, CrossArm::Left)
        };
        let y = if lane > 0.0 {
            rng.gen_range(-lane..=lane)
        } else {
            0.0
        };
        let start = env.cross_endpoint(a, [0.0, y]);
        let goal = env.cross_endpoint(b, [0.0, y]);
        (a, b, start, goal)
    })
}
