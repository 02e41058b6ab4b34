//! Euler integration of the learned flow with inpainting, cost guidance and
//! inference-time trajectory splitting.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::VelocityField;
use crate::error::{Error, Result};
use crate::model::{Cond, Conditioning};
use crate::ndauto::Array;
use crate::world::{collision_cost, smoothness_cost, Env, NormStats, Obstacle, DEFAULT_MARGIN};

/// Weighting `b_t` of the guidance term over flow time.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BtSchedule {
    OneMinusT,
    OtRatio,
}

impl BtSchedule {
    pub fn weight(self, t: f64) -> f64 {
        match self {
            BtSchedule::OneMinusT => 1.0 - t,
            BtSchedule::OtRatio => (1.0 - t) / t.max(1e-3),
        }
    }
}

impl std::str::FromStr for BtSchedule {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "one_minus_t" => Ok(BtSchedule::OneMinusT),
            "ot_ratio" => Ok(BtSchedule::OtRatio),
            _ => Err(Error::Config(format!(
                "unknown b_t schedule `{s}` (valid: one_minus_t, ot_ratio)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GuidanceSpec {
    pub obstacles: Vec<Obstacle>,
    pub collision_weight: f64,
    pub smoothness_weight: f64,
    pub scale: f64,
    pub schedule: BtSchedule,
    pub margin: f64,
}

impl Default for GuidanceSpec {
    fn default() -> Self {
        Self {
            obstacles: Vec::new(),
            collision_weight: 0.1,
            smoothness_weight: 1e-6,
            scale: 1.0,
            schedule: BtSchedule::OneMinusT,
            margin: DEFAULT_MARGIN,
        }
    }
}

impl GuidanceSpec {
    pub fn validate(&self) -> Result<()> {
        for o in &self.obstacles {
            if !(o.radius > 0.0 && o.radius.is_finite()) {
                return Err(Error::Config(format!(
                    "obstacle radius must be positive, got {}",
                    o.radius
                )));
            }
        }
        for (name, v) in [
            ("collision_weight", self.collision_weight),
            ("smoothness_weight", self.smoothness_weight),
            ("margin", self.margin),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!(
                    "{name} must be finite and ≥ 0, got {v}"
                )));
            }
        }
        if !self.scale.is_finite() {
            return Err(Error::Config(format!(
                "guidance scale must be finite, got {}",
                self.scale
            )));
        }
        Ok(())
    }
}

/// What the costs need to read normalised states: the environment and the
/// dataset's normalisation.
#[derive(Clone, Debug)]
pub struct CostFrame {
    pub env: Env,
    pub stats: NormStats,
}

/// One planning call in normalised units; `start`/`goal` are `[B, D]`.
#[derive(Clone, Debug)]
pub struct PlanRequest {
    pub start: Array,
    pub goal: Array,
    pub horizon: usize,
    pub n_steps: usize,
    pub guidance: Option<GuidanceSpec>,
    pub inference_split: bool,
    /// Keep guidance active while re-denoising the halves.
    pub split_guidance: bool,
    pub seed: u64,
}

impl PlanRequest {
    pub fn new(start: Array, goal: Array, horizon: usize) -> Self {
        Self {
            start,
            goal,
            horizon,
            n_steps: 10,
            guidance: None,
            inference_split: false,
            split_guidance: true,
            seed: 0,
        }
    }

    pub fn batch(&self) -> usize {
        self.start.shape()[0]
    }

    fn validate(&self, field: &dyn VelocityField) -> Result<()> {
        if self.n_steps == 0 {
            return Err(Error::Config("n_steps must be ≥ 1".into()));
        }
        if self.start.ndim() != 2 || self.start.shape() != self.goal.shape() {
            return Err(Error::dim(
                "plan",
                format!(
                    "start {:?} and goal {:?} must both be [B, D]",
                    self.start.shape(),
                    self.goal.shape()
                ),
            ));
        }
        if let Some(g) = &self.guidance {
            g.validate()?;
        }
        field.check_length(self.horizon)
    }
}

/// Counts Euler steps per integration loop.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SplitReport {
    pub first_half_steps: usize,
    pub second_half_steps: usize,
}

pub(crate) fn row(x: &Array, k: usize) -> Array {
    let [b, t, d] = x.shape()[..] else {
        unreachable!()
    };
    Array::from_fn(&[b, d], |i| x.data()[(i / d) * t * d + k * d + i % d])
}

fn time_slice(x: &Array, from: usize, len: usize) -> Array {
    let [b, t, d] = x.shape()[..] else {
        unreachable!()
    };
    Array::from_fn(&[b, len, d], |i| {
        let (bi, rest) = (i / (len * d), i % (len * d));
        x.data()[bi * t * d + from * d + rest]
    })
}

/// Sets `x[:, 0] = start` and `x[:, T−1] = goal`; interior states are
/// untouched. Training applies the same clamp to `x_t`, so the network always
/// sees clean boundary states.
pub fn inpaint_clamp(x: &mut Array, start: &Array, goal: &Array) {
    let [b, len, d] = x.shape()[..] else {
        panic!("inpaint_clamp expects [B, T, D]")
    };
    let data = x.data_mut();
    for bi in 0..b {
        for (k, src) in [(0, start), (len - 1, goal)] {
            let row = bi * len * d + k * d;
            data[row..row + d].copy_from_slice(&src.data()[bi * d..(bi + 1) * d]);
        }
    }
}

/// `u = net(x, t) + b_t · scale · ∇_x(−cost(x))`, with costs evaluated on
/// denormalised states and chained back through the normalisation.
pub fn guided_velocity(
    field: &dyn VelocityField,
    x: &Array,
    t: f64,
    cond: Option<Cond<'_>>,
    guidance: Option<&GuidanceSpec>,
    frame: Option<&CostFrame>,
) -> Result<Array> {
    let [b, len, d] = x.shape()[..] else {
        return Err(Error::dim(
            "guided_velocity",
            format!("x must be [B, T, D], got {:?}", x.shape()),
        ));
    };
    let mut u = field.velocity(x, &vec![t; b], cond)?;
    let Some(spec) = guidance else { return Ok(u) };
    if spec.scale == 0.0 {
        return Ok(u);
    }
    let frame = frame.ok_or_else(|| {
        Error::Contract("guidance needs the environment and normalisation".into())
    })?;
    let w = spec.schedule.weight(t) * spec.scale;
    if w == 0.0 {
        return Ok(u);
    }
    let pos = frame.env.position_dim();
    let block = len * d;
    for bi in 0..b {
        let mut y = x.data()[bi * block..(bi + 1) * block].to_vec();
        frame.stats.denormalize(&mut y);
        let (_, gc) = collision_cost(&y, &frame.env, &spec.obstacles, spec.margin);
        let (_, gs) = smoothness_cost(&y, d, pos);
        for (term, g) in [("collision", &gc), ("smoothness", &gs)] {
            if let Some(i) = g.iter().position(|v| !v.is_finite()) {
                return Err(Error::Guidance {
                    term,
                    detail: format!("gradient entry {i} of sample {bi} is {} at t = {t}", g[i]),
                });
            }
        }
        let out = &mut u.data_mut()[bi * block..(bi + 1) * block];
        for i in 0..block {
            let g = spec.collision_weight * gc[i] + spec.smoothness_weight * gs[i];
            out[i] -= w * g * frame.stats.scale(i % d);
        }
    }
    Ok(u)
}

/// Euler integration from flow time `t0` to 1 in `n_steps` uniform steps.
/// Inpainting fields get their boundary rows clamped before the first and
/// after every step; direct fields receive the boundaries as condition.
#[allow(clippy::too_many_arguments)]
pub fn integrate(
    field: &dyn VelocityField,
    mut x: Array,
    start: &Array,
    goal: &Array,
    t0: f64,
    n_steps: usize,
    guidance: Option<&GuidanceSpec>,
    frame: Option<&CostFrame>,
    counter: &mut usize,
) -> Result<Array> {
    let inpaint = field.conditioning() == Conditioning::Inpaint;
    let cond = (!inpaint).then_some(Cond { start, goal });
    let h = (1.0 - t0) / n_steps as f64;
    if inpaint {
        inpaint_clamp(&mut x, start, goal);
    }
    for k in 0..n_steps {
        let t = t0 + k as f64 * h;
        let u = guided_velocity(field, &x, t, cond, guidance, frame)?;
        x.add_assign_scaled(&u, h);
        let t_next = if k + 1 == n_steps {
            1.0
        } else {
            t0 + (k + 1) as f64 * h
        };
        if inpaint {
            inpaint_clamp(&mut x, start, goal);
        }
        *counter += 1;
        if !x.all_finite() {
            return Err(Error::Sampling {
                step: k + 1,
                detail: format!("state became non-finite at t = {t_next}"),
            });
        }
    }
    Ok(x)
}

/// Samples `[B, T, D]` plans (normalised units) from noise at `t = 0`.
pub fn euler_sample(
    field: &dyn VelocityField,
    req: &PlanRequest,
    frame: Option<&CostFrame>,
) -> Result<Array> {
    let mut rng = ChaCha8Rng::seed_from_u64(req.seed);
    euler_sample_with(field, req, frame, &mut rng)
}

pub(crate) fn euler_sample_with(
    field: &dyn VelocityField,
    req: &PlanRequest,
    frame: Option<&CostFrame>,
    rng: &mut ChaCha8Rng,
) -> Result<Array> {
    req.validate(field)?;
    let shape = [req.batch(), req.horizon, req.start.shape()[1]];
    let x0 = Array::from_fn(&shape, |_| StandardNormal.sample(rng));
    let mut steps = 0;
    integrate(
        field,
        x0,
        &req.start,
        &req.goal,
        0.0,
        req.n_steps,
        req.guidance.as_ref(),
        frame,
        &mut steps,
    )
}

/// Re-noises `initial` to `t = 0.5`, cuts it at `T/2` and re-denoises each
/// half with `ceil(n_steps / 2)` steps. The first half is pinned to
/// `(start, initial[T/2−1])`, the second to `(initial[T/2], goal)`.
pub fn split_inference(
    field: &dyn VelocityField,
    req: &PlanRequest,
    initial: &Array,
    frame: Option<&CostFrame>,
    rng: &mut ChaCha8Rng,
) -> Result<(Array, SplitReport)> {
    req.validate(field)?;
    let [b, len, d] = initial.shape()[..] else {
        return Err(Error::dim(
            "split_inference",
            format!("initial must be [B, T, D], got {:?}", initial.shape()),
        ));
    };
    if len % 2 != 0 {
        return Err(Error::Length(format!(
            "cannot split odd horizon {len} into halves"
        )));
    }
    let m = len / 2;
    field.check_length(m)?;
    let eps = Array::from_fn(initial.shape(), |_| StandardNormal.sample(rng));
    let renoised = initial.zip_map(&eps, |a, e| 0.5 * a + 0.5 * e)?;
    let steps = req.n_steps.div_ceil(2);
    let guidance = if req.split_guidance {
        req.guidance.as_ref()
    } else {
        None
    };
    let mut report = SplitReport::default();
    let first = integrate(
        field,
        time_slice(&renoised, 0, m),
        &req.start,
        &row(initial, m - 1),
        0.5,
        steps,
        guidance,
        frame,
        &mut report.first_half_steps,
    )?;
    let second = integrate(
        field,
        time_slice(&renoised, m, m),
        &row(initial, m),
        &req.goal,
        0.5,
        steps,
        guidance,
        frame,
        &mut report.second_half_steps,
    )?;
    let out = Array::from_fn(&[b, len, d], |i| {
        let (bi, rest) = (i / (len * d), i % (len * d));
        let (k, j) = (rest / d, rest % d);
        if k < m {
            first.data()[bi * m * d + k * d + j]
        } else {
            second.data()[bi * m * d + (k - m) * d + j]
        }
    });
    Ok((out, report))
}

/// Full planning call: Euler sampling, then split refinement if requested.
pub fn plan(
    field: &dyn VelocityField,
    req: &PlanRequest,
    frame: Option<&CostFrame>,
) -> Result<Array> {
    let mut rng = ChaCha8Rng::seed_from_u64(req.seed);
    let x = euler_sample_with(field, req, frame, &mut rng)?;
    if req.inference_split {
        Ok(split_inference(field, req, &x, frame, &mut rng)?.0)
    } else {
        Ok(x)
    }
}
