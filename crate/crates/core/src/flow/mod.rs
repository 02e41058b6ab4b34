//! Conditional flow matching on the straight-line (optimal-transport)
//! probability path, with the samplers built on top of it.

pub(crate) mod sample;

pub use sample::{
    euler_sample, guided_velocity, inpaint_clamp, integrate, plan, split_inference, BtSchedule,
    CostFrame, GuidanceSpec, PlanRequest, SplitReport,
};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::model::{Arch, Cond, Conditioning, VelocityNet};
use crate::ndauto::{AdamState, Array, Params, Tape};
use crate::world::Dataset;

/// Anything that maps `(x [B, T, D], t [B])` to a velocity of the same shape.
pub trait VelocityField {
    fn conditioning(&self) -> Conditioning;

    fn velocity(&self, x: &Array, t: &[f64], cond: Option<Cond<'_>>) -> Result<Array>;

    /// Rejects trajectory lengths the field cannot process.
    fn check_length(&self, _len: usize) -> Result<()> {
        Ok(())
    }
}

impl VelocityField for VelocityNet {
    fn conditioning(&self) -> Conditioning {
        self.config().conditioning
    }

    fn velocity(&self, x: &Array, t: &[f64], cond: Option<Cond<'_>>) -> Result<Array> {
        self.predict(x, t, cond)
    }

    fn check_length(&self, len: usize) -> Result<()> {
        self.config().check_length(len)
    }
}

/// One batch of draws from the OT path.
#[derive(Clone, Debug)]
pub struct OtPathSample {
    pub x0: Array,
    pub x1: Array,
    pub t: Vec<f64>,
    pub xt: Array,
    pub target: Array,
}

/// Builds the interpolant `x_t = t·x1 + (1−t)·x0` and target `x1 − x0`.
pub fn path_at(x0: Array, x1: Array, t: Vec<f64>) -> Result<OtPathSample> {
    if x0.shape() != x1.shape() {
        return Err(Error::dim(
            "sample_path",
            format!("noise {:?} vs data {:?}", x0.shape(), x1.shape()),
        ));
    }
    let b = x1.shape()[0];
    if t.len() != b {
        return Err(Error::dim(
            "sample_path",
            format!("{} flow times for batch {b}", t.len()),
        ));
    }
    let per = x1.len() / b;
    let xt = Array::from_fn(x1.shape(), |i| {
        let ti = t[i / per];
        ti * x1.data()[i] + (1.0 - ti) * x0.data()[i]
    });
    let target = x1.zip_map(&x0, |a, b| a - b)?;
    Ok(OtPathSample {
        x0,
        x1,
        t,
        xt,
        target,
    })
}

/// Draws `x0 ~ N(0, I)` and `t ~ U[0, 1]` per sample.
pub fn sample_path(x1: &Array, rng: &mut ChaCha8Rng) -> Result<OtPathSample> {
    let x0 = Array::from_fn(x1.shape(), |_| StandardNormal.sample(rng));
    let t = (0..x1.shape()[0])
        .map(|_| rng.gen_range(0.0..=1.0))
        .collect();
    path_at(x0, x1.clone(), t)
}

/// Boundary rows `x[:, 0]` and `x[:, T−1]` of a `[B, T, D]` batch.
pub fn endpoints(x: &Array) -> (Array, Array) {
    let [b, t, d] = x.shape()[..] else {
        panic!("endpoints expects [B, T, D]")
    };
    let row = |k: usize| Array::from_fn(&[b, d], |i| x.data()[(i / d) * t * d + k * d + i % d]);
    (row(0), row(t - 1))
}

fn loss_graph(
    net: &VelocityNet,
    batch: &OtPathSample,
    trainable: bool,
) -> Result<(Tape, usize, crate::model::Bound)> {
    let mut tape = Tape::new();
    let bound = net.bind(&mut tape, trainable);
    let x = tape.constant(batch.xt.clone());
    let ends;
    let cond = match net.config().conditioning {
        Conditioning::Inpaint => None,
        Conditioning::Direct => {
            ends = endpoints(&batch.x1);
            Some(Cond {
                start: &ends.0,
                goal: &ends.1,
            })
        }
    };
    let u = net.forward(&mut tape, &bound, x, &batch.t, cond)?;
    let loss = tape.mse(u, batch.target.clone())?;
    Ok((tape, loss, bound))
}

/// Mean squared error between `net(x_t, t)` and `x1 − x0`. Direct-conditioned
/// networks receive the data endpoints as their condition.
pub fn cfm_loss(net: &VelocityNet, batch: &OtPathSample) -> Result<f64> {
    let (tape, loss, _) = loss_graph(net, batch, false)?;
    Ok(tape.value(loss).item())
}

/// Loss plus its gradient with respect to every parameter.
pub fn cfm_loss_and_grads(net: &VelocityNet, batch: &OtPathSample) -> Result<(f64, Params)> {
    let (tape, loss, bound) = loss_graph(net, batch, true)?;
    let value = tape.value(loss).item();
    let mut g = tape.backward(loss)?;
    let grads = bound
        .iter()
        .map(|(k, id)| (k.clone(), g.take(*id)))
        .collect();
    Ok((value, grads))
}

/// Verifies at startup that a split probability can be honoured for horizon `t`.
pub fn check_split(net: &VelocityNet, horizon: usize, split_prob: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&split_prob) {
        return Err(Error::Config(format!(
            "split_prob must lie in [0, 1], got {split_prob}"
        )));
    }
    net.config().check_length(horizon)?;
    if split_prob > 0.0 {
        if horizon % 4 != 0 && net.config().arch == Arch::Unet {
            return Err(Error::Length(format!(
                "half-length crops of horizon {horizon} must be even-offset powers of 2"
            )));
        }
        net.config().check_length(horizon / 2).map_err(|e| {
            Error::Config(format!(
                "split_prob {split_prob} needs half-length {} trajectories: {e}",
                horizon / 2
            ))
        })?;
    }
    Ok(())
}

/// Result of one optimisation step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepInfo {
    pub step: u64,
    pub loss: f64,
    pub half_length: bool,
}

/// Owns a network, its optimiser and the normalised training set.
pub struct Trainer {
    pub net: VelocityNet,
    pub adam: AdamState,
    pub batch_size: usize,
    pub split_prob: f64,
    horizon: usize,
    dim: usize,
    data: Vec<f64>,
    count: usize,
}

impl Trainer {
    pub fn new(
        net: VelocityNet,
        dataset: &Dataset,
        batch_size: usize,
        split_prob: f64,
        lr: f64,
    ) -> Result<Self> {
        let adam = AdamState::new(net.params(), lr);
        Self::resume(net, adam, dataset, batch_size, split_prob)
    }

    pub fn resume(
        net: VelocityNet,
        adam: AdamState,
        dataset: &Dataset,
        batch_size: usize,
        split_prob: f64,
    ) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::Config("batch_size must be ≥ 1".into()));
        }
        if !(adam.lr.is_finite() && adam.lr > 0.0) {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {}",
                adam.lr
            )));
        }
        let dim = dataset.state_dim();
        if net.config().state_dim != dim {
            return Err(Error::Config(format!(
                "network state_dim {} does not match dataset state dim {dim}",
                net.config().state_dim
            )));
        }
        check_split(&net, dataset.horizon, split_prob)?;
        let data = (0..dataset.len())
            .flat_map(|i| dataset.normalized(i))
            .collect();
        Ok(Self {
            net,
            adam,
            batch_size,
            split_prob,
            horizon: dataset.horizon,
            dim,
            data,
            count: dataset.len(),
        })
    }

    pub fn step_count(&self) -> u64 {
        self.adam.step
    }

    /// Draws a batch (half-length crops with probability `split_prob`).
    pub fn draw_batch(&self, rng: &mut ChaCha8Rng) -> (Array, bool) {
        let half = self.split_prob > 0.0 && rng.gen_bool(self.split_prob);
        let len = if half { self.horizon / 2 } else { self.horizon };
        let (b, d, block) = (self.batch_size, self.dim, self.horizon * self.dim);
        let mut out = Vec::with_capacity(b * len * d);
        for _ in 0..b {
            let i = rng.gen_range(0..self.count);
            let offset = if half {
                2 * rng.gen_range(0..=(self.horizon - len) / 2)
            } else {
                0
            };
            let s = i * block + offset * d;
            out.extend_from_slice(&self.data[s..s + len * d]);
        }
        (Array::new(&[b, len, d], out).expect("batch shape"), half)
    }

    /// Draws a batch and its OT path sample. Inpainting networks get the
    /// boundary rows of `x_t` replaced by the clean data, as at sampling time.
    pub fn training_batch(&self, rng: &mut ChaCha8Rng) -> Result<(OtPathSample, bool)> {
        let (x1, half) = self.draw_batch(rng);
        let mut batch = sample_path(&x1, rng)?;
        if self.net.config().conditioning == Conditioning::Inpaint {
            let (s, g) = endpoints(&x1);
            inpaint_clamp(&mut batch.xt, &s, &g);
        }
        Ok((batch, half))
    }

    /// One Adam update on a fresh batch.
    pub fn step(&mut self, rng: &mut ChaCha8Rng) -> Result<StepInfo> {
        let (batch, half) = self.training_batch(rng)?;
        let x1 = &batch.x1;
        let (loss, grads) = cfm_loss_and_grads(&self.net, &batch)?;
        let step = self.adam.step + 1;
        if !loss.is_finite() {
            return Err(Error::Numeric(format!(
                "training loss became {loss} at step {step} (batch length {})",
                x1.shape()[1]
            )));
        }
        self.adam
            .step(self.net.params_mut(), &grads)
            .map_err(|e| Error::Numeric(format!("step {step}: {e}")))?;
        Ok(StepInfo {
            step,
            loss,
            half_length: half,
        })
    }
}

#[cfg(test)]
mod tests;
