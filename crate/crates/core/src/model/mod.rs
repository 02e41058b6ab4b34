//! Velocity-field networks: a temporal UNet and a transformer, each with
//! either inpainting (boundary states enforced by the sampler) or direct
//! (boundary states fed to the network) conditioning.

mod transformer;
mod unet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndauto::{Array, NodeId, Params, Tape};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    Unet,
    Transformer,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Conditioning {
    Inpaint,
    Direct,
}

impl std::str::FromStr for Arch {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "unet" => Ok(Arch::Unet),
            "transformer" => Ok(Arch::Transformer),
            _ => Err(Error::Config(format!(
                "unknown arch `{s}` (valid: unet, transformer)"
            ))),
        }
    }
}

impl std::str::FromStr for Conditioning {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "inpaint" => Ok(Conditioning::Inpaint),
            "direct" => Ok(Conditioning::Direct),
            _ => Err(Error::Config(format!(
                "unknown conditioning `{s}` (valid: inpaint, direct)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetConfig {
    pub arch: Arch,
    pub conditioning: Conditioning,
    pub channel_dims: Vec<usize>,
    pub time_embed_dim: usize,
    pub state_dim: usize,
    pub horizon: usize,
    pub kernel_size: usize,
    pub layers: usize,
    pub heads: usize,
    pub model_dim: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            arch: Arch::Unet,
            conditioning: Conditioning::Inpaint,
            channel_dims: vec![32, 64, 128, 256],
            time_embed_dim: 32,
            state_dim: 4,
            horizon: 64,
            kernel_size: 5,
            layers: 4,
            heads: 4,
            model_dim: 128,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.state_dim == 0 {
            return bad("state_dim must be ≥ 1".into());
        }
        if self.time_embed_dim < 2 || self.time_embed_dim % 2 != 0 {
            return bad(format!(
                "time_embed_dim must be even and ≥ 2, got {}",
                self.time_embed_dim
            ));
        }
        if self.horizon < 2 {
            return bad(format!("horizon must be ≥ 2, got {}", self.horizon));
        }
        match self.arch {
            Arch::Unet => {
                if self.channel_dims.is_empty() || self.channel_dims.contains(&0) {
                    return bad("channel_dims must be a nonempty list of positive sizes".into());
                }
                if self.kernel_size % 2 == 0 {
                    return bad(format!("kernel_size must be odd, got {}", self.kernel_size));
                }
                self.check_unet_length(self.horizon)?;
            }
            Arch::Transformer => {
                if self.heads == 0 || self.model_dim % self.heads != 0 {
                    return bad(format!(
                        "model_dim {} must be divisible by heads {}",
                        self.model_dim, self.heads
                    ));
                }
                if self.layers == 0 {
                    return bad("transformer needs at least one layer".into());
                }
            }
        }
        Ok(())
    }

    /// Smallest trajectory length the UNet accepts.
    pub fn min_unet_length(&self) -> usize {
        1 << self.channel_dims.len()
    }

    pub fn check_unet_length(&self, t: usize) -> Result<()> {
        if !t.is_power_of_two() {
            return Err(Error::Length(format!(
                "UNet trajectory length must be a power of 2, got {t}"
            )));
        }
        if t < self.min_unet_length() {
            return Err(Error::Length(format!(
                "UNet with {} levels needs length ≥ {}, got {t}",
                self.channel_dims.len(),
                self.min_unet_length()
            )));
        }
        Ok(())
    }

    /// Checks that length `t` can be fed to the network.
    pub fn check_length(&self, t: usize) -> Result<()> {
        match self.arch {
            Arch::Unet => self.check_unet_length(t),
            Arch::Transformer if t == 0 || t > self.horizon => Err(Error::Length(format!(
                "transformer accepts lengths 1..={}, got {t}",
                self.horizon
            ))),
            Arch::Transformer => Ok(()),
        }
    }
}

/// Pre-MLP sinusoidal features of flow time `t` at geometrically spaced
/// frequencies: `[sin(s·t·f_0..), cos(s·t·f_0..)]`.
pub fn sinusoidal_features(t: f64, dim: usize) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Contract(format!(
            "flow time must lie in [0, 1], got {t}"
        )));
    }
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = if half > 1 {
            (-(10_000f64.ln()) * i as f64 / (half - 1) as f64).exp()
        } else {
            1.0
        };
        let arg = TIME_SCALE * t * freq;
        out[i] = arg.sin();
        out[half + i] = arg.cos();
    }
    Ok(out)
}

/// Flow time is stretched before embedding so low frequencies still separate
/// nearby times.
const TIME_SCALE: f64 = 100.0;

const INIT_STD: f64 = 0.02;

/// Boundary states for direct conditioning, each `[B, D]`.
#[derive(Clone, Copy, Debug)]
pub struct Cond<'a> {
    pub start: &'a Array,
    pub goal: &'a Array,
}

/// A parameterized velocity field `u_t(x)`.
#[derive(Clone, Debug, PartialEq)]
pub struct VelocityNet {
    config: NetConfig,
    params: Params,
}

/// Parameters placed on a tape.
pub struct Bound {
    ids: std::collections::BTreeMap<String, NodeId>,
}

impl Bound {
    pub fn id(&self, name: &str) -> NodeId {
        *self
            .ids
            .get(name)
            .unwrap_or_else(|| panic!("parameter `{name}` not bound"))
    }

    pub fn has(&self, name: &str) -> bool {
        self.ids.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &NodeId)> {
        self.ids.iter()
    }
}

/// Records parameter shapes and init rules while a network is laid out.
pub(crate) struct Builder {
    specs: Vec<(String, Vec<usize>, Init)>,
}

#[derive(Clone, Copy)]
pub(crate) enum Init {
    Normal,
    Zeros,
    Ones,
}

impl Builder {
    fn new() -> Self {
        Self { specs: Vec::new() }
    }

    pub(crate) fn add(&mut self, name: String, shape: Vec<usize>, init: Init) {
        self.specs.push((name, shape, init));
    }

    pub(crate) fn linear(&mut self, name: &str, din: usize, dout: usize, zero: bool) {
        self.add(
            format!("{name}.w"),
            vec![dout, din],
            if zero { Init::Zeros } else { Init::Normal },
        );
        self.add(format!("{name}.b"), vec![dout], Init::Zeros);
    }

    pub(crate) fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, zero: bool) {
        self.add(
            format!("{name}.w"),
            vec![cout, cin, k],
            if zero { Init::Zeros } else { Init::Normal },
        );
        self.add(format!("{name}.b"), vec![cout], Init::Zeros);
    }

    pub(crate) fn norm(&mut self, name: &str, c: usize) {
        self.add(format!("{name}.gamma"), vec![c], Init::Ones);
        self.add(format!("{name}.beta"), vec![c], Init::Zeros);
    }
}

fn truncated_normal(rng: &mut ChaCha8Rng, std: f64) -> f64 {
    loop {
        let z: f64 = StandardNormal.sample(rng);
        if z.abs() <= 2.0 {
            return z * std;
        }
    }
}

impl VelocityNet {
    /// Lays out and initializes a network. Weights are truncated normal,
    /// biases zero, and the output layer zero so the initial field is 0.
    pub fn new(config: NetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut b = Builder::new();
        time_mlp_layout(&mut b, &config);
        match config.arch {
            Arch::Unet => unet::layout(&mut b, &config),
            Arch::Transformer => transformer::layout(&mut b, &config),
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Params::new();
        for (name, shape, init) in b.specs {
            let arr = match init {
                Init::Zeros => Array::zeros(&shape),
                Init::Ones => Array::ones(&shape),
                Init::Normal => Array::from_fn(&shape, |_| truncated_normal(&mut rng, INIT_STD)),
            };
            if params.insert(name.clone(), arr).is_some() {
                unreachable!("duplicate parameter {name}");
            }
        }
        Ok(Self { config, params })
    }

    /// Rebuilds a network from stored parameters, checking every name and shape.
    pub fn from_params(config: NetConfig, params: Params) -> Result<Self> {
        let reference = Self::new(config.clone(), 0)?;
        for (name, arr) in &reference.params {
            match params.get(name) {
                Some(p) if p.shape() == arr.shape() => {}
                Some(p) => {
                    return Err(Error::ParamShape {
                        name: name.clone(),
                        expected: arr.shape().to_vec(),
                        found: p.shape().to_vec(),
                    })
                }
                None => {
                    return Err(Error::ParamShape {
                        name: name.clone(),
                        expected: arr.shape().to_vec(),
                        found: vec![],
                    })
                }
            }
        }
        if let Some(extra) = params.keys().find(|k| !reference.params.contains_key(*k)) {
            return Err(Error::ParamShape {
                name: extra.clone(),
                expected: vec![],
                found: params[extra].shape().to_vec(),
            });
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Params {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.values().map(Array::len).sum()
    }

    /// Places every parameter on `tape`, as gradient leaves when `trainable`.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Bound {
        let ids = self
            .params
            .iter()
            .map(|(k, v)| {
                let id = if trainable {
                    tape.param(v.clone())
                } else {
                    tape.constant(v.clone())
                };
                (k.clone(), id)
            })
            .collect();
        Bound { ids }
    }

    /// Records the forward pass for `x` of shape `[B, T, D]` at flow times `t`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        x: NodeId,
        t: &[f64],
        cond: Option<Cond<'_>>,
    ) -> Result<NodeId> {
        let xs = tape.value(x).shape().to_vec();
        let [bsz, len, d] = xs[..] else {
            return Err(Error::dim(
                "velocity_net",
                format!("x must be [B, T, D], got {xs:?}"),
            ));
        };
        if d != self.config.state_dim {
            return Err(Error::dim(
                "velocity_net",
                format!(
                    "state axis 2 = {d}, network expects {}",
                    self.config.state_dim
                ),
            ));
        }
        if t.len() != bsz {
            return Err(Error::dim(
                "velocity_net",
                format!("{} flow times for batch {bsz}", t.len()),
            ));
        }
        self.config.check_length(len)?;
        match (self.config.conditioning, cond) {
            (Conditioning::Direct, None) => {
                return Err(Error::Contract(
                    "direct conditioning requires boundary states".into(),
                ))
            }
            (Conditioning::Inpaint, Some(_)) => {
                return Err(Error::Contract(
                    "inpainting networks take no boundary states; the sampler clamps them".into(),
                ))
            }
            (Conditioning::Direct, Some(c)) => {
                for (name, a) in [("start", c.start), ("goal", c.goal)] {
                    if a.shape() != [bsz, d] {
                        return Err(Error::dim(
                            "velocity_net",
                            format!("{name} must be [{bsz}, {d}], got {:?}", a.shape()),
                        ));
                    }
                }
            }
            (Conditioning::Inpaint, None) => {}
        }
        let emb = self.embedding(tape, bound, t, cond)?;
        match self.config.arch {
            Arch::Unet => unet::forward(&self.config, tape, bound, x, emb),
            Arch::Transformer => transformer::forward(&self.config, tape, bound, x, emb, cond),
        }
    }

    /// Forward pass without gradients.
    pub fn predict(&self, x: &Array, t: &[f64], cond: Option<Cond<'_>>) -> Result<Array> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let xi = tape.constant(x.clone());
        let y = self.forward(&mut tape, &bound, xi, t, cond)?;
        Ok(tape.value(y).clone())
    }

    /// Time embedding (plus boundary-state embedding for direct conditioning), `[B, E]`.
    fn embedding(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        t: &[f64],
        cond: Option<Cond<'_>>,
    ) -> Result<NodeId> {
        let e = self.config.time_embed_dim;
        let mut feats = Vec::with_capacity(t.len() * e);
        for &ti in t {
            feats.extend(sinusoidal_features(ti, e)?);
        }
        let f = tape.constant(Array::new(&[t.len(), e], feats)?);
        let mut emb = mlp2(tape, bound, "time", f)?;
        if let Some(c) = cond {
            let pair = Array::from_fn(&[t.len(), 2 * self.config.state_dim], |i| {
                let d = self.config.state_dim;
                let (row, col) = (i / (2 * d), i % (2 * d));
                if col < d {
                    c.start.data()[row * d + col]
                } else {
                    c.goal.data()[row * d + col - d]
                }
            });
            let p = tape.constant(pair);
            let ce = mlp2(tape, bound, "cond", p)?;
            emb = tape.add(emb, ce)?;
        }
        Ok(emb)
    }
}

fn time_mlp_layout(b: &mut Builder, c: &NetConfig) {
    let e = c.time_embed_dim;
    b.linear("time.0", e, 4 * e, false);
    b.linear("time.1", 4 * e, e, false);
    if c.conditioning == Conditioning::Direct {
        b.linear("cond.0", 2 * c.state_dim, 4 * e, false);
        b.linear("cond.1", 4 * e, e, false);
    }
}

fn mlp2(tape: &mut Tape, bound: &Bound, name: &str, x: NodeId) -> Result<NodeId> {
    let h = linear(tape, bound, &format!("{name}.0"), x)?;
    let h = tape.silu(h);
    linear(tape, bound, &format!("{name}.1"), h)
}

pub(crate) fn linear(tape: &mut Tape, bound: &Bound, name: &str, x: NodeId) -> Result<NodeId> {
    tape.linear(
        x,
        bound.id(&format!("{name}.w")),
        bound.id(&format!("{name}.b")),
    )
}

/// Group count for `c` channels: the largest divisor of `c` not above 8.
pub(crate) fn norm_groups(c: usize) -> usize {
    (1..=8.min(c)).rev().find(|g| c % g == 0).unwrap_or(1)
}

/// Random perturbation of every parameter; used to probe untrained networks
/// whose zero-initialized output layer would otherwise hide all structure.
pub fn randomize_params(net: &mut VelocityNet, std: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for p in net.params_mut().values_mut() {
        for v in p.data_mut() {
            *v += std * rng.gen_range(-1.0..1.0);
        }
    }
}
