use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{hash64, write_atomic, Dec, Enc};
use crate::error::{Error, LoadError, Result};
use crate::model::{NetConfig, VelocityNet};
use crate::ndauto::{AdamState, Array, Params};
use crate::world::{AugmentScheme, CrossArm, Dataset, Env, NormStats};

pub const DATASET_MAGIC: [u8; 4] = *b"FPDS";
pub const DATASET_VERSION: u16 = 1;
pub const CHECKPOINT_MAGIC: [u8; 4] = *b"FPCK";
pub const CHECKPOINT_VERSION: u16 = 1;

#[derive(Serialize, Deserialize)]
struct DatasetHeader {
    env: Env,
    scheme: AugmentScheme,
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    Ok(fs::read(path)?)
}

fn header<'a>(
    bytes: &'a [u8],
    path: &'a Path,
    magic: [u8; 4],
    version: u16,
    wrong: LoadError,
) -> Result<Dec<'a>> {
    let mut dec = Dec::new(bytes, path);
    if bytes.len() < 4 || bytes[..4] != magic {
        return Err(dec.err(wrong));
    }
    dec.take(4)?;
    let v = dec.u16()?;
    if v != version {
        return Err(dec.err(LoadError::UnsupportedVersion(v)));
    }
    Ok(dec)
}

fn encode_dataset(ds: &Dataset) -> Result<Vec<u8>> {
    let json = serde_json::to_string(&DatasetHeader {
        env: ds.env.clone(),
        scheme: ds.scheme.clone(),
    })
    .map_err(|e| Error::Config(format!("dataset header: {e}")))?;
    let mut e = Enc::default();
    e.buf.extend(DATASET_MAGIC);
    e.u16(DATASET_VERSION);
    e.u64(hash64(json.as_bytes()));
    e.str(&json);
    e.u8(ds.env.id());
    e.u64(ds.horizon as u64);
    e.u64(ds.state_dim() as u64);
    e.u64(ds.len() as u64);
    e.f64s(&ds.stats.min);
    e.f64s(&ds.stats.max);
    for (a, b) in &ds.labels {
        e.u8(a.code());
        e.u8(b.code());
    }
    e.f64s(&ds.states);
    Ok(e.buf)
}

pub fn save_dataset(path: &Path, ds: &Dataset) -> Result<()> {
    write_atomic(path, &encode_dataset(ds)?)
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let bytes = read_file(path)?;
    let mut dec = header(
        &bytes,
        path,
        DATASET_MAGIC,
        DATASET_VERSION,
        LoadError::NotDataset,
    )?;
    let hash = dec.u64()?;
    let json = dec.str()?;
    if hash64(json.as_bytes()) != hash {
        return Err(dec.malformed("header hash mismatch"));
    }
    let h: DatasetHeader =
        serde_json::from_str(&json).map_err(|e| dec.malformed(format!("header: {e}")))?;
    let id = dec.u8()?;
    if id != h.env.id() {
        return Err(dec.malformed(format!(
            "env id {id} disagrees with header env `{}`",
            h.env.name()
        )));
    }
    let horizon = dec.len("horizon")?;
    let d = dec.len("state dim")?;
    let count = dec.len("trajectory")?;
    if d != h.env.state_dim() {
        return Err(dec.malformed(format!(
            "state dim {d}, env `{}` has {}",
            h.env.name(),
            h.env.state_dim()
        )));
    }
    let stats = NormStats {
        min: dec.f64s(d)?,
        max: dec.f64s(d)?,
    };
    let mut labels = Vec::with_capacity(count);
    for _ in 0..count {
        let (a, b) = (dec.u8()?, dec.u8()?);
        match (CrossArm::from_code(a), CrossArm::from_code(b)) {
            (Some(a), Some(b)) => labels.push((a, b)),
            _ => return Err(dec.malformed(format!("bad label codes ({a}, {b})"))),
        }
    }
    let n = count
        .checked_mul(horizon)
        .and_then(|v| v.checked_mul(d))
        .ok_or_else(|| dec.err(LoadError::Truncated))?;
    let states = dec.f64s(n)?;
    dec.finish()?;
    let ds = Dataset::from_parts(h.env, h.scheme, horizon, states, labels)
        .map_err(|e| dec.malformed(e.to_string()))?;
    if ds.stats != stats {
        return Err(dec.malformed("stored normalisation disagrees with the trajectories"));
    }
    Ok(ds)
}

/// A trained network with everything needed to resume training or plan in
/// environment units.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: NetConfig,
    pub params: Params,
    pub adam: Option<AdamState>,
    pub step: u64,
    pub split_prob: f64,
    pub dataset_fingerprint: u64,
    pub env: Env,
    pub stats: NormStats,
    /// Hash of the run configuration that produced this checkpoint.
    pub config_hash: u64,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    net: NetConfig,
    env: Env,
}

impl Checkpoint {
    /// Rebuilds the network recorded in the checkpoint.
    pub fn net(&self) -> Result<VelocityNet> {
        self.load_into(&self.config)
    }

    /// Loads the stored parameters into a network built from `config`;
    /// any layout difference is a shape error naming the parameter.
    pub fn load_into(&self, config: &NetConfig) -> Result<VelocityNet> {
        VelocityNet::from_params(config.clone(), self.params.clone())
    }
}

fn put_params(e: &mut Enc, p: &Params) {
    e.u64(p.len() as u64);
    for (name, a) in p {
        e.str(name);
        e.u8(a.ndim() as u8);
        for s in a.shape() {
            e.u64(*s as u64);
        }
        e.f64s(a.data());
    }
}

fn get_params(dec: &mut Dec) -> Result<Params> {
    let n = dec.len("parameter")?;
    let mut out = Params::new();
    let mut last: Option<String> = None;
    for _ in 0..n {
        let name = dec.str()?;
        if last.as_ref().is_some_and(|l| *l >= name) {
            return Err(dec.malformed(format!("parameter `{name}` out of canonical order")));
        }
        let nd = dec.u8()? as usize;
        let shape = (0..nd)
            .map(|_| dec.len("shape"))
            .collect::<Result<Vec<_>>>()?;
        let len = shape.iter().try_fold(1usize, |a, s| a.checked_mul(*s));
        let len = len.ok_or_else(|| dec.malformed(format!("shape {shape:?} overflows")))?;
        let data = dec.f64s(len)?;
        let arr = Array::new(&shape, data).map_err(|e| dec.malformed(e.to_string()))?;
        out.insert(name.clone(), arr);
        last = Some(name);
    }
    Ok(out)
}

fn encode_checkpoint(ck: &Checkpoint) -> Result<Vec<u8>> {
    let json = serde_json::to_string(&CheckpointHeader {
        net: ck.config.clone(),
        env: ck.env.clone(),
    })
    .map_err(|e| Error::Config(format!("checkpoint header: {e}")))?;
    let mut e = Enc::default();
    e.buf.extend(CHECKPOINT_MAGIC);
    e.u16(CHECKPOINT_VERSION);
    e.u64(ck.config_hash);
    e.str(&json);
    e.u64(ck.step);
    e.f64(ck.split_prob);
    e.u64(ck.dataset_fingerprint);
    e.u64(ck.stats.dim() as u64);
    e.f64s(&ck.stats.min);
    e.f64s(&ck.stats.max);
    put_params(&mut e, &ck.params);
    match &ck.adam {
        None => e.u8(0),
        Some(a) => {
            e.u8(1);
            e.u64(a.step);
            e.f64s(&[a.lr, a.beta1, a.beta2, a.eps]);
            put_params(&mut e, &a.m);
            put_params(&mut e, &a.v);
        }
    }
    Ok(e.buf)
}

pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    write_atomic(path, &encode_checkpoint(ck)?)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = read_file(path)?;
    let mut dec = header(
        &bytes,
        path,
        CHECKPOINT_MAGIC,
        CHECKPOINT_VERSION,
        LoadError::NotCheckpoint,
    )?;
    let config_hash = dec.u64()?;
    let json = dec.str()?;
    let h: CheckpointHeader =
        serde_json::from_str(&json).map_err(|e| dec.malformed(format!("header: {e}")))?;
    let step = dec.u64()?;
    let split_prob = dec.f64()?;
    let dataset_fingerprint = dec.u64()?;
    let d = dec.len("stats")?;
    let stats = NormStats {
        min: dec.f64s(d)?,
        max: dec.f64s(d)?,
    };
    let params = get_params(&mut dec)?;
    let adam = match dec.u8()? {
        0 => None,
        1 => {
            let astep = dec.u64()?;
            let h = dec.f64s(4)?;
            let m = get_params(&mut dec)?;
            let v = get_params(&mut dec)?;
            Some(AdamState {
                m,
                v,
                step: astep,
                lr: h[0],
                beta1: h[1],
                beta2: h[2],
                eps: h[3],
            })
        }
        f => return Err(dec.malformed(format!("optimizer flag {f}"))),
    };
    dec.finish()?;
    Ok(Checkpoint {
        config: h.net,
        params,
        adam,
        step,
        split_prob,
        dataset_fingerprint,
        env: h.env,
        stats,
        config_hash,
    })
}
