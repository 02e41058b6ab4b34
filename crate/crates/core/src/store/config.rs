use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::hash64;
use crate::error::{Error, Result};
use crate::flow::GuidanceSpec;
use crate::model::NetConfig;
use crate::ndauto::DEFAULT_LR;
use crate::world::{AugmentScheme, Env, DEFAULT_LANE, HORIZON};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    /// Opposite-arm crossings of the cross (stitching benchmark).
    Cross,
    /// Left/right crossings on parallel lanes (avoidance benchmark).
    Straight,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub kind: DatasetKind,
    /// Cross dataset: trajectories per directed arm pair.
    pub n_per_direction: usize,
    /// Straight dataset: total trajectories.
    pub count: usize,
    pub lane: f64,
    pub augment: AugmentScheme,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            kind: DatasetKind::Cross,
            n_per_direction: 1024,
            count: 4096,
            lane: DEFAULT_LANE,
            augment: AugmentScheme::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: u64,
    pub lr: f64,
    pub batch_size: usize,
    pub split_prob: f64,
    /// Steps between intermediate checkpoints.
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 20_000,
            lr: DEFAULT_LR,
            batch_size: 32,
            split_prob: 0.5,
            checkpoint_every: 1000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlanConfig {
    pub n_steps: usize,
    pub guidance: GuidanceSpec,
    pub inference_split: bool,
    pub split_guidance: bool,
}

impl Default for PlanConfig {
    fn default() -> Self {
        Self {
            n_steps: 10,
            guidance: GuidanceSpec::default(),
            inference_split: false,
            split_guidance: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    pub n_batches: usize,
    pub batch_size: usize,
    /// Obstacle radii swept by the avoidance benchmark (environment units).
    pub radii: Vec<f64>,
    pub trials: usize,
    /// Largest final position error that still counts as reaching the goal.
    pub goal_tolerance: f64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            n_batches: 4,
            batch_size: 64,
            radii: vec![0.0, 0.1, 0.2, 0.3, 0.4, 0.5],
            trials: 50,
            goal_tolerance: 0.1,
        }
    }
}

/// Everything a run needs. `net.state_dim` always follows the environment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub env: Env,
    pub data: DataConfig,
    pub net: NetConfig,
    pub train: TrainConfig,
    pub plan: PlanConfig,
    pub bench: BenchConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            env: Env::particle(),
            data: DataConfig::default(),
            net: NetConfig::default(),
            train: TrainConfig::default(),
            plan: PlanConfig::default(),
            bench: BenchConfig::default(),
        }
    }
}

fn ranged(key: &str, ok: bool, want: &str, got: impl std::fmt::Display) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::Config(format!("{key} must be {want}, got {got}")))
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let t = &self.train;
        ranged("train.steps", t.steps >= 1, "≥ 1", t.steps)?;
        ranged(
            "train.lr",
            t.lr.is_finite() && t.lr > 0.0,
            "finite and > 0",
            t.lr,
        )?;
        ranged("train.batch_size", t.batch_size >= 1, "≥ 1", t.batch_size)?;
        ranged(
            "train.split_prob",
            (0.0..=1.0).contains(&t.split_prob),
            "in [0, 1]",
            t.split_prob,
        )?;
        ranged(
            "train.checkpoint_every",
            t.checkpoint_every >= 1,
            "≥ 1",
            t.checkpoint_every,
        )?;
        let d = &self.data;
        ranged(
            "data.n_per_direction",
            d.n_per_direction >= 1,
            "≥ 1",
            d.n_per_direction,
        )?;
        ranged("data.count", d.count >= 1, "≥ 1", d.count)?;
        ranged(
            "data.lane",
            d.lane.is_finite() && d.lane >= 0.0,
            "finite and ≥ 0",
            d.lane,
        )?;
        d.augment.validate()?;
        ranged(
            "plan.n_steps",
            self.plan.n_steps >= 1,
            "≥ 1",
            self.plan.n_steps,
        )?;
        self.plan.guidance.validate()?;
        let b = &self.bench;
        ranged("bench.n_batches", b.n_batches >= 1, "≥ 1", b.n_batches)?;
        ranged("bench.batch_size", b.batch_size >= 1, "≥ 1", b.batch_size)?;
        ranged("bench.trials", b.trials >= 1, "≥ 1", b.trials)?;
        ranged(
            "bench.goal_tolerance",
            b.goal_tolerance.is_finite() && b.goal_tolerance > 0.0,
            "finite and > 0",
            b.goal_tolerance,
        )?;
        if let Some(r) = b.radii.iter().find(|r| !(r.is_finite() && **r >= 0.0)) {
            return Err(Error::Config(format!(
                "bench.radii entries must be finite and ≥ 0, got {r}"
            )));
        }
        ranged(
            "net.horizon",
            self.net.horizon == HORIZON,
            &format!("{HORIZON}"),
            self.net.horizon,
        )?;
        self.net.validate()
    }

    /// Content hash of the canonical serialisation.
    pub fn hash(&self) -> u64 {
        hash64(
            serde_json::to_string(self)
                .expect("config serialises")
                .as_bytes(),
        )
    }
}

fn insert_dotted(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().filter(|s| !s.is_empty());
    let last = last.ok_or_else(|| Error::Config(format!("empty override key `{key}`")))?;
    let mut cur = table;
    for p in parts {
        let next = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = next
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override `{key}`: `{p}` is not a table")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

/// Parses TOML text, applies `key.path=value` overrides (values in TOML
/// syntax; bare words are taken as strings) and validates the result.
pub fn parse_config_str(text: &str, overrides: &[String]) -> Result<RunConfig> {
    let mut table: toml::Table = text.parse().map_err(|e| Error::Config(format!("{e}")))?;
    for o in overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{o}` is not of the form key=value")))?;
        let value = match format!("v = {v}").parse::<toml::Table>() {
            Ok(mut t) => t.remove("v").expect("just inserted"),
            Err(_) => toml::Value::String(v.to_string()),
        };
        insert_dotted(&mut table, k.trim(), value)?;
    }
    let mut cfg: RunConfig =
        serde_path_to_error::deserialize(toml::Value::Table(table)).map_err(|e| {
            let path = e.path().to_string();
            Error::Config(format!("{path}: {}", e.into_inner().message()))
        })?;
    cfg.net.state_dim = cfg.env.state_dim();
    cfg.validate()?;
    Ok(cfg)
}

/// Reads the config file at `path` (or nothing) and applies `overrides`.
pub fn parse_config(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
    let text = match path {
        Some(p) => {
            fs::read_to_string(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
        }
        None => String::new(),
    };
    parse_config_str(&text, overrides)
}
