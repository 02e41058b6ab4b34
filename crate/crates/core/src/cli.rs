//! Command-line front end. Every numeric flag is in environment units;
//! normalisation happens internally.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use crate::bench::report::{self, AvoidRow, BendRow, StitchRow};
use crate::bench::{
    avoid_sweep, consistency_probe, mode_collapse_probe, stitching_benchmark, AvoidTask,
};
use crate::error::{Error, Result};
use crate::flow::{plan, CostFrame, GuidanceSpec, PlanRequest, Trainer, VelocityField};
use crate::model::{Arch, Conditioning, VelocityNet};
use crate::ndauto::Array;
use crate::store::{
    load_checkpoint, load_dataset, parse_config, save_checkpoint, save_dataset, Checkpoint,
    DatasetKind, PlanConfig, RunConfig,
};
use crate::world::{
    collision_points, make_cross_dataset, make_straight_dataset, noise_correlation, rng_for,
    sdf_circle, Dataset, Env, Obstacle, SchemeKind, HORIZON,
};
use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(
    name = "flowplan",
    version,
    about = "Flow-matching trajectory planner: data, training, planning and benchmarks"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// TOML run configuration (defaults apply to anything omitted).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Directory for every output file (created if missing).
    #[arg(long, default_value = ".")]
    pub out_dir: PathBuf,
    /// Extra config overrides, `section.key=value`, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Collect a trajectory dataset.
    ///
    /// Writes dataset.fpds and dataset.json (count, per-direction mode
    /// counts, normalisation min/max, cross-dimension noise correlation).
    GenData {
        #[command(flatten)]
        common: Common,
        /// particle | arm
        #[arg(long)]
        env: Option<String>,
        /// none | action_noise | same_noise | random_pos | random_forces
        #[arg(long)]
        scheme: Option<String>,
        /// Total trajectories (a multiple of 4 for the cross dataset).
        #[arg(long)]
        n: Option<usize>,
        /// Control noise std in control units.
        #[arg(long)]
        noise_std: Option<f64>,
        /// cross | straight
        #[arg(long)]
        kind: Option<String>,
    },
    /// Train a velocity network.
    ///
    /// Writes ckpt_<step>.fpck every train.checkpoint_every steps, model.fpck
    /// at the end and loss.csv with columns step,loss,half_length.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// unet | transformer
        #[arg(long)]
        arch: Option<String>,
        /// inpaint | direct
        #[arg(long)]
        conditioning: Option<String>,
        #[arg(long)]
        split_prob: Option<f64>,
        #[arg(long)]
        steps: Option<u64>,
        /// Continue from this checkpoint (parameters, optimiser, step counter).
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Plan one trajectory.
    ///
    /// Writes plan.csv with columns t,s0..s{D-1} (environment units) and
    /// plan.svg.
    Plan {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: PathBuf,
        /// Start state, comma separated (positions only means at rest).
        #[arg(long, allow_hyphen_values = true)]
        start: Option<String>,
        #[arg(long, allow_hyphen_values = true)]
        goal: Option<String>,
        /// Circular obstacle `cx,cy,r`, repeatable.
        #[arg(long, allow_hyphen_values = true)]
        obstacle: Vec<String>,
        #[arg(long)]
        guidance_scale: Option<f64>,
        /// Refine with inference-time trajectory splitting.
        #[arg(long)]
        split: bool,
        #[arg(long)]
        n_steps: Option<usize>,
    },
    /// Stitching benchmark over one or more checkpoints.
    ///
    /// Writes stitch.csv (label,row,sample,error,mean,std,max_jump,
    /// endpoint_error; one `sample` row per plan plus a `summary` row per
    /// checkpoint), stitch_summary.csv (label,mean,std) and stitch.svg.
    BenchStitch {
        #[command(flatten)]
        common: Common,
        /// Cross dataset the checkpoints were trained on.
        #[arg(long)]
        data: PathBuf,
        #[arg(long, required = true)]
        ckpt: Vec<PathBuf>,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Obstacle-avoidance sweep over radii.
    ///
    /// Writes avoid.csv (label,row,radius,trial,success,min_sdf,goal_error,
    /// rate,scale,use_split), avoid_summary.csv (label,scale,use_split,
    /// max_reliable_radius) and avoid.svg.
    BenchAvoid {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: PathBuf,
        /// Guidance scales to sweep, comma separated.
        #[arg(long)]
        scales: Option<String>,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Training diagnostics over a checkpoint series.
    ///
    /// Writes bend.csv (label,step,translate,bend) for every ckpt_*.fpck in
    /// --ckpt-dir and consistency.csv (scale,max_jump,residual,max_accel) for
    /// the last one.
    Probe {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt_dir: PathBuf,
        #[arg(long, default_value_t = 0.3)]
        radius: f64,
        /// Guidance scales for the consistency table, comma separated.
        #[arg(long)]
        scales: Option<String>,
    },
    /// Regenerate SVG figures from the CSV files in --out-dir.
    Plot {
        #[command(flatten)]
        common: Common,
    },
}

/// Parses arguments, runs the command and maps errors to exit codes
/// (0 success, 2 usage or validation, 3 numeric failure).
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn warn(msg: impl std::fmt::Display) {
    eprintln!("warning: {msg}");
}

fn load_config(c: &Common) -> Result<RunConfig> {
    let mut cfg = parse_config(c.config.as_deref(), &c.set)?;
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn finalize(cfg: &mut RunConfig) -> Result<()> {
    cfg.net.state_dim = cfg.env.state_dim();
    cfg.validate()
}

fn out_dir(c: &Common) -> Result<&Path> {
    fs::create_dir_all(&c.out_dir)?;
    Ok(&c.out_dir)
}

fn write(path: &Path, text: &str) -> Result<()> {
    crate::store::write_atomic(path, text.as_bytes())
}

fn parse_list(s: &str, what: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|v| {
            v.trim()
                .parse::<f64>()
                .ok()
                .filter(|x| x.is_finite())
                .ok_or_else(|| Error::Config(format!("{what}: `{v}` is not a finite number")))
        })
        .collect()
}

fn execute(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenData {
            common,
            env,
            scheme,
            n,
            noise_std,
            kind,
        } => gen_data(&common, env, scheme, n, noise_std, kind),
        Command::Train {
            common,
            data,
            arch,
            conditioning,
            split_prob,
            steps,
            resume,
        } => train(
            &common,
            &data,
            arch,
            conditioning,
            split_prob,
            steps,
            resume,
        ),
        Command::Plan {
            common,
            ckpt,
            start,
            goal,
            obstacle,
            guidance_scale,
            split,
            n_steps,
        } => plan_cmd(
            &common,
            &ckpt,
            start,
            goal,
            &obstacle,
            guidance_scale,
            split,
            n_steps,
        ),
        Command::BenchStitch {
            common,
            data,
            ckpt,
            jobs,
        } => bench_stitch(&common, &data, &ckpt, jobs),
        Command::BenchAvoid {
            common,
            ckpt,
            scales,
            jobs,
        } => bench_avoid(&common, &ckpt, scales, jobs),
        Command::Probe {
            common,
            ckpt_dir,
            radius,
            scales,
        } => probe(&common, &ckpt_dir, radius, scales),
        Command::Plot { common } => plot(&common),
    }
}

/// Builds the dataset a configuration describes.
pub fn build_dataset(cfg: &RunConfig) -> Result<Dataset> {
    match cfg.data.kind {
        DatasetKind::Cross => make_cross_dataset(
            &cfg.env,
            cfg.data.n_per_direction,
            &cfg.data.augment,
            cfg.seed,
        ),
        DatasetKind::Straight => make_straight_dataset(
            &cfg.env,
            cfg.data.count,
            &cfg.data.augment,
            cfg.data.lane,
            cfg.seed,
        ),
    }
}

fn gen_data(
    common: &Common,
    env: Option<String>,
    scheme: Option<String>,
    n: Option<usize>,
    noise_std: Option<f64>,
    kind: Option<String>,
) -> Result<()> {
    let mut cfg = load_config(common)?;
    if let Some(e) = env {
        cfg.env = Env::from_name(&e)?;
    }
    if let Some(s) = scheme {
        cfg.data.augment.kind = s.parse::<SchemeKind>()?;
    }
    if let Some(s) = noise_std {
        cfg.data.augment.noise_std = Some(s);
    }
    if let Some(k) = kind {
        cfg.data.kind = match k.as_str() {
            "cross" => DatasetKind::Cross,
            "straight" => DatasetKind::Straight,
            _ => {
                return Err(Error::Config(format!(
                    "unknown dataset kind `{k}` (valid: cross, straight)"
                )))
            }
        };
    }
    if let Some(n) = n {
        match cfg.data.kind {
            DatasetKind::Cross if n % 4 != 0 || n == 0 => {
                return Err(Error::Config(format!(
                    "cross dataset size must be a positive multiple of 4, got {n}"
                )))
            }
            DatasetKind::Cross => cfg.data.n_per_direction = n / 4,
            DatasetKind::Straight => cfg.data.count = n,
        }
    }
    finalize(&mut cfg)?;
    let ds = build_dataset(&cfg)?;
    let dir = out_dir(common)?;
    save_dataset(&dir.join("dataset.fpds"), &ds)?;
    let mut modes: BTreeMap<String, usize> = BTreeMap::new();
    for (a, b) in &ds.labels {
        *modes
            .entry(format!("{a:?}->{b:?}").to_lowercase())
            .or_default() += 1;
    }
    let summary = serde_json::json!({
        "env": ds.env.name(),
        "scheme": ds.scheme.kind.name(),
        "count": ds.len(),
        "horizon": ds.horizon,
        "modes": modes,
        "norm_min": ds.stats.min,
        "norm_max": ds.stats.max,
        "noise_correlation": noise_correlation(&ds.env, &ds.scheme, 10_000, cfg.seed)?,
        "max_step_jump": ds.max_step_jump(),
        "fingerprint": format!("{:016x}", ds.fingerprint()),
        "config_hash": format!("{:016x}", cfg.hash()),
    });
    write(&dir.join("dataset.json"), &format!("{:#}\n", summary))?;
    println!(
        "wrote {} trajectories to {}",
        ds.len(),
        dir.join("dataset.fpds").display()
    );
    Ok(())
}

/// Training loop shared by the command and the tests: checkpoints every
/// `checkpoint_every` steps into `dir` (if given) and appends to `log`, which
/// stays valid up to the failing step on error.
#[allow(clippy::too_many_arguments)]
pub fn train_loop(
    trainer: &mut Trainer,
    steps: u64,
    seed: u64,
    dataset: &Dataset,
    config_hash: u64,
    checkpoint_every: u64,
    dir: Option<&Path>,
    log: &mut Vec<(u64, f64, bool)>,
) -> Result<()> {
    let mut rng = rng_for(seed, trainer.step_count());
    for _ in 0..steps {
        let info = trainer.step(&mut rng)?;
        log.push((info.step, info.loss, info.half_length));
        if let Some(dir) = dir {
            if info.step % checkpoint_every == 0 {
                save_checkpoint(
                    &dir.join(format!("ckpt_{:08}.fpck", info.step)),
                    &checkpoint_of(trainer, dataset, config_hash),
                )?;
            }
        }
    }
    Ok(())
}

pub fn checkpoint_of(trainer: &Trainer, dataset: &Dataset, config_hash: u64) -> Checkpoint {
    Checkpoint {
        config: trainer.net.config().clone(),
        params: trainer.net.params().clone(),
        adam: Some(trainer.adam.clone()),
        step: trainer.step_count(),
        split_prob: trainer.split_prob,
        dataset_fingerprint: dataset.fingerprint(),
        env: dataset.env.clone(),
        stats: dataset.stats.clone(),
        config_hash,
    }
}

fn train(
    common: &Common,
    data: &Path,
    arch: Option<String>,
    conditioning: Option<String>,
    split_prob: Option<f64>,
    steps: Option<u64>,
    resume: Option<PathBuf>,
) -> Result<()> {
    let mut cfg = load_config(common)?;
    let ds = load_dataset(data)?;
    cfg.env = ds.env.clone();
    if let Some(a) = arch {
        cfg.net.arch = a.parse::<Arch>()?;
    }
    if let Some(c) = conditioning {
        cfg.net.conditioning = c.parse::<Conditioning>()?;
    }
    if let Some(p) = split_prob {
        cfg.train.split_prob = p;
    }
    if let Some(s) = steps {
        cfg.train.steps = s;
    }
    finalize(&mut cfg)?;
    let dir = out_dir(common)?;
    let mut trainer = match &resume {
        Some(path) => {
            let ck = load_checkpoint(path)?;
            if ck.dataset_fingerprint != ds.fingerprint() {
                warn(format!(
                    "{} was trained on dataset {:016x}, resuming on {:016x}",
                    path.display(),
                    ck.dataset_fingerprint,
                    ds.fingerprint()
                ));
            }
            let net = ck.net()?;
            let adam = ck.adam.clone().ok_or_else(|| {
                Error::Config(format!(
                    "{} has no optimiser state to resume",
                    path.display()
                ))
            })?;
            Trainer::resume(net, adam, &ds, cfg.train.batch_size, cfg.train.split_prob)?
        }
        None => {
            let net = VelocityNet::new(cfg.net.clone(), cfg.seed)?;
            Trainer::new(
                net,
                &ds,
                cfg.train.batch_size,
                cfg.train.split_prob,
                cfg.train.lr,
            )?
        }
    };
    let hash = cfg.hash();
    let mut log = Vec::with_capacity(cfg.train.steps as usize);
    let outcome = train_loop(
        &mut trainer,
        cfg.train.steps,
        cfg.seed,
        &ds,
        hash,
        cfg.train.checkpoint_every,
        Some(dir),
        &mut log,
    );
    let mut csv = String::from("step,loss,half_length\n");
    let loss_path = dir.join("loss.csv");
    if resume.is_some() {
        if let Ok(prev) = fs::read_to_string(&loss_path) {
            csv = prev;
        }
    }
    for (s, l, h) in &log {
        csv.push_str(&format!("{s},{l},{h}\n"));
    }
    write(&loss_path, &csv)?;
    if let Err(e) = outcome {
        // The failing step is rejected before the update, so unless the
        // optimiser itself blew up the parameters are still the last good ones.
        if trainer
            .net
            .params()
            .values()
            .all(|a| a.data().iter().all(|v| v.is_finite()))
        {
            let path = dir.join(format!("ckpt_{:08}.fpck", trainer.step_count()));
            save_checkpoint(&path, &checkpoint_of(&trainer, &ds, hash))?;
            eprintln!("last good state saved to {}", path.display());
        }
        return Err(e);
    }
    save_checkpoint(&dir.join("model.fpck"), &checkpoint_of(&trainer, &ds, hash))?;
    println!(
        "trained to step {} (final loss {:.5})",
        trainer.step_count(),
        log.last().map(|l| l.1).unwrap_or(f64::NAN)
    );
    Ok(())
}

fn parse_state(s: &str, env: &Env, what: &str) -> Result<Vec<f64>> {
    let v = parse_list(s, what)?;
    let (d, p) = (env.state_dim(), env.position_dim());
    if v.len() == d {
        Ok(v)
    } else if v.len() == p {
        let mut out = v;
        out.resize(d, 0.0);
        Ok(out)
    } else {
        Err(Error::Config(format!(
            "{what} needs {p} positions or {d} state values for env `{}`, got {}",
            env.name(),
            v.len()
        )))
    }
}

fn parse_obstacle(s: &str) -> Result<Obstacle> {
    match parse_list(s, "obstacle")?[..] {
        [cx, cy, r] if r > 0.0 => Ok(Obstacle::new([cx, cy], r)),
        _ => Err(Error::Config(format!(
            "obstacle must be `cx,cy,r` with r > 0, got `{s}`"
        ))),
    }
}

fn normalized_row(state: &[f64], ck: &Checkpoint) -> Result<Array> {
    let mut s = state.to_vec();
    ck.stats.normalize(&mut s);
    Array::new(&[1, s.len()], s)
}

/// Plans one trajectory between two states given in environment units and
/// returns the `[T, D]` plan in environment units. Guidance is applied only
/// when there are obstacles and the scale is nonzero.
pub fn plan_states(
    ck: &Checkpoint,
    net: &dyn VelocityField,
    start: &[f64],
    goal: &[f64],
    obstacles: &[Obstacle],
    settings: &PlanConfig,
    seed: u64,
) -> Result<Vec<f64>> {
    let d = ck.env.state_dim();
    if start.len() != d || goal.len() != d {
        return Err(Error::Config(format!(
            "start and goal need {d} values, got {} and {}",
            start.len(),
            goal.len()
        )));
    }
    let mut req = PlanRequest::new(
        normalized_row(start, ck)?,
        normalized_row(goal, ck)?,
        HORIZON,
    );
    req.n_steps = settings.n_steps;
    req.seed = seed;
    req.inference_split = settings.inference_split;
    req.split_guidance = settings.split_guidance;
    if !obstacles.is_empty() && settings.guidance.scale != 0.0 {
        let mut g = settings.guidance.clone();
        g.obstacles = obstacles.to_vec();
        req.guidance = Some(g);
    }
    let frame = CostFrame {
        env: ck.env.clone(),
        stats: ck.stats.clone(),
    };
    let mut traj = plan(net, &req, Some(&frame))?.into_data();
    ck.stats.denormalize(&mut traj);
    Ok(traj)
}

#[allow(clippy::too_many_arguments)]
fn plan_cmd(
    common: &Common,
    ckpt: &Path,
    start: Option<String>,
    goal: Option<String>,
    obstacles: &[String],
    scale: Option<f64>,
    split: bool,
    n_steps: Option<usize>,
) -> Result<()> {
    let mut cfg = load_config(common)?;
    let ck = load_checkpoint(ckpt)?;
    cfg.env = ck.env.clone();
    if let Some(n) = n_steps {
        cfg.plan.n_steps = n;
    }
    if let Some(s) = scale {
        cfg.plan.guidance.scale = s;
    }
    finalize(&mut cfg)?;
    let env = &ck.env;
    let start = match start {
        Some(s) => parse_state(&s, env, "start")?,
        None => env.cross_endpoint(crate::world::CrossArm::Left, [0.0; 2]),
    };
    let goal = match goal {
        Some(s) => parse_state(&s, env, "goal")?,
        None => env.cross_endpoint(crate::world::CrossArm::Right, [0.0; 2]),
    };
    let obstacles = obstacles
        .iter()
        .map(|s| parse_obstacle(s))
        .collect::<Result<Vec<_>>>()?;
    for o in &obstacles {
        if collision_points(env, &start)
            .iter()
            .any(|(p, _)| sdf_circle(*p, o) < 0.0)
        {
            warn(format!(
                "start state lies inside obstacle at {:?} (r = {}); planning anyway",
                o.center, o.radius
            ));
        }
    }
    let net = ck.net()?;
    let mut settings = cfg.plan.clone();
    settings.inference_split |= split;
    let traj = plan_states(&ck, &net, &start, &goal, &obstacles, &settings, cfg.seed)?;
    let dir = out_dir(common)?;
    write(
        &dir.join("plan.csv"),
        &report::trajectory_csv(&traj, env.state_dim()),
    )?;
    write(
        &dir.join("plan.svg"),
        &report::trajectories_svg(env, &[&traj], &obstacles, "Planned trajectory"),
    )?;
    let c = consistency_probe(&traj, env);
    println!(
        "planned {} states; max jump {:.4}, dynamics residual {:.4}",
        HORIZON, c.max_jump, c.residual
    );
    Ok(())
}

fn label_of(path: &Path, ck: &Checkpoint) -> String {
    let cfg = &ck.config;
    let arch = match cfg.arch {
        Arch::Unet => "unet",
        Arch::Transformer => "transformer",
    };
    let cond = match cfg.conditioning {
        Conditioning::Inpaint => "inpaint",
        Conditioning::Direct => "direct",
    };
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    format!("{stem}:{cond}-{arch}")
}

/// Runs `f` over `items` on at most `jobs` threads; results keep input order.
fn parallel<T: Sync, R: Send>(
    items: &[T],
    jobs: usize,
    f: impl Fn(&T) -> Result<R> + Sync,
) -> Result<Vec<R>> {
    let jobs = jobs.clamp(1, items.len().max(1));
    let chunk = items.len().div_ceil(jobs).max(1);
    let f = &f;
    std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|c| s.spawn(move || c.iter().map(f).collect::<Result<Vec<R>>>()))
            .collect();
        let mut out = Vec::with_capacity(items.len());
        for h in handles {
            out.extend(h.join().expect("benchmark worker panicked")?);
        }
        Ok(out)
    })
}

fn bench_stitch(common: &Common, data: &Path, ckpts: &[PathBuf], jobs: usize) -> Result<()> {
    let mut cfg = load_config(common)?;
    let ds = load_dataset(data)?;
    cfg.env = ds.env.clone();
    finalize(&mut cfg)?;
    let results = parallel(ckpts, jobs, |path| {
        let ck = load_checkpoint(path)?;
        if ck.dataset_fingerprint != ds.fingerprint() {
            warn(format!(
                "{} was trained on a different dataset",
                path.display()
            ));
        }
        let net = ck.net()?;
        stitching_benchmark(
            &net,
            &ds,
            cfg.bench.n_batches,
            cfg.bench.batch_size,
            cfg.plan.n_steps,
            cfg.seed,
            &label_of(path, &ck),
        )
    })?;
    let dir = out_dir(common)?;
    write(
        &dir.join("stitch.csv"),
        &report::to_csv(&report::stitch_rows(&results))?,
    )?;
    let mut summary = String::from("label,mean,std\n");
    for r in &results {
        summary.push_str(&format!("{},{},{}\n", r.label, r.mean, r.std));
        println!("{:40} {:.4} ± {:.4}", r.label, r.mean, r.std);
    }
    write(&dir.join("stitch_summary.csv"), &summary)?;
    let bars: Vec<(String, f64, f64)> = results
        .iter()
        .map(|r| (r.label.clone(), r.mean, r.std))
        .collect();
    write(&dir.join("stitch.svg"), &report::stitch_svg(&bars))?;
    Ok(())
}

fn avoid_task(cfg: &RunConfig, ck: &Checkpoint, scale: f64, use_split: bool) -> AvoidTask {
    AvoidTask {
        frame: CostFrame {
            env: ck.env.clone(),
            stats: ck.stats.clone(),
        },
        horizon: HORIZON,
        n_steps: cfg.plan.n_steps,
        guidance: GuidanceSpec {
            scale,
            ..cfg.plan.guidance.clone()
        },
        use_split,
        trials: cfg.bench.trials,
        goal_tolerance: cfg.bench.goal_tolerance,
        seed: cfg.seed,
    }
}

fn bench_avoid(common: &Common, ckpt: &Path, scales: Option<String>, jobs: usize) -> Result<()> {
    let mut cfg = load_config(common)?;
    let ck = load_checkpoint(ckpt)?;
    cfg.env = ck.env.clone();
    finalize(&mut cfg)?;
    let scales = match scales {
        Some(s) => parse_list(&s, "scales")?,
        None => vec![cfg.plan.guidance.scale],
    };
    let net = ck.net()?;
    let mut cells = vec![("unguided".to_string(), 0.0, false)];
    for s in &scales {
        cells.push((format!("fp@{s}"), *s, false));
        cells.push((format!("fp+split@{s}"), *s, true));
    }
    let results = parallel(&cells, jobs, |(label, scale, split)| {
        avoid_sweep(
            &net,
            &avoid_task(&cfg, &ck, *scale, *split),
            &cfg.bench.radii,
            label,
        )
    })?;
    let dir = out_dir(common)?;
    let mut rows: Vec<AvoidRow> = Vec::new();
    let mut summary = String::from("label,scale,use_split,max_reliable_radius\n");
    for (r, trials) in &results {
        rows.extend(report::avoid_rows(r, trials));
        summary.push_str(&format!(
            "{},{},{},{}\n",
            r.label, r.scale, r.use_split, r.max_reliable_radius
        ));
        println!(
            "{:20} max reliable radius {}",
            r.label, r.max_reliable_radius
        );
    }
    write(&dir.join("avoid.csv"), &report::to_csv(&rows)?)?;
    write(&dir.join("avoid_summary.csv"), &summary)?;
    write(
        &dir.join("avoid.svg"),
        &report::success_svg(&success_curves(&rows)),
    )?;
    Ok(())
}

fn success_curves(rows: &[AvoidRow]) -> Vec<(String, Vec<(f64, f64)>)> {
    let mut out: Vec<(String, Vec<(f64, f64)>)> = Vec::new();
    for r in rows.iter().filter(|r| r.row == "summary") {
        let rate = r.rate.unwrap_or(0.0);
        match out.iter_mut().find(|(l, _)| *l == r.label) {
            Some((_, c)) => c.push((r.radius, rate)),
            None => out.push((r.label.clone(), vec![(r.radius, rate)])),
        }
    }
    out
}

fn probe(common: &Common, ckpt_dir: &Path, radius: f64, scales: Option<String>) -> Result<()> {
    let mut cfg = load_config(common)?;
    let mut paths: Vec<PathBuf> = fs::read_dir(ckpt_dir)
        .map_err(|e| Error::Config(format!("{}: {e}", ckpt_dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("ckpt_") && n.ends_with(".fpck"))
        })
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Config(format!(
            "no ckpt_*.fpck files in {}",
            ckpt_dir.display()
        )));
    }
    let cks = paths
        .iter()
        .map(|p| load_checkpoint(p))
        .collect::<Result<Vec<_>>>()?;
    let last = cks.last().expect("nonempty");
    cfg.env = last.env.clone();
    finalize(&mut cfg)?;
    let nets = cks.iter().map(|c| c.net()).collect::<Result<Vec<_>>>()?;
    let series: Vec<(u64, &dyn VelocityField)> = cks
        .iter()
        .zip(&nets)
        .map(|(c, n)| (c.step, n as &dyn VelocityField))
        .collect();
    let task = avoid_task(&cfg, last, cfg.plan.guidance.scale, false);
    let profile = mode_collapse_probe(&series, &task, radius)?;
    let label = format!("split_prob={}", last.split_prob);
    let dir = out_dir(common)?;
    let rows = report::bend_rows(&label, &profile);
    write(&dir.join("bend.csv"), &report::to_csv(&rows)?)?;
    write(&dir.join("bend.svg"), &report::bend_svg(&rows))?;

    let scales = match scales {
        Some(s) => parse_list(&s, "scales")?,
        None => vec![0.0, cfg.plan.guidance.scale],
    };
    let net = nets.last().expect("nonempty");
    let mut csv = String::from("scale,max_jump,residual,max_accel\n");
    let block = HORIZON * last.env.state_dim();
    for s in scales {
        let plans =
            crate::bench::avoid_plans(net, &avoid_task(&cfg, last, s, false), radius, cfg.seed)?;
        let (mut j, mut r, mut a) = (0.0, 0.0, 0.0);
        for p in plans.chunks_exact(block) {
            let c = consistency_probe(p, &last.env);
            j += c.max_jump;
            r += c.residual;
            a += c.max_accel;
        }
        let n = (plans.len() / block) as f64;
        csv.push_str(&format!("{s},{},{},{}\n", j / n, r / n, a / n));
    }
    write(&dir.join("consistency.csv"), &csv)?;
    for p in &profile {
        println!(
            "step {:8}  translate {:.4}  bend {:.4}",
            p.step, p.translate, p.bend
        );
    }
    Ok(())
}

fn plot(common: &Common) -> Result<()> {
    let dir = &common.out_dir;
    let mut made = 0;
    let stitch = dir.join("stitch.csv");
    if stitch.exists() {
        let rows: Vec<StitchRow> = report::read_csv(&stitch)?;
        let bars: Vec<(String, f64, f64)> = rows
            .iter()
            .filter(|r| r.row == "summary")
            .map(|r| (r.label.clone(), r.mean.unwrap_or(0.0), r.std.unwrap_or(0.0)))
            .collect();
        write(&dir.join("stitch.svg"), &report::stitch_svg(&bars))?;
        made += 1;
    }
    let avoid = dir.join("avoid.csv");
    if avoid.exists() {
        let rows: Vec<AvoidRow> = report::read_csv(&avoid)?;
        write(
            &dir.join("avoid.svg"),
            &report::success_svg(&success_curves(&rows)),
        )?;
        made += 1;
    }
    let bend = dir.join("bend.csv");
    if bend.exists() {
        let rows: Vec<BendRow> = report::read_csv(&bend)?;
        write(&dir.join("bend.svg"), &report::bend_svg(&rows))?;
        made += 1;
    }
    let plan_csv = dir.join("plan.csv");
    if plan_csv.exists() {
        let (traj, d) = report::read_trajectory_csv(&plan_csv)?;
        let env = match d {
            4 => Env::particle(),
            6 => Env::arm(),
            _ => return Err(Error::Config(format!("plan.csv has {d} state columns"))),
        };
        write(
            &dir.join("plan.svg"),
            &report::trajectories_svg(&env, &[&traj], &[], "Planned trajectory"),
        )?;
        made += 1;
    }
    if made == 0 {
        return Err(Error::Config(format!(
            "no stitch.csv, avoid.csv, bend.csv or plan.csv in {}",
            dir.display()
        )));
    }
    println!("regenerated {made} figure(s)");
    Ok(())
}
