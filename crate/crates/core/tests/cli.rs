use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const SMALL: &str = r#"
seed = 5

[env.particle]

[data]
n_per_direction = 4
count = 8

[net]
channel_dims = [8]
time_embed_dim = 8
kernel_size = 3

[train]
steps = 6
batch_size = 4
checkpoint_every = 3

[plan]
n_steps = 3

[bench]
n_batches = 1
batch_size = 4
radii = [0.0, 0.2]
trials = 3
"#;

fn flowplan(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_flowplan"))
        .args(args)
        .output()
        .expect("spawn flowplan")
}

fn ok(args: &[&str]) -> Output {
    let out = flowplan(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Run {
    _tmp: tempfile::TempDir,
    root: PathBuf,
    config: PathBuf,
}

fn setup() -> Run {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path().to_path_buf();
    let config = root.join("run.toml");
    fs::write(&config, SMALL).unwrap();
    Run {
        _tmp: tmp,
        root,
        config,
    }
}

fn gen(run: &Run, dir: &str, extra: &[&str]) -> PathBuf {
    let out = run.root.join(dir);
    let mut args = vec!["gen-data", "--config", s(&run.config), "--out-dir", s(&out)];
    args.extend_from_slice(extra);
    ok(&args);
    out.join("dataset.fpds")
}

#[test]
fn pipeline_runs_and_is_byte_deterministic() {
    let run = setup();
    let data = gen(&run, "data", &["--n", "16"]);
    let again = gen(&run, "data2", &["--n", "16"]);
    assert_eq!(fs::read(&data).unwrap(), fs::read(&again).unwrap());
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(run.root.join("data/dataset.json")).unwrap())
            .unwrap();
    assert_eq!(summary["count"], 16);
    assert_eq!(summary["modes"].as_object().unwrap().len(), 4);

    let train = |dir: &str| {
        let out = run.root.join(dir);
        ok(&[
            "train",
            "--config",
            s(&run.config),
            "--data",
            s(&data),
            "--out-dir",
            s(&out),
        ]);
        out
    };
    let a = train("a");
    let b = train("b");
    for f in [
        "loss.csv",
        "model.fpck",
        "ckpt_00000003.fpck",
        "ckpt_00000006.fpck",
    ] {
        assert_eq!(
            fs::read(a.join(f)).unwrap(),
            fs::read(b.join(f)).unwrap(),
            "{f}"
        );
    }
    assert_eq!(
        fs::read_to_string(a.join("loss.csv"))
            .unwrap()
            .lines()
            .count(),
        7
    );

    let model = a.join("model.fpck");
    let plan = |dir: &str, extra: &[&str]| {
        let out = run.root.join(dir);
        let mut args = vec![
            "plan",
            "--config",
            s(&run.config),
            "--ckpt",
            s(&model),
            "--out-dir",
            s(&out),
        ];
        args.extend_from_slice(extra);
        ok(&args);
        fs::read_to_string(out.join("plan.csv")).unwrap()
    };
    let p1 = plan("p1", &["--start", "-1,0", "--goal", "1,0"]);
    assert_eq!(p1.lines().count(), 65);
    assert!(
        p1.lines().nth(1).unwrap().starts_with("0,-1,0,0,0"),
        "start row: {}",
        p1.lines().nth(1).unwrap()
    );
    assert_eq!(
        p1,
        plan(
            "p2",
            &[
                "--start",
                "-1,0",
                "--goal",
                "1,0",
                "--guidance-scale",
                "0",
                "--obstacle",
                "0,0,0.2"
            ]
        )
    );
    assert_eq!(p1, plan("p3", &["--start", "-1,0", "--goal", "1,0"]));
    let guided = plan(
        "p4",
        &[
            "--start",
            "-1,0",
            "--goal",
            "1,0",
            "--obstacle",
            "0,0,0.2",
            "--split",
        ],
    );
    assert_ne!(p1, guided);
    assert!(run.root.join("p4/plan.svg").exists());

    let bench = |dir: &str, jobs: &str| {
        let out = run.root.join(dir);
        ok(&[
            "bench-stitch",
            "--config",
            s(&run.config),
            "--data",
            s(&data),
            "--out-dir",
            s(&out),
            "--ckpt",
            s(&model),
            "--ckpt",
            s(&b.join("ckpt_00000003.fpck")),
            "--jobs",
            jobs,
        ]);
        fs::read_to_string(out.join("stitch.csv")).unwrap()
    };
    let st = bench("s1", "1");
    assert_eq!(st, bench("s2", "2"));
    assert_eq!(
        fs::read_to_string(run.root.join("s1/stitch_summary.csv"))
            .unwrap()
            .lines()
            .count(),
        3
    );

    let avoid = run.root.join("av");
    ok(&[
        "bench-avoid",
        "--config",
        s(&run.config),
        "--ckpt",
        s(&model),
        "--out-dir",
        s(&avoid),
        "--scales",
        "0.5,1",
    ]);
    let csv = fs::read_to_string(avoid.join("avoid.csv")).unwrap();
    // Five cells (unguided, two scales with and without split), two radii, three trials.
    assert_eq!(
        csv.lines()
            .skip(1)
            .filter(|l| l.contains(",trial,"))
            .count(),
        5 * 2 * 3
    );
    assert_eq!(
        csv.lines().filter(|l| l.contains(",summary,")).count(),
        5 * 2
    );

    let probe = run.root.join("probe");
    ok(&[
        "probe",
        "--config",
        s(&run.config),
        "--ckpt-dir",
        s(&a),
        "--out-dir",
        s(&probe),
    ]);
    assert_eq!(
        fs::read_to_string(probe.join("bend.csv"))
            .unwrap()
            .lines()
            .count(),
        3
    );
    assert_eq!(
        fs::read_to_string(probe.join("consistency.csv"))
            .unwrap()
            .lines()
            .count(),
        3
    );

    fs::remove_file(avoid.join("avoid.svg")).unwrap();
    ok(&["plot", "--out-dir", s(&avoid)]);
    assert!(avoid.join("avoid.svg").exists());
}

#[test]
fn resume_continues_the_step_counter() {
    let run = setup();
    let data = gen(&run, "data", &["--n", "8"]);
    let out = run.root.join("t");
    ok(&[
        "train",
        "--config",
        s(&run.config),
        "--data",
        s(&data),
        "--out-dir",
        s(&out),
    ]);
    let ck = out.join("model.fpck");
    let more = run.root.join("more");
    ok(&[
        "train",
        "--config",
        s(&run.config),
        "--data",
        s(&data),
        "--out-dir",
        s(&more),
        "--resume",
        s(&ck),
        "--steps",
        "3",
    ]);
    let loss = fs::read_to_string(more.join("loss.csv")).unwrap();
    let steps: Vec<&str> = loss
        .lines()
        .skip(1)
        .map(|l| l.split(',').next().unwrap())
        .collect();
    assert_eq!(steps, ["7", "8", "9"]);
    assert!(more.join("ckpt_00000009.fpck").exists());
}

#[test]
fn usage_and_validation_errors_exit_2() {
    let run = setup();
    let out = flowplan(&["gen-data", "--scheme", "bogus", "--out-dir", s(&run.root)]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(
        err.contains("action_noise") && err.contains("random_forces"),
        "{err}"
    );

    assert_eq!(
        flowplan(&["gen-data", "--n", "6", "--out-dir", s(&run.root)])
            .status
            .code(),
        Some(2)
    );
    assert_eq!(flowplan(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(
        flowplan(&[
            "gen-data",
            "--set",
            "train.steps=0",
            "--out-dir",
            s(&run.root)
        ])
        .status
        .code(),
        Some(2)
    );
    let empty = run.root.join("empty");
    fs::create_dir_all(&empty).unwrap();
    assert_eq!(
        flowplan(&["plot", "--out-dir", s(&empty)]).status.code(),
        Some(2)
    );
    let junk = run.root.join("junk.fpck");
    fs::write(&junk, b"not a checkpoint").unwrap();
    let out = flowplan(&["plan", "--ckpt", s(&junk), "--out-dir", s(&run.root)]);
    assert_eq!(
        out.status.code(),
        Some(2),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn start_inside_obstacle_warns_but_plans() {
    let run = setup();
    let data = gen(&run, "data", &["--n", "8"]);
    let t = run.root.join("t");
    ok(&[
        "train",
        "--config",
        s(&run.config),
        "--data",
        s(&data),
        "--out-dir",
        s(&t),
        "--steps",
        "1",
    ]);
    let out = ok(&[
        "plan",
        "--config",
        s(&run.config),
        "--ckpt",
        s(&t.join("model.fpck")),
        "--out-dir",
        s(&run.root),
        "--start",
        "-1,0",
        "--goal",
        "1,0",
        "--obstacle",
        "-1,0,0.3",
    ]);
    assert!(String::from_utf8_lossy(&out.stderr).contains("warning"));
    assert!(run.root.join("plan.csv").exists());
}

#[test]
fn nan_training_exits_3_and_keeps_the_last_good_checkpoint() {
    let run = setup();
    let data = gen(&run, "data", &["--n", "8"]);
    let out = run.root.join("t");
    let r = flowplan(&[
        "train",
        "--config",
        s(&run.config),
        "--data",
        s(&data),
        "--out-dir",
        s(&out),
        "--set",
        "train.lr=1e300",
        "--steps",
        "40",
    ]);
    assert_eq!(
        r.status.code(),
        Some(3),
        "{}",
        String::from_utf8_lossy(&r.stderr)
    );
    assert!(!out.join("model.fpck").exists());
    let kept: Vec<_> = fs::read_dir(&out)
        .unwrap()
        .filter_map(|e| e.ok())
        .filter(|e| e.file_name().to_string_lossy().starts_with("ckpt_"))
        .collect();
    assert!(!kept.is_empty());
    let ck = flowplan::store::load_checkpoint(&kept.last().unwrap().path()).unwrap();
    assert!(ck
        .params
        .values()
        .all(|a| a.data().iter().all(|v| v.is_finite())));
}
