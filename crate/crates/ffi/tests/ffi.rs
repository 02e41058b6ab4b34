use std::ffi::{CStr, CString};
use std::ptr;

use flowplan::cli::{checkpoint_of, plan_states};
use flowplan::flow::Trainer;
use flowplan::model::{NetConfig, VelocityNet};
use flowplan::store::{save_checkpoint, save_dataset, PlanConfig};
use flowplan::world::{make_cross_dataset, AugmentScheme, Env, Obstacle};
use flowplan_ffi::*;

struct Files {
    _dir: tempfile::TempDir,
    model: CString,
    data: CString,
}

fn files() -> Files {
    let dir = tempfile::tempdir().unwrap();
    let ds = make_cross_dataset(&Env::particle(), 2, &AugmentScheme::default(), 3).unwrap();
    let cfg = NetConfig {
        channel_dims: vec![8],
        time_embed_dim: 8,
        kernel_size: 3,
        ..NetConfig::default()
    };
    let net = VelocityNet::new(cfg, 1).unwrap();
    let mut trainer = Trainer::new(net, &ds, 4, 0.5, 1e-3).unwrap();
    let mut rng = flowplan::world::rng_for(0, 0);
    trainer.step(&mut rng).unwrap();
    let mp = dir.path().join("m.fpck");
    let dp = dir.path().join("d.fpds");
    save_checkpoint(&mp, &checkpoint_of(&trainer, &ds, 0)).unwrap();
    save_dataset(&dp, &ds).unwrap();
    let c = |p: &std::path::Path| CString::new(p.to_str().unwrap()).unwrap();
    Files {
        model: c(&mp),
        data: c(&dp),
        _dir: dir,
    }
}

fn last_error() -> String {
    unsafe { CStr::from_ptr(fp_last_error()) }.to_string_lossy().into_owned()
}

fn load_model(f: &Files) -> *mut FpModel {
    let mut m = ptr::null_mut();
    assert_eq!(unsafe { fp_model_load(f.model.as_ptr(), &mut m) }, FpStatus::Ok);
    assert!(!m.is_null());
    m
}

#[test]
fn plans_match_the_library_and_are_reproducible() {
    let f = files();
    let m = load_model(&f);
    let d = unsafe { fp_model_state_dim(m) };
    assert_eq!(d, 4);
    let t = fp_horizon();
    let start = [-1.0, 0.0, 0.0, 0.0];
    let goal = [1.0, 0.0, 0.0, 0.0];
    let obstacles = [FpObstacle { cx: 0.0, cy: 0.0, radius: 0.2 }];
    let mut opts = fp_plan_options_default();
    opts.n_steps = 3;
    opts.seed = 9;
    opts.split = 1;
    opts.obstacles = obstacles.as_ptr();
    opts.n_obstacles = 1;
    let mut a = vec![0.0; t * d];
    let mut b = vec![0.0; t * d];
    unsafe {
        assert_eq!(fp_plan(m, start.as_ptr(), goal.as_ptr(), d, &opts, a.as_mut_ptr(), a.len()), FpStatus::Ok);
        assert_eq!(fp_plan(m, start.as_ptr(), goal.as_ptr(), d, &opts, b.as_mut_ptr(), b.len()), FpStatus::Ok);
    }
    assert_eq!(a, b);
    assert_eq!(last_error(), "");

    let ck = flowplan::store::load_checkpoint(std::path::Path::new(f.model.to_str().unwrap())).unwrap();
    let net = ck.net().unwrap();
    let mut settings = PlanConfig {
        n_steps: 3,
        inference_split: true,
        ..PlanConfig::default()
    };
    settings.guidance.scale = opts.guidance_scale;
    let direct = plan_states(&ck, &net, &start, &goal, &[Obstacle::new([0.0, 0.0], 0.2)], &settings, 9).unwrap();
    assert_eq!(a, direct);
    assert_eq!(&a[..d], &start);
    unsafe { fp_model_free(m) };
}

#[test]
fn bad_arguments_report_codes_and_messages() {
    let f = files();
    let m = load_model(&f);
    let s = [0.0; 4];
    let mut out = vec![0.0; 10];
    unsafe {
        assert_eq!(fp_plan(m, s.as_ptr(), s.as_ptr(), 4, ptr::null(), out.as_mut_ptr(), 10), FpStatus::InvalidArgument);
        assert!(last_error().contains("need 256"), "{}", last_error());
        assert_eq!(fp_plan(m, s.as_ptr(), s.as_ptr(), 6, ptr::null(), out.as_mut_ptr(), 10), FpStatus::Dimension);
        assert_eq!(fp_plan(ptr::null(), s.as_ptr(), s.as_ptr(), 4, ptr::null(), out.as_mut_ptr(), 10), FpStatus::NullArgument);

        let mut h = ptr::null_mut();
        let missing = CString::new("/nonexistent/model.fpck").unwrap();
        assert_eq!(fp_model_load(missing.as_ptr(), &mut h), FpStatus::Io);
        assert!(h.is_null());
        assert_eq!(fp_model_load(f.data.as_ptr(), &mut h), FpStatus::Load);
        assert!(last_error().contains("not a checkpoint"), "{}", last_error());
        assert_eq!(fp_model_load(ptr::null(), &mut h), FpStatus::NullArgument);
        fp_model_free(ptr::null_mut());
        fp_model_free(m);
    }
}

#[test]
fn dataset_handle_exposes_trajectories() {
    let f = files();
    let mut h = ptr::null_mut();
    unsafe {
        assert_eq!(fp_dataset_load(f.data.as_ptr(), &mut h), FpStatus::Ok);
        assert_eq!(fp_dataset_len(h), 8);
        assert_eq!(fp_dataset_state_dim(h), 4);
        let mut buf = vec![0.0; fp_horizon() * 4];
        assert_eq!(fp_dataset_trajectory(h, 0, buf.as_mut_ptr(), buf.len()), FpStatus::Ok);
        let ds = flowplan::store::load_dataset(std::path::Path::new(f.data.to_str().unwrap())).unwrap();
        assert_eq!(buf, ds.raw(0));
        assert_eq!(fp_dataset_trajectory(h, 8, buf.as_mut_ptr(), buf.len()), FpStatus::InvalidArgument);
        fp_dataset_free(h);
        assert_eq!(fp_dataset_len(ptr::null()), 0);
    }
}

#[test]
fn header_declares_every_export() {
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/flowplan.h")).unwrap();
    for name in [
        "fp_last_error", "fp_version", "fp_model_load", "fp_model_free", "fp_model_state_dim", "fp_horizon",
        "fp_plan_options_default", "fp_plan", "fp_dataset_load", "fp_dataset_free", "fp_dataset_len",
        "fp_dataset_state_dim", "fp_dataset_trajectory", "typedef struct FpModel FpModel", "FP_STATUS_NUMERIC",
    ] {
        assert!(header.contains(name), "{name} missing from header");
    }
    let v = unsafe { CStr::from_ptr(fp_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
}
