use std::cell::Cell;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::model::{randomize_params, NetConfig};
use crate::world::{make_cross_dataset, AugmentScheme, Env, NormStats, Obstacle};

fn tiny_unet(cond: Conditioning, d: usize, horizon: usize) -> VelocityNet {
    let cfg = NetConfig {
        arch: Arch::Unet,
        conditioning: cond,
        channel_dims: vec![4, 8],
        time_embed_dim: 4,
        state_dim: d,
        horizon,
        kernel_size: 3,
        ..NetConfig::default()
    };
    VelocityNet::new(cfg, 1).unwrap()
}

fn randn(shape: &[usize], seed: u64) -> Array {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array::from_fn(shape, |_| StandardNormal.sample(&mut rng))
}

/// Field that always returns the same array.
struct Constant(Array);

impl VelocityField for Constant {
    fn conditioning(&self) -> Conditioning {
        Conditioning::Direct
    }
    fn velocity(&self, _: &Array, _: &[f64], _: Option<Cond<'_>>) -> Result<Array> {
        Ok(self.0.clone())
    }
}

/// `u = (x1 − x) / (1 − t)`: the exact flow towards one datum. Half-length
/// queries are served from the first half until `first_calls` are used.
struct Datum {
    x1: Array,
    first_calls: usize,
    calls: Cell<usize>,
}

impl VelocityField for Datum {
    fn conditioning(&self) -> Conditioning {
        Conditioning::Inpaint
    }
    fn velocity(&self, x: &Array, t: &[f64], _: Option<Cond<'_>>) -> Result<Array> {
        let len = x.shape()[1];
        let target = if len == self.x1.shape()[1] {
            self.x1.clone()
        } else {
            let n = self.calls.get();
            self.calls.set(n + 1);
            let from = if n < self.first_calls { 0 } else { len };
            sample_slice(&self.x1, from, len)
        };
        let s = 1.0 / (1.0 - t[0]);
        target.zip_map(x, |a, b| (a - b) * s)
    }
}

fn sample_slice(x: &Array, from: usize, len: usize) -> Array {
    let [b, t, d] = x.shape()[..] else {
        unreachable!()
    };
    Array::from_fn(&[b, len, d], |i| {
        let (bi, rest) = (i / (len * d), i % (len * d));
        x.data()[bi * t * d + from * d + rest]
    })
}

/// Closed-form marginal velocity of the OT path from `N(0, I)` to `N(μ, I)`.
struct Gaussian(Vec<f64>);

impl VelocityField for Gaussian {
    fn conditioning(&self) -> Conditioning {
        Conditioning::Direct
    }
    fn velocity(&self, x: &Array, t: &[f64], _: Option<Cond<'_>>) -> Result<Array> {
        let t = t[0];
        let var = t * t + (1.0 - t) * (1.0 - t);
        let d = self.0.len();
        Ok(Array::from_fn(x.shape(), |i| {
            let mu = self.0[i % d];
            mu + (2.0 * t - 1.0) / var * (x.data()[i] - t * mu)
        }))
    }
}

fn request(b: usize, t: usize, d: usize) -> PlanRequest {
    PlanRequest::new(randn(&[b, d], 100), randn(&[b, d], 101), t)
}

#[test]
fn path_endpoints_and_target() {
    let x0 = randn(&[2, 4, 3], 1);
    let x1 = randn(&[2, 4, 3], 2);
    let p = path_at(x0.clone(), x1.clone(), vec![0.0, 1.0]).unwrap();
    assert_eq!(&p.xt.data()[..12], &x0.data()[..12]);
    assert_eq!(&p.xt.data()[12..], &x1.data()[12..]);
    let q = path_at(x0.clone(), x1.clone(), vec![0.3, 0.8]).unwrap();
    assert_eq!(p.target, q.target);
    // reconstruct x1 from the interpolant
    for (i, v) in q.xt.data().iter().enumerate() {
        let t = q.t[i / 12];
        assert!(((v - (1.0 - t) * x0.data()[i]) / t - x1.data()[i]).abs() < 1e-10);
    }
}

#[test]
fn cfm_loss_matches_direct_mse() {
    let mut net = tiny_unet(Conditioning::Inpaint, 3, 8);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let batch = sample_path(&randn(&[3, 8, 3], 4), &mut rng).unwrap();
    // zero-initialised output layer: loss is the mean squared target
    let zero = batch.target.data().iter().map(|v| v * v).sum::<f64>() / batch.target.len() as f64;
    assert!((cfm_loss(&net, &batch).unwrap() - zero).abs() < 1e-12);
    randomize_params(&mut net, 0.3, 5);
    let u = net.predict(&batch.xt, &batch.t, None).unwrap();
    let want = u
        .data()
        .iter()
        .zip(batch.target.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / u.len() as f64;
    assert!((cfm_loss(&net, &batch).unwrap() - want).abs() < 1e-12);
    let (l, g) = cfm_loss_and_grads(&net, &batch).unwrap();
    assert_eq!(l, cfm_loss(&net, &batch).unwrap());
    assert_eq!(g.len(), net.params().len());
}

#[test]
fn zero_net_loss_matches_expected_norm() {
    // E(x1 − x0)² = E x1² + 1 per entry; x1 ~ N(0.5, 0.25) gives 1.5
    let net = tiny_unet(Conditioning::Inpaint, 2, 8);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x1 = Array::from_fn(&[256, 8, 2], |_| {
        let z: f64 = StandardNormal.sample(&mut rng);
        0.5 + 0.5 * z
    });
    let batch = sample_path(&x1, &mut rng).unwrap();
    let l = cfm_loss(&net, &batch).unwrap();
    assert!((l - 1.5).abs() < 0.05, "{l}");
}

fn cross_trainer(split_prob: f64) -> Result<Trainer> {
    let ds = make_cross_dataset(&Env::particle(), 2, &AugmentScheme::default(), 0).unwrap();
    Trainer::new(
        tiny_unet(Conditioning::Inpaint, 4, 64),
        &ds,
        4,
        split_prob,
        1e-3,
    )
}

#[test]
fn split_probability_controls_batch_length() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let t0 = cross_trainer(0.0).unwrap();
    assert!((0..50).all(|_| t0.draw_batch(&mut rng).0.shape()[1] == 64));
    let t1 = cross_trainer(1.0).unwrap();
    for _ in 0..50 {
        let (b, half) = t1.draw_batch(&mut rng);
        assert!(half && b.shape()[1] == 32);
    }
    let th = cross_trainer(0.5).unwrap();
    let halves = (0..1000).filter(|_| th.draw_batch(&mut rng).1).count();
    assert!((450..=550).contains(&halves), "{halves}");
}

#[test]
fn half_crops_are_even_offset_windows() {
    let ds = make_cross_dataset(&Env::particle(), 1, &AugmentScheme::default(), 0).unwrap();
    let tr = Trainer::new(tiny_unet(Conditioning::Inpaint, 4, 64), &ds, 1, 1.0, 1e-3).unwrap();
    let all: Vec<Vec<f64>> = (0..ds.len()).map(|i| ds.normalized(i)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..40 {
        let (b, _) = tr.draw_batch(&mut rng);
        let found = all.iter().any(|x| {
            (0..=32)
                .step_by(2)
                .any(|o| x[o * 4..(o + 32) * 4] == *b.data())
        });
        assert!(found);
    }
}

#[test]
fn too_short_halves_fail_at_startup() {
    let ds = make_cross_dataset(&Env::particle(), 1, &AugmentScheme::default(), 0).unwrap();
    let cfg = NetConfig {
        channel_dims: vec![2; 6],
        time_embed_dim: 4,
        kernel_size: 3,
        ..NetConfig::default()
    };
    let net = VelocityNet::new(cfg, 0).unwrap();
    assert!(matches!(
        Trainer::new(net.clone(), &ds, 2, 0.5, 1e-3),
        Err(Error::Config(_))
    ));
    assert!(Trainer::new(net, &ds, 2, 0.0, 1e-3).is_ok());
}

#[test]
fn training_reduces_loss() {
    let mut tr = cross_trainer(0.5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let losses: Vec<f64> = (0..150).map(|_| tr.step(&mut rng).unwrap().loss).collect();
    let head = losses[..20].iter().sum::<f64>() / 20.0;
    let tail = losses[130..].iter().sum::<f64>() / 20.0;
    assert!(tail < head, "{head} -> {tail}");
    assert_eq!(tr.step_count(), 150);
}

#[test]
fn training_is_deterministic() {
    let run = || {
        let mut tr = cross_trainer(0.5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for _ in 0..5 {
            tr.step(&mut rng).unwrap();
        }
        tr.net
    };
    assert_eq!(run(), run());
}

#[test]
fn constant_field_integration_is_exact() {
    // dyadic data and step sizes make every operation exact
    let x0 = Array::from_fn(&[2, 4, 3], |i| (i as f64 - 11.0) / 8.0);
    let x1 = Array::from_fn(&[2, 4, 3], |i| (i as f64 * 3.0 % 7.0) / 4.0);
    let field = Constant(x1.zip_map(&x0, |a, b| a - b).unwrap());
    let (s, g) = (Array::zeros(&[2, 3]), Array::zeros(&[2, 3]));
    for n in [1, 2, 4, 8, 16] {
        let mut c = 0;
        let out = integrate(&field, x0.clone(), &s, &g, 0.0, n, None, None, &mut c).unwrap();
        assert_eq!(out, x1, "n_steps {n}");
        assert_eq!(c, n);
    }
    let x0 = randn(&[2, 4, 3], 11);
    let x1 = randn(&[2, 4, 3], 12);
    let field = Constant(x1.zip_map(&x0, |a, b| a - b).unwrap());
    for n in [3, 7, 10] {
        let mut c = 0;
        let out = integrate(&field, x0.clone(), &s, &g, 0.0, n, None, None, &mut c).unwrap();
        assert!(out.zip_map(&x1, |a, b| a - b).unwrap().max_abs() < 1e-12);
    }
}

#[test]
fn gaussian_flow_reaches_target_mean() {
    let mu = vec![1.5, -2.0, 0.5];
    let mut req = request(512, 1, 3);
    req.seed = 13;
    let out = euler_sample(&Gaussian(mu.clone()), &req, None).unwrap();
    for (j, m) in mu.iter().enumerate() {
        let mean = (0..512).map(|b| out.data()[b * 3 + j]).sum::<f64>() / 512.0;
        assert!((mean - m).abs() < 0.1, "dim {j}: {mean} vs {m}");
    }
}

#[test]
fn inpainting_pins_endpoints_exactly() {
    let mut net = tiny_unet(Conditioning::Inpaint, 2, 16);
    randomize_params(&mut net, 0.2, 14);
    let req = request(3, 16, 2);
    let out = euler_sample(&net, &req, None).unwrap();
    let (s, g) = endpoints(&out);
    assert_eq!(s, req.start);
    assert_eq!(g, req.goal);
}

#[test]
fn clamp_contract() {
    let x = randn(&[2, 5, 3], 15);
    let (s, g) = (randn(&[2, 3], 17), randn(&[2, 3], 18));
    let mut a = x.clone();
    inpaint_clamp(&mut a, &s, &g);
    assert_eq!(endpoints(&a), (s.clone(), g.clone()));
    for bi in 0..2 {
        let r = bi * 15 + 3..bi * 15 + 12;
        assert!(a.data()[r.clone()]
            .iter()
            .zip(&x.data()[r])
            .all(|(p, q)| p.to_bits() == q.to_bits()));
    }
    let mut again = a.clone();
    inpaint_clamp(&mut again, &s, &g);
    assert_eq!(again, a);
}

#[test]
fn inpaint_training_sees_clean_boundaries() {
    for cond in [Conditioning::Inpaint, Conditioning::Direct] {
        let ds = make_cross_dataset(&Env::particle(), 2, &AugmentScheme::default(), 0).unwrap();
        let net = tiny_unet(cond, 4, 64);
        let tr = Trainer::new(net, &ds, 8, 0.5, 1e-3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..6 {
            let (batch, _) = tr.training_batch(&mut rng).unwrap();
            let clean = endpoints(&batch.xt) == endpoints(&batch.x1);
            assert_eq!(clean, cond == Conditioning::Inpaint);
            assert_eq!(batch.target, batch.x1.zip_map(&batch.x0, |a, b| a - b).unwrap());
        }
    }
}

#[test]
fn non_finite_state_names_the_step() {
    let field = Constant(Array::full(&[1, 4, 2], f64::INFINITY));
    let err = euler_sample(&field, &request(1, 4, 2), None).unwrap_err();
    assert!(matches!(err, Error::Sampling { step: 1, .. }), "{err}");
}

fn unit_frame() -> CostFrame {
    CostFrame {
        env: Env::particle(),
        stats: NormStats {
            min: vec![-1.0; 4],
            max: vec![1.0; 4],
        },
    }
}

fn line_through_obstacle() -> Array {
    Array::from_fn(&[1, 9, 4], |i| {
        let (k, j) = (i / 4, i % 4);
        match j {
            0 => -1.0 + 0.25 * k as f64,
            1 => 0.05,
            _ => 0.0,
        }
    })
}

#[test]
fn guidance_trivial_cases() {
    let mut net = tiny_unet(Conditioning::Inpaint, 4, 8);
    randomize_params(&mut net, 0.2, 19);
    let x = randn(&[2, 8, 4], 20);
    let frame = unit_frame();
    let spec = GuidanceSpec {
        obstacles: vec![Obstacle::new([0.0, 0.0], 0.5)],
        scale: 0.0,
        ..GuidanceSpec::default()
    };
    let base = guided_velocity(&net, &x, 0.3, None, None, None).unwrap();
    assert_eq!(
        guided_velocity(&net, &x, 0.3, None, Some(&spec), Some(&frame)).unwrap(),
        base
    );
    let on = GuidanceSpec { scale: 5.0, ..spec };
    let at_one = guided_velocity(&net, &x, 1.0, None, None, None).unwrap();
    assert_eq!(
        guided_velocity(&net, &x, 1.0, None, Some(&on), Some(&frame)).unwrap(),
        at_one
    );
    assert_ne!(
        guided_velocity(&net, &x, 0.3, None, Some(&on), Some(&frame)).unwrap(),
        base
    );
}

#[test]
fn guidance_pushes_away_from_obstacle() {
    let zero = Constant(Array::zeros(&[1, 9, 4]));
    let spec = GuidanceSpec {
        obstacles: vec![Obstacle::new([0.0, 0.0], 0.2)],
        smoothness_weight: 0.0,
        scale: 1.0,
        ..GuidanceSpec::default()
    };
    let x = line_through_obstacle();
    let u = guided_velocity(&zero, &x, 0.2, None, Some(&spec), Some(&unit_frame())).unwrap();
    // index 4 sits at (0, 0.05), nearest the centre
    let (ux, uy) = (u.data()[16], u.data()[17]);
    assert!(uy > 0.0 && ux.abs() < 1e-12, "({ux}, {uy})");
    for schedule in [BtSchedule::OneMinusT, BtSchedule::OtRatio] {
        let spec = GuidanceSpec {
            schedule,
            ..spec.clone()
        };
        let u = guided_velocity(&zero, &x, 0.0, None, Some(&spec), Some(&unit_frame())).unwrap();
        assert!(u.all_finite());
    }
    assert_eq!(BtSchedule::OtRatio.weight(0.0), 1000.0);
    assert_eq!(BtSchedule::OtRatio.weight(0.5), 1.0);
}

#[test]
fn guidance_without_frame_is_rejected() {
    let zero = Constant(Array::zeros(&[1, 9, 4]));
    let spec = GuidanceSpec::default();
    let err = guided_velocity(
        &zero,
        &line_through_obstacle(),
        0.5,
        None,
        Some(&spec),
        None,
    )
    .unwrap_err();
    assert!(matches!(err, Error::Contract(_)));
}

#[test]
fn scale_zero_guidance_is_bitwise_noop_when_sampling() {
    let mut net = tiny_unet(Conditioning::Inpaint, 4, 16);
    randomize_params(&mut net, 0.2, 21);
    let mut req = request(2, 16, 4);
    let plain = plan(&net, &req, None).unwrap();
    req.guidance = Some(GuidanceSpec {
        obstacles: vec![Obstacle::new([0.0, 0.0], 0.4)],
        scale: 0.0,
        ..GuidanceSpec::default()
    });
    assert_eq!(plan(&net, &req, Some(&unit_frame())).unwrap(), plain);
}

#[test]
fn split_pins_boundaries_and_counts_steps() {
    let mut net = tiny_unet(Conditioning::Inpaint, 2, 16);
    randomize_params(&mut net, 0.2, 22);
    for n in [10, 7, 1] {
        let mut req = request(2, 16, 2);
        req.n_steps = n;
        let initial = euler_sample(&net, &req, None).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let (out, report) = split_inference(&net, &req, &initial, None, &mut rng).unwrap();
        assert_eq!(report.first_half_steps, n.div_ceil(2));
        assert_eq!(report.second_half_steps, n.div_ceil(2));
        let (s, g) = endpoints(&out);
        assert_eq!((s, g), (req.start.clone(), req.goal.clone()));
        assert_eq!(sample::row(&out, 8), sample::row(&initial, 8));
        assert_eq!(sample::row(&out, 7), sample::row(&initial, 7));
    }
}

#[test]
fn split_of_exact_flow_returns_initial() {
    let initial = randn(&[2, 8, 3], 24);
    let (s, g) = endpoints(&initial);
    let mut req = PlanRequest::new(s, g, 8);
    req.n_steps = 10;
    let field = Datum {
        x1: initial.clone(),
        first_calls: 5,
        calls: Cell::new(0),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(25);
    let (out, _) = split_inference(&field, &req, &initial, None, &mut rng).unwrap();
    assert!(out.zip_map(&initial, |a, b| a - b).unwrap().max_abs() < 1e-12);
}

#[test]
fn split_rejects_bad_lengths() {
    let net = tiny_unet(Conditioning::Inpaint, 2, 16);
    let req = request(1, 4, 2);
    let initial = randn(&[1, 4, 2], 26);
    let mut rng = ChaCha8Rng::seed_from_u64(27);
    // halves of 2 fall below the two-level minimum of 4
    assert!(matches!(
        split_inference(&net, &req, &initial, None, &mut rng),
        Err(Error::Length(_))
    ));
    let odd = Constant(Array::zeros(&[1, 5, 2]));
    let req = request(1, 5, 2);
    let initial = randn(&[1, 5, 2], 28);
    assert!(matches!(
        split_inference(&odd, &req, &initial, None, &mut rng),
        Err(Error::Length(_))
    ));
}
