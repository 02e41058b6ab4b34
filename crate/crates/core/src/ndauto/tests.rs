use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;

fn rand_array(rng: &mut ChaCha8Rng, shape: &[usize]) -> Array {
    Array::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

fn conv_oracle(
    x: &[f64],
    cin: usize,
    t: usize,
    w: &[f64],
    cout: usize,
    k: usize,
    b: &[f64],
) -> Vec<f64> {
    let p = (k - 1) / 2;
    let mut out = vec![0.0; cout * t];
    for co in 0..cout {
        for to in 0..t {
            let mut s = b[co];
            for ci in 0..cin {
                for kk in 0..k {
                    let idx = to as isize + kk as isize - p as isize;
                    if idx >= 0 && (idx as usize) < t {
                        s += w[(co * cin + ci) * k + kk] * x[ci * t + idx as usize];
                    }
                }
            }
            out[co * t + to] = s;
        }
    }
    out
}

#[test]
fn conv1d_zero_input_gives_bias() {
    let mut tape = Tape::new();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = tape.constant(Array::zeros(&[2, 5]));
    let w = tape.constant(rand_array(&mut rng, &[3, 2, 3]));
    let b = tape.constant(Array::new(&[3], vec![0.5, -1.0, 2.0]).unwrap());
    let y = tape.conv1d(x, w, b, 1, 1).unwrap();
    let out = tape.value(y);
    assert_eq!(out.shape(), &[3, 5]);
    for c in 0..3 {
        let expected = [0.5, -1.0, 2.0][c];
        assert!(out.data()[c * 5..(c + 1) * 5]
            .iter()
            .all(|&v| v == expected));
    }
}

#[test]
fn conv1d_identity_kernel() {
    let mut tape = Tape::new();
    let data = vec![0.3, -2.0, 5.0, 1.25];
    let x = tape.constant(Array::new(&[1, 4], data.clone()).unwrap());
    let w = tape.constant(Array::ones(&[1, 1, 1]));
    let b = tape.constant(Array::zeros(&[1]));
    let y = tape.conv1d(x, w, b, 1, 0).unwrap();
    assert_eq!(tape.value(y).data(), data.as_slice());
}

#[test]
fn conv1d_matches_nested_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..10 {
        let mut tape = Tape::new();
        let xa = rand_array(&mut rng, &[2, 8]);
        let wa = rand_array(&mut rng, &[3, 2, 3]);
        let ba = rand_array(&mut rng, &[3]);
        let expected = conv_oracle(xa.data(), 2, 8, wa.data(), 3, 3, ba.data());
        let (x, w, b) = (tape.constant(xa), tape.constant(wa), tape.constant(ba));
        let y = tape.conv1d(x, w, b, 1, 1).unwrap();
        for (a, e) in tape.value(y).data().iter().zip(&expected) {
            assert!((a - e).abs() < 1e-12);
        }
    }
}

#[test]
fn conv1d_strided_matches_subsampled_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut tape = Tape::new();
    let xa = rand_array(&mut rng, &[2, 8]);
    let wa = rand_array(&mut rng, &[2, 2, 3]);
    let ba = rand_array(&mut rng, &[2]);
    let dense = conv_oracle(xa.data(), 2, 8, wa.data(), 2, 3, ba.data());
    let (x, w, b) = (tape.constant(xa), tape.constant(wa), tape.constant(ba));
    let y = tape.conv1d(x, w, b, 2, 1).unwrap();
    assert_eq!(tape.value(y).shape(), &[2, 4]);
    for c in 0..2 {
        for j in 0..4 {
            let got = tape.value(y).data()[c * 4 + j];
            assert!((got - dense[c * 8 + 2 * j]).abs() < 1e-12);
        }
    }
}

#[test]
fn conv1d_shape_mismatch_names_axes() {
    let mut tape = Tape::new();
    let x = tape.constant(Array::zeros(&[2, 5]));
    let w = tape.constant(Array::zeros(&[1, 3, 3]));
    let b = tape.constant(Array::zeros(&[1]));
    let err = tape.conv1d(x, w, b, 1, 1).unwrap_err();
    assert!(
        matches!(err, Error::Dimension { op: "conv1d", ref detail } if detail.contains("axis"))
    );
}

#[test]
fn linear_identity_and_zero_input() {
    let mut tape = Tape::new();
    let xa = Array::new(&[2, 3], vec![1.0, 2.0, 3.0, -4.0, 5.0, 6.5]).unwrap();
    let eye = Array::from_fn(&[3, 3], |i| if i / 3 == i % 3 { 1.0 } else { 0.0 });
    let x = tape.constant(xa.clone());
    let w = tape.constant(eye);
    let b = tape.constant(Array::zeros(&[3]));
    let y = tape.linear(x, w, b).unwrap();
    assert_eq!(tape.value(y).data(), xa.data());

    let z = tape.constant(Array::zeros(&[4, 3]));
    let w2 = tape.constant(Array::ones(&[2, 3]));
    let b2 = tape.constant(Array::new(&[2], vec![0.25, -7.0]).unwrap());
    let y2 = tape.linear(z, w2, b2).unwrap();
    for row in tape.value(y2).data().chunks(2) {
        assert_eq!(row, &[0.25, -7.0]);
    }
}

#[test]
fn linear_matches_triple_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let xa = rand_array(&mut rng, &[4, 3]);
    let wa = rand_array(&mut rng, &[2, 3]);
    let ba = rand_array(&mut rng, &[2]);
    let mut expected = vec![0.0; 8];
    for i in 0..4 {
        for j in 0..2 {
            let mut s = ba.data()[j];
            for k in 0..3 {
                s += xa.data()[i * 3 + k] * wa.data()[j * 3 + k];
            }
            expected[i * 2 + j] = s;
        }
    }
    let mut tape = Tape::new();
    let (x, w, b) = (tape.constant(xa), tape.constant(wa), tape.constant(ba));
    let y = tape.linear(x, w, b).unwrap();
    for (a, e) in tape.value(y).data().iter().zip(&expected) {
        assert!((a - e).abs() < 1e-12);
    }
    let bad = tape.constant(Array::zeros(&[2, 4]));
    assert!(tape.linear(x, bad, b).is_err());
}

#[test]
fn group_norm_constant_and_affine_edge_cases() {
    let mut tape = Tape::new();
    let x = tape.constant(Array::full(&[4, 6], 3.7));
    let g1 = tape.constant(Array::ones(&[4]));
    let b0 = tape.constant(Array::zeros(&[4]));
    let y = tape.group_norm(x, 2, g1, b0, NORM_EPS).unwrap();
    assert!(tape.value(y).max_abs() < 1e-9);

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let xr = tape.constant(rand_array(&mut rng, &[4, 6]));
    let g0 = tape.constant(Array::zeros(&[4]));
    let bc = tape.constant(Array::full(&[4], 1.25));
    let y = tape.group_norm(xr, 2, g0, bc, NORM_EPS).unwrap();
    assert!(tape.value(y).data().iter().all(|&v| v == 1.25));
}

#[test]
fn group_norm_moments() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut tape = Tape::new();
    let x = tape.constant(rand_array(&mut rng, &[4, 6]).map(|v| 10.0 * v));
    let g = tape.constant(Array::ones(&[4]));
    let b = tape.constant(Array::zeros(&[4]));
    let y = tape.group_norm(x, 2, g, b, NORM_EPS).unwrap();
    for grp in tape.value(y).data().chunks(12) {
        let mean = grp.iter().sum::<f64>() / 12.0;
        let var = grp.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 12.0;
        assert!(mean.abs() < 1e-10);
        assert!((var - 1.0).abs() < 1e-6);
    }
}

#[test]
fn group_norm_rejects_indivisible_channels() {
    let mut tape = Tape::new();
    let x = tape.constant(Array::zeros(&[5, 2]));
    let g = tape.constant(Array::ones(&[5]));
    let b = tape.constant(Array::zeros(&[5]));
    assert!(matches!(
        tape.group_norm(x, 2, g, b, NORM_EPS),
        Err(Error::Config(_))
    ));
}

fn softmax_attention_oracle(q: &[f64], k: &[f64], v: &[f64], t: usize, d: usize) -> Vec<f64> {
    let mut out = vec![0.0; t * d];
    for i in 0..t {
        let logits: Vec<f64> = (0..t)
            .map(|j| (0..d).map(|c| q[i * d + c] * k[j * d + c]).sum::<f64>() / (d as f64).sqrt())
            .collect();
        let z: f64 = logits.iter().map(|l| l.exp()).sum();
        for j in 0..t {
            let p = logits[j].exp() / z;
            for c in 0..d {
                out[i * d + c] += p * v[j * d + c];
            }
        }
    }
    out
}

#[test]
fn attention_single_token_returns_v() {
    let mut tape = Tape::new();
    let q = tape.constant(Array::new(&[1, 3], vec![4.0, -1.0, 2.0]).unwrap());
    let k = tape.constant(Array::new(&[1, 3], vec![0.5, 0.5, 9.0]).unwrap());
    let v = tape.constant(Array::new(&[1, 3], vec![1.0, 2.0, 3.0]).unwrap());
    let y = tape.attention(q, k, v).unwrap();
    assert_eq!(tape.value(y).data(), &[1.0, 2.0, 3.0]);
}

#[test]
fn attention_identical_keys_average_values() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut tape = Tape::new();
    let q = tape.constant(rand_array(&mut rng, &[4, 2]));
    let k = tape.constant(Array::from_fn(&[4, 2], |i| [0.3, -0.7][i % 2]));
    let va = rand_array(&mut rng, &[4, 2]);
    let mean = [
        va.data().iter().step_by(2).sum::<f64>() / 4.0,
        va.data().iter().skip(1).step_by(2).sum::<f64>() / 4.0,
    ];
    let v = tape.constant(va);
    let y = tape.attention(q, k, v).unwrap();
    for row in tape.value(y).data().chunks(2) {
        assert!((row[0] - mean[0]).abs() < 1e-12 && (row[1] - mean[1]).abs() < 1e-12);
    }
}

#[test]
fn attention_matches_explicit_softmax() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for _ in 0..5 {
        let (qa, ka, va) = (
            rand_array(&mut rng, &[3, 2]),
            rand_array(&mut rng, &[3, 2]),
            rand_array(&mut rng, &[3, 2]),
        );
        let expected = softmax_attention_oracle(qa.data(), ka.data(), va.data(), 3, 2);
        let mut tape = Tape::new();
        let (q, k, v) = (tape.constant(qa), tape.constant(ka), tape.constant(va));
        let y = tape.attention(q, k, v).unwrap();
        for (a, e) in tape.value(y).data().iter().zip(&expected) {
            assert!((a - e).abs() < 1e-12);
        }
    }
}

#[test]
fn attention_non_finite_logits_are_numeric_errors() {
    let mut tape = Tape::new();
    let q = tape.constant(Array::new(&[2, 1], vec![f64::INFINITY, 1.0]).unwrap());
    let k = tape.constant(Array::new(&[2, 1], vec![1.0, 1.0]).unwrap());
    let v = tape.constant(Array::zeros(&[2, 1]));
    assert!(matches!(tape.attention(q, k, v), Err(Error::Numeric(_))));
}

#[test]
fn backward_of_sum_and_square() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let xa = rand_array(&mut rng, &[3, 2]);
    let mut tape = Tape::new();
    let x = tape.param(xa.clone());
    let s = tape.sum(x);
    let g = tape.backward(s).unwrap();
    assert!(g.get(x).data().iter().all(|&v| v == 1.0));

    let mut tape = Tape::new();
    let x = tape.param(xa.clone());
    let sq = tape.mul(x, x).unwrap();
    let s = tape.sum(sq);
    let g = tape.backward(s).unwrap();
    for (gv, xv) in g.get(x).data().iter().zip(xa.data()) {
        assert!((gv - 2.0 * xv).abs() < 1e-15);
    }
}

#[test]
fn backward_requires_scalar_loss_and_zero_fills_untouched_leaves() {
    let mut tape = Tape::new();
    let x = tape.param(Array::ones(&[2]));
    let unused = tape.param(Array::ones(&[3]));
    let y = tape.scale(x, 2.0);
    assert!(matches!(tape.backward(y), Err(Error::Contract(_))));
    let s = tape.sum(y);
    let g = tape.backward(s).unwrap();
    assert_eq!(g.get(unused).data(), &[0.0, 0.0, 0.0]);
}

#[test]
fn backward_visits_each_op_once() {
    let mut tape = Tape::new();
    let x = tape.param(Array::new(&[3], vec![0.1, 0.2, 0.3]).unwrap());
    // x feeds three consumers; fan-out sums must not re-visit ops.
    let a = tape.silu(x);
    let b = tape.scale(x, 3.0);
    let c = tape.mul(a, b).unwrap();
    let d = tape.add(c, x).unwrap();
    let s = tape.sum(d);
    tape.backward(s).unwrap();
    assert_eq!(tape.op_count(), 5);
    assert_eq!(tape.adjoint_visits(), 5);
}

/// Central-difference check of `f` (which builds a scalar on a fresh tape
/// from the given leaves) against reverse-mode gradients.
pub(crate) fn fd_check(inputs: &[Array], f: &dyn Fn(&mut Tape, &[NodeId]) -> NodeId) -> f64 {
    let eval = |vals: &[Array]| {
        let mut tape = Tape::new();
        let ids: Vec<_> = vals.iter().map(|a| tape.constant(a.clone())).collect();
        let out = f(&mut tape, &ids);
        tape.value(out).item()
    };
    let mut tape = Tape::new();
    let ids: Vec<_> = inputs.iter().map(|a| tape.param(a.clone())).collect();
    let out = f(&mut tape, &ids);
    let grads = tape.backward(out).unwrap();
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for (i, input) in inputs.iter().enumerate() {
        let g = grads.get(ids[i]);
        for j in 0..input.len() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += h;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= h;
            let num = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let ana = g.data()[j];
            let rel = (num - ana).abs() / num.abs().max(ana.abs()).max(1e-3);
            worst = worst.max(rel);
        }
    }
    worst
}

#[test]
fn gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    // weights the output so the loss is not symmetric in its entries
    let proj = |tape: &mut Tape, y: NodeId, rng_seed: u64| {
        let shape = tape.value(y).shape().to_vec();
        let mut r = ChaCha8Rng::seed_from_u64(rng_seed);
        let w = tape.constant(Array::from_fn(&shape, |_| r.gen_range(-1.0..1.0)));
        let m = tape.mul(y, w).unwrap();
        tape.sum(m)
    };
    let tol = 1e-4;
    let cases: Vec<(
        &str,
        Vec<Array>,
        Box<dyn Fn(&mut Tape, &[NodeId]) -> NodeId>,
    )> = vec![
        (
            "conv1d",
            vec![
                rand_array(&mut rng, &[2, 2, 6]),
                rand_array(&mut rng, &[3, 2, 3]),
                rand_array(&mut rng, &[3]),
            ],
            Box::new(move |t, v| {
                let y = t.conv1d(v[0], v[1], v[2], 1, 1).unwrap();
                proj(t, y, 1)
            }),
        ),
        (
            "conv1d_stride2",
            vec![
                rand_array(&mut rng, &[2, 8]),
                rand_array(&mut rng, &[2, 2, 3]),
                rand_array(&mut rng, &[2]),
            ],
            Box::new(move |t, v| {
                let y = t.conv1d(v[0], v[1], v[2], 2, 1).unwrap();
                proj(t, y, 2)
            }),
        ),
        (
            "linear",
            vec![
                rand_array(&mut rng, &[4, 3]),
                rand_array(&mut rng, &[2, 3]),
                rand_array(&mut rng, &[2]),
            ],
            Box::new(move |t, v| {
                let y = t.linear(v[0], v[1], v[2]).unwrap();
                proj(t, y, 3)
            }),
        ),
        (
            "group_norm",
            vec![
                rand_array(&mut rng, &[2, 4, 5]),
                rand_array(&mut rng, &[4]),
                rand_array(&mut rng, &[4]),
            ],
            Box::new(move |t, v| {
                let y = t.group_norm(v[0], 2, v[1], v[2], NORM_EPS).unwrap();
                proj(t, y, 4)
            }),
        ),
        (
            "attention",
            vec![
                rand_array(&mut rng, &[2, 3, 2]),
                rand_array(&mut rng, &[2, 3, 2]),
                rand_array(&mut rng, &[2, 3, 2]),
            ],
            Box::new(move |t, v| {
                let y = t.attention(v[0], v[1], v[2]).unwrap();
                proj(t, y, 5)
            }),
        ),
        (
            "activations+shape ops",
            vec![
                rand_array(&mut rng, &[2, 3, 4]),
                rand_array(&mut rng, &[2, 3, 1]),
            ],
            Box::new(move |t, v| {
                let a = t.silu(v[0]);
                let e = t.expand(v[1], 2, 4).unwrap();
                let m = t.mul(a, e).unwrap();
                let g = t.gelu(m);
                let p = t.permute(g, &[2, 0, 1]).unwrap();
                let u = t.upsample2(p).unwrap();
                let s = t.slice(u, 2, 1, 4).unwrap();
                let c = t.concat(&[s, s], 1).unwrap();
                let r = t.reshape(c, &[4, 16]).unwrap();
                proj(t, r, 6)
            }),
        ),
        (
            "mse",
            vec![rand_array(&mut rng, &[3, 3])],
            Box::new(move |t, v| t.mse(v[0], Array::full(&[3, 3], 0.2)).unwrap()),
        ),
    ];
    for (name, inputs, f) in cases {
        let err = fd_check(&inputs, f.as_ref());
        assert!(err < tol, "{name}: relative error {err}");
    }
}

#[test]
fn forward_is_bit_stable() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let xa = rand_array(&mut rng, &[2, 3, 8]);
    let wa = rand_array(&mut rng, &[4, 3, 5]);
    let ba = rand_array(&mut rng, &[4]);
    let run = || {
        let mut tape = Tape::new();
        let (x, w, b) = (
            tape.constant(xa.clone()),
            tape.constant(wa.clone()),
            tape.constant(ba.clone()),
        );
        let y = tape.conv1d(x, w, b, 1, 2).unwrap();
        tape.value(y).clone()
    };
    assert_eq!(run().data(), run().data());
}
