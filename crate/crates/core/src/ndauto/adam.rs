use super::{Array, Params};
use crate::error::{Error, Result};

/// Default learning rate of the training recipe.
pub const DEFAULT_LR: f64 = 2e-4;

/// Bias-corrected Adam moments for a [`Params`] collection.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Params,
    pub v: Params,
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(params: &Params, lr: f64) -> Self {
        let zeros: Params = params
            .iter()
            .map(|(k, a)| (k.clone(), Array::zeros(a.shape())))
            .collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// Applies one update in place. Any non-finite gradient aborts before
    /// anything is modified.
    pub fn step(&mut self, params: &mut Params, grads: &Params) -> Result<()> {
        for (name, p) in params.iter() {
            let g = grads
                .get(name)
                .ok_or_else(|| Error::Contract(format!("adam: no gradient for `{name}`")))?;
            if g.shape() != p.shape() || self.m.get(name).map(Array::shape) != Some(p.shape()) {
                return Err(Error::dim(
                    "adam_step",
                    format!(
                        "parameter `{name}` {:?} vs gradient {:?}",
                        p.shape(),
                        g.shape()
                    ),
                ));
            }
            if let Some(i) = g.data().iter().position(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!(
                    "adam: gradient of `{name}` is {} at flat index {i} (step {})",
                    g.data()[i],
                    self.step + 1
                )));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (name, p) in params.iter_mut() {
            let g = &grads[name];
            let m = self.m.get_mut(name).unwrap().data_mut();
            let v = self.v.get_mut(name).unwrap().data_mut();
            for (((pv, gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv;
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv;
                let mhat = *mv / c1;
                let vhat = *vv / c2;
                *pv -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(name: &str, v: f64) -> Params {
        [(name.to_string(), Array::scalar(v))].into_iter().collect()
    }

    #[test]
    fn zero_gradient_leaves_params_and_decays_moments() {
        let mut p = single("w", 1.5);
        let mut st = AdamState::new(&p, 0.1);
        st.step(&mut p, &single("w", 2.0)).unwrap();
        let after_one = p["w"].item();
        let m1 = st.m["w"].item();
        st.step(&mut p, &single("w", 0.0)).unwrap();
        // the decayed first moment still moves w; what matters is m shrinks
        assert!(st.m["w"].item().abs() < m1.abs());
        let mut q = single("w", 1.5);
        let mut fresh = AdamState::new(&q, 0.1);
        fresh.step(&mut q, &single("w", 0.0)).unwrap();
        assert_eq!(q["w"].item(), 1.5);
        assert!(after_one < 1.5);
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        for g in [3.0, -0.25, 1e-3] {
            let mut p = single("w", 0.0);
            let mut st = AdamState::new(&p, 0.01);
            st.step(&mut p, &single("w", g)).unwrap();
            let moved = p["w"].item();
            assert!(
                (moved + 0.01 * g.signum()).abs() < 1e-6,
                "g={g} moved={moved}"
            );
            assert_eq!(st.step, 1);
        }
    }

    /// Scalar reference Adam written independently of [`AdamState`].
    fn reference_adam(w0: f64, lr: f64, steps: usize) -> f64 {
        let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
        let (mut w, mut m, mut v) = (w0, 0.0, 0.0);
        for t in 1..=steps {
            let g = 2.0 * (w - 3.0);
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t as i32));
            let vh = v / (1.0 - b2.powi(t as i32));
            w -= lr * mh / (vh.sqrt() + eps);
        }
        w
    }

    #[test]
    fn quadratic_converges_like_reference() {
        let mut p = single("w", 0.0);
        let mut st = AdamState::new(&p, 0.1);
        for _ in 0..50 {
            let g = 2.0 * (p["w"].item() - 3.0);
            st.step(&mut p, &single("w", g)).unwrap();
        }
        let w = p["w"].item();
        let reference = reference_adam(0.0, 0.1, 50);
        assert!((w - 3.0).abs() < 0.5, "w = {w}");
        assert!((w - reference).abs() < 1e-12);
    }

    #[test]
    fn nan_gradient_aborts_without_mutation() {
        let mut p = single("w", 1.0);
        let mut st = AdamState::new(&p, 0.1);
        let err = st.step(&mut p, &single("w", f64::NAN)).unwrap_err();
        assert!(matches!(err, Error::Numeric(ref m) if m.contains("`w`")));
        assert_eq!(p["w"].item(), 1.0);
        assert_eq!(st.step, 0);
    }
}
