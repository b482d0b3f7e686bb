//! AdamW with bias correction and decoupled weight decay.

use crate::error::{domain_err, Result};
use crate::scalar::Scalar;

use super::params::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// First and second moments for every parameter, plus the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamWState<T> {
    pub step: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl<T: Scalar> AdamWState<T> {
    pub fn new(store: &ParamStore<T>) -> Self {
        let zeros = |_| {
            store
                .iter()
                .map(|(_, p)| vec![T::zero(); p.tensor.len()])
                .collect()
        };
        Self {
            step: 0,
            m: zeros(()),
            v: zeros(()),
        }
    }

    /// One update using the grad buffers in `store` and learning rate `lr`
    /// (which overrides `cfg.lr`, so schedules stay outside the optimizer).
    ///
    /// Parameters without a grad buffer are treated as having zero gradient.
    /// A non-finite gradient aborts the step before anything is modified.
    pub fn step(&mut self, store: &mut ParamStore<T>, cfg: &AdamWConfig, lr: f64) -> Result<()> {
        for (_, p) in store.iter() {
            if let Some(g) = p.tensor.grad() {
                if let Some(k) = g.iter().position(|x| !x.is_finite()) {
                    return domain_err(format!(
                        "non-finite gradient in {}[{k}]; step skipped",
                        p.name
                    ));
                }
            }
        }
        let t = self.step + 1;
        let (b1, b2) = (T::lit(cfg.beta1), T::lit(cfg.beta2));
        let bc1 = T::lit(1.0 - cfg.beta1.powi(t as i32));
        let bc2 = T::lit(1.0 - cfg.beta2.powi(t as i32));
        let lr_t = T::lit(lr);
        let eps = T::lit(cfg.eps);
        let decay = T::one() - T::lit(lr * cfg.weight_decay);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let i = id.0;
            let param = store.get_mut(id);
            let apply_decay = param.decay && cfg.weight_decay != 0.0;
            let grad = param.tensor.grad().map(|g| g.to_vec());
            let data = param.tensor.data_mut();
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for k in 0..data.len() {
                let g = grad.as_ref().map_or(T::zero(), |g| g[k]);
                m[k] = b1 * m[k] + (T::one() - b1) * g;
                v[k] = b2 * v[k] + (T::one() - b2) * g * g;
                if apply_decay {
                    data[k] *= decay;
                }
                let mhat = m[k] / bc1;
                let vhat = v[k] / bc2;
                data[k] -= lr_t * mhat / (vhat.sqrt() + eps);
            }
        }
        self.step = t;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    fn store_with(values: &[f64]) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.add("theta", Tensor::from_vec(values.to_vec()), true)
            .unwrap();
        s
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut s = store_with(&[1.0, -2.0]);
        s.tensor_mut(crate::numerics::ParamId(0)).grad_mut();
        let mut st = AdamWState::new(&s);
        st.step(&mut s, &AdamWConfig::default(), 1e-2).unwrap();
        assert_eq!(s.tensor(crate::numerics::ParamId(0)).data(), &[1.0, -2.0]);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut s = store_with(&[0.5, 0.5, 0.5]);
        let id = crate::numerics::ParamId(0);
        s.tensor_mut(id)
            .grad_mut()
            .copy_from_slice(&[3.0, -0.2, 1e-3]);
        let mut st = AdamWState::new(&s);
        let lr = 0.01;
        st.step(&mut s, &AdamWConfig::default(), lr).unwrap();
        let d = s.tensor(id).data();
        for (x, sign) in d.iter().zip([1.0, -1.0, 1.0]) {
            assert!((x - (0.5 - lr * sign)).abs() < 1e-6, "{x}");
        }
    }

    #[test]
    fn non_finite_gradient_leaves_state_untouched() {
        let mut s = store_with(&[1.0]);
        let id = crate::numerics::ParamId(0);
        s.tensor_mut(id).grad_mut()[0] = f64::NAN;
        let mut st = AdamWState::new(&s);
        assert!(st.step(&mut s, &AdamWConfig::default(), 0.1).is_err());
        assert_eq!(st.step, 0);
        assert_eq!(s.tensor(id).data(), &[1.0]);
    }

    #[test]
    fn decay_is_decoupled_and_multiplicative() {
        let mut s = store_with(&[2.0]);
        let id = crate::numerics::ParamId(0);
        s.tensor_mut(id).grad_mut();
        let mut st = AdamWState::new(&s);
        let cfg = AdamWConfig {
            weight_decay: 0.5,
            ..Default::default()
        };
        st.step(&mut s, &cfg, 0.1).unwrap();
        assert!((s.tensor(id).data()[0] - 2.0 * (1.0 - 0.05)).abs() < 1e-15);
    }
}
