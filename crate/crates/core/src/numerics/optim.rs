use super::{ParamStore, Tensor};
use crate::error::{Error, Result};

/// Adam moments and hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct OptState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl OptState {
    pub fn adam(params: &ParamStore, lr: f64) -> Self {
        let zeros: Vec<Tensor> = params.values().iter().map(|t| Tensor::zeros(t.shape())).collect();
        OptState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    fn check(&self, params: &ParamStore) -> Result<()> {
        if self.m.len() != params.len() || self.v.len() != params.len() {
            return Err(Error::shape("opt_step", &[self.m.len(), self.v.len()], &[params.len()]));
        }
        for (p, (m, v)) in params.values().iter().zip(self.m.iter().zip(&self.v)) {
            if m.shape() != p.shape() || v.shape() != p.shape() {
                return Err(Error::shape("opt_step", m.shape(), p.shape()));
            }
        }
        Ok(())
    }
}

/// One bias-corrected Adam update from the store's gradient buffers.
///
/// No parameter is touched if any gradient is non-finite.
pub fn opt_step(params: &mut ParamStore, state: &mut OptState) -> Result<()> {
    state.check(params)?;
    if let Some(id) = params.ids().find(|&id| !params.grad(id).is_finite()) {
        return Err(Error::NonFinite {
            param: params.name(id).to_owned(),
        });
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (state.beta1, state.beta2);
    let bc1 = 1.0 - b1.powi(t);
    let bc2 = 1.0 - b2.powi(t);
    let ids: Vec<_> = params.ids().collect();
    for id in ids {
        let g = params.grad(id).data().to_vec();
        let m = state.m[id.0].data_mut();
        let v = state.v[id.0].data_mut();
        let p = params.get_mut(id).data_mut();
        for i in 0..g.len() {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            p[i] -= state.lr * m_hat / (v_hat.sqrt() + state.eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::row(vec![1.0, -2.0, 0.5])).unwrap();
        s
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut s = store();
        let before = s.clone();
        let mut opt = OptState::adam(&s, 1e-3);
        opt_step(&mut s, &mut opt).unwrap();
        assert_eq!(s.values(), before.values());
        assert_eq!(opt.step, 1);
    }

    #[test]
    fn constant_gradient_update_tends_to_lr() {
        // Closed form: m_t/(1-b1^t) = g and v_t/(1-b2^t) = g^2 for constant g,
        // so each step moves by lr * g / (|g| + eps).
        let mut s = store();
        let mut opt = OptState::adam(&s, 1e-2);
        let g = Tensor::row(vec![0.3, -4.0, 1e-3]);
        let mut prev = s.get(super::super::ParamId(0)).clone();
        for _ in 0..200 {
            s.zero_grads();
            s.accumulate(std::slice::from_ref(&g), 1.0).unwrap();
            opt_step(&mut s, &mut opt).unwrap();
            let cur = s.get(super::super::ParamId(0)).clone();
            for i in 0..3 {
                let expected = -1e-2 * g.data()[i] / (g.data()[i].abs() + 1e-8);
                let delta = cur.data()[i] - prev.data()[i];
                assert!((delta - expected).abs() < 1e-9 * 1e-2 + 1e-12, "{delta} vs {expected}");
            }
            prev = cur;
        }
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut s = store();
        s.accumulate(&[Tensor::row(vec![0.0, f64::NAN, 0.0])], 1.0).unwrap();
        let before = s.clone();
        let mut opt = OptState::adam(&s, 1e-3);
        match opt_step(&mut s, &mut opt) {
            Err(Error::NonFinite { param }) => assert_eq!(param, "w"),
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(s.values(), before.values());
    }
}
