use crate::error::{Result, TensorError};
use crate::params::{ParamGrads, ParamStore};
use crate::real::Real;
use crate::tensor::Tensor;

/// Adam hyperparameters other than the learning rate.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment accumulators, one pair per parameter, plus the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    pub(crate) step: u64,
    pub(crate) m: Vec<Tensor<T>>,
    pub(crate) v: Vec<Tensor<T>>,
}

impl<T: Real> AdamState<T> {
    pub fn new(params: &ParamStore<T>, config: AdamConfig) -> Self {
        let m: Vec<Tensor<T>> = params.iter().map(|(_, _, t)| Tensor::zeros(t.shape().to_vec())).collect();
        Self {
            config,
            step: 0,
            v: m.clone(),
            m,
        }
    }

    /// Rebuilds a state from stored parts. Shapes are checked against
    /// `params` by [`adam_step`], not here.
    pub fn from_parts(config: AdamConfig, step: u64, m: Vec<Tensor<T>>, v: Vec<Tensor<T>>) -> Self {
        Self { config, step, m, v }
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn first_moments(&self) -> &[Tensor<T>] {
        &self.m
    }

    pub fn second_moments(&self) -> &[Tensor<T>] {
        &self.v
    }

    fn check(&self, params: &ParamStore<T>) -> Result<()> {
        if self.m.len() != params.len() || self.v.len() != params.len() {
            return Err(TensorError::OptimizerState(format!(
                "{} moment slots for {} parameters",
                self.m.len(),
                params.len()
            )));
        }
        for (id, name, t) in params.iter() {
            let i = id.index();
            if self.m[i].shape() != t.shape() || self.v[i].shape() != t.shape() {
                return Err(TensorError::OptimizerState(name.to_string()));
            }
        }
        Ok(())
    }
}

/// One bias-corrected Adam update. A parameter without a gradient is
/// treated as having a zero gradient. Nothing is modified if any gradient is
/// non-finite or the state does not match `params`.
pub fn adam_step<T: Real>(
    params: &mut ParamStore<T>,
    grads: &ParamGrads<T>,
    state: &mut AdamState<T>,
    lr: f64,
) -> Result<()> {
    if !lr.is_finite() || lr < 0.0 {
        return Err(TensorError::LearningRate(lr));
    }
    state.check(params)?;
    for (id, name, t) in params.iter() {
        if let Some(g) = grads.get(id) {
            if g.shape() != t.shape() {
                return Err(TensorError::ShapeMismatch {
                    op: "adam_step",
                    left: t.shape().to_vec(),
                    right: g.shape().to_vec(),
                });
            }
            if !g.is_finite() {
                return Err(TensorError::NonFiniteGradient(name.to_string()));
            }
        }
    }

    state.step += 1;
    let AdamConfig { beta1, beta2, eps } = state.config;
    let t = state.step as i32;
    let bc1 = T::of(1.0 - beta1.powi(t));
    let bc2 = T::of(1.0 - beta2.powi(t));
    let (b1, b2, eps, lr) = (T::of(beta1), T::of(beta2), T::of(eps), T::of(lr));
    let (one_b1, one_b2) = (T::one() - b1, T::one() - b2);

    let ids: Vec<_> = params.ids().collect();
    for id in ids {
        let i = id.index();
        let g = grads.get(id);
        let theta = params.get_mut(id).data_mut();
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for e in 0..theta.len() {
            let ge = g.map_or(T::zero(), |g| g.data()[e]);
            m[e] = b1 * m[e] + one_b1 * ge;
            v[e] = b2 * v[e] + one_b2 * ge * ge;
            let m_hat = m[e] / bc1;
            let v_hat = v[e] / bc2;
            theta[e] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(value: f64) -> ParamStore<f64> {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::from_f64([2], &[value, value]).unwrap());
        store
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut store = single(0.5);
        let mut state = AdamState::new(&store, AdamConfig::default());
        let mut grads = ParamGrads::for_store(&store);
        grads.accumulate(store.id("w").unwrap(), &Tensor::ones([2]));
        adam_step(&mut store, &grads, &mut state, 0.001).unwrap();
        for &w in store.by_name("w").unwrap().data() {
            assert!((w - (0.5 - 0.001)).abs() < 1e-10, "{w}");
        }
        assert_eq!(state.step(), 1);
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        let mut store = single(0.25);
        let before = store.clone();
        let mut state = AdamState::new(&store, AdamConfig::default());
        let mut grads = ParamGrads::for_store(&store);
        grads.accumulate(store.id("w").unwrap(), &Tensor::zeros([2]));
        for _ in 0..3 {
            adam_step(&mut store, &grads, &mut state, 0.001).unwrap();
        }
        assert_eq!(store, before);
        let empty = ParamGrads::for_store(&store);
        adam_step(&mut store, &empty, &mut state, 0.001).unwrap();
        assert_eq!(store, before);
    }

    #[test]
    fn nan_gradient_names_parameter_and_leaves_state() {
        let mut store = single(1.0);
        let before = store.clone();
        let mut state = AdamState::new(&store, AdamConfig::default());
        let mut grads = ParamGrads::for_store(&store);
        grads.accumulate(store.id("w").unwrap(), &Tensor::from_f64([2], &[1.0, f64::NAN]).unwrap());
        let err = adam_step(&mut store, &grads, &mut state, 0.001).unwrap_err();
        assert_eq!(err, TensorError::NonFiniteGradient("w".into()));
        assert_eq!(store, before);
        assert_eq!(state.step(), 0);
    }

    #[test]
    fn negative_learning_rate_rejected() {
        let mut store = single(1.0);
        let mut state = AdamState::new(&store, AdamConfig::default());
        let grads = ParamGrads::for_store(&store);
        assert!(matches!(
            adam_step(&mut store, &grads, &mut state, -1.0),
            Err(TensorError::LearningRate(_))
        ));
    }
}
