//! Parameter update rules and the hyperparameter grid search.
//!
//! Optimizer state keeps one buffer per parameter buffer of the model (the
//! weights and the bias of every kernel, in model order).

mod grid;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ConvKernel;
use crate::tensor::Scalar;

pub use grid::{grid_search, write_grid_csv, CellResult, CellStatus, GridCell, GridResult, GridSpec};

/// Heavy-ball momentum step on one buffer: `v ← μv − ηg; w ← w + v`.
pub fn sgd_update<T: Scalar>(w: &mut [T], g: &[T], v: &mut [T], lr: T, momentum: T) {
    for ((w, &g), v) in w.iter_mut().zip(g).zip(v.iter_mut()) {
        *v = momentum * *v - lr * g;
        *w = *w + *v;
    }
}

/// Bias-corrected Adam step on one buffer. `t` is the 1-based step number.
#[allow(clippy::too_many_arguments)]
pub fn adam_update<T: Scalar>(
    w: &mut [T],
    g: &[T],
    m: &mut [T],
    v: &mut [T],
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
) {
    let c1 = 1.0 - beta1.powf(t as f64);
    let c2 = 1.0 - beta2.powf(t as f64);
    let (b1, b2) = (T::from_f64(beta1), T::from_f64(beta2));
    let (ib1, ib2) = (T::from_f64(1.0 - beta1), T::from_f64(1.0 - beta2));
    let (c1, c2) = (T::from_f64(c1), T::from_f64(c2));
    let (lr, eps) = (T::from_f64(lr), T::from_f64(eps));
    for (((w, &g), m), v) in w.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
        *m = b1 * *m + ib1 * g;
        *v = b2 * *v + ib2 * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *w = *w - lr * m_hat / (v_hat.sqrt() + eps);
    }
}

fn mirror<T: Scalar>(kernels: &[ConvKernel<T>]) -> Vec<Vec<T>> {
    kernels
        .iter()
        .flat_map(|k| k.buffers().map(|b| vec![T::zero(); b.len()]))
        .collect()
}

fn check_agreement<T: Scalar>(
    state: &[Vec<T>],
    params: &[ConvKernel<T>],
    grads: &[ConvKernel<T>],
) -> Result<()> {
    if params.len() != grads.len() || state.len() != 2 * params.len() {
        return Err(Error::Shape(format!(
            "{} parameter blocks, {} gradient blocks, {} state buffers",
            params.len(),
            grads.len(),
            state.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() {
            return Err(Error::Shape(format!(
                "block {i}: parameter {:?} vs gradient {:?}",
                p.shape(),
                g.shape()
            )));
        }
        for (b, buf) in p.buffers().iter().enumerate() {
            if state[2 * i + b].len() != buf.len() {
                return Err(Error::Shape(format!("block {i}: optimizer state size mismatch")));
            }
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct SgdState<T> {
    pub lr: f64,
    pub momentum: f64,
    pub velocity: Vec<Vec<T>>,
}

impl<T: Scalar> SgdState<T> {
    pub fn new(params: &[ConvKernel<T>], lr: f64, momentum: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::Parameter(format!("momentum {momentum} outside [0, 1)")));
        }
        Ok(SgdState {
            lr,
            momentum,
            velocity: mirror(params),
        })
    }

    pub fn step(&mut self, params: &mut [ConvKernel<T>], grads: &[ConvKernel<T>]) -> Result<()> {
        check_agreement(&self.velocity, params, grads)?;
        let (lr, mu) = (T::from_f64(self.lr), T::from_f64(self.momentum));
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            for (b, (w, gb)) in p.buffers_mut().into_iter().zip(g.buffers()).enumerate() {
                sgd_update(w, gb, &mut self.velocity[2 * i + b], lr, mu);
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &[ConvKernel<T>], lr: f64, beta1: f64, beta2: f64, eps: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || !(eps > 0.0) {
            return Err(Error::Parameter(format!(
                "Adam parameters beta1={beta1} beta2={beta2} eps={eps} out of range"
            )));
        }
        Ok(AdamState {
            lr,
            beta1,
            beta2,
            eps,
            t: 0,
            m: mirror(params),
            v: mirror(params),
        })
    }

    pub fn step(&mut self, params: &mut [ConvKernel<T>], grads: &[ConvKernel<T>]) -> Result<()> {
        check_agreement(&self.m, params, grads)?;
        check_agreement(&self.v, params, grads)?;
        self.t += 1;
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            for (b, (w, gb)) in p.buffers_mut().into_iter().zip(g.buffers()).enumerate() {
                adam_update(
                    w,
                    gb,
                    &mut self.m[2 * i + b],
                    &mut self.v[2 * i + b],
                    self.lr,
                    self.beta1,
                    self.beta2,
                    self.eps,
                    self.t,
                );
            }
        }
        Ok(())
    }
}

/// Optimizer choice and hyperparameters as written in run configurations.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum OptimizerConfig {
    Sgd {
        lr: f64,
        #[serde(default = "default_momentum")]
        momentum: f64,
    },
    Adam {
        lr: f64,
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_eps")]
        eps: f64,
    },
}

fn default_momentum() -> f64 {
    0.99
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig::Adam {
            lr: 0.001,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
        }
    }
}

impl OptimizerConfig {
    pub fn lr(&self) -> f64 {
        match *self {
            OptimizerConfig::Sgd { lr, .. } | OptimizerConfig::Adam { lr, .. } => lr,
        }
    }

    pub fn with_lr(self, lr: f64) -> Self {
        match self {
            OptimizerConfig::Sgd { momentum, .. } => OptimizerConfig::Sgd { lr, momentum },
            OptimizerConfig::Adam {
                beta1, beta2, eps, ..
            } => OptimizerConfig::Adam {
                lr,
                beta1,
                beta2,
                eps,
            },
        }
    }

    pub fn init<T: Scalar>(&self, params: &[ConvKernel<T>]) -> Result<OptimizerState<T>> {
        Ok(match *self {
            OptimizerConfig::Sgd { lr, momentum } => {
                OptimizerState::Sgd(SgdState::new(params, lr, momentum)?)
            }
            OptimizerConfig::Adam {
                lr,
                beta1,
                beta2,
                eps,
            } => OptimizerState::Adam(AdamState::new(params, lr, beta1, beta2, eps)?),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum OptimizerState<T> {
    Sgd(SgdState<T>),
    Adam(AdamState<T>),
}

impl<T: Scalar> OptimizerState<T> {
    pub fn step(&mut self, params: &mut [ConvKernel<T>], grads: &[ConvKernel<T>]) -> Result<()> {
        match self {
            OptimizerState::Sgd(s) => s.step(params, grads),
            OptimizerState::Adam(s) => s.step(params, grads),
        }
    }

    pub fn config(&self) -> OptimizerConfig {
        match self {
            OptimizerState::Sgd(s) => OptimizerConfig::Sgd {
                lr: s.lr,
                momentum: s.momentum,
            },
            OptimizerState::Adam(s) => OptimizerConfig::Adam {
                lr: s.lr,
                beta1: s.beta1,
                beta2: s.beta2,
                eps: s.eps,
            },
        }
    }

    /// Adam step counter; zero for SGD.
    pub fn step_count(&self) -> u64 {
        match self {
            OptimizerState::Sgd(_) => 0,
            OptimizerState::Adam(s) => s.t,
        }
    }

    /// Named state buffers in a fixed order, for serialization.
    pub fn buffers(&self) -> Vec<(&'static str, &[Vec<T>])> {
        match self {
            OptimizerState::Sgd(s) => vec![("velocity", &s.velocity[..])],
            OptimizerState::Adam(s) => vec![("m", &s.m[..]), ("v", &s.v[..])],
        }
    }

    pub fn buffers_mut(&mut self) -> Vec<&mut Vec<Vec<T>>> {
        match self {
            OptimizerState::Sgd(s) => vec![&mut s.velocity],
            OptimizerState::Adam(s) => vec![&mut s.m, &mut s.v],
        }
    }

    pub fn set_step_count(&mut self, t: u64) {
        if let OptimizerState::Adam(s) = self {
            s.t = t;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn scalar_kernel(w: f64) -> ConvKernel<f64> {
        let mut k = ConvKernel::zeros(1, 1, 1).unwrap();
        k.weights[0] = w;
        k
    }

    #[test]
    fn sgd_first_and_second_step() {
        let mut w = [1.0f64];
        let mut v = [0.0f64];
        sgd_update(&mut w, &[1.0], &mut v, 0.1, 0.99);
        assert!((v[0] + 0.1).abs() < 1e-15);
        assert!((w[0] - 0.9).abs() < 1e-15);
        sgd_update(&mut w, &[1.0], &mut v, 0.1, 0.99);
        assert!((v[0] + 0.199).abs() < 1e-15);
        assert!((w[0] - 0.701).abs() < 1e-15);
    }

    #[test]
    fn sgd_without_momentum_is_gradient_descent() {
        let mut params = vec![scalar_kernel(2.0)];
        let mut grads = vec![scalar_kernel(0.5)];
        grads[0].bias[0] = -1.0;
        let mut s = SgdState::new(&params, 0.2, 0.0).unwrap();
        s.step(&mut params, &grads).unwrap();
        assert!((params[0].weights[0] - (2.0 - 0.2 * 0.5)).abs() < 1e-15);
        assert!((params[0].bias[0] - 0.2).abs() < 1e-15);
    }

    #[test]
    fn sgd_decreases_quadratic() {
        for lr in [0.01, 0.3, 0.7, 1.0] {
            let mut w = [1.0f64];
            let mut v = [0.0];
            let g = [w[0]];
            sgd_update(&mut w, &g, &mut v, lr, 0.0);
            assert!(w[0] * w[0] / 2.0 < 0.5, "lr {lr}");
        }
    }

    #[test]
    fn adam_first_step_is_sign_step() {
        let mut w = [1.0f64];
        let (mut m, mut v) = ([0.0], [0.0]);
        adam_update(&mut w, &[1.0], &mut m, &mut v, 0.001, 0.9, 0.999, 1e-8, 1);
        assert!((w[0] - 0.999).abs() < 1e-8);

        for g in [0.3, -2.0, 17.0] {
            let mut w1 = [0.0f64];
            let mut w2 = [0.0f64];
            let (mut m1, mut v1, mut m2, mut v2) = ([0.0], [0.0], [0.0], [0.0]);
            adam_update(&mut w1, &[g], &mut m1, &mut v1, 0.001, 0.9, 0.999, 1e-8, 1);
            adam_update(&mut w2, &[100.0 * g], &mut m2, &mut v2, 0.001, 0.9, 0.999, 1e-8, 1);
            assert!((w1[0] - w2[0]).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_gradients_leave_parameters_unchanged() {
        let mut params = vec![scalar_kernel(0.75)];
        let before = params.clone();
        let zeros = vec![params[0].zeros_like()];
        let mut adam = AdamState::new(&params, 0.001, 0.9, 0.999, 1e-8).unwrap();
        adam.step(&mut params, &zeros).unwrap();
        assert_eq!(params, before);
        let mut sgd = SgdState::new(&params, 0.1, 0.99).unwrap();
        sgd.step(&mut params, &zeros).unwrap();
        assert_eq!(params, before);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut params = vec![scalar_kernel(1.0)];
        let grads = vec![ConvKernel::<f64>::zeros(2, 1, 1).unwrap()];
        let mut s = SgdState::new(&params, 0.1, 0.9).unwrap();
        assert!(matches!(s.step(&mut params, &grads), Err(Error::Shape(_))));
    }

    proptest! {
        #[test]
        fn adam_stays_finite(gs in proptest::collection::vec(-1e30f64..1e30, 1..20)) {
            let mut w = vec![0.5f64; gs.len()];
            let mut m = vec![0.0; gs.len()];
            let mut v = vec![0.0; gs.len()];
            for t in 1..4 {
                adam_update(&mut w, &gs, &mut m, &mut v, 0.001, 0.9, 0.999, 1e-8, t);
            }
            prop_assert!(w.iter().all(|x| x.is_finite()));
        }
    }
}
