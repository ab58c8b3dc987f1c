//! Benchmark learner: the inner problem uses a smoothed l1 penalty
//! `sum_i sqrt(v_i^2 + eps^2)` solved by plain gradient descent, and the
//! dictionary is left unconstrained.

use crate::autodiff::{self, Tape, Var};
use crate::datagen::Dataset;
use crate::denoiser::{Arith, Plain, LIPSCHITZ_INFLATION};
use crate::error::{Error, Result};
use crate::learner::{train_with, InnerSolver, Projection, TrainConfig, TrainReport};
use crate::linalg::{self, linf_norm, spectral_norm_sq, Rng, Tensor, POWER_MAX_ITER, POWER_TOL};

#[derive(Debug, Clone, PartialEq)]
pub struct SmoothedConfig {
    pub epsilon: f64,
    /// Gradient sup-norm below which the inner descent stops.
    pub inner_tol: f64,
    pub inner_max_iter: usize,
    /// Outer loop settings; the projection is ignored and treated as none.
    pub train: TrainConfig,
}

impl SmoothedConfig {
    pub fn new(train: TrainConfig) -> Self {
        SmoothedConfig {
            epsilon: 1e-3,
            inner_tol: 1e-6,
            inner_max_iter: 5000,
            train,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) || !self.epsilon.is_finite() {
            return Err(Error::InvalidConfig(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        if !(self.inner_tol > 0.0) {
            return Err(Error::InvalidConfig(format!("inner_tol must be positive, got {}", self.inner_tol)));
        }
        if self.inner_max_iter == 0 {
            return Err(Error::InvalidConfig("inner_max_iter must be at least 1".into()));
        }
        Ok(())
    }
}

pub fn smoothed_l1(v: &Tensor, epsilon: f64) -> f64 {
    let e2 = epsilon * epsilon;
    v.data().iter().map(|x| (x * x + e2).sqrt()).sum()
}

/// Gradient of [`smoothed_l1`].
pub fn smoothed_l1_grad(v: &Tensor, epsilon: f64) -> Tensor {
    autodiff::smooth_sign(v, epsilon)
}

/// `1/2 ||y - w||^2 + smoothed_l1(D^T w)`.
pub fn smoothed_objective(d: &Tensor, y: &Tensor, w: &Tensor, epsilon: f64) -> Result<f64> {
    Ok(0.5 * y.sub(w)?.sq_norm() + smoothed_l1(&linalg::matvec_t(d, w)?, epsilon))
}

/// Gradient of [`smoothed_objective`] with respect to `w`.
pub fn smoothed_objective_grad(d: &Tensor, y: &Tensor, w: &Tensor, epsilon: f64) -> Result<Tensor> {
    let mut g = linalg::matvec(d, &smoothed_l1_grad(&linalg::matvec_t(d, w)?, epsilon))?;
    g.axpy(1.0, &w.sub(y)?)?;
    Ok(g)
}

/// `1 / (1 + 1.01 ||D^T D|| / eps)`, the inverse of a Lipschitz bound of
/// the objective's gradient.
pub fn smoothed_step(d: &Tensor, epsilon: f64) -> Result<f64> {
    if d.is_all_zero() {
        return Ok(1.0);
    }
    let l = spectral_norm_sq(d, POWER_TOL, POWER_MAX_ITER)?;
    Ok(1.0 / (1.0 + LIPSCHITZ_INFLATION * l / epsilon))
}

fn descent<B: Arith>(b: &mut B, d: &B::V, y: &B::V, step: f64, cfg: &SmoothedConfig) -> Result<(B::V, usize)> {
    let mut w = y.clone();
    for k in 0..cfg.inner_max_iter {
        let v = b.matvec_t(d, &w)?;
        let s = b.smooth_sign(&v, cfg.epsilon)?;
        let ds = b.matvec(d, &s)?;
        let r = b.sub(&w, y)?;
        let g = b.add(&r, &ds)?;
        if !b.val(&g).all_finite() {
            return Err(Error::Divergence {
                iteration: k + 1,
                reason: "non-finite gradient in smoothed descent".into(),
            });
        }
        if linf_norm(b.val(&g)) < cfg.inner_tol {
            return Ok((w, k));
        }
        let delta = b.scale(&g, step)?;
        w = b.sub(&w, &delta)?;
    }
    Ok((w, cfg.inner_max_iter))
}

/// Solved estimate and the number of descent steps taken.
#[derive(Debug, Clone)]
pub struct SmoothedResult {
    pub w_hat: Tensor,
    pub iterations: usize,
    pub converged: bool,
}

/// Gradient descent from `w = y`. `D = 0` returns `y`.
pub fn denoise_smoothed(d: &Tensor, y: &Tensor, cfg: &SmoothedConfig) -> Result<SmoothedResult> {
    cfg.validate()?;
    let step = smoothed_step(d, cfg.epsilon)?;
    denoise_smoothed_with_step(d, y, step, cfg)
}

pub fn denoise_smoothed_with_step(d: &Tensor, y: &Tensor, step: f64, cfg: &SmoothedConfig) -> Result<SmoothedResult> {
    if y.rows() != d.rows() || y.cols() != 1 {
        return Err(Error::dim(
            "denoise_smoothed",
            format!("signal of shape ({}, 1)", d.rows()),
            format!("{:?}", y.shape()),
        ));
    }
    let (w_hat, iterations) = descent(&mut Plain, d, y, step, cfg)?;
    Ok(SmoothedResult {
        w_hat,
        iterations,
        converged: iterations < cfg.inner_max_iter,
    })
}

/// Records the descent on `tape`; the step size is not differentiated.
pub fn denoise_smoothed_recorded(tape: &mut Tape, d: Var, y: &Tensor, step: f64, cfg: &SmoothedConfig) -> Result<(Var, usize)> {
    let yv = tape.input(y.clone(), false);
    descent(tape, &d, &yv, step, cfg)
}

/// The smoothed solver as a plug-in for the outer loop.
#[derive(Debug, Clone)]
pub struct Smoothed(pub SmoothedConfig);

impl InnerSolver for Smoothed {
    fn prepare(&self, d: &Tensor) -> Result<f64> {
        smoothed_step(d, self.0.epsilon)
    }

    fn record(&self, tape: &mut Tape, d: Var, y: &Tensor, step: f64, _rng: &mut Rng) -> Result<(Var, usize)> {
        denoise_smoothed_recorded(tape, d, y, step, &self.0)
    }

    fn estimate(&self, d: &Tensor, y: &Tensor, _rng: &mut Rng) -> Result<Tensor> {
        Ok(denoise_smoothed(d, y, &self.0)?.w_hat)
    }
}

/// Same outer loop as [`crate::learner::train`] with the smoothed inner
/// solver and no projection.
pub fn train_smoothed(train_set: &Dataset, val_set: &Dataset, cfg: &SmoothedConfig) -> Result<TrainReport> {
    cfg.validate()?;
    let outer = TrainConfig {
        projection: Projection::None,
        ..cfg.train.clone()
    };
    train_with(&Smoothed(cfg.clone()), train_set, val_set, &outer)
}
