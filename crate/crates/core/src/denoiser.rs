//! Analysis-sparse denoising through the dual problem.
//!
//! The primal problem `min_w 1/2 ||y - w||^2 + ||D^T w||_1` is solved via
//! its dual `min_{||z||_inf <= 1} 1/2 ||D z - y||^2` with FISTA, then mapped
//! back with `w = y - D z`. The same loop runs either on plain tensors or on
//! a [`Tape`], so a recorded solve reproduces the plain one to the last bit.

use crate::autodiff::{clamp_unit, grad_check, GradCheckReport, Tape, Var};
use crate::error::{Error, Result};
use crate::linalg::{self, gaussian, linf_norm, spectral_norm_sq, Rng, Stream, Tensor};

/// Inflation applied to the power-iteration estimate, which is a lower bound.
pub const LIPSCHITZ_INFLATION: f64 = 1.01;

#[derive(Debug, Clone, PartialEq)]
pub struct DenoiseConfig {
    /// Step size is `eta1_safety / L`.
    pub eta1_safety: f64,
    /// Relative sup-norm change of `z` below which the solve stops.
    pub tol: f64,
    pub max_itr1: usize,
    /// Must be set for [`denoise_recorded`].
    pub record: bool,
    /// Run exactly `max_itr1` updates and ignore `tol`.
    pub fixed_iterations: bool,
    /// Cap on recorded bytes per solve.
    pub tape_budget: Option<usize>,
}

impl Default for DenoiseConfig {
    fn default() -> Self {
        Self::evaluation()
    }
}

impl DenoiseConfig {
    /// Inner budget used inside the training loop.
    pub fn training() -> Self {
        DenoiseConfig {
            eta1_safety: 0.95,
            tol: 1e-4,
            max_itr1: 1000,
            record: true,
            fixed_iterations: false,
            tape_budget: None,
        }
    }

    /// Inner budget for validation and reference losses.
    pub fn evaluation() -> Self {
        DenoiseConfig {
            eta1_safety: 0.95,
            tol: 1e-4,
            max_itr1: 10_000,
            record: false,
            fixed_iterations: false,
            tape_budget: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eta1_safety > 0.0 && self.eta1_safety < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "eta1_safety must lie in (0, 1), got {}",
                self.eta1_safety
            )));
        }
        if !(self.tol > 0.0) {
            return Err(Error::InvalidConfig(format!("tol must be positive, got {}", self.tol)));
        }
        if self.max_itr1 == 0 {
            return Err(Error::InvalidConfig("max_itr1 must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolveStats {
    pub iterations: usize,
    pub converged: bool,
}

#[derive(Debug, Clone)]
pub struct DenoiseResult {
    pub w_hat: Tensor,
    pub z_hat: Tensor,
    pub iterations: usize,
    pub converged: bool,
    /// `1/2 ||D z - y||^2` at `z_hat`.
    pub dual_objective: f64,
    /// `1/2 ||y - w||^2 + ||D^T w||_1` at `w_hat`.
    pub primal_objective: f64,
    /// `1/2 ||y||^2`, the constant linking the two objectives.
    pub half_sq_norm_y: f64,
}

impl DenoiseResult {
    /// Primal value minus the (maximisation-form) dual value
    /// `1/2 ||y||^2 - 1/2 ||D z - y||^2`; nonnegative and zero at optimality.
    pub fn duality_gap(&self) -> f64 {
        self.primal_objective - (self.half_sq_norm_y - self.dual_objective)
    }

    pub fn relative_gap(&self) -> f64 {
        self.duality_gap() / (1.0 + self.primal_objective.abs())
    }
}

/// `eta1_safety / (1.01 * ||D^T D||_2)`.
pub fn step_size(d: &Tensor, cfg: &DenoiseConfig) -> Result<f64> {
    let l = spectral_norm_sq(d, linalg::POWER_TOL, linalg::POWER_MAX_ITER)?;
    Ok(cfg.eta1_safety / (LIPSCHITZ_INFLATION * l))
}

pub(crate) fn next_momentum(t: f64) -> f64 {
    0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt())
}

/// Arithmetic backend shared by the plain and the recorded solver.
pub(crate) trait Arith {
    type V: Clone;
    fn val<'a>(&'a self, v: &'a Self::V) -> &'a Tensor;
    fn matvec(&mut self, a: &Self::V, x: &Self::V) -> Result<Self::V>;
    fn matvec_t(&mut self, a: &Self::V, x: &Self::V) -> Result<Self::V>;
    fn add(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V>;
    fn sub(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V>;
    fn scale(&mut self, a: &Self::V, c: f64) -> Result<Self::V>;
    fn clamp1(&mut self, a: &Self::V) -> Result<Self::V>;
    fn smooth_sign(&mut self, a: &Self::V, eps: f64) -> Result<Self::V>;
}

pub(crate) struct Plain;

impl Arith for Plain {
    type V = Tensor;

    fn val<'a>(&'a self, v: &'a Tensor) -> &'a Tensor {
        v
    }
    fn matvec(&mut self, a: &Tensor, x: &Tensor) -> Result<Tensor> {
        linalg::matvec(a, x)
    }
    fn matvec_t(&mut self, a: &Tensor, x: &Tensor) -> Result<Tensor> {
        linalg::matvec_t(a, x)
    }
    fn add(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        a.add(b)
    }
    fn sub(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        a.sub(b)
    }
    fn scale(&mut self, a: &Tensor, c: f64) -> Result<Tensor> {
        Ok(a.scale(c))
    }
    fn clamp1(&mut self, a: &Tensor) -> Result<Tensor> {
        Ok(clamp_unit(a))
    }
    fn smooth_sign(&mut self, a: &Tensor, eps: f64) -> Result<Tensor> {
        Ok(crate::autodiff::smooth_sign(a, eps))
    }
}

impl Arith for Tape {
    type V = Var;

    fn val<'a>(&'a self, v: &'a Var) -> &'a Tensor {
        self.value(*v)
    }
    fn matvec(&mut self, a: &Var, x: &Var) -> Result<Var> {
        Tape::matvec(self, *a, *x)
    }
    fn matvec_t(&mut self, a: &Var, x: &Var) -> Result<Var> {
        Tape::matvec_t(self, *a, *x)
    }
    fn add(&mut self, a: &Var, b: &Var) -> Result<Var> {
        Tape::add(self, *a, *b)
    }
    fn sub(&mut self, a: &Var, b: &Var) -> Result<Var> {
        Tape::sub(self, *a, *b)
    }
    fn scale(&mut self, a: &Var, c: f64) -> Result<Var> {
        Tape::scale(self, *a, c)
    }
    fn clamp1(&mut self, a: &Var) -> Result<Var> {
        Tape::clamp1(self, *a)
    }
    fn smooth_sign(&mut self, a: &Var, eps: f64) -> Result<Var> {
        Tape::smooth_sign(self, *a, eps)
    }
}

/// One projected gradient step `clamp(q - eta D^T (D q - y))`.
fn projected_step<B: Arith>(b: &mut B, d: &B::V, y: &B::V, q: &B::V, eta: f64) -> Result<B::V> {
    let dq = b.matvec(d, q)?;
    let r = b.sub(&dq, y)?;
    let g = b.matvec_t(d, &r)?;
    let s = b.scale(&g, eta)?;
    let pre = b.sub(q, &s)?;
    b.clamp1(&pre)
}

/// Checks the descent inequality `||D (z - q)||^2 <= ||z - q||^2 / eta`,
/// which every step satisfies exactly when `eta <= 1 / ||D^T D||`.
fn check_step(d: &Tensor, z: &Tensor, q: &Tensor, eta: f64, iteration: usize) -> Result<()> {
    if !z.all_finite() || !q.all_finite() {
        return Err(Error::Divergence {
            iteration,
            reason: "non-finite dual iterate".into(),
        });
    }
    let diff = z.sub(q)?;
    let lhs = linalg::matvec(d, &diff)?.sq_norm();
    let rhs = diff.sq_norm() / eta;
    if lhs > rhs * (1.0 + 1e-9) + f64::MIN_POSITIVE {
        return Err(Error::Divergence {
            iteration,
            reason: format!(
                "step size {eta:e} exceeds 1/L: curvature {:.6e} along the last step",
                lhs / diff.sq_norm()
            ),
        });
    }
    Ok(())
}

fn stop_rule(change: f64, previous: f64, tol: f64) -> bool {
    if previous == 0.0 {
        change < tol
    } else {
        change / previous < tol
    }
}

/// Dual FISTA from the starting point `q0`. Returns the last `z`.
pub(crate) fn fista_core<B: Arith>(
    b: &mut B,
    d: &B::V,
    y: &B::V,
    q0: B::V,
    eta: f64,
    cfg: &DenoiseConfig,
) -> Result<(B::V, SolveStats)> {
    let mut z = projected_step(b, d, y, &q0, eta)?;
    check_step(b.val(d), b.val(&z), b.val(&q0), eta, 1)?;
    let mut z_prev = z.clone();
    let mut t = 1.0;
    let mut iterations = 1;
    let mut converged = false;

    while iterations < cfg.max_itr1 {
        let t_next = next_momentum(t);
        let beta = (t - 1.0) / t_next;
        let diff = b.sub(&z, &z_prev)?;
        let push = b.scale(&diff, beta)?;
        let q = b.add(&z, &push)?;
        let z_next = projected_step(b, d, y, &q, eta)?;
        iterations += 1;
        check_step(b.val(d), b.val(&z_next), b.val(&q), eta, iterations)?;
        debug_assert!(linf_norm(b.val(&z_next)) <= 1.0);

        let change = linf_norm(&b.val(&z_next).sub(b.val(&z))?);
        let done = stop_rule(change, linf_norm(b.val(&z)), cfg.tol);
        z_prev = std::mem::replace(&mut z, z_next);
        t = t_next;
        if done {
            converged = true;
            if !cfg.fixed_iterations {
                break;
            }
        } else {
            converged = false;
        }
    }
    Ok((z, SolveStats { iterations, converged }))
}

fn check_shapes(d: &Tensor, y: &Tensor) -> Result<()> {
    if y.cols() != 1 || y.rows() != d.rows() {
        return Err(Error::dim(
            "denoise",
            format!("signal of shape ({}, 1)", d.rows()),
            format!("{:?}", y.shape()),
        ));
    }
    Ok(())
}

fn initial_dual(m: usize, rng: &mut Rng) -> Tensor {
    gaussian(m, 1, 0.0, 1.0, rng)
}

/// Output of a bare dual solve.
#[derive(Debug, Clone)]
pub struct DualSolution {
    pub z_hat: Tensor,
    pub iterations: usize,
    pub converged: bool,
}

/// Solves the dual problem with the automatic step size.
pub fn fista_dual(d: &Tensor, y: &Tensor, cfg: &DenoiseConfig, rng: &mut Rng) -> Result<DualSolution> {
    cfg.validate()?;
    let eta = step_size(d, cfg)?;
    fista_dual_with_step(d, y, eta, cfg, rng)
}

/// Solves the dual problem with a caller-chosen step size.
pub fn fista_dual_with_step(
    d: &Tensor,
    y: &Tensor,
    eta: f64,
    cfg: &DenoiseConfig,
    rng: &mut Rng,
) -> Result<DualSolution> {
    check_shapes(d, y)?;
    let q0 = initial_dual(d.cols(), rng);
    let (z_hat, stats) = fista_core(&mut Plain, d, y, q0, eta, cfg)?;
    Ok(DualSolution {
        z_hat,
        iterations: stats.iterations,
        converged: stats.converged,
    })
}

/// `w = y - D z`.
pub fn primal_from_dual(d: &Tensor, y: &Tensor, z_hat: &Tensor) -> Result<Tensor> {
    check_shapes(d, y)?;
    y.sub(&linalg::matvec(d, z_hat)?)
}

pub fn primal_objective(d: &Tensor, y: &Tensor, w: &Tensor) -> Result<f64> {
    Ok(0.5 * y.sub(w)?.sq_norm() + linalg::matvec_t(d, w)?.l1_norm())
}

pub fn dual_objective(d: &Tensor, y: &Tensor, z: &Tensor) -> Result<f64> {
    Ok(0.5 * linalg::matvec(d, z)?.sub(y)?.sq_norm())
}

/// Full denoise: dual solve, primal recovery and diagnostics.
///
/// `D = 0` is allowed and returns `w = y` without iterating.
pub fn denoise(d: &Tensor, y: &Tensor, cfg: &DenoiseConfig, rng: &mut Rng) -> Result<DenoiseResult> {
    cfg.validate()?;
    check_shapes(d, y)?;
    if d.is_all_zero() {
        return finish(d, y, Tensor::zeros(d.cols(), 1), 0, true);
    }
    let eta = step_size(d, cfg)?;
    denoise_with_step(d, y, eta, cfg, rng)
}

/// [`denoise`] with a precomputed step size, for batches sharing one `D`.
pub fn denoise_with_step(
    d: &Tensor,
    y: &Tensor,
    eta: f64,
    cfg: &DenoiseConfig,
    rng: &mut Rng,
) -> Result<DenoiseResult> {
    let sol = fista_dual_with_step(d, y, eta, cfg, rng)?;
    finish(d, y, sol.z_hat, sol.iterations, sol.converged)
}

fn finish(d: &Tensor, y: &Tensor, z_hat: Tensor, iterations: usize, converged: bool) -> Result<DenoiseResult> {
    let mut plain = Plain;
    let dz = plain.matvec(d, &z_hat)?;
    let w_hat = plain.sub(y, &dz)?;
    Ok(DenoiseResult {
        primal_objective: primal_objective(d, y, &w_hat)?,
        dual_objective: dual_objective(d, y, &z_hat)?,
        half_sq_norm_y: 0.5 * y.sq_norm(),
        w_hat,
        z_hat,
        iterations,
        converged,
    })
}

/// Records the whole solve on `tape` and returns the var holding `w`.
///
/// `D` must be nonzero: the step size is undefined for the zero operator.
/// The step size and the stopping decisions are taken on raw values and are
/// not differentiated.
pub fn denoise_recorded(
    tape: &mut Tape,
    d: Var,
    y: &Tensor,
    cfg: &DenoiseConfig,
    rng: &mut Rng,
) -> Result<(Var, SolveStats)> {
    cfg.validate()?;
    let eta = step_size(tape.value(d), cfg)?;
    denoise_recorded_with_step(tape, d, y, eta, cfg, rng)
}

pub fn denoise_recorded_with_step(
    tape: &mut Tape,
    d: Var,
    y: &Tensor,
    eta: f64,
    cfg: &DenoiseConfig,
    rng: &mut Rng,
) -> Result<(Var, SolveStats)> {
    if !cfg.record {
        return Err(Error::InvalidConfig("denoise_recorded needs record = true".into()));
    }
    check_shapes(tape.value(d), y)?;
    let q0 = initial_dual(tape.value(d).cols(), rng);
    let yv = tape.input(y.clone(), false);
    let q0 = tape.input(q0, false);
    let (z, stats) = fista_core(tape, &d, &yv, q0, eta, cfg)?;
    let dz = tape.matvec(d, z)?;
    let w = tape.sub(yv, dz)?;
    Ok((w, stats))
}

/// Finite-difference check of the unrolled solve on a random instance:
/// `D ~ N(0, 0.3^2)` of shape `p x m`, `w ~ N(0, 3^2)`, `y = w + N(0, 1)`,
/// exactly `iterations` inner updates with the step size held fixed, loss
/// `||w_hat - w||^2`.
pub fn unrolled_grad_check(
    p: usize,
    m: usize,
    iterations: usize,
    seed: u64,
    h: f64,
    exclusion_band: f64,
) -> Result<GradCheckReport> {
    let mut data = Rng::new(seed, Stream::Data);
    let w = gaussian(p, 1, 0.0, 3.0, &mut data);
    let y = w.add(&gaussian(p, 1, 0.0, 1.0, &mut data))?;
    let d = gaussian(p, m, 0.0, 0.3, &mut Rng::new(seed, Stream::Init));
    let cfg = DenoiseConfig {
        max_itr1: iterations,
        fixed_iterations: true,
        ..DenoiseConfig::training()
    };
    let eta = step_size(&d, &cfg)?;
    let item = Rng::new(seed, Stream::Batch);
    grad_check(
        |tape: &mut Tape, dv: Var| {
            let (wh, _) = denoise_recorded_with_step(tape, dv, &y, eta, &cfg, &mut item.clone())?;
            tape.sqdist(wh, &w)
        },
        &d,
        h,
        exclusion_band,
    )
}
