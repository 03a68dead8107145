//! Numerical kernels shared by inference and learning: stable softmax and
//! log-sum-exp, a damped Newton maximizer, SPD helpers and finite-difference
//! derivative oracles.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};

fn check_finite(v: &DVector<f64>, what: &str) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("{what}: {:?}", v.as_slice())))
    }
}

/// `log Σ exp(v_k)` computed with a max shift.
pub fn log_sum_exp(v: &DVector<f64>) -> Result<f64> {
    check_finite(v, "log_sum_exp input")?;
    if v.is_empty() {
        return Err(Error::Dimension("log_sum_exp of an empty vector".into()));
    }
    Ok(log_sum_exp_unchecked(v.as_slice()))
}

pub(crate) fn log_sum_exp_unchecked(v: &[f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Logistic transform onto the simplex, computed with a max shift.
pub fn softmax(v: &DVector<f64>) -> Result<DVector<f64>> {
    check_finite(v, "softmax input")?;
    if v.is_empty() {
        return Err(Error::Dimension("softmax of an empty vector".into()));
    }
    let mut out = v.clone();
    softmax_in_place(out.as_mut_slice());
    Ok(out)
}

pub(crate) fn softmax_in_place(v: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    for x in v.iter_mut() {
        *x /= total;
    }
}

/// Settings for [`maximize_concave`].
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct NewtonConfig {
    pub max_iters: usize,
    /// Convergence threshold on the infinity norm of the gradient.
    pub grad_tol: f64,
    /// Backtracking factor in (0, 1).
    pub step_shrink: f64,
    pub min_step: f64,
    /// Initial ridge used when `-H` fails Cholesky; grows tenfold per retry.
    pub hessian_damping: f64,
}

impl Default for NewtonConfig {
    fn default() -> Self {
        Self {
            max_iters: 100,
            grad_tol: 1e-6,
            step_shrink: 0.5,
            min_step: 1e-12,
            hessian_damping: 1e-8,
        }
    }
}

impl NewtonConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iters < 1 {
            return Err(Error::InvalidConfig("newton max_iters must be >= 1".into()));
        }
        if !(self.grad_tol > 0.0) {
            return Err(Error::InvalidConfig("newton grad_tol must be > 0".into()));
        }
        if !(self.step_shrink > 0.0 && self.step_shrink < 1.0) {
            return Err(Error::InvalidConfig("newton step_shrink must lie in (0, 1)".into()));
        }
        if !(self.min_step > 0.0) || !(self.hessian_damping > 0.0) {
            return Err(Error::InvalidConfig(
                "newton min_step and hessian_damping must be > 0".into(),
            ));
        }
        Ok(())
    }
}

/// A twice-differentiable objective to be maximized.
pub trait ConcaveObjective {
    fn value(&self, x: &DVector<f64>) -> f64;
    fn gradient(&self, x: &DVector<f64>) -> DVector<f64>;
    fn hessian(&self, x: &DVector<f64>) -> DMatrix<f64>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    Converged,
    MaxIters,
    /// Backtracking shrank below `min_step`; the last accepted iterate is kept.
    LineSearchStalled,
}

#[derive(Debug, Clone)]
pub struct NewtonResult {
    pub x: DVector<f64>,
    pub value: f64,
    pub gradient_norm: f64,
    /// Exact Hessian at `x`.
    pub hessian: DMatrix<f64>,
    pub iterations: usize,
    pub termination: Termination,
    /// Largest ridge that had to be added to `-H` along the way.
    pub max_damping: f64,
}

impl NewtonResult {
    pub fn converged(&self) -> bool {
        self.termination == Termination::Converged
    }
}

fn inf_norm(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0, |acc, x| acc.max(x.abs()))
}

/// Cholesky of `-hessian + ridge·I`, growing the ridge from `start` until it
/// succeeds. Returns the factor and the ridge actually used.
fn damped_negative_cholesky(hessian: &DMatrix<f64>, start: f64) -> Option<(Cholesky<f64, Dyn>, f64)> {
    let neg = -hessian;
    if let Some(chol) = Cholesky::new(neg.clone()) {
        return Some((chol, 0.0));
    }
    let scale = neg.diagonal().iter().fold(1.0f64, |a, d| a.max(d.abs()));
    let mut ridge = start;
    while ridge < 1e12 * scale {
        let mut shifted = neg.clone();
        for i in 0..shifted.nrows() {
            shifted[(i, i)] += ridge;
        }
        if let Some(chol) = Cholesky::new(shifted) {
            return Some((chol, ridge));
        }
        ridge *= 10.0;
    }
    None
}

/// Damped Newton ascent that reports stalls instead of failing; callers that
/// tolerate a stalled line search use this directly.
pub fn newton_ascent(objective: &impl ConcaveObjective, x0: &DVector<f64>, cfg: &NewtonConfig) -> Result<NewtonResult> {
    cfg.validate()?;
    let mut x = x0.clone();
    check_finite(&x, "newton start")?;
    let mut fx = objective.value(&x);
    if !fx.is_finite() {
        return Err(Error::NonFinite(format!("objective at {:?}", x.as_slice())));
    }
    let mut grad = objective.gradient(&x);
    check_finite(&grad, "gradient")?;
    let mut gnorm = inf_norm(&grad);
    let mut termination = Termination::MaxIters;
    let mut max_damping = 0.0f64;
    let mut iterations = 0;

    while iterations < cfg.max_iters {
        if gnorm <= cfg.grad_tol {
            termination = Termination::Converged;
            break;
        }
        let hessian = objective.hessian(&x);
        if hessian.iter().any(|h| !h.is_finite()) {
            return Err(Error::NonFinite(format!("hessian at {:?}", x.as_slice())));
        }
        let (chol, ridge) = damped_negative_cholesky(&hessian, cfg.hessian_damping)
            .ok_or_else(|| Error::NotPositiveDefinite(format!("damped -hessian at iteration {iterations}")))?;
        max_damping = max_damping.max(ridge);
        let direction = chol.solve(&grad);

        let mut step = 1.0;
        let accepted = loop {
            let candidate = &x + &direction * step;
            let fc = objective.value(&candidate);
            if fc.is_finite() {
                if fc > fx {
                    break Some((candidate, fc, None));
                }
                // Near the optimum f can tie at rounding level; accept when the
                // gradient still shrinks.
                let slack = 4.0 * f64::EPSILON * fx.abs().max(1.0);
                if fc >= fx - slack {
                    let gc = objective.gradient(&candidate);
                    if gc.iter().all(|g| g.is_finite()) && inf_norm(&gc) < gnorm {
                        break Some((candidate, fc, Some(gc)));
                    }
                }
            }
            step *= cfg.step_shrink;
            if step < cfg.min_step {
                break None;
            }
        };
        iterations += 1;
        match accepted {
            Some((candidate, fc, gc)) => {
                x = candidate;
                fx = fc;
                grad = gc.unwrap_or_else(|| objective.gradient(&x));
                check_finite(&grad, "gradient")?;
                gnorm = inf_norm(&grad);
            }
            None => {
                termination = Termination::LineSearchStalled;
                break;
            }
        }
    }
    if termination == Termination::MaxIters && gnorm <= cfg.grad_tol {
        termination = Termination::Converged;
    }
    let hessian = objective.hessian(&x);
    Ok(NewtonResult {
        x,
        value: fx,
        gradient_norm: gnorm,
        hessian,
        iterations,
        termination,
        max_damping,
    })
}

/// Maximizes a smooth objective by damped Newton with backtracking.
///
/// Returns the best iterate when `max_iters` is exhausted (with
/// `termination == MaxIters`); a line search that cannot make progress is an
/// error.
pub fn maximize_concave(
    objective: &impl ConcaveObjective,
    x0: &DVector<f64>,
    cfg: &NewtonConfig,
) -> Result<NewtonResult> {
    let result = newton_ascent(objective, x0, cfg)?;
    if result.termination == Termination::LineSearchStalled {
        return Err(Error::LineSearch {
            iteration: result.iterations,
            min_step: cfg.min_step,
        });
    }
    Ok(result)
}

/// Central-difference gradient of `f` at `x`.
pub fn finite_difference_gradient(f: impl Fn(&DVector<f64>) -> f64, x: &DVector<f64>, h: f64) -> Result<DVector<f64>> {
    if !(h > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "finite-difference step must be > 0, got {h}"
        )));
    }
    let mut out = DVector::zeros(x.len());
    let mut probe = x.clone();
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let up = f(&probe);
        probe[i] = x[i] - h;
        let down = f(&probe);
        probe[i] = x[i];
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::NonFinite(format!("finite difference along coordinate {i}")));
        }
        out[i] = (up - down) / (2.0 * h);
    }
    Ok(out)
}

/// Central-difference Jacobian of a vector field; column `j` is `∂g/∂x_j`.
pub fn finite_difference_jacobian(
    g: impl Fn(&DVector<f64>) -> DVector<f64>,
    x: &DVector<f64>,
    h: f64,
) -> Result<DMatrix<f64>> {
    if !(h > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "finite-difference step must be > 0, got {h}"
        )));
    }
    let n = x.len();
    let mut out = DMatrix::zeros(n, n);
    let mut probe = x.clone();
    for j in 0..n {
        probe[j] = x[j] + h;
        let up = g(&probe);
        probe[j] = x[j] - h;
        let down = g(&probe);
        probe[j] = x[j];
        let col = (up - down) / (2.0 * h);
        check_finite(&col, "finite-difference jacobian")?;
        out.set_column(j, &col);
    }
    Ok(out)
}

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

pub fn is_positive_definite(m: &DMatrix<f64>) -> bool {
    m.is_square() && m.iter().all(|x| x.is_finite()) && Cholesky::new(m.clone()).is_some()
}

/// Inverse of a symmetric positive-definite matrix, adding a growing ridge
/// (starting at `ridge_start`) if Cholesky fails. Returns the symmetrized
/// inverse and the ridge used (0 when none was needed).
pub fn spd_inverse(m: &DMatrix<f64>, ridge_start: f64) -> Result<(DMatrix<f64>, f64)> {
    let (chol, ridge) = damped_negative_cholesky(&-m, ridge_start)
        .ok_or_else(|| Error::NotPositiveDefinite("matrix could not be repaired by a ridge".into()))?;
    Ok((symmetrize(&chol.inverse()), ridge))
}

/// `log det` of an SPD matrix via Cholesky.
pub fn log_det_spd(m: &DMatrix<f64>) -> Result<f64> {
    let chol = Cholesky::new(m.clone())
        .ok_or_else(|| Error::NotPositiveDefinite("log-determinant requires an SPD matrix".into()))?;
    Ok(2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>())
}
