//! Per-record Laplace variational inference.
//!
//! The variational family factorizes as `q(ν) Π_m q(z_m)`. Coordinate ascent
//! alternates two updates until the mode `ν̂` stops moving:
//!
//! * `q(z_m)`: for each distinct token `v` of type `m`,
//!   `q(z = k | v) ∝ exp(η(ν̂)_k + log β_{m,k,v})`, with `η(ν) = ν - lse(ν)`.
//!   The expectation of `η` under `q(ν)` is taken at the mode.
//! * `q(ν)`: a Gaussian `N(ν̂, (-∇²f(ν̂))⁻¹)` around the maximizer of
//!   `f(ν) = η(ν)ᵀ S - ½ (ν - μ₀)ᵀ Σ₀⁻¹ (ν - μ₀)`, where `S = Σ_m E[t(z_m)]`
//!   are the expected phenotype counts.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::corpus::RecordBags;
use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::numerics::{
    log_det_spd, log_sum_exp_unchecked, newton_ascent, softmax_in_place, spd_inverse, ConcaveObjective, NewtonConfig,
    Termination,
};

/// `q(z)` for each distinct token of one data type, in token order.
pub type TypeResponsibilities = Vec<(usize, DVector<f64>)>;

#[derive(Debug, Clone, PartialEq)]
pub struct DocPosterior {
    /// Laplace mode of the log phenotype proportions.
    pub nu_hat: DVector<f64>,
    /// Inverse of `-∇²f(ν̂)`.
    pub nu_cov: DMatrix<f64>,
    pub responsibilities: Vec<TypeResponsibilities>,
    /// `E[t(z_m)]` per type.
    pub expected_counts: Vec<DVector<f64>>,
    /// `softmax(nu_hat)`.
    pub proportions: DVector<f64>,
    pub converged: bool,
    pub iterations: usize,
    /// Set when an inner Newton solve stalled, hit its iteration cap, or the
    /// covariance needed a ridge to invert.
    pub optimizer_warning: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InferConfig {
    /// Stop when `‖Δν̂‖∞` falls to this value.
    pub tol: f64,
    pub max_outer: usize,
    pub newton: NewtonConfig,
}

impl Default for InferConfig {
    fn default() -> Self {
        Self {
            tol: 1e-4,
            max_outer: 100,
            newton: NewtonConfig::default(),
        }
    }
}

impl InferConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tol > 0.0) {
            return Err(Error::InvalidConfig("inference tol must be > 0".into()));
        }
        if self.max_outer < 1 {
            return Err(Error::InvalidConfig("inference max_outer must be >= 1".into()));
        }
        self.newton.validate()
    }
}

fn check_dims(nu: &DVector<f64>, expected_counts: &[DVector<f64>], params: &ModelParams) -> Result<()> {
    let k = params.k();
    if nu.len() != k {
        return Err(Error::Dimension(format!("nu has length {}, expected {k}", nu.len())));
    }
    if let Some(bad) = expected_counts.iter().find(|s| s.len() != k) {
        return Err(Error::Dimension(format!(
            "expected counts of length {}, expected {k}",
            bad.len()
        )));
    }
    if nu
        .iter()
        .chain(expected_counts.iter().flat_map(|s| s.iter()))
        .any(|x| !x.is_finite())
    {
        return Err(Error::NonFinite("nu or expected counts".into()));
    }
    Ok(())
}

fn summed_counts(expected_counts: &[DVector<f64>], k: usize) -> DVector<f64> {
    expected_counts.iter().fold(DVector::zeros(k), |acc, s| acc + s)
}

/// The Laplace objective `f(ν)` for fixed expected counts.
struct LaplaceObjective<'a> {
    counts: DVector<f64>,
    total: f64,
    params: &'a ModelParams,
}

impl<'a> LaplaceObjective<'a> {
    fn new(expected_counts: &[DVector<f64>], params: &'a ModelParams) -> Self {
        let counts = summed_counts(expected_counts, params.k());
        let total = counts.sum();
        Self { counts, total, params }
    }

    fn proportions(nu: &DVector<f64>) -> DVector<f64> {
        let mut pi = nu.clone();
        softmax_in_place(pi.as_mut_slice());
        pi
    }
}

impl ConcaveObjective for LaplaceObjective<'_> {
    fn value(&self, nu: &DVector<f64>) -> f64 {
        let lse = log_sum_exp_unchecked(nu.as_slice());
        let data = self.counts.dot(nu) - lse * self.total;
        let d = nu - self.params.mu0();
        data - 0.5 * d.dot(&(self.params.sigma0_inv() * &d))
    }

    fn gradient(&self, nu: &DVector<f64>) -> DVector<f64> {
        let pi = Self::proportions(nu);
        &self.counts - pi * self.total - self.params.sigma0_inv() * (nu - self.params.mu0())
    }

    fn hessian(&self, nu: &DVector<f64>) -> DMatrix<f64> {
        let pi = Self::proportions(nu);
        let mut h = &pi * pi.transpose();
        for i in 0..pi.len() {
            h[(i, i)] -= pi[i];
        }
        h * self.total - self.params.sigma0_inv()
    }
}

/// `f(ν) = η(ν)ᵀ S - ½ (ν - μ₀)ᵀ Σ₀⁻¹ (ν - μ₀)` with `S = Σ_m expected_counts[m]`.
pub fn f_nu(nu: &DVector<f64>, expected_counts: &[DVector<f64>], params: &ModelParams) -> Result<f64> {
    check_dims(nu, expected_counts, params)?;
    Ok(LaplaceObjective::new(expected_counts, params).value(nu))
}

/// `∇f(ν) = S - (Σ_k S_k) π - Σ₀⁻¹ (ν - μ₀)`, `π = softmax(ν)`.
pub fn grad_f(nu: &DVector<f64>, expected_counts: &[DVector<f64>], params: &ModelParams) -> Result<DVector<f64>> {
    check_dims(nu, expected_counts, params)?;
    Ok(LaplaceObjective::new(expected_counts, params).gradient(nu))
}

/// `∇²f(ν) = (Σ_k S_k)(π πᵀ - diag π) - Σ₀⁻¹`.
pub fn hess_f(nu: &DVector<f64>, expected_counts: &[DVector<f64>], params: &ModelParams) -> Result<DMatrix<f64>> {
    check_dims(nu, expected_counts, params)?;
    Ok(LaplaceObjective::new(expected_counts, params).hessian(nu))
}

#[derive(Debug, Clone)]
pub struct LaplaceUpdate {
    pub nu_hat: DVector<f64>,
    pub nu_cov: DMatrix<f64>,
    pub converged: bool,
    /// A ridge was needed to invert `-∇²f(ν̂)`.
    pub damped: bool,
}

/// Laplace update of `q(ν)`: Newton ascent on `f` from `nu_init`, covariance
/// from the inverse negative Hessian at the mode.
///
/// With no observed tokens the prior is returned verbatim.
pub fn update_q_nu(
    expected_counts: &[DVector<f64>],
    params: &ModelParams,
    nu_init: &DVector<f64>,
    newton: &NewtonConfig,
) -> Result<LaplaceUpdate> {
    check_dims(nu_init, expected_counts, params)?;
    if expected_counts.iter().flat_map(|s| s.iter()).any(|&c| c < 0.0) {
        return Err(Error::Invalid("expected counts must be non-negative".into()));
    }
    let objective = LaplaceObjective::new(expected_counts, params);
    if objective.total == 0.0 {
        return Ok(LaplaceUpdate {
            nu_hat: params.mu0().clone(),
            nu_cov: params.sigma0().clone(),
            converged: true,
            damped: false,
        });
    }
    let result = newton_ascent(&objective, nu_init, newton)?;
    let (nu_cov, ridge) = spd_inverse(&-&result.hessian, newton.hessian_damping)?;
    Ok(LaplaceUpdate {
        nu_hat: result.x,
        nu_cov,
        converged: result.termination == Termination::Converged,
        damped: ridge > 0.0,
    })
}

/// `η(ν) = ν - lse(ν)·1`.
pub fn natural_parameter(nu: &DVector<f64>) -> DVector<f64> {
    let lse = log_sum_exp_unchecked(nu.as_slice());
    nu.map(|x| x - lse)
}

/// Update of every `q(z_m)` given the current mode. Returns per-token
/// responsibilities and expected counts `E[t(z_m)]`.
pub fn update_q_z(
    record: &RecordBags,
    nu_hat: &DVector<f64>,
    params: &ModelParams,
) -> Result<(Vec<TypeResponsibilities>, Vec<DVector<f64>>)> {
    let k = params.k();
    if nu_hat.len() != k {
        return Err(Error::Dimension(format!(
            "nu has length {}, expected {k}",
            nu_hat.len()
        )));
    }
    record.validate(&params.vocab_sizes())?;
    let eta = natural_parameter(nu_hat);
    let mut responsibilities = Vec::with_capacity(record.num_types());
    let mut expected = Vec::with_capacity(record.num_types());
    for (bag, log_beta) in record.bags.iter().zip(params.log_beta()) {
        let mut per_token = Vec::with_capacity(bag.len());
        let mut counts = DVector::zeros(k);
        for (&v, &c) in bag {
            let mut q = &eta + log_beta.column(v);
            softmax_in_place(q.as_mut_slice());
            counts.axpy(c as f64, &q, 1.0);
            per_token.push((v, q));
        }
        responsibilities.push(per_token);
        expected.push(counts);
    }
    Ok((responsibilities, expected))
}

/// Coordinate ascent for one record starting from the prior mean.
pub fn infer_document(record: &RecordBags, params: &ModelParams, cfg: &InferConfig) -> Result<DocPosterior> {
    infer_document_from(record, params, cfg, params.mu0())
}

/// Coordinate ascent for one record from an explicit starting mode.
pub fn infer_document_from(
    record: &RecordBags,
    params: &ModelParams,
    cfg: &InferConfig,
    nu_init: &DVector<f64>,
) -> Result<DocPosterior> {
    cfg.validate()?;
    let mut nu = nu_init.clone();
    let mut converged = false;
    let mut warning = false;
    let mut iterations = 0;
    let mut last = None;
    while iterations < cfg.max_outer {
        iterations += 1;
        let (responsibilities, expected_counts) = update_q_z(record, &nu, params)?;
        let update = update_q_nu(&expected_counts, params, &nu, &cfg.newton)?;
        warning |= !update.converged || update.damped;
        let shift = (&update.nu_hat - &nu).amax();
        nu = update.nu_hat.clone();
        last = Some((responsibilities, expected_counts, update));
        if shift <= cfg.tol {
            converged = true;
            break;
        }
    }
    let (responsibilities, expected_counts, update) = last.expect("max_outer >= 1");
    let mut proportions = update.nu_hat.clone();
    softmax_in_place(proportions.as_mut_slice());
    Ok(DocPosterior {
        nu_hat: update.nu_hat,
        nu_cov: update.nu_cov,
        responsibilities,
        expected_counts,
        proportions,
        converged,
        iterations,
        optimizer_warning: warning,
    })
}

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Evidence lower bound of one record under its Laplace posterior.
///
/// The Gaussian terms (prior cross-entropy and entropy of `q(ν)`) are exact.
/// `E_q[lse(ν)]` is replaced by its upper bound `lse(ν̂ + ½ diag Σ̂)`, so the
/// result stays a lower bound on `log p(x)`.
pub fn elbo(record: &RecordBags, posterior: &DocPosterior, params: &ModelParams) -> Result<f64> {
    let k = params.k();
    if posterior.nu_hat.len() != k || posterior.nu_cov.shape() != (k, k) {
        return Err(Error::Dimension("posterior does not match model dimension".into()));
    }
    if posterior.responsibilities.len() != params.num_types() || record.num_types() != params.num_types() {
        return Err(Error::Dimension(
            "posterior/record type count does not match model".into(),
        ));
    }
    let counts = summed_counts(&posterior.expected_counts, k);
    let shifted: Vec<f64> = (0..k)
        .map(|i| posterior.nu_hat[i] + 0.5 * posterior.nu_cov[(i, i)])
        .collect();
    let log_p_z = counts.dot(&posterior.nu_hat) - counts.sum() * log_sum_exp_unchecked(&shifted);

    let mut log_p_x = 0.0;
    let mut entropy_z = 0.0;
    for ((bag, resp), log_beta) in record
        .bags
        .iter()
        .zip(&posterior.responsibilities)
        .zip(params.log_beta())
    {
        if bag.len() != resp.len() {
            return Err(Error::Dimension("responsibilities do not match record".into()));
        }
        for ((&v, &c), (rv, q)) in bag.iter().zip(resp) {
            if v != *rv {
                return Err(Error::Dimension("responsibilities do not match record".into()));
            }
            let c = c as f64;
            for (kk, &qk) in q.iter().enumerate() {
                if qk > 0.0 {
                    log_p_x += c * qk * log_beta[(kk, v)];
                    entropy_z -= c * qk * qk.ln();
                }
            }
        }
    }

    let d = &posterior.nu_hat - params.mu0();
    let trace = (params.sigma0_inv() * &posterior.nu_cov).trace();
    let quad = d.dot(&(params.sigma0_inv() * &d));
    let log_p_nu = -0.5 * (k as f64 * LN_2PI + params.sigma0_log_det() + trace + quad);
    let entropy_nu = 0.5 * (k as f64 * (1.0 + LN_2PI) + log_det_spd(&posterior.nu_cov)?);

    Ok(log_p_nu + log_p_z + log_p_x + entropy_nu + entropy_z)
}
