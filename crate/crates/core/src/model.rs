use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::numerics::{is_positive_definite, log_det_spd, spd_inverse, symmetrize};

/// Row-sum tolerance for the topic matrices.
pub const ROW_SUM_TOL: f64 = 1e-9;

/// Global parameters: logistic-normal prior over log phenotype proportions
/// and one `K × V_m` topic matrix per data type, stored as log-probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    mu0: DVector<f64>,
    sigma0: DMatrix<f64>,
    sigma0_inv: DMatrix<f64>,
    sigma0_log_det: f64,
    log_beta: Vec<DMatrix<f64>>,
}

impl ModelParams {
    pub fn new(mu0: DVector<f64>, sigma0: DMatrix<f64>, log_beta: Vec<DMatrix<f64>>) -> Result<Self> {
        let k = mu0.len();
        if k == 0 {
            return Err(Error::Dimension("at least one phenotype is required".into()));
        }
        if sigma0.shape() != (k, k) {
            return Err(Error::Dimension(format!(
                "sigma0 is {:?}, expected {k}x{k}",
                sigma0.shape()
            )));
        }
        if log_beta.is_empty() {
            return Err(Error::Dimension("at least one data type is required".into()));
        }
        if mu0.iter().chain(sigma0.iter()).any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("prior mean or covariance".into()));
        }
        if (&sigma0 - sigma0.transpose()).amax() > 1e-12 * sigma0.amax().max(1.0) {
            return Err(Error::Invalid("sigma0 is not symmetric".into()));
        }
        if !is_positive_definite(&sigma0) {
            return Err(Error::NotPositiveDefinite("sigma0".into()));
        }
        for (m, lb) in log_beta.iter().enumerate() {
            if lb.nrows() != k || lb.ncols() == 0 {
                return Err(Error::Dimension(format!(
                    "log_beta[{m}] is {:?}, expected {k} rows and at least one column",
                    lb.shape()
                )));
            }
            if lb.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite(format!("log_beta[{m}]")));
            }
            for row in 0..k {
                let total: f64 = lb.row(row).iter().map(|x| x.exp()).sum();
                if (total - 1.0).abs() > ROW_SUM_TOL {
                    return Err(Error::Invalid(format!("beta[{m}] row {row} sums to {total}, not 1")));
                }
            }
        }
        let (sigma0_inv, _) = spd_inverse(&sigma0, 1e-12)?;
        let sigma0_log_det = log_det_spd(&sigma0)?;
        Ok(Self {
            mu0,
            sigma0,
            sigma0_inv,
            sigma0_log_det,
            log_beta,
        })
    }

    /// Builds parameters from topic probabilities; every row is renormalized.
    /// Entries must be strictly positive.
    pub fn from_beta(mu0: DVector<f64>, sigma0: DMatrix<f64>, beta: &[DMatrix<f64>]) -> Result<Self> {
        let log_beta = beta
            .iter()
            .enumerate()
            .map(|(m, b)| {
                if b.iter().any(|&x| !(x > 0.0) || !x.is_finite()) {
                    return Err(Error::Invalid(format!("beta[{m}] has a non-positive entry")));
                }
                Ok(log_normalize_rows(b))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(mu0, symmetrize(&sigma0), log_beta)
    }

    pub fn k(&self) -> usize {
        self.mu0.len()
    }

    pub fn num_types(&self) -> usize {
        self.log_beta.len()
    }

    pub fn vocab_sizes(&self) -> Vec<usize> {
        self.log_beta.iter().map(|b| b.ncols()).collect()
    }

    pub fn mu0(&self) -> &DVector<f64> {
        &self.mu0
    }

    pub fn sigma0(&self) -> &DMatrix<f64> {
        &self.sigma0
    }

    pub fn sigma0_inv(&self) -> &DMatrix<f64> {
        &self.sigma0_inv
    }

    pub fn sigma0_log_det(&self) -> f64 {
        self.sigma0_log_det
    }

    pub fn log_beta(&self) -> &[DMatrix<f64>] {
        &self.log_beta
    }

    /// Topic-token probabilities for type `m` (`K × V_m`).
    pub fn beta(&self, m: usize) -> DMatrix<f64> {
        self.log_beta[m].map(f64::exp)
    }

    /// Copy with phenotypes reordered: new phenotype `i` is old phenotype `order[i]`.
    pub fn permuted(&self, order: &[usize]) -> Result<Self> {
        let k = self.k();
        let mut seen = vec![false; k];
        if order.len() != k || order.iter().any(|&o| o >= k || std::mem::replace(&mut seen[o], true)) {
            return Err(Error::Dimension(format!("{order:?} is not a permutation of 0..{k}")));
        }
        let mu0 = DVector::from_fn(k, |i, _| self.mu0[order[i]]);
        let sigma0 = DMatrix::from_fn(k, k, |i, j| self.sigma0[(order[i], order[j])]);
        let log_beta = self
            .log_beta
            .iter()
            .map(|lb| DMatrix::from_fn(k, lb.ncols(), |i, v| lb[(order[i], v)]))
            .collect();
        Self::new(mu0, sigma0, log_beta)
    }
}

/// Normalizes each row of a positive matrix and returns its logarithm.
pub(crate) fn log_normalize_rows(b: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = b.clone();
    for mut row in out.row_iter_mut() {
        let total: f64 = row.iter().sum();
        row.apply(|x| *x = (*x / total).ln());
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn uniform(k: usize, v: usize) -> DMatrix<f64> {
        DMatrix::from_element(k, v, 1.0)
    }

    #[test]
    fn from_beta_normalizes_rows() {
        let b = DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 1.0, 3.0, 3.0, 3.0]);
        let p = ModelParams::from_beta(DVector::zeros(2), DMatrix::identity(2, 2), &[b]).unwrap();
        let beta = p.beta(0);
        assert!((beta[(0, 1)] - 0.5).abs() < 1e-15);
        assert!((beta[(1, 2)] - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(p.sigma0_inv(), &DMatrix::<f64>::identity(2, 2));
    }

    #[test]
    fn rejects_bad_inputs() {
        let id = DMatrix::<f64>::identity(2, 2);
        let not_pd = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(ModelParams::from_beta(DVector::zeros(2), not_pd, &[uniform(2, 3)]).is_err());
        assert!(ModelParams::from_beta(DVector::zeros(3), id.clone(), &[uniform(2, 3)]).is_err());
        let zero = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 1.0]);
        assert!(ModelParams::from_beta(DVector::zeros(2), id.clone(), &[zero]).is_err());
        let unnormalized = DMatrix::from_element(2, 2, 0.0);
        assert!(ModelParams::new(DVector::zeros(2), id, vec![unnormalized]).is_err());
    }

    #[test]
    fn permutation_reorders_everything() {
        let b = DMatrix::from_row_slice(3, 2, &[1.0, 3.0, 2.0, 2.0, 3.0, 1.0]);
        let sigma = DMatrix::from_row_slice(3, 3, &[1.0, 0.2, 0.0, 0.2, 2.0, 0.3, 0.0, 0.3, 3.0]);
        let mu = DVector::from_column_slice(&[0.0, 1.0, 2.0]);
        let p = ModelParams::from_beta(mu, sigma, &[b]).unwrap();
        let q = p.permuted(&[2, 0, 1]).unwrap();
        assert_eq!(q.mu0()[0], 2.0);
        assert_eq!(q.sigma0()[(0, 0)], 3.0);
        assert_eq!(q.sigma0()[(0, 2)], 0.3);
        assert_eq!(q.log_beta()[0].row(1), p.log_beta()[0].row(0));
        assert!(p.permuted(&[0, 0, 1]).is_err());
    }
}
