//! Variational EM over a corpus.
//!
//! Each iteration runs per-record inference against fixed parameters (the
//! E-step, parallel across records), records the corpus objective, then
//! re-estimates the topic matrices and the logistic-normal prior (the M-step).
//! All reductions run in record order, so results do not depend on the number
//! of worker threads.

use std::fs;
use std::path::Path;

use indexmap::IndexMap;
use log::{debug, info, warn};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{fingerprint, Corpus, RecordBags, Vocabulary};
use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::numerics::{is_positive_definite, softmax_in_place, symmetrize};
use crate::variational::{elbo, infer_document_from, DocPosterior, InferConfig};

pub const MODEL_FORMAT: &str = "mctm-model";
pub const MODEL_VERSION: u32 = 1;

/// Ridge added to a degenerate prior covariance after the M-step.
pub const SIGMA_RIDGE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub k: usize,
    pub seed: u64,
    pub max_em_iters: usize,
    /// Relative change of the corpus objective that ends training.
    pub em_tol: f64,
    /// Pseudo-count added to every topic-token entry in the M-step.
    pub beta_smoothing: f64,
    /// Initial topics are `1/V + U[0, noise_scale/V)`, renormalized.
    pub noise_scale: f64,
    pub doc_tol: f64,
    pub doc_max_outer: usize,
    /// Re-estimate `μ₀` and `Σ₀`; when false they stay at their initial values.
    pub update_prior: bool,
    /// Independent initializations; the run with the highest final objective is kept.
    #[serde(default = "one")]
    pub restarts: usize,
}

fn one() -> usize {
    1
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            k: 10,
            seed: 0,
            max_em_iters: 200,
            em_tol: 1e-5,
            beta_smoothing: 1e-8,
            noise_scale: 1.0,
            doc_tol: 1e-4,
            doc_max_outer: 100,
            update_prior: true,
            restarts: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k < 2 {
            return Err(Error::InvalidConfig(format!("K must be at least 2, got {}", self.k)));
        }
        if !(self.beta_smoothing > 0.0) {
            return Err(Error::InvalidConfig("beta_smoothing must be > 0".into()));
        }
        if !(self.noise_scale >= 0.0) || !self.noise_scale.is_finite() {
            return Err(Error::InvalidConfig("noise_scale must be a finite value >= 0".into()));
        }
        if self.restarts == 0 {
            return Err(Error::InvalidConfig("restarts must be >= 1".into()));
        }
        if !(self.em_tol >= 0.0) {
            return Err(Error::InvalidConfig("em_tol must be >= 0".into()));
        }
        self.infer_config().validate()
    }

    pub fn infer_config(&self) -> InferConfig {
        InferConfig {
            tol: self.doc_tol,
            max_outer: self.doc_max_outer,
            ..InferConfig::default()
        }
    }
}

/// Persisted per-record result: the Laplace mode and convergence metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct RecordFit {
    pub record_id: String,
    pub time_bin: Option<String>,
    pub nu_hat: DVector<f64>,
    pub converged: bool,
    pub iterations: usize,
}

impl RecordFit {
    pub fn from_posterior(record: &RecordBags, posterior: &DocPosterior) -> Self {
        Self {
            record_id: record.record_id.clone(),
            time_bin: record.time_bin.clone(),
            nu_hat: posterior.nu_hat.clone(),
            converged: posterior.converged,
            iterations: posterior.iterations,
        }
    }

    pub fn proportions(&self) -> DVector<f64> {
        let mut pi = self.nu_hat.clone();
        softmax_in_place(pi.as_mut_slice());
        pi
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub params: ModelParams,
    pub vocabularies: Vec<Vocabulary>,
    pub vocab_fingerprint: String,
    pub config: TrainConfig,
    /// Corpus objective after each E-step.
    pub history: Vec<f64>,
    pub converged: bool,
    /// Final per-record fits, in corpus order.
    pub posteriors: Vec<RecordFit>,
}

impl TrainedModel {
    pub fn k(&self) -> usize {
        self.params.k()
    }

    /// Fails unless `vocabularies` are exactly the ones the model was trained on.
    pub fn check_vocabularies(&self, vocabularies: &[Vocabulary]) -> Result<()> {
        let found = fingerprint(vocabularies);
        if found != self.vocab_fingerprint {
            return Err(Error::FingerprintMismatch {
                expected: self.vocab_fingerprint.clone(),
                found,
            });
        }
        Ok(())
    }

    pub fn infer(&self, record: &RecordBags) -> Result<DocPosterior> {
        crate::variational::infer_document(record, &self.params, &self.config.infer_config())
    }
}

/// Uniform topics with positive noise, `μ₀ = 0`, `Σ₀ = I`.
pub fn initialize(corpus: &Corpus, cfg: &TrainConfig) -> Result<ModelParams> {
    initialize_restart(corpus, cfg, 0)
}

/// Initialization for restart `r`: the seed's ChaCha stream `r`.
pub fn initialize_restart(corpus: &Corpus, cfg: &TrainConfig, r: usize) -> Result<ModelParams> {
    cfg.validate()?;
    let k = cfg.k;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(r as u64);
    let log_beta = corpus
        .vocab_sizes()
        .into_iter()
        .map(|v| {
            if v == 0 {
                return Err(Error::InvalidVocabulary("empty vocabulary".into()));
            }
            let base = 1.0 / v as f64;
            if cfg.noise_scale == 0.0 {
                return Ok(DMatrix::from_element(k, v, base.ln()));
            }
            let mut b = DMatrix::zeros(k, v);
            for row in 0..k {
                for col in 0..v {
                    b[(row, col)] = base + rng.random::<f64>() * cfg.noise_scale * base;
                }
            }
            Ok(crate::model::log_normalize_rows(&b))
        })
        .collect::<Result<Vec<_>>>()?;
    ModelParams::new(DVector::zeros(k), DMatrix::identity(k, k), log_beta)
}

#[derive(Debug, Clone)]
pub struct MStep {
    pub params: ModelParams,
    /// `Σ₀` needed a ridge to become positive definite.
    pub repaired: bool,
}

/// Closed-form parameter re-estimation from per-record posteriors.
///
/// `β_{m,k,v} ∝ ε + Σ_d c_{d,m,v} q_d(z=k|v)`; `μ₀` is the mean mode and
/// `Σ₀` the mean of `nu_cov_d + (ν̂_d - μ₀)(ν̂_d - μ₀)ᵀ`. When
/// `cfg.update_prior` is false the prior is copied from `current`.
pub fn m_step(corpus: &Corpus, posteriors: &[DocPosterior], cfg: &TrainConfig, current: &ModelParams) -> Result<MStep> {
    if posteriors.len() != corpus.num_records() {
        return Err(Error::Dimension(format!(
            "{} posteriors for {} records",
            posteriors.len(),
            corpus.num_records()
        )));
    }
    let k = current.k();
    let mut acc: Vec<DMatrix<f64>> = corpus
        .vocab_sizes()
        .into_iter()
        .map(|v| DMatrix::from_element(k, v, cfg.beta_smoothing))
        .collect();
    for (record, post) in corpus.records().iter().zip(posteriors) {
        for ((bag, resp), counts) in record.bags.iter().zip(&post.responsibilities).zip(acc.iter_mut()) {
            for ((&v, &c), (rv, q)) in bag.iter().zip(resp) {
                debug_assert_eq!(v, *rv);
                let mut column = counts.column_mut(v);
                column.axpy(c as f64, q, 1.0);
            }
        }
    }
    let log_beta = acc.iter().map(crate::model::log_normalize_rows).collect();

    let (mu0, sigma0, repaired) = if cfg.update_prior {
        let d = posteriors.len() as f64;
        let mu0 = posteriors.iter().fold(DVector::zeros(k), |a, p| a + &p.nu_hat) / d;
        let mut sigma = DMatrix::zeros(k, k);
        for p in posteriors {
            let diff = &p.nu_hat - &mu0;
            sigma += &p.nu_cov;
            sigma.ger(1.0, &diff, &diff, 1.0);
        }
        let mut sigma = symmetrize(&(sigma / d));
        let mut repaired = false;
        let mut ridge = SIGMA_RIDGE;
        while !is_positive_definite(&sigma) {
            if ridge > 1e6 || sigma.iter().any(|x| !x.is_finite()) {
                return Err(Error::NotPositiveDefinite("M-step prior covariance".into()));
            }
            for i in 0..k {
                sigma[(i, i)] += ridge;
            }
            ridge *= 10.0;
            repaired = true;
        }
        (mu0, sigma, repaired)
    } else {
        (current.mu0().clone(), current.sigma0().clone(), false)
    };
    let params = ModelParams::new(mu0, sigma0, log_beta)?;
    Ok(MStep { params, repaired })
}

/// Snapshot handed to a training observer after each EM iteration.
pub struct EmIteration<'a> {
    pub restart: usize,
    pub iteration: usize,
    pub objective: f64,
    /// Parameters used by this iteration's E-step.
    pub params: &'a ModelParams,
    pub posteriors: &'a [DocPosterior],
    /// Result of this iteration's M-step; `None` when training stopped first.
    pub updated: Option<&'a ModelParams>,
}

fn e_step(
    corpus: &Corpus,
    params: &ModelParams,
    infer: &InferConfig,
    starts: &[DVector<f64>],
) -> Result<(Vec<DocPosterior>, f64)> {
    let results: Vec<(DocPosterior, f64)> = corpus
        .records()
        .par_iter()
        .zip(starts.par_iter())
        .map(|(record, start)| {
            let post = infer_document_from(record, params, infer, start)?;
            let value = elbo(record, &post, params)?;
            Ok((post, value))
        })
        .collect::<Result<Vec<_>>>()?;
    let objective = results.iter().map(|(_, v)| v).sum::<f64>();
    Ok((results.into_iter().map(|(p, _)| p).collect(), objective))
}

pub fn train(corpus: &Corpus, cfg: &TrainConfig) -> Result<TrainedModel> {
    train_observed(corpus, cfg, |_| {})
}

/// EM training that reports every iteration to `observer`.
pub fn train_observed(
    corpus: &Corpus,
    cfg: &TrainConfig,
    mut observer: impl FnMut(&EmIteration<'_>),
) -> Result<TrainedModel> {
    let mut best: Option<TrainedModel> = None;
    for r in 0..cfg.restarts {
        let mut params = initialize_restart(corpus, cfg, r)?;
        let model = train_from(corpus, cfg, r, &mut params, &mut observer)?;
        let score = model.history.last().copied().unwrap_or(f64::NEG_INFINITY);
        if cfg.restarts > 1 {
            info!("restart {r}: final objective {score:.6}");
        }
        let better = match &best {
            None => true,
            Some(b) => score > b.history.last().copied().unwrap_or(f64::NEG_INFINITY),
        };
        if better {
            best = Some(model);
        }
    }
    Ok(best.expect("at least one restart"))
}

/// EM training from explicit starting parameters (a single run; `restarts` is ignored).
pub fn train_from_params(
    corpus: &Corpus,
    cfg: &TrainConfig,
    init: ModelParams,
    mut observer: impl FnMut(&EmIteration<'_>),
) -> Result<TrainedModel> {
    cfg.validate()?;
    if init.k() != cfg.k || init.vocab_sizes() != corpus.vocab_sizes() {
        return Err(Error::Dimension("initial parameters do not match corpus/config".into()));
    }
    let mut params = init;
    train_from(corpus, cfg, 0, &mut params, &mut observer)
}

fn train_from(
    corpus: &Corpus,
    cfg: &TrainConfig,
    restart: usize,
    params: &mut ModelParams,
    observer: &mut dyn FnMut(&EmIteration<'_>),
) -> Result<TrainedModel> {
    let infer = cfg.infer_config();
    let mut starts = vec![params.mu0().clone(); corpus.num_records()];
    let mut history = Vec::new();
    let mut converged = false;
    let mut last: Option<Vec<DocPosterior>> = None;

    for iteration in 0..cfg.max_em_iters {
        let (posteriors, objective) = e_step(corpus, params, &infer, &starts)?;
        if !objective.is_finite() {
            return Err(Error::NonFinite(format!(
                "corpus objective at EM iteration {iteration}"
            )));
        }
        let flagged = posteriors
            .iter()
            .filter(|p| !p.converged || p.optimizer_warning)
            .count();
        if flagged > 0 {
            debug!("EM iteration {iteration}: {flagged} records flagged by inference");
        }
        if let Some(&prev) = history.last() {
            let change = ((objective - prev) / f64::abs(prev).max(f64::MIN_POSITIVE)).abs();
            converged = change <= cfg.em_tol;
        }
        history.push(objective);
        info!("EM iteration {iteration}: objective {objective:.6}");

        if converged {
            observer(&EmIteration {
                restart,
                iteration,
                objective,
                params,
                posteriors: &posteriors,
                updated: None,
            });
            last = Some(posteriors);
            break;
        }
        let step = m_step(corpus, &posteriors, cfg, params)?;
        if step.repaired {
            warn!("EM iteration {iteration}: prior covariance repaired with a ridge");
        }
        observer(&EmIteration {
            restart,
            iteration,
            objective,
            params,
            posteriors: &posteriors,
            updated: Some(&step.params),
        });
        starts = posteriors.iter().map(|p| p.nu_hat.clone()).collect();
        *params = step.params;
        last = Some(posteriors);
    }

    // Refresh the fits so they correspond to the returned parameters.
    if !converged && cfg.max_em_iters > 0 {
        let (posteriors, _) = e_step(corpus, params, &infer, &starts)?;
        last = Some(posteriors);
    }
    let posteriors = last
        .map(|posts| {
            corpus
                .records()
                .iter()
                .zip(&posts)
                .map(|(r, p)| RecordFit::from_posterior(r, p))
                .collect()
        })
        .unwrap_or_default();

    Ok(TrainedModel {
        params: params.clone(),
        vocabularies: corpus.vocabularies().to_vec(),
        vocab_fingerprint: corpus.fingerprint(),
        config: cfg.clone(),
        history,
        converged,
        posteriors,
    })
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RecordFitFile {
    id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    time_bin: Option<String>,
    nu_hat: Vec<f64>,
    converged: bool,
    iterations: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelFile {
    format: String,
    version: u32,
    k: usize,
    m: usize,
    vocab_fingerprint: String,
    vocabularies: IndexMap<String, Vec<String>>,
    mu0: Vec<f64>,
    /// Row-major.
    sigma0: Vec<Vec<f64>>,
    /// Per type, `K` rows of `V_m` log-probabilities.
    log_beta: IndexMap<String, Vec<Vec<f64>>>,
    config: TrainConfig,
    history: Vec<f64>,
    converged: bool,
    records: Vec<RecordFitFile>,
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn from_rows(rows: &[Vec<f64>], ncols: Option<usize>, what: &str) -> Result<DMatrix<f64>> {
    let nrows = rows.len();
    let ncols = ncols.unwrap_or_else(|| rows.first().map_or(0, Vec::len));
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::Dimension(format!("{what}: ragged rows")));
    }
    Ok(DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
}

pub fn model_to_json(model: &TrainedModel) -> String {
    let file = ModelFile {
        format: MODEL_FORMAT.into(),
        version: MODEL_VERSION,
        k: model.k(),
        m: model.params.num_types(),
        vocab_fingerprint: model.vocab_fingerprint.clone(),
        vocabularies: model
            .vocabularies
            .iter()
            .map(|v| (v.type_name().to_string(), v.tokens().to_vec()))
            .collect(),
        mu0: model.params.mu0().iter().copied().collect(),
        sigma0: rows(model.params.sigma0()),
        log_beta: model
            .vocabularies
            .iter()
            .zip(model.params.log_beta())
            .map(|(v, lb)| (v.type_name().to_string(), rows(lb)))
            .collect(),
        config: model.config.clone(),
        history: model.history.clone(),
        converged: model.converged,
        records: model
            .posteriors
            .iter()
            .map(|f| RecordFitFile {
                id: f.record_id.clone(),
                time_bin: f.time_bin.clone(),
                nu_hat: f.nu_hat.iter().copied().collect(),
                converged: f.converged,
                iterations: f.iterations,
            })
            .collect(),
    };
    serde_json::to_string(&file).expect("model serializes")
}

pub fn model_from_json(text: &str, path: &Path) -> Result<TrainedModel> {
    let file: ModelFile = serde_json::from_str(text).map_err(|e| Error::json(path, 0, &e))?;
    if file.format != MODEL_FORMAT {
        return Err(Error::Invalid(format!(
            "{}: not a model file ({:?})",
            path.display(),
            file.format
        )));
    }
    if file.version != MODEL_VERSION {
        return Err(Error::Version {
            found: file.version,
            expected: MODEL_VERSION,
        });
    }
    let vocabularies = file
        .vocabularies
        .into_iter()
        .map(|(name, tokens)| Vocabulary::new(name, tokens))
        .collect::<Result<Vec<_>>>()?;
    let found = fingerprint(&vocabularies);
    if found != file.vocab_fingerprint {
        return Err(Error::FingerprintMismatch {
            expected: file.vocab_fingerprint,
            found,
        });
    }
    if vocabularies.len() != file.m || file.log_beta.len() != file.m || file.mu0.len() != file.k {
        return Err(Error::Dimension(format!(
            "{}: header does not match contents",
            path.display()
        )));
    }
    let mut log_beta = Vec::with_capacity(file.m);
    for (vocab, (name, lb)) in vocabularies.iter().zip(&file.log_beta) {
        if name != vocab.type_name() || lb.len() != file.k {
            return Err(Error::Dimension(format!(
                "log_beta for {name:?} does not match vocabularies"
            )));
        }
        log_beta.push(from_rows(lb, Some(vocab.size()), name)?);
    }
    let sigma0 = from_rows(&file.sigma0, Some(file.k), "sigma0")?;
    if sigma0.nrows() != file.k {
        return Err(Error::Dimension("sigma0 row count".into()));
    }
    let params = ModelParams::new(DVector::from_vec(file.mu0), sigma0, log_beta)?;
    let posteriors = file
        .records
        .into_iter()
        .map(|r| {
            if r.nu_hat.len() != file.k {
                return Err(Error::Dimension(format!("record {} nu_hat length", r.id)));
            }
            Ok(RecordFit {
                record_id: r.id,
                time_bin: r.time_bin,
                nu_hat: DVector::from_vec(r.nu_hat),
                converged: r.converged,
                iterations: r.iterations,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TrainedModel {
        params,
        vocabularies,
        vocab_fingerprint: file.vocab_fingerprint,
        config: file.config,
        history: file.history,
        converged: file.converged,
        posteriors,
    })
}

pub fn save_model(model: &TrainedModel, path: &Path) -> Result<()> {
    fs::write(path, model_to_json(model) + "\n").map_err(|e| Error::io(path, e))
}

pub fn load_model(path: &Path) -> Result<TrainedModel> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    model_from_json(&text, path)
}
