//! Post-training analysis: phenotype definitions with automatic labels,
//! population prevalence, and the thresholded phenotype relatedness graph.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::corpus::type_index;
use crate::error::{Error, Result};
use crate::learning::TrainedModel;
use crate::numerics::is_positive_definite;

/// Default per-record presence threshold for prevalence.
pub const DEFAULT_PRESENT_THRESHOLD: f64 = 0.05;
/// Default correlation significance threshold (strict).
pub const DEFAULT_CORRELATION_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenProbability {
    pub token: String,
    pub probability: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TypeTopTokens {
    pub type_name: String,
    pub tokens: Vec<TokenProbability>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhenotypeDefinition {
    pub phenotype_id: usize,
    pub label: String,
    pub label_type: String,
    pub per_type_top_tokens: Vec<TypeTopTokens>,
}

/// Token indices of a probability row sorted by descending value, ties by index.
fn ranked(row: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..row.len()).collect();
    order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
    order
}

/// Top `top_n` tokens per type for every phenotype; the label is the most
/// probable token of `label_type`.
pub fn extract_phenotypes(model: &TrainedModel, top_n: usize, label_type: &str) -> Result<Vec<PhenotypeDefinition>> {
    if top_n == 0 {
        return Err(Error::InvalidConfig("top_n must be >= 1".into()));
    }
    let label_m =
        type_index(&model.vocabularies, label_type).ok_or_else(|| Error::UnknownLabelType(label_type.to_string()))?;
    let betas: Vec<DMatrix<f64>> = (0..model.params.num_types()).map(|m| model.params.beta(m)).collect();
    let mut out = Vec::with_capacity(model.k());
    for k in 0..model.k() {
        let mut per_type = Vec::with_capacity(betas.len());
        let mut label = String::new();
        for (m, (vocab, beta)) in model.vocabularies.iter().zip(&betas).enumerate() {
            let row: Vec<f64> = beta.row(k).iter().copied().collect();
            let order = ranked(&row);
            if m == label_m {
                label = vocab.tokens()[order[0]].clone();
            }
            per_type.push(TypeTopTokens {
                type_name: vocab.type_name().to_string(),
                tokens: order
                    .iter()
                    .take(top_n)
                    .map(|&v| TokenProbability {
                        token: vocab.tokens()[v].clone(),
                        probability: row[v],
                    })
                    .collect(),
            });
        }
        out.push(PhenotypeDefinition {
            phenotype_id: k,
            label,
            label_type: label_type.to_string(),
            per_type_top_tokens: per_type,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub i: usize,
    pub j: usize,
    pub rho: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RelatednessGraph {
    pub correlation: DMatrix<f64>,
    pub edges: Vec<Edge>,
    pub threshold: f64,
}

/// Where the phenotype correlation comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CorrelationSource {
    /// The learned prior covariance `Σ₀`.
    #[default]
    Prior,
    /// Pearson correlation of per-record proportions across records.
    Empirical,
}

/// `D^{-1/2} Σ D^{-1/2}` with `D = diag(Σ)`; the diagonal is set to exactly 1.
pub fn correlation_from_covariance(sigma: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if !sigma.is_square() || sigma.iter().any(|x| !x.is_finite()) {
        return Err(Error::Invalid("covariance must be square and finite".into()));
    }
    let k = sigma.nrows();
    let scale: Vec<f64> = (0..k).map(|i| sigma[(i, i)]).collect();
    if scale.iter().any(|&s| !(s > 0.0)) {
        return Err(Error::NotPositiveDefinite(
            "covariance has a non-positive variance".into(),
        ));
    }
    Ok(DMatrix::from_fn(k, k, |i, j| {
        if i == j {
            1.0
        } else {
            let r = 0.5 * (sigma[(i, j)] + sigma[(j, i)]) / (scale[i] * scale[j]).sqrt();
            r.clamp(-1.0, 1.0)
        }
    }))
}

/// Super-threshold off-diagonal pairs (`|ρ| > threshold`), each once with `i < j`.
pub fn threshold_edges(correlation: &DMatrix<f64>, threshold: f64) -> Vec<Edge> {
    let k = correlation.nrows();
    let mut edges = Vec::new();
    for i in 0..k {
        for j in (i + 1)..k {
            let rho = correlation[(i, j)];
            if rho.abs() > threshold {
                edges.push(Edge { i, j, rho });
            }
        }
    }
    edges
}

pub fn graph_from_covariance(sigma: &DMatrix<f64>, threshold: f64) -> Result<RelatednessGraph> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::InvalidConfig(format!(
            "threshold must lie in [0, 1], got {threshold}"
        )));
    }
    if !is_positive_definite(sigma) {
        return Err(Error::NotPositiveDefinite("prior covariance".into()));
    }
    let correlation = correlation_from_covariance(sigma)?;
    let edges = threshold_edges(&correlation, threshold);
    Ok(RelatednessGraph {
        correlation,
        edges,
        threshold,
    })
}

/// Relatedness graph from the learned prior covariance.
pub fn correlation_graph(model: &TrainedModel, threshold: f64) -> Result<RelatednessGraph> {
    graph_from_covariance(model.params.sigma0(), threshold)
}

/// Pearson correlation of proportion vectors across records. Phenotypes with
/// zero variance get zero correlation with everything else.
pub fn empirical_correlation(proportions: &[DVector<f64>]) -> Result<DMatrix<f64>> {
    let n = proportions.len();
    if n < 2 {
        return Err(Error::MissingPosteriors);
    }
    let k = proportions[0].len();
    let mean = proportions.iter().fold(DVector::zeros(k), |a, p| a + p) / n as f64;
    let mut cov = DMatrix::zeros(k, k);
    for p in proportions {
        let d = p - &mean;
        cov.ger(1.0, &d, &d, 1.0);
    }
    Ok(DMatrix::from_fn(k, k, |i, j| {
        if i == j {
            1.0
        } else {
            let denom = (cov[(i, i)] * cov[(j, j)]).sqrt();
            if denom > 0.0 {
                (cov[(i, j)] / denom).clamp(-1.0, 1.0)
            } else {
                0.0
            }
        }
    }))
}

pub fn correlation_graph_with(
    model: &TrainedModel,
    threshold: f64,
    source: CorrelationSource,
) -> Result<RelatednessGraph> {
    match source {
        CorrelationSource::Prior => correlation_graph(model, threshold),
        CorrelationSource::Empirical => {
            if !(0.0..=1.0).contains(&threshold) {
                return Err(Error::InvalidConfig(format!(
                    "threshold must lie in [0, 1], got {threshold}"
                )));
            }
            let props: Vec<_> = model.posteriors.iter().map(|f| f.proportions()).collect();
            let correlation = empirical_correlation(&props)?;
            let edges = threshold_edges(&correlation, threshold);
            Ok(RelatednessGraph {
                correlation,
                edges,
                threshold,
            })
        }
    }
}

/// Fraction of records in which each phenotype's proportion is at least
/// `present_threshold`.
pub fn prevalence(model: &TrainedModel, present_threshold: f64) -> Result<Vec<f64>> {
    let props: Vec<_> = model.posteriors.iter().map(|f| f.proportions()).collect();
    prevalence_of(&props, model.k(), present_threshold)
}

pub fn prevalence_of(proportions: &[DVector<f64>], k: usize, present_threshold: f64) -> Result<Vec<f64>> {
    if proportions.is_empty() {
        return Err(Error::MissingPosteriors);
    }
    if !(present_threshold > 0.0 && present_threshold <= 1.0) {
        return Err(Error::InvalidConfig(format!(
            "presence threshold must lie in (0, 1], got {present_threshold}"
        )));
    }
    let mut present = vec![0usize; k];
    for p in proportions {
        for (k, count) in present.iter_mut().enumerate() {
            if p[k] >= present_threshold {
                *count += 1;
            }
        }
    }
    let n = proportions.len() as f64;
    Ok(present.into_iter().map(|c| c as f64 / n).collect())
}

/// Splits edges into those whose endpoints are both more prevalent than
/// `cutoff` (common) and the rest (rare).
pub fn split_by_prevalence(
    graph: &RelatednessGraph,
    prevalence: &[f64],
    cutoff: f64,
) -> Result<(Vec<Edge>, Vec<Edge>)> {
    if !(cutoff > 0.0 && cutoff < 1.0) {
        return Err(Error::InvalidConfig(format!("cutoff must lie in (0, 1), got {cutoff}")));
    }
    let mut common = Vec::new();
    let mut rare = Vec::new();
    for e in &graph.edges {
        let (pi, pj) = (prevalence.get(e.i), prevalence.get(e.j));
        match (pi, pj) {
            (Some(&a), Some(&b)) if a > cutoff && b > cutoff => common.push(*e),
            (Some(_), Some(_)) => rare.push(*e),
            _ => return Err(Error::Dimension("prevalence vector shorter than graph".into())),
        }
    }
    Ok((common, rare))
}

#[derive(Serialize, Deserialize)]
struct GraphFile {
    threshold: f64,
    edges: Vec<Edge>,
}

/// `{threshold, edges: [{i, j, rho}]}`.
pub fn graph_to_json(graph: &RelatednessGraph) -> String {
    serde_json::to_string_pretty(&GraphFile {
        threshold: graph.threshold,
        edges: graph.edges.clone(),
    })
    .expect("graph serializes")
}
