//! Synthetic data from the generative process, plus recovery metrics that
//! compare learned parameters with the planted truth.
//!
//! For each record: draw `ν ~ N(μ₀, Σ₀)`; then for each type `m` and each of
//! its `N_m` tokens draw `z ~ Mult(softmax(ν))` and `x ~ Mult(β_{z,m})`.
//! Record `d` draws from its own ChaCha stream (`seed`, stream `d`), so
//! records can be generated in parallel with identical results.

use std::path::Path;

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{Bag, Corpus, RecordBags, Vocabulary};
use crate::error::{Error, Result};
use crate::learning::{TrainConfig, TrainedModel};
use crate::model::ModelParams;
use crate::numerics::softmax_in_place;
use crate::phenotype::correlation_from_covariance;

const TYPE_NAMES: [&str; 4] = ["dx", "labs", "meds", "notes"];

/// Canonical type name for synthetic data type `m`.
pub fn synthetic_type_name(m: usize) -> String {
    TYPE_NAMES.get(m).map_or_else(|| format!("type{m}"), |s| s.to_string())
}

pub fn synthetic_vocabularies(sizes: &[usize]) -> Vec<Vocabulary> {
    sizes
        .iter()
        .enumerate()
        .map(|(m, &v)| {
            let name = synthetic_type_name(m);
            let tokens = (0..v).map(|i| format!("{name}_{i:03}")).collect();
            Vocabulary::new(name, tokens).expect("synthetic tokens are unique")
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlantedModel {
    pub params: ModelParams,
    pub per_record_nu: Vec<DVector<f64>>,
    /// `z` draws per record, per type, in draw order (only when requested).
    pub per_token_assignments: Option<Vec<Vec<Vec<usize>>>>,
    pub seed: u64,
}

impl PlantedModel {
    /// Wraps the planted parameters as a model file over `corpus`'s vocabularies.
    pub fn to_trained_model(&self, corpus: &Corpus) -> TrainedModel {
        TrainedModel {
            params: self.params.clone(),
            vocabularies: corpus.vocabularies().to_vec(),
            vocab_fingerprint: corpus.fingerprint(),
            config: TrainConfig {
                k: self.params.k(),
                seed: self.seed,
                ..TrainConfig::default()
            },
            history: Vec::new(),
            converged: true,
            posteriors: Vec::new(),
        }
    }
}

struct Samplers {
    chol: DMatrix<f64>,
    topics: Vec<Vec<WeightedIndex<f64>>>,
}

impl Samplers {
    fn new(truth: &ModelParams) -> Result<Self> {
        let chol = Cholesky::new(truth.sigma0().clone())
            .ok_or_else(|| Error::NotPositiveDefinite("truth sigma0".into()))?
            .l();
        let topics = (0..truth.num_types())
            .map(|m| {
                let beta = truth.beta(m);
                (0..truth.k())
                    .map(|k| {
                        WeightedIndex::new(beta.row(k).iter().copied())
                            .map_err(|e| Error::Invalid(format!("beta[{m}] row {k}: {e}")))
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { chol, topics })
    }
}

fn record_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

fn draw_tokens(
    samplers: &Samplers,
    proportions: &DVector<f64>,
    lengths: &[usize],
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<Bag>, Vec<Vec<usize>>)> {
    let pick =
        WeightedIndex::new(proportions.iter().copied()).map_err(|e| Error::Invalid(format!("proportions: {e}")))?;
    let mut bags = Vec::with_capacity(lengths.len());
    let mut assignments = Vec::with_capacity(lengths.len());
    for (topics, &n) in samplers.topics.iter().zip(lengths) {
        let mut bag = Bag::new();
        let mut zs = Vec::with_capacity(n);
        for _ in 0..n {
            let z = pick.sample(rng);
            let x = topics[z].sample(rng);
            *bag.entry(x).or_insert(0) += 1;
            zs.push(z);
        }
        bags.push(bag);
        assignments.push(zs);
    }
    Ok((bags, assignments))
}

fn check_lengths(truth: &ModelParams, lengths: &[usize]) -> Result<()> {
    if lengths.len() != truth.num_types() {
        return Err(Error::Dimension(format!(
            "{} token lengths for {} data types",
            lengths.len(),
            truth.num_types()
        )));
    }
    Ok(())
}

/// Samples `num_records` records from the generative process.
pub fn sample_corpus(
    truth: &ModelParams,
    num_records: usize,
    lengths: &[usize],
    seed: u64,
    keep_assignments: bool,
) -> Result<(Corpus, PlantedModel)> {
    if num_records == 0 {
        return Err(Error::InvalidConfig("at least one record is required".into()));
    }
    check_lengths(truth, lengths)?;
    let samplers = Samplers::new(truth)?;
    let k = truth.k();
    let drawn: Vec<(RecordBags, DVector<f64>, Vec<Vec<usize>>)> = (0..num_records)
        .into_par_iter()
        .map(|d| {
            let mut rng = record_rng(seed, d);
            let white = DVector::from_fn(k, |_, _| rng.sample::<f64, _>(StandardNormal));
            let nu = truth.mu0() + &samplers.chol * white;
            let mut pi = nu.clone();
            softmax_in_place(pi.as_mut_slice());
            let (bags, zs) = draw_tokens(&samplers, &pi, lengths, &mut rng)?;
            Ok((RecordBags::new(format!("rec{d:05}"), None, bags), nu, zs))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut records = Vec::with_capacity(num_records);
    let mut nus = Vec::with_capacity(num_records);
    let mut assignments = Vec::with_capacity(if keep_assignments { num_records } else { 0 });
    for (r, nu, zs) in drawn {
        records.push(r);
        nus.push(nu);
        if keep_assignments {
            assignments.push(zs);
        }
    }
    let corpus = Corpus::new(synthetic_vocabularies(&truth.vocab_sizes()), records)?;
    Ok((
        corpus,
        PlantedModel {
            params: truth.clone(),
            per_record_nu: nus,
            per_token_assignments: keep_assignments.then_some(assignments),
            seed,
        },
    ))
}

/// Samples one record with fixed phenotype proportions (no `ν` draw).
pub fn sample_with_proportions(
    truth: &ModelParams,
    proportions: &DVector<f64>,
    lengths: &[usize],
    seed: u64,
    stream: usize,
    record_id: &str,
    time_bin: Option<String>,
) -> Result<RecordBags> {
    check_lengths(truth, lengths)?;
    if proportions.len() != truth.k() {
        return Err(Error::Dimension("proportions length differs from K".into()));
    }
    let samplers = Samplers::new(truth)?;
    let mut rng = record_rng(seed, stream);
    let (bags, _) = draw_tokens(&samplers, proportions, lengths, &mut rng)?;
    Ok(RecordBags::new(record_id, time_bin, bags))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlantedCorrelation {
    pub i: usize,
    pub j: usize,
    pub rho: f64,
}

/// Truth construction for a synthetic scenario.
///
/// Phenotype `k` of each type puts `concentration` of its mass on a block of
/// tokens starting at `k · floor(V/K)`; the block is `floor(V/K)` wide, widened
/// by `block_overlap` (a fraction of the width) so neighbouring blocks share
/// tokens. Within-block weights are drawn from `U[0.5, 1.5)`; the rest of the
/// vocabulary shares the remaining mass evenly. `Σ₀` has `variance` on the
/// diagonal and the listed correlations off it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    pub k: usize,
    pub vocab_sizes: Vec<usize>,
    pub num_records: usize,
    pub tokens_per_type: Vec<usize>,
    pub concentration: f64,
    #[serde(default)]
    pub block_overlap: f64,
    #[serde(default = "one")]
    pub variance: f64,
    #[serde(default)]
    pub correlations: Vec<PlantedCorrelation>,
    pub seed: u64,
}

fn one() -> f64 {
    1.0
}

pub const PRESET_NAMES: [&str; 3] = ["separable", "correlated-blocks", "overlapping"];

impl Scenario {
    pub fn preset(name: &str) -> Result<Self> {
        let s = match name {
            "separable" => Scenario {
                name: name.into(),
                k: 5,
                vocab_sizes: vec![40, 40, 40],
                num_records: 1000,
                tokens_per_type: vec![80, 80, 80],
                concentration: 0.9,
                block_overlap: 0.0,
                variance: 1.0,
                correlations: vec![],
                seed: 20_190_501,
            },
            "correlated-blocks" => Scenario {
                name: name.into(),
                k: 6,
                vocab_sizes: vec![40, 40, 40],
                num_records: 2000,
                tokens_per_type: vec![80, 80, 80],
                concentration: 0.9,
                block_overlap: 0.0,
                variance: 1.0,
                correlations: vec![PlantedCorrelation { i: 0, j: 1, rho: 0.8 }],
                seed: 20_190_502,
            },
            "overlapping" => Scenario {
                name: name.into(),
                k: 5,
                vocab_sizes: vec![40, 40, 40],
                num_records: 1000,
                tokens_per_type: vec![80, 80, 80],
                concentration: 0.8,
                block_overlap: 0.5,
                variance: 1.0,
                correlations: vec![],
                seed: 20_190_503,
            },
            other => {
                return Err(Error::InvalidConfig(format!(
                    "unknown preset {other:?}; expected one of {PRESET_NAMES:?}"
                )))
            }
        };
        Ok(s)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let s: Scenario = serde_json::from_str(&text).map_err(|e| Error::json(path, 0, &e))?;
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.k < 1 || self.num_records < 1 {
            return Err(Error::InvalidConfig(
                "scenario needs K >= 1 and at least one record".into(),
            ));
        }
        if self.vocab_sizes.is_empty() || self.vocab_sizes.len() != self.tokens_per_type.len() {
            return Err(Error::InvalidConfig(
                "vocab_sizes and tokens_per_type must align".into(),
            ));
        }
        if self.vocab_sizes.iter().any(|&v| v < self.k) {
            return Err(Error::InvalidConfig("each vocabulary needs at least K tokens".into()));
        }
        if !(self.concentration > 0.0 && self.concentration < 1.0) {
            return Err(Error::InvalidConfig("concentration must lie in (0, 1)".into()));
        }
        if !(self.block_overlap >= 0.0) || !(self.variance > 0.0) {
            return Err(Error::InvalidConfig(
                "block_overlap must be >= 0 and variance > 0".into(),
            ));
        }
        for c in &self.correlations {
            if c.i >= self.k || c.j >= self.k || c.i == c.j || !(c.rho.abs() < 1.0) {
                return Err(Error::InvalidConfig(format!("bad planted correlation {c:?}")));
            }
        }
        Ok(())
    }

    pub fn build_truth(&self) -> Result<ModelParams> {
        self.validate()?;
        let k = self.k;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x7472_7574_6800_0000);
        let beta: Vec<DMatrix<f64>> = self
            .vocab_sizes
            .iter()
            .map(|&v| {
                let stride = v / k;
                let width = ((stride as f64) * (1.0 + self.block_overlap)).round().max(1.0) as usize;
                let width = width.min(v - 1).max(1);
                let mut b = DMatrix::zeros(k, v);
                for row in 0..k {
                    let block: Vec<usize> = (0..width).map(|o| (row * stride + o) % v).collect();
                    let weights: Vec<f64> = block.iter().map(|_| rng.random_range(0.5..1.5)).collect();
                    let wsum: f64 = weights.iter().sum();
                    let rest = (1.0 - self.concentration) / (v - width) as f64;
                    for col in 0..v {
                        b[(row, col)] = rest;
                    }
                    for (&col, w) in block.iter().zip(&weights) {
                        b[(row, col)] = self.concentration * w / wsum;
                    }
                }
                b
            })
            .collect();
        let mut sigma = DMatrix::identity(k, k) * self.variance;
        for c in &self.correlations {
            sigma[(c.i, c.j)] = c.rho * self.variance;
            sigma[(c.j, c.i)] = c.rho * self.variance;
        }
        ModelParams::from_beta(DVector::zeros(k), sigma, &beta)
    }

    pub fn sample(&self) -> Result<(Corpus, PlantedModel)> {
        let truth = self.build_truth()?;
        sample_corpus(&truth, self.num_records, &self.tokens_per_type, self.seed, false)
    }
}

/// Total-variation distance between two discrete distributions.
pub fn total_variation(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

/// `cost[(l, t)]`: mean over types of TV between learned row `l` and planted row `t`.
pub fn tv_cost_matrix(learned: &ModelParams, truth: &ModelParams) -> Result<DMatrix<f64>> {
    if learned.k() != truth.k() || learned.vocab_sizes() != truth.vocab_sizes() {
        return Err(Error::Dimension("learned and planted models differ in shape".into()));
    }
    let k = learned.k();
    let m = learned.num_types();
    let lb: Vec<_> = (0..m).map(|i| learned.beta(i)).collect();
    let tb: Vec<_> = (0..m).map(|i| truth.beta(i)).collect();
    Ok(DMatrix::from_fn(k, k, |l, t| {
        lb.iter()
            .zip(&tb)
            .map(|(a, b)| {
                let ra: Vec<f64> = a.row(l).iter().copied().collect();
                let rb: Vec<f64> = b.row(t).iter().copied().collect();
                total_variation(&ra, &rb)
            })
            .sum::<f64>()
            / m as f64
    }))
}

/// Minimum-cost perfect assignment (Hungarian algorithm with potentials).
/// Returns `assignment[row] = column` and the total cost.
pub fn min_cost_assignment(cost: &DMatrix<f64>) -> (Vec<usize>, f64) {
    let n = cost.nrows();
    assert_eq!(n, cost.ncols(), "cost matrix must be square");
    // 1-based potentials over rows (u) and columns (v); p[j] is the row matched to column j.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[(i0 - 1, j - 1)] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0; n];
    for j in 1..=n {
        if p[j] > 0 {
            assignment[p[j] - 1] = j - 1;
        }
    }
    let total = assignment.iter().enumerate().map(|(r, &c)| cost[(r, c)]).sum();
    (assignment, total)
}

/// Largest K for which ties among optimal matchings are resolved to the
/// lexicographically smallest permutation (`O(K⁵)` refinement).
pub const LEXICOGRAPHIC_TIE_BREAK_MAX_K: usize = 16;
const TIE_TOL: f64 = 1e-12;

fn lexicographic_refine(cost: &DMatrix<f64>, optimum: f64) -> Vec<usize> {
    let n = cost.nrows();
    let big = cost.iter().fold(0.0f64, |a, &c| a.max(c.abs())) * (n as f64 + 1.0) + 1.0;
    let mut fixed: Vec<Option<usize>> = vec![None; n];
    for row in 0..n {
        for col in 0..n {
            if fixed.contains(&Some(col)) {
                continue;
            }
            let mut trial = fixed.clone();
            trial[row] = Some(col);
            let constrained = DMatrix::from_fn(n, n, |r, c| match trial[r] {
                Some(fc) if fc == c => cost[(r, c)],
                Some(_) => big,
                None if trial.contains(&Some(c)) => big,
                None => cost[(r, c)],
            });
            let (_, total) = min_cost_assignment(&constrained);
            if total <= optimum + TIE_TOL {
                fixed = trial;
                break;
            }
        }
    }
    fixed.into_iter().map(|c| c.expect("every row fixed")).collect()
}

/// Bijection `matching[learned] = planted` minimizing total TV cost between
/// matched topic rows.
pub fn match_phenotypes(learned: &ModelParams, truth: &ModelParams) -> Result<Vec<usize>> {
    let cost = tv_cost_matrix(learned, truth)?;
    Ok(match_cost(&cost).0)
}

pub(crate) fn match_cost(cost: &DMatrix<f64>) -> (Vec<usize>, f64) {
    let (assignment, total) = min_cost_assignment(cost);
    if cost.nrows() <= LEXICOGRAPHIC_TIE_BREAK_MAX_K {
        let refined = lexicographic_refine(cost, total);
        let refined_total = refined.iter().enumerate().map(|(r, &c)| cost[(r, c)]).sum();
        return (refined, refined_total);
    }
    (assignment, total)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationRecovery {
    /// Planted phenotype indices.
    pub i: usize,
    pub j: usize,
    pub planted: f64,
    /// Learned correlation between the learned phenotypes matched to `i` and `j`.
    pub learned: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoveryReport {
    /// `matching[learned] = planted`.
    pub matching: Vec<usize>,
    /// Indexed by planted phenotype, then data type.
    pub per_phenotype_tv: Vec<Vec<f64>>,
    pub mean_tv: f64,
    pub correlation_recovery: Vec<CorrelationRecovery>,
}

pub fn recovery_report(learned: &ModelParams, planted: &PlantedModel, corr_threshold: f64) -> Result<RecoveryReport> {
    let truth = &planted.params;
    let matching = match_phenotypes(learned, truth)?;
    let k = truth.k();
    let mut learned_for = vec![0; k];
    for (l, &t) in matching.iter().enumerate() {
        learned_for[t] = l;
    }
    let m = truth.num_types();
    let lb: Vec<_> = (0..m).map(|i| learned.beta(i)).collect();
    let tb: Vec<_> = (0..m).map(|i| truth.beta(i)).collect();
    let per_phenotype_tv: Vec<Vec<f64>> = (0..k)
        .map(|t| {
            (0..m)
                .map(|mm| {
                    let a: Vec<f64> = lb[mm].row(learned_for[t]).iter().copied().collect();
                    let b: Vec<f64> = tb[mm].row(t).iter().copied().collect();
                    total_variation(&a, &b)
                })
                .collect()
        })
        .collect();
    let mean_tv = per_phenotype_tv.iter().flatten().sum::<f64>() / (k * m) as f64;

    let planted_corr = correlation_from_covariance(truth.sigma0())?;
    let learned_corr = correlation_from_covariance(learned.sigma0())?;
    let mut correlation_recovery = Vec::new();
    for i in 0..k {
        for j in (i + 1)..k {
            let rho = planted_corr[(i, j)];
            if rho.abs() > corr_threshold {
                correlation_recovery.push(CorrelationRecovery {
                    i,
                    j,
                    planted: rho,
                    learned: learned_corr[(learned_for[i], learned_for[j])],
                });
            }
        }
    }
    Ok(RecoveryReport {
        matching,
        per_phenotype_tv,
        mean_tv,
        correlation_recovery,
    })
}
