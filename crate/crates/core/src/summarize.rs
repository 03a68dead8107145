//! Record-level summaries over time: each time segment of a record is inferred
//! against a frozen model, the most salient phenotypes of the final segment are
//! selected, and their proportions are tracked across all segments.

use std::path::Path;

use indexmap::IndexMap;
use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::RecordBags;
use crate::error::{Error, Result};
use crate::learning::TrainedModel;

pub const DEFAULT_TOP_N: usize = 5;
pub const DEFAULT_COVERAGE_MASS: f64 = 0.9;
const SIMPLEX_TOL: f64 = 1e-9;
/// Slack when comparing cumulative mass against the target.
const COVERAGE_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryTrajectory {
    pub record_id: String,
    pub bins: Vec<String>,
    pub selected: Vec<usize>,
    /// `salience[b][s]`: proportion of `selected[s]` in bin `b`.
    pub salience: Vec<Vec<f64>>,
    pub residual: Vec<f64>,
}

/// Bin label for segment `i`: its `time_bin`, or the position when absent.
fn bin_label(segment: &RecordBags, i: usize) -> String {
    segment.time_bin.clone().unwrap_or_else(|| i.to_string())
}

/// Indices of the `n` largest entries, largest first; ties go to the lower index.
pub fn top_indices(values: &DVector<f64>, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    order.truncate(n);
    order
}

/// Summarizes one record's time segments (in the given order). `top_n` larger
/// than K selects every phenotype.
pub fn summarize_record(segments: &[RecordBags], model: &TrainedModel, top_n: usize) -> Result<SummaryTrajectory> {
    if segments.is_empty() {
        return Err(Error::Invalid("no segments to summarize".into()));
    }
    if top_n == 0 {
        return Err(Error::InvalidConfig("top_n must be at least 1".into()));
    }
    let record_id = &segments[0].record_id;
    if let Some(other) = segments.iter().find(|s| &s.record_id != record_id) {
        return Err(Error::Invalid(format!(
            "segments mix records {record_id:?} and {:?}",
            other.record_id
        )));
    }
    let sizes = model.params.vocab_sizes();
    for s in segments {
        s.validate(&sizes)?;
    }
    let cfg = model.config.infer_config();
    let proportions = segments
        .iter()
        .map(|s| {
            let post = crate::variational::infer_document(s, &model.params, &cfg)?;
            Ok(post.proportions)
        })
        .collect::<Result<Vec<DVector<f64>>>>()?;

    let final_props = proportions.last().expect("non-empty");
    let selected = top_indices(final_props, top_n.min(model.k()));
    let salience: Vec<Vec<f64>> = proportions
        .iter()
        .map(|p| selected.iter().map(|&k| p[k]).collect())
        .collect();
    let residual = salience
        .iter()
        .map(|row| (1.0 - row.iter().sum::<f64>()).max(0.0))
        .collect();
    Ok(SummaryTrajectory {
        record_id: record_id.clone(),
        bins: segments.iter().enumerate().map(|(i, s)| bin_label(s, i)).collect(),
        selected,
        salience,
        residual,
    })
}

/// Groups segments by record id (first-appearance order, segments in input
/// order) and summarizes the records concurrently.
pub fn summarize_records(
    segments: &[RecordBags],
    model: &TrainedModel,
    top_n: usize,
) -> Result<Vec<SummaryTrajectory>> {
    let mut groups: IndexMap<&str, Vec<RecordBags>> = IndexMap::new();
    for s in segments {
        groups.entry(s.record_id.as_str()).or_default().push(s.clone());
    }
    if groups.is_empty() {
        return Err(Error::Invalid("no segments to summarize".into()));
    }
    groups
        .into_values()
        .collect::<Vec<_>>()
        .par_iter()
        .map(|g| summarize_record(g, model, top_n))
        .collect()
}

/// Smallest number of phenotypes, taken largest first, whose cumulative
/// proportion reaches `mass`.
pub fn coverage_count(proportions: &[f64], mass: f64) -> Result<usize> {
    if !(mass > 0.0 && mass <= 1.0) {
        return Err(Error::InvalidConfig(format!(
            "coverage mass must lie in (0, 1], got {mass}"
        )));
    }
    let total: f64 = proportions.iter().sum();
    if proportions.is_empty() || proportions.iter().any(|&p| !(p >= 0.0)) || (total - 1.0).abs() > SIMPLEX_TOL {
        return Err(Error::Invalid("proportions are not a point on the simplex".into()));
    }
    let mut sorted = proportions.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let mut cumulative = 0.0;
    for (i, p) in sorted.iter().enumerate() {
        cumulative += p;
        if cumulative >= mass - COVERAGE_TOL {
            return Ok(i + 1);
        }
    }
    Ok(sorted.len())
}

/// Inclusive range of phenotype counts; `max: None` is open-ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Bucket {
    pub min: usize,
    pub max: Option<usize>,
}

impl Bucket {
    pub fn contains(&self, count: usize) -> bool {
        count >= self.min && self.max.is_none_or(|m| count <= m)
    }

    pub fn label(&self) -> String {
        match self.max {
            Some(m) => format!("{}-{}", self.min, m),
            None => format!("{}+", self.min),
        }
    }
}

pub fn default_buckets() -> Vec<Bucket> {
    vec![
        Bucket { min: 1, max: Some(5) },
        Bucket { min: 6, max: Some(20) },
        Bucket { min: 21, max: None },
    ]
}

fn check_buckets(buckets: &[Bucket]) -> Result<()> {
    if buckets.is_empty() {
        return Err(Error::InvalidConfig("no coverage buckets".into()));
    }
    for (i, a) in buckets.iter().enumerate() {
        if a.max.is_some_and(|m| m < a.min) {
            return Err(Error::InvalidConfig(format!("empty bucket {}", a.label())));
        }
        for b in &buckets[i + 1..] {
            let a_hi = a.max.unwrap_or(usize::MAX);
            let b_hi = b.max.unwrap_or(usize::MAX);
            if a.min <= b_hi && b.min <= a_hi {
                return Err(Error::InvalidConfig(format!(
                    "buckets {} and {} overlap",
                    a.label(),
                    b.label()
                )));
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageBin {
    pub bucket: Bucket,
    pub records: usize,
    pub fraction: f64,
}

/// Histogram of coverage counts over a set of proportion vectors.
pub fn coverage_histogram_of(proportions: &[DVector<f64>], mass: f64, buckets: &[Bucket]) -> Result<Vec<CoverageBin>> {
    check_buckets(buckets)?;
    if proportions.is_empty() {
        return Err(Error::MissingPosteriors);
    }
    let mut counts = vec![0usize; buckets.len()];
    for p in proportions {
        let c = coverage_count(p.as_slice(), mass)?;
        let b = buckets
            .iter()
            .position(|b| b.contains(c))
            .ok_or_else(|| Error::InvalidConfig(format!("coverage count {c} falls outside every bucket")))?;
        counts[b] += 1;
    }
    let n = proportions.len() as f64;
    Ok(buckets
        .iter()
        .zip(counts)
        .map(|(&bucket, records)| CoverageBin {
            bucket,
            records,
            fraction: records as f64 / n,
        })
        .collect())
}

/// Coverage histogram over the model's stored per-record posteriors.
pub fn coverage_histogram(model: &TrainedModel, mass: f64, buckets: &[Bucket]) -> Result<Vec<CoverageBin>> {
    let props: Vec<DVector<f64>> = model.posteriors.iter().map(|f| f.proportions()).collect();
    coverage_histogram_of(&props, mass, buckets)
}

pub fn coverage_to_csv(bins: &[CoverageBin]) -> String {
    let mut out = String::from("bucket,records,fraction\n");
    for b in bins {
        out.push_str(&format!("{},{},{}\n", b.bucket.label(), b.records, b.fraction));
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SankeyNode {
    pub phenotype: usize,
    pub bin: String,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SankeyLink {
    pub phenotype: usize,
    pub from_bin: String,
    pub to_bin: String,
    pub value: f64,
}

/// Flow-diagram form of a trajectory: one node per (selected phenotype, bin),
/// one link per phenotype between adjacent bins. A link carries the salience of
/// its source node; zero-salience nodes are kept so layouts stay stable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sankey {
    pub record_id: String,
    pub bins: Vec<String>,
    pub nodes: Vec<SankeyNode>,
    pub links: Vec<SankeyLink>,
}

impl Sankey {
    pub fn from_trajectory(t: &SummaryTrajectory) -> Self {
        let mut nodes = Vec::new();
        let mut links = Vec::new();
        for (b, bin) in t.bins.iter().enumerate() {
            for (s, &phenotype) in t.selected.iter().enumerate() {
                nodes.push(SankeyNode {
                    phenotype,
                    bin: bin.clone(),
                    value: t.salience[b][s],
                });
                if let Some(next) = t.bins.get(b + 1) {
                    links.push(SankeyLink {
                        phenotype,
                        from_bin: bin.clone(),
                        to_bin: next.clone(),
                        value: t.salience[b][s],
                    });
                }
            }
        }
        Self {
            record_id: t.record_id.clone(),
            bins: t.bins.clone(),
            nodes,
            links,
        }
    }
}

pub fn sankey_json(t: &SummaryTrajectory) -> String {
    serde_json::to_string_pretty(&Sankey::from_trajectory(t)).expect("sankey serializes")
}

pub fn export_sankey(t: &SummaryTrajectory, path: &Path) -> Result<()> {
    std::fs::write(path, sankey_json(t) + "\n").map_err(|e| Error::io(path, e))
}

/// Long-format CSV: `bin,phenotype,salience`.
pub fn trajectory_csv(t: &SummaryTrajectory) -> String {
    let mut out = String::from("bin,phenotype,salience\n");
    for (b, bin) in t.bins.iter().enumerate() {
        for (s, phenotype) in t.selected.iter().enumerate() {
            out.push_str(&format!("{},{},{}\n", csv_field(bin), phenotype, t.salience[b][s]));
        }
    }
    out
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n', '\r']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Bag, Vocabulary};
    use crate::learning::{RecordFit, TrainConfig};
    use crate::model::ModelParams;
    use nalgebra::DMatrix;
    use proptest::prelude::*;

    fn sharp_model(k: usize) -> TrainedModel {
        // type 0 has one private token per phenotype plus a shared one
        let v = k + 1;
        let b = DMatrix::from_fn(k, v, |r, c| if r == c { 0.9 } else { 0.1 / k as f64 });
        let params = ModelParams::from_beta(DVector::zeros(k), DMatrix::identity(k, k), &[b]).unwrap();
        let vocab = Vocabulary::new("dx", (0..v).map(|i| format!("t{i}")).collect()).unwrap();
        TrainedModel {
            params,
            vocab_fingerprint: crate::corpus::fingerprint(std::slice::from_ref(&vocab)),
            vocabularies: vec![vocab],
            config: TrainConfig {
                k,
                ..TrainConfig::default()
            },
            history: vec![],
            converged: true,
            posteriors: vec![],
        }
    }

    fn segment(bin: &str, counts: &[(usize, u64)]) -> RecordBags {
        let bag: Bag = counts.iter().copied().collect();
        RecordBags::new("p1", Some(bin.to_string()), vec![bag])
    }

    #[test]
    fn top_indices_ties() {
        let v = DVector::from_column_slice(&[0.6, 0.3, 0.1]);
        assert_eq!(top_indices(&v, 2), vec![0, 1]);
        let v = DVector::from_column_slice(&[0.25, 0.5, 0.25]);
        assert_eq!(top_indices(&v, 3), vec![1, 0, 2]);
    }

    #[test]
    fn identical_bins_identical_salience() {
        let model = sharp_model(3);
        let s = vec![segment("2018", &[(0, 5), (1, 2)]), segment("2019", &[(0, 5), (1, 2)])];
        let t = summarize_record(&s, &model, 2).unwrap();
        assert_eq!(t.bins, vec!["2018", "2019"]);
        assert_eq!(t.selected, vec![0, 1]);
        assert_eq!(t.salience[0], t.salience[1]);
        for (row, r) in t.salience.iter().zip(&t.residual) {
            assert!((row.iter().sum::<f64>() + r - 1.0).abs() <= 1e-9);
        }
    }

    #[test]
    fn full_selection_leaves_no_residual_and_model_untouched() {
        let model = sharp_model(4);
        let before = model.clone();
        let s = vec![segment("a", &[(2, 9)]), segment("b", &[(3, 1), (4, 3)])];
        let t = summarize_record(&s, &model, 4).unwrap();
        assert!(t.residual.iter().all(|r| r.abs() <= 1e-9));
        assert_eq!(model, before);
        // selection comes from the last bin
        assert_eq!(t.selected[0], 3);
        let t = summarize_record(&s, &model, 10).unwrap();
        assert_eq!(t.selected.len(), 4);
    }

    #[test]
    fn summarize_errors() {
        let model = sharp_model(2);
        assert!(summarize_record(&[], &model, 5).is_err());
        assert!(summarize_record(&[segment("a", &[(0, 1)])], &model, 0).is_err());
        let other = RecordBags::new("p2", None, vec![Bag::new()]);
        assert!(summarize_record(&[segment("a", &[(0, 1)]), other], &model, 1).is_err());
        let out_of_range = segment("a", &[(7, 1)]);
        assert!(summarize_record(&[out_of_range], &model, 1).is_err());
    }

    #[test]
    fn records_grouped_in_first_appearance_order() {
        let model = sharp_model(2);
        let mut s = vec![segment("a", &[(0, 1)])];
        s.push(RecordBags::new("p0", Some("x".into()), vec![Bag::new()]));
        s.push(segment("b", &[(1, 1)]));
        let all = summarize_records(&s, &model, 1).unwrap();
        assert_eq!(all.len(), 2);
        assert_eq!(all[0].record_id, "p1");
        assert_eq!(all[0].bins, vec!["a", "b"]);
        assert_eq!(all[1].bins, vec!["x"]);
    }

    #[test]
    fn coverage_examples() {
        assert_eq!(coverage_count(&[0.6, 0.35, 0.05], 0.9).unwrap(), 2);
        for k in [1, 3, 7, 10, 50] {
            let u = vec![1.0 / k as f64; k];
            assert_eq!(
                coverage_count(&u, 0.9).unwrap(),
                (0.9 * k as f64).ceil() as usize,
                "k={k}"
            );
        }
        let mut point = vec![0.0; 6];
        point[4] = 1.0;
        for mass in [0.01, 0.5, 1.0] {
            assert_eq!(coverage_count(&point, mass).unwrap(), 1);
        }
        assert!(coverage_count(&[0.5, 0.5], 0.0).is_err());
        assert!(coverage_count(&[0.5, 0.5], 1.1).is_err());
        assert!(coverage_count(&[0.5, 0.6], 0.5).is_err());
    }

    #[test]
    fn bucket_validation() {
        let overlapping = vec![Bucket { min: 1, max: Some(5) }, Bucket { min: 5, max: None }];
        let props = vec![DVector::from_column_slice(&[1.0])];
        assert!(coverage_histogram_of(&props, 0.9, &overlapping).is_err());
        let gap = vec![Bucket { min: 2, max: None }];
        assert!(coverage_histogram_of(&props, 0.9, &gap).is_err());
        assert_eq!(default_buckets()[2].label(), "21+");
    }

    #[test]
    fn dominant_phenotype_lands_in_first_bucket() {
        let mut model = sharp_model(3);
        model.posteriors = (0..10)
            .map(|i| RecordFit {
                record_id: format!("r{i}"),
                time_bin: None,
                nu_hat: DVector::from_column_slice(&[5.0, 0.0, -1.0]),
                converged: true,
                iterations: 1,
            })
            .collect();
        let h = coverage_histogram(&model, 0.9, &default_buckets()).unwrap();
        assert_eq!(h[0].fraction, 1.0);
        assert_eq!(h.iter().map(|b| b.records).sum::<usize>(), 10);
        model.posteriors.clear();
        assert!(coverage_histogram(&model, 0.9, &default_buckets()).is_err());
    }

    #[test]
    fn sankey_structure() {
        let t = SummaryTrajectory {
            record_id: "p".into(),
            bins: vec!["2018".into(), "2019".into()],
            selected: vec![3, 1],
            salience: vec![vec![0.0, 0.4], vec![0.5, 0.3]],
            residual: vec![0.6, 0.2],
        };
        let s = Sankey::from_trajectory(&t);
        assert_eq!(s.nodes.len(), 4);
        assert_eq!(s.links.len(), 2);
        assert_eq!(s.nodes[0].value, 0.0);
        assert_eq!(s.links[0].value, 0.0);
        let back: Sankey = serde_json::from_str(&sankey_json(&t)).unwrap();
        assert_eq!(back, s);
        let csv = trajectory_csv(&t);
        assert_eq!(csv.lines().count(), 5);
        assert!(csv.starts_with("bin,phenotype,salience\n2018,3,0\n"));
    }

    fn simplex(k: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(0.0f64..1.0, k).prop_filter_map("positive mass", |w| {
            let s: f64 = w.iter().sum();
            (s > 1e-6).then(|| w.iter().map(|x| x / s).collect())
        })
    }

    proptest! {
        #[test]
        fn coverage_is_permutation_invariant_and_monotone(
            p in (1usize..12).prop_flat_map(simplex),
            shift in 0usize..12,
            a in 0.01f64..1.0,
            b in 0.01f64..1.0,
        ) {
            let mut rotated = p.clone();
            rotated.rotate_left(shift % p.len());
            prop_assert_eq!(coverage_count(&p, a).unwrap(), coverage_count(&rotated, a).unwrap());
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(coverage_count(&p, lo).unwrap() <= coverage_count(&p, hi).unwrap());
        }
    }
}
