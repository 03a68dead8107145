use std::collections::HashSet;
use std::fmt;
use std::path::{Path, PathBuf};

use log::{info, warn};
use mctm::corpus::{load_corpus, load_records, load_vocabularies, save_corpus};
use mctm::learning::{load_model, save_model, train, TrainedModel};
use mctm::phenotype::{correlation_graph_with, extract_phenotypes, graph_to_json, CorrelationSource};
use mctm::summarize::{
    coverage_count, coverage_histogram, coverage_to_csv, default_buckets, export_sankey, summarize_records,
    trajectory_csv,
};
use mctm::synth::{recovery_report, PlantedModel, Scenario};
use mctm::Error;

use crate::args::{CorrelationSourceArg, CoverageArgs, EvalArgs, PhenotypesArgs, SummarizeArgs, SynthArgs, TrainArgs};
use crate::manifest::RunManifest;

pub const EXIT_OK: i32 = 0;
pub const EXIT_ARGS: i32 = 1;
pub const EXIT_IO: i32 = 2;
pub const EXIT_THRESHOLD: i32 = 3;
pub const EXIT_COMPAT: i32 = 4;

#[derive(Debug)]
pub enum Failure {
    Args(String),
    Core(Error),
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Args(_) => EXIT_ARGS,
            Failure::Core(e) => match e {
                Error::InvalidConfig(_) | Error::UnknownLabelType(_) => EXIT_ARGS,
                Error::FingerprintMismatch { .. } => EXIT_COMPAT,
                Error::LineSearch { .. } | Error::NonFinite(_) => EXIT_THRESHOLD,
                _ => EXIT_IO,
            },
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Args(m) => f.write_str(m),
            Failure::Core(e) => write!(f, "{e}"),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

type Outcome = Result<i32, Failure>;

fn create_out(dir: &Path) -> Result<(), Failure> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e).into())
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), Failure> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e).into())
}

fn csv_error(path: &Path, e: csv::Error) -> Failure {
    Error::io(path, std::io::Error::other(e)).into()
}

fn history_csv(history: &[f64], path: &Path) -> Result<(), Failure> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    w.write_record(["iteration", "objective", "relative_change"])
        .map_err(|e| csv_error(path, e))?;
    for (i, obj) in history.iter().enumerate() {
        let change = match i {
            0 => String::new(),
            _ => (((obj - history[i - 1]) / history[i - 1].abs().max(f64::MIN_POSITIVE)).abs()).to_string(),
        };
        w.write_record([i.to_string(), obj.to_string(), change])
            .map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e).into())
}

fn save_trained(model: &TrainedModel, out: &Path, manifest: &mut RunManifest) -> Result<(), Failure> {
    let model_path = out.join("model.json");
    save_model(model, &model_path)?;
    manifest.output("model", &model_path);
    let history_path = out.join("history.csv");
    history_csv(&model.history, &history_path)?;
    manifest.output("history", &history_path);
    manifest.converged = Some(model.converged);
    manifest.train_config = serde_json::to_value(&model.config).ok();
    Ok(())
}

pub fn train_cmd(a: &TrainArgs, threads: usize) -> Outcome {
    let cfg = a.em.train_config(a.k, a.seed, a.restarts);
    cfg.validate()?;
    let mut manifest = RunManifest::start("train", a, threads);
    manifest.seed = Some(a.seed);
    manifest.input("corpus", &a.corpus);
    let corpus = load_corpus(&a.corpus)?;
    info!(
        "training K={} on {} records, {} data types",
        cfg.k,
        corpus.num_records(),
        corpus.num_types()
    );
    create_out(&a.out)?;
    let model = train(&corpus, &cfg)?;
    save_trained(&model, &a.out, &mut manifest)?;
    let code = if model.converged {
        EXIT_OK
    } else {
        warn!("EM stopped after {} iterations without converging", cfg.max_em_iters);
        EXIT_THRESHOLD
    };
    manifest.finish(&a.out, code)?;
    Ok(code)
}

pub fn phenotypes_cmd(a: &PhenotypesArgs, threads: usize) -> Outcome {
    if !(0.0..=1.0).contains(&a.corr_threshold) {
        return Err(Failure::Args(format!(
            "--corr-threshold must lie in [0, 1], got {}",
            a.corr_threshold
        )));
    }
    let mut manifest = RunManifest::start("phenotypes", a, threads);
    manifest.input("model", &a.model);
    let model = load_model(&a.model)?;
    let label_type = match &a.label_type {
        Some(t) => t.clone(),
        None => model.vocabularies[0].type_name().to_string(),
    };
    let defs = extract_phenotypes(&model, a.top_n, &label_type)?;
    let source = match a.correlation_source {
        CorrelationSourceArg::Prior => CorrelationSource::Prior,
        CorrelationSourceArg::Empirical => CorrelationSource::Empirical,
    };
    let graph = correlation_graph_with(&model, a.corr_threshold, source)?;
    create_out(&a.out)?;

    let defs_path = a.out.join("phenotypes.json");
    write(
        &defs_path,
        serde_json::to_string_pretty(&defs).expect("serializes") + "\n",
    )?;
    manifest.output("phenotypes", &defs_path);
    let graph_path = a.out.join("graph.json");
    write(&graph_path, graph_to_json(&graph) + "\n")?;
    manifest.output("graph", &graph_path);

    let edges_path = a.out.join("edges.csv");
    let mut w = csv::Writer::from_path(&edges_path).map_err(|e| csv_error(&edges_path, e))?;
    w.write_record(["i", "j", "rho", "label_i", "label_j"])
        .map_err(|e| csv_error(&edges_path, e))?;
    for e in &graph.edges {
        w.write_record([
            e.i.to_string(),
            e.j.to_string(),
            e.rho.to_string(),
            defs[e.i].label.clone(),
            defs[e.j].label.clone(),
        ])
        .map_err(|err| csv_error(&edges_path, err))?;
    }
    w.flush().map_err(|e| Failure::from(Error::io(&edges_path, e)))?;
    manifest.output("edges", &edges_path);
    info!(
        "{} phenotypes, {} edges above {}",
        defs.len(),
        graph.edges.len(),
        a.corr_threshold
    );
    manifest.finish(&a.out, EXIT_OK)?;
    Ok(EXIT_OK)
}

/// File-name-safe form of a record id.
fn file_stem(id: &str) -> String {
    id.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '_' || c == '.' {
                c
            } else {
                '_'
            }
        })
        .collect()
}

pub fn summarize_cmd(a: &SummarizeArgs, threads: usize) -> Outcome {
    if a.top_n == 0 {
        return Err(Failure::Args("--top-n must be at least 1".into()));
    }
    let mut manifest = RunManifest::start("summarize", a, threads);
    manifest.input("model", &a.model);
    manifest.input("records", &a.record_file);
    let model = load_model(&a.model)?;
    let vocabularies = match &a.vocab {
        Some(path) => {
            manifest.input("vocab", path);
            let v = load_vocabularies(path)?;
            model.check_vocabularies(&v)?;
            v
        }
        None => model.vocabularies.clone(),
    };
    let segments = load_records(&a.record_file, &vocabularies)?;
    let trajectories = summarize_records(&segments, &model, a.top_n)?;
    create_out(&a.out)?;
    let mut used = HashSet::new();
    for t in &trajectories {
        let base = file_stem(&t.record_id);
        let mut stem = base.clone();
        let mut n = 1;
        while !used.insert(stem.clone()) {
            n += 1;
            stem = format!("{base}-{n}");
        }
        let csv_path = a.out.join(format!("{stem}.trajectory.csv"));
        write(&csv_path, trajectory_csv(t))?;
        let sankey_path = a.out.join(format!("{stem}.sankey.json"));
        export_sankey(t, &sankey_path)?;
        manifest.output(&format!("{}:trajectory", t.record_id), &csv_path);
        manifest.output(&format!("{}:sankey", t.record_id), &sankey_path);
    }
    info!("summarized {} records", trajectories.len());
    manifest.finish(&a.out, EXIT_OK)?;
    Ok(EXIT_OK)
}

fn load_scenario(preset: &Option<String>, scenario: &Option<PathBuf>) -> Result<Scenario, Failure> {
    match (preset, scenario) {
        (Some(name), _) => Ok(Scenario::preset(name)?),
        (None, Some(path)) => Ok(Scenario::from_file(path)?),
        (None, None) => Err(Failure::Args("a scenario is required".into())),
    }
}

/// Wraps planted parameters as a model file so they can be reloaded as truth.
pub fn eval_cmd(a: &EvalArgs, threads: usize) -> Outcome {
    if a.tv_threshold.is_nan() || a.tv_threshold < 0.0 {
        return Err(Failure::Args("--tv-threshold must be non-negative".into()));
    }
    let mut manifest = RunManifest::start("eval", a, threads);
    manifest.seed = Some(a.seed);
    let (corpus, planted) = match &a.truth {
        Some(truth_path) => {
            let corpus_path = a.corpus.as_ref().expect("clap enforces --corpus with --truth");
            manifest.input("truth", truth_path);
            manifest.input("corpus", corpus_path);
            let truth = load_model(truth_path)?;
            let corpus = load_corpus(corpus_path)?;
            truth.check_vocabularies(corpus.vocabularies())?;
            let planted = PlantedModel {
                params: truth.params,
                per_record_nu: Vec::new(),
                per_token_assignments: None,
                seed: truth.config.seed,
            };
            (corpus, planted)
        }
        None => {
            let scenario = load_scenario(&a.preset, &a.scenario)?;
            if let Some(p) = &a.scenario {
                manifest.input("scenario", p);
            }
            scenario.sample()?
        }
    };
    let k = a.k.unwrap_or(planted.params.k());
    if k != planted.params.k() {
        return Err(Failure::Args(format!(
            "--k {k} differs from the {} planted phenotypes",
            planted.params.k()
        )));
    }
    let cfg = a.em.train_config(k, a.seed, a.restarts);
    cfg.validate()?;
    create_out(&a.out)?;
    if a.truth.is_none() {
        let corpus_dir = a.out.join("corpus");
        save_corpus(&corpus, &corpus_dir)?;
        manifest.output("corpus", &corpus_dir);
        let truth_path = a.out.join("truth.json");
        save_model(&planted.to_trained_model(&corpus), &truth_path)?;
        manifest.output("truth", &truth_path);
    }
    info!("training K={k} on {} synthetic records", corpus.num_records());
    let model = train(&corpus, &cfg)?;
    save_trained(&model, &a.out, &mut manifest)?;
    let report = recovery_report(&model.params, &planted, a.corr_threshold)?;
    let report_path = a.out.join("recovery.json");
    write(
        &report_path,
        serde_json::to_string_pretty(&report).expect("serializes") + "\n",
    )?;
    manifest.output("recovery", &report_path);
    let code = if report.mean_tv <= a.tv_threshold {
        info!("mean TV {:.4} within threshold {}", report.mean_tv, a.tv_threshold);
        EXIT_OK
    } else {
        warn!("mean TV {:.4} exceeds threshold {}", report.mean_tv, a.tv_threshold);
        EXIT_THRESHOLD
    };
    manifest.finish(&a.out, code)?;
    Ok(code)
}

pub fn coverage_cmd(a: &CoverageArgs, threads: usize) -> Outcome {
    if !(a.mass > 0.0 && a.mass <= 1.0) {
        return Err(Failure::Args(format!("--mass must lie in (0, 1], got {}", a.mass)));
    }
    let mut manifest = RunManifest::start("coverage", a, threads);
    manifest.input("model", &a.model);
    let model = load_model(&a.model)?;
    let histogram = coverage_histogram(&model, a.mass, &default_buckets())?;
    create_out(&a.out)?;
    let hist_path = a.out.join("coverage.csv");
    write(&hist_path, coverage_to_csv(&histogram))?;
    manifest.output("histogram", &hist_path);

    let counts_path = a.out.join("coverage_counts.csv");
    let mut w = csv::Writer::from_path(&counts_path).map_err(|e| csv_error(&counts_path, e))?;
    w.write_record(["record_id", "time_bin", "count"])
        .map_err(|e| csv_error(&counts_path, e))?;
    for fit in &model.posteriors {
        let count = coverage_count(fit.proportions().as_slice(), a.mass)?;
        w.write_record([
            fit.record_id.clone(),
            fit.time_bin.clone().unwrap_or_default(),
            count.to_string(),
        ])
        .map_err(|e| csv_error(&counts_path, e))?;
    }
    w.flush().map_err(|e| Failure::from(Error::io(&counts_path, e)))?;
    manifest.output("counts", &counts_path);
    manifest.finish(&a.out, EXIT_OK)?;
    Ok(EXIT_OK)
}

pub fn synth_cmd(a: &SynthArgs, threads: usize) -> Outcome {
    let mut scenario = load_scenario(&a.preset, &a.scenario)?;
    if let Some(seed) = a.seed {
        scenario.seed = seed;
    }
    if let Some(n) = a.records {
        scenario.num_records = n;
    }
    scenario.validate()?;
    let mut manifest = RunManifest::start("synth", a, threads);
    manifest.seed = Some(scenario.seed);
    let (corpus, planted) = scenario.sample()?;
    save_corpus(&corpus, &a.out)?;
    manifest.output("corpus", &a.out);
    let truth_path = a.out.join("truth.json");
    save_model(&planted.to_trained_model(&corpus), &truth_path)?;
    manifest.output("truth", &truth_path);
    let scenario_path = a.out.join("scenario.json");
    write(
        &scenario_path,
        serde_json::to_string_pretty(&scenario).expect("serializes") + "\n",
    )?;
    manifest.output("scenario", &scenario_path);
    info!("wrote {} records to {}", corpus.num_records(), a.out.display());
    manifest.finish(&a.out, EXIT_OK)?;
    Ok(EXIT_OK)
}
