//! Heterogeneous count corpora.
//!
//! A corpus holds `M` per-type vocabularies and `D` records. Each record
//! carries one sparse bag of token counts per data type. On disk a corpus
//! is a directory with two files:
//!
//! * `vocab.json`: `{"<type_name>": ["token", ...], ...}`; object order fixes
//!   the type order.
//! * `records.jsonl`: one `{"id", "time_bin"?, "bags": {"<type>": {"<token>": count}}}`
//!   object per line.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const VOCAB_FILE: &str = "vocab.json";
pub const RECORDS_FILE: &str = "records.jsonl";

/// Ordered, duplicate-free token list for one data type.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    type_name: String,
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl PartialEq for Vocabulary {
    fn eq(&self, other: &Self) -> bool {
        self.type_name == other.type_name && self.tokens == other.tokens
    }
}

impl Vocabulary {
    pub fn new(type_name: impl Into<String>, tokens: Vec<String>) -> Result<Self> {
        let type_name = type_name.into();
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, token) in tokens.iter().enumerate() {
            if index.insert(token.clone(), i).is_some() {
                return Err(Error::InvalidVocabulary(format!(
                    "duplicate token {token:?} in type {type_name:?}"
                )));
            }
        }
        Ok(Self {
            type_name,
            tokens,
            index,
        })
    }

    pub fn type_name(&self) -> &str {
        &self.type_name
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    pub fn lookup(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, index: usize) -> Option<&str> {
        self.tokens.get(index).map(String::as_str)
    }
}

/// Sparse token counts for one data type: token index to count (always ≥ 1).
pub type Bag = BTreeMap<usize, u64>;

/// One record (or one time segment of a record) as `M` parallel bags.
#[derive(Debug, Clone, PartialEq)]
pub struct RecordBags {
    pub record_id: String,
    pub time_bin: Option<String>,
    pub bags: Vec<Bag>,
}

impl RecordBags {
    pub fn new(record_id: impl Into<String>, time_bin: Option<String>, bags: Vec<Bag>) -> Self {
        let mut bags = bags;
        for bag in &mut bags {
            bag.retain(|_, c| *c > 0);
        }
        Self {
            record_id: record_id.into(),
            time_bin,
            bags,
        }
    }

    pub fn empty(record_id: impl Into<String>, num_types: usize) -> Self {
        Self::new(record_id, None, vec![Bag::new(); num_types])
    }

    pub fn num_types(&self) -> usize {
        self.bags.len()
    }

    pub fn type_total(&self, m: usize) -> u64 {
        self.bags[m].values().sum()
    }

    pub fn total_tokens(&self) -> u64 {
        self.bags.iter().flat_map(|b| b.values()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.bags.iter().all(|b| b.is_empty())
    }

    /// Checks the record against per-type vocabulary sizes.
    pub fn validate(&self, vocab_sizes: &[usize]) -> Result<()> {
        if self.bags.len() != vocab_sizes.len() {
            return Err(Error::Dimension(format!(
                "record {} has {} bags, expected {}",
                self.record_id,
                self.bags.len(),
                vocab_sizes.len()
            )));
        }
        for (m, (bag, &size)) in self.bags.iter().zip(vocab_sizes).enumerate() {
            if let Some((&index, _)) = bag.iter().find(|(&i, _)| i >= size) {
                return Err(Error::TokenOutOfRange {
                    type_index: m,
                    index,
                    size,
                });
            }
            if bag.values().any(|&c| c == 0) {
                return Err(Error::Invalid(format!(
                    "record {}: zero count stored in bag {m}",
                    self.record_id
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    vocabularies: Vec<Vocabulary>,
    records: Vec<RecordBags>,
}

impl Corpus {
    pub fn new(vocabularies: Vec<Vocabulary>, records: Vec<RecordBags>) -> Result<Self> {
        if vocabularies.is_empty() {
            return Err(Error::InvalidVocabulary("at least one data type is required".into()));
        }
        let mut names = HashSet::new();
        for v in &vocabularies {
            if !names.insert(v.type_name()) {
                return Err(Error::InvalidVocabulary(format!(
                    "duplicate type name {:?}",
                    v.type_name()
                )));
            }
        }
        if records.is_empty() {
            return Err(Error::NoRecords(PathBuf::from("<memory>")));
        }
        let sizes: Vec<usize> = vocabularies.iter().map(Vocabulary::size).collect();
        let mut seen = HashSet::new();
        for r in &records {
            r.validate(&sizes)?;
            if !seen.insert((r.record_id.as_str(), r.time_bin.as_deref())) {
                return Err(Error::DuplicateRecord {
                    record: r.record_id.clone(),
                    time_bin: r.time_bin.clone(),
                });
            }
        }
        Ok(Self { vocabularies, records })
    }

    pub fn vocabularies(&self) -> &[Vocabulary] {
        &self.vocabularies
    }

    pub fn records(&self) -> &[RecordBags] {
        &self.records
    }

    pub fn num_types(&self) -> usize {
        self.vocabularies.len()
    }

    pub fn num_records(&self) -> usize {
        self.records.len()
    }

    pub fn vocab_sizes(&self) -> Vec<usize> {
        vocab_sizes(&self.vocabularies)
    }

    pub fn fingerprint(&self) -> String {
        fingerprint(&self.vocabularies)
    }

    pub fn type_index(&self, type_name: &str) -> Option<usize> {
        type_index(&self.vocabularies, type_name)
    }
}

pub fn vocab_sizes(vocabularies: &[Vocabulary]) -> Vec<usize> {
    vocabularies.iter().map(Vocabulary::size).collect()
}

pub fn type_index(vocabularies: &[Vocabulary], type_name: &str) -> Option<usize> {
    vocabularies.iter().position(|v| v.type_name() == type_name)
}

/// SHA-256 over type names and tokens, in order. Binds a model to the exact
/// vocabularies it was trained on.
pub fn fingerprint(vocabularies: &[Vocabulary]) -> String {
    let mut hasher = Sha256::new();
    for v in vocabularies {
        hasher.update(b"T");
        hasher.update((v.type_name.len() as u64).to_le_bytes());
        hasher.update(v.type_name.as_bytes());
        hasher.update((v.tokens.len() as u64).to_le_bytes());
        for t in &v.tokens {
            hasher.update((t.len() as u64).to_le_bytes());
            hasher.update(t.as_bytes());
        }
    }
    hex::encode(hasher.finalize())
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRecord {
    id: String,
    #[serde(default)]
    time_bin: Option<String>,
    #[serde(default)]
    bags: IndexMap<String, IndexMap<String, u64>>,
}

#[derive(Serialize)]
struct RawRecordOut<'a> {
    id: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    time_bin: Option<&'a str>,
    bags: IndexMap<&'a str, IndexMap<&'a str, u64>>,
}

pub fn load_vocabularies(path: &Path) -> Result<Vec<Vocabulary>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let raw: IndexMap<String, Vec<String>> = serde_json::from_str(&text).map_err(|e| Error::json(path, 0, &e))?;
    if raw.is_empty() {
        return Err(Error::InvalidVocabulary(format!(
            "{} defines no data types",
            path.display()
        )));
    }
    raw.into_iter()
        .map(|(name, tokens)| Vocabulary::new(name, tokens))
        .collect()
}

/// Reads a records JSONL file, resolving token strings against `vocabularies`.
///
/// Types missing from a line are empty bags; zero counts are dropped; blank
/// lines are skipped. Duplicate `(id, time_bin)` pairs are rejected.
pub fn load_records(path: &Path, vocabularies: &[Vocabulary]) -> Result<Vec<RecordBags>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);
    let mut records = Vec::new();
    let mut seen: HashSet<(String, Option<String>)> = HashSet::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawRecord = serde_json::from_str(&line).map_err(|e| Error::json(path, lineno, &e))?;
        let record = resolve_record(raw, vocabularies)?;
        if !seen.insert((record.record_id.clone(), record.time_bin.clone())) {
            return Err(Error::DuplicateRecord {
                record: record.record_id,
                time_bin: record.time_bin,
            });
        }
        records.push(record);
    }
    if records.is_empty() {
        return Err(Error::NoRecords(path.to_path_buf()));
    }
    Ok(records)
}

fn resolve_record(raw: RawRecord, vocabularies: &[Vocabulary]) -> Result<RecordBags> {
    let mut bags = vec![Bag::new(); vocabularies.len()];
    for (type_name, counts) in raw.bags {
        let m = type_index(vocabularies, &type_name).ok_or_else(|| Error::UnknownType {
            record: raw.id.clone(),
            type_name: type_name.clone(),
        })?;
        let vocab = &vocabularies[m];
        for (token, count) in counts {
            let v = vocab.lookup(&token).ok_or_else(|| Error::UnknownToken {
                record: raw.id.clone(),
                type_name: type_name.clone(),
                token: token.clone(),
            })?;
            if count > 0 {
                *bags[m].entry(v).or_insert(0) += count;
            }
        }
    }
    Ok(RecordBags::new(raw.id, raw.time_bin, bags))
}

pub fn load_corpus_files(vocab_path: &Path, records_path: &Path) -> Result<Corpus> {
    let vocabularies = load_vocabularies(vocab_path)?;
    let records = load_records(records_path, &vocabularies)?;
    Corpus::new(vocabularies, records)
}

/// Loads a corpus directory containing `vocab.json` and `records.jsonl`.
pub fn load_corpus(dir: &Path) -> Result<Corpus> {
    if !dir.exists() {
        return Err(Error::io(
            dir,
            std::io::Error::new(std::io::ErrorKind::NotFound, "corpus directory not found"),
        ));
    }
    load_corpus_files(&dir.join(VOCAB_FILE), &dir.join(RECORDS_FILE))
}

pub fn save_vocabularies(vocabularies: &[Vocabulary], path: &Path) -> Result<()> {
    let map: IndexMap<&str, &[String]> = vocabularies.iter().map(|v| (v.type_name(), v.tokens())).collect();
    let text = serde_json::to_string_pretty(&map).expect("vocabulary serializes");
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn save_records(records: &[RecordBags], vocabularies: &[Vocabulary], path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for record in records {
        let bags = vocabularies
            .iter()
            .zip(&record.bags)
            .map(|(vocab, bag)| {
                let counts = bag.iter().map(|(&v, &c)| (vocab.tokens()[v].as_str(), c)).collect();
                (vocab.type_name(), counts)
            })
            .collect();
        let raw = RawRecordOut {
            id: &record.record_id,
            time_bin: record.time_bin.as_deref(),
            bags,
        };
        serde_json::to_writer(&mut out, &raw).expect("record serializes");
        out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

/// Writes `vocab.json` and `records.jsonl` into `dir`, creating it if needed.
pub fn save_corpus(corpus: &Corpus, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    save_vocabularies(corpus.vocabularies(), &dir.join(VOCAB_FILE))?;
    save_records(corpus.records(), corpus.vocabularies(), &dir.join(RECORDS_FILE))
}
