//! Problem records, dataset manifests and their JSON Lines persistence.
//!
//! A dataset file holds one [`ProblemRecord`] per line and nothing else.
//! Manifest-level metadata (name, config fingerprint, lineage) lives in a
//! sidecar `<file>.meta.json` that is written only when there is something
//! to record.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::topics;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("integrity error: {0}")]
    Integrity(String),
}

impl CorpusError {
    fn io(path: &Path, source: std::io::Error) -> Self {
        CorpusError::Io { path: path.to_path_buf(), source }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    #[default]
    Seed,
    MutationEasy,
    MutationMedium,
    MutationHard,
    Crossover,
    Postprocessed,
}

impl Provenance {
    pub fn is_mutation(self) -> bool {
        matches!(
            self,
            Provenance::MutationEasy | Provenance::MutationMedium | Provenance::MutationHard
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Status {
    #[default]
    Unverified,
    Passing,
    Failing,
    Erroring,
    Unparsable,
}

/// One benchmark problem.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProblemRecord {
    pub id: String,
    pub statement: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub solution: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tests: Option<String>,
    #[serde(default)]
    pub provenance: Provenance,
    #[serde(default)]
    pub parents: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub colony: Option<u32>,
    #[serde(default)]
    pub iteration: u32,
    #[serde(default)]
    pub status: Status,
    #[serde(default)]
    pub topics: Vec<String>,
    /// Number of `assert` statements in `tests`.
    #[serde(default)]
    pub test_count: u32,
    /// Fields from imported datasets that have no slot above.
    #[serde(flatten)]
    pub extra: BTreeMap<String, Value>,
}

impl ProblemRecord {
    pub fn seed(id: impl Into<String>, statement: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            statement: statement.into(),
            solution: None,
            tests: None,
            provenance: Provenance::Seed,
            parents: Vec::new(),
            colony: None,
            iteration: 0,
            status: Status::Unverified,
            topics: Vec::new(),
            test_count: 0,
            extra: BTreeMap::new(),
        }
    }

    pub fn derived(
        id: impl Into<String>,
        statement: impl Into<String>,
        provenance: Provenance,
        parents: Vec<String>,
    ) -> Self {
        Self {
            provenance,
            parents,
            ..Self::seed(id, statement)
        }
    }

    /// Record-local invariants.
    pub fn validate(&self) -> Result<(), CorpusError> {
        let fail = |m: String| Err(CorpusError::Integrity(format!("record {}: {m}", self.id)));
        if self.id.is_empty() {
            return Err(CorpusError::Integrity("record with empty id".into()));
        }
        match self.provenance {
            Provenance::Crossover if self.parents.len() < 2 => {
                return fail(format!("crossover needs >= 2 parents, has {}", self.parents.len()))
            }
            p if p.is_mutation() && self.parents.len() != 1 => {
                return fail(format!("mutation needs exactly 1 parent, has {}", self.parents.len()))
            }
            Provenance::Postprocessed if self.parents.len() != 1 => {
                return fail("postprocessed record needs exactly 1 parent".into())
            }
            _ => {}
        }
        if self.status == Status::Passing && (self.solution.is_none() || self.tests.is_none()) {
            return fail("passing status without solution and tests".into());
        }
        if self.topics.len() > topics::MAX_TOPICS {
            return fail(format!("{} topics exceeds the limit", self.topics.len()));
        }
        if let Some(t) = self.topics.iter().find(|t| !topics::is_bank_topic(t)) {
            return fail(format!("topic {t:?} is not in the topic bank"));
        }
        Ok(())
    }
}

/// Metadata stored next to a dataset file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
struct Sidecar {
    name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    config_fingerprint: Option<String>,
    #[serde(default)]
    lineage: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct DatasetManifest {
    pub name: String,
    pub records: Vec<ProblemRecord>,
    pub config_fingerprint: Option<String>,
    /// Names of the seed datasets this one was generated from.
    pub lineage: Vec<String>,
}

impl DatasetManifest {
    pub fn new(name: impl Into<String>, records: Vec<ProblemRecord>) -> Self {
        Self {
            name: name.into(),
            records,
            config_fingerprint: None,
            lineage: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&ProblemRecord> {
        self.records.iter().find(|r| r.id == id)
    }

    pub fn validate(&self) -> Result<(), CorpusError> {
        let mut seen = HashSet::with_capacity(self.records.len());
        for r in &self.records {
            if !seen.insert(r.id.as_str()) {
                return Err(CorpusError::Integrity(format!("duplicate id {:?}", r.id)));
            }
            r.validate()?;
        }
        if self.config_fingerprint.is_some() && self.lineage.is_empty() {
            return Err(CorpusError::Integrity(format!(
                "generated dataset {:?} has no lineage",
                self.name
            )));
        }
        Ok(())
    }

    /// Records with the given status, in order.
    pub fn with_status(&self, status: Status) -> impl Iterator<Item = &ProblemRecord> {
        self.records.iter().filter(move |r| r.status == status)
    }
}

fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta.json");
    PathBuf::from(s)
}

fn default_name(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

/// Parse JSONL records without validating dataset-level invariants.
fn read_records(path: &Path) -> Result<Vec<ProblemRecord>, CorpusError> {
    let file = fs::File::open(path).map_err(|e| CorpusError::io(path, e))?;
    let mut records = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| CorpusError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ProblemRecord = serde_json::from_str(&line).map_err(|e| CorpusError::Parse {
            path: path.to_path_buf(),
            line: idx + 1,
            message: e.to_string(),
        })?;
        records.push(rec);
    }
    Ok(records)
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<DatasetManifest, CorpusError> {
    let path = path.as_ref();
    let records = read_records(path)?;
    let meta_path = sidecar_path(path);
    let meta = if meta_path.exists() {
        let text = fs::read_to_string(&meta_path).map_err(|e| CorpusError::io(&meta_path, e))?;
        serde_json::from_str(&text).map_err(|e| CorpusError::Parse {
            path: meta_path.clone(),
            line: 1,
            message: e.to_string(),
        })?
    } else {
        Sidecar {
            name: default_name(path),
            ..Sidecar::default()
        }
    };
    let manifest = DatasetManifest {
        name: meta.name,
        records,
        config_fingerprint: meta.config_fingerprint,
        lineage: meta.lineage,
    };
    manifest.validate()?;
    Ok(manifest)
}

/// Serialize a manifest's records as JSON Lines.
pub fn to_jsonl(manifest: &DatasetManifest) -> String {
    let mut out = String::new();
    for r in &manifest.records {
        out.push_str(&serde_json::to_string(r).expect("record serialization is infallible"));
        out.push('\n');
    }
    out
}

pub fn save_dataset(manifest: &DatasetManifest, path: impl AsRef<Path>) -> Result<(), CorpusError> {
    let path = path.as_ref();
    manifest.validate()?;
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| CorpusError::io(parent, e))?;
    }
    let file = fs::File::create(path).map_err(|e| CorpusError::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(to_jsonl(manifest).as_bytes())
        .and_then(|_| w.flush())
        .map_err(|e| CorpusError::io(path, e))?;

    let meta_path = sidecar_path(path);
    let needs_sidecar = manifest.config_fingerprint.is_some()
        || !manifest.lineage.is_empty()
        || manifest.name != default_name(path);
    if needs_sidecar {
        let meta = Sidecar {
            name: manifest.name.clone(),
            config_fingerprint: manifest.config_fingerprint.clone(),
            lineage: manifest.lineage.clone(),
        };
        let text = serde_json::to_string_pretty(&meta).expect("sidecar serialization is infallible");
        fs::write(&meta_path, text + "\n").map_err(|e| CorpusError::io(&meta_path, e))?;
    } else if meta_path.exists() {
        fs::remove_file(&meta_path).map_err(|e| CorpusError::io(&meta_path, e))?;
    }
    Ok(())
}

/// Union of several manifests in order.
///
/// The first occurrence of an id keeps it; later collisions are renamed
/// `<id>~<manifest index>` (with a numeric suffix if that is taken too), and
/// parent references inside the same manifest follow the rename. Duplicate
/// content is kept; deduplication is a separate pass.
pub fn merge_datasets(manifests: &[DatasetManifest]) -> DatasetManifest {
    let mut used: HashSet<String> = HashSet::new();
    let mut records = Vec::new();
    for (mi, m) in manifests.iter().enumerate() {
        let mut renames: HashMap<String, String> = HashMap::new();
        for r in &m.records {
            if used.contains(&r.id) {
                let mut candidate = format!("{}~{}", r.id, mi);
                let mut n = 1;
                while used.contains(&candidate) {
                    candidate = format!("{}~{}.{}", r.id, mi, n);
                    n += 1;
                }
                renames.insert(r.id.clone(), candidate);
            } else {
                renames.insert(r.id.clone(), r.id.clone());
            }
            used.insert(renames[&r.id].clone());
        }
        for r in &m.records {
            let mut r = r.clone();
            r.id = renames[&r.id].clone();
            for p in &mut r.parents {
                if let Some(new) = renames.get(p) {
                    *p = new.clone();
                }
            }
            records.push(r);
        }
    }

    let mut lineage: Vec<String> = Vec::new();
    for m in manifests {
        for l in &m.lineage {
            if !lineage.contains(l) {
                lineage.push(l.clone());
            }
        }
    }
    let fingerprint = match manifests.first() {
        Some(first) if manifests.iter().all(|m| m.config_fingerprint == first.config_fingerprint) => {
            first.config_fingerprint.clone()
        }
        _ => None,
    };
    DatasetManifest {
        name: manifests
            .iter()
            .map(|m| m.name.as_str())
            .collect::<Vec<_>>()
            .join("+"),
        records,
        config_fingerprint: fingerprint,
        lineage,
    }
}

/// Check that every non-seed record's parent chain ends at seed records.
///
/// Parents are resolved in `manifest` and then in `pools`, in order.
pub fn check_lineage(manifest: &DatasetManifest, pools: &[&DatasetManifest]) -> Result<(), CorpusError> {
    let mut index: HashMap<&str, &ProblemRecord> = HashMap::new();
    for m in pools.iter().rev().copied().chain(std::iter::once(manifest)) {
        for r in &m.records {
            index.insert(r.id.as_str(), r);
        }
    }
    for r in &manifest.records {
        let mut stack: Vec<&ProblemRecord> = vec![r];
        let mut visited: HashSet<&str> = HashSet::new();
        while let Some(cur) = stack.pop() {
            if !visited.insert(cur.id.as_str()) {
                continue;
            }
            if cur.provenance == Provenance::Seed {
                continue;
            }
            if cur.parents.is_empty() {
                return Err(CorpusError::Integrity(format!(
                    "record {} has no parents but provenance {:?}",
                    cur.id, cur.provenance
                )));
            }
            for p in &cur.parents {
                match index.get(p.as_str()) {
                    Some(parent) => stack.push(parent),
                    None => {
                        return Err(CorpusError::Integrity(format!(
                            "record {} references unknown parent {p}",
                            cur.id
                        )))
                    }
                }
            }
        }
    }
    Ok(())
}

/// Field mapping for importing external seed datasets.
#[derive(Debug, Clone)]
pub struct ImportAdapter {
    pub id_field: Option<String>,
    pub id_prefix: String,
    pub statement_field: String,
    pub solution_field: Option<String>,
    pub tests_field: Option<String>,
}

impl ImportAdapter {
    /// MBPP-style rows: `text`, `code`, `test_list`, `task_id`.
    pub fn mbpp() -> Self {
        Self {
            id_field: Some("task_id".into()),
            id_prefix: "mbpp-".into(),
            statement_field: "text".into(),
            solution_field: Some("code".into()),
            tests_field: Some("test_list".into()),
        }
    }

    /// Convert one external JSON object. `line` is used for ids when the row has none.
    pub fn convert(&self, row: &Value, line: usize) -> Result<ProblemRecord, String> {
        let obj = row.as_object().ok_or("row is not a JSON object")?;
        let mut extra: BTreeMap<String, Value> = obj.iter().map(|(k, v)| (k.clone(), v.clone())).collect();

        let id_value = self.id_field.as_ref().and_then(|f| extra.remove(f));
        let id = match id_value {
            Some(Value::String(s)) => format!("{}{}", self.id_prefix, s),
            Some(Value::Number(n)) => format!("{}{}", self.id_prefix, n),
            Some(other) => return Err(format!("unsupported id value {other}")),
            None => format!("{}{}", self.id_prefix, line),
        };
        let statement = match extra.remove(&self.statement_field) {
            Some(Value::String(s)) if !s.trim().is_empty() => s,
            _ => return Err(format!("missing statement field {:?}", self.statement_field)),
        };
        let solution = match self.solution_field.as_ref().and_then(|f| extra.remove(f)) {
            Some(Value::String(s)) => Some(s),
            _ => None,
        };
        let tests = match self.tests_field.as_ref().and_then(|f| extra.remove(f)) {
            Some(Value::String(s)) => Some(s),
            Some(Value::Array(items)) => {
                let asserts: Vec<&str> = items.iter().filter_map(Value::as_str).collect();
                Some(wrap_assert_list(&asserts))
            }
            _ => None,
        };
        let mut rec = ProblemRecord::seed(id, statement);
        rec.solution = solution;
        rec.test_count = tests
            .as_deref()
            .map(|t| crate::pytokens::count_asserts(t).unwrap_or(0) as u32)
            .unwrap_or(0);
        rec.tests = tests;
        // keep imported fields from colliding with record fields on save
        let reserved = [
            "id", "statement", "solution", "tests", "provenance", "parents", "colony",
            "iteration", "status", "topics", "test_count",
        ];
        rec.extra = extra
            .into_iter()
            .map(|(k, v)| if reserved.contains(&k.as_str()) { (format!("source_{k}"), v) } else { (k, v) })
            .collect();
        Ok(rec)
    }

    pub fn import(&self, path: impl AsRef<Path>, name: Option<&str>) -> Result<DatasetManifest, CorpusError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| CorpusError::io(path, e))?;
        let mut records = Vec::new();
        for (idx, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let parse_err = |message: String| CorpusError::Parse {
                path: path.to_path_buf(),
                line: idx + 1,
                message,
            };
            let row: Value = serde_json::from_str(line).map_err(|e| parse_err(e.to_string()))?;
            records.push(self.convert(&row, idx + 1).map_err(parse_err)?);
        }
        let manifest = DatasetManifest::new(name.map(str::to_owned).unwrap_or_else(|| default_name(path)), records);
        manifest.validate()?;
        Ok(manifest)
    }
}

/// Wrap bare `assert` lines (MBPP style) into a single pytest function.
pub fn wrap_assert_list(asserts: &[&str]) -> String {
    let mut s = String::from("from solution import *\n\n\ndef test_reference():\n");
    if asserts.is_empty() {
        s.push_str("    pass\n");
    }
    for a in asserts {
        s.push_str("    ");
        s.push_str(a.trim());
        s.push('\n');
    }
    s
}
