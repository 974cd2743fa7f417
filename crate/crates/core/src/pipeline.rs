//! End-to-end generation: evolve (with in-loop verification), merge and
//! dedup, filter to passing problems, postprocess.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::PipelineConfig;
use crate::corpus::{save_dataset, CorpusError, DatasetManifest, ProblemRecord, Status};
use crate::dedup::{removal_log_jsonl, RemovalEntry};
use crate::embedding::EmbeddingProvider;
use crate::evolve::{run_generation, ColonyReport, Evolution, EvolveError};
use crate::gateway::{Gateway, UsageTotals};
use crate::postprocess::{postprocess_manifest, write_topic_csv, PostprocessReport, PostprocessSettings};
use crate::sandbox::Sandbox;
use crate::verify::{category_counts, outcome_log_jsonl, verify_all, FeedbackSettings, VerificationOutcome};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Evolve(#[from] EvolveError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error("{path}: {message}")]
    Io { path: PathBuf, message: String },
}

/// External collaborators of a run.
pub struct Services<'a> {
    pub gateway: &'a Gateway,
    pub sandbox: &'a dyn Sandbox,
    pub embedder: Option<Arc<dyn EmbeddingProvider>>,
    pub checkpoint_dir: Option<PathBuf>,
}

/// Counts in the sense of the summary table: `generated` problems survive
/// merge and dedup, `filtered` of them fail verification, and averages are
/// taken over the passing problems that form the final dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub dataset: String,
    pub seed_dataset: String,
    pub config_fingerprint: String,
    pub pre_dedup: usize,
    pub dedup_removed: usize,
    pub generated: usize,
    pub passing: usize,
    pub filtered: usize,
    pub avg_tests: f64,
    /// Mean line coverage over passing problems with a measurement.
    pub coverage: Option<f64>,
    pub categories: BTreeMap<String, usize>,
    pub unverified: usize,
    pub complete: bool,
    pub postprocess: PostprocessReport,
    pub colonies: Vec<ColonyReport>,
    pub usage: UsageTotals,
}

impl RunReport {
    /// The count identities every report must satisfy.
    pub fn check_ledger(&self) -> Result<(), String> {
        if self.filtered != self.generated - self.passing {
            return Err(format!("filtered {} != generated {} - passing {}", self.filtered, self.generated, self.passing));
        }
        if self.pre_dedup != self.generated + self.dedup_removed {
            return Err(format!("pre-dedup {} != generated {} + removed {}", self.pre_dedup, self.generated, self.dedup_removed));
        }
        let categorized: usize = self.categories.values().sum();
        if categorized + self.unverified != self.generated {
            return Err(format!("{categorized} categorized + {} unverified != generated {}", self.unverified, self.generated));
        }
        if self.categories.get("passing").copied().unwrap_or(0) != self.passing {
            return Err("passing count disagrees with categories".into());
        }
        Ok(())
    }
}

pub struct PipelineOutput {
    /// Passing, postprocessed problems.
    pub final_manifest: DatasetManifest,
    /// Every merged and deduplicated problem with its verification status.
    pub prefilter_manifest: DatasetManifest,
    pub outcomes: Vec<VerificationOutcome>,
    pub removed: Vec<RemovalEntry>,
    pub report: RunReport,
}

pub fn generate(config: &PipelineConfig, seeds: &DatasetManifest, services: &Services<'_>) -> Result<PipelineOutput, PipelineError> {
    let fingerprint = config.fingerprint();
    let settings = FeedbackSettings {
        model_id: config.verify_model(),
        iterations: config.evolve.feedback_iterations,
        timeout_s: config.verify.timeout_s,
    };
    let outcomes: Mutex<Vec<VerificationOutcome>> = Mutex::new(Vec::new());
    let verifier = |records: Vec<ProblemRecord>| {
        let batch = verify_all(services.gateway, services.sandbox, records, &settings);
        for (id, e) in &batch.deferred {
            log::warn!("verification of {id} deferred: {e}");
        }
        outcomes.lock().expect("outcome lock").extend(batch.outcomes);
        batch.records
    };
    let ctx = Evolution {
        gateway: services.gateway,
        embedder: services.embedder.clone(),
        verifier: Some(&verifier),
        checkpoint_dir: services.checkpoint_dir.clone(),
        fingerprint: Some(fingerprint.clone()),
    };
    let run = run_generation(&config.evolve, seeds, &ctx)?;
    let mut prefilter = run.manifest;
    prefilter.name = format!("{}-prefilter", config.evolve.name);
    let mut outcomes = outcomes.into_inner().expect("outcome lock");

    // one more pass for problems whose verification was deferred
    let pending: Vec<ProblemRecord> = prefilter.records.iter().filter(|r| r.status == Status::Unverified).cloned().collect();
    if !pending.is_empty() {
        let batch = verify_all(services.gateway, services.sandbox, pending, &settings);
        outcomes.extend(batch.outcomes);
        let redone: BTreeMap<String, ProblemRecord> = batch.records.into_iter().map(|r| (r.id.clone(), r)).collect();
        for r in &mut prefilter.records {
            if let Some(v) = redone.get(&r.id) {
                *r = v.clone();
            }
        }
    }
    let kept: HashSet<&str> = prefilter.records.iter().map(|r| r.id.as_str()).collect();
    outcomes.retain(|o| kept.contains(o.problem_id.as_str()));
    outcomes.sort_by(|a, b| a.problem_id.cmp(&b.problem_id));

    let passing = DatasetManifest {
        name: config.evolve.name.clone(),
        records: prefilter.records.iter().filter(|r| r.status == Status::Passing).cloned().collect(),
        config_fingerprint: Some(fingerprint.clone()),
        lineage: vec![seeds.name.clone()],
    };
    let pp_settings = PostprocessSettings {
        rephrase_model: config.rephrase_model(),
        topic_model: config.postprocess.topic_model.clone(),
        rephrase: config.postprocess.rephrase,
        label: config.postprocess.label_topics,
        timeout_s: config.verify.timeout_s,
    };
    let (final_manifest, pp_report) = postprocess_manifest(services.gateway, Some(services.sandbox), &passing, &pp_settings);

    let generated = prefilter.len();
    let n_passing = passing.len();
    let avg_tests = if n_passing == 0 {
        0.0
    } else {
        passing.records.iter().map(|r| f64::from(r.test_count)).sum::<f64>() / n_passing as f64
    };
    let passing_ids: HashSet<&str> = passing.records.iter().map(|r| r.id.as_str()).collect();
    let coverages: Vec<f64> = outcomes
        .iter()
        .filter(|o| passing_ids.contains(o.problem_id.as_str()))
        .filter_map(|o| o.coverage)
        .collect();
    let coverage = (!coverages.is_empty()).then(|| coverages.iter().sum::<f64>() / coverages.len() as f64);
    let categories: BTreeMap<String, usize> = category_counts(&outcomes)
        .into_iter()
        .map(|(c, n)| (serde_json::to_value(c).expect("category serializes").as_str().unwrap_or_default().to_string(), n))
        .collect();
    let unverified = prefilter.records.iter().filter(|r| r.status == Status::Unverified).count();

    let report = RunReport {
        dataset: config.evolve.name.clone(),
        seed_dataset: seeds.name.clone(),
        config_fingerprint: fingerprint,
        pre_dedup: run.pre_dedup_count,
        dedup_removed: run.removed.len(),
        generated,
        passing: n_passing,
        filtered: generated - n_passing,
        avg_tests,
        coverage,
        categories,
        unverified,
        complete: run.complete && unverified == 0,
        postprocess: pp_report,
        colonies: run.colonies,
        usage: services.gateway.usage_totals(),
    };
    Ok(PipelineOutput { final_manifest, prefilter_manifest: prefilter, outcomes, removed: run.removed, report })
}

/// File names written by [`write_outputs`].
pub const FINAL_FILE: &str = "final.jsonl";
pub const PREFILTER_FILE: &str = "prefilter.jsonl";
pub const FAILED_FILE: &str = "failed.jsonl";
pub const REPORT_FILE: &str = "report.json";
pub const OUTCOMES_FILE: &str = "outcomes.jsonl";
pub const DEDUP_LOG_FILE: &str = "dedup_removed.jsonl";
pub const TOPICS_FILE: &str = "topics.csv";

pub fn write_outputs(out: &PipelineOutput, dir: &Path, include_failed: bool) -> Result<(), PipelineError> {
    let io = |path: &Path, e: std::io::Error| PipelineError::Io { path: path.into(), message: e.to_string() };
    fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
    save_dataset(&out.final_manifest, dir.join(FINAL_FILE))?;
    save_dataset(&out.prefilter_manifest, dir.join(PREFILTER_FILE))?;
    if include_failed {
        let mut failed = out.prefilter_manifest.clone();
        failed.name = format!("{}-failed", out.final_manifest.name);
        failed.records.retain(|r| r.status != Status::Passing);
        save_dataset(&failed, dir.join(FAILED_FILE))?;
    }
    let write = |name: &str, text: String| {
        let p = dir.join(name);
        fs::write(&p, text).map_err(|e| io(&p, e))
    };
    write(REPORT_FILE, serde_json::to_string_pretty(&out.report).expect("report serializes") + "\n")?;
    write(OUTCOMES_FILE, outcome_log_jsonl(&out.outcomes))?;
    write(DEDUP_LOG_FILE, removal_log_jsonl(&out.removed))?;
    let mut csv_buf = Vec::new();
    write_topic_csv(&[&out.final_manifest], &mut csv_buf).map_err(|e| PipelineError::Io { path: dir.join(TOPICS_FILE), message: e.to_string() })?;
    write(TOPICS_FILE, String::from_utf8(csv_buf).expect("csv is utf-8"))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Provenance;
    use crate::gateway::{CompletionRequest, FnProvider, RetryPolicy, Tag};
    use crate::sandbox::{FnSandbox, SandboxReport, SandboxRequest, TestOutcome, TestResult};
    use sha2::{Digest, Sha256};

    fn answer(req: &CompletionRequest) -> String {
        let h = hex::encode(&Sha256::digest(req.prompt.as_bytes())[..6]);
        match req.tag {
            Tag::Mutation | Tag::Crossover => {
                let words: Vec<String> = h.as_bytes().chunks(2).map(|c| format!("t{}", String::from_utf8_lossy(c))).collect();
                format!("Write a function that handles {}.", words.join(" "))
            }
            // a fixed subset of problems never gets a passing solution
            Tag::Solution | Tag::Feedback => {
                let question = req.prompt.rsplit("## Question:\n").next().unwrap_or_default();
                let q = hex::encode(Sha256::digest(question.as_bytes()));
                let bug = if q.as_bytes()[0] < b'6' { "  # BUG" } else { "" };
                format!("<|Solution Begin|>\ndef solution(x):\n    return x{bug}\n<|Solution End|>\n<|Test Begin|>\ndef test_a():\n    assert solution(1) == 1\n    assert solution(2) == 2\n<|Test End|>")
            }
            Tag::Postprocess => "Rephrased: returns the input unchanged.".into(),
            Tag::Topic => r#"{"topics": ["Math"]}"#.into(),
            Tag::Evaluate => String::new(),
        }
    }

    fn sandbox() -> FnSandbox<impl Fn(&SandboxRequest) -> SandboxReport + Send + Sync> {
        FnSandbox(|req: &SandboxRequest| {
            let outcome = if req.solution_source.contains("BUG") { TestOutcome::Fail } else { TestOutcome::Pass };
            let mut r = SandboxReport::ok(&req.request_id, vec![TestResult { name: "test_a".into(), outcome, message: String::new() }]);
            r.executable_lines = 2;
            r.executed_lines = 2;
            r
        })
    }

    fn config() -> PipelineConfig {
        let mut c = PipelineConfig::default();
        c.evolve.total_problems = 16;
        c.evolve.colonies = 2;
        c.evolve.colony_seed_size = 6;
        c.evolve.crossover_batch = 3;
        c.evolve.feedback_iterations = 2;
        c.evolve.seed = 3;
        c
    }

    fn seeds() -> DatasetManifest {
        DatasetManifest::new(
            "seeds",
            (0..12).map(|i| ProblemRecord::seed(format!("s{i}"), format!("Seed task {i} concerning item {}", i * 13))).collect(),
        )
    }

    #[test]
    fn end_to_end_ledger() {
        let gw = Gateway::new(Arc::new(FnProvider(|r: &CompletionRequest| Ok(answer(r))))).with_retry(RetryPolicy::none());
        let sb = sandbox();
        let services = Services { gateway: &gw, sandbox: &sb, embedder: None, checkpoint_dir: None };
        let out = generate(&config(), &seeds(), &services).unwrap();
        let rep = &out.report;
        rep.check_ledger().unwrap();
        assert!(rep.pre_dedup >= 16);
        assert!(rep.passing > 0 && rep.filtered > 0, "{rep:?}");
        assert_eq!(out.final_manifest.len(), rep.passing);
        assert_eq!(rep.avg_tests, 2.0);
        assert_eq!(rep.coverage, Some(1.0));
        for r in &out.final_manifest.records {
            assert_eq!(r.provenance, Provenance::Postprocessed);
            assert_eq!(r.status, Status::Passing);
            assert_eq!(r.topics, vec!["Math"]);
            r.validate().unwrap();
        }
        assert_eq!(out.outcomes.len(), rep.generated);

        let dir = tempfile::tempdir().unwrap();
        write_outputs(&out, dir.path(), true).unwrap();
        for f in [FINAL_FILE, PREFILTER_FILE, FAILED_FILE, REPORT_FILE, OUTCOMES_FILE, DEDUP_LOG_FILE, TOPICS_FILE] {
            assert!(dir.path().join(f).exists(), "{f}");
        }
        let back = crate::corpus::load_dataset(dir.path().join(FINAL_FILE)).unwrap();
        assert_eq!(back.config_fingerprint.as_deref(), Some(rep.config_fingerprint.as_str()));
    }
}
