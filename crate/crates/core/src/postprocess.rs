//! Edge-case rephrasing and topic labeling.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::corpus::{DatasetManifest, ProblemRecord, Provenance, Status};
use crate::gateway::{CompletionRequest, Gateway, GatewayError, Tag};
use crate::prompts;
use crate::sandbox::{Sandbox, SandboxRequest};
use crate::topics::{self, MAX_TOPICS};
use crate::verify::{categorize, Category, ParseStatus};

/// Id given to the rephrased copy of `id`.
pub fn postprocessed_id(id: &str) -> String {
    format!("{id}-pp")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RephraseFlag {
    EmptyCompletion,
    MissingTests,
    /// Stored solution no longer passed its stored tests on re-run.
    ReverifyFailed,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rephrased {
    /// The postprocessed record, or the original when rephrasing was skipped.
    pub record: ProblemRecord,
    pub flag: Option<RephraseFlag>,
}

/// One completion with the edge-case prompt; the answer becomes the
/// statement of a new record derived from `problem`.
pub fn rephrase_edge_cases(gateway: &Gateway, model: &str, problem: &ProblemRecord) -> Result<Rephrased, GatewayError> {
    let Some(tests) = problem.tests.as_deref() else {
        return Ok(Rephrased { record: problem.clone(), flag: Some(RephraseFlag::MissingTests) });
    };
    let req = CompletionRequest::new(Tag::Postprocess, model, prompts::postprocess(&problem.statement, tests));
    let text = gateway.complete_for(&req, &problem.id)?;
    let statement = text.trim();
    if statement.is_empty() {
        log::warn!("empty rephrasing for {}, keeping original", problem.id);
        return Ok(Rephrased { record: problem.clone(), flag: Some(RephraseFlag::EmptyCompletion) });
    }
    let record = ProblemRecord {
        id: postprocessed_id(&problem.id),
        statement: statement.to_string(),
        provenance: Provenance::Postprocessed,
        parents: vec![problem.id.clone()],
        ..problem.clone()
    };
    Ok(Rephrased { record, flag: None })
}

/// Re-run a record's stored solution against its stored tests.
pub fn reverify(sandbox: &dyn Sandbox, record: &ProblemRecord, timeout_s: f64) -> Category {
    let (Some(solution), Some(tests)) = (record.solution.as_deref(), record.tests.as_deref()) else {
        return Category::Unparsable;
    };
    let req = SandboxRequest {
        collect_coverage: false,
        ..SandboxRequest::new(format!("reverify:{}", record.id), solution, tests, timeout_s)
    };
    match sandbox.execute(&req) {
        Ok(rep) => categorize(Some(&rep), ParseStatus::Parsed).0,
        Err(e) => {
            log::warn!("re-verification of {} failed: {e}", record.id);
            Category::Erroring
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopicLabels {
    pub topics: Vec<String>,
    /// True when no parsable answer arrived after the retry.
    pub flagged: bool,
}

/// Parse a `{"topics": [...]}` answer, tolerating surrounding prose or fences.
/// Keeps bank members in order, without repeats, up to the topic limit.
pub fn parse_topics(text: &str) -> Option<Vec<String>> {
    let start = text.find('{')?;
    let end = text.rfind('}')?;
    if end < start {
        return None;
    }
    let v: Value = serde_json::from_str(&text[start..=end]).ok()?;
    let list = v.get("topics")?.as_array()?;
    let mut out: Vec<String> = Vec::new();
    for t in list.iter().filter_map(Value::as_str) {
        if topics::is_bank_topic(t) && !out.iter().any(|o| o == t) {
            out.push(t.to_string());
        }
        if out.len() == MAX_TOPICS {
            break;
        }
    }
    Some(out)
}

/// Ask for up to three bank topics, retrying once on an unparsable answer.
pub fn label_topics(gateway: &Gateway, model: &str, problem: &ProblemRecord) -> Result<TopicLabels, GatewayError> {
    let solution = problem.solution.as_deref().unwrap_or("");
    let req = CompletionRequest::new(Tag::Topic, model, prompts::topic_label(&problem.statement, solution));
    for _ in 0..2 {
        let text = gateway.complete_for(&req, &problem.id)?;
        if let Some(topics) = parse_topics(&text) {
            return Ok(TopicLabels { topics, flagged: false });
        }
    }
    log::warn!("no parsable topic answer for {}", problem.id);
    Ok(TopicLabels { topics: Vec::new(), flagged: true })
}

#[derive(Debug, Clone)]
pub struct PostprocessSettings {
    pub rephrase_model: String,
    pub topic_model: String,
    pub rephrase: bool,
    pub label: bool,
    pub timeout_s: f64,
}

impl Default for PostprocessSettings {
    fn default() -> Self {
        Self {
            rephrase_model: "gpt-4o".into(),
            topic_model: "gpt-4o-mini".into(),
            rephrase: true,
            label: true,
            timeout_s: crate::verify::DEFAULT_TIMEOUT_S,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PostprocessReport {
    pub rephrased: usize,
    pub kept_original: usize,
    pub labeled: usize,
    pub label_flagged: usize,
    pub gateway_failures: usize,
}

/// Rephrase and label every passing record. Non-passing records pass through
/// untouched. With a sandbox, each rephrased record is re-verified and the
/// original is kept if its stored code no longer passes.
pub fn postprocess_manifest(
    gateway: &Gateway,
    sandbox: Option<&dyn Sandbox>,
    manifest: &DatasetManifest,
    settings: &PostprocessSettings,
) -> (DatasetManifest, PostprocessReport) {
    struct Item {
        record: ProblemRecord,
        rephrased: bool,
        kept: bool,
        labeled: bool,
        flagged: bool,
        failures: usize,
    }
    let items: Vec<Item> = manifest
        .records
        .par_iter()
        .map(|orig| {
            let mut item = Item { record: orig.clone(), rephrased: false, kept: false, labeled: false, flagged: false, failures: 0 };
            if orig.status != Status::Passing {
                return item;
            }
            if settings.rephrase {
                match rephrase_edge_cases(gateway, &settings.rephrase_model, orig) {
                    Ok(r) if r.flag.is_none() => {
                        let safe = sandbox.is_none_or(|s| reverify(s, &r.record, settings.timeout_s) == Category::Passing);
                        if safe {
                            item.record = r.record;
                            item.rephrased = true;
                        } else {
                            log::warn!("{}: stored code fails after rephrasing, keeping original", orig.id);
                            item.kept = true;
                        }
                    }
                    Ok(_) => item.kept = true,
                    Err(e) => {
                        log::warn!("rephrasing {} failed: {e}", orig.id);
                        item.kept = true;
                        item.failures += 1;
                    }
                }
            }
            if settings.label {
                match label_topics(gateway, &settings.topic_model, &item.record) {
                    Ok(l) => {
                        item.flagged = l.flagged;
                        item.labeled = !l.flagged;
                        item.record.topics = l.topics;
                    }
                    Err(e) => {
                        log::warn!("labeling {} failed: {e}", orig.id);
                        item.failures += 1;
                    }
                }
            }
            item
        })
        .collect();

    let mut report = PostprocessReport::default();
    let mut out = manifest.clone();
    out.records = items
        .into_iter()
        .map(|i| {
            report.rephrased += usize::from(i.rephrased);
            report.kept_original += usize::from(i.kept);
            report.labeled += usize::from(i.labeled);
            report.label_flagged += usize::from(i.flagged);
            report.gateway_failures += i.failures;
            i.record
        })
        .collect();
    (out, report)
}

/// `topic,fraction,dataset` rows, one per topic present in each dataset.
pub fn write_topic_csv<W: Write>(datasets: &[&DatasetManifest], out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["topic", "fraction", "dataset"])?;
    for m in datasets {
        let fractions = topics::topic_fractions(m.records.iter().map(|r| r.topics.as_slice()));
        for (topic, f) in fractions {
            w.write_record([topic, format!("{f:.6}"), m.name.clone()])?;
        }
    }
    w.flush()?;
    Ok(())
}
