//! Solution and test generation with execution feedback, outcome
//! categorization and test-taker evaluation.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{DatasetManifest, ProblemRecord, Status};
use crate::gateway::{CompletionRequest, Gateway, GatewayError, Tag};
use crate::prompts::{self, AttemptRecord};
use crate::pytokens;
use crate::sandbox::{ExecStatus, Sandbox, SandboxReport, SandboxRequest, TestOutcome, TestResult};

pub const SOLUTION_BEGIN: &str = "<|Solution Begin|>";
pub const SOLUTION_END: &str = "<|Solution End|>";
pub const TEST_BEGIN: &str = "<|Test Begin|>";
pub const TEST_END: &str = "<|Test End|>";

/// Default wall-clock budget per sandbox execution, in seconds.
pub const DEFAULT_TIMEOUT_S: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ParseStatus {
    Parsed,
    Unparsable,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SolutionTestPair {
    pub problem_id: String,
    pub attempt: usize,
    pub solution: String,
    pub tests: String,
    pub parse_status: ParseStatus,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Category {
    Passing,
    Failing,
    Erroring,
    Unparsable,
}

impl Category {
    pub fn status(self) -> Status {
        match self {
            Category::Passing => Status::Passing,
            Category::Failing => Status::Failing,
            Category::Erroring => Status::Erroring,
            Category::Unparsable => Status::Unparsable,
        }
    }
}

/// Remove a surrounding Markdown code fence, if any.
pub fn strip_fences(block: &str) -> String {
    let t = block.trim();
    let Some(rest) = t.strip_prefix("```") else {
        return t.to_string();
    };
    // drop the info string (```python)
    let body = match rest.find('\n') {
        Some(nl) => &rest[nl + 1..],
        None => "",
    };
    let body = body.trim_end();
    body.strip_suffix("```").unwrap_or(body).trim().to_string()
}

fn tagged_block<'a>(text: &'a str, begin: &str, end: &str) -> Option<&'a str> {
    let start = text.find(begin)? + begin.len();
    let stop = text[start..].find(end)? + start;
    Some(&text[start..stop])
}

fn code_block(text: &str, begin: &str, end: &str) -> Option<String> {
    let code = strip_fences(tagged_block(text, begin, end)?);
    (!code.is_empty()).then_some(code)
}

/// Extract (solution, tests) from a tagged response; `None` when either block
/// is missing, malformed or empty.
pub fn parse_tagged_response(text: &str) -> Option<(String, String)> {
    let solution = code_block(text, SOLUTION_BEGIN, SOLUTION_END)?;
    let tests = code_block(text, TEST_BEGIN, TEST_END)?;
    Some((solution, tests))
}

pub fn parse_pair(problem_id: &str, attempt: usize, text: &str) -> SolutionTestPair {
    match parse_tagged_response(text) {
        Some((solution, tests)) => SolutionTestPair {
            problem_id: problem_id.into(),
            attempt,
            solution,
            tests,
            parse_status: ParseStatus::Parsed,
        },
        None => SolutionTestPair {
            problem_id: problem_id.into(),
            attempt,
            solution: String::new(),
            tests: String::new(),
            parse_status: ParseStatus::Unparsable,
        },
    }
}

/// Solution block only, as produced under the test-taker prompt.
pub fn parse_solution_only(text: &str) -> Option<String> {
    code_block(text, SOLUTION_BEGIN, SOLUTION_END)
}

/// Number of `assert` statements; 0 with a warning when the source cannot be lexed.
pub fn count_tests(tests: &str) -> usize {
    match pytokens::count_asserts(tests) {
        Ok(n) => n,
        Err(e) => {
            log::warn!("cannot count asserts: {e}");
            0
        }
    }
}

/// Category plus an optional sub-reason for erroring outcomes.
pub fn categorize(report: Option<&SandboxReport>, parse: ParseStatus) -> (Category, Option<String>) {
    if parse == ParseStatus::Unparsable {
        return (Category::Unparsable, None);
    }
    let Some(report) = report else {
        return (Category::Erroring, Some("not-executed".into()));
    };
    match report.status {
        ExecStatus::CompileError => return (Category::Erroring, Some("compile-error".into())),
        ExecStatus::Timeout => return (Category::Erroring, Some("timeout".into())),
        ExecStatus::Crashed => return (Category::Erroring, Some("crashed".into())),
        ExecStatus::Ok => {}
    }
    if report.per_test.iter().any(|t| t.outcome == TestOutcome::Error) {
        return (Category::Erroring, Some("runtime-error".into()));
    }
    if report.per_test.is_empty() {
        return (Category::Failing, Some("no-tests".into()));
    }
    if report.per_test.iter().any(|t| t.outcome == TestOutcome::Fail) {
        return (Category::Failing, None);
    }
    (Category::Passing, None)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationOutcome {
    pub problem_id: String,
    pub category: Category,
    pub attempts_used: usize,
    pub per_test: Vec<TestResult>,
    pub coverage: Option<f64>,
    pub test_count: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sub_reason: Option<String>,
    /// Set when the sandbox itself failed rather than the code under test.
    #[serde(default)]
    pub infrastructure: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub solution: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tests: Option<String>,
}

impl VerificationOutcome {
    /// Copy the outcome onto its record.
    pub fn apply(&self, record: &mut ProblemRecord) {
        record.status = self.category.status();
        record.solution = self.solution.clone();
        record.tests = self.tests.clone();
        record.test_count = self.test_count as u32;
    }

    pub fn log_entry(&self) -> OutcomeLogEntry {
        OutcomeLogEntry {
            problem_id: self.problem_id.clone(),
            category: self.category,
            attempts: self.attempts_used,
            coverage: self.coverage,
            test_count: self.test_count,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutcomeLogEntry {
    pub problem_id: String,
    pub category: Category,
    pub attempts: usize,
    pub coverage: Option<f64>,
    pub test_count: usize,
}

pub fn outcome_log_jsonl(outcomes: &[VerificationOutcome]) -> String {
    outcomes
        .iter()
        .map(|o| serde_json::to_string(&o.log_entry()).expect("entry serializes") + "\n")
        .collect()
}

#[derive(Debug, Clone)]
pub struct FeedbackSettings {
    pub model_id: String,
    pub iterations: usize,
    pub timeout_s: f64,
}

impl FeedbackSettings {
    pub fn new(model_id: impl Into<String>, iterations: usize) -> Self {
        Self { model_id: model_id.into(), iterations, timeout_s: DEFAULT_TIMEOUT_S }
    }
}

/// Generate a solution and tests, run them, and re-prompt with the full
/// attempt history until everything passes or the iteration budget is spent.
pub fn feedback_loop(
    gateway: &Gateway,
    sandbox: &dyn Sandbox,
    problem: &ProblemRecord,
    settings: &FeedbackSettings,
) -> Result<VerificationOutcome, GatewayError> {
    let mut history: Vec<AttemptRecord> = Vec::new();
    let mut last = None;
    for attempt in 1..=settings.iterations.max(1) {
        let (tag, prompt) = if attempt == 1 {
            (Tag::Solution, prompts::solution(&problem.statement))
        } else {
            (Tag::Feedback, prompts::solution_with_feedback(&problem.statement, &history))
        };
        let req = CompletionRequest::new(tag, settings.model_id.clone(), prompt);
        let text = gateway.complete_for(&req, &problem.id)?;
        let pair = parse_pair(&problem.id, attempt, &text);

        let (report, infrastructure, output) = if pair.parse_status == ParseStatus::Parsed {
            let request = SandboxRequest::new(
                format!("{}#{attempt}", problem.id),
                pair.solution.clone(),
                pair.tests.clone(),
                settings.timeout_s,
            );
            match sandbox.execute(&request) {
                Ok(r) => {
                    let out = r.render();
                    (Some(r), false, out)
                }
                Err(e) => (None, true, e.to_string()),
            }
        } else {
            (
                None,
                false,
                format!("Could not parse the response: it must contain non-empty {SOLUTION_BEGIN}/{SOLUTION_END} and {TEST_BEGIN}/{TEST_END} blocks."),
            )
        };

        let (category, mut sub_reason) = categorize(report.as_ref(), pair.parse_status);
        if infrastructure {
            sub_reason = Some("sandbox-unavailable".into());
        }
        let parsed = pair.parse_status == ParseStatus::Parsed;
        let outcome = VerificationOutcome {
            problem_id: problem.id.clone(),
            category,
            attempts_used: attempt,
            per_test: report.as_ref().map(|r| r.per_test.clone()).unwrap_or_default(),
            coverage: report.as_ref().and_then(SandboxReport::coverage),
            test_count: if parsed { count_tests(&pair.tests) } else { 0 },
            sub_reason,
            infrastructure,
            solution: parsed.then(|| pair.solution.clone()),
            tests: parsed.then(|| pair.tests.clone()),
        };
        if category == Category::Passing || infrastructure {
            return Ok(outcome);
        }
        history.push(AttemptRecord { response: text, execution_output: output });
        last = Some(outcome);
    }
    Ok(last.expect("at least one attempt"))
}

/// Verify many problems concurrently. Problems whose generator calls fail
/// keep their record unchanged and are returned in `deferred`.
pub struct BatchVerification {
    pub records: Vec<ProblemRecord>,
    pub outcomes: Vec<VerificationOutcome>,
    pub deferred: Vec<(String, GatewayError)>,
}

pub fn verify_all(
    gateway: &Gateway,
    sandbox: &dyn Sandbox,
    records: Vec<ProblemRecord>,
    settings: &FeedbackSettings,
) -> BatchVerification {
    let results: Vec<Result<VerificationOutcome, GatewayError>> =
        records.par_iter().map(|r| feedback_loop(gateway, sandbox, r, settings)).collect();
    let mut out = BatchVerification { records: Vec::with_capacity(records.len()), outcomes: Vec::new(), deferred: Vec::new() };
    for (mut rec, res) in records.into_iter().zip(results) {
        match res {
            Ok(o) => {
                o.apply(&mut rec);
                out.outcomes.push(o);
            }
            Err(e) => out.deferred.push((rec.id.clone(), e)),
        }
        out.records.push(rec);
    }
    out
}

#[derive(Debug, Error)]
pub enum EvaluationError {
    #[error("{count} problem(s) are not passing, e.g. {example}")]
    NotPassing { count: usize, example: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TesttakerResult {
    pub problem_id: String,
    pub category: Category,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TesttakerReport {
    pub model: String,
    pub dataset: String,
    /// Percentages over evaluated problems.
    pub pass: f64,
    pub fail: f64,
    pub err: f64,
    pub evaluated: usize,
    /// Problems dropped from the denominators because the model call failed.
    pub excluded: usize,
    pub per_problem: Vec<TesttakerResult>,
}

impl TesttakerReport {
    pub fn csv_header() -> &'static str {
        "model,dataset,pass,fail,err"
    }

    pub fn csv_row(&self) -> String {
        format!("{},{},{:.2},{:.2},{:.2}", self.model, self.dataset, self.pass, self.fail, self.err)
    }
}

/// Single-attempt evaluation of a model against stored tests.
pub fn evaluate_testtaker(
    gateway: &Gateway,
    sandbox: &dyn Sandbox,
    model_id: &str,
    manifest: &DatasetManifest,
    timeout_s: f64,
) -> Result<TesttakerReport, EvaluationError> {
    let not_passing: Vec<&ProblemRecord> = manifest.records.iter().filter(|r| r.status != Status::Passing).collect();
    if let Some(first) = not_passing.first() {
        return Err(EvaluationError::NotPassing { count: not_passing.len(), example: first.id.clone() });
    }
    let results: Vec<Option<TesttakerResult>> = manifest
        .records
        .par_iter()
        .map(|r| {
            let req = CompletionRequest::new(Tag::Evaluate, model_id, prompts::testtaker(&r.statement));
            let text = match gateway.complete_for(&req, &r.id) {
                Ok(t) => t,
                Err(e) => {
                    log::warn!("excluding {}: {e}", r.id);
                    return None;
                }
            };
            let category = match parse_solution_only(&text) {
                None => Category::Unparsable,
                Some(solution) => {
                    let tests = r.tests.clone().unwrap_or_default();
                    let req = SandboxRequest { collect_coverage: false, ..SandboxRequest::new(format!("eval:{}", r.id), solution, tests, timeout_s) };
                    match sandbox.execute(&req) {
                        Ok(rep) => categorize(Some(&rep), ParseStatus::Parsed).0,
                        Err(e) => {
                            log::warn!("sandbox failed on {}: {e}", r.id);
                            Category::Erroring
                        }
                    }
                }
            };
            Some(TesttakerResult { problem_id: r.id.clone(), category })
        })
        .collect();
    let excluded = results.iter().filter(|r| r.is_none()).count();
    let per_problem: Vec<TesttakerResult> = results.into_iter().flatten().collect();
    let n = per_problem.len();
    let pct = |pred: &dyn Fn(Category) -> bool| {
        if n == 0 {
            0.0
        } else {
            100.0 * per_problem.iter().filter(|r| pred(r.category)).count() as f64 / n as f64
        }
    };
    Ok(TesttakerReport {
        model: model_id.into(),
        dataset: manifest.name.clone(),
        pass: pct(&|c| c == Category::Passing),
        fail: pct(&|c| c == Category::Failing),
        err: pct(&|c| matches!(c, Category::Erroring | Category::Unparsable)),
        evaluated: n,
        excluded,
        per_problem,
    })
}

/// Count of outcomes per category, with every category present.
pub fn category_counts(outcomes: &[VerificationOutcome]) -> BTreeMap<Category, usize> {
    let mut m: BTreeMap<Category, usize> =
        [Category::Passing, Category::Failing, Category::Erroring, Category::Unparsable].into_iter().map(|c| (c, 0)).collect();
    for o in outcomes {
        *m.entry(o.category).or_default() += 1;
    }
    m
}
