//! Client side of the sandboxed test runner.
//!
//! The runner is an external process that reads one JSON request per line on
//! stdin and answers with one JSON report per line on stdout. This module
//! owns the wire types, a pooled process client and an in-process double.

use std::io::{BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::Mutex;
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SandboxRequest {
    pub request_id: String,
    pub solution_source: String,
    pub tests_source: String,
    pub timeout_s: f64,
    pub collect_coverage: bool,
}

impl SandboxRequest {
    pub fn new(request_id: impl Into<String>, solution: impl Into<String>, tests: impl Into<String>, timeout_s: f64) -> Self {
        Self {
            request_id: request_id.into(),
            solution_source: solution.into(),
            tests_source: tests.into(),
            timeout_s,
            collect_coverage: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExecStatus {
    Ok,
    CompileError,
    Timeout,
    Crashed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TestOutcome {
    Pass,
    Fail,
    Error,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TestResult {
    pub name: String,
    pub outcome: TestOutcome,
    #[serde(default)]
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SandboxReport {
    pub request_id: String,
    pub status: ExecStatus,
    #[serde(default)]
    pub per_test: Vec<TestResult>,
    #[serde(default)]
    pub executed_lines: u32,
    #[serde(default)]
    pub executable_lines: u32,
    #[serde(default)]
    pub wall_ms: u64,
}

impl SandboxReport {
    pub fn ok(request_id: impl Into<String>, per_test: Vec<TestResult>) -> Self {
        Self {
            request_id: request_id.into(),
            status: ExecStatus::Ok,
            per_test,
            executed_lines: 0,
            executable_lines: 0,
            wall_ms: 0,
        }
    }

    pub fn with_status(request_id: impl Into<String>, status: ExecStatus) -> Self {
        Self { status, ..Self::ok(request_id, Vec::new()) }
    }

    /// Executed over executable solution lines; `None` when nothing was measured.
    pub fn coverage(&self) -> Option<f64> {
        (self.executable_lines > 0).then(|| f64::from(self.executed_lines.min(self.executable_lines)) / f64::from(self.executable_lines))
    }

    /// Plain-text rendering used as execution output in feedback prompts.
    pub fn render(&self) -> String {
        let mut out = match self.status {
            ExecStatus::Ok => String::new(),
            ExecStatus::CompileError => "Error while importing the solution or tests.\n".to_string(),
            ExecStatus::Timeout => "Execution timed out.\n".to_string(),
            ExecStatus::Crashed => "The test process crashed.\n".to_string(),
        };
        for t in &self.per_test {
            let verdict = match t.outcome {
                TestOutcome::Pass => "PASSED",
                TestOutcome::Fail => "FAILED",
                TestOutcome::Error => "ERROR",
            };
            out.push_str(&format!("{} {verdict}", t.name));
            if !t.message.is_empty() {
                out.push_str(&format!(": {}", t.message));
            }
            out.push('\n');
        }
        if self.status == ExecStatus::Ok && self.per_test.is_empty() {
            out.push_str("No tests were collected.\n");
        }
        out
    }
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum SandboxError {
    #[error("sandbox unavailable: {0}")]
    Unavailable(String),
    #[error("sandbox protocol error: {0}")]
    Protocol(String),
}

pub trait Sandbox: Send + Sync {
    fn execute(&self, request: &SandboxRequest) -> Result<SandboxReport, SandboxError>;
}

/// In-process sandbox backed by a closure; used by tests and offline runs.
pub struct FnSandbox<F>(pub F);

impl<F> Sandbox for FnSandbox<F>
where
    F: Fn(&SandboxRequest) -> SandboxReport + Send + Sync,
{
    fn execute(&self, request: &SandboxRequest) -> Result<SandboxReport, SandboxError> {
        Ok((self.0)(request))
    }
}

/// Names of top-level `def test_*` functions, in order.
pub fn test_function_names(tests: &str) -> Vec<String> {
    tests
        .lines()
        .filter_map(|l| l.strip_prefix("def "))
        .filter_map(|rest| rest.split('(').next())
        .map(str::trim)
        .filter(|n| n.starts_with("test_"))
        .map(str::to_owned)
        .collect()
}

/// Reports every top-level test function as passing without executing
/// anything. For dry runs of the pipeline plumbing only.
pub struct AssumePassSandbox;

impl Sandbox for AssumePassSandbox {
    fn execute(&self, request: &SandboxRequest) -> Result<SandboxReport, SandboxError> {
        let tests = test_function_names(&request.tests_source)
            .into_iter()
            .map(|name| TestResult { name, outcome: TestOutcome::Pass, message: String::new() })
            .collect();
        Ok(SandboxReport::ok(&request.request_id, tests))
    }
}

struct RunnerProcess {
    child: Child,
    stdin: ChildStdin,
    lines: Receiver<std::io::Result<String>>,
}

impl RunnerProcess {
    fn spawn(command: &[String]) -> Result<Self, SandboxError> {
        let (prog, args) = command
            .split_first()
            .ok_or_else(|| SandboxError::Unavailable("empty runner command".into()))?;
        let mut child = Command::new(prog)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| SandboxError::Unavailable(format!("{prog}: {e}")))?;
        let stdin = child.stdin.take().expect("stdin piped");
        let stdout = child.stdout.take().expect("stdout piped");
        let (tx, rx) = mpsc::channel();
        thread::spawn(move || {
            for line in BufReader::new(stdout).lines() {
                if tx.send(line).is_err() {
                    break;
                }
            }
        });
        Ok(Self { child, stdin, lines: rx })
    }

    fn round_trip(&mut self, request: &SandboxRequest, grace: Duration) -> Result<SandboxReport, SandboxError> {
        let line = serde_json::to_string(request).expect("request serializes");
        writeln!(self.stdin, "{line}")
            .and_then(|_| self.stdin.flush())
            .map_err(|e| SandboxError::Unavailable(format!("runner stdin: {e}")))?;
        let wait = Duration::from_secs_f64(request.timeout_s.max(0.0)) + grace;
        let reply = match self.lines.recv_timeout(wait) {
            Ok(Ok(l)) => l,
            Ok(Err(e)) => return Err(SandboxError::Unavailable(format!("runner stdout: {e}"))),
            Err(RecvTimeoutError::Timeout) => return Err(SandboxError::Unavailable("runner stopped responding".into())),
            Err(RecvTimeoutError::Disconnected) => return Err(SandboxError::Unavailable("runner exited".into())),
        };
        let report: SandboxReport =
            serde_json::from_str(&reply).map_err(|e| SandboxError::Protocol(format!("{e}: {reply}")))?;
        if report.request_id != request.request_id {
            return Err(SandboxError::Protocol(format!(
                "reply for {} while waiting for {}",
                report.request_id, request.request_id
            )));
        }
        Ok(report)
    }
}

impl Drop for RunnerProcess {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

/// Pool of long-lived runner processes speaking the JSON-lines protocol.
/// Each request is served by one idle process; new processes are spawned on
/// demand and broken ones are discarded.
pub struct RunnerClient {
    command: Vec<String>,
    idle: Mutex<Vec<RunnerProcess>>,
    grace: Duration,
}

impl RunnerClient {
    pub fn new(command: Vec<String>) -> Self {
        Self { command, idle: Mutex::new(Vec::new()), grace: Duration::from_secs(5) }
    }

    /// Extra time beyond the request timeout before the client gives up.
    pub fn with_grace(mut self, grace: Duration) -> Self {
        self.grace = grace;
        self
    }
}

impl Sandbox for RunnerClient {
    fn execute(&self, request: &SandboxRequest) -> Result<SandboxReport, SandboxError> {
        let pooled = self.idle.lock().expect("pool lock").pop();
        let mut proc = match pooled {
            Some(p) => p,
            None => RunnerProcess::spawn(&self.command)?,
        };
        let result = proc.round_trip(request, self.grace);
        if result.is_ok() {
            self.idle.lock().expect("pool lock").push(proc);
        }
        result
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wire_format_round_trips() {
        let req = SandboxRequest::new("r1", "def f():\n    return 1\n", "def test_f():\n    assert f() == 1\n", 10.0);
        let line = serde_json::to_string(&req).unwrap();
        assert!(line.contains("\"solution_source\""));
        assert_eq!(serde_json::from_str::<SandboxRequest>(&line).unwrap(), req);

        let rep: SandboxReport = serde_json::from_str(
            r#"{"request_id":"r1","status":"compile-error","per_test":[{"name":"test_a","outcome":"error","message":"boom"}],"executed_lines":0,"executable_lines":3,"wall_ms":12}"#,
        )
        .unwrap();
        assert_eq!(rep.status, ExecStatus::CompileError);
        assert_eq!(rep.per_test[0].outcome, TestOutcome::Error);
        assert_eq!(serde_json::from_str::<SandboxReport>(&serde_json::to_string(&rep).unwrap()).unwrap(), rep);
    }

    #[test]
    fn coverage_fraction() {
        let mut r = SandboxReport::ok("x", vec![]);
        assert_eq!(r.coverage(), None);
        r.executed_lines = 1;
        r.executable_lines = 1;
        assert_eq!(r.coverage(), Some(1.0));
        r.executable_lines = 4;
        assert_eq!(r.coverage(), Some(0.25));
    }

    #[test]
    fn render_lists_tests() {
        let r = SandboxReport::ok(
            "x",
            vec![
                TestResult { name: "test_a".into(), outcome: TestOutcome::Pass, message: String::new() },
                TestResult { name: "test_b".into(), outcome: TestOutcome::Fail, message: "assert 1 == 2".into() },
            ],
        );
        assert_eq!(r.render(), "test_a PASSED\ntest_b FAILED: assert 1 == 2\n");
        assert!(SandboxReport::with_status("x", ExecStatus::Timeout).render().contains("timed out"));
    }

    #[test]
    fn missing_runner_is_unavailable() {
        let client = RunnerClient::new(vec!["/nonexistent/runner".into()]);
        let err = client.execute(&SandboxRequest::new("a", "x", "y", 1.0)).unwrap_err();
        assert!(matches!(err, SandboxError::Unavailable(_)));
    }
}
