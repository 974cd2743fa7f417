//! RunnerClient against small scripted runners speaking the JSON-lines protocol.

use std::path::Path;
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use benchsynth::sandbox::{ExecStatus, RunnerClient, Sandbox, SandboxError, SandboxRequest, TestOutcome};

const ECHO_RUNNER: &str = r#"
import json, sys, time
for line in sys.stdin:
    req = json.loads(line)
    src = req["solution_source"]
    if "SLEEP" in src:
        time.sleep(float(src.split()[-1]))
    if "EXIT" in src:
        sys.exit(3)
    if "SYNTAX" in src:
        rep = {"request_id": req["request_id"], "status": "compile-error", "per_test": []}
    else:
        names = [l[4:].split("(")[0] for l in req["tests_source"].splitlines() if l.startswith("def test_")]
        outcome = "fail" if "BUG" in src else "pass"
        rep = {"request_id": req["request_id"], "status": "ok",
               "per_test": [{"name": n, "outcome": outcome, "message": ""} for n in names],
               "executed_lines": 2, "executable_lines": 4, "wall_ms": 1}
    print(json.dumps(rep), flush=True)
"#;

const WRONG_ID_RUNNER: &str = r#"
import json, sys
for line in sys.stdin:
    print(json.dumps({"request_id": "someone-else", "status": "ok"}), flush=True)
"#;

fn python() -> Option<String> {
    ["python3", "python"]
        .into_iter()
        .find(|p| std::process::Command::new(p).arg("--version").output().is_ok_and(|o| o.status.success()))
        .map(str::to_owned)
}

fn client(dir: &Path, source: &str) -> Option<RunnerClient> {
    let py = python()?;
    let script = dir.join("runner.py");
    std::fs::write(&script, source).unwrap();
    Some(RunnerClient::new(vec![py, script.display().to_string()]).with_grace(Duration::from_millis(500)))
}

const TESTS: &str = "def test_one():\n    assert f() == 1\n\ndef test_two():\n    assert f() == 1\n";

#[test]
fn passing_and_failing_reports() {
    let dir = tempfile::tempdir().unwrap();
    let Some(c) = client(dir.path(), ECHO_RUNNER) else { return };
    let ok = c.execute(&SandboxRequest::new("a", "def f():\n    return 1\n", TESTS, 5.0)).unwrap();
    assert_eq!(ok.request_id, "a");
    assert_eq!(ok.status, ExecStatus::Ok);
    assert_eq!(ok.per_test.len(), 2);
    assert!(ok.per_test.iter().all(|t| t.outcome == TestOutcome::Pass));
    assert_eq!(ok.coverage(), Some(0.5));

    let bad = c.execute(&SandboxRequest::new("b", "def f():\n    return 2  # BUG\n", TESTS, 5.0)).unwrap();
    assert!(bad.per_test.iter().all(|t| t.outcome == TestOutcome::Fail));

    let syn = c.execute(&SandboxRequest::new("c", "SYNTAX", TESTS, 5.0)).unwrap();
    assert_eq!(syn.status, ExecStatus::CompileError);
}

#[test]
fn concurrent_requests_get_their_own_replies() {
    let dir = tempfile::tempdir().unwrap();
    let Some(c) = client(dir.path(), ECHO_RUNNER) else { return };
    let c = Arc::new(c);
    let handles: Vec<_> = (0..16)
        .map(|i| {
            let c = Arc::clone(&c);
            thread::spawn(move || {
                let src = if i % 2 == 0 { "ok" } else { "BUG" };
                let rep = c.execute(&SandboxRequest::new(format!("req-{i}"), src, TESTS, 5.0)).unwrap();
                (i, rep)
            })
        })
        .collect();
    for h in handles {
        let (i, rep) = h.join().unwrap();
        assert_eq!(rep.request_id, format!("req-{i}"));
        let want = if i % 2 == 0 { TestOutcome::Pass } else { TestOutcome::Fail };
        assert_eq!(rep.per_test[0].outcome, want);
    }
}

#[test]
fn runner_exit_is_unavailable_and_client_recovers() {
    let dir = tempfile::tempdir().unwrap();
    let Some(c) = client(dir.path(), ECHO_RUNNER) else { return };
    let err = c.execute(&SandboxRequest::new("x", "EXIT", TESTS, 5.0)).unwrap_err();
    assert!(matches!(err, SandboxError::Unavailable(_)), "{err}");
    let rep = c.execute(&SandboxRequest::new("y", "fine", TESTS, 5.0)).unwrap();
    assert_eq!(rep.request_id, "y");
}

#[test]
fn silent_runner_times_out_after_grace() {
    let dir = tempfile::tempdir().unwrap();
    let Some(c) = client(dir.path(), ECHO_RUNNER) else { return };
    let start = Instant::now();
    let err = c.execute(&SandboxRequest::new("s", "SLEEP 5", TESTS, 0.2)).unwrap_err();
    assert!(matches!(err, SandboxError::Unavailable(_)));
    assert!(start.elapsed() < Duration::from_secs(3));
}

#[test]
fn mismatched_reply_is_protocol_error() {
    let dir = tempfile::tempdir().unwrap();
    let Some(c) = client(dir.path(), WRONG_ID_RUNNER) else { return };
    let err = c.execute(&SandboxRequest::new("mine", "x", TESTS, 5.0)).unwrap_err();
    assert!(matches!(err, SandboxError::Protocol(_)), "{err}");
}
