use std::fmt::Write as _;

use benchsynth::corpus::{load_dataset, save_dataset, DatasetManifest, ImportAdapter, Provenance};
use benchsynth::dedup::{deduplicate, DedupConfig};

fn mbpp_file(n: usize) -> String {
    let mut out = String::new();
    for i in 0..n {
        let row = serde_json::json!({
            "task_id": 11 + i,
            "text": format!("Write a function number {i} that returns the {i}th power of two."),
            "code": format!("def f{i}():\n    return 2 ** {i}"),
            "test_list": [format!("assert f{i}() == {}", 1u128 << (i % 100))],
            "test_setup_code": "",
            "challenge_test_list": []
        });
        writeln!(out, "{row}").unwrap();
    }
    out
}

#[test]
fn mbpp_test_split_imports_374_records() {
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("mbpp_test.jsonl");
    std::fs::write(&src, mbpp_file(374)).unwrap();
    let m = ImportAdapter::mbpp().import(&src, Some("mbpp")).unwrap();
    assert_eq!(m.len(), 374);
    assert_eq!(m.name, "mbpp");
    assert_eq!(m.records[0].id, "mbpp-11");
    assert!(m.records.iter().all(|r| r.provenance == Provenance::Seed && r.test_count == 1));
    assert!(m.records[0].extra.contains_key("test_setup_code"));
    m.validate().unwrap();

    let out = dir.path().join("mbpp.jsonl");
    save_dataset(&m, &out).unwrap();
    let back = load_dataset(&out).unwrap();
    assert_eq!(back, m);
    let once = std::fs::read(&out).unwrap();
    save_dataset(&back, &out).unwrap();
    assert_eq!(std::fs::read(&out).unwrap(), once);
}

#[test]
fn generated_sized_set_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let records = (0..1002)
        .map(|i| benchsynth::corpus::ProblemRecord::seed(format!("g{i}"), format!("Generated problem {i}")))
        .collect();
    let m = DatasetManifest::new("gen", records);
    let p = dir.path().join("gen.jsonl");
    save_dataset(&m, &p).unwrap();
    assert_eq!(load_dataset(&p).unwrap().len(), 1002);
}

#[test]
fn imported_seeds_survive_dedup() {
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("mbpp_test.jsonl");
    std::fs::write(&src, mbpp_file(50)).unwrap();
    let m = ImportAdapter::mbpp().import(&src, None).unwrap();
    let (kept, log) = deduplicate(&m, &DedupConfig::default()).unwrap();
    assert!(log.is_empty(), "{log:?}");
    assert_eq!(kept, m);
}
