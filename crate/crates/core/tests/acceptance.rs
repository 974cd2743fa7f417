//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::collections::{BTreeSet, HashSet};
use std::sync::Arc;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

use benchsynth::analysis::{measure_diversity, measure_novelty, sweep, MeasureSettings, Metric, SweepParam};
use benchsynth::config::PipelineConfig;
use benchsynth::corpus::{to_jsonl, DatasetManifest, ProblemRecord, Status};
use benchsynth::dedup::{dedup_texts, DedupConfig};
use benchsynth::embedding::{cosine, EmbeddingMatrix, EmbeddingRow};
use benchsynth::evolve::kfn_select;
use benchsynth::gateway::{CompletionRequest, FnProvider, Gateway, MockProvider, RetryPolicy, Tag};
use benchsynth::knn::{PointSet, Search};
use benchsynth::metrics::{differential_entropy, differential_entropy_with, intervals_disjoint, kl_divergence, kl_divergence_with, mean};
use benchsynth::pipeline::{generate, PipelineOutput, Services};
use benchsynth::projection::{ProjectionConfig, ProjectionMethod};
use benchsynth::sandbox::{FnSandbox, Sandbox, SandboxReport, SandboxRequest, TestOutcome, TestResult};
use benchsynth::verify::{feedback_loop, Category, FeedbackSettings};

const KL_TOL: f64 = 0.1;
const KL_NULL_TOL: f64 = 0.05;
const ENTROPY_TOL: f64 = 0.08;
const HOMOGENEITY_TOL: f64 = 1e-9;
const DEDUP_MIN_FLAGGED: usize = 19;

type Outcome = Result<String, String>;

fn gaussian(rng: &mut ChaCha8Rng, n: usize, d: usize, shift: &[f64]) -> PointSet {
    let data: Vec<f64> = (0..n * d).map(|i| rng.sample::<f64, _>(StandardNormal) + shift[i % d]).collect();
    PointSet::new(d, data).unwrap()
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, d: usize) -> PointSet {
    PointSet::new(d, (0..n * d).map(|_| rng.random::<f64>()).collect()).unwrap()
}

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn kl_gaussian_shift() -> Outcome {
    let vals: Vec<f64> = (0..20)
        .map(|t| {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + t);
            let x = gaussian(&mut rng, 5000, 2, &[0.0, 0.0]);
            let y = gaussian(&mut rng, 5000, 2, &[1.0, 0.0]);
            kl_divergence(&x, &y, 4).unwrap()
        })
        .collect();
    let m = mean(&vals);
    check((m - 0.5).abs() <= KL_TOL, format!("mean {m:.4} vs 0.5 (tol {KL_TOL})"))
}

fn kl_null() -> Outcome {
    let vals: Vec<f64> = (0..20)
        .map(|t| {
            let mut rng = ChaCha8Rng::seed_from_u64(200 + t);
            let x = gaussian(&mut rng, 5000, 2, &[0.0, 0.0]);
            let y = gaussian(&mut rng, 5000, 2, &[0.0, 0.0]);
            kl_divergence(&x, &y, 4).unwrap()
        })
        .collect();
    let m = mean(&vals);
    check(m.abs() <= KL_NULL_TOL, format!("mean {m:.4} vs 0 (tol {KL_NULL_TOL})"))
}

fn entropy_oracles() -> Outcome {
    let target = (2.0 * std::f64::consts::PI * std::f64::consts::E).ln();
    let normal: Vec<f64> = (0..20)
        .map(|t| differential_entropy(&gaussian(&mut ChaCha8Rng::seed_from_u64(300 + t), 2000, 2, &[0.0, 0.0]), 4).unwrap())
        .collect();
    let unif: Vec<f64> = (0..20)
        .map(|t| differential_entropy(&uniform(&mut ChaCha8Rng::seed_from_u64(400 + t), 2000, 2), 4).unwrap())
        .collect();
    let (hn, hu) = (mean(&normal), mean(&unif));
    check(
        (hn - target).abs() <= ENTROPY_TOL && hu.abs() <= ENTROPY_TOL,
        format!("normal {hn:.4} vs {target:.4}, uniform {hu:.4} vs 0 (tol {ENTROPY_TOL})"),
    )
}

fn homogeneity() -> Outcome {
    let x = gaussian(&mut ChaCha8Rng::seed_from_u64(500), 1000, 3, &[0.0; 3]);
    let h = differential_entropy(&x, 4).unwrap();
    let mut worst = 0.0f64;
    for a in [0.5, 2.0, 10.0] {
        let ha = differential_entropy(&x.scaled(a), 4).unwrap();
        worst = worst.max((ha - h - 3.0 * f64::ln(a)).abs());
    }
    check(worst <= HOMOGENEITY_TOL, format!("max |h(aX) - h(X) - d ln a| = {worst:.2e}"))
}

fn brute_vs_tree() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(600);
    let dims = [2, 8, 12];
    for f in 0..50 {
        let d = dims[f % 3];
        let n = rng.random_range(20..=2000);
        let m = rng.random_range(20..=2000);
        let k = rng.random_range(1..=8);
        let x = gaussian(&mut rng, m, d, &vec![0.0; d]);
        let y = gaussian(&mut rng, n, d, &vec![0.3; d]);
        let kb = kl_divergence_with(&x, &y, k, Search::BruteForce).unwrap();
        let kt = kl_divergence_with(&x, &y, k, Search::KdTree).unwrap();
        let hb = differential_entropy_with(&y, k, Search::BruteForce).unwrap();
        let ht = differential_entropy_with(&y, k, Search::KdTree).unwrap();
        if kb.to_bits() != kt.to_bits() || hb.to_bits() != ht.to_bits() {
            return Err(format!("fixture {f} (d={d}, n={n}, m={m}, k={k}) differs"));
        }
    }
    Ok("50 fixtures bit-identical".into())
}

/// Five well separated clusters in a 64-dimensional embedding space plus a
/// sixth cluster that the mixture never contains.
struct Clusters {
    mixture: EmbeddingMatrix,
    single: EmbeddingMatrix,
    member: EmbeddingMatrix,
    disjoint: EmbeddingMatrix,
}

fn clusters() -> Clusters {
    const D: usize = 64;
    let mut rng = ChaCha8Rng::seed_from_u64(700);
    let centers: Vec<Vec<f64>> = (0..6).map(|_| (0..D).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()).collect();
    let mut draw = |name: &str, groups: &[usize], per: usize| {
        let rows = groups
            .iter()
            .flat_map(|&g| std::iter::repeat_n(g, per))
            .enumerate()
            .map(|(i, g)| EmbeddingRow {
                id: format!("{name}-{i}"),
                vector: centers[g].iter().map(|c| c + 0.15 * rng.sample::<f64, _>(StandardNormal)).collect(),
            })
            .collect();
        EmbeddingMatrix::new(name, "synthetic", D, rows)
    };
    Clusters {
        mixture: draw("mixture", &[0, 1, 2, 3, 4], 120),
        single: draw("single", &[0], 600),
        member: draw("member", &[0], 300),
        disjoint: draw("disjoint", &[5], 300),
    }
}

fn projection() -> ProjectionConfig {
    ProjectionConfig { method: ProjectionMethod::RandomProjection, runs: 10, seed: 11, ..ProjectionConfig::default() }
}

fn cluster_orderings() -> Outcome {
    let c = clusters();
    let settings = MeasureSettings { projection: projection(), trials: 30, seed: 5, ..MeasureSettings::default() };
    let div = measure_diversity(&[c.mixture.clone(), c.single.clone()], &settings).map_err(|e| e.to_string())?;
    let nov = measure_novelty(&[c.disjoint.clone(), c.member.clone()], &c.mixture, &settings).map_err(|e| e.to_string())?;
    let iv = |v: f64, h: f64| (v - h, v + h);
    let (hm, hs) = (&div[0], &div[1]);
    let (kd, km) = (&nov[0], &nov[1]);
    let entropy_ok = hm.value > hs.value && intervals_disjoint(iv(hm.value, hm.ci95), iv(hs.value, hs.ci95));
    let kl_ok = kd.value > km.value && intervals_disjoint(iv(kd.value, kd.ci95), iv(km.value, km.ci95));
    check(
        entropy_ok && kl_ok,
        format!(
            "H(mixture) {:.3}±{:.3} vs H(single) {:.3}±{:.3}; KL(disjoint) {:.3}±{:.3} vs KL(member) {:.3}±{:.3}",
            hm.value, hm.ci95, hs.value, hs.ci95, kd.value, kd.ci95, km.value, km.ci95
        ),
    )
}

fn shingles(text: &str) -> BTreeSet<Vec<&str>> {
    let toks: Vec<&str> = text.split_whitespace().collect();
    toks.windows(3).map(<[&str]>::to_vec).collect()
}

fn oracle_jaccard(a: &str, b: &str) -> f64 {
    let (sa, sb) = (shingles(a), shingles(b));
    sa.intersection(&sb).count() as f64 / sa.union(&sb).count() as f64
}

fn random_statement(rng: &mut ChaCha8Rng, len: usize) -> String {
    (0..len).map(|_| format!("w{}", rng.random_range(0..5000))).collect::<Vec<_>>().join(" ")
}

fn dedup_contract() -> Outcome {
    let mut flagged = 0;
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(800 + seed);
        let mut texts: Vec<String> = (0..500).map(|_| random_statement(&mut rng, 21)).collect();
        // 21 tokens with the last one replaced: 18 shared of 20 shingles
        let base = texts[0].clone();
        let mut near: Vec<&str> = base.split_whitespace().collect();
        near[20] = "planted";
        let near = near.join(" ");
        // three tokens replaced near the end: below the threshold
        let mut below: Vec<&str> = texts[1].split_whitespace().collect();
        below[14] = "x1";
        below[17] = "x2";
        below[20] = "x3";
        let below = below.join(" ");
        let exact = texts[2].clone();
        let j_near = oracle_jaccard(&base, &near);
        let j_below = oracle_jaccard(&texts[1], &below);
        if (j_near - 0.9).abs() > 1e-12 || j_below >= 0.75 {
            return Err(format!("fixture construction: J={j_near}, {j_below}"));
        }
        texts.push(near.clone());
        texts.push(below);
        texts.push(exact.clone());
        texts.shuffle(&mut rng);
        let ids: Vec<String> = (0..texts.len()).map(|i| format!("p{i}")).collect();
        let config = DedupConfig { seed, ..DedupConfig::default() };
        let (_, log) = dedup_texts(&ids, &texts, &config).map_err(|e| e.to_string())?;
        let text_of = |id: &str| texts[id[1..].parse::<usize>().unwrap()].as_str();
        for e in &log {
            let j = oracle_jaccard(text_of(&e.kept), text_of(&e.dropped));
            if j < 0.75 {
                return Err(format!("seed {seed}: merged pair with Jaccard {j:.3}"));
            }
        }
        if log.iter().filter(|e| text_of(&e.dropped) == exact && text_of(&e.kept) == exact).count() != 1 {
            return Err(format!("seed {seed}: exact duplicate not removed"));
        }
        let pair = |e: &&benchsynth::dedup::RemovalEntry| {
            let (a, b) = (text_of(&e.kept), text_of(&e.dropped));
            (a == base && b == near) || (a == near && b == base)
        };
        if !log.iter().any(|e| pair(&e)) {
            continue;
        }
        flagged += 1;
    }
    check(flagged >= DEDUP_MIN_FLAGGED, format!("planted pair flagged in {flagged}/20 seeds"))
}

fn brute_kfn(cands: &[Vec<f64>], refs: &[Vec<f64>], keep: usize) -> Vec<usize> {
    let score = |i: usize| refs.iter().map(|u| cosine(&cands[i], u)).fold(f64::NEG_INFINITY, f64::max);
    let scores: Vec<f64> = (0..cands.len()).map(score).collect();
    let n = cands.len();
    let keep = keep.min(n);
    let mut best: Option<(f64, Vec<usize>)> = None;
    for mask in 0u32..(1 << n) {
        if mask.count_ones() as usize != keep {
            continue;
        }
        let subset: Vec<usize> = (0..n).filter(|i| mask & (1 << i) != 0).collect();
        // sort key: scores ascending, then indices, compared lexicographically
        let mut key: Vec<(f64, usize)> = subset.iter().map(|&i| (scores[i], i)).collect();
        key.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let total: f64 = subset.iter().map(|&i| scores[i]).sum();
        let better = match &best {
            None => true,
            Some((t, s)) => {
                let mut sk: Vec<(f64, usize)> = s.iter().map(|&i| (scores[i], i)).collect();
                sk.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
                total < *t || (total == *t && key.iter().zip(&sk).map(|(a, b)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1))).find(|o| o.is_ne()) == Some(std::cmp::Ordering::Less))
            }
        };
        if better {
            best = Some((total, subset));
        }
    }
    best.map(|(_, s)| s).unwrap_or_default()
}

fn kfn_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(900);
    for trial in 0..100 {
        let n = rng.random_range(1..=20);
        let d = rng.random_range(2..=6);
        let keep = rng.random_range(1..=4);
        let vecs = |rng: &mut ChaCha8Rng, count: usize| -> Vec<Vec<f64>> {
            (0..count).map(|_| (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()).collect()
        };
        let cands = vecs(&mut rng, n);
        let n_refs = rng.random_range(1..=10);
        let refs = vecs(&mut rng, n_refs);
        let got = kfn_select(&cands, &refs, keep);
        let want = brute_kfn(&cands, &refs, keep);
        if got != want {
            return Err(format!("trial {trial}: selected {got:?}, enumeration {want:?}"));
        }
    }
    Ok("100 trials agree".into())
}

fn mock_answer(req: &CompletionRequest) -> String {
    let h = hex::encode(&Sha256::digest(req.prompt.as_bytes())[..6]);
    match req.tag {
        Tag::Mutation | Tag::Crossover => {
            let words: Vec<String> = h.as_bytes().chunks(2).map(|c| format!("t{}", String::from_utf8_lossy(c))).collect();
            format!("Write a function that handles {}.", words.join(" "))
        }
        Tag::Solution | Tag::Feedback => {
            let question = req.prompt.rsplit("## Question:\n").next().unwrap_or_default();
            let q = hex::encode(Sha256::digest(question.as_bytes()));
            let bug = if q.as_bytes()[0] < b'6' { "  # BUG" } else { "" };
            format!(
                "<|Solution Begin|>\ndef solution(x):\n    return x{bug}\n<|Solution End|>\n<|Test Begin|>\ndef test_a():\n    assert solution(1) == 1\n\ndef test_b():\n    assert solution(2) == 2\n<|Test End|>"
            )
        }
        Tag::Postprocess => "Rephrased: returns the input unchanged.".into(),
        Tag::Topic => r#"{"topics": ["Math"]}"#.into(),
        Tag::Evaluate => String::new(),
    }
}

fn stub_sandbox(req: &SandboxRequest) -> SandboxReport {
    let outcome = if req.solution_source.contains("BUG") { TestOutcome::Fail } else { TestOutcome::Pass };
    let per_test = benchsynth::sandbox::test_function_names(&req.tests_source)
        .into_iter()
        .map(|name| TestResult { name, outcome, message: String::new() })
        .collect();
    let mut r = SandboxReport::ok(&req.request_id, per_test);
    r.executable_lines = 2;
    r.executed_lines = 2;
    r
}

fn run_pipeline() -> PipelineOutput {
    let mut config = PipelineConfig::default();
    config.evolve.total_problems = 40;
    config.evolve.colonies = 2;
    config.evolve.colony_seed_size = 10;
    config.evolve.feedback_iterations = 3;
    config.evolve.seed = 17;
    let seeds = DatasetManifest::new(
        "seeds",
        (0..30).map(|i| ProblemRecord::seed(format!("s{i}"), format!("Seed task {i} about quantity {}", i * 7))).collect(),
    );
    let gw = Gateway::new(Arc::new(FnProvider(|r: &CompletionRequest| Ok(mock_answer(r))))).with_retry(RetryPolicy::none());
    let sb = FnSandbox(stub_sandbox);
    let services = Services { gateway: &gw, sandbox: &sb, embedder: None, checkpoint_dir: None };
    generate(&config, &seeds, &services).expect("pipeline runs")
}

fn pipeline_determinism() -> Outcome {
    let outs: Vec<PipelineOutput> = (0..3).map(|_| run_pipeline()).collect();
    let finals: Vec<String> = outs.iter().map(|o| to_jsonl(&o.final_manifest)).collect();
    let pre: Vec<String> = outs.iter().map(|o| to_jsonl(&o.prefilter_manifest)).collect();
    if finals.iter().any(|f| *f != finals[0]) || pre.iter().any(|p| *p != pre[0]) {
        return Err("manifests differ across repetitions".into());
    }
    let out = &outs[0];
    let rep = &out.report;
    rep.check_ledger()?;
    let failing: HashSet<&str> =
        out.prefilter_manifest.records.iter().filter(|r| r.status != Status::Passing).map(|r| r.id.as_str()).collect();
    let pooled: HashSet<&str> = rep.colonies.iter().flat_map(|c| c.final_pool.iter().map(String::as_str)).collect();
    let failing_pooled = failing.iter().filter(|id| pooled.contains(**id)).count();
    let generated = out.prefilter_manifest.len();
    let passing = out.prefilter_manifest.records.iter().filter(|r| r.status == Status::Passing).count();
    let avg_tests = mean(&out.final_manifest.records.iter().map(|r| f64::from(r.test_count)).collect::<Vec<_>>());
    let ledger_ok = rep.generated == generated
        && rep.passing == passing
        && rep.filtered == generated - passing
        && out.final_manifest.len() == passing
        && (rep.avg_tests - avg_tests).abs() < 1e-12
        && rep.pre_dedup >= 40;
    check(
        !failing.is_empty() && failing_pooled > 0 && ledger_ok,
        format!(
            "3 identical runs; generated {} passing {} filtered {} avg-tests {:.2}; {failing_pooled}/{} failed problems in seed pools",
            rep.generated,
            rep.passing,
            rep.filtered,
            rep.avg_tests,
            failing.len()
        ),
    )
}

const BUGGY: &str = "<|Solution Begin|>\ndef add(a, b):\n    return a - b  # BUG\n<|Solution End|>\n<|Test Begin|>\ndef test_add():\n    assert add(1, 2) == 3\n<|Test End|>";
const FIXED: &str = "<|Solution Begin|>\ndef add(a, b):\n    return a + b\n<|Solution End|>\n<|Test Begin|>\ndef test_add():\n    assert add(1, 2) == 3\n<|Test End|>";

fn feedback_contract() -> Outcome {
    let problem = ProblemRecord::seed("p", "Write a function that adds two numbers.");
    let sb = FnSandbox(stub_sandbox);
    let settings = FeedbackSettings::new("mock", 3);
    let calls = |gw: &Gateway| gw.call_count(Tag::Solution) + gw.call_count(Tag::Feedback);

    let gw = Gateway::new(Arc::new(MockProvider::queue([BUGGY, FIXED]))).with_retry(RetryPolicy::none());
    let fixed = feedback_loop(&gw, &sb as &dyn Sandbox, &problem, &settings).map_err(|e| e.to_string())?;
    let gw1 = Gateway::new(Arc::new(MockProvider::queue([FIXED]))).with_retry(RetryPolicy::none());
    let first = feedback_loop(&gw1, &sb as &dyn Sandbox, &problem, &settings).map_err(|e| e.to_string())?;
    check(
        fixed.category == Category::Passing
            && fixed.attempts_used == 2
            && calls(&gw) == 2
            && first.category == Category::Passing
            && first.attempts_used == 1
            && calls(&gw1) == 1,
        format!(
            "fix-on-2: {:?} after {} attempts, {} calls; pass-on-1: {:?} after {} attempts, {} calls",
            fixed.category,
            fixed.attempts_used,
            calls(&gw),
            first.category,
            first.attempts_used,
            calls(&gw1)
        ),
    )
}

fn sweep_stability() -> Outcome {
    let c = clusters();
    let datasets = [c.mixture, c.member, c.disjoint];
    let mut summary = Vec::new();
    for nn in [30, 80] {
        let projection = ProjectionConfig { n_neighbors: nn, ..projection() };
        let settings = MeasureSettings { projection, ..MeasureSettings::default() };
        let rows = sweep(SweepParam::K, &[2.0, 4.0, 8.0, 16.0], Metric::Novelty, &datasets, &settings).map_err(|e| e.to_string())?;
        for k in [2.0, 4.0, 8.0, 16.0] {
            let at = |name: &str| rows.iter().find(|r| r.value == k && r.dataset == name).map(|r| r.estimate).unwrap();
            let (m, d) = (at("member"), at("disjoint"));
            if d <= m {
                return Err(format!("n-neighbors {nn}, k {k}: disjoint {d:.3} <= member {m:.3}"));
            }
            summary.push(d - m);
        }
    }
    let min_gap = summary.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(format!("ranking stable over 8 settings, min gap {min_gap:.3}"))
}

type Criterion = (&'static str, fn() -> Outcome);

fn main() {
    let criteria: [Criterion; 11] = [
        ("estimator: KL of shifted Gaussians", kl_gaussian_shift),
        ("estimator: KL null", kl_null),
        ("estimator: entropy of Gaussian and uniform", entropy_oracles),
        ("estimator: entropy homogeneity", homogeneity),
        ("oracle equivalence: kd-tree vs brute force", brute_vs_tree),
        ("cluster orderings with disjoint CIs", cluster_orderings),
        ("dedup contract", dedup_contract),
        ("k-FN selection vs subset enumeration", kfn_equivalence),
        ("pipeline determinism and ledger", pipeline_determinism),
        ("feedback-loop contract", feedback_contract),
        ("sweep stability", sweep_stability),
    ];
    let mut failed = 0;
    for (name, f) in criteria {
        let start = Instant::now();
        let result = std::panic::catch_unwind(f).unwrap_or_else(|_| Err("panicked".into()));
        let secs = start.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("PASS  {name}: {detail} ({secs:.1}s)"),
            Err(detail) => {
                failed += 1;
                println!("FAIL  {name}: {detail} ({secs:.1}s)");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
