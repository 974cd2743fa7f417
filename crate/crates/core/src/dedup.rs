//! Near-duplicate removal with MinHash signatures and LSH banding.
//!
//! Banding only proposes candidate pairs; a pair is merged only when the
//! exact Jaccard similarity of the shingle sets reaches the threshold.

use std::collections::{BTreeSet, HashMap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::DatasetManifest;

/// Mersenne prime 2^61 - 1 used for the universal hash family.
const MERSENNE_61: u64 = (1 << 61) - 1;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum DedupError {
    #[error("cannot sign an empty shingle set")]
    EmptyShingles,
    #[error("bands x rows ({bands} x {rows}) must equal the permutation count {perms}")]
    Banding { bands: usize, rows: usize, perms: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DedupConfig {
    pub threshold: f64,
    pub shingle_width: usize,
    pub permutations: usize,
    pub bands: usize,
    pub rows: usize,
    pub seed: u64,
}

impl Default for DedupConfig {
    fn default() -> Self {
        Self {
            threshold: 0.75,
            shingle_width: 3,
            permutations: 250,
            bands: 25,
            rows: 10,
            seed: 1,
        }
    }
}

impl DedupConfig {
    pub fn validate(&self) -> Result<(), DedupError> {
        if self.bands * self.rows != self.permutations {
            return Err(DedupError::Banding { bands: self.bands, rows: self.rows, perms: self.permutations });
        }
        Ok(())
    }

    /// Similarity at which a pair collides in some band with probability ~1/2.
    pub fn lsh_threshold(&self) -> f64 {
        (1.0 / self.bands as f64).powf(1.0 / self.rows as f64)
    }
}

/// Lowercase, strip punctuation, split on whitespace.
pub fn tokens(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split_whitespace()
        .map(|t| t.chars().filter(|c| c.is_alphanumeric() || *c == '_').collect::<String>())
        .filter(|t| !t.is_empty())
        .collect()
}

/// Set of whitespace-token w-grams. Texts shorter than `w` tokens yield a
/// single shingle holding all their tokens.
pub fn shingle(text: &str, w: usize) -> BTreeSet<String> {
    let w = w.max(1);
    let toks = tokens(text);
    if toks.len() < w {
        return BTreeSet::from([toks.join(" ")]);
    }
    toks.windows(w).map(|g| g.join(" ")).collect()
}

pub fn jaccard(a: &BTreeSet<String>, b: &BTreeSet<String>) -> f64 {
    let inter = a.intersection(b).count();
    let union = a.len() + b.len() - inter;
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// FNV-1a, fixed across platforms and releases.
fn base_hash(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MinHashSignature {
    pub problem_id: String,
    pub values: Vec<u64>,
    pub permutation_seed: u64,
}

impl MinHashSignature {
    pub fn agreement(&self, other: &MinHashSignature) -> f64 {
        let same = self.values.iter().zip(&other.values).filter(|(a, b)| a == b).count();
        same as f64 / self.values.len() as f64
    }
}

/// Family of `perms` hash functions `h_i(x) = (a_i * x + b_i) mod (2^61 - 1)`.
#[derive(Debug, Clone)]
pub struct MinHasher {
    seed: u64,
    coeffs: Vec<(u64, u64)>,
}

impl MinHasher {
    pub fn new(perms: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let coeffs = (0..perms)
            .map(|_| (rng.random_range(1..MERSENNE_61), rng.random_range(0..MERSENNE_61)))
            .collect();
        Self { seed, coeffs }
    }

    pub fn len(&self) -> usize {
        self.coeffs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coeffs.is_empty()
    }

    pub fn signature(&self, id: &str, shingles: &BTreeSet<String>) -> Result<MinHashSignature, DedupError> {
        if shingles.is_empty() {
            return Err(DedupError::EmptyShingles);
        }
        let mut values = vec![u64::MAX; self.coeffs.len()];
        for s in shingles {
            let x = base_hash(s) % MERSENNE_61;
            for (v, &(a, b)) in values.iter_mut().zip(&self.coeffs) {
                let h = ((u128::from(a) * u128::from(x) + u128::from(b)) % u128::from(MERSENNE_61)) as u64;
                if h < *v {
                    *v = h;
                }
            }
        }
        Ok(MinHashSignature { problem_id: id.to_string(), values, permutation_seed: self.seed })
    }
}

pub fn signature(id: &str, shingles: &BTreeSet<String>, perms: usize, seed: u64) -> Result<MinHashSignature, DedupError> {
    MinHasher::new(perms, seed).signature(id, shingles)
}

/// One merged pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemovalEntry {
    pub kept: String,
    pub dropped: String,
    pub jaccard: f64,
    /// Number of bands in which the pair collided.
    pub band_hits: usize,
}

/// Banded LSH index over retained items.
struct LshIndex {
    bands: usize,
    rows: usize,
    buckets: Vec<HashMap<u64, Vec<usize>>>,
}

impl LshIndex {
    fn new(bands: usize, rows: usize) -> Self {
        Self { bands, rows, buckets: vec![HashMap::new(); bands] }
    }

    fn band_key(&self, sig: &MinHashSignature, band: usize) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ band as u64;
        for v in &sig.values[band * self.rows..(band + 1) * self.rows] {
            for b in v.to_le_bytes() {
                h ^= u64::from(b);
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        }
        h
    }

    /// Candidates (in insertion order) with their band-hit counts.
    fn query(&self, sig: &MinHashSignature) -> Vec<(usize, usize)> {
        let mut hits: HashMap<usize, usize> = HashMap::new();
        for b in 0..self.bands {
            if let Some(items) = self.buckets[b].get(&self.band_key(sig, b)) {
                for &i in items {
                    *hits.entry(i).or_default() += 1;
                }
            }
        }
        let mut out: Vec<(usize, usize)> = hits.into_iter().collect();
        out.sort_unstable();
        out
    }

    fn insert(&mut self, sig: &MinHashSignature, item: usize) {
        for b in 0..self.bands {
            let key = self.band_key(sig, b);
            self.buckets[b].entry(key).or_default().push(item);
        }
    }
}

/// Incremental near-duplicate filter: items are admitted in arrival order and
/// rejected when they match an already admitted item.
pub struct NearDupIndex {
    config: DedupConfig,
    hasher: MinHasher,
    lsh: LshIndex,
    ids: Vec<String>,
    shingles: Vec<BTreeSet<String>>,
}

impl NearDupIndex {
    pub fn new(config: &DedupConfig) -> Result<Self, DedupError> {
        config.validate()?;
        Ok(Self {
            config: *config,
            hasher: MinHasher::new(config.permutations, config.seed),
            lsh: LshIndex::new(config.bands, config.rows),
            ids: Vec::new(),
            shingles: Vec::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Admit `text` unless it duplicates an admitted item; on rejection the
    /// entry names the earliest matching item.
    pub fn admit(&mut self, id: &str, text: &str) -> Result<Option<RemovalEntry>, DedupError> {
        let sh = shingle(text, self.config.shingle_width);
        let sig = self.hasher.signature(id, &sh)?;
        let dup = self.lsh.query(&sig).into_iter().find_map(|(j, band_hits)| {
            let jac = jaccard(&self.shingles[j], &sh);
            (jac >= self.config.threshold).then_some((j, jac, band_hits))
        });
        if let Some((j, jac, band_hits)) = dup {
            return Ok(Some(RemovalEntry {
                kept: self.ids[j].clone(),
                dropped: id.to_string(),
                jaccard: jac,
                band_hits,
            }));
        }
        self.lsh.insert(&sig, self.ids.len());
        self.ids.push(id.to_string());
        self.shingles.push(sh);
        Ok(None)
    }
}

/// Stable near-duplicate filter over texts: returns retained indices and the
/// removal log.
pub fn dedup_texts<S: AsRef<str>>(
    ids: &[S],
    texts: &[S],
    config: &DedupConfig,
) -> Result<(Vec<usize>, Vec<RemovalEntry>), DedupError> {
    let mut index = NearDupIndex::new(config)?;
    let mut retained = Vec::new();
    let mut log = Vec::new();
    for (i, (id, text)) in ids.iter().zip(texts).enumerate() {
        match index.admit(id.as_ref(), text.as_ref())? {
            Some(entry) => log.push(entry),
            None => retained.push(i),
        }
    }
    Ok((retained, log))
}

/// Drop near-duplicate statements, keeping the earliest record of each group.
pub fn deduplicate(manifest: &DatasetManifest, config: &DedupConfig) -> Result<(DatasetManifest, Vec<RemovalEntry>), DedupError> {
    let ids: Vec<&str> = manifest.records.iter().map(|r| r.id.as_str()).collect();
    let texts: Vec<&str> = manifest.records.iter().map(|r| r.statement.as_str()).collect();
    let (keep, log) = dedup_texts(&ids, &texts, config)?;
    let mut out = manifest.clone();
    out.records = keep.into_iter().map(|i| manifest.records[i].clone()).collect();
    Ok((out, log))
}

pub fn removal_log_jsonl(log: &[RemovalEntry]) -> String {
    log.iter()
        .map(|e| serde_json::to_string(e).expect("removal entry serializes") + "\n")
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::ProblemRecord;
    use proptest::prelude::*;

    #[test]
    fn shingle_examples() {
        assert_eq!(shingle("a b c", 2), BTreeSet::from(["a b".to_string(), "b c".to_string()]));
        assert_eq!(shingle("Hello, World!", 3), BTreeSet::from(["hello world".to_string()]));
        assert_eq!(shingle("", 3).len(), 1);
    }

    proptest! {
        #[test]
        fn shingle_count_for_distinct_tokens(n in 0usize..40, w in 1usize..6) {
            let text: Vec<String> = (0..n).map(|i| format!("tok{i}")).collect();
            let s = shingle(&text.join(" "), w);
            prop_assert_eq!(s.len(), std::cmp::max(1, n as isize - w as isize + 1) as usize);
        }

        #[test]
        fn same_text_same_signature(text in "[a-z ]{1,80}", seed in any::<u64>()) {
            let s = shingle(&text, 3);
            prop_assert_eq!(signature("a", &s, 32, seed).unwrap().values, signature("b", &s, 32, seed).unwrap().values);
        }
    }

    #[test]
    fn empty_set_is_error() {
        assert_eq!(signature("x", &BTreeSet::new(), 10, 0), Err(DedupError::EmptyShingles));
    }

    #[test]
    fn disjoint_sets_rarely_agree() {
        let a: BTreeSet<String> = (0..100).map(|i| format!("a{i}")).collect();
        let b: BTreeSet<String> = (0..100).map(|i| format!("b{i}")).collect();
        let h = MinHasher::new(250, 3);
        let agree = h.signature("a", &a).unwrap().agreement(&h.signature("b", &b).unwrap());
        assert!(agree < 0.05, "{agree}");
    }

    #[test]
    fn agreement_tracks_jaccard() {
        // |A ∩ B| = 80, |A ∪ B| = 100
        let a: BTreeSet<String> = (0..90).map(|i| format!("s{i}")).collect();
        let b: BTreeSet<String> = (10..100).map(|i| format!("s{i}")).collect();
        assert!((jaccard(&a, &b) - 0.8).abs() < 1e-12);
        let mean: f64 = (0..50)
            .map(|seed| {
                let h = MinHasher::new(250, seed);
                h.signature("a", &a).unwrap().agreement(&h.signature("b", &b).unwrap())
            })
            .sum::<f64>()
            / 50.0;
        assert!((mean - 0.8).abs() <= 0.06, "{mean}");
    }

    #[test]
    fn exact_duplicates_collapse() {
        let m = DatasetManifest::new("d", vec![
            ProblemRecord::seed("p1", "Write a function to reverse a string."),
            ProblemRecord::seed("p2", "Compute the nth Fibonacci number iteratively."),
            ProblemRecord::seed("p3", "Write a function to reverse a string."),
        ]);
        let (kept, log) = deduplicate(&m, &DedupConfig::default()).unwrap();
        assert_eq!(kept.records.iter().map(|r| r.id.as_str()).collect::<Vec<_>>(), vec!["p1", "p2"]);
        assert_eq!(log.len(), 1);
        assert_eq!((log[0].kept.as_str(), log[0].dropped.as_str(), log[0].jaccard), ("p1", "p3", 1.0));
        assert_eq!(log[0].band_hits, 25);
    }

    #[test]
    fn defaults() {
        let c = DedupConfig::default();
        assert_eq!((c.permutations, c.threshold, c.bands, c.rows), (250, 0.75, 25, 10));
        assert!((c.lsh_threshold() - 0.7248).abs() < 1e-3);
        let bad = DedupConfig { bands: 20, ..c };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn deterministic_under_seed() {
        let texts: Vec<String> = (0..50).map(|i| format!("problem {} about {}", i % 7, i % 3)).collect();
        let ids: Vec<String> = (0..50).map(|i| format!("p{i}")).collect();
        let a = dedup_texts(&ids, &texts, &DedupConfig::default()).unwrap();
        let b = dedup_texts(&ids, &texts, &DedupConfig::default()).unwrap();
        assert_eq!(a, b);
    }
}
