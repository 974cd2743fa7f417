//! Fixed topic bank used for problem labeling.

use std::collections::{BTreeMap, HashSet};
use std::sync::LazyLock;

const BANK_FILE: &str = include_str!("../assets/topic_bank.txt");

/// Allowed topic labels, in bank order.
pub static TOPIC_BANK: LazyLock<Vec<&'static str>> = LazyLock::new(|| {
    BANK_FILE
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .collect()
});

static BANK_SET: LazyLock<HashSet<&'static str>> =
    LazyLock::new(|| TOPIC_BANK.iter().copied().collect());

pub const MAX_TOPICS: usize = 3;

/// Exact-spelling membership test.
pub fn is_bank_topic(topic: &str) -> bool {
    BANK_SET.contains(topic)
}

/// Fraction of problems carrying each topic.
///
/// Problems without labels still count toward the denominator.
pub fn topic_fractions<'a, I>(labels: I) -> BTreeMap<String, f64>
where
    I: IntoIterator<Item = &'a [String]>,
{
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    let mut total = 0usize;
    for topics in labels {
        total += 1;
        let mut seen = HashSet::new();
        for t in topics {
            if seen.insert(t.as_str()) {
                *counts.entry(t.clone()).or_default() += 1;
            }
        }
    }
    counts
        .into_iter()
        .map(|(t, c)| (t, c as f64 / total.max(1) as f64))
        .collect()
}
