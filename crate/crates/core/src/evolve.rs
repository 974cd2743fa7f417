//! Colony-based genetic generation: mutation, crossover and optional
//! k-farthest-neighbor selection.

use std::collections::HashMap;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::{DatasetManifest, ProblemRecord, Provenance};
use crate::dedup::{deduplicate, DedupConfig, DedupError, NearDupIndex, RemovalEntry};
use crate::embedding::{cosine, EmbeddingProvider};
use crate::gateway::{CompletionRequest, Gateway, GatewayError, ProviderError, Tag};
use crate::prompts;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Difficulty {
    Easier,
    Equal,
    Harder,
}

impl Difficulty {
    pub const ALL: [Difficulty; 3] = [Difficulty::Easier, Difficulty::Equal, Difficulty::Harder];

    pub fn provenance(self) -> Provenance {
        match self {
            Difficulty::Easier => Provenance::MutationEasy,
            Difficulty::Equal => Provenance::MutationMedium,
            Difficulty::Harder => Provenance::MutationHard,
        }
    }
}

#[derive(Debug, Error)]
pub enum EvolveError {
    #[error("invalid generation config: {0}")]
    Config(String),
    #[error("seed dataset has {have} problems, need at least {need}")]
    TooFewSeeds { have: usize, need: usize },
    #[error("k-farthest-neighbor selection enabled but no embedding provider configured")]
    NoEmbedder,
    #[error("embedding failed: {0}")]
    Embedding(String),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Dedup(#[from] DedupError),
    #[error("checkpoint {path}: {message}")]
    Checkpoint { path: PathBuf, message: String },
}

/// Parameters of the colony algorithm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenerationConfig {
    pub name: String,
    /// N: total problems to generate.
    pub total_problems: usize,
    /// N_c
    pub colonies: usize,
    /// B_s: seeds sampled per colony.
    pub colony_seed_size: usize,
    /// C: problems per crossover call batch.
    pub crossover_outputs: usize,
    /// B_c: problems fed into one crossover.
    pub crossover_batch: usize,
    /// N_it
    pub feedback_iterations: usize,
    pub p_mutation: f64,
    pub kfn_enabled: bool,
    pub kfn_keep_mutation: usize,
    pub kfn_keep_crossover: usize,
    pub mutation_difficulties: Vec<Difficulty>,
    pub seed: u64,
    pub generator_model: String,
    /// Safety stop for colonies whose generator keeps producing duplicates.
    pub max_rounds: usize,
    /// Filled from the `[dedup]` section of a pipeline config.
    #[serde(skip_deserializing)]
    pub dedup: DedupConfig,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            name: "generated".into(),
            total_problems: 1000,
            colonies: 10,
            colony_seed_size: 30,
            crossover_outputs: 2,
            crossover_batch: 5,
            feedback_iterations: 5,
            p_mutation: 0.5,
            kfn_enabled: false,
            kfn_keep_mutation: 2,
            kfn_keep_crossover: 2,
            mutation_difficulties: Difficulty::ALL.to_vec(),
            seed: 0,
            generator_model: "gpt-4o".into(),
            max_rounds: 10_000,
            dedup: DedupConfig::default(),
        }
    }
}

pub const PRESETS: [&str; 6] = [
    "mbpp-new",
    "mbpp-hard",
    "leetcode-new",
    "mbpp-guided",
    "mbpp-hard-guided",
    "leetcode-guided",
];

impl GenerationConfig {
    /// Published parameter sets by dataset name.
    pub fn preset(name: &str) -> Option<Self> {
        let (n, b_s, c, b_c, n_it) = match name {
            "mbpp-new" => (1000, 30, 2, 5, 5),
            "mbpp-hard" => (500, 15, 1, 4, 5),
            "leetcode-new" => (1000, 30, 2, 4, 5),
            "mbpp-guided" => (1000, 30, 3, 5, 3),
            "mbpp-hard-guided" => (500, 15, 3, 4, 3),
            "leetcode-guided" => (1000, 30, 3, 4, 3),
            _ => return None,
        };
        let mutation_difficulties = if name.contains("hard") {
            vec![Difficulty::Harder]
        } else {
            Difficulty::ALL.to_vec()
        };
        Some(Self {
            name: name.into(),
            total_problems: n,
            colonies: 10,
            colony_seed_size: b_s,
            crossover_outputs: c,
            crossover_batch: b_c,
            feedback_iterations: n_it,
            kfn_enabled: name.ends_with("guided"),
            mutation_difficulties,
            ..Self::default()
        })
    }

    pub fn validate(&self) -> Result<(), EvolveError> {
        let fail = |m: &str| Err(EvolveError::Config(m.into()));
        if self.colonies == 0 {
            return fail("colonies must be >= 1");
        }
        if self.total_problems < self.colonies {
            return fail("total_problems must be at least the number of colonies");
        }
        if self.crossover_batch < 2 {
            return fail("crossover_batch must be >= 2");
        }
        if self.crossover_batch > self.colony_seed_size {
            return fail("crossover_batch cannot exceed colony_seed_size");
        }
        if self.crossover_outputs == 0 {
            return fail("crossover_outputs must be >= 1");
        }
        if self.feedback_iterations == 0 {
            return fail("feedback_iterations must be >= 1");
        }
        if !(0.0..=1.0).contains(&self.p_mutation) {
            return fail("p_mutation must lie in [0, 1]");
        }
        if self.p_mutation > 0.0 && self.mutation_difficulties.is_empty() {
            return fail("mutation_difficulties is empty");
        }
        if self.kfn_keep_mutation == 0 || self.kfn_keep_crossover == 0 {
            return fail("k-farthest-neighbor keep counts must be >= 1");
        }
        if self.max_rounds == 0 {
            return fail("max_rounds must be >= 1");
        }
        self.dedup.validate()?;
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }

    /// N_s for each colony; the remainder goes to the first colonies.
    pub fn colony_targets(&self) -> Vec<usize> {
        let base = self.total_problems / self.colonies;
        let extra = self.total_problems % self.colonies;
        (0..self.colonies).map(|c| base + usize::from(c < extra)).collect()
    }
}

/// Independent stream seed for one colony.
pub fn colony_seed(master: u64, colony: usize) -> u64 {
    let mut z = master ^ (colony as u64).wrapping_add(1).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Strip the echoed answer label and surrounding whitespace; empty means unusable.
pub fn clean_statement(text: &str) -> Option<String> {
    let mut t = text.trim();
    for label in ["New Question:", "**New Question:**"] {
        if let Some(rest) = t.strip_prefix(label) {
            t = rest.trim();
        }
    }
    (!t.is_empty()).then(|| t.to_string())
}

/// One generator call per configured difficulty. Returns (difficulty, statement)
/// for every usable completion.
pub fn mutate(
    gateway: &Gateway,
    model: &str,
    problem: &ProblemRecord,
    difficulties: &[Difficulty],
) -> Result<Vec<(Difficulty, String)>, GatewayError> {
    let mut out = Vec::new();
    for &d in difficulties {
        let req = CompletionRequest::new(Tag::Mutation, model, prompts::mutation(d, &problem.statement));
        let text = gateway.complete_for(&req, &problem.id)?;
        match clean_statement(&text) {
            Some(s) => out.push((d, s)),
            None => log::warn!("empty {d:?} mutation of {}", problem.id),
        }
    }
    Ok(out)
}

/// `outputs` crossover calls over the same batch.
pub fn crossover(gateway: &Gateway, model: &str, batch: &[&ProblemRecord], outputs: usize) -> Result<Vec<String>, GatewayError> {
    let statements: Vec<&str> = batch.iter().map(|p| p.statement.as_str()).collect();
    let prompt = prompts::crossover(&statements);
    let context = batch.iter().map(|p| p.id.as_str()).collect::<Vec<_>>().join(",");
    let mut out = Vec::new();
    for _ in 0..outputs {
        let text = gateway.complete_for(&CompletionRequest::new(Tag::Crossover, model, prompt.clone()), &context)?;
        if let Some(s) = clean_statement(&text) {
            out.push(s);
        }
    }
    if out.len() < outputs {
        log::warn!("crossover of [{context}] produced {} of {outputs} usable problems", out.len());
    }
    Ok(out)
}

/// Indices of the `keep` candidates whose maximum cosine similarity to the
/// reference set is smallest, ties broken by candidate order. Returned in
/// candidate order.
pub fn kfn_select(candidates: &[Vec<f64>], reference: &[Vec<f64>], keep: usize) -> Vec<usize> {
    let scores: Vec<f64> = candidates
        .iter()
        .map(|c| reference.iter().map(|u| cosine(c, u)).fold(f64::NEG_INFINITY, f64::max))
        .collect();
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
    order.truncate(keep.min(candidates.len()));
    order.sort_unstable();
    order
}

/// Per-colony operation counts.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ColonyStats {
    pub rounds: usize,
    pub mutations: usize,
    pub crossovers: usize,
    pub variants: usize,
    pub kfn_dropped: usize,
    pub duplicates_dropped: usize,
    pub added: usize,
}

/// Snapshot of one colony, written after every round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColonyState {
    pub colony_id: u32,
    pub round: usize,
    pub seed_pool: Vec<ProblemRecord>,
    pub new_problems: Vec<ProblemRecord>,
    pub rng_seed: u64,
    pub rng_word_pos: u64,
    pub stats: ColonyStats,
    pub fingerprint: String,
}

/// Hook that verifies freshly generated problems before they join the pools.
pub type Verifier<'a> = &'a (dyn Fn(Vec<ProblemRecord>) -> Vec<ProblemRecord> + Sync);

/// Everything a colony needs besides its state.
#[derive(Clone)]
pub struct Evolution<'a> {
    pub gateway: &'a Gateway,
    pub embedder: Option<Arc<dyn EmbeddingProvider>>,
    pub verifier: Option<Verifier<'a>>,
    pub checkpoint_dir: Option<PathBuf>,
    /// Identity recorded in checkpoints and the output manifest; defaults to
    /// the generation config fingerprint.
    pub fingerprint: Option<String>,
}

impl<'a> Evolution<'a> {
    pub fn new(gateway: &'a Gateway) -> Self {
        Self { gateway, embedder: None, verifier: None, checkpoint_dir: None, fingerprint: None }
    }

    fn checkpoint_path(&self, colony: u32) -> Option<PathBuf> {
        self.checkpoint_dir.as_ref().map(|d| d.join(format!("colony-{colony}.jsonl")))
    }
}

pub fn load_checkpoint(path: &Path) -> Result<Option<ColonyState>, EvolveError> {
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
        Err(e) => return Err(EvolveError::Checkpoint { path: path.into(), message: e.to_string() }),
    };
    match text.lines().rev().find(|l| !l.trim().is_empty()) {
        None => Ok(None),
        Some(line) => serde_json::from_str(line)
            .map(Some)
            .map_err(|e| EvolveError::Checkpoint { path: path.into(), message: e.to_string() }),
    }
}

fn append_checkpoint(path: &Path, state: &ColonyState) -> Result<(), EvolveError> {
    let err = |e: std::io::Error| EvolveError::Checkpoint { path: path.into(), message: e.to_string() };
    let mut f = OpenOptions::new().create(true).append(true).open(path).map_err(err)?;
    let line = serde_json::to_string(state).expect("state serializes");
    writeln!(f, "{line}").map_err(err)
}

struct Colony<'a> {
    state: ColonyState,
    rng: ChaCha8Rng,
    pool_index: NearDupIndex,
    new_index: NearDupIndex,
    vectors: HashMap<String, Vec<f64>>,
    ctx: &'a Evolution<'a>,
    config: &'a GenerationConfig,
}

impl<'a> Colony<'a> {
    fn start(
        id: u32,
        seeds: &DatasetManifest,
        config: &'a GenerationConfig,
        ctx: &'a Evolution<'a>,
    ) -> Result<Self, EvolveError> {
        let rng_seed = colony_seed(config.seed, id as usize);
        let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
        let mut picks = sample(&mut rng, seeds.len(), config.colony_seed_size).into_vec();
        picks.sort_unstable();
        let mut pool_index = NearDupIndex::new(&config.dedup)?;
        let mut pool = Vec::new();
        for i in picks {
            let r = &seeds.records[i];
            if pool_index.admit(&r.id, &r.statement)?.is_none() {
                pool.push(r.clone());
            }
        }
        let state = ColonyState {
            colony_id: id,
            round: 0,
            seed_pool: pool,
            new_problems: Vec::new(),
            rng_seed,
            rng_word_pos: 0,
            stats: ColonyStats::default(),
            fingerprint: ctx.fingerprint.clone().unwrap_or_else(|| config.fingerprint()),
        };
        Ok(Self {
            rng,
            pool_index,
            new_index: NearDupIndex::new(&config.dedup)?,
            vectors: HashMap::new(),
            state,
            ctx,
            config,
        })
    }

    fn resume(state: ColonyState, config: &'a GenerationConfig, ctx: &'a Evolution<'a>) -> Result<Self, EvolveError> {
        let mut rng = ChaCha8Rng::seed_from_u64(state.rng_seed);
        rng.set_word_pos(u128::from(state.rng_word_pos));
        let mut pool_index = NearDupIndex::new(&config.dedup)?;
        for r in &state.seed_pool {
            pool_index.admit(&r.id, &r.statement)?;
        }
        let mut new_index = NearDupIndex::new(&config.dedup)?;
        for r in &state.new_problems {
            new_index.admit(&r.id, &r.statement)?;
        }
        Ok(Self { state, rng, pool_index, new_index, vectors: HashMap::new(), ctx, config })
    }

    fn embed(&mut self, texts: &[&str]) -> Result<Vec<Vec<f64>>, EvolveError> {
        let embedder = self.ctx.embedder.as_ref().ok_or(EvolveError::NoEmbedder)?;
        let mut missing: Vec<String> = texts.iter().filter(|t| !self.vectors.contains_key(**t)).map(|t| t.to_string()).collect();
        missing.dedup();
        if !missing.is_empty() {
            let vecs = embedder.embed(&missing).map_err(|e: ProviderError| EvolveError::Embedding(e.message))?;
            if vecs.len() != missing.len() {
                return Err(EvolveError::Embedding(format!("{} vectors for {} texts", vecs.len(), missing.len())));
            }
            self.vectors.extend(missing.into_iter().zip(vecs));
        }
        Ok(texts.iter().map(|t| self.vectors[*t].clone()).collect())
    }

    fn round(&mut self) -> Result<(), EvolveError> {
        let cfg = self.config;
        let gw = self.ctx.gateway;
        self.state.round += 1;
        let round = self.state.round;
        let colony = self.state.colony_id;
        let pool_len = self.state.seed_pool.len();

        let mut candidates: Vec<ProblemRecord> = Vec::new();
        let keep = if self.rng.random_bool(cfg.p_mutation) {
            self.state.stats.mutations += 1;
            let parent = &self.state.seed_pool[self.rng.random_range(0..pool_len)];
            for (j, (d, s)) in mutate(gw, &cfg.generator_model, parent, &cfg.mutation_difficulties)?.into_iter().enumerate() {
                candidates.push(ProblemRecord::derived(
                    format!("g{colony}-{round}-{j}"),
                    s,
                    d.provenance(),
                    vec![parent.id.clone()],
                ));
            }
            cfg.kfn_keep_mutation
        } else {
            self.state.stats.crossovers += 1;
            let mut idx = sample(&mut self.rng, pool_len, cfg.crossover_batch.min(pool_len)).into_vec();
            idx.sort_unstable();
            let batch: Vec<&ProblemRecord> = idx.iter().map(|&i| &self.state.seed_pool[i]).collect();
            let parents: Vec<String> = batch.iter().map(|p| p.id.clone()).collect();
            for (j, s) in crossover(gw, &cfg.generator_model, &batch, cfg.crossover_outputs)?.into_iter().enumerate() {
                candidates.push(ProblemRecord::derived(
                    format!("g{colony}-{round}-{j}"),
                    s,
                    Provenance::Crossover,
                    parents.clone(),
                ));
            }
            cfg.kfn_keep_crossover
        };
        for c in &mut candidates {
            c.colony = Some(colony);
            c.iteration = round as u32;
        }
        self.state.stats.variants += candidates.len();

        if cfg.kfn_enabled && candidates.len() > keep {
            // the pool already contains every new problem, so it is U
            let pool_texts: Vec<String> = self.state.seed_pool.iter().map(|r| r.statement.clone()).collect();
            let pool_refs: Vec<&str> = pool_texts.iter().map(String::as_str).collect();
            let reference = self.embed(&pool_refs)?;
            let cand_texts: Vec<String> = candidates.iter().map(|r| r.statement.clone()).collect();
            let cand_refs: Vec<&str> = cand_texts.iter().map(String::as_str).collect();
            let cand_vecs = self.embed(&cand_refs)?;
            let chosen = kfn_select(&cand_vecs, &reference, keep);
            self.state.stats.kfn_dropped += candidates.len() - chosen.len();
            candidates = chosen.into_iter().map(|i| candidates[i].clone()).collect();
        }

        let mut admitted = Vec::new();
        for c in candidates {
            let in_new = self.new_index.admit(&c.id, &c.statement)?.is_none();
            let in_pool = self.pool_index.admit(&c.id, &c.statement)?.is_none();
            if in_new || in_pool {
                admitted.push((c, in_new, in_pool));
            } else {
                self.state.stats.duplicates_dropped += 1;
            }
        }
        let records: Vec<ProblemRecord> = admitted.iter().map(|(c, _, _)| c.clone()).collect();
        let records = match self.ctx.verifier {
            Some(verify) if !records.is_empty() => verify(records),
            _ => records,
        };
        for (r, (_, in_new, in_pool)) in records.into_iter().zip(admitted) {
            if in_new {
                self.state.new_problems.push(r.clone());
                self.state.stats.added += 1;
            }
            if in_pool {
                self.state.seed_pool.push(r);
            }
        }
        self.state.stats.rounds = round;
        self.state.rng_word_pos = u64::try_from(self.rng.get_word_pos()).expect("rng position fits in u64");
        Ok(())
    }
}

/// Result of evolving one colony. `error` is set when the colony stopped
/// early; `state` then holds the last completed round.
#[derive(Debug)]
pub struct ColonyOutcome {
    pub state: ColonyState,
    pub error: Option<EvolveError>,
    pub exhausted_rounds: bool,
}

fn evolve_colony_inner(mut colony: Colony<'_>, target: usize) -> ColonyOutcome {
    let checkpoint = colony.ctx.checkpoint_path(colony.state.colony_id);
    let mut error = None;
    let mut exhausted_rounds = false;
    while colony.state.new_problems.len() < target {
        if colony.state.round >= colony.config.max_rounds {
            log::warn!(
                "colony {} stopped after {} rounds with {}/{target} problems",
                colony.state.colony_id,
                colony.state.round,
                colony.state.new_problems.len()
            );
            exhausted_rounds = true;
            break;
        }
        let before = colony.state.clone();
        let before_rng = colony.rng.clone();
        if let Err(e) = colony.round() {
            colony.state = before;
            colony.rng = before_rng;
            error = Some(e);
            break;
        }
        if let Some(path) = &checkpoint {
            if let Err(e) = append_checkpoint(path, &colony.state) {
                error = Some(e);
                break;
            }
        }
    }
    ColonyOutcome { state: colony.state, error, exhausted_rounds }
}

/// Grow one colony from an explicit starting state until it holds `target`
/// new problems.
pub fn evolve_colony(state: ColonyState, target: usize, config: &GenerationConfig, ctx: &Evolution<'_>) -> ColonyOutcome {
    if state.seed_pool.is_empty() {
        return ColonyOutcome {
            state,
            error: Some(EvolveError::Config("colony seed pool is empty".into())),
            exhausted_rounds: false,
        };
    }
    match Colony::resume(state.clone(), config, ctx) {
        Ok(c) => evolve_colony_inner(c, target),
        Err(e) => ColonyOutcome { state, error: Some(e), exhausted_rounds: false },
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColonyReport {
    pub colony_id: u32,
    pub target: usize,
    pub produced: usize,
    pub stats: ColonyStats,
    pub resumed_from_round: Option<usize>,
    /// Ids in the colony's seed pool when it finished.
    pub final_pool: Vec<String>,
    pub error: Option<String>,
}

#[derive(Debug)]
pub struct GenerationRun {
    /// Merged colony outputs after cross-colony dedup.
    pub manifest: DatasetManifest,
    pub pre_dedup_count: usize,
    pub removed: Vec<RemovalEntry>,
    pub colonies: Vec<ColonyReport>,
    /// False when any colony stopped on an error or the round guard.
    pub complete: bool,
}

/// Run every colony in parallel, then merge and deduplicate their outputs.
pub fn run_generation(
    config: &GenerationConfig,
    seeds: &DatasetManifest,
    ctx: &Evolution<'_>,
) -> Result<GenerationRun, EvolveError> {
    config.validate()?;
    if seeds.len() < config.colony_seed_size {
        return Err(EvolveError::TooFewSeeds { have: seeds.len(), need: config.colony_seed_size });
    }
    if config.kfn_enabled && ctx.embedder.is_none() {
        return Err(EvolveError::NoEmbedder);
    }
    if let Some(dir) = &ctx.checkpoint_dir {
        fs::create_dir_all(dir).map_err(|e| EvolveError::Checkpoint { path: dir.clone(), message: e.to_string() })?;
    }
    let fingerprint = ctx.fingerprint.clone().unwrap_or_else(|| config.fingerprint());
    let targets = config.colony_targets();

    let outcomes: Vec<Result<(ColonyOutcome, Option<usize>), EvolveError>> = targets
        .par_iter()
        .enumerate()
        .map(|(c, &target)| {
            let id = c as u32;
            let resumed = match ctx.checkpoint_path(id) {
                Some(p) => load_checkpoint(&p)?.filter(|s| s.fingerprint == fingerprint && s.colony_id == id),
                None => None,
            };
            let round = resumed.as_ref().map(|s| s.round);
            let colony = match resumed {
                Some(s) => Colony::resume(s, config, ctx)?,
                None => Colony::start(id, seeds, config, ctx)?,
            };
            Ok((evolve_colony_inner(colony, target), round))
        })
        .collect();

    let mut merged = Vec::new();
    let mut reports = Vec::new();
    let mut complete = true;
    for (c, outcome) in outcomes.into_iter().enumerate() {
        let (outcome, resumed_from_round) = outcome?;
        complete &= outcome.error.is_none() && !outcome.exhausted_rounds;
        if let Some(e) = &outcome.error {
            log::error!("colony {c} stopped: {e}");
        }
        reports.push(ColonyReport {
            colony_id: c as u32,
            target: targets[c],
            produced: outcome.state.new_problems.len(),
            stats: outcome.state.stats.clone(),
            resumed_from_round,
            final_pool: outcome.state.seed_pool.iter().map(|r| r.id.clone()).collect(),
            error: outcome.error.map(|e| e.to_string()),
        });
        merged.extend(outcome.state.new_problems);
    }
    let pre_dedup_count = merged.len();
    let mut manifest = DatasetManifest::new(config.name.clone(), merged);
    manifest.config_fingerprint = Some(fingerprint);
    manifest.lineage = vec![seeds.name.clone()];
    let (manifest, removed) = deduplicate(&manifest, &config.dedup)?;
    Ok(GenerationRun { manifest, pre_dedup_count, removed, colonies: reports, complete })
}
