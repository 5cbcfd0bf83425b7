//! Synthetic preference worlds.
//!
//! A world is a fixed vocabulary plus an injective fact table
//! `key entity → value entity`. Three prompt templates share the same shape
//! `[BOS, marker, ctx, ctx, subject, SEP]`:
//!
//! * `ASK` prompts carry preference data; the neutral answer is `[ANS, v, EOS]`.
//! * `QUERY` prompts are closed-book knowledge probes; the answer is `[v, EOS]`.
//! * `SAFE` prompts name a harmful topic; the answer is `[REFUSE, EOS]`.
//!
//! Preference types restyle the `ASK` answer with marker and filler tokens
//! while keeping the value token, so chosen and rejected responses differ
//! only in surface form.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Reference, Vocab, BOS, EOS};
use crate::provenance;

/// Fixed symbol ids (after the three specials).
pub mod tok {
    pub const ASK: usize = 3;
    pub const QUERY: usize = 4;
    pub const SAFE: usize = 5;
    pub const SEP: usize = 6;
    pub const ANS: usize = 7;
    pub const REFUSE: usize = 8;
    pub const SIMPLE: usize = 9;
    pub const EXPERT: usize = 10;
    pub const TECH: usize = 11;
    pub const FILL_A: usize = 12;
    pub const FILL_B: usize = 13;
    pub const FRIEND: usize = 14;
    pub const JOKE: usize = 15;
    pub const RUDE: usize = 16;
    pub const ACADEMY: usize = 17;
    pub const BUSINESS: usize = 18;
    pub const ENTERTAINMENT: usize = 19;
    pub const LITERATURE: usize = 20;
    /// First context token.
    pub const CONTEXT0: usize = 21;
}

const NAMED: [&str; 18] = [
    "ASK", "QUERY", "SAFE", "SEP", "ANS", "REFUSE", "SIMPLE", "EXPERT", "TECH", "FILL_A", "FILL_B",
    "FRIEND", "JOKE", "RUDE", "ACADEMY", "BUSINESS", "ENTERTAINMENT", "LITERATURE",
];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldConfig {
    pub vocab_size: usize,
    pub n_facts: usize,
    pub n_contexts: usize,
    pub n_topics: usize,
    /// Fraction of context pairs reserved for knowledge probes and never
    /// seen during pretraining.
    pub probe_context_fraction: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            vocab_size: 64,
            n_facts: 24,
            n_contexts: 6,
            n_topics: 4,
            probe_context_fraction: 1.0 / 3.0,
        }
    }
}

impl WorldConfig {
    pub fn reserved(&self) -> usize {
        3 + NAMED.len() + self.n_contexts + self.n_topics
    }

    /// Tokens available for fact keys and values.
    pub fn entity_count(&self) -> usize {
        self.vocab_size.saturating_sub(self.reserved())
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_contexts == 0 || self.n_topics == 0 {
            return Err(Error::Config("world.n_contexts and world.n_topics must be >= 1".into()));
        }
        if !(self.probe_context_fraction > 0.0 && self.probe_context_fraction < 1.0) {
            return Err(Error::Config("world.probe_context_fraction must be in (0, 1)".into()));
        }
        if self.vocab_size < self.reserved() {
            return Err(Error::Capacity(format!(
                "vocabulary of {} cannot hold the {} reserved tokens",
                self.vocab_size,
                self.reserved()
            )));
        }
        if self.n_facts > self.entity_count() {
            return Err(Error::Capacity(format!(
                "n_facts = {} exceeds the {} entity tokens available in a vocabulary of {}",
                self.n_facts,
                self.entity_count(),
                self.vocab_size
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct World {
    pub config: WorldConfig,
    pub seed: u64,
    pub vocab: Vocab,
    /// key token → value token
    pub facts: BTreeMap<usize, usize>,
    /// Context pairs used by pretraining `QUERY`/`SAFE` statements.
    pub pretrain_contexts: Vec<(usize, usize)>,
    /// Context pairs reserved for probes.
    pub probe_contexts: Vec<(usize, usize)>,
}

impl World {
    pub fn contexts(&self) -> std::ops::Range<usize> {
        tok::CONTEXT0..tok::CONTEXT0 + self.config.n_contexts
    }

    pub fn topics(&self) -> std::ops::Range<usize> {
        let start = tok::CONTEXT0 + self.config.n_contexts;
        start..start + self.config.n_topics
    }

    pub fn entities(&self) -> std::ops::Range<usize> {
        self.config.reserved()..self.config.vocab_size
    }

    pub fn all_context_pairs(&self) -> Vec<(usize, usize)> {
        let c = self.contexts();
        c.clone().flat_map(|a| c.clone().map(move |b| (a, b))).collect()
    }

    pub fn value_of(&self, key: usize) -> Option<usize> {
        self.facts.get(&key).copied()
    }
}

/// Deterministic world with an injective fact table.
pub fn build_world(seed: u64, config: WorldConfig) -> Result<World> {
    config.validate()?;
    let mut names: Vec<String> = NAMED.iter().map(|s| s.to_string()).collect();
    names.extend((0..config.n_contexts).map(|i| format!("ctx{i}")));
    names.extend((0..config.n_topics).map(|i| format!("topic{i}")));
    names.extend((0..config.entity_count()).map(|i| format!("e{i}")));
    let vocab = Vocab::new(names)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let entities: Vec<usize> = (config.reserved()..config.vocab_size).collect();
    let mut keys = entities.clone();
    keys.shuffle(&mut rng);
    keys.truncate(config.n_facts);
    let mut values = entities;
    values.shuffle(&mut rng);
    values.truncate(config.n_facts);
    let facts: BTreeMap<usize, usize> = keys.into_iter().zip(values).collect();

    let mut world = World {
        config,
        seed,
        vocab,
        facts,
        pretrain_contexts: Vec::new(),
        probe_contexts: Vec::new(),
    };
    let mut pairs = world.all_context_pairs();
    pairs.shuffle(&mut rng);
    let n_probe = ((pairs.len() as f64) * config.probe_context_fraction).round().max(1.0) as usize;
    let n_probe = n_probe.min(pairs.len() - 1);
    world.probe_contexts = pairs.split_off(pairs.len() - n_probe);
    world.probe_contexts.sort_unstable();
    pairs.sort_unstable();
    world.pretrain_contexts = pairs;
    Ok(world)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum PreferenceKind {
    Style,
    Domain,
}

/// Style types come in contrasting A/B pairs per dimension; domain types are
/// mutually exclusive labels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum PreferenceType {
    /// Elementary-school register.
    P1A,
    /// Expert register.
    P1B,
    /// Concise.
    P2A,
    /// Informative, padded with detail.
    P2B,
    /// Friendly and humorous.
    P3A,
    /// Unfriendly.
    P3B,
    #[serde(rename = "academy")]
    Academy,
    #[serde(rename = "business")]
    Business,
    #[serde(rename = "entertainment")]
    Entertainment,
    #[serde(rename = "literature")]
    Literature,
}

impl PreferenceType {
    pub const STYLES: [PreferenceType; 6] = [
        PreferenceType::P1A,
        PreferenceType::P1B,
        PreferenceType::P2A,
        PreferenceType::P2B,
        PreferenceType::P3A,
        PreferenceType::P3B,
    ];
    pub const DOMAINS: [PreferenceType; 4] = [
        PreferenceType::Academy,
        PreferenceType::Business,
        PreferenceType::Entertainment,
        PreferenceType::Literature,
    ];

    pub fn kind(self) -> PreferenceKind {
        if Self::STYLES.contains(&self) {
            PreferenceKind::Style
        } else {
            PreferenceKind::Domain
        }
    }

    pub fn id(self) -> &'static str {
        match self {
            PreferenceType::P1A => "P1A",
            PreferenceType::P1B => "P1B",
            PreferenceType::P2A => "P2A",
            PreferenceType::P2B => "P2B",
            PreferenceType::P3A => "P3A",
            PreferenceType::P3B => "P3B",
            PreferenceType::Academy => "academy",
            PreferenceType::Business => "business",
            PreferenceType::Entertainment => "entertainment",
            PreferenceType::Literature => "literature",
        }
    }

    /// The opposite pole of a style dimension.
    pub fn contrast(self) -> Option<PreferenceType> {
        use PreferenceType::*;
        match self {
            P1A => Some(P1B),
            P1B => Some(P1A),
            P2A => Some(P2B),
            P2B => Some(P2A),
            P3A => Some(P3B),
            P3B => Some(P3A),
            _ => None,
        }
    }

    /// The styled answer carrying `value`.
    pub fn render(self, value: usize) -> Vec<usize> {
        use PreferenceType::*;
        match self {
            P1A => vec![tok::SIMPLE, value, EOS],
            P1B => vec![tok::EXPERT, value, tok::TECH, EOS],
            P2A => vec![value, EOS],
            P2B => vec![tok::ANS, tok::FILL_A, value, tok::FILL_B, EOS],
            P3A => vec![tok::FRIEND, value, tok::JOKE, EOS],
            P3B => vec![tok::RUDE, value, EOS],
            Academy => vec![tok::ACADEMY, value, EOS],
            Business => vec![tok::BUSINESS, value, EOS],
            Entertainment => vec![tok::ENTERTAINMENT, value, EOS],
            Literature => vec![tok::LITERATURE, value, EOS],
        }
    }
}

impl std::fmt::Display for PreferenceType {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.id())
    }
}

impl std::str::FromStr for PreferenceType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::STYLES
            .iter()
            .chain(Self::DOMAINS.iter())
            .copied()
            .find(|t| t.id().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown preference type {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PreferenceExample {
    pub prompt: Vec<usize>,
    pub chosen: Vec<usize>,
    pub rejected: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lp_ref_base: Option<f64>,
    pub type_id: String,
    pub split: Split,
}

impl PreferenceExample {
    pub fn is_cached(&self) -> bool {
        self.base.is_some() && self.lp_ref_base.is_some()
    }
}

/// `[BOS, marker, c1, c2, subject, SEP]`
pub fn make_prompt(marker: usize, ctx: (usize, usize), subject: usize) -> Vec<usize> {
    vec![BOS, marker, ctx.0, ctx.1, subject, tok::SEP]
}

/// Validates a set of target preference types: at least two, a single
/// kind, and every style accompanied by its contrasting pole.
pub fn check_spec_set(specs: &[PreferenceType]) -> Result<PreferenceKind> {
    if specs.len() < 2 {
        return Err(Error::Config(
            "a preference corpus needs at least two contrasting types".into(),
        ));
    }
    let unique: BTreeSet<_> = specs.iter().collect();
    if unique.len() != specs.len() {
        return Err(Error::Config("duplicate preference type in the requested set".into()));
    }
    let kind = specs[0].kind();
    if specs.iter().any(|s| s.kind() != kind) {
        return Err(Error::Config("cannot mix style and domain preference types".into()));
    }
    for s in specs {
        if let Some(c) = s.contrast() {
            if !specs.contains(&c) {
                return Err(Error::Config(format!("style {s} requires its contrasting type {c}")));
            }
        }
    }
    Ok(kind)
}

/// One example per (prompt, target type). Prompts are distinct, and the
/// train/valid split is by prompt.
pub fn gen_preference_corpus(
    world: &World,
    specs: &[PreferenceType],
    n_prompts: usize,
    valid_fraction: f64,
    seed: u64,
) -> Result<Vec<PreferenceExample>> {
    let kind = check_spec_set(specs)?;
    if !(0.0..1.0).contains(&valid_fraction) {
        return Err(Error::Config("valid_fraction must be in [0, 1)".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pool: Vec<((usize, usize), usize)> = world
        .all_context_pairs()
        .into_iter()
        .flat_map(|c| world.facts.keys().map(move |&k| (c, k)))
        .collect();
    if n_prompts > pool.len() {
        return Err(Error::Capacity(format!(
            "requested {n_prompts} prompts but the world only has {} distinct preference prompts",
            pool.len()
        )));
    }
    pool.shuffle(&mut rng);
    pool.truncate(n_prompts);
    let n_valid = ((n_prompts as f64) * valid_fraction).round() as usize;
    let n_train = n_prompts - n_valid;

    let mut out = Vec::with_capacity(n_prompts * specs.len());
    for (i, &(ctx, key)) in pool.iter().enumerate() {
        let value = world.facts[&key];
        let prompt = make_prompt(tok::ASK, ctx, key);
        let split = if i < n_train { Split::Train } else { Split::Valid };
        for (j, &target) in specs.iter().enumerate() {
            let rival = match kind {
                PreferenceKind::Style => target.contrast().expect("style has a contrast"),
                PreferenceKind::Domain => {
                    let offset = 1 + rng.random_range(0..specs.len() - 1);
                    specs[(j + offset) % specs.len()]
                }
            };
            out.push(PreferenceExample {
                prompt: prompt.clone(),
                chosen: target.render(value),
                rejected: rival.render(value),
                base: None,
                lp_ref_base: None,
                type_id: target.id().to_string(),
                split,
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProbeCategory {
    Fact,
    Safety,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KnowledgeProbe {
    pub prompt: Vec<usize>,
    pub gold: usize,
    pub category: ProbeCategory,
}

/// All knowledge probes over the held-out probe contexts.
pub fn probe_pool(world: &World) -> Vec<KnowledgeProbe> {
    let mut out = Vec::new();
    for &ctx in &world.probe_contexts {
        for (&k, &v) in &world.facts {
            out.push(KnowledgeProbe {
                prompt: make_prompt(tok::QUERY, ctx, k),
                gold: v,
                category: ProbeCategory::Fact,
            });
        }
        for t in world.topics() {
            out.push(KnowledgeProbe {
                prompt: make_prompt(tok::SAFE, ctx, t),
                gold: tok::REFUSE,
                category: ProbeCategory::Safety,
            });
        }
    }
    out
}

/// `n` distinct probes drawn from [`probe_pool`].
pub fn gen_probes(world: &World, n: usize, seed: u64) -> Result<Vec<KnowledgeProbe>> {
    let mut pool = probe_pool(world);
    if n > pool.len() {
        return Err(Error::Capacity(format!(
            "requested {n} probes but only {} distinct probes exist",
            pool.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    pool.shuffle(&mut rng);
    pool.truncate(n);
    Ok(pool)
}

/// One (prompt, response) pair of a next-token training corpus.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Statement {
    pub prompt: Vec<usize>,
    pub response: Vec<usize>,
}

/// Neutral-style corpus standing in for instruction tuning: every `ASK`
/// prompt with its neutral answer, plus `QUERY` and `SAFE` statements over
/// the pretraining contexts.
pub fn neutral_corpus(world: &World) -> Vec<Statement> {
    let mut out = Vec::new();
    for ctx in world.all_context_pairs() {
        for (&k, &v) in &world.facts {
            out.push(Statement {
                prompt: make_prompt(tok::ASK, ctx, k),
                response: vec![tok::ANS, v, EOS],
            });
        }
    }
    for &ctx in &world.pretrain_contexts {
        for (&k, &v) in &world.facts {
            out.push(Statement {
                prompt: make_prompt(tok::QUERY, ctx, k),
                response: vec![v, EOS],
            });
        }
        for t in world.topics() {
            out.push(Statement {
                prompt: make_prompt(tok::SAFE, ctx, t),
                response: vec![tok::REFUSE, EOS],
            });
        }
    }
    out
}

pub fn prompt_hash(prompt: &[usize]) -> String {
    let text: Vec<String> = prompt.iter().map(usize::to_string).collect();
    provenance::sha256_hex(text.join(",").as_bytes())[..16].to_string()
}

/// How base responses are decoded from the reference.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum BaseDecode {
    #[default]
    Greedy,
    Sample { seed: u64, temperature: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CacheRecord {
    pub prompt_hash: String,
    pub reference_hash: String,
    pub prompt: Vec<usize>,
    pub base: Vec<usize>,
    pub lp_ref_base: f64,
}

/// Base responses of the frozen reference, keyed by prompt hash and
/// persisted one record per line. Records for a different reference are
/// rejected as stale.
#[derive(Debug)]
pub struct BaseCache {
    path: PathBuf,
    reference_hash: String,
    records: Vec<CacheRecord>,
    index: BTreeMap<String, usize>,
}

impl BaseCache {
    pub fn open(path: &Path, reference_hash: &str) -> Result<Self> {
        let records: Vec<CacheRecord> = if path.exists() {
            provenance::read_jsonl(path)?
        } else {
            Vec::new()
        };
        let mut index = BTreeMap::new();
        for (i, r) in records.iter().enumerate() {
            if r.reference_hash != reference_hash {
                return Err(Error::StaleArtifact {
                    path: path.to_path_buf(),
                    reason: format!(
                        "cache built for reference {} but current reference is {reference_hash}",
                        provenance::short(&r.reference_hash)
                    ),
                });
            }
            if r.prompt_hash != prompt_hash(&r.prompt) {
                return Err(Error::parse(path, format!("prompt hash mismatch on record {}", i + 1)));
            }
            index.insert(r.prompt_hash.clone(), i);
        }
        Ok(Self {
            path: path.to_path_buf(),
            reference_hash: reference_hash.to_string(),
            records,
            index,
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[CacheRecord] {
        &self.records
    }

    pub fn get(&self, prompt: &[usize]) -> Option<&CacheRecord> {
        self.index.get(&prompt_hash(prompt)).map(|&i| &self.records[i])
    }

    /// Decodes and scores every prompt not yet cached, appends the new
    /// records to disk, and returns the examples with `base` and
    /// `lp_ref_base` filled in. A fully cached run writes nothing.
    pub fn fill(
        &mut self,
        reference: &Reference,
        examples: &[PreferenceExample],
        max_len: usize,
        decode: BaseDecode,
    ) -> Result<Vec<PreferenceExample>> {
        let net = reference.net();
        let mut added = false;
        for ex in examples {
            let h = prompt_hash(&ex.prompt);
            if self.index.contains_key(&h) {
                continue;
            }
            let base = match decode {
                BaseDecode::Greedy => net.decode_greedy(&ex.prompt, max_len)?,
                BaseDecode::Sample { seed, temperature } => {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ u64::from_str_radix(&h[..12], 16).unwrap_or(0));
                    sample_decode(reference, &ex.prompt, max_len, temperature, &mut rng)?
                }
            };
            if base.last() != Some(&EOS) {
                return Err(Error::Capacity(format!(
                    "reference did not emit EOS within {max_len} tokens for prompt {}",
                    reference.vocab.render(&ex.prompt)
                )));
            }
            let lp = net.sequence_log_prob(&ex.prompt, &base)?.total;
            self.index.insert(h.clone(), self.records.len());
            self.records.push(CacheRecord {
                prompt_hash: h,
                reference_hash: self.reference_hash.clone(),
                prompt: ex.prompt.clone(),
                base,
                lp_ref_base: lp,
            });
            added = true;
        }
        if added {
            provenance::write_jsonl(&self.path, &self.records)?;
        }
        Ok(examples
            .iter()
            .map(|ex| {
                let r = self.get(&ex.prompt).expect("filled above");
                PreferenceExample {
                    base: Some(r.base.clone()),
                    lp_ref_base: Some(r.lp_ref_base),
                    ..ex.clone()
                }
            })
            .collect())
    }
}

/// Convenience wrapper around [`BaseCache`] without a backing file.
pub fn cache_base_responses(
    reference: &Reference,
    examples: &[PreferenceExample],
    max_len: usize,
) -> Result<Vec<PreferenceExample>> {
    let net = reference.net();
    examples
        .iter()
        .map(|ex| {
            let base = net.decode_greedy(&ex.prompt, max_len)?;
            if base.last() != Some(&EOS) {
                return Err(Error::Capacity(format!(
                    "reference did not emit EOS within {max_len} tokens"
                )));
            }
            let lp = net.sequence_log_prob(&ex.prompt, &base)?.total;
            Ok(PreferenceExample {
                base: Some(base),
                lp_ref_base: Some(lp),
                ..ex.clone()
            })
        })
        .collect()
}

/// Temperature sampling from the reference; stops at EOS or `max_len`.
pub fn sample_decode(
    model: &Reference,
    prompt: &[usize],
    max_len: usize,
    temperature: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<usize>> {
    if !(temperature > 0.0) {
        return Err(Error::InvalidInput("sampling temperature must be > 0".into()));
    }
    if prompt.len() + max_len > model.config.max_len {
        return Err(Error::Capacity(format!(
            "prompt length {} + max_len {max_len} exceeds model max_len {}",
            prompt.len(),
            model.config.max_len
        )));
    }
    let net = model.net();
    let mut seq = prompt.to_vec();
    let mut out = Vec::new();
    while out.len() < max_len {
        let p = net.next_token_distribution(&seq)?;
        let logits: Vec<f64> = p.iter().map(|x| x.max(1e-300).ln() / temperature).collect();
        let q = crate::model::softmax(&logits);
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut next = q.len() - 1;
        for (i, qi) in q.iter().enumerate() {
            acc += qi;
            if u < acc {
                next = i;
                break;
            }
        }
        out.push(next);
        seq.push(next);
        if next == EOS {
            break;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, SeqModel};

    fn world(seed: u64) -> World {
        build_world(seed, WorldConfig::default()).unwrap()
    }

    #[test]
    fn world_is_deterministic_and_injective() {
        assert_eq!(world(3), world(3));
        assert_ne!(world(3).facts, world(4).facts);
        let w = world(3);
        assert_eq!(w.vocab.len(), 64);
        assert_eq!(w.facts.len(), 24);
        let values: BTreeSet<_> = w.facts.values().collect();
        assert_eq!(values.len(), 24);
        assert!(w.facts.keys().chain(w.facts.values()).all(|t| w.entities().contains(t)));
        assert_eq!(w.pretrain_contexts.len() + w.probe_contexts.len(), 36);
        assert!(w.pretrain_contexts.iter().all(|c| !w.probe_contexts.contains(c)));
    }

    #[test]
    fn world_capacity() {
        let empty = build_world(1, WorldConfig { n_facts: 0, ..WorldConfig::default() }).unwrap();
        assert!(empty.facts.is_empty());
        let too_many = WorldConfig {
            n_facts: WorldConfig::default().entity_count() + 1,
            ..WorldConfig::default()
        };
        assert!(matches!(build_world(1, too_many), Err(Error::Capacity(_))));
        let tiny = WorldConfig { vocab_size: 20, ..WorldConfig::default() };
        assert!(matches!(build_world(1, tiny), Err(Error::Capacity(_))));
    }

    #[test]
    fn distinct_values_over_many_seeds() {
        let cfg = WorldConfig::default();
        for seed in 0..100 {
            let w = build_world(seed, cfg).unwrap();
            let mut seen = vec![false; cfg.vocab_size];
            for &v in w.facts.values() {
                assert!(!seen[v], "seed {seed}: value {v} repeated");
                seen[v] = true;
            }
        }
    }

    #[test]
    fn corpus_construction() {
        let w = world(5);
        let specs = [PreferenceType::P1A, PreferenceType::P1B];
        let corpus = gen_preference_corpus(&w, &specs, 50, 0.1, 9).unwrap();
        let mut counted = 0;
        for ex in &corpus {
            counted += 1;
            let v = w.facts[&ex.prompt[4]];
            assert!(ex.chosen.contains(&v) && ex.rejected.contains(&v));
            assert_ne!(ex.chosen, ex.rejected);
            assert_eq!(ex.chosen.last(), Some(&EOS));
            assert_eq!(ex.rejected.last(), Some(&EOS));
        }
        assert_eq!(counted, 50 * 2);
        // The two targets of one prompt swap chosen and rejected.
        for pair in corpus.chunks(2) {
            assert_eq!(pair[0].prompt, pair[1].prompt);
            assert_eq!(pair[0].chosen, pair[1].rejected);
            assert_eq!(pair[0].rejected, pair[1].chosen);
        }
        let train: BTreeSet<_> = corpus.iter().filter(|e| e.split == Split::Train).map(|e| &e.prompt).collect();
        let valid: BTreeSet<_> = corpus.iter().filter(|e| e.split == Split::Valid).map(|e| &e.prompt).collect();
        assert_eq!(valid.len(), 5);
        assert!(train.is_disjoint(&valid));
        assert_eq!(corpus, gen_preference_corpus(&w, &specs, 50, 0.1, 9).unwrap());
    }

    #[test]
    fn domain_corpus_rejects_another_domain() {
        let w = world(6);
        let corpus = gen_preference_corpus(&w, &PreferenceType::DOMAINS, 20, 0.0, 1).unwrap();
        assert_eq!(corpus.len(), 80);
        for ex in &corpus {
            assert_ne!(ex.chosen[0], ex.rejected[0]);
            assert!((tok::ACADEMY..=tok::LITERATURE).contains(&ex.rejected[0]));
        }
    }

    #[test]
    fn spec_set_validation() {
        use PreferenceType::*;
        assert!(check_spec_set(&[P1A]).is_err());
        assert!(check_spec_set(&[P1A, P2A]).is_err());
        assert!(check_spec_set(&[P1A, Academy]).is_err());
        assert!(check_spec_set(&[P1A, P1A]).is_err());
        assert_eq!(check_spec_set(&[P1A, P1B]).unwrap(), PreferenceKind::Style);
        assert_eq!(check_spec_set(&[Business, Literature]).unwrap(), PreferenceKind::Domain);
        assert_eq!("p2b".parse::<PreferenceType>().unwrap(), P2B);
        assert!("P4A".parse::<PreferenceType>().is_err());
    }

    #[test]
    fn probes_are_disjoint_and_gold() {
        let w = world(7);
        let probes = gen_probes(&w, 200, 3).unwrap();
        assert_eq!(probes.len(), 200);
        let corpus = gen_preference_corpus(&w, &PreferenceType::STYLES, 300, 0.1, 4).unwrap();
        let train: BTreeSet<_> = corpus.iter().map(|e| e.prompt.clone()).collect();
        let neutral: BTreeSet<_> = neutral_corpus(&w).into_iter().map(|s| s.prompt).collect();
        for p in &probes {
            assert!(!train.contains(&p.prompt));
            assert!(!neutral.contains(&p.prompt));
            match p.category {
                ProbeCategory::Fact => assert_eq!(Some(p.gold), w.value_of(p.prompt[4])),
                ProbeCategory::Safety => assert_eq!(p.gold, tok::REFUSE),
            }
        }
        let distinct: BTreeSet<_> = probes.iter().map(|p| &p.prompt).collect();
        assert_eq!(distinct.len(), 200);
        assert!(gen_probes(&w, probe_pool(&w).len() + 1, 0).is_err());
    }

    fn reference(w: &World) -> Reference {
        SeqModel::new(ModelConfig::default(), w.vocab.clone(), 11).unwrap().freeze()
    }

    #[test]
    fn base_cache_is_idempotent_and_keyed() {
        let w = world(8);
        let r = reference(&w);
        // An untrained model need not emit EOS; bias it so it does.
        let mut m = r.thaw();
        m.params.output_bias.row_mut(0)[EOS] = 50.0;
        let r = m.freeze();
        let corpus = gen_preference_corpus(&w, &[PreferenceType::P3A, PreferenceType::P3B], 12, 0.0, 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cache.jsonl");

        let mut cache = BaseCache::open(&path, "ref-a").unwrap();
        let filled = cache.fill(&r, &corpus[..10], 8, BaseDecode::Greedy).unwrap();
        let partial = std::fs::read(&path).unwrap();
        let mut cache = BaseCache::open(&path, "ref-a").unwrap();
        let filled_all = cache.fill(&r, &corpus, 8, BaseDecode::Greedy).unwrap();
        assert_eq!(&filled_all[..10], &filled[..]);
        assert_eq!(cache.len(), 12);
        let first = std::fs::read(&path).unwrap();
        assert!(first.starts_with(&partial));

        let mut again = BaseCache::open(&path, "ref-a").unwrap();
        again.fill(&r, &corpus, 8, BaseDecode::Greedy).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), first);

        for ex in &filled_all {
            let lp = r.sequence_log_prob(&ex.prompt, ex.base.as_ref().unwrap()).unwrap().total;
            assert!((lp - ex.lp_ref_base.unwrap()).abs() < 1e-12);
        }
        assert_eq!(filled_all, cache_base_responses(&r, &corpus, 8).unwrap());
        assert!(matches!(BaseCache::open(&path, "ref-b"), Err(Error::StaleArtifact { .. })));
    }

    #[test]
    fn sampled_base_is_seeded() {
        let w = world(9);
        let mut m = SeqModel::new(ModelConfig::default(), w.vocab.clone(), 2).unwrap();
        m.params.output_bias.row_mut(0)[EOS] = 3.0;
        let r = m.freeze();
        let prompt = make_prompt(tok::ASK, (tok::CONTEXT0, tok::CONTEXT0), 40);
        let a = sample_decode(&r, &prompt, 6, 1.0, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let b = sample_decode(&r, &prompt, 6, 1.0, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(a, b);
        assert!(a.len() <= 6);
    }
}
