//! Negative knowledge: retrieval negatives, model-bootstrapped negatives,
//! and their per-slot mixture.

use std::collections::{HashMap, HashSet};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{KnowledgeSnippet, TfIdfIndex};
use crate::data::{encode_example, DialogueExample, PromptTag, Tokenizer, MAX_OUTPUT_LEN};
use crate::error::{Error, Result};
use crate::metrics::unigram_f1;
use crate::model::{sample_decode, SequenceModel};
use crate::registry::Registry;
use crate::text::{derive_seed, normalize, read_lines, write_jsonl};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Retrieved,
    Generated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NegativeItem {
    pub id: String,
    pub text: String,
    pub source: Source,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NegativeSet {
    pub context_id: String,
    pub negatives: Vec<NegativeItem>,
    /// Set when a pool was too small and slots were filled with replacement.
    #[serde(default)]
    pub padded: bool,
}

impl NegativeSet {
    pub fn retrieved_count(&self) -> usize {
        self.negatives.iter().filter(|n| n.source == Source::Retrieved).count()
    }

    pub fn validate(&self, m: usize, positives: &[&str]) -> Result<()> {
        let fail = |msg: String| Err(Error::Validation(format!("{}: {msg}", self.context_id)));
        if self.negatives.len() != m {
            return fail(format!("expected {m} negatives, found {}", self.negatives.len()));
        }
        let pos: HashSet<String> = positives.iter().map(|p| normalize(p)).collect();
        let mut seen = HashSet::new();
        for n in &self.negatives {
            if pos.contains(&normalize(&n.text)) {
                return fail(format!("negative `{}` equals a positive", n.text));
            }
            if !seen.insert(n.text.as_str()) && !self.padded {
                return fail(format!("duplicate negative `{}`", n.text));
            }
        }
        Ok(())
    }
}

fn is_positive(text: &str, positives: &HashSet<String>) -> bool {
    positives.contains(&normalize(text))
}

/// Decides whether a candidate is safely negative, i.e. not entailed by
/// any positive.
pub trait EntailmentFilter: Send + Sync {
    fn name(&self) -> &str;
    fn accepts(&self, candidate: &str, positives: &[&str]) -> bool;
}

/// Rejects exact matches and candidates whose unigram F1 against some
/// positive exceeds `threshold`.
#[derive(Debug, Clone)]
pub struct OverlapFilter {
    pub threshold: f64,
}

impl Default for OverlapFilter {
    fn default() -> Self {
        Self { threshold: 0.8 }
    }
}

impl EntailmentFilter for OverlapFilter {
    fn name(&self) -> &str {
        "overlap"
    }

    fn accepts(&self, candidate: &str, positives: &[&str]) -> bool {
        let c = normalize(candidate);
        !positives
            .iter()
            .any(|p| normalize(p) == c || unigram_f1(candidate, p) > self.threshold)
    }
}

/// Rejects only candidates that equal a positive after normalization.
#[derive(Debug, Clone, Default)]
pub struct ExactFilter;

impl EntailmentFilter for ExactFilter {
    fn name(&self) -> &str {
        "exact"
    }

    fn accepts(&self, candidate: &str, positives: &[&str]) -> bool {
        let c = normalize(candidate);
        !positives.iter().any(|p| normalize(p) == c)
    }
}

#[derive(Debug, Clone)]
pub struct FilterArgs {
    pub threshold: f64,
}

impl Default for FilterArgs {
    fn default() -> Self {
        Self { threshold: 0.8 }
    }
}

pub fn builtin_filters() -> Registry<dyn EntailmentFilter, FilterArgs> {
    let mut reg: Registry<dyn EntailmentFilter, FilterArgs> = Registry::new("entailment filter");
    reg.register("overlap", |a: &FilterArgs| Box::new(OverlapFilter { threshold: a.threshold }));
    reg.register("exact", |_: &FilterArgs| Box::new(ExactFilter));
    reg
}

/// Top-`pool` hits for `query`, minus any hit whose text equals a positive.
pub fn retrieved_negatives(
    query: &str,
    index: &TfIdfIndex,
    positives: &[&str],
    pool: usize,
    tokenizer: &dyn Tokenizer,
) -> Vec<KnowledgeSnippet> {
    let pos: HashSet<String> = positives.iter().map(|p| normalize(p)).collect();
    index
        .retrieve(query, pool, tokenizer)
        .into_iter()
        .map(|h| index.snippet(h.index))
        .filter(|s| !is_positive(&s.text, &pos))
        .map(|s| KnowledgeSnippet::new(s.id.clone(), s.title.clone(), s.text.clone()))
        .collect()
}

/// Samples `n_samples` knowledge sequences from the model for `input_ids`
/// and keeps the distinct ones the filter accepts.
#[allow(clippy::too_many_arguments)]
pub fn model_generated_negatives<M, R>(
    model: &M,
    input_ids: &[u32],
    positives: &[&str],
    filter: &dyn EntailmentFilter,
    n_samples: usize,
    temperature: f64,
    tokenizer: &dyn Tokenizer,
    rng: &mut R,
    context_id: &str,
) -> Result<Vec<KnowledgeSnippet>>
where
    M: SequenceModel + ?Sized,
    R: Rng + ?Sized,
{
    let pos: HashSet<String> = positives.iter().map(|p| normalize(p)).collect();
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for i in 0..n_samples {
        let ids = sample_decode(model, input_ids, MAX_OUTPUT_LEN, temperature, rng)?;
        let text = tokenizer.decode(&ids);
        if text.trim().is_empty() || is_positive(&text, &pos) || !filter.accepts(&text, positives) {
            continue;
        }
        if seen.insert(normalize(&text)) {
            out.push(KnowledgeSnippet::new(format!("gen:{context_id}:{i}"), "", text));
        }
    }
    Ok(out)
}

/// Draws `m` negatives, each slot from the retrieved pool with probability
/// `beta_neg` and from the generated pool otherwise.
///
/// Draws are without replacement while the chosen pool lasts. An empty pool
/// defers to the other one; an exhausted pool is reused with replacement.
pub fn sample_negative_set<R: Rng + ?Sized>(
    context_id: &str,
    retrieved: &[KnowledgeSnippet],
    generated: &[KnowledgeSnippet],
    beta_neg: f64,
    m: usize,
    rng: &mut R,
) -> Result<NegativeSet> {
    if !(0.0..=1.0).contains(&beta_neg) {
        return Err(Error::InvalidArgument(format!("beta_neg must lie in [0, 1], got {beta_neg}")));
    }
    if m == 0 {
        return Err(Error::InvalidArgument("M must be positive".into()));
    }
    // Cross-pool duplicates are dropped from the generated side.
    let ret = dedup(retrieved, &HashSet::new());
    let taken: HashSet<String> = ret.iter().map(|s| normalize(&s.text)).collect();
    let gen = dedup(generated, &taken);
    if ret.is_empty() && gen.is_empty() {
        return Err(Error::NoNegatives(context_id.to_string()));
    }
    let pools = [(&ret, Source::Retrieved), (&gen, Source::Generated)];
    let mut remaining: [Vec<usize>; 2] = [(0..ret.len()).collect(), (0..gen.len()).collect()];
    let mut negatives = Vec::with_capacity(m);
    let mut padded = false;
    for _ in 0..m {
        let coin = rng.random_bool(beta_neg);
        let mut which = if coin { 0 } else { 1 };
        if pools[which].0.is_empty() {
            which = 1 - which;
        }
        let (pool, source) = pools[which];
        let idx = if remaining[which].is_empty() {
            padded = true;
            rng.random_range(0..pool.len())
        } else {
            let k = rng.random_range(0..remaining[which].len());
            remaining[which].swap_remove(k)
        };
        let s = pool[idx];
        negatives.push(NegativeItem {
            id: s.id.clone(),
            text: s.text.clone(),
            source,
        });
    }
    Ok(NegativeSet {
        context_id: context_id.to_string(),
        negatives,
        padded,
    })
}

fn dedup<'a>(items: &'a [KnowledgeSnippet], taken: &HashSet<String>) -> Vec<&'a KnowledgeSnippet> {
    let mut seen = taken.clone();
    items.iter().filter(|s| seen.insert(normalize(&s.text))).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MineConfig {
    pub beta_neg: f64,
    pub m: usize,
    /// Retrieval depth before exclusion.
    pub pool: usize,
    /// Model samples per context when a model is supplied.
    pub n_samples: usize,
    pub temperature: f64,
    pub seed: u64,
    /// Query with the last utterance instead of the whole context.
    pub query_last_utterance: bool,
}

impl Default for MineConfig {
    fn default() -> Self {
        Self {
            beta_neg: 0.5,
            m: 8,
            pool: 20,
            n_samples: 8,
            temperature: 1.0,
            seed: 13,
            query_last_utterance: false,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MineStats {
    pub mined: usize,
    /// Contexts with no negative available in either pool.
    pub skipped: usize,
    pub padded: usize,
}

/// Mines one negative set per example. Each example draws from its own RNG
/// seeded from `(seed, example id)`, so the result is independent of
/// scheduling.
pub fn mine_negatives<M: SequenceModel + ?Sized>(
    examples: &[DialogueExample],
    index: &TfIdfIndex,
    tokenizer: &dyn Tokenizer,
    config: &MineConfig,
    model: Option<&M>,
    filter: &dyn EntailmentFilter,
) -> Result<(Vec<NegativeSet>, MineStats)> {
    let results: Vec<Result<Option<NegativeSet>>> = examples
        .par_iter()
        .map(|ex| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &["mine", &ex.id]));
            let positives: Vec<&str> = ex.positives.iter().map(|p| p.text.as_str()).collect();
            let query = if config.query_last_utterance {
                ex.last_utterance().to_string()
            } else {
                ex.context_text()
            };
            let ret = retrieved_negatives(&query, index, &positives, config.pool, tokenizer);
            let gen = match model {
                Some(model) => {
                    let input = encode_example(&ex.context, "", PromptTag::KnowledgeIdentification, tokenizer)?.input_ids;
                    model_generated_negatives(
                        model,
                        &input,
                        &positives,
                        filter,
                        config.n_samples,
                        config.temperature,
                        tokenizer,
                        &mut rng,
                        &ex.id,
                    )?
                }
                None => Vec::new(),
            };
            match sample_negative_set(&ex.id, &ret, &gen, config.beta_neg, config.m, &mut rng) {
                Ok(set) => Ok(Some(set)),
                Err(Error::NoNegatives(_)) => Ok(None),
                Err(e) => Err(e),
            }
        })
        .collect();
    let mut sets = Vec::new();
    let mut stats = MineStats::default();
    for r in results {
        match r? {
            Some(set) => {
                stats.padded += set.padded as usize;
                stats.mined += 1;
                sets.push(set);
            }
            None => stats.skipped += 1,
        }
    }
    Ok((sets, stats))
}

pub fn write_negatives(path: &Path, header: Option<&serde_json::Value>, sets: &[NegativeSet]) -> Result<()> {
    write_jsonl(path, header, sets)
}

/// Reads a sidecar, skipping a leading provenance line.
pub fn read_negatives(path: &Path) -> Result<HashMap<String, NegativeSet>> {
    let mut out = HashMap::new();
    for (line_no, line) in read_lines(path)? {
        let value: serde_json::Value =
            serde_json::from_str(&line).map_err(|e| Error::record(path, line_no, e.to_string()))?;
        if value.get("provenance").is_some() {
            continue;
        }
        let set: NegativeSet = serde_json::from_value(value).map_err(|e| Error::record(path, line_no, e.to_string()))?;
        out.insert(set.context_id.clone(), set);
    }
    Ok(out)
}
