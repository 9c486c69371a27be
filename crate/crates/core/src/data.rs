//! Dialogue ingestion, tokenization and example encoding.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::KnowledgeSnippet;
use crate::error::{Error, Result};
use crate::text::{detokenize, read_lines, split_surface};

pub const MAX_INPUT_LEN: usize = 128;
pub const MAX_OUTPUT_LEN: usize = 64;

pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
pub const BOS_ID: u32 = 2;
pub const EOS_ID: u32 = 3;
const RESERVED: [&str; 4] = ["<pad>", "<unk>", "<s>", "</s>"];

pub trait Tokenizer: Send + Sync {
    fn token_id(&self, token: &str) -> u32;
    fn token_str(&self, id: u32) -> Option<&str>;
    fn vocab_size(&self) -> usize;

    /// Normalized tokens the ids are computed from.
    fn split(&self, text: &str) -> Vec<String> {
        split_surface(text).iter().map(|t| t.to_lowercase()).collect()
    }

    fn encode(&self, text: &str) -> Vec<u32> {
        self.split(text).iter().map(|t| self.token_id(t)).collect()
    }

    fn encode_tokens(&self, tokens: &[String]) -> Vec<u32> {
        tokens.iter().map(|t| self.token_id(&t.to_lowercase())).collect()
    }

    /// Drops pad/bos/eos; unknown ids render as `<unk>`.
    fn decode(&self, ids: &[u32]) -> String {
        let toks: Vec<&str> = ids
            .iter()
            .filter(|&&id| id != PAD_ID && id != BOS_ID && id != EOS_ID)
            .map(|&id| self.token_str(id).unwrap_or("<unk>"))
            .collect();
        detokenize(&toks)
    }

    fn pad_id(&self) -> u32 {
        PAD_ID
    }
    fn unk_id(&self) -> u32 {
        UNK_ID
    }
    fn bos_id(&self) -> u32 {
        BOS_ID
    }
    fn eos_id(&self) -> u32 {
        EOS_ID
    }
    /// Corruption placeholder. The word-level vocabulary has no spare
    /// reserved slot, so masking reuses the unknown id.
    fn mask_id(&self) -> u32 {
        UNK_ID
    }
}

/// Frequency-ranked lowercase word vocabulary.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct WordTokenizer {
    tokens: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, u32>,
}

impl WordTokenizer {
    /// Tokenizer holding only the reserved ids; useful where only
    /// [`Tokenizer::split`] matters.
    pub fn reserved_only() -> Self {
        Self::from_tokens(RESERVED.iter().map(|s| s.to_string()).collect())
    }

    pub fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Self { tokens, index }
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Rebuilds the lookup table after deserialization.
    pub fn reindex(self) -> Self {
        Self::from_tokens(self.tokens)
    }
}

impl Tokenizer for WordTokenizer {
    fn token_id(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(UNK_ID)
    }

    fn token_str(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    fn vocab_size(&self) -> usize {
        self.tokens.len()
    }
}

/// Builds a vocabulary of the 4 reserved ids plus the `max_vocab - 4` most
/// frequent tokens, ties broken lexicographically.
pub fn build_tokenizer<I, S>(texts: I, max_vocab: usize) -> Result<WordTokenizer>
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    if max_vocab < 5 {
        return Err(Error::InvalidArgument(format!(
            "max_vocab must be at least 5, got {max_vocab}"
        )));
    }
    let splitter = WordTokenizer::reserved_only();
    let mut counts: HashMap<String, usize> = HashMap::new();
    let mut seen_any = false;
    for text in texts {
        seen_any = true;
        for tok in splitter.split(text.as_ref()) {
            *counts.entry(tok).or_default() += 1;
        }
    }
    if !seen_any {
        return Err(Error::InvalidArgument("no texts to build a vocabulary from".into()));
    }
    let mut ranked: Vec<(String, usize)> = counts
        .into_iter()
        .filter(|(t, _)| !RESERVED.contains(&t.as_str()))
        .collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
    tokens.extend(ranked.into_iter().take(max_vocab - RESERVED.len()).map(|(t, _)| t));
    Ok(WordTokenizer::from_tokens(tokens))
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct Utterance {
    pub speaker: String,
    pub text: String,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DialogueExample {
    pub id: String,
    pub topic: String,
    pub context: Vec<Utterance>,
    pub response: String,
    pub positives: Vec<KnowledgeSnippet>,
    pub candidates: Vec<KnowledgeSnippet>,
    pub gold_candidate: Option<usize>,
}

impl DialogueExample {
    pub fn validate(&self) -> Result<()> {
        if self.context.is_empty() || self.context.iter().all(|u| u.text.trim().is_empty()) {
            return Err(Error::Validation(format!("{}: empty context", self.id)));
        }
        if self.response.trim().is_empty() {
            return Err(Error::Validation(format!("{}: empty response", self.id)));
        }
        if let Some(g) = self.gold_candidate {
            let cand = self.candidates.get(g).ok_or_else(|| {
                Error::Validation(format!(
                    "{}: gold_candidate {g} out of range for {} candidates",
                    self.id,
                    self.candidates.len()
                ))
            })?;
            if !self.positives.iter().any(|p| p.text == cand.text) {
                return Err(Error::Validation(format!(
                    "{}: gold candidate text is not among the positives",
                    self.id
                )));
            }
        }
        Ok(())
    }

    /// Context rendered as plain text, utterances joined by spaces.
    pub fn context_text(&self) -> String {
        self.context
            .iter()
            .map(|u| u.text.as_str())
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn last_utterance(&self) -> &str {
        self.context.last().map(|u| u.text.as_str()).unwrap_or("")
    }
}

#[derive(Debug, Deserialize)]
struct DialogueRecord {
    #[serde(default)]
    id: Option<String>,
    topic: String,
    turns: Vec<TurnRecord>,
}

#[derive(Debug, Deserialize)]
struct TurnRecord {
    speaker: String,
    text: String,
    #[serde(default)]
    response: Option<String>,
    #[serde(default)]
    positives: Option<Vec<String>>,
    #[serde(default)]
    candidates: Option<Vec<String>>,
    #[serde(default)]
    gold_candidate: Option<usize>,
}

/// Speaker tag used for responses inside the running context.
pub const RESPONDER: &str = "wizard";

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct LoadStats {
    pub dialogues: usize,
    pub turns: usize,
    pub examples: usize,
    pub skipped: usize,
}

/// Loads one example per turn carrying a `response`; other turns only
/// extend the context and are counted as skipped.
pub fn load_dialogues(path: &Path) -> Result<(Vec<DialogueExample>, LoadStats)> {
    parse_dialogues(path, read_lines(path)?)
}

/// Same as [`load_dialogues`] over numbered lines already in memory;
/// `path` only labels errors.
pub fn parse_dialogues(
    path: &Path,
    lines: impl IntoIterator<Item = (usize, String)>,
) -> Result<(Vec<DialogueExample>, LoadStats)> {
    let mut examples = Vec::new();
    let mut stats = LoadStats::default();
    for (line_no, line) in lines {
        let record: DialogueRecord = serde_json::from_str(&line)
            .map_err(|e| Error::record(path, line_no, format!("schema violation: {e}")))?;
        stats.dialogues += 1;
        let dialogue_id = record.id.clone().unwrap_or_else(|| format!("d{line_no}"));
        let mut context: Vec<Utterance> = Vec::new();
        for (turn_idx, turn) in record.turns.into_iter().enumerate() {
            stats.turns += 1;
            context.push(Utterance {
                speaker: turn.speaker.clone(),
                text: turn.text.clone(),
            });
            let Some(response) = turn.response.filter(|r| !r.trim().is_empty()) else {
                stats.skipped += 1;
                continue;
            };
            let example_id = format!("{dialogue_id}#{turn_idx}");
            let snippets = |texts: Option<Vec<String>>, tag: &str| -> Vec<KnowledgeSnippet> {
                texts
                    .unwrap_or_default()
                    .into_iter()
                    .enumerate()
                    .map(|(i, text)| KnowledgeSnippet::new(format!("{example_id}/{tag}{i}"), "", text))
                    .collect()
            };
            let example = DialogueExample {
                id: example_id.clone(),
                topic: record.topic.clone(),
                context: context.clone(),
                response: response.clone(),
                positives: snippets(turn.positives, "pos"),
                candidates: snippets(turn.candidates, "cand"),
                gold_candidate: turn.gold_candidate,
            };
            example
                .validate()
                .map_err(|e| Error::record(path, line_no, format!("turn {turn_idx}: {e}")))?;
            examples.push(example);
            stats.examples += 1;
            context.push(Utterance {
                speaker: RESPONDER.to_owned(),
                text: response,
            });
        }
    }
    Ok((examples, stats))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptTag {
    ResponseGeneration,
    KnowledgeIdentification,
    CorpusDenoising,
}

impl PromptTag {
    pub fn text(self) -> &'static str {
        match self {
            PromptTag::ResponseGeneration => "response generation :",
            PromptTag::KnowledgeIdentification => "knowledge identification :",
            PromptTag::CorpusDenoising => "corpus denoising :",
        }
    }

    pub const ALL: [PromptTag; 3] = [
        PromptTag::ResponseGeneration,
        PromptTag::KnowledgeIdentification,
        PromptTag::CorpusDenoising,
    ];
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncodedExample {
    pub input_ids: Vec<u32>,
    pub output_ids: Vec<u32>,
    pub prompt_tag: PromptTag,
    pub input_truncated: bool,
    pub output_truncated: bool,
}

/// Encodes a speaker-tagged context. The first distinct speaker is `U1:`,
/// everyone else `U2:`.
pub fn encode_context(context: &[Utterance], tokenizer: &dyn Tokenizer) -> Vec<u32> {
    let first = context.first().map(|u| u.speaker.as_str()).unwrap_or("");
    let mut ids = Vec::new();
    for utt in context {
        let tag = if utt.speaker == first { "U1:" } else { "U2:" };
        ids.extend(tokenizer.encode(tag));
        ids.extend(tokenizer.encode(&utt.text));
    }
    ids
}

/// Prompt tokens followed by `body`, dropping the oldest body tokens so the
/// whole input fits in [`MAX_INPUT_LEN`]. Returns whether truncation happened.
pub fn build_input(prompt: &str, body: &[u32], tokenizer: &dyn Tokenizer) -> Result<(Vec<u32>, bool)> {
    if prompt.trim().is_empty() {
        return Err(Error::InvalidArgument("prompt tag must be non-empty".into()));
    }
    let mut ids = tokenizer.encode(prompt);
    ids.truncate(MAX_INPUT_LEN);
    let room = MAX_INPUT_LEN - ids.len();
    let truncated = body.len() > room;
    ids.extend_from_slice(&body[body.len().saturating_sub(room)..]);
    Ok((ids, truncated))
}

/// Target tokens plus eos, keeping at most [`MAX_OUTPUT_LEN`] positions.
pub fn build_target(ids: &[u32], eos: u32) -> (Vec<u32>, bool) {
    let keep = ids.len().min(MAX_OUTPUT_LEN - 1);
    let mut out = ids[..keep].to_vec();
    out.push(eos);
    (out, keep < ids.len())
}

pub fn encode_with_prompt(
    prompt: &str,
    prompt_tag: PromptTag,
    context: &[Utterance],
    target: &str,
    tokenizer: &dyn Tokenizer,
) -> Result<EncodedExample> {
    let (input_ids, input_truncated) = build_input(prompt, &encode_context(context, tokenizer), tokenizer)?;
    let (output_ids, output_truncated) = build_target(&tokenizer.encode(target), tokenizer.eos_id());
    Ok(EncodedExample {
        input_ids,
        output_ids,
        prompt_tag,
        input_truncated,
        output_truncated,
    })
}

pub fn encode_example(
    context: &[Utterance],
    target: &str,
    prompt_tag: PromptTag,
    tokenizer: &dyn Tokenizer,
) -> Result<EncodedExample> {
    encode_with_prompt(prompt_tag.text(), prompt_tag, context, target, tokenizer)
}
