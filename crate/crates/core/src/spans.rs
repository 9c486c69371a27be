//! Typed span extraction: entities and shallow constituents.
//!
//! Spans index into the surface tokens of [`split_surface`], which align
//! one-to-one with the ids produced by [`crate::data::Tokenizer::encode`].

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::registry::Registry;
use crate::text::{detokenize, is_punct_token, split_surface};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpanKind {
    Entity,
    Constituent,
}

impl SpanKind {
    pub fn other(self) -> SpanKind {
        match self {
            SpanKind::Entity => SpanKind::Constituent,
            SpanKind::Constituent => SpanKind::Entity,
        }
    }
}

impl std::str::FromStr for SpanKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "entity" => Ok(SpanKind::Entity),
            "constituent" => Ok(SpanKind::Constituent),
            other => Err(Error::InvalidArgument(format!("unknown span kind `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
    pub label: String,
    pub kind: SpanKind,
    pub text: String,
}

impl Span {
    fn over(tokens: &[String], start: usize, end: usize, label: &str, kind: SpanKind) -> Self {
        Span {
            start,
            end,
            label: label.to_owned(),
            kind,
            text: detokenize(&tokens[start..end]),
        }
    }

    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end == self.start
    }
}

pub trait SpanExtractor: Send + Sync {
    fn kind(&self) -> SpanKind;

    /// Spans over already-split surface tokens; never overlapping.
    fn extract_tokens(&self, tokens: &[String]) -> Vec<Span>;

    fn extract(&self, text: &str) -> Result<Vec<Span>> {
        if text.trim().is_empty() {
            return Err(Error::InvalidArgument("span extraction needs non-empty text".into()));
        }
        Ok(self.extract_tokens(&split_surface(text)))
    }
}

/// Groups spans by label, keeping input order inside each group.
pub fn spans_by_label(spans: &[Span]) -> BTreeMap<String, Vec<Span>> {
    let mut out: BTreeMap<String, Vec<Span>> = BTreeMap::new();
    for s in spans {
        out.entry(s.label.clone()).or_default().push(s.clone());
    }
    out
}

const MONTHS: &[&str] = &[
    "january", "february", "march", "april", "may", "june", "july", "august", "september",
    "october", "november", "december",
];
const ORG_WORDS: &[&str] = &[
    "university", "inc", "company", "club", "fc", "corporation", "association", "institute",
    "party", "band", "records", "college", "school", "society", "league",
];
const PLACE_CUES: &[&str] = &["in", "at", "from", "near", "to", "into"];

const DETERMINERS: &[&str] = &[
    "the", "a", "an", "this", "that", "these", "those", "his", "her", "its", "their", "my", "your",
    "our", "some", "any", "every", "each", "no",
];
const PRONOUNS: &[&str] = &["he", "she", "it", "they", "we", "i", "you", "him", "them", "me", "us", "who"];
const PREPOSITIONS: &[&str] = &[
    "in", "on", "at", "by", "with", "from", "to", "of", "for", "about", "into", "over", "under",
    "after", "before", "during", "between", "through", "against", "without", "within", "near",
    "since", "until", "across", "behind", "beyond", "like",
];
const PARTICLES: &[&str] = &["up", "out", "off", "down", "away", "back", "around", "along"];
const CONJUNCTIONS: &[&str] = &["and", "or", "but", "nor", "so", "yet", "than", "then", "not", "also", "very"];
const VERBS: &[&str] = &[
    "is", "are", "was", "were", "be", "been", "being", "am", "has", "have", "had", "do", "does",
    "did", "will", "would", "can", "could", "should", "may", "might", "must", "shall", "born",
    "wrote", "written", "made", "became", "become", "said", "says", "know", "knows", "think",
    "thinks", "went", "go", "goes", "won", "win", "wins", "lived", "lives", "live", "grew", "grow",
    "began", "begun", "ran", "run", "saw", "seen", "took", "taken", "gave", "given", "led",
    "plays", "play", "love", "like", "likes", "tell", "told", "sang", "sung", "built", "held",
];
const ADJECTIVES: &[&str] = &[
    "big", "small", "large", "great", "good", "bad", "new", "old", "young", "famous", "long",
    "short", "high", "low", "first", "last", "best", "little", "early", "late", "major", "many",
    "most", "more", "other", "same", "popular", "well", "red", "blue", "green", "black", "white",
];
const ADJ_SUFFIXES: &[&str] = &["ous", "ful", "ive", "able", "ible", "ic", "ish", "less", "ary"];

fn is_number(tok: &str) -> bool {
    tok.chars().next().is_some_and(|c| c.is_ascii_digit())
        && tok.chars().all(|c| c.is_ascii_digit() || c == ',' || c == '.')
}

fn is_year(tok: &str) -> bool {
    tok.len() == 4 && tok.chars().all(|c| c.is_ascii_digit()) && (1000..=2099).contains(&tok.parse::<u32>().unwrap_or(0))
}

fn is_capitalized(tok: &str) -> bool {
    let mut chars = tok.chars();
    chars.next().is_some_and(char::is_uppercase) && chars.all(|c| c.is_alphanumeric() || c == '\'' || c == '-')
}

fn sentence_initial(tokens: &[String], i: usize) -> bool {
    i == 0 || matches!(tokens[i - 1].as_str(), "." | "!" | "?" | ":" | "\"")
}

fn is_function_word(lower: &str) -> bool {
    DETERMINERS.contains(&lower)
        || PRONOUNS.contains(&lower)
        || PREPOSITIONS.contains(&lower)
        || CONJUNCTIONS.contains(&lower)
        || VERBS.contains(&lower)
        || PARTICLES.contains(&lower)
}

/// Lowercased multi-token entity names with labels.
#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
pub struct Gazetteer {
    entries: HashMap<Vec<String>, String>,
    max_len: usize,
}

impl Gazetteer {
    pub fn insert(&mut self, name: &str, label: &str) {
        let key: Vec<String> = split_surface(name).iter().map(|t| t.to_lowercase()).collect();
        if key.is_empty() {
            return;
        }
        self.max_len = self.max_len.max(key.len());
        self.entries.insert(key, label.to_owned());
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Collects capitalization-detected person/place/org entities from
    /// `texts`, labelling each name by majority vote (ties: smaller label).
    pub fn harvest<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let plain = RuleEntityExtractor::default();
        let mut votes: HashMap<String, BTreeMap<String, usize>> = HashMap::new();
        for text in texts {
            for span in plain.extract_tokens(&split_surface(text)) {
                if matches!(span.label.as_str(), "person" | "place" | "org") {
                    *votes.entry(span.text).or_default().entry(span.label).or_default() += 1;
                }
            }
        }
        let mut names: Vec<_> = votes.into_iter().collect();
        names.sort_by(|a, b| a.0.cmp(&b.0));
        let mut gaz = Gazetteer::default();
        for (name, labels) in names {
            let best = labels
                .iter()
                .max_by(|a, b| a.1.cmp(b.1).then_with(|| b.0.cmp(a.0)))
                .map(|(l, _)| l.clone())
                .expect("at least one vote");
            gaz.insert(&name, &best);
        }
        gaz
    }

    fn longest_match(&self, tokens: &[String], i: usize) -> Option<(usize, &str)> {
        let limit = self.max_len.min(tokens.len() - i);
        (1..=limit).rev().find_map(|len| {
            let key: Vec<String> = tokens[i..i + len].iter().map(|t| t.to_lowercase()).collect();
            self.entries.get(&key).map(|l| (len, l.as_str()))
        })
    }
}

/// Rule-based entity recognizer: gazetteer hits, years and month
/// expressions (time), digit tokens (number), and capitalized runs
/// (person / place / org). A run at the start of a sentence counts only
/// when it spans at least two words.
#[derive(Debug, Clone, Default)]
pub struct RuleEntityExtractor {
    gazetteer: Option<Arc<Gazetteer>>,
}

impl RuleEntityExtractor {
    pub fn new(gazetteer: Option<Arc<Gazetteer>>) -> Self {
        Self { gazetteer }
    }

    fn time_span(tokens: &[String], i: usize) -> Option<usize> {
        let tok = &tokens[i];
        let lower = tok.to_lowercase();
        let month = MONTHS.contains(&lower.as_str())
            && (is_capitalized(tok) || !matches!(lower.as_str(), "may" | "march"));
        if month {
            let mut end = i + 1;
            while end < tokens.len() && end < i + 4 && (is_number(&tokens[end]) || tokens[end] == ",") {
                end += 1;
            }
            while end > i + 1 && tokens[end - 1] == "," {
                end -= 1;
            }
            return Some(end);
        }
        is_year(tok).then_some(i + 1)
    }

    fn capitalized_run(tokens: &[String], i: usize) -> Option<(usize, usize)> {
        if !is_capitalized(&tokens[i]) {
            return None;
        }
        let mut start = i;
        let initial = sentence_initial(tokens, i);
        if initial && is_function_word(&tokens[i].to_lowercase()) {
            start += 1;
            if start >= tokens.len() || !is_capitalized(&tokens[start]) {
                return None;
            }
        }
        let mut end = start + 1;
        loop {
            if end < tokens.len() && is_capitalized(&tokens[end]) && !MONTHS.contains(&tokens[end].to_lowercase().as_str()) {
                end += 1;
            } else if end + 1 < tokens.len()
                && (tokens[end] == "," || tokens[end] == "of")
                && is_capitalized(&tokens[end + 1])
            {
                end += 2;
            } else {
                break;
            }
        }
        if sentence_initial(tokens, start) && end - start < 2 {
            return None;
        }
        Some((start, end))
    }

    fn label_run(tokens: &[String], start: usize, end: usize) -> &'static str {
        if tokens[start..end].iter().any(|t| ORG_WORDS.contains(&t.to_lowercase().as_str())) {
            "org"
        } else if start > 0 && PLACE_CUES.contains(&tokens[start - 1].to_lowercase().as_str()) {
            "place"
        } else {
            "person"
        }
    }
}

impl SpanExtractor for RuleEntityExtractor {
    fn kind(&self) -> SpanKind {
        SpanKind::Entity
    }

    fn extract_tokens(&self, tokens: &[String]) -> Vec<Span> {
        let mut spans = Vec::new();
        let mut i = 0;
        while i < tokens.len() {
            if let Some((len, label)) = self.gazetteer.as_ref().and_then(|g| g.longest_match(tokens, i)) {
                spans.push(Span::over(tokens, i, i + len, label, SpanKind::Entity));
                i += len;
            } else if let Some(end) = Self::time_span(tokens, i) {
                spans.push(Span::over(tokens, i, end, "time", SpanKind::Entity));
                i = end;
            } else if is_number(&tokens[i]) {
                spans.push(Span::over(tokens, i, i + 1, "number", SpanKind::Entity));
                i += 1;
            } else if let Some((start, end)) = Self::capitalized_run(tokens, i) {
                let label = Self::label_run(tokens, start, end);
                spans.push(Span::over(tokens, start, end, label, SpanKind::Entity));
                i = end;
            } else {
                i += 1;
            }
        }
        spans
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Tag {
    Det,
    Pron,
    Prep,
    Part,
    Verb,
    Adj,
    Noun,
    Other,
}

fn tag(tok: &str) -> Tag {
    if is_punct_token(tok) {
        return Tag::Other;
    }
    if is_number(tok) {
        return Tag::Noun;
    }
    let lower = tok.to_lowercase();
    let w = lower.as_str();
    if DETERMINERS.contains(&w) {
        Tag::Det
    } else if PRONOUNS.contains(&w) {
        Tag::Pron
    } else if PREPOSITIONS.contains(&w) {
        Tag::Prep
    } else if PARTICLES.contains(&w) {
        Tag::Part
    } else if CONJUNCTIONS.contains(&w) {
        Tag::Other
    } else if VERBS.contains(&w) {
        Tag::Verb
    } else if is_capitalized(tok) {
        Tag::Noun
    } else if ADJECTIVES.contains(&w) || (w.len() > 4 && ADJ_SUFFIXES.iter().any(|s| w.ends_with(s))) {
        Tag::Adj
    } else if (w.len() > 3 && w.ends_with("ed")) || (w.len() > 4 && w.ends_with("ing")) {
        Tag::Verb
    } else if w.chars().all(char::is_alphanumeric) {
        Tag::Noun
    } else {
        Tag::Other
    }
}

/// Shallow chunker producing NP (det? adj* noun+ | pronoun), VP
/// (verb+ particle*) and PP (preposition NP) spans, longest match first.
#[derive(Debug, Clone, Default)]
pub struct RuleChunker;

impl RuleChunker {
    fn np_len(tags: &[Tag], i: usize) -> usize {
        if tags.get(i) == Some(&Tag::Pron) {
            return 1;
        }
        let mut j = i;
        if tags.get(j) == Some(&Tag::Det) {
            j += 1;
        }
        while tags.get(j) == Some(&Tag::Adj) {
            j += 1;
        }
        let nouns_start = j;
        while tags.get(j) == Some(&Tag::Noun) {
            j += 1;
        }
        if j > nouns_start {
            j - i
        } else {
            0
        }
    }

    fn vp_len(tags: &[Tag], i: usize) -> usize {
        let mut j = i;
        while tags.get(j) == Some(&Tag::Verb) {
            j += 1;
        }
        if j == i {
            return 0;
        }
        while tags.get(j) == Some(&Tag::Part) {
            j += 1;
        }
        j - i
    }

    fn pp_len(tags: &[Tag], i: usize) -> usize {
        if tags.get(i) != Some(&Tag::Prep) {
            return 0;
        }
        match Self::np_len(tags, i + 1) {
            0 => 0,
            n => n + 1,
        }
    }
}

impl SpanExtractor for RuleChunker {
    fn kind(&self) -> SpanKind {
        SpanKind::Constituent
    }

    fn extract_tokens(&self, tokens: &[String]) -> Vec<Span> {
        let tags: Vec<Tag> = tokens.iter().map(|t| tag(t)).collect();
        let mut spans = Vec::new();
        let mut i = 0;
        while i < tokens.len() {
            let best = [("PP", Self::pp_len(&tags, i)), ("NP", Self::np_len(&tags, i)), ("VP", Self::vp_len(&tags, i))]
                .into_iter()
                .fold(("", 0), |acc, c| if c.1 > acc.1 { c } else { acc });
            if best.1 == 0 {
                i += 1;
            } else {
                spans.push(Span::over(tokens, i, i + best.1, best.0, SpanKind::Constituent));
                i += best.1;
            }
        }
        spans
    }
}

#[derive(Debug, Clone, Default)]
pub struct ExtractorArgs {
    pub gazetteer: Option<Arc<Gazetteer>>,
}

pub fn builtin_extractors() -> Registry<dyn SpanExtractor, ExtractorArgs> {
    let mut reg: Registry<dyn SpanExtractor, ExtractorArgs> = Registry::new("span extractor");
    reg.register("rule-entity", |a: &ExtractorArgs| Box::new(RuleEntityExtractor::new(a.gazetteer.clone())));
    reg.register("rule-chunk", |_: &ExtractorArgs| Box::new(RuleChunker));
    reg
}

/// The entity/constituent extractor pair used for mixing.
pub struct Extractors {
    pub entity: Box<dyn SpanExtractor>,
    pub constituent: Box<dyn SpanExtractor>,
    /// Constituent labels allowed for mixing; `None` keeps all.
    pub constituent_labels: Option<Vec<String>>,
}

impl Extractors {
    pub fn rule_based(gazetteer: Option<Arc<Gazetteer>>) -> Self {
        Self {
            entity: Box::new(RuleEntityExtractor::new(gazetteer)),
            constituent: Box::new(RuleChunker),
            constituent_labels: None,
        }
    }

    pub fn from_registry(
        registry: &Registry<dyn SpanExtractor, ExtractorArgs>,
        entity: &str,
        constituent: &str,
        args: &ExtractorArgs,
    ) -> Result<Self> {
        let entity = registry.create(entity, args)?;
        let constituent = registry.create(constituent, args)?;
        if entity.kind() != SpanKind::Entity || constituent.kind() != SpanKind::Constituent {
            return Err(Error::Config("extractor kinds do not match their slots".into()));
        }
        Ok(Self {
            entity,
            constituent,
            constituent_labels: None,
        })
    }

    pub fn spans(&self, kind: SpanKind, tokens: &[String]) -> Vec<Span> {
        match kind {
            SpanKind::Entity => self.entity.extract_tokens(tokens),
            SpanKind::Constituent => {
                let mut spans = self.constituent.extract_tokens(tokens);
                if let Some(allowed) = &self.constituent_labels {
                    spans.retain(|s| allowed.contains(&s.label));
                }
                spans
            }
        }
    }
}
