//! Automatic response metrics and the hallucination taxonomy report.
//!
//! All text metrics share one tokenization (lowercase, punctuation deleted,
//! whitespace split) and return values in `[0, 1]`.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spans::{SpanExtractor, SpanKind};
use crate::text::{metric_tokens, read_lines, split_surface};

fn counts<'a>(tokens: impl IntoIterator<Item = &'a String>) -> HashMap<&'a str, usize> {
    let mut m = HashMap::new();
    for t in tokens {
        *m.entry(t.as_str()).or_insert(0) += 1;
    }
    m
}

fn f1_tokens(pred: &[String], reference: &[String]) -> f64 {
    if pred.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let p = counts(pred);
    let r = counts(reference);
    let common: usize = p.iter().map(|(t, c)| (*c).min(*r.get(t).unwrap_or(&0))).sum();
    if common == 0 {
        return 0.0;
    }
    let precision = common as f64 / pred.len() as f64;
    let recall = common as f64 / reference.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

/// Multiset unigram F1.
pub fn unigram_f1(pred: &str, reference: &str) -> f64 {
    f1_tokens(&metric_tokens(pred), &metric_tokens(reference))
}

/// Unigram F1 against the gold knowledge sentence.
pub fn knowledge_f1(pred: &str, gold_knowledge: &str) -> f64 {
    unigram_f1(pred, gold_knowledge)
}

fn entity_tokens(text: &str, extractor: &dyn SpanExtractor) -> Vec<String> {
    let surface = split_surface(text);
    extractor
        .extract_tokens(&surface)
        .iter()
        .flat_map(|s| metric_tokens(&s.text))
        .collect()
}

/// Unigram F1 after deleting every non-entity token from both sides.
pub fn entity_f1(pred: &str, reference: &str, extractor: &dyn SpanExtractor) -> Result<f64> {
    if extractor.kind() != SpanKind::Entity {
        return Err(Error::InvalidArgument("entity_f1 needs an entity extractor".into()));
    }
    Ok(f1_tokens(&entity_tokens(pred, extractor), &entity_tokens(reference, extractor)))
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut m = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Corpus BLEU over `(pred, ref)` pairs with uniform weights up to `max_n`
/// and brevity penalty. Orders above 1 whose clipped match count is zero
/// use `(0 + 1) / (total + 1)`.
pub fn corpus_bleu<S: AsRef<str>>(pairs: &[(S, S)], max_n: usize) -> Result<f64> {
    if !(1..=4).contains(&max_n) {
        return Err(Error::InvalidArgument(format!("BLEU order must be 1..=4, got {max_n}")));
    }
    let mut matches = vec![0usize; max_n];
    let mut totals = vec![0usize; max_n];
    let mut pred_len = 0usize;
    let mut ref_len = 0usize;
    for (pred, reference) in pairs {
        let p = metric_tokens(pred.as_ref());
        let r = metric_tokens(reference.as_ref());
        pred_len += p.len();
        ref_len += r.len();
        for n in 1..=max_n {
            let pc = ngram_counts(&p, n);
            let rc = ngram_counts(&r, n);
            matches[n - 1] += pc.iter().map(|(g, c)| (*c).min(*rc.get(g).unwrap_or(&0))).sum::<usize>();
            totals[n - 1] += p.len().saturating_sub(n - 1);
        }
    }
    if pred_len == 0 || matches[0] == 0 {
        return Ok(0.0);
    }
    let mut log_sum = 0.0;
    for n in 0..max_n {
        let precision = if matches[n] == 0 {
            1.0 / (totals[n] as f64 + 1.0)
        } else {
            matches[n] as f64 / totals[n] as f64
        };
        log_sum += precision.ln();
    }
    let bp = if pred_len > ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / pred_len as f64).exp()
    };
    Ok(bp * (log_sum / max_n as f64).exp())
}

pub fn bleu(pred: &str, reference: &str, max_n: usize) -> Result<f64> {
    if max_n != 2 && max_n != 4 {
        return Err(Error::InvalidArgument(format!("BLEU-{max_n} is not reported; use 2 or 4")));
    }
    corpus_bleu(&[(pred, reference)], max_n)
}

fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// ROUGE-L F-measure (beta = 1).
pub fn rouge_l(pred: &str, reference: &str) -> f64 {
    let p = metric_tokens(pred);
    let r = metric_tokens(reference);
    if p.is_empty() || r.is_empty() {
        return 0.0;
    }
    let lcs = lcs_len(&p, &r);
    if lcs == 0 {
        return 0.0;
    }
    let precision = lcs as f64 / p.len() as f64;
    let recall = lcs as f64 / r.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

/// 1 when the candidate with the highest unigram F1 against `pred` (lowest
/// index on ties) is the gold one.
pub fn knowledge_accuracy<S: AsRef<str>>(pred: &str, candidates: &[S], gold_index: usize) -> Result<u8> {
    if candidates.is_empty() {
        return Err(Error::InvalidArgument("no knowledge candidates".into()));
    }
    if gold_index >= candidates.len() {
        return Err(Error::InvalidArgument(format!(
            "gold index {gold_index} out of range for {} candidates",
            candidates.len()
        )));
    }
    let profile: Vec<f64> = candidates.iter().map(|c| unigram_f1(pred, c.as_ref())).collect();
    Ok(u8::from(argmax_lowest(&profile) == gold_index))
}

/// Index of the largest score, lowest index on ties.
pub fn argmax_lowest(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub f1: f64,
    pub rouge_l: f64,
    pub bleu2: f64,
    pub bleu4: f64,
    pub kf1: f64,
    pub ef1: f64,
    pub acc: Option<f64>,
    pub n_examples: usize,
}

/// One scored prediction with everything the report needs.
pub struct EvalItem<'a> {
    pub pred: &'a str,
    pub reference: &'a str,
    pub knowledge: Option<&'a str>,
    pub candidates: &'a [String],
    pub gold_candidate: Option<usize>,
}

pub fn evaluate(items: &[EvalItem<'_>], entity_extractor: &dyn SpanExtractor) -> Result<MetricsReport> {
    let n = items.len();
    if n == 0 {
        return Err(Error::InvalidArgument("nothing to evaluate".into()));
    }
    let mean = |f: &dyn Fn(&EvalItem) -> f64| items.iter().map(f).sum::<f64>() / n as f64;
    let pairs: Vec<(&str, &str)> = items.iter().map(|it| (it.pred, it.reference)).collect();
    let mut ef1 = 0.0;
    for it in items {
        ef1 += entity_f1(it.pred, it.reference, entity_extractor)?;
    }
    let mut acc_hits = 0usize;
    let mut acc_n = 0usize;
    for it in items {
        if let Some(g) = it.gold_candidate {
            acc_hits += knowledge_accuracy(it.pred, it.candidates, g)? as usize;
            acc_n += 1;
        }
    }
    Ok(MetricsReport {
        f1: mean(&|it| unigram_f1(it.pred, it.reference)),
        rouge_l: mean(&|it| rouge_l(it.pred, it.reference)),
        bleu2: corpus_bleu(&pairs, 2)?,
        bleu4: corpus_bleu(&pairs, 4)?,
        kf1: mean(&|it| it.knowledge.map_or(0.0, |k| knowledge_f1(it.pred, k))),
        ef1: ef1 / n as f64,
        acc: (acc_n > 0).then(|| acc_hits as f64 / acc_n as f64),
        n_examples: n,
    })
}

impl MetricsReport {
    /// Values scaled by 100 and rounded to one decimal.
    pub fn scaled(&self) -> BTreeMap<&'static str, Option<f64>> {
        let r = |x: f64| Some((x * 1000.0).round() / 10.0);
        BTreeMap::from([
            ("f1", r(self.f1)),
            ("rouge_l", r(self.rouge_l)),
            ("bleu2", r(self.bleu2)),
            ("bleu4", r(self.bleu4)),
            ("kf1", r(self.kf1)),
            ("ef1", r(self.ef1)),
            ("acc", self.acc.and_then(r)),
        ])
    }
}

impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = self.scaled();
        let cell = |k: &str| s[k].map_or("-".to_string(), |v| format!("{v:.1}"));
        writeln!(f, "{:>6} {:>6} {:>6} {:>6} {:>6} {:>6} {:>6}", "F1", "RL", "B2", "B4", "KF1", "EF1", "Acc")?;
        writeln!(
            f,
            "{:>6} {:>6} {:>6} {:>6} {:>6} {:>6} {:>6}",
            cell("f1"),
            cell("rouge_l"),
            cell("bleu2"),
            cell("bleu4"),
            cell("kf1"),
            cell("ef1"),
            cell("acc")
        )?;
        write!(f, "n = {}", self.n_examples)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HallucinationCategory {
    IntrinsicNonfactual,
    IntrinsicEntity,
    IntrinsicAmbiguous,
    ExtrinsicOutOfContext,
    ExtrinsicConfusion,
    ExtrinsicNonspecific,
    OtherOk,
    OtherMechanical,
    OtherNoKnowledge,
    OtherRepeat,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum HallucinationGroup {
    Intrinsic,
    Extrinsic,
    Other,
}

impl HallucinationCategory {
    pub const ALL: [HallucinationCategory; 10] = [
        Self::IntrinsicNonfactual,
        Self::IntrinsicEntity,
        Self::IntrinsicAmbiguous,
        Self::ExtrinsicOutOfContext,
        Self::ExtrinsicConfusion,
        Self::ExtrinsicNonspecific,
        Self::OtherOk,
        Self::OtherMechanical,
        Self::OtherNoKnowledge,
        Self::OtherRepeat,
    ];

    pub fn group(self) -> HallucinationGroup {
        use HallucinationCategory::*;
        match self {
            IntrinsicNonfactual | IntrinsicEntity | IntrinsicAmbiguous => HallucinationGroup::Intrinsic,
            ExtrinsicOutOfContext | ExtrinsicConfusion | ExtrinsicNonspecific => HallucinationGroup::Extrinsic,
            OtherOk | OtherMechanical | OtherNoKnowledge | OtherRepeat => HallucinationGroup::Other,
        }
    }

    pub fn name(self) -> &'static str {
        use HallucinationCategory::*;
        match self {
            IntrinsicNonfactual => "non-factual statement",
            IntrinsicEntity => "incorrect entity",
            IntrinsicAmbiguous => "ambiguous statement",
            ExtrinsicOutOfContext => "out-of-context",
            ExtrinsicConfusion => "confusion of similar knowledge",
            ExtrinsicNonspecific => "non-specific knowledge",
            OtherOk => "qualified response",
            OtherMechanical => "mechanical use of knowledge",
            OtherNoKnowledge => "no knowledge used",
            OtherRepeat => "repeated knowledge",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HallucinationLabel {
    pub example_id: String,
    pub category: HallucinationCategory,
}

pub fn load_labels(path: &Path) -> Result<Vec<HallucinationLabel>> {
    read_lines(path)?
        .into_iter()
        .map(|(n, line)| {
            serde_json::from_str(&line).map_err(|e| Error::record(path, n, format!("bad label record: {e}")))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TaxonomyReport {
    pub n_labels: usize,
    pub fractions: BTreeMap<HallucinationCategory, f64>,
    pub intrinsic: f64,
    pub extrinsic: f64,
    pub other: f64,
}

/// Per-category fractions plus group subtotals.
pub fn taxonomy_report(labels: &[HallucinationLabel]) -> Result<TaxonomyReport> {
    if labels.is_empty() {
        return Err(Error::InvalidArgument("no hallucination labels".into()));
    }
    let mut counts: BTreeMap<HallucinationCategory, usize> = BTreeMap::new();
    for l in labels {
        *counts.entry(l.category).or_default() += 1;
    }
    let n = labels.len();
    let group = |g: HallucinationGroup| {
        counts.iter().filter(|(c, _)| c.group() == g).map(|(_, k)| *k).sum::<usize>() as f64 / n as f64
    };
    Ok(TaxonomyReport {
        n_labels: n,
        fractions: HallucinationCategory::ALL
            .iter()
            .map(|c| (*c, *counts.get(c).unwrap_or(&0) as f64 / n as f64))
            .collect(),
        intrinsic: group(HallucinationGroup::Intrinsic),
        extrinsic: group(HallucinationGroup::Extrinsic),
        other: group(HallucinationGroup::Other),
    })
}

impl fmt::Display for TaxonomyReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let groups = [
            (HallucinationGroup::Intrinsic, "Intrinsic hallucination", self.intrinsic),
            (HallucinationGroup::Extrinsic, "Extrinsic hallucination", self.extrinsic),
            (HallucinationGroup::Other, "Other", self.other),
        ];
        for (g, title, subtotal) in groups {
            writeln!(f, "{title:<34} {:>6.1}%", subtotal * 100.0)?;
            for c in HallucinationCategory::ALL.iter().filter(|c| c.group() == g) {
                writeln!(f, "  {:<32} {:>6.1}%", c.name(), self.fractions[c] * 100.0)?;
            }
        }
        write!(f, "{} labels", self.n_labels)
    }
}
