//! Span-substitution mixing of a positive and a negative snippet.

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::KnowledgeSnippet;
use crate::data::Tokenizer;
use crate::error::{Error, Result};
use crate::spans::{Extractors, Span, SpanKind};
use crate::text::{detokenize, split_surface};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Replacement {
    pub positive_span: Span,
    pub negative_span: Span,
    pub strategy: SpanKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixedSequence {
    pub tokens: Vec<u32>,
    /// Surface words aligned with `tokens`.
    pub words: Vec<String>,
    /// 1 where the token comes from the positive, 0 where from the negative.
    pub signs: Vec<u8>,
    /// `None` for the whole-negative fallback.
    pub replaced: Option<Replacement>,
    pub source_ids: (String, String),
}

impl MixedSequence {
    pub fn text(&self) -> String {
        detokenize(&self.words)
    }

    /// The text with each run of negative tokens wrapped in brackets.
    pub fn bracketed(&self) -> String {
        let mut out: Vec<String> = Vec::new();
        let mut i = 0;
        while i < self.words.len() {
            if self.signs[i] == 1 {
                out.push(self.words[i].clone());
                i += 1;
                continue;
            }
            let start = i;
            while i < self.words.len() && self.signs[i] == 0 {
                i += 1;
            }
            out.push(format!("[{}]", detokenize(&self.words[start..i])));
        }
        out.join(" ")
    }
}

/// Replaces one span of the positive with a same-label span of the negative.
/// When no label is shared, any span of the same kind is used.
pub fn mix<R: Rng + ?Sized>(
    z_pos: &KnowledgeSnippet,
    z_neg: &KnowledgeSnippet,
    strategy: SpanKind,
    extractors: &Extractors,
    tokenizer: &dyn Tokenizer,
    rng: &mut R,
) -> Result<MixedSequence> {
    let pos_words = split_surface(&z_pos.text);
    let neg_words = split_surface(&z_neg.text);
    if pos_words.is_empty() || neg_words.is_empty() {
        return Err(Error::InvalidArgument("cannot mix an empty snippet".into()));
    }
    let pos_spans = extractors.spans(strategy, &pos_words);
    let neg_spans = extractors.spans(strategy, &neg_words);
    if pos_spans.is_empty() || neg_spans.is_empty() {
        return Err(Error::MixFailure);
    }
    let shared: Vec<&Span> = pos_spans
        .iter()
        .filter(|p| neg_spans.iter().any(|n| n.label == p.label))
        .collect();
    let (p, n) = if shared.is_empty() {
        (pick(&pos_spans.iter().collect::<Vec<_>>(), rng), pick(&neg_spans.iter().collect::<Vec<_>>(), rng))
    } else {
        let p = pick(&shared, rng);
        let same: Vec<&Span> = neg_spans.iter().filter(|n| n.label == p.label).collect();
        (p, pick(&same, rng))
    };

    let inserted = &neg_words[n.start..n.end];
    // Substituting a span by an identical one leaves nothing to contrast.
    let neg_sign = u8::from(inserted == &pos_words[p.start..p.end]);
    let mut words = Vec::with_capacity(pos_words.len() - p.len() + inserted.len());
    let mut signs = Vec::with_capacity(words.capacity());
    for w in &pos_words[..p.start] {
        words.push(w.clone());
        signs.push(1);
    }
    for w in inserted {
        words.push(w.clone());
        signs.push(neg_sign);
    }
    for w in &pos_words[p.end..] {
        words.push(w.clone());
        signs.push(1);
    }
    Ok(MixedSequence {
        tokens: tokenizer.encode_tokens(&words),
        words,
        signs,
        replaced: Some(Replacement {
            positive_span: p.clone(),
            negative_span: n.clone(),
            strategy,
        }),
        source_ids: (z_pos.id.clone(), z_neg.id.clone()),
    })
}

fn pick<'a, R: Rng + ?Sized>(spans: &[&'a Span], rng: &mut R) -> &'a Span {
    spans.choose(rng).expect("non-empty span list")
}

pub fn choose_strategy<R: Rng + ?Sized>(beta_span: f64, rng: &mut R) -> SpanKind {
    if rng.random_bool(beta_span.clamp(0.0, 1.0)) {
        SpanKind::Entity
    } else {
        SpanKind::Constituent
    }
}

/// Chosen strategy, then the other one, then the whole negative with every
/// sign 0.
pub fn mix_with_fallback<R: Rng + ?Sized>(
    z_pos: &KnowledgeSnippet,
    z_neg: &KnowledgeSnippet,
    beta_span: f64,
    extractors: &Extractors,
    tokenizer: &dyn Tokenizer,
    rng: &mut R,
) -> Result<MixedSequence> {
    let first = choose_strategy(beta_span, rng);
    for strategy in [first, first.other()] {
        match mix(z_pos, z_neg, strategy, extractors, tokenizer, rng) {
            Err(Error::MixFailure) => continue,
            other => return other,
        }
    }
    let words = split_surface(&z_neg.text);
    if words.is_empty() {
        return Err(Error::InvalidArgument("cannot mix an empty snippet".into()));
    }
    Ok(MixedSequence {
        tokens: tokenizer.encode_tokens(&words),
        signs: vec![0; words.len()],
        words,
        replaced: None,
        source_ids: (z_pos.id.clone(), z_neg.id.clone()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::build_tokenizer;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn snip(id: &str, text: &str) -> KnowledgeSnippet {
        KnowledgeSnippet::new(id, "", text)
    }

    #[test]
    fn henry_example() {
        let pos = snip("p", "He was born and raised in Paris");
        let neg = snip("n", "He was born in Montreal, Quebec, Canada");
        let tok = build_tokenizer([pos.text.as_str(), neg.text.as_str()], 100).unwrap();
        let ex = Extractors::rule_based(None);
        let m = mix(&pos, &neg, SpanKind::Entity, &ex, &tok, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(m.text(), "He was born and raised in Montreal, Quebec, Canada");
        assert_eq!(m.signs, vec![1, 1, 1, 1, 1, 1, 0, 0, 0, 0, 0]);
        assert_eq!(m.bracketed(), "He was born and raised in [Montreal, Quebec, Canada]");
        assert_eq!(m.tokens.len(), m.signs.len());
    }

    #[test]
    fn no_spans_is_a_failure() {
        let tok = build_tokenizer(["x"], 10).unwrap();
        let ex = Extractors::rule_based(None);
        let r = mix(&snip("p", "born in Paris"), &snip("n", "and so on"), SpanKind::Entity, &ex, &tok, &mut ChaCha8Rng::seed_from_u64(0));
        assert!(matches!(r, Err(Error::MixFailure)));
    }

    #[test]
    fn identity_mix() {
        let s = snip("p", "he lived in Paris");
        let tok = build_tokenizer([s.text.as_str()], 20).unwrap();
        let ex = Extractors::rule_based(None);
        let m = mix(&s, &s, SpanKind::Entity, &ex, &tok, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(m.text(), s.text);
        assert!(m.signs.iter().all(|&b| b == 1));
        assert!(m.replaced.is_some());
        assert_eq!(m.tokens, tok.encode(&s.text));
    }

    #[test]
    fn strategy_boundaries_and_ratio() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert!((0..100).all(|_| choose_strategy(1.0, &mut rng) == SpanKind::Entity));
        assert!((0..100).all(|_| choose_strategy(0.0, &mut rng) == SpanKind::Constituent));
        let n = (0..10_000).filter(|_| choose_strategy(0.5, &mut rng) == SpanKind::Entity).count();
        assert!((4800..=5200).contains(&n), "{n}");
    }

    #[test]
    fn fallback_order() {
        let tok = build_tokenizer(["x"], 10).unwrap();
        let ex = Extractors::rule_based(None);
        // No entities on either side, but both have noun phrases.
        let pos = snip("p", "the dog barked");
        let neg = snip("n", "a cat slept");
        let m = mix_with_fallback(&pos, &neg, 1.0, &ex, &tok, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(m.replaced.as_ref().unwrap().strategy, SpanKind::Constituent);

        let neg = snip("n", ", ; .");
        let m = mix_with_fallback(&pos, &neg, 0.5, &ex, &tok, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(m.replaced.is_none());
        assert_eq!(m.words, split_surface(", ; ."));
        assert!(m.signs.iter().all(|&b| b == 0));

        let pos = snip("p", "He was born and raised in Paris");
        let neg = snip("n", "He was born in Montreal, Quebec, Canada");
        let direct = mix(&pos, &neg, SpanKind::Entity, &ex, &tok, &mut {
            let mut r = ChaCha8Rng::seed_from_u64(8);
            let _ = choose_strategy(1.0, &mut r);
            r
        })
        .unwrap();
        let via = mix_with_fallback(&pos, &neg, 1.0, &ex, &tok, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
        assert_eq!(direct, via);
    }
}
