//! Shared fixtures for the integration tests.
#![allow(dead_code)]

use std::collections::HashMap;

use mixcl_core::autograd::Scalar;
use mixcl_core::corpus::KnowledgeSnippet;
use mixcl_core::data::{build_tokenizer, DialogueExample, Utterance, WordTokenizer};
use mixcl_core::model::{ModelConfig, ReferenceModel, SequenceModel};
use mixcl_core::negatives::{NegativeItem, NegativeSet, Source};
use mixcl_core::spans::Extractors;
use mixcl_core::training::{
    accumulate_terms, evaluate_terms, prepare_terms, MixedObjective, PreparedTerms, StepContext, TrainConfig,
    TrainExample, PROB_FLOOR,
};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Which objective a gradient check differentiates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Term {
    Mle,
    Mcl,
    Lm,
    Joint,
}

pub struct GradFixture {
    pub tokenizer: WordTokenizer,
    pub terms: PreparedTerms,
    pub weights: [f64; 3],
}

/// Twenty-word vocabulary, one dialogue turn, two mined negatives.
pub fn grad_fixture(term: Term) -> GradFixture {
    let texts = [
        "response generation :",
        "knowledge identification :",
        "corpus denoising :",
        "U1: where was Ada born ?",
        "Ada was born in Lyon .",
        "Ada was born in Porto .",
    ];
    let tokenizer = build_tokenizer(texts, 20).expect("tokenizer");
    assert!(tokenizer.tokens().len() <= 20);
    let positive = KnowledgeSnippet::new("k0", "", "Ada was born in Lyon .");
    let example = DialogueExample {
        id: "d0#0".into(),
        topic: "Ada".into(),
        context: vec![Utterance {
            speaker: "apprentice".into(),
            text: "where was Ada born ?".into(),
        }],
        response: "Ada was born in Lyon .".into(),
        positives: vec![positive.clone()],
        candidates: vec![],
        gold_candidate: None,
    };
    let negatives = HashMap::from([(
        example.id.clone(),
        NegativeSet {
            context_id: example.id.clone(),
            negatives: ["Ada was born in Porto .", "Lyon was born in Ada ."]
                .iter()
                .enumerate()
                .map(|(i, t)| NegativeItem {
                    id: format!("n{i}"),
                    text: t.to_string(),
                    source: Source::Retrieved,
                })
                .collect(),
            padded: false,
        },
    )]);
    let corpus = vec![positive, KnowledgeSnippet::new("k1", "", "Ada was born in Porto .")];
    let extractors = Extractors::rule_based(None);
    let config = TrainConfig {
        m: 2,
        ..TrainConfig::default()
    };
    let objective = MixedObjective;
    let ctx = StepContext {
        config: &config,
        tokenizer: &tokenizer,
        extractors: &extractors,
        objective: &objective,
        corpus: &corpus,
        negatives: &negatives,
    };
    let ex = TrainExample::encode(&example, &tokenizer).expect("encode");
    let all = prepare_terms(&ex, &ctx, [1.0, 1.0, 1.0], 0).expect("terms");
    assert!(all.mle.is_some() && all.contrast.is_some() && all.lm.is_some());
    let (terms, weights) = match term {
        Term::Mle => (PreparedTerms { contrast: None, lm: None, ..all }, [1.0, 0.0, 0.0]),
        Term::Mcl => (PreparedTerms { mle: None, lm: None, ..all }, [0.0, 1.0, 0.0]),
        Term::Lm => (PreparedTerms { mle: None, contrast: None, ..all }, [0.0, 0.0, 1.0]),
        Term::Joint => (all, [0.4, 0.3, 0.3]),
    };
    GradFixture {
        tokenizer,
        terms,
        weights,
    }
}

pub fn tiny_model<T: Scalar>(vocab: usize, seed: u64) -> ReferenceModel<T> {
    ReferenceModel::new(ModelConfig::tiny(vocab), seed).expect("model")
}

#[derive(Debug, Clone, Copy)]
pub struct GradReport {
    pub coordinates: usize,
    pub max_rel_error: f64,
    pub n_params: usize,
}

/// Denominator floor of the relative error, so coordinates whose gradient
/// is nearly zero are judged on absolute agreement.
pub const REL_FLOOR: f64 = 1e-3;

/// Compares the analytic gradient of `model` with central differences of
/// the same objective evaluated in f64 (step `1e-4 · max(1, |θ|)`) over
/// `n_coords` random coordinates with a non-negligible gradient.
pub fn gradcheck<T: Scalar>(model: &ReferenceModel<T>, fx: &GradFixture, n_coords: usize, seed: u64) -> GradReport {
    let n = model.parameters().len();
    let mut grad = vec![T::of(0.0); n];
    accumulate_terms(model, &fx.terms, fx.weights, 1.0, PROB_FLOOR, 0, &mut grad).expect("gradient");

    let mut oracle: ReferenceModel<f64> = model.cast();
    let objective = |m: &ReferenceModel<f64>| evaluate_terms(m, &fx.terms, PROB_FLOOR).expect("loss").weighted(fx.weights);

    let live: Vec<usize> = (0..n).filter(|&i| grad[i].f64().abs() > 1e-6).collect();
    assert!(live.len() >= n_coords, "only {} coordinates carry gradient", live.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picked = sample(&mut rng, live.len(), n_coords);
    let mut max_rel: f64 = 0.0;
    for k in picked.iter() {
        let i = live[k];
        let theta = oracle.parameters()[i];
        let h = 1e-4 * theta.abs().max(1.0);
        oracle.parameters_mut()[i] = theta + h;
        let up = objective(&oracle);
        oracle.parameters_mut()[i] = theta - h;
        let down = objective(&oracle);
        oracle.parameters_mut()[i] = theta;
        let fd = (up - down) / (2.0 * h);
        let g = grad[i].f64();
        let rel = (g - fd).abs() / g.abs().max(fd.abs()).max(REL_FLOOR);
        max_rel = max_rel.max(rel);
    }
    GradReport {
        coordinates: n_coords,
        max_rel_error: max_rel,
        n_params: n,
    }
}
