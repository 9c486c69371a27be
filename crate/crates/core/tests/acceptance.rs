//! The ten acceptance criteria, each at its stated tolerance. Every test
//! prints one `criterion N ... PASS|FAIL` line before asserting.

mod common;

use std::collections::HashMap;
use std::path::Path;
use std::time::{Duration, Instant};

use mixcl_core::corpus::KnowledgeSnippet;
use mixcl_core::data::{build_tokenizer, load_dialogues};
use mixcl_core::metrics::{bleu, corpus_bleu, entity_f1, rouge_l, taxonomy_report, unigram_f1};
use mixcl_core::metrics::{HallucinationCategory, HallucinationLabel};
use mixcl_core::mixup::{mix, mix_with_fallback};
use mixcl_core::model::{ModelConfig, ReferenceModel, SequenceModel};
use mixcl_core::negatives::{read_negatives, sample_negative_set, Source};
use mixcl_core::pipeline::{desk_ablation, desk_world, run_pipeline, stage_index, stage_mine, PipelineConfig, Stage};
use mixcl_core::spans::{Extractors, Gazetteer, RuleEntityExtractor, SpanKind};
use mixcl_core::synth::{generate, write_world, SynthConfig};
use mixcl_core::text::{detokenize, normalize, split_surface};
use mixcl_core::training::{loss_weights, mixed_contrast_loss, mle_loss, AblationFlags, LossWeightSchedule, PROB_FLOOR};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::{grad_fixture, gradcheck, tiny_model, Term};

fn verdict(n: usize, name: &str, pass: bool, detail: String) {
    println!("criterion {n} {name} ... {} ({detail})", if pass { "PASS" } else { "FAIL" });
    assert!(pass, "criterion {n} {name}: {detail}");
}

fn within(elapsed: Duration, limit_secs: u64) -> bool {
    elapsed < Duration::from_secs(limit_secs)
}

/// Points every artifact path of `config` into `dir`.
fn place_paths(config: &mut PipelineConfig, dir: &Path) {
    let p = &mut config.paths;
    p.corpus = dir.join("data/corpus.jsonl");
    p.train_dialogues = dir.join("data/train.jsonl");
    p.test_dialogues = dir.join("data/test.jsonl");
    p.index = dir.join("out/index.mixcl");
    p.negatives = dir.join("out/negatives.jsonl");
    p.checkpoint = dir.join("out/model.ckpt");
    p.train_log = dir.join("out/train_log.jsonl");
    p.predictions = dir.join("out/predictions.jsonl");
    p.report = dir.join("out/report.json");
}

#[test]
fn criterion_01_reduction_identity() {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    for i in 0..1000 {
        let vocab = rng.random_range(8..40);
        let model = ReferenceModel::<f64>::new(ModelConfig::tiny(vocab), i).unwrap();
        let x: Vec<u32> = (0..rng.random_range(1..16)).map(|_| rng.random_range(4..vocab as u32)).collect();
        let y: Vec<u32> = (0..rng.random_range(1..12)).map(|_| rng.random_range(2..vocab as u32)).collect();
        let probs: Vec<f64> = model.target_logprobs(&x, &[&y]).unwrap()[0].iter().map(|lp| lp.exp()).collect();
        let mixed = mixed_contrast_loss(&probs, &vec![1; y.len()], PROB_FLOOR).unwrap();
        let mle = mle_loss(&model, &x, &y, PROB_FLOOR).unwrap();
        worst = worst.max((mixed - mle).abs() / mle.abs().max(f64::MIN_POSITIVE));
    }
    let elapsed = started.elapsed();
    verdict(
        1,
        "reduction identity",
        worst <= 1e-9 && within(elapsed, 10),
        format!("max rel diff {worst:.2e} over 1000 pairs, {:.2}s", elapsed.as_secs_f64()),
    );
}

#[test]
fn criterion_02_gradient_fidelity() {
    let started = Instant::now();
    let mut worst = [0.0f64; 2];
    let mut min_coords = usize::MAX;
    let mut max_params = 0;
    for term in [Term::Mle, Term::Mcl, Term::Lm, Term::Joint] {
        let fx = grad_fixture(term);
        let vocab = fx.tokenizer.tokens().len();
        let r64 = gradcheck(&tiny_model::<f64>(vocab, 5), &fx, 120, 1);
        let r32 = gradcheck(&tiny_model::<f32>(vocab, 5), &fx, 120, 2);
        worst[0] = worst[0].max(r32.max_rel_error);
        worst[1] = worst[1].max(r64.max_rel_error);
        min_coords = min_coords.min(r32.coordinates).min(r64.coordinates);
        max_params = max_params.max(r64.n_params);
    }
    let elapsed = started.elapsed();
    verdict(
        2,
        "gradient fidelity",
        worst[0] < 1e-3 && worst[1] < 1e-6 && min_coords >= 100 && max_params <= 5000 && within(elapsed, 60),
        format!(
            "f32 {:.2e}, f64 {:.2e}, >= {min_coords} coordinates, {max_params} parameters, {:.2}s",
            worst[0],
            worst[1],
            elapsed.as_secs_f64()
        ),
    );
}

#[test]
fn criterion_03_schedule_endpoints() {
    let schedule = LossWeightSchedule {
        total_steps: 1000,
        ..Default::default()
    };
    let start = loss_weights(0, &schedule);
    let end = loss_weights(1000, &schedule);
    let mid = loss_weights(500, &schedule);
    let mid_err = mid.iter().zip([0.45, 0.4, 0.15]).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    verdict(
        3,
        "schedule endpoints",
        start == [0.4, 0.3, 0.3] && end == [0.5, 0.5, 0.0] && mid_err <= 1e-12,
        format!("start {start:?}, end {end:?}, midpoint error {mid_err:.1e}"),
    );
}

#[test]
fn criterion_04_mixture_statistics() {
    let started = Instant::now();
    let pool = |tag: &str| -> Vec<KnowledgeSnippet> {
        (0..20).map(|i| KnowledgeSnippet::new(format!("{tag}{i}"), "", format!("{tag} fact number {i}"))).collect()
    };
    let (retrieved, generated) = (pool("retrieved"), pool("generated"));
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut total = 0usize;
    for i in 0..10_000 {
        let set = sample_negative_set(&format!("c{i}"), &retrieved, &generated, 0.5, 8, &mut rng).unwrap();
        total += set.retrieved_count();
    }
    let mean = total as f64 / 10_000.0;
    let mut pure = |beta: f64, source: Source| {
        (0..1000).all(|i| {
            let set = sample_negative_set(&format!("p{i}"), &retrieved, &generated, beta, 8, &mut rng).unwrap();
            set.negatives.len() == 8 && set.negatives.iter().all(|n| n.source == source)
        })
    };
    let pure_generated = pure(0.0, Source::Generated);
    let pure_retrieved = pure(1.0, Source::Retrieved);
    let elapsed = started.elapsed();
    verdict(
        4,
        "mixture statistics",
        (3.8..=4.2).contains(&mean) && pure_generated && pure_retrieved && within(elapsed, 30),
        format!(
            "mean retrieved {mean:.3}, pure at 0: {pure_generated}, pure at 1: {pure_retrieved}, {:.2}s",
            elapsed.as_secs_f64()
        ),
    );
}

#[test]
fn criterion_05_mix_correctness() {
    let pos = KnowledgeSnippet::new("p", "", "He was born and raised in Paris");
    let neg = KnowledgeSnippet::new("n", "", "He was born in Montreal, Quebec, Canada");
    let tok = build_tokenizer([pos.text.as_str(), neg.text.as_str()], 100).unwrap();
    let ex = Extractors::rule_based(None);
    let m = mix(&pos, &neg, SpanKind::Entity, &ex, &tok, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let zero_at: Vec<usize> = (0..m.signs.len()).filter(|&i| m.signs[i] == 0).collect();
    let henry = m.text() == "He was born and raised in Montreal, Quebec, Canada"
        && zero_at == (m.signs.len() - 5..m.signs.len()).collect::<Vec<_>>()
        && m.tokens.len() == m.signs.len();

    // Random pairs of synthetic facts: sign-1 words are the positive minus its
    // replaced span, sign-0 words are exactly the inserted span.
    let world = generate(&SynthConfig::default()).unwrap();
    let facts = &world.corpus.snippets;
    let mut gaz = Gazetteer::default();
    for p in &world.people {
        gaz.insert(&p.name, "person");
    }
    for w in &world.works {
        gaz.insert(&w.title, "work");
    }
    let ex = Extractors::rule_based(Some(std::sync::Arc::new(gaz)));
    let squash = |w: &[String]| normalize(&detokenize(w));
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (mut checked, mut disagree) = (0, 0);
    for _ in 0..10_000 {
        let z_pos = &facts[rng.random_range(0..facts.len())];
        let z_neg = &facts[rng.random_range(0..facts.len())];
        let tok = build_tokenizer([z_pos.text.as_str(), z_neg.text.as_str()], 500).unwrap();
        let Ok(m) = mix_with_fallback(z_pos, z_neg, 0.5, &ex, &tok, &mut rng) else { continue };
        checked += 1;
        let pw = split_surface(&z_pos.text);
        let nw = split_surface(&z_neg.text);
        let Some(r) = m.replaced.as_ref() else {
            disagree += usize::from(m.words != nw || m.signs.iter().any(|&s| s != 0));
            continue;
        };
        let inserted = &nw[r.negative_span.start..r.negative_span.end];
        let mut kept = pw[..r.positive_span.start].to_vec();
        kept.extend_from_slice(&pw[r.positive_span.end..]);
        let pick = |bit: u8| -> Vec<String> {
            m.words.iter().zip(&m.signs).filter(|(_, &s)| s == bit).map(|(w, _)| w.clone()).collect()
        };
        let ok = if inserted == &pw[r.positive_span.start..r.positive_span.end] {
            pick(0).is_empty() && squash(&pick(1)) == squash(&pw)
        } else {
            squash(&pick(1)) == squash(&kept) && squash(&pick(0)) == squash(inserted)
        };
        if !ok || m.tokens.len() != m.signs.len() {
            disagree += 1;
        }
    }
    verdict(
        5,
        "mix correctness",
        henry && disagree == 0 && checked >= 9_000,
        format!("Henry pair {henry}, {disagree} disagreements over {checked} mixed pairs"),
    );
}

#[test]
fn criterion_06_exclusion_soundness() {
    let dir = tempfile::tempdir().unwrap();
    let world = generate(&SynthConfig::default()).unwrap();
    write_world(&dir.path().join("data"), &world).unwrap();
    let mut config = PipelineConfig::default();
    place_paths(&mut config, dir.path());
    stage_index(&config).unwrap();
    stage_mine(&config).unwrap();
    let sets = read_negatives(&config.paths.negatives).unwrap();
    let (examples, _) = load_dialogues(&config.paths.train_dialogues).unwrap();
    let mut violations = 0;
    let mut n_negatives = 0;
    for ex in &examples {
        let Some(set) = sets.get(&ex.id) else { continue };
        for n in &set.negatives {
            n_negatives += 1;
            if ex.positives.iter().any(|p| normalize(&p.text) == normalize(&n.text)) {
                violations += 1;
            }
        }
    }
    verdict(
        6,
        "exclusion soundness",
        violations == 0 && n_negatives > 0,
        format!(
            "{violations} positives among {n_negatives} negatives in {} sets ({} contexts had no negative)",
            sets.len(),
            examples.len() - sets.len()
        ),
    );
}

#[test]
fn criterion_07_metric_oracles() {
    let mut gaz = Gazetteer::default();
    gaz.insert("Paris", "place");
    let extractor = RuleEntityExtractor::new(Some(std::sync::Arc::new(gaz)));
    let cases = [
        ("unigram_f1", unigram_f1("a b c", "a d"), 0.4),
        ("rouge_l", rouge_l("a b c d", "a c d"), 6.0 / 7.0),
        (
            "entity_f1",
            entity_f1("She moved to Paris in 1847", "She moved to Paris", &extractor).unwrap(),
            2.0 / 3.0,
        ),
        ("bleu", bleu("the cat sat on the mat", "the cat sat on the mat", 4).unwrap(), 1.0),
    ];
    let worst = cases.iter().map(|(_, got, want)| (got - want).abs()).fold(0.0, f64::max);
    let bad: Vec<&str> = cases.iter().filter(|(_, got, want)| (got - want).abs() > 1e-9).map(|c| c.0).collect();

    #[derive(serde::Deserialize)]
    struct Case {
        pairs: Vec<(String, String)>,
        max_n: usize,
        bleu: f64,
    }
    let mut golden = 0;
    let mut golden_bad = 0;
    for line in include_str!("golden/bleu.jsonl").lines() {
        let case: Case = serde_json::from_str(line).unwrap();
        golden += 1;
        if corpus_bleu(&case.pairs, case.max_n).unwrap().to_bits() != case.bleu.to_bits() {
            golden_bad += 1;
        }
    }
    verdict(
        7,
        "metric oracles",
        bad.is_empty() && golden_bad == 0 && golden >= 100,
        format!("max oracle error {worst:.1e}, off: {bad:?}, golden {golden_bad}/{golden} mismatched"),
    );
}

#[test]
fn criterion_08_desk_ablation() {
    let started = Instant::now();
    let mut config = PipelineConfig::default();
    config.train.learning_rate = 1e-3;
    config.train.clip_norm = 1.0;
    config.train.epochs = 4;
    let synth = SynthConfig::default();
    let desk = desk_world(&synth, config.max_vocab).unwrap();
    let variants = ["base", "disable_mcl", "mle_only"].map(|v| AblationFlags::parse(v).unwrap());
    let seeds = [1, 2, 3, 4, 5];
    let results = desk_ablation(&desk, &config, &variants, &seeds).unwrap();
    let by: HashMap<(u64, &str), (f64, f64)> =
        results.iter().map(|r| ((r.seed, r.variant.as_str()), (r.kf1, r.ef1))).collect();
    let (mut beats, mut between) = (0, 0);
    for seed in seeds {
        let (base, no_mcl, mle) = (by[&(seed, "base")], by[&(seed, "disable_mcl")], by[&(seed, "mle_only")]);
        println!(
            "  seed {seed}: KF1 {:.3} / {:.3} / {:.3}, EF1 {:.3} / {:.3} / {:.3} (base / w/o MCL / MLE only)",
            base.0, no_mcl.0, mle.0, base.1, no_mcl.1, mle.1
        );
        beats += usize::from(base.0 > mle.0 && base.1 > mle.1);
        between += usize::from(mle.0 < no_mcl.0 && no_mcl.0 < base.0);
    }
    let elapsed = started.elapsed();
    let cores = std::thread::available_parallelism().map_or(1, |n| n.get());
    verdict(
        8,
        "desk-scale ablation",
        beats >= 4 && between >= 3 && within(elapsed, 600),
        format!(
            "{} entities, vocab {}, base beats MLE only in {beats}/5 seeds, w/o MCL between in {between}/5, {:.0}s on {cores} cores",
            synth.n_people + synth.n_works,
            desk.tokenizer.tokens().len(),
            elapsed.as_secs_f64()
        ),
    );
}

#[test]
fn criterion_09_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let world = generate(&SynthConfig {
        n_dialogues: 120,
        ..Default::default()
    })
    .unwrap();
    write_world(&dir.path().join("data"), &world).unwrap();
    let mut config = PipelineConfig::default();
    place_paths(&mut config, dir.path());
    config.model.d_model = 16;
    config.model.d_ff = 32;
    config.model.n_enc_layers = 1;
    config.model.n_dec_layers = 1;
    config.train.epochs = 1;
    config.train.learning_rate = 1e-3;
    config.train.validation_limit = 8;
    config.train.max_decode_len = 12;
    let files = [&config.paths.negatives, &config.paths.train_log, &config.paths.predictions];
    run_pipeline(&config, &Stage::ALL).unwrap();
    let first: Vec<Vec<u8>> = files.iter().map(|p| std::fs::read(p).unwrap()).collect();
    run_pipeline(&config, &Stage::ALL).unwrap();
    let differing: Vec<String> = files
        .iter()
        .zip(&first)
        .filter(|(p, b)| std::fs::read(p).unwrap() != **b)
        .map(|(p, _)| p.file_name().unwrap().to_string_lossy().into_owned())
        .collect();
    let sizes: Vec<usize> = first.iter().map(Vec::len).collect();
    verdict(
        9,
        "determinism",
        differing.is_empty() && sizes.iter().all(|&n| n > 0),
        format!("differing files {differing:?}, sizes {sizes:?} bytes"),
    );
}

#[test]
fn criterion_10_taxonomy_report() {
    use HallucinationCategory::*;
    let counts = [
        (IntrinsicNonfactual, 23),
        (IntrinsicEntity, 18),
        (IntrinsicAmbiguous, 7),
        (ExtrinsicOutOfContext, 29),
        (ExtrinsicConfusion, 13),
        (ExtrinsicNonspecific, 12),
        (OtherOk, 65),
        (OtherMechanical, 16),
        (OtherNoKnowledge, 11),
        (OtherRepeat, 6),
    ];
    let mut labels = Vec::new();
    for (category, n) in counts {
        for _ in 0..n {
            labels.push(HallucinationLabel {
                example_id: format!("r{}", labels.len()),
                category,
            });
        }
    }
    let r = taxonomy_report(&labels).unwrap();
    verdict(
        10,
        "taxonomy report",
        labels.len() == 200 && r.intrinsic == 0.24 && r.extrinsic == 0.27 && r.other == 0.49,
        format!("intrinsic {}, extrinsic {}, other {}", r.intrinsic, r.extrinsic, r.other),
    );
}
