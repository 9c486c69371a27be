//! End-to-end stages (index, mine, train, decode, eval) over one flat
//! configuration, plus the ablation matrix and the desk-scale experiment.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::corpus::{build_index_with_stopwords, ingest_corpus, KnowledgeCorpus, TfIdfIndex};
use crate::data::{build_tokenizer, load_dialogues, parse_dialogues, DialogueExample, Tokenizer, WordTokenizer};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, EvalItem, MetricsReport};
use crate::model::{greedy_decode, SequenceModel, load_checkpoint, save_checkpoint, CheckpointHeader, ModelConfig, ReferenceModel};
use crate::negatives::{
    builtin_filters, mine_negatives, read_negatives, write_negatives, EntailmentFilter, FilterArgs, MineConfig,
    NegativeSet,
};
use crate::spans::{builtin_extractors, ExtractorArgs, Extractors, Gazetteer, RuleEntityExtractor};
use crate::synth::{generate, SynthConfig, SynthWorld};
use crate::text::{default_stopwords, derive_seed, load_stopwords, read_lines, sha256_hex, write_jsonl};
use crate::training::{steps_for, train, AblationFlags, TrainConfig, TrainExample, TrainInputs};

pub const TOOL: &str = "mixcl";
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
pub const SEED_ENV: &str = "MIXCL_SEED";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PathsConfig {
    pub corpus: PathBuf,
    pub train_dialogues: PathBuf,
    /// Dialogues that are decoded and scored.
    pub test_dialogues: PathBuf,
    pub stopwords: Option<PathBuf>,
    pub index: PathBuf,
    pub negatives: PathBuf,
    pub checkpoint: PathBuf,
    pub train_log: PathBuf,
    pub predictions: PathBuf,
    pub report: PathBuf,
    /// Checkpoint whose samples join the mined pools.
    pub mine_model: Option<PathBuf>,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            corpus: "data/corpus.jsonl".into(),
            train_dialogues: "data/train.jsonl".into(),
            test_dialogues: "data/test.jsonl".into(),
            stopwords: None,
            index: "out/index.mixcl".into(),
            negatives: "out/negatives.jsonl".into(),
            checkpoint: "out/model.ckpt".into(),
            train_log: "out/train_log.jsonl".into(),
            predictions: "out/predictions.jsonl".into(),
            report: "out/report.json".into(),
            mine_model: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelShape {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_enc_layers: usize,
    pub n_dec_layers: usize,
    pub d_ff: usize,
}

impl Default for ModelShape {
    fn default() -> Self {
        let c = ModelConfig::new(0);
        Self {
            d_model: c.d_model,
            n_heads: c.n_heads,
            n_enc_layers: c.n_enc_layers,
            n_dec_layers: c.n_dec_layers,
            d_ff: c.d_ff,
        }
    }
}

impl ModelShape {
    pub fn config(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            d_model: self.d_model,
            n_heads: self.n_heads,
            n_enc_layers: self.n_enc_layers,
            n_dec_layers: self.n_dec_layers,
            d_ff: self.d_ff,
            ..ModelConfig::new(vocab_size)
        }
    }
}

/// Every knob of the pipeline, readable from a flat key-value file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    #[serde(flatten)]
    pub paths: PathsConfig,
    #[serde(flatten)]
    pub train: TrainConfig,
    #[serde(flatten)]
    pub model: ModelShape,
    pub max_vocab: usize,
    /// Share of the training dialogues held out for checkpoint selection.
    pub validation_fraction: f64,
    pub query_last_utterance: bool,
    pub filter: String,
    pub filter_threshold: f64,
    pub entity_extractor: String,
    pub constituent_extractor: String,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let mut train = TrainConfig::default();
        // 0 means "the total number of optimizer steps of the run"
        train.schedule.total_steps = 0;
        Self {
            paths: PathsConfig::default(),
            train,
            model: ModelShape::default(),
            max_vocab: 2000,
            validation_fraction: 0.1,
            query_last_utterance: false,
            filter: "overlap".into(),
            filter_threshold: FilterArgs::default().threshold,
            entity_extractor: "rule-entity".into(),
            constituent_extractor: "rule-chunk".into(),
        }
    }
}

const OPTIONAL_KEYS: [&str; 2] = ["stopwords", "mine_model"];

impl PipelineConfig {
    pub fn seed(&self) -> u64 {
        self.train.seed
    }

    /// Parses a flat TOML file. Unknown keys are rejected.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let table: toml::Table = text.parse().map_err(|e| Error::Config(format!("{e}")))?;
        let known = Self::known_keys();
        if let Some(k) = table.keys().find(|k| !known.contains(k.as_str())) {
            return Err(Error::Config(format!("unknown configuration key `{k}`")));
        }
        let config: Self = table.try_into().map_err(|e| Error::Config(format!("{e}")))?;
        Ok(config)
    }

    fn known_keys() -> BTreeSet<String> {
        let value = serde_json::to_value(Self::default()).expect("config serializes");
        let mut keys: BTreeSet<String> = value.as_object().expect("flat object").keys().cloned().collect();
        keys.extend(OPTIONAL_KEYS.iter().map(|k| k.to_string()));
        keys
    }

    /// Loads the file (or the defaults), applies the seed override from
    /// the environment and validates.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let mut config = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                Self::from_toml_str(&text)?
            }
            None => Self::default(),
        };
        if let Ok(raw) = std::env::var(SEED_ENV) {
            config.train.seed = raw
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{SEED_ENV} must be an unsigned integer, got `{raw}`")))?;
        }
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        let mut train = self.train.clone();
        if train.schedule.total_steps == 0 {
            train.schedule.total_steps = 1;
        }
        train.validate()?;
        self.model.config(8).validate()?;
        if self.max_vocab < 8 {
            return Err(Error::Config("max_vocab must be at least 8".into()));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::Config("validation_fraction must lie in [0, 1)".into()));
        }
        if !builtin_filters().contains(&self.filter) {
            return Err(Error::Config(format!("unknown filter `{}`", self.filter)));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON rendering.
    pub fn hash(&self) -> String {
        sha256_hex(&serde_json::to_vec(self).expect("config serializes"))
    }

    pub fn provenance(&self, stage: &str) -> serde_json::Value {
        json!({
            "tool": TOOL,
            "version": VERSION,
            "stage": stage,
            "seed": self.seed(),
            "config_hash": self.hash(),
        })
    }

    fn header(&self, stage: &str) -> serde_json::Value {
        json!({ "provenance": self.provenance(stage) })
    }

    pub fn mine_config(&self) -> MineConfig {
        MineConfig {
            beta_neg: self.train.beta_neg,
            m: self.train.m,
            pool: self.train.retrieval_pool,
            n_samples: self.train.refresh_samples,
            temperature: self.train.sample_temperature,
            seed: self.seed(),
            query_last_utterance: self.query_last_utterance,
        }
    }

    pub fn entailment_filter(&self) -> Result<Box<dyn EntailmentFilter>> {
        builtin_filters().create(
            &self.filter,
            &FilterArgs {
                threshold: self.filter_threshold,
            },
        )
    }

    pub fn extractors(&self, gazetteer: Arc<Gazetteer>) -> Result<Extractors> {
        Extractors::from_registry(
            &builtin_extractors(),
            &self.entity_extractor,
            &self.constituent_extractor,
            &ExtractorArgs {
                gazetteer: Some(gazetteer),
            },
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Index,
    Mine,
    Train,
    Decode,
    Eval,
}

impl Stage {
    pub const ALL: [Stage; 5] = [Stage::Index, Stage::Mine, Stage::Train, Stage::Decode, Stage::Eval];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Index => "index",
            Stage::Mine => "mine",
            Stage::Train => "train",
            Stage::Decode => "decode",
            Stage::Eval => "eval",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|s| s.name() == name)
            .ok_or_else(|| Error::Config(format!("unknown stage `{name}` (known: index, mine, train, decode, eval)")))
    }
}

#[derive(Debug, Clone, Default)]
pub struct PipelineOutcome {
    pub artifacts: Vec<(Stage, PathBuf)>,
    pub report: Option<MetricsReport>,
}

fn require(path: &Path, stage: &'static str, run_first: &'static str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::MissingDependency {
            stage,
            missing: path.display().to_string(),
            run_first,
        })
    }
}

/// Runs the requested stages in pipeline order. Each stage reads its inputs
/// from disk, so any suffix of the pipeline can be resumed.
pub fn run_pipeline(config: &PipelineConfig, stages: &[Stage]) -> Result<PipelineOutcome> {
    config.validate()?;
    let stages: BTreeSet<Stage> = stages.iter().copied().collect();
    let mut out = PipelineOutcome::default();
    for stage in stages {
        match stage {
            Stage::Index => {
                stage_index(config)?;
                out.artifacts.push((stage, config.paths.index.clone()));
            }
            Stage::Mine => {
                stage_mine(config)?;
                out.artifacts.push((stage, config.paths.negatives.clone()));
            }
            Stage::Train => {
                stage_train(config)?;
                out.artifacts.push((stage, config.paths.checkpoint.clone()));
                out.artifacts.push((stage, config.paths.train_log.clone()));
            }
            Stage::Decode => {
                stage_decode(config)?;
                out.artifacts.push((stage, config.paths.predictions.clone()));
            }
            Stage::Eval => {
                out.report = Some(stage_eval(config)?);
                out.artifacts.push((stage, config.paths.report.clone()));
            }
        }
    }
    Ok(out)
}

/// Builds the retrieval index of the configured corpus in memory.
pub fn corpus_index(config: &PipelineConfig) -> Result<TfIdfIndex> {
    let corpus = ingest_corpus(&config.paths.corpus)?;
    let stopwords = match &config.paths.stopwords {
        Some(p) => load_stopwords(p)?,
        None => default_stopwords(),
    };
    build_index_with_stopwords(&corpus, &WordTokenizer::reserved_only(), stopwords)
}

pub fn stage_index(config: &PipelineConfig) -> Result<TfIdfIndex> {
    let index = corpus_index(config)?;
    index.save(&config.paths.index, &config.provenance("index"))?;
    Ok(index)
}

pub fn stage_mine(config: &PipelineConfig) -> Result<Vec<NegativeSet>> {
    require(&config.paths.index, "mine", "index")?;
    let (index, _) = TfIdfIndex::load(&config.paths.index)?;
    let (examples, _) = load_dialogues(&config.paths.train_dialogues)?;
    let filter = config.entailment_filter()?;
    let (sets, _) = match &config.paths.mine_model {
        Some(ckpt) => {
            require(ckpt, "mine", "train")?;
            let (model, tok) = load_model(ckpt)?;
            mine_negatives(&examples, &index, &tok, &config.mine_config(), Some(&model), filter.as_ref())?
        }
        None => mine_negatives::<ReferenceModel<f32>>(
            &examples,
            &index,
            &WordTokenizer::reserved_only(),
            &config.mine_config(),
            None,
            filter.as_ref(),
        )?,
    };
    write_negatives(&config.paths.negatives, Some(&config.header("mine")), &sets)?;
    Ok(sets)
}

/// Vocabulary over the corpus and every training dialogue text.
pub fn build_vocabulary(corpus: &[impl AsRef<str>], examples: &[DialogueExample], max_vocab: usize) -> Result<WordTokenizer> {
    let mut texts: Vec<&str> = corpus.iter().map(|s| s.as_ref()).collect();
    for ex in examples {
        texts.extend(ex.context.iter().map(|u| u.text.as_str()));
        texts.push(&ex.response);
        texts.extend(ex.positives.iter().map(|p| p.text.as_str()));
    }
    build_tokenizer(texts, max_vocab)
}

/// Entity names harvested from gold responses and knowledge of `examples`.
pub fn dialogue_gazetteer(examples: &[DialogueExample]) -> Gazetteer {
    let mut texts: Vec<&str> = Vec::new();
    for ex in examples {
        texts.push(&ex.response);
        texts.extend(ex.positives.iter().chain(&ex.candidates).map(|p| p.text.as_str()));
    }
    Gazetteer::harvest(texts)
}

/// Holds out a seeded share of the examples for checkpoint selection.
pub fn split_validation(
    examples: Vec<DialogueExample>,
    fraction: f64,
    seed: u64,
) -> (Vec<DialogueExample>, Vec<DialogueExample>) {
    let n_val = (examples.len() as f64 * fraction).round() as usize;
    if n_val == 0 || n_val >= examples.len() {
        return (examples, Vec::new());
    }
    let mut order: Vec<usize> = (0..examples.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, &["validation"])));
    let held: BTreeSet<usize> = order[..n_val].iter().copied().collect();
    let (val, train): (Vec<_>, Vec<_>) = examples.into_iter().enumerate().partition(|(i, _)| held.contains(i));
    (train.into_iter().map(|(_, e)| e).collect(), val.into_iter().map(|(_, e)| e).collect())
}

/// Everything a training run needs, already in memory.
pub struct RunData<'a> {
    pub train: &'a [DialogueExample],
    pub validation: &'a [DialogueExample],
    pub index: &'a TfIdfIndex,
    pub tokenizer: &'a WordTokenizer,
    pub gazetteer: Arc<Gazetteer>,
    pub negatives: HashMap<String, NegativeSet>,
}

pub struct TrainedModel {
    pub model: ReferenceModel<f32>,
    pub log: Vec<crate::training::LogRecord>,
    pub best_epoch: usize,
}

pub fn train_reference(config: &PipelineConfig, data: RunData<'_>) -> Result<TrainedModel> {
    let mut train_config = config.train.clone();
    if train_config.schedule.total_steps == 0 {
        train_config.schedule.total_steps = steps_for(data.train.len(), &train_config).max(1);
    }
    let extractors = config.extractors(data.gazetteer.clone())?;
    let filter = config.entailment_filter()?;
    let model_config = config.model.config(data.tokenizer.vocab_size());
    let mut model = ReferenceModel::<f32>::new(model_config.clone(), derive_seed(config.seed(), &["init"]))?;
    let outcome = train(
        &mut model,
        TrainInputs {
            train: data.train,
            validation: data.validation,
            index: data.index,
            tokenizer: data.tokenizer,
            extractors: &extractors,
            filter: filter.as_ref(),
            negatives: data.negatives,
        },
        &train_config,
    )?;
    Ok(TrainedModel {
        model: ReferenceModel::from_parameters(model_config, outcome.best_params)?,
        log: outcome.log,
        best_epoch: outcome.best_epoch,
    })
}

pub fn stage_train(config: &PipelineConfig) -> Result<TrainedModel> {
    if config.train.ablation.use_mcl() && !config.train.ablation.random_negatives {
        require(&config.paths.negatives, "train", "mine")?;
    }
    let index = corpus_index(config)?;
    let (examples, _) = load_dialogues(&config.paths.train_dialogues)?;
    let negatives = if config.paths.negatives.exists() {
        read_negatives(&config.paths.negatives)?
    } else {
        HashMap::new()
    };
    let corpus_texts: Vec<&str> = index.snippets().iter().map(|s| s.text.as_str()).collect();
    let tokenizer = build_vocabulary(&corpus_texts, &examples, config.max_vocab)?;
    let gazetteer = Arc::new(dialogue_gazetteer(&examples));
    let (train_set, val_set) = split_validation(examples, config.validation_fraction, config.seed());
    let trained = train_reference(
        config,
        RunData {
            train: &train_set,
            validation: &val_set,
            index: &index,
            tokenizer: &tokenizer,
            gazetteer,
            negatives,
        },
    )?;
    let params: Vec<f32> = trained.model.parameters().to_vec();
    let header = CheckpointHeader {
        model: trained.model.config().clone(),
        optimizer: "adamw(wd=0)".into(),
        learning_rate: config.train.learning_rate,
        weight_decay: 0.0,
        seed: config.seed(),
        n_params: params.len(),
        tokenizer: tokenizer.tokens().to_vec(),
        provenance: config.provenance("train"),
    };
    save_checkpoint(&config.paths.checkpoint, &header, &params)?;
    write_jsonl(&config.paths.train_log, Some(&config.header("train")), &trained.log)?;
    Ok(trained)
}

pub fn load_model(path: &Path) -> Result<(ReferenceModel<f32>, WordTokenizer)> {
    let (header, params) = load_checkpoint(path)?;
    let tokenizer = WordTokenizer::from_tokens(header.tokenizer);
    if tokenizer.vocab_size() != header.model.vocab_size {
        return Err(Error::format(path, "tokenizer size disagrees with the model vocabulary"));
    }
    Ok((ReferenceModel::from_parameters(header.model, params)?, tokenizer))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub example_id: String,
    pub text: String,
}

/// Greedy responses in input order.
pub fn decode_examples(
    model: &ReferenceModel<f32>,
    examples: &[DialogueExample],
    tokenizer: &dyn Tokenizer,
    max_len: usize,
) -> Result<Vec<Prediction>> {
    examples
        .par_iter()
        .map(|ex| {
            let enc = TrainExample::encode(ex, tokenizer)?;
            let ids = greedy_decode(model, &enc.mle_input, max_len)?;
            Ok(Prediction {
                example_id: ex.id.clone(),
                text: tokenizer.decode(&ids),
            })
        })
        .collect()
}

pub fn stage_decode(config: &PipelineConfig) -> Result<Vec<Prediction>> {
    require(&config.paths.checkpoint, "decode", "train")?;
    let (model, tokenizer) = load_model(&config.paths.checkpoint)?;
    let (examples, _) = load_dialogues(&config.paths.test_dialogues)?;
    let preds = decode_examples(&model, &examples, &tokenizer, config.train.max_decode_len)?;
    write_jsonl(&config.paths.predictions, Some(&config.header("decode")), &preds)?;
    Ok(preds)
}

/// Reads `{example_id, text}` lines, skipping a provenance header.
pub fn read_predictions(path: &Path) -> Result<Vec<Prediction>> {
    let mut out = Vec::new();
    for (line_no, line) in read_lines(path)? {
        let value: serde_json::Value =
            serde_json::from_str(&line).map_err(|e| Error::record(path, line_no, e.to_string()))?;
        if value.get("provenance").is_some() {
            continue;
        }
        out.push(serde_json::from_value(value).map_err(|e| Error::record(path, line_no, e.to_string()))?);
    }
    Ok(out)
}

/// Scores predictions against the matching examples. Every example must
/// have exactly one prediction.
pub fn score_predictions(preds: &[Prediction], examples: &[DialogueExample]) -> Result<MetricsReport> {
    let by_id: HashMap<&str, &str> = preds.iter().map(|p| (p.example_id.as_str(), p.text.as_str())).collect();
    if by_id.len() != preds.len() {
        return Err(Error::Validation("duplicate example ids among predictions".into()));
    }
    let candidates: Vec<Vec<String>> = examples
        .iter()
        .map(|ex| ex.candidates.iter().map(|c| c.text.clone()).collect())
        .collect();
    let mut items = Vec::with_capacity(examples.len());
    for (ex, cands) in examples.iter().zip(&candidates) {
        let pred = by_id
            .get(ex.id.as_str())
            .ok_or_else(|| Error::Validation(format!("no prediction for example `{}`", ex.id)))?;
        items.push(EvalItem {
            pred,
            reference: &ex.response,
            knowledge: ex.positives.first().map(|p| p.text.as_str()),
            candidates: cands,
            gold_candidate: ex.gold_candidate,
        });
    }
    let extractor = RuleEntityExtractor::new(Some(Arc::new(dialogue_gazetteer(examples))));
    evaluate(&items, &extractor)
}

pub fn stage_eval(config: &PipelineConfig) -> Result<MetricsReport> {
    require(&config.paths.predictions, "eval", "decode")?;
    let preds = read_predictions(&config.paths.predictions)?;
    let (examples, _) = load_dialogues(&config.paths.test_dialogues)?;
    let report = score_predictions(&preds, &examples)?;
    write_report(&config.paths.report, &report, &config.provenance("eval"))?;
    Ok(report)
}

/// Writes the structured report and a `.txt` table next to it.
pub fn write_report(path: &Path, report: &MetricsReport, provenance: &serde_json::Value) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let body = json!({
        "provenance": provenance,
        "metrics": report.scaled(),
        "n_examples": report.n_examples,
    });
    let text = serde_json::to_string_pretty(&body).expect("report serializes");
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))?;
    let table = path.with_extension("txt");
    std::fs::write(&table, report.to_string()).map_err(|e| Error::io(&table, e))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub variant: String,
    pub f1: Option<f64>,
    pub bleu4: Option<f64>,
    pub kf1: Option<f64>,
    pub error: Option<String>,
}

/// Scores of the base model and each variant, in percent.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationTable {
    pub base: AblationRow,
    pub variants: Vec<AblationRow>,
}

impl AblationTable {
    /// `variant - base` for F1, B4 and KF1; `None` where either run failed.
    pub fn deltas(&self, row: &AblationRow) -> [Option<f64>; 3] {
        let d = |a: Option<f64>, b: Option<f64>| Some(a? - b?);
        [
            d(row.f1, self.base.f1),
            d(row.bleu4, self.base.bleu4),
            d(row.kf1, self.base.kf1),
        ]
    }
}

impl fmt::Display for AblationTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let cell = |v: Option<f64>, signed: bool| match v {
            Some(v) if signed => format!("{v:+.1}"),
            Some(v) => format!("{v:.1}"),
            None => "failed".into(),
        };
        writeln!(f, "{:<26} {:>8} {:>8} {:>8}", "model", "F1", "B4", "KF1")?;
        writeln!(
            f,
            "{:<26} {:>8} {:>8} {:>8}",
            self.base.variant,
            cell(self.base.f1, false),
            cell(self.base.bleu4, false),
            cell(self.base.kf1, false)
        )?;
        for row in &self.variants {
            let [df1, db4, dkf1] = self.deltas(row);
            writeln!(
                f,
                "{:<26} {:>8} {:>8} {:>8}",
                format!("-{}", row.variant),
                cell(df1, true),
                cell(db4, true),
                cell(dkf1, true)
            )?;
        }
        Ok(())
    }
}

fn row_from(variant: &str, result: Result<MetricsReport>) -> AblationRow {
    match result {
        Ok(r) => {
            let s = r.scaled();
            AblationRow {
                variant: variant.to_string(),
                f1: s["f1"],
                bleu4: s["bleu4"],
                kf1: s["kf1"],
                error: None,
            }
        }
        Err(e) => AblationRow {
            variant: variant.to_string(),
            f1: None,
            bleu4: None,
            kf1: None,
            error: Some(e.to_string()),
        },
    }
}

/// Trains and scores the base configuration and every variant with the same
/// seed. A failing variant is recorded in its row; the others still run.
pub fn run_ablation_matrix(config: &PipelineConfig, variants: &[AblationFlags]) -> Result<AblationTable> {
    if variants.is_empty() {
        return Err(Error::InvalidArgument("the ablation matrix needs at least one variant".into()));
    }
    config.validate()?;
    require(&config.paths.negatives, "ablate", "mine")?;
    let index = corpus_index(config)?;
    let (examples, _) = load_dialogues(&config.paths.train_dialogues)?;
    let (test, _) = load_dialogues(&config.paths.test_dialogues)?;
    let negatives = read_negatives(&config.paths.negatives)?;
    let corpus_texts: Vec<&str> = index.snippets().iter().map(|s| s.text.as_str()).collect();
    let tokenizer = build_vocabulary(&corpus_texts, &examples, config.max_vocab)?;
    let gazetteer = Arc::new(dialogue_gazetteer(&examples));
    let (train_set, val_set) = split_validation(examples, config.validation_fraction, config.seed());

    let run = |flags: AblationFlags| -> Result<MetricsReport> {
        let mut cfg = config.clone();
        cfg.train.ablation = flags;
        let trained = train_reference(
            &cfg,
            RunData {
                train: &train_set,
                validation: &val_set,
                index: &index,
                tokenizer: &tokenizer,
                gazetteer: gazetteer.clone(),
                negatives: negatives.clone(),
            },
        )?;
        let preds = decode_examples(&trained.model, &test, &tokenizer, cfg.train.max_decode_len)?;
        score_predictions(&preds, &test)
    };
    tabulate_ablation(variants, run)
}

/// Runs the base configuration and each variant through `run`, recording
/// failures per row.
pub fn tabulate_ablation(
    variants: &[AblationFlags],
    run: impl Fn(AblationFlags) -> Result<MetricsReport>,
) -> Result<AblationTable> {
    if variants.is_empty() {
        return Err(Error::InvalidArgument("the ablation matrix needs at least one variant".into()));
    }
    let base_flags = AblationFlags::default();
    let base = row_from(base_flags.name(), run(base_flags));
    let variants = variants.iter().map(|&v| row_from(v.name(), run(v))).collect();
    Ok(AblationTable { base, variants })
}

/// One trained variant of the desk experiment.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DeskResult {
    pub seed: u64,
    pub variant: String,
    pub kf1: f64,
    pub ef1: f64,
    pub f1: f64,
    pub seconds: f64,
}

/// The synthetic world with its index, vocabulary and retrieval negatives.
pub struct DeskWorld {
    pub world: SynthWorld,
    pub train: Vec<DialogueExample>,
    pub test: Vec<DialogueExample>,
    pub index: TfIdfIndex,
    pub tokenizer: WordTokenizer,
    pub gazetteer: Arc<Gazetteer>,
}

fn examples_of(dialogues: &[crate::synth::SynthDialogue]) -> Result<Vec<DialogueExample>> {
    let lines = dialogues
        .iter()
        .enumerate()
        .map(|(i, d)| (i + 1, serde_json::to_string(d).expect("dialogue serializes")));
    parse_dialogues(Path::new("<synthetic>"), lines).map(|(ex, _)| ex)
}

pub fn desk_world(synth: &SynthConfig, max_vocab: usize) -> Result<DeskWorld> {
    let world = generate(synth)?;
    let train = examples_of(&world.train)?;
    let test = examples_of(&world.test)?;
    let corpus: &KnowledgeCorpus = &world.corpus;
    let index = build_index_with_stopwords(corpus, &WordTokenizer::reserved_only(), default_stopwords())?;
    let texts: Vec<&str> = corpus.snippets.iter().map(|s| s.text.as_str()).collect();
    let tokenizer = build_vocabulary(&texts, &train, max_vocab)?;
    let gazetteer = Arc::new(dialogue_gazetteer(&train));
    Ok(DeskWorld {
        world,
        train,
        test,
        index,
        tokenizer,
        gazetteer,
    })
}

/// Trains each variant for each seed on the same world and scores the
/// held-out split.
pub fn desk_ablation(
    desk: &DeskWorld,
    config: &PipelineConfig,
    variants: &[AblationFlags],
    seeds: &[u64],
) -> Result<Vec<DeskResult>> {
    let mut out = Vec::new();
    for &seed in seeds {
        let mut cfg = config.clone();
        cfg.train.seed = seed;
        let filter = cfg.entailment_filter()?;
        let (sets, _) = mine_negatives::<ReferenceModel<f32>>(
            &desk.train,
            &desk.index,
            &desk.tokenizer,
            &cfg.mine_config(),
            None,
            filter.as_ref(),
        )?;
        let negatives: HashMap<String, NegativeSet> = sets.into_iter().map(|s| (s.context_id.clone(), s)).collect();
        let (train_set, val_set) = split_validation(desk.train.clone(), cfg.validation_fraction, seed);
        for &flags in variants {
            let started = std::time::Instant::now();
            let mut vcfg = cfg.clone();
            vcfg.train.ablation = flags;
            let trained = train_reference(
                &vcfg,
                RunData {
                    train: &train_set,
                    validation: &val_set,
                    index: &desk.index,
                    tokenizer: &desk.tokenizer,
                    gazetteer: desk.gazetteer.clone(),
                    negatives: negatives.clone(),
                },
            )?;
            let preds = decode_examples(&trained.model, &desk.test, &desk.tokenizer, vcfg.train.max_decode_len)?;
            let report = score_predictions(&preds, &desk.test)?;
            out.push(DeskResult {
                seed,
                variant: flags.name().to_string(),
                kf1: report.kf1,
                ef1: report.ef1,
                f1: report.f1,
                seconds: started.elapsed().as_secs_f64(),
            });
        }
    }
    Ok(out)
}
