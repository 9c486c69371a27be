use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use mixcl_core::corpus::KnowledgeSnippet;
use mixcl_core::data::{build_tokenizer, parse_dialogues};
use mixcl_core::metrics::{load_labels, taxonomy_report};
use mixcl_core::mixup::{mix, mix_with_fallback};
use mixcl_core::pipeline::{run_ablation_matrix, run_pipeline, PipelineConfig, Stage};
use mixcl_core::spans::{SpanExtractor, SpanKind};
use mixcl_core::synth::{generate, write_world, SynthConfig};
use mixcl_core::text::read_lines;
use mixcl_core::training::AblationFlags;

#[derive(Parser)]
#[command(name = "mixcl", version, about = "Mixed contrastive learning for knowledge-grounded dialogue")]
struct Cli {
    /// Flat key-value configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build the TF-IDF index of a knowledge corpus.
    Index {
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        stopwords: Option<PathBuf>,
    },
    /// Mine negative knowledge for every training context.
    Mine {
        #[arg(long)]
        dialogues: Option<PathBuf>,
        #[arg(long)]
        index: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        beta_neg: Option<f64>,
        #[arg(long)]
        m: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Checkpoint whose samples join the pools.
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Train the reference model with the joint objective.
    Train {
        #[arg(long)]
        dialogues: Option<PathBuf>,
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        negatives: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        log: Option<PathBuf>,
        /// Ablation variant (base, disable_mcl, disable_lm, random_negatives,
        /// disable_model_negatives, mle_only).
        #[arg(long)]
        ablation: Option<String>,
    },
    /// Greedy-decode responses with a checkpoint.
    Decode {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        dialogues: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score predictions against gold responses and knowledge.
    Eval {
        #[arg(long)]
        pred: Option<PathBuf>,
        #[arg(long)]
        dialogues: Option<PathBuf>,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Run several pipeline stages in order.
    Run {
        /// Comma-separated subset of index,mine,train,decode,eval.
        #[arg(long, value_delimiter = ',', default_value = "index,mine,train,decode,eval")]
        stages: Vec<String>,
    },
    /// Print a mixed sequence with negative tokens bracketed.
    PreviewMix {
        #[arg(long)]
        pos: String,
        #[arg(long)]
        neg: String,
        #[arg(long, value_enum, default_value_t = Strategy::Auto)]
        strategy: Strategy,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Print the spans of a text as start, end, label and text.
    Spans {
        #[arg(long)]
        text: String,
        #[arg(long, value_enum, default_value_t = Kind::Entity)]
        kind: Kind,
    },
    /// Write the synthetic corpus and dialogues.
    Synth(SynthArgs),
    /// Train and score ablation variants against the base model.
    Ablate {
        #[arg(long, value_delimiter = ',', default_value = "disable_mcl,mle_only")]
        variants: Vec<String>,
    },
    /// Check a dialogue file and print turn statistics.
    ValidateData {
        #[arg(long)]
        dialogues: PathBuf,
    },
    /// Aggregate hallucination labels into the taxonomy table.
    LabelReport {
        #[arg(long)]
        labels: PathBuf,
    },
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value = "data")]
    out_dir: PathBuf,
    #[arg(long)]
    dialogues: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Strategy {
    Entity,
    Constituent,
    Auto,
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Entity,
    Constituent,
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut config = PipelineConfig::load(cli.config.as_deref())?;
    match cli.command {
        Command::Index { corpus, out, stopwords } => {
            set(&mut config.paths.corpus, corpus);
            set(&mut config.paths.index, out);
            if stopwords.is_some() {
                config.paths.stopwords = stopwords;
            }
            let index = mixcl_core::pipeline::stage_index(&config)?;
            println!("indexed {} snippets into {}", index.len(), config.paths.index.display());
        }
        Command::Mine {
            dialogues,
            index,
            out,
            beta_neg,
            m,
            seed,
            model,
        } => {
            set(&mut config.paths.train_dialogues, dialogues);
            set(&mut config.paths.index, index);
            set(&mut config.paths.negatives, out);
            set(&mut config.train.beta_neg, beta_neg);
            set(&mut config.train.m, m);
            set(&mut config.train.seed, seed);
            if model.is_some() {
                config.paths.mine_model = model;
            }
            config.validate()?;
            let sets = mixcl_core::pipeline::stage_mine(&config)?;
            let padded = sets.iter().filter(|s| s.padded).count();
            println!(
                "mined {} negative sets ({padded} padded) into {}",
                sets.len(),
                config.paths.negatives.display()
            );
        }
        Command::Train {
            dialogues,
            corpus,
            negatives,
            out,
            log,
            ablation,
        } => {
            set(&mut config.paths.train_dialogues, dialogues);
            set(&mut config.paths.corpus, corpus);
            set(&mut config.paths.negatives, negatives);
            set(&mut config.paths.checkpoint, out);
            set(&mut config.paths.train_log, log);
            if let Some(a) = ablation {
                config.train.ablation = AblationFlags::parse(&a)?;
            }
            let trained = mixcl_core::pipeline::stage_train(&config)?;
            let last = trained.log.last().context("training ran no steps")?;
            println!(
                "trained {} steps (J = {:.4}), kept epoch {}; checkpoint {}",
                trained.log.len(),
                last.j,
                trained.best_epoch,
                config.paths.checkpoint.display()
            );
        }
        Command::Decode { checkpoint, dialogues, out } => {
            set(&mut config.paths.checkpoint, checkpoint);
            set(&mut config.paths.test_dialogues, dialogues);
            set(&mut config.paths.predictions, out);
            let preds = mixcl_core::pipeline::stage_decode(&config)?;
            println!("decoded {} responses into {}", preds.len(), config.paths.predictions.display());
        }
        Command::Eval { pred, dialogues, report } => {
            set(&mut config.paths.predictions, pred);
            set(&mut config.paths.test_dialogues, dialogues);
            set(&mut config.paths.report, report);
            let report = mixcl_core::pipeline::stage_eval(&config)?;
            println!("{report}");
        }
        Command::Run { stages } => {
            let stages = stages.iter().map(|s| Stage::parse(s)).collect::<mixcl_core::Result<Vec<_>>>()?;
            let outcome = run_pipeline(&config, &stages)?;
            for (stage, path) in &outcome.artifacts {
                println!("{:<7} {}", stage.name(), path.display());
            }
            if let Some(report) = outcome.report {
                println!("{report}");
            }
        }
        Command::PreviewMix { pos, neg, strategy, seed } => {
            let z_pos = KnowledgeSnippet::new("pos", "", pos);
            let z_neg = KnowledgeSnippet::new("neg", "", neg);
            let tok = build_tokenizer([z_pos.text.as_str(), z_neg.text.as_str()], usize::MAX)?;
            let gazetteer = mixcl_core::spans::Gazetteer::harvest([z_pos.text.as_str(), z_neg.text.as_str()]);
            let extractors = config.extractors(std::sync::Arc::new(gazetteer))?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mixed = match strategy {
                Strategy::Auto => mix_with_fallback(&z_pos, &z_neg, config.train.beta_span, &extractors, &tok, &mut rng)?,
                Strategy::Entity => mix(&z_pos, &z_neg, SpanKind::Entity, &extractors, &tok, &mut rng)?,
                Strategy::Constituent => mix(&z_pos, &z_neg, SpanKind::Constituent, &extractors, &tok, &mut rng)?,
            };
            println!("{}", mixed.bracketed());
            let signs: Vec<String> = mixed.signs.iter().map(u8::to_string).collect();
            println!("{}", signs.join(" "));
        }
        Command::Spans { text, kind } => {
            let extractors = config.extractors(Default::default())?;
            let extractor: &dyn SpanExtractor = match kind {
                Kind::Entity => extractors.entity.as_ref(),
                Kind::Constituent => extractors.constituent.as_ref(),
            };
            for s in extractor.extract(&text)? {
                println!("{}\t{}\t{}\t{}", s.start, s.end, s.label, s.text);
            }
        }
        Command::Synth(args) => {
            let mut synth = SynthConfig::default();
            set(&mut synth.n_dialogues, args.dialogues);
            set(&mut synth.seed, args.seed);
            let world = generate(&synth)?;
            write_world(&args.out_dir, &world)?;
            println!(
                "wrote {} snippets, {} train and {} test dialogues to {}",
                world.corpus.len(),
                world.train.len(),
                world.test.len(),
                args.out_dir.display()
            );
        }
        Command::Ablate { variants } => {
            let flags = variants
                .iter()
                .map(|v| AblationFlags::parse(v))
                .collect::<mixcl_core::Result<Vec<_>>>()?;
            let table = run_ablation_matrix(&config, &flags)?;
            print!("{table}");
            for row in table.variants.iter().chain([&table.base]) {
                if let Some(e) = &row.error {
                    eprintln!("{} failed: {e}", row.variant);
                }
            }
        }
        Command::ValidateData { dialogues } => validate_data(&dialogues)?,
        Command::LabelReport { labels } => {
            let labels = load_labels(&labels)?;
            println!("{}", taxonomy_report(&labels)?);
        }
    }
    Ok(())
}

/// Checks every record separately so all violations are reported.
fn validate_data(path: &Path) -> Result<()> {
    let mut violations = 0;
    let (mut dialogues, mut turns, mut examples) = (0, 0, 0);
    for (line_no, line) in read_lines(path)? {
        match parse_dialogues(path, [(line_no, line)]) {
            Ok((_, stats)) => {
                dialogues += stats.dialogues;
                turns += stats.turns;
                examples += stats.examples;
            }
            Err(e) => {
                violations += 1;
                println!("{e}");
            }
        }
    }
    println!("dialogues {dialogues}  turns {turns}  responses {examples}  violations {violations}");
    if violations > 0 {
        bail!(mixcl_core::Error::Validation(format!("{violations} schema violations in {}", path.display())));
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = e.downcast_ref::<mixcl_core::Error>().map_or(1, |e| e.exit_code());
            ExitCode::from(code as u8)
        }
    }
}
