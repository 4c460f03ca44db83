mod config;
mod manifest;

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use vocab_bridge::distill::{loss_curve_text, train_generator, TrainConfig};
use vocab_bridge::eval::{
    convergence_table, nearest_neighbors, neighbors_text, probe_table, run_benchmark, seq_length_sweep,
    sweep_table, BenchmarkConfig,
};
use vocab_bridge::generators::{GeneratorKind, GeneratorParams};
use vocab_bridge::neural::{pretrain, EncoderConfig, LrSchedule, PretrainConfig, PretrainedModel};
use vocab_bridge::transplant::{mismatch_report, transplant};
use vocab_bridge::{build_vocabulary, learn_bpe, Corpus, EmbeddingMatrix, SegmentationModel, Token, Vocabulary};

use manifest::RunManifest;

/// Vocabulary-bridging embedding transfer: learn segmentations, pretrain a
/// small encoder, train embedding generators, and transplant embeddings into
/// new vocabularies.
#[derive(Parser)]
#[command(name = "vocab-bridge", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML file with per-command sections; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Where the run manifest is written (defaults to the output's directory).
    #[arg(long)]
    run_dir: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Learn BPE merges and the resulting vocabulary from a corpus.
    LearnVocab {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        merges: Option<usize>,
        #[arg(long)]
        out_merges: PathBuf,
        #[arg(long)]
        out_vocab: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Pretrain the masked-LM encoder; writes a checkpoint directory plus
    /// `embedding.vec`.
    Pretrain {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        merges: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        common: Common,
    },
    /// Train ATT or PATT generator parameters against a frozen encoder.
    TrainGenerator {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        merges: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        /// att or patt.
        #[arg(long)]
        kind: Option<String>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        loss_curve: Option<PathBuf>,
        /// Directory for intermediate `step<k>.params` checkpoints.
        #[arg(long)]
        checkpoint_dir: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        common: Common,
    },
    /// Build a target-vocabulary embedding matrix.
    Transplant {
        #[arg(long)]
        source_emb: PathBuf,
        #[arg(long)]
        source_vocab: PathBuf,
        #[arg(long)]
        merges: PathBuf,
        #[arg(long)]
        target_vocab: PathBuf,
        /// Trained parameters; omit and pass `--avg` for plain averaging.
        #[arg(long, required_unless_present = "avg")]
        generator: Option<PathBuf>,
        #[arg(long, conflicts_with = "generator")]
        avg: bool,
        #[arg(long)]
        out: PathBuf,
        /// Defaults to `<out>.provenance`.
        #[arg(long)]
        provenance: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        common: Common,
    },
    /// Vocabulary mismatch statistics.
    Report {
        #[arg(long)]
        source_vocab: PathBuf,
        #[arg(long)]
        target_vocab: PathBuf,
        /// Also list the unseen tokens.
        #[arg(long)]
        list: bool,
    },
    /// Experiments.
    Eval {
        #[command(subcommand)]
        what: EvalCommand,
    },
}

#[derive(Subcommand)]
enum EvalCommand {
    /// Mean tokens per sentence for several merge counts.
    SeqLen {
        #[arg(long)]
        corpus: PathBuf,
        /// Ascending, comma separated.
        #[arg(long, value_delimiter = ',', required = true)]
        merges: Vec<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Nearest neighbours by cosine similarity.
    Neighbors {
        #[arg(long)]
        emb: PathBuf,
        #[arg(long)]
        token: String,
        #[arg(short, long, default_value_t = 10)]
        k: usize,
    },
    /// Full synthetic distribution-shift benchmark.
    Benchmark {
        #[arg(long)]
        out_dir: PathBuf,
        #[command(flatten)]
        common: Common,
    },
}

fn main() {
    let cli = Cli::parse();
    if let Err(err) = run(cli) {
        eprintln!("error: {err:#}");
        std::process::exit(1);
    }
}

fn require_file(path: &Path, what: &str) -> Result<()> {
    if !path.exists() {
        bail!("{what} {} does not exist", path.display());
    }
    Ok(())
}

fn run_dir_for(common: &Common, output: &Path) -> PathBuf {
    common.run_dir.clone().unwrap_or_else(|| {
        output
            .parent()
            .filter(|p| !p.as_os_str().is_empty())
            .map_or_else(|| PathBuf::from("."), Path::to_path_buf)
    })
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    ensure_parent(path)?;
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::LearnVocab {
            corpus,
            merges,
            out_merges,
            out_vocab,
            common,
        } => {
            require_file(&corpus, "corpus")?;
            let cfg = config::load(common.config.as_deref())?;
            let merges = merges.or(cfg.learn_vocab.merges).unwrap_or(8000);
            let text = Corpus::load(&corpus)?;
            let seg = learn_bpe(&text, merges)?;
            let vocab = build_vocabulary(&text, &seg)?;
            write_text(&out_merges, &seg.to_text())?;
            write_text(&out_vocab, &vocab.to_text())?;
            println!("learned {} merges; vocabulary size {}", seg.num_merges(), vocab.len());
            let mut m = RunManifest::new("learn-vocab");
            m.setting("merges", merges);
            m.input("corpus", &corpus)?;
            m.output("merges", &out_merges)?.output("vocab", &out_vocab)?;
            m.write(&run_dir_for(&common, &out_vocab))?;
        }
        Command::Pretrain {
            corpus,
            merges,
            vocab,
            out_dir,
            steps,
            seed,
            common,
        } => {
            for (p, what) in [(&corpus, "corpus"), (&merges, "merges file"), (&vocab, "vocabulary")] {
                require_file(p, what)?;
            }
            let cfg = config::load(common.config.as_deref())?.pretrain;
            let d = EncoderConfig::default();
            let seed = seed.or(cfg.seed).unwrap_or(0);
            let encoder = EncoderConfig {
                dim: cfg.dim.unwrap_or(d.dim),
                num_layers: cfg.layers.unwrap_or(d.num_layers),
                num_heads: cfg.heads.unwrap_or(d.num_heads),
                ffn_dim: cfg.ffn_dim.unwrap_or(d.ffn_dim),
                max_seq_len: cfg.max_seq_len.unwrap_or(d.max_seq_len),
                mask_fraction: cfg.mask_fraction.unwrap_or(d.mask_fraction),
                seed,
            };
            let p = PretrainConfig::default();
            let steps = steps.or(cfg.steps).unwrap_or(p.steps);
            let train = PretrainConfig {
                steps,
                batch_size: cfg.batch_size.unwrap_or(p.batch_size),
                schedule: LrSchedule {
                    peak: cfg.lr.unwrap_or(p.schedule.peak),
                    warmup_steps: cfg.warmup.unwrap_or(p.schedule.warmup_steps).min(steps),
                    total_steps: steps,
                    final_fraction: p.schedule.final_fraction,
                },
                seed,
                ..p
            };
            let seg = SegmentationModel::load(&merges)?;
            let vocabulary = Arc::new(Vocabulary::load(&vocab)?);
            let sentences = seg.segment_corpus(&Corpus::load(&corpus)?);
            let (model, report) = pretrain(&sentences, vocabulary, encoder, &train)?;
            model.save(&out_dir)?;
            let emb_path = out_dir.join("embedding.vec");
            model.embedding().save(&emb_path)?;
            println!(
                "held-out loss {:.4} -> {:.4}",
                report.initial_heldout_loss, report.final_heldout_loss
            );
            let mut m = RunManifest::new("pretrain");
            m.seed("seed", seed).setting("steps", steps).setting("dim", model.dim());
            m.input("corpus", &corpus)?.input("merges", &merges)?.input("vocab", &vocab)?;
            m.output("checkpoint", &out_dir)?;
            m.write(&common.run_dir.clone().unwrap_or_else(|| out_dir.clone()))?;
        }
        Command::TrainGenerator {
            checkpoint,
            merges,
            corpus,
            kind,
            out,
            loss_curve,
            checkpoint_dir,
            steps,
            seed,
            common,
        } => {
            require_file(&checkpoint, "checkpoint directory")?;
            require_file(&merges, "merges file")?;
            require_file(&corpus, "corpus")?;
            let cfg = config::load(common.config.as_deref())?.train_generator;
            let kind: GeneratorKind = kind
                .or(cfg.kind)
                .unwrap_or_else(|| "patt".into())
                .parse()?;
            let d = TrainConfig::default();
            let steps = steps.or(cfg.steps).unwrap_or(d.steps);
            let seed = seed.or(cfg.seed).unwrap_or(0);
            let train = TrainConfig {
                lambda: cfg.lambda.unwrap_or(d.lambda),
                steps,
                batch_size: cfg.batch_size.unwrap_or(d.batch_size),
                schedule: LrSchedule {
                    peak: cfg.lr.unwrap_or(d.schedule.peak),
                    warmup_steps: cfg.warmup.unwrap_or(d.schedule.warmup_steps).min(steps),
                    total_steps: steps,
                    final_fraction: d.schedule.final_fraction,
                },
                seed,
                kind,
                verbatim_prefactor: !cfg.normalized.unwrap_or(false),
                augment: vocab_bridge::augment::AugmentConfig {
                    p_merge: cfg.p_merge.unwrap_or(d.augment.p_merge),
                    p_split: cfg.p_split.unwrap_or(d.augment.p_split),
                    max_pieces: cfg.max_pieces.unwrap_or(d.augment.max_pieces),
                },
                checkpoint_every: cfg.checkpoint_every.unwrap_or(0),
                ..d
            };
            let model = PretrainedModel::load(&checkpoint)?;
            let seg = SegmentationModel::load(&merges)?;
            let sentences = seg.segment_corpus(&Corpus::load(&corpus)?);
            let outcome = train_generator(&model, &seg, &sentences, &train)?;
            ensure_parent(&out)?;
            outcome.params.save(&out)?;
            let curve_path = loss_curve.unwrap_or_else(|| out.with_extension("loss.tsv"));
            write_text(&curve_path, &loss_curve_text(&outcome.curve))?;
            if let Some(dir) = &checkpoint_dir {
                fs::create_dir_all(dir)?;
                for (step, params) in &outcome.checkpoints {
                    params.save(dir.join(format!("step{step}.params")))?;
                }
            }
            if let Some(last) = outcome.curve.last() {
                println!("final step {}: L_p {:.4} L_d {:.4} total {:.4}", last.step, last.l_p, last.l_d, last.total);
            }
            let mut m = RunManifest::new("train-generator");
            m.seed("seed", seed).setting("kind", kind).setting("steps", steps).setting("lambda", train.lambda);
            m.input("checkpoint", &checkpoint)?.input("merges", &merges)?.input("corpus", &corpus)?;
            m.output("generator", &out)?.output("loss_curve", &curve_path)?;
            m.write(&run_dir_for(&common, &out))?;
        }
        Command::Transplant {
            source_emb,
            source_vocab,
            merges,
            target_vocab,
            generator,
            avg: _,
            out,
            provenance,
            seed,
            common,
        } => {
            for (p, what) in [
                (&source_emb, "source embedding file"),
                (&source_vocab, "source vocabulary"),
                (&merges, "merges file"),
                (&target_vocab, "target vocabulary"),
            ] {
                require_file(p, what)?;
            }
            let cfg = config::load(common.config.as_deref())?.transplant;
            let seed = seed.or(cfg.seed).unwrap_or(0);
            let source_vocab_v = Arc::new(Vocabulary::load(&source_vocab)?);
            let source = EmbeddingMatrix::load(&source_emb)?.align_to(source_vocab_v)?;
            let seg = SegmentationModel::load(&merges)?;
            let target = Arc::new(Vocabulary::load(&target_vocab)?);
            // clap guarantees exactly one of --generator and --avg
            let params = match &generator {
                Some(path) => {
                    require_file(path, "generator file")?;
                    GeneratorParams::load(path)?
                }
                None => GeneratorParams::zeros(GeneratorKind::Avg, source.dim()),
            };
            let result = transplant(&source, &seg, target, &params, seed)?;
            ensure_parent(&out)?;
            result.embedding.save(&out)?;
            let prov_path = provenance.unwrap_or_else(|| {
                let mut p = out.clone().into_os_string();
                p.push(".provenance");
                PathBuf::from(p)
            });
            result.save_provenance(&prov_path)?;
            println!(
                "copied {}, generated {}, fallback {}",
                result.count(vocab_bridge::transplant::Provenance::Copied),
                result.count(vocab_bridge::transplant::Provenance::Generated),
                result.count(vocab_bridge::transplant::Provenance::Fallback)
            );
            let mut m = RunManifest::new("transplant");
            m.seed("fallback", seed).setting("generator", params.kind());
            m.input("source_emb", &source_emb)?
                .input("source_vocab", &source_vocab)?
                .input("merges", &merges)?
                .input("target_vocab", &target_vocab)?;
            if let Some(g) = &generator {
                m.input("generator", g)?;
            }
            m.output("embedding", &out)?.output("provenance", &prov_path)?;
            m.write(&run_dir_for(&common, &out))?;
        }
        Command::Report {
            source_vocab,
            target_vocab,
            list,
        } => {
            require_file(&source_vocab, "source vocabulary")?;
            require_file(&target_vocab, "target vocabulary")?;
            let report = mismatch_report(&Vocabulary::load(&source_vocab)?, &Vocabulary::load(&target_vocab)?);
            print!("{report}");
            if list {
                for t in &report.unseen_tokens {
                    println!("{t}");
                }
            }
        }
        Command::Eval { what } => run_eval(what)?,
    }
    Ok(())
}

fn run_eval(what: EvalCommand) -> Result<()> {
    match what {
        EvalCommand::SeqLen { corpus, merges, out } => {
            require_file(&corpus, "corpus")?;
            let rows = seq_length_sweep(&Corpus::load(&corpus)?, &merges)?;
            let table = sweep_table(&rows).to_tsv();
            print!("{table}");
            if let Some(out) = out {
                write_text(&out, &table)?;
            }
        }
        EvalCommand::Neighbors { emb, token, k } => {
            require_file(&emb, "embedding file")?;
            let e = EmbeddingMatrix::load(&emb)?;
            let token = Token::parse(&token)?;
            print!("{}", neighbors_text(&nearest_neighbors(&e, &token, k)?));
        }
        EvalCommand::Benchmark { out_dir, common } => {
            let cfg = config::load(common.config.as_deref())?.benchmark;
            let mut config = BenchmarkConfig::default();
            if let Some(v) = cfg.upstream_sentences {
                config.shift.upstream_sentences = v;
            }
            if let Some(v) = cfg.downstream_sentences {
                config.shift.downstream_sentences = v;
            }
            if let Some(v) = cfg.upstream_merges {
                config.upstream_merges = v;
            }
            if let Some(v) = cfg.downstream_merges {
                config.downstream_merges = v;
            }
            if let Some(v) = cfg.dim {
                config.encoder.dim = v;
            }
            if let Some(v) = cfg.pretrain_steps {
                config.pretrain.steps = v;
                config.pretrain.schedule.total_steps = v;
                config.pretrain.schedule.warmup_steps = config.pretrain.schedule.warmup_steps.min(v);
            }
            if let Some(v) = cfg.generator_steps {
                config.generator.steps = v;
                config.generator.schedule.total_steps = v;
                config.generator.schedule.warmup_steps = config.generator.schedule.warmup_steps.min(v);
            }
            if let Some(v) = cfg.probe_steps {
                config.probe.steps = v;
                config.probe.schedule.total_steps = v;
                config.probe.schedule.warmup_steps = config.probe.schedule.warmup_steps.min(v);
            }
            if let Some(seed) = cfg.seed {
                config.shift.seed = seed;
                config.encoder.seed = seed;
                config.pretrain.seed = seed;
                config.generator.seed = seed;
                config.probe.seed = seed;
            }
            let report = run_benchmark(&config, &mut |msg| eprintln!("{msg}"))?;
            fs::create_dir_all(&out_dir)?;
            let files = [
                ("summary.tsv", report.summary_table().to_tsv()),
                ("probes.tsv", probe_table(&report.probes).to_tsv()),
                ("convergence.tsv", convergence_table(&report.convergence).to_tsv()),
                ("att_loss.tsv", loss_curve_text(&report.att_curve)),
                ("patt_loss.tsv", loss_curve_text(&report.patt_curve)),
            ];
            let mut m = RunManifest::new("benchmark");
            m.seed("seed", config.shift.seed);
            for (name, text) in &files {
                let path = out_dir.join(name);
                write_text(&path, text)?;
                m.output(name, &path)?;
            }
            print!("{}", probe_table(&report.probes).to_tsv());
            m.write(&common.run_dir.clone().unwrap_or(out_dir))?;
        }
    }
    Ok(())
}
