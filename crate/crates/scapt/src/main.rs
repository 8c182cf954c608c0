use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use scapt::checkpoint;
use scapt::config::{Overrides, Profile, RunConfig};
use scapt::corpus::{build_pretrain_corpus, AspectLexicon};
use scapt::data::{load_absa_dataset, load_pretrain_corpus, SliceTag};
use scapt::error::{Result, ScaptError};
use scapt::finetune::{aspect_representation, predict};
use scapt::metrics::{evaluate, write_embeddings, EmbeddingRow};
use scapt::model::{check_compatible, init_params, HeadSet};
use scapt::params::ParamSet;
use scapt::pretrain::{joint_pretrain_loss, sentiment_projection, PretrainConfig};
use scapt::tape::Tape;
use scapt::trainer::{
    finetune_loop, init_finetune_params, prepare_finetune_params, pretrain_loop,
};
use scapt::vocab::{format_input, Vocab};

/// Supervised contrastive pre-training for aspect-based sentiment analysis.
///
/// Exit codes: 0 success, 2 usage error, 3 missing input file,
/// 4 incompatible checkpoint or configuration, 5 malformed or degenerate
/// data, 6 output exists (pass --force to overwrite).
#[derive(Parser)]
#[command(name = "scapt", version, about, verbatim_doc_comment)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct CommonOpts {
    /// JSON run configuration; flags below override its values
    #[arg(long)]
    config: Option<PathBuf>,
    /// Model size profile used when no --config is given
    #[arg(long, default_value = "desk")]
    profile: Profile,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Contrastive softmax temperature
    #[arg(long)]
    tau: Option<f64>,
    /// Reconstruction loss weight
    #[arg(long)]
    alpha: Option<f64>,
    /// Masked-prediction loss weight
    #[arg(long)]
    beta: Option<f64>,
}

impl CommonOpts {
    fn resolve(&self) -> Result<RunConfig> {
        let mut config = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::for_profile(self.profile),
        };
        let overrides = Overrides {
            seed: self.seed,
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            tau: self.tau,
            alpha: self.alpha,
            beta: self.beta,
        };
        overrides.apply(&mut config);
        config.validate()?;
        Ok(config)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Retrieve a noisy sentence-level corpus from rated reviews
    CorpusBuild {
        /// JSONL of reviews: {review_id, text, stars, topics}
        #[arg(long)]
        reviews: PathBuf,
        /// ABSA training split supplying the aspect lexicon
        #[arg(long)]
        absa_train: PathBuf,
        /// Comma-separated topic tags to keep
        #[arg(long, value_delimiter = ',')]
        topics: Vec<String>,
        /// Output corpus path (JSONL); a .stats.json sidecar is written too
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Run the joint contrastive pre-training objective
    Pretrain {
        /// Corpus JSONL produced by corpus-build
        #[arg(long)]
        corpus: PathBuf,
        /// Directory for checkpoint, vocab, and loss curves
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long)]
        force: bool,
        #[command(flatten)]
        common: CommonOpts,
    },
    /// Fine-tune an aspect classifier, from a checkpoint or from scratch
    Finetune {
        /// ABSA training split (JSONL)
        #[arg(long)]
        train: PathBuf,
        /// Pre-trained checkpoint; omit to train from scratch
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Vocabulary file (written by pretrain as vocab.txt)
        #[arg(long)]
        vocab: PathBuf,
        /// Output checkpoint path
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
        #[command(flatten)]
        common: CommonOpts,
    },
    /// Evaluate a fine-tuned checkpoint on an ABSA split
    Eval {
        #[arg(long)]
        test: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        /// Restrict to one slice: ese or ise
        #[arg(long)]
        slice: Option<String>,
        #[command(flatten)]
        common: CommonOpts,
    },
    /// Write sentiment representations of an ABSA split to CSV
    ExportEmbeddings {
        #[arg(long)]
        test: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
        #[command(flatten)]
        common: CommonOpts,
    },
    /// Finite-difference check of the joint loss gradient on a toy model
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Maximum tolerated relative error
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
}

fn require_input(path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(ScaptError::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("input file not found: {}", path.display()),
        )))
    }
}

/// Exit code 6 path, checked before any work starts.
fn guard_output(path: &Path, force: bool) -> std::result::Result<(), ExitCode> {
    if path.exists() && !force {
        eprintln!(
            "error: output {} exists; pass --force to overwrite",
            path.display()
        );
        return Err(ExitCode::from(6));
    }
    Ok(())
}

fn write_manifest(dir: &Path, config: &RunConfig, command: &str) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let manifest = serde_json::json!({
        "command": command,
        "config": config.to_json()?,
    });
    std::fs::write(
        dir.join("run_manifest.json"),
        serde_json::to_vec_pretty(&manifest)?,
    )?;
    Ok(())
}

fn load_checkpoint_params(path: &Path, config: &RunConfig) -> Result<ParamSet> {
    let (params, _) = checkpoint::load(path)?;
    check_compatible(&params, &config.encoder)?;
    Ok(params)
}

fn run_corpus_build(
    reviews: &Path,
    absa_train: &Path,
    topics: &[String],
    out: &Path,
) -> Result<()> {
    require_input(reviews)?;
    require_input(absa_train)?;
    let train = load_absa_dataset(absa_train)?;
    let lexicon = AspectLexicon::from_absa_training(&train);
    if lexicon.is_empty() {
        return Err(ScaptError::Data {
            path: absa_train.display().to_string(),
            line: 0,
            msg: "no aspect terms found in training split".into(),
        });
    }
    let stats = build_pretrain_corpus(reviews, &lexicon, topics, out)?;
    println!("{}", serde_json::to_string_pretty(&stats)?);
    Ok(())
}

fn run_pretrain(corpus_path: &Path, out_dir: &Path, config: &RunConfig) -> Result<()> {
    require_input(corpus_path)?;
    write_manifest(out_dir, config, "pretrain")?;
    let corpus = load_pretrain_corpus(corpus_path)?;
    let vocab = Vocab::build(corpus.iter().map(|s| s.tokens.as_slice()), 1);
    vocab.save(&out_dir.join("vocab.txt"))?;
    let outcome = pretrain_loop(config, &vocab, &corpus, out_dir, config.encoder.dropout_rate)?;
    println!(
        "pre-training done: {} steps, checkpoint {}",
        outcome.steps,
        outcome.checkpoint_path.display()
    );
    if let Some(last) = outcome.logs.last() {
        println!(
            "final losses: total {:.4} contrastive {:.4} reconstruction {:.4} masked {:.4}",
            last.total, last.contrastive, last.reconstruction, last.masked_prediction
        );
    }
    Ok(())
}

fn run_finetune(
    train_path: &Path,
    ckpt: Option<&Path>,
    vocab_path: &Path,
    out: &Path,
    config: &RunConfig,
) -> Result<()> {
    require_input(train_path)?;
    require_input(vocab_path)?;
    if let Some(dir) = out.parent() {
        if !dir.as_os_str().is_empty() {
            write_manifest(dir, config, "finetune")?;
        }
    }
    let train = load_absa_dataset(train_path)?;
    let vocab = Vocab::load(vocab_path)?;
    let params = match ckpt {
        Some(path) => {
            require_input(path)?;
            prepare_finetune_params(path, config)?
        }
        None => init_finetune_params(config, &vocab)?,
    };
    let outcome = finetune_loop(config, &vocab, params, &train, config.encoder.dropout_rate)?;
    checkpoint::save(out, &outcome.params, Some(config.to_json()?))?;
    println!(
        "fine-tuning done: {} steps, checkpoint {}",
        outcome.steps,
        out.display()
    );
    Ok(())
}

fn slice_filter(examples: Vec<scapt::data::AspectExample>, slice: Option<&str>) -> Result<Vec<scapt::data::AspectExample>> {
    let Some(slice) = slice else {
        return Ok(examples);
    };
    let want = match slice.to_lowercase().as_str() {
        "ese" => SliceTag::Ese,
        "ise" => SliceTag::Ise,
        other => {
            return Err(ScaptError::Config(format!(
                "unknown slice '{other}', expected ese or ise"
            )))
        }
    };
    Ok(examples
        .into_iter()
        .filter(|ex| ex.slice_tag() == want)
        .collect())
}

fn run_eval(
    test_path: &Path,
    ckpt: &Path,
    vocab_path: &Path,
    slice: Option<&str>,
    config: &RunConfig,
) -> Result<()> {
    require_input(test_path)?;
    require_input(ckpt)?;
    require_input(vocab_path)?;
    let examples = slice_filter(load_absa_dataset(test_path)?, slice)?;
    if examples.is_empty() {
        return Err(ScaptError::Data {
            path: test_path.display().to_string(),
            line: 0,
            msg: "no examples after slicing".into(),
        });
    }
    let vocab = Vocab::load(vocab_path)?;
    let params = load_checkpoint_params(ckpt, config)?;
    let mut tape = Tape::new();
    let binding = params.bind(&mut tape);
    let preds = predict((&mut tape, &binding), &config.encoder, &vocab, &examples, None)?;
    let report = evaluate(&examples, &preds)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn run_export(
    test_path: &Path,
    ckpt: &Path,
    vocab_path: &Path,
    out: &Path,
    config: &RunConfig,
) -> Result<()> {
    require_input(test_path)?;
    require_input(ckpt)?;
    require_input(vocab_path)?;
    let examples = load_absa_dataset(test_path)?;
    let vocab = Vocab::load(vocab_path)?;
    let params = load_checkpoint_params(ckpt, config)?;
    let mut tape = Tape::new();
    let binding = params.bind(&mut tape);
    let w_s = binding.var("w_s")?;
    let mut rows = Vec::with_capacity(examples.len());
    for (i, ex) in examples.iter().enumerate() {
        let ids = format_input(&vocab, &ex.tokens, config.encoder.max_len)?;
        let attn = vec![true; ids.len()];
        let enc = scapt::model::encode(&mut tape, &binding, &config.encoder, &ids, &attn, None, None)?;
        let s_ab = sentiment_projection(&mut tape, enc.sentence_rep, w_s)?;
        // exported vector is [s_ab ; h_a], what the classifier consumes
        let h_a = aspect_representation(&mut tape, enc.hidden, ex.aspect_span)?;
        let mut values = tape.value(s_ab).data.clone();
        values.extend_from_slice(&tape.value(h_a).data);
        rows.push(EmbeddingRow {
            id: i,
            polarity: ex.polarity,
            slice: ex.slice_tag(),
            values,
        });
    }
    let score = write_embeddings(out, &rows)?;
    println!("wrote {} rows to {}", rows.len(), out.display());
    println!("clustering score (intra minus inter dot): {score:.6}");
    Ok(())
}

fn run_gradcheck(seed: u64, tolerance: f64) -> Result<()> {
    use scapt::data::{LabeledSentence, SentimentLabel, Span};
    let enc = scapt::model::EncoderConfig {
        d_model: 8,
        n_layers: 1,
        n_heads: 2,
        d_ff: 16,
        max_len: 16,
        dropout_rate: 0.0,
    };
    let pre = PretrainConfig::default();
    let batch: Vec<LabeledSentence> = (0..4)
        .map(|i| LabeledSentence {
            tokens: vec![
                "the".into(),
                format!("word{i}"),
                "food".into(),
                "today".into(),
            ],
            label: if i % 2 == 0 {
                SentimentLabel::Positive
            } else {
                SentimentLabel::Negative
            },
            aspect_spans: vec![Span { from: 2, to: 3 }],
        })
        .collect();
    let vocab = Vocab::build(batch.iter().map(|s| s.tokens.as_slice()), 1);
    let mut init_rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = init_params(
        &enc,
        vocab.len(),
        HeadSet {
            pretrain: true,
            classifier: false,
        },
        &mut init_rng,
    )?;
    let loss_value = |params: &ParamSet| -> Result<f64> {
        let mut tape = Tape::new();
        let binding = params.bind(&mut tape);
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
        let joint = joint_pretrain_loss(&mut tape, &binding, &enc, &pre, &vocab, &batch, &mut rng, 0.0)?;
        Ok(tape.value(joint.total).data[0])
    };
    let (analytic, base) = {
        let mut tape = Tape::new();
        let binding = params.bind(&mut tape);
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
        let joint = joint_pretrain_loss(&mut tape, &binding, &enc, &pre, &vocab, &batch, &mut rng, 0.0)?;
        let base = tape.value(joint.total).data[0];
        tape.backward(joint.total)?;
        (binding.grads(&tape), base)
    };
    let h = 1e-5;
    let mut worst: (f64, String) = (0.0, String::new());
    let names: Vec<String> = params.names().cloned().collect();
    let mut checked = 0usize;
    for name in &names {
        let len = params.get(name)?.data.len();
        // probe a few entries per tensor; full sweeps live in the test suite
        let stride = (len / 3).max(1);
        for i in (0..len).step_by(stride) {
            let orig = params.get(name)?.data[i];
            params.get_mut(name)?.data[i] = orig + h;
            let up = loss_value(&params)?;
            params.get_mut(name)?.data[i] = orig - h;
            let down = loss_value(&params)?;
            params.get_mut(name)?.data[i] = orig;
            let fd = (up - down) / (2.0 * h);
            let an = analytic[name].data[i];
            // gradients near zero (the key bias cancels under softmax shift
            // invariance) drown in central-difference noise; skip them
            if (fd - an).abs() < 1e-6 {
                checked += 1;
                continue;
            }
            let denom = fd.abs().max(an.abs()).max(1e-8);
            let rel = (fd - an).abs() / denom;
            if rel > worst.0 {
                worst = (rel, format!("{name}[{i}]"));
            }
            checked += 1;
        }
    }
    println!("loss {base:.6}, checked {checked} entries");
    println!("worst relative error {:.3e} at {}", worst.0, worst.1);
    if worst.0 > tolerance {
        return Err(ScaptError::Contract(format!(
            "gradient check failed: {:.3e} > {tolerance:.1e}",
            worst.0
        )));
    }
    println!("gradcheck ok (tolerance {tolerance:.1e})");
    Ok(())
}

fn exit_code_for(err: &ScaptError) -> ExitCode {
    match err {
        ScaptError::Io(e) if e.kind() == std::io::ErrorKind::NotFound => ExitCode::from(3),
        ScaptError::CheckpointMismatch(_) | ScaptError::Config(_) => ExitCode::from(4),
        ScaptError::Data { .. } | ScaptError::DegenerateBatch => ExitCode::from(5),
        _ => ExitCode::from(1),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("SCAPT_LOG", "warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::CorpusBuild {
            reviews,
            absa_train,
            topics,
            out,
            force,
        } => {
            if let Err(code) = guard_output(out, *force) {
                return code;
            }
            run_corpus_build(reviews, absa_train, topics, out)
        }
        Command::Pretrain {
            corpus,
            out_dir,
            force,
            common,
        } => {
            if let Err(code) = guard_output(&out_dir.join("pretrain.ckpt.json"), *force) {
                return code;
            }
            common.resolve().and_then(|c| run_pretrain(corpus, out_dir, &c))
        }
        Command::Finetune {
            train,
            checkpoint,
            vocab,
            out,
            force,
            common,
        } => {
            if let Err(code) = guard_output(out, *force) {
                return code;
            }
            common
                .resolve()
                .and_then(|c| run_finetune(train, checkpoint.as_deref(), vocab, out, &c))
        }
        Command::Eval {
            test,
            checkpoint,
            vocab,
            slice,
            common,
        } => common
            .resolve()
            .and_then(|c| run_eval(test, checkpoint, vocab, slice.as_deref(), &c)),
        Command::ExportEmbeddings {
            test,
            checkpoint,
            vocab,
            out,
            force,
            common,
        } => {
            if let Err(code) = guard_output(out, *force) {
                return code;
            }
            common
                .resolve()
                .and_then(|c| run_export(test, checkpoint, vocab, out, &c))
        }
        Command::Gradcheck { seed, tolerance } => run_gradcheck(*seed, *tolerance),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            exit_code_for(&err)
        }
    }
}
