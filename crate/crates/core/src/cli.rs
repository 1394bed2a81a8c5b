//! Command-line front end.
//!
//! Every subcommand also accepts `--config FILE`, a `key = value` file whose
//! keys are the subcommand's long flag names. Flags given on the command line
//! override the file.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, CommandFactory, Parser, Subcommand};
use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::ScoreKind;
use crate::corpus::{
    filter_and_pad, load_parallel, read_lines, read_tokenized, split_idiom_dataset, PadMode, SentencePair, Vocabulary,
    DEFAULT_BATCH_SIZE, DEFAULT_MAX_LEN, DEFAULT_VOCAB_CAP, IDIOM_TEST_SIZE,
};
use crate::decoding::{translate_corpus, DEFAULT_MAX_OUT_LEN};
use crate::error::{Error, Result};
use crate::evaluation::{
    bootstrap_significance, buckets_to_csv, buckets_to_svg, length_bucket_report, tokenize_lines, EvalReport, System,
    DEFAULT_BUCKET_WIDTH, DEFAULT_SAMPLES,
};
use crate::model::{ModelConfig, Seq2Seq};
use crate::training::{Checkpoint, Seq2SeqTrainer, SnapshotMirror, TrainConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "anmt", version, about = "Attentive neural machine translation toolkit")]
pub struct Cli {
    /// `key = value` file supplying defaults for the subcommand's flags.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build a vocabulary file from a tokenized corpus.
    #[command(args_override_self = true)]
    BuildVocab(BuildVocabArgs),
    /// Split a parallel corpus into a test set and extra training data.
    #[command(args_override_self = true)]
    SplitIdioms(SplitArgs),
    /// Train a model with early stopping on the development set.
    #[command(args_override_self = true)]
    Train(TrainArgs),
    /// Translate a file line by line with greedy decoding.
    #[command(args_override_self = true)]
    Translate(TranslateArgs),
    /// Score hypotheses with BLEU and TER, optionally against a rival system.
    #[command(args_override_self = true)]
    Evaluate(EvaluateArgs),
    /// BLEU by source sentence length, written as CSV and SVG.
    #[command(args_override_self = true)]
    Analyze(AnalyzeArgs),
}

#[derive(Debug, Args)]
pub struct BuildVocabArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = DEFAULT_VOCAB_CAP)]
    pub cap: usize,
}

#[derive(Debug, Args)]
pub struct SplitArgs {
    #[arg(long)]
    pub src: PathBuf,
    #[arg(long)]
    pub tgt: PathBuf,
    #[arg(long, default_value_t = IDIOM_TEST_SIZE)]
    pub test_n: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub train_src: PathBuf,
    #[arg(long)]
    pub train_tgt: PathBuf,
    #[arg(long)]
    pub dev_src: PathBuf,
    #[arg(long)]
    pub dev_tgt: PathBuf,
    #[arg(long)]
    pub vocab_src: PathBuf,
    #[arg(long)]
    pub vocab_tgt: PathBuf,
    /// Encoder attention score: dot, general or concat.
    #[arg(long)]
    pub score: ScoreKind,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 1e-4)]
    pub lr: f64,
    #[arg(long, default_value_t = DEFAULT_BATCH_SIZE)]
    pub batch: usize,
    #[arg(long, default_value_t = 5.0)]
    pub clip: f64,
    #[arg(long, default_value_t = 5)]
    pub patience: usize,
    #[arg(long, default_value_t = 4)]
    pub layers: usize,
    #[arg(long, default_value_t = 1000)]
    pub units: usize,
    #[arg(long, default_value_t = 0.5)]
    pub dropout: f64,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long, default_value_t = 100)]
    pub max_epochs: usize,
    /// Training pairs longer than this (either side) are dropped.
    #[arg(long, default_value_t = DEFAULT_MAX_LEN)]
    pub max_len: usize,
    /// Start every LSTM bias at zero, including the forget gate.
    #[arg(long)]
    pub strict_zero_bias: bool,
    /// Write the per-epoch log as JSON.
    #[arg(long, value_name = "FILE")]
    pub log: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TranslateArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    /// Maximum number of output tokens per sentence.
    #[arg(long, default_value_t = DEFAULT_MAX_OUT_LEN)]
    pub max_len: usize,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub hyp: PathBuf,
    #[arg(long)]
    pub r#ref: PathBuf,
    /// Second system for paired bootstrap resampling.
    #[arg(long)]
    pub rival: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_SAMPLES)]
    pub bootstrap: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long)]
    pub lowercase: bool,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    #[arg(long)]
    pub hyp: PathBuf,
    #[arg(long)]
    pub r#ref: PathBuf,
    #[arg(long)]
    pub src: PathBuf,
    #[arg(long, default_value_t = DEFAULT_BUCKET_WIDTH)]
    pub bucket_width: usize,
    #[arg(long)]
    pub csv: PathBuf,
    #[arg(long)]
    pub svg: PathBuf,
    #[arg(long)]
    pub lowercase: bool,
}

/// Parses `argv` (including the program name), runs the command and
/// returns the process exit code.
pub fn dispatch<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString>,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let argv = match expand_config(argv) {
        Ok(a) => a,
        Err(msg) => {
            eprintln!("error: {msg}");
            eprintln!("\n{}", Cli::command().render_usage());
            return EXIT_USAGE;
        }
    };
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match run(cli.command) {
        Ok(out) => {
            print!("{out}");
            EXIT_OK
        }
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_RUNTIME
        }
    }
}

/// Removes `--config FILE` from `argv` and splices the file's settings in
/// front of the explicit flags so that the latter win.
fn expand_config(argv: Vec<OsString>) -> std::result::Result<Vec<OsString>, String> {
    let mut config = None;
    let mut rest = Vec::with_capacity(argv.len());
    let mut it = argv.into_iter();
    while let Some(arg) = it.next() {
        match arg.to_str() {
            Some("--config") => {
                config = Some(PathBuf::from(it.next().ok_or("--config needs a file argument")?));
            }
            Some(s) if s.starts_with("--config=") => {
                config = Some(PathBuf::from(&s["--config=".len()..]));
            }
            _ => rest.push(arg),
        }
    }
    let Some(path) = config else { return Ok(rest) };

    let Some(sub_pos) = rest.iter().skip(1).position(|a| !a.to_string_lossy().starts_with('-')) else {
        return Err("--config given without a subcommand".into());
    };
    let sub_pos = sub_pos + 1;
    let sub_name = rest[sub_pos].to_string_lossy().into_owned();
    let root = Cli::command();
    let sub = root
        .find_subcommand(&sub_name)
        .ok_or_else(|| format!("unrecognized subcommand '{sub_name}'"))?;
    let text = fs::read_to_string(&path).map_err(|e| format!("{}: {e}", path.display()))?;
    let mut injected = Vec::new();
    for (k, v) in parse_config(&text).map_err(|e| format!("{}: {e}", path.display()))? {
        let arg = sub
            .get_arguments()
            .find(|a| a.get_long() == Some(k.as_str()) && k != "config" && k != "help")
            .ok_or_else(|| format!("{}: unknown key '{k}' for {sub_name}", path.display()))?;
        if arg.get_action().takes_values() {
            injected.push(OsString::from(format!("--{k}")));
            injected.push(OsString::from(v));
        } else {
            match v.as_str() {
                "true" => injected.push(OsString::from(format!("--{k}"))),
                "false" => {}
                other => {
                    return Err(format!(
                        "{}: key '{k}' expects true or false, got '{other}'",
                        path.display()
                    ))
                }
            }
        }
    }
    let mut out: Vec<OsString> = rest[..=sub_pos].to_vec();
    out.extend(injected);
    out.extend(rest[sub_pos + 1..].iter().cloned());
    Ok(out)
}

/// `key = value` lines; `#` starts a comment. Underscores in keys are read
/// as dashes.
pub fn parse_config(text: &str) -> std::result::Result<Vec<(String, String)>, String> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| format!("line {}: expected 'key = value'", i + 1))?;
        let (k, v) = (k.trim().replace('_', "-"), v.trim());
        if k.is_empty() {
            return Err(format!("line {}: empty key", i + 1));
        }
        out.push((k, v.to_owned()));
    }
    Ok(out)
}

/// Runs one command and returns what should be printed on stdout.
pub fn run(command: Command) -> Result<String> {
    match command {
        Command::BuildVocab(a) => build_vocab(&a),
        Command::SplitIdioms(a) => split_idioms(&a),
        Command::Train(a) => train(&a),
        Command::Translate(a) => translate(&a),
        Command::Evaluate(a) => evaluate(&a),
        Command::Analyze(a) => analyze(&a),
    }
}

fn build_vocab(a: &BuildVocabArgs) -> Result<String> {
    let sentences = read_tokenized(&a.corpus)?;
    let vocab = Vocabulary::build(&sentences, a.cap)?;
    vocab.save(&a.out)?;
    Ok(format!(
        "vocabulary of {} entries written to {}\n",
        vocab.size(),
        a.out.display()
    ))
}

fn split_idioms(a: &SplitArgs) -> Result<String> {
    let src = read_lines(&a.src)?;
    let tgt = read_lines(&a.tgt)?;
    if src.len() != tgt.len() {
        return Err(Error::LineCountMismatch {
            source_lines: src.len(),
            target_lines: tgt.len(),
        });
    }
    let pairs: Vec<(String, String)> = src.into_iter().zip(tgt).collect();
    let (test, extra) = split_idiom_dataset(&pairs, a.test_n, a.seed)?;
    fs::create_dir_all(&a.out_dir).map_err(|e| Error::io(&a.out_dir, e))?;
    for (name, part) in [("test", &test), ("train", &extra)] {
        write_side(&a.out_dir.join(format!("{name}.src")), part.iter().map(|p| &p.0))?;
        write_side(&a.out_dir.join(format!("{name}.tgt")), part.iter().map(|p| &p.1))?;
    }
    Ok(format!(
        "{} test pairs and {} training pairs written to {}\n",
        test.len(),
        extra.len(),
        a.out_dir.display()
    ))
}

fn write_side<'a>(path: &Path, lines: impl Iterator<Item = &'a String>) -> Result<()> {
    let mut text = String::new();
    for l in lines {
        text.push_str(l);
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn encode_file_pairs(src: &Path, tgt: &Path, vs: &Vocabulary, vt: &Vocabulary) -> Result<Vec<SentencePair>> {
    Ok(load_parallel(src, tgt)?
        .iter()
        .map(|(s, t)| SentencePair::encode(s, t, vs, vt))
        .collect())
}

fn train(a: &TrainArgs) -> Result<String> {
    let source_vocab = Vocabulary::load(&a.vocab_src)?;
    let target_vocab = Vocabulary::load(&a.vocab_tgt)?;
    let model_config = ModelConfig {
        layers: a.layers,
        units: a.units,
        embedding_dim: a.units,
        source_vocab_size: source_vocab.size(),
        target_vocab_size: target_vocab.size(),
        score: a.score,
        dropout: a.dropout,
        max_len: a.max_len,
        strict_zero_bias: a.strict_zero_bias,
    };
    model_config.validate()?;
    let train_config = TrainConfig {
        lr: a.lr,
        batch_size: a.batch,
        clip: a.clip,
        patience: a.patience,
        seed: a.seed,
        max_epochs: a.max_epochs,
        ..TrainConfig::default()
    };
    train_config.validate()?;

    let train_raw = encode_file_pairs(&a.train_src, &a.train_tgt, &source_vocab, &target_vocab)?;
    if train_raw.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let dev_raw = encode_file_pairs(&a.dev_src, &a.dev_tgt, &source_vocab, &target_vocab)?;
    let train_pairs = filter_and_pad(&train_raw, a.max_len, PadMode::Training);
    let dev_pairs = filter_and_pad(&dev_raw, a.max_len, PadMode::Training);
    info!(
        "{} of {} training pairs and {} of {} development pairs within {} tokens",
        train_pairs.len(),
        train_raw.len(),
        dev_pairs.len(),
        dev_raw.len(),
        a.max_len
    );
    if train_pairs.is_empty() {
        return Err(Error::EmptyCorpus);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let model = Seq2Seq::new(model_config, &mut rng)?;
    info!("model has {} parameters", model.params().scalar_count());
    let trainer = Seq2SeqTrainer::new(model, &train_pairs, &dev_pairs, train_config)?.with_mirror(SnapshotMirror {
        path: a.out.clone(),
        source_vocab: source_vocab.clone(),
        target_vocab: target_vocab.clone(),
    });
    let (model, log) = trainer.fit()?;
    Checkpoint::new(model, source_vocab, target_vocab)?.save(&a.out)?;
    if let Some(path) = &a.log {
        let json = serde_json::to_string_pretty(&log)
            .map_err(|e| Error::Config(format!("cannot encode training log: {e}")))?;
        fs::write(path, json + "\n").map_err(|e| Error::io(path, e))?;
    }
    Ok(format!(
        "trained {} epochs; best epoch {} with dev NLL {:.4}; model written to {}\n",
        log.epochs.len(),
        log.best_epoch.unwrap_or(0),
        log.best_dev_nll.unwrap_or(f64::NAN),
        a.out.display()
    ))
}

fn translate(a: &TranslateArgs) -> Result<String> {
    let checkpoint = Checkpoint::load(&a.model)?;
    let n = translate_corpus(&a.input, &checkpoint, &a.output, a.max_len)?;
    Ok(format!("translated {n} lines into {}\n", a.output.display()))
}

type Tokenized = Vec<Vec<String>>;

fn read_aligned(hyp: &Path, reference: &Path, lowercase: bool) -> Result<(Tokenized, Tokenized)> {
    let h = read_lines(hyp)?;
    let r = read_lines(reference)?;
    if h.len() != r.len() {
        return Err(Error::Metric(format!(
            "{} has {} lines but {} has {}",
            hyp.display(),
            h.len(),
            reference.display(),
            r.len()
        )));
    }
    Ok((tokenize_lines(&h, lowercase), tokenize_lines(&r, lowercase)))
}

fn evaluate(a: &EvaluateArgs) -> Result<String> {
    let (hyps, refs) = read_aligned(&a.hyp, &a.r#ref, a.lowercase)?;
    let mut report = EvalReport::new(&hyps, &refs)?;
    let mut out = format!("{report}\n");
    if let Some(rival_path) = &a.rival {
        let (rival, _) = read_aligned(rival_path, &a.r#ref, a.lowercase)?;
        let rival_report = EvalReport::new(&rival, &refs)?;
        let boot = bootstrap_significance(&hyps, &rival, &refs, a.bootstrap, a.seed)?;
        report.p_value = Some(boot.p_value);
        let winner = match boot.winner {
            Some(System::A) => "hypothesis",
            Some(System::B) => "rival",
            None => "none",
        };
        let _ = writeln!(out, "rival {rival_report}");
        let _ = writeln!(
            out,
            "winner {winner}, p = {:.4} ({} resamples, seed {})",
            boot.p_value, boot.samples, a.seed
        );
    }
    Ok(out)
}

fn analyze(a: &AnalyzeArgs) -> Result<String> {
    let (hyps, refs) = read_aligned(&a.hyp, &a.r#ref, a.lowercase)?;
    let sources = tokenize_lines(&read_lines(&a.src)?, a.lowercase);
    let buckets = length_bucket_report(&hyps, &refs, &sources, a.bucket_width)?;
    fs::write(&a.csv, buckets_to_csv(&buckets)).map_err(|e| Error::io(&a.csv, e))?;
    fs::write(&a.svg, buckets_to_svg(&buckets, "BLEU by source length")).map_err(|e| Error::io(&a.svg, e))?;
    let mut out = String::new();
    for b in &buckets {
        let _ = writeln!(
            out,
            "{:>3}-{:<3} {:>6} sentences  BLEU {:.2}",
            b.lo, b.hi, b.count, b.bleu
        );
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn args(list: &[&str]) -> Vec<OsString> {
        list.iter().map(OsString::from).collect()
    }

    #[test]
    fn config_parsing() {
        let kv = parse_config("# run\nlr = 0.001\n\nbatch_size=4 # inline\n").unwrap();
        assert_eq!(
            kv,
            [
                ("lr".to_owned(), "0.001".to_owned()),
                ("batch-size".to_owned(), "4".to_owned())
            ]
        );
        assert!(parse_config("oops").is_err());
    }

    #[test]
    fn flags_override_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("run.conf");
        fs::write(&cfg, "hyp = a.txt\nref = b.txt\nseed = 5\nlowercase = true\n").unwrap();
        let argv = expand_config(args(&[
            "anmt",
            "evaluate",
            "--config",
            cfg.to_str().unwrap(),
            "--seed",
            "9",
        ]))
        .unwrap();
        let cli = Cli::try_parse_from(argv).unwrap();
        let Command::Evaluate(e) = cli.command else {
            panic!("wrong command")
        };
        assert_eq!(e.seed, 9);
        assert_eq!(e.hyp, PathBuf::from("a.txt"));
        assert!(e.lowercase);
    }

    #[test]
    fn unknown_config_key_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("run.conf");
        fs::write(&cfg, "learning_rate = 1\n").unwrap();
        let err = expand_config(args(&["anmt", "train", "--config", cfg.to_str().unwrap()])).unwrap_err();
        assert!(err.contains("learning-rate"), "{err}");
    }

    #[test]
    fn missing_flag_is_a_usage_error() {
        let code = dispatch(["anmt", "train", "--train-src", "x"]);
        assert_eq!(code, EXIT_USAGE);
        assert_eq!(dispatch(["anmt", "no-such-command"]), EXIT_USAGE);
        assert_eq!(
            dispatch(["anmt", "evaluate", "--hyp", "/nonexistent/h", "--ref", "/nonexistent/r"]),
            EXIT_RUNTIME
        );
    }
}
