//! Command-line front end: preprocess, vocab, train, suggest, rescore, eval,
//! dump-embeddings and dump-gates.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::baselines::{build_adj, build_qvmm, RankerConfig};
use crate::corpus::{
    build_vocabulary, encode_for_training, read_log, read_splits, segment_sessions, split_by_time, write_splits,
    TextSession, Vocabulary,
};
use crate::decoding::{rescore, suggest, BeamConfig};
use crate::error::Error;
use crate::eval::{run_evaluation, write_instances, build_scenario, EvalInputs, Scenario};
use crate::model::{export_embeddings, update_gate_trace, Hyper};
use crate::numerics::Prng;
use crate::training::{checkpoint_load, checkpoint_save, fit, Checkpoint, Precision, TrainConfig};

pub const SEED_ENV: &str = "HRED_SEED";

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Data(e)
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Data(e) => write!(f, "error: {e}"),
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

#[derive(Debug, Parser)]
#[command(name = "hred", about = "Context-aware query suggestion with a hierarchical recurrent encoder-decoder")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone, Default)]
pub struct Common {
    /// key=value settings file; flags take precedence
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Normalize and segment a raw log, then split it by time
    Preprocess {
        #[arg(long)]
        log: Option<PathBuf>,
        /// Three increasing epoch-second cutoffs, comma separated
        #[arg(long)]
        cutoffs: Option<String>,
        /// Output directory for the split session files
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Build the vocabulary from the background split
    Vocab {
        #[arg(long)]
        sessions: Option<PathBuf>,
        #[arg(long = "vocab-size")]
        vocab_size: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Train a model on the background split, early-stopping on validation
    Train {
        #[arg(long)]
        sessions: Option<PathBuf>,
        #[arg(long)]
        vocab: Option<PathBuf>,
        /// Output checkpoint path
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Generate suggestions for a context by beam search
    Suggest {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        vocab: Option<PathBuf>,
        /// Context queries, tab separated, oldest first
        #[arg(long)]
        context: Option<String>,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long = "max-length")]
        max_length: Option<usize>,
        /// Read one context per line from standard input
        #[arg(long)]
        interactive: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Score candidate queries (one per line on standard input) given a context
    Rescore {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        vocab: Option<PathBuf>,
        #[arg(long)]
        context: Option<String>,
        #[command(flatten)]
        common: Common,
    },
    /// Run a ranking scenario and write an MRR report
    Eval {
        #[arg(long)]
        sessions: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        vocab: Option<PathBuf>,
        #[arg(long)]
        scenario: Option<String>,
        #[arg(long = "qvmm-order")]
        qvmm_order: Option<usize>,
        /// Report path; the test instances are written next to it
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Write word embeddings and query vectors of the test split
    DumpEmbeddings {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        vocab: Option<PathBuf>,
        #[arg(long)]
        sessions: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Print session-level update-gate magnitudes for a context
    DumpGates {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        vocab: Option<PathBuf>,
        #[arg(long)]
        context: Option<String>,
        #[command(flatten)]
        common: Common,
    },
}

/// Keys accepted in a config file.
pub const CONFIG_KEYS: &[&str] = &[
    "log",
    "sessions",
    "vocab",
    "checkpoint",
    "out",
    "cutoffs",
    "vocab_size",
    "d_h",
    "d_s",
    "d_e",
    "learning_rate",
    "rmsprop_decay",
    "epsilon",
    "clip_threshold",
    "batch_size",
    "patience",
    "max_epochs",
    "seed",
    "precision",
    "k",
    "max_length",
    "scenario",
    "qvmm_order",
    "ranker_iterations",
    "ranker_learning_rate",
    "ranker_l2",
];

/// Flat `key = value` settings. Blank lines and `#` comments are ignored.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Config {
    values: BTreeMap<String, String>,
}

impl Config {
    pub fn parse(text: &str) -> CliResult<Self> {
        let mut values = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| usage(format!("config line {}: expected key=value", n + 1)))?;
            let k = k.trim();
            if !CONFIG_KEYS.contains(&k) {
                return Err(usage(format!("config line {}: unknown key {k:?}", n + 1)));
            }
            values.insert(k.to_string(), v.trim().to_string());
        }
        Ok(Config { values })
    }

    pub fn load(path: Option<&Path>) -> CliResult<Self> {
        match path {
            None => Ok(Config::default()),
            Some(p) => Config::parse(&fs::read_to_string(p).map_err(|e| Error::io(p, e))?),
        }
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.values.insert(key.to_string(), value.to_string());
    }

    pub fn get<T: std::str::FromStr>(&self, key: &str) -> CliResult<Option<T>> {
        match self.values.get(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|_| usage(format!("config key {key}: cannot parse {v:?}"))),
        }
    }

    pub fn get_or<T: std::str::FromStr>(&self, key: &str, default: T) -> CliResult<T> {
        Ok(self.get(key)?.unwrap_or(default))
    }

    fn path(&self, flag: Option<PathBuf>, key: &str) -> CliResult<PathBuf> {
        flag.or_else(|| self.values.get(key).map(PathBuf::from))
            .ok_or_else(|| usage(format!("--{} is required", key.replace('_', "-"))))
    }

    /// Effective settings as `key = value` lines.
    pub fn echo(&self) -> Vec<(String, String)> {
        self.values.iter().map(|(k, v)| (k.clone(), v.clone())).collect()
    }

    pub fn train_config(&self, seed: u64) -> CliResult<TrainConfig> {
        let d = TrainConfig::default();
        let cfg = TrainConfig {
            learning_rate: self.get_or("learning_rate", d.learning_rate)?,
            rmsprop_decay: self.get_or("rmsprop_decay", d.rmsprop_decay)?,
            epsilon: self.get_or("epsilon", d.epsilon)?,
            clip_threshold: self.get_or("clip_threshold", d.clip_threshold)?,
            batch_size: self.get_or("batch_size", d.batch_size)?,
            patience: self.get_or("patience", d.patience)?,
            max_epochs: self.get_or("max_epochs", d.max_epochs)?,
            seed,
        };
        cfg.validate().map_err(|e| usage(e.to_string()))?;
        Ok(cfg)
    }

    pub fn beam_config(&self) -> CliResult<BeamConfig> {
        let d = BeamConfig::default();
        let cfg = BeamConfig {
            width: self.get_or("k", d.width)?,
            max_length: self.get_or("max_length", d.max_length)?,
            forbid_unknown: true,
        };
        if cfg.width == 0 || cfg.max_length == 0 {
            return Err(usage("k and max_length must be >= 1"));
        }
        Ok(cfg)
    }
}

/// Flag, then the environment, then the config file, then 1234.
pub fn resolve_seed(flag: Option<u64>, env: Option<&str>, config: &Config) -> CliResult<u64> {
    if let Some(s) = flag {
        return Ok(s);
    }
    if let Some(v) = env {
        return v
            .trim()
            .parse()
            .map_err(|_| usage(format!("{SEED_ENV}={v:?} is not an unsigned integer")));
    }
    config.get_or("seed", TrainConfig::default().seed)
}

fn setup(common: &Common) -> CliResult<(Config, u64)> {
    let mut config = Config::load(common.config.as_deref())?;
    let env = std::env::var(SEED_ENV).ok();
    let seed = resolve_seed(common.seed, env.as_deref(), &config)?;
    config.set("seed", seed);
    Ok((config, seed))
}

fn parse_cutoffs(text: &str) -> CliResult<[i64; 3]> {
    let parts: Vec<i64> = text
        .split(',')
        .map(|p| p.trim().parse::<i64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| usage(format!("--cutoffs {text:?}: expected three integers")))?;
    <[i64; 3]>::try_from(parts).map_err(|_| usage("--cutoffs needs exactly three values"))
}

fn split_context(text: &str) -> Vec<String> {
    text.split('\t')
        .map(crate::corpus::normalize_query)
        .filter(|q| !q.is_empty())
        .collect()
}

fn load_model(checkpoint: &Path, vocab: &Path) -> CliResult<(Checkpoint, Vocabulary)> {
    let vocab = Vocabulary::load(vocab)?;
    let ckpt = checkpoint_load(checkpoint, Some(&vocab))?;
    Ok((ckpt, vocab))
}

fn fmt6(x: f64) -> String {
    format!("{x:.6}")
}

fn write_output(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text).map_err(|e| CliError::Data(Error::io(path, e)))
}

fn config_header(config: &Config) -> String {
    let mut s = String::new();
    for (k, v) in config.echo() {
        let _ = writeln!(s, "# {k} = {v}");
    }
    s
}

/// Parses `args` (program name first) and runs the subcommand.
pub fn run<I, T>(args: I, stdin: &mut dyn BufRead, stdout: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli.command, stdin, stdout) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{e}");
            e.exit_code()
        }
    }
}

fn io_err(e: std::io::Error) -> CliError {
    CliError::Data(Error::io("<stdout>", e))
}

pub fn execute(command: Command, stdin: &mut dyn BufRead, stdout: &mut dyn Write) -> CliResult<()> {
    match command {
        Command::Preprocess { log, cutoffs, out, common } => {
            let (config, _) = setup(&common)?;
            let log = config.path(log, "log")?;
            let out = config.path(out, "out")?;
            let cutoffs_text = cutoffs
                .or_else(|| config.values.get("cutoffs").cloned())
                .ok_or_else(|| usage("--cutoffs is required"))?;
            let cutoffs = parse_cutoffs(&cutoffs_text)?;
            let (records, stats) = read_log(&log)?;
            let sessions = segment_sessions(&records);
            let splits = split_by_time(&sessions, cutoffs)?;
            write_splits(&out, &splits)?;
            let mut report = config_header(&config);
            let _ = writeln!(report, "records = {}", records.len());
            let _ = writeln!(report, "malformed_lines = {}", stats.malformed);
            let _ = writeln!(report, "dropped_empty = {}", stats.empty_after_normalization);
            let _ = writeln!(report, "sessions = {}", sessions.len());
            for (name, s) in splits.named() {
                let _ = writeln!(report, "{name}.sessions = {}", s.len());
            }
            write_output(&out.join("preprocess.txt"), &report)?;
            stdout.write_all(report.as_bytes()).map_err(io_err)?;
        }
        Command::Vocab {
            sessions,
            vocab_size,
            out,
            common,
        } => {
            let (config, _) = setup(&common)?;
            let dir = config.path(sessions, "sessions")?;
            let out = config.path(out, "out")?;
            let size = match vocab_size {
                Some(v) => v,
                None => config.get_or("vocab_size", 90_000)?,
            };
            let splits = read_splits(&dir)?;
            let vocab = build_vocabulary(&splits.background, size)?;
            vocab.save(&out)?;
            writeln!(stdout, "vocabulary = {} entries", vocab.len()).map_err(io_err)?;
            writeln!(stdout, "digest = {}", vocab.digest()).map_err(io_err)?;
        }
        Command::Train {
            sessions,
            vocab,
            checkpoint,
            common,
        } => {
            let (config, seed) = setup(&common)?;
            let dir = config.path(sessions, "sessions")?;
            let vocab_path = config.path(vocab, "vocab")?;
            let out = config.path(checkpoint, "checkpoint")?;
            let vocab = Vocabulary::load(&vocab_path)?;
            let splits = read_splits(&dir)?;
            let train = encode_for_training(&splits.background, &vocab);
            let valid = encode_for_training(&splits.validation, &vocab);
            if train.is_empty() || valid.is_empty() {
                return Err(CliError::Data(Error::InvalidArgument(format!(
                    "{}: need at least one multi-query background and validation session",
                    dir.display()
                ))));
            }
            let hyper = Hyper {
                vocab_size: vocab.len(),
                d_h: config.get_or("d_h", 64)?,
                d_s: config.get_or("d_s", 96)?,
                d_e: config.get_or("d_e", 32)?,
            };
            hyper.validate().map_err(|e| usage(e.to_string()))?;
            let tc = config.train_config(seed)?;
            let precision = match config.get_or("precision", "f32".to_string())?.as_str() {
                "f32" => Precision::F32,
                "f64" => Precision::F64,
                p => return Err(usage(format!("precision {p:?}: expected f32 or f64"))),
            };
            let mut ckpt = match fit(&train, &valid, hyper, &tc) {
                Ok(c) => c,
                Err(Error::Diverged { epoch, mut checkpoint }) => {
                    checkpoint.vocab_digest = vocab.digest();
                    checkpoint.precision = precision;
                    checkpoint_save(&checkpoint, &out)?;
                    return Err(CliError::Data(Error::InvalidArgument(format!(
                        "training diverged in epoch {epoch}; last good checkpoint written to {}",
                        out.display()
                    ))));
                }
                Err(e) => return Err(e.into()),
            };
            ckpt.vocab_digest = vocab.digest();
            ckpt.precision = precision;
            checkpoint_save(&ckpt, &out)?;
            writeln!(stdout, "best_epoch = {}", ckpt.history.best_epoch).map_err(io_err)?;
            let best = match ckpt.history.best_epoch {
                0 => ckpt.history.initial,
                e => ckpt.history.epochs[e - 1],
            };
            writeln!(stdout, "validation_log_likelihood = {}", fmt6(best)).map_err(io_err)?;
            writeln!(stdout, "epochs = {}", ckpt.history.epochs.len()).map_err(io_err)?;
        }
        Command::Suggest {
            checkpoint,
            vocab,
            context,
            k,
            max_length,
            interactive,
            common,
        } => {
            let (mut config, _) = setup(&common)?;
            if let Some(k) = k {
                config.set("k", k);
            }
            if let Some(m) = max_length {
                config.set("max_length", m);
            }
            let beam = config.beam_config()?;
            let (ckpt, vocab) = load_model(&config.path(checkpoint, "checkpoint")?, &config.path(vocab, "vocab")?)?;
            let show = |ctx: &[String], out: &mut dyn Write| -> CliResult<()> {
                for s in suggest(&ckpt.params, &vocab, ctx, &beam)? {
                    writeln!(out, "{}\t{}", fmt6(s.log_prob), s.text).map_err(io_err)?;
                }
                Ok(())
            };
            if interactive {
                let mut line = String::new();
                loop {
                    write!(stdout, "> ").map_err(io_err)?;
                    stdout.flush().map_err(io_err)?;
                    line.clear();
                    if stdin.read_line(&mut line).map_err(io_err)? == 0 {
                        break;
                    }
                    let ctx = split_context(line.trim_end_matches(['\n', '\r']));
                    if ctx.is_empty() {
                        continue;
                    }
                    if let Err(e) = show(&ctx, stdout) {
                        eprintln!("{e}");
                    }
                }
            } else {
                let ctx = split_context(&context.ok_or_else(|| usage("--context is required"))?);
                if ctx.is_empty() {
                    return Err(usage("--context has no queries"));
                }
                show(&ctx, stdout)?;
            }
        }
        Command::Rescore {
            checkpoint,
            vocab,
            context,
            common,
        } => {
            let (config, _) = setup(&common)?;
            let (ckpt, vocab) = load_model(&config.path(checkpoint, "checkpoint")?, &config.path(vocab, "vocab")?)?;
            let ctx = split_context(&context.ok_or_else(|| usage("--context is required"))?);
            let ctx: Vec<Vec<usize>> = ctx.iter().map(|q| vocab.encode_query(q)).collect();
            if ctx.is_empty() {
                return Err(usage("--context has no queries"));
            }
            for line in stdin.lines() {
                let line = line.map_err(io_err)?;
                let cand = crate::corpus::normalize_query(&line);
                if cand.is_empty() {
                    continue;
                }
                let lp = rescore(&ckpt.params, &ctx, &vocab.encode_query(&cand))?;
                writeln!(stdout, "{}\t{cand}", fmt6(lp)).map_err(io_err)?;
            }
        }
        Command::Eval {
            sessions,
            checkpoint,
            vocab,
            scenario,
            qvmm_order,
            out,
            common,
        } => {
            let (mut config, seed) = setup(&common)?;
            if let Some(s) = scenario {
                config.set("scenario", s);
            }
            if let Some(q) = qvmm_order {
                config.set("qvmm_order", q);
            }
            let scenario = Scenario::parse(&config.get_or("scenario", "next".to_string())?)
                .map_err(|e| usage(e.to_string()))?;
            let order: usize = config.get_or("qvmm_order", 3)?;
            let dir = config.path(sessions, "sessions")?;
            let splits = read_splits(&dir)?;
            let adj = build_adj(&splits.background);
            let qvmm = build_qvmm(&splits.background, order).map_err(|e| usage(e.to_string()))?;
            let ckpt_path = checkpoint.or_else(|| config.values.get("checkpoint").map(PathBuf::from));
            let model = match ckpt_path {
                Some(c) => {
                    config.set("checkpoint", c.display());
                    let v = config.path(vocab, "vocab")?;
                    Some(load_model(&c, &v)?)
                }
                None => None,
            };
            let ranker = RankerConfig {
                iterations: config.get_or("ranker_iterations", RankerConfig::default().iterations)?,
                learning_rate: config.get_or("ranker_learning_rate", RankerConfig::default().learning_rate)?,
                l2: config.get_or("ranker_l2", RankerConfig::default().l2)?,
                seed,
            };
            let mut echo = config.echo();
            if let Some((ck, v)) = &model {
                echo.push(("model.vocab_digest".into(), v.digest()));
                echo.push(("model.params".into(), ck.params.num_params().to_string()));
            }
            let inputs = EvalInputs {
                scenario,
                train: &splits.training,
                test: &splits.test,
                adj: &adj,
                qvmm: &qvmm,
                model: model.as_ref().map(|(c, v)| (&c.params, v)),
                ranker,
                seed,
                config: echo,
            };
            let summary = run_evaluation(&inputs)?;
            let text = summary.to_text();
            match out {
                Some(path) => {
                    write_output(&path, &text)?;
                    let mut prng = Prng::new(seed);
                    // rebuild with the same stream so the file matches the evaluated instances
                    let _ = build_scenario(scenario, &splits.training, &adj, &mut prng)?;
                    let test = build_scenario(scenario, &splits.test, &adj, &mut prng)?;
                    let mut inst_path = path.into_os_string();
                    inst_path.push(".instances");
                    write_instances(Path::new(&inst_path), &test)?;
                }
                None => stdout.write_all(text.as_bytes()).map_err(io_err)?,
            }
        }
        Command::DumpEmbeddings {
            checkpoint,
            vocab,
            sessions,
            out,
            common,
        } => {
            let (config, _) = setup(&common)?;
            let (ckpt, vocab) = load_model(&config.path(checkpoint, "checkpoint")?, &config.path(vocab, "vocab")?)?;
            let queries: Vec<String> = match sessions.or_else(|| config.values.get("sessions").map(PathBuf::from)) {
                Some(dir) => {
                    let mut qs: Vec<String> = read_splits(&dir)?
                        .test
                        .iter()
                        .flat_map(|s: &TextSession| s.queries.iter().cloned())
                        .collect();
                    qs.sort();
                    qs.dedup();
                    qs
                }
                None => Vec::new(),
            };
            let emb = export_embeddings(&ckpt.params, &vocab, &queries)?;
            let mut text = config_header(&config);
            let row = |kind: &str, name: &str, v: &[f64]| {
                let nums: Vec<String> = v.iter().map(|x| fmt6(*x)).collect();
                format!("{kind}\t{name}\t{}\n", nums.join(" "))
            };
            for (w, v) in &emb.words {
                text.push_str(&row("word", w, v));
            }
            for (q, v) in &emb.queries {
                text.push_str(&row("query", q, v));
            }
            match out {
                Some(p) => write_output(&p, &text)?,
                None => stdout.write_all(text.as_bytes()).map_err(io_err)?,
            }
        }
        Command::DumpGates {
            checkpoint,
            vocab,
            context,
            common,
        } => {
            let (config, _) = setup(&common)?;
            let (ckpt, vocab) = load_model(&config.path(checkpoint, "checkpoint")?, &config.path(vocab, "vocab")?)?;
            let ctx = split_context(&context.ok_or_else(|| usage("--context is required"))?);
            if ctx.is_empty() {
                return Err(usage("--context has no queries"));
            }
            let encoded: Vec<Vec<usize>> = ctx.iter().map(|q| vocab.encode_query(q)).collect();
            let gates = update_gate_trace(&ckpt.params, &encoded)?;
            for (q, g) in ctx.iter().zip(&gates) {
                let mean = g.iter().sum::<f64>() / g.len() as f64;
                let nums: Vec<String> = g.iter().map(|x| fmt6(*x)).collect();
                writeln!(stdout, "{q}\t{}\t{}", fmt6(mean), nums.join(" ")).map_err(io_err)?;
            }
        }
    }
    Ok(())
}
