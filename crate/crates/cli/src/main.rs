//! `cmlm`: batch driver for vocabulary building, masking inspection,
//! post-training, fine-tuning, evaluation, few-shot experiments, sweeps and
//! gradient audits.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 runtime or data
//! error, 3 gradient audit failure.

mod render;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use clap::{Parser, Subcommand};

use cmlm::audit::{run_audits, AuditScope, AuditShape};
use cmlm::config::RunConfig;
use cmlm::encoder::EncoderParams;
use cmlm::experiment::{load_unlabeled, run_protocol, sweep, Metric, SweepAxis};
use cmlm::masking::make_crm_batch;
use cmlm::par::Execution;
use cmlm::rng::{derive, seeded};
use cmlm::text::{build_vocab, encode, load_jsonl, LabeledExample, TokenSequence, Vocabulary};
use cmlm::training::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use cmlm::training::{fine_tune, post_train, Objective};
use cmlm::Error;

const DEFAULT_SEED: u64 = 42;

// Stream labels under the command seed.
const STREAM_INIT: u64 = 1;
const STREAM_POST: u64 = 2;
const STREAM_HEAD: u64 = 3;
const STREAM_FINE_TUNE: u64 = 4;

#[derive(Debug, Parser)]
#[command(name = "cmlm", version, about = "Contrastive masked language modeling at desk scale")]
struct Cli {
    /// Global seed; overrides the config file's `seed` and CMLM_SEED.
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Builds a whitespace vocabulary from a JSON-lines corpus.
    BuildVocab {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 5000)]
        max_size: usize,
    },
    /// Prints the original sequence and its DRM/CRM views, selected
    /// positions bracketed.
    Mask {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long, default_value_t = 0.15)]
        pm: f64,
        #[arg(long, default_value_t = 0.7)]
        pc: f64,
        #[arg(long, default_value_t = 1)]
        k: usize,
        #[arg(long, default_value_t = 64)]
        max_len: usize,
    },
    /// Post-trains a freshly initialised encoder on unlabeled text.
    PostTrain {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fine-tunes a classifier, optionally from a post-trained checkpoint.
    FineTune {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        dev: PathBuf,
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Scores a fine-tuned checkpoint on a labeled file.
    Evaluate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        test: PathBuf,
        #[arg(long, default_value = "acc")]
        metric: Metric,
    },
    /// Runs the few-shot protocol and writes a JSON report.
    RunExperiment {
        #[arg(long)]
        config: PathBuf,
        /// ft, tapt, cmlm or cssl:<augmenter>; defaults to the config's method.
        #[arg(long)]
        method: Option<Objective>,
        #[arg(long)]
        out: PathBuf,
        /// Worker threads for independent runs; defaults to the config's
        /// `jobs`.
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Runs the protocol once per axis value and writes the rows as JSON.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        axis: SweepAxis,
        #[arg(long, value_delimiter = ',', num_args = 1.., required = true)]
        values: Vec<f64>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Finite-difference audit of the tape gradients.
    GradCheck {
        #[arg(long, default_value = "objectives")]
        scope: AuditScope,
        #[arg(long, default_value_t = 64)]
        precision: u32,
    },
}

/// Failure classes mapped onto exit codes.
#[derive(Debug)]
enum Failure {
    Usage(String),
    Runtime(String),
    Verification(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Runtime(_) => 2,
            Failure::Verification(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Usage(m) | Failure::Runtime(m) | Failure::Verification(m) => m,
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::InvalidArgument(_) | Error::Config(_) | Error::Unsupported(_) => Failure::Usage(e.to_string()),
            _ => Failure::Runtime(e.to_string()),
        }
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

fn env_seed() -> CliResult<Option<u64>> {
    match std::env::var("CMLM_SEED") {
        Ok(s) => s
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Failure::Usage(format!("CMLM_SEED must be an unsigned integer, got {s:?}"))),
        Err(_) => Ok(None),
    }
}

/// Seed for commands without a config file: flag, then CMLM_SEED, then 42.
fn plain_seed(flag: Option<u64>) -> CliResult<u64> {
    Ok(match flag {
        Some(s) => s,
        None => env_seed()?.unwrap_or(DEFAULT_SEED),
    })
}

/// Loads and resolves a config. The seed comes from the flag, else the
/// file's `seed` key, else CMLM_SEED, else 42.
fn load_config(path: &Path, seed_flag: Option<u64>) -> CliResult<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Failure::Runtime(format!("cannot read {}: {e}", path.display())))?;
    let mut cfg = RunConfig::from_json(&text).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
    let has_seed = serde_json::from_str::<serde_json::Value>(&text)
        .ok()
        .and_then(|v| v.as_object().map(|o| o.contains_key("seed")))
        .unwrap_or(false);
    cfg.seed = match (seed_flag, has_seed) {
        (Some(s), _) => s,
        (None, true) => cfg.seed,
        (None, false) => env_seed()?.unwrap_or(DEFAULT_SEED),
    };
    Ok(cfg.resolve()?)
}

/// SOURCE_DATE_EPOCH when set, the current time otherwise; RFC 3339, UTC.
fn timestamp() -> CliResult<String> {
    let t = match std::env::var("SOURCE_DATE_EPOCH") {
        Ok(s) => {
            let secs: u64 = s
                .trim()
                .parse()
                .map_err(|_| Failure::Usage(format!("SOURCE_DATE_EPOCH must be an integer, got {s:?}")))?;
            UNIX_EPOCH + Duration::from_secs(secs)
        }
        Err(_) => SystemTime::now(),
    };
    Ok(humantime::format_rfc3339_seconds(t).to_string())
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Failure::Runtime(e.to_string()))?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Failure::Runtime(format!("cannot write {}: {e}", path.display())))
}

fn encode_texts(texts: &[String], vocab: &Vocabulary, max_len: usize) -> CliResult<Vec<TokenSequence>> {
    texts
        .iter()
        .map(|t| {
            let e = LabeledExample {
                text_a: t.clone(),
                text_b: None,
                label: 0,
            };
            Ok(encode(&e, vocab, max_len)?)
        })
        .collect()
}

fn encode_labeled(examples: &[LabeledExample], vocab: &Vocabulary, max_len: usize) -> CliResult<Vec<(TokenSequence, usize)>> {
    examples
        .iter()
        .map(|e| Ok((encode(e, vocab, max_len)?, e.label)))
        .collect()
}

fn config_value(cfg: &RunConfig) -> CliResult<serde_json::Value> {
    serde_json::to_value(cfg).map_err(|e| Failure::Runtime(e.to_string()))
}

fn build_vocab_cmd(input: &Path, out: &Path, max_size: usize) -> CliResult<()> {
    let corpus = load_unlabeled(input)?;
    let vocab = build_vocab(&corpus, max_size)?;
    vocab.save(out)?;
    println!("{} tokens from {} lines -> {}", vocab.len(), corpus.len(), out.display());
    Ok(())
}

fn mask_cmd(input: &Path, vocab: &Path, pm: f64, pc: f64, k: usize, max_len: usize, seed: u64) -> CliResult<()> {
    for (name, p) in [("--pm", pm), ("--pc", pc)] {
        if !(0.0..=1.0).contains(&p) {
            return Err(Failure::Usage(format!("{name} must lie in [0, 1], got {p}")));
        }
    }
    let vocab = Vocabulary::load(vocab)?;
    let texts = load_unlabeled(input)?;
    let seqs = encode_texts(&texts, &vocab, max_len)?;
    let mut rng = seeded(seed);
    let mut out = std::io::stdout().lock();
    for (i, seq) in seqs.iter().enumerate() {
        let batch = make_crm_batch(seq, k, pm, pc, vocab.len(), &mut rng)?;
        let sep = if i > 0 { "\n" } else { "" };
        let block = format!("{sep}{}", render::aligned_views(seq, &batch, &vocab));
        match out.write_all(block.as_bytes()) {
            Ok(()) => {}
            // A closed reader (`| head`) is not an error.
            Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => return Ok(()),
            Err(e) => return Err(Failure::Runtime(format!("writing to stdout: {e}"))),
        }
    }
    Ok(())
}

fn post_train_cmd(config: &Path, data: &Path, out: &Path, seed_flag: Option<u64>) -> CliResult<()> {
    let cfg = load_config(config, seed_flag)?;
    if cfg.method == Objective::None {
        return Err(Failure::Usage("post-train needs method tapt, cmlm or cssl:<augmenter>, not ft".into()));
    }
    let texts = load_unlabeled(data)?;
    let vocab = build_vocab(&texts, cfg.max_vocab)?;
    let seqs = encode_texts(&texts, &vocab, cfg.max_len)?;
    let mut params = EncoderParams::<f32>::init(&cfg.encoder_config(vocab.len()), &mut derive(cfg.seed, &[STREAM_INIT]))?;
    let mut rng = derive(cfg.seed, &[STREAM_POST]);
    let outcome = post_train(&mut params, &seqs, &cfg.train_config(cfg.seed), &mut rng)?;
    let ckpt = Checkpoint {
        config: config_value(&cfg)?,
        params,
        step: outcome.steps,
        rng: Some(rng),
        vocab: vocab.tokens().to_vec(),
        label_names: Vec::new(),
    };
    save_checkpoint(&ckpt, out)?;
    let first = outcome.trace.first().copied().unwrap_or(f64::NAN);
    let last = outcome.trace.last().copied().unwrap_or(f64::NAN);
    println!(
        "{} post-training: {} steps, loss {first:.4} -> {last:.4}, saved {}",
        cfg.method,
        outcome.steps,
        out.display()
    );
    Ok(())
}

fn fine_tune_cmd(
    config: &Path,
    train: &Path,
    dev: &Path,
    init: Option<&Path>,
    out: &Path,
    seed_flag: Option<u64>,
) -> CliResult<()> {
    let cfg = load_config(config, seed_flag)?;
    let train_set = load_jsonl(train, &[])?;
    let dev_set = load_jsonl(dev, &train_set.label_names)?;
    let (vocab, mut params) = match init {
        Some(p) => {
            let ckpt = load_checkpoint(p)?;
            (Vocabulary::from_tokens(ckpt.vocab)?, ckpt.params)
        }
        None => {
            let vocab = build_vocab(&train_set.texts(), cfg.max_vocab)?;
            let params = EncoderParams::<f32>::init(&cfg.encoder_config(vocab.len()), &mut derive(cfg.seed, &[STREAM_INIT]))?;
            (vocab, params)
        }
    };
    let max_len = params.config().max_len;
    let labels = dev_set.label_names.clone();
    params.set_classifier(labels.len(), &mut derive(cfg.seed, &[STREAM_HEAD]))?;
    let train_data = encode_labeled(&train_set.examples, &vocab, max_len)?;
    let dev_data = encode_labeled(&dev_set.examples, &vocab, max_len)?;
    let outcome = Execution::with_jobs(cfg.jobs, |exec| {
        fine_tune(
            &params,
            &train_data,
            &dev_data,
            &cfg.fine_tune_config(),
            &mut derive(cfg.seed, &[STREAM_FINE_TUNE]),
            exec,
        )
    })?;
    let ckpt = Checkpoint {
        config: config_value(&cfg)?,
        params: outcome.params,
        step: outcome.best.step,
        rng: None,
        vocab: vocab.tokens().to_vec(),
        label_names: labels,
    };
    save_checkpoint(&ckpt, out)?;
    println!(
        "best dev {} {:.4} at step {} of {}, saved {}",
        cfg.metric.name(),
        outcome.best.metric,
        outcome.best.step,
        outcome.trace.len(),
        out.display()
    );
    Ok(())
}

fn evaluate_cmd(ckpt: &Path, test: &Path, metric: Metric) -> CliResult<()> {
    let ckpt = load_checkpoint(ckpt)?;
    if ckpt.params.num_classes().is_none() || ckpt.label_names.is_empty() {
        return Err(Failure::Usage("checkpoint has no classifier head; fine-tune it first".into()));
    }
    let vocab = Vocabulary::from_tokens(ckpt.vocab.clone())?;
    let data = load_jsonl(test, &ckpt.label_names)?;
    if data.label_names.len() > ckpt.label_names.len() {
        return Err(Failure::Runtime(format!(
            "{} has labels unseen in training: {:?}",
            test.display(),
            &data.label_names[ckpt.label_names.len()..]
        )));
    }
    let encoded = encode_labeled(&data.examples, &vocab, ckpt.params.config().max_len)?;
    let ids: Vec<Vec<u32>> = encoded.iter().map(|(s, _)| s.ids().to_vec()).collect();
    let gold: Vec<usize> = encoded.iter().map(|(_, y)| *y).collect();
    let preds = ckpt.params.predict(&ids, Execution::default())?;
    let value = metric.compute(&preds, &gold)?;
    println!("{} {value:.6} (n={})", metric.name(), gold.len());
    Ok(())
}

fn run_experiment_cmd(
    config: &Path,
    method: Option<Objective>,
    out: &Path,
    jobs: Option<usize>,
    seed_flag: Option<u64>,
) -> CliResult<()> {
    let mut cfg = load_config(config, seed_flag)?;
    if let Some(m) = method {
        cfg.method = m;
    }
    if let Some(j) = jobs {
        cfg.jobs = j;
    }
    let report = run_protocol(&cfg, &timestamp()?)?;
    write_json(out, &report)?;
    println!(
        "{} on {}: {} {:.4} ± {:.4} over {} runs",
        report.method,
        report.task,
        cfg.metric.name(),
        report.mean,
        report.std,
        report.records.len()
    );
    if !report.missing_class_subsets.is_empty() {
        println!("subsets missing a class: {:?}", report.missing_class_subsets);
    }
    Ok(())
}

fn sweep_cmd(
    config: &Path,
    axis: SweepAxis,
    values: &[f64],
    out: &Path,
    jobs: Option<usize>,
    seed_flag: Option<u64>,
) -> CliResult<()> {
    let mut cfg = load_config(config, seed_flag)?;
    if let Some(j) = jobs {
        cfg.jobs = j;
    }
    let rows = sweep(&cfg, axis, values, &timestamp()?)?;
    write_json(out, &rows)?;
    println!("{:>16} {:>10} {:>10}", axis.name(), "mean", "std");
    for r in &rows {
        println!("{:>16} {:>10.4} {:>10.4}", r.value, r.mean, r.std);
    }
    Ok(())
}

fn grad_check_cmd(scope: AuditScope, precision: u32, seed: u64) -> CliResult<()> {
    if precision != 64 {
        return Err(Failure::Usage(format!("gradient audits run in 64-bit precision only, got {precision}")));
    }
    let results = run_audits(scope, AuditShape::default(), seed, Execution::default())?;
    let mut worst: Option<&cmlm::audit::AuditResult> = None;
    for r in &results {
        println!(
            "{:<4} {:<32} max rel err {:.3e} (tol {:.0e}, {} elements)",
            if r.passed() { "ok" } else { "FAIL" },
            r.name,
            r.report.max_rel_error,
            r.tolerance,
            r.report.checked
        );
        if worst.is_none_or(|w| r.report.max_rel_error / r.tolerance > w.report.max_rel_error / w.tolerance) {
            worst = Some(r);
        }
    }
    match worst {
        Some(w) if !w.passed() => {
            let detail = match w.report.worst {
                Some((p, i, a, n)) => format!(" at parameter {p} element {i}: analytic {a:e}, numeric {n:e}"),
                None => String::new(),
            };
            Err(Failure::Verification(format!(
                "{} exceeds tolerance: {:.3e}{detail}",
                w.name, w.report.max_rel_error
            )))
        }
        _ => Ok(()),
    }
}

fn run(cli: Cli) -> CliResult<()> {
    let seed = cli.seed;
    match cli.command {
        Command::BuildVocab { input, out, max_size } => build_vocab_cmd(&input, &out, max_size),
        Command::Mask {
            input,
            vocab,
            pm,
            pc,
            k,
            max_len,
        } => mask_cmd(&input, &vocab, pm, pc, k, max_len, plain_seed(seed)?),
        Command::PostTrain { config, data, out } => post_train_cmd(&config, &data, &out, seed),
        Command::FineTune {
            config,
            train,
            dev,
            init,
            out,
        } => fine_tune_cmd(&config, &train, &dev, init.as_deref(), &out, seed),
        Command::Evaluate { ckpt, test, metric } => evaluate_cmd(&ckpt, &test, metric),
        Command::RunExperiment {
            config,
            method,
            out,
            jobs,
        } => run_experiment_cmd(&config, method, &out, jobs, seed),
        Command::Sweep {
            config,
            axis,
            values,
            out,
            jobs,
        } => sweep_cmd(&config, axis, &values, &out, jobs, seed),
        Command::GradCheck { scope, precision } => grad_check_cmd(scope, precision, plain_seed(seed)?),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}
