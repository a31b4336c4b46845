use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use omake_core::corpus::{generate_synthetic, load_jsonl, resolve_images, write_jsonl, Example, SyntheticCorpusConfig};
use omake_core::harness::{
    evaluate, export_embeddings, gradcheck, load_run, prepare, retrieval_eval, train, GradcheckConfig, RunConfig,
    METRICS_FILE,
};
use omake_magen::pipeline::to_jsonl;
use omake_magen::{Agents, AugmentConfig, Backend, HttpBackend, KnowledgeBase, MockBackend};

#[derive(Parser)]
#[command(name = "omake", version, about = "Ontology-guided contrastive pretraining at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train from a run config; writes checkpoint, config and metrics to --out.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
    },
    /// Zero-shot classification, long-tail and retrieval report for a run.
    Eval {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Image-to-text and text-to-image recall@k for a run.
    Retrieve {
        #[arg(long)]
        run: PathBuf,
        #[arg(long, value_delimiter = ',')]
        k: Option<Vec<usize>>,
        #[arg(long, value_enum, default_value_t = Split::Eval)]
        split: Split,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Re-caption poorly aligned pairs with captioning and verification agents.
    Augment {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        kb: PathBuf,
        /// Run directory whose checkpoint scores the pairs.
        #[arg(long)]
        run: PathBuf,
        #[arg(long, default_value_t = omake_magen::DEFAULT_THRESHOLD)]
        threshold: f64,
        /// `mock` or `http:URL`.
        #[arg(long, default_value = "mock")]
        backend: String,
        #[arg(long)]
        records: Option<PathBuf>,
        #[arg(long, default_value_t = 4)]
        max_inflight: usize,
        #[arg(long, default_value_t = 2)]
        retry_budget: usize,
        #[arg(long, default_value_t = 120)]
        timeout_secs: u64,
    },
    /// Build Disease Cards from {"disease","profile"} JSONL with the summary agent.
    KbBuild {
        #[arg(long)]
        profiles: PathBuf,
        #[arg(long)]
        kb: PathBuf,
        #[arg(long, default_value = "mock")]
        backend: String,
        #[arg(long, default_value_t = 2)]
        retry_budget: usize,
        #[arg(long, default_value_t = 120)]
        timeout_secs: u64,
    },
    /// Compare analytic and finite-difference gradients on a toy batch.
    Gradcheck {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long)]
        beta: Option<f64>,
    },
    /// Write {"id","label","visual"} JSONL for a run's samples.
    Export {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = Split::All)]
        split: Split,
    },
    /// Generate a synthetic corpus (corpus.jsonl) and its ontology (ontology.tsv).
    Synth {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        samples_per_leaf: Option<usize>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Split {
    Train,
    Eval,
    All,
}

enum Failure {
    Core(omake_core::Error),
    Magen(omake_magen::Error),
    /// Bad input detected by the CLI itself, or a failed check.
    Invalid(String),
}

impl From<omake_core::Error> for Failure {
    fn from(e: omake_core::Error) -> Self {
        Failure::Core(e)
    }
}

impl From<omake_magen::Error> for Failure {
    fn from(e: omake_magen::Error) -> Self {
        Failure::Magen(e)
    }
}

impl Failure {
    fn exit_code(&self) -> u8 {
        let validation = match self {
            Failure::Core(e) => e.is_validation(),
            Failure::Magen(e) => e.is_validation(),
            Failure::Invalid(_) => true,
        };
        if validation {
            1
        } else {
            2
        }
    }

    fn message(&self) -> String {
        match self {
            Failure::Core(e) => e.to_string(),
            Failure::Magen(e) => e.to_string(),
            Failure::Invalid(m) => m.clone(),
        }
    }
}

type CliResult<T = ()> = Result<T, Failure>;

fn io_err(path: &Path, e: std::io::Error) -> Failure {
    Failure::Core(omake_core::Error::Io { path: path.to_owned(), source: e })
}

fn emit<T: Serialize>(value: &T, out: Option<&Path>) -> CliResult {
    let text = serde_json::to_string_pretty(value).map_err(omake_core::Error::from)? + "\n";
    if let Some(path) = out {
        fs::write(path, &text).map_err(|e| io_err(path, e))?;
    }
    print!("{text}");
    Ok(())
}

fn pick(examples: omake_core::harness::PreparedData, split: Split) -> Vec<Example> {
    match split {
        Split::Train => examples.train,
        Split::Eval => examples.eval,
        Split::All => examples.train.into_iter().chain(examples.eval).collect(),
    }
}

fn backend(spec: &str, timeout_secs: u64) -> CliResult<Box<dyn Backend>> {
    if spec == "mock" {
        Ok(Box::new(MockBackend::new()))
    } else if let Some(url) = spec.strip_prefix("http:") {
        Ok(Box::new(HttpBackend::new(url, Duration::from_secs(timeout_secs))))
    } else {
        Err(Failure::Invalid(format!("unknown backend `{spec}`; use `mock` or `http:URL`")))
    }
}

fn run(cli: Cli) -> CliResult {
    match cli.command {
        Command::Train { config, out, epochs, seed, batch_size, lr } => {
            let mut cfg = match &config {
                Some(p) => RunConfig::load(p)?,
                None => RunConfig::default(),
            };
            cfg.apply_env()?;
            cfg.epochs = epochs.unwrap_or(cfg.epochs);
            cfg.seed = seed.unwrap_or(cfg.seed);
            cfg.batch_size = batch_size.unwrap_or(cfg.batch_size);
            cfg.optimizer.lr = lr.unwrap_or(cfg.optimizer.lr);
            cfg.absolutize_paths()?;
            cfg.validate()?;
            let data = prepare(&cfg)?;
            let (outcome, art) = train(&cfg, &data, &out)?;
            let last = outcome.history.last().map(|r| r.total);
            eprintln!(
                "trained {} steps on {} samples; final loss {}; checkpoint {}",
                outcome.history.len(),
                data.train.len(),
                last.map_or("n/a".into(), |l| format!("{l:.4}")),
                art.checkpoint.display()
            );
        }
        Command::Eval { run, out } => {
            let (cfg, model) = load_run(&run)?;
            let data = prepare(&cfg)?;
            let mut report = evaluate(
                &model,
                &data.eval,
                &data.classes,
                data.tree.as_ref(),
                &cfg.prompt_template,
                cfg.tail_threshold,
                &cfg.retrieval_ks,
            )?;
            report.loss_curve = Some(METRICS_FILE.to_owned());
            emit(&report, out.as_deref())?;
        }
        Command::Retrieve { run, k, split, out } => {
            let (cfg, model) = load_run(&run)?;
            let ks = k.unwrap_or_else(|| cfg.retrieval_ks.clone());
            let examples = pick(prepare(&cfg)?, split);
            emit(&retrieval_eval(&model, &examples, &ks)?, out.as_deref())?;
        }
        Command::Augment { input, out, kb, run, threshold, backend: spec, records, max_inflight, retry_budget, timeout_secs } => {
            if !(threshold.is_finite()) {
                return Err(Failure::Invalid(format!("threshold {threshold} is not finite")));
            }
            let (_, model) = load_run(&run)?;
            let samples = load_jsonl(&input)?;
            let examples = resolve_images(samples, input.parent())?;
            let kb = KnowledgeBase::open(&kb)?;
            let pool = kb.names()?;
            let agent = backend(&spec, timeout_secs)?;
            let agents = Agents { captioner: agent.as_ref(), verifier: agent.as_ref() };
            let cfg = AugmentConfig { threshold, max_inflight, retry_budget };
            let result = omake_magen::augment(&examples, &pool, &kb, &model, &agents, &cfg)?;
            write_jsonl(&out, &result.samples)?;
            if let Some(path) = records {
                fs::write(&path, to_jsonl(&result.records)?).map_err(|e| io_err(&path, e))?;
            }
            let failed = result.records.iter().filter(|r| r.failed.is_some()).count();
            eprintln!(
                "{} pairs: {} routed, {} verified, {} initial retained, {} failed",
                result.records.len(),
                result.records.iter().filter(|r| r.routed).count(),
                result.count(omake_magen::Provenance::Verified),
                result.count(omake_magen::Provenance::InitialRetained),
                failed
            );
        }
        Command::KbBuild { profiles, kb, backend: spec, retry_budget, timeout_secs } => {
            #[derive(serde::Deserialize)]
            #[serde(deny_unknown_fields)]
            struct Profile {
                disease: String,
                profile: String,
            }
            let text = fs::read_to_string(&profiles).map_err(|e| io_err(&profiles, e))?;
            let kb = KnowledgeBase::open(&kb)?;
            let agent = backend(&spec, timeout_secs)?;
            let (mut stored, mut skipped) = (0, 0);
            for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
                let p: Profile = serde_json::from_str(line)
                    .map_err(|e| Failure::Core(omake_core::Error::Schema { line: i + 1, reason: e.to_string() }))?;
                match omake_magen::summarize(&p.disease, &p.profile, agent.as_ref(), retry_budget) {
                    Ok(card) => {
                        kb.store(&card)?;
                        stored += 1;
                    }
                    Err(e) => {
                        eprintln!("skipping `{}`: {e}", p.disease);
                        skipped += 1;
                    }
                }
            }
            eprintln!("stored {stored} cards, skipped {skipped}");
        }
        Command::Gradcheck { config, seed, lambda, beta } => {
            let mut cfg = match &config {
                Some(p) => {
                    let text = fs::read_to_string(p).map_err(|e| io_err(p, e))?;
                    serde_json::from_str::<GradcheckConfig>(&text).map_err(|e| Failure::Invalid(e.to_string()))?
                }
                None => GradcheckConfig::default(),
            };
            cfg.seed = seed.unwrap_or(cfg.seed);
            cfg.loss.lambda = lambda.unwrap_or(cfg.loss.lambda);
            cfg.loss.beta = beta.unwrap_or(cfg.loss.beta);
            let report = gradcheck(&cfg)?;
            emit(&report, None)?;
            if !report.passed {
                return Err(Failure::Invalid(format!(
                    "gradient check failed: max relative error {:e} at {}[{}]",
                    report.max_rel_error, report.worst_parameter, report.worst_index
                )));
            }
        }
        Command::Export { run, out, split } => {
            let (cfg, model) = load_run(&run)?;
            let examples = pick(prepare(&cfg)?, split);
            export_embeddings(&model, &examples, &out)?;
        }
        Command::Synth { config, out_dir, seed, samples_per_leaf } => {
            let mut cfg = match &config {
                Some(p) => {
                    let text = fs::read_to_string(p).map_err(|e| io_err(p, e))?;
                    serde_json::from_str::<SyntheticCorpusConfig>(&text).map_err(|e| Failure::Invalid(e.to_string()))?
                }
                None => SyntheticCorpusConfig::default(),
            };
            if let Ok(raw) = std::env::var(omake_core::harness::SEED_ENV) {
                cfg.seed = raw.trim().parse().map_err(|_| Failure::Invalid(format!("OMAKE_SEED=`{raw}` is not an unsigned integer")))?;
            }
            cfg.seed = seed.unwrap_or(cfg.seed);
            cfg.samples_per_leaf = samples_per_leaf.unwrap_or(cfg.samples_per_leaf);
            let corpus = generate_synthetic(&cfg)?;
            fs::create_dir_all(&out_dir).map_err(|e| io_err(&out_dir, e))?;
            write_jsonl(&out_dir.join("corpus.jsonl"), &corpus.samples)?;
            let tsv = out_dir.join("ontology.tsv");
            fs::write(&tsv, corpus.tree.to_tsv()).map_err(|e| io_err(&tsv, e))?;
            eprintln!("{} samples over {} leaves in {}", corpus.samples.len(), corpus.prototypes.len(), out_dir.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.exit_code())
        }
    }
}
