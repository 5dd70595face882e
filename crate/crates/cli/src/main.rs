use std::fmt::Write as _;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::{info, warn};

use onset_core::checkpoint::{sha256_hex, Checkpoint, Provenance};
use onset_core::cohortgen::{gen_cohort, read_dataset, write_dataset, Cohort, TARGET_CODES};
use onset_core::config::{CHECKPOINT_FILE, CONFIG_FILE, DATASET_FILE, PRETRAIN_LOG_FILE, VOCAB_FILE};
use onset_core::harness::{aggregate, emit_report, read_results_csv, render_table, sweep, ReportFiles, SweepContext};
use onset_core::heads::TargetCodeSet;
use onset_core::io::write_atomic;
use onset_core::mlm::pretrain;
use onset_core::{Config, Error};

#[derive(Parser)]
#[command(name = "onset", version, about = "Synthetic onset cohorts, MLM pretraining and few-shot head sweeps")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic cohort and its vocabulary.
    GenData(Common),
    /// Pretrain the encoder with masked-code prediction on the training split.
    Pretrain {
        #[command(flatten)]
        common: Common,
        /// Dataset file; defaults to the configured data directory.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Fine-tune every (model, train size, run) cell and write result tables.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Pretrained checkpoint; defaults to the configured pretrain directory.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Parallel cell workers.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        /// Repeated runs per cell (usually 3 or 10).
        #[arg(long)]
        runs: Option<usize>,
    },
    /// Re-aggregate a results directory and print the table.
    Report {
        /// Directory holding results.csv.
        dir: PathBuf,
    },
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config's master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Failure paired with its process exit code.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Config { .. } => 2,
            Error::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => 3,
            _ => 1,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

type CmdResult = std::result::Result<(), Failure>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(common) => gen_data(&common),
        Command::Pretrain { common, data } => run_pretrain(&common, data),
        Command::Sweep {
            common,
            data,
            checkpoint,
            jobs,
            runs,
        } => run_sweep(&common, data, checkpoint, jobs, runs),
        Command::Report { dir } => report(&dir),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn load_config(common: &Common) -> Result<Config, Error> {
    let mut cfg = match &common.config {
        Some(path) => Config::load(path)?,
        None => Config::default(),
    };
    if let Some(seed) = common.seed {
        cfg.set_seed(seed);
    }
    Ok(cfg)
}

fn write_config(dir: &Path, cfg: &Config) -> Result<(), Error> {
    write_atomic(&dir.join(CONFIG_FILE), cfg.to_toml().as_bytes())
}

fn gen_data(common: &Common) -> CmdResult {
    let cfg = load_config(common)?;
    let dir = common.out.clone().unwrap_or_else(|| cfg.paths.data_dir.clone());
    let cohort = gen_cohort(&cfg.gen)?;
    let mut bytes = Vec::new();
    write_dataset(&cohort, &mut bytes)?;
    write_atomic(&dir.join(DATASET_FILE), &bytes)?;
    write_atomic(&dir.join(VOCAB_FILE), cohort.universe.vocab.to_text().as_bytes())?;
    write_config(&dir, &cfg)?;
    let n = cohort.patients.len();
    let cases = cohort.case_count();
    println!("patients  {n}");
    println!("cases     {cases} ({:.2}%)", 100.0 * cases as f64 / n as f64);
    println!(
        "split     train {} / val {} / test {}",
        cohort.split.train.len(),
        cohort.split.val.len(),
        cohort.split.test.len()
    );
    println!("dataset   {} (sha256 {})", dir.join(DATASET_FILE).display(), sha256_hex(&bytes));
    Ok(())
}

fn load_dataset(path: &Path) -> Result<(Cohort, String), Error> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let cohort = read_dataset(BufReader::new(bytes.as_slice()))?;
    Ok((cohort, sha256_hex(&bytes)))
}

fn run_pretrain(common: &Common, data: Option<PathBuf>) -> CmdResult {
    let cfg = load_config(common)?;
    let data = data.unwrap_or_else(|| cfg.paths.data_dir.join(DATASET_FILE));
    let dir = common.out.clone().unwrap_or_else(|| cfg.paths.pretrain_dir.clone());
    let (cohort, corpus_hash) = load_dataset(&data)?;
    check_vocab(&cfg, &cohort)?;
    let provenance = Provenance {
        config_hash: cfg.digest(),
        corpus_hash,
    };
    info!("pretraining on {} training patients", cohort.split.train.len());
    let out = pretrain(&cohort.train(), &cfg.encoder, &cfg.pretrain, &cfg.stream("pretrain"), provenance)?;
    let mut log = String::from("epoch,train_loss,heldout_loss\n");
    for e in &out.log {
        let train = e.train_loss.map_or(String::new(), |l| l.to_string());
        let _ = writeln!(log, "{},{},{}", e.epoch, train, e.heldout_loss);
        println!(
            "epoch {:>3}  train {:>9}  heldout {:.4}",
            e.epoch,
            e.train_loss.map_or("-".to_string(), |l| format!("{l:.4}")),
            e.heldout_loss
        );
    }
    out.checkpoint.save(&dir.join(CHECKPOINT_FILE))?;
    write_atomic(&dir.join(PRETRAIN_LOG_FILE), log.as_bytes())?;
    write_config(&dir, &cfg)?;
    println!("checkpoint {}", dir.join(CHECKPOINT_FILE).display());
    Ok(())
}

fn check_vocab(cfg: &Config, cohort: &Cohort) -> Result<(), Error> {
    let v = cohort.universe.vocab.len();
    if v != cfg.encoder.vocab_size {
        return Err(Error::config(
            "encoder.vocab_size",
            format!("dataset vocabulary has {v} tokens"),
        ));
    }
    if cohort.config.seed != cfg.seed {
        warn!("dataset was generated with seed {}, config seed is {}", cohort.config.seed, cfg.seed);
    }
    Ok(())
}

fn run_sweep(common: &Common, data: Option<PathBuf>, checkpoint: Option<PathBuf>, jobs: usize, runs: Option<usize>) -> CmdResult {
    let mut cfg = load_config(common)?;
    if let Some(r) = runs {
        cfg.grid.runs = r;
    }
    let data = data.unwrap_or_else(|| cfg.paths.data_dir.join(DATASET_FILE));
    let dir = common.out.clone().unwrap_or_else(|| cfg.paths.results_dir.clone());
    let (cohort, _) = load_dataset(&data)?;
    check_vocab(&cfg, &cohort)?;
    cfg.grid.validate(Some(cohort.split.train.len()))?;
    let needs_checkpoint = cfg.grid.models.iter().any(|m| m.needs_checkpoint());
    let checkpoint = if needs_checkpoint {
        let path = checkpoint.unwrap_or_else(|| cfg.paths.pretrain_dir.join(CHECKPOINT_FILE));
        let ckpt = Checkpoint::load(&path)?;
        if ckpt.encoder_config != cfg.encoder {
            return Err(Error::config("encoder", "checkpoint was trained with a different encoder config").into());
        }
        Some(ckpt)
    } else {
        None
    };
    let ctx = SweepContext {
        cohort: &cohort,
        checkpoint: checkpoint.as_ref(),
        targets: TargetCodeSet::new(&cohort.universe.vocab, &TARGET_CODES)?,
        finetune: cfg.finetune.clone(),
        max_len: cfg.encoder.max_seq_len,
        hidden: cfg.encoder.d_model,
        base_seed: cfg.sweep_seed(),
    };
    let cells = cfg.grid.cells();
    info!("running {} cells on {} worker(s)", cells.len(), jobs.max(1));
    let outcome = sweep(&ctx, &cells, jobs)?;
    let files = emit_report(&dir, &outcome.results, &preamble(Some(&cfg)))?;
    write_config(&dir, &cfg)?;
    print!("{}", render_table(&aggregate(&outcome.results)));
    println!("results  {}", files.results.display());
    if outcome.failures.is_empty() {
        return Ok(());
    }
    let mut message = format!("{} of {} cells failed:", outcome.failures.len(), cells.len());
    for f in &outcome.failures {
        let _ = write!(message, "\n  {} n={} run {}: {}", f.model, f.train_size, f.run, f.error);
    }
    Err(Failure { code: 4, message })
}

fn report(dir: &Path) -> CmdResult {
    let files = ReportFiles::in_dir(dir);
    let results = read_results_csv(&files.results).map_err(|e| match e {
        e @ Error::Format { .. } => Failure {
            code: 5,
            message: e.to_string(),
        },
        e => Failure::from(e),
    })?;
    let config = dir.join(CONFIG_FILE);
    let cfg = if config.exists() { Some(Config::load(&config)?) } else { None };
    emit_report(dir, &results, &preamble(cfg.as_ref()))?;
    print!("{}", render_table(&aggregate(&results)));
    Ok(())
}

fn preamble(cfg: Option<&Config>) -> String {
    let mut out = String::new();
    if let Some(cfg) = cfg {
        let _ = writeln!(out, "seed {}  config sha256 {}", cfg.seed, cfg.digest());
    }
    out.push_str("runs resample the few-shot subset and reinitialize the model\n");
    out
}
