use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use mirnn::checkpoint::Checkpoint;
use mirnn::data::Split;
use mirnn::diagnostics::{
    compare_curves, curve_experiment, emit_report, gradient_norm_experiment, histogram_experiment,
    scaling_sweep, sweep_spreads, variant, Report, ReportMetadata, Variant,
};
use mirnn::experiment::ExperimentConfig;
use mirnn::train::{evaluate_tokens, Corpus, Trainer};
use mirnn::verify::{run_verify, Fault, VerifyOptions};
use mirnn::{Activation, CellFamily, Error, IntegrationMode};

/// Where `diagnose` and `verify` write their reports.
const REPORT_DIR_ENV: &str = "MIRNN_REPORT_DIR";

const EXIT_OTHER: u8 = 1;
const EXIT_CONFIG: u8 = 3;
const EXIT_INGESTION: u8 = 4;
const EXIT_DIVERGENCE: u8 = 5;
const EXIT_VERIFY: u8 = 6;

#[derive(Parser)]
#[command(name = "mirnn", version, about = "Recurrent networks with multiplicative integration")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a character-level language model.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Continue from a checkpoint; the config's epoch budget may be raised.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Report the BPC of a checkpoint on one split.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, value_enum, default_value = "valid")]
        split: EvalSplit,
    },
    /// Run one of the gradient-flow and robustness experiments.
    Diagnose {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum)]
        experiment: Experiment,
    },
    /// Check the analytic code against the brute-force oracles.
    Verify {
        /// Base seed; instance i uses seed + i.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Negate one cell family's gradients to show the check catching it.
        #[arg(long, hide = true)]
        inject_fault: Option<String>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum EvalSplit {
    Valid,
    Test,
}

#[derive(Clone, Copy, ValueEnum)]
enum Experiment {
    Norms,
    Hist,
    Sweep,
    Curves,
}

impl Experiment {
    fn name(self) -> &'static str {
        match self {
            Experiment::Norms => "norms",
            Experiment::Hist => "hist",
            Experiment::Sweep => "sweep",
            Experiment::Curves => "curves",
        }
    }
}

enum Failure {
    Lib(Error),
    Verify(usize),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => EXIT_CONFIG,
        Error::Ingestion { .. } => EXIT_INGESTION,
        Error::Divergence(_) => EXIT_DIVERGENCE,
        _ => EXIT_OTHER,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train { config, resume } => train(&config, resume.as_deref()),
        Command::Eval { ckpt, split } => eval(&ckpt, split),
        Command::Diagnose { config, experiment } => diagnose(&config, experiment),
        Command::Verify { seed, inject_fault } => verify(seed, inject_fault.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Lib(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
        Err(Failure::Verify(n)) => {
            eprintln!("verification failed: {n} failing comparison(s)");
            ExitCode::from(EXIT_VERIFY)
        }
    }
}

fn train(config_path: &Path, resume: Option<&Path>) -> Result<(), Failure> {
    let config = ExperimentConfig::load(config_path)?;
    let mut trainer = match resume {
        None => Trainer::new(config.clone())?,
        Some(ckpt) => {
            let mut t = Trainer::resume(ckpt)?;
            let mut stored = t.config.clone();
            stored.train.epochs = config.train.epochs;
            if stored != config {
                return Err(Error::config(format!(
                    "{} differs from the configuration stored in {} (only train.epochs may change)",
                    config_path.display(),
                    ckpt.display()
                ))
                .into());
            }
            t.config = config.clone();
            t
        }
    };
    if trainer.corpus.unknown > 0 {
        eprintln!(
            "note: {} validation/test characters are outside the training vocabulary",
            trainer.corpus.unknown
        );
    }
    let outcome = trainer.run(Some(&config.output))?;
    for m in &outcome.history {
        let train = m.train_bpc.map_or("-".to_string(), |b| format!("{b:.4}"));
        println!("epoch {:>3}  train {train:>7}  valid {:.4}  lr {:e}", m.epoch, m.valid_bpc, m.lr);
    }
    println!("best valid bpc {:.4}  output {}", outcome.best_val_bpc, config.output.display());
    Ok(())
}

fn eval(ckpt: &Path, split: EvalSplit) -> Result<(), Failure> {
    let ck = Checkpoint::load(ckpt)?;
    let corpus = Corpus::load(&ck.config.data)?;
    if corpus.vocab != ck.vocab {
        return Err(Error::Checkpoint("corpus vocabulary differs from the checkpoint's".into()).into());
    }
    let split = match split {
        EvalSplit::Valid => Split::Valid,
        EvalSplit::Test => Split::Test,
    };
    let report = evaluate_tokens(&ck.model, corpus.tokens(split), ck.config.train.seq_len)?;
    println!("{split} bpc {:.6}  chars {}", report.bpc, report.count);
    Ok(())
}

fn report_dir(config: &ExperimentConfig, experiment: &str) -> PathBuf {
    match std::env::var_os(REPORT_DIR_ENV) {
        Some(dir) => PathBuf::from(dir),
        None => config.output.join("report").join(experiment),
    }
}

/// The model pairs each experiment compares.
fn variants(config: &ExperimentConfig, experiment: Experiment) -> Vec<Variant> {
    use IntegrationMode::*;
    match experiment {
        Experiment::Norms => vec![
            variant(config, "lin-rnn", Additive, Activation::Identity),
            variant(config, "lin-mi-rnn", MiSimple, Activation::Identity),
        ],
        Experiment::Hist | Experiment::Sweep => vec![
            variant(config, "rnn", Additive, Activation::Tanh),
            variant(config, "mi-rnn", MiSimple, Activation::Tanh),
        ],
        Experiment::Curves => vec![
            variant(config, "rnn", Additive, Activation::Tanh),
            variant(config, "mi-rnn-simple", MiSimple, Activation::Tanh),
            variant(config, "mi-rnn-general", MiGeneral, Activation::Tanh),
        ],
    }
}

fn diagnose(config_path: &Path, experiment: Experiment) -> Result<(), Failure> {
    let config = ExperimentConfig::load(config_path)?;
    let corpus = Corpus::load(&config.data)?;
    let vs = variants(&config, experiment);
    let mut report = Report {
        metadata: Some(ReportMetadata {
            version: env!("CARGO_PKG_VERSION").to_string(),
            experiment: experiment.name().to_string(),
            seeds: match experiment {
                Experiment::Sweep | Experiment::Curves => config.diagnostics.seeds.clone(),
                _ => vec![config.train.seed],
            },
            epochs: config.train.epochs,
            seq_len: config.train.seq_len,
            hidden: config.model.hidden,
            lr: config.train.lr,
        }),
        ..Report::default()
    };
    match experiment {
        Experiment::Norms => report.norms = gradient_norm_experiment(&vs, &corpus)?,
        Experiment::Hist => {
            report.histograms = histogram_experiment(&vs, &corpus)?;
            for h in &report.histograms {
                println!("{}  saturation {:.4}", h.model, h.saturation_fraction());
            }
        }
        Experiment::Sweep => {
            report.sweep = scaling_sweep(&vs, &corpus)?;
            report.spreads = sweep_spreads(&report.sweep, &mut report.warnings);
            for s in &report.spreads {
                println!("{}  std {:.4}  spread {:.4}", s.model, s.std, s.spread);
            }
        }
        Experiment::Curves => {
            report.curves = curve_experiment(&vs, &corpus)?;
            for candidate in &vs[1..] {
                let check = compare_curves(&report.curves, &vs[0].tag, &candidate.tag)?;
                println!(
                    "{} vs {}: {:.4} vs {:.4} (pooled se {:.4}) {}",
                    candidate.tag, vs[0].tag, check.candidate_mean, check.baseline_mean, check.pooled_se, check.verdict
                );
                report.comparisons.push((format!("{} vs {}", candidate.tag, vs[0].tag), check));
            }
        }
    }
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    let dir = report_dir(&config, experiment.name());
    emit_report(&report, &dir)?;
    println!("report written to {}", dir.display());
    Ok(())
}

fn verify(seed: u64, fault: Option<&str>) -> Result<(), Failure> {
    let fault = fault
        .map(|name| name.parse::<CellFamily>().map(|family| Fault::FlipBackwardSign { family }))
        .transpose()?;
    let manifest = run_verify(&VerifyOptions { seed, fault })?;
    for c in &manifest.checks {
        let status = if c.passed { "PASS" } else { "FAIL" };
        println!(
            "{status}  {:<13} instances {:>3}  max error {:.3e}  tolerance {:.0e}",
            c.check.as_str(),
            c.instances,
            c.max_error,
            c.tolerance
        );
    }
    for (check, f) in manifest.failures() {
        println!("  {check} seed {}: {} (error {:.3e})", f.seed, f.detail, f.error);
    }
    if let Some(dir) = std::env::var_os(REPORT_DIR_ENV) {
        let dir = PathBuf::from(dir);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let path = dir.join("verify.json");
        std::fs::write(&path, manifest.to_json()).map_err(|e| Error::io(&path, e))?;
    }
    if manifest.passed {
        Ok(())
    } else {
        Err(Failure::Verify(manifest.failures().count()))
    }
}
