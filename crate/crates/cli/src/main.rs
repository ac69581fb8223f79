//! Command-line front end.
//!
//! Every subcommand reads a flat `key = value` config file; `--set key=value`
//! overrides single keys and `--output-dir` (or `STATEFUZZ_OUTPUT_DIR`)
//! overrides the output directory. Exit codes: 2 for configuration errors,
//! 3 for ingestion, i/o and checkpoint errors, 1 for anything else.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use statefuzz::harness::report::{summary_table, write_campaign, write_perturbations};
use statefuzz::harness::retrain::{retrain_table, write_retrain};
use statefuzz::harness::{
    run_campaign, run_retrain, run_train_job, CampaignConfig, KeyValues, RetrainJob, TrainJob,
    OUTPUT_DIR_ENV,
};
use statefuzz::Error;

#[derive(Parser)]
#[command(name = "statefuzz", version, about = "Coverage-guided adversarial testing of recurrent networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a char-LM or sequence classifier and save a checkpoint.
    Train(Common),
    /// Run one objective over a test set.
    TestCampaign(Common),
    /// Run several objectives over the same inputs and tabulate them.
    Compare(Common),
    /// Retrain with and without adversarial inputs and compare perplexity.
    Retrain(Common),
    /// Run a campaign and also write every generated perturbation vector.
    ExportPerturbations(Common),
}

#[derive(Args)]
struct Common {
    /// Config file of `key = value` lines.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Override one config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory, overriding the config.
    #[arg(long, env = OUTPUT_DIR_ENV)]
    output_dir: Option<PathBuf>,
}

impl Common {
    fn key_values(&self) -> statefuzz::Result<KeyValues> {
        let mut kv = match &self.config {
            Some(path) => KeyValues::load(path)?,
            None => KeyValues::default(),
        };
        for o in &self.overrides {
            kv.set(o)?;
        }
        if let Some(dir) = &self.output_dir {
            kv.insert("output_dir", dir.display());
        }
        Ok(kv)
    }
}

fn campaign(common: &Common, single: bool, export: bool) -> statefuzz::Result<()> {
    let cfg = CampaignConfig::from_kv(common.key_values()?)?;
    if single && cfg.methodologies.len() != 1 {
        return Err(Error::Config(
            "test-campaign runs one objective; use compare for several".into(),
        ));
    }
    let out = run_campaign(&cfg)?;
    write_campaign(&cfg.output_dir, &out)?;
    let resolved = cfg.output_dir.join("campaign.conf");
    std::fs::write(&resolved, cfg.to_kv().render())
        .map_err(|e| Error::Io { path: resolved, source: e })?;
    if export {
        write_perturbations(&cfg.output_dir, &out.perturbations)?;
        eprintln!("{} perturbations written", out.perturbations.len());
    }
    print!("{}", summary_table(&out.report));
    eprintln!("reports in {}", cfg.output_dir.display());
    Ok(())
}

fn run(cli: Cli) -> statefuzz::Result<()> {
    match cli.command {
        Command::Train(c) => {
            let job = TrainJob::from_kv(c.key_values()?)?;
            let summary = run_train_job(&job)?;
            for h in &summary.history {
                println!(
                    "epoch {:>3}  lr {:.4}  train {:.4}  valid {:.4}",
                    h.epoch + 1, h.learning_rate, h.train_perplexity, h.valid_perplexity
                );
            }
            if let Some(p) = summary.test_perplexity {
                println!("test perplexity {p:.4}");
            }
            if let Some(a) = summary.test_accuracy {
                println!("test accuracy {a:.4}");
            }
            eprintln!("checkpoint written to {}", summary.checkpoint.display());
            Ok(())
        }
        Command::TestCampaign(c) => campaign(&c, true, false),
        Command::Compare(c) => campaign(&c, false, false),
        Command::ExportPerturbations(c) => campaign(&c, false, true),
        Command::Retrain(c) => {
            let job = RetrainJob::from_kv(c.key_values()?)?;
            let report = run_retrain(&job)?;
            write_retrain(&job.output_dir, &report)?;
            print!("{}", retrain_table(&report));
            Ok(())
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::MetricMismatch { .. } => 2,
        Error::Ingestion { .. } | Error::Io { .. } | Error::Checkpoint(_) => 3,
        _ => 1,
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
