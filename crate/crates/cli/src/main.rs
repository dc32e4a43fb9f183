//! `phenoaudit`: the pipeline as file-mediated subcommands over one run
//! directory.
//!
//! Exit status is 0 on success, 1 for bad usage or invalid input, 2 for
//! internal failures.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use phenoaudit::audit::SamplingPlan;
use phenoaudit::{Error, Result};

mod audit;
mod data;
mod model;
mod report;
mod run_dir;
mod serve;

use run_dir::RunDir;

#[derive(Debug, Parser)]
#[command(name = "phenoaudit", version, about = "Diabetes phenotype models and coding audits on synthetic EHR cohorts")]
struct Cli {
    /// Worker threads for data-parallel stages (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Only print warnings and errors.
    #[arg(long, short, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct RunArg {
    /// Run directory.
    #[arg(long)]
    run: PathBuf,
}

#[derive(Debug, Args)]
struct ConfiguredRun {
    #[arg(long)]
    run: PathBuf,
    /// TOML configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic cohort into <run>/data and start a new manifest.
    Generate {
        #[arg(long, visible_alias = "out")]
        run: PathBuf,
        /// Cohort TOML; defaults to the 20,000-encounter cohort.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Master seed; overrides the config's seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Split the cohort and encode features.
    Featurize(ConfiguredRun),
    /// Train the network (or, with --multi-facility, the pooled model and one per facility).
    Train {
        #[command(flatten)]
        target: ConfiguredRun,
        #[arg(long)]
        multi_facility: bool,
        /// Facility flagged as the anchor in the per-facility table.
        #[arg(long, requires = "multi_facility")]
        anchor: Option<String>,
    },
    /// Grid search over activation, optimizer, loss and depth.
    Search(ConfiguredRun),
    /// Train the logistic-regression and linear-SVM baselines.
    Baselines(ConfiguredRun),
    /// Test-split metrics and curves for every trained model.
    Evaluate(RunArg),
    /// Discordance audit.
    #[command(subcommand)]
    Audit(AuditCommand),
    /// Run the blinded review service.
    Serve {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the port in the config's bind address.
        #[arg(long)]
        port: Option<u16>,
    },
    /// Verify the manifest and assemble the comparison table and plot data.
    Report(RunArg),
}

#[derive(Debug, Subcommand)]
enum AuditCommand {
    /// Find discordant test cases and assign confidence bins.
    Bin {
        #[arg(long)]
        run: PathBuf,
        #[arg(long, default_value = model::DNN)]
        model: String,
    },
    /// Stratified sample of discordant cases.
    Sample {
        #[arg(long)]
        run: PathBuf,
        #[arg(long, default_value_t = SamplingPlan::default().per_direction)]
        per_direction: usize,
    },
    /// Blinded review packets and the restricted token map.
    Packets(RunArg),
    /// Judge every packet from the planted error ledger.
    Oracle(RunArg),
    /// Per-bin agreement rates from the judgment log.
    Rates(RunArg),
    /// Project the miscoding rate onto all discordant cases.
    Project(RunArg),
    /// Download the judgment log from a running review service.
    Export {
        #[arg(long)]
        run: PathBuf,
        /// Base URL of the service.
        #[arg(long)]
        url: String,
        /// Owner bearer token.
        #[arg(long)]
        owner: String,
    },
}

/// Open the run, do the work, and save the manifest only on success.
fn in_run(root: &Path, work: impl FnOnce(&mut RunDir) -> Result<()>) -> Result<()> {
    let mut run = RunDir::open(root)?;
    work(&mut run)?;
    run.save()
}

fn execute(command: Command) -> Result<()> {
    match command {
        Command::Generate { run, config, seed } => {
            let run = data::generate(&run, config.as_deref(), seed)?;
            run.save()
        }
        Command::Featurize(t) => in_run(&t.run, |r| data::featurize(r, t.config.as_deref())),
        Command::Train {
            target,
            multi_facility,
            anchor,
        } => in_run(&target.run, |r| {
            if multi_facility {
                model::train_multi_facility(r, target.config.as_deref(), anchor.as_deref())
            } else {
                model::train_dnn(r, target.config.as_deref())
            }
        }),
        Command::Search(t) => in_run(&t.run, |r| model::search(r, t.config.as_deref())),
        Command::Baselines(t) => in_run(&t.run, |r| model::baselines(r, t.config.as_deref())),
        Command::Evaluate(t) => in_run(&t.run, |r| model::evaluate(r).map(|_| ())),
        Command::Audit(a) => match a {
            AuditCommand::Bin { run, model } => in_run(&run, |r| audit::bin(r, &model)),
            AuditCommand::Sample { run, per_direction } => in_run(&run, |r| {
                let plan = SamplingPlan {
                    per_bin: 2 * per_direction,
                    per_direction,
                };
                audit::sample(r, plan)
            }),
            AuditCommand::Packets(t) => in_run(&t.run, audit::packets),
            AuditCommand::Oracle(t) => in_run(&t.run, audit::oracle),
            AuditCommand::Rates(t) => in_run(&t.run, |r| audit::rates(r).map(|_| ())),
            AuditCommand::Project(t) => in_run(&t.run, audit::project),
            AuditCommand::Export { run, url, owner } => in_run(&run, |r| audit::export(r, &url, &owner)),
        },
        Command::Serve { config, port } => serve::serve(&config, port),
        Command::Report(t) => in_run(&t.run, |r| {
            for file in report::report(r)? {
                println!("{}", r.path(file).display());
            }
            Ok(())
        }),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_target(false)
        .with_max_level(if cli.quiet {
            tracing::Level::WARN
        } else {
            tracing::Level::INFO
        })
        .init();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: --threads {n}: {e}");
            return ExitCode::from(2);
        }
    }
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let _ = std::io::stdout().flush();
            eprintln!("error: {e}");
            ExitCode::from(if is_user_error(&e) { 1 } else { 2 })
        }
    }
}

/// Library user errors, plus unreadable files named on the command line.
fn is_user_error(e: &Error) -> bool {
    e.is_user_error() || matches!(e, Error::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound)
}
