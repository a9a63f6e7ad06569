//! `bevloc`: synth | build-db | train | query | eval | analyze.
//!
//! Every subcommand takes `--config <path>` plus `--seed`, `--workers` and
//! repeatable `--set key=value` overrides, echoes its resolved
//! configuration to a sidecar in the output directory, and exits nonzero
//! with a one-line `error: ...` message on failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use bevloc::config::RunConfig;
use bevloc::pipeline;

#[derive(Parser)]
#[command(name = "bevloc", version, about = "Retrieval-based LiDAR localization pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Flat `key = value` configuration file; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,

    /// Master seed override.
    #[arg(long)]
    seed: Option<u64>,

    /// Worker threads (0 = number of processors).
    #[arg(long)]
    workers: Option<usize>,

    /// Individual `key=value` overrides, applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic world, trips, sweeps, GPS fixes and metadata.
    Synth(Common),
    /// Build the retrieval database from the train+validation trips.
    BuildDb(Common),
    /// Train the embedding head and write the model and training log.
    Train(Common),
    /// Embed one point-cloud file and print its top-k hits.
    Query {
        #[command(flatten)]
        common: Common,
        /// Path to a `.pitc` point-cloud file.
        cloud: PathBuf,
    },
    /// Evaluate the configured method over the test-trip queries.
    Eval(Common),
    /// Correlations and binned summaries from reports plus metadata.
    Analyze(Common),
}

fn resolve_config(common: &Common) -> bevloc::Result<RunConfig> {
    let mut config = match &common.config {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::default(),
    };
    config.apply_overrides(&common.set)?;
    if let Some(seed) = common.seed {
        config.seed = seed;
    }
    if let Some(workers) = common.workers {
        config.workers = workers;
    }
    if config.workers > 0 {
        // Ignore failure: the global pool can only be set once per process.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(config.workers)
            .build_global();
    }
    Ok(config)
}

fn run() -> bevloc::Result<()> {
    match Cli::parse().command {
        Command::Synth(c) => pipeline::cmd_synth(&resolve_config(&c)?),
        Command::BuildDb(c) => pipeline::cmd_build_db(&resolve_config(&c)?),
        Command::Train(c) => pipeline::cmd_train(&resolve_config(&c)?),
        Command::Eval(c) => pipeline::cmd_eval(&resolve_config(&c)?).map(|_| ()),
        Command::Analyze(c) => pipeline::cmd_analyze(&resolve_config(&c)?),
        Command::Query { common, cloud } => {
            let config = resolve_config(&common)?;
            let hits = pipeline::cmd_query(&config, &cloud)?;
            println!("rank,reading_id,trip_id,x,y,heading,embedding_distance");
            for (rank, h) in hits.iter().enumerate() {
                let p = h.predicted_pose;
                println!(
                    "{},{},{},{},{},{},{}",
                    rank + 1,
                    h.reading_id,
                    p.trip_id,
                    p.x,
                    p.y,
                    p.heading,
                    h.embedding_distance
                );
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
