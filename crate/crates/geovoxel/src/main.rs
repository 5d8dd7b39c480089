use clap::{Parser, Subcommand};
use geovoxel::config::RunConfig;
use geovoxel::pipeline::{
    run_pipeline, stage_encode, stage_featurize, stage_report, stage_stats, stage_synth,
    stage_train,
};
use std::path::PathBuf;
use std::process::ExitCode;

/// Geometry-aware 3D view prediction and voxelwise encoding-model benchmark.
#[derive(Parser)]
#[command(name = "geovoxel", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// JSON run configuration; built-in desk-scale defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Overrides the config's master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory for all artifacts.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,

    /// Worker threads; falls back to GEOVOXEL_THREADS, then 1. Outputs are
    /// byte-identical for any value.
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic scenes, renders, and the ROI atlas.
    Synth,
    /// Contrastive pretraining of the voxel encoder on two-view pairs.
    Train,
    /// Export per-layer feature matrices (and ingest external ones).
    Featurize,
    /// Synthesize voxel responses, then PCA + ridge CV + test metrics.
    Encode,
    /// ROI aggregation, best layers, paired tests, difference maps.
    Stats,
    /// Emit report.csv and report.json from the stats artifacts.
    Report,
    /// Full pipeline: synth, train, featurize, encode, stats, report.
    Run,
}

fn resolve_threads(cli: Option<usize>) -> usize {
    cli.or_else(|| {
        std::env::var("GEOVOXEL_THREADS")
            .ok()
            .and_then(|s| s.parse().ok())
    })
    .unwrap_or(1)
    .max(1)
}

fn main() -> ExitCode {
    let cli = Cli::parse();

    let mut cfg = match &cli.config {
        Some(path) => match RunConfig::load(path) {
            Ok(cfg) => cfg,
            Err(e) => {
                eprintln!("error: [config] {e}");
                return ExitCode::FAILURE;
            }
        },
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    let threads = resolve_threads(cli.threads);
    let out = cli.out.as_path();

    let result = match cli.command {
        Command::Synth => stage_synth(&cfg, out, threads),
        Command::Train => stage_train(&cfg, out, threads),
        Command::Featurize => stage_featurize(&cfg, out, threads),
        Command::Encode => stage_encode(&cfg, out, threads),
        Command::Stats => stage_stats(&cfg, out, threads),
        Command::Report => stage_report(&cfg, out, threads),
        Command::Run => run_pipeline(&cfg, out, threads),
    };

    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
