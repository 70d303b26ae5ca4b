//! `caila`: generate a synthetic attribute-object dataset, train the
//! adapter model on it, and evaluate a checkpoint.
//!
//! Exit codes: 0 on success, 1 on runtime failure, 2 on usage or
//! configuration errors.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "caila", version, about = "Concept-aware adapters for compositional zero-shot learning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum WorldArg {
    Closed,
    Open,
}

#[derive(Clone, Copy, ValueEnum)]
enum StageArg {
    Val,
    Test,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic dataset with its manifest and label space.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 6)]
        attrs: usize,
        #[arg(long, default_value_t = 6)]
        objs: usize,
        #[arg(long, default_value_t = 0.667)]
        seen_frac: f64,
        /// Training images per seen pair.
        #[arg(long, default_value_t = 20)]
        per_pair: usize,
        /// Validation images per pair (seen and unseen).
        #[arg(long, default_value_t = 5)]
        val_per_pair: usize,
        /// Test images per pair (seen and unseen).
        #[arg(long, default_value_t = 10)]
        test_per_pair: usize,
        #[arg(long, default_value_t = 64)]
        image_hw: usize,
        #[arg(long, default_value_t = 0.05)]
        noise: f32,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Pretrain the backbone, train adapters and write the best checkpoint.
    Train {
        #[arg(long)]
        data: Option<PathBuf>,
        /// `key = value` run configuration; every key has a default.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the configured seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Metrics log; defaults to `<out>.metrics.csv`.
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Score a checkpoint and write the report and bias curve.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "closed")]
        world: WorldArg,
        #[arg(long)]
        report: PathBuf,
        /// Curve file; defaults to `<report>.curve.csv`.
        #[arg(long)]
        curve: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "test")]
        split: StageArg,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData {
            out,
            attrs,
            objs,
            seen_frac,
            per_pair,
            val_per_pair,
            test_per_pair,
            image_hw,
            noise,
            seed,
        } => commands::gen_data(&commands::GenArgs {
            out,
            attrs,
            objs,
            seen_frac,
            per_pair,
            val_per_pair,
            test_per_pair,
            image_hw,
            noise,
            seed,
        }),
        Command::Train {
            data,
            config,
            out,
            seed,
            metrics,
        } => commands::train(data, config, &out, seed, metrics),
        Command::Eval {
            ckpt,
            data,
            world,
            report,
            curve,
            split,
        } => {
            let world = match world {
                WorldArg::Closed => caila_core::data::World::Closed,
                WorldArg::Open => caila_core::data::World::Open,
            };
            let stage = match split {
                StageArg::Val => caila_core::data::Stage::Val,
                StageArg::Test => caila_core::data::Stage::Test,
            };
            commands::eval(&ckpt, &data, world, stage, &report, curve)
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(commands::exit_code(&err))
        }
    }
}
