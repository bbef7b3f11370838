//! `selfprompt`: file-level front end for the toolkit.
//!
//! Every subcommand reads and writes ordinary files (SPV volumes, prompt
//! JSON) and prints a report, as a table by default or as JSON with
//! `--json`. Exit codes: 0 success, 1 a verification check failed,
//! 2 usage or input validation error.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use selfprompt_core::PromptMode;

#[derive(Parser)]
#[command(
    name = "selfprompt",
    version,
    about = "Prompt generation, distance transforms, and adapter numerics \
             for volumetric segmentation"
)]
struct Cli {
    /// Seed for every random choice the toolkit makes.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,

    /// Print reports as JSON instead of tables.
    #[arg(long, global = true)]
    json: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Slice,
    Volume,
}

impl From<ModeArg> for PromptMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Slice => PromptMode::Slice,
            ModeArg::Volume => PromptMode::Volume,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Paint spheres into a label volume and write it as SPV.
    Synth {
        /// Volume extents, comma separated: x,y,z.
        #[arg(long, value_delimiter = ',', default_value = "32,32,32")]
        dims: Vec<usize>,
        /// Voxel spacing in millimetres: x,y,z.
        #[arg(long, value_delimiter = ',', default_value = "1,1,1")]
        spacing: Vec<f64>,
        /// JSON file holding the sphere list.
        #[arg(long)]
        spheres: PathBuf,
        /// Output SPV path.
        #[arg(long)]
        out: PathBuf,
    },

    /// Derive box and point prompts from a label volume.
    Prompts {
        /// Input label volume (SPV).
        input: PathBuf,
        /// Per-slice or whole-volume prompts.
        #[arg(long, value_enum, default_value_t = ModeArg::Slice)]
        mode: ModeArg,
        /// Output JSON path.
        #[arg(long)]
        out: PathBuf,
    },

    /// Squared Euclidean distance transform of one class mask.
    Edt {
        /// Input label volume (SPV).
        input: PathBuf,
        /// Class id whose mask is transformed.
        #[arg(long)]
        class: u8,
        /// Output SPV path for the distance field.
        #[arg(long)]
        out: PathBuf,
        /// Re-run with the quadratic brute-force transform and compare.
        #[arg(long)]
        oracle: bool,
    },

    /// Per-class and mean Dice overlap of two label volumes.
    Dice {
        /// First label volume (SPV).
        a: PathBuf,
        /// Second label volume (SPV).
        b: PathBuf,
    },

    /// Print training schedule tables.
    Schedule {
        #[command(subcommand)]
        kind: ScheduleKind,
    },

    /// Verify adapter gradients against central finite differences.
    Gradcheck {
        /// Depth frames of the test problem.
        #[arg(long, default_value_t = 2)]
        depth: usize,
        /// Tokens per frame.
        #[arg(long, default_value_t = 4)]
        tokens: usize,
        /// Channels per token (multiple of 4).
        #[arg(long, default_value_t = 8)]
        channels: usize,
        /// Corrupt one analytic gradient first (negative control).
        #[arg(long)]
        perturb: bool,
    },

    /// Synthetic end-to-end run: synth, prompts, fuse, verify.
    Demo {
        /// Directory the artifacts are written into.
        #[arg(long, default_value = "selfprompt-demo")]
        out_dir: PathBuf,
    },
}

#[derive(Subcommand)]
enum ScheduleKind {
    /// Polynomial learning-rate decay.
    Lr {
        #[arg(long, default_value_t = 0.01)]
        init_lr: f64,
        #[arg(long, default_value_t = 1000)]
        max_epochs: u32,
        /// Epochs to tabulate, comma separated (default: evenly spaced).
        #[arg(long, value_delimiter = ',')]
        epochs: Option<Vec<u32>>,
    },
    /// Deep-supervision level weights.
    Dsw {
        /// Number of supervised scales.
        #[arg(long, default_value_t = 5)]
        levels: usize,
    },
}

/// `SELFPROMPT_THREADS` caps the rayon pool; unset means rayon's default.
fn init_threads() -> Result<(), String> {
    let raw = match std::env::var("SELFPROMPT_THREADS") {
        Ok(v) => v,
        Err(std::env::VarError::NotPresent) => return Ok(()),
        Err(e) => return Err(format!("SELFPROMPT_THREADS: {e}")),
    };
    let threads: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| format!("SELFPROMPT_THREADS must be a positive integer, got '{raw}'"))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| format!("failed to size the thread pool: {e}"))
}

fn run(cli: Cli) -> anyhow::Result<bool> {
    let seed = cli.seed;
    let json = cli.json;
    match cli.command {
        Command::Synth {
            dims,
            spacing,
            spheres,
            out,
        } => commands::synth(&dims, &spacing, &spheres, &out, seed, json),
        Command::Prompts { input, mode, out } => {
            commands::prompts(&input, mode.into(), &out, json)
        }
        Command::Edt {
            input,
            class,
            out,
            oracle,
        } => commands::edt(&input, class, &out, oracle, json),
        Command::Dice { a, b } => commands::dice(&a, &b, json),
        Command::Schedule { kind } => match kind {
            ScheduleKind::Lr {
                init_lr,
                max_epochs,
                epochs,
            } => commands::schedule_lr(init_lr, max_epochs, epochs.as_deref(), json),
            ScheduleKind::Dsw { levels } => commands::schedule_dsw(levels, json),
        },
        Command::Gradcheck {
            depth,
            tokens,
            channels,
            perturb,
        } => commands::gradcheck(depth, tokens, channels, perturb, seed, json),
        Command::Demo { out_dir } => commands::demo(&out_dir, seed, json),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(err) = init_threads() {
        eprintln!("error: {err}");
        return ExitCode::from(2);
    }
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(2)
        }
    }
}
