use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use hit_cli::commands::{self, AttributeArgs, Task};
use hit_cli::{CliError, CliResult};
use hit_core::data::attribution::Region;
use hit_core::ModelConfig;

/// Train, run and verify HIT image-restoration models.
#[derive(Parser)]
#[command(name = "hit", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a JSON run config; writes a checkpoint and a CSV trace.
    Train { config: PathBuf },
    /// Restore one image.
    Restore {
        checkpoint: PathBuf,
        input: PathBuf,
        output: PathBuf,
        /// Also write the predicted residual, mapped to 0.5 + R/2.
        #[arg(long, value_name = "PATH")]
        emit_residual: Option<PathBuf>,
    },
    /// PSNR and SSIM over a `degraded/` + `clean/` dataset folder.
    Eval {
        checkpoint: PathBuf,
        dataset: PathBuf,
        #[arg(long, value_enum, default_value = "general")]
        task: Task,
        /// Write the table to this CSV file as well as stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Multiply-accumulate counts, closed form against an instrumented run.
    Flops(FlopsArgs),
    /// Finite-difference check of every differentiable operation.
    Gradcheck {
        /// Seed to check; repeat for several. Defaults to seeds 0 to 19.
        #[arg(long = "seed")]
        seeds: Vec<u64>,
        /// Comma-separated case names to restrict the suite to.
        #[arg(long, value_delimiter = ',')]
        ops: Option<Vec<String>>,
        /// Scale the backward rule of this op by 1.5 (negative control).
        #[arg(long, hide = true)]
        corrupt: Option<String>,
    },
    /// Integrated-gradients attribution of a region of the restored image.
    Attribute {
        checkpoint: PathBuf,
        image: PathBuf,
        /// Heat image (PPM) of per-pixel attribution magnitude.
        output: PathBuf,
        /// Region `y,x,h,w` of the restored image; defaults to all of it.
        #[arg(long, value_parser = commands::parse_region)]
        region: Option<Region>,
        #[arg(long, default_value_t = 128)]
        steps: usize,
        /// Baseline image; defaults to black.
        #[arg(long)]
        baseline: Option<PathBuf>,
        /// Raw attribution values as little-endian f64; defaults to OUTPUT with extension `f64`.
        #[arg(long)]
        raw: Option<PathBuf>,
    },
}

#[derive(Args)]
#[group(required = true, multiple = true)]
struct FlopsArgs {
    #[arg(long, requires_all = ["w", "c"], conflicts_with_all = ["variant", "input_size"])]
    h: Option<usize>,
    #[arg(long, requires_all = ["h", "c"])]
    w: Option<usize>,
    #[arg(long, requires_all = ["h", "w"])]
    c: Option<usize>,
    /// `hit-micro`, `hit-t` or `hit-b`.
    #[arg(long, requires = "input_size")]
    variant: Option<String>,
    #[arg(long, requires = "variant")]
    input_size: Option<usize>,
}

fn flops(a: FlopsArgs) -> CliResult<()> {
    let equal = match (a.h, a.w, a.c, a.variant, a.input_size) {
        (Some(h), Some(w), Some(c), None, None) => {
            if h == 0 || w == 0 || c == 0 {
                return Err(CliError::Argument("sizes must be positive".into()));
            }
            commands::flops_single(h, w, c)?
        }
        (None, None, None, Some(v), Some(s)) => {
            let cfg = ModelConfig::variant(&v).map_err(|e| CliError::Argument(e.to_string()))?;
            if s == 0 {
                return Err(CliError::Argument("input size must be positive".into()));
            }
            commands::flops_model(&cfg, s)?
        }
        _ => return Err(CliError::Argument("give either --h --w --c or --variant --input-size".into())),
    };
    if equal {
        Ok(())
    } else {
        Err(CliError::Verification("instrumented count differs from the closed form".into()))
    }
}

fn configure_threads() -> CliResult<()> {
    let Ok(v) = std::env::var("HIT_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Argument(format!("HIT_THREADS must be a positive integer, got `{v}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Argument(format!("HIT_THREADS: {e}")))
}

fn run(cli: Cli) -> CliResult<()> {
    configure_threads()?;
    match cli.command {
        Command::Train { config } => commands::train_cmd(&config),
        Command::Restore {
            checkpoint,
            input,
            output,
            emit_residual,
        } => commands::restore_cmd(&checkpoint, &input, &output, emit_residual.as_deref()),
        Command::Eval {
            checkpoint,
            dataset,
            task,
            out,
        } => commands::eval_cmd(&checkpoint, &dataset, task, out.as_deref()),
        Command::Flops(a) => flops(a),
        Command::Gradcheck { seeds, ops, corrupt } => commands::gradcheck_cmd(seeds, ops, corrupt),
        Command::Attribute {
            checkpoint,
            image,
            output,
            region,
            steps,
            baseline,
            raw,
        } => commands::attribute_cmd(AttributeArgs {
            checkpoint: &checkpoint,
            image: &image,
            output: &output,
            raw,
            region,
            steps,
            baseline: baseline.as_deref(),
        }),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
