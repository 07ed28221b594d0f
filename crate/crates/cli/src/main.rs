use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use ossfield_cli::config::RunConfig;
use ossfield_cli::plotdata::{cmd_plotdata, PlotKind};
use ossfield_cli::simulate::cmd_simulate;
use ossfield_cli::suites::{cmd_verify, Suite};
use ossfield_cli::{CliError, Outcome};

#[derive(Parser)]
#[command(name = "ossfield", version, about = "Simulate and verify operator-self-similar stable random fields")]
struct Cli {
    /// Worker threads (default: all cores). Results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Replaces `run.seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// `KEY=VALUE` with a dotted key, e.g. `field.alpha=1.2`; repeatable.
    #[arg(short = 'o', long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory; `output.dir` when absent. Not part of the digest.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl RunArgs {
    fn load(&self) -> Result<(RunConfig, PathBuf), CliError> {
        let mut overrides = self.overrides.clone();
        if let Some(s) = self.seed {
            overrides.push(format!("run.seed={s}"));
        }
        let cfg = RunConfig::load(&self.config, &overrides)?;
        let dir = self.out.clone().unwrap_or_else(|| cfg.output.dir.clone());
        Ok((cfg, dir))
    }
}

#[derive(Subcommand)]
enum Command {
    /// Simulate the configured field and write the sample file.
    Simulate(RunArgs),
    /// Run a verification suite; exit 1 when it fails.
    Verify {
        #[arg(value_enum)]
        suite: Suite,
        #[command(flatten)]
        args: RunArgs,
    },
    /// Turn a sample file or a suite report into a plot-ready table.
    Plotdata {
        #[arg(value_enum)]
        kind: PlotKind,
        input: PathBuf,
        /// Replicate shown by `field_slice`.
        #[arg(long, default_value_t = 0)]
        replicate: usize,
        /// Output directory (default: the input's directory).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<Outcome, CliError> {
    match cli.command {
        Command::Simulate(args) => {
            let (cfg, dir) = args.load()?;
            cmd_simulate(&cfg, &dir)
        }
        Command::Verify { suite, args } => {
            let (cfg, dir) = args.load()?;
            cmd_verify(suite, &cfg, &dir)
        }
        Command::Plotdata {
            kind,
            input,
            replicate,
            out,
        } => {
            let dir = out.unwrap_or_else(|| input.parent().map(PathBuf::from).unwrap_or_default());
            cmd_plotdata(kind, &input, replicate, &dir)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    match run(cli) {
        Ok(outcome) => {
            match &outcome.failing_check {
                None => println!("ok: outputs in {}", outcome.out_dir.display()),
                Some(check) => println!("FAIL: {check}"),
            }
            ExitCode::from(outcome.exit_code() as u8)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
