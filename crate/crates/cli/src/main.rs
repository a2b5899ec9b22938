use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use timlab::detkernels::KernelFault;
use timlab::expcli::{
    cmd_analyze, cmd_compare, cmd_run, cmd_selftest, CliError, RunOptions, SelftestOptions, EXIT_CONFIG, EXIT_CONTRACT, EXIT_OK, OUT_ENV,
};

/// Training-inference mismatch simulator.
#[derive(Debug, Parser)]
#[command(name = "timlab", version, about)]
struct Cli {
    /// Worker threads for rollout and log-probability passes.
    #[arg(long, global = true, value_parser = clap::value_parser!(u16).range(1..))]
    threads: Option<u16>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct OutDir {
    /// Output directory.
    #[arg(long, env = OUT_ENV, default_value = "timlab-out")]
    out: PathBuf,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run one experiment.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        out: OutDir,
        #[arg(long)]
        seed: Option<u64>,
        /// Also write the per-trajectory trace.
        #[arg(long)]
        trace: bool,
        /// `key.path=value`, applied in order after the config file.
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Run every cell of a comparison matrix and summarize.
    Compare {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        out: OutDir,
        #[arg(long)]
        trace: bool,
    },
    /// Mismatch diagnostics from a trace file.
    Analyze {
        trace: PathBuf,
        /// Report path; defaults to `analysis.json` next to the trace.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check the kernel and objective contracts.
    Selftest {
        #[arg(long, hide = true)]
        inject: Option<Fault>,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Fault {
    MisTiled,
}

fn fail(e: &CliError) -> i32 {
    eprintln!("error: {e}");
    e.exit_code()
}

fn dispatch(command: Command) -> i32 {
    match command {
        Command::Run { config, out, seed, trace, overrides } => {
            let opts = RunOptions { config, out: out.out, overrides, seed, trace };
            match cmd_run(&opts) {
                Ok(o) => {
                    let m = &o.manifest;
                    if m.diverged {
                        eprintln!("diverged at step {}; outputs in {}", m.steps_completed, opts.out.display());
                    } else {
                        eprintln!("completed {} steps; outputs in {}", m.steps_completed, opts.out.display());
                    }
                    let _ = writeln!(std::io::stdout(), "{}", m.config_hash);
                    o.exit_code()
                }
                Err(e) => fail(&e),
            }
        }
        Command::Compare { config, out, trace } => match cmd_compare(&config, &out.out, trace) {
            Ok(rows) => {
                let failed: Vec<_> = rows.iter().filter(|r| r.status != "ok").collect();
                for r in &failed {
                    eprintln!("cell {} seed {}: {}", r.cell, r.seed, r.status);
                }
                eprintln!("{} cells; summary in {}", rows.len(), out.out.join("summary.csv").display());
                if failed.is_empty() {
                    EXIT_OK
                } else {
                    EXIT_CONFIG
                }
            }
            Err(e) => fail(&e),
        },
        Command::Analyze { trace, out } => {
            let out = out.unwrap_or_else(|| trace.with_file_name("analysis.json"));
            match cmd_analyze(&trace, &out) {
                Ok(r) => {
                    eprintln!(
                        "{} trajectories, {} tokens, mean |delta| {:e}, max |delta| {:e}; report in {}",
                        r.trajectories,
                        r.tokens,
                        r.delta_mean_abs,
                        r.delta_max_abs,
                        out.display()
                    );
                    EXIT_OK
                }
                Err(e) => fail(&e),
            }
        }
        Command::Selftest { inject } => {
            let fault = match inject {
                Some(Fault::MisTiled) => KernelFault::BatchDependentTiling,
                None => KernelFault::None,
            };
            let results = cmd_selftest(&SelftestOptions { fault });
            for r in &results {
                let status = if r.passed { "ok" } else { "FAILED" };
                println!("contract {}: {status} ({} ms) {}", r.name, r.millis, r.detail);
            }
            if results.iter().all(|r| r.passed) {
                EXIT_OK
            } else {
                EXIT_CONTRACT
            }
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    let code = match cli.threads {
        Some(n) => match rayon::ThreadPoolBuilder::new().num_threads(usize::from(n)).build() {
            Ok(pool) => pool.install(|| dispatch(cli.command)),
            Err(e) => {
                eprintln!("error: {e}");
                EXIT_CONFIG
            }
        },
        None => dispatch(cli.command),
    };
    ExitCode::from(code as u8)
}
