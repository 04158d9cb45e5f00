use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use softdiff::{exit, run, Command, RunOptions, Scenario};

#[derive(Parser)]
#[command(name = "softdiff", version, about = "Differentiable soft-body simulation scenarios")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run the scene forward and write a trajectory CSV
    Simulate(Common),
    /// Compare analytic rollout derivatives with central differences
    Gradcheck(Common),
    /// Fit a material parameter with Levenberg-Marquardt
    Identify(Common),
    /// Closed-loop inverse dynamics toward an end-effector goal
    Control(Common),
    /// Grip force control against the constant-max-actuation heuristic
    Grip(Common),
}

#[derive(Args)]
struct Common {
    /// scenario JSON file
    #[arg(long)]
    config: PathBuf,
    /// simulation steps (simulate), rollout steps (gradcheck, identify) or
    /// iterations (control, grip)
    #[arg(long)]
    steps: Option<usize>,
    /// output directory, overrides `output.dir`
    #[arg(long)]
    out: Option<PathBuf>,
    /// overrides the scenario seed
    #[arg(long)]
    seed: Option<u64>,
    /// print nothing on success
    #[arg(long)]
    quiet: bool,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (command, common) = match cli.command {
        Cmd::Simulate(c) => (Command::Simulate, c),
        Cmd::Gradcheck(c) => (Command::Gradcheck, c),
        Cmd::Identify(c) => (Command::Identify, c),
        Cmd::Control(c) => (Command::Control, c),
        Cmd::Grip(c) => (Command::Grip, c),
    };
    let opts = RunOptions { steps: common.steps, out: common.out, seed: common.seed };
    let result = Scenario::load(&common.config).and_then(|s| run(command, &s, &opts));
    // write errors (a closed pipe) must not turn a result into a panic
    match result {
        Ok(report) => {
            if !common.quiet || !report.passed {
                let mut out = std::io::stdout().lock();
                let status = if report.passed { "PASS" } else { "FAIL" };
                let _ = writeln!(out, "{status}: {}", report.summary);
                for f in &report.files {
                    let _ = writeln!(out, "  wrote {}", f.display());
                }
            }
            ExitCode::from(if report.passed { exit::PASS } else { exit::FAIL } as u8)
        }
        Err(e) => {
            let _ = writeln!(std::io::stderr(), "error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
