use std::path::PathBuf;
use std::process::ExitCode;

use chunkexec_cli::commands::{self, RESULTS_CSV};
use chunkexec_cli::{ExperimentConfig, HarnessError, RunOptions};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "chunkexec",
    version,
    about = "Action-chunk execution experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML experiment config; defaults apply to anything not set.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed, overriding the config file.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "runs/default")]
    out: PathBuf,
    /// Worker threads (0 = all cores).
    #[arg(long, default_value_t = 0)]
    jobs: usize,
    /// Overwrite an existing checkpoint.
    #[arg(long)]
    force: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate scripted demonstrations.
    GenData(Common),
    /// Train the dual-head policy.
    Train(Common),
    /// Success-rate grid over perturbation conditions.
    Eval(Common),
    /// Compare the six ensemblers on the noisy suite.
    BenchEnsemblers(Common),
    /// Time the policy forward pass and the ensemblers.
    BenchLatency(Common),
    /// FK/IK round trips, reach and PWM checks.
    IkCheck(Common),
}

fn run(cli: Cli) -> Result<(), HarnessError> {
    let (Command::GenData(c)
    | Command::Train(c)
    | Command::Eval(c)
    | Command::BenchEnsemblers(c)
    | Command::BenchLatency(c)
    | Command::IkCheck(c)) = &cli.command;
    let mut cfg = match &c.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    let opts = RunOptions {
        out: c.out.clone(),
        jobs: c.jobs,
        force: c.force,
    };

    match cli.command {
        Command::GenData(_) => {
            let m = commands::cmd_gen_data(&cfg, &opts)?;
            println!(
                "{} demonstrations, per task {:?}",
                m.count, m.per_task_counts
            );
        }
        Command::Train(_) => {
            let r = commands::cmd_train(&cfg, &opts)?;
            println!(
                "loss {:.4} -> {:.4} ({:.1}% of initial), optimizer {}",
                r.initial.total,
                r.final_loss.total,
                100.0 * r.final_loss.total / r.initial.total,
                commands::optimizer_name()
            );
        }
        Command::Eval(_) | Command::BenchEnsemblers(_) => {
            let table = if matches!(cli.command, Command::Eval(_)) {
                commands::cmd_eval(&cfg, &opts)?
            } else {
                commands::cmd_bench_ensemblers(&cfg, &opts)?
            };
            print!("{}", table.to_markdown("Results"));
            println!("\nwrote {}", opts.out.join(RESULTS_CSV).display());
        }
        Command::BenchLatency(_) => {
            let r = commands::cmd_bench_latency(&cfg, &opts)?;
            println!(
                "forward median {:.4} ms, p99 {:.4} ms",
                r.forward.median_ms, r.forward.p99_ms
            );
            for m in &r.ensemblers {
                println!(
                    "{:>18} median {:.4} ms, p99 {:.4} ms",
                    m.method, m.timing.median_ms, m.timing.p99_ms
                );
            }
            println!(
                "effective rate {:.1}-{:.1} actions/s (x{:.3})",
                r.min_horizon_actions_per_s, r.max_horizon_actions_per_s, r.span_ratio
            );
        }
        Command::IkCheck(_) => {
            let r = commands::cmd_ik_check(&cfg, &opts)?;
            println!(
                "worst-case round-trip error {:.4} mm over {} targets",
                r.worst_position_error_mm, r.targets
            );
            println!(
                "reach: wrist {:.1} mm, tip {:.1} mm",
                r.wrist_reach_mm, r.tip_reach_mm
            );
            println!("pwm ticks at 0, pi/2, pi: {:?}", r.pwm_ticks);
            println!(
                "probe {:?} mm: {}",
                r.unreachable_probe_mm, r.unreachable_probe
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
