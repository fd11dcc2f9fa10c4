use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use comm_arena::cli::{analyze_dir, parse_config, run_experiment, run_gradcheck};
use comm_arena::Error;

#[derive(Parser)]
#[command(
    name = "comm-arena",
    about = "Learned inter-agent communication in a predator-prey team game",
    version
)]
struct CommandLine {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
#[allow(clippy::large_enum_variant)]
enum Command {
    /// Train N seeded runs of one configuration and analyze the results.
    Run(RunArgs),
    /// Recompute metrics for an existing results directory.
    Analyze {
        /// Results directory written by a previous `run`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Verify analytic gradients against finite differences for every
    /// network shape in use.
    Gradcheck,
}

#[derive(Args)]
struct RunArgs {
    /// Configuration: no_comm, full_obs, private_comm or public_comm.
    #[arg(long)]
    mode: Option<String>,
    /// Independent training runs; run i uses seed `seed + i`.
    #[arg(long)]
    runs: Option<String>,
    #[arg(long)]
    epochs: Option<String>,
    /// Base seed of the campaign.
    #[arg(long)]
    seed: Option<String>,
    /// Output directory for logs, checkpoints and analysis.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Concurrent runs.
    #[arg(long)]
    jobs: Option<String>,
    /// key=value file applied before the flags.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    gamma: Option<String>,
    #[arg(long)]
    lr: Option<String>,
    #[arg(long)]
    batch_size: Option<String>,
    #[arg(long)]
    episodes_per_epoch: Option<String>,
    #[arg(long)]
    episode_length: Option<String>,
    #[arg(long)]
    eps_start: Option<String>,
    #[arg(long)]
    eps_end: Option<String>,
    #[arg(long)]
    eps_anneal_epochs: Option<String>,
    /// Greedy episodes behind confusion.csv.
    #[arg(long)]
    eval_episodes: Option<String>,
    /// Write a trainer resume file every K epochs (0 = off).
    #[arg(long)]
    resume_every: Option<String>,
    #[arg(long)]
    arena_half_width: Option<String>,
    #[arg(long)]
    dt: Option<String>,
    #[arg(long)]
    velocity_damping: Option<String>,
    #[arg(long)]
    predator_accel: Option<String>,
    #[arg(long)]
    prey_accel: Option<String>,
    #[arg(long)]
    predator_max_speed: Option<String>,
    #[arg(long)]
    prey_max_speed: Option<String>,
}

impl RunArgs {
    fn overrides(&self) -> Vec<(String, String)> {
        let mut pairs = Vec::new();
        let mut push = |key: &str, value: &Option<String>| {
            if let Some(v) = value {
                pairs.push((key.to_string(), v.clone()));
            }
        };
        push("mode", &self.mode);
        push("runs", &self.runs);
        push("epochs", &self.epochs);
        push("seed", &self.seed);
        push(
            "out",
            &self.out.as_ref().map(|p| p.display().to_string()),
        );
        push("jobs", &self.jobs);
        push("gamma", &self.gamma);
        push("lr", &self.lr);
        push("batch_size", &self.batch_size);
        push("episodes_per_epoch", &self.episodes_per_epoch);
        push("episode_length", &self.episode_length);
        push("eps_start", &self.eps_start);
        push("eps_end", &self.eps_end);
        push("eps_anneal_epochs", &self.eps_anneal_epochs);
        push("eval_episodes", &self.eval_episodes);
        push("resume_every", &self.resume_every);
        push("arena_half_width", &self.arena_half_width);
        push("dt", &self.dt);
        push("velocity_damping", &self.velocity_damping);
        push("predator_accel", &self.predator_accel);
        push("prey_accel", &self.prey_accel);
        push("predator_max_speed", &self.predator_max_speed);
        push("prey_max_speed", &self.prey_max_speed);
        pairs
    }
}

fn execute(command: Command) -> comm_arena::Result<()> {
    match command {
        Command::Run(args) => {
            let config = parse_config(args.config.as_deref(), &args.overrides())?;
            run_experiment(&config)?;
            println!("wrote {}", config.out.display());
            Ok(())
        }
        Command::Analyze { out } => {
            analyze_dir(&out)?;
            println!("analyzed {}", out.display());
            Ok(())
        }
        Command::Gradcheck => {
            let start = std::time::Instant::now();
            let mut stdout = std::io::stdout().lock();
            let passed = run_gradcheck(&mut stdout)?;
            println!(
                "gradcheck: {} ({:.2} s)",
                if passed { "PASS" } else { "FAIL" },
                start.elapsed().as_secs_f64()
            );
            if !passed {
                return Err(Error::InvalidCall("gradient check failed".into()));
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = CommandLine::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}
