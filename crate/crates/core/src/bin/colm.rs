use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use colm::cli::{self, Opts};
use colm::config::RUN_DIR_ENV;
use colm::problems::ProblemKind;
use colm::solver::format_table;
use colm::{Error, Result};

/// Learn to solve routing, packing and graph problems from expert
/// trajectories.
#[derive(Parser)]
#[command(name = "colm", version)]
struct Args {
    /// Run configuration (TOML).
    #[arg(long, short, global = true, default_value = "colm.toml")]
    config: PathBuf,
    /// Override a config key, e.g. `--set training.max_lr=1e-3`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Override the run directory.
    #[arg(long, global = true, env = RUN_DIR_ENV)]
    run_dir: Option<PathBuf>,
    #[arg(long, global = true, default_value_t = 1)]
    workers: usize,
    /// Overwrite existing outputs.
    #[arg(long, global = true)]
    force: bool,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate train, validation and test instances.
    GenData,
    /// Solve every instance file with the expert.
    SolveExpert,
    /// Build trajectory shards from expert solutions.
    BuildTraj,
    /// Train the configured stage.
    Train {
        /// Continue an interrupted run.
        #[arg(long)]
        resume: bool,
        #[arg(long, short)]
        verbose: bool,
    },
    /// Evaluate a checkpoint on the test split.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Print the tokens of one instance and its expert trajectory.
    TokenizeInspect {
        #[arg(long)]
        kind: ProblemKind,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn run(args: Args) -> Result<()> {
    let mut opts = Opts { workers: args.workers, force: args.force, ..Default::default() };
    if let Cmd::TokenizeInspect { kind, n, seed } = args.cmd {
        print!("{}", cli::cmd_tokenize_inspect(kind, n, seed, colm::experts::EXACT_LIMIT)?);
        return Ok(());
    }
    let mut cfg = cli::load_config(&args.config, &args.sets, args.run_dir)?;
    match args.cmd {
        Cmd::GenData => {
            for p in cli::cmd_gen_data(&cfg, &opts)? {
                println!("{}", p.display());
            }
        }
        Cmd::SolveExpert => {
            for s in cli::cmd_solve_expert(&cfg, &opts)? {
                let gap = s.heuristic_gap.map(|g| format!(" heuristic gap {g:.3}%")).unwrap_or_default();
                println!("{} {}: {} solved, mean objective {:.6}{gap}", s.kind, s.split, s.count, s.mean_objective);
            }
        }
        Cmd::BuildTraj => {
            for m in cli::cmd_build_traj(&cfg, &opts)? {
                let total: usize = m.counts.values().sum();
                println!("{total} records in {} shards {:?}", m.shards.len(), m.counts);
            }
        }
        Cmd::Train { resume, verbose } => {
            opts.resume = resume;
            opts.verbose = verbose;
            println!("{}", cli::cmd_train(&cfg, &opts)?.display());
        }
        Cmd::Eval { checkpoint } => {
            if checkpoint.is_some() {
                cfg.eval.checkpoint = checkpoint;
            }
            print!("{}", format_table(&cli::cmd_eval(&cfg, &opts)?));
        }
        Cmd::TokenizeInspect { .. } => unreachable!(),
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Args::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let e: Error = e;
            eprintln!("error[{}] {}: {}", e.code(), e.name(), e.to_string().replace('\n', " "));
            ExitCode::from(e.code() as u8)
        }
    }
}
