use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::error;

use beastpipe::envs::{env_factory, make_env, EnvServer};
use beastpipe::numerics::checkpoint;
use beastpipe::numerics::RmsPropConfig;
use beastpipe::pipeline::{
    default_num_buffers, evaluate, run_mono, run_poly, PipelineConfig, PipelineError, RunSummary,
};
use beastpipe::vtrace::VtraceConfig;
use beastpipe::Params;

const EXIT_FAILURE: u8 = 1;
const EXIT_USAGE: u8 = 2;
const EXIT_CONNECT: u8 = 3;

#[derive(Parser)]
#[command(name = "beastpipe", version, about = "Actor-learner RL training with V-trace")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Serve an environment over TCP, one copy per connection.
    ServeEnv(ServeArgs),
    /// Train against remote environment servers.
    Train(PolyArgs),
    /// Train in a single process with local environments.
    TrainMono(MonoArgs),
    /// Evaluate a checkpoint greedily.
    Test(TestArgs),
}

#[derive(Args)]
#[command(rename_all = "snake_case")]
struct ServeArgs {
    #[arg(long, default_value = "grid5")]
    env: String,
    #[arg(long, default_value = "127.0.0.1:4431")]
    address: String,
    #[arg(long, default_value_t = 8)]
    max_connections: usize,
}

#[derive(Args)]
#[command(rename_all = "snake_case")]
struct TrainArgs {
    #[arg(long, default_value_t = 4)]
    num_actors: usize,
    #[arg(long, default_value_t = 8)]
    batch_size: usize,
    #[arg(long, default_value_t = 20)]
    unroll_length: usize,
    /// Environment frames to train for.
    #[arg(long, default_value_t = 500_000)]
    total_steps: u64,
    #[arg(long, default_value_t = 0.005)]
    learning_rate: f64,
    /// RMSProp smoothing constant.
    #[arg(long, default_value_t = 0.99)]
    alpha: f64,
    /// RMSProp epsilon.
    #[arg(long, default_value_t = 0.01)]
    epsilon: f64,
    #[arg(long, default_value_t = 40.0)]
    grad_norm_clipping: f64,
    #[arg(long, default_value_t = 0.99)]
    discounting: f64,
    #[arg(long, default_value_t = 0.01)]
    entropy_cost: f64,
    #[arg(long, default_value_t = 0.5)]
    baseline_cost: f64,
    #[arg(long, default_value_t = 1.0)]
    rho_bar: f64,
    #[arg(long, default_value_t = 1.0)]
    c_bar: f64,
    #[arg(long, default_value_t = 128)]
    hidden: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, env = "BEASTPIPE_LOGDIR", default_value = "logs")]
    logdir: PathBuf,
    /// Learner steps between checkpoints; 0 writes only the final one.
    #[arg(long, default_value_t = 0)]
    checkpoint_every: u64,
}

#[derive(Args)]
#[command(rename_all = "snake_case")]
struct PolyArgs {
    /// Comma-separated HOST:PORT list; actors are assigned round-robin.
    #[arg(long, default_value = "127.0.0.1:4431", value_delimiter = ',')]
    server_addresses: Vec<String>,
    /// Connection attempts per actor before giving up.
    #[arg(long, default_value_t = 20)]
    connect_retries: u32,
    #[command(flatten)]
    train: TrainArgs,
}

#[derive(Args)]
#[command(rename_all = "snake_case")]
struct MonoArgs {
    #[arg(long, default_value = "grid5")]
    env: String,
    /// Rollout slots; defaults to max(2·batch_size, num_actors + 1).
    #[arg(long)]
    num_buffers: Option<usize>,
    #[arg(long, default_value_t = 1)]
    num_learner_threads: usize,
    #[command(flatten)]
    train: TrainArgs,
}

#[derive(Args)]
#[command(rename_all = "snake_case")]
struct TestArgs {
    /// Defaults to `<logdir>/model.tbst`.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, env = "BEASTPIPE_LOGDIR", default_value = "logs")]
    logdir: PathBuf,
    #[arg(long, default_value = "grid5")]
    env: String,
    #[arg(long, default_value_t = 100)]
    episodes: usize,
}

impl TrainArgs {
    fn config(&self) -> PipelineConfig {
        PipelineConfig {
            unroll_length: self.unroll_length,
            batch_size: self.batch_size,
            num_actors: self.num_actors,
            total_steps: self.total_steps,
            hidden: self.hidden,
            vtrace: VtraceConfig {
                discount: self.discounting,
                rho_bar: self.rho_bar,
                c_bar: self.c_bar,
                pg_cost: 1.0,
                baseline_cost: self.baseline_cost,
                entropy_cost: self.entropy_cost,
            },
            optim: RmsPropConfig {
                learning_rate: self.learning_rate,
                decay: self.alpha,
                epsilon: self.epsilon,
            },
            grad_clip: self.grad_norm_clipping,
            seed: self.seed,
            logdir: Some(self.logdir.clone()),
            checkpoint_every: self.checkpoint_every,
            ..Default::default()
        }
    }
}

fn usage(msg: impl std::fmt::Display) -> ExitCode {
    eprintln!("error: {msg}");
    ExitCode::from(EXIT_USAGE)
}

fn report(result: Result<RunSummary, PipelineError>) -> ExitCode {
    match result {
        Ok(s) => {
            let ret = s.mean_episode_return().map_or("n/a".to_string(), |r| format!("{r:.4}"));
            println!(
                "done: steps {} frames {} mean_episode_return {ret} fps {:.0} elapsed {:.1}s",
                s.steps,
                s.frames,
                s.fps,
                s.elapsed.as_secs_f64()
            );
            ExitCode::SUCCESS
        }
        Err(e @ PipelineError::Config(_)) => usage(e),
        Err(e @ PipelineError::Connect { .. }) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_CONNECT)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_FAILURE)
        }
    }
}

fn serve(args: ServeArgs) -> ExitCode {
    let factory = match env_factory(&args.env) {
        Ok(f) => f,
        Err(e) => return usage(e),
    };
    let server = match EnvServer::bind(&args.address, factory, args.max_connections) {
        Ok(s) => s,
        Err(e) => return usage(format!("cannot bind {}: {e}", args.address)),
    };
    match server.local_addr() {
        Ok(addr) => println!("serving {} on {addr}", args.env),
        Err(e) => return usage(e),
    }
    server.run();
    ExitCode::SUCCESS
}

fn train_mono(args: MonoArgs) -> ExitCode {
    let mut cfg = args.train.config();
    cfg.env = args.env;
    cfg.num_buffers = args
        .num_buffers
        .unwrap_or_else(|| default_num_buffers(cfg.batch_size, cfg.num_actors));
    cfg.num_learner_threads = args.num_learner_threads;
    if let Err(e) = make_env(&cfg.env) {
        return usage(e);
    }
    report(run_mono(&cfg))
}

fn test(args: TestArgs) -> ExitCode {
    if args.episodes == 0 {
        return usage("--episodes must be ≥ 1");
    }
    let env = match make_env(&args.env) {
        Ok(e) => e,
        Err(e) => return usage(e),
    };
    let path = args.checkpoint.unwrap_or_else(|| args.logdir.join("model.tbst"));
    let params: Params = match checkpoint::load(&path) {
        Ok(p) => p,
        Err(e) => return usage(format!("{}: {e}", path.display())),
    };
    match evaluate(&params, env, args.episodes) {
        Ok(s) => {
            println!(
                "episodes {} mean_return {:.4} min_return {:.4} max_return {:.4} mean_length {:.2}",
                s.episodes, s.mean_return, s.min_return, s.max_return, s.mean_length
            );
            ExitCode::SUCCESS
        }
        Err(e @ PipelineError::SpecMismatch(_)) => usage(e),
        Err(e) => {
            error!("{e}");
            ExitCode::from(EXIT_FAILURE)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::ServeEnv(a) => serve(a),
        Command::Train(a) => {
            let mut cfg = a.train.config();
            cfg.server_addresses = a.server_addresses;
            cfg.connect_retries = a.connect_retries;
            report(run_poly(&cfg))
        }
        Command::TrainMono(a) => train_mono(a),
        Command::Test(a) => test(a),
    }
}
