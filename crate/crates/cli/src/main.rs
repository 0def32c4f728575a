use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use vlab::runner::{self, Command, ExperimentConfig};

/// Run a Volterra / stochastic-convolution experiment from a JSON config.
#[derive(Parser, Debug)]
#[command(name = "vlab", version)]
struct Cli {
    /// cpcheck | resolvent | yosida | simulate | verify-strong | verify-weak | mild-vs-weak | eq27 | isometry
    command: String,
    #[arg(long)]
    config: PathBuf,
    /// Output directory (default: config `output` or out/<command>)
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the config seed
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, env = "VLAB_THREADS")]
    threads: Option<usize>,
    /// Only validate the config and print violations
    #[arg(long)]
    check: bool,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    ExitCode::from(real_main(cli) as u8)
}

fn real_main(cli: Cli) -> i32 {
    let command: Command = match cli.command.parse() {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return 3;
        }
    };
    let mut config = match ExperimentConfig::load(&cli.config) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return 3;
        }
    };
    match config.command {
        Some(c) if c != command => {
            eprintln!("error: command: config is for {c}, invoked as {command}");
            return 3;
        }
        _ => config.command = Some(command),
    }
    if let Some(seed) = cli.seed {
        config.seed = Some(seed);
    }
    let violations = runner::validate(&config);
    if !violations.is_empty() {
        for v in &violations {
            eprintln!("config error: {v}");
        }
        return 3;
    }
    if cli.check {
        println!("config ok");
        return 0;
    }
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: thread pool: {e}");
            return 1;
        }
    }
    let out = cli.out.unwrap_or_else(|| runner::default_out_dir(&config));
    log::info!("running {command} -> {}", out.display());
    let result = runner::run(&config, &out);
    match &result {
        Ok(m) => {
            for inv in &m.invariants {
                let tag = if inv.pass { "PASS" } else { "FAIL" };
                println!("{tag} {}: {}", inv.name, inv.detail);
            }
            println!("{} in {:.2}s, artifacts in {}", if m.pass { "pass" } else { "fail" }, m.wall_time_s, out.display());
        }
        Err(e) => eprintln!("error: {e}"),
    }
    runner::exit_code(&result)
}
