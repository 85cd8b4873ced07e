use std::process::ExitCode;

use clap::{CommandFactory, FromArgMatches, Parser, Subcommand};

mod commands;
mod config;

use commands::{AblateArgs, ColortestArgs, EvalArgs, ExplainArgs, FixtureArgs, RankArgs, SelectArgs};

/// Find, rank, visualize and ablate the feature maps a CNN counterfeit
/// detector relies on.
#[derive(Parser, Debug)]
#[command(name = "tff", version, args_override_self = true)]
struct Cli {
    /// Worker threads; defaults to the number of cores. 1 runs serially.
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Read additional flags from a JSON object of {flag: value}.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<String>,

    /// More log output (repeat for more).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the planted-feature model and image corpus.
    Fixture(FixtureArgs),
    /// Score every feature map by relevance over counterfeit images.
    Rank(RankArgs),
    /// Pick top, low or random feature maps from a score table.
    Select(SelectArgs),
    /// Evaluate with and without dropping a feature-map set.
    Ablate(AblateArgs),
    /// Pixel-level explanation of one feature map on one image.
    Explain(ExplainArgs),
    /// Test feature maps for color dependence on counterfeits.
    Colortest(ColortestArgs),
    /// Evaluate the detector on a real/fake corpus.
    Eval(EvalArgs),
}

const SUBCOMMANDS: &[&str] = &["fixture", "rank", "select", "ablate", "explain", "colortest", "eval"];

fn parse() -> Result<Cli, ExitCode> {
    let args = match config::expand(std::env::args_os().collect(), SUBCOMMANDS) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {}", e);
            return Err(ExitCode::from(2));
        }
    };
    let matches = match Cli::command().try_get_matches_from(args) {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return Err(ExitCode::from(if e.use_stderr() { 2 } else { 0 }));
        }
    };
    Cli::from_arg_matches(&matches).map_err(|e| {
        let _ = e.print();
        ExitCode::from(2)
    })
}

fn main() -> ExitCode {
    let cli = match parse() {
        Ok(c) => c,
        Err(code) => return code,
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).format_timestamp(None).init();

    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: config error: --threads must be at least 1");
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot start thread pool: {}", e);
            return ExitCode::from(1);
        }
    }

    let threads = cli.threads;
    let result = match &cli.command {
        Command::Fixture(a) => commands::fixture(a, threads),
        Command::Rank(a) => commands::rank(a, threads),
        Command::Select(a) => commands::select(a, threads),
        Command::Ablate(a) => commands::ablate(a, threads),
        Command::Explain(a) => commands::explain(a, threads),
        Command::Colortest(a) => commands::colortest(a, threads),
        Command::Eval(a) => commands::eval(a, threads),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e);
            ExitCode::from(if e.is_usage() { 2 } else { 1 })
        }
    }
}
