use std::io::Write;
use std::net::{IpAddr, SocketAddr};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use echomaze_cli::{gen_maze, parse_cells, replay, run, CliError, ReplayResult, RunArgs, EXIT_DIVERGED, EXIT_ERROR};
use echomaze_service::{AppState, ServiceConfig};

#[derive(Parser)]
#[command(name = "echomaze", version, about = "Voice-driven maze robot simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an utterance script against a fresh session and write a metrics report.
    Run {
        /// Scenario JSON file, or a bundled name (default, anomaly).
        #[arg(long)]
        scenario: PathBuf,
        /// One utterance per line; `#` comments, `@expect-error` markers.
        #[arg(long)]
        script: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Include true poses in Step events.
        #[arg(long)]
        debug_truth: bool,
        /// Report file; the report always goes to stdout as well.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Event log file, one wire event per line.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Generate a random perfect maze as a scenario file.
    GenMaze {
        /// Cell counts as WxH, both odd and >= 5.
        #[arg(long)]
        cells: String,
        #[arg(long, default_value_t = 0.4)]
        cell_size: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Regenerate a run and check it against a recorded event log.
    Replay {
        #[arg(long)]
        log: PathBuf,
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        script: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Serve the HTTP session API until interrupted.
    Serve {
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        bind: IpAddr,
        /// Directory for per-session event logs.
        #[arg(long)]
        log_dir: Option<PathBuf>,
    },
}

fn fail(e: CliError) -> ExitCode {
    eprintln!("error: {e}");
    ExitCode::from(EXIT_ERROR as u8)
}

fn main() -> ExitCode {
    match Cli::parse().command {
        Command::Run {
            scenario,
            script,
            seed,
            debug_truth,
            out,
            log,
        } => {
            let args = RunArgs {
                scenario: &scenario,
                script: &script,
                seed,
                debug_truth,
                out: out.as_deref(),
                log: log.as_deref(),
            };
            match run(&args) {
                Ok((report, json)) => {
                    print!("{json}");
                    if !report.expectation_mismatches.is_empty() {
                        eprintln!("warning: @expect-error mismatches on lines {:?}", report.expectation_mismatches);
                    }
                    ExitCode::from(report.exit_code as u8)
                }
                Err(e) => fail(e),
            }
        }
        Command::GenMaze {
            cells,
            cell_size,
            seed,
            out,
        } => match parse_cells(&cells).and_then(|c| gen_maze(c, cell_size, seed, &out)) {
            Ok(warning) => {
                if let Some(w) = warning {
                    eprintln!("warning: {w}");
                }
                ExitCode::SUCCESS
            }
            Err(e) => fail(e),
        },
        Command::Replay {
            log,
            scenario,
            script,
            seed,
        } => match replay(&log, &scenario, &script, seed) {
            Ok(ReplayResult::Identical { events }) => {
                println!("replay identical: {events} events");
                ExitCode::SUCCESS
            }
            Ok(ReplayResult::Diverged { seq, detail }) => {
                eprintln!("replay diverged at seq {seq}: {detail}");
                ExitCode::from(EXIT_DIVERGED as u8)
            }
            Err(e) => fail(e),
        },
        Command::Serve { port, bind, log_dir } => serve(SocketAddr::new(bind, port), log_dir),
    }
}

fn serve(addr: SocketAddr, log_dir: Option<PathBuf>) -> ExitCode {
    let runtime = match tokio::runtime::Runtime::new() {
        Ok(r) => r,
        Err(e) => return fail(CliError::Invalid(e.to_string())),
    };
    runtime.block_on(async move {
        let listener = match tokio::net::TcpListener::bind(addr).await {
            Ok(l) => l,
            Err(e) => return fail(CliError::Invalid(format!("cannot bind {addr}: {e}"))),
        };
        let local = listener.local_addr().map_or(addr, |a| a);
        println!("listening on http://{local}");
        let _ = std::io::stdout().flush();
        let state = AppState::new(ServiceConfig { log_dir });
        let shutdown = async {
            let _ = tokio::signal::ctrl_c().await;
        };
        match echomaze_service::serve(listener, state, shutdown).await {
            Ok(()) => {
                println!("shut down");
                ExitCode::SUCCESS
            }
            Err(e) => fail(CliError::Invalid(e.to_string())),
        }
    })
}
