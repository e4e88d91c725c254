//! Command-line surface of the toolkit: dataset download/convert/info/
//! validate, pipeline serving over TCP, demo training, and resumption.
//!
//! Exit codes: 0 success, 1 domain failure, 2 usage error.

use std::net::TcpListener;
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::atomic::{AtomicBool, Ordering};

use clap::{Parser, Subcommand};

use batchflow::container::Provenance;
use batchflow::mainloop::TrainSpec;
use batchflow::spec::PipelineSpec;
use batchflow::{container, registry, server, MainLoop};

#[derive(Parser)]
#[command(
    name = "batchflow",
    version,
    about = "Deterministic dataset pipelines and reproducible training"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fetch a dataset's raw files (checksummed, idempotent).
    Download {
        /// Registered dataset name.
        name: String,
        /// Target directory; defaults to $BF_DATA_DIR or ./data.
        #[arg(long)]
        dir: Option<PathBuf>,
    },
    /// Convert raw files into a container, tagging provenance.
    Convert {
        name: String,
        /// Directory holding the raw files.
        #[arg(long)]
        raw: PathBuf,
        /// Output container path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Print a container's metadata.
    Info { file: PathBuf },
    /// Recompute digests and check header invariants.
    Validate { file: PathBuf },
    /// Run a pipeline and serve its items over TCP.
    Serve {
        /// Pipeline spec (JSON).
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        port: u16,
        /// Interface to bind.
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
    },
    /// Train a model described by a training spec.
    Train {
        /// Training spec (JSON).
        #[arg(long)]
        spec: PathBuf,
        /// Resume from a snapshot written by the checkpoint extension.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Print a snapshot's counters and channel names.
    InspectSnapshot { file: PathBuf },
}

fn data_dir(dir: Option<PathBuf>) -> PathBuf {
    dir.or_else(|| std::env::var_os("BF_DATA_DIR").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("data"))
}

/// The exact invocation, with the leading argv entry reduced to the tool
/// name so the provenance of identical conversions is reproducible.
fn command_line() -> String {
    let mut parts: Vec<String> = std::env::args().collect();
    if let Some(first) = parts.first_mut() {
        *first = PathBuf::from(&*first)
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| first.clone());
    }
    parts.join(" ")
}

static INTERRUPTED: AtomicBool = AtomicBool::new(false);

extern "C" fn on_sigint(_: libc::c_int) {
    INTERRUPTED.store(true, Ordering::Relaxed);
}

fn install_sigint_handler() {
    let handler = on_sigint as extern "C" fn(libc::c_int);
    unsafe {
        libc::signal(libc::SIGINT, handler as usize as libc::sighandler_t);
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &PathBuf) -> batchflow::Result<T> {
    let text = std::fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

fn run(command: Command) -> batchflow::Result<ExitCode> {
    match command {
        Command::Download { name, dir } => {
            let dest = data_dir(dir);
            let outcomes = registry::download(&name, &dest)?;
            for (path, outcome) in outcomes {
                let verb = match outcome {
                    registry::FetchOutcome::Cached => "cached",
                    registry::FetchOutcome::Written => "written",
                };
                println!("{verb}  {}", path.display());
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Convert { name, raw, out } => {
            let provenance = Provenance {
                created_by: format!("batchflow {}", env!("CARGO_PKG_VERSION")),
                command_line: command_line(),
            };
            registry::convert(&name, &raw, &out, &provenance)?;
            println!("wrote {}", out.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Info { file } => {
            print!("{}", container::info(&file)?);
            Ok(ExitCode::SUCCESS)
        }
        Command::Validate { file } => {
            let report = container::validate(&file)?;
            for check in &report.checks {
                let status = if check.ok { "ok" } else { "FAIL" };
                println!("{status}  {}  {}", check.subject, check.detail);
            }
            if report.passed() {
                Ok(ExitCode::SUCCESS)
            } else {
                Ok(ExitCode::FAILURE)
            }
        }
        Command::Serve { spec, port, host } => {
            let spec: PipelineSpec = read_json(&spec)?;
            let listener = TcpListener::bind((host.as_str(), port))?;
            println!("serving on {}", listener.local_addr()?);
            server::serve(&spec, listener)?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Train { spec, resume } => {
            let spec: TrainSpec = read_json(&spec)?;
            let mut main_loop = match resume {
                Some(snapshot) => MainLoop::resume(spec, &snapshot)?,
                None => MainLoop::new(spec)?,
            };
            install_sigint_handler();
            let flag = main_loop.interrupt_flag();
            std::thread::spawn(move || loop {
                if INTERRUPTED.load(Ordering::Relaxed) {
                    flag.store(true, Ordering::Relaxed);
                    break;
                }
                std::thread::sleep(std::time::Duration::from_millis(25));
            });
            main_loop.run()?;
            Ok(ExitCode::SUCCESS)
        }
        Command::InspectSnapshot { file } => {
            let doc = batchflow::mainloop::snapshot::read_snapshot_doc(&file)?;
            println!("format version: {}", doc.format_version);
            println!("iterations done: {}", doc.status.iterations_done);
            println!("epochs done: {}", doc.status.epochs_done);
            println!("training finished: {}", doc.status.training_finished);
            println!("stop requested: {}", doc.status.stop_requested);
            let mut channels: Vec<&String> = doc.log.values().flat_map(|row| row.keys()).collect();
            channels.sort();
            channels.dedup();
            let names: Vec<&str> = channels.iter().map(|s| s.as_str()).collect();
            println!("channels: {}", names.join(", "));
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    // die quietly when stdout is a closed pipe, like other unix tools
    unsafe {
        libc::signal(libc::SIGPIPE, libc::SIG_DFL);
    }
    let cli = Cli::parse(); // usage errors exit 2 via clap
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
