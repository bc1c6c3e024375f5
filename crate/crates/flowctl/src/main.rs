use std::collections::BTreeMap;
use std::io::Write;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use flowgate::executor::{self, ExecError, ExecOptions, RunStatus};
use flowgate::store::Store;
use flowgate::validation::{self, has_errors, Mode};
use flowgate::wire;
use flowgate_server::AppState;

/// Validate, run, import, export and serve workflows.
#[derive(Parser)]
#[command(name = "flowctl", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check a workflow document. Exit 0 when clean, 1 on error findings,
    /// 2 when the document cannot be read.
    Validate {
        file: PathBuf,
        #[arg(long, default_value = "workflow")]
        mode: Mode,
    },
    /// Execute a workflow locally. Exit 0 when every job finishes, 1 when
    /// a job fails, 2 when the workflow is rejected.
    Run {
        file: PathBuf,
        #[arg(long)]
        store: PathBuf,
        /// Run independent jobs of one level concurrently.
        #[arg(long)]
        parallel: bool,
        /// Directory for resolving relative file bindings and binaries.
        /// Defaults to the directory containing the document.
        #[arg(long)]
        base_dir: Option<PathBuf>,
    },
    /// Start the HTTP API.
    Serve {
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, alias = "store-root")]
        store: PathBuf,
        #[arg(long, default_value = "127.0.0.1")]
        host: std::net::IpAddr,
        #[arg(long)]
        parallel: bool,
    },
    /// Store a document (including graph-only documents) as a workflow.
    Import {
        file: PathBuf,
        #[arg(long)]
        store: PathBuf,
    },
    /// Print a stored workflow document.
    Export {
        name: String,
        #[arg(long)]
        store: PathBuf,
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Validate { file, mode } => validate(&file, mode),
        Command::Run {
            file,
            store,
            parallel,
            base_dir,
        } => run(&file, &store, parallel, base_dir),
        Command::Serve {
            port,
            store,
            host,
            parallel,
        } => serve(SocketAddr::new(host, port), &store, parallel),
        Command::Import { file, store } => import(&file, &store),
        Command::Export { name, store, output } => export(&name, &store, output.as_deref()),
    };
    result.unwrap_or_else(|e| {
        eprintln!("error: {e:#}");
        ExitCode::from(2)
    })
}

fn read(file: &Path) -> Result<Vec<u8>> {
    std::fs::read(file).with_context(|| format!("cannot read {}", file.display()))
}

fn validate(file: &Path, mode: Mode) -> Result<ExitCode> {
    let w = wire::decode(&read(file)?).with_context(|| file.display().to_string())?;
    let findings = validation::validate(&w, mode);
    let mut out = std::io::stdout().lock();
    for f in &findings {
        writeln!(out, "{f}")?;
    }
    Ok(if has_errors(&findings) {
        ExitCode::from(1)
    } else {
        ExitCode::SUCCESS
    })
}

fn run(file: &Path, store: &Path, parallel: bool, base_dir: Option<PathBuf>) -> Result<ExitCode> {
    let w = wire::decode(&read(file)?).with_context(|| file.display().to_string())?;
    let store = Store::open(store)?;
    let base_dir = match base_dir {
        Some(dir) => dir,
        None => file.parent().map(Path::to_path_buf).unwrap_or_default(),
    };
    let opts = ExecOptions {
        parallel,
        base_dir: std::path::absolute(&base_dir)?,
    };
    let handle = match executor::submit(&w, &store, &opts) {
        Ok(handle) => handle,
        Err(ExecError::SubmitRejected(findings)) => {
            for f in &findings {
                println!("{f}");
            }
            eprintln!("error: workflow rejected");
            return Ok(ExitCode::from(2));
        }
        Err(e) => return Err(e.into()),
    };
    let run_id = handle.run_id.clone();
    println!("run {run_id}");

    let mut printed = 0;
    let mut stream = |record: &executor::RunRecord| {
        for t in &record.transitions[printed.min(record.transitions.len())..] {
            println!("{:>4} {} {}", t.seq, t.job, t.state);
        }
        printed = printed.max(record.transitions.len());
    };
    let record = loop {
        let record = executor::status(&store, &run_id)?;
        stream(&record);
        if record.is_complete() {
            break record;
        }
        std::thread::sleep(Duration::from_millis(25));
    };
    handle.join();

    let states: BTreeMap<_, _> = record.job_states.iter().collect();
    for (job, state) in states {
        println!("{job}: {state}");
    }
    println!("workdir {}", record.workdir.display());
    Ok(match record.status() {
        RunStatus::Finished => ExitCode::SUCCESS,
        _ => ExitCode::from(1),
    })
}

fn serve(addr: SocketAddr, store: &Path, parallel: bool) -> Result<ExitCode> {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()))
        .with_writer(std::io::stderr)
        .init();
    let store = Store::open(store)?;
    let opts = ExecOptions {
        parallel,
        ..ExecOptions::default()
    };
    let runtime = tokio::runtime::Runtime::new()?;
    runtime.block_on(async {
        let listener = tokio::net::TcpListener::bind(addr)
            .await
            .with_context(|| format!("cannot listen on {addr}"))?;
        println!("listening on http://{}", listener.local_addr()?);
        flowgate_server::serve(listener, AppState::new(store, opts)).await?;
        Ok(ExitCode::SUCCESS)
    })
}

fn import(file: &Path, store: &Path) -> Result<ExitCode> {
    let w = wire::parse(&read(file)?).with_context(|| file.display().to_string())?;
    let store = Store::open(store)?;
    store.put_graph(&w.graph_name, &w.abstract_graph())?;
    let key = store.put_workflow(&w.name, &w)?;
    println!("{key} {}", wire::digest(&w)?);
    Ok(ExitCode::SUCCESS)
}

fn export(name: &str, store: &Path, output: Option<&Path>) -> Result<ExitCode> {
    let bytes = Store::open(store)?.workflow_bytes(name)?;
    match output {
        Some(path) => std::fs::write(path, bytes).with_context(|| format!("cannot write {}", path.display()))?,
        None => std::io::stdout().write_all(&bytes)?,
    }
    Ok(ExitCode::SUCCESS)
}
