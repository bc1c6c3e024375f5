//! Local stand-in for a computing infrastructure: plans a workflow level by
//! level and runs each job as a process in its own directory.
//!
//! Run directory layout:
//!
//! ```text
//! runs/<run_id>/record.xml        current RunRecord
//! runs/<run_id>/workflow.xml      snapshot frozen at submit
//! runs/<run_id>/<job>/            working directory: staged inputs,
//!                                 stdout, stderr, declared outputs
//! ```
//!
//! Inputs are staged under the consuming port's name. A channel input is a
//! copy of the file the producing output port declares.

mod record;

pub use record::{JobState, RunRecord, RunStatus, Transition};

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{ConcreteWorkflow, ExecutableType, Job, NodeId, PortBinding, PortKind, PortRef, LOCAL_TARGET};
use crate::store::{write_atomic, Store, StoreError};
use crate::validation::{has_errors, validate_concrete, Finding};
use crate::wire::{self, StateDigest, WireError};

const RECORD_FILE: &str = "record.xml";
const WORKFLOW_FILE: &str = "workflow.xml";
const SCRIPTS_DIR: &str = ".scripts";
const RESERVED: [&str; 3] = [RECORD_FILE, WORKFLOW_FILE, SCRIPTS_DIR];

#[derive(Debug, Error)]
pub enum ExecError {
    #[error("submission rejected with {} error finding(s)", .0.iter().filter(|f| f.is_error()).count())]
    SubmitRejected(Vec<Finding>),
    #[error("job {job} targets {target:?}; only \"local\" is available")]
    UnsupportedTarget { job: String, target: String },
    #[error("job name {0:?} collides with a run directory entry")]
    ReservedJobName(String),
    #[error("run {0} not found")]
    NotFound(String),
    #[error("run record {path}: {message}")]
    CorruptRecord { path: PathBuf, message: String },
    #[error(transparent)]
    Invalid(#[from] WireError),
    #[error(transparent)]
    Store(#[from] StoreError),
}

/// Jobs grouped so that each level depends only on earlier levels.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecutionPlan {
    pub levels: Vec<Vec<String>>,
}

impl ExecutionPlan {
    pub fn jobs(&self) -> impl Iterator<Item = &str> {
        self.levels.iter().flatten().map(String::as_str)
    }
}

/// Kahn-style leveling; names within a level are sorted.
pub fn plan(w: &ConcreteWorkflow) -> Result<ExecutionPlan, ExecError> {
    let findings = validate_concrete(w);
    if has_errors(&findings) {
        return Err(ExecError::SubmitRejected(findings));
    }
    Ok(level(w))
}

fn level(w: &ConcreteWorkflow) -> ExecutionPlan {
    let graph = &w.graph;
    let edges = graph
        .dependency_edges()
        .expect("validated graph has no dangling connections");
    let mut indegree: HashMap<NodeId, usize> = graph.jobs.iter().map(|j| (j.id, 0)).collect();
    for (_, consumer) in &edges {
        *indegree.get_mut(consumer).expect("edge endpoint is a job") += 1;
    }
    let names: HashMap<NodeId, &str> = graph.jobs.iter().map(|j| (j.id, j.name.as_str())).collect();
    let mut current: Vec<NodeId> = indegree.iter().filter(|(_, d)| **d == 0).map(|(id, _)| *id).collect();
    let mut levels = Vec::new();
    while !current.is_empty() {
        let mut next = Vec::new();
        for &job in &current {
            for &(_, consumer) in edges.range((job, NodeId(0))..=(job, NodeId(u64::MAX))) {
                let d = indegree.get_mut(&consumer).expect("edge endpoint is a job");
                *d -= 1;
                if *d == 0 {
                    next.push(consumer);
                }
            }
        }
        let mut names: Vec<String> = current.iter().map(|id| names[id].to_string()).collect();
        names.sort();
        levels.push(names);
        current = next;
    }
    ExecutionPlan { levels }
}

#[derive(Debug, Clone)]
pub struct ExecOptions {
    /// Run independent jobs of one level concurrently. Without the
    /// `parallel` feature this falls back to sequential execution.
    pub parallel: bool,
    /// Directory that relative `File` bindings and binary paths resolve
    /// against.
    pub base_dir: PathBuf,
}

impl Default for ExecOptions {
    fn default() -> Self {
        Self {
            parallel: false,
            base_dir: std::env::current_dir().unwrap_or_else(|_| PathBuf::from(".")),
        }
    }
}

/// A submitted run executing on a background thread.
pub struct RunHandle {
    pub run_id: String,
    thread: JoinHandle<RunRecord>,
}

impl RunHandle {
    /// Blocks until the run completes and returns its final record.
    pub fn join(self) -> RunRecord {
        self.thread.join().expect("run thread panicked")
    }
}

struct RunContext {
    workflow: ConcreteWorkflow,
    run_dir: PathBuf,
    base_dir: PathBuf,
    record: Mutex<RunRecord>,
}

impl RunContext {
    fn job_dir(&self, job: &str) -> PathBuf {
        self.run_dir.join(job)
    }

    fn set_state(&self, job: &str, state: JobState) {
        let mut record = self.record.lock().expect("record lock poisoned");
        record.transition(job, state);
        persist(&self.run_dir, &record);
    }

    fn state(&self, job: &str) -> JobState {
        let record = self.record.lock().expect("record lock poisoned");
        record.state(job).cloned().unwrap_or(JobState::Init)
    }
}

// A failed record write must not abort a run in flight.
fn persist(run_dir: &Path, record: &RunRecord) {
    if let Err(e) = write_atomic(&run_dir.join(RECORD_FILE), record.to_xml().as_bytes()) {
        eprintln!("warning: could not persist run record: {e}");
    }
}

/// Validates, registers and starts a run. Returns once the run directory
/// and initial record exist; execution continues in the background.
pub fn submit(w: &ConcreteWorkflow, store: &Store, opts: &ExecOptions) -> Result<RunHandle, ExecError> {
    let plan = plan(w)?;
    for job in &w.graph.jobs {
        if RESERVED.contains(&job.name.as_str()) {
            return Err(ExecError::ReservedJobName(job.name.clone()));
        }
        let target = job.config.as_ref().map(|c| c.target.as_str()).unwrap_or_default();
        if target != LOCAL_TARGET {
            return Err(ExecError::UnsupportedTarget {
                job: job.name.clone(),
                target: target.to_string(),
            });
        }
    }
    let digest: StateDigest = wire::digest(w)?;

    let run_id = uuid::Uuid::new_v4().simple().to_string();
    let run_dir = store.runs_dir().join(&run_id);
    for job in plan.jobs() {
        let dir = run_dir.join(job);
        fs::create_dir_all(&dir).map_err(|e| StoreError::io(&dir, e))?;
    }
    let scripts = run_dir.join(SCRIPTS_DIR);
    fs::create_dir_all(&scripts).map_err(|e| StoreError::io(&scripts, e))?;
    let snapshot = wire::serialize(w).expect("digest succeeded so serialization does");
    write_atomic(&run_dir.join(WORKFLOW_FILE), &snapshot)?;

    let record = RunRecord::new(
        run_id.clone(),
        w.name.clone(),
        digest,
        plan.jobs().map(str::to_string),
        run_dir.clone(),
    );
    write_atomic(&run_dir.join(RECORD_FILE), record.to_xml().as_bytes())?;

    let ctx = Arc::new(RunContext {
        workflow: w.clone(),
        run_dir,
        base_dir: opts.base_dir.clone(),
        record: Mutex::new(record),
    });
    let parallel = opts.parallel;
    let thread = std::thread::Builder::new()
        .name(format!("run-{run_id}"))
        .spawn(move || run(&ctx, &plan, parallel))
        .map_err(|e| StoreError::io(Path::new("run thread"), e))?;
    Ok(RunHandle { run_id, thread })
}

/// Submits and waits for completion.
pub fn execute(w: &ConcreteWorkflow, store: &Store, opts: &ExecOptions) -> Result<RunRecord, ExecError> {
    Ok(submit(w, store, opts)?.join())
}

/// Latest persisted record of a run.
pub fn status(store: &Store, run_id: &str) -> Result<RunRecord, ExecError> {
    if run_id.is_empty() || !run_id.bytes().all(|b| b.is_ascii_alphanumeric()) {
        return Err(ExecError::NotFound(run_id.to_string()));
    }
    let path = store.runs_dir().join(run_id).join(RECORD_FILE);
    let bytes = fs::read(&path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => ExecError::NotFound(run_id.to_string()),
        _ => ExecError::Store(StoreError::io(&path, e)),
    })?;
    RunRecord::from_xml(&bytes).map_err(|message| ExecError::CorruptRecord { path, message })
}

fn run(ctx: &RunContext, plan: &ExecutionPlan, parallel: bool) -> RunRecord {
    let graph = &ctx.workflow.graph;
    let by_name: HashMap<&str, &Job> = graph.jobs.iter().map(|j| (j.name.as_str(), j)).collect();
    let mut upstream: BTreeMap<&str, BTreeSet<&str>> = BTreeMap::new();
    for c in &graph.connections {
        let from = graph.job(c.from.job).expect("validated").name.as_str();
        let to = graph.job(c.to.job).expect("validated").name.as_str();
        upstream.entry(to).or_default().insert(from);
    }

    for level in &plan.levels {
        let ready: Vec<&Job> = level
            .iter()
            .filter(|name| {
                upstream
                    .get(name.as_str())
                    .into_iter()
                    .flatten()
                    .all(|up| ctx.state(up) == JobState::Finished)
            })
            .map(|name| by_name[name.as_str()])
            .collect();
        run_level(ctx, &ready, parallel);
    }

    let mut record = ctx.record.lock().expect("record lock poisoned");
    record.finished_at = Some(record::now_millis());
    persist(&ctx.run_dir, &record);
    record.clone()
}

#[cfg(feature = "parallel")]
fn run_level(ctx: &RunContext, jobs: &[&Job], parallel: bool) {
    use rayon::prelude::*;
    if parallel {
        jobs.par_iter().for_each(|job| run_job(ctx, job));
    } else {
        jobs.iter().for_each(|job| run_job(ctx, job));
    }
}

#[cfg(not(feature = "parallel"))]
fn run_level(ctx: &RunContext, jobs: &[&Job], _parallel: bool) {
    jobs.iter().for_each(|job| run_job(ctx, job));
}

fn run_job(ctx: &RunContext, job: &Job) {
    ctx.set_state(&job.name, JobState::Running);
    let outcome = stage_inputs(ctx, job).and_then(|()| launch(ctx, job));
    ctx.set_state(&job.name, outcome.unwrap_or_else(|e| e));
}

fn resolve(base: &Path, path: &str) -> PathBuf {
    let p = Path::new(path);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn stage_inputs(ctx: &RunContext, job: &Job) -> Result<(), JobState> {
    let graph = &ctx.workflow.graph;
    let dir = ctx.job_dir(&job.name);
    for port in job.ports.iter().filter(|p| p.kind == PortKind::Input) {
        let dest = dir.join(&port.name);
        let at = PortRef::new(job.id, port.id);
        let staged = match (graph.incoming(at), &port.binding) {
            (Some(c), _) => {
                let producer = graph.job(c.from.job).expect("validated");
                let filename = match &graph.resolve(c.from).expect("validated").binding {
                    Some(PortBinding::Output { filename }) => filename,
                    _ => unreachable!("validated output ports declare a filename"),
                };
                let src = ctx.job_dir(&producer.name).join(filename);
                fs::copy(&src, &dest)
                    .map(drop)
                    .map_err(|e| format!("staging {} from {}/{filename}: {e}", port.name, producer.name))
            }
            (None, Some(PortBinding::File { path })) => {
                let src = resolve(&ctx.base_dir, path);
                fs::copy(&src, &dest)
                    .map(drop)
                    .map_err(|e| format!("staging {} from {}: {e}", port.name, src.display()))
            }
            (None, Some(PortBinding::Inline { content })) => {
                fs::write(&dest, content).map_err(|e| format!("staging {}: {e}", port.name))
            }
            (None, other) => Err(format!("input {} has no usable binding ({other:?})", port.name)),
        };
        staged.map_err(JobState::failed)?;
    }
    Ok(())
}

fn launch(ctx: &RunContext, job: &Job) -> Result<JobState, JobState> {
    let cfg = job.config.as_ref().expect("validated jobs are configured");
    let dir = ctx.job_dir(&job.name);
    let args = shlex::split(&cfg.arguments)
        .ok_or_else(|| JobState::failed(format!("cannot split arguments {:?}", cfg.arguments)))?;

    let mut cmd = match cfg.executable_type {
        ExecutableType::Binary => {
            let exe = if cfg.executable.contains('/') {
                resolve(&ctx.base_dir, &cfg.executable)
            } else {
                PathBuf::from(&cfg.executable)
            };
            Command::new(exe)
        }
        ExecutableType::Script => {
            let script = ctx.run_dir.join(SCRIPTS_DIR).join(format!("{}.sh", job.name));
            fs::write(&script, &cfg.executable).map_err(|e| JobState::failed(format!("writing script: {e}")))?;
            let mut cmd = Command::new("/bin/sh");
            cmd.arg(script);
            cmd
        }
    };
    let stdout = fs::File::create(dir.join("stdout")).map_err(|e| JobState::failed(format!("stdout: {e}")))?;
    let stderr = fs::File::create(dir.join("stderr")).map_err(|e| JobState::failed(format!("stderr: {e}")))?;
    let status = cmd
        .args(&args)
        .current_dir(&dir)
        .stdin(Stdio::null())
        .stdout(stdout)
        .stderr(stderr)
        .status()
        .map_err(|e| JobState::failed(format!("could not start {}: {e}", cfg.executable_type.as_str())))?;

    match status.code() {
        Some(0) => {}
        Some(code) => return Err(JobState::exited(code)),
        None => return Err(JobState::failed("terminated by a signal")),
    }
    for port in job.ports.iter().filter(|p| p.kind == PortKind::Output) {
        if let Some(PortBinding::Output { filename }) = &port.binding {
            if !dir.join(filename).is_file() {
                return Err(JobState::failed(format!("missing output {filename}")));
            }
        }
    }
    Ok(JobState::Finished)
}
