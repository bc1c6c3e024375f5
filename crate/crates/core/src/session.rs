//! Server-side edit sessions.
//!
//! An [`EditSession`] holds the live copy of a workflow being edited. Every
//! user edit arrives as one [`ChangeEvent`] and is routed to the handler for
//! its kind; the handler vets the change, applies it to a scratch copy and
//! only then commits, so a rejected change leaves the session untouched.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{
    check_binding, check_config, check_name, check_text, ConcreteWorkflow, FieldError, Graph, Job, JobConfig, NodeId,
    Port, PortBinding, PortKind, PortRef, Position, MAX_DESCRIPTION_LEN,
};
use crate::store::{Store, StoreError};
use crate::validation::{check_connection, validate_structure, Finding, Rule, Severity};
use crate::wire::{digest_unchecked, StateDigest, WireError};

/// One atomic edit. Serialized as `{"kind": "...", "payload": {...}}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "payload")]
pub enum Change {
    AddJob {
        name: String,
        #[serde(default)]
        description: String,
        #[serde(default)]
        x: u32,
        #[serde(default)]
        y: u32,
    },
    RemoveJob {
        job: NodeId,
    },
    MoveJob {
        job: NodeId,
        x: u32,
        y: u32,
    },
    RenameJob {
        job: NodeId,
        name: String,
    },
    SetJobDescription {
        job: NodeId,
        description: String,
    },
    AddPort {
        job: NodeId,
        name: String,
        seq: u32,
        kind: PortKind,
    },
    RemovePort {
        job: NodeId,
        port: NodeId,
    },
    /// Amends an existing port. Absent fields are left as they are.
    ChangePortConfig {
        job: NodeId,
        port: NodeId,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        name: Option<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        seq: Option<u32>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        binding: Option<PortBinding>,
    },
    AddConnection {
        from: PortRef,
        to: PortRef,
    },
    RemoveConnection {
        connection: NodeId,
    },
    SetJobConfig {
        job: NodeId,
        config: Option<JobConfig>,
    },
    SetPortBinding {
        job: NodeId,
        port: NodeId,
        binding: Option<PortBinding>,
    },
    /// Renames the workflow, its source graph, or both.
    RenameWorkflow {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        name: Option<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        graph: Option<String>,
    },
}

impl Change {
    pub fn kind(&self) -> &'static str {
        match self {
            Change::AddJob { .. } => "AddJob",
            Change::RemoveJob { .. } => "RemoveJob",
            Change::MoveJob { .. } => "MoveJob",
            Change::RenameJob { .. } => "RenameJob",
            Change::SetJobDescription { .. } => "SetJobDescription",
            Change::AddPort { .. } => "AddPort",
            Change::RemovePort { .. } => "RemovePort",
            Change::ChangePortConfig { .. } => "ChangePortConfig",
            Change::AddConnection { .. } => "AddConnection",
            Change::RemoveConnection { .. } => "RemoveConnection",
            Change::SetJobConfig { .. } => "SetJobConfig",
            Change::SetPortBinding { .. } => "SetPortBinding",
            Change::RenameWorkflow { .. } => "RenameWorkflow",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChangeEvent {
    pub expected_revision: u64,
    #[serde(flatten)]
    pub change: Change,
}

impl ChangeEvent {
    pub fn new(expected_revision: u64, change: Change) -> Self {
        Self {
            expected_revision,
            change,
        }
    }
}

/// Acknowledgment of an accepted change.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChangeAck {
    pub revision: u64,
    pub digest: StateDigest,
    /// Id given to the job, port or connection the change created.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub allocated: Option<NodeId>,
    /// Ports and connections removed along with the change's target.
    #[serde(default)]
    pub cascaded_removals: Vec<NodeId>,
}

#[derive(Debug, Error)]
pub enum SessionError {
    #[error("stale revision: expected {expected}, session is at {actual}")]
    StaleRevision { expected: u64, actual: u64 },
    #[error("{} {}: {}", .0.rule, .0.target, .0.message)]
    Validation(Finding),
    #[error("{0} not found")]
    NotFound(String),
    #[error("malformed payload: {0}")]
    MalformedPayload(String),
    #[error("invalid initial workflow: {0}")]
    InvalidInitial(#[from] WireError),
    #[error(transparent)]
    Store(#[from] StoreError),
}

impl From<FieldError> for SessionError {
    fn from(e: FieldError) -> Self {
        SessionError::MalformedPayload(e.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SaveKeys {
    pub graph_key: String,
    pub workflow_key: String,
}

#[derive(Debug, Clone)]
pub struct EditSession {
    id: String,
    initial: ConcreteWorkflow,
    workflow: ConcreteWorkflow,
    revision: u64,
    log: Vec<ChangeEvent>,
    next_id: u64,
    digest: StateDigest,
}

fn not_found_job(job: NodeId) -> SessionError {
    SessionError::NotFound(format!("job {job}"))
}

fn not_found_port(job: NodeId, port: NodeId) -> SessionError {
    SessionError::NotFound(format!("port {port} on job {job}"))
}

fn job_mut(graph: &mut Graph, id: NodeId) -> Result<&mut Job, SessionError> {
    graph.job_mut(id).ok_or_else(|| not_found_job(id))
}

fn port_mut(graph: &mut Graph, job: NodeId, port: NodeId) -> Result<&mut Port, SessionError> {
    job_mut(graph, job)?
        .port_mut(port)
        .ok_or_else(|| not_found_port(job, port))
}

fn check_job_name_free(graph: &Graph, name: &str, except: Option<NodeId>) -> Result<(), SessionError> {
    match graph.job_named(name) {
        Some(other) if Some(other.id) != except => Err(SessionError::Validation(Finding::new(
            Rule::R7,
            format!("job:{name}"),
            format!("job name {name} is already in use"),
        ))),
        _ => Ok(()),
    }
}

fn check_port_free(job: &Job, name: &str, seq: u32, except: Option<NodeId>) -> Result<(), SessionError> {
    let others = || job.ports.iter().filter(move |p| Some(p.id) != except);
    let clash = if others().any(|p| p.name == name) {
        Some(format!("port name {name} is already used on job {}", job.name))
    } else if others().any(|p| p.seq == seq) {
        Some(format!("sequence number {seq} is already used on job {}", job.name))
    } else {
        None
    };
    match clash {
        Some(message) => Err(SessionError::Validation(Finding::new(
            Rule::R1,
            format!("job:{}/port:{name}", job.name),
            message,
        ))),
        None => Ok(()),
    }
}

impl EditSession {
    /// Opens a session on an empty workflow named `name`.
    pub fn new(name: &str) -> Result<Self, SessionError> {
        check_name("workflow name", name)?;
        Self::open(ConcreteWorkflow::empty(name))
    }

    /// Opens a session on an existing workflow, which must be structurally
    /// valid.
    pub fn open(mut initial: ConcreteWorkflow) -> Result<Self, SessionError> {
        initial.check_fields().map_err(WireError::from)?;
        if let Some(f) = validate_structure(&initial.graph).into_iter().find(Finding::is_error) {
            return Err(WireError::InvariantViolation(f).into());
        }
        initial.graph.canonicalize();
        let next_id = initial.graph.max_id().map_or(1, |id| id.0 + 1);
        let digest = digest_unchecked(&initial);
        Ok(Self {
            id: uuid::Uuid::new_v4().simple().to_string(),
            workflow: initial.clone(),
            initial,
            revision: 0,
            log: Vec::new(),
            next_id,
            digest,
        })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn revision(&self) -> u64 {
        self.revision
    }

    pub fn digest(&self) -> &StateDigest {
        &self.digest
    }

    pub fn workflow(&self) -> &ConcreteWorkflow {
        &self.workflow
    }

    pub fn initial(&self) -> &ConcreteWorkflow {
        &self.initial
    }

    pub fn change_log(&self) -> &[ChangeEvent] {
        &self.log
    }

    pub fn snapshot(&self) -> ConcreteWorkflow {
        self.workflow.clone()
    }

    /// Applies one change if `ev.expected_revision` matches and the change
    /// passes its handler's checks. On error nothing changes.
    pub fn apply(&mut self, ev: ChangeEvent) -> Result<ChangeAck, SessionError> {
        if ev.expected_revision != self.revision {
            return Err(SessionError::StaleRevision {
                expected: ev.expected_revision,
                actual: self.revision,
            });
        }
        let mut scratch = self.workflow.clone();
        let mut next_id = self.next_id;
        let mut alloc = || {
            let id = NodeId(next_id);
            next_id += 1;
            id
        };
        let (allocated, cascaded_removals) = handle(&mut scratch, &ev.change, &mut alloc)?;
        scratch.graph.canonicalize();
        scratch.modified_at = crate::model::now();
        debug_assert!(
            !validate_structure(&scratch.graph).iter().any(Finding::is_error),
            "{} left the graph invalid",
            ev.change.kind()
        );

        self.digest = digest_unchecked(&scratch);
        self.workflow = scratch;
        self.next_id = next_id;
        self.revision += 1;
        self.log.push(ev);
        Ok(ChangeAck {
            revision: self.revision,
            digest: self.digest.clone(),
            allocated,
            cascaded_removals,
        })
    }

    /// Persists the abstract graph under its name, then the workflow, which
    /// refers to the graph by name. The session stays open.
    pub fn save(&self, store: &Store) -> Result<SaveKeys, SessionError> {
        let w = &self.workflow;
        if let Some(f) = validate_structure(&w.graph).into_iter().find(Finding::is_error) {
            return Err(SessionError::Validation(f));
        }
        if w.graph.jobs.is_empty() {
            return Err(SessionError::Validation(Finding {
                rule: Rule::W1,
                severity: Severity::Error,
                target: format!("graph:{}", w.graph.name),
                message: "graph must contain at least one job to be saved".into(),
            }));
        }
        let graph_key = store.put_graph(&w.graph_name, &w.abstract_graph())?;
        let workflow_key = store.put_workflow(&w.name, w)?;
        Ok(SaveKeys {
            graph_key,
            workflow_key,
        })
    }
}

/// Replays a change log onto a starting workflow.
pub fn replay(initial: &ConcreteWorkflow, log: &[ChangeEvent]) -> Result<ConcreteWorkflow, SessionError> {
    let mut session = EditSession::open(initial.clone())?;
    for ev in log {
        session.apply(ev.clone())?;
    }
    Ok(session.workflow)
}

type Handled = (Option<NodeId>, Vec<NodeId>);

fn handle(
    w: &mut ConcreteWorkflow,
    change: &Change,
    alloc: &mut impl FnMut() -> NodeId,
) -> Result<Handled, SessionError> {
    let graph = &mut w.graph;
    match change {
        Change::AddJob {
            name,
            description,
            x,
            y,
        } => {
            check_name("job name", name)?;
            check_text("job description", description, MAX_DESCRIPTION_LEN)?;
            check_job_name_free(graph, name, None)?;
            let id = alloc();
            graph.jobs.push(Job {
                id,
                name: name.clone(),
                description: description.clone(),
                position: Position::new(*x, *y),
                ports: Vec::new(),
                config: None,
            });
            Ok((Some(id), vec![]))
        }
        Change::RemoveJob { job } => {
            let index = graph
                .jobs
                .iter()
                .position(|j| j.id == *job)
                .ok_or_else(|| not_found_job(*job))?;
            let removed = graph.jobs.remove(index);
            let mut cascade: Vec<NodeId> = removed.ports.iter().map(|p| p.id).collect();
            graph.connections.retain(|c| {
                let touches = c.from.job == *job || c.to.job == *job;
                if touches {
                    cascade.push(c.id);
                }
                !touches
            });
            cascade.sort();
            Ok((None, cascade))
        }
        Change::MoveJob { job, x, y } => {
            job_mut(graph, *job)?.position = Position::new(*x, *y);
            Ok((None, vec![]))
        }
        Change::RenameJob { job, name } => {
            check_name("job name", name)?;
            check_job_name_free(graph, name, Some(*job))?;
            job_mut(graph, *job)?.name = name.clone();
            Ok((None, vec![]))
        }
        Change::SetJobDescription { job, description } => {
            check_text("job description", description, MAX_DESCRIPTION_LEN)?;
            job_mut(graph, *job)?.description = description.clone();
            Ok((None, vec![]))
        }
        Change::AddPort { job, name, seq, kind } => {
            check_name("port name", name)?;
            let target = job_mut(graph, *job)?;
            check_port_free(target, name, *seq, None)?;
            let id = alloc();
            target.ports.push(Port {
                id,
                name: name.clone(),
                seq: *seq,
                kind: *kind,
                binding: None,
            });
            Ok((Some(id), vec![]))
        }
        Change::RemovePort { job, port } => {
            let target = job_mut(graph, *job)?;
            let index = target
                .ports
                .iter()
                .position(|p| p.id == *port)
                .ok_or_else(|| not_found_port(*job, *port))?;
            target.ports.remove(index);
            let at = PortRef::new(*job, *port);
            let mut cascade = Vec::new();
            graph.connections.retain(|c| {
                let touches = c.from == at || c.to == at;
                if touches {
                    cascade.push(c.id);
                }
                !touches
            });
            cascade.sort();
            Ok((None, cascade))
        }
        Change::ChangePortConfig {
            job,
            port,
            name,
            seq,
            binding,
        } => {
            let target = job_mut(graph, *job)?;
            let current = target.port(*port).ok_or_else(|| not_found_port(*job, *port))?;
            let new_name = name.clone().unwrap_or_else(|| current.name.clone());
            let new_seq = seq.unwrap_or(current.seq);
            let kind = current.kind;
            check_name("port name", &new_name)?;
            check_port_free(target, &new_name, new_seq, Some(*port))?;
            if let Some(b) = binding {
                check_binding(b, kind)?;
            }
            let p = target.port_mut(*port).expect("port resolved above");
            p.name = new_name;
            p.seq = new_seq;
            if let Some(b) = binding {
                p.binding = Some(b.clone());
            }
            Ok((None, vec![]))
        }
        Change::AddConnection { from, to } => {
            check_connection(graph, *from, *to).map_err(SessionError::Validation)?;
            let id = alloc();
            graph.connections.push(crate::model::Connection {
                id,
                from: *from,
                to: *to,
            });
            Ok((Some(id), vec![]))
        }
        Change::RemoveConnection { connection } => {
            let index = graph
                .connections
                .iter()
                .position(|c| c.id == *connection)
                .ok_or_else(|| SessionError::NotFound(format!("connection {connection}")))?;
            graph.connections.remove(index);
            Ok((None, vec![]))
        }
        Change::SetJobConfig { job, config } => {
            if let Some(cfg) = config {
                check_config(cfg)?;
            }
            job_mut(graph, *job)?.config = config.clone();
            Ok((None, vec![]))
        }
        Change::SetPortBinding { job, port, binding } => {
            let p = port_mut(graph, *job, *port)?;
            if let Some(b) = binding {
                check_binding(b, p.kind)?;
            }
            p.binding = binding.clone();
            Ok((None, vec![]))
        }
        Change::RenameWorkflow {
            name,
            graph: graph_name,
        } => {
            if name.is_none() && graph_name.is_none() {
                return Err(SessionError::MalformedPayload(
                    "RenameWorkflow needs a name, a graph name, or both".into(),
                ));
            }
            if let Some(n) = name {
                check_name("workflow name", n)?;
            }
            if let Some(g) = graph_name {
                check_name("graph name", g)?;
                graph.name = g.clone();
                w.graph_name = g.clone();
            }
            if let Some(n) = name {
                w.name = n.clone();
            }
            Ok((None, vec![]))
        }
    }
}
