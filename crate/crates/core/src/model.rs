//! In-memory workflow model.
//!
//! A [`Graph`] is the abstract workflow: jobs, their ports and the
//! connections between them. A [`ConcreteWorkflow`] wraps a graph and adds
//! per-job execution configuration and per-port data bindings, which live on
//! the jobs and ports themselves as optional fields.
//!
//! All values are kept in canonical order (jobs by name, ports by sequence
//! number, connections by endpoints) so that equality and serialization agree.

use std::collections::{BTreeSet, HashSet};
use std::fmt;

use chrono::{DateTime, SubsecRound, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MAX_NAME_LEN: usize = 64;
pub const MAX_DESCRIPTION_LEN: usize = 1024;
pub const MAX_FILENAME_LEN: usize = 255;

/// Identifier of a job, port or connection. Unique within one workflow.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub u64);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Position {
    pub x: u32,
    pub y: u32,
}

impl Position {
    pub fn new(x: u32, y: u32) -> Self {
        Self { x, y }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PortKind {
    Input,
    Output,
}

impl PortKind {
    pub fn as_str(self) -> &'static str {
        match self {
            PortKind::Input => "input",
            PortKind::Output => "output",
        }
    }
}

/// Where a port's data comes from (input ports) or goes to (output ports).
#[derive(Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "lowercase")]
pub enum PortBinding {
    /// Input fed by the incoming connection.
    Channel,
    /// Input copied from a file on the submitting host.
    File { path: String },
    /// Input materialized from literal bytes.
    Inline {
        #[serde(with = "base64_bytes")]
        content: Vec<u8>,
    },
    /// File an output port's job writes into its working directory.
    Output { filename: String },
}

impl fmt::Debug for PortBinding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PortBinding::Channel => f.write_str("Channel"),
            PortBinding::File { path } => write!(f, "File({path:?})"),
            PortBinding::Inline { content } => match std::str::from_utf8(content) {
                Ok(s) => write!(f, "Inline({s:?})"),
                Err(_) => write!(f, "Inline({} bytes)", content.len()),
            },
            PortBinding::Output { filename } => write!(f, "Output({filename:?})"),
        }
    }
}

impl PortBinding {
    pub fn fits(&self, kind: PortKind) -> bool {
        matches!(
            (self, kind),
            (PortBinding::Output { .. }, PortKind::Output)
                | (
                    PortBinding::Channel | PortBinding::File { .. } | PortBinding::Inline { .. },
                    PortKind::Input
                )
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Port {
    pub id: NodeId,
    pub name: String,
    pub seq: u32,
    pub kind: PortKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub binding: Option<PortBinding>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExecutableType {
    Binary,
    Script,
}

impl ExecutableType {
    pub fn as_str(self) -> &'static str {
        match self {
            ExecutableType::Binary => "binary",
            ExecutableType::Script => "script",
        }
    }
}

/// Execution settings for one job.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JobConfig {
    pub executable_type: ExecutableType,
    /// Path of the program for [`ExecutableType::Binary`], script text for
    /// [`ExecutableType::Script`].
    pub executable: String,
    /// Shell-word argument list.
    #[serde(default)]
    pub arguments: String,
    #[serde(default = "default_target")]
    pub target: String,
}

pub const LOCAL_TARGET: &str = "local";

fn default_target() -> String {
    LOCAL_TARGET.to_string()
}

impl JobConfig {
    pub fn script(text: impl Into<String>) -> Self {
        Self {
            executable_type: ExecutableType::Script,
            executable: text.into(),
            arguments: String::new(),
            target: default_target(),
        }
    }

    pub fn binary(path: impl Into<String>, arguments: impl Into<String>) -> Self {
        Self {
            executable_type: ExecutableType::Binary,
            executable: path.into(),
            arguments: arguments.into(),
            target: default_target(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Job {
    pub id: NodeId,
    pub name: String,
    #[serde(default)]
    pub description: String,
    #[serde(default)]
    pub position: Position,
    #[serde(default)]
    pub ports: Vec<Port>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<JobConfig>,
}

impl Job {
    pub fn port(&self, id: NodeId) -> Option<&Port> {
        self.ports.iter().find(|p| p.id == id)
    }

    pub fn port_mut(&mut self, id: NodeId) -> Option<&mut Port> {
        self.ports.iter_mut().find(|p| p.id == id)
    }

    pub fn port_named(&self, name: &str) -> Option<&Port> {
        self.ports.iter().find(|p| p.name == name)
    }
}

/// A (job, port) pair naming one end of a connection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct PortRef {
    pub job: NodeId,
    pub port: NodeId,
}

impl PortRef {
    pub fn new(job: NodeId, port: NodeId) -> Self {
        Self { job, port }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Connection {
    pub id: NodeId,
    pub from: PortRef,
    pub to: PortRef,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Graph {
    pub name: String,
    #[serde(default)]
    pub description: String,
    #[serde(default)]
    pub jobs: Vec<Job>,
    #[serde(default)]
    pub connections: Vec<Connection>,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum LookupError {
    #[error("job {0} not found")]
    Job(NodeId),
    #[error("port {port} not found on job {job}")]
    Port { job: NodeId, port: NodeId },
    #[error("connection {0} not found")]
    Connection(NodeId),
}

impl Graph {
    pub fn new(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            ..Default::default()
        }
    }

    pub fn job(&self, id: NodeId) -> Option<&Job> {
        self.jobs.iter().find(|j| j.id == id)
    }

    pub fn job_mut(&mut self, id: NodeId) -> Option<&mut Job> {
        self.jobs.iter_mut().find(|j| j.id == id)
    }

    pub fn job_named(&self, name: &str) -> Option<&Job> {
        self.jobs.iter().find(|j| j.name == name)
    }

    pub fn connection(&self, id: NodeId) -> Option<&Connection> {
        self.connections.iter().find(|c| c.id == id)
    }

    pub fn resolve_port(&self, job: NodeId, port: NodeId) -> Result<&Port, LookupError> {
        self.job(job)
            .ok_or(LookupError::Job(job))?
            .port(port)
            .ok_or(LookupError::Port { job, port })
    }

    pub fn resolve(&self, at: PortRef) -> Result<&Port, LookupError> {
        self.resolve_port(at.job, at.port)
    }

    /// Connection feeding the given input port, if any.
    pub fn incoming(&self, at: PortRef) -> Option<&Connection> {
        self.connections.iter().find(|c| c.to == at)
    }

    pub fn is_connected(&self, at: PortRef) -> bool {
        self.connections.iter().any(|c| c.to == at || c.from == at)
    }

    /// Job-level dependency relation: one `(producer, consumer)` pair per
    /// connection, duplicates collapsed.
    pub fn dependency_edges(&self) -> Result<BTreeSet<(NodeId, NodeId)>, DanglingConnection> {
        let mut edges = BTreeSet::new();
        for c in &self.connections {
            if self.resolve(c.from).is_err() || self.resolve(c.to).is_err() {
                return Err(DanglingConnection(c.id));
            }
            edges.insert((c.from.job, c.to.job));
        }
        Ok(edges)
    }

    /// Largest id used by any job, port or connection.
    pub fn max_id(&self) -> Option<NodeId> {
        let jobs = self
            .jobs
            .iter()
            .flat_map(|j| std::iter::once(j.id).chain(j.ports.iter().map(|p| p.id)));
        jobs.chain(self.connections.iter().map(|c| c.id)).max()
    }

    /// Sorts jobs by name, ports by seq and connections by endpoints. Ties
    /// fall back to id so the order is total even for invalid graphs.
    pub fn canonicalize(&mut self) {
        for job in &mut self.jobs {
            job.ports.sort_by_key(|p| (p.seq, p.id));
        }
        self.jobs.sort_by(|a, b| a.name.cmp(&b.name).then(a.id.cmp(&b.id)));
        self.connections.sort_by_key(|c| (c.from, c.to, c.id));
    }

    pub fn is_canonical(&self) -> bool {
        let mut copy = self.clone();
        copy.canonicalize();
        copy == *self
    }

    /// Checks field-level constraints: name charset and lengths, id
    /// uniqueness, binding/kind agreement and config contents. Structural
    /// rules (uniqueness, direction, cycles) belong to validation.
    pub fn check_fields(&self) -> Result<(), FieldError> {
        check_name("graph name", &self.name)?;
        check_text("graph description", &self.description, usize::MAX)?;
        let mut ids = HashSet::new();
        let mut claim = |id: NodeId| {
            if id.0 == 0 || !ids.insert(id) {
                Err(FieldError::BadId(id))
            } else {
                Ok(())
            }
        };
        for job in &self.jobs {
            claim(job.id)?;
            check_name("job name", &job.name)?;
            check_text("job description", &job.description, MAX_DESCRIPTION_LEN)?;
            for port in &job.ports {
                claim(port.id)?;
                check_name("port name", &port.name)?;
                if let Some(b) = &port.binding {
                    check_binding(b, port.kind)?;
                }
            }
            if let Some(cfg) = &job.config {
                check_config(cfg)?;
            }
        }
        for c in &self.connections {
            claim(c.id)?;
        }
        Ok(())
    }
}

#[derive(Debug, Error, Clone, Copy, PartialEq, Eq)]
#[error("connection {0} has an endpoint that does not resolve")]
pub struct DanglingConnection(pub NodeId);

/// A field value outside what the model and wire format admit.
#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum FieldError {
    #[error("{what} {value:?} must be 1..={max} characters from [A-Za-z0-9_.-]", max = MAX_NAME_LEN)]
    BadName { what: &'static str, value: String },
    #[error("{what} is longer than {max} characters")]
    TooLong { what: &'static str, max: usize },
    #[error("{what} contains a character that cannot appear in XML")]
    IllegalChar { what: &'static str },
    #[error("id {0} is zero or used more than once")]
    BadId(NodeId),
    #[error("{0} must not be empty")]
    Empty(&'static str),
    #[error("output filename {0:?} must be 1..=255 characters with no path separators")]
    BadFilename(String),
    #[error("{binding} binding does not fit a port of kind {kind}")]
    BindingKind { binding: &'static str, kind: &'static str },
}

pub fn is_valid_name(s: &str) -> bool {
    !s.is_empty()
        && s.len() <= MAX_NAME_LEN
        && s.bytes()
            .all(|b| b.is_ascii_alphanumeric() || matches!(b, b'_' | b'.' | b'-'))
}

pub fn check_name(what: &'static str, value: &str) -> Result<(), FieldError> {
    if is_valid_name(value) {
        Ok(())
    } else {
        Err(FieldError::BadName {
            what,
            value: value.to_string(),
        })
    }
}

/// XML 1.0 admits tab, LF, CR and everything from U+0020 up, minus the
/// surrogate block (unrepresentable in `char` anyway) and U+FFFE/U+FFFF.
pub fn is_xml_char(c: char) -> bool {
    matches!(c, '\t' | '\n' | '\r') || (c >= ' ' && c != '\u{FFFE}' && c != '\u{FFFF}')
}

pub fn check_text(what: &'static str, value: &str, max: usize) -> Result<(), FieldError> {
    if value.chars().count() > max {
        return Err(FieldError::TooLong { what, max });
    }
    if !value.chars().all(is_xml_char) {
        return Err(FieldError::IllegalChar { what });
    }
    Ok(())
}

pub fn is_valid_filename(s: &str) -> bool {
    !s.is_empty()
        && s.len() <= MAX_FILENAME_LEN
        && s != "."
        && s != ".."
        && !s.contains(['/', '\\'])
        && s.chars().all(|c| is_xml_char(c) && !c.is_control())
}

pub fn check_binding(binding: &PortBinding, kind: PortKind) -> Result<(), FieldError> {
    if !binding.fits(kind) {
        let name = match binding {
            PortBinding::Channel => "channel",
            PortBinding::File { .. } => "file",
            PortBinding::Inline { .. } => "inline",
            PortBinding::Output { .. } => "output",
        };
        return Err(FieldError::BindingKind {
            binding: name,
            kind: kind.as_str(),
        });
    }
    match binding {
        PortBinding::File { path } => {
            if path.is_empty() {
                return Err(FieldError::Empty("file binding path"));
            }
            check_text("file binding path", path, usize::MAX)
        }
        PortBinding::Output { filename } if !is_valid_filename(filename) => {
            Err(FieldError::BadFilename(filename.clone()))
        }
        _ => Ok(()),
    }
}

pub fn check_config(cfg: &JobConfig) -> Result<(), FieldError> {
    if cfg.target.is_empty() {
        return Err(FieldError::Empty("target"));
    }
    check_text("executable", &cfg.executable, usize::MAX)?;
    check_text("arguments", &cfg.arguments, usize::MAX)?;
    check_text("target", &cfg.target, usize::MAX)
}

/// A graph together with the execution configuration carried on its jobs
/// and ports, plus the name of the graph it was promoted from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConcreteWorkflow {
    pub name: String,
    pub graph_name: String,
    pub graph: Graph,
    pub created_at: DateTime<Utc>,
    pub modified_at: DateTime<Utc>,
}

impl ConcreteWorkflow {
    /// An empty workflow whose graph shares its name.
    pub fn empty(name: impl Into<String>) -> Self {
        let name = name.into();
        Self::promote(Graph::new(name.clone()), name)
    }

    /// Promotes an abstract graph into a workflow named `name`.
    pub fn promote(graph: Graph, name: impl Into<String>) -> Self {
        let now = now();
        Self {
            name: name.into(),
            graph_name: graph.name.clone(),
            graph,
            created_at: now,
            modified_at: now,
        }
    }

    /// The same workflow with both timestamps set to the Unix epoch.
    pub fn without_timestamps(&self) -> Self {
        let mut w = self.clone();
        w.created_at = DateTime::UNIX_EPOCH;
        w.modified_at = DateTime::UNIX_EPOCH;
        w
    }

    /// Copy of the graph with all configuration and bindings removed.
    pub fn abstract_graph(&self) -> Graph {
        let mut g = self.graph.clone();
        for job in &mut g.jobs {
            job.config = None;
            for port in &mut job.ports {
                port.binding = None;
            }
        }
        g
    }

    pub fn check_fields(&self) -> Result<(), FieldError> {
        check_name("workflow name", &self.name)?;
        check_name("graph name", &self.graph_name)?;
        self.graph.check_fields()
    }
}

/// Current time truncated to whole seconds, the resolution of the wire format.
pub fn now() -> DateTime<Utc> {
    Utc::now().trunc_subsecs(0)
}

mod base64_bytes {
    use base64::engine::general_purpose::STANDARD;
    use base64::Engine;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(bytes: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&STANDARD.encode(bytes))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        let text = String::deserialize(d)?;
        STANDARD.decode(text).map_err(serde::de::Error::custom)
    }
}
