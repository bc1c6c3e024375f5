//! Rule engine for structural correctness and submission readiness.
//!
//! Structural rules (`R*`) describe what any well-formed graph must satisfy.
//! Concrete rules (`C*`) describe what a workflow needs before it can run.
//! Warnings (`W*`) never block saving or submission.

use std::collections::{HashMap, HashSet, VecDeque};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::model::{is_valid_filename, ConcreteWorkflow, Connection, Graph, NodeId, PortBinding, PortKind, PortRef};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Rule {
    /// Port name and seq unique within a job.
    R1,
    /// Connections run from an output port to an input port.
    R2,
    /// At most one connection per input port.
    R3,
    /// Job-level dependencies are acyclic.
    R4,
    /// Connection endpoints resolve.
    R5,
    /// No duplicate (from, to) pair.
    R6,
    /// Job names unique within the graph.
    R7,
    /// Job has an executable.
    C1,
    /// Unconnected input port has a data binding.
    C2,
    /// Input binding agrees with whether the port is connected.
    C3,
    /// Output port names the file it produces.
    C4,
    /// Graph has no jobs.
    W1,
    /// Job is not connected to anything.
    W2,
}

impl Rule {
    pub const ALL: [Rule; 13] = [
        Rule::R1,
        Rule::R2,
        Rule::R3,
        Rule::R4,
        Rule::R5,
        Rule::R6,
        Rule::R7,
        Rule::C1,
        Rule::C2,
        Rule::C3,
        Rule::C4,
        Rule::W1,
        Rule::W2,
    ];

    pub fn severity(self) -> Severity {
        match self {
            Rule::W1 | Rule::W2 => Severity::Warning,
            _ => Severity::Error,
        }
    }

    pub fn title(self) -> &'static str {
        match self {
            Rule::R1 => "PortUniqueness",
            Rule::R2 => "Direction",
            Rule::R3 => "InputFanIn",
            Rule::R4 => "Acyclic",
            Rule::R5 => "Dangling",
            Rule::R6 => "DuplicateEdge",
            Rule::R7 => "JobNameUnique",
            Rule::C1 => "ExecMissing",
            Rule::C2 => "InputUnbound",
            Rule::C3 => "ChannelMismatch",
            Rule::C4 => "OutputFilenameMissing",
            Rule::W1 => "EmptyGraph",
            Rule::W2 => "IsolatedJob",
        }
    }
}

impl fmt::Display for Rule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

impl FromStr for Rule {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Rule::ALL
            .into_iter()
            .find(|r| r.to_string() == s)
            .ok_or_else(|| format!("unknown rule {s:?}"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Severity {
    Error,
    Warning,
}

impl fmt::Display for Severity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Severity::Error => "ERROR",
            Severity::Warning => "WARNING",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Finding {
    pub rule: Rule,
    pub severity: Severity,
    pub target: String,
    pub message: String,
}

impl Finding {
    pub fn new(rule: Rule, target: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            rule,
            severity: rule.severity(),
            target: target.into(),
            message: message.into(),
        }
    }

    pub fn is_error(&self) -> bool {
        self.severity == Severity::Error
    }
}

/// `SEVERITY RULE target message`
impl fmt::Display for Finding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {} {} {}", self.severity, self.rule, self.target, self.message)
    }
}

pub fn has_errors(findings: &[Finding]) -> bool {
    findings.iter().any(Finding::is_error)
}

fn job_target(name: &str) -> String {
    format!("job:{name}")
}

fn port_target(job: &str, port: &str) -> String {
    format!("job:{job}/port:{port}")
}

fn connection_target(id: NodeId) -> String {
    format!("connection:{id}")
}

fn endpoint_label(graph: &Graph, at: PortRef) -> String {
    match graph.job(at.job) {
        Some(job) => match job.port(at.port) {
            Some(port) => format!("{}.{}", job.name, port.name),
            None => format!("{}.#{}", job.name, at.port),
        },
        None => format!("#{}.#{}", at.job, at.port),
    }
}

/// Runs R5, R2, R3, R6, R4 in that order against `existing`, returning the
/// first rule the proposed connection would break.
fn first_violation(graph: &Graph, existing: &[&Connection], from: PortRef, to: PortRef) -> Option<(Rule, String)> {
    let (src, dst) = match (graph.resolve(from), graph.resolve(to)) {
        (Ok(s), Ok(d)) => (s, d),
        (Err(e), _) | (_, Err(e)) => return Some((Rule::R5, e.to_string())),
    };
    if src.kind != PortKind::Output || dst.kind != PortKind::Input {
        return Some((
            Rule::R2,
            format!(
                "connections must run from an output port to an input port, not {} to {}",
                src.kind.as_str(),
                dst.kind.as_str()
            ),
        ));
    }
    if existing.iter().any(|c| c.to == to && c.from != from) {
        return Some((
            Rule::R3,
            format!(
                "input port {} already has an incoming connection",
                endpoint_label(graph, to)
            ),
        ));
    }
    if existing.iter().any(|c| c.to == to && c.from == from) {
        return Some((
            Rule::R6,
            format!(
                "{} is already connected to {}",
                endpoint_label(graph, from),
                endpoint_label(graph, to)
            ),
        ));
    }
    if from.job == to.job || reaches(existing, to.job, from.job) {
        return Some((
            Rule::R4,
            format!(
                "connecting {} to {} would create a dependency cycle",
                endpoint_label(graph, from),
                endpoint_label(graph, to)
            ),
        ));
    }
    None
}

/// Whether `target` is reachable from `start` along job-level edges.
fn reaches(edges: &[&Connection], start: NodeId, target: NodeId) -> bool {
    let mut adjacency: HashMap<NodeId, Vec<NodeId>> = HashMap::new();
    for c in edges {
        adjacency.entry(c.from.job).or_default().push(c.to.job);
    }
    let mut seen = HashSet::from([start]);
    let mut queue = VecDeque::from([start]);
    while let Some(node) = queue.pop_front() {
        if node == target {
            return true;
        }
        for &next in adjacency.get(&node).into_iter().flatten() {
            if seen.insert(next) {
                queue.push_back(next);
            }
        }
    }
    false
}

/// Vets a proposed connection against the graph without modifying it.
pub fn check_connection(graph: &Graph, from: PortRef, to: PortRef) -> Result<(), Finding> {
    let existing: Vec<&Connection> = graph.connections.iter().collect();
    match first_violation(graph, &existing, from, to) {
        None => Ok(()),
        Some((rule, message)) => {
            let target = format!(
                "connection:{}->{}",
                endpoint_label(graph, from),
                endpoint_label(graph, to)
            );
            Err(Finding::new(rule, target, message))
        }
    }
}

fn sort_findings(findings: &mut [Finding]) {
    findings.sort_by(|a, b| (a.rule, &a.target, &a.message).cmp(&(b.rule, &b.target, &b.message)));
}

/// All structural findings, ordered by (rule, target).
///
/// Connections are replayed in ascending id order, each checked against the
/// connections accepted before it, so a graph built by edits reports the
/// same connection that an edit-time check would have refused.
pub fn validate_structure(graph: &Graph) -> Vec<Finding> {
    let mut findings = Vec::new();

    let mut jobs: Vec<_> = graph.jobs.iter().collect();
    jobs.sort_by_key(|j| j.id);
    let mut job_names = HashSet::new();
    for job in &jobs {
        if !job_names.insert(job.name.as_str()) {
            findings.push(Finding::new(
                Rule::R7,
                job_target(&job.name),
                format!("job name {} is used by more than one job", job.name),
            ));
        }
        let mut ports: Vec<_> = job.ports.iter().collect();
        ports.sort_by_key(|p| p.id);
        let mut names = HashSet::new();
        let mut seqs = HashSet::new();
        for port in ports {
            let fresh_name = names.insert(port.name.as_str());
            let fresh_seq = seqs.insert(port.seq);
            let message = match (fresh_name, fresh_seq) {
                (true, true) => continue,
                (false, true) => format!("port name {} is already used on job {}", port.name, job.name),
                (true, false) => format!("sequence number {} is already used on job {}", port.seq, job.name),
                (false, false) => format!(
                    "port name {} and sequence number {} are already used on job {}",
                    port.name, port.seq, job.name
                ),
            };
            findings.push(Finding::new(Rule::R1, port_target(&job.name, &port.name), message));
        }
    }

    let mut connections: Vec<&Connection> = graph.connections.iter().collect();
    connections.sort_by_key(|c| c.id);
    let mut accepted: Vec<&Connection> = Vec::with_capacity(connections.len());
    for c in connections {
        match first_violation(graph, &accepted, c.from, c.to) {
            Some((rule, message)) => findings.push(Finding::new(rule, connection_target(c.id), message)),
            None => accepted.push(c),
        }
    }

    if graph.jobs.is_empty() {
        findings.push(Finding::new(
            Rule::W1,
            format!("graph:{}", graph.name),
            "graph contains no jobs",
        ));
    } else if graph.jobs.len() > 1 {
        for job in &jobs {
            let touched = graph
                .connections
                .iter()
                .any(|c| c.from.job == job.id || c.to.job == job.id);
            if !touched {
                findings.push(Finding::new(
                    Rule::W2,
                    job_target(&job.name),
                    format!("job {} has no connections", job.name),
                ));
            }
        }
    }

    sort_findings(&mut findings);
    findings
}

/// Structural findings plus submission-readiness checks.
pub fn validate_concrete(w: &ConcreteWorkflow) -> Vec<Finding> {
    let graph = &w.graph;
    let mut findings = validate_structure(graph);
    for job in &graph.jobs {
        match &job.config {
            None => findings.push(Finding::new(
                Rule::C1,
                job_target(&job.name),
                format!("job {} has no execution configuration", job.name),
            )),
            Some(cfg) if cfg.executable.trim().is_empty() => findings.push(Finding::new(
                Rule::C1,
                job_target(&job.name),
                format!("job {} has an empty executable", job.name),
            )),
            Some(_) => {}
        }
        for port in &job.ports {
            let target = port_target(&job.name, &port.name);
            let at = PortRef::new(job.id, port.id);
            match port.kind {
                PortKind::Input => {
                    let connected = graph.incoming(at).is_some();
                    let finding = match (connected, &port.binding) {
                        (true, None | Some(PortBinding::Channel)) => None,
                        (false, Some(PortBinding::File { .. } | PortBinding::Inline { .. })) => None,
                        (false, None) => Some((Rule::C2, "unconnected input port has no data binding".to_string())),
                        (true, Some(b)) => Some((
                            Rule::C3,
                            format!("connected input port must be fed by its channel, not {b:?}"),
                        )),
                        (false, Some(PortBinding::Channel)) => {
                            Some((Rule::C3, "channel binding on an unconnected input port".to_string()))
                        }
                        (false, Some(b)) => Some((Rule::C3, format!("{b:?} binding does not fit an input port"))),
                    };
                    if let Some((rule, message)) = finding {
                        findings.push(Finding::new(rule, target, message));
                    }
                }
                PortKind::Output => match &port.binding {
                    Some(PortBinding::Output { filename }) if is_valid_filename(filename) => {}
                    _ => findings.push(Finding::new(Rule::C4, target, "output port has no output filename")),
                },
            }
        }
    }
    sort_findings(&mut findings);
    findings
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Structural rules only.
    Graph,
    /// Structural and submission-readiness rules.
    #[default]
    Workflow,
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "graph" => Ok(Mode::Graph),
            "workflow" => Ok(Mode::Workflow),
            _ => Err(format!("unknown validation mode {s:?}, expected graph or workflow")),
        }
    }
}

pub fn validate(w: &ConcreteWorkflow, mode: Mode) -> Vec<Finding> {
    match mode {
        Mode::Graph => validate_structure(&w.graph),
        Mode::Workflow => validate_concrete(w),
    }
}
