//! XML interchange format for graphs and concrete workflows.
//!
//! ```text
//! <workflow fmt="1" name=".." graph=".." created=".." modified="..">
//!   <graph name=".." description="..">
//!     <job id=".." name=".." description=".." x=".." y="..">
//!       <port id=".." name=".." seq=".." kind="input|output"/>*
//!     </job>*
//!     <connection id=".." fromJob=".." fromPort=".." toJob=".." toPort=".."/>*
//!   </graph>
//!   <config>?
//!     <jobconfig job=".." type="binary|script" target="..">
//!       <exec encoding="text|base64">..</exec>
//!       <args>..</args>
//!     </jobconfig>*
//!     <binding job=".." port=".." source="channel|file|inline" value=".."/>*
//!   </config>
//! </workflow>
//! ```
//!
//! Serialization is canonical: jobs by name, ports by seq, connections by
//! endpoint ids, two-space indent, LF line endings. Elements without
//! children are written self-closing. `created`/`modified` are optional on
//! input; documents without `<config>` load as unconfigured workflows.
//! Script executables and inline bindings travel as base64. On an output
//! port, `source="file"` carries the produced filename.

use std::collections::HashMap;
use std::fmt;

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use chrono::{DateTime, NaiveDateTime, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::model::{
    ConcreteWorkflow, Connection, ExecutableType, FieldError, Graph, Job, JobConfig, NodeId, Port, PortBinding,
    PortKind, PortRef, Position,
};
use crate::validation::{validate_structure, Finding};
use crate::xml::{parse_document, Element, XmlWriter};

pub const FORMAT_VERSION: &str = "1";
const TIMESTAMP_FORMAT: &str = "%Y-%m-%dT%H:%M:%SZ";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum WireError {
    #[error("malformed XML: {0}")]
    MalformedXml(String),
    #[error("schema violation at {path}: {message}")]
    SchemaViolation { path: String, message: String },
    #[error("invariant violation {} at {}: {}", .0.rule, .0.target, .0.message)]
    InvariantViolation(Finding),
}

impl WireError {
    fn schema(path: impl Into<String>, message: impl Into<String>) -> Self {
        WireError::SchemaViolation {
            path: path.into(),
            message: message.into(),
        }
    }
}

impl From<FieldError> for WireError {
    fn from(e: FieldError) -> Self {
        WireError::schema("/workflow", e.to_string())
    }
}

/// SHA-256 of a workflow's canonical serialization, timestamps zeroed.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct StateDigest(String);

impl StateDigest {
    pub(crate) fn from_raw(hex: String) -> Self {
        StateDigest(hex)
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for StateDigest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

fn format_time(t: &DateTime<Utc>) -> String {
    t.format(TIMESTAMP_FORMAT).to_string()
}

fn check_serializable(w: &ConcreteWorkflow) -> Result<(), WireError> {
    w.check_fields()?;
    if let Some(f) = validate_structure(&w.graph).into_iter().find(Finding::is_error) {
        return Err(WireError::InvariantViolation(f));
    }
    Ok(())
}

/// Canonical XML for a valid workflow.
pub fn serialize(w: &ConcreteWorkflow) -> Result<Vec<u8>, WireError> {
    check_serializable(w)?;
    Ok(write_unchecked(w).into_bytes())
}

fn write_unchecked(w: &ConcreteWorkflow) -> String {
    let mut graph = w.graph.clone();
    graph.canonicalize();

    let mut x = XmlWriter::new();
    let created = format_time(&w.created_at);
    let modified = format_time(&w.modified_at);
    x.start(
        "workflow",
        &[
            ("fmt", FORMAT_VERSION),
            ("name", &w.name),
            ("graph", &w.graph_name),
            ("created", &created),
            ("modified", &modified),
        ],
    );

    let graph_attrs = [
        ("name", graph.name.as_str()),
        ("description", graph.description.as_str()),
    ];
    if graph.jobs.is_empty() && graph.connections.is_empty() {
        x.empty("graph", &graph_attrs);
    } else {
        x.start("graph", &graph_attrs);
        for job in &graph.jobs {
            let id = job.id.to_string();
            let px = job.position.x.to_string();
            let py = job.position.y.to_string();
            let attrs = [
                ("id", id.as_str()),
                ("name", job.name.as_str()),
                ("description", job.description.as_str()),
                ("x", px.as_str()),
                ("y", py.as_str()),
            ];
            if job.ports.is_empty() {
                x.empty("job", &attrs);
                continue;
            }
            x.start("job", &attrs);
            for port in &job.ports {
                let id = port.id.to_string();
                let seq = port.seq.to_string();
                x.empty(
                    "port",
                    &[
                        ("id", &id),
                        ("name", &port.name),
                        ("seq", &seq),
                        ("kind", port.kind.as_str()),
                    ],
                );
            }
            x.end("job");
        }
        for c in &graph.connections {
            let ids = [c.id, c.from.job, c.from.port, c.to.job, c.to.port].map(|i| i.to_string());
            x.empty(
                "connection",
                &[
                    ("id", &ids[0]),
                    ("fromJob", &ids[1]),
                    ("fromPort", &ids[2]),
                    ("toJob", &ids[3]),
                    ("toPort", &ids[4]),
                ],
            );
        }
        x.end("graph");
    }

    let has_config = graph
        .jobs
        .iter()
        .any(|j| j.config.is_some() || j.ports.iter().any(|p| p.binding.is_some()));
    if has_config {
        x.start("config", &[]);
        for job in &graph.jobs {
            let Some(cfg) = &job.config else { continue };
            let id = job.id.to_string();
            x.start(
                "jobconfig",
                &[
                    ("job", &id),
                    ("type", cfg.executable_type.as_str()),
                    ("target", &cfg.target),
                ],
            );
            match cfg.executable_type {
                ExecutableType::Binary => x.text_element("exec", &[("encoding", "text")], &cfg.executable),
                ExecutableType::Script => x.text_element(
                    "exec",
                    &[("encoding", "base64")],
                    &BASE64.encode(cfg.executable.as_bytes()),
                ),
            }
            x.text_element("args", &[], &cfg.arguments);
            x.end("jobconfig");
        }
        for job in &graph.jobs {
            for port in &job.ports {
                let Some(binding) = &port.binding else { continue };
                let (source, value) = match binding {
                    PortBinding::Channel => ("channel", String::new()),
                    PortBinding::File { path } => ("file", path.clone()),
                    PortBinding::Inline { content } => ("inline", BASE64.encode(content)),
                    PortBinding::Output { filename } => ("file", filename.clone()),
                };
                let job_id = job.id.to_string();
                let port_id = port.id.to_string();
                x.empty(
                    "binding",
                    &[
                        ("job", &job_id),
                        ("port", &port_id),
                        ("source", source),
                        ("value", &value),
                    ],
                );
            }
        }
        x.end("config");
    }
    x.end("workflow");
    x.finish()
}

/// Decodes a document with schema and field checks only. Structural rule
/// violations (duplicate ports, cycles, ...) are left in place so that a
/// validator can report them.
pub fn decode(bytes: &[u8]) -> Result<ConcreteWorkflow, WireError> {
    let root = parse_document(bytes).map_err(WireError::MalformedXml)?;
    let w = Decoder::default().workflow(&root)?;
    w.check_fields()?;
    Ok(w)
}

/// Decodes a document and rejects any structural rule violation.
pub fn parse(bytes: &[u8]) -> Result<ConcreteWorkflow, WireError> {
    let w = decode(bytes)?;
    if let Some(f) = validate_structure(&w.graph).into_iter().find(Finding::is_error) {
        return Err(WireError::InvariantViolation(f));
    }
    Ok(w)
}

pub fn digest(w: &ConcreteWorkflow) -> Result<StateDigest, WireError> {
    check_serializable(w)?;
    Ok(digest_unchecked(w))
}

/// Digest without the validity gate. Only meaningful for values that would
/// pass [`serialize`].
pub(crate) fn digest_unchecked(w: &ConcreteWorkflow) -> StateDigest {
    let bytes = write_unchecked(&w.without_timestamps());
    StateDigest(hex::encode(Sha256::digest(bytes.as_bytes())))
}

/// Abstract graph as a graph-only document named after the graph.
pub fn serialize_graph(graph: &Graph) -> Result<Vec<u8>, WireError> {
    let mut w = ConcreteWorkflow::promote(graph.clone(), graph.name.clone());
    w.created_at = DateTime::UNIX_EPOCH;
    w.modified_at = DateTime::UNIX_EPOCH;
    serialize(&w)
}

pub fn parse_graph(bytes: &[u8]) -> Result<Graph, WireError> {
    parse(bytes).map(|w| w.graph)
}

#[derive(Default)]
struct Decoder {
    // job id -> index into jobs, port id -> (job index, port index)
    jobs: HashMap<u64, usize>,
    ports: HashMap<u64, (usize, usize)>,
}

fn check_attrs(el: &Element, path: &str, allowed: &[&str]) -> Result<(), WireError> {
    for (k, _) in &el.attrs {
        if !allowed.contains(&k.as_str()) {
            return Err(WireError::schema(path, format!("unexpected attribute {k}")));
        }
    }
    Ok(())
}

fn required<'a>(el: &'a Element, path: &str, key: &str) -> Result<&'a str, WireError> {
    el.attr(key)
        .ok_or_else(|| WireError::schema(format!("{path}@{key}"), "missing attribute"))
}

fn number<T: std::str::FromStr>(el: &Element, path: &str, key: &str) -> Result<T, WireError> {
    let raw = required(el, path, key)?;
    if raw.is_empty() || !raw.bytes().all(|b| b.is_ascii_digit()) {
        return Err(WireError::schema(
            format!("{path}@{key}"),
            format!("{raw:?} is not a decimal integer"),
        ));
    }
    raw.parse()
        .map_err(|_| WireError::schema(format!("{path}@{key}"), format!("{raw:?} is out of range")))
}

fn timestamp(el: &Element, path: &str, key: &str) -> Result<DateTime<Utc>, WireError> {
    match el.attr(key) {
        None => Ok(DateTime::UNIX_EPOCH),
        Some(raw) => NaiveDateTime::parse_from_str(raw, TIMESTAMP_FORMAT)
            .map(|t| t.and_utc())
            .map_err(|e| WireError::schema(format!("{path}@{key}"), format!("{raw:?}: {e}"))),
    }
}

fn no_stray_text(el: &Element, path: &str) -> Result<(), WireError> {
    match el.stray_text() {
        Some(t) => Err(WireError::schema(path, format!("unexpected text {:?}", t.trim()))),
        None => Ok(()),
    }
}

impl Decoder {
    fn workflow(&mut self, root: &Element) -> Result<ConcreteWorkflow, WireError> {
        let path = "/workflow";
        if root.name != "workflow" {
            return Err(WireError::schema(
                format!("/{}", root.name),
                "root element must be <workflow>",
            ));
        }
        check_attrs(root, path, &["fmt", "name", "graph", "created", "modified"])?;
        let fmt = required(root, path, "fmt")?;
        if fmt != FORMAT_VERSION {
            return Err(WireError::schema(
                format!("{path}@fmt"),
                format!("unsupported format version {fmt:?}"),
            ));
        }
        no_stray_text(root, path)?;

        let mut children = root.elements();
        let graph_el = children
            .next()
            .filter(|e| e.name == "graph")
            .ok_or_else(|| WireError::schema(path, "first child must be <graph>"))?;
        let mut graph = self.graph(graph_el)?;
        match children.next() {
            None => {}
            Some(cfg) if cfg.name == "config" => self.config(cfg, &mut graph)?,
            Some(other) => {
                return Err(WireError::schema(
                    format!("{path}/{}", other.name),
                    "unexpected element",
                ))
            }
        }
        if let Some(extra) = children.next() {
            return Err(WireError::schema(
                format!("{path}/{}", extra.name),
                "unexpected element",
            ));
        }
        graph.canonicalize();

        let name = required(root, path, "name")?.to_string();
        let graph_name = root.attr("graph").unwrap_or(&graph.name).to_string();
        Ok(ConcreteWorkflow {
            name,
            graph_name,
            graph,
            created_at: timestamp(root, path, "created")?,
            modified_at: timestamp(root, path, "modified")?,
        })
    }

    fn graph(&mut self, el: &Element) -> Result<Graph, WireError> {
        let path = "/workflow/graph";
        check_attrs(el, path, &["name", "description"])?;
        no_stray_text(el, path)?;
        let mut graph = Graph {
            name: required(el, path, "name")?.to_string(),
            description: el.attr("description").unwrap_or_default().to_string(),
            jobs: Vec::new(),
            connections: Vec::new(),
        };
        for (i, child) in el.elements().enumerate() {
            match child.name.as_str() {
                "job" => {
                    let job = self.job(child, &format!("{path}/job[{i}]"), graph.jobs.len())?;
                    graph.jobs.push(job);
                }
                "connection" => graph
                    .connections
                    .push(Self::connection(child, &format!("{path}/connection[{i}]"))?),
                other => return Err(WireError::schema(format!("{path}/{other}"), "unexpected element")),
            }
        }
        Ok(graph)
    }

    fn job(&mut self, el: &Element, path: &str, index: usize) -> Result<Job, WireError> {
        check_attrs(el, path, &["id", "name", "description", "x", "y"])?;
        no_stray_text(el, path)?;
        let id: u64 = number(el, path, "id")?;
        self.jobs.insert(id, index);
        let mut ports = Vec::new();
        for (i, child) in el.elements().enumerate() {
            let ppath = format!("{path}/port[{i}]");
            if child.name != "port" {
                return Err(WireError::schema(
                    format!("{path}/{}", child.name),
                    "unexpected element",
                ));
            }
            check_attrs(child, &ppath, &["id", "name", "seq", "kind"])?;
            if child.elements().next().is_some() || child.stray_text().is_some() {
                return Err(WireError::schema(&ppath, "<port> must be empty"));
            }
            let kind = match required(child, &ppath, "kind")? {
                "input" => PortKind::Input,
                "output" => PortKind::Output,
                other => {
                    return Err(WireError::schema(
                        format!("{ppath}@kind"),
                        format!("unknown kind {other:?}"),
                    ))
                }
            };
            let port_id: u64 = number(child, &ppath, "id")?;
            self.ports.insert(port_id, (index, ports.len()));
            ports.push(Port {
                id: NodeId(port_id),
                name: required(child, &ppath, "name")?.to_string(),
                seq: number(child, &ppath, "seq")?,
                kind,
                binding: None,
            });
        }
        Ok(Job {
            id: NodeId(id),
            name: required(el, path, "name")?.to_string(),
            description: el.attr("description").unwrap_or_default().to_string(),
            position: Position::new(number(el, path, "x")?, number(el, path, "y")?),
            ports,
            config: None,
        })
    }

    fn connection(el: &Element, path: &str) -> Result<Connection, WireError> {
        check_attrs(el, path, &["id", "fromJob", "fromPort", "toJob", "toPort"])?;
        if !el.children.is_empty() && (el.elements().next().is_some() || el.stray_text().is_some()) {
            return Err(WireError::schema(path, "<connection> must be empty"));
        }
        Ok(Connection {
            id: NodeId(number(el, path, "id")?),
            from: PortRef::new(
                NodeId(number(el, path, "fromJob")?),
                NodeId(number(el, path, "fromPort")?),
            ),
            to: PortRef::new(NodeId(number(el, path, "toJob")?), NodeId(number(el, path, "toPort")?)),
        })
    }

    fn config(&self, el: &Element, graph: &mut Graph) -> Result<(), WireError> {
        let path = "/workflow/config";
        check_attrs(el, path, &[])?;
        no_stray_text(el, path)?;
        for (i, child) in el.elements().enumerate() {
            match child.name.as_str() {
                "jobconfig" => self.jobconfig(child, &format!("{path}/jobconfig[{i}]"), graph)?,
                "binding" => self.binding(child, &format!("{path}/binding[{i}]"), graph)?,
                other => return Err(WireError::schema(format!("{path}/{other}"), "unexpected element")),
            }
        }
        Ok(())
    }

    fn jobconfig(&self, el: &Element, path: &str, graph: &mut Graph) -> Result<(), WireError> {
        check_attrs(el, path, &["job", "type", "target"])?;
        no_stray_text(el, path)?;
        let job_id: u64 = number(el, path, "job")?;
        let &index = self
            .jobs
            .get(&job_id)
            .ok_or_else(|| WireError::schema(format!("{path}@job"), format!("no job with id {job_id}")))?;
        let executable_type = match required(el, path, "type")? {
            "binary" => ExecutableType::Binary,
            "script" => ExecutableType::Script,
            other => {
                return Err(WireError::schema(
                    format!("{path}@type"),
                    format!("unknown type {other:?}"),
                ))
            }
        };
        let target = required(el, path, "target")?.to_string();

        let mut children = el.elements();
        let exec = children
            .next()
            .filter(|e| e.name == "exec")
            .ok_or_else(|| WireError::schema(path, "first child must be <exec>"))?;
        let args = children
            .next()
            .filter(|e| e.name == "args")
            .ok_or_else(|| WireError::schema(path, "second child must be <args>"))?;
        if let Some(extra) = children.next() {
            return Err(WireError::schema(
                format!("{path}/{}", extra.name),
                "unexpected element",
            ));
        }

        let exec_path = format!("{path}/exec");
        check_attrs(exec, &exec_path, &["encoding"])?;
        let exec_text = exec
            .text()
            .ok_or_else(|| WireError::schema(&exec_path, "must contain text only"))?;
        let executable = match exec.attr("encoding").unwrap_or("text") {
            "text" => exec_text,
            "base64" => {
                let bytes = BASE64
                    .decode(exec_text.trim())
                    .map_err(|e| WireError::schema(&exec_path, format!("bad base64: {e}")))?;
                String::from_utf8(bytes).map_err(|e| WireError::schema(&exec_path, format!("not UTF-8: {e}")))?
            }
            other => {
                return Err(WireError::schema(
                    format!("{exec_path}@encoding"),
                    format!("unknown encoding {other:?}"),
                ))
            }
        };
        check_attrs(args, &format!("{path}/args"), &[])?;
        let arguments = args
            .text()
            .ok_or_else(|| WireError::schema(format!("{path}/args"), "must contain text only"))?;

        let job = &mut graph.jobs[index];
        if job.config.is_some() {
            return Err(WireError::schema(path, format!("job {job_id} configured twice")));
        }
        job.config = Some(JobConfig {
            executable_type,
            executable,
            arguments,
            target,
        });
        Ok(())
    }

    fn binding(&self, el: &Element, path: &str, graph: &mut Graph) -> Result<(), WireError> {
        check_attrs(el, path, &["job", "port", "source", "value"])?;
        let job_id: u64 = number(el, path, "job")?;
        let port_id: u64 = number(el, path, "port")?;
        let &(ji, pi) = self
            .ports
            .get(&port_id)
            .filter(|(ji, _)| graph.jobs[*ji].id.0 == job_id)
            .ok_or_else(|| WireError::schema(path, format!("no port {port_id} on job {job_id}")))?;
        let value = el.attr("value").unwrap_or_default();
        let port = &mut graph.jobs[ji].ports[pi];
        let binding = match (required(el, path, "source")?, port.kind) {
            ("channel", PortKind::Input) => PortBinding::Channel,
            ("file", PortKind::Input) => PortBinding::File {
                path: value.to_string(),
            },
            ("inline", PortKind::Input) => PortBinding::Inline {
                content: BASE64
                    .decode(value)
                    .map_err(|e| WireError::schema(format!("{path}@value"), format!("bad base64: {e}")))?,
            },
            ("file", PortKind::Output) => PortBinding::Output {
                filename: value.to_string(),
            },
            (other, kind) => {
                return Err(WireError::schema(
                    format!("{path}@source"),
                    format!("source {other:?} is not valid for an {} port", kind.as_str()),
                ))
            }
        };
        if port.binding.is_some() {
            return Err(WireError::schema(path, format!("port {port_id} bound twice")));
        }
        port.binding = Some(binding);
        Ok(())
    }
}
