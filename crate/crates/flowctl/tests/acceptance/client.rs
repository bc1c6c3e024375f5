//! A headless stand-in for the editor canvas. It keeps its own copy of the
//! workflow, applies acknowledged changes using the ids and cascades the
//! server reports, and hashes its own canonical rendering of the state.
//! None of this goes through the server's session or wire code.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use flowgate::model::{
    ConcreteWorkflow, Connection, ExecutableType, Graph, Job, JobConfig, NodeId, Port, PortBinding, PortKind, PortRef,
    Position,
};
use flowgate::session::{Change, ChangeAck};
use sha2::{Digest, Sha256};

#[derive(Clone)]
struct CPort {
    name: String,
    seq: u32,
    kind: PortKind,
    binding: Option<PortBinding>,
}

#[derive(Clone)]
struct CJob {
    name: String,
    description: String,
    x: u32,
    y: u32,
    ports: BTreeMap<u64, CPort>,
    config: Option<JobConfig>,
}

#[derive(Clone)]
pub struct Canvas {
    name: String,
    graph_name: String,
    description: String,
    jobs: BTreeMap<u64, CJob>,
    connections: BTreeMap<u64, (PortRef, PortRef)>,
}

impl Canvas {
    pub fn from_state(w: &ConcreteWorkflow) -> Self {
        let jobs = w
            .graph
            .jobs
            .iter()
            .map(|j| {
                let ports = j
                    .ports
                    .iter()
                    .map(|p| {
                        let port = CPort {
                            name: p.name.clone(),
                            seq: p.seq,
                            kind: p.kind,
                            binding: p.binding.clone(),
                        };
                        (p.id.0, port)
                    })
                    .collect();
                let job = CJob {
                    name: j.name.clone(),
                    description: j.description.clone(),
                    x: j.position.x,
                    y: j.position.y,
                    ports,
                    config: j.config.clone(),
                };
                (j.id.0, job)
            })
            .collect();
        Canvas {
            name: w.name.clone(),
            graph_name: w.graph_name.clone(),
            description: w.graph.description.clone(),
            jobs,
            connections: w.graph.connections.iter().map(|c| (c.id.0, (c.from, c.to))).collect(),
        }
    }

    /// The canvas as a model value, for generating the next gesture.
    pub fn to_workflow(&self) -> ConcreteWorkflow {
        let jobs = self
            .jobs
            .iter()
            .map(|(&id, j)| Job {
                id: NodeId(id),
                name: j.name.clone(),
                description: j.description.clone(),
                position: Position::new(j.x, j.y),
                ports: j
                    .ports
                    .iter()
                    .map(|(&pid, p)| Port {
                        id: NodeId(pid),
                        name: p.name.clone(),
                        seq: p.seq,
                        kind: p.kind,
                        binding: p.binding.clone(),
                    })
                    .collect(),
                config: j.config.clone(),
            })
            .collect();
        let connections = self
            .connections
            .iter()
            .map(|(&id, &(from, to))| Connection {
                id: NodeId(id),
                from,
                to,
            })
            .collect();
        let mut w = ConcreteWorkflow::empty(self.name.clone());
        w.graph_name = self.graph_name.clone();
        w.graph = Graph {
            name: self.graph_name.clone(),
            description: self.description.clone(),
            jobs,
            connections,
        };
        w
    }

    fn job(&mut self, id: NodeId) -> Result<&mut CJob, String> {
        self.jobs.get_mut(&id.0).ok_or(format!("client has no job {id}"))
    }

    fn port(&mut self, job: NodeId, port: NodeId) -> Result<&mut CPort, String> {
        self.job(job)?
            .ports
            .get_mut(&port.0)
            .ok_or(format!("client has no port {port}"))
    }

    fn drop_connections(&mut self, touches: impl Fn(&PortRef) -> bool) -> Vec<u64> {
        let gone: Vec<u64> = self
            .connections
            .iter()
            .filter(|(_, (from, to))| touches(from) || touches(to))
            .map(|(&id, _)| id)
            .collect();
        for id in &gone {
            self.connections.remove(id);
        }
        gone
    }

    /// Mirrors an acknowledged change. Fails if the acknowledgment
    /// disagrees with what the client expects to happen.
    pub fn apply(&mut self, change: &Change, ack: &ChangeAck) -> Result<(), String> {
        let allocated = || {
            ack.allocated
                .map(|id| id.0)
                .ok_or("ack carries no allocated id".to_string())
        };
        let mut removed: Vec<u64> = Vec::new();
        match change {
            Change::AddJob {
                name,
                description,
                x,
                y,
            } => {
                let job = CJob {
                    name: name.clone(),
                    description: description.clone(),
                    x: *x,
                    y: *y,
                    ports: BTreeMap::new(),
                    config: None,
                };
                self.jobs.insert(allocated()?, job);
            }
            Change::RemoveJob { job } => {
                let gone = self.jobs.remove(&job.0).ok_or("client has no such job")?;
                removed.extend(gone.ports.keys());
                removed.extend(self.drop_connections(|r| r.job == *job));
            }
            Change::MoveJob { job, x, y } => {
                let j = self.job(*job)?;
                (j.x, j.y) = (*x, *y);
            }
            Change::RenameJob { job, name } => self.job(*job)?.name = name.clone(),
            Change::SetJobDescription { job, description } => self.job(*job)?.description = description.clone(),
            Change::AddPort { job, name, seq, kind } => {
                let id = allocated()?;
                let port = CPort {
                    name: name.clone(),
                    seq: *seq,
                    kind: *kind,
                    binding: None,
                };
                self.job(*job)?.ports.insert(id, port);
            }
            Change::RemovePort { job, port } => {
                self.job(*job)?.ports.remove(&port.0).ok_or("client has no such port")?;
                let at = PortRef::new(*job, *port);
                removed.extend(self.drop_connections(|r| *r == at));
            }
            Change::ChangePortConfig {
                job,
                port,
                name,
                seq,
                binding,
            } => {
                let p = self.port(*job, *port)?;
                if let Some(name) = name {
                    p.name = name.clone();
                }
                if let Some(seq) = seq {
                    p.seq = *seq;
                }
                if let Some(binding) = binding {
                    p.binding = Some(binding.clone());
                }
            }
            Change::AddConnection { from, to } => {
                self.connections.insert(allocated()?, (*from, *to));
            }
            Change::RemoveConnection { connection } => {
                self.connections
                    .remove(&connection.0)
                    .ok_or("client has no such connection")?;
            }
            Change::SetJobConfig { job, config } => self.job(*job)?.config = config.clone(),
            Change::SetPortBinding { job, port, binding } => self.port(*job, *port)?.binding = binding.clone(),
            Change::RenameWorkflow { name, graph } => {
                if let Some(name) = name {
                    self.name = name.clone();
                }
                if let Some(graph) = graph {
                    self.graph_name = graph.clone();
                }
            }
        }
        let expected: BTreeSet<u64> = removed.into_iter().collect();
        let reported: BTreeSet<u64> = ack.cascaded_removals.iter().map(|id| id.0).collect();
        if expected != reported {
            return Err(format!("cascade mismatch: client {expected:?}, server {reported:?}"));
        }
        Ok(())
    }

    /// sha256 over the client's own canonical rendering, timestamps at the
    /// epoch.
    pub fn digest(&self) -> String {
        let doc = self.render();
        Sha256::digest(doc.as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    fn render(&self) -> String {
        const EPOCH: &str = "1970-01-01T00:00:00Z";
        let mut jobs: Vec<(&u64, &CJob)> = self.jobs.iter().collect();
        jobs.sort_by(|a, b| a.1.name.as_bytes().cmp(b.1.name.as_bytes()).then(a.0.cmp(b.0)));
        let ports = |j: &CJob| {
            let mut ps: Vec<(u64, CPort)> = j.ports.iter().map(|(&id, p)| (id, p.clone())).collect();
            ps.sort_by_key(|(id, p)| (p.seq, *id));
            ps
        };
        let mut conns: Vec<(u64, PortRef, PortRef)> =
            self.connections.iter().map(|(&id, &(f, t))| (id, f, t)).collect();
        conns.sort_by_key(|&(id, f, t)| (f.job.0, f.port.0, t.job.0, t.port.0, id));

        let mut s = String::from("<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n");
        let _ = writeln!(
            s,
            "<workflow fmt=\"1\" name=\"{}\" graph=\"{}\" created=\"{EPOCH}\" modified=\"{EPOCH}\">",
            attr(&self.name),
            attr(&self.graph_name)
        );
        let graph_open = format!(
            "  <graph name=\"{}\" description=\"{}\"",
            attr(&self.graph_name),
            attr(&self.description)
        );
        if jobs.is_empty() && conns.is_empty() {
            let _ = writeln!(s, "{graph_open}/>");
        } else {
            let _ = writeln!(s, "{graph_open}>");
            for (id, j) in &jobs {
                let _ = write!(
                    s,
                    "    <job id=\"{id}\" name=\"{}\" description=\"{}\" x=\"{}\" y=\"{}\"",
                    attr(&j.name),
                    attr(&j.description),
                    j.x,
                    j.y
                );
                let ps = ports(j);
                if ps.is_empty() {
                    s.push_str("/>\n");
                    continue;
                }
                s.push_str(">\n");
                for (pid, p) in ps {
                    let kind = if p.kind == PortKind::Input { "input" } else { "output" };
                    let _ = writeln!(
                        s,
                        "      <port id=\"{pid}\" name=\"{}\" seq=\"{}\" kind=\"{kind}\"/>",
                        attr(&p.name),
                        p.seq
                    );
                }
                s.push_str("    </job>\n");
            }
            for (id, f, t) in &conns {
                let _ = writeln!(
                    s,
                    "    <connection id=\"{id}\" fromJob=\"{}\" fromPort=\"{}\" toJob=\"{}\" toPort=\"{}\"/>",
                    f.job, f.port, t.job, t.port
                );
            }
            s.push_str("  </graph>\n");
        }

        let any_config = jobs
            .iter()
            .any(|(_, j)| j.config.is_some() || j.ports.values().any(|p| p.binding.is_some()));
        if any_config {
            s.push_str("  <config>\n");
            for (id, j) in &jobs {
                let Some(cfg) = &j.config else { continue };
                let (ty, encoding, exec) = match cfg.executable_type {
                    ExecutableType::Binary => ("binary", "text", text(&cfg.executable)),
                    ExecutableType::Script => ("script", "base64", B64.encode(cfg.executable.as_bytes())),
                };
                let _ = writeln!(
                    s,
                    "    <jobconfig job=\"{id}\" type=\"{ty}\" target=\"{}\">",
                    attr(&cfg.target)
                );
                let _ = writeln!(s, "      <exec encoding=\"{encoding}\">{exec}</exec>");
                let _ = writeln!(s, "      <args>{}</args>", text(&cfg.arguments));
                s.push_str("    </jobconfig>\n");
            }
            for (id, j) in &jobs {
                for (pid, p) in ports(j) {
                    let Some(b) = &p.binding else { continue };
                    let (source, value) = match b {
                        PortBinding::Channel => ("channel", String::new()),
                        PortBinding::File { path } => ("file", path.clone()),
                        PortBinding::Inline { content } => ("inline", B64.encode(content)),
                        PortBinding::Output { filename } => ("file", filename.clone()),
                    };
                    let _ = writeln!(
                        s,
                        "    <binding job=\"{id}\" port=\"{pid}\" source=\"{source}\" value=\"{}\"/>",
                        attr(&value)
                    );
                }
            }
            s.push_str("  </config>\n");
        }
        s.push_str("</workflow>\n");
        s
    }
}

fn attr(v: &str) -> String {
    v.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
        .replace('\t', "&#9;")
        .replace('\n', "&#10;")
        .replace('\r', "&#13;")
}

fn text(v: &str) -> String {
    v.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('\r', "&#13;")
}
