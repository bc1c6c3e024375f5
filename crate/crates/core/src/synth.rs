//! Random workflows and edit streams for tests, benches and load generation.

use chrono::DateTime;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;

use crate::model::{
    ConcreteWorkflow, Connection, Graph, Job, JobConfig, NodeId, Port, PortBinding, PortKind, PortRef, Position,
};
use crate::session::Change;

/// Size limits for [`random_workflow`].
#[derive(Debug, Clone)]
pub struct Shape {
    pub max_jobs: usize,
    pub max_ports: usize,
    /// Chance that an eligible output/input pair gets connected.
    pub connect: f64,
    /// Chance that a job carries execution config and its ports bindings.
    pub configured: f64,
}

impl Default for Shape {
    fn default() -> Self {
        Self {
            max_jobs: 8,
            max_ports: 4,
            connect: 0.4,
            configured: 0.7,
        }
    }
}

const NAME_STEMS: &[&str] = &["ingest", "clean", "join", "A", "b.2", "x-y_z", "Report", "tr"];
const TEXT_PIECES: &[&str] = &[
    "", "plain", " ", "a&b", "<tag>", "\"q\"", "'s'", "\n", "\t", "\r\n", "é", "€", "日本", "]]>", "&amp;",
];

fn text<R: Rng>(rng: &mut R) -> String {
    let n = rng.random_range(0..4);
    (0..n).map(|_| *TEXT_PIECES.choose(rng).unwrap()).collect()
}

fn name<R: Rng>(rng: &mut R) -> String {
    format!("{}{}", NAME_STEMS.choose(rng).unwrap(), rng.random_range(0..4))
}

fn filename<R: Rng>(rng: &mut R) -> String {
    const FILES: &[&str] = &["out", "msg", "data.csv", "a b", "ü.txt", ".hidden", "..x"];
    FILES.choose(rng).unwrap().to_string()
}

fn config<R: Rng>(rng: &mut R) -> JobConfig {
    if rng.random_bool(0.5) {
        JobConfig::script(format!("echo {}\nexit 0\n", text(rng)))
    } else {
        let args = ["", "-n 3", "'a b' c", "--flag=\"x\""].choose(rng).unwrap();
        JobConfig::binary("/usr/bin/env", *args)
    }
}

fn input_binding<R: Rng>(rng: &mut R, connected: bool) -> Option<PortBinding> {
    match rng.random_range(0..5) {
        0 => None,
        1 if connected => Some(PortBinding::Channel),
        1 | 2 => Some(PortBinding::File {
            path: format!("data/{}", filename(rng)),
        }),
        3 => Some(PortBinding::Inline {
            content: (0..rng.random_range(0..16)).map(|_| rng.random()).collect(),
        }),
        _ => Some(PortBinding::Channel),
    }
}

/// A random canonical workflow that passes structural validation.
///
/// Concrete-level findings (missing config, unbound inputs) are allowed.
pub fn random_workflow<R: Rng>(rng: &mut R, shape: &Shape) -> ConcreteWorkflow {
    let n_jobs = rng.random_range(0..=shape.max_jobs);
    let n_ports: Vec<usize> = (0..n_jobs).map(|_| rng.random_range(0..=shape.max_ports)).collect();
    let total = n_jobs + n_ports.iter().sum::<usize>() + n_jobs * shape.max_ports * shape.max_ports;
    // Ids are unique but not allocated in any particular order.
    let mut ids: Vec<u64> = (1..=total as u64 * 2).collect();
    ids.shuffle(rng);
    let mut ids = ids.into_iter().map(NodeId);

    let configured: Vec<bool> = (0..n_jobs).map(|_| rng.random_bool(shape.configured)).collect();
    let mut jobs = Vec::with_capacity(n_jobs);
    for (i, &np) in n_ports.iter().enumerate() {
        let mut seqs: Vec<u32> = (0..16).collect();
        seqs.shuffle(rng);
        let ports = (0..np)
            .map(|k| {
                let kind = if rng.random_bool(0.5) {
                    PortKind::Input
                } else {
                    PortKind::Output
                };
                Port {
                    id: ids.next().unwrap(),
                    name: format!("{}{k}", if kind == PortKind::Input { "in" } else { "out" }),
                    seq: seqs[k],
                    kind,
                    binding: None,
                }
            })
            .collect();
        jobs.push(Job {
            id: ids.next().unwrap(),
            name: format!("{}_{i}", name(rng)),
            description: text(rng),
            position: Position::new(rng.random_range(0..2000), rng.random()),
            ports,
            config: configured[i].then(|| config(rng)),
        });
    }

    // Edges only run forward in a random order, so the graph stays acyclic.
    let mut order: Vec<usize> = (0..n_jobs).collect();
    order.shuffle(rng);
    let mut connections = Vec::new();
    for (a, &ja) in order.iter().enumerate() {
        for &jb in &order[a + 1..] {
            for out in jobs[ja].ports.iter().filter(|p| p.kind == PortKind::Output) {
                for inp in jobs[jb].ports.iter().filter(|p| p.kind == PortKind::Input) {
                    let to = PortRef::new(jobs[jb].id, inp.id);
                    let taken = connections.iter().any(|c: &Connection| c.to == to);
                    if !taken && rng.random_bool(shape.connect) {
                        connections.push(Connection {
                            id: ids.next().unwrap(),
                            from: PortRef::new(jobs[ja].id, out.id),
                            to,
                        });
                    }
                }
            }
        }
    }

    for (i, job) in jobs.iter_mut().enumerate() {
        if !configured[i] {
            continue;
        }
        let job_id = job.id;
        for port in &mut job.ports {
            port.binding = match port.kind {
                PortKind::Output => rng.random_bool(0.9).then(|| PortBinding::Output {
                    filename: filename(rng),
                }),
                PortKind::Input => {
                    let connected = connections.iter().any(|c| c.to == PortRef::new(job_id, port.id));
                    input_binding(rng, connected)
                }
            };
        }
    }

    let graph_name = name(rng);
    let mut graph = Graph {
        name: graph_name.clone(),
        description: text(rng),
        jobs,
        connections,
    };
    graph.canonicalize();
    let created = rng.random_range(0..4_000_000_000i64);
    let modified = created + rng.random_range(0..1_000_000);
    ConcreteWorkflow {
        name: if rng.random_bool(0.5) {
            graph_name.clone()
        } else {
            name(rng)
        },
        graph_name,
        graph,
        created_at: DateTime::from_timestamp(created, 0).unwrap(),
        modified_at: DateTime::from_timestamp(modified, 0).unwrap(),
    }
}

fn pick_job<'a, R: Rng>(rng: &mut R, w: &'a ConcreteWorkflow) -> Option<&'a Job> {
    w.graph.jobs.choose(rng)
}

fn stray_id<R: Rng>(rng: &mut R, w: &ConcreteWorkflow) -> NodeId {
    NodeId(w.graph.max_id().map_or(1, |m| m.0) + rng.random_range(1..100))
}

fn random_port<R: Rng>(rng: &mut R, w: &ConcreteWorkflow) -> Option<PortRef> {
    let job = pick_job(rng, w)?;
    let port = job.ports.choose(rng)?;
    Some(PortRef::new(job.id, port.id))
}

fn random_binding<R: Rng>(rng: &mut R) -> Option<PortBinding> {
    match rng.random_range(0..5) {
        0 => None,
        1 => Some(PortBinding::Channel),
        2 => Some(PortBinding::File { path: filename(rng) }),
        3 => Some(PortBinding::Inline {
            content: b"x\n".to_vec(),
        }),
        _ => Some(PortBinding::Output {
            filename: filename(rng),
        }),
    }
}

/// A random edit against `w`.
///
/// Most edits target existing jobs, ports and connections; a minority
/// reference missing ids, clash on names, or would break a structural rule,
/// so callers see both accepted and rejected changes.
pub fn random_change<R: Rng>(rng: &mut R, w: &ConcreteWorkflow) -> Change {
    let bogus = rng.random_bool(0.1);
    let job = if bogus { None } else { pick_job(rng, w).map(|j| j.id) };
    let job = job.unwrap_or_else(|| stray_id(rng, w));
    match rng.random_range(0..100) {
        0..18 => Change::AddJob {
            name: name(rng),
            description: text(rng),
            x: rng.random_range(0..1000),
            y: rng.random_range(0..1000),
        },
        18..22 => Change::RemoveJob { job },
        22..27 => Change::MoveJob {
            job,
            x: rng.random_range(0..1000),
            y: rng.random_range(0..1000),
        },
        27..31 => Change::RenameJob { job, name: name(rng) },
        31..34 => Change::SetJobDescription {
            job,
            description: text(rng),
        },
        34..54 => Change::AddPort {
            job,
            name: format!("p{}", rng.random_range(0..5)),
            seq: rng.random_range(0..5),
            kind: if rng.random_bool(0.5) {
                PortKind::Input
            } else {
                PortKind::Output
            },
        },
        54..57 => match random_port(rng, w) {
            Some(p) => Change::RemovePort {
                job: p.job,
                port: p.port,
            },
            None => Change::RemovePort {
                job,
                port: stray_id(rng, w),
            },
        },
        57..62 => match random_port(rng, w) {
            Some(p) => Change::ChangePortConfig {
                job: p.job,
                port: p.port,
                name: rng.random_bool(0.5).then(|| format!("p{}", rng.random_range(0..5))),
                seq: rng.random_bool(0.5).then(|| rng.random_range(0..5)),
                binding: if rng.random_bool(0.5) {
                    random_binding(rng)
                } else {
                    None
                },
            },
            None => Change::ChangePortConfig {
                job,
                port: stray_id(rng, w),
                name: None,
                seq: Some(0),
                binding: None,
            },
        },
        62..84 => {
            // Bias toward output -> input pairs so that edges actually form.
            let outs: Vec<PortRef> = refs(w, PortKind::Output);
            let ins: Vec<PortRef> = refs(w, PortKind::Input);
            let from = if bogus || outs.is_empty() {
                random_port(rng, w)
            } else {
                outs.choose(rng).copied()
            };
            let to = if ins.is_empty() {
                random_port(rng, w)
            } else {
                ins.choose(rng).copied()
            };
            let stray = PortRef::new(job, stray_id(rng, w));
            Change::AddConnection {
                from: from.unwrap_or(stray),
                to: to.unwrap_or(stray),
            }
        }
        84..88 => Change::RemoveConnection {
            connection: match w.graph.connections.choose(rng) {
                Some(c) if !bogus => c.id,
                _ => stray_id(rng, w),
            },
        },
        88..93 => Change::SetJobConfig {
            job,
            config: rng.random_bool(0.8).then(|| config(rng)),
        },
        93..98 => match random_port(rng, w) {
            Some(p) => Change::SetPortBinding {
                job: p.job,
                port: p.port,
                binding: random_binding(rng),
            },
            None => Change::SetPortBinding {
                job,
                port: stray_id(rng, w),
                binding: None,
            },
        },
        _ => Change::RenameWorkflow {
            name: rng.random_bool(0.5).then(|| name(rng)),
            graph: rng.random_bool(0.5).then(|| name(rng)),
        },
    }
}

fn refs(w: &ConcreteWorkflow, kind: PortKind) -> Vec<PortRef> {
    w.graph
        .jobs
        .iter()
        .flat_map(|j| {
            j.ports
                .iter()
                .filter(move |p| p.kind == kind)
                .map(move |p| PortRef::new(j.id, p.id))
        })
        .collect()
}
