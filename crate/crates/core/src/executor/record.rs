//! Run records and their on-disk form (`runs/<run_id>/record.xml`).

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;

use chrono::{DateTime, NaiveDateTime, SubsecRound, Utc};
use serde::{Deserialize, Serialize};

use crate::wire::StateDigest;
use crate::xml::{parse_document, Element, XmlWriter};

const TIME_FORMAT: &str = "%Y-%m-%dT%H:%M:%S%.3fZ";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "lowercase")]
pub enum JobState {
    Init,
    Running,
    Finished,
    Error {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        exit_code: Option<i32>,
        message: String,
    },
}

impl JobState {
    pub fn failed(message: impl Into<String>) -> Self {
        JobState::Error {
            exit_code: None,
            message: message.into(),
        }
    }

    pub fn exited(code: i32) -> Self {
        JobState::Error {
            exit_code: Some(code),
            message: format!("exited with code {code}"),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            JobState::Init => "init",
            JobState::Running => "running",
            JobState::Finished => "finished",
            JobState::Error { .. } => "error",
        }
    }

    pub fn is_terminal(&self) -> bool {
        matches!(self, JobState::Finished | JobState::Error { .. })
    }
}

impl fmt::Display for JobState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            JobState::Error { message, .. } => write!(f, "ERROR ({message})"),
            other => f.write_str(&other.name().to_ascii_uppercase()),
        }
    }
}

/// One state change of one job, numbered in the order it happened.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transition {
    pub seq: u64,
    pub job: String,
    #[serde(flatten)]
    pub state: JobState,
    pub at: DateTime<Utc>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunStatus {
    Running,
    Finished,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_id: String,
    pub workflow: String,
    pub workflow_digest: StateDigest,
    pub job_states: BTreeMap<String, JobState>,
    pub transitions: Vec<Transition>,
    pub started_at: DateTime<Utc>,
    pub finished_at: Option<DateTime<Utc>>,
    pub workdir: PathBuf,
}

pub(crate) fn now_millis() -> DateTime<Utc> {
    Utc::now().trunc_subsecs(3)
}

impl RunRecord {
    pub(crate) fn new(
        run_id: String,
        workflow: String,
        workflow_digest: StateDigest,
        jobs: impl IntoIterator<Item = String>,
        workdir: PathBuf,
    ) -> Self {
        Self {
            run_id,
            workflow,
            workflow_digest,
            job_states: jobs.into_iter().map(|j| (j, JobState::Init)).collect(),
            transitions: Vec::new(),
            started_at: now_millis(),
            finished_at: None,
            workdir,
        }
    }

    pub(crate) fn transition(&mut self, job: &str, state: JobState) {
        let seq = self.transitions.len() as u64 + 1;
        self.job_states.insert(job.to_string(), state.clone());
        self.transitions.push(Transition {
            seq,
            job: job.to_string(),
            state,
            at: now_millis(),
        });
    }

    pub fn state(&self, job: &str) -> Option<&JobState> {
        self.job_states.get(job)
    }

    pub fn status(&self) -> RunStatus {
        if self.finished_at.is_none() {
            RunStatus::Running
        } else if self.job_states.values().all(|s| *s == JobState::Finished) {
            RunStatus::Finished
        } else {
            RunStatus::Failed
        }
    }

    pub fn is_complete(&self) -> bool {
        self.finished_at.is_some()
    }

    pub(crate) fn to_xml(&self) -> String {
        let mut x = XmlWriter::new();
        let started = self.started_at.format(TIME_FORMAT).to_string();
        let finished = self
            .finished_at
            .map(|t| t.format(TIME_FORMAT).to_string())
            .unwrap_or_default();
        let workdir = self.workdir.to_string_lossy();
        x.start(
            "run",
            &[
                ("id", &self.run_id),
                ("workflow", &self.workflow),
                ("digest", self.workflow_digest.as_str()),
                ("started", &started),
                ("finished", &finished),
                ("workdir", &workdir),
            ],
        );
        for (name, state) in &self.job_states {
            write_state(&mut x, "job", &[("name", name)], state);
        }
        for t in &self.transitions {
            let seq = t.seq.to_string();
            let at = t.at.format(TIME_FORMAT).to_string();
            write_state(
                &mut x,
                "transition",
                &[("seq", &seq), ("job", &t.job), ("at", &at)],
                &t.state,
            );
        }
        x.end("run");
        x.finish()
    }

    pub(crate) fn from_xml(bytes: &[u8]) -> Result<Self, String> {
        let root = parse_document(bytes)?;
        if root.name != "run" {
            return Err(format!("expected <run>, found <{}>", root.name));
        }
        let attr = |el: &Element, key: &str| -> Result<String, String> {
            el.attr(key)
                .map(str::to_string)
                .ok_or_else(|| format!("<{}> is missing {key}", el.name))
        };
        let mut record = RunRecord {
            run_id: attr(&root, "id")?,
            workflow: attr(&root, "workflow")?,
            workflow_digest: StateDigest::from_raw(attr(&root, "digest")?),
            job_states: BTreeMap::new(),
            transitions: Vec::new(),
            started_at: parse_time(&attr(&root, "started")?)?,
            finished_at: match root.attr("finished") {
                None | Some("") => None,
                Some(t) => Some(parse_time(t)?),
            },
            workdir: PathBuf::from(attr(&root, "workdir")?),
        };
        for el in root.elements() {
            let state = read_state(el)?;
            match el.name.as_str() {
                "job" => {
                    record.job_states.insert(attr(el, "name")?, state);
                }
                "transition" => record.transitions.push(Transition {
                    seq: attr(el, "seq")?.parse().map_err(|e| format!("bad seq: {e}"))?,
                    job: attr(el, "job")?,
                    state,
                    at: parse_time(&attr(el, "at")?)?,
                }),
                other => return Err(format!("unexpected <{other}>")),
            }
        }
        Ok(record)
    }
}

fn parse_time(s: &str) -> Result<DateTime<Utc>, String> {
    NaiveDateTime::parse_from_str(s, TIME_FORMAT)
        .map(|t| t.and_utc())
        .map_err(|e| format!("bad timestamp {s:?}: {e}"))
}

fn write_state(x: &mut XmlWriter, tag: &str, leading: &[(&str, &str)], state: &JobState) {
    let mut attrs: Vec<(&str, &str)> = leading.to_vec();
    attrs.push(("state", state.name()));
    let code;
    if let JobState::Error { exit_code, message } = state {
        if let Some(c) = exit_code {
            code = c.to_string();
            attrs.push(("exit", &code));
        }
        attrs.push(("message", message));
    }
    x.empty(tag, &attrs);
}

fn read_state(el: &Element) -> Result<JobState, String> {
    Ok(match el.attr("state") {
        Some("init") => JobState::Init,
        Some("running") => JobState::Running,
        Some("finished") => JobState::Finished,
        Some("error") => JobState::Error {
            exit_code: el
                .attr("exit")
                .map(|c| c.parse().map_err(|e| format!("bad exit code: {e}")))
                .transpose()?,
            message: el.attr("message").unwrap_or_default().to_string(),
        },
        other => return Err(format!("unknown job state {other:?}")),
    })
}
