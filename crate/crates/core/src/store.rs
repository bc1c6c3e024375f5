//! File-backed store for graphs, workflows and run records.
//!
//! Layout under the root directory:
//!
//! ```text
//! graphs/<name>.xml
//! workflows/<name>.xml
//! runs/<run_id>/
//! ```
//!
//! Every file is written to a temporary sibling first and renamed into
//! place, so readers only ever see a complete previous or new version.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::model::{is_valid_name, ConcreteWorkflow, Graph};
use crate::wire::{self, WireError};

const GRAPHS: &str = "graphs";
const WORKFLOWS: &str = "workflows";
const RUNS: &str = "runs";
const TEMP_PREFIX: &str = ".tmp-";

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{kind} {name:?} not found")]
    NotFound { kind: &'static str, name: String },
    #[error("invalid name {0:?}: names are 1-64 characters from [A-Za-z0-9_.-]")]
    InvalidName(String),
    #[error("workflow is named {found:?} but was stored as {requested:?}")]
    NameMismatch { requested: String, found: String },
    #[error("{path}: {source}")]
    Document {
        path: PathBuf,
        #[source]
        source: WireError,
    },
}

impl StoreError {
    pub(crate) fn io(path: &Path, source: io::Error) -> Self {
        StoreError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Store {
    root: PathBuf,
}

/// A write that has reached its temporary file but not been renamed into
/// place yet.
pub(crate) struct StagedWrite {
    temp: PathBuf,
    target: PathBuf,
}

impl StagedWrite {
    pub fn commit(self) -> Result<(), StoreError> {
        fs::rename(&self.temp, &self.target).map_err(|e| {
            let _ = fs::remove_file(&self.temp);
            StoreError::io(&self.target, e)
        })
    }
}

pub(crate) fn stage_write(target: &Path, bytes: &[u8]) -> Result<StagedWrite, StoreError> {
    let dir = target.parent().unwrap_or(Path::new("."));
    let file_name = target.file_name().and_then(|n| n.to_str()).unwrap_or("file");
    let temp = dir.join(format!("{TEMP_PREFIX}{file_name}-{}", uuid::Uuid::new_v4().simple()));
    let result = (|| -> io::Result<()> {
        let mut f = fs::File::create(&temp)?;
        f.write_all(bytes)?;
        f.sync_all()
    })();
    if let Err(e) = result {
        let _ = fs::remove_file(&temp);
        return Err(StoreError::io(&temp, e));
    }
    Ok(StagedWrite {
        temp,
        target: target.to_path_buf(),
    })
}

pub(crate) fn write_atomic(target: &Path, bytes: &[u8]) -> Result<(), StoreError> {
    stage_write(target, bytes)?.commit()
}

fn check_store_name(name: &str) -> Result<(), StoreError> {
    if is_valid_name(name) {
        Ok(())
    } else {
        Err(StoreError::InvalidName(name.to_string()))
    }
}

impl Store {
    /// Opens the store at `root`, creating the directory layout if needed.
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, StoreError> {
        let root = root.into();
        for dir in [GRAPHS, WORKFLOWS, RUNS] {
            let path = root.join(dir);
            fs::create_dir_all(&path).map_err(|e| StoreError::io(&path, e))?;
        }
        Ok(Self { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn runs_dir(&self) -> PathBuf {
        self.root.join(RUNS)
    }

    fn graph_path(&self, name: &str) -> PathBuf {
        self.root.join(GRAPHS).join(format!("{name}.xml"))
    }

    fn workflow_path(&self, name: &str) -> PathBuf {
        self.root.join(WORKFLOWS).join(format!("{name}.xml"))
    }

    fn read(&self, path: &Path, kind: &'static str, name: &str) -> Result<Vec<u8>, StoreError> {
        check_store_name(name)?;
        fs::read(path).map_err(|e| match e.kind() {
            io::ErrorKind::NotFound => StoreError::NotFound {
                kind,
                name: name.to_string(),
            },
            _ => StoreError::io(path, e),
        })
    }

    pub(crate) fn stage_graph(&self, name: &str, graph: &Graph) -> Result<StagedWrite, StoreError> {
        check_store_name(name)?;
        let mut graph = graph.clone();
        graph.name = name.to_string();
        let path = self.graph_path(name);
        let bytes = wire::serialize_graph(&graph).map_err(|source| StoreError::Document {
            path: path.clone(),
            source,
        })?;
        stage_write(&path, &bytes)
    }

    /// Stores `graph` under `name`, overwriting any previous version. The
    /// stored graph takes `name` as its own name.
    pub fn put_graph(&self, name: &str, graph: &Graph) -> Result<String, StoreError> {
        self.stage_graph(name, graph)?.commit()?;
        Ok(name.to_string())
    }

    pub fn get_graph(&self, name: &str) -> Result<Graph, StoreError> {
        let path = self.graph_path(name);
        let bytes = self.read(&path, "graph", name)?;
        wire::parse_graph(&bytes).map_err(|source| StoreError::Document { path, source })
    }

    pub fn put_workflow(&self, name: &str, w: &ConcreteWorkflow) -> Result<String, StoreError> {
        check_store_name(name)?;
        if w.name != name {
            return Err(StoreError::NameMismatch {
                requested: name.to_string(),
                found: w.name.clone(),
            });
        }
        let path = self.workflow_path(name);
        let bytes = wire::serialize(w).map_err(|source| StoreError::Document {
            path: path.clone(),
            source,
        })?;
        write_atomic(&path, &bytes)?;
        Ok(name.to_string())
    }

    /// Raw XML of a stored workflow.
    pub fn workflow_bytes(&self, name: &str) -> Result<Vec<u8>, StoreError> {
        self.read(&self.workflow_path(name), "workflow", name)
    }

    pub fn get_workflow(&self, name: &str) -> Result<ConcreteWorkflow, StoreError> {
        let bytes = self.workflow_bytes(name)?;
        wire::parse(&bytes).map_err(|source| StoreError::Document {
            path: self.workflow_path(name),
            source,
        })
    }

    /// Removes a workflow. Its source graph is left in place.
    pub fn delete_workflow(&self, name: &str) -> Result<(), StoreError> {
        check_store_name(name)?;
        let path = self.workflow_path(name);
        fs::remove_file(&path).map_err(|e| match e.kind() {
            io::ErrorKind::NotFound => StoreError::NotFound {
                kind: "workflow",
                name: name.to_string(),
            },
            _ => StoreError::io(&path, e),
        })
    }

    fn list(&self, dir: &str) -> Result<Vec<String>, StoreError> {
        let path = self.root.join(dir);
        let entries = fs::read_dir(&path).map_err(|e| StoreError::io(&path, e))?;
        let mut names = Vec::new();
        for entry in entries {
            let entry = entry.map_err(|e| StoreError::io(&path, e))?;
            let file_name = entry.file_name();
            let Some(file_name) = file_name.to_str() else { continue };
            if file_name.starts_with(TEMP_PREFIX) {
                continue;
            }
            if let Some(stem) = file_name.strip_suffix(".xml") {
                if is_valid_name(stem) {
                    names.push(stem.to_string());
                }
            }
        }
        names.sort();
        Ok(names)
    }

    pub fn list_graphs(&self) -> Result<Vec<String>, StoreError> {
        self.list(GRAPHS)
    }

    pub fn list_workflows(&self) -> Result<Vec<String>, StoreError> {
        self.list(WORKFLOWS)
    }
}
