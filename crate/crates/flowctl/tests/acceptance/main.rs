//! Acceptance gate. Runs every primary criterion end to end and prints one
//! PASS/FAIL line per criterion. Exits nonzero if any criterion fails.

mod client;
#[path = "../common/mod.rs"]
mod common;

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use client::Canvas;
use common::{fixtures, run, Server};
use flowgate::executor::{self, ExecOptions, JobState, RunRecord};
use flowgate::model::ConcreteWorkflow;
use flowgate::session::{replay, Change, ChangeAck, ChangeEvent, EditSession};
use flowgate::store::Store;
use flowgate::synth::{random_change, random_workflow, Shape};
use flowgate::validation::{self, Finding, Mode, Rule, Severity};
use flowgate::wire;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

const RULE_FIXTURES: [(&str, Rule); 13] = [
    ("r1", Rule::R1),
    ("r2", Rule::R2),
    ("r3", Rule::R3),
    ("r4", Rule::R4),
    ("r5", Rule::R5),
    ("r6", Rule::R6),
    ("r7", Rule::R7),
    ("c1", Rule::C1),
    ("c2", Rule::C2),
    ("c3", Rule::C3),
    ("c4", Rule::C4),
    ("w1", Rule::W1),
    ("w2", Rule::W2),
];

fn main() -> ExitCode {
    let criteria: [Criterion; 8] = [
        ("wire_round_trip", wire_round_trip),
        ("validation_rule_table", validation_rule_table),
        ("edit_replay", edit_replay),
        ("cache_matches_canvas", cache_matches_canvas),
        ("single_stage_lifecycle", single_stage_lifecycle),
        ("backward_compatibility", backward_compatibility),
        ("executor_dependency_safety", executor_dependency_safety),
        ("cli_api_parity", cli_api_parity),
    ];
    let mut failed = 0;
    for (name, criterion) in criteria {
        let outcome = catch_unwind(AssertUnwindSafe(criterion)).unwrap_or_else(|panic| {
            let msg = panic
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        match outcome {
            Ok(detail) => println!("PASS {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {name}: {detail}");
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

fn fixture(rel: &str) -> PathBuf {
    fixtures().join(rel)
}

fn read_fixture(rel: &str) -> Vec<u8> {
    std::fs::read(fixture(rel)).unwrap_or_else(|e| panic!("{rel}: {e}"))
}

fn block_on<F: std::future::Future>(f: F) -> F::Output {
    tokio::runtime::Builder::new_multi_thread()
        .worker_threads(2)
        .enable_all()
        .build()
        .unwrap()
        .block_on(f)
}

/// JSON over HTTP against a spawned `flowctl serve`.
struct Http {
    client: reqwest::Client,
    server: Server,
}

impl Http {
    fn start(store: &Path) -> Self {
        Http {
            client: reqwest::Client::new(),
            server: Server::start(store),
        }
    }

    async fn send(&self, method: reqwest::Method, path: &str, body: Option<Vec<u8>>) -> (u16, Vec<u8>) {
        let mut req = self.client.request(method, self.server.url(path));
        if let Some(body) = body {
            req = req.body(body);
        }
        let resp = req.send().await.unwrap_or_else(|e| panic!("{path}: {e}"));
        let status = resp.status().as_u16();
        (status, resp.bytes().await.unwrap().to_vec())
    }

    async fn get(&self, path: &str) -> (u16, Value) {
        let (status, body) = self.send(reqwest::Method::GET, path, None).await;
        (status, serde_json::from_slice(&body).unwrap_or(Value::Null))
    }

    async fn post(&self, path: &str, body: Option<Value>) -> (u16, Value) {
        let body = body.map(|b| b.to_string().into_bytes());
        let (status, out) = self.send(reqwest::Method::POST, path, body).await;
        (status, serde_json::from_slice(&out).unwrap_or(Value::Null))
    }

    async fn post_raw(&self, path: &str, body: Vec<u8>) -> (u16, Value) {
        let (status, out) = self.send(reqwest::Method::POST, path, Some(body)).await;
        (status, serde_json::from_slice(&out).unwrap_or(Value::Null))
    }

    async fn change(&self, sid: &str, ev: &ChangeEvent) -> (u16, Value) {
        self.post(
            &format!("/sessions/{sid}/changes"),
            Some(serde_json::to_value(ev).unwrap()),
        )
        .await
    }

    /// Applies a change that must be accepted and returns its allocated id.
    async fn must(&self, sid: &str, revision: u64, kind: &str, payload: Value) -> Result<Value, String> {
        let body = json!({ "expected_revision": revision, "kind": kind, "payload": payload });
        let (status, ack) = self.post(&format!("/sessions/{sid}/changes"), Some(body)).await;
        ensure!(status == 200, "{kind} at revision {revision}: {status} {ack}");
        Ok(ack["allocated"].clone())
    }

    async fn wait_for_run(&self, run_id: &str, deadline: Instant) -> Result<Value, String> {
        loop {
            let (status, run) = self.get(&format!("/runs/{run_id}")).await;
            ensure!(status == 200, "GET /runs/{run_id}: {status} {run}");
            if run["status"] != "running" {
                return Ok(run);
            }
            ensure!(Instant::now() < deadline, "run {run_id} still running at deadline");
            tokio::time::sleep(Duration::from_millis(10)).await;
        }
    }
}

fn script(text: &str) -> Value {
    json!({ "executable_type": "script", "executable": text, "arguments": "", "target": "local" })
}

fn output(filename: &str) -> Value {
    json!({ "source": "output", "filename": filename })
}

/// 1000 generated workflows survive serialize, parse, serialize unchanged.
fn wire_round_trip() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let corpus: Vec<ConcreteWorkflow> = (0..1000)
        .map(|_| random_workflow(&mut rng, &Shape::default()))
        .collect();
    let started = Instant::now();
    for (i, w) in corpus.iter().enumerate() {
        let first = wire::serialize(w).map_err(|e| format!("workflow {i}: serialize: {e}"))?;
        let parsed = wire::parse(&first).map_err(|e| format!("workflow {i}: parse: {e}"))?;
        ensure!(&parsed == w, "workflow {i}: parsed value differs from the original");
        let second = wire::serialize(&parsed).unwrap();
        ensure!(first == second, "workflow {i}: second serialization differs");
        ensure!(
            wire::digest(&parsed).unwrap() == wire::digest(w).unwrap(),
            "workflow {i}: digest moved"
        );
    }
    let elapsed = started.elapsed();
    ensure!(elapsed < Duration::from_secs(10), "took {elapsed:?}");
    Ok(format!("1000 workflows in {elapsed:.2?}"))
}

/// Each rule fixture triggers its rule and no other error.
fn validation_rule_table() -> Outcome {
    for (name, rule) in RULE_FIXTURES {
        let w = wire::decode(&read_fixture(&format!("rules/{name}.xml"))).map_err(|e| format!("{name}: {e}"))?;
        let findings = validation::validate(&w, Mode::Workflow);
        ensure!(
            findings.iter().any(|f| f.rule == rule),
            "{name}: no {rule} in {findings:?}"
        );
        let others: Vec<&Finding> = findings
            .iter()
            .filter(|f| f.rule != rule && f.severity == Severity::Error)
            .collect();
        ensure!(others.is_empty(), "{name}: unexpected errors {others:?}");
        let structural = validation::has_errors(&validation::validate(&w, Mode::Graph));
        let strict = wire::parse(&read_fixture(&format!("rules/{name}.xml")));
        ensure!(
            strict.is_err() == structural,
            "{name}: strict parse disagrees with graph-mode validation"
        );
        if name == "r2" {
            ensure!(
                findings[0].to_string().starts_with("ERROR R2 "),
                "r2 displays as {}",
                findings[0]
            );
        }
    }
    Ok(format!("{} rules", RULE_FIXTURES.len()))
}

/// Replaying a session's change log from its initial state reproduces the
/// live digest. Rejected changes leave the state untouched.
fn edit_replay() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0xed17);
    let (mut accepted, mut rejected) = (0, 0);
    for seq in 0..500 {
        let mut session = if seq % 2 == 0 {
            EditSession::new(&format!("replay{seq}")).unwrap()
        } else {
            EditSession::open(random_workflow(&mut rng, &Shape::default())).unwrap()
        };
        let steps = rng.random_range(1..=40);
        for _ in 0..steps {
            let change = random_change(&mut rng, session.workflow());
            let before = (session.revision(), session.digest().clone());
            match session.apply(ChangeEvent::new(session.revision(), change.clone())) {
                Ok(_) => accepted += 1,
                Err(_) => {
                    rejected += 1;
                    ensure!(
                        (session.revision(), session.digest().clone()) == before,
                        "sequence {seq}: rejected {} changed the state",
                        change.kind()
                    );
                }
            }
        }
        let replayed = replay(session.initial(), session.change_log()).map_err(|e| format!("sequence {seq}: {e}"))?;
        let digest = wire::digest(&replayed).map_err(|e| format!("sequence {seq}: {e}"))?;
        ensure!(&digest == session.digest(), "sequence {seq}: replay digest differs");
    }
    Ok(format!("500 sequences, {accepted} accepted, {rejected} rejected"))
}

/// A client mirroring acknowledged changes on its own model agrees with
/// the server's digest after every step.
fn cache_matches_canvas() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let http = Http::start(tmp.path());
    block_on(async {
        let mut rng = ChaCha8Rng::seed_from_u64(0xca57);
        let (mut steps_total, mut stale) = (0, 0);
        for seq in 0..500 {
            let (sid, mut canvas, mut revision) = if seq % 3 == 0 {
                let mut w = random_workflow(&mut rng, &Shape::default());
                w.name = format!("canvas{seq}");
                w.graph_name = format!("canvas{seq}g");
                w.graph.name = w.graph_name.clone();
                let (status, imported) = http.post_raw("/import", wire::serialize(&w).unwrap()).await;
                ensure!(status == 201, "sequence {seq}: import {status} {imported}");
                let (status, view) = http.post("/sessions", Some(json!({ "from_workflow": w.name }))).await;
                ensure!(status == 201, "sequence {seq}: session {status} {view}");
                let canvas = Canvas::from_state(&w);
                ensure!(
                    view["digest"] == canvas.digest(),
                    "sequence {seq}: opening digest differs"
                );
                (view["session_id"].as_str().unwrap().to_string(), canvas, 0)
            } else {
                let (status, view) = http
                    .post("/sessions", Some(json!({ "name": format!("canvas{seq}") })))
                    .await;
                ensure!(status == 201, "sequence {seq}: session {status} {view}");
                let state: ConcreteWorkflow = serde_json::from_value(view["state"].clone()).unwrap();
                let canvas = Canvas::from_state(&state);
                ensure!(
                    view["digest"] == canvas.digest(),
                    "sequence {seq}: opening digest differs"
                );
                (view["session_id"].as_str().unwrap().to_string(), canvas, 0)
            };

            for step in 0..rng.random_range(1..=40) {
                steps_total += 1;
                let change: Change = random_change(&mut rng, &canvas.to_workflow());
                if revision > 0 && rng.random_bool(0.05) {
                    stale += 1;
                    let (status, body) = http.change(&sid, &ChangeEvent::new(revision - 1, change)).await;
                    ensure!(
                        status == 409 && body["revision"] == revision,
                        "sequence {seq} step {step}: stale gave {status} {body}"
                    );
                    continue;
                }
                let (status, body) = http.change(&sid, &ChangeEvent::new(revision, change.clone())).await;
                if status == 200 {
                    let ack: ChangeAck = serde_json::from_value(body).unwrap();
                    canvas
                        .apply(&change, &ack)
                        .map_err(|e| format!("sequence {seq} step {step} {}: {e}", change.kind()))?;
                    revision += 1;
                    ensure!(
                        ack.revision == revision,
                        "sequence {seq} step {step}: revision {}",
                        ack.revision
                    );
                    ensure!(
                        ack.digest.as_str() == canvas.digest(),
                        "sequence {seq} step {step} {}: client and server digests differ",
                        change.kind()
                    );
                } else {
                    ensure!(
                        (400..500).contains(&status),
                        "sequence {seq} step {step}: {status} {body}"
                    );
                }
            }
            let (status, view) = http.get(&format!("/sessions/{sid}")).await;
            ensure!(status == 200, "sequence {seq}: GET session {status}");
            ensure!(
                view["digest"] == canvas.digest() && view["revision"] == revision,
                "sequence {seq}: final state differs"
            );
        }
        Ok(format!(
            "500 sequences, {steps_total} steps, {stale} stale writes refused"
        ))
    })
}

/// Build, save, submit and finish a two-job pipeline over HTTP.
fn single_stage_lifecycle() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let http = Http::start(tmp.path());
    block_on(async {
        let started = Instant::now();
        let (status, s) = http.post("/sessions", Some(json!({ "name": "hello" }))).await;
        ensure!(status == 201, "create session: {status} {s}");
        let sid = s["session_id"].as_str().unwrap().to_string();
        let a = http
            .must(&sid, 0, "AddJob", json!({ "name": "A", "x": 120, "y": 80 }))
            .await?;
        let b = http
            .must(&sid, 1, "AddJob", json!({ "name": "B", "x": 360, "y": 80 }))
            .await?;
        let a_out = http
            .must(
                &sid,
                2,
                "AddPort",
                json!({ "job": a, "name": "out", "seq": 0, "kind": "output" }),
            )
            .await?;
        let b_in = http
            .must(
                &sid,
                3,
                "AddPort",
                json!({ "job": b, "name": "in0", "seq": 0, "kind": "input" }),
            )
            .await?;
        let b_out = http
            .must(
                &sid,
                4,
                "AddPort",
                json!({ "job": b, "name": "out", "seq": 1, "kind": "output" }),
            )
            .await?;
        let edge = json!({ "from": { "job": a, "port": a_out }, "to": { "job": b, "port": b_in } });
        http.must(&sid, 5, "AddConnection", edge).await?;
        http.must(
            &sid,
            6,
            "SetJobConfig",
            json!({ "job": a, "config": script("printf hello > msg") }),
        )
        .await?;
        http.must(
            &sid,
            7,
            "SetJobConfig",
            json!({ "job": b, "config": script("tr a-z A-Z < in0 > msg2") }),
        )
        .await?;
        http.must(
            &sid,
            8,
            "SetPortBinding",
            json!({ "job": a, "port": a_out, "binding": output("msg") }),
        )
        .await?;
        http.must(
            &sid,
            9,
            "SetPortBinding",
            json!({ "job": b, "port": b_out, "binding": output("msg2") }),
        )
        .await?;

        let (_, findings) = http
            .post(&format!("/sessions/{sid}/validate?mode=workflow"), None)
            .await;
        ensure!(findings == json!([]), "findings before save: {findings}");
        let (status, keys) = http.post(&format!("/sessions/{sid}/save"), None).await;
        ensure!(status == 200, "save: {status} {keys}");
        let (status, submitted) = http.post("/workflows/hello/submit", None).await;
        ensure!(status == 202, "submit: {status} {submitted}");
        let run = http
            .wait_for_run(submitted["run_id"].as_str().unwrap(), started + Duration::from_secs(5))
            .await?;
        let elapsed = started.elapsed();
        ensure!(run["status"] == "finished", "run ended {run}");
        let workdir = PathBuf::from(run["workdir"].as_str().unwrap());
        let produced = std::fs::read(workdir.join("B/msg2")).map_err(|e| format!("B/msg2: {e}"))?;
        ensure!(
            produced == b"HELLO",
            "B/msg2 = {:?}",
            String::from_utf8_lossy(&produced)
        );
        ensure!(elapsed < Duration::from_secs(5), "took {elapsed:?}");
        Ok(format!("HELLO in {elapsed:.2?}"))
    })
}

/// A graph-only document imports, gains configuration in a session and
/// runs to completion.
fn backward_compatibility() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let http = Http::start(tmp.path());
    block_on(async {
        let (status, imported) = http.post_raw("/import", read_fixture("legacy_graph.xml")).await;
        ensure!(status == 201, "import: {status} {imported}");
        let (status, refused) = http.post("/workflows/legacy/submit", None).await;
        ensure!(
            status == 422 && refused["code"] == "submit_rejected",
            "unconfigured submit: {status} {refused}"
        );

        let (status, s) = http.post("/sessions", Some(json!({ "from_workflow": "legacy" }))).await;
        ensure!(status == 201, "session: {status} {s}");
        let sid = s["session_id"].as_str().unwrap().to_string();
        let state: ConcreteWorkflow = serde_json::from_value(s["state"].clone()).unwrap();
        let id = |job: &str, port: &str| {
            let j = state.graph.job_named(job).unwrap();
            (j.id.0, j.port_named(port).unwrap().id.0)
        };
        let (a, a_out) = id("A", "out");
        let (b, b_out) = id("B", "out");
        http.must(
            &sid,
            0,
            "SetJobConfig",
            json!({ "job": a, "config": script("echo legacy > out.txt") }),
        )
        .await?;
        http.must(
            &sid,
            1,
            "SetJobConfig",
            json!({ "job": b, "config": script("rev < in0 > back.txt") }),
        )
        .await?;
        http.must(
            &sid,
            2,
            "SetPortBinding",
            json!({ "job": a, "port": a_out, "binding": output("out.txt") }),
        )
        .await?;
        http.must(
            &sid,
            3,
            "SetPortBinding",
            json!({ "job": b, "port": b_out, "binding": output("back.txt") }),
        )
        .await?;
        let (status, keys) = http.post(&format!("/sessions/{sid}/save"), None).await;
        ensure!(status == 200, "save: {status} {keys}");

        let (status, submitted) = http.post("/workflows/legacy/submit", None).await;
        ensure!(status == 202, "submit: {status} {submitted}");
        let deadline = Instant::now() + Duration::from_secs(10);
        let run = http
            .wait_for_run(submitted["run_id"].as_str().unwrap(), deadline)
            .await?;
        ensure!(run["status"] == "finished", "run ended {run}");
        let workdir = PathBuf::from(run["workdir"].as_str().unwrap());
        let back = std::fs::read_to_string(workdir.join("B/back.txt")).map_err(|e| e.to_string())?;
        ensure!(back == "ycagel\n", "B/back.txt = {back:?}");
        Ok("legacy graph configured and finished".into())
    })
}

fn first_seq(record: &RunRecord, job: &str, want: fn(&JobState) -> bool) -> Option<u64> {
    record
        .transitions
        .iter()
        .find(|t| t.job == job && want(&t.state))
        .map(|t| t.seq)
}

/// No job starts before every upstream job has finished, in either mode.
/// A failure leaves everything downstream untouched.
fn executor_dependency_safety() -> Outcome {
    let store_dir = tempfile::tempdir().unwrap();
    let store = Store::open(store_dir.path()).unwrap();
    let diamond = wire::parse(&read_fixture("diamond.xml")).unwrap();
    let edges: Vec<(String, String)> = diamond
        .graph
        .dependency_edges()
        .unwrap()
        .into_iter()
        .map(|(u, d)| {
            (
                diamond.graph.job(u).unwrap().name.clone(),
                diamond.graph.job(d).unwrap().name.clone(),
            )
        })
        .collect();
    ensure!(edges.len() == 4, "diamond has {} dependency edges", edges.len());

    let mut runs = 0;
    for parallel in [false, true] {
        for _ in 0..5 {
            let opts = ExecOptions {
                parallel,
                base_dir: fixtures(),
            };
            let record = executor::execute(&diamond, &store, &opts).map_err(|e| e.to_string())?;
            runs += 1;
            ensure!(
                record.job_states.values().all(|s| *s == JobState::Finished),
                "parallel={parallel}: {:?}",
                record.job_states
            );
            for (up, down) in &edges {
                let finished = first_seq(&record, up, |s| *s == JobState::Finished);
                let running = first_seq(&record, down, |s| *s == JobState::Running);
                ensure!(
                    matches!((finished, running), (Some(f), Some(r)) if f < r),
                    "parallel={parallel}: {down} started before {up} finished"
                );
            }
            let d = std::fs::read_to_string(record.workdir.join("D/d.txt")).map_err(|e| e.to_string())?;
            ensure!(d == "a\nb\na\nc\n", "parallel={parallel}: d.txt = {d:?}");
        }
    }

    let failing = wire::parse(&read_fixture("failing.xml")).unwrap();
    for parallel in [false, true] {
        let opts = ExecOptions {
            parallel,
            base_dir: fixtures(),
        };
        let record = executor::execute(&failing, &store, &opts).map_err(|e| e.to_string())?;
        let states: BTreeMap<&str, &JobState> = record.job_states.iter().map(|(k, v)| (k.as_str(), v)).collect();
        ensure!(
            matches!(states.get("A"), Some(JobState::Error { exit_code: Some(3), .. })),
            "A ended {:?}",
            states.get("A")
        );
        for job in ["B", "C"] {
            ensure!(
                states.get(job) == Some(&&JobState::Init),
                "{job} ended {:?}",
                states.get(job)
            );
            ensure!(
                first_seq(&record, job, |s| *s == JobState::Running).is_none(),
                "{job} was started"
            );
        }
    }
    Ok(format!("{runs} diamond runs, failure contained in both modes"))
}

fn all_fixtures(dir: &Path, out: &mut Vec<PathBuf>) {
    let mut entries: Vec<PathBuf> = std::fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
    entries.sort();
    for path in entries {
        if path.is_dir() {
            all_fixtures(&path, out);
        } else if path.extension().is_some_and(|e| e == "xml") {
            out.push(path);
        }
    }
}

/// `flowctl validate` and `POST /validate` report the same findings for
/// every fixture in both modes and agree on unreadable documents.
fn cli_api_parity() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let http = Http::start(tmp.path());
    let mut docs = Vec::new();
    all_fixtures(&fixtures(), &mut docs);
    block_on(async {
        let mut checked = 0;
        for doc in &docs {
            let rel = doc.strip_prefix(fixtures()).unwrap().display().to_string();
            for mode in ["graph", "workflow"] {
                let cli = run(&["validate", doc.to_str().unwrap(), "--mode", mode]);
                let (status, api) = http
                    .post_raw(&format!("/validate?mode={mode}"), std::fs::read(doc).unwrap())
                    .await;
                let stdout = String::from_utf8_lossy(&cli.stdout).into_owned();
                let stderr = String::from_utf8_lossy(&cli.stderr).into_owned();
                checked += 1;
                if status == 400 {
                    let message = api["message"].as_str().unwrap_or_default();
                    ensure!(
                        cli.status.code() == Some(2),
                        "{rel} {mode}: API 400 but CLI exit {:?}",
                        cli.status.code()
                    );
                    ensure!(
                        !message.is_empty() && stderr.contains(message),
                        "{rel} {mode}: CLI stderr {stderr:?} lacks {message:?}"
                    );
                    continue;
                }
                ensure!(status == 200, "{rel} {mode}: API {status} {api}");
                let findings: Vec<Finding> = serde_json::from_value(api).unwrap();
                let expected: Vec<String> = findings.iter().map(ToString::to_string).collect();
                let printed: Vec<&str> = stdout.lines().collect();
                ensure!(printed == expected, "{rel} {mode}: CLI {printed:?} API {expected:?}");
                let code = if validation::has_errors(&findings) { 1 } else { 0 };
                ensure!(
                    cli.status.code() == Some(code),
                    "{rel} {mode}: exit {:?}, want {code}",
                    cli.status.code()
                );
            }
        }
        Ok(format!("{} documents, {checked} comparisons", docs.len()))
    })
}
