use std::time::Duration;

use echomaze_core::command::parse_script;
use echomaze_core::event::canonicalize;
use echomaze_core::scenario::Scenario;
use echomaze_core::session::{log_text, run_script, Session};
use echomaze_core::world::{Occupancy, Pose};
use echomaze_service::{serve, AppState, ServiceConfig};
use futures::StreamExt;
use rand::Rng;
use reqwest::{Client, StatusCode};
use serde_json::{json, Value};

const ANOMALY_SCRIPT: &str = include_str!("../../core/data/scripts/anomaly.txt");

struct Server {
    base: String,
    client: Client,
    stop: Option<tokio::sync::oneshot::Sender<()>>,
    task: Option<tokio::task::JoinHandle<std::io::Result<()>>>,
}

impl Server {
    async fn start(config: ServiceConfig) -> Self {
        let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
        let base = format!("http://{}", listener.local_addr().unwrap());
        let (stop, rx) = tokio::sync::oneshot::channel();
        let task = tokio::spawn(serve(listener, AppState::new(config), async {
            let _ = rx.await;
        }));
        Self {
            base,
            client: Client::new(),
            stop: Some(stop),
            task: Some(task),
        }
    }

    async fn shutdown(mut self) {
        self.stop.take().unwrap().send(()).unwrap();
        self.task.take().unwrap().await.unwrap().unwrap();
    }

    async fn post(&self, path: &str, body: Value) -> (StatusCode, Value) {
        let r = self.client.post(format!("{}{path}", self.base)).json(&body).send().await.unwrap();
        let status = r.status();
        (status, r.json().await.unwrap())
    }

    async fn get(&self, path: &str) -> (StatusCode, Value) {
        let r = self.client.get(format!("{}{path}", self.base)).send().await.unwrap();
        let status = r.status();
        (status, r.json().await.unwrap())
    }

    async fn create(&self, body: Value) -> String {
        let (status, v) = self.post("/sessions", body).await;
        assert_eq!(status, StatusCode::CREATED, "{v}");
        v["session_id"].as_str().unwrap().to_string()
    }

    /// Reads SSE data lines until the stream ends or `limit` events arrive.
    async fn read_events(&self, id: &str, after: Option<u64>, limit: usize) -> Vec<String> {
        let url = match after {
            Some(a) => format!("{}/sessions/{id}/events?after={a}", self.base),
            None => format!("{}/sessions/{id}/events", self.base),
        };
        let r = self.client.get(url).send().await.unwrap();
        assert_eq!(r.status(), StatusCode::OK);
        let mut body = r.bytes_stream();
        let mut buf = String::new();
        let mut out = Vec::new();
        while out.len() < limit {
            let chunk = match tokio::time::timeout(Duration::from_secs(20), body.next()).await {
                Ok(Some(c)) => c.unwrap(),
                Ok(None) => break,
                Err(_) => panic!("event stream stalled after {} events", out.len()),
            };
            buf.push_str(std::str::from_utf8(&chunk).unwrap());
            while let Some(end) = buf.find("\n\n") {
                let frame: String = buf.drain(..end + 2).collect();
                for line in frame.lines() {
                    if let Some(data) = line.strip_prefix("data: ") {
                        out.push(data.to_string());
                    }
                }
                if out.len() >= limit {
                    break;
                }
            }
        }
        out.truncate(limit);
        out
    }
}

fn seq_of(line: &str) -> u64 {
    serde_json::from_str::<Value>(line).unwrap()["seq"].as_u64().unwrap()
}

/// Drives a script over HTTP, sending lines to the answers endpoint while a question is pending.
async fn drive(server: &Server, id: &str, lines: &[String]) {
    for text in lines {
        let (_, state) = server.get(&format!("/sessions/{id}/state")).await;
        match state["mode"].as_str().unwrap() {
            "completed" => break,
            "awaiting_guidance" => {
                let (status, _) = server.post(&format!("/sessions/{id}/answers"), json!({ "text": text })).await;
                assert_eq!(status, StatusCode::OK);
            }
            _ => {
                let (status, _) = server.post(&format!("/sessions/{id}/utterances"), json!({ "text": text })).await;
                assert_eq!(status, StatusCode::OK);
            }
        }
    }
}

fn anomaly_lines() -> Vec<String> {
    parse_script(ANOMALY_SCRIPT).unwrap().into_iter().map(|l| l.text).collect()
}

#[tokio::test]
async fn create_and_inspect() {
    let server = Server::start(ServiceConfig::default()).await;
    let (status, v) = server.post("/sessions", json!({ "scenario_name": "default", "seed": 4 })).await;
    assert_eq!(status, StatusCode::CREATED);
    let id = v["session_id"].as_str().unwrap();
    assert!(id.len() >= 16 && id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_'));
    assert!(!v["events"].as_array().unwrap().is_empty());

    let local = Session::create(Scenario::bundled("default").unwrap(), 4).unwrap();
    let want: Vec<Value> = local.log().iter().map(|e| e.to_wire()).collect();
    assert_eq!(v["events"].as_array().unwrap(), &want);

    let (status, state) = server.get(&format!("/sessions/{id}/state")).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(state["mode"], "idle");
    let (pose, cov) = local.estimate();
    assert_eq!(state["estimated_pose"], canonicalize(json!(pose)));
    assert_eq!(state["pose_covariance_3x3"][1][1], canonicalize(json!(cov[(1, 1)])));
    assert!(state.get("true_pose").is_none());

    let (status, map) = server.get(&format!("/sessions/{id}/map")).await;
    assert_eq!(status, StatusCode::OK);
    let sc = Scenario::bundled("default").unwrap();
    assert_eq!(map["width_cells"], json!(sc.maze.grid().width_cells()));
    assert_eq!(map["grid"], json!(local.recovered_map().grid.to_rows()));
    // The bundled render is noiseless enough to recover the maze exactly.
    assert_eq!(map["grid"], json!(sc.maze.grid().to_rows()));
    assert_eq!(map["goal"], json!(sc.maze.goal()));
    server.shutdown().await;
}

#[tokio::test]
async fn creation_errors() {
    let server = Server::start(ServiceConfig::default()).await;
    let mut file = Scenario::bundled("anomaly").unwrap().to_file();
    file.maze.cells[3] = "#.#####.#.#x#.#".into();
    let (status, v) = server.post("/sessions", json!({ "scenario": file })).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert!(v["error"].as_str().unwrap().contains("row 3"), "{v}");

    let (status, _) = server.post("/sessions", json!({ "scenario_name": "nowhere" })).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let (status, _) = server.post("/sessions", json!({})).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let r = server.client.post(format!("{}/sessions", server.base)).body("{").send().await.unwrap();
    assert_eq!(r.status(), StatusCode::BAD_REQUEST);

    let mut file = Scenario::bundled("anomaly").unwrap().to_file();
    file.maze.start = Pose::new(0.42, 1.0, std::f64::consts::PI);
    let (status, v) = server.post("/sessions", json!({ "scenario": file })).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY, "{v}");
    server.shutdown().await;
}

#[tokio::test]
async fn same_seed_same_payloads() {
    let server = Server::start(ServiceConfig::default()).await;
    let (_, a) = server.post("/sessions", json!({ "scenario_name": "anomaly", "seed": 9 })).await;
    let (_, b) = server.post("/sessions", json!({ "scenario_name": "anomaly", "seed": 9 })).await;
    assert_ne!(a["session_id"], b["session_id"]);
    assert_eq!(a["events"], b["events"]);
    server.shutdown().await;
}

#[tokio::test]
async fn utterances_and_answers() {
    let server = Server::start(ServiceConfig::default()).await;
    let id = server.create(json!({ "scenario_name": "anomaly", "seed": 1 })).await;
    let path = format!("/sessions/{id}/utterances");

    let (status, v) = server.post(&path, json!({ "text": "what is around me" })).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(v["accepted"], true);
    assert!(v["events"].as_array().unwrap().iter().any(|e| e["kind"] == "narration"));

    let (status, v) = server.post(&path, json!({ "text": "flibber the wotsit" })).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(v["accepted"], false);
    assert_eq!(v["events"][0]["kind"], "rejected");

    let answers = format!("/sessions/{id}/answers");
    let (status, _) = server.post(&answers, json!({ "text": "yes" })).await;
    assert_eq!(status, StatusCode::CONFLICT);

    let (_, v) = server.post(&path, json!({ "text": "move forward 5 go" })).await;
    let asked: Vec<&Value> = v["events"].as_array().unwrap().iter().filter(|e| e["kind"] == "guidance_request").collect();
    assert_eq!(asked.len(), 1);
    assert_eq!(asked[0]["payload"]["text"], "What should I do? Should I move right?");

    let (status, v) = server.post(&answers, json!({ "text": "yes" })).await;
    assert_eq!(status, StatusCode::OK);
    let kinds: Vec<&str> = v["events"].as_array().unwrap().iter().map(|e| e["kind"].as_str().unwrap()).collect();
    assert!(kinds.contains(&"guidance_resolved"), "{kinds:?}");
    assert!(kinds.contains(&"completed"), "{kinds:?}");

    let (_, state) = server.get(&format!("/sessions/{id}/state")).await;
    assert_eq!(state["mode"], "completed");
    assert!(state["metrics"]["localization_rmse_m"].is_number());
    assert!(state["metrics"]["task_completion_steps"].is_number());
    let (status, _) = server.post(&path, json!({ "text": "go" })).await;
    assert_eq!(status, StatusCode::CONFLICT);
    let (status, _) = server.post(&answers, json!({ "text": "yes" })).await;
    assert_eq!(status, StatusCode::CONFLICT);
    let (status, _) = server.post(&path, json!({ "words": "go" })).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    server.shutdown().await;
}

#[tokio::test]
async fn unknown_session_is_404_everywhere() {
    let server = Server::start(ServiceConfig::default()).await;
    let id = "no-such-session-0000";
    for path in ["", "/state", "/map", "/events"] {
        let r = server.client.get(format!("{}/sessions/{id}{path}", server.base)).send().await.unwrap();
        assert_eq!(r.status(), StatusCode::NOT_FOUND, "{path}");
    }
    for path in ["/utterances", "/answers"] {
        let (status, v) = server.post(&format!("/sessions/{id}{path}"), json!({ "text": "go" })).await;
        assert_eq!(status, StatusCode::NOT_FOUND, "{path}");
        assert!(v["error"].as_str().unwrap().contains(id));
    }
    server.shutdown().await;
}

#[tokio::test]
async fn http_run_matches_in_process_run() {
    let dir = tempfile::tempdir().unwrap();
    let server = Server::start(ServiceConfig {
        log_dir: Some(dir.path().to_path_buf()),
    })
    .await;
    let lines = anomaly_lines();
    let id = server.create(json!({ "scenario_name": "anomaly", "seed": 5 })).await;
    drive(&server, &id, &lines).await;
    let streamed = server.read_events(&id, None, usize::MAX).await;

    let script = parse_script(ANOMALY_SCRIPT).unwrap();
    let local = run_script(Scenario::bundled("anomaly").unwrap(), 5, &script).unwrap();
    let want = log_text(local.session.log());
    let got: String = streamed.iter().map(|l| format!("{l}\n")).collect();
    assert_eq!(got, want);
    server.shutdown().await;
    let file = std::fs::read_to_string(dir.path().join(format!("{id}.jsonl"))).unwrap();
    assert_eq!(file, want);
}

#[tokio::test]
async fn stream_resumes_after_seq() {
    let server = Server::start(ServiceConfig::default()).await;
    let id = server.create(json!({ "scenario_name": "default", "seed": 2 })).await;
    let (_, _) = server
        .post(&format!("/sessions/{id}/utterances"), json!({ "text": "move forward 3 go" }))
        .await;
    let first = server.read_events(&id, None, 5).await;
    let seqs: Vec<u64> = first.iter().map(|l| seq_of(l)).collect();
    assert_eq!(seqs, (seqs[0]..seqs[0] + 5).collect::<Vec<_>>());
    let resumed = server.read_events(&id, Some(seqs[4]), 1).await;
    assert_eq!(seq_of(&resumed[0]), seqs[4] + 1);

    // Last-Event-ID works the same way.
    let r = server
        .client
        .get(format!("{}/sessions/{id}/events", server.base))
        .header("Last-Event-ID", seqs[4].to_string())
        .send()
        .await
        .unwrap();
    let mut body = r.bytes_stream();
    let chunk = body.next().await.unwrap().unwrap();
    let text = String::from_utf8_lossy(&chunk).to_string();
    assert!(text.contains(&format!("id: {}", seqs[4] + 1)), "{text}");
    server.shutdown().await;
}

#[tokio::test]
async fn live_stream_follows_new_events() {
    let server = Server::start(ServiceConfig::default()).await;
    let id = server.create(json!({ "scenario_name": "default", "seed": 2 })).await;
    let last = {
        let (_, v) = server.post(&format!("/sessions/{id}/utterances"), json!({ "text": "where am i" })).await;
        seq_of(&v["events"].as_array().unwrap().last().unwrap().to_string())
    };
    let reader = {
        let base = server.base.clone();
        let id = id.clone();
        tokio::spawn(async move {
            let s = Server {
                base,
                client: Client::new(),
                stop: None,
                task: None,
            };
            s.read_events(&id, Some(last), 2).await
        })
    };
    tokio::time::sleep(Duration::from_millis(100)).await;
    server.post(&format!("/sessions/{id}/utterances"), json!({ "text": "where am i" })).await;
    let got = reader.await.unwrap();
    assert_eq!(got.iter().map(|l| seq_of(l)).collect::<Vec<_>>(), [last + 1, last + 2]);
    server.shutdown().await;
}

#[tokio::test]
async fn chaos_client_assembles_exact_log() {
    let server = Server::start(ServiceConfig::default()).await;
    let lines = anomaly_lines();
    let id = server.create(json!({ "scenario_name": "anomaly", "seed": 8 })).await;
    drive(&server, &id, &lines).await;

    let mut rng = echomaze_core::rng::seeded(77);
    let mut assembled: Vec<String> = Vec::new();
    loop {
        let after = assembled.last().map(|l| seq_of(l));
        let take = rng.random_range(1..12);
        let batch = server.read_events(&id, after, take).await;
        if batch.is_empty() {
            break;
        }
        assembled.extend(batch);
    }
    let script = parse_script(ANOMALY_SCRIPT).unwrap();
    let local = run_script(Scenario::bundled("anomaly").unwrap(), 8, &script).unwrap();
    let got: String = assembled.iter().map(|l| format!("{l}\n")).collect();
    assert_eq!(got, log_text(local.session.log()));
    server.shutdown().await;
}
