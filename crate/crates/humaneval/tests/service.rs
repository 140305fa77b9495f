use std::path::Path;
use std::sync::Arc;

use medvqa_core::data::AnswerType;
use medvqa_core::eval::{aggregate, parse_jsonl, to_jsonl, Prediction, Regime, VerdictRecord};
use medvqa_core::humaneval::{replay, EvalSession, SessionReport};
use medvqa_humaneval::{AppState, ServiceConfig};
use reqwest::StatusCode;
use serde_json::{json, Value};
use tokio::task::JoinHandle;

struct Server {
    base: String,
    state: Arc<AppState>,
    task: JoinHandle<std::io::Result<()>>,
    http: reqwest::Client,
}

impl Server {
    async fn start(data_dir: &Path) -> Self {
        let state = AppState::open(ServiceConfig::new(data_dir)).unwrap();
        let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
        let base = format!("http://{}", listener.local_addr().unwrap());
        let task = tokio::spawn(medvqa_humaneval::serve(listener, state.clone()));
        Self {
            base,
            state,
            task,
            http: reqwest::Client::new(),
        }
    }

    /// Simulates a crash between requests: the task is gone, only disk survives.
    async fn kill(self) {
        self.task.abort();
        let _ = self.task.await;
    }

    async fn get(&self, path: &str) -> (StatusCode, String) {
        let r = self.http.get(format!("{}{path}", self.base)).send().await.unwrap();
        (r.status(), r.text().await.unwrap())
    }

    async fn get_json(&self, path: &str) -> (StatusCode, Value) {
        let (s, body) = self.get(path).await;
        (s, serde_json::from_str(&body).unwrap_or(Value::Null))
    }

    async fn post(&self, path: &str, body: Value) -> (StatusCode, Value) {
        let r = self
            .http
            .post(format!("{}{path}", self.base))
            .json(&body)
            .send()
            .await
            .unwrap();
        (r.status(), r.json().await.unwrap_or(Value::Null))
    }

    async fn verdict(&self, sid: &str, item: &str, annotator: &str, verdict: &str) -> (StatusCode, Value) {
        self.post(
            &format!("/sessions/{sid}/items/{item}/verdict"),
            json!({ "annotator": annotator, "verdict": verdict }),
        )
        .await
    }
}

fn pred(id: &str, q: &str, gt: &str, gen: &str, t: AnswerType) -> Prediction {
    Prediction {
        id: id.into(),
        question: q.into(),
        ground_truth: gt.into(),
        generated: gen.into(),
        answer_type: t,
    }
}

/// The four review pairs plus two exact matches that never enter review.
fn fixture() -> String {
    let preds = vec![
        pred("r1", "What kind of image is this?", "x-ray", "chest x-ray", AnswerType::Open),
        pred("r2", "The mass is found in which part of the pancreas?", "pancreatic head", "head", AnswerType::Open),
        pred("r3", "Is the spleen present?", "on patient's left", "yes", AnswerType::Closed),
        pred(
            "r4",
            "Are pleural opacities located on the left, right, or both sides of the lung?",
            "both",
            "bilateral",
            AnswerType::Open,
        ),
        pred("e1", "Is there a fracture?", "no", "No.", AnswerType::Closed),
        pred("e2", "Which organ is enlarged?", "liver", "Liver", AnswerType::Open),
    ];
    to_jsonl(&preds)
}

async fn create(s: &Server, predictions: &str) -> String {
    let (status, body) = s
        .post("/sessions", json!({ "predictions": predictions, "annotators": ["A1", "A2"] }))
        .await;
    assert_eq!(status, StatusCode::CREATED, "{body}");
    body["session_id"].as_str().unwrap().to_string()
}

/// A1 and A2 agree on r1, r2, r4 and split on r3.
const A1: [(&str, &str); 4] = [("r1", "CORRECT"), ("r2", "CORRECT"), ("r3", "INCORRECT"), ("r4", "CORRECT")];
const A2: [(&str, &str); 4] = [("r1", "CORRECT"), ("r2", "CORRECT"), ("r3", "CORRECT"), ("r4", "CORRECT")];

#[tokio::test]
async fn full_lifecycle_over_http() {
    let dir = tempfile::tempdir().unwrap();
    let s = Server::start(dir.path()).await;
    let preds = fixture();
    let sid = create(&s, &preds).await;

    let (status, body) = s
        .post("/sessions", json!({ "predictions": preds, "annotators": ["A1", "A2"] }))
        .await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert_eq!(body["session_id"], json!(sid));

    let (_, summary) = s.get_json(&format!("/sessions/{sid}")).await;
    assert_eq!((summary["n_items"].as_u64(), summary["n_exact"].as_u64()), (Some(4), Some(2)));
    assert_eq!(summary["status"], "open");

    for (item, v) in A1 {
        let (status, ack) = s.verdict(&sid, item, "A1", v).await;
        assert_eq!(status, StatusCode::OK, "{ack}");
    }
    let (status, _) = s.verdict(&sid, "r1", "A1", "INCORRECT").await;
    assert_eq!(status, StatusCode::CONFLICT, "verdicts are write-once");
    let (status, _) = s.verdict(&sid, "nope", "A2", "CORRECT").await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    let (status, _) = s.verdict(&sid, "r1", "A3", "CORRECT").await;
    assert_eq!(status, StatusCode::FORBIDDEN);

    for (i, (item, v)) in A2.iter().enumerate() {
        let (_, next) = s.get_json(&format!("/sessions/{sid}/next?annotator=A2")).await;
        assert_eq!(next["item"]["item_id"], json!(item));
        assert_eq!(next["remaining"].as_u64(), Some(4 - i as u64));
        let (status, ack) = s.verdict(&sid, item, "A2", v).await;
        assert_eq!(status, StatusCode::OK);
        let expected = if i == 3 { "reconciling" } else { "open" };
        assert_eq!(ack["status"], expected);
    }

    let (_, disputes) = s.get_json(&format!("/sessions/{sid}/disputes")).await;
    let ids: Vec<&str> = disputes.as_array().unwrap().iter().map(|d| d["item_id"].as_str().unwrap()).collect();
    assert_eq!(ids, ["r3"]);
    assert_eq!(disputes[0]["verdicts"], json!({ "A1": "INCORRECT", "A2": "CORRECT" }));

    let (status, body) = s.post(&format!("/sessions/{sid}/finalize"), json!({ "actor": "ADJ" })).await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert_eq!(body["unfinalized"], json!(["r3"]));

    let reconcile = |item: &'static str| {
        let path = format!("/sessions/{sid}/items/{item}/reconcile");
        let s = &s;
        async move { s.post(&path, json!({ "adjudicator": "ADJ", "verdict": "INCORRECT" })).await }
    };
    assert_eq!(reconcile("r1").await.0, StatusCode::CONFLICT, "agreed items cannot be reconciled");
    let (status, item) = reconcile("r3").await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!((item["final"].as_str(), item["adjudicator"].as_str()), (Some("INCORRECT"), Some("ADJ")));
    assert_eq!(reconcile("r3").await.0, StatusCode::CONFLICT);

    let (status, report) = s.post(&format!("/sessions/{sid}/finalize"), json!({ "actor": "ADJ" })).await;
    assert_eq!(status, StatusCode::OK, "{report}");
    let report: SessionReport = serde_json::from_value(report).unwrap();
    // Exact: e1 closed, e2 open. Assisted adds r1, r2, r4 (open).
    assert_eq!((report.exact.correct_open, report.exact.correct_closed), (1, 1));
    assert_eq!((report.assisted.correct_open, report.assisted.correct_closed), (4, 1));
    assert_eq!((report.assisted.n_open, report.assisted.n_closed), (4, 2));
    assert!(report.assisted.acc_overall >= report.exact.acc_overall);
    assert_eq!((report.agreement.n_items, report.agreement.n_agree), (4, 3));

    let (_, again) = s.get_json(&format!("/sessions/{sid}/report")).await;
    assert_eq!(serde_json::from_value::<SessionReport>(again).unwrap(), report);
    let (status, _) = s.verdict(&sid, "r1", "A2", "INCORRECT").await;
    assert_eq!(status, StatusCode::CONFLICT, "finalized sessions are read-only");

    // Recomputing from the exported verdict file gives the same numbers.
    let (status, text) = s.get(&format!("/sessions/{sid}/verdicts")).await;
    assert_eq!(status, StatusCode::OK);
    let records: Vec<VerdictRecord> = parse_jsonl(&text).unwrap();
    assert_eq!(aggregate(&records, Regime::Exact).unwrap(), report.exact);
    assert_eq!(aggregate(&records, Regime::Assisted).unwrap(), report.assisted);
    s.kill().await;
}

#[tokio::test]
async fn annotators_never_see_each_other_while_open() {
    let dir = tempfile::tempdir().unwrap();
    let s = Server::start(dir.path()).await;
    let sid = create(&s, &fixture()).await;

    let a2_reads = [
        format!("/sessions/{sid}"),
        "/sessions".to_string(),
        format!("/sessions/{sid}/next?annotator=A2"),
        format!("/sessions/{sid}/items?annotator=A2"),
    ];
    let before: Vec<String> = get_all(&s, &a2_reads).await;

    for (item, v) in A1 {
        s.verdict(&sid, item, "A1", v).await;
    }
    for (i, path) in a2_reads.iter().enumerate() {
        let (status, body) = s.get(path).await;
        assert_eq!(status, StatusCode::OK);
        assert!(!body.contains("CORRECT"), "{path} leaks a verdict: {body}");
        // Progress counters move; A2's own views must not.
        if path.contains("annotator=A2") {
            assert_eq!(body, before[i], "{path} changed after A1 judged");
        }
    }
    for gated in ["disputes", "agreement", "verdicts", "report"] {
        let (status, body) = s.get(&format!("/sessions/{sid}/{gated}")).await;
        assert_eq!(status, StatusCode::CONFLICT, "{gated}: {body}");
        assert!(!body.contains("CORRECT"));
    }
    // A1's own view shows only A1's verdicts.
    let (_, mine) = s.get_json(&format!("/sessions/{sid}/items?annotator=A1")).await;
    for (view, (_, v)) in mine.as_array().unwrap().iter().zip(A1) {
        assert_eq!(view["my_verdict"], json!(v));
        assert!(view.get("verdicts").is_none() && view.get("hint").is_none());
    }
    s.kill().await;
}

async fn get_all(s: &Server, paths: &[String]) -> Vec<String> {
    let mut out = Vec::new();
    for p in paths {
        out.push(s.get(p).await.1);
    }
    out
}

#[tokio::test]
async fn restart_replays_identical_state() {
    let dir = tempfile::tempdir().unwrap();
    let s = Server::start(dir.path()).await;
    let sid = create(&s, &fixture()).await;
    for (item, v) in &A1[..2] {
        s.verdict(&sid, item, "A1", v).await;
    }
    let live = s.state.snapshot(&sid).await.unwrap();
    let log_path = s.state.log_path(&sid);
    s.kill().await;

    // A request cut off mid-write leaves a torn line; restart drops it.
    std::fs::OpenOptions::new()
        .append(true)
        .open(&log_path)
        .and_then(|mut f| std::io::Write::write_all(&mut f, b"{\"seq\":3,\"actor\":\"A1\""))
        .unwrap();

    let s = Server::start(dir.path()).await;
    assert_eq!(s.state.snapshot(&sid).await.unwrap(), live);
    for (item, v) in &A1[2..] {
        assert_eq!(s.verdict(&sid, item, "A1", v).await.0, StatusCode::OK);
    }
    for (item, v) in A2 {
        assert_eq!(s.verdict(&sid, item, "A2", v).await.0, StatusCode::OK);
    }
    s.post(
        &format!("/sessions/{sid}/items/r3/reconcile"),
        json!({ "adjudicator": "ADJ", "verdict": "CORRECT" }),
    )
    .await;
    let (status, report) = s.post(&format!("/sessions/{sid}/finalize"), json!({ "actor": "ADJ" })).await;
    assert_eq!(status, StatusCode::OK);
    let final_live = s.state.snapshot(&sid).await.unwrap();
    s.kill().await;

    let (replayed, consumed): (EvalSession, usize) = replay(&std::fs::read_to_string(&log_path).unwrap()).unwrap();
    assert_eq!(replayed, final_live);
    assert_eq!(consumed as u64, std::fs::metadata(&log_path).unwrap().len());

    let s = Server::start(dir.path()).await;
    let snap = s.state.snapshot(&sid).await.unwrap();
    assert_eq!(serde_json::to_string(&snap).unwrap(), serde_json::to_string(&final_live).unwrap());
    assert_eq!(s.get_json(&format!("/sessions/{sid}/report")).await.1, report);
    s.kill().await;
}

#[tokio::test]
async fn all_exact_session_starts_finalized() {
    let dir = tempfile::tempdir().unwrap();
    let s = Server::start(dir.path()).await;
    let preds = to_jsonl(&[pred("e1", "Is it normal?", "yes", "Yes", AnswerType::Closed)]);
    let sid = create(&s, &preds).await;
    let (_, summary) = s.get_json(&format!("/sessions/{sid}")).await;
    assert_eq!(summary["status"], "finalized");
    let (status, report) = s.get_json(&format!("/sessions/{sid}/report")).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(report["assisted"]["correct_closed"], 1);

    let (status, _) = s.post("/sessions", json!({ "predictions": "", "annotators": ["A1", "A2"] })).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let (status, _) = s
        .post("/sessions", json!({ "predictions": fixture(), "annotators": ["A1", "A1"] }))
        .await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    s.kill().await;
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn concurrent_annotators_serialize() {
    let dir = tempfile::tempdir().unwrap();
    let s = Arc::new(Server::start(dir.path()).await);
    let sid = create(&s, &fixture()).await;
    let mut tasks = Vec::new();
    for (annotator, plan) in [("A1", A1), ("A2", A2)] {
        for (item, v) in plan {
            let (s, sid) = (s.clone(), sid.clone());
            tasks.push(tokio::spawn(async move { s.verdict(&sid, item, annotator, v).await.0 }));
        }
    }
    for t in tasks {
        assert_eq!(t.await.unwrap(), StatusCode::OK);
    }
    let snap = s.state.snapshot(&sid).await.unwrap();
    assert_eq!(snap.last_seq, 8);
    let text = std::fs::read_to_string(s.state.log_path(&sid)).unwrap();
    let seqs: Vec<u64> = text
        .lines()
        .map(|l| serde_json::from_str::<Value>(l).unwrap()["seq"].as_u64().unwrap())
        .collect();
    assert_eq!(seqs, (0..=8).collect::<Vec<_>>());
    assert_eq!(replay(&text).unwrap().0, snap);
}

#[tokio::test]
async fn images_served_read_only() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::create_dir_all(dir.path().join("images")).unwrap();
    std::fs::write(dir.path().join("images/a.png"), b"png-bytes").unwrap();
    std::fs::write(dir.path().join("secret.txt"), b"outside").unwrap();
    let s = Server::start(dir.path()).await;
    assert_eq!(s.get("/images/a.png").await, (StatusCode::OK, "png-bytes".to_string()));
    assert_eq!(s.get("/images/missing.png").await.0, StatusCode::NOT_FOUND);
    assert_eq!(s.get("/images/%2e%2e/secret.txt").await.0, StatusCode::NOT_FOUND);
    assert_eq!(s.get("/images/..%2fsecret.txt").await.0, StatusCode::NOT_FOUND);
    let r = s.http.post(format!("{}/images/a.png", s.base)).send().await.unwrap();
    assert!(r.status().is_client_error());
    s.kill().await;
}
