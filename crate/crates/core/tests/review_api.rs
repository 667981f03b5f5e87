use std::path::Path;

use artaug::curation::{pair_id, Manifest, PairRecord, PixelsResponse, ReviewServer, Status};
use artaug::world::{render_scene, PromptSpec};
use serde_json::{json, Value};

fn write_pair(root: &Path, i: usize, status: Status) -> PairRecord {
    let p = PromptSpec::all()[i];
    let dir = root.join("iter0/pairs");
    std::fs::create_dir_all(&dir).unwrap();
    let id = pair_id(42, 0, i);
    let before = format!("iter0/pairs/{id}.before.pgm");
    let after = format!("iter0/pairs/{id}.after.pgm");
    render_scene(&p, 1, 16, 16).save_pgm(&root.join(&before)).unwrap();
    render_scene(&p, 2, 16, 16).save_pgm(&root.join(&after)).unwrap();
    PairRecord {
        id,
        iteration: if i.is_multiple_of(2) { 0 } else { 1 },
        prompt: p,
        refined_prompt: p,
        seed: i as u64,
        before_path: before,
        after_path: after,
        suggestions: vec![],
        critic: "rule_based".into(),
        scores: None,
        status,
        drop_reason: None,
        verdict: None,
    }
}

struct Fixture {
    _dir: tempfile::TempDir,
    manifest: Manifest,
    records: Vec<PairRecord>,
    server: ReviewServer,
    agent: ureq::Agent,
}

fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let manifest = Manifest::new(dir.path().join("manifest.jsonl"));
    let statuses = [
        Status::ReviewPending,
        Status::ReviewPending,
        Status::AutoDropped,
        Status::Accepted,
        Status::ReviewPending,
    ];
    let records: Vec<_> = statuses
        .iter()
        .enumerate()
        .map(|(i, &s)| write_pair(dir.path(), i, s))
        .collect();
    manifest.append_all(&records).unwrap();
    let server = ReviewServer::start(
        dir.path().to_path_buf(),
        manifest.clone(),
        "127.0.0.1:0".parse().unwrap(),
    )
    .unwrap();
    let agent = ureq::Agent::new_with_config(ureq::Agent::config_builder().http_status_as_error(false).build());
    Fixture {
        _dir: dir,
        manifest,
        records,
        server,
        agent,
    }
}

impl Fixture {
    fn get(&self, path: &str) -> (u16, Value) {
        let mut r = self.agent.get(&format!("{}{path}", self.server.url())).call().unwrap();
        let code = r.status().as_u16();
        (
            code,
            serde_json::from_str(&r.body_mut().read_to_string().unwrap()).unwrap_or(Value::Null),
        )
    }

    fn post(&self, path: &str, body: &str) -> (u16, Value) {
        let mut r = self
            .agent
            .post(&format!("{}{path}", self.server.url()))
            .header("Content-Type", "application/json")
            .send(body)
            .unwrap();
        let code = r.status().as_u16();
        (
            code,
            serde_json::from_str(&r.body_mut().read_to_string().unwrap()).unwrap_or(Value::Null),
        )
    }
}

#[test]
fn list_filters_and_pages() {
    let f = fixture();
    let (code, all) = f.get("/api/pairs");
    assert_eq!(code, 200);
    assert_eq!(all["total"], 5);
    let (_, pending) = f.get("/api/pairs?status=review_pending");
    assert_eq!(pending["total"], 3);
    let (_, it1) = f.get("/api/pairs?iteration=1");
    assert_eq!(it1["total"], 2);
    let (_, page) = f.get("/api/pairs?page=2&page_size=2");
    assert_eq!(page["items"].as_array().unwrap().len(), 2);
    assert_eq!(page["items"][0]["id"], f.records[2].id.to_string());
    assert_eq!(f.get("/api/pairs?status=bogus").0, 400);
}

#[test]
fn record_and_pixels() {
    let f = fixture();
    let id = f.records[0].id;
    let (code, rec) = f.get(&format!("/api/pairs/{id}"));
    assert_eq!(code, 200);
    let back: PairRecord = serde_json::from_value(rec).unwrap();
    assert_eq!(back, f.records[0]);

    let (code, px) = f.get(&format!("/api/pairs/{id}/pixels?which=after"));
    assert_eq!(code, 200);
    let px: PixelsResponse = serde_json::from_value(px).unwrap();
    assert_eq!((px.h, px.w, px.pixels.len()), (16, 16, 256));
    assert!(px.pixels.iter().all(|v| (0.0..=1.0).contains(v)));
    assert_eq!(f.get(&format!("/api/pairs/{id}/pixels?which=middle")).0, 400);
    assert_eq!(f.get("/api/pairs/not-a-uuid").0, 404);
    assert_eq!(f.get(&format!("/api/pairs/{}", pair_id(7, 7, 7))).0, 404);
}

#[test]
fn first_verdict_wins() {
    let f = fixture();
    let id = f.records[1].id;
    let (code, rec) = f.post(
        &format!("/api/pairs/{id}/verdict"),
        &json!({"decision": "accept", "reviewer": "ana", "note": "sharper"}).to_string(),
    );
    assert_eq!(code, 200, "{rec}");
    assert_eq!(rec["status"], "accepted");
    assert_eq!(f.manifest.get(id).unwrap().unwrap().status, Status::Accepted);
    let (code, _) = f.post(
        &format!("/api/pairs/{id}/verdict"),
        &json!({"decision": "reject", "reviewer": "bo"}).to_string(),
    );
    assert_eq!(code, 409);
    let v = f.manifest.get(id).unwrap().unwrap().verdict.unwrap();
    assert_eq!((v.reviewer.as_str(), v.note.as_str()), ("ana", "sharper"));
    assert!(v.timestamp.is_some());
}

#[test]
fn verdict_errors() {
    let f = fixture();
    let dropped = f.records[2].id;
    let ok_body = json!({"decision": "accept", "reviewer": "x"}).to_string();
    assert_eq!(f.post(&format!("/api/pairs/{dropped}/verdict"), &ok_body).0, 409);
    assert_eq!(
        f.post(&format!("/api/pairs/{}/verdict", pair_id(1, 1, 1)), &ok_body).0,
        404
    );
    let pending = f.records[0].id;
    assert_eq!(f.post(&format!("/api/pairs/{pending}/verdict"), "{oops").0, 400);
    assert_eq!(
        f.post(
            &format!("/api/pairs/{pending}/verdict"),
            r#"{"decision":"maybe","reviewer":"x"}"#
        )
        .0,
        400
    );
    assert_eq!(f.manifest.get(pending).unwrap().unwrap().status, Status::ReviewPending);
}

#[test]
fn concurrent_verdicts_have_one_winner() {
    let f = fixture();
    let id = f.records[4].id;
    let url = format!("{}/api/pairs/{id}/verdict", f.server.url());
    let codes: Vec<u16> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..8)
            .map(|k| {
                let (agent, url) = (f.agent.clone(), url.clone());
                s.spawn(move || {
                    let decision = if k % 2 == 0 { "accept" } else { "reject" };
                    agent
                        .post(&url)
                        .send(json!({"decision": decision, "reviewer": format!("r{k}")}).to_string())
                        .unwrap()
                        .status()
                        .as_u16()
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().unwrap()).collect()
    });
    assert_eq!(codes.iter().filter(|&&c| c == 200).count(), 1, "{codes:?}");
    assert_eq!(codes.iter().filter(|&&c| c == 409).count(), 7);
}

#[test]
fn stats_fold_manifest() {
    let f = fixture();
    let (code, stats) = f.get("/api/stats");
    assert_eq!(code, 200);
    let rows = stats.as_array().unwrap();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0]["iteration"], 0);
    assert_eq!(rows[0]["generated"], 3);
    assert_eq!(rows[1]["accepted"], 1);
}

#[test]
fn cors_headers_present() {
    let f = fixture();
    let r = f
        .agent
        .get(&format!("{}/api/stats", f.server.url()))
        .header("Origin", "http://localhost:5173")
        .call()
        .unwrap();
    assert_eq!(r.headers().get("access-control-allow-origin").unwrap(), "*");
}
