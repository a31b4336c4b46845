use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::time::Duration;

use omake_core::corpus::ImageGrid;
use omake_magen::fixture::{self, FixtureEmbedder};
use omake_magen::pipeline::to_jsonl;
use omake_magen::*;

fn run(threshold: f64, max_inflight: usize) -> (AugmentOutput, tempfile::TempDir) {
    let dir = tempfile::tempdir().unwrap();
    let kb = fixture::knowledge_base(dir.path()).unwrap();
    let (cap, ver) = (fixture::captioner(), fixture::verifier());
    let agents = Agents { captioner: &cap, verifier: &ver };
    let cfg = AugmentConfig { threshold, max_inflight, ..Default::default() };
    let out = augment(&fixture::examples().unwrap(), &fixture::pool(), &kb, &FixtureEmbedder::new(), &agents, &cfg).unwrap();
    (out, dir)
}

#[test]
fn fixture_routes_six_and_splits_verdicts() {
    let (out, _dir) = run(DEFAULT_THRESHOLD, 4);
    let routed: Vec<&str> = out.records.iter().filter(|r| r.routed).map(|r| r.id.as_str()).collect();
    assert_eq!(routed, vec!["fx-04", "fx-05", "fx-06", "fx-07", "fx-08", "fx-09"]);
    assert_eq!(out.count(Provenance::Original), 4);
    assert_eq!(out.count(Provenance::Verified), 4);
    assert_eq!(out.count(Provenance::InitialRetained), 2);
    for r in &out.records {
        assert_eq!(r.routed, r.score < DEFAULT_THRESHOLD);
        assert!(r.failed.is_none(), "{r:?}");
        if r.provenance == Provenance::InitialRetained {
            assert_eq!(Some(&r.final_caption), r.initial_caption.as_ref());
            assert_eq!(r.verdict.as_ref().unwrap().status, VerdictStatus::NoDefinitiveDiagnosis);
        }
        if let Some(Verdict { status: VerdictStatus::Verified, diagnosis: Some(d), .. }) = &r.verdict {
            assert!(fixture::DISEASES.contains(&d.as_str()));
        }
    }
    let ids: Vec<&str> = out.samples.iter().map(|s| s.id.as_str()).collect();
    assert_eq!(ids, fixture::samples().iter().map(|s| s.id.as_str()).collect::<Vec<_>>());
}

#[test]
fn output_is_byte_identical_across_runs_and_concurrency() {
    let (a, _d1) = run(DEFAULT_THRESHOLD, 4);
    let (b, _d2) = run(DEFAULT_THRESHOLD, 1);
    assert_eq!(to_jsonl(&a.samples).unwrap(), to_jsonl(&b.samples).unwrap());
    assert_eq!(to_jsonl(&a.records).unwrap(), to_jsonl(&b.records).unwrap());
}

#[test]
fn threshold_boundaries() {
    let (all, _d) = run(1.01, 4);
    assert!(all.records.iter().all(|r| r.routed));
    let (none, _d) = run(0.0, 4);
    assert!(none.records.iter().all(|r| !r.routed));
    assert_eq!(none.samples, fixture::samples());
}

#[test]
fn rerun_on_output_routes_nothing() {
    let (out, dir) = run(DEFAULT_THRESHOLD, 4);
    let kb = KnowledgeBase::open(dir.path()).unwrap();
    let examples = omake_core::corpus::resolve_images(out.samples, None).unwrap();
    let (cap, ver) = (fixture::captioner(), fixture::verifier());
    let again = augment(&examples, &fixture::pool(), &kb, &FixtureEmbedder::new(), &Agents { captioner: &cap, verifier: &ver }, &AugmentConfig::default()).unwrap();
    assert!(again.records.iter().all(|r| !r.routed));
}

#[test]
fn pipeline_errors_keep_the_original_caption() {
    let dir = tempfile::tempdir().unwrap();
    let kb = fixture::knowledge_base(dir.path()).unwrap();
    let cap = fixture::captioner().script(Role::Captioning, "fx-05", vec![MockReply::Timeout]);
    let ver = fixture::verifier();
    let out = augment(&fixture::examples().unwrap(), &fixture::pool(), &kb, &FixtureEmbedder::new(), &Agents { captioner: &cap, verifier: &ver }, &AugmentConfig::default()).unwrap();
    let r = &out.records[5];
    assert!(r.failed.as_ref().unwrap().contains("fx-05"));
    assert_eq!(r.provenance, Provenance::Original);
    assert_eq!(out.samples[5], fixture::samples()[5]);
    assert_eq!(cap.calls(Role::Captioning, "fx-05"), 3);
}

#[test]
fn timeout_then_success_logs_one_retry() {
    let dir = tempfile::tempdir().unwrap();
    let kb = fixture::knowledge_base(dir.path()).unwrap();
    let cap = fixture::captioner().script(
        Role::Captioning,
        "fx-04",
        vec![MockReply::Timeout, MockReply::Text(fixture::initial_caption(4))],
    );
    let ver = fixture::verifier();
    let out = augment(&fixture::examples().unwrap(), &fixture::pool(), &kb, &FixtureEmbedder::new(), &Agents { captioner: &cap, verifier: &ver }, &AugmentConfig::default()).unwrap();
    assert_eq!(out.records[4].retries, 1);
    assert_eq!(out.records[4].provenance, Provenance::Verified);
    assert_eq!(out.records.iter().filter(|r| r.id == "fx-04").count(), 1);
}

#[test]
fn missing_card_fails_safe_with_suggestions() {
    let dir = tempfile::tempdir().unwrap();
    let kb = KnowledgeBase::open(dir.path()).unwrap();
    for c in fixture::cards().into_iter().filter(|c| c.name != "lichen planus") {
        kb.store(&c).unwrap();
    }
    let err = kb.retrieve("Lichen Planus").unwrap_err();
    assert!(matches!(err, Error::MissingCard { .. }));
}

#[test]
fn scores_are_cosines() {
    let e = FixtureEmbedder::new();
    let scores = score_pairs(&fixture::examples().unwrap(), &e).unwrap();
    for ((_, s), want) in scores.iter().zip(fixture::SCORES) {
        assert!((s - want).abs() < 1e-12);
    }
}

struct Table(Vec<(&'static str, Vec<f64>)>);

impl Embedder for Table {
    fn embed_image(&self, _: &ImageGrid) -> Result<Vec<f64>> {
        Ok(vec![1.0, 0.0, 0.0])
    }
    fn embed_text(&self, text: &str) -> Result<Vec<f64>> {
        Ok(self.0.iter().find(|(t, _)| *t == text).unwrap().1.clone())
    }
}

#[test]
fn top5_orders_by_score_then_name() {
    let img = ImageGrid::new(1, vec![0.0]).unwrap();
    let t = Table(vec![
        ("e", vec![0.9, 0.1, 0.0]),
        ("d", vec![0.9, 0.1, 0.0]),
        ("c", vec![0.1, 0.9, 0.0]),
        ("b", vec![1.0, 0.0, 0.0]),
        ("a", vec![0.0, 0.0, 1.0]),
        ("f", vec![0.5, 0.5, 0.0]),
    ]);
    let pool: Vec<String> = ["a", "b", "c", "d", "e", "f"].iter().map(|s| s.to_string()).collect();
    let top: Vec<String> = top5_diagnoses(&img, &pool, &t).unwrap().into_iter().map(|(d, _)| d).collect();
    assert_eq!(top, vec!["b", "d", "e", "f", "c"]);
    let five: Vec<String> = pool[..5].to_vec();
    let top: Vec<String> = top5_diagnoses(&img, &five, &t).unwrap().into_iter().map(|(d, _)| d).collect();
    assert_eq!(top, vec!["b", "d", "e", "c", "a"]);
    assert!(matches!(top5_diagnoses(&img, &pool[..4], &t), Err(Error::Config(_))));
}

#[test]
fn caption_prompt_names_all_candidates() {
    struct Capture(std::sync::Mutex<Option<AgentRequest>>);
    impl Backend for Capture {
        fn call(&self, r: &AgentRequest) -> Result<String> {
            *self.0.lock().unwrap() = Some(r.clone());
            Ok(" A caption. ".into())
        }
    }
    let b = Capture(Default::default());
    let img = ImageGrid::new(2, vec![0.0; 4]).unwrap();
    let top5: Vec<(String, f64)> = fixture::DISEASES[..5].iter().map(|d| (d.to_string(), 0.1)).collect();
    let (text, retries) = caption("s9", &img, &top5, &b, 2).unwrap();
    assert_eq!((text.as_str(), retries), ("A caption.", 0));
    let req = b.0.lock().unwrap().clone().unwrap();
    for (d, _) in &top5 {
        assert!(req.role_prompt.contains(d.as_str()));
    }
    assert!(req.image_b64.is_some());
    let empty = MockBackend::with_fallback(|_, _| "  ".into());
    assert!(matches!(caption("s9", &img, &top5, &empty, 2), Err(Error::Sample { .. })));
}

#[test]
fn summary_agent_produces_cards() {
    let guttate = "```\nNAME: guttate psoriasis\nPOS: small, red, scaly, drop-like spots; sudden onset\nSITES: trunk; limbs\nMINSET: drop-like papules\n```";
    let mock = MockBackend::new().script(Role::Summary, "guttate psoriasis", vec![MockReply::Text(guttate.into())]);
    let card = summarize("guttate psoriasis", "Guttate psoriasis presents as ...", &mock, 1).unwrap();
    assert_eq!(card.pos[0], "small, red, scaly, drop-like spots");
    let fallback = summarize("x", "First sentence. Second.", &MockBackend::new(), 1).unwrap();
    assert_eq!(fallback.minset, vec!["First sentence"]);
    let broken = MockBackend::new().script(Role::Summary, "y", vec![MockReply::Text("NAME: y\nPOS: a\nSITES: b".into())]);
    assert!(matches!(summarize("y", "p", &broken, 1), Err(Error::Card(_))));
    assert_eq!(broken.calls(Role::Summary, "y"), 2);
}

#[test]
fn verifier_outcomes() {
    let img = ImageGrid::new(2, vec![0.0; 4]).unwrap();
    let cards = fixture::cards()[..5].to_vec();
    let reply = |t: &str| MockBackend::new().script(Role::Verification, "s", vec![MockReply::Text(t.into())]);
    let (v, _) = verify("s", &img, "init", &cards, &reply("No definitive diagnosis"), 0).unwrap();
    assert_eq!(v.status, VerdictStatus::NoDefinitiveDiagnosis);
    let (v, _) = verify("s", &img, "init", &cards, &reply("DIAGNOSIS: atopic dermatitis\nCAPTION: better"), 0).unwrap();
    assert_eq!((v.diagnosis.as_deref(), v.refined_caption.as_str()), (Some("atopic dermatitis"), "better"));
    let err = verify("s", &img, "init", &cards, &reply("DIAGNOSIS: tinea corporis\nCAPTION: x"), 0).unwrap_err();
    assert!(err.to_string().contains("not one of the candidates"));
    assert!(verify("s", &img, "init", &cards[..4], &reply("x"), 0).is_err());
    let garbage = reply("???");
    assert!(verify("s", &img, "init", &cards, &garbage, 0).is_err());
    assert_eq!(garbage.calls(Role::Verification, "s"), 2);
}

/// Serves the given status lines once each and returns the request bodies seen.
fn serve(responses: Vec<(u16, &'static str)>) -> (String, std::thread::JoinHandle<Vec<String>>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/v1/agent", listener.local_addr().unwrap());
    let handle = std::thread::spawn(move || {
        let mut bodies = Vec::new();
        for (code, body) in responses {
            let (mut stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut len = 0;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                if line == "\r\n" {
                    break;
                }
                if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                    len = v.trim().parse().unwrap();
                }
            }
            let mut buf = vec![0; len];
            reader.read_exact(&mut buf).unwrap();
            bodies.push(String::from_utf8(buf).unwrap());
            write!(stream, "HTTP/1.1 {code} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}", body.len()).unwrap();
        }
        bodies
    });
    (url, handle)
}

#[test]
fn http_backend_speaks_the_wire_protocol() {
    let (url, server) = serve(vec![(503, "busy"), (200, r#"{"text": "hello"}"#)]);
    let backend = HttpBackend::new(url, Duration::from_secs(5));
    let req = AgentRequest { role_prompt: "ROLE: captioning".into(), user_text: "SAMPLE: a".into(), image_b64: Some("AAAA".into()) };
    let (text, retries) = call_with_retry(&backend, &req, 2).unwrap();
    assert_eq!((text.as_str(), retries), ("hello", 1));
    let bodies = server.join().unwrap();
    let sent: serde_json::Value = serde_json::from_str(&bodies[1]).unwrap();
    assert_eq!(sent, serde_json::json!({"role_prompt": "ROLE: captioning", "user_text": "SAMPLE: a", "image_b64": "AAAA"}));
}

#[test]
fn http_client_errors_are_not_retried() {
    let (url, server) = serve(vec![(400, "bad")]);
    let backend = HttpBackend::new(url, Duration::from_secs(5));
    let req = AgentRequest { role_prompt: "r".into(), user_text: "u".into(), image_b64: None };
    assert!(matches!(call_with_retry(&backend, &req, 3), Err(Error::Backend(_))));
    let bodies = server.join().unwrap();
    assert!(!bodies[0].contains("image_b64"));
}
