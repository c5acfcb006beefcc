//! Record through a scripted transport, then replay with no network at all.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Duration;

use async_trait::async_trait;
use serde_json::{json, Value};

use refinebench_core::benchmark::parse_benchmark;
use refinebench_core::config::{BackendMode, Config};
use refinebench_core::gateway::{GatewayError, HttpReply, Transport};
use refinebench_core::pipeline::{open_run, score_events, Pipeline, RunSetup};
use refinebench_core::store::Durability;
use refinebench_core::verify::normalized_log;

const CONFIG: &str = r#"
iterations = 1

[retry]
max_attempts = 1
base_backoff_ms = 1

[[models]]
name = "cand"
vram_16bit_gb = 13.78
vram_4bit_gb = 4.13

[[models]]
name = "ctrl"
role = "control"

[[models]]
name = "judge"
role = "oracle"

[endpoints.cand]
kind = "http"
base_url = "http://cand.invalid"
remote_model = "cand-remote"

[endpoints.ctrl]
kind = "http"
base_url = "http://ctrl.invalid"

[endpoints.judge]
kind = "http"
base_url = "http://judge.invalid"
"#;

const BENCH: &str = r#"{"id":"w1","category":"writing","text":"Write a two-line poem about rain."}
{"id":"k1","category":"knowledge","text":"Why is the sky blue?"}"#;

/// Answers every call locally and counts them.
#[derive(Default)]
struct Scripted {
    calls: AtomicUsize,
}

#[async_trait]
impl Transport for Scripted {
    async fn post_json(&self, url: &str, _: Option<&str>, body: &Value, _: Duration) -> Result<HttpReply, GatewayError> {
        let n = self.calls.fetch_add(1, Ordering::SeqCst);
        let prompt = body["messages"][0]["content"].as_str().unwrap_or_default();
        let content = if url.contains("judge") {
            if prompt.find("[cand") < prompt.find("[ctrl") { "8 6\nfirst is better" } else { "6 8\nsecond is better" }.to_string()
        } else {
            format!("[{}] reply {n} to {} chars", if url.contains("cand") { "cand" } else { "ctrl" }, prompt.len())
        };
        Ok(HttpReply {
            status: 200,
            body: json!({"choices": [{"message": {"content": content}}]}).to_string(),
            retry_after_ms: None,
        })
    }
}

/// Fails the test if anything reaches the network layer.
#[derive(Default)]
struct NoNetwork {
    calls: AtomicUsize,
}

#[async_trait]
impl Transport for NoNetwork {
    async fn post_json(&self, url: &str, _: Option<&str>, _: &Value, _: Duration) -> Result<HttpReply, GatewayError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        Err(GatewayError::Transport {
            attempts: 1,
            message: format!("network disabled ({url})"),
        })
    }
}

async fn run(dir: &std::path::Path, cfg: &Config, mode: BackendMode, transport: Arc<dyn Transport>, fixtures: &std::path::Path) {
    let bench = parse_benchmark(BENCH).unwrap();
    let (store, bench) = open_run(dir, cfg, Some(&bench)).unwrap();
    let store = store.with_durability(Durability::Flush);
    let gw = cfg.build_gateway(mode, fixtures, transport).unwrap();
    let setup = RunSetup::from_config(cfg).unwrap();
    let p = Pipeline {
        setup: &setup,
        benchmark: &bench,
        gateway: &gw,
        store: &store,
    };
    assert_eq!(p.generate(1).await.unwrap().pending, 0);
    assert_eq!(p.judge(1).await.unwrap().pending, 0);
}

#[tokio::test]
async fn replay_makes_zero_network_calls() {
    let root = tempfile::tempdir().unwrap();
    let fixtures = root.path().join("fixtures");
    let cfg = Config::from_toml_str(CONFIG).unwrap();

    let scripted = Arc::new(Scripted::default());
    run(&root.path().join("rec"), &cfg, BackendMode::Record, scripted.clone(), &fixtures).await;
    // 2 prompts x (control + zero-shot, critique, refine) + 2 x 4 judgments
    assert_eq!(scripted.calls.load(Ordering::SeqCst), 16);

    let offline = Arc::new(NoNetwork::default());
    run(&root.path().join("rep"), &cfg, BackendMode::Replay, offline.clone(), &fixtures).await;
    assert_eq!(offline.calls.load(Ordering::SeqCst), 0);
    assert_eq!(
        normalized_log(&root.path().join("rec")).unwrap(),
        normalized_log(&root.path().join("rep")).unwrap()
    );

    let events = refinebench_core::store::load_events(&root.path().join("rep")).unwrap().events;
    let scores = score_events(&events, &parse_benchmark(BENCH).unwrap(), &RunSetup::from_config(&cfg).unwrap());
    let m = &scores.models[0];
    assert_eq!(m.model, "cand");
    assert_eq!(m.zero_shot.len(), 2);
    for s in m.zero_shot.iter().chain(&m.refined) {
        assert!((s.s_r - 8.0 / 6.0).abs() < 1e-12);
    }
    assert_eq!(m.win_rate_zero, Some(1.0));
}

#[tokio::test]
async fn replay_without_fixtures_fails_cleanly_and_resumes() {
    let root = tempfile::tempdir().unwrap();
    let cfg = Config::from_toml_str(CONFIG).unwrap();
    let bench = parse_benchmark(BENCH).unwrap();
    let dir = root.path().join("run");
    let (store, bench) = open_run(&dir, &cfg, Some(&bench)).unwrap();
    let gw = cfg
        .build_gateway(BackendMode::Replay, &root.path().join("none"), Arc::new(NoNetwork::default()))
        .unwrap();
    let setup = RunSetup::from_config(&cfg).unwrap();
    let p = Pipeline {
        setup: &setup,
        benchmark: &bench,
        gateway: &gw,
        store: &store,
    };
    let s = p.generate(2).await.unwrap();
    assert_eq!(s.completed, 0);
    assert_eq!(s.pending, s.planned);
    let events = store.events().unwrap();
    assert!(!events.is_empty() && events.iter().all(|e| e.is_failure()));
    assert!(events[0].content.contains("no fixture"));
}
