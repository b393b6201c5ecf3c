use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use arena_core::provider::{ProviderError, TRUNCATION_MARKER};
use arena_core::{
    Arena, ArenaConfig, ArenaError, BattleStatus, Choice, InlineBackend, ManualClock, MemoryLog, Pipeline,
    PipelineConfig, ProviderDescriptor, ProviderGateway, TrackId,
};
use tokio::io::{AsyncReadExt, AsyncWriteExt};
use tokio::net::{TcpListener, TcpStream};

/// Reads one HTTP/1.1 request and returns (headers, body).
async fn read_request(sock: &mut TcpStream) -> Option<(String, Vec<u8>)> {
    let mut buf = Vec::new();
    let mut chunk = [0u8; 4096];
    let head_end = loop {
        let n = sock.read(&mut chunk).await.ok()?;
        if n == 0 {
            return None;
        }
        buf.extend_from_slice(&chunk[..n]);
        if let Some(i) = buf.windows(4).position(|w| w == b"\r\n\r\n") {
            break i + 4;
        }
    };
    let head = String::from_utf8_lossy(&buf[..head_end]).to_string();
    let len: usize = head
        .lines()
        .find_map(|l| {
            let (k, v) = l.split_once(':')?;
            k.eq_ignore_ascii_case("content-length").then(|| v.trim().parse().ok())?
        })
        .unwrap_or(0);
    while buf.len() < head_end + len {
        let n = sock.read(&mut chunk).await.ok()?;
        if n == 0 {
            return None;
        }
        buf.extend_from_slice(&chunk[..n]);
    }
    Some((head, buf[head_end..head_end + len].to_vec()))
}

async fn respond(sock: &mut TcpStream, status: &str, body: &str) {
    let msg = format!(
        "HTTP/1.1 {status}\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{body}",
        body.len()
    );
    let _ = sock.write_all(msg.as_bytes()).await;
    let _ = sock.shutdown().await;
}

/// Echoes `{response: "<model tag>:<track>:<prompt>"}`; the tag comes from
/// the URL path so one server can stand in for several models.
async fn echo_server(repeat: usize) -> (String, Arc<AtomicUsize>) {
    let listener = TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    let hits = Arc::new(AtomicUsize::new(0));
    let counter = hits.clone();
    tokio::spawn(async move {
        loop {
            let Ok((mut sock, _)) = listener.accept().await else { return };
            let counter = counter.clone();
            tokio::spawn(async move {
                let Some((head, body)) = read_request(&mut sock).await else { return };
                counter.fetch_add(1, Ordering::SeqCst);
                let path = head.split_whitespace().nth(1).unwrap_or("/").trim_start_matches('/').to_owned();
                let req: serde_json::Value = serde_json::from_slice(&body).unwrap();
                let auth_ok = !path.starts_with("secure") || head.to_ascii_lowercase().contains("authorization: bearer s3cret");
                if !auth_ok {
                    respond(&mut sock, "401 Unauthorized", "{}").await;
                    return;
                }
                let text = format!("{}:{}:{}", path, req["track"].as_str().unwrap(), req["prompt"].as_str().unwrap());
                let out = serde_json::json!({ "response": text.repeat(repeat) });
                respond(&mut sock, "200 OK", &out.to_string()).await;
            });
        }
    });
    (format!("http://{addr}"), hits)
}

/// Accepts connections and never answers.
async fn black_hole() -> (String, Arc<AtomicUsize>) {
    let listener = TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    let hits = Arc::new(AtomicUsize::new(0));
    let counter = hits.clone();
    tokio::spawn(async move {
        let mut held = Vec::new();
        while let Ok((sock, _)) = listener.accept().await {
            counter.fetch_add(1, Ordering::SeqCst);
            held.push(sock);
        }
    });
    (format!("http://{addr}/gen"), hits)
}

fn endpoint(url: String, timeout_secs: u64, max_retries: u32) -> ProviderDescriptor {
    ProviderDescriptor::HttpEndpoint {
        url,
        timeout_secs,
        max_retries,
        bearer_token: None,
    }
}

fn arena() -> Arena<InlineBackend> {
    let clock = Arc::new(ManualClock::epoch());
    let pipeline = Pipeline::open(Box::new(MemoryLog::new()), PipelineConfig::default(), clock.clone()).unwrap();
    Arena::new(InlineBackend::new(pipeline), ArenaConfig::default(), clock)
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn http_endpoint_round_trip_and_vote() {
    let (base, hits) = echo_server(1).await;
    let arena = arena();
    arena
        .register_model("left-model", &[TrackId::Ideation], endpoint(format!("{base}/alpha"), 5, 0))
        .unwrap();
    arena
        .register_model("right-model", &[TrackId::Ideation], endpoint(format!("{base}/beta"), 5, 0))
        .unwrap();
    let battle = arena.create_battle(TrackId::Ideation, "why is the sky blue", 3).unwrap();
    let filled = arena
        .fill_responses(&battle.battle_id, &ProviderGateway::default(), Duration::from_secs(10))
        .await
        .unwrap();
    assert_eq!(filled.status, BattleStatus::AwaitingVote);
    assert_eq!(hits.load(Ordering::SeqCst), 2);
    let tag = |m: &str| if m == "left-model" { "alpha" } else { "beta" };
    assert_eq!(
        filled.response_left.as_deref(),
        Some(format!("{}:ideation:why is the sky blue", tag(&battle.candidate_left)).as_str())
    );
    let view = filled.view();
    let json = serde_json::to_string(&view).unwrap();
    assert!(!json.contains("left-model") && !json.contains("right-model"));

    let receipt = arena.cast_vote(&battle.battle_id, Choice::Left, "voter", None).unwrap();
    let board = arena.backend().with(|p| p.current(TrackId::Ideation));
    assert_eq!(board.rating(&receipt.model_left), Some(1016.0));
    assert_eq!(board.rating(&receipt.model_right), Some(984.0));
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn black_hole_endpoint_expires_battle_without_rating_change() {
    let (good, _) = echo_server(1).await;
    let (hole, hole_hits) = black_hole().await;
    let arena = arena();
    arena
        .register_model("steady", &[TrackId::Reviewer], endpoint(format!("{good}/steady"), 5, 0))
        .unwrap();
    arena
        .register_model("silent", &[TrackId::Reviewer], endpoint(hole, 1, 1))
        .unwrap();
    let before = arena.backend().with(|p| (p.current(TrackId::Reviewer), p.log().len()));

    let battle = arena.create_battle(TrackId::Reviewer, "review this", 11).unwrap();
    let started = Instant::now();
    let err = arena
        .fill_responses(&battle.battle_id, &ProviderGateway::default(), Duration::from_secs(10))
        .await
        .unwrap_err();
    // One try plus one retry, one second each.
    assert!(started.elapsed() >= Duration::from_millis(1900), "{:?}", started.elapsed());
    assert!(matches!(err, ArenaError::Provider(ProviderError::Timeout { attempts: 2 })), "{err}");
    assert_eq!(hole_hits.load(Ordering::SeqCst), 2);

    assert_eq!(arena.battle(&battle.battle_id).unwrap().status, BattleStatus::Expired);
    assert!(matches!(
        arena.cast_vote(&battle.battle_id, Choice::Left, "voter", None),
        Err(ArenaError::Conflict(_))
    ));
    let after = arena.backend().with(|p| (p.current(TrackId::Reviewer), p.log().len()));
    assert_eq!(*after.0, *before.0);
    assert_eq!(after.1, before.1, "no event may be logged for a failed battle");
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn shared_deadline_caps_a_slow_pair() {
    let (hole, _) = black_hole().await;
    let gw = ProviderGateway::default();
    let slow = endpoint(hole, 30, 0);
    let started = Instant::now();
    let err = gw
        .fetch_pair(("a", &slow), ("b", &slow), TrackId::PaperQa, "q", Duration::from_millis(300))
        .await
        .unwrap_err();
    assert!(matches!(err, ProviderError::Timeout { .. }));
    assert!(started.elapsed() < Duration::from_secs(3));
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn oversized_response_is_truncated_and_bearer_token_sent() {
    let (base, _) = echo_server(20_000).await;
    let gw = ProviderGateway::new(4096);
    let d = ProviderDescriptor::HttpEndpoint {
        url: format!("{base}/secure"),
        timeout_secs: 5,
        max_retries: 0,
        bearer_token: Some("s3cret".into()),
    };
    let text = gw.fetch_response("m", &d, TrackId::AuthorQa, "x").await.unwrap();
    assert_eq!(text.len(), 4096 + TRUNCATION_MARKER.len());
    assert!(text.ends_with(TRUNCATION_MARKER));

    let no_token = endpoint(format!("{base}/secure"), 5, 3);
    let err = gw.fetch_response("m", &no_token, TrackId::AuthorQa, "x").await.unwrap_err();
    assert!(matches!(err, ProviderError::Status(401)), "{err}");
}

#[tokio::test]
async fn connection_refused_is_a_provider_error() {
    let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/gen", listener.local_addr().unwrap());
    drop(listener);
    let err = ProviderGateway::default()
        .fetch_response("m", &endpoint(url, 2, 2), TrackId::Ideation, "p")
        .await
        .unwrap_err();
    assert!(matches!(err, ProviderError::Request { attempts: 3, .. }), "{err}");
}
