use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use greedyfool::oracle::{WireRequest, WireResponse};
use greedyfool::{ImageTensor, Oracle, OracleError, RemoteOracle, RemoteOracleConfig};
use tiny_http::{Header, Response, Server};

/// What the fake server sees and how it answers.
struct Seen {
    method: String,
    path: String,
    authorization: Option<String>,
    request: Option<WireRequest>,
}

/// Serves requests on a background thread with `handler`, returning the base
/// URL. The thread exits when the process does.
fn serve<F>(handler: F) -> String
where
    F: Fn(usize, Seen) -> (u16, String) + Send + 'static,
{
    let server = Server::http("127.0.0.1:0").unwrap();
    let port = server.server_addr().to_ip().unwrap().port();
    thread::spawn(move || {
        for (n, mut req) in server.incoming_requests().enumerate() {
            let mut body = String::new();
            req.as_reader().read_to_string(&mut body).unwrap();
            let seen = Seen {
                method: req.method().to_string(),
                path: req.url().to_string(),
                authorization: req
                    .headers()
                    .iter()
                    .find(|h| h.field.equiv("Authorization"))
                    .map(|h| h.value.to_string()),
                request: serde_json::from_str(&body).ok(),
            };
            let (status, text) = handler(n, seen);
            let header = Header::from_bytes("Content-Type", "application/json").unwrap();
            let _ = req.respond(
                Response::from_string(text)
                    .with_status_code(status)
                    .with_header(header),
            );
        }
    });
    format!("http://127.0.0.1:{port}")
}

fn uniform(classes: usize) -> String {
    serde_json::to_string(&WireResponse {
        probabilities: vec![1.0 / classes as f64; classes],
        labels: None,
    })
    .unwrap()
}

fn fast(endpoint: String) -> RemoteOracleConfig {
    RemoteOracleConfig {
        timeout: Duration::from_secs(5),
        backoff: Duration::from_millis(5),
        ..RemoteOracleConfig::new(endpoint)
    }
}

fn image() -> ImageTensor {
    ImageTensor::new(2, 3, (0..18).collect()).unwrap()
}

#[test]
fn uniform_answer_round_trips_the_wire_format() {
    let url = serve(|_, seen| {
        assert_eq!(seen.method, "POST");
        assert_eq!(seen.path, "/v1/predict");
        let req = seen.request.expect("request body is a wire request");
        assert_eq!(req.to_image().unwrap(), image());
        (200, uniform(4))
    });
    let oracle = RemoteOracle::new(fast(url + "/")).unwrap();
    let p = oracle.predict(&image()).unwrap();
    assert_eq!(p.probabilities(), &[0.25; 4]);
    assert_eq!(p.argmax(), 0);
    let stats = oracle.stats();
    assert_eq!(
        (stats.total_calls, stats.attempts, stats.failures),
        (1, 1, 0)
    );
}

#[test]
fn labels_are_passed_through() {
    let url = serve(|_, _| {
        (
            200,
            r#"{"probabilities": [0.2, 0.8], "labels": ["cat", "dog"]}"#.into(),
        )
    });
    let p = RemoteOracle::new(fast(url))
        .unwrap()
        .predict(&image())
        .unwrap();
    assert_eq!(p.labels().unwrap(), ["cat", "dog"]);
    assert_eq!(p.argmax(), 1);
}

#[test]
fn probabilities_not_summing_to_one_are_a_protocol_error() {
    let url = serve(|_, _| (200, r#"{"probabilities": [0.5, 0.5, 0.5]}"#.into()));
    let err = RemoteOracle::new(fast(url))
        .unwrap()
        .predict(&image())
        .unwrap_err();
    assert!(matches!(err, OracleError::Protocol(_)), "{err:?}");
}

#[test]
fn malformed_body_is_reported_without_retry() {
    let hits = Arc::new(AtomicUsize::new(0));
    let counter = hits.clone();
    let url = serve(move |_, _| {
        counter.fetch_add(1, Ordering::SeqCst);
        (200, "{not json".into())
    });
    let err = RemoteOracle::new(fast(url))
        .unwrap()
        .predict(&image())
        .unwrap_err();
    assert!(matches!(err, OracleError::Malformed(_)), "{err:?}");
    assert_eq!(hits.load(Ordering::SeqCst), 1);
}

#[test]
fn transient_failures_are_retried() {
    let url = serve(|n, _| {
        if n < 3 {
            (503, "busy".into())
        } else {
            (200, uniform(3))
        }
    });
    let oracle = RemoteOracle::new(RemoteOracleConfig {
        retries: 3,
        ..fast(url)
    })
    .unwrap();
    let p = oracle.predict(&image()).unwrap();
    assert_eq!(p.num_classes(), 3);
    let stats = oracle.stats();
    assert_eq!(
        (stats.total_calls, stats.attempts, stats.failures),
        (1, 4, 3)
    );
}

#[test]
fn retries_are_bounded() {
    let url = serve(|_, _| (500, "down".into()));
    let oracle = RemoteOracle::new(RemoteOracleConfig {
        retries: 1,
        ..fast(url)
    })
    .unwrap();
    let err = oracle.predict(&image()).unwrap_err();
    assert_eq!(
        err,
        OracleError::Status {
            status: 500,
            body: "down".into()
        }
    );
    assert_eq!(oracle.stats().attempts, 2);
}

#[test]
fn client_errors_are_not_retried() {
    let url = serve(|_, _| (400, "bad shape".into()));
    let oracle = RemoteOracle::new(fast(url)).unwrap();
    let err = oracle.predict(&image()).unwrap_err();
    assert!(
        matches!(err, OracleError::Status { status: 400, .. }),
        "{err:?}"
    );
    assert_eq!(oracle.stats().attempts, 1);
}

#[test]
fn unreachable_server_is_a_transport_error() {
    // bind then drop to get a port nobody listens on
    let port = std::net::TcpListener::bind("127.0.0.1:0")
        .unwrap()
        .local_addr()
        .unwrap()
        .port();
    let oracle = RemoteOracle::new(RemoteOracleConfig {
        retries: 1,
        ..fast(format!("http://127.0.0.1:{port}"))
    })
    .unwrap();
    match oracle.predict(&image()).unwrap_err() {
        OracleError::Transport { attempts, .. } => assert_eq!(attempts, 2),
        other => panic!("expected transport error, got {other:?}"),
    }
}

#[test]
fn bearer_token_is_sent() {
    let url = serve(|_, seen| match seen.authorization.as_deref() {
        Some("Bearer s3cret") => (200, uniform(2)),
        _ => (401, "no token".into()),
    });
    let anonymous = RemoteOracle::new(fast(url.clone())).unwrap();
    assert!(matches!(
        anonymous.predict(&image()),
        Err(OracleError::Status { status: 401, .. })
    ));
    let authed = RemoteOracle::new(RemoteOracleConfig {
        bearer_token: Some("s3cret".into()),
        ..fast(url)
    })
    .unwrap();
    assert!(authed.predict(&image()).is_ok());
}

#[test]
fn declared_shape_is_checked_before_sending() {
    let hits = Arc::new(AtomicUsize::new(0));
    let counter = hits.clone();
    let url = serve(move |_, _| {
        counter.fetch_add(1, Ordering::SeqCst);
        (200, uniform(2))
    });
    let oracle = RemoteOracle::new(RemoteOracleConfig {
        input_shape: Some((32, 32)),
        ..fast(url)
    })
    .unwrap();
    assert!(matches!(
        oracle.predict(&image()),
        Err(OracleError::ShapeMismatch { .. })
    ));
    assert_eq!(hits.load(Ordering::SeqCst), 0);
}

#[test]
fn concurrent_callers_share_the_client() {
    let url = serve(|_, _| (200, uniform(5)));
    let oracle = Arc::new(
        RemoteOracle::new(RemoteOracleConfig {
            max_in_flight: 2,
            ..fast(url)
        })
        .unwrap(),
    );
    let handles: Vec<_> = (0..6)
        .map(|_| {
            let oracle = oracle.clone();
            thread::spawn(move || oracle.predict(&image()).unwrap().num_classes())
        })
        .collect();
    for h in handles {
        assert_eq!(h.join().unwrap(), 5);
    }
    assert_eq!(oracle.stats().total_calls, 6);
}
