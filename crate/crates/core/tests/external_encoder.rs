//! External encoder client against a minimal in-process HTTP server.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::thread;
use std::time::Duration;

use clauserec_core::corpus::{Clause, ClauseTypeId};
use clauserec_core::encoder::{CachedEncoder, Encoder, ExternalEncoder};
use clauserec_core::Error;

/// Reads one request and returns its JSON body.
fn read_request(stream: &mut TcpStream) -> serde_json::Value {
    let mut reader = BufReader::new(stream);
    let mut len = 0usize;
    loop {
        let mut line = String::new();
        reader.read_line(&mut line).unwrap();
        let line = line.trim_end();
        if line.is_empty() {
            break;
        }
        if let Some((k, v)) = line.split_once(':') {
            if k.eq_ignore_ascii_case("content-length") {
                len = v.trim().parse().unwrap();
            }
        }
    }
    let mut body = vec![0u8; len];
    reader.read_exact(&mut body).unwrap();
    serde_json::from_slice(&body).unwrap()
}

fn respond(stream: &mut TcpStream, status: &str, body: &str) {
    write!(
        stream,
        "HTTP/1.1 {status}\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{body}",
        body.len()
    )
    .unwrap();
}

/// Serves `requests` connections with `handler`, returning the base URL.
fn serve<F>(requests: usize, handler: F) -> String
where
    F: Fn(&mut TcpStream, serde_json::Value) + Send + 'static,
{
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}", listener.local_addr().unwrap());
    thread::spawn(move || {
        for stream in listener.incoming().take(requests) {
            let mut stream = stream.unwrap();
            let body = read_request(&mut stream);
            handler(&mut stream, body);
        }
    });
    url
}

fn clauses(texts: &[&str]) -> Vec<Clause> {
    texts.iter().map(|t| Clause::new(ClauseTypeId(0), *t)).collect()
}

#[test]
fn encodes_in_batches() {
    // Vector i is [len(text), 1.0].
    let url = serve(2, |s, body| {
        let texts = body["texts"].as_array().unwrap();
        let vectors: Vec<[f64; 2]> = texts.iter().map(|t| [t.as_str().unwrap().len() as f64, 1.0]).collect();
        respond(
            s,
            "200 OK",
            &serde_json::json!({ "vectors": vectors, "dimension": 2 }).to_string(),
        );
    });
    let enc = ExternalEncoder::new(url, 2, 2, Duration::from_secs(5)).unwrap();
    let cs = clauses(&["ab", "abcd", "a"]);
    let refs: Vec<&Clause> = cs.iter().collect();
    let out = enc.encode_batch(&refs).unwrap();
    assert_eq!(out.iter().map(|e| e.0[0]).collect::<Vec<_>>(), vec![2.0, 4.0, 1.0]);
    assert!(enc.fingerprint().starts_with("external-"));
}

#[test]
fn cache_avoids_repeat_requests() {
    let url = serve(1, |s, body| {
        let n = body["texts"].as_array().unwrap().len();
        let vectors = vec![[0.5, 0.5]; n];
        respond(
            s,
            "200 OK",
            &serde_json::json!({ "vectors": vectors, "dimension": 2 }).to_string(),
        );
    });
    let enc = CachedEncoder::new(ExternalEncoder::new(url, 2, 8, Duration::from_secs(5)).unwrap());
    let c = Clause::new(ClauseTypeId(0), "notices in writing");
    enc.encode_clause(&c).unwrap();
    // The server accepts only one connection; a second request would fail.
    enc.encode_clause(&c).unwrap();
    assert_eq!(enc.cached(), 1);
}

#[test]
fn slow_service_times_out() {
    let url = serve(1, |s, _| {
        thread::sleep(Duration::from_millis(800));
        respond(s, "200 OK", r#"{"vectors": [[1.0]], "dimension": 1}"#);
    });
    let enc = ExternalEncoder::new(url, 1, 8, Duration::from_millis(150)).unwrap();
    let err = enc.encode_clause(&Clause::new(ClauseTypeId(0), "late")).unwrap_err();
    assert!(matches!(err, Error::EncoderTimeout(_)), "{err:?}");
}

#[test]
fn malformed_responses_are_protocol_errors() {
    let bodies = [
        ("200 OK", r#"{"vectors": [[1.0, 2.0]], "dimension": 3}"#),
        ("200 OK", r#"{"vectors": [], "dimension": 2}"#),
        ("200 OK", r#"{"vectors": [[1.0]], "dimension": 2}"#),
        ("200 OK", "not json"),
        ("500 Internal Server Error", "{}"),
    ];
    for (status, body) in bodies {
        let url = serve(1, move |s, _| respond(s, status, body));
        let enc = ExternalEncoder::new(url, 2, 8, Duration::from_secs(5)).unwrap();
        let err = enc.encode_clause(&Clause::new(ClauseTypeId(0), "text")).unwrap_err();
        assert!(matches!(err, Error::EncoderProtocol(_)), "{body}: {err:?}");
    }
}

#[test]
fn unreachable_service_is_transport_error() {
    let addr = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap();
    let enc = ExternalEncoder::new(format!("http://{addr}"), 2, 8, Duration::from_secs(2)).unwrap();
    let err = enc.encode_clause(&Clause::new(ClauseTypeId(0), "text")).unwrap_err();
    assert!(matches!(err, Error::EncoderTransport(_)), "{err:?}");
}
