use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use intra_core::relmap::{
    build_map_llm, build_map_similarity, build_pair_prompt, HttpOracle, NoOracle, PairOracle, Provenance,
    RelationshipMap, ScoreTable, TranscriptStore, Verdict,
};

fn labels(v: &[&str]) -> Vec<String> {
    v.iter().map(|s| s.to_string()).collect()
}

/// One-shot HTTP server: answers `n` requests with `body`, recording each
/// request head and body.
fn serve(n: usize, body: &'static str) -> (String, Arc<Mutex<Vec<(String, String)>>>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let seen = Arc::new(Mutex::new(Vec::new()));
    let log = seen.clone();
    std::thread::spawn(move || {
        for stream in listener.incoming().take(n) {
            let mut stream = stream.unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut head = String::new();
            let mut len = 0;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                if line == "\r\n" || line.is_empty() {
                    break;
                }
                if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                    len = v.trim().parse().unwrap();
                }
                head.push_str(&line);
            }
            let mut buf = vec![0; len];
            reader.read_exact(&mut buf).unwrap();
            log.lock().unwrap().push((head, String::from_utf8(buf).unwrap()));
            write!(
                stream,
                "HTTP/1.1 200 OK\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                body.len()
            )
            .unwrap();
        }
    });
    (format!("http://{addr}/complete"), seen)
}

#[test]
fn http_oracle_posts_prompt_and_reads_text_field() {
    let (url, seen) = serve(1, r#"{"text": "part overlap\nAnswer: positive"}"#);
    let oracle = HttpOracle::new(url, Some("k123".into()));
    let prompt = build_pair_prompt("hold", "lift").unwrap();
    let reply = oracle.complete(&prompt).unwrap();
    assert_eq!(reply, "part overlap\nAnswer: positive");
    let seen = seen.lock().unwrap();
    let (head, body) = &seen[0];
    assert!(head.starts_with("POST /complete"));
    assert!(head.to_ascii_lowercase().contains("authorization: bearer k123"));
    let json: serde_json::Value = serde_json::from_str(body).unwrap();
    assert_eq!(json["prompt"], prompt);
}

#[test]
fn http_oracle_drives_a_full_build() {
    let vocab = labels(&["hold", "lift", "pour"]);
    let (url, seen) = serve(3, "final answer: negative");
    let store = TranscriptStore::in_memory();
    let build = build_map_llm(&vocab, &HttpOracle::new(url, None), &store).unwrap();
    assert_eq!(build.live_calls, 3);
    assert_eq!(seen.lock().unwrap().len(), 3);
    assert_eq!(build.map, RelationshipMap::identity(vocab, Provenance::Llm));
}

#[test]
fn disk_cache_replays_without_live_calls() {
    let dir = tempfile::tempdir().unwrap();
    let vocab = labels(&["cut with", "hold", "sip", "stick", "swing"]);
    let calls = AtomicUsize::new(0);
    let oracle = |p: &str| -> Result<String, String> {
        calls.fetch_add(1, Ordering::SeqCst);
        let related = p.ends_with("[`hold', `swing'] \u{2192} [`positive', `negative']?");
        Ok(if related { "positive" } else { "negative" }.to_string())
    };
    let first = build_map_llm(&vocab, &oracle, &TranscriptStore::open(dir.path()).unwrap()).unwrap();
    assert_eq!(first.live_calls, 10);
    assert_eq!(calls.load(Ordering::SeqCst), 10);
    assert_eq!(first.map.positive_pairs(), 1);
    assert!(first.map.related(1, 4));

    let reopened = TranscriptStore::open(dir.path()).unwrap();
    assert_eq!(reopened.len(), 10);
    let second = build_map_llm(&vocab, &NoOracle, &reopened).unwrap();
    assert_eq!(second.live_calls, 0);
    assert_eq!(reopened.hits(), 10);
    assert_eq!(second.map, first.map);
    assert_eq!(second.transcripts, first.transcripts);
    assert!(second.transcripts.iter().all(|t| t.verdict != Verdict::Unparsed));
}

#[test]
fn missing_transcript_without_oracle_is_an_oracle_error() {
    let err = build_map_llm(&labels(&["a", "b"]), &NoOracle, &TranscriptStore::in_memory()).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("(a, b)"), "{msg}");
}

#[test]
fn similarity_map_survives_save_and_load() {
    let dir = tempfile::tempdir().unwrap();
    let table = ScoreTable {
        labels: labels(&["a", "b", "c"]),
        scores: vec![vec![1.0, 0.7, 0.2], vec![0.7, 1.0, 0.5], vec![0.2, 0.5, 1.0]],
    };
    let tpath = dir.path().join("scores.json");
    table.save(&tpath).unwrap();
    let table = ScoreTable::load(&tpath).unwrap();
    let map = build_map_similarity(&labels(&["c", "b", "a"]), &table, 0.5, Provenance::Word2vec).unwrap();
    assert_eq!(map.labels, labels(&["a", "b", "c"]));
    assert_eq!(map.matrix, vec![vec![1, 1, 0], vec![1, 1, 1], vec![0, 1, 1]]);
    let mpath = dir.path().join("map.json");
    map.save(&mpath).unwrap();
    let back = RelationshipMap::load(&mpath).unwrap();
    assert_eq!(back, map);
    assert_eq!(back.threshold, Some(0.5));

    let missing = build_map_similarity(&labels(&["a", "z"]), &table, 0.5, Provenance::Wordnet);
    assert!(missing.is_err());
}
