//! Interaction-relationship maps.
//!
//! A map is a symmetric 0/1 matrix over the interaction vocabulary where 1
//! means the two interactions act on the same object part. Maps come from
//! a chain-of-thought LLM query per unordered label pair (live or replayed
//! from cached transcripts), or from thresholded similarity score tables.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, IoContext, Result};
use crate::params::hex_digest;

pub const ENDPOINT_ENV: &str = "INTRA_LLM_ENDPOINT";
pub const KEY_ENV: &str = "INTRA_LLM_KEY";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Llm,
    Wordnet,
    Word2vec,
    Cooccurrence,
    Manual,
}

impl Provenance {
    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "llm" => Ok(Provenance::Llm),
            "wordnet" => Ok(Provenance::Wordnet),
            "word2vec" => Ok(Provenance::Word2vec),
            "cooccurrence" | "co-occurrence" => Ok(Provenance::Cooccurrence),
            "manual" => Ok(Provenance::Manual),
            other => Err(Error::validation(format!("unknown relationship-map mode `{other}`"))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Provenance::Llm => "llm",
            Provenance::Wordnet => "wordnet",
            Provenance::Word2vec => "word2vec",
            Provenance::Cooccurrence => "cooccurrence",
            Provenance::Manual => "manual",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelationshipMap {
    pub labels: Vec<String>,
    pub matrix: Vec<Vec<u8>>,
    pub provenance: Provenance,
    #[serde(default)]
    pub threshold: Option<f64>,
}

impl RelationshipMap {
    /// Each label related only to itself.
    pub fn identity(labels: Vec<String>, provenance: Provenance) -> Self {
        let n = labels.len();
        let matrix = (0..n).map(|i| (0..n).map(|j| u8::from(i == j)).collect()).collect();
        RelationshipMap {
            labels,
            matrix,
            provenance,
            threshold: None,
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    #[inline]
    pub fn related(&self, i: usize, j: usize) -> bool {
        self.matrix[i][j] == 1
    }

    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }

    pub fn indices_of<S: AsRef<str>>(&self, labels: &[S]) -> Result<Vec<usize>> {
        labels
            .iter()
            .map(|l| {
                self.index_of(l.as_ref())
                    .ok_or_else(|| Error::UnknownLabel(l.as_ref().to_string()))
            })
            .collect()
    }

    pub fn set_pair(&mut self, i: usize, j: usize, related: bool) -> Result<()> {
        if i == j {
            return Err(Error::validation("diagonal entries are fixed at 1"));
        }
        self.matrix[i][j] = u8::from(related);
        self.matrix[j][i] = u8::from(related);
        Ok(())
    }

    pub fn set_labels_related(&mut self, a: &str, b: &str, related: bool) -> Result<()> {
        let i = self.index_of(a).ok_or_else(|| Error::UnknownLabel(a.into()))?;
        let j = self.index_of(b).ok_or_else(|| Error::UnknownLabel(b.into()))?;
        self.set_pair(i, j, related)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.labels.len();
        if self.matrix.len() != n || self.matrix.iter().any(|row| row.len() != n) {
            return Err(Error::validation(format!(
                "relationship matrix must be {n}x{n} to match its labels"
            )));
        }
        let mut seen = std::collections::HashSet::new();
        for l in &self.labels {
            if !seen.insert(l) {
                return Err(Error::validation(format!("duplicate label `{l}`")));
            }
        }
        for i in 0..n {
            if self.matrix[i][i] != 1 {
                return Err(Error::validation(format!(
                    "diagonal entry for `{}` must be 1",
                    self.labels[i]
                )));
            }
            for j in 0..n {
                let v = self.matrix[i][j];
                if v > 1 {
                    return Err(Error::validation(format!("entry ({i}, {j}) = {v} is not binary")));
                }
                if v != self.matrix[j][i] {
                    return Err(Error::validation(format!(
                        "matrix is not symmetric at ({}, {})",
                        self.labels[i], self.labels[j]
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.validate()?;
        let text = serde_json::to_string_pretty(self).at(path)?;
        fs::write(path, text).at(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).at(path)?;
        // Parse loosely first so out-of-range entries report as validation
        // errors rather than JSON type errors.
        #[derive(Deserialize)]
        struct Raw {
            labels: Vec<String>,
            matrix: Vec<Vec<f64>>,
            provenance: Provenance,
            #[serde(default)]
            threshold: Option<f64>,
        }
        let raw: Raw = serde_json::from_str(&text).at(path)?;
        let mut matrix = Vec::with_capacity(raw.matrix.len());
        for row in raw.matrix {
            let mut out = Vec::with_capacity(row.len());
            for v in row {
                if v != 0.0 && v != 1.0 {
                    return Err(Error::validation(format!("{}: entry {v} is not binary", path.display())));
                }
                out.push(v as u8);
            }
            matrix.push(out);
        }
        let map = RelationshipMap {
            labels: raw.labels,
            matrix,
            provenance: raw.provenance,
            threshold: raw.threshold,
        };
        map.validate()
            .map_err(|e| Error::validation(format!("{}: {e}", path.display())))?;
        Ok(map)
    }

    pub fn positive_pairs(&self) -> usize {
        let n = self.len();
        (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).filter(|(i, j)| self.related(*i, *j)).count()
    }
}

// ---------------------------------------------------------------------------
// Chain-of-thought pair protocol

const FEW_SHOT: &str = "You should clarify each verb's relation whether it is positive pair or negative pair. \
Here's some example of the examples of clarification.
ex1) `hold' and `carry' is `positive' pair. Because if we do the given interaction to the object like suitcase, ski, or snowboard, we interacts with the same part of the object. The side part of the object for `hold' and `carry'.
ex2) `hit' and `carry' is `positive' pair. Because if we do the given interaction to the object like baseball bat or badminton racket, we interacts with the same part of the object. The thin part of the object for `hit' and `carry'.
ex3) `cut with' and `hold' is `negative' pair. Because if we `cut with' the object like scissor, or knife, we interacts with the different part of the object. Sharp part of the object for `cut with' and `hold' for handle or dull part.
ex4) `sip' and `hold' is `negative' pair. Because if we do the given interaction to the object like cup, bottle, or wine glass, we interacts with the different part of the object. Rim of the object for `sip', and `hold' for handle or round part.

Think of 5 objects that can be commonly interacted with. For each object, describe the interactions and then list the object parts that should be interacted with step by step. Use this information to create criteria for classification based on the given example.
Specify the final answer with short format and it should be one of [positive, negative]. ";

/// Builds the pair-classification query for interactions `a` and `b`.
pub fn build_pair_prompt(a: &str, b: &str) -> Result<String> {
    let (a, b) = (a.trim(), b.trim());
    if a.is_empty() || b.is_empty() {
        return Err(Error::validation("interaction labels must be non-empty"));
    }
    if a == b {
        return Err(Error::validation(format!(
            "pair ({a}, {b}) is on the diagonal; diagonal entries are never queried"
        )));
    }
    Ok(format!("{FEW_SHOT}[`{a}', `{b}'] \u{2192} [`positive', `negative']?"))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Positive,
    Negative,
    Unparsed,
}

/// Reads the final short-format answer: the last non-empty line of the
/// response must mention exactly one of `positive` / `negative`.
pub fn parse_verdict(response: &str) -> Verdict {
    let Some(last) = response.lines().rev().map(str::trim).find(|l| !l.is_empty()) else {
        return Verdict::Unparsed;
    };
    let lowered = last.to_lowercase();
    let words: Vec<&str> = lowered.split(|c: char| !c.is_alphabetic()).filter(|w| !w.is_empty()).collect();
    let pos = words.contains(&"positive");
    let neg = words.contains(&"negative");
    match (pos, neg) {
        (true, false) => Verdict::Positive,
        (false, true) => Verdict::Negative,
        _ => Verdict::Unparsed,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairTranscript {
    pub pair: [String; 2],
    pub prompt: String,
    pub response: String,
    pub verdict: Verdict,
}

/// Anything that turns a prompt into a completion.
pub trait PairOracle: Send + Sync {
    fn complete(&self, prompt: &str) -> std::result::Result<String, String>;
}

impl<F> PairOracle for F
where
    F: Fn(&str) -> std::result::Result<String, String> + Send + Sync,
{
    fn complete(&self, prompt: &str) -> std::result::Result<String, String> {
        self(prompt)
    }
}

/// Oracle used when no endpoint is configured; every call fails.
pub struct NoOracle;

impl PairOracle for NoOracle {
    fn complete(&self, _prompt: &str) -> std::result::Result<String, String> {
        Err(format!("no live LLM configured (set {ENDPOINT_ENV})"))
    }
}

/// Thin provider-agnostic client: POSTs `{"prompt": ...}` and accepts either
/// a JSON body with a `text` field or a plain-text body.
pub struct HttpOracle {
    endpoint: String,
    key: Option<String>,
}

impl HttpOracle {
    pub fn new(endpoint: impl Into<String>, key: Option<String>) -> Self {
        HttpOracle {
            endpoint: endpoint.into(),
            key,
        }
    }

    pub fn from_env() -> Option<Self> {
        let endpoint = std::env::var(ENDPOINT_ENV).ok().filter(|e| !e.is_empty())?;
        Some(HttpOracle::new(endpoint, std::env::var(KEY_ENV).ok()))
    }
}

impl PairOracle for HttpOracle {
    fn complete(&self, prompt: &str) -> std::result::Result<String, String> {
        let body = serde_json::json!({ "prompt": prompt }).to_string();
        let mut req = ureq::post(&self.endpoint).header("Content-Type", "application/json");
        if let Some(key) = &self.key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = req.send(body).map_err(|e| e.to_string())?;
        let text = resp.body_mut().read_to_string().map_err(|e| e.to_string())?;
        Ok(extract_completion(&text))
    }
}

fn extract_completion(body: &str) -> String {
    match serde_json::from_str::<serde_json::Value>(body) {
        Ok(serde_json::Value::Object(obj)) => match obj.get("text") {
            Some(serde_json::Value::String(s)) => s.clone(),
            _ => body.to_string(),
        },
        _ => body.to_string(),
    }
}

/// Transcript cache: one JSON file per pair under a directory, keyed by the
/// sorted pair plus a hash of the prompt so edited prompts miss the cache.
pub struct TranscriptStore {
    dir: Option<PathBuf>,
    entries: Mutex<HashMap<String, PairTranscript>>,
    lookups: AtomicUsize,
    hits: AtomicUsize,
}

pub fn cache_key(a: &str, b: &str, prompt: &str) -> String {
    let (a, b) = if a <= b { (a, b) } else { (b, a) };
    let mut hasher = Sha256::new();
    hasher.update(prompt.as_bytes());
    let digest = hex_digest(hasher);
    let clean = |s: &str| s.trim().replace(|c: char| !c.is_alphanumeric(), "_");
    format!("{}__{}__{}", clean(a), clean(b), &digest[..16])
}

impl TranscriptStore {
    pub fn in_memory() -> Self {
        TranscriptStore {
            dir: None,
            entries: Mutex::new(HashMap::new()),
            lookups: AtomicUsize::new(0),
            hits: AtomicUsize::new(0),
        }
    }

    /// Opens (creating if needed) a cache directory and loads every
    /// transcript in it.
    pub fn open(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).at(dir)?;
        let mut entries = HashMap::new();
        for entry in fs::read_dir(dir).at(dir)? {
            let path = entry.at(dir)?.path();
            if path.extension().and_then(|e| e.to_str()) != Some("json") {
                continue;
            }
            let text = fs::read_to_string(&path).at(&path)?;
            let t: PairTranscript = serde_json::from_str(&text).at(&path)?;
            entries.insert(cache_key(&t.pair[0], &t.pair[1], &t.prompt), t);
        }
        Ok(TranscriptStore {
            dir: Some(dir.to_path_buf()),
            entries: Mutex::new(entries),
            lookups: AtomicUsize::new(0),
            hits: AtomicUsize::new(0),
        })
    }

    pub fn get(&self, key: &str) -> Option<PairTranscript> {
        self.lookups.fetch_add(1, Ordering::SeqCst);
        let found = self.entries.lock().expect("cache lock").get(key).cloned();
        if found.is_some() {
            self.hits.fetch_add(1, Ordering::SeqCst);
        }
        found
    }

    pub fn insert(&self, transcript: PairTranscript) -> Result<()> {
        let key = cache_key(&transcript.pair[0], &transcript.pair[1], &transcript.prompt);
        if let Some(dir) = &self.dir {
            let path = dir.join(format!("{key}.json"));
            let text = serde_json::to_string_pretty(&transcript).at(&path)?;
            fs::write(&path, text).at(&path)?;
        }
        self.entries.lock().expect("cache lock").insert(key, transcript);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.lock().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn lookups(&self) -> usize {
        self.lookups.load(Ordering::SeqCst)
    }

    pub fn hits(&self) -> usize {
        self.hits.load(Ordering::SeqCst)
    }
}

#[derive(Debug)]
pub struct LlmBuild {
    pub map: RelationshipMap,
    pub transcripts: Vec<PairTranscript>,
    pub live_calls: usize,
    pub defaulted_pairs: Vec<(String, String)>,
}

fn unique_sorted(labels: &[String]) -> Result<Vec<String>> {
    let mut out: Vec<String> = labels.iter().map(|l| l.trim().to_string()).collect();
    out.sort();
    out.dedup();
    if out.len() != labels.len() {
        return Err(Error::validation("vocabulary contains duplicate labels"));
    }
    if out.iter().any(|l| l.is_empty()) {
        return Err(Error::validation("vocabulary contains an empty label"));
    }
    Ok(out)
}

fn query_with_retry(oracle: &dyn PairOracle, prompt: &str, calls: &AtomicUsize) -> std::result::Result<String, String> {
    calls.fetch_add(1, Ordering::SeqCst);
    match oracle.complete(prompt) {
        Ok(r) => Ok(r),
        Err(first) => {
            log::warn!("oracle call failed ({first}); retrying once");
            calls.fetch_add(1, Ordering::SeqCst);
            oracle.complete(prompt)
        }
    }
}

/// Queries every unordered label pair once (cache first), symmetrizes and
/// fixes the diagonal at 1. Unparsed answers are re-asked once and then
/// recorded as negative.
pub fn build_map_llm(labels: &[String], oracle: &dyn PairOracle, store: &TranscriptStore) -> Result<LlmBuild> {
    let labels = unique_sorted(labels)?;
    let n = labels.len();
    let pairs: Vec<(usize, usize)> = (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect();
    let calls = AtomicUsize::new(0);

    let resolve = |&(i, j): &(usize, usize)| -> Result<(PairTranscript, bool)> {
        let (a, b) = (&labels[i], &labels[j]);
        let prompt = build_pair_prompt(a, b)?;
        let key = cache_key(a, b, &prompt);
        if let Some(t) = store.get(&key) {
            return Ok((t, false));
        }
        let oracle_err = |cause: String| Error::Oracle {
            a: a.clone(),
            b: b.clone(),
            cause,
        };
        let mut response = query_with_retry(oracle, &prompt, &calls).map_err(oracle_err)?;
        let mut verdict = parse_verdict(&response);
        if verdict == Verdict::Unparsed {
            response = query_with_retry(oracle, &prompt, &calls).map_err(oracle_err)?;
            verdict = parse_verdict(&response);
        }
        let transcript = PairTranscript {
            pair: [a.clone(), b.clone()],
            prompt,
            response,
            verdict,
        };
        store.insert(transcript.clone())?;
        Ok((transcript, true))
    };
    let resolved = crate::par::try_map(&pairs, resolve)?;

    let mut map = RelationshipMap::identity(labels.clone(), Provenance::Llm);
    let mut transcripts = Vec::with_capacity(resolved.len());
    let mut defaulted = Vec::new();
    for ((i, j), (t, _live)) in pairs.iter().zip(resolved) {
        match t.verdict {
            Verdict::Positive => map.set_pair(*i, *j, true)?,
            Verdict::Negative => {}
            Verdict::Unparsed => {
                log::warn!(
                    "no verdict for ({}, {}) after retry; treating as negative",
                    labels[*i],
                    labels[*j]
                );
                defaulted.push((labels[*i].clone(), labels[*j].clone()));
            }
        }
        transcripts.push(t);
    }
    map.validate()?;
    Ok(LlmBuild {
        map,
        transcripts,
        live_calls: calls.load(Ordering::SeqCst),
        defaulted_pairs: defaulted,
    })
}

// ---------------------------------------------------------------------------
// Similarity baselines

/// Precomputed pairwise similarity scores in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreTable {
    pub labels: Vec<String>,
    pub scores: Vec<Vec<f64>>,
}

impl ScoreTable {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).at(path)?;
        let table: ScoreTable = serde_json::from_str(&text).at(path)?;
        table
            .validate()
            .map_err(|e| Error::validation(format!("{}: {e}", path.display())))?;
        Ok(table)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).at(path)?;
        fs::write(path, text).at(path)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.labels.len();
        if self.scores.len() != n || self.scores.iter().any(|r| r.len() != n) {
            return Err(Error::validation(format!("score table must be {n}x{n}")));
        }
        for i in 0..n {
            for j in 0..n {
                let s = self.scores[i][j];
                if !(0.0..=1.0).contains(&s) {
                    return Err(Error::validation(format!(
                        "score {s} for ({}, {}) is outside [0, 1]",
                        self.labels[i], self.labels[j]
                    )));
                }
                if (s - self.scores[j][i]).abs() > 1e-12 {
                    return Err(Error::validation(format!(
                        "scores for ({}, {}) are not symmetric",
                        self.labels[i], self.labels[j]
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn score(&self, a: &str, b: &str) -> Option<f64> {
        let i = self.labels.iter().position(|l| l == a)?;
        let j = self.labels.iter().position(|l| l == b)?;
        Some(self.scores[i][j])
    }
}

/// Entry is 1 iff `score >= threshold`; diagonal is 1.
pub fn build_map_similarity(
    labels: &[String],
    table: &ScoreTable,
    threshold: f64,
    provenance: Provenance,
) -> Result<RelationshipMap> {
    table.validate()?;
    let labels = unique_sorted(labels)?;
    let mut map = RelationshipMap::identity(labels.clone(), provenance);
    map.threshold = Some(threshold);
    for i in 0..labels.len() {
        for j in i + 1..labels.len() {
            let s = table
                .score(&labels[i], &labels[j])
                .ok_or_else(|| Error::UnknownLabel(format!("{} / {} missing from score table", labels[i], labels[j])))?;
            map.set_pair(i, j, s >= threshold)?;
        }
    }
    Ok(map)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn labels(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("verb{i:02}")).collect()
    }

    #[test]
    fn prompt_contains_protocol_and_question() {
        let p = build_pair_prompt("drink with", "sip").unwrap();
        assert!(p.contains("ex1) `hold' and `carry' is `positive' pair"));
        assert!(p.contains("ex2) `hit' and `carry' is `positive' pair"));
        assert!(p.contains("ex3) `cut with' and `hold' is `negative' pair"));
        assert!(p.contains("ex4) `sip' and `hold' is `negative' pair"));
        assert!(p.contains("Think of 5 objects that can be commonly interacted with"));
        assert!(p.ends_with("[`drink with', `sip'] \u{2192} [`positive', `negative']?"));
        assert_eq!(p, build_pair_prompt("drink with", "sip").unwrap());
        assert!(build_pair_prompt("hold", "hold").is_err());
    }

    #[test]
    fn verdict_parsing() {
        let long = "1. Cup\n- both use the rim.\n\nAcross all five objects the two actions touch the same part, so they form a positive pair.";
        assert_eq!(parse_verdict(long), Verdict::Positive);
        assert_eq!(parse_verdict("Final answer: negative"), Verdict::Negative);
        assert_eq!(parse_verdict("Final answer: NEGATIVE.\n\n"), Verdict::Negative);
        assert_eq!(parse_verdict("maybe"), Verdict::Unparsed);
        assert_eq!(parse_verdict(""), Verdict::Unparsed);
        assert_eq!(parse_verdict("positive or negative, hard to say"), Verdict::Unparsed);
    }

    #[test]
    fn cache_key_is_order_free_and_prompt_sensitive() {
        assert_eq!(cache_key("a", "b", "p"), cache_key("b", "a", "p"));
        assert_ne!(cache_key("a", "b", "p"), cache_key("a", "b", "q"));
    }

    #[test]
    fn llm_build_queries_each_pair_once_and_caches() {
        let vocab = labels(6);
        let store = TranscriptStore::in_memory();
        let oracle = |prompt: &str| -> std::result::Result<String, String> {
            let positive = prompt.contains("[`verb00', `verb01']");
            Ok(if positive { "Answer: positive" } else { "Answer: negative" }.into())
        };
        let built = build_map_llm(&vocab, &oracle, &store).unwrap();
        assert_eq!(built.live_calls, 15);
        assert_eq!(built.transcripts.len(), 15);
        assert!(built.map.related(0, 1) && built.map.related(1, 0));
        assert_eq!(built.map.positive_pairs(), 1);

        let again = build_map_llm(&vocab, &NoOracle, &store).unwrap();
        assert_eq!(again.live_calls, 0);
        assert_eq!(again.map, built.map);
    }

    #[test]
    fn unparsed_retries_then_defaults_negative() {
        let calls = AtomicUsize::new(0);
        let oracle = |_: &str| -> std::result::Result<String, String> {
            calls.fetch_add(1, Ordering::SeqCst);
            Ok("I am not sure".into())
        };
        let store = TranscriptStore::in_memory();
        let built = build_map_llm(&labels(2), &oracle, &store).unwrap();
        assert_eq!(calls.load(Ordering::SeqCst), 2);
        assert_eq!(built.defaulted_pairs.len(), 1);
        assert!(!built.map.related(0, 1));
    }

    #[test]
    fn transport_failure_names_the_pair() {
        let store = TranscriptStore::in_memory();
        let err = build_map_llm(&labels(2), &NoOracle, &store).unwrap_err();
        match err {
            Error::Oracle { a, b, .. } => assert_eq!((a.as_str(), b.as_str()), ("verb00", "verb01")),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn transport_failure_recovers_on_retry() {
        let calls = AtomicUsize::new(0);
        let oracle = |_: &str| -> std::result::Result<String, String> {
            if calls.fetch_add(1, Ordering::SeqCst) == 0 {
                Err("timeout".into())
            } else {
                Ok("positive".into())
            }
        };
        let built = build_map_llm(&labels(2), &oracle, &TranscriptStore::in_memory()).unwrap();
        assert!(built.map.related(0, 1));
    }

    #[test]
    fn disk_store_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let store = TranscriptStore::open(dir.path()).unwrap();
        let oracle = |_: &str| -> std::result::Result<String, String> { Ok("negative".into()) };
        build_map_llm(&labels(3), &oracle, &store).unwrap();
        let reopened = TranscriptStore::open(dir.path()).unwrap();
        assert_eq!(reopened.len(), 3);
        let built = build_map_llm(&labels(3), &NoOracle, &reopened).unwrap();
        assert_eq!(built.live_calls, 0);
        assert_eq!(reopened.lookups(), 3);
    }

    fn table(vocab: &[String], fill: impl Fn(usize, usize) -> f64) -> ScoreTable {
        let n = vocab.len();
        ScoreTable {
            labels: vocab.to_vec(),
            scores: (0..n).map(|i| (0..n).map(|j| if i == j { 1.0 } else { fill(i.min(j), i.max(j)) }).collect()).collect(),
        }
    }

    #[test]
    fn similarity_threshold_extremes() {
        let vocab = labels(4);
        let zeros = build_map_similarity(&vocab, &table(&vocab, |_, _| 0.0), 0.5, Provenance::Wordnet).unwrap();
        assert_eq!(zeros, RelationshipMap { threshold: Some(0.5), ..RelationshipMap::identity(vocab.clone(), Provenance::Wordnet) });
        let ones = build_map_similarity(&vocab, &table(&vocab, |_, _| 1.0), 0.5, Provenance::Wordnet).unwrap();
        assert!(ones.matrix.iter().flatten().all(|v| *v == 1));
    }

    #[test]
    fn similarity_matches_elementwise_threshold_oracle() {
        let vocab = labels(7);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let upper: Vec<Vec<f64>> = (0..7).map(|_| (0..7).map(|_| rng.random::<f64>()).collect()).collect();
        let t = table(&vocab, |i, j| upper[i][j]);
        let map = build_map_similarity(&vocab, &t, 0.5, Provenance::Word2vec).unwrap();
        for i in 0..7 {
            for j in 0..7 {
                let expected = if i == j || t.scores[i][j] >= 0.5 { 1 } else { 0 };
                assert_eq!(map.matrix[i][j], expected);
            }
        }
    }

    #[test]
    fn out_of_range_score_rejected() {
        let vocab = labels(2);
        let t = table(&vocab, |_, _| 1.5);
        assert!(build_map_similarity(&vocab, &t, 0.5, Provenance::Cooccurrence).is_err());
    }

    #[test]
    fn save_load_and_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.json");
        let mut map = RelationshipMap::identity(labels(3), Provenance::Manual);
        map.set_pair(0, 2, true).unwrap();
        map.save(&path).unwrap();
        assert_eq!(RelationshipMap::load(&path).unwrap(), map);

        let asym = r#"{"labels":["a","b"],"matrix":[[1,1],[0,1]],"provenance":"llm","threshold":null}"#;
        fs::write(&path, asym).unwrap();
        assert!(RelationshipMap::load(&path).unwrap_err().is_validation());

        let diag = r#"{"labels":["a","b"],"matrix":[[0,0],[0,1]],"provenance":"llm"}"#;
        fs::write(&path, diag).unwrap();
        assert!(RelationshipMap::load(&path).unwrap_err().is_validation());

        let nonbinary = r#"{"labels":["a","b"],"matrix":[[1,0.5],[0.5,1]],"provenance":"llm"}"#;
        fs::write(&path, nonbinary).unwrap();
        assert!(RelationshipMap::load(&path).unwrap_err().is_validation());
    }
}
