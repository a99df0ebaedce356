use std::collections::BTreeMap;

use intra_core::synonyms::{build_synonym_table, sample_condition_text, SynonymTable};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn s(v: &[&str]) -> Vec<String> {
    v.iter().map(|x| x.to_string()).collect()
}

const RESPONSE: &str = "1. `beat' -> [`strike', `hit', `pound']\n\
2. `hit' -> [`strike', `smack', `beat']\n\
3. `pour' -> [`decant', `tip', `spill']";

fn table() -> SynonymTable {
    let vocab = s(&["beat", "hit", "pour"]);
    let ctx: BTreeMap<String, String> =
        [("beat", "drum"), ("hit", "baseball"), ("pour", "cup")].map(|(a, b)| (a.to_string(), b.to_string())).into();
    let oracle = |_: &str| -> Result<String, String> { Ok(RESPONSE.to_string()) };
    let (table, prompt, response) = build_synonym_table(&vocab, &ctx, &oracle, 3, 0.3).unwrap();
    assert!(prompt.contains("1. `beat' in context of `beat drum'"));
    assert_eq!(response, RESPONSE);
    table
}

#[test]
fn vocabulary_collisions_are_removed() {
    let t = table();
    assert_eq!(t.synonyms("beat"), ["strike", "pound"]);
    assert_eq!(t.synonyms("hit"), ["strike", "smack"]);
    assert_eq!(t.synonyms("pour"), ["decant", "tip", "spill"]);
    t.validate_against(&s(&["beat", "hit", "pour"])).unwrap();
}

#[test]
fn table_round_trips_through_disk() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("syn.json");
    let t = table();
    t.save(&path).unwrap();
    assert_eq!(SynonymTable::load(&path).unwrap(), t);

    std::fs::write(&path, r#"{"k_s": 1, "p": 0.2, "entries": {"a": ["b", "c"]}}"#).unwrap();
    assert!(SynonymTable::load(&path).unwrap_err().is_validation());
}

#[test]
fn substitution_spreads_evenly_over_synonyms() {
    let t = table();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let n = 60_000;
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for _ in 0..n {
        *counts.entry(sample_condition_text("pour", &t, &mut rng)).or_default() += 1;
    }
    let label = counts["pour"] as f64 / n as f64;
    assert!((label - 0.7).abs() < 0.01, "label kept {label}");
    for syn in ["decant", "tip", "spill"] {
        let f = counts[syn] as f64 / n as f64;
        assert!((f - 0.1).abs() < 0.01, "{syn} {f}");
    }
    // labels without synonyms are never perturbed
    assert!((0..1000).all(|_| sample_condition_text("hold", &t, &mut rng) == "hold"));
}
