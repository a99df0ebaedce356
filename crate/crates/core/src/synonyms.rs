//! Interaction synonyms used to perturb the conditioning text during
//! training. The contrastive label is never changed; only the text fed to
//! the text encoder is.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, IoContext, Result};
use crate::relmap::PairOracle;

pub const DEFAULT_K: usize = 3;
pub const DEFAULT_P: f64 = 0.2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynonymTable {
    pub k_s: usize,
    pub p: f64,
    pub entries: BTreeMap<String, Vec<String>>,
}

fn norm(s: &str) -> String {
    s.trim().to_lowercase()
}

impl SynonymTable {
    pub fn empty(p: f64) -> Self {
        SynonymTable {
            k_s: DEFAULT_K,
            p,
            entries: BTreeMap::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.p) {
            return Err(Error::validation(format!("substitution probability {} outside [0, 1]", self.p)));
        }
        for (label, syns) in &self.entries {
            if syns.len() > self.k_s {
                return Err(Error::validation(format!(
                    "`{label}` has {} synonyms, more than k_s = {}",
                    syns.len(),
                    self.k_s
                )));
            }
            let mut seen = HashSet::new();
            for s in syns {
                if !seen.insert(norm(s)) {
                    return Err(Error::validation(format!("duplicate synonym `{s}` for `{label}`")));
                }
            }
        }
        Ok(())
    }

    /// Checks that no synonym equals a different vocabulary label.
    pub fn validate_against(&self, vocabulary: &[String]) -> Result<()> {
        let vocab: HashSet<String> = vocabulary.iter().map(|v| norm(v)).collect();
        for (label, syns) in &self.entries {
            for s in syns {
                let n = norm(s);
                if n != norm(label) && vocab.contains(&n) {
                    return Err(Error::validation(format!(
                        "synonym `{s}` of `{label}` collides with another label"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn synonyms(&self, label: &str) -> &[String] {
        self.entries.get(label).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.validate()?;
        let text = serde_json::to_string_pretty(self).at(path)?;
        fs::write(path, text).at(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).at(path)?;
        let table: SynonymTable = serde_json::from_str(&text).at(path)?;
        table
            .validate()
            .map_err(|e| Error::validation(format!("{}: {e}", path.display())))?;
        Ok(table)
    }
}

fn count_word(k: usize) -> String {
    const WORDS: [&str; 11] = [
        "zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine", "ten",
    ];
    WORDS.get(k).map(|w| w.to_string()).unwrap_or_else(|| k.to_string())
}

/// Numbered synonym request; `contexts` maps each label to an example object.
pub fn build_synonym_prompt(labels: &[String], contexts: &BTreeMap<String, String>, k_s: usize) -> Result<String> {
    if labels.is_empty() {
        return Err(Error::validation("synonym prompt needs at least one label"));
    }
    if k_s == 0 {
        return Err(Error::validation("k_s must be at least 1"));
    }
    let slots: Vec<String> = (1..=k_s).map(|i| format!("`word{i}'")).collect();
    let mut out = format!(
        "Give me {} synonyms for each verbs in form of [{}].",
        count_word(k_s),
        slots.join(", ")
    );
    for (i, label) in labels.iter().enumerate() {
        let object = contexts
            .get(label)
            .ok_or_else(|| Error::validation(format!("no context object for `{label}`")))?;
        out.push_str(&format!("\n{}. `{label}' in context of `{label} {object}'", i + 1));
    }
    Ok(out)
}

fn parse_bracket(line: &str) -> Option<Vec<String>> {
    let open = line.find('[')?;
    let close = line.rfind(']')?;
    if close <= open {
        return None;
    }
    let quotes: &[char] = &['`', '\'', '"', '\u{2018}', '\u{2019}', '\u{201c}', '\u{201d}'];
    let items: Vec<String> = line[open + 1..close]
        .split(',')
        .map(|s| s.trim().trim_matches(quotes).trim().to_string())
        .filter(|s| !s.is_empty())
        .collect();
    if items.is_empty() {
        None
    } else {
        Some(items)
    }
}

fn numbered_line<'a>(response: &'a str, number: usize) -> Option<&'a str> {
    let prefix = format!("{number}.");
    response
        .lines()
        .map(str::trim)
        .find(|l| l.strip_prefix(&prefix).is_some_and(|rest| !rest.starts_with(|c: char| c.is_ascii_digit())))
}

/// Parses one bracketed list per queried label (matched by line number) and
/// removes synonyms that duplicate the label itself, repeat within the list,
/// or equal any other vocabulary label.
pub fn parse_and_dedupe(
    response: &str,
    queried: &[String],
    vocabulary: &[String],
    k_s: usize,
) -> BTreeMap<String, Vec<String>> {
    let vocab: HashSet<String> = vocabulary.iter().map(|v| norm(v)).collect();
    let mut out = BTreeMap::new();
    for (i, label) in queried.iter().enumerate() {
        let parsed = numbered_line(response, i + 1).and_then(parse_bracket);
        let Some(items) = parsed else {
            log::warn!("could not parse synonyms for `{label}`; using none");
            out.insert(label.clone(), Vec::new());
            continue;
        };
        let own = norm(label);
        let mut seen = HashSet::new();
        let kept: Vec<String> = items
            .into_iter()
            .filter(|s| {
                let n = norm(s);
                n != own && !vocab.contains(&n) && seen.insert(n)
            })
            .take(k_s)
            .collect();
        out.insert(label.clone(), kept);
    }
    out
}

/// Queries the oracle once for the whole vocabulary and builds the table.
pub fn build_synonym_table(
    labels: &[String],
    contexts: &BTreeMap<String, String>,
    oracle: &dyn PairOracle,
    k_s: usize,
    p: f64,
) -> Result<(SynonymTable, String, String)> {
    let prompt = build_synonym_prompt(labels, contexts, k_s)?;
    let response = oracle.complete(&prompt).map_err(|cause| Error::Oracle {
        a: "synonyms".into(),
        b: format!("{} labels", labels.len()),
        cause,
    })?;
    let table = SynonymTable {
        k_s,
        p,
        entries: parse_and_dedupe(&response, labels, labels, k_s),
    };
    table.validate()?;
    Ok((table, prompt, response))
}

/// Conditioning text for one view: a uniformly chosen synonym with
/// probability `p`, otherwise the label itself.
pub fn sample_condition_text<R: Rng + ?Sized>(label: &str, table: &SynonymTable, rng: &mut R) -> String {
    let u: f64 = rng.random();
    let syns = table.synonyms(label);
    if u < table.p && !syns.is_empty() {
        syns[rng.random_range(0..syns.len())].clone()
    } else {
        label.to_string()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn s(v: &[&str]) -> Vec<String> {
        v.iter().map(|x| x.to_string()).collect()
    }

    #[test]
    fn prompt_format() {
        let ctx: BTreeMap<String, String> = [("beat".to_string(), "drum".to_string())].into();
        let p = build_synonym_prompt(&s(&["beat"]), &ctx, 3).unwrap();
        assert_eq!(
            p,
            "Give me three synonyms for each verbs in form of [`word1', `word2', `word3'].\n1. `beat' in context of `beat drum'"
        );
        assert!(build_synonym_prompt(&[], &ctx, 3).is_err());
        assert!(build_synonym_prompt(&s(&["hold"]), &ctx, 3).is_err());
    }

    #[test]
    fn parse_drops_collisions_and_garbage() {
        let vocab = s(&["beat", "hit", "catch", "hold"]);
        let resp = "1. [`strike', `Hit ', `pound']\n2. [`grab', `snag', `snatch']\n3. no idea";
        let out = parse_and_dedupe(resp, &s(&["beat", "catch", "hold"]), &vocab, 3);
        assert_eq!(out["beat"], s(&["strike", "pound"]));
        assert_eq!(out["catch"], s(&["grab", "snag", "snatch"]));
        assert!(out["hold"].is_empty());
    }

    #[test]
    fn parse_handles_typographic_quotes_and_self_duplicates() {
        let resp = "1. [\u{2018}pick up\u{2019}, \u{2018}collect\u{2019}, \u{2018}collect\u{2019}]";
        let out = parse_and_dedupe(resp, &s(&["pick up"]), &s(&["pick up"]), 3);
        assert_eq!(out["pick up"], s(&["collect"]));
    }

    #[test]
    fn line_numbers_do_not_alias() {
        let resp = "11. [`x']\n1. [`y']";
        assert_eq!(numbered_line(resp, 1), Some("1. [`y']"));
    }

    #[test]
    fn sampling_boundaries() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut t = SynonymTable::empty(0.0);
        t.entries.insert("hold".into(), s(&["grasp"]));
        assert!((0..1000).all(|_| sample_condition_text("hold", &t, &mut rng) == "hold"));
        t.p = 1.0;
        assert!((0..1000).all(|_| sample_condition_text("hold", &t, &mut rng) == "grasp"));
        assert!((0..100).all(|_| sample_condition_text("carry", &t, &mut rng) == "carry"));
    }

    #[test]
    fn validation() {
        let mut t = SynonymTable::empty(0.2);
        t.entries.insert("hold".into(), s(&["grip", "Grip"]));
        assert!(t.validate().is_err());
        t.entries.insert("hold".into(), s(&["carry"]));
        assert!(t.validate_against(&s(&["hold", "carry"])).is_err());
        t.p = 1.5;
        assert!(t.validate().is_err());
    }
}
