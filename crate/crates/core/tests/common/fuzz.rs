//! Mutational JSON-lines record generator plus a validity oracle that reads
//! the raw JSON value directly instead of going through the loader.

use dgr_core::corpus::{ClozeSample, PLACEHOLDER};
use rand::seq::SliceRandom;
use rand::Rng;
use serde_json::{json, Map, Value};

const WORDS: &[&str] = &[
    "the", "Fox", "ran", "Toad", "said", "mr.", "Skunk", ",", ".", "bug", "AND", "jimmy",
];
const FIELDS: &[&str] = &["id", "document", "query", "candidates", "answer"];

fn base<R: Rng>(rng: &mut R) -> Map<String, Value> {
    let n = rng.gen_range(1..12);
    let doc: Vec<String> = (0..n).map(|_| WORDS.choose(rng).unwrap().to_string()).collect();
    let m = rng.gen_range(1..6);
    let mut query: Vec<String> = (0..m).map(|_| WORDS.choose(rng).unwrap().to_string()).collect();
    let at = rng.gen_range(0..=query.len());
    query.insert(at, PLACEHOLDER.into());
    let g = rng.gen_range(1..4);
    let cands: Vec<String> = (0..g).map(|_| doc.choose(rng).unwrap().clone()).collect();
    let answer = cands.choose(rng).unwrap().clone();
    let mut o = Map::new();
    if rng.gen_bool(0.5) {
        o.insert("id".into(), json!(format!("s{}", rng.gen_range(0..1000))));
    }
    o.insert("document".into(), json!(doc));
    o.insert("query".into(), json!(query));
    o.insert("candidates".into(), json!(cands));
    if rng.gen_bool(0.8) {
        o.insert("answer".into(), json!(answer));
    }
    o
}

fn arr<'a>(o: &'a mut Map<String, Value>, key: &str) -> Option<&'a mut Vec<Value>> {
    o.get_mut(key).and_then(Value::as_array_mut)
}

fn poke<R: Rng>(rng: &mut R, o: &mut Map<String, Value>, key: &str, tok: Value) {
    if let Some(a) = arr(o, key) {
        let at = rng.gen_range(0..=a.len());
        a.insert(at, tok);
    }
}

fn mutate<R: Rng>(rng: &mut R, o: &mut Map<String, Value>) {
    let lists = ["document", "query", "candidates"];
    let list = *lists.choose(rng).unwrap();
    match rng.gen_range(0..20) {
        0 => {
            if let Some(q) = arr(o, "query") {
                q.retain(|t| t != PLACEHOLDER);
            }
        }
        1 => poke(rng, o, "query", json!(PLACEHOLDER)),
        2 => poke(rng, o, "query", json!("@PlaceHolder")),
        3 => poke(rng, o, "candidates", json!("zebra")),
        4 => {
            o.insert("answer".into(), json!(WORDS.choose(rng).unwrap()));
        }
        5 => {
            o.insert(list.into(), json!([]));
        }
        6 => {
            let t = *["a b", "x\ty", "a\u{a0}b", "q\n"].choose(rng).unwrap();
            poke(rng, o, list, json!(t))
        }
        7 => poke(rng, o, list, json!("")),
        8 => {
            if let Some(c) = arr(o, "candidates") {
                if let Some(v) = c.first().cloned() {
                    c.push(v);
                }
            }
        }
        9 => {
            if let Some(c) = arr(o, "candidates") {
                for v in c.iter_mut() {
                    *v = json!(v.as_str().unwrap_or("").to_uppercase());
                }
            }
        }
        10 => poke(rng, o, "candidates", json!(PLACEHOLDER)),
        11 => {
            let k = *lists.choose(rng).unwrap();
            o.remove(k);
        }
        12 => {
            o.insert("extra".into(), json!(1));
        }
        13 => {
            let bad = [json!("doc"), json!(3), json!(null), json!([1, 2]), json!({"a": 1})];
            let k = *FIELDS.choose(rng).unwrap();
            o.insert(k.into(), bad.choose(rng).unwrap().clone());
        }
        14 => {
            o.insert("answer".into(), Value::Null);
        }
        15 => {
            o.remove("answer");
        }
        16 => {
            let a = o.get("answer").and_then(Value::as_str).map(|a| a.to_uppercase());
            if let Some(a) = a {
                o.insert("answer".into(), json!(a));
            }
        }
        17 => {
            poke(rng, o, "document", json!("@PLACEHOLDER"));
            poke(rng, o, "candidates", json!("@PLACEHOLDER"));
        }
        18 => poke(rng, o, list, json!(7)),
        _ => {
            // mixed-case twin of an existing candidate
            let c0 = o
                .get("candidates")
                .and_then(|c| c.get(0))
                .and_then(Value::as_str)
                .map(str::to_string);
            if let Some(c0) = c0 {
                let twin: String = c0
                    .chars()
                    .enumerate()
                    .map(|(i, ch)| if i % 2 == 0 { ch.to_ascii_uppercase() } else { ch })
                    .collect();
                poke(rng, o, "candidates", json!(twin));
            }
        }
    }
}

/// One fuzzed line: a valid base record with 0 to 3 mutations, sometimes
/// followed by a textual corruption.
pub fn fuzz_record<R: Rng>(rng: &mut R) -> String {
    let mut o = base(rng);
    for _ in 0..rng.gen_range(0..4) {
        mutate(rng, &mut o);
    }
    let text = Value::Object(o).to_string();
    match rng.gen_range(0..25) {
        0 => text[..rng.gen_range(0..text.len())].to_string(),
        1 => format!("{text} trailing"),
        2 => text.replacen(':', "=", 1),
        _ => text,
    }
}

fn strings(v: Option<&Value>) -> Option<Vec<String>> {
    v?.as_array()?.iter().map(|t| t.as_str().map(str::to_string)).collect()
}

fn token_ok(t: &str) -> bool {
    !t.is_empty() && !t.chars().any(char::is_whitespace)
}

fn contents_ok(doc: &[String], query: &[String], cands: &[String], answer: Option<&String>) -> bool {
    let lower = |t: &String| t.to_lowercase();
    !doc.is_empty()
        && !query.is_empty()
        && doc.iter().chain(query).all(|t| token_ok(t))
        && query.iter().filter(|t| *t == PLACEHOLDER).count() == 1
        && !cands.is_empty()
        && cands
            .iter()
            .all(|c| token_ok(c) && c != PLACEHOLDER && doc.iter().any(|t| lower(t) == lower(c)))
        && answer.is_none_or(|a| cands.contains(a))
}

fn dedup(v: Vec<String>) -> Vec<String> {
    let mut out = Vec::new();
    for x in v {
        if !out.contains(&x) {
            out.push(x);
        }
    }
    out
}

/// Whether the loader must accept `text` when folding to lowercase.
pub fn oracle_valid(text: &str) -> bool {
    let Ok(Value::Object(o)) = serde_json::from_str::<Value>(text) else {
        return false;
    };
    if o.keys().any(|k| !FIELDS.contains(&k.as_str())) {
        return false;
    }
    let opt_str = |k: &str| matches!(o.get(k), None | Some(Value::Null) | Some(Value::String(_)));
    if !opt_str("id") || !opt_str("answer") {
        return false;
    }
    let (Some(doc), Some(query), Some(cands)) = (
        strings(o.get("document")),
        strings(o.get("query")),
        strings(o.get("candidates")),
    ) else {
        return false;
    };
    let answer = o.get("answer").and_then(Value::as_str).map(str::to_string);
    let cands = dedup(cands);
    if !contents_ok(&doc, &query, &cands, answer.as_ref()) {
        return false;
    }
    let low = |t: &String| t.to_lowercase();
    let ldoc: Vec<String> = doc.iter().map(low).collect();
    let lq: Vec<String> = query
        .iter()
        .map(|t| if t == PLACEHOLDER { t.clone() } else { low(t) })
        .collect();
    let lc = dedup(cands.iter().map(low).collect());
    contents_ok(&ldoc, &lq, &lc, answer.map(|a| a.to_lowercase()).as_ref())
}

/// Invariants every loaded (lowercased) sample must satisfy, checked by
/// exact token comparison.
pub fn sample_invariants(s: &ClozeSample) -> Result<(), String> {
    let ph: Vec<usize> = (0..s.query.len()).filter(|&i| s.query[i] == PLACEHOLDER).collect();
    if ph != vec![s.placeholder_index] {
        return Err(format!("placeholder positions {ph:?} vs index {}", s.placeholder_index));
    }
    if s.document.is_empty() || s.candidates.is_empty() {
        return Err("empty document or candidate set".into());
    }
    for t in s.document.iter().chain(&s.query).chain(&s.candidates) {
        if !token_ok(t) {
            return Err(format!("bad token {t:?}"));
        }
        if t != PLACEHOLDER && *t != t.to_lowercase() {
            return Err(format!("token {t:?} not lowercased"));
        }
    }
    for (i, c) in s.candidates.iter().enumerate() {
        if c == PLACEHOLDER || s.candidates[..i].contains(c) || !s.document.contains(c) {
            return Err(format!("candidate {c:?} invalid"));
        }
    }
    match &s.answer {
        Some(a) if !s.candidates.contains(a) => Err(format!("answer {a:?} not a candidate")),
        _ => Ok(()),
    }
}
