use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::{DatasetSplit, PLACEHOLDER};
use crate::error::{DgrError, Result};

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const PLACEHOLDER_ID: usize = 2;
pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";

/// Word and character vocabularies. Id 0 is padding in both.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    words: Vec<String>,
    word_ids: HashMap<String, usize>,
    chars: Vec<String>,
    char_ids: HashMap<String, usize>,
}

fn index(list: &[String]) -> HashMap<String, usize> {
    list.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect()
}

/// Orders by descending count, then lexicographically.
fn ranked(counts: HashMap<String, usize>, min_count: usize) -> Vec<String> {
    let mut v: Vec<(String, usize)> = counts.into_iter().filter(|(_, c)| *c >= min_count).collect();
    v.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    v.into_iter().map(|(t, _)| t).collect()
}

/// Counts document and query tokens of the given splits (callers pass the
/// training split). Words seen fewer than `min_count` times map to unknown.
pub fn build_vocab(splits: &[&DatasetSplit], min_count: usize) -> Result<Vocabulary> {
    if splits.is_empty() {
        return Err(DgrError::contract("vocabulary needs at least one split"));
    }
    let mut words: HashMap<String, usize> = HashMap::new();
    let mut chars: HashMap<String, usize> = HashMap::new();
    for split in splits {
        for s in &split.samples {
            for t in s.document.iter().chain(&s.query) {
                if t == PLACEHOLDER {
                    continue;
                }
                let t = t.to_lowercase();
                for c in t.chars() {
                    *chars.entry(c.to_string()).or_default() += 1;
                }
                *words.entry(t).or_default() += 1;
            }
        }
    }
    let mut word_list = vec![PAD_TOKEN.to_string(), UNK_TOKEN.to_string(), PLACEHOLDER.to_string()];
    word_list.extend(ranked(words, min_count.max(1)));
    let mut char_list = vec![PAD_TOKEN.to_string(), UNK_TOKEN.to_string()];
    char_list.extend(ranked(chars, 1));
    let v = Vocabulary::from_lists(word_list, char_list)?;
    if v.num_words() == 3 {
        log::warn!("vocabulary is empty (only special tokens)");
    }
    Ok(v)
}

impl Vocabulary {
    fn from_lists(words: Vec<String>, chars: Vec<String>) -> Result<Self> {
        if words.get(..3) != Some(&[PAD_TOKEN.to_string(), UNK_TOKEN.to_string(), PLACEHOLDER.to_string()][..]) {
            return Err(DgrError::Format(
                "word vocabulary must start with <pad>, <unk>, @placeholder".into(),
            ));
        }
        if chars.get(..2) != Some(&[PAD_TOKEN.to_string(), UNK_TOKEN.to_string()][..]) {
            return Err(DgrError::Format("char vocabulary must start with <pad>, <unk>".into()));
        }
        let word_ids = index(&words);
        let char_ids = index(&chars);
        if word_ids.len() != words.len() || char_ids.len() != chars.len() {
            return Err(DgrError::Format("vocabulary contains duplicate entries".into()));
        }
        Ok(Vocabulary {
            words,
            word_ids,
            chars,
            char_ids,
        })
    }

    pub fn num_words(&self) -> usize {
        self.words.len()
    }

    pub fn num_chars(&self) -> usize {
        self.chars.len()
    }

    /// Id for a surface token (looked up lowercased).
    pub fn word_id(&self, token: &str) -> usize {
        if token == PLACEHOLDER {
            return PLACEHOLDER_ID;
        }
        self.word_ids
            .get(&token.to_lowercase())
            .or_else(|| self.word_ids.get(token))
            .copied()
            .unwrap_or(UNK_ID)
    }

    /// Exact id of a vocabulary entry, without unknown fallback.
    pub fn lookup(&self, token: &str) -> Option<usize> {
        self.word_ids.get(token).copied()
    }

    pub fn word(&self, id: usize) -> Option<&str> {
        self.words.get(id).map(String::as_str)
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn char_ids(&self, token: &str) -> Vec<usize> {
        token
            .to_lowercase()
            .chars()
            .map(|c| self.char_ids.get(&c.to_string()).copied().unwrap_or(UNK_ID))
            .collect()
    }

    fn dump(list: &[String]) -> String {
        let mut out = String::new();
        for (i, t) in list.iter().enumerate() {
            let _ = writeln!(out, "{t}\t{i}");
        }
        out
    }

    fn parse(text: &str, what: &str) -> Result<Vec<String>> {
        let mut list = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let (tok, id) = line
                .rsplit_once('\t')
                .ok_or_else(|| DgrError::Format(format!("{what} line {}: expected token<TAB>id", n + 1)))?;
            let id: usize = id
                .parse()
                .map_err(|_| DgrError::Format(format!("{what} line {}: bad id {id:?}", n + 1)))?;
            if id != list.len() {
                return Err(DgrError::Format(format!(
                    "{what} line {}: ids must be consecutive",
                    n + 1
                )));
            }
            list.push(tok.to_string());
        }
        Ok(list)
    }

    /// `token<TAB>id` lines for words.
    pub fn words_tsv(&self) -> String {
        Self::dump(&self.words)
    }

    pub fn chars_tsv(&self) -> String {
        Self::dump(&self.chars)
    }

    pub fn from_tsv(words: &str, chars: &str) -> Result<Self> {
        Self::from_lists(Self::parse(words, "vocab")?, Self::parse(chars, "chars")?)
    }

    pub fn save(&self, words_path: &Path, chars_path: &Path) -> Result<()> {
        fs::write(words_path, self.words_tsv()).map_err(|e| DgrError::io(words_path, e))?;
        fs::write(chars_path, self.chars_tsv()).map_err(|e| DgrError::io(chars_path, e))
    }

    pub fn load(words_path: &Path, chars_path: &Path) -> Result<Self> {
        let w = fs::read_to_string(words_path).map_err(|e| DgrError::io(words_path, e))?;
        let c = fs::read_to_string(chars_path).map_err(|e| DgrError::io(chars_path, e))?;
        Self::from_tsv(&w, &c)
    }
}
