//! Reversible word-piece tokenization shared by the toy models and the
//! prompt budget logic.
//!
//! Text is cut into pieces that concatenate back to the original string:
//! a word, a digit or a punctuation mark optionally carrying one leading
//! space, a newline, or a lone whitespace character. Reserved tokens such
//! as `[PHY_001]` are always a single piece.

use std::collections::HashMap;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;
pub const SPECIALS: [&str; 4] = ["<pad>", "<s>", "</s>", "<unk>"];

/// Matches one reserved token anywhere in a string.
pub const RESERVED_TOKEN_PATTERN: &str = r"\[[A-Z][A-Z0-9]*_\d+\]";

fn piece_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(&format!(r" ?{RESERVED_TOKEN_PATTERN}| ?[A-Za-z]+| ?[0-9]| ?[^\sA-Za-z0-9]|\n|\s")).expect("piece regex"))
}

pub(crate) fn reserved_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(RESERVED_TOKEN_PATTERN).expect("reserved regex"))
}

pub fn is_reserved_token(piece: &str) -> bool {
    reserved_regex()
        .find(piece)
        .is_some_and(|m| m.start() == 0 && m.end() == piece.len())
}

/// Splits text into pieces; `pieces(t).concat() == t` for every input.
pub fn pieces(text: &str) -> Vec<&str> {
    piece_regex().find_iter(text).map(|m| m.as_str()).collect()
}

pub trait Tokenizer {
    fn tokenize<'a>(&self, text: &'a str) -> Vec<&'a str>;

    fn count_tokens(&self, text: &str) -> usize {
        self.tokenize(text).len()
    }
}

/// Vocabulary-free tokenizer over [`pieces`].
#[derive(Debug, Clone, Copy, Default)]
pub struct PieceTokenizer;

impl Tokenizer for PieceTokenizer {
    fn tokenize<'a>(&self, text: &'a str) -> Vec<&'a str> {
        pieces(text)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    tokens: Vec<String>,
    /// Entries at or beyond this index were added after the base build.
    base_size: usize,
    #[serde(skip)]
    index: HashMap<String, u32>,
}

impl Vocabulary {
    /// Builds a base vocabulary from the pieces of `texts`, most frequent
    /// first, ties broken lexicographically.
    pub fn build<'a, I>(texts: I, min_count: usize) -> Self
    where
        I: IntoIterator<Item = &'a str>,
    {
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for text in texts {
            for p in pieces(text) {
                let p = match p.strip_prefix(' ') {
                    Some(rest) if is_reserved_token(rest) => " ",
                    _ => p,
                };
                if !is_reserved_token(p) {
                    *counts.entry(p).or_default() += 1;
                }
            }
        }
        let mut entries: Vec<(&str, usize)> = counts.into_iter().filter(|(_, c)| *c >= min_count).collect();
        entries.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        let tokens: Vec<String> = SPECIALS
            .iter()
            .map(|s| s.to_string())
            .chain(entries.into_iter().map(|(p, _)| p.to_string()))
            .collect();
        let base_size = tokens.len();
        Self::from_parts(tokens, base_size)
    }

    pub fn from_parts(tokens: Vec<String>, base_size: usize) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i as u32)).collect();
        Vocabulary { tokens, base_size, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn base_size(&self) -> usize {
        self.base_size
    }

    pub fn added_tokens(&self) -> &[String] {
        &self.tokens[self.base_size..]
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn is_base_token(&self, token: &str) -> bool {
        self.id(token).is_some_and(|i| (i as usize) < self.base_size)
    }

    /// Appends tokens not already present; returns the ones actually added.
    pub fn add_tokens<S: AsRef<str>>(&mut self, tokens: &[S]) -> Vec<String> {
        let mut added = Vec::new();
        for t in tokens {
            let t = t.as_ref();
            if !self.index.contains_key(t) {
                self.index.insert(t.to_string(), self.tokens.len() as u32);
                self.tokens.push(t.to_string());
                added.push(t.to_string());
            }
        }
        added
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        self.tokenize(text).into_iter().map(|p| self.id(p).unwrap_or(UNK)).collect()
    }

    /// Inverse of [`encode`](Self::encode) for in-vocabulary text; special
    /// tokens other than `<unk>` are dropped.
    pub fn decode(&self, ids: &[u32]) -> String {
        let mut out = String::new();
        for &id in ids {
            if id == PAD || id == BOS || id == EOS {
                continue;
            }
            out.push_str(self.token(id).unwrap_or(SPECIALS[UNK as usize]));
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("vocabulary serializes")
    }

    pub fn from_json(text: &str) -> serde_json::Result<Self> {
        let v: Vocabulary = serde_json::from_str(text)?;
        Ok(Self::from_parts(v.tokens, v.base_size))
    }
}

impl Tokenizer for Vocabulary {
    /// Like [`pieces`], but a reserved token carrying a leading space is
    /// split so that each reserved token has exactly one vocabulary entry.
    fn tokenize<'a>(&self, text: &'a str) -> Vec<&'a str> {
        let mut out = Vec::new();
        for m in piece_regex().find_iter(text) {
            let p = m.as_str();
            if let Some(rest) = p.strip_prefix(' ') {
                if is_reserved_token(rest) {
                    out.push(&p[..1]);
                    out.push(rest);
                    continue;
                }
            }
            out.push(p);
        }
        out
    }
}
