//! N-gram decontamination of training records against evaluation text.
//!
//! Text is normalized to lowercase word tokens with punctuation, symbols and
//! control characters acting as separators. A training record is removed when
//! any window of `n` consecutive normalized tokens also occurs in an
//! evaluation record. Windows are stored as 128-bit XXH3 digests; a digest
//! collision counts as a match.

use std::collections::HashMap;
use std::sync::OnceLock;

use rayon::prelude::*;
use regex::Regex;
use serde::{Deserialize, Serialize};
use xxhash_rust::xxh3::xxh3_128;

use crate::error::{Error, Result};

pub const DEFAULT_GRAM_LEN: usize = 10;

fn word_pattern() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"[^\s\p{P}\p{S}\p{Cc}]+").expect("static pattern"))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NormalizedText {
    tokens: Vec<String>,
}

impl NormalizedText {
    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn to_text(&self) -> String {
        self.tokens.join(" ")
    }
}

fn lowercase(word: &str) -> String {
    if word.is_ascii() {
        return word.to_ascii_lowercase();
    }
    // simple (one-to-one) mapping: keep the first char of the full lowercase
    word.chars()
        .map(|c| c.to_lowercase().next().unwrap_or(c))
        .collect()
}

pub fn normalize(raw: &str) -> NormalizedText {
    NormalizedText {
        tokens: word_pattern()
            .find_iter(raw)
            .map(|m| lowercase(m.as_str()))
            .collect(),
    }
}

/// Like [`normalize`], for raw bytes that must be valid UTF-8.
pub fn normalize_bytes(raw: &[u8]) -> Result<NormalizedText> {
    let text = std::str::from_utf8(raw).map_err(|e| Error::InvalidEncoding {
        offset: e.valid_up_to(),
    })?;
    Ok(normalize(text))
}

fn window_digest(buf: &mut Vec<u8>, window: &[String]) -> u128 {
    buf.clear();
    for (i, tok) in window.iter().enumerate() {
        if i > 0 {
            // NUL never survives normalization, so it cannot fake a boundary
            buf.push(0);
        }
        buf.extend_from_slice(tok.as_bytes());
    }
    xxh3_128(buf)
}

/// Digests of every `n`-token window of evaluation text.
#[derive(Debug, Clone)]
pub struct NGramIndex {
    n: usize,
    /// Digest to the first evaluation record that produced it.
    grams: HashMap<u128, usize>,
    sources: usize,
}

impl NGramIndex {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn len(&self) -> usize {
        self.grams.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grams.is_empty()
    }

    pub fn source_count(&self) -> usize {
        self.sources
    }

    /// First window of `text` present in the index, with its window position and eval source.
    pub fn first_match(&self, text: &NormalizedText) -> Option<(usize, usize)> {
        if text.len() < self.n {
            return None;
        }
        let mut buf = Vec::with_capacity(16 * self.n);
        text.tokens
            .windows(self.n)
            .enumerate()
            .find_map(|(pos, w)| {
                self.grams
                    .get(&window_digest(&mut buf, w))
                    .map(|&src| (pos, src))
            })
    }
}

pub fn build_index<S: AsRef<str>>(eval_records: &[S], n: usize) -> Result<NGramIndex> {
    if n == 0 {
        return Err(Error::InputDomain("gram length must be >= 1".into()));
    }
    let mut grams = HashMap::new();
    let mut buf = Vec::new();
    for (src, rec) in eval_records.iter().enumerate() {
        let text = normalize(rec.as_ref());
        if text.len() < n {
            continue;
        }
        for w in text.tokens.windows(n) {
            grams.entry(window_digest(&mut buf, w)).or_insert(src);
        }
    }
    Ok(NGramIndex {
        n,
        grams,
        sources: eval_records.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditEntry {
    pub record_id: usize,
    pub window: Vec<String>,
    pub eval_source: usize,
}

/// Order-preserving partition of the input records.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterOutcome<S> {
    pub kept: Vec<S>,
    pub removed: Vec<S>,
    pub audit: Vec<AuditEntry>,
    /// Normalized tokens scanned.
    pub tokens: usize,
}

pub fn filter_corpus<S>(train: Vec<S>, index: &NGramIndex) -> FilterOutcome<S>
where
    S: AsRef<str> + Send + Sync,
{
    let verdicts: Vec<(usize, Option<AuditEntry>)> = train
        .par_iter()
        .enumerate()
        .map(|(id, rec)| {
            let text = normalize(rec.as_ref());
            let hit = index.first_match(&text).map(|(pos, src)| AuditEntry {
                record_id: id,
                window: text.tokens[pos..pos + index.n].to_vec(),
                eval_source: src,
            });
            (text.len(), hit)
        })
        .collect();

    let mut out = FilterOutcome {
        kept: Vec::new(),
        removed: Vec::new(),
        audit: Vec::new(),
        tokens: 0,
    };
    for (rec, (len, hit)) in train.into_iter().zip(verdicts) {
        out.tokens += len;
        match hit {
            Some(entry) => {
                out.removed.push(rec);
                out.audit.push(entry);
            }
            None => out.kept.push(rec),
        }
    }
    out
}
