//! Shared text helpers: surface tokenization, detokenization, metric
//! normalization, stopwords and stable seed derivation.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Splits text into surface tokens, keeping case. Whitespace separates
/// tokens and every punctuation character becomes its own token, except
/// `.` and `,` between two digits (`1,000`, `3.5`).
pub fn split_surface(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for chunk in text.split_whitespace() {
        let chars: Vec<char> = chunk.chars().collect();
        let mut cur = String::new();
        for (i, &c) in chars.iter().enumerate() {
            let numeric_sep = (c == '.' || c == ',')
                && i > 0
                && i + 1 < chars.len()
                && chars[i - 1].is_ascii_digit()
                && chars[i + 1].is_ascii_digit();
            if is_punct(c) && !numeric_sep {
                if !cur.is_empty() {
                    out.push(std::mem::take(&mut cur));
                }
                out.push(c.to_string());
            } else {
                cur.push(c);
            }
        }
        if !cur.is_empty() {
            out.push(cur);
        }
    }
    out
}

pub fn is_punct(c: char) -> bool {
    c.is_ascii_punctuation() || (!c.is_alphanumeric() && !c.is_whitespace() && !c.is_control())
}

pub fn is_punct_token(tok: &str) -> bool {
    !tok.is_empty() && tok.chars().all(is_punct)
}

/// Inverse of [`split_surface`] for canonically spaced text.
pub fn detokenize<S: AsRef<str>>(tokens: &[S]) -> String {
    let mut out = String::new();
    let mut glue_next = false;
    for tok in tokens {
        let tok = tok.as_ref();
        let attaches_left = matches!(tok, "," | "." | "!" | "?" | ";" | ":" | ")" | "]" | "%" | "'");
        if !out.is_empty() && !attaches_left && !glue_next {
            out.push(' ');
        }
        out.push_str(tok);
        glue_next = matches!(tok, "(" | "[");
    }
    out
}

/// Metric tokenization: lowercase, delete punctuation, split on whitespace.
pub fn metric_tokens(text: &str) -> Vec<String> {
    let cleaned: String = text
        .chars()
        .flat_map(|c| c.to_lowercase())
        .filter(|&c| !is_punct(c))
        .collect();
    cleaned.split_whitespace().map(str::to_owned).collect()
}

/// Collapses whitespace and lowercases; used for text-equality checks.
pub fn normalize(text: &str) -> String {
    detokenize(
        &split_surface(text)
            .iter()
            .map(|t| t.to_lowercase())
            .collect::<Vec<_>>(),
    )
}

const STOPWORDS: &[&str] = &[
    "a", "about", "an", "and", "are", "as", "at", "be", "been", "but", "by", "did", "do", "does",
    "for", "from", "had", "has", "have", "he", "her", "him", "his", "i", "if", "in", "into", "is",
    "it", "its", "know", "me", "my", "of", "on", "or", "our", "she", "so", "that", "the", "their",
    "them", "there", "they", "this", "to", "u1", "u2", "was", "we", "were", "what", "when",
    "where", "which", "who", "why", "will", "with", "you", "your",
];

pub fn default_stopwords() -> HashSet<String> {
    STOPWORDS.iter().map(|s| s.to_string()).collect()
}

/// Reads a stopword list: one word per line, `#` comments allowed.
pub fn load_stopwords(path: &Path) -> Result<HashSet<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(str::to_lowercase)
        .collect())
}

/// Stable 64-bit seed derived from a global seed and string parts.
pub fn derive_seed(global: u64, parts: &[&str]) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(global.to_le_bytes());
    for p in parts {
        hasher.update((p.len() as u64).to_le_bytes());
        hasher.update(p.as_bytes());
    }
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest is 32 bytes"))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Iterates the non-empty lines of a file with 1-based line numbers.
pub fn read_lines(path: &Path) -> Result<Vec<(usize, String)>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if !line.trim().is_empty() {
            out.push((i + 1, line));
        }
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, header: Option<&impl Serialize>, rows: &[T]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut put = |line: String| -> Result<()> {
        w.write_all(line.as_bytes())
            .and_then(|_| w.write_all(b"\n"))
            .map_err(|e| Error::io(path, e))
    };
    if let Some(h) = header {
        put(serde_json::to_string(h).expect("header serializes"))?;
    }
    for row in rows {
        put(serde_json::to_string(row).expect("row serializes"))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
