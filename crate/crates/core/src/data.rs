//! Corpus records, preprocessing, tokenization and embedding files.

use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use unicode_segmentation::UnicodeSegmentation;

use crate::error::{Error, Result};

pub const MIN_COMMENT_CHARS: usize = 10;
pub const MIN_COMMENTS: usize = 3;
/// Token used for a sentence with no tokens left after cleaning.
pub const EMPTY_TOKEN: &str = "<empty>";

/// One post with its comments. `label` 1 means false information.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusExample {
    pub id: String,
    pub label: u8,
    pub post: Vec<String>,
    pub comments: Vec<String>,
}

/// A rejected corpus line.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LineError {
    /// 1-based line number.
    pub line: usize,
    pub key: Option<String>,
    pub message: String,
}

impl std::fmt::Display for LineError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match &self.key {
            Some(k) => write!(f, "line {}: key `{k}`: {}", self.line, self.message),
            None => write!(f, "line {}: {}", self.line, self.message),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct LoadedCorpus {
    pub examples: Vec<CorpusExample>,
    pub errors: Vec<LineError>,
}

impl LoadedCorpus {
    /// The examples, or the first line error as a parse error.
    pub fn into_strict(self, path: &Path) -> Result<Vec<CorpusExample>> {
        match self.errors.into_iter().next() {
            Some(e) => Err(Error::Parse {
                path: path.to_path_buf(),
                line: e.line,
                message: match e.key {
                    Some(k) => format!("key `{k}`: {}", e.message),
                    None => e.message,
                },
            }),
            None => Ok(self.examples),
        }
    }
}

fn line_error(line: usize, key: Option<&str>, message: impl Into<String>) -> LineError {
    LineError {
        line,
        key: key.map(str::to_owned),
        message: message.into(),
    }
}

fn string_array(obj: &serde_json::Map<String, Value>, key: &str, line: usize) -> std::result::Result<Vec<String>, LineError> {
    let items = obj
        .get(key)
        .ok_or_else(|| line_error(line, Some(key), "missing"))?
        .as_array()
        .ok_or_else(|| line_error(line, Some(key), "expected an array of strings"))?;
    items
        .iter()
        .map(|v| {
            v.as_str()
                .map(str::to_owned)
                .ok_or_else(|| line_error(line, Some(key), "expected an array of strings"))
        })
        .collect()
}

fn parse_record(text: &str, line: usize) -> std::result::Result<CorpusExample, LineError> {
    let value: Value = serde_json::from_str(text).map_err(|e| line_error(line, None, e.to_string()))?;
    let obj = value
        .as_object()
        .ok_or_else(|| line_error(line, None, "expected a JSON object"))?;
    let id = match obj.get("id") {
        Some(Value::String(s)) => s.clone(),
        Some(Value::Number(n)) => n.to_string(),
        Some(_) => return Err(line_error(line, Some("id"), "expected a string")),
        None => return Err(line_error(line, Some("id"), "missing")),
    };
    let label = match obj.get("label").map(Value::as_u64) {
        Some(Some(l @ (0 | 1))) => l as u8,
        Some(_) => return Err(line_error(line, Some("label"), "expected 0 or 1")),
        None => return Err(line_error(line, Some("label"), "missing")),
    };
    let post = string_array(obj, "post", line)?;
    if post.is_empty() {
        return Err(line_error(line, Some("post"), "needs at least one sentence"));
    }
    let comments = string_array(obj, "comments", line)?;
    Ok(CorpusExample { id, label, post, comments })
}

/// Parses line-delimited records. Blank lines are skipped; malformed lines
/// are collected rather than aborting the load.
pub fn parse_corpus(text: &str) -> LoadedCorpus {
    let mut out = LoadedCorpus::default();
    for (i, raw) in text.lines().enumerate() {
        if raw.trim().is_empty() {
            continue;
        }
        match parse_record(raw, i + 1) {
            Ok(ex) => out.examples.push(ex),
            Err(e) => out.errors.push(e),
        }
    }
    out
}

pub fn load_corpus(path: impl AsRef<Path>) -> Result<LoadedCorpus> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let out = parse_corpus(&text);
    if out.examples.is_empty() && out.errors.is_empty() {
        log::warn!("{}: corpus is empty", path.display());
    }
    for e in &out.errors {
        log::warn!("{}: {e}", path.display());
    }
    Ok(out)
}

/// Serializes examples as one JSON object per line.
pub fn corpus_to_string(examples: &[CorpusExample]) -> String {
    let mut s = String::new();
    for ex in examples {
        s.push_str(&serde_json::to_string(ex).expect("corpus example serializes"));
        s.push('\n');
    }
    s
}

pub fn write_corpus(path: impl AsRef<Path>, examples: &[CorpusExample]) -> Result<()> {
    write_atomic(path, corpus_to_string(examples).as_bytes())
}

/// Writes `bytes` to a sibling temp file, then renames it over `path`.
pub fn write_atomic(path: impl AsRef<Path>, bytes: &[u8]) -> Result<()> {
    let path = path.as_ref();
    let tmp = temp_path(path);
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if let Err(e) = result {
        let _ = fs::remove_file(&tmp);
        return Err(Error::io(path, e));
    }
    Ok(())
}

fn temp_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(format!(".tmp{}", std::process::id()));
    path.with_file_name(name)
}

/// Counts per preprocessing rule.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DropReport {
    pub posts_in: usize,
    pub posts_out: usize,
    pub duplicate_comments: usize,
    pub short_comments: usize,
    pub posts_few_comments: usize,
}

/// User-visible character count (extended grapheme clusters).
pub fn char_count(s: &str) -> usize {
    s.graphemes(true).count()
}

/// Per-post dedupe, then short-comment removal, then the comment-count filter.
pub fn preprocess(corpus: &[CorpusExample]) -> (Vec<CorpusExample>, DropReport) {
    let mut report = DropReport {
        posts_in: corpus.len(),
        ..DropReport::default()
    };
    let mut out = Vec::with_capacity(corpus.len());
    for ex in corpus {
        let mut seen = HashSet::new();
        let mut comments = Vec::with_capacity(ex.comments.len());
        for c in &ex.comments {
            if !seen.insert(c.as_str()) {
                report.duplicate_comments += 1;
            } else if char_count(c) < MIN_COMMENT_CHARS {
                report.short_comments += 1;
            } else {
                comments.push(c.clone());
            }
        }
        if comments.len() < MIN_COMMENTS {
            report.posts_few_comments += 1;
            continue;
        }
        out.push(CorpusExample {
            comments,
            ..ex.clone()
        });
    }
    report.posts_out = out.len();
    (out, report)
}

/// Lowercases, splits on whitespace and strips punctuation at token edges.
/// Yields [`EMPTY_TOKEN`] when nothing survives.
pub fn tokenize(text: &str) -> Vec<String> {
    let tokens: Vec<String> = text
        .split_whitespace()
        .map(|t| t.trim_matches(|c: char| c.is_ascii_punctuation() || is_punct(c)))
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect();
    if tokens.is_empty() {
        vec![EMPTY_TOKEN.to_owned()]
    } else {
        tokens
    }
}

fn is_punct(c: char) -> bool {
    matches!(
        c,
        '“' | '”' | '‘' | '’' | '«' | '»' | '…' | '—' | '–' | '¡' | '¿' | '。' | '，' | '、' | '！' | '？' | '：' | '；' | '（' | '）' | '【' | '】' | '《' | '》' | '「' | '」'
    )
}

/// Pretrained amplitude vectors in file order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Embeddings {
    pub dim: usize,
    pub entries: Vec<(String, Vec<f64>)>,
}

/// Parses `token v₁ … v_d` lines. Blank lines are skipped; a repeated token
/// keeps its first vector.
pub fn parse_embeddings(text: &str, dim: usize, path: &Path) -> Result<Embeddings> {
    let mut seen = HashSet::new();
    let mut entries = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let mut parts = line.split_whitespace();
        let Some(token) = parts.next() else { continue };
        let values: std::result::Result<Vec<f64>, _> = parts.map(str::parse::<f64>).collect();
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let values = values.map_err(|e| parse_err(format!("token `{token}`: {e}")))?;
        if values.len() != dim {
            return Err(parse_err(format!("token `{token}` has {} values, expected {dim}", values.len())));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(parse_err(format!("token `{token}` has a non-finite value")));
        }
        if seen.insert(token.to_owned()) {
            entries.push((token.to_owned(), values));
        }
    }
    Ok(Embeddings { dim, entries })
}

pub fn load_embeddings(path: impl AsRef<Path>, dim: usize) -> Result<Embeddings> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_embeddings(&text, dim, path)
}
