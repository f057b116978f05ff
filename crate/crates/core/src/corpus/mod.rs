//! Reference corpus: ingest, token index, and longest-match auditing.
//!
//! The index concatenates all documents into one symbol stream with a unique
//! separator symbol between consecutive documents, then builds a suffix
//! automaton over the stream. Separators never collide with vocabulary ids,
//! so a common run with a query can never straddle a document boundary and
//! every match maps back to a single document and offset.

mod automaton;

pub use automaton::SuffixAutomaton;

use crate::error::{Error, Result};
use crate::lm::vocab::{escape_token, unescape_token, Vocabulary};
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;

/// One document as it appears in an ingest file or an index file.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq, Eq)]
pub struct RawRecord {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub title: Option<String>,
    pub text: String,
}

/// Counters for one ingest pass. `kept` documents made it into the output.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct IngestReport {
    pub lines: usize,
    pub malformed: usize,
    pub empty: usize,
    pub duplicates: usize,
    pub dropped_chars: usize,
    pub kept: usize,
}

/// Lowercases, converts CR and CRLF line ends to LF, turns tabs into spaces,
/// and removes characters the vocabulary cannot represent. Returns the
/// cleaned text and the number of characters removed.
pub fn normalize_text(text: &str, vocab: &Vocabulary) -> (String, usize) {
    let mut out = String::with_capacity(text.len());
    let mut dropped = 0usize;
    let mut chars = text.chars().peekable();
    while let Some(ch) = chars.next() {
        let ch = match ch {
            '\r' => {
                if chars.peek() == Some(&'\n') {
                    continue;
                }
                '\n'
            }
            '\t' => ' ',
            c => c.to_ascii_lowercase(),
        };
        if vocab.char_id(ch).is_some() {
            out.push(ch);
        } else {
            dropped += 1;
        }
    }
    while out.ends_with(['\n', ' ']) {
        out.pop();
    }
    (out, dropped)
}

/// Reads one JSON document per line, applying `normalize_text` and dropping
/// malformed lines, documents that normalize to nothing, and exact
/// duplicates of earlier documents.
pub fn ingest_jsonl(input: &str, vocab: &Vocabulary) -> (Vec<RawRecord>, IngestReport) {
    let mut report = IngestReport::default();
    let mut seen = std::collections::BTreeSet::new();
    let mut records = Vec::new();
    for line in input.lines() {
        if line.trim().is_empty() {
            continue;
        }
        report.lines += 1;
        let parsed: std::result::Result<RawRecord, _> = serde_json::from_str(line);
        let mut rec = match parsed {
            Ok(r) => r,
            Err(_) => {
                report.malformed += 1;
                continue;
            }
        };
        let (text, dropped) = normalize_text(&rec.text, vocab);
        report.dropped_chars += dropped;
        if text.is_empty() {
            report.empty += 1;
            continue;
        }
        if !seen.insert(text.clone()) {
            report.duplicates += 1;
            continue;
        }
        rec.text = text;
        report.kept += 1;
        records.push(rec);
    }
    (records, report)
}

#[derive(Clone, Debug)]
pub struct IndexedDoc {
    pub id: String,
    pub title: Option<String>,
    pub text: String,
    pub tokens: Vec<u32>,
}

/// Longest run shared between a query and the corpus, with its location.
#[derive(Clone, Debug, Serialize, PartialEq)]
pub struct LcsMatch {
    pub len: usize,
    pub doc_index: usize,
    pub doc_id: String,
    pub offset: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct TlcsReport {
    pub per_query: Vec<LcsMatch>,
    pub mean_len: f64,
    pub max_len: usize,
    /// Index into `per_query` of the longest match; meaningless when empty.
    pub max_query: usize,
}

#[derive(Debug)]
pub struct CorpusIndex {
    vocab: Arc<Vocabulary>,
    docs: Vec<IndexedDoc>,
    doc_starts: Vec<usize>,
    automaton: SuffixAutomaton,
}

const INDEX_FORMAT: &str = "covo-corpus v1";

impl CorpusIndex {
    pub fn build(vocab: Arc<Vocabulary>, records: &[RawRecord]) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::Corpus("cannot index an empty corpus".into()));
        }
        let mut docs = Vec::with_capacity(records.len());
        let mut doc_starts = Vec::with_capacity(records.len());
        let mut automaton = SuffixAutomaton::new();
        for (i, rec) in records.iter().enumerate() {
            let tokens = vocab.tokenize(&rec.text)?;
            if tokens.is_empty() {
                return Err(Error::Corpus(format!("document {} is empty", rec.id)));
            }
            if i > 0 {
                // Separator unique to this gap; ids beyond the vocabulary
                // cannot appear in any query.
                automaton.extend(vocab.size() as u32 + (i as u32 - 1));
            }
            doc_starts.push(automaton.appended_len());
            for &t in &tokens {
                automaton.extend(t);
            }
            docs.push(IndexedDoc {
                id: rec.id.clone(),
                title: rec.title.clone(),
                text: rec.text.clone(),
                tokens,
            });
        }
        Ok(CorpusIndex {
            vocab,
            docs,
            doc_starts,
            automaton,
        })
    }

    pub fn vocab(&self) -> &Arc<Vocabulary> {
        &self.vocab
    }

    pub fn docs(&self) -> &[IndexedDoc] {
        &self.docs
    }

    pub fn automaton(&self) -> &SuffixAutomaton {
        &self.automaton
    }

    /// Longest contiguous token run shared by `query` and any document.
    pub fn lcs(&self, query: &[u32]) -> Result<LcsMatch> {
        if let Some(&bad) = query.iter().find(|&&t| t as usize >= self.vocab.size()) {
            return Err(Error::InvalidInput(format!(
                "query symbol {bad} is outside the vocabulary"
            )));
        }
        let (len, end) = self.automaton.longest_common_run(query);
        if len == 0 {
            return Ok(LcsMatch {
                len: 0,
                doc_index: 0,
                doc_id: self.docs[0].id.clone(),
                offset: 0,
            });
        }
        let start = end + 1 - len;
        // Last document starting at or before the match start. Separators
        // are unique per gap, so the whole run lies inside that document.
        let doc_index = self.doc_starts.partition_point(|&s| s <= start) - 1;
        let offset = start - self.doc_starts[doc_index];
        debug_assert!(offset + len <= self.docs[doc_index].tokens.len());
        Ok(LcsMatch {
            len,
            doc_index,
            doc_id: self.docs[doc_index].id.clone(),
            offset,
        })
    }

    pub fn tlcs_report(&self, queries: &[Vec<u32>]) -> Result<TlcsReport> {
        let mut per_query = Vec::with_capacity(queries.len());
        for q in queries {
            per_query.push(self.lcs(q)?);
        }
        let mean_len = if per_query.is_empty() {
            0.0
        } else {
            per_query.iter().map(|m| m.len as f64).sum::<f64>() / per_query.len() as f64
        };
        let (max_query, max_len) = per_query
            .iter()
            .enumerate()
            .max_by_key(|(_, m)| m.len)
            .map(|(i, m)| (i, m.len))
            .unwrap_or((0, 0));
        Ok(TlcsReport {
            per_query,
            mean_len,
            max_len,
            max_query,
        })
    }

    /// Serializes vocabulary and documents; the automaton is rebuilt on load.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        let _ = writeln!(out, "{INDEX_FORMAT}");
        let _ = writeln!(out, "vocab {}", self.vocab.size());
        for tok in self.vocab.tokens() {
            let _ = writeln!(out, "{}", escape_token(tok));
        }
        let _ = writeln!(out, "docs {}", self.docs.len());
        for doc in &self.docs {
            let rec = RawRecord {
                id: doc.id.clone(),
                title: doc.title.clone(),
                text: doc.text.clone(),
            };
            let line = serde_json::to_string(&rec)
                .map_err(|e| Error::Corpus(format!("failed to encode document: {e}")))?;
            let _ = writeln!(out, "{line}");
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let raw = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut lines = raw.lines();
        let header = lines.next().unwrap_or_default();
        if header != INDEX_FORMAT {
            return Err(Error::Corpus(format!(
                "unrecognized index header {header:?}, expected {INDEX_FORMAT:?}"
            )));
        }
        let vocab_line = lines
            .next()
            .ok_or_else(|| Error::Corpus("index file ends before vocab header".into()))?;
        let vocab_size: usize = vocab_line
            .strip_prefix("vocab ")
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::Corpus(format!("bad vocab header {vocab_line:?}")))?;
        let mut tokens = Vec::with_capacity(vocab_size);
        for _ in 0..vocab_size {
            let line = lines
                .next()
                .ok_or_else(|| Error::Corpus("index file ends inside vocabulary".into()))?;
            tokens.push(unescape_token(line)?);
        }
        let vocab = Arc::new(Vocabulary::from_tokens(tokens, 0, 1)?);
        let docs_line = lines
            .next()
            .ok_or_else(|| Error::Corpus("index file ends before docs header".into()))?;
        let doc_count: usize = docs_line
            .strip_prefix("docs ")
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::Corpus(format!("bad docs header {docs_line:?}")))?;
        let mut records = Vec::with_capacity(doc_count);
        for _ in 0..doc_count {
            let line = lines
                .next()
                .ok_or_else(|| Error::Corpus("index file ends inside documents".into()))?;
            let rec: RawRecord = serde_json::from_str(line)
                .map_err(|e| Error::Corpus(format!("bad document line: {e}")))?;
            records.push(rec);
        }
        CorpusIndex::build(vocab, &records)
    }
}
