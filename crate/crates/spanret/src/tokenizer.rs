//! Word-level tokenization, normalization, stop-word classification and the
//! vocabulary shared by mining, indexing and encoding.
//!
//! Normalization per whitespace-separated chunk: Unicode NFC, lowercase, then
//! strip non-alphanumeric characters from both edges (internal hyphens and
//! apostrophes survive). Chunks reduced to nothing are dropped. The pipeline
//! is a fixpoint: tokenizing the space-joined output of `tokenize` yields the
//! same tokens.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::borrow::Cow;
use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::{BufRead, Write};
use std::path::Path;
use unicode_normalization::UnicodeNormalization;

/// Reserved surfaces. Normalization strips edge punctuation, so no input text
/// can ever produce these; they are safe in-band markers.
pub const PAD: &str = "<pad>";
pub const CLS: &str = "<cls>";
pub const SEP: &str = "<sep>";
pub const UNK: &str = "<unk>";
pub const MASK: &str = "<mask>";
pub const RESERVED: [&str; 5] = [PAD, CLS, SEP, UNK, MASK];

pub const PAD_ID: u32 = 0;
pub const CLS_ID: u32 = 1;
pub const SEP_ID: u32 = 2;
pub const UNK_ID: u32 = 3;
pub const MASK_ID: u32 = 4;

/// A normalized word with its stop-word classification.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Token {
    pub surface: String,
    pub is_stopword: bool,
}

impl Token {
    pub fn sep() -> Token {
        Token {
            surface: SEP.to_string(),
            is_stopword: false,
        }
    }

    pub fn mask() -> Token {
        Token {
            surface: MASK.to_string(),
            is_stopword: false,
        }
    }
}

/// The standard English stop-word list (the classic 179-entry list used by
/// NLTK). Entries are already in normalized form.
pub const ENGLISH_STOPWORDS: &[&str] = &[
    "i", "me", "my", "myself", "we", "our", "ours", "ourselves", "you", "you're", "you've",
    "you'll", "you'd", "your", "yours", "yourself", "yourselves", "he", "him", "his", "himself",
    "she", "she's", "her", "hers", "herself", "it", "it's", "its", "itself", "they", "them",
    "their", "theirs", "themselves", "what", "which", "who", "whom", "this", "that", "that'll",
    "these", "those", "am", "is", "are", "was", "were", "be", "been", "being", "have", "has",
    "had", "having", "do", "does", "did", "doing", "a", "an", "the", "and", "but", "if", "or",
    "because", "as", "until", "while", "of", "at", "by", "for", "with", "about", "against",
    "between", "into", "through", "during", "before", "after", "above", "below", "to", "from",
    "up", "down", "in", "out", "on", "off", "over", "under", "again", "further", "then", "once",
    "here", "there", "when", "where", "why", "how", "all", "any", "both", "each", "few", "more",
    "most", "other", "some", "such", "no", "nor", "not", "only", "own", "same", "so", "than",
    "too", "very", "s", "t", "can", "will", "just", "don", "don't", "should", "should've", "now",
    "d", "ll", "m", "o", "re", "ve", "y", "ain", "aren", "aren't", "couldn", "couldn't", "didn",
    "didn't", "doesn", "doesn't", "hadn", "hadn't", "hasn", "hasn't", "haven", "haven't", "isn",
    "isn't", "ma", "mightn", "mightn't", "mustn", "mustn't", "needn", "needn't", "shan", "shan't",
    "shouldn", "shouldn't", "wasn", "wasn't", "weren", "weren't", "won", "won't", "wouldn",
    "wouldn't",
];

#[derive(Debug, Clone)]
pub struct Tokenizer {
    stopwords: HashSet<String>,
}

impl Default for Tokenizer {
    fn default() -> Self {
        Tokenizer::new()
    }
}

impl Tokenizer {
    /// Tokenizer with the embedded English stop-word list.
    pub fn new() -> Self {
        Tokenizer {
            stopwords: ENGLISH_STOPWORDS.iter().map(|s| s.to_string()).collect(),
        }
    }

    /// Tokenizer with a caller-supplied stop-word list. Entries are
    /// normalized the same way tokens are.
    pub fn with_stopwords<I: IntoIterator<Item = String>>(words: I) -> Self {
        let stopwords = words
            .into_iter()
            .filter_map(|w| normalize_chunk(&w))
            .collect();
        Tokenizer { stopwords }
    }

    /// Load a stop-word list: one word per line, `#` comments allowed.
    pub fn from_stopword_file(path: &Path) -> Result<Self> {
        let reader = crate::artifact::open_reader(path)?;
        let mut words = Vec::new();
        for line in reader.lines() {
            let line = line.map_err(|e| Error::io(path.display().to_string(), e))?;
            let trimmed = line.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            words.push(trimmed.to_string());
        }
        Ok(Tokenizer::with_stopwords(words))
    }

    pub fn is_stopword(&self, surface: &str) -> bool {
        self.stopwords.contains(surface)
    }

    /// Classify an already-normalized surface.
    pub fn classify(&self, surface: String) -> Token {
        let is_stopword = self.is_stopword(&surface);
        Token {
            surface,
            is_stopword,
        }
    }

    pub fn tokenize(&self, text: &str) -> Vec<Token> {
        text.split_whitespace()
            .filter_map(normalize_chunk)
            .map(|surface| self.classify(surface))
            .collect()
    }

    /// Tokenize possibly-invalid UTF-8, replacing bad bytes. Returns the
    /// tokens and the number of replacement characters inserted.
    pub fn tokenize_lossy(&self, bytes: &[u8]) -> (Vec<Token>, usize) {
        let text: Cow<str> = String::from_utf8_lossy(bytes);
        let replaced = text.matches('\u{FFFD}').count();
        (self.tokenize(&text), replaced)
    }
}

/// NFC, lowercase, strip non-alphanumeric edges. Returns None for chunks
/// that normalize to nothing.
fn normalize_chunk(chunk: &str) -> Option<String> {
    let composed: String = chunk.nfc().collect();
    let lowered = composed.to_lowercase();
    let stripped = lowered.trim_matches(|c: char| !c.is_alphanumeric());
    if stripped.is_empty() {
        None
    } else {
        Some(stripped.to_string())
    }
}

/// Dense surface-to-id map with fixed reserved entries.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    surfaces: Vec<String>,
    ids: HashMap<String, u32>,
}

impl Vocabulary {
    /// Build from token frequency counts: every surface with count >=
    /// `min_count` gets an id, ordered by descending count then surface.
    pub fn from_counts(counts: &BTreeMap<String, u64>, min_count: u64) -> Vocabulary {
        let mut surfaces: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        let mut entries: Vec<(&String, &u64)> = counts
            .iter()
            .filter(|(surface, count)| {
                **count >= min_count && !RESERVED.contains(&surface.as_str())
            })
            .collect();
        entries.sort_by(|a, b| b.1.cmp(a.1).then_with(|| a.0.cmp(b.0)));
        surfaces.extend(entries.into_iter().map(|(s, _)| s.clone()));
        let ids = surfaces
            .iter()
            .enumerate()
            .map(|(i, s)| (s.clone(), i as u32))
            .collect();
        Vocabulary { surfaces, ids }
    }

    pub fn len(&self) -> usize {
        self.surfaces.len()
    }

    pub fn is_empty(&self) -> bool {
        false // reserved entries are always present
    }

    pub fn id_of(&self, surface: &str) -> Option<u32> {
        self.ids.get(surface).copied()
    }

    pub fn id_or_unk(&self, surface: &str) -> u32 {
        self.id_of(surface).unwrap_or(UNK_ID)
    }

    pub fn surface(&self, id: u32) -> Option<&str> {
        self.surfaces.get(id as usize).map(|s| s.as_str())
    }

    /// Map token surfaces to ids, substituting `<unk>` for out-of-vocabulary
    /// surfaces. Returns the ids and the substitution count.
    pub fn encode(&self, tokens: &[Token]) -> (Vec<u32>, usize) {
        let mut unk = 0;
        let ids = tokens
            .iter()
            .map(|t| {
                let id = self.id_or_unk(&t.surface);
                if id == UNK_ID && t.surface != UNK {
                    unk += 1;
                }
                id
            })
            .collect();
        (ids, unk)
    }

    /// One `token<TAB>id` line per entry, preceded by a header row naming
    /// the reserved ids.
    pub fn save<W: Write>(&self, w: &mut W) -> Result<()> {
        let reserved: Vec<String> = RESERVED
            .iter()
            .enumerate()
            .map(|(i, s)| format!("{s}:{i}"))
            .collect();
        writeln!(w, "#spanret-vocab\tv1\treserved={}", reserved.join(","))
            .map_err(|e| Error::io("<vocab>", e))?;
        for (id, surface) in self.surfaces.iter().enumerate() {
            writeln!(w, "{surface}\t{id}").map_err(|e| Error::io("<vocab>", e))?;
        }
        Ok(())
    }

    pub fn load<R: BufRead>(r: R) -> Result<Vocabulary> {
        let mut lines = r.lines().enumerate();
        let (_, first) = lines.next().ok_or(Error::BadArtifact {
            expected: "vocabulary".to_string(),
            msg: "empty file".to_string(),
        })?;
        let first = first.map_err(|e| Error::io("<vocab>", e))?;
        if !first.starts_with("#spanret-vocab\tv1") {
            return Err(Error::BadArtifact {
                expected: "vocabulary".to_string(),
                msg: "missing #spanret-vocab v1 header row".to_string(),
            });
        }
        let mut surfaces = Vec::new();
        for (line_no, line) in lines {
            let line = line.map_err(|e| Error::io("<vocab>", e))?;
            if line.is_empty() {
                continue;
            }
            let (surface, id) = line.split_once('\t').ok_or(Error::MalformedRecord {
                line: line_no + 1,
                msg: "expected token<TAB>id".to_string(),
            })?;
            let id: usize = id.parse().map_err(|_| Error::MalformedRecord {
                line: line_no + 1,
                msg: format!("bad id {id:?}"),
            })?;
            if id != surfaces.len() {
                return Err(Error::MalformedRecord {
                    line: line_no + 1,
                    msg: format!("non-dense id {id} at position {}", surfaces.len()),
                });
            }
            surfaces.push(surface.to_string());
        }
        for (i, reserved) in RESERVED.iter().enumerate() {
            if surfaces.get(i).map(|s| s.as_str()) != Some(*reserved) {
                return Err(Error::BadArtifact {
                    expected: "vocabulary".to_string(),
                    msg: format!("reserved id {i} is not {reserved}"),
                });
            }
        }
        let ids = surfaces
            .iter()
            .enumerate()
            .map(|(i, s)| (s.clone(), i as u32))
            .collect();
        Ok(Vocabulary { surfaces, ids })
    }
}
