//! Text front end: tokenization, frozen word embeddings, object detection
//! and observation assembly.
//!
//! Observations arrive from the engine as three text parts (action feedback,
//! inventory, room description). They are tokenized, joined with separator
//! tokens and scanned for object mentions, producing the [`ObservationDoc`]
//! that the value network consumes as its reading-comprehension context.

use std::collections::HashMap;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::world::ObjId;

/// Reserved vocabulary slots. The tokenizer never emits these from game text.
pub const PAD: u32 = 0;
pub const SEP: u32 = 1;
pub const UNK: u32 = 2;

const RESERVED: [&str; 3] = ["<pad>", "<sep>", "<unk>"];

#[derive(Debug, Error)]
pub enum TextError {
    #[error("embedding line {line}: expected {expected} values, found {found}")]
    DimensionMismatch {
        line: usize,
        expected: usize,
        found: usize,
    },
    #[error("embedding io: {0}")]
    Io(#[from] std::io::Error),
}

/// Interning table mapping token strings to dense indices.
///
/// Indices 0..=2 are reserved for `<pad>`, `<sep>` and `<unk>`.
pub struct Vocab {
    map: HashMap<String, u32>,
    list: Vec<String>,
}

impl Vocab {
    pub fn new() -> Self {
        let mut v = Vocab {
            map: HashMap::new(),
            list: Vec::new(),
        };
        for tok in RESERVED {
            let idx = v.list.len() as u32;
            v.map.insert(tok.to_string(), idx);
            v.list.push(tok.to_string());
        }
        v
    }

    /// Intern a tokenizer output. Literal reserved forms collapse to `UNK`
    /// rather than aliasing the reserved slots.
    pub fn intern(&mut self, token: &str) -> u32 {
        if RESERVED.contains(&token) {
            return UNK;
        }
        if let Some(&idx) = self.map.get(token) {
            return idx;
        }
        let idx = self.list.len() as u32;
        self.map.insert(token.to_string(), idx);
        self.list.push(token.to_string());
        idx
    }

    pub fn token(&self, idx: u32) -> &str {
        &self.list[idx as usize]
    }

    pub fn len(&self) -> usize {
        self.list.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

impl Default for Vocab {
    fn default() -> Self {
        Self::new()
    }
}

/// Split text into lowercase word and punctuation tokens.
///
/// Whitespace separates words; the characters `.,!?;:'"` become standalone
/// tokens. No empty tokens are produced.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut word = String::new();
    for ch in text.chars() {
        if ch.is_whitespace() {
            if !word.is_empty() {
                out.push(std::mem::take(&mut word));
            }
        } else if matches!(ch, '.' | ',' | '!' | '?' | ';' | ':' | '\'' | '"') {
            if !word.is_empty() {
                out.push(std::mem::take(&mut word));
            }
            out.push(ch.to_string());
        } else {
            for lc in ch.to_lowercase() {
                word.push(lc);
            }
        }
    }
    if !word.is_empty() {
        out.push(word);
    }
    out
}

/// Frozen word-embedding table loaded from a GloVe-style text file.
///
/// Lookups are total: out-of-vocabulary tokens map to a pseudo-random vector
/// derived from `(oov_seed, token)`, uniform in [-0.1, 0.1] per component.
pub struct EmbeddingTable {
    dim: usize,
    rows: HashMap<String, Vec<f64>>,
    oov_seed: u64,
}

impl fmt::Debug for EmbeddingTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("EmbeddingTable")
            .field("dim", &self.dim)
            .field("rows", &self.rows.len())
            .field("oov_seed", &self.oov_seed)
            .finish()
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

impl EmbeddingTable {
    /// Build an empty table (every lookup takes the OOV path). Used by tests
    /// and toy configurations.
    pub fn empty(dim: usize, oov_seed: u64) -> Self {
        EmbeddingTable {
            dim,
            rows: HashMap::new(),
            oov_seed,
        }
    }

    /// Load a table from a file of `token v1 ... vd` lines.
    pub fn load(path: &Path, dim: usize, oov_seed: u64) -> Result<Self, TextError> {
        let reader = BufReader::new(File::open(path)?);
        let mut rows = HashMap::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let mut parts = line.split_whitespace();
            let token = parts.next().unwrap().to_string();
            let values: Vec<f64> = parts.filter_map(|p| p.parse().ok()).collect();
            if values.len() != dim {
                return Err(TextError::DimensionMismatch {
                    line: i + 1,
                    expected: dim,
                    found: values.len(),
                });
            }
            rows.insert(token, values);
        }
        Ok(EmbeddingTable {
            dim,
            rows,
            oov_seed,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn contains(&self, token: &str) -> bool {
        self.rows.contains_key(token)
    }

    /// Look up a token vector; OOV tokens get a deterministic seeded vector.
    pub fn lookup(&self, token: &str) -> Vec<f64> {
        if let Some(v) = self.rows.get(token) {
            return v.clone();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.oov_seed ^ fnv1a(token.as_bytes()));
        (0..self.dim).map(|_| rng.gen_range(-0.1..0.1)).collect()
    }
}

/// One detected object mention: token span `[start, end)` with its headword.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ObjectSpan {
    pub object: ObjId,
    pub start: usize,
    pub end: usize,
    pub head: usize,
}

/// Lexicon of lowercased object names used for span detection.
#[derive(Debug, Clone, Default)]
pub struct Lexicon {
    /// name token sequence -> object id, scanned longest-first
    entries: Vec<(Vec<String>, ObjId)>,
}

impl Lexicon {
    pub fn new(names: impl IntoIterator<Item = (String, ObjId)>) -> Self {
        let mut entries: Vec<(Vec<String>, ObjId)> = names
            .into_iter()
            .map(|(name, id)| (tokenize(&name), id))
            .collect();
        // longest first so greedy matching prefers multiword names
        entries.sort_by(|a, b| b.0.len().cmp(&a.0.len()).then(a.1.cmp(&b.1)));
        entries
            .iter()
            .for_each(|(toks, _)| debug_assert!(!toks.is_empty()));
        Lexicon { entries }
    }
}

/// Greedy longest-match object detection over a token sequence.
///
/// The headword of a multiword name is its last token.
pub fn detect_objects(tokens: &[String], lexicon: &Lexicon) -> Vec<ObjectSpan> {
    let mut spans = Vec::new();
    let mut i = 0;
    'outer: while i < tokens.len() {
        for (name, id) in &lexicon.entries {
            let end = i + name.len();
            if end <= tokens.len() && tokens[i..end].iter().zip(name).all(|(a, b)| a == b) {
                spans.push(ObjectSpan {
                    object: *id,
                    start: i,
                    end,
                    head: end - 1,
                });
                i = end;
                continue 'outer;
            }
        }
        i += 1;
    }
    spans
}

/// Tokenized observation with object spans: the RC "paragraph".
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ObservationDoc {
    pub tokens: Vec<u32>,
    pub object_spans: Vec<ObjectSpan>,
    pub sep_positions: Vec<usize>,
    pub time_step: usize,
    /// Index used in place of an object position for `none` arguments.
    pub none_anchor: usize,
    hash: u64,
}

impl std::hash::Hash for ObservationDoc {
    fn hash<H: std::hash::Hasher>(&self, state: &mut H) {
        state.write_u64(self.hash);
    }
}

impl ObservationDoc {
    pub fn new(
        tokens: Vec<u32>,
        object_spans: Vec<ObjectSpan>,
        sep_positions: Vec<usize>,
        time_step: usize,
        none_anchor: usize,
    ) -> Self {
        let mut doc = ObservationDoc {
            tokens,
            object_spans,
            sep_positions,
            time_step,
            none_anchor,
            hash: 0,
        };
        doc.hash = doc.content_hash();
        doc
    }

    fn content_hash(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        let mut mix = |x: u64| {
            h ^= x;
            h = h.wrapping_mul(0x100000001b3);
        };
        for &t in &self.tokens {
            mix(t as u64 + 1);
        }
        mix(0xffff_ffff);
        for s in &self.object_spans {
            mix(s.object.0 as u64 + 1);
            mix(s.head as u64 + 1);
        }
        mix(self.none_anchor as u64);
        h
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Object ids with at least one span, in ascending id order, deduplicated.
    pub fn object_set(&self) -> Vec<ObjId> {
        let mut ids: Vec<ObjId> = self.object_spans.iter().map(|s| s.object).collect();
        ids.sort();
        ids.dedup();
        ids
    }

    pub fn contains_object(&self, id: ObjId) -> bool {
        self.object_spans.iter().any(|s| s.object == id)
    }

    /// Head indices for an object's spans, in span order.
    pub fn head_indices(&self, id: ObjId) -> Vec<usize> {
        self.object_spans
            .iter()
            .filter(|s| s.object == id)
            .map(|s| s.head)
            .collect()
    }
}

/// Join the three observation parts with separators and detect object spans.
///
/// Layout: `feedback ++ SEP ++ inventory ++ SEP ++ look`. The `none` anchor
/// is the first separator.
pub fn assemble_observation(
    location_text: &str,
    inventory_text: &str,
    look_text: &str,
    lexicon: &Lexicon,
    vocab: &mut Vocab,
    time_step: usize,
) -> Arc<ObservationDoc> {
    let mut words = tokenize(location_text);
    let mut sep_positions = Vec::new();
    let sep_marker = "<sep>".to_string();
    for part in [inventory_text, look_text] {
        sep_positions.push(words.len());
        words.push(sep_marker.clone());
        words.extend(tokenize(part));
    }
    let spans = detect_objects(&words, lexicon);
    let tokens = words
        .iter()
        .enumerate()
        .map(|(i, w)| {
            if sep_positions.contains(&i) {
                SEP
            } else {
                vocab.intern(w)
            }
        })
        .collect();
    let anchor = sep_positions[0];
    Arc::new(ObservationDoc::new(
        tokens,
        spans,
        sep_positions,
        time_step,
        anchor,
    ))
}
