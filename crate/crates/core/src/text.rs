//! Tokenization, vocabulary, documents, corpus files, bag-of-words features,
//! and the embedding matrix container.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
pub const CLS_ID: u32 = 2;
pub const FIRST_WORD_ID: u32 = 3;
pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";
pub const CLS_TOKEN: &str = "<cls>";

pub const DEFAULT_MAX_SEQ_LEN: usize = 128;

/// Lowercase, split on whitespace, strip leading/trailing ASCII punctuation.
/// Numeric tokens survive verbatim; all-punctuation tokens vanish.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace()
        .filter_map(|raw| {
            let trimmed = raw.trim_matches(|c: char| c.is_ascii_punctuation());
            if trimmed.is_empty() {
                None
            } else {
                Some(trimmed.to_lowercase())
            }
        })
        .collect()
}

/// Token <-> id map. Ids 0..=2 are reserved (PAD, UNK, CLS); real tokens get
/// ids >= 3 by descending frequency with a lexicographic tiebreak, so vocab
/// construction is reproducible.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Vocab {
    id_to_token: Vec<String>,
    #[serde(skip)]
    token_to_id: HashMap<String, u32>,
}

impl Vocab {
    pub fn from_tokens(retained: Vec<String>) -> Self {
        let mut id_to_token =
            vec![PAD_TOKEN.to_string(), UNK_TOKEN.to_string(), CLS_TOKEN.to_string()];
        id_to_token.extend(retained);
        let token_to_id = Self::build_index(&id_to_token);
        Vocab { id_to_token, token_to_id }
    }

    fn build_index(id_to_token: &[String]) -> HashMap<String, u32> {
        id_to_token
            .iter()
            .enumerate()
            .skip(FIRST_WORD_ID as usize)
            .map(|(i, t)| (t.clone(), i as u32))
            .collect()
    }

    /// Rebuild the token index after deserialization.
    pub fn reindex(&mut self) {
        self.token_to_id = Self::build_index(&self.id_to_token);
    }

    pub fn id(&self, token: &str) -> u32 {
        self.token_to_id.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: u32) -> &str {
        self.id_to_token
            .get(id as usize)
            .map(|s| s.as_str())
            .unwrap_or(UNK_TOKEN)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.token_to_id.contains_key(token)
    }

    /// Total id count including the three reserved ids.
    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_token.len() <= FIRST_WORD_ID as usize
    }

    pub fn tokens(&self) -> &[String] {
        &self.id_to_token
    }
}

/// One classified text with optional ground-truth rationale positions
/// (synthetic corpora only). `tokens` is empty until `encode` assigns ids
/// from a vocabulary.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Document {
    pub doc_id: String,
    pub raw_text: String,
    /// 1 = readmitted within the window.
    pub label: u8,
    pub planted_rationale: Option<Vec<usize>>,
    #[serde(skip)]
    pub tokens: Vec<u32>,
}

impl Document {
    pub fn raw(doc_id: impl Into<String>, text: impl Into<String>, label: u8) -> Self {
        Document {
            doc_id: doc_id.into(),
            raw_text: text.into(),
            label,
            planted_rationale: None,
            tokens: Vec::new(),
        }
    }

    /// Patient grouping key: the doc_id prefix before ':' when present,
    /// otherwise the whole doc_id (each synthetic doc is its own patient).
    pub fn patient_key(&self) -> &str {
        self.doc_id.split(':').next().unwrap_or(&self.doc_id)
    }

    /// Assign token ids from `vocab`, truncating to `max_seq_len`. A text
    /// that tokenizes to nothing becomes a single UNK so every encoded
    /// document has at least one token. Planted positions beyond the
    /// truncation point are dropped.
    pub fn encode(&mut self, vocab: &Vocab, max_seq_len: usize) {
        let words = tokenize(&self.raw_text);
        let mut ids: Vec<u32> = words.iter().map(|w| vocab.id(w)).collect();
        if ids.is_empty() {
            ids.push(UNK_ID);
        }
        ids.truncate(max_seq_len);
        let len = ids.len();
        self.tokens = ids;
        if let Some(planted) = &mut self.planted_rationale {
            planted.retain(|&p| p < len);
        }
    }

    /// Token strings aligned with `tokens` (same tokenizer, same truncation).
    pub fn token_strings(&self) -> Vec<String> {
        let mut words = tokenize(&self.raw_text);
        if words.is_empty() {
            words.push(UNK_TOKEN.to_string());
        }
        if !self.tokens.is_empty() {
            words.truncate(self.tokens.len());
        }
        words
    }
}

/// JSONL line schema for corpus files.
#[derive(Debug, Serialize, Deserialize)]
struct CorpusLine {
    doc_id: String,
    text: String,
    label: u8,
    #[serde(skip_serializing_if = "Option::is_none")]
    planted_rationale: Option<Vec<usize>>,
}

pub fn write_corpus(docs: &[Document], path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for doc in docs {
        let line = CorpusLine {
            doc_id: doc.doc_id.clone(),
            text: doc.raw_text.clone(),
            label: doc.label,
            planted_rationale: doc.planted_rationale.clone(),
        };
        serde_json::to_writer(&mut w, &line)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_corpus(path: &Path) -> Result<Vec<Document>> {
    let r = BufReader::new(File::open(path)?);
    let mut docs = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: CorpusLine = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            msg: format!("bad corpus line: {e}"),
        })?;
        if parsed.label > 1 {
            return Err(Error::Parse { line: i + 1, msg: format!("label must be 0/1, got {}", parsed.label) });
        }
        docs.push(Document {
            doc_id: parsed.doc_id,
            raw_text: parsed.text,
            label: parsed.label,
            planted_rationale: parsed.planted_rationale,
            tokens: Vec::new(),
        });
    }
    Ok(docs)
}

/// Count token frequencies over `docs` and retain tokens with count >=
/// min_count. Ties in frequency break lexicographically.
pub fn build_vocab(docs: &[Document], min_count: usize) -> Result<Vocab> {
    if min_count == 0 {
        return Err(Error::contract("min_count must be >= 1"));
    }
    if docs.is_empty() {
        return Err(Error::contract("cannot build a vocabulary from an empty corpus"));
    }
    let mut counts: HashMap<String, usize> = HashMap::new();
    for doc in docs {
        for tok in tokenize(&doc.raw_text) {
            *counts.entry(tok).or_insert(0) += 1;
        }
    }
    let mut retained: Vec<(String, usize)> =
        counts.into_iter().filter(|(_, c)| *c >= min_count).collect();
    retained.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    Ok(Vocab::from_tokens(retained.into_iter().map(|(t, _)| t).collect()))
}

/// Sparse token-count vector over vocabulary ids. UNK/PAD/CLS are excluded
/// so baselines cannot key on out-of-vocabulary mass.
pub type BowVector = BTreeMap<u32, u32>;

pub fn bow_vectorize(doc: &Document, _vocab: &Vocab) -> BowVector {
    let mut counts = BTreeMap::new();
    for &id in &doc.tokens {
        if id >= FIRST_WORD_ID {
            *counts.entry(id).or_insert(0) += 1;
        }
    }
    counts
}

/// |vocab| x dim embedding matrix. The PAD row is all zeros.
#[derive(Debug, Clone)]
pub struct EmbeddingMatrix {
    pub dim: usize,
    pub n_tokens: usize,
    data: Vec<f64>,
}

impl EmbeddingMatrix {
    pub fn zeros(n_tokens: usize, dim: usize) -> Self {
        EmbeddingMatrix { dim, n_tokens, data: vec![0.0; n_tokens * dim] }
    }

    pub fn row(&self, id: u32) -> &[f64] {
        let i = id as usize;
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn row_mut(&mut self, id: u32) -> &mut [f64] {
        let i = id as usize;
        &mut self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Cosine similarity of two rows; 0 when either has zero norm.
    pub fn cosine(&self, a: u32, b: u32) -> f64 {
        let (ra, rb) = (self.row(a), self.row(b));
        let dot: f64 = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
        let na: f64 = ra.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb: f64 = rb.iter().map(|x| x * x).sum::<f64>().sqrt();
        if na == 0.0 || nb == 0.0 {
            0.0
        } else {
            dot / (na * nb)
        }
    }
}

/// Text embedding file: header line `dim=<d>`, then one line per token in
/// vocabulary id order: token followed by d floats, space-separated.
pub fn write_embeddings(emb: &EmbeddingMatrix, vocab: &Vocab, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "dim={}", emb.dim)?;
    for id in 0..emb.n_tokens {
        write!(w, "{}", vocab.token(id as u32))?;
        for v in emb.row(id as u32) {
            write!(w, " {v}")?;
        }
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_embeddings(path: &Path) -> Result<(EmbeddingMatrix, Vec<String>)> {
    let r = BufReader::new(File::open(path)?);
    let mut lines = r.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::Parse { line: 1, msg: "empty embedding file".into() })?;
    let header = header?;
    let dim: usize = header
        .strip_prefix("dim=")
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::Parse { line: 1, msg: format!("expected dim=<d>, got {header:?}") })?;
    let mut tokens = Vec::new();
    let mut data = Vec::new();
    for (i, line) in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        let token = parts
            .next()
            .ok_or_else(|| Error::Parse { line: i + 1, msg: "missing token".into() })?;
        let values: Vec<f64> = parts
            .map(|p| p.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Parse { line: i + 1, msg: format!("bad float: {e}") })?;
        if values.len() != dim {
            return Err(Error::Parse {
                line: i + 1,
                msg: format!("expected {dim} values, got {}", values.len()),
            });
        }
        tokens.push(token.to_string());
        data.extend(values);
    }
    let n_tokens = tokens.len();
    Ok((EmbeddingMatrix { dim, n_tokens, data }, tokens))
}
