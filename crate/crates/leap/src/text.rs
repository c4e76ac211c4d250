//! Tokenization, vocabularies, CSV corpora, and pretrained embeddings.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use leap_core::data::{Document, UNK_ID};
use leap_core::model::INIT_RANGE;
use leap_core::tape::PAD_ID;
use leap_core::Tensor;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{LeapError, Result};

pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";
pub const DEFAULT_MIN_FREQ: usize = 2;

/// Lowercases, splits on whitespace, and splits every character that is
/// neither alphanumeric nor whitespace off as a token of its own.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut word = String::new();
    for ch in text.to_lowercase().chars() {
        if ch.is_whitespace() {
            flush(&mut word, &mut tokens);
        } else if ch.is_alphanumeric() {
            word.push(ch);
        } else {
            flush(&mut word, &mut tokens);
            tokens.push(ch.to_string());
        }
    }
    flush(&mut word, &mut tokens);
    tokens
}

fn flush(word: &mut String, tokens: &mut Vec<String>) {
    if !word.is_empty() {
        tokens.push(std::mem::take(word));
    }
}

/// Token/id bijection with PAD at 0 and UNK at 1.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: HashMap<String, u32>,
}

impl Vocabulary {
    /// Builds a vocabulary from its id-ordered token list, which must start
    /// with the two reserved entries.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < 2 || tokens[0] != PAD_TOKEN || tokens[1] != UNK_TOKEN {
            return Err(LeapError::Invalid(
                "vocabulary must start with <pad> and <unk>".into(),
            ));
        }
        let mut ids = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if ids.insert(t.clone(), i as u32).is_some() {
                return Err(LeapError::Invalid(format!("duplicate vocabulary token {t:?}")));
            }
        }
        Ok(Vocabulary { tokens, ids })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, token: &str) -> u32 {
        self.ids.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.ids.contains_key(token)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn encode(&self, tokens: &[String]) -> Vec<u32> {
        tokens.iter().map(|t| self.id(t)).collect()
    }

    /// Maps ids back to tokens; unknown ids decode as UNK.
    pub fn decode(&self, ids: &[u32]) -> Vec<&str> {
        ids.iter().map(|&i| self.token(i).unwrap_or(UNK_TOKEN)).collect()
    }

    pub fn encode_document(&self, doc: &RawDocument) -> Document {
        Document::new(self.encode(&doc.tokens), doc.label)
    }
}

impl TryFrom<Vec<String>> for Vocabulary {
    type Error = LeapError;

    fn try_from(tokens: Vec<String>) -> Result<Self> {
        Vocabulary::from_tokens(tokens)
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.tokens
    }
}

/// Ids start at 2 in descending frequency; ties keep first-occurrence
/// order. Tokens seen fewer than `min_freq` times map to UNK.
pub fn build_vocab<'a, I>(docs: I, min_freq: usize) -> Result<Vocabulary>
where
    I: IntoIterator<Item = &'a [String]>,
{
    if min_freq == 0 {
        return Err(LeapError::config("min_freq", "must be at least 1"));
    }
    let mut counts: HashMap<&str, (usize, usize)> = HashMap::new();
    let mut seen = 0;
    for doc in docs {
        for tok in doc {
            let next = counts.len();
            counts.entry(tok.as_str()).or_insert((0, next)).0 += 1;
        }
        seen += 1;
    }
    if seen == 0 {
        return Err(LeapError::Invalid("cannot build a vocabulary from an empty corpus".into()));
    }
    let mut kept: Vec<(&str, usize, usize)> = counts
        .into_iter()
        .filter(|&(_, (n, _))| n >= min_freq)
        .map(|(t, (n, first))| (t, n, first))
        .collect();
    kept.sort_by(|a, b| b.1.cmp(&a.1).then(a.2.cmp(&b.2)));
    let mut tokens = vec![PAD_TOKEN.to_string(), UNK_TOKEN.to_string()];
    tokens.extend(
        kept.into_iter()
            .filter(|(t, _, _)| *t != PAD_TOKEN && *t != UNK_TOKEN)
            .map(|(t, _, _)| t.to_string()),
    );
    Vocabulary::from_tokens(tokens)
}

/// A labeled document before vocabulary lookup.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawDocument {
    pub tokens: Vec<String>,
    pub label: usize,
}

/// Reads a header-less CSV file whose rows are a 1-based class followed by
/// one or more text fields. Rows are numbered from 1 in errors.
pub fn load_corpus(path: &Path, classes: usize) -> Result<Vec<RawDocument>> {
    let file = File::open(path).map_err(|e| LeapError::io(path, e))?;
    read_corpus(file, path, classes)
}

pub fn read_corpus<R: std::io::Read>(reader: R, path: &Path, classes: usize) -> Result<Vec<RawDocument>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(reader);
    let bad = |row: usize, message: String| LeapError::Corpus {
        path: path.to_path_buf(),
        row,
        message,
    };
    let mut docs = Vec::new();
    for (i, record) in rdr.records().enumerate() {
        let row = i + 1;
        let record = record.map_err(|e| bad(row, e.to_string()))?;
        if record.len() < 2 {
            return Err(bad(row, format!("expected a class and text, found {} field(s)", record.len())));
        }
        let class: usize = record[0]
            .trim()
            .parse()
            .map_err(|_| bad(row, format!("class {:?} is not a positive integer", &record[0])))?;
        if class == 0 || class > classes {
            return Err(bad(row, format!("class {class} outside 1..={classes}")));
        }
        let text = record.iter().skip(1).collect::<Vec<_>>().join(" ");
        let tokens = tokenize(&text);
        if tokens.is_empty() {
            return Err(bad(row, "text has no tokens".into()));
        }
        docs.push(RawDocument {
            tokens,
            label: class - 1,
        });
    }
    Ok(docs)
}

/// Builds a `[V×dim]` embedding table. Rows for tokens found in the file
/// take the file's values; the rest are uniform in ±`INIT_RANGE`; PAD is
/// zero. Tokens in the file but not in the vocabulary are ignored.
pub fn load_embeddings<R: Rng + ?Sized>(
    path: &Path,
    vocab: &Vocabulary,
    dim: usize,
    rng: &mut R,
) -> Result<Tensor> {
    let file = File::open(path).map_err(|e| LeapError::io(path, e))?;
    read_embeddings(BufReader::new(file), path, vocab, dim, rng)
}

pub fn read_embeddings<B: BufRead, R: Rng + ?Sized>(
    reader: B,
    path: &Path,
    vocab: &Vocabulary,
    dim: usize,
    rng: &mut R,
) -> Result<Tensor> {
    let mut table = random_embeddings(vocab.len(), dim, rng);
    for line in reader.lines() {
        let line = line.map_err(|e| LeapError::io(path, e))?;
        let mut fields = line.split_whitespace();
        let Some(token) = fields.next() else { continue };
        let values: Vec<&str> = fields.collect();
        if values.len() != dim {
            return Err(LeapError::EmbeddingDim {
                path: path.to_path_buf(),
                token: token.to_string(),
                found: values.len(),
                expected: dim,
            });
        }
        let Some(&id) = vocab.ids.get(token) else { continue };
        if id == PAD_ID {
            continue;
        }
        let row = table.row_mut(id as usize);
        for (slot, v) in row.iter_mut().zip(values) {
            *slot = v.parse().map_err(|_| {
                LeapError::Invalid(format!(
                    "{}: token {token:?} has a non-numeric value {v:?}",
                    path.display()
                ))
            })?;
        }
    }
    Ok(table)
}

/// Uniform ±`INIT_RANGE` table with a zero PAD row.
pub fn random_embeddings<R: Rng + ?Sized>(vocab: usize, dim: usize, rng: &mut R) -> Tensor {
    let mut table = Tensor::zeros(&[vocab, dim]);
    for id in 1..vocab {
        for v in table.row_mut(id) {
            *v = rng.gen_range(-INIT_RANGE..=INIT_RANGE);
        }
    }
    table
}
