//! Row encoding: text tokens, SMR numbers and missing values become the
//! paired `[B, C, L_in, D]` name and value tensors.

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::nn::Linear;
use crate::autodiff::{AutodiffError, Float, KeyMask, ParamId, ParamStore, Tape, Tensor, Var};
use crate::smr::{SmrConfig, SmrError};

/// Token id reserved for empty or unknown text.
pub const RESERVED_TOKEN: u32 = 0;

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("column name must be non-empty")]
    EmptyColumnName,
    #[error("duplicate column {0:?} in row")]
    DuplicateColumn(String),
    #[error("row {row} has columns {got:?}, batch expects {expected:?}")]
    InconsistentColumns { row: usize, expected: Vec<String>, got: Vec<String> },
    #[error("cannot encode an empty batch")]
    EmptyBatch,
    #[error("cannot encode a row with no columns")]
    NoColumns,
    #[error("vocabulary needs at least 2 buckets, got {0}")]
    VocabTooSmall(usize),
    #[error("embedding table {path}: {msg}")]
    Table { path: PathBuf, msg: String },
    #[error(transparent)]
    Smr(#[from] SmrError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = EncoderError> = std::result::Result<T, E>;

/// One table entry.
#[derive(Debug, Clone, PartialEq)]
pub enum CellValue {
    Number(f64),
    Text(String),
    Missing,
}

/// An unordered set of `(column name, value)` pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct Row {
    pairs: Vec<(String, CellValue)>,
}

impl Row {
    pub fn new(pairs: Vec<(String, CellValue)>) -> Result<Self> {
        let mut seen = HashSet::new();
        for (name, _) in &pairs {
            if name.is_empty() {
                return Err(EncoderError::EmptyColumnName);
            }
            if !seen.insert(name.as_str()) {
                return Err(EncoderError::DuplicateColumn(name.clone()));
            }
        }
        Ok(Row { pairs })
    }

    pub fn pairs(&self) -> &[(String, CellValue)] {
        &self.pairs
    }

    pub fn get(&self, column: &str) -> Option<&CellValue> {
        self.pairs.iter().find(|(n, _)| n == column).map(|(_, v)| v)
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// Where token embeddings come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum TextBackend {
    /// Trainable table indexed by hashed unigrams.
    Hashed { vocab_buckets: usize, embed_dim: usize },
    /// Frozen table read from disk.
    TableFile { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TextEncoderSpec {
    pub backend: TextBackend,
    #[serde(default = "default_lowercase")]
    pub lowercase: bool,
}

fn default_lowercase() -> bool {
    true
}

impl Default for TextEncoderSpec {
    fn default() -> Self {
        TextEncoderSpec { backend: TextBackend::Hashed { vocab_buckets: 4096, embed_dim: 128 }, lowercase: true }
    }
}

/// Splits text into tokens and hashes them into `[1, vocab)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Tokenizer {
    pub vocab: usize,
    pub lowercase: bool,
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

impl Tokenizer {
    pub fn new(vocab: usize, lowercase: bool) -> Result<Self> {
        if vocab < 2 {
            return Err(EncoderError::VocabTooSmall(vocab));
        }
        Ok(Tokenizer { vocab, lowercase })
    }

    /// Alphanumeric runs are words; every other non-space character is its own token.
    pub fn words(&self, text: &str) -> Vec<String> {
        let text = if self.lowercase { text.to_lowercase() } else { text.to_string() };
        let mut words = Vec::new();
        let mut current = String::new();
        for c in text.chars() {
            if c.is_alphanumeric() {
                current.push(c);
                continue;
            }
            if !current.is_empty() {
                words.push(std::mem::take(&mut current));
            }
            if !c.is_whitespace() {
                words.push(c.to_string());
            }
        }
        if !current.is_empty() {
            words.push(current);
        }
        words
    }

    pub fn token_id(&self, word: &str) -> u32 {
        1 + (fnv1a(word.as_bytes()) % (self.vocab as u64 - 1)) as u32
    }

    pub fn tokenize(&self, text: &str) -> Vec<u32> {
        let ids: Vec<u32> = self.words(text).iter().map(|w| self.token_id(w)).collect();
        if ids.is_empty() {
            vec![RESERVED_TOKEN]
        } else {
            ids
        }
    }
}

/// Tokenizes with the vocabulary implied by `spec`.
pub fn tokenize(text: &str, spec: &TextEncoderSpec) -> Result<Vec<u32>> {
    let vocab = match &spec.backend {
        TextBackend::Hashed { vocab_buckets, .. } => *vocab_buckets,
        TextBackend::TableFile { path } => EmbeddingTable::read_header(path)?.0,
    };
    Ok(Tokenizer::new(vocab, spec.lowercase)?.tokenize(text))
}

/// A precomputed `[vocab, dim]` token-embedding table.
///
/// File layout: one JSON line `{"vocab_size": V, "dim": D}` followed by
/// `V * D` little-endian `f32` values, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    pub vocab_size: usize,
    pub dim: usize,
    pub data: Vec<f32>,
}

#[derive(Serialize, Deserialize)]
struct TableHeader {
    vocab_size: usize,
    dim: usize,
}

impl EmbeddingTable {
    fn read_header(path: &Path) -> Result<(usize, usize)> {
        let mut reader = BufReader::new(File::open(path)?);
        let mut line = String::new();
        reader.read_line(&mut line)?;
        let h: TableHeader = serde_json::from_str(line.trim())
            .map_err(|e| EncoderError::Table { path: path.to_path_buf(), msg: e.to_string() })?;
        Ok((h.vocab_size, h.dim))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let mut reader = BufReader::new(File::open(path)?);
        let mut line = String::new();
        reader.read_line(&mut line)?;
        let bad = |msg: String| EncoderError::Table { path: path.to_path_buf(), msg };
        let h: TableHeader = serde_json::from_str(line.trim()).map_err(|e| bad(e.to_string()))?;
        if h.vocab_size < 2 || h.dim == 0 {
            return Err(bad(format!("invalid header vocab_size={} dim={}", h.vocab_size, h.dim)));
        }
        let mut bytes = Vec::new();
        reader.read_to_end(&mut bytes)?;
        if bytes.len() != h.vocab_size * h.dim * 4 {
            return Err(bad(format!("expected {} bytes of floats, found {}", h.vocab_size * h.dim * 4, bytes.len())));
        }
        let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        Ok(EmbeddingTable { vocab_size: h.vocab_size, dim: h.dim, data })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        let header = serde_json::to_string(&TableHeader { vocab_size: self.vocab_size, dim: self.dim }).expect("header serializes");
        writeln!(w, "{header}")?;
        for v in &self.data {
            w.write_all(&v.to_le_bytes())?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Tokenized form of one entry value.
#[derive(Debug, Clone, PartialEq)]
pub enum EntryTokens {
    Text(Vec<u32>),
    /// SMR bits of the number as `0`/`1`.
    Number(Vec<u8>),
    Missing,
}

impl EntryTokens {
    pub fn len(&self) -> usize {
        match self {
            EntryTokens::Text(t) => t.len(),
            EntryTokens::Number(_) | EntryTokens::Missing => 1,
        }
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TokenizedColumn {
    pub name: String,
    pub name_tokens: Vec<u32>,
    pub value: EntryTokens,
}

/// A row after tokenization; independent of model parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenizedRow {
    pub columns: Vec<TokenizedColumn>,
    /// Number of numeric cells whose magnitude saturated the SMR range.
    pub saturated: usize,
}

/// Tokenizes rows once so batches can be assembled cheaply.
#[derive(Debug, Clone)]
pub struct RowTokenizer {
    pub tokenizer: Tokenizer,
    pub smr: SmrConfig,
}

impl RowTokenizer {
    pub fn tokenize_row(&self, row: &Row) -> Result<TokenizedRow> {
        if row.is_empty() {
            return Err(EncoderError::NoColumns);
        }
        let mut saturated = 0;
        let mut columns = Vec::with_capacity(row.len());
        for (name, value) in row.pairs() {
            let value = match value {
                CellValue::Number(v) => {
                    let (bits, sat) = self.smr.encode_saturating(*v)?;
                    saturated += usize::from(sat);
                    EntryTokens::Number(bits.bits().to_vec())
                }
                CellValue::Text(s) => EntryTokens::Text(self.tokenizer.tokenize(s)),
                CellValue::Missing => EntryTokens::Missing,
            };
            columns.push(TokenizedColumn { name: name.clone(), name_tokens: self.tokenizer.tokenize(name), value });
        }
        Ok(TokenizedRow { columns, saturated })
    }
}

/// Where one `[B, C, L_in]` position takes its embedding from.
#[derive(Debug, Clone, Copy, PartialEq)]
enum Slot {
    Pad,
    Token(usize),
    Number(usize),
    Missing,
}

/// A batch laid out on the `[B, C, L_in]` grid, before embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenizedBatch {
    pub batch: usize,
    pub columns: Vec<String>,
    pub len: usize,
    tokens: Vec<u32>,
    numbers: Vec<Vec<u8>>,
    name_slots: Vec<Slot>,
    value_slots: Vec<Slot>,
}

impl TokenizedBatch {
    /// Assembles rows sharing one column set. The first row's pair order
    /// fixes the column axis.
    pub fn new(rows: &[&TokenizedRow]) -> Result<Self> {
        let first = rows.first().ok_or(EncoderError::EmptyBatch)?;
        let columns: Vec<String> = first.columns.iter().map(|c| c.name.clone()).collect();
        let position: HashMap<&str, usize> = columns.iter().enumerate().map(|(i, c)| (c.as_str(), i)).collect();
        let c = columns.len();
        let mut ordered: Vec<Vec<&TokenizedColumn>> = Vec::with_capacity(rows.len());
        for (r, row) in rows.iter().enumerate() {
            let mismatch = || EncoderError::InconsistentColumns {
                row: r,
                expected: columns.clone(),
                got: row.columns.iter().map(|c| c.name.clone()).collect(),
            };
            if row.columns.len() != c {
                return Err(mismatch());
            }
            let mut slots: Vec<Option<&TokenizedColumn>> = vec![None; c];
            for col in &row.columns {
                let &i = position.get(col.name.as_str()).ok_or_else(mismatch)?;
                slots[i] = Some(col);
            }
            ordered.push(slots.into_iter().map(|s| s.expect("column sets match")).collect());
        }
        let len = ordered
            .iter()
            .flat_map(|cols| cols.iter().map(|col| col.name_tokens.len().max(col.value.len())))
            .max()
            .unwrap_or(1);
        let cells = rows.len() * c * len;
        let mut batch = TokenizedBatch {
            batch: rows.len(),
            columns,
            len,
            tokens: Vec::new(),
            numbers: Vec::new(),
            name_slots: vec![Slot::Pad; cells],
            value_slots: vec![Slot::Pad; cells],
        };
        for (b, cols) in ordered.iter().enumerate() {
            for (j, col) in cols.iter().enumerate() {
                let base = (b * c + j) * len;
                for (k, &t) in col.name_tokens.iter().enumerate() {
                    batch.name_slots[base + k] = Slot::Token(batch.tokens.len());
                    batch.tokens.push(t);
                }
                match &col.value {
                    EntryTokens::Text(ts) => {
                        for (k, &t) in ts.iter().enumerate() {
                            batch.value_slots[base + k] = Slot::Token(batch.tokens.len());
                            batch.tokens.push(t);
                        }
                    }
                    EntryTokens::Number(bits) => {
                        batch.value_slots[base] = Slot::Number(batch.numbers.len());
                        batch.numbers.push(bits.clone());
                    }
                    EntryTokens::Missing => batch.value_slots[base] = Slot::Missing,
                }
            }
        }
        Ok(batch)
    }

    pub fn num_columns(&self) -> usize {
        self.columns.len()
    }

    fn mask(&self, slots: &[Slot]) -> KeyMask {
        KeyMask { keep: slots.iter().map(|s| *s != Slot::Pad).collect(), len: self.len }
    }

    pub fn name_mask(&self) -> KeyMask {
        self.mask(&self.name_slots)
    }

    pub fn value_mask(&self) -> KeyMask {
        self.mask(&self.value_slots)
    }
}

/// Embedded name and value tensors plus their key masks.
#[derive(Debug, Clone)]
pub struct EncodedRowBatch {
    pub names: Var,
    pub values: Var,
    pub name_mask: KeyMask,
    pub value_mask: KeyMask,
    /// Column order along the `C` axis.
    pub columns: Vec<String>,
    pub batch: usize,
    pub len: usize,
}

impl EncodedRowBatch {
    pub fn shape(&self, dim: usize) -> [usize; 4] {
        [self.batch, self.columns.len(), self.len, dim]
    }
}

/// Learned projections that place text and numbers in one `D`-dimensional space.
#[derive(Debug, Clone)]
pub struct RowEncoder {
    pub dim: usize,
    pub smr: SmrConfig,
    pub tokenizer: Tokenizer,
    pub token_table: ParamId,
    pub text_proj: Linear,
    pub number_proj: Linear,
    pub missing: ParamId,
}

impl RowEncoder {
    pub fn new<T: Float, R: Rng>(
        store: &mut ParamStore<T>,
        spec: &TextEncoderSpec,
        dim: usize,
        smr: SmrConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let (tokenizer, token_table, text_dim) = match &spec.backend {
            TextBackend::Hashed { vocab_buckets, embed_dim } => {
                let tokenizer = Tokenizer::new(*vocab_buckets, spec.lowercase)?;
                let id = store.insert_normal("encoder.token_table", &[*vocab_buckets, *embed_dim], 1.0, rng)?;
                (tokenizer, id, *embed_dim)
            }
            TextBackend::TableFile { path } => {
                let table = EmbeddingTable::read(path)?;
                let tokenizer = Tokenizer::new(table.vocab_size, spec.lowercase)?;
                let data = table.data.iter().map(|&v| T::from_f64_lossy(v as f64)).collect();
                let id = store.insert("encoder.token_table", Tensor::new(vec![table.vocab_size, table.dim], data)?)?;
                store.freeze(id);
                (tokenizer, id, table.dim)
            }
        };
        Ok(RowEncoder {
            dim,
            smr,
            tokenizer,
            token_table,
            text_proj: Linear::new(store, "encoder.text_proj", text_dim, dim, true, rng)?,
            number_proj: Linear::new(store, "encoder.number_proj", smr.width(), dim, true, rng)?,
            missing: store.insert_normal("encoder.missing", &[1, dim], 1.0 / (dim as f64).sqrt(), rng)?,
        })
    }

    pub fn num_params(spec_vocab: usize, text_dim: usize, dim: usize, smr: SmrConfig) -> usize {
        spec_vocab * text_dim + Linear::num_params(text_dim, dim, true) + Linear::num_params(smr.width(), dim, true) + dim
    }

    pub fn row_tokenizer(&self) -> RowTokenizer {
        RowTokenizer { tokenizer: self.tokenizer, smr: self.smr }
    }

    /// Embeds a tokenized batch on `tape`.
    pub fn embed<T: Float>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, batch: &TokenizedBatch) -> Result<EncodedRowBatch> {
        let mut sources = Vec::new();
        let mut offset = 0;
        let token_offset = offset;
        if !batch.tokens.is_empty() {
            let table = tape.param(store, self.token_table);
            let index: Vec<Option<usize>> = batch.tokens.iter().map(|&t| Some(t as usize)).collect();
            let emb = tape.gather_rows(table, &index)?;
            sources.push(self.text_proj.forward(tape, store, emb)?);
            offset += batch.tokens.len();
        }
        let number_offset = offset;
        if !batch.numbers.is_empty() {
            let w = self.smr.width();
            let mut bits = Vec::with_capacity(batch.numbers.len() * w);
            for n in &batch.numbers {
                bits.extend(n.iter().map(|&b| if b == 1 { T::one() } else { T::zero() }));
            }
            let x = tape.constant(Tensor::new(vec![batch.numbers.len(), w], bits)?);
            sources.push(self.number_proj.forward(tape, store, x)?);
            offset += batch.numbers.len();
        }
        let missing_offset = offset;
        sources.push(tape.param(store, self.missing));
        let all = if sources.len() == 1 { sources[0] } else { tape.concat(&sources, 0)? };
        let resolve = |s: &Slot| match *s {
            Slot::Pad => None,
            Slot::Token(i) => Some(token_offset + i),
            Slot::Number(i) => Some(number_offset + i),
            Slot::Missing => Some(missing_offset),
        };
        let shape = [batch.batch, batch.num_columns(), batch.len, self.dim];
        let name_index: Vec<Option<usize>> = batch.name_slots.iter().map(resolve).collect();
        let value_index: Vec<Option<usize>> = batch.value_slots.iter().map(resolve).collect();
        let names = tape.gather_rows(all, &name_index)?;
        let names = tape.reshape(names, &shape)?;
        let values = tape.gather_rows(all, &value_index)?;
        let values = tape.reshape(values, &shape)?;
        Ok(EncodedRowBatch {
            names,
            values,
            name_mask: batch.name_mask(),
            value_mask: batch.value_mask(),
            columns: batch.columns.clone(),
            batch: batch.batch,
            len: batch.len,
        })
    }

    /// Tokenizes and embeds raw rows in one call.
    pub fn encode_row_batch<T: Float>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, rows: &[Row]) -> Result<EncodedRowBatch> {
        let rt = self.row_tokenizer();
        let tokenized = rows.iter().map(|r| rt.tokenize_row(r)).collect::<Result<Vec<_>>>()?;
        let refs: Vec<&TokenizedRow> = tokenized.iter().collect();
        self.embed(tape, store, &TokenizedBatch::new(&refs)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn row(pairs: &[(&str, CellValue)]) -> Row {
        Row::new(pairs.iter().map(|(n, v)| (n.to_string(), v.clone())).collect()).unwrap()
    }

    fn encoder(dim: usize, store: &mut ParamStore<f64>) -> RowEncoder {
        let spec = TextEncoderSpec { backend: TextBackend::Hashed { vocab_buckets: 64, embed_dim: 6 }, lowercase: true };
        RowEncoder::new(store, &spec, dim, SmrConfig::new(3, 2).unwrap(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap()
    }

    #[test]
    fn tokenize_examples() {
        let spec = TextEncoderSpec::default();
        assert_eq!(tokenize("", &spec).unwrap(), vec![0]);
        assert_eq!(tokenize("   ", &spec).unwrap(), vec![0]);
        let ids = tokenize("Great House!", &spec).unwrap();
        assert_eq!(ids.len(), 3);
        assert!(ids.iter().all(|&i| (1..4096).contains(&i)));
        // FNV-1a 64 of "great", "house", "!" reduced mod 4095, plus one.
        assert_eq!(ids, vec![931, 1217, 1438]);
        let aa = tokenize("a a", &spec).unwrap();
        assert_eq!(aa.len(), 2);
        assert_eq!(aa[0], aa[1]);
        assert_eq!(tokenize("GREAT", &spec).unwrap(), tokenize("great", &spec).unwrap());
    }

    #[test]
    fn row_validation() {
        assert!(matches!(
            Row::new(vec![("a".into(), CellValue::Missing), ("a".into(), CellValue::Missing)]),
            Err(EncoderError::DuplicateColumn(_))
        ));
        assert!(matches!(Row::new(vec![("".into(), CellValue::Missing)]), Err(EncoderError::EmptyColumnName)));
    }

    #[test]
    fn numeric_table_has_unit_length() {
        let mut store = ParamStore::new();
        let enc = encoder(8, &mut store);
        let rows = vec![
            row(&[("age", CellValue::Number(3.0)), ("bmi", CellValue::Number(-1.25))]),
            row(&[("age", CellValue::Number(7.0)), ("bmi", CellValue::Missing)]),
        ];
        let mut tape = Tape::new();
        let b = enc.encode_row_batch(&mut tape, &store, &rows).unwrap();
        assert_eq!(tape.shape(b.names), &[2, 2, 1, 8]);
        assert_eq!(tape.shape(b.values), &[2, 2, 1, 8]);
        assert!(b.value_mask.keep.iter().all(|&k| k));
        // the missing cell is the learned token
        let v = tape.value(b.values).data();
        let missing = store.get(enc.missing).value.data();
        assert_eq!(&v[3 * 8..4 * 8], missing);
    }

    #[test]
    fn text_batch_is_padded_and_masked() {
        let mut store = ParamStore::new();
        let enc = encoder(4, &mut store);
        let rows = vec![
            row(&[("name", CellValue::Text("a b c d e".into())), ("x", CellValue::Number(1.0)), ("y", CellValue::Missing)]),
            row(&[("name", CellValue::Text("".into())), ("x", CellValue::Number(1.0)), ("y", CellValue::Text("red wine".into()))]),
        ];
        let mut tape = Tape::new();
        let b = enc.encode_row_batch(&mut tape, &store, &rows).unwrap();
        assert_eq!(b.shape(4), [2, 3, 5, 4]);
        assert_eq!(tape.shape(b.values), &[2, 3, 5, 4]);
        let keep = &b.value_mask.keep;
        assert_eq!(&keep[0..5], &[true; 5]);
        assert_eq!(&keep[5..10], &[true, false, false, false, false]);
        assert_eq!(&keep[10..15], &[true, false, false, false, false]);
        assert_eq!(&keep[15..20], &[true, false, false, false, false]);
        assert_eq!(&keep[25..30], &[true, true, false, false, false]);
        // padded positions hold zero vectors
        let v = tape.value(b.values).data();
        for (i, &k) in keep.iter().enumerate() {
            if !k {
                assert!(v[i * 4..(i + 1) * 4].iter().all(|&x| x == 0.0));
            }
        }
        // equal numbers embed identically
        let x0 = &v[5 * 4..6 * 4];
        let x1 = &v[20 * 4..21 * 4];
        assert_eq!(x0, x1);
    }

    #[test]
    fn single_empty_text_cell() {
        let mut store = ParamStore::new();
        let enc = encoder(4, &mut store);
        let mut tape = Tape::new();
        let b = enc.encode_row_batch(&mut tape, &store, &[row(&[("t", CellValue::Text(String::new()))])]).unwrap();
        assert_eq!(b.shape(4), [1, 1, 1, 4]);
        let table = store.get(enc.token_table).value.data();
        let mut t2 = Tape::new();
        let e = t2.constant(Tensor::new(vec![1, 6], table[0..6].to_vec()).unwrap());
        let expected = enc.text_proj.forward(&mut t2, &store, e).unwrap();
        assert_eq!(tape.value(b.values).data(), t2.value(expected).data());
    }

    #[test]
    fn inconsistent_columns_are_rejected() {
        let mut store = ParamStore::new();
        let enc = encoder(4, &mut store);
        let rows = vec![row(&[("a", CellValue::Number(1.0))]), row(&[("b", CellValue::Number(1.0))])];
        let mut tape = Tape::new();
        assert!(matches!(enc.encode_row_batch(&mut tape, &store, &rows), Err(EncoderError::InconsistentColumns { row: 1, .. })));
        assert!(matches!(enc.encode_row_batch(&mut tape, &store, &[]), Err(EncoderError::EmptyBatch)));
    }

    #[test]
    fn pair_order_only_permutes_columns() {
        let mut store = ParamStore::new();
        let enc = encoder(4, &mut store);
        let a = row(&[("p", CellValue::Number(2.5)), ("q", CellValue::Text("hello there".into())), ("r", CellValue::Missing)]);
        let b = row(&[("r", CellValue::Missing), ("p", CellValue::Number(2.5)), ("q", CellValue::Text("hello there".into()))]);
        let mut ta = Tape::new();
        let ea = enc.encode_row_batch(&mut ta, &store, &[a]).unwrap();
        let mut tb = Tape::new();
        let eb = enc.encode_row_batch(&mut tb, &store, &[b]).unwrap();
        assert_eq!(ea.columns, vec!["p", "q", "r"]);
        assert_eq!(eb.columns, vec!["r", "p", "q"]);
        let block = 2 * 4;
        let (va, vb) = (ta.value(ea.values).data(), tb.value(eb.values).data());
        let (na, nb) = (ta.value(ea.names).data(), tb.value(eb.names).data());
        for (ia, name) in ea.columns.iter().enumerate() {
            let ib = eb.columns.iter().position(|c| c == name).unwrap();
            assert_eq!(&va[ia * block..(ia + 1) * block], &vb[ib * block..(ib + 1) * block]);
            assert_eq!(&na[ia * block..(ia + 1) * block], &nb[ib * block..(ib + 1) * block]);
        }
    }

    #[test]
    fn saturation_is_counted() {
        let rt = RowTokenizer { tokenizer: Tokenizer::new(16, true).unwrap(), smr: SmrConfig::new(3, 2).unwrap() };
        let t = rt.tokenize_row(&row(&[("a", CellValue::Number(100.0)), ("b", CellValue::Number(1.0))])).unwrap();
        assert_eq!(t.saturated, 1);
        assert!(rt.tokenize_row(&row(&[("a", CellValue::Number(f64::NAN))])).is_err());
    }

    #[test]
    fn embedding_table_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("table.bin");
        let table = EmbeddingTable { vocab_size: 3, dim: 2, data: vec![0.5, -1.0, 2.0, 0.25, 0.0, 3.5] };
        table.write(&path).unwrap();
        assert_eq!(EmbeddingTable::read(&path).unwrap(), table);
        let spec = TextEncoderSpec { backend: TextBackend::TableFile { path: path.clone() }, lowercase: true };
        assert!(tokenize("abc", &spec).unwrap().iter().all(|&t| (1..3).contains(&t)));
        let mut store = ParamStore::<f32>::new();
        let enc = RowEncoder::new(&mut store, &spec, 4, SmrConfig::new(3, 2).unwrap(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(!store.get(enc.token_table).trainable);
        assert_eq!(store.get(enc.token_table).value.data(), &table.data[..]);
    }
}
