//! Pre-trained word vectors in the textual `.vec` format and the character
//! and word vocabularies built from a training split.

use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use thiserror::Error;

use crate::corpus::Corpus;

#[derive(Debug, Error)]
pub enum EmbeddingError {
    #[error("bad header {0:?}; expected \"<count> <dim>\"")]
    BadHeader(String),
    #[error("line {line}: expected {expected} values, found {found}")]
    DimensionMismatch { line: usize, expected: usize, found: usize },
    #[error("line {line}: duplicate word {word:?}")]
    DuplicateWord { line: usize, word: String },
    #[error("header announces {expected} vectors, body has {found}")]
    CountMismatch { expected: usize, found: usize },
    #[error("line {line}: {value:?} is not a finite number")]
    BadValue { line: usize, value: String },
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}

/// Word vectors keyed by surface form, with a mean vector for unknown words.
#[derive(Debug, Clone, PartialEq)]
pub struct WordVectorTable {
    dim: usize,
    words: Vec<String>,
    index: HashMap<String, usize>,
    data: Vec<f64>,
    unk: Vec<f64>,
}

impl WordVectorTable {
    /// Builds a table from `(word, vector)` pairs; all vectors share `dim`.
    pub fn from_entries(dim: usize, entries: Vec<(String, Vec<f64>)>) -> Result<Self, EmbeddingError> {
        let mut table =
            WordVectorTable { dim, words: Vec::new(), index: HashMap::new(), data: Vec::new(), unk: vec![0.0; dim] };
        for (n, (word, vector)) in entries.into_iter().enumerate() {
            if vector.len() != dim {
                return Err(EmbeddingError::DimensionMismatch { line: n + 1, expected: dim, found: vector.len() });
            }
            table.push(word, &vector, n + 1)?;
        }
        table.finish();
        Ok(table)
    }

    fn push(&mut self, word: String, vector: &[f64], line: usize) -> Result<(), EmbeddingError> {
        if self.index.contains_key(&word) {
            return Err(EmbeddingError::DuplicateWord { line, word });
        }
        self.index.insert(word.clone(), self.words.len());
        self.words.push(word);
        self.data.extend_from_slice(vector);
        Ok(())
    }

    fn finish(&mut self) {
        let n = self.words.len();
        self.unk = vec![0.0; self.dim];
        if n == 0 {
            return;
        }
        for row in self.data.chunks(self.dim) {
            for (u, v) in self.unk.iter_mut().zip(row) {
                *u += v;
            }
        }
        for u in &mut self.unk {
            *u /= n as f64;
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn unk(&self) -> &[f64] {
        &self.unk
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    /// Row index of `word`: exact match first, then the lowercased form.
    pub fn resolve(&self, word: &str) -> Option<usize> {
        self.index.get(word).or_else(|| self.index.get(&word.to_lowercase())).copied()
    }

    /// Exact, then lowercased, then the unknown-word vector.
    pub fn lookup(&self, word: &str) -> &[f64] {
        match self.resolve(word) {
            Some(i) => self.row(i),
            None => &self.unk,
        }
    }

    /// Serializes in the `.vec` text format.
    pub fn to_vec_text(&self) -> String {
        let mut out = format!("{} {}\n", self.len(), self.dim);
        for (i, w) in self.words.iter().enumerate() {
            out.push_str(w);
            for v in self.row(i) {
                let _ = write!(out, " {v}");
            }
            out.push('\n');
        }
        out
    }
}

/// Parses `.vec` text: a `count dim` header, then `word v1 .. vd` lines.
pub fn load_vectors(text: &str) -> Result<WordVectorTable, EmbeddingError> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines.next().ok_or_else(|| EmbeddingError::BadHeader(String::new()))?;
    let fields: Vec<&str> = header.split_whitespace().collect();
    let (count, dim) = match fields.as_slice() {
        [c, d] => match (c.parse::<usize>(), d.parse::<usize>()) {
            (Ok(c), Ok(d)) if d > 0 => (c, d),
            _ => return Err(EmbeddingError::BadHeader(header.to_string())),
        },
        _ => return Err(EmbeddingError::BadHeader(header.to_string())),
    };
    let mut table = WordVectorTable {
        dim,
        words: Vec::new(),
        index: HashMap::new(),
        data: Vec::with_capacity(count * dim),
        unk: Vec::new(),
    };
    let mut vector = Vec::with_capacity(dim);
    for (n, line) in lines {
        let line_no = n + 1;
        let mut parts = line.split_whitespace();
        let word = parts.next().expect("non-blank line").to_string();
        vector.clear();
        for p in parts {
            let v: f64 = p.parse().map_err(|_| EmbeddingError::BadValue { line: line_no, value: p.to_string() })?;
            if !v.is_finite() {
                return Err(EmbeddingError::BadValue { line: line_no, value: p.to_string() });
            }
            vector.push(v);
        }
        if vector.len() != dim {
            return Err(EmbeddingError::DimensionMismatch { line: line_no, expected: dim, found: vector.len() });
        }
        table.push(word, &vector, line_no)?;
    }
    if table.len() != count {
        return Err(EmbeddingError::CountMismatch { expected: count, found: table.len() });
    }
    table.finish();
    Ok(table)
}

pub fn load_vectors_file(path: &Path) -> Result<WordVectorTable, EmbeddingError> {
    let text = std::fs::read_to_string(path)
        .map_err(|source| EmbeddingError::Io { path: path.display().to_string(), source })?;
    load_vectors(&text)
}

/// Character indices. Index 0 is reserved for unseen characters; the rest
/// follow code-point order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CharVocabulary {
    chars: Vec<char>,
    index: HashMap<char, usize>,
}

pub const UNK_CHAR: usize = 0;

impl CharVocabulary {
    pub fn from_chars<I: IntoIterator<Item = char>>(chars: I) -> Self {
        let sorted: BTreeSet<char> = chars.into_iter().collect();
        let chars: Vec<char> = sorted.into_iter().collect();
        let index = chars.iter().enumerate().map(|(i, &c)| (c, i + 1)).collect();
        CharVocabulary { chars, index }
    }

    /// Number of indices including the unknown-character slot.
    pub fn len(&self) -> usize {
        self.chars.len() + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn index_of(&self, c: char) -> usize {
        self.index.get(&c).copied().unwrap_or(UNK_CHAR)
    }

    pub fn encode(&self, word: &str) -> Vec<usize> {
        word.chars().map(|c| self.index_of(c)).collect()
    }

    /// Known characters in index order (index `i + 1`).
    pub fn chars(&self) -> &[char] {
        &self.chars
    }
}

pub fn build_char_vocab(corpus: &Corpus) -> CharVocabulary {
    CharVocabulary::from_chars(corpus.sentences.iter().flat_map(|s| s.tokens.iter()).flat_map(|t| t.surface.chars()))
}

/// Words whose vectors become trainable rows. Row 0 is the unknown word.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WordVocabulary {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

impl WordVocabulary {
    pub fn from_words(words: Vec<String>) -> Self {
        let index = words.iter().enumerate().map(|(i, w)| (w.clone(), i + 1)).collect();
        WordVocabulary { words, index }
    }

    /// Table entries reached by training surfaces, in first-seen order.
    pub fn build(corpus: &Corpus, table: &WordVectorTable) -> Self {
        let mut seen = std::collections::HashSet::new();
        let mut words = Vec::new();
        for token in corpus.sentences.iter().flat_map(|s| s.tokens.iter()) {
            if let Some(i) = table.resolve(&token.surface) {
                let w = &table.words()[i];
                if seen.insert(w.clone()) {
                    words.push(w.clone());
                }
            }
        }
        WordVocabulary::from_words(words)
    }

    /// Rows including the unknown row.
    pub fn len(&self) -> usize {
        self.words.len() + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    /// Exact, then lowercased.
    pub fn resolve(&self, word: &str) -> Option<usize> {
        self.index.get(word).or_else(|| self.index.get(&word.to_lowercase())).copied()
    }

    /// Initial embedding matrix: the unknown vector, then each word's vector.
    pub fn initial_rows(&self, table: &WordVectorTable) -> Vec<f64> {
        let mut data = table.unk().to_vec();
        for w in &self.words {
            data.extend_from_slice(table.lookup(w));
        }
        data
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::parse_conll;

    #[test]
    fn loads_small_table() {
        let t = load_vectors("2 3\nа 1 2 3\nб 4 5 6\n").unwrap();
        assert_eq!(t.len(), 2);
        assert_eq!(t.dim(), 3);
        assert_eq!(t.lookup("б"), &[4.0, 5.0, 6.0]);
        assert_eq!(t.unk(), &[2.5, 3.5, 4.5]);
    }

    #[test]
    fn unk_is_mean() {
        let t = load_vectors("2 2\nx 1 0\ny 3 2\n").unwrap();
        assert_eq!(t.unk(), &[2.0, 1.0]);
        assert_eq!(t.lookup("zzz"), &[2.0, 1.0]);
    }

    #[test]
    fn rejects_bad_files() {
        assert!(matches!(
            load_vectors("2 3\nа 1 2\nб 1 2 3\n"),
            Err(EmbeddingError::DimensionMismatch { line: 2, .. })
        ));
        assert!(matches!(load_vectors("two 3\n"), Err(EmbeddingError::BadHeader(_))));
        assert!(matches!(load_vectors(""), Err(EmbeddingError::BadHeader(_))));
        assert!(matches!(load_vectors("2 1\nа 1\nа 2\n"), Err(EmbeddingError::DuplicateWord { line: 3, .. })));
        assert!(matches!(
            load_vectors("3 1\nа 1\nб 2\n"),
            Err(EmbeddingError::CountMismatch { expected: 3, found: 2 })
        ));
        assert!(matches!(load_vectors("1 1\nа nan\n"), Err(EmbeddingError::BadValue { .. })));
    }

    #[test]
    fn lookup_falls_back_to_lowercase() {
        let t = load_vectors("2 1\nсофия 7\nx 1\n").unwrap();
        assert_eq!(t.lookup("София"), &[7.0]);
        assert_eq!(t.lookup("софия"), &[7.0]);
    }

    #[test]
    fn vec_text_round_trips() {
        let t = load_vectors("2 2\nx 0.1 -2.5e-7\ny 3 2\n").unwrap();
        assert_eq!(load_vectors(&t.to_vec_text()).unwrap(), t);
    }

    #[test]
    fn char_vocab_counts_distinct() {
        let corpus = parse_conll("аб O\nба O\n").unwrap();
        let v = build_char_vocab(&corpus);
        assert_eq!(v.len(), 3);
        assert_eq!(v.index_of('ы'), UNK_CHAR);
        assert_ne!(v.index_of('а'), UNK_CHAR);
    }

    #[test]
    fn char_vocab_is_order_independent() {
        let a = CharVocabulary::from_chars("вба".chars());
        let b = CharVocabulary::from_chars("абвв".chars());
        assert_eq!(a, b);
    }

    #[test]
    fn word_vocab_resolves_through_table() {
        let table = load_vectors("2 1\nсофия 7\nв 1\n").unwrap();
        let corpus = parse_conll("в O\nСофия B-LOC\nнякъде O\n").unwrap();
        let vocab = WordVocabulary::build(&corpus, &table);
        assert_eq!(vocab.words(), &["в".to_string(), "софия".to_string()]);
        assert_eq!(vocab.resolve("София"), Some(2));
        assert_eq!(vocab.resolve("някъде"), None);
        assert_eq!(vocab.initial_rows(&table), vec![4.0, 1.0, 7.0]);
    }
}
