//! CoNLL-style BIO corpora: parsing, validation, span extraction and statistics.
//!
//! Files are whitespace-separated columns, one token per line:
//!
//! ```text
//! # comment
//! Христо   Npmsi  B-PER
//! Стоичков Hmsi   I-PER
//! пристигна Vpitf-r3s O
//! ```
//!
//! A blank line ends a sentence. Lines whose first column is `-DOCSTART-` are
//! ignored, as are lines starting with `#`.

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

/// The four entity categories.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum EntityType {
    Per,
    Org,
    Loc,
    Misc,
}

impl EntityType {
    pub const ALL: [EntityType; 4] = [EntityType::Per, EntityType::Org, EntityType::Loc, EntityType::Misc];

    pub fn as_str(self) -> &'static str {
        match self {
            EntityType::Per => "PER",
            EntityType::Org => "ORG",
            EntityType::Loc => "LOC",
            EntityType::Misc => "MISC",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for EntityType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One of the nine BIO labels.
///
/// The discriminant order is the tag index used by the CRF and stored in
/// checkpoints: `B-PER, I-PER, B-ORG, I-ORG, B-LOC, I-LOC, B-MISC, I-MISC, O`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Label {
    Begin(EntityType),
    Inside(EntityType),
    Outside,
}

pub const LABEL_COUNT: usize = 9;

impl Label {
    pub const ALL: [Label; LABEL_COUNT] = [
        Label::Begin(EntityType::Per),
        Label::Inside(EntityType::Per),
        Label::Begin(EntityType::Org),
        Label::Inside(EntityType::Org),
        Label::Begin(EntityType::Loc),
        Label::Inside(EntityType::Loc),
        Label::Begin(EntityType::Misc),
        Label::Inside(EntityType::Misc),
        Label::Outside,
    ];

    pub fn index(self) -> usize {
        match self {
            Label::Begin(t) => 2 * t.index(),
            Label::Inside(t) => 2 * t.index() + 1,
            Label::Outside => 8,
        }
    }

    pub fn from_index(index: usize) -> Option<Label> {
        Label::ALL.get(index).copied()
    }

    pub fn entity_type(self) -> Option<EntityType> {
        match self {
            Label::Begin(t) | Label::Inside(t) => Some(t),
            Label::Outside => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        const NAMES: [&str; LABEL_COUNT] =
            ["B-PER", "I-PER", "B-ORG", "I-ORG", "B-LOC", "I-LOC", "B-MISC", "I-MISC", "O"];
        NAMES[self.index()]
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Label {
    type Err = CorpusError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Label::ALL
            .iter()
            .copied()
            .find(|l| l.as_str() == s)
            .ok_or_else(|| CorpusError::UnknownLabel { line: 0, label: s.to_string() })
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CorpusError {
    #[error("file contains no tokens")]
    EmptyFile,
    #[error("line {line}: expected {expected} columns, found {found}")]
    MixedColumnCount { line: usize, expected: usize, found: usize },
    #[error("line {line}: unknown label {label:?}")]
    UnknownLabel { line: usize, label: String },
    #[error("line {line}: token has no label")]
    MissingLabel { line: usize },
    #[error("line {line}: unsupported column count {found}")]
    BadColumnCount { line: usize, found: usize },
    #[error("span {start}..={end} overlaps a previous span")]
    OverlappingSpans { start: usize, end: usize },
    #[error("span {start}..={end} out of range for length {length}")]
    SpanOutOfRange { start: usize, end: usize, length: usize },
    #[error("{count} BIO violation(s), first at line {line}")]
    InvalidBio { count: usize, line: usize },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Token {
    pub surface: String,
    pub tag: Option<String>,
    pub label: Option<Label>,
    /// 1-based source line, 0 when not read from a file.
    pub line: usize,
}

impl Token {
    pub fn new(surface: impl Into<String>, tag: Option<&str>, label: Option<Label>) -> Self {
        Token { surface: surface.into(), tag: tag.map(str::to_string), label, line: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sentence {
    pub tokens: Vec<Token>,
}

impl Sentence {
    pub fn new(tokens: Vec<Token>) -> Self {
        Sentence { tokens }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// All labels, or `MissingLabel` for the first unlabeled token.
    pub fn labels(&self) -> Result<Vec<Label>, CorpusError> {
        self.tokens.iter().map(|t| t.label.ok_or(CorpusError::MissingLabel { line: t.line })).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corpus {
    pub sentences: Vec<Sentence>,
    pub split: String,
}

impl Corpus {
    pub fn token_count(&self) -> usize {
        self.sentences.iter().map(Sentence::len).sum()
    }
}

/// Which columns a file carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Layout {
    /// `surface label` or `surface tag label`.
    Labeled,
    /// `surface` or `surface tag`.
    Unlabeled,
}

/// Parse a labeled file (last column is the BIO label).
pub fn parse_conll(text: &str) -> Result<Corpus, CorpusError> {
    parse_with_layout(text, Layout::Labeled)
}

pub fn parse_with_layout(text: &str, layout: Layout) -> Result<Corpus, CorpusError> {
    let mut sentences = Vec::new();
    let mut current = Vec::new();
    let mut columns: Option<usize> = None;

    for (n, raw) in text.lines().enumerate() {
        let line_no = n + 1;
        let line = raw.trim();
        if line.is_empty() {
            if !current.is_empty() {
                sentences.push(Sentence::new(std::mem::take(&mut current)));
            }
            continue;
        }
        if line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields[0] == "-DOCSTART-" {
            continue;
        }
        match columns {
            None => columns = Some(fields.len()),
            Some(expected) if expected != fields.len() => {
                return Err(CorpusError::MixedColumnCount { line: line_no, expected, found: fields.len() })
            }
            Some(_) => {}
        }
        let token = match (layout, fields.len()) {
            (Layout::Labeled, 1) => return Err(CorpusError::MissingLabel { line: line_no }),
            (Layout::Labeled, 2) => Token {
                surface: fields[0].into(),
                tag: None,
                label: Some(label_at(fields[1], line_no)?),
                line: line_no,
            },
            (Layout::Labeled, 3) => Token {
                surface: fields[0].into(),
                tag: Some(fields[1].into()),
                label: Some(label_at(fields[2], line_no)?),
                line: line_no,
            },
            (Layout::Unlabeled, 1) => Token { surface: fields[0].into(), tag: None, label: None, line: line_no },
            (Layout::Unlabeled, 2) => {
                Token { surface: fields[0].into(), tag: Some(fields[1].into()), label: None, line: line_no }
            }
            (_, found) => return Err(CorpusError::BadColumnCount { line: line_no, found }),
        };
        current.push(token);
    }
    if !current.is_empty() {
        sentences.push(Sentence::new(current));
    }
    if sentences.is_empty() {
        return Err(CorpusError::EmptyFile);
    }
    Ok(Corpus { sentences, split: String::new() })
}

fn label_at(s: &str, line: usize) -> Result<Label, CorpusError> {
    s.parse::<Label>().map_err(|_| CorpusError::UnknownLabel { line, label: s.to_string() })
}

/// Serialize back to the column format, one space between columns.
pub fn write_conll(corpus: &Corpus) -> String {
    let mut out = String::new();
    for (i, sentence) in corpus.sentences.iter().enumerate() {
        if i > 0 {
            out.push('\n');
        }
        for token in &sentence.tokens {
            out.push_str(&token.surface);
            if let Some(tag) = &token.tag {
                out.push(' ');
                out.push_str(tag);
            }
            if let Some(label) = token.label {
                out.push(' ');
                out.push_str(label.as_str());
            }
            out.push('\n');
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ViolationKind {
    /// `I-X` at sentence start or after `O`.
    OrphanInside,
    /// `I-X` after `B-Y`/`I-Y` with `Y != X`.
    TypeMismatch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Violation {
    pub index: usize,
    pub kind: ViolationKind,
}

pub fn validate_bio(sentence: &Sentence) -> Result<Vec<Violation>, CorpusError> {
    Ok(bio_violations(&sentence.labels()?))
}

pub fn bio_violations(labels: &[Label]) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut prev: Option<EntityType> = None;
    for (index, &label) in labels.iter().enumerate() {
        if let Label::Inside(t) = label {
            match prev {
                None => out.push(Violation { index, kind: ViolationKind::OrphanInside }),
                Some(p) if p != t => out.push(Violation { index, kind: ViolationKind::TypeMismatch }),
                Some(_) => {}
            }
        }
        prev = label.entity_type();
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct EntitySpan {
    pub kind: EntityType,
    pub start: usize,
    /// Inclusive.
    pub end: usize,
}

impl EntitySpan {
    pub fn new(kind: EntityType, start: usize, end: usize) -> Self {
        EntitySpan { kind, start, end }
    }
}

/// Entity spans in the conlleval sense: an `I-X` without a same-type
/// predecessor opens a new span.
pub fn extract_spans(labels: &[Label]) -> Vec<EntitySpan> {
    let mut spans = Vec::new();
    let mut open: Option<EntitySpan> = None;
    for (i, &label) in labels.iter().enumerate() {
        match label {
            Label::Outside => {
                spans.extend(open.take());
            }
            Label::Begin(t) => {
                spans.extend(open.take());
                open = Some(EntitySpan::new(t, i, i));
            }
            Label::Inside(t) => match open.as_mut() {
                Some(span) if span.kind == t => span.end = i,
                _ => {
                    spans.extend(open.take());
                    open = Some(EntitySpan::new(t, i, i));
                }
            },
        }
    }
    spans.extend(open);
    spans
}

pub fn spans_to_labels(spans: &[EntitySpan], length: usize) -> Result<Vec<Label>, CorpusError> {
    let mut labels = vec![Label::Outside; length];
    let mut taken = vec![false; length];
    for span in spans {
        if span.start > span.end || span.end >= length {
            return Err(CorpusError::SpanOutOfRange { start: span.start, end: span.end, length });
        }
        if taken[span.start..=span.end].iter().any(|&t| t) {
            return Err(CorpusError::OverlappingSpans { start: span.start, end: span.end });
        }
        for i in span.start..=span.end {
            taken[i] = true;
            labels[i] = if i == span.start { Label::Begin(span.kind) } else { Label::Inside(span.kind) };
        }
    }
    Ok(labels)
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CorpusStats {
    pub sentences: usize,
    pub tokens: usize,
    /// Indexed by [`EntityType::index`].
    pub entities: [usize; 4],
}

impl CorpusStats {
    pub fn count(&self, kind: EntityType) -> usize {
        self.entities[kind.index()]
    }
}

impl fmt::Display for CorpusStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "sentences={} tokens={}", self.sentences, self.tokens)?;
        for kind in EntityType::ALL {
            write!(f, " {}={}", kind, self.count(kind))?;
        }
        Ok(())
    }
}

/// Counts sentences, tokens and entities. Fails on the first BIO violation.
pub fn corpus_stats(corpus: &Corpus) -> Result<CorpusStats, CorpusError> {
    let mut stats = CorpusStats { sentences: corpus.sentences.len(), ..Default::default() };
    for sentence in &corpus.sentences {
        let labels = sentence.labels()?;
        let violations = bio_violations(&labels);
        if let Some(first) = violations.first() {
            return Err(CorpusError::InvalidBio { count: violations.len(), line: sentence.tokens[first.index].line });
        }
        stats.tokens += sentence.len();
        for span in extract_spans(&labels) {
            stats.entities[span.kind.index()] += 1;
        }
    }
    Ok(stats)
}

#[cfg(test)]
mod tests {
    use super::*;
    use EntityType::*;
    use Label::*;

    const TABLE1: &str = "Христо B-PER\nСтоичков I-PER\nпристигна O\nв O\nСофия B-LOC\n\n";

    fn labels(s: &str) -> Vec<Label> {
        s.split_whitespace().map(|l| l.parse().unwrap()).collect()
    }

    #[test]
    fn parses_table1_sentence() {
        let corpus = parse_conll(TABLE1).unwrap();
        assert_eq!(corpus.sentences.len(), 1);
        assert_eq!(corpus.sentences[0].len(), 5);
        assert_eq!(corpus.sentences[0].tokens[4].surface, "София");
        assert_eq!(corpus.sentences[0].tokens[4].label, Some(Begin(Loc)));
    }

    #[test]
    fn blank_only_file_is_empty() {
        assert_eq!(parse_conll("\n\n  \n"), Err(CorpusError::EmptyFile));
    }

    #[test]
    fn unknown_label_rejected() {
        assert!(matches!(parse_conll("word X-PER\n"), Err(CorpusError::UnknownLabel { line: 1, .. })));
    }

    #[test]
    fn mixed_columns_rejected() {
        let err = parse_conll("a Npfsi B-PER\nb O\n").unwrap_err();
        assert_eq!(err, CorpusError::MixedColumnCount { line: 2, expected: 3, found: 2 });
    }

    #[test]
    fn comments_docstart_and_tabs() {
        let text = "-DOCSTART- O\n\n# a comment\nСофия\tNpfsi\tB-LOC\nе\tVxitf-r3s\tO\n";
        let corpus = parse_conll(text).unwrap();
        assert_eq!(corpus.sentences.len(), 1);
        assert_eq!(corpus.sentences[0].tokens[0].tag.as_deref(), Some("Npfsi"));
        assert_eq!(corpus.sentences[0].tokens[0].line, 4);
    }

    #[test]
    fn single_column_labeled_is_missing_label() {
        assert_eq!(parse_conll("София\n"), Err(CorpusError::MissingLabel { line: 1 }));
        let c = parse_with_layout("София Npfsi\n", Layout::Unlabeled).unwrap();
        assert_eq!(c.sentences[0].tokens[0].label, None);
    }

    #[test]
    fn validate_examples() {
        let s = |l: &str| Sentence::new(labels(l).into_iter().map(|l| Token::new("x", None, Some(l))).collect());
        assert!(validate_bio(&s("B-PER I-PER O O B-LOC")).unwrap().is_empty());
        assert_eq!(
            validate_bio(&s("O I-LOC")).unwrap(),
            vec![Violation { index: 1, kind: ViolationKind::OrphanInside }]
        );
        assert_eq!(
            validate_bio(&s("B-PER I-LOC")).unwrap(),
            vec![Violation { index: 1, kind: ViolationKind::TypeMismatch }]
        );
        let unlabeled = Sentence::new(vec![Token::new("x", None, None)]);
        assert!(matches!(validate_bio(&unlabeled), Err(CorpusError::MissingLabel { .. })));
    }

    #[test]
    fn extract_examples() {
        assert_eq!(
            extract_spans(&labels("B-PER I-PER O O B-LOC")),
            vec![EntitySpan::new(Per, 0, 1), EntitySpan::new(Loc, 4, 4)]
        );
        assert!(extract_spans(&labels("O O O")).is_empty());
        assert_eq!(extract_spans(&labels("O I-PER I-PER")), vec![EntitySpan::new(Per, 1, 2)]);
        assert_eq!(extract_spans(&labels("B-PER I-LOC")), vec![EntitySpan::new(Per, 0, 0), EntitySpan::new(Loc, 1, 1)]);
    }

    #[test]
    fn spans_to_labels_examples() {
        let spans = [EntitySpan::new(Per, 0, 1), EntitySpan::new(Loc, 4, 4)];
        assert_eq!(spans_to_labels(&spans, 5).unwrap(), labels("B-PER I-PER O O B-LOC"));
        assert_eq!(spans_to_labels(&[], 3).unwrap(), labels("O O O"));
        let adjacent = [EntitySpan::new(Per, 0, 0), EntitySpan::new(Per, 1, 1)];
        assert_eq!(spans_to_labels(&adjacent, 2).unwrap(), labels("B-PER B-PER"));
    }

    #[test]
    fn spans_to_labels_errors() {
        let overlap = [EntitySpan::new(Per, 0, 2), EntitySpan::new(Loc, 2, 3)];
        assert!(matches!(spans_to_labels(&overlap, 5), Err(CorpusError::OverlappingSpans { .. })));
        assert!(matches!(spans_to_labels(&[EntitySpan::new(Per, 3, 5)], 5), Err(CorpusError::SpanOutOfRange { .. })));
    }

    #[test]
    fn stats_by_hand() {
        let text = "Иван B-PER\nВълчев I-PER\nи O\nМария B-PER\n\nв O\nСофия B-LOC\n";
        let stats = corpus_stats(&parse_conll(text).unwrap()).unwrap();
        assert_eq!(stats.sentences, 2);
        assert_eq!(stats.tokens, 6);
        assert_eq!(stats.entities, [2, 0, 1, 0]);

        let none = corpus_stats(&parse_conll("а O\nб O\n").unwrap()).unwrap();
        assert_eq!(none.entities, [0; 4]);
    }

    #[test]
    fn stats_rejects_invalid_bio() {
        let err = corpus_stats(&parse_conll("а O\nб I-LOC\n").unwrap()).unwrap_err();
        assert_eq!(err, CorpusError::InvalidBio { count: 1, line: 2 });
    }

    #[test]
    fn label_index_round_trip() {
        for (i, l) in Label::ALL.iter().enumerate() {
            assert_eq!(l.index(), i);
            assert_eq!(Label::from_index(i), Some(*l));
            assert_eq!(l.as_str().parse::<Label>().unwrap(), *l);
        }
    }
}
