//! Positional morphosyntactic tags and the grammatical feature vectors built
//! from them.
//!
//! A tag such as `Npfsi` starts with a part-of-speech letter; the remaining
//! positions are read through a [`TagsetMapping`]. Only nouns, adjectives,
//! hybrids and pronouns carry gender, number and definiteness.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::str::FromStr;

use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TagsetError {
    #[error("unknown part-of-speech letter in tag {0:?}")]
    UnknownPosLetter(String),
    #[error("empty tag")]
    EmptyTag,
    #[error("mapping line {line}: {reason}")]
    BadMappingLine { line: usize, reason: String },
    #[error("mapping line {line}: {pos}:{position}:{ch} already mapped")]
    DuplicateMapping { line: usize, pos: char, position: usize, ch: char },
    #[error("unknown feature scheme {0:?}")]
    UnknownScheme(String),
}

/// The eleven part-of-speech letters, in one-hot order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Pos {
    N,
    A,
    V,
    H,
    D,
    R,
    P,
    C,
    T,
    M,
    I,
}

impl Pos {
    pub const ALL: [Pos; 11] = [Pos::N, Pos::A, Pos::V, Pos::H, Pos::D, Pos::R, Pos::P, Pos::C, Pos::T, Pos::M, Pos::I];

    pub fn from_letter(c: char) -> Option<Pos> {
        Pos::ALL.iter().copied().find(|p| p.letter() == c)
    }

    pub fn letter(self) -> char {
        b"NAVHDRPCTMI"[self as usize] as char
    }

    pub fn index(self) -> usize {
        self as usize
    }

    /// Nouns, adjectives, hybrids and pronouns.
    pub fn is_nominal(self) -> bool {
        matches!(self, Pos::N | Pos::A | Pos::H | Pos::P)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Gender {
    Masculine,
    Feminine,
    Neutral,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Number {
    Singular,
    Plural,
    OnlyPlural,
    CountForm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Definiteness {
    Indefinite,
    Definite,
    ShortDefinite,
    FullDefinite,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Feature {
    Gender(Gender),
    Number(Number),
    Definiteness(Definiteness),
}

impl Feature {
    fn parse(s: &str) -> Option<Feature> {
        Some(match s {
            "gender.masculine" => Feature::Gender(Gender::Masculine),
            "gender.feminine" => Feature::Gender(Gender::Feminine),
            "gender.neutral" => Feature::Gender(Gender::Neutral),
            "number.singular" => Feature::Number(Number::Singular),
            "number.plural" => Feature::Number(Number::Plural),
            "number.only-plural" => Feature::Number(Number::OnlyPlural),
            "number.count-form" => Feature::Number(Number::CountForm),
            "definiteness.indefinite" => Feature::Definiteness(Definiteness::Indefinite),
            "definiteness.definite" => Feature::Definiteness(Definiteness::Definite),
            "definiteness.short-definite" => Feature::Definiteness(Definiteness::ShortDefinite),
            "definiteness.full-definite" => Feature::Definiteness(Definiteness::FullDefinite),
            _ => return None,
        })
    }

    fn name(self) -> &'static str {
        match self {
            Feature::Gender(Gender::Masculine) => "gender.masculine",
            Feature::Gender(Gender::Feminine) => "gender.feminine",
            Feature::Gender(Gender::Neutral) => "gender.neutral",
            Feature::Number(Number::Singular) => "number.singular",
            Feature::Number(Number::Plural) => "number.plural",
            Feature::Number(Number::OnlyPlural) => "number.only-plural",
            Feature::Number(Number::CountForm) => "number.count-form",
            Feature::Definiteness(Definiteness::Indefinite) => "definiteness.indefinite",
            Feature::Definiteness(Definiteness::Definite) => "definiteness.definite",
            Feature::Definiteness(Definiteness::ShortDefinite) => "definiteness.short-definite",
            Feature::Definiteness(Definiteness::FullDefinite) => "definiteness.full-definite",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PositionalTag {
    pub pos: Pos,
    pub gender: Option<Gender>,
    pub number: Option<Number>,
    pub definiteness: Option<Definiteness>,
}

impl PositionalTag {
    pub fn bare(pos: Pos) -> Self {
        PositionalTag { pos, gender: None, number: None, definiteness: None }
    }
}

/// Per-POS tables from `(position, character)` to a feature value.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TagsetMapping {
    entries: BTreeMap<(Pos, usize, char), Feature>,
}

pub const DEFAULT_MAPPING: &str = include_str!("../data/btb-default.map");

impl Default for TagsetMapping {
    fn default() -> Self {
        TagsetMapping::parse(DEFAULT_MAPPING).expect("bundled mapping is valid")
    }
}

impl TagsetMapping {
    pub fn empty() -> Self {
        TagsetMapping { entries: BTreeMap::new() }
    }

    /// Parse `POS:position:char=feature.value` lines; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self, TagsetError> {
        let mut entries = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = n + 1;
            let entry = raw.trim();
            if entry.is_empty() || entry.starts_with('#') {
                continue;
            }
            let bad = |reason: &str| TagsetError::BadMappingLine { line, reason: reason.to_string() };
            let (key, value) = entry.split_once('=').ok_or_else(|| bad("missing '='"))?;
            let mut parts = key.splitn(3, ':');
            let (Some(pos), Some(position), Some(ch)) = (parts.next(), parts.next(), parts.next()) else {
                return Err(bad("expected POS:position:char"));
            };
            let mut pos_chars = pos.chars();
            let pos = match (pos_chars.next().and_then(Pos::from_letter), pos_chars.next()) {
                (Some(p), None) => p,
                _ => return Err(bad("unknown POS letter")),
            };
            if !pos.is_nominal() {
                return Err(bad("only N, A, H and P carry nominal features"));
            }
            let position: usize = position.parse().map_err(|_| bad("position is not an integer"))?;
            if position == 0 {
                return Err(bad("position 0 holds the POS letter"));
            }
            let mut ch_chars = ch.chars();
            let ch = match (ch_chars.next(), ch_chars.next()) {
                (Some(c), None) => c,
                _ => return Err(bad("expected a single character")),
            };
            let feature = Feature::parse(value.trim()).ok_or_else(|| bad("unknown feature value"))?;
            if entries.insert((pos, position, ch), feature).is_some() {
                return Err(TagsetError::DuplicateMapping { line, pos: pos.letter(), position, ch });
            }
        }
        Ok(TagsetMapping { entries })
    }

    /// Canonical entry lines, in sorted order.
    pub fn entry_lines(&self) -> Vec<String> {
        self.entries
            .iter()
            .map(|((pos, position, ch), f)| format!("{}:{}:{}={}", pos.letter(), position, ch, f.name()))
            .collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Parse a raw tag. Characters the mapping does not know are ignored.
pub fn parse_tag(raw: &str, mapping: &TagsetMapping) -> Result<PositionalTag, TagsetError> {
    let first = raw.chars().next().ok_or(TagsetError::EmptyTag)?;
    let pos = Pos::from_letter(first).ok_or_else(|| TagsetError::UnknownPosLetter(raw.to_string()))?;
    let mut tag = PositionalTag::bare(pos);
    if !pos.is_nominal() {
        return Ok(tag);
    }
    for (position, ch) in raw.chars().enumerate().skip(1) {
        match mapping.entries.get(&(pos, position, ch)) {
            Some(Feature::Gender(g)) => tag.gender = Some(*g),
            Some(Feature::Number(n)) => tag.number = Some(*n),
            Some(Feature::Definiteness(d)) => tag.definiteness = Some(*d),
            None => {}
        }
    }
    Ok(tag)
}

/// A partition of the eleven POS letters into one-hot groups.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Partition {
    /// `[ANHR, REST]`
    Pos2,
    /// `[ANH, R, REST]`
    Pos3,
    /// `[A, NH, R, REST]`
    Pos4,
    /// `[A, N, H, R, REST]`
    Pos5,
    /// One group per letter, in [`Pos::ALL`] order.
    Pos11,
    /// `[ANH, REST]`, used only by the prose reading of `POS4+11`.
    AnhRest,
}

impl Partition {
    pub fn size(self) -> usize {
        match self {
            Partition::Pos2 | Partition::AnhRest => 2,
            Partition::Pos3 => 3,
            Partition::Pos4 => 4,
            Partition::Pos5 => 5,
            Partition::Pos11 => 11,
        }
    }

    pub fn group_names(self) -> Vec<String> {
        match self {
            Partition::Pos2 => vec!["ANHR".into(), "REST".into()],
            Partition::Pos3 => vec!["ANH".into(), "R".into(), "REST".into()],
            Partition::Pos4 => vec!["A".into(), "NH".into(), "R".into(), "REST".into()],
            Partition::Pos5 => vec!["A".into(), "N".into(), "H".into(), "R".into(), "REST".into()],
            Partition::Pos11 => Pos::ALL.iter().map(|p| p.letter().to_string()).collect(),
            Partition::AnhRest => vec!["ANH".into(), "REST".into()],
        }
    }
}

/// Group index of `pos` under `partition`. Depends on nothing but the letter.
pub fn pos_group(pos: Pos, partition: Partition) -> usize {
    use Pos::*;
    match partition {
        Partition::Pos2 => match pos {
            A | N | H | R => 0,
            _ => 1,
        },
        Partition::Pos3 => match pos {
            A | N | H => 0,
            R => 1,
            _ => 2,
        },
        Partition::Pos4 => match pos {
            A => 0,
            N | H => 1,
            R => 2,
            _ => 3,
        },
        Partition::Pos5 => match pos {
            A => 0,
            N => 1,
            H => 2,
            R => 3,
            _ => 4,
        },
        Partition::Pos11 => pos.index(),
        Partition::AnhRest => match pos {
            A | N | H => 0,
            _ => 1,
        },
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PosScheme {
    Pos2,
    Pos3,
    Pos4,
    Pos5,
    Pos11,
    Pos3Plus11,
    Pos4Plus11,
}

impl PosScheme {
    pub const ALL: [PosScheme; 7] = [
        PosScheme::Pos2,
        PosScheme::Pos3,
        PosScheme::Pos4,
        PosScheme::Pos5,
        PosScheme::Pos11,
        PosScheme::Pos3Plus11,
        PosScheme::Pos4Plus11,
    ];

    /// The one-hot blocks this scheme concatenates, in vector order.
    pub fn blocks(self, reading: CombinedReading) -> Vec<Partition> {
        match (self, reading) {
            (PosScheme::Pos2, _) => vec![Partition::Pos2],
            (PosScheme::Pos3, _) => vec![Partition::Pos3],
            (PosScheme::Pos4, _) => vec![Partition::Pos4],
            (PosScheme::Pos5, _) => vec![Partition::Pos5],
            (PosScheme::Pos11, _) => vec![Partition::Pos11],
            (PosScheme::Pos3Plus11, CombinedReading::Concatenation) => vec![Partition::Pos11, Partition::Pos3],
            (PosScheme::Pos4Plus11, CombinedReading::Concatenation) => vec![Partition::Pos11, Partition::Pos4],
            (PosScheme::Pos3Plus11, CombinedReading::ProseGloss) => vec![Partition::Pos11, Partition::Pos2],
            (PosScheme::Pos4Plus11, CombinedReading::ProseGloss) => vec![Partition::Pos11, Partition::AnhRest],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            PosScheme::Pos2 => "pos2",
            PosScheme::Pos3 => "pos3",
            PosScheme::Pos4 => "pos4",
            PosScheme::Pos5 => "pos5",
            PosScheme::Pos11 => "pos11",
            PosScheme::Pos3Plus11 => "pos3+11",
            PosScheme::Pos4Plus11 => "pos4+11",
        }
    }
}

/// How the combined schemes `POS3+11` and `POS4+11` are built.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum CombinedReading {
    /// POS11 one-hot followed by the POS3 (or POS4) one-hot.
    #[default]
    Concatenation,
    /// POS11 one-hot followed by `[ANHR, REST]` (for 3+11) or `[ANH, REST]` (for 4+11).
    ProseGloss,
}

impl CombinedReading {
    pub fn name(self) -> &'static str {
        match self {
            CombinedReading::Concatenation => "concat",
            CombinedReading::ProseGloss => "gloss",
        }
    }
}

impl FromStr for CombinedReading {
    type Err = TagsetError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "concat" => Ok(CombinedReading::Concatenation),
            "gloss" => Ok(CombinedReading::ProseGloss),
            other => Err(TagsetError::UnknownScheme(other.to_string())),
        }
    }
}

/// Which grammatical blocks are appended to each token's input vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct FeatureScheme {
    pub pos: Option<PosScheme>,
    pub morph: bool,
    pub script: bool,
    pub lexicon: bool,
    pub reading: CombinedReading,
}

pub const MORPH_DIM: usize = 11;

impl FeatureScheme {
    pub fn none() -> Self {
        FeatureScheme::default()
    }

    pub fn with_pos(pos: PosScheme, morph: bool) -> Self {
        FeatureScheme { pos: Some(pos), morph, ..Default::default() }
    }

    /// True when positional tags are needed to build the vector.
    pub fn needs_tags(&self) -> bool {
        self.pos.is_some() || self.morph
    }

    pub fn blocks(&self) -> Vec<Partition> {
        self.pos.map(|p| p.blocks(self.reading)).unwrap_or_default()
    }
}

impl fmt::Display for FeatureScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.pos.map_or("none", PosScheme::name))?;
        if self.morph {
            f.write_str("+morph")?;
        }
        if self.script {
            f.write_str("+script")?;
        }
        if self.lexicon {
            f.write_str("+lexicon")?;
        }
        if self.reading != CombinedReading::default() {
            write!(f, "@{}", self.reading.name())?;
        }
        Ok(())
    }
}

impl FromStr for PosScheme {
    type Err = TagsetError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        PosScheme::ALL
            .iter()
            .copied()
            .find(|p| p.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| TagsetError::UnknownScheme(s.to_string()))
    }
}

impl FromStr for FeatureScheme {
    type Err = TagsetError;

    /// Inverse of `Display`: `pos3+11+morph+script@gloss`, `none`, ...
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (body, reading) = match s.split_once('@') {
            Some((b, r)) => (b, r.parse()?),
            None => (s, CombinedReading::default()),
        };
        let mut scheme = FeatureScheme { reading, ..Default::default() };
        let mut rest = body;
        for suffix in ["+lexicon", "+script", "+morph"] {
            if let Some(stripped) = rest.strip_suffix(suffix) {
                rest = stripped;
                match suffix {
                    "+lexicon" => scheme.lexicon = true,
                    "+script" => scheme.script = true,
                    _ => scheme.morph = true,
                }
            }
        }
        scheme.pos = if rest == "none" { None } else { Some(rest.parse()?) };
        Ok(scheme)
    }
}

/// Length of the grammatical vector for `scheme`.
pub fn scheme_dim(scheme: &FeatureScheme) -> usize {
    scheme.blocks().iter().map(|b| b.size()).sum::<usize>()
        + if scheme.morph { MORPH_DIM } else { 0 }
        + usize::from(scheme.script)
        + usize::from(scheme.lexicon)
}

/// 1 when the word contains any Latin letter.
pub fn script_feature(surface: &str) -> u8 {
    u8::from(surface.chars().any(is_latin_letter))
}

fn is_latin_letter(c: char) -> bool {
    c.is_ascii_alphabetic()
        || (('\u{00C0}'..='\u{024F}').contains(&c) && c != '\u{00D7}' && c != '\u{00F7}')
        || ('\u{1E00}'..='\u{1EFF}').contains(&c)
}

/// A loanword lexicon: one word per line.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Lexicon {
    words: HashSet<String>,
}

impl Lexicon {
    pub fn parse(text: &str) -> Self {
        Lexicon { words: text.lines().map(str::trim).filter(|w| !w.is_empty()).map(str::to_string).collect() }
    }

    pub fn from_words<I: IntoIterator<Item = S>, S: Into<String>>(words: I) -> Self {
        Lexicon { words: words.into_iter().map(Into::into).collect() }
    }

    pub fn contains(&self, word: &str) -> bool {
        self.words.contains(word) || self.words.contains(&word.to_lowercase())
    }

    pub fn sorted_words(&self) -> Vec<&str> {
        let mut words: Vec<&str> = self.words.iter().map(String::as_str).collect();
        words.sort_unstable();
        words
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }
}

/// Grammatical vector: POS block(s), then gender(3) number(4)
/// definiteness(4), then the script bit, then the lexicon bit.
///
/// `tag` may be `None` only when the scheme needs no tags.
pub fn grammatical_vector(
    tag: Option<&PositionalTag>,
    scheme: &FeatureScheme,
    surface: &str,
    lexicon: Option<&Lexicon>,
) -> Vec<f64> {
    let mut v = Vec::with_capacity(scheme_dim(scheme));
    for block in scheme.blocks() {
        let mut one_hot = vec![0.0; block.size()];
        if let Some(tag) = tag {
            one_hot[pos_group(tag.pos, block)] = 1.0;
        }
        v.extend(one_hot);
    }
    if scheme.morph {
        let mut morph = [0.0; MORPH_DIM];
        if let Some(tag) = tag.filter(|t| t.pos.is_nominal()) {
            if let Some(g) = tag.gender {
                morph[g as usize] = 1.0;
            }
            if let Some(n) = tag.number {
                morph[3 + n as usize] = 1.0;
            }
            if let Some(d) = tag.definiteness {
                morph[7 + d as usize] = 1.0;
            }
        }
        v.extend(morph);
    }
    if scheme.script {
        v.push(f64::from(script_feature(surface)));
    }
    if scheme.lexicon {
        v.push(if lexicon.is_some_and(|l| l.contains(surface)) { 1.0 } else { 0.0 });
    }
    v
}
