//! Seeded synthetic corpora and word vectors for tests, demos and fixtures.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use rand::Rng;

use crate::corpus::{parse_conll, Corpus};
use crate::diffcore::seeded_rng;
use crate::embeddings::WordVectorTable;

const FIRST: &[&str] = &["Иван", "Петър", "Георги", "Димитър", "Никола", "Стоян", "Мария", "Елена"];
const LAST: &[&str] = &["Петров", "Иванов", "Георгиев", "Стоянов", "Вълчев", "Николов", "Стоичков", "Христов"];
const CITY: &[&str] = &["София", "Варна", "Пловдив", "Бургас", "Русе", "Плевен", "Враца", "Шумен"];
const ORG: &[(&str, &str, &str, &str)] = &[
    ("Народно", "Ansi", "събрание", "Ncnsi"),
    ("Българска", "Afsi", "академия", "Ncfsi"),
    ("Софийски", "Amsi", "университет", "Ncmsi"),
    ("Национален", "Amsi", "театър", "Ncmsi"),
    ("Централна", "Afsi", "банка", "Ncfsi"),
];
const VERB: &[&str] = &["пристигна", "замина", "говори", "работи", "посети", "откри"];

fn token(out: &mut String, surface: &str, tag: &str, label: &str) {
    let _ = writeln!(out, "{surface} {tag} {label}");
}

fn person(out: &mut String, rng: &mut impl Rng) {
    let first = FIRST[rng.gen_range(0..FIRST.len())];
    let tag = if matches!(first, "Мария" | "Елена") { "Npfsi" } else { "Npmsi" };
    token(out, first, tag, "B-PER");
    token(out, LAST[rng.gen_range(0..LAST.len())], "Hmsi", "I-PER");
}

fn city(out: &mut String, rng: &mut impl Rng) {
    token(out, CITY[rng.gen_range(0..CITY.len())], "Npfsi", "B-LOC");
}

fn org(out: &mut String, rng: &mut impl Rng) {
    let (a, at, n, nt) = ORG[rng.gen_range(0..ORG.len())];
    token(out, a, at, "B-ORG");
    token(out, n, nt, "I-ORG");
}

fn verb(out: &mut String, rng: &mut impl Rng) {
    token(out, VERB[rng.gen_range(0..VERB.len())], "Vpitf-o3s", "O");
}

/// Sentences built from a handful of templates with planted person,
/// location and organization names and matching positional tags.
pub fn planted_corpus(sentences: usize, seed: u64) -> Corpus {
    let mut rng = seeded_rng(seed);
    let mut text = String::new();
    for _ in 0..sentences {
        match rng.gen_range(0..5) {
            0 => {
                person(&mut text, &mut rng);
                verb(&mut text, &mut rng);
                token(&mut text, "в", "R", "O");
                city(&mut text, &mut rng);
            }
            1 => {
                org(&mut text, &mut rng);
                token(&mut text, "откри", "Vpitf-o3s", "O");
                token(&mut text, "офис", "Ncmsi", "O");
                token(&mut text, "в", "R", "O");
                city(&mut text, &mut rng);
            }
            2 => {
                token(&mut text, "днес", "Dt", "O");
                person(&mut text, &mut rng);
                verb(&mut text, &mut rng);
                token(&mut text, "за", "R", "O");
                org(&mut text, &mut rng);
            }
            3 => {
                city(&mut text, &mut rng);
                token(&mut text, "посрещна", "Vpitf-o3s", "O");
                token(&mut text, FIRST[rng.gen_range(0..FIRST.len())], "Npmsi", "B-PER");
            }
            _ => {
                token(&mut text, "срещата", "Ncfsd", "O");
                token(&mut text, "в", "R", "O");
                city(&mut text, &mut rng);
                token(&mut text, "беше", "Vxitf-t3s", "O");
                token(&mut text, "дълга", "Afsi", "O");
            }
        }
        text.push('\n');
    }
    parse_conll(&text).expect("generated corpus is well formed")
}

const SHARED: &[&str] =
    &["бор", "вода", "град", "дом", "звезда", "камък", "лист", "море", "нощ", "път", "река", "сняг"];
const TAGGED: &[(&str, Option<&str>)] =
    &[("Hmsi", Some("PER")), ("Afsi", Some("LOC")), ("Ncmsi", None), ("Vpitf-o3s", None), ("R", None), ("Dt", None)];

/// Sentences where every surface is drawn from one shared pool independent
/// of its tag; the gold label follows from the POS letter alone (H is a
/// person, A a location, everything else outside).
pub fn tag_only_corpus(sentences: usize, seed: u64) -> Corpus {
    let mut rng = seeded_rng(seed);
    let mut text = String::new();
    for _ in 0..sentences {
        let len = rng.gen_range(4..=8);
        let mut prev: Option<&str> = None;
        for _ in 0..len {
            let surface = SHARED[rng.gen_range(0..SHARED.len())];
            let (tag, kind) = TAGGED[rng.gen_range(0..TAGGED.len())];
            let label = match kind {
                Some(k) if prev == Some(k) => format!("I-{k}"),
                Some(k) => format!("B-{k}"),
                None => "O".to_string(),
            };
            token(&mut text, surface, tag, &label);
            prev = kind;
        }
        text.push('\n');
    }
    parse_conll(&text).expect("generated corpus is well formed")
}

/// One seeded random vector per distinct lowercased surface in `corpora`,
/// components uniform in `[-0.5, 0.5)`.
pub fn synthetic_vectors(corpora: &[&Corpus], dim: usize, seed: u64) -> WordVectorTable {
    let words: BTreeSet<String> = corpora
        .iter()
        .flat_map(|c| c.sentences.iter())
        .flat_map(|s| s.tokens.iter())
        .map(|t| t.surface.to_lowercase())
        .collect();
    let mut rng = seeded_rng(seed);
    let entries = words.into_iter().map(|w| (w, (0..dim).map(|_| rng.gen_range(-0.5..0.5)).collect())).collect();
    WordVectorTable::from_entries(dim, entries).expect("distinct words of one dimension")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{bio_violations, corpus_stats};

    #[test]
    fn planted_corpus_is_valid_and_seeded() {
        let c = planted_corpus(50, 42);
        assert_eq!(c.sentences.len(), 50);
        let stats = corpus_stats(&c).unwrap();
        assert!(stats.entities[0] > 0 && stats.entities[1] > 0 && stats.entities[2] > 0);
        assert_eq!(c, planted_corpus(50, 42));
        assert_ne!(c, planted_corpus(50, 43));
        assert!(c.sentences.iter().all(|s| s.tokens.iter().all(|t| t.tag.is_some())));
    }

    #[test]
    fn tag_only_labels_follow_tags() {
        let c = tag_only_corpus(30, 7);
        for s in &c.sentences {
            let labels = s.labels().unwrap();
            assert!(bio_violations(&labels).is_empty());
            for (t, l) in s.tokens.iter().zip(&labels) {
                let kind = l.entity_type().map(|k| k.as_str());
                match t.tag.as_deref().unwrap().chars().next() {
                    Some('H') => assert_eq!(kind, Some("PER")),
                    Some('A') => assert_eq!(kind, Some("LOC")),
                    _ => assert_eq!(kind, None),
                }
            }
        }
    }

    #[test]
    fn vectors_cover_every_surface() {
        let c = planted_corpus(20, 1);
        let v = synthetic_vectors(&[&c], 8, 3);
        assert_eq!(v.dim(), 8);
        assert!(c.sentences.iter().flat_map(|s| &s.tokens).all(|t| v.resolve(&t.surface).is_some()));
        assert_eq!(v, synthetic_vectors(&[&c], 8, 3));
    }
}
