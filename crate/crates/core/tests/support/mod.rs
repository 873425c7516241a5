//! Shared oracles and helpers for the integration tests.
#![allow(dead_code)]

use morphotag::corpus::Label;
use morphotag::crf::Transitions;
use morphotag::diffcore::{seeded_rng, DetRng, Tensor};
use morphotag::eval::SpanCounts;
use rand::Rng;

/// Every label sequence of length `l` over `k` tags, first position varying
/// fastest.
pub fn all_sequences(l: usize, k: usize) -> Vec<Vec<usize>> {
    let total = k.pow(l as u32);
    (0..total)
        .map(|mut n| {
            (0..l)
                .map(|_| {
                    let d = n % k;
                    n /= k;
                    d
                })
                .collect()
        })
        .collect()
}

/// Straight-line score with no shared code from the crate.
pub fn brute_score(e: &Tensor, y: &[usize], t: &Transitions) -> f64 {
    let k = t.tag_count();
    let mut s = t.start[y[0]] + e.get(0, y[0]);
    for i in 1..y.len() {
        s = s + t.trans[y[i - 1] * k + y[i]] + e.get(i, y[i]);
    }
    s + t.stop[y[y.len() - 1]]
}

/// `log Σ exp(score)` over all sequences, computed with its own max shift.
pub fn brute_log_partition(e: &Tensor, t: &Transitions) -> f64 {
    let scores: Vec<f64> = all_sequences(e.rows(), t.tag_count()).iter().map(|y| brute_score(e, y, t)).collect();
    let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + scores.iter().map(|s| (s - m).exp()).sum::<f64>().ln()
}

/// Highest-scoring sequence; among ties, the one that is smallest when
/// compared from the last position backwards. That matches a Viterbi pass
/// that prefers the lowest tag index both for the final tag and for each
/// backpointer.
pub fn brute_argmax(e: &Tensor, t: &Transitions) -> (Vec<usize>, f64) {
    let mut best: Option<(Vec<usize>, f64)> = None;
    for y in all_sequences(e.rows(), t.tag_count()) {
        let s = brute_score(e, &y, t);
        let better = match &best {
            None => true,
            Some((by, bs)) => s > *bs || (s == *bs && y.iter().rev().lt(by.iter().rev())),
        };
        if better {
            best = Some((y, s));
        }
    }
    best.expect("at least one sequence")
}

/// `p(y_i = j)` by summing sequence probabilities.
pub fn brute_unary_marginals(e: &Tensor, t: &Transitions) -> Vec<f64> {
    let (l, k) = (e.rows(), t.tag_count());
    let z = brute_log_partition(e, t);
    let mut out = vec![0.0; l * k];
    for y in all_sequences(l, k) {
        let p = (brute_score(e, &y, t) - z).exp();
        for (i, &j) in y.iter().enumerate() {
            out[i * k + j] += p;
        }
    }
    out
}

pub fn random_tensor(rng: &mut DetRng, rows: usize, cols: usize, scale: f64) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-scale..scale)).collect()).unwrap()
}

pub fn random_transitions(rng: &mut DetRng, k: usize, scale: f64) -> Transitions {
    let mut v = |n: usize| (0..n).map(|_| rng.gen_range(-scale..scale)).collect::<Vec<f64>>();
    let trans = v(k * k);
    let start = v(k);
    let stop = v(k);
    Transitions::new(k, trans, start, stop)
}

/// Emissions and transitions drawn from a small integer grid so exact ties
/// are common.
pub fn tied_instance(rng: &mut DetRng, l: usize, k: usize) -> (Tensor, Transitions) {
    let mut v = |n: usize| (0..n).map(|_| rng.gen_range(-1i32..=1) as f64).collect::<Vec<f64>>();
    let e = Tensor::matrix(l, k, v(l * k)).unwrap();
    let trans = v(k * k);
    let start = v(k);
    let stop = v(k);
    (e, Transitions::new(k, trans, start, stop))
}

pub fn rng(seed: u64) -> DetRng {
    seeded_rng(seed)
}

/// One scorer fixture row: gold and predicted label columns per sentence.
pub struct ScorerFixture {
    pub gold: Vec<Vec<Label>>,
    pub predicted: Vec<Vec<Label>>,
}

pub fn fixture_path(name: &str) -> std::path::PathBuf {
    std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("tests").join("fixtures").join(name)
}

pub fn load_scorer_fixture() -> ScorerFixture {
    let text = std::fs::read_to_string(fixture_path("scorer_cases.txt")).unwrap();
    let mut fx = ScorerFixture { gold: Vec::new(), predicted: Vec::new() };
    let (mut g, mut p) = (Vec::new(), Vec::new());
    for line in text.lines().chain(std::iter::once("")) {
        if line.starts_with('#') {
            continue;
        }
        let cols: Vec<&str> = line.split_whitespace().collect();
        if cols.is_empty() {
            if !g.is_empty() {
                fx.gold.push(std::mem::take(&mut g));
                fx.predicted.push(std::mem::take(&mut p));
            }
            continue;
        }
        g.push(cols[1].parse().unwrap());
        p.push(cols[2].parse().unwrap());
    }
    fx
}

/// Expected rows as `(type, counts, "P R F1" formatted to 2 decimals)`.
pub fn load_scorer_expected() -> Vec<(String, SpanCounts, String)> {
    let text = std::fs::read_to_string(fixture_path("scorer_cases.expected")).unwrap();
    text.lines()
        .map(|line| {
            let kv: std::collections::HashMap<&str, &str> = line.split(' ').filter_map(|f| f.split_once('=')).collect();
            let counts = SpanCounts {
                gold: kv["gold"].parse().unwrap(),
                predicted: kv["predicted"].parse().unwrap(),
                correct: kv["correct"].parse().unwrap(),
            };
            (kv["type"].to_string(), counts, format!("{} {} {}", kv["precision"], kv["recall"], kv["f1"]))
        })
        .collect()
}
