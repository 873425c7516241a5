//! Linear-chain CRF: sequence scores, the forward algorithm, marginals,
//! Viterbi decoding and the negative log-likelihood as a tape op.
//!
//! A label sequence `y` over emissions `E` (`L x K`) scores
//! `start[y0] + E[0,y0] + Σ (T[y(t-1), y(t)] + E[t,y(t)]) + stop[y(L-1)]`.

use thiserror::Error;

use crate::corpus::{Label, LABEL_COUNT};
use crate::diffcore::{log_sum_exp, CustomOp, DiffError, Tape, Tensor, Var};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CrfError {
    #[error("{labels} labels for {rows} emission rows")]
    LengthMismatch { labels: usize, rows: usize },
    #[error("emissions are empty")]
    Empty,
    #[error("emissions have {got} columns, transitions expect {expected}")]
    TagCountMismatch { got: usize, expected: usize },
    #[error("label index {0} out of range")]
    BadLabel(usize),
    #[error(transparent)]
    Diff(#[from] DiffError),
}

/// Transition scores between tags plus start and stop scores.
#[derive(Debug, Clone, PartialEq)]
pub struct Transitions {
    k: usize,
    /// Row-major `from x to`.
    pub trans: Vec<f64>,
    pub start: Vec<f64>,
    pub stop: Vec<f64>,
}

impl Transitions {
    pub fn zeros(k: usize) -> Self {
        Transitions { k, trans: vec![0.0; k * k], start: vec![0.0; k], stop: vec![0.0; k] }
    }

    pub fn new(k: usize, trans: Vec<f64>, start: Vec<f64>, stop: Vec<f64>) -> Self {
        assert_eq!(trans.len(), k * k, "transition matrix must be k x k");
        assert_eq!(start.len(), k);
        assert_eq!(stop.len(), k);
        Transitions { k, trans, start, stop }
    }

    pub fn tag_count(&self) -> usize {
        self.k
    }

    #[inline]
    pub fn get(&self, from: usize, to: usize) -> f64 {
        self.trans[from * self.k + to]
    }

    /// Elementwise sum, used to apply a `0 / -inf` mask.
    pub fn plus(&self, mask: &Transitions) -> Transitions {
        let add = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x + y).collect();
        Transitions {
            k: self.k,
            trans: add(&self.trans, &mask.trans),
            start: add(&self.start, &mask.start),
            stop: add(&self.stop, &mask.stop),
        }
    }
}

fn check(emissions: &Tensor, t: &Transitions) -> Result<(usize, usize), CrfError> {
    let (l, k) = (emissions.rows(), emissions.cols());
    if l == 0 || emissions.numel() == 0 {
        return Err(CrfError::Empty);
    }
    if k != t.k {
        return Err(CrfError::TagCountMismatch { got: k, expected: t.k });
    }
    Ok((l, k))
}

pub fn sequence_score(emissions: &Tensor, labels: &[usize], t: &Transitions) -> Result<f64, CrfError> {
    let (l, k) = check(emissions, t)?;
    if labels.len() != l {
        return Err(CrfError::LengthMismatch { labels: labels.len(), rows: l });
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
        return Err(CrfError::BadLabel(bad));
    }
    let mut score = t.start[labels[0]] + emissions.get(0, labels[0]);
    for i in 1..l {
        score += t.get(labels[i - 1], labels[i]);
        score += emissions.get(i, labels[i]);
    }
    Ok(score + t.stop[labels[l - 1]])
}

/// Forward log-scores `alpha[t][j]`.
fn forward(emissions: &Tensor, t: &Transitions, l: usize, k: usize) -> Vec<f64> {
    let mut alpha = vec![0.0; l * k];
    for (j, a) in alpha[..k].iter_mut().enumerate() {
        *a = t.start[j] + emissions.get(0, j);
    }
    let mut scratch = vec![0.0; k];
    for i in 1..l {
        for j in 0..k {
            for (from, s) in scratch.iter_mut().enumerate() {
                *s = alpha[(i - 1) * k + from] + t.get(from, j);
            }
            alpha[i * k + j] = log_sum_exp(&scratch) + emissions.get(i, j);
        }
    }
    alpha
}

/// Backward log-scores `beta[t][i]`, including the stop scores.
fn backward(emissions: &Tensor, t: &Transitions, l: usize, k: usize) -> Vec<f64> {
    let mut beta = vec![0.0; l * k];
    beta[(l - 1) * k..].copy_from_slice(&t.stop);
    let mut scratch = vec![0.0; k];
    for i in (0..l - 1).rev() {
        for from in 0..k {
            for (to, s) in scratch.iter_mut().enumerate() {
                *s = t.get(from, to) + emissions.get(i + 1, to) + beta[(i + 1) * k + to];
            }
            beta[i * k + from] = log_sum_exp(&scratch);
        }
    }
    beta
}

/// `log Σ_y exp(score(y))` over all `K^L` label sequences.
pub fn log_partition(emissions: &Tensor, t: &Transitions) -> Result<f64, CrfError> {
    let (l, k) = check(emissions, t)?;
    let alpha = forward(emissions, t, l, k);
    let last: Vec<f64> = (0..k).map(|j| alpha[(l - 1) * k + j] + t.stop[j]).collect();
    Ok(log_sum_exp(&last))
}

/// Posterior marginals from forward-backward.
#[derive(Debug, Clone, PartialEq)]
pub struct Marginals {
    pub log_z: f64,
    /// `L x K`: `p(y_t = j)`.
    pub unary: Vec<f64>,
    /// `K x K`: `Σ_t p(y_t = i, y_(t+1) = j)`.
    pub pairwise: Vec<f64>,
    pub len: usize,
    pub tags: usize,
}

pub fn marginals(emissions: &Tensor, t: &Transitions) -> Result<Marginals, CrfError> {
    let (l, k) = check(emissions, t)?;
    let alpha = forward(emissions, t, l, k);
    let beta = backward(emissions, t, l, k);
    let last: Vec<f64> = (0..k).map(|j| alpha[(l - 1) * k + j] + t.stop[j]).collect();
    let log_z = log_sum_exp(&last);
    let unary = alpha.iter().zip(&beta).map(|(a, b)| (a + b - log_z).exp()).collect();
    let mut pairwise = vec![0.0; k * k];
    for i in 0..l.saturating_sub(1) {
        for from in 0..k {
            let a = alpha[i * k + from];
            if a == f64::NEG_INFINITY {
                continue;
            }
            for to in 0..k {
                let s = a + t.get(from, to) + emissions.get(i + 1, to) + beta[(i + 1) * k + to] - log_z;
                pairwise[from * k + to] += s.exp();
            }
        }
    }
    Ok(Marginals { log_z, unary, pairwise, len: l, tags: k })
}

/// `log_partition - sequence_score(gold)`; non-negative.
pub fn neg_log_likelihood(emissions: &Tensor, gold: &[usize], t: &Transitions) -> Result<f64, CrfError> {
    let score = sequence_score(emissions, gold, t)?;
    Ok(log_partition(emissions, t)? - score)
}

/// Best label sequence and its score. Ties go to the lower tag index, both
/// at each backpointer and for the final tag.
pub fn viterbi(emissions: &Tensor, t: &Transitions) -> Result<(Vec<usize>, f64), CrfError> {
    let (l, k) = check(emissions, t)?;
    let mut delta: Vec<f64> = (0..k).map(|j| t.start[j] + emissions.get(0, j)).collect();
    let mut next = vec![0.0; k];
    let mut back = vec![0usize; l * k];
    for i in 1..l {
        for j in 0..k {
            let mut best = 0;
            let mut best_score = delta[0] + t.get(0, j);
            for (from, &d) in delta.iter().enumerate().skip(1) {
                let s = d + t.get(from, j);
                if s > best_score {
                    best = from;
                    best_score = s;
                }
            }
            back[i * k + j] = best;
            next[j] = best_score + emissions.get(i, j);
        }
        std::mem::swap(&mut delta, &mut next);
    }
    let mut last = 0;
    let mut best_score = delta[0] + t.stop[0];
    for (j, &d) in delta.iter().enumerate().skip(1) {
        let s = d + t.stop[j];
        if s > best_score {
            last = j;
            best_score = s;
        }
    }
    let mut path = vec![0; l];
    path[l - 1] = last;
    for i in (1..l).rev() {
        path[i - 1] = back[i * k + path[i]];
    }
    Ok((path, best_score))
}

/// `0 / -inf` mask forbidding `start -> I-X` and `Y -> I-X` unless `Y` is
/// `B-X` or `I-X`.
pub fn bio_mask() -> Transitions {
    let mut mask = Transitions::zeros(LABEL_COUNT);
    for to in Label::ALL {
        let Label::Inside(kind) = to else { continue };
        mask.start[to.index()] = f64::NEG_INFINITY;
        for from in Label::ALL {
            let allowed = matches!(from, Label::Begin(x) | Label::Inside(x) if x == kind);
            if !allowed {
                mask.trans[from.index() * LABEL_COUNT + to.index()] = f64::NEG_INFINITY;
            }
        }
    }
    mask
}

/// Negative log-likelihood node. Inputs: emissions `L x K`, transitions
/// `K x K`, start `1 x K`, stop `1 x K`.
struct CrfNll {
    gold: Vec<usize>,
    mask: Option<Transitions>,
}

impl CrfNll {
    fn transitions(&self, trans: &Tensor, start: &Tensor, stop: &Tensor) -> Transitions {
        let t = Transitions::new(start.numel(), trans.data().to_vec(), start.data().to_vec(), stop.data().to_vec());
        match &self.mask {
            Some(m) => t.plus(m),
            None => t,
        }
    }
}

impl CustomOp for CrfNll {
    fn name(&self) -> &'static str {
        "crf_nll"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Tensor> {
        let g = grad.item();
        let (emissions, trans, start, stop) = (inputs[0], inputs[1], inputs[2], inputs[3]);
        let t = self.transitions(trans, start, stop);
        let m = marginals(emissions, &t).expect("shapes checked in forward");
        let (l, k) = (m.len, m.tags);

        let mut d_emis = m.unary.clone();
        let mut d_trans = m.pairwise.clone();
        let mut d_start = m.unary[..k].to_vec();
        let mut d_stop = m.unary[(l - 1) * k..].to_vec();
        for (i, &y) in self.gold.iter().enumerate() {
            d_emis[i * k + y] -= 1.0;
            if i > 0 {
                d_trans[self.gold[i - 1] * k + y] -= 1.0;
            }
        }
        d_start[self.gold[0]] -= 1.0;
        d_stop[self.gold[l - 1]] -= 1.0;

        let scaled = |v: Vec<f64>, shape: &[usize]| {
            Tensor::new(shape.to_vec(), v.into_iter().map(|x| x * g).collect()).expect("shape preserved")
        };
        vec![
            scaled(d_emis, emissions.shape()),
            scaled(d_trans, trans.shape()),
            scaled(d_start, start.shape()),
            scaled(d_stop, stop.shape()),
        ]
    }
}

/// Records the CRF negative log-likelihood of `gold` on the tape.
pub fn nll_on_tape(
    tape: &mut Tape,
    emissions: Var,
    trans: Var,
    start: Var,
    stop: Var,
    gold: &[usize],
    mask: Option<&Transitions>,
) -> Result<Var, CrfError> {
    let op = CrfNll { gold: gold.to_vec(), mask: mask.cloned() };
    let t = op.transitions(tape.value(trans), tape.value(start), tape.value(stop));
    let loss = neg_log_likelihood(tape.value(emissions), gold, &t)?;
    Ok(tape.custom(Box::new(op), &[emissions, trans, start, stop], Tensor::scalar(loss))?)
}

/// Viterbi over a tape value; convenience for decoding.
pub fn decode(emissions: &Tensor, t: &Transitions) -> Result<Vec<Label>, CrfError> {
    let (path, _) = viterbi(emissions, t)?;
    path.into_iter().map(|i| Label::from_index(i).ok_or(CrfError::BadLabel(i))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::{self, log_sum_exp as lse};

    fn emis(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn zero_scores_score_zero() {
        let e = Tensor::zeros(&[3, 2]);
        let t = Transitions::zeros(2);
        for y in [[0, 0, 0], [1, 0, 1], [1, 1, 1]] {
            assert_eq!(sequence_score(&e, &y, &t).unwrap(), 0.0);
        }
    }

    #[test]
    fn single_token_score() {
        let e = emis(&[&[0.5, -1.0, 2.0]]);
        let t = Transitions::new(3, vec![9.0; 9], vec![0.1, 0.2, 0.3], vec![1.0, 2.0, 3.0]);
        assert_eq!(sequence_score(&e, &[2], &t).unwrap(), 0.3 + 2.0 + 3.0);
        let z = log_partition(&e, &t).unwrap();
        assert!((z - lse(&[0.1 + 0.5 + 1.0, 0.2 - 1.0 + 2.0, 0.3 + 2.0 + 3.0])).abs() < 1e-12);
    }

    #[test]
    fn hand_computed_score() {
        let e = emis(&[&[1.0, 2.0, 3.0], &[0.5, 0.25, 0.125], &[-1.0, -2.0, 4.0]]);
        let t = Transitions::new(
            3,
            vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9],
            vec![1.0, 0.0, -1.0],
            vec![0.0, 10.0, 20.0],
        );
        // y = [2, 0, 1]: start 0-1=-1, E 3, T[2][0]=0.7, E 0.5, T[0][1]=0.2, E -2, stop 10
        let s = sequence_score(&e, &[2, 0, 1], &t).unwrap();
        assert!((s - (-1.0 + 3.0 + 0.7 + 0.5 + 0.2 - 2.0 + 10.0)).abs() < 1e-12);
    }

    #[test]
    fn length_mismatch() {
        let e = Tensor::zeros(&[3, 2]);
        let t = Transitions::zeros(2);
        assert_eq!(sequence_score(&e, &[0, 1], &t), Err(CrfError::LengthMismatch { labels: 2, rows: 3 }));
        assert!(neg_log_likelihood(&e, &[0], &t).is_err());
    }

    #[test]
    fn uniform_partition() {
        let e = Tensor::zeros(&[3, 2]);
        let t = Transitions::zeros(2);
        let z = log_partition(&e, &t).unwrap();
        assert!((z - 3.0 * std::f64::consts::LN_2).abs() < 1e-12);
        let nll = neg_log_likelihood(&e, &[1, 0, 1], &t).unwrap();
        assert!((nll - 3.0 * std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn nll_vanishes_when_gold_dominates() {
        let e = emis(&[&[50.0, 0.0], &[0.0, 50.0]]);
        let nll = neg_log_likelihood(&e, &[0, 1], &Transitions::zeros(2)).unwrap();
        assert!((0.0..1e-20).contains(&nll));
    }

    #[test]
    fn viterbi_zero_scores_picks_tag_zero() {
        let (path, score) = viterbi(&Tensor::zeros(&[4, 3]), &Transitions::zeros(3)).unwrap();
        assert_eq!(path, vec![0, 0, 0, 0]);
        assert_eq!(score, 0.0);
    }

    #[test]
    fn viterbi_without_transitions_is_argmax() {
        let e = emis(&[&[0.1, 0.9, 0.3], &[2.0, -1.0, 0.0], &[0.0, 0.0, 0.5]]);
        let (path, score) = viterbi(&e, &Transitions::zeros(3)).unwrap();
        assert_eq!(path, vec![1, 0, 2]);
        assert_eq!(score, sequence_score(&e, &path, &Transitions::zeros(3)).unwrap());
    }

    #[test]
    fn bio_mask_entries() {
        let m = bio_mask();
        let idx = |l: &str| l.parse::<Label>().unwrap().index();
        assert_eq!(m.start[idx("I-PER")], f64::NEG_INFINITY);
        assert_eq!(m.start[idx("B-PER")], 0.0);
        assert_eq!(m.get(idx("B-PER"), idx("I-PER")), 0.0);
        assert_eq!(m.get(idx("I-PER"), idx("I-PER")), 0.0);
        assert_eq!(m.get(idx("B-LOC"), idx("I-PER")), f64::NEG_INFINITY);
        assert_eq!(m.get(idx("O"), idx("I-PER")), f64::NEG_INFINITY);
        assert_eq!(m.get(idx("O"), idx("B-PER")), 0.0);
        assert!(m.stop.iter().all(|&s| s == 0.0));
    }

    #[test]
    fn masked_decoding_is_bio_valid() {
        // Emissions push toward an orphan I-LOC at position 0.
        let mut rows = vec![vec![0.0; 9]; 2];
        rows[0][5] = 5.0;
        rows[1][5] = 5.0;
        let e = Tensor::from_rows(&rows).unwrap();
        let t = Transitions::zeros(9).plus(&bio_mask());
        let labels = decode(&e, &t).unwrap();
        assert!(crate::corpus::bio_violations(&labels).is_empty(), "{labels:?}");
    }

    #[test]
    fn marginals_sum_to_one() {
        let e = emis(&[&[0.3, -0.2], &[1.0, 0.4], &[-0.7, 0.9]]);
        let t = Transitions::new(2, vec![0.5, -0.5, 0.25, 0.0], vec![0.1, 0.0], vec![0.0, 0.3]);
        let m = marginals(&e, &t).unwrap();
        for row in m.unary.chunks(2) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert!((m.pairwise.iter().sum::<f64>() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn tape_loss_matches_direct() {
        let store = diffcore::ParamStore::new();
        let mut tape = Tape::new(&store);
        let e = emis(&[&[0.3, -0.2], &[1.0, 0.4]]);
        let t = Transitions::new(2, vec![0.5, -0.5, 0.25, 0.0], vec![0.1, 0.0], vec![0.0, 0.3]);
        let ev = tape.constant(e.clone()).unwrap();
        let tv = tape.constant(Tensor::matrix(2, 2, t.trans.clone()).unwrap()).unwrap();
        let sv = tape.constant(Tensor::row(t.start.clone())).unwrap();
        let pv = tape.constant(Tensor::row(t.stop.clone())).unwrap();
        let loss = nll_on_tape(&mut tape, ev, tv, sv, pv, &[1, 0], None).unwrap();
        assert_eq!(tape.scalar(loss), neg_log_likelihood(&e, &[1, 0], &t).unwrap());
    }
}
