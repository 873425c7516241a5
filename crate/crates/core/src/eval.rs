//! Entity-level scoring, the token-level confusion matrix and the ablation
//! harness.

use std::fmt::{self, Write as _};

use rayon::prelude::*;
use thiserror::Error;

use crate::corpus::{extract_spans, Corpus, CorpusError, EntityType, Label, LABEL_COUNT};
use crate::embeddings::WordVectorTable;
use crate::model::{CharMode, Model, ModelConfig, ModelError};
use crate::tagset::{FeatureScheme, Lexicon, PosScheme, TagsetMapping};
use crate::train::{train, TrainConfig, TrainData, TrainError};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("sentence {sentence}: {gold} gold labels but {predicted} predicted")]
    LengthMismatch { sentence: usize, gold: usize, predicted: usize },
    #[error("{gold} gold sentences but {predicted} predicted")]
    SentenceCountMismatch { gold: usize, predicted: usize },
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// `2PR / (P + R)`, or 0 when both are 0.
pub fn f1_score(precision: f64, recall: f64) -> f64 {
    if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    }
}

/// Span counts for one entity type or overall. Rates are percentages.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SpanCounts {
    pub gold: usize,
    pub predicted: usize,
    pub correct: usize,
}

impl SpanCounts {
    pub fn precision(&self) -> f64 {
        if self.predicted == 0 {
            0.0
        } else {
            100.0 * self.correct as f64 / self.predicted as f64
        }
    }

    pub fn recall(&self) -> f64 {
        if self.gold == 0 {
            0.0
        } else {
            100.0 * self.correct as f64 / self.gold as f64
        }
    }

    pub fn f1(&self) -> f64 {
        f1_score(self.precision(), self.recall())
    }

    fn add(&mut self, other: SpanCounts) {
        self.gold += other.gold;
        self.predicted += other.predicted;
        self.correct += other.correct;
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct EvalReport {
    pub overall: SpanCounts,
    /// Indexed by [`EntityType::index`].
    pub per_type: [SpanCounts; 4],
}

impl EvalReport {
    pub fn of(&self, kind: EntityType) -> SpanCounts {
        self.per_type[kind.index()]
    }

    pub fn merge(&mut self, other: &EvalReport) {
        self.overall.add(other.overall);
        for (a, b) in self.per_type.iter_mut().zip(other.per_type) {
            a.add(b);
        }
    }

    /// Aligned text table: overall row then one row per type.
    pub fn table(&self) -> String {
        let mut out =
            format!("{:<8} {:>7} {:>7} {:>7} {:>6} {:>6} {:>6}\n", "type", "P", "R", "F1", "gold", "pred", "corr");
        let mut row = |name: &str, c: SpanCounts| {
            let _ = writeln!(
                out,
                "{:<8} {:>7.2} {:>7.2} {:>7.2} {:>6} {:>6} {:>6}",
                name,
                c.precision(),
                c.recall(),
                c.f1(),
                c.gold,
                c.predicted,
                c.correct
            );
        };
        row("overall", self.overall);
        for kind in EntityType::ALL {
            row(kind.as_str(), self.of(kind));
        }
        out
    }

    /// One `key=value` line per row.
    pub fn key_values(&self) -> String {
        let mut out = String::new();
        let mut line = |name: &str, c: SpanCounts| {
            let _ = writeln!(
                out,
                "type={} precision={:.2} recall={:.2} f1={:.2} gold={} predicted={} correct={}",
                name,
                c.precision(),
                c.recall(),
                c.f1(),
                c.gold,
                c.predicted,
                c.correct
            );
        };
        line("overall", self.overall);
        for kind in EntityType::ALL {
            line(kind.as_str(), self.of(kind));
        }
        out
    }
}

/// Exact-match span scoring of one label sequence pair.
pub fn score_sentence(gold: &[Label], predicted: &[Label]) -> EvalReport {
    let gold_spans = extract_spans(gold);
    let pred_spans = extract_spans(predicted);
    let mut report = EvalReport::default();
    for s in &gold_spans {
        report.per_type[s.kind.index()].gold += 1;
    }
    for s in &pred_spans {
        report.per_type[s.kind.index()].predicted += 1;
        if gold_spans.contains(s) {
            report.per_type[s.kind.index()].correct += 1;
        }
    }
    for c in report.per_type {
        report.overall.add(c);
    }
    report
}

pub fn score_labels(gold: &[Vec<Label>], predicted: &[Vec<Label>]) -> Result<EvalReport, EvalError> {
    if gold.len() != predicted.len() {
        return Err(EvalError::SentenceCountMismatch { gold: gold.len(), predicted: predicted.len() });
    }
    let mut report = EvalReport::default();
    for (i, (g, p)) in gold.iter().zip(predicted).enumerate() {
        if g.len() != p.len() {
            return Err(EvalError::LengthMismatch { sentence: i, gold: g.len(), predicted: p.len() });
        }
        report.merge(&score_sentence(g, p));
    }
    Ok(report)
}

pub fn score(gold: &Corpus, predicted: &[Vec<Label>]) -> Result<EvalReport, EvalError> {
    let gold = gold_labels(gold)?;
    score_labels(&gold, predicted)
}

pub fn gold_labels(corpus: &Corpus) -> Result<Vec<Vec<Label>>, CorpusError> {
    corpus.sentences.iter().map(|s| s.labels()).collect()
}

/// Tags every sentence; sentences are processed in parallel, results keep
/// corpus order.
pub fn predict_corpus(
    model: &Model,
    corpus: &Corpus,
    table: Option<&WordVectorTable>,
) -> Result<Vec<Vec<Label>>, ModelError> {
    corpus.sentences.par_iter().map(|s| model.predict(s, table)).collect()
}

pub fn evaluate(model: &Model, corpus: &Corpus, table: Option<&WordVectorTable>) -> Result<EvalReport, EvalError> {
    let gold = gold_labels(corpus)?;
    let predicted = predict_corpus(model, corpus, table)?;
    score_labels(&gold, &predicted)
}

/// Token-level counts; `counts[pred][gold]`.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub counts: [[usize; LABEL_COUNT]; LABEL_COUNT],
}

impl ConfusionMatrix {
    pub fn get(&self, predicted: Label, gold: Label) -> usize {
        self.counts[predicted.index()][gold.index()]
    }

    pub fn total(&self) -> usize {
        self.counts.iter().flatten().sum()
    }

    pub fn diagonal(&self) -> usize {
        (0..LABEL_COUNT).map(|i| self.counts[i][i]).sum()
    }

    /// Header row and column hold label names; rows are predictions.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("pred\\gold");
        for l in Label::ALL {
            out.push(',');
            out.push_str(l.as_str());
        }
        out.push('\n');
        for p in Label::ALL {
            out.push_str(p.as_str());
            for g in Label::ALL {
                let _ = write!(out, ",{}", self.get(p, g));
            }
            out.push('\n');
        }
        out
    }
}

pub fn confusion(gold: &[Vec<Label>], predicted: &[Vec<Label>]) -> Result<ConfusionMatrix, EvalError> {
    if gold.len() != predicted.len() {
        return Err(EvalError::SentenceCountMismatch { gold: gold.len(), predicted: predicted.len() });
    }
    let mut m = ConfusionMatrix::default();
    for (i, (g, p)) in gold.iter().zip(predicted).enumerate() {
        if g.len() != p.len() {
            return Err(EvalError::LengthMismatch { sentence: i, gold: g.len(), predicted: p.len() });
        }
        for (gl, pl) in g.iter().zip(p) {
            m.counts[pl.index()][gl.index()] += 1;
        }
    }
    Ok(m)
}

/// Which published grid an ablation reproduces.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Grid {
    /// POS schemes, each with and without morphology.
    Schemes,
    /// Component additions, words-only up to the full model.
    Components,
}

impl std::str::FromStr for Grid {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "table2" | "schemes" => Ok(Grid::Schemes),
            "table6" | "components" => Ok(Grid::Components),
            other => Err(format!("unknown grid {other:?} (expected table2 or table6)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationCell {
    pub row: String,
    /// Column label, e.g. "no-morph"; empty for single-column grids.
    pub column: String,
    pub model: ModelConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationSpec {
    pub grid: Grid,
    pub cells: Vec<AblationCell>,
}

impl AblationSpec {
    pub fn new(grid: Grid, base: &ModelConfig) -> Self {
        match grid {
            Grid::Schemes => Self::schemes(base),
            Grid::Components => Self::components(base),
        }
    }

    pub fn schemes(base: &ModelConfig) -> Self {
        let mut cells = Vec::new();
        for pos in PosScheme::ALL {
            for morph in [false, true] {
                let scheme = FeatureScheme { pos: Some(pos), morph, ..base.scheme };
                cells.push(AblationCell {
                    row: format!("Model + {}", pos.name().to_uppercase()),
                    column: if morph { "morph" } else { "no-morph" }.to_string(),
                    model: ModelConfig { char_mode: CharMode::Both, scheme, ..base.clone() },
                });
            }
        }
        AblationSpec { grid: Grid::Schemes, cells }
    }

    pub fn components(base: &ModelConfig) -> Self {
        let plain = FeatureScheme { pos: None, morph: false, ..base.scheme };
        let pos11 = FeatureScheme { pos: Some(PosScheme::Pos11), ..plain };
        let morph = FeatureScheme { morph: true, ..pos11 };
        let full = FeatureScheme { pos: Some(PosScheme::Pos3Plus11), ..morph };
        let rows = [
            ("(1) words only", CharMode::None, plain),
            ("(2) fwd-char + (1)", CharMode::Forward, plain),
            ("(3) bwd-char + (1)", CharMode::Backward, plain),
            ("(4) bi-char + (1)", CharMode::Both, plain),
            ("(5) POS11 + (4)", CharMode::Both, pos11),
            ("(6) morph + (5)", CharMode::Both, morph),
            ("(7) POS3 + (6)", CharMode::Both, full),
        ];
        let cells = rows
            .into_iter()
            .map(|(row, char_mode, scheme)| AblationCell {
                row: row.to_string(),
                column: String::new(),
                model: ModelConfig { char_mode, scheme, ..base.clone() },
            })
            .collect();
        AblationSpec { grid: Grid::Components, cells }
    }
}

pub struct AblationInputs<'a> {
    pub train: &'a Corpus,
    pub dev: &'a Corpus,
    /// Scored with the best-on-dev model; `dev` is used when absent.
    pub test: Option<&'a Corpus>,
    pub vectors: &'a WordVectorTable,
    pub mapping: &'a TagsetMapping,
    pub lexicon: Option<&'a Lexicon>,
}

#[derive(Debug)]
pub struct AblationResult {
    pub cell: AblationCell,
    pub report: Result<EvalReport, CellError>,
}

#[derive(Debug, Error)]
pub enum CellError {
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

fn run_cell(cell: &AblationCell, inputs: &AblationInputs, config: &TrainConfig) -> Result<EvalReport, CellError> {
    let data = TrainData {
        train: inputs.train,
        dev: inputs.dev,
        vectors: inputs.vectors,
        mapping: inputs.mapping,
        lexicon: inputs.lexicon,
    };
    let outcome = train(&data, &cell.model, config, |_| {})?;
    let target = inputs.test.unwrap_or(inputs.dev);
    Ok(evaluate(&outcome.checkpoint.model, target, Some(inputs.vectors))?)
}

/// Trains and scores every cell with the same seed. A failing cell records
/// its error and the remaining cells still run.
pub fn run_ablation(
    spec: &AblationSpec,
    inputs: &AblationInputs,
    config: &TrainConfig,
    parallel: bool,
) -> Vec<AblationResult> {
    let run = |cell: &AblationCell| AblationResult { cell: cell.clone(), report: run_cell(cell, inputs, config) };
    if parallel {
        spec.cells.par_iter().map(run).collect()
    } else {
        spec.cells.iter().map(run).collect()
    }
}

/// Renders results in the layout of the corresponding published table.
pub fn render_ablation(grid: Grid, results: &[AblationResult]) -> String {
    let fmt_f1 = |r: &AblationResult| match &r.report {
        Ok(rep) => format!("{:.2}", rep.overall.f1()),
        Err(_) => "error".to_string(),
    };
    let mut out = String::new();
    match grid {
        Grid::Components => {
            let _ = writeln!(out, "{:<24} {:>7}", "model", "F1");
            for r in results {
                let _ = writeln!(out, "{:<24} {:>7}", r.cell.row, fmt_f1(r));
            }
        }
        Grid::Schemes => {
            let _ = writeln!(out, "{:<20} {:>9} {:>7} {:>7} {:>7}", "model", "no-morph", "F1", "P", "R");
            let mut rows: Vec<&str> = Vec::new();
            for r in results {
                if !rows.contains(&r.cell.row.as_str()) {
                    rows.push(&r.cell.row);
                }
            }
            for row in rows {
                let find = |col: &str| results.iter().find(|r| r.cell.row == row && r.cell.column == col);
                let plain = find("no-morph").map(fmt_f1).unwrap_or_else(|| "-".into());
                let (f1, p, rec) = match find("morph") {
                    Some(AblationResult { report: Ok(rep), .. }) => (
                        format!("{:.2}", rep.overall.f1()),
                        format!("{:.2}", rep.overall.precision()),
                        format!("{:.2}", rep.overall.recall()),
                    ),
                    Some(_) => ("error".into(), "-".into(), "-".into()),
                    None => ("-".into(), "-".into(), "-".into()),
                };
                let _ = writeln!(out, "{:<20} {:>9} {:>7} {:>7} {:>7}", row, plain, f1, p, rec);
            }
        }
    }
    for r in results {
        if let Err(e) = &r.report {
            let _ = writeln!(out, "# {} {}: {}", r.cell.row, r.cell.column, e);
        }
    }
    out
}

/// Machine-readable form: one `key=value` line per cell.
pub fn ablation_key_values(results: &[AblationResult]) -> String {
    let mut out = String::new();
    for r in results {
        let _ = write!(
            out,
            "row={:?} column={:?} scheme={} chars={}",
            r.cell.row, r.cell.column, r.cell.model.scheme, r.cell.model.char_mode
        );
        match &r.report {
            Ok(rep) => {
                let o = rep.overall;
                let _ = writeln!(out, " precision={:.2} recall={:.2} f1={:.2}", o.precision(), o.recall(), o.f1());
            }
            Err(e) => {
                let _ = writeln!(out, " error={:?}", e.to_string());
            }
        }
    }
    out
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.table())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::EntityType::*;
    use crate::corpus::Label::*;

    #[test]
    fn identical_prediction_is_perfect() {
        let gold = vec![vec![Begin(Per), Inside(Per), Outside, Outside, Begin(Loc)]];
        let r = score_labels(&gold, &gold).unwrap();
        assert_eq!(r.overall, SpanCounts { gold: 2, predicted: 2, correct: 2 });
        assert_eq!((r.overall.precision(), r.overall.recall(), r.overall.f1()), (100.0, 100.0, 100.0));
    }

    #[test]
    fn boundary_error_scores_zero() {
        let gold = vec![vec![Begin(Per), Inside(Per)]];
        let pred = vec![vec![Begin(Per), Outside]];
        let r = score_labels(&gold, &pred).unwrap();
        assert_eq!(r.overall.correct, 0);
        assert_eq!((r.overall.precision(), r.overall.recall(), r.overall.f1()), (0.0, 0.0, 0.0));
    }

    #[test]
    fn f1_formula() {
        assert!((f1_score(93.31, 91.12) - 92.20).abs() <= 0.01);
        assert_eq!(f1_score(0.0, 0.0), 0.0);
    }

    #[test]
    fn length_mismatch() {
        let err = score_labels(&[vec![Outside]], &[vec![Outside, Outside]]).unwrap_err();
        assert!(matches!(err, EvalError::LengthMismatch { sentence: 0, gold: 1, predicted: 2 }));
        assert!(confusion(&[vec![Outside]], &[]).is_err());
    }

    #[test]
    fn confusion_orientation() {
        let m = confusion(&[vec![Begin(Per)]], &[vec![Outside]]).unwrap();
        assert_eq!(m.get(Outside, Begin(Per)), 1);
        assert_eq!(m.counts[8][0], 1);
        assert_eq!(m.total(), 1);

        let gold = vec![vec![Begin(Per), Inside(Per), Outside, Begin(Loc), Outside]];
        let perfect = confusion(&gold, &gold).unwrap();
        assert_eq!(perfect.diagonal(), 5);
        assert_eq!(perfect.total(), 5);
    }

    #[test]
    fn confusion_sums() {
        let gold = vec![
            vec![Begin(Per), Inside(Per), Outside, Begin(Org), Inside(Org)],
            vec![Outside, Begin(Loc), Outside, Begin(Misc), Outside],
        ];
        let pred = vec![
            vec![Begin(Per), Outside, Outside, Begin(Loc), Inside(Org)],
            vec![Inside(Per), Begin(Loc), Outside, Outside, Outside],
        ];
        let m = confusion(&gold, &pred).unwrap();
        assert_eq!(m.total(), 10);
        let row_sum: usize = m.counts.iter().map(|r| r.iter().sum::<usize>()).sum();
        let col_sum: usize = (0..9).map(|c| m.counts.iter().map(|r| r[c]).sum::<usize>()).sum();
        assert_eq!((row_sum, col_sum), (10, 10));
        assert_eq!(m.diagonal(), 6);
    }

    #[test]
    fn csv_shape() {
        let csv = ConfusionMatrix::default().to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 10);
        assert!(lines.iter().all(|l| l.split(',').count() == 10));
        assert!(lines[0].starts_with("pred\\gold,B-PER,I-PER"));
        assert!(lines[9].starts_with("O,"));
    }

    #[test]
    fn per_type_sums_to_overall() {
        let gold = vec![vec![Begin(Per), Begin(Org), Inside(Org), Begin(Misc), Outside, Begin(Loc)]];
        let pred = vec![vec![Begin(Per), Begin(Org), Outside, Begin(Misc), Inside(Misc), Begin(Loc)]];
        let r = score_labels(&gold, &pred).unwrap();
        let sum: usize = r.per_type.iter().map(|c| c.correct).sum();
        assert_eq!(sum, r.overall.correct);
        assert_eq!(r.of(Misc).correct, 0);
        assert_eq!(r.of(Org).correct, 0);
    }

    #[test]
    fn report_table_has_five_rows() {
        let r = EvalReport::default();
        assert_eq!(r.table().lines().count(), 6);
        assert_eq!(r.key_values().lines().count(), 5);
        assert!(r.key_values().starts_with("type=overall precision=0.00"));
    }

    #[test]
    fn grids() {
        let base = ModelConfig::default();
        let t2 = AblationSpec::schemes(&base);
        assert_eq!(t2.cells.len(), 14);
        let t6 = AblationSpec::components(&base);
        assert_eq!(t6.cells.len(), 7);
        assert_eq!(t6.cells[0].model.char_mode, CharMode::None);
        assert_eq!(t6.cells[0].model.input_dim(), 300);
        assert_eq!(t6.cells[3].model.input_dim(), 400);
        assert_eq!(t6.cells[6].model.scheme.to_string(), "pos3+11+morph");
    }
}
