//! The tagger network: per-token inputs (word vector, character Bi-LSTM
//! embedding, grammatical vector), a word-level Bi-LSTM, a linear projection
//! to per-label emission scores and CRF transition scores.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use thiserror::Error;

use crate::corpus::{Label, Sentence, LABEL_COUNT};
use crate::crf::{self, CrfError, Transitions};
use crate::diffcore::{glorot_uniform, Axis, DetRng, DiffError, ParamId, ParamStore, Tape, Tensor, Var};
use crate::embeddings::{CharVocabulary, WordVectorTable, WordVocabulary};
use crate::tagset::{
    grammatical_vector, parse_tag, scheme_dim, CombinedReading, FeatureScheme, Lexicon, PosScheme, TagsetError,
    TagsetMapping,
};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("line {line}: token {surface:?} has no positional tag but the feature scheme needs one")]
    MissingTag { line: usize, surface: String },
    #[error("empty sentence")]
    EmptySentence,
    #[error("token {0:?} has no gold label")]
    MissingLabel(String),
    #[error("word vectors have dimension {found}, model expects {expected}")]
    WordDim { expected: usize, found: usize },
    #[error("input vector has length {found}, expected {expected}")]
    InputDim { expected: usize, found: usize },
    #[error("invalid model configuration: {0}")]
    BadConfig(String),
    #[error("checkpoint lacks parameter {0:?}")]
    MissingParameter(String),
    #[error(transparent)]
    Tagset(#[from] TagsetError),
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Crf(#[from] CrfError),
}

/// Which character-LSTM directions feed the input vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CharMode {
    None,
    Forward,
    Backward,
    Both,
}

impl CharMode {
    pub fn directions(self) -> usize {
        match self {
            CharMode::None => 0,
            CharMode::Forward | CharMode::Backward => 1,
            CharMode::Both => 2,
        }
    }

    fn has_forward(self) -> bool {
        matches!(self, CharMode::Forward | CharMode::Both)
    }

    fn has_backward(self) -> bool {
        matches!(self, CharMode::Backward | CharMode::Both)
    }
}

impl fmt::Display for CharMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CharMode::None => "none",
            CharMode::Forward => "fwd",
            CharMode::Backward => "bwd",
            CharMode::Both => "bi",
        })
    }
}

impl FromStr for CharMode {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "none" => Ok(CharMode::None),
            "fwd" => Ok(CharMode::Forward),
            "bwd" => Ok(CharMode::Backward),
            "bi" => Ok(CharMode::Both),
            other => Err(ModelError::BadConfig(format!("unknown char mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub word_dim: usize,
    pub char_dim: usize,
    /// Per direction.
    pub char_hidden: usize,
    /// Per direction.
    pub word_hidden: usize,
    pub char_mode: CharMode,
    pub scheme: FeatureScheme,
    pub dropout: f64,
    pub tag_count: usize,
    pub bio_mask: bool,
    pub freeze_embeddings: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            word_dim: 300,
            char_dim: 25,
            char_hidden: 50,
            word_hidden: 100,
            char_mode: CharMode::Both,
            scheme: FeatureScheme {
                pos: Some(PosScheme::Pos3Plus11),
                morph: true,
                script: false,
                lexicon: false,
                reading: CombinedReading::Concatenation,
            },
            dropout: 0.5,
            tag_count: LABEL_COUNT,
            bio_mask: false,
            freeze_embeddings: false,
        }
    }
}

impl ModelConfig {
    pub fn char_output_dim(&self) -> usize {
        self.char_mode.directions() * self.char_hidden
    }

    pub fn input_dim(&self) -> usize {
        self.word_dim + self.char_output_dim() + scheme_dim(&self.scheme)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::BadConfig(m.to_string()));
        if self.word_dim == 0 || self.word_hidden == 0 {
            return bad("word-dim and word-hidden must be positive");
        }
        if self.char_mode != CharMode::None && (self.char_dim == 0 || self.char_hidden == 0) {
            return bad("char-dim and char-hidden must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        if self.tag_count != LABEL_COUNT {
            return bad("tag count must be 9");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LstmIds {
    /// `input x 4H`, gate order `[input, forget, cell, output]`.
    pub w_in: ParamId,
    /// `H x 4H`.
    pub w_rec: ParamId,
    /// `1 x 4H`.
    pub bias: ParamId,
    pub hidden: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamIds {
    pub char_emb: Option<ParamId>,
    pub char_fwd: Option<LstmIds>,
    pub char_bwd: Option<LstmIds>,
    pub word_emb: ParamId,
    pub word_fwd: LstmIds,
    pub word_bwd: LstmIds,
    pub proj_w: ParamId,
    pub proj_b: ParamId,
    pub crf_trans: ParamId,
    pub crf_start: ParamId,
    pub crf_stop: ParamId,
}

fn add_lstm<R: Rng + ?Sized>(
    store: &mut ParamStore,
    prefix: &str,
    input: usize,
    hidden: usize,
    rng: &mut R,
) -> Result<LstmIds, DiffError> {
    let w_in = store.add(format!("{prefix}.w_in"), glorot_uniform(input, 4 * hidden, rng))?;
    let w_rec = store.add(format!("{prefix}.w_rec"), glorot_uniform(hidden, 4 * hidden, rng))?;
    let mut bias = vec![0.0; 4 * hidden];
    bias[hidden..2 * hidden].fill(1.0);
    let bias = store.add(format!("{prefix}.bias"), Tensor::row(bias))?;
    Ok(LstmIds { w_in, w_rec, bias, hidden })
}

fn lstm_ids(store: &ParamStore, prefix: &str, hidden: usize) -> Result<LstmIds, ModelError> {
    Ok(LstmIds {
        w_in: lookup_id(store, &format!("{prefix}.w_in"))?,
        w_rec: lookup_id(store, &format!("{prefix}.w_rec"))?,
        bias: lookup_id(store, &format!("{prefix}.bias"))?,
        hidden,
    })
}

fn lookup_id(store: &ParamStore, name: &str) -> Result<ParamId, ModelError> {
    store.id(name).ok_or_else(|| ModelError::MissingParameter(name.to_string()))
}

/// A complete tagger: configuration, parameters and the vocabularies and
/// tables needed to turn a sentence into inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub ids: ParamIds,
    pub chars: CharVocabulary,
    pub words: WordVocabulary,
    pub mapping: TagsetMapping,
    pub lexicon: Option<Lexicon>,
}

impl Model {
    /// Fresh parameters: uniform Glorot matrices, zero biases except the
    /// forget gate (1.0), zero start/stop scores. Word rows come from `table`.
    pub fn new<R: Rng + ?Sized>(
        config: ModelConfig,
        chars: CharVocabulary,
        words: WordVocabulary,
        table: &WordVectorTable,
        mapping: TagsetMapping,
        lexicon: Option<Lexicon>,
        rng: &mut R,
    ) -> Result<Model, ModelError> {
        config.validate()?;
        if table.dim() != config.word_dim {
            return Err(ModelError::WordDim { expected: config.word_dim, found: table.dim() });
        }
        let mut store = ParamStore::new();
        let char_emb = if config.char_mode == CharMode::None {
            None
        } else {
            Some(store.add("char_emb", glorot_uniform(chars.len(), config.char_dim, rng))?)
        };
        let char_fwd = if config.char_mode.has_forward() {
            Some(add_lstm(&mut store, "char_lstm.fwd", config.char_dim, config.char_hidden, rng)?)
        } else {
            None
        };
        let char_bwd = if config.char_mode.has_backward() {
            Some(add_lstm(&mut store, "char_lstm.bwd", config.char_dim, config.char_hidden, rng)?)
        } else {
            None
        };
        let word_emb =
            store.add("word_emb", Tensor::matrix(words.len(), config.word_dim, words.initial_rows(table))?)?;
        store.get_mut(word_emb).trainable = !config.freeze_embeddings;
        let input = config.input_dim();
        let word_fwd = add_lstm(&mut store, "word_lstm.fwd", input, config.word_hidden, rng)?;
        let word_bwd = add_lstm(&mut store, "word_lstm.bwd", input, config.word_hidden, rng)?;
        let k = config.tag_count;
        let proj_w = store.add("proj.w", glorot_uniform(2 * config.word_hidden, k, rng))?;
        let proj_b = store.add("proj.b", Tensor::zeros(&[1, k]))?;
        let crf_trans = store.add("crf.trans", glorot_uniform(k, k, rng))?;
        let crf_start = store.add("crf.start", Tensor::zeros(&[1, k]))?;
        let crf_stop = store.add("crf.stop", Tensor::zeros(&[1, k]))?;
        let ids = ParamIds {
            char_emb,
            char_fwd,
            char_bwd,
            word_emb,
            word_fwd,
            word_bwd,
            proj_w,
            proj_b,
            crf_trans,
            crf_start,
            crf_stop,
        };
        Ok(Model { config, params: store, ids, chars, words, mapping, lexicon })
    }

    /// Reassembles a model from stored parameters (checkpoint loading).
    pub fn from_parts(
        config: ModelConfig,
        params: ParamStore,
        chars: CharVocabulary,
        words: WordVocabulary,
        mapping: TagsetMapping,
        lexicon: Option<Lexicon>,
    ) -> Result<Model, ModelError> {
        config.validate()?;
        let char_emb = match config.char_mode {
            CharMode::None => None,
            _ => Some(lookup_id(&params, "char_emb")?),
        };
        let char_fwd = if config.char_mode.has_forward() {
            Some(lstm_ids(&params, "char_lstm.fwd", config.char_hidden)?)
        } else {
            None
        };
        let char_bwd = if config.char_mode.has_backward() {
            Some(lstm_ids(&params, "char_lstm.bwd", config.char_hidden)?)
        } else {
            None
        };
        let ids = ParamIds {
            char_emb,
            char_fwd,
            char_bwd,
            word_emb: lookup_id(&params, "word_emb")?,
            word_fwd: lstm_ids(&params, "word_lstm.fwd", config.word_hidden)?,
            word_bwd: lstm_ids(&params, "word_lstm.bwd", config.word_hidden)?,
            proj_w: lookup_id(&params, "proj.w")?,
            proj_b: lookup_id(&params, "proj.b")?,
            crf_trans: lookup_id(&params, "crf.trans")?,
            crf_start: lookup_id(&params, "crf.start")?,
            crf_stop: lookup_id(&params, "crf.stop")?,
        };
        let mut model = Model { config, params, ids, chars, words, mapping, lexicon };
        let frozen = model.config.freeze_embeddings;
        model.params.get_mut(model.ids.word_emb).trainable = !frozen;
        Ok(model)
    }

    /// Runs one LSTM direction over the rows of `xs`; returns the hidden
    /// state for each position in original order.
    fn lstm_run(&self, tape: &mut Tape, lstm: &LstmIds, xs: Var, reverse: bool) -> Result<Vec<Var>, ModelError> {
        let steps = tape.value(xs).rows();
        let h = lstm.hidden;
        let w_in = tape.param(lstm.w_in);
        let w_rec = tape.param(lstm.w_rec);
        let bias = tape.param(lstm.bias);
        let projected = tape.matmul(xs, w_in)?;
        let projected = tape.add_row(projected, bias)?;

        let mut outputs: Vec<Option<Var>> = vec![None; steps];
        let mut state: Option<(Var, Var)> = None;
        let order: Vec<usize> = if reverse { (0..steps).rev().collect() } else { (0..steps).collect() };
        for t in order {
            let mut gates = tape.slice(projected, Axis::Rows, t, t + 1)?;
            if let Some((h_prev, _)) = state {
                let rec = tape.matmul(h_prev, w_rec)?;
                gates = tape.add(gates, rec)?;
            }
            let i = tape.slice(gates, Axis::Cols, 0, h)?;
            let i = tape.sigmoid(i)?;
            let f = tape.slice(gates, Axis::Cols, h, 2 * h)?;
            let f = tape.sigmoid(f)?;
            let g = tape.slice(gates, Axis::Cols, 2 * h, 3 * h)?;
            let g = tape.tanh(g)?;
            let o = tape.slice(gates, Axis::Cols, 3 * h, 4 * h)?;
            let o = tape.sigmoid(o)?;
            let mut c = tape.mul(i, g)?;
            if let Some((_, c_prev)) = state {
                let kept = tape.mul(f, c_prev)?;
                c = tape.add(kept, c)?;
            }
            let c_act = tape.tanh(c)?;
            let h_t = tape.mul(o, c_act)?;
            outputs[t] = Some(h_t);
            state = Some((h_t, c));
        }
        Ok(outputs.into_iter().map(|v| v.expect("every step visited")).collect())
    }

    /// Character embedding: last forward state (suffix) then first-position
    /// backward state (prefix). `None` when characters are disabled.
    pub fn char_embed(&self, tape: &mut Tape, word: &str) -> Result<Option<Var>, ModelError> {
        let Some(emb) = self.ids.char_emb else { return Ok(None) };
        let indices = self.chars.encode(word);
        if indices.is_empty() {
            return Err(ModelError::EmptySentence);
        }
        let table = tape.param(emb);
        let xs = tape.gather(table, &indices)?;
        let mut parts = Vec::with_capacity(2);
        if let Some(fwd) = &self.ids.char_fwd {
            let hs = self.lstm_run(tape, fwd, xs, false)?;
            parts.push(*hs.last().expect("non-empty word"));
        }
        if let Some(bwd) = &self.ids.char_bwd {
            let hs = self.lstm_run(tape, bwd, xs, true)?;
            parts.push(hs[0]);
        }
        Ok(Some(if parts.len() == 1 { parts[0] } else { tape.concat(&parts, Axis::Cols)? }))
    }

    fn word_vector(&self, tape: &mut Tape, word: &str, table: Option<&WordVectorTable>) -> Result<Var, ModelError> {
        let row = match self.words.resolve(word) {
            Some(row) => row,
            None => match table.and_then(|t| t.resolve(word).map(|i| t.row(i))) {
                Some(v) => {
                    if v.len() != self.config.word_dim {
                        return Err(ModelError::WordDim { expected: self.config.word_dim, found: v.len() });
                    }
                    return Ok(tape.constant(Tensor::row(v.to_vec()))?);
                }
                None => 0,
            },
        };
        let emb = tape.param(self.ids.word_emb);
        Ok(tape.gather(emb, &[row])?)
    }

    /// Grammatical vector for one token.
    pub fn grammatical_features(&self, surface: &str, tag: Option<&str>, line: usize) -> Result<Vec<f64>, ModelError> {
        let scheme = &self.config.scheme;
        let parsed = if scheme.needs_tags() {
            let raw = tag.ok_or_else(|| ModelError::MissingTag { line, surface: surface.to_string() })?;
            Some(parse_tag(raw, &self.mapping)?)
        } else {
            None
        };
        Ok(grammatical_vector(parsed.as_ref(), scheme, surface, self.lexicon.as_ref()))
    }

    /// `L x input_dim` matrix of `word ⊕ char ⊕ grammatical` rows, with
    /// dropout applied when `dropout_rng` is given.
    pub fn encode_inputs(
        &self,
        tape: &mut Tape,
        sentence: &Sentence,
        table: Option<&WordVectorTable>,
        dropout_rng: Option<&mut DetRng>,
    ) -> Result<Var, ModelError> {
        if sentence.is_empty() {
            return Err(ModelError::EmptySentence);
        }
        let mut rows = Vec::with_capacity(sentence.len());
        for token in &sentence.tokens {
            let mut parts = vec![self.word_vector(tape, &token.surface, table)?];
            if let Some(c) = self.char_embed(tape, &token.surface)? {
                parts.push(c);
            }
            let gram = self.grammatical_features(&token.surface, token.tag.as_deref(), token.line)?;
            if !gram.is_empty() {
                parts.push(tape.constant(Tensor::row(gram))?);
            }
            rows.push(if parts.len() == 1 { parts[0] } else { tape.concat(&parts, Axis::Cols)? });
        }
        let inputs = tape.concat(&rows, Axis::Rows)?;
        let width = tape.value(inputs).cols();
        if width != self.config.input_dim() {
            return Err(ModelError::InputDim { expected: self.config.input_dim(), found: width });
        }
        match dropout_rng {
            Some(rng) => Ok(tape.dropout(inputs, self.config.dropout, rng, true)?),
            None => Ok(inputs),
        }
    }

    /// Contextual vectors `L x 2H`: forward state then backward state per token.
    pub fn bilstm_encode(&self, tape: &mut Tape, inputs: Var) -> Result<Var, ModelError> {
        let fwd = self.lstm_run(tape, &self.ids.word_fwd, inputs, false)?;
        let bwd = self.lstm_run(tape, &self.ids.word_bwd, inputs, true)?;
        let fwd = tape.concat(&fwd, Axis::Rows)?;
        let bwd = tape.concat(&bwd, Axis::Rows)?;
        Ok(tape.concat(&[fwd, bwd], Axis::Cols)?)
    }

    /// Emission scores `L x 9` on the tape.
    pub fn emissions_on_tape(
        &self,
        tape: &mut Tape,
        sentence: &Sentence,
        table: Option<&WordVectorTable>,
        dropout_rng: Option<&mut DetRng>,
    ) -> Result<Var, ModelError> {
        let inputs = self.encode_inputs(tape, sentence, table, dropout_rng)?;
        let context = self.bilstm_encode(tape, inputs)?;
        let w = tape.param(self.ids.proj_w);
        let b = tape.param(self.ids.proj_b);
        let scores = tape.matmul(context, w)?;
        Ok(tape.add_row(scores, b)?)
    }

    /// CRF negative log-likelihood of the sentence's gold labels.
    pub fn loss_on_tape(
        &self,
        tape: &mut Tape,
        sentence: &Sentence,
        table: Option<&WordVectorTable>,
        dropout_rng: Option<&mut DetRng>,
    ) -> Result<Var, ModelError> {
        let gold: Vec<usize> = sentence
            .tokens
            .iter()
            .map(|t| t.label.map(Label::index).ok_or_else(|| ModelError::MissingLabel(t.surface.clone())))
            .collect::<Result<_, _>>()?;
        let emissions = self.emissions_on_tape(tape, sentence, table, dropout_rng)?;
        let trans = tape.param(self.ids.crf_trans);
        let start = tape.param(self.ids.crf_start);
        let stop = tape.param(self.ids.crf_stop);
        let mask = self.config.bio_mask.then(crf::bio_mask);
        Ok(crf::nll_on_tape(tape, emissions, trans, start, stop, &gold, mask.as_ref())?)
    }

    /// Inference-time emission scores (no dropout).
    pub fn emissions(&self, sentence: &Sentence, table: Option<&WordVectorTable>) -> Result<Tensor, ModelError> {
        let mut tape = Tape::new(&self.params);
        let e = self.emissions_on_tape(&mut tape, sentence, table, None)?;
        Ok(tape.value(e).clone())
    }

    /// Current transition scores, masked when the BIO constraint is on.
    pub fn transitions(&self) -> Transitions {
        let k = self.config.tag_count;
        let t = Transitions::new(
            k,
            self.params.value(self.ids.crf_trans).data().to_vec(),
            self.params.value(self.ids.crf_start).data().to_vec(),
            self.params.value(self.ids.crf_stop).data().to_vec(),
        );
        if self.config.bio_mask {
            t.plus(&crf::bio_mask())
        } else {
            t
        }
    }

    pub fn predict(&self, sentence: &Sentence, table: Option<&WordVectorTable>) -> Result<Vec<Label>, ModelError> {
        let e = self.emissions(sentence, table)?;
        Ok(crf::decode(&e, &self.transitions())?)
    }
}
