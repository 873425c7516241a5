//! Mini-batch training with Adam, per-epoch learning-rate decay, gradient
//! clipping and early stopping on dev F1, plus the checkpoint file format.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use thiserror::Error;

use crate::corpus::{Corpus, CorpusError};
use crate::diffcore::{derive_seed, seeded_rng, DiffError, Gradients, ParamStore, Tape, Tensor};
use crate::embeddings::{build_char_vocab, CharVocabulary, WordVectorTable, WordVocabulary};
use crate::eval::{evaluate, EvalError, EvalReport};
use crate::model::{CharMode, Model, ModelConfig, ModelError};
use crate::tagset::{FeatureScheme, Lexicon, TagsetMapping};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    BadConfig(String),
    #[error("training corpus is empty")]
    EmptyCorpus,
    #[error("loss became non-finite at epoch {epoch}, batch {batch}")]
    DivergedLoss { epoch: usize, batch: usize },
    #[error("non-finite gradient for parameter {0}")]
    NonFiniteGradient(String),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Diff(#[from] DiffError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClipMode {
    /// Each component clamped to `[-c, c]`.
    Value,
    /// The whole gradient rescaled so its L2 norm is at most `c`.
    Norm,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub initial_lr: f64,
    pub lr_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// `None` disables clipping.
    pub clip_value: Option<f64>,
    pub clip_mode: ClipMode,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    /// Sort each epoch's batches by sentence length after shuffling.
    pub bucket_by_length: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            initial_lr: 0.001,
            lr_decay: 0.97,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            clip_value: Some(1.0),
            clip_mode: ClipMode::Value,
            batch_size: 20,
            max_epochs: 100,
            patience: 5,
            seed: crate::diffcore::DEFAULT_SEED,
            bucket_by_length: false,
        }
    }
}

impl TrainConfig {
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::BadConfig(m.to_string()));
        if !(self.initial_lr > 0.0) {
            return bad("learning rate must be positive");
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return bad("lr decay must lie in (0, 1]");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("beta1 and beta2 must lie in [0, 1)");
        }
        if !(self.epsilon > 0.0) {
            return bad("epsilon must be positive");
        }
        if matches!(self.clip_value, Some(c) if !(c > 0.0)) {
            return bad("clip value must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch size must be positive");
        }
        if self.patience == 0 {
            return bad("patience must be at least 1");
        }
        Ok(())
    }
}

/// `initial * decay^epoch`, epochs counted from 0.
pub fn epoch_lr(initial: f64, decay: f64, epoch: usize) -> f64 {
    initial * decay.powi(epoch as i32)
}

pub fn clip_value(grads: &mut Gradients, c: f64) {
    for (_, g) in grads.iter_mut() {
        for x in g.data_mut() {
            *x = x.clamp(-c, c);
        }
    }
}

pub fn clip_norm(grads: &mut Gradients, c: f64) {
    let norm = grads.iter().flat_map(|(_, g)| g.data().iter()).map(|x| x * x).sum::<f64>().sqrt();
    if norm > c {
        let scale = c / norm;
        for (_, g) in grads.iter_mut() {
            for x in g.data_mut() {
                *x *= scale;
            }
        }
    }
}

pub fn clip_gradients(grads: &mut Gradients, c: f64, mode: ClipMode) {
    match mode {
        ClipMode::Value => clip_value(grads, c),
        ClipMode::Norm => clip_norm(grads, c),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = params.iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect();
        AdamState { m: zeros.clone(), v: zeros, step: 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper { beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

/// One bias-corrected Adam update of every trainable parameter.
pub fn adam_step(
    params: &mut ParamStore,
    grads: &Gradients,
    state: &mut AdamState,
    lr: f64,
    hyper: AdamHyper,
) -> Result<(), TrainError> {
    for (id, g) in grads.iter() {
        if !g.is_finite() {
            return Err(TrainError::NonFiniteGradient(params.get(id).name.clone()));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - hyper.beta1.powi(t);
    let c2 = 1.0 - hyper.beta2.powi(t);
    for (id, p) in params.iter_mut() {
        if !p.trainable {
            continue;
        }
        let g = grads.get(id).data();
        let m = state.m[id.0].data_mut();
        let v = state.v[id.0].data_mut();
        for (((theta, &gi), mi), vi) in p.value.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mi = hyper.beta1 * *mi + (1.0 - hyper.beta1) * gi;
            *vi = hyper.beta2 * *vi + (1.0 - hyper.beta2) * gi * gi;
            let m_hat = *mi / c1;
            let v_hat = *vi / c2;
            *theta -= lr * m_hat / (v_hat.sqrt() + hyper.epsilon);
        }
    }
    Ok(())
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    /// 1-based.
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub dev: EvalReport,
}

impl fmt::Display for EpochLog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let d = self.dev.overall;
        write!(
            f,
            "epoch={} lr={} loss={:.6} dev_p={:.2} dev_r={:.2} dev_f1={:.2}",
            self.epoch,
            self.lr,
            self.train_loss,
            d.precision(),
            d.recall(),
            d.f1()
        )
    }
}

/// A model together with where it came from in training.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub best_dev_f1: f64,
    /// 1-based epoch the parameters were taken from; 0 for untrained.
    pub epoch: usize,
}

pub struct TrainData<'a> {
    pub train: &'a Corpus,
    pub dev: &'a Corpus,
    pub vectors: &'a WordVectorTable,
    pub mapping: &'a TagsetMapping,
    pub lexicon: Option<&'a Lexicon>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<EpochLog>,
    pub stopped_early: bool,
}

const INIT_STREAM: u64 = 0;
const SHUFFLE_STREAM: u64 = 1;
const DROPOUT_STREAM: u64 = 2;

/// Builds vocabularies from the training split and initializes a model.
pub fn init_model(data: &TrainData, config: &ModelConfig, seed: u64) -> Result<Model, ModelError> {
    let chars = if config.char_mode == CharMode::None {
        CharVocabulary::from_chars(std::iter::empty())
    } else {
        build_char_vocab(data.train)
    };
    let words = WordVocabulary::build(data.train, data.vectors);
    let mut rng = seeded_rng(derive_seed(seed, &[INIT_STREAM]));
    Model::new(config.clone(), chars, words, data.vectors, data.mapping.clone(), data.lexicon.cloned(), &mut rng)
}

/// Trains from scratch. `on_epoch` sees each log line as it is produced.
pub fn train(
    data: &TrainData,
    model_config: &ModelConfig,
    config: &TrainConfig,
    on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    let model = init_model(data, model_config, config.seed)?;
    train_model(model, data, config, on_epoch)
}

/// Trains an already initialized model.
pub fn train_model(
    mut model: Model,
    data: &TrainData,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    if data.train.sentences.is_empty() {
        return Err(TrainError::EmptyCorpus);
    }
    for s in &data.train.sentences {
        s.labels()?;
    }
    let hyper = AdamHyper { beta1: config.beta1, beta2: config.beta2, epsilon: config.epsilon };
    let mut state = AdamState::new(&model.params);
    let mut grads = Gradients::zeros_like(&model.params);
    let mut order: Vec<usize> = (0..data.train.sentences.len()).collect();
    let mut best = Checkpoint { model: model.clone(), best_dev_f1: -1.0, epoch: 0 };
    let mut since_best = 0;
    let mut log = Vec::new();
    let mut stopped_early = false;

    for epoch in 0..config.max_epochs {
        let lr = epoch_lr(config.initial_lr, config.lr_decay, epoch);
        let mut shuffle_rng = seeded_rng(derive_seed(config.seed, &[SHUFFLE_STREAM, epoch as u64]));
        order.sort_unstable();
        order.shuffle(&mut shuffle_rng);
        let mut batches: Vec<&[usize]> = order.chunks(config.batch_size).collect();
        let mut sorted_chunks: Vec<Vec<usize>>;
        if config.bucket_by_length {
            let mut by_len = order.clone();
            by_len.sort_by_key(|&i| data.train.sentences[i].len());
            sorted_chunks = by_len.chunks(config.batch_size).map(<[usize]>::to_vec).collect();
            sorted_chunks.shuffle(&mut shuffle_rng);
            batches = sorted_chunks.iter().map(Vec::as_slice).collect();
        }

        let mut loss_sum = 0.0;
        for (b, batch) in batches.iter().enumerate() {
            grads.clear();
            let scale = 1.0 / batch.len() as f64;
            let mut batch_loss = 0.0;
            for &i in batch.iter() {
                let sentence = &data.train.sentences[i];
                let mut rng = seeded_rng(derive_seed(config.seed, &[DROPOUT_STREAM, epoch as u64, i as u64]));
                let mut tape = Tape::new(&model.params);
                let loss = model.loss_on_tape(&mut tape, sentence, Some(data.vectors), Some(&mut rng))?;
                let value = tape.scalar(loss);
                if !value.is_finite() {
                    return Err(TrainError::DivergedLoss { epoch: epoch + 1, batch: b });
                }
                batch_loss += value;
                tape.backward_into(loss, scale, &mut grads)?;
            }
            if let Some(c) = config.clip_value {
                clip_gradients(&mut grads, c, config.clip_mode);
            }
            adam_step(&mut model.params, &grads, &mut state, lr, hyper)?;
            loss_sum += batch_loss * scale;
        }

        let dev = evaluate(&model, data.dev, Some(data.vectors))?;
        let entry = EpochLog { epoch: epoch + 1, lr, train_loss: loss_sum / batches.len() as f64, dev };
        on_epoch(&entry);
        let f1 = dev.overall.f1();
        log.push(entry);
        if f1 > best.best_dev_f1 {
            best = Checkpoint { model: model.clone(), best_dev_f1: f1, epoch: epoch + 1 };
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.patience {
                stopped_early = true;
                break;
            }
        }
    }
    Ok(TrainOutcome { checkpoint: best, log, stopped_early })
}

// ---------------------------------------------------------------------------
// Checkpoint files

pub const CHECKPOINT_MAGIC: &[u8; 5] = b"MTNER";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    VersionUnsupported(u32),
    #[error("corrupt section {section}: {reason}")]
    CorruptSection { section: String, reason: String },
    #[error("bad metadata: {0}")]
    BadMetadata(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
}

fn corrupt(section: &str, reason: impl Into<String>) -> CheckpointError {
    CheckpointError::CorruptSection { section: section.to_string(), reason: reason.into() }
}

fn metadata(ckpt: &Checkpoint) -> Vec<(&'static str, String)> {
    let m = &ckpt.model;
    let c = &m.config;
    let chars: Vec<String> = m.chars.chars().iter().map(|ch| format!("{:x}", *ch as u32)).collect();
    let lexicon = m.lexicon.as_ref().map(|l| l.sorted_words().join(" "));
    vec![
        ("word_dim", c.word_dim.to_string()),
        ("char_dim", c.char_dim.to_string()),
        ("char_hidden", c.char_hidden.to_string()),
        ("word_hidden", c.word_hidden.to_string()),
        ("char_mode", c.char_mode.to_string()),
        ("scheme", c.scheme.to_string()),
        ("dropout", c.dropout.to_string()),
        ("tag_count", c.tag_count.to_string()),
        ("bio_mask", c.bio_mask.to_string()),
        ("freeze_embeddings", c.freeze_embeddings.to_string()),
        ("best_dev_f1", ckpt.best_dev_f1.to_string()),
        ("epoch", ckpt.epoch.to_string()),
        ("chars", chars.join(" ")),
        ("words", m.words.words().join(" ")),
        ("mapping", m.mapping.entry_lines().join(" ")),
        ("lexicon", lexicon.unwrap_or_else(|| "-".to_string())),
    ]
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

/// Serialized checkpoint bytes.
///
/// Layout: magic, u32 version, u64 metadata length, metadata text
/// (`key=value` lines), u32 metadata crc, u32 section count, then per
/// section: u32 id length, id, u32 rank, u64 dims, f64 data, u32 crc over
/// everything in the section before the crc.
pub fn checkpoint_bytes(ckpt: &Checkpoint) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    put_u32(&mut out, CHECKPOINT_VERSION);
    let mut text = String::new();
    for (k, v) in metadata(ckpt) {
        text.push_str(k);
        text.push('=');
        text.push_str(&v);
        text.push('\n');
    }
    put_u64(&mut out, text.len() as u64);
    out.extend_from_slice(text.as_bytes());
    put_u32(&mut out, crc32fast::hash(text.as_bytes()));
    put_u32(&mut out, ckpt.model.params.len() as u32);
    for (_, p) in ckpt.model.params.iter() {
        let start = out.len();
        put_u32(&mut out, p.name.len() as u32);
        out.extend_from_slice(p.name.as_bytes());
        put_u32(&mut out, p.value.shape().len() as u32);
        for &d in p.value.shape() {
            put_u64(&mut out, d as u64);
        }
        for &x in p.value.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
        let crc = crc32fast::hash(&out[start..]);
        put_u32(&mut out, crc);
    }
    out
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<(), CheckpointError> {
    fs::write(path, checkpoint_bytes(ckpt)).map_err(|source| CheckpointError::Io { path: path.to_path_buf(), source })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let bytes = fs::read(path).map_err(|source| CheckpointError::Io { path: path.to_path_buf(), source })?;
    parse_checkpoint(&bytes)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, section: &str) -> Result<&'a [u8], CheckpointError> {
        let end =
            self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| corrupt(section, "truncated"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, section: &str) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4, section)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, section: &str) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8, section)?.try_into().expect("8 bytes")))
    }
}

fn parse_value<T: std::str::FromStr>(map: &[(String, String)], key: &str) -> Result<T, CheckpointError> {
    let raw = map
        .iter()
        .find(|(k, _)| k == key)
        .map(|(_, v)| v.as_str())
        .ok_or_else(|| CheckpointError::BadMetadata(format!("missing key {key}")))?;
    raw.parse().map_err(|_| CheckpointError::BadMetadata(format!("bad value for {key}: {raw:?}")))
}

fn raw_value<'m>(map: &'m [(String, String)], key: &str) -> Result<&'m str, CheckpointError> {
    map.iter()
        .find(|(k, _)| k == key)
        .map(|(_, v)| v.as_str())
        .ok_or_else(|| CheckpointError::BadMetadata(format!("missing key {key}")))
}

fn words_of(s: &str) -> impl Iterator<Item = &str> {
    s.split(' ').filter(|w| !w.is_empty())
}

pub fn parse_checkpoint(bytes: &[u8]) -> Result<Checkpoint, CheckpointError> {
    if bytes.len() < CHECKPOINT_MAGIC.len() || &bytes[..CHECKPOINT_MAGIC.len()] != CHECKPOINT_MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let mut r = Reader { bytes, pos: CHECKPOINT_MAGIC.len() };
    let version = r.u32("header")?;
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::VersionUnsupported(version));
    }
    let meta_len = r.u64("metadata")?;
    let meta_len = usize::try_from(meta_len).map_err(|_| corrupt("metadata", "length overflow"))?;
    let text = r.take(meta_len, "metadata")?;
    if r.u32("metadata")? != crc32fast::hash(text) {
        return Err(corrupt("metadata", "checksum mismatch"));
    }
    let text = std::str::from_utf8(text).map_err(|_| corrupt("metadata", "not UTF-8"))?;
    let mut meta = Vec::new();
    for line in text.lines() {
        let (k, v) = line.split_once('=').ok_or_else(|| CheckpointError::BadMetadata(format!("line {line:?}")))?;
        meta.push((k.to_string(), v.to_string()));
    }

    let scheme: FeatureScheme =
        raw_value(&meta, "scheme")?.parse().map_err(|e| CheckpointError::BadMetadata(format!("scheme: {e}")))?;
    let config = ModelConfig {
        word_dim: parse_value(&meta, "word_dim")?,
        char_dim: parse_value(&meta, "char_dim")?,
        char_hidden: parse_value(&meta, "char_hidden")?,
        word_hidden: parse_value(&meta, "word_hidden")?,
        char_mode: parse_value(&meta, "char_mode")?,
        scheme,
        dropout: parse_value(&meta, "dropout")?,
        tag_count: parse_value(&meta, "tag_count")?,
        bio_mask: parse_value(&meta, "bio_mask")?,
        freeze_embeddings: parse_value(&meta, "freeze_embeddings")?,
    };
    let best_dev_f1: f64 = parse_value(&meta, "best_dev_f1")?;
    let epoch: usize = parse_value(&meta, "epoch")?;
    let chars = words_of(raw_value(&meta, "chars")?)
        .map(|h| u32::from_str_radix(h, 16).ok().and_then(char::from_u32))
        .collect::<Option<Vec<char>>>()
        .ok_or_else(|| CheckpointError::BadMetadata("chars".into()))?;
    let chars = CharVocabulary::from_chars(chars);
    let words = WordVocabulary::from_words(words_of(raw_value(&meta, "words")?).map(String::from).collect());
    let mapping_text: Vec<&str> = words_of(raw_value(&meta, "mapping")?).collect();
    let mapping = TagsetMapping::parse(&mapping_text.join("\n"))
        .map_err(|e| CheckpointError::BadMetadata(format!("mapping: {e}")))?;
    let lexicon = match raw_value(&meta, "lexicon")? {
        "-" => None,
        s => Some(Lexicon::from_words(words_of(s))),
    };

    let count = r.u32("sections")?;
    let mut params = ParamStore::new();
    for n in 0..count {
        let start = r.pos;
        let label = format!("#{n}");
        let id_len = r.u32(&label)? as usize;
        let id = std::str::from_utf8(r.take(id_len, &label)?).map_err(|_| corrupt(&label, "id not UTF-8"))?.to_string();
        let rank = r.u32(&id)? as usize;
        if rank > 8 {
            return Err(corrupt(&id, "implausible rank"));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(usize::try_from(r.u64(&id)?).map_err(|_| corrupt(&id, "dimension overflow"))?);
        }
        let numel =
            shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| corrupt(&id, "size overflow"))?;
        let raw = r.take(numel.checked_mul(8).ok_or_else(|| corrupt(&id, "size overflow"))?, &id)?;
        let end = r.pos;
        let crc = r.u32(&id)?;
        if crc != crc32fast::hash(&bytes[start..end]) {
            return Err(corrupt(&id, "checksum mismatch"));
        }
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        let value = Tensor::new(shape, data).map_err(|e| corrupt(&id, e.to_string()))?;
        params.add(id.clone(), value).map_err(|e| corrupt(&id, e.to_string()))?;
    }
    if r.pos != bytes.len() {
        return Err(corrupt("trailer", "unexpected bytes after last section"));
    }

    check_shapes(&config, &params, &chars, &words)?;
    let model = Model::from_parts(config, params, chars, words, mapping, lexicon)?;
    Ok(Checkpoint { model, best_dev_f1, epoch })
}

/// Compares stored parameter names and shapes with what the configuration
/// implies.
fn check_shapes(
    config: &ModelConfig,
    params: &ParamStore,
    chars: &CharVocabulary,
    words: &WordVocabulary,
) -> Result<(), CheckpointError> {
    let empty = WordVectorTable::from_entries(config.word_dim, Vec::new())
        .map_err(|e| CheckpointError::BadMetadata(e.to_string()))?;
    let reference = Model::new(
        config.clone(),
        chars.clone(),
        words.clone(),
        &empty,
        TagsetMapping::empty(),
        None,
        &mut seeded_rng(0),
    )?;
    if reference.params.len() != params.len() {
        return Err(corrupt(
            "parameters",
            format!("expected {} sections, found {}", reference.params.len(), params.len()),
        ));
    }
    for (_, p) in reference.params.iter() {
        let stored = params.id(&p.name).ok_or_else(|| ModelError::MissingParameter(p.name.clone()))?;
        if params.value(stored).shape() != p.value.shape() {
            return Err(corrupt(
                &p.name,
                format!("shape {:?}, expected {:?}", params.value(stored).shape(), p.value.shape()),
            ));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::ParamId;

    fn one_param(v: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("w", Tensor::row(vec![v])).unwrap();
        s
    }

    fn grads_of(store: &ParamStore, g: &[f64]) -> Gradients {
        let mut grads = Gradients::zeros_like(store);
        grads.get_mut(ParamId(0)).data_mut().copy_from_slice(g);
        grads
    }

    #[test]
    fn value_clipping() {
        let mut s = ParamStore::new();
        s.add("w", Tensor::row(vec![0.0; 3])).unwrap();
        let mut g = grads_of(&s, &[-3.0, 0.5, 3.0]);
        clip_value(&mut g, 1.0);
        assert_eq!(g.get(ParamId(0)).data(), &[-1.0, 0.5, 1.0]);
        let mut g = grads_of(&one_param(0.0), &[2.5]);
        clip_value(&mut g, 1.0);
        assert_eq!(g.get(ParamId(0)).data(), &[1.0]);
        let mut g = grads_of(&one_param(0.0), &[-0.3]);
        clip_value(&mut g, 1.0);
        assert_eq!(g.get(ParamId(0)).data(), &[-0.3]);
    }

    #[test]
    fn norm_clipping() {
        let mut s = ParamStore::new();
        s.add("w", Tensor::row(vec![0.0; 2])).unwrap();
        let mut g = grads_of(&s, &[3.0, 4.0]);
        clip_norm(&mut g, 1.0);
        let d = g.get(ParamId(0)).data();
        assert!((d[0] - 0.6).abs() < 1e-15 && (d[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn adam_examples() {
        let mut s = one_param(0.0);
        let mut st = AdamState::new(&s);
        let g = grads_of(&s, &[0.0]);
        adam_step(&mut s, &g, &mut st, 0.001, AdamHyper::default()).unwrap();
        assert_eq!(s.value(ParamId(0)).item(), 0.0);

        let mut s = one_param(0.0);
        let mut st = AdamState::new(&s);
        let g = grads_of(&s, &[1.0]);
        adam_step(&mut s, &g, &mut st, 0.001, AdamHyper::default()).unwrap();
        let d1 = s.value(ParamId(0)).item();
        assert!((d1 + 0.001 / (1.0 + 1e-8)).abs() < 1e-15);
        adam_step(&mut s, &g, &mut st, 0.001, AdamHyper::default()).unwrap();
        let d2 = s.value(ParamId(0)).item() - d1;
        let ratio = d2.abs() / d1.abs();
        assert!((0.99..=1.01).contains(&ratio));
        assert_eq!(st.step, 2);

        let bad = grads_of(&s, &[f64::NAN]);
        assert!(matches!(
            adam_step(&mut s, &bad, &mut st, 0.001, AdamHyper::default()),
            Err(TrainError::NonFiniteGradient(n)) if n == "w"
        ));
    }

    #[test]
    fn frozen_parameters_do_not_move() {
        let mut s = one_param(0.5);
        s.get_mut(ParamId(0)).trainable = false;
        let mut st = AdamState::new(&s);
        let g = grads_of(&s, &[1.0]);
        adam_step(&mut s, &g, &mut st, 0.1, AdamHyper::default()).unwrap();
        assert_eq!(s.value(ParamId(0)).item(), 0.5);
    }

    #[test]
    fn learning_rate_schedule() {
        assert_eq!(epoch_lr(0.001, 0.9, 0), 0.001);
        assert!((epoch_lr(0.001, 0.9, 2) - 0.00081).abs() < 1e-18);
        assert_eq!(epoch_lr(0.001, 1.0, 17), 0.001);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        for bad in [
            TrainConfig { initial_lr: 0.0, ..Default::default() },
            TrainConfig { lr_decay: 1.5, ..Default::default() },
            TrainConfig { beta2: 1.0, ..Default::default() },
            TrainConfig { clip_value: Some(0.0), ..Default::default() },
            TrainConfig { patience: 0, ..Default::default() },
            TrainConfig { batch_size: 0, ..Default::default() },
        ] {
            assert!(bad.validate().is_err());
        }
    }

    #[test]
    fn bad_magic_and_version() {
        assert!(matches!(parse_checkpoint(b"NOTME"), Err(CheckpointError::BadMagic)));
        let mut b = CHECKPOINT_MAGIC.to_vec();
        b.extend_from_slice(&7u32.to_le_bytes());
        assert!(matches!(parse_checkpoint(&b), Err(CheckpointError::VersionUnsupported(7))));
        let mut b = CHECKPOINT_MAGIC.to_vec();
        b.extend_from_slice(&1u32.to_le_bytes());
        assert!(matches!(parse_checkpoint(&b), Err(CheckpointError::CorruptSection { .. })));
    }
}
