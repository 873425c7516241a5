//! Effective run settings: built-in defaults, then `MORPHOTAG_SEED`, then
//! the config file, then command-line flags.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use morphotag::model::{CharMode, ModelConfig};
use morphotag::tagset::{scheme_dim, FeatureScheme};
use morphotag::train::{ClipMode, TrainConfig};

pub const SEED_ENV: &str = "MORPHOTAG_SEED";

/// Every key accepted in a config file. Flag names are the same keys with a
/// leading `--`.
pub const KEYS: &[&str] = &[
    "train",
    "dev",
    "test",
    "input",
    "vectors",
    "tagset-map",
    "lexicon",
    "out",
    "model",
    "confusion",
    "scheme",
    "morph",
    "script-feature",
    "lexicon-feature",
    "bio-mask",
    "freeze-embeddings",
    "seed",
    "lr",
    "lr-decay",
    "beta1",
    "beta2",
    "epsilon",
    "clip",
    "clip-mode",
    "batch-size",
    "max-epochs",
    "patience",
    "bucket",
    "dropout",
    "char-mode",
    "char-dim",
    "char-hidden",
    "word-hidden",
    "grid",
    "parallel",
];

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Settings {
    values: BTreeMap<String, String>,
    /// Where each value came from, for the effective-config echo.
    sources: BTreeMap<String, &'static str>,
}

impl Settings {
    fn set(&mut self, key: &str, value: String, source: &'static str) {
        self.values.insert(key.to_string(), value);
        self.sources.insert(key.to_string(), source);
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    pub fn path(&self, key: &str) -> Option<PathBuf> {
        self.get(key).map(PathBuf::from)
    }

    /// A path that must be present and exist.
    pub fn required_path(&self, key: &str) -> Result<PathBuf, String> {
        let p = self.path(key).ok_or_else(|| format!("missing required --{key}"))?;
        if !p.exists() {
            return Err(format!("--{key}: {} does not exist", p.display()));
        }
        Ok(p)
    }

    /// An optional input path that must exist when given.
    pub fn existing_path(&self, key: &str) -> Result<Option<PathBuf>, String> {
        match self.path(key) {
            Some(p) if !p.exists() => Err(format!("--{key}: {} does not exist", p.display())),
            other => Ok(other),
        }
    }

    pub fn parsed<T: FromStr>(&self, key: &str) -> Result<Option<T>, String>
    where
        T::Err: std::fmt::Display,
    {
        self.get(key).map(|v| v.parse::<T>().map_err(|e| format!("{key} = {v:?}: {e}"))).transpose()
    }

    pub fn flag(&self, key: &str) -> Result<bool, String> {
        Ok(self.parsed::<bool>(key)?.unwrap_or(false))
    }

    /// `key=value (source)` lines.
    pub fn echo(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.values {
            let _ = writeln!(out, "config {k}={v} source={}", self.sources[k]);
        }
        out
    }
}

/// Parses `key = value` lines; `#` starts a comment line.
pub fn parse_config_file(text: &str) -> Result<Vec<(String, String)>, String> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| format!("config line {}: expected key = value", n + 1))?;
        let (k, v) = (k.trim(), v.trim());
        if !KEYS.contains(&k) {
            return Err(format!("config line {}: unknown key {k:?}", n + 1));
        }
        out.push((k.to_string(), v.to_string()));
    }
    Ok(out)
}

/// Merges the layers. `flags` holds only values given on the command line.
pub fn resolve(
    env_seed: Option<String>,
    config: Option<&Path>,
    flags: &[(&'static str, String)],
) -> Result<Settings, String> {
    let mut s = Settings::default();
    if let Some(seed) = env_seed {
        s.set("seed", seed, "env");
    }
    if let Some(path) = config {
        let text = std::fs::read_to_string(path).map_err(|e| format!("--config {}: {e}", path.display()))?;
        for (k, v) in parse_config_file(&text)? {
            s.set(&k, v, "file");
        }
    }
    for (k, v) in flags {
        debug_assert!(KEYS.contains(k), "flag {k} missing from KEYS");
        s.set(k, v.clone(), "flag");
    }
    Ok(s)
}

/// Model settings other than `word_dim`, which comes from the vectors.
pub fn model_config(s: &Settings) -> Result<ModelConfig, String> {
    let mut c = ModelConfig::default();
    if let Some(scheme) = s.parsed::<FeatureScheme>("scheme")? {
        c.scheme = scheme;
    }
    if let Some(morph) = s.parsed::<bool>("morph")? {
        c.scheme.morph = morph;
    }
    if let Some(v) = s.parsed::<bool>("script-feature")? {
        c.scheme.script = v;
    }
    if let Some(v) = s.parsed::<bool>("lexicon-feature")? {
        c.scheme.lexicon = v;
    }
    c.bio_mask = s.flag("bio-mask")?;
    c.freeze_embeddings = s.flag("freeze-embeddings")?;
    if let Some(v) = s.parsed("dropout")? {
        c.dropout = v;
    }
    if let Some(v) = s.parsed::<CharMode>("char-mode")? {
        c.char_mode = v;
    }
    if let Some(v) = s.parsed("char-dim")? {
        c.char_dim = v;
    }
    if let Some(v) = s.parsed("char-hidden")? {
        c.char_hidden = v;
    }
    if let Some(v) = s.parsed("word-hidden")? {
        c.word_hidden = v;
    }
    Ok(c)
}

pub fn train_config(s: &Settings) -> Result<TrainConfig, String> {
    let mut c = TrainConfig::default();
    if let Some(v) = s.parsed("seed")? {
        c.seed = v;
    }
    if let Some(v) = s.parsed("lr")? {
        c.initial_lr = v;
    }
    if let Some(v) = s.parsed("lr-decay")? {
        c.lr_decay = v;
    }
    if let Some(v) = s.parsed("beta1")? {
        c.beta1 = v;
    }
    if let Some(v) = s.parsed("beta2")? {
        c.beta2 = v;
    }
    if let Some(v) = s.parsed("epsilon")? {
        c.epsilon = v;
    }
    match s.get("clip") {
        Some("off") | Some("none") => c.clip_value = None,
        Some(_) => c.clip_value = s.parsed("clip")?,
        None => {}
    }
    match s.get("clip-mode") {
        Some("value") | None => {}
        Some("norm") => c.clip_mode = ClipMode::Norm,
        Some(other) => return Err(format!("clip-mode = {other:?}: expected value or norm")),
    }
    if let Some(v) = s.parsed("batch-size")? {
        c.batch_size = v;
    }
    if let Some(v) = s.parsed("max-epochs")? {
        c.max_epochs = v;
    }
    if let Some(v) = s.parsed("patience")? {
        c.patience = v;
    }
    c.bucket_by_length = s.flag("bucket")?;
    c.validate().map_err(|e| e.to_string())?;
    Ok(c)
}

/// Derived values worth echoing next to the raw settings.
pub fn describe(model: &ModelConfig, train: &TrainConfig) -> String {
    format!(
        "config scheme={} scheme_dim={} char_mode={} dropout={} seed={} lr={} lr_decay={} batch_size={} max_epochs={} patience={}\n",
        model.scheme,
        scheme_dim(&model.scheme),
        model.char_mode,
        model.dropout,
        train.seed,
        train.initial_lr,
        train.lr_decay,
        train.batch_size,
        train.max_epochs,
        train.patience
    )
}
