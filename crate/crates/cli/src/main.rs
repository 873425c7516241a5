use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use morphotag::corpus::{bio_violations, corpus_stats, parse_conll, parse_with_layout, Corpus, Layout, ViolationKind};
use morphotag::embeddings::{load_vectors_file, WordVectorTable};
use morphotag::eval::{
    ablation_key_values, confusion, gold_labels, predict_corpus, render_ablation, run_ablation, score_labels,
    AblationInputs, AblationSpec, Grid,
};
use morphotag::model::ModelConfig;
use morphotag::tagset::{Lexicon, TagsetMapping};
use morphotag::train::{load_checkpoint, save_checkpoint, train, TrainData};

mod settings;

use settings::{describe, model_config, resolve, train_config, Settings, SEED_ENV};

/// Bi-LSTM-CRF named-entity recognizer with grammatical feature vectors.
#[derive(Parser, Debug)]
#[command(name = "morphotag", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model and write the best checkpoint.
    Train(Flags),
    /// Score a checkpoint on a labeled file.
    Evaluate(Flags),
    /// Append predicted labels to an unlabeled file.
    Tag(Flags),
    /// Report BIO violations in a labeled file.
    Validate(FileArg),
    /// Print sentence, token and entity counts.
    Stats(FileArg),
    /// Train and score every cell of an ablation grid.
    Ablate(Flags),
}

#[derive(Args, Debug)]
struct FileArg {
    file: PathBuf,
}

#[derive(Args, Debug, Default)]
struct Flags {
    /// `key = value` settings file; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    train: Option<PathBuf>,
    #[arg(long)]
    dev: Option<PathBuf>,
    #[arg(long)]
    test: Option<PathBuf>,
    /// Input for `tag`: one token per line, optional tag column.
    #[arg(long)]
    input: Option<PathBuf>,
    /// Word vectors in `.vec` text format.
    #[arg(long)]
    vectors: Option<PathBuf>,
    /// Positional-tag mapping file; the built-in mapping when absent.
    #[arg(long)]
    tagset_map: Option<PathBuf>,
    /// One word per line.
    #[arg(long)]
    lexicon: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Checkpoint to load.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Write the confusion matrix as CSV.
    #[arg(long)]
    confusion: Option<PathBuf>,
    /// pos2, pos3, pos4, pos5, pos11, pos3+11, pos4+11 or none.
    #[arg(long)]
    scheme: Option<String>,
    #[arg(long, overrides_with = "no_morph")]
    morph: bool,
    #[arg(long)]
    no_morph: bool,
    #[arg(long)]
    script_feature: bool,
    #[arg(long)]
    lexicon_feature: bool,
    #[arg(long)]
    bio_mask: bool,
    #[arg(long)]
    freeze_embeddings: bool,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    lr_decay: Option<f64>,
    /// Clip value, or `off`.
    #[arg(long)]
    clip: Option<String>,
    /// value or norm.
    #[arg(long)]
    clip_mode: Option<String>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    /// Batch sentences of similar length.
    #[arg(long)]
    bucket: bool,
    #[arg(long)]
    dropout: Option<f64>,
    /// none, fwd, bwd or bi.
    #[arg(long)]
    char_mode: Option<String>,
    #[arg(long)]
    char_dim: Option<usize>,
    #[arg(long)]
    char_hidden: Option<usize>,
    #[arg(long)]
    word_hidden: Option<usize>,
    /// table2 or table6.
    #[arg(long)]
    grid: Option<String>,
    /// Run ablation cells concurrently.
    #[arg(long)]
    parallel: bool,
}

impl Flags {
    /// Only the values actually given, keyed like the config file.
    fn given(&self) -> Vec<(&'static str, String)> {
        let mut out = Vec::new();
        let mut path = |k: &'static str, v: &Option<PathBuf>| {
            if let Some(p) = v {
                out.push((k, p.display().to_string()));
            }
        };
        path("train", &self.train);
        path("dev", &self.dev);
        path("test", &self.test);
        path("input", &self.input);
        path("vectors", &self.vectors);
        path("tagset-map", &self.tagset_map);
        path("lexicon", &self.lexicon);
        path("out", &self.out);
        path("model", &self.model);
        path("confusion", &self.confusion);
        let text: [(&'static str, Option<String>); 18] = [
            ("scheme", self.scheme.clone()),
            ("seed", self.seed.map(|v| v.to_string())),
            ("lr", self.lr.map(|v| v.to_string())),
            ("lr-decay", self.lr_decay.map(|v| v.to_string())),
            ("clip", self.clip.clone()),
            ("clip-mode", self.clip_mode.clone()),
            ("batch-size", self.batch_size.map(|v| v.to_string())),
            ("max-epochs", self.max_epochs.map(|v| v.to_string())),
            ("patience", self.patience.map(|v| v.to_string())),
            ("dropout", self.dropout.map(|v| v.to_string())),
            ("char-mode", self.char_mode.clone()),
            ("char-dim", self.char_dim.map(|v| v.to_string())),
            ("char-hidden", self.char_hidden.map(|v| v.to_string())),
            ("word-hidden", self.word_hidden.map(|v| v.to_string())),
            ("grid", self.grid.clone()),
            ("morph", if self.morph { Some("true".into()) } else { None }),
            ("morph", if self.no_morph { Some("false".into()) } else { None }),
            ("script-feature", self.script_feature.then(|| "true".into())),
        ];
        out.extend(text.into_iter().filter_map(|(k, v)| v.map(|v| (k, v))));
        for (k, on) in [
            ("lexicon-feature", self.lexicon_feature),
            ("bio-mask", self.bio_mask),
            ("freeze-embeddings", self.freeze_embeddings),
            ("bucket", self.bucket),
            ("parallel", self.parallel),
        ] {
            if on {
                out.push((k, "true".into()));
            }
        }
        out
    }

    fn settings(&self) -> Result<Settings, String> {
        let s = resolve(std::env::var(SEED_ENV).ok(), self.config.as_deref(), &self.given())?;
        eprint!("{}", s.echo());
        Ok(s)
    }
}

fn read(path: &Path) -> Result<String, String> {
    fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))
}

fn labeled(path: &Path) -> Result<Corpus, String> {
    parse_conll(&read(path)?).map_err(|e| format!("{}: {e}", path.display()))
}

fn vectors(path: &Path) -> Result<WordVectorTable, String> {
    load_vectors_file(path).map_err(|e| e.to_string())
}

fn optional_vectors(s: &Settings) -> Result<Option<WordVectorTable>, String> {
    s.existing_path("vectors")?.map(|p| vectors(&p)).transpose()
}

fn mapping(s: &Settings) -> Result<TagsetMapping, String> {
    match s.existing_path("tagset-map")? {
        Some(p) => TagsetMapping::parse(&read(&p)?).map_err(|e| format!("{}: {e}", p.display())),
        None => Ok(TagsetMapping::default()),
    }
}

fn lexicon(s: &Settings, config: &ModelConfig) -> Result<Option<Lexicon>, String> {
    match s.existing_path("lexicon")? {
        Some(p) => Ok(Some(Lexicon::parse(&read(&p)?))),
        None if config.scheme.lexicon => Err("the lexicon feature needs --lexicon".into()),
        None => Ok(None),
    }
}

fn write_output(s: &Settings, text: &str) -> Result<(), String> {
    match s.path("out") {
        Some(p) => fs::write(&p, text).map_err(|e| format!("{}: {e}", p.display())),
        None => std::io::stdout().write_all(text.as_bytes()).map_err(|e| e.to_string()),
    }
}

fn cmd_train(flags: &Flags) -> Result<u8, String> {
    let s = flags.settings()?;
    let train_path = s.required_path("train")?;
    let dev_path = s.required_path("dev")?;
    let vec_path = s.required_path("vectors")?;
    let out = s.path("out").ok_or("missing required --out")?;
    let mut model = model_config(&s)?;
    let tc = train_config(&s)?;
    let train_set = labeled(&train_path)?;
    let dev_set = labeled(&dev_path)?;
    let table = vectors(&vec_path)?;
    model.word_dim = table.dim();
    eprint!("{}", describe(&model, &tc));
    let mapping = mapping(&s)?;
    let lexicon = lexicon(&s, &model)?;
    let data =
        TrainData { train: &train_set, dev: &dev_set, vectors: &table, mapping: &mapping, lexicon: lexicon.as_ref() };
    let outcome = train(&data, &model, &tc, |log| eprintln!("{log}")).map_err(|e| e.to_string())?;
    save_checkpoint(&outcome.checkpoint, &out).map_err(|e| e.to_string())?;
    println!(
        "best_dev_f1={:.2} best_epoch={} epochs_run={} stopped_early={} checkpoint={}",
        outcome.checkpoint.best_dev_f1,
        outcome.checkpoint.epoch,
        outcome.log.len(),
        outcome.stopped_early,
        out.display()
    );
    Ok(0)
}

fn cmd_evaluate(flags: &Flags) -> Result<u8, String> {
    let s = flags.settings()?;
    let model_path = s.required_path("model")?;
    let test_path = s.required_path("test")?;
    let ckpt = load_checkpoint(&model_path).map_err(|e| format!("{}: {e}", model_path.display()))?;
    let table = optional_vectors(&s)?;
    let test = labeled(&test_path)?;
    let gold = gold_labels(&test).map_err(|e| e.to_string())?;
    let predicted =
        predict_corpus(&ckpt.model, &test, table.as_ref()).map_err(|e| format!("{}: {e}", test_path.display()))?;
    let report = score_labels(&gold, &predicted).map_err(|e| e.to_string())?;
    print!("{}\n{}", report.table(), report.key_values());
    if let Some(path) = s.path("confusion") {
        let m = confusion(&gold, &predicted).map_err(|e| e.to_string())?;
        fs::write(&path, m.to_csv()).map_err(|e| format!("{}: {e}", path.display()))?;
    }
    Ok(0)
}

fn cmd_tag(flags: &Flags) -> Result<u8, String> {
    let s = flags.settings()?;
    let model_path = s.required_path("model")?;
    let input = s.required_path("input")?;
    let ckpt = load_checkpoint(&model_path).map_err(|e| format!("{}: {e}", model_path.display()))?;
    let table = optional_vectors(&s)?;
    let corpus =
        parse_with_layout(&read(&input)?, Layout::Unlabeled).map_err(|e| format!("{}: {e}", input.display()))?;
    let predicted =
        predict_corpus(&ckpt.model, &corpus, table.as_ref()).map_err(|e| format!("{}: {e}", input.display()))?;
    let mut out = String::new();
    for (sentence, labels) in corpus.sentences.iter().zip(&predicted) {
        for (token, label) in sentence.tokens.iter().zip(labels) {
            out.push_str(&token.surface);
            if let Some(tag) = &token.tag {
                out.push(' ');
                out.push_str(tag);
            }
            out.push(' ');
            out.push_str(label.as_str());
            out.push('\n');
        }
        out.push('\n');
    }
    write_output(&s, &out)?;
    Ok(0)
}

fn cmd_validate(arg: &FileArg) -> Result<u8, String> {
    let corpus = labeled(&arg.file)?;
    let mut found = 0;
    for sentence in &corpus.sentences {
        let labels = sentence.labels().map_err(|e| e.to_string())?;
        for v in bio_violations(&labels) {
            let token = &sentence.tokens[v.index];
            let what = match v.kind {
                ViolationKind::OrphanInside => "inside label without a preceding entity",
                ViolationKind::TypeMismatch => "inside label continues an entity of another type",
            };
            println!("line {}: {} {}: {what}", token.line, token.surface, labels[v.index]);
            found += 1;
        }
    }
    if found == 0 {
        println!("OK");
        Ok(0)
    } else {
        println!("violations={found}");
        Ok(2)
    }
}

fn cmd_stats(arg: &FileArg) -> Result<u8, String> {
    let corpus = labeled(&arg.file)?;
    let stats = corpus_stats(&corpus).map_err(|e| format!("{}: {e}", arg.file.display()))?;
    println!("{stats}");
    Ok(0)
}

fn cmd_ablate(flags: &Flags) -> Result<u8, String> {
    let s = flags.settings()?;
    let grid: Grid = s.get("grid").unwrap_or("table6").parse()?;
    let train_set = labeled(&s.required_path("train")?)?;
    let dev_set = labeled(&s.required_path("dev")?)?;
    let test_set = s.existing_path("test")?.map(|p| labeled(&p)).transpose()?;
    let table = vectors(&s.required_path("vectors")?)?;
    let mut base = model_config(&s)?;
    base.word_dim = table.dim();
    let tc = train_config(&s)?;
    eprint!("{}", describe(&base, &tc));
    let mapping = mapping(&s)?;
    let lexicon = lexicon(&s, &base)?;
    let spec = AblationSpec::new(grid, &base);
    let inputs = AblationInputs {
        train: &train_set,
        dev: &dev_set,
        test: test_set.as_ref(),
        vectors: &table,
        mapping: &mapping,
        lexicon: lexicon.as_ref(),
    };
    let results = run_ablation(&spec, &inputs, &tc, s.flag("parallel")?);
    print!("{}\n{}", render_ablation(grid, &results), ablation_key_values(&results));
    Ok(if results.iter().any(|r| r.report.is_err()) { 1 } else { 0 })
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let result = match &cli.command {
        Command::Train(f) => cmd_train(f),
        Command::Evaluate(f) => cmd_evaluate(f),
        Command::Tag(f) => cmd_tag(f),
        Command::Validate(a) => cmd_validate(a),
        Command::Stats(a) => cmd_stats(a),
        Command::Ablate(f) => cmd_ablate(f),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(msg) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}
