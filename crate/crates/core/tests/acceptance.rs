//! Acceptance gate: one PASS/FAIL line per criterion, non-zero exit on any
//! failure.

mod support;

use std::time::{Duration, Instant};

use morphotag::corpus::{parse_conll, Label};
use morphotag::crf;
use morphotag::diffcore::{grad_check, seeded_rng, ParamStore, Tape, Tensor};
use morphotag::embeddings::{build_char_vocab, WordVectorTable, WordVocabulary};
use morphotag::eval::{f1_score, run_ablation, score_labels, AblationInputs, AblationSpec, Grid};
use morphotag::model::{Model, ModelConfig};
use morphotag::synth::{planted_corpus, synthetic_vectors, tag_only_corpus};
use morphotag::tagset::{pos_group, scheme_dim, FeatureScheme, Partition, Pos, PosScheme, TagsetMapping, MORPH_DIM};
use morphotag::train::{
    checkpoint_bytes, parse_checkpoint, train, CheckpointError, TrainConfig, TrainData, TrainOutcome,
};
use rand::Rng;

struct Outcome {
    name: &'static str,
    pass: bool,
    detail: String,
}

fn outcome(name: &'static str, pass: bool, detail: String) -> Outcome {
    Outcome { name, pass, detail }
}

fn within(elapsed: Duration, limit_secs: u64) -> bool {
    elapsed <= Duration::from_secs(limit_secs)
}

fn crf_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = support::rng(2024);
    let mut worst = 0.0f64;
    let mut viterbi_mismatch = 0;
    let mut score_mismatch = 0;
    for n in 0..200 {
        let l = rng.gen_range(1..=5);
        let k = rng.gen_range(1..=4);
        let (e, t) = if n % 2 == 0 {
            (support::random_tensor(&mut rng, l, k, 3.0), support::random_transitions(&mut rng, k, 3.0))
        } else {
            support::tied_instance(&mut rng, l, k)
        };
        let z = crf::log_partition(&e, &t).unwrap();
        worst = worst.max((z - support::brute_log_partition(&e, &t)).abs());
        let (path, score) = crf::viterbi(&e, &t).unwrap();
        let (best, best_score) = support::brute_argmax(&e, &t);
        if path != best {
            viterbi_mismatch += 1;
        }
        if (score - best_score).abs() > 1e-12 {
            score_mismatch += 1;
        }
    }
    let elapsed = start.elapsed();
    outcome(
        "crf-oracle",
        worst <= 1e-8 && viterbi_mismatch == 0 && score_mismatch == 0 && within(elapsed, 10),
        format!(
            "200 instances, max |logZ diff|={worst:.2e} (tol 1e-8), viterbi mismatches={viterbi_mismatch}, score mismatches={score_mismatch}, {:.2}s (limit 10s)",
            elapsed.as_secs_f64()
        ),
    )
}

fn gradient_gate() -> Outcome {
    let start = Instant::now();
    let corpus = parse_conll("Христо Npmsi B-PER\nСтоичков Hmsi I-PER\nпристигна Vpitf-o3s O\n").unwrap();
    let mut rng = seeded_rng(5);
    let entries = ["христо", "стоичков", "пристигна"]
        .iter()
        .map(|w| (w.to_string(), (0..8).map(|_| rng.gen_range(-0.5..0.5)).collect()))
        .collect();
    let table = WordVectorTable::from_entries(8, entries).unwrap();
    let config = ModelConfig { word_dim: 8, char_hidden: 4, word_hidden: 6, ..ModelConfig::default() };
    let model = Model::new(
        config,
        build_char_vocab(&corpus),
        WordVocabulary::build(&corpus, &table),
        &table,
        TagsetMapping::default(),
        None,
        &mut seeded_rng(42),
    )
    .unwrap();
    let sentence = &corpus.sentences[0];
    let report = grad_check(
        |tape: &mut Tape| Ok(model.loss_on_tape(tape, sentence, Some(&table), None).expect("loss")),
        &model.params,
        1e-5,
    )
    .unwrap();
    let elapsed = start.elapsed();
    outcome(
        "gradient-gate",
        report.max_rel_error <= 1e-4 && within(elapsed, 60),
        format!(
            "{} coordinates, max rel error={:.2e} at {}[{}] (tol 1e-4), {:.2}s (limit 60s)",
            report.checked,
            report.max_rel_error,
            report.worst_param,
            report.worst_index,
            elapsed.as_secs_f64()
        ),
    )
}

fn emission_gradient_identity() -> Outcome {
    let mut rng = support::rng(77);
    let mut worst = 0.0f64;
    let mut cases = 0;
    for l in 1..=4 {
        for k in 1..=3 {
            for _ in 0..5 {
                let e = support::random_tensor(&mut rng, l, k, 2.0);
                let t = support::random_transitions(&mut rng, k, 2.0);
                let gold: Vec<usize> = (0..l).map(|_| rng.gen_range(0..k)).collect();
                let mut store = ParamStore::new();
                let e_id = store.add("e", e.clone()).unwrap();
                let tr = store.add("trans", Tensor::matrix(k, k, t.trans.clone()).unwrap()).unwrap();
                let st = store.add("start", Tensor::row(t.start.clone())).unwrap();
                let sp = store.add("stop", Tensor::row(t.stop.clone())).unwrap();
                let mut tape = Tape::new(&store);
                let vars = [tape.param(e_id), tape.param(tr), tape.param(st), tape.param(sp)];
                let loss = crf::nll_on_tape(&mut tape, vars[0], vars[1], vars[2], vars[3], &gold, None).unwrap();
                let grads = tape.backward(loss).unwrap();
                let marg = support::brute_unary_marginals(&e, &t);
                for i in 0..l {
                    for j in 0..k {
                        let expected = marg[i * k + j] - if gold[i] == j { 1.0 } else { 0.0 };
                        worst = worst.max((grads.get(e_id).get(i, j) - expected).abs());
                    }
                }
                cases += 1;
            }
        }
    }
    outcome(
        "emission-gradient-identity",
        worst <= 1e-8,
        format!("{cases} instances (L<=4, K<=3), max |grad - (marginal - onehot)|={worst:.2e} (tol 1e-8)"),
    )
}

struct OverfitRun {
    outcome: TrainOutcome,
    elapsed: Duration,
}

fn overfit_run() -> OverfitRun {
    let corpus = planted_corpus(50, 42);
    let vectors = synthetic_vectors(&[&corpus], 300, 42);
    let mapping = TagsetMapping::default();
    let data = TrainData { train: &corpus, dev: &corpus, vectors: &vectors, mapping: &mapping, lexicon: None };
    let start = Instant::now();
    let outcome = train(&data, &ModelConfig::default(), &TrainConfig::default(), |_| {}).expect("training");
    OverfitRun { outcome, elapsed: start.elapsed() }
}

fn overfit(run: &OverfitRun) -> Outcome {
    let ckpt = &run.outcome.checkpoint;
    let first_perfect = run.outcome.log.iter().find(|l| l.dev.overall.f1() == 100.0).map(|l| l.epoch);
    outcome(
        "overfit",
        ckpt.best_dev_f1 == 100.0 && first_perfect.is_some_and(|e| e <= 200) && within(run.elapsed, 300),
        format!(
            "50 planted sentences, seed 42, default settings: best train F1={:.2} first reached at epoch {:?} (limit 200), {} epochs run, {:.1}s (limit 300s)",
            ckpt.best_dev_f1,
            first_perfect,
            run.outcome.log.len(),
            run.elapsed.as_secs_f64()
        ),
    )
}

fn ablation_effect() -> Outcome {
    let train_set = tag_only_corpus(100, 1);
    let dev_set = tag_only_corpus(50, 2);
    let vectors = synthetic_vectors(&[&train_set, &dev_set], 300, 3);
    let mapping = TagsetMapping::default();
    let full = AblationSpec::new(Grid::Components, &ModelConfig::default());
    let spec = AblationSpec { grid: Grid::Components, cells: vec![full.cells[0].clone(), full.cells[4].clone()] };
    let inputs = AblationInputs {
        train: &train_set,
        dev: &dev_set,
        test: None,
        vectors: &vectors,
        mapping: &mapping,
        lexicon: None,
    };
    let results = run_ablation(&spec, &inputs, &TrainConfig::default(), true);
    let f1 = |i: usize| results[i].report.as_ref().map(|r| r.overall.f1());
    match (f1(0), f1(1)) {
        (Ok(words), Ok(pos11)) => outcome(
            "feature-scheme-ablation",
            pos11 - words >= 20.0,
            format!(
                "tag-only corpus: words-only dev F1={words:.2}, POS11 dev F1={pos11:.2}, gap={:.2} (need >= 20)",
                pos11 - words
            ),
        ),
        (a, b) => outcome("feature-scheme-ablation", false, format!("cell failed: {a:?} / {b:?}")),
    }
}

fn scorer_compatibility() -> Outcome {
    let fx = support::load_scorer_fixture();
    let expected = support::load_scorer_expected();
    let report = score_labels(&fx.gold, &fx.predicted).unwrap();
    let mut mismatches = Vec::new();
    for (name, counts, rates) in &expected {
        let got = if name == "overall" {
            report.overall
        } else {
            let kind = format!("B-{name}").parse::<Label>().unwrap().entity_type().unwrap();
            report.of(kind)
        };
        let got_rates = format!("{:.2} {:.2} {:.2}", got.precision(), got.recall(), got.f1());
        if got != *counts || &got_rates != rates {
            mismatches.push(format!("{name}: got {got:?} {got_rates}, expected {counts:?} {rates}"));
        }
    }
    outcome(
        "scorer-compatibility",
        fx.gold.len() == 12 && mismatches.is_empty(),
        if mismatches.is_empty() {
            format!("{} cases, {} rows match the reference counts and rates", fx.gold.len(), expected.len())
        } else {
            mismatches.join("; ")
        },
    )
}

fn scheme_invariants() -> Outcome {
    let chain = [Partition::Pos2, Partition::Pos3, Partition::Pos4, Partition::Pos5, Partition::Pos11];
    let mut broken = Vec::new();
    for pair in chain.windows(2) {
        let (coarse, fine) = (pair[0], pair[1]);
        for a in Pos::ALL {
            for b in Pos::ALL {
                if pos_group(a, fine) == pos_group(b, fine) && pos_group(a, coarse) != pos_group(b, coarse) {
                    broken.push(format!("{fine:?} joins {a:?},{b:?} but {coarse:?} splits them"));
                }
            }
        }
    }
    let dims: Vec<usize> = PosScheme::ALL.iter().map(|&p| scheme_dim(&FeatureScheme::with_pos(p, false))).collect();
    let morph: Vec<usize> = PosScheme::ALL.iter().map(|&p| scheme_dim(&FeatureScheme::with_pos(p, true))).collect();
    let dims_ok = dims == [2, 3, 4, 5, 11, 14, 15] && morph.iter().zip(&dims).all(|(m, d)| *m == d + MORPH_DIM);
    outcome(
        "scheme-invariants",
        broken.is_empty() && dims_ok,
        format!("refinement violations={}, dims={dims:?}, with morph={morph:?}", broken.len()),
    )
}

fn f1_arithmetic() -> Outcome {
    let f = f1_score(93.31, 91.12);
    outcome(
        "f1-arithmetic",
        (f - 92.20).abs() <= 0.01,
        format!("2*93.31*91.12/(93.31+91.12)={f:.4} (expect 92.20 +/- 0.01)"),
    )
}

fn checkpoint_round_trip(run: &OverfitRun) -> Outcome {
    let bytes = checkpoint_bytes(&run.outcome.checkpoint);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    morphotag::train::save_checkpoint(&run.outcome.checkpoint, &path).unwrap();
    let loaded = morphotag::train::load_checkpoint(&path).unwrap();
    let again = checkpoint_bytes(&loaded);
    let identical = again == bytes && std::fs::read(&path).unwrap() == bytes && loaded == run.outcome.checkpoint;

    let mut rejected = 0;
    let mut cases = 0;
    let mut expect_corrupt = |data: &[u8]| {
        cases += 1;
        if matches!(parse_checkpoint(data), Err(CheckpointError::CorruptSection { .. })) {
            rejected += 1;
        }
    };
    expect_corrupt(&bytes[..bytes.len() - 3]);
    expect_corrupt(&bytes[..bytes.len() / 2]);
    for frac in [0.3, 0.6, 0.95] {
        let mut flipped = bytes.clone();
        let at = (bytes.len() as f64 * frac) as usize;
        flipped[at] ^= 0x40;
        expect_corrupt(&flipped);
    }
    // metadata byte
    let mut flipped = bytes.clone();
    flipped[20] ^= 0x01;
    expect_corrupt(&flipped);
    outcome(
        "checkpoint-round-trip",
        identical && rejected == cases,
        format!(
            "{} bytes, save/load/save identical={identical}, corrupted variants rejected {rejected}/{cases}",
            bytes.len()
        ),
    )
}

fn determinism(a: &OverfitRun, b: &OverfitRun) -> Outcome {
    let log_a: Vec<String> = a.outcome.log.iter().map(|l| l.to_string()).collect();
    let log_b: Vec<String> = b.outcome.log.iter().map(|l| l.to_string()).collect();
    let same_log = log_a == log_b && a.outcome.log == b.outcome.log;
    let same_ckpt = checkpoint_bytes(&a.outcome.checkpoint) == checkpoint_bytes(&b.outcome.checkpoint);
    outcome(
        "determinism",
        same_log && same_ckpt,
        format!(
            "two seed-42 runs: {} epoch lines identical={same_log}, checkpoints identical={same_ckpt}",
            log_a.len()
        ),
    )
}

fn main() {
    let started = Instant::now();
    let (runs, ablation, cheap) = std::thread::scope(|s| {
        let run_a = s.spawn(overfit_run);
        let run_b = s.spawn(overfit_run);
        let ablation = s.spawn(ablation_effect);
        let cheap = vec![
            crf_oracle(),
            gradient_gate(),
            emission_gradient_identity(),
            scorer_compatibility(),
            scheme_invariants(),
            f1_arithmetic(),
        ];
        ((run_a.join().unwrap(), run_b.join().unwrap()), ablation.join().unwrap(), cheap)
    });
    let mut results = cheap;
    results.insert(3, overfit(&runs.0));
    results.insert(4, ablation);
    results.push(checkpoint_round_trip(&runs.0));
    results.push(determinism(&runs.0, &runs.1));

    let failed = results.iter().filter(|r| !r.pass).count();
    println!();
    for r in &results {
        println!("acceptance {} {}: {}", if r.pass { "PASS" } else { "FAIL" }, r.name, r.detail);
    }
    println!(
        "acceptance summary: {}/{} passed in {:.1}s",
        results.len() - failed,
        results.len(),
        started.elapsed().as_secs_f64()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
