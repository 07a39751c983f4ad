//! End-to-end acceptance checks, one test per criterion.
//!
//! Benchmark criteria read loghub samples from `$NULOG_DATA_DIR` (default
//! `<workspace>/data/loghub`), laid out as `<Name>/<Name>_2k.log_structured.csv`
//! plus `BGL/BGL.log` for the anomaly study. Without that data those
//! criteria fail and say so.

use std::collections::{BTreeSet, HashMap};
use std::io::Write;
use std::path::PathBuf;
use std::sync::{Arc, Mutex, OnceLock};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use nulog_core::anomaly::{run_supervised_study, run_unsupervised_study, AnomalyConfig};
use nulog_core::evaluation::{
    baseline_edit_distance, levenshtein, mean_template_edit_distance, normalize_template,
    parsing_accuracy, robustness_summary,
};
use nulog_core::extraction::{
    constant_flags, frame_records, parse_corpus, parse_sequences, write_parsed_csv,
    write_templates_csv,
};
use nulog_core::ingest::{load_labeled_bgl, load_loghub_csv, DatasetConfig, LogRecord, BUILTIN_DATASETS};
use nulog_core::model::{mlm_loss, positional_encoding, train, ModelConfig, ModelState};
use nulog_core::numerics::{softmax_rows, GradientCheck, Matrix};
use nulog_core::persistence::{from_bytes, to_bytes};
use nulog_core::sampler::MaskedSample;
use nulog_core::synthetic::{generate, SYNTHETIC_FILTER, SYNTHETIC_TEMPLATES};
use nulog_core::tokenizer::{compute_frame_length, frame, Tokenizer, Vocabulary};

// Thresholds.
const APACHE_MIN_PA: f64 = 0.99;
const APACHE_MAX_RUNTIME: Duration = Duration::from_secs(5 * 60);
const HDFS_MIN_PA: f64 = 0.95;
const BGL_MIN_PA: f64 = 0.93;
const HPC_MIN_PA: f64 = 0.88;
const MEDIAN_MIN_PA: f64 = 0.93;
const HDFS_MAX_EDIT: f64 = 6.0;
const BASELINE_FACTOR: f64 = 2.0;
const BGL_STUDY_LINES: usize = 20_000;
const UNSUPERVISED_MIN_F1: f64 = 0.90;
const SUPERVISED_MIN_F1: f64 = 0.95;
const GRADCHECK_MAX_REL: f64 = 1e-3;
// With ReLU units, a wide central difference can straddle a kink.
const GRADCHECK_STEP: f64 = 1e-6;
const ROW_SUM_TOL: f64 = 1e-6;
const SEEDS: [u64; 3] = [7, 8, 9];

fn report(criterion: u32, ok: bool, detail: &str) {
    let status = if ok { "PASS" } else { "FAIL" };
    // Written past the test harness capture so every line shows up.
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "[{status}] criterion {criterion}: {detail}");
    let _ = out.flush();
    assert!(ok, "criterion {criterion} failed: {detail}");
}

fn data_dir() -> PathBuf {
    std::env::var_os("NULOG_DATA_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/loghub"))
}

fn sample_path(name: &str) -> PathBuf {
    data_dir().join(name).join(format!("{name}_2k.log_structured.csv"))
}

fn load_sample(criterion: u32, name: &str) -> Vec<LogRecord> {
    let path = sample_path(name);
    match load_loghub_csv(&path) {
        Ok(r) => r,
        Err(e) => {
            report(criterion, false, &format!("{name} sample unavailable ({e}); set NULOG_DATA_DIR"));
            unreachable!()
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct RunResult {
    pa: f64,
    edit: f64,
    baseline: f64,
    elapsed: Duration,
}

/// Trains with the dataset's table settings at default architecture and parses the same sample.
fn run_dataset(records: &[LogRecord], config: &DatasetConfig, seed: u64) -> RunResult {
    let started = Instant::now();
    let tokenizer = Tokenizer::new(&config.tokenization_filter).unwrap();
    let tokens: Vec<Vec<String>> = records.iter().map(|r| tokenizer.tokenize(&r.content)).collect();
    let vocab = Vocabulary::build(&tokens).unwrap();
    let payload = compute_frame_length(&tokens).unwrap();
    let model_config = ModelConfig {
        epochs: config.epochs as usize,
        seed,
        ..ModelConfig::new(vocab.len(), payload + 1)
    };
    let seqs = frame_records(records, &tokenizer, &vocab, payload + 1);
    let state = train(&seqs, &model_config).unwrap();
    let (parsed, _) = parse_corpus(records, &state, &vocab, config).unwrap();
    let elapsed = started.elapsed();
    let predicted: Vec<usize> = parsed.iter().map(|p| p.template_id).collect();
    let truth: Vec<String> = records.iter().map(|r| r.truth_event_id.clone().unwrap_or_default()).collect();
    RunResult {
        pa: parsing_accuracy(&predicted, &truth).unwrap(),
        edit: mean_template_edit_distance(&parsed, records, &tokenizer).unwrap(),
        baseline: baseline_edit_distance(records, &tokenizer).unwrap(),
        elapsed,
    }
}

type Cache = Mutex<HashMap<(String, u64), Arc<OnceLock<RunResult>>>>;

/// Each (dataset, seed) run is shared between the criteria that need it.
fn cached_run(criterion: u32, name: &str, seed: u64) -> RunResult {
    static CACHE: OnceLock<Cache> = OnceLock::new();
    let records = load_sample(criterion, name);
    let cell = CACHE
        .get_or_init(Default::default)
        .lock()
        .unwrap()
        .entry((name.to_string(), seed))
        .or_default()
        .clone();
    *cell.get_or_init(|| run_dataset(&records, &DatasetConfig::builtin(name).unwrap(), seed))
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

fn seeded_pa_gate(criterion: u32, name: &str, threshold: f64) {
    let pas: Vec<f64> = SEEDS.iter().map(|&s| cached_run(criterion, name, s).pa).collect();
    let m = median(pas.clone());
    report(
        criterion,
        m >= threshold,
        &format!("{name} median PA over seeds {SEEDS:?} = {m:.4} (runs {pas:.4?}, need >= {threshold})"),
    );
}

#[test]
fn criterion_1_apache_accuracy_and_runtime() {
    let r = cached_run(1, "Apache", 7);
    report(
        1,
        r.pa >= APACHE_MIN_PA && r.elapsed <= APACHE_MAX_RUNTIME,
        &format!(
            "Apache PA = {:.4} (need >= {APACHE_MIN_PA}), runtime {:.1}s (limit {}s)",
            r.pa,
            r.elapsed.as_secs_f64(),
            APACHE_MAX_RUNTIME.as_secs()
        ),
    );
}

#[test]
fn criterion_2_hdfs_accuracy() {
    seeded_pa_gate(2, "HDFS", HDFS_MIN_PA);
}

#[test]
fn criterion_3_bgl_accuracy() {
    seeded_pa_gate(3, "BGL", BGL_MIN_PA);
}

#[test]
fn criterion_4_hpc_accuracy() {
    seeded_pa_gate(4, "HPC", HPC_MIN_PA);
}

#[test]
fn criterion_5_median_accuracy_across_datasets() {
    let scores: Vec<(String, f64)> = BUILTIN_DATASETS
        .iter()
        .map(|name| (name.to_string(), cached_run(5, name, 7).pa))
        .collect();
    let s = robustness_summary(&scores).unwrap();
    report(
        5,
        s.median >= MEDIAN_MIN_PA,
        &format!("median PA over {} datasets = {:.4} (need >= {MEDIAN_MIN_PA}); {scores:?}", scores.len(), s.median),
    );
}

#[test]
fn criterion_6_edit_distance_against_baseline() {
    let hdfs = cached_run(6, "HDFS", 7);
    let mac = cached_run(6, "Mac", 7);
    let gate = |r: &RunResult| r.edit * BASELINE_FACTOR <= r.baseline;
    report(
        6,
        gate(&hdfs) && gate(&mac),
        &format!(
            "HDFS edit {:.3} vs baseline {:.3}, Mac edit {:.3} vs baseline {:.3} (need {BASELINE_FACTOR}x better); \
             HDFS indicative bound {HDFS_MAX_EDIT}: {}",
            hdfs.edit,
            hdfs.baseline,
            mac.edit,
            mac.baseline,
            if hdfs.edit <= HDFS_MAX_EDIT { "met" } else { "missed" }
        ),
    );
}

#[test]
fn criterion_7_bgl_anomaly_detection() {
    let path = data_dir().join("BGL").join("BGL.log");
    let mut records = match load_labeled_bgl(&path, 1.0) {
        Ok(r) => r,
        Err(e) => {
            report(7, false, &format!("labeled BGL log unavailable ({e}); set NULOG_DATA_DIR"));
            unreachable!()
        }
    };
    if records.len() < BGL_STUDY_LINES {
        report(7, false, &format!("BGL log has {} lines, need {BGL_STUDY_LINES}", records.len()));
    }
    records.truncate(BGL_STUDY_LINES);
    let bgl = DatasetConfig::builtin("BGL").unwrap();
    let tokenizer = Tokenizer::new(&bgl.tokenization_filter).unwrap();
    let arch = ModelConfig::new(0, 0);
    let config = AnomalyConfig::new(bgl.epsilon as usize);
    let unsup = run_unsupervised_study(&records, &tokenizer, &arch, &config).unwrap().metrics;
    let sup = run_supervised_study(&records, &tokenizer, &arch, &config).unwrap().metrics;
    report(
        7,
        unsup.f1 >= UNSUPERVISED_MIN_F1 && sup.f1 >= SUPERVISED_MIN_F1,
        &format!(
            "unsupervised F1 {:.4} (need >= {UNSUPERVISED_MIN_F1}), supervised F1 {:.4} (need >= {SUPERVISED_MIN_F1})",
            unsup.f1, sup.f1
        ),
    );
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f32) -> Matrix<f32> {
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(-scale..scale))
}

fn check_gradients() -> Result<String, String> {
    let config = ModelConfig {
        ffn_hidden: 16,
        blocks: 2,
        ..ModelConfig::new(20, 6).with_width(8, 2)
    };
    let state = ModelState::init(&config).unwrap();
    let params = state.params_f64();
    let positions = positional_encoding::<f64>(6, 8);
    let sample = MaskedSample {
        input_ids: vec![0, 11, 1, 4, 17, 2],
        target_id: 8,
        position: 2,
    };
    let check = GradientCheck::run(
        &params,
        GRADCHECK_STEP,
        |p| Ok(mlm_loss(p, &config, &positions, &sample, false)?.0),
        |p| Ok(mlm_loss(p, &config, &positions, &sample, true)?.1.unwrap()),
    )
    .unwrap();
    let msg = format!("gradcheck max rel err {:.2e} over {} coords", check.max_relative_error, check.coordinates);
    if check.max_relative_error <= GRADCHECK_MAX_REL {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn check_row_sums(rng: &mut ChaCha8Rng) -> Result<String, String> {
    let mut worst = 0.0f64;
    for trial in 0..1000 {
        let rows = rng.random_range(1..8);
        let cols = rng.random_range(1..12);
        let x = random_matrix(rng, rows, cols, 20.0);
        for r in 0..rows {
            let s: f64 = softmax_rows(&x).row(r).iter().map(|&v| v as f64).sum();
            worst = worst.max((s - 1.0).abs());
        }
        let heads = [1, 2, 4][trial % 3];
        let config = ModelConfig {
            ffn_hidden: 8,
            seed: trial as u64,
            ..ModelConfig::new(6, rows).with_width(8, heads)
        };
        let state = ModelState::init(&config).unwrap();
        let att = state.attention(0, &random_matrix(rng, rows, 8, 3.0)).unwrap();
        for w in &att.weights {
            for r in 0..w.rows() {
                let s: f64 = w.row(r).iter().map(|&v| v as f64).sum();
                worst = worst.max((s - 1.0).abs());
            }
        }
    }
    let msg = format!("softmax/attention row sums within {worst:.1e}");
    if worst <= ROW_SUM_TOL {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn check_levenshtein(rng: &mut ChaCha8Rng) -> Result<String, String> {
    let alphabet: Vec<char> = "ab⟨*⟩ ".chars().collect();
    let word = |rng: &mut ChaCha8Rng| -> String {
        let n = rng.random_range(0..10);
        (0..n).map(|_| alphabet[rng.random_range(0..alphabet.len())]).collect()
    };
    if levenshtein("kitten", "sitting") != 3 {
        return Err("kitten/sitting != 3".into());
    }
    for _ in 0..10_000 {
        let (a, b, c) = (word(rng), word(rng), word(rng));
        let ab = levenshtein(&a, &b);
        if ab != levenshtein(&b, &a)
            || (ab == 0) != (a == b)
            || levenshtein(&a, &c) > ab + levenshtein(&b, &c)
        {
            return Err(format!("metric axiom broken on {a:?} {b:?} {c:?}"));
        }
    }
    Ok("levenshtein axioms on 10000 triples".into())
}

fn pa_oracle(predicted: &[u8], truth: &[u8]) -> f64 {
    let members = |labels: &[u8], l: u8| -> BTreeSet<usize> {
        labels.iter().enumerate().filter(|(_, &x)| x == l).map(|(i, _)| i).collect()
    };
    let ok = (0..truth.len())
        .filter(|&i| members(predicted, predicted[i]) == members(truth, truth[i]))
        .count();
    ok as f64 / truth.len() as f64
}

fn check_parsing_accuracy(rng: &mut ChaCha8Rng) -> Result<String, String> {
    if parsing_accuracy(&["e1", "e4", "e5"], &["e1", "e2", "e2"]).unwrap() != 1.0 / 3.0 {
        return Err("three-message fixture is not 1/3".into());
    }
    for _ in 0..1000 {
        let n = rng.random_range(1..=20);
        let k = rng.random_range(1..6);
        let p: Vec<u8> = (0..n).map(|_| rng.random_range(0..k)).collect();
        let t: Vec<u8> = (0..n).map(|_| rng.random_range(0..k)).collect();
        if parsing_accuracy(&p, &t).unwrap() != pa_oracle(&p, &t) {
            return Err(format!("oracle mismatch on {p:?} vs {t:?}"));
        }
    }
    Ok("PA matches set-equality oracle on 1000 assignments".into())
}

fn check_epsilon_monotone(rng: &mut ChaCha8Rng) -> Result<String, String> {
    for trial in 0..100u64 {
        let v = rng.random_range(6..30);
        let len = rng.random_range(1..7);
        let vocab_tokens: Vec<String> = (0..v - 4).map(|i| format!("t{i}")).collect();
        let vocab = Vocabulary::build(std::slice::from_ref(&vocab_tokens)).unwrap();
        let message: Vec<String> = (0..len).map(|_| vocab_tokens[rng.random_range(0..vocab_tokens.len())].clone()).collect();
        let config = ModelConfig {
            ffn_hidden: 8,
            seed: trial,
            ..ModelConfig::new(vocab.len(), len + 2).with_width(4, 2)
        };
        let state = ModelState::init(&config).unwrap();
        let seq = frame(0, message, len + 1, &vocab);
        let mut prev: Option<Vec<bool>> = None;
        for eps in 1..=vocab.len() {
            let flags = constant_flags(&seq, &state, eps).unwrap();
            if let Some(p) = &prev {
                if p.iter().zip(&flags).any(|(&a, &b)| a && !b) {
                    return Err(format!("trial {trial}: constant set shrank at eps {eps}"));
                }
            }
            prev = Some(flags);
        }
        if prev.unwrap().iter().any(|&c| !c) {
            return Err(format!("trial {trial}: eps = |V| left a variable"));
        }
    }
    Ok("constant sets nested in eps over 100 random models".into())
}

fn synthetic_setup(n: usize, seed: u64, epochs: usize) -> (Vec<LogRecord>, Vocabulary, ModelState) {
    let corpus = generate(n, seed);
    let tokenizer = Tokenizer::new(SYNTHETIC_FILTER).unwrap();
    let tokens: Vec<Vec<String>> = corpus.records.iter().map(|r| tokenizer.tokenize(&r.content)).collect();
    let vocab = Vocabulary::build(&tokens).unwrap();
    let payload = compute_frame_length(&tokens).unwrap();
    let config = ModelConfig {
        epochs,
        ..ModelConfig::new(vocab.len(), payload + 1).with_width(64, 4)
    };
    let seqs = frame_records(&corpus.records, &tokenizer, &vocab, payload + 1);
    let state = train(&seqs, &config).unwrap();
    (corpus.records, vocab, state)
}

fn check_persistence_and_determinism() -> Result<String, String> {
    let (records, vocab, a) = synthetic_setup(200, 5, 3);
    let (_, _, b) = synthetic_setup(200, 5, 3);
    let bytes = to_bytes(&a, &vocab).unwrap();
    if bytes != to_bytes(&b, &vocab).unwrap() {
        return Err("two seed-7 runs produced different archives".into());
    }
    let (loaded, loaded_vocab) = from_bytes(&bytes).unwrap();
    let same_bits = a.params().iter().zip(loaded.params().iter()).all(|(x, y)| {
        x.name == y.name
            && x.value.shape() == y.value.shape()
            && x.value.as_slice().iter().zip(y.value.as_slice()).all(|(p, q)| p.to_bits() == q.to_bits())
    });
    if !same_bits || loaded_vocab != vocab {
        return Err("archive round trip is not bit-exact".into());
    }
    let config = DatasetConfig::new("synthetic", SYNTHETIC_FILTER, 3, 5);
    let dir = tempfile::tempdir().unwrap();
    let mut outputs = Vec::new();
    for (tag, state) in [("a", &a), ("b", &loaded)] {
        let (parsed, store) = parse_corpus(&records, state, &vocab, &config).unwrap();
        let p = dir.path().join(format!("{tag}.csv"));
        let t = dir.path().join(format!("{tag}.templates.csv"));
        write_parsed_csv(&p, &records, &parsed).unwrap();
        write_templates_csv(&t, &store).unwrap();
        outputs.push((std::fs::read(p).unwrap(), std::fs::read(t).unwrap()));
    }
    if outputs[0] != outputs[1] {
        return Err("template CSVs differ between identical runs".into());
    }
    Ok("archive round trip bit-exact; seed-7 archives and template CSVs identical".into())
}

#[test]
fn criterion_8_property_suite() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let results = [
        check_gradients(),
        check_row_sums(&mut rng),
        check_levenshtein(&mut rng),
        check_parsing_accuracy(&mut rng),
        check_epsilon_monotone(&mut rng),
        check_persistence_and_determinism(),
    ];
    let ok = results.iter().all(Result::is_ok);
    let detail: Vec<String> = results
        .iter()
        .map(|r| match r {
            Ok(m) => m.clone(),
            Err(m) => format!("FAILED {m}"),
        })
        .collect();
    report(8, ok, &detail.join("; "));
}

/// Trains on one draw of the generator and parses a fresh draw.
#[test]
fn criterion_9_synthetic_oracle() {
    const TRAIN_SEED: u64 = 1;
    const PARSE_SEED: u64 = 2;
    const EPOCHS: usize = 20;
    const EPSILON: u32 = 5;
    let (_, vocab, state) = synthetic_setup(500, TRAIN_SEED, EPOCHS);
    let corpus = generate(500, PARSE_SEED);
    let tokenizer = Tokenizer::new(SYNTHETIC_FILTER).unwrap();
    let seqs = frame_records(&corpus.records, &tokenizer, &vocab, state.config().frame_length);
    let (parsed, store) = parse_sequences(&seqs, &state, EPSILON as usize).unwrap();
    let predicted: Vec<usize> = parsed.iter().map(|p| p.template_id).collect();
    let pa = parsing_accuracy(&predicted, &corpus.assignment).unwrap();
    let exact = parsed
        .iter()
        .filter(|p| p.template == normalize_template(&corpus.templates[corpus.assignment[p.message_index]], &tokenizer))
        .count();
    report(
        9,
        pa == 1.0 && exact == parsed.len() && store.len() == SYNTHETIC_TEMPLATES,
        &format!(
            "synthetic PA = {pa:.4}, {} of {} templates recovered exactly, {} groups for {SYNTHETIC_TEMPLATES} templates",
            exact,
            parsed.len(),
            store.len()
        ),
    );
}
