use std::collections::BTreeMap;
use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statefuzz::coverage::{CoverageMetric, CoverageTracker};
use statefuzz::harness::campaign::{run_methodology, InputRecord};
use statefuzz::harness::config::{CampaignConfig, KeyValues, Methodology, RetrainJob, TaskKind, TrainJob};
use statefuzz::harness::data::{split_text, write_sequence_dataset, Vocabulary};
use statefuzz::harness::report::{write_campaign, without_timing, RECORDS_FILE, SUMMARY_JSON};
use statefuzz::harness::retrain::{adversarial_windows, retrain_experiment, run_retrain};
use statefuzz::harness::{run_campaign, run_campaign_on, run_train_job, Subject};
use statefuzz::objectives::ObjectiveKind;
use statefuzz::rnn::checkpoint::Checkpoint;
use statefuzz::rnn::train::{token_windows, Example, TrainConfig};
use statefuzz::rnn::{init_params, CellKind, Model, RnnConfig};
use statefuzz::{Error, Tensor};

const TEXT: &str = "the quick brown fox jumps over the lazy dog\n\
pack my box with five dozen liquor jugs\n\
how vexingly quick daft zebras jump\n\
sphinx of black quartz judge my vow\n";

fn lm_subject(cell: CellKind, seed: u64) -> (Subject, Vocabulary) {
    let vocab = Vocabulary::from_text(TEXT);
    let cfg = RnnConfig::language_model(cell, 2, 8, vocab.len(), 5);
    let model = Model::new(cfg.clone(), init_params(&cfg, 0.5, seed).unwrap()).unwrap();
    (Subject::new(model, TaskKind::CharLm, Some(vocab.clone())).unwrap(), vocab)
}

fn lm_inputs(vocab: &Vocabulary, n: usize) -> Vec<Example> {
    let mut w = token_windows(&vocab.encode(TEXT).unwrap(), 12);
    w.truncate(n);
    w
}

fn classifier_subject(cell: CellKind, seed: u64) -> Subject {
    let cfg = RnnConfig::classifier(cell, 1, 6, 3, 4);
    let model = Model::new(cfg.clone(), init_params(&cfg, 0.8, seed).unwrap()).unwrap();
    Subject::new(model, TaskKind::SeqClassifier, None).unwrap()
}

fn classifier_inputs(n: usize, seed: u64) -> Vec<Example> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| Example::Labeled {
            sequence: Tensor::from_fn(&[5, 3], |_| rng.random_range(-1.0..1.0)),
            label: rng.random_range(0..4),
        })
        .collect()
}

fn config(task: TaskKind, objectives: &str) -> CampaignConfig {
    let mut cfg = CampaignConfig::new(PathBuf::from("unused"), task, PathBuf::from("unused"));
    cfg.methodologies = objectives
        .split(',')
        .map(|s| s.parse::<Methodology>().unwrap())
        .collect();
    cfg.num_runs = 2;
    cfg.seed = 7;
    cfg.synthesis.epsilon = 0.5;
    cfg.m = 4;
    cfg
}

const ALL_LM: &str = "rnn_test_joint:HS_C,rnn_test_joint:CS_C,rnn_test_adversary,coverage_only:NC,fgsm_loss,dlfuzz_joint,random_baseline";

#[test]
fn empty_test_set_gives_zero_counts() {
    let (subject, _) = lm_subject(CellKind::Lstm, 1);
    let out = run_campaign_on(&config(TaskKind::CharLm, ALL_LM), &subject, &[]).unwrap();
    assert!(out.records.is_empty());
    for m in &out.report.methodologies {
        assert_eq!(m.runs.len(), 2);
        for r in &m.runs {
            assert_eq!(r.metrics.rates.total, 0);
            assert_eq!(r.metrics.rates.generated, 0);
        }
    }
}

#[test]
fn per_run_counts_equal_input_count_and_failures_are_isolated() {
    let (subject, vocab) = lm_subject(CellKind::Gru, 2);
    let mut inputs = lm_inputs(&vocab, 5);
    // A one-character window has no step with a predecessor.
    inputs.insert(2, Example::Tokens { inputs: vec![3], targets: vec![4] });
    let cfg = config(TaskKind::CharLm, "rnn_test_joint:HS_C,random_baseline");
    let out = run_campaign_on(&cfg, &subject, &inputs).unwrap();
    assert_eq!(out.records.len(), 2 * 2 * inputs.len());
    for m in &out.report.methodologies {
        for r in &m.runs {
            assert_eq!(r.metrics.rates.total, inputs.len());
            assert_eq!(r.errors, 1);
        }
    }
    let failed: Vec<&InputRecord> = out.records.iter().filter(|r| r.error.is_some()).collect();
    assert_eq!(failed.len(), 4);
    assert!(failed.iter().all(|r| r.index == 2));
}

#[test]
fn same_config_and_seed_give_identical_reports() {
    let dir = tempfile::tempdir().unwrap();
    let (subject, vocab) = lm_subject(CellKind::Lstm, 3);
    let inputs = lm_inputs(&vocab, 6);
    let cfg = config(TaskKind::CharLm, ALL_LM);
    let mut texts = Vec::new();
    for name in ["a", "b"] {
        let out = run_campaign_on(&cfg, &subject, &inputs).unwrap();
        let d = dir.path().join(name);
        write_campaign(&d, &out).unwrap();
        let read = |f: &str| without_timing(&std::fs::read_to_string(d.join(f)).unwrap()).unwrap();
        texts.push((read(RECORDS_FILE), read(SUMMARY_JSON)));
    }
    assert_eq!(texts[0], texts[1]);
    let mut other = cfg.clone();
    other.seed += 1;
    let out = run_campaign_on(&other, &subject, &inputs).unwrap();
    let steps = |o: &statefuzz::harness::CampaignOutput| -> Vec<Vec<usize>> {
        o.records.iter().map(|r| r.steps.clone()).collect()
    };
    assert_ne!(steps(&out), steps(&run_campaign_on(&cfg, &subject, &inputs).unwrap()));
}

#[test]
fn coverage_positions_never_shrink_within_a_run() {
    let subject = classifier_subject(CellKind::Lstm, 4);
    let inputs = classifier_inputs(25, 4);
    let cfg = config(TaskKind::SeqClassifier, "rnn_test_joint:CS_C,dlfuzz_joint,random_baseline");
    let out = run_campaign_on(&cfg, &subject, &inputs).unwrap();
    let mut last: BTreeMap<(String, usize, String), usize> = BTreeMap::new();
    for r in &out.records {
        for (metric, snap) in &r.coverage {
            let key = (r.methodology.clone(), r.run, metric.clone());
            let prev = last.insert(key, snap.positions).unwrap_or(0);
            assert!(snap.positions >= prev, "{r:?}");
        }
    }
    assert_eq!(last.len(), 3 * 2 * 3);
}

#[test]
fn methodologies_share_inputs_and_steps() {
    let (subject, vocab) = lm_subject(CellKind::Lstm, 5);
    let inputs = lm_inputs(&vocab, 6);
    let mut cfg = config(TaskKind::CharLm, ALL_LM);
    cfg.step_policy = "k_random_steps(3)".parse().unwrap();
    let out = run_campaign_on(&cfg, &subject, &inputs).unwrap();
    let mut steps: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
    for r in &out.records {
        let s = steps.entry((r.run, r.index)).or_insert_with(|| r.steps.clone());
        assert_eq!(*s, r.steps);
        assert_eq!(r.steps.len(), 3);
        assert!(r.changed_positions.iter().all(|p| r.steps.contains(p)));
    }
    assert_eq!(steps.len(), 2 * inputs.len());
}

#[test]
fn coverage_only_on_fully_covered_tracker_generates_nothing() {
    let subject = classifier_subject(CellKind::Vanilla, 6);
    let inputs = classifier_inputs(10, 6);
    let mut cfg = config(TaskKind::SeqClassifier, "coverage_only:NC");
    cfg.nc_threshold = -0.99;
    let m = cfg.methodologies[0];
    let mut tracker = CoverageTracker::new(cfg.coverage_config(CoverageMetric::Nc)).unwrap();
    for ex in &inputs {
        let Example::Labeled { sequence, .. } = ex else { unreachable!() };
        let batch = statefuzz::rnn::Batch::continuous(std::slice::from_ref(sequence)).unwrap();
        let fwd = statefuzz::rnn::forward(&subject.model, &batch, None, true).unwrap();
        tracker.update(&fwd.trace.unwrap()).unwrap();
    }
    assert_eq!(tracker.ratio(), 1.0);
    assert_eq!(tracker.position_map().len(), 5 * 6);
    let (report, records, perts) = run_methodology(&cfg, &subject, &m, 0, &inputs, &[tracker]).unwrap();
    assert_eq!(report.metrics.rates.generation_rate, 0.0);
    assert!(perts.is_empty());
    assert!(records.iter().all(|r| r.targets == 0));

    let fresh = config(TaskKind::SeqClassifier, "coverage_only:NC");
    let (cold, _, _) = run_methodology(&fresh, &subject, &m, 0, &inputs, &[]).unwrap();
    assert!(cold.metrics.rates.generated > 0);
}

#[test]
fn cell_coverage_on_non_lstm_is_rejected() {
    let subject = classifier_subject(CellKind::Gru, 1);
    let cfg = config(TaskKind::SeqClassifier, "rnn_test_joint:CS_C");
    let err = run_campaign_on(&cfg, &subject, &classifier_inputs(2, 1)).unwrap_err();
    assert!(matches!(err, Error::MetricMismatch { .. }), "{err}");
}

#[test]
fn task_kind_must_match_head() {
    let cfg = RnnConfig::classifier(CellKind::Lstm, 1, 4, 3, 2);
    let model = Model::init(cfg, 1).unwrap();
    assert!(matches!(Subject::new(model, TaskKind::CharLm, None), Err(Error::Config(_))));
}

#[test]
fn classifier_perturbations_respect_the_budget() {
    let subject = classifier_subject(CellKind::Lstm, 8);
    let inputs = classifier_inputs(12, 8);
    let mut cfg = config(TaskKind::SeqClassifier, "rnn_test_joint:HS_C,fgsm_loss,random_baseline");
    cfg.step_policy = "k_random_steps(4)".parse().unwrap();
    let out = run_campaign_on(&cfg, &subject, &inputs).unwrap();
    for p in &out.perturbations {
        let norm = p.delta.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - p.l2).abs() < 1e-9);
        assert!(p.l2 <= cfg.synthesis.epsilon + 1e-12);
        assert_eq!(p.shape, vec![5, 3]);
    }
    for r in out.records.iter().filter(|r| r.outcome.is_some_and(|o| o.reduced())) {
        assert_ne!(r.original.unwrap().label, r.adversarial.unwrap().label);
    }
}

#[test]
fn files_round_trip_through_the_config_driven_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let examples: Vec<Example> = (0..40)
        .map(|i| {
            let label = i % 3;
            Example::Labeled {
                sequence: Tensor::from_fn(&[4, 2], |j| {
                    let base = if j % 3 == label { 1.0 } else { 0.0 };
                    base + rng.random_range(-0.1..0.1)
                }),
                label,
            }
        })
        .collect();
    write_sequence_dataset(&root.join("train.csv"), &examples).unwrap();
    write_sequence_dataset(&root.join("test.csv"), &examples[..10]).unwrap();
    let kv = |s: String| KeyValues::parse(&s).unwrap();
    let job = TrainJob::from_kv(kv(format!(
        "task_kind = seq_classifier\ndata = {0}/train.csv\ntest_data = {0}/test.csv\n\
         checkpoint = {0}/m.ckpt\noutput_dir = {0}\nstate_size = 6\nsequence_steps = 4\n\
         input_dim = 2\nnum_classes = 3\nepochs = 3\n",
        root.display()
    )))
    .unwrap();
    let summary = run_train_job(&job).unwrap();
    assert_eq!(summary.history.len(), 3);
    assert!(summary.test_accuracy.is_some());

    let cfg = CampaignConfig::from_kv(kv(format!(
        "checkpoint = {0}/m.ckpt\ntask_kind = seq_classifier\ntest_set = {0}/test.csv\n\
         sequence_steps = 4\nobjectives = rnn_test_joint:HS_C, random_baseline\nnum_runs = 2\n\
         output_dir = {0}/c\n",
        root.display()
    )))
    .unwrap();
    let out = run_campaign(&cfg).unwrap();
    assert_eq!(out.report.test_inputs, 10);
    assert_eq!(out.records.len(), 2 * 2 * 10);

    let mut missing = cfg.clone();
    missing.test_set = root.join("nope.csv");
    assert!(matches!(run_campaign(&missing), Err(Error::Config(_))));
    let mut wrong = cfg.clone();
    wrong.task_kind = TaskKind::CharLm;
    assert!(matches!(run_campaign(&wrong), Err(Error::Config(_))));
}

fn tiny_train_config(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        learning_rate: 1.0,
        lr_decay: 0.5,
        decay_after: 2,
        batch_size: 4,
        clip_norm: 5.0,
        seed: 3,
    }
}

#[test]
fn null_augmentation_and_zero_epochs_change_nothing() {
    let corpus = split_text(&TEXT.repeat(10)).unwrap();
    let cfg = RnnConfig::language_model(CellKind::Lstm, 1, 6, corpus.vocabulary.len(), 4);
    let base = Model::init(cfg, 1).unwrap();
    let tr = token_windows(&corpus.train, 10);
    let va = token_windows(&corpus.valid, 10);
    let te = token_windows(&corpus.test, 10);

    let r = retrain_experiment(&base, &tr, &va, &te, &[], 2, &tiny_train_config(3)).unwrap();
    assert_eq!(r.rows.len(), 3);
    for row in &r.rows {
        assert_eq!(row.train_original.to_bits(), row.train_augmented.to_bits());
        assert_eq!(row.valid_original.to_bits(), row.valid_augmented.to_bits());
        assert_eq!(row.train_increment_pct, 0.0);
    }
    assert_eq!(r.test_original.to_bits(), r.test_augmented.to_bits());

    let adv = tr[..3].to_vec();
    let r = retrain_experiment(&base, &tr, &va, &te, &adv, 1, &tiny_train_config(0)).unwrap();
    assert!(r.rows.is_empty());
    assert_eq!(r.test_original.to_bits(), r.test_augmented.to_bits());
}

#[test]
fn retraining_rejects_foreign_vocabulary() {
    let dir = tempfile::tempdir().unwrap();
    let corpus_path = dir.path().join("c.txt");
    std::fs::write(&corpus_path, TEXT.repeat(10)).unwrap();
    let other = Vocabulary::from_text("abc\n");
    let cfg = RnnConfig::language_model(CellKind::Lstm, 1, 4, other.len(), 3);
    let ckpt_path = dir.path().join("m.ckpt");
    Checkpoint::new(Model::init(cfg, 1).unwrap(), Some(other.tokens()))
        .unwrap()
        .save(&ckpt_path)
        .unwrap();
    let mut job = RetrainJob::new(ckpt_path, corpus_path);
    job.train = tiny_train_config(1);
    job.repetitions = 1;
    assert!(matches!(run_retrain(&job), Err(Error::Input(_))));

    let (subject, vocab) = lm_subject(CellKind::Lstm, 9);
    let cfg = config(TaskKind::CharLm, "random_baseline");
    let out = run_campaign_on(&cfg, &subject, &lm_inputs(&vocab, 3)).unwrap();
    assert!(!out.perturbations.is_empty());
    assert!(adversarial_windows(&out.perturbations, &vocab, None).is_ok());
    let narrow = Vocabulary::from_text("xyz");
    assert!(adversarial_windows(&out.perturbations, &narrow, None).is_err());
    let none = adversarial_windows(&out.perturbations, &vocab, Some("fgsm_loss")).unwrap();
    assert!(none.is_empty());
    assert_eq!(ObjectiveKind::RandomBaseline.to_string(), out.perturbations[0].methodology);
}
