//! Campaign orchestration: model training, ingestion, testing campaigns,
//! reports and the retraining experiment.

pub mod campaign;
pub mod config;
pub mod data;
pub mod report;
pub mod retrain;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use campaign::{run_campaign, run_campaign_on, CampaignOutput, InputRecord, PerturbationRecord, Subject};
pub use config::{CampaignConfig, KeyValues, Methodology, RetrainJob, TaskKind, TrainJob};
pub use report::CampaignReport;
pub use retrain::{retrain_experiment, run_retrain, RetrainReport};

use crate::error::{Error, Result};
use crate::rnn::checkpoint::Checkpoint;
use crate::rnn::train::{evaluate_accuracy, evaluate_perplexity, token_windows, train, EpochStats};
use crate::rnn::{Model, RnnConfig};

/// Environment variable that overrides every configured output directory.
pub const OUTPUT_DIR_ENV: &str = "STATEFUZZ_OUTPUT_DIR";

/// Result of a training job, written as `train.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub task_kind: TaskKind,
    pub config: RnnConfig,
    pub history: Vec<EpochStats>,
    pub final_valid_perplexity: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub test_perplexity: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub test_accuracy: Option<f64>,
    pub checkpoint: PathBuf,
    /// Held-out text written for char_lm jobs.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub test_text: Option<PathBuf>,
}

pub const TRAIN_SUMMARY: &str = "train.json";
pub const TEST_TEXT: &str = "test.txt";

/// Trains a model per `job`, saves the checkpoint and writes `train.json`
/// (and `test.txt` for language models) to the output directory.
pub fn run_train_job(job: &TrainJob) -> Result<TrainSummary> {
    let out_dir = &job.output_dir;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let summary = match job.task_kind {
        TaskKind::CharLm => {
            let corpus = data::ingest_text_corpus(&job.data)?;
            let config = RnnConfig::language_model(
                job.cell_kind,
                job.num_layers,
                job.state_size,
                corpus.vocabulary.len(),
                job.embedding_dim,
            );
            let model = Model::init(config.clone(), job.train.seed)?;
            let tr = token_windows(&corpus.train, job.seq_len);
            let va = token_windows(&corpus.valid, job.seq_len);
            let te = token_windows(&corpus.test, job.seq_len);
            let trained = train(&model, &tr, &va, &job.train)?;
            let test_perplexity = if te.is_empty() {
                None
            } else {
                Some(evaluate_perplexity(&trained.model, &te, job.train.batch_size)?)
            };
            save(&job.checkpoint, trained.model, Some(corpus.vocabulary.tokens()))?;
            let test_path = out_dir.join(TEST_TEXT);
            std::fs::write(&test_path, corpus.test_text()).map_err(|e| Error::io(&test_path, e))?;
            TrainSummary {
                task_kind: job.task_kind,
                config,
                final_valid_perplexity: trained.history.last().map(|h| h.valid_perplexity),
                history: trained.history,
                test_perplexity,
                test_accuracy: None,
                checkpoint: job.checkpoint.clone(),
                test_text: Some(test_path),
            }
        }
        TaskKind::SeqClassifier => {
            let load = |p: &Path| {
                data::ingest_sequence_dataset(p, job.sequence_steps, job.input_dim, job.num_classes)
            };
            let tr = load(&job.data)?;
            let te = match &job.test_data {
                Some(p) => load(p)?,
                None => Vec::new(),
            };
            let config = RnnConfig::classifier(
                job.cell_kind,
                job.num_layers,
                job.state_size,
                job.input_dim,
                job.num_classes,
            );
            let model = Model::init(config.clone(), job.train.seed)?;
            let trained = train(&model, &tr, &te, &job.train)?;
            let test_accuracy = if te.is_empty() {
                None
            } else {
                Some(evaluate_accuracy(&trained.model, &te, job.train.batch_size)?)
            };
            save(&job.checkpoint, trained.model, None)?;
            TrainSummary {
                task_kind: job.task_kind,
                config,
                final_valid_perplexity: trained.history.last().map(|h| h.valid_perplexity),
                history: trained.history,
                test_perplexity: None,
                test_accuracy,
                checkpoint: job.checkpoint.clone(),
                test_text: None,
            }
        }
    };
    let path = out_dir.join(TRAIN_SUMMARY);
    std::fs::write(&path, serde_json::to_string_pretty(&summary)? + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(summary)
}

fn save(path: &Path, model: Model, tokens: Option<Vec<String>>) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    Checkpoint::new(model, tokens)?.save(path)
}
