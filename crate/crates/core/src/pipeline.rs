//! Two-stage inference: a question-plausibility model followed by a
//! response-plausibility + answer-extraction model, and corpus cleaning on top.

use std::path::PathBuf;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::dataset::{filter_where_questions, AnswerSpan, LabelClass, QAExample, Scores};
use crate::model::{forward_example, predict_span, ModelError, ModelOutput};
use crate::tokenizer::{encode_pair, TokenizedInput, TokenizerError, Vocab};

pub const HIST_BINS: usize = 10;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid pipeline config: {0}")]
    Config(String),
    #[error("{stage} model was trained with vocabulary {found}, expected {expected}")]
    VocabMismatch {
        stage: &'static str,
        expected: String,
        found: String,
    },
    #[error("example {id}: {source}")]
    Tokenize {
        id: String,
        #[source]
        source: TokenizerError,
    },
    #[error("example {id}: {source}")]
    Model {
        id: String,
        #[source]
        source: ModelError,
    },
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

/// Anything that maps a packed input to head outputs. Implemented by trained
/// checkpoints; tests substitute hand-built oracles.
pub trait StageModel: Send + Sync {
    fn max_len(&self) -> usize;
    fn vocab_hash(&self) -> &str;
    fn score(&self, input: &TokenizedInput) -> Result<ModelOutput, ModelError>;
}

impl StageModel for Checkpoint {
    fn max_len(&self) -> usize {
        self.config.max_len
    }

    fn vocab_hash(&self) -> &str {
        &self.vocab_hash
    }

    fn score(&self, input: &TokenizedInput) -> Result<ModelOutput, ModelError> {
        forward_example(&self.params, &self.config, input, None).map(|(out, _)| out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub qp_threshold: f64,
    pub rp_threshold: f64,
    pub max_answer_tokens: Option<usize>,
    /// Single-task question-plausibility model.
    pub qp_checkpoint: Option<PathBuf>,
    /// Multi-task response-plausibility + answer-extraction model.
    pub rpae_checkpoint: Option<PathBuf>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            qp_threshold: 0.5,
            rp_threshold: 0.5,
            max_answer_tokens: None,
            qp_checkpoint: None,
            rpae_checkpoint: None,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        for (name, t) in [("qp_threshold", self.qp_threshold), ("rp_threshold", self.rp_threshold)] {
            if !(t > 0.0 && t < 1.0) {
                return Err(PipelineError::Config(format!("{name} must be in (0, 1), got {t}")));
            }
        }
        if self.max_answer_tokens == Some(0) {
            return Err(PipelineError::Config("max_answer_tokens must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub id: String,
    pub qp_score: f64,
    pub rp_score: f64,
    pub question_verdict: bool,
    pub response_verdict: bool,
    /// Present exactly when `response_verdict` holds; a substring of the response.
    pub extracted_answer: Option<String>,
    pub answer_token_span: Option<(usize, usize)>,
    pub answer_char_span: Option<AnswerSpan>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerdictCounts {
    pub yy: usize,
    pub yn: usize,
    pub ny: usize,
    pub nn: usize,
    pub total: usize,
    pub where_removed: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub qp: f64,
    pub rp: f64,
}

/// Summary of a cleaning run. `total` counts the scored examples, i.e. the
/// input minus removed where-questions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub counts: VerdictCounts,
    pub qp_hist: [usize; HIST_BINS],
    pub rp_hist: [usize; HIST_BINS],
    pub thresholds: Thresholds,
}

impl AuditReport {
    pub fn empty(config: &PipelineConfig) -> Self {
        Self {
            counts: VerdictCounts::default(),
            qp_hist: [0; HIST_BINS],
            rp_hist: [0; HIST_BINS],
            thresholds: Thresholds {
                qp: config.qp_threshold,
                rp: config.rp_threshold,
            },
        }
    }

    /// Tallies one prediction.
    pub fn add(&mut self, record: &PredictionRecord) {
        match LabelClass::from_flags(record.question_verdict, record.response_verdict) {
            LabelClass::Yy => self.counts.yy += 1,
            LabelClass::Yn => self.counts.yn += 1,
            LabelClass::Ny => self.counts.ny += 1,
            LabelClass::Nn => self.counts.nn += 1,
        }
        self.counts.total += 1;
        self.qp_hist[hist_bin(record.qp_score)] += 1;
        self.rp_hist[hist_bin(record.rp_score)] += 1;
    }
}

/// Equal-width bin over [0, 1]; a score of exactly 1 falls in the last bin.
pub fn hist_bin(score: f64) -> usize {
    ((score.clamp(0.0, 1.0) * HIST_BINS as f64).floor() as usize).min(HIST_BINS - 1)
}

#[derive(Debug, Clone)]
pub struct CleanOutcome {
    /// Examples judged plausible on both counts, with predicted labels and scores.
    pub cleaned: Vec<QAExample>,
    pub audit: AuditReport,
    /// One record per scored example, in input order.
    pub records: Vec<PredictionRecord>,
}

pub struct Pipeline {
    question_model: Box<dyn StageModel>,
    response_model: Box<dyn StageModel>,
    vocab: Vocab,
    config: PipelineConfig,
}

impl Pipeline {
    /// Both models must carry the hash of `vocab`.
    pub fn new(
        question_model: Box<dyn StageModel>,
        response_model: Box<dyn StageModel>,
        vocab: Vocab,
        config: PipelineConfig,
    ) -> Result<Self, PipelineError> {
        config.validate()?;
        let expected = vocab.hash();
        for (stage, m) in [("question", &question_model), ("response", &response_model)] {
            if m.vocab_hash() != expected {
                return Err(PipelineError::VocabMismatch {
                    stage,
                    expected: expected.clone(),
                    found: m.vocab_hash().to_string(),
                });
            }
        }
        Ok(Self {
            question_model,
            response_model,
            vocab,
            config,
        })
    }

    /// Loads both checkpoints named in `config`.
    pub fn from_config(config: PipelineConfig, vocab: Vocab) -> Result<Self, PipelineError> {
        let load = |p: &Option<PathBuf>, key: &str| -> Result<Box<dyn StageModel>, PipelineError> {
            let path = p
                .as_ref()
                .ok_or_else(|| PipelineError::Config(format!("{key} is not set")))?;
            Ok(Box::new(Checkpoint::load(path)?))
        };
        let q = load(&config.qp_checkpoint, "qp_checkpoint")?;
        let r = load(&config.rpae_checkpoint, "rpae_checkpoint")?;
        Self::new(q, r, vocab, config)
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    fn run_stage(
        &self,
        model: &dyn StageModel,
        example: &QAExample,
    ) -> Result<(TokenizedInput, ModelOutput), PipelineError> {
        let input =
            encode_pair(&example.question, &example.response, &self.vocab, model.max_len()).map_err(|source| {
                PipelineError::Tokenize {
                    id: example.id.clone(),
                    source,
                }
            })?;
        let out = model.score(&input).map_err(|source| PipelineError::Model {
            id: example.id.clone(),
            source,
        })?;
        Ok((input, out))
    }

    /// Scores one example with both stages. Stage 2 runs regardless of the
    /// question verdict; an answer is decoded only when the response passes.
    pub fn infer(&self, example: &QAExample) -> Result<PredictionRecord, PipelineError> {
        let (_, q_out) = self.run_stage(self.question_model.as_ref(), example)?;
        let (input, r_out) = self.run_stage(self.response_model.as_ref(), example)?;
        let qp_score = q_out.qp_score();
        let rp_score = r_out.rp_score();
        let question_verdict = qp_score >= self.config.qp_threshold;
        let response_verdict = rp_score >= self.config.rp_threshold;
        let mut record = PredictionRecord {
            id: example.id.clone(),
            qp_score,
            rp_score,
            question_verdict,
            response_verdict,
            extracted_answer: None,
            answer_token_span: None,
            answer_char_span: None,
        };
        if response_verdict {
            let (s, e) =
                predict_span(&r_out, &input, self.config.max_answer_tokens).ok_or_else(|| PipelineError::Model {
                    id: example.id.clone(),
                    source: ModelError::NoResponseTokens,
                })?;
            let span = input
                .token_span_to_char_span(s, e)
                .expect("decoded span lies on response tokens");
            record.extracted_answer = span.slice(&example.response).map(str::to_string);
            record.answer_token_span = Some((s, e));
            record.answer_char_span = Some(span);
        }
        Ok(record)
    }

    /// Removes where-questions, scores the rest, and keeps the examples judged
    /// plausible on both counts with their extracted answers as span labels.
    pub fn clean_dataset(&self, examples: Vec<QAExample>) -> Result<CleanOutcome, PipelineError> {
        let (kept, removed) = filter_where_questions(examples);
        let records: Vec<PredictionRecord> = kept.par_iter().map(|ex| self.infer(ex)).collect::<Result<_, _>>()?;
        let mut audit = AuditReport::empty(&self.config);
        audit.counts.where_removed = removed.len();
        let mut cleaned = Vec::new();
        for (ex, rec) in kept.into_iter().zip(&records) {
            audit.add(rec);
            if rec.question_verdict && rec.response_verdict {
                cleaned.push(QAExample {
                    question_plausible: Some(true),
                    response_plausible: Some(true),
                    answer: rec.answer_char_span,
                    scores: Some(Scores {
                        qp: rec.qp_score,
                        rp: rec.rp_score,
                    }),
                    ..ex
                });
            }
        }
        Ok(CleanOutcome {
            cleaned,
            audit,
            records,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Tensor;
    use crate::tokenizer::build_vocab;

    /// Scores fixed per call site; span mass on the last response token.
    struct Fixed {
        hash: String,
        qp: f64,
        rp: f64,
    }

    impl StageModel for Fixed {
        fn max_len(&self) -> usize {
            24
        }
        fn vocab_hash(&self) -> &str {
            &self.hash
        }
        fn score(&self, input: &TokenizedInput) -> Result<ModelOutput, ModelError> {
            let t = input.len();
            let last = input
                .response_token_indices()
                .last()
                .ok_or(ModelError::NoResponseTokens)?;
            let mut dist = vec![0.0; t];
            dist[last] = 1.0;
            Ok(ModelOutput {
                qp_prob: [1.0 - self.qp, self.qp],
                rp_prob: [1.0 - self.rp, self.rp],
                start_dist: dist.clone(),
                end_dist: dist,
                hidden_states: Tensor::zeros(t, 1),
            })
        }
    }

    fn vocab() -> Vocab {
        build_vocab(&[QAExample::new("v", "what is it", "a dog")], 50).unwrap()
    }

    fn pipeline(qp: f64, rp: f64, config: PipelineConfig) -> Pipeline {
        let v = vocab();
        let h = v.hash();
        Pipeline::new(
            Box::new(Fixed {
                hash: h.clone(),
                qp,
                rp: 0.0,
            }),
            Box::new(Fixed { hash: h, qp: 0.0, rp }),
            v,
            config,
        )
        .unwrap()
    }

    #[test]
    fn answer_only_when_response_passes() {
        let ex = QAExample::new("1", "What is it?", "a big dog");
        let rec = pipeline(0.9, 0.8, PipelineConfig::default()).infer(&ex).unwrap();
        assert!(rec.question_verdict && rec.response_verdict);
        assert_eq!(rec.extracted_answer.as_deref(), Some("dog"));
        assert_eq!(rec.qp_score, 0.9);
        let rec = pipeline(0.9, 0.3, PipelineConfig::default()).infer(&ex).unwrap();
        assert!(!rec.response_verdict);
        assert_eq!(rec.extracted_answer, None);
        assert_eq!(rec.answer_token_span, None);
    }

    #[test]
    fn vocab_mismatch_rejected() {
        let v = vocab();
        let err = Pipeline::new(
            Box::new(Fixed {
                hash: v.hash(),
                qp: 0.5,
                rp: 0.5,
            }),
            Box::new(Fixed {
                hash: "other".into(),
                qp: 0.5,
                rp: 0.5,
            }),
            v,
            PipelineConfig::default(),
        );
        assert!(matches!(
            err,
            Err(PipelineError::VocabMismatch { stage: "response", .. })
        ));
    }

    #[test]
    fn thresholds_validated() {
        let cfg = PipelineConfig {
            rp_threshold: 1.0,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn empty_clean_is_all_zero() {
        let out = pipeline(0.9, 0.9, PipelineConfig::default())
            .clean_dataset(vec![])
            .unwrap();
        assert!(out.cleaned.is_empty());
        assert_eq!(out.audit, AuditReport::empty(&PipelineConfig::default()));
    }

    #[test]
    fn clean_filters_where_and_fills_labels() {
        let exs = vec![
            QAExample::new("a", "Where is the dog?", "on the sofa"),
            QAExample::new("b", "What is it?", "a dog"),
        ];
        let out = pipeline(0.7, 1.0, PipelineConfig::default())
            .clean_dataset(exs)
            .unwrap();
        assert_eq!(out.audit.counts.where_removed, 1);
        assert_eq!(out.audit.counts.total, 1);
        assert_eq!(out.audit.counts.yy, 1);
        assert_eq!(out.audit.qp_hist[7], 1);
        assert_eq!(out.audit.rp_hist[9], 1);
        assert_eq!(out.cleaned.len(), 1);
        let c = &out.cleaned[0];
        assert_eq!(c.answer_text(), Some("dog"));
        assert_eq!(c.scores, Some(Scores { qp: 0.7, rp: 1.0 }));
        c.validate().unwrap();
    }

    #[test]
    fn audit_json_layout() {
        let json = serde_json::to_string(&AuditReport::empty(&PipelineConfig::default())).unwrap();
        assert_eq!(
            json,
            r#"{"counts":{"yy":0,"yn":0,"ny":0,"nn":0,"total":0,"where_removed":0},"qp_hist":[0,0,0,0,0,0,0,0,0,0],"rp_hist":[0,0,0,0,0,0,0,0,0,0],"thresholds":{"qp":0.5,"rp":0.5}}"#
        );
    }

    #[test]
    fn histogram_edges() {
        assert_eq!(hist_bin(0.0), 0);
        assert_eq!(hist_bin(0.0999), 0);
        assert_eq!(hist_bin(0.1), 1);
        assert_eq!(hist_bin(1.0), 9);
    }
}
