//! Multi-task loss with per-example span-loss masking, the Adam training loop
//! with validation-based checkpoint selection, and the five-variant task grid.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::QAExample;
use crate::metrics::{self, ScoredLabel};
use crate::model::{self, predict_span, Mode, ModelConfig, ModelError, ModelOutput, ModelParams};
use crate::tokenizer::{encode_pair, TokenizedInput, TokenizerError, Vocab};

/// Which of question plausibility (QP), response plausibility (RP) and
/// answer extraction (AE) contribute to the loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TaskSet {
    pub qp: bool,
    pub rp: bool,
    pub ae: bool,
}

impl TaskSet {
    pub const QP: TaskSet = TaskSet {
        qp: true,
        rp: false,
        ae: false,
    };
    pub const RP: TaskSet = TaskSet {
        qp: false,
        rp: true,
        ae: false,
    };
    pub const AE: TaskSet = TaskSet {
        qp: false,
        rp: false,
        ae: true,
    };
    pub const RP_AE: TaskSet = TaskSet {
        qp: false,
        rp: true,
        ae: true,
    };
    pub const ALL: TaskSet = TaskSet {
        qp: true,
        rp: true,
        ae: true,
    };

    /// The five compared configurations, in reporting order.
    pub const GRID: [TaskSet; 5] = [TaskSet::QP, TaskSet::RP, TaskSet::AE, TaskSet::RP_AE, TaskSet::ALL];

    pub fn new(qp: bool, rp: bool, ae: bool) -> Result<Self, TaskSetError> {
        if !(qp || rp || ae) {
            return Err(TaskSetError::Empty);
        }
        Ok(Self { qp, rp, ae })
    }

    /// Row label used in the grid table.
    pub fn label(&self) -> String {
        match *self {
            TaskSet::QP => "QP only".into(),
            TaskSet::RP => "RP only".into(),
            TaskSet::AE => "AE only".into(),
            TaskSet::RP_AE => "RP and AE".into(),
            TaskSet::ALL => "QP, RP and AE".into(),
            other => other.to_string(),
        }
    }
}

impl fmt::Display for TaskSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<&str> = [(self.qp, "qp"), (self.rp, "rp"), (self.ae, "ae")]
            .iter()
            .filter(|(on, _)| *on)
            .map(|(_, n)| *n)
            .collect();
        f.write_str(&parts.join("+"))
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TaskSetError {
    #[error("task set must contain at least one of qp, rp, ae")]
    Empty,
    #[error("unknown task `{0}` (expected qp, rp or ae)")]
    Unknown(String),
}

impl FromStr for TaskSet {
    type Err = TaskSetError;

    /// Accepts names joined by `+` or `,`, e.g. `rp+ae`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (mut qp, mut rp, mut ae) = (false, false, false);
        for part in s.split(['+', ',']).map(str::trim).filter(|p| !p.is_empty()) {
            match part.to_ascii_lowercase().as_str() {
                "qp" => qp = true,
                "rp" => rp = true,
                "ae" => ae = true,
                other => return Err(TaskSetError::Unknown(other.to_string())),
            }
        }
        TaskSet::new(qp, rp, ae)
    }
}

/// Supervision for one example, in token coordinates.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Targets {
    pub id: String,
    pub question_plausible: Option<bool>,
    pub response_plausible: Option<bool>,
    /// Inclusive token indices of the gold answer.
    pub span: Option<(usize, usize)>,
    /// The labeled answer fell outside the (truncated) input.
    pub span_lost: bool,
}

impl Targets {
    pub fn from_example(example: &QAExample, input: &TokenizedInput) -> Self {
        let (span, span_lost) = match example.answer {
            Some(a) => match input.char_span_to_token_span(a) {
                Ok(s) => (Some(s), false),
                Err(_) => (None, true),
            },
            None => (None, false),
        };
        Self {
            id: example.id.clone(),
            question_plausible: example.question_plausible,
            response_plausible: example.response_plausible,
            span,
            span_lost,
        }
    }

    /// Whether this example's span term is zeroed.
    pub fn span_masked(&self) -> bool {
        self.response_plausible == Some(false) || self.span_lost
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum LossError {
    #[error("example {id}: missing {task} label required by the active task set")]
    MissingLabel { id: String, task: &'static str },
}

/// Loss terms of one batch. Inactive terms are 0.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct LossReport {
    pub total: f64,
    pub qp_term: f64,
    pub rp_term: f64,
    pub ae_term: f64,
    /// Examples whose span term was zeroed.
    pub span_masked: usize,
}

/// Gradient of the batch loss with respect to one example's head logits.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitGrads {
    pub qp: [f64; 2],
    pub rp: [f64; 2],
    pub start: Vec<f64>,
    pub end: Vec<f64>,
}

impl LogitGrads {
    fn zeros(t: usize) -> Self {
        Self {
            qp: [0.0; 2],
            rp: [0.0; 2],
            start: vec![0.0; t],
            end: vec![0.0; t],
        }
    }

    pub fn is_zero(&self) -> bool {
        self.qp
            .iter()
            .chain(&self.rp)
            .chain(&self.start)
            .chain(&self.end)
            .all(|&g| g == 0.0)
    }
}

fn class_ce(prob: &[f64; 2], label: bool, scale: f64, grad: &mut [f64; 2]) -> f64 {
    let k = usize::from(label);
    for (j, g) in grad.iter_mut().enumerate() {
        *g = scale * (prob[j] - if j == k { 1.0 } else { 0.0 });
    }
    -prob[k].ln()
}

fn dist_ce(dist: &[f64], gold: usize, scale: f64, grad: &mut [f64]) -> f64 {
    for (j, (g, p)) in grad.iter_mut().zip(dist).enumerate() {
        *g = scale * (p - if j == gold { 1.0 } else { 0.0 });
    }
    -dist[gold].ln()
}

/// Loss terms plus per-example logit gradients.
///
/// QP and RP terms are batch-mean cross-entropies. The AE term averages
/// `(CE(start) + CE(end)) / 2` over examples with a plausible response and a
/// surviving span; every other example contributes exactly zero to it and to
/// its gradient. `total = sum_t weight_t * term_t` over active tasks.
pub fn loss_with_logit_grads(
    outputs: &[&ModelOutput],
    targets: &[Targets],
    taskset: TaskSet,
    weights: [f64; 3],
) -> Result<(LossReport, Vec<LogitGrads>), LossError> {
    assert_eq!(outputs.len(), targets.len(), "outputs/targets length mismatch");
    let b = outputs.len();
    let mut grads: Vec<LogitGrads> = outputs.iter().map(|o| LogitGrads::zeros(o.start_dist.len())).collect();
    let mut report = LossReport::default();
    if b == 0 {
        return Ok((report, grads));
    }

    let missing = |t: &Targets, task| LossError::MissingLabel { id: t.id.clone(), task };
    if taskset.qp {
        let scale = weights[0] / b as f64;
        let mut sum = 0.0;
        for ((o, t), g) in outputs.iter().zip(targets).zip(&mut grads) {
            let label = t.question_plausible.ok_or_else(|| missing(t, "question_plausible"))?;
            sum += class_ce(&o.qp_prob, label, scale, &mut g.qp);
        }
        report.qp_term = sum / b as f64;
    }
    if taskset.rp {
        let scale = weights[1] / b as f64;
        let mut sum = 0.0;
        for ((o, t), g) in outputs.iter().zip(targets).zip(&mut grads) {
            let label = t.response_plausible.ok_or_else(|| missing(t, "response_plausible"))?;
            sum += class_ce(&o.rp_prob, label, scale, &mut g.rp);
        }
        report.rp_term = sum / b as f64;
    }
    if taskset.ae {
        let mut active = Vec::new();
        for (i, t) in targets.iter().enumerate() {
            if t.span_masked() {
                report.span_masked += 1;
            } else {
                active.push((i, t.span.ok_or_else(|| missing(t, "answer"))?));
            }
        }
        if !active.is_empty() {
            let n = active.len() as f64;
            let scale = 0.5 * weights[2] / n;
            let mut sum = 0.0;
            for (i, (s, e)) in active {
                let o = outputs[i];
                let g = &mut grads[i];
                sum +=
                    0.5 * (dist_ce(&o.start_dist, s, scale, &mut g.start) + dist_ce(&o.end_dist, e, scale, &mut g.end));
            }
            report.ae_term = sum / n;
        }
    }
    report.total = weights[0] * report.qp_term + weights[1] * report.rp_term + weights[2] * report.ae_term;
    Ok((report, grads))
}

/// Unweighted multi-task loss of a batch.
pub fn compute_loss(outputs: &[ModelOutput], targets: &[Targets], taskset: TaskSet) -> Result<LossReport, LossError> {
    let refs: Vec<&ModelOutput> = outputs.iter().collect();
    loss_with_logit_grads(&refs, targets, taskset, [1.0; 3]).map(|(r, _)| r)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Bias-corrected Adam without weight decay or warmup.
#[derive(Debug, Clone)]
pub struct Adam {
    config: AdamConfig,
    step: i32,
    m: ModelParams,
    v: ModelParams,
}

impl Adam {
    pub fn new(params: &ModelParams, config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }

    pub fn step(&mut self, params: &mut ModelParams, grads: &ModelParams, lr: f64) {
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powi(self.step);
        let c2 = 1.0 - beta2.powi(self.step);
        let tensors = params
            .tensors_mut()
            .into_iter()
            .zip(grads.tensors())
            .zip(self.m.tensors_mut())
            .zip(self.v.tensors_mut());
        for (((p, g), m), v) in tensors {
            for (((p, &g), m), v) in p.data.iter_mut().zip(&g.data).zip(&mut m.data).zip(&mut v.data) {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub seed: u64,
    pub taskset: TaskSet,
    /// Epochs without validation improvement tolerated before stopping.
    pub patience: usize,
    /// Multipliers of the QP, RP and AE terms.
    pub task_weights: [f64; 3],
    pub adam: AdamConfig,
    /// Length limit used when decoding spans for validation F1.
    pub max_answer_tokens: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 3e-4,
            batch_size: 16,
            max_epochs: 20,
            seed: 0,
            taskset: TaskSet::ALL,
            patience: 5,
            task_weights: [1.0; 3],
            adam: AdamConfig::default(),
            max_answer_tokens: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(TrainError::Config("learning_rate must be > 0".into()));
        }
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch_size must be >= 1".into()));
        }
        if self.task_weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(TrainError::Config("task weights must be finite and >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("example {id}: {source}")]
    Tokenize {
        id: String,
        #[source]
        source: TokenizerError,
    },
    #[error("training corpus is empty")]
    EmptyTrain,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error("training diverged in epoch {epoch}: {message}")]
    Diverged {
        epoch: usize,
        message: String,
        /// Best finite checkpoint reached before divergence.
        last_finite: Box<ModelParams>,
        log: Vec<EpochLog>,
    },
}

/// An example together with its packed input and token-level targets.
#[derive(Debug, Clone)]
pub struct EncodedExample {
    pub example: QAExample,
    pub input: TokenizedInput,
    pub targets: Targets,
}

pub fn encode_examples(
    examples: &[QAExample],
    vocab: &Vocab,
    max_len: usize,
) -> Result<Vec<EncodedExample>, TrainError> {
    examples
        .iter()
        .map(|ex| {
            let input =
                encode_pair(&ex.question, &ex.response, vocab, max_len).map_err(|source| TrainError::Tokenize {
                    id: ex.id.clone(),
                    source,
                })?;
            let targets = Targets::from_example(ex, &input);
            Ok(EncodedExample {
                example: ex.clone(),
                input,
                targets,
            })
        })
        .collect()
}

/// Metrics of one model on one corpus; `None` where a task is inactive or the
/// metric is undefined (e.g. AUROC on single-class data).
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct EvalMetrics {
    pub qp_acc: Option<f64>,
    pub qp_auroc: Option<f64>,
    pub rp_acc: Option<f64>,
    pub rp_auroc: Option<f64>,
    pub ae_f1: Option<f64>,
    pub ae_exact: Option<f64>,
    pub loss: Option<f64>,
}

impl EvalMetrics {
    /// Model-selection score: mean AUROC of the active classification tasks,
    /// or span F1 when answer extraction is the only task.
    pub fn selection_score(&self, taskset: TaskSet) -> Option<f64> {
        if !taskset.qp && !taskset.rp {
            return if taskset.ae { self.ae_f1 } else { None };
        }
        let parts: Vec<f64> = [(taskset.qp, self.qp_auroc), (taskset.rp, self.rp_auroc)]
            .iter()
            .filter_map(|(on, v)| if *on { *v } else { None })
            .collect();
        (!parts.is_empty()).then(|| parts.iter().sum::<f64>() / parts.len() as f64)
    }
}

fn classification_metrics(scored: &[ScoredLabel]) -> (Option<f64>, Option<f64>) {
    (metrics::accuracy(scored, 0.5).ok(), metrics::auroc(scored).ok())
}

/// Eval-mode metrics for the tasks in `taskset`. Span F1 is computed over
/// examples with a gold answer, decoding every one of them.
pub fn evaluate(
    params: &ModelParams,
    config: &ModelConfig,
    data: &[EncodedExample],
    taskset: TaskSet,
    max_answer_tokens: Option<usize>,
) -> Result<EvalMetrics, ModelError> {
    let inputs: Vec<TokenizedInput> = data.iter().map(|e| e.input.clone()).collect();
    let outputs = model::forward_eval(params, config, &inputs)?;
    let mut m = EvalMetrics::default();
    if data.is_empty() {
        return Ok(m);
    }
    if taskset.qp {
        let scored: Vec<ScoredLabel> = outputs
            .iter()
            .zip(data)
            .filter_map(|(o, e)| e.example.question_plausible.map(|l| ScoredLabel::new(o.qp_score(), l)))
            .collect();
        (m.qp_acc, m.qp_auroc) = classification_metrics(&scored);
    }
    if taskset.rp {
        let scored: Vec<ScoredLabel> = outputs
            .iter()
            .zip(data)
            .filter_map(|(o, e)| e.example.response_plausible.map(|l| ScoredLabel::new(o.rp_score(), l)))
            .collect();
        (m.rp_acc, m.rp_auroc) = classification_metrics(&scored);
    }
    if taskset.ae {
        let pairs: Vec<(String, String)> = outputs
            .iter()
            .zip(data)
            .filter_map(|(o, e)| {
                let gold = e.example.answer_text()?;
                let pred = predict_span(o, &e.input, max_answer_tokens)
                    .and_then(|(s, t)| e.input.token_span_to_substring(&e.example.response, s, t))
                    .unwrap_or("");
                Some((pred.to_string(), gold.to_string()))
            })
            .collect();
        m.ae_f1 = metrics::corpus_f1(&pairs).ok();
        m.ae_exact = metrics::corpus_exact_match(&pairs).ok();
    }
    let targets: Vec<Targets> = data.iter().map(|e| e.targets.clone()).collect();
    m.loss = compute_loss(&outputs, &targets, taskset).ok().map(|r| r.total);
    Ok(m)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub qp_loss: f64,
    pub rp_loss: f64,
    pub ae_loss: f64,
    pub val: EvalMetrics,
    pub selection_score: f64,
    pub improved: bool,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Config of the trained model; `active_tasks` is the training task set.
    pub config: ModelConfig,
    /// Parameters of the best validation epoch (the initial ones when no epoch ran).
    pub params: ModelParams,
    pub best_epoch: Option<usize>,
    pub log: Vec<EpochLog>,
}

/// Trains `init` on `train`, selecting the epoch with the best validation
/// score (see [`EvalMetrics::selection_score`]; ties go to the lower
/// validation loss). An empty `val` selects on training loss.
pub fn train(
    init: ModelParams,
    model_config: &ModelConfig,
    config: &TrainConfig,
    train_data: &[EncodedExample],
    val_data: &[EncodedExample],
) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    model_config.validate()?;
    if train_data.is_empty() {
        return Err(TrainError::EmptyTrain);
    }
    let mut model_config = model_config.clone();
    model_config.active_tasks = config.taskset;
    let taskset = config.taskset;

    let mut params = init;
    let mut best = params.clone();
    let mut best_key: Option<(f64, f64)> = None;
    let mut best_epoch = None;
    let mut stale = 0usize;
    let mut adam = Adam::new(&params, config.adam);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..train_data.len()).collect();
    let mut log = Vec::new();

    for epoch in 1..=config.max_epochs {
        order.shuffle(&mut rng);
        let mut sums = LossReport::default();
        for chunk in order.chunks(config.batch_size) {
            let inputs: Vec<TokenizedInput> = chunk.iter().map(|&i| train_data[i].input.clone()).collect();
            let targets: Vec<Targets> = chunk.iter().map(|&i| train_data[i].targets.clone()).collect();
            let step = model::backward(
                &params,
                &model_config,
                &inputs,
                &targets,
                taskset,
                config.task_weights,
                Mode::Train,
                &mut rng,
            );
            let (report, grads) = match step {
                Ok(ok) => ok,
                Err(ModelError::NonFinite(site)) => {
                    return Err(TrainError::Diverged {
                        epoch,
                        message: format!("non-finite activation in {site}"),
                        last_finite: Box::new(best),
                        log,
                    })
                }
                Err(e) => return Err(e.into()),
            };
            if !report.total.is_finite() || !grads.is_finite() {
                return Err(TrainError::Diverged {
                    epoch,
                    message: format!("non-finite loss {}", report.total),
                    last_finite: Box::new(best),
                    log,
                });
            }
            let w = chunk.len() as f64;
            sums.total += report.total * w;
            sums.qp_term += report.qp_term * w;
            sums.rp_term += report.rp_term * w;
            sums.ae_term += report.ae_term * w;
            adam.step(&mut params, &grads, config.learning_rate);
        }
        let n = train_data.len() as f64;
        let train_loss = sums.total / n;

        let val = evaluate(&params, &model_config, val_data, taskset, config.max_answer_tokens)?;
        let (score, tiebreak) = if val_data.is_empty() {
            (-train_loss, 0.0)
        } else {
            let loss = val.loss.unwrap_or(f64::INFINITY);
            (val.selection_score(taskset).unwrap_or(-loss), loss)
        };
        let improved = match best_key {
            None => true,
            Some((bs, bl)) => score > bs || (score == bs && tiebreak < bl),
        };
        if improved {
            best_key = Some((score, tiebreak));
            best = params.clone();
            best_epoch = Some(epoch);
            stale = 0;
        } else {
            stale += 1;
        }
        log.push(EpochLog {
            epoch,
            train_loss,
            qp_loss: sums.qp_term / n,
            rp_loss: sums.rp_term / n,
            ae_loss: sums.ae_term / n,
            val,
            selection_score: score,
            improved,
        });
        if stale > config.patience {
            break;
        }
    }
    Ok(TrainOutcome {
        config: model_config,
        params: best,
        best_epoch,
        log,
    })
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn csv_string(header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).expect("in-memory write");
    for row in rows {
        w.write_record(&row).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 csv")
}

pub const EPOCH_LOG_HEADER: [&str; 13] = [
    "epoch",
    "total_loss",
    "qp_loss",
    "rp_loss",
    "ae_loss",
    "val_qp_acc",
    "val_qp_auroc",
    "val_rp_acc",
    "val_rp_auroc",
    "val_ae_f1",
    "val_loss",
    "selection_score",
    "improved",
];

pub fn epoch_log_csv(log: &[EpochLog]) -> String {
    csv_string(
        &EPOCH_LOG_HEADER,
        log.iter().map(|e| {
            vec![
                e.epoch.to_string(),
                e.train_loss.to_string(),
                e.qp_loss.to_string(),
                e.rp_loss.to_string(),
                e.ae_loss.to_string(),
                cell(e.val.qp_acc),
                cell(e.val.qp_auroc),
                cell(e.val.rp_acc),
                cell(e.val.rp_auroc),
                cell(e.val.ae_f1),
                cell(e.val.loss),
                e.selection_score.to_string(),
                e.improved.to_string(),
            ]
        }),
    )
}

/// One row of the task-configuration comparison.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GridRow {
    pub variant: TaskSet,
    pub qp_acc: Option<f64>,
    pub qp_auroc: Option<f64>,
    pub rp_acc: Option<f64>,
    pub rp_auroc: Option<f64>,
    pub ae_f1: Option<f64>,
}

/// (variant, QP acc, QP AUROC, RP acc, RP AUROC, AE F1)
pub type ReferenceRow = (TaskSet, Option<f64>, Option<f64>, Option<f64>, Option<f64>, Option<f64>);

/// Published results of the full-scale study, for side-by-side reporting.
/// Not reproducible here and never asserted.
pub const REFERENCE_GRID: [ReferenceRow; 5] = [
    (TaskSet::QP, Some(0.6551), Some(0.7488), None, None, None),
    (TaskSet::RP, None, None, Some(0.6462), Some(0.7674), None),
    (TaskSet::AE, None, None, None, None, Some(0.568)),
    (TaskSet::RP_AE, None, None, Some(0.7013), Some(0.7870), Some(0.665)),
    (
        TaskSet::ALL,
        Some(0.6390),
        Some(0.6803),
        Some(0.6091),
        Some(0.6881),
        Some(0.6160),
    ),
];

pub const GRID_HEADER: [&str; 6] = ["variant", "qp_acc", "qp_auroc", "rp_acc", "rp_auroc", "ae_f1"];

pub fn grid_csv(rows: &[GridRow]) -> String {
    csv_string(
        &GRID_HEADER,
        rows.iter().map(|r| {
            vec![
                r.variant.label(),
                cell(r.qp_acc),
                cell(r.qp_auroc),
                cell(r.rp_acc),
                cell(r.rp_auroc),
                cell(r.ae_f1),
            ]
        }),
    )
}

/// Trains each of the five task configurations from the same initialization
/// and hyperparameters, and evaluates each on `test`. `on_variant` receives
/// every finished run (e.g. to save its checkpoint).
pub fn run_experiment_grid(
    train_data: &[EncodedExample],
    val_data: &[EncodedExample],
    test_data: &[EncodedExample],
    model_config: &ModelConfig,
    base: &TrainConfig,
    mut on_variant: impl FnMut(TaskSet, &TrainOutcome),
) -> Result<Vec<GridRow>, TrainError> {
    let mut rows = Vec::with_capacity(TaskSet::GRID.len());
    for variant in TaskSet::GRID {
        let config = TrainConfig {
            taskset: variant,
            ..base.clone()
        };
        let init = model::init_params(model_config, base.seed);
        let outcome = train(init, model_config, &config, train_data, val_data)?;
        let m = evaluate(
            &outcome.params,
            &outcome.config,
            test_data,
            variant,
            base.max_answer_tokens,
        )?;
        rows.push(GridRow {
            variant,
            qp_acc: m.qp_acc,
            qp_auroc: m.qp_auroc,
            rp_acc: m.rp_acc,
            rp_auroc: m.rp_auroc,
            ae_f1: m.ae_f1,
        });
        on_variant(variant, &outcome);
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Tensor;

    fn output(qp: f64, rp: f64, start: &[f64], end: &[f64]) -> ModelOutput {
        ModelOutput {
            qp_prob: [1.0 - qp, qp],
            rp_prob: [1.0 - rp, rp],
            start_dist: start.to_vec(),
            end_dist: end.to_vec(),
            hidden_states: Tensor::zeros(start.len(), 1),
        }
    }

    fn target(id: &str, q: bool, r: bool, span: Option<(usize, usize)>) -> Targets {
        Targets {
            id: id.into(),
            question_plausible: Some(q),
            response_plausible: Some(r),
            span,
            span_lost: false,
        }
    }

    #[test]
    fn taskset_parsing() {
        assert_eq!("rp+ae".parse::<TaskSet>().unwrap(), TaskSet::RP_AE);
        assert_eq!("QP, RP, AE".parse::<TaskSet>().unwrap(), TaskSet::ALL);
        assert_eq!("".parse::<TaskSet>(), Err(TaskSetError::Empty));
        assert!(matches!("qa".parse::<TaskSet>(), Err(TaskSetError::Unknown(_))));
        assert_eq!(TaskSet::ALL.to_string(), "qp+rp+ae");
        for t in TaskSet::GRID {
            assert_eq!(t.to_string().parse::<TaskSet>().unwrap(), t);
        }
    }

    #[test]
    fn hand_computed_cross_entropy() {
        // Two examples, four tokens, response tokens at 2 and 3.
        let outs = [
            output(0.8, 0.7, &[0.0, 0.0, 0.6, 0.4], &[0.0, 0.0, 0.3, 0.7]),
            output(0.4, 0.2, &[0.0, 0.0, 0.5, 0.5], &[0.0, 0.0, 0.5, 0.5]),
        ];
        let targets = [target("a", true, true, Some((2, 3))), target("b", false, false, None)];
        let r = compute_loss(&outs, &targets, TaskSet::ALL).unwrap();
        let qp = -(0.8f64.ln() + 0.6f64.ln()) / 2.0;
        let rp = -(0.7f64.ln() + 0.8f64.ln()) / 2.0;
        let ae = -(0.6f64.ln() + 0.7f64.ln()) / 2.0;
        assert!((r.qp_term - qp).abs() < 1e-12);
        assert!((r.rp_term - rp).abs() < 1e-12);
        assert!((r.ae_term - ae).abs() < 1e-12);
        assert!((r.total - (qp + rp + ae)).abs() < 1e-12);
        assert_eq!(r.span_masked, 1);

        let single = compute_loss(&outs, &targets, TaskSet::QP).unwrap();
        assert_eq!(single.total, single.qp_term);
        assert_eq!((single.rp_term, single.ae_term), (0.0, 0.0));
    }

    #[test]
    fn all_implausible_masks_span_term() {
        let outs: Vec<_> = (0..4).map(|_| output(0.5, 0.3, &[0.0, 1.0], &[0.0, 1.0])).collect();
        let targets: Vec<_> = (0..4).map(|i| target(&i.to_string(), true, false, None)).collect();
        let refs: Vec<&ModelOutput> = outs.iter().collect();
        let (r, grads) = loss_with_logit_grads(&refs, &targets, TaskSet::RP_AE, [1.0; 3]).unwrap();
        assert_eq!(r.ae_term, 0.0);
        assert_eq!(r.span_masked, 4);
        for g in grads {
            assert!(g.start.iter().chain(&g.end).all(|&x| x == 0.0));
            assert_eq!(g.qp, [0.0, 0.0]);
        }
    }

    #[test]
    fn missing_labels_name_the_example() {
        let outs = [output(0.5, 0.5, &[0.0, 1.0], &[0.0, 1.0])];
        let mut t = target("x9", true, true, None);
        assert_eq!(
            compute_loss(&outs, &[t.clone()], TaskSet::AE),
            Err(LossError::MissingLabel {
                id: "x9".into(),
                task: "answer"
            })
        );
        t.span_lost = true;
        assert_eq!(compute_loss(&outs, &[t.clone()], TaskSet::AE).unwrap().span_masked, 1);
        t.question_plausible = None;
        assert!(matches!(
            compute_loss(&outs, &[t], TaskSet::QP),
            Err(LossError::MissingLabel {
                task: "question_plausible",
                ..
            })
        ));
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let cfg = ModelConfig {
            num_layers: 1,
            num_heads: 1,
            hidden_dim: 2,
            ffn_dim: 2,
            vocab_size: 5,
            max_len: 8,
            head_dropout_p: 0.0,
            active_tasks: TaskSet::ALL,
        };
        let mut p = ModelParams::zeros(&cfg);
        let mut g = p.zeros_like();
        g.qp_b.data = vec![2.0, -0.5];
        let mut adam = Adam::new(&p, AdamConfig::default());
        adam.step(&mut p, &g, 0.1);
        assert!((p.qp_b.data[0] + 0.1).abs() < 1e-6);
        assert!((p.qp_b.data[1] - 0.1).abs() < 1e-6);
        assert!(p.span_b.data.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn reference_grid_covers_variants() {
        let variants: Vec<TaskSet> = REFERENCE_GRID.iter().map(|r| r.0).collect();
        assert_eq!(variants, TaskSet::GRID);
    }

    #[test]
    fn selection_uses_auroc_unless_only_ae() {
        let m = EvalMetrics {
            qp_acc: None,
            qp_auroc: Some(0.8),
            rp_acc: None,
            rp_auroc: Some(0.6),
            ae_f1: Some(0.1),
            ae_exact: None,
            loss: Some(1.0),
        };
        assert_eq!(m.selection_score(TaskSet::ALL), Some(0.7));
        assert_eq!(m.selection_score(TaskSet::RP_AE), Some(0.6));
        assert_eq!(m.selection_score(TaskSet::AE), Some(0.1));
        let undefined = EvalMetrics { qp_auroc: None, ..m };
        assert_eq!(undefined.selection_score(TaskSet::QP), None);
    }
}
