//! Corpus records, JSONL I/O, and the dataset construction rules: where-question
//! removal, the labeling-time answer length cap, seeded splitting, and a
//! template-based synthetic corpus with the observed class mix.

use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default labeling-time maximum answer length, in whitespace-delimited words.
pub const DEFAULT_SPAN_CAP: usize = 5;

/// Class mix of the reference corpus, in percent: Y/Y, Y/N, N/Y, N/N.
/// The values add to 100.1 because each was rounded independently.
pub const REFERENCE_CLASS_PERCENT: [f64; 4] = [50.6, 22.8, 11.4, 15.3];

/// Size of the reference corpus after preprocessing.
pub const REFERENCE_CORPUS_SIZE: usize = 7200;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: malformed record: {message}")]
    Malformed { line: usize, message: String },
    #[error("example {id}: invalid field `{field}`: {message}")]
    Invalid {
        id: String,
        field: &'static str,
        message: String,
    },
    #[error("cannot split {n} examples: at least 3 are needed to populate train, val and test")]
    TooFewToSplit { n: usize },
    #[error("split fractions must be non-negative and sum to 1, got {0:?}")]
    BadFractions([f64; 3]),
    #[error("synthetic corpus needs n >= 4, got {0}")]
    TooFewToSynthesize(usize),
    #[error("class proportions invalid: {0}")]
    BadProportions(String),
}

/// Character range `[start, end)` into the response, counted in Unicode scalar values.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnswerSpan {
    pub start: usize,
    pub end: usize,
}

impl AnswerSpan {
    pub fn new(start: usize, end: usize) -> Self {
        Self { start, end }
    }

    /// The covered substring, or `None` when the range is out of bounds or empty.
    pub fn slice<'a>(&self, text: &'a str) -> Option<&'a str> {
        if self.start >= self.end {
            return None;
        }
        char_slice(text, self.start, self.end)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

/// Model scores attached to records emitted by the cleaning pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scores {
    pub qp: f64,
    pub rp: f64,
}

/// One question/response pair with optional labels. Field order is the JSONL key order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QAExample {
    pub id: String,
    pub question: String,
    pub response: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub question_plausible: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub response_plausible: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer: Option<AnswerSpan>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<Split>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scores: Option<Scores>,
}

impl QAExample {
    pub fn new(id: impl Into<String>, question: impl Into<String>, response: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            question: question.into(),
            response: response.into(),
            question_plausible: None,
            response_plausible: None,
            answer: None,
            split: None,
            scores: None,
        }
    }

    /// Text of the gold answer, if labeled.
    pub fn answer_text(&self) -> Option<&str> {
        self.answer.and_then(|a| a.slice(&self.response))
    }

    pub fn validate(&self) -> Result<(), DatasetError> {
        let invalid = |field, message: &str| DatasetError::Invalid {
            id: self.id.clone(),
            field,
            message: message.to_string(),
        };
        if self.id.is_empty() {
            return Err(invalid("id", "must be non-empty"));
        }
        if self.question.trim().is_empty() {
            return Err(invalid("question", "must be non-empty"));
        }
        if self.response.trim().is_empty() {
            return Err(invalid("response", "must be non-empty"));
        }
        if let Some(span) = self.answer {
            if self.response_plausible != Some(true) {
                return Err(invalid("answer", "answer present requires response_plausible = true"));
            }
            let len = self.response.chars().count();
            if span.start >= span.end || span.end > len {
                return Err(invalid(
                    "answer",
                    &format!(
                        "span {}..{} out of range for response of {len} chars",
                        span.start, span.end
                    ),
                ));
            }
            if span.slice(&self.response).is_none_or(|s| s.trim().is_empty()) {
                return Err(invalid("answer", "span covers only whitespace"));
            }
        }
        if let Some(s) = self.scores {
            if !(s.qp.is_finite() && s.rp.is_finite()) {
                return Err(invalid("scores", "scores must be finite"));
            }
        }
        Ok(())
    }
}

/// Substring by Unicode scalar offsets.
pub fn char_slice(text: &str, start: usize, end: usize) -> Option<&str> {
    if start > end {
        return None;
    }
    let mut indices = text.char_indices().map(|(i, _)| i).chain(std::iter::once(text.len()));
    let begin = indices.by_ref().nth(start)?;
    let finish = if end == start {
        begin
    } else {
        indices.nth(end - start - 1)?
    };
    Some(&text[begin..finish])
}

/// Parses JSONL text. Blank lines are skipped; line numbers in errors are 1-based.
pub fn parse_corpus(text: &str) -> Result<Vec<QAExample>, DatasetError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let ex: QAExample = serde_json::from_str(line).map_err(|e| DatasetError::Malformed {
            line: i + 1,
            message: e.to_string(),
        })?;
        ex.validate()?;
        out.push(ex);
    }
    Ok(out)
}

pub fn load_corpus(path: impl AsRef<Path>) -> Result<Vec<QAExample>, DatasetError> {
    let path = path.as_ref();
    let io_err = |source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    };
    let file = fs::File::open(path).map_err(io_err)?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err)?;
        if line.trim().is_empty() {
            continue;
        }
        let ex: QAExample = serde_json::from_str(&line).map_err(|e| DatasetError::Malformed {
            line: i + 1,
            message: e.to_string(),
        })?;
        ex.validate()?;
        out.push(ex);
    }
    Ok(out)
}

/// Serializes examples as JSONL, one record per line with a trailing newline.
pub fn corpus_to_jsonl(examples: &[QAExample]) -> String {
    let mut out = String::new();
    for ex in examples {
        out.push_str(&serde_json::to_string(ex).expect("QAExample serializes"));
        out.push('\n');
    }
    out
}

pub fn write_corpus(path: impl AsRef<Path>, examples: &[QAExample]) -> Result<(), DatasetError> {
    let path = path.as_ref();
    let io_err = |source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut file = fs::File::create(path).map_err(io_err)?;
    file.write_all(corpus_to_jsonl(examples).as_bytes()).map_err(io_err)
}

/// True when the question's first word, lowercased, is exactly "where".
pub fn is_where_question(question: &str) -> bool {
    let lowered = question.trim_start().to_lowercase();
    let first: String = lowered.chars().take_while(|c| c.is_alphanumeric()).collect();
    first == "where"
}

/// Order-preserving partition into (kept, removed where-questions).
pub fn filter_where_questions(examples: Vec<QAExample>) -> (Vec<QAExample>, Vec<QAExample>) {
    examples.into_iter().partition(|ex| !is_where_question(&ex.question))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpanCapVerdict {
    Ok,
    Violation { words: usize, cap: usize },
}

impl SpanCapVerdict {
    pub fn is_ok(&self) -> bool {
        matches!(self, SpanCapVerdict::Ok)
    }
}

/// Checks the labeling-time answer length cap. Only meaningful for labeled
/// data at ingestion; predictions are never capped.
pub fn enforce_label_span_cap(example: &QAExample, cap: usize) -> SpanCapVerdict {
    let cap = cap.max(1);
    match example.answer_text() {
        None => SpanCapVerdict::Ok,
        Some(text) => {
            let words = text.split_whitespace().count();
            if words <= cap {
                SpanCapVerdict::Ok
            } else {
                SpanCapVerdict::Violation { words, cap }
            }
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SplitCorpus {
    pub train: Vec<QAExample>,
    pub val: Vec<QAExample>,
    pub test: Vec<QAExample>,
}

impl SplitCorpus {
    pub fn len(&self) -> usize {
        self.train.len() + self.val.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Split sizes for `n` examples: val and test get `floor(n * f)` (at least one
/// each when their fraction is positive), train takes the remainder.
pub fn split_sizes(n: usize, fractions: [f64; 3]) -> Result<[usize; 3], DatasetError> {
    let sum: f64 = fractions.iter().sum();
    if fractions.iter().any(|f| !(0.0..=1.0).contains(f)) || (sum - 1.0).abs() > 1e-9 {
        return Err(DatasetError::BadFractions(fractions));
    }
    if n < 3 {
        return Err(DatasetError::TooFewToSplit { n });
    }
    let size = |f: f64| {
        let k = (n as f64 * f + 1e-9).floor() as usize;
        if f > 0.0 {
            k.max(1)
        } else {
            k
        }
    };
    let val = size(fractions[1]);
    let test = size(fractions[2]);
    Ok([n - val - test, val, test])
}

/// Seeded shuffle-and-cut. Each split keeps input order and gets its `split` tag set.
pub fn split_corpus(examples: Vec<QAExample>, fractions: [f64; 3], seed: u64) -> Result<SplitCorpus, DatasetError> {
    let [n_train, n_val, _] = split_sizes(examples.len(), fractions)?;
    let mut order: Vec<usize> = (0..examples.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut assignment = vec![Split::Test; examples.len()];
    for (rank, &idx) in order.iter().enumerate() {
        assignment[idx] = if rank < n_train {
            Split::Train
        } else if rank < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
    }
    let mut out = SplitCorpus::default();
    for (mut ex, split) in examples.into_iter().zip(assignment) {
        ex.split = Some(split);
        match split {
            Split::Train => out.train.push(ex),
            Split::Val => out.val.push(ex),
            Split::Test => out.test.push(ex),
        }
    }
    Ok(out)
}

/// The four (question, response) plausibility label combinations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LabelClass {
    Yy,
    Yn,
    Ny,
    Nn,
}

impl LabelClass {
    pub const ALL: [LabelClass; 4] = [LabelClass::Yy, LabelClass::Yn, LabelClass::Ny, LabelClass::Nn];

    pub fn from_flags(question: bool, response: bool) -> Self {
        match (question, response) {
            (true, true) => LabelClass::Yy,
            (true, false) => LabelClass::Yn,
            (false, true) => LabelClass::Ny,
            (false, false) => LabelClass::Nn,
        }
    }

    pub fn flags(self) -> (bool, bool) {
        match self {
            LabelClass::Yy => (true, true),
            LabelClass::Yn => (true, false),
            LabelClass::Ny => (false, true),
            LabelClass::Nn => (false, false),
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

/// Fractions of the Y/Y, Y/N, N/Y and N/N classes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassProportions {
    pub p_yy: f64,
    pub p_yn: f64,
    pub p_ny: f64,
    pub p_nn: f64,
}

impl ClassProportions {
    /// Builds proportions from arbitrary non-negative weights by dividing by their sum.
    pub fn normalized(weights: [f64; 4]) -> Result<Self, DatasetError> {
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(DatasetError::BadProportions(format!("{weights:?}")));
        }
        let sum: f64 = weights.iter().sum();
        if sum <= 0.0 {
            return Err(DatasetError::BadProportions("weights sum to zero".into()));
        }
        Ok(Self {
            p_yy: weights[0] / sum,
            p_yn: weights[1] / sum,
            p_ny: weights[2] / sum,
            p_nn: weights[3] / sum,
        })
    }

    /// Class mix of the reference corpus.
    pub fn reference() -> Self {
        Self::normalized(REFERENCE_CLASS_PERCENT).expect("reference proportions are valid")
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.p_yy, self.p_yn, self.p_ny, self.p_nn]
    }

    pub fn validate(&self) -> Result<(), DatasetError> {
        let a = self.as_array();
        if a.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(DatasetError::BadProportions(format!("{a:?} outside [0,1]")));
        }
        let sum: f64 = a.iter().sum();
        if (sum - 1.0).abs() > 0.005 {
            return Err(DatasetError::BadProportions(format!("sum {sum} differs from 1")));
        }
        Ok(())
    }

    /// Per-class counts for `n` examples: `round(n * p)` for the three minority
    /// classes, Y/Y absorbs whatever is left so the total is exactly `n`.
    pub fn class_counts(&self, n: usize) -> [usize; 4] {
        let a = self.as_array();
        let mut counts = [0usize; 4];
        for k in 1..4 {
            counts[k] = (n as f64 * a[k]).round() as usize;
        }
        let minority: usize = counts[1..].iter().sum();
        if minority > n {
            // Only reachable with degenerate proportions; trim from the smallest classes.
            let mut excess = minority - n;
            for k in (1..4).rev() {
                let take = excess.min(counts[k]);
                counts[k] -= take;
                excess -= take;
            }
        }
        counts[0] = n - counts[1..].iter().sum::<usize>();
        counts
    }
}

struct Frame {
    question: &'static str,
    subjects: &'static [&'static str],
    answers: &'static [&'static str],
}

const FRAMES: &[Frame] = &[
    Frame {
        question: "What is on the {}?",
        subjects: &["table", "plate", "shelf", "counter", "desk", "tray"],
        answers: &[
            "beet and carrot juice",
            "a bowl of ramen",
            "fresh strawberries",
            "my coffee mug",
            "a stack of books",
            "two slices of pizza",
            "some cookies",
            "a green salad",
        ],
    },
    Frame {
        question: "What is the {} doing?",
        subjects: &["dog", "cat", "hamster", "puppy", "parrot", "horse"],
        answers: &[
            "sleeping",
            "chasing a ball",
            "eating its dinner",
            "playing in the snow",
            "taking a nap",
            "begging for treats",
            "running around",
        ],
    },
    Frame {
        question: "What color is the {}?",
        subjects: &["car", "dress", "wall", "bike", "jacket", "door"],
        answers: &[
            "bright red",
            "dark blue",
            "green",
            "yellow and black",
            "light pink",
            "white",
        ],
    },
    Frame {
        question: "What is on top of the {}?",
        subjects: &["cake", "cupcake", "pie", "waffle", "pancake", "sundae"],
        answers: &[
            "whipped cream",
            "chocolate sprinkles",
            "fresh blueberries",
            "maple syrup",
            "a candle",
            "strawberry icing",
        ],
    },
    Frame {
        question: "What is the {} holding?",
        subjects: &["person", "man", "woman", "girl", "boy", "child"],
        answers: &[
            "a guitar",
            "an umbrella",
            "her phone",
            "a surfboard",
            "a baby",
            "a cup of tea",
        ],
    },
];

/// Things that are actually in the picture when the question names the wrong subject.
const MISMATCHED: &[&str] = &[
    "chicken",
    "a pile of laundry",
    "my bread",
    "a rock",
    "a pillow",
    "a statue",
    "a stuffed toy",
    "a bag of flour",
    "a lamp",
    "my grandma",
];

const PLAUSIBLE_RESPONSES: &[(&str, &str)] = &[
    ("", ""),
    ("", " lol"),
    ("it's ", ""),
    ("i think ", ""),
    ("", " :)"),
    ("just ", " haha"),
    ("", " obviously"),
    ("pretty sure it is ", ""),
];

const DEFLECTIONS: &[&str] = &[
    "idk",
    "why do you care",
    "lol nice try bot",
    "who knows",
    "that's a secret",
    "guess",
    "hmm good question",
    "stop asking me things",
    "ask my mom",
    "whatever you want it to be",
];

const CORRECTIONS: &[(&str, &str)] = &[
    ("that is not {} that's ", ""),
    ("that's not a {} it's ", ""),
    ("lol not a {} , it is ", ""),
    ("there is no {} , that is ", " lol"),
];

const DENIALS: &[&str] = &[
    "that is not a {}",
    "there is no {} in this picture",
    "lol there's no {}",
    "not a {} bot",
    "what {} ? there isn't one",
];

/// Appends `prefix + core + suffix` and returns the char span covering `core`.
fn spanned(prefix: &str, core: &str, suffix: &str) -> (String, AnswerSpan) {
    let start = prefix.chars().count();
    let end = start + core.chars().count();
    (format!("{prefix}{core}{suffix}"), AnswerSpan::new(start, end))
}

fn synth_example<R: Rng>(id: String, class: LabelClass, rng: &mut R) -> QAExample {
    let frame = &FRAMES[rng.gen_range(0..FRAMES.len())];
    let subject = *frame.subjects.choose(rng).expect("non-empty");
    let question = frame.question.replace("{}", subject);
    let (qp, rp) = class.flags();
    let (response, answer) = match class {
        LabelClass::Yy => {
            let ans = *frame.answers.choose(rng).expect("non-empty");
            let (pre, post) = *PLAUSIBLE_RESPONSES.choose(rng).expect("non-empty");
            let (text, span) = spanned(pre, ans, post);
            (text, Some(span))
        }
        LabelClass::Yn => ((*DEFLECTIONS.choose(rng).expect("non-empty")).to_string(), None),
        LabelClass::Ny => {
            let alt = *MISMATCHED.choose(rng).expect("non-empty");
            let (pre, post) = *CORRECTIONS.choose(rng).expect("non-empty");
            let (text, span) = spanned(&pre.replace("{}", subject), alt, post);
            (text, Some(span))
        }
        LabelClass::Nn => (DENIALS.choose(rng).expect("non-empty").replace("{}", subject), None),
    };
    QAExample {
        question_plausible: Some(qp),
        response_plausible: Some(rp),
        answer,
        ..QAExample::new(id, question, response)
    }
}

/// Template-generated corpus whose labels are deterministic functions of the text.
///
/// Plausible responses name something from the question's answer lexicon;
/// implausible questions are answered by responses that deny the question's
/// subject, either naming what is really there (N/Y) or not (N/N); implausible
/// responses to plausible questions are deflections. Every example with a
/// plausible response carries a gold span over the answering phrase.
pub fn synth_corpus(n: usize, proportions: ClassProportions, seed: u64) -> Result<Vec<QAExample>, DatasetError> {
    if n < 4 {
        return Err(DatasetError::TooFewToSynthesize(n));
    }
    proportions.validate()?;
    let counts = proportions.class_counts(n);
    let mut classes: Vec<LabelClass> = LabelClass::ALL
        .iter()
        .zip(counts)
        .flat_map(|(&c, k)| std::iter::repeat_n(c, k))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    classes.shuffle(&mut rng);
    Ok(classes
        .into_iter()
        .enumerate()
        .map(|(i, class)| synth_example(format!("syn-{i:06}"), class, &mut rng))
        .collect())
}

/// Label class of a fully labeled example.
pub fn label_class(example: &QAExample) -> Option<LabelClass> {
    Some(LabelClass::from_flags(
        example.question_plausible?,
        example.response_plausible?,
    ))
}

#[derive(Debug, Clone, Copy)]
pub struct IngestOptions {
    pub span_cap: usize,
    pub fractions: [f64; 3],
    pub seed: u64,
}

impl Default for IngestOptions {
    fn default() -> Self {
        Self {
            span_cap: DEFAULT_SPAN_CAP,
            fractions: [0.8, 0.1, 0.1],
            seed: 0,
        }
    }
}

/// Counts at every ingestion stage.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestReport {
    pub input: usize,
    pub where_removed: usize,
    pub span_cap_dropped: usize,
    pub kept: usize,
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

/// Where-filter, span-cap check (violators dropped, not truncated), then split.
pub fn ingest(examples: Vec<QAExample>, options: &IngestOptions) -> Result<(SplitCorpus, IngestReport), DatasetError> {
    let input = examples.len();
    let (kept, removed) = filter_where_questions(examples);
    let (kept, dropped): (Vec<_>, Vec<_>) = kept
        .into_iter()
        .partition(|ex| enforce_label_span_cap(ex, options.span_cap).is_ok());
    let report_kept = kept.len();
    let split = split_corpus(kept, options.fractions, options.seed)?;
    let report = IngestReport {
        input,
        where_removed: removed.len(),
        span_cap_dropped: dropped.len(),
        kept: report_kept,
        train: split.train.len(),
        val: split.val.len(),
        test: split.test.len(),
    };
    Ok((split, report))
}
