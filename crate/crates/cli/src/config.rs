//! Flat `key = value` run configuration: built-in defaults, then an optional
//! file, then `--key value` overrides. Unknown keys are rejected and every
//! value is parsed before any command runs.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::PathBuf;
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};

use qa_plausibility::dataset::{ClassProportions, IngestOptions, REFERENCE_CLASS_PERCENT};
use qa_plausibility::model::ModelConfig;
use qa_plausibility::pipeline::PipelineConfig;
use qa_plausibility::training::{AdamConfig, TaskSet, TrainConfig};

/// Names the config file used when `--config` is absent.
pub const ENV_CONFIG: &str = "QAPLAUS_CONFIG";

/// `(key, default, description)` in dump order. An empty default means unset.
pub const KEYS: &[(&str, &str, &str)] = &[
    ("seed", "0", "seed for splitting, synthesis, init and shuffling"),
    ("in", "", "input corpus (ingest, eval, clean)"),
    ("out", "", "output file (synth, eval, clean)"),
    ("out_dir", "", "output directory (ingest, train, grid)"),
    ("train_path", "", "training split"),
    ("val_path", "", "validation split (optional)"),
    ("test_path", "", "test split (grid)"),
    ("vocab", "", "vocabulary file; train builds one when unset"),
    ("checkpoint", "", "model checkpoint (eval)"),
    ("qp_checkpoint", "", "question model checkpoint (clean, predict)"),
    (
        "rpae_checkpoint",
        "",
        "response and answer model checkpoint (clean, predict)",
    ),
    ("audit", "", "audit report path (clean); printed when unset"),
    ("question", "", "question text (predict)"),
    ("response", "", "response text (predict)"),
    ("tasks", "qp+rp+ae", "task set for train; eval uses the checkpoint's"),
    ("ingest.span_cap", "5", "maximum labeled answer length in words"),
    ("ingest.fractions", "0.8,0.1,0.1", "train,val,test fractions"),
    ("synth.n", "1000", "synthetic corpus size"),
    (
        "synth.proportions",
        "",
        "Y/Y,Y/N,N/Y,N/N class weights; reference mix when unset",
    ),
    ("model.num_layers", "2", ""),
    ("model.num_heads", "4", ""),
    ("model.hidden_dim", "64", ""),
    ("model.ffn_dim", "128", ""),
    ("model.max_len", "32", "tokens per packed pair"),
    ("model.head_dropout_p", "0.5", "dropout before the classification heads"),
    ("model.vocab_size", "5000", "vocabulary cap when building one"),
    ("train.learning_rate", "3e-4", ""),
    ("train.batch_size", "16", ""),
    ("train.max_epochs", "20", ""),
    ("train.patience", "5", "stale epochs tolerated before stopping"),
    ("train.task_weights", "1,1,1", "QP,RP,AE loss multipliers"),
    (
        "train.max_answer_tokens",
        "",
        "span length limit when scoring validation F1",
    ),
    ("pipeline.qp_threshold", "0.5", ""),
    ("pipeline.rp_threshold", "0.5", ""),
    ("pipeline.max_answer_tokens", "", "span length limit for extraction"),
];

pub fn is_known(key: &str) -> bool {
    KEYS.iter().any(|(k, _, _)| *k == key)
}

/// Raw merged key-value pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct RawConfig {
    values: BTreeMap<String, String>,
}

impl Default for RawConfig {
    fn default() -> Self {
        Self {
            values: KEYS.iter().map(|(k, v, _)| (k.to_string(), v.to_string())).collect(),
        }
    }
}

impl RawConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if !is_known(key) {
            bail!("unknown config key {key:?}");
        }
        self.values.insert(key.to_string(), value.trim().to_string());
        Ok(())
    }

    pub fn get(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).unwrap_or("")
    }

    /// Applies a config file: `key = value` lines, `#` comments, blank lines.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<()> {
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| anyhow!("{origin}:{}: expected key = value", i + 1))?;
            self.set(k.trim(), v).with_context(|| format!("{origin}:{}", i + 1))?;
        }
        Ok(())
    }

    /// Applies `--key value` or `--key=value` pairs.
    pub fn apply_overrides(&mut self, args: &[String]) -> Result<()> {
        let mut it = args.iter();
        while let Some(arg) = it.next() {
            let key = arg
                .strip_prefix("--")
                .ok_or_else(|| anyhow!("expected --key value, found {arg:?}"))?;
            match key.split_once('=') {
                Some((k, v)) => self.set(k, v)?,
                None => {
                    let v = it.next().ok_or_else(|| anyhow!("--{key} needs a value"))?;
                    self.set(key, v)?;
                }
            }
        }
        Ok(())
    }

    /// Every key in declaration order; loadable as a config file.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        for (k, _, help) in KEYS {
            if !help.is_empty() {
                out.push_str(&format!("# {help}\n"));
            }
            out.push_str(&format!("{k} = {}\n", self.get(k)));
        }
        out
    }
}

fn parse<T: FromStr>(raw: &RawConfig, key: &str) -> Result<T>
where
    T::Err: Display,
{
    let v = raw.get(key);
    v.parse().map_err(|e| anyhow!("{key}: cannot parse {v:?}: {e}"))
}

fn parse_opt<T: FromStr>(raw: &RawConfig, key: &str) -> Result<Option<T>>
where
    T::Err: Display,
{
    if raw.get(key).is_empty() {
        Ok(None)
    } else {
        parse(raw, key).map(Some)
    }
}

fn parse_list<const N: usize>(raw: &RawConfig, key: &str) -> Result<[f64; N]> {
    let v = raw.get(key);
    let items: Vec<f64> = v
        .split(',')
        .map(|s| s.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|e| anyhow!("{key}: cannot parse {v:?}: {e}"))?;
    items
        .try_into()
        .map_err(|_| anyhow!("{key}: expected {N} comma-separated numbers, got {v:?}"))
}

fn path(raw: &RawConfig, key: &str) -> Option<PathBuf> {
    let v = raw.get(key);
    (!v.is_empty()).then(|| PathBuf::from(v))
}

/// Typed view of a [`RawConfig`]. Building it validates every key.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub raw: RawConfig,
    pub seed: u64,
    pub tasks: TaskSet,
    pub model: ModelConfig,
    pub vocab_cap: usize,
    pub train: TrainConfig,
    pub pipeline: PipelineConfig,
    pub ingest: IngestOptions,
    pub synth_n: usize,
    pub synth_proportions: ClassProportions,
}

impl RunConfig {
    pub fn from_raw(raw: RawConfig) -> Result<Self> {
        let seed: u64 = parse(&raw, "seed")?;
        let tasks: TaskSet = parse(&raw, "tasks")?;
        let model = ModelConfig {
            num_layers: parse(&raw, "model.num_layers")?,
            num_heads: parse(&raw, "model.num_heads")?,
            hidden_dim: parse(&raw, "model.hidden_dim")?,
            ffn_dim: parse(&raw, "model.ffn_dim")?,
            // replaced by the vocabulary's size once one is loaded
            vocab_size: 5,
            max_len: parse(&raw, "model.max_len")?,
            head_dropout_p: parse(&raw, "model.head_dropout_p")?,
            active_tasks: tasks,
        };
        model.validate().map_err(|e| anyhow!("{e}"))?;
        let vocab_cap: usize = parse(&raw, "model.vocab_size")?;
        if vocab_cap < 5 {
            bail!("model.vocab_size must be at least 5");
        }
        let train = TrainConfig {
            learning_rate: parse(&raw, "train.learning_rate")?,
            batch_size: parse(&raw, "train.batch_size")?,
            max_epochs: parse(&raw, "train.max_epochs")?,
            seed,
            taskset: tasks,
            patience: parse(&raw, "train.patience")?,
            task_weights: parse_list(&raw, "train.task_weights")?,
            adam: AdamConfig::default(),
            max_answer_tokens: parse_opt(&raw, "train.max_answer_tokens")?,
        };
        train.validate().map_err(|e| anyhow!("{e}"))?;
        let pipeline = PipelineConfig {
            qp_threshold: parse(&raw, "pipeline.qp_threshold")?,
            rp_threshold: parse(&raw, "pipeline.rp_threshold")?,
            max_answer_tokens: parse_opt(&raw, "pipeline.max_answer_tokens")?,
            qp_checkpoint: path(&raw, "qp_checkpoint"),
            rpae_checkpoint: path(&raw, "rpae_checkpoint"),
        };
        pipeline.validate().map_err(|e| anyhow!("{e}"))?;
        let ingest = IngestOptions {
            span_cap: parse(&raw, "ingest.span_cap")?,
            fractions: parse_list(&raw, "ingest.fractions")?,
            seed,
        };
        let weights = if raw.get("synth.proportions").is_empty() {
            REFERENCE_CLASS_PERCENT
        } else {
            parse_list(&raw, "synth.proportions")?
        };
        let synth_proportions = ClassProportions::normalized(weights).map_err(|e| anyhow!("synth.proportions: {e}"))?;
        Ok(Self {
            seed,
            tasks,
            model,
            vocab_cap,
            train,
            pipeline,
            ingest,
            synth_n: parse(&raw, "synth.n")?,
            synth_proportions,
            raw,
        })
    }

    pub fn path(&self, key: &str) -> Option<PathBuf> {
        path(&self.raw, key)
    }

    pub fn require_path(&self, key: &str) -> Result<PathBuf> {
        self.path(key).ok_or_else(|| anyhow!("--{key} is required"))
    }

    pub fn text(&self, key: &str) -> &str {
        self.raw.get(key)
    }
}
