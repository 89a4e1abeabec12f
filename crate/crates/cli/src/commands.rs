use std::fs;
use std::io::Write;
use std::path::Path;

use anyhow::{anyhow, Context};

use qa_plausibility::checkpoint::Checkpoint;
use qa_plausibility::dataset::{
    ingest as ingest_corpus, label_class, load_corpus, synth_corpus, write_corpus, QAExample,
};
use qa_plausibility::model::init_params;
use qa_plausibility::pipeline::Pipeline;
use qa_plausibility::tokenizer::{build_vocab, Vocab};
use qa_plausibility::training::{
    encode_examples, epoch_log_csv, evaluate, grid_csv, run_experiment_grid, train as train_model, EncodedExample,
    TaskSet, TrainError, REFERENCE_GRID,
};

use crate::config::RunConfig;
use crate::{Classify, Failure};

type CmdResult = Result<(), Failure>;

/// Writes to stdout, ignoring a closed pipe (e.g. `| head`).
pub fn emit(text: &str) {
    let mut out = std::io::stdout().lock();
    let _ = out.write_all(text.as_bytes()).and_then(|_| out.flush());
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> CmdResult {
    fs::write(path, contents)
        .with_context(|| format!("writing {}", path.display()))
        .runtime()
}

fn make_dir(path: &Path) -> CmdResult {
    fs::create_dir_all(path)
        .with_context(|| format!("creating {}", path.display()))
        .runtime()
}

fn load(cfg: &RunConfig, key: &str) -> Result<Vec<QAExample>, Failure> {
    let path = cfg.require_path(key).usage()?;
    load_corpus(&path)
        .with_context(|| format!("loading {}", path.display()))
        .usage()
}

fn load_vocab(path: &Path) -> Result<Vocab, Failure> {
    Vocab::load(path)
        .with_context(|| format!("reading {}", path.display()))
        .usage()?
        .with_context(|| format!("parsing {}", path.display()))
        .usage()
}

/// The vocabulary named by `vocab`, or one built from `corpus`.
fn vocab_for(cfg: &RunConfig, corpus: &[QAExample]) -> Result<Vocab, Failure> {
    match cfg.path("vocab") {
        Some(p) => load_vocab(&p),
        None => build_vocab(corpus, cfg.vocab_cap).usage(),
    }
}

fn encode(data: &[QAExample], vocab: &Vocab, max_len: usize) -> Result<Vec<EncodedExample>, Failure> {
    encode_examples(data, vocab, max_len).usage()
}

pub fn ingest(cfg: &RunConfig) -> CmdResult {
    let corpus = load(cfg, "in")?;
    let out_dir = cfg.require_path("out_dir").usage()?;
    let (split, report) = ingest_corpus(corpus, &cfg.ingest).usage()?;
    make_dir(&out_dir)?;
    for (name, part) in [("train", &split.train), ("val", &split.val), ("test", &split.test)] {
        let path = out_dir.join(format!("{name}.jsonl"));
        write_corpus(&path, part).runtime()?;
    }
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    write(&out_dir.join("ingest_report.json"), format!("{json}\n"))?;
    emit(&format!("{json}\n"));
    Ok(())
}

pub fn synth(cfg: &RunConfig) -> CmdResult {
    let out = cfg.require_path("out").usage()?;
    let corpus = synth_corpus(cfg.synth_n, cfg.synth_proportions, cfg.seed).usage()?;
    write_corpus(&out, &corpus).runtime()?;
    let mut counts = [0usize; 4];
    for ex in &corpus {
        if let Some(c) = label_class(ex) {
            counts[c.index()] += 1;
        }
    }
    emit(&format!(
        "wrote {} examples to {} (Y/Y {}, Y/N {}, N/Y {}, N/N {})\n",
        corpus.len(),
        out.display(),
        counts[0],
        counts[1],
        counts[2],
        counts[3]
    ));
    Ok(())
}

pub fn train(cfg: &RunConfig) -> CmdResult {
    let train_set = load(cfg, "train_path")?;
    let val_set = match cfg.path("val_path") {
        Some(_) => load(cfg, "val_path")?,
        None => Vec::new(),
    };
    let out_dir = cfg.require_path("out_dir").usage()?;
    let vocab = vocab_for(cfg, &train_set)?;
    let mut model = cfg.model.clone();
    model.vocab_size = vocab.len();
    model.active_tasks = cfg.tasks;
    let tr = encode(&train_set, &vocab, model.max_len)?;
    let va = encode(&val_set, &vocab, model.max_len)?;

    make_dir(&out_dir)?;
    write(&out_dir.join("vocab.txt"), vocab.to_text())?;
    write(&out_dir.join("run_config.txt"), cfg.raw.dump())?;
    let log_path = out_dir.join("train_log.csv");
    let outcome = match train_model(init_params(&model, cfg.seed), &model, &cfg.train, &tr, &va) {
        Ok(o) => o,
        Err(TrainError::Diverged {
            epoch, message, log, ..
        }) => {
            write(&log_path, epoch_log_csv(&log))?;
            return Err(Failure::Runtime(anyhow!(
                "training diverged in epoch {epoch}: {message}"
            )));
        }
        Err(
            e @ (TrainError::Config(_) | TrainError::Tokenize { .. } | TrainError::EmptyTrain | TrainError::Loss(_)),
        ) => return Err(Failure::Usage(e.into())),
        Err(e) => return Err(Failure::Runtime(e.into())),
    };
    write(&log_path, epoch_log_csv(&outcome.log))?;
    let ck = Checkpoint {
        config: outcome.config.clone(),
        vocab_hash: vocab.hash(),
        params: outcome.params,
    };
    let ck_path = out_dir.join("model.ckpt");
    ck.save(&ck_path).runtime()?;
    emit(&format!(
        "trained {} for {} epochs (best epoch {}), wrote {}\n",
        cfg.tasks,
        outcome.log.len(),
        outcome.best_epoch.map_or("none".to_string(), |e| e.to_string()),
        ck_path.display()
    ));
    Ok(())
}

fn variant_file_stem(v: TaskSet) -> String {
    v.to_string().replace('+', "_")
}

pub fn grid(cfg: &RunConfig) -> CmdResult {
    let train_set = load(cfg, "train_path")?;
    let val_set = match cfg.path("val_path") {
        Some(_) => load(cfg, "val_path")?,
        None => Vec::new(),
    };
    let test_set = load(cfg, "test_path")?;
    let out_dir = cfg.require_path("out_dir").usage()?;
    let vocab = vocab_for(cfg, &train_set)?;
    let mut model = cfg.model.clone();
    model.vocab_size = vocab.len();
    let (tr, va, te) = (
        encode(&train_set, &vocab, model.max_len)?,
        encode(&val_set, &vocab, model.max_len)?,
        encode(&test_set, &vocab, model.max_len)?,
    );
    make_dir(&out_dir)?;
    write(&out_dir.join("vocab.txt"), vocab.to_text())?;
    write(&out_dir.join("run_config.txt"), cfg.raw.dump())?;

    let hash = vocab.hash();
    let mut side_effects: Result<(), Failure> = Ok(());
    let rows = run_experiment_grid(&tr, &va, &te, &model, &cfg.train, |variant, outcome| {
        if side_effects.is_err() {
            return;
        }
        let stem = variant_file_stem(variant);
        side_effects = write(&out_dir.join(format!("log_{stem}.csv")), epoch_log_csv(&outcome.log)).and_then(|_| {
            Checkpoint {
                config: outcome.config.clone(),
                vocab_hash: hash.clone(),
                params: outcome.params.clone(),
            }
            .save(out_dir.join(format!("model_{stem}.ckpt")))
            .runtime()
        });
    })
    .runtime()?;
    side_effects?;
    write(&out_dir.join("grid.csv"), grid_csv(&rows))?;

    let fmt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.4}"));
    let line = |name: &str, cells: [Option<f64>; 5]| {
        format!(
            "{name:<18} {:>8} {:>8} {:>8} {:>8} {:>8}\n",
            fmt(cells[0]),
            fmt(cells[1]),
            fmt(cells[2]),
            fmt(cells[3]),
            fmt(cells[4])
        )
    };
    let mut table = format!(
        "{:<18} {:>8} {:>8} {:>8} {:>8} {:>8}\n",
        "variant", "qp_acc", "qp_auroc", "rp_acc", "rp_auroc", "ae_f1"
    );
    for (row, r) in rows.iter().zip(REFERENCE_GRID) {
        table += &line(
            &row.variant.label(),
            [row.qp_acc, row.qp_auroc, row.rp_acc, row.rp_auroc, row.ae_f1],
        );
        table += &line("  full-scale ref", [r.1, r.2, r.3, r.4, r.5]);
    }
    emit(&table);
    Ok(())
}

pub const EVAL_HEADER: [&str; 8] = [
    "examples", "qp_acc", "qp_auroc", "rp_acc", "rp_auroc", "ae_f1", "ae_exact", "loss",
];

pub fn eval(cfg: &RunConfig) -> CmdResult {
    let ck_path = cfg.require_path("checkpoint").usage()?;
    let ck = Checkpoint::load(&ck_path).usage()?;
    let vocab = load_vocab(&cfg.require_path("vocab").usage()?)?;
    if vocab.hash() != ck.vocab_hash {
        return Err(Failure::Usage(anyhow!(
            "{} was trained with a different vocabulary",
            ck_path.display()
        )));
    }
    let corpus = load(cfg, "in")?;
    let data = encode(&corpus, &vocab, ck.config.max_len)?;
    let m = evaluate(
        &ck.params,
        &ck.config,
        &data,
        ck.config.active_tasks,
        cfg.pipeline.max_answer_tokens,
    )
    .usage()?;
    let cell = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let mut w = csv::Writer::from_writer(Vec::new());
    let row = [
        data.len().to_string(),
        cell(m.qp_acc),
        cell(m.qp_auroc),
        cell(m.rp_acc),
        cell(m.rp_auroc),
        cell(m.ae_f1),
        cell(m.ae_exact),
        cell(m.loss),
    ];
    w.write_record(EVAL_HEADER).runtime()?;
    w.write_record(&row).runtime()?;
    let text = String::from_utf8(w.into_inner().runtime()?).runtime()?;
    match cfg.path("out") {
        Some(out) => write(&out, text),
        None => {
            emit(&text);
            Ok(())
        }
    }
}

fn pipeline(cfg: &RunConfig) -> Result<Pipeline, Failure> {
    let vocab = load_vocab(&cfg.require_path("vocab").usage()?)?;
    Pipeline::from_config(cfg.pipeline.clone(), vocab).usage()
}

pub fn clean(cfg: &RunConfig) -> CmdResult {
    let corpus = load(cfg, "in")?;
    let out = cfg.require_path("out").usage()?;
    let p = pipeline(cfg)?;
    let outcome = p.clean_dataset(corpus).runtime()?;
    write_corpus(&out, &outcome.cleaned).runtime()?;
    let audit = serde_json::to_string_pretty(&outcome.audit).expect("audit serializes");
    match cfg.path("audit") {
        Some(path) => write(&path, format!("{audit}\n"))?,
        None => emit(&format!("{audit}\n")),
    }
    Ok(())
}

pub fn predict(cfg: &RunConfig) -> CmdResult {
    let p = pipeline(cfg)?;
    let example = QAExample::new("predict", cfg.text("question"), cfg.text("response"));
    let record = p.infer(&example).usage()?;
    emit(&format!(
        "{}\n",
        serde_json::to_string(&record).expect("record serializes")
    ));
    Ok(())
}
