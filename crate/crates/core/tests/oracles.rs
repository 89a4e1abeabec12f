//! Independent oracles for the encoder, the tokenizer alignment, the synthetic
//! generator, the cleaning audit, and the training loop contracts.

use std::collections::HashMap;

use qa_plausibility::checkpoint::Checkpoint;
use qa_plausibility::dataset::{label_class, synth_corpus, ClassProportions, LabelClass, QAExample};
use qa_plausibility::metrics::{auroc, ScoredLabel};
use qa_plausibility::model::{forward_example, init_params, ModelConfig, ModelParams};
use qa_plausibility::pipeline::{hist_bin, Pipeline, PipelineConfig, HIST_BINS};
use qa_plausibility::tokenizer::{build_vocab, encode_pair, TokenizedInput, CLS_ID, SEP_ID, UNK_ID};
use qa_plausibility::training::{encode_examples, evaluate, train, TaskSet, TrainConfig};

fn set(t: &mut qa_plausibility::model::Tensor, values: &[&[f64]]) {
    for (i, row) in values.iter().enumerate() {
        t.row_mut(i).copy_from_slice(row);
    }
}

#[test]
fn attention_matches_hand_computed_weights() {
    let config = ModelConfig {
        num_layers: 1,
        num_heads: 1,
        hidden_dim: 3,
        ffn_dim: 4,
        vocab_size: 6,
        max_len: 5,
        head_dropout_p: 0.0,
        active_tasks: TaskSet::ALL,
    };
    let mut p = ModelParams::zeros(&config);
    p.emb_norm_g.data.fill(1.0);
    set(
        &mut p.token_emb,
        &[
            &[0.0; 3],
            &[0.0; 3],
            &[1.0, 0.0, 0.0],
            &[0.0, 0.0, 1.0],
            &[0.0, 1.0, 0.0],
            &[1.0, 1.0, 0.0],
        ],
    );
    set(
        &mut p.position_emb,
        &[
            &[0.0, 0.0, 0.0],
            &[0.5, 0.0, 0.0],
            &[0.0, 0.5, 0.0],
            &[0.0, 0.0, 0.5],
            &[0.2, 0.1, 0.0],
        ],
    );
    let layer = &mut p.layers[0];
    set(
        &mut layer.query_w,
        &[&[1.0, 0.0, 0.5], &[0.0, 1.0, 0.0], &[0.2, 0.0, 1.0]],
    );
    layer.query_b.data.copy_from_slice(&[0.1, 0.0, 0.0]);
    set(
        &mut layer.key_w,
        &[&[0.5, 0.0, 0.0], &[0.0, 1.0, 0.3], &[0.0, 0.0, 1.0]],
    );
    layer.key_b.data.copy_from_slice(&[0.0, 0.0, -0.1]);

    let input = TokenizedInput {
        token_ids: vec![CLS_ID, 4, SEP_ID, 5, SEP_ID],
        segment_ids: vec![0, 0, 0, 1, 1],
        pad_mask: vec![false; 5],
        response_char_spans: vec![None, None, None, Some((0, 1)), None],
    };
    let (_, cache) = forward_example(&p, &config, &input, None).unwrap();
    // softmax(LN(x) Wq (LN(x) Wk)^T / sqrt(3)), computed separately with numpy
    let expected = [
        [
            0.4125960519310272,
            0.10705618883504617,
            0.108635526629273,
            0.17501973289917258,
            0.19669249970548094,
        ],
        [
            0.11068879493901702,
            0.4406015586423751,
            0.0447512592066847,
            0.37853562878879254,
            0.025422758423130635,
        ],
        [
            0.08946979718693969,
            0.13096988173614,
            0.37321094725414533,
            0.09688151065822347,
            0.3094678631645515,
        ],
        [
            0.19795366146658788,
            0.33858043386443826,
            0.047674961483830436,
            0.3767468081237439,
            0.039044135061399324,
        ],
        [
            0.10276104449232584,
            0.046066220598140174,
            0.3397854989140836,
            0.045359689563310816,
            0.4660275464321396,
        ],
    ];
    let got = cache.attention(0, 0);
    for (g, e) in got.iter().zip(&expected) {
        for (a, b) in g.iter().zip(e) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }
}

/// Char offsets of whitespace-separated alphanumeric runs and single
/// punctuation marks, found by a plain scan.
fn brute_align(text: &str) -> Vec<(usize, usize)> {
    let chars: Vec<char> = text.chars().collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        if chars[i].is_whitespace() {
            i += 1;
        } else if chars[i].is_alphanumeric() {
            let s = i;
            while i < chars.len() && chars[i].is_alphanumeric() {
                i += 1;
            }
            out.push((s, i));
        } else {
            out.push((i, i + 1));
            i += 1;
        }
    }
    out
}

#[test]
fn response_offsets_match_brute_force_alignment() {
    let mut corpus = synth_corpus(96, ClassProportions::reference(), 4).unwrap();
    corpus.push(QAExample::new("u1", "Qué es?", "Café con leche, señor!"));
    corpus.push(QAExample::new("u2", "What?", "  spaced\tout   text "));
    corpus.push(QAExample::new("u3", "Why?", "ÆØÅ & naïve…words"));
    corpus.push(QAExample::new("u4", "Who?", "it's 3.5 o'clock"));
    let vocab = build_vocab(&corpus[..90], 400).unwrap();
    for ex in &corpus {
        let input = encode_pair(&ex.question, &ex.response, &vocab, 96).unwrap();
        let spans: Vec<(usize, usize)> = input
            .response_token_indices()
            .map(|i| input.response_char_spans[i].unwrap())
            .collect();
        assert_eq!(spans, brute_align(&ex.response), "{}", ex.id);
        let chars: Vec<char> = ex.response.chars().collect();
        for i in input.response_token_indices() {
            let (s, e) = input.response_char_spans[i].unwrap();
            let surface: String = chars[s..e].iter().collect::<String>().to_lowercase();
            let id = input.token_ids[i];
            assert!(
                id == UNK_ID || vocab.token(id) == Some(surface.as_str()),
                "{} token {surface}",
                ex.id
            );
        }
        assert_eq!(input.token_ids[0], CLS_ID);
        assert_eq!(input.token_ids.iter().filter(|&&t| t == SEP_ID).count(), 2);
    }
}

#[test]
fn synthetic_answers_are_found_by_substring_scan() {
    let corpus = synth_corpus(1000, ClassProportions::reference(), 12).unwrap();
    let mut counts = [0usize; 4];
    for ex in &corpus {
        counts[label_class(ex).unwrap().index()] += 1;
        match (ex.response_plausible, ex.answer) {
            (Some(true), Some(span)) => {
                let chars: Vec<char> = ex.response.chars().collect();
                let gold: String = chars[span.start..span.end].iter().collect();
                // first occurrence by scanning every char offset
                let hit = (0..=chars.len() - (span.end - span.start))
                    .find(|&s| chars[s..s + span.end - span.start].iter().collect::<String>() == gold);
                assert!(hit.is_some(), "{}", ex.id);
                assert!(!gold.trim().is_empty());
            }
            (Some(false), None) => {}
            other => panic!("{}: unexpected {other:?}", ex.id),
        }
    }
    assert_eq!(counts, [505, 228, 114, 153]);
    let tiny = synth_corpus(4, ClassProportions::reference(), 0).unwrap();
    assert_eq!(tiny.len(), 4);
}

fn quick_checkpoints(corpus: &[QAExample]) -> (Checkpoint, Checkpoint, qa_plausibility::Vocab) {
    let vocab = build_vocab(corpus, 2000).unwrap();
    let mut out = Vec::new();
    for ts in [TaskSet::QP, TaskSet::RP_AE] {
        let mut config = ModelConfig::desk(vocab.len());
        config.active_tasks = ts;
        let data = encode_examples(corpus, &vocab, config.max_len).unwrap();
        let tc = TrainConfig {
            learning_rate: 1e-3,
            max_epochs: 1,
            taskset: ts,
            ..TrainConfig::default()
        };
        let o = train(init_params(&config, 2), &config, &tc, &data, &[]).unwrap();
        out.push(Checkpoint {
            config,
            vocab_hash: vocab.hash(),
            params: o.params,
        });
    }
    let r = out.pop().unwrap();
    (out.pop().unwrap(), r, vocab)
}

#[test]
fn audit_equals_per_example_recomputation() {
    let mut corpus = synth_corpus(1000, ClassProportions::reference(), 30).unwrap();
    let (q, r, vocab) = quick_checkpoints(&corpus[..400]);
    corpus.insert(10, QAExample::new("w1", "Where is the dog?", "in the yard"));
    corpus.insert(500, QAExample::new("w2", "where's the cat", "outside"));
    let config = PipelineConfig::default();
    let pipeline = Pipeline::new(Box::new(q), Box::new(r), vocab, config.clone()).unwrap();
    let outcome = pipeline.clean_dataset(corpus.clone()).unwrap();

    let mut counts: HashMap<LabelClass, usize> = HashMap::new();
    let mut qh = [0usize; HIST_BINS];
    let mut rh = [0usize; HIST_BINS];
    let mut expected_ids = Vec::new();
    let scored: Vec<&QAExample> = corpus
        .iter()
        .filter(|e| !e.question.to_lowercase().starts_with("where"))
        .collect();
    for ex in &scored {
        let rec = pipeline.infer(ex).unwrap();
        let (qv, rv) = (rec.qp_score >= config.qp_threshold, rec.rp_score >= config.rp_threshold);
        *counts.entry(LabelClass::from_flags(qv, rv)).or_default() += 1;
        qh[hist_bin(rec.qp_score)] += 1;
        rh[hist_bin(rec.rp_score)] += 1;
        if qv && rv {
            expected_ids.push(ex.id.clone());
            let span = rec.answer_char_span.unwrap();
            assert_eq!(span.slice(&ex.response), rec.extracted_answer.as_deref());
        }
    }
    let c = outcome.audit.counts;
    let get = |k| counts.get(&k).copied().unwrap_or(0);
    assert_eq!(
        [c.yy, c.yn, c.ny, c.nn],
        [
            get(LabelClass::Yy),
            get(LabelClass::Yn),
            get(LabelClass::Ny),
            get(LabelClass::Nn)
        ]
    );
    assert_eq!(c.total, scored.len());
    assert_eq!(c.where_removed, 2);
    assert_eq!(outcome.audit.qp_hist, qh);
    assert_eq!(outcome.audit.rp_hist, rh);
    let cleaned_ids: Vec<String> = outcome.cleaned.iter().map(|e| e.id.clone()).collect();
    assert_eq!(cleaned_ids, expected_ids);
    for ex in &outcome.cleaned {
        let s = ex.scores.unwrap();
        assert!(s.qp >= config.qp_threshold && s.rp >= config.rp_threshold);
        ex.validate().unwrap();
    }

    let empty = pipeline.clean_dataset(Vec::new()).unwrap();
    assert!(empty.cleaned.is_empty());
    assert_eq!(empty.audit.counts.total, 0);
    assert_eq!(empty.audit.qp_hist, [0; HIST_BINS]);
}

fn small_set() -> (Vec<qa_plausibility::training::EncodedExample>, ModelConfig) {
    let corpus = synth_corpus(64, ClassProportions::reference(), 5).unwrap();
    let vocab = build_vocab(&corpus, 1000).unwrap();
    let config = ModelConfig::desk(vocab.len());
    (encode_examples(&corpus, &vocab, config.max_len).unwrap(), config)
}

#[test]
fn training_is_deterministic_and_loss_falls() {
    let (data, config) = small_set();
    let tc = TrainConfig {
        learning_rate: 1e-3,
        max_epochs: 5,
        patience: 10,
        seed: 8,
        ..TrainConfig::default()
    };
    let a = train(init_params(&config, 8), &config, &tc, &data, &data).unwrap();
    let b = train(init_params(&config, 8), &config, &tc, &data, &data).unwrap();
    assert_eq!(a.params, b.params);
    let losses: Vec<f64> = a.log.iter().map(|e| e.train_loss).collect();
    assert_eq!(losses, b.log.iter().map(|e| e.train_loss).collect::<Vec<_>>());
    assert_eq!(losses.len(), 5);
    assert!(losses[4] < losses[0], "{losses:?}");
}

#[test]
fn patience_zero_single_epoch_logs_once() {
    let (data, config) = small_set();
    let tc = TrainConfig {
        max_epochs: 1,
        patience: 0,
        ..TrainConfig::default()
    };
    let out = train(init_params(&config, 1), &config, &tc, &data, &data).unwrap();
    assert_eq!(out.log.len(), 1);
    assert_eq!(out.best_epoch, Some(1));
}

#[test]
fn untrained_model_scores_near_chance() {
    let corpus = synth_corpus(400, ClassProportions::normalized([1.0; 4]).unwrap(), 6).unwrap();
    let vocab = build_vocab(&corpus, 2000).unwrap();
    let config = ModelConfig::desk(vocab.len());
    let data = encode_examples(&corpus, &vocab, config.max_len).unwrap();
    let m = evaluate(&init_params(&config, 9), &config, &data, TaskSet::ALL, None).unwrap();
    for a in [m.qp_auroc.unwrap(), m.rp_auroc.unwrap()] {
        assert!((a - 0.5).abs() <= 0.15, "auroc {a}");
    }
    // scores that equal the labels rank perfectly
    let oracle: Vec<ScoredLabel> = data
        .iter()
        .map(|d| {
            let l = d.example.question_plausible.unwrap();
            ScoredLabel::new(if l { 1.0 } else { 0.0 }, l)
        })
        .collect();
    assert_eq!(auroc(&oracle), Ok(1.0));
}
