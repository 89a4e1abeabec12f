//! Accuracy, rank-based AUROC, and bag-of-tokens answer F1.

use std::collections::HashMap;

use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MetricError {
    #[error("metric undefined on an empty list")]
    Empty,
    #[error("AUROC undefined: need at least one positive and one negative label")]
    SingleClass,
    #[error("non-finite score at index {0}")]
    NonFinite(usize),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredLabel {
    pub score: f64,
    pub label: bool,
}

impl ScoredLabel {
    pub fn new(score: f64, label: bool) -> Self {
        Self { score, label }
    }
}

fn check_finite(items: &[ScoredLabel]) -> Result<(), MetricError> {
    match items.iter().position(|i| !i.score.is_finite()) {
        Some(i) => Err(MetricError::NonFinite(i)),
        None => Ok(()),
    }
}

/// Fraction of items where `score >= threshold` agrees with the label.
pub fn accuracy(items: &[ScoredLabel], threshold: f64) -> Result<f64, MetricError> {
    if items.is_empty() {
        return Err(MetricError::Empty);
    }
    check_finite(items)?;
    let correct = items.iter().filter(|i| (i.score >= threshold) == i.label).count();
    Ok(correct as f64 / items.len() as f64)
}

/// Area under the ROC curve via the Mann-Whitney U statistic, with average
/// ranks for tied scores (ties count one half).
pub fn auroc(items: &[ScoredLabel]) -> Result<f64, MetricError> {
    check_finite(items)?;
    let n_pos = items.iter().filter(|i| i.label).count();
    let n_neg = items.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(MetricError::SingleClass);
    }
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.sort_by(|&a, &b| items[a].score.total_cmp(&items[b].score));

    let mut pos_rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && items[order[j + 1]].score == items[order[i]].score {
            j += 1;
        }
        // 1-based ranks i+1 ..= j+1 share their mean
        let rank = (i + j + 2) as f64 / 2.0;
        let positives = order[i..=j].iter().filter(|&&k| items[k].label).count();
        pos_rank_sum += rank * positives as f64;
        i = j + 1;
    }
    let (p, n) = (n_pos as f64, n_neg as f64);
    let u = pos_rank_sum - p * (p + 1.0) / 2.0;
    Ok(u / (p * n))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct NormalizeOptions {
    /// Drop "a", "an" and "the". Off by default.
    pub remove_articles: bool,
}

/// Lowercases, deletes every character that is neither alphanumeric nor
/// whitespace, and splits on whitespace.
pub fn normalize_tokens(text: &str, options: NormalizeOptions) -> Vec<String> {
    let cleaned: String = text
        .chars()
        .filter(|c| c.is_alphanumeric() || c.is_whitespace())
        .flat_map(char::to_lowercase)
        .collect();
    cleaned
        .split_whitespace()
        .filter(|t| !(options.remove_articles && matches!(*t, "a" | "an" | "the")))
        .map(str::to_string)
        .collect()
}

pub fn span_f1_with(predicted: &str, gold: &str, options: NormalizeOptions) -> f64 {
    let pred = normalize_tokens(predicted, options);
    let gold = normalize_tokens(gold, options);
    match (pred.is_empty(), gold.is_empty()) {
        (true, true) => return 1.0,
        (true, false) | (false, true) => return 0.0,
        _ => {}
    }
    let mut gold_counts: HashMap<&str, usize> = HashMap::new();
    for t in &gold {
        *gold_counts.entry(t).or_default() += 1;
    }
    let mut overlap = 0usize;
    for t in &pred {
        if let Some(c) = gold_counts.get_mut(t.as_str()) {
            if *c > 0 {
                *c -= 1;
                overlap += 1;
            }
        }
    }
    if overlap == 0 {
        return 0.0;
    }
    let precision = overlap as f64 / pred.len() as f64;
    let recall = overlap as f64 / gold.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

/// Token-overlap F1 between a predicted and a gold answer.
pub fn span_f1(predicted: &str, gold: &str) -> f64 {
    span_f1_with(predicted, gold, NormalizeOptions::default())
}

/// Normalized string equality.
pub fn exact_match(predicted: &str, gold: &str) -> bool {
    let opts = NormalizeOptions::default();
    normalize_tokens(predicted, opts) == normalize_tokens(gold, opts)
}

/// Mean per-pair F1. A missing prediction should be passed as `""`.
pub fn corpus_f1<P: AsRef<str>, G: AsRef<str>>(pairs: &[(P, G)]) -> Result<f64, MetricError> {
    if pairs.is_empty() {
        return Err(MetricError::Empty);
    }
    let sum: f64 = pairs.iter().map(|(p, g)| span_f1(p.as_ref(), g.as_ref())).sum();
    Ok(sum / pairs.len() as f64)
}

pub fn corpus_exact_match<P: AsRef<str>, G: AsRef<str>>(pairs: &[(P, G)]) -> Result<f64, MetricError> {
    if pairs.is_empty() {
        return Err(MetricError::Empty);
    }
    let hits = pairs
        .iter()
        .filter(|(p, g)| exact_match(p.as_ref(), g.as_ref()))
        .count();
    Ok(hits as f64 / pairs.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn items(scores: &[f64], labels: &[bool]) -> Vec<ScoredLabel> {
        scores
            .iter()
            .zip(labels)
            .map(|(&s, &l)| ScoredLabel::new(s, l))
            .collect()
    }

    #[test]
    fn accuracy_cases() {
        assert_eq!(accuracy(&items(&[0.9, 0.1], &[true, false]), 0.5), Ok(1.0));
        assert_eq!(accuracy(&items(&[0.1, 0.9], &[true, false]), 0.5), Ok(0.0));
        assert_eq!(accuracy(&items(&[0.5], &[true]), 0.5), Ok(1.0));
        assert_eq!(accuracy(&[], 0.5), Err(MetricError::Empty));
    }

    #[test]
    fn auroc_cases() {
        let t = [true, true, false, false];
        assert_eq!(auroc(&items(&[0.9, 0.8, 0.3, 0.2], &t)), Ok(1.0));
        assert_eq!(auroc(&items(&[0.2, 0.3, 0.8, 0.9], &t)), Ok(0.0));
        assert_eq!(auroc(&items(&[0.4; 4], &t)), Ok(0.5));
        // one tie between a positive and a negative: 3 wins + 0.5 of 4 pairs
        assert_eq!(auroc(&items(&[0.9, 0.5, 0.5, 0.1], &t)), Ok(0.875));
        assert_eq!(auroc(&items(&[0.1, 0.2], &[true, true])), Err(MetricError::SingleClass));
        assert_eq!(
            auroc(&items(&[f64::NAN, 0.2], &[true, false])),
            Err(MetricError::NonFinite(0))
        );
    }

    #[test]
    fn f1_cases() {
        assert!((span_f1("beet and carrot juice", "beet juice") - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(span_f1("Beet Juice!", "beet juice"), 1.0);
        assert_eq!(span_f1("", ""), 1.0);
        assert_eq!(span_f1("x", ""), 0.0);
        assert_eq!(span_f1("", "x"), 0.0);
        assert_eq!(span_f1("red", "blue"), 0.0);
        assert_eq!(span_f1("the the", "the"), 2.0 * 0.5 * 1.0 / 1.5);
        assert_eq!(span_f1("?!", ""), 1.0);
        let opts = NormalizeOptions { remove_articles: true };
        assert_eq!(span_f1_with("the dog", "a dog", opts), 1.0);
        assert_eq!(span_f1("the dog", "a dog"), 0.5);
    }

    #[test]
    fn punctuation_is_deleted_not_split() {
        assert_eq!(
            normalize_tokens("That's  chicken.", NormalizeOptions::default()),
            ["thats", "chicken"]
        );
        assert!(exact_match("That's chicken.", "thats chicken"));
    }

    #[test]
    fn corpus_aggregates() {
        assert_eq!(corpus_f1(&[("a", "a"), ("b", "c")]), Ok(0.5));
        assert_eq!(corpus_f1(&[("a b", "a b"), ("c", "c")]), Ok(1.0));
        assert_eq!(corpus_f1::<&str, &str>(&[]), Err(MetricError::Empty));
        assert_eq!(corpus_exact_match(&[("a", "a"), ("", "c")]), Ok(0.5));
    }

    proptest! {
        #[test]
        fn auroc_invariant_under_monotone_transform(
            data in prop::collection::vec((0u8..20, any::<bool>()), 2..40)
        ) {
            prop_assume!(data.iter().any(|d| d.1) && data.iter().any(|d| !d.1));
            let base: Vec<_> = data.iter().map(|&(s, l)| ScoredLabel::new(s as f64 / 20.0, l)).collect();
            let warped: Vec<_> = base.iter().map(|i| ScoredLabel::new((3.0 * i.score).exp() - 7.0, i.label)).collect();
            let flipped: Vec<_> = base.iter().map(|i| ScoredLabel::new(-i.score, !i.label)).collect();
            let a = auroc(&base).unwrap();
            prop_assert!((a - auroc(&warped).unwrap()).abs() < 1e-12);
            prop_assert!((a - auroc(&flipped).unwrap()).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&a));
        }

        #[test]
        fn f1_bounded_and_reflexive(a in "[a-c ,.]{0,12}", b in "[a-c ,.]{0,12}") {
            let f = span_f1(&a, &b);
            prop_assert!((0.0..=1.0).contains(&f));
            prop_assert_eq!(span_f1(&a, &a), 1.0);
        }

        #[test]
        fn accuracy_flips_with_labels(
            data in prop::collection::vec((0u8..10, any::<bool>()), 1..30)
        ) {
            // scores are k/10 + 0.05, never exactly at the threshold
            let base: Vec<_> = data.iter().map(|&(s, l)| ScoredLabel::new(s as f64 / 10.0 + 0.05, l)).collect();
            let flipped: Vec<_> = base.iter().map(|i| ScoredLabel::new(i.score, !i.label)).collect();
            let a = accuracy(&base, 0.5).unwrap();
            prop_assert!((a + accuracy(&flipped, 0.5).unwrap() - 1.0).abs() < 1e-15);
        }
    }
}
