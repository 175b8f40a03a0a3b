//! s-BLEU and d-BLEU scoring, per-sentence-index score breakdown, and
//! token-level accuracy for the entity-carry task.
//!
//! Corpus scores are unsmoothed (max order 4, pooled clipped counts,
//! brevity penalty `exp(1 - r/c)` when the hypothesis is short). The
//! per-sentence scores used inside the index breakdown apply add-one
//! smoothing to orders above 1, since unsmoothed per-sentence BLEU is almost
//! always zero.

use std::collections::{BTreeMap, HashMap};
use std::hash::Hash;

use serde::Serialize;
use thiserror::Error;

use crate::corpus::Document;

pub const MAX_ORDER: usize = 4;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("empty corpus")]
    Empty,
    #[error("hypothesis/reference counts differ: {hyp} vs {refs}")]
    CountMismatch { hyp: usize, refs: usize },
}

#[derive(Debug, Clone, Serialize)]
pub struct BleuReport {
    pub score: f64,
    pub precisions: [f64; MAX_ORDER],
    pub brevity_penalty: f64,
    pub hyp_len: usize,
    pub ref_len: usize,
}

fn ngram_counts<T: Eq + Hash + Clone>(tokens: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut counts: HashMap<&[T], usize> = HashMap::new();
    if tokens.len() >= n {
        for gram in tokens.windows(n) {
            *counts.entry(gram).or_insert(0) += 1;
        }
    }
    counts
}

fn corpus_bleu<T: Eq + Hash + Clone>(pairs: &[(&[T], &[T])]) -> BleuReport {
    let mut matches = [0usize; MAX_ORDER];
    let mut totals = [0usize; MAX_ORDER];
    let mut hyp_len = 0usize;
    let mut ref_len = 0usize;
    for (hyp, reference) in pairs {
        hyp_len += hyp.len();
        ref_len += reference.len();
        for n in 1..=MAX_ORDER {
            let hyp_grams = ngram_counts(hyp, n);
            let ref_grams = ngram_counts(reference, n);
            for (gram, &count) in &hyp_grams {
                let allowed = ref_grams.get(gram).copied().unwrap_or(0);
                matches[n - 1] += count.min(allowed);
            }
            totals[n - 1] += hyp.len().saturating_sub(n - 1);
        }
    }
    let mut precisions = [0.0f64; MAX_ORDER];
    for n in 0..MAX_ORDER {
        precisions[n] = if totals[n] > 0 {
            matches[n] as f64 / totals[n] as f64
        } else {
            0.0
        };
    }
    let brevity_penalty = if hyp_len == 0 {
        0.0
    } else if hyp_len < ref_len {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    } else {
        1.0
    };
    let score = if precisions.iter().any(|&p| p == 0.0) || hyp_len == 0 {
        0.0
    } else {
        let log_mean = precisions.iter().map(|p| p.ln()).sum::<f64>() / MAX_ORDER as f64;
        100.0 * brevity_penalty * log_mean.exp()
    };
    BleuReport {
        score,
        precisions,
        brevity_penalty,
        hyp_len,
        ref_len,
    }
}

/// Corpus BLEU over aligned sentence pairs.
pub fn s_bleu<T: Eq + Hash + Clone>(
    hyps: &[Vec<T>],
    refs: &[Vec<T>],
) -> Result<BleuReport, EvalError> {
    if hyps.len() != refs.len() {
        return Err(EvalError::CountMismatch {
            hyp: hyps.len(),
            refs: refs.len(),
        });
    }
    if hyps.is_empty() {
        return Err(EvalError::Empty);
    }
    let pairs: Vec<(&[T], &[T])> = hyps
        .iter()
        .zip(refs)
        .map(|(h, r)| (h.as_slice(), r.as_slice()))
        .collect();
    Ok(corpus_bleu(&pairs))
}

/// Corpus BLEU with each document's sentences concatenated into one segment,
/// so n-grams may cross sentence boundaries.
pub fn d_bleu<T: Eq + Hash + Clone>(
    hyp_docs: &[Vec<Vec<T>>],
    ref_docs: &[Vec<Vec<T>>],
) -> Result<BleuReport, EvalError> {
    if hyp_docs.len() != ref_docs.len() {
        return Err(EvalError::CountMismatch {
            hyp: hyp_docs.len(),
            refs: ref_docs.len(),
        });
    }
    if hyp_docs.is_empty() {
        return Err(EvalError::Empty);
    }
    let flat_h: Vec<Vec<T>> = hyp_docs
        .iter()
        .map(|d| d.iter().flatten().cloned().collect())
        .collect();
    let flat_r: Vec<Vec<T>> = ref_docs
        .iter()
        .map(|d| d.iter().flatten().cloned().collect())
        .collect();
    let pairs: Vec<(&[T], &[T])> = flat_h
        .iter()
        .zip(&flat_r)
        .map(|(h, r)| (h.as_slice(), r.as_slice()))
        .collect();
    Ok(corpus_bleu(&pairs))
}

/// Per-sentence BLEU with add-one smoothing on orders above 1. Orders with
/// no hypothesis n-grams are dropped from the geometric mean.
pub fn sentence_bleu_smoothed<T: Eq + Hash + Clone>(hyp: &[T], reference: &[T]) -> f64 {
    if hyp.is_empty() {
        return 0.0;
    }
    let mut log_sum = 0.0f64;
    let mut orders = 0usize;
    for n in 1..=MAX_ORDER {
        let total = hyp.len().saturating_sub(n - 1);
        if total == 0 {
            break;
        }
        let hyp_grams = ngram_counts(hyp, n);
        let ref_grams = ngram_counts(reference, n);
        let mut matched = 0usize;
        for (gram, &count) in &hyp_grams {
            matched += count.min(ref_grams.get(gram).copied().unwrap_or(0));
        }
        let p = if n == 1 {
            matched as f64 / total as f64
        } else {
            (matched + 1) as f64 / (total + 1) as f64
        };
        if p == 0.0 {
            return 0.0;
        }
        log_sum += p.ln();
        orders += 1;
    }
    if orders == 0 {
        return 0.0;
    }
    let bp = if hyp.len() < reference.len() {
        (1.0 - reference.len() as f64 / hyp.len() as f64).exp()
    } else {
        1.0
    };
    100.0 * bp * (log_sum / orders as f64).exp()
}

#[derive(Debug, Clone, Serialize)]
pub struct IndexBucket {
    /// Sentence-index range `[lo, hi)`.
    pub lo: usize,
    pub hi: usize,
    pub mean_bleu: f64,
    pub sentences: usize,
}

/// Mean per-sentence BLEU grouped by sentence index within the document,
/// averaged across documents in buckets of `bucket` indices. Empty buckets
/// are omitted.
pub fn bleu_by_index<T: Eq + Hash + Clone>(
    hyp_docs: &[Vec<Vec<T>>],
    ref_docs: &[Vec<Vec<T>>],
    bucket: usize,
) -> Result<Vec<IndexBucket>, EvalError> {
    assert!(bucket >= 1, "bucket width must be at least 1");
    if hyp_docs.len() != ref_docs.len() {
        return Err(EvalError::CountMismatch {
            hyp: hyp_docs.len(),
            refs: ref_docs.len(),
        });
    }
    let mut sums: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    for (hd, rd) in hyp_docs.iter().zip(ref_docs) {
        for (i, reference) in rd.iter().enumerate() {
            let hyp = match hd.get(i) {
                Some(h) => h.as_slice(),
                None => &[],
            };
            let score = sentence_bleu_smoothed(hyp, reference);
            let entry = sums.entry(i / bucket).or_insert((0.0, 0));
            entry.0 += score;
            entry.1 += 1;
        }
    }
    Ok(sums
        .into_iter()
        .map(|(b, (sum, n))| IndexBucket {
            lo: b * bucket,
            hi: (b + 1) * bucket,
            mean_bleu: sum / n as f64,
            sentences: n,
        })
        .collect())
}

// ---------------------------------------------------------------------------
// Token accuracy for the entity-carry task
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct AccuracyReport {
    pub non_pron_accuracy: f64,
    pub pron_accuracy: f64,
    pub non_pron_total: usize,
    pub pron_total: usize,
    /// Per antecedent distance: (correct, total).
    pub per_distance: BTreeMap<usize, (usize, usize)>,
}

impl AccuracyReport {
    pub fn distance_accuracy(&self, distance: usize) -> Option<f64> {
        self.per_distance
            .get(&distance)
            .map(|&(ok, n)| ok as f64 / n.max(1) as f64)
    }
}

/// Position-aligned token accuracy of translations against references.
/// Positions past the end of a hypothesis count as wrong.
pub fn translation_accuracy(hyps: &[Vec<Vec<u32>>], refs: &[Document]) -> AccuracyReport {
    let (mut pron_ok, mut pron_n, mut rest_ok, mut rest_n) = (0usize, 0usize, 0usize, 0usize);
    let mut per_distance: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    for (hyp_doc, doc) in hyps.iter().zip(refs) {
        for (s, ref_sent) in doc.tgt.iter().enumerate() {
            let hyp_sent = hyp_doc.get(s).map(|v| v.as_slice()).unwrap_or(&[]);
            for (i, &gold) in ref_sent.iter().enumerate() {
                let pred = hyp_sent.get(i).copied();
                let correct = pred == Some(gold);
                let ann = doc.annotations.iter().find(|a| a.sent == s && a.tok == i);
                match ann {
                    Some(a) => {
                        pron_n += 1;
                        let slot = per_distance.entry(a.distance).or_insert((0, 0));
                        slot.1 += 1;
                        if correct {
                            pron_ok += 1;
                            slot.0 += 1;
                        }
                    }
                    None => {
                        rest_n += 1;
                        if correct {
                            rest_ok += 1;
                        }
                    }
                }
            }
        }
    }
    AccuracyReport {
        non_pron_accuracy: rest_ok as f64 / rest_n.max(1) as f64,
        pron_accuracy: pron_ok as f64 / pron_n.max(1) as f64,
        non_pron_total: rest_n,
        pron_total: pron_n,
        per_distance,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    #[test]
    fn identity_scores_one_hundred() {
        let sents = vec![toks("a b c d e"), toks("f g h i")];
        let report = s_bleu(&sents, &sents).unwrap();
        assert!((report.score - 100.0).abs() < 1e-9);
        assert!((report.brevity_penalty - 1.0).abs() < 1e-12);

        let docs = vec![sents.clone()];
        let d = d_bleu(&docs, &docs).unwrap();
        assert!((d.score - 100.0).abs() < 1e-9);
    }

    /// Hand-computed oracle: hyp "a b c d" vs ref "a b c d e".
    #[test]
    fn matches_hand_ngram_oracle() {
        let report = s_bleu(&[toks("a b c d")], &[toks("a b c d e")]).unwrap();
        assert_eq!(report.precisions, [1.0, 1.0, 1.0, 1.0]);
        assert!((report.brevity_penalty - 0.7788007830714049).abs() < 1e-9);
        assert!((report.score - 77.88).abs() < 0.01, "score {}", report.score);
    }

    #[test]
    fn disjoint_vocabulary_scores_zero() {
        let report = s_bleu(&[toks("x y z w")], &[toks("a b c d")]).unwrap();
        assert_eq!(report.score, 0.0);
    }

    #[test]
    fn empty_corpus_is_a_usage_error() {
        let empty: Vec<Vec<String>> = vec![];
        assert!(matches!(s_bleu(&empty, &empty), Err(EvalError::Empty)));
        let one = vec![toks("a")];
        assert!(matches!(
            s_bleu(&one, &[]),
            Err(EvalError::CountMismatch { .. })
        ));
    }

    #[test]
    fn single_sentence_documents_make_d_equal_s() {
        let hyp = vec![toks("a b c d"), toks("e f g h i")];
        let reference = vec![toks("a b x d"), toks("e f g h")];
        let s = s_bleu(&hyp, &reference).unwrap();
        let hyp_docs: Vec<_> = hyp.iter().map(|s| vec![s.clone()]).collect();
        let ref_docs: Vec<_> = reference.iter().map(|s| vec![s.clone()]).collect();
        let d = d_bleu(&hyp_docs, &ref_docs).unwrap();
        assert_eq!(s.score, d.score);
        assert_eq!(s.precisions, d.precisions);
    }

    /// A sentence boundary shifted by one word: the concatenations agree, so
    /// d-BLEU sees the crossing n-grams that s-BLEU misses.
    #[test]
    fn boundary_shift_separates_d_from_s() {
        let ref_doc = vec![toks("a b c"), toks("d e f")];
        let hyp_doc = vec![toks("a b"), toks("c d e f")];
        let s = s_bleu(&hyp_doc, &ref_doc).unwrap();
        let d = d_bleu(&[hyp_doc.clone()], &[ref_doc.clone()]).unwrap();
        assert!((d.score - 100.0).abs() < 1e-9);
        assert!(d.score > s.score);
    }

    #[test]
    fn by_index_identity_and_short_docs() {
        let doc = vec![toks("a b c d e"), toks("f g h i j")];
        let buckets = bleu_by_index(&[doc.clone()], &[doc.clone()], 10).unwrap();
        assert_eq!(buckets.len(), 1);
        assert!((buckets[0].mean_bleu - 100.0).abs() < 1e-9);
        assert_eq!(buckets[0].sentences, 2);
    }

    #[test]
    fn by_index_detects_late_corruption() {
        // 30-sentence doc: pristine first bucket, half-corrupt second,
        // fully disjoint third.
        let base: Vec<Vec<String>> = (0..30)
            .map(|i| toks(&format!("w{i} x{i} y{i} z{i} q{i}")))
            .collect();
        let mut hyp = base.clone();
        for i in 10..20 {
            hyp[i][1] = "bad".into();
            hyp[i][3] = "bad2".into();
        }
        for (i, sent) in hyp.iter_mut().enumerate().take(30).skip(20) {
            *sent = toks(&format!("n{i} o{i} p{i} r{i} s{i}"));
        }
        let buckets = bleu_by_index(&[hyp], &[base], 10).unwrap();
        assert_eq!(buckets.len(), 3);
        assert!(buckets[0].mean_bleu > buckets[1].mean_bleu);
        assert!(buckets[1].mean_bleu > buckets[2].mean_bleu);
        assert!((buckets[0].mean_bleu - 100.0).abs() < 1e-9);
    }

    #[test]
    fn accuracy_alignment_and_distances() {
        use crate::corpus::PronAnnotation;
        let doc = Document {
            id: "d".into(),
            src: vec![vec![4, 5, 6], vec![7, 8]],
            tgt: vec![vec![14, 15, 16], vec![17, 18]],
            annotations: vec![PronAnnotation {
                sent: 1,
                tok: 1,
                distance: 3,
            }],
        };
        let hyp = vec![vec![14, 15, 99], vec![17, 18]];
        let report = translation_accuracy(&[hyp], &[doc]);
        assert_eq!(report.pron_total, 1);
        assert_eq!(report.non_pron_total, 4);
        assert!((report.pron_accuracy - 1.0).abs() < 1e-12);
        assert!((report.non_pron_accuracy - 0.75).abs() < 1e-12);
        assert_eq!(report.per_distance[&3], (1, 1));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn bleu_bounds_and_order_invariance(
            seed in 0u64..1000,
            n in 2usize..8,
        ) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mut hyps = Vec::new();
            let mut refs = Vec::new();
            for _ in 0..n {
                let len = rng.gen_range(4..10);
                let hyp: Vec<String> = (0..len).map(|_| format!("w{}", rng.gen_range(0..6))).collect();
                let rlen = rng.gen_range(4..10);
                let reference: Vec<String> = (0..rlen).map(|_| format!("w{}", rng.gen_range(0..6))).collect();
                hyps.push(hyp);
                refs.push(reference);
            }
            let a = s_bleu(&hyps, &refs).unwrap();
            prop_assert!(a.score >= 0.0 && a.score <= 100.0);
            prop_assert!(a.brevity_penalty <= 1.0);
            // order invariance
            let mut idx: Vec<usize> = (0..n).collect();
            idx.reverse();
            let hyps2: Vec<_> = idx.iter().map(|&i| hyps[i].clone()).collect();
            let refs2: Vec<_> = idx.iter().map(|&i| refs[i].clone()).collect();
            let b = s_bleu(&hyps2, &refs2).unwrap();
            prop_assert!((a.score - b.score).abs() < 1e-9);
        }
    }
}
