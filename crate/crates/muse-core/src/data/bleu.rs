//! Corpus-level BLEU with clipped n-gram precisions and brevity penalty,
//! matching the conventional corpus scorer: no smoothing, score 0 whenever
//! any n-gram precision is 0.

use std::collections::HashMap;
use std::hash::Hash;

use crate::error::{MuseError, Result};
use crate::tensor::Elem;

/// Corpus BLEU in [0, 100] over token sequences, geometric mean of modified
/// n-gram precisions for n = 1..=max_n times the brevity penalty. With
/// `smooth`, precisions for n >= 2 get add-one smoothing (for tiny toy
/// sentences only).
pub fn corpus_bleu<T: Eq + Hash + Clone>(
    candidates: &[Vec<T>],
    references: &[Vec<T>],
    max_n: usize,
    smooth: bool,
) -> Result<Elem> {
    if candidates.is_empty() {
        return Err(MuseError::Usage("BLEU over an empty candidate set".into()));
    }
    if candidates.len() != references.len() {
        return Err(MuseError::Usage(format!(
            "{} candidates vs {} references",
            candidates.len(),
            references.len()
        )));
    }
    if max_n == 0 {
        return Err(MuseError::Usage("max_n must be at least 1".into()));
    }

    let mut correct = vec![0usize; max_n];
    let mut total = vec![0usize; max_n];
    let mut cand_len = 0usize;
    let mut ref_len = 0usize;

    for (cand, reference) in candidates.iter().zip(references) {
        cand_len += cand.len();
        ref_len += reference.len();
        for n in 1..=max_n {
            let ref_counts = ngram_counts(reference, n);
            let cand_counts = ngram_counts(cand, n);
            for (gram, c) in &cand_counts {
                total[n - 1] += c;
                if let Some(&r) = ref_counts.get(gram) {
                    correct[n - 1] += (*c).min(r);
                }
            }
        }
    }

    if cand_len == 0 {
        return Ok(0.0);
    }
    let brevity = if cand_len >= ref_len {
        1.0
    } else {
        (1.0 - ref_len as Elem / cand_len as Elem).exp()
    };

    let mut log_sum = 0.0;
    for n in 0..max_n {
        let (c, t) = if smooth && n >= 1 {
            (correct[n] + 1, total[n] + 1)
        } else {
            (correct[n], total[n])
        };
        if c == 0 || t == 0 {
            return Ok(0.0);
        }
        log_sum += (c as Elem / t as Elem).ln();
    }
    Ok((brevity * (log_sum / max_n as Elem).exp() * 100.0).clamp(0.0, 100.0))
}

fn ngram_counts<T: Eq + Hash + Clone>(tokens: &[T], n: usize) -> HashMap<Vec<T>, usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for window in tokens.windows(n) {
            *counts.entry(window.to_vec()).or_insert(0) += 1;
        }
    }
    counts
}
