//! Token-level dynamic batching: batches are bounded by padded token count,
//! not sentence count.

use crate::error::{MuseError, Result};

/// Ordered batches of sentence indices. A batch's token cost is its size
/// times the longest sentence in it.
#[derive(Debug, Clone)]
pub struct BatchPlan {
    pub batches: Vec<Vec<usize>>,
    /// Parallel to `batches`: true for single sentences that alone exceed
    /// the token budget.
    pub oversize: Vec<bool>,
}

impl BatchPlan {
    pub fn num_batches(&self) -> usize {
        self.batches.len()
    }
}

/// Greedy fill in (optionally length-sorted) order; a batch closes when
/// adding the next sentence would push `batch_size * max_len` past
/// `max_tokens`. Sentences longer than the whole budget become flagged
/// singleton batches.
pub fn plan_token_batches(
    lengths: &[usize],
    max_tokens: usize,
    sort_by_length: bool,
) -> Result<BatchPlan> {
    if max_tokens == 0 {
        return Err(MuseError::Usage("max_tokens must be at least 1".into()));
    }
    let mut order: Vec<usize> = (0..lengths.len()).collect();
    if sort_by_length {
        order.sort_by_key(|&i| (lengths[i], i));
    }

    let mut batches = Vec::new();
    let mut oversize = Vec::new();
    let mut current: Vec<usize> = Vec::new();
    let mut current_max = 0usize;

    for &idx in &order {
        let len = lengths[idx];
        let new_max = current_max.max(len);
        let cost = (current.len() + 1) * new_max;
        if !current.is_empty() && cost > max_tokens {
            oversize.push(current_max > max_tokens);
            batches.push(std::mem::take(&mut current));
            current_max = 0;
        }
        current_max = current_max.max(len);
        current.push(idx);
    }
    if !current.is_empty() {
        oversize.push(current_max > max_tokens);
        batches.push(current);
    }
    Ok(BatchPlan { batches, oversize })
}
