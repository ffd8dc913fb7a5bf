//! Greedy and beam-search decoding with a length penalty.

use crate::error::{MuseError, Result};
use crate::model::{BOS, EOS};
use crate::tensor::Elem;

/// Anything that can be stepped token by token and scored. Implemented by
/// the real model ([`crate::infer::ModelScorer`]) and by the toy tables used
/// to cross-check the search against exhaustive enumeration.
pub trait IncrementalScorer {
    type State: Clone;

    fn start(&self) -> Result<Self::State>;

    /// Advance the state by feeding `token`; returns log-probabilities over
    /// the vocabulary for the next position.
    fn step(&self, state: &mut Self::State, token: usize) -> Result<Vec<Elem>>;

    fn vocab_size(&self) -> usize;
}

/// One decoding hypothesis: generated ids (without BOS), cumulative log
/// probability, and whether it has finished.
#[derive(Debug, Clone)]
pub struct Hypothesis {
    pub ids: Vec<usize>,
    pub log_prob: Elem,
    pub finished: bool,
}

impl Hypothesis {
    /// Length-penalized score used to rank finished hypotheses.
    pub fn score(&self, alpha: Elem) -> Elem {
        self.log_prob / length_penalty(self.ids.len().max(1), alpha)
    }

    /// Generated tokens without the trailing EOS.
    pub fn surface_ids(&self) -> &[usize] {
        match self.ids.last() {
            Some(&id) if id == EOS => &self.ids[..self.ids.len() - 1],
            _ => &self.ids,
        }
    }
}

#[derive(Debug, Clone)]
pub struct BeamConfig {
    pub beam_size: usize,
    /// Length-penalty exponent; 0 disables the penalty.
    pub alpha: Elem,
    pub max_len: usize,
}

impl Default for BeamConfig {
    fn default() -> Self {
        BeamConfig { beam_size: 5, alpha: 1.0, max_len: 64 }
    }
}

impl BeamConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beam_size == 0 {
            return Err(MuseError::Config("beam_size must be at least 1".into()));
        }
        if self.alpha < 0.0 {
            return Err(MuseError::Config("length penalty alpha must be non-negative".into()));
        }
        if self.max_len == 0 {
            return Err(MuseError::Config("max_len must be at least 1".into()));
        }
        Ok(())
    }
}

/// Divisor applied to a hypothesis log probability: ((5 + len) / 6)^alpha.
pub fn length_penalty(len: usize, alpha: Elem) -> Elem {
    ((5.0 + len as Elem) / 6.0).powf(alpha)
}

/// Argmax decoding; ties break toward the smallest token id.
pub fn greedy_decode<S: IncrementalScorer>(scorer: &S, max_len: usize) -> Result<Hypothesis> {
    if max_len == 0 {
        return Err(MuseError::Usage("max_len must be at least 1".into()));
    }
    let mut state = scorer.start()?;
    let mut hyp = Hypothesis { ids: Vec::new(), log_prob: 0.0, finished: false };
    let mut last = BOS;
    for _ in 0..max_len {
        let log_probs = scorer.step(&mut state, last)?;
        let mut best = 0;
        for (i, &lp) in log_probs.iter().enumerate() {
            if lp > log_probs[best] {
                best = i;
            }
        }
        hyp.ids.push(best);
        hyp.log_prob += log_probs[best];
        last = best;
        if best == EOS {
            break;
        }
    }
    hyp.finished = true;
    Ok(hyp)
}

/// Standard beam search. Live hypotheses are pruned by cumulative log
/// probability; finished hypotheses are set aside and compete by
/// length-penalized score. Ties resolve toward shorter, then
/// lexicographically smaller token sequences.
pub fn beam_search<S: IncrementalScorer>(scorer: &S, cfg: &BeamConfig) -> Result<Hypothesis> {
    cfg.validate()?;

    struct Live<T> {
        ids: Vec<usize>,
        log_prob: Elem,
        state: T,
        last: usize,
    }

    let start = scorer.start()?;
    let mut live = vec![Live { ids: Vec::new(), log_prob: 0.0, state: start, last: BOS }];
    let mut finished: Vec<Hypothesis> = Vec::new();

    for _ in 0..cfg.max_len {
        if live.is_empty() {
            break;
        }
        // expand every live hypothesis over the whole vocabulary
        let mut candidates: Vec<(Elem, Vec<usize>, usize, usize)> = Vec::new(); // (logp, ids, parent, token)
        for (parent, hyp) in live.iter_mut().enumerate() {
            let log_probs = scorer.step(&mut hyp.state, hyp.last)?;
            for (token, &lp) in log_probs.iter().enumerate() {
                let mut ids = hyp.ids.clone();
                ids.push(token);
                candidates.push((hyp.log_prob + lp, ids, parent, token));
            }
        }
        // deterministic order: score desc, then shorter, then lexicographic ids
        candidates.sort_by(|a, b| {
            b.0.partial_cmp(&a.0)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then_with(|| a.1.len().cmp(&b.1.len()))
                .then_with(|| a.1.cmp(&b.1))
        });
        candidates.truncate(cfg.beam_size);

        let mut next_live = Vec::with_capacity(cfg.beam_size);
        for (log_prob, ids, parent, token) in candidates {
            if token == EOS {
                finished.push(Hypothesis { ids, log_prob, finished: true });
            } else {
                next_live.push(Live {
                    ids,
                    log_prob,
                    state: live[parent].state.clone(),
                    last: token,
                });
            }
        }
        live = next_live;
    }

    // anything still alive at max_len counts as finished
    for hyp in live {
        finished.push(Hypothesis { ids: hyp.ids, log_prob: hyp.log_prob, finished: true });
    }
    finished
        .into_iter()
        .max_by(|a, b| {
            a.score(cfg.alpha)
                .partial_cmp(&b.score(cfg.alpha))
                .unwrap_or(std::cmp::Ordering::Equal)
                .then_with(|| b.ids.len().cmp(&a.ids.len()))
                .then_with(|| b.ids.cmp(&a.ids))
        })
        .ok_or_else(|| MuseError::Usage("beam search produced no hypotheses".into()))
}
