//! Length-bucketed evaluation and gate-weight reporting.

use crate::block::BlockMode;
use crate::data::bleu::corpus_bleu;
use crate::error::{MuseError, Result};
use crate::infer::gate_weights;
use crate::model::ModelParams;
use crate::params::ParamStore;
use crate::tensor::Elem;

#[derive(Debug, Clone)]
pub struct BucketStats {
    pub lo: usize,
    /// Exclusive upper bound; `usize::MAX` for the open last bucket.
    pub hi: usize,
    pub count: usize,
    pub token_acc: Elem,
    pub exact_match: Elem,
    pub bleu: Elem,
}

/// Gate weights of one layer's convolution cells.
#[derive(Debug, Clone)]
pub struct LayerGate {
    pub layer: String,
    /// (kernel size, softmaxed weight) per cell.
    pub weights: Vec<(usize, Elem)>,
    /// weight(smallest kernel) / weight(largest kernel).
    pub ratio: Elem,
}

#[derive(Debug, Clone, Default)]
pub struct EvalReport {
    pub buckets: Vec<BucketStats>,
    pub gates: Vec<LayerGate>,
}

impl EvalReport {
    pub fn total_count(&self) -> usize {
        self.buckets.iter().map(|b| b.count).sum()
    }

    /// Pair-weighted mean token accuracy over all buckets.
    pub fn overall_token_acc(&self) -> Elem {
        let mut num = 0.0;
        let mut den = 0.0;
        for b in &self.buckets {
            num += b.token_acc * b.count as Elem;
            den += b.count as Elem;
        }
        if den == 0.0 {
            0.0
        } else {
            num / den
        }
    }

    /// CSV with header `bucket_lo,bucket_hi,count,token_acc,exact_match,bleu`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("bucket_lo,bucket_hi,count,token_acc,exact_match,bleu\n");
        for b in &self.buckets {
            let hi = if b.hi == usize::MAX { "inf".to_string() } else { b.hi.to_string() };
            out.push_str(&format!(
                "{},{},{},{:.6},{:.6},{:.4}\n",
                b.lo, hi, b.count, b.token_acc, b.exact_match, b.bleu
            ));
        }
        out
    }
}

/// CSV with header `layer,kernel,weight` for the gate report.
pub fn gates_to_csv(gates: &[LayerGate]) -> String {
    let mut out = String::from("layer,kernel,weight\n");
    for g in gates {
        for (kernel, weight) in &g.weights {
            out.push_str(&format!("{},{},{:.6}\n", g.layer, kernel, weight));
        }
    }
    out
}

/// Decode every pair with `translate`, assign pairs to buckets by source
/// length, and compute per-bucket token accuracy, exact match, and BLEU.
///
/// `boundaries` are the strictly increasing inner bucket edges; the buckets
/// are `[0, b0), [b0, b1), ..., [b_last, inf)`.
pub fn bucketed_eval(
    mut translate: impl FnMut(&[usize]) -> Result<Vec<usize>>,
    pairs: &[(Vec<usize>, Vec<usize>)],
    boundaries: &[usize],
    smooth_bleu: bool,
) -> Result<EvalReport> {
    if pairs.is_empty() {
        return Err(MuseError::Usage("evaluation over an empty corpus".into()));
    }
    for w in boundaries.windows(2) {
        if w[1] <= w[0] {
            return Err(MuseError::Config(format!(
                "bucket boundaries must be strictly increasing, got {boundaries:?}"
            )));
        }
    }

    let mut edges: Vec<(usize, usize)> = Vec::new();
    let mut lo = 0;
    for &b in boundaries {
        edges.push((lo, b));
        lo = b;
    }
    edges.push((lo, usize::MAX));

    struct Acc {
        cands: Vec<Vec<usize>>,
        refs: Vec<Vec<usize>>,
        token_matches: usize,
        token_total: usize,
        exact: usize,
    }
    let mut accs: Vec<Acc> = edges
        .iter()
        .map(|_| Acc {
            cands: Vec::new(),
            refs: Vec::new(),
            token_matches: 0,
            token_total: 0,
            exact: 0,
        })
        .collect();

    for (src, reference) in pairs {
        let decoded = translate(src)?;
        let bucket = edges
            .iter()
            .position(|&(lo, hi)| src.len() >= lo && src.len() < hi)
            .expect("edges cover all lengths");
        let acc = &mut accs[bucket];
        let matches = decoded
            .iter()
            .zip(reference)
            .filter(|(a, b)| a == b)
            .count();
        acc.token_matches += matches;
        acc.token_total += decoded.len().max(reference.len());
        if decoded == *reference {
            acc.exact += 1;
        }
        acc.cands.push(decoded);
        acc.refs.push(reference.clone());
    }

    let mut buckets = Vec::new();
    for ((lo, hi), acc) in edges.into_iter().zip(accs) {
        let count = acc.cands.len();
        let bleu = if count == 0 {
            0.0
        } else {
            corpus_bleu(&acc.cands, &acc.refs, 4, smooth_bleu)?
        };
        buckets.push(BucketStats {
            lo,
            hi,
            count,
            token_acc: if acc.token_total == 0 {
                0.0
            } else {
                acc.token_matches as Elem / acc.token_total as Elem
            },
            exact_match: if count == 0 { 0.0 } else { acc.exact as Elem / count as Elem },
            bleu,
        });
    }
    Ok(EvalReport { buckets, gates: Vec::new() })
}

/// Per-layer gate weights and small/large kernel ratio. Requires at least
/// two kernel sizes.
pub fn gate_weight_report(
    store: &ParamStore,
    params: &ModelParams,
    mode: BlockMode,
) -> Result<Vec<LayerGate>> {
    if mode != BlockMode::Muse {
        return Err(MuseError::Config(
            "gate report needs the convolution branch (mode=muse)".into(),
        ));
    }
    let mut rows = Vec::new();
    let blocks = params
        .enc_blocks
        .iter()
        .enumerate()
        .map(|(i, b)| (format!("enc.{i}"), b))
        .chain(
            params
                .dec_layers
                .iter()
                .enumerate()
                .map(|(i, l)| (format!("dec.{i}"), &l.block)),
        );
    for (layer, blk) in blocks {
        if blk.cells.len() < 2 {
            return Err(MuseError::Config(format!(
                "gate report needs at least two kernel sizes, layer {layer} has {}",
                blk.cells.len()
            )));
        }
        let gate = blk.gate.as_ref().expect("muse blocks carry a gate");
        let weights = gate_weights(store.data(gate.alpha));
        let pairs: Vec<(usize, Elem)> =
            blk.cells.iter().map(|c| c.kernel_size).zip(weights.iter().copied()).collect();
        let smallest = pairs.iter().min_by_key(|(k, _)| *k).expect(">= 2 cells");
        let largest = pairs.iter().max_by_key(|(k, _)| *k).expect(">= 2 cells");
        rows.push(LayerGate { layer, ratio: smallest.1 / largest.1, weights: pairs });
    }
    Ok(rows)
}
