//! Greedy-decoding throughput comparison between the unfused and fused
//! execution paths, guarded by an output-equivalence check.
//!
//! Timing contract: batch size 1 (one source per decode, simulating online
//! inference), single-threaded, fixed decode length for both paths, at least
//! two warmup decodes, median over the timed repetitions.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::block::BlockMode;
use crate::error::{MuseError, Result};
use crate::fuse::{decode_step_fused, encode_fused, fuse_parameters, FusedDecoderCache, FusedModel};
use crate::infer::{decode_step, encode, DecoderCache, EncoderState};
use crate::model::{ModelConfig, ModelParams, BOS, EOS, UNK};
use crate::params::ParamStore;
use crate::tensor::Elem;

#[derive(Debug, Clone)]
pub struct BenchConfig {
    pub model: ModelConfig,
    pub src_len: usize,
    /// Tokens decoded per input (EOS does not stop the clock; both paths
    /// decode exactly this many tokens).
    pub decode_len: usize,
    pub warmup: usize,
    pub reps: usize,
    /// Random inputs checked for fused/unfused equivalence before timing.
    pub equivalence_inputs: usize,
    pub seed: u64,
}

impl BenchConfig {
    /// The reference shape: 6 blocks, hidden size 512, batch 1, with the
    /// convolution branch disabled (simple mode).
    pub fn base_simple() -> Self {
        BenchConfig {
            model: ModelConfig {
                n_layers: 6,
                d: 512,
                d_ff: 2048,
                heads: 4,
                mode: BlockMode::MuseSimple,
                src_vocab: 256,
                tgt_vocab: 256,
                max_len: 64,
                dropout: 0.0,
                ..ModelConfig::default()
            },
            src_len: 16,
            decode_len: 16,
            warmup: 2,
            reps: 5,
            equivalence_inputs: 20,
            seed: 1,
        }
    }

    /// Same shape with the convolution branch enabled.
    pub fn base_conv() -> Self {
        let mut cfg = Self::base_simple();
        cfg.model.mode = BlockMode::Muse;
        cfg.model.kernel_sizes = vec![3, 15];
        cfg
    }
}

#[derive(Debug, Clone)]
pub struct BenchReport {
    pub unfused_tokens_per_sec: Elem,
    pub fused_tokens_per_sec: Elem,
    pub speedup: Elem,
    pub equivalence_max_diff: Elem,
    pub decode_len: usize,
    pub inputs_checked: usize,
}

impl BenchReport {
    /// CSV with header `mode,tokens_per_sec,speedup`.
    pub fn to_csv(&self) -> String {
        format!(
            "mode,tokens_per_sec,speedup\nunfused,{:.2},1.000\nfused,{:.2},{:.3}\n",
            self.unfused_tokens_per_sec, self.fused_tokens_per_sec, self.speedup
        )
    }
}

fn random_source(rng: &mut ChaCha12Rng, cfg: &ModelConfig, len: usize) -> Vec<usize> {
    let lo = (UNK + 1).min(cfg.src_vocab - 1);
    let mut ids: Vec<usize> = (0..len - 1).map(|_| rng.gen_range(lo..cfg.src_vocab)).collect();
    ids.push(EOS);
    ids
}

/// Decode exactly `len` tokens by greedy argmax, never stopping early.
fn forced_greedy_unfused(
    state: &EncoderState,
    store: &ParamStore,
    params: &ModelParams,
    cfg: &ModelConfig,
    len: usize,
) -> Result<Vec<usize>> {
    let mut cache = DecoderCache::new(state, store, params, cfg)?;
    let mut out = Vec::with_capacity(len);
    let mut last = BOS;
    for _ in 0..len {
        let logits = decode_step(state, last, &mut cache, store, params, cfg)?;
        last = argmax(&logits);
        out.push(last);
    }
    Ok(out)
}

fn forced_greedy_fused(
    state: &EncoderState,
    fm: &FusedModel,
    len: usize,
) -> Result<Vec<usize>> {
    let mut cache = FusedDecoderCache::new(state, fm)?;
    let mut out = Vec::with_capacity(len);
    let mut last = BOS;
    for _ in 0..len {
        let logits = decode_step_fused(state, last, &mut cache, fm)?;
        last = argmax(&logits);
        out.push(last);
    }
    Ok(out)
}

fn argmax(xs: &[Elem]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Maximum absolute difference between fused and unfused step logits when
/// both paths are fed the identical token sequence.
fn equivalence_diff(
    src: &[usize],
    store: &ParamStore,
    params: &ModelParams,
    cfg: &ModelConfig,
    fm: &FusedModel,
    steps: usize,
) -> Result<Elem> {
    let state_u = encode(src, store, params, cfg)?;
    let state_f = encode_fused(src, fm)?;
    let mut worst: Elem = state_u
        .z
        .data
        .iter()
        .zip(&state_f.z.data)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, Elem::max);

    let mut cache_u = DecoderCache::new(&state_u, store, params, cfg)?;
    let mut cache_f = FusedDecoderCache::new(&state_f, fm)?;
    let mut last = BOS;
    for _ in 0..steps {
        let lu = decode_step(&state_u, last, &mut cache_u, store, params, cfg)?;
        let lf = decode_step_fused(&state_f, last, &mut cache_f, fm)?;
        for (a, b) in lu.iter().zip(&lf) {
            worst = worst.max((a - b).abs());
        }
        // drive both paths with the unfused path's choice
        last = argmax(&lu);
    }
    Ok(worst)
}

fn median(mut xs: Vec<Elem>) -> Elem {
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    xs[xs.len() / 2]
}

/// Build a model at the benchmark shape, verify fused/unfused equivalence,
/// then time greedy decoding on both paths over identical inputs.
pub fn run_speed_benchmark(cfg: &BenchConfig) -> Result<BenchReport> {
    if cfg.reps == 0 {
        return Err(MuseError::Config("bench needs at least one timed repetition".into()));
    }
    let model_cfg = &cfg.model;
    let (store, params) = ModelParams::init(model_cfg, cfg.seed)?;
    let fm = fuse_parameters(&store, &params, model_cfg)?;
    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed ^ 0x5eed_beef);

    // equivalence gate: never report speed for wrong results
    let mut worst: Elem = 0.0;
    for _ in 0..cfg.equivalence_inputs {
        let src = random_source(&mut rng, model_cfg, cfg.src_len);
        let steps = cfg.decode_len.min(8);
        worst = worst.max(equivalence_diff(&src, &store, &params, model_cfg, &fm, steps)?);
    }
    if worst >= 1e-6 {
        return Err(MuseError::Integrity(format!(
            "fused and unfused outputs diverge: max abs diff {worst:.3e} >= 1e-6"
        )));
    }

    // timing over one fixed input
    let src = random_source(&mut rng, model_cfg, cfg.src_len);
    let state = encode(&src, &store, &params, model_cfg)?;
    let state_f = encode_fused(&src, &fm)?;

    for _ in 0..cfg.warmup {
        forced_greedy_unfused(&state, &store, &params, model_cfg, cfg.decode_len)?;
        forced_greedy_fused(&state_f, &fm, cfg.decode_len)?;
    }

    let mut unfused_rates = Vec::with_capacity(cfg.reps);
    let mut fused_rates = Vec::with_capacity(cfg.reps);
    for _ in 0..cfg.reps {
        let t0 = Instant::now();
        forced_greedy_unfused(&state, &store, &params, model_cfg, cfg.decode_len)?;
        unfused_rates.push(cfg.decode_len as Elem / t0.elapsed().as_secs_f64() as Elem);

        let t1 = Instant::now();
        forced_greedy_fused(&state_f, &fm, cfg.decode_len)?;
        fused_rates.push(cfg.decode_len as Elem / t1.elapsed().as_secs_f64() as Elem);
    }

    let unfused = median(unfused_rates);
    let fused = median(fused_rates);
    Ok(BenchReport {
        unfused_tokens_per_sec: unfused,
        fused_tokens_per_sec: fused,
        speedup: fused / unfused,
        equivalence_max_diff: worst,
        decode_len: cfg.decode_len,
        inputs_checked: cfg.equivalence_inputs,
    })
}
