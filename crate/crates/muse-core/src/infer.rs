//! Tape-free inference: full-sequence encoding and incremental decoding with
//! a per-layer cache.
//!
//! These paths share their arithmetic kernels with the tape ops; their
//! results are pinned to the tape semantics by the recomputation tests
//! (incremental decode against a full teacher-forced tape pass).

use std::sync::Arc;

use crate::block::{AttnMask, BlockConfig, BlockMode, BlockParams, ConvKind, Dropout, SharedProjection, LN_EPS};
use crate::decode::IncrementalScorer;
use crate::error::{MuseError, Result};
use crate::model::{self, ModelConfig, ModelParams, PositionalKind, PAD};
use crate::params::ParamStore;
use crate::tensor::kernels;
use crate::tensor::{Elem, Tape, Tensor};

/// Encoder output memory plus its padding mask.
#[derive(Debug, Clone)]
pub struct EncoderState {
    pub z: Tensor,
    pub src_pad: Vec<bool>,
}

impl EncoderState {
    pub fn len(&self) -> usize {
        self.z.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.z.numel() == 0
    }
}

// ── Raw building blocks ─────────────────────────────────────────────────

fn layer_norm_rows(x: &[Elem], n: usize, d: usize, gain: &[Elem], bias: &[Elem]) -> Vec<Elem> {
    let mut out = vec![0.0; n * d];
    for i in 0..n {
        kernels::layer_norm_row(&x[i * d..(i + 1) * d], gain, bias, LN_EPS, &mut out[i * d..(i + 1) * d]);
    }
    out
}

/// Multi-head attention of `q[n_q, d]` over `k/v[n_k, d]`.
/// `allowed`, when present, is the row-major [n_q, n_k] mask.
pub(crate) fn mha_rows(
    q: &[Elem],
    k: &[Elem],
    v: &[Elem],
    n_q: usize,
    n_k: usize,
    d: usize,
    heads: usize,
    allowed: Option<&[bool]>,
    out: &mut [Elem],
) {
    let d_k = d / heads;
    let scale = 1.0 / (d_k as Elem).sqrt();
    out[..n_q * d].fill(0.0);
    let mut scores = vec![0.0; n_k];
    for h in 0..heads {
        let off = h * d_k;
        for i in 0..n_q {
            let q_row = &q[i * d + off..i * d + off + d_k];
            for (j, s) in scores.iter_mut().enumerate() {
                let allow = allowed.map_or(true, |m| m[i * n_k + j]);
                *s = if allow {
                    kernels::dot(q_row, &k[j * d + off..j * d + off + d_k]) * scale
                } else {
                    Elem::NEG_INFINITY
                };
            }
            kernels::softmax_inplace(&mut scores);
            let o_row = &mut out[i * d + off..i * d + off + d_k];
            for (j, &w) in scores.iter().enumerate() {
                if w != 0.0 {
                    kernels::axpy(w, &v[j * d + off..j * d + off + d_k], o_row);
                }
            }
        }
    }
}

/// Tap mixing for one convolution cell over the whole sequence, before the
/// output projection. Returns the mixed rows.
pub(crate) fn conv_mix_rows(
    v2_logits: &[Elem], // rows used for the per-position tap logits
    v2_taps: &[Elem],   // rows gathered by the taps (pad rows already zeroed)
    n: usize,
    d: usize,
    weights: &[Elem],
    kernel: usize,
    kind: ConvKind,
    causal: bool,
) -> Vec<Elem> {
    let offsets = crate::block::tap_offsets(kernel, causal);
    let mut mixed = vec![0.0; n * d];
    match kind {
        ConvKind::DynamicDepthwise => {
            let mut logits = vec![0.0; kernel];
            for i in 0..n {
                let row = &v2_logits[i * d..(i + 1) * d];
                for (j, l) in logits.iter_mut().enumerate() {
                    *l = kernels::dot(&weights[j * d..(j + 1) * d], row);
                }
                kernels::softmax_inplace(&mut logits);
                let out_row = &mut mixed[i * d..(i + 1) * d];
                for (j, &off) in offsets.iter().enumerate() {
                    let src = i as isize + off;
                    if src >= 0 && (src as usize) < n {
                        let s = src as usize;
                        kernels::axpy(logits[j], &v2_taps[s * d..(s + 1) * d], out_row);
                    }
                }
            }
        }
        ConvKind::Plain => {
            for i in 0..n {
                let out_row = &mut mixed[i * d..(i + 1) * d];
                for (j, &off) in offsets.iter().enumerate() {
                    let src = i as isize + off;
                    if src >= 0 && (src as usize) < n {
                        let s = src as usize;
                        let w_row = &weights[j * d..(j + 1) * d];
                        for (c, o) in out_row.iter_mut().enumerate() {
                            *o += w_row[c] * v2_taps[s * d + c];
                        }
                    }
                }
            }
        }
    }
    mixed
}

/// Softmax of the gate scalars.
pub(crate) fn gate_weights(alpha: &[Elem]) -> Vec<Elem> {
    let mut w = alpha.to_vec();
    kernels::softmax_inplace(&mut w);
    w
}

/// One unfused block over a full sequence, mirroring the tape semantics.
fn raw_block_forward(
    x: &[Elem],
    n: usize,
    store: &ParamStore,
    blk: &BlockParams,
    cfg: &BlockConfig,
    mask: Option<&AttnMask>,
    pad: Option<&[bool]>,
) -> Vec<Elem> {
    let d = cfg.d;
    let normed = layer_norm_rows(x, n, d, store.data(blk.ln_gain), store.data(blk.ln_bias));

    // projections
    let mut q = vec![0.0; n * d];
    let mut k = vec![0.0; n * d];
    kernels::mm(&normed, store.data(blk.attn.w_q), n, d, d, &mut q);
    kernels::mm(&normed, store.data(blk.attn.w_k), n, d, d, &mut k);
    let (v1, v2) = match &blk.proj {
        SharedProjection::Shared { w_v } => {
            let mut v = vec![0.0; n * d];
            kernels::mm(&normed, store.data(*w_v), n, d, d, &mut v);
            (v.clone(), v)
        }
        SharedProjection::Separate { w_v1, w_v2 } => {
            let mut a = vec![0.0; n * d];
            let mut b = vec![0.0; n * d];
            kernels::mm(&normed, store.data(*w_v1), n, d, d, &mut a);
            kernels::mm(&normed, store.data(*w_v2), n, d, d, &mut b);
            (a, b)
        }
    };

    let mut out = x.to_vec();

    // attention branch
    let mut ctx = vec![0.0; n * d];
    mha_rows(&q, &k, &v1, n, n, d, cfg.heads, mask.map(|m| m.allowed.as_slice()), &mut ctx);
    let mut attn = vec![0.0; n * d];
    kernels::mm(&ctx, store.data(blk.attn.w_o), n, d, d, &mut attn);
    kernels::add_inplace(&mut out, &attn);

    // convolution branch
    if cfg.mode == BlockMode::Muse {
        let gate = gate_weights(store.data(blk.gate.as_ref().expect("muse gate").alpha));
        let v2_taps = match pad {
            Some(p) => {
                let mut z = v2.clone();
                for (i, &is_pad) in p.iter().enumerate() {
                    if is_pad {
                        z[i * d..(i + 1) * d].fill(0.0);
                    }
                }
                z
            }
            None => v2.clone(),
        };
        let mut conv = vec![0.0; n * d];
        for (cell, &gw) in blk.cells.iter().zip(&gate) {
            let mixed = conv_mix_rows(
                &v2,
                &v2_taps,
                n,
                d,
                store.data(cell.weights),
                cell.kernel_size,
                cfg.conv_kind,
                cfg.causal,
            );
            let mut cell_out = vec![0.0; n * d];
            kernels::mm(&mixed, store.data(cell.w_out), n, d, d, &mut cell_out);
            kernels::axpy(gw, &cell_out, &mut conv);
        }
        kernels::add_inplace(&mut out, &conv);
    }

    // pointwise branch
    let d_ff = cfg.d_ff;
    let mut h = vec![0.0; n * d_ff];
    kernels::mm(&normed, store.data(blk.ffn.w1), n, d, d_ff, &mut h);
    let b1 = store.data(blk.ffn.b1);
    for i in 0..n {
        for (hv, &b) in h[i * d_ff..(i + 1) * d_ff].iter_mut().zip(b1) {
            *hv += b;
        }
    }
    kernels::relu_inplace(&mut h);
    let mut pw = vec![0.0; n * d];
    kernels::mm(&h, store.data(blk.ffn.w2), n, d_ff, d, &mut pw);
    let b2 = store.data(blk.ffn.b2);
    for i in 0..n {
        for (o, &b) in pw[i * d..(i + 1) * d].iter_mut().zip(b2) {
            *o += b;
        }
    }
    kernels::add_inplace(&mut out, &pw);
    out
}

fn embed_rows(table: &[Elem], ids: &[usize], d: usize, positional: PositionalKind) -> Result<Vec<Elem>> {
    let scale = (d as Elem).sqrt();
    let mut x = vec![0.0; ids.len() * d];
    for (i, &id) in ids.iter().enumerate() {
        let row = &table[id * d..(id + 1) * d];
        for (o, &e) in x[i * d..(i + 1) * d].iter_mut().zip(row) {
            *o = e * scale;
        }
    }
    if positional == PositionalKind::Sinusoidal {
        let pos = model::positional_encoding(ids.len(), d)?;
        kernels::add_inplace(&mut x, &pos.data);
    }
    Ok(x)
}

/// Encode a source sequence into its hidden memory. Positions holding the
/// PAD token are masked out of attention and convolution so they cannot
/// influence non-pad outputs.
pub fn encode(
    src_ids: &[usize],
    store: &ParamStore,
    params: &ModelParams,
    cfg: &ModelConfig,
) -> Result<EncoderState> {
    if src_ids.is_empty() {
        return Err(MuseError::Usage("cannot encode an empty sequence".into()));
    }
    if src_ids.len() > cfg.max_len {
        return Err(MuseError::Usage(format!(
            "sequence length {} exceeds max_len {}",
            src_ids.len(),
            cfg.max_len
        )));
    }
    let table = store.tensor(params.src_embed);
    for &id in src_ids {
        if id >= cfg.src_vocab {
            return Err(MuseError::Data(format!(
                "token id {id} out of vocabulary (size {})",
                cfg.src_vocab
            )));
        }
    }
    let d = cfg.d;
    let n = src_ids.len();
    let src_pad: Vec<bool> = src_ids.iter().map(|&id| id == PAD).collect();
    let has_pad = src_pad.iter().any(|&p| p);

    let mut x = embed_rows(&table.data, src_ids, d, cfg.positional)?;
    let block_cfg = cfg.block_config(false);
    let mask = has_pad.then(|| AttnMask::from_padding(&src_pad, n));
    let pad = has_pad.then_some(&src_pad[..]);
    for blk in &params.enc_blocks {
        x = raw_block_forward(&x, n, store, blk, &block_cfg, mask.as_ref(), pad);
    }
    let z = layer_norm_rows(&x, n, d, store.data(params.enc_ln_gain), store.data(params.enc_ln_bias));
    Ok(EncoderState { z: Tensor::new(vec![n, d], z)?, src_pad })
}

// ── Incremental decoding ────────────────────────────────────────────────

/// Encoder-derived keys/values, shared by all clones of a cache.
#[derive(Debug)]
struct CtxMemory {
    // per layer: projected keys and values of the encoder memory
    k: Vec<Vec<Elem>>,
    v: Vec<Vec<Elem>>,
    src_allowed: Vec<bool>,
    src_len: usize,
}

/// Per-step decoding state: appended self-attention history and projected
/// convolution inputs per layer, plus the generated prefix length.
#[derive(Debug, Clone)]
pub struct DecoderCache {
    shared: Arc<CtxMemory>,
    layers: Vec<LayerCache>,
    t: usize,
    max_len: usize,
}

#[derive(Debug, Clone, Default)]
struct LayerCache {
    k_hist: Vec<Elem>,
    v_hist: Vec<Elem>,
    v2_hist: Vec<Elem>,
}

impl DecoderCache {
    pub fn new(
        state: &EncoderState,
        store: &ParamStore,
        params: &ModelParams,
        cfg: &ModelConfig,
    ) -> Result<Self> {
        let d = cfg.d;
        let n = state.len();
        let mut k = Vec::with_capacity(params.dec_layers.len());
        let mut v = Vec::with_capacity(params.dec_layers.len());
        for layer in &params.dec_layers {
            let mut kl = vec![0.0; n * d];
            let mut vl = vec![0.0; n * d];
            kernels::mm(&state.z.data, store.data(layer.ctx.w_k), n, d, d, &mut kl);
            kernels::mm(&state.z.data, store.data(layer.ctx.w_v), n, d, d, &mut vl);
            k.push(kl);
            v.push(vl);
        }
        Ok(DecoderCache {
            shared: Arc::new(CtxMemory {
                k,
                v,
                src_allowed: state.src_pad.iter().map(|&p| !p).collect(),
                src_len: n,
            }),
            layers: vec![LayerCache::default(); params.dec_layers.len()],
            t: 0,
            max_len: cfg.max_len,
        })
    }

    /// Number of tokens already fed.
    pub fn prefix_len(&self) -> usize {
        self.t
    }
}

/// Feed one token and return the next-token logits, advancing the cache.
pub fn decode_step(
    state: &EncoderState,
    next_id: usize,
    cache: &mut DecoderCache,
    store: &ParamStore,
    params: &ModelParams,
    cfg: &ModelConfig,
) -> Result<Vec<Elem>> {
    if cache.shared.src_len != state.len() || cache.shared.src_allowed.len() != state.src_pad.len()
    {
        return Err(MuseError::Usage(
            "decoder cache was built for a different encoder state".into(),
        ));
    }
    if cache.layers.len() != params.dec_layers.len() {
        return Err(MuseError::Usage("decoder cache does not match the model".into()));
    }
    if cache.t >= cache.max_len {
        return Err(MuseError::Usage(format!(
            "prefix length {} reached max_len {}",
            cache.t, cache.max_len
        )));
    }
    if next_id >= cfg.tgt_vocab {
        return Err(MuseError::Data(format!(
            "token id {next_id} out of vocabulary (size {})",
            cfg.tgt_vocab
        )));
    }

    let d = cfg.d;
    let t = cache.t;
    let table = store.data(params.tgt_embed);
    let mut x: Vec<Elem> = table[next_id * d..(next_id + 1) * d]
        .iter()
        .map(|&e| e * (d as Elem).sqrt())
        .collect();
    if cfg.positional == PositionalKind::Sinusoidal {
        let mut pos = vec![0.0; d];
        model::positional_row(t, d, &mut pos);
        kernels::add_inplace(&mut x, &pos);
    }

    let block_cfg = cfg.block_config(true);
    let heads = cfg.heads;
    for (layer_idx, (layer, lc)) in
        params.dec_layers.iter().zip(cache.layers.iter_mut()).enumerate()
    {
        let blk = &layer.block;
        let normed = layer_norm_rows(&x, 1, d, store.data(blk.ln_gain), store.data(blk.ln_bias));

        let mut q = vec![0.0; d];
        let mut k_row = vec![0.0; d];
        kernels::mm(&normed, store.data(blk.attn.w_q), 1, d, d, &mut q);
        kernels::mm(&normed, store.data(blk.attn.w_k), 1, d, d, &mut k_row);
        let (v1_row, v2_row) = match &blk.proj {
            SharedProjection::Shared { w_v } => {
                let mut v = vec![0.0; d];
                kernels::mm(&normed, store.data(*w_v), 1, d, d, &mut v);
                (v.clone(), v)
            }
            SharedProjection::Separate { w_v1, w_v2 } => {
                let mut a = vec![0.0; d];
                let mut b = vec![0.0; d];
                kernels::mm(&normed, store.data(*w_v1), 1, d, d, &mut a);
                kernels::mm(&normed, store.data(*w_v2), 1, d, d, &mut b);
                (a, b)
            }
        };
        lc.k_hist.extend_from_slice(&k_row);
        lc.v_hist.extend_from_slice(&v1_row);
        lc.v2_hist.extend_from_slice(&v2_row);
        let hist = t + 1;

        // self-attention over the whole prefix (causal by construction)
        let mut ctx = vec![0.0; d];
        mha_rows(&q, &lc.k_hist, &lc.v_hist, 1, hist, d, heads, None, &mut ctx);
        let mut attn = vec![0.0; d];
        kernels::mm(&ctx, store.data(blk.attn.w_o), 1, d, d, &mut attn);
        kernels::add_inplace(&mut x, &attn);

        // causal convolution over the cached projected inputs
        if block_cfg.mode == BlockMode::Muse {
            let gate = gate_weights(store.data(blk.gate.as_ref().expect("muse gate").alpha));
            let mut conv = vec![0.0; d];
            for (cell, &gw) in blk.cells.iter().zip(&gate) {
                let k_size = cell.kernel_size;
                let weights = store.data(cell.weights);
                let mut mixed = vec![0.0; d];
                match block_cfg.conv_kind {
                    ConvKind::DynamicDepthwise => {
                        let mut logits = vec![0.0; k_size];
                        for (j, l) in logits.iter_mut().enumerate() {
                            *l = kernels::dot(&weights[j * d..(j + 1) * d], &v2_row);
                        }
                        kernels::softmax_inplace(&mut logits);
                        for (j, &w) in logits.iter().enumerate() {
                            let src = t as isize + (j as isize + 1 - k_size as isize);
                            if src >= 0 {
                                let s = src as usize;
                                kernels::axpy(w, &lc.v2_hist[s * d..(s + 1) * d], &mut mixed);
                            }
                        }
                    }
                    ConvKind::Plain => {
                        for j in 0..k_size {
                            let src = t as isize + (j as isize + 1 - k_size as isize);
                            if src >= 0 {
                                let s = src as usize;
                                let w_row = &weights[j * d..(j + 1) * d];
                                for (c, o) in mixed.iter_mut().enumerate() {
                                    *o += w_row[c] * lc.v2_hist[s * d + c];
                                }
                            }
                        }
                    }
                }
                let mut cell_out = vec![0.0; d];
                kernels::mm(&mixed, store.data(cell.w_out), 1, d, d, &mut cell_out);
                kernels::axpy(gw, &cell_out, &mut conv);
            }
            kernels::add_inplace(&mut x, &conv);
        }

        // pointwise branch
        let d_ff = block_cfg.d_ff;
        let mut h = vec![0.0; d_ff];
        kernels::mm(&normed, store.data(blk.ffn.w1), 1, d, d_ff, &mut h);
        kernels::add_inplace(&mut h, store.data(blk.ffn.b1));
        kernels::relu_inplace(&mut h);
        let mut pw = vec![0.0; d];
        kernels::mm(&h, store.data(blk.ffn.w2), 1, d_ff, d, &mut pw);
        kernels::add_inplace(&mut pw, store.data(blk.ffn.b2));
        kernels::add_inplace(&mut x, &pw);

        // context attention over the encoder memory
        let ctx_p = &layer.ctx;
        let normed_c =
            layer_norm_rows(&x, 1, d, store.data(ctx_p.ln_gain), store.data(ctx_p.ln_bias));
        let mut qc = vec![0.0; d];
        kernels::mm(&normed_c, store.data(ctx_p.w_q), 1, d, d, &mut qc);
        let mem = &cache.shared;
        let mut cattn = vec![0.0; d];
        mha_rows(
            &qc,
            &mem.k[layer_idx],
            &mem.v[layer_idx],
            1,
            mem.src_len,
            d,
            heads,
            Some(&mem.src_allowed),
            &mut cattn,
        );
        let mut cout = vec![0.0; d];
        kernels::mm(&cattn, store.data(ctx_p.w_o), 1, d, d, &mut cout);
        kernels::add_inplace(&mut x, &cout);
    }

    let z =
        layer_norm_rows(&x, 1, d, store.data(params.dec_ln_gain), store.data(params.dec_ln_bias));
    let v = cfg.tgt_vocab;
    let mut logits = vec![0.0; v];
    kernels::mm_nt(&z, store.data(params.tgt_embed), 1, d, v, &mut logits);
    cache.t += 1;
    Ok(logits)
}

/// Reference logits for the last position of a prefix, recomputed from
/// scratch through the tape path. Oracle for the incremental cache.
pub fn recompute_logits(
    src_ids: &[usize],
    prefix: &[usize],
    store: &ParamStore,
    params: &ModelParams,
    cfg: &ModelConfig,
) -> Result<Vec<Elem>> {
    let mut tape = Tape::new();
    let binding = store.bind(&mut tape);
    let src_pad: Vec<bool> = src_ids.iter().map(|&id| id == PAD).collect();
    let has_pad = src_pad.iter().any(|&p| p);
    let pad_opt = has_pad.then_some(&src_pad[..]);
    let z = model::encode_on_tape(&mut tape, &binding, params, cfg, src_ids, pad_opt, &mut Dropout::Off)?;
    let states =
        model::decode_on_tape(&mut tape, &binding, params, cfg, z, pad_opt, prefix, &mut Dropout::Off)?;
    let last = tape.narrow_rows(states, prefix.len() - 1, 1)?;
    let logits = model::output_logits(&mut tape, &binding, params, last)?;
    Ok(tape.data(logits).to_vec())
}

// ── Scorer adapter for the search procedures ────────────────────────────

/// Incremental model scorer used by greedy and beam search.
pub struct ModelScorer<'a> {
    pub store: &'a ParamStore,
    pub params: &'a ModelParams,
    pub cfg: &'a ModelConfig,
    pub state: &'a EncoderState,
}

impl IncrementalScorer for ModelScorer<'_> {
    type State = DecoderCache;

    fn start(&self) -> Result<DecoderCache> {
        DecoderCache::new(self.state, self.store, self.params, self.cfg)
    }

    fn step(&self, cache: &mut DecoderCache, token: usize) -> Result<Vec<Elem>> {
        let logits = decode_step(self.state, token, cache, self.store, self.params, self.cfg)?;
        let mut lp = vec![0.0; logits.len()];
        kernels::log_softmax(&logits, &mut lp);
        Ok(lp)
    }

    fn vocab_size(&self) -> usize {
        self.cfg.tgt_vocab
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::block::BlockMode;
    use crate::model::{BOS, EOS};

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            n_layers: 2,
            d: 16,
            d_ff: 24,
            heads: 2,
            kernel_sizes: vec![3, 5],
            src_vocab: 12,
            tgt_vocab: 12,
            max_len: 20,
            dropout: 0.0,
            label_smoothing: 0.0,
            ..ModelConfig::default()
        }
    }

    fn max_abs_diff(a: &[Elem], b: &[Elem]) -> Elem {
        a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, Elem::max)
    }

    #[test]
    fn raw_encode_matches_tape_encode() {
        let cfg = tiny_cfg();
        let (store, params) = ModelParams::init(&cfg, 11).unwrap();
        let src = vec![4, 7, 5, 9, EOS];
        let state = encode(&src, &store, &params, &cfg).unwrap();

        let mut tape = Tape::new();
        let binding = store.bind(&mut tape);
        let z = crate::model::encode_on_tape(
            &mut tape, &binding, &params, &cfg, &src, None, &mut Dropout::Off,
        )
        .unwrap();
        assert!(max_abs_diff(&state.z.data, tape.data(z)) < 1e-10);
    }

    #[test]
    fn encode_is_deterministic_bitwise() {
        let cfg = tiny_cfg();
        let (store, params) = ModelParams::init(&cfg, 12).unwrap();
        let src = vec![3, 8, EOS];
        let a = encode(&src, &store, &params, &cfg).unwrap();
        let b = encode(&src, &store, &params, &cfg).unwrap();
        assert!(a.z.data.iter().zip(&b.z.data).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn encode_rejects_out_of_vocab_and_overlong() {
        let cfg = tiny_cfg();
        let (store, params) = ModelParams::init(&cfg, 13).unwrap();
        assert!(matches!(
            encode(&[99], &store, &params, &cfg),
            Err(MuseError::Data(_))
        ));
        let long = vec![4; cfg.max_len + 1];
        assert!(matches!(encode(&long, &store, &params, &cfg), Err(MuseError::Usage(_))));
    }

    #[test]
    fn pad_positions_are_inert() {
        let cfg = tiny_cfg();
        let (mut store, params) = ModelParams::init(&cfg, 14).unwrap();
        let src = vec![4, 7, 5, PAD, PAD];
        let before = encode(&src, &store, &params, &cfg).unwrap();
        // perturb the PAD embedding row
        let d = cfg.d;
        for v in store.tensor_mut(params.src_embed).data[PAD * d..(PAD + 1) * d].iter_mut() {
            *v += 3.5;
        }
        let after = encode(&src, &store, &params, &cfg).unwrap();
        for i in 0..3 {
            assert!(
                max_abs_diff(&before.z.data[i * d..(i + 1) * d], &after.z.data[i * d..(i + 1) * d])
                    < 1e-12,
                "non-pad row {i} changed"
            );
        }
    }

    #[test]
    fn incremental_decoding_matches_full_recomputation() {
        for mode in [BlockMode::Muse, BlockMode::MuseSimple] {
            let mut cfg = tiny_cfg();
            cfg.mode = mode;
            let (store, params) = ModelParams::init(&cfg, 15).unwrap();
            let src = vec![4, 7, 5, EOS];
            let state = encode(&src, &store, &params, &cfg).unwrap();
            let mut cache = DecoderCache::new(&state, &store, &params, &cfg).unwrap();

            let prefix = vec![BOS, 6, 9, 3, 8, 4];
            for t in 0..prefix.len() {
                let inc =
                    decode_step(&state, prefix[t], &mut cache, &store, &params, &cfg).unwrap();
                let full =
                    recompute_logits(&src, &prefix[..=t], &store, &params, &cfg).unwrap();
                assert!(
                    max_abs_diff(&inc, &full) < 1e-6,
                    "mode {mode:?} step {t}: diff {}",
                    max_abs_diff(&inc, &full)
                );
            }
            assert_eq!(cache.prefix_len(), prefix.len());
        }
    }

    #[test]
    fn cache_rejects_wrong_encoder_state() {
        let cfg = tiny_cfg();
        let (store, params) = ModelParams::init(&cfg, 16).unwrap();
        let state_a = encode(&[4, 5, EOS], &store, &params, &cfg).unwrap();
        let state_b = encode(&[4, 5, 6, EOS], &store, &params, &cfg).unwrap();
        let mut cache = DecoderCache::new(&state_a, &store, &params, &cfg).unwrap();
        assert!(matches!(
            decode_step(&state_b, BOS, &mut cache, &store, &params, &cfg),
            Err(MuseError::Usage(_))
        ));
    }

    #[test]
    fn logits_cover_target_vocabulary() {
        let cfg = tiny_cfg();
        let (store, params) = ModelParams::init(&cfg, 17).unwrap();
        let state = encode(&[4, EOS], &store, &params, &cfg).unwrap();
        let mut cache = DecoderCache::new(&state, &store, &params, &cfg).unwrap();
        let logits = decode_step(&state, BOS, &mut cache, &store, &params, &cfg).unwrap();
        assert_eq!(logits.len(), cfg.tgt_vocab);
    }

    #[test]
    fn future_tokens_do_not_change_past_logits() {
        let cfg = tiny_cfg();
        let (store, params) = ModelParams::init(&cfg, 18).unwrap();
        let src = vec![5, 9, EOS];
        let prefix_a = vec![BOS, 4, 6, 7, 8];
        let mut prefix_b = prefix_a.clone();
        prefix_b[3] = 10; // change a token after position 2
        prefix_b[4] = 3;

        let a = recompute_logits(&src, &prefix_a[..3], &store, &params, &cfg).unwrap();
        // recompute over the longer, perturbed prefix and look at position 2
        let mut tape = Tape::new();
        let binding = store.bind(&mut tape);
        let z = crate::model::encode_on_tape(
            &mut tape, &binding, &params, &cfg, &src, None, &mut Dropout::Off,
        )
        .unwrap();
        let states = crate::model::decode_on_tape(
            &mut tape, &binding, &params, &cfg, z, None, &prefix_b, &mut Dropout::Off,
        )
        .unwrap();
        let row = tape.narrow_rows(states, 2, 1).unwrap();
        let logits = crate::model::output_logits(&mut tape, &binding, &params, row).unwrap();
        assert!(max_abs_diff(&a, tape.data(logits)) < 1e-12);
    }
}
