//! Fused-parameter execution.
//!
//! Per block, the input-side projections W_Q | W_K | W_V | W_1 are
//! column-concatenated into one wide encoder matrix and the output-side
//! projections W_O ; W_2 ; W_out are row-stacked into one decoder matrix, so
//! every branch of the block shares a single wide product on each side. The
//! arithmetic is unchanged — same operation count, same kernels — but each
//! step runs two large matrix products instead of seven small ones and keeps
//! per-step buffers preallocated.
//!
//! Fusion requires the shared value projection: the V column block feeds both
//! attention values and convolution taps.

use std::sync::Arc;

use crate::block::{tap_offsets, ConvKind, SharedProjection};
use crate::decode::IncrementalScorer;
use crate::error::{MuseError, Result};
use crate::infer::{conv_mix_rows, gate_weights, mha_rows, EncoderState};
use crate::model::{self, ModelConfig, ModelParams, PositionalKind};
use crate::params::ParamStore;
use crate::tensor::kernels;
use crate::tensor::{Elem, Tensor};

/// Column offsets of the branch segments inside a wide encoder matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EncOffsets {
    pub q: usize,
    pub k: usize,
    pub v: usize,
    pub h: usize,
    pub width: usize,
}

/// Row offsets of the branch segments inside a wide decoder matrix:
/// attention output, pointwise second layer, then one segment per cell.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DecOffsets {
    pub attn: usize,
    pub ffn: usize,
    pub cells: Vec<usize>,
    pub rows: usize,
}

#[derive(Debug, Clone)]
pub struct FusedCell {
    pub kernel_size: usize,
    /// `[k, d]` tap-logit projection (dynamic) or fixed taps (plain).
    pub weights: Vec<Elem>,
}

/// One block with fused input/output projections.
#[derive(Debug, Clone)]
pub struct FusedBlock {
    pub w_enc: Vec<Elem>,
    pub enc: EncOffsets,
    pub w_dec: Vec<Elem>,
    pub dec: DecOffsets,
    pub ln_gain: Vec<Elem>,
    pub ln_bias: Vec<Elem>,
    pub b1: Vec<Elem>,
    pub b2: Vec<Elem>,
    pub cells: Vec<FusedCell>,
    /// Softmaxed gate weights, one per cell (inference-time constants).
    pub gate: Vec<Elem>,
}

/// Decoder context attention with its key/value projections fused pairwise.
#[derive(Debug, Clone)]
pub struct FusedCtx {
    pub ln_gain: Vec<Elem>,
    pub ln_bias: Vec<Elem>,
    pub w_q: Vec<Elem>,
    /// `[d, 2d]`: W_K | W_V.
    pub w_kv: Vec<Elem>,
    pub w_o: Vec<Elem>,
}

/// Whole model in fused form, self-contained for inference.
#[derive(Debug, Clone)]
pub struct FusedModel {
    pub cfg: ModelConfig,
    pub src_embed: Vec<Elem>,
    pub tgt_embed: Vec<Elem>,
    pub enc_blocks: Vec<FusedBlock>,
    pub enc_ln_gain: Vec<Elem>,
    pub enc_ln_bias: Vec<Elem>,
    pub dec_blocks: Vec<FusedBlock>,
    pub dec_ctx: Vec<FusedCtx>,
    pub dec_ln_gain: Vec<Elem>,
    pub dec_ln_bias: Vec<Elem>,
}

fn concat_cols(sources: &[(&[Elem], usize)], rows: usize) -> (Vec<Elem>, usize) {
    let width: usize = sources.iter().map(|(_, w)| w).sum();
    let mut out = vec![0.0; rows * width];
    let mut offset = 0;
    for &(src, w) in sources {
        for r in 0..rows {
            out[r * width + offset..r * width + offset + w].copy_from_slice(&src[r * w..(r + 1) * w]);
        }
        offset += w;
    }
    (out, width)
}

fn fuse_block(
    store: &ParamStore,
    blk: &crate::block::BlockParams,
    cfg: &ModelConfig,
) -> Result<FusedBlock> {
    let d = cfg.d;
    let d_ff = cfg.d_ff;
    let w_v = match &blk.proj {
        SharedProjection::Shared { w_v } => *w_v,
        SharedProjection::Separate { .. } => {
            return Err(MuseError::Config(
                "parameter fusion requires the shared value projection".into(),
            ))
        }
    };

    let (w_enc, width) = concat_cols(
        &[
            (store.data(blk.attn.w_q), d),
            (store.data(blk.attn.w_k), d),
            (store.data(w_v), d),
            (store.data(blk.ffn.w1), d_ff),
        ],
        d,
    );
    let enc = EncOffsets { q: 0, k: d, v: 2 * d, h: 3 * d, width };

    // output side: row-stacked, so plain concatenation of the flat buffers
    let mut w_dec = Vec::with_capacity((2 * d + d_ff + blk.cells.len() * d) * d);
    w_dec.extend_from_slice(store.data(blk.attn.w_o));
    w_dec.extend_from_slice(store.data(blk.ffn.w2));
    let mut cell_offsets = Vec::with_capacity(blk.cells.len());
    let mut row = d + d_ff;
    for cell in &blk.cells {
        w_dec.extend_from_slice(store.data(cell.w_out));
        cell_offsets.push(row);
        row += d;
    }
    let dec = DecOffsets { attn: 0, ffn: d, cells: cell_offsets, rows: row };

    let gate = match &blk.gate {
        Some(g) => gate_weights(store.data(g.alpha)),
        None => Vec::new(),
    };

    Ok(FusedBlock {
        w_enc,
        enc,
        w_dec,
        dec,
        ln_gain: store.data(blk.ln_gain).to_vec(),
        ln_bias: store.data(blk.ln_bias).to_vec(),
        b1: store.data(blk.ffn.b1).to_vec(),
        b2: store.data(blk.ffn.b2).to_vec(),
        cells: blk
            .cells
            .iter()
            .map(|c| FusedCell {
                kernel_size: c.kernel_size,
                weights: store.data(c.weights).to_vec(),
            })
            .collect(),
        gate,
    })
}

/// Concatenate every block's projection matrices into fused form.
/// Fails in separate-projection mode.
pub fn fuse_parameters(
    store: &ParamStore,
    params: &ModelParams,
    cfg: &ModelConfig,
) -> Result<FusedModel> {
    cfg.validate()?;
    let d = cfg.d;
    let enc_blocks =
        params.enc_blocks.iter().map(|b| fuse_block(store, b, cfg)).collect::<Result<Vec<_>>>()?;
    let dec_blocks = params
        .dec_layers
        .iter()
        .map(|l| fuse_block(store, &l.block, cfg))
        .collect::<Result<Vec<_>>>()?;
    let dec_ctx = params
        .dec_layers
        .iter()
        .map(|l| {
            let (w_kv, _) =
                concat_cols(&[(store.data(l.ctx.w_k), d), (store.data(l.ctx.w_v), d)], d);
            FusedCtx {
                ln_gain: store.data(l.ctx.ln_gain).to_vec(),
                ln_bias: store.data(l.ctx.ln_bias).to_vec(),
                w_q: store.data(l.ctx.w_q).to_vec(),
                w_kv,
                w_o: store.data(l.ctx.w_o).to_vec(),
            }
        })
        .collect();

    Ok(FusedModel {
        cfg: cfg.clone(),
        src_embed: store.data(params.src_embed).to_vec(),
        tgt_embed: store.data(params.tgt_embed).to_vec(),
        enc_blocks,
        enc_ln_gain: store.data(params.enc_ln_gain).to_vec(),
        enc_ln_bias: store.data(params.enc_ln_bias).to_vec(),
        dec_blocks,
        dec_ctx,
        dec_ln_gain: store.data(params.dec_ln_gain).to_vec(),
        dec_ln_bias: store.data(params.dec_ln_bias).to_vec(),
    })
}

impl FusedBlock {
    fn check(&self, d: usize, d_ff: usize) -> Result<()> {
        if self.enc.width != 3 * d + d_ff
            || self.enc != (EncOffsets { q: 0, k: d, v: 2 * d, h: 3 * d, width: 3 * d + d_ff })
        {
            return Err(MuseError::Integrity(format!(
                "fused encoder offsets {:?} do not match widths d={d}, d_ff={d_ff}",
                self.enc
            )));
        }
        let want_rows = d + d_ff + self.cells.len() * d;
        if self.dec.rows != want_rows {
            return Err(MuseError::Integrity(format!(
                "fused decoder rows {} do not match expected {want_rows}",
                self.dec.rows
            )));
        }
        Ok(())
    }

    /// Recover one column segment of the wide encoder matrix. Slicing at the
    /// recorded offsets reproduces the original matrices bitwise.
    pub fn enc_segment(&self, start: usize, width: usize, d: usize) -> Vec<Elem> {
        let mut out = vec![0.0; d * width];
        for r in 0..d {
            out[r * width..(r + 1) * width]
                .copy_from_slice(&self.w_enc[r * self.enc.width + start..r * self.enc.width + start + width]);
        }
        out
    }

    /// Recover one row segment of the wide decoder matrix.
    pub fn dec_segment(&self, start: usize, rows: usize, d: usize) -> Vec<Elem> {
        self.w_dec[start * d..(start + rows) * d].to_vec()
    }
}

// ── Fused forward over full sequences ───────────────────────────────────

fn layer_norm_rows(x: &[Elem], n: usize, d: usize, gain: &[Elem], bias: &[Elem]) -> Vec<Elem> {
    let mut out = vec![0.0; n * d];
    for i in 0..n {
        kernels::layer_norm_row(
            &x[i * d..(i + 1) * d],
            gain,
            bias,
            crate::block::LN_EPS,
            &mut out[i * d..(i + 1) * d],
        );
    }
    out
}

fn extract_cols(wide: &[Elem], n: usize, width: usize, start: usize, len: usize) -> Vec<Elem> {
    let mut out = vec![0.0; n * len];
    for r in 0..n {
        out[r * len..(r + 1) * len].copy_from_slice(&wide[r * width + start..r * width + start + len]);
    }
    out
}

/// One fused block over a full sequence. Matches the unfused block to
/// rounding error; `mask`/`pad` have the same meaning as in the unfused path.
pub fn fused_block_forward(
    x: &[Elem],
    n: usize,
    fb: &FusedBlock,
    cfg: &ModelConfig,
    causal_conv: bool,
    mask: Option<&[bool]>,
    pad: Option<&[bool]>,
) -> Result<Vec<Elem>> {
    let d = cfg.d;
    let d_ff = cfg.d_ff;
    fb.check(d, d_ff)?;

    let normed = layer_norm_rows(x, n, d, &fb.ln_gain, &fb.ln_bias);

    // the one wide input-side product
    let width = fb.enc.width;
    let mut wide = vec![0.0; n * width];
    kernels::mm(&normed, &fb.w_enc, n, d, width, &mut wide);

    let q = extract_cols(&wide, n, width, fb.enc.q, d);
    let k = extract_cols(&wide, n, width, fb.enc.k, d);
    let v = extract_cols(&wide, n, width, fb.enc.v, d);
    let mut h = extract_cols(&wide, n, width, fb.enc.h, d_ff);
    for r in 0..n {
        kernels::add_inplace(&mut h[r * d_ff..(r + 1) * d_ff], &fb.b1);
    }
    kernels::relu_inplace(&mut h);

    // branch bodies
    let mut ctx = vec![0.0; n * d];
    mha_rows(&q, &k, &v, n, n, d, cfg.heads, mask, &mut ctx);

    let v_taps = match pad {
        Some(p) => {
            let mut z = v.clone();
            for (i, &is_pad) in p.iter().enumerate() {
                if is_pad {
                    z[i * d..(i + 1) * d].fill(0.0);
                }
            }
            z
        }
        None => v.clone(),
    };

    // concatenated decoder-side input: [ctx | relu(h) | gate_i * mixed_i ...]
    let rows = fb.dec.rows;
    let mut cat = vec![0.0; n * rows];
    for r in 0..n {
        cat[r * rows..r * rows + d].copy_from_slice(&ctx[r * d..(r + 1) * d]);
        cat[r * rows + d..r * rows + d + d_ff].copy_from_slice(&h[r * d_ff..(r + 1) * d_ff]);
    }
    for ((cell, &gw), &seg) in fb.cells.iter().zip(&fb.gate).zip(&fb.dec.cells) {
        let mixed = conv_mix_rows(&v, &v_taps, n, d, &cell.weights, cell.kernel_size, cfg.conv_kind, causal_conv);
        for r in 0..n {
            for c in 0..d {
                cat[r * rows + seg + c] = gw * mixed[r * d + c];
            }
        }
    }

    // the one wide output-side product, accumulated onto the residual
    let mut out = x.to_vec();
    kernels::mm_acc(&cat, &fb.w_dec, n, rows, d, &mut out);
    for r in 0..n {
        kernels::add_inplace(&mut out[r * d..(r + 1) * d], &fb.b2);
    }
    Ok(out)
}

/// [`fused_block_forward`] with tensor in/out, for direct comparison against
/// the unfused block.
pub fn fused_block_forward_tensor(
    x: &Tensor,
    fb: &FusedBlock,
    cfg: &ModelConfig,
    causal_conv: bool,
    mask: Option<&[bool]>,
    pad: Option<&[bool]>,
) -> Result<Tensor> {
    let n = x.rows();
    let out = fused_block_forward(&x.data, n, fb, cfg, causal_conv, mask, pad)?;
    Tensor::new(vec![n, cfg.d], out)
}

fn embed_rows(
    table: &[Elem],
    ids: &[usize],
    d: usize,
    positional: PositionalKind,
) -> Result<Vec<Elem>> {
    let scale = (d as Elem).sqrt();
    let mut x = vec![0.0; ids.len() * d];
    for (i, &id) in ids.iter().enumerate() {
        for (o, &e) in x[i * d..(i + 1) * d].iter_mut().zip(&table[id * d..(id + 1) * d]) {
            *o = e * scale;
        }
    }
    if positional == PositionalKind::Sinusoidal {
        let pos = model::positional_encoding(ids.len(), d)?;
        kernels::add_inplace(&mut x, &pos.data);
    }
    Ok(x)
}

/// Fused full-sequence encoding.
pub fn encode_fused(src_ids: &[usize], fm: &FusedModel) -> Result<EncoderState> {
    let cfg = &fm.cfg;
    if src_ids.is_empty() {
        return Err(MuseError::Usage("cannot encode an empty sequence".into()));
    }
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
    let src_pad: Vec<bool> = src_ids.iter().map(|&id| id == model::PAD).collect();
    let has_pad = src_pad.iter().any(|&p| p);
    let allowed: Option<Vec<bool>> = has_pad.then(|| {
        let mut a = vec![true; n * n];
        for q in 0..n {
            for (k, &p) in src_pad.iter().enumerate() {
                a[q * n + k] = !p;
            }
        }
        a
    });

    let mut x = embed_rows(&fm.src_embed, src_ids, d, cfg.positional)?;
    for fb in &fm.enc_blocks {
        x = fused_block_forward(
            &x,
            n,
            fb,
            cfg,
            false,
            allowed.as_deref(),
            has_pad.then_some(&src_pad[..]),
        )?;
    }
    let z = layer_norm_rows(&x, n, d, &fm.enc_ln_gain, &fm.enc_ln_bias);
    Ok(EncoderState { z: Tensor::new(vec![n, d], z)?, src_pad })
}

// ── Fused incremental decoding ──────────────────────────────────────────

#[derive(Debug)]
struct FusedCtxMemory {
    k: Vec<Vec<Elem>>,
    v: Vec<Vec<Elem>>,
    src_allowed: Vec<bool>,
    src_len: usize,
}

/// Incremental state for the fused decoder, with preallocated scratch.
#[derive(Debug, Clone)]
pub struct FusedDecoderCache {
    shared: Arc<FusedCtxMemory>,
    layers: Vec<FusedLayerCache>,
    t: usize,
    scratch: FusedScratch,
}

#[derive(Debug, Clone, Default)]
struct FusedLayerCache {
    k_hist: Vec<Elem>,
    v_hist: Vec<Elem>,
}

#[derive(Debug, Clone, Default)]
struct FusedScratch {
    normed: Vec<Elem>,
    wide: Vec<Elem>,
    cat: Vec<Elem>,
    ctx: Vec<Elem>,
    row: Vec<Elem>,
    logits: Vec<Elem>,
}

impl FusedDecoderCache {
    pub fn new(state: &EncoderState, fm: &FusedModel) -> Result<Self> {
        let d = fm.cfg.d;
        let n = state.len();
        let mut k = Vec::with_capacity(fm.dec_ctx.len());
        let mut v = Vec::with_capacity(fm.dec_ctx.len());
        for ctx in &fm.dec_ctx {
            // one fused product for both context projections
            let mut kv = vec![0.0; n * 2 * d];
            kernels::mm(&state.z.data, &ctx.w_kv, n, d, 2 * d, &mut kv);
            k.push(extract_cols(&kv, n, 2 * d, 0, d));
            v.push(extract_cols(&kv, n, 2 * d, d, d));
        }
        Ok(FusedDecoderCache {
            shared: Arc::new(FusedCtxMemory {
                k,
                v,
                src_allowed: state.src_pad.iter().map(|&p| !p).collect(),
                src_len: n,
            }),
            layers: vec![FusedLayerCache::default(); fm.dec_blocks.len()],
            t: 0,
            scratch: FusedScratch::default(),
        })
    }

    pub fn prefix_len(&self) -> usize {
        self.t
    }
}

/// One fused decoder step; mirrors [`crate::infer::decode_step`].
pub fn decode_step_fused(
    state: &EncoderState,
    next_id: usize,
    cache: &mut FusedDecoderCache,
    fm: &FusedModel,
) -> Result<Vec<Elem>> {
    let cfg = &fm.cfg;
    let d = cfg.d;
    let d_ff = cfg.d_ff;
    if cache.shared.src_len != state.len() {
        return Err(MuseError::Usage(
            "decoder cache was built for a different encoder state".into(),
        ));
    }
    if cache.t >= cfg.max_len {
        return Err(MuseError::Usage(format!(
            "prefix length {} reached max_len {}",
            cache.t, cfg.max_len
        )));
    }
    if next_id >= cfg.tgt_vocab {
        return Err(MuseError::Data(format!(
            "token id {next_id} out of vocabulary (size {})",
            cfg.tgt_vocab
        )));
    }

    let t = cache.t;
    let mut x: Vec<Elem> = fm.tgt_embed[next_id * d..(next_id + 1) * d]
        .iter()
        .map(|&e| e * (d as Elem).sqrt())
        .collect();
    if cfg.positional == PositionalKind::Sinusoidal {
        let mut pos = vec![0.0; d];
        model::positional_row(t, d, &mut pos);
        kernels::add_inplace(&mut x, &pos);
    }

    let heads = cfg.heads;
    let causal = true;
    for layer_idx in 0..fm.dec_blocks.len() {
        let fb = &fm.dec_blocks[layer_idx];
        fb.check(d, d_ff)?;
        let width = fb.enc.width;
        let rows = fb.dec.rows;
        let scratch = &mut cache.scratch;
        scratch.normed.resize(d, 0.0);
        scratch.wide.resize(width, 0.0);
        scratch.cat.resize(rows, 0.0);
        scratch.ctx.resize(d, 0.0);

        kernels::layer_norm_row(&x, &fb.ln_gain, &fb.ln_bias, crate::block::LN_EPS, &mut scratch.normed);
        kernels::mm(&scratch.normed, &fb.w_enc, 1, d, width, &mut scratch.wide);

        let lc = &mut cache.layers[layer_idx];
        lc.k_hist.extend_from_slice(&scratch.wide[fb.enc.k..fb.enc.k + d]);
        lc.v_hist.extend_from_slice(&scratch.wide[fb.enc.v..fb.enc.v + d]);
        let hist = t + 1;

        // self-attention segment
        let q = &scratch.wide[fb.enc.q..fb.enc.q + d];
        mha_rows(q, &lc.k_hist, &lc.v_hist, 1, hist, d, heads, None, &mut scratch.ctx);
        scratch.cat[..d].copy_from_slice(&scratch.ctx);

        // pointwise hidden segment
        for (o, (&w, &b)) in scratch.cat[d..d + d_ff]
            .iter_mut()
            .zip(scratch.wide[fb.enc.h..fb.enc.h + d_ff].iter().zip(&fb.b1))
        {
            let v = w + b;
            *o = if v > 0.0 { v } else { 0.0 };
        }

        // convolution segments
        let v_now = &scratch.wide[fb.enc.v..fb.enc.v + d];
        for ((cell, &gw), &seg) in fb.cells.iter().zip(&fb.gate).zip(&fb.dec.cells) {
            let k_size = cell.kernel_size;
            let out_seg = &mut scratch.cat[seg..seg + d];
            out_seg.fill(0.0);
            match cfg.conv_kind {
                ConvKind::DynamicDepthwise => {
                    scratch.logits.clear();
                    scratch
                        .logits
                        .extend((0..k_size).map(|j| {
                            kernels::dot(&cell.weights[j * d..(j + 1) * d], v_now)
                        }));
                    kernels::softmax_inplace(&mut scratch.logits);
                    for (j, &off) in tap_offsets(k_size, causal).iter().enumerate() {
                        let src = t as isize + off;
                        if src >= 0 {
                            let s = src as usize;
                            kernels::axpy(
                                gw * scratch.logits[j],
                                &lc.v_hist[s * d..(s + 1) * d],
                                out_seg,
                            );
                        }
                    }
                }
                ConvKind::Plain => {
                    for (j, &off) in tap_offsets(k_size, causal).iter().enumerate() {
                        let src = t as isize + off;
                        if src >= 0 {
                            let s = src as usize;
                            let w_row = &cell.weights[j * d..(j + 1) * d];
                            for (c, o) in out_seg.iter_mut().enumerate() {
                                *o += gw * w_row[c] * lc.v_hist[s * d + c];
                            }
                        }
                    }
                }
            }
        }

        // one wide output product accumulated onto the residual
        kernels::mm_acc(&scratch.cat, &fb.w_dec, 1, rows, d, &mut x);
        kernels::add_inplace(&mut x, &fb.b2);

        // fused context attention
        let ctx = &fm.dec_ctx[layer_idx];
        kernels::layer_norm_row(&x, &ctx.ln_gain, &ctx.ln_bias, crate::block::LN_EPS, &mut scratch.normed);
        scratch.row.resize(d, 0.0);
        kernels::mm(&scratch.normed, &ctx.w_q, 1, d, d, &mut scratch.row);
        let mem = &cache.shared;
        mha_rows(
            &scratch.row,
            &mem.k[layer_idx],
            &mem.v[layer_idx],
            1,
            mem.src_len,
            d,
            heads,
            Some(&mem.src_allowed),
            &mut scratch.ctx,
        );
        kernels::mm_acc(&scratch.ctx, &ctx.w_o, 1, d, d, &mut x);
    }

    let scratch = &mut cache.scratch;
    scratch.normed.resize(d, 0.0);
    kernels::layer_norm_row(&x, &fm.dec_ln_gain, &fm.dec_ln_bias, crate::block::LN_EPS, &mut scratch.normed);
    let v = cfg.tgt_vocab;
    let mut logits = vec![0.0; v];
    kernels::mm_nt(&scratch.normed, &fm.tgt_embed, 1, d, v, &mut logits);
    cache.t += 1;
    Ok(logits)
}

/// Incremental fused scorer for greedy/beam search.
pub struct FusedScorer<'a> {
    pub fm: &'a FusedModel,
    pub state: &'a EncoderState,
}

impl IncrementalScorer for FusedScorer<'_> {
    type State = FusedDecoderCache;

    fn start(&self) -> Result<FusedDecoderCache> {
        FusedDecoderCache::new(self.state, self.fm)
    }

    fn step(&self, cache: &mut FusedDecoderCache, token: usize) -> Result<Vec<Elem>> {
        let logits = decode_step_fused(self.state, token, cache, self.fm)?;
        let mut lp = vec![0.0; logits.len()];
        kernels::log_softmax(&logits, &mut lp);
        Ok(lp)
    }

    fn vocab_size(&self) -> usize {
        self.fm.cfg.tgt_vocab
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::block::{muse_block_forward, AttnMask, BlockMode, Dropout, Projection};
    use crate::decode::greedy_decode;
    use crate::infer::{decode_step, encode, DecoderCache};
    use crate::model::{ModelParams, BOS, EOS};
    use crate::tensor::Tape;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

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
    fn slicing_fused_matrices_recovers_originals_bitwise() {
        let cfg = tiny_cfg();
        let (store, params) = ModelParams::init(&cfg, 21).unwrap();
        let fm = fuse_parameters(&store, &params, &cfg).unwrap();
        let d = cfg.d;
        let d_ff = cfg.d_ff;

        for (fb, blk) in fm.enc_blocks.iter().zip(&params.enc_blocks) {
            assert_eq!(fb.enc.width, 3 * d + d_ff);
            assert_eq!(fb.enc_segment(fb.enc.q, d, d), store.data(blk.attn.w_q));
            assert_eq!(fb.enc_segment(fb.enc.k, d, d), store.data(blk.attn.w_k));
            let w_v = match &blk.proj {
                SharedProjection::Shared { w_v } => *w_v,
                _ => unreachable!(),
            };
            assert_eq!(fb.enc_segment(fb.enc.v, d, d), store.data(w_v));
            assert_eq!(fb.enc_segment(fb.enc.h, d_ff, d), store.data(blk.ffn.w1));

            assert_eq!(fb.dec_segment(fb.dec.attn, d, d), store.data(blk.attn.w_o));
            assert_eq!(fb.dec_segment(fb.dec.ffn, d_ff, d), store.data(blk.ffn.w2));
            for (cell, &seg) in blk.cells.iter().zip(&fb.dec.cells) {
                assert_eq!(fb.dec_segment(seg, d, d), store.data(cell.w_out));
            }
        }
    }

    #[test]
    fn zero_parameters_fuse_to_zero_matrices() {
        let cfg = tiny_cfg();
        let (mut store, params) = ModelParams::init(&cfg, 22).unwrap();
        for id in store.ids().collect::<Vec<_>>() {
            store.tensor_mut(id).data.fill(0.0);
        }
        let fm = fuse_parameters(&store, &params, &cfg).unwrap();
        assert!(fm.enc_blocks[0].w_enc.iter().all(|&v| v == 0.0));
        assert!(fm.enc_blocks[0].w_dec.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn separate_projection_cannot_be_fused() {
        let mut cfg = tiny_cfg();
        cfg.projection = Projection::Separate;
        let (store, params) = ModelParams::init(&cfg, 23).unwrap();
        assert!(matches!(
            fuse_parameters(&store, &params, &cfg),
            Err(MuseError::Config(_))
        ));
    }

    #[test]
    fn fused_block_matches_unfused_across_configs() {
        let mut worst: Elem = 0.0;
        for mode in [BlockMode::Muse, BlockMode::MuseSimple] {
            for kind in [ConvKind::DynamicDepthwise, ConvKind::Plain] {
                for kernels_set in [vec![1], vec![3], vec![3, 5]] {
                    for causal in [false, true] {
                        let mut cfg = tiny_cfg();
                        cfg.mode = mode;
                        cfg.conv_kind = kind;
                        cfg.kernel_sizes = kernels_set.clone();
                        let (store, params) = ModelParams::init(&cfg, 24).unwrap();
                        let fm = fuse_parameters(&store, &params, &cfg).unwrap();

                        let n = 6;
                        let mut rng = ChaCha12Rng::seed_from_u64(25);
                        let x: Vec<Elem> =
                            (0..n * cfg.d).map(|_| rng.gen_range(-1.0..1.0)).collect();

                        let mask = causal.then(|| AttnMask::causal(n));
                        let fused_out = fused_block_forward(
                            &x,
                            n,
                            &fm.enc_blocks[0],
                            &cfg,
                            causal,
                            mask.as_ref().map(|m| m.allowed.as_slice()),
                            None,
                        )
                        .unwrap();

                        let mut tape = Tape::new();
                        let binding = store.bind(&mut tape);
                        let xv = tape.constant(x.clone(), vec![n, cfg.d]).unwrap();
                        let block_cfg = cfg.block_config(causal);
                        let want = muse_block_forward(
                            &mut tape,
                            &binding,
                            xv,
                            &params.enc_blocks[0],
                            &block_cfg,
                            mask.as_ref(),
                            None,
                            &mut Dropout::Off,
                        )
                        .unwrap();
                        let diff = max_abs_diff(&fused_out, tape.data(want));
                        worst = worst.max(diff);
                        assert!(
                            diff < 1e-10,
                            "mode {mode:?} kind {kind:?} kernels {kernels_set:?} causal {causal}: {diff}"
                        );
                    }
                }
            }
        }
        assert!(worst < 1e-10);
    }

    #[test]
    fn fused_block_single_token_boundary() {
        let cfg = tiny_cfg();
        let (store, params) = ModelParams::init(&cfg, 26).unwrap();
        let fm = fuse_parameters(&store, &params, &cfg).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(27);
        let x: Vec<Elem> = (0..cfg.d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let fused_out =
            fused_block_forward(&x, 1, &fm.enc_blocks[0], &cfg, false, None, None).unwrap();

        let mut tape = Tape::new();
        let binding = store.bind(&mut tape);
        let xv = tape.constant(x.clone(), vec![1, cfg.d]).unwrap();
        let block_cfg = cfg.block_config(false);
        let want = muse_block_forward(
            &mut tape, &binding, xv, &params.enc_blocks[0], &block_cfg, None, None,
            &mut Dropout::Off,
        )
        .unwrap();
        assert!(max_abs_diff(&fused_out, tape.data(want)) < 1e-10);
    }

    #[test]
    fn zero_projection_fused_block_is_identity() {
        let cfg = tiny_cfg();
        let (mut store, params) = ModelParams::init(&cfg, 28).unwrap();
        let blk = &params.enc_blocks[0];
        store.tensor_mut(blk.attn.w_o).data.fill(0.0);
        store.tensor_mut(blk.ffn.w2).data.fill(0.0);
        store.tensor_mut(blk.ffn.b2).data.fill(0.0);
        for cell in &blk.cells {
            store.tensor_mut(cell.w_out).data.fill(0.0);
        }
        let fm = fuse_parameters(&store, &params, &cfg).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(29);
        let x: Vec<Elem> = (0..4 * cfg.d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let out = fused_block_forward(&x, 4, &fm.enc_blocks[0], &cfg, false, None, None).unwrap();
        assert_eq!(out, x);
    }

    #[test]
    fn fused_encode_matches_unfused() {
        let cfg = tiny_cfg();
        let (store, params) = ModelParams::init(&cfg, 30).unwrap();
        let fm = fuse_parameters(&store, &params, &cfg).unwrap();
        let src = vec![4, 7, 9, 5, EOS];
        let a = encode(&src, &store, &params, &cfg).unwrap();
        let b = encode_fused(&src, &fm).unwrap();
        assert!(max_abs_diff(&a.z.data, &b.z.data) < 1e-10);
    }

    #[test]
    fn fused_decode_steps_match_unfused() {
        for mode in [BlockMode::Muse, BlockMode::MuseSimple] {
            let mut cfg = tiny_cfg();
            cfg.mode = mode;
            let (store, params) = ModelParams::init(&cfg, 31).unwrap();
            let fm = fuse_parameters(&store, &params, &cfg).unwrap();
            let src = vec![6, 8, 10, EOS];
            let state = encode(&src, &store, &params, &cfg).unwrap();

            let mut cache_u = DecoderCache::new(&state, &store, &params, &cfg).unwrap();
            let mut cache_f = FusedDecoderCache::new(&state, &fm).unwrap();
            let prefix = [BOS, 5, 9, 7, 4];
            for &tok in &prefix {
                let u = decode_step(&state, tok, &mut cache_u, &store, &params, &cfg).unwrap();
                let f = decode_step_fused(&state, tok, &mut cache_f, &fm).unwrap();
                assert!(max_abs_diff(&u, &f) < 1e-10, "mode {mode:?}");
            }
        }
    }

    #[test]
    fn fused_greedy_decode_emits_identical_tokens() {
        let cfg = tiny_cfg();
        let (store, params) = ModelParams::init(&cfg, 32).unwrap();
        let fm = fuse_parameters(&store, &params, &cfg).unwrap();
        let src = vec![5, 7, 9, EOS];
        let state = encode(&src, &store, &params, &cfg).unwrap();

        let unfused = greedy_decode(
            &crate::infer::ModelScorer { store: &store, params: &params, cfg: &cfg, state: &state },
            cfg.max_len,
        )
        .unwrap();
        let fused = greedy_decode(&FusedScorer { fm: &fm, state: &state }, cfg.max_len).unwrap();
        assert_eq!(unfused.ids, fused.ids);
    }
}
