//! Encoder-decoder assembly: embeddings, positional signal, stacked blocks,
//! decoder context attention, and the teacher-forced training loss.
//!
//! The functions here drive full sequences through a [`Tape`] and are the
//! reference semantics for the model; the tape-free incremental paths in
//! [`crate::infer`] and [`crate::fuse`] are tested against them.

use rand::Rng;
use sha2::{Digest, Sha256};

use crate::block::{
    self, AttnMask, BlockConfig, BlockMode, BlockParams, ConvKind, Dropout, Projection, LN_EPS,
};
use crate::error::{MuseError, Result};
use crate::params::{Binding, ParamId, ParamStore};
use crate::tensor::{Elem, Tape, Tensor, Var};

/// Reserved token ids shared by the whole pipeline.
pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PositionalKind {
    Sinusoidal,
    /// No positional signal; position information must come from convolution.
    None,
}

#[derive(Debug, Clone)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d: usize,
    pub d_ff: usize,
    pub heads: usize,
    pub mode: BlockMode,
    pub projection: Projection,
    pub conv_kind: ConvKind,
    pub kernel_sizes: Vec<usize>,
    pub src_vocab: usize,
    pub tgt_vocab: usize,
    pub max_len: usize,
    pub dropout: Elem,
    pub label_smoothing: Elem,
    pub tie_embeddings: bool,
    pub positional: PositionalKind,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n_layers: 2,
            d: 64,
            d_ff: 128,
            heads: 4,
            mode: BlockMode::Muse,
            projection: Projection::Shared,
            conv_kind: ConvKind::DynamicDepthwise,
            kernel_sizes: vec![3, 15],
            src_vocab: 0,
            tgt_vocab: 0,
            max_len: 64,
            dropout: 0.1,
            label_smoothing: 0.1,
            tie_embeddings: false,
            positional: PositionalKind::Sinusoidal,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 {
            return Err(MuseError::Config("n_layers must be at least 1".into()));
        }
        if self.src_vocab == 0 || self.tgt_vocab == 0 {
            return Err(MuseError::Config("vocabulary sizes must be set".into()));
        }
        if self.max_len == 0 {
            return Err(MuseError::Config("max_len must be positive".into()));
        }
        if self.d % 2 != 0 {
            return Err(MuseError::Config(format!(
                "model width {} must be even for the positional table",
                self.d
            )));
        }
        if self.tie_embeddings && self.src_vocab != self.tgt_vocab {
            return Err(MuseError::Config(
                "tie_embeddings requires identical source/target vocabularies".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(MuseError::Config(format!(
                "label_smoothing {} outside [0, 1)",
                self.label_smoothing
            )));
        }
        self.block_config(false).validate()
    }

    pub fn block_config(&self, causal: bool) -> BlockConfig {
        BlockConfig {
            mode: self.mode,
            projection: self.projection,
            conv_kind: self.conv_kind,
            kernel_sizes: self.kernel_sizes.clone(),
            causal,
            d: self.d,
            d_ff: self.d_ff,
            heads: self.heads,
            dropout: self.dropout,
        }
    }

    /// Canonical text form; two configs with equal fingerprints build
    /// checkpoint-compatible models.
    pub fn canonical(&self) -> String {
        let kernels: Vec<String> = self.kernel_sizes.iter().map(|k| k.to_string()).collect();
        format!(
            "conv_kind={:?}\nd={}\nd_ff={}\nheads={}\nkernel_sizes={}\nmax_len={}\nmode={:?}\n\
             n_layers={}\npositional={:?}\nprojection={:?}\nsrc_vocab={}\ntgt_vocab={}\n\
             tie_embeddings={}\n",
            self.conv_kind,
            self.d,
            self.d_ff,
            self.heads,
            kernels.join(","),
            self.max_len,
            self.mode,
            self.n_layers,
            self.positional,
            self.projection,
            self.src_vocab,
            self.tgt_vocab,
            self.tie_embeddings,
        )
    }

    pub fn fingerprint(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.canonical().as_bytes());
        let digest = hasher.finalize();
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

// ── Parameters ──────────────────────────────────────────────────────────

/// Decoder-side attention over the encoder output.
#[derive(Debug, Clone)]
pub struct CtxAttnParams {
    pub ln_gain: ParamId,
    pub ln_bias: ParamId,
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub w_o: ParamId,
}

#[derive(Debug, Clone)]
pub struct DecoderLayerParams {
    pub block: BlockParams,
    pub ctx: CtxAttnParams,
}

#[derive(Debug, Clone)]
pub struct ModelParams {
    /// Source embedding table; equals `tgt_embed` when embeddings are tied.
    pub src_embed: ParamId,
    /// Target embedding table; also the output projection (tied softmax).
    pub tgt_embed: ParamId,
    pub enc_blocks: Vec<BlockParams>,
    pub enc_ln_gain: ParamId,
    pub enc_ln_bias: ParamId,
    pub dec_layers: Vec<DecoderLayerParams>,
    pub dec_ln_gain: ParamId,
    pub dec_ln_bias: ParamId,
}

impl ModelParams {
    pub fn build(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d;
        let bound = (3.0 / d as Elem).sqrt();
        let (src_embed, tgt_embed) = if cfg.tie_embeddings {
            let e = store.insert_uniform("embed.shared", vec![cfg.src_vocab, d], bound, rng);
            (e, e)
        } else {
            (
                store.insert_uniform("embed.src", vec![cfg.src_vocab, d], bound, rng),
                store.insert_uniform("embed.tgt", vec![cfg.tgt_vocab, d], bound, rng),
            )
        };

        let enc_cfg = cfg.block_config(false);
        let mut enc_blocks = Vec::with_capacity(cfg.n_layers);
        for i in 0..cfg.n_layers {
            enc_blocks.push(BlockParams::build(store, &format!("enc.{i}"), &enc_cfg, rng)?);
        }
        let enc_ln_gain = store.insert_ones("enc.final_ln_g", vec![d]);
        let enc_ln_bias = store.insert_zeros("enc.final_ln_b", vec![d]);

        let dec_cfg = cfg.block_config(true);
        let mut dec_layers = Vec::with_capacity(cfg.n_layers);
        for i in 0..cfg.n_layers {
            let block = BlockParams::build(store, &format!("dec.{i}"), &dec_cfg, rng)?;
            let ctx = CtxAttnParams {
                ln_gain: store.insert_ones(format!("dec.{i}.ctx.ln_g"), vec![d]),
                ln_bias: store.insert_zeros(format!("dec.{i}.ctx.ln_b"), vec![d]),
                w_q: store.insert_xavier(format!("dec.{i}.ctx.w_q"), d, d, rng),
                w_k: store.insert_xavier(format!("dec.{i}.ctx.w_k"), d, d, rng),
                w_v: store.insert_xavier(format!("dec.{i}.ctx.w_v"), d, d, rng),
                w_o: store.insert_xavier(format!("dec.{i}.ctx.w_o"), d, d, rng),
            };
            dec_layers.push(DecoderLayerParams { block, ctx });
        }
        let dec_ln_gain = store.insert_ones("dec.final_ln_g", vec![d]);
        let dec_ln_bias = store.insert_zeros("dec.final_ln_b", vec![d]);

        Ok(ModelParams {
            src_embed,
            tgt_embed,
            enc_blocks,
            enc_ln_gain,
            enc_ln_bias,
            dec_layers,
            dec_ln_gain,
            dec_ln_bias,
        })
    }

    /// Convenience: fresh store + params from a seed.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<(ParamStore, Self)> {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let params = Self::build(&mut store, cfg, &mut rng)?;
        Ok((store, params))
    }
}

// ── Positional encoding and masks ───────────────────────────────────────

/// Fixed sinusoidal table: position p, channel 2i is sin(p / 10000^(2i/d)),
/// channel 2i+1 the matching cosine.
pub fn positional_encoding(n: usize, d: usize) -> Result<Tensor> {
    if d % 2 != 0 {
        return Err(MuseError::Config(format!("positional table needs even width, got {d}")));
    }
    let mut data = vec![0.0; n * d];
    for p in 0..n {
        for i in 0..d / 2 {
            let rate = (10000.0 as Elem).powf(2.0 * i as Elem / d as Elem);
            let angle = p as Elem / rate;
            data[p * d + 2 * i] = angle.sin();
            data[p * d + 2 * i + 1] = angle.cos();
        }
    }
    Tensor::new(vec![n, d], data)
}

/// One row of the sinusoidal table, written into `out` (length d).
pub fn positional_row(p: usize, d: usize, out: &mut [Elem]) {
    for i in 0..d / 2 {
        let rate = (10000.0 as Elem).powf(2.0 * i as Elem / d as Elem);
        let angle = p as Elem / rate;
        out[2 * i] = angle.sin();
        out[2 * i + 1] = angle.cos();
    }
}

/// Padding flags for one sequence: true exactly at the padded tail.
pub fn padding_mask(len: usize, padded_len: usize) -> Vec<bool> {
    (0..padded_len).map(|i| i >= len).collect()
}

/// Padding and causal masks for one (source, target) pair padded to the given
/// lengths. The combined decoder self-attention mask is the intersection of
/// the causal mask with the non-pad columns.
pub fn build_masks(
    src_len: usize,
    padded_src: usize,
    tgt_len: usize,
    padded_tgt: usize,
) -> Result<(Vec<bool>, AttnMask, AttnMask)> {
    if src_len == 0 || tgt_len == 0 {
        return Err(MuseError::Usage("sequence lengths must be positive".into()));
    }
    let src_pad = padding_mask(src_len, padded_src);
    let causal = AttnMask::causal(padded_tgt);
    let tgt_pad = padding_mask(tgt_len, padded_tgt);
    let combined = causal.and(&AttnMask::from_padding(&tgt_pad, padded_tgt))?;
    Ok((src_pad, causal, combined))
}

// ── Forward passes on a tape ────────────────────────────────────────────

/// Scaled embedding plus positional signal for one id sequence.
fn embed_input(
    tape: &mut Tape,
    b: &Binding,
    table: ParamId,
    ids: &[usize],
    cfg: &ModelConfig,
    dropout: &mut Dropout,
) -> Result<Var> {
    if ids.len() > cfg.max_len {
        return Err(MuseError::Usage(format!(
            "sequence length {} exceeds max_len {}",
            ids.len(),
            cfg.max_len
        )));
    }
    let emb = tape.embed(b.var(table), ids)?;
    let scaled = tape.scale(emb, (cfg.d as Elem).sqrt())?;
    let x = match cfg.positional {
        PositionalKind::Sinusoidal => {
            let pos = positional_encoding(ids.len(), cfg.d)?;
            let pos = tape.constant(pos.data, pos.shape)?;
            tape.add(scaled, pos)?
        }
        PositionalKind::None => scaled,
    };
    dropout.apply(tape, x)
}

/// Encoder stack over one source sequence; returns the final normed memory.
pub fn encode_on_tape(
    tape: &mut Tape,
    b: &Binding,
    params: &ModelParams,
    cfg: &ModelConfig,
    src_ids: &[usize],
    src_pad: Option<&[bool]>,
    dropout: &mut Dropout,
) -> Result<Var> {
    let mut x = embed_input(tape, b, params.src_embed, src_ids, cfg, dropout)?;
    let block_cfg = cfg.block_config(false);
    let mask = src_pad.map(|p| AttnMask::from_padding(p, src_ids.len()));
    for blk in &params.enc_blocks {
        x = block::muse_block_forward(tape, b, x, blk, &block_cfg, mask.as_ref(), src_pad, dropout)?;
    }
    tape.layer_norm(x, b.var(params.enc_ln_gain), b.var(params.enc_ln_bias), LN_EPS)
}

/// Context-attention sublayer: queries from the decoder state, keys/values
/// from the encoder memory, with its own pre-norm and residual.
fn context_attention(
    tape: &mut Tape,
    b: &Binding,
    x: Var,
    ctx: &CtxAttnParams,
    z: Var,
    src_pad: Option<&[bool]>,
    heads: usize,
    dropout: &mut Dropout,
) -> Result<Var> {
    let normed = tape.layer_norm(x, b.var(ctx.ln_gain), b.var(ctx.ln_bias), LN_EPS)?;
    let q = tape.matmul(normed, b.var(ctx.w_q))?;
    let k = tape.matmul(z, b.var(ctx.w_k))?;
    let v = tape.matmul(z, b.var(ctx.w_v))?;
    let n_q = tape.shape(q)[0];
    let mask = src_pad.map(|p| AttnMask::from_padding(p, n_q));
    let attn = block::scaled_dot_attention(tape, q, k, v, mask.as_ref(), heads, dropout)?;
    let out = tape.matmul(attn, b.var(ctx.w_o))?;
    let out = dropout.apply(tape, out)?;
    tape.add(x, out)
}

/// Decoder stack over a full target prefix (teacher forcing); returns the
/// final normed decoder states.
pub fn decode_on_tape(
    tape: &mut Tape,
    b: &Binding,
    params: &ModelParams,
    cfg: &ModelConfig,
    z: Var,
    src_pad: Option<&[bool]>,
    tgt_in_ids: &[usize],
    dropout: &mut Dropout,
) -> Result<Var> {
    let mut x = embed_input(tape, b, params.tgt_embed, tgt_in_ids, cfg, dropout)?;
    let block_cfg = cfg.block_config(true);
    let causal = AttnMask::causal(tgt_in_ids.len());
    for layer in &params.dec_layers {
        x = block::muse_block_forward(
            tape, b, x, &layer.block, &block_cfg, Some(&causal), None, dropout,
        )?;
        x = context_attention(tape, b, x, &layer.ctx, z, src_pad, cfg.heads, dropout)?;
    }
    tape.layer_norm(x, b.var(params.dec_ln_gain), b.var(params.dec_ln_bias), LN_EPS)
}

/// Next-token logits for every position: decoder states times the transposed
/// target embedding (tied output projection).
pub fn output_logits(tape: &mut Tape, b: &Binding, params: &ModelParams, x: Var) -> Result<Var> {
    tape.matmul_nt(x, b.var(params.tgt_embed))
}

/// Teacher-forced logits for one (source, target) pair. `tgt` must start
/// with BOS and end with EOS; logits are produced for each of its
/// `len - 1` continuations.
pub fn pair_logits(
    tape: &mut Tape,
    b: &Binding,
    params: &ModelParams,
    cfg: &ModelConfig,
    src_ids: &[usize],
    tgt_ids: &[usize],
    dropout: &mut Dropout,
) -> Result<Var> {
    check_tgt_frame(tgt_ids)?;
    let z = encode_on_tape(tape, b, params, cfg, src_ids, None, dropout)?;
    let dec_in = &tgt_ids[..tgt_ids.len() - 1];
    let states = decode_on_tape(tape, b, params, cfg, z, None, dec_in, dropout)?;
    output_logits(tape, b, params, states)
}

fn check_tgt_frame(tgt_ids: &[usize]) -> Result<()> {
    if tgt_ids.len() < 2 || tgt_ids[0] != BOS || *tgt_ids.last().unwrap() != EOS {
        return Err(MuseError::Usage(
            "target sequence must begin with BOS and end with EOS".into(),
        ));
    }
    Ok(())
}

/// Teacher-forced cross-entropy over a batch of pairs, averaged over all
/// target tokens (label smoothing from the config). Returns the scalar loss
/// variable and the number of target tokens.
pub fn forward_train(
    tape: &mut Tape,
    b: &Binding,
    params: &ModelParams,
    cfg: &ModelConfig,
    batch: &[(Vec<usize>, Vec<usize>)],
    dropout: &mut Dropout,
) -> Result<(Var, usize)> {
    if batch.is_empty() {
        return Err(MuseError::Usage("empty training batch".into()));
    }
    let total_tokens: usize = batch.iter().map(|(_, t)| t.len() - 1).sum();
    let mut loss: Option<Var> = None;
    for (src, tgt) in batch {
        let logits = pair_logits(tape, b, params, cfg, src, tgt, dropout)?;
        let targets = &tgt[1..];
        let pair_loss = tape.cross_entropy(logits, targets, cfg.label_smoothing, Some(PAD))?;
        let weighted = tape.scale(pair_loss, targets.len() as Elem / total_tokens as Elem)?;
        loss = Some(match loss {
            Some(acc) => tape.add(acc, weighted)?,
            None => weighted,
        });
    }
    Ok((loss.expect("non-empty batch"), total_tokens))
}


#[cfg(test)]
mod tests {
    use super::*;
    use crate::block::Dropout;
    use crate::tensor::kernels;

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            n_layers: 2,
            d: 16,
            d_ff: 24,
            heads: 2,
            kernel_sizes: vec![3],
            src_vocab: 10,
            tgt_vocab: 10,
            max_len: 16,
            dropout: 0.0,
            label_smoothing: 0.0,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn positional_encoding_examples() {
        let pe = positional_encoding(4, 6).unwrap();
        // p = 0: sin(0), cos(0) alternating
        for i in 0..3 {
            assert_eq!(pe.data[2 * i], 0.0);
            assert_eq!(pe.data[2 * i + 1], 1.0);
        }
        // channel 0 at p = 1 is sin(1)
        assert_eq!(pe.data[6], (1.0 as Elem).sin());
        // deterministic
        let again = positional_encoding(4, 6).unwrap();
        assert_eq!(pe.data, again.data);
        // odd width rejected
        assert!(matches!(positional_encoding(4, 5), Err(MuseError::Config(_))));
    }

    #[test]
    fn build_masks_examples() {
        let (src_pad, causal, combined) = build_masks(2, 3, 3, 3).unwrap();
        assert_eq!(src_pad, vec![false, false, true]);
        // causal 3x3: lower triangle allowed
        for q in 0..3 {
            for k in 0..3 {
                assert_eq!(causal.allowed[q * 3 + k], k <= q, "({q},{k})");
            }
        }
        // combined = causal AND not-pad; tgt has no padding here
        assert_eq!(combined.allowed, causal.allowed);

        let (_, _, combined) = build_masks(2, 2, 2, 3).unwrap();
        // tgt padded to 3 with true length 2: column 2 is blocked everywhere
        for q in 0..3 {
            assert!(!combined.allowed[q * 3 + 2]);
        }
        assert!(combined.allowed[1 * 3 + 0] && combined.allowed[1 * 3 + 1]);
        assert!(!combined.allowed[0 * 3 + 1], "causality still applies");
    }

    #[test]
    fn forward_train_uniform_logits_gives_ln_vocab() {
        let cfg = tiny_cfg();
        let (mut store, params) = ModelParams::init(&cfg, 3).unwrap();
        // zero target embedding makes every logit zero: a uniform distribution
        store.tensor_mut(params.tgt_embed).data.fill(0.0);
        let mut tape = Tape::new();
        let binding = store.bind(&mut tape);
        let batch = vec![(vec![4, 5, EOS], vec![BOS, 4, 5, EOS])];
        let (loss, tokens) =
            forward_train(&mut tape, &binding, &params, &cfg, &batch, &mut Dropout::Off).unwrap();
        assert_eq!(tokens, 3);
        assert!((tape.data(loss)[0] - (cfg.tgt_vocab as Elem).ln()).abs() < 1e-12);
    }

    #[test]
    fn forward_train_matches_per_token_explicit_sum() {
        let cfg = tiny_cfg();
        let (store, params) = ModelParams::init(&cfg, 4).unwrap();
        let batch = vec![
            (vec![4, 5, EOS], vec![BOS, 5, 4, EOS]),
            (vec![6, EOS], vec![BOS, 6, EOS]),
        ];
        let mut tape = Tape::new();
        let binding = store.bind(&mut tape);
        let (loss, _) =
            forward_train(&mut tape, &binding, &params, &cfg, &batch, &mut Dropout::Off).unwrap();

        // oracle: per-pair logits -> explicit log-softmax sums
        let mut total = 0.0;
        let mut tokens = 0usize;
        let mut per_pair = Vec::new();
        for (src, tgt) in &batch {
            let mut t2 = Tape::new();
            let b2 = store.bind(&mut t2);
            let logits = pair_logits(&mut t2, &b2, &params, &cfg, src, tgt, &mut Dropout::Off).unwrap();
            let v = cfg.tgt_vocab;
            let data = t2.data(logits);
            let mut pair_sum = 0.0;
            for (row, &target) in tgt[1..].iter().enumerate() {
                let mut lp = vec![0.0; v];
                kernels::log_softmax(&data[row * v..(row + 1) * v], &mut lp);
                pair_sum -= lp[target];
            }
            per_pair.push((pair_sum, tgt.len() - 1));
            tokens += tgt.len() - 1;
        }
        for (sum, n) in per_pair {
            total += (sum / n as Elem) * (n as Elem / tokens as Elem);
        }
        assert!((tape.data(loss)[0] - total).abs() < 1e-10);
    }

    #[test]
    fn forward_train_rejects_bad_frames_and_empty_batch() {
        let cfg = tiny_cfg();
        let (store, params) = ModelParams::init(&cfg, 5).unwrap();
        let mut tape = Tape::new();
        let binding = store.bind(&mut tape);
        assert!(matches!(
            forward_train(&mut tape, &binding, &params, &cfg, &[], &mut Dropout::Off),
            Err(MuseError::Usage(_))
        ));
        let bad = vec![(vec![4, EOS], vec![4, 5])];
        assert!(matches!(
            forward_train(&mut tape, &binding, &params, &cfg, &bad, &mut Dropout::Off),
            Err(MuseError::Usage(_))
        ));
    }

    #[test]
    fn fingerprint_tracks_model_shape() {
        let a = tiny_cfg();
        let mut b = tiny_cfg();
        assert_eq!(a.fingerprint(), b.fingerprint());
        b.d = 32;
        assert_ne!(a.fingerprint(), b.fingerprint());
    }

    #[test]
    fn tied_embeddings_share_one_table() {
        let mut cfg = tiny_cfg();
        cfg.tie_embeddings = true;
        let (store, params) = ModelParams::init(&cfg, 6).unwrap();
        assert_eq!(params.src_embed, params.tgt_embed);
        assert!(store.find("embed.shared").is_some());

        cfg.tgt_vocab = 11;
        assert!(ModelParams::init(&cfg, 6).is_err());
    }
}
