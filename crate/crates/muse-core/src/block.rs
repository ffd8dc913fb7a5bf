//! The parallel multi-scale attention block.
//!
//! One block layer-normalizes its input and feeds the normalized value to
//! three parallel branches — multi-head self-attention, gated dynamic
//! depthwise convolution, and a pointwise feed-forward network — then adds
//! the branch outputs to the raw residual input. The convolution consumes the
//! same value projection as attention (shared projection), placing both
//! contextual transforms in one hidden space; a separate-projection variant
//! exists for ablation, along with a plain fixed-kernel convolution and a
//! simple mode that drops the convolution branch entirely.

use rand::Rng;

use crate::error::{MuseError, Result};
use crate::params::{Binding, ParamId, ParamStore};
use crate::tensor::{Elem, Tape, Var};

/// Layer-norm epsilon used by every block.
pub const LN_EPS: Elem = 1e-5;

// ── Configuration ───────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockMode {
    /// Attention + convolution + pointwise branches.
    Muse,
    /// Attention + pointwise only.
    MuseSimple,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Projection {
    /// One value projection feeds both attention and convolution.
    Shared,
    /// Independent value projections per branch (ablation).
    Separate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConvKind {
    /// Tap weights computed per position from the input and softmax-normalized.
    DynamicDepthwise,
    /// Fixed learned per-channel tap weights, no normalization (ablation).
    Plain,
}

#[derive(Debug, Clone)]
pub struct BlockConfig {
    pub mode: BlockMode,
    pub projection: Projection,
    pub conv_kind: ConvKind,
    pub kernel_sizes: Vec<usize>,
    /// When set, convolution taps cover positions i-k+1..=i instead of a
    /// window centered on i. Attention causality comes from the mask.
    pub causal: bool,
    pub d: usize,
    pub d_ff: usize,
    pub heads: usize,
    pub dropout: Elem,
}

impl BlockConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.d_ff == 0 || self.heads == 0 {
            return Err(MuseError::Config("block dimensions must be positive".into()));
        }
        if self.d % self.heads != 0 {
            return Err(MuseError::Config(format!(
                "width {} is not divisible by {} heads",
                self.d, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(MuseError::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if self.mode == BlockMode::Muse {
            if self.kernel_sizes.is_empty() {
                return Err(MuseError::Config("kernel_sizes must be non-empty".into()));
            }
            for &k in &self.kernel_sizes {
                if k == 0 || k % 2 == 0 {
                    return Err(MuseError::Config(format!(
                        "kernel size {k} must be odd and positive"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Kernel sizes actually in use (empty in simple mode).
    pub fn active_kernels(&self) -> &[usize] {
        match self.mode {
            BlockMode::Muse => &self.kernel_sizes,
            BlockMode::MuseSimple => &[],
        }
    }
}

// ── Parameters ──────────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct AttentionParams {
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_o: ParamId,
    pub heads: usize,
}

#[derive(Debug, Clone)]
pub enum SharedProjection {
    Shared { w_v: ParamId },
    Separate { w_v1: ParamId, w_v2: ParamId },
}

#[derive(Debug, Clone)]
pub struct ConvCellParams {
    pub kernel_size: usize,
    /// `[k, d]`; per-tap logit projection for the dynamic kind, fixed
    /// per-channel tap weights for the plain kind.
    pub weights: ParamId,
    pub w_out: ParamId,
}

#[derive(Debug, Clone)]
pub struct GateParams {
    /// One learned scalar per convolution cell.
    pub alpha: ParamId,
}

#[derive(Debug, Clone)]
pub struct FfnParams {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

#[derive(Debug, Clone)]
pub struct BlockParams {
    pub ln_gain: ParamId,
    pub ln_bias: ParamId,
    pub attn: AttentionParams,
    pub proj: SharedProjection,
    pub cells: Vec<ConvCellParams>,
    pub gate: Option<GateParams>,
    pub ffn: FfnParams,
}

impl BlockParams {
    pub fn build(
        store: &mut ParamStore,
        prefix: &str,
        cfg: &BlockConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d;
        let ln_gain = store.insert_ones(format!("{prefix}.ln_g"), vec![d]);
        let ln_bias = store.insert_zeros(format!("{prefix}.ln_b"), vec![d]);
        let attn = AttentionParams {
            w_q: store.insert_xavier(format!("{prefix}.attn.w_q"), d, d, rng),
            w_k: store.insert_xavier(format!("{prefix}.attn.w_k"), d, d, rng),
            w_o: store.insert_xavier(format!("{prefix}.attn.w_o"), d, d, rng),
            heads: cfg.heads,
        };
        let proj = match (cfg.mode, cfg.projection) {
            (BlockMode::MuseSimple, _) | (_, Projection::Shared) => SharedProjection::Shared {
                w_v: store.insert_xavier(format!("{prefix}.proj.w_v"), d, d, rng),
            },
            (_, Projection::Separate) => SharedProjection::Separate {
                w_v1: store.insert_xavier(format!("{prefix}.proj.w_v1"), d, d, rng),
                w_v2: store.insert_xavier(format!("{prefix}.proj.w_v2"), d, d, rng),
            },
        };
        let mut cells = Vec::new();
        for (i, &k) in cfg.active_kernels().iter().enumerate() {
            cells.push(ConvCellParams {
                kernel_size: k,
                weights: store.insert_xavier(format!("{prefix}.conv{i}.weights"), k, d, rng),
                w_out: store.insert_xavier(format!("{prefix}.conv{i}.w_out"), d, d, rng),
            });
        }
        let gate = if cells.is_empty() {
            None
        } else {
            Some(GateParams {
                alpha: store.insert_zeros(format!("{prefix}.gate.alpha"), vec![cells.len()]),
            })
        };
        let ffn = FfnParams {
            w1: store.insert_xavier(format!("{prefix}.ffn.w1"), d, cfg.d_ff, rng),
            b1: store.insert_zeros(format!("{prefix}.ffn.b1"), vec![cfg.d_ff]),
            w2: store.insert_xavier(format!("{prefix}.ffn.w2"), cfg.d_ff, d, rng),
            b2: store.insert_zeros(format!("{prefix}.ffn.b2"), vec![d]),
        };
        Ok(BlockParams { ln_gain, ln_bias, attn, proj, cells, gate, ffn })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.ln_gain, self.ln_bias, self.attn.w_q, self.attn.w_k, self.attn.w_o];
        match &self.proj {
            SharedProjection::Shared { w_v } => ids.push(*w_v),
            SharedProjection::Separate { w_v1, w_v2 } => ids.extend([*w_v1, *w_v2]),
        }
        for c in &self.cells {
            ids.extend([c.weights, c.w_out]);
        }
        if let Some(g) = &self.gate {
            ids.push(g.alpha);
        }
        ids.extend([self.ffn.w1, self.ffn.b1, self.ffn.w2, self.ffn.b2]);
        ids
    }

    /// Total scalar parameter count of this block.
    pub fn scalar_count(&self, store: &ParamStore) -> usize {
        self.param_ids().iter().map(|&id| store.tensor(id).numel()).sum()
    }
}

// ── Masks ───────────────────────────────────────────────────────────────

/// Attention mask; `allowed[q * n_k + k]` is true where query q may attend
/// to key k.
#[derive(Debug, Clone)]
pub struct AttnMask {
    pub n_q: usize,
    pub n_k: usize,
    pub allowed: Vec<bool>,
}

impl AttnMask {
    /// Lower-triangular mask: key index <= query index.
    pub fn causal(n: usize) -> Self {
        let mut allowed = vec![false; n * n];
        for q in 0..n {
            for k in 0..=q {
                allowed[q * n + k] = true;
            }
        }
        AttnMask { n_q: n, n_k: n, allowed }
    }

    /// Every query may attend to every non-pad key.
    pub fn from_padding(pad: &[bool], n_q: usize) -> Self {
        let n_k = pad.len();
        let mut allowed = vec![false; n_q * n_k];
        for q in 0..n_q {
            for (k, &p) in pad.iter().enumerate() {
                allowed[q * n_k + k] = !p;
            }
        }
        AttnMask { n_q, n_k, allowed }
    }

    /// Intersection of two masks of identical shape.
    pub fn and(&self, other: &AttnMask) -> Result<AttnMask> {
        if self.n_q != other.n_q || self.n_k != other.n_k {
            return Err(MuseError::Shape(format!(
                "mask shapes disagree: {}x{} vs {}x{}",
                self.n_q, self.n_k, other.n_q, other.n_k
            )));
        }
        Ok(AttnMask {
            n_q: self.n_q,
            n_k: self.n_k,
            allowed: self.allowed.iter().zip(&other.allowed).map(|(&a, &b)| a && b).collect(),
        })
    }

    fn check_rows(&self) -> Result<()> {
        for q in 0..self.n_q {
            if !self.allowed[q * self.n_k..(q + 1) * self.n_k].iter().any(|&a| a) {
                return Err(MuseError::Usage(format!("attention mask row {q} allows no positions")));
            }
        }
        Ok(())
    }
}

// ── Dropout ─────────────────────────────────────────────────────────────

/// Branch/attention dropout. `Off` during inference and gradient checks.
pub enum Dropout<'r> {
    Off,
    On { rate: Elem, rng: &'r mut dyn rand::RngCore },
}

impl Dropout<'_> {
    pub(crate) fn apply(&mut self, tape: &mut Tape, x: Var) -> Result<Var> {
        match self {
            Dropout::Off => Ok(x),
            Dropout::On { rate, rng } => {
                if *rate == 0.0 {
                    return Ok(x);
                }
                let keep = 1.0 - *rate;
                let mask: Vec<Elem> = (0..tape.data(x).len())
                    .map(|_| if rng.gen_range(0.0..1.0) < keep { 1.0 / keep } else { 0.0 })
                    .collect();
                let m = tape.constant(mask, tape.shape(x).to_vec())?;
                tape.mul(x, m)
            }
        }
    }
}

// ── Branches ────────────────────────────────────────────────────────────

/// Multi-head scaled dot-product attention over already-projected Q, K, V.
/// Masked positions receive -inf before the softmax.
pub fn scaled_dot_attention(
    tape: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    mask: Option<&AttnMask>,
    heads: usize,
    dropout: &mut Dropout,
) -> Result<Var> {
    let (n_q, d) = match *tape.shape(q) {
        [a, b] => (a, b),
        ref s => return Err(MuseError::Shape(format!("attention Q must be rank 2, got {s:?}"))),
    };
    let n_k = tape.shape(k)[0];
    if d % heads != 0 {
        return Err(MuseError::Shape(format!("width {d} not divisible by {heads} heads")));
    }
    if let Some(m) = mask {
        if m.n_q != n_q || m.n_k != n_k {
            return Err(MuseError::Shape(format!(
                "mask {}x{} does not fit attention {}x{}",
                m.n_q, m.n_k, n_q, n_k
            )));
        }
        m.check_rows()?;
    }
    let d_k = d / heads;
    let scale = 1.0 / (d_k as Elem).sqrt();
    let blocked: Option<Vec<bool>> = mask.map(|m| m.allowed.iter().map(|&a| !a).collect());

    let mut head_outputs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = tape.narrow_cols(q, h * d_k, d_k)?;
        let kh = tape.narrow_cols(k, h * d_k, d_k)?;
        let vh = tape.narrow_cols(v, h * d_k, d_k)?;
        let scores = tape.matmul_nt(qh, kh)?;
        let scores = tape.scale(scores, scale)?;
        let scores = match &blocked {
            Some(b) => tape.mask_fill_neg_inf(scores, b)?,
            None => scores,
        };
        let probs = tape.softmax(scores, 1)?;
        let probs = dropout.apply(tape, probs)?;
        head_outputs.push(tape.matmul(probs, vh)?);
    }
    tape.concat_cols(&head_outputs)
}

/// Full attention branch: project Q, K, V from the (normalized) input, run
/// multi-head attention, project the concatenated heads with W_O.
pub fn attention_branch(
    tape: &mut Tape,
    b: &Binding,
    x: Var,
    p: &AttentionParams,
    sp: &SharedProjection,
    mask: Option<&AttnMask>,
    dropout: &mut Dropout,
) -> Result<Var> {
    let w_v = match sp {
        SharedProjection::Shared { w_v } => *w_v,
        SharedProjection::Separate { w_v1, .. } => *w_v1,
    };
    let v1 = tape.matmul(x, b.var(w_v))?;
    attention_core(tape, b, x, p, v1, mask, dropout)
}

/// Attention with the value projection precomputed (so a shared projection
/// is evaluated once for both branches).
pub(crate) fn attention_core(
    tape: &mut Tape,
    b: &Binding,
    x: Var,
    p: &AttentionParams,
    v1: Var,
    mask: Option<&AttnMask>,
    dropout: &mut Dropout,
) -> Result<Var> {
    let q = tape.matmul(x, b.var(p.w_q))?;
    let k = tape.matmul(x, b.var(p.w_k))?;
    let ctx = scaled_dot_attention(tape, q, k, v1, mask, p.heads, dropout)?;
    tape.matmul(ctx, b.var(p.w_o))
}

/// Tap offsets for a kernel of size `k` relative to the output position.
pub fn tap_offsets(k: usize, causal: bool) -> Vec<isize> {
    (0..k as isize)
        .map(|j| if causal { j + 1 - k as isize } else { j - (k as isize - 1) / 2 })
        .collect()
}

/// One convolution cell over the projected input `v2`.
///
/// Dynamic kind: per-position tap logits come from the cell's weight
/// projection and are softmax-normalized over taps; the same scalar weight
/// applies to every channel. Plain kind: fixed learned per-channel taps.
/// Out-of-range taps (and taps landing on `pad` rows) contribute zero.
pub fn dynamic_conv_cell(
    tape: &mut Tape,
    b: &Binding,
    v2: Var,
    cell: &ConvCellParams,
    kind: ConvKind,
    causal: bool,
    pad: Option<&[bool]>,
) -> Result<Var> {
    let k = cell.kernel_size;
    if k == 0 || k % 2 == 0 {
        return Err(MuseError::Config(format!("kernel size {k} must be odd and positive")));
    }
    let v2_taps = match pad {
        Some(p) => tape.zero_rows(v2, p)?,
        None => v2,
    };
    let offsets = tap_offsets(k, causal);

    let mut acc: Option<Var> = None;
    match kind {
        ConvKind::DynamicDepthwise => {
            let logits = tape.matmul_nt(v2, b.var(cell.weights))?;
            let weights = tape.softmax(logits, 1)?;
            for (j, &off) in offsets.iter().enumerate() {
                let shifted = tape.shift_rows(v2_taps, -off)?;
                let col = tape.narrow_cols(weights, j, 1)?;
                let term = tape.mul_col(shifted, col)?;
                acc = Some(match acc {
                    Some(a) => tape.add(a, term)?,
                    None => term,
                });
            }
        }
        ConvKind::Plain => {
            for (j, &off) in offsets.iter().enumerate() {
                let shifted = tape.shift_rows(v2_taps, -off)?;
                let row = tape.narrow_rows(b.var(cell.weights), j, 1)?;
                let term = tape.mul_row(shifted, row)?;
                acc = Some(match acc {
                    Some(a) => tape.add(a, term)?,
                    None => term,
                });
            }
        }
    }
    tape.matmul(acc.expect("k >= 1"), b.var(cell.w_out))
}

/// Softmax-gated mixture of convolution cells.
pub fn gated_conv_branch(
    tape: &mut Tape,
    b: &Binding,
    v2: Var,
    cells: &[ConvCellParams],
    gate: &GateParams,
    kind: ConvKind,
    causal: bool,
    pad: Option<&[bool]>,
) -> Result<Var> {
    if cells.is_empty() {
        return Err(MuseError::Config("gated convolution needs at least one cell".into()));
    }
    let n_alpha = tape.data(b.var(gate.alpha)).len();
    if n_alpha != cells.len() {
        return Err(MuseError::Config(format!(
            "{} gate scalars for {} cells",
            n_alpha,
            cells.len()
        )));
    }
    let weights = tape.softmax(b.var(gate.alpha), 0)?;
    let mut acc: Option<Var> = None;
    for (i, cell) in cells.iter().enumerate() {
        let out = dynamic_conv_cell(tape, b, v2, cell, kind, causal, pad)?;
        let w_i = tape.index1(weights, i)?;
        let term = tape.scale_by(out, w_i)?;
        acc = Some(match acc {
            Some(a) => tape.add(a, term)?,
            None => term,
        });
    }
    Ok(acc.expect("cells non-empty"))
}

/// Position-wise two-layer feed-forward network.
pub fn pointwise_branch(tape: &mut Tape, b: &Binding, x: Var, p: &FfnParams) -> Result<Var> {
    let h = tape.matmul(x, b.var(p.w1))?;
    let h = tape.add_bias(h, b.var(p.b1))?;
    let h = tape.relu(h)?;
    let out = tape.matmul(h, b.var(p.w2))?;
    tape.add_bias(out, b.var(p.b2))
}

/// One full block: pre-norm, parallel branches, residual sum.
pub fn muse_block_forward(
    tape: &mut Tape,
    b: &Binding,
    x: Var,
    params: &BlockParams,
    cfg: &BlockConfig,
    mask: Option<&AttnMask>,
    pad: Option<&[bool]>,
    dropout: &mut Dropout,
) -> Result<Var> {
    cfg.validate()?;
    let normed = tape.layer_norm(x, b.var(params.ln_gain), b.var(params.ln_bias), LN_EPS)?;

    let (v1, v2) = match &params.proj {
        SharedProjection::Shared { w_v } => {
            let v = tape.matmul(normed, b.var(*w_v))?;
            (v, v)
        }
        SharedProjection::Separate { w_v1, w_v2 } => {
            (tape.matmul(normed, b.var(*w_v1))?, tape.matmul(normed, b.var(*w_v2))?)
        }
    };

    let attn = attention_core(tape, b, normed, &params.attn, v1, mask, dropout)?;
    let attn = dropout.apply(tape, attn)?;
    let mut out = tape.add(x, attn)?;

    if cfg.mode == BlockMode::Muse {
        let gate = params
            .gate
            .as_ref()
            .ok_or_else(|| MuseError::Config("muse mode requires gate parameters".into()))?;
        let conv =
            gated_conv_branch(tape, b, v2, &params.cells, gate, cfg.conv_kind, cfg.causal, pad)?;
        let conv = dropout.apply(tape, conv)?;
        out = tape.add(out, conv)?;
    }

    let pw = pointwise_branch(tape, b, normed, &params.ffn)?;
    let pw = dropout.apply(tape, pw)?;
    tape.add(out, pw)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::kernels;
    use crate::tensor::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn cfg(mode: BlockMode, kernels: Vec<usize>) -> BlockConfig {
        BlockConfig {
            mode,
            projection: Projection::Shared,
            conv_kind: ConvKind::DynamicDepthwise,
            kernel_sizes: kernels,
            causal: false,
            d: 8,
            d_ff: 16,
            heads: 2,
            dropout: 0.0,
        }
    }

    fn rand_tensor(rng: &mut impl Rng, shape: Vec<usize>) -> Tensor {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor { shape, data, requires_grad: false, grad: None }
    }

    fn set_identity(store: &mut ParamStore, id: ParamId) {
        let t = store.tensor_mut(id);
        let d = t.shape[0];
        t.data.fill(0.0);
        for i in 0..d {
            t.data[i * d + i] = 1.0;
        }
    }

    fn set_zero(store: &mut ParamStore, id: ParamId) {
        store.tensor_mut(id).data.fill(0.0);
    }

    fn max_abs_diff(a: &[Elem], b: &[Elem]) -> Elem {
        a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, Elem::max)
    }

    // ── scaled dot attention ────────────────────────────────────────────

    #[test]
    fn attention_with_zero_queries_averages_values() {
        let (n, d, h) = (4, 8, 2);
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let mut tape = Tape::new();
        let q = tape.constant(vec![0.0; n * d], vec![n, d]).unwrap();
        let k = tape.leaf(&rand_tensor(&mut rng, vec![n, d]));
        let vt = rand_tensor(&mut rng, vec![n, d]);
        let v = tape.leaf(&vt);
        let out =
            scaled_dot_attention(&mut tape, q, k, v, None, h, &mut Dropout::Off).unwrap();
        for i in 0..n {
            for c in 0..d {
                let mean: Elem = (0..n).map(|r| vt.data[r * d + c]).sum::<Elem>() / n as Elem;
                assert!((tape.data(out)[i * d + c] - mean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn attention_with_single_key_copies_value() {
        let (n_q, d, h) = (3, 4, 2);
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let mut tape = Tape::new();
        let q = tape.leaf(&rand_tensor(&mut rng, vec![n_q, d]));
        let k = tape.leaf(&rand_tensor(&mut rng, vec![1, d]));
        let vt = rand_tensor(&mut rng, vec![1, d]);
        let v = tape.leaf(&vt);
        let out =
            scaled_dot_attention(&mut tape, q, k, v, None, h, &mut Dropout::Off).unwrap();
        for i in 0..n_q {
            assert!(max_abs_diff(&tape.data(out)[i * d..(i + 1) * d], &vt.data) < 1e-12);
        }
    }

    // independent per-head explicit-loop oracle
    fn attention_oracle(
        q: &[Elem],
        k: &[Elem],
        v: &[Elem],
        n_q: usize,
        n_k: usize,
        d: usize,
        heads: usize,
        mask: Option<&AttnMask>,
    ) -> Vec<Elem> {
        let d_k = d / heads;
        let mut out = vec![0.0; n_q * d];
        for h in 0..heads {
            for i in 0..n_q {
                let mut scores = vec![0.0; n_k];
                for j in 0..n_k {
                    let mut s = 0.0;
                    for c in 0..d_k {
                        s += q[i * d + h * d_k + c] * k[j * d + h * d_k + c];
                    }
                    scores[j] = s / (d_k as Elem).sqrt();
                    if let Some(m) = mask {
                        if !m.allowed[i * n_k + j] {
                            scores[j] = Elem::NEG_INFINITY;
                        }
                    }
                }
                let max = scores.iter().cloned().fold(Elem::NEG_INFINITY, Elem::max);
                let exps: Vec<Elem> = scores.iter().map(|&s| (s - max).exp()).collect();
                let sum: Elem = exps.iter().sum();
                for j in 0..n_k {
                    let w = exps[j] / sum;
                    for c in 0..d_k {
                        out[i * d + h * d_k + c] += w * v[j * d + h * d_k + c];
                    }
                }
            }
        }
        out
    }

    #[test]
    fn attention_matches_explicit_loop_oracle() {
        let (n, d, h) = (5, 8, 2);
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let qt = rand_tensor(&mut rng, vec![n, d]);
        let kt = rand_tensor(&mut rng, vec![n, d]);
        let vt = rand_tensor(&mut rng, vec![n, d]);
        let mut tape = Tape::new();
        let q = tape.leaf(&qt);
        let k = tape.leaf(&kt);
        let v = tape.leaf(&vt);
        let out =
            scaled_dot_attention(&mut tape, q, k, v, None, h, &mut Dropout::Off).unwrap();
        let want = attention_oracle(&qt.data, &kt.data, &vt.data, n, n, d, h, None);
        assert!(max_abs_diff(tape.data(out), &want) < 1e-10);

        // and with a causal mask
        let mask = AttnMask::causal(n);
        let mut tape = Tape::new();
        let q = tape.leaf(&qt);
        let k = tape.leaf(&kt);
        let v = tape.leaf(&vt);
        let out =
            scaled_dot_attention(&mut tape, q, k, v, Some(&mask), h, &mut Dropout::Off).unwrap();
        let want = attention_oracle(&qt.data, &kt.data, &vt.data, n, n, d, h, Some(&mask));
        assert!(max_abs_diff(tape.data(out), &want) < 1e-10);
    }

    #[test]
    fn fully_masked_row_is_rejected() {
        let mut tape = Tape::new();
        let q = tape.constant(vec![0.0; 4], vec![2, 2]).unwrap();
        let k = tape.constant(vec![0.0; 4], vec![2, 2]).unwrap();
        let v = tape.constant(vec![0.0; 4], vec![2, 2]).unwrap();
        let mask = AttnMask { n_q: 2, n_k: 2, allowed: vec![true, true, false, false] };
        let err = scaled_dot_attention(&mut tape, q, k, v, Some(&mask), 1, &mut Dropout::Off);
        assert!(matches!(err, Err(MuseError::Usage(_))));
    }

    // ── attention branch ────────────────────────────────────────────────

    fn build_block(
        seed: u64,
        cfg: &BlockConfig,
    ) -> (ParamStore, BlockParams) {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let params = BlockParams::build(&mut store, "blk", cfg, &mut rng).unwrap();
        (store, params)
    }

    #[test]
    fn attention_branch_silenced_by_zero_output_projection() {
        let cfg = cfg(BlockMode::Muse, vec![3]);
        let (mut store, params) = build_block(4, &cfg);
        set_zero(&mut store, params.attn.w_o);
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let x = rand_tensor(&mut rng, vec![4, cfg.d]);
        let mut tape = Tape::new();
        let binding = store.bind(&mut tape);
        let xv = tape.leaf(&x);
        let out = attention_branch(
            &mut tape, &binding, xv, &params.attn, &params.proj, None, &mut Dropout::Off,
        )
        .unwrap();
        assert!(tape.data(out).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn attention_branch_single_row_ignores_query_and_key() {
        let cfg = cfg(BlockMode::Muse, vec![3]);
        let (store, params) = build_block(6, &cfg);
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let x = rand_tensor(&mut rng, vec![1, cfg.d]);
        let mut tape = Tape::new();
        let binding = store.bind(&mut tape);
        let xv = tape.leaf(&x);
        let out = attention_branch(
            &mut tape, &binding, xv, &params.attn, &params.proj, None, &mut Dropout::Off,
        )
        .unwrap();

        // oracle: (x W_V) W_O via raw kernels
        let d = cfg.d;
        let w_v = match &params.proj {
            SharedProjection::Shared { w_v } => store.data(*w_v),
            _ => unreachable!(),
        };
        let mut xv1 = vec![0.0; d];
        kernels::mm(&x.data, w_v, 1, d, d, &mut xv1);
        let mut want = vec![0.0; d];
        kernels::mm(&xv1, store.data(params.attn.w_o), 1, d, d, &mut want);
        assert!(max_abs_diff(tape.data(out), &want) < 1e-12);
    }

    #[test]
    fn attention_branch_matches_composition_of_sub_ops() {
        let cfg = cfg(BlockMode::Muse, vec![3]);
        let (store, params) = build_block(8, &cfg);
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        let n = 5;
        let d = cfg.d;
        let x = rand_tensor(&mut rng, vec![n, d]);
        let mut tape = Tape::new();
        let binding = store.bind(&mut tape);
        let xv = tape.leaf(&x);
        let out = attention_branch(
            &mut tape, &binding, xv, &params.attn, &params.proj, None, &mut Dropout::Off,
        )
        .unwrap();

        // oracle: raw projections + explicit-loop attention + output projection
        let w_v = match &params.proj {
            SharedProjection::Shared { w_v } => store.data(*w_v),
            _ => unreachable!(),
        };
        let mut q = vec![0.0; n * d];
        let mut k = vec![0.0; n * d];
        let mut v = vec![0.0; n * d];
        kernels::mm(&x.data, store.data(params.attn.w_q), n, d, d, &mut q);
        kernels::mm(&x.data, store.data(params.attn.w_k), n, d, d, &mut k);
        kernels::mm(&x.data, w_v, n, d, d, &mut v);
        let ctx = attention_oracle(&q, &k, &v, n, n, d, cfg.heads, None);
        let mut want = vec![0.0; n * d];
        kernels::mm(&ctx, store.data(params.attn.w_o), n, d, d, &mut want);
        assert!(max_abs_diff(tape.data(out), &want) < 1e-10);
    }

    // ── convolution ─────────────────────────────────────────────────────

    // literal transcription of the per-position definition
    pub fn conv_cell_oracle(
        v2: &[Elem],
        n: usize,
        d: usize,
        gen: &[Elem],
        k: usize,
        causal: bool,
        w_out: &[Elem],
    ) -> Vec<Elem> {
        let mut mixed = vec![0.0; n * d];
        for i in 0..n {
            let mut logits = vec![0.0; k];
            for (j, l) in logits.iter_mut().enumerate() {
                for c in 0..d {
                    *l += gen[j * d + c] * v2[i * d + c];
                }
            }
            let max = logits.iter().cloned().fold(Elem::NEG_INFINITY, Elem::max);
            let exps: Vec<Elem> = logits.iter().map(|&l| (l - max).exp()).collect();
            let sum: Elem = exps.iter().sum();
            for j in 0..k {
                let w = exps[j] / sum;
                let src = i as isize
                    + if causal {
                        j as isize + 1 - k as isize
                    } else {
                        j as isize - (k as isize - 1) / 2
                    };
                if src >= 0 && (src as usize) < n {
                    for c in 0..d {
                        mixed[i * d + c] += w * v2[src as usize * d + c];
                    }
                }
            }
        }
        let mut out = vec![0.0; n * d];
        kernels::mm(&mixed, w_out, n, d, d, &mut out);
        out
    }

    #[test]
    fn conv_cell_k1_with_identity_output_is_identity() {
        let cfg = cfg(BlockMode::Muse, vec![1]);
        let (mut store, params) = build_block(10, &cfg);
        set_identity(&mut store, params.cells[0].w_out);
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        let v2t = rand_tensor(&mut rng, vec![5, cfg.d]);
        let mut tape = Tape::new();
        let binding = store.bind(&mut tape);
        let v2 = tape.leaf(&v2t);
        let out = dynamic_conv_cell(
            &mut tape, &binding, v2, &params.cells[0], ConvKind::DynamicDepthwise, false, None,
        )
        .unwrap();
        assert_eq!(tape.data(out), &v2t.data[..]);
    }

    #[test]
    fn conv_cell_uniform_taps_with_zero_padding() {
        // G = 0, k = 3, d = 1, V2 = [[1],[1],[1]], W_out = [1]: boundary rows
        // keep softmax mass on out-of-range taps, so outputs are 2/3, 1, 2/3.
        let mut store = ParamStore::new();
        let weights = store.insert("g", Tensor::zeros(vec![3, 1]));
        let mut w_out_t = Tensor::zeros(vec![1, 1]);
        w_out_t.data[0] = 1.0;
        let w_out = store.insert("w_out", w_out_t);
        let cell = ConvCellParams { kernel_size: 3, weights, w_out };
        let mut tape = Tape::new();
        let binding = store.bind(&mut tape);
        let v2 = tape.constant(vec![1.0, 1.0, 1.0], vec![3, 1]).unwrap();
        let out = dynamic_conv_cell(
            &mut tape, &binding, v2, &cell, ConvKind::DynamicDepthwise, false, None,
        )
        .unwrap();
        let got = tape.data(out);
        assert!((got[0] - 2.0 / 3.0).abs() < 1e-12);
        assert!((got[1] - 1.0).abs() < 1e-12);
        assert!((got[2] - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn conv_cell_matches_brute_force_oracle() {
        for causal in [false, true] {
            let mut block_cfg = cfg(BlockMode::Muse, vec![3]);
            block_cfg.d = 4;
            block_cfg.causal = causal;
            let (store, params) = build_block(12, &block_cfg);
            let mut rng = ChaCha12Rng::seed_from_u64(13);
            let v2t = rand_tensor(&mut rng, vec![6, 4]);
            let mut tape = Tape::new();
            let binding = store.bind(&mut tape);
            let v2 = tape.leaf(&v2t);
            let out = dynamic_conv_cell(
                &mut tape, &binding, v2, &params.cells[0], ConvKind::DynamicDepthwise, causal,
                None,
            )
            .unwrap();
            let want = conv_cell_oracle(
                &v2t.data,
                6,
                4,
                store.data(params.cells[0].weights),
                3,
                causal,
                store.data(params.cells[0].w_out),
            );
            assert!(max_abs_diff(tape.data(out), &want) < 1e-10, "causal={causal}");
        }
    }

    #[test]
    fn conv_cell_rejects_even_kernel() {
        let mut store = ParamStore::new();
        let weights = store.insert("g", Tensor::zeros(vec![2, 1]));
        let w_out = store.insert("w_out", Tensor::zeros(vec![1, 1]));
        let cell = ConvCellParams { kernel_size: 2, weights, w_out };
        let mut tape = Tape::new();
        let binding = store.bind(&mut tape);
        let v2 = tape.constant(vec![1.0], vec![1, 1]).unwrap();
        let err = dynamic_conv_cell(
            &mut tape, &binding, v2, &cell, ConvKind::DynamicDepthwise, false, None,
        );
        assert!(matches!(err, Err(MuseError::Config(_))));
    }

    // ── gated mixture ───────────────────────────────────────────────────

    #[test]
    fn single_cell_gate_is_identity_weight() {
        let block_cfg = cfg(BlockMode::Muse, vec![3]);
        let (store, params) = build_block(14, &block_cfg);
        let mut rng = ChaCha12Rng::seed_from_u64(15);
        let v2t = rand_tensor(&mut rng, vec![4, block_cfg.d]);

        let mut tape = Tape::new();
        let binding = store.bind(&mut tape);
        let v2 = tape.leaf(&v2t);
        let gated = gated_conv_branch(
            &mut tape, &binding, v2, &params.cells, params.gate.as_ref().unwrap(),
            ConvKind::DynamicDepthwise, false, None,
        )
        .unwrap();
        let single = dynamic_conv_cell(
            &mut tape, &binding, v2, &params.cells[0], ConvKind::DynamicDepthwise, false, None,
        )
        .unwrap();
        assert_eq!(tape.data(gated), tape.data(single));
    }

    #[test]
    fn equal_alphas_average_two_cells() {
        let block_cfg = cfg(BlockMode::Muse, vec![3, 5]);
        let (store, params) = build_block(16, &block_cfg);
        let mut rng = ChaCha12Rng::seed_from_u64(17);
        let v2t = rand_tensor(&mut rng, vec![6, block_cfg.d]);

        let mut tape = Tape::new();
        let binding = store.bind(&mut tape);
        let v2 = tape.leaf(&v2t);
        let gated = gated_conv_branch(
            &mut tape, &binding, v2, &params.cells, params.gate.as_ref().unwrap(),
            ConvKind::DynamicDepthwise, false, None,
        )
        .unwrap();
        let c0 = dynamic_conv_cell(
            &mut tape, &binding, v2, &params.cells[0], ConvKind::DynamicDepthwise, false, None,
        )
        .unwrap();
        let c1 = dynamic_conv_cell(
            &mut tape, &binding, v2, &params.cells[1], ConvKind::DynamicDepthwise, false, None,
        )
        .unwrap();
        let want: Vec<Elem> = tape
            .data(c0)
            .iter()
            .zip(tape.data(c1))
            .map(|(a, b)| 0.5 * a + 0.5 * b)
            .collect();
        assert!(max_abs_diff(tape.data(gated), &want) < 1e-12);
    }

    #[test]
    fn random_alphas_match_weighted_sum_oracle() {
        let block_cfg = cfg(BlockMode::Muse, vec![1, 3, 5]);
        let (mut store, params) = build_block(18, &block_cfg);
        let mut rng = ChaCha12Rng::seed_from_u64(19);
        for v in store.tensor_mut(params.gate.as_ref().unwrap().alpha).data.iter_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
        let v2t = rand_tensor(&mut rng, vec![5, block_cfg.d]);

        let mut tape = Tape::new();
        let binding = store.bind(&mut tape);
        let v2 = tape.leaf(&v2t);
        let gated = gated_conv_branch(
            &mut tape, &binding, v2, &params.cells, params.gate.as_ref().unwrap(),
            ConvKind::DynamicDepthwise, false, None,
        )
        .unwrap();

        let alphas = store.data(params.gate.as_ref().unwrap().alpha);
        let max = alphas.iter().cloned().fold(Elem::NEG_INFINITY, Elem::max);
        let exps: Vec<Elem> = alphas.iter().map(|&a| (a - max).exp()).collect();
        let sum: Elem = exps.iter().sum();
        let mut want = vec![0.0; tape.data(gated).len()];
        for (i, cell) in params.cells.iter().enumerate() {
            let out = conv_cell_oracle(
                &v2t.data,
                5,
                block_cfg.d,
                store.data(cell.weights),
                cell.kernel_size,
                false,
                store.data(cell.w_out),
            );
            for (w, &o) in want.iter_mut().zip(&out) {
                *w += exps[i] / sum * o;
            }
        }
        assert!(max_abs_diff(tape.data(gated), &want) < 1e-10);
    }

    // ── pointwise ───────────────────────────────────────────────────────

    #[test]
    fn pointwise_identity_on_nonnegative_input() {
        let mut store = ParamStore::new();
        let d = 3;
        let w1 = store.insert("w1", Tensor::zeros(vec![d, d]));
        let b1 = store.insert("b1", Tensor::zeros(vec![d]));
        let w2 = store.insert("w2", Tensor::zeros(vec![d, d]));
        let b2 = store.insert("b2", Tensor::zeros(vec![d]));
        set_identity(&mut store, w1);
        set_identity(&mut store, w2);
        let ffn = FfnParams { w1, b1, w2, b2 };
        let mut tape = Tape::new();
        let binding = store.bind(&mut tape);
        let x = tape.constant(vec![0.0, 1.5, 2.0, 0.5, 0.0, 3.0], vec![2, d]).unwrap();
        let out = pointwise_branch(&mut tape, &binding, x, &ffn).unwrap();
        assert_eq!(tape.data(out), tape.data(x));
    }

    #[test]
    fn pointwise_relu_clamps_negative_scalar() {
        let mut store = ParamStore::new();
        let w1 = store.insert("w1", Tensor::new(vec![1, 1], vec![1.0]).unwrap());
        let b1 = store.insert("b1", Tensor::zeros(vec![1]));
        let w2 = store.insert("w2", Tensor::new(vec![1, 1], vec![1.0]).unwrap());
        let b2 = store.insert("b2", Tensor::zeros(vec![1]));
        let ffn = FfnParams { w1, b1, w2, b2 };
        let mut tape = Tape::new();
        let binding = store.bind(&mut tape);
        let x = tape.constant(vec![-1.0], vec![1, 1]).unwrap();
        let out = pointwise_branch(&mut tape, &binding, x, &ffn).unwrap();
        assert_eq!(tape.data(out), &[0.0]);
    }

    #[test]
    fn pointwise_is_position_wise() {
        let block_cfg = cfg(BlockMode::MuseSimple, vec![]);
        let (store, params) = build_block(20, &block_cfg);
        let mut rng = ChaCha12Rng::seed_from_u64(21);
        let x = rand_tensor(&mut rng, vec![4, block_cfg.d]);
        // permute rows 0..4 -> [2, 0, 3, 1]
        let perm = [2usize, 0, 3, 1];
        let mut xp = x.clone();
        for (i, &p) in perm.iter().enumerate() {
            xp.data[i * block_cfg.d..(i + 1) * block_cfg.d]
                .copy_from_slice(&x.data[p * block_cfg.d..(p + 1) * block_cfg.d]);
        }
        let mut tape = Tape::new();
        let binding = store.bind(&mut tape);
        let xv = tape.leaf(&x);
        let xpv = tape.leaf(&xp);
        let out = pointwise_branch(&mut tape, &binding, xv, &params.ffn).unwrap();
        let outp = pointwise_branch(&mut tape, &binding, xpv, &params.ffn).unwrap();
        for (i, &p) in perm.iter().enumerate() {
            assert_eq!(
                &tape.data(outp)[i * block_cfg.d..(i + 1) * block_cfg.d],
                &tape.data(out)[p * block_cfg.d..(p + 1) * block_cfg.d],
            );
        }
    }

    // ── whole block ─────────────────────────────────────────────────────

    #[test]
    fn block_with_zero_output_projections_is_residual_identity() {
        let block_cfg = cfg(BlockMode::Muse, vec![3, 5]);
        let (mut store, params) = build_block(22, &block_cfg);
        set_zero(&mut store, params.attn.w_o);
        set_zero(&mut store, params.ffn.w2);
        for cell in &params.cells {
            set_zero(&mut store, cell.w_out);
        }
        let mut rng = ChaCha12Rng::seed_from_u64(23);
        let x = rand_tensor(&mut rng, vec![5, block_cfg.d]);
        let mut tape = Tape::new();
        let binding = store.bind(&mut tape);
        let xv = tape.leaf(&x);
        let out = muse_block_forward(
            &mut tape, &binding, xv, &params, &block_cfg, None, None, &mut Dropout::Off,
        )
        .unwrap();
        assert_eq!(tape.data(out), &x.data[..]);
    }

    #[test]
    fn simple_mode_equals_muse_without_conv_bitwise() {
        let muse_cfg = cfg(BlockMode::Muse, vec![3]);
        let (store, params) = build_block(24, &muse_cfg);
        let mut rng = ChaCha12Rng::seed_from_u64(25);
        let x = rand_tensor(&mut rng, vec![4, muse_cfg.d]);

        // same parameters, conv branch deleted by hand: x + attn + pointwise
        let mut tape = Tape::new();
        let binding = store.bind(&mut tape);
        let xv = tape.leaf(&x);
        let normed = tape
            .layer_norm(xv, binding.var(params.ln_gain), binding.var(params.ln_bias), LN_EPS)
            .unwrap();
        let attn = attention_branch(
            &mut tape, &binding, normed, &params.attn, &params.proj, None, &mut Dropout::Off,
        )
        .unwrap();
        let s = tape.add(xv, attn).unwrap();
        let pw = pointwise_branch(&mut tape, &binding, normed, &params.ffn).unwrap();
        let want = tape.add(s, pw).unwrap();

        let mut simple_cfg = muse_cfg.clone();
        simple_cfg.mode = BlockMode::MuseSimple;
        let mut tape2 = Tape::new();
        let binding2 = store.bind(&mut tape2);
        let xv2 = tape2.leaf(&x);
        let got = muse_block_forward(
            &mut tape2, &binding2, xv2, &params, &simple_cfg, None, None, &mut Dropout::Off,
        )
        .unwrap();
        assert_eq!(tape2.data(got), tape.data(want));
    }

    #[test]
    fn block_output_is_sum_of_branches_plus_residual() {
        let block_cfg = cfg(BlockMode::Muse, vec![3, 5]);
        let (store, params) = build_block(26, &block_cfg);
        let mut rng = ChaCha12Rng::seed_from_u64(27);
        let x = rand_tensor(&mut rng, vec![5, block_cfg.d]);

        let mut tape = Tape::new();
        let binding = store.bind(&mut tape);
        let xv = tape.leaf(&x);
        let out = muse_block_forward(
            &mut tape, &binding, xv, &params, &block_cfg, None, None, &mut Dropout::Off,
        )
        .unwrap();

        // branches computed independently on a second tape
        let mut t2 = Tape::new();
        let b2 = store.bind(&mut t2);
        let xv2 = t2.leaf(&x);
        let normed = t2
            .layer_norm(xv2, b2.var(params.ln_gain), b2.var(params.ln_bias), LN_EPS)
            .unwrap();
        let attn = attention_branch(
            &mut t2, &b2, normed, &params.attn, &params.proj, None, &mut Dropout::Off,
        )
        .unwrap();
        let w_v = match &params.proj {
            SharedProjection::Shared { w_v } => *w_v,
            _ => unreachable!(),
        };
        let v2 = t2.matmul(normed, b2.var(w_v)).unwrap();
        let conv = gated_conv_branch(
            &mut t2, &b2, v2, &params.cells, params.gate.as_ref().unwrap(),
            ConvKind::DynamicDepthwise, false, None,
        )
        .unwrap();
        let pw = pointwise_branch(&mut t2, &b2, normed, &params.ffn).unwrap();
        let want: Vec<Elem> = (0..x.data.len())
            .map(|i| x.data[i] + t2.data(attn)[i] + t2.data(conv)[i] + t2.data(pw)[i])
            .collect();
        assert!(max_abs_diff(tape.data(out), &want) < 1e-10);
    }

    #[test]
    fn shared_projection_saves_d_squared_parameters() {
        let shared_cfg = cfg(BlockMode::Muse, vec![3, 15]);
        let mut sep_cfg = shared_cfg.clone();
        sep_cfg.projection = Projection::Separate;
        let (shared_store, shared_params) = build_block(28, &shared_cfg);
        let (sep_store, sep_params) = build_block(28, &sep_cfg);
        let diff = sep_params.scalar_count(&sep_store) - shared_params.scalar_count(&shared_store);
        assert_eq!(diff, shared_cfg.d * shared_cfg.d);
    }

    #[test]
    fn block_gradients_match_finite_differences() {
        let mut block_cfg = cfg(BlockMode::Muse, vec![3, 5]);
        block_cfg.causal = true;
        let mut rng = ChaCha12Rng::seed_from_u64(30);
        let mut store = ParamStore::new();
        let params = BlockParams::build(&mut store, "blk", &block_cfg, &mut rng).unwrap();
        let x = rand_tensor(&mut rng, vec![4, block_cfg.d]);
        let mask = AttnMask::causal(4);

        let report = crate::tensor::finite_diff_check(&mut store, 1e-5, |tape, binding| {
            let xv = tape.leaf(&x);
            let out = muse_block_forward(
                tape, binding, xv, &params, &block_cfg, Some(&mask), None, &mut Dropout::Off,
            )?;
            // curved scalar loss so second-order terms exercise every path
            let sq = tape.mul(out, out)?;
            tape.sum_all(sq)
        })
        .unwrap();
        assert!(report.max_rel_err < 1e-4, "worst {} at {}", report.max_rel_err, report.worst_param);
    }

    #[test]
    fn plain_conv_gradients_match_finite_differences() {
        let mut block_cfg = cfg(BlockMode::Muse, vec![3]);
        block_cfg.conv_kind = ConvKind::Plain;
        let mut rng = ChaCha12Rng::seed_from_u64(31);
        let mut store = ParamStore::new();
        let params = BlockParams::build(&mut store, "blk", &block_cfg, &mut rng).unwrap();
        let x = rand_tensor(&mut rng, vec![4, block_cfg.d]);

        let report = crate::tensor::finite_diff_check(&mut store, 1e-5, |tape, binding| {
            let xv = tape.leaf(&x);
            let out = muse_block_forward(
                tape, binding, xv, &params, &block_cfg, None, None, &mut Dropout::Off,
            )?;
            let sq = tape.mul(out, out)?;
            tape.sum_all(sq)
        })
        .unwrap();
        assert!(report.max_rel_err < 1e-4, "worst {} at {}", report.max_rel_err, report.worst_param);
    }
}
