//! Reverse-mode autodiff tape.
//!
//! A [`Tape`] owns every value produced during one forward pass. Operations
//! append nodes and record which inputs they read; [`Tape::backward`] walks
//! the nodes in reverse, applying each op's local gradient rule. A tape is
//! consumed by exactly one backward pass.

use std::sync::atomic::{AtomicU32, Ordering};

use super::kernels;
use super::{Elem, Tensor};
use crate::error::{MuseError, Result};

static TAPE_TAG: AtomicU32 = AtomicU32::new(1);

/// Handle to a value on a specific tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    id: u32,
    tag: u32,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul { a: u32, b: u32 },
    MatMulNt { a: u32, b: u32 },
    Add { a: u32, b: u32 },
    AddBias { a: u32, bias: u32 },
    Mul { a: u32, b: u32 },
    Scale { a: u32, factor: Elem },
    ScaleBy { a: u32, s: u32 },
    Relu { a: u32 },
    Softmax { a: u32, axis: usize },
    LayerNorm { a: u32, gain: u32, bias: u32, eps: Elem },
    MaskFill { a: u32, mask: Vec<bool> },
    ZeroRows { a: u32, rows: Vec<bool> },
    ShiftRows { a: u32, delta: isize },
    MulCol { a: u32, col: u32 },
    MulRow { a: u32, row: u32 },
    NarrowCols { a: u32, start: usize, len: usize },
    NarrowRows { a: u32, start: usize },
    ConcatCols { parts: Vec<u32> },
    Embed { table: u32, ids: Vec<usize> },
    SumAll { a: u32 },
    Index1 { a: u32, index: usize },
    CrossEntropy { logits: u32, targets: Vec<usize>, smoothing: Elem, ignore: Option<usize> },
}

struct Node {
    data: Vec<Elem>,
    shape: Vec<usize>,
    requires_grad: bool,
    op: Op,
}

/// Ordered record of one forward pass.
pub struct Tape {
    nodes: Vec<Node>,
    tag: u32,
    consumed: bool,
}

/// Gradients produced by one backward pass, indexed by [`Var`].
pub struct Grads {
    grads: Vec<Option<Vec<Elem>>>,
    numels: Vec<usize>,
    tag: u32,
}

impl Grads {
    /// Gradient of the loss w.r.t. `v`. Zeros when `v` did not participate.
    pub fn of(&self, v: Var) -> Vec<Elem> {
        assert_eq!(v.tag, self.tag, "Var belongs to a different tape");
        match &self.grads[v.id as usize] {
            Some(g) => g.clone(),
            None => vec![0.0; self.numels[v.id as usize]],
        }
    }

    pub fn get(&self, v: Var) -> Option<&[Elem]> {
        assert_eq!(v.tag, self.tag, "Var belongs to a different tape");
        self.grads[v.id as usize].as_deref()
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            tag: TAPE_TAG.fetch_add(1, Ordering::Relaxed),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn data(&self, v: Var) -> &[Elem] {
        assert_eq!(v.tag, self.tag, "Var belongs to a different tape");
        &self.nodes[v.id as usize].data
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        assert_eq!(v.tag, self.tag, "Var belongs to a different tape");
        &self.nodes[v.id as usize].shape
    }

    /// Copy a value off the tape as a standalone tensor.
    pub fn tensor(&self, v: Var) -> Tensor {
        Tensor {
            shape: self.shape(v).to_vec(),
            data: self.data(v).to_vec(),
            requires_grad: false,
            grad: None,
        }
    }

    fn check(&self, v: Var) -> Result<&Node> {
        if v.tag != self.tag {
            return Err(MuseError::Usage("Var belongs to a different tape".into()));
        }
        Ok(&self.nodes[v.id as usize])
    }

    fn push(&mut self, data: Vec<Elem>, shape: Vec<usize>, requires_grad: bool, op: Op) -> Var {
        let id = self.nodes.len() as u32;
        self.nodes.push(Node { data, shape, requires_grad, op });
        Var { id, tag: self.tag }
    }

    fn rank2(&self, v: Var, what: &str) -> Result<(usize, usize)> {
        let node = self.check(v)?;
        if node.shape.len() != 2 {
            return Err(MuseError::Shape(format!(
                "{what} needs a rank-2 tensor, got shape {:?}",
                node.shape
            )));
        }
        Ok((node.shape[0], node.shape[1]))
    }

    // ── Leaves ──────────────────────────────────────────────────────────

    /// Register an existing tensor as a leaf of this pass.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(t.data.clone(), t.shape.clone(), t.requires_grad, Op::Leaf)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, data: Vec<Elem>, shape: Vec<usize>) -> Result<Var> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(MuseError::Shape(format!(
                "shape {:?} implies {} elements, data has {}",
                shape,
                expected,
                data.len()
            )));
        }
        Ok(self.push(data, shape, false, Op::Leaf))
    }

    // ── Arithmetic ──────────────────────────────────────────────────────

    /// C[m,n] = A[m,k] · B[k,n].
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, ka) = self.rank2(a, "matmul lhs")?;
        let (kb, n) = self.rank2(b, "matmul rhs")?;
        if ka != kb {
            return Err(MuseError::Shape(format!(
                "matmul inner dimensions disagree: lhs {:?} vs rhs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let mut out = vec![0.0; m * n];
        kernels::mm(self.data(a), self.data(b), m, ka, n, &mut out);
        let rg = self.nodes[a.id as usize].requires_grad || self.nodes[b.id as usize].requires_grad;
        Ok(self.push(out, vec![m, n], rg, Op::MatMul { a: a.id, b: b.id }))
    }

    /// C[m,n] = A[m,k] · B[n,k]ᵀ.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, ka) = self.rank2(a, "matmul_nt lhs")?;
        let (n, kb) = self.rank2(b, "matmul_nt rhs")?;
        if ka != kb {
            return Err(MuseError::Shape(format!(
                "matmul_nt inner dimensions disagree: lhs {:?} vs rhs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let mut out = vec![0.0; m * n];
        kernels::mm_nt(self.data(a), self.data(b), m, ka, n, &mut out);
        let rg = self.nodes[a.id as usize].requires_grad || self.nodes[b.id as usize].requires_grad;
        Ok(self.push(out, vec![m, n], rg, Op::MatMulNt { a: a.id, b: b.id }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (na, nb) = (self.check(a)?, self.check(b)?);
        if na.shape != nb.shape {
            return Err(MuseError::Shape(format!(
                "add shapes disagree: {:?} vs {:?}",
                na.shape, nb.shape
            )));
        }
        let data: Vec<Elem> = na.data.iter().zip(&nb.data).map(|(x, y)| x + y).collect();
        let shape = na.shape.clone();
        let rg = na.requires_grad || nb.requires_grad;
        Ok(self.push(data, shape, rg, Op::Add { a: a.id, b: b.id }))
    }

    /// X[n,d] + bias[d], broadcast over rows.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (n, d) = self.rank2(a, "add_bias input")?;
        let nb = self.check(bias)?;
        if nb.data.len() != d {
            return Err(MuseError::Shape(format!(
                "add_bias: input {:?} vs bias {:?}",
                self.shape(a),
                nb.shape
            )));
        }
        let bdata = nb.data.clone();
        let na = self.check(a)?;
        let mut data = na.data.clone();
        for i in 0..n {
            for (v, &b) in data[i * d..(i + 1) * d].iter_mut().zip(&bdata) {
                *v += b;
            }
        }
        let rg = na.requires_grad || self.nodes[bias.id as usize].requires_grad;
        Ok(self.push(data, vec![n, d], rg, Op::AddBias { a: a.id, bias: bias.id }))
    }

    /// Elementwise product of same-shape values.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (na, nb) = (self.check(a)?, self.check(b)?);
        if na.shape != nb.shape {
            return Err(MuseError::Shape(format!(
                "mul shapes disagree: {:?} vs {:?}",
                na.shape, nb.shape
            )));
        }
        let data: Vec<Elem> = na.data.iter().zip(&nb.data).map(|(x, y)| x * y).collect();
        let shape = na.shape.clone();
        let rg = na.requires_grad || nb.requires_grad;
        Ok(self.push(data, shape, rg, Op::Mul { a: a.id, b: b.id }))
    }

    pub fn scale(&mut self, a: Var, factor: Elem) -> Result<Var> {
        let na = self.check(a)?;
        let data: Vec<Elem> = na.data.iter().map(|&x| x * factor).collect();
        let shape = na.shape.clone();
        let rg = na.requires_grad;
        Ok(self.push(data, shape, rg, Op::Scale { a: a.id, factor }))
    }

    /// Multiply by a learned scalar `s` (shape `[1]`).
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var> {
        let ns = self.check(s)?;
        if ns.data.len() != 1 {
            return Err(MuseError::Shape(format!("scale_by: scalar expected, got {:?}", ns.shape)));
        }
        let sv = ns.data[0];
        let na = self.check(a)?;
        let data: Vec<Elem> = na.data.iter().map(|&x| x * sv).collect();
        let shape = na.shape.clone();
        let rg = na.requires_grad || self.nodes[s.id as usize].requires_grad;
        Ok(self.push(data, shape, rg, Op::ScaleBy { a: a.id, s: s.id }))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let na = self.check(a)?;
        let data: Vec<Elem> = na.data.iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect();
        let shape = na.shape.clone();
        let rg = na.requires_grad;
        Ok(self.push(data, shape, rg, Op::Relu { a: a.id }))
    }

    /// Softmax along `axis`; each slice is nonnegative and sums to one.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let na = self.check(a)?;
        if axis >= na.shape.len() {
            return Err(MuseError::Shape(format!(
                "softmax axis {axis} out of range for shape {:?}",
                na.shape
            )));
        }
        let shape = na.shape.clone();
        let mut data = na.data.clone();
        let rg = na.requires_grad;
        let (outer, len, inner) = axis_split(&shape, axis);
        let mut scratch = vec![0.0; len];
        for o in 0..outer {
            for i in 0..inner {
                for (s, x) in scratch.iter_mut().zip(0..len) {
                    *s = data[o * len * inner + x * inner + i];
                }
                kernels::softmax_inplace(&mut scratch);
                for (x, &s) in scratch.iter().enumerate() {
                    data[o * len * inner + x * inner + i] = s;
                }
            }
        }
        Ok(self.push(data, shape, rg, Op::Softmax { a: a.id, axis }))
    }

    /// Row-wise layer normalization of X[n,d] with gain/bias of length d.
    pub fn layer_norm(&mut self, a: Var, gain: Var, bias: Var, eps: Elem) -> Result<Var> {
        let (n, d) = self.rank2(a, "layer_norm input")?;
        if eps <= 0.0 {
            return Err(MuseError::Usage("layer_norm eps must be positive".into()));
        }
        for (v, what) in [(gain, "gain"), (bias, "bias")] {
            let node = self.check(v)?;
            if node.data.len() != d {
                return Err(MuseError::Shape(format!(
                    "layer_norm {what} length {} does not match width {d}",
                    node.data.len()
                )));
            }
        }
        let gdata = self.data(gain).to_vec();
        let bdata = self.data(bias).to_vec();
        let na = &self.nodes[a.id as usize];
        let mut out = vec![0.0; n * d];
        for i in 0..n {
            kernels::layer_norm_row(
                &na.data[i * d..(i + 1) * d],
                &gdata,
                &bdata,
                eps,
                &mut out[i * d..(i + 1) * d],
            );
        }
        let rg = na.requires_grad
            || self.nodes[gain.id as usize].requires_grad
            || self.nodes[bias.id as usize].requires_grad;
        Ok(self.push(out, vec![n, d], rg, Op::LayerNorm { a: a.id, gain: gain.id, bias: bias.id, eps }))
    }

    /// Replace entries where `mask` is true with `-inf`; used before softmax.
    pub fn mask_fill_neg_inf(&mut self, a: Var, mask: &[bool]) -> Result<Var> {
        let na = self.check(a)?;
        if mask.len() != na.data.len() {
            return Err(MuseError::Shape(format!(
                "mask length {} does not match tensor numel {}",
                mask.len(),
                na.data.len()
            )));
        }
        let data: Vec<Elem> = na
            .data
            .iter()
            .zip(mask)
            .map(|(&x, &m)| if m { Elem::NEG_INFINITY } else { x })
            .collect();
        let shape = na.shape.clone();
        let rg = na.requires_grad;
        Ok(self.push(data, shape, rg, Op::MaskFill { a: a.id, mask: mask.to_vec() }))
    }

    /// Zero out whole rows of X[n,d] where `rows` is true.
    pub fn zero_rows(&mut self, a: Var, rows: &[bool]) -> Result<Var> {
        let (n, d) = self.rank2(a, "zero_rows input")?;
        if rows.len() != n {
            return Err(MuseError::Shape(format!(
                "zero_rows: {} flags for {} rows",
                rows.len(),
                n
            )));
        }
        let na = self.check(a)?;
        let mut data = na.data.clone();
        for (i, &z) in rows.iter().enumerate() {
            if z {
                data[i * d..(i + 1) * d].fill(0.0);
            }
        }
        let rg = na.requires_grad;
        Ok(self.push(data, vec![n, d], rg, Op::ZeroRows { a: a.id, rows: rows.to_vec() }))
    }

    /// out[i, :] = X[i - delta, :], zero where the source row is out of range.
    pub fn shift_rows(&mut self, a: Var, delta: isize) -> Result<Var> {
        let (n, d) = self.rank2(a, "shift_rows input")?;
        let na = self.check(a)?;
        let mut data = vec![0.0; n * d];
        for i in 0..n {
            let src = i as isize - delta;
            if src >= 0 && (src as usize) < n {
                let s = src as usize;
                data[i * d..(i + 1) * d].copy_from_slice(&na.data[s * d..(s + 1) * d]);
            }
        }
        let rg = na.requires_grad;
        Ok(self.push(data, vec![n, d], rg, Op::ShiftRows { a: a.id, delta }))
    }

    /// Multiply row i of X[n,d] by col[i] (col shaped [n] or [n,1]).
    pub fn mul_col(&mut self, a: Var, col: Var) -> Result<Var> {
        let (n, d) = self.rank2(a, "mul_col input")?;
        let nc = self.check(col)?;
        if nc.data.len() != n {
            return Err(MuseError::Shape(format!(
                "mul_col: {} weights for {} rows",
                nc.data.len(),
                n
            )));
        }
        let cdata = nc.data.clone();
        let na = self.check(a)?;
        let mut data = na.data.clone();
        for (i, &c) in cdata.iter().enumerate() {
            for v in data[i * d..(i + 1) * d].iter_mut() {
                *v *= c;
            }
        }
        let rg = na.requires_grad || self.nodes[col.id as usize].requires_grad;
        Ok(self.push(data, vec![n, d], rg, Op::MulCol { a: a.id, col: col.id }))
    }

    /// Multiply every row of X[n,d] elementwise by row[d].
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (n, d) = self.rank2(a, "mul_row input")?;
        let nr = self.check(row)?;
        if nr.data.len() != d {
            return Err(MuseError::Shape(format!(
                "mul_row: weight length {} vs width {d}",
                nr.data.len()
            )));
        }
        let rdata = nr.data.clone();
        let na = self.check(a)?;
        let mut data = na.data.clone();
        for i in 0..n {
            for (v, &r) in data[i * d..(i + 1) * d].iter_mut().zip(&rdata) {
                *v *= r;
            }
        }
        let rg = na.requires_grad || self.nodes[row.id as usize].requires_grad;
        Ok(self.push(data, vec![n, d], rg, Op::MulRow { a: a.id, row: row.id }))
    }

    /// Columns [start, start+len) of X[n,d].
    pub fn narrow_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (n, d) = self.rank2(a, "narrow_cols input")?;
        if start + len > d {
            return Err(MuseError::Shape(format!(
                "narrow_cols [{start}, {}) out of range for width {d}",
                start + len
            )));
        }
        let na = self.check(a)?;
        let mut data = Vec::with_capacity(n * len);
        for i in 0..n {
            data.extend_from_slice(&na.data[i * d + start..i * d + start + len]);
        }
        let rg = na.requires_grad;
        Ok(self.push(data, vec![n, len], rg, Op::NarrowCols { a: a.id, start, len }))
    }

    /// Rows [start, start+len) of X[n,d].
    pub fn narrow_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (n, d) = self.rank2(a, "narrow_rows input")?;
        if start + len > n {
            return Err(MuseError::Shape(format!(
                "narrow_rows [{start}, {}) out of range for {n} rows",
                start + len
            )));
        }
        let na = self.check(a)?;
        let data = na.data[start * d..(start + len) * d].to_vec();
        let rg = na.requires_grad;
        Ok(self.push(data, vec![len, d], rg, Op::NarrowRows { a: a.id, start }))
    }

    /// Concatenate rank-2 values with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(MuseError::Usage("concat_cols of zero parts".into()));
        }
        let (n, _) = self.rank2(parts[0], "concat_cols part")?;
        let mut widths = Vec::with_capacity(parts.len());
        let mut total = 0;
        for &p in parts {
            let (np, dp) = self.rank2(p, "concat_cols part")?;
            if np != n {
                return Err(MuseError::Shape(format!(
                    "concat_cols row counts disagree: {n} vs {np}"
                )));
            }
            widths.push(dp);
            total += dp;
        }
        let mut data = vec![0.0; n * total];
        let mut offset = 0;
        let mut rg = false;
        for (&p, &w) in parts.iter().zip(&widths) {
            let node = &self.nodes[p.id as usize];
            rg |= node.requires_grad;
            for i in 0..n {
                data[i * total + offset..i * total + offset + w]
                    .copy_from_slice(&node.data[i * w..(i + 1) * w]);
            }
            offset += w;
        }
        let ids: Vec<u32> = parts.iter().map(|p| p.id).collect();
        Ok(self.push(data, vec![n, total], rg, Op::ConcatCols { parts: ids }))
    }

    /// Gather rows of `table[v, d]` by token id.
    pub fn embed(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.rank2(table, "embed table")?;
        for &id in ids {
            if id >= v {
                return Err(MuseError::Data(format!("token id {id} out of vocabulary (size {v})")));
            }
        }
        let nt = self.check(table)?;
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            data.extend_from_slice(&nt.data[id * d..(id + 1) * d]);
        }
        let rg = nt.requires_grad;
        Ok(self.push(data, vec![ids.len(), d], rg, Op::Embed { table: table.id, ids: ids.to_vec() }))
    }

    /// Sum of all entries, as a `[1]`-shaped value.
    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let na = self.check(a)?;
        let s: Elem = na.data.iter().sum();
        let rg = na.requires_grad;
        Ok(self.push(vec![s], vec![1], rg, Op::SumAll { a: a.id }))
    }

    /// Pick entry `index` of a vector as a `[1]`-shaped value.
    pub fn index1(&mut self, a: Var, index: usize) -> Result<Var> {
        let na = self.check(a)?;
        if index >= na.data.len() {
            return Err(MuseError::Shape(format!(
                "index {index} out of range for length {}",
                na.data.len()
            )));
        }
        let v = na.data[index];
        let rg = na.requires_grad;
        Ok(self.push(vec![v], vec![1], rg, Op::Index1 { a: a.id, index }))
    }

    /// Label-smoothed cross entropy of `logits[n, v]` against `targets[n]`,
    /// averaged over rows whose target is not `ignore`.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        smoothing: Elem,
        ignore: Option<usize>,
    ) -> Result<Var> {
        let (n, v) = self.rank2(logits, "cross_entropy logits")?;
        if targets.len() != n {
            return Err(MuseError::Shape(format!(
                "cross_entropy: {} targets for {n} rows",
                targets.len()
            )));
        }
        for &t in targets {
            if t >= v {
                return Err(MuseError::Data(format!("target id {t} out of vocabulary (size {v})")));
            }
        }
        let active: usize = targets.iter().filter(|&&t| Some(t) != ignore).count();
        if active == 0 {
            return Err(MuseError::Usage("cross_entropy over an empty batch".into()));
        }
        let nl = self.check(logits)?;
        let mut total = 0.0;
        let vf = v as Elem;
        for (i, &t) in targets.iter().enumerate() {
            if Some(t) == ignore {
                continue;
            }
            let row = &nl.data[i * v..(i + 1) * v];
            let max = row.iter().cloned().fold(Elem::NEG_INFINITY, Elem::max);
            let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<Elem>().ln();
            let mean_logit = row.iter().sum::<Elem>() / vf;
            total += lse - (1.0 - smoothing) * row[t] - smoothing * mean_logit;
        }
        let loss = total / active as Elem;
        if !loss.is_finite() {
            return Err(MuseError::Numeric("non-finite cross-entropy loss".into()));
        }
        let rg = nl.requires_grad;
        Ok(self.push(
            vec![loss],
            vec![1],
            rg,
            Op::CrossEntropy { logits: logits.id, targets: targets.to_vec(), smoothing, ignore },
        ))
    }

    // ── Backward ────────────────────────────────────────────────────────

    /// Replay local gradient rules in reverse from a scalar loss.
    pub fn backward(&mut self, loss: Var) -> Result<Grads> {
        if loss.tag != self.tag {
            return Err(MuseError::Usage("loss Var belongs to a different tape".into()));
        }
        if self.consumed {
            return Err(MuseError::Usage("tape already consumed by a backward pass".into()));
        }
        if self.nodes[loss.id as usize].data.len() != 1 {
            return Err(MuseError::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.id as usize].shape
            )));
        }
        self.consumed = true;

        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<Elem>>> = vec![None; n];
        grads[loss.id as usize] = Some(vec![1.0]);

        for i in (0..=loss.id as usize).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.apply_backward(i, &g, &mut grads);
            grads[i] = Some(g);
        }

        Ok(Grads {
            grads,
            numels: self.nodes.iter().map(|n| n.data.len()).collect(),
            tag: self.tag,
        })
    }

    fn acc(&self, grads: &mut [Option<Vec<Elem>>], target: u32, update: impl FnOnce(&mut [Elem])) {
        let t = target as usize;
        if !self.nodes[t].requires_grad {
            return;
        }
        let slot = grads[t].get_or_insert_with(|| vec![0.0; self.nodes[t].data.len()]);
        update(slot);
    }

    fn apply_backward(&self, i: usize, g: &[Elem], grads: &mut [Option<Vec<Elem>>]) {
        match &self.nodes[i].op {
            Op::Leaf => {}

            Op::MatMul { a, b } => {
                let (m, k) = (self.nodes[*a as usize].shape[0], self.nodes[*a as usize].shape[1]);
                let n = self.nodes[*b as usize].shape[1];
                let a_data = &self.nodes[*a as usize].data;
                let b_data = &self.nodes[*b as usize].data;
                self.acc(grads, *a, |da| kernels::mm_nt_acc(g, b_data, m, n, k, da));
                self.acc(grads, *b, |db| kernels::mm_tn_acc(a_data, g, k, m, n, db));
            }

            Op::MatMulNt { a, b } => {
                let (m, k) = (self.nodes[*a as usize].shape[0], self.nodes[*a as usize].shape[1]);
                let n = self.nodes[*b as usize].shape[0];
                let a_data = &self.nodes[*a as usize].data;
                let b_data = &self.nodes[*b as usize].data;
                self.acc(grads, *a, |da| kernels::mm_acc(g, b_data, m, n, k, da));
                self.acc(grads, *b, |db| kernels::mm_tn_acc(g, a_data, n, m, k, db));
            }

            Op::Add { a, b } => {
                self.acc(grads, *a, |da| kernels::add_inplace(da, g));
                self.acc(grads, *b, |db| kernels::add_inplace(db, g));
            }

            Op::AddBias { a, bias } => {
                let d = self.nodes[*bias as usize].data.len();
                self.acc(grads, *a, |da| kernels::add_inplace(da, g));
                self.acc(grads, *bias, |db| {
                    for chunk in g.chunks_exact(d) {
                        kernels::add_inplace(db, chunk);
                    }
                });
            }

            Op::Mul { a, b } => {
                let a_data = &self.nodes[*a as usize].data;
                let b_data = &self.nodes[*b as usize].data;
                self.acc(grads, *a, |da| {
                    for ((o, &gv), &bv) in da.iter_mut().zip(g).zip(b_data) {
                        *o += gv * bv;
                    }
                });
                self.acc(grads, *b, |db| {
                    for ((o, &gv), &av) in db.iter_mut().zip(g).zip(a_data) {
                        *o += gv * av;
                    }
                });
            }

            Op::Scale { a, factor } => {
                let f = *factor;
                self.acc(grads, *a, |da| kernels::axpy(f, g, da));
            }

            Op::ScaleBy { a, s } => {
                let sv = self.nodes[*s as usize].data[0];
                let a_data = &self.nodes[*a as usize].data;
                self.acc(grads, *a, |da| kernels::axpy(sv, g, da));
                self.acc(grads, *s, |ds| ds[0] += kernels::dot(g, a_data));
            }

            Op::Relu { a } => {
                let a_data = &self.nodes[*a as usize].data;
                self.acc(grads, *a, |da| {
                    for ((o, &gv), &av) in da.iter_mut().zip(g).zip(a_data) {
                        if av > 0.0 {
                            *o += gv;
                        }
                    }
                });
            }

            Op::Softmax { a, axis } => {
                let out = &self.nodes[i].data;
                let (outer, len, inner) = axis_split(&self.nodes[i].shape, *axis);
                self.acc(grads, *a, |da| {
                    for o in 0..outer {
                        for ii in 0..inner {
                            let idx = |x: usize| o * len * inner + x * inner + ii;
                            let mut dotv = 0.0;
                            for x in 0..len {
                                dotv += g[idx(x)] * out[idx(x)];
                            }
                            for x in 0..len {
                                da[idx(x)] += out[idx(x)] * (g[idx(x)] - dotv);
                            }
                        }
                    }
                });
            }

            Op::LayerNorm { a, gain, bias, eps } => {
                let x = &self.nodes[*a as usize].data;
                let gdata = &self.nodes[*gain as usize].data;
                let d = gdata.len();
                let rows = x.len() / d;
                let df = d as Elem;

                // shared per-row statistics
                let mut xhat = vec![0.0; x.len()];
                let mut inv_std = vec![0.0; rows];
                for r in 0..rows {
                    let row = &x[r * d..(r + 1) * d];
                    let mean = row.iter().sum::<Elem>() / df;
                    let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<Elem>() / df;
                    let is = 1.0 / (var + eps).sqrt();
                    inv_std[r] = is;
                    for (xo, &v) in xhat[r * d..(r + 1) * d].iter_mut().zip(row) {
                        *xo = (v - mean) * is;
                    }
                }

                self.acc(grads, *gain, |dg| {
                    for r in 0..rows {
                        for j in 0..d {
                            dg[j] += g[r * d + j] * xhat[r * d + j];
                        }
                    }
                });
                self.acc(grads, *bias, |db| {
                    for chunk in g.chunks_exact(d) {
                        kernels::add_inplace(db, chunk);
                    }
                });
                self.acc(grads, *a, |da| {
                    let mut dxhat = vec![0.0; d];
                    for r in 0..rows {
                        let g_row = &g[r * d..(r + 1) * d];
                        let xh = &xhat[r * d..(r + 1) * d];
                        for j in 0..d {
                            dxhat[j] = g_row[j] * gdata[j];
                        }
                        let sum_dx: Elem = dxhat.iter().sum();
                        let sum_dx_xh: Elem = dxhat.iter().zip(xh).map(|(a, b)| a * b).sum();
                        let is = inv_std[r];
                        for j in 0..d {
                            da[r * d + j] +=
                                is / df * (df * dxhat[j] - sum_dx - xh[j] * sum_dx_xh);
                        }
                    }
                });
            }

            Op::MaskFill { a, mask } => {
                self.acc(grads, *a, |da| {
                    for ((o, &gv), &m) in da.iter_mut().zip(g).zip(mask) {
                        if !m {
                            *o += gv;
                        }
                    }
                });
            }

            Op::ZeroRows { a, rows } => {
                let d = self.nodes[i].shape[1];
                self.acc(grads, *a, |da| {
                    for (r, &z) in rows.iter().enumerate() {
                        if !z {
                            kernels::add_inplace(&mut da[r * d..(r + 1) * d], &g[r * d..(r + 1) * d]);
                        }
                    }
                });
            }

            Op::ShiftRows { a, delta } => {
                let n = self.nodes[i].shape[0];
                let d = self.nodes[i].shape[1];
                let delta = *delta;
                self.acc(grads, *a, |da| {
                    for r in 0..n {
                        let src = r as isize - delta;
                        if src >= 0 && (src as usize) < n {
                            let s = src as usize;
                            kernels::add_inplace(&mut da[s * d..(s + 1) * d], &g[r * d..(r + 1) * d]);
                        }
                    }
                });
            }

            Op::MulCol { a, col } => {
                let d = self.nodes[i].shape[1];
                let a_data = &self.nodes[*a as usize].data;
                let c_data = &self.nodes[*col as usize].data;
                self.acc(grads, *a, |da| {
                    for (r, &c) in c_data.iter().enumerate() {
                        kernels::axpy(c, &g[r * d..(r + 1) * d], &mut da[r * d..(r + 1) * d]);
                    }
                });
                self.acc(grads, *col, |dc| {
                    for (r, o) in dc.iter_mut().enumerate() {
                        *o += kernels::dot(&g[r * d..(r + 1) * d], &a_data[r * d..(r + 1) * d]);
                    }
                });
            }

            Op::MulRow { a, row } => {
                let d = self.nodes[i].shape[1];
                let n = self.nodes[i].shape[0];
                let a_data = &self.nodes[*a as usize].data;
                let r_data = &self.nodes[*row as usize].data;
                self.acc(grads, *a, |da| {
                    for r in 0..n {
                        for j in 0..d {
                            da[r * d + j] += g[r * d + j] * r_data[j];
                        }
                    }
                });
                self.acc(grads, *row, |dr| {
                    for r in 0..n {
                        for j in 0..d {
                            dr[j] += g[r * d + j] * a_data[r * d + j];
                        }
                    }
                });
            }

            Op::NarrowCols { a, start, len } => {
                let d = self.nodes[*a as usize].shape[1];
                let n = self.nodes[i].shape[0];
                self.acc(grads, *a, |da| {
                    for r in 0..n {
                        kernels::add_inplace(
                            &mut da[r * d + start..r * d + start + len],
                            &g[r * len..(r + 1) * len],
                        );
                    }
                });
            }

            Op::NarrowRows { a, start } => {
                let d = self.nodes[i].shape[1];
                let len = self.nodes[i].shape[0];
                self.acc(grads, *a, |da| {
                    kernels::add_inplace(&mut da[start * d..(start + len) * d], &g[..len * d]);
                });
            }

            Op::ConcatCols { parts } => {
                let total = self.nodes[i].shape[1];
                let n = self.nodes[i].shape[0];
                let mut offset = 0;
                for &p in parts {
                    let w = self.nodes[p as usize].shape[1];
                    self.acc(grads, p, |dp| {
                        for r in 0..n {
                            kernels::add_inplace(
                                &mut dp[r * w..(r + 1) * w],
                                &g[r * total + offset..r * total + offset + w],
                            );
                        }
                    });
                    offset += w;
                }
            }

            Op::Embed { table, ids } => {
                let d = self.nodes[i].shape[1];
                self.acc(grads, *table, |dt| {
                    for (r, &id) in ids.iter().enumerate() {
                        kernels::add_inplace(&mut dt[id * d..(id + 1) * d], &g[r * d..(r + 1) * d]);
                    }
                });
            }

            Op::SumAll { a } => {
                let gv = g[0];
                self.acc(grads, *a, |da| {
                    for o in da.iter_mut() {
                        *o += gv;
                    }
                });
            }

            Op::Index1 { a, index } => {
                let gv = g[0];
                let index = *index;
                self.acc(grads, *a, |da| da[index] += gv);
            }

            Op::CrossEntropy { logits, targets, smoothing, ignore } => {
                let v = self.nodes[*logits as usize].shape[1];
                let l_data = &self.nodes[*logits as usize].data;
                let active = targets.iter().filter(|&&t| Some(t) != *ignore).count() as Elem;
                let gv = g[0];
                let vf = v as Elem;
                self.acc(grads, *logits, |dl| {
                    for (r, &t) in targets.iter().enumerate() {
                        if Some(t) == *ignore {
                            continue;
                        }
                        let row = &l_data[r * v..(r + 1) * v];
                        let max = row.iter().cloned().fold(Elem::NEG_INFINITY, Elem::max);
                        let sum: Elem = row.iter().map(|&x| (x - max).exp()).sum();
                        for j in 0..v {
                            let p = (row[j] - max).exp() / sum;
                            let q = if j == t { 1.0 - smoothing } else { 0.0 } + smoothing / vf;
                            dl[r * v + j] += gv * (p - q) / active;
                        }
                    }
                });
            }
        }
    }
}

/// (outer, axis length, inner) factorization of a shape around `axis`.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn identity(n: usize) -> Vec<Elem> {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            data[i * n + i] = 1.0;
        }
        data
    }

    #[test]
    fn matmul_identity_is_exact() {
        let mut tape = Tape::new();
        let a = tape.constant(vec![1.0, 2.0, 3.0, 4.0], vec![2, 2]).unwrap();
        let eye = tape.constant(identity(2), vec![2, 2]).unwrap();
        let c = tape.matmul(a, eye).unwrap();
        assert_eq!(tape.data(c), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_hand_arithmetic() {
        let mut tape = Tape::new();
        let a = tape.constant(vec![1.0, 2.0, 3.0, 4.0], vec![2, 2]).unwrap();
        let b = tape.constant(vec![5.0, 6.0, 7.0, 8.0], vec![2, 2]).unwrap();
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.data(c), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_names_both_shapes_on_mismatch() {
        let mut tape = Tape::new();
        let a = tape.constant(vec![0.0; 6], vec![2, 3]).unwrap();
        let b = tape.constant(vec![0.0; 8], vec![2, 4]).unwrap();
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[2, 4]"), "{msg}");
    }

    #[test]
    fn softmax_symmetric_and_stable() {
        let mut tape = Tape::new();
        let x = tape.constant(vec![0.0, 0.0], vec![2]).unwrap();
        let s = tape.softmax(x, 0).unwrap();
        assert_eq!(tape.data(s), &[0.5, 0.5]);

        let big = tape.constant(vec![1000.0, 0.0], vec![2]).unwrap();
        let s = tape.softmax(big, 0).unwrap();
        assert!((tape.data(s)[0] - 1.0).abs() < 1e-12);
        assert!(tape.data(s)[1].abs() < 1e-12);
    }

    #[test]
    fn softmax_matches_direct_formula() {
        let x = vec![0.3, -1.2, 2.5, 0.0, 1.1];
        let mut tape = Tape::new();
        let v = tape.constant(x.clone(), vec![5]).unwrap();
        let s = tape.softmax(v, 0).unwrap();
        let sum: Elem = x.iter().map(|&a| a.exp()).sum();
        for (got, &xi) in tape.data(s).iter().zip(&x) {
            assert!((got - xi.exp() / sum).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_rejects_bad_axis() {
        let mut tape = Tape::new();
        let x = tape.constant(vec![0.0; 4], vec![2, 2]).unwrap();
        assert!(matches!(tape.softmax(x, 2), Err(MuseError::Shape(_))));
    }

    #[test]
    fn softmax_axis_zero_of_matrix() {
        let mut tape = Tape::new();
        let x = tape.constant(vec![1.0, 5.0, 1.0, 5.0], vec![2, 2]).unwrap();
        let s = tape.softmax(x, 0).unwrap();
        // columns are [1,1] and [5,5]: both normalize to 0.5
        assert!(tape.data(s).iter().all(|&v| (v - 0.5).abs() < 1e-12));
    }

    #[test]
    fn layer_norm_zero_variance_row() {
        let mut tape = Tape::new();
        let x = tape.constant(vec![5.0, 5.0, 5.0], vec![1, 3]).unwrap();
        let g = tape.constant(vec![1.0; 3], vec![3]).unwrap();
        let b = tape.constant(vec![0.0; 3], vec![3]).unwrap();
        let out = tape.layer_norm(x, g, b, 1e-5).unwrap();
        assert!(tape.data(out).iter().all(|&v| v.abs() < 1e-10));
    }

    #[test]
    fn layer_norm_standardized_row_is_fixed_point() {
        let mut tape = Tape::new();
        let x = tape.constant(vec![1.0, -1.0], vec![1, 2]).unwrap();
        let g = tape.constant(vec![1.0; 2], vec![2]).unwrap();
        let b = tape.constant(vec![0.0; 2], vec![2]).unwrap();
        let out = tape.layer_norm(x, g, b, 1e-12).unwrap();
        assert!((tape.data(out)[0] - 1.0).abs() < 1e-6);
        assert!((tape.data(out)[1] + 1.0).abs() < 1e-6);
    }

    #[test]
    fn layer_norm_matches_direct_formula() {
        let x = vec![0.4, -2.0, 3.3, 1.0];
        let eps = 1e-5;
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone(), vec![1, 4]).unwrap();
        let g = tape.constant(vec![2.0, 1.0, 0.5, -1.0], vec![4]).unwrap();
        let b = tape.constant(vec![0.1, 0.2, 0.3, 0.4], vec![4]).unwrap();
        let out = tape.layer_norm(xv, g, b, eps).unwrap();

        let mean: Elem = x.iter().sum::<Elem>() / 4.0;
        let var: Elem = x.iter().map(|&v| (v - mean) * (v - mean)).sum::<Elem>() / 4.0;
        let gains = [2.0, 1.0, 0.5, -1.0];
        let biases = [0.1, 0.2, 0.3, 0.4];
        for i in 0..4 {
            let want = (x[i] - mean) / (var + eps).sqrt() * gains[i] + biases[i];
            assert!((tape.data(out)[i] - want).abs() < 1e-10);
        }
    }

    #[test]
    fn layer_norm_rejects_width_mismatch() {
        let mut tape = Tape::new();
        let x = tape.constant(vec![0.0; 4], vec![2, 2]).unwrap();
        let g = tape.constant(vec![1.0; 3], vec![3]).unwrap();
        let b = tape.constant(vec![0.0; 2], vec![2]).unwrap();
        assert!(matches!(tape.layer_norm(x, g, b, 1e-5), Err(MuseError::Shape(_))));
    }

    #[test]
    fn relu_clamps_and_subgradient_at_zero_is_zero() {
        let mut tape = Tape::new();
        let x = Tensor::new(vec![3], vec![-1.0, 0.0, 2.0]).unwrap().with_grad();
        let xv = tape.leaf(&x);
        let r = tape.relu(xv).unwrap();
        assert_eq!(tape.data(r), &[0.0, 0.0, 2.0]);
        let loss = tape.sum_all(r).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.of(xv), vec![0.0, 0.0, 1.0]);
    }

    #[test]
    fn relu_all_negative_gives_zeros() {
        let mut tape = Tape::new();
        let x = tape.constant(vec![-3.0, -0.5, -1e9], vec![3]).unwrap();
        let r = tape.relu(x).unwrap();
        assert!(tape.data(r).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn backward_of_linear_map_gives_row_sums() {
        // loss = sum(X · W) with W fixed: dX[i,j] = sum_k W[j,k]
        let mut tape = Tape::new();
        let x = Tensor::new(vec![2, 2], vec![0.3, -0.7, 1.5, 0.2]).unwrap().with_grad();
        let xv = tape.leaf(&x);
        let w = tape.constant(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], vec![2, 3]).unwrap();
        let y = tape.matmul(xv, w).unwrap();
        let loss = tape.sum_all(y).unwrap();
        let grads = tape.backward(loss).unwrap();
        let gx = grads.of(xv);
        for i in 0..2 {
            assert!((gx[i * 2] - 6.0).abs() < 1e-12);
            assert!((gx[i * 2 + 1] - 15.0).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_rejects_non_scalar_loss_and_double_consume() {
        let mut tape = Tape::new();
        let x = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap().with_grad();
        let xv = tape.leaf(&x);
        assert!(matches!(tape.backward(xv), Err(MuseError::Usage(_))));

        let mut tape = Tape::new();
        let xv = tape.leaf(&x);
        let loss = tape.sum_all(xv).unwrap();
        tape.backward(loss).unwrap();
        assert!(matches!(tape.backward(loss), Err(MuseError::Usage(_))));
    }

    #[test]
    fn shift_rows_moves_and_zero_pads() {
        let mut tape = Tape::new();
        let x = tape
            .constant(vec![1.0, 1.0, 2.0, 2.0, 3.0, 3.0], vec![3, 2])
            .unwrap();
        // delta = 1: row i reads row i-1
        let s = tape.shift_rows(x, 1).unwrap();
        assert_eq!(tape.data(s), &[0.0, 0.0, 1.0, 1.0, 2.0, 2.0]);
        let s = tape.shift_rows(x, -1).unwrap();
        assert_eq!(tape.data(s), &[2.0, 2.0, 3.0, 3.0, 0.0, 0.0]);
    }

    #[test]
    fn embed_rejects_out_of_vocab() {
        let mut tape = Tape::new();
        let table = tape.constant(vec![0.0; 6], vec![3, 2]).unwrap();
        assert!(matches!(tape.embed(table, &[0, 3]), Err(MuseError::Data(_))));
    }

    #[test]
    fn cross_entropy_uniform_logits_equals_ln_vocab() {
        let v = 7;
        let mut tape = Tape::new();
        let logits = tape.constant(vec![0.0; 2 * v], vec![2, v]).unwrap();
        let loss = tape.cross_entropy(logits, &[3, 5], 0.0, None).unwrap();
        assert!((tape.data(loss)[0] - (v as Elem).ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_peaked_logits_approach_zero() {
        let mut tape = Tape::new();
        let mut row = vec![0.0; 4];
        row[1] = 100.0;
        let logits = tape.constant(row, vec![1, 4]).unwrap();
        let loss = tape.cross_entropy(logits, &[1], 0.0, None).unwrap();
        assert!(tape.data(loss)[0] < 1e-12);
    }

    #[test]
    fn cross_entropy_empty_batch_is_usage_error() {
        let mut tape = Tape::new();
        let logits = tape.constant(vec![0.0; 4], vec![2, 2]).unwrap();
        assert!(matches!(
            tape.cross_entropy(logits, &[0, 0], 0.0, Some(0)),
            Err(MuseError::Usage(_))
        ));
    }

    #[test]
    fn vars_do_not_cross_tapes() {
        let mut t1 = Tape::new();
        let mut t2 = Tape::new();
        let a = t1.constant(vec![1.0], vec![1]).unwrap();
        let b = t2.constant(vec![1.0], vec![1]).unwrap();
        assert!(t1.add(a, b).is_err());
    }
}
