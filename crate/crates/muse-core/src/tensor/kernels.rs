//! Raw numeric kernels over flat row-major slices.
//!
//! Every matrix product in the crate — tape forward passes, tape backward
//! rules, and the tape-free inference paths — goes through these functions, so
//! the fused and unfused execution paths share one source of arithmetic truth.

use super::Elem;

/// out[m,n] = a[m,k] · b[k,n], overwriting `out`.
pub fn mm(a: &[Elem], b: &[Elem], m: usize, k: usize, n: usize, out: &mut [Elem]) {
    out[..m * n].fill(0.0);
    mm_acc(a, b, m, k, n, out);
}

/// out[m,n] += a[m,k] · b[k,n].
pub fn mm_acc(a: &[Elem], b: &[Elem], m: usize, k: usize, n: usize, out: &mut [Elem]) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && out.len() >= m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let o_row = &mut out[i * n..(i + 1) * n];
        for (p, &ap) in a_row.iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in o_row.iter_mut().zip(b_row) {
                *o += ap * bv;
            }
        }
    }
}

/// out[m,n] = a[m,k] · b[n,k]ᵀ, overwriting `out`.
pub fn mm_nt(a: &[Elem], b: &[Elem], m: usize, k: usize, n: usize, out: &mut [Elem]) {
    out[..m * n].fill(0.0);
    mm_nt_acc(a, b, m, k, n, out);
}

/// out[m,n] += a[m,k] · b[n,k]ᵀ.
pub fn mm_nt_acc(a: &[Elem], b: &[Elem], m: usize, k: usize, n: usize, out: &mut [Elem]) {
    debug_assert!(a.len() >= m * k && b.len() >= n * k && out.len() >= m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let o_row = &mut out[i * n..(i + 1) * n];
        for (j, o) in o_row.iter_mut().enumerate() {
            *o += dot(a_row, &b[j * k..(j + 1) * k]);
        }
    }
}

/// out[m,n] += a[k,m]ᵀ · b[k,n].
pub fn mm_tn_acc(a: &[Elem], b: &[Elem], m: usize, k: usize, n: usize, out: &mut [Elem]) {
    debug_assert!(a.len() >= k * m && b.len() >= k * n && out.len() >= m * n);
    for p in 0..k {
        let a_row = &a[p * m..(p + 1) * m];
        let b_row = &b[p * n..(p + 1) * n];
        for (i, &av) in a_row.iter().enumerate() {
            let o_row = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in o_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

/// Dot product with four accumulators; faster than the naive chain and a
/// fixed, deterministic summation order.
pub fn dot(a: &[Elem], b: &[Elem]) -> Elem {
    debug_assert_eq!(a.len(), b.len());
    let chunks = a.len() / 4;
    let (mut s0, mut s1, mut s2, mut s3) = (0.0, 0.0, 0.0, 0.0);
    for c in 0..chunks {
        let i = c * 4;
        s0 += a[i] * b[i];
        s1 += a[i + 1] * b[i + 1];
        s2 += a[i + 2] * b[i + 2];
        s3 += a[i + 3] * b[i + 3];
    }
    let mut s = (s0 + s1) + (s2 + s3);
    for i in chunks * 4..a.len() {
        s += a[i] * b[i];
    }
    s
}

/// axpy: out += s * x.
pub fn axpy(s: Elem, x: &[Elem], out: &mut [Elem]) {
    debug_assert_eq!(x.len(), out.len());
    for (o, &xv) in out.iter_mut().zip(x) {
        *o += s * xv;
    }
}

/// Numerically stabilized softmax of one contiguous slice, in place.
/// `-inf` entries come out as exact zeros.
pub fn softmax_inplace(row: &mut [Elem]) {
    let max = row.iter().cloned().fold(Elem::NEG_INFINITY, Elem::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// log-softmax of one contiguous slice into `out`.
pub fn log_softmax(row: &[Elem], out: &mut [Elem]) {
    let max = row.iter().cloned().fold(Elem::NEG_INFINITY, Elem::max);
    let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<Elem>().ln();
    for (o, &v) in out.iter_mut().zip(row) {
        *o = v - lse;
    }
}

/// Layer-normalize one row: zero mean, unit variance over the row, then
/// scale by `gain` and shift by `bias`.
pub fn layer_norm_row(row: &[Elem], gain: &[Elem], bias: &[Elem], eps: Elem, out: &mut [Elem]) {
    let d = row.len() as Elem;
    let mean = row.iter().sum::<Elem>() / d;
    let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<Elem>() / d;
    let inv_std = 1.0 / (var + eps).sqrt();
    for ((o, &v), (&g, &b)) in out.iter_mut().zip(row).zip(gain.iter().zip(bias)) {
        *o = (v - mean) * inv_std * g + b;
    }
}

pub fn relu_inplace(x: &mut [Elem]) {
    for v in x.iter_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

pub fn add_inplace(out: &mut [Elem], rhs: &[Elem]) {
    debug_assert_eq!(out.len(), rhs.len());
    for (o, &r) in out.iter_mut().zip(rhs) {
        *o += r;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    // Independent oracle: literal three-loop definition in j-major order,
    // deliberately different from the kernel's loop structure.
    fn mm_oracle(a: &[Elem], b: &[Elem], m: usize, k: usize, n: usize) -> Vec<Elem> {
        let mut out = vec![0.0; m * n];
        for j in 0..n {
            for i in 0..m {
                let mut s = 0.0;
                for p in 0..k {
                    s += a[i * k + p] * b[p * n + j];
                }
                out[i * n + j] = s;
            }
        }
        out
    }

    fn lcg_fill(seed: &mut u64, buf: &mut [Elem]) {
        for v in buf.iter_mut() {
            *seed = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            *v = ((*seed >> 33) as Elem) / ((1u64 << 31) as Elem) - 1.0;
        }
    }

    #[test]
    fn mm_matches_triple_loop_oracle() {
        let (m, k, n) = (4, 3, 5);
        let mut seed = 7;
        let mut a = vec![0.0; m * k];
        let mut b = vec![0.0; k * n];
        lcg_fill(&mut seed, &mut a);
        lcg_fill(&mut seed, &mut b);
        let mut out = vec![0.0; m * n];
        mm(&a, &b, m, k, n, &mut out);
        let want = mm_oracle(&a, &b, m, k, n);
        for (got, want) in out.iter().zip(&want) {
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
    }

    #[test]
    fn mm_nt_and_tn_match_oracle() {
        let (m, k, n) = (3, 6, 4);
        let mut seed = 99;
        let mut a = vec![0.0; m * k];
        let mut bt = vec![0.0; n * k]; // b stored transposed
        lcg_fill(&mut seed, &mut a);
        lcg_fill(&mut seed, &mut bt);
        // materialize b for the oracle
        let mut b = vec![0.0; k * n];
        for j in 0..n {
            for p in 0..k {
                b[p * n + j] = bt[j * k + p];
            }
        }
        let want = mm_oracle(&a, &b, m, k, n);
        let mut out = vec![0.0; m * n];
        mm_nt(&a, &bt, m, k, n, &mut out);
        for (got, want) in out.iter().zip(&want) {
            assert!((got - want).abs() < 1e-12);
        }
        // aᵀ·b with a stored as [k,m]
        let mut at = vec![0.0; k * m];
        for i in 0..m {
            for p in 0..k {
                at[p * m + i] = a[i * k + p];
            }
        }
        let mut out2 = vec![0.0; m * n];
        mm_tn_acc(&at, &b, m, k, n, &mut out2);
        for (got, want) in out2.iter().zip(&want) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_handles_neg_infinity() {
        let mut row = vec![0.0, Elem::NEG_INFINITY, 0.0];
        softmax_inplace(&mut row);
        assert_eq!(row[1], 0.0);
        assert!((row[0] - 0.5).abs() < 1e-15);
    }
}
