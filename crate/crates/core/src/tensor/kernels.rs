//! Raw kernels behind the tape ops. Everything here works on flat slices.

/// `c = a * b + beta * c` for row-major `a: m x k`, `b: k x n`, with
/// explicit strides so transposed operands need no copy.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(c.len() >= m * n);
    if k == 0 {
        c[..m * n].iter_mut().for_each(|x| *x *= beta);
        return;
    }
    // SAFETY: callers pass slices whose extents match (m, k, n) under the
    // given strides; `c` is contiguous row-major m x n.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub(crate) const ROW: fn(usize) -> (isize, isize) = |cols| (cols as isize, 1);
pub(crate) const TRANS: fn(usize) -> (isize, isize) = |cols| (1, cols as isize);

/// Shape parameters for multi-head scaled dot-product attention over a
/// batch of left-padded sequences.
///
/// Keys and values hold `seq_len` rows per sequence. Queries hold
/// `query_len <= seq_len` rows per sequence, aligned with the *last*
/// `query_len` key positions; `query_len = 1` computes only the readout
/// position. Query position `p` may attend key `j` iff `j <= p` and key `j`
/// is not padding. A query with no admissible key produces a zero vector.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionSpec {
    pub heads: usize,
    pub seq_len: usize,
    pub query_len: usize,
    /// `true` marks a padding key; length `batch * seq_len`.
    pub key_pad: Vec<bool>,
    pub dropout: f64,
    pub train: bool,
}

impl AttentionSpec {
    pub(crate) fn batch(&self) -> usize {
        self.key_pad.len() / self.seq_len.max(1)
    }
}

/// Attention probabilities laid out as `[batch][head][query][key]`.
///
/// Entries for inadmissible keys (future positions or padding) are exactly
/// zero.
pub fn attention_probs(q: &[f64], k: &[f64], dim: usize, spec: &AttentionSpec) -> Vec<f64> {
    let (t, tq, heads) = (spec.seq_len, spec.query_len, spec.heads);
    let dh = dim / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let batch = spec.batch();
    let mut probs = vec![0.0; batch * heads * tq * t];
    let mut scores = vec![0.0; t];
    for n in 0..batch {
        for h in 0..heads {
            for i in 0..tq {
                let pos = t - tq + i;
                let qrow = &q[(n * tq + i) * dim + h * dh..][..dh];
                let mut max = f64::NEG_INFINITY;
                for j in 0..=pos {
                    if spec.key_pad[n * t + j] {
                        continue;
                    }
                    let krow = &k[(n * t + j) * dim + h * dh..][..dh];
                    let s = dot(qrow, krow) * scale;
                    scores[j] = s;
                    max = max.max(s);
                }
                if max == f64::NEG_INFINITY {
                    continue;
                }
                let out = &mut probs[((n * heads + h) * tq + i) * t..][..t];
                let mut total = 0.0;
                for j in 0..=pos {
                    if spec.key_pad[n * t + j] {
                        continue;
                    }
                    let e = (scores[j] - max).exp();
                    out[j] = e;
                    total += e;
                }
                out[..=pos].iter_mut().for_each(|x| *x /= total);
            }
        }
    }
    probs
}

/// `out[n, i] = sum_j w[n, h, i, j] * v[n, j]` per head.
pub(crate) fn attention_apply(w: &[f64], v: &[f64], dim: usize, spec: &AttentionSpec) -> Vec<f64> {
    let (t, tq, heads) = (spec.seq_len, spec.query_len, spec.heads);
    let dh = dim / heads;
    let batch = spec.batch();
    let mut out = vec![0.0; batch * tq * dim];
    for n in 0..batch {
        for h in 0..heads {
            for i in 0..tq {
                let wrow = &w[((n * heads + h) * tq + i) * t..][..t];
                let orow = &mut out[(n * tq + i) * dim + h * dh..][..dh];
                for (j, &wij) in wrow.iter().enumerate() {
                    if wij == 0.0 {
                        continue;
                    }
                    let vrow = &v[(n * t + j) * dim + h * dh..][..dh];
                    orow.iter_mut().zip(vrow).for_each(|(o, x)| *o += wij * x);
                }
            }
        }
    }
    out
}

/// Backward pass of attention given the saved probabilities `probs` and the
/// optional dropout multiplier `keep` (0 or `1 / (1 - p)` per weight).
#[allow(clippy::too_many_arguments)]
pub(crate) fn attention_backward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    dim: usize,
    spec: &AttentionSpec,
    probs: &[f64],
    keep: Option<&[f64]>,
    dout: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (t, tq, heads) = (spec.seq_len, spec.query_len, spec.heads);
    let dh = dim / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let batch = spec.batch();
    let mut dq = vec![0.0; q.len()];
    let mut dk = vec![0.0; k.len()];
    let mut dv = vec![0.0; v.len()];
    let mut dw = vec![0.0; t];
    for n in 0..batch {
        for h in 0..heads {
            for i in 0..tq {
                let pos = t - tq + i;
                let base = ((n * heads + h) * tq + i) * t;
                let prow = &probs[base..base + t];
                let drow = &dout[(n * tq + i) * dim + h * dh..][..dh];
                // Gradient w.r.t. the (post-dropout) weights, folded back
                // through the dropout multiplier.
                let mut inner = 0.0;
                for j in 0..=pos {
                    if spec.key_pad[n * t + j] {
                        dw[j] = 0.0;
                        continue;
                    }
                    let mult = keep.map_or(1.0, |kp| kp[base + j]);
                    let vrow = &v[(n * t + j) * dim + h * dh..][..dh];
                    let g = dot(drow, vrow) * mult;
                    dw[j] = g;
                    inner += prow[j] * g;
                    let wj = prow[j] * mult;
                    if wj != 0.0 {
                        let dvrow = &mut dv[(n * t + j) * dim + h * dh..][..dh];
                        dvrow.iter_mut().zip(drow).for_each(|(a, b)| *a += wj * b);
                    }
                }
                let qrow = &q[(n * tq + i) * dim + h * dh..][..dh];
                for j in 0..=pos {
                    let ds = prow[j] * (dw[j] - inner) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    let krow = &k[(n * t + j) * dim + h * dh..][..dh];
                    let dqrow = &mut dq[(n * tq + i) * dim + h * dh..][..dh];
                    dqrow.iter_mut().zip(krow).for_each(|(a, b)| *a += ds * b);
                    let dkrow = &mut dk[(n * t + j) * dim + h * dh..][..dh];
                    dkrow.iter_mut().zip(qrow).for_each(|(a, b)| *a += ds * b);
                }
            }
        }
    }
    (dq, dk, dv)
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_transposed_operand() {
        // a = [[1,2],[3,4]], b stored as [[5,6],[7,8]] used transposed.
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut c = [0.0; 4];
        gemm(2, 2, 2, &a, ROW(2), &b, TRANS(2), 0.0, &mut c);
        assert_eq!(c, [17.0, 23.0, 39.0, 53.0]);
    }

    #[test]
    fn causal_and_padding_entries_are_zero() {
        let spec = AttentionSpec {
            heads: 1,
            seq_len: 3,
            query_len: 3,
            key_pad: vec![true, false, false],
            dropout: 0.0,
            train: false,
        };
        let q = [0.3, -0.1, 0.2, 0.5, 0.7, 0.1];
        let k = [0.9, 0.4, -0.3, 0.2, 0.6, 0.8];
        let p = attention_probs(&q, &k, 2, &spec);
        // Row 0 is a padding query: nothing admissible.
        assert_eq!(&p[0..3], &[0.0, 0.0, 0.0]);
        // Row 1 may only see key 1.
        assert_eq!(&p[3..6], &[0.0, 1.0, 0.0]);
        assert_eq!(p[6], 0.0);
        assert!((p[7] + p[8] - 1.0).abs() < 1e-15);
    }
}
