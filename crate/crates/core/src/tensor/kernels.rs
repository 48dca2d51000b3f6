// Raw slice kernels. Shapes are checked by the callers in graph.rs.

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Row/column strides of a matrix view.
#[derive(Clone, Copy)]
struct View(usize, usize);

impl View {
    fn span(self, rows: usize, cols: usize) -> usize {
        if rows == 0 || cols == 0 {
            0
        } else {
            (rows - 1) * self.0 + (cols - 1) * self.1 + 1
        }
    }
}

/// c = alpha·a·b + beta·c over strided views, via the blocked gemm in `matrixmultiply`.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, alpha: f64, a: &[f64], va: View, b: &[f64], vb: View, beta: f64, c: &mut [f64], vc: View) {
    assert!(a.len() >= va.span(m, k) && b.len() >= vb.span(k, n) && c.len() >= vc.span(m, n));
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: the asserted spans cover every element reachable through the
    // strides, and `c` is uniquely borrowed.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            va.0 as isize,
            va.1 as isize,
            b.as_ptr(),
            vb.0 as isize,
            vb.1 as isize,
            beta,
            c.as_mut_ptr(),
            vc.0 as isize,
            vc.1 as isize,
        );
    }
}

/// c[m×n] += a[m×k] · b[k×n]
pub(crate) fn matmul_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    gemm(m, k, n, 1.0, a, View(k, 1), b, View(n, 1), 1.0, c, View(n, 1));
}

/// c[m×n] += a[m×k] · b[n×k]ᵀ
pub(crate) fn matmul_bt_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    gemm(m, k, n, 1.0, a, View(k, 1), b, View(1, k), 1.0, c, View(n, 1));
}

/// c[k×n] += a[m×k]ᵀ · b[m×n]
pub(crate) fn matmul_at_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    gemm(k, m, n, 1.0, a, View(1, k), b, View(n, 1), 1.0, c, View(n, 1));
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = c * 4;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in chunks * 4..a.len() {
        s += a[i] * b[i];
    }
    s
}

/// In-place numerically stable softmax of one row.
pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    let inv = 1.0 / sum;
    for x in row.iter_mut() {
        *x *= inv;
    }
}

/// log-sum-exp of one row with max subtraction.
pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = row.iter().map(|x| (x - max).exp()).sum();
    max + s.ln()
}

/// tanh-approximated GELU.
pub fn gelu_scalar(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * x * (1.0 + t)
}

pub fn gelu_grad_scalar(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// Causal multi-head attention. Heads are contiguous column blocks of width
/// `d / heads`; query row `i` sees key rows `0..=i + offset`. When `probs` is
/// given it receives the `heads × t × s` attention weights (zero where masked).
#[allow(clippy::too_many_arguments)]
pub(crate) fn attention_forward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    out: &mut [f64],
    probs: Option<&mut [f64]>,
    t: usize,
    s: usize,
    d: usize,
    heads: usize,
    offset: usize,
) {
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut local = Vec::new();
    let all = match probs {
        Some(p) => p,
        None => {
            local.resize(heads * t * s, 0.0);
            &mut local[..]
        }
    };
    let rows = View(d, 1);
    for h in 0..heads {
        let c0 = h * dh;
        let p = &mut all[h * t * s..(h + 1) * t * s];
        gemm(t, dh, s, scale, &q[c0..], rows, &k[c0..], View(1, d), 0.0, p, View(s, 1));
        for i in 0..t {
            let limit = (i + offset + 1).min(s);
            let row = &mut p[i * s..(i + 1) * s];
            softmax_in_place(&mut row[..limit]);
            row[limit..].fill(0.0);
        }
        gemm(t, s, dh, 1.0, p, View(s, 1), &v[c0..], rows, 1.0, &mut out[c0..], rows);
    }
}

/// Backward of [`attention_forward`]; accumulates into the optional gradient buffers.
#[allow(clippy::too_many_arguments)]
pub(crate) fn attention_backward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    probs: &[f64],
    dout: &[f64],
    mut dq: Option<&mut [f64]>,
    mut dk: Option<&mut [f64]>,
    mut dv: Option<&mut [f64]>,
    t: usize,
    s: usize,
    d: usize,
    heads: usize,
    offset: usize,
) {
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let rows = View(d, 1);
    let mut ds = vec![0.0; t * s];
    for h in 0..heads {
        let c0 = h * dh;
        let p = &probs[h * t * s..(h + 1) * t * s];
        let dout_h = &dout[c0..];
        if let Some(dv) = dv.as_deref_mut() {
            gemm(s, t, dh, 1.0, p, View(1, s), dout_h, rows, 1.0, &mut dv[c0..], rows);
        }
        if dq.is_none() && dk.is_none() {
            continue;
        }
        gemm(t, dh, s, 1.0, dout_h, rows, &v[c0..], View(1, d), 0.0, &mut ds, View(s, 1));
        for i in 0..t {
            let limit = (i + offset + 1).min(s);
            let pr = &p[i * s..i * s + limit];
            let row = &mut ds[i * s..(i + 1) * s];
            let inner = dot(&row[..limit], pr);
            for (x, &pj) in row[..limit].iter_mut().zip(pr) {
                *x = pj * (*x - inner) * scale;
            }
            row[limit..].fill(0.0);
        }
        if let Some(dq) = dq.as_deref_mut() {
            gemm(t, s, dh, 1.0, &ds, View(s, 1), &k[c0..], rows, 1.0, &mut dq[c0..], rows);
        }
        if let Some(dk) = dk.as_deref_mut() {
            gemm(s, t, dh, 1.0, &ds, View(1, s), &q[c0..], rows, 1.0, &mut dk[c0..], rows);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_variants_agree() {
        let a: Vec<f64> = (0..6).map(|x| x as f64 * 0.5 - 1.0).collect(); // 2×3
        let b: Vec<f64> = (0..12).map(|x| (x as f64).sin()).collect(); // 3×4
        let mut c = vec![0.0; 8];
        matmul_acc(&a, &b, &mut c, 2, 3, 4);
        // bᵀ stored as 4×3
        let mut bt = vec![0.0; 12];
        for p in 0..3 {
            for j in 0..4 {
                bt[j * 3 + p] = b[p * 4 + j];
            }
        }
        let mut c2 = vec![0.0; 8];
        matmul_bt_acc(&a, &bt, &mut c2, 2, 3, 4);
        for (x, y) in c.iter().zip(&c2) {
            assert!((x - y).abs() < 1e-14);
        }
        // aᵀ·c with a as 2×3 → 3×4
        let mut at = vec![0.0; 12];
        matmul_at_acc(&a, &c, &mut at, 2, 3, 4);
        let mut manual = vec![0.0; 12];
        for p in 0..3 {
            for j in 0..4 {
                manual[p * 4 + j] = (0..2).map(|i| a[i * 3 + p] * c[i * 4 + j]).sum();
            }
        }
        for (x, y) in at.iter().zip(&manual) {
            assert!((x - y).abs() < 1e-14);
        }
    }

    #[test]
    fn dot_handles_tails() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0];
        assert_eq!(dot(&a, &a), 140.0);
    }
}
