//! Plain slice kernels behind the tape operations. All matrices are row-major.

/// `c[m×n] = a[m×k] · b[k×n]`
///
/// On x86-64 machines with AVX2 the same kernel is compiled for wider
/// registers. Fused multiply-add stays off, so both builds round every
/// product and sum identically.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("avx2") {
        // SAFETY: the feature was detected at runtime.
        return unsafe { matmul_avx2(a, b, m, k, n) };
    }
    matmul_portable(a, b, m, k, n)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn matmul_avx2(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    matmul_body(a, b, m, k, n)
}

fn matmul_portable(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    matmul_body(a, b, m, k, n)
}

/// Columns of `b` are packed into zero-padded panels `NR` wide and rows of
/// `a` are taken `MR` at a time, so each output block accumulates in
/// registers over the whole reduction.
#[inline(always)]
fn matmul_body(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    const MR: usize = 4;
    const NR: usize = 8;
    let mut c = vec![0.0; m * n];
    if k == 0 {
        return c;
    }
    let mut panel = vec![0.0; k * NR];
    let full = m - m % MR;
    for j in (0..n).step_by(NR) {
        let w = NR.min(n - j);
        for (dst, src) in panel.chunks_exact_mut(NR).zip(b.chunks_exact(n)) {
            dst[..w].copy_from_slice(&src[j..j + w]);
        }
        for i in (0..full).step_by(MR) {
            let rows = &a[i * k..(i + MR) * k];
            let (a0, rest) = rows.split_at(k);
            let (a1, rest) = rest.split_at(k);
            let (a2, a3) = rest.split_at(k);
            let mut acc = [[0.0f64; NR]; MR];
            for ((((bt, &x0), &x1), &x2), &x3) in
                panel.chunks_exact(NR).zip(a0).zip(a1).zip(a2).zip(a3)
            {
                for t in 0..NR {
                    acc[0][t] += x0 * bt[t];
                    acc[1][t] += x1 * bt[t];
                    acc[2][t] += x2 * bt[t];
                    acc[3][t] += x3 * bt[t];
                }
            }
            for (r, acc) in acc.iter().enumerate() {
                let o = (i + r) * n + j;
                c[o..o + w].copy_from_slice(&acc[..w]);
            }
        }
        for i in full..m {
            let mut acc = [0.0f64; NR];
            for (bt, &x) in panel.chunks_exact(NR).zip(&a[i * k..(i + 1) * k]) {
                for t in 0..NR {
                    acc[t] += x * bt[t];
                }
            }
            c[i * n + j..i * n + j + w].copy_from_slice(&acc[..w]);
        }
    }
    c
}

/// `c[m×n] = a[m×k] · b[n×k]ᵀ`, via an explicit transpose of `b` so the
/// inner loop runs over contiguous rows.
pub fn matmul_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut bt = vec![0.0; k * n];
    for j in 0..n {
        for (p, &v) in b[j * k..(j + 1) * k].iter().enumerate() {
            bt[p * n + j] = v;
        }
    }
    matmul(a, &bt, m, k, n)
}

/// `c[m×n] = a[k×m]ᵀ · b[k×n]`, via an explicit transpose of `a`.
pub fn matmul_tn(a: &[f64], b: &[f64], k: usize, m: usize, n: usize) -> Vec<f64> {
    let mut at = vec![0.0; m * k];
    for (p, row) in a.chunks_exact(m.max(1)).take(k).enumerate() {
        for (i, &v) in row.iter().enumerate() {
            at[i * k + p] = v;
        }
    }
    matmul(&at, b, m, k, n)
}

/// Dot product with four interleaved accumulators (fixed summation order).
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = c * 4;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut tail = 0.0;
    for i in chunks * 4..a.len() {
        tail += a[i] * b[i];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

pub fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(x: &[f64], cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (row, out_row) in x.chunks_exact(cols).zip(out.chunks_exact_mut(cols)) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (o, &v) in out_row.iter_mut().zip(row) {
            *o = (v - max).exp();
            sum += *o;
        }
        let inv = 1.0 / sum;
        for o in out_row.iter_mut() {
            *o *= inv;
        }
    }
    out
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2))
}

/// `gelu(x)` and its derivative from a single `erf` evaluation.
pub fn gelu_with_derivative(x: f64) -> (f64, f64) {
    let e = libm::erf(x * std::f64::consts::FRAC_1_SQRT_2);
    let cdf = 0.5 * (1.0 + e);
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    (0.5 * x * (1.0 + e), cdf + x * pdf)
}

pub fn gelu_derivative(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    fn transpose(a: &[f64], r: usize, c: usize) -> Vec<f64> {
        let mut t = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                t[j * r + i] = a[i * c + j];
            }
        }
        t
    }

    #[test]
    fn blocked_product_matches_naive_order_bitwise() {
        for (m, k, n) in [
            (1, 1, 1),
            (3, 5, 4),
            (4, 7, 8),
            (9, 3, 17),
            (65, 64, 256),
            (2, 0, 3),
            (0, 4, 2),
        ] {
            let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
            let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.91).cos()).collect();
            let want = naive(&a, &b, m, k, n);
            let got = matmul(&a, &b, m, k, n);
            assert!(
                want.iter()
                    .zip(&got)
                    .all(|(x, y)| x.to_bits() == y.to_bits()),
                "{m}×{k}×{n}"
            );
            assert_eq!(got.len(), m * n);
            #[cfg(target_arch = "x86_64")]
            if std::arch::is_x86_feature_detected!("avx2") {
                let wide = unsafe { matmul_avx2(&a, &b, m, k, n) };
                let narrow = matmul_portable(&a, &b, m, k, n);
                assert!(wide
                    .iter()
                    .zip(&narrow)
                    .all(|(x, y)| x.to_bits() == y.to_bits()));
            }
        }
    }

    #[test]
    fn fused_gelu_matches_separate_evaluations() {
        for i in -40..=40 {
            let x = i as f64 * 0.173;
            let (v, d) = gelu_with_derivative(x);
            assert_eq!(v.to_bits(), gelu(x).to_bits());
            assert_eq!(d.to_bits(), gelu_derivative(x).to_bits());
        }
    }

    #[test]
    fn transposed_variants_agree_with_plain_product() {
        let (m, k, n) = (3, 5, 4);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.91).cos()).collect();
        let want = naive(&a, &b, m, k, n);
        let nt = matmul_nt(&a, &transpose(&b, k, n), m, k, n);
        let tn = matmul_tn(&transpose(&a, m, k), &b, k, m, n);
        for ((w, x), y) in want.iter().zip(&nt).zip(&tn) {
            assert!((w - x).abs() < 1e-12);
            assert!((w - y).abs() < 1e-12);
        }
    }

    #[test]
    fn dot_handles_tails() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0];
        assert_eq!(dot(&a, &a), 140.0);
    }
}
