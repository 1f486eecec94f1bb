//! Blocked matrix-multiply kernel with a fixed accumulation order.
//!
//! Every output element is accumulated in ascending-k order with plain
//! multiply-then-add rounding (no FMA contraction), so the result is
//! bit-identical to the textbook triple loop, independent of blocking,
//! thread count, or batch partitioning. Certification depends on runs being
//! reproducible, so the kernel trades roughly half of peak FLOPs for that
//! guarantee.

use rayon::prelude::*;

/// k-panel height; keeps the active slice of `b` cache-resident.
const KC: usize = 256;
/// Microkernel tile width in output columns.
const NR: usize = 16;
/// Work threshold (in multiply-adds) above which tasks go to the thread pool.
const PAR_THRESHOLD: usize = 4_000_000;

/// `c[m x n] += a[m x k] · b[k x n]`, all row-major.
pub fn gemm_acc(c: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    assert_eq!(c.len(), m * n, "gemm: output buffer size");
    assert_eq!(a.len(), m * k, "gemm: lhs buffer size");
    assert_eq!(b.len(), k * n, "gemm: rhs buffer size");
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    if m * n * k >= PAR_THRESHOLD && m > 1 {
        let rows_per_task = m.div_ceil(4 * rayon::current_num_threads().max(1)).max(4);
        c.par_chunks_mut(rows_per_task * n)
            .zip(a.par_chunks(rows_per_task * k))
            .for_each(|(c_chunk, a_chunk)| {
                let rows = c_chunk.len() / n;
                gemm_rows(c_chunk, a_chunk, b, rows, k, n);
            });
    } else {
        gemm_rows(c, a, b, m, k, n);
    }
}

fn gemm_rows(c: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    let mut kb = 0;
    while kb < k {
        let kc = KC.min(k - kb);
        let b_panel = &b[kb * n..(kb + kc) * n];
        let mut i = 0;
        while i + 2 <= m {
            let (c0, c1) = c[i * n..].split_at_mut(n);
            row_pair_panel(
                &mut c0[..n],
                &mut c1[..n],
                &a[i * k + kb..i * k + kb + kc],
                &a[(i + 1) * k + kb..(i + 1) * k + kb + kc],
                b_panel,
                n,
            );
            i += 2;
        }
        if i < m {
            row_panel(
                &mut c[i * n..(i + 1) * n],
                &a[i * k + kb..i * k + kb + kc],
                b_panel,
                n,
            );
        }
        kb += kc;
    }
}

/// Two output rows sharing the streamed `b` panel.
fn row_pair_panel(c0: &mut [f64], c1: &mut [f64], a0: &[f64], a1: &[f64], b: &[f64], n: usize) {
    let kc = a0.len();
    let mut j = 0;
    while j + NR <= n {
        let mut acc0 = [0.0f64; NR];
        let mut acc1 = [0.0f64; NR];
        acc0.copy_from_slice(&c0[j..j + NR]);
        acc1.copy_from_slice(&c1[j..j + NR]);
        for kk in 0..kc {
            let av0 = a0[kk];
            let av1 = a1[kk];
            let brow = &b[kk * n + j..kk * n + j + NR];
            for t in 0..NR {
                acc0[t] += av0 * brow[t];
                acc1[t] += av1 * brow[t];
            }
        }
        c0[j..j + NR].copy_from_slice(&acc0);
        c1[j..j + NR].copy_from_slice(&acc1);
        j += NR;
    }
    if j < n {
        tail(c0, a0, b, n, j);
        tail(c1, a1, b, n, j);
    }
}

fn row_panel(c: &mut [f64], a: &[f64], b: &[f64], n: usize) {
    let kc = a.len();
    let mut j = 0;
    while j + NR <= n {
        let mut acc = [0.0f64; NR];
        acc.copy_from_slice(&c[j..j + NR]);
        for kk in 0..kc {
            let av = a[kk];
            let brow = &b[kk * n + j..kk * n + j + NR];
            for t in 0..NR {
                acc[t] += av * brow[t];
            }
        }
        c[j..j + NR].copy_from_slice(&acc);
        j += NR;
    }
    if j < n {
        tail(c, a, b, n, j);
    }
}

fn tail(c: &mut [f64], a: &[f64], b: &[f64], n: usize, j0: usize) {
    for (kk, &av) in a.iter().enumerate() {
        let brow = &b[kk * n..kk * n + n];
        for j in j0..n {
            c[j] += av * brow[j];
        }
    }
}

/// Row-major transpose: `out[n x m]` from `a[m x n]`.
pub fn transpose(a: &[f64], m: usize, n: usize) -> Vec<f64> {
    assert_eq!(a.len(), m * n);
    let mut out = vec![0.0; m * n];
    // Blocked to keep both sides cache-friendly.
    const B: usize = 32;
    let mut i0 = 0;
    while i0 < m {
        let i1 = (i0 + B).min(m);
        let mut j0 = 0;
        while j0 < n {
            let j1 = (j0 + B).min(n);
            for i in i0..i1 {
                for j in j0..j1 {
                    out[j * m + i] = a[i * n + j];
                }
            }
            j0 = j1;
        }
        i0 = i1;
    }
    out
}
