//! Dense inner loops shared by the tape's forward and backward rules.
//!
//! Every kernel accumulates in a fixed order so that results are
//! bit-reproducible across runs.

/// `out[m×n] = a[m×k] · b[k×n]`
pub(crate) fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for (row, ai) in out.chunks_exact_mut(n).zip(a.chunks_exact(k)) {
        for (&av, bp) in ai.iter().zip(b.chunks_exact(n)) {
            for (o, &bv) in row.iter_mut().zip(bp) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `out[k×n] += aᵀ · g` for `a[m×k]`, `g[m×n]`.
pub(crate) fn matmul_at_b_acc(a: &[f64], g: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(out.len(), k * n);
    for i in 0..m {
        let ai = &a[i * k..(i + 1) * k];
        let gi = &g[i * n..(i + 1) * n];
        for (&av, orow) in ai.iter().zip(out.chunks_exact_mut(n)) {
            for (o, &gv) in orow.iter_mut().zip(gi) {
                *o += av * gv;
            }
        }
    }
}

/// `out[m×k] += g · bᵀ` for `g[m×n]`, `b[k×n]`.
pub(crate) fn matmul_a_bt_acc(g: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(out.len(), m * k);
    let bt = transpose(b, k, n);
    for (orow, gi) in out.chunks_exact_mut(k).zip(g.chunks_exact(n)) {
        for (&gv, btrow) in gi.iter().zip(bt.chunks_exact(k)) {
            for (o, &bv) in orow.iter_mut().zip(btrow) {
                *o += gv * bv;
            }
        }
    }
}

pub(crate) fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut t = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            t[c * rows + r] = a[r * cols + c];
        }
    }
    t
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Splits `shape` around `axis` into `(outer, len, inner)` extents.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn transposed_products_agree_with_explicit_transpose() {
        let a: Vec<f64> = (0..6).map(|v| v as f64 * 0.5 - 1.0).collect(); // 2×3
        let g: Vec<f64> = (0..8).map(|v| (v as f64).sin()).collect(); // 2×4
        let mut at_g = vec![0.0; 12];
        matmul_at_b_acc(&a, &g, 2, 3, 4, &mut at_g);
        assert_eq!(at_g, matmul(&transpose(&a, 2, 3), &g, 3, 2, 4));

        let b: Vec<f64> = (0..12).map(|v| (v as f64).cos()).collect(); // 3×4
        let mut g_bt = vec![0.0; 6];
        matmul_a_bt_acc(&g, &b, 2, 3, 4, &mut g_bt);
        let expect = matmul(&g, &transpose(&b, 3, 4), 2, 4, 3);
        for (x, y) in g_bt.iter().zip(&expect) {
            assert!((x - y).abs() < 1e-15);
        }
    }
}
