//! Dense row-major f64 kernels shared by every other module.
//!
//! All operations are pure and deterministic: dot products accumulate
//! left-to-right over the inner dimension, so repeated runs (and runs with
//! different thread counts) produce bit-identical results. Row-level
//! parallelism never changes per-element accumulation order.

use rayon::prelude::*;

use crate::error::{Error, Result};

/// Minimum number of rows before matmul fans out across threads.
const PAR_ROW_THRESHOLD: usize = 64;

/// Dense row-major matrix of f64 values.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(
                "Matrix::new",
                format!("{rows}x{cols} needs {} values, got {}", rows * cols, data.len()),
            ));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    /// Elementwise map into a new matrix.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.cols)
    }

    /// True when every entry is finite.
    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Result of a top-k selection: indices sorted by descending logit value,
/// ties broken by ascending index.
#[derive(Debug, Clone, PartialEq)]
pub struct TopKSelection {
    pub indices: Vec<usize>,
    pub values: Vec<f64>,
}

/// Row vector times matrix with fixed left-to-right accumulation.
pub fn row_matmul(row: &[f64], m: &Matrix) -> Vec<f64> {
    debug_assert_eq!(row.len(), m.rows);
    let mut out = vec![0.0; m.cols];
    for (i, &x) in row.iter().enumerate() {
        let mrow = m.row(i);
        for (o, &w) in out.iter_mut().zip(mrow.iter()) {
            *o += x * w;
        }
    }
    out
}

/// Standard matrix product. Accumulation order over the inner dimension is
/// fixed, so results are independent of thread count.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::shape(
            "matmul",
            format!("{}x{} times {}x{}", a.rows, a.cols, b.rows, b.cols),
        ));
    }
    let cols = b.cols;
    let mut data = vec![0.0; a.rows * cols];
    let compute_row = |(r, out_row): (usize, &mut [f64])| {
        let arow = a.row(r);
        for (i, &x) in arow.iter().enumerate() {
            let brow = &b.data[i * cols..(i + 1) * cols];
            for (o, &w) in out_row.iter_mut().zip(brow.iter()) {
                *o += x * w;
            }
        }
    };
    if a.rows >= PAR_ROW_THRESHOLD {
        data.par_chunks_exact_mut(cols).enumerate().for_each(compute_row);
    } else {
        data.chunks_exact_mut(cols).enumerate().for_each(compute_row);
    }
    Matrix::new(a.rows, cols, data)
}

fn softmax_into(row: &[f64], out: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(row.iter()) {
        let e = (v - max).exp();
        *o = e;
        sum += e;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// Softmax over a single logit vector with max-subtraction.
pub fn softmax(row: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; row.len()];
    softmax_into(row, &mut out);
    out
}

/// Row-wise softmax with max-subtraction for stability.
pub fn softmax_rows(logits: &Matrix) -> Matrix {
    let mut out = logits.clone();
    for row in out.data.chunks_exact_mut(out.cols) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

/// Row-wise log-softmax: `v - max - ln(sum exp(v - max))`.
pub fn log_softmax_rows(logits: &Matrix) -> Matrix {
    let mut out = logits.clone();
    for row in out.data.chunks_exact_mut(out.cols) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter() {
            sum += (*v - max).exp();
        }
        let lse = max + sum.ln();
        for v in row.iter_mut() {
            *v -= lse;
        }
    }
    out
}

/// RMS normalization: each row scaled by `gain / sqrt(mean(x^2) + eps)`.
pub fn rmsnorm(x: &Matrix, gain: &[f64], eps: f64) -> Result<Matrix> {
    if gain.len() != x.cols {
        return Err(Error::shape(
            "rmsnorm",
            format!("gain length {} vs {} columns", gain.len(), x.cols),
        ));
    }
    let mut out = x.clone();
    for row in out.data.chunks_exact_mut(out.cols) {
        let mut ss = 0.0;
        for v in row.iter() {
            ss += v * v;
        }
        let inv = 1.0 / (ss / row.len() as f64 + eps).sqrt();
        for (v, &g) in row.iter_mut().zip(gain.iter()) {
            *v *= g * inv;
        }
    }
    Ok(out)
}

/// Top-k selection over a logit vector. Deterministic under ties: the lower
/// index wins.
pub fn topk(v: &[f64], k: usize) -> Result<TopKSelection> {
    if k == 0 || k > v.len() {
        return Err(Error::invalid(
            "topk",
            format!("k={k} out of range for length {}", v.len()),
        ));
    }
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&a, &b| {
        v[b].partial_cmp(&v[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    order.truncate(k);
    let values = order.iter().map(|&i| v[i]).collect();
    Ok(TopKSelection {
        indices: order,
        values,
    })
}

/// Floor applied to `q` entries before the log in KL divergence.
pub const KL_FLOOR: f64 = 1e-12;

/// KL divergence `D(p || q)` in nats. `q` entries are floored at
/// [`KL_FLOOR`] before the log; terms with `p = 0` contribute zero.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::shape(
            "kl_divergence",
            format!("lengths {} vs {}", p.len(), q.len()),
        ));
    }
    let mut acc = 0.0;
    for (&pi, &qi) in p.iter().zip(q.iter()) {
        if pi > 0.0 {
            acc += pi * (pi / qi.max(KL_FLOOR)).ln();
        }
    }
    Ok(acc.max(0.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn mat(rows: usize, cols: usize, v: &[f64]) -> Matrix {
        Matrix::new(rows, cols, v.to_vec()).unwrap()
    }

    /// Independent naive triple-loop product used as the matmul oracle.
    fn matmul_oracle(a: &Matrix, b: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(a.rows(), b.cols());
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let mut acc = 0.0;
                for t in 0..a.cols() {
                    acc += a.get(i, t) * b.get(t, j);
                }
                out.set(i, j, acc);
            }
        }
        out
    }

    fn seeded_values(seed: u64, n: usize) -> Vec<f64> {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect()
    }

    #[test]
    fn matmul_identity() {
        let i = mat(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        let b = mat(2, 2, &[3.0, 4.0, 5.0, 6.0]);
        assert_eq!(matmul(&i, &b).unwrap(), b);
    }

    #[test]
    fn matmul_hand_case() {
        let a = mat(1, 2, &[1.0, 2.0]);
        let b = mat(2, 1, &[3.0, 4.0]);
        assert_eq!(matmul(&a, &b).unwrap().data(), &[11.0]);
    }

    #[test]
    fn matmul_matches_naive_oracle() {
        let a = mat(7, 5, &seeded_values(1, 35));
        let b = mat(5, 3, &seeded_values(2, 15));
        let got = matmul(&a, &b).unwrap();
        let want = matmul_oracle(&a, &b);
        // Same accumulation order, so equality is exact.
        assert_eq!(got, want);
    }

    #[test]
    fn matmul_shape_mismatch_rejected() {
        let a = mat(2, 3, &[0.0; 6]);
        let b = mat(2, 2, &[0.0; 4]);
        assert!(matmul(&a, &b).is_err());
    }

    #[test]
    fn softmax_symmetry_and_analytic() {
        let s = softmax(&[0.0, 0.0, 0.0]);
        for v in &s {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
        let c = 7.3;
        let s = softmax(&[c, c + (2.0f64).ln()]);
        assert!((s[0] - 1.0 / 3.0).abs() < 1e-12);
        assert!((s[1] - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_shift_invariance_large_inputs() {
        let a = softmax(&[1000.0, 1001.0]);
        let b = softmax(&[0.0, 1.0]);
        assert!(a.iter().all(|v| v.is_finite()));
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn rmsnorm_analytic() {
        let x = mat(1, 4, &[2.0, 2.0, 2.0, 2.0]);
        let y = rmsnorm(&x, &[1.0; 4], 0.0).unwrap();
        for &v in y.data() {
            assert!((v - 1.0).abs() < 1e-12);
        }
        let y2 = rmsnorm(&x, &[2.0; 4], 0.0).unwrap();
        for (&a, &b) in y2.data().iter().zip(y.data().iter()) {
            assert!((a - 2.0 * b).abs() < 1e-12);
        }
    }

    #[test]
    fn rmsnorm_matches_direct_formula() {
        let x = mat(1, 6, &seeded_values(3, 6));
        let gain = seeded_values(4, 6);
        let eps = 1e-6;
        let y = rmsnorm(&x, &gain, eps).unwrap();
        let ms: f64 = x.data().iter().map(|v| v * v).sum::<f64>() / 6.0;
        for j in 0..6 {
            let want = x.get(0, j) * gain[j] / (ms + eps).sqrt();
            assert!((y.get(0, j) - want).abs() < 1e-12);
        }
    }

    #[test]
    fn rmsnorm_gain_length_rejected() {
        let x = mat(1, 4, &[0.0; 4]);
        assert!(rmsnorm(&x, &[1.0; 3], 0.0).is_err());
    }

    #[test]
    fn topk_tie_breaks_by_index() {
        let sel = topk(&[5.0, 1.0, 5.0, 0.0], 2).unwrap();
        assert_eq!(sel.indices, vec![0, 2]);
        assert_eq!(sel.values, vec![5.0, 5.0]);
    }

    #[test]
    fn topk_full_selection_sorted() {
        let sel = topk(&[1.0, 3.0, 2.0], 3).unwrap();
        assert_eq!(sel.indices, vec![1, 2, 0]);
    }

    #[test]
    fn topk_matches_sort_oracle() {
        let v = seeded_values(5, 12);
        let sel = topk(&v, 3).unwrap();
        let mut order: Vec<usize> = (0..v.len()).collect();
        order.sort_by(|&a, &b| {
            v[b].partial_cmp(&v[a]).unwrap().then(a.cmp(&b))
        });
        assert_eq!(sel.indices, order[..3].to_vec());
    }

    #[test]
    fn topk_k_out_of_range() {
        assert!(topk(&[1.0, 2.0], 0).is_err());
        assert!(topk(&[1.0, 2.0], 3).is_err());
    }

    #[test]
    fn kl_identity_and_analytic() {
        let p = [0.25, 0.75];
        assert_eq!(kl_divergence(&p, &p).unwrap(), 0.0);
        let d = kl_divergence(&[1.0, 0.0], &[0.5, 0.5]).unwrap();
        assert!((d - (2.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn kl_matches_summation_oracle() {
        let raw_p = seeded_values(6, 8);
        let raw_q = seeded_values(7, 8);
        let norm = |v: &[f64]| {
            let s: f64 = v.iter().map(|x| x.abs() + 0.1).sum();
            v.iter().map(|x| (x.abs() + 0.1) / s).collect::<Vec<_>>()
        };
        let p = norm(&raw_p);
        let q = norm(&raw_q);
        let got = kl_divergence(&p, &q).unwrap();
        let mut want = 0.0;
        for i in 0..8 {
            want += p[i] * (p[i] / q[i].max(1e-12)).ln();
        }
        assert!((got - want).abs() < 1e-10);
    }

    #[test]
    fn kl_length_mismatch_rejected() {
        assert!(kl_divergence(&[1.0], &[0.5, 0.5]).is_err());
    }

    proptest! {
        #[test]
        fn prop_softmax_rows_sum_to_one(rows in 1usize..4, cols in 1usize..8, seed in 0u64..1000) {
            let m = mat(rows, cols, &seeded_values(seed, rows * cols));
            let s = softmax_rows(&m);
            for row in s.iter_rows() {
                let sum: f64 = row.iter().sum();
                prop_assert!((sum - 1.0).abs() < 1e-9);
                prop_assert!(row.iter().all(|&v| v >= 0.0));
            }
        }

        #[test]
        fn prop_softmax_shift_invariance(cols in 1usize..8, seed in 0u64..1000, c in -50.0f64..50.0) {
            let v = seeded_values(seed, cols);
            let shifted: Vec<f64> = v.iter().map(|x| x + c).collect();
            let a = softmax(&v);
            let b = softmax(&shifted);
            for (x, y) in a.iter().zip(b.iter()) {
                prop_assert!((x - y).abs() < 1e-9);
            }
        }

        #[test]
        fn prop_diag_scaling_equivalence(seed in 0u64..1000) {
            // (x * diag^-1(s)) * (diag(s) * w) == x * w within relative 1e-6.
            let d = 6;
            let x = mat(2, d, &seeded_values(seed, 2 * d));
            let w = mat(d, 3, &seeded_values(seed + 1, d * 3));
            let s: Vec<f64> = seeded_values(seed + 2, d)
                .iter()
                .map(|v| v.abs().max(1e-6) * 2.0)
                .collect();
            let xs = Matrix::new(2, d, x.data().iter().enumerate()
                .map(|(i, &v)| v / s[i % d]).collect()).unwrap();
            let sw = Matrix::new(d, 3, w.data().iter().enumerate()
                .map(|(i, &v)| v * s[i / 3]).collect()).unwrap();
            let direct = matmul(&x, &w).unwrap();
            let scaled = matmul(&xs, &sw).unwrap();
            for (a, b) in direct.data().iter().zip(scaled.data().iter()) {
                let tol = 1e-6 * a.abs().max(b.abs()).max(1e-9);
                prop_assert!((a - b).abs() <= tol);
            }
        }

        #[test]
        fn prop_topk_deterministic_under_ties(seed in 0u64..1000, k in 1usize..5) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            // Small value alphabet forces ties.
            let v: Vec<f64> = (0..8).map(|_| f64::from(rng.gen_range(0..3))).collect();
            let a = topk(&v, k).unwrap();
            let b = topk(&v, k).unwrap();
            prop_assert_eq!(&a, &b);
            let mut order: Vec<usize> = (0..v.len()).collect();
            order.sort_by(|&x, &y| v[y].partial_cmp(&v[x]).unwrap().then(x.cmp(&y)));
            prop_assert_eq!(a.indices, order[..k].to_vec());
        }

        #[test]
        fn prop_kl_nonnegative(seed in 0u64..1000, n in 2usize..10) {
            let raw_p = seeded_values(seed, n);
            let raw_q = seeded_values(seed + 1, n);
            let norm = |v: &[f64]| {
                let s: f64 = v.iter().map(|x| x.abs() + 0.05).sum();
                v.iter().map(|x| (x.abs() + 0.05) / s).collect::<Vec<_>>()
            };
            let p = norm(&raw_p);
            let q = norm(&raw_q);
            prop_assert!(kl_divergence(&p, &q).unwrap() >= 0.0);
            prop_assert_eq!(kl_divergence(&p, &p).unwrap(), 0.0);
        }
    }
}
