//! Pure matrix kernels. The tape records these same functions so that
//! inference and training share one numeric path.

use super::Matrix;
use crate::error::{Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Smallest value `sigmoid` returns; keeps outputs strictly inside (0, 1).
pub const SIGMOID_FLOOR: f64 = 1e-300;
/// Largest value `sigmoid` returns (the float just below 1).
pub const SIGMOID_CEIL: f64 = 1.0 - f64::EPSILON / 2.0;

/// `c = alpha * op(a) * op(b) + beta * c`, where `op` optionally transposes.
///
/// Transposition is expressed through strides, so no copies are made.
pub(crate) fn gemm(
    alpha: f64,
    a: &Matrix,
    trans_a: bool,
    b: &Matrix,
    trans_b: bool,
    beta: f64,
    c: &mut Matrix,
) {
    let (m, k) = if trans_a {
        (a.cols(), a.rows())
    } else {
        (a.rows(), a.cols())
    };
    let (kb, n) = if trans_b {
        (b.cols(), b.rows())
    } else {
        (b.rows(), b.cols())
    };
    assert_eq!(k, kb, "gemm inner dimension");
    assert_eq!(c.shape(), (m, n), "gemm output shape");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in c.data_mut() {
            *v *= beta;
        }
        return;
    }
    let (rsa, csa) = if trans_a {
        (1, a.cols() as isize)
    } else {
        (a.cols() as isize, 1)
    };
    let (rsb, csb) = if trans_b {
        (1, b.cols() as isize)
    } else {
        (b.cols() as isize, 1)
    };
    let rsc = n as isize;
    // SAFETY: the shape checks above guarantee every strided access stays
    // within the three buffers, and `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.data().as_ptr(),
            rsa,
            csa,
            b.data().as_ptr(),
            rsb,
            csb,
            beta,
            c.data_mut().as_mut_ptr(),
            rsc,
            1,
        );
    }
}

pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols() != b.rows() {
        return Err(Error::shape(
            "matmul",
            format!("{:?} x {:?}", a.shape(), b.shape()),
        ));
    }
    let mut c = Matrix::zeros(a.rows(), b.cols());
    gemm(1.0, a, false, b, false, 0.0, &mut c);
    Ok(c)
}

#[inline]
pub fn sigmoid_scalar(x: f64) -> f64 {
    let y = if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    };
    y.clamp(SIGMOID_FLOOR, SIGMOID_CEIL)
}

pub fn sigmoid(a: &Matrix) -> Matrix {
    a.map(sigmoid_scalar)
}

pub fn tanh(a: &Matrix) -> Matrix {
    a.map(f64::tanh)
}

pub fn relu(a: &Matrix) -> Matrix {
    a.map(|v| v.max(0.0))
}

/// Normalizes every column to sum to one.
pub fn softmax_cols(a: &Matrix) -> Matrix {
    let (rows, cols) = a.shape();
    let mut out = Matrix::zeros(rows, cols);
    if rows == 0 {
        return out;
    }
    let src = a.data();
    let dst = out.data_mut();
    let mut max = vec![f64::NEG_INFINITY; cols];
    for r in 0..rows {
        for (m, &v) in max.iter_mut().zip(&src[r * cols..(r + 1) * cols]) {
            *m = m.max(v);
        }
    }
    let mut sum = vec![0.0; cols];
    for r in 0..rows {
        let row = &src[r * cols..(r + 1) * cols];
        let out_row = &mut dst[r * cols..(r + 1) * cols];
        for c in 0..cols {
            let e = (row[c] - max[c]).exp();
            out_row[c] = e;
            sum[c] += e;
        }
    }
    for r in 0..rows {
        for (v, s) in dst[r * cols..(r + 1) * cols].iter_mut().zip(&sum) {
            *v /= s;
        }
    }
    out
}

/// Column-wise layer normalization with per-row affine parameters.
pub fn layer_norm(a: &Matrix, gain: &Matrix, bias: &Matrix, eps: f64) -> Result<Matrix> {
    Ok(layer_norm_saved(a, gain, bias, eps)?.0)
}

/// Layer norm that also returns the normalized input and per-column
/// inverse standard deviations, which the backward pass reuses.
pub(crate) fn layer_norm_saved(
    a: &Matrix,
    gain: &Matrix,
    bias: &Matrix,
    eps: f64,
) -> Result<(Matrix, Matrix, Vec<f64>)> {
    let (rows, cols) = a.shape();
    if gain.len() != rows || bias.len() != rows {
        return Err(Error::shape(
            "layer_norm",
            format!(
                "gain/bias lengths {}/{} for {rows} rows",
                gain.len(),
                bias.len()
            ),
        ));
    }
    let n = rows as f64;
    let mut mean = vec![0.0; cols];
    for r in 0..rows {
        for (m, v) in mean.iter_mut().zip(a.row(r)) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; cols];
    for r in 0..rows {
        for ((s, v), m) in var.iter_mut().zip(a.row(r)).zip(&mean) {
            let d = v - m;
            *s += d * d;
        }
    }
    let inv_std: Vec<f64> = var.iter().map(|s| 1.0 / (s / n + eps).sqrt()).collect();
    let mut xhat = Matrix::zeros(rows, cols);
    let mut out = Matrix::zeros(rows, cols);
    for r in 0..rows {
        let g = gain.data()[r];
        let b = bias.data()[r];
        for c in 0..cols {
            let h = (a[(r, c)] - mean[c]) * inv_std[c];
            xhat[(r, c)] = h;
            out[(r, c)] = g * h + b;
        }
    }
    Ok((out, xhat, inv_std))
}

/// Stacks `a` on top of `b`.
pub fn concat_vertical(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    concat_rows(&[a, b])
}

pub fn concat_rows(parts: &[&Matrix]) -> Result<Matrix> {
    let cols = parts.first().map_or(0, |m| m.cols());
    if let Some(bad) = parts.iter().find(|m| m.cols() != cols) {
        return Err(Error::shape(
            "concat_vertical",
            format!("column counts {cols} vs {}", bad.cols()),
        ));
    }
    let rows = parts.iter().map(|m| m.rows()).sum();
    let mut data = Vec::with_capacity(rows * cols);
    for m in parts {
        data.extend_from_slice(m.data());
    }
    Matrix::from_vec(rows, cols, data)
}

/// Adds an n×1 column to every column of an n×T matrix.
pub fn add_col_broadcast(a: &Matrix, col: &Matrix) -> Result<Matrix> {
    if col.len() != a.rows() {
        return Err(Error::shape(
            "add_col_broadcast",
            format!("{} rows vs bias of length {}", a.rows(), col.len()),
        ));
    }
    let mut out = a.clone();
    let cols = a.cols();
    for (r, &b) in col.data().iter().enumerate() {
        for v in &mut out.data_mut()[r * cols..(r + 1) * cols] {
            *v += b;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng, scale: f64) -> Matrix {
        let data = (0..rows * cols)
            .map(|_| rng.random_range(-scale..scale))
            .collect();
        Matrix::from_vec(rows, cols, data).unwrap()
    }

    fn naive_matmul(a: &Matrix, b: &Matrix) -> Matrix {
        let mut c = Matrix::zeros(a.rows(), b.cols());
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let mut s = 0.0;
                for k in 0..a.cols() {
                    s += a[(i, k)] * b[(k, j)];
                }
                c[(i, j)] = s;
            }
        }
        c
    }

    #[test]
    fn matmul_identity_and_hand_case() {
        let b = Matrix::from_rows(&[[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]);
        assert_eq!(matmul(&Matrix::identity(2), &b).unwrap(), b);
        let a = Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0]]);
        let ones = Matrix::from_rows(&[[1.0], [1.0]]);
        assert_eq!(
            matmul(&a, &ones).unwrap(),
            Matrix::from_rows(&[[3.0], [7.0]])
        );
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = random(5, 7, &mut rng, 1.0);
        let b = random(7, 3, &mut rng, 1.0);
        let fast = matmul(&a, &b).unwrap();
        let slow = naive_matmul(&a, &b);
        for (x, y) in fast.data().iter().zip(slow.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn transposed_gemm_matches_explicit_transpose() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let a = random(6, 4, &mut rng, 1.0);
        let b = random(6, 5, &mut rng, 1.0);
        let mut c = Matrix::zeros(4, 5);
        gemm(1.0, &a, true, &b, false, 0.0, &mut c);
        let want = naive_matmul(&a.transpose(), &b);
        for (x, y) in c.data().iter().zip(want.data()) {
            assert!((x - y).abs() < 1e-12);
        }
        let mut d = Matrix::zeros(6, 6);
        gemm(1.0, &a, false, &a, true, 0.0, &mut d);
        let want = naive_matmul(&a, &a.transpose());
        for (x, y) in d.data().iter().zip(want.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn matmul_rejects_bad_inner_dim() {
        let a = Matrix::zeros(2, 3);
        assert!(matches!(
            matmul(&a, &a),
            Err(Error::Shape { op: "matmul", .. })
        ));
    }

    #[test]
    fn matmul_identity_associativity() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = random(4, 6, &mut rng, 2.0);
        let b = random(6, 3, &mut rng, 2.0);
        let ai = matmul(&a, &Matrix::identity(6)).unwrap();
        let lhs = matmul(&ai, &b).unwrap();
        let rhs = matmul(&a, &b).unwrap();
        for (x, y) in lhs.data().iter().zip(rhs.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn sigmoid_limits_and_symmetry() {
        assert_eq!(sigmoid_scalar(0.0), 0.5);
        let tiny = sigmoid_scalar(-1e4);
        assert!(tiny > 0.0 && tiny <= 1e-6);
        let big = sigmoid_scalar(1e4);
        assert!(big < 1.0);
        for x in [-30.0, -3.2, -0.1, 0.7, 5.0, 20.0] {
            let s = sigmoid_scalar(x) + sigmoid_scalar(-x);
            assert!((s - 1.0).abs() < 1e-15, "x={x} sum={s}");
        }
    }

    #[test]
    fn softmax_uniform_and_shift_invariant() {
        let c = Matrix::filled(4, 2, 3.5);
        let s = softmax_cols(&c);
        assert!(s.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random(4, 3, &mut rng, 5.0);
        let s = softmax_cols(&a);
        for c in 0..3 {
            let sum: f64 = s.col(c).iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
        let mut shifted = a.clone();
        for r in 0..4 {
            shifted[(r, 1)] += 17.0;
        }
        let s2 = softmax_cols(&shifted);
        for r in 0..4 {
            assert!((s[(r, 1)] - s2[(r, 1)]).abs() < 1e-15);
        }
    }

    #[test]
    fn layer_norm_cases() {
        let ones = Matrix::filled(3, 1, 1.0);
        let zeros = Matrix::zeros(3, 1);
        let constant = Matrix::filled(3, 4, 2.5);
        let out = layer_norm(&constant, &ones, &zeros, LAYER_NORM_EPS).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));

        // eps biases the variance by eps/var, so the input spread is kept
        // well above eps for the unit-variance check.
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = random(8, 5, &mut rng, 50.0);
        let out = layer_norm(&a, &Matrix::filled(8, 1, 1.0), &Matrix::zeros(8, 1), 1e-5).unwrap();
        for c in 0..5 {
            let col = out.col(c);
            let mean = col.iter().sum::<f64>() / 8.0;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
            assert!(mean.abs() < 1e-9);
            assert!((var - 1.0).abs() < 1e-6, "var {var}");
        }

        let bias = Matrix::col_vector(&[1.0, -2.0, 0.5, 0.0, 3.0, 4.0, 5.0, 6.0]);
        let out = layer_norm(&a, &Matrix::zeros(8, 1), &bias, 1e-5).unwrap();
        for r in 0..8 {
            assert!(out.row(r).iter().all(|&v| v == bias.data()[r]));
        }
        assert!(layer_norm(&a, &Matrix::zeros(3, 1), &bias, 1e-5).is_err());
    }

    #[test]
    fn concat_vertical_cases() {
        let a = Matrix::from_rows(&[[1.0, 2.0]]);
        let b = Matrix::from_rows(&[[3.0, 4.0]]);
        let c = concat_vertical(&a, &b).unwrap();
        assert_eq!(c, Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0]]));
        assert_eq!(c.slice_rows(0, 1).unwrap(), a);
        assert_eq!(c.slice_rows(1, 1).unwrap(), b);
        assert!(concat_vertical(&a, &Matrix::zeros(1, 3)).is_err());
    }
}
