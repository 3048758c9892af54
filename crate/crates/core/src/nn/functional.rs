//! Stateless forward/backward kernels.

use crate::error::{shape_err, Error, Result};
use crate::geometry::IGNORE_LABEL;
use crate::scalar::Scalar;
use crate::tensor::{dot, Matrix};

pub const NORM_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;

/// `x·W + b`.
pub fn linear<T: Scalar>(x: &Matrix<T>, w: &Matrix<T>, b: Option<&[T]>) -> Result<Matrix<T>> {
    let mut out = x.matmul(w)?;
    if let Some(b) = b {
        if b.len() != out.cols() {
            return Err(shape_err!("linear bias of {} for {} outputs", b.len(), out.cols()));
        }
        for i in 0..out.rows() {
            for (o, &bv) in out.row_mut(i).iter_mut().zip(b) {
                *o += bv;
            }
        }
    }
    Ok(out)
}

/// Returns `(dX, dW, db)`.
pub fn linear_backward<T: Scalar>(
    x: &Matrix<T>,
    w: &Matrix<T>,
    dout: &Matrix<T>,
) -> Result<(Matrix<T>, Matrix<T>, Vec<T>)> {
    let dx = dout.matmul_nt(w)?;
    let dw = x.matmul_tn(dout)?;
    Ok((dx, dw, dout.col_sums()))
}

#[derive(Clone, Debug)]
pub struct NormCache<T> {
    pub xhat: Matrix<T>,
    /// Per-row (layer norm) or per-column (batch norm) `1/√(σ²+ε)`.
    pub inv_std: Vec<T>,
}

pub fn layer_norm<T: Scalar>(x: &Matrix<T>, gamma: &[T], beta: &[T], eps: T) -> Result<(Matrix<T>, NormCache<T>)> {
    let c = x.cols();
    if gamma.len() != c || beta.len() != c {
        return Err(shape_err!("layer_norm: affine of {} for {c} channels", gamma.len()));
    }
    let n_c = T::from_usize_lossy(c);
    let mut xhat = Matrix::zeros(x.rows(), c);
    let mut out = Matrix::zeros(x.rows(), c);
    let mut inv_std = Vec::with_capacity(x.rows());
    for i in 0..x.rows() {
        let r = x.row(i);
        let mean = r.iter().copied().sum::<T>() / n_c;
        let var = r.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n_c;
        let is = T::one() / (var + eps).sqrt();
        inv_std.push(is);
        for j in 0..c {
            let h = (r[j] - mean) * is;
            xhat[(i, j)] = h;
            out[(i, j)] = gamma[j] * h + beta[j];
        }
    }
    Ok((out, NormCache { xhat, inv_std }))
}

/// Returns `(dX, dγ, dβ)`.
pub fn layer_norm_backward<T: Scalar>(
    cache: &NormCache<T>,
    gamma: &[T],
    dout: &Matrix<T>,
) -> Result<(Matrix<T>, Vec<T>, Vec<T>)> {
    let (n, c) = dout.shape();
    if cache.xhat.shape() != (n, c) {
        return Err(shape_err!("layer_norm_backward: cache {:?} vs grad {:?}", cache.xhat.shape(), (n, c)));
    }
    let n_c = T::from_usize_lossy(c);
    let mut dx = Matrix::zeros(n, c);
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    let mut dxhat = vec![T::zero(); c];
    for i in 0..n {
        let g = dout.row(i);
        let h = cache.xhat.row(i);
        for j in 0..c {
            dgamma[j] += g[j] * h[j];
            dbeta[j] += g[j];
            dxhat[j] = g[j] * gamma[j];
        }
        let s1: T = dxhat.iter().copied().sum();
        let s2 = dot(&dxhat, h);
        let k = cache.inv_std[i] / n_c;
        for j in 0..c {
            dx[(i, j)] = k * (n_c * dxhat[j] - s1 - h[j] * s2);
        }
    }
    Ok((dx, dgamma, dbeta))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Debug)]
pub struct BatchNormOutput<T> {
    pub out: Matrix<T>,
    pub cache: NormCache<T>,
    /// Train mode only: updated `(running_mean, running_var)`.
    pub running: Option<(Vec<T>, Vec<T>)>,
}

/// Batch normalization over rows. Train mode uses biased batch variance and
/// returns momentum-blended running statistics for the caller to commit.
pub fn batch_norm<T: Scalar>(
    x: &Matrix<T>,
    gamma: &[T],
    beta: &[T],
    running_mean: &[T],
    running_var: &[T],
    mode: Mode,
    eps: T,
) -> Result<BatchNormOutput<T>> {
    let (n, c) = x.shape();
    if gamma.len() != c || beta.len() != c || running_mean.len() != c || running_var.len() != c {
        return Err(shape_err!("batch_norm: parameters for {} channels, input has {c}", gamma.len()));
    }
    let (mean, var) = match mode {
        Mode::Train => {
            if n < 2 {
                return Err(Error::DegenerateBatch { rows: n });
            }
            let n_t = T::from_usize_lossy(n);
            let mean: Vec<T> = x.col_sums().into_iter().map(|s| s / n_t).collect();
            let mut var = vec![T::zero(); c];
            for r in x.rows_iter() {
                for j in 0..c {
                    let d = r[j] - mean[j];
                    var[j] += d * d;
                }
            }
            for v in &mut var {
                *v /= n_t;
            }
            (mean, var)
        }
        Mode::Eval => (running_mean.to_vec(), running_var.to_vec()),
    };
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut xhat = Matrix::zeros(n, c);
    let mut out = Matrix::zeros(n, c);
    for i in 0..n {
        for j in 0..c {
            let h = (x[(i, j)] - mean[j]) * inv_std[j];
            xhat[(i, j)] = h;
            out[(i, j)] = gamma[j] * h + beta[j];
        }
    }
    let running = (mode == Mode::Train).then(|| {
        let mom = T::lit(BN_MOMENTUM);
        let keep = |old: &[T], new: &[T]| -> Vec<T> {
            old.iter().zip(new).map(|(&o, &b)| mom * o + (T::one() - mom) * b).collect()
        };
        (keep(running_mean, &mean), keep(running_var, &var))
    });
    Ok(BatchNormOutput { out, cache: NormCache { xhat, inv_std }, running })
}

/// Returns `(dX, dγ, dβ)`. In train mode the gradient flows through the batch statistics.
pub fn batch_norm_backward<T: Scalar>(
    cache: &NormCache<T>,
    gamma: &[T],
    mode: Mode,
    dout: &Matrix<T>,
) -> Result<(Matrix<T>, Vec<T>, Vec<T>)> {
    let (n, c) = dout.shape();
    if cache.xhat.shape() != (n, c) {
        return Err(shape_err!("batch_norm_backward: cache {:?} vs grad {:?}", cache.xhat.shape(), (n, c)));
    }
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    let mut s2 = vec![T::zero(); c];
    for i in 0..n {
        for j in 0..c {
            let g = dout[(i, j)];
            dgamma[j] += g * cache.xhat[(i, j)];
            dbeta[j] += g;
            s2[j] += g * gamma[j] * cache.xhat[(i, j)];
        }
    }
    let mut dx = Matrix::zeros(n, c);
    let n_t = T::from_usize_lossy(n);
    for i in 0..n {
        for j in 0..c {
            let dxhat = dout[(i, j)] * gamma[j];
            dx[(i, j)] = match mode {
                Mode::Train => {
                    let s1 = dbeta[j] * gamma[j];
                    cache.inv_std[j] / n_t * (n_t * dxhat - s1 - cache.xhat[(i, j)] * s2[j])
                }
                Mode::Eval => dxhat * cache.inv_std[j],
            };
        }
    }
    Ok((dx, dgamma, dbeta))
}

/// Standard normal CDF.
#[inline]
pub fn phi_cdf<T: Scalar>(x: T) -> T {
    T::lit(0.5) * (T::one() + (x / T::SQRT_2()).erf())
}

/// Standard normal density.
#[inline]
pub fn phi_pdf<T: Scalar>(x: T) -> T {
    (-(x * x) * T::lit(0.5)).exp() / (T::TAU()).sqrt()
}

/// Exact GELU `x·Φ(x)`.
pub fn gelu<T: Scalar>(x: &Matrix<T>) -> Matrix<T> {
    x.map(|v| v * phi_cdf(v))
}

/// `dout ⊙ (Φ(x) + x·φ(x))`.
pub fn gelu_backward<T: Scalar>(x: &Matrix<T>, dout: &Matrix<T>) -> Result<Matrix<T>> {
    if x.shape() != dout.shape() {
        return Err(shape_err!("gelu_backward: {:?} vs {:?}", x.shape(), dout.shape()));
    }
    let data = x
        .as_slice()
        .iter()
        .zip(dout.as_slice())
        .map(|(&v, &g)| g * (phi_cdf(v) + v * phi_pdf(v)))
        .collect();
    Matrix::from_vec(x.rows(), x.cols(), data)
}

/// Numerically stable softmax of one row, in place.
pub fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let m = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut s = T::zero();
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    let inv = T::one() / s;
    for v in row.iter_mut() {
        *v *= inv;
    }
}

pub fn softmax_rows<T: Scalar>(x: &Matrix<T>) -> Matrix<T> {
    let mut out = x.clone();
    for i in 0..out.rows() {
        softmax_in_place(out.row_mut(i));
    }
    out
}

/// Vector-Jacobian product of row softmax given its output `y`.
pub fn softmax_rows_backward<T: Scalar>(y: &Matrix<T>, dy: &Matrix<T>) -> Result<Matrix<T>> {
    if y.shape() != dy.shape() {
        return Err(shape_err!("softmax_rows_backward: {:?} vs {:?}", y.shape(), dy.shape()));
    }
    let mut dx = Matrix::zeros(y.rows(), y.cols());
    for i in 0..y.rows() {
        let (yr, gr) = (y.row(i), dy.row(i));
        let s = dot(yr, gr);
        for (d, (&yv, &gv)) in dx.row_mut(i).iter_mut().zip(yr.iter().zip(gr)) {
            *d = yv * (gv - s);
        }
    }
    Ok(dx)
}

/// Mean negative log-softmax over rows whose label is not [`IGNORE_LABEL`].
/// Returns the loss and `∂loss/∂logits`.
pub fn cross_entropy<T: Scalar>(logits: &Matrix<T>, labels: &[i64]) -> Result<(T, Matrix<T>)> {
    let (n, k) = logits.shape();
    if labels.len() != n {
        return Err(shape_err!("cross_entropy: {} labels for {n} rows", labels.len()));
    }
    let count = labels.iter().filter(|&&l| l != IGNORE_LABEL).count();
    if count == 0 {
        return Err(Error::EmptyLoss);
    }
    let inv = T::one() / T::from_usize_lossy(count);
    let mut loss = T::zero();
    let mut grad = Matrix::zeros(n, k);
    for (i, &l) in labels.iter().enumerate() {
        if l == IGNORE_LABEL {
            continue;
        }
        if l < 0 || l as usize >= k {
            return Err(Error::RejectedInput(format!("label {l} outside [0, {k})")));
        }
        let l = l as usize;
        let r = logits.row(i);
        let m = r.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = m + r.iter().map(|&v| (v - m).exp()).sum::<T>().ln();
        loss += lse - r[l];
        let g = grad.row_mut(i);
        for j in 0..k {
            g[j] = (r[j] - lse).exp() * inv;
        }
        g[l] -= inv;
    }
    Ok((loss * inv, grad))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[Vec<f64>]) -> Matrix<f64> {
        Matrix::from_rows(rows).unwrap()
    }

    #[test]
    fn linear_identity_and_bias() {
        let x = m(&[vec![1.0, 2.0]]);
        let out = linear(&x, &Matrix::identity(2), Some(&[1.0, 1.0])).unwrap();
        assert_eq!(out.as_slice(), &[2.0, 3.0]);
        assert_eq!(linear(&x, &Matrix::identity(2), None).unwrap(), x);
        assert!(linear(&x, &Matrix::identity(3), None).is_err());
    }

    #[test]
    fn layer_norm_fixed_points() {
        let (out, _) = layer_norm(&m(&[vec![3.0; 4]]), &[1.0; 4], &[0.0; 4], 1e-5).unwrap();
        assert!(out.as_slice().iter().all(|&v| v == 0.0));
        let (out, _) = layer_norm(&m(&[vec![-1.0, 1.0]]), &[1.0; 2], &[0.0; 2], 1e-5).unwrap();
        let s = 1.0 / (1.0f64 + 1e-5).sqrt();
        assert!((out[(0, 0)] + s).abs() < 1e-15 && (out[(0, 1)] - s).abs() < 1e-15);
    }

    #[test]
    fn batch_norm_train_standardizes_columns() {
        let x = Matrix::from_fn(7, 3, |i, j| ((i * 5 + j * 3) % 7) as f64 * 1.7 - j as f64);
        let bn = batch_norm(&x, &[1.0; 3], &[0.0; 3], &[0.0; 3], &[1.0; 3], Mode::Train, 0.0).unwrap();
        for j in 0..3 {
            let col: Vec<f64> = (0..7).map(|i| bn.out[(i, j)]).collect();
            let mean = col.iter().sum::<f64>() / 7.0;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 7.0;
            assert!(mean.abs() < 1e-10 && (var - 1.0).abs() < 1e-10);
        }
        let (rm, rv) = bn.running.unwrap();
        let mean0 = x.col_sums()[0] / 7.0;
        assert!((rm[0] - 0.1 * mean0).abs() < 1e-12);
        assert!(rv[0] > 0.9);
    }

    #[test]
    fn batch_norm_eval_identity_and_degenerate_batch() {
        let x = m(&[vec![0.3, -2.0]]);
        let bn = batch_norm(&x, &[1.0; 2], &[0.0; 2], &[0.0; 2], &[1.0; 2], Mode::Eval, 1e-5).unwrap();
        assert!(bn.out.max_abs_diff(&x) < 1e-5);
        assert!(bn.running.is_none());
        let e = batch_norm(&x, &[1.0; 2], &[0.0; 2], &[0.0; 2], &[1.0; 2], Mode::Train, 1e-5);
        assert!(matches!(e, Err(Error::DegenerateBatch { rows: 1 })));
    }

    #[test]
    fn gelu_values() {
        let g = gelu(&m(&[vec![0.0, 1.0, 20.0]]));
        assert_eq!(g[(0, 0)], 0.0);
        // Φ(1) = 0.841344746068543
        assert!((g[(0, 1)] - 0.841_344_746_068_543).abs() < 1e-12);
        assert!((g[(0, 2)] / 20.0 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_values_and_stability() {
        let s = softmax_rows(&m(&[vec![0.0, 0.0], vec![2f64.ln(), 0.0]]));
        assert_eq!(s.row(0), &[0.5, 0.5]);
        assert!((s[(1, 0)] - 2.0 / 3.0).abs() < 1e-15 && (s[(1, 1)] - 1.0 / 3.0).abs() < 1e-15);
        let big = softmax_rows(&m(&[vec![1e4, -1e4, 9999.0, 0.0]]));
        assert!(big.is_finite());
        assert!((big.row(0).iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_uniform_and_margin() {
        let (l, _) = cross_entropy(&Matrix::<f64>::zeros(3, 5), &[0, 4, 2]).unwrap();
        assert!((l - 5f64.ln()).abs() < 1e-14);
        let mut prev = f64::INFINITY;
        for margin in [1.0, 5.0, 10.0, 30.0] {
            let (l, _) = cross_entropy(&m(&[vec![margin, 0.0, 0.0]]), &[0]).unwrap();
            assert!(l < prev);
            prev = l;
        }
        assert!(prev < 1e-12);
        assert!(matches!(cross_entropy(&Matrix::<f64>::zeros(2, 2), &[-1, -1]), Err(Error::EmptyLoss)));
    }

    #[test]
    fn cross_entropy_ignores_rows() {
        let logits = m(&[vec![1.0, 2.0], vec![100.0, -3.0]]);
        let (l1, g) = cross_entropy(&logits, &[1, -1]).unwrap();
        let (l2, _) = cross_entropy(&m(&[vec![1.0, 2.0]]), &[1]).unwrap();
        assert_eq!(l1, l2);
        assert_eq!(g.row(1), &[0.0, 0.0]);
    }
}
