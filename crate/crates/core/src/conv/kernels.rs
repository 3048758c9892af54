use rayon::prelude::*;

use super::neighbors::{NeighborMap, KERNEL_VOLUME};
use crate::error::{shape_err, Result};
use crate::nn::{Ctx, Grads, ParamId, ParamKind, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{axpy, dot, Matrix};

const PAR_ROWS: usize = 128;

fn par_rows<T: Scalar>(out: &mut Matrix<T>, f: impl Fn(usize, &mut [T]) + Sync + Send) {
    let c = out.cols();
    if c == 0 {
        return;
    }
    if out.rows() >= PAR_ROWS {
        out.as_mut_slice().par_chunks_mut(c).enumerate().for_each(|(i, r)| f(i, r));
    } else {
        out.as_mut_slice().chunks_mut(c).enumerate().for_each(|(i, r)| f(i, r));
    }
}

fn check_rows<T: Scalar>(nbrs: &NeighborMap, x: &Matrix<T>, what: &str) -> Result<()> {
    if x.rows() != nbrs.rows() {
        return Err(shape_err!("{what}: {} feature rows for {} voxels", x.rows(), nbrs.rows()));
    }
    Ok(())
}

/// Full submanifold convolution. `weight` is `(27·C_in) × C_out`: tap-major,
/// then input channel.
pub fn sparse_conv<T: Scalar>(
    nbrs: &NeighborMap,
    x: &Matrix<T>,
    weight: &Matrix<T>,
    bias: Option<&[T]>,
) -> Result<Matrix<T>> {
    check_rows(nbrs, x, "sparse_conv")?;
    let cin = x.cols();
    if weight.rows() != KERNEL_VOLUME * cin {
        return Err(shape_err!("sparse_conv: weight has {} rows, need 27·{cin}", weight.rows()));
    }
    if bias.is_some_and(|b| b.len() != weight.cols()) {
        return Err(shape_err!("sparse_conv: bias length vs {} outputs", weight.cols()));
    }
    let mut out = Matrix::zeros(x.rows(), weight.cols());
    par_rows(&mut out, |v, o| {
        if let Some(b) = bias {
            o.copy_from_slice(b);
        }
        for (tap, u) in nbrs.taps(v) {
            for (p, &xv) in x.row(u).iter().enumerate() {
                axpy(o, xv, weight.row(tap * cin + p));
            }
        }
    });
    Ok(out)
}

/// Returns `(dX, dW, db)`.
pub fn sparse_conv_backward<T: Scalar>(
    nbrs: &NeighborMap,
    x: &Matrix<T>,
    weight: &Matrix<T>,
    dout: &Matrix<T>,
) -> Result<(Matrix<T>, Matrix<T>, Vec<T>)> {
    check_rows(nbrs, x, "sparse_conv_backward")?;
    check_rows(nbrs, dout, "sparse_conv_backward")?;
    let cin = x.cols();
    let cout = dout.cols();

    // u = v + o  ⇔  v = u + (−o), and tap(−o) = 26 − tap(o)
    let mut dx = Matrix::zeros(x.rows(), cin);
    par_rows(&mut dx, |u, d| {
        for (rtap, v) in nbrs.taps(u) {
            let tap = KERNEL_VOLUME - 1 - rtap;
            let g = dout.row(v);
            for (p, dp) in d.iter_mut().enumerate() {
                *dp += dot(g, weight.row(tap * cin + p));
            }
        }
    });

    let per_tap: Vec<Matrix<T>> = (0..KERNEL_VOLUME)
        .into_par_iter()
        .map(|tap| {
            let mut dw = Matrix::zeros(cin, cout);
            for v in 0..x.rows() {
                if let Some(u) = nbrs.get(v, tap) {
                    let g = dout.row(v);
                    for (p, &xv) in x.row(u).iter().enumerate() {
                        axpy(dw.row_mut(p), xv, g);
                    }
                }
            }
            dw
        })
        .collect();
    let mut dw = Matrix::zeros(KERNEL_VOLUME * cin, cout);
    for (tap, m) in per_tap.iter().enumerate() {
        dw.as_mut_slice()[tap * cin * cout..(tap + 1) * cin * cout].copy_from_slice(m.as_slice());
    }
    Ok((dx, dw, dout.col_sums()))
}

/// Depth-wise submanifold convolution. `weight` is `27 × C`.
pub fn depthwise_sparse_conv<T: Scalar>(nbrs: &NeighborMap, x: &Matrix<T>, weight: &Matrix<T>) -> Result<Matrix<T>> {
    check_rows(nbrs, x, "depthwise_sparse_conv")?;
    if weight.shape() != (KERNEL_VOLUME, x.cols()) {
        return Err(shape_err!("depthwise_sparse_conv: weight {:?} for {} channels", weight.shape(), x.cols()));
    }
    let mut out = Matrix::zeros(x.rows(), x.cols());
    par_rows(&mut out, |v, o| {
        for (tap, u) in nbrs.taps(v) {
            for ((acc, &xv), &w) in o.iter_mut().zip(x.row(u)).zip(weight.row(tap)) {
                *acc += xv * w;
            }
        }
    });
    Ok(out)
}

/// Returns `(dX, dW)`.
pub fn depthwise_sparse_conv_backward<T: Scalar>(
    nbrs: &NeighborMap,
    x: &Matrix<T>,
    weight: &Matrix<T>,
    dout: &Matrix<T>,
) -> Result<(Matrix<T>, Matrix<T>)> {
    check_rows(nbrs, x, "depthwise_sparse_conv_backward")?;
    check_rows(nbrs, dout, "depthwise_sparse_conv_backward")?;
    let c = x.cols();
    let mut dx = Matrix::zeros(x.rows(), c);
    par_rows(&mut dx, |u, d| {
        for (rtap, v) in nbrs.taps(u) {
            let tap = KERNEL_VOLUME - 1 - rtap;
            for ((acc, &g), &w) in d.iter_mut().zip(dout.row(v)).zip(weight.row(tap)) {
                *acc += g * w;
            }
        }
    });
    let mut dw = Matrix::zeros(KERNEL_VOLUME, c);
    for v in 0..x.rows() {
        let g = dout.row(v);
        for (tap, u) in nbrs.taps(v) {
            for ((acc, &xv), &gv) in dw.row_mut(tap).iter_mut().zip(x.row(u)).zip(g) {
                *acc += xv * gv;
            }
        }
    }
    Ok((dx, dw))
}

#[derive(Clone, Copy, Debug)]
pub struct SparseConv {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub cin: usize,
    pub cout: usize,
}

impl SparseConv {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, cin: usize, cout: usize, bias: bool) -> Result<Self> {
        let weight = store.register(format!("{name}.weight"), &[KERNEL_VOLUME, cin, cout], ParamKind::Weight)?;
        let bias = bias.then(|| store.register(format!("{name}.bias"), &[cout], ParamKind::Bias)).transpose()?;
        Ok(Self { weight, bias, cin, cout })
    }

    pub fn param_count(&self) -> usize {
        KERNEL_VOLUME * self.cin * self.cout + if self.bias.is_some() { self.cout } else { 0 }
    }

    pub fn forward<T: Scalar>(&self, ctx: &Ctx<'_, T>, nbrs: &NeighborMap, x: &Matrix<T>) -> Result<Matrix<T>> {
        sparse_conv(nbrs, x, ctx.value(self.weight), self.bias.map(|b| ctx.value(b).as_slice()))
    }

    pub fn backward<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        grads: &mut Grads<T>,
        nbrs: &NeighborMap,
        x: &Matrix<T>,
        dout: &Matrix<T>,
    ) -> Result<Matrix<T>> {
        let (dx, dw, db) = sparse_conv_backward(nbrs, x, store.value(self.weight), dout)?;
        grads.add(self.weight, dw)?;
        if let Some(b) = self.bias {
            grads.add_vec(b, db)?;
        }
        Ok(dx)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct DepthwiseConv {
    pub weight: ParamId,
    pub channels: usize,
}

impl DepthwiseConv {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Result<Self> {
        let weight = store.register(format!("{name}.weight"), &[KERNEL_VOLUME, channels], ParamKind::Weight)?;
        Ok(Self { weight, channels })
    }

    pub fn param_count(&self) -> usize {
        KERNEL_VOLUME * self.channels
    }

    pub fn forward<T: Scalar>(&self, ctx: &Ctx<'_, T>, nbrs: &NeighborMap, x: &Matrix<T>) -> Result<Matrix<T>> {
        depthwise_sparse_conv(nbrs, x, ctx.value(self.weight))
    }

    pub fn backward<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        grads: &mut Grads<T>,
        nbrs: &NeighborMap,
        x: &Matrix<T>,
        dout: &Matrix<T>,
    ) -> Result<Matrix<T>> {
        let (dx, dw) = depthwise_sparse_conv_backward(nbrs, x, store.value(self.weight), dout)?;
        grads.add(self.weight, dw)?;
        Ok(dx)
    }
}
