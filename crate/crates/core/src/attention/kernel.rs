//! Multi-head attention inside each window, with contextual relative position
//! encoding: for head `h` and window members `i, j`,
//!
//! ```text
//! logit_ij = (q_i·k_j + Σ_axes q_i·Eq[bin(p_i−p_j)] + Σ_axes k_j·Ek[bin(p_i−p_j)]) / scale
//! out_i    = Σ_j softmax_j(logit_i·) · (v_j + Σ_axes Ev[bin(p_i−p_j)])
//! ```
//! Head `h` reads channel slice `h·d .. (h+1)·d` of the projections and of
//! every table. Windows are processed independently (in parallel); table
//! gradients are reduced in window order.

use rayon::prelude::*;

use super::rpe::{rpe_bin, RpeView};
use crate::error::{shape_err, Result};
use crate::geometry::{Coord, WindowMap};
use crate::nn::functional::softmax_in_place;
use crate::scalar::Scalar;
use crate::tensor::{axpy, dot, Matrix};

/// Attention probabilities per window, laid out `heads × n × n`.
#[derive(Clone, Debug)]
pub struct AttentionKernelCache<T> {
    probs: Vec<Vec<T>>,
    sizes: Vec<usize>,
}

impl<T: Scalar> AttentionKernelCache<T> {
    /// Probability row of window-local member `i` for `head` in window `window`.
    pub fn row(&self, window: usize, head: usize, i: usize) -> &[T] {
        let n = self.sizes[window];
        &self.probs[window][(head * n + i) * n..(head * n + i + 1) * n]
    }

    pub fn windows(&self) -> usize {
        self.sizes.len()
    }
}

#[derive(Clone, Debug)]
pub struct KernelGrads<T> {
    pub dq: Matrix<T>,
    pub dk: Matrix<T>,
    pub dv: Matrix<T>,
    pub table_q: [Matrix<T>; 3],
    pub table_k: [Matrix<T>; 3],
    pub table_v: [Matrix<T>; 3],
}

struct Geometry<'a> {
    coords: &'a [Coord],
    w_max: i32,
}

impl Geometry<'_> {
    /// Per-pair bins, `(i·n + j)·3 + axis`.
    fn bins(&self, rows: &[usize]) -> Vec<usize> {
        let n = rows.len();
        let mut b = Vec::with_capacity(n * n * 3);
        for &ri in rows {
            let pi = self.coords[ri];
            for &rj in rows {
                let pj = self.coords[rj];
                for a in 0..3 {
                    b.push(rpe_bin(pi[a] - pj[a], self.w_max));
                }
            }
        }
        b
    }
}

fn validate<T: Scalar>(
    q: &Matrix<T>,
    k: &Matrix<T>,
    v: &Matrix<T>,
    coords: &[Coord],
    wm: &WindowMap,
    heads: usize,
    rpe: &RpeView<'_, T>,
) -> Result<()> {
    let (n, c) = q.shape();
    if k.shape() != (n, c) || v.shape() != (n, c) {
        return Err(shape_err!("attention: q {:?}, k {:?}, v {:?}", q.shape(), k.shape(), v.shape()));
    }
    if coords.len() != n || wm.rows() != n {
        return Err(shape_err!("attention: {n} rows, {} coords, window map over {} rows", coords.len(), wm.rows()));
    }
    if heads == 0 || c % heads != 0 {
        return Err(shape_err!("attention: {c} channels not divisible into {heads} heads"));
    }
    let bins = 2 * rpe.w_max as usize + 1;
    for t in rpe.q.iter().chain(&rpe.k).chain(&rpe.v) {
        if t.shape() != (bins, c) {
            return Err(shape_err!("attention: position table {:?}, expected {:?}", t.shape(), (bins, c)));
        }
    }
    Ok(())
}

/// Returns the `N × C` output (input row order) and the cached probabilities.
#[allow(clippy::too_many_arguments)]
pub fn window_attention<T: Scalar>(
    q: &Matrix<T>,
    k: &Matrix<T>,
    v: &Matrix<T>,
    coords: &[Coord],
    wm: &WindowMap,
    heads: usize,
    scale: T,
    rpe: &RpeView<'_, T>,
) -> Result<(Matrix<T>, AttentionKernelCache<T>)> {
    validate(q, k, v, coords, wm, heads, rpe)?;
    let c = q.cols();
    let dh = c / heads;
    let nb = 2 * rpe.w_max as usize + 1;
    let inv_scale = T::one() / scale;
    let geo = Geometry { coords, w_max: rpe.w_max };

    let per_window: Vec<(Vec<T>, Vec<T>)> = wm
        .groups()
        .par_iter()
        .map(|g| {
            let rows = &g.rows;
            let n = rows.len();
            let bins = geo.bins(rows);
            let mut out = vec![T::zero(); n * c];
            let mut probs = vec![T::zero(); heads * n * n];
            let mut qe = vec![T::zero(); n * 3 * nb];
            let mut ke = vec![T::zero(); n * 3 * nb];
            let mut s = vec![T::zero(); 3 * nb];
            for h in 0..heads {
                let hs = h * dh..(h + 1) * dh;
                for (i, &r) in rows.iter().enumerate() {
                    let (qi, ki) = (&q.row(r)[hs.clone()], &k.row(r)[hs.clone()]);
                    for a in 0..3 {
                        for b in 0..nb {
                            qe[(i * 3 + a) * nb + b] = dot(qi, &rpe.q[a].row(b)[hs.clone()]);
                            ke[(i * 3 + a) * nb + b] = dot(ki, &rpe.k[a].row(b)[hs.clone()]);
                        }
                    }
                }
                for (i, &ri) in rows.iter().enumerate() {
                    let qi = &q.row(ri)[hs.clone()];
                    let prow = &mut probs[(h * n + i) * n..(h * n + i + 1) * n];
                    for (j, &rj) in rows.iter().enumerate() {
                        let mut l = dot(qi, &k.row(rj)[hs.clone()]);
                        for a in 0..3 {
                            let b = bins[(i * n + j) * 3 + a];
                            l += qe[(i * 3 + a) * nb + b] + ke[(j * 3 + a) * nb + b];
                        }
                        prow[j] = l * inv_scale;
                    }
                    softmax_in_place(prow);

                    let orow = &mut out[i * c + hs.start..i * c + hs.end];
                    s.fill(T::zero());
                    for (j, &rj) in rows.iter().enumerate() {
                        let p = prow[j];
                        axpy(orow, p, &v.row(rj)[hs.clone()]);
                        for a in 0..3 {
                            s[a * nb + bins[(i * n + j) * 3 + a]] += p;
                        }
                    }
                    for a in 0..3 {
                        for b in 0..nb {
                            let w = s[a * nb + b];
                            if w != T::zero() {
                                axpy(orow, w, &rpe.v[a].row(b)[hs.clone()]);
                            }
                        }
                    }
                }
            }
            (out, probs)
        })
        .collect();

    let mut out = Matrix::zeros(q.rows(), c);
    let mut probs = Vec::with_capacity(per_window.len());
    for (g, (o, p)) in wm.groups().iter().zip(per_window) {
        for (i, &r) in g.rows.iter().enumerate() {
            out.row_mut(r).copy_from_slice(&o[i * c..(i + 1) * c]);
        }
        probs.push(p);
    }
    let sizes = wm.groups().iter().map(|g| g.rows.len()).collect();
    Ok((out, AttentionKernelCache { probs, sizes }))
}

struct WindowGrads<T> {
    dq: Vec<T>,
    dk: Vec<T>,
    dv: Vec<T>,
    /// `[q_x, q_y, q_z, k_x, …, v_z]`, each `bins × C`.
    tables: Vec<Vec<T>>,
}

#[allow(clippy::too_many_arguments)]
pub fn window_attention_backward<T: Scalar>(
    q: &Matrix<T>,
    k: &Matrix<T>,
    v: &Matrix<T>,
    coords: &[Coord],
    wm: &WindowMap,
    heads: usize,
    scale: T,
    rpe: &RpeView<'_, T>,
    cache: &AttentionKernelCache<T>,
    dout: &Matrix<T>,
) -> Result<KernelGrads<T>> {
    validate(q, k, v, coords, wm, heads, rpe)?;
    if dout.shape() != q.shape() || cache.probs.len() != wm.len() {
        return Err(shape_err!("attention backward: grad {:?} vs {:?}", dout.shape(), q.shape()));
    }
    let c = q.cols();
    let dh = c / heads;
    let nb = 2 * rpe.w_max as usize + 1;
    let inv_scale = T::one() / scale;
    let geo = Geometry { coords, w_max: rpe.w_max };

    let per_window: Vec<WindowGrads<T>> = wm
        .groups()
        .par_iter()
        .zip(cache.probs.par_iter())
        .map(|(g, probs)| {
            let rows = &g.rows;
            let n = rows.len();
            let bins = geo.bins(rows);
            let mut wg = WindowGrads {
                dq: vec![T::zero(); n * c],
                dk: vec![T::zero(); n * c],
                dv: vec![T::zero(); n * c],
                tables: vec![vec![T::zero(); nb * c]; 9],
            };
            let mut dev = vec![T::zero(); 3 * nb];
            let mut acc = vec![T::zero(); 3 * nb];
            let mut da = vec![T::zero(); n];
            let mut gk = vec![T::zero(); n * 3 * nb];
            for h in 0..heads {
                let hs = h * dh..(h + 1) * dh;
                gk.fill(T::zero());
                for (i, &ri) in rows.iter().enumerate() {
                    let go = &dout.row(ri)[hs.clone()];
                    let prow = &probs[(h * n + i) * n..(h * n + i + 1) * n];
                    for a in 0..3 {
                        for b in 0..nb {
                            dev[a * nb + b] = dot(go, &rpe.v[a].row(b)[hs.clone()]);
                        }
                    }
                    // value path
                    acc.fill(T::zero());
                    for (j, &rj) in rows.iter().enumerate() {
                        let p = prow[j];
                        axpy(&mut wg.dv[j * c + hs.start..j * c + hs.end], p, go);
                        let mut d = dot(go, &v.row(rj)[hs.clone()]);
                        for a in 0..3 {
                            let b = bins[(i * n + j) * 3 + a];
                            d += dev[a * nb + b];
                            acc[a * nb + b] += p;
                        }
                        da[j] = d;
                    }
                    for a in 0..3 {
                        for b in 0..nb {
                            let w = acc[a * nb + b];
                            if w != T::zero() {
                                let t = &mut wg.tables[6 + a][b * c + hs.start..b * c + hs.end];
                                axpy(t, w, go);
                            }
                        }
                    }
                    // softmax and logit paths
                    let mean = dot(prow, &da);
                    let qi = &q.row(ri)[hs.clone()];
                    acc.fill(T::zero());
                    for (j, &rj) in rows.iter().enumerate() {
                        let gl = prow[j] * (da[j] - mean) * inv_scale;
                        if gl == T::zero() {
                            continue;
                        }
                        axpy(&mut wg.dq[i * c + hs.start..i * c + hs.end], gl, &k.row(rj)[hs.clone()]);
                        axpy(&mut wg.dk[j * c + hs.start..j * c + hs.end], gl, qi);
                        for a in 0..3 {
                            let b = bins[(i * n + j) * 3 + a];
                            acc[a * nb + b] += gl;
                            gk[(j * 3 + a) * nb + b] += gl;
                        }
                    }
                    for a in 0..3 {
                        for b in 0..nb {
                            let w = acc[a * nb + b];
                            if w != T::zero() {
                                axpy(&mut wg.dq[i * c + hs.start..i * c + hs.end], w, &rpe.q[a].row(b)[hs.clone()]);
                                axpy(&mut wg.tables[a][b * c + hs.start..b * c + hs.end], w, qi);
                            }
                        }
                    }
                }
                for (j, &rj) in rows.iter().enumerate() {
                    let kj = &k.row(rj)[hs.clone()];
                    for a in 0..3 {
                        for b in 0..nb {
                            let w = gk[(j * 3 + a) * nb + b];
                            if w != T::zero() {
                                axpy(&mut wg.dk[j * c + hs.start..j * c + hs.end], w, &rpe.k[a].row(b)[hs.clone()]);
                                axpy(&mut wg.tables[3 + a][b * c + hs.start..b * c + hs.end], w, kj);
                            }
                        }
                    }
                }
            }
            wg
        })
        .collect();

    let n_rows = q.rows();
    let mut dq = Matrix::zeros(n_rows, c);
    let mut dk = Matrix::zeros(n_rows, c);
    let mut dv = Matrix::zeros(n_rows, c);
    let mut tables: Vec<Matrix<T>> = (0..9).map(|_| Matrix::zeros(nb, c)).collect();
    for (g, wg) in wm.groups().iter().zip(per_window) {
        for (i, &r) in g.rows.iter().enumerate() {
            dq.row_mut(r).copy_from_slice(&wg.dq[i * c..(i + 1) * c]);
            dk.row_mut(r).copy_from_slice(&wg.dk[i * c..(i + 1) * c]);
            dv.row_mut(r).copy_from_slice(&wg.dv[i * c..(i + 1) * c]);
        }
        for (t, local) in tables.iter_mut().zip(&wg.tables) {
            for (a, &b) in t.as_mut_slice().iter_mut().zip(local) {
                *a += b;
            }
        }
    }
    let mut it = tables.into_iter();
    let mut three = || [it.next().unwrap(), it.next().unwrap(), it.next().unwrap()];
    let (table_q, table_k, table_v) = (three(), three(), three());
    Ok(KernelGrads { dq, dk, dv, table_q, table_k, table_v })
}
