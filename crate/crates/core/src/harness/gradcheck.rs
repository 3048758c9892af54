//! Central finite differences against the hand-written backward passes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::nn::{Grads, ParamKind, ParamStore};
use crate::tensor::Matrix;

pub const FD_STEP: f64 = 1e-5;

/// `|a − n| / max(|a|, |n|, 1e-8)`.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

fn finite(v: f64, what: &str) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Oracle(format!("{what} evaluated to {v}")))
    }
}

/// Central-difference gradient of `f` at `x`.
pub fn finite_diff_grad(mut f: impl FnMut(&[f64]) -> Result<f64>, x: &[f64], h: f64) -> Result<Vec<f64>> {
    let mut probe = x.to_vec();
    let mut g = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let up = finite(f(&probe)?, "f(x + h)")?;
        probe[i] = x[i] - h;
        let down = finite(f(&probe)?, "f(x - h)")?;
        probe[i] = x[i];
        g.push((up - down) / (2.0 * h));
    }
    Ok(g)
}

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    pub h: f64,
    /// Coordinates probed per block; `None` probes all of them.
    pub max_coords: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self { h: FD_STEP, max_coords: Some(24), seed: 0 }
    }
}

/// Worst coordinate of one parameter block (or of the input).
#[derive(Clone, Debug)]
pub struct BlockReport {
    pub name: String,
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
}

impl BlockReport {
    fn new(name: String) -> Self {
        Self { name, checked: 0, max_rel_err: 0.0, worst_index: 0, worst_analytic: 0.0, worst_numeric: 0.0 }
    }

    fn record(&mut self, index: usize, analytic: f64, numeric: f64) {
        self.checked += 1;
        let e = rel_err(analytic, numeric);
        if e > self.max_rel_err || self.checked == 1 {
            self.max_rel_err = e;
            self.worst_index = index;
            self.worst_analytic = analytic;
            self.worst_numeric = numeric;
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub case: String,
    pub tolerance: f64,
    pub blocks: Vec<BlockReport>,
    /// Trainable blocks of the checked model that no probe touched.
    pub uncovered: Vec<String>,
    /// Blocks whose exact gradient is zero by a shift invariance, with the
    /// largest analytic magnitude observed; finite differences cannot
    /// resolve these below rounding noise.
    pub invariant: Vec<(String, f64)>,
}

/// Bound on analytic gradients of blocks that the loss is invariant to.
pub const INVARIANT_TOLERANCE: f64 = 1e-12;

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.blocks.iter().map(|b| b.max_rel_err).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        !self.blocks.is_empty()
            && self.uncovered.is_empty()
            && self.max_rel_err() <= self.tolerance
            && self.invariant.iter().all(|(_, g)| *g <= INVARIANT_TOLERANCE)
    }

    pub fn checked(&self) -> usize {
        self.blocks.iter().map(|b| b.checked).sum()
    }

    pub fn worst(&self) -> Option<&BlockReport> {
        self.blocks.iter().max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
    }
}

fn pick_coords(n: usize, opts: &GradCheckOptions, salt: u64) -> Vec<usize> {
    match opts.max_coords {
        Some(k) if k < n => {
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15));
            let mut idx = rand::seq::index::sample(&mut rng, n, k).into_vec();
            idx.sort_unstable();
            idx
        }
        _ => (0..n).collect(),
    }
}

/// Compares `analytic` with central differences of `loss` for every
/// trainable block whose name passes `filter`. Blocks without an analytic
/// gradient are compared against zero.
pub fn check_param_grads(
    store: &mut ParamStore<f64>,
    analytic: &Grads<f64>,
    filter: impl Fn(&str) -> bool,
    loss: impl Fn(&ParamStore<f64>) -> Result<f64>,
    opts: &GradCheckOptions,
) -> Result<Vec<BlockReport>> {
    let ids: Vec<_> = store.ids().collect();
    let mut reports = Vec::new();
    for id in ids {
        let b = store.block(id);
        if !b.kind.trainable() || !filter(&b.name) {
            continue;
        }
        let zeros;
        let a = match analytic.get(id) {
            Some(g) => g,
            None => {
                zeros = Matrix::zeros(b.value.rows(), b.value.cols());
                &zeros
            }
        };
        if a.shape() != b.value.shape() {
            return Err(Error::Oracle(format!("gradient shape {:?} for `{}` {:?}", a.shape(), b.name, b.value.shape())));
        }
        let a = a.as_slice().to_vec();
        let mut report = BlockReport::new(b.name.clone());
        for k in pick_coords(a.len(), opts, id.index() as u64) {
            let orig = store.value(id).as_slice()[k];
            store.value_mut(id).as_mut_slice()[k] = orig + opts.h;
            let up = finite(loss(store)?, "loss(w + h)")?;
            store.value_mut(id).as_mut_slice()[k] = orig - opts.h;
            let down = finite(loss(store)?, "loss(w - h)")?;
            store.value_mut(id).as_mut_slice()[k] = orig;
            report.record(k, a[k], (up - down) / (2.0 * opts.h));
        }
        reports.push(report);
    }
    Ok(reports)
}

/// Same comparison for the gradient with respect to an input matrix.
pub fn check_input_grad(
    name: &str,
    x: &Matrix<f64>,
    analytic: &Matrix<f64>,
    loss: impl Fn(&Matrix<f64>) -> Result<f64>,
    opts: &GradCheckOptions,
) -> Result<BlockReport> {
    if analytic.shape() != x.shape() {
        return Err(Error::Oracle(format!("input gradient {:?} for input {:?}", analytic.shape(), x.shape())));
    }
    let mut probe = x.clone();
    let mut report = BlockReport::new(name.to_string());
    for k in pick_coords(x.as_slice().len(), opts, u64::MAX) {
        let orig = x.as_slice()[k];
        probe.as_mut_slice()[k] = orig + opts.h;
        let up = finite(loss(&probe)?, "loss(x + h)")?;
        probe.as_mut_slice()[k] = orig - opts.h;
        let down = finite(loss(&probe)?, "loss(x - h)")?;
        probe.as_mut_slice()[k] = orig;
        report.record(k, analytic.as_slice()[k], (up - down) / (2.0 * opts.h));
    }
    Ok(report)
}

/// Replaces the default initialization with values that make every path
/// carry a gradient: weights `N(0, 1/fan_in)`, position tables `N(0, 0.3²)`,
/// biases and shifts uniform in `[-0.5, 0.5]`, scales uniform in `[0.5, 1.5]`.
pub fn randomize_for_check(store: &mut ParamStore<f64>, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let kind = store.block(id).kind;
        let fan_in = store.value(id).rows().max(1) as f64;
        for v in store.value_mut(id).as_mut_slice() {
            let z: f64 = StandardNormal.sample(&mut rng);
            *v = match kind {
                ParamKind::Weight => z / fan_in.sqrt(),
                ParamKind::RpeTable => 0.3 * z,
                ParamKind::Bias | ParamKind::Beta => rng.random_range(-0.5..0.5),
                ParamKind::Gamma => rng.random_range(0.5..1.5),
                ParamKind::RunningMean => 0.1 * z,
                ParamKind::RunningVar => rng.random_range(0.5..1.5),
            };
        }
    }
}

/// Fixed random projection turning a matrix output into a scalar loss.
pub fn probe_matrix(rows: usize, cols: usize, seed: u64) -> Matrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Matrix::from_fn(rows, cols, |_, _| StandardNormal.sample(&mut rng))
}

/// `Σ out ⊙ r`.
pub fn probe_loss(out: &Matrix<f64>, r: &Matrix<f64>) -> Result<f64> {
    Ok(out.hadamard(r)?.sum())
}
