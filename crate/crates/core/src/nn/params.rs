use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{shape_err, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

/// Handle of a block inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Role of a block; decides initialization and whether the optimizer touches it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamKind {
    Weight,
    Bias,
    Gamma,
    Beta,
    /// Contextual relative-position table.
    RpeTable,
    RunningMean,
    RunningVar,
}

impl ParamKind {
    pub fn trainable(self) -> bool {
        !matches!(self, ParamKind::RunningMean | ParamKind::RunningVar)
    }
}

/// One named block with its gradient and AdamW moments.
///
/// Values are stored as a matrix whose row count is the product of all but
/// the last logical dimension. The gradient is `None` until a backward pass
/// touches the block; the moments stay empty until the first optimizer step.
#[derive(Clone, Debug)]
pub struct ParamBlock<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub kind: ParamKind,
    pub value: Matrix<T>,
    pub grad: Option<Matrix<T>>,
    pub m: Vec<T>,
    pub v: Vec<T>,
    pub step: u64,
}

impl<T: Scalar> ParamBlock<T> {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Ordered registry of parameter blocks. Iteration order is registration order.
#[derive(Clone, Debug)]
pub struct ParamStore<T> {
    blocks: Vec<ParamBlock<T>>,
    names: HashMap<String, ParamId>,
    seed: u64,
}

fn matrix_dims(shape: &[usize]) -> (usize, usize) {
    match shape.split_last() {
        None => (1, 1),
        Some((&last, rest)) => (rest.iter().product(), last),
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new(seed: u64) -> Self {
        Self { blocks: Vec::new(), names: HashMap::new(), seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn register(&mut self, name: impl Into<String>, shape: &[usize], kind: ParamKind) -> Result<ParamId> {
        let name = name.into();
        if self.names.contains_key(&name) {
            return Err(Error::Config(format!("parameter `{name}` registered twice")));
        }
        let (r, c) = matrix_dims(shape);
        let id = ParamId(self.blocks.len());
        let fill = if kind == ParamKind::Gamma || kind == ParamKind::RunningVar { T::one() } else { T::zero() };
        self.blocks.push(ParamBlock {
            name: name.clone(),
            shape: shape.to_vec(),
            kind,
            value: Matrix::filled(r, c, fill),
            grad: None,
            m: Vec::new(),
            v: Vec::new(),
            step: 0,
        });
        self.names.insert(name, id);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.names.get(name).copied()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.blocks.len()).map(ParamId)
    }

    pub fn block(&self, id: ParamId) -> &ParamBlock<T> {
        &self.blocks[id.0]
    }

    pub fn block_mut(&mut self, id: ParamId) -> &mut ParamBlock<T> {
        &mut self.blocks[id.0]
    }

    pub fn blocks(&self) -> &[ParamBlock<T>] {
        &self.blocks
    }

    #[inline]
    pub fn value(&self, id: ParamId) -> &Matrix<T> {
        &self.blocks[id.0].value
    }

    #[inline]
    pub fn value_mut(&mut self, id: ParamId) -> &mut Matrix<T> {
        &mut self.blocks[id.0].value
    }

    /// Sum of trainable entries.
    pub fn trainable_count(&self) -> usize {
        self.blocks.iter().filter(|b| b.kind.trainable()).map(ParamBlock::numel).sum()
    }

    pub fn zero_grad(&mut self) {
        for b in &mut self.blocks {
            b.grad = None;
        }
    }

    /// Adds a gradient accumulator into the stored gradients.
    pub fn accumulate(&mut self, grads: &Grads<T>) -> Result<()> {
        if grads.slots.len() != self.blocks.len() {
            return Err(shape_err!("gradient buffer for {} blocks, store has {}", grads.slots.len(), self.blocks.len()));
        }
        for (b, g) in self.blocks.iter_mut().zip(&grads.slots) {
            match (g, &mut b.grad) {
                (Some(g), Some(acc)) => acc.add_assign(g)?,
                (Some(g), slot @ None) => {
                    if g.shape() != b.value.shape() {
                        return Err(shape_err!("gradient {:?} for `{}` {:?}", g.shape(), b.name, b.value.shape()));
                    }
                    *slot = Some(g.clone());
                }
                (None, _) => {}
            }
        }
        Ok(())
    }

    /// Writes running-statistic updates collected during a train-mode forward.
    pub fn apply_stat_updates(&mut self, updates: Vec<(ParamId, Vec<T>)>) {
        for (id, vals) in updates {
            self.blocks[id.0].value.as_mut_slice().copy_from_slice(&vals);
        }
    }

    /// Copies values (not optimizer state) from a store with identical layout.
    pub fn copy_values_from(&mut self, other: &ParamStore<T>) -> Result<()> {
        if other.blocks.len() != self.blocks.len() {
            return Err(shape_err!("copy_values_from: {} vs {} blocks", other.blocks.len(), self.blocks.len()));
        }
        for (a, b) in self.blocks.iter_mut().zip(&other.blocks) {
            if a.name != b.name || a.shape != b.shape {
                return Err(shape_err!("block `{}` {:?} vs `{}` {:?}", a.name, a.shape, b.name, b.shape));
            }
            a.value = b.value.clone();
        }
        Ok(())
    }
}

/// Per-block gradient accumulator filled by backward passes.
#[derive(Clone, Debug)]
pub struct Grads<T> {
    slots: Vec<Option<Matrix<T>>>,
}

impl<T: Scalar> Grads<T> {
    pub fn for_store(store: &ParamStore<T>) -> Self {
        Self { slots: vec![None; store.len()] }
    }

    pub fn add(&mut self, id: ParamId, g: Matrix<T>) -> Result<()> {
        match &mut self.slots[id.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => {
                *slot = Some(g);
                Ok(())
            }
        }
    }

    pub fn add_vec(&mut self, id: ParamId, g: Vec<T>) -> Result<()> {
        let n = g.len();
        self.add(id, Matrix::from_vec(1, n, g)?)
    }

    pub fn get(&self, id: ParamId) -> Option<&Matrix<T>> {
        self.slots[id.0].as_ref()
    }

    /// Sums another accumulator into this one, block by block.
    pub fn merge(&mut self, other: Grads<T>) -> Result<()> {
        for (i, g) in other.slots.into_iter().enumerate() {
            if let Some(g) = g {
                self.add(ParamId(i), g)?;
            }
        }
        Ok(())
    }

    pub fn scale(&mut self, s: T) {
        for g in self.slots.iter_mut().flatten() {
            for v in g.as_mut_slice() {
                *v *= s;
            }
        }
    }
}

/// Initialization recipe.
#[derive(Clone, Copy, Debug)]
pub struct InitScheme {
    pub seed: u64,
    /// Target standard deviation of weight entries after truncation.
    pub std: f64,
    /// Truncation bound in units of the underlying normal's standard deviation.
    pub clip_sigmas: f64,
}

impl Default for InitScheme {
    fn default() -> Self {
        Self { seed: 0, std: 0.02, clip_sigmas: 2.0 }
    }
}

/// Standard deviation of `N(0, 1)` truncated to `[-a, a]`.
fn truncated_unit_std(a: f64) -> f64 {
    let pdf = (-0.5 * a * a).exp() / (2.0 * std::f64::consts::PI).sqrt();
    let mass = libm::erf(a / std::f64::consts::SQRT_2);
    (1.0 - 2.0 * a * pdf / mass).sqrt()
}

/// Fills every block according to its kind: weights from a truncated normal,
/// biases / betas / RPE tables / running means at 0, gammas / running variances at 1.
///
/// The underlying normal is widened so the truncated distribution has
/// standard deviation `scheme.std`.
pub fn init_params<T: Scalar>(store: &mut ParamStore<T>, scheme: &InitScheme) {
    let mut rng = ChaCha8Rng::seed_from_u64(scheme.seed);
    let sigma = scheme.std / truncated_unit_std(scheme.clip_sigmas);
    let bound = scheme.clip_sigmas * sigma;
    let normal = Normal::new(0.0, sigma).expect("positive std");
    for b in &mut store.blocks {
        let vals = b.value.as_mut_slice();
        match b.kind {
            ParamKind::Weight => {
                for v in vals.iter_mut() {
                    let s = loop {
                        let s: f64 = normal.sample(&mut rng);
                        if s.abs() <= bound {
                            break s;
                        }
                    };
                    *v = T::lit(s);
                }
            }
            ParamKind::Gamma | ParamKind::RunningVar => vals.fill(T::one()),
            ParamKind::Bias | ParamKind::Beta | ParamKind::RpeTable | ParamKind::RunningMean => {
                vals.fill(T::zero())
            }
        }
        b.m.clear();
        b.v.clear();
        b.step = 0;
    }
}
