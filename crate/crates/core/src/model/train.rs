use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::network::{points_to_voxels_backward, Network};
use super::sample::Sample;
use crate::error::{Error, Result};
use crate::geometry::IGNORE_LABEL;
use crate::nn::functional::{cross_entropy, Mode};
use crate::nn::{AdamW, Ctx, Grads, ParamId, ParamStore};
use crate::scalar::Scalar;

fn labeled_points<T>(s: &Sample<T>) -> usize {
    s.point_labels.as_ref().map_or(0, |l| l.iter().filter(|&&v| v != IGNORE_LABEL).count())
}

struct SampleResult<T> {
    loss: T,
    grads: Grads<T>,
    updates: Vec<(ParamId, Vec<T>)>,
}

fn sample_pass<T: Scalar>(
    net: &Network,
    store: &ParamStore<T>,
    sample: &Sample<T>,
    weight: T,
) -> Result<SampleResult<T>> {
    let labels = sample.point_labels.as_ref().ok_or(Error::EmptyLoss)?;
    let mut ctx = Ctx::new(store, Mode::Train);
    let (logits, cache) = net.forward(&mut ctx, sample)?;
    let (loss, dpoints) = cross_entropy(&logits.select_rows(&sample.point_to_voxel), labels)?;
    let dvox = points_to_voxels_backward(&dpoints.scale(weight), &sample.point_to_voxel, sample.voxels())?;
    let mut grads = Grads::for_store(store);
    net.backward(store, &mut grads, sample, &cache, &dvox)?;
    Ok(SampleResult { loss: loss * weight, grads, updates: ctx.into_updates() })
}

/// Cross-entropy over every labeled point of `batch` plus its gradient
/// accumulator and the averaged running-statistic updates. Samples run in
/// parallel; reductions follow batch order.
pub fn batch_loss_and_grads<T: Scalar>(
    net: &Network,
    store: &ParamStore<T>,
    batch: &[Sample<T>],
) -> Result<(T, Grads<T>, Vec<(ParamId, Vec<T>)>)> {
    let counts: Vec<usize> = batch.iter().map(labeled_points).collect();
    let total: usize = counts.iter().sum();
    if total == 0 {
        return Err(Error::EmptyLoss);
    }
    let used: Vec<(&Sample<T>, T)> = batch
        .iter()
        .zip(&counts)
        .filter(|(_, &n)| n > 0)
        .map(|(s, &n)| (s, T::from_usize_lossy(n) / T::from_usize_lossy(total)))
        .collect();
    let results: Vec<SampleResult<T>> =
        used.par_iter().map(|(s, w)| sample_pass(net, store, s, *w)).collect::<Result<_>>()?;

    let mut loss = T::zero();
    let mut grads = Grads::for_store(store);
    let mut updates: Vec<(ParamId, Vec<T>)> = Vec::new();
    let k = T::from_usize_lossy(results.len());
    for r in results {
        loss += r.loss;
        grads.merge(r.grads)?;
        if updates.is_empty() {
            updates = r.updates.into_iter().map(|(id, v)| (id, v.into_iter().map(|x| x / k).collect())).collect();
        } else {
            for ((id, acc), (rid, v)) in updates.iter_mut().zip(r.updates) {
                debug_assert_eq!(*id, rid);
                for (a, x) in acc.iter_mut().zip(v) {
                    *a += x / k;
                }
            }
        }
    }
    Ok((loss, grads, updates))
}

/// Forward, loss, backward, optimizer update and gradient reset. Returns
/// the batch loss before the update.
pub fn train_step<T: Scalar>(net: &Network, store: &mut ParamStore<T>, opt: &AdamW, batch: &[Sample<T>]) -> Result<T> {
    let (loss, grads, updates) = batch_loss_and_grads(net, store, batch)?;
    store.zero_grad();
    store.accumulate(&grads)?;
    opt.step(store)?;
    store.apply_stat_updates(updates);
    store.zero_grad();
    Ok(loss)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Fractions of `steps` after which the learning rate drops tenfold.
    pub decay_at: [f64; 2],
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { steps: 300, batch_size: 2, lr: 0.006, weight_decay: 0.02, decay_at: [0.6, 0.8] }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || !(self.lr >= 0.0 && self.weight_decay >= 0.0) {
            return Err(Error::Config("batch_size must be positive; lr and weight_decay non-negative".into()));
        }
        if self.decay_at.iter().any(|f| !(0.0..=1.0).contains(f)) {
            return Err(Error::Config("decay_at fractions must lie in [0, 1]".into()));
        }
        Ok(())
    }

    /// Step-decayed learning rate for 0-based `step`.
    pub fn lr_at(&self, step: usize) -> f64 {
        let done = step as f64 / self.steps.max(1) as f64;
        self.decay_at.iter().filter(|&&f| done >= f).fold(self.lr, |lr, _| lr * 0.1)
    }
}

/// Runs `cfg.steps` optimizer steps over `samples`, reshuffling with `seed`
/// at every epoch. Returns the per-step losses.
pub fn fit<T: Scalar>(
    net: &Network,
    store: &mut ParamStore<T>,
    samples: &[Sample<T>],
    cfg: &TrainConfig,
    seed: u64,
    mut on_step: impl FnMut(usize, f64),
) -> Result<Vec<f64>> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::EmptyLoss);
    }
    let mut opt = AdamW::new(cfg.lr, cfg.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = Vec::new();
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        if order.len() < cfg.batch_size.min(samples.len()) {
            let mut epoch: Vec<usize> = (0..samples.len()).collect();
            epoch.shuffle(&mut rng);
            order.extend(epoch);
        }
        let take = cfg.batch_size.min(samples.len());
        let batch: Vec<Sample<T>> = order.drain(..take).map(|i| samples[i].clone()).collect();
        opt.lr = cfg.lr_at(step);
        let loss = train_step(net, store, &opt, &batch)?.as_f64();
        on_step(step, loss);
        losses.push(loss);
    }
    Ok(losses)
}

/// Mean loss over the last `epoch_steps` steps; `None` for an empty log.
pub fn final_epoch_loss(losses: &[f64], epoch_steps: usize) -> Option<f64> {
    let n = epoch_steps.clamp(1, losses.len().max(1)).min(losses.len());
    (n > 0).then(|| losses[losses.len() - n..].iter().sum::<f64>() / n as f64)
}

/// Arg-max class per point, evaluated with running statistics.
pub fn predict<T: Scalar>(net: &Network, store: &ParamStore<T>, sample: &Sample<T>) -> Result<Vec<i64>> {
    let mut ctx = Ctx::new(store, Mode::Eval);
    let logits = net.segment(&mut ctx, sample)?;
    Ok(logits
        .rows_iter()
        .map(|r| {
            let mut best = 0;
            for (j, &v) in r.iter().enumerate() {
                if v > r[best] {
                    best = j;
                }
            }
            best as i64
        })
        .collect())
}

/// Mean cross-entropy over every labeled point, in eval mode.
pub fn eval_loss<T: Scalar>(net: &Network, store: &ParamStore<T>, samples: &[Sample<T>]) -> Result<f64> {
    let mut sum = 0.0;
    let mut count = 0usize;
    for s in samples {
        let n = labeled_points(s);
        if n == 0 {
            continue;
        }
        let mut ctx = Ctx::new(store, Mode::Eval);
        let logits = net.segment(&mut ctx, s)?;
        let (l, _) = cross_entropy(&logits, s.point_labels.as_ref().expect("counted"))?;
        sum += l.as_f64() * n as f64;
        count += n;
    }
    if count == 0 {
        return Err(Error::EmptyLoss);
    }
    Ok(sum / count as f64)
}
