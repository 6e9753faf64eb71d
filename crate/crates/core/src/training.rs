//! Adam with step decay, the epoch loop, and evaluation.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::CloudSample;
use crate::diffarray::ParamStore;
use crate::error::{Error, Result};
use crate::geometry::PointSet;
use crate::metrics::{cd_l1, cd_l2, f_score, LossReport, DEFAULT_FSCORE_TAU};
use crate::model::DmfNet;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub lr0: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub decay_factor: f64,
    pub decay_every: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Rescale the batch gradient to at most this global L2 norm.
    pub clip_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr0: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            decay_factor: 0.7,
            decay_every: 20,
            epochs: 120,
            batch_size: 16,
            seed: 0,
            clip_norm: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if !(self.lr0 >= 0.0 && self.lr0.is_finite()) {
            return bad("lr0 must be finite and non-negative");
        }
        if !(self.beta1 > 0.0 && self.beta1 < 1.0 && self.beta2 > 0.0 && self.beta2 < 1.0) {
            return bad("beta1 and beta2 must lie in (0, 1)");
        }
        if !(self.eps > 0.0 && self.decay_factor > 0.0) {
            return bad("eps and decay_factor must be positive");
        }
        if self.decay_every == 0 || self.epochs == 0 || self.batch_size == 0 {
            return bad("decay_every, epochs and batch_size must be positive");
        }
        if matches!(self.clip_norm, Some(c) if !(c > 0.0)) {
            return bad("clip_norm must be positive");
        }
        Ok(())
    }
}

/// Step-decayed learning rate for a zero-based epoch.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    cfg.lr0 * cfg.decay_factor.powi((epoch / cfg.decay_every) as i32)
}

/// Adam moments, one pair per parameter in store order.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub t: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(params: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = params
            .iter()
            .map(|(_, p)| Tensor::zeros(p.value.shape().to_vec()))
            .collect();
        Self {
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn quantize_f32(&mut self) {
        self.m.iter_mut().chain(&mut self.v).for_each(Tensor::quantize_f32);
    }
}

/// One bias-corrected Adam update from the gradients held in `params`.
pub fn adam_step(params: &mut ParamStore, state: &mut AdamState, lr: f64, cfg: &TrainConfig) -> Result<()> {
    if state.m.len() != params.len() {
        return Err(Error::invalid(
            "adam_step",
            format!("{} moments for {} parameters", state.m.len(), params.len()),
        ));
    }
    state.t += 1;
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let c1 = 1.0 - b1.powi(state.t as i32);
    let c2 = 1.0 - b2.powi(state.t as i32);
    for ((p, m), v) in params.iter_mut().zip(&mut state.m).zip(&mut state.v) {
        if p.grad.shape() != m.shape() {
            return Err(Error::shape("adam_step", p.grad.shape(), m.shape()));
        }
        let w = p.value.data_mut();
        let (m, v) = (m.data_mut(), v.data_mut());
        for (i, &g) in p.grad.data().iter().enumerate() {
            m[i] = b1 * m[i] + (1.0 - b1) * g;
            v[i] = b2 * v[i] + (1.0 - b2) * g * g;
            let mhat = m[i] / c1;
            let vhat = v[i] / c2;
            w[i] -= lr * mhat / (vhat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

fn clip_gradients(params: &mut ParamStore, max_norm: f64) {
    let norm = params
        .iter()
        .flat_map(|(_, p)| p.grad.data().iter())
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for p in params.iter_mut() {
            p.grad = p.grad.map(|g| g * s);
        }
    }
}

/// Zero-based sample order of one epoch: a seeded permutation without replacement.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

/// Forward, backward and Adam for one batch; returns the batch-mean losses.
pub fn train_batch(
    net: &mut DmfNet,
    batch: &[&CloudSample],
    state: &mut AdamState,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<LossReport> {
    net.params.zero_grad();
    let scale = 1.0 / batch.len() as f64;
    let mut reports = Vec::with_capacity(batch.len());
    for sample in batch {
        let grads = {
            let mut g = net.graph();
            let (_, loss) = net.loss(&mut g, &sample.partial, &sample.image, &sample.gt)?;
            let report = loss.report(&g);
            if !report.total.is_finite() {
                return Err(Error::NonFinite("training loss".into()));
            }
            reports.push(report);
            g.backward(loss.total)?
        };
        net.params.accumulate(&grads, scale);
    }
    if let Some(c) = cfg.clip_norm {
        clip_gradients(&mut net.params, c);
    }
    adam_step(&mut net.params, state, lr, cfg)?;
    Ok(LossReport::mean(&reports))
}

/// One pass over `data` in seeded shuffled batches. Returns the mean of the
/// per-batch losses.
pub fn train_epoch(
    net: &mut DmfNet,
    data: &[CloudSample],
    cfg: &TrainConfig,
    state: &mut AdamState,
    epoch: usize,
) -> Result<LossReport> {
    if data.is_empty() {
        return Err(Error::invalid("train_epoch", "empty dataset"));
    }
    let lr = lr_at(epoch, cfg);
    let order = epoch_order(data.len(), cfg.seed, epoch);
    let mut reports = Vec::new();
    for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
        let batch: Vec<&CloudSample> = chunk.iter().map(|&i| &data[i]).collect();
        let r = train_batch(net, &batch, state, lr, cfg).map_err(|e| match e {
            Error::NonFinite(what) => Error::NonFinite(format!("{what} at epoch {epoch}, batch {b}")),
            other => other,
        })?;
        reports.push(r);
    }
    Ok(LossReport::mean(&reports))
}

/// Header of the per-epoch CSV log.
pub const LOG_HEADER: &str = "epoch,lr,cd_coarse,cd_intermediate,cd_final,total";

/// One finished epoch. `epoch` counts completed epochs, so the first line
/// of a log is epoch 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub loss: LossReport,
}

impl EpochLog {
    /// A CSV row without a trailing newline. Floats use the shortest
    /// representation that round-trips, so equal logs mean equal values.
    pub fn csv_row(&self) -> String {
        let l = &self.loss;
        format!(
            "{},{},{},{},{},{}",
            self.epoch, self.lr, l.cd_coarse, l.cd_intermediate, l.cd_final, l.total
        )
    }
}

/// Trains from zero-based epoch `start` up to `cfg.epochs`, calling
/// `after_epoch` once per finished epoch (for logging and checkpoints).
pub fn fit<F>(
    net: &mut DmfNet,
    state: &mut AdamState,
    data: &[CloudSample],
    cfg: &TrainConfig,
    start: usize,
    mut after_epoch: F,
) -> Result<Vec<EpochLog>>
where
    F: FnMut(&EpochLog, &mut DmfNet, &mut AdamState) -> Result<()>,
{
    cfg.validate()?;
    let mut logs = Vec::new();
    for epoch in start..cfg.epochs {
        let loss = train_epoch(net, data, cfg, state, epoch)?;
        let log = EpochLog {
            epoch: epoch + 1,
            lr: lr_at(epoch, cfg),
            loss,
        };
        after_epoch(&log, net, state)?;
        logs.push(log);
    }
    Ok(logs)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SampleMetrics {
    pub category: String,
    pub cd_l1: f64,
    pub cd_l2: f64,
    pub f_score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct MetricMeans {
    pub cd_l1: f64,
    pub cd_l2: f64,
    pub f_score: f64,
    pub count: usize,
}

impl MetricMeans {
    fn of<'a>(it: impl Iterator<Item = &'a SampleMetrics>) -> Self {
        let mut m = MetricMeans::default();
        for s in it {
            m.cd_l1 += s.cd_l1;
            m.cd_l2 += s.cd_l2;
            m.f_score += s.f_score;
            m.count += 1;
        }
        let n = m.count.max(1) as f64;
        m.cd_l1 /= n;
        m.cd_l2 /= n;
        m.f_score /= n;
        m
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub tau: f64,
    pub samples: Vec<SampleMetrics>,
    pub mean: MetricMeans,
    pub per_category: BTreeMap<String, MetricMeans>,
}

/// Scores the clouds produced by `predict` against every sample's ground truth.
pub fn evaluate_with<F>(data: &[CloudSample], tau: f64, mut predict: F) -> Result<EvalReport>
where
    F: FnMut(&CloudSample) -> Result<PointSet>,
{
    let mut samples = Vec::with_capacity(data.len());
    for s in data {
        let pred = predict(s)?;
        samples.push(SampleMetrics {
            category: s.category.clone(),
            cd_l1: cd_l1(&pred, &s.gt),
            cd_l2: cd_l2(&pred, &s.gt),
            f_score: f_score(&pred, &s.gt, tau)?,
        });
    }
    let mut cats: Vec<&str> = samples.iter().map(|s| s.category.as_str()).collect();
    cats.sort_unstable();
    cats.dedup();
    let per_category = cats
        .iter()
        .map(|c| {
            (
                c.to_string(),
                MetricMeans::of(samples.iter().filter(|s| s.category == *c)),
            )
        })
        .collect();
    Ok(EvalReport {
        tau,
        mean: MetricMeans::of(samples.iter()),
        samples,
        per_category,
    })
}

/// Runs the network without recording and scores its final clouds.
pub fn predict(net: &DmfNet, sample: &CloudSample) -> Result<PointSet> {
    if sample.partial.len() != net.cfg.n {
        return Err(Error::invalid(
            "evaluate",
            format!("sample has {} points, model expects {}", sample.partial.len(), net.cfg.n),
        ));
    }
    let mut g = net.inference_graph();
    let fw = net.forward(&mut g, &sample.partial, &sample.image)?;
    PointSet::new(g.value(fw.pc).clone())
}

pub fn evaluate(net: &DmfNet, data: &[CloudSample], tau: f64) -> Result<EvalReport> {
    evaluate_with(data, tau, |s| predict(net, s))
}

/// Default threshold of [`evaluate`].
pub const EVAL_TAU: f64 = DEFAULT_FSCORE_TAU;
