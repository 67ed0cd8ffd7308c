//! Mini-batch training with AdamW.

use std::collections::BTreeMap;
use std::io::Write;
use std::thread;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand_pcg::Pcg64;

use crate::autodiff::{Graph, ParamId, ParamStore};
use crate::data::LabeledInstance;
use crate::encoder::Vocabulary;
use crate::error::{Error, Result};
use crate::losses::LossBundle;
use crate::model::CcPromptModel;

/// One tokenised, labelled instance.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub id: String,
    pub tokens: Vec<usize>,
    pub label: usize,
}

impl Example {
    /// Maps loaded instances to token ids.
    pub fn from_instances(data: &[LabeledInstance], vocab: &Vocabulary) -> Vec<Example> {
        data.iter()
            .map(|i| Example {
                id: i.id.clone(),
                tokens: vocab.encode(&i.tokens),
                label: i.label,
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Global gradient-norm clip; off when `None`.
    pub grad_clip: Option<f64>,
    /// Worker threads for per-instance forward/backward; 0 picks the
    /// available parallelism.
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-5,
            weight_decay: 1e-2,
            batch_size: 16,
            epochs: 30,
            seed: 0,
            grad_clip: None,
            threads: 0,
        }
    }
}

impl TrainConfig {
    pub const LEARNING_RATE_GRID: [f64; 3] = [1e-5, 3e-5, 5e-5];

    pub fn few_shot() -> Self {
        Self::default()
    }

    pub fn fully_supervised() -> Self {
        Self {
            epochs: 5,
            ..Self::default()
        }
    }
}

/// Adam with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: BTreeMap<ParamId, Array2<f64>>,
    v: BTreeMap<ParamId, Array2<f64>>,
}

impl AdamW {
    pub fn new(learning_rate: f64, weight_decay: f64) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update. Parameters without a gradient are still decayed.
    pub fn update(&mut self, store: &mut ParamStore, grads: &BTreeMap<ParamId, Array2<f64>>) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let ids: Vec<ParamId> = store.ids().collect();
        for id in ids {
            let param = store.get_mut(id);
            if self.weight_decay != 0.0 {
                let keep = 1.0 - self.learning_rate * self.weight_decay;
                param.mapv_inplace(|x| x * keep);
            }
            let Some(g) = grads.get(&id) else { continue };
            let m = self.m.entry(id).or_insert_with(|| Array2::zeros(g.dim()));
            let v = self.v.entry(id).or_insert_with(|| Array2::zeros(g.dim()));
            let (b1, b2) = (self.beta1, self.beta2);
            m.zip_mut_with(g, |m, &g| *m = b1 * *m + (1.0 - b1) * g);
            v.zip_mut_with(g, |v, &g| *v = b2 * *v + (1.0 - b2) * g * g);
            let lr = self.learning_rate;
            let eps = self.eps;
            ndarray::Zip::from(param)
                .and(&*m)
                .and(&*v)
                .for_each(|p, &m, &v| {
                    *p -= lr * (m / bc1) / ((v / bc2).sqrt() + eps);
                });
        }
    }
}

fn worker_count(requested: usize, work: usize) -> usize {
    let avail = thread::available_parallelism().map_or(1, |n| n.get());
    let n = if requested == 0 { avail } else { requested };
    n.clamp(1, work.max(1))
}

/// Mean loss terms and mean parameter gradients over a batch.
pub fn batch_gradients(
    model: &CcPromptModel,
    batch: &[Example],
    threads: usize,
) -> Result<(LossBundle, BTreeMap<ParamId, Array2<f64>>)> {
    if batch.is_empty() {
        return Ok((LossBundle::default(), BTreeMap::new()));
    }
    let workers = worker_count(threads, batch.len());
    let chunk = batch.len().div_ceil(workers);
    let partials: Vec<Result<(LossBundle, BTreeMap<ParamId, Array2<f64>>)>> = thread::scope(|s| {
        let handles: Vec<_> = batch
            .chunks(chunk)
            .map(|part| {
                s.spawn(move || {
                    let mut sum = LossBundle::default();
                    let mut grads: BTreeMap<ParamId, Array2<f64>> = BTreeMap::new();
                    for ex in part {
                        let mut g = Graph::new();
                        let fwd = model.forward(&mut g, &ex.tokens, Some(ex.label))?;
                        let b = fwd.bundle(&g, &model.config().weights);
                        if !b.is_finite() {
                            return Err(Error::NumericFailure(format!(
                                "loss on instance {}",
                                ex.id
                            )));
                        }
                        sum.l_cls += b.l_cls;
                        sum.l_s += b.l_s;
                        sum.l_con += b.l_con;
                        sum.total += b.total;
                        let total = fwd.total.expect("gold label given");
                        for (id, grad) in g.backward(total).params() {
                            match grads.get_mut(&id) {
                                Some(acc) => *acc += &grad,
                                None => {
                                    grads.insert(id, grad);
                                }
                            }
                        }
                    }
                    Ok((sum, grads))
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("training worker panicked"))
            .collect()
    });

    let mut sum = LossBundle::default();
    let mut grads: BTreeMap<ParamId, Array2<f64>> = BTreeMap::new();
    for part in partials {
        let (b, gr) = part?;
        sum.l_cls += b.l_cls;
        sum.l_s += b.l_s;
        sum.l_con += b.l_con;
        sum.total += b.total;
        for (id, g) in gr {
            match grads.get_mut(&id) {
                Some(acc) => *acc += &g,
                None => {
                    grads.insert(id, g);
                }
            }
        }
    }
    let n = batch.len() as f64;
    for g in grads.values_mut() {
        *g /= n;
        if !g.iter().all(|x| x.is_finite()) {
            return Err(Error::NumericFailure("gradient".into()));
        }
    }
    let mean = LossBundle {
        l_cls: sum.l_cls / n,
        l_s: sum.l_s / n,
        l_con: sum.l_con / n,
        total: sum.total / n,
    };
    Ok((mean, grads))
}

fn clip(grads: &mut BTreeMap<ParamId, Array2<f64>>, max_norm: f64) {
    let norm = grads
        .values()
        .map(|g| g.iter().map(|x| x * x).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let k = max_norm / norm;
        for g in grads.values_mut() {
            *g *= k;
        }
    }
}

/// One optimiser step on one batch; returns the batch-mean losses.
pub fn train_step(
    model: &mut CcPromptModel,
    optimizer: &mut AdamW,
    batch: &[Example],
    config: &TrainConfig,
) -> Result<LossBundle> {
    let (losses, mut grads) = batch_gradients(model, batch, config.threads)?;
    if let Some(max) = config.grad_clip {
        clip(&mut grads, max);
    }
    optimizer.update(model.params_mut(), &grads);
    if !model.params().all_finite() {
        return Err(Error::NumericFailure("parameters after update".into()));
    }
    Ok(losses)
}

/// Predicted class for every example, in order.
pub fn predict_all(model: &CcPromptModel, data: &[Example], threads: usize) -> Result<Vec<usize>> {
    Ok(predictions(model, data, threads)?
        .into_iter()
        .map(|p| p.class)
        .collect())
}

/// Full predictions for every example, in order.
pub fn predictions(
    model: &CcPromptModel,
    data: &[Example],
    threads: usize,
) -> Result<Vec<crate::model::Prediction>> {
    if data.is_empty() {
        return Ok(Vec::new());
    }
    let workers = worker_count(threads, data.len());
    let chunk = data.len().div_ceil(workers);
    let parts: Vec<Result<Vec<_>>> = thread::scope(|s| {
        let handles: Vec<_> = data
            .chunks(chunk)
            .map(|part| s.spawn(move || part.iter().map(|ex| model.predict(&ex.tokens)).collect()))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("inference worker panicked"))
            .collect()
    });
    let mut out = Vec::with_capacity(data.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

/// Fraction of examples whose prediction equals the label.
pub fn accuracy(model: &CcPromptModel, data: &[Example], threads: usize) -> Result<f64> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let preds = predict_all(model, data, threads)?;
    let hits = preds
        .iter()
        .zip(data)
        .filter(|(p, ex)| **p == ex.label)
        .count();
    Ok(hits as f64 / data.len() as f64)
}

/// Per-step record written to the metrics log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: usize,
    pub losses: LossBundle,
}

impl StepRecord {
    pub fn to_line(&self) -> String {
        format!(
            "step={} epoch={} l_cls={:.6} l_s={:.6} l_con={:.6} total={:.6}",
            self.step,
            self.epoch,
            self.losses.l_cls,
            self.losses.l_s,
            self.losses.l_con,
            self.losses.total
        )
    }
}

/// Outcome of [`Trainer::fit`].
#[derive(Debug, Clone, PartialEq)]
pub struct FitReport {
    pub history: Vec<StepRecord>,
    /// Mean losses per epoch.
    pub epoch_losses: Vec<LossBundle>,
    /// Dev score per epoch when a dev set and scorer were given.
    pub dev_scores: Vec<f64>,
    pub best_epoch: Option<usize>,
    pub best_dev: Option<f64>,
}

/// Drives epochs of shuffled mini-batches over a model.
pub struct Trainer<'a> {
    pub model: &'a mut CcPromptModel,
    pub optimizer: AdamW,
    pub config: TrainConfig,
    log: Option<Box<dyn Write + 'a>>,
}

impl<'a> Trainer<'a> {
    pub fn new(model: &'a mut CcPromptModel, config: TrainConfig) -> Self {
        Self {
            optimizer: AdamW::new(config.learning_rate, config.weight_decay),
            model,
            config,
            log: None,
        }
    }

    /// Writes one `step= epoch= l_cls= l_s= l_con= total=` line per step.
    pub fn with_log(mut self, log: impl Write + 'a) -> Self {
        self.log = Some(Box::new(log));
        self
    }

    /// Shuffled order for an epoch; depends only on the seed and epoch.
    pub fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
        let mut rng = Pcg64::new(
            ((seed as u128) << 64) | epoch as u128,
            0xa02b_dbf7_bb3c_0a7a_c28f_a16a_64ab_f96b,
        );
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        order
    }

    pub fn train_epoch(
        &mut self,
        data: &[Example],
        epoch: usize,
    ) -> Result<(LossBundle, Vec<StepRecord>)> {
        let order = Self::epoch_order(self.config.seed, epoch, data.len());
        let mut records = Vec::new();
        let mut sum = LossBundle::default();
        let batch_size = self.config.batch_size.max(1);
        for idx in order.chunks(batch_size) {
            let batch: Vec<Example> = idx.iter().map(|&i| data[i].clone()).collect();
            let losses = train_step(self.model, &mut self.optimizer, &batch, &self.config)?;
            let rec = StepRecord {
                step: self.optimizer.steps(),
                epoch,
                losses,
            };
            if let Some(log) = self.log.as_mut() {
                writeln!(log, "{}", rec.to_line()).map_err(|e| Error::io("metrics log", e))?;
            }
            let k = batch.len() as f64;
            sum.l_cls += losses.l_cls * k;
            sum.l_s += losses.l_s * k;
            sum.l_con += losses.l_con * k;
            sum.total += losses.total * k;
            records.push(rec);
        }
        let n = data.len().max(1) as f64;
        let mean = LossBundle {
            l_cls: sum.l_cls / n,
            l_s: sum.l_s / n,
            l_con: sum.l_con / n,
            total: sum.total / n,
        };
        Ok((mean, records))
    }

    /// Trains for the configured epochs. With a dev set and a scorer, the
    /// parameters of the best-scoring epoch (earliest on ties) are restored
    /// at the end.
    pub fn fit<F>(
        &mut self,
        train: &[Example],
        dev: &[Example],
        mut score: Option<F>,
    ) -> Result<FitReport>
    where
        F: FnMut(&CcPromptModel, &[Example]) -> Result<f64>,
    {
        let mut report = FitReport {
            history: Vec::new(),
            epoch_losses: Vec::new(),
            dev_scores: Vec::new(),
            best_epoch: None,
            best_dev: None,
        };
        let mut best_params: Option<Vec<Array2<f64>>> = None;
        for epoch in 0..self.config.epochs {
            let (mean, records) = self.train_epoch(train, epoch)?;
            log::info!(
                "epoch {epoch}: l_cls={:.4} l_s={:.4} l_con={:.4} total={:.4}",
                mean.l_cls,
                mean.l_s,
                mean.l_con,
                mean.total
            );
            report.epoch_losses.push(mean);
            report.history.extend(records);
            if let (Some(f), false) = (score.as_mut(), dev.is_empty()) {
                let s = f(self.model, dev)?;
                report.dev_scores.push(s);
                if report.best_dev.is_none_or(|b| s > b) {
                    report.best_dev = Some(s);
                    report.best_epoch = Some(epoch);
                    best_params = Some(
                        self.model
                            .params()
                            .iter()
                            .map(|(_, _, v)| v.clone())
                            .collect(),
                    );
                }
            }
        }
        if let Some(params) = best_params {
            let ids: Vec<ParamId> = self.model.params().ids().collect();
            for (id, value) in ids.into_iter().zip(params) {
                *self.model.params_mut().get_mut(id) = value;
            }
        }
        Ok(report)
    }
}
