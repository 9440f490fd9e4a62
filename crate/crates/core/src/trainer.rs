//! Mini-batch Adagrad training with validation-loss early stopping.

use std::collections::hash_map::Entry;
use std::collections::HashMap;
use std::fmt::Write as _;
use std::time::Instant;

use rand::seq::SliceRandom;

use crate::compat::{bce_loss, ModelGrads, PreparedModel, StyleModel};
use crate::corpus::{ItemCatalog, PairExample};
use crate::error::{Error, Result};
use crate::metrics::roc_auc;
use crate::nnops::Mode;
use crate::real::Real;
use crate::recommend::inner;
use crate::rng::{self, tags};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub learning_rate: f64,
    pub adagrad_epsilon: f64,
    /// Starting value of every squared-gradient accumulator.
    pub adagrad_initial_accumulator: f64,
    pub seed: u64,
    /// Size of the per-batch worker pool. Results are bit-reproducible for a
    /// fixed value.
    pub workers: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 256,
            max_epochs: 20,
            patience: 5,
            learning_rate: 0.01,
            adagrad_epsilon: 1e-6,
            adagrad_initial_accumulator: 0.0,
            seed: 0,
            workers: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.patience == 0 || self.workers == 0 {
            return Err(Error::Config(
                "batch size, patience and workers must be >= 1".into(),
            ));
        }
        if !(self.learning_rate > 0.0)
            || !(self.adagrad_epsilon >= 0.0)
            || !(self.adagrad_initial_accumulator >= 0.0)
        {
            return Err(Error::Config(
                "learning rate must be positive; epsilon and initial accumulator non-negative"
                    .into(),
            ));
        }
        Ok(())
    }
}

/// One Adagrad step on a flat tensor: `state += g²; θ −= lr·g / (√state + ε)`.
pub fn adagrad_update<T: Real>(
    param: &mut [T],
    grad: &[T],
    state: &mut [T],
    lr: f64,
    eps: f64,
) -> Result<()> {
    if param.len() != grad.len() || param.len() != state.len() {
        return Err(Error::shape(
            "adagrad_update",
            param.len(),
            format!("grad {} / state {}", grad.len(), state.len()),
        ));
    }
    for ((p, &g), s) in param.iter_mut().zip(grad).zip(state.iter_mut()) {
        adagrad_scalar(p, g, s, lr, eps);
    }
    Ok(())
}

#[inline]
fn adagrad_scalar<T: Real>(p: &mut T, g: T, s: &mut T, lr: f64, eps: f64) {
    let g = g.to_acc();
    if g == 0.0 {
        return;
    }
    let acc = s.to_acc() + g * g;
    *s = T::from_acc(acc);
    *p = T::from_acc(p.to_acc() - lr * g / (acc.sqrt() + eps));
}

/// Squared-gradient accumulators, one per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdagradState<T> {
    pub accumulators: Vec<Vec<T>>,
}

impl<T: Real> AdagradState<T> {
    pub fn new(model: &StyleModel<T>) -> Self {
        Self::with_initial(model, 0.0)
    }

    pub fn with_initial(model: &StyleModel<T>, initial: f64) -> Self {
        Self {
            accumulators: model
                .tensors()
                .iter()
                .map(|t| vec![T::from_acc(initial); t.data.len()])
                .collect(),
        }
    }

    /// Applies one update. The embedding is updated only on columns the batch
    /// touched; all other embedding gradients are zero by construction.
    pub fn step(
        &mut self,
        model: &mut StyleModel<T>,
        grads: &ModelGrads<T>,
        lr: f64,
        eps: f64,
    ) -> Result<()> {
        let vocab = model.vocab_size();
        let touched: Vec<u32> = grads.encoder.touched_tokens().collect();
        let grad_tensors = grads.tensors();
        let mut params = model.tensors_mut();
        if params.len() != grad_tensors.len() || params.len() != self.accumulators.len() {
            return Err(Error::shape(
                "AdagradState::step",
                params.len(),
                grad_tensors.len(),
            ));
        }
        for (idx, ((p, g), s)) in params
            .iter_mut()
            .zip(&grad_tensors)
            .zip(self.accumulators.iter_mut())
            .enumerate()
        {
            if idx == 0 {
                let rows = p.len() / vocab.max(1);
                for &t in &touched {
                    for r in 0..rows {
                        let i = r * vocab + t as usize;
                        adagrad_scalar(&mut p[i], g[i], &mut s[i], lr, eps);
                    }
                }
            } else {
                adagrad_update(p, g, s, lr, eps)?;
            }
        }
        Ok(())
    }
}

/// Tracks the best validation loss and decides when to stop.
#[derive(Clone, Debug)]
pub struct EarlyStopping {
    patience: usize,
    best_loss: f64,
    best_epoch: usize,
    since_best: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best_loss: f64::INFINITY,
            best_epoch: 0,
            since_best: 0,
        }
    }

    /// Records the loss of `epoch` (1-based). Returns whether it improved on
    /// the best so far.
    pub fn observe(&mut self, epoch: usize, loss: f64) -> bool {
        if loss < self.best_loss {
            self.best_loss = loss;
            self.best_epoch = epoch;
            self.since_best = 0;
            true
        } else {
            self.since_best += 1;
            false
        }
    }

    pub fn should_stop(&self) -> bool {
        self.since_best >= self.patience
    }

    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }

    pub fn best_loss(&self) -> f64 {
        self.best_loss
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    /// `NaN` when the validation set holds a single class.
    pub val_auc: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
}

impl TrainHistory {
    /// `epoch,train_loss,val_loss,val_auc,seconds` with a header row. With
    /// `with_time` false the seconds column is written as 0 so the file is a
    /// pure function of the inputs.
    pub fn to_csv(&self, with_time: bool) -> String {
        let mut out = String::from("epoch,train_loss,val_loss,val_auc,seconds\n");
        for r in &self.epochs {
            let secs = if with_time { r.seconds } else { 0.0 };
            let _ = writeln!(
                out,
                "{},{:.6},{:.6},{:.6},{:.3}",
                r.epoch, r.train_loss, r.val_loss, r.val_auc, secs
            );
        }
        out
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<T> {
    /// Parameters from the epoch with the lowest validation loss.
    pub model: StyleModel<T>,
    pub history: TrainHistory,
    pub best_epoch: usize,
    pub best_val_loss: f64,
}

type EpochCallback<'a> = Box<dyn FnMut(&EpochRecord) + 'a>;
type Validator<'a, T> = Box<dyn FnMut(&StyleModel<T>, usize) -> Result<(f64, f64)> + 'a>;

/// Optional hooks into [`train_with`].
pub struct TrainHooks<'a, T> {
    /// Replaces the validation pass; returns `(loss, auc)` for the epoch.
    pub validator: Option<Validator<'a, T>>,
    pub on_epoch: Option<EpochCallback<'a>>,
}

impl<T> Default for TrainHooks<'_, T> {
    fn default() -> Self {
        Self {
            validator: None,
            on_epoch: None,
        }
    }
}

/// Mean loss and per-example probabilities in inference mode.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub probabilities: Vec<f64>,
    pub mean_loss: f64,
    pub auc: Option<f64>,
}

/// Inference-mode `P(y=1)` for every example. Each distinct item is encoded
/// once.
pub fn predict<T: Real>(
    model: &StyleModel<T>,
    catalog: &ItemCatalog,
    examples: &[PairExample],
) -> Result<Vec<f64>> {
    let mut cache: HashMap<usize, Vec<T>> = HashMap::new();
    let mut xq_cache: HashMap<usize, Vec<T>> = HashMap::new();
    let prepared = model.prepare()?;
    let mut out = Vec::with_capacity(examples.len());
    for ex in examples {
        if !xq_cache.contains_key(&ex.query) {
            let x = match cache.get(&ex.query) {
                Some(x) => x.clone(),
                None => prepared.encode(catalog.title(ex.query))?,
            };
            xq_cache.insert(
                ex.query,
                crate::recommend::transform_vector(&model.compat, &x)?,
            );
            cache.insert(ex.query, x);
        }
        if let Entry::Vacant(slot) = cache.entry(ex.cand) {
            slot.insert(prepared.encode(catalog.title(ex.cand))?);
        }
        let z = inner(&xq_cache[&ex.query], &cache[&ex.cand]) + model.compat.bias.to_acc();
        out.push(crate::compat::sigmoid(z));
    }
    Ok(out)
}

pub fn evaluate<T: Real>(
    model: &StyleModel<T>,
    catalog: &ItemCatalog,
    examples: &[PairExample],
) -> Result<Evaluation> {
    let probabilities = predict(model, catalog, examples)?;
    let labels: Vec<u8> = examples.iter().map(|e| e.label).collect();
    let mean_loss = if examples.is_empty() {
        f64::NAN
    } else {
        probabilities
            .iter()
            .zip(&labels)
            .map(|(&p, &l)| bce_loss(p, l))
            .sum::<f64>()
            / examples.len() as f64
    };
    let auc = roc_auc(&probabilities, &labels).ok();
    Ok(Evaluation {
        probabilities,
        mean_loss,
        auc,
    })
}

/// AUC of the model's probabilities over labelled pairs.
pub fn evaluate_auc<T: Real>(
    model: &StyleModel<T>,
    catalog: &ItemCatalog,
    examples: &[PairExample],
) -> Result<f64> {
    let probabilities = predict(model, catalog, examples)?;
    let labels: Vec<u8> = examples.iter().map(|e| e.label).collect();
    roc_auc(&probabilities, &labels)
}

/// Forward/backward over `examples`, accumulating into `grads`. Returns the
/// summed loss. `first` is the epoch position of `examples[0]`, which seeds
/// the per-example dropout streams.
fn accumulate<T: Real>(
    model: &PreparedModel<'_, T>,
    catalog: &ItemCatalog,
    examples: &[PairExample],
    first: usize,
    epoch: usize,
    seed: u64,
    grads: &mut ModelGrads<T>,
) -> Result<f64> {
    let mut loss = 0.0;
    for (offset, ex) in examples.iter().enumerate() {
        let mut drng = rng::stream(
            seed,
            &[tags::DROPOUT, epoch as u64, (first + offset) as u64],
        );
        let (p, tape) = model.forward(
            catalog.title(ex.query),
            catalog.title(ex.cand),
            Mode::Train,
            &mut drng,
        )?;
        loss += bce_loss(p, ex.label);
        model.backward(&tape, p, ex.label, grads)?;
    }
    Ok(loss)
}

pub fn train<T: Real>(
    model: StyleModel<T>,
    catalog: &ItemCatalog,
    train_set: &[PairExample],
    validation: &[PairExample],
    config: &TrainConfig,
) -> Result<TrainOutcome<T>> {
    train_with(
        model,
        catalog,
        train_set,
        validation,
        config,
        TrainHooks::default(),
    )
}

/// Shuffled mini-batch training. Each batch sums the per-example gradients
/// and applies one Adagrad step; the parameters with the best validation loss
/// are returned.
pub fn train_with<T: Real>(
    mut model: StyleModel<T>,
    catalog: &ItemCatalog,
    train_set: &[PairExample],
    validation: &[PairExample],
    config: &TrainConfig,
    mut hooks: TrainHooks<'_, T>,
) -> Result<TrainOutcome<T>> {
    config.validate()?;
    model.hyper.validate()?;
    if train_set.is_empty() || validation.is_empty() {
        return Err(Error::Config(format!(
            "training needs non-empty train and validation sets, got {} and {}",
            train_set.len(),
            validation.len()
        )));
    }

    let mut shuffle_rng = rng::stream(config.seed, &[tags::SHUFFLE]);
    let mut state = AdagradState::with_initial(&model, config.adagrad_initial_accumulator);
    let mut worker_grads: Vec<ModelGrads<T>> = (0..config.workers)
        .map(|_| ModelGrads::new(&model))
        .collect();
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut stopper = EarlyStopping::new(config.patience);
    let mut best = model.clone();
    let mut history = TrainHistory::default();

    for epoch in 1..=config.max_epochs {
        let started = Instant::now();
        order.shuffle(&mut shuffle_rng);
        let epoch_examples: Vec<PairExample> = order.iter().map(|&i| train_set[i]).collect();
        let mut loss_sum = 0.0;

        for (batch_idx, batch) in epoch_examples.chunks(config.batch_size).enumerate() {
            let batch_start = batch_idx * config.batch_size;
            let chunk = batch.len().div_ceil(config.workers);
            let prepared = model.prepare()?;
            let batch_loss = if config.workers == 1 || batch.len() < 2 {
                let g = &mut worker_grads[0];
                g.zero();
                accumulate(
                    &prepared,
                    catalog,
                    batch,
                    batch_start,
                    epoch,
                    config.seed,
                    g,
                )?
            } else {
                let model_ref = &prepared;
                let results: Vec<Result<f64>> = std::thread::scope(|scope| {
                    let handles: Vec<_> = worker_grads
                        .iter_mut()
                        .zip(batch.chunks(chunk))
                        .enumerate()
                        .map(|(w, (g, part))| {
                            scope.spawn(move || {
                                g.zero();
                                accumulate(
                                    model_ref,
                                    catalog,
                                    part,
                                    batch_start + w * chunk,
                                    epoch,
                                    config.seed,
                                    g,
                                )
                            })
                        })
                        .collect();
                    handles
                        .into_iter()
                        .map(|h| h.join().expect("training worker panicked"))
                        .collect()
                });
                let used = results.len();
                let mut total = 0.0;
                for r in results {
                    total += r?;
                }
                let (head, rest) = worker_grads.split_at_mut(1);
                for g in &rest[..used - 1] {
                    head[0].merge(g)?;
                }
                total
            };
            if !batch_loss.is_finite() {
                return Err(Error::NonFinite {
                    epoch,
                    batch: batch_idx + 1,
                });
            }
            loss_sum += batch_loss;
            state.step(
                &mut model,
                &worker_grads[0],
                config.learning_rate,
                config.adagrad_epsilon,
            )?;
        }

        let (val_loss, val_auc) = match hooks.validator.as_mut() {
            Some(v) => v(&model, epoch)?,
            None => {
                let e = evaluate(&model, catalog, validation)?;
                (e.mean_loss, e.auc.unwrap_or(f64::NAN))
            }
        };
        if !val_loss.is_finite() {
            return Err(Error::NonFinite { epoch, batch: 0 });
        }
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / train_set.len() as f64,
            val_loss,
            val_auc,
            seconds: started.elapsed().as_secs_f64(),
        };
        if let Some(cb) = hooks.on_epoch.as_mut() {
            cb(&record);
        }
        history.epochs.push(record);

        if stopper.observe(epoch, val_loss) {
            best = model.clone();
        }
        if stopper.should_stop() {
            break;
        }
    }

    Ok(TrainOutcome {
        model: best,
        history,
        best_epoch: stopper.best_epoch(),
        best_val_loss: stopper.best_loss(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adagrad_one_step() {
        let (mut p, mut s) = ([1.0f64], [0.0f64]);
        adagrad_update(&mut p, &[2.0], &mut s, 0.1, 0.0).unwrap();
        assert_eq!(s[0], 4.0);
        assert!((p[0] - 0.9).abs() < 1e-15);
        adagrad_update(&mut p, &[0.0], &mut s, 0.1, 0.0).unwrap();
        assert_eq!((p[0], s[0]), (0.9, 4.0));
        assert!(adagrad_update(&mut p, &[0.0, 1.0], &mut s, 0.1, 0.0).is_err());
    }

    #[test]
    fn adagrad_two_steps() {
        let (mut p, mut s) = ([0.0f64], [0.0f64]);
        adagrad_update(&mut p, &[1.0], &mut s, 1.0, 0.0).unwrap();
        adagrad_update(&mut p, &[1.0], &mut s, 1.0, 0.0).unwrap();
        // hand-iterated: -1/√1 - 1/√2
        assert!((p[0] - (-1.0 - 1.0 / 2f64.sqrt())).abs() < 1e-12);
        assert!((p[0] + 1.707_107).abs() < 1e-6);
    }

    fn simulate(losses: &[f64], patience: usize) -> (usize, usize) {
        let mut es = EarlyStopping::new(patience);
        for (i, &l) in losses.iter().enumerate() {
            es.observe(i + 1, l);
            if es.should_stop() {
                return (i + 1, es.best_epoch());
            }
        }
        (losses.len(), es.best_epoch())
    }

    #[test]
    fn early_stopping_rule() {
        let losses = [0.7, 0.6, 0.65, 0.66, 0.62, 0.61, 0.62, 0.7, 0.65, 0.63];
        assert_eq!(simulate(&losses, 5), (7, 2));
        let improving: Vec<f64> = (0..20).map(|i| 1.0 - i as f64 * 0.01).collect();
        assert_eq!(simulate(&improving, 5), (20, 20));
    }

    #[test]
    fn csv_layout() {
        let h = TrainHistory {
            epochs: vec![EpochRecord {
                epoch: 1,
                train_loss: 0.5,
                val_loss: 0.25,
                val_auc: 0.75,
                seconds: 1.5,
            }],
        };
        assert_eq!(
            h.to_csv(true),
            "epoch,train_loss,val_loss,val_auc,seconds\n1,0.500000,0.250000,0.750000,1.500\n"
        );
        assert!(h.to_csv(false).ends_with(",0.000\n"));
    }
}
