use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::arch::{ForwardMode, LayerGraph};
use crate::compression::prune_schedule_with;
use crate::data::{augment, make_batch, normalize, ImageRecord, Normalization, CLASSES};
use crate::error::{Error, Result};
use crate::tape::Tape;
use crate::tensor::Tensor;
use crate::train::loss::{cross_entropy, ClassCounts, LossKind};
use crate::train::optim::Sgd;
use crate::train::report::{CondenseEvent, EpochRecord, TrainingReport};
use crate::train::schedule::{cosine_lr, cosine_lr_at};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub base_lr: f64,
    pub momentum: f64,
    pub dropout_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub loss: LossKind,
    pub weight_decay: f64,
    /// Cosine decay per optimizer step instead of per epoch.
    pub per_iteration_lr: bool,
    /// Share of training over which condensing stages are spread.
    pub condense_fraction: f64,
    /// Pad-crop-flip on training images.
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 200,
            base_lr: 0.1,
            momentum: 0.9,
            dropout_rate: 0.1,
            batch_size: 64,
            seed: 0,
            loss: LossKind::ClassBalancedFocal {
                gamma: 0.5,
                beta: 0.9999,
            },
            weight_decay: 1e-4,
            per_iteration_lr: false,
            condense_fraction: crate::compression::DEFAULT_CONDENSE_FRACTION,
            augment: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("epochs must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch size must be at least 1"));
        }
        if !(self.base_lr > 0.0) {
            return Err(Error::config("base learning rate must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("momentum must lie in [0, 1)"));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::config("dropout rate must lie in [0, 1)"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::config("weight decay must be non-negative"));
        }
        if !(self.condense_fraction > 0.0 && self.condense_fraction <= 1.0) {
            return Err(Error::config("condense fraction must lie in (0, 1]"));
        }
        if let LossKind::ClassBalancedFocal { gamma, beta } = self.loss {
            if !(gamma >= 0.0) || !(0.0..1.0).contains(&beta) {
                return Err(Error::config("focal loss needs gamma ≥ 0 and beta in [0, 1)"));
            }
        }
        Ok(())
    }
}

/// Training and validation splits with the normalization applied to both.
#[derive(Debug, Clone, Copy)]
pub struct TrainData<'a> {
    pub train: &'a [ImageRecord],
    pub val: &'a [ImageRecord],
    pub norm: Normalization,
}

/// Progress notifications from [`train`].
#[derive(Debug, Clone, Copy)]
pub enum TrainEvent<'a> {
    Condensed(CondenseEvent),
    Step { epoch: usize, step: usize, loss: f64 },
    Epoch(&'a EpochRecord),
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub report: TrainingReport,
    pub optimizer: Sgd,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    pub correct: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalReport {
    pub correct: usize,
    pub total: usize,
    /// Top-1 accuracy in `[0, 1]`.
    pub accuracy: f64,
    /// Mean cross-entropy.
    pub loss: f64,
}

/// Independent stream seeds for (seed, purpose, index) triples.
pub(crate) fn derive_seed(seed: u64, a: u64, b: u64) -> u64 {
    let mut z = seed
        ^ a.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ b.wrapping_add(1).wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn argmax(row: &[f32]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f32::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
        .0
}

fn count_correct(logits: &Tensor<f32>, labels: &[usize]) -> usize {
    let c = logits.dim(1);
    logits
        .data()
        .chunks_exact(c)
        .zip(labels)
        .filter(|(row, &y)| argmax(row) == y)
        .count()
}

/// One optimizer step on a prepared batch.
#[allow(clippy::too_many_arguments)]
pub fn train_step(
    graph: &mut LayerGraph,
    opt: &mut Sgd,
    images: Tensor<f32>,
    labels: &[usize],
    loss: LossKind,
    counts: &ClassCounts,
    lr: f64,
    dropout_rate: f64,
    dropout_seed: u64,
) -> Result<StepStats> {
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(images);
    let f = graph.forward(&mut tape, x, ForwardMode::train(dropout_rate, dropout_seed))?;
    tape.set_scope("loss");
    let l = tape.loss(loss, f.logits, labels, counts)?;
    let value = f64::from(tape.value(l).data()[0]);
    if !value.is_finite() {
        let layer = tape.first_nan_scope().unwrap_or_else(|| "loss".into());
        return Err(Error::NonFinite { layer });
    }
    let correct = count_correct(tape.value(f.logits), labels);
    let mut grads = tape.into_gradients(l)?;
    let g: Vec<Option<Vec<f32>>> = f.params.iter().map(|&v| grads.take(v)).collect();
    opt.step(&mut graph.params_mut(), &g, lr)?;
    graph.apply_batch_stats(&f.batch_stats)?;
    Ok(StepStats { loss: value, correct })
}

/// Top-1 accuracy on single center views.
pub fn evaluate(graph: &LayerGraph, records: &[ImageRecord], norm: &Normalization, batch_size: usize) -> Result<EvalReport> {
    let batch_size = batch_size.max(1);
    let (mut correct, mut loss_sum) = (0usize, 0.0f64);
    for chunk in records.chunks(batch_size) {
        let (x, labels) = make_batch(chunk.iter().map(|r| (r, normalize(r, norm))))?;
        let logits = graph.predict(&x)?;
        correct += count_correct(&logits, &labels);
        loss_sum += cross_entropy(&logits, &labels)? * chunk.len() as f64;
    }
    let total = records.len();
    let denom = total.max(1) as f64;
    Ok(EvalReport {
        correct,
        total,
        accuracy: correct as f64 / denom,
        loss: if total == 0 { f64::NAN } else { loss_sum / denom },
    })
}

/// Seeded epoch loop with condensation, cosine decay and per-epoch validation.
///
/// `on_event` also sees the model, so callers can inspect it between steps.
pub fn train(
    graph: &mut LayerGraph,
    cfg: &TrainConfig,
    data: &TrainData<'_>,
    mut on_event: impl FnMut(TrainEvent<'_>, &LayerGraph),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.train.is_empty() {
        return Err(Error::data("training set is empty"));
    }
    if graph.spec.input_shape != (3, crate::data::SIDE, crate::data::SIDE) || graph.spec.num_classes != CLASSES {
        return Err(Error::shape("CIFAR training needs a 3×32×32 input and 10 classes"));
    }
    let counts = ClassCounts::from_labels(data.train.iter().map(|r| usize::from(r.label)), CLASSES)?;
    let mut opt = Sgd::new(cfg.momentum, cfg.weight_decay);
    let mut report = TrainingReport::default();
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let steps_per_epoch = data.train.len().div_ceil(cfg.batch_size);

    for epoch in 0..cfg.epochs {
        if let Some(stage) = prune_schedule_with(epoch, cfg.epochs, graph.spec.condensation_factor, cfg.condense_fraction) {
            graph.condense(stage)?;
            let ev = CondenseEvent { epoch, stage };
            report.condense_events.push(ev);
            on_event(TrainEvent::Condensed(ev), graph);
        }
        let epoch_lr = cosine_lr(epoch, cfg.epochs, cfg.base_lr);
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 1, epoch as u64)));

        let (mut loss_sum, mut correct) = (0.0f64, 0usize);
        for (step, idx) in order.chunks(cfg.batch_size).enumerate() {
            let lr = if cfg.per_iteration_lr {
                cosine_lr_at((epoch * steps_per_epoch + step) as f64 / (cfg.epochs * steps_per_epoch) as f64, cfg.base_lr)
            } else {
                epoch_lr
            };
            let views = idx.iter().map(|&i| {
                let r = &data.train[i];
                let t = if cfg.augment {
                    augment(r, derive_seed(cfg.seed, 2, (epoch * data.train.len() + i) as u64), &data.norm)
                } else {
                    normalize(r, &data.norm)
                };
                (r, t)
            });
            let (x, labels) = make_batch(views)?;
            let global_step = (epoch * steps_per_epoch + step) as u64;
            let s = train_step(
                graph,
                &mut opt,
                x,
                &labels,
                cfg.loss,
                &counts,
                lr,
                cfg.dropout_rate,
                derive_seed(cfg.seed, 3, global_step),
            )?;
            loss_sum += s.loss * labels.len() as f64;
            correct += s.correct;
            on_event(TrainEvent::Step { epoch, step, loss: s.loss }, graph);
        }

        let val = evaluate(graph, data.val, &data.norm, cfg.batch_size.max(100))?;
        let n = data.train.len() as f64;
        report.epochs.push(EpochRecord {
            epoch,
            lr: epoch_lr,
            train_loss: loss_sum / n,
            train_acc: correct as f64 / n,
            val_loss: val.loss,
            val_acc: val.accuracy,
        });
        on_event(TrainEvent::Epoch(report.epochs.last().expect("just pushed")), graph);
    }
    Ok(TrainOutcome { report, optimizer: opt })
}
