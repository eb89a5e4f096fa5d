//! Training loop: SGDM over shuffled mini-batches with a plateau-driven
//! learning-rate ladder and per-epoch validation in eval mode.

use alloc::vec::Vec;

use crate::data::{crop_random, image_to_tensor, Dataset, Normalization, CROP_SIZE};
use crate::error::{Error, Result};
use crate::image::hflip;
use crate::model::ModelGraph;
use crate::ops;
use crate::optim::sgdm_step;
use crate::rng::Rng;
use crate::tape::Tape;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub initial_lr: f64,
    pub lr_ladder: Vec<f64>,
    pub plateau_patience: usize,
    /// relative validation-loss improvement below which an epoch counts as a
    /// plateau step
    pub plateau_min_delta: f64,
    pub momentum: f32,
    pub weight_decay: f32,
    pub max_epochs: usize,
    pub val_fraction: f64,
    pub min_images_per_class: usize,
    pub norm: Normalization,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 128,
            initial_lr: 0.01,
            lr_ladder: alloc::vec![0.005, 0.001, 0.0001],
            plateau_patience: 3,
            plateau_min_delta: 1e-3,
            momentum: 0.9,
            weight_decay: 0.0,
            max_epochs: 60,
            val_fraction: 0.02,
            min_images_per_class: 70,
            norm: Normalization::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let mut prev = self.initial_lr;
        for lr in &self.lr_ladder {
            if *lr >= prev {
                return Err(Error::ShapeMismatch {
                    op: "train_config",
                    detail: "lr ladder must be strictly decreasing".into(),
                });
            }
            prev = *lr;
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(Error::ShapeMismatch {
                op: "train_config",
                detail: "val_fraction must be in (0, 1)".into(),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_acc: f64,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub history: Vec<EpochRecord>,
    /// (epoch that triggered the step, new lr)
    pub lr_steps: Vec<(usize, f64)>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SchedulerEvent {
    Continue,
    Stepped(f64),
    Stop,
}

/// Steps down the lr ladder after `patience` consecutive validations whose
/// relative improvement over the best seen loss stays under `min_delta`;
/// asks to stop when a plateau hits with the ladder exhausted.
#[derive(Debug, Clone)]
pub struct PlateauScheduler {
    ladder: Vec<f64>,
    rung: usize,
    patience: usize,
    min_delta: f64,
    best: Option<f64>,
    fails: usize,
}

impl PlateauScheduler {
    pub fn new(initial_lr: f64, ladder: &[f64], patience: usize, min_delta: f64) -> Self {
        let mut full = alloc::vec![initial_lr];
        full.extend_from_slice(ladder);
        PlateauScheduler {
            ladder: full,
            rung: 0,
            patience: patience.max(1),
            min_delta,
            best: None,
            fails: 0,
        }
    }

    pub fn lr(&self) -> f64 {
        self.ladder[self.rung]
    }

    pub fn observe(&mut self, val_loss: f64) -> SchedulerEvent {
        let improved = match self.best {
            None => true,
            Some(best) => (best - val_loss) / best >= self.min_delta,
        };
        self.best = Some(match self.best {
            None => val_loss,
            Some(best) => best.min(val_loss),
        });
        if improved {
            self.fails = 0;
            return SchedulerEvent::Continue;
        }
        self.fails += 1;
        if self.fails < self.patience {
            return SchedulerEvent::Continue;
        }
        self.fails = 0;
        if self.rung + 1 < self.ladder.len() {
            self.rung += 1;
            SchedulerEvent::Stepped(self.lr())
        } else {
            SchedulerEvent::Stop
        }
    }
}

/// Augmented batch: random 113 crop + 50% flip of cached resized images.
pub fn assemble_train_batch(
    dataset: &Dataset,
    indices: &[usize],
    norm: Normalization,
    rng: &mut Rng,
) -> Result<(Tensor<f32>, Vec<usize>)> {
    assemble(dataset, indices, norm, Some(rng))
}

/// Deterministic center-crop batch for validation/evaluation.
pub fn assemble_eval_batch(
    dataset: &Dataset,
    indices: &[usize],
    norm: Normalization,
) -> Result<(Tensor<f32>, Vec<usize>)> {
    assemble(dataset, indices, norm, None)
}

fn assemble(
    dataset: &Dataset,
    indices: &[usize],
    norm: Normalization,
    mut rng: Option<&mut Rng>,
) -> Result<(Tensor<f32>, Vec<usize>)> {
    let n = indices.len();
    let mut batch = Tensor::zeros(&[n, 3, CROP_SIZE, CROP_SIZE]);
    let plane = 3 * CROP_SIZE * CROP_SIZE;
    let mut labels = Vec::with_capacity(n);
    for (row, idx) in indices.iter().enumerate() {
        let img = &dataset.images[*idx];
        let cropped = match rng.as_deref_mut() {
            Some(rng) => {
                let c = crop_random(img, rng)?;
                if rng.coin() {
                    hflip(&c)
                } else {
                    c
                }
            }
            None => {
                let x0 = (img.width - CROP_SIZE) / 2;
                let y0 = (img.height - CROP_SIZE) / 2;
                crate::image::crop(img, x0, y0, CROP_SIZE, CROP_SIZE)?
            }
        };
        let t = image_to_tensor(&cropped, norm);
        batch.data_mut()[row * plane..(row + 1) * plane].copy_from_slice(t.data());
        labels.push(dataset.labels[*idx]);
    }
    Ok((batch, labels))
}

/// Mean eval-mode loss and accuracy over the given indices.
pub fn evaluate(
    model: &ModelGraph,
    dataset: &Dataset,
    indices: &[usize],
    norm: Normalization,
    batch_size: usize,
) -> Result<(f64, f64)> {
    let mut loss_sum = 0.0;
    let mut acc_sum = 0.0;
    let mut count = 0usize;
    for chunk in indices.chunks(batch_size.max(1)) {
        let (batch, labels) = assemble_eval_batch(dataset, chunk, norm)?;
        let out = model.forward_eval(&batch, &[])?;
        let (loss, _) = ops::softmax_cross_entropy_forward(&out.logits, &labels)?;
        loss_sum += loss as f64 * chunk.len() as f64;
        acc_sum += ops::accuracy(&out.logits, &labels) * chunk.len() as f64;
        count += chunk.len();
    }
    let n = count.max(1) as f64;
    Ok((loss_sum / n, acc_sum / n))
}

/// Velocity tensors aligned with `model.param_refs()`.
pub struct Velocities(pub Vec<Tensor<f32>>);

impl Velocities {
    pub fn zeros(model: &ModelGraph) -> Self {
        Velocities(
            model
                .param_refs()
                .iter()
                .map(|r| Tensor::zeros(model.param(*r).shape()))
                .collect(),
        )
    }
}

/// One SGDM training step from freshly computed gradients.
pub fn apply_sgdm(
    model: &mut ModelGraph,
    bindings: &[(crate::model::ParamRef, crate::tape::ValId)],
    grads: &crate::tape::Gradients<f32>,
    velocities: &mut Velocities,
    lr: f32,
    momentum: f32,
    weight_decay: f32,
) -> Result<()> {
    debug_assert_eq!(bindings.len(), velocities.0.len());
    for (slot, (pref, val)) in bindings.iter().enumerate() {
        let grad = grads.get(*val).expect("parameter gradient");
        let param = model.param_mut(*pref);
        if weight_decay != 0.0 {
            let mut g = grad.clone();
            for (gv, pv) in g.data_mut().iter_mut().zip(param.data()) {
                *gv += weight_decay * *pv;
            }
            sgdm_step(param, &g, &mut velocities.0[slot], lr, momentum)?;
        } else {
            sgdm_step(param, grad, &mut velocities.0[slot], lr, momentum)?;
        }
    }
    Ok(())
}

/// Full training run. `clock` supplies wall seconds for the history (the
/// caller owns time; pass `|| 0.0` where wall time is irrelevant).
pub fn train(
    model: &mut ModelGraph,
    dataset: &Dataset,
    train_idx: &[usize],
    val_idx: &[usize],
    cfg: &TrainConfig,
    rng: &mut Rng,
    clock: &mut dyn FnMut() -> f64,
) -> Result<TrainReport> {
    cfg.validate()?;
    if train_idx.is_empty() {
        return Err(Error::EmptySubset);
    }
    let start = clock();
    let mut velocities = Velocities::zeros(model);
    let mut scheduler = PlateauScheduler::new(
        cfg.initial_lr,
        &cfg.lr_ladder,
        cfg.plateau_patience,
        cfg.plateau_min_delta,
    );
    let mut history = Vec::new();
    let mut lr_steps = Vec::new();
    let mut order: Vec<usize> = train_idx.to_vec();

    for epoch in 0..cfg.max_epochs {
        let lr = scheduler.lr();
        rng.shuffle(&mut order);
        let mut loss_sum = 0.0f64;
        let mut seen = 0usize;
        for (batch_no, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let (batch, labels) = assemble_train_batch(dataset, chunk, cfg.norm, rng)?;
            let mut tape = Tape::new();
            let (loss_id, bindings) = model.forward_train(&mut tape, batch, &labels)?;
            let loss = tape.value(loss_id).scalar_value();
            if !loss.is_finite() {
                return Err(Error::NanLoss {
                    epoch,
                    batch: batch_no,
                    lr,
                });
            }
            let grads = tape.backward(loss_id)?;
            apply_sgdm(
                model,
                &bindings,
                &grads,
                &mut velocities,
                lr as f32,
                cfg.momentum,
                cfg.weight_decay,
            )?;
            loss_sum += loss as f64 * chunk.len() as f64;
            seen += chunk.len();
        }
        let train_loss = loss_sum / seen.max(1) as f64;
        let (val_loss, val_acc) = evaluate(model, dataset, val_idx, cfg.norm, cfg.batch_size)?;
        history.push(EpochRecord {
            epoch,
            lr,
            train_loss,
            val_loss,
            val_acc,
            wall_seconds: clock() - start,
        });
        match scheduler.observe(val_loss) {
            SchedulerEvent::Continue => {}
            SchedulerEvent::Stepped(new_lr) => lr_steps.push((epoch, new_lr)),
            SchedulerEvent::Stop => break,
        }
    }
    Ok(TrainReport { history, lr_steps })
}
