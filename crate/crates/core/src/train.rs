//! Joint training of all cascade stages with SGD and per-stage Dice losses.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use ndarray::{Array3, ArrayD, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{augment_for_training, AugmentConfig};
use crate::cascade::{CascadeModel, ForwardOptions};
use crate::checkpoint;
use crate::error::{Error, Result};
use crate::loss::{dice_loss_var, one_hot, DiceVariant, LossSpace};
use crate::nn::Graph;
use crate::preprocess::PreprocessParams;
use crate::volume::{resample_nearest, MultiModalCase};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr0: f64,
    /// Multiplicative learning-rate decay per epoch.
    pub lr_decay: f64,
    pub momentum: f64,
    /// L2 penalty added to the gradient.
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub loss: DiceVariant,
    pub loss_space: LossSpace,
    /// One weight per cascade stage, coarse to fine.
    pub stage_weights: Vec<f64>,
    /// Apply flip and channel-mute augmentation while training.
    pub augment: bool,
    /// Derived from the root `seed` of the configuration file.
    #[serde(skip_deserializing)]
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr0: 0.1,
            lr_decay: 0.99,
            momentum: 0.9,
            weight_decay: 0.0,
            batch_size: 4,
            epochs: 500,
            loss: DiceVariant::Standard,
            loss_space: LossSpace::Classes,
            stage_weights: vec![1.0, 1.0, 1.0],
            augment: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, stages: usize) -> Result<()> {
        if !(self.lr0 > 0.0) || !(self.lr_decay > 0.0) {
            return Err(Error::Config("lr0 and lr_decay must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return Err(Error::Config(
                "momentum must lie in [0, 1) and weight_decay be non-negative".into(),
            ));
        }
        if self.stage_weights.len() != stages {
            return Err(Error::Config(format!(
                "stage_weights has {} entries for {stages} cascade stages",
                self.stage_weights.len()
            )));
        }
        if self.stage_weights.iter().any(|&w| w < 0.0) || !(self.stage_weights.iter().sum::<f64>() > 0.0) {
            return Err(Error::Config("stage_weights must be non-negative with a positive sum".into()));
        }
        Ok(())
    }

    /// `lr0 * lr_decay^epoch`.
    pub fn learning_rate(&self, epoch: usize) -> f64 {
        self.lr0 * self.lr_decay.powi(epoch as i32)
    }
}

/// SGD with momentum: `v = mu v + g + wd p; p -= lr v`.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Option<ArrayD<f32>>>,
}

impl Sgd {
    pub fn new(params: usize, momentum: f64, weight_decay: f64) -> Self {
        Sgd {
            momentum,
            weight_decay,
            velocity: vec![None; params],
        }
    }

    /// Parameters with no gradient (unused by the forward pass) are left alone.
    pub fn step(&mut self, model: &mut CascadeModel<f32>, grads: Vec<Option<ArrayD<f32>>>, lr: f64) {
        let (mu, wd, lr) = (self.momentum as f32, self.weight_decay as f32, lr as f32);
        let ids: Vec<_> = model.store.ids().collect();
        for ((i, id), grad) in ids.into_iter().enumerate().zip(grads) {
            let Some(mut g) = grad else { continue };
            let p = model.store.value_mut(id);
            if wd != 0.0 {
                g.scaled_add(wd, p);
            }
            let v = match self.velocity[i].take() {
                Some(mut v) => {
                    v.mapv_inplace(|x| x * mu);
                    v += &g;
                    v
                }
                None => g,
            };
            p.scaled_add(-lr, &v);
            self.velocity[i] = Some(v);
        }
    }
}

/// A preprocessed, labelled case ready for training.
#[derive(Debug, Clone)]
pub struct TrainingCase {
    pub case: MultiModalCase,
    /// One-hot targets per stage, `[classes, x, y, z]` at the stage's resolution.
    targets: Vec<ArrayD<f32>>,
}

fn stage_targets(model: &CascadeModel<f32>, labels: &Array3<u8>) -> Result<Vec<ArrayD<f32>>> {
    (0..model.stages.len())
        .map(|s| {
            let shape = model.config.stage_shape(s, model.grid);
            let l = resample_nearest(labels.view(), shape)?;
            Ok(one_hot::<f32>(l.view())?.into_dyn())
        })
        .collect()
}

impl TrainingCase {
    pub fn new(model: &CascadeModel<f32>, case: MultiModalCase) -> Result<Self> {
        if case.shape() != model.grid {
            return Err(Error::GridMismatch {
                what: format!("training case {}", case.case_id),
                expected: model.grid,
                found: case.shape(),
            });
        }
        let labels = case
            .labels
            .as_ref()
            .ok_or_else(|| Error::Config(format!("training case {} has no labels", case.case_id)))?;
        let targets = stage_targets(model, labels)?;
        Ok(TrainingCase { case, targets })
    }
}

fn stack(views: Vec<ndarray::ArrayViewD<'_, f32>>) -> ArrayD<f32> {
    ndarray::stack(Axis(0), &views).expect("equal shapes")
}

/// Per-stage and weighted-total loss of one forward/backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct StepLoss {
    pub stages: Vec<f64>,
    /// `sum(w_s L_s)`.
    pub total: f64,
}

/// Runs one batch through the cascade, returning the losses and parameter gradients.
pub fn loss_and_gradients(
    model: &CascadeModel<f32>,
    batch: &[TrainingCase],
    config: &TrainConfig,
    epoch: usize,
) -> Result<(StepLoss, Vec<Option<ArrayD<f32>>>)> {
    let input = stack(batch.iter().map(|c| c.case.channels.view().into_dyn()).collect());
    let mut g = Graph::new(&model.store);
    let stages = model.forward_graph(&mut g, &input, &ForwardOptions::default())?;
    let mut total: Option<crate::autograd::Var> = None;
    let mut stage_losses = Vec::with_capacity(stages.len());
    for (s, vars) in stages.iter().enumerate() {
        let target = stack(batch.iter().map(|c| c.targets[s].view()).collect());
        let l = dice_loss_var(&mut g, vars.probs, &target, config.loss, config.loss_space)?;
        let value = g.value(l)[0] as f64;
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss { stage: s, epoch, value });
        }
        stage_losses.push(value);
        let weighted = g.tape.scale(l, config.stage_weights[s] as f32);
        total = Some(match total {
            Some(t) => g.tape.add(t, weighted),
            None => weighted,
        });
    }
    let total = total.expect("at least one stage");
    let value = g.value(total)[0] as f64;
    let grads = g.param_gradients(total);
    Ok((
        StepLoss {
            stages: stage_losses,
            total: value,
        },
        grads,
    ))
}

/// Losses of the current model on `cases` without augmentation or updates.
pub fn evaluate_loss(model: &CascadeModel<f32>, cases: &[TrainingCase], config: &TrainConfig) -> Result<StepLoss> {
    let mut sums = vec![0.0; model.stages.len()];
    let mut total = 0.0;
    for c in cases {
        let input = c.case.channels.view().insert_axis(Axis(0)).into_dyn().to_owned();
        let mut g = Graph::new(&model.store);
        let stages = model.forward_graph(&mut g, &input, &ForwardOptions::default())?;
        for (s, vars) in stages.iter().enumerate() {
            let target = c.targets[s].view().insert_axis(Axis(0)).to_owned();
            let l = dice_loss_var(&mut g, vars.probs, &target, config.loss, config.loss_space)?;
            let v = g.value(l)[0] as f64;
            sums[s] += v;
            total += v * config.stage_weights[s];
        }
    }
    let n = cases.len().max(1) as f64;
    Ok(StepLoss {
        stages: sums.into_iter().map(|v| v / n).collect(),
        total: total / n,
    })
}

/// Where the trainer writes its artifacts.
#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub dir: PathBuf,
    /// Stored in checkpoints so that prediction can reproduce the input pipeline.
    pub preprocess: PreprocessParams,
}

impl TrainOutput {
    pub fn last_checkpoint(&self) -> PathBuf {
        self.dir.join("last.ckpt")
    }
    pub fn best_checkpoint(&self) -> PathBuf {
        self.dir.join("best.ckpt")
    }
    pub fn loss_curve(&self) -> PathBuf {
        self.dir.join("loss_curve.tsv")
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainReport {
    /// Mean total (weighted-sum) loss per epoch.
    pub epoch_losses: Vec<f64>,
    /// Total loss of every optimiser step.
    pub iteration_losses: Vec<f64>,
    /// Mean per-stage losses per epoch.
    pub stage_losses: Vec<Vec<f64>>,
    pub best_epoch: Option<usize>,
    pub best_loss: Option<f64>,
}

impl TrainReport {
    /// Two columns, `epoch` and `loss`.
    pub fn loss_curve(&self) -> String {
        let mut s = String::from("epoch\tloss\n");
        for (e, l) in self.epoch_losses.iter().enumerate() {
            let _ = writeln!(s, "{e}\t{l:.9}");
        }
        s
    }
}

/// Trains `model` in place. With `output`, writes `last.ckpt` and the loss
/// curve after every epoch and `best.ckpt` whenever the epoch loss improves.
pub fn train(
    model: &mut CascadeModel<f32>,
    dataset: &[MultiModalCase],
    config: &TrainConfig,
    augment: &AugmentConfig,
    output: Option<&TrainOutput>,
) -> Result<TrainReport> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    config.validate(model.stages.len())?;
    augment.validate()?;
    if let Some(out) = output {
        std::fs::create_dir_all(&out.dir).map_err(|e| Error::io(&out.dir, e))?;
    }
    let prepared = dataset
        .iter()
        .map(|c| TrainingCase::new(model, c.clone()))
        .collect::<Result<Vec<_>>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut sgd = Sgd::new(model.store.len(), config.momentum, config.weight_decay);
    let mut report = TrainReport::default();
    let mut order: Vec<usize> = (0..prepared.len()).collect();
    for epoch in 0..config.epochs {
        let lr = config.learning_rate(epoch);
        order.shuffle(&mut rng);
        let mut epoch_sum = 0.0;
        let mut stage_sum = vec![0.0; model.stages.len()];
        let mut seen = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let batch = chunk
                .iter()
                .map(|&i| {
                    let c = &prepared[i];
                    if !config.augment {
                        return Ok(c.clone());
                    }
                    let aug = augment_for_training(&c.case, augment, &mut rng);
                    TrainingCase::new(model, aug)
                })
                .collect::<Result<Vec<_>>>()?;
            let (loss, grads) = loss_and_gradients(model, &batch, config, epoch)?;
            sgd.step(model, grads, lr);
            report.iteration_losses.push(loss.total);
            epoch_sum += loss.total * batch.len() as f64;
            for (acc, v) in stage_sum.iter_mut().zip(&loss.stages) {
                *acc += v * batch.len() as f64;
            }
            seen += batch.len();
            log::debug!("epoch {epoch} step loss {:.6} {:?}", loss.total, loss.stages);
        }
        let epoch_loss = epoch_sum / seen as f64;
        report.epoch_losses.push(epoch_loss);
        report.stage_losses.push(stage_sum.iter().map(|v| v / seen as f64).collect());
        log::info!("epoch {epoch}: lr {lr:.6} loss {epoch_loss:.6}");
        let improved = report.best_loss.is_none_or(|b| epoch_loss < b);
        if improved {
            report.best_loss = Some(epoch_loss);
            report.best_epoch = Some(epoch);
        }
        if let Some(out) = output {
            checkpoint::save(&out.last_checkpoint(), model, &out.preprocess, Some(epoch), Some(epoch_loss))?;
            if improved {
                checkpoint::save(&out.best_checkpoint(), model, &out.preprocess, Some(epoch), Some(epoch_loss))?;
            }
            write_text(&out.loss_curve(), &report.loss_curve())?;
        }
    }
    Ok(report)
}

fn write_text(path: &Path, body: &str) -> Result<()> {
    std::fs::write(path, body).map_err(|e| Error::io(path, e))
}

/// Mean of consecutive non-overlapping windows of `width` values.
pub fn window_means(values: &[f64], width: usize) -> Vec<f64> {
    values
        .chunks_exact(width)
        .map(|w| w.iter().sum::<f64>() / width as f64)
        .collect()
}
