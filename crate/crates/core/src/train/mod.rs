//! Pre-training: schedules, SGD, the training loop, collapse telemetry and
//! checkpoints.

mod checkpoint;
mod collapse;
mod optim;

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, StudentTeacher};
use crate::objectives::{
    contrastive_loss, ddcl_losses, orthogonal_loss, preg_loss, project, total_loss, LossBreakdown, LossWeights,
};
use crate::rng::{purpose, RngStream};
use crate::tensor::{Tape, Tensor, Var};
use crate::vision::{batch_tensor, compose_strategy, AugmentConfig, Image, Strategy, ViewBundle};

pub use checkpoint::Checkpoint;
pub use collapse::{collapse_monitor, CollapseRow};
pub use optim::{cosine_ramp, lr_schedule, Sgd};

/// Which loss family drives training.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    /// Self-distillation on the invariant branch, orthogonality on the
    /// equivariant branch, head-norm regularizer.
    Clever,
    /// Two-view negative cosine on the invariant branch and raw dot product
    /// on the equivariant branch, plus the same head-norm regularizer.
    Ddcl,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub strategy: Strategy,
    pub objective: Objective,
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub batch_size: usize,
    /// Learning rate at batch size 256; scaled linearly with the batch.
    pub base_lr: f64,
    /// Floor of the cosine decay; `base_lr / 100` (scaled) when absent.
    pub min_lr: Option<f64>,
    pub weight_decay: f64,
    /// Cosine-ramp weight decay to this value when set.
    pub weight_decay_end: Option<f64>,
    pub momentum: f64,
    pub ema_momentum: f64,
    /// Cosine-ramp the EMA momentum to this value when set.
    pub ema_momentum_end: Option<f64>,
    pub seed: u64,
    /// Save a checkpoint every this many epochs; 0 saves only the last.
    pub checkpoint_every: usize,
    /// Number of unaugmented training images used by the collapse monitor.
    pub collapse_probe_size: usize,
    /// Abort on non-finite values anywhere in the step.
    pub strict: bool,
    pub model: ModelConfig,
    pub loss: LossWeights,
    pub augment: AugmentConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            strategy: Strategy::CAug,
            objective: Objective::Clever,
            epochs: 100,
            warmup_epochs: 10,
            batch_size: 128,
            base_lr: 0.001,
            min_lr: None,
            weight_decay: 0.04,
            weight_decay_end: None,
            momentum: 0.9,
            ema_momentum: 0.996,
            ema_momentum_end: None,
            seed: 0,
            checkpoint_every: 0,
            collapse_probe_size: 64,
            strict: true,
            model: ModelConfig::default(),
            loss: LossWeights::default(),
            augment: AugmentConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        if self.epochs == 0 {
            return Err(Error::config("epochs", "must be positive"));
        }
        if self.warmup_epochs >= self.epochs {
            return Err(Error::config(
                "warmup_epochs",
                format!("must be < epochs ({}), got {}", self.epochs, self.warmup_epochs),
            ));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be positive"));
        }
        for (key, v) in [("base_lr", self.base_lr), ("momentum", self.momentum)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(key, format!("must be > 0, got {v}")));
            }
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::config("weight_decay", "must be >= 0"));
        }
        for (key, v) in [("ema_momentum", Some(self.ema_momentum)), ("ema_momentum_end", self.ema_momentum_end)] {
            if let Some(v) = v {
                if !(0.0..=1.0).contains(&v) {
                    return Err(Error::config(key, format!("must lie in [0, 1], got {v}")));
                }
            }
        }
        if self.momentum >= 1.0 {
            return Err(Error::config("momentum", "must be < 1"));
        }
        Ok(())
    }

    /// `base_lr · batch_size / 256`.
    pub fn peak_lr(&self) -> f64 {
        self.base_lr * self.batch_size as f64 / 256.0
    }

    pub fn floor_lr(&self) -> f64 {
        self.min_lr.unwrap_or(self.peak_lr() / 100.0)
    }

    /// Augmentation settings actually used. The two-view objective has no
    /// local crops and draws both views from the same distribution: the
    /// first view's blur probability and no solarization.
    pub fn effective_augment(&self) -> AugmentConfig {
        let mut a = self.augment.clone();
        if self.objective == Objective::Ddcl {
            a.local_views = 0;
            a.blur_p.1 = a.blur_p.0;
            a.solarize_p = 0.0;
        }
        a
    }
}

/// One training-log row.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss: LossBreakdown,
}

pub const TRAIN_LOG_HEADER: &str = "step,epoch,lr,l_cl,l_orth,l_preg,l_total";
pub const COLLAPSE_LOG_HEADER: &str = "epoch,log10_h_ir,log10_h_ef,log10_z_ir,log10_z_ef";

/// Formats a float for the CSV logs: shortest round-trip form, `-inf` for
/// the sentinel.
pub fn fmt_f64(v: f64) -> String {
    if v == f64::NEG_INFINITY {
        "-inf".into()
    } else if v == f64::INFINITY {
        "inf".into()
    } else {
        format!("{v}")
    }
}

pub fn train_log_csv(rows: &[LogRow]) -> String {
    let mut s = format!("{TRAIN_LOG_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{}",
            r.step,
            r.epoch,
            fmt_f64(r.lr),
            fmt_f64(r.loss.l_cl),
            fmt_f64(r.loss.l_orth),
            fmt_f64(r.loss.l_preg),
            fmt_f64(r.loss.l_total)
        );
    }
    s
}

pub fn collapse_log_csv(rows: &[CollapseRow]) -> String {
    let mut s = format!("{COLLAPSE_LOG_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{}",
            r.epoch,
            fmt_f64(r.log10_h_ir),
            fmt_f64(r.log10_h_ef),
            fmt_f64(r.log10_z_ir),
            fmt_f64(r.log10_z_ef)
        );
    }
    s
}

/// Mutable training state.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub pair: StudentTeacher,
    pub optimizer: Sgd,
    /// Completed optimizer steps.
    pub step: usize,
}

#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub checkpoint: Checkpoint,
    pub log: Vec<LogRow>,
    pub collapse: Vec<CollapseRow>,
}

pub struct Trainer<'a> {
    config: TrainConfig,
    augment: AugmentConfig,
    data: &'a Dataset,
    state: TrainState,
    steps_per_epoch: usize,
    probe: Tensor,
    order: Option<(usize, Vec<usize>)>,
}

impl<'a> Trainer<'a> {
    pub fn new(config: TrainConfig, data: &'a Dataset) -> Result<Self> {
        config.validate()?;
        let pair = StudentTeacher::new(config.model.clone(), config.seed)?;
        let mut optimizer = Sgd::new(&pair.student.params, config.momentum);
        optimizer.strict = config.strict;
        Trainer::with_state(
            config,
            data,
            TrainState {
                pair,
                optimizer,
                step: 0,
            },
        )
    }

    /// Continues from a checkpoint; the configuration comes from its echo.
    pub fn resume(checkpoint: Checkpoint, data: &'a Dataset) -> Result<Self> {
        let Checkpoint {
            config,
            step,
            pair,
            velocity,
        } = checkpoint;
        config.validate()?;
        let optimizer = Sgd {
            momentum: config.momentum,
            velocity,
            strict: config.strict,
        };
        Trainer::with_state(config, data, TrainState { pair, optimizer, step })
    }

    fn with_state(config: TrainConfig, data: &'a Dataset, state: TrainState) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::Input("training dataset is empty".into()));
        }
        let steps_per_epoch = data.len().div_ceil(config.batch_size);
        let n_probe = config.collapse_probe_size.clamp(1, data.len());
        let probe_imgs: Vec<&Image> = data.images[..n_probe].iter().collect();
        let probe = batch_tensor(&probe_imgs)?;
        Ok(Trainer {
            augment: config.effective_augment(),
            config,
            data,
            state,
            steps_per_epoch,
            probe,
            order: None,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.steps_per_epoch
    }

    pub fn total_steps(&self) -> usize {
        self.steps_per_epoch * self.config.epochs
    }

    pub fn is_done(&self) -> bool {
        self.state.step >= self.total_steps()
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            step: self.state.step,
            pair: self.state.pair.clone(),
            velocity: self.state.optimizer.velocity.clone(),
        }
    }

    /// Collapse telemetry of the student on the fixed probe batch.
    pub fn collapse_row(&self, epoch: usize) -> Result<CollapseRow> {
        collapse_monitor(&self.state.pair.student, &self.probe, epoch)
    }

    fn epoch_order(&mut self, epoch: usize) -> &[usize] {
        if self.order.as_ref().map(|(e, _)| *e) != Some(epoch) {
            let mut idx: Vec<usize> = (0..self.data.len()).collect();
            let mut rng = RngStream::keyed(self.config.seed, &[purpose::SHUFFLE, epoch as u64]).rng();
            idx.shuffle(&mut rng);
            self.order = Some((epoch, idx));
        }
        &self.order.as_ref().expect("just set").1
    }

    /// Builds the multi-crop views of one batch. Each sample draws from its
    /// own stream, so the result does not depend on the thread count.
    pub fn batch_views(&mut self, epoch: usize, offset: usize) -> Result<Vec<ViewBundle>> {
        let b = self.config.batch_size;
        let idx: Vec<usize> = {
            let order = self.epoch_order(epoch);
            order[offset * b..((offset + 1) * b).min(order.len())].to_vec()
        };
        let (strategy, seed, data, augment) = (self.config.strategy, self.config.seed, self.data, &self.augment);
        idx.par_iter()
            .map(|&i| {
                let stream = RngStream::keyed(seed, &[purpose::AUGMENT, epoch as u64, i as u64]);
                compose_strategy(strategy, &data.images[i], i, augment, stream)
            })
            .collect()
    }

    fn lr_at(&self, step: usize) -> f64 {
        let warmup = self.config.warmup_epochs * self.steps_per_epoch;
        lr_schedule(step, self.total_steps(), warmup, self.config.peak_lr(), self.config.floor_lr())
    }

    fn weight_decay_at(&self, step: usize) -> f64 {
        match self.config.weight_decay_end {
            Some(end) => cosine_ramp(step, self.total_steps(), self.config.weight_decay, end),
            None => self.config.weight_decay,
        }
    }

    fn ema_at(&self, step: usize) -> f64 {
        match self.config.ema_momentum_end {
            Some(end) => cosine_ramp(step, self.total_steps(), self.config.ema_momentum, end),
            None => self.config.ema_momentum,
        }
    }

    /// Runs one optimizer step and returns its log row.
    pub fn step(&mut self) -> Result<LogRow> {
        if self.is_done() {
            return Err(Error::Contract("training already finished".into()));
        }
        let step = self.state.step;
        let epoch = step / self.steps_per_epoch;
        let bundles = self.batch_views(epoch, step % self.steps_per_epoch)?;
        let n_global = bundles[0].global_views.len();
        let n_local = bundles[0].local_views.len();
        let stack = |pick: &dyn Fn(&ViewBundle) -> &Image| -> Result<Tensor> {
            let imgs: Vec<&Image> = bundles.iter().map(pick).collect();
            batch_tensor(&imgs)
        };
        let globals = (0..n_global)
            .map(|g| stack(&|b: &ViewBundle| &b.global_views[g].image))
            .collect::<Result<Vec<_>>>()?;
        let locals = (0..n_local)
            .map(|l| stack(&|b: &ViewBundle| &b.local_views[l].image))
            .collect::<Result<Vec<_>>>()?;

        let mut tape = if self.config.strict { Tape::strict() } else { Tape::new() };
        let pair = &self.state.pair;
        let svars = pair.student.params.bind(&mut tape, true);
        let w = &self.config.loss;

        let (total, breakdown, teacher_ir) = match self.config.objective {
            Objective::Clever => {
                let tvars = pair.teacher.params.bind(&mut tape, false);
                let mut student_ir = Vec::new();
                let mut student_ef = Vec::new();
                let mut teacher_ir = Vec::new();
                let mut teacher_ef = Vec::new();
                for x in &globals {
                    let xv = tape.constant(x.clone());
                    let s = pair.student.encode_split(&mut tape, &svars, xv)?;
                    let h = project(&mut tape, &svars, &pair.student, &s)?;
                    student_ir.push(h.ir);
                    student_ef.extend(h.ef);
                    let t = pair.teacher.encode_split(&mut tape, &tvars, xv)?;
                    let ht = project(&mut tape, &tvars, &pair.teacher, &t)?;
                    teacher_ir.push(tape.value(ht.ir).clone());
                    if let Some(ef) = ht.ef {
                        teacher_ef.push(tape.value(ef).clone());
                    }
                }
                for x in &locals {
                    let xv = tape.constant(x.clone());
                    let s = pair.student.encode_split(&mut tape, &svars, xv)?;
                    student_ir.push(pair.student.head_ir().forward(&mut tape, &svars, s.z_ir)?);
                }
                let l_cl = contrastive_loss(&mut tape, &teacher_ir, &student_ir, &pair.center, w)?;
                let l_orth = orthogonal_loss(&mut tape, &student_ef, &teacher_ef, w.orth_temperature)?;
                let l_preg = preg_loss(&mut tape, &svars, &pair.student)?;
                let (total, b) = total_loss(&mut tape, l_cl, l_orth, l_preg, w)?;
                (total, b, teacher_ir)
            }
            Objective::Ddcl => {
                if globals.len() < 2 {
                    return Err(Error::Contract("the two-view objective needs two global views".into()));
                }
                let mut outs = Vec::new();
                for x in &globals[..2] {
                    let xv = tape.constant(x.clone());
                    let s = pair.student.encode_split(&mut tape, &svars, xv)?;
                    outs.push(project(&mut tape, &svars, &pair.student, &s)?);
                }
                let h_v = match (outs[0].ef, outs[1].ef) {
                    (Some(a), Some(b)) => Some((a, b)),
                    _ => None,
                };
                let (l_i, l_v) = ddcl_losses(&mut tape, (outs[0].ir, outs[1].ir), h_v)?;
                let l_preg = preg_loss(&mut tape, &svars, &pair.student)?;
                let (total, b) = total_loss(&mut tape, l_i, l_v, l_preg, w)?;
                (total, b, Vec::new())
            }
        };
        if !breakdown.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite loss at step {step}: l_cl={} l_orth={} l_preg={} l_total={}",
                breakdown.l_cl, breakdown.l_orth, breakdown.l_preg, breakdown.l_total
            )));
        }
        let grads = tape.backward(total)?;
        let grad_refs: Vec<Option<&Tensor>> = svars.iter().map(|&v: &Var| grads.get(v)).collect();
        let lr = self.lr_at(step);
        let wd = self.weight_decay_at(step);
        let ema = self.ema_at(step);
        let state = &mut self.state;
        state.optimizer.step(&mut state.pair.student.params, &grad_refs, lr, wd)?;
        state.pair.ema_update(ema)?;
        if !teacher_ir.is_empty() {
            let refs: Vec<&Tensor> = teacher_ir.iter().collect();
            state.pair.center_update(&refs, w.center_momentum)?;
        }
        state.step += 1;
        Ok(LogRow {
            step,
            epoch,
            lr,
            loss: breakdown,
        })
    }

    /// Trains to the end. Writes `epoch-XXXX.clvr` checkpoints into
    /// `checkpoint_dir` at the configured cadence and always after the last
    /// epoch. The collapse log gets a row for the starting epoch and one per
    /// completed epoch.
    pub fn run(&mut self, checkpoint_dir: Option<&Path>) -> Result<TrainOutput> {
        let mut log = Vec::new();
        let mut collapse = Vec::new();
        if self.state.step.is_multiple_of(self.steps_per_epoch) {
            collapse.push(self.collapse_row(self.state.step / self.steps_per_epoch)?);
        }
        while !self.is_done() {
            let row = self.step()?;
            log::debug!("step {} loss {:.6}", row.step, row.loss.l_total);
            log.push(row);
            if self.state.step.is_multiple_of(self.steps_per_epoch) {
                let epoch = self.state.step / self.steps_per_epoch;
                let c = self.collapse_row(epoch)?;
                log::info!(
                    "epoch {epoch}: loss {:.5} | log10 |h_IR| {:.3} |h_EF| {:.3}",
                    row.loss.l_total,
                    c.log10_h_ir,
                    c.log10_h_ef
                );
                collapse.push(c);
                let every = self.config.checkpoint_every;
                let due = self.is_done() || (every > 0 && epoch.is_multiple_of(every));
                if let (Some(dir), true) = (checkpoint_dir, due) {
                    self.checkpoint().save(&dir.join(format!("epoch-{epoch:04}.clvr")))?;
                }
            }
        }
        Ok(TrainOutput {
            checkpoint: self.checkpoint(),
            log,
            collapse,
        })
    }
}

/// Trains from scratch on `data`.
pub fn train(config: TrainConfig, data: &Dataset) -> Result<TrainOutput> {
    Trainer::new(config, data)?.run(None)
}
