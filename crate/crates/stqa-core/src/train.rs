//! Optimization and evaluation: Adam / momentum SGD with exponential
//! learning-rate decay, dual-optimizer channel training with early
//! stopping, and multi-channel ensemble evaluation.

use std::collections::{BTreeMap, HashMap};

use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, QuestionType, Split};
use crate::error::{EngineError, Result};
use crate::model::Model;
use crate::params::{ParamGroup, ParamSet};
use crate::scoring::{ensemble, lsep_loss, predict, Channel, ChannelScores};
use crate::tape::{Tape, TapeAudit};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptKind {
    Adam,
    Sgd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub kind: OptKind,
    pub lr0: f64,
    /// First-moment decay (Adam only).
    pub beta1: f64,
    /// Second-moment decay (Adam only).
    pub beta2: f64,
    /// Numerical stability term (Adam only).
    pub eps: f64,
    /// Velocity decay (SGD only).
    pub momentum: f64,
    pub decay_rate: f64,
    pub decay_every: usize,
}

impl OptimizerConfig {
    /// Text channel: Adam, lr 3e-4, eps 1e-8.
    pub fn adam_text() -> Self {
        OptimizerConfig {
            kind: OptKind::Adam,
            lr0: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            momentum: 0.0,
            decay_rate: 0.9,
            decay_every: 5,
        }
    }

    /// Matching and scoring layers of the visual channels: same Adam
    /// recipe. A large eps (0.1) would damp these layers to protect a
    /// pretrained extractor during fine-tuning; training from scratch
    /// there is nothing to protect and the damping starves learning.
    pub fn adam_visual_head() -> Self {
        OptimizerConfig::adam_text()
    }

    /// Spatiotemporal feature extractor: SGD, lr 0.02, momentum 0.9.
    pub fn sgd_extractor() -> Self {
        OptimizerConfig {
            kind: OptKind::Sgd,
            lr0: 0.02,
            beta1: 0.0,
            beta2: 0.0,
            eps: 0.0,
            momentum: 0.9,
            decay_rate: 0.9,
            decay_every: 5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 > 0.0) {
            return Err(EngineError::Config(format!(
                "lr0 must be positive, got {}",
                self.lr0
            )));
        }
        if !(self.decay_rate > 0.0 && self.decay_rate <= 1.0) {
            return Err(EngineError::Config(format!(
                "decay_rate must be in (0, 1], got {}",
                self.decay_rate
            )));
        }
        if self.decay_every == 0 {
            return Err(EngineError::Config("decay_every must be positive".into()));
        }
        match self.kind {
            OptKind::Adam => {
                for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
                    if !(0.0..1.0).contains(&b) {
                        return Err(EngineError::Config(format!(
                            "{name} must be in [0, 1), got {b}"
                        )));
                    }
                }
                if !(self.eps > 0.0) {
                    return Err(EngineError::Config(format!(
                        "adam eps must be positive, got {}",
                        self.eps
                    )));
                }
            }
            OptKind::Sgd => {
                if !(0.0..1.0).contains(&self.momentum) {
                    return Err(EngineError::Config(format!(
                        "momentum must be in [0, 1), got {}",
                        self.momentum
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        lr_schedule(self.lr0, self.decay_rate, self.decay_every, epoch)
    }
}

/// `lr0 * decay_rate^(epoch / decay_every)` with integer division.
pub fn lr_schedule(lr0: f64, decay_rate: f64, decay_every: usize, epoch: usize) -> f64 {
    lr0 * decay_rate.powi((epoch / decay_every) as i32)
}

/// Optimizer with per-parameter state for one parameter group. Slot
/// buffers are allocated on first touch and keyed by parameter name.
#[derive(Debug, Clone)]
pub struct Optimizer {
    cfg: OptimizerConfig,
    group: ParamGroup,
    steps: u64,
    moment1: HashMap<String, Vec<f64>>,
    moment2: HashMap<String, Vec<f64>>,
}

impl Optimizer {
    pub fn new(cfg: OptimizerConfig, group: ParamGroup) -> Result<Self> {
        cfg.validate()?;
        Ok(Optimizer {
            cfg,
            group,
            steps: 0,
            moment1: HashMap::new(),
            moment2: HashMap::new(),
        })
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.cfg
    }

    /// Apply one update to every parameter of this optimizer's group.
    /// `grads` is aligned with the registration order of `params`.
    pub fn step(&mut self, params: &mut ParamSet, grads: &[Vec<f64>], epoch: usize) -> Result<()> {
        if grads.len() != params.len() {
            return Err(EngineError::Dimension {
                op: "optimizer_step",
                msg: format!("{} gradients for {} parameters", grads.len(), params.len()),
            });
        }
        let lr = self.cfg.lr_at(epoch);
        self.steps += 1;
        for i in 0..params.len() {
            let entry = params.entry_mut(i);
            if entry.group != self.group {
                continue;
            }
            let g = &grads[i];
            if g.len() != entry.tensor.numel() {
                return Err(EngineError::Dimension {
                    op: "optimizer_step",
                    msg: format!(
                        "gradient of {} scalars for parameter {} of {}",
                        g.len(),
                        entry.name,
                        entry.tensor.numel()
                    ),
                });
            }
            if g.iter().any(|v| !v.is_finite()) {
                return Err(EngineError::Numeric(format!(
                    "non-finite gradient in parameter {}",
                    entry.name
                )));
            }
            let w = entry.tensor.data_mut();
            match self.cfg.kind {
                OptKind::Adam => {
                    let m = self
                        .moment1
                        .entry(entry.name.clone())
                        .or_insert_with(|| vec![0.0; w.len()]);
                    let v = self
                        .moment2
                        .entry(entry.name.clone())
                        .or_insert_with(|| vec![0.0; w.len()]);
                    let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
                    let c1 = 1.0 - b1.powi(self.steps as i32);
                    let c2 = 1.0 - b2.powi(self.steps as i32);
                    for j in 0..w.len() {
                        m[j] = b1 * m[j] + (1.0 - b1) * g[j];
                        v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
                        let mh = m[j] / c1;
                        let vh = v[j] / c2;
                        w[j] -= lr * mh / (vh.sqrt() + self.cfg.eps);
                    }
                }
                OptKind::Sgd => {
                    let v = self
                        .moment1
                        .entry(entry.name.clone())
                        .or_insert_with(|| vec![0.0; w.len()]);
                    for j in 0..w.len() {
                        v[j] = self.cfg.momentum * v[j] + g[j];
                        w[j] -= lr * v[j];
                    }
                }
            }
        }
        Ok(())
    }
}

/// Scale all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the pre-clip norm.
pub fn clip_global_norm(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let sq: f64 = grads.iter().flat_map(|g| g.iter()).map(|v| v * v).sum();
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        for g in grads.iter_mut() {
            for v in g.iter_mut() {
                *v *= scale;
            }
        }
    }
    norm
}

/// Strict-improvement early stopping.
#[derive(Debug, Clone)]
pub struct EarlyStopper {
    patience: usize,
    best: f64,
    bad: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopSignal {
    Improved,
    /// Consecutive non-improving epochs so far, still under patience.
    Wait(usize),
    /// Patience exhausted: this epoch is the `patience`-th non-improving
    /// one in a row.
    Halt,
}

impl EarlyStopper {
    pub fn new(patience: usize) -> Self {
        EarlyStopper {
            patience,
            best: f64::NEG_INFINITY,
            bad: 0,
        }
    }

    pub fn observe(&mut self, accuracy: f64) -> StopSignal {
        if accuracy > self.best {
            self.best = accuracy;
            self.bad = 0;
            StopSignal::Improved
        } else {
            self.bad += 1;
            if self.bad >= self.patience {
                StopSignal::Halt
            } else {
                StopSignal::Wait(self.bad)
            }
        }
    }

    pub fn best(&self) -> f64 {
        self.best
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub max_epochs: usize,
    pub batch_size: usize,
    /// Consecutive non-improving validation epochs tolerated before
    /// stopping.
    pub patience: usize,
    /// Global gradient-norm ceiling; `None` disables clipping.
    pub clip_norm: Option<f64>,
    pub head: OptimizerConfig,
    pub extractor: OptimizerConfig,
}

impl TrainConfig {
    /// Text channel regimen: Adam everywhere, up to 100 epochs.
    ///
    /// Per-example updates: the 3e-4 learning rate assumes many steps
    /// per epoch, which desk-scale datasets only reach at batch size 1.
    /// Larger batches starve the run of steps and the patience window
    /// closes before validation accuracy moves.
    pub fn text() -> Self {
        TrainConfig {
            max_epochs: 100,
            batch_size: 1,
            patience: 3,
            clip_norm: Some(5.0),
            head: OptimizerConfig::adam_text(),
            extractor: OptimizerConfig::sgd_extractor(),
        }
    }

    /// Visual channel regimen: SGD on the extractor, blunted Adam on the
    /// matching and scoring layers, up to 40 epochs. Batch size 1 for the
    /// same step-count reason as the text regimen.
    pub fn visual() -> Self {
        TrainConfig {
            max_epochs: 40,
            batch_size: 1,
            patience: 3,
            clip_norm: Some(5.0),
            head: OptimizerConfig::adam_visual_head(),
            extractor: OptimizerConfig::sgd_extractor(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_epochs == 0 || self.batch_size == 0 || self.patience == 0 {
            return Err(EngineError::Config(
                "max_epochs, batch_size and patience must be positive".into(),
            ));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return Err(EngineError::Config(format!(
                    "clip_norm must be positive, got {c}"
                )));
            }
        }
        self.head.validate()?;
        self.extractor.validate()
    }
}

/// One line of the tab-separated metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_accuracy: f64,
    pub lr_head: f64,
    pub lr_extractor: f64,
}

impl EpochRecord {
    pub fn tsv_header() -> &'static str {
        "epoch\ttrain_loss\tval_accuracy\tlr_head\tlr_extractor"
    }

    pub fn tsv(&self) -> String {
        format!(
            "{}\t{:.6}\t{:.4}\t{:.6}\t{:.6}",
            self.epoch, self.train_loss, self.val_accuracy, self.lr_head, self.lr_extractor
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum StopReason {
    MaxEpochs,
    EarlyStopped,
    /// Loss or a gradient went non-finite; the best checkpoint so far is
    /// preserved.
    Diverged {
        detail: String,
    },
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Epoch of the restored best checkpoint; `None` if no epoch finished.
    pub best_epoch: Option<usize>,
    pub best_val_accuracy: f64,
    pub history: Vec<EpochRecord>,
    pub stop: StopReason,
}

/// Per-example loss gradient: one tape forward/backward pass.
fn example_grads(model: &Model, ds: &Dataset, idx: usize) -> Result<(Vec<Vec<f64>>, f64)> {
    let ex = ds.example(idx)?;
    let mut tape = Tape::new();
    let bound = model.params().bind(&mut tape);
    let scores = model.forward_scores(&mut tape, &bound, ex.input())?;
    let loss = lsep_loss(&mut tape, scores, &[ex.pack.correct])?;
    let value = tape.item(loss)?;
    tape.backward(loss)?;
    let grads = model.params().collect_grads(&tape, &bound)?;
    Ok((grads, value))
}

/// Mean loss gradient over a batch; examples run in parallel, the
/// reduction follows batch order.
fn batch_grads(model: &Model, ds: &Dataset, batch: &[usize]) -> Result<(Vec<Vec<f64>>, f64)> {
    let per: Vec<Result<(Vec<Vec<f64>>, f64)>> = batch
        .par_iter()
        .map(|&i| example_grads(model, ds, i))
        .collect();
    let mut acc: Vec<Vec<f64>> = model
        .params()
        .iter()
        .map(|e| vec![0.0; e.tensor.numel()])
        .collect();
    let mut loss_sum = 0.0;
    for r in per {
        let (grads, loss) = r?;
        loss_sum += loss;
        for (dst, src) in acc.iter_mut().zip(&grads) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += s;
            }
        }
    }
    let inv = 1.0 / batch.len() as f64;
    for g in &mut acc {
        for v in g.iter_mut() {
            *v *= inv;
        }
    }
    Ok((acc, loss_sum * inv))
}

/// Accuracy of a single model over the given record indices, with the
/// merged softmax audit of every forward pass.
pub fn split_accuracy(model: &Model, ds: &Dataset, indices: &[usize]) -> Result<(f64, TapeAudit)> {
    if indices.is_empty() {
        return Err(EngineError::Config(
            "accuracy over an empty index list".into(),
        ));
    }
    let per: Vec<Result<(bool, TapeAudit)>> = indices
        .par_iter()
        .map(|&i| {
            let ex = ds.example(i)?;
            let mut tape = Tape::new();
            let bound = model.params().bind(&mut tape);
            let scores = model.forward_scores(&mut tape, &bound, ex.input())?;
            let p = tape.value(scores).to_vec();
            let ens = ensemble(&[ChannelScores {
                channel: model.channel(),
                p,
            }])?;
            let mut audit = tape.audit();
            audit_ensemble(&mut audit, &ens.per_channel);
            Ok((predict(&ens) == ex.pack.correct, audit))
        })
        .collect();
    let mut hits = 0usize;
    let mut audit = TapeAudit::default();
    for r in per {
        let (hit, a) = r?;
        hits += usize::from(hit);
        audit.merge(&a);
    }
    Ok((hits as f64 / indices.len() as f64, audit))
}

/// Fold the ensemble's softmax normalizations into a tape audit.
fn audit_ensemble(audit: &mut TapeAudit, per_channel: &[(Channel, Vec<f64>)]) {
    for (_, probs) in per_channel {
        let dev = (probs.iter().sum::<f64>() - 1.0).abs();
        audit.merge(&TapeAudit {
            softmax_slices: 1,
            max_softmax_dev: dev,
        });
    }
}

/// Train one channel in place. The model ends at the parameters of its
/// best validation epoch; `on_epoch` fires once per completed epoch, in
/// order.
pub fn train_channel(
    model: &mut Model,
    ds: &Dataset,
    cfg: &TrainConfig,
    seed: u64,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if model.candidates() != ds.candidates() {
        return Err(EngineError::Config(format!(
            "model expects {} candidates, dataset has {}",
            model.candidates(),
            ds.candidates()
        )));
    }
    let mut train_idx = ds.indices(Split::Train);
    let val_idx = ds.indices(Split::Val);
    if train_idx.is_empty() || val_idx.is_empty() {
        return Err(EngineError::Config(format!(
            "need non-empty train and val splits, got {} / {}",
            train_idx.len(),
            val_idx.len()
        )));
    }

    let mut head_opt = Optimizer::new(cfg.head.clone(), ParamGroup::Head)?;
    let mut ext_opt = Optimizer::new(cfg.extractor.clone(), ParamGroup::Extractor)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut stopper = EarlyStopper::new(cfg.patience);
    let mut best: ParamSet = model.params().clone();
    let mut best_epoch: Option<usize> = None;
    let mut history = Vec::new();

    let finish =
        |model: &mut Model, best: ParamSet, stop, best_epoch, history, stopper: &EarlyStopper| {
            *model.params_mut() = best;
            TrainOutcome {
                best_epoch,
                best_val_accuracy: stopper.best(),
                history,
                stop,
            }
        };

    for epoch in 0..cfg.max_epochs {
        train_idx.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for batch in train_idx.chunks(cfg.batch_size) {
            // Numeric failures (overflowing exp, NaN activations) are
            // divergence, not bugs: keep the best checkpoint and stop.
            let (mut grads, loss) = match batch_grads(model, ds, batch) {
                Ok(v) => v,
                Err(EngineError::Numeric(msg)) => {
                    let detail = format!("{msg} at epoch {epoch}");
                    return Ok(finish(
                        model,
                        best,
                        StopReason::Diverged { detail },
                        best_epoch,
                        history,
                        &stopper,
                    ));
                }
                Err(e) => return Err(e),
            };
            if !loss.is_finite() {
                let detail = format!("batch loss {loss} at epoch {epoch}");
                return Ok(finish(
                    model,
                    best,
                    StopReason::Diverged { detail },
                    best_epoch,
                    history,
                    &stopper,
                ));
            }
            loss_sum += loss * batch.len() as f64;
            if let Some(max_norm) = cfg.clip_norm {
                clip_global_norm(&mut grads, max_norm);
            }
            let stepped = head_opt
                .step(model.params_mut(), &grads, epoch)
                .and_then(|()| ext_opt.step(model.params_mut(), &grads, epoch));
            if let Err(EngineError::Numeric(msg)) = stepped {
                let detail = format!("{msg} at epoch {epoch}");
                return Ok(finish(
                    model,
                    best,
                    StopReason::Diverged { detail },
                    best_epoch,
                    history,
                    &stopper,
                ));
            }
            stepped?;
            model.enforce_invariants();
        }
        let train_loss = loss_sum / train_idx.len() as f64;
        let (val_accuracy, _) = split_accuracy(model, ds, &val_idx)?;
        let record = EpochRecord {
            epoch,
            train_loss,
            val_accuracy,
            lr_head: cfg.head.lr_at(epoch),
            lr_extractor: cfg.extractor.lr_at(epoch),
        };
        on_epoch(&record);
        history.push(record);
        match stopper.observe(val_accuracy) {
            StopSignal::Improved => {
                best = model.params().clone();
                best_epoch = Some(epoch);
            }
            StopSignal::Wait(_) => {}
            StopSignal::Halt => {
                return Ok(finish(
                    model,
                    best,
                    StopReason::EarlyStopped,
                    best_epoch,
                    history,
                    &stopper,
                ));
            }
        }
    }
    Ok(finish(
        model,
        best,
        StopReason::MaxEpochs,
        best_epoch,
        history,
        &stopper,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TypeTally {
    pub total: usize,
    pub hits: usize,
}

/// Raw per-channel scores for one question, stored so ensembles can be
/// replayed exactly from the dumps of independent runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreDump {
    pub id: String,
    pub correct: usize,
    pub channels: Vec<(Channel, Vec<f64>)>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub total: usize,
    pub hits: usize,
    pub accuracy: f64,
    pub per_type: BTreeMap<QuestionType, TypeTally>,
    pub audit: TapeAudit,
    /// Predicted candidate per question, in index order.
    pub predictions: Vec<usize>,
    pub dumps: Option<Vec<ScoreDump>>,
}

impl EvalReport {
    pub fn render_text(&self) -> String {
        let mut out = format!(
            "questions\t{}\ncorrect\t{}\naccuracy\t{:.4}\n",
            self.total, self.hits, self.accuracy
        );
        for (ty, t) in &self.per_type {
            out.push_str(&format!(
                "{}\t{}/{}\t{:.4}\n",
                ty.as_str(),
                t.hits,
                t.total,
                t.hits as f64 / t.total as f64
            ));
        }
        out.push_str(&format!(
            "softmax_slices\t{}\nmax_softmax_dev\t{:.3e}\n",
            self.audit.softmax_slices, self.audit.max_softmax_dev
        ));
        out
    }
}

fn check_eval_models(models: &[&Model], ds: &Dataset) -> Result<()> {
    if models.is_empty() || models.len() > Channel::ALL.len() {
        return Err(EngineError::Config(format!(
            "evaluation takes 1 to {} channels, got {}",
            Channel::ALL.len(),
            models.len()
        )));
    }
    for (i, m) in models.iter().enumerate() {
        if m.candidates() != ds.candidates() {
            return Err(EngineError::Config(format!(
                "model {} expects {} candidates, dataset has {}",
                m.channel().as_str(),
                m.candidates(),
                ds.candidates()
            )));
        }
        if models[..i].iter().any(|o| o.channel() == m.channel()) {
            return Err(EngineError::Config(format!(
                "channel {} appears twice",
                m.channel().as_str()
            )));
        }
    }
    Ok(())
}

/// Evaluate an ensemble of one to three channel models over a split
/// (`None` = every record). Questions run in parallel; all aggregation
/// follows record order.
pub fn evaluate(
    models: &[&Model],
    ds: &Dataset,
    split: Option<Split>,
    with_dumps: bool,
) -> Result<EvalReport> {
    check_eval_models(models, ds)?;
    let indices: Vec<usize> = match split {
        Some(s) => ds.indices(s),
        None => (0..ds.len()).collect(),
    };
    if indices.is_empty() {
        return Err(EngineError::Config(
            "no records in the requested split".into(),
        ));
    }
    struct Row {
        qtype: QuestionType,
        hit: bool,
        predicted: usize,
        audit: TapeAudit,
        dump: ScoreDump,
    }
    let rows: Vec<Result<Row>> = indices
        .par_iter()
        .map(|&i| {
            let ex = ds.example(i)?;
            let mut audit = TapeAudit::default();
            let mut channels = Vec::with_capacity(models.len());
            for m in models {
                let mut tape = Tape::new();
                let bound = m.params().bind(&mut tape);
                let scores = m.forward_scores(&mut tape, &bound, ex.input())?;
                let p = tape.value(scores).to_vec();
                audit.merge(&tape.audit());
                channels.push(ChannelScores {
                    channel: m.channel(),
                    p,
                });
            }
            let ens = ensemble(&channels)?;
            audit_ensemble(&mut audit, &ens.per_channel);
            let predicted = predict(&ens);
            Ok(Row {
                qtype: ex.qtype,
                hit: predicted == ex.pack.correct,
                predicted,
                audit,
                dump: ScoreDump {
                    id: ex.id.clone(),
                    correct: ex.pack.correct,
                    channels: channels.into_iter().map(|c| (c.channel, c.p)).collect(),
                },
            })
        })
        .collect();

    let mut hits = 0usize;
    let mut per_type: BTreeMap<QuestionType, TypeTally> = BTreeMap::new();
    let mut audit = TapeAudit::default();
    let mut predictions = Vec::with_capacity(indices.len());
    let mut dumps = Vec::new();
    for r in rows {
        let row = r?;
        hits += usize::from(row.hit);
        let t = per_type.entry(row.qtype).or_default();
        t.total += 1;
        t.hits += usize::from(row.hit);
        audit.merge(&row.audit);
        predictions.push(row.predicted);
        if with_dumps {
            dumps.push(row.dump);
        }
    }
    Ok(EvalReport {
        total: indices.len(),
        hits,
        accuracy: hits as f64 / indices.len() as f64,
        per_type,
        audit,
        predictions,
        dumps: if with_dumps { Some(dumps) } else { None },
    })
}

/// Re-run the ensemble from stored per-channel score dumps. Dump lists
/// from separate single-channel runs are merged by question id; every
/// question must carry each channel exactly once.
pub fn replay_dumps(dump_sets: &[Vec<ScoreDump>]) -> Result<Vec<(String, usize, usize)>> {
    if dump_sets.is_empty() {
        return Err(EngineError::Config("no dumps to replay".into()));
    }
    let mut merged: BTreeMap<String, (usize, Vec<(Channel, Vec<f64>)>)> = BTreeMap::new();
    for set in dump_sets {
        for d in set {
            let slot = merged
                .entry(d.id.clone())
                .or_insert_with(|| (d.correct, Vec::new()));
            if slot.0 != d.correct {
                return Err(EngineError::Validation(format!(
                    "dumps disagree on the correct index of {}",
                    d.id
                )));
            }
            for (ch, p) in &d.channels {
                if slot.1.iter().any(|(c, _)| c == ch) {
                    return Err(EngineError::Validation(format!(
                        "channel {} dumped twice for {}",
                        ch.as_str(),
                        d.id
                    )));
                }
                slot.1.push((*ch, p.clone()));
            }
        }
    }
    let mut out = Vec::with_capacity(merged.len());
    for (id, (correct, channels)) in merged {
        let scores: Vec<ChannelScores> = channels
            .into_iter()
            .map(|(channel, p)| ChannelScores { channel, p })
            .collect();
        let ens = ensemble(&scores)?;
        out.push((id, correct, predict(&ens)));
    }
    Ok(out)
}
