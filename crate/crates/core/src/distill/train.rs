use serde::{Deserialize, Serialize};

use super::losses::{nll_loss, Objective};
use crate::autodiff::{adam_step, AdamState, Mode, Tape};
use crate::data::{batches, encode_constant, ImageDataset};
use crate::error::{Error, Result};
use crate::snn::{argmax_rows, classify_logits, Network, NetworkSpec, NeuronConfig, Sat};

/// Batch size used for eval-mode passes; it does not affect the results.
pub const EVAL_BATCH: usize = 500;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub timesteps: usize,
    pub neuron: NeuronConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            batch_size: 64,
            lr: AdamState::DEFAULT_LR,
            seed: 0,
            timesteps: 128,
            neuron: NeuronConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Config(format!(
                "batch size must be at least 2 for batch norm, got {}",
                self.batch_size
            )));
        }
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(Error::Config(format!(
                "learning rate must be finite and >= 0, got {}",
                self.lr
            )));
        }
        if self.timesteps == 0 {
            return Err(Error::Config("timestep count must be at least 1".into()));
        }
        self.neuron.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetricSplit {
    Train,
    Validation,
    Test,
}

impl MetricSplit {
    pub fn name(self) -> &'static str {
        match self {
            MetricSplit::Train => "train",
            MetricSplit::Validation => "validation",
            MetricSplit::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(MetricSplit::Train),
            "validation" => Ok(MetricSplit::Validation),
            "test" => Ok(MetricSplit::Test),
            other => Err(Error::Format(format!("unknown metrics split `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub split: MetricSplit,
    pub loss: f64,
    pub accuracy: f64,
}

fn wrap(epoch: usize, batch: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::Numeric(detail) => Error::Training { epoch, batch, detail },
        other => other,
    }
}

fn check_dataset(net: &Network, ds: &ImageDataset) -> Result<()> {
    if ds.is_empty() {
        return Err(Error::Data("dataset is empty".into()));
    }
    if ds.pixels() != net.spec().input_dim() {
        return Err(Error::Spec(format!(
            "network expects {} inputs, images have {}",
            net.spec().input_dim(),
            ds.pixels()
        )));
    }
    if let Some(&bad) = ds.labels().iter().find(|&&l| l as usize >= net.spec().classes()) {
        return Err(Error::Data(format!(
            "label {bad} outside the network's {} classes",
            net.spec().classes()
        )));
    }
    Ok(())
}

fn correct(log_probs: &[f64], classes: usize, labels: &[usize]) -> usize {
    argmax_rows(log_probs, classes)
        .iter()
        .zip(labels)
        .filter(|(p, l)| p == l)
        .count()
}

/// One shuffled pass of supervised training (NLL on time-averaged outputs).
/// `epoch` selects the shuffle order and labels the returned record.
pub fn train_supervised_epoch(
    net: &mut Network,
    ds: &ImageDataset,
    cfg: &TrainConfig,
    opt: &mut AdamState,
    epoch: usize,
) -> Result<MetricsRecord> {
    cfg.validate()?;
    check_dataset(net, ds)?;
    opt.lr = cfg.lr;
    let plan = batches(ds.len(), cfg.batch_size, Some((cfg.seed, epoch as u64)), Mode::Train);
    if plan.is_empty() {
        return Err(Error::Data(format!(
            "{} samples cannot fill one batch of {}",
            ds.len(),
            cfg.batch_size
        )));
    }
    let classes = net.spec().classes();
    let (mut loss_sum, mut hits, mut seen) = (0.0, 0, 0);
    for (bi, idx) in plan.iter().enumerate() {
        let batch = encode_constant(ds, idx, net.spec().timesteps)?;
        let mut tape = Tape::new();
        net.reset_state();
        let trace = net.forward(&mut tape, &batch, Mode::Train).map_err(wrap(epoch, bi))?;
        let logits = classify_logits(&mut tape, trace.sat).map_err(wrap(epoch, bi))?;
        let loss = nll_loss(&mut tape, logits, &batch.labels)?;
        let value = tape.value(loss)[0];
        if !value.is_finite() {
            return Err(Error::Training {
                epoch,
                batch: bi,
                detail: format!("loss is {value}"),
            });
        }
        hits += correct(tape.value(logits), classes, &batch.labels);
        seen += idx.len();
        loss_sum += value * idx.len() as f64;
        let grads = tape.backward(loss)?;
        net.accumulate_grads(&grads, &trace)?;
        adam_step(&mut net.params_mut(), opt)?;
    }
    Ok(MetricsRecord {
        epoch,
        split: MetricSplit::Train,
        loss: loss_sum / seen as f64,
        accuracy: hits as f64 / seen as f64,
    })
}

/// Eval-mode outputs of a frozen teacher over a whole dataset, computed once
/// and reused by every distillation epoch.
#[derive(Debug, Clone)]
pub struct TeacherTargets {
    spec: NetworkSpec,
    sat: Sat,
}

impl TeacherTargets {
    pub fn compute(teacher: &Network, ds: &ImageDataset) -> Result<TeacherTargets> {
        if !teacher.is_frozen() {
            return Err(Error::Contract("teacher must be frozen before distillation".into()));
        }
        check_dataset(teacher, ds)?;
        let parts = teacher_sats(teacher, ds)?;
        Ok(TeacherTargets {
            spec: teacher.spec().clone(),
            sat: Sat::concat(&parts)?,
        })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    /// `[t, c, N]` over the dataset the targets were computed on.
    pub fn sat(&self) -> &Sat {
        &self.sat
    }

    pub fn len(&self) -> usize {
        self.sat.dims().b
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn check_pair(t: &NetworkSpec, s: &NetworkSpec) -> Result<()> {
    if t.timesteps != s.timesteps {
        return Err(Error::Spec(format!(
            "teacher runs {} timesteps, student {}",
            t.timesteps, s.timesteps
        )));
    }
    if t.classes() != s.classes() {
        return Err(Error::Spec(format!(
            "teacher has {} classes, student {}",
            t.classes(),
            s.classes()
        )));
    }
    if t.input_dim() != s.input_dim() {
        return Err(Error::Spec(format!(
            "teacher takes {} inputs, student {}",
            t.input_dim(),
            s.input_dim()
        )));
    }
    Ok(())
}

/// One shuffled pass training `student` to match the frozen `teacher`'s SATs.
///
/// Labels only feed the reported accuracy.
pub fn distill_epoch(
    teacher: &Network,
    student: &mut Network,
    ds: &ImageDataset,
    cfg: &TrainConfig,
    objective: &Objective,
    opt: &mut AdamState,
    epoch: usize,
) -> Result<MetricsRecord> {
    if !teacher.is_frozen() {
        return Err(Error::Contract("teacher must be frozen before distillation".into()));
    }
    check_pair(teacher.spec(), student.spec())?;
    let targets = TeacherTargets::compute(teacher, ds)?;
    distill_epoch_with_targets(&targets, student, ds, cfg, objective, opt, epoch)
}

/// [`distill_epoch`] against precomputed teacher outputs for `ds`.
pub fn distill_epoch_with_targets(
    targets: &TeacherTargets,
    student: &mut Network,
    ds: &ImageDataset,
    cfg: &TrainConfig,
    objective: &Objective,
    opt: &mut AdamState,
    epoch: usize,
) -> Result<MetricsRecord> {
    cfg.validate()?;
    check_pair(targets.spec(), student.spec())?;
    check_dataset(student, ds)?;
    if targets.len() != ds.len() {
        return Err(Error::Consistency(format!(
            "teacher targets cover {} samples, dataset has {}",
            targets.len(),
            ds.len()
        )));
    }
    objective.validate(student.spec().timesteps)?;
    opt.lr = cfg.lr;
    let plan = batches(ds.len(), cfg.batch_size, Some((cfg.seed, epoch as u64)), Mode::Train);
    if plan.is_empty() {
        return Err(Error::Data(format!(
            "{} samples cannot fill one batch of {}",
            ds.len(),
            cfg.batch_size
        )));
    }
    let classes = student.spec().classes();
    let (mut loss_sum, mut hits, mut seen) = (0.0, 0, 0);
    for (bi, idx) in plan.iter().enumerate() {
        let batch = encode_constant(ds, idx, student.spec().timesteps)?;
        let mut tape = Tape::new();
        let sat_t = targets.sat().select(idx).constant(&mut tape);
        student.reset_state();
        let trace = student
            .forward(&mut tape, &batch, Mode::Train)
            .map_err(wrap(epoch, bi))?;
        let loss = objective.loss(&mut tape, sat_t, trace.sat).map_err(wrap(epoch, bi))?;
        let value = tape.value(loss)[0];
        if !value.is_finite() {
            return Err(Error::Training {
                epoch,
                batch: bi,
                detail: format!("loss is {value}"),
            });
        }
        let logits = classify_logits(&mut tape, trace.sat)?;
        hits += correct(tape.value(logits), classes, &batch.labels);
        seen += idx.len();
        loss_sum += value * idx.len() as f64;
        let grads = tape.backward(loss)?;
        student.accumulate_grads(&grads, &trace)?;
        adam_step(&mut student.params_mut(), opt)?;
    }
    Ok(MetricsRecord {
        epoch,
        split: MetricSplit::Train,
        loss: loss_sum / seen as f64,
        accuracy: hits as f64 / seen as f64,
    })
}

/// Eval-mode `(mean NLL, accuracy)` over the whole dataset.
pub fn evaluate_with_loss(net: &Network, ds: &ImageDataset) -> Result<(f64, f64)> {
    check_dataset(net, ds)?;
    let classes = net.spec().classes();
    let (mut loss_sum, mut hits) = (0.0, 0);
    for idx in batches(ds.len(), EVAL_BATCH, None, Mode::Eval) {
        let batch = encode_constant(ds, &idx, net.spec().timesteps)?;
        let mut tape = Tape::new();
        let trace = net.infer_trace(&mut tape, &batch)?;
        let logits = classify_logits(&mut tape, trace.sat)?;
        let loss = nll_loss(&mut tape, logits, &batch.labels)?;
        loss_sum += tape.value(loss)[0] * idx.len() as f64;
        hits += correct(tape.value(logits), classes, &batch.labels);
    }
    Ok((loss_sum / ds.len() as f64, hits as f64 / ds.len() as f64))
}

/// Fraction of samples whose eval-mode prediction matches the label.
pub fn evaluate(net: &Network, ds: &ImageDataset) -> Result<f64> {
    Ok(evaluate_with_loss(net, ds)?.1)
}

fn test_record(net: &Network, test: &ImageDataset, epoch: usize) -> Result<MetricsRecord> {
    let (loss, accuracy) = evaluate_with_loss(net, test)?;
    Ok(MetricsRecord {
        epoch,
        split: MetricSplit::Test,
        loss,
        accuracy,
    })
}

/// Full supervised run: per epoch a train record followed by a test record.
/// Epochs are numbered from 1.
pub fn train_supervised(
    net: &mut Network,
    train: &ImageDataset,
    test: &ImageDataset,
    cfg: &TrainConfig,
) -> Result<Vec<MetricsRecord>> {
    cfg.validate()?;
    let mut opt = AdamState::new(net.params(), cfg.lr);
    let mut records = Vec::with_capacity(2 * cfg.epochs);
    for epoch in 1..=cfg.epochs {
        records.push(train_supervised_epoch(net, train, cfg, &mut opt, epoch)?);
        records.push(test_record(net, test, epoch)?);
    }
    Ok(records)
}

/// Full distillation run; the test records report NLL and accuracy against labels.
pub fn distill(
    teacher: &Network,
    student: &mut Network,
    train: &ImageDataset,
    test: &ImageDataset,
    cfg: &TrainConfig,
    objective: &Objective,
) -> Result<Vec<MetricsRecord>> {
    cfg.validate()?;
    check_pair(teacher.spec(), student.spec())?;
    objective.validate(student.spec().timesteps)?;
    let targets = TeacherTargets::compute(teacher, train)?;
    let mut opt = AdamState::new(student.params(), cfg.lr);
    let mut records = Vec::with_capacity(2 * cfg.epochs);
    for epoch in 1..=cfg.epochs {
        records.push(distill_epoch_with_targets(
            &targets, student, train, cfg, objective, &mut opt, epoch,
        )?);
        records.push(test_record(student, test, epoch)?);
    }
    Ok(records)
}

/// Teacher SATs for a whole dataset in eval mode, batch by batch.
pub fn teacher_sats(teacher: &Network, ds: &ImageDataset) -> Result<Vec<Sat>> {
    batches(ds.len(), EVAL_BATCH, None, Mode::Eval)
        .iter()
        .map(|idx| teacher.infer(&encode_constant(ds, idx, teacher.spec().timesteps)?))
        .collect()
}
