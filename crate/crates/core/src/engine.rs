//! Training loops: plain supervised SGD (teachers and baselines) and
//! teacher-to-student distillation with map-matching losses and per-layer
//! learning rates.
//!
//! The distillation objective on a batch is
//!
//! ```text
//! total = cross_entropy(student logits, labels) + lambda * sum_j jsd(S_j, T_j)
//! ```
//!
//! where `S_j` and `T_j` are the student and teacher maps of pair `j`. Teacher
//! maps are always constants. Student maps are differentiable or detached
//! depending on [`DistillOptions::differentiable_maps`].

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::Dataset;
use crate::divergence::{cross_entropy, jsd, jsd_on_tape, DivergenceConfig};
use crate::error::{Error, Result};
use crate::maps::{maps_on_tape, model_maps, MapKind};
use crate::network::{pair_crucial_layers, LayerPairing, Model, ModelSpec};
use crate::scheduler::{initial_states, lr_table, scheduler_step, LayerLrState, LrTable, SchedulerConfig};
use crate::tape::Tape;
use crate::tensor::{log_softmax_last, Tensor};

const EVAL_CHUNK: usize = 256;

/// Per-epoch telemetry.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochResult {
    pub epoch: usize,
    /// Sample-weighted mean training objective over the epoch's batches.
    pub train_loss: f64,
    /// Accuracy on the training split after the epoch.
    pub train_accuracy: f64,
    pub test_loss: f64,
    /// Accuracy on the held-out split after the epoch.
    pub test_accuracy: f64,
    /// Probe-batch divergence per student crucial layer.
    pub per_layer_jsd: BTreeMap<usize, f64>,
    /// Learning rate per student crucial layer after the epoch's scheduler step.
    pub per_layer_alpha: BTreeMap<usize, f64>,
}

/// Settings for plain supervised training.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SgdSettings {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Seeds the per-epoch shuffles.
    pub seed: u64,
}

impl SgdSettings {
    fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be at least 1"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("lr", "must be positive and finite"));
        }
        Ok(())
    }
}

fn check_data(model: &Model, data: &Dataset) -> Result<()> {
    if data.sample_shape() != model.spec().input_shape.as_slice() {
        return Err(Error::ShapeMismatch {
            op: "dataset vs model input",
            lhs: data.sample_shape().to_vec(),
            rhs: model.spec().input_shape.clone(),
        });
    }
    if model.num_classes() != data.num_classes {
        return Err(Error::config(
            "model",
            format!(
                "classifier has {} outputs but the dataset has {} classes",
                model.num_classes(),
                data.num_classes
            ),
        ));
    }
    if data.train.is_empty() || data.test.is_empty() {
        return Err(Error::Empty("train or test split"));
    }
    Ok(())
}

/// Mean cross-entropy and accuracy of `model` over `indices`.
pub fn evaluate(model: &Model, data: &Dataset, indices: &[usize]) -> Result<(f64, f64)> {
    if indices.is_empty() {
        return Err(Error::Empty("evaluation split"));
    }
    let classes = model.num_classes();
    let mut nll = 0.0;
    let mut correct = 0usize;
    for chunk in indices.chunks(EVAL_CHUNK) {
        let (x, labels) = data.batch(chunk)?;
        let logits = model.predict(&x)?;
        let logp = log_softmax_last(&logits)?;
        for (row, &label) in labels.iter().enumerate() {
            let r = &logp.data()[row * classes..(row + 1) * classes];
            nll -= r[label];
            let best = r
                .iter()
                .enumerate()
                .fold(0, |best, (i, &v)| if v > r[best] { i } else { best });
            correct += usize::from(best == label);
        }
    }
    let n = indices.len() as f64;
    Ok((nll / n, correct as f64 / n))
}

/// Returns whether every updated parameter is still finite.
fn apply_sgd(model: &mut Model, grads: &[Tensor], table: &LrTable) -> Result<bool> {
    let layers: Vec<usize> = model.parametric_layers().map(|(i, _)| i).collect();
    if grads.len() != 2 * layers.len() {
        return Err(Error::LengthMismatch(grads.len(), 2 * layers.len()));
    }
    for (k, &layer) in layers.iter().enumerate() {
        let lr = table.lr_for(layer);
        let p = model.layer_params_mut(layer).expect("parametric layer");
        for (t, g) in [&mut p.weight, &mut p.bias].into_iter().zip(&grads[2 * k..2 * k + 2]) {
            for (w, d) in t.data_mut().iter_mut().zip(g.data()) {
                *w -= lr * d;
            }
        }
    }
    Ok(model.parametric_layers().all(|(_, p)| p.weight.is_finite() && p.bias.is_finite()))
}

fn diverged(epoch: usize, detail: impl Into<String>) -> Error {
    Error::Diverged {
        epoch,
        detail: detail.into(),
    }
}

fn is_non_finite(e: &Error) -> bool {
    match e {
        Error::NonFinite { .. } => true,
        Error::AtLayer { source, .. } => is_non_finite(source),
        _ => false,
    }
}

/// Turns overflow inside a training step into a divergence report.
fn step_error(epoch: usize, detail: impl FnOnce(&Error) -> String) -> impl FnOnce(Error) -> Error {
    move |e| {
        if is_non_finite(&e) {
            diverged(epoch, detail(&e))
        } else {
            e
        }
    }
}

/// Minibatch SGD on cross-entropy alone, one shared learning rate.
pub fn train_supervised(model: &mut Model, data: &Dataset, settings: &SgdSettings) -> Result<Vec<EpochResult>> {
    settings.validate()?;
    check_data(model, data)?;
    let table = LrTable {
        default_lr: settings.lr,
        per_layer: BTreeMap::new(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
    let mut order = data.train.clone();
    let mut results = Vec::with_capacity(settings.epochs);
    for epoch in 1..=settings.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(settings.batch_size) {
            let (x, labels) = data.batch(chunk)?;
            let step = || -> Result<(f64, Vec<Tensor>)> {
                let mut tape = Tape::new();
                let params = model.bind(&mut tape)?;
                let xv = tape.constant(x)?;
                let trace = model.forward_trace(&mut tape, &params, xv)?;
                let loss = cross_entropy(&mut tape, trace.logits(), &labels)?;
                let value = tape.value(loss).item()?;
                if !value.is_finite() {
                    return Err(Error::NonFinite { op: "cross_entropy" });
                }
                let grads = tape.backward(loss, &params.all())?;
                Ok((value, grads))
            };
            let (value, grads) = step().map_err(step_error(epoch, |e| e.to_string()))?;
            loss_sum += value * chunk.len() as f64;
            if !apply_sgd(model, &grads, &table)? {
                return Err(diverged(epoch, "parameters became non-finite"));
            }
        }
        let fail = |e: &Error| e.to_string();
        let (_, train_accuracy) = evaluate(model, data, &data.train).map_err(step_error(epoch, fail))?;
        let (test_loss, test_accuracy) = evaluate(model, data, &data.test).map_err(step_error(epoch, fail))?;
        results.push(EpochResult {
            epoch,
            train_loss: loss_sum / order.len() as f64,
            train_accuracy,
            test_loss,
            test_accuracy,
            per_layer_jsd: BTreeMap::new(),
            per_layer_alpha: BTreeMap::new(),
        });
    }
    Ok(results)
}

/// Builds `spec` and trains it with plain SGD and cross-entropy.
pub fn train_teacher(spec: ModelSpec, data: &Dataset, settings: &SgdSettings) -> Result<(Model, Vec<EpochResult>)> {
    let mut model = Model::build(spec)?;
    let results = train_supervised(&mut model, data, settings)?;
    Ok((model, results))
}

/// How the student side of the layer losses is computed.
#[derive(Clone, Debug)]
pub enum StudentMaps<'a> {
    /// Extract from the current forward pass; `differentiable` keeps the maps
    /// connected to the student parameters.
    Live { differentiable: bool },
    /// Reuse previously extracted values, one per pair.
    Cached(&'a [Tensor]),
}

/// Result of one evaluation of the composite objective.
#[derive(Clone, Debug, PartialEq)]
pub struct CompositeLoss {
    pub total: f64,
    pub cross_entropy: f64,
    /// JSD between student and teacher maps, keyed by student layer.
    /// Empty when `lambda == 0`.
    pub per_layer: BTreeMap<usize, f64>,
    /// Gradient of `total` for every student parameter, in declaration order.
    pub gradients: Vec<Tensor>,
    /// Student map values used, one per pair. Empty when `lambda == 0`.
    pub student_maps: Vec<Tensor>,
}

/// Options shared by [`composite_loss`] and the distillation loop.
#[derive(Clone, Debug, PartialEq)]
pub struct LossOptions {
    pub lambda: f64,
    pub divergence: DivergenceConfig,
}

/// Teacher maps of every pair on `batch`, as constants.
pub fn teacher_maps(teacher: &Model, pairing: &LayerPairing, kind: MapKind, batch: &Tensor) -> Result<Vec<Tensor>> {
    Ok(model_maps(teacher, &pairing.teacher_layers(), kind, batch)?
        .into_iter()
        .map(|m| Tensor::from_vec(m.values().to_vec()))
        .collect())
}

/// Evaluates the composite objective on one batch and differentiates it with
/// respect to the student parameters.
#[allow(clippy::too_many_arguments)]
pub fn composite_loss_with(
    student: &Model,
    teacher_maps: &[Tensor],
    pairing: &LayerPairing,
    kind: MapKind,
    batch: &Tensor,
    labels: &[usize],
    opts: &LossOptions,
    student_maps: StudentMaps<'_>,
) -> Result<CompositeLoss> {
    if !(opts.lambda >= 0.0 && opts.lambda.is_finite()) {
        return Err(Error::config("training.lambda", "must be non-negative and finite"));
    }
    let mut tape = Tape::new();
    let params = student.bind(&mut tape)?;
    let x = tape.constant(batch.clone())?;
    let trace = student.forward_trace(&mut tape, &params, x)?;
    let ce = cross_entropy(&mut tape, trace.logits(), labels)?;
    let mut per_layer = BTreeMap::new();
    let mut used_maps = Vec::new();
    let total = if opts.lambda == 0.0 {
        ce
    } else {
        if teacher_maps.len() != pairing.k() {
            return Err(Error::LengthMismatch(teacher_maps.len(), pairing.k()));
        }
        let student_layers = pairing.student_layers();
        let maps = match student_maps {
            StudentMaps::Live { differentiable } => {
                maps_on_tape(&mut tape, student, &params, &trace, &student_layers, kind, differentiable)?
            }
            StudentMaps::Cached(cached) => {
                if cached.len() != pairing.k() {
                    return Err(Error::LengthMismatch(cached.len(), pairing.k()));
                }
                cached
                    .iter()
                    .map(|t| tape.constant(t.clone()))
                    .collect::<Result<Vec<_>>>()?
            }
        };
        let mut sum = None;
        for ((&layer, s), t) in student_layers.iter().zip(maps).zip(teacher_maps) {
            if tape.shape(s) != t.shape() {
                return Err(Error::ShapeMismatch {
                    op: "layer maps",
                    lhs: tape.shape(s).to_vec(),
                    rhs: t.shape().to_vec(),
                }
                .at_layer(layer));
            }
            used_maps.push(tape.value(s).clone());
            let t = tape.constant(t.clone())?;
            let j = jsd_on_tape(&mut tape, s, t, &opts.divergence)?;
            per_layer.insert(layer, tape.value(j).item()?);
            sum = Some(match sum {
                None => j,
                Some(acc) => tape.add(acc, j)?,
            });
        }
        let sum = sum.ok_or(Error::ZeroMatches)?;
        let weighted = tape.scale(sum, opts.lambda)?;
        tape.add(ce, weighted)?
    };
    let total_value = tape.value(total).item()?;
    let ce_value = tape.value(ce).item()?;
    let gradients = tape.backward(total, &params.all())?;
    Ok(CompositeLoss {
        total: total_value,
        cross_entropy: ce_value,
        per_layer,
        gradients,
        student_maps: used_maps,
    })
}

/// [`composite_loss_with`] with teacher maps extracted from `batch` and live
/// student maps.
#[allow(clippy::too_many_arguments)]
pub fn composite_loss(
    student: &Model,
    teacher: &Model,
    pairing: &LayerPairing,
    kind: MapKind,
    batch: &Tensor,
    labels: &[usize],
    opts: &LossOptions,
    differentiable: bool,
) -> Result<CompositeLoss> {
    let t = if opts.lambda == 0.0 {
        Vec::new()
    } else {
        teacher_maps(teacher, pairing, kind, batch)?
    };
    composite_loss_with(student, &t, pairing, kind, batch, labels, opts, StudentMaps::Live { differentiable })
}

/// Hyperparameters of a distillation run beyond the scheduler.
#[derive(Clone, Debug, PartialEq)]
pub struct DistillOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub lambda: f64,
    /// Seeds the per-epoch shuffles and the probe batch.
    pub seed: u64,
    /// `None` picks per kind: differentiable for attention and Jacobian maps,
    /// detached for Hessian maps.
    pub differentiable_maps: Option<bool>,
    /// Hessian maps are recomputed every this many batches and held constant
    /// in between. 1 recomputes every batch.
    pub hessian_refresh: usize,
    pub probe_size: usize,
    pub divergence: DivergenceConfig,
}

impl Default for DistillOptions {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 32,
            lambda: 1.0,
            seed: 0,
            differentiable_maps: None,
            hessian_refresh: 5,
            probe_size: 64,
            divergence: DivergenceConfig::default(),
        }
    }
}

impl DistillOptions {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("training.epochs", "must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("training.batch_size", "must be at least 1"));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::config("training.lambda", "must be non-negative and finite"));
        }
        if self.hessian_refresh == 0 {
            return Err(Error::config("training.hessian_refresh", "must be at least 1"));
        }
        if self.probe_size == 0 {
            return Err(Error::config("training.probe_size", "must be at least 1"));
        }
        self.divergence.validate()
    }

    pub fn differentiable_for(&self, kind: MapKind) -> bool {
        self.differentiable_maps.unwrap_or(kind != MapKind::Hessian)
    }
}

/// A student, a frozen teacher and everything needed to distill one into the
/// other.
#[derive(Clone, Debug)]
pub struct DistillationRun {
    pub student: Model,
    teacher: Model,
    pub pairing: LayerPairing,
    pub map_kind: MapKind,
    pub scheduler: SchedulerConfig,
    pub states: Vec<LayerLrState>,
    pub options: DistillOptions,
}

impl DistillationRun {
    /// Validates the configuration and pairs the crucial layers of the two
    /// models using one sample of `data`.
    pub fn new(
        student: Model,
        teacher: Model,
        map_kind: MapKind,
        scheduler: SchedulerConfig,
        options: DistillOptions,
        data: &Dataset,
    ) -> Result<Self> {
        scheduler.validate()?;
        options.validate()?;
        check_data(&student, data)?;
        check_data(&teacher, data)?;
        let (sample, _) = data.batch(&data.train[..1])?;
        let pairing = pair_crucial_layers(&student, &teacher, &sample)?;
        let states = initial_states(&pairing.student_layers(), &scheduler);
        Ok(Self {
            student,
            teacher,
            pairing,
            map_kind,
            scheduler,
            states,
            options,
        })
    }

    pub fn teacher(&self) -> &Model {
        &self.teacher
    }

    /// Seeded subset of the test split used for scheduler divergences.
    pub fn probe_indices(&self, data: &Dataset) -> Vec<usize> {
        let mut idx = data.test.clone();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(self.options.seed ^ PROBE_STREAM));
        idx.truncate(self.options.probe_size.min(data.test.len()));
        idx
    }

    /// Detached JSD per student crucial layer between student maps on
    /// `probe` and precomputed teacher maps.
    pub fn probe_jsd(&self, probe: &Tensor, teacher_probe: &[Tensor]) -> Result<BTreeMap<usize, f64>> {
        let student = model_maps(&self.student, &self.pairing.student_layers(), self.map_kind, probe)?;
        student
            .iter()
            .zip(teacher_probe)
            .map(|(s, t)| {
                jsd(s.values(), t.data(), &self.options.divergence)
                    .map(|v| (s.layer, v))
                    .map_err(|e| e.at_layer(s.layer))
            })
            .collect()
    }
}

const PROBE_STREAM: u64 = 0x9b0b_e000_0000_0001;

/// Composite objective for one batch. Hessian maps are reused from `cache`
/// when `reuse` is set and a cache exists.
#[allow(clippy::too_many_arguments)]
fn batch_loss(
    run: &DistillationRun,
    cache: &mut Option<(Vec<Tensor>, Vec<Tensor>)>,
    reuse: bool,
    x: &Tensor,
    labels: &[usize],
    opts: &LossOptions,
    differentiable: bool,
) -> Result<CompositeLoss> {
    let kind = run.map_kind;
    if opts.lambda == 0.0 {
        return composite_loss_with(&run.student, &[], &run.pairing, kind, x, labels, opts, StudentMaps::Live {
            differentiable,
        });
    }
    if let (true, Some((teacher_cached, student_cached))) = (reuse, cache.as_ref()) {
        return composite_loss_with(
            &run.student,
            teacher_cached,
            &run.pairing,
            kind,
            x,
            labels,
            opts,
            StudentMaps::Cached(student_cached),
        );
    }
    let t = teacher_maps(&run.teacher, &run.pairing, kind, x)?;
    let loss = composite_loss_with(&run.student, &t, &run.pairing, kind, x, labels, opts, StudentMaps::Live {
        differentiable,
    })?;
    if kind == MapKind::Hessian {
        *cache = Some((t, loss.student_maps.clone()));
    }
    Ok(loss)
}

fn describe_failure(states: &[LayerLrState], last_jsd: &BTreeMap<usize, f64>, what: &str) -> String {
    let alphas: Vec<String> = states.iter().map(|s| format!("{}:{}", s.layer, s.alpha)).collect();
    let jsds: Vec<String> = last_jsd.iter().map(|(l, v)| format!("{l}:{v}")).collect();
    format!("{what}; alphas [{}]; last jsd [{}]", alphas.join(", "), jsds.join(", "))
}

/// Trains the student for `run.options.epochs` epochs.
///
/// Each epoch: seeded shuffle, minibatch SGD on the composite objective with
/// the scheduler's current per-layer rates, evaluation on both splits, probe
/// divergences, then the scheduler step. In layer-wise mode the scheduler
/// receives the mean probe divergence of the epochs since its last update.
pub fn run_distillation(run: &mut DistillationRun, data: &Dataset) -> Result<Vec<EpochResult>> {
    let opts = run.options.clone();
    let teacher_checksum = run.teacher.checksum();
    let kind = run.map_kind;
    let differentiable = opts.differentiable_for(kind);
    let loss_opts = LossOptions {
        lambda: opts.lambda,
        divergence: opts.divergence,
    };
    let probe_idx = run.probe_indices(data);
    let (probe, _) = data.batch(&probe_idx)?;
    let teacher_probe = teacher_maps(&run.teacher, &run.pairing, kind, &probe)?;

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut order = data.train.clone();
    let mut window: Vec<BTreeMap<usize, f64>> = Vec::new();
    let mut last_jsd = BTreeMap::new();
    let mut cache: Option<(Vec<Tensor>, Vec<Tensor>)> = None;
    let mut batch_counter = 0usize;
    let mut results = Vec::with_capacity(opts.epochs);

    for epoch in 1..=opts.epochs {
        let table = lr_table(&run.states, epoch, &run.scheduler);
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(opts.batch_size) {
            let (x, labels) = data.batch(chunk)?;
            let reuse = kind == MapKind::Hessian && !batch_counter.is_multiple_of(opts.hessian_refresh);
            batch_counter += 1;
            let loss = batch_loss(run, &mut cache, reuse, &x, &labels, &loss_opts, differentiable)
                .map_err(step_error(epoch, |e| describe_failure(&run.states, &last_jsd, &e.to_string())))?;
            if !loss.total.is_finite() || loss.gradients.iter().any(|g| !g.is_finite()) {
                return Err(diverged(
                    epoch,
                    describe_failure(&run.states, &last_jsd, &format!("loss {}", loss.total)),
                ));
            }
            loss_sum += loss.total * chunk.len() as f64;
            if !apply_sgd(&mut run.student, &loss.gradients, &table)? {
                return Err(diverged(
                    epoch,
                    describe_failure(&run.states, &last_jsd, "parameters became non-finite"),
                ));
            }
        }
        let fail = |e: &Error| describe_failure(&run.states, &last_jsd, &e.to_string());
        let (_, train_accuracy) = evaluate(&run.student, data, &data.train).map_err(step_error(epoch, fail))?;
        let (test_loss, test_accuracy) = evaluate(&run.student, data, &data.test).map_err(step_error(epoch, fail))?;
        let epoch_jsd = run
            .probe_jsd(&probe, &teacher_probe)
            .map_err(step_error(epoch, fail))?;
        window.push(epoch_jsd.clone());
        let signal = if run.scheduler.is_update_epoch(epoch) {
            let mean = crate::scheduler::aggregate_epoch_jsd(&window)?;
            window.clear();
            mean
        } else {
            BTreeMap::new()
        };
        let (states, next_table) = scheduler_step(&run.states, epoch, &signal, &run.scheduler)?;
        run.states = states;
        last_jsd = epoch_jsd.clone();
        results.push(EpochResult {
            epoch,
            train_loss: loss_sum / order.len() as f64,
            train_accuracy,
            test_loss,
            test_accuracy,
            per_layer_jsd: epoch_jsd,
            per_layer_alpha: run
                .pairing
                .student_layers()
                .into_iter()
                .map(|l| (l, next_table.lr_for(l)))
                .collect(),
        });
    }
    if run.teacher.checksum() != teacher_checksum {
        return Err(diverged(opts.epochs, "teacher parameters changed during distillation"));
    }
    Ok(results)
}
