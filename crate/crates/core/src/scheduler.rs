//! Learning-rate schedules for the student.
//!
//! Three modes share one interface:
//!
//! * `None` keeps every parameter group at `base_lr`.
//! * `MultiStep` multiplies every group by `multistep_factor` at each milestone.
//! * `Layerwise` gives each crucial layer its own rate `alpha_j`, updated every
//!   `update_interval_epochs` from that layer's teacher/student divergence:
//!
//!   ```text
//!   eta_j   <- gamma * eta_j + (1 - gamma) * jsd_j
//!   alpha_j <- clamp(alpha_j / sqrt(eta_j + epsilon), alpha_min, alpha_max)
//!   ```
//!
//!   Layers that are not crucial stay at `base_lr`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SchedulerMode {
    None,
    MultiStep,
    Layerwise,
}

impl SchedulerMode {
    pub const ALL: [SchedulerMode; 3] = [SchedulerMode::None, SchedulerMode::MultiStep, SchedulerMode::Layerwise];

    pub fn name(self) -> &'static str {
        match self {
            SchedulerMode::None => "none",
            SchedulerMode::MultiStep => "multistep",
            SchedulerMode::Layerwise => "layerwise",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SchedulerConfig {
    pub mode: SchedulerMode,
    pub base_lr: f64,
    pub gamma: f64,
    pub epsilon: f64,
    pub update_interval_epochs: usize,
    pub multistep_milestones: Vec<usize>,
    pub multistep_factor: f64,
    pub alpha_min: f64,
    pub alpha_max: f64,
    /// Starting momentum for every crucial layer.
    pub initial_eta: f64,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        Self {
            mode: SchedulerMode::None,
            base_lr: 0.1,
            gamma: 0.9,
            epsilon: 1e-8,
            update_interval_epochs: 25,
            multistep_milestones: vec![25, 35],
            multistep_factor: 0.01,
            alpha_min: 1e-5,
            alpha_max: 1.0,
            initial_eta: 0.0,
        }
    }
}

impl SchedulerConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |field: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::config(field, format!("must be positive and finite, got {v}")))
            }
        };
        positive("scheduler.base_lr", self.base_lr)?;
        positive("scheduler.epsilon", self.epsilon)?;
        positive("scheduler.multistep_factor", self.multistep_factor)?;
        positive("scheduler.alpha_min", self.alpha_min)?;
        positive("scheduler.alpha_max", self.alpha_max)?;
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::config("scheduler.gamma", format!("must lie in [0, 1], got {}", self.gamma)));
        }
        if self.update_interval_epochs == 0 {
            return Err(Error::config("scheduler.update_interval_epochs", "must be at least 1"));
        }
        if !(self.alpha_min < self.base_lr && self.base_lr < self.alpha_max) {
            return Err(Error::config(
                "scheduler.base_lr",
                format!(
                    "must satisfy alpha_min < base_lr < alpha_max ({} < {} < {})",
                    self.alpha_min, self.base_lr, self.alpha_max
                ),
            ));
        }
        if !(self.initial_eta >= 0.0 && self.initial_eta.is_finite()) {
            return Err(Error::config("scheduler.initial_eta", "must be non-negative"));
        }
        Ok(())
    }

    pub fn is_update_epoch(&self, epoch: usize) -> bool {
        self.mode == SchedulerMode::Layerwise && epoch.is_multiple_of(self.update_interval_epochs)
    }

    fn multistep_lr(&self, epoch: usize) -> f64 {
        let passed = self.multistep_milestones.iter().filter(|&&m| m <= epoch).count();
        self.base_lr * self.multistep_factor.powi(passed as i32)
    }
}

/// Learning-rate state of one crucial layer.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LayerLrState {
    pub layer: usize,
    pub alpha: f64,
    pub eta: f64,
}

impl LayerLrState {
    pub fn new(layer: usize, alpha: f64, eta: f64) -> Self {
        Self { layer, alpha, eta }
    }
}

/// Initial states for the given crucial layers.
pub fn initial_states(layers: &[usize], cfg: &SchedulerConfig) -> Vec<LayerLrState> {
    layers
        .iter()
        .map(|&l| LayerLrState::new(l, cfg.base_lr, cfg.initial_eta))
        .collect()
}

/// Effective learning rate per parameter group: one group per crucial layer
/// plus a shared default for every other layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LrTable {
    pub default_lr: f64,
    pub per_layer: BTreeMap<usize, f64>,
}

impl LrTable {
    pub fn lr_for(&self, layer: usize) -> f64 {
        self.per_layer.get(&layer).copied().unwrap_or(self.default_lr)
    }
}

/// One application of the momentum recurrence, followed by the clamp.
pub fn update_layer_lr(state: LayerLrState, jsd: f64, cfg: &SchedulerConfig) -> Result<LayerLrState> {
    if !jsd.is_finite() {
        return Err(Error::NonFinite { op: "update_layer_lr" });
    }
    if jsd < 0.0 {
        return Err(Error::NegativeDivergence(jsd));
    }
    let eta = cfg.gamma * state.eta + (1.0 - cfg.gamma) * jsd;
    let alpha = (state.alpha / (eta + cfg.epsilon).sqrt()).clamp(cfg.alpha_min, cfg.alpha_max);
    Ok(LayerLrState { layer: state.layer, alpha, eta })
}

/// The table in force for a given epoch's states.
pub fn lr_table(states: &[LayerLrState], epoch: usize, cfg: &SchedulerConfig) -> LrTable {
    match cfg.mode {
        SchedulerMode::None => LrTable {
            default_lr: cfg.base_lr,
            per_layer: states.iter().map(|s| (s.layer, cfg.base_lr)).collect(),
        },
        SchedulerMode::MultiStep => {
            let lr = cfg.multistep_lr(epoch);
            LrTable {
                default_lr: lr,
                per_layer: states.iter().map(|s| (s.layer, lr)).collect(),
            }
        }
        SchedulerMode::Layerwise => LrTable {
            default_lr: cfg.base_lr,
            per_layer: states.iter().map(|s| (s.layer, s.alpha)).collect(),
        },
    }
}

/// End-of-epoch scheduler step. Returns the new states and the table to use
/// for the next epoch's training.
///
/// In `Layerwise` mode the states change only when `epoch` is a multiple of
/// the update interval, and then every state must have an entry in
/// `epoch_jsd`.
pub fn scheduler_step(
    states: &[LayerLrState],
    epoch: usize,
    epoch_jsd: &BTreeMap<usize, f64>,
    cfg: &SchedulerConfig,
) -> Result<(Vec<LayerLrState>, LrTable)> {
    if epoch == 0 {
        return Err(Error::config("epoch", "epochs are numbered from 1"));
    }
    let next = if cfg.is_update_epoch(epoch) {
        states
            .iter()
            .map(|s| {
                let jsd = *epoch_jsd.get(&s.layer).ok_or(Error::MissingDivergence(s.layer))?;
                update_layer_lr(*s, jsd, cfg)
            })
            .collect::<Result<Vec<_>>>()?
    } else {
        states.to_vec()
    };
    let table = lr_table(&next, epoch, cfg);
    Ok((next, table))
}

/// Arithmetic mean per layer over a window of per-batch (or per-epoch)
/// divergence readings.
pub fn aggregate_epoch_jsd(window: &[BTreeMap<usize, f64>]) -> Result<BTreeMap<usize, f64>> {
    let first = window.first().ok_or(Error::Empty("divergence window"))?;
    let mut sums: BTreeMap<usize, f64> = first.keys().map(|&k| (k, 0.0)).collect();
    for entry in window {
        if entry.len() != sums.len() || entry.keys().any(|k| !sums.contains_key(k)) {
            return Err(Error::LengthMismatch(entry.len(), sums.len()));
        }
        for (k, v) in entry {
            *sums.get_mut(k).expect("checked above") += v;
        }
    }
    let n = window.len() as f64;
    Ok(sums.into_iter().map(|(k, s)| (k, s / n)).collect())
}
