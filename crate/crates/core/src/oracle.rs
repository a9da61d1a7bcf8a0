//! Brute-force reference computations used to check the engine: central
//! finite differences over plain closures and a left-to-right replay of the
//! learning-rate recurrence. Nothing here touches the tape.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::scheduler::{LayerLrState, SchedulerConfig};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FdConfig {
    /// Base step; the step used at coordinate k is `step * max(1, |theta_k|)`.
    pub step: f64,
}

impl Default for FdConfig {
    fn default() -> Self {
        Self { step: 1e-4 }
    }
}

impl FdConfig {
    fn validate(&self) -> Result<()> {
        if !(self.step > 0.0 && self.step.is_finite()) {
            return Err(Error::config("step", format!("must be positive, got {}", self.step)));
        }
        Ok(())
    }

    fn step_at(&self, theta: f64) -> f64 {
        self.step * theta.abs().max(1.0)
    }
}

fn probe(f: &mut impl FnMut(&[f64]) -> f64, theta: &[f64]) -> Result<f64> {
    let v = f(theta);
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite { op: "finite-difference probe" })
    }
}

/// Central-difference gradient of `f` at `theta`.
pub fn fd_gradient(mut f: impl FnMut(&[f64]) -> f64, theta: &[f64], cfg: FdConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    let mut point = theta.to_vec();
    let mut grad = Vec::with_capacity(theta.len());
    for k in 0..theta.len() {
        let h = cfg.step_at(theta[k]);
        point[k] = theta[k] + h;
        let up = probe(&mut f, &point)?;
        point[k] = theta[k] - h;
        let down = probe(&mut f, &point)?;
        point[k] = theta[k];
        grad.push((up - down) / (2.0 * h));
    }
    Ok(grad)
}

/// Central second difference along each coordinate: the Hessian diagonal.
pub fn fd_hessian_diag(mut f: impl FnMut(&[f64]) -> f64, theta: &[f64], cfg: FdConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    let centre = probe(&mut f, theta)?;
    let mut point = theta.to_vec();
    let mut diag = Vec::with_capacity(theta.len());
    for k in 0..theta.len() {
        let h = cfg.step_at(theta[k]);
        point[k] = theta[k] + h;
        let up = probe(&mut f, &point)?;
        point[k] = theta[k] - h;
        let down = probe(&mut f, &point)?;
        point[k] = theta[k];
        diag.push((up - 2.0 * centre + down) / (h * h));
    }
    Ok(diag)
}

/// Hessian diagonal as central differences of an analytic gradient:
/// `(grad(theta + h e_k)[k] - grad(theta - h e_k)[k]) / 2h`. Tighter than
/// [`fd_hessian_diag`] when a trusted first derivative is available.
pub fn fd_of_gradient_diag(
    mut grad: impl FnMut(&[f64]) -> Result<Vec<f64>>,
    theta: &[f64],
    cfg: FdConfig,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    let mut point = theta.to_vec();
    let mut diag = Vec::with_capacity(theta.len());
    for k in 0..theta.len() {
        let h = cfg.step_at(theta[k]);
        point[k] = theta[k] + h;
        let up = grad(&point)?[k];
        point[k] = theta[k] - h;
        let down = grad(&point)?[k];
        point[k] = theta[k];
        let d = (up - down) / (2.0 * h);
        if !d.is_finite() {
            return Err(Error::NonFinite { op: "finite-difference probe" });
        }
        diag.push(d);
    }
    Ok(diag)
}

/// Iterates the momentum/learning-rate recurrence over every entry of
/// `trace` (one entry per update), in order, starting from `initial`.
///
/// Written independently of [`crate::scheduler::update_layer_lr`]: the
/// arithmetic is spelled out here so the two can be compared.
pub fn replay_scheduler(
    trace: &[BTreeMap<usize, f64>],
    initial: &[LayerLrState],
    cfg: &SchedulerConfig,
) -> Result<Vec<LayerLrState>> {
    if trace.is_empty() {
        return Err(Error::Empty("divergence trace"));
    }
    let mut states = initial.to_vec();
    for step in trace {
        for s in states.iter_mut() {
            let jsd = *step.get(&s.layer).ok_or(Error::MissingDivergence(s.layer))?;
            let eta = cfg.gamma * s.eta + (1.0 - cfg.gamma) * jsd;
            let mut alpha = s.alpha / (eta + cfg.epsilon).sqrt();
            if alpha < cfg.alpha_min {
                alpha = cfg.alpha_min;
            }
            if alpha > cfg.alpha_max {
                alpha = cfg.alpha_max;
            }
            s.eta = eta;
            s.alpha = alpha;
        }
    }
    Ok(states)
}
