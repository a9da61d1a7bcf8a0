//! Shannon entropy, KL and Jensen–Shannon divergences over probability
//! vectors, plus the supervised cross-entropy loss.
//!
//! The plain-slice functions are scalar diagnostics. [`jsd_on_tape`] is the
//! same divergence built from tape primitives so it can serve as a
//! differentiable layer loss.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

const SUM_TOLERANCE: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DivergenceConfig {
    pub beta1: f64,
    pub beta2: f64,
    /// Lower bound applied to probabilities inside logarithms.
    pub floor: f64,
}

impl Default for DivergenceConfig {
    fn default() -> Self {
        Self {
            beta1: 0.5,
            beta2: 0.5,
            floor: 1e-12,
        }
    }
}

impl DivergenceConfig {
    pub fn validate(&self) -> Result<()> {
        for (field, b) in [("divergence.beta1", self.beta1), ("divergence.beta2", self.beta2)] {
            if !(0.0..=1.0).contains(&b) {
                return Err(Error::config(field, format!("must lie in [0, 1], got {b}")));
            }
        }
        if (self.beta1 + self.beta2 - 1.0).abs() > 1e-12 {
            return Err(Error::config("divergence.beta1", "beta1 + beta2 must equal 1"));
        }
        if !(self.floor > 0.0 && self.floor.is_finite()) {
            return Err(Error::config("divergence.floor", "must be positive"));
        }
        Ok(())
    }
}

/// Checks that `p` is a probability vector (non-negative, sums to one).
pub fn check_distribution(p: &[f64]) -> Result<()> {
    if p.is_empty() {
        return Err(Error::InvalidDistribution("empty vector".into()));
    }
    if let Some(v) = p.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
        return Err(Error::InvalidDistribution(format!("entry {v} is negative or non-finite")));
    }
    let total: f64 = p.iter().sum();
    if (total - 1.0).abs() > SUM_TOLERANCE {
        return Err(Error::InvalidDistribution(format!("entries sum to {total}")));
    }
    Ok(())
}

fn check_pair(p: &[f64], q: &[f64]) -> Result<()> {
    if p.len() != q.len() {
        return Err(Error::LengthMismatch(p.len(), q.len()));
    }
    check_distribution(p)?;
    check_distribution(q)
}

fn kld_unchecked(p: &[f64], q: &[f64], floor: f64) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(&pi, _)| pi > 0.0)
        .map(|(&pi, &qi)| pi * (pi / qi.max(floor)).ln())
        .sum::<f64>()
        .max(0.0)
}

/// `KL(p || q)` in nats, with `q` floored at `floor`.
pub fn kld(p: &[f64], q: &[f64], floor: f64) -> Result<f64> {
    check_pair(p, q)?;
    Ok(kld_unchecked(p, q, floor))
}

/// Shannon entropy in nats, with `0 ln 0 = 0`.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&v| v > 0.0).map(|&v| v * v.ln()).sum::<f64>()
}

fn mixture(s: &[f64], t: &[f64], cfg: &DivergenceConfig) -> Vec<f64> {
    s.iter().zip(t).map(|(a, b)| cfg.beta1 * a + cfg.beta2 * b).collect()
}

/// Jensen–Shannon divergence as weighted KL divergences to the mixture.
pub fn jsd(s: &[f64], t: &[f64], cfg: &DivergenceConfig) -> Result<f64> {
    check_pair(s, t)?;
    let m = mixture(s, t, cfg);
    Ok(cfg.beta1 * kld_unchecked(s, &m, cfg.floor) + cfg.beta2 * kld_unchecked(t, &m, cfg.floor))
}

/// Jensen–Shannon divergence through entropies: `H(m) - b1 H(s) - b2 H(t)`.
pub fn jsd_entropy_form(s: &[f64], t: &[f64], cfg: &DivergenceConfig) -> Result<f64> {
    check_pair(s, t)?;
    let m = mixture(s, t, cfg);
    Ok(entropy(&m) - cfg.beta1 * entropy(s) - cfg.beta2 * entropy(t))
}

/// Differentiable JSD between two probability vectors recorded on `tape`.
///
/// Both inputs must already be normalized. Logarithms see
/// `max(x, floor)`, so exact zeros contribute nothing.
pub fn jsd_on_tape(tape: &mut Tape, s: Var, t: Var, cfg: &DivergenceConfig) -> Result<Var> {
    let bs = tape.scale(s, cfg.beta1)?;
    let bt = tape.scale(t, cfg.beta2)?;
    let m = tape.add(bs, bt)?;
    let mf = tape.clamp_min(m, cfg.floor)?;
    let log_m = tape.log(mf)?;
    let mut terms = Vec::with_capacity(2);
    for (p, beta) in [(s, cfg.beta1), (t, cfg.beta2)] {
        let pf = tape.clamp_min(p, cfg.floor)?;
        let log_p = tape.log(pf)?;
        let diff = tape.sub(log_p, log_m)?;
        let prod = tape.mul(p, diff)?;
        let kl = tape.sum(prod)?;
        terms.push(tape.scale(kl, beta)?);
    }
    tape.add(terms[0], terms[1])
}

/// Mean negative log-likelihood of `labels` under `softmax(logits)`;
/// `logits` is batch × classes.
pub fn cross_entropy(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    let shape = tape.shape(logits).to_vec();
    if shape.len() != 2 {
        return Err(Error::InvalidShape {
            op: "cross_entropy",
            shape,
            reason: "logits must be batch x classes".into(),
        });
    }
    let (batch, classes) = (shape[0], shape[1]);
    if labels.len() != batch {
        return Err(Error::LengthMismatch(labels.len(), batch));
    }
    let mut onehot = Tensor::zeros(&[batch, classes]);
    for (row, &label) in labels.iter().enumerate() {
        if label >= classes {
            return Err(Error::LabelOutOfRange { label, classes });
        }
        onehot.data_mut()[row * classes + label] = 1.0;
    }
    let logp = tape.log_softmax(logits)?;
    let onehot = tape.constant(onehot)?;
    let picked = tape.mul(logp, onehot)?;
    let total = tape.sum(picked)?;
    tape.scale(total, -1.0 / batch as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::LN_2;

    const FLOOR: f64 = 1e-12;

    #[test]
    #[allow(clippy::approx_constant)]
    fn kld_examples() {
        let p = [0.2, 0.3, 0.5];
        assert_eq!(kld(&p, &p, FLOOR).unwrap(), 0.0);
        assert!((kld(&[1.0, 0.0], &[0.5, 0.5], FLOOR).unwrap() - 0.693147).abs() < 1e-6);
        assert!((kld(&[0.75, 0.25], &[0.5, 0.5], FLOOR).unwrap() - 0.130812).abs() < 1e-6);
    }

    #[test]
    fn kld_rejects_length_mismatch() {
        assert!(matches!(kld(&[1.0], &[0.5, 0.5], FLOOR), Err(Error::LengthMismatch(1, 2))));
    }

    #[test]
    fn kld_is_not_symmetric() {
        let p = [0.9, 0.1];
        let q = [0.5, 0.5];
        let a = kld(&p, &q, FLOOR).unwrap();
        let b = kld(&q, &p, FLOOR).unwrap();
        assert!((a - b).abs() > 1e-3, "{a} vs {b}");
    }

    #[test]
    fn jsd_examples() {
        let cfg = DivergenceConfig::default();
        let p = [0.1, 0.6, 0.3];
        assert_eq!(jsd(&p, &p, &cfg).unwrap(), 0.0);
        assert!((jsd(&[1.0, 0.0], &[0.0, 1.0], &cfg).unwrap() - LN_2).abs() < 1e-12);
        assert!((jsd(&[0.75, 0.25], &[0.25, 0.75], &cfg).unwrap() - 0.130812).abs() < 1e-6);
    }

    #[test]
    fn rejects_non_distributions() {
        let cfg = DivergenceConfig::default();
        assert!(jsd(&[0.5, 0.6], &[0.5, 0.5], &cfg).is_err());
        assert!(jsd(&[1.5, -0.5], &[0.5, 0.5], &cfg).is_err());
    }

    #[test]
    fn tape_jsd_matches_scalar_jsd() {
        let cfg = DivergenceConfig::default();
        let s = [0.1, 0.0, 0.9];
        let t = [0.3, 0.3, 0.4];
        let mut tape = Tape::new();
        let sv = tape.param(Tensor::from_vec(s.to_vec())).unwrap();
        let tv = tape.constant(Tensor::from_vec(t.to_vec())).unwrap();
        let j = jsd_on_tape(&mut tape, sv, tv, &cfg).unwrap();
        let expected = jsd(&s, &t, &cfg).unwrap();
        assert!((tape.value(j).item().unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_examples() {
        let mut tape = Tape::new();
        let logits = tape.param(Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap()).unwrap();
        let ce = cross_entropy(&mut tape, logits, &[0]).unwrap();
        assert!((tape.value(ce).item().unwrap() - LN_2).abs() < 1e-12);

        let logits = tape.param(Tensor::new(vec![1, 2], vec![1000.0, 0.0]).unwrap()).unwrap();
        let ce = cross_entropy(&mut tape, logits, &[0]).unwrap();
        assert!(tape.value(ce).item().unwrap().abs() < 1e-12);

        assert!(matches!(
            cross_entropy(&mut tape, logits, &[2]),
            Err(Error::LabelOutOfRange { label: 2, classes: 2 })
        ));
    }

    #[test]
    fn config_validation() {
        assert!(DivergenceConfig::default().validate().is_ok());
        let skew = DivergenceConfig { beta1: 0.7, beta2: 0.4, ..Default::default() };
        assert!(skew.validate().is_err());
        let floor = DivergenceConfig { floor: 0.0, ..Default::default() };
        assert!(floor.validate().is_err());
    }
}
