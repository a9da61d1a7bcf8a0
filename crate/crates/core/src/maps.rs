//! Per-layer probability maps compared between student and teacher.
//!
//! * **Attention**: batch-mean activation, squared and summed over channels,
//!   one entry per spatial position (or per feature for dense layers).
//! * **Jacobian**: for each class `c`, the squared norm of the gradient of the
//!   batch-mean logit `c` with respect to the layer's weights and bias.
//! * **Hessian**: for each class `c`, the absolute mass of the diagonal of the
//!   Hessian of the batch-mean logit `c` with respect to the layer's weights
//!   and bias.
//!
//! Raw maps are L1-normalized; an all-zero raw map becomes uniform. The
//! derivative flavors have one entry per class, so student and teacher maps
//! agree in length whatever the layers' parameter counts.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{BoundParams, ForwardTrace, LayerKind, LayerPairing, Model};
use crate::tape::{GradOptions, Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MapKind {
    Attention,
    Jacobian,
    Hessian,
}

impl MapKind {
    pub const ALL: [MapKind; 3] = [MapKind::Attention, MapKind::Jacobian, MapKind::Hessian];

    pub fn name(self) -> &'static str {
        match self {
            MapKind::Attention => "attention",
            MapKind::Jacobian => "jacobian",
            MapKind::Hessian => "hessian",
        }
    }
}

/// A normalized, non-negative map of one crucial layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerMap {
    pub layer: usize,
    pub kind: MapKind,
    values: Vec<f64>,
}

impl LayerMap {
    /// Normalizes `raw` (non-negative entries) into a map.
    pub fn from_raw(layer: usize, kind: MapKind, raw: &[f64]) -> Result<LayerMap> {
        if raw.is_empty() {
            return Err(Error::Empty("layer map"));
        }
        if raw.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "layer map" });
        }
        if raw.iter().any(|&v| v < 0.0) {
            return Err(Error::InvalidDistribution("raw map has negative entries".into()));
        }
        let total: f64 = raw.iter().sum();
        let values = if total > 0.0 {
            raw.iter().map(|v| v / total).collect()
        } else {
            vec![1.0 / raw.len() as f64; raw.len()]
        };
        Ok(LayerMap { layer, kind, values })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// L1-normalizes a non-negative vector on the tape; all-zero input becomes a
/// uniform constant.
fn normalize(tape: &mut Tape, raw: Var) -> Result<Var> {
    let total = tape.value(raw).sum();
    if total > 0.0 {
        let s = tape.sum(raw)?;
        tape.div(raw, s)
    } else {
        let n = tape.value(raw).numel();
        tape.constant(Tensor::filled(&[n], 1.0 / n as f64))
    }
}

/// Attention map of a single (unbatched) activation on the tape.
fn attention_on_tape(tape: &mut Tape, activation: Var) -> Result<Var> {
    let shape = tape.shape(activation).to_vec();
    let sq = tape.square(activation)?;
    let raw = match shape.len() {
        1 => sq,
        3 => {
            let s = tape.sum_axis(sq, 0)?;
            tape.reshape(s, &[shape[1] * shape[2]])?
        }
        _ => {
            return Err(Error::InvalidShape {
                op: "attention_map",
                shape,
                reason: "expected C×H×W or F".into(),
            })
        }
    };
    normalize(tape, raw)
}

/// Attention map of one activation (C×H×W or F, batch already reduced).
pub fn attention_map(activation: &Tensor, layer: usize) -> Result<LayerMap> {
    let mut tape = Tape::new();
    let a = tape.constant(activation.clone())?;
    let m = attention_on_tape(&mut tape, a)?;
    Ok(LayerMap {
        layer,
        kind: MapKind::Attention,
        values: tape.value(m).data().to_vec(),
    })
}

/// Batch-mean logit of class `c` as a scalar var.
fn mean_logit(tape: &mut Tape, logits: Var, c: usize) -> Result<Var> {
    let shape = tape.shape(logits).to_vec();
    let mut onehot = Tensor::zeros(&shape);
    for b in 0..shape[0] {
        onehot.data_mut()[b * shape[1] + c] = 1.0;
    }
    let mask = tape.constant(onehot)?;
    let picked = tape.mul(logits, mask)?;
    let s = tape.sum(picked)?;
    tape.scale(s, 1.0 / shape[0] as f64)
}

/// Stacks scalar vars into a vector var.
fn stack_scalars(tape: &mut Tape, entries: &[Var]) -> Result<Var> {
    let n = entries.len();
    let mut acc: Option<Var> = None;
    for (i, &e) in entries.iter().enumerate() {
        let mut basis = Tensor::zeros(&[n]);
        basis.data_mut()[i] = 1.0;
        let basis = tape.constant(basis)?;
        let term = tape.mul(e, basis)?;
        acc = Some(match acc {
            Some(a) => tape.add(a, term)?,
            None => term,
        });
    }
    acc.ok_or(Error::Empty("map entries"))
}

fn layer_param_vars(params: &BoundParams, layer: usize) -> Result<(Var, Var)> {
    params.layer(layer).ok_or(Error::NotCrucial(layer))
}

/// Raw Jacobian maps (one entry per class) for each of `layers`, sharing one
/// backward pass per class across layers.
fn jacobian_raw(
    tape: &mut Tape,
    params: &BoundParams,
    logits: Var,
    layers: &[usize],
    differentiable: bool,
) -> Result<Vec<Var>> {
    let classes = tape.shape(logits)[1];
    let wrt: Vec<Var> = layers
        .iter()
        .map(|&l| layer_param_vars(params, l).map(|(w, b)| [w, b]))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .collect();
    let mut per_layer: Vec<Vec<Var>> = vec![Vec::with_capacity(classes); layers.len()];
    let mut per_layer_values: Vec<Vec<f64>> = vec![Vec::with_capacity(classes); layers.len()];
    for c in 0..classes {
        let mark = tape.len();
        let target = mean_logit(tape, logits, c)?;
        let opts = if differentiable {
            GradOptions::higher_order()
        } else {
            GradOptions::retained()
        };
        let grads = tape.grad(target, &wrt, opts)?;
        for (j, pair) in grads.chunks(2).enumerate() {
            if differentiable {
                let mut norm = None;
                for &g in pair {
                    let sq = tape.square(g)?;
                    let s = tape.sum(sq)?;
                    norm = Some(match norm {
                        Some(n) => tape.add(n, s)?,
                        None => s,
                    });
                }
                per_layer[j].push(norm.expect("weight and bias"));
            } else {
                let v: f64 = pair.iter().map(|&g| tape.value(g).data().iter().map(|x| x * x).sum::<f64>()).sum();
                per_layer_values[j].push(v);
            }
        }
        if !differentiable {
            tape.truncate(mark);
        }
    }
    if differentiable {
        per_layer.iter().map(|entries| stack_scalars(tape, entries)).collect()
    } else {
        per_layer_values
            .into_iter()
            .map(|v| tape.constant(Tensor::from_vec(v)))
            .collect()
    }
}

/// Per-sample Hessian diagonal of `target` with respect to the pre-activation
/// `z` (batch × units), one backward pass per unit. Samples never interact in
/// these networks, so seeding all samples at once isolates each sample's
/// diagonal entry.
fn preactivation_hessian_diag(tape: &mut Tape, target: Var, z: Var, differentiable: bool) -> Result<Option<Var>> {
    let shape = tape.shape(z).to_vec();
    let (batch, units) = (shape[0], shape[1]);
    let g = tape.grad(target, &[z], GradOptions::higher_order())?[0];
    if !tape.requires_grad(g) {
        return Ok(None);
    }
    let mut columns: Vec<Var> = Vec::with_capacity(units);
    let mut values = vec![0.0; batch * units];
    for p in 0..units {
        let mark = tape.len();
        let mut mask = Tensor::zeros(&shape);
        for b in 0..batch {
            mask.data_mut()[b * units + p] = 1.0;
        }
        let mask_var = tape.constant(mask.clone())?;
        let picked = tape.mul(g, mask_var)?;
        let s = tape.sum(picked)?;
        let opts = if differentiable {
            GradOptions::higher_order()
        } else {
            GradOptions::retained()
        };
        let h = tape.grad(s, &[z], opts)?[0];
        if differentiable {
            let mask_var = tape.constant(mask)?;
            columns.push(tape.mul(h, mask_var)?);
        } else {
            let hv = tape.value(h).data();
            for b in 0..batch {
                values[b * units + p] = hv[b * units + p];
            }
            tape.truncate(mark);
        }
    }
    if differentiable {
        let mut acc = columns[0];
        for &c in &columns[1..] {
            acc = tape.add(acc, c)?;
        }
        Ok(Some(acc))
    } else {
        Ok(Some(tape.constant(Tensor::new(shape, values)?)?))
    }
}

/// Absolute Hessian-diagonal mass of `target` over a dense layer's weight and
/// bias, built from the pre-activation diagonal:
/// `d2/dW_pq2 = sum_b a_bq^2 h_bp` and `d2/db_p2 = sum_b h_bp`.
fn dense_hessian_mass(tape: &mut Tape, target: Var, input: Var, z: Var, differentiable: bool) -> Result<Var> {
    let Some(h) = preactivation_hessian_diag(tape, target, z, differentiable)? else {
        return tape.constant(Tensor::scalar(0.0));
    };
    let a2 = tape.square(input)?;
    let ht = tape.transpose(h)?;
    let diag_w = tape.matmul(ht, a2)?;
    let diag_b = tape.sum_axis(h, 0)?;
    let abs_w = tape.abs(diag_w)?;
    let abs_b = tape.abs(diag_b)?;
    let mw = tape.sum(abs_w)?;
    let mb = tape.sum(abs_b)?;
    tape.add(mw, mb)
}

/// Raw Hessian maps for each of `layers`.
fn hessian_raw(
    tape: &mut Tape,
    model: &Model,
    params: &BoundParams,
    trace: &ForwardTrace,
    layers: &[usize],
    differentiable: bool,
) -> Result<Vec<Var>> {
    let logits = trace.logits();
    let classes = tape.shape(logits)[1];
    let mut out = Vec::with_capacity(layers.len());
    for &layer in layers {
        let dense = matches!(model.spec().layers[layer], LayerKind::Dense { .. } | LayerKind::Classifier { .. });
        if !dense && differentiable {
            return Err(Error::UnsupportedSecondOrder("conv2d").at_layer(layer));
        }
        let mut entries = Vec::with_capacity(classes);
        let mut values = Vec::with_capacity(classes);
        for c in 0..classes {
            let mark = tape.len();
            let target = mean_logit(tape, logits, c)?;
            if dense {
                let mass = dense_hessian_mass(
                    tape,
                    target,
                    trace.inputs[layer],
                    trace.pre_activations[layer],
                    differentiable,
                )?;
                if differentiable {
                    entries.push(mass);
                } else {
                    values.push(tape.value(mass).item()?);
                    tape.truncate(mark);
                }
            } else {
                let (w, b) = layer_param_vars(params, layer)?;
                let diags = tape.hessian_diag(target, &[w, b])?;
                values.push(diags.iter().flat_map(|d| d.data()).map(|v| v.abs()).sum());
                tape.truncate(mark);
            }
        }
        out.push(if differentiable {
            stack_scalars(tape, &entries)?
        } else {
            tape.constant(Tensor::from_vec(values))?
        });
    }
    Ok(out)
}

/// Normalized maps of `layers` on the tape, from an existing forward pass.
///
/// With `differentiable` the maps stay connected to the model parameters
/// (derivative flavors then record their backward passes); otherwise they
/// are constants.
pub fn maps_on_tape(
    tape: &mut Tape,
    model: &Model,
    params: &BoundParams,
    trace: &ForwardTrace,
    layers: &[usize],
    kind: MapKind,
    differentiable: bool,
) -> Result<Vec<Var>> {
    if let Some(&bad) = layers.iter().find(|l| !model.crucial_indices().contains(l)) {
        return Err(Error::NotCrucial(bad));
    }
    let raws = match kind {
        MapKind::Attention => layers
            .iter()
            .map(|&l| {
                let act = trace.outputs[l];
                let act = if differentiable {
                    act
                } else {
                    let v = tape.value(act).clone();
                    tape.constant(v)?
                };
                let mean = tape.mean_axis(act, 0)?;
                attention_on_tape(tape, mean).map_err(|e| e.at_layer(l))
            })
            .collect::<Result<Vec<_>>>()?,
        MapKind::Jacobian => {
            let raws = jacobian_raw(tape, params, trace.logits(), layers, differentiable)?;
            raws.into_iter().map(|r| normalize(tape, r)).collect::<Result<Vec<_>>>()?
        }
        MapKind::Hessian => {
            let raws = hessian_raw(tape, model, params, trace, layers, differentiable)?;
            raws.into_iter().map(|r| normalize(tape, r)).collect::<Result<Vec<_>>>()?
        }
    };
    Ok(raws)
}

/// Value-level maps of several crucial layers of `model` on `batch`.
pub fn model_maps(model: &Model, layers: &[usize], kind: MapKind, batch: &Tensor) -> Result<Vec<LayerMap>> {
    let mut tape = Tape::new();
    let params = model.bind(&mut tape)?;
    let x = tape.constant(batch.clone())?;
    let trace = model.forward_trace(&mut tape, &params, x)?;
    let maps = maps_on_tape(&mut tape, model, &params, &trace, layers, kind, false)?;
    Ok(layers
        .iter()
        .zip(maps)
        .map(|(&layer, m)| LayerMap {
            layer,
            kind,
            values: tape.value(m).data().to_vec(),
        })
        .collect())
}

pub fn jacobian_map(model: &Model, layer: usize, batch: &Tensor) -> Result<LayerMap> {
    model_maps(model, &[layer], MapKind::Jacobian, batch).map(|mut v| v.remove(0))
}

pub fn hessian_map(model: &Model, layer: usize, batch: &Tensor) -> Result<LayerMap> {
    model_maps(model, &[layer], MapKind::Hessian, batch).map(|mut v| v.remove(0))
}

/// (student map, teacher map) for every pair, in pairing order.
pub fn extract_pair_maps(
    student: &Model,
    teacher: &Model,
    pairing: &LayerPairing,
    kind: MapKind,
    batch: &Tensor,
) -> Result<Vec<(LayerMap, LayerMap)>> {
    let s = model_maps(student, &pairing.student_layers(), kind, batch)?;
    let t = model_maps(teacher, &pairing.teacher_layers(), kind, batch)?;
    for (a, b) in s.iter().zip(&t) {
        if a.len() != b.len() {
            return Err(Error::LengthMismatch(a.len(), b.len()).at_layer(a.layer));
        }
    }
    Ok(s.into_iter().zip(t).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{LayerKind, ModelSpec};

    #[test]
    fn attention_examples() {
        let act = Tensor::new(vec![2, 1, 2], vec![1.0, 2.0, 2.0, 1.0]).unwrap();
        assert_eq!(attention_map(&act, 0).unwrap().values(), &[0.5, 0.5]);
        let act = Tensor::new(vec![1, 1, 2], vec![3.0, 4.0]).unwrap();
        let m = attention_map(&act, 0).unwrap();
        assert!((m.values()[0] - 0.36).abs() < 1e-15);
        assert!((m.values()[1] - 0.64).abs() < 1e-15);
        let zero = attention_map(&Tensor::zeros(&[3, 2, 2]), 0).unwrap();
        assert_eq!(zero.values(), &[0.25; 4]);
        let dense = attention_map(&Tensor::from_vec(vec![1.0, -1.0, 2.0]), 0).unwrap();
        assert_eq!(dense.values(), &[1.0 / 6.0, 1.0 / 6.0, 4.0 / 6.0]);
    }

    #[test]
    fn attention_rejects_nan() {
        let act = Tensor::from_vec(vec![1.0, f64::NAN]);
        assert!(matches!(attention_map(&act, 0), Err(Error::NonFinite { .. })));
    }

    /// A 2 -> 3 linear layer (crucial) followed by a 2-class linear head,
    /// arranged so the logits equal the first two inputs: y = I x.
    fn identity_linear_model() -> Model {
        let spec = ModelSpec {
            input_shape: vec![2],
            layers: vec!["dense 3 linear".parse().unwrap(), LayerKind::Classifier { classes: 2 }],
            seed: 0,
        };
        let mut m = Model::build(spec).unwrap();
        m.layer_params_mut(0).unwrap().weight = Tensor::new(vec![3, 2], vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0]).unwrap();
        m.layer_params_mut(1).unwrap().weight = Tensor::new(vec![2, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0]).unwrap();
        m
    }

    #[test]
    fn jacobian_of_identity_linear_model() {
        let m = identity_linear_model();
        for x in [[1.0, 0.0], [2.0, 0.0]] {
            let batch = Tensor::new(vec![1, 2], x.to_vec()).unwrap();
            let map = jacobian_map(&m, 0, &batch).unwrap();
            assert_eq!(map.values(), &[0.5, 0.5]);
        }
    }

    #[test]
    fn hessian_of_linear_model_is_uniform() {
        let m = identity_linear_model();
        let batch = Tensor::new(vec![2, 2], vec![1.0, -3.0, 0.5, 2.0]).unwrap();
        assert_eq!(hessian_map(&m, 0, &batch).unwrap().values(), &[0.5, 0.5]);
    }

    #[test]
    fn non_crucial_layer_rejected() {
        let m = identity_linear_model();
        let batch = Tensor::zeros(&[1, 2]);
        assert!(matches!(jacobian_map(&m, 1, &batch), Err(Error::NotCrucial(1))));
    }

    #[test]
    fn raw_maps_normalize() {
        let m = LayerMap::from_raw(0, MapKind::Hessian, &[1.0, 3.0]).unwrap();
        assert_eq!(m.values(), &[0.25, 0.75]);
        assert_eq!(LayerMap::from_raw(0, MapKind::Hessian, &[0.0, 0.0]).unwrap().values(), &[0.5, 0.5]);
        assert!(LayerMap::from_raw(0, MapKind::Hessian, &[-1.0, 2.0]).is_err());
    }

    #[test]
    fn dense_hessian_path_matches_generic_diagonal() {
        let spec = ModelSpec {
            input_shape: vec![3],
            layers: vec![
                "dense 5 tanh".parse().unwrap(),
                "dense 4 tanh".parse().unwrap(),
                LayerKind::Classifier { classes: 3 },
            ],
            seed: 11,
        };
        let m = Model::build(spec).unwrap();
        let batch = Tensor::new(vec![4, 3], (0..12).map(|i| ((i * 7 % 11) as f64 - 5.0) / 4.0).collect()).unwrap();
        for layer in [0, 1] {
            let fast = hessian_map(&m, layer, &batch).unwrap();
            let mut raw = Vec::new();
            for c in 0..3 {
                let mut tape = Tape::new();
                let params = m.bind(&mut tape).unwrap();
                let x = tape.constant(batch.clone()).unwrap();
                let trace = m.forward_trace(&mut tape, &params, x).unwrap();
                let target = mean_logit(&mut tape, trace.logits(), c).unwrap();
                let (w, b) = params.layer(layer).unwrap();
                let diags = tape.hessian_diag(target, &[w, b]).unwrap();
                raw.push(diags.iter().flat_map(|d| d.data()).map(|v| v.abs()).sum::<f64>());
            }
            let slow = LayerMap::from_raw(layer, MapKind::Hessian, &raw).unwrap();
            for (a, b) in fast.values().iter().zip(slow.values()) {
                assert!((a - b).abs() < 1e-12, "{a} vs {b}");
            }
        }
    }
}
