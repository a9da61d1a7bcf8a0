//! Plain layer-stack networks, crucial-layer detection and student/teacher
//! layer pairing.
//!
//! A *crucial* layer is a dense or convolutional layer whose output
//! channel/feature count differs from its input count. The classifier head is
//! never crucial: it is the output the derivative maps are taken of.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::{ConvGeometry, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Activation {
    Identity,
    Relu,
    Tanh,
}

impl Activation {
    fn name(self) -> &'static str {
        match self {
            Activation::Identity => "linear",
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "linear" | "identity" => Some(Activation::Identity),
            "relu" => Some(Activation::Relu),
            "tanh" => Some(Activation::Tanh),
            _ => None,
        }
    }

    fn apply(self, tape: &mut Tape, x: Var) -> Result<Var> {
        match self {
            Activation::Identity => Ok(x),
            Activation::Relu => tape.relu(x),
            Activation::Tanh => tape.tanh(x),
        }
    }
}

/// One layer of a stack. The textual form is used in config files:
///
/// | kind | text |
/// |---|---|
/// | dense | `dense <out> <activation>` |
/// | convolution | `conv <out> k<kernel> s<stride> p<padding> <activation>` |
/// | average pool | `avgpool <window>` |
/// | flatten | `flatten` |
/// | classifier head | `classifier <classes>` |
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum LayerKind {
    Dense {
        out: usize,
        activation: Activation,
    },
    Conv {
        out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        activation: Activation,
    },
    AvgPool {
        window: usize,
    },
    Flatten,
    Classifier {
        classes: usize,
    },
}

impl fmt::Display for LayerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LayerKind::Dense { out, activation } => write!(f, "dense {out} {}", activation.name()),
            LayerKind::Conv {
                out,
                kernel,
                stride,
                padding,
                activation,
            } => write!(f, "conv {out} k{kernel} s{stride} p{padding} {}", activation.name()),
            LayerKind::AvgPool { window } => write!(f, "avgpool {window}"),
            LayerKind::Flatten => write!(f, "flatten"),
            LayerKind::Classifier { classes } => write!(f, "classifier {classes}"),
        }
    }
}

impl FromStr for LayerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = |why: &str| Error::config("layers", format!("`{s}`: {why}"));
        let words: Vec<&str> = s.split_whitespace().collect();
        let count = |w: Option<&&str>| -> Result<usize> {
            let w = w.ok_or_else(|| bad("missing size"))?;
            match w.parse::<usize>() {
                Ok(n) if n > 0 => Ok(n),
                _ => Err(bad("sizes must be positive integers")),
            }
        };
        let tagged = |w: &str, tag: char| -> Result<usize> {
            w.strip_prefix(tag)
                .and_then(|n| n.parse().ok())
                .ok_or_else(|| bad(&format!("expected {tag}<n>, got `{w}`")))
        };
        let activation = |w: Option<&&str>| -> Result<Activation> {
            match w {
                None => Ok(Activation::Identity),
                Some(a) => Activation::parse(a).ok_or_else(|| bad("unknown activation")),
            }
        };
        let kind = match words.first().copied() {
            Some("dense") if words.len() <= 3 => LayerKind::Dense {
                out: count(words.get(1))?,
                activation: activation(words.get(2))?,
            },
            Some("conv") if (5..=6).contains(&words.len()) => {
                let kernel = tagged(words[2], 'k')?;
                let stride = tagged(words[3], 's')?;
                if kernel == 0 || stride == 0 {
                    return Err(bad("kernel and stride must be positive"));
                }
                LayerKind::Conv {
                    out: count(words.get(1))?,
                    kernel,
                    stride,
                    padding: tagged(words[4], 'p')?,
                    activation: activation(words.get(5))?,
                }
            }
            Some("avgpool") if words.len() == 2 => LayerKind::AvgPool {
                window: count(words.get(1))?,
            },
            Some("flatten") if words.len() == 1 => LayerKind::Flatten,
            Some("classifier") if words.len() == 2 => LayerKind::Classifier {
                classes: count(words.get(1))?,
            },
            _ => return Err(bad("unrecognized layer")),
        };
        Ok(kind)
    }
}

impl TryFrom<String> for LayerKind {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<LayerKind> for String {
    fn from(k: LayerKind) -> String {
        k.to_string()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    /// Shape of one sample, without the batch axis.
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerKind>,
    #[serde(default)]
    pub seed: u64,
}

/// Weights and bias of a parametric layer. Dense weights are `out × in`,
/// convolution weights `out × in × k × k`.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    spec: ModelSpec,
    params: Vec<Option<LayerParams>>,
    /// Per-sample output shape of every layer.
    output_shapes: Vec<Vec<usize>>,
    crucial: Vec<usize>,
}

/// Per-sample output shape of each layer, or the first incompatibility.
fn infer_shapes(spec: &ModelSpec) -> Result<Vec<Vec<usize>>> {
    if spec.input_shape.is_empty() || spec.input_shape.contains(&0) {
        return Err(Error::config("input_shape", "must be non-empty with positive sizes"));
    }
    if spec.layers.is_empty() {
        return Err(Error::config("layers", "model has no layers"));
    }
    let mut shapes: Vec<Vec<usize>> = Vec::with_capacity(spec.layers.len());
    for (i, layer) in spec.layers.iter().enumerate() {
        let input = shapes.last().unwrap_or(&spec.input_shape).clone();
        let incompatible = |reason: String| {
            if i == 0 {
                Error::config("input_shape", format!("layer 0 (`{layer}`): {reason}"))
            } else {
                Error::IncompatibleLayers {
                    first: i - 1,
                    second: i,
                    reason,
                }
            }
        };
        if matches!(layer, LayerKind::Classifier { .. }) && i + 1 != spec.layers.len() {
            return Err(Error::IncompatibleLayers {
                first: i,
                second: i + 1,
                reason: "the classifier head must be the last layer".into(),
            });
        }
        let out = match *layer {
            LayerKind::Dense { out, .. } | LayerKind::Classifier { classes: out } => {
                if input.len() != 1 {
                    return Err(incompatible(format!("dense layer needs a flat input, got {input:?}")));
                }
                vec![out]
            }
            LayerKind::Conv {
                out,
                kernel,
                stride,
                padding,
                ..
            } => {
                if input.len() != 3 {
                    return Err(incompatible(format!("conv layer needs a C×H×W input, got {input:?}")));
                }
                let geo = ConvGeometry { stride, padding };
                match (geo.output_len(input[1], kernel), geo.output_len(input[2], kernel)) {
                    (Some(h), Some(w)) => vec![out, h, w],
                    _ => return Err(incompatible(format!("kernel {kernel} larger than padded input {input:?}"))),
                }
            }
            LayerKind::AvgPool { window } => {
                if input.len() != 3 || !input[1].is_multiple_of(window) || !input[2].is_multiple_of(window) {
                    return Err(incompatible(format!("pool window {window} does not tile {input:?}")));
                }
                vec![input[0], input[1] / window, input[2] / window]
            }
            LayerKind::Flatten => vec![input.iter().product()],
        };
        shapes.push(out);
    }
    Ok(shapes)
}

fn he_uniform(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = (6.0 / fan_in as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape and data agree")
}

/// Differentiable handles to a model's parameters on one tape.
#[derive(Clone, Debug)]
pub struct BoundParams {
    layers: Vec<Option<(Var, Var)>>,
}

impl BoundParams {
    /// Weight and bias vars of `layer`, if it has parameters.
    pub fn layer(&self, layer: usize) -> Option<(Var, Var)> {
        self.layers.get(layer).copied().flatten()
    }

    /// All parameter vars in declaration order.
    pub fn all(&self) -> Vec<Var> {
        self.layers.iter().flatten().flat_map(|&(w, b)| [w, b]).collect()
    }
}

/// Every intermediate of a forward pass.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    /// Input to each layer.
    pub inputs: Vec<Var>,
    /// Output before the activation (equal to `outputs` for layers without one).
    pub pre_activations: Vec<Var>,
    /// Post-activation output of each layer.
    pub outputs: Vec<Var>,
}

impl ForwardTrace {
    pub fn logits(&self) -> Var {
        *self.outputs.last().expect("models have at least one layer")
    }
}

impl Model {
    /// Instantiates `spec` with He-uniform weights and zero biases, drawn
    /// deterministically from `spec.seed`.
    pub fn build(spec: ModelSpec) -> Result<Model> {
        let output_shapes = infer_shapes(&spec)?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let mut params = Vec::with_capacity(spec.layers.len());
        let mut crucial = Vec::new();
        for (i, layer) in spec.layers.iter().enumerate() {
            let input = if i == 0 { &spec.input_shape } else { &output_shapes[i - 1] };
            let p = match *layer {
                LayerKind::Dense { out, .. } | LayerKind::Classifier { classes: out } => {
                    if matches!(layer, LayerKind::Dense { .. }) && out != input[0] {
                        crucial.push(i);
                    }
                    Some(LayerParams {
                        weight: he_uniform(&mut rng, &[out, input[0]], input[0]),
                        bias: Tensor::zeros(&[out]),
                    })
                }
                LayerKind::Conv { out, kernel, .. } => {
                    if out != input[0] {
                        crucial.push(i);
                    }
                    let fan_in = input[0] * kernel * kernel;
                    Some(LayerParams {
                        weight: he_uniform(&mut rng, &[out, input[0], kernel, kernel], fan_in),
                        bias: Tensor::zeros(&[out]),
                    })
                }
                LayerKind::AvgPool { .. } | LayerKind::Flatten => None,
            };
            params.push(p);
        }
        if crucial.is_empty() {
            return Err(Error::NoCrucialLayers);
        }
        Ok(Model {
            spec,
            params,
            output_shapes,
            crucial,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn crucial_indices(&self) -> &[usize] {
        &self.crucial
    }

    pub fn num_layers(&self) -> usize {
        self.spec.layers.len()
    }

    /// Per-sample output shape of `layer`.
    pub fn output_shape(&self, layer: usize) -> &[usize] {
        &self.output_shapes[layer]
    }

    pub fn num_classes(&self) -> usize {
        self.output_shapes.last().map(|s| s.iter().product()).unwrap_or(0)
    }

    pub fn layer_params(&self, layer: usize) -> Option<&LayerParams> {
        self.params.get(layer).and_then(Option::as_ref)
    }

    pub fn layer_params_mut(&mut self, layer: usize) -> Option<&mut LayerParams> {
        self.params.get_mut(layer).and_then(Option::as_mut)
    }

    /// (layer index, params) for every parametric layer, in declaration order.
    pub fn parametric_layers(&self) -> impl Iterator<Item = (usize, &LayerParams)> {
        self.params.iter().enumerate().filter_map(|(i, p)| p.as_ref().map(|p| (i, p)))
    }

    pub fn num_parameters(&self) -> usize {
        self.parametric_layers().map(|(_, p)| p.weight.numel() + p.bias.numel()).sum()
    }

    /// Order-sensitive FNV-1a hash of every parameter bit pattern.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for (_, p) in self.parametric_layers() {
            for v in p.weight.data().iter().chain(p.bias.data()) {
                for byte in v.to_bits().to_le_bytes() {
                    h ^= byte as u64;
                    h = h.wrapping_mul(0x0100_0000_01b3);
                }
            }
        }
        h
    }

    /// Registers every parameter on `tape` as a differentiable leaf.
    pub fn bind(&self, tape: &mut Tape) -> Result<BoundParams> {
        let layers = self
            .params
            .iter()
            .map(|p| match p {
                Some(p) => Ok(Some((tape.param(p.weight.clone())?, tape.param(p.bias.clone())?))),
                None => Ok(None),
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(BoundParams { layers })
    }

    fn check_batch(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != self.spec.input_shape.len() + 1 || shape[1..] != self.spec.input_shape[..] || shape[0] == 0 {
            let mut expected = vec![0];
            expected.extend_from_slice(&self.spec.input_shape);
            return Err(Error::ShapeMismatch {
                op: "model input",
                lhs: shape.to_vec(),
                rhs: expected,
            });
        }
        Ok(())
    }

    /// Runs the stack on `x` (batch × sample shape), recording every
    /// intermediate.
    pub fn forward_trace(&self, tape: &mut Tape, params: &BoundParams, x: Var) -> Result<ForwardTrace> {
        self.check_batch(tape.shape(x))?;
        let n = self.spec.layers.len();
        let mut trace = ForwardTrace {
            inputs: Vec::with_capacity(n),
            pre_activations: Vec::with_capacity(n),
            outputs: Vec::with_capacity(n),
        };
        let mut h = x;
        for (i, layer) in self.spec.layers.iter().enumerate() {
            trace.inputs.push(h);
            let (pre, act) = match *layer {
                LayerKind::Dense { activation, .. } => (self.dense(tape, params, i, h)?, activation),
                LayerKind::Classifier { .. } => (self.dense(tape, params, i, h)?, Activation::Identity),
                LayerKind::Conv {
                    stride,
                    padding,
                    activation,
                    ..
                } => {
                    let (w, b) = params.layer(i).expect("conv layers are parametric");
                    let y = tape.conv2d(h, w, ConvGeometry { stride, padding })?;
                    let b = tape.reshape(b, &[1, self.output_shapes[i][0], 1, 1])?;
                    (tape.add(y, b)?, activation)
                }
                LayerKind::AvgPool { window } => (tape.avg_pool2d(h, window)?, Activation::Identity),
                LayerKind::Flatten => (tape.flatten(h)?, Activation::Identity),
            };
            h = act.apply(tape, pre)?;
            trace.pre_activations.push(pre);
            trace.outputs.push(h);
        }
        Ok(trace)
    }

    fn dense(&self, tape: &mut Tape, params: &BoundParams, i: usize, h: Var) -> Result<Var> {
        let (w, b) = params.layer(i).expect("dense layers are parametric");
        let wt = tape.transpose(w)?;
        let y = tape.matmul(h, wt)?;
        tape.add(y, b)
    }

    /// Logits plus the post-activation outputs of the requested crucial layers.
    pub fn forward_with_taps(
        &self,
        tape: &mut Tape,
        params: &BoundParams,
        x: Var,
        taps: &[usize],
    ) -> Result<(Var, BTreeMap<usize, Var>)> {
        if let Some(&bad) = taps.iter().find(|t| !self.crucial.contains(t)) {
            return Err(Error::NotCrucial(bad));
        }
        let trace = self.forward_trace(tape, params, x)?;
        let tapped = taps.iter().map(|&t| (t, trace.outputs[t])).collect();
        Ok((trace.logits(), tapped))
    }

    /// Logits for a batch, without keeping any graph.
    pub fn predict(&self, batch: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let params = self.bind_constants(&mut tape)?;
        let x = tape.constant(batch.clone())?;
        let trace = self.forward_trace(&mut tape, &params, x)?;
        Ok(tape.value(trace.logits()).clone())
    }

    fn bind_constants(&self, tape: &mut Tape) -> Result<BoundParams> {
        let layers = self
            .params
            .iter()
            .map(|p| match p {
                Some(p) => Ok(Some((tape.constant(p.weight.clone())?, tape.constant(p.bias.clone())?))),
                None => Ok(None),
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(BoundParams { layers })
    }

    /// Replaces every parameter from a flat list in declaration order
    /// (weight then bias per parametric layer).
    pub fn set_parameters(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_parameters() {
            return Err(Error::LengthMismatch(flat.len(), self.num_parameters()));
        }
        let mut offset = 0;
        for p in self.params.iter_mut().flatten() {
            for t in [&mut p.weight, &mut p.bias] {
                let n = t.numel();
                t.data_mut().copy_from_slice(&flat[offset..offset + n]);
                offset += n;
            }
        }
        Ok(())
    }

    /// Every parameter flattened in declaration order.
    pub fn parameters(&self) -> Vec<f64> {
        self.parametric_layers()
            .flat_map(|(_, p)| p.weight.data().iter().chain(p.bias.data()).copied())
            .collect()
    }
}

/// Order-preserving correspondence between student and teacher crucial layers.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerPairing {
    /// (student layer index, teacher layer index).
    pub pairs: Vec<(usize, usize)>,
}

impl LayerPairing {
    pub fn k(&self) -> usize {
        self.pairs.len()
    }

    pub fn student_layers(&self) -> Vec<usize> {
        self.pairs.iter().map(|p| p.0).collect()
    }

    pub fn teacher_layers(&self) -> Vec<usize> {
        self.pairs.iter().map(|p| p.1).collect()
    }
}

/// Pairs crucial layers with identical post-layer output shapes. Each student
/// layer takes the first not-yet-passed teacher layer of its shape, so the
/// pairing is monotone in both indices; unmatched layers on either side are
/// skipped.
pub fn pair_crucial_layers(student: &Model, teacher: &Model, sample: &Tensor) -> Result<LayerPairing> {
    student.check_batch(sample.shape())?;
    teacher.check_batch(sample.shape())?;
    let mut pairs = Vec::new();
    let mut next_teacher = 0;
    let teacher_crucial = teacher.crucial_indices();
    for &s in student.crucial_indices() {
        let shape = student.output_shape(s);
        if let Some(offset) = teacher_crucial[next_teacher..]
            .iter()
            .position(|&t| teacher.output_shape(t) == shape)
        {
            let t = teacher_crucial[next_teacher + offset];
            pairs.push((s, t));
            next_teacher += offset + 1;
        }
    }
    if pairs.is_empty() {
        return Err(Error::ZeroMatches);
    }
    Ok(LayerPairing { pairs })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dense_spec(widths: &[usize], seed: u64) -> ModelSpec {
        ModelSpec {
            input_shape: vec![widths[0]],
            layers: widths[1..]
                .iter()
                .map(|&w| LayerKind::Dense {
                    out: w,
                    activation: Activation::Relu,
                })
                .collect(),
            seed,
        }
    }

    #[test]
    fn crucial_layers_are_width_changes() {
        let m = Model::build(dense_spec(&[8, 8, 16, 16, 32], 1)).unwrap();
        // layers: 8->8, 8->16, 16->16, 16->32
        assert_eq!(m.crucial_indices(), &[1, 3]);
    }

    #[test]
    fn constant_width_has_no_crucial_layers() {
        assert!(matches!(Model::build(dense_spec(&[8, 8, 8], 1)), Err(Error::NoCrucialLayers)));
    }

    #[test]
    fn classifier_is_never_crucial() {
        let mut spec = dense_spec(&[4, 4], 0);
        spec.layers.push(LayerKind::Classifier { classes: 3 });
        assert!(matches!(Model::build(spec), Err(Error::NoCrucialLayers)));
    }

    #[test]
    fn layer_text_round_trip() {
        for text in ["dense 32 tanh", "conv 16 k3 s1 p1 relu", "avgpool 2", "flatten", "classifier 10", "dense 4 linear"] {
            let k: LayerKind = text.parse().unwrap();
            assert_eq!(k.to_string(), text);
        }
        assert!("dense 0 relu".parse::<LayerKind>().is_err());
        assert!("dense 4 sigmoid".parse::<LayerKind>().is_err());
        assert!("pool 2".parse::<LayerKind>().is_err());
    }

    #[test]
    fn incompatible_layers_are_named() {
        let spec = ModelSpec {
            input_shape: vec![3, 8, 8],
            layers: vec!["conv 4 k3 s1 p1 relu".parse().unwrap(), "dense 4 relu".parse().unwrap()],
            seed: 0,
        };
        match Model::build(spec) {
            Err(Error::IncompatibleLayers { first: 0, second: 1, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn build_is_deterministic() {
        let a = Model::build(dense_spec(&[4, 8, 3], 7)).unwrap();
        let b = Model::build(dense_spec(&[4, 8, 3], 7)).unwrap();
        let c = Model::build(dense_spec(&[4, 8, 3], 8)).unwrap();
        assert_eq!(a.parameters(), b.parameters());
        assert_ne!(a.parameters(), c.parameters());
        assert!(a.layer_params(0).unwrap().bias.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn he_uniform_bounds() {
        let m = Model::build(dense_spec(&[6, 50], 3)).unwrap();
        let bound = (6.0f64 / 6.0).sqrt();
        assert!(m.layer_params(0).unwrap().weight.data().iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn identity_dense_tap() {
        let spec = ModelSpec {
            input_shape: vec![2],
            layers: vec![LayerKind::Dense {
                out: 2,
                activation: Activation::Identity,
            }],
            seed: 0,
        };
        // a 2->2 layer is not crucial, so widen the stack and overwrite weights
        assert!(Model::build(spec).is_err());
        let spec = ModelSpec {
            input_shape: vec![2],
            layers: vec!["dense 2 linear".parse().unwrap(), "dense 3 linear".parse().unwrap()],
            seed: 0,
        };
        let mut m = Model::build(spec).unwrap();
        m.layer_params_mut(0).unwrap().weight = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let mut tape = Tape::new();
        let p = m.bind(&mut tape).unwrap();
        let x = tape.constant(Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap()).unwrap();
        let trace = m.forward_trace(&mut tape, &p, x).unwrap();
        assert_eq!(tape.value(trace.outputs[0]).data(), &[1.0, 0.0]);
        assert!(matches!(m.forward_with_taps(&mut tape, &p, x, &[0]), Err(Error::NotCrucial(0))));
    }

    #[test]
    fn pairing_examples() {
        let sample = Tensor::zeros(&[1, 4]);
        let student = Model::build(dense_spec(&[4, 16, 32], 0)).unwrap();
        let teacher = Model::build(dense_spec(&[4, 16, 16, 32, 64], 0)).unwrap();
        let p = pair_crucial_layers(&student, &teacher, &sample).unwrap();
        assert_eq!(p.pairs, vec![(0, 0), (1, 2)]);

        let same = pair_crucial_layers(&student, &student, &sample).unwrap();
        assert_eq!(same.pairs, vec![(0, 0), (1, 1)]);

        let other = Model::build(dense_spec(&[4, 5, 7], 0)).unwrap();
        assert!(matches!(pair_crucial_layers(&student, &other, &sample), Err(Error::ZeroMatches)));
    }

    #[test]
    fn pairing_ties_take_first_occurrence() {
        let sample = Tensor::zeros(&[1, 4]);
        // teacher produces width 8 at two crucial layers (indices 0 and 2)
        let teacher = Model::build(dense_spec(&[4, 8, 4, 8, 2], 0)).unwrap();
        let student = Model::build(dense_spec(&[4, 8, 2], 0)).unwrap();
        let p = pair_crucial_layers(&student, &teacher, &sample).unwrap();
        assert_eq!(p.pairs, vec![(0, 0), (1, 3)]);
    }

    #[test]
    fn checksum_tracks_parameters() {
        let mut m = Model::build(dense_spec(&[2, 3], 0)).unwrap();
        let before = m.checksum();
        let mut flat = m.parameters();
        flat[0] += 1e-9;
        m.set_parameters(&flat).unwrap();
        assert_ne!(before, m.checksum());
    }
}
