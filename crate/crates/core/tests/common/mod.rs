//! Plain-arithmetic reference networks and the derivative checks built on
//! them. Shared by the derivative suite and the acceptance run.
#![allow(dead_code)]

use lwdistill::divergence::cross_entropy;
use lwdistill::network::{Activation, LayerKind, Model, ModelSpec};
use lwdistill::oracle::{fd_gradient, fd_hessian_diag, FdConfig};
use lwdistill::tape::Tape;
use lwdistill::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Largest componentwise error relative to the largest reference component.
pub fn rel_err(analytic: &[f64], reference: &[f64]) -> f64 {
    assert_eq!(analytic.len(), reference.len());
    let scale = reference.iter().chain(analytic).fold(0.0f64, |m, v| m.max(v.abs()));
    let err = analytic.iter().zip(reference).fold(0.0f64, |m, (a, r)| m.max((a - r).abs()));
    if scale == 0.0 {
        err
    } else {
        err / scale
    }
}

/// Plain forward of a dense stack from a flat parameter vector laid out as
/// (weight out×in row-major, bias) per layer.
pub struct PlainMlp {
    pub input: usize,
    pub layers: Vec<(usize, Activation)>,
}

impl PlainMlp {
    pub fn logits(&self, theta: &[f64], x: &[f64], batch: usize) -> Vec<f64> {
        let mut h = x.to_vec();
        let mut width = self.input;
        let mut off = 0;
        for &(out, act) in &self.layers {
            let w = &theta[off..off + out * width];
            let b = &theta[off + out * width..off + out * width + out];
            off += out * width + out;
            let mut next = vec![0.0; batch * out];
            for s in 0..batch {
                for o in 0..out {
                    let mut z = b[o];
                    for i in 0..width {
                        z += w[o * width + i] * h[s * width + i];
                    }
                    next[s * out + o] = match act {
                        Activation::Identity => z,
                        Activation::Relu => z.max(0.0),
                        Activation::Tanh => z.tanh(),
                    };
                }
            }
            h = next;
            width = out;
        }
        h
    }

    pub fn classes(&self) -> usize {
        self.layers.last().unwrap().0
    }

    pub fn cross_entropy(&self, theta: &[f64], x: &[f64], labels: &[usize]) -> f64 {
        let c = self.classes();
        let z = self.logits(theta, x, labels.len());
        let mut total = 0.0;
        for (s, &y) in labels.iter().enumerate() {
            let row = &z[s * c..(s + 1) * c];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            total += lse - row[y];
        }
        total / labels.len() as f64
    }

    pub fn mean_logit(&self, theta: &[f64], x: &[f64], batch: usize, class: usize) -> f64 {
        let c = self.classes();
        let z = self.logits(theta, x, batch);
        (0..batch).map(|s| z[s * c + class]).sum::<f64>() / batch as f64
    }

    /// Flat index range of layer `l`'s parameters.
    pub fn range(&self, l: usize) -> std::ops::Range<usize> {
        let mut width = self.input;
        let mut off = 0;
        for (i, &(out, _)) in self.layers.iter().enumerate() {
            let n = out * width + out;
            if i == l {
                return off..off + n;
            }
            off += n;
            width = out;
        }
        unreachable!()
    }
}

pub struct Instance {
    pub model: Model,
    pub plain: PlainMlp,
    pub x: Vec<f64>,
    pub labels: Vec<usize>,
}

impl Instance {
    pub fn batch(&self) -> Tensor {
        Tensor::new(vec![self.labels.len(), self.plain.input], self.x.clone()).unwrap()
    }
}

pub fn random_mlp(rng: &mut ChaCha8Rng, activations: &[Activation]) -> Instance {
    let input = rng.random_range(1..=4);
    let hidden = rng.random_range(1..=3);
    let classes = rng.random_range(2..=4);
    let mut layers = Vec::new();
    let mut kinds = Vec::new();
    let mut width = input;
    for _ in 0..hidden {
        // A width change guarantees at least one crucial layer.
        let mut out = rng.random_range(1..=5);
        if out == width {
            out += 1;
        }
        width = out;
        let act = activations[rng.random_range(0..activations.len())];
        layers.push((out, act));
        kinds.push(LayerKind::Dense { out, activation: act });
    }
    layers.push((classes, Activation::Identity));
    kinds.push(LayerKind::Classifier { classes });
    let mut model = Model::build(ModelSpec {
        input_shape: vec![input],
        layers: kinds,
        seed: rng.random(),
    })
    .unwrap();
    randomize_biases(&mut model, rng);
    let batch = rng.random_range(1..=4);
    let x = (0..batch * input).map(|_| rng.random_range(-1.5..1.5)).collect();
    let labels = (0..batch).map(|_| rng.random_range(0..classes)).collect();
    Instance {
        model,
        plain: PlainMlp { input, layers },
        x,
        labels,
    }
}

/// Nonzero biases keep pre-activations off the ReLU kink even behind a dead
/// layer.
pub fn randomize_biases(model: &mut Model, rng: &mut ChaCha8Rng) {
    let mut theta = model.parameters();
    let mut off = 0;
    let sizes: Vec<(usize, usize)> = model
        .parametric_layers()
        .map(|(_, p)| (p.weight.numel(), p.bias.numel()))
        .collect();
    for (w, b) in sizes {
        off += w;
        for v in &mut theta[off..off + b] {
            *v = rng.random_range(-0.5..0.5);
        }
        off += b;
    }
    model.set_parameters(&theta).unwrap();
}

/// Tape gradient (and optionally Hessian diagonal) of mean cross-entropy
/// with respect to every parameter, flattened in declaration order.
pub fn tape_derivatives(model: &Model, batch: &Tensor, labels: &[usize], hessian: bool) -> Vec<f64> {
    let mut tape = Tape::new();
    let params = model.bind(&mut tape).unwrap();
    let x = tape.constant(batch.clone()).unwrap();
    let trace = model.forward_trace(&mut tape, &params, x).unwrap();
    let loss = cross_entropy(&mut tape, trace.logits(), labels).unwrap();
    let wrt = params.all();
    let out = if hessian {
        tape.hessian_diag(loss, &wrt).unwrap()
    } else {
        tape.backward(loss, &wrt).unwrap()
    };
    out.iter().flat_map(|t| t.data().to_vec()).collect()
}

pub fn normalized(raw: &[f64]) -> Vec<f64> {
    let s: f64 = raw.iter().sum();
    if s > 0.0 {
        raw.iter().map(|v| v / s).collect()
    } else {
        vec![1.0 / raw.len() as f64; raw.len()]
    }
}

/// Worst relative error of tape gradients of cross-entropy against central
/// differences of the plain forward, over `cases` random dense nets.
pub fn gradient_suite(cases: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let acts = [Activation::Tanh, Activation::Tanh, Activation::Identity, Activation::Relu];
    (0..cases)
        .map(|_| {
            let inst = random_mlp(&mut rng, &acts);
            let theta = inst.model.parameters();
            let analytic = tape_derivatives(&inst.model, &inst.batch(), &inst.labels, false);
            let fd = fd_gradient(
                |t| inst.plain.cross_entropy(t, &inst.x, &inst.labels),
                &theta,
                FdConfig { step: 1e-5 },
            )
            .unwrap();
            rel_err(&analytic, &fd)
        })
        .fold(0.0, f64::max)
}

/// Worst relative error of tape Hessian diagonals of cross-entropy against
/// second differences, over `cases` random smooth nets.
pub fn hessian_suite(cases: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..cases)
        .map(|_| {
            let inst = random_mlp(&mut rng, &[Activation::Tanh, Activation::Identity]);
            let theta = inst.model.parameters();
            let analytic = tape_derivatives(&inst.model, &inst.batch(), &inst.labels, true);
            let fd = fd_hessian_diag(
                |t| inst.plain.cross_entropy(t, &inst.x, &inst.labels),
                &theta,
                FdConfig { step: 1e-3 },
            )
            .unwrap();
            rel_err(&analytic, &fd)
        })
        .fold(0.0, f64::max)
}
