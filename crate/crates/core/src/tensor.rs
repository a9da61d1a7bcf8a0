//! Dense row-major `f64` arrays and the raw numeric kernels behind the tape.
//!
//! Everything here is value-level: no differentiation happens in this module.
//! The [`crate::tape`] module records these kernels and supplies their
//! vector-Jacobian products.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

/// Geometry of a 2-D convolution: square stride and symmetric zero padding.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub stride: usize,
    pub padding: usize,
}

impl Default for ConvGeometry {
    fn default() -> Self {
        Self {
            stride: 1,
            padding: 0,
        }
    }
}

impl ConvGeometry {
    pub fn output_len(&self, input: usize, kernel: usize) -> Option<usize> {
        let padded = input + 2 * self.padding;
        if self.stride == 0 || padded < kernel {
            return None;
        }
        Some((padded - kernel) / self.stride + 1)
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::InvalidShape {
                op: "tensor",
                shape,
                reason: format!("expected {n} elements, got {}", data.len()),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::filled(shape, 1.0)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return Err(Error::NotScalar(self.shape.clone()));
        }
        Ok(self.data[0])
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn ensure_finite(&self, op: &'static str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite { op })
        }
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if n != self.numel() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.shape.clone(),
                rhs: shape.to_vec(),
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_with(&self, other: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                op,
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    /// Row `i` of the leading axis, keeping the trailing shape.
    pub fn index_axis0(&self, i: usize) -> Result<Tensor> {
        if self.shape.is_empty() || i >= self.shape[0] {
            return Err(Error::InvalidShape {
                op: "index_axis0",
                shape: self.shape.clone(),
                reason: format!("index {i} out of range"),
            });
        }
        let inner: usize = self.shape[1..].iter().product();
        Ok(Tensor {
            shape: self.shape[1..].to_vec(),
            data: self.data[i * inner..(i + 1) * inner].to_vec(),
        })
    }

    /// Gather rows of the leading axis.
    pub fn select_rows(&self, rows: &[usize]) -> Result<Tensor> {
        if self.shape.is_empty() {
            return Err(Error::InvalidShape {
                op: "select_rows",
                shape: self.shape.clone(),
                reason: "rank-0 tensor has no rows".into(),
            });
        }
        let inner: usize = self.shape[1..].iter().product();
        let mut data = Vec::with_capacity(rows.len() * inner);
        for &r in rows {
            if r >= self.shape[0] {
                return Err(Error::InvalidShape {
                    op: "select_rows",
                    shape: self.shape.clone(),
                    reason: format!("row {r} out of range"),
                });
            }
            data.extend_from_slice(&self.data[r * inner..(r + 1) * inner]);
        }
        let mut shape = self.shape.clone();
        shape[0] = rows.len();
        Ok(Tensor { shape, data })
    }
}

fn expect_rank(t: &Tensor, rank: usize, op: &'static str) -> Result<()> {
    if t.rank() != rank {
        return Err(Error::InvalidShape {
            op,
            shape: t.shape.clone(),
            reason: format!("expected rank {rank}"),
        });
    }
    Ok(())
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    expect_rank(a, 2, "matmul")?;
    expect_rank(b, 2, "matmul")?;
    let (m, k) = (a.shape[0], a.shape[1]);
    let (k2, n) = (b.shape[0], b.shape[1]);
    if k != k2 {
        return Err(Error::ShapeMismatch {
            op: "matmul",
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a.data[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b.data[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Ok(Tensor {
        shape: vec![m, n],
        data: out,
    })
}

pub fn transpose(a: &Tensor) -> Result<Tensor> {
    expect_rank(a, 2, "transpose")?;
    let (m, n) = (a.shape[0], a.shape[1]);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a.data[i * n + j];
        }
    }
    Ok(Tensor {
        shape: vec![n, m],
        data: out,
    })
}

/// Visits every (input, weight, output) index triple of a strided, padded
/// cross-correlation. Shared by the forward kernel and both adjoint kernels so
/// the three stay consistent.
fn for_each_conv_tap(
    x_shape: [usize; 4],
    w_shape: [usize; 4],
    out_hw: (usize, usize),
    geo: ConvGeometry,
    mut f: impl FnMut(usize, usize, usize),
) {
    let [batch, cin, h, w] = x_shape;
    let [cout, _, kh, kw] = w_shape;
    let (ho, wo) = out_hw;
    for b in 0..batch {
        for o in 0..cout {
            for oy in 0..ho {
                for ox in 0..wo {
                    let out_idx = ((b * cout + o) * ho + oy) * wo + ox;
                    for c in 0..cin {
                        for u in 0..kh {
                            let iy = (oy * geo.stride + u) as isize - geo.padding as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for v in 0..kw {
                                let ix = (ox * geo.stride + v) as isize - geo.padding as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                let x_idx = ((b * cin + c) * h + iy as usize) * w + ix as usize;
                                let w_idx = ((o * cin + c) * kh + u) * kw + v;
                                f(x_idx, w_idx, out_idx);
                            }
                        }
                    }
                }
            }
        }
    }
}

fn dims4(t: &Tensor) -> [usize; 4] {
    [t.shape[0], t.shape[1], t.shape[2], t.shape[3]]
}

/// Cross-correlation of `x` (B×C×H×W) with `w` (O×C×kh×kw).
pub fn conv2d(x: &Tensor, w: &Tensor, geo: ConvGeometry) -> Result<Tensor> {
    expect_rank(x, 4, "conv2d")?;
    expect_rank(w, 4, "conv2d")?;
    let mismatch = || Error::ShapeMismatch {
        op: "conv2d",
        lhs: x.shape.clone(),
        rhs: w.shape.clone(),
    };
    if x.shape[1] != w.shape[1] {
        return Err(mismatch());
    }
    let ho = geo.output_len(x.shape[2], w.shape[2]).ok_or_else(mismatch)?;
    let wo = geo.output_len(x.shape[3], w.shape[3]).ok_or_else(mismatch)?;
    let shape = vec![x.shape[0], w.shape[0], ho, wo];
    let mut out = vec![0.0; shape.iter().product()];
    for_each_conv_tap(dims4(x), dims4(w), (ho, wo), geo, |xi, wi, oi| {
        out[oi] += x.data[xi] * w.data[wi];
    });
    Ok(Tensor { shape, data: out })
}

/// Adjoint of [`conv2d`] with respect to its input: maps an output-shaped
/// cotangent `g` back to an input of spatial size `in_hw`.
pub fn conv2d_input_grad(g: &Tensor, w: &Tensor, geo: ConvGeometry, in_hw: (usize, usize)) -> Result<Tensor> {
    expect_rank(g, 4, "conv2d_input_grad")?;
    expect_rank(w, 4, "conv2d_input_grad")?;
    let mismatch = || Error::ShapeMismatch {
        op: "conv2d_input_grad",
        lhs: g.shape.clone(),
        rhs: w.shape.clone(),
    };
    if g.shape[1] != w.shape[0] {
        return Err(mismatch());
    }
    if geo.output_len(in_hw.0, w.shape[2]) != Some(g.shape[2])
        || geo.output_len(in_hw.1, w.shape[3]) != Some(g.shape[3])
    {
        return Err(mismatch());
    }
    let x_shape = [g.shape[0], w.shape[1], in_hw.0, in_hw.1];
    let mut out = vec![0.0; x_shape.iter().product()];
    for_each_conv_tap(x_shape, dims4(w), (g.shape[2], g.shape[3]), geo, |xi, wi, oi| {
        out[xi] += g.data[oi] * w.data[wi];
    });
    Ok(Tensor {
        shape: x_shape.to_vec(),
        data: out,
    })
}

/// Adjoint of [`conv2d`] with respect to its weights.
pub fn conv2d_weight_grad(x: &Tensor, g: &Tensor, geo: ConvGeometry, kernel: (usize, usize)) -> Result<Tensor> {
    expect_rank(x, 4, "conv2d_weight_grad")?;
    expect_rank(g, 4, "conv2d_weight_grad")?;
    let mismatch = || Error::ShapeMismatch {
        op: "conv2d_weight_grad",
        lhs: x.shape.clone(),
        rhs: g.shape.clone(),
    };
    if x.shape[0] != g.shape[0]
        || geo.output_len(x.shape[2], kernel.0) != Some(g.shape[2])
        || geo.output_len(x.shape[3], kernel.1) != Some(g.shape[3])
    {
        return Err(mismatch());
    }
    let w_shape = [g.shape[1], x.shape[1], kernel.0, kernel.1];
    let mut out = vec![0.0; w_shape.iter().product()];
    for_each_conv_tap(dims4(x), w_shape, (g.shape[2], g.shape[3]), geo, |xi, wi, oi| {
        out[wi] += x.data[xi] * g.data[oi];
    });
    Ok(Tensor {
        shape: w_shape.to_vec(),
        data: out,
    })
}

/// Non-overlapping average pooling with a square window (stride = window).
pub fn avg_pool2d(x: &Tensor, k: usize) -> Result<Tensor> {
    expect_rank(x, 4, "avg_pool2d")?;
    let [b, c, h, w] = dims4(x);
    if k == 0 || h % k != 0 || w % k != 0 {
        return Err(Error::InvalidShape {
            op: "avg_pool2d",
            shape: x.shape.clone(),
            reason: format!("spatial size not divisible by window {k}"),
        });
    }
    let (ho, wo) = (h / k, w / k);
    let scale = 1.0 / (k * k) as f64;
    let mut out = vec![0.0; b * c * ho * wo];
    for bc in 0..b * c {
        for y in 0..h {
            for xx in 0..w {
                out[(bc * ho + y / k) * wo + xx / k] += x.data[(bc * h + y) * w + xx] * scale;
            }
        }
    }
    Ok(Tensor {
        shape: vec![b, c, ho, wo],
        data: out,
    })
}

/// Adjoint of [`avg_pool2d`]: spreads each pooled cotangent evenly over its window.
pub fn avg_pool2d_grad(g: &Tensor, k: usize) -> Result<Tensor> {
    expect_rank(g, 4, "avg_pool2d_grad")?;
    let [b, c, ho, wo] = dims4(g);
    let (h, w) = (ho * k, wo * k);
    let scale = 1.0 / (k * k) as f64;
    let mut out = vec![0.0; b * c * h * w];
    for bc in 0..b * c {
        for y in 0..h {
            for xx in 0..w {
                out[(bc * h + y) * w + xx] = g.data[(bc * ho + y / k) * wo + xx / k] * scale;
            }
        }
    }
    Ok(Tensor {
        shape: vec![b, c, h, w],
        data: out,
    })
}

fn last_axis_rows(x: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    match x.shape.last() {
        Some(&n) if n > 0 => Ok((x.numel() / n, n)),
        _ => Err(Error::InvalidShape {
            op,
            shape: x.shape.clone(),
            reason: "needs a non-empty last axis".into(),
        }),
    }
}

pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let (rows, n) = last_axis_rows(x, "softmax")?;
    let mut out = x.data.clone();
    for r in 0..rows {
        let row = &mut out[r * n..(r + 1) * n];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    Ok(Tensor {
        shape: x.shape.clone(),
        data: out,
    })
}

pub fn log_softmax_last(x: &Tensor) -> Result<Tensor> {
    let (rows, n) = last_axis_rows(x, "log_softmax")?;
    let mut out = x.data.clone();
    for r in 0..rows {
        let row = &mut out[r * n..(r + 1) * n];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        for v in row.iter_mut() {
            *v -= lse;
        }
    }
    Ok(Tensor {
        shape: x.shape.clone(),
        data: out,
    })
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Sum along `axis`, keeping it with length 1.
pub fn sum_axis_keepdim(x: &Tensor, axis: usize) -> Result<Tensor> {
    if axis >= x.rank() {
        return Err(Error::InvalidShape {
            op: "sum_axis",
            shape: x.shape.clone(),
            reason: format!("axis {axis} out of range"),
        });
    }
    let (outer, len, inner) = axis_split(&x.shape, axis);
    let mut out = vec![0.0; outer * inner];
    for o in 0..outer {
        for a in 0..len {
            let src = &x.data[(o * len + a) * inner..(o * len + a + 1) * inner];
            for (d, s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                *d += s;
            }
        }
    }
    let mut shape = x.shape.clone();
    shape[axis] = 1;
    Ok(Tensor { shape, data: out })
}

/// Numpy-style broadcast of two shapes (ranks aligned on the right).
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Expand axes of length 1 to `shape`. Ranks must already agree.
pub fn broadcast_to(x: &Tensor, shape: &[usize]) -> Result<Tensor> {
    let mismatch = || Error::ShapeMismatch {
        op: "broadcast_to",
        lhs: x.shape.clone(),
        rhs: shape.to_vec(),
    };
    if x.rank() != shape.len() {
        return Err(mismatch());
    }
    for (&s, &t) in x.shape.iter().zip(shape) {
        if s != t && s != 1 {
            return Err(mismatch());
        }
    }
    let n: usize = shape.iter().product();
    let rank = shape.len();
    let mut src_strides = vec![0; rank];
    let mut stride = 1;
    for i in (0..rank).rev() {
        src_strides[i] = if x.shape[i] == 1 { 0 } else { stride };
        stride *= x.shape[i];
    }
    let mut data = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    for _ in 0..n {
        let off: usize = idx.iter().zip(&src_strides).map(|(i, s)| i * s).sum();
        data.push(x.data[off]);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            if idx[ax] < shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    Ok(Tensor {
        shape: shape.to_vec(),
        data,
    })
}
