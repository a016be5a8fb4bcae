//! Dense row-major `f64` tensors and the raw numeric kernels behind every
//! differentiable op.
//!
//! Feature maps use the layout `[C, H, W]` (channel, row, column). The
//! kernels here are plain functions over tensors so that they can be used
//! both directly and from the reverse-mode [`Graph`](crate::autodiff::Graph).

use crate::error::{Error, Result};

/// A dense, row-major, 64-bit tensor of rank 1 to 4.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor, checking that `data.len()` matches the shape.
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.len() > 4 {
            return Err(Error::Shape {
                op: "Tensor::new",
                detail: format!("rank must be 1..=4, got {}", shape.len()),
            });
        }
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Shape {
                op: "Tensor::new",
                detail: format!("zero-sized axis in {shape:?}"),
            });
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Dimension {
                op: "Tensor::new",
                axis: "numel",
                expected: numel,
                actual: data.len(),
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// Builds a tensor by evaluating `f` at every flat index.
    pub fn from_fn(shape: &[usize], f: impl FnMut(usize) -> f64) -> Self {
        let numel: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..numel).map(f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
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

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    /// Same data under a new shape with the same element count.
    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        Self::new(shape, self.data.clone())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        same_shape(op, self, other)?;
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    /// `self += other`, elementwise.
    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Reads `[C, H, W]` dims, failing on any other rank.
    pub fn chw(&self, op: &'static str) -> Result<(usize, usize, usize)> {
        match self.shape[..] {
            [c, h, w] => Ok((c, h, w)),
            _ => Err(Error::Shape {
                op,
                detail: format!("expected [C, H, W], got {:?}", self.shape),
            }),
        }
    }
}

pub(crate) fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape.len() != b.shape.len() {
        return Err(Error::Dimension {
            op,
            axis: "rank",
            expected: a.shape.len(),
            actual: b.shape.len(),
        });
    }
    const AXES: [&str; 4] = ["axis0", "axis1", "axis2", "axis3"];
    for (i, (&x, &y)) in a.shape.iter().zip(&b.shape).enumerate() {
        if x != y {
            return Err(Error::Dimension {
                op,
                axis: AXES[i],
                expected: x,
                actual: y,
            });
        }
    }
    Ok(())
}

fn expect_dim(op: &'static str, axis: &'static str, expected: usize, actual: usize) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(Error::Dimension {
            op,
            axis,
            expected,
            actual,
        })
    }
}

fn expect_rank<'a>(op: &'static str, t: &'a Tensor, rank: usize) -> Result<&'a [usize]> {
    if t.rank() == rank {
        Ok(t.shape())
    } else {
        Err(Error::Shape {
            op,
            detail: format!("expected rank {rank}, got shape {:?}", t.shape()),
        })
    }
}

// ---------------------------------------------------------------------------
// 1x1 convolution
// ---------------------------------------------------------------------------

/// `out[c,p] = bias[c] + sum_k weight[c,k] * input[k,p]` for every pixel `p`.
pub fn conv1x1(input: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    const OP: &str = "conv1x1";
    let (c_in, h, w) = input.chw(OP)?;
    let ws = expect_rank(OP, weight, 2)?;
    let c_out = ws[0];
    expect_dim(OP, "weight.c_in", c_in, ws[1])?;
    expect_dim(OP, "bias.c_out", c_out, bias.numel())?;
    let p = h * w;
    let mut out = vec![0.0; c_out * p];
    for c in 0..c_out {
        let row = &mut out[c * p..(c + 1) * p];
        row.fill(bias.data[c]);
        for k in 0..c_in {
            let wk = weight.data[c * c_in + k];
            if wk == 0.0 {
                continue;
            }
            let src = &input.data[k * p..(k + 1) * p];
            for (o, &x) in row.iter_mut().zip(src) {
                *o += wk * x;
            }
        }
    }
    Tensor::new(&[c_out, h, w], out)
}

/// Gradients of [`conv1x1`] given the upstream gradient `dy`.
pub(crate) fn conv1x1_backward(
    input: &Tensor,
    weight: &Tensor,
    dy: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let (c_in, h, w) = (input.shape[0], input.shape[1], input.shape[2]);
    let c_out = weight.shape[0];
    let p = h * w;
    let mut dx = vec![0.0; c_in * p];
    let mut dw = vec![0.0; c_out * c_in];
    let mut db = vec![0.0; c_out];
    for c in 0..c_out {
        let g = &dy.data[c * p..(c + 1) * p];
        db[c] = g.iter().sum();
        for k in 0..c_in {
            let x = &input.data[k * p..(k + 1) * p];
            dw[c * c_in + k] = g.iter().zip(x).map(|(a, b)| a * b).sum();
            let wk = weight.data[c * c_in + k];
            let dxk = &mut dx[k * p..(k + 1) * p];
            for (d, &gi) in dxk.iter_mut().zip(g) {
                *d += wk * gi;
            }
        }
    }
    (
        Tensor { shape: input.shape.clone(), data: dx },
        Tensor { shape: weight.shape.clone(), data: dw },
        Tensor { shape: vec![c_out], data: db },
    )
}

// ---------------------------------------------------------------------------
// 3x3 convolution, stride 1, zero padding 1
// ---------------------------------------------------------------------------

/// Row/column ranges of the output that read a valid input cell for a
/// kernel tap at offset `d - 1` along an axis of length `n`.
#[inline]
fn tap_range(d: usize, n: usize) -> (usize, usize) {
    // output index i reads input i + d - 1
    let lo = if d == 0 { 1 } else { 0 };
    let hi = if d == 2 { n.saturating_sub(1) } else { n };
    (lo, hi.max(lo))
}

/// Same-size 3x3 cross-correlation with zero padding of one pixel.
pub fn conv3x3(input: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    const OP: &str = "conv3x3";
    let (c_in, h, w) = input.chw(OP)?;
    let ws = expect_rank(OP, weight, 4)?;
    let c_out = ws[0];
    expect_dim(OP, "weight.c_in", c_in, ws[1])?;
    expect_dim(OP, "weight.kh", 3, ws[2])?;
    expect_dim(OP, "weight.kw", 3, ws[3])?;
    expect_dim(OP, "bias.c_out", c_out, bias.numel())?;
    let p = h * w;
    let mut out = vec![0.0; c_out * p];
    for o in 0..c_out {
        let dst = &mut out[o * p..(o + 1) * p];
        dst.fill(bias.data[o]);
        for c in 0..c_in {
            let src = &input.data[c * p..(c + 1) * p];
            let kern = &weight.data[(o * c_in + c) * 9..(o * c_in + c + 1) * 9];
            for di in 0..3 {
                let (r0, r1) = tap_range(di, h);
                for dj in 0..3 {
                    let k = kern[di * 3 + dj];
                    if k == 0.0 {
                        continue;
                    }
                    let (c0, c1) = tap_range(dj, w);
                    for i in r0..r1 {
                        let si = (i + di - 1) * w;
                        let drow = &mut dst[i * w + c0..i * w + c1];
                        let srow = &src[si + c0 + dj - 1..si + c1 + dj - 1];
                        for (d, &s) in drow.iter_mut().zip(srow) {
                            *d += k * s;
                        }
                    }
                }
            }
        }
    }
    Tensor::new(&[c_out, h, w], out)
}

pub(crate) fn conv3x3_backward(
    input: &Tensor,
    weight: &Tensor,
    dy: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let (c_in, h, w) = (input.shape[0], input.shape[1], input.shape[2]);
    let c_out = weight.shape[0];
    let p = h * w;
    let mut dx = vec![0.0; c_in * p];
    let mut dw = vec![0.0; weight.numel()];
    let mut db = vec![0.0; c_out];
    for o in 0..c_out {
        let g = &dy.data[o * p..(o + 1) * p];
        db[o] = g.iter().sum();
        for c in 0..c_in {
            let src = &input.data[c * p..(c + 1) * p];
            let base = (o * c_in + c) * 9;
            let dxc = &mut dx[c * p..(c + 1) * p];
            for di in 0..3 {
                let (r0, r1) = tap_range(di, h);
                for dj in 0..3 {
                    let (c0, c1) = tap_range(dj, w);
                    let k = weight.data[base + di * 3 + dj];
                    let mut acc = 0.0;
                    for i in r0..r1 {
                        let (s0, s1) = ((i + di - 1) * w + c0 + dj - 1, (i + di - 1) * w + c1 + dj - 1);
                        let grow = &g[i * w + c0..i * w + c1];
                        let srow = &src[s0..s1];
                        acc += grow.iter().zip(srow).map(|(a, b)| a * b).sum::<f64>();
                        let xrow = &mut dxc[s0..s1];
                        for (d, &gi) in xrow.iter_mut().zip(grow) {
                            *d += k * gi;
                        }
                    }
                    dw[base + di * 3 + dj] = acc;
                }
            }
        }
    }
    (
        Tensor { shape: input.shape.clone(), data: dx },
        Tensor { shape: weight.shape.clone(), data: dw },
        Tensor { shape: vec![c_out], data: db },
    )
}

// ---------------------------------------------------------------------------
// matmul / transpose
// ---------------------------------------------------------------------------

/// `[M,K] x [K,N] -> [M,N]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    const OP: &str = "matmul";
    let sa = expect_rank(OP, a, 2)?;
    let sb = expect_rank(OP, b, 2)?;
    let (m, k, n) = (sa[0], sa[1], sb[1]);
    expect_dim(OP, "k", k, sb[0])?;
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for kk in 0..k {
            let aik = a.data[i * k + kk];
            let brow = &b.data[kk * n..(kk + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aik * bv;
            }
        }
    }
    Tensor::new(&[m, n], out)
}

/// Transpose of a rank-2 tensor.
pub fn transpose(a: &Tensor) -> Result<Tensor> {
    let s = expect_rank("transpose", a, 2)?;
    let (m, n) = (s[0], s[1]);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a.data[i * n + j];
        }
    }
    Tensor::new(&[n, m], out)
}

// ---------------------------------------------------------------------------
// softmax / pooling reductions
// ---------------------------------------------------------------------------

/// Splits a shape around `axis` into (outer, len, inner) strides.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Numerically stable softmax along `axis` (max subtraction).
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    if axis >= x.rank() {
        return Err(Error::Shape {
            op: "softmax",
            detail: format!("axis {axis} out of range for shape {:?}", x.shape),
        });
    }
    let (outer, len, inner) = axis_split(&x.shape, axis);
    let mut out = x.data.clone();
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut mx = f64::NEG_INFINITY;
            for a in 0..len {
                mx = mx.max(out[base + a * inner]);
            }
            let mut total = 0.0;
            for a in 0..len {
                let e = (out[base + a * inner] - mx).exp();
                out[base + a * inner] = e;
                total += e;
            }
            for a in 0..len {
                out[base + a * inner] /= total;
            }
        }
    }
    Tensor::new(&x.shape, out)
}

/// Per-channel spatial mean: `[C,H,W] -> [C]`.
pub fn global_avg_pool(m: &Tensor) -> Result<Tensor> {
    let (c, h, w) = m.chw("global_avg_pool")?;
    let p = h * w;
    let out = (0..c)
        .map(|k| m.data[k * p..(k + 1) * p].iter().sum::<f64>() / p as f64)
        .collect();
    Tensor::new(&[c], out)
}

/// Per-pixel channel mean: `[C,H,W] -> [H,W]`.
pub fn channel_avg(m: &Tensor) -> Result<Tensor> {
    let (c, h, w) = m.chw("channel_avg")?;
    let p = h * w;
    let mut out = vec![0.0; p];
    for k in 0..c {
        for (o, &x) in out.iter_mut().zip(&m.data[k * p..(k + 1) * p]) {
            *o += x;
        }
    }
    for o in &mut out {
        *o /= c as f64;
    }
    Tensor::new(&[h, w], out)
}

/// Outer product of a channel vector and a spatial map: `[C] x [H,W] -> [C,H,W]`.
pub fn outer(ch: &Tensor, sp: &Tensor) -> Result<Tensor> {
    const OP: &str = "outer";
    let c = expect_rank(OP, ch, 1)?[0];
    let s = expect_rank(OP, sp, 2)?;
    let (h, w) = (s[0], s[1]);
    let mut out = Vec::with_capacity(c * h * w);
    for &a in &ch.data {
        out.extend(sp.data.iter().map(|&b| a * b));
    }
    Tensor::new(&[c, h, w], out)
}

/// Channel concatenation of two `[C_i,H,W]` maps.
pub fn concat_channels(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    const OP: &str = "concat_channels";
    let (ca, h, w) = a.chw(OP)?;
    let (cb, hb, wb) = b.chw(OP)?;
    expect_dim(OP, "height", h, hb)?;
    expect_dim(OP, "width", w, wb)?;
    let mut out = a.data.clone();
    out.extend_from_slice(&b.data);
    Tensor::new(&[ca + cb, h, w], out)
}

/// 2x2 average pooling with stride 2 (odd trailing rows/cols are dropped).
pub fn avg_pool2(x: &Tensor) -> Result<Tensor> {
    let (c, h, w) = x.chw("avg_pool2")?;
    let (oh, ow) = (h / 2, w / 2);
    if oh == 0 || ow == 0 {
        return Err(Error::Shape {
            op: "avg_pool2",
            detail: format!("spatial size {h}x{w} too small"),
        });
    }
    let mut out = vec![0.0; c * oh * ow];
    for k in 0..c {
        for i in 0..oh {
            for j in 0..ow {
                let b = k * h * w;
                let s = x.data[b + 2 * i * w + 2 * j]
                    + x.data[b + 2 * i * w + 2 * j + 1]
                    + x.data[b + (2 * i + 1) * w + 2 * j]
                    + x.data[b + (2 * i + 1) * w + 2 * j + 1];
                out[k * oh * ow + i * ow + j] = 0.25 * s;
            }
        }
    }
    Tensor::new(&[c, oh, ow], out)
}

/// Interpolation taps of a 1-D bilinear resize (half-pixel centres, edges
/// clamped): for every output index, two source indices and their weights.
pub(crate) fn bilinear_taps(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|o| {
            let pos = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (pos.floor() as usize).min(src - 1);
            let i1 = (i0 + 1).min(src - 1);
            let t = pos - i0 as f64;
            (i0, i1, t)
        })
        .collect()
}

/// Bilinear resize of a `[C,h,w]` map to `[C,out_h,out_w]`.
pub fn upsample_bilinear(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (c, h, w) = x.chw("upsample_bilinear")?;
    let rows = bilinear_taps(h, out_h);
    let cols = bilinear_taps(w, out_w);
    let mut out = vec![0.0; c * out_h * out_w];
    for k in 0..c {
        let src = &x.data[k * h * w..(k + 1) * h * w];
        for (i, &(r0, r1, tr)) in rows.iter().enumerate() {
            for (j, &(c0, c1, tc)) in cols.iter().enumerate() {
                let top = src[r0 * w + c0] * (1.0 - tc) + src[r0 * w + c1] * tc;
                let bot = src[r1 * w + c0] * (1.0 - tc) + src[r1 * w + c1] * tc;
                out[k * out_h * out_w + i * out_w + j] = top * (1.0 - tr) + bot * tr;
            }
        }
    }
    Tensor::new(&[c, out_h, out_w], out)
}
