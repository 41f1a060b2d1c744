//! Reverse-mode autodiff over a linear tape.
//!
//! Every forward op appends a node holding its value and whatever it needs
//! for the backward pass. Nodes are pushed in evaluation order, so the tape
//! is already topologically sorted and `backward` is a single reverse sweep.
//! A tape supports exactly one backward pass; build a new [`Graph`] for the
//! next forward.

use super::kernels::{self, Conv3dGeom};
use super::{Real, Tensor};
use crate::{Error, Result};

/// Additive logit offset for masked attention positions.
pub const MASK_FILL: Real = -1e9;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, Real),
    AddScalar(Var),
    Square(Var),
    Abs(Var),
    Silu(Var),
    Softplus(Var),
    Sum(Var),
    Mean(Var),
    MeanLast(Var),
    MatMul(Var, Var),
    Bmm(Var, Var),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Concat(Vec<Var>, usize),
    Narrow { x: Var, axis: usize, start: usize },
    ExpandLeading(Var),
    SoftmaxLast(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<Real>, rstd: Vec<Real> },
    AddChannel(Var, Var),
    MulFrame(Var, Var),
    SelectRow(Var, usize),
    Conv3d { x: Var, w: Var, b: Option<Var>, geom: Conv3dGeom },
    ConvT3d { x: Var, w: Var, b: Option<Var>, geom: Conv3dGeom },
    Upsample2d(Var, usize),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// One forward pass worth of recorded computation.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    backward_done: bool,
}

fn check_finite(data: &[Real], op: &str) -> Result<()> {
    if data.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(op.to_string()))
    }
}

fn silu(x: Real) -> Real {
    x / (1.0 + (-x).exp())
}

fn sigmoid(x: Real) -> Real {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: Real) -> Real {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn add_into(dst: &mut Option<Vec<Real>>, src: &[Real]) {
    match dst {
        Some(d) => d.iter_mut().zip(src).for_each(|(a, b)| *a += b),
        None => *dst = Some(src.to_vec()),
    }
}

fn conv_out_len(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    (stride > 0 && kernel <= padded).then(|| (padded - kernel) / stride + 1)
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last backward loss with respect to a leaf.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool, name: &str) -> Result<Var> {
        check_finite(value.data(), name)?;
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Result<Var> {
        self.push(value, Op::Leaf, true, "param")
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.push(value, Op::Leaf, false, "constant")
    }

    /// Copy of `v` cut off from the gradient flow.
    pub fn detach(&mut self, v: Var) -> Result<Var> {
        let value = self.value(v).clone();
        self.constant(value)
    }

    fn binary(&mut self, a: Var, b: Var, name: &str, f: impl Fn(Real, Real) -> Real) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        ta.expect_same_shape(tb, name)?;
        ta.zip_map(tb, f)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "add", |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        self.push(out, Op::Add(a, b), rg, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "sub", |x, y| x - y)?;
        let rg = self.rg(&[a, b]);
        self.push(out, Op::Sub(a, b), rg, "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "mul", |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        self.push(out, Op::Mul(a, b), rg, "mul")
    }

    pub fn scale(&mut self, a: Var, s: Real) -> Result<Var> {
        let out = self.value(a).scale(s);
        let rg = self.rg(&[a]);
        self.push(out, Op::Scale(a, s), rg, "scale")
    }

    pub fn add_scalar(&mut self, a: Var, s: Real) -> Result<Var> {
        let out = self.value(a).map(|x| x + s);
        let rg = self.rg(&[a]);
        self.push(out, Op::AddScalar(a), rg, "add_scalar")
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|x| x * x);
        let rg = self.rg(&[a]);
        self.push(out, Op::Square(a), rg, "square")
    }

    /// Absolute value; the subgradient at 0 is taken as 0.
    pub fn abs(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(Real::abs);
        let rg = self.rg(&[a]);
        self.push(out, Op::Abs(a), rg, "abs")
    }

    pub fn silu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(silu);
        let rg = self.rg(&[a]);
        self.push(out, Op::Silu(a), rg, "silu")
    }

    /// `log(1 + exp(x))`, computed without overflow.
    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(softplus);
        let rg = self.rg(&[a]);
        self.push(out, Op::Softplus(a), rg, "softplus")
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(&[a]);
        self.push(out, Op::Sum(a), rg, "sum")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.numel() == 0 {
            return Err(Error::dim("mean of empty tensor"));
        }
        let out = Tensor::scalar(t.mean());
        let rg = self.rg(&[a]);
        self.push(out, Op::Mean(a), rg, "mean")
    }

    /// Mean over the last axis.
    pub fn mean_last(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let n = *t.shape().last().ok_or_else(|| Error::dim("mean_last on scalar"))?;
        if n == 0 {
            return Err(Error::dim("mean_last over zero-length axis"));
        }
        let shape = &t.shape()[..t.rank() - 1];
        let data: Vec<Real> = t.data().chunks(n).map(|c| c.iter().sum::<Real>() / n as Real).collect();
        let out = Tensor::new(shape, data)?;
        let rg = self.rg(&[a]);
        self.push(out, Op::MeanLast(a), rg, "mean_last")
    }

    /// `[m×k] · [k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (sa, sb) = (ta.shape(), tb.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim(format!("matmul: {:?} x {:?}", sa, sb)));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        kernels::mm_nn(ta.data(), tb.data(), &mut out, m, k, n, false);
        let out = Tensor::new(&[m, n], out)?;
        let rg = self.rg(&[a, b]);
        self.push(out, Op::MatMul(a, b), rg, "matmul")
    }

    /// Batched `[B×m×k] · [B×k×n]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (sa, sb) = (ta.shape(), tb.shape());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(Error::dim(format!("bmm: {:?} x {:?}", sa, sb)));
        }
        let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![0.0; bs * m * n];
        for i in 0..bs {
            kernels::mm_nn(
                &ta.data()[i * m * k..(i + 1) * m * k],
                &tb.data()[i * k * n..(i + 1) * k * n],
                &mut out[i * m * n..(i + 1) * m * n],
                m,
                k,
                n,
                false,
            );
        }
        let out = Tensor::new(&[bs, m, n], out)?;
        let rg = self.rg(&[a, b]);
        self.push(out, Op::Bmm(a, b), rg, "bmm")
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).reshape(shape)?;
        let rg = self.rg(&[a]);
        self.push(out, Op::Reshape(a), rg, "reshape")
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let out = self.value(a).permute(axes)?;
        let rg = self.rg(&[a]);
        self.push(out, Op::Permute(a, axes.to_vec()), rg, "permute")
    }

    /// Concatenation along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::dim("concat of nothing"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::dim(format!("concat axis {axis} for rank {}", base.len())));
        }
        let mut total = 0;
        for p in parts {
            let s = self.shape(*p);
            if s.len() != base.len() || s.iter().enumerate().any(|(i, &e)| i != axis && e != base[i]) {
                return Err(Error::dim(format!("concat: {:?} vs {:?}", s, base)));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let t = self.value(*p);
                let chunk = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let out = Tensor::new(&shape, data)?;
        let rg = self.rg(parts);
        self.push(out, Op::Concat(parts.to_vec(), axis), rg, "concat")
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let t = self.value(a);
        let s = t.shape();
        if axis >= s.len() || start + len > s[axis] {
            return Err(Error::dim(format!("narrow {axis}:{start}+{len} of {:?}", s)));
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * s[axis] + start) * inner;
            data.extend_from_slice(&t.data()[base..base + len * inner]);
        }
        let mut shape = s.to_vec();
        shape[axis] = len;
        let out = Tensor::new(&shape, data)?;
        let rg = self.rg(&[a]);
        self.push(out, Op::Narrow { x: a, axis, start }, rg, "narrow")
    }

    /// Repeats `a` to shape `lead ++ a.shape`.
    pub fn expand_leading(&mut self, a: Var, lead: &[usize]) -> Result<Var> {
        let t = self.value(a);
        let reps: usize = lead.iter().product();
        let mut data = Vec::with_capacity(reps * t.numel());
        for _ in 0..reps {
            data.extend_from_slice(t.data());
        }
        let mut shape = lead.to_vec();
        shape.extend_from_slice(t.shape());
        let out = Tensor::new(&shape, data)?;
        let rg = self.rg(&[a]);
        self.push(out, Op::ExpandLeading(a), rg, "expand_leading")
    }

    /// Softmax over the last axis, stabilised by subtracting the row max.
    pub fn softmax_last(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let n = *t.shape().last().ok_or_else(|| Error::dim("softmax on scalar"))?;
        if n == 0 {
            return Err(Error::dim("softmax over zero-length axis"));
        }
        let mut data = t.data().to_vec();
        for row in data.chunks_mut(n) {
            let max = row.iter().fold(Real::NEG_INFINITY, |m, &x| m.max(x));
            let mut z = 0.0;
            for x in row.iter_mut() {
                *x = (*x - max).exp();
                z += *x;
            }
            row.iter_mut().for_each(|x| *x /= z);
        }
        let out = Tensor::new(t.shape(), data)?;
        let rg = self.rg(&[a]);
        self.push(out, Op::SoftmaxLast(a), rg, "softmax")
    }

    /// Layer normalisation over the last axis with affine `gain`/`bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: Real) -> Result<Var> {
        let t = self.value(x);
        let n = *t.shape().last().ok_or_else(|| Error::dim("layer_norm on scalar"))?;
        if n == 0 {
            return Err(Error::dim("layer_norm over zero-length axis"));
        }
        let (tg, tb) = (self.value(gain), self.value(bias));
        if tg.shape() != [n] || tb.shape() != [n] {
            return Err(Error::dim(format!(
                "layer_norm: gain {:?} / bias {:?} for axis {n}",
                tg.shape(),
                tb.shape()
            )));
        }
        let rows = t.numel() / n;
        let mut xhat = vec![0.0; t.numel()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; t.numel()];
        for r in 0..rows {
            let row = &t.data()[r * n..(r + 1) * n];
            let mean = row.iter().sum::<Real>() / n as Real;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<Real>() / n as Real;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for i in 0..n {
                let h = (row[i] - mean) * rs;
                xhat[r * n + i] = h;
                out[r * n + i] = h * tg.data()[i] + tb.data()[i];
            }
        }
        let out = Tensor::new(t.shape(), out)?;
        let rg = self.rg(&[x, gain, bias]);
        self.push(out, Op::LayerNorm { x, gain, bias, xhat, rstd }, rg, "layer_norm")
    }

    /// `x[N, C, ...] + v[C]`, the channel vector repeated over N and space.
    pub fn add_channel(&mut self, x: Var, v: Var) -> Result<Var> {
        let (tx, tv) = (self.value(x), self.value(v));
        let s = tx.shape();
        if s.len() < 2 || tv.shape() != [s[1]] {
            return Err(Error::dim(format!("add_channel: {:?} + {:?}", s, tv.shape())));
        }
        let inner: usize = s[2..].iter().product();
        let mut data = tx.data().to_vec();
        for (i, chunk) in data.chunks_mut(inner).enumerate() {
            let c = tv.data()[i % s[1]];
            chunk.iter_mut().for_each(|x| *x += c);
        }
        let out = Tensor::new(s, data)?;
        let rg = self.rg(&[x, v]);
        self.push(out, Op::AddChannel(x, v), rg, "add_channel")
    }

    /// `y[f, n, k] = patches[f, n, k] * frames[f, k]`: each frame token is
    /// repeated across that frame's patch axis.
    pub fn mul_frame(&mut self, patches: Var, frames: Var) -> Result<Var> {
        let (tp, tf) = (self.value(patches), self.value(frames));
        let (sp, sf) = (tp.shape(), tf.shape());
        if sp.len() != 3 || sf.len() != 2 || sp[0] != sf[0] || sp[2] != sf[1] {
            return Err(Error::dim(format!("mul_frame: {:?} * {:?}", sp, sf)));
        }
        let (nf, np, d) = (sp[0], sp[1], sp[2]);
        let mut data = tp.data().to_vec();
        for f in 0..nf {
            let fr = &tf.data()[f * d..(f + 1) * d];
            for n in 0..np {
                let base = (f * np + n) * d;
                data[base..base + d].iter_mut().zip(fr).for_each(|(x, m)| *x *= m);
            }
        }
        let out = Tensor::new(sp, data)?;
        let rg = self.rg(&[patches, frames]);
        self.push(out, Op::MulFrame(patches, frames), rg, "mul_frame")
    }

    /// Row `index` of a 2-D table.
    pub fn select_row(&mut self, table: Var, index: usize) -> Result<Var> {
        let t = self.value(table);
        let s = t.shape();
        if s.len() != 2 || index >= s[0] {
            return Err(Error::Contract(format!("row {index} of table {:?}", s)));
        }
        let out = Tensor::new(&[s[1]], t.data()[index * s[1]..(index + 1) * s[1]].to_vec())?;
        let rg = self.rg(&[table]);
        self.push(out, Op::SelectRow(table, index), rg, "select_row")
    }

    /// 3-D cross-correlation of `x[B, C, F, H, W]` with `w[O, C, kf, kh, kw]`.
    pub fn conv3d(&mut self, x: Var, w: Var, b: Option<Var>, stride: [usize; 3], pad: [usize; 3]) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 5 || sw.len() != 5 || sw[1] != sx[1] {
            return Err(Error::dim(format!("conv3d: input {:?}, kernel {:?}", sx, sw)));
        }
        if let Some(b) = b {
            if self.shape(b) != [sw[0]] {
                return Err(Error::dim(format!("conv3d bias {:?}", self.shape(b))));
            }
        }
        let mut output = [0; 3];
        for i in 0..3 {
            output[i] = conv_out_len(sx[2 + i], sw[2 + i], stride[i], pad[i]).ok_or_else(|| {
                Error::dim(format!("conv3d: kernel {:?} larger than padded input {:?}", sw, sx))
            })?;
        }
        let geom = Conv3dGeom {
            batch: sx[0],
            in_ch: sx[1],
            out_ch: sw[0],
            input: [sx[2], sx[3], sx[4]],
            kernel: [sw[2], sw[3], sw[4]],
            stride,
            pad,
            output,
        };
        let bias = b.map(|b| self.value(b).data());
        let data = kernels::conv3d_forward(self.value(x).data(), self.value(w).data(), bias, &geom);
        let out = Tensor::new(&[sx[0], sw[0], output[0], output[1], output[2]], data)?;
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.rg(&deps);
        self.push(out, Op::Conv3d { x, w, b, geom }, rg, "conv3d")
    }

    /// 2-D convolution of `x[N, C, H, W]` with `w[O, C, kh, kw]`,
    /// evaluated as a depth-1 [`Graph::conv3d`].
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 4 {
            return Err(Error::dim(format!("conv2d: input {:?}, kernel {:?}", sx, sw)));
        }
        let x5 = self.reshape(x, &[sx[0], sx[1], 1, sx[2], sx[3]])?;
        let w5 = self.reshape(w, &[sw[0], sw[1], 1, sw[2], sw[3]])?;
        let y = self.conv3d(x5, w5, b, [1, stride, stride], [0, pad, pad])?;
        let sy = self.shape(y).to_vec();
        self.reshape(y, &[sy[0], sy[1], sy[3], sy[4]])
    }

    /// Per-pixel linear map across channels: `x[B, C, H, W]`, `k[C', C]`.
    pub fn conv1x1(&mut self, x: Var, k: Var) -> Result<Var> {
        let (sx, sk) = (self.shape(x).to_vec(), self.shape(k).to_vec());
        if sx.len() != 4 || sk.len() != 2 || sk[1] != sx[1] {
            return Err(Error::dim(format!("conv1x1: input {:?}, kernel {:?}", sx, sk)));
        }
        let k4 = self.reshape(k, &[sk[0], sk[1], 1, 1])?;
        self.conv2d(x, k4, None, 1, 0)
    }

    /// Transposed 3-D convolution; `w` is `[C_in, C_out, kf, kh, kw]` and each
    /// output extent is `(in - 1) * stride + k - 2 * pad`.
    pub fn conv_transpose3d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: [usize; 3],
        pad: [usize; 3],
    ) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 5 || sw.len() != 5 || sw[0] != sx[1] {
            return Err(Error::dim(format!("conv_transpose3d: input {:?}, kernel {:?}", sx, sw)));
        }
        if let Some(b) = b {
            if self.shape(b) != [sw[1]] {
                return Err(Error::dim(format!("conv_transpose3d bias {:?}", self.shape(b))));
            }
        }
        let mut output = [0; 3];
        for i in 0..3 {
            let full = (sx[2 + i].max(1) - 1) * stride[i] + sw[2 + i];
            if sx[2 + i] == 0 || stride[i] == 0 || full <= 2 * pad[i] {
                return Err(Error::dim(format!("conv_transpose3d: empty output for {:?}", sx)));
            }
            output[i] = full - 2 * pad[i];
        }
        let geom = Conv3dGeom {
            batch: sx[0],
            in_ch: sx[1],
            out_ch: sw[1],
            input: [sx[2], sx[3], sx[4]],
            kernel: [sw[2], sw[3], sw[4]],
            stride,
            pad,
            output,
        };
        let bias = b.map(|b| self.value(b).data());
        let data = kernels::conv_transpose3d_forward(self.value(x).data(), self.value(w).data(), bias, &geom);
        let out = Tensor::new(&[sx[0], sw[1], output[0], output[1], output[2]], data)?;
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.rg(&deps);
        self.push(out, Op::ConvT3d { x, w, b, geom }, rg, "conv_transpose3d")
    }

    /// Nearest-neighbour upsampling of `x[N, C, H, W]` by an integer factor.
    pub fn upsample2d(&mut self, x: Var, factor: usize) -> Result<Var> {
        let t = self.value(x);
        let s = t.shape();
        if s.len() != 4 || factor == 0 {
            return Err(Error::dim(format!("upsample2d: {:?} by {factor}", s)));
        }
        let (h, w) = (s[2], s[3]);
        let (ho, wo) = (h * factor, w * factor);
        let planes = s[0] * s[1];
        let mut data = vec![0.0; planes * ho * wo];
        for p in 0..planes {
            for y in 0..ho {
                for xx in 0..wo {
                    data[(p * ho + y) * wo + xx] = t.data()[(p * h + y / factor) * w + xx / factor];
                }
            }
        }
        let out = Tensor::new(&[s[0], s[1], ho, wo], data)?;
        let rg = self.rg(&[x]);
        self.push(out, Op::Upsample2d(x, factor), rg, "upsample2d")
    }

    /// `x · w + b` for `x[N, in]`, `w[in, out]`, `b[out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        let n = self.shape(y)[0];
        let bb = self.expand_leading(b, &[n])?;
        self.add(y, bb)
    }

    /// Populates leaf gradients of the scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::State("backward already ran on this graph; run a new forward pass".into()));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.backward_done = true;
        let mut grads: Vec<Option<Vec<Real>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            self.grads = (0..self.nodes.len()).map(|_| None).collect();
            return Ok(());
        }
        grads[loss.0] = Some(vec![1.0]);
        let mut leaf_grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                leaf_grads[i] = Some(Tensor::new(node.value.shape(), g)?);
                continue;
            }
            self.backprop_node(i, &g, &mut grads)?;
        }
        for (i, g) in leaf_grads.iter().enumerate() {
            if let Some(g) = g {
                check_finite(g.data(), &format!("gradient of node {i}"))?;
            }
        }
        self.grads = leaf_grads;
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &[Real], grads: &mut [Option<Vec<Real>>]) -> Result<()> {
        let nodes = &self.nodes;
        let val = |v: Var| &nodes[v.0].value;
        let needs = |v: Var| nodes[v.0].requires_grad;
        let out = &nodes[i].value;
        macro_rules! acc {
            ($v:expr, $data:expr) => {{
                let v: Var = $v;
                if needs(v) {
                    let d: Vec<Real> = $data;
                    add_into(&mut grads[v.0], &d);
                }
            }};
        }
        match &nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc!(*a, g.to_vec());
                acc!(*b, g.to_vec());
            }
            Op::Sub(a, b) => {
                acc!(*a, g.to_vec());
                acc!(*b, g.iter().map(|x| -x).collect());
            }
            Op::Mul(a, b) => {
                acc!(*a, g.iter().zip(val(*b).data()).map(|(x, y)| x * y).collect());
                acc!(*b, g.iter().zip(val(*a).data()).map(|(x, y)| x * y).collect());
            }
            Op::Scale(a, s) => acc!(*a, g.iter().map(|x| x * s).collect()),
            Op::AddScalar(a) => acc!(*a, g.to_vec()),
            Op::Square(a) => acc!(*a, g.iter().zip(val(*a).data()).map(|(x, y)| 2.0 * x * y).collect()),
            Op::Abs(a) => acc!(
                *a,
                g.iter()
                    .zip(val(*a).data())
                    .map(|(x, &y)| if y > 0.0 { *x } else if y < 0.0 { -x } else { 0.0 })
                    .collect()
            ),
            Op::Silu(a) => acc!(
                *a,
                g.iter()
                    .zip(val(*a).data())
                    .map(|(x, &y)| {
                        let s = sigmoid(y);
                        x * s * (1.0 + y * (1.0 - s))
                    })
                    .collect()
            ),
            Op::Softplus(a) => acc!(*a, g.iter().zip(val(*a).data()).map(|(x, &y)| x * sigmoid(y)).collect()),
            Op::Sum(a) => acc!(*a, vec![g[0]; val(*a).numel()]),
            Op::Mean(a) => {
                let n = val(*a).numel();
                acc!(*a, vec![g[0] / n as Real; n]);
            }
            Op::MeanLast(a) => {
                let n = *val(*a).shape().last().unwrap();
                acc!(*a, g.iter().flat_map(|&x| std::iter::repeat_n(x / n as Real, n)).collect());
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (val(*a).shape(), val(*b).shape());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if needs(*a) {
                    let mut da = vec![0.0; m * k];
                    kernels::mm_nt(g, val(*b).data(), &mut da, m, n, k, false);
                    add_into(&mut grads[a.0], &da);
                }
                if needs(*b) {
                    let mut db = vec![0.0; k * n];
                    kernels::mm_tn(val(*a).data(), g, &mut db, k, m, n, false);
                    add_into(&mut grads[b.0], &db);
                }
            }
            Op::Bmm(a, b) => {
                let (sa, sb) = (val(*a).shape(), val(*b).shape());
                let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
                let (ad, bd) = (val(*a).data(), val(*b).data());
                if needs(*a) {
                    let mut da = vec![0.0; bs * m * k];
                    for j in 0..bs {
                        kernels::mm_nt(
                            &g[j * m * n..(j + 1) * m * n],
                            &bd[j * k * n..(j + 1) * k * n],
                            &mut da[j * m * k..(j + 1) * m * k],
                            m,
                            n,
                            k,
                            false,
                        );
                    }
                    add_into(&mut grads[a.0], &da);
                }
                if needs(*b) {
                    let mut db = vec![0.0; bs * k * n];
                    for j in 0..bs {
                        kernels::mm_tn(
                            &ad[j * m * k..(j + 1) * m * k],
                            &g[j * m * n..(j + 1) * m * n],
                            &mut db[j * k * n..(j + 1) * k * n],
                            k,
                            m,
                            n,
                            false,
                        );
                    }
                    add_into(&mut grads[b.0], &db);
                }
            }
            Op::Reshape(a) => acc!(*a, g.to_vec()),
            Op::Permute(a, axes) => {
                let mut inverse = vec![0; axes.len()];
                for (i, &ax) in axes.iter().enumerate() {
                    inverse[ax] = i;
                }
                let gt = Tensor::new(out.shape(), g.to_vec())?;
                acc!(*a, gt.permute(&inverse)?.into_data());
            }
            Op::Concat(parts, axis) => {
                let s = out.shape();
                let outer: usize = s[..*axis].iter().product();
                let inner: usize = s[axis + 1..].iter().product();
                let mut offset = 0;
                for p in parts {
                    let len = val(*p).shape()[*axis];
                    if needs(*p) {
                        let mut d = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let base = (o * s[*axis] + offset) * inner;
                            d.extend_from_slice(&g[base..base + len * inner]);
                        }
                        add_into(&mut grads[p.0], &d);
                    }
                    offset += len;
                }
            }
            Op::Narrow { x, axis, start } => {
                let s = val(*x).shape();
                let outer: usize = s[..*axis].iter().product();
                let inner: usize = s[axis + 1..].iter().product();
                let len = out.shape()[*axis];
                let mut d = vec![0.0; val(*x).numel()];
                for o in 0..outer {
                    let dst = (o * s[*axis] + start) * inner;
                    let src = o * len * inner;
                    d[dst..dst + len * inner].copy_from_slice(&g[src..src + len * inner]);
                }
                acc!(*x, d);
            }
            Op::ExpandLeading(a) => {
                let n = val(*a).numel();
                let mut d = vec![0.0; n];
                for chunk in g.chunks(n) {
                    d.iter_mut().zip(chunk).for_each(|(x, y)| *x += y);
                }
                acc!(*a, d);
            }
            Op::SoftmaxLast(a) => {
                let n = *out.shape().last().unwrap();
                let mut d = vec![0.0; g.len()];
                for ((dr, gr), yr) in d.chunks_mut(n).zip(g.chunks(n)).zip(out.data().chunks(n)) {
                    let dot: Real = gr.iter().zip(yr).map(|(x, y)| x * y).sum();
                    for j in 0..n {
                        dr[j] = yr[j] * (gr[j] - dot);
                    }
                }
                acc!(*a, d);
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let n = val(*gain).numel();
                let gd = val(*gain).data();
                if needs(*gain) || needs(*bias) {
                    let mut dg = vec![0.0; n];
                    let mut db = vec![0.0; n];
                    for (gr, hr) in g.chunks(n).zip(xhat.chunks(n)) {
                        for j in 0..n {
                            dg[j] += gr[j] * hr[j];
                            db[j] += gr[j];
                        }
                    }
                    acc!(*gain, dg);
                    acc!(*bias, db);
                }
                if needs(*x) {
                    let mut dx = vec![0.0; g.len()];
                    for (r, (gr, hr)) in g.chunks(n).zip(xhat.chunks(n)).enumerate() {
                        let dh: Vec<Real> = gr.iter().zip(gd).map(|(a, b)| a * b).collect();
                        let mean_dh = dh.iter().sum::<Real>() / n as Real;
                        let mean_dh_h = dh.iter().zip(hr).map(|(a, b)| a * b).sum::<Real>() / n as Real;
                        for j in 0..n {
                            dx[r * n + j] = rstd[r] * (dh[j] - mean_dh - hr[j] * mean_dh_h);
                        }
                    }
                    add_into(&mut grads[x.0], &dx);
                }
            }
            Op::AddChannel(x, v) => {
                acc!(*x, g.to_vec());
                if needs(*v) {
                    let s = out.shape();
                    let inner: usize = s[2..].iter().product();
                    let mut dv = vec![0.0; s[1]];
                    for (i, chunk) in g.chunks(inner).enumerate() {
                        dv[i % s[1]] += chunk.iter().sum::<Real>();
                    }
                    add_into(&mut grads[v.0], &dv);
                }
            }
            Op::MulFrame(p, f) => {
                let s = out.shape();
                let (nf, np, d) = (s[0], s[1], s[2]);
                let (pd, fd) = (val(*p).data(), val(*f).data());
                if needs(*p) {
                    let mut dp = g.to_vec();
                    for fi in 0..nf {
                        for n in 0..np {
                            let base = (fi * np + n) * d;
                            for k in 0..d {
                                dp[base + k] *= fd[fi * d + k];
                            }
                        }
                    }
                    add_into(&mut grads[p.0], &dp);
                }
                if needs(*f) {
                    let mut df = vec![0.0; nf * d];
                    for fi in 0..nf {
                        for n in 0..np {
                            let base = (fi * np + n) * d;
                            for k in 0..d {
                                df[fi * d + k] += g[base + k] * pd[base + k];
                            }
                        }
                    }
                    add_into(&mut grads[f.0], &df);
                }
            }
            Op::SelectRow(table, idx) => {
                if needs(*table) {
                    let s = val(*table).shape();
                    let mut d = vec![0.0; s[0] * s[1]];
                    d[idx * s[1]..(idx + 1) * s[1]].copy_from_slice(g);
                    add_into(&mut grads[table.0], &d);
                }
            }
            Op::Conv3d { x, w, b, geom } => {
                let (dx, dw) = kernels::conv3d_backward(val(*x).data(), val(*w).data(), g, geom, needs(*x), needs(*w));
                if let Some(dx) = dx {
                    add_into(&mut grads[x.0], &dx);
                }
                if let Some(dw) = dw {
                    add_into(&mut grads[w.0], &dw);
                }
                if let Some(b) = b {
                    acc!(*b, channel_sums(g, geom.batch, geom.out_ch));
                }
            }
            Op::ConvT3d { x, w, b, geom } => {
                if needs(*x) || needs(*w) {
                    let (dx, dw) = kernels::conv_transpose3d_backward(val(*x).data(), val(*w).data(), g, geom);
                    acc!(*x, dx);
                    acc!(*w, dw);
                }
                if let Some(b) = b {
                    acc!(*b, channel_sums(g, geom.batch, geom.out_ch));
                }
            }
            Op::Upsample2d(x, factor) => {
                let s = val(*x).shape();
                let (h, w) = (s[2], s[3]);
                let (ho, wo) = (h * factor, w * factor);
                let mut d = vec![0.0; val(*x).numel()];
                for p in 0..s[0] * s[1] {
                    for y in 0..ho {
                        for xx in 0..wo {
                            d[(p * h + y / factor) * w + xx / factor] += g[(p * ho + y) * wo + xx];
                        }
                    }
                }
                acc!(*x, d);
            }
        }
        Ok(())
    }
}

fn channel_sums(g: &[Real], batch: usize, channels: usize) -> Vec<Real> {
    let inner = g.len() / (batch * channels).max(1);
    let mut d = vec![0.0; channels];
    for (i, chunk) in g.chunks(inner).enumerate() {
        d[i % channels] += chunk.iter().sum::<Real>();
    }
    d
}

/// Additive attention mask: 0 where `allowed[i][j]`, [`MASK_FILL`] elsewhere.
pub fn additive_mask(allowed: &[Vec<bool>]) -> Result<Tensor> {
    let n = allowed.len();
    if allowed.iter().any(|r| r.len() != n) {
        return Err(Error::dim("attention mask must be square"));
    }
    Tensor::new(
        &[n, n],
        allowed
            .iter()
            .flat_map(|r| r.iter().map(|&ok| if ok { 0.0 } else { MASK_FILL }))
            .collect(),
    )
}

/// Lower-triangular causal pattern: position `i` may attend to `j <= i`.
pub fn causal_pattern(n: usize) -> Vec<Vec<bool>> {
    (0..n).map(|i| (0..n).map(|j| j <= i).collect()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[Real]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_examples() {
        let mut g = Graph::new();
        let a = g.constant(t(&[1, 2], &[1., 2.])).unwrap();
        let b = g.constant(t(&[2, 1], &[3., 4.])).unwrap();
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[11.]);

        let id = g.constant(t(&[3, 3], &[1., 0., 0., 0., 1., 0., 0., 0., 1.])).unwrap();
        let m = g.constant(Tensor::from_fn(&[3, 2], |i| i as Real * 1.5 - 2.0)).unwrap();
        let p = g.matmul(id, m).unwrap();
        assert_eq!(g.value(p), g.value(m));
        assert!(matches!(g.matmul(a, a), Err(Error::Dimension(_))));
    }

    #[test]
    fn softmax_examples() {
        let mut g = Graph::new();
        let x = g.constant(t(&[3], &[0., 0., 0.])).unwrap();
        let y = g.softmax_last(x).unwrap();
        for v in g.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < crate::tensor::TIGHT);
        }
        let x = g.constant(t(&[2], &[1000., 0.])).unwrap();
        let y = g.softmax_last(x).unwrap();
        assert_eq!(g.value(y).data()[0], 1.0);
        assert!(g.value(y).data()[1] < Real::MIN_POSITIVE);
    }

    #[test]
    fn layer_norm_constant_row_is_zero_and_random_rows_are_standardised() {
        let mut g = Graph::new();
        let gain = g.constant(Tensor::ones(&[4])).unwrap();
        let bias = g.constant(Tensor::zeros(&[4])).unwrap();
        let x = g.constant(Tensor::full(&[2, 4], 3.5)).unwrap();
        let y = g.layer_norm(x, gain, bias, 1e-5).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));

        let mut rng = crate::rng_from_seed(3);
        let gain = g.constant(Tensor::ones(&[64])).unwrap();
        let bias = g.constant(Tensor::zeros(&[64])).unwrap();
        let x = g.constant(Tensor::randn(&[5, 64], 2.0, &mut rng)).unwrap();
        let y = g.layer_norm(x, gain, bias, 1e-5).unwrap();
        for row in g.value(y).data().chunks(64) {
            let mean = row.iter().sum::<Real>() / 64.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<Real>() / 64.0;
            assert!(mean.abs() < 1e-6);
            // eps shrinks the variance by var/(var+eps)
            assert!((var - 1.0).abs() < 1e-5, "var {var}");
        }
        let empty = g.constant(Tensor::zeros(&[2, 0])).unwrap();
        let e = g.constant(Tensor::zeros(&[0])).unwrap();
        assert!(g.layer_norm(empty, e, e, 1e-5).is_err());
    }

    #[test]
    fn conv3d_identity_and_counting() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_fn(&[1, 1, 2, 3, 3], |i| i as Real)).unwrap();
        let k = g.constant(Tensor::ones(&[1, 1, 1, 1, 1])).unwrap();
        let y = g.conv3d(x, k, None, [1; 3], [0; 3]).unwrap();
        assert_eq!(g.value(y), g.value(x));

        let ones = g.constant(Tensor::ones(&[1, 1, 5, 5, 5])).unwrap();
        let k = g.constant(Tensor::ones(&[1, 1, 3, 3, 3])).unwrap();
        let y = g.conv3d(ones, k, None, [1; 3], [1; 3]).unwrap();
        assert_eq!(g.shape(y), &[1, 1, 5, 5, 5]);
        let centre = g.value(y).data()[(2 * 5 + 2) * 5 + 2];
        assert_eq!(centre, 27.0);
        let corner = g.value(y).data()[0];
        assert_eq!(corner, 8.0);

        let big = g.constant(Tensor::ones(&[1, 1, 5, 5, 5])).unwrap();
        let small = g.constant(Tensor::ones(&[1, 1, 2, 2, 2])).unwrap();
        assert!(matches!(g.conv3d(small, big, None, [1; 3], [0; 3]), Err(Error::Dimension(_))));
    }

    #[test]
    fn conv1x1_examples() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_fn(&[1, 2, 2, 2], |i| i as Real)).unwrap();
        let id = g.constant(t(&[2, 2], &[1., 0., 0., 1.])).unwrap();
        let y = g.conv1x1(x, id).unwrap();
        assert_eq!(g.value(y), g.value(x));
        let sum = g.constant(t(&[1, 2], &[1., 1.])).unwrap();
        let y = g.conv1x1(x, sum).unwrap();
        assert_eq!(g.shape(y), &[1, 1, 2, 2]);
        assert_eq!(g.value(y).data(), &[4., 6., 8., 10.]);
        let bad = g.constant(Tensor::ones(&[1, 3])).unwrap();
        assert!(g.conv1x1(x, bad).is_err());
    }

    #[test]
    fn conv_transpose_identity_passes_through() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_fn(&[1, 3, 4, 1, 1], |i| i as Real - 5.0)).unwrap();
        let mut w = Tensor::zeros(&[3, 3, 1, 1, 1]);
        for c in 0..3 {
            w.data_mut()[c * 3 + c] = 1.0;
        }
        let w = g.constant(w).unwrap();
        let y = g.conv_transpose3d(x, w, None, [1; 3], [0; 3]).unwrap();
        assert_eq!(g.value(y), g.value(x));
    }

    #[test]
    fn backward_simple_cases() {
        let mut g = Graph::new();
        let x = g.param(t(&[3], &[1., -2., 3.])).unwrap();
        let s = g.sum(x).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[1., 1., 1.]);
        assert!(matches!(g.backward(s), Err(Error::State(_))));

        let mut g = Graph::new();
        let x = g.param(t(&[3], &[1., -2., 3.])).unwrap();
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[2., -4., 6.]);

        let mut g = Graph::new();
        let x = g.param(t(&[3], &[1., -2., 3.])).unwrap();
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn abs_subgradient_at_zero_is_zero() {
        let mut g = Graph::new();
        let x = g.param(t(&[3], &[0., -2., 3.])).unwrap();
        let a = g.abs(x).unwrap();
        let s = g.sum(a).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[0., -1., 1.]);
    }

    #[test]
    fn non_finite_forward_is_an_error() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1], &[Real::MAX])).unwrap();
        assert!(matches!(g.scale(x, 10.0), Err(Error::NonFinite(_))));
    }

    #[test]
    fn detached_values_receive_no_gradient() {
        let mut g = Graph::new();
        let x = g.param(t(&[2], &[1., 2.])).unwrap();
        let d = g.detach(x).unwrap();
        let y = g.mul(x, d).unwrap();
        let s = g.sum(y).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[1., 2.]);
        assert!(g.grad(d).is_none());
    }
}
