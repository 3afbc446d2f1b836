//! Reverse-mode autodiff tape.
//!
//! Operations are recorded in execution order; [`Tape::backward`] consumes
//! the tape and replays it in exact reverse order, accumulating gradients
//! into every node that (transitively) requires them. All published ops
//! validate shapes at the boundary and reject non-finite outputs.

use crate::error::{Error, Result};
use crate::tensor::{broadcast_kind, Broadcast, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn index(&self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Matmul(usize, usize),
    PointwiseConv { x: usize, w: usize, b: usize },
    // 3x3 convolutions carry frozen weights: input gradients only.
    Conv3x3 { x: usize, weight: Tensor, stride: usize },
    DepthwiseConv3x3 { x: usize, weight: Tensor },
    Relu(usize),
    Exp(usize),
    Log(usize),
    Neg(usize),
    PowScalar(usize, f64),
    AddScalar(usize),
    MulScalar(usize, f64),
    Clamp { x: usize, lo: f64, hi: f64 },
    Add(usize, usize, Broadcast),
    Mul(usize, usize, Broadcast),
    SoftmaxChannels(usize),
    Reshape(usize),
    Transpose(usize),
    SumAll(usize),
    MeanAll(usize),
    SumAxis0(usize),
    SumAxis1(usize),
    ScaleRows { x: usize, s: usize },
    ScaleCols { x: usize, s: usize },
    AddBias { x: usize, b: usize },
    ConcatRows(Vec<usize>),
    UpsampleNearest { x: usize, factor: usize },
    Patchify { x: usize, patch: usize },
}

struct Node {
    value: Tensor,
    op: Op,
    needs: bool,
}

/// Ordered record of executed primitive operations.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Cache-blocked 2-D transpose of row-major `[m, n]` data.
pub(crate) fn transpose_raw(data: &[f64], m: usize, n: usize) -> Vec<f64> {
    const TILE: usize = 16;
    let mut out = vec![0.0; m * n];
    for i0 in (0..m).step_by(TILE) {
        for j0 in (0..n).step_by(TILE) {
            let imax = (i0 + TILE).min(m);
            let jmax = (j0 + TILE).min(n);
            for i in i0..imax {
                for j in j0..jmax {
                    out[j * m + i] = data[i * n + j];
                }
            }
        }
    }
    out
}

/// Copy `[C, h, w]` planes into `[C, h+2, w+2]` with a zero border.
fn pad_by_one(data: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let (ph, pw) = (h + 2, w + 2);
    let mut padded = vec![0.0; c * ph * pw];
    for ch in 0..c {
        for y in 0..h {
            let src = &data[(ch * h + y) * w..(ch * h + y + 1) * w];
            let dst = &mut padded[ch * ph * pw + (y + 1) * pw + 1..][..w];
            dst.copy_from_slice(src);
        }
    }
    padded
}

/// Row-major matrix product into a fresh buffer: `a[m,k] * b[k,n]`.
pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// Standalone matrix product on plain tensors (same kernel as the tape op).
pub fn matmul_value(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    check_matmul_shapes(a.shape(), b.shape())?;
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let n = b.shape()[1];
    Tensor::new(vec![m, n], matmul_raw(a.data(), b.data(), m, k, n))
}

fn check_matmul_shapes(a: &[usize], b: &[usize]) -> Result<()> {
    if a.len() != 2 || b.len() != 2 || a[1] != b[0] {
        return Err(Error::Shape {
            op: "matmul",
            detail: format!("cannot multiply {:?} by {:?}", a, b),
        });
    }
    Ok(())
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
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

    fn push(&mut self, value: Tensor, op: Op, needs: bool, opname: &'static str) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::Numerical {
                op: opname.to_string(),
                detail: "non-finite value in operation output".to_string(),
            });
        }
        self.nodes.push(Node { value, op, needs });
        Ok(Var(self.nodes.len() - 1))
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs
    }

    /// Insert a leaf value. The tape stores a copy; gradients are retrieved
    /// through [`Gradients`] after backward.
    pub fn leaf(&mut self, value: &Tensor, requires_grad: bool) -> Result<Var> {
        self.push(value.clone(), Op::Leaf, requires_grad, "leaf")
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        check_matmul_shapes(av.shape(), bv.shape())?;
        let (m, k) = (av.shape()[0], av.shape()[1]);
        let n = bv.shape()[1];
        let out = Tensor::new(vec![m, n], matmul_raw(av.data(), bv.data(), m, k, n))?;
        let needs = self.needs(a) || self.needs(b);
        self.push(out, Op::Matmul(a.0, b.0), needs, "matmul")
    }

    /// Per-pixel linear map on a `[C_in, H, W]` tensor with weights
    /// `[C_out, C_in]` and bias `[C_out]`.
    pub fn pointwise_conv(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xv, wv, bv) = (
            &self.nodes[x.0].value,
            &self.nodes[w.0].value,
            &self.nodes[b.0].value,
        );
        if xv.rank() != 3 || wv.rank() != 2 || wv.shape()[1] != xv.shape()[0] {
            return Err(Error::Shape {
                op: "pointwise_conv",
                detail: format!(
                    "input {:?} incompatible with weights {:?}",
                    xv.shape(),
                    wv.shape()
                ),
            });
        }
        let (ci, h, wd) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        let co = wv.shape()[0];
        if bv.shape() != [co] {
            return Err(Error::Shape {
                op: "pointwise_conv",
                detail: format!("bias {:?} vs C_out {}", bv.shape(), co),
            });
        }
        let pixels = h * wd;
        let mut out = vec![0.0; co * pixels];
        for o in 0..co {
            let orow = &mut out[o * pixels..(o + 1) * pixels];
            orow.fill(bv.data()[o]);
            for i in 0..ci {
                let wv_oi = wv.data()[o * ci + i];
                if wv_oi == 0.0 {
                    continue;
                }
                let xrow = &xv.data()[i * pixels..(i + 1) * pixels];
                for (ov, &xvp) in orow.iter_mut().zip(xrow) {
                    *ov += wv_oi * xvp;
                }
            }
        }
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        self.push(
            Tensor::new(vec![co, h, wd], out)?,
            Op::PointwiseConv { x: x.0, w: w.0, b: b.0 },
            needs,
            "pointwise_conv",
        )
    }

    /// 3x3 convolution with zero padding 1 and the given stride. Weights
    /// `[C_out, C_in, 3, 3]` and bias `[C_out]` are frozen constants:
    /// gradients flow to the input only.
    pub fn conv3x3(&mut self, x: Var, weight: &Tensor, bias: &Tensor, stride: usize) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        if xv.rank() != 3 || weight.rank() != 4 || weight.shape()[2] != 3 || weight.shape()[3] != 3 {
            return Err(Error::Shape {
                op: "conv3x3",
                detail: format!("input {:?}, weight {:?}", xv.shape(), weight.shape()),
            });
        }
        let (ci, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        let co = weight.shape()[0];
        if weight.shape()[1] != ci || bias.shape() != [co] || stride == 0 {
            return Err(Error::Shape {
                op: "conv3x3",
                detail: format!(
                    "weight {:?} / bias {:?} / stride {} vs input {:?}",
                    weight.shape(),
                    bias.shape(),
                    stride,
                    xv.shape()
                ),
            });
        }
        let oh = (h - 1) / stride + 1;
        let ow = (w - 1) / stride + 1;
        let padded = pad_by_one(xv.data(), ci, h, w);
        let (ph, pw) = (h + 2, w + 2);
        let mut out = vec![0.0; co * oh * ow];
        for o in 0..co {
            let obase = o * oh * ow;
            out[obase..obase + oh * ow].fill(bias.data()[o]);
            for i in 0..ci {
                for ky in 0..3 {
                    for kx in 0..3 {
                        let wv = weight.data()[((o * ci + i) * 3 + ky) * 3 + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        for oy in 0..oh {
                            let src = &padded[i * ph * pw + (oy * stride + ky) * pw + kx..];
                            let dst = &mut out[obase + oy * ow..obase + (oy + 1) * ow];
                            if stride == 1 {
                                for (d, x) in dst.iter_mut().zip(&src[..ow]) {
                                    *d += wv * x;
                                }
                            } else {
                                for (ox, d) in dst.iter_mut().enumerate() {
                                    *d += wv * src[ox * stride];
                                }
                            }
                        }
                    }
                }
            }
        }
        let needs = self.needs(x);
        self.push(
            Tensor::new(vec![co, oh, ow], out)?,
            Op::Conv3x3 { x: x.0, weight: weight.clone(), stride },
            needs,
            "conv3x3",
        )
    }

    /// Depthwise 3x3 convolution, stride 1, zero padding 1, frozen weights
    /// `[C, 3, 3]`. Gradients flow to the input only.
    pub fn depthwise3x3(&mut self, x: Var, weight: &Tensor) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        if xv.rank() != 3 || weight.rank() != 3 || weight.shape()[0] != xv.shape()[0]
            || weight.shape()[1] != 3 || weight.shape()[2] != 3
        {
            return Err(Error::Shape {
                op: "depthwise3x3",
                detail: format!("input {:?}, weight {:?}", xv.shape(), weight.shape()),
            });
        }
        let (c, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        let padded = pad_by_one(xv.data(), c, h, w);
        let (ph, pw) = (h + 2, w + 2);
        let mut out = vec![0.0; c * h * w];
        for ch in 0..c {
            let obase = ch * h * w;
            for ky in 0..3 {
                for kx in 0..3 {
                    let wv = weight.data()[(ch * 3 + ky) * 3 + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    for oy in 0..h {
                        let src = &padded[ch * ph * pw + (oy + ky) * pw + kx..];
                        let dst = &mut out[obase + oy * w..obase + (oy + 1) * w];
                        for (d, x) in dst.iter_mut().zip(&src[..w]) {
                            *d += wv * x;
                        }
                    }
                }
            }
        }
        let needs = self.needs(x);
        self.push(
            Tensor::new(vec![c, h, w], out)?,
            Op::DepthwiseConv3x3 { x: x.0, weight: weight.clone() },
            needs,
            "depthwise3x3",
        )
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        let out = Tensor::new(
            xv.shape().to_vec(),
            xv.data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect(),
        )?;
        let needs = self.needs(x);
        self.push(out, Op::Relu(x.0), needs, "relu")
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        let out = Tensor::new(xv.shape().to_vec(), xv.data().iter().map(|v| v.exp()).collect())?;
        let needs = self.needs(x);
        self.push(out, Op::Exp(x.0), needs, "exp")
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        if let Some(bad) = xv.data().iter().find(|v| **v <= 0.0) {
            return Err(Error::Domain {
                op: "log",
                detail: format!("log requires strictly positive inputs, got {}", bad),
            });
        }
        let out = Tensor::new(xv.shape().to_vec(), xv.data().iter().map(|v| v.ln()).collect())?;
        let needs = self.needs(x);
        self.push(out, Op::Log(x.0), needs, "log")
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        let out = Tensor::new(xv.shape().to_vec(), xv.data().iter().map(|v| -v).collect())?;
        let needs = self.needs(x);
        self.push(out, Op::Neg(x.0), needs, "neg")
    }

    /// Elementwise power with a constant exponent.
    pub fn pow(&mut self, x: Var, k: f64) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        let fractional = k.fract() != 0.0;
        for &v in xv.data() {
            if fractional && v < 0.0 {
                return Err(Error::Domain {
                    op: "pow",
                    detail: format!("negative base {} with fractional exponent {}", v, k),
                });
            }
            if k < 0.0 && v == 0.0 {
                return Err(Error::Domain {
                    op: "pow",
                    detail: format!("zero base with negative exponent {}", k),
                });
            }
        }
        let out = Tensor::new(xv.shape().to_vec(), xv.data().iter().map(|v| v.powf(k)).collect())?;
        let needs = self.needs(x);
        self.push(out, Op::PowScalar(x.0, k), needs, "pow")
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        let out = Tensor::new(xv.shape().to_vec(), xv.data().iter().map(|v| v + c).collect())?;
        let needs = self.needs(x);
        self.push(out, Op::AddScalar(x.0), needs, "add_scalar")
    }

    pub fn mul_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        let out = Tensor::new(xv.shape().to_vec(), xv.data().iter().map(|v| v * c).collect())?;
        let needs = self.needs(x);
        self.push(out, Op::MulScalar(x.0, c), needs, "mul_scalar")
    }

    /// Clamp to `[lo, hi]`; gradient passes through the unclamped region.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        if lo > hi {
            return Err(Error::Contract {
                op: "clamp",
                detail: format!("lo {} > hi {}", lo, hi),
            });
        }
        let xv = &self.nodes[x.0].value;
        let out = Tensor::new(
            xv.shape().to_vec(),
            xv.data().iter().map(|v| v.clamp(lo, hi)).collect(),
        )?;
        let needs = self.needs(x);
        self.push(out, Op::Clamp { x: x.0, lo, hi }, needs, "clamp")
    }

    /// Elementwise addition; equal shapes or scalar (single element) on one side.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let bk = broadcast_kind(av.shape(), bv.shape(), av.numel(), bv.numel()).ok_or_else(|| {
            Error::Shape {
                op: "add",
                detail: format!("shapes {:?} and {:?}", av.shape(), bv.shape()),
            }
        })?;
        let out = match bk {
            Broadcast::Equal => Tensor::new(
                av.shape().to_vec(),
                av.data().iter().zip(bv.data()).map(|(x, y)| x + y).collect(),
            )?,
            Broadcast::ScalarRhs => {
                let s = bv.data()[0];
                Tensor::new(av.shape().to_vec(), av.data().iter().map(|x| x + s).collect())?
            }
            Broadcast::ScalarLhs => {
                let s = av.data()[0];
                Tensor::new(bv.shape().to_vec(), bv.data().iter().map(|x| s + x).collect())?
            }
        };
        let needs = self.needs(a) || self.needs(b);
        self.push(out, Op::Add(a.0, b.0, bk), needs, "add")
    }

    /// Elementwise product; equal shapes or scalar on one side.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let bk = broadcast_kind(av.shape(), bv.shape(), av.numel(), bv.numel()).ok_or_else(|| {
            Error::Shape {
                op: "mul",
                detail: format!("shapes {:?} and {:?}", av.shape(), bv.shape()),
            }
        })?;
        let out = match bk {
            Broadcast::Equal => Tensor::new(
                av.shape().to_vec(),
                av.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect(),
            )?,
            Broadcast::ScalarRhs => {
                let s = bv.data()[0];
                Tensor::new(av.shape().to_vec(), av.data().iter().map(|x| x * s).collect())?
            }
            Broadcast::ScalarLhs => {
                let s = av.data()[0];
                Tensor::new(bv.shape().to_vec(), bv.data().iter().map(|x| s * x).collect())?
            }
        };
        let needs = self.needs(a) || self.needs(b);
        self.push(out, Op::Mul(a.0, b.0, bk), needs, "mul")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let nb = self.neg(b)?;
        self.add(a, nb)
    }

    /// Softmax over the leading (channel) axis of a rank-2 `[C, N]` or
    /// rank-3 `[C, H, W]` tensor, computed with max subtraction.
    pub fn softmax_channels(&mut self, x: Var) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        if xv.rank() != 2 && xv.rank() != 3 {
            return Err(Error::Shape {
                op: "softmax_channels",
                detail: format!("expected rank 2 or 3, got {:?}", xv.shape()),
            });
        }
        let c = xv.shape()[0];
        let cols = xv.numel() / c;
        let mut out = vec![0.0; xv.numel()];
        for j in 0..cols {
            let mut maxv = f64::NEG_INFINITY;
            for ch in 0..c {
                maxv = maxv.max(xv.data()[ch * cols + j]);
            }
            let mut sum = 0.0;
            for ch in 0..c {
                let e = (xv.data()[ch * cols + j] - maxv).exp();
                out[ch * cols + j] = e;
                sum += e;
            }
            for ch in 0..c {
                out[ch * cols + j] /= sum;
            }
        }
        let needs = self.needs(x);
        self.push(
            Tensor::new(xv.shape().to_vec(), out)?,
            Op::SoftmaxChannels(x.0),
            needs,
            "softmax_channels",
        )
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        let numel: usize = shape.iter().product();
        if numel != xv.numel() {
            return Err(Error::Shape {
                op: "reshape",
                detail: format!("cannot reshape {:?} into {:?}", xv.shape(), shape),
            });
        }
        let out = Tensor::new(shape, xv.data().to_vec())?;
        let needs = self.needs(x);
        self.push(out, Op::Reshape(x.0), needs, "reshape")
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        if xv.rank() != 2 {
            return Err(Error::Shape {
                op: "transpose",
                detail: format!("expected rank 2, got {:?}", xv.shape()),
            });
        }
        let (m, n) = (xv.shape()[0], xv.shape()[1]);
        let out = transpose_raw(xv.data(), m, n);
        let needs = self.needs(x);
        self.push(Tensor::new(vec![n, m], out)?, Op::Transpose(x.0), needs, "transpose")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        let s: f64 = xv.data().iter().sum();
        let needs = self.needs(x);
        self.push(Tensor::scalar(s), Op::SumAll(x.0), needs, "sum")
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        let s: f64 = xv.data().iter().sum::<f64>() / xv.numel() as f64;
        let needs = self.needs(x);
        self.push(Tensor::scalar(s), Op::MeanAll(x.0), needs, "mean")
    }

    /// Column sums of a `[m, n]` matrix, result `[1, n]`.
    pub fn sum_axis0(&mut self, x: Var) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        if xv.rank() != 2 {
            return Err(Error::Shape {
                op: "sum_axis0",
                detail: format!("expected rank 2, got {:?}", xv.shape()),
            });
        }
        let (m, n) = (xv.shape()[0], xv.shape()[1]);
        let mut out = vec![0.0; n];
        for i in 0..m {
            for j in 0..n {
                out[j] += xv.data()[i * n + j];
            }
        }
        let needs = self.needs(x);
        self.push(Tensor::new(vec![1, n], out)?, Op::SumAxis0(x.0), needs, "sum_axis0")
    }

    /// Row sums of a `[m, n]` matrix, result `[m, 1]`.
    pub fn sum_axis1(&mut self, x: Var) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        if xv.rank() != 2 {
            return Err(Error::Shape {
                op: "sum_axis1",
                detail: format!("expected rank 2, got {:?}", xv.shape()),
            });
        }
        let (m, n) = (xv.shape()[0], xv.shape()[1]);
        let mut out = vec![0.0; m];
        for i in 0..m {
            out[i] = xv.data()[i * n..(i + 1) * n].iter().sum();
        }
        let needs = self.needs(x);
        self.push(Tensor::new(vec![m, 1], out)?, Op::SumAxis1(x.0), needs, "sum_axis1")
    }

    /// Multiply row `i` of `x[m,n]` by `s[i]` where `s` is `[m, 1]`.
    pub fn scale_rows(&mut self, x: Var, s: Var) -> Result<Var> {
        let (xv, sv) = (&self.nodes[x.0].value, &self.nodes[s.0].value);
        if xv.rank() != 2 || sv.shape() != [xv.shape()[0], 1] {
            return Err(Error::Shape {
                op: "scale_rows",
                detail: format!("x {:?}, s {:?}", xv.shape(), sv.shape()),
            });
        }
        let (m, n) = (xv.shape()[0], xv.shape()[1]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let si = sv.data()[i];
            for j in 0..n {
                out[i * n + j] = xv.data()[i * n + j] * si;
            }
        }
        let needs = self.needs(x) || self.needs(s);
        self.push(
            Tensor::new(vec![m, n], out)?,
            Op::ScaleRows { x: x.0, s: s.0 },
            needs,
            "scale_rows",
        )
    }

    /// Multiply column `j` of `x[m,n]` by `s[j]` where `s` is `[1, n]`.
    pub fn scale_cols(&mut self, x: Var, s: Var) -> Result<Var> {
        let (xv, sv) = (&self.nodes[x.0].value, &self.nodes[s.0].value);
        if xv.rank() != 2 || sv.shape() != [1, xv.shape()[1]] {
            return Err(Error::Shape {
                op: "scale_cols",
                detail: format!("x {:?}, s {:?}", xv.shape(), sv.shape()),
            });
        }
        let (m, n) = (xv.shape()[0], xv.shape()[1]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[i * n + j] = xv.data()[i * n + j] * sv.data()[j];
            }
        }
        let needs = self.needs(x) || self.needs(s);
        self.push(
            Tensor::new(vec![m, n], out)?,
            Op::ScaleCols { x: x.0, s: s.0 },
            needs,
            "scale_cols",
        )
    }

    /// Add a `[1, n]` row vector to every row of `x[m,n]`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xv, bv) = (&self.nodes[x.0].value, &self.nodes[b.0].value);
        if xv.rank() != 2 || bv.shape() != [1, xv.shape()[1]] {
            return Err(Error::Shape {
                op: "add_bias",
                detail: format!("x {:?}, b {:?}", xv.shape(), bv.shape()),
            });
        }
        let (m, n) = (xv.shape()[0], xv.shape()[1]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[i * n + j] = xv.data()[i * n + j] + bv.data()[j];
            }
        }
        let needs = self.needs(x) || self.needs(b);
        self.push(
            Tensor::new(vec![m, n], out)?,
            Op::AddBias { x: x.0, b: b.0 },
            needs,
            "add_bias",
        )
    }

    /// Stack rank-2 parts with equal column counts along axis 0.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Contract {
                op: "concat_rows",
                detail: "no parts to concatenate".to_string(),
            });
        }
        let n = {
            let first = &self.nodes[parts[0].0].value;
            if first.rank() != 2 {
                return Err(Error::Shape {
                    op: "concat_rows",
                    detail: format!("expected rank 2 parts, got {:?}", first.shape()),
                });
            }
            first.shape()[1]
        };
        let mut rows = 0;
        for p in parts {
            let pv = &self.nodes[p.0].value;
            if pv.rank() != 2 || pv.shape()[1] != n {
                return Err(Error::Shape {
                    op: "concat_rows",
                    detail: format!("part {:?} vs column count {}", pv.shape(), n),
                });
            }
            rows += pv.shape()[0];
        }
        let mut out = Vec::with_capacity(rows * n);
        for p in parts {
            out.extend_from_slice(self.nodes[p.0].value.data());
        }
        let needs = parts.iter().any(|p| self.needs(*p));
        self.push(
            Tensor::new(vec![rows, n], out)?,
            Op::ConcatRows(parts.iter().map(|p| p.0).collect()),
            needs,
            "concat_rows",
        )
    }

    /// Nearest-neighbor upsampling of `[C, h, w]` by an integer factor.
    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        if xv.rank() != 3 || factor == 0 {
            return Err(Error::Shape {
                op: "upsample_nearest",
                detail: format!("input {:?}, factor {}", xv.shape(), factor),
            });
        }
        let (c, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        let (oh, ow) = (h * factor, w * factor);
        let mut out = vec![0.0; c * oh * ow];
        for ch in 0..c {
            for y in 0..oh {
                for xx in 0..ow {
                    out[(ch * oh + y) * ow + xx] =
                        xv.data()[(ch * h + y / factor) * w + xx / factor];
                }
            }
        }
        let needs = self.needs(x);
        self.push(
            Tensor::new(vec![c, oh, ow], out)?,
            Op::UpsampleNearest { x: x.0, factor },
            needs,
            "upsample_nearest",
        )
    }

    /// Rearrange `[C, H, W]` into non-overlapping `patch x patch` tiles:
    /// result `[T, C*patch*patch]` with `T = (H/patch) * (W/patch)`.
    pub fn patchify(&mut self, x: Var, patch: usize) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        if xv.rank() != 3 || patch == 0 || xv.shape()[1] % patch != 0 || xv.shape()[2] % patch != 0 {
            return Err(Error::Shape {
                op: "patchify",
                detail: format!("input {:?} not divisible by patch {}", xv.shape(), patch),
            });
        }
        let (c, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        let (th, tw) = (h / patch, w / patch);
        let t = th * tw;
        let cols = c * patch * patch;
        let mut out = vec![0.0; t * cols];
        for ty in 0..th {
            for tx in 0..tw {
                let row = ty * tw + tx;
                for ch in 0..c {
                    for py in 0..patch {
                        for px in 0..patch {
                            out[row * cols + (ch * patch + py) * patch + px] =
                                xv.data()[(ch * h + ty * patch + py) * w + tx * patch + px];
                        }
                    }
                }
            }
        }
        let needs = self.needs(x);
        self.push(
            Tensor::new(vec![t, cols], out)?,
            Op::Patchify { x: x.0, patch },
            needs,
            "patchify",
        )
    }

    /// Consume the tape, computing gradients of the scalar `loss` with
    /// respect to every node that requires them, in exact reverse
    /// execution order.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        if self.nodes.is_empty() {
            return Err(Error::Contract {
                op: "backward",
                detail: "tape is empty".to_string(),
            });
        }
        let lv = &self.nodes[loss.0].value;
        if lv.numel() != 1 {
            return Err(Error::Contract {
                op: "backward",
                detail: format!("loss must be scalar, got shape {:?}", lv.shape()),
            });
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..n).rev() {
            if !self.nodes[i].needs {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.accumulate(i, &g, &mut grads);
            // Keep gradients for leaves so callers can retrieve them.
            if matches!(self.nodes[i].op, Op::Leaf) {
                grads[i] = Some(g);
            }
        }

        let shapes = self.nodes.iter().map(|nd| nd.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn grad_buf<'a>(
        &self,
        grads: &'a mut Vec<Option<Vec<f64>>>,
        idx: usize,
    ) -> Option<&'a mut Vec<f64>> {
        if !self.nodes[idx].needs {
            return None;
        }
        let numel = self.nodes[idx].value.numel();
        Some(grads[idx].get_or_insert_with(|| vec![0.0; numel]))
    }

    fn accumulate(&self, i: usize, g: &[f64], grads: &mut Vec<Option<Vec<f64>>>) {
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Matmul(a, b) => {
                let (m, k) = {
                    let s = self.nodes[*a].value.shape();
                    (s[0], s[1])
                };
                let n = self.nodes[*b].value.shape()[1];
                if self.nodes[*a].needs {
                    // da[i,p] += sum_j g[i,j] * b[p,j]; materialize b^T so the
                    // inner accumulation runs lane-parallel over p.
                    let bdata = self.nodes[*b].value.data();
                    let mut bt = vec![0.0; n * k];
                    for p in 0..k {
                        for j in 0..n {
                            bt[j * k + p] = bdata[p * n + j];
                        }
                    }
                    if let Some(da) = self.grad_buf(grads, *a) {
                        for ii in 0..m {
                            let grow = &g[ii * n..(ii + 1) * n];
                            let darow = &mut da[ii * k..(ii + 1) * k];
                            for (j, &gv) in grow.iter().enumerate() {
                                if gv == 0.0 {
                                    continue;
                                }
                                let btrow = &bt[j * k..(j + 1) * k];
                                for (dv, bv) in darow.iter_mut().zip(btrow) {
                                    *dv += gv * bv;
                                }
                            }
                        }
                    }
                }
                if self.nodes[*b].needs {
                    let adata = self.nodes[*a].value.data();
                    if let Some(db) = self.grad_buf(grads, *b) {
                        // db[p,j] += sum_i a[i,p] * g[i,j]
                        for ii in 0..m {
                            let grow = &g[ii * n..(ii + 1) * n];
                            for p in 0..k {
                                let av = adata[ii * k + p];
                                if av == 0.0 {
                                    continue;
                                }
                                let dbrow = &mut db[p * n..(p + 1) * n];
                                for (dv, gv) in dbrow.iter_mut().zip(grow) {
                                    *dv += av * gv;
                                }
                            }
                        }
                    }
                }
            }
            Op::PointwiseConv { x, w, b } => {
                let (ci, h, wd) = {
                    let s = self.nodes[*x].value.shape();
                    (s[0], s[1], s[2])
                };
                let co = self.nodes[*w].value.shape()[0];
                let pixels = h * wd;
                let xdata = self.nodes[*x].value.data().to_vec();
                let wdata = self.nodes[*w].value.data().to_vec();
                if let Some(dx) = self.grad_buf(grads, *x) {
                    for o in 0..co {
                        let grow = &g[o * pixels..(o + 1) * pixels];
                        for iin in 0..ci {
                            let wv = wdata[o * ci + iin];
                            if wv == 0.0 {
                                continue;
                            }
                            let dxrow = &mut dx[iin * pixels..(iin + 1) * pixels];
                            for (dv, gv) in dxrow.iter_mut().zip(grow) {
                                *dv += wv * gv;
                            }
                        }
                    }
                }
                if let Some(dw) = self.grad_buf(grads, *w) {
                    for o in 0..co {
                        let grow = &g[o * pixels..(o + 1) * pixels];
                        for iin in 0..ci {
                            let xrow = &xdata[iin * pixels..(iin + 1) * pixels];
                            let mut acc = 0.0;
                            for (gv, xv) in grow.iter().zip(xrow) {
                                acc += gv * xv;
                            }
                            dw[o * ci + iin] += acc;
                        }
                    }
                }
                if let Some(db) = self.grad_buf(grads, *b) {
                    for o in 0..co {
                        db[o] += g[o * pixels..(o + 1) * pixels].iter().sum::<f64>();
                    }
                }
            }
            Op::Conv3x3 { x, weight, stride, .. } => {
                let (ci, h, w) = {
                    let s = self.nodes[*x].value.shape();
                    (s[0], s[1], s[2])
                };
                let co = weight.shape()[0];
                let oh = (h - 1) / stride + 1;
                let ow = (w - 1) / stride + 1;
                let (ph, pw) = (h + 2, w + 2);
                if self.nodes[*x].needs {
                    // Accumulate into a padded buffer, then crop the border.
                    let mut dpad = vec![0.0; ci * ph * pw];
                    for o in 0..co {
                        for iin in 0..ci {
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    let wv = weight.data()[((o * ci + iin) * 3 + ky) * 3 + kx];
                                    if wv == 0.0 {
                                        continue;
                                    }
                                    for oy in 0..oh {
                                        let grow = &g[(o * oh + oy) * ow..(o * oh + oy + 1) * ow];
                                        let dst = &mut dpad
                                            [iin * ph * pw + (oy * stride + ky) * pw + kx..];
                                        if *stride == 1 {
                                            for (d, gv) in dst[..ow].iter_mut().zip(grow) {
                                                *d += wv * gv;
                                            }
                                        } else {
                                            for (ox, gv) in grow.iter().enumerate() {
                                                dst[ox * stride] += wv * gv;
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                    if let Some(dx) = self.grad_buf(grads, *x) {
                        for iin in 0..ci {
                            for y in 0..h {
                                let src = &dpad[iin * ph * pw + (y + 1) * pw + 1..][..w];
                                let dst = &mut dx[(iin * h + y) * w..(iin * h + y + 1) * w];
                                for (d, v) in dst.iter_mut().zip(src) {
                                    *d += v;
                                }
                            }
                        }
                    }
                }
            }
            Op::DepthwiseConv3x3 { x, weight } => {
                let (c, h, w) = {
                    let s = self.nodes[*x].value.shape();
                    (s[0], s[1], s[2])
                };
                let (ph, pw) = (h + 2, w + 2);
                if self.nodes[*x].needs {
                    let mut dpad = vec![0.0; c * ph * pw];
                    for ch in 0..c {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let wv = weight.data()[(ch * 3 + ky) * 3 + kx];
                                if wv == 0.0 {
                                    continue;
                                }
                                for oy in 0..h {
                                    let grow = &g[(ch * h + oy) * w..(ch * h + oy + 1) * w];
                                    let dst = &mut dpad[ch * ph * pw + (oy + ky) * pw + kx..];
                                    for (d, gv) in dst[..w].iter_mut().zip(grow) {
                                        *d += wv * gv;
                                    }
                                }
                            }
                        }
                    }
                    if let Some(dx) = self.grad_buf(grads, *x) {
                        for ch in 0..c {
                            for y in 0..h {
                                let src = &dpad[ch * ph * pw + (y + 1) * pw + 1..][..w];
                                let dst = &mut dx[(ch * h + y) * w..(ch * h + y + 1) * w];
                                for (d, v) in dst.iter_mut().zip(src) {
                                    *d += v;
                                }
                            }
                        }
                    }
                }
            }
            Op::Relu(x) => {
                let xd = self.nodes[*x].value.data();
                if let Some(dx) = self.grad_buf(grads, *x) {
                    for (idx, gv) in g.iter().enumerate() {
                        if xd[idx] > 0.0 {
                            dx[idx] += gv;
                        }
                    }
                }
            }
            Op::Exp(x) => {
                let od = self.nodes[i].value.data();
                if let Some(dx) = self.grad_buf(grads, *x) {
                    for (idx, gv) in g.iter().enumerate() {
                        dx[idx] += gv * od[idx];
                    }
                }
            }
            Op::Log(x) => {
                let xd = self.nodes[*x].value.data();
                if let Some(dx) = self.grad_buf(grads, *x) {
                    for (idx, gv) in g.iter().enumerate() {
                        dx[idx] += gv / xd[idx];
                    }
                }
            }
            Op::Neg(x) => {
                if let Some(dx) = self.grad_buf(grads, *x) {
                    for (idx, gv) in g.iter().enumerate() {
                        dx[idx] -= gv;
                    }
                }
            }
            Op::PowScalar(x, k) => {
                let xd = self.nodes[*x].value.data();
                let k = *k;
                if let Some(dx) = self.grad_buf(grads, *x) {
                    for (idx, gv) in g.iter().enumerate() {
                        dx[idx] += gv * k * xd[idx].powf(k - 1.0);
                    }
                }
            }
            Op::AddScalar(x) => {
                if let Some(dx) = self.grad_buf(grads, *x) {
                    for (idx, gv) in g.iter().enumerate() {
                        dx[idx] += gv;
                    }
                }
            }
            Op::MulScalar(x, c) => {
                let c = *c;
                if let Some(dx) = self.grad_buf(grads, *x) {
                    for (idx, gv) in g.iter().enumerate() {
                        dx[idx] += gv * c;
                    }
                }
            }
            Op::Clamp { x, lo, hi } => {
                let xd = self.nodes[*x].value.data();
                let (lo, hi) = (*lo, *hi);
                if let Some(dx) = self.grad_buf(grads, *x) {
                    for (idx, gv) in g.iter().enumerate() {
                        if xd[idx] >= lo && xd[idx] <= hi {
                            dx[idx] += gv;
                        }
                    }
                }
            }
            Op::Add(a, b, bk) => {
                let bk = *bk;
                if let Some(da) = self.grad_buf(grads, *a) {
                    match bk {
                        Broadcast::ScalarLhs => da[0] += g.iter().sum::<f64>(),
                        _ => {
                            for (idx, gv) in g.iter().enumerate() {
                                da[idx] += gv;
                            }
                        }
                    }
                }
                if let Some(db) = self.grad_buf(grads, *b) {
                    match bk {
                        Broadcast::ScalarRhs => db[0] += g.iter().sum::<f64>(),
                        _ => {
                            for (idx, gv) in g.iter().enumerate() {
                                db[idx] += gv;
                            }
                        }
                    }
                }
            }
            Op::Mul(a, b, bk) => {
                let bk = *bk;
                let ad = self.nodes[*a].value.data();
                let bd = self.nodes[*b].value.data();
                if let Some(da) = self.grad_buf(grads, *a) {
                    match bk {
                        Broadcast::Equal => {
                            for (idx, gv) in g.iter().enumerate() {
                                da[idx] += gv * bd[idx];
                            }
                        }
                        Broadcast::ScalarRhs => {
                            for (idx, gv) in g.iter().enumerate() {
                                da[idx] += gv * bd[0];
                            }
                        }
                        Broadcast::ScalarLhs => {
                            let mut acc = 0.0;
                            for (idx, gv) in g.iter().enumerate() {
                                acc += gv * bd[idx];
                            }
                            da[0] += acc;
                        }
                    }
                }
                if let Some(db) = self.grad_buf(grads, *b) {
                    match bk {
                        Broadcast::Equal => {
                            for (idx, gv) in g.iter().enumerate() {
                                db[idx] += gv * ad[idx];
                            }
                        }
                        Broadcast::ScalarLhs => {
                            for (idx, gv) in g.iter().enumerate() {
                                db[idx] += gv * ad[0];
                            }
                        }
                        Broadcast::ScalarRhs => {
                            let mut acc = 0.0;
                            for (idx, gv) in g.iter().enumerate() {
                                acc += gv * ad[idx];
                            }
                            db[0] += acc;
                        }
                    }
                }
            }
            Op::SoftmaxChannels(x) => {
                let out = self.nodes[i].value.data();
                let c = self.nodes[i].value.shape()[0];
                let cols = out.len() / c;
                if let Some(dx) = self.grad_buf(grads, *x) {
                    for j in 0..cols {
                        let mut dot = 0.0;
                        for ch in 0..c {
                            dot += g[ch * cols + j] * out[ch * cols + j];
                        }
                        for ch in 0..c {
                            dx[ch * cols + j] += out[ch * cols + j] * (g[ch * cols + j] - dot);
                        }
                    }
                }
            }
            Op::Reshape(x) => {
                if let Some(dx) = self.grad_buf(grads, *x) {
                    for (idx, gv) in g.iter().enumerate() {
                        dx[idx] += gv;
                    }
                }
            }
            Op::Transpose(x) => {
                let (n, m) = {
                    let s = self.nodes[i].value.shape();
                    (s[0], s[1])
                };
                if let Some(dx) = self.grad_buf(grads, *x) {
                    // output is [n, m]; input was [m, n]: dx += g^T
                    let gt = transpose_raw(g, n, m);
                    for (dv, gv) in dx.iter_mut().zip(&gt) {
                        *dv += gv;
                    }
                }
            }
            Op::SumAll(x) => {
                if let Some(dx) = self.grad_buf(grads, *x) {
                    for dv in dx.iter_mut() {
                        *dv += g[0];
                    }
                }
            }
            Op::MeanAll(x) => {
                let numel = self.nodes[*x].value.numel() as f64;
                if let Some(dx) = self.grad_buf(grads, *x) {
                    let gv = g[0] / numel;
                    for dv in dx.iter_mut() {
                        *dv += gv;
                    }
                }
            }
            Op::SumAxis0(x) => {
                let (m, n) = {
                    let s = self.nodes[*x].value.shape();
                    (s[0], s[1])
                };
                if let Some(dx) = self.grad_buf(grads, *x) {
                    for ii in 0..m {
                        for j in 0..n {
                            dx[ii * n + j] += g[j];
                        }
                    }
                }
            }
            Op::SumAxis1(x) => {
                let (m, n) = {
                    let s = self.nodes[*x].value.shape();
                    (s[0], s[1])
                };
                if let Some(dx) = self.grad_buf(grads, *x) {
                    for ii in 0..m {
                        for j in 0..n {
                            dx[ii * n + j] += g[ii];
                        }
                    }
                }
            }
            Op::ScaleRows { x, s } => {
                let (m, n) = {
                    let sh = self.nodes[*x].value.shape();
                    (sh[0], sh[1])
                };
                let xd = self.nodes[*x].value.data();
                let sd = self.nodes[*s].value.data();
                if let Some(dx) = self.grad_buf(grads, *x) {
                    for ii in 0..m {
                        for j in 0..n {
                            dx[ii * n + j] += g[ii * n + j] * sd[ii];
                        }
                    }
                }
                if let Some(ds) = self.grad_buf(grads, *s) {
                    for ii in 0..m {
                        let mut acc = 0.0;
                        for j in 0..n {
                            acc += g[ii * n + j] * xd[ii * n + j];
                        }
                        ds[ii] += acc;
                    }
                }
            }
            Op::ScaleCols { x, s } => {
                let (m, n) = {
                    let sh = self.nodes[*x].value.shape();
                    (sh[0], sh[1])
                };
                let xd = self.nodes[*x].value.data();
                let sd = self.nodes[*s].value.data();
                if let Some(dx) = self.grad_buf(grads, *x) {
                    for ii in 0..m {
                        for j in 0..n {
                            dx[ii * n + j] += g[ii * n + j] * sd[j];
                        }
                    }
                }
                if let Some(ds) = self.grad_buf(grads, *s) {
                    for j in 0..n {
                        let mut acc = 0.0;
                        for ii in 0..m {
                            acc += g[ii * n + j] * xd[ii * n + j];
                        }
                        ds[j] += acc;
                    }
                }
            }
            Op::AddBias { x, b } => {
                let (m, n) = {
                    let sh = self.nodes[*x].value.shape();
                    (sh[0], sh[1])
                };
                if let Some(dx) = self.grad_buf(grads, *x) {
                    for (idx, gv) in g.iter().enumerate() {
                        dx[idx] += gv;
                    }
                }
                if let Some(db) = self.grad_buf(grads, *b) {
                    for ii in 0..m {
                        for j in 0..n {
                            db[j] += g[ii * n + j];
                        }
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let n = self.nodes[i].value.shape()[1];
                let parts = parts.clone();
                let mut row = 0;
                for p in parts {
                    let rows = self.nodes[p].value.shape()[0];
                    if let Some(dp) = self.grad_buf(grads, p) {
                        let start = row * n;
                        for (idx, dv) in dp.iter_mut().enumerate() {
                            *dv += g[start + idx];
                        }
                    }
                    row += rows;
                }
            }
            Op::UpsampleNearest { x, factor } => {
                let (c, h, w) = {
                    let s = self.nodes[*x].value.shape();
                    (s[0], s[1], s[2])
                };
                let f = *factor;
                let (oh, ow) = (h * f, w * f);
                if let Some(dx) = self.grad_buf(grads, *x) {
                    for ch in 0..c {
                        for y in 0..oh {
                            for xx in 0..ow {
                                dx[(ch * h + y / f) * w + xx / f] += g[(ch * oh + y) * ow + xx];
                            }
                        }
                    }
                }
            }
            Op::Patchify { x, patch } => {
                let (c, h, w) = {
                    let s = self.nodes[*x].value.shape();
                    (s[0], s[1], s[2])
                };
                let p = *patch;
                let (th, tw) = (h / p, w / p);
                let cols = c * p * p;
                if let Some(dx) = self.grad_buf(grads, *x) {
                    for ty in 0..th {
                        for tx in 0..tw {
                            let row = ty * tw + tx;
                            for ch in 0..c {
                                for py in 0..p {
                                    for px in 0..p {
                                        dx[(ch * h + ty * p + py) * w + tx * p + px] +=
                                            g[row * cols + (ch * p + py) * p + px];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        let g = self.grads[v.0].take()?;
        Some(Tensor::new(self.shapes[v.0].clone(), g).expect("gradient shape consistent"))
    }

    /// Populate `tensor.grad` with the gradient recorded for `v`.
    pub fn write_into(&self, v: Var, tensor: &mut Tensor) -> Result<()> {
        let g = self.grads[v.0].as_ref().ok_or_else(|| Error::Contract {
            op: "gradients.write_into",
            detail: format!("no gradient recorded for var {}", v.0),
        })?;
        tensor.set_grad(g.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        Tensor::rand_uniform(rng, shape.to_vec(), -1.0, 1.0)
    }

    /// Evaluate `build` as loss(leaves), returning loss value and analytic grads.
    fn loss_and_grads(
        leaves: &[Tensor],
        build: &dyn Fn(&mut Tape, &[Var]) -> Result<Var>,
    ) -> (f64, Vec<Tensor>) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = leaves.iter().map(|l| tape.leaf(l, true).unwrap()).collect();
        let loss = build(&mut tape, &vars).unwrap();
        let value = tape.value(loss).data()[0];
        let mut grads = tape.backward(loss).unwrap();
        let gs = vars.iter().map(|v| grads.take(*v).unwrap()).collect();
        (value, gs)
    }

    /// Central finite differences over every leaf element.
    fn fd_check(leaves: Vec<Tensor>, build: impl Fn(&mut Tape, &[Var]) -> Result<Var>) {
        let step = 1e-5;
        let (_, analytic) = loss_and_grads(&leaves, &build);
        for li in 0..leaves.len() {
            for ei in 0..leaves[li].numel() {
                let mut plus = leaves.clone();
                plus[li].data_mut()[ei] += step;
                let (lp, _) = loss_and_grads(&plus, &build);
                let mut minus = leaves.clone();
                minus[li].data_mut()[ei] -= step;
                let (lm, _) = loss_and_grads(&minus, &build);
                let fd = (lp - lm) / (2.0 * step);
                let a = analytic[li].data()[ei];
                let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-6);
                assert!(
                    rel < 1e-4,
                    "leaf {} elem {}: analytic {} vs fd {} (rel {})",
                    li,
                    ei,
                    a,
                    fd,
                    rel
                );
            }
        }
    }

    #[test]
    fn matmul_identity_cases() {
        let mut tape = Tape::new();
        let m = t(&[2, 2], &[3.0, -1.5, 0.25, 7.0]);
        let i2 = Tensor::eye(2);
        let a = tape.leaf(&i2, false).unwrap();
        let b = tape.leaf(&m, false).unwrap();
        let out = tape.matmul(a, b).unwrap();
        assert!(tape.value(out).value_eq(&m));

        let mut tape = Tape::new();
        let rhs = t(&[2, 2], &[0.0, 2.0, 0.0, 0.0]);
        let a = tape.leaf(&i2, false).unwrap();
        let b = tape.leaf(&rhs, false).unwrap();
        let out = tape.matmul(a, b).unwrap();
        assert!(tape.value(out).value_eq(&rhs));
    }

    #[test]
    fn matmul_matches_triple_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let a = rand_t(&mut rng, &[3, 4]);
        let b = rand_t(&mut rng, &[4, 2]);
        // Independent oracle: naive triple loop.
        let mut expect = vec![0.0; 3 * 2];
        for i in 0..3 {
            for j in 0..2 {
                let mut acc = 0.0;
                for p in 0..4 {
                    acc += a.data()[i * 4 + p] * b.data()[p * 2 + j];
                }
                expect[i * 2 + j] = acc;
            }
        }
        let mut tape = Tape::new();
        let av = tape.leaf(&a, false).unwrap();
        let bv = tape.leaf(&b, false).unwrap();
        let out = tape.matmul(av, bv).unwrap();
        for (got, want) in tape.value(out).data().iter().zip(&expect) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.leaf(&Tensor::zeros(vec![2, 3]), false).unwrap();
        let b = tape.leaf(&Tensor::zeros(vec![4, 2]), false).unwrap();
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{}", msg);
    }

    #[test]
    fn pointwise_conv_identity_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = rand_t(&mut rng, &[3, 4, 4]);
        let mut tape = Tape::new();
        let xv = tape.leaf(&x, false).unwrap();
        let wv = tape.leaf(&Tensor::eye(3), false).unwrap();
        let bv = tape.leaf(&Tensor::zeros(vec![3]), false).unwrap();
        let out = tape.pointwise_conv(xv, wv, bv).unwrap();
        assert!(tape.value(out).value_eq(&x));
    }

    #[test]
    fn pointwise_conv_single_pixel_equals_matmul() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = rand_t(&mut rng, &[4, 1, 1]);
        let w = rand_t(&mut rng, &[5, 4]);
        let mut tape = Tape::new();
        let xv = tape.leaf(&x, false).unwrap();
        let wv = tape.leaf(&w, false).unwrap();
        let bv = tape.leaf(&Tensor::zeros(vec![5]), false).unwrap();
        let out = tape.pointwise_conv(xv, wv, bv).unwrap();

        let xcol = Tensor::new(vec![4, 1], x.data().to_vec()).unwrap();
        let mm = matmul_value(&w, &xcol).unwrap();
        for (a, b) in tape.value(out).data().iter().zip(mm.data()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn pointwise_conv_matches_per_pixel_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_t(&mut rng, &[3, 4, 4]);
        let w = rand_t(&mut rng, &[5, 3]);
        let b = rand_t(&mut rng, &[5]);
        let mut tape = Tape::new();
        let xv = tape.leaf(&x, false).unwrap();
        let wv = tape.leaf(&w, false).unwrap();
        let bv = tape.leaf(&b, false).unwrap();
        let out = tape.pointwise_conv(xv, wv, bv).unwrap();
        // Oracle: independent per-pixel loop.
        for o in 0..5 {
            for p in 0..16 {
                let mut acc = b.data()[o];
                for i in 0..3 {
                    acc += w.data()[o * 3 + i] * x.data()[i * 16 + p];
                }
                let got = tape.value(out).data()[o * 16 + p];
                assert!((got - acc).abs() < 1e-12, "pixel {} chan {}", p, o);
            }
        }
    }

    #[test]
    fn elementwise_basics() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[3], &[-1.0, 0.0, 2.0]), false).unwrap();
        let r = tape.relu(x).unwrap();
        assert_eq!(tape.value(r).data(), &[0.0, 0.0, 2.0]);

        let z = tape.leaf(&Tensor::scalar(0.0), false).unwrap();
        let e = tape.exp(z).unwrap();
        assert_eq!(tape.value(e).data(), &[1.0]);
    }

    #[test]
    fn log_exp_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::rand_uniform(&mut rng, vec![10], 0.1, 3.0);
        let mut tape = Tape::new();
        let xv = tape.leaf(&x, false).unwrap();
        let e = tape.exp(xv).unwrap();
        let l = tape.log(e).unwrap();
        assert!(tape.value(l).max_abs_diff(&x) < 1e-12);
    }

    #[test]
    fn log_rejects_nonpositive() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[2], &[1.0, -0.5]), false).unwrap();
        assert!(matches!(tape.log(x).unwrap_err(), Error::Domain { .. }));
    }

    #[test]
    fn nonfinite_output_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::scalar(1000.0), false).unwrap();
        assert!(matches!(tape.exp(x).unwrap_err(), Error::Numerical { .. }));
    }

    #[test]
    fn softmax_uniform_logits() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::full(vec![3, 1, 1], 0.7), false).unwrap();
        let s = tape.softmax_channels(x).unwrap();
        for v in tape.value(s).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_is_stable_for_large_logits() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[2, 1, 1], &[1000.0, 0.0]), false).unwrap();
        let s = tape.softmax_channels(x).unwrap();
        let out = tape.value(s).data();
        assert!((out[0] - 1.0).abs() < 1e-12 && out[1] < 1e-12);
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = rand_t(&mut rng, &[3, 4]);
        let mut tape = Tape::new();
        let xv = tape.leaf(&x, true).unwrap();
        let s = tape.sum(xv).unwrap();
        let mut grads = tape.backward(s).unwrap();
        let g = grads.take(xv).unwrap();
        assert!(g.data().iter().all(|v| *v == 1.0));
    }

    #[test]
    fn backward_of_sum_of_squares_is_two_x() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = rand_t(&mut rng, &[8]);
        let mut tape = Tape::new();
        let xv = tape.leaf(&x, true).unwrap();
        let sq = tape.mul(xv, xv).unwrap();
        let s = tape.sum(sq).unwrap();
        let mut grads = tape.backward(s).unwrap();
        let g = grads.take(xv).unwrap();
        for (gv, xvl) in g.data().iter().zip(x.data()) {
            assert!((gv - 2.0 * xvl).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_rejects_nonscalar_loss() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::zeros(vec![2, 2]), true).unwrap();
        assert!(matches!(tape.backward(x).unwrap_err(), Error::Contract { .. }));
    }

    #[test]
    fn gradcheck_linear_chain() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = rand_t(&mut rng, &[3, 4]);
        let w = rand_t(&mut rng, &[4, 2]);
        let b = rand_t(&mut rng, &[1, 2]);
        fd_check(vec![x, w, b], |tape, vars| {
            let h = tape.matmul(vars[0], vars[1])?;
            let h = tape.add_bias(h, vars[2])?;
            let h = tape.relu(h)?;
            let sq = tape.mul(h, h)?;
            tape.mean(sq)
        });
    }

    #[test]
    fn gradcheck_softmax_log_pipeline() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = rand_t(&mut rng, &[3, 2, 2]);
        fd_check(vec![x], |tape, vars| {
            let p = tape.softmax_channels(vars[0])?;
            let p = tape.clamp(p, 1e-12, 1.0)?;
            let lp = tape.log(p)?;
            let n = tape.neg(lp)?;
            tape.mean(n)
        });
    }

    #[test]
    fn gradcheck_scale_and_concat_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = rand_t(&mut rng, &[3, 4]);
        let s = Tensor::rand_uniform(&mut rng, vec![3, 1], 0.5, 1.5);
        let c = Tensor::rand_uniform(&mut rng, vec![1, 4], 0.5, 1.5);
        let y = rand_t(&mut rng, &[2, 4]);
        fd_check(vec![x, s, c, y], |tape, vars| {
            let a = tape.scale_rows(vars[0], vars[1])?;
            let a = tape.scale_cols(a, vars[2])?;
            let cat = tape.concat_rows(&[a, vars[3]])?;
            let tr = tape.transpose(cat)?;
            let sq = tape.mul(tr, tr)?;
            tape.mean(sq)
        });
    }

    #[test]
    fn gradcheck_reductions_and_pow() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let x = Tensor::rand_uniform(&mut rng, vec![4, 3], 0.2, 2.0);
        fd_check(vec![x], |tape, vars| {
            let r0 = tape.sum_axis0(vars[0])?;
            let r1 = tape.sum_axis1(vars[0])?;
            let p = tape.pow(r0, 0.5)?;
            let q = tape.pow(r1, -1.0)?;
            let sp = tape.sum(p)?;
            let sq = tape.sum(q)?;
            let tot = tape.add(sp, sq)?;
            let half = tape.mul_scalar(tot, 0.5)?;
            tape.add_scalar(half, 1.0)
        });
    }

    #[test]
    fn gradcheck_conv_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = rand_t(&mut rng, &[2, 4, 4]);
        let stem_w = rand_t(&mut rng, &[3, 2, 3, 3]);
        let stem_b = rand_t(&mut rng, &[3]);
        let dw = rand_t(&mut rng, &[3, 3, 3]);
        fd_check(vec![x], |tape, vars| {
            let h = tape.conv3x3(vars[0], &stem_w, &stem_b, 2)?;
            let h = tape.depthwise3x3(h, &dw)?;
            let sq = tape.mul(h, h)?;
            tape.mean(sq)
        });
    }

    #[test]
    fn gradcheck_pointwise_upsample_patchify() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x = rand_t(&mut rng, &[2, 4, 4]);
        let w = rand_t(&mut rng, &[3, 2]);
        let b = rand_t(&mut rng, &[3]);
        fd_check(vec![x.clone(), w, b], |tape, vars| {
            let h = tape.pointwise_conv(vars[0], vars[1], vars[2])?;
            let up = tape.upsample_nearest(h, 2)?;
            let pt = tape.patchify(up, 2)?;
            let sq = tape.mul(pt, pt)?;
            tape.mean(sq)
        });
    }

    #[test]
    fn gradcheck_scalar_broadcast() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let x = rand_t(&mut rng, &[2, 3]);
        let s = Tensor::scalar(0.7);
        fd_check(vec![x, s], |tape, vars| {
            let m = tape.mul(vars[0], vars[1])?;
            let a = tape.add(m, vars[1])?;
            let sq = tape.mul(a, a)?;
            tape.mean(sq)
        });
    }

    #[test]
    fn identical_graphs_are_bit_identical() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(99);
            let x = rand_t(&mut rng, &[4, 4]);
            let w = rand_t(&mut rng, &[4, 4]);
            let mut tape = Tape::new();
            let xv = tape.leaf(&x, true).unwrap();
            let wv = tape.leaf(&w, true).unwrap();
            let h = tape.matmul(xv, wv).unwrap();
            let r = tape.relu(h).unwrap();
            let loss = tape.mean(r).unwrap();
            let value = tape.value(loss).data()[0];
            let mut grads = tape.backward(loss).unwrap();
            (value, grads.take(xv).unwrap(), grads.take(wv).unwrap())
        };
        let (v1, gx1, gw1) = run();
        let (v2, gx2, gw2) = run();
        assert_eq!(v1.to_bits(), v2.to_bits());
        assert!(gx1.bit_eq(&gx2) && gw1.bit_eq(&gw2));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn softmax_columns_sum_to_one(seed in any::<u64>(), c in 1usize..6, h in 1usize..4, w in 1usize..4) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = Tensor::rand_uniform(&mut rng, vec![c, h, w], -5.0, 5.0);
            let mut tape = Tape::new();
            let xv = tape.leaf(&x, false).unwrap();
            let s = tape.softmax_channels(xv).unwrap();
            let out = tape.value(s);
            for p in 0..h * w {
                let sum: f64 = (0..c).map(|ch| out.data()[ch * h * w + p]).sum();
                prop_assert!((sum - 1.0).abs() < 1e-12);
            }
        }
    }
}
