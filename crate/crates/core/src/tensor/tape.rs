use std::sync::atomic::{AtomicBool, Ordering};

use super::conv::{col2im_add, im2col, ConvGeometry};
use super::{gemm, shape_err, Result, Tensor, TensorError};

static SILU_DERIVATIVE_FAULT: AtomicBool = AtomicBool::new(false);

/// Test hook: when enabled, the silu backward rule is deliberately wrong so
/// the gradient-check suite can be shown to catch it.
pub fn set_silu_derivative_fault(enabled: bool) {
    SILU_DERIVATIVE_FAULT.store(enabled, Ordering::SeqCst);
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Silu(Var),
    Sigmoid(Var),
    Ln(Var),
    Clamp { input: Var, low: f64, high: f64 },
    Sum(Var),
    Mean(Var),
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Var,
        stride: usize,
        padding: usize,
    },
    Upsample { input: Var, factor: usize },
    ConcatChannels(Var, Var),
    Linear { input: Var, weight: Var, bias: Var },
    AddChannelBias { input: Var, bias: Var },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    grad: Option<Tensor>,
    requires_grad: bool,
    op: Op,
}

/// Ordered record of executed operations.
///
/// Nodes are appended in execution order, so reverse index order is a valid
/// reverse topological order for [`Tape::backward`].
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records an input value. Leaves with `requires_grad` receive gradients.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, op_name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if !value.all_finite() {
            return Err(TensorError::NonFinite { op: op_name });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        let value = if x.shape() == y.shape() {
            x.zip_map(y, &f)?
        } else if y.is_scalar() {
            let s = y.data()[0];
            x.map(|v| f(v, s))
        } else if x.is_scalar() {
            let s = x.data()[0];
            y.map(|v| f(s, v))
        } else {
            return Err(shape_err(
                name,
                format!("cannot broadcast {:?} with {:?}", x.shape(), y.shape()),
            ));
        };
        self.push(name, value, op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let value = self.value(a).map(|v| v * factor);
        self.push("scale", value, Op::Scale(a, factor), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, offset: f64) -> Result<Var> {
        let value = self.value(a).map(|v| v + offset);
        self.push("add_scalar", value, Op::AddScalar(a), &[a])
    }

    pub fn silu(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(|v| v * sigmoid(v));
        self.push("silu", value, Op::Silu(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(sigmoid);
        self.push("sigmoid", value, Op::Sigmoid(a), &[a])
    }

    pub fn ln(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(f64::ln);
        self.push("ln", value, Op::Ln(a), &[a])
    }

    /// Clamps into `[low, high]`; the gradient is zero outside the interval.
    pub fn clamp(&mut self, a: Var, low: f64, high: f64) -> Result<Var> {
        if low > high {
            return Err(TensorError::Argument {
                op: "clamp",
                detail: format!("low {low} > high {high}"),
            });
        }
        let value = self.value(a).map(|v| v.clamp(low, high));
        self.push(
            "clamp",
            value,
            Op::Clamp {
                input: a,
                low,
                high,
            },
            &[a],
        )
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(a).sum());
        self.push("sum", value, Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(a).mean());
        self.push("mean", value, Op::Mean(a), &[a])
    }

    /// 2-D cross-correlation of `[N,C,H,W]` input with `[F,C,kh,kw]` kernel.
    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let x = self.value(input);
        let k = self.value(kernel);
        let b = self.value(bias);
        let [n, c, h, w] = x.dims4("conv2d")?;
        let [f, kc, kh, kw] = k.dims4("conv2d")?;
        if kc != c {
            return Err(shape_err(
                "conv2d",
                format!("input has {c} channels, kernel expects {kc}"),
            ));
        }
        if b.shape() != [f] {
            return Err(shape_err(
                "conv2d",
                format!("bias shape {:?}, expected [{f}]", b.shape()),
            ));
        }
        if stride == 0 {
            return Err(TensorError::Argument {
                op: "conv2d",
                detail: "stride must be at least 1".into(),
            });
        }
        let geometry = conv_geometry(c, h, w, kh, kw, stride, padding)?;
        let (oh, ow) = (geometry.out_h, geometry.out_w);
        let plane = oh * ow;
        let mut out = vec![0.0; n * f * plane];
        let mut cols = vec![0.0; geometry.col_rows() * plane];
        for item in 0..n {
            im2col(&geometry, &x.data()[item * c * h * w..(item + 1) * c * h * w], &mut cols);
            let dst = &mut out[item * f * plane..(item + 1) * f * plane];
            for (fi, row) in dst.chunks_mut(plane).enumerate() {
                row.fill(b.data()[fi]);
            }
            gemm(f, geometry.col_rows(), plane, 1.0, k.data(), false, &cols, false, 1.0, dst);
        }
        let value = Tensor::new(&[n, f, oh, ow], out)?;
        self.push(
            "conv2d",
            value,
            Op::Conv2d {
                input,
                kernel,
                bias,
                stride,
                padding,
            },
            &[input, kernel, bias],
        )
    }

    /// Nearest-neighbour upsampling of `[N,C,H,W]` by an integer factor.
    pub fn upsample_nearest(&mut self, input: Var, factor: usize) -> Result<Var> {
        if factor < 1 {
            return Err(TensorError::Argument {
                op: "upsample_nearest",
                detail: "factor must be at least 1".into(),
            });
        }
        let x = self.value(input);
        let [n, c, h, w] = x.dims4("upsample_nearest")?;
        let (oh, ow) = (h * factor, w * factor);
        let mut out = vec![0.0; n * c * oh * ow];
        for (plane_in, plane_out) in x.data().chunks(h * w).zip(out.chunks_mut(oh * ow)) {
            for oy in 0..oh {
                let src = &plane_in[(oy / factor) * w..(oy / factor + 1) * w];
                for (ox, v) in plane_out[oy * ow..(oy + 1) * ow].iter_mut().enumerate() {
                    *v = src[ox / factor];
                }
            }
        }
        let value = Tensor::new(&[n, c, oh, ow], out)?;
        self.push(
            "upsample_nearest",
            value,
            Op::Upsample { input, factor },
            &[input],
        )
    }

    /// Concatenates two `[N,*,H,W]` tensors along the channel axis.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        let [n, ca, h, w] = x.dims4("concat_channels")?;
        let [nb, cb, hb, wb] = y.dims4("concat_channels")?;
        if (n, h, w) != (nb, hb, wb) {
            return Err(shape_err(
                "concat_channels",
                format!("{:?} vs {:?}", x.shape(), y.shape()),
            ));
        }
        let (sa, sb) = (ca * h * w, cb * h * w);
        let mut out = Vec::with_capacity(n * (sa + sb));
        for item in 0..n {
            out.extend_from_slice(&x.data()[item * sa..(item + 1) * sa]);
            out.extend_from_slice(&y.data()[item * sb..(item + 1) * sb]);
        }
        let value = Tensor::new(&[n, ca + cb, h, w], out)?;
        self.push("concat_channels", value, Op::ConcatChannels(a, b), &[a, b])
    }

    /// Affine map `[N,D] x [O,D]^T + [O]`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let (x, wt, b) = (self.value(input), self.value(weight), self.value(bias));
        let (n, d) = match x.shape() {
            &[n, d] => (n, d),
            other => return Err(shape_err("linear", format!("input {other:?} is not [N,D]"))),
        };
        let o = match wt.shape() {
            &[o, wd] if wd == d => o,
            other => {
                return Err(shape_err(
                    "linear",
                    format!("weight {other:?} incompatible with input width {d}"),
                ))
            }
        };
        if b.shape() != [o] {
            return Err(shape_err("linear", format!("bias {:?}, expected [{o}]", b.shape())));
        }
        let mut out: Vec<f64> = (0..n).flat_map(|_| b.data().iter().copied()).collect();
        gemm(n, d, o, 1.0, x.data(), false, wt.data(), true, 1.0, &mut out);
        let value = Tensor::new(&[n, o], out)?;
        self.push(
            "linear",
            value,
            Op::Linear {
                input,
                weight,
                bias,
            },
            &[input, weight, bias],
        )
    }

    /// Adds a per-(item, channel) offset `[N,C]` to every pixel of `[N,C,H,W]`.
    pub fn add_channel_bias(&mut self, input: Var, bias: Var) -> Result<Var> {
        let (x, b) = (self.value(input), self.value(bias));
        let [n, c, h, w] = x.dims4("add_channel_bias")?;
        if b.shape() != [n, c] {
            return Err(shape_err(
                "add_channel_bias",
                format!("bias {:?}, expected [{n}, {c}]", b.shape()),
            ));
        }
        let mut out = x.data().to_vec();
        for (plane, &offset) in out.chunks_mut(h * w).zip(b.data()) {
            plane.iter_mut().for_each(|v| *v += offset);
        }
        let value = Tensor::new(&[n, c, h, w], out)?;
        self.push(
            "add_channel_bias",
            value,
            Op::AddChannelBias { input, bias },
            &[input, bias],
        )
    }

    fn accumulate(&mut self, v: Var, contribution: Tensor) {
        let node = &mut self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        match &mut node.grad {
            Some(g) => g
                .data_mut()
                .iter_mut()
                .zip(contribution.data())
                .for_each(|(a, b)| *a += b),
            None => node.grad = Some(contribution),
        }
    }

    /// Reverse pass from a scalar loss. Every `requires_grad` node reachable
    /// from `loss` ends up holding `d loss / d node`; gradients from multiple
    /// consumers are summed.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(TensorError::Contract("backward on an empty tape".into()));
        }
        let seed = self.value(loss);
        if !seed.is_scalar() {
            return Err(TensorError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                seed.shape()
            )));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        let seed_shape = self.value(loss).shape().to_vec();
        self.nodes[loss.0].grad = Some(Tensor::full(&seed_shape, 1.0));
        for index in (0..=loss.0).rev() {
            let Some(upstream) = self.nodes[index].grad.take() else {
                continue;
            };
            let contributions = self.node_backward(index, &upstream)?;
            self.nodes[index].grad = Some(upstream);
            for (target, g) in contributions {
                self.accumulate(target, g);
            }
        }
        Ok(())
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Reduces a gradient to the shape of a broadcast operand.
    fn reduce_to(&self, v: Var, g: Tensor) -> Tensor {
        let target = self.value(v);
        if target.shape() == g.shape() {
            g
        } else {
            Tensor {
                shape: target.shape().to_vec(),
                data: vec![g.sum()],
            }
        }
    }

    fn node_backward(&self, index: usize, up: &Tensor) -> Result<Vec<(Var, Tensor)>> {
        let node = &self.nodes[index];
        let out = &node.value;
        let mut grads = Vec::new();
        match node.op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if self.wants(a) {
                    grads.push((a, self.reduce_to(a, up.clone())));
                }
                if self.wants(b) {
                    grads.push((b, self.reduce_to(b, up.map(|g| sign * g))));
                }
            }
            Op::Mul(a, b) => {
                let (x, y) = (self.value(a), self.value(b));
                if self.wants(a) {
                    grads.push((a, self.reduce_to(a, broadcast_mul(up, y))));
                }
                if self.wants(b) {
                    grads.push((b, self.reduce_to(b, broadcast_mul(up, x))));
                }
            }
            Op::Div(a, b) => {
                let y = self.value(b);
                if self.wants(a) {
                    let g = broadcast_zip(up, y, |g, d| g / d);
                    grads.push((a, self.reduce_to(a, g)));
                }
                if self.wants(b) {
                    // d(x/y)/dy = -(x/y)/y = -out/y
                    let g = broadcast_zip(&up.zip_map(out, |g, o| g * o)?, y, |go, d| -go / d);
                    grads.push((b, self.reduce_to(b, g)));
                }
            }
            Op::Scale(a, factor) => {
                grads.push((a, up.map(|g| g * factor)));
            }
            Op::AddScalar(a) => {
                grads.push((a, up.clone()));
            }
            Op::Silu(a) => {
                let broken = SILU_DERIVATIVE_FAULT.load(Ordering::Relaxed);
                let g = up.zip_map(self.value(a), |g, x| {
                    let s = sigmoid(x);
                    if broken {
                        g * s
                    } else {
                        g * (s + x * s * (1.0 - s))
                    }
                })?;
                grads.push((a, g));
            }
            Op::Sigmoid(a) => {
                grads.push((a, up.zip_map(out, |g, s| g * s * (1.0 - s))?));
            }
            Op::Ln(a) => {
                grads.push((a, up.zip_map(self.value(a), |g, x| g / x)?));
            }
            Op::Clamp { input, low, high } => {
                let g = up.zip_map(self.value(input), |g, x| {
                    if x < low || x > high {
                        0.0
                    } else {
                        g
                    }
                })?;
                grads.push((input, g));
            }
            Op::Sum(a) => {
                let g = up.data()[0];
                grads.push((a, Tensor::full(self.value(a).shape(), g)));
            }
            Op::Mean(a) => {
                let x = self.value(a);
                let g = up.data()[0] / x.numel() as f64;
                grads.push((a, Tensor::full(x.shape(), g)));
            }
            Op::Conv2d {
                input,
                kernel,
                bias,
                stride,
                padding,
            } => grads.extend(self.conv2d_backward(up, input, kernel, bias, stride, padding)?),
            Op::Upsample { input, factor } => {
                let x = self.value(input);
                let [_, _, h, w] = x.dims4("upsample_nearest")?;
                let (oh, ow) = (h * factor, w * factor);
                let mut g = vec![0.0; x.numel()];
                for (plane_g, plane_up) in g.chunks_mut(h * w).zip(up.data().chunks(oh * ow)) {
                    for oy in 0..oh {
                        let dst = &mut plane_g[(oy / factor) * w..(oy / factor + 1) * w];
                        for (ox, v) in plane_up[oy * ow..(oy + 1) * ow].iter().enumerate() {
                            dst[ox / factor] += v;
                        }
                    }
                }
                grads.push((input, Tensor::new(x.shape(), g)?));
            }
            Op::ConcatChannels(a, b) => {
                let (x, y) = (self.value(a), self.value(b));
                let [n, ca, h, w] = x.dims4("concat_channels")?;
                let cb = y.shape()[1];
                let (sa, sb) = (ca * h * w, cb * h * w);
                let mut ga = Vec::with_capacity(x.numel());
                let mut gb = Vec::with_capacity(y.numel());
                for item in 0..n {
                    let chunk = &up.data()[item * (sa + sb)..(item + 1) * (sa + sb)];
                    ga.extend_from_slice(&chunk[..sa]);
                    gb.extend_from_slice(&chunk[sa..]);
                }
                if self.wants(a) {
                    grads.push((a, Tensor::new(x.shape(), ga)?));
                }
                if self.wants(b) {
                    grads.push((b, Tensor::new(y.shape(), gb)?));
                }
            }
            Op::Linear {
                input,
                weight,
                bias,
            } => {
                let (x, wt) = (self.value(input), self.value(weight));
                let (n, d) = (x.shape()[0], x.shape()[1]);
                let o = wt.shape()[0];
                if self.wants(input) {
                    let mut g = vec![0.0; n * d];
                    gemm(n, o, d, 1.0, up.data(), false, wt.data(), false, 0.0, &mut g);
                    grads.push((input, Tensor::new(x.shape(), g)?));
                }
                if self.wants(weight) {
                    let mut g = vec![0.0; o * d];
                    gemm(o, n, d, 1.0, up.data(), true, x.data(), false, 0.0, &mut g);
                    grads.push((weight, Tensor::new(wt.shape(), g)?));
                }
                if self.wants(bias) {
                    let mut g = vec![0.0; o];
                    for row in up.data().chunks(o) {
                        g.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                    }
                    grads.push((bias, Tensor::new(&[o], g)?));
                }
            }
            Op::AddChannelBias { input, bias } => {
                if self.wants(input) {
                    grads.push((input, up.clone()));
                }
                if self.wants(bias) {
                    let [_, _, h, w] = self.value(input).dims4("add_channel_bias")?;
                    let g: Vec<f64> = up.data().chunks(h * w).map(|p| p.iter().sum()).collect();
                    grads.push((bias, Tensor::new(self.value(bias).shape(), g)?));
                }
            }
        }
        Ok(grads)
    }

    fn conv2d_backward(
        &self,
        up: &Tensor,
        input: Var,
        kernel: Var,
        bias: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Vec<(Var, Tensor)>> {
        let x = self.value(input);
        let k = self.value(kernel);
        let [n, c, h, w] = x.dims4("conv2d")?;
        let [f, _, kh, kw] = k.dims4("conv2d")?;
        let geometry = conv_geometry(c, h, w, kh, kw, stride, padding)?;
        let plane = geometry.col_cols();
        let rows = geometry.col_rows();
        let mut grads = Vec::new();

        if self.wants(bias) {
            let mut g = vec![0.0; f];
            for item in up.data().chunks(f * plane) {
                for (fi, row) in item.chunks(plane).enumerate() {
                    g[fi] += row.iter().sum::<f64>();
                }
            }
            grads.push((bias, Tensor::new(&[f], g)?));
        }

        let want_kernel = self.wants(kernel);
        let want_input = self.wants(input);
        if want_kernel || want_input {
            let mut gk = vec![0.0; if want_kernel { k.numel() } else { 0 }];
            let mut gx = vec![0.0; if want_input { x.numel() } else { 0 }];
            let mut cols = vec![0.0; rows * plane];
            for item in 0..n {
                let up_item = &up.data()[item * f * plane..(item + 1) * f * plane];
                if want_kernel {
                    im2col(&geometry, &x.data()[item * c * h * w..(item + 1) * c * h * w], &mut cols);
                    gemm(f, plane, rows, 1.0, up_item, false, &cols, true, 1.0, &mut gk);
                }
                if want_input {
                    gemm(rows, f, plane, 1.0, k.data(), true, up_item, false, 0.0, &mut cols);
                    col2im_add(&geometry, &cols, &mut gx[item * c * h * w..(item + 1) * c * h * w]);
                }
            }
            if want_kernel {
                grads.push((kernel, Tensor::new(k.shape(), gk)?));
            }
            if want_input {
                grads.push((input, Tensor::new(x.shape(), gx)?));
            }
        }
        Ok(grads)
    }
}

fn conv_geometry(
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
) -> Result<ConvGeometry> {
    let padded_h = h + 2 * padding;
    let padded_w = w + 2 * padding;
    if padded_h < kh || padded_w < kw {
        return Err(shape_err(
            "conv2d",
            format!("kernel {kh}x{kw} larger than padded input {padded_h}x{padded_w}"),
        ));
    }
    if !(padded_h - kh).is_multiple_of(stride) || !(padded_w - kw).is_multiple_of(stride) {
        return Err(shape_err(
            "conv2d",
            format!("output extent not integral for {h}x{w}, kernel {kh}x{kw}, stride {stride}, padding {padding}"),
        ));
    }
    Ok(ConvGeometry {
        channels: c,
        height: h,
        width: w,
        kernel_h: kh,
        kernel_w: kw,
        stride,
        padding,
        out_h: (padded_h - kh) / stride + 1,
        out_w: (padded_w - kw) / stride + 1,
    })
}

fn broadcast_zip(g: &Tensor, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    if other.is_scalar() && !g.is_scalar() {
        let s = other.data()[0];
        g.map(|v| f(v, s))
    } else if g.is_scalar() && !other.is_scalar() {
        let s = g.data()[0];
        other.map(|v| f(s, v))
    } else {
        Tensor {
            shape: g.shape().to_vec(),
            data: g
                .data()
                .iter()
                .zip(other.data())
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }
}

fn broadcast_mul(g: &Tensor, other: &Tensor) -> Tensor {
    broadcast_zip(g, other, |a, b| a * b)
}
