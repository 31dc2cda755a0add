//! Differentiable neural network primitives recorded on a [`Tape`].
//!
//! Feature maps are laid out `[channels, height, width]`.

use crate::error::{Error, Result};
use crate::tensor::{Backward, BackwardCtx, GradSink, Real, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    /// Zero padding of `(f - 1) / 2` on every side.
    Same,
    Valid,
}

/// Weights `[out_ch, in_ch, f, f]` and bias `[out_ch]` of one convolution.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv2dParams<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Real> Conv2dParams<T> {
    pub fn new(weight: Tensor<T>, bias: Tensor<T>) -> Result<Self> {
        let ws = weight.shape();
        if ws.len() != 4 || ws[2] != ws[3] || ws[2].is_multiple_of(2) {
            return Err(Error::InvalidShape {
                shape: ws.to_vec(),
                reason: "conv weight must be [out, in, f, f] with odd f".into(),
            });
        }
        if bias.shape() != [ws[0]] {
            return Err(Error::shape(
                "conv2d",
                format!("bias {:?} for {} output channels", bias.shape(), ws[0]),
            ));
        }
        Ok(Conv2dParams { weight, bias })
    }

    pub fn zeros(out_ch: usize, in_ch: usize, f: usize) -> Self {
        Conv2dParams {
            weight: Tensor::zeros(&[out_ch, in_ch, f, f]),
            bias: Tensor::zeros(&[out_ch]),
        }
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn kernel(&self) -> usize {
        self.weight.shape()[2]
    }
}

/// Tape handles of a convolution's weight and bias.
#[derive(Clone, Copy, Debug)]
pub struct ConvVars {
    pub weight: Var,
    pub bias: Var,
}

impl<T: Real> Conv2dParams<T> {
    pub fn record(&self, tape: &mut Tape<T>) -> ConvVars {
        ConvVars {
            weight: tape.leaf(self.weight.clone()),
            bias: tape.leaf(self.bias.clone()),
        }
    }
}

fn chw(shape: &[usize], op: &'static str) -> Result<(usize, usize, usize)> {
    match *shape {
        [c, h, w] => Ok((c, h, w)),
        _ => Err(Error::shape(
            op,
            format!("expected [C, H, W], got {shape:?}"),
        )),
    }
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    in_ch: usize,
    h: usize,
    w: usize,
    out_ch: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeom {
    fn patch(&self) -> usize {
        self.in_ch * self.k * self.k
    }

    fn plane(&self) -> usize {
        self.oh * self.ow
    }

    /// 1x1, stride 1, unpadded: the input itself is the column matrix.
    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
}

fn im2col<T: Real>(g: &ConvGeom, x: &[T]) -> Vec<T> {
    let plane = g.plane();
    let mut cols = vec![T::zero(); g.patch() * plane];
    for c in 0..g.in_ch {
        let xc = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src = &xc[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let drow = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    for (ox, d) in drow.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            *d = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im<T: Real>(g: &ConvGeom, cols: &[T], dx: &mut [T]) {
    let plane = g.plane();
    for c in 0..g.in_ch {
        let dxc = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let drow = &mut dxc[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            drow[ix as usize] += src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

struct ConvRule<T> {
    input: Var,
    weight: Var,
    bias: Option<Var>,
    geom: ConvGeom,
    cols: Option<Vec<T>>,
}

impl<T: Real> Backward<T> for ConvRule<T> {
    fn backward(&self, ctx: &BackwardCtx<'_, T>, grad: &Tensor<T>, sink: &mut GradSink<T>) {
        let g = &self.geom;
        let plane = g.plane();
        let dout = grad.data();
        let cols: &[T] = match &self.cols {
            Some(c) => c,
            None => ctx.value(self.input).data(),
        };
        if sink.wants(self.weight) {
            let wshape = ctx.value(self.weight).shape().to_vec();
            sink.accumulate_with(self.weight, &wshape, |dw| {
                T::gemm(
                    g.out_ch,
                    plane,
                    g.patch(),
                    T::one(),
                    dout,
                    false,
                    cols,
                    true,
                    T::one(),
                    dw,
                );
            });
        }
        if let Some(bias) = self.bias {
            if sink.wants(bias) {
                sink.accumulate_with(bias, &[g.out_ch], |db| {
                    for (o, d) in db.iter_mut().enumerate() {
                        *d += dout[o * plane..(o + 1) * plane].iter().copied().sum();
                    }
                });
            }
        }
        if sink.wants(self.input) {
            let w = ctx.value(self.weight).data();
            let xshape = [g.in_ch, g.h, g.w];
            if g.is_pointwise() {
                sink.accumulate_with(self.input, &xshape, |dx| {
                    T::gemm(
                        g.patch(),
                        g.out_ch,
                        plane,
                        T::one(),
                        w,
                        true,
                        dout,
                        false,
                        T::one(),
                        dx,
                    );
                });
            } else {
                let mut dcols = vec![T::zero(); g.patch() * plane];
                T::gemm(
                    g.patch(),
                    g.out_ch,
                    plane,
                    T::one(),
                    w,
                    true,
                    dout,
                    false,
                    T::zero(),
                    &mut dcols,
                );
                sink.accumulate_with(self.input, &xshape, |dx| col2im(g, &dcols, dx));
            }
        }
    }
}

/// Cross-correlation of `input [C, H, W]` with `weight [O, C, f, f]`, plus an
/// optional per-channel `bias [O]`.
pub fn conv2d<T: Real>(
    tape: &mut Tape<T>,
    input: Var,
    weight: Var,
    bias: Option<Var>,
    stride: usize,
    padding: Padding,
) -> Result<Var> {
    let (in_ch, h, w) = chw(tape.shape(input), "conv2d")?;
    let ws = tape.shape(weight).to_vec();
    if ws.len() != 4 || ws[2] != ws[3] {
        return Err(Error::shape("conv2d", format!("weight shape {ws:?}")));
    }
    if ws[1] != in_ch {
        return Err(Error::shape(
            "conv2d",
            format!("input has {in_ch} channels, weight expects {}", ws[1]),
        ));
    }
    if stride == 0 {
        return Err(Error::Contract("conv2d stride must be positive".into()));
    }
    let (out_ch, k) = (ws[0], ws[2]);
    if let Some(b) = bias {
        if tape.shape(b) != [out_ch] {
            return Err(Error::shape(
                "conv2d",
                format!("bias {:?} for {out_ch} outputs", tape.shape(b)),
            ));
        }
    }
    let pad = match padding {
        Padding::Same => {
            if k % 2 == 0 {
                return Err(Error::shape("conv2d", "same padding needs an odd kernel"));
            }
            (k - 1) / 2
        }
        Padding::Valid => 0,
    };
    if h + 2 * pad < k || w + 2 * pad < k {
        return Err(Error::shape(
            "conv2d",
            format!("{k}x{k} kernel does not fit {h}x{w} input"),
        ));
    }
    let geom = ConvGeom {
        in_ch,
        h,
        w,
        out_ch,
        k,
        stride,
        pad,
        oh: (h + 2 * pad - k) / stride + 1,
        ow: (w + 2 * pad - k) / stride + 1,
    };
    let plane = geom.plane();
    let cols = (!geom.is_pointwise()).then(|| im2col(&geom, tape.value(input).data()));
    let mut out = vec![T::zero(); out_ch * plane];
    if let Some(b) = bias {
        for (o, &bv) in tape.value(b).data().iter().enumerate() {
            out[o * plane..(o + 1) * plane].fill(bv);
        }
    }
    {
        let colref: &[T] = match &cols {
            Some(c) => c,
            None => tape.value(input).data(),
        };
        T::gemm(
            out_ch,
            geom.patch(),
            plane,
            T::one(),
            tape.value(weight).data(),
            false,
            colref,
            false,
            T::one(),
            &mut out,
        );
    }
    let value = Tensor::from_vec(&[out_ch, geom.oh, geom.ow], out)?;
    let mut inputs = vec![input, weight];
    inputs.extend(bias);
    // columns are only read back for the weight gradient
    let keep_cols = cols.filter(|_| tape.requires_grad(weight));
    tape.push(
        "conv2d",
        value,
        &inputs,
        ConvRule {
            input,
            weight,
            bias,
            geom,
            cols: keep_cols,
        },
    )
}

/// Convolution with the weight and bias of `vars`.
pub fn conv2d_with<T: Real>(
    tape: &mut Tape<T>,
    input: Var,
    vars: ConvVars,
    stride: usize,
    padding: Padding,
) -> Result<Var> {
    conv2d(tape, input, vars.weight, Some(vars.bias), stride, padding)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pointwise {
    Sigmoid,
    Tanh,
    Relu,
}

#[inline]
pub(crate) fn sigmoid_scalar<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

struct PointwiseRule {
    kind: Pointwise,
    input: Var,
}

impl<T: Real> Backward<T> for PointwiseRule {
    fn backward(&self, ctx: &BackwardCtx<'_, T>, grad: &Tensor<T>, sink: &mut GradSink<T>) {
        let y = ctx.output().data();
        let x = ctx.value(self.input).data();
        let g = grad.data();
        let kind = self.kind;
        sink.accumulate_with(self.input, ctx.value(self.input).shape(), |dx| {
            for i in 0..dx.len() {
                let local = match kind {
                    Pointwise::Sigmoid => y[i] * (T::one() - y[i]),
                    Pointwise::Tanh => T::one() - y[i] * y[i],
                    Pointwise::Relu => {
                        if x[i] > T::zero() {
                            T::one()
                        } else {
                            T::zero()
                        }
                    }
                };
                dx[i] += g[i] * local;
            }
        });
    }
}

pub fn pointwise<T: Real>(tape: &mut Tape<T>, kind: Pointwise, x: Var) -> Result<Var> {
    let f: fn(T) -> T = match kind {
        Pointwise::Sigmoid => sigmoid_scalar,
        Pointwise::Tanh => |v: T| v.tanh(),
        Pointwise::Relu => |v: T| v.max(T::zero()),
    };
    let value = tape.value(x).map(f);
    let name = match kind {
        Pointwise::Sigmoid => "sigmoid",
        Pointwise::Tanh => "tanh",
        Pointwise::Relu => "relu",
    };
    tape.push(name, value, &[x], PointwiseRule { kind, input: x })
}

pub fn sigmoid<T: Real>(tape: &mut Tape<T>, x: Var) -> Result<Var> {
    pointwise(tape, Pointwise::Sigmoid, x)
}

pub fn tanh<T: Real>(tape: &mut Tape<T>, x: Var) -> Result<Var> {
    pointwise(tape, Pointwise::Tanh, x)
}

pub fn relu<T: Real>(tape: &mut Tape<T>, x: Var) -> Result<Var> {
    pointwise(tape, Pointwise::Relu, x)
}

struct MaxPoolRule {
    input: Var,
    argmax: Vec<usize>,
}

impl<T: Real> Backward<T> for MaxPoolRule {
    fn backward(&self, ctx: &BackwardCtx<'_, T>, grad: &Tensor<T>, sink: &mut GradSink<T>) {
        sink.accumulate_with(self.input, ctx.value(self.input).shape(), |dx| {
            for (&src, &g) in self.argmax.iter().zip(grad.data()) {
                dx[src] += g;
            }
        });
    }
}

/// Per-channel max over `window = (wh, ww)` patches taken every `stride`.
/// Ties resolve to the first element in row-major order.
pub fn maxpool2d<T: Real>(
    tape: &mut Tape<T>,
    x: Var,
    window: (usize, usize),
    stride: (usize, usize),
) -> Result<Var> {
    let (c, h, w) = chw(tape.shape(x), "maxpool2d")?;
    let (wh, ww) = window;
    if wh == 0 || ww == 0 || wh > h || ww > w {
        return Err(Error::shape(
            "maxpool2d",
            format!("window {wh}x{ww} on {h}x{w} input"),
        ));
    }
    if stride.0 == 0 || stride.1 == 0 {
        return Err(Error::Contract("maxpool2d stride must be positive".into()));
    }
    let oh = (h - wh) / stride.0 + 1;
    let ow = (w - ww) / stride.1 + 1;
    let data = tape.value(x).data();
    let mut out = Vec::with_capacity(c * oh * ow);
    let mut argmax = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = ch * h * w + oy * stride.0 * w + ox * stride.1;
                for dy in 0..wh {
                    for dx in 0..ww {
                        let idx = ch * h * w + (oy * stride.0 + dy) * w + ox * stride.1 + dx;
                        if data[idx] > data[best] {
                            best = idx;
                        }
                    }
                }
                out.push(data[best]);
                argmax.push(best);
            }
        }
    }
    let value = Tensor::from_vec(&[c, oh, ow], out)?;
    tape.push("maxpool2d", value, &[x], MaxPoolRule { input: x, argmax })
}

/// Max over the whole spatial extent of each channel: `[C, H, W] -> [C]`.
pub fn global_maxpool<T: Real>(tape: &mut Tape<T>, x: Var) -> Result<Var> {
    let (c, h, w) = chw(tape.shape(x), "global_maxpool")?;
    let pooled = maxpool2d(tape, x, (h, w), (h, w))?;
    tape.reshape(pooled, &[c])
}

struct LogSoftmaxRule(Var);

impl<T: Real> Backward<T> for LogSoftmaxRule {
    fn backward(&self, ctx: &BackwardCtx<'_, T>, grad: &Tensor<T>, sink: &mut GradSink<T>) {
        let y = ctx.output().data();
        let g = grad.data();
        let total: T = g.iter().copied().sum();
        sink.accumulate_with(self.0, ctx.value(self.0).shape(), |dx| {
            for i in 0..dx.len() {
                dx[i] += g[i] - y[i].exp() * total;
            }
        });
    }
}

/// Log-softmax over every pixel of a single-channel map `[1, H, W]`.
pub fn log_softmax_spatial<T: Real>(tape: &mut Tape<T>, x: Var) -> Result<Var> {
    let (c, _, _) = chw(tape.shape(x), "log_softmax_spatial")?;
    if c != 1 {
        return Err(Error::shape(
            "log_softmax_spatial",
            format!("expects a single channel, got {c}"),
        ));
    }
    let v = tape.value(x);
    let max = v
        .data()
        .iter()
        .copied()
        .fold(T::neg_infinity(), |a, b| a.max(b));
    let log_sum = v.data().iter().map(|&xi| (xi - max).exp()).sum::<T>().ln();
    let value = v.map(|xi| (xi - max) - log_sum);
    tape.push("log_softmax_spatial", value, &[x], LogSoftmaxRule(x))
}

struct BiasScalarRule {
    input: Var,
    bias: Var,
}

impl<T: Real> Backward<T> for BiasScalarRule {
    fn backward(&self, ctx: &BackwardCtx<'_, T>, grad: &Tensor<T>, sink: &mut GradSink<T>) {
        sink.accumulate_with(self.input, ctx.value(self.input).shape(), |dx| {
            for (d, &g) in dx.iter_mut().zip(grad.data()) {
                *d += g;
            }
        });
        if sink.wants(self.bias) {
            let shape = ctx.value(self.bias).shape().to_vec();
            let total = grad.sum();
            sink.accumulate_with(self.bias, &shape, |db| db[0] += total);
        }
    }
}

/// Adds one learned scalar `b` (a `[1]` tensor) to every element of `x`.
pub fn bias_scalar_add<T: Real>(tape: &mut Tape<T>, x: Var, b: Var) -> Result<Var> {
    if !tape.value(b).is_scalar() {
        return Err(Error::shape(
            "bias_scalar_add",
            format!("bias must be a scalar, got {:?}", tape.shape(b)),
        ));
    }
    let bv = tape.value(b).item();
    let value = tape.value(x).map(|v| v + bv);
    tape.push(
        "bias_scalar_add",
        value,
        &[x, b],
        BiasScalarRule { input: x, bias: b },
    )
}

/// Source coordinate taps for corner-aligned linear interpolation.
#[derive(Clone, Debug)]
struct Taps {
    lo: Vec<usize>,
    hi: Vec<usize>,
    frac: Vec<f64>,
}

fn taps(src: usize, dst: usize) -> Taps {
    let mut t = Taps {
        lo: Vec::with_capacity(dst),
        hi: Vec::with_capacity(dst),
        frac: Vec::with_capacity(dst),
    };
    for i in 0..dst {
        let pos = if dst == 1 {
            0.0
        } else {
            (i * (src - 1)) as f64 / (dst - 1) as f64
        };
        let lo = (pos.floor() as usize).min(src - 1);
        let hi = (lo + 1).min(src - 1);
        t.lo.push(lo);
        t.hi.push(hi);
        t.frac.push(pos - lo as f64);
    }
    t
}

struct UpsampleRule {
    input: Var,
    rows: Taps,
    cols: Taps,
}

impl<T: Real> Backward<T> for UpsampleRule {
    fn backward(&self, ctx: &BackwardCtx<'_, T>, grad: &Tensor<T>, sink: &mut GradSink<T>) {
        let shape = ctx.value(self.input).shape().to_vec();
        let (c, h, w) = (shape[0], shape[1], shape[2]);
        let (oh, ow) = (self.rows.lo.len(), self.cols.lo.len());
        let g = grad.data();
        sink.accumulate_with(self.input, &shape, |dx| {
            // transpose of the separable interpolation: columns, then rows
            let mut tmp = vec![T::zero(); oh * w];
            for ch in 0..c {
                tmp.fill(T::zero());
                for y in 0..oh {
                    for x in 0..ow {
                        let gv = g[(ch * oh + y) * ow + x];
                        let fx = T::of(self.cols.frac[x]);
                        tmp[y * w + self.cols.lo[x]] += gv * (T::one() - fx);
                        tmp[y * w + self.cols.hi[x]] += gv * fx;
                    }
                }
                let base = ch * h * w;
                for y in 0..oh {
                    let fy = T::of(self.rows.frac[y]);
                    let (lo, hi) = (self.rows.lo[y], self.rows.hi[y]);
                    for x in 0..w {
                        let t = tmp[y * w + x];
                        dx[base + lo * w + x] += t * (T::one() - fy);
                        dx[base + hi * w + x] += t * fy;
                    }
                }
            }
        });
    }
}

/// Bilinear upsampling of `[C, h, w]` to `[C, H, W]` with corner alignment.
pub fn upsample_bilinear<T: Real>(
    tape: &mut Tape<T>,
    x: Var,
    target: (usize, usize),
) -> Result<Var> {
    let (c, h, w) = chw(tape.shape(x), "upsample_bilinear")?;
    let (oh, ow) = target;
    if oh < h || ow < w {
        return Err(Error::Contract(format!(
            "upsample_bilinear cannot shrink {h}x{w} to {oh}x{ow}"
        )));
    }
    let rows = taps(h, oh);
    let cols = taps(w, ow);
    let src = tape.value(x).data();
    let mut out = vec![T::zero(); c * oh * ow];
    let mut tmp = vec![T::zero(); oh * w];
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        for y in 0..oh {
            let fy = T::of(rows.frac[y]);
            for x in 0..w {
                let a = plane[rows.lo[y] * w + x];
                let b = plane[rows.hi[y] * w + x];
                tmp[y * w + x] = if rows.frac[y] == 0.0 {
                    a
                } else {
                    a + (b - a) * fy
                };
            }
        }
        let dst = &mut out[ch * oh * ow..(ch + 1) * oh * ow];
        for y in 0..oh {
            for x in 0..ow {
                let fx = T::of(cols.frac[x]);
                let a = tmp[y * w + cols.lo[x]];
                let b = tmp[y * w + cols.hi[x]];
                dst[y * ow + x] = if cols.frac[x] == 0.0 {
                    a
                } else {
                    a + (b - a) * fx
                };
            }
        }
    }
    let value = Tensor::from_vec(&[c, oh, ow], out)?;
    tape.push(
        "upsample_bilinear",
        value,
        &[x],
        UpsampleRule {
            input: x,
            rows,
            cols,
        },
    )
}

struct LinearRule {
    x: Var,
    weight: Var,
    bias: Var,
}

impl<T: Real> Backward<T> for LinearRule {
    fn backward(&self, ctx: &BackwardCtx<'_, T>, grad: &Tensor<T>, sink: &mut GradSink<T>) {
        let x = ctx.value(self.x).data();
        let w = ctx.value(self.weight);
        let (m, k) = (w.shape()[0], w.shape()[1]);
        let g = grad.data();
        sink.accumulate_with(self.weight, &[m, k], |dw| {
            for i in 0..m {
                for j in 0..k {
                    dw[i * k + j] += g[i] * x[j];
                }
            }
        });
        sink.accumulate_with(self.bias, &[m], |db| {
            for (d, &gi) in db.iter_mut().zip(g) {
                *d += gi;
            }
        });
        sink.accumulate_with(self.x, &[k], |dx| {
            for i in 0..m {
                for j in 0..k {
                    dx[j] += g[i] * w.data()[i * k + j];
                }
            }
        });
    }
}

/// `weight [m, k] * x [k] + bias [m]`.
pub fn linear<T: Real>(tape: &mut Tape<T>, x: Var, weight: Var, bias: Var) -> Result<Var> {
    let ws = tape.shape(weight).to_vec();
    let xs = tape.shape(x).to_vec();
    if ws.len() != 2 || xs != [ws[1]] || tape.shape(bias) != [ws[0]] {
        return Err(Error::shape(
            "linear",
            format!("x {xs:?}, weight {ws:?}, bias {:?}", tape.shape(bias)),
        ));
    }
    let (m, k) = (ws[0], ws[1]);
    let (xv, wv, bv) = (tape.value(x), tape.value(weight), tape.value(bias));
    let out = (0..m)
        .map(|i| {
            (0..k)
                .map(|j| wv.data()[i * k + j] * xv.data()[j])
                .sum::<T>()
                + bv.data()[i]
        })
        .collect();
    let value = Tensor::from_vec(&[m], out)?;
    tape.push(
        "linear",
        value,
        &[x, weight, bias],
        LinearRule { x, weight, bias },
    )
}
