//! Dense real tensors and a reverse-mode tape.
//!
//! Tensors are plain row-major values. Differentiable computation happens on a
//! [`Tape`]: every op appends a node holding its output value together with a
//! boxed [`Backward`] rule that knows how to push the output gradient back to
//! its inputs. Nodes are appended in evaluation order, so walking the node list
//! backwards is a valid reverse topological order.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign};

use num_traits::Float;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Storage precision tag, used by checkpoints and the CLI.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn tag(self) -> u8 {
        match self {
            DType::F32 => 1,
            DType::F64 => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            1 => Some(DType::F32),
            2 => Some(DType::F64),
            _ => None,
        }
    }

    pub fn size_of(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

impl Display for DType {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            DType::F32 => "f32",
            DType::F64 => "f64",
        })
    }
}

/// Floating point element type. Implemented for `f32` and `f64`.
pub trait Real:
    Float + Default + Debug + Display + Sum + AddAssign + MulAssign + Send + Sync + 'static
{
    const DTYPE: DType;

    fn of(v: f64) -> Self;

    fn as_f64(self) -> f64;

    fn write_le(self, out: &mut Vec<u8>);

    fn read_le(bytes: &[u8]) -> Self;

    /// `c = alpha * op(a) * op(b) + beta * c` with `op(a)` of shape `m x k` and
    /// `op(b)` of shape `k x n`, all row-major. `trans_a` means `a` is stored as
    /// `k x m`, `trans_b` means `b` is stored as `n x k`.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        trans_a: bool,
        b: &[Self],
        trans_b: bool,
        beta: Self,
        c: &mut [Self],
    );
}

fn gemm_strides(m: usize, k: usize, n: usize, trans_a: bool, trans_b: bool) -> [isize; 6] {
    let (rsa, csa) = if trans_a {
        (1, m as isize)
    } else {
        (k as isize, 1)
    };
    let (rsb, csb) = if trans_b {
        (1, k as isize)
    } else {
        (n as isize, 1)
    };
    [rsa, csa, rsb, csb, n as isize, 1]
}

macro_rules! impl_real {
    ($t:ty, $dtype:expr, $gemm:path) => {
        impl Real for $t {
            const DTYPE: DType = $dtype;

            #[inline]
            fn of(v: f64) -> Self {
                v as $t
            }

            #[inline]
            fn as_f64(self) -> f64 {
                self as f64
            }

            fn write_le(self, out: &mut Vec<u8>) {
                out.extend_from_slice(&self.to_le_bytes());
            }

            fn read_le(bytes: &[u8]) -> Self {
                let mut buf = [0u8; std::mem::size_of::<$t>()];
                buf.copy_from_slice(&bytes[..std::mem::size_of::<$t>()]);
                <$t>::from_le_bytes(buf)
            }

            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                trans_a: bool,
                b: &[Self],
                trans_b: bool,
                beta: Self,
                c: &mut [Self],
            ) {
                assert!(a.len() >= m * k, "gemm: lhs too short");
                assert!(b.len() >= k * n, "gemm: rhs too short");
                assert!(c.len() >= m * n, "gemm: output too short");
                if m == 0 || n == 0 {
                    return;
                }
                let [rsa, csa, rsb, csb, rsc, csc] = gemm_strides(m, k, n, trans_a, trans_b);
                // SAFETY: the asserts above guarantee every index reached by the
                // given strides lies inside the three slices.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        rsc,
                        csc,
                    );
                }
            }
        }
    };
}

impl_real!(f32, DType::F32, matrixmultiply::sgemm);
impl_real!(f64, DType::F64, matrixmultiply::dgemm);

/// Dense row-major tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

/// Initial fill for [`Tensor::create`].
#[derive(Clone, Copy, Debug)]
pub enum Init {
    Zeros,
    Full(f64),
    Uniform { lo: f64, hi: f64, seed: u64 },
}

fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() || shape.contains(&0) {
        return Err(Error::InvalidShape {
            shape: shape.to_vec(),
            reason: "extents must be positive and rank at least 1".into(),
        });
    }
    Ok(shape.iter().product())
}

impl<T: Real> Tensor<T> {
    pub fn create(init: Init, shape: &[usize]) -> Result<Self> {
        let len = check_shape(shape)?;
        let data = match init {
            Init::Zeros => vec![T::zero(); len],
            Init::Full(v) => vec![T::of(v); len],
            Init::Uniform { lo, hi, seed } => {
                if !(lo <= hi) {
                    return Err(Error::Contract(format!("uniform bounds {lo} > {hi}")));
                }
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                return Ok(Self::uniform_with(&mut rng, lo, hi, shape));
            }
        };
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::create(Init::Zeros, shape).expect("zeros: invalid shape")
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Self::create(Init::Full(value), shape).expect("full: invalid shape")
    }

    /// Uniform samples in `[lo, hi]` drawn from a caller-owned generator.
    pub fn uniform_with<R: Rng>(rng: &mut R, lo: f64, hi: f64, shape: &[usize]) -> Self {
        let len = check_shape(shape).expect("uniform: invalid shape");
        let data = (0..len)
            .map(|_| {
                let u: f64 = rng.random();
                // rounding can push lo + u*(hi-lo) one ulp past hi
                T::of((lo + u * (hi - lo)).clamp(lo, hi))
            })
            .collect();
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn scalar(value: T) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let len = check_shape(shape)?;
        if len != data.len() {
            return Err(Error::InvalidShape {
                shape: shape.to_vec(),
                reason: format!("expects {len} elements, got {}", data.len()),
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn from_f64(shape: &[usize], data: &[f64]) -> Result<Self> {
        Self::from_vec(shape, data.iter().map(|&v| T::of(v)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// First element; meaningful for scalars.
    pub fn item(&self) -> T {
        self.data[0]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let len = check_shape(shape)?;
        if len != self.data.len() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {:?}", self.shape, shape),
            ));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(
            T::zero(),
            |acc, &v| if v.abs() > acc { v.abs() } else { acc },
        )
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| U::of(v.as_f64())).collect(),
        }
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.as_f64()).collect()
    }

    pub(crate) fn add_assign(&mut self, other: &Tensor<T>) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Local derivative rule of a recorded op.
pub trait Backward<T: Real> {
    fn backward(&self, ctx: &BackwardCtx<'_, T>, grad: &Tensor<T>, sink: &mut GradSink<T>);
}

/// Read access to recorded values during the backward sweep.
pub struct BackwardCtx<'a, T> {
    nodes: &'a [Node<T>],
    output: Var,
}

impl<T> BackwardCtx<'_, T> {
    pub fn value(&self, var: Var) -> &Tensor<T> {
        &self.nodes[var.0].value
    }

    pub fn output(&self) -> &Tensor<T> {
        &self.nodes[self.output.0].value
    }
}

/// Accumulates gradients for inputs that require them.
pub struct GradSink<T> {
    grads: Vec<Option<Tensor<T>>>,
    needs: Vec<bool>,
}

impl<T: Real> GradSink<T> {
    pub fn wants(&self, var: Var) -> bool {
        self.needs[var.0]
    }

    pub fn accumulate(&mut self, var: Var, grad: Tensor<T>) {
        if !self.needs[var.0] {
            return;
        }
        match &mut self.grads[var.0] {
            Some(g) => g.add_assign(&grad),
            slot @ None => *slot = Some(grad),
        }
    }

    /// Accumulate in place into the gradient buffer of `var`, allocating a
    /// zero buffer of `shape` on first touch.
    pub fn accumulate_with(&mut self, var: Var, shape: &[usize], f: impl FnOnce(&mut [T])) {
        if !self.needs[var.0] {
            return;
        }
        let slot = self.grads[var.0].get_or_insert_with(|| Tensor::zeros(shape));
        f(slot.data_mut());
    }
}

struct Node<T> {
    value: Tensor<T>,
    rule: Option<Box<dyn Backward<T>>>,
    requires_grad: bool,
}

/// Recorded computation graph for one forward/backward pass.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    check_finite: bool,
    frozen: bool,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            check_finite: false,
            frozen: false,
        }
    }

    /// Tape for inference: leaves behave like constants, so no op keeps
    /// backward state.
    pub fn frozen() -> Self {
        Tape {
            frozen: true,
            ..Self::new()
        }
    }

    /// Fail fast when any recorded op produces NaN or infinity.
    pub fn with_finite_check(mut self, on: bool) -> Self {
        self.check_finite = on;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Differentiable input.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            rule: None,
            requires_grad: !self.frozen,
        });
        Var(self.nodes.len() - 1)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            rule: None,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, var: Var) -> &Tensor<T> {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    /// Record an op output. `inputs` decides whether the node needs a gradient.
    pub fn push(
        &mut self,
        name: &str,
        value: Tensor<T>,
        inputs: &[Var],
        rule: impl Backward<T> + 'static,
    ) -> Result<Var> {
        if self.check_finite && !value.is_finite() {
            return Err(Error::NonFinite(name.to_string()));
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            rule: requires_grad.then(|| Box::new(rule) as Box<dyn Backward<T>>),
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Gradient of a scalar loss with respect to every node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let value = self.value(loss);
        if !value.is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                value.shape()
            )));
        }
        let seed = Tensor::full(value.shape(), 1.0);
        self.backward_seeded(vec![(loss, seed)])
    }

    /// Backward sweep starting from explicit output gradients. Used when the
    /// loss is evaluated off-tape and only its gradients are fed back.
    pub fn backward_seeded(&self, seeds: Vec<(Var, Tensor<T>)>) -> Result<Gradients<T>> {
        let mut sink = GradSink {
            grads: (0..self.nodes.len()).map(|_| None).collect(),
            needs: self.nodes.iter().map(|n| n.requires_grad).collect(),
        };
        let mut top = 0;
        for (var, grad) in seeds {
            if var.0 >= self.nodes.len() {
                return Err(Error::Contract(format!("seed {var:?} is not on this tape")));
            }
            if grad.shape() != self.value(var).shape() {
                return Err(Error::shape(
                    "backward_seeded",
                    format!(
                        "seed {:?} vs value {:?}",
                        grad.shape(),
                        self.value(var).shape()
                    ),
                ));
            }
            top = top.max(var.0 + 1);
            sink.accumulate(var, grad);
        }
        for idx in (0..top).rev() {
            let Some(rule) = &self.nodes[idx].rule else {
                continue;
            };
            let Some(grad) = sink.grads[idx].take() else {
                continue;
            };
            let ctx = BackwardCtx {
                nodes: &self.nodes,
                output: Var(idx),
            };
            rule.backward(&ctx, &grad, &mut sink);
            sink.grads[idx] = Some(grad);
        }
        Ok(Gradients { grads: sink.grads })
    }
}

/// Result of a backward sweep.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `var`, or zeros shaped like its value when unreached.
    pub fn wrt(&self, tape: &Tape<T>, var: Var) -> Tensor<T> {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(tape.shape(var)))
    }

    pub fn take(&mut self, tape: &Tape<T>, var: Var) -> Tensor<T> {
        self.grads[var.0]
            .take()
            .unwrap_or_else(|| Tensor::zeros(tape.shape(var)))
    }
}

// ---------------------------------------------------------------------------
// Elementary ops

struct AddRule(Var, Var);

impl<T: Real> Backward<T> for AddRule {
    fn backward(&self, _ctx: &BackwardCtx<'_, T>, grad: &Tensor<T>, sink: &mut GradSink<T>) {
        sink.accumulate(self.0, grad.clone());
        sink.accumulate(self.1, grad.clone());
    }
}

struct MulRule(Var, Var);

impl<T: Real> Backward<T> for MulRule {
    fn backward(&self, ctx: &BackwardCtx<'_, T>, grad: &Tensor<T>, sink: &mut GradSink<T>) {
        let (a, b) = (ctx.value(self.0), ctx.value(self.1));
        let g = grad.data();
        if sink.wants(self.0) {
            sink.accumulate_with(self.0, a.shape(), |acc| {
                for ((d, &gi), &bi) in acc.iter_mut().zip(g).zip(b.data()) {
                    *d += gi * bi;
                }
            });
        }
        if sink.wants(self.1) {
            sink.accumulate_with(self.1, b.shape(), |acc| {
                for ((d, &gi), &ai) in acc.iter_mut().zip(g).zip(a.data()) {
                    *d += gi * ai;
                }
            });
        }
    }
}

struct SumRule(Var);

impl<T: Real> Backward<T> for SumRule {
    fn backward(&self, ctx: &BackwardCtx<'_, T>, grad: &Tensor<T>, sink: &mut GradSink<T>) {
        let g = grad.item();
        let shape = ctx.value(self.0).shape().to_vec();
        sink.accumulate_with(self.0, &shape, |acc| {
            for d in acc.iter_mut() {
                *d += g;
            }
        });
    }
}

struct ReshapeRule(Var);

impl<T: Real> Backward<T> for ReshapeRule {
    fn backward(&self, ctx: &BackwardCtx<'_, T>, grad: &Tensor<T>, sink: &mut GradSink<T>) {
        let shape = ctx.value(self.0).shape().to_vec();
        sink.accumulate_with(self.0, &shape, |acc| {
            for (d, &g) in acc.iter_mut().zip(grad.data()) {
                *d += g;
            }
        });
    }
}

struct SliceRule {
    input: Var,
    offset: usize,
}

impl<T: Real> Backward<T> for SliceRule {
    fn backward(&self, ctx: &BackwardCtx<'_, T>, grad: &Tensor<T>, sink: &mut GradSink<T>) {
        let shape = ctx.value(self.input).shape().to_vec();
        let offset = self.offset;
        sink.accumulate_with(self.input, &shape, |acc| {
            for (d, &g) in acc[offset..offset + grad.len()].iter_mut().zip(grad.data()) {
                *d += g;
            }
        });
    }
}

fn same_shape<T: Real>(tape: &Tape<T>, op: &'static str, a: Var, b: Var) -> Result<()> {
    if tape.shape(a) != tape.shape(b) {
        return Err(Error::shape(
            op,
            format!("{:?} vs {:?}", tape.shape(a), tape.shape(b)),
        ));
    }
    Ok(())
}

impl<T: Real> Tape<T> {
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, "add", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let value = Tensor::from_vec(self.shape(a), data)?;
        self.push("add", value, &[a, b], AddRule(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, "mul", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let value = Tensor::from_vec(self.shape(a), data)?;
        self.push("mul", value, &[a, b], MulRule(a, b))
    }

    /// Sum of all elements, as a `[1]` tensor.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(a).sum());
        self.push("sum", value, &[a], SumRule(a))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape)?;
        self.push("reshape", value, &[a], ReshapeRule(a))
    }

    /// Channels `start..start + count` of a `[C, ...]` tensor.
    pub fn slice_channels(&mut self, a: Var, start: usize, count: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if count == 0 || start + count > shape[0] {
            return Err(Error::shape(
                "slice_channels",
                format!("channels {start}..{} of {:?}", start + count, shape),
            ));
        }
        let plane: usize = shape[1..].iter().product();
        let offset = start * plane;
        let data = self.value(a).data()[offset..offset + count * plane].to_vec();
        let mut out_shape = shape;
        out_shape[0] = count;
        let value = Tensor::from_vec(&out_shape, data)?;
        self.push(
            "slice_channels",
            value,
            &[a],
            SliceRule { input: a, offset },
        )
    }
}
