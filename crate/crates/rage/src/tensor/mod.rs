//! Reverse-mode automatic differentiation over dense N-dimensional arrays.
//!
//! Tensors are immutable handles into a dynamically built computation graph.
//! Each operation records its parents; [`Tensor::backward`] replays the graph
//! in reverse topological order and accumulates gradients on the leaf tensors
//! that were created with `requires_grad`.

mod backward;
pub mod fdcheck;
pub(crate) mod kernels;

use std::collections::HashSet;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use thiserror::Error;

pub use fdcheck::finite_diff_check;

/// Scalar element type of a tensor: `f32` for training throughput, `f64`
/// wherever finite-difference tolerances matter.
pub trait Real:
    num_traits::Float
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + std::iter::Sum
    + std::fmt::Debug
    + std::fmt::Display
    + Default
    + Send
    + Sync
    + 'static
{
    const LABEL: &'static str;
    fn of(v: f64) -> Self;
    fn as_f64(self) -> f64;
    fn from_f32(v: f32) -> Self;
    fn as_f32(self) -> f32;
}

impl Real for f32 {
    const LABEL: &'static str = "f32";
    fn of(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
    fn from_f32(v: f32) -> Self {
        v
    }
    fn as_f32(self) -> f32 {
        self
    }
}

impl Real for f64 {
    const LABEL: &'static str = "f64";
    fn of(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
    fn from_f32(v: f32) -> Self {
        v as f64
    }
    fn as_f32(self) -> f32 {
        self as f32
    }
}

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape mismatch in {context}: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        context: &'static str,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("{0}")]
    Invalid(String),
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("backward already ran on this graph; rebuild the graph before running it again")]
    BackwardAlreadyRun,
}

pub type Result<T> = std::result::Result<T, TensorError>;

fn invalid(msg: impl Into<String>) -> TensorError {
    TensorError::Invalid(msg.into())
}

static NEXT_TENSOR_ID: AtomicU64 = AtomicU64::new(1);

/// The operation that produced a tensor, holding handles to its parents and
/// any forward-pass values the backward rule reuses.
pub(crate) enum Op<F: Real> {
    Leaf,
    Conv2d {
        input: Tensor<F>,
        weight: Tensor<F>,
        bias: Tensor<F>,
        stride: usize,
        padding: usize,
    },
    Upsample2x(Tensor<F>),
    Add(Tensor<F>, Tensor<F>),
    Sub(Tensor<F>, Tensor<F>),
    Mul(Tensor<F>, Tensor<F>),
    Neg(Tensor<F>),
    AddScalar(Tensor<F>),
    MulScalar(Tensor<F>, F),
    Sigmoid(Tensor<F>),
    Relu(Tensor<F>),
    Sqrt(Tensor<F>),
    GateMul {
        x: Tensor<F>,
        alpha: Tensor<F>,
    },
    GroupNorm {
        input: Tensor<F>,
        gamma: Tensor<F>,
        beta: Tensor<F>,
        groups: usize,
        mean: Vec<F>,
        rstd: Vec<F>,
    },
    Attention {
        q: Tensor<F>,
        k: Tensor<F>,
        v: Tensor<F>,
        attn: Vec<F>,
    },
    NchwToNtc(Tensor<F>),
    NtcToNchw {
        input: Tensor<F>,
        height: usize,
        width: usize,
    },
    Sum(Tensor<F>),
    Mean(Tensor<F>),
    MagnitudeRi(Tensor<F>),
}

impl<F: Real> Op<F> {
    fn parents(&self) -> Vec<&Tensor<F>> {
        match self {
            Op::Leaf => vec![],
            Op::Conv2d { input, weight, bias, .. } => vec![input, weight, bias],
            Op::Upsample2x(a)
            | Op::Neg(a)
            | Op::AddScalar(a)
            | Op::MulScalar(a, _)
            | Op::Sigmoid(a)
            | Op::Relu(a)
            | Op::Sqrt(a)
            | Op::NchwToNtc(a)
            | Op::Sum(a)
            | Op::Mean(a) => vec![a],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![a, b],
            Op::GateMul { x, alpha } => vec![x, alpha],
            Op::GroupNorm { input, gamma, beta, .. } => vec![input, gamma, beta],
            Op::Attention { q, k, v, .. } => vec![q, k, v],
            Op::NtcToNchw { input, .. } => vec![input],
            Op::MagnitudeRi(a) => vec![a],
        }
    }
}

struct Inner<F: Real> {
    id: u64,
    shape: Vec<usize>,
    data: Vec<F>,
    requires_grad: bool,
    needs_grad: bool,
    op: Op<F>,
    grad: Mutex<Option<Vec<F>>>,
    backward_run: AtomicBool,
}

/// Cheaply cloneable handle to one node of the computation graph.
pub struct Tensor<F: Real>(Arc<Inner<F>>);

impl<F: Real> Clone for Tensor<F> {
    fn clone(&self) -> Self {
        Tensor(Arc::clone(&self.0))
    }
}

impl<F: Real> std::fmt::Debug for Tensor<F> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<F: Real> Tensor<F> {
    fn from_op(data: Vec<F>, shape: Vec<usize>, op: Op<F>) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        let needs_grad = op.parents().iter().any(|p| p.0.needs_grad);
        Tensor(Arc::new(Inner {
            id: NEXT_TENSOR_ID.fetch_add(1, Ordering::Relaxed),
            shape,
            data,
            requires_grad: false,
            needs_grad,
            op,
            grad: Mutex::new(None),
            backward_run: AtomicBool::new(false),
        }))
    }

    /// New leaf tensor; fails when the element count does not match the shape.
    pub fn from_vec(data: Vec<F>, shape: &[usize]) -> Result<Self> {
        if numel(shape) != data.len() {
            return Err(invalid(format!(
                "data length {} does not match shape {:?} ({} elements)",
                data.len(),
                shape,
                numel(shape)
            )));
        }
        Ok(Tensor(Arc::new(Inner {
            id: NEXT_TENSOR_ID.fetch_add(1, Ordering::Relaxed),
            shape: shape.to_vec(),
            data,
            requires_grad: false,
            needs_grad: false,
            op: Op::Leaf,
            grad: Mutex::new(None),
            backward_run: AtomicBool::new(false),
        })))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor::from_vec(vec![F::zero(); numel(shape)], shape).expect("consistent shape")
    }

    pub fn full(shape: &[usize], value: F) -> Self {
        Tensor::from_vec(vec![value; numel(shape)], shape).expect("consistent shape")
    }

    pub fn scalar(value: F) -> Self {
        Tensor::from_vec(vec![value], &[1]).expect("consistent shape")
    }

    /// Leaf tensor that accumulates a gradient during backward.
    pub fn with_grad(data: Vec<F>, shape: &[usize]) -> Result<Self> {
        Ok(Tensor::from_vec(data, shape)?.into_requires_grad())
    }

    fn into_requires_grad(self) -> Self {
        let inner = match Arc::try_unwrap(self.0) {
            Ok(mut inner) => {
                inner.requires_grad = true;
                inner.needs_grad = true;
                inner
            }
            Err(arc) => Inner {
                id: NEXT_TENSOR_ID.fetch_add(1, Ordering::Relaxed),
                shape: arc.shape.clone(),
                data: arc.data.clone(),
                requires_grad: true,
                needs_grad: true,
                op: Op::Leaf,
                grad: Mutex::new(None),
                backward_run: AtomicBool::new(false),
            },
        };
        Tensor(Arc::new(inner))
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn numel(&self) -> usize {
        self.0.data.len()
    }

    pub fn data(&self) -> &[F] {
        &self.0.data
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    /// Copy of the accumulated gradient, if backward has populated one.
    pub fn grad(&self) -> Option<Vec<F>> {
        self.0.grad.lock().expect("grad lock").clone()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.lock().expect("grad lock") = None;
    }

    /// Leaf copy of this tensor's values, detached from the graph.
    pub fn detach(&self) -> Tensor<F> {
        Tensor::from_vec(self.0.data.clone(), &self.0.shape).expect("consistent shape")
    }

    pub(crate) fn accumulate_grad(&self, contribution: &[F]) {
        let mut slot = self.0.grad.lock().expect("grad lock");
        match slot.as_mut() {
            Some(g) => {
                for (gv, &c) in g.iter_mut().zip(contribution.iter()) {
                    *gv += c;
                }
            }
            None => *slot = Some(contribution.to_vec()),
        }
    }

    fn rank4(&self, context: &'static str) -> Result<(usize, usize, usize, usize)> {
        match self.shape() {
            &[n, c, h, w] => Ok((n, c, h, w)),
            other => Err(invalid(format!(
                "{context}: expected a rank-4 [N,C,H,W] tensor, got shape {other:?}"
            ))),
        }
    }

    fn same_shape(&self, other: &Tensor<F>, context: &'static str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(TensorError::ShapeMismatch {
                context,
                expected: self.shape().to_vec(),
                got: other.shape().to_vec(),
            });
        }
        Ok(())
    }

    // ── forward ops ──────────────────────────────────────────────

    pub fn conv2d(
        &self,
        weight: &Tensor<F>,
        bias: &Tensor<F>,
        stride: usize,
        padding: usize,
    ) -> Result<Tensor<F>> {
        let (n, c_in, h, w) = self.rank4("conv2d input")?;
        let (c_out, wc_in, kh, kw) = weight.rank4("conv2d weight")?;
        if wc_in != c_in {
            return Err(TensorError::ShapeMismatch {
                context: "conv2d weight channels",
                expected: vec![c_out, c_in, kh, kw],
                got: weight.shape().to_vec(),
            });
        }
        if bias.shape() != [c_out] {
            return Err(TensorError::ShapeMismatch {
                context: "conv2d bias",
                expected: vec![c_out],
                got: bias.shape().to_vec(),
            });
        }
        if stride == 0 {
            return Err(invalid("conv2d: stride must be positive"));
        }
        if h + 2 * padding < kh || w + 2 * padding < kw {
            return Err(invalid(format!(
                "conv2d: kernel {kh}x{kw} exceeds padded input {}x{} (zero-extent output)",
                h + 2 * padding,
                w + 2 * padding
            )));
        }
        let dims = kernels::ConvDims {
            batch: n,
            c_in,
            h,
            w,
            c_out,
            kh,
            kw,
            stride,
            padding,
            out_h: kernels::conv_out_extent(h, kh, stride, padding),
            out_w: kernels::conv_out_extent(w, kw, stride, padding),
        };
        let out = kernels::conv2d_forward(self.data(), weight.data(), bias.data(), &dims);
        Ok(Tensor::from_op(
            out,
            vec![n, c_out, dims.out_h, dims.out_w],
            Op::Conv2d {
                input: self.clone(),
                weight: weight.clone(),
                bias: bias.clone(),
                stride,
                padding,
            },
        ))
    }

    pub fn upsample2x(&self) -> Result<Tensor<F>> {
        let (n, c, h, w) = self.rank4("upsample2x")?;
        if h == 0 || w == 0 {
            return Err(invalid("upsample2x: spatial extents must be at least 1"));
        }
        let out = kernels::upsample2x_forward(self.data(), n * c, h, w);
        Ok(Tensor::from_op(
            out,
            vec![n, c, 2 * h, 2 * w],
            Op::Upsample2x(self.clone()),
        ))
    }

    pub fn add(&self, other: &Tensor<F>) -> Result<Tensor<F>> {
        self.same_shape(other, "add")?;
        let data = self
            .data()
            .iter()
            .zip(other.data())
            .map(|(&a, &b)| a + b)
            .collect();
        Ok(Tensor::from_op(
            data,
            self.0.shape.clone(),
            Op::Add(self.clone(), other.clone()),
        ))
    }

    pub fn sub(&self, other: &Tensor<F>) -> Result<Tensor<F>> {
        self.same_shape(other, "sub")?;
        let data = self
            .data()
            .iter()
            .zip(other.data())
            .map(|(&a, &b)| a - b)
            .collect();
        Ok(Tensor::from_op(
            data,
            self.0.shape.clone(),
            Op::Sub(self.clone(), other.clone()),
        ))
    }

    pub fn mul(&self, other: &Tensor<F>) -> Result<Tensor<F>> {
        self.same_shape(other, "mul")?;
        let data = self
            .data()
            .iter()
            .zip(other.data())
            .map(|(&a, &b)| a * b)
            .collect();
        Ok(Tensor::from_op(
            data,
            self.0.shape.clone(),
            Op::Mul(self.clone(), other.clone()),
        ))
    }

    pub fn neg(&self) -> Tensor<F> {
        let data = self.data().iter().map(|&a| -a).collect();
        Tensor::from_op(data, self.0.shape.clone(), Op::Neg(self.clone()))
    }

    pub fn add_scalar(&self, s: F) -> Tensor<F> {
        let data = self.data().iter().map(|&a| a + s).collect();
        Tensor::from_op(data, self.0.shape.clone(), Op::AddScalar(self.clone()))
    }

    pub fn mul_scalar(&self, s: F) -> Tensor<F> {
        let data = self.data().iter().map(|&a| a * s).collect();
        Tensor::from_op(data, self.0.shape.clone(), Op::MulScalar(self.clone(), s))
    }

    pub fn sigmoid(&self) -> Tensor<F> {
        let data = self
            .data()
            .iter()
            .map(|&x| {
                // split form avoids exp overflow on either tail
                if x >= F::zero() {
                    (F::one() + (-x).exp()).recip()
                } else {
                    let e = x.exp();
                    e / (F::one() + e)
                }
            })
            .collect();
        Tensor::from_op(data, self.0.shape.clone(), Op::Sigmoid(self.clone()))
    }

    pub fn relu(&self) -> Tensor<F> {
        let data = self
            .data()
            .iter()
            .map(|&x| if x > F::zero() { x } else { F::zero() })
            .collect();
        Tensor::from_op(data, self.0.shape.clone(), Op::Relu(self.clone()))
    }

    pub fn sqrt_elem(&self) -> Tensor<F> {
        let data = self.data().iter().map(|&x| x.sqrt()).collect();
        Tensor::from_op(data, self.0.shape.clone(), Op::Sqrt(self.clone()))
    }

    /// Per-position gating: `self` is [N,C,H,W], `alpha` is [N,1,H,W] and is
    /// applied across every channel.
    pub fn gate_mul(&self, alpha: &Tensor<F>) -> Result<Tensor<F>> {
        let (n, c, h, w) = self.rank4("gate_mul input")?;
        let (an, ac, ah, aw) = alpha.rank4("gate_mul alpha")?;
        if (an, ac, ah, aw) != (n, 1, h, w) {
            return Err(TensorError::ShapeMismatch {
                context: "gate_mul alpha",
                expected: vec![n, 1, h, w],
                got: alpha.shape().to_vec(),
            });
        }
        let hw = h * w;
        let mut data = vec![F::zero(); self.numel()];
        for nn in 0..n {
            let a = &alpha.data()[nn * hw..(nn + 1) * hw];
            for cc in 0..c {
                let off = (nn * c + cc) * hw;
                let x = &self.data()[off..off + hw];
                let y = &mut data[off..off + hw];
                for ((yv, &xv), &av) in y.iter_mut().zip(x.iter()).zip(a.iter()) {
                    *yv = xv * av;
                }
            }
        }
        Ok(Tensor::from_op(
            data,
            self.0.shape.clone(),
            Op::GateMul {
                x: self.clone(),
                alpha: alpha.clone(),
            },
        ))
    }

    pub fn group_norm(
        &self,
        gamma: &Tensor<F>,
        beta: &Tensor<F>,
        groups: usize,
        eps: f64,
    ) -> Result<Tensor<F>> {
        let (n, c, h, w) = self.rank4("group_norm input")?;
        if groups == 0 || c % groups != 0 {
            return Err(invalid(format!(
                "group_norm: {groups} groups do not divide {c} channels"
            )));
        }
        if gamma.shape() != [c] || beta.shape() != [c] {
            return Err(TensorError::ShapeMismatch {
                context: "group_norm affine",
                expected: vec![c],
                got: gamma.shape().to_vec(),
            });
        }
        let stats = kernels::group_norm_forward(
            self.data(),
            gamma.data(),
            beta.data(),
            n,
            c,
            h * w,
            groups,
            eps,
        );
        Ok(Tensor::from_op(
            stats.out,
            self.0.shape.clone(),
            Op::GroupNorm {
                input: self.clone(),
                gamma: gamma.clone(),
                beta: beta.clone(),
                groups,
                mean: stats.mean,
                rstd: stats.rstd,
            },
        ))
    }

    /// softmax(q k^T / sqrt(Dk)) v for [N,T,Dk] queries/keys and [N,T,Dv] values.
    pub fn scaled_dot_attention(q: &Tensor<F>, k: &Tensor<F>, v: &Tensor<F>) -> Result<Tensor<F>> {
        let (n, t, dk) = match q.shape() {
            &[n, t, dk] => (n, t, dk),
            other => {
                return Err(invalid(format!(
                    "scaled_dot_attention: expected rank-3 [N,T,Dk] query, got {other:?}"
                )))
            }
        };
        if dk == 0 {
            return Err(invalid("scaled_dot_attention: key dimension must be positive"));
        }
        q.same_shape(k, "scaled_dot_attention keys")?;
        let dv = match v.shape() {
            &[vn, vt, dv] if vn == n && vt == t => dv,
            other => {
                return Err(TensorError::ShapeMismatch {
                    context: "scaled_dot_attention values",
                    expected: vec![n, t, 0],
                    got: other.to_vec(),
                })
            }
        };
        let fwd = kernels::attention_forward(q.data(), k.data(), v.data(), n, t, dk, dv);
        Ok(Tensor::from_op(
            fwd.out,
            vec![n, t, dv],
            Op::Attention {
                q: q.clone(),
                k: k.clone(),
                v: v.clone(),
                attn: fwd.attn,
            },
        ))
    }

    /// [N,C,H,W] -> [N, H*W, C]: spatial positions become the sequence axis.
    pub fn nchw_to_ntc(&self) -> Result<Tensor<F>> {
        let (n, c, h, w) = self.rank4("nchw_to_ntc")?;
        let hw = h * w;
        let mut data = vec![F::zero(); self.numel()];
        for nn in 0..n {
            for cc in 0..c {
                let src = &self.data()[(nn * c + cc) * hw..(nn * c + cc + 1) * hw];
                for (t, &v) in src.iter().enumerate() {
                    data[(nn * hw + t) * c + cc] = v;
                }
            }
        }
        Ok(Tensor::from_op(
            data,
            vec![n, hw, c],
            Op::NchwToNtc(self.clone()),
        ))
    }

    /// [N, T, C] -> [N,C,H,W] with T = height * width.
    pub fn ntc_to_nchw(&self, height: usize, width: usize) -> Result<Tensor<F>> {
        let (n, t, c) = match self.shape() {
            &[n, t, c] => (n, t, c),
            other => {
                return Err(invalid(format!(
                    "ntc_to_nchw: expected rank-3 [N,T,C], got {other:?}"
                )))
            }
        };
        if height * width != t {
            return Err(invalid(format!(
                "ntc_to_nchw: {height}x{width} does not match sequence length {t}"
            )));
        }
        let hw = t;
        let mut data = vec![F::zero(); self.numel()];
        for nn in 0..n {
            for tt in 0..t {
                let src = &self.data()[(nn * t + tt) * c..(nn * t + tt + 1) * c];
                for (cc, &v) in src.iter().enumerate() {
                    data[(nn * c + cc) * hw + tt] = v;
                }
            }
        }
        Ok(Tensor::from_op(
            data,
            vec![n, c, height, width],
            Op::NtcToNchw {
                input: self.clone(),
                height,
                width,
            },
        ))
    }

    pub fn sum(&self) -> Tensor<F> {
        let mut acc = F::zero();
        for &v in self.data() {
            acc = acc + v;
        }
        Tensor::from_op(vec![acc], vec![1], Op::Sum(self.clone()))
    }

    pub fn mean(&self) -> Result<Tensor<F>> {
        if self.numel() == 0 {
            return Err(invalid("mean of an empty tensor"));
        }
        let mut acc = F::zero();
        for &v in self.data() {
            acc = acc + v;
        }
        Ok(Tensor::from_op(
            vec![acc / F::of(self.numel() as f64)],
            vec![1],
            Op::Mean(self.clone()),
        ))
    }

    /// [N,2,H,W] -> [N,1,H,W]: sqrt(re^2 + im^2 + eps) over the two channels.
    pub fn magnitude_ri(&self, eps: f64) -> Result<Tensor<F>> {
        let (n, c, h, w) = self.rank4("magnitude_ri")?;
        if c != 2 {
            return Err(invalid(format!(
                "magnitude_ri: expected exactly 2 channels (real, imaginary), got {c}"
            )));
        }
        let hw = h * w;
        let epsf = F::of(eps);
        let mut data = vec![F::zero(); n * hw];
        for nn in 0..n {
            let re = &self.data()[nn * 2 * hw..nn * 2 * hw + hw];
            let im = &self.data()[nn * 2 * hw + hw..(nn + 1) * 2 * hw];
            let out = &mut data[nn * hw..(nn + 1) * hw];
            for ((o, &r), &i) in out.iter_mut().zip(re.iter()).zip(im.iter()) {
                *o = (r * r + i * i + epsf).sqrt();
            }
        }
        Ok(Tensor::from_op(
            data,
            vec![n, 1, h, w],
            Op::MagnitudeRi(self.clone()),
        ))
    }

    // ── backward ─────────────────────────────────────────────────

    /// Populate gradients of every `requires_grad` leaf reachable from this
    /// scalar. Fails on non-scalar tensors and on repeated invocation.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(TensorError::NonScalarLoss(self.shape().to_vec()));
        }
        if self.0.backward_run.swap(true, Ordering::SeqCst) {
            return Err(TensorError::BackwardAlreadyRun);
        }
        backward::run(self);
        Ok(())
    }

    fn topo_order(&self) -> Vec<Tensor<F>> {
        let mut order = Vec::new();
        let mut visited: HashSet<u64> = HashSet::new();
        let mut stack: Vec<(Tensor<F>, bool)> = vec![(self.clone(), false)];
        while let Some((node, expanded)) = stack.pop() {
            if expanded {
                order.push(node);
                continue;
            }
            if !visited.insert(node.id()) {
                continue;
            }
            stack.push((node.clone(), true));
            for p in node.0.op.parents() {
                if p.0.needs_grad && !visited.contains(&p.id()) {
                    stack.push((p.clone(), false));
                }
            }
        }
        order
    }
}

/// Named trainable tensor; the dotted name encodes the module path so
/// checkpoints stay order-independent.
#[derive(Clone)]
pub struct Parameter<F: Real> {
    pub name: String,
    pub tensor: Tensor<F>,
}

/// Leaf tensor initialized for training (gradient-accumulating).
pub fn param_tensor<F: Real>(data: Vec<F>, shape: &[usize]) -> Result<Tensor<F>> {
    Ok(Tensor::from_vec(data, shape)?.into_requires_grad())
}
