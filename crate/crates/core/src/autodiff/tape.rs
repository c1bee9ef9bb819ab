//! Reverse-mode tape over dense tensors.
//!
//! A [`Tape`] records forward operations as an append-only node list in
//! topological order; [`Tape::backward`] runs the chain rule over that list in
//! reverse. Tapes are single-writer: independent tapes may run on separate
//! threads, gradient extraction is exclusive per tape.
//!
//! Results are recorded only when at least one input is recorded, so the same
//! code path doubles as a plain evaluator when fed constants or when the tape
//! is constructed with [`Tape::inference`].

use super::scalar::Scalar;
use super::tensor::{NodeRef, Tensor};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use thiserror::Error;

static TAPE_COUNTER: AtomicU64 = AtomicU64::new(1);

#[derive(Debug, Error)]
pub enum AutodiffError {
    #[error("{op}: shape mismatch: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("{op}: produced non-finite values")]
    NonFinite { op: &'static str },
    #[error("{op}: {detail}")]
    Domain { op: &'static str, detail: String },
    #[error("backward requires a scalar loss, got {len} elements")]
    NotScalar { len: usize },
    #[error("tensor is not recorded on this tape")]
    NotRecorded,
    #[error("tensor belongs to a different tape")]
    ForeignTape,
}

pub type Result<V> = std::result::Result<V, AutodiffError>;

/// A differentiable operation supplied from outside the op enum (the soft
/// rasterizer registers itself through this).
pub trait CustomOp<T: Scalar>: Send + Sync {
    fn name(&self) -> &'static str;
    /// Gradient w.r.t. each input. `needed[i]` is false when input `i` is a
    /// constant; the implementation may return `None` for those slots.
    fn backward(
        &self,
        inputs: &[Tensor<T>],
        output: &Tensor<T>,
        out_grad: &[T],
        needed: &[bool],
    ) -> Vec<Option<Vec<T>>>;
}

enum Op<T: Scalar> {
    Leaf,
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Exp,
    Ln,
    Sqrt,
    Sin,
    Cos,
    Tanh,
    Sigmoid,
    Softplus,
    Relu,
    WrapAngle,
    Atan2,
    Max,
    Min,
    Sum,
    Mean,
    Matmul,
    Conv2d { stride: usize, padding: usize },
    Slice { start: usize },
    Concat,
    Broadcast,
    Reshape,
    Custom(Arc<dyn CustomOp<T>>),
}

enum Input<T: Scalar> {
    Node(usize),
    Const(Tensor<T>),
}

struct Node<T: Scalar> {
    op: Op<T>,
    inputs: Vec<Input<T>>,
}

pub struct Tape<T: Scalar> {
    tag: u64,
    nodes: Vec<Node<T>>,
    values: Vec<Tensor<T>>,
    recording: bool,
}

/// Gradients extracted from one backward pass, keyed by node.
pub struct Gradients<T: Scalar> {
    tape_tag: u64,
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient w.r.t. a recorded tensor; `None` when no gradient reached it.
    pub fn get(&self, t: &Tensor<T>) -> Option<&Tensor<T>> {
        let node = t.node?;
        if node.tape_tag != self.tape_tag {
            return None;
        }
        self.grads.get(node.index).and_then(|g| g.as_ref())
    }

    /// Like `get` but returns a zero tensor of the right shape when the
    /// gradient never reached the tensor.
    pub fn get_or_zeros(&self, t: &Tensor<T>) -> Tensor<T> {
        self.get(t)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(t.shape().to_vec()))
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            tag: TAPE_COUNTER.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            values: Vec::new(),
            recording: true,
        }
    }

    /// A tape that evaluates without recording; backward is unavailable.
    pub fn inference() -> Self {
        let mut t = Tape::new();
        t.recording = false;
        t
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    /// Registers a tensor as a differentiable leaf.
    pub fn leaf(&mut self, t: &Tensor<T>) -> Tensor<T> {
        if !self.recording {
            return t.detached();
        }
        let idx = self.nodes.len();
        self.nodes.push(Node {
            op: Op::Leaf,
            inputs: vec![],
        });
        let out = t.detached().with_node(NodeRef {
            tape_tag: self.tag,
            index: idx,
        });
        self.values.push(out.clone());
        out
    }

    fn input_of(&self, t: &Tensor<T>) -> Result<Input<T>> {
        match t.node {
            Some(nr) if nr.tape_tag == self.tag => Ok(Input::Node(nr.index)),
            Some(_) => Err(AutodiffError::ForeignTape),
            None => Ok(Input::Const(t.detached())),
        }
    }

    fn record(
        &mut self,
        name: &'static str,
        op: Op<T>,
        inputs: Vec<Input<T>>,
        value: Tensor<T>,
    ) -> Result<Tensor<T>> {
        if !value.all_finite() {
            return Err(AutodiffError::NonFinite { op: name });
        }
        let any_recorded = inputs.iter().any(|i| matches!(i, Input::Node(_)));
        if self.recording && any_recorded {
            let idx = self.nodes.len();
            self.nodes.push(Node { op, inputs });
            let out = value.with_node(NodeRef {
                tape_tag: self.tag,
                index: idx,
            });
            self.values.push(out.clone());
            Ok(out)
        } else {
            Ok(value)
        }
    }

    // ---- elementwise binary ----

    fn binary(
        &mut self,
        name: &'static str,
        op: Op<T>,
        a: &Tensor<T>,
        b: &Tensor<T>,
        f: impl Fn(T, T) -> T,
    ) -> Result<Tensor<T>> {
        let (data, shape) = broadcast_zip(name, a, b, f)?;
        let value = Tensor::from_vec(shape, data);
        self.record(name, op, vec![self.input_of(a)?, self.input_of(b)?], value)
    }

    pub fn add(&mut self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary("add", Op::Add, a, b, |x, y| x + y)
    }

    pub fn sub(&mut self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary("sub", Op::Sub, a, b, |x, y| x - y)
    }

    pub fn mul(&mut self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary("mul", Op::Mul, a, b, |x, y| x * y)
    }

    pub fn div(&mut self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        if b.data().iter().any(|&v| v == T::ZERO) {
            return Err(AutodiffError::Domain {
                op: "div",
                detail: "division by zero".into(),
            });
        }
        self.binary("div", Op::Div, a, b, |x, y| x / y)
    }

    /// atan2(y, x), elementwise.
    pub fn atan2(&mut self, y: &Tensor<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        {
            let (probe, _) = broadcast_zip("atan2", y, x, |yy, xx| {
                if yy == T::ZERO && xx == T::ZERO {
                    T::from_f64(f64::NAN)
                } else {
                    T::ZERO
                }
            })?;
            if probe.iter().any(|v| !v.is_finite()) {
                return Err(AutodiffError::Domain {
                    op: "atan2",
                    detail: "undefined at the origin".into(),
                });
            }
        }
        self.binary("atan2", Op::Atan2, y, x, |yy, xx| yy.atan2(xx))
    }

    pub fn max(&mut self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary("max", Op::Max, a, b, |x, y| x.maximum(y))
    }

    pub fn min(&mut self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary("min", Op::Min, a, b, |x, y| x.minimum(y))
    }

    // ---- elementwise unary ----

    fn unary(
        &mut self,
        name: &'static str,
        op: Op<T>,
        a: &Tensor<T>,
        f: impl Fn(T) -> T,
    ) -> Result<Tensor<T>> {
        let data: Vec<T> = a.data().iter().map(|&x| f(x)).collect();
        let value = Tensor::from_vec(a.shape().to_vec(), data);
        self.record(name, op, vec![self.input_of(a)?], value)
    }

    pub fn neg(&mut self, a: &Tensor<T>) -> Result<Tensor<T>> {
        self.unary("neg", Op::Neg, a, |x| -x)
    }

    pub fn exp(&mut self, a: &Tensor<T>) -> Result<Tensor<T>> {
        self.unary("exp", Op::Exp, a, |x| x.exp())
    }

    pub fn ln(&mut self, a: &Tensor<T>) -> Result<Tensor<T>> {
        if a.data().iter().any(|&v| v <= T::ZERO) {
            return Err(AutodiffError::Domain {
                op: "ln",
                detail: "log of non-positive value".into(),
            });
        }
        self.unary("ln", Op::Ln, a, |x| x.ln())
    }

    pub fn sqrt(&mut self, a: &Tensor<T>) -> Result<Tensor<T>> {
        if a.data().iter().any(|&v| v < T::ZERO) {
            return Err(AutodiffError::Domain {
                op: "sqrt",
                detail: "square root of negative value".into(),
            });
        }
        self.unary("sqrt", Op::Sqrt, a, |x| x.sqrt())
    }

    pub fn sin(&mut self, a: &Tensor<T>) -> Result<Tensor<T>> {
        self.unary("sin", Op::Sin, a, |x| x.sin())
    }

    pub fn cos(&mut self, a: &Tensor<T>) -> Result<Tensor<T>> {
        self.unary("cos", Op::Cos, a, |x| x.cos())
    }

    pub fn tanh(&mut self, a: &Tensor<T>) -> Result<Tensor<T>> {
        self.unary("tanh", Op::Tanh, a, |x| x.tanh())
    }

    pub fn sigmoid(&mut self, a: &Tensor<T>) -> Result<Tensor<T>> {
        self.unary("sigmoid", Op::Sigmoid, a, |x| x.sigmoid())
    }

    pub fn softplus(&mut self, a: &Tensor<T>) -> Result<Tensor<T>> {
        self.unary("softplus", Op::Softplus, a, |x| x.softplus())
    }

    pub fn relu(&mut self, a: &Tensor<T>) -> Result<Tensor<T>> {
        self.unary("relu", Op::Relu, a, |x| x.maximum(T::ZERO))
    }

    /// Elementwise wrap into `(-pi, pi]`; the derivative is 1 everywhere
    /// (the wrap is a piecewise shift by multiples of 2 pi).
    pub fn wrap_angle(&mut self, a: &Tensor<T>) -> Result<Tensor<T>> {
        self.unary("wrap_angle", Op::WrapAngle, a, |x| x.wrap_angle())
    }

    // ---- reductions ----

    pub fn sum(&mut self, a: &Tensor<T>) -> Result<Tensor<T>> {
        let mut acc = T::ZERO;
        for &v in a.data() {
            acc += v;
        }
        let value = Tensor::scalar(acc);
        self.record("sum", Op::Sum, vec![self.input_of(a)?], value)
    }

    pub fn mean(&mut self, a: &Tensor<T>) -> Result<Tensor<T>> {
        if a.is_empty() {
            return Err(AutodiffError::Domain {
                op: "mean",
                detail: "mean of empty tensor".into(),
            });
        }
        let mut acc = T::ZERO;
        for &v in a.data() {
            acc += v;
        }
        let value = Tensor::scalar(acc / T::from_f64(a.len() as f64));
        self.record("mean", Op::Mean, vec![self.input_of(a)?], value)
    }

    // ---- shape ops ----

    /// Flat slice over the underlying row-major buffer.
    pub fn slice(&mut self, a: &Tensor<T>, start: usize, end: usize) -> Result<Tensor<T>> {
        if start > end || end > a.len() {
            return Err(AutodiffError::ShapeMismatch {
                op: "slice",
                detail: format!("range {start}..{end} out of bounds for length {}", a.len()),
            });
        }
        let value = Tensor::from_vec(vec![end - start], a.data()[start..end].to_vec());
        self.record("slice", Op::Slice { start }, vec![self.input_of(a)?], value)
    }

    /// Flat concatenation; the result is one-dimensional.
    pub fn concat(&mut self, parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
        if parts.is_empty() {
            return Err(AutodiffError::ShapeMismatch {
                op: "concat",
                detail: "no inputs".into(),
            });
        }
        let total: usize = parts.iter().map(|p| p.len()).sum();
        let mut data = Vec::with_capacity(total);
        for p in parts {
            data.extend_from_slice(p.data());
        }
        let inputs: Result<Vec<_>> = parts.iter().map(|p| self.input_of(p)).collect();
        self.record(
            "concat",
            Op::Concat,
            inputs?,
            Tensor::from_vec(vec![total], data),
        )
    }

    pub fn reshape(&mut self, a: &Tensor<T>, shape: Vec<usize>) -> Result<Tensor<T>> {
        let n: usize = shape.iter().product();
        if n != a.len() {
            return Err(AutodiffError::ShapeMismatch {
                op: "reshape",
                detail: format!("cannot reshape {} elements to {:?}", a.len(), shape),
            });
        }
        let value = Tensor::from_vec(shape, a.data().to_vec());
        self.record("reshape", Op::Reshape, vec![self.input_of(a)?], value)
    }

    /// Broadcasts a one-element tensor to `shape`, or a `[C]` tensor to
    /// `[C, H, W]` (per-channel fill).
    pub fn broadcast(&mut self, a: &Tensor<T>, shape: Vec<usize>) -> Result<Tensor<T>> {
        let n: usize = shape.iter().product();
        let value = if a.len() == 1 {
            Tensor::from_vec(shape, vec![a.data()[0]; n])
        } else if a.shape().len() == 1 && shape.len() == 3 && shape[0] == a.len() {
            let per = shape[1] * shape[2];
            let mut data = Vec::with_capacity(n);
            for &c in a.data() {
                data.extend(std::iter::repeat(c).take(per));
            }
            Tensor::from_vec(shape, data)
        } else if a.shape() == shape.as_slice() {
            a.detached()
        } else {
            return Err(AutodiffError::ShapeMismatch {
                op: "broadcast",
                detail: format!("cannot broadcast {:?} to {:?}", a.shape(), shape),
            });
        };
        self.record("broadcast", Op::Broadcast, vec![self.input_of(a)?], value)
    }

    // ---- contractions ----

    pub fn matmul(&mut self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        let (m, k, n) = matmul_dims(a, b)?;
        let mut out = vec![T::ZERO; m * n];
        matmul_raw(a.data(), b.data(), &mut out, m, k, n);
        self.record(
            "matmul",
            Op::Matmul,
            vec![self.input_of(a)?, self.input_of(b)?],
            Tensor::from_vec(vec![m, n], out),
        )
    }

    /// 2D cross-correlation (no kernel flip): input `[C,H,W]`, weight
    /// `[O,C,kh,kw]`, optional bias `[O]`.
    pub fn conv2d(
        &mut self,
        input: &Tensor<T>,
        weight: &Tensor<T>,
        bias: Option<&Tensor<T>>,
        stride: usize,
        padding: usize,
    ) -> Result<Tensor<T>> {
        let geom = ConvGeom::new(input.shape(), weight.shape(), stride, padding)?;
        if let Some(b) = bias {
            if b.shape() != [geom.c_out] {
                return Err(AutodiffError::ShapeMismatch {
                    op: "conv2d",
                    detail: format!(
                        "bias shape {:?} does not match {} output channels",
                        b.shape(),
                        geom.c_out
                    ),
                });
            }
        }
        let cols = geom.im2col(input.data());
        let mut out = vec![T::ZERO; geom.c_out * geom.out_hw()];
        matmul_raw(
            weight.data(),
            &cols,
            &mut out,
            geom.c_out,
            geom.ckk(),
            geom.out_hw(),
        );
        if let Some(b) = bias {
            for (o, &bo) in b.data().iter().enumerate() {
                for v in &mut out[o * geom.out_hw()..(o + 1) * geom.out_hw()] {
                    *v += bo;
                }
            }
        }
        let mut inputs = vec![self.input_of(input)?, self.input_of(weight)?];
        if let Some(b) = bias {
            inputs.push(self.input_of(b)?);
        }
        self.record(
            "conv2d",
            Op::Conv2d { stride, padding },
            inputs,
            Tensor::from_vec(vec![geom.c_out, geom.h_out, geom.w_out], out),
        )
    }

    /// Records an externally computed differentiable operation.
    pub fn custom(
        &mut self,
        op: Arc<dyn CustomOp<T>>,
        inputs: &[&Tensor<T>],
        value: Tensor<T>,
    ) -> Result<Tensor<T>> {
        let name = op.name();
        let ins: Result<Vec<_>> = inputs.iter().map(|t| self.input_of(t)).collect();
        self.record(name, Op::Custom(op), ins?, value)
    }

    // ---- reverse pass ----

    /// Runs the chain rule from a scalar loss back over the whole tape.
    pub fn backward(&self, loss: &Tensor<T>) -> Result<Gradients<T>> {
        if loss.len() != 1 {
            return Err(AutodiffError::NotScalar { len: loss.len() });
        }
        let root = match loss.node {
            Some(nr) if nr.tape_tag == self.tag => nr.index,
            Some(_) => return Err(AutodiffError::ForeignTape),
            None => return Err(AutodiffError::NotRecorded),
        };
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[root] = Some(vec![T::ONE]);

        for idx in (0..=root).rev() {
            let Some(out_grad) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            let out_val = &self.values[idx];
            let needed: Vec<bool> = node
                .inputs
                .iter()
                .map(|i| matches!(i, Input::Node(_)))
                .collect();
            if !needed.iter().any(|&n| n) {
                grads[idx] = Some(out_grad);
                continue;
            }
            let in_vals: Vec<&Tensor<T>> = node
                .inputs
                .iter()
                .map(|i| match i {
                    Input::Node(j) => &self.values[*j],
                    Input::Const(t) => t,
                })
                .collect();
            let input_grads = backward_op(&node.op, &in_vals, out_val, &out_grad, &needed);
            for (inp, g) in node.inputs.iter().zip(input_grads) {
                let (Input::Node(j), Some(g)) = (inp, g) else {
                    continue;
                };
                match &mut grads[*j] {
                    Some(acc) => {
                        for (a, b) in acc.iter_mut().zip(&g) {
                            *a += *b;
                        }
                    }
                    slot @ None => *slot = Some(g),
                }
            }
            grads[idx] = Some(out_grad);
        }

        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| g.map(|g| Tensor::from_vec(self.values[i].shape().to_vec(), g)))
            .collect();
        Ok(Gradients {
            tape_tag: self.tag,
            grads,
        })
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Tape::new()
    }
}

// ---- kernels ----

fn broadcast_zip<T: Scalar>(
    op: &'static str,
    a: &Tensor<T>,
    b: &Tensor<T>,
    f: impl Fn(T, T) -> T,
) -> Result<(Vec<T>, Vec<usize>)> {
    let (ad, bd) = (a.data(), b.data());
    if a.shape() == b.shape() {
        Ok((
            ad.iter().zip(bd).map(|(&x, &y)| f(x, y)).collect(),
            a.shape().to_vec(),
        ))
    } else if b.len() == 1 {
        let y = bd[0];
        Ok((ad.iter().map(|&x| f(x, y)).collect(), a.shape().to_vec()))
    } else if a.len() == 1 {
        let x = ad[0];
        Ok((bd.iter().map(|&y| f(x, y)).collect(), b.shape().to_vec()))
    } else {
        Err(AutodiffError::ShapeMismatch {
            op,
            detail: format!("{:?} vs {:?}", a.shape(), b.shape()),
        })
    }
}

/// Reduces an elementwise gradient back to an operand that may have been
/// scalar-broadcast.
fn reduce_to_operand<T: Scalar>(grad: &[T], operand_len: usize) -> Vec<T> {
    if operand_len == grad.len() {
        grad.to_vec()
    } else {
        debug_assert_eq!(operand_len, 1);
        let mut acc = T::ZERO;
        for &g in grad {
            acc += g;
        }
        vec![acc]
    }
}

/// Elementwise chain: local derivative as a function of (a, b, out), applied
/// with the same broadcasting as the forward op.
fn binary_grads<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    out_grad: &[T],
    needed: &[bool],
    da: impl Fn(T, T) -> T,
    db: impl Fn(T, T) -> T,
) -> Vec<Option<Vec<T>>> {
    let full = |side: &dyn Fn(T, T) -> T| -> Vec<T> {
        let (ad, bd) = (a.data(), b.data());
        let n = out_grad.len();
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let x = ad[if ad.len() == 1 { 0 } else { i }];
            let y = bd[if bd.len() == 1 { 0 } else { i }];
            out.push(side(x, y) * out_grad[i]);
        }
        out
    };
    let ga = needed[0].then(|| reduce_to_operand(&full(&da), a.len()));
    let gb = needed[1].then(|| reduce_to_operand(&full(&db), b.len()));
    vec![ga, gb]
}

fn unary_grad<T: Scalar>(
    a: &Tensor<T>,
    out: &Tensor<T>,
    out_grad: &[T],
    d: impl Fn(T, T) -> T,
) -> Vec<Option<Vec<T>>> {
    let ad = a.data();
    let od = out.data();
    vec![Some(
        out_grad
            .iter()
            .enumerate()
            .map(|(i, &g)| d(ad[i], od[i]) * g)
            .collect(),
    )]
}

fn backward_op<T: Scalar>(
    op: &Op<T>,
    inputs: &[&Tensor<T>],
    output: &Tensor<T>,
    out_grad: &[T],
    needed: &[bool],
) -> Vec<Option<Vec<T>>> {
    let two = T::from_f64(2.0);
    match op {
        Op::Leaf => vec![],
        Op::Add => binary_grads(
            inputs[0],
            inputs[1],
            out_grad,
            needed,
            |_, _| T::ONE,
            |_, _| T::ONE,
        ),
        Op::Sub => binary_grads(
            inputs[0],
            inputs[1],
            out_grad,
            needed,
            |_, _| T::ONE,
            |_, _| -T::ONE,
        ),
        Op::Mul => binary_grads(inputs[0], inputs[1], out_grad, needed, |_, y| y, |x, _| x),
        Op::Div => binary_grads(
            inputs[0],
            inputs[1],
            out_grad,
            needed,
            |_, y| T::ONE / y,
            |x, y| -x / (y * y),
        ),
        Op::Atan2 => binary_grads(
            inputs[0],
            inputs[1],
            out_grad,
            needed,
            |y, x| x / (x * x + y * y),
            |y, x| -y / (x * x + y * y),
        ),
        // Ties get zero on both sides: the subgradient convention is
        // "derivative at the kink = 0".
        Op::Max => binary_grads(
            inputs[0],
            inputs[1],
            out_grad,
            needed,
            |x, y| if x > y { T::ONE } else { T::ZERO },
            |x, y| if y > x { T::ONE } else { T::ZERO },
        ),
        Op::Min => binary_grads(
            inputs[0],
            inputs[1],
            out_grad,
            needed,
            |x, y| if x < y { T::ONE } else { T::ZERO },
            |x, y| if y < x { T::ONE } else { T::ZERO },
        ),
        Op::Neg => unary_grad(inputs[0], output, out_grad, |_, _| -T::ONE),
        Op::Exp => unary_grad(inputs[0], output, out_grad, |_, y| y),
        Op::Ln => unary_grad(inputs[0], output, out_grad, |x, _| T::ONE / x),
        Op::Sqrt => unary_grad(inputs[0], output, out_grad, move |_, y| T::ONE / (two * y)),
        Op::Sin => unary_grad(inputs[0], output, out_grad, |x, _| x.cos()),
        Op::Cos => unary_grad(inputs[0], output, out_grad, |x, _| -x.sin()),
        Op::Tanh => unary_grad(inputs[0], output, out_grad, |_, y| T::ONE - y * y),
        Op::Sigmoid => unary_grad(inputs[0], output, out_grad, |_, y| y * (T::ONE - y)),
        Op::Softplus => unary_grad(inputs[0], output, out_grad, |x, _| x.sigmoid()),
        Op::Relu => unary_grad(inputs[0], output, out_grad, |x, _| {
            if x > T::ZERO {
                T::ONE
            } else {
                T::ZERO
            }
        }),
        Op::WrapAngle => unary_grad(inputs[0], output, out_grad, |_, _| T::ONE),
        Op::Sum => {
            let g = out_grad[0];
            vec![Some(vec![g; inputs[0].len()])]
        }
        Op::Mean => {
            let g = out_grad[0] / T::from_f64(inputs[0].len() as f64);
            vec![Some(vec![g; inputs[0].len()])]
        }
        Op::Matmul => {
            let (a, b) = (inputs[0], inputs[1]);
            let (m, k) = (a.shape()[0], a.shape()[1]);
            let n = b.shape()[1];
            // dA = G B^T, dB = A^T G
            let ga = needed[0].then(|| {
                let mut out = vec![T::ZERO; m * k];
                matmul_bt(out_grad, b.data(), &mut out, m, n, k);
                out
            });
            let gb = needed[1].then(|| {
                let mut out = vec![T::ZERO; k * n];
                matmul_at(a.data(), out_grad, &mut out, m, k, n);
                out
            });
            vec![ga, gb]
        }
        Op::Conv2d { stride, padding } => {
            let geom = ConvGeom::new(inputs[0].shape(), inputs[1].shape(), *stride, *padding)
                .expect("forward validated conv geometry");
            conv2d_backward(&geom, inputs, out_grad, needed)
        }
        Op::Slice { start } => {
            let mut g = vec![T::ZERO; inputs[0].len()];
            g[*start..*start + out_grad.len()].copy_from_slice(out_grad);
            vec![Some(g)]
        }
        Op::Concat => {
            let mut offset = 0;
            inputs
                .iter()
                .zip(needed)
                .map(|(inp, &need)| {
                    let n = inp.len();
                    let g = need.then(|| out_grad[offset..offset + n].to_vec());
                    offset += n;
                    g
                })
                .collect()
        }
        Op::Broadcast => {
            let src = inputs[0];
            let g = if src.len() == 1 {
                let mut acc = T::ZERO;
                for &v in out_grad {
                    acc += v;
                }
                vec![acc]
            } else if src.len() == out_grad.len() {
                out_grad.to_vec()
            } else {
                // [C] -> [C, H, W]
                let per = out_grad.len() / src.len();
                out_grad
                    .chunks(per)
                    .map(|chunk| {
                        let mut acc = T::ZERO;
                        for &v in chunk {
                            acc += v;
                        }
                        acc
                    })
                    .collect()
            };
            vec![Some(g)]
        }
        Op::Reshape => vec![Some(out_grad.to_vec())],
        Op::Custom(c) => c.backward(
            &inputs.iter().map(|t| (*t).clone()).collect::<Vec<_>>(),
            output,
            out_grad,
            needed,
        ),
    }
}

// out[m,n] += a[m,k] * b[k,n]
pub fn matmul_raw<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        for (kk, &av) in a_row.iter().enumerate() {
            let b_row = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

// out[m,k] += g[m,n] * b[k,n]^T   (dot of contiguous rows)
fn matmul_bt<T: Scalar>(g: &[T], b: &[T], out: &mut [T], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let g_row = &g[i * n..(i + 1) * n];
        for j in 0..k {
            let b_row = &b[j * n..(j + 1) * n];
            let mut acc = T::ZERO;
            for (&gv, &bv) in g_row.iter().zip(b_row) {
                acc += gv * bv;
            }
            out[i * k + j] += acc;
        }
    }
}

// out[k,n] += a[m,k]^T * g[m,n]   (axpy per row)
fn matmul_at<T: Scalar>(a: &[T], g: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let g_row = &g[i * n..(i + 1) * n];
        for j in 0..k {
            let av = a[i * k + j];
            let out_row = &mut out[j * n..(j + 1) * n];
            for (o, &gv) in out_row.iter_mut().zip(g_row) {
                *o += av * gv;
            }
        }
    }
}

fn matmul_dims<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<(usize, usize, usize)> {
    if a.shape().len() != 2 || b.shape().len() != 2 {
        return Err(AutodiffError::ShapeMismatch {
            op: "matmul",
            detail: format!("need 2-D operands, got {:?} x {:?}", a.shape(), b.shape()),
        });
    }
    if a.shape()[1] != b.shape()[0] {
        return Err(AutodiffError::ShapeMismatch {
            op: "matmul",
            detail: format!("inner dims differ: {:?} x {:?}", a.shape(), b.shape()),
        });
    }
    Ok((a.shape()[0], a.shape()[1], b.shape()[1]))
}

struct ConvGeom {
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    h_out: usize,
    w_out: usize,
}

impl ConvGeom {
    fn new(input: &[usize], weight: &[usize], stride: usize, padding: usize) -> Result<Self> {
        if input.len() != 3 || weight.len() != 4 {
            return Err(AutodiffError::ShapeMismatch {
                op: "conv2d",
                detail: format!(
                    "need [C,H,W] input and [O,C,kh,kw] weight, got {input:?} and {weight:?}"
                ),
            });
        }
        let (c_in, h, w) = (input[0], input[1], input[2]);
        let (c_out, wc, kh, kw) = (weight[0], weight[1], weight[2], weight[3]);
        if wc != c_in {
            return Err(AutodiffError::ShapeMismatch {
                op: "conv2d",
                detail: format!("weight expects {wc} input channels, input has {c_in}"),
            });
        }
        if stride == 0 || kh == 0 || kw == 0 || h + 2 * padding < kh || w + 2 * padding < kw {
            return Err(AutodiffError::ShapeMismatch {
                op: "conv2d",
                detail: format!(
                    "invalid geometry: input {h}x{w}, kernel {kh}x{kw}, stride {stride}, padding {padding}"
                ),
            });
        }
        let h_out = (h + 2 * padding - kh) / stride + 1;
        let w_out = (w + 2 * padding - kw) / stride + 1;
        Ok(ConvGeom {
            c_in,
            h,
            w,
            c_out,
            kh,
            kw,
            stride,
            padding,
            h_out,
            w_out,
        })
    }

    fn ckk(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    fn out_hw(&self) -> usize {
        self.h_out * self.w_out
    }

    fn im2col<T: Scalar>(&self, input: &[T]) -> Vec<T> {
        let mut cols = vec![T::ZERO; self.ckk() * self.out_hw()];
        let hw = self.out_hw();
        for c in 0..self.c_in {
            let plane = &input[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (c * self.kh + ky) * self.kw + kx;
                    let dst = &mut cols[row * hw..(row + 1) * hw];
                    for oy in 0..self.h_out {
                        let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let src_row = &plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for ox in 0..self.w_out {
                            let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                            if ix >= 0 && ix < self.w as isize {
                                dst[oy * self.w_out + ox] = src_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im<T: Scalar>(&self, dcols: &[T]) -> Vec<T> {
        let mut dinput = vec![T::ZERO; self.c_in * self.h * self.w];
        let hw = self.out_hw();
        for c in 0..self.c_in {
            let plane = &mut dinput[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (c * self.kh + ky) * self.kw + kx;
                    let src = &dcols[row * hw..(row + 1) * hw];
                    for oy in 0..self.h_out {
                        let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        for ox in 0..self.w_out {
                            let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                            if ix >= 0 && ix < self.w as isize {
                                plane[iy as usize * self.w + ix as usize] +=
                                    src[oy * self.w_out + ox];
                            }
                        }
                    }
                }
            }
        }
        dinput
    }
}

fn conv2d_backward<T: Scalar>(
    geom: &ConvGeom,
    inputs: &[&Tensor<T>],
    out_grad: &[T],
    needed: &[bool],
) -> Vec<Option<Vec<T>>> {
    let need_input = needed[0];
    let need_weight = needed[1];
    let need_bias = needed.len() > 2 && needed[2];

    let cols = (need_weight).then(|| geom.im2col(inputs[0].data()));

    let g_weight = cols.map(|cols| {
        // dW[o, r] = sum_j g[o, j] * cols[r, j]
        let mut dw = vec![T::ZERO; geom.c_out * geom.ckk()];
        matmul_bt(
            out_grad,
            &cols,
            &mut dw,
            geom.c_out,
            geom.out_hw(),
            geom.ckk(),
        );
        dw
    });

    let g_input = need_input.then(|| {
        // dcols = W^T g, then scatter back.
        let mut dcols = vec![T::ZERO; geom.ckk() * geom.out_hw()];
        matmul_at(
            inputs[1].data(),
            out_grad,
            &mut dcols,
            geom.c_out,
            geom.ckk(),
            geom.out_hw(),
        );
        geom.col2im(&dcols)
    });

    let g_bias = need_bias.then(|| {
        out_grad
            .chunks(geom.out_hw())
            .map(|chunk| {
                let mut acc = T::ZERO;
                for &v in chunk {
                    acc += v;
                }
                acc
            })
            .collect()
    });

    let mut grads = vec![g_input, g_weight];
    if needed.len() > 2 {
        grads.push(g_bias);
    }
    grads
}
