//! Minimal reverse-mode differentiation over dense `f64` arrays.
//!
//! A [`Tape`] records every operation whose inputs include at least one
//! tracked array. Operations on constants only are evaluated eagerly and
//! leave no trace, so forward-only evaluation is just "use constants".
//!
//! ```
//! use evseg::autodiff::Tape;
//! let tape = Tape::new();
//! let x = tape.var(&[2], vec![1.0, 2.0]).unwrap();
//! let loss = tape.sum(&tape.mul(&x, &x).unwrap());
//! let grads = tape.backward(&loss).unwrap();
//! assert_eq!(grads.get(&x).unwrap(), &[2.0, 4.0]);
//! ```

mod gradcheck;
pub(crate) mod kernels;
pub mod special;

use std::cell::{Cell, RefCell};
use std::rc::Rc;

use crate::error::{Error, Result};
use kernels::ConvGeom;

pub use gradcheck::{check_gradients, check_gradients_with_fault};

pub type NodeId = usize;

/// An n-dimensional array that may be tracked by a [`Tape`].
#[derive(Clone, Debug)]
pub struct DiffArray {
    shape: Vec<usize>,
    data: Rc<Vec<f64>>,
    node: Option<NodeId>,
}

impl DiffArray {
    pub fn constant(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        check_len("constant", shape, data.len())?;
        Ok(DiffArray {
            shape: shape.to_vec(),
            data: Rc::new(data),
            node: None,
        })
    }

    pub fn scalar(value: f64) -> Self {
        DiffArray {
            shape: Vec::new(),
            data: Rc::new(vec![value]),
            node: None,
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        DiffArray {
            shape: shape.to_vec(),
            data: Rc::new(vec![0.0; shape.iter().product()]),
            node: None,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn node(&self) -> Option<NodeId> {
        self.node
    }

    pub fn is_tracked(&self) -> bool {
        self.node.is_some()
    }

    /// Value of a one-element array.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.data.to_vec()
    }

    /// Same values, cut from the tape.
    pub fn detach(&self) -> Self {
        DiffArray {
            shape: self.shape.clone(),
            data: self.data.clone(),
            node: None,
        }
    }
}

fn check_len(op: &'static str, shape: &[usize], len: usize) -> Result<()> {
    let expected: usize = shape.iter().product();
    if expected != len {
        return Err(Error::InvalidShape {
            op,
            detail: format!("shape {shape:?} needs {expected} values, got {len}"),
        });
    }
    Ok(())
}

/// Operation kinds understood by [`Tape::record`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Op {
    Add,
    Sub,
    Mul,
    Div,
    Scale(f64),
    AddScalar(f64),
    /// `[m, k] x [k, n]`
    MatMul,
    /// `input [cin, h, w]`, `weight [cout, cin, k, k]`, optional `bias [cout]`;
    /// stride 1, zero padding `k / 2`, odd `k`.
    Conv2d,
    MaxPool2,
    Upsample2,
    Relu,
    Softplus,
    Exp,
    Ln,
    LnGamma,
    Digamma,
    Sum,
    Mean,
    /// Gradient flows only where `lo <= x <= hi`.
    Clamp { lo: f64, hi: f64 },
    /// Sum over the leading axis: `[n, ...] -> [...]`.
    SumAxis0,
    /// Repeat along a new leading axis: `[...] -> [n, ...]`.
    Broadcast0(usize),
    /// Take slice `i` of the leading axis: `[n, ...] -> [...]`.
    Select0(usize),
    Reshape,
}

/// Fieldless mirror of [`Op`], used to name an op kind.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Add,
    Sub,
    Mul,
    Div,
    Scale,
    AddScalar,
    MatMul,
    Conv2d,
    MaxPool2,
    Upsample2,
    Relu,
    Softplus,
    Exp,
    Ln,
    LnGamma,
    Digamma,
    Sum,
    Mean,
    Clamp,
    SumAxis0,
    Broadcast0,
    Select0,
    Reshape,
}

impl OpKind {
    pub const ALL: [OpKind; 23] = [
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::Div,
        OpKind::Scale,
        OpKind::AddScalar,
        OpKind::MatMul,
        OpKind::Conv2d,
        OpKind::MaxPool2,
        OpKind::Upsample2,
        OpKind::Relu,
        OpKind::Softplus,
        OpKind::Exp,
        OpKind::Ln,
        OpKind::LnGamma,
        OpKind::Digamma,
        OpKind::Sum,
        OpKind::Mean,
        OpKind::Clamp,
        OpKind::SumAxis0,
        OpKind::Broadcast0,
        OpKind::Select0,
        OpKind::Reshape,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Div => "div",
            OpKind::Scale => "scale",
            OpKind::AddScalar => "add_scalar",
            OpKind::MatMul => "matmul",
            OpKind::Conv2d => "conv2d",
            OpKind::MaxPool2 => "max_pool2",
            OpKind::Upsample2 => "upsample2",
            OpKind::Relu => "relu",
            OpKind::Softplus => "softplus",
            OpKind::Exp => "exp",
            OpKind::Ln => "ln",
            OpKind::LnGamma => "ln_gamma",
            OpKind::Digamma => "digamma",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::Clamp => "clamp",
            OpKind::SumAxis0 => "sum_axis0",
            OpKind::Broadcast0 => "broadcast0",
            OpKind::Select0 => "select0",
            OpKind::Reshape => "reshape",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        OpKind::ALL.into_iter().find(|k| k.name() == name)
    }
}

impl Op {
    pub fn kind(&self) -> OpKind {
        match self {
            Op::Add => OpKind::Add,
            Op::Sub => OpKind::Sub,
            Op::Mul => OpKind::Mul,
            Op::Div => OpKind::Div,
            Op::Scale(_) => OpKind::Scale,
            Op::AddScalar(_) => OpKind::AddScalar,
            Op::MatMul => OpKind::MatMul,
            Op::Conv2d => OpKind::Conv2d,
            Op::MaxPool2 => OpKind::MaxPool2,
            Op::Upsample2 => OpKind::Upsample2,
            Op::Relu => OpKind::Relu,
            Op::Softplus => OpKind::Softplus,
            Op::Exp => OpKind::Exp,
            Op::Ln => OpKind::Ln,
            Op::LnGamma => OpKind::LnGamma,
            Op::Digamma => OpKind::Digamma,
            Op::Sum => OpKind::Sum,
            Op::Mean => OpKind::Mean,
            Op::Clamp { .. } => OpKind::Clamp,
            Op::SumAxis0 => OpKind::SumAxis0,
            Op::Broadcast0(_) => OpKind::Broadcast0,
            Op::Select0(_) => OpKind::Select0,
            Op::Reshape => OpKind::Reshape,
        }
    }
}

/// Per-entry state the backward rule needs beyond the input values.
enum Saved {
    None,
    MatMul { m: usize, k: usize, n: usize },
    Conv(ConvGeom),
    ArgMax(Vec<usize>),
}

struct Operand {
    node: Option<NodeId>,
    value: Rc<Vec<f64>>,
    shape: Vec<usize>,
}

struct Entry {
    op: Op,
    inputs: Vec<Operand>,
    output: NodeId,
    out_value: Rc<Vec<f64>>,
    saved: Saved,
}

/// Records operations for one backward pass. Single-owner and `!Send`:
/// build one per training step (or per sample) on the thread that uses it.
pub struct Tape {
    entries: RefCell<Vec<Entry>>,
    next_node: Cell<NodeId>,
    fault: Option<OpKind>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients keyed by node id.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, array: &DiffArray) -> Option<&[f64]> {
        array.node.and_then(|id| self.get_node(id))
    }

    pub fn get_node(&self, id: NodeId) -> Option<&[f64]> {
        self.grads.get(id).and_then(|g| g.as_deref())
    }

    /// Gradient for `array`, or zeros when it did not influence the loss.
    pub fn get_or_zeros(&self, array: &DiffArray) -> Vec<f64> {
        self.get(array)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; array.len()])
    }
}

fn same_shape(op: &'static str, a: &DiffArray, b: &DiffArray) -> Result<()> {
    if a.shape != b.shape {
        return Err(Error::ShapeMismatch {
            op,
            left: a.shape.clone(),
            right: b.shape.clone(),
        });
    }
    Ok(())
}

fn rank(op: &'static str, a: &DiffArray, r: usize) -> Result<()> {
    if a.shape.len() != r {
        return Err(Error::InvalidShape {
            op,
            detail: format!("expected rank {r}, got shape {:?}", a.shape),
        });
    }
    Ok(())
}

fn positive(op: &'static str, a: &DiffArray) -> Result<()> {
    if let Some(&v) = a.data.iter().find(|v| !(**v > 0.0)) {
        return Err(Error::Domain { op, value: v });
    }
    Ok(())
}

fn map(a: &DiffArray, f: impl Fn(f64) -> f64) -> Vec<f64> {
    a.data.iter().map(|&v| f(v)).collect()
}

fn zip(a: &DiffArray, b: &DiffArray, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.data.iter().zip(b.data.iter()).map(|(&x, &y)| f(x, y)).collect()
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            entries: RefCell::new(Vec::new()),
            next_node: Cell::new(0),
            fault: None,
        }
    }

    /// A tape whose backward rule for `kind` has its sign flipped. Test fixture
    /// for checking that the gradient suite actually detects broken rules.
    #[doc(hidden)]
    pub fn with_fault(kind: OpKind) -> Self {
        Tape {
            fault: Some(kind),
            ..Tape::new()
        }
    }

    fn fresh_node(&self) -> NodeId {
        let id = self.next_node.get();
        self.next_node.set(id + 1);
        id
    }

    /// A new tracked leaf.
    pub fn var(&self, shape: &[usize], data: Vec<f64>) -> Result<DiffArray> {
        check_len("var", shape, data.len())?;
        Ok(DiffArray {
            shape: shape.to_vec(),
            data: Rc::new(data),
            node: Some(self.fresh_node()),
        })
    }

    /// Track an existing array as a new leaf (values shared, not copied).
    pub fn watch(&self, array: &DiffArray) -> DiffArray {
        DiffArray {
            shape: array.shape.clone(),
            data: array.data.clone(),
            node: Some(self.fresh_node()),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.borrow().is_empty()
    }

    /// Kinds of the recorded entries, in recording order.
    pub fn op_kinds(&self) -> Vec<OpKind> {
        self.entries.borrow().iter().map(|e| e.op.kind()).collect()
    }

    fn push(&self, op: Op, inputs: &[&DiffArray], shape: Vec<usize>, data: Vec<f64>, saved: Saved) -> DiffArray {
        let data = Rc::new(data);
        if inputs.iter().all(|a| a.node.is_none()) {
            return DiffArray { shape, data, node: None };
        }
        let output = self.fresh_node();
        self.entries.borrow_mut().push(Entry {
            op,
            inputs: inputs
                .iter()
                .map(|a| Operand {
                    node: a.node,
                    value: a.data.clone(),
                    shape: a.shape.clone(),
                })
                .collect(),
            output,
            out_value: data.clone(),
            saved,
        });
        DiffArray {
            shape,
            data,
            node: Some(output),
        }
    }

    /// Evaluate `op` on `inputs` and record it when any input is tracked.
    pub fn record(&self, op: Op, inputs: &[&DiffArray]) -> Result<DiffArray> {
        let arity_ok = match op {
            Op::Add | Op::Sub | Op::Mul | Op::Div | Op::MatMul => inputs.len() == 2,
            Op::Conv2d => matches!(inputs.len(), 2 | 3),
            _ => inputs.len() == 1,
        };
        if !arity_ok {
            return Err(Error::InvalidShape {
                op: op.kind().name(),
                detail: format!("wrong number of inputs ({})", inputs.len()),
            });
        }
        let name = op.kind().name();
        let a = inputs[0];
        match op {
            Op::Add | Op::Sub | Op::Mul | Op::Div => {
                let b = inputs[1];
                same_shape(name, a, b)?;
                let data = match op {
                    Op::Add => zip(a, b, |x, y| x + y),
                    Op::Sub => zip(a, b, |x, y| x - y),
                    Op::Mul => zip(a, b, |x, y| x * y),
                    _ => zip(a, b, |x, y| x / y),
                };
                Ok(self.push(op, inputs, a.shape.clone(), data, Saved::None))
            }
            Op::Scale(c) => Ok(self.push(op, inputs, a.shape.clone(), map(a, |x| c * x), Saved::None)),
            Op::AddScalar(c) => Ok(self.push(op, inputs, a.shape.clone(), map(a, |x| x + c), Saved::None)),
            Op::MatMul => {
                let b = inputs[1];
                rank(name, a, 2)?;
                rank(name, b, 2)?;
                if a.shape[1] != b.shape[0] {
                    return Err(Error::ShapeMismatch {
                        op: name,
                        left: a.shape.clone(),
                        right: b.shape.clone(),
                    });
                }
                let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
                let data = kernels::matmul(&a.data, &b.data, m, k, n);
                Ok(self.push(op, inputs, vec![m, n], data, Saved::MatMul { m, k, n }))
            }
            Op::Conv2d => {
                let w = inputs[1];
                rank(name, a, 3)?;
                rank(name, w, 4)?;
                if w.shape[1] != a.shape[0] || w.shape[2] != w.shape[3] || w.shape[2].is_multiple_of(2) {
                    return Err(Error::ShapeMismatch {
                        op: name,
                        left: a.shape.clone(),
                        right: w.shape.clone(),
                    });
                }
                let geom = ConvGeom {
                    cin: a.shape[0],
                    cout: w.shape[0],
                    height: a.shape[1],
                    width: a.shape[2],
                    kernel: w.shape[2],
                };
                let bias = inputs.get(2).copied();
                if let Some(b) = bias {
                    if b.shape != [geom.cout] {
                        return Err(Error::ShapeMismatch {
                            op: name,
                            left: w.shape.clone(),
                            right: b.shape.clone(),
                        });
                    }
                }
                let data = kernels::conv2d_forward(geom, &a.data, &w.data, bias.map(|b| b.data.as_slice()));
                Ok(self.push(
                    op,
                    inputs,
                    vec![geom.cout, geom.height, geom.width],
                    data,
                    Saved::Conv(geom),
                ))
            }
            Op::MaxPool2 => {
                rank(name, a, 3)?;
                let (c, h, w) = (a.shape[0], a.shape[1], a.shape[2]);
                if h % 2 != 0 || w % 2 != 0 {
                    return Err(Error::Divisibility { height: h, width: w, multiple: 2 });
                }
                let (data, arg) = kernels::max_pool2_forward(c, h, w, &a.data);
                Ok(self.push(op, inputs, vec![c, h / 2, w / 2], data, Saved::ArgMax(arg)))
            }
            Op::Upsample2 => {
                rank(name, a, 3)?;
                let (c, h, w) = (a.shape[0], a.shape[1], a.shape[2]);
                let data = kernels::upsample2_forward(c, h, w, &a.data);
                Ok(self.push(op, inputs, vec![c, 2 * h, 2 * w], data, Saved::None))
            }
            Op::Relu => Ok(self.push(op, inputs, a.shape.clone(), map(a, |x| x.max(0.0)), Saved::None)),
            Op::Softplus => Ok(self.push(op, inputs, a.shape.clone(), map(a, softplus), Saved::None)),
            Op::Exp => Ok(self.push(op, inputs, a.shape.clone(), map(a, f64::exp), Saved::None)),
            Op::Ln => {
                positive(name, a)?;
                Ok(self.push(op, inputs, a.shape.clone(), map(a, f64::ln), Saved::None))
            }
            Op::LnGamma => {
                positive(name, a)?;
                Ok(self.push(op, inputs, a.shape.clone(), map(a, special::ln_gamma), Saved::None))
            }
            Op::Digamma => {
                positive(name, a)?;
                Ok(self.push(op, inputs, a.shape.clone(), map(a, special::digamma), Saved::None))
            }
            Op::Sum => {
                let s = a.data.iter().sum();
                Ok(self.push(op, inputs, Vec::new(), vec![s], Saved::None))
            }
            Op::Mean => {
                if a.data.is_empty() {
                    return Err(Error::InvalidShape { op: name, detail: "mean of empty array".into() });
                }
                let s = a.data.iter().sum::<f64>() / a.data.len() as f64;
                Ok(self.push(op, inputs, Vec::new(), vec![s], Saved::None))
            }
            Op::Clamp { lo, hi } => Ok(self.push(op, inputs, a.shape.clone(), map(a, |x| x.clamp(lo, hi)), Saved::None)),
            Op::SumAxis0 => {
                if a.shape.is_empty() {
                    return Err(Error::InvalidShape { op: name, detail: "scalar has no leading axis".into() });
                }
                let rest: Vec<usize> = a.shape[1..].to_vec();
                let inner: usize = rest.iter().product();
                let mut data = vec![0.0; inner];
                for slice in a.data.chunks(inner.max(1)) {
                    for (d, v) in data.iter_mut().zip(slice) {
                        *d += v;
                    }
                }
                Ok(self.push(op, inputs, rest, data, Saved::None))
            }
            Op::Broadcast0(n) => {
                let mut shape = vec![n];
                shape.extend_from_slice(&a.shape);
                let mut data = Vec::with_capacity(n * a.len());
                for _ in 0..n {
                    data.extend_from_slice(&a.data);
                }
                Ok(self.push(op, inputs, shape, data, Saved::None))
            }
            Op::Select0(i) => {
                if a.shape.is_empty() || i >= a.shape[0] {
                    return Err(Error::InvalidShape {
                        op: name,
                        detail: format!("index {i} out of range for shape {:?}", a.shape),
                    });
                }
                let rest: Vec<usize> = a.shape[1..].to_vec();
                let inner: usize = rest.iter().product();
                let data = a.data[i * inner..(i + 1) * inner].to_vec();
                Ok(self.push(op, inputs, rest, data, Saved::None))
            }
            Op::Reshape => Err(Error::InvalidShape {
                op: name,
                detail: "reshape needs a target shape; use Tape::reshape".into(),
            }),
        }
    }

    pub fn add(&self, a: &DiffArray, b: &DiffArray) -> Result<DiffArray> {
        self.record(Op::Add, &[a, b])
    }

    pub fn sub(&self, a: &DiffArray, b: &DiffArray) -> Result<DiffArray> {
        self.record(Op::Sub, &[a, b])
    }

    pub fn mul(&self, a: &DiffArray, b: &DiffArray) -> Result<DiffArray> {
        self.record(Op::Mul, &[a, b])
    }

    pub fn div(&self, a: &DiffArray, b: &DiffArray) -> Result<DiffArray> {
        self.record(Op::Div, &[a, b])
    }

    pub fn scale(&self, a: &DiffArray, c: f64) -> DiffArray {
        self.record(Op::Scale(c), &[a]).expect("unary op")
    }

    pub fn add_scalar(&self, a: &DiffArray, c: f64) -> DiffArray {
        self.record(Op::AddScalar(c), &[a]).expect("unary op")
    }

    /// `1 - a`
    pub fn one_minus(&self, a: &DiffArray) -> DiffArray {
        self.add_scalar(&self.scale(a, -1.0), 1.0)
    }

    pub fn matmul(&self, a: &DiffArray, b: &DiffArray) -> Result<DiffArray> {
        self.record(Op::MatMul, &[a, b])
    }

    pub fn conv2d(&self, input: &DiffArray, weight: &DiffArray, bias: Option<&DiffArray>) -> Result<DiffArray> {
        match bias {
            Some(b) => self.record(Op::Conv2d, &[input, weight, b]),
            None => self.record(Op::Conv2d, &[input, weight]),
        }
    }

    pub fn max_pool2(&self, a: &DiffArray) -> Result<DiffArray> {
        self.record(Op::MaxPool2, &[a])
    }

    pub fn upsample2(&self, a: &DiffArray) -> Result<DiffArray> {
        self.record(Op::Upsample2, &[a])
    }

    pub fn relu(&self, a: &DiffArray) -> DiffArray {
        self.record(Op::Relu, &[a]).expect("unary op")
    }

    pub fn softplus(&self, a: &DiffArray) -> DiffArray {
        self.record(Op::Softplus, &[a]).expect("unary op")
    }

    pub fn exp(&self, a: &DiffArray) -> DiffArray {
        self.record(Op::Exp, &[a]).expect("unary op")
    }

    pub fn ln(&self, a: &DiffArray) -> Result<DiffArray> {
        self.record(Op::Ln, &[a])
    }

    pub fn ln_gamma(&self, a: &DiffArray) -> Result<DiffArray> {
        self.record(Op::LnGamma, &[a])
    }

    pub fn digamma(&self, a: &DiffArray) -> Result<DiffArray> {
        self.record(Op::Digamma, &[a])
    }

    pub fn sum(&self, a: &DiffArray) -> DiffArray {
        self.record(Op::Sum, &[a]).expect("unary op")
    }

    pub fn mean(&self, a: &DiffArray) -> Result<DiffArray> {
        self.record(Op::Mean, &[a])
    }

    pub fn clamp(&self, a: &DiffArray, lo: f64, hi: f64) -> DiffArray {
        self.record(Op::Clamp { lo, hi }, &[a]).expect("unary op")
    }

    pub fn sum_axis0(&self, a: &DiffArray) -> Result<DiffArray> {
        self.record(Op::SumAxis0, &[a])
    }

    pub fn broadcast0(&self, a: &DiffArray, n: usize) -> DiffArray {
        self.record(Op::Broadcast0(n), &[a]).expect("unary op")
    }

    pub fn select0(&self, a: &DiffArray, index: usize) -> Result<DiffArray> {
        self.record(Op::Select0(index), &[a])
    }

    pub fn reshape(&self, a: &DiffArray, shape: &[usize]) -> Result<DiffArray> {
        check_len("reshape", shape, a.len())?;
        Ok(self.push(Op::Reshape, &[a], shape.to_vec(), a.data.to_vec(), Saved::None))
    }

    /// Reverse pass from a scalar `loss`. Each recorded entry is visited once,
    /// newest first.
    pub fn backward(&self, loss: &DiffArray) -> Result<Gradients> {
        if !loss.shape.is_empty() {
            return Err(Error::NonScalarLoss(loss.shape.clone()));
        }
        let root = loss.node.ok_or(Error::EmptyTape)?;
        if root >= self.next_node.get() {
            return Err(Error::EmptyTape);
        }
        let entries = self.entries.borrow();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.next_node.get()];
        grads[root] = Some(vec![1.0]);
        for entry in entries.iter().rev() {
            let (lower, upper) = grads.split_at_mut(entry.output);
            let Some(g) = upper[0].as_deref() else { continue };
            let sign = if self.fault == Some(entry.op.kind()) { -1.0 } else { 1.0 };
            for (slot, contrib) in input_grads(entry, g) {
                let Some(id) = entry.inputs[slot].node else { continue };
                let target = &mut lower[id];
                match target {
                    Some(acc) => {
                        for (a, c) in acc.iter_mut().zip(&contrib) {
                            *a += sign * c;
                        }
                    }
                    None => {
                        *target = Some(if sign < 0.0 { contrib.iter().map(|c| -c).collect() } else { contrib });
                    }
                }
            }
        }
        Ok(Gradients { grads })
    }
}

/// Vector-Jacobian products for every tracked input of `entry`.
fn input_grads(entry: &Entry, g: &[f64]) -> Vec<(usize, Vec<f64>)> {
    let needs = |i: usize| entry.inputs.get(i).is_some_and(|o| o.node.is_some());
    let x = |i: usize| &*entry.inputs[i].value;
    let mut out = Vec::with_capacity(entry.inputs.len());
    let unary = |f: &dyn Fn(f64, f64) -> f64| -> Vec<f64> { g.iter().zip(x(0)).map(|(&gi, &xi)| f(gi, xi)).collect() };
    match entry.op {
        Op::Add => {
            for i in 0..2 {
                if needs(i) {
                    out.push((i, g.to_vec()));
                }
            }
        }
        Op::Sub => {
            if needs(0) {
                out.push((0, g.to_vec()));
            }
            if needs(1) {
                out.push((1, g.iter().map(|v| -v).collect()));
            }
        }
        Op::Mul => {
            if needs(0) {
                out.push((0, g.iter().zip(x(1)).map(|(a, b)| a * b).collect()));
            }
            if needs(1) {
                out.push((1, g.iter().zip(x(0)).map(|(a, b)| a * b).collect()));
            }
        }
        Op::Div => {
            let (a, b) = (x(0), x(1));
            if needs(0) {
                out.push((0, g.iter().zip(b).map(|(gi, bi)| gi / bi).collect()));
            }
            if needs(1) {
                out.push((1, (0..g.len()).map(|i| -g[i] * a[i] / (b[i] * b[i])).collect()));
            }
        }
        Op::Scale(c) => out.push((0, g.iter().map(|v| c * v).collect())),
        Op::AddScalar(_) | Op::Reshape => out.push((0, g.to_vec())),
        Op::MatMul => {
            let Saved::MatMul { m, k, n } = entry.saved else { unreachable!() };
            if needs(0) {
                let bt = kernels::transpose(x(1), k, n);
                out.push((0, kernels::matmul(g, &bt, m, n, k)));
            }
            if needs(1) {
                let at = kernels::transpose(x(0), m, k);
                out.push((1, kernels::matmul(&at, g, k, m, n)));
            }
        }
        Op::Conv2d => {
            let Saved::Conv(geom) = entry.saved else { unreachable!() };
            let (gin, gw, gb) = kernels::conv2d_backward(geom, x(0), x(1), g, needs(0), needs(1));
            if let Some(gin) = gin {
                out.push((0, gin));
            }
            if let Some(gw) = gw {
                out.push((1, gw));
            }
            if needs(2) {
                out.push((2, gb));
            }
        }
        Op::MaxPool2 => {
            let Saved::ArgMax(ref arg) = entry.saved else { unreachable!() };
            let mut gi = vec![0.0; x(0).len()];
            for (o, &src) in arg.iter().enumerate() {
                gi[src] += g[o];
            }
            out.push((0, gi));
        }
        Op::Upsample2 => {
            let s = &entry.inputs[0].shape;
            out.push((0, kernels::upsample2_backward(s[0], s[1], s[2], g)));
        }
        Op::Relu => out.push((0, unary(&|gi, xi| if xi > 0.0 { gi } else { 0.0 }))),
        Op::Softplus => out.push((0, unary(&|gi, xi| gi * sigmoid(xi)))),
        Op::Exp => out.push((0, g.iter().zip(entry.out_value.iter()).map(|(gi, yi)| gi * yi).collect())),
        Op::Ln => out.push((0, unary(&|gi, xi| gi / xi))),
        Op::LnGamma => out.push((0, unary(&|gi, xi| gi * special::digamma(xi)))),
        Op::Digamma => out.push((0, unary(&|gi, xi| gi * special::trigamma(xi)))),
        Op::Sum => out.push((0, vec![g[0]; x(0).len()])),
        Op::Mean => {
            let n = x(0).len();
            out.push((0, vec![g[0] / n as f64; n]));
        }
        Op::Clamp { lo, hi } => out.push((0, unary(&|gi, xi| if xi >= lo && xi <= hi { gi } else { 0.0 }))),
        Op::SumAxis0 => {
            let n = entry.inputs[0].shape[0];
            let mut gi = Vec::with_capacity(n * g.len());
            for _ in 0..n {
                gi.extend_from_slice(g);
            }
            out.push((0, gi));
        }
        Op::Broadcast0(n) => {
            let inner = x(0).len();
            let mut gi = vec![0.0; inner];
            for s in 0..n {
                for (a, b) in gi.iter_mut().zip(&g[s * inner..(s + 1) * inner]) {
                    *a += b;
                }
            }
            out.push((0, gi));
        }
        Op::Select0(i) => {
            let inner = g.len();
            let mut gi = vec![0.0; x(0).len()];
            gi[i * inner..(i + 1) * inner].copy_from_slice(g);
            out.push((0, gi));
        }
    }
    out
}
