//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Tape`] is an append-only list of operation records. Every value built
//! on it is addressed by a [`Var`] handle; since a record can only reference
//! records that already exist, the list is topologically ordered and
//! [`Tape::backward`] is a single reverse sweep.
//!
//! Values that do not depend on any differentiable leaf are stored as
//! constants: they carry no backward rule and receive no gradient.

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::linalg::{gemm, MatRef};
use crate::nn;
use crate::params::ParamRegistry;
use crate::tensor::{broadcast_index_map, broadcast_shape, reduce_to, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnaryKind {
    Exp,
    Log,
    Neg,
    Square,
    Sqrt,
}

pub(crate) enum Op {
    Constant,
    Leaf,
    Binary {
        kind: BinaryKind,
        a: usize,
        b: usize,
    },
    Unary {
        kind: UnaryKind,
        a: usize,
    },
    Scale {
        a: usize,
        factor: f64,
    },
    MatMul {
        a: usize,
        b: usize,
    },
    Sum {
        a: usize,
        /// Input shape with the reduced axes kept as size 1.
        keep_shape: Vec<usize>,
    },
    Concat {
        parts: Vec<usize>,
        axis: usize,
    },
    Reshape {
        a: usize,
    },
    Conv2d(nn::Conv2dRecord),
    MaxPool {
        x: usize,
        argmax: Vec<usize>,
    },
    Upsample {
        x: usize,
        factor: usize,
    },
    Relu {
        x: usize,
    },
    SoftmaxCe {
        logits: usize,
        /// d(loss)/d(logits) for unit upstream gradient.
        dlogits: Vec<f64>,
    },
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    params: RefCell<Vec<(usize, String)>>,
    no_grad: bool,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// A tape on which every parameter is a constant; for inference.
    pub fn inference() -> Self {
        Self {
            no_grad: true,
            ..Self::default()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A value that receives no gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Constant, false)
    }

    /// A differentiable input.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// Bring a registry parameter onto the tape. Frozen parameters become
    /// constants.
    pub fn param(&self, registry: &ParamRegistry, name: &str) -> Result<Var<'_>> {
        let p = registry
            .get(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))?;
        if p.trainable && !self.no_grad {
            let v = self.leaf(p.value.clone());
            self.params.borrow_mut().push((v.id, name.to_string()));
            Ok(v)
        } else {
            Ok(self.constant(p.value.clone()))
        }
    }

    pub(crate) fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let op = if requires_grad { op } else { Op::Constant };
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    pub(crate) fn value_of(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    pub(crate) fn requires_grad_of(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Reverse sweep from a single-element loss.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        assert!(std::ptr::eq(loss.tape, self), "loss belongs to another tape");
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.len() != 1 {
            return Err(Error::NotScalar(root.value.shape().to_vec()));
        }
        if !root.requires_grad {
            return Err(Error::NoTape);
        }
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(Tensor::full(root.value.shape(), 1.0));
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if node.requires_grad {
                propagate(&nodes, node, &g, &mut grads);
            }
            grads[id] = Some(g);
        }
        Ok(Gradients {
            grads,
            params: self.params.borrow().clone(),
        })
    }

    /// Backward, then add parameter gradients into the registry buffers.
    pub fn backward_into(&self, loss: Var<'_>, registry: &mut ParamRegistry) -> Result<Gradients> {
        let grads = self.backward(loss)?;
        registry.accumulate(&grads)?;
        Ok(grads)
    }
}

fn accumulate(nodes: &[Node], grads: &mut [Option<Tensor>], id: usize, g: Tensor) {
    if !nodes[id].requires_grad {
        return;
    }
    match &mut grads[id] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn propagate(nodes: &[Node], node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
    let out = &node.value;
    match &node.op {
        Op::Constant | Op::Leaf => {}
        Op::Binary { kind, a, b } => {
            let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
            let (ga, gb) = binary_backward(*kind, av, bv, g);
            if let Some(ga) = ga.filter(|_| nodes[*a].requires_grad) {
                accumulate(nodes, grads, *a, ga);
            }
            if let Some(gb) = gb.filter(|_| nodes[*b].requires_grad) {
                accumulate(nodes, grads, *b, gb);
            }
        }
        Op::Unary { kind, a } => {
            let x = &nodes[*a].value;
            let gd = g.data();
            let xd = x.data();
            let od = out.data();
            let data: Vec<f64> = match kind {
                UnaryKind::Exp => gd.iter().zip(od).map(|(g, o)| g * o).collect(),
                UnaryKind::Log => gd.iter().zip(xd).map(|(g, x)| g / x).collect(),
                UnaryKind::Neg => gd.iter().map(|g| -g).collect(),
                UnaryKind::Square => gd.iter().zip(xd).map(|(g, x)| 2.0 * x * g).collect(),
                UnaryKind::Sqrt => gd.iter().zip(od).map(|(g, o)| g / (2.0 * o)).collect(),
            };
            accumulate(nodes, grads, *a, Tensor::from_parts(x.shape().to_vec(), data));
        }
        Op::Scale { a, factor } => {
            accumulate(nodes, grads, *a, g.map(|v| v * factor));
        }
        Op::MatMul { a, b } => {
            let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
            let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
            let gm = MatRef::row_major(g.data(), m, n);
            if nodes[*a].requires_grad {
                let mut ga = vec![0.0; m * k];
                gemm(1.0, gm, MatRef::row_major(bv.data(), k, n).t(), 0.0, &mut ga);
                accumulate(nodes, grads, *a, Tensor::from_parts(vec![m, k], ga));
            }
            if nodes[*b].requires_grad {
                let mut gb = vec![0.0; k * n];
                gemm(1.0, MatRef::row_major(av.data(), m, k).t(), gm, 0.0, &mut gb);
                accumulate(nodes, grads, *b, Tensor::from_parts(vec![k, n], gb));
            }
        }
        Op::Sum { a, keep_shape } => {
            let in_shape = nodes[*a].value.shape().to_vec();
            let map = broadcast_index_map(keep_shape, &in_shape);
            let data = map.iter().map(|&j| g.data()[j]).collect();
            accumulate(nodes, grads, *a, Tensor::from_parts(in_shape, data));
        }
        Op::Concat { parts, axis } => {
            let shape = out.shape();
            let outer: usize = shape[..*axis].iter().product();
            let inner: usize = shape[axis + 1..].iter().product();
            let total = shape[*axis];
            let mut start = 0;
            for &p in parts {
                let ps = nodes[p].value.shape().to_vec();
                let len = ps[*axis];
                if nodes[p].requires_grad {
                    let mut data = Vec::with_capacity(outer * len * inner);
                    for o in 0..outer {
                        let base = (o * total + start) * inner;
                        data.extend_from_slice(&g.data()[base..base + len * inner]);
                    }
                    accumulate(nodes, grads, p, Tensor::from_parts(ps, data));
                }
                start += len;
            }
        }
        Op::Reshape { a } => {
            let s = nodes[*a].value.shape().to_vec();
            accumulate(nodes, grads, *a, Tensor::from_parts(s, g.data().to_vec()));
        }
        Op::Conv2d(rec) => {
            let x = &nodes[rec.x].value;
            let w = &nodes[rec.w].value;
            let want = [
                nodes[rec.x].requires_grad,
                nodes[rec.w].requires_grad,
                nodes[rec.b].requires_grad,
            ];
            let (gx, gw, gb) = nn::conv2d_backward(rec, x, w, g, want);
            if let Some(t) = gx {
                accumulate(nodes, grads, rec.x, t);
            }
            if let Some(t) = gw {
                accumulate(nodes, grads, rec.w, t);
            }
            if let Some(t) = gb {
                accumulate(nodes, grads, rec.b, t);
            }
        }
        Op::MaxPool { x, argmax } => {
            let s = nodes[*x].value.shape().to_vec();
            let mut data = vec![0.0; nodes[*x].value.len()];
            for (gv, &j) in g.data().iter().zip(argmax) {
                data[j] += gv;
            }
            accumulate(nodes, grads, *x, Tensor::from_parts(s, data));
        }
        Op::Upsample { x, factor } => {
            let xs = nodes[*x].value.shape().to_vec();
            accumulate(nodes, grads, *x, nn::upsample_backward(&xs, *factor, g));
        }
        Op::Relu { x } => {
            let xv = &nodes[*x].value;
            let data = g
                .data()
                .iter()
                .zip(xv.data())
                .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                .collect();
            accumulate(nodes, grads, *x, Tensor::from_parts(xv.shape().to_vec(), data));
        }
        Op::SoftmaxCe { logits, dlogits } => {
            let up = g.item();
            let s = nodes[*logits].value.shape().to_vec();
            let data = dlogits.iter().map(|d| d * up).collect();
            accumulate(nodes, grads, *logits, Tensor::from_parts(s, data));
        }
    }
}

fn binary_backward(
    kind: BinaryKind,
    a: &Tensor,
    b: &Tensor,
    g: &Tensor,
) -> (Option<Tensor>, Option<Tensor>) {
    let out_shape = g.shape().to_vec();
    let ma = broadcast_index_map(a.shape(), &out_shape);
    let mb = broadcast_index_map(b.shape(), &out_shape);
    let gd = g.data();
    let expand = |f: &dyn Fn(usize, f64) -> f64| -> Tensor {
        Tensor::from_parts(
            out_shape.clone(),
            gd.iter().enumerate().map(|(i, &gv)| f(i, gv)).collect(),
        )
    };
    let (ad, bd) = (a.data(), b.data());
    let (ga, gb) = match kind {
        BinaryKind::Add => (g.clone(), g.clone()),
        BinaryKind::Sub => (g.clone(), g.map(|v| -v)),
        BinaryKind::Mul => (
            expand(&|i, gv| gv * bd[mb[i]]),
            expand(&|i, gv| gv * ad[ma[i]]),
        ),
        BinaryKind::Div => (
            expand(&|i, gv| gv / bd[mb[i]]),
            expand(&|i, gv| {
                let bv = bd[mb[i]];
                -gv * ad[ma[i]] / (bv * bv)
            }),
        ),
    };
    (
        Some(reduce_to(&ga, a.shape())),
        Some(reduce_to(&gb, b.shape())),
    )
}

/// Gradients produced by one backward sweep.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(usize, String)>,
}

impl Gradients {
    pub fn get(&self, v: Var<'_>) -> Option<&Tensor> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }

    /// Gradient with respect to `v`, zeros if `v` was unreachable.
    pub fn wrt(&self, v: Var<'_>) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(v.value().shape()))
    }

    /// `(name, gradient)` for every trainable parameter reached by the sweep.
    pub fn params(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params
            .iter()
            .filter_map(|(id, name)| self.grads[*id].as_ref().map(|g| (name.as_str(), g)))
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn item(&self) -> f64 {
        self.value().item()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires_grad_of(self.id)
    }

    pub(crate) fn same_tape(&self, other: &Var<'_>) {
        assert!(std::ptr::eq(self.tape, other.tape), "vars from different tapes");
    }

    pub fn binary(self, kind: BinaryKind, b: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&b);
        let (av, bv) = (self.value(), b.value());
        let shape = broadcast_shape(av.shape(), bv.shape()).ok_or_else(|| {
            Error::shape(format!(
                "{:?} {:?} {:?}: no broadcast",
                kind,
                av.shape(),
                bv.shape()
            ))
        })?;
        if kind == BinaryKind::Div {
            if let Some(index) = bv.data().iter().position(|&v| v == 0.0) {
                return Err(Error::DivisionDomain { index });
            }
        }
        let f = |x: f64, y: f64| match kind {
            BinaryKind::Add => x + y,
            BinaryKind::Sub => x - y,
            BinaryKind::Mul => x * y,
            BinaryKind::Div => x / y,
        };
        let data: Vec<f64> = if av.shape() == bv.shape() {
            av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let ma = broadcast_index_map(av.shape(), &shape);
            let mb = broadcast_index_map(bv.shape(), &shape);
            ma.iter()
                .zip(&mb)
                .map(|(&i, &j)| f(av.data()[i], bv.data()[j]))
                .collect()
        };
        let rg = self.requires_grad() || b.requires_grad();
        Ok(self.tape.push(
            Tensor::from_parts(shape, data),
            Op::Binary {
                kind,
                a: self.id,
                b: b.id,
            },
            rg,
        ))
    }

    pub fn add(self, b: Var<'t>) -> Result<Var<'t>> {
        self.binary(BinaryKind::Add, b)
    }

    pub fn sub(self, b: Var<'t>) -> Result<Var<'t>> {
        self.binary(BinaryKind::Sub, b)
    }

    pub fn mul(self, b: Var<'t>) -> Result<Var<'t>> {
        self.binary(BinaryKind::Mul, b)
    }

    pub fn div(self, b: Var<'t>) -> Result<Var<'t>> {
        self.binary(BinaryKind::Div, b)
    }

    pub fn unary(self, kind: UnaryKind) -> Result<Var<'t>> {
        let v = self.value();
        let bad = match kind {
            UnaryKind::Log => v.data().iter().position(|&x| !(x > 0.0)),
            UnaryKind::Sqrt => v.data().iter().position(|&x| !(x >= 0.0)),
            _ => None,
        };
        if let Some(index) = bad {
            return Err(Error::DomainError {
                op: if kind == UnaryKind::Log { "log" } else { "sqrt" },
                index,
                value: v.data()[index],
            });
        }
        let out = v.map(match kind {
            UnaryKind::Exp => f64::exp,
            UnaryKind::Log => f64::ln,
            UnaryKind::Neg => |x: f64| -x,
            UnaryKind::Square => |x: f64| x * x,
            UnaryKind::Sqrt => f64::sqrt,
        });
        Ok(self
            .tape
            .push(out, Op::Unary { kind, a: self.id }, self.requires_grad()))
    }

    pub fn exp(self) -> Var<'t> {
        self.unary(UnaryKind::Exp).expect("exp is total")
    }

    pub fn log(self) -> Result<Var<'t>> {
        self.unary(UnaryKind::Log)
    }

    pub fn neg(self) -> Var<'t> {
        self.unary(UnaryKind::Neg).expect("neg is total")
    }

    pub fn square(self) -> Var<'t> {
        self.unary(UnaryKind::Square).expect("square is total")
    }

    pub fn sqrt(self) -> Result<Var<'t>> {
        self.unary(UnaryKind::Sqrt)
    }

    pub fn scale(self, factor: f64) -> Var<'t> {
        let out = self.value().map(|x| x * factor);
        self.tape
            .push(out, Op::Scale { a: self.id, factor }, self.requires_grad())
    }

    /// Add a scalar constant to every element.
    pub fn add_scalar(self, c: f64) -> Var<'t> {
        let k = self.tape.constant(Tensor::scalar(c));
        self.add(k).expect("scalar broadcasts")
    }

    pub fn matmul(self, b: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&b);
        let (av, bv) = (self.value(), b.value());
        if av.rank() != 2 || bv.rank() != 2 || av.shape()[1] != bv.shape()[0] {
            return Err(Error::shape(format!(
                "matmul {:?} x {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
        let mut c = vec![0.0; m * n];
        gemm(
            1.0,
            MatRef::row_major(av.data(), m, k),
            MatRef::row_major(bv.data(), k, n),
            0.0,
            &mut c,
        );
        let rg = self.requires_grad() || b.requires_grad();
        Ok(self.tape.push(
            Tensor::from_parts(vec![m, n], c),
            Op::MatMul {
                a: self.id,
                b: b.id,
            },
            rg,
        ))
    }

    /// Sum over `axes`, removing them; `None` sums everything to a scalar.
    pub fn reduce_sum(self, axes: Option<&[usize]>) -> Result<Var<'t>> {
        let v = self.value();
        let rank = v.rank();
        let reduce: Vec<bool> = match axes {
            None => vec![true; rank],
            Some(ax) => {
                let mut r = vec![false; rank];
                for &a in ax {
                    if a >= rank {
                        return Err(Error::AxisOutOfRange { axis: a, rank });
                    }
                    r[a] = true;
                }
                r
            }
        };
        let keep_shape: Vec<usize> = v
            .shape()
            .iter()
            .zip(&reduce)
            .map(|(&d, &r)| if r { 1 } else { d })
            .collect();
        let out_shape: Vec<usize> = v
            .shape()
            .iter()
            .zip(&reduce)
            .filter(|(_, &r)| !r)
            .map(|(&d, _)| d)
            .collect();
        let map = broadcast_index_map(&keep_shape, v.shape());
        let mut data = vec![0.0; keep_shape.iter().product()];
        for (x, &j) in v.data().iter().zip(&map) {
            data[j] += x;
        }
        Ok(self.tape.push(
            Tensor::from_parts(out_shape, data),
            Op::Sum {
                a: self.id,
                keep_shape,
            },
            self.requires_grad(),
        ))
    }

    pub fn sum(self) -> Var<'t> {
        self.reduce_sum(None).expect("full reduction")
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let out = self.value().reshape(shape)?;
        Ok(self
            .tape
            .push(out, Op::Reshape { a: self.id }, self.requires_grad()))
    }
}

/// Concatenate along `axis`; all other dimensions must agree.
pub fn concat<'t>(parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
    let first = parts.first().ok_or(Error::EmptyInput)?;
    let tape = first.tape;
    let values: Vec<Rc<Tensor>> = parts
        .iter()
        .map(|p| {
            first.same_tape(p);
            p.value()
        })
        .collect();
    let base = values[0].shape().to_vec();
    if axis >= base.len() {
        return Err(Error::AxisOutOfRange {
            axis,
            rank: base.len(),
        });
    }
    let mut total = 0;
    for v in &values {
        let s = v.shape();
        let compatible = s.len() == base.len()
            && s.iter()
                .zip(&base)
                .enumerate()
                .all(|(i, (a, b))| i == axis || a == b);
        if !compatible {
            return Err(Error::shape(format!("concat {:?} with {:?}", base, s)));
        }
        total += s[axis];
    }
    let mut shape = base.clone();
    shape[axis] = total;
    let outer: usize = base[..axis].iter().product();
    let inner: usize = base[axis + 1..].iter().product();
    let mut data = Vec::with_capacity(shape.iter().product());
    for o in 0..outer {
        for v in &values {
            let len = v.shape()[axis] * inner;
            data.extend_from_slice(&v.data()[o * len..(o + 1) * len]);
        }
    }
    let rg = parts.iter().any(|p| p.requires_grad());
    Ok(tape.push(
        Tensor::from_parts(shape, data),
        Op::Concat {
            parts: parts.iter().map(|p| p.id).collect(),
            axis,
        },
        rg,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn identities() {
        let tape = Tape::new();
        let a = tape.constant(t(&[3], &[1.0, 2.0, 3.0]));
        let z = tape.constant(Tensor::zeros(&[3]));
        assert_eq!(a.add(z).unwrap().value().data(), &[1.0, 2.0, 3.0]);
        let b = tape.constant(t(&[2], &[2.0, 3.0]));
        let o = tape.constant(Tensor::ones(&[2]));
        assert_eq!(b.mul(o).unwrap().value().data(), &[2.0, 3.0]);
        assert_eq!(tape.constant(Tensor::zeros(&[2])).exp().value().data(), &[1.0, 1.0]);
        let x = tape.constant(t(&[1], &[1.5]));
        assert_eq!(x.exp().log().unwrap().value().data(), &[1.5]);
    }

    #[test]
    fn row_broadcast_gradient_is_column_sum() {
        let tape = Tape::new();
        let a = tape.leaf(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let v = tape.leaf(t(&[3], &[10.0, 20.0, 30.0]));
        let s = a.add(v).unwrap();
        assert_eq!(s.value().data(), &[11.0, 22.0, 33.0, 14.0, 25.0, 36.0]);
        let w = tape.constant(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let g = tape.backward(s.mul(w).unwrap().sum()).unwrap();
        assert_eq!(g.wrt(v).data(), &[5.0, 7.0, 9.0]);
        assert_eq!(g.wrt(a).data(), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn domain_errors_name_index() {
        let tape = Tape::new();
        let x = tape.leaf(t(&[3], &[1.0, -2.0, 3.0]));
        assert!(matches!(x.log(), Err(Error::DomainError { index: 1, .. })));
        assert!(matches!(x.sqrt(), Err(Error::DomainError { index: 1, .. })));
        let d = tape.constant(t(&[3], &[1.0, 1.0, 0.0]));
        assert!(matches!(x.div(d), Err(Error::DivisionDomain { index: 2 })));
        let bad = tape.constant(Tensor::zeros(&[2]));
        assert!(matches!(x.add(bad), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn products_and_sums() {
        let tape = Tape::new();
        let m = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let i = tape.constant(Tensor::eye(2));
        assert_eq!(i.matmul(m).unwrap().value().data(), &[1.0, 2.0, 3.0, 4.0]);
        let z = tape.constant(Tensor::zeros(&[2, 3]));
        let any = tape.constant(Tensor::full(&[3, 4], 7.0));
        assert_eq!(z.matmul(any).unwrap().value().data(), &[0.0; 8]);
        assert_eq!(m.sum().item(), 10.0);
        let ones = tape.constant(Tensor::ones(&[2, 3]));
        assert_eq!(ones.reduce_sum(Some(&[0])).unwrap().value().data(), &[2.0, 2.0, 2.0]);
        assert!(matches!(ones.reduce_sum(Some(&[2])), Err(Error::AxisOutOfRange { axis: 2, rank: 2 })));
    }

    #[test]
    fn concat_cases() {
        let tape = Tape::new();
        let a = tape.leaf(t(&[2, 1], &[1.0, 2.0]));
        let b = tape.leaf(t(&[2, 1], &[3.0, 4.0]));
        let c = concat(&[a, b], 1).unwrap();
        assert_eq!(c.value().data(), &[1.0, 3.0, 2.0, 4.0]);
        assert_eq!(concat(&[a], 0).unwrap().value().data(), a.value().data());
        assert!(matches!(concat(&[], 0), Err(Error::EmptyInput)));
        let w = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let g = tape.backward(c.mul(w).unwrap().sum()).unwrap();
        assert_eq!(g.wrt(a).data(), &[1.0, 3.0]);
        assert_eq!(g.wrt(b).data(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_rules() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(2.0));
        let y = tape.leaf(Tensor::scalar(3.0));
        let g = tape.backward(x.mul(y).unwrap()).unwrap();
        assert_eq!((g.wrt(x).item(), g.wrt(y).item()), (3.0, 2.0));
        let v = tape.leaf(t(&[3], &[1.0, -2.0, 0.5]));
        let g = tape.backward(v.square().sum()).unwrap();
        assert_eq!(g.wrt(v).data(), &[2.0, -4.0, 1.0]);
        assert!(matches!(tape.backward(v), Err(Error::NotScalar(_))));
        let c = tape.constant(Tensor::scalar(1.0));
        assert!(matches!(tape.backward(c), Err(Error::NoTape)));
    }

    #[test]
    fn accumulation_doubles_and_is_deterministic() {
        let mut reg = ParamRegistry::new();
        reg.insert("w", t(&[2, 2], &[0.3, -0.1, 0.7, 0.2])).unwrap();
        let run = |reg: &mut ParamRegistry| {
            let tape = Tape::new();
            let w = tape.param(reg, "w").unwrap();
            let x = tape.constant(t(&[1, 2], &[1.0, 2.0]));
            let loss = x.matmul(w).unwrap().exp().sum();
            tape.backward_into(loss, reg).unwrap();
        };
        run(&mut reg);
        let once = reg.get("w").unwrap().grad.clone();
        run(&mut reg);
        let twice = reg.get("w").unwrap().grad.clone();
        for (a, b) in once.data().iter().zip(twice.data()) {
            assert_eq!(2.0 * a, *b);
        }
        reg.zero_grad();
        run(&mut reg);
        assert_eq!(reg.get("w").unwrap().grad.data(), once.data());
    }
}
