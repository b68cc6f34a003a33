use std::cell::RefCell;
use std::rc::Rc;
use std::sync::Arc;

use super::array::Array;
use super::tensor::Tensor;
use super::AdError;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum UnaryKind {
    Neg,
    Exp,
    Log,
    Sqrt,
    Sigmoid,
    Tanh,
    MaxScalar(u64),
    Scale(u64),
    AddScalar(u64),
    EntropyTerm,
    EntropyTermGrad,
}

// f64 parameters are stored as bit patterns so the op kind stays Copy + Eq.
pub(crate) fn bits(x: f64) -> u64 {
    x.to_bits()
}

pub(crate) fn unbits(b: u64) -> f64 {
    f64::from_bits(b)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Debug)]
pub(crate) enum Op {
    Leaf,
    Unary {
        kind: UnaryKind,
        x: usize,
    },
    Binary {
        kind: BinaryKind,
        lhs: usize,
        rhs: usize,
    },
    Matmul {
        lhs: usize,
        rhs: usize,
    },
    Transpose {
        x: usize,
    },
    Reshape {
        x: usize,
    },
    SumAll {
        x: usize,
    },
    SumAxis {
        x: usize,
        axis: usize,
    },
    LogSumExpAll {
        x: usize,
    },
    LogSumExpAxis {
        x: usize,
        axis: usize,
    },
    Softmax {
        x: usize,
        axis: usize,
    },
    GatherRows {
        x: usize,
        indices: Arc<Vec<usize>>,
        src_rows: usize,
    },
    ScatterRows {
        x: usize,
        indices: Arc<Vec<usize>>,
    },
}

pub(crate) struct Node {
    pub op: Op,
    pub shape: Vec<usize>,
    pub value: Arc<Vec<f64>>,
    /// False only for constant leaves recorded as counterparts of tracked
    /// operands; backward skips accumulating into them.
    pub requires: bool,
}

#[derive(Default)]
struct TapeInner {
    nodes: Vec<Node>,
}

/// Records a computation graph. Single-threaded by construction (`Rc`):
/// recording and backward must happen on one logical thread.
#[derive(Clone, Default)]
pub struct Tape {
    inner: Rc<RefCell<TapeInner>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub(crate) fn same_tape(&self, other: &Tape) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }

    /// Registers `value` as a differentiable leaf and returns the tracked tensor.
    pub fn watch(&self, value: Array) -> Tensor {
        let id = self.push(Op::Leaf, &value, true);
        Tensor::tracked(value, self.clone(), id)
    }

    pub(crate) fn push_const_leaf(&self, value: &Array) -> usize {
        self.push(Op::Leaf, value, false)
    }

    pub(crate) fn push(&self, op: Op, value: &Array, requires: bool) -> usize {
        let mut inner = self.inner.borrow_mut();
        let id = inner.nodes.len();
        inner.nodes.push(Node {
            op,
            shape: value.shape().to_vec(),
            value: value.data_arc(),
            requires,
        });
        id
    }

    pub(crate) fn node_op(&self, id: usize) -> Op {
        self.inner.borrow().nodes[id].op.clone()
    }

    pub(crate) fn node_requires(&self, id: usize) -> bool {
        self.inner.borrow().nodes[id].requires
    }

    pub(crate) fn node_shape(&self, id: usize) -> Vec<usize> {
        self.inner.borrow().nodes[id].shape.clone()
    }

    /// Rebuilds the tensor stored at `id`. Linked back to the tape only when
    /// the caller is recording gradients (`create_graph`) and the node
    /// participates in differentiation.
    pub(crate) fn node_tensor(&self, id: usize, linked: bool) -> Tensor {
        let inner = self.inner.borrow();
        let node = &inner.nodes[id];
        let array = Array::from_parts(node.shape.clone(), Arc::clone(&node.value));
        drop(inner);
        if linked && self.node_requires(id) {
            Tensor::tracked(array, self.clone(), id)
        } else {
            Tensor::from(array)
        }
    }
}

/// Per-node gradients produced by one backward pass. A fresh map is returned
/// each time, so repeated passes never accumulate into stale buffers.
pub struct Gradients {
    tape: Tape,
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient with respect to `t`, if `t` is on this tape and was reached
    /// by the backward sweep. Detached tensors and unreachable nodes get `None`.
    pub fn wrt(&self, t: &Tensor) -> Option<Tensor> {
        let (tape, id) = t.link()?;
        if !tape.same_tape(&self.tape) {
            return None;
        }
        self.grads.get(id).and_then(|g| g.clone())
    }

    /// Like [`Gradients::wrt`] but returns a zero tensor for missing entries.
    pub fn wrt_or_zeros(&self, t: &Tensor) -> Tensor {
        self.wrt(t)
            .unwrap_or_else(|| Tensor::from(Array::zeros(t.shape().to_vec())))
    }
}

fn accumulate(
    slot: &mut Option<Tensor>,
    contribution: Tensor,
) -> Result<(), AdError> {
    *slot = Some(match slot.take() {
        Some(existing) => existing.add(&contribution)?,
        None => contribution,
    });
    Ok(())
}

/// Reduces a broadcasted gradient back to the shape of the originating
/// operand. Only scalar-with-array broadcasting exists, so the only
/// reduction is a full sum.
fn reduce_to(g: Tensor, shape: &[usize]) -> Result<Tensor, AdError> {
    if g.shape() == shape {
        Ok(g)
    } else if shape.iter().product::<usize>() == 1 {
        g.sum_all()?.reshape(shape.to_vec())
    } else {
        Ok(g)
    }
}

fn broadcast_like(g: &Tensor, axis: usize, shape: &[usize]) -> Result<Tensor, AdError> {
    // g has keep-dim shape ([1, n] or [m, 1]); expand along `axis`.
    if axis == 0 {
        let ones = Tensor::from(Array::ones(vec![shape[0], 1]));
        ones.matmul(g)
    } else {
        let ones = Tensor::from(Array::ones(vec![1, shape[1]]));
        g.matmul(&ones)
    }
}

pub(crate) fn run_backward(
    output: &Tensor,
    cotangent: Option<&Array>,
    create_graph: bool,
) -> Result<Gradients, AdError> {
    let (tape, out_id) = output.link().ok_or(AdError::NotOnTape)?;
    let seed = match cotangent {
        Some(c) => {
            if c.shape() != output.shape() {
                return Err(AdError::CotangentShape {
                    expected: output.shape().to_vec(),
                    got: c.shape().to_vec(),
                });
            }
            Tensor::from(c.clone())
        }
        None => {
            if output.len() != 1 {
                return Err(AdError::NonScalarSeed {
                    shape: output.shape().to_vec(),
                });
            }
            Tensor::from(Array::ones(output.shape().to_vec()))
        }
    };

    let mut grads: Vec<Option<Tensor>> = Vec::new();
    grads.resize_with(out_id + 1, || None);
    grads[out_id] = Some(seed);

    for id in (0..=out_id).rev() {
        let Some(g) = grads[id].clone() else { continue };
        let op = tape.node_op(id);
        // Tensors feeding a VJP are linked back to the tape only when the
        // gradient itself must stay differentiable.
        let input = |xid: usize| tape.node_tensor(xid, create_graph);
        let this = |linked: bool| tape.node_tensor(id, linked);
        match op {
            Op::Leaf => {}
            Op::Unary { kind, x } => {
                if !tape.node_requires(x) {
                    continue;
                }
                let contrib = match kind {
                    UnaryKind::Neg => g.neg()?,
                    UnaryKind::Exp => g.mul(&this(create_graph))?,
                    UnaryKind::Log => g.div(&input(x))?,
                    UnaryKind::Sqrt => g.div(&this(create_graph).scale(2.0)?)?,
                    UnaryKind::Sigmoid => {
                        let y = this(create_graph);
                        let one_minus = y.neg()?.add_scalar(1.0)?;
                        g.mul(&y)?.mul(&one_minus)?
                    }
                    UnaryKind::Tanh => {
                        let y = this(create_graph);
                        let one_minus_sq = y.mul(&y)?.neg()?.add_scalar(1.0)?;
                        g.mul(&one_minus_sq)?
                    }
                    UnaryKind::MaxScalar(c) => {
                        // Piecewise constant mask; exact almost everywhere.
                        let threshold = unbits(c);
                        let xv = input(x);
                        let mask: Vec<f64> = xv
                            .data()
                            .iter()
                            .map(|&v| if v > threshold { 1.0 } else { 0.0 })
                            .collect();
                        let mask = Tensor::from(Array::from_vec(xv.shape().to_vec(), mask)?);
                        g.mul(&mask)?
                    }
                    UnaryKind::Scale(c) => g.scale(unbits(c))?,
                    UnaryKind::AddScalar(_) => g.clone(),
                    UnaryKind::EntropyTerm => g.mul(&input(x).entropy_term_grad()?)?,
                    UnaryKind::EntropyTermGrad => {
                        // d/dx [-(1 + ln x)] = -1/x, taken as a local constant:
                        // third and higher orders are out of scope.
                        let xv = input(x);
                        let factor: Vec<f64> = xv
                            .data()
                            .iter()
                            .map(|&v| if v > 0.0 { -1.0 / v } else { 0.0 })
                            .collect();
                        let factor = Tensor::from(Array::from_vec(xv.shape().to_vec(), factor)?);
                        g.mul(&factor)?
                    }
                };
                accumulate(&mut grads[x], contrib)?;
            }
            Op::Binary { kind, lhs, rhs } => {
                let want_l = tape.node_requires(lhs);
                let want_r = tape.node_requires(rhs);
                match kind {
                    BinaryKind::Add => {
                        if want_l {
                            let c = reduce_to(g.clone(), &tape.node_shape(lhs))?;
                            accumulate(&mut grads[lhs], c)?;
                        }
                        if want_r {
                            let c = reduce_to(g.clone(), &tape.node_shape(rhs))?;
                            accumulate(&mut grads[rhs], c)?;
                        }
                    }
                    BinaryKind::Sub => {
                        if want_l {
                            let c = reduce_to(g.clone(), &tape.node_shape(lhs))?;
                            accumulate(&mut grads[lhs], c)?;
                        }
                        if want_r {
                            let c = reduce_to(g.neg()?, &tape.node_shape(rhs))?;
                            accumulate(&mut grads[rhs], c)?;
                        }
                    }
                    BinaryKind::Mul => {
                        if want_l {
                            let c = reduce_to(g.mul(&input(rhs))?, &tape.node_shape(lhs))?;
                            accumulate(&mut grads[lhs], c)?;
                        }
                        if want_r {
                            let c = reduce_to(g.mul(&input(lhs))?, &tape.node_shape(rhs))?;
                            accumulate(&mut grads[rhs], c)?;
                        }
                    }
                    BinaryKind::Div => {
                        if want_l {
                            let c = reduce_to(g.div(&input(rhs))?, &tape.node_shape(lhs))?;
                            accumulate(&mut grads[lhs], c)?;
                        }
                        if want_r {
                            let out = this(create_graph);
                            let c = reduce_to(
                                g.mul(&out)?.div(&input(rhs))?.neg()?,
                                &tape.node_shape(rhs),
                            )?;
                            accumulate(&mut grads[rhs], c)?;
                        }
                    }
                }
            }
            Op::Matmul { lhs, rhs } => {
                if tape.node_requires(lhs) {
                    let c = g.matmul(&input(rhs).transpose()?)?;
                    accumulate(&mut grads[lhs], c)?;
                }
                if tape.node_requires(rhs) {
                    let c = input(lhs).transpose()?.matmul(&g)?;
                    accumulate(&mut grads[rhs], c)?;
                }
            }
            Op::Transpose { x } => {
                if tape.node_requires(x) {
                    accumulate(&mut grads[x], g.transpose()?)?;
                }
            }
            Op::Reshape { x } => {
                if tape.node_requires(x) {
                    accumulate(&mut grads[x], g.reshape(tape.node_shape(x))?)?;
                }
            }
            Op::SumAll { x } => {
                if tape.node_requires(x) {
                    let ones = Tensor::from(Array::ones(tape.node_shape(x)));
                    accumulate(&mut grads[x], ones.mul(&g)?)?;
                }
            }
            Op::SumAxis { x, axis } => {
                if tape.node_requires(x) {
                    let shape = tape.node_shape(x);
                    accumulate(&mut grads[x], broadcast_like(&g, axis, &shape)?)?;
                }
            }
            Op::LogSumExpAll { x } => {
                if tape.node_requires(x) {
                    let xv = input(x);
                    let out = this(create_graph);
                    // softmax of the inputs, written as exp(x - lse(x))
                    let soft = xv.sub(&out)?.exp()?;
                    accumulate(&mut grads[x], soft.mul(&g)?)?;
                }
            }
            Op::LogSumExpAxis { x, axis } => {
                if tape.node_requires(x) {
                    let xv = input(x);
                    let shape = xv.shape().to_vec();
                    let out_b = broadcast_like(&this(create_graph), axis, &shape)?;
                    let soft = xv.sub(&out_b)?.exp()?;
                    let g_b = broadcast_like(&g, axis, &shape)?;
                    accumulate(&mut grads[x], soft.mul(&g_b)?)?;
                }
            }
            Op::Softmax { x, axis } => {
                if tape.node_requires(x) {
                    let y = this(create_graph);
                    let shape = y.shape().to_vec();
                    let dot = g.mul(&y)?.sum_axis(axis)?;
                    let dot_b = broadcast_like(&dot, axis, &shape)?;
                    accumulate(&mut grads[x], y.mul(&g.sub(&dot_b)?)?)?;
                }
            }
            Op::GatherRows {
                x,
                indices,
                src_rows,
            } => {
                if tape.node_requires(x) {
                    accumulate(&mut grads[x], g.scatter_rows(&indices, src_rows)?)?;
                }
            }
            Op::ScatterRows { x, indices, .. } => {
                if tape.node_requires(x) {
                    accumulate(&mut grads[x], g.gather_rows(&indices)?)?;
                }
            }
        }
    }

    Ok(Gradients { tape, grads })
}
