//! Reverse-mode differentiation over a recorded tape of tensor ops.
//!
//! A [`Tape`] borrows a [`ParamStore`] for the duration of one forward pass.
//! Every op evaluates eagerly and appends a node; [`Tape::backward`] walks the
//! nodes in reverse and returns a detached [`Gradients`] table, so the store
//! can be mutated once the tape is dropped.
//!
//! Discrete decisions made during a forward pass (top-k selections, channel
//! permutations, provider embeddings) go through [`Tape::freeze_indices`] and
//! [`Tape::freeze_vector`]. The resulting [`FrozenLog`] can be replayed so a
//! perturbed forward pass takes exactly the same branch, which is what the
//! finite-difference checker relies on.

mod gradcheck;
mod kernels;

use std::cell::Cell;
use std::collections::{HashMap, VecDeque};
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Real, Shape, Tensor};

pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
pub use kernels::ChannelIndex;

use kernels::Broadcast;

/// Logistic function, shared by the tape op and by callers that need to
/// reproduce a tape result exactly.
pub fn sigmoid<T: Real>(x: T) -> T {
    kernels::sigmoid(x)
}

/// Handle to a node on a tape. Only meaningful for the tape that issued it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Op families, used for fault injection and diagnostics.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    Param,
    Add,
    Sub,
    Mul,
    AddScalar,
    MulScalar,
    Relu,
    Sigmoid,
    Tanh,
    Abs,
    Maximum,
    GlobalAvgPool,
    Sum,
    Mean,
    Concat,
    Narrow,
    Gather,
    Reshape,
    Upsample2x,
    ReflectPad,
    Conv2d,
    InstanceNorm,
    L2Normalize,
    ChannelGram,
    Softmax,
    ChannelAttend,
}

impl OpKind {
    pub const ALL: [OpKind; 27] = [
        OpKind::Leaf,
        OpKind::Param,
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::AddScalar,
        OpKind::MulScalar,
        OpKind::Relu,
        OpKind::Sigmoid,
        OpKind::Tanh,
        OpKind::Abs,
        OpKind::Maximum,
        OpKind::GlobalAvgPool,
        OpKind::Sum,
        OpKind::Mean,
        OpKind::Concat,
        OpKind::Narrow,
        OpKind::Gather,
        OpKind::Reshape,
        OpKind::Upsample2x,
        OpKind::ReflectPad,
        OpKind::Conv2d,
        OpKind::InstanceNorm,
        OpKind::L2Normalize,
        OpKind::ChannelGram,
        OpKind::Softmax,
        OpKind::ChannelAttend,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::Param => "param",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::AddScalar => "add_scalar",
            OpKind::MulScalar => "mul_scalar",
            OpKind::Relu => "relu",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Tanh => "tanh",
            OpKind::Abs => "abs",
            OpKind::Maximum => "maximum",
            OpKind::GlobalAvgPool => "global_avg_pool",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::Concat => "concat",
            OpKind::Narrow => "narrow",
            OpKind::Gather => "gather",
            OpKind::Reshape => "reshape",
            OpKind::Upsample2x => "upsample2x",
            OpKind::ReflectPad => "reflect_pad",
            OpKind::Conv2d => "conv2d",
            OpKind::InstanceNorm => "instance_norm",
            OpKind::L2Normalize => "l2_normalize",
            OpKind::ChannelGram => "channel_gram",
            OpKind::Softmax => "softmax",
            OpKind::ChannelAttend => "channel_attend",
        }
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OpKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        OpKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Argument(format!("unknown op {s:?}")))
    }
}

thread_local! {
    static BACKWARD_FAULT: Cell<Option<OpKind>> = const { Cell::new(None) };
}

/// Makes the backward rule of `kind` on this thread scale its input
/// gradients by 1.5. Used to show that the gradient checker catches a broken
/// rule; pass `None` to restore.
#[doc(hidden)]
pub fn set_backward_fault(kind: Option<OpKind>) {
    BACKWARD_FAULT.with(|f| f.set(kind));
}

#[derive(Clone, Debug)]
enum Op<T: Real> {
    Leaf,
    Param(ParamId),
    Add(Var, Var, Broadcast),
    Sub(Var, Var, Broadcast),
    Mul(Var, Var, Broadcast),
    AddScalar(Var, T),
    MulScalar(Var, T),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Abs(Var),
    Maximum(Var, Var),
    GlobalAvgPool(Var),
    Sum(Var),
    Mean(Var),
    Concat(Vec<Var>),
    Narrow { x: Var, start: usize, len: usize },
    Gather { x: Var, idx: Arc<ChannelIndex> },
    Reshape(Var, Shape),
    Upsample2x(Var),
    ReflectPad { x: Var, pad: usize },
    Conv2d { x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize },
    InstanceNorm { x: Var, eps: f64 },
    L2Normalize(Var),
    ChannelGram { q: Var, k: Var, heads: usize },
    Softmax(Var),
    ChannelAttend { attn: Var, v: Var, heads: usize },
}

const L2_EPS: f64 = 1e-12;

impl<T: Real> Op<T> {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Param(_) => OpKind::Param,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::AddScalar(..) => OpKind::AddScalar,
            Op::MulScalar(..) => OpKind::MulScalar,
            Op::Relu(_) => OpKind::Relu,
            Op::Sigmoid(_) => OpKind::Sigmoid,
            Op::Tanh(_) => OpKind::Tanh,
            Op::Abs(_) => OpKind::Abs,
            Op::Maximum(..) => OpKind::Maximum,
            Op::GlobalAvgPool(_) => OpKind::GlobalAvgPool,
            Op::Sum(_) => OpKind::Sum,
            Op::Mean(_) => OpKind::Mean,
            Op::Concat(_) => OpKind::Concat,
            Op::Narrow { .. } => OpKind::Narrow,
            Op::Gather { .. } => OpKind::Gather,
            Op::Reshape(..) => OpKind::Reshape,
            Op::Upsample2x(_) => OpKind::Upsample2x,
            Op::ReflectPad { .. } => OpKind::ReflectPad,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::InstanceNorm { .. } => OpKind::InstanceNorm,
            Op::L2Normalize(_) => OpKind::L2Normalize,
            Op::ChannelGram { .. } => OpKind::ChannelGram,
            Op::Softmax(_) => OpKind::Softmax,
            Op::ChannelAttend { .. } => OpKind::ChannelAttend,
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf | Op::Param(_) => vec![],
            Op::Add(a, b, _) | Op::Sub(a, b, _) | Op::Mul(a, b, _) | Op::Maximum(a, b) => vec![*a, *b],
            Op::AddScalar(x, _)
            | Op::MulScalar(x, _)
            | Op::Relu(x)
            | Op::Sigmoid(x)
            | Op::Tanh(x)
            | Op::Abs(x)
            | Op::GlobalAvgPool(x)
            | Op::Sum(x)
            | Op::Mean(x)
            | Op::Reshape(x, _)
            | Op::Upsample2x(x)
            | Op::L2Normalize(x)
            | Op::Softmax(x) => vec![*x],
            Op::Narrow { x, .. } | Op::Gather { x, .. } | Op::ReflectPad { x, .. } | Op::InstanceNorm { x, .. } => {
                vec![*x]
            }
            Op::Concat(xs) => xs.clone(),
            Op::Conv2d { x, w, b, .. } => {
                let mut v = vec![*x, *w];
                v.extend(b);
                v
            }
            Op::ChannelGram { q, k, .. } => vec![*q, *k],
            Op::ChannelAttend { attn, v, .. } => vec![*attn, *v],
        }
    }
}

#[derive(Clone, Debug)]
struct Node<T: Real> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

#[derive(Clone, Debug, PartialEq)]
enum Frozen<T: Real> {
    Indices(Arc<ChannelIndex>),
    Vector(Vec<T>),
}

/// Discrete decisions recorded during one forward pass, in call order.
#[derive(Clone, Debug, PartialEq)]
pub struct FrozenLog<T: Real = f32> {
    entries: Vec<Frozen<T>>,
}

impl<T: Real> FrozenLog<T> {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Index lists recorded so far, in order.
    pub fn indices(&self) -> impl Iterator<Item = &ChannelIndex> {
        self.entries.iter().filter_map(|e| match e {
            Frozen::Indices(i) => Some(i.as_ref()),
            Frozen::Vector(_) => None,
        })
    }
}

/// Recorded forward computation.
pub struct Tape<'p, T: Real = f32> {
    nodes: Vec<Node<T>>,
    params: Option<&'p ParamStore<T>>,
    param_nodes: HashMap<ParamId, Var>,
    frozen: Vec<Frozen<T>>,
    replay: Option<VecDeque<Frozen<T>>>,
}

impl<T: Real> Default for Tape<'_, T> {
    fn default() -> Self {
        Tape::new()
    }
}

impl<'p, T: Real> Tape<'p, T> {
    /// A tape without parameters; only constants and leaves.
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            params: None,
            param_nodes: HashMap::new(),
            frozen: Vec::new(),
            replay: None,
        }
    }

    pub fn with_params(params: &'p ParamStore<T>) -> Self {
        Tape { params: Some(params), ..Tape::new() }
    }

    /// A tape that answers freeze requests from `log` instead of computing them.
    pub fn replaying(params: &'p ParamStore<T>, log: FrozenLog<T>) -> Self {
        Tape {
            replay: Some(log.entries.into()),
            ..Tape::with_params(params)
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn params(&self) -> Option<&'p ParamStore<T>> {
        self.params
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn frozen_log(&self) -> FrozenLog<T> {
        FrozenLog { entries: self.frozen.clone() }
    }

    /// The node for a stored parameter. Repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Result<Var> {
        if let Some(&v) = self.param_nodes.get(&id) {
            return Ok(v);
        }
        let store = self
            .params
            .ok_or_else(|| Error::Contract("tape has no parameter store".into()))?;
        if id.index() >= store.len() {
            return Err(Error::Index(format!("parameter id {} not in store", id.index())));
        }
        let v = Var(self.nodes.len());
        self.nodes.push(Node {
            value: store.value(id).clone(),
            op: Op::Param(id),
            requires_grad: true,
        });
        self.param_nodes.insert(id, v);
        Ok(v)
    }

    /// Looks a parameter up by name.
    pub fn param_named(&mut self, name: &str) -> Result<Var> {
        let id = self
            .params
            .and_then(|p| p.id(name))
            .ok_or_else(|| Error::Lookup(name.to_string()))?;
        self.param(id)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// A leaf input; with `requires_grad` its gradient is reported by backward.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        let v = Var(self.nodes.len());
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad });
        v
    }

    /// Copy of `x` that does not propagate gradients.
    pub fn detach(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.constant(value)
    }

    fn push(&mut self, op: Op<T>) -> Result<Var> {
        let value = eval(&op, &self.nodes)?;
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        let v = Var(self.nodes.len());
        self.nodes.push(Node { value, op, requires_grad });
        Ok(v)
    }

    fn next_replay(&mut self) -> Option<Frozen<T>> {
        self.replay.as_mut().and_then(|q| q.pop_front())
    }

    fn is_replaying(&self) -> bool {
        self.replay.is_some()
    }

    /// Records (or, when replaying, recalls) a channel index decision.
    pub fn freeze_indices(
        &mut self,
        compute: impl FnOnce(&Self) -> Result<ChannelIndex>,
    ) -> Result<Arc<ChannelIndex>> {
        let idx = if self.is_replaying() {
            match self.next_replay() {
                Some(Frozen::Indices(i)) => i,
                other => {
                    return Err(Error::Contract(format!(
                        "frozen log out of step: expected indices, found {}",
                        describe(&other)
                    )))
                }
            }
        } else {
            Arc::new(compute(self)?)
        };
        self.frozen.push(Frozen::Indices(idx.clone()));
        Ok(idx)
    }

    /// Records (or recalls) a detached vector, such as a provider embedding.
    pub fn freeze_vector(&mut self, compute: impl FnOnce(&Self) -> Result<Vec<T>>) -> Result<Vec<T>> {
        let v = if self.is_replaying() {
            match self.next_replay() {
                Some(Frozen::Vector(v)) => v,
                other => {
                    return Err(Error::Contract(format!(
                        "frozen log out of step: expected vector, found {}",
                        describe(&other)
                    )))
                }
            }
        } else {
            compute(self)?
        };
        self.frozen.push(Frozen::Vector(v.clone()));
        Ok(v)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let k = kernels::broadcast_kind(self.shape(a), self.shape(b), "add")?;
        self.push(Op::Add(a, b, k))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let k = kernels::broadcast_kind(self.shape(a), self.shape(b), "sub")?;
        self.push(Op::Sub(a, b, k))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let k = kernels::broadcast_kind(self.shape(a), self.shape(b), "mul")?;
        self.push(Op::Mul(a, b, k))
    }

    pub fn add_scalar(&mut self, x: Var, s: T) -> Result<Var> {
        self.push(Op::AddScalar(x, s))
    }

    pub fn mul_scalar(&mut self, x: Var, s: T) -> Result<Var> {
        self.push(Op::MulScalar(x, s))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.push(Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.push(Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.push(Op::Tanh(x))
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.push(Op::Abs(x))
    }

    /// Elementwise maximum of equal-shaped tensors.
    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Dimension(format!(
                "maximum: shapes {} and {} differ",
                self.shape(a),
                self.shape(b)
            )));
        }
        self.push(Op::Maximum(a, b))
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        self.push(Op::GlobalAvgPool(x))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.push(Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        self.push(Op::Mean(x))
    }

    pub fn concat(&mut self, xs: &[Var]) -> Result<Var> {
        self.push(Op::Concat(xs.to_vec()))
    }

    pub fn narrow(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        self.push(Op::Narrow { x, start, len })
    }

    /// Splits channels into `[0, at)` and `[at, c)`.
    pub fn split(&mut self, x: Var, at: usize) -> Result<(Var, Var)> {
        let c = self.shape(x).c();
        if at == 0 || at >= c {
            return Err(Error::Index(format!("split index {at} not in (0, {c})")));
        }
        Ok((self.narrow(x, 0, at)?, self.narrow(x, at, c - at)?))
    }

    pub fn gather(&mut self, x: Var, idx: Arc<ChannelIndex>) -> Result<Var> {
        idx.validate(self.shape(x))?;
        self.push(Op::Gather { x, idx })
    }

    pub fn reshape(&mut self, x: Var, shape: Shape) -> Result<Var> {
        self.push(Op::Reshape(x, shape))
    }

    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        self.push(Op::Upsample2x(x))
    }

    pub fn reflect_pad(&mut self, x: Var, pad: usize) -> Result<Var> {
        self.push(Op::ReflectPad { x, pad })
    }

    /// 2-D cross-correlation with zero padding. Weight is (c_out, c_in, k, k),
    /// bias (1, c_out, 1, 1).
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        self.push(Op::Conv2d { x, w, b, stride, pad })
    }

    /// Per-(sample, channel) standardisation over the spatial plane.
    pub fn instance_norm(&mut self, x: Var, eps: f64) -> Result<Var> {
        self.push(Op::InstanceNorm { x, eps })
    }

    /// Scales every channel plane to unit L2 norm.
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        self.push(Op::L2Normalize(x))
    }

    pub fn channel_gram(&mut self, q: Var, k: Var, heads: usize) -> Result<Var> {
        self.push(Op::ChannelGram { q, k, heads })
    }

    /// Softmax along the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        self.push(Op::Softmax(x))
    }

    pub fn channel_attend(&mut self, attn: Var, v: Var, heads: usize) -> Result<Var> {
        self.push(Op::ChannelAttend { attn, v, heads })
    }

    /// Re-evaluates every node from its inputs and checks that the recorded
    /// values are reproduced bit for bit.
    pub fn replay(&self) -> Result<()> {
        for (i, node) in self.nodes.iter().enumerate() {
            let again = match &node.op {
                Op::Leaf => continue,
                Op::Param(id) => match self.params {
                    Some(p) => p.value(*id).clone(),
                    None => continue,
                },
                op => eval(op, &self.nodes[..i])?,
            };
            let same = again.shape() == node.value.shape()
                && again
                    .data()
                    .iter()
                    .zip(node.value.data())
                    .all(|(a, b)| a.to_f64().map(f64::to_bits) == b.to_f64().map(f64::to_bits));
            if !same {
                return Err(Error::Contract(format!(
                    "replay of node {i} ({}) differs from the recorded value",
                    node.op.kind()
                )));
            }
        }
        Ok(())
    }

    /// Reverse pass from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let shape = self.shape(loss);
        if !shape.is_scalar() {
            return Err(Error::Contract(format!("backward needs a scalar loss, got {shape}")));
        }
        self.backward_from(loss, Tensor::scalar(T::one()))
    }

    /// Reverse pass seeded with the upstream gradient `seed` of `out`, giving
    /// the vector-Jacobian product of everything upstream.
    pub fn backward_from(&self, out: Var, seed: Tensor<T>) -> Result<Gradients<T>> {
        if seed.shape() != self.shape(out) {
            return Err(Error::Dimension(format!(
                "seed shape {} does not match output shape {}",
                seed.shape(),
                self.shape(out)
            )));
        }
        let fault = BACKWARD_FAULT.with(Cell::get);
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; out.0 + 1];
        grads[out.0] = Some(seed);
        for i in (0..=out.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let mut contributions = self.vjp(&node.op, i, &g)?;
            if fault == Some(node.op.kind()) {
                for (_, t) in contributions.iter_mut() {
                    *t = t.map(|v| v * T::lit(1.5));
                }
            }
            for (v, t) in contributions {
                match &mut grads[v.0] {
                    Some(acc) => acc.add_assign(&t),
                    slot @ None => *slot = Some(t),
                }
            }
            grads[i] = Some(g);
        }
        let params = self
            .param_nodes
            .iter()
            .map(|(&id, &v)| (id, v))
            .collect::<Vec<_>>();
        Ok(Gradients { grads, params })
    }

    fn vjp(&self, op: &Op<T>, out: usize, g: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>> {
        let val = |v: Var| &self.nodes[v.0].value;
        let want = |v: Var| self.nodes[v.0].requires_grad;
        let mut res = Vec::new();
        let mut put = |v: Var, t: Tensor<T>| {
            if want(v) {
                res.push((v, t));
            }
        };
        match op {
            Op::Leaf | Op::Param(_) => {}
            Op::Add(a, b, k) => {
                if want(*b) {
                    put(*b, kernels::reduce_broadcast(g, val(*b).shape(), *k));
                }
                put(*a, g.clone());
            }
            Op::Sub(a, b, k) => {
                if want(*b) {
                    put(*b, kernels::reduce_broadcast(&g.map(|v| -v), val(*b).shape(), *k));
                }
                put(*a, g.clone());
            }
            Op::Mul(a, b, k) => {
                if want(*b) {
                    let prod = kernels::zip_broadcast(g, val(*a), Broadcast::Same, |x, y| x * y);
                    put(*b, kernels::reduce_broadcast(&prod, val(*b).shape(), *k));
                }
                if want(*a) {
                    put(*a, kernels::zip_broadcast(g, val(*b), *k, |x, y| x * y));
                }
            }
            Op::AddScalar(x, _) => put(*x, g.clone()),
            Op::MulScalar(x, s) => put(*x, g.map(|v| v * *s)),
            Op::Relu(x) => put(
                *x,
                kernels::zip_broadcast(g, val(*x), Broadcast::Same, |g, x| if x > T::zero() { g } else { T::zero() }),
            ),
            Op::Sigmoid(x) => {
                let y = &self.nodes[out].value;
                put(*x, kernels::zip_broadcast(g, y, Broadcast::Same, |g, y| g * y * (T::one() - y)));
            }
            Op::Tanh(x) => {
                let y = &self.nodes[out].value;
                put(*x, kernels::zip_broadcast(g, y, Broadcast::Same, |g, y| g * (T::one() - y * y)));
            }
            Op::Abs(x) => put(
                *x,
                kernels::zip_broadcast(g, val(*x), Broadcast::Same, |g, x| {
                    if x > T::zero() {
                        g
                    } else if x < T::zero() {
                        -g
                    } else {
                        T::zero()
                    }
                }),
            ),
            Op::Maximum(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                let mut ga = Vec::with_capacity(g.data().len());
                let mut gb = Vec::with_capacity(g.data().len());
                for ((&gv, &x), &y) in g.data().iter().zip(va.data()).zip(vb.data()) {
                    if x >= y {
                        ga.push(gv);
                        gb.push(T::zero());
                    } else {
                        ga.push(T::zero());
                        gb.push(gv);
                    }
                }
                put(*a, Tensor::new(va.shape(), ga)?);
                put(*b, Tensor::new(vb.shape(), gb)?);
            }
            Op::GlobalAvgPool(x) => {
                let s = val(*x).shape();
                let inv = T::lit(1.0 / s.plane() as f64);
                put(*x, Tensor::from_fn(s, |n, c, _, _| g.at(n, c, 0, 0) * inv));
            }
            Op::Sum(x) => put(*x, Tensor::full(val(*x).shape(), g.data()[0])),
            Op::Mean(x) => {
                let s = val(*x).shape();
                put(*x, Tensor::full(s, g.data()[0] * T::lit(1.0 / s.numel() as f64)));
            }
            Op::Concat(xs) => {
                let mut start = 0;
                for &x in xs {
                    let c = val(x).shape().c();
                    if want(x) {
                        put(x, kernels::narrow_channels(g, start, c)?);
                    }
                    start += c;
                }
            }
            Op::Narrow { x, start, .. } => put(*x, kernels::narrow_backward(g, val(*x).shape(), *start)),
            Op::Gather { x, idx } => put(*x, kernels::gather_backward(g, val(*x).shape(), idx)),
            Op::Reshape(x, _) => put(*x, g.reshape(val(*x).shape())?),
            Op::Upsample2x(x) => put(*x, kernels::upsample2x_backward(g, val(*x).shape())),
            Op::ReflectPad { x, pad } => put(*x, kernels::reflect_pad_backward(g, val(*x).shape(), *pad)),
            Op::Conv2d { x, w, b, stride, pad } => {
                let need = [want(*x), want(*w), b.is_some_and(want)];
                let cg = kernels::conv2d_backward(val(*x), val(*w), g, *stride, *pad, need);
                if let Some(dx) = cg.dx {
                    put(*x, dx);
                }
                if let Some(dw) = cg.dw {
                    put(*w, dw);
                }
                if let (Some(b), Some(db)) = (b, cg.db) {
                    put(*b, db);
                }
            }
            Op::InstanceNorm { x, eps } => {
                put(*x, kernels::instance_norm_backward(val(*x), &self.nodes[out].value, g, *eps))
            }
            Op::L2Normalize(x) => {
                put(*x, kernels::l2_normalize_backward(val(*x), &self.nodes[out].value, g, L2_EPS))
            }
            Op::ChannelGram { q, k, heads } => {
                let (dq, dk) = kernels::channel_gram_backward(val(*q), val(*k), g, *heads);
                put(*q, dq);
                put(*k, dk);
            }
            Op::Softmax(x) => put(*x, kernels::softmax_rows_backward(&self.nodes[out].value, g)),
            Op::ChannelAttend { attn, v, heads } => {
                let (da, dv) = kernels::channel_attend_backward(val(*attn), val(*v), g, *heads);
                put(*attn, da);
                put(*v, dv);
            }
        }
        Ok(res)
    }
}

fn describe<T: Real>(f: &Option<Frozen<T>>) -> &'static str {
    match f {
        None => "end of log",
        Some(Frozen::Indices(_)) => "indices",
        Some(Frozen::Vector(_)) => "vector",
    }
}

fn eval<T: Real>(op: &Op<T>, nodes: &[Node<T>]) -> Result<Tensor<T>> {
    let val = |v: &Var| -> Result<&Tensor<T>> {
        nodes
            .get(v.0)
            .map(|n| &n.value)
            .ok_or_else(|| Error::Contract(format!("node {} does not precede its consumer", v.0)))
    };
    let unary = |x: &Var, f: fn(T) -> T| -> Result<Tensor<T>> { Ok(val(x)?.map(f)) };
    Ok(match op {
        Op::Leaf | Op::Param(_) => {
            return Err(Error::Contract("leaf nodes have no forward rule".into()));
        }
        Op::Add(a, b, k) => kernels::zip_broadcast(val(a)?, val(b)?, *k, |x, y| x + y),
        Op::Sub(a, b, k) => kernels::zip_broadcast(val(a)?, val(b)?, *k, |x, y| x - y),
        Op::Mul(a, b, k) => kernels::zip_broadcast(val(a)?, val(b)?, *k, |x, y| x * y),
        Op::AddScalar(x, s) => val(x)?.map(|v| v + *s),
        Op::MulScalar(x, s) => val(x)?.map(|v| v * *s),
        Op::Relu(x) => unary(x, |v| if v > T::zero() { v } else { T::zero() })?,
        Op::Sigmoid(x) => unary(x, kernels::sigmoid)?,
        Op::Tanh(x) => unary(x, T::tanh)?,
        Op::Abs(x) => unary(x, T::abs)?,
        Op::Maximum(a, b) => {
            kernels::zip_broadcast(val(a)?, val(b)?, Broadcast::Same, |x, y| if x >= y { x } else { y })
        }
        Op::GlobalAvgPool(x) => kernels::global_avg_pool(val(x)?)?,
        Op::Sum(x) => {
            let t = val(x)?;
            if t.shape().numel() == 0 {
                return Err(Error::Dimension("sum of empty tensor".into()));
            }
            Tensor::scalar(t.sum())
        }
        Op::Mean(x) => {
            let t = val(x)?;
            let n = t.shape().numel();
            if n == 0 {
                return Err(Error::Dimension("mean of empty tensor".into()));
            }
            Tensor::scalar(t.sum() * T::lit(1.0 / n as f64))
        }
        Op::Concat(xs) => {
            let parts = xs.iter().map(&val).collect::<Result<Vec<_>>>()?;
            kernels::concat_channels(&parts)?
        }
        Op::Narrow { x, start, len } => kernels::narrow_channels(val(x)?, *start, *len)?,
        Op::Gather { x, idx } => kernels::gather_channels(val(x)?, idx)?,
        Op::Reshape(x, s) => val(x)?.reshape(*s)?,
        Op::Upsample2x(x) => kernels::upsample2x(val(x)?),
        Op::ReflectPad { x, pad } => kernels::reflect_pad(val(x)?, *pad)?,
        Op::Conv2d { x, w, b, stride, pad } => {
            let bias = b.as_ref().map(&val).transpose()?;
            kernels::conv2d(val(x)?, val(w)?, bias, *stride, *pad)?
        }
        Op::InstanceNorm { x, eps } => kernels::instance_norm(val(x)?, *eps),
        Op::L2Normalize(x) => kernels::l2_normalize(val(x)?, L2_EPS),
        Op::ChannelGram { q, k, heads } => kernels::channel_gram(val(q)?, val(k)?, *heads)?,
        Op::Softmax(x) => kernels::softmax_rows(val(x)?),
        Op::ChannelAttend { attn, v, heads } => kernels::channel_attend(val(attn)?, val(v)?, *heads)?,
    })
}

/// Gradients produced by one backward pass. Independent of the tape.
#[derive(Clone, Debug)]
pub struct Gradients<T: Real = f32> {
    grads: Vec<Option<Tensor<T>>>,
    params: Vec<(ParamId, Var)>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of the loss with respect to `v`, if any flowed there.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params
            .iter()
            .find(|(p, _)| *p == id)
            .and_then(|(_, v)| self.get(*v))
    }

    /// Adds every parameter gradient into the store's accumulators.
    pub fn accumulate_into(&self, store: &mut ParamStore<T>) -> Result<()> {
        let mut params = self.params.clone();
        params.sort_by_key(|(id, _)| id.index());
        for (id, v) in params {
            if let Some(g) = self.get(v) {
                store.accumulate_grad(id, g)?;
            }
        }
        Ok(())
    }
}
