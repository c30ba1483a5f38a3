//! Define-by-run reverse-mode differentiation.
//!
//! Every operation appends one node holding its output value and, when any
//! input tracks gradients, a backward rule with whatever it saved. Nodes are
//! appended in evaluation order so the node list is already topologically
//! sorted; the backward pass walks it in reverse.

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Inputs to a backward rule.
pub(crate) struct BackwardCtx<'a, T: Real> {
    pub inputs: Vec<&'a Tensor<T>>,
    pub output: &'a Tensor<T>,
    pub grad: &'a [T],
    /// Whether each input wants a gradient.
    pub needs: Vec<bool>,
}

pub(crate) trait Backward<T: Real> {
    /// Gradient with respect to each input, in input order. Entries for inputs
    /// with `needs[i] == false` may be `None`.
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Vec<T>>>;
}

struct Node<T: Real> {
    value: Tensor<T>,
    inputs: Vec<Var>,
    rule: Option<Box<dyn Backward<T>>>,
    requires_grad: bool,
    scope: Rc<str>,
}

pub struct Tape<T: Real = f32> {
    nodes: Vec<Node<T>>,
    scope: Rc<str>,
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
            scope: Rc::from("input"),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Labels subsequently recorded nodes; used to name the layer that first
    /// produced a NaN.
    pub fn set_scope(&mut self, name: &str) {
        if &*self.scope != name {
            self.scope = Rc::from(name);
        }
    }

    /// A leaf that does not track gradients.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Vec::new(), None, false)
    }

    /// A leaf that tracks gradients.
    pub fn variable(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Vec::new(), None, true)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Scope of the first computed node whose value contains a NaN, in evaluation
    /// order. Leaves are skipped: parameters are registered before the layers that
    /// use them, so a bad weight is blamed on the op that consumes it.
    pub fn first_nan_scope(&self) -> Option<String> {
        self.nodes
            .iter()
            .find(|n| !n.inputs.is_empty() && n.value.has_nan())
            .or_else(|| self.nodes.iter().find(|n| n.value.has_nan()))
            .map(|n| n.scope.to_string())
    }

    pub(crate) fn record(
        &mut self,
        value: Tensor<T>,
        inputs: Vec<Var>,
        rule: Box<dyn Backward<T>>,
    ) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let rule = requires_grad.then_some(rule);
        self.push(value, inputs, rule, requires_grad)
    }

    fn push(
        &mut self,
        value: Tensor<T>,
        inputs: Vec<Var>,
        rule: Option<Box<dyn Backward<T>>>,
        requires_grad: bool,
    ) -> Var {
        debug_assert!(inputs.iter().all(|v| v.0 < self.nodes.len()));
        self.nodes.push(Node {
            value,
            inputs,
            rule,
            requires_grad,
            scope: self.scope.clone(),
        });
        Var(self.nodes.len() - 1)
    }

    /// Reverse pass from a scalar `loss`. Node values are kept.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        self.backward_pass(loss, false)
    }

    /// Reverse pass that releases each node's value once it has been processed.
    pub fn into_gradients(mut self, loss: Var) -> Result<Gradients<T>> {
        self.backward_pass(loss, true)
    }

    fn backward_pass(&mut self, loss: Var, release: bool) -> Result<Gradients<T>> {
        let loss_node = self
            .nodes
            .get(loss.0)
            .ok_or_else(|| Error::contract("loss is not on this tape"))?;
        if !loss_node.value.is_scalar() {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss_node.value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::new();
        grads.resize_with(self.nodes.len(), || None);
        if !loss_node.requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            let Some(rule) = node.rule.as_ref() else {
                continue;
            };
            let Some(g) = grads[i].take() else {
                if release {
                    self.release(i);
                }
                continue;
            };
            let ctx = BackwardCtx {
                inputs: node
                    .inputs
                    .iter()
                    .map(|v| &self.nodes[v.0].value)
                    .collect(),
                output: &node.value,
                grad: &g,
                needs: node
                    .inputs
                    .iter()
                    .map(|v| self.nodes[v.0].requires_grad)
                    .collect(),
            };
            let input_grads = rule.backward(&ctx);
            debug_assert_eq!(input_grads.len(), node.inputs.len());
            let inputs = node.inputs.clone();
            for (v, ig) in inputs.into_iter().zip(input_grads) {
                let Some(ig) = ig else { continue };
                if !self.nodes[v.0].requires_grad {
                    continue;
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.iter_mut().zip(&ig).for_each(|(a, b)| *a += *b),
                    slot @ None => *slot = Some(ig),
                }
            }
            if release {
                self.release(i);
            }
        }

        Ok(Gradients { grads })
    }

    fn release(&mut self, i: usize) {
        let node = &mut self.nodes[i];
        node.rule = None;
        node.value = Tensor::released();
    }

    // ── Elementwise and reduction ops ──────────────────────────────────

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        same_shape("add", x, y)?;
        let data = x.data().iter().zip(y.data()).map(|(p, q)| *p + *q).collect();
        let out = Tensor::from_vec(x.shape(), data)?;
        Ok(self.record(out, vec![a, b], Box::new(AddRule)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        same_shape("mul", x, y)?;
        let data = x.data().iter().zip(y.data()).map(|(p, q)| *p * *q).collect();
        let out = Tensor::from_vec(x.shape(), data)?;
        Ok(self.record(out, vec![a, b], Box::new(MulRule)))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let out = self.value(a).map(|v| v * s);
        self.record(out, vec![a], Box::new(ScaleRule(s)))
    }

    /// Sum of all elements, as a shape-`[1]` tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        self.record(out, vec![a], Box::new(SumRule))
    }

    /// Concatenates along the channel axis (dimension 1) of batch-major tensors.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::shape("concat of zero tensors"))?;
        let s0 = self.shape(first).to_vec();
        if s0.len() < 2 {
            return Err(Error::shape("concat needs at least 2 dimensions"));
        }
        let mut channels = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != s0.len() || s[0] != s0[0] || s[2..] != s0[2..] {
                return Err(Error::shape(format!(
                    "concat: {s:?} incompatible with {s0:?}"
                )));
            }
            channels.push(s[1]);
        }
        let batch = s0[0];
        let inner: usize = s0[2..].iter().product();
        let total: usize = channels.iter().sum();
        let mut data = Vec::with_capacity(batch * total * inner);
        for n in 0..batch {
            for (&p, &c) in parts.iter().zip(&channels) {
                let src = self.value(p).data();
                data.extend_from_slice(&src[n * c * inner..(n + 1) * c * inner]);
            }
        }
        let mut shape = s0.clone();
        shape[1] = total;
        let out = Tensor::from_vec(&shape, data)?;
        Ok(self.record(
            out,
            parts.to_vec(),
            Box::new(ConcatRule {
                batch,
                inner,
                channels,
            }),
        ))
    }
}

fn same_shape<T: Real>(op: &str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!(
            "{op}: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// Gradients from one reverse pass, indexed by [`Var`]. Only leaves created
/// with [`Tape::variable`] (and values they influence, for non-released
/// passes) are guaranteed to be present.
pub struct Gradients<T: Real = f32> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

struct AddRule;

impl<T: Real> Backward<T> for AddRule {
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Vec<T>>> {
        ctx.needs
            .iter()
            .map(|&n| n.then(|| ctx.grad.to_vec()))
            .collect()
    }
}

struct MulRule;

impl<T: Real> Backward<T> for MulRule {
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Vec<T>>> {
        let (a, b) = (ctx.inputs[0].data(), ctx.inputs[1].data());
        let prod = |other: &[T]| ctx.grad.iter().zip(other).map(|(g, o)| *g * *o).collect();
        vec![
            ctx.needs[0].then(|| prod(b)),
            ctx.needs[1].then(|| prod(a)),
        ]
    }
}

struct ScaleRule<T>(T);

impl<T: Real> Backward<T> for ScaleRule<T> {
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Vec<T>>> {
        vec![Some(ctx.grad.iter().map(|g| *g * self.0).collect())]
    }
}

struct SumRule;

impl<T: Real> Backward<T> for SumRule {
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Vec<T>>> {
        vec![Some(vec![ctx.grad[0]; ctx.inputs[0].len()])]
    }
}

struct ConcatRule {
    batch: usize,
    inner: usize,
    channels: Vec<usize>,
}

impl<T: Real> Backward<T> for ConcatRule {
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Vec<T>>> {
        let total: usize = self.channels.iter().sum();
        let mut offset = 0;
        let mut out = Vec::with_capacity(self.channels.len());
        for (k, &c) in self.channels.iter().enumerate() {
            if ctx.needs[k] {
                let mut g = Vec::with_capacity(self.batch * c * self.inner);
                for n in 0..self.batch {
                    let start = (n * total + offset) * self.inner;
                    g.extend_from_slice(&ctx.grad[start..start + c * self.inner]);
                }
                out.push(Some(g));
            } else {
                out.push(None);
            }
            offset += c;
        }
        out
    }
}
