//! Reverse-mode automatic differentiation on a linear tape.
//!
//! Every operation appends a node whose inputs are earlier slots, so the node
//! list is topologically ordered by construction. [`Tape::backward`] walks it
//! in reverse and accumulates gradient contributions in tape order.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use rand::Rng;

use crate::error::{Error, Result};
use crate::layers::{self, BatchStats, MaxPoolIndices, Padding};
use crate::tensor::{Scalar, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Slot(usize);

impl Slot {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
pub enum Op<T: Scalar> {
    Add(Slot, Slot),
    Mul(Slot, Slot),
    Scale(Slot, T),
    Relu(Slot),
    Conv2d {
        x: Slot,
        w: Slot,
        b: Option<Slot>,
        stride: usize,
        padding: Padding,
    },
    DepthwiseConv2d {
        x: Slot,
        w: Slot,
        b: Option<Slot>,
        stride: usize,
        padding: Padding,
    },
    Dense {
        x: Slot,
        w: Slot,
        b: Slot,
    },
    MaxPool {
        x: Slot,
        size: usize,
        stride: usize,
        padding: Padding,
    },
    AvgPool {
        x: Slot,
        size: usize,
        stride: usize,
        padding: Padding,
    },
    GlobalAvgPool(Slot),
    Concat(Vec<Slot>),
    /// Normalizes with batch statistics.
    BatchNormTrain {
        x: Slot,
        gamma: Slot,
        beta: Slot,
        eps: T,
    },
    /// Normalizes with fixed statistics, which receive no gradient.
    BatchNormInfer {
        x: Slot,
        gamma: Slot,
        beta: Slot,
        mean: Tensor<T>,
        var: Tensor<T>,
        eps: T,
    },
    Dropout {
        x: Slot,
        mask: Tensor<T>,
    },
    Softmax(Slot),
    ExitLoss {
        probs: Slot,
        labels: Vec<usize>,
        scale: T,
    },
    WeightedSum {
        terms: Vec<Slot>,
        weights: Vec<T>,
    },
}

impl<T: Scalar> Op<T> {
    pub fn inputs(&self) -> Vec<Slot> {
        match self {
            Op::Add(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Scale(x, _) | Op::Relu(x) | Op::GlobalAvgPool(x) | Op::Softmax(x) => vec![*x],
            Op::Conv2d { x, w, b, .. } | Op::DepthwiseConv2d { x, w, b, .. } => {
                let mut v = vec![*x, *w];
                v.extend(b.iter().copied());
                v
            }
            Op::Dense { x, w, b } => vec![*x, *w, *b],
            Op::MaxPool { x, .. } | Op::AvgPool { x, .. } | Op::Dropout { x, .. } => vec![*x],
            Op::Concat(parts) => parts.clone(),
            Op::BatchNormTrain { x, gamma, beta, .. } | Op::BatchNormInfer { x, gamma, beta, .. } => {
                vec![*x, *gamma, *beta]
            }
            Op::ExitLoss { probs, .. } => vec![*probs],
            Op::WeightedSum { terms, .. } => terms.clone(),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Relu(_) => "relu",
            Op::Conv2d { .. } => "conv2d",
            Op::DepthwiseConv2d { .. } => "depthwise_conv2d",
            Op::Dense { .. } => "dense",
            Op::MaxPool { .. } => "max_pool2d",
            Op::AvgPool { .. } => "avg_pool2d",
            Op::GlobalAvgPool(_) => "global_avg_pool",
            Op::Concat(_) => "concat",
            Op::BatchNormTrain { .. } => "batch_norm_train",
            Op::BatchNormInfer { .. } => "batch_norm_infer",
            Op::Dropout { .. } => "dropout",
            Op::Softmax(_) => "softmax",
            Op::ExitLoss { .. } => "exit_loss",
            Op::WeightedSum { .. } => "weighted_sum",
        }
    }
}

/// Forward context kept for the backward pass.
#[derive(Debug, Clone)]
enum Saved<T: Scalar> {
    None,
    MaxPool(MaxPoolIndices),
    BatchNorm {
        xhat: Tensor<T>,
        inv_std: Vec<T>,
        stats: BatchStats<T>,
    },
    ExitLoss {
        clamped: usize,
    },
}

#[derive(Debug, Clone)]
struct Node<T: Scalar> {
    op: Op<T>,
    out: Slot,
    saved: Saved<T>,
}

#[derive(Debug, Clone, Default)]
pub struct Tape<T: Scalar = f32> {
    values: Vec<Tensor<T>>,
    /// Node index that produced each slot; `None` for leaves.
    producer: Vec<Option<usize>>,
    nodes: Vec<Node<T>>,
}

/// Gradients keyed by slot. Slots with no path to a seed hold `None`.
#[derive(Debug, Clone)]
pub struct Gradients<T: Scalar = f32> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, slot: Slot) -> Option<&Tensor<T>> {
        self.grads.get(slot.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, slot: Slot) -> Option<Tensor<T>> {
        self.grads.get_mut(slot.0).and_then(Option::take)
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Tensor<T>>], slot: Slot, g: Tensor<T>) -> Result<()> {
    match &mut grads[slot.0] {
        Some(acc) => acc.add_assign(&g),
        empty => {
            *empty = Some(g);
            Ok(())
        }
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            values: Vec::new(),
            producer: Vec::new(),
            nodes: Vec::new(),
        }
    }

    /// Records an input or parameter value.
    pub fn leaf(&mut self, value: Tensor<T>) -> Slot {
        self.values.push(value);
        self.producer.push(None);
        Slot(self.values.len() - 1)
    }

    pub fn value(&self, slot: Slot) -> &Tensor<T> {
        &self.values[slot.0]
    }

    pub fn slot_count(&self) -> usize {
        self.values.len()
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_leaf(&self, slot: Slot) -> bool {
        self.producer.get(slot.0).is_some_and(Option::is_none)
    }

    fn check(&self, slot: Slot) -> Result<()> {
        if slot.0 >= self.values.len() {
            return Err(Error::UnknownSlot(slot.0, self.values.len()));
        }
        Ok(())
    }

    /// Replaces a leaf value; call [`Tape::replay`] afterwards to propagate it.
    pub fn set_leaf(&mut self, slot: Slot, value: Tensor<T>) -> Result<()> {
        self.check(slot)?;
        if !self.is_leaf(slot) {
            return Err(Error::contract(format!("slot {} is not a leaf", slot.0)));
        }
        if value.shape() != self.values[slot.0].shape() {
            return Err(Error::shape(format!(
                "leaf {} has shape {:?}, replacement has {:?}",
                slot.0,
                self.values[slot.0].shape(),
                value.shape()
            )));
        }
        self.values[slot.0] = value;
        Ok(())
    }

    fn push(&mut self, op: Op<T>) -> Result<Slot> {
        let inputs = op.inputs();
        for &s in &inputs {
            self.check(s)?;
        }
        let (out, saved) = self.eval(&op)?;
        if cfg!(debug_assertions) && !out.all_finite() && inputs.iter().all(|&s| self.values[s.0].all_finite()) {
            return Err(Error::NonFinite(format!("{} produced a non-finite value", op.name())));
        }
        self.values.push(out);
        self.producer.push(Some(self.nodes.len()));
        let slot = Slot(self.values.len() - 1);
        self.nodes.push(Node { op, out: slot, saved });
        Ok(slot)
    }

    fn eval(&self, op: &Op<T>) -> Result<(Tensor<T>, Saved<T>)> {
        let v = |s: &Slot| &self.values[s.0];
        let plain = |t: Tensor<T>| (t, Saved::None);
        Ok(match op {
            Op::Add(a, b) => plain(layers::add(v(a), v(b))?),
            Op::Mul(a, b) => plain(layers::mul(v(a), v(b))?),
            Op::Scale(x, c) => plain(v(x).scale(*c)),
            Op::Relu(x) => plain(layers::relu(v(x))),
            Op::Conv2d { x, w, b, stride, padding } => {
                plain(layers::conv2d(v(x), v(w), b.as_ref().map(v), *stride, *padding)?)
            }
            Op::DepthwiseConv2d { x, w, b, stride, padding } => {
                plain(layers::depthwise_conv2d(v(x), v(w), b.as_ref().map(v), *stride, *padding)?)
            }
            Op::Dense { x, w, b } => plain(layers::dense(v(x), v(w), v(b))?),
            Op::MaxPool { x, size, stride, padding } => {
                let (y, idx) = layers::max_pool2d(v(x), *size, *stride, *padding)?;
                (y, Saved::MaxPool(idx))
            }
            Op::AvgPool { x, size, stride, padding } => plain(layers::avg_pool2d(v(x), *size, *stride, *padding)?),
            Op::GlobalAvgPool(x) => plain(layers::global_avg_pool(v(x))?),
            Op::Concat(parts) => {
                let refs: Vec<&Tensor<T>> = parts.iter().map(v).collect();
                plain(layers::concat_channels(&refs)?)
            }
            Op::BatchNormTrain { x, gamma, beta, eps } => {
                let (y, xhat, inv_std, stats) = layers::batch_norm_train(v(x), v(gamma), v(beta), *eps)?;
                (y, Saved::BatchNorm { xhat, inv_std, stats })
            }
            Op::BatchNormInfer {
                x,
                gamma,
                beta,
                mean,
                var,
                eps,
            } => plain(layers::batch_norm_infer(v(x), v(gamma), v(beta), mean, var, *eps)?),
            Op::Dropout { x, mask } => plain(layers::mul(v(x), mask)?),
            Op::Softmax(x) => plain(layers::softmax_rows(v(x))?),
            Op::ExitLoss { probs, labels, scale } => {
                let (loss, clamped) = layers::exit_loss(v(probs), labels, *scale)?;
                (Tensor::scalar(loss), Saved::ExitLoss { clamped })
            }
            Op::WeightedSum { terms, weights } => {
                if terms.len() != weights.len() {
                    return Err(Error::contract(format!(
                        "{} terms but {} weights",
                        terms.len(),
                        weights.len()
                    )));
                }
                let mut total = T::zero();
                for (s, &w) in terms.iter().zip(weights) {
                    let t = v(s);
                    if t.len() != 1 {
                        return Err(Error::shape(format!("weighted sum term has shape {:?}", t.shape())));
                    }
                    total += w * t.item();
                }
                plain(Tensor::scalar(total))
            }
        })
    }

    /// Recomputes every node from the current leaf values.
    pub fn replay(&mut self) -> Result<()> {
        for i in 0..self.nodes.len() {
            let (out, saved) = self.eval(&self.nodes[i].op)?;
            let slot = self.nodes[i].out;
            self.values[slot.0] = out;
            self.nodes[i].saved = saved;
        }
        Ok(())
    }

    /// Batch statistics computed by the training-mode batch norm that produced `slot`.
    pub fn batch_stats(&self, slot: Slot) -> Option<&BatchStats<T>> {
        let node = &self.nodes[self.producer.get(slot.0).copied().flatten()?];
        match &node.saved {
            Saved::BatchNorm { stats, .. } => Some(stats),
            _ => None,
        }
    }

    /// Number of loss rows whose true-class probability was clamped.
    pub fn clamped_rows(&self) -> usize {
        self.nodes
            .iter()
            .map(|n| match n.saved {
                Saved::ExitLoss { clamped } => clamped,
                _ => 0,
            })
            .sum()
    }

    /// Hash of every branch decision taken in the forward pass (ReLU signs,
    /// max-pool selections, loss clamps). Two evaluations with equal
    /// signatures lie on the same smooth piece of the recorded function.
    pub fn branch_signature(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for node in &self.nodes {
            match (&node.op, &node.saved) {
                (Op::Relu(x), _) => {
                    for v in self.values[x.0].data() {
                        (*v > T::zero()).hash(&mut h);
                    }
                }
                (_, Saved::MaxPool(idx)) => idx.hash(&mut h),
                (Op::ExitLoss { probs, labels, .. }, _) => {
                    let p = &self.values[probs.0];
                    let c = p.shape()[1];
                    for (row, &l) in p.data().chunks_exact(c).zip(labels) {
                        (row[l] < T::prob_floor()).hash(&mut h);
                    }
                }
                _ => {}
            }
        }
        h.finish()
    }

    /// Backpropagates from the given seeds. Contributions from several seeds
    /// and from fan-out are summed in tape order.
    pub fn backward(&self, seeds: &[(Slot, Tensor<T>)]) -> Result<Gradients<T>> {
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.values.len()];
        for (slot, seed) in seeds {
            self.check(*slot)?;
            if seed.shape() != self.values[slot.0].shape() {
                return Err(Error::contract(format!(
                    "seed for slot {} has shape {:?}, value has {:?}",
                    slot.0,
                    seed.shape(),
                    self.values[slot.0].shape()
                )));
            }
            accumulate(&mut grads, *slot, seed.clone())?;
        }

        for node in self.nodes.iter().rev() {
            let Some(dy) = grads[node.out.0].clone() else { continue };
            let v = |s: &Slot| &self.values[s.0];
            match (&node.op, &node.saved) {
                (Op::Add(a, b), _) => {
                    accumulate(&mut grads, *a, dy.clone())?;
                    accumulate(&mut grads, *b, dy)?;
                }
                (Op::Mul(a, b), _) => {
                    let da = layers::mul(&dy, v(b))?;
                    let db = layers::mul(&dy, v(a))?;
                    accumulate(&mut grads, *a, da)?;
                    accumulate(&mut grads, *b, db)?;
                }
                (Op::Scale(x, c), _) => accumulate(&mut grads, *x, dy.scale(*c))?,
                (Op::Relu(x), _) => accumulate(&mut grads, *x, layers::relu_backward(v(x), &dy))?,
                (Op::Conv2d { x, w, b, stride, padding }, _) => {
                    let (dx, dw, db) = layers::conv2d_backward(v(x), v(w), &dy, *stride, *padding, b.is_some())?;
                    accumulate(&mut grads, *x, dx)?;
                    accumulate(&mut grads, *w, dw)?;
                    if let (Some(b), Some(db)) = (b, db) {
                        accumulate(&mut grads, *b, db)?;
                    }
                }
                (Op::DepthwiseConv2d { x, w, b, stride, padding }, _) => {
                    let (dx, dw, db) =
                        layers::depthwise_conv2d_backward(v(x), v(w), &dy, *stride, *padding, b.is_some())?;
                    accumulate(&mut grads, *x, dx)?;
                    accumulate(&mut grads, *w, dw)?;
                    if let (Some(b), Some(db)) = (b, db) {
                        accumulate(&mut grads, *b, db)?;
                    }
                }
                (Op::Dense { x, w, b }, _) => {
                    let (dx, dw, db) = layers::dense_backward(v(x), v(w), &dy)?;
                    accumulate(&mut grads, *x, dx)?;
                    accumulate(&mut grads, *w, dw)?;
                    accumulate(&mut grads, *b, db)?;
                }
                (Op::MaxPool { x, .. }, Saved::MaxPool(idx)) => {
                    let dx = layers::max_pool2d_backward(v(x).shape(), idx, &dy)?;
                    accumulate(&mut grads, *x, dx)?;
                }
                (Op::AvgPool { x, size, stride, padding }, _) => {
                    let dx = layers::avg_pool2d_backward(v(x).shape(), *size, *stride, *padding, &dy)?;
                    accumulate(&mut grads, *x, dx)?;
                }
                (Op::GlobalAvgPool(x), _) => {
                    accumulate(&mut grads, *x, layers::global_avg_pool_backward(v(x).shape(), &dy)?)?;
                }
                (Op::Concat(parts), _) => {
                    let widths: Vec<usize> = parts.iter().map(|p| v(p).shape()[3]).collect();
                    for (p, g) in parts.iter().zip(layers::concat_channels_backward(&dy, &widths)?) {
                        accumulate(&mut grads, *p, g)?;
                    }
                }
                (Op::BatchNormTrain { x, gamma, beta, .. }, Saved::BatchNorm { xhat, inv_std, .. }) => {
                    let (dx, dg, db) = layers::batch_norm_train_backward(xhat, inv_std, v(gamma), &dy)?;
                    accumulate(&mut grads, *x, dx)?;
                    accumulate(&mut grads, *gamma, dg)?;
                    accumulate(&mut grads, *beta, db)?;
                }
                (
                    Op::BatchNormInfer {
                        x,
                        gamma,
                        beta,
                        mean,
                        var,
                        eps,
                    },
                    _,
                ) => {
                    let (dx, dg, db) = layers::batch_norm_infer_backward(v(x), v(gamma), mean, var, *eps, &dy)?;
                    accumulate(&mut grads, *x, dx)?;
                    accumulate(&mut grads, *gamma, dg)?;
                    accumulate(&mut grads, *beta, db)?;
                }
                (Op::Dropout { x, mask }, _) => accumulate(&mut grads, *x, layers::mul(&dy, mask)?)?,
                (Op::Softmax(x), _) => {
                    let dz = layers::softmax_rows_backward(&self.values[node.out.0], &dy)?;
                    accumulate(&mut grads, *x, dz)?;
                }
                (Op::ExitLoss { probs, labels, scale }, _) => {
                    let dp = layers::exit_loss_backward(v(probs), labels, *scale, dy.item())?;
                    accumulate(&mut grads, *probs, dp)?;
                }
                (Op::WeightedSum { terms, weights }, _) => {
                    for (s, &w) in terms.iter().zip(weights) {
                        accumulate(&mut grads, *s, Tensor::scalar(w * dy.item()))?;
                    }
                }
                (op, _) => unreachable!("{} recorded without its forward context", op.name()),
            }
        }
        Ok(Gradients { grads })
    }

    pub fn add(&mut self, a: Slot, b: Slot) -> Result<Slot> {
        self.push(Op::Add(a, b))
    }

    pub fn mul(&mut self, a: Slot, b: Slot) -> Result<Slot> {
        self.push(Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Slot, c: T) -> Result<Slot> {
        self.push(Op::Scale(x, c))
    }

    pub fn relu(&mut self, x: Slot) -> Result<Slot> {
        self.push(Op::Relu(x))
    }

    pub fn conv2d(&mut self, x: Slot, w: Slot, b: Option<Slot>, stride: usize, padding: Padding) -> Result<Slot> {
        self.push(Op::Conv2d { x, w, b, stride, padding })
    }

    pub fn depthwise_conv2d(
        &mut self,
        x: Slot,
        w: Slot,
        b: Option<Slot>,
        stride: usize,
        padding: Padding,
    ) -> Result<Slot> {
        self.push(Op::DepthwiseConv2d { x, w, b, stride, padding })
    }

    pub fn dense(&mut self, x: Slot, w: Slot, b: Slot) -> Result<Slot> {
        self.push(Op::Dense { x, w, b })
    }

    pub fn max_pool2d(&mut self, x: Slot, size: usize, stride: usize, padding: Padding) -> Result<Slot> {
        self.push(Op::MaxPool { x, size, stride, padding })
    }

    pub fn avg_pool2d(&mut self, x: Slot, size: usize, stride: usize, padding: Padding) -> Result<Slot> {
        self.push(Op::AvgPool { x, size, stride, padding })
    }

    pub fn global_avg_pool(&mut self, x: Slot) -> Result<Slot> {
        self.push(Op::GlobalAvgPool(x))
    }

    pub fn concat(&mut self, parts: &[Slot]) -> Result<Slot> {
        self.push(Op::Concat(parts.to_vec()))
    }

    pub fn batch_norm_train(&mut self, x: Slot, gamma: Slot, beta: Slot, eps: T) -> Result<Slot> {
        self.push(Op::BatchNormTrain { x, gamma, beta, eps })
    }

    pub fn batch_norm_infer(
        &mut self,
        x: Slot,
        gamma: Slot,
        beta: Slot,
        mean: Tensor<T>,
        var: Tensor<T>,
        eps: T,
    ) -> Result<Slot> {
        self.push(Op::BatchNormInfer {
            x,
            gamma,
            beta,
            mean,
            var,
            eps,
        })
    }

    /// Inverted dropout with a mask drawn from `rng`. The mask is stored on
    /// the tape, so replays reuse it.
    pub fn dropout(&mut self, x: Slot, p: f64, rng: &mut impl Rng) -> Result<Slot> {
        self.check(x)?;
        let mask = layers::dropout_mask(self.values[x.0].shape(), p, rng)?;
        self.push(Op::Dropout { x, mask })
    }

    pub fn softmax(&mut self, logits: Slot) -> Result<Slot> {
        self.push(Op::Softmax(logits))
    }

    pub fn exit_loss(&mut self, probs: Slot, labels: &[usize], scale: T) -> Result<Slot> {
        self.push(Op::ExitLoss {
            probs,
            labels: labels.to_vec(),
            scale,
        })
    }

    pub fn weighted_sum(&mut self, terms: &[Slot], weights: &[T]) -> Result<Slot> {
        self.push(Op::WeightedSum {
            terms: terms.to_vec(),
            weights: weights.to_vec(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(v: f64) -> Tensor<f64> {
        Tensor::scalar(v)
    }

    #[test]
    fn square_has_derivative_two_x() {
        let mut tape = Tape::new();
        let x = tape.leaf(s(3.0));
        let y = tape.mul(x, x).unwrap();
        let g = tape.backward(&[(y, s(1.0))]).unwrap();
        assert_eq!(g.get(x).unwrap().item(), 6.0);
    }

    #[test]
    fn fan_out_sums_contributions() {
        let mut tape = Tape::new();
        let x = tape.leaf(s(1.5));
        let y1 = tape.scale(x, 1.0).unwrap();
        let y2 = tape.scale(x, 1.0).unwrap();
        let g = tape.backward(&[(y1, s(1.0)), (y2, s(1.0))]).unwrap();
        assert_eq!(g.get(x).unwrap().item(), 2.0);
    }

    #[test]
    fn zero_weight_branch_gets_zero_gradient() {
        let mut tape = Tape::new();
        let a = tape.leaf(s(2.0));
        let b = tape.leaf(s(5.0));
        let l1 = tape.mul(a, a).unwrap();
        let l2 = tape.mul(b, b).unwrap();
        let total = tape.weighted_sum(&[l1, l2], &[0.0, 1.0]).unwrap();
        let g = tape.backward(&[(total, s(1.0))]).unwrap();
        assert_eq!(g.get(a).unwrap().item(), 0.0);
        assert_eq!(g.get(b).unwrap().item(), 10.0);
    }

    #[test]
    fn seed_errors() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::zeros(&[2]));
        let y = tape.relu(x).unwrap();
        assert!(matches!(tape.backward(&[(y, s(1.0))]), Err(Error::Contract(_))));
        assert!(matches!(tape.backward(&[(Slot(9), s(1.0))]), Err(Error::UnknownSlot(9, 2))));
    }

    #[test]
    fn replay_reproduces_recorded_outputs() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::from_slice(&[1, 2, 2, 2], &[0.5, -1.0, 2.0, 0.25, -0.5, 3.0, 1.0, -2.0]).unwrap());
        let g = tape.leaf(Tensor::full(&[2], 1.5));
        let b = tape.leaf(Tensor::full(&[2], 0.1));
        let n = tape.batch_norm_train(x, g, b, 1e-3).unwrap();
        let r = tape.relu(n).unwrap();
        let p = tape.max_pool2d(r, 2, 2, Padding::Valid).unwrap();
        let before = tape.value(p).clone();
        tape.replay().unwrap();
        assert_eq!(tape.value(p), &before);
        assert!(tape.batch_stats(n).is_some());
    }

    #[test]
    fn set_leaf_only_on_leaves() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(s(1.0));
        let y = tape.relu(x).unwrap();
        assert!(tape.set_leaf(y, s(2.0)).is_err());
        assert!(tape.set_leaf(x, Tensor::zeros(&[2])).is_err());
        tape.set_leaf(x, s(-1.0)).unwrap();
        tape.replay().unwrap();
        assert_eq!(tape.value(y).item(), 0.0);
    }
}
