//! Exit heads attached to backbone anchors, and the shared-trunk forward pass.

use std::collections::BTreeSet;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Slot, Tape};
use crate::error::{Error, Result};
use crate::graph::{LayerKind, NetworkGraph, Node, NodeId};
use crate::layers::{self, BN_EPSILON, BN_MOMENTUM};
use crate::params::ParamStore;
use crate::tensor::{Scalar, Tensor};

/// Which parts of the network run in training behaviour.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// Batch statistics in batch norm, head dropout active, gradients reach
    /// the backbone.
    Train,
    /// Backbone runs as in evaluation and is cut off from the gradient;
    /// head dropout stays active.
    FrozenBackbone,
    Eval,
}

impl Mode {
    fn dropout_active(self) -> bool {
        self != Mode::Eval
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeadConfig {
    pub classes: usize,
    pub dropout: f64,
    pub loss_weight: f64,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            classes: 10,
            dropout: 0.2,
            loss_weight: 1.0,
        }
    }
}

/// Global average pool → dropout → dense → softmax, reading one anchor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExitHead {
    /// Ordinal of the backbone anchor this head reads. Stays fixed under
    /// pruning, so it also keys the head's parameter names.
    pub anchor: usize,
    pub node: NodeId,
    pub features: usize,
    pub dropout: f64,
    pub loss_weight: f64,
}

impl ExitHead {
    pub fn kernel_name(&self) -> String {
        format!("exit{}/dense/kernel", self.anchor)
    }

    pub fn bias_name(&self) -> String {
        format!("exit{}/dense/bias", self.anchor)
    }

    pub fn params(&self, classes: usize) -> u64 {
        layers::dense_params(self.features, classes)
    }

    /// Pooling (one add per input element), dense, softmax.
    pub fn flops(&self, anchor_numel: usize, classes: usize) -> u64 {
        anchor_numel as u64 + layers::dense_flops(self.features, classes) + classes as u64
    }
}

/// A backbone graph with initialised weights and no exits yet.
#[derive(Debug, Clone)]
pub struct Backbone<T: Scalar = f32> {
    pub graph: NetworkGraph,
    pub params: ParamStore<T>,
}

impl<T: Scalar> Backbone<T> {
    pub fn init(graph: NetworkGraph, rng: &mut impl Rng) -> Result<Self> {
        let mut params = ParamStore::new();
        for node in graph.nodes() {
            params.init_from_specs(&graph.param_specs(node), false, rng)?;
        }
        Ok(Self { graph, params })
    }
}

#[derive(Debug, Clone)]
pub struct ElasticNetwork<T: Scalar = f32> {
    graph: NetworkGraph,
    exits: Vec<ExitHead>,
    classes: usize,
    pub params: ParamStore<T>,
}

/// Slots produced by recording a forward pass on a tape.
#[derive(Debug, Clone)]
pub struct Recorded {
    pub input: Slot,
    /// Every parameter leaf placed on the tape, by name.
    pub params: Vec<(String, Slot)>,
    /// Probability outputs of the requested exits, in request order.
    pub probs: Vec<Slot>,
    /// Training-mode batch norms as `(node name, output slot)`.
    pub batch_norms: Vec<(String, Slot)>,
    /// Backbone nodes that were evaluated, in order.
    pub executed: Vec<NodeId>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction<T = f32> {
    pub class: usize,
    pub probs: Vec<T>,
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax<T: PartialOrd + Copy>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Attaches one head per anchor. Head kernels are drawn uniformly from
/// ±√(6/(F+C)); biases start at zero.
pub fn elasticize<T: Scalar>(backbone: Backbone<T>, head: &HeadConfig, rng: &mut impl Rng) -> Result<ElasticNetwork<T>> {
    let Backbone { graph, mut params } = backbone;
    if head.classes < 2 {
        return Err(Error::config(format!("need at least 2 classes, got {}", head.classes)));
    }
    if !(0.0..1.0).contains(&head.dropout) {
        return Err(Error::contract(format!("dropout rate {} not in [0, 1)", head.dropout)));
    }
    if graph.anchors().is_empty() {
        return Err(Error::graph(format!("{} has no anchors", graph.name)));
    }
    let mut exits = Vec::with_capacity(graph.anchors().len());
    for a in graph.anchors() {
        let features = graph.node(a.node).shape.c;
        if features != a.channels || features == 0 {
            return Err(Error::graph(format!(
                "anchor {} declares {} channels but its node has {features}",
                a.ordinal, a.channels
            )));
        }
        exits.push(ExitHead {
            anchor: a.ordinal,
            node: a.node,
            features,
            dropout: head.dropout,
            loss_weight: head.loss_weight,
        });
    }
    for e in &exits {
        params.init_from_specs(&head_specs(e, head.classes), true, rng)?;
    }
    ElasticNetwork::from_parts(graph, exits, head.classes, params)
}

fn head_specs(e: &ExitHead, classes: usize) -> Vec<crate::graph::ParamSpec> {
    use crate::graph::{Init, ParamSpec};
    vec![
        ParamSpec {
            name: e.kernel_name(),
            shape: vec![e.features, classes],
            trainable: true,
            init: Init::GlorotUniform {
                fan_in: e.features,
                fan_out: classes,
            },
        },
        ParamSpec {
            name: e.bias_name(),
            shape: vec![classes],
            trainable: true,
            init: Init::Zeros,
        },
    ]
}

/// Keeps the listed intermediate exits (1-based, excluding the final one)
/// and the final exit; heads of dropped exits are discarded.
pub fn prune_exits<T: Scalar>(net: ElasticNetwork<T>, keep: &BTreeSet<usize>) -> Result<ElasticNetwork<T>> {
    let n = net.exits.len();
    if let Some(&bad) = keep.iter().find(|&&k| k == 0 || k >= n) {
        return Err(Error::contract(format!(
            "exit {bad} is not an intermediate exit (valid: 1..={})",
            n - 1
        )));
    }
    let ElasticNetwork {
        graph,
        exits,
        classes,
        mut params,
    } = net;
    let kept: Vec<ExitHead> = exits
        .into_iter()
        .enumerate()
        .filter(|(i, _)| keep.contains(&(i + 1)) || i + 1 == n)
        .map(|(_, e)| e)
        .collect();
    let names: BTreeSet<String> = kept.iter().flat_map(|e| [e.kernel_name(), e.bias_name()]).collect();
    params.retain(|p| !p.head || names.contains(&p.name));
    ElasticNetwork::from_parts(graph, kept, classes, params)
}

impl<T: Scalar> ElasticNetwork<T> {
    /// Assembles a network and checks that the parameters and exits fit the graph.
    pub fn from_parts(graph: NetworkGraph, exits: Vec<ExitHead>, classes: usize, params: ParamStore<T>) -> Result<Self> {
        let last_anchor = graph.anchors().last().ok_or_else(|| Error::graph("backbone has no anchors"))?;
        let final_exit = exits.last().ok_or_else(|| Error::graph("network needs at least one exit"))?;
        if final_exit.node != last_anchor.node {
            return Err(Error::graph("final exit must sit on the deepest anchor"));
        }
        for w in exits.windows(2) {
            if w[0].anchor >= w[1].anchor {
                return Err(Error::graph("exits must be ordered by anchor depth"));
            }
        }
        for e in &exits {
            let anchor = graph
                .anchors()
                .get(e.anchor.wrapping_sub(1))
                .ok_or_else(|| Error::graph(format!("exit reads unknown anchor {}", e.anchor)))?;
            if anchor.node != e.node || anchor.channels != e.features {
                return Err(Error::graph(format!("exit on anchor {} disagrees with the graph", e.anchor)));
            }
            if !(e.loss_weight >= 0.0 && e.loss_weight.is_finite()) {
                return Err(Error::config(format!("loss weight {} must be nonnegative", e.loss_weight)));
            }
        }
        let mut expected = 0;
        for node in graph.nodes() {
            for spec in graph.param_specs(node) {
                check_param(&params, &spec.name, &spec.shape)?;
                expected += 1;
            }
        }
        for e in &exits {
            for spec in head_specs(e, classes) {
                check_param(&params, &spec.name, &spec.shape)?;
                expected += 1;
            }
        }
        if params.len() != expected {
            return Err(Error::graph(format!(
                "network expects {expected} parameter tensors, store holds {}",
                params.len()
            )));
        }
        Ok(Self {
            graph,
            exits,
            classes,
            params,
        })
    }

    pub fn graph(&self) -> &NetworkGraph {
        &self.graph
    }

    pub fn exits(&self) -> &[ExitHead] {
        &self.exits
    }

    pub fn exit_count(&self) -> usize {
        self.exits.len()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn loss_weights(&self) -> Vec<f64> {
        self.exits.iter().map(|e| e.loss_weight).collect()
    }

    pub fn set_loss_weights(&mut self, weights: &[f64]) -> Result<()> {
        if weights.len() != self.exits.len() {
            return Err(Error::contract(format!(
                "{} loss weights for {} exits",
                weights.len(),
                self.exits.len()
            )));
        }
        for (e, &w) in self.exits.iter_mut().zip(weights) {
            e.loss_weight = w;
        }
        Ok(())
    }

    /// Rate used by every head's dropout layer.
    pub fn set_dropout(&mut self, p: f64) -> Result<()> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::contract(format!("dropout rate {p} not in [0, 1)")));
        }
        for e in &mut self.exits {
            e.dropout = p;
        }
        Ok(())
    }

    /// Per-exit cumulative costs.
    pub fn cost_table(&self) -> Result<crate::budget::CostTable> {
        crate::budget::cost_audit(&self.graph, &self.exits, self.classes)
    }

    pub fn cast<U: Scalar>(&self) -> ElasticNetwork<U> {
        ElasticNetwork {
            graph: self.graph.clone(),
            exits: self.exits.clone(),
            classes: self.classes,
            params: self.params.cast(),
        }
    }

    /// Expects `[N, H, W, C]` matching the backbone input.
    pub fn check_input(&self, x: &Tensor<T>) -> Result<usize> {
        let (n, h, w, c) = x.nhwc()?;
        let s = self.graph.input_shape();
        if (h, w, c) != (s.h, s.w, s.c) {
            return Err(Error::shape(format!("network takes {s} inputs, got {h}×{w}×{c}")));
        }
        Ok(n)
    }

    /// Records the trunk and the requested exits (0-based positions) on
    /// `tape`. Only nodes feeding those exits are evaluated. `rng` drives
    /// head dropout and is required unless `mode` is [`Mode::Eval`] or every
    /// rate is zero.
    pub fn record(
        &self,
        tape: &mut Tape<T>,
        x: Tensor<T>,
        mode: Mode,
        exits: &[usize],
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Recorded> {
        self.check_input(&x)?;
        if let Some(&bad) = exits.iter().find(|&&e| e >= self.exits.len()) {
            return Err(Error::contract(format!("no exit at position {bad}")));
        }
        let targets: Vec<NodeId> = exits.iter().map(|&e| self.exits[e].node).collect();
        let needed = self.graph.ancestors(&targets);

        let input = tape.leaf(x);
        let mut rec = Recorded {
            input,
            params: Vec::new(),
            probs: Vec::new(),
            batch_norms: Vec::new(),
            executed: Vec::new(),
        };
        let mut slots: Vec<Option<Slot>> = vec![None; self.graph.nodes().len()];
        for node in self.graph.nodes() {
            if !needed[node.id.0] {
                continue;
            }
            let out = self.record_node(tape, node, &slots, mode, input, &mut rec)?;
            slots[node.id.0] = Some(out);
            rec.executed.push(node.id);
        }

        for &e in exits {
            let head = &self.exits[e];
            let mut feat = slots[head.node.0].expect("anchor is its own ancestor");
            if mode == Mode::FrozenBackbone {
                feat = tape.leaf(tape.value(feat).clone());
            }
            let mut h = tape.global_avg_pool(feat)?;
            if mode.dropout_active() && head.dropout > 0.0 {
                let rng = rng
                    .as_deref_mut()
                    .ok_or_else(|| Error::contract("training-mode dropout needs a random stream"))?;
                h = tape.dropout(h, head.dropout, rng)?;
            }
            let w = self.param_leaf(tape, &head.kernel_name(), &mut rec)?;
            let b = self.param_leaf(tape, &head.bias_name(), &mut rec)?;
            let logits = tape.dense(h, w, b)?;
            rec.probs.push(tape.softmax(logits)?);
        }
        Ok(rec)
    }

    fn param_leaf(&self, tape: &mut Tape<T>, name: &str, rec: &mut Recorded) -> Result<Slot> {
        let slot = tape.leaf(self.params.value(name)?.clone());
        rec.params.push((name.to_string(), slot));
        Ok(slot)
    }

    fn record_node(
        &self,
        tape: &mut Tape<T>,
        node: &Node,
        slots: &[Option<Slot>],
        mode: Mode,
        input: Slot,
        rec: &mut Recorded,
    ) -> Result<Slot> {
        let arg = |i: usize| slots[node.inputs[i].0].expect("inputs evaluated before consumers");
        let p = |suffix: &str| format!("{}/{suffix}", node.name);
        Ok(match node.kind {
            LayerKind::Input => input,
            LayerKind::Conv2d {
                stride, padding, bias, ..
            } => {
                let w = self.param_leaf(tape, &p("kernel"), rec)?;
                let b = if bias { Some(self.param_leaf(tape, &p("bias"), rec)?) } else { None };
                tape.conv2d(arg(0), w, b, stride, padding)?
            }
            LayerKind::DepthwiseConv2d {
                stride, padding, bias, ..
            } => {
                let w = self.param_leaf(tape, &p("kernel"), rec)?;
                let b = if bias { Some(self.param_leaf(tape, &p("bias"), rec)?) } else { None };
                tape.depthwise_conv2d(arg(0), w, b, stride, padding)?
            }
            LayerKind::BatchNorm => {
                let gamma = self.param_leaf(tape, &p("gamma"), rec)?;
                let beta = self.param_leaf(tape, &p("beta"), rec)?;
                let eps = T::from_f64(BN_EPSILON);
                if mode == Mode::Train {
                    let y = tape.batch_norm_train(arg(0), gamma, beta, eps)?;
                    rec.batch_norms.push((node.name.clone(), y));
                    y
                } else {
                    let mean = self.params.value(&p("moving_mean"))?.clone();
                    let var = self.params.value(&p("moving_var"))?.clone();
                    tape.batch_norm_infer(arg(0), gamma, beta, mean, var, eps)?
                }
            }
            LayerKind::Relu => tape.relu(arg(0))?,
            LayerKind::MaxPool { size, stride, padding } => tape.max_pool2d(arg(0), size, stride, padding)?,
            LayerKind::AvgPool { size, stride, padding } => tape.avg_pool2d(arg(0), size, stride, padding)?,
            LayerKind::Add => {
                let mut acc = arg(0);
                for i in 1..node.inputs.len() {
                    acc = tape.add(acc, arg(i))?;
                }
                acc
            }
            LayerKind::Concat => {
                let parts: Vec<Slot> = (0..node.inputs.len()).map(arg).collect();
                tape.concat(&parts)?
            }
        })
    }

    /// Folds the batch statistics of a training-mode pass into the moving
    /// averages: `m ← momentum·m + (1 − momentum)·batch`.
    pub fn update_moving_stats(&mut self, tape: &Tape<T>, rec: &Recorded) -> Result<()> {
        let m = T::from_f64(BN_MOMENTUM);
        let one_minus = T::one() - m;
        for (name, slot) in &rec.batch_norms {
            let stats = tape
                .batch_stats(*slot)
                .ok_or_else(|| Error::graph(format!("{name} recorded without batch statistics")))?;
            for (suffix, batch) in [("moving_mean", &stats.mean), ("moving_var", &stats.var)] {
                let key = format!("{name}/{suffix}");
                let param = self
                    .params
                    .get_mut(&key)
                    .ok_or_else(|| Error::graph(format!("missing parameter {key}")))?;
                for (v, &b) in param.value.data_mut().iter_mut().zip(batch.iter()) {
                    *v = m * *v + one_minus * b;
                }
            }
        }
        Ok(())
    }

    /// Probabilities of every exit; the trunk is evaluated once.
    pub fn forward_all_exits(&self, x: &Tensor<T>, mode: Mode, rng: Option<&mut ChaCha8Rng>) -> Result<Vec<Tensor<T>>> {
        let all: Vec<usize> = (0..self.exits.len()).collect();
        self.forward_exits(x, mode, &all, rng)
    }

    /// Probabilities of the listed exits (0-based positions).
    pub fn forward_exits(
        &self,
        x: &Tensor<T>,
        mode: Mode,
        exits: &[usize],
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Vec<Tensor<T>>> {
        let mut tape = Tape::new();
        let rec = self.record(&mut tape, x.clone(), mode, exits, rng)?;
        Ok(rec.probs.iter().map(|&s| tape.value(s).clone()).collect())
    }

    /// Class and distribution at exit `ordinal` (1-based) for one sample,
    /// evaluating only the part of the trunk that feeds that exit.
    pub fn predict(&self, x: &Tensor<T>, ordinal: usize) -> Result<Prediction<T>> {
        self.predict_traced(x, ordinal).map(|(p, _)| p)
    }

    /// [`predict`](Self::predict) that also reports which backbone nodes ran.
    pub fn predict_traced(&self, x: &Tensor<T>, ordinal: usize) -> Result<(Prediction<T>, Vec<NodeId>)> {
        if ordinal == 0 || ordinal > self.exits.len() {
            return Err(Error::contract(format!(
                "exit {ordinal} out of range 1..={}",
                self.exits.len()
            )));
        }
        let x = match x.rank() {
            3 => {
                let mut shape = vec![1];
                shape.extend_from_slice(x.shape());
                x.reshape(&shape)?
            }
            _ => x.clone(),
        };
        if x.shape()[0] != 1 {
            return Err(Error::shape(format!("predict takes one sample, got batch {:?}", x.shape())));
        }
        let mut tape = Tape::new();
        let rec = self.record(&mut tape, x, Mode::Eval, &[ordinal - 1], None)?;
        let probs = tape.value(rec.probs[0]).data().to_vec();
        Ok((
            Prediction {
                class: argmax(&probs),
                probs,
            },
            rec.executed,
        ))
    }
}

fn check_param<T: Scalar>(params: &ParamStore<T>, name: &str, shape: &[usize]) -> Result<()> {
    let p = params
        .get(name)
        .ok_or_else(|| Error::graph(format!("missing parameter {name}")))?;
    if p.value.shape() != shape {
        return Err(Error::shape(format!(
            "parameter {name} has shape {:?}, graph needs {shape:?}",
            p.value.shape()
        )));
    }
    Ok(())
}
