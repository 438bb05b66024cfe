//! Layer graphs with per-node shape inference, parameter specs, cost
//! formulas, and named exit anchors.

use std::collections::HashSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::backbones::BackboneConfig;
use crate::error::{Error, Result};
use crate::layers::{self, Padding};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct NodeId(pub usize);

/// Per-sample feature-map shape (height, width, channels).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FeatureShape {
    pub h: usize,
    pub w: usize,
    pub c: usize,
}

impl FeatureShape {
    pub fn new(h: usize, w: usize, c: usize) -> Self {
        Self { h, w, c }
    }

    pub fn numel(&self) -> usize {
        self.h * self.w * self.c
    }
}

impl fmt::Display for FeatureShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}×{}×{}", self.h, self.w, self.c)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum LayerKind {
    Input,
    Conv2d {
        kernel: usize,
        filters: usize,
        stride: usize,
        padding: Padding,
        bias: bool,
    },
    DepthwiseConv2d {
        kernel: usize,
        stride: usize,
        padding: Padding,
        bias: bool,
    },
    BatchNorm,
    Relu,
    MaxPool {
        size: usize,
        stride: usize,
        padding: Padding,
    },
    AvgPool {
        size: usize,
        stride: usize,
        padding: Padding,
    },
    Add,
    Concat,
}

impl LayerKind {
    pub fn is_conv(&self) -> bool {
        matches!(self, LayerKind::Conv2d { .. } | LayerKind::DepthwiseConv2d { .. })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Init {
    /// Uniform in ±√(6 / (fan_in + fan_out)).
    GlorotUniform { fan_in: usize, fan_out: usize },
    Zeros,
    Ones,
}

/// A parameter tensor a layer owns, without its storage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub trainable: bool,
    pub init: Init,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Node {
    pub id: NodeId,
    pub name: String,
    pub kind: LayerKind,
    pub inputs: Vec<NodeId>,
    pub shape: FeatureShape,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AnchorKind {
    ReluOfDepthwiseBlock,
    TransitionAvgPool,
    MaxPool,
    ResidualAdd,
    BlockConcat,
    FinalFeature,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Anchor {
    pub node: NodeId,
    pub kind: AnchorKind,
    /// 1-based position among the graph's anchors.
    pub ordinal: usize,
    pub channels: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkGraph {
    pub name: String,
    /// Present for graphs built from a [`BackboneConfig`]; needed to rebuild
    /// the graph from a checkpoint.
    pub config: Option<BackboneConfig>,
    nodes: Vec<Node>,
    output: NodeId,
    anchors: Vec<Anchor>,
}

impl NetworkGraph {
    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id.0]
    }

    pub fn input(&self) -> NodeId {
        NodeId(0)
    }

    pub fn input_shape(&self) -> FeatureShape {
        self.nodes[0].shape
    }

    /// The final feature map that the deepest exit reads.
    pub fn output(&self) -> NodeId {
        self.output
    }

    pub fn anchors(&self) -> &[Anchor] {
        &self.anchors
    }

    /// Marks every node the given targets depend on (targets included).
    pub fn ancestors(&self, targets: &[NodeId]) -> Vec<bool> {
        let mut needed = vec![false; self.nodes.len()];
        for t in targets {
            needed[t.0] = true;
        }
        for node in self.nodes.iter().rev() {
            if needed[node.id.0] {
                for i in &node.inputs {
                    needed[i.0] = true;
                }
            }
        }
        needed
    }

    /// Number of convolution layers (standard or depthwise) the node depends
    /// on, itself included.
    pub fn conv_depth(&self, id: NodeId) -> usize {
        self.ancestors(&[id])
            .iter()
            .zip(&self.nodes)
            .filter(|(&needed, n)| needed && n.kind.is_conv())
            .count()
    }

    pub fn input_shapes(&self, node: &Node) -> Vec<FeatureShape> {
        node.inputs.iter().map(|i| self.nodes[i.0].shape).collect()
    }

    /// Parameter tensors owned by a node, named `<node>/<tensor>`.
    pub fn param_specs(&self, node: &Node) -> Vec<ParamSpec> {
        let spec = |suffix: &str, shape: Vec<usize>, trainable: bool, init: Init| ParamSpec {
            name: format!("{}/{suffix}", node.name),
            shape,
            trainable,
            init,
        };
        let cin = node.inputs.first().map(|i| self.nodes[i.0].shape.c).unwrap_or(0);
        match node.kind {
            LayerKind::Conv2d {
                kernel, filters, bias, ..
            } => {
                let mut v = vec![spec(
                    "kernel",
                    vec![kernel, kernel, cin, filters],
                    true,
                    Init::GlorotUniform {
                        fan_in: kernel * kernel * cin,
                        fan_out: kernel * kernel * filters,
                    },
                )];
                if bias {
                    v.push(spec("bias", vec![filters], true, Init::Zeros));
                }
                v
            }
            LayerKind::DepthwiseConv2d { kernel, bias, .. } => {
                let mut v = vec![spec(
                    "kernel",
                    vec![kernel, kernel, cin],
                    true,
                    Init::GlorotUniform {
                        fan_in: kernel * kernel,
                        fan_out: kernel * kernel,
                    },
                )];
                if bias {
                    v.push(spec("bias", vec![cin], true, Init::Zeros));
                }
                v
            }
            LayerKind::BatchNorm => vec![
                spec("gamma", vec![cin], true, Init::Ones),
                spec("beta", vec![cin], true, Init::Zeros),
                spec("moving_mean", vec![cin], false, Init::Zeros),
                spec("moving_var", vec![cin], false, Init::Ones),
            ],
            _ => Vec::new(),
        }
    }

    /// Closed-form parameter count of one node.
    pub fn node_params(&self, node: &Node) -> u64 {
        let cin = node.inputs.first().map(|i| self.nodes[i.0].shape.c).unwrap_or(0);
        match node.kind {
            LayerKind::Conv2d {
                kernel, filters, bias, ..
            } => layers::conv2d_params(kernel, cin, filters, bias),
            LayerKind::DepthwiseConv2d { kernel, bias, .. } => layers::depthwise_params(kernel, cin, bias),
            LayerKind::BatchNorm => layers::batch_norm_params(cin),
            _ => 0,
        }
    }

    /// FLOPs for one sample: 2 per multiply-accumulate in convolutions,
    /// 2 per element for batch norm, 1 per output element for activations,
    /// additions and pooling. Concatenation is free.
    pub fn node_flops(&self, node: &Node) -> u64 {
        let cin = node.inputs.first().map(|i| self.nodes[i.0].shape.c).unwrap_or(0);
        let out = node.shape;
        match node.kind {
            LayerKind::Input | LayerKind::Concat => 0,
            LayerKind::Conv2d { kernel, filters, .. } => layers::conv2d_flops(out.h, out.w, kernel, cin, filters),
            LayerKind::DepthwiseConv2d { kernel, .. } => layers::depthwise_flops(out.h, out.w, kernel, cin),
            LayerKind::BatchNorm => 2 * out.numel() as u64,
            LayerKind::Relu | LayerKind::MaxPool { .. } | LayerKind::AvgPool { .. } => out.numel() as u64,
            LayerKind::Add => out.numel() as u64 * (node.inputs.len() as u64 - 1),
        }
    }

    /// Parameter count obtained by enumerating parameter tensor shapes.
    pub fn enumerated_params(&self, mask: Option<&[bool]>) -> u64 {
        self.nodes
            .iter()
            .filter(|n| mask.is_none_or(|m| m[n.id.0]))
            .flat_map(|n| self.param_specs(n))
            .map(|s| s.numel() as u64)
            .sum()
    }

    /// Parameter count obtained from the closed-form layer formulas.
    pub fn formula_params(&self, mask: Option<&[bool]>) -> u64 {
        self.nodes
            .iter()
            .filter(|n| mask.is_none_or(|m| m[n.id.0]))
            .map(|n| self.node_params(n))
            .sum()
    }

    pub fn flops(&self, mask: Option<&[bool]>) -> u64 {
        self.nodes
            .iter()
            .filter(|n| mask.is_none_or(|m| m[n.id.0]))
            .map(|n| self.node_flops(n))
            .sum()
    }

    /// Structural checks: topological order, reachability from the input,
    /// anchor ordering and channel bookkeeping.
    pub fn validate(&self) -> Result<()> {
        if self.nodes.first().map(|n| &n.kind) != Some(&LayerKind::Input) {
            return Err(Error::graph("first node must be the input"));
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if node.id.0 != i {
                return Err(Error::graph(format!("node {} stored at position {i}", node.name)));
            }
            if i > 0 && node.inputs.is_empty() {
                return Err(Error::graph(format!("node {} has no inputs", node.name)));
            }
            if node.inputs.iter().any(|p| p.0 >= i) {
                return Err(Error::graph(format!("node {} consumes a later node", node.name)));
            }
        }
        let mut reached = vec![false; self.nodes.len()];
        reached[0] = true;
        for node in &self.nodes[1..] {
            reached[node.id.0] = node.inputs.iter().any(|p| reached[p.0]);
        }
        if let Some(n) = self.nodes.iter().find(|n| !reached[n.id.0]) {
            return Err(Error::graph(format!("node {} unreachable from input", n.name)));
        }
        let mut last = None;
        for (k, a) in self.anchors.iter().enumerate() {
            if a.ordinal != k + 1 {
                return Err(Error::graph(format!("anchor {k} has ordinal {}", a.ordinal)));
            }
            let node = self.nodes.get(a.node.0).ok_or_else(|| Error::graph("anchor on missing node"))?;
            if node.shape.c != a.channels {
                return Err(Error::graph(format!(
                    "anchor {} records {} channels, node {} has {}",
                    a.ordinal, a.channels, node.name, node.shape.c
                )));
            }
            if last.is_some_and(|prev: NodeId| prev.0 >= a.node.0) {
                return Err(Error::graph("anchors out of topological order"));
            }
            last = Some(a.node);
        }
        if let Some(prev) = last {
            if prev.0 > self.output.0 {
                return Err(Error::graph("last anchor lies after the final feature node"));
            }
        }
        Ok(())
    }
}

/// Incremental graph construction with shape inference at every step.
#[derive(Debug)]
pub struct GraphBuilder {
    name: String,
    nodes: Vec<Node>,
    anchors: Vec<Anchor>,
    names: HashSet<String>,
}

impl GraphBuilder {
    pub fn new(name: impl Into<String>, input: FeatureShape) -> Self {
        let node = Node {
            id: NodeId(0),
            name: "input".into(),
            kind: LayerKind::Input,
            inputs: Vec::new(),
            shape: input,
        };
        Self {
            name: name.into(),
            nodes: vec![node],
            anchors: Vec::new(),
            names: HashSet::from(["input".to_string()]),
        }
    }

    pub fn input(&self) -> NodeId {
        NodeId(0)
    }

    pub fn shape(&self, id: NodeId) -> FeatureShape {
        self.nodes[id.0].shape
    }

    pub fn add_node(&mut self, name: impl Into<String>, kind: LayerKind, inputs: &[NodeId]) -> Result<NodeId> {
        let name = name.into();
        if !self.names.insert(name.clone()) {
            return Err(Error::graph(format!("duplicate node name {name}")));
        }
        if let Some(bad) = inputs.iter().find(|i| i.0 >= self.nodes.len()) {
            return Err(Error::graph(format!("{name} consumes unknown node {}", bad.0)));
        }
        let shapes: Vec<FeatureShape> = inputs.iter().map(|i| self.nodes[i.0].shape).collect();
        let shape = infer_shape(&name, &kind, &shapes)?;
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            id,
            name,
            kind,
            inputs: inputs.to_vec(),
            shape,
        });
        Ok(id)
    }

    pub fn conv(
        &mut self,
        name: &str,
        x: NodeId,
        kernel: usize,
        filters: usize,
        stride: usize,
        bias: bool,
    ) -> Result<NodeId> {
        self.add_node(
            name,
            LayerKind::Conv2d {
                kernel,
                filters,
                stride,
                padding: Padding::Same,
                bias,
            },
            &[x],
        )
    }

    pub fn depthwise(&mut self, name: &str, x: NodeId, kernel: usize, stride: usize) -> Result<NodeId> {
        self.add_node(
            name,
            LayerKind::DepthwiseConv2d {
                kernel,
                stride,
                padding: Padding::Same,
                bias: false,
            },
            &[x],
        )
    }

    pub fn batch_norm(&mut self, name: &str, x: NodeId) -> Result<NodeId> {
        self.add_node(name, LayerKind::BatchNorm, &[x])
    }

    pub fn relu(&mut self, name: &str, x: NodeId) -> Result<NodeId> {
        self.add_node(name, LayerKind::Relu, &[x])
    }

    pub fn anchor(&mut self, node: NodeId, kind: AnchorKind) {
        let channels = self.nodes[node.0].shape.c;
        self.anchors.push(Anchor {
            node,
            kind,
            ordinal: self.anchors.len() + 1,
            channels,
        });
    }

    pub fn finish(self, output: NodeId, config: Option<BackboneConfig>) -> Result<NetworkGraph> {
        let graph = NetworkGraph {
            name: self.name,
            config,
            nodes: self.nodes,
            output,
            anchors: self.anchors,
        };
        if graph.anchors.is_empty() {
            return Err(Error::graph(format!("{} has no exit anchors", graph.name)));
        }
        graph.validate()?;
        Ok(graph)
    }
}

fn infer_shape(name: &str, kind: &LayerKind, inputs: &[FeatureShape]) -> Result<FeatureShape> {
    let single = || -> Result<FeatureShape> {
        match inputs {
            [s] => Ok(*s),
            _ => Err(Error::graph(format!("{name} expects exactly one input, got {}", inputs.len()))),
        }
    };
    let spatial = |s: FeatureShape, k: usize, stride: usize, padding: Padding| -> Result<(usize, usize)> {
        let (h, _) = layers::output_extent(s.h, k, stride, padding)?;
        let (w, _) = layers::output_extent(s.w, k, stride, padding)?;
        Ok((h, w))
    };
    Ok(match *kind {
        LayerKind::Input => return Err(Error::graph("only the builder creates the input node")),
        LayerKind::Conv2d {
            kernel,
            filters,
            stride,
            padding,
            ..
        } => {
            let (h, w) = spatial(single()?, kernel, stride, padding)?;
            FeatureShape::new(h, w, filters)
        }
        LayerKind::DepthwiseConv2d {
            kernel, stride, padding, ..
        } => {
            let s = single()?;
            let (h, w) = spatial(s, kernel, stride, padding)?;
            FeatureShape::new(h, w, s.c)
        }
        LayerKind::BatchNorm | LayerKind::Relu => single()?,
        LayerKind::MaxPool { size, stride, padding } | LayerKind::AvgPool { size, stride, padding } => {
            let s = single()?;
            let (h, w) = spatial(s, size, stride, padding)?;
            FeatureShape::new(h, w, s.c)
        }
        LayerKind::Add => {
            let first = *inputs.first().ok_or_else(|| Error::graph(format!("{name} has no inputs")))?;
            if inputs.len() < 2 || inputs.iter().any(|s| *s != first) {
                return Err(Error::shape(format!("{name}: add needs ≥ 2 identical shapes, got {inputs:?}")));
            }
            first
        }
        LayerKind::Concat => {
            let first = *inputs.first().ok_or_else(|| Error::graph(format!("{name} has no inputs")))?;
            if inputs.iter().any(|s| (s.h, s.w) != (first.h, first.w)) {
                return Err(Error::shape(format!("{name}: concat spatial mismatch {inputs:?}")));
            }
            FeatureShape::new(first.h, first.w, inputs.iter().map(|s| s.c).sum())
        }
    })
}
