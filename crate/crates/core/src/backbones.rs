//! Backbone graph builders.
//!
//! Mini variants keep each family's block structure and anchor rule at a
//! size that trains on 28×28 or 32×32 inputs in minutes. Full-audit variants
//! reproduce the full-size architectures as shape-only graphs for cost
//! accounting.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{AnchorKind, FeatureShape, GraphBuilder, LayerKind, NetworkGraph, NodeId};
use crate::layers::Padding;

/// Names accepted by [`BackboneConfig::preset`].
pub const KNOWN_BACKBONES: &[&str] = &[
    "mini-vgg",
    "mini-mobilenet",
    "mini-densenet",
    "mini-resnet",
    "densenet-121",
    "densenet-169",
    "mobilenet",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scale {
    Mini,
    /// Shape-only: graphs are built for cost auditing and never get weights.
    FullAudit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VggStage {
    pub convs: usize,
    pub channels: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VggConfig {
    pub stages: Vec<VggStage>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MobileNetConfig {
    pub stem_channels: usize,
    pub stem_stride: usize,
    /// `(pointwise channels, depthwise stride)` per depthwise block.
    pub blocks: Vec<(usize, usize)>,
    /// Width multiplier α.
    pub alpha: f64,
    /// Resolution multiplier ρ.
    pub rho: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseNetConfig {
    pub stem_channels: usize,
    pub stem_kernel: usize,
    pub stem_stride: usize,
    /// Downsampling max-pool after the stem.
    pub stem_pool: bool,
    pub growth_rate: usize,
    /// Layers per dense block.
    pub blocks: Vec<usize>,
    /// 1×1 conv to 4·k channels before each 3×3 conv.
    pub bottleneck: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResNetStage {
    pub blocks: usize,
    pub channels: usize,
    pub stride: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResNetConfig {
    pub stem_channels: usize,
    pub stages: Vec<ResNetStage>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "kebab-case")]
pub enum Family {
    Vgg(VggConfig),
    #[serde(rename = "mobilenet")]
    MobileNet(MobileNetConfig),
    #[serde(rename = "densenet")]
    DenseNet(DenseNetConfig),
    #[serde(rename = "resnet")]
    ResNet(ResNetConfig),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub name: String,
    pub input: FeatureShape,
    pub scale: Scale,
    pub family: Family,
}

impl Default for VggConfig {
    fn default() -> Self {
        let stage = |convs, channels| VggStage { convs, channels };
        Self {
            stages: vec![stage(1, 8), stage(1, 16), stage(2, 32), stage(2, 32), stage(2, 64)],
        }
    }
}

impl Default for MobileNetConfig {
    fn default() -> Self {
        let mut blocks = vec![(16, 1), (32, 2), (32, 1), (64, 2), (64, 1), (128, 2)];
        blocks.extend([(128, 1); 5]);
        blocks.extend([(256, 2), (256, 1)]);
        Self {
            stem_channels: 8,
            stem_stride: 2,
            blocks,
            alpha: 0.5,
            rho: 1.0,
        }
    }
}

impl MobileNetConfig {
    /// The full-size layout: 32-channel stem and 13 blocks up to 1024 channels.
    pub fn full() -> Self {
        let mut blocks = vec![(64, 1), (128, 2), (128, 1), (256, 2), (256, 1), (512, 2)];
        blocks.extend([(512, 1); 5]);
        blocks.extend([(1024, 2), (1024, 1)]);
        Self {
            stem_channels: 32,
            stem_stride: 2,
            blocks,
            alpha: 1.0,
            rho: 1.0,
        }
    }
}

impl Default for DenseNetConfig {
    fn default() -> Self {
        Self {
            stem_channels: 8,
            stem_kernel: 3,
            stem_stride: 1,
            stem_pool: true,
            growth_rate: 6,
            blocks: vec![2, 2, 2, 2],
            bottleneck: false,
        }
    }
}

impl DenseNetConfig {
    fn full(blocks: Vec<usize>) -> Self {
        Self {
            stem_channels: 64,
            stem_kernel: 7,
            stem_stride: 2,
            stem_pool: true,
            growth_rate: 32,
            blocks,
            bottleneck: true,
        }
    }
}

impl Default for ResNetConfig {
    fn default() -> Self {
        Self::with_layout(&[3, 4, 6, 3])
    }
}

impl ResNetConfig {
    /// Mini layout with the given residual blocks per stage; channels double
    /// and resolution halves from the second stage on.
    pub fn with_layout(blocks: &[usize]) -> Self {
        let stages = blocks
            .iter()
            .enumerate()
            .map(|(i, &b)| ResNetStage {
                blocks: b,
                channels: 8 << i.min(6),
                stride: if i == 0 { 1 } else { 2 },
            })
            .collect();
        Self {
            stem_channels: 8,
            stages,
        }
    }
}

impl BackboneConfig {
    pub fn mini(family: Family, input: FeatureShape) -> Self {
        let name = match family {
            Family::Vgg(_) => "mini-vgg",
            Family::MobileNet(_) => "mini-mobilenet",
            Family::DenseNet(_) => "mini-densenet",
            Family::ResNet(_) => "mini-resnet",
        };
        Self {
            name: name.into(),
            input,
            scale: Scale::Mini,
            family,
        }
    }

    /// A named configuration. `input` applies to mini presets; full-audit
    /// presets always use 224×224×3.
    pub fn preset(name: &str, input: FeatureShape) -> Result<Self> {
        let full = |family| Self {
            name: name.to_string(),
            input: FeatureShape::new(224, 224, 3),
            scale: Scale::FullAudit,
            family,
        };
        Ok(match name {
            "mini-vgg" => Self::mini(Family::Vgg(VggConfig::default()), input),
            "mini-mobilenet" => Self::mini(Family::MobileNet(MobileNetConfig::default()), input),
            "mini-densenet" => Self::mini(Family::DenseNet(DenseNetConfig::default()), input),
            "mini-resnet" => Self::mini(Family::ResNet(ResNetConfig::default()), input),
            "densenet-121" => full(Family::DenseNet(DenseNetConfig::full(vec![6, 12, 24, 16]))),
            "densenet-169" => full(Family::DenseNet(DenseNetConfig::full(vec![6, 12, 32, 32]))),
            "mobilenet" => full(Family::MobileNet(MobileNetConfig::full())),
            other => {
                return Err(Error::config(format!(
                    "unknown backbone `{other}`; known: {}",
                    KNOWN_BACKBONES.join(", ")
                )))
            }
        })
    }

    pub fn build(&self) -> Result<NetworkGraph> {
        if self.scale == Scale::Mini {
            let ok = matches!(
                (self.input.h, self.input.w, self.input.c),
                (32, 32, _) | (28, 28, 1)
            );
            if !ok || self.input.c == 0 {
                return Err(Error::config(format!(
                    "mini backbones take 32×32×C or 28×28×1 inputs, got {}",
                    self.input
                )));
            }
        }
        let mut graph = match &self.family {
            Family::Vgg(c) => build_mini_vgg(&self.name, self.input, c)?,
            Family::MobileNet(c) => build_mini_mobilenet(&self.name, self.input, c)?,
            Family::DenseNet(c) => build_mini_densenet(&self.name, self.input, c)?,
            Family::ResNet(c) => build_mini_resnet(&self.name, self.input, c)?,
        };
        graph.config = Some(self.clone());
        Ok(graph)
    }
}

/// Shape-only full-size graph: `densenet-121`, `densenet-169` or `mobilenet`.
pub fn build_full_audit_graph(name: &str) -> Result<NetworkGraph> {
    let config = BackboneConfig::preset(name, FeatureShape::new(224, 224, 3))?;
    if config.scale != Scale::FullAudit {
        return Err(Error::config(format!(
            "`{name}` is not a full-audit backbone; choose densenet-121, densenet-169 or mobilenet"
        )));
    }
    config.build()
}

/// Stages of `(3×3 conv → relu)+` followed by a 2×2 max-pool; one anchor
/// per max-pool.
pub fn build_mini_vgg(name: &str, input: FeatureShape, cfg: &VggConfig) -> Result<NetworkGraph> {
    if cfg.stages.len() < 2 {
        return Err(Error::config("vgg needs at least 2 stages"));
    }
    let mut b = GraphBuilder::new(name, input);
    let mut x = b.input();
    for (s, stage) in cfg.stages.iter().enumerate() {
        if stage.convs == 0 || stage.channels == 0 {
            return Err(Error::config(format!("vgg stage {} is empty", s + 1)));
        }
        for j in 0..stage.convs {
            let c = b.conv(&format!("block{}_conv{}", s + 1, j + 1), x, 3, stage.channels, 1, true)?;
            x = b.relu(&format!("block{}_relu{}", s + 1, j + 1), c)?;
        }
        x = b.add_node(
            format!("block{}_pool", s + 1),
            LayerKind::MaxPool {
                size: 2,
                stride: 2,
                padding: Padding::Same,
            },
            &[x],
        )?;
        b.anchor(x, AnchorKind::MaxPool);
    }
    b.finish(x, None)
}

fn scaled(channels: usize, alpha: f64) -> usize {
    ((channels as f64 * alpha).round() as usize).max(1)
}

/// Stem conv plus depthwise blocks (depthwise → BN → relu → pointwise → BN →
/// relu); one anchor after the last relu of each block.
pub fn build_mini_mobilenet(name: &str, input: FeatureShape, cfg: &MobileNetConfig) -> Result<NetworkGraph> {
    if !(cfg.alpha > 0.0 && cfg.rho > 0.0) {
        return Err(Error::config(format!(
            "mobilenet multipliers must be positive (α = {}, ρ = {})",
            cfg.alpha, cfg.rho
        )));
    }
    if cfg.blocks.is_empty() {
        return Err(Error::config("mobilenet needs at least one depthwise block"));
    }
    let res = |v: usize| ((v as f64 * cfg.rho).round() as usize).max(1);
    let input = FeatureShape::new(res(input.h), res(input.w), input.c);
    let mut b = GraphBuilder::new(name, input);
    let stem = b.conv("conv1", b.input(), 3, scaled(cfg.stem_channels, cfg.alpha), cfg.stem_stride, false)?;
    let stem = b.batch_norm("conv1_bn", stem)?;
    let mut x = b.relu("conv1_relu", stem)?;
    for (i, &(channels, stride)) in cfg.blocks.iter().enumerate() {
        let id = i + 1;
        let d = b.depthwise(&format!("conv_dw_{id}"), x, 3, stride)?;
        let d = b.batch_norm(&format!("conv_dw_{id}_bn"), d)?;
        let d = b.relu(&format!("conv_dw_{id}_relu"), d)?;
        let p = b.conv(&format!("conv_pw_{id}"), d, 1, scaled(channels, cfg.alpha), 1, false)?;
        let p = b.batch_norm(&format!("conv_pw_{id}_bn"), p)?;
        x = b.relu(&format!("conv_pw_{id}_relu"), p)?;
        b.anchor(x, AnchorKind::ReluOfDepthwiseBlock);
    }
    b.finish(x, None)
}

fn bn_relu_conv(b: &mut GraphBuilder, prefix: &str, x: NodeId, kernel: usize, filters: usize) -> Result<NodeId> {
    let n = b.batch_norm(&format!("{prefix}_bn"), x)?;
    let r = b.relu(&format!("{prefix}_relu"), n)?;
    b.conv(&format!("{prefix}_conv"), r, kernel, filters, 1, false)
}

/// Dense blocks separated by transitions (BN → relu → 1×1 conv halving the
/// channels → 2×2 average pool). Anchors sit on each transition's average
/// pool and on the final feature map.
pub fn build_mini_densenet(name: &str, input: FeatureShape, cfg: &DenseNetConfig) -> Result<NetworkGraph> {
    if cfg.blocks.len() < 2 {
        return Err(Error::config("densenet needs at least 2 dense blocks"));
    }
    if cfg.growth_rate == 0 {
        return Err(Error::config("growth rate must be at least 1"));
    }
    let mut b = GraphBuilder::new(name, input);
    let stem = b.conv("conv1", b.input(), cfg.stem_kernel, cfg.stem_channels, cfg.stem_stride, false)?;
    let stem = b.batch_norm("conv1_bn", stem)?;
    let mut x = b.relu("conv1_relu", stem)?;
    if cfg.stem_pool {
        let (size, stride) = if cfg.stem_kernel > 3 { (3, 2) } else { (2, 2) };
        x = b.add_node(
            "pool1",
            LayerKind::MaxPool {
                size,
                stride,
                padding: Padding::Same,
            },
            &[x],
        )?;
    }
    let k = cfg.growth_rate;
    for (bi, &layers) in cfg.blocks.iter().enumerate() {
        let block = bi + 2;
        for l in 1..=layers {
            let prefix = format!("conv{block}_block{l}");
            let mut y = x;
            if cfg.bottleneck {
                y = bn_relu_conv(&mut b, &format!("{prefix}_0"), y, 1, 4 * k)?;
            }
            y = bn_relu_conv(&mut b, &format!("{prefix}_1"), y, 3, k)?;
            x = b.add_node(format!("{prefix}_concat"), LayerKind::Concat, &[x, y])?;
        }
        if bi + 1 < cfg.blocks.len() {
            let prefix = format!("pool{block}");
            let c = (b.shape(x).c / 2).max(1);
            let y = bn_relu_conv(&mut b, &prefix, x, 1, c)?;
            x = b.add_node(
                format!("{prefix}_pool"),
                LayerKind::AvgPool {
                    size: 2,
                    stride: 2,
                    padding: Padding::Same,
                },
                &[y],
            )?;
            b.anchor(x, AnchorKind::TransitionAvgPool);
        }
    }
    let n = b.batch_norm("bn", x)?;
    let out = b.relu("relu", n)?;
    b.anchor(out, AnchorKind::FinalFeature);
    b.finish(out, None)
}

/// Basic residual blocks with identity shortcuts, or 1×1 projection
/// shortcuts where shape changes. Anchors sit on each block's output
/// (the activation of the residual add).
pub fn build_mini_resnet(name: &str, input: FeatureShape, cfg: &ResNetConfig) -> Result<NetworkGraph> {
    if cfg.stages.is_empty() || cfg.stages.iter().any(|s| s.blocks == 0 || s.channels == 0 || s.stride == 0) {
        return Err(Error::config("resnet needs ≥ 1 stage, each with ≥ 1 block"));
    }
    let mut b = GraphBuilder::new(name, input);
    let stem = b.conv("conv1", b.input(), 3, cfg.stem_channels, 1, false)?;
    let stem = b.batch_norm("conv1_bn", stem)?;
    let mut x = b.relu("conv1_relu", stem)?;
    for (si, stage) in cfg.stages.iter().enumerate() {
        for bi in 0..stage.blocks {
            let prefix = format!("conv{}_block{}", si + 2, bi + 1);
            let stride = if bi == 0 { stage.stride } else { 1 };
            let y = b.conv(&format!("{prefix}_1_conv"), x, 3, stage.channels, stride, false)?;
            let y = b.batch_norm(&format!("{prefix}_1_bn"), y)?;
            let y = b.relu(&format!("{prefix}_1_relu"), y)?;
            let y = b.conv(&format!("{prefix}_2_conv"), y, 3, stage.channels, 1, false)?;
            let y = b.batch_norm(&format!("{prefix}_2_bn"), y)?;
            let shortcut = if stride != 1 || b.shape(x).c != stage.channels {
                let s = b.conv(&format!("{prefix}_0_conv"), x, 1, stage.channels, stride, false)?;
                b.batch_norm(&format!("{prefix}_0_bn"), s)?
            } else {
                x
            };
            let sum = b.add_node(format!("{prefix}_add"), LayerKind::Add, &[shortcut, y])?;
            x = b.relu(&format!("{prefix}_out"), sum)?;
            b.anchor(x, AnchorKind::ResidualAdd);
        }
    }
    b.finish(x, None)
}

/// Block-structured concat network standing in for Inception: each block
/// concatenates a 1×1 and a 3×3 branch. Exits go after every block's concat
/// except the last; the last concat is the final feature.
pub fn build_concat_standin(input: FeatureShape, blocks: usize) -> Result<NetworkGraph> {
    if blocks == 0 {
        return Err(Error::config("concat stand-in needs at least one block"));
    }
    let mut b = GraphBuilder::new("concat-standin", input);
    let stem = b.conv("stem", b.input(), 3, 8, 1, true)?;
    let mut x = b.relu("stem_relu", stem)?;
    for i in 1..=blocks {
        let a = b.conv(&format!("mixed{i}_1x1"), x, 1, 4, 1, true)?;
        let a = b.relu(&format!("mixed{i}_1x1_relu"), a)?;
        let c = b.conv(&format!("mixed{i}_3x3"), x, 3, 4, 1, true)?;
        let c = b.relu(&format!("mixed{i}_3x3_relu"), c)?;
        x = b.add_node(format!("mixed{i}"), LayerKind::Concat, &[a, c])?;
        b.anchor(x, if i < blocks { AnchorKind::BlockConcat } else { AnchorKind::FinalFeature });
    }
    b.finish(x, None)
}
