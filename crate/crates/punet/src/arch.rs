//! Residual network construction: standard and product-unit blocks, stems,
//! stages, and exact parameter accounting.

use std::cell::RefCell;
use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{BatchNorm2d, Conv2d, Linear};
use crate::ops;
use crate::pu::ProductUnitConv2d;
use crate::scalar::Scalar;
use crate::tape::{Parameter, Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    /// Product-unit residual blocks, no ReLU anywhere in the network.
    Pure,
    /// Standard two-layer residual blocks with post-add ReLU.
    Resnet,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stem {
    /// 7x7 stride-2 convolution plus 3x3 stride-2 max pooling; four stages.
    Imagenet,
    /// Single 3x3 stride-1 convolution, no pooling; three stages.
    Cifar,
}

/// Declarative description of one network variant.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchitectureSpec {
    pub family: Family,
    pub stem: Stem,
    pub stage_blocks: Vec<usize>,
    pub stage_channels: Vec<usize>,
    pub num_classes: usize,
}

const IMAGENET_CHANNELS: [usize; 4] = [64, 128, 256, 512];
const CIFAR_CHANNELS: [usize; 3] = [16, 32, 64];

/// Architecture names accepted by [`ArchitectureSpec::by_name`].
pub const KNOWN_ARCHITECTURES: &[&str] = &[
    "pure18", "pure34", "resnet18", "resnet34", "pure20", "pure32", "pure44", "pure56", "pure110",
    "pure272", "resnet20", "resnet32", "resnet44", "resnet56", "resnet110", "resnet272",
];

impl ArchitectureSpec {
    pub fn new(
        family: Family,
        stem: Stem,
        stage_blocks: Vec<usize>,
        stage_channels: Vec<usize>,
        num_classes: usize,
    ) -> Result<Self> {
        let spec = Self {
            family,
            stem,
            stage_blocks,
            stage_channels,
            num_classes,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Resolves a published variant name like `pure18` or `resnet110`.
    pub fn by_name(name: &str, num_classes: usize) -> Result<Self> {
        let (family, depth) = if let Some(d) = name.strip_prefix("pure") {
            (Family::Pure, d)
        } else if let Some(d) = name.strip_prefix("resnet") {
            (Family::Resnet, d)
        } else {
            return Err(Error::InvalidConfig(format!(
                "unknown architecture '{name}'; known: {}",
                KNOWN_ARCHITECTURES.join(", ")
            )));
        };
        let blocks: Vec<usize> = match depth {
            "18" => vec![2, 2, 2, 2],
            "34" => vec![3, 4, 6, 3],
            // CIFAR family: depth 6n+2 with n blocks per stage
            "20" | "32" | "44" | "56" | "110" | "272" => {
                let d: usize = depth.parse().expect("numeric depth");
                let n = (d - 2) / 6;
                vec![n, n, n]
            }
            _ => {
                return Err(Error::InvalidConfig(format!(
                    "unknown architecture '{name}'; known: {}",
                    KNOWN_ARCHITECTURES.join(", ")
                )))
            }
        };
        let (stem, channels) = if blocks.len() == 4 {
            (Stem::Imagenet, IMAGENET_CHANNELS.to_vec())
        } else {
            (Stem::Cifar, CIFAR_CHANNELS.to_vec())
        };
        Self::new(family, stem, blocks, channels, num_classes)
    }

    pub fn validate(&self) -> Result<()> {
        let expected_stages = match self.stem {
            Stem::Imagenet => 4,
            Stem::Cifar => 3,
        };
        if self.stage_blocks.len() != expected_stages {
            return Err(Error::InvalidConfig(format!(
                "{:?} stem requires {expected_stages} stages, got {}",
                self.stem,
                self.stage_blocks.len()
            )));
        }
        if self.stage_channels.len() != self.stage_blocks.len() {
            return Err(Error::InvalidConfig(
                "stage_channels and stage_blocks lengths differ".into(),
            ));
        }
        if self.stage_blocks.iter().any(|&b| b == 0) || self.stage_channels.iter().any(|&c| c == 0)
        {
            return Err(Error::InvalidConfig(
                "stage block counts and channel widths must be positive".into(),
            ));
        }
        if self.num_classes < 2 {
            return Err(Error::InvalidConfig(format!(
                "need at least 2 classes, got {}",
                self.num_classes
            )));
        }
        Ok(())
    }

    /// Total residual blocks, which for a PURe network is also the number of
    /// trainable thresholds.
    pub fn total_blocks(&self) -> usize {
        self.stage_blocks.iter().sum()
    }

    /// Expected input side length for the stem.
    pub fn nominal_input_size(&self) -> usize {
        match self.stem {
            Stem::Imagenet => 224,
            Stem::Cifar => 32,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockKind {
    Standard,
    ProductUnit,
}

/// Shape of one residual block before parameters exist.
#[derive(Debug, Clone)]
pub struct BlockSpec {
    pub kind: BlockKind,
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
}

impl BlockSpec {
    /// The skip path needs a projection when the block changes resolution or
    /// width.
    pub fn has_downsample_skip(&self) -> bool {
        self.stride != 1 || self.in_channels != self.out_channels
    }
}

enum SecondLayer<E: Scalar> {
    Conv(Conv2d<E>),
    ProductUnit(ProductUnitConv2d<E>),
}

/// Two-layer residual block, standard or product-unit.
pub struct ResidualBlock<E: Scalar> {
    conv1: Conv2d<E>,
    bn1: BatchNorm2d<E>,
    second: SecondLayer<E>,
    bn2: BatchNorm2d<E>,
    downsample: Option<(Conv2d<E>, BatchNorm2d<E>)>,
    relu: bool,
}

/// Builds one residual block.
///
/// Standard: Conv(3x3, stride) -> BN -> ReLU -> Conv(3x3, 1) -> BN -> (+skip) -> ReLU.
/// Product-unit: Conv(3x3, stride) -> BN -> ConvPU(3x3, 1) -> BN -> (+skip),
/// with no activation anywhere. The skip is the identity, or a 1x1 stride-2
/// projection plus BN when dimensions change.
pub fn build_block<E: Scalar>(spec: &BlockSpec) -> Result<ResidualBlock<E>> {
    if spec.stride != 1 && spec.stride != 2 {
        return Err(Error::InvalidConfig(format!(
            "block stride must be 1 or 2, got {}",
            spec.stride
        )));
    }
    if spec.in_channels == 0 || spec.out_channels == 0 {
        return Err(Error::InvalidConfig("block channels must be positive".into()));
    }
    let conv1 = Conv2d::new(spec.in_channels, spec.out_channels, 3, spec.stride, 1);
    let bn1 = BatchNorm2d::new(spec.out_channels);
    let second = match spec.kind {
        BlockKind::Standard => {
            SecondLayer::Conv(Conv2d::new(spec.out_channels, spec.out_channels, 3, 1, 1))
        }
        BlockKind::ProductUnit => SecondLayer::ProductUnit(ProductUnitConv2d::new(
            spec.out_channels,
            spec.out_channels,
            3,
            1,
            1,
        )),
    };
    let bn2 = BatchNorm2d::new(spec.out_channels);
    let downsample = if spec.has_downsample_skip() {
        Some((
            Conv2d::new(spec.in_channels, spec.out_channels, 1, spec.stride, 0),
            BatchNorm2d::new(spec.out_channels),
        ))
    } else {
        None
    };
    Ok(ResidualBlock {
        conv1,
        bn1,
        second,
        bn2,
        downsample,
        relu: matches!(spec.kind, BlockKind::Standard),
    })
}

impl<E: Scalar> ResidualBlock<E> {
    pub fn forward<'t>(
        &self,
        tape: &'t Tape<E>,
        x: Var<'t, E>,
        training: bool,
    ) -> Result<Var<'t, E>> {
        let mut h = self.conv1.forward(tape, x)?;
        h = self.bn1.forward(tape, h, training)?;
        if self.relu {
            h = ops::relu(h)?;
        }
        h = match &self.second {
            SecondLayer::Conv(conv) => conv.forward(tape, h)?,
            SecondLayer::ProductUnit(pu) => pu.forward(tape, h)?,
        };
        h = self.bn2.forward(tape, h, training)?;
        let skip = match &self.downsample {
            Some((conv, bn)) => {
                let s = conv.forward(tape, x)?;
                bn.forward(tape, s, training)?
            }
            None => x,
        };
        let mut out = ops::add(h, skip)?;
        if self.relu {
            out = ops::relu(out)?;
        }
        Ok(out)
    }
}

/// Reference to one named tensor of a network's state: a trainable parameter
/// or a batch-norm running buffer.
pub enum StateEntry<'a, E: Scalar> {
    Param(&'a Rc<Parameter<E>>),
    Buffer(&'a RefCell<Tensor<E>>),
}

/// A built classifier.
pub struct Network<E: Scalar> {
    spec: ArchitectureSpec,
    stem_conv: Conv2d<E>,
    stem_bn: BatchNorm2d<E>,
    stem_relu: bool,
    stem_pool: bool,
    stages: Vec<Vec<ResidualBlock<E>>>,
    fc: Linear<E>,
}

/// Builds the full network for a spec: stem, stages, head.
///
/// The stem applies ReLU only for the ResNet family; PURe networks contain no
/// ReLU at all. Downsampling happens only at the first block of each stage
/// after the first.
pub fn build_network<E: Scalar>(spec: &ArchitectureSpec) -> Result<Network<E>> {
    spec.validate()?;
    let block_kind = match spec.family {
        Family::Pure => BlockKind::ProductUnit,
        Family::Resnet => BlockKind::Standard,
    };
    let stem_channels = spec.stage_channels[0];
    let (stem_conv, stem_pool) = match spec.stem {
        Stem::Imagenet => (Conv2d::new(3, stem_channels, 7, 2, 3), true),
        Stem::Cifar => (Conv2d::new(3, stem_channels, 3, 1, 1), false),
    };
    let mut stages = Vec::with_capacity(spec.stage_blocks.len());
    let mut in_channels = stem_channels;
    for (stage_idx, (&blocks, &channels)) in spec
        .stage_blocks
        .iter()
        .zip(spec.stage_channels.iter())
        .enumerate()
    {
        let mut stage = Vec::with_capacity(blocks);
        for block_idx in 0..blocks {
            let stride = if stage_idx > 0 && block_idx == 0 { 2 } else { 1 };
            stage.push(build_block(&BlockSpec {
                kind: block_kind,
                in_channels,
                out_channels: channels,
                stride,
            })?);
            in_channels = channels;
        }
        stages.push(stage);
    }
    Ok(Network {
        spec: spec.clone(),
        stem_conv,
        stem_bn: BatchNorm2d::new(stem_channels),
        stem_relu: matches!(spec.family, Family::Resnet),
        stem_pool,
        stages,
        fc: Linear::new(in_channels, spec.num_classes),
    })
}

impl<E: Scalar> Network<E> {
    pub fn spec(&self) -> &ArchitectureSpec {
        &self.spec
    }

    pub fn forward<'t>(
        &self,
        tape: &'t Tape<E>,
        x: Var<'t, E>,
        training: bool,
    ) -> Result<Var<'t, E>> {
        self.forward_inner(tape, x, training, None)
    }

    /// Forward pass that also records the spatial size after each stage.
    pub fn forward_traced<'t>(
        &self,
        tape: &'t Tape<E>,
        x: Var<'t, E>,
        training: bool,
    ) -> Result<(Var<'t, E>, Vec<(usize, usize)>)> {
        let mut sizes = Vec::new();
        let out = self.forward_inner(tape, x, training, Some(&mut sizes))?;
        Ok((out, sizes))
    }

    fn forward_inner<'t>(
        &self,
        tape: &'t Tape<E>,
        x: Var<'t, E>,
        training: bool,
        mut stage_sizes: Option<&mut Vec<(usize, usize)>>,
    ) -> Result<Var<'t, E>> {
        let mut h = self.stem_conv.forward(tape, x)?;
        h = self.stem_bn.forward(tape, h, training)?;
        if self.stem_relu {
            h = ops::relu(h)?;
        }
        if self.stem_pool {
            h = ops::maxpool2d(h, 3, 2, 1)?;
        }
        for stage in &self.stages {
            for block in stage {
                h = block.forward(tape, h, training)?;
            }
            if let Some(sizes) = stage_sizes.as_deref_mut() {
                let s = h.shape();
                sizes.push((s[2], s[3]));
            }
        }
        let pooled = ops::global_avg_pool(h)?;
        self.fc.forward(tape, pooled)
    }

    /// All named state in deterministic order: parameters plus batch-norm
    /// running buffers.
    pub fn state(&self) -> Vec<(String, StateEntry<'_, E>)> {
        let mut out: Vec<(String, StateEntry<'_, E>)> = Vec::new();
        fn push_bn<'a, E: Scalar>(
            out: &mut Vec<(String, StateEntry<'a, E>)>,
            prefix: &str,
            bn: &'a BatchNorm2d<E>,
        ) {
            out.push((format!("{prefix}.gamma"), StateEntry::Param(&bn.gamma)));
            out.push((format!("{prefix}.beta"), StateEntry::Param(&bn.beta)));
            out.push((
                format!("{prefix}.running_mean"),
                StateEntry::Buffer(&bn.running_mean),
            ));
            out.push((
                format!("{prefix}.running_var"),
                StateEntry::Buffer(&bn.running_var),
            ));
        }
        out.push((
            "stem.conv.weight".to_string(),
            StateEntry::Param(&self.stem_conv.weight),
        ));
        push_bn(&mut out, "stem.bn", &self.stem_bn);
        for (si, stage) in self.stages.iter().enumerate() {
            for (bi, block) in stage.iter().enumerate() {
                let p = format!("stages.{si}.{bi}");
                out.push((
                    format!("{p}.conv1.weight"),
                    StateEntry::Param(&block.conv1.weight),
                ));
                push_bn(&mut out, &format!("{p}.bn1"), &block.bn1);
                match &block.second {
                    SecondLayer::Conv(conv) => {
                        out.push((format!("{p}.conv2.weight"), StateEntry::Param(&conv.weight)));
                    }
                    SecondLayer::ProductUnit(pu) => {
                        out.push((format!("{p}.pu.weight"), StateEntry::Param(&pu.weight)));
                        out.push((format!("{p}.pu.theta"), StateEntry::Param(&pu.theta)));
                    }
                }
                push_bn(&mut out, &format!("{p}.bn2"), &block.bn2);
                if let Some((conv, bn)) = &block.downsample {
                    out.push((
                        format!("{p}.downsample.conv.weight"),
                        StateEntry::Param(&conv.weight),
                    ));
                    push_bn(&mut out, &format!("{p}.downsample.bn"), bn);
                }
            }
        }
        out.push(("fc.weight".to_string(), StateEntry::Param(&self.fc.weight)));
        out.push(("fc.bias".to_string(), StateEntry::Param(&self.fc.bias)));
        out
    }

    /// Trainable parameters with names, in the same order as [`state`].
    pub fn parameters(&self) -> Vec<(String, Rc<Parameter<E>>)> {
        self.state()
            .into_iter()
            .filter_map(|(name, entry)| match entry {
                StateEntry::Param(p) => Some((name, Rc::clone(p))),
                StateEntry::Buffer(_) => None,
            })
            .collect()
    }

    /// Exact count of trainable scalars.
    pub fn count_params(&self) -> usize {
        self.parameters().iter().map(|(_, p)| p.numel()).sum()
    }

    pub fn zero_grads(&self) {
        for (_, p) in self.parameters() {
            p.zero_grad();
        }
    }

    /// Visits every layer for initialization, in state order.
    pub(crate) fn visit_layers(&self, visitor: &mut dyn LayerVisitor<E>) {
        visitor.conv(&self.stem_conv);
        visitor.bn(&self.stem_bn);
        for stage in &self.stages {
            for block in stage {
                visitor.conv(&block.conv1);
                visitor.bn(&block.bn1);
                match &block.second {
                    SecondLayer::Conv(conv) => visitor.conv(conv),
                    SecondLayer::ProductUnit(pu) => visitor.product_unit(pu),
                }
                visitor.bn(&block.bn2);
                if let Some((conv, bn)) = &block.downsample {
                    visitor.conv(conv);
                    visitor.bn(bn);
                }
            }
        }
        visitor.linear(&self.fc);
    }

    /// Applies the initialization scheme: Kaiming-uniform with slope 5 for
    /// product-unit exponents, theta = 0, Kaiming-normal (fan-out) for plain
    /// convolutions, constant batch norm, uniform fan-in for the classifier.
    /// Deterministic under the seed.
    pub fn init_parameters(&self, seed: u64) {
        crate::init::init_network(self, seed);
    }
}

pub(crate) trait LayerVisitor<E: Scalar> {
    fn conv(&mut self, layer: &Conv2d<E>);
    fn product_unit(&mut self, layer: &ProductUnitConv2d<E>);
    fn bn(&mut self, layer: &BatchNorm2d<E>);
    fn linear(&mut self, layer: &Linear<E>);
}
