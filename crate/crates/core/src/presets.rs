//! Reference architectures.

use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{FeatureDims, GraphBuilder, LayerId, NetworkGraph};
use crate::ops::{Padding, PoolKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    /// 4-layer CIFAR-10 ConvNet: conv 5x5/96, conv 5x5/192, conv 3x3/192, fc 4x4/384.
    ConvnetTable1,
    /// CIFAR-10 ResNet-20 with 1x1 projection shortcuts at stage transitions.
    Resnet20,
    /// Small 28x28x1 network: two valid 3x3 convs and a classifier.
    MnistSmall,
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "convnet_table1" => Ok(Preset::ConvnetTable1),
            "resnet20" => Ok(Preset::Resnet20),
            "mnist_small" => Ok(Preset::MnistSmall),
            other => Err(Error::invalid(format!(
                "unknown preset `{other}` (expected convnet_table1, resnet20 or mnist_small)"
            ))),
        }
    }
}

impl Preset {
    pub fn name(self) -> &'static str {
        match self {
            Preset::ConvnetTable1 => "convnet_table1",
            Preset::Resnet20 => "resnet20",
            Preset::MnistSmall => "mnist_small",
        }
    }
}

pub fn build_preset<R: Rng + ?Sized>(preset: Preset, rng: &mut R) -> Result<NetworkGraph> {
    match preset {
        Preset::ConvnetTable1 => convnet([96, 192, 192, 384], rng),
        Preset::Resnet20 => resnet20([16, 32, 64], rng),
        Preset::MnistSmall => mnist_small(8, 16, rng),
    }
}

pub fn build_preset_named<R: Rng + ?Sized>(name: &str, rng: &mut R) -> Result<NetworkGraph> {
    build_preset(name.parse()?, rng)
}

/// The CIFAR-10 ConvNet with configurable widths for conv1, conv2, conv3, fc.
pub fn convnet<R: Rng + ?Sized>(widths: [usize; 4], rng: &mut R) -> Result<NetworkGraph> {
    let mut b = GraphBuilder::new(FeatureDims::new(32, 32, 3));
    let mut x = b.input();
    let convs = [("conv1", 5, widths[0], "pool1"), ("conv2", 5, widths[1], "pool2"), ("conv3", 3, widths[2], "pool3")];
    for (i, (name, k, c, pool)) in convs.into_iter().enumerate() {
        x = b.conv(name, x, k, 1, Padding::Same, c, true);
        x = b.relu(&format!("relu{}", i + 1), x);
        x = b.pool(pool, x, PoolKind::Max, 3, 2, Padding::Same);
    }
    x = b.dense("fc", x, widths[3], true);
    x = b.relu("relu4", x);
    x = b.dense("logits", x, 10, false);
    b.build(x, rng)
}

/// ResNet-20: a 3x3 stem, three stages of three basic blocks, global average
/// pooling and a linear classifier. Only the first conv of each block is
/// prunable; everything that feeds a residual sum stays full width.
pub fn resnet20<R: Rng + ?Sized>(widths: [usize; 3], rng: &mut R) -> Result<NetworkGraph> {
    let mut b = GraphBuilder::new(FeatureDims::new(32, 32, 3));
    let stem = b.conv("conv1", b.input(), 3, 1, Padding::Same, widths[0], true);
    let mut x = b.relu("relu1", stem);
    let mut in_width = widths[0];
    for (g, &width) in widths.iter().enumerate() {
        for blk in 0..3 {
            let tag = format!("{}-{}", g + 1, blk + 1);
            let stride = if g > 0 && blk == 0 { 2 } else { 1 };
            let a = b.conv(&format!("block{tag}/conv_a"), x, 3, stride, Padding::Same, width, true);
            let a = b.relu(&format!("block{tag}/relu_a"), a);
            let c = b.conv(&format!("block{tag}/conv_b"), a, 3, 1, Padding::Same, width, true);
            let shortcut: LayerId = if stride != 1 || in_width != width {
                b.conv(&format!("block{tag}/shortcut"), x, 1, stride, Padding::Same, width, true)
            } else {
                x
            };
            let sum = b.add_join(&format!("block{tag}/add"), c, shortcut);
            x = b.relu(&format!("block{tag}/relu_out"), sum);
            in_width = width;
        }
    }
    x = b.pool("global_pool", x, PoolKind::Avg, 8, 1, Padding::Valid);
    x = b.dense("logits", x, 10, false);
    b.build(x, rng)
}

/// Two valid-padding conv blocks and a dense classifier over 28x28x1 images.
pub fn mnist_small<R: Rng + ?Sized>(c1: usize, c2: usize, rng: &mut R) -> Result<NetworkGraph> {
    let mut b = GraphBuilder::new(FeatureDims::new(28, 28, 1));
    let mut x = b.conv("conv1", b.input(), 3, 1, Padding::Valid, c1, true);
    x = b.relu("relu1", x);
    x = b.pool("pool1", x, PoolKind::Max, 3, 2, Padding::Valid);
    x = b.conv("conv2", x, 3, 1, Padding::Valid, c2, true);
    x = b.relu("relu2", x);
    x = b.pool("pool2", x, PoolKind::Max, 3, 2, Padding::Valid);
    x = b.dense("logits", x, 10, false);
    b.build(x, rng)
}
