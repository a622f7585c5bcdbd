//! Seed networks. Every conv is followed directly by its normalization and
//! residual shortcuts are learnable 1x1 convs with their own norm.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{ConvGeometry, GraphBuilder, ModelGraph, NodeId};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SeedArch {
    /// Residual CNN regressing `(sbp, dbp)`.
    Resnet1d,
    /// Encoder/decoder reconstructing the ABP waveform.
    Unet1d,
}

impl SeedArch {
    pub fn as_str(self) -> &'static str {
        match self {
            SeedArch::Resnet1d => "resnet1d",
            SeedArch::Unet1d => "unet1d",
        }
    }

    /// Input length used for a window of `window_len` samples. The U-Net
    /// needs a length divisible by `2^levels`.
    pub fn input_len(self, window_len: usize, levels: usize) -> usize {
        match self {
            SeedArch::Resnet1d => window_len,
            SeedArch::Unet1d => {
                let m = 1 << levels;
                window_len / m * m
            }
        }
    }
}

fn conv_bn_relu<T: Scalar, R: Rng>(
    b: &mut GraphBuilder<'_, T, R>,
    name: &str,
    x: NodeId,
    geom: ConvGeometry,
) -> NodeId {
    let c = b.conv(&format!("{name}.conv"), x, geom);
    let n = b.batchnorm(&format!("{name}.bn"), c, geom.out_ch);
    b.relu(&format!("{name}.relu"), n)
}

/// Stem conv, then per entry of `channels` a residual block (two convs,
/// 1x1 shortcut) followed by a 2x max-pool; global average pooling and a
/// linear head with two outputs.
pub fn resnet1d<T: Scalar, R: Rng>(
    len: usize,
    channels: &[usize],
    kernel: usize,
    rng: &mut R,
) -> Result<ModelGraph<T>> {
    if channels.is_empty() || len >> channels.len() == 0 {
        return Err(Error::InvalidArgument(format!(
            "{} blocks do not fit an input of {len} samples",
            channels.len()
        )));
    }
    let mut b = GraphBuilder::<T, R>::new(1, len, rng);
    let mut x = b.input();
    let mut cin = channels[0];
    x = conv_bn_relu(&mut b, "stem", x, ConvGeometry::new(1, cin, kernel));
    let mut l = len;
    for (i, &c) in channels.iter().enumerate() {
        let name = format!("block{i}");
        let h = conv_bn_relu(&mut b, &format!("{name}.a"), x, ConvGeometry::new(cin, c, kernel));
        let h = b.conv(&format!("{name}.b.conv"), h, ConvGeometry::new(c, c, kernel));
        let h = b.batchnorm(&format!("{name}.b.bn"), h, c);
        let s = b.conv(&format!("{name}.short.conv"), x, ConvGeometry::new(cin, c, 1));
        let s = b.batchnorm(&format!("{name}.short.bn"), s, c);
        let sum = b.add(&format!("{name}.add"), &[h, s]);
        let r = b.relu(&format!("{name}.relu"), sum);
        x = b.maxpool(&format!("{name}.pool"), r, 2, 2);
        l /= 2;
        cin = c;
    }
    let gap = b.avgpool("gap", x, l, l);
    let head = b.linear("head", gap, cin, 2);
    b.finish(head)
}

/// Encoder levels of conv-bn-relu with 2x pooling, a bottleneck, and
/// decoder levels with nearest upsampling and skip concatenation; a 1x1
/// conv maps to one output channel. `len` must be divisible by
/// `2^(channels.len() - 1)`.
pub fn unet1d<T: Scalar, R: Rng>(len: usize, channels: &[usize], kernel: usize, rng: &mut R) -> Result<ModelGraph<T>> {
    let depth = channels.len().saturating_sub(1);
    if channels.is_empty() || len == 0 || !len.is_multiple_of(1 << depth) {
        return Err(Error::InvalidArgument(format!(
            "U-Net with {} levels needs a length divisible by {}, got {len}",
            channels.len(),
            1 << depth
        )));
    }
    let mut b = GraphBuilder::<T, R>::new(1, len, rng);
    let mut x = b.input();
    let mut cin = 1;
    let mut skips = Vec::new();
    for (i, &c) in channels[..depth].iter().enumerate() {
        let h = conv_bn_relu(&mut b, &format!("enc{i}"), x, ConvGeometry::new(cin, c, kernel));
        skips.push((h, c));
        x = b.maxpool(&format!("enc{i}.pool"), h, 2, 2);
        cin = c;
    }
    let c = channels[depth];
    x = conv_bn_relu(&mut b, "mid", x, ConvGeometry::new(cin, c, kernel));
    cin = c;
    for (i, (skip, sc)) in skips.into_iter().enumerate().rev() {
        let u = b.upsample(&format!("dec{i}.up"), x, 2);
        let cat = b.concat(&format!("dec{i}.cat"), &[u, skip]);
        x = conv_bn_relu(&mut b, &format!("dec{i}"), cat, ConvGeometry::new(cin + sc, sc, kernel));
        cin = sc;
    }
    let head = b.conv("head", x, ConvGeometry::new(cin, 1, 1));
    b.finish(head)
}

/// Seed network for `arch` over windows of `window_len` samples.
pub fn build_seed<T: Scalar, R: Rng>(
    arch: SeedArch,
    window_len: usize,
    channels: &[usize],
    kernel: usize,
    rng: &mut R,
) -> Result<ModelGraph<T>> {
    let len = arch.input_len(window_len, channels.len().saturating_sub(1));
    match arch {
        SeedArch::Resnet1d => resnet1d(len, channels, kernel, rng),
        SeedArch::Unet1d => unet1d(len, channels, kernel, rng),
    }
}
