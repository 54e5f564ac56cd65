//! Residual convolutional backbone for the wireframe detector.
//!
//! Two profiles share the code: a compact basic-block network in the
//! 18-layer family for desk-scale runs, and a bottleneck network in the
//! 50-layer family matching the scale the detector would use on real
//! corpora. Both are trained from scratch — no pretrained weights exist
//! for wireframe renders. Normalization is per-position channel
//! normalization, which keeps single-sample training well conditioned.

use ndarray::Array3;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::nn::conv::ConvCache;
use crate::nn::norm::ChannelNormCache;
use crate::nn::{ChannelNorm, Conv2d, Grads, ParamSet, Scalar};

// ============================================================================
// Residual blocks
// ============================================================================

/// conv-norm-relu-conv-norm with an identity or projected skip.
struct BasicBlock {
    conv1: Conv2d,
    norm1: ChannelNorm,
    conv2: Conv2d,
    norm2: ChannelNorm,
    proj: Option<(Conv2d, ChannelNorm)>,
}

/// 1×1 reduce, 3×3, 1×1 expand (×4), with an identity or projected skip.
struct BottleneckBlock {
    conv1: Conv2d,
    norm1: ChannelNorm,
    conv2: Conv2d,
    norm2: ChannelNorm,
    conv3: Conv2d,
    norm3: ChannelNorm,
    proj: Option<(Conv2d, ChannelNorm)>,
}

enum Block {
    Basic(BasicBlock),
    Bottleneck(BottleneckBlock),
}

struct ConvNormCache<T> {
    conv: ConvCache<T>,
    norm: ChannelNormCache<T>,
    /// Pre-ReLU activation, if a ReLU follows (its backward mask).
    pre_relu: Option<Array3<T>>,
}

pub struct BlockCache<T> {
    stages: Vec<ConvNormCache<T>>,
    proj: Option<ConvNormCache<T>>,
    /// Pre-ReLU sum of main path and skip.
    pre_out: Array3<T>,
}

pub(crate) fn relu3<T: Scalar>(x: &mut Array3<T>) {
    x.mapv_inplace(|v| if v > T::zero() { v } else { T::zero() });
}

pub(crate) fn relu3_backward<T: Scalar>(grad: &mut Array3<T>, pre: &Array3<T>) {
    ndarray::Zip::from(grad).and(pre).for_each(|g, &p| {
        if p <= T::zero() {
            *g = T::zero();
        }
    });
}

fn conv_norm_forward<T: Scalar>(
    params: &ParamSet<T>,
    conv: &Conv2d,
    norm: &ChannelNorm,
    x: &Array3<T>,
    relu: bool,
) -> (Array3<T>, ConvNormCache<T>) {
    let (c_out, c_cache) = conv.forward(params, x);
    let (mut out, n_cache) = norm.forward(params, &c_out);
    let pre_relu = relu.then(|| {
        let pre = out.clone();
        relu3(&mut out);
        pre
    });
    (out, ConvNormCache { conv: c_cache, norm: n_cache, pre_relu })
}

fn conv_norm_backward<T: Scalar>(
    params: &ParamSet<T>,
    conv: &Conv2d,
    norm: &ChannelNorm,
    cache: &ConvNormCache<T>,
    mut grad: Array3<T>,
    grads: &mut Grads<T>,
) -> Array3<T> {
    if let Some(pre) = &cache.pre_relu {
        relu3_backward(&mut grad, pre);
    }
    let d_norm = norm.backward(params, &cache.norm, &grad, grads);
    conv.backward(params, &cache.conv, &d_norm, grads)
}

impl Block {
    fn forward<T: Scalar>(
        &self,
        params: &ParamSet<T>,
        x: &Array3<T>,
    ) -> (Array3<T>, BlockCache<T>) {
        let (convs, proj): (Vec<(&Conv2d, &ChannelNorm, bool)>, _) = match self {
            Block::Basic(b) => (
                vec![(&b.conv1, &b.norm1, true), (&b.conv2, &b.norm2, false)],
                &b.proj,
            ),
            Block::Bottleneck(b) => (
                vec![
                    (&b.conv1, &b.norm1, true),
                    (&b.conv2, &b.norm2, true),
                    (&b.conv3, &b.norm3, false),
                ],
                &b.proj,
            ),
        };
        let mut stages = Vec::with_capacity(convs.len());
        let mut main = x.clone();
        for (conv, norm, relu) in convs {
            let (out, cache) = conv_norm_forward(params, conv, norm, &main, relu);
            main = out;
            stages.push(cache);
        }
        let (skip, proj_cache) = match proj {
            Some((conv, norm)) => {
                let (out, cache) = conv_norm_forward(params, conv, norm, x, false);
                (out, Some(cache))
            }
            None => (x.clone(), None),
        };
        let pre_out = main + &skip;
        let mut out = pre_out.clone();
        relu3(&mut out);
        (out, BlockCache { stages, proj: proj_cache, pre_out })
    }

    fn backward<T: Scalar>(
        &self,
        params: &ParamSet<T>,
        cache: &BlockCache<T>,
        grad_out: &Array3<T>,
        grads: &mut Grads<T>,
    ) -> Array3<T> {
        let mut grad = grad_out.clone();
        relu3_backward(&mut grad, &cache.pre_out);

        let (convs, proj): (Vec<(&Conv2d, &ChannelNorm)>, _) = match self {
            Block::Basic(b) => {
                (vec![(&b.conv1, &b.norm1), (&b.conv2, &b.norm2)], &b.proj)
            }
            Block::Bottleneck(b) => (
                vec![(&b.conv1, &b.norm1), (&b.conv2, &b.norm2), (&b.conv3, &b.norm3)],
                &b.proj,
            ),
        };
        // Main path, last stage first.
        let mut d_main = grad.clone();
        for ((conv, norm), stage) in convs.iter().zip(&cache.stages).rev() {
            d_main = conv_norm_backward(params, conv, norm, stage, d_main, grads);
        }
        // Skip path.
        let d_skip = match (proj, &cache.proj) {
            (Some((conv, norm)), Some(stage)) => {
                conv_norm_backward(params, conv, norm, stage, grad, grads)
            }
            (None, None) => grad,
            _ => unreachable!("projection cache always matches the block shape"),
        };
        d_main + &d_skip
    }
}

// ============================================================================
// The backbone
// ============================================================================

/// Stage layout: `(blocks, mid_channels, stride)` per stage; bottleneck
/// stages output `4 × mid_channels`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BackboneDepth {
    /// Basic blocks, three stages — the 18-layer family.
    Depth18,
    /// Bottleneck blocks, four stages — the 50-layer family.
    Depth50,
}

impl BackboneDepth {
    fn stages(self) -> &'static [(usize, usize, usize)] {
        match self {
            // (blocks, channel multiple of base, stride)
            BackboneDepth::Depth18 => &[(2, 1, 1), (2, 2, 2), (2, 4, 2)],
            BackboneDepth::Depth50 => &[(3, 1, 1), (4, 2, 2), (6, 4, 2), (3, 8, 2)],
        }
    }

    fn bottleneck(self) -> bool {
        matches!(self, BackboneDepth::Depth50)
    }

    /// Total spatial downscale from image to feature map.
    pub fn feature_stride(self) -> usize {
        // Stem stride 2, then each stage's stride.
        2 * self.stages().iter().map(|&(_, _, s)| s).product::<usize>()
    }
}

pub struct Backbone {
    stem: Conv2d,
    stem_norm: ChannelNorm,
    blocks: Vec<Block>,
    out_channels: usize,
}

pub struct BackboneCache<T> {
    stem: ConvNormCache<T>,
    blocks: Vec<BlockCache<T>>,
}

impl Backbone {
    pub fn init<T: Scalar, R: Rng>(
        params: &mut ParamSet<T>,
        rng: &mut R,
        name: &str,
        depth: BackboneDepth,
        base_channels: usize,
    ) -> Self {
        let stem = Conv2d::init(params, rng, &format!("{name}.stem"), 3, base_channels, 3, 2, 1);
        let stem_norm = ChannelNorm::init(params, &format!("{name}.stem_norm"), base_channels);
        let expansion = if depth.bottleneck() { 4 } else { 1 };
        let mut blocks = Vec::new();
        let mut c_in = base_channels;
        for (s, &(count, mult, stride)) in depth.stages().iter().enumerate() {
            let mid = base_channels * mult;
            let c_out = mid * expansion;
            for b in 0..count {
                let stride = if b == 0 { stride } else { 1 };
                let bname = format!("{name}.s{s}b{b}");
                let proj = (c_in != c_out || stride != 1).then(|| {
                    (
                        Conv2d::init(params, rng, &format!("{bname}.proj"), c_in, c_out, 1, stride, 0),
                        ChannelNorm::init(params, &format!("{bname}.proj_norm"), c_out),
                    )
                });
                let block = if depth.bottleneck() {
                    Block::Bottleneck(BottleneckBlock {
                        conv1: Conv2d::init(params, rng, &format!("{bname}.c1"), c_in, mid, 1, 1, 0),
                        norm1: ChannelNorm::init(params, &format!("{bname}.n1"), mid),
                        conv2: Conv2d::init(params, rng, &format!("{bname}.c2"), mid, mid, 3, stride, 1),
                        norm2: ChannelNorm::init(params, &format!("{bname}.n2"), mid),
                        conv3: Conv2d::init(params, rng, &format!("{bname}.c3"), mid, c_out, 1, 1, 0),
                        norm3: ChannelNorm::init(params, &format!("{bname}.n3"), c_out),
                        proj,
                    })
                } else {
                    Block::Basic(BasicBlock {
                        conv1: Conv2d::init(params, rng, &format!("{bname}.c1"), c_in, c_out, 3, stride, 1),
                        norm1: ChannelNorm::init(params, &format!("{bname}.n1"), c_out),
                        conv2: Conv2d::init(params, rng, &format!("{bname}.c2"), c_out, c_out, 3, 1, 1),
                        norm2: ChannelNorm::init(params, &format!("{bname}.n2"), c_out),
                        proj,
                    })
                };
                blocks.push(block);
                c_in = c_out;
            }
        }
        Self { stem, stem_norm, blocks, out_channels: c_in }
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    /// Image `[3, H, W]` to features `[C, H/stride, W/stride]`.
    pub fn forward<T: Scalar>(
        &self,
        params: &ParamSet<T>,
        image: &Array3<T>,
    ) -> (Array3<T>, BackboneCache<T>) {
        let (mut x, stem) =
            conv_norm_forward(params, &self.stem, &self.stem_norm, image, true);
        let mut caches = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (out, cache) = block.forward(params, &x);
            x = out;
            caches.push(cache);
        }
        (x, BackboneCache { stem, blocks: caches })
    }

    /// Accumulates parameter gradients; the image gradient is discarded.
    pub fn backward<T: Scalar>(
        &self,
        params: &ParamSet<T>,
        cache: &BackboneCache<T>,
        grad_out: &Array3<T>,
        grads: &mut Grads<T>,
    ) {
        let mut grad = grad_out.clone();
        for (block, bcache) in self.blocks.iter().zip(&cache.blocks).rev() {
            grad = block.backward(params, bcache, &grad, grads);
        }
        conv_norm_backward(params, &self.stem, &self.stem_norm, &cache.stem, grad, grads);
    }
}
