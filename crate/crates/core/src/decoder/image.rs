//! Convolutional encoder that turns a wireframe render into a grid of
//! image tokens for cross-attention.

use ndarray::{Array2, Array3};
use rand::Rng;

use crate::nn::conv::ConvCache;
use crate::nn::norm::ChannelNormCache;
use crate::nn::{normal_init, ChannelNorm, Conv2d, Grads, Linear, ParamId, ParamSet, Scalar};
use crate::render::WireframeImage;

/// Channel widths of the four stride-2 blocks (input is RGB).
const BLOCK_CHANNELS: [usize; 4] = [16, 32, 64, 128];

/// Spatial downscale factor of the full stack (2^4).
pub const DOWNSCALE: usize = 16;

/// Four stride-2 conv blocks (conv → channel norm → ReLU) followed by a
/// linear projection to the decoder width and a learned 2D position
/// embedding. An `image_size`-pixel input becomes `(image_size/16)^2`
/// tokens.
#[derive(Debug, Clone)]
pub struct ImageEncoder {
    blocks: Vec<(Conv2d, ChannelNorm)>,
    proj: Linear,
    pos2d: ParamId,
    image_size: usize,
    grid: usize,
}

#[derive(Debug)]
pub struct ImageEncoderCache<T> {
    blocks: Vec<BlockCache<T>>,
    /// Flattened `[grid*grid, channels]` input to the projection.
    flat: Array2<T>,
}

#[derive(Debug)]
struct BlockCache<T> {
    conv: ConvCache<T>,
    norm: ChannelNormCache<T>,
    pre_relu: Array3<T>,
}

impl ImageEncoder {
    pub fn init<T: Scalar, R: Rng>(
        params: &mut ParamSet<T>,
        rng: &mut R,
        name: &str,
        image_size: usize,
        model_dim: usize,
    ) -> Self {
        assert!(
            image_size % DOWNSCALE == 0,
            "image size {image_size} must be a multiple of {DOWNSCALE}"
        );
        let grid = image_size / DOWNSCALE;
        let mut blocks = Vec::with_capacity(BLOCK_CHANNELS.len());
        let mut c_in = 3;
        for (i, &c_out) in BLOCK_CHANNELS.iter().enumerate() {
            let conv = Conv2d::init(params, rng, &format!("{name}.conv{i}"), c_in, c_out, 3, 2, 1);
            let norm = ChannelNorm::init(params, &format!("{name}.norm{i}"), c_out);
            blocks.push((conv, norm));
            c_in = c_out;
        }
        let proj = Linear::init(params, rng, &format!("{name}.proj"), c_in, model_dim, true);
        let pos2d = params.add(
            format!("{name}.pos2d"),
            normal_init(rng, &[grid * grid, model_dim], 0.02),
        );
        Self { blocks, proj, pos2d, image_size, grid }
    }

    /// Number of image tokens produced per wireframe.
    pub fn num_tokens(&self) -> usize {
        self.grid * self.grid
    }

    pub fn image_size(&self) -> usize {
        self.image_size
    }

    /// Converts an interleaved-RGB wireframe into a channels-first tensor.
    fn to_chw<T: Scalar>(image: &WireframeImage) -> Array3<T> {
        let (h, w) = (image.height(), image.width());
        let view = image.view();
        Array3::from_shape_fn((3, h, w), |(c, y, x)| T::from_f64_lossy(view[[y, x, c]] as f64))
    }

    pub fn forward<T: Scalar>(
        &self,
        params: &ParamSet<T>,
        image: &WireframeImage,
    ) -> (Array2<T>, ImageEncoderCache<T>) {
        assert_eq!(
            (image.height(), image.width()),
            (self.image_size, self.image_size),
            "wireframe resolution disagrees with the encoder configuration"
        );
        let mut x = Self::to_chw::<T>(image);
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for (conv, norm) in &self.blocks {
            let (c_out, conv_cache) = conv.forward(params, &x);
            let (n_out, norm_cache) = norm.forward(params, &c_out);
            x = n_out.mapv(|v| v.max(T::zero()));
            blocks.push(BlockCache { conv: conv_cache, norm: norm_cache, pre_relu: n_out });
        }
        let (c, gh, gw) = x.dim();
        debug_assert_eq!((gh, gw), (self.grid, self.grid));
        let flat = x
            .into_shape_with_order((c, gh * gw))
            .expect("standard layout")
            .t()
            .as_standard_layout()
            .to_owned();
        let mut tokens = self.proj.forward(params, &flat);
        tokens += &params.get2(self.pos2d);
        (tokens, ImageEncoderCache { blocks, flat })
    }

    /// Backpropagates into every encoder parameter. The pixel gradient is
    /// discarded — the wireframe is an input, not a learnable tensor.
    pub fn backward<T: Scalar>(
        &self,
        params: &ParamSet<T>,
        cache: &ImageEncoderCache<T>,
        grad_tokens: &Array2<T>,
        grads: &mut Grads<T>,
    ) {
        grads.accumulate(self.pos2d, grad_tokens.clone().into_dyn());
        let d_flat = self.proj.backward(params, &cache.flat, grad_tokens, grads);
        let g = self.grid;
        let c = cache.flat.ncols();
        let mut dx = d_flat
            .t()
            .as_standard_layout()
            .to_owned()
            .into_shape_with_order((c, g, g))
            .expect("grid reshape");
        for ((conv, norm), block) in self.blocks.iter().zip(cache.blocks.iter()).rev() {
            ndarray::Zip::from(&mut dx)
                .and(&block.pre_relu)
                .for_each(|d, &pre| {
                    if pre <= T::zero() {
                        *d = T::zero();
                    }
                });
            let d_norm = norm.backward(params, &block.norm, &dx, grads);
            dx = conv.backward(params, &block.conv, &d_norm, grads);
        }
    }
}
