//! The two-block sparse convolutional stem that replaces ViT's
//! patch-and-embed layer, plus the plain patchify baseline used by the
//! tokenizer ablation. Total spatial downsampling is exactly 16, so a
//! 16x16 pixel hole maps to exactly one inactive token.

use crate::error::{Error, Result};
use crate::module::impl_module;
use crate::sparse::{
    conv_activity, pool_activity, sparse_conv2d, sparse_max_blur_pool, sparse_relu, ActivityMap,
    MaskedFeatureMap,
};
use crate::tensor::{add_bias, matmul, reshape, transpose2, Scalar, Tensor};
use rand::Rng;

pub const PATCH: usize = 16;
const CONV_KERNEL: usize = 7;
const CONV_STRIDE: usize = 2;
const CONV_PADDING: usize = 3;
const POOL_KERNEL: usize = 3;
const POOL_STRIDE: usize = 2;

/// Stem layer table: conv(3 -> mid, K7 S2 P3), relu, maxblurpool(K3 S2),
/// conv(mid -> d, K7 S2 P3), relu, maxblurpool(K3 S2).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StemConfig {
    pub in_channels: usize,
    pub mid_channels: usize,
    pub embed_dim: usize,
}

impl StemConfig {
    pub fn new(embed_dim: usize) -> Self {
        StemConfig { in_channels: 3, mid_channels: 64, embed_dim }
    }

    /// Exact parameter count of the stem.
    pub fn param_count(&self) -> usize {
        let k2 = CONV_KERNEL * CONV_KERNEL;
        self.in_channels * self.mid_channels * k2
            + self.mid_channels
            + self.mid_channels * self.embed_dim * k2
            + self.embed_dim
    }
}

#[derive(Debug, Clone)]
pub struct ConvLayer<T: Scalar> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl_module!(ConvLayer { params: [weight, bias], children: [], copy: [] });

impl<T: Scalar> ConvLayer<T> {
    /// Centered uniform fan-in init: U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
    fn init<R: Rng>(cin: usize, cout: usize, k: usize, rng: &mut R) -> Self {
        let fan_in = (cin * k * k) as f64;
        let bound = 1.0 / fan_in.sqrt();
        let weight = Tensor::from_vec(
            (0..cout * cin * k * k)
                .map(|_| T::from_f64(rng.random_range(-bound..bound)))
                .collect(),
            &[cout, cin, k, k],
        )
        .expect("init shape");
        let bias = Tensor::from_vec(
            (0..cout).map(|_| T::from_f64(rng.random_range(-bound..bound))).collect(),
            &[cout],
        )
        .expect("init shape");
        ConvLayer { weight, bias }
    }
}

/// The sparse convolutional tokenizer stem.
#[derive(Debug, Clone)]
pub struct Stem<T: Scalar> {
    pub conv1: ConvLayer<T>,
    pub conv2: ConvLayer<T>,
    pub cfg: StemConfig,
}

impl_module!(Stem { params: [], children: [conv1, conv2], copy: [cfg] });

impl<T: Scalar> Stem<T> {
    pub fn init<R: Rng>(cfg: StemConfig, rng: &mut R) -> Self {
        Stem {
            conv1: ConvLayer::init(cfg.in_channels, cfg.mid_channels, CONV_KERNEL, rng),
            conv2: ConvLayer::init(cfg.mid_channels, cfg.embed_dim, CONV_KERNEL, rng),
            cfg,
        }
    }

    /// Run the six-layer stem on a (possibly holed) image.
    pub fn forward(&self, x: &MaskedFeatureMap<T>) -> Result<MaskedFeatureMap<T>> {
        let x = sparse_conv2d(x, &self.conv1.weight, &self.conv1.bias, CONV_STRIDE, CONV_PADDING)?;
        let x = sparse_relu(&x);
        let x = sparse_max_blur_pool(&x, POOL_KERNEL, POOL_STRIDE)?;
        let x = sparse_conv2d(&x, &self.conv2.weight, &self.conv2.bias, CONV_STRIDE, CONV_PADDING)?;
        let x = sparse_relu(&x);
        sparse_max_blur_pool(&x, POOL_KERNEL, POOL_STRIDE)
    }

    /// Tokenize to a row-major `[N, d]` token matrix plus the per-token
    /// activity flags (true = token produced from visible content).
    pub fn tokenize(&self, x: &MaskedFeatureMap<T>) -> Result<(Tensor<T>, Vec<bool>)> {
        let (h, w) = (x.active.h, x.active.w);
        if h % PATCH != 0 || w % PATCH != 0 {
            return Err(Error::Geometry(format!(
                "image {h}x{w} not divisible by patch size {PATCH}"
            )));
        }
        let out = self.forward(x)?;
        let (gh, gw) = (out.active.h, out.active.w);
        debug_assert_eq!((gh, gw), (h / PATCH, w / PATCH));
        let d = self.cfg.embed_dim;
        // [d, gh, gw] -> [d, N] -> [N, d], row-major over (gh, gw)
        let flat = reshape(&out.features, &[d, gh * gw])?;
        let tokens = transpose2(&flat)?;
        Ok((tokens, out.active.cells().to_vec()))
    }

    /// Activity propagation only: what `forward` would report as the output
    /// activity, without computing any features.
    pub fn output_activity(&self, input: &ActivityMap) -> ActivityMap {
        let a = conv_activity(input, CONV_KERNEL, CONV_STRIDE, CONV_PADDING);
        let a = pool_activity(&a);
        let a = conv_activity(&a, CONV_KERNEL, CONV_STRIDE, CONV_PADDING);
        pool_activity(&a)
    }
}

/// Standard ViT patchify-and-project, the "no sparse stem" ablation
/// tokenizer: P x P non-overlapping patches, each linearly projected to d.
#[derive(Debug, Clone)]
pub struct PatchEmbed<T: Scalar> {
    pub weight: Tensor<T>, // [P*P*C, d]
    pub bias: Tensor<T>,   // [d]
    pub patch: usize,
}

impl_module!(PatchEmbed { params: [weight, bias], children: [], copy: [patch] });

impl<T: Scalar> PatchEmbed<T> {
    pub fn init<R: Rng>(patch: usize, channels: usize, d: usize, rng: &mut R) -> Self {
        let fan_in = (patch * patch * channels) as f64;
        let bound = 1.0 / fan_in.sqrt();
        let weight = Tensor::from_vec(
            (0..patch * patch * channels * d)
                .map(|_| T::from_f64(rng.random_range(-bound..bound)))
                .collect(),
            &[patch * patch * channels, d],
        )
        .expect("init shape");
        PatchEmbed { weight, bias: Tensor::zeros(&[d]), patch }
    }

    /// `[C, H, W]` image -> `[N, d]` embeddings, N = HW / P^2.
    pub fn forward(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        let &[c, h, w] = image.shape() else {
            return Err(Error::Dim(format!("expected [C, H, W] image, got {:?}", image.shape())));
        };
        let p = self.patch;
        if h % p != 0 || w % p != 0 {
            return Err(Error::Geometry(format!(
                "image {h}x{w} not divisible by patch size {p}"
            )));
        }
        let (gh, gw) = (h / p, w / p);
        let n = gh * gw;
        // unfold to [N, P*P*C]: per patch, channel-major then row-major pixels
        let xd = image.data();
        let mut patches = Vec::with_capacity(n * p * p * c);
        for gy in 0..gh {
            for gx in 0..gw {
                for ch in 0..c {
                    for py in 0..p {
                        for px in 0..p {
                            patches.push(xd[ch * h * w + (gy * p + py) * w + gx * p + px]);
                        }
                    }
                }
            }
        }
        let unfolded = Tensor::from_vec(patches, &[n, p * p * c])?;
        add_bias(&matmul(&unfolded, &self.weight)?, &self.bias)
    }
}
