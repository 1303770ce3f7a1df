//! Encoder–decoder network that learns to imitate an opaque camera pipeline
//! from RAW/RGB pairs, and then stands in for it during gradient-based
//! optimization.
//!
//! Layout: 5x5 input convolution to 16 channels, two encoder levels (residual
//! block, then stride-2 convolution doubling channels 16→32→64), two residual
//! blocks at the bottleneck, two decoder levels (stride-2 transposed
//! convolution halving channels, concatenation with the mirrored encoder
//! feature, 3x3 fusion convolution), and a 3x3 output convolution to 3
//! channels. Leaky rectifier (slope 0.2) follows every convolution except the
//! output one. No normalization layers; fully convolutional.

use ndarray::{Array2, Array3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::layers::{
    concat_channels, leaky_relu, leaky_relu_backward, split_channels, Conv2d, ConvTranspose2d,
    ResidualBlock, ResidualCache,
};
use crate::attack::GradientOracle;
use crate::error::{Error, Result};
use crate::image::{RawImage, RgbImage};

pub const MIN_PROXY_SIZE: usize = 16;

#[derive(Debug, Clone)]
pub struct ProxyModel {
    pub seed: u64,
    pub conv_in: Conv2d,
    pub enc1: ResidualBlock,
    pub down1: Conv2d,
    pub enc2: ResidualBlock,
    pub down2: Conv2d,
    pub bott1: ResidualBlock,
    pub bott2: ResidualBlock,
    pub up1: ConvTranspose2d,
    pub fuse1: Conv2d,
    pub up2: ConvTranspose2d,
    pub fuse2: Conv2d,
    pub conv_out: Conv2d,
}

/// Every intermediate needed to run the reverse pass.
pub struct ProxyCache {
    pub x0: Array3<f64>,
    pub pre0: Array3<f64>,
    pub a0: Array3<f64>,
    pub e1: Array3<f64>,
    pub c_e1: ResidualCache,
    pub pre_d1: Array3<f64>,
    pub a1: Array3<f64>,
    pub e2: Array3<f64>,
    pub c_e2: ResidualCache,
    pub pre_d2: Array3<f64>,
    pub a2: Array3<f64>,
    pub c_b1: ResidualCache,
    pub b1: Array3<f64>,
    pub c_b2: ResidualCache,
    pub b2: Array3<f64>,
    pub pre_u1: Array3<f64>,
    pub cat1: Array3<f64>,
    pub pre_f1: Array3<f64>,
    pub f1: Array3<f64>,
    pub pre_u2: Array3<f64>,
    pub cat2: Array3<f64>,
    pub pre_f2: Array3<f64>,
    pub f2: Array3<f64>,
}

impl ProxyModel {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ProxyModel {
            seed,
            conv_in: Conv2d::new(5, 5, 1, 16, 1, 2, &mut rng),
            enc1: ResidualBlock::identity(16, &mut rng),
            down1: Conv2d::new(3, 3, 16, 32, 2, 1, &mut rng),
            enc2: ResidualBlock::identity(32, &mut rng),
            down2: Conv2d::new(3, 3, 32, 64, 2, 1, &mut rng),
            bott1: ResidualBlock::identity(64, &mut rng),
            bott2: ResidualBlock::identity(64, &mut rng),
            up1: ConvTranspose2d::new(3, 3, 64, 32, &mut rng),
            fuse1: Conv2d::new(3, 3, 64, 32, 1, 1, &mut rng),
            up2: ConvTranspose2d::new(3, 3, 32, 16, &mut rng),
            fuse2: Conv2d::new(3, 3, 32, 16, 1, 1, &mut rng),
            conv_out: Conv2d::new(3, 3, 16, 3, 1, 1, &mut rng),
        }
    }

    fn validate_input(raw: &RawImage) -> Result<()> {
        let (h, w) = raw.data.dim();
        if h < MIN_PROXY_SIZE || w < MIN_PROXY_SIZE || h % 2 != 0 || w % 2 != 0 {
            return Err(Error::Config(format!(
                "proxy input must be even-sized and at least {MIN_PROXY_SIZE}x{MIN_PROXY_SIZE}, got {h}x{w}"
            )));
        }
        Ok(())
    }

    /// Normalized single-channel plane fed to the network.
    fn normalize(raw: &RawImage) -> Array3<f64> {
        let (h, w) = raw.data.dim();
        let span = raw.white_level - raw.black_level;
        let mut x = Array3::zeros((h, w, 1));
        for ((i, j), &v) in raw.data.indexed_iter() {
            x[[i, j, 0]] = (v - raw.black_level) / span;
        }
        x
    }

    pub fn forward_with_cache(&self, raw: &RawImage) -> Result<(Array3<f64>, ProxyCache)> {
        Self::validate_input(raw)?;
        let x0 = Self::normalize(raw);
        let pre0 = self.conv_in.forward(&x0);
        let a0 = leaky_relu(&pre0);
        let (e1, c_e1) = self.enc1.forward(&a0);
        let pre_d1 = self.down1.forward(&e1);
        let a1 = leaky_relu(&pre_d1);
        let (e2, c_e2) = self.enc2.forward(&a1);
        let pre_d2 = self.down2.forward(&e2);
        let a2 = leaky_relu(&pre_d2);
        let (b1, c_b1) = self.bott1.forward(&a2);
        let (b2, c_b2) = self.bott2.forward(&b1);
        let (h2, w2, _) = e2.dim();
        let pre_u1 = self.up1.forward(&b2, (h2, w2));
        let u1 = leaky_relu(&pre_u1);
        let cat1 = concat_channels(&u1, &e2);
        let pre_f1 = self.fuse1.forward(&cat1);
        let f1 = leaky_relu(&pre_f1);
        let (h1, w1, _) = e1.dim();
        let pre_u2 = self.up2.forward(&f1, (h1, w1));
        let u2 = leaky_relu(&pre_u2);
        let cat2 = concat_channels(&u2, &e1);
        let pre_f2 = self.fuse2.forward(&cat2);
        let f2 = leaky_relu(&pre_f2);
        let out = self.conv_out.forward(&f2);
        Ok((
            out,
            ProxyCache {
                x0,
                pre0,
                a0,
                e1,
                c_e1,
                pre_d1,
                a1,
                e2,
                c_e2,
                pre_d2,
                a2,
                c_b1,
                b1,
                c_b2,
                b2,
                pre_u1,
                cat1,
                pre_f1,
                f1,
                pre_u2,
                cat2,
                pre_f2,
                f2,
            },
        ))
    }

    /// Unclamped network output (used for losses and gradients).
    pub fn forward_unclamped(&self, raw: &RawImage) -> Result<Array3<f64>> {
        Ok(self.forward_with_cache(raw)?.0)
    }

    /// Clamped RGB prediction.
    pub fn forward(&self, raw: &RawImage) -> Result<RgbImage> {
        let out = self.forward_unclamped(raw)?;
        Ok(RgbImage::new(out)?.clamped())
    }

    fn grad_to_raw(&self, raw: &RawImage, gx0: &Array3<f64>) -> Array2<f64> {
        // chain through the (x - black) / (white - black) normalization
        let span = raw.white_level - raw.black_level;
        let (h, w, _) = gx0.dim();
        Array2::from_shape_fn((h, w), |(i, j)| gx0[[i, j, 0]] / span)
    }

    /// Gradient with respect to the raw input for a frozen model.
    pub fn input_grad(&self, cache: &ProxyCache, grad_rgb: &Array3<f64>) -> Array3<f64> {
        let g_f2 = self.conv_out.input_grad(&cache.f2, grad_rgb);
        let g_pre_f2 = leaky_relu_backward(&cache.pre_f2, &g_f2);
        let g_cat2 = self.fuse2.input_grad(&cache.cat2, &g_pre_f2);
        let (g_u2, g_e1_skip) = split_channels(&g_cat2, 16);
        let g_pre_u2 = leaky_relu_backward(&cache.pre_u2, &g_u2);
        let g_f1 = self.up2.input_grad(&cache.f1, &g_pre_u2);
        let g_pre_f1 = leaky_relu_backward(&cache.pre_f1, &g_f1);
        let g_cat1 = self.fuse1.input_grad(&cache.cat1, &g_pre_f1);
        let (g_u1, g_e2_skip) = split_channels(&g_cat1, 32);
        let g_pre_u1 = leaky_relu_backward(&cache.pre_u1, &g_u1);
        let g_b2 = self.up1.input_grad(&cache.b2, &g_pre_u1);
        let g_b1 = self.bott2.input_grad(&cache.c_b2, &g_b2);
        let g_a2 = self.bott1.input_grad(&cache.c_b1, &g_b1);
        let g_pre_d2 = leaky_relu_backward(&cache.pre_d2, &g_a2);
        let g_e2 = self.down2.input_grad(&cache.e2, &g_pre_d2) + g_e2_skip;
        let g_a1 = self.enc2.input_grad(&cache.c_e2, &g_e2);
        let g_pre_d1 = leaky_relu_backward(&cache.pre_d1, &g_a1);
        let g_e1 = self.down1.input_grad(&cache.e1, &g_pre_d1) + g_e1_skip;
        let g_a0 = self.enc1.input_grad(&cache.c_e1, &g_e1);
        let g_pre0 = leaky_relu_backward(&cache.pre0, &g_a0);
        self.conv_in.input_grad(&cache.x0, &g_pre0)
    }

    /// Reverse pass for training: accumulates parameter gradients into every
    /// layer's grad buffers.
    pub fn backward(&mut self, cache: &ProxyCache, grad_rgb: &Array3<f64>) {
        let g_f2 = self.conv_out.backward(&cache.f2, grad_rgb);
        let g_pre_f2 = leaky_relu_backward(&cache.pre_f2, &g_f2);
        let g_cat2 = self.fuse2.backward(&cache.cat2, &g_pre_f2);
        let (g_u2, g_e1_skip) = split_channels(&g_cat2, 16);
        let g_pre_u2 = leaky_relu_backward(&cache.pre_u2, &g_u2);
        let g_f1 = self.up2.backward(&cache.f1, &g_pre_u2);
        let g_pre_f1 = leaky_relu_backward(&cache.pre_f1, &g_f1);
        let g_cat1 = self.fuse1.backward(&cache.cat1, &g_pre_f1);
        let (g_u1, g_e2_skip) = split_channels(&g_cat1, 32);
        let g_pre_u1 = leaky_relu_backward(&cache.pre_u1, &g_u1);
        let g_b2 = self.up1.backward(&cache.b2, &g_pre_u1);
        let g_b1 = self.bott2.backward(&cache.c_b2, &g_b2);
        let g_a2 = self.bott1.backward(&cache.c_b1, &g_b1);
        let g_pre_d2 = leaky_relu_backward(&cache.pre_d2, &g_a2);
        let g_e2 = self.down2.backward(&cache.e2, &g_pre_d2) + g_e2_skip;
        let g_a1 = self.enc2.backward(&cache.c_e2, &g_e2);
        let g_pre_d1 = leaky_relu_backward(&cache.pre_d1, &g_a1);
        let g_e1 = self.down1.backward(&cache.e1, &g_pre_d1) + g_e1_skip;
        let g_a0 = self.enc1.backward(&cache.c_e1, &g_e1);
        let g_pre0 = leaky_relu_backward(&cache.pre0, &g_a0);
        let _ = self.conv_in.backward(&cache.x0, &g_pre0);
    }

    pub fn zero_grads(&mut self) {
        self.conv_in.zero_grads();
        self.enc1.zero_grads();
        self.down1.zero_grads();
        self.enc2.zero_grads();
        self.down2.zero_grads();
        self.bott1.zero_grads();
        self.bott2.zero_grads();
        self.up1.zero_grads();
        self.fuse1.zero_grads();
        self.up2.zero_grads();
        self.fuse2.zero_grads();
        self.conv_out.zero_grads();
    }

    pub fn param_count(&self) -> usize {
        self.conv_in.param_count()
            + self.enc1.param_count()
            + self.down1.param_count()
            + self.enc2.param_count()
            + self.down2.param_count()
            + self.bott1.param_count()
            + self.bott2.param_count()
            + self.up1.param_count()
            + self.fuse1.param_count()
            + self.up2.param_count()
            + self.fuse2.param_count()
            + self.conv_out.param_count()
    }

    /// Named parameter tensors in checkpoint order.
    pub fn tensors(&self) -> Vec<(String, Vec<usize>, &[f64])> {
        let mut out: Vec<(String, Vec<usize>, &[f64])> = Vec::new();
        fn push_conv<'a>(name: &str, c: &'a Conv2d, out: &mut Vec<(String, Vec<usize>, &'a [f64])>) {
            out.push((format!("{name}.weight"), c.weight.shape().to_vec(), c.weight.as_slice().unwrap()));
            out.push((format!("{name}.bias"), c.bias.shape().to_vec(), c.bias.as_slice().unwrap()));
        }
        fn push_tconv<'a>(name: &str, c: &'a ConvTranspose2d, out: &mut Vec<(String, Vec<usize>, &'a [f64])>) {
            out.push((format!("{name}.weight"), c.weight.shape().to_vec(), c.weight.as_slice().unwrap()));
            out.push((format!("{name}.bias"), c.bias.shape().to_vec(), c.bias.as_slice().unwrap()));
        }
        fn push_block<'a>(name: &str, b: &'a ResidualBlock, out: &mut Vec<(String, Vec<usize>, &'a [f64])>) {
            push_conv(&format!("{name}.conv1"), &b.conv1, out);
            push_conv(&format!("{name}.conv2"), &b.conv2, out);
            if let Some(s) = &b.shortcut {
                push_conv(&format!("{name}.shortcut"), s, out);
            }
        }
        push_conv("conv_in", &self.conv_in, &mut out);
        push_block("enc1", &self.enc1, &mut out);
        push_conv("down1", &self.down1, &mut out);
        push_block("enc2", &self.enc2, &mut out);
        push_conv("down2", &self.down2, &mut out);
        push_block("bott1", &self.bott1, &mut out);
        push_block("bott2", &self.bott2, &mut out);
        push_tconv("up1", &self.up1, &mut out);
        push_conv("fuse1", &self.fuse1, &mut out);
        push_tconv("up2", &self.up2, &mut out);
        push_conv("fuse2", &self.fuse2, &mut out);
        push_conv("conv_out", &self.conv_out, &mut out);
        out
    }

    /// Mutable parameter tensors in the same order as `tensors`.
    pub fn tensors_mut(&mut self) -> Vec<(String, Vec<usize>, &mut [f64])> {
        let mut out: Vec<(String, Vec<usize>, &mut [f64])> = Vec::new();
        fn push_conv<'a>(name: &str, c: &'a mut Conv2d, out: &mut Vec<(String, Vec<usize>, &'a mut [f64])>) {
            out.push((format!("{name}.weight"), c.weight.shape().to_vec(), c.weight.as_slice_mut().unwrap()));
            out.push((format!("{name}.bias"), c.bias.shape().to_vec(), c.bias.as_slice_mut().unwrap()));
        }
        fn push_tconv<'a>(name: &str, c: &'a mut ConvTranspose2d, out: &mut Vec<(String, Vec<usize>, &'a mut [f64])>) {
            out.push((format!("{name}.weight"), c.weight.shape().to_vec(), c.weight.as_slice_mut().unwrap()));
            out.push((format!("{name}.bias"), c.bias.shape().to_vec(), c.bias.as_slice_mut().unwrap()));
        }
        fn push_block<'a>(name: &str, b: &'a mut ResidualBlock, out: &mut Vec<(String, Vec<usize>, &'a mut [f64])>) {
            push_conv(&format!("{name}.conv1"), &mut b.conv1, out);
            push_conv(&format!("{name}.conv2"), &mut b.conv2, out);
            if let Some(s) = &mut b.shortcut {
                push_conv(&format!("{name}.shortcut"), s, out);
            }
        }
        push_conv("conv_in", &mut self.conv_in, &mut out);
        push_block("enc1", &mut self.enc1, &mut out);
        push_conv("down1", &mut self.down1, &mut out);
        push_block("enc2", &mut self.enc2, &mut out);
        push_conv("down2", &mut self.down2, &mut out);
        push_block("bott1", &mut self.bott1, &mut out);
        push_block("bott2", &mut self.bott2, &mut out);
        push_tconv("up1", &mut self.up1, &mut out);
        push_conv("fuse1", &mut self.fuse1, &mut out);
        push_tconv("up2", &mut self.up2, &mut out);
        push_conv("fuse2", &mut self.fuse2, &mut out);
        push_conv("conv_out", &mut self.conv_out, &mut out);
        out
    }

    /// (parameter, gradient) slice pairs in a fixed order for the optimizer.
    pub fn params_and_grads(&mut self) -> Vec<(&mut [f64], &mut [f64])> {
        let mut out: Vec<(&mut [f64], &mut [f64])> = Vec::new();
        fn push_conv<'a>(c: &'a mut Conv2d, out: &mut Vec<(&'a mut [f64], &'a mut [f64])>) {
            out.push((c.weight.as_slice_mut().unwrap(), c.wgrad.as_slice_mut().unwrap()));
            out.push((c.bias.as_slice_mut().unwrap(), c.bgrad.as_slice_mut().unwrap()));
        }
        fn push_tconv<'a>(c: &'a mut ConvTranspose2d, out: &mut Vec<(&'a mut [f64], &'a mut [f64])>) {
            out.push((c.weight.as_slice_mut().unwrap(), c.wgrad.as_slice_mut().unwrap()));
            out.push((c.bias.as_slice_mut().unwrap(), c.bgrad.as_slice_mut().unwrap()));
        }
        fn push_block<'a>(b: &'a mut ResidualBlock, out: &mut Vec<(&'a mut [f64], &'a mut [f64])>) {
            push_conv(&mut b.conv1, out);
            push_conv(&mut b.conv2, out);
            if let Some(s) = &mut b.shortcut {
                push_conv(s, out);
            }
        }
        push_conv(&mut self.conv_in, &mut out);
        push_block(&mut self.enc1, &mut out);
        push_conv(&mut self.down1, &mut out);
        push_block(&mut self.enc2, &mut out);
        push_conv(&mut self.down2, &mut out);
        push_block(&mut self.bott1, &mut out);
        push_block(&mut self.bott2, &mut out);
        push_tconv(&mut self.up1, &mut out);
        push_conv(&mut self.fuse1, &mut out);
        push_tconv(&mut self.up2, &mut out);
        push_conv(&mut self.fuse2, &mut out);
        push_conv(&mut self.conv_out, &mut out);
        out
    }

    /// Chebyshev radius, in input pixels, outside which a single output
    /// pixel's gradient must be exactly zero. Derived by walking the layer
    /// list: a k-wide convolution on a grid with spacing j adds ((k-1)/2)*j,
    /// a stride-2 convolution doubles j, a stride-2 transposed convolution
    /// halves it and adds half the coarse spacing.
    pub fn receptive_radius() -> usize {
        let mut j = 1usize; // grid spacing in input pixels
        let mut r = 0usize;
        r += 2 * j; // conv_in 5x5
        r += 2 * j; // enc1: two 3x3
        r += j; // down1 kernel
        j *= 2;
        r += 2 * j; // enc2
        r += j; // down2 kernel
        j *= 2;
        r += 4 * j; // bott1 + bott2: four 3x3
        j /= 2;
        r += j; // up1 spread onto the finer grid
        r += j; // fuse1
        j /= 2;
        r += j; // up2
        r += j; // fuse2
        r += j; // conv_out
        r
    }
}

impl GradientOracle for ProxyModel {
    fn forward_unclamped(&self, raw: &RawImage) -> Result<Array3<f64>> {
        ProxyModel::forward_unclamped(self, raw)
    }

    fn vjp(&self, raw: &RawImage, grad_rgb: &Array3<f64>) -> Result<Array2<f64>> {
        let (out, cache) = self.forward_with_cache(raw)?;
        if grad_rgb.dim() != out.dim() {
            return Err(Error::shape(format!("{:?}", out.dim()), format!("{:?}", grad_rgb.dim())));
        }
        let gx0 = self.input_grad(&cache, grad_rgb);
        Ok(self.grad_to_raw(raw, &gx0))
    }
}
