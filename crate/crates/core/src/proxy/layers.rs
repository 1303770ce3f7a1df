//! Hand-rolled convolutional layer primitives with explicit forward passes
//! and reverse-mode derivatives, over `H x W x C` tensors in f64.
//!
//! Weight layout is `(kh, kw, cin, cout)` so the innermost products run over
//! contiguous memory. Convolutions use zero padding; transposed convolutions
//! scatter into an explicitly requested output size, which lets the decoder
//! mirror encoder feature sizes exactly for any even input.
//!
//! Each layer offers two reverse passes: `input_grad` (immutable, cotangent
//! with respect to the input only, used when the network is differentiated
//! as a frozen function) and `backward` (also accumulates parameter
//! gradients, used during training).

use ndarray::{Array1, Array3, Array4};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const LEAKY_SLOPE: f64 = 0.2;

pub fn leaky_relu(x: &Array3<f64>) -> Array3<f64> {
    x.mapv(|v| if v > 0.0 { v } else { LEAKY_SLOPE * v })
}

/// `gx = gy * f'(x)` elementwise.
pub fn leaky_relu_backward(x: &Array3<f64>, gy: &Array3<f64>) -> Array3<f64> {
    let mut gx = gy.clone();
    for (g, &v) in gx.iter_mut().zip(x.iter()) {
        if v <= 0.0 {
            *g *= LEAKY_SLOPE;
        }
    }
    gx
}

fn he_uniform(rng: &mut ChaCha8Rng, fan_in: usize) -> f64 {
    let limit = (6.0 / fan_in as f64).sqrt();
    rng.gen_range(-limit..limit)
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    /// `(kh, kw, cin, cout)`
    pub weight: Array4<f64>,
    pub bias: Array1<f64>,
    pub stride: usize,
    pub pad: usize,
    pub wgrad: Array4<f64>,
    pub bgrad: Array1<f64>,
}

impl Conv2d {
    pub fn new(kh: usize, kw: usize, cin: usize, cout: usize, stride: usize, pad: usize, rng: &mut ChaCha8Rng) -> Self {
        let fan_in = kh * kw * cin;
        let weight = Array4::from_shape_fn((kh, kw, cin, cout), |_| he_uniform(rng, fan_in));
        Conv2d {
            weight,
            bias: Array1::zeros(cout),
            stride,
            pad,
            wgrad: Array4::zeros((kh, kw, cin, cout)),
            bgrad: Array1::zeros(cout),
        }
    }

    pub fn out_spatial(&self, h: usize, w: usize) -> (usize, usize) {
        let (kh, kw, _, _) = self.weight.dim();
        (
            (h + 2 * self.pad - kh) / self.stride + 1,
            (w + 2 * self.pad - kw) / self.stride + 1,
        )
    }

    pub fn forward(&self, x: &Array3<f64>) -> Array3<f64> {
        let (h, w, cin) = x.dim();
        let (kh, kw, wcin, cout) = self.weight.dim();
        assert_eq!(cin, wcin, "channel mismatch");
        let (oh, ow) = self.out_spatial(h, w);
        let mut y = Array3::zeros((oh, ow, cout));
        let xs = x.as_slice().unwrap();
        let ws = self.weight.as_slice().unwrap();
        let bs = self.bias.as_slice().unwrap();
        let ys = y.as_slice_mut().unwrap();
        for oy in 0..oh {
            for ox in 0..ow {
                let acc = &mut ys[(oy * ow + ox) * cout..][..cout];
                acc.copy_from_slice(bs);
                for ky in 0..kh {
                    let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..kw {
                        let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let xrow = &xs[(iy as usize * w + ix as usize) * cin..][..cin];
                        let wtap = &ws[(ky * kw + kx) * cin * cout..][..cin * cout];
                        for (ci, &xv) in xrow.iter().enumerate() {
                            if xv == 0.0 {
                                continue;
                            }
                            let wrow = &wtap[ci * cout..][..cout];
                            for (a, &wv) in acc.iter_mut().zip(wrow) {
                                *a += xv * wv;
                            }
                        }
                    }
                }
            }
        }
        y
    }

    /// Cotangent with respect to the input only.
    pub fn input_grad(&self, x: &Array3<f64>, gy: &Array3<f64>) -> Array3<f64> {
        let (h, w, cin) = x.dim();
        let (kh, kw, _, cout) = self.weight.dim();
        let (oh, ow) = self.out_spatial(h, w);
        assert_eq!(gy.dim(), (oh, ow, cout), "cotangent shape mismatch");
        let mut gx = Array3::zeros((h, w, cin));
        let ws = self.weight.as_slice().unwrap();
        let gys = gy.as_slice().unwrap();
        let gxs = gx.as_slice_mut().unwrap();
        for oy in 0..oh {
            for ox in 0..ow {
                let grow = &gys[(oy * ow + ox) * cout..][..cout];
                for ky in 0..kh {
                    let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..kw {
                        let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let base = (iy as usize * w + ix as usize) * cin;
                        let tap = (ky * kw + kx) * cin * cout;
                        for ci in 0..cin {
                            let wrow = &ws[tap + ci * cout..][..cout];
                            let mut acc = 0.0;
                            for (wv, g) in wrow.iter().zip(grow) {
                                acc += wv * g;
                            }
                            gxs[base + ci] += acc;
                        }
                    }
                }
            }
        }
        gx
    }

    /// Input cotangent plus parameter gradient accumulation into
    /// `wgrad`/`bgrad`.
    pub fn backward(&mut self, x: &Array3<f64>, gy: &Array3<f64>) -> Array3<f64> {
        let (h, w, cin) = x.dim();
        let (kh, kw, _, cout) = self.weight.dim();
        let (oh, ow) = self.out_spatial(h, w);
        assert_eq!(gy.dim(), (oh, ow, cout), "cotangent shape mismatch");
        let mut gx = Array3::zeros((h, w, cin));
        let xs = x.as_slice().unwrap();
        let ws = self.weight.as_slice().unwrap();
        let gys = gy.as_slice().unwrap();
        let gxs = gx.as_slice_mut().unwrap();
        let gws = self.wgrad.as_slice_mut().unwrap();
        let gbs = self.bgrad.as_slice_mut().unwrap();
        for oy in 0..oh {
            for ox in 0..ow {
                let grow = &gys[(oy * ow + ox) * cout..][..cout];
                for (b, &g) in gbs.iter_mut().zip(grow) {
                    *b += g;
                }
                for ky in 0..kh {
                    let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..kw {
                        let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let base = (iy as usize * w + ix as usize) * cin;
                        let tap = (ky * kw + kx) * cin * cout;
                        for ci in 0..cin {
                            let wrow = &ws[tap + ci * cout..][..cout];
                            let gwrow = &mut gws[tap + ci * cout..][..cout];
                            let xv = xs[base + ci];
                            let mut acc = 0.0;
                            for ((&wv, gw), &g) in wrow.iter().zip(gwrow.iter_mut()).zip(grow) {
                                acc += wv * g;
                                *gw += xv * g;
                            }
                            gxs[base + ci] += acc;
                        }
                    }
                }
            }
        }
        gx
    }

    pub fn zero_grads(&mut self) {
        self.wgrad.fill(0.0);
        self.bgrad.fill(0.0);
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }
}

/// Stride-2 transposed convolution; forward scatters each input pixel into
/// the requested output size (2h or 2h-1 per axis).
#[derive(Debug, Clone)]
pub struct ConvTranspose2d {
    /// `(kh, kw, cin, cout)`
    pub weight: Array4<f64>,
    pub bias: Array1<f64>,
    pub stride: usize,
    pub pad: usize,
    pub wgrad: Array4<f64>,
    pub bgrad: Array1<f64>,
}

impl ConvTranspose2d {
    pub fn new(kh: usize, kw: usize, cin: usize, cout: usize, rng: &mut ChaCha8Rng) -> Self {
        let fan_in = kh * kw * cin;
        let weight = Array4::from_shape_fn((kh, kw, cin, cout), |_| he_uniform(rng, fan_in));
        ConvTranspose2d {
            weight,
            bias: Array1::zeros(cout),
            stride: 2,
            pad: 1,
            wgrad: Array4::zeros((kh, kw, cin, cout)),
            bgrad: Array1::zeros(cout),
        }
    }

    pub fn forward(&self, x: &Array3<f64>, out_hw: (usize, usize)) -> Array3<f64> {
        let (h, w, cin) = x.dim();
        let (kh, kw, _, cout) = self.weight.dim();
        let (oh, ow) = out_hw;
        let mut y = Array3::zeros((oh, ow, cout));
        {
            let bs = self.bias.as_slice().unwrap();
            let ys = y.as_slice_mut().unwrap();
            for px in 0..oh * ow {
                ys[px * cout..(px + 1) * cout].copy_from_slice(bs);
            }
        }
        let xs = x.as_slice().unwrap();
        let ws = self.weight.as_slice().unwrap();
        let ys = y.as_slice_mut().unwrap();
        for iy in 0..h {
            for ix in 0..w {
                let xrow = &xs[(iy * w + ix) * cin..][..cin];
                for ky in 0..kh {
                    let oy = (iy * self.stride + ky) as isize - self.pad as isize;
                    if oy < 0 || oy >= oh as isize {
                        continue;
                    }
                    for kx in 0..kw {
                        let ox = (ix * self.stride + kx) as isize - self.pad as isize;
                        if ox < 0 || ox >= ow as isize {
                            continue;
                        }
                        let acc = &mut ys[(oy as usize * ow + ox as usize) * cout..][..cout];
                        let wtap = &ws[(ky * kw + kx) * cin * cout..][..cin * cout];
                        for (ci, &xv) in xrow.iter().enumerate() {
                            if xv == 0.0 {
                                continue;
                            }
                            for (a, &wv) in acc.iter_mut().zip(&wtap[ci * cout..][..cout]) {
                                *a += xv * wv;
                            }
                        }
                    }
                }
            }
        }
        y
    }

    pub fn input_grad(&self, x: &Array3<f64>, gy: &Array3<f64>) -> Array3<f64> {
        let (h, w, cin) = x.dim();
        let (kh, kw, _, cout) = self.weight.dim();
        let (oh, ow, _) = gy.dim();
        let mut gx = Array3::zeros((h, w, cin));
        let ws = self.weight.as_slice().unwrap();
        let gys = gy.as_slice().unwrap();
        let gxs = gx.as_slice_mut().unwrap();
        for iy in 0..h {
            for ix in 0..w {
                let base = (iy * w + ix) * cin;
                for ky in 0..kh {
                    let oy = (iy * self.stride + ky) as isize - self.pad as isize;
                    if oy < 0 || oy >= oh as isize {
                        continue;
                    }
                    for kx in 0..kw {
                        let ox = (ix * self.stride + kx) as isize - self.pad as isize;
                        if ox < 0 || ox >= ow as isize {
                            continue;
                        }
                        let grow = &gys[(oy as usize * ow + ox as usize) * cout..][..cout];
                        let tap = (ky * kw + kx) * cin * cout;
                        for ci in 0..cin {
                            let wrow = &ws[tap + ci * cout..][..cout];
                            let mut acc = 0.0;
                            for (wv, g) in wrow.iter().zip(grow) {
                                acc += wv * g;
                            }
                            gxs[base + ci] += acc;
                        }
                    }
                }
            }
        }
        gx
    }

    pub fn backward(&mut self, x: &Array3<f64>, gy: &Array3<f64>) -> Array3<f64> {
        let (h, w, cin) = x.dim();
        let (kh, kw, _, cout) = self.weight.dim();
        let (oh, ow, _) = gy.dim();
        let mut gx = Array3::zeros((h, w, cin));
        let xs = x.as_slice().unwrap();
        let ws = self.weight.as_slice().unwrap();
        let gys = gy.as_slice().unwrap();
        let gxs = gx.as_slice_mut().unwrap();
        let gws = self.wgrad.as_slice_mut().unwrap();
        {
            let gbs = self.bgrad.as_slice_mut().unwrap();
            for px in 0..oh * ow {
                for (b, &g) in gbs.iter_mut().zip(&gys[px * cout..(px + 1) * cout]) {
                    *b += g;
                }
            }
        }
        for iy in 0..h {
            for ix in 0..w {
                let base = (iy * w + ix) * cin;
                for ky in 0..kh {
                    let oy = (iy * self.stride + ky) as isize - self.pad as isize;
                    if oy < 0 || oy >= oh as isize {
                        continue;
                    }
                    for kx in 0..kw {
                        let ox = (ix * self.stride + kx) as isize - self.pad as isize;
                        if ox < 0 || ox >= ow as isize {
                            continue;
                        }
                        let grow = &gys[(oy as usize * ow + ox as usize) * cout..][..cout];
                        let tap = (ky * kw + kx) * cin * cout;
                        for ci in 0..cin {
                            let wrow = &ws[tap + ci * cout..][..cout];
                            let gwrow = &mut gws[tap + ci * cout..][..cout];
                            let xv = xs[base + ci];
                            let mut acc = 0.0;
                            for ((&wv, gw), &g) in wrow.iter().zip(gwrow.iter_mut()).zip(grow) {
                                acc += wv * g;
                                *gw += xv * g;
                            }
                            gxs[base + ci] += acc;
                        }
                    }
                }
            }
        }
        gx
    }

    pub fn zero_grads(&mut self) {
        self.wgrad.fill(0.0);
        self.bgrad.fill(0.0);
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }
}

/// Two 3x3 convolutions with leaky-rectifier activations, combined with a
/// shortcut by element-wise sum. Variant A uses an identity shortcut
/// (equal channel counts); variant B routes the shortcut through a 1x1
/// convolution when channel counts change.
#[derive(Debug, Clone)]
pub struct ResidualBlock {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
    pub shortcut: Option<Conv2d>,
}

pub struct ResidualCache {
    pub x: Array3<f64>,
    pub pre1: Array3<f64>,
    pub act1: Array3<f64>,
    pub pre2: Array3<f64>,
}

impl ResidualBlock {
    /// Variant A: identity shortcut.
    pub fn identity(channels: usize, rng: &mut ChaCha8Rng) -> Self {
        ResidualBlock {
            conv1: Conv2d::new(3, 3, channels, channels, 1, 1, rng),
            conv2: Conv2d::new(3, 3, channels, channels, 1, 1, rng),
            shortcut: None,
        }
    }

    /// Variant B: 1x1 convolution shortcut for a channel change.
    pub fn projected(cin: usize, cout: usize, rng: &mut ChaCha8Rng) -> Self {
        ResidualBlock {
            conv1: Conv2d::new(3, 3, cin, cout, 1, 1, rng),
            conv2: Conv2d::new(3, 3, cout, cout, 1, 1, rng),
            shortcut: Some(Conv2d::new(1, 1, cin, cout, 1, 0, rng)),
        }
    }

    pub fn forward(&self, x: &Array3<f64>) -> (Array3<f64>, ResidualCache) {
        let pre1 = self.conv1.forward(x);
        let act1 = leaky_relu(&pre1);
        let pre2 = self.conv2.forward(&act1);
        let act2 = leaky_relu(&pre2);
        let short = match &self.shortcut {
            Some(conv) => conv.forward(x),
            None => x.clone(),
        };
        let out = &act2 + &short;
        (out, ResidualCache { x: x.clone(), pre1, act1, pre2 })
    }

    pub fn input_grad(&self, cache: &ResidualCache, gy: &Array3<f64>) -> Array3<f64> {
        let g2 = leaky_relu_backward(&cache.pre2, gy);
        let ga1 = self.conv2.input_grad(&cache.act1, &g2);
        let g1 = leaky_relu_backward(&cache.pre1, &ga1);
        let mut gx = self.conv1.input_grad(&cache.x, &g1);
        match &self.shortcut {
            Some(conv) => gx = gx + conv.input_grad(&cache.x, gy),
            None => gx = gx + gy,
        }
        gx
    }

    pub fn backward(&mut self, cache: &ResidualCache, gy: &Array3<f64>) -> Array3<f64> {
        let g2 = leaky_relu_backward(&cache.pre2, gy);
        let ga1 = self.conv2.backward(&cache.act1, &g2);
        let g1 = leaky_relu_backward(&cache.pre1, &ga1);
        let mut gx = self.conv1.backward(&cache.x, &g1);
        match &mut self.shortcut {
            Some(conv) => gx = gx + conv.backward(&cache.x, gy),
            None => gx = gx + gy,
        }
        gx
    }

    pub fn zero_grads(&mut self) {
        self.conv1.zero_grads();
        self.conv2.zero_grads();
        if let Some(c) = &mut self.shortcut {
            c.zero_grads();
        }
    }

    pub fn param_count(&self) -> usize {
        self.conv1.param_count()
            + self.conv2.param_count()
            + self.shortcut.as_ref().map_or(0, |c| c.param_count())
    }
}

/// Channel concatenation `[a | b]` and the matching cotangent split.
pub fn concat_channels(a: &Array3<f64>, b: &Array3<f64>) -> Array3<f64> {
    let (h, w, ca) = a.dim();
    let (_, _, cb) = b.dim();
    let mut out = Array3::zeros((h, w, ca + cb));
    out.slice_mut(ndarray::s![.., .., ..ca]).assign(a);
    out.slice_mut(ndarray::s![.., .., ca..]).assign(b);
    out
}

pub fn split_channels(g: &Array3<f64>, ca: usize) -> (Array3<f64>, Array3<f64>) {
    (
        g.slice(ndarray::s![.., .., ..ca]).to_owned(),
        g.slice(ndarray::s![.., .., ca..]).to_owned(),
    )
}
