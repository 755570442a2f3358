use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Batch-normalization behaviour of a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Normalize with the statistics of the current batch.
    Train,
    /// Normalize with the running statistics; rows are independent.
    Eval,
}

fn gaussian<T: Scalar, R: Rng + ?Sized>(len: usize, std: f64, rng: &mut R) -> Vec<T> {
    let normal = Normal::new(0.0, std).expect("positive std");
    (0..len).map(|_| T::from_f64c(normal.sample(rng))).collect()
}

#[derive(Clone, Debug)]
pub struct Conv2d<T> {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    /// (out, in * kernel * kernel), row-major.
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Scalar> Conv2d<T> {
    pub fn new<R: Rng + ?Sized>(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        std: f64,
        rng: &mut R,
    ) -> Self {
        Conv2d {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            weight: gaussian(out_channels * in_channels * kernel * kernel, std, rng),
            bias: vec![T::zero(); out_channels],
        }
    }

    pub fn output_size(&self, size: usize) -> usize {
        (size + 2 * self.padding - self.kernel) / self.stride + 1
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    fn im2col(&self, img: &[T], h: usize, w: usize, oh: usize, ow: usize, cols: &mut [T]) {
        let (k, s, p) = (self.kernel, self.stride, self.padding as isize);
        let npix = oh * ow;
        for c in 0..self.in_channels {
            let plane = &img[c * h * w..(c + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let dst = &mut cols[row * npix..(row + 1) * npix];
                    for oy in 0..oh {
                        let iy = (oy * s + ky) as isize - p;
                        let out_row = &mut dst[oy * ow..(oy + 1) * ow];
                        if iy < 0 || iy >= h as isize {
                            out_row.fill(T::zero());
                            continue;
                        }
                        let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                        for (ox, o) in out_row.iter_mut().enumerate() {
                            let ix = (ox * s + kx) as isize - p;
                            *o = if ix < 0 || ix >= w as isize {
                                T::zero()
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[T], h: usize, w: usize, oh: usize, ow: usize, img: &mut [T]) {
        let (k, s, p) = (self.kernel, self.stride, self.padding as isize);
        let npix = oh * ow;
        for c in 0..self.in_channels {
            let plane = &mut img[c * h * w..(c + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let src = &cols[row * npix..(row + 1) * npix];
                    for oy in 0..oh {
                        let iy = (oy * s + ky) as isize - p;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                        for ox in 0..ow {
                            let ix = (ox * s + kx) as isize - p;
                            if ix >= 0 && ix < w as isize {
                                dst[ix as usize] += src[oy * ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm<T> {
    pub channels: usize,
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub momentum: f64,
    pub eps: f64,
}

impl<T: Scalar> BatchNorm<T> {
    pub fn new(channels: usize) -> Self {
        BatchNorm {
            channels,
            gamma: vec![T::one(); channels],
            beta: vec![T::zero(); channels],
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            momentum: 0.1,
            eps: 1e-5,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Linear<T> {
    pub in_features: usize,
    pub out_features: usize,
    /// (out, in), row-major.
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Scalar> Linear<T> {
    pub fn new<R: Rng + ?Sized>(in_features: usize, out_features: usize, std: f64, rng: &mut R) -> Self {
        Linear {
            in_features,
            out_features,
            weight: gaussian(out_features * in_features, std, rng),
            bias: vec![T::zero(); out_features],
        }
    }
}

#[derive(Clone, Debug)]
pub enum Layer<T> {
    Conv(Conv2d<T>),
    Norm(BatchNorm<T>),
    Linear(Linear<T>),
    LeakyRelu(f64),
    Relu,
    Tanh,
    Sigmoid,
    /// Nearest-neighbour 2x spatial upsampling.
    Upsample2x,
    Flatten,
    Unflatten { channels: usize, height: usize, width: usize },
}

/// Intermediate values a layer keeps for its backward pass.
#[derive(Clone, Debug)]
pub enum Cache<T> {
    Conv {
        cols: Vec<T>,
        in_shape: Vec<usize>,
        out_hw: (usize, usize),
    },
    Norm {
        xhat: Vec<T>,
        inv_std: Vec<T>,
        batch_mean: Vec<T>,
        batch_var: Vec<T>,
        mode: Mode,
    },
    Input(Tensor<T>),
    Output(Tensor<T>),
    Shape(Vec<usize>),
}

/// (n, channels, spatial) view of an activation.
fn ncs(shape: &[usize]) -> (usize, usize, usize) {
    match shape.len() {
        2 => (shape[0], shape[1], 1),
        4 => (shape[0], shape[1], shape[2] * shape[3]),
        _ => panic!("unsupported activation rank {}", shape.len()),
    }
}

impl<T: Scalar> Layer<T> {
    /// Named parameter slices, in a fixed order.
    pub fn params(&self) -> Vec<(&'static str, &[T])> {
        match self {
            Layer::Conv(c) => vec![("weight", &c.weight), ("bias", &c.bias)],
            Layer::Norm(b) => vec![("gamma", &b.gamma), ("beta", &b.beta)],
            Layer::Linear(l) => vec![("weight", &l.weight), ("bias", &l.bias)],
            _ => vec![],
        }
    }

    pub fn params_mut(&mut self) -> Vec<(&'static str, &mut Vec<T>)> {
        match self {
            Layer::Conv(c) => vec![("weight", &mut c.weight), ("bias", &mut c.bias)],
            Layer::Norm(b) => vec![("gamma", &mut b.gamma), ("beta", &mut b.beta)],
            Layer::Linear(l) => vec![("weight", &mut l.weight), ("bias", &mut l.bias)],
            _ => vec![],
        }
    }

    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        match self {
            Layer::Conv(c) => vec![
                vec![c.out_channels, c.in_channels, c.kernel, c.kernel],
                vec![c.out_channels],
            ],
            Layer::Norm(b) => vec![vec![b.channels], vec![b.channels]],
            Layer::Linear(l) => vec![vec![l.out_features, l.in_features], vec![l.out_features]],
            _ => vec![],
        }
    }

    /// Non-trainable state (normalization running statistics).
    pub fn buffers(&self) -> Vec<(&'static str, &[T])> {
        match self {
            Layer::Norm(b) => vec![("running_mean", &b.running_mean), ("running_var", &b.running_var)],
            _ => vec![],
        }
    }

    pub fn buffers_mut(&mut self) -> Vec<(&'static str, &mut Vec<T>)> {
        match self {
            Layer::Norm(b) => vec![
                ("running_mean", &mut b.running_mean),
                ("running_var", &mut b.running_var),
            ],
            _ => vec![],
        }
    }

    pub fn output_shape(&self, in_shape: &[usize]) -> Result<Vec<usize>> {
        let bad = || Error::config(format!("layer {self:?} cannot take input shape {in_shape:?}"));
        Ok(match self {
            Layer::Conv(c) => {
                if in_shape.len() != 4 || in_shape[1] != c.in_channels || in_shape[2] + 2 * c.padding < c.kernel {
                    return Err(bad());
                }
                vec![in_shape[0], c.out_channels, c.output_size(in_shape[2]), c.output_size(in_shape[3])]
            }
            Layer::Norm(b) => {
                if in_shape.len() < 2 || in_shape[1] != b.channels {
                    return Err(bad());
                }
                in_shape.to_vec()
            }
            Layer::Linear(l) => {
                if in_shape.len() != 2 || in_shape[1] != l.in_features {
                    return Err(bad());
                }
                vec![in_shape[0], l.out_features]
            }
            Layer::Upsample2x => {
                if in_shape.len() != 4 {
                    return Err(bad());
                }
                vec![in_shape[0], in_shape[1], in_shape[2] * 2, in_shape[3] * 2]
            }
            Layer::Flatten => vec![in_shape[0], in_shape[1..].iter().product()],
            Layer::Unflatten { channels, height, width } => {
                if in_shape.len() != 2 || in_shape[1] != channels * height * width {
                    return Err(bad());
                }
                vec![in_shape[0], *channels, *height, *width]
            }
            _ => in_shape.to_vec(),
        })
    }

    pub fn forward(&self, x: Tensor<T>, mode: Mode) -> (Tensor<T>, Cache<T>) {
        match self {
            Layer::Conv(c) => conv_forward(c, x),
            Layer::Norm(b) => norm_forward(b, x, mode),
            Layer::Linear(l) => {
                let n = x.rows();
                let mut out = vec![T::zero(); n * l.out_features];
                for i in 0..n {
                    out[i * l.out_features..(i + 1) * l.out_features].copy_from_slice(&l.bias);
                }
                // out (n, out) += x (n, in) · Wᵀ (in, out)
                T::gemm(
                    n,
                    l.in_features,
                    l.out_features,
                    T::one(),
                    x.data(),
                    l.in_features as isize,
                    1,
                    &l.weight,
                    1,
                    l.in_features as isize,
                    T::one(),
                    &mut out,
                    l.out_features as isize,
                    1,
                );
                let y = Tensor::from_vec(&[n, l.out_features], out).expect("linear shape");
                (y, Cache::Input(x))
            }
            Layer::LeakyRelu(slope) => {
                let s = T::from_f64c(*slope);
                let y = x.map(|v| if v > T::zero() { v } else { v * s });
                (y, Cache::Input(x))
            }
            Layer::Relu => {
                let y = x.map(|v| v.max(T::zero()));
                (y, Cache::Input(x))
            }
            Layer::Tanh => {
                let y = x.map(|v| v.tanh());
                (y.clone(), Cache::Output(y))
            }
            Layer::Sigmoid => {
                let y = x.map(|v| T::one() / (T::one() + (-v).exp()));
                (y.clone(), Cache::Output(y))
            }
            Layer::Upsample2x => {
                let s = x.shape().to_vec();
                let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
                let mut out = Vec::with_capacity(n * c * h * w * 4);
                for plane in x.data().chunks(h * w) {
                    for y in 0..h {
                        let src = &plane[y * w..(y + 1) * w];
                        for _ in 0..2 {
                            for &v in src {
                                out.push(v);
                                out.push(v);
                            }
                        }
                    }
                }
                let y = Tensor::from_vec(&[n, c, 2 * h, 2 * w], out).expect("upsample shape");
                (y, Cache::Shape(s))
            }
            Layer::Flatten => {
                let s = x.shape().to_vec();
                let y = x.reshape(&[s[0], s[1..].iter().product()]).expect("flatten");
                (y, Cache::Shape(s))
            }
            Layer::Unflatten { channels, height, width } => {
                let s = x.shape().to_vec();
                let y = x.reshape(&[s[0], *channels, *height, *width]).expect("unflatten");
                (y, Cache::Shape(s))
            }
        }
    }

    /// Propagate `dy` through the layer, accumulating parameter gradients into
    /// `grads` (aligned with [`Layer::params`]) when given.
    pub fn backward(
        &self,
        cache: &Cache<T>,
        dy: Tensor<T>,
        grads: Option<&mut [Vec<T>]>,
        need_input_grad: bool,
    ) -> Option<Tensor<T>> {
        match (self, cache) {
            (Layer::Conv(c), Cache::Conv { cols, in_shape, out_hw }) => {
                conv_backward(c, cols, in_shape, *out_hw, &dy, grads, need_input_grad)
            }
            (Layer::Norm(b), Cache::Norm { xhat, inv_std, mode, .. }) => {
                norm_backward(b, xhat, inv_std, *mode, dy, grads, need_input_grad)
            }
            (Layer::Linear(l), Cache::Input(x)) => {
                let n = x.rows();
                if let Some(g) = grads {
                    // dW (out, in) += dyᵀ (out, n) · x (n, in)
                    T::gemm(
                        l.out_features,
                        n,
                        l.in_features,
                        T::one(),
                        dy.data(),
                        1,
                        l.out_features as isize,
                        x.data(),
                        l.in_features as isize,
                        1,
                        T::one(),
                        &mut g[0],
                        l.in_features as isize,
                        1,
                    );
                    for i in 0..n {
                        for (gb, &d) in g[1].iter_mut().zip(dy.row(i)) {
                            *gb += d;
                        }
                    }
                }
                need_input_grad.then(|| {
                    let mut dx = vec![T::zero(); n * l.in_features];
                    // dx (n, in) = dy (n, out) · W (out, in)
                    T::gemm(
                        n,
                        l.out_features,
                        l.in_features,
                        T::one(),
                        dy.data(),
                        l.out_features as isize,
                        1,
                        &l.weight,
                        l.in_features as isize,
                        1,
                        T::zero(),
                        &mut dx,
                        l.in_features as isize,
                        1,
                    );
                    Tensor::from_vec(x.shape(), dx).expect("linear grad shape")
                })
            }
            (Layer::LeakyRelu(slope), Cache::Input(x)) => {
                let s = T::from_f64c(*slope);
                need_input_grad.then(|| {
                    let mut dx = dy;
                    for (d, &v) in dx.data_mut().iter_mut().zip(x.data()) {
                        if v <= T::zero() {
                            *d *= s;
                        }
                    }
                    dx
                })
            }
            (Layer::Relu, Cache::Input(x)) => need_input_grad.then(|| {
                let mut dx = dy;
                for (d, &v) in dx.data_mut().iter_mut().zip(x.data()) {
                    if v <= T::zero() {
                        *d = T::zero();
                    }
                }
                dx
            }),
            (Layer::Tanh, Cache::Output(y)) => need_input_grad.then(|| {
                let mut dx = dy;
                for (d, &v) in dx.data_mut().iter_mut().zip(y.data()) {
                    *d *= T::one() - v * v;
                }
                dx
            }),
            (Layer::Sigmoid, Cache::Output(y)) => need_input_grad.then(|| {
                let mut dx = dy;
                for (d, &v) in dx.data_mut().iter_mut().zip(y.data()) {
                    *d *= v * (T::one() - v);
                }
                dx
            }),
            (Layer::Upsample2x, Cache::Shape(s)) => need_input_grad.then(|| {
                let (h, w) = (s[2], s[3]);
                let mut dx = vec![T::zero(); s.iter().product()];
                for (dst, src) in dx.chunks_mut(h * w).zip(dy.data().chunks(4 * h * w)) {
                    for y in 0..2 * h {
                        for x in 0..2 * w {
                            dst[(y / 2) * w + x / 2] += src[y * 2 * w + x];
                        }
                    }
                }
                Tensor::from_vec(s, dx).expect("upsample grad shape")
            }),
            (Layer::Flatten | Layer::Unflatten { .. }, Cache::Shape(s)) => {
                need_input_grad.then(|| dy.reshape(s).expect("reshape grad"))
            }
            _ => panic!("cache does not belong to this layer"),
        }
    }
}

fn conv_forward<T: Scalar>(c: &Conv2d<T>, x: Tensor<T>) -> (Tensor<T>, Cache<T>) {
    let s = x.shape().to_vec();
    let (n, h, w) = (s[0], s[2], s[3]);
    let (oh, ow) = (c.output_size(h), c.output_size(w));
    let (npix, plen) = (oh * ow, c.patch_len());
    let mut cols = vec![T::zero(); n * plen * npix];
    let mut out = vec![T::zero(); n * c.out_channels * npix];
    let in_len = c.in_channels * h * w;
    for i in 0..n {
        let col = &mut cols[i * plen * npix..(i + 1) * plen * npix];
        c.im2col(&x.data()[i * in_len..(i + 1) * in_len], h, w, oh, ow, col);
        let dst = &mut out[i * c.out_channels * npix..(i + 1) * c.out_channels * npix];
        for (o, b) in dst.chunks_mut(npix).zip(&c.bias) {
            o.fill(*b);
        }
        T::gemm(
            c.out_channels,
            plen,
            npix,
            T::one(),
            &c.weight,
            plen as isize,
            1,
            col,
            npix as isize,
            1,
            T::one(),
            dst,
            npix as isize,
            1,
        );
    }
    let y = Tensor::from_vec(&[n, c.out_channels, oh, ow], out).expect("conv shape");
    (
        y,
        Cache::Conv {
            cols,
            in_shape: s,
            out_hw: (oh, ow),
        },
    )
}

fn conv_backward<T: Scalar>(
    c: &Conv2d<T>,
    cols: &[T],
    in_shape: &[usize],
    (oh, ow): (usize, usize),
    dy: &Tensor<T>,
    grads: Option<&mut [Vec<T>]>,
    need_input_grad: bool,
) -> Option<Tensor<T>> {
    let (n, h, w) = (in_shape[0], in_shape[2], in_shape[3]);
    let (npix, plen) = (oh * ow, c.patch_len());
    let oc = c.out_channels;
    if let Some(g) = grads {
        let (gw, gb) = g.split_at_mut(1);
        for i in 0..n {
            let d = &dy.data()[i * oc * npix..(i + 1) * oc * npix];
            let col = &cols[i * plen * npix..(i + 1) * plen * npix];
            // dW (oc, plen) += dY (oc, npix) · colsᵀ (npix, plen)
            T::gemm(
                oc,
                npix,
                plen,
                T::one(),
                d,
                npix as isize,
                1,
                col,
                1,
                npix as isize,
                T::one(),
                &mut gw[0],
                plen as isize,
                1,
            );
            for (b, row) in gb[0].iter_mut().zip(d.chunks(npix)) {
                *b += row.iter().copied().sum::<T>();
            }
        }
    }
    if !need_input_grad {
        return None;
    }
    let in_len = c.in_channels * h * w;
    let mut dx = vec![T::zero(); n * in_len];
    let mut dcols = vec![T::zero(); plen * npix];
    for i in 0..n {
        let d = &dy.data()[i * oc * npix..(i + 1) * oc * npix];
        // dcols (plen, npix) = Wᵀ (plen, oc) · dY (oc, npix)
        T::gemm(
            plen,
            oc,
            npix,
            T::one(),
            &c.weight,
            1,
            plen as isize,
            d,
            npix as isize,
            1,
            T::zero(),
            &mut dcols,
            npix as isize,
            1,
        );
        c.col2im(&dcols, h, w, oh, ow, &mut dx[i * in_len..(i + 1) * in_len]);
    }
    Some(Tensor::from_vec(in_shape, dx).expect("conv grad shape"))
}

fn norm_forward<T: Scalar>(b: &BatchNorm<T>, x: Tensor<T>, mode: Mode) -> (Tensor<T>, Cache<T>) {
    let shape = x.shape().to_vec();
    let (n, c, s) = ncs(&shape);
    let count = T::from_usize(n * s).expect("count");
    let eps = T::from_f64c(b.eps);
    let data = x.data();
    let (mean, var) = match mode {
        Mode::Train => {
            let mut mean = vec![T::zero(); c];
            let mut var = vec![T::zero(); c];
            for ch in 0..c {
                let mut acc = T::zero();
                for i in 0..n {
                    let base = (i * c + ch) * s;
                    acc += data[base..base + s].iter().copied().sum::<T>();
                }
                let m = acc / count;
                let mut v = T::zero();
                for i in 0..n {
                    let base = (i * c + ch) * s;
                    v += data[base..base + s].iter().map(|&x| (x - m) * (x - m)).sum::<T>();
                }
                mean[ch] = m;
                var[ch] = v / count;
            }
            (mean, var)
        }
        Mode::Eval => (b.running_mean.clone(), b.running_var.clone()),
    };
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut xhat = vec![T::zero(); data.len()];
    let mut out = vec![T::zero(); data.len()];
    for i in 0..n {
        for ch in 0..c {
            let base = (i * c + ch) * s;
            let (m, is, g, be) = (mean[ch], inv_std[ch], b.gamma[ch], b.beta[ch]);
            for j in base..base + s {
                let xh = (data[j] - m) * is;
                xhat[j] = xh;
                out[j] = g * xh + be;
            }
        }
    }
    let y = Tensor::from_vec(&shape, out).expect("norm shape");
    (
        y,
        Cache::Norm {
            xhat,
            inv_std,
            batch_mean: mean,
            batch_var: var,
            mode,
        },
    )
}

fn norm_backward<T: Scalar>(
    b: &BatchNorm<T>,
    xhat: &[T],
    inv_std: &[T],
    mode: Mode,
    dy: Tensor<T>,
    grads: Option<&mut [Vec<T>]>,
    need_input_grad: bool,
) -> Option<Tensor<T>> {
    let shape = dy.shape().to_vec();
    let (n, c, s) = ncs(&shape);
    let d = dy.data();
    let mut sum_dy = vec![T::zero(); c];
    let mut sum_dy_xhat = vec![T::zero(); c];
    for i in 0..n {
        for ch in 0..c {
            let base = (i * c + ch) * s;
            for j in base..base + s {
                sum_dy[ch] += d[j];
                sum_dy_xhat[ch] += d[j] * xhat[j];
            }
        }
    }
    if let Some(g) = grads {
        for ch in 0..c {
            g[0][ch] += sum_dy_xhat[ch];
            g[1][ch] += sum_dy[ch];
        }
    }
    if !need_input_grad {
        return None;
    }
    let count = T::from_usize(n * s).expect("count");
    let mut dx = vec![T::zero(); d.len()];
    for i in 0..n {
        for ch in 0..c {
            let base = (i * c + ch) * s;
            let k = b.gamma[ch] * inv_std[ch];
            match mode {
                Mode::Train => {
                    let (mdy, mdyx) = (sum_dy[ch] / count, sum_dy_xhat[ch] / count);
                    for j in base..base + s {
                        dx[j] = k * (d[j] - mdy - xhat[j] * mdyx);
                    }
                }
                Mode::Eval => {
                    for j in base..base + s {
                        dx[j] = k * d[j];
                    }
                }
            }
        }
    }
    Some(Tensor::from_vec(&shape, dx).expect("norm grad shape"))
}

/// Fold the batch statistics of a training-mode pass into the running averages.
pub(crate) fn absorb_norm_stats<T: Scalar>(b: &mut BatchNorm<T>, cache: &Cache<T>, count: usize) {
    if let Cache::Norm {
        batch_mean,
        batch_var,
        mode: Mode::Train,
        ..
    } = cache
    {
        let m = T::from_f64c(b.momentum);
        let unbias = if count > 1 {
            T::from_f64c(count as f64 / (count - 1) as f64)
        } else {
            T::one()
        };
        for ch in 0..b.channels {
            b.running_mean[ch] = (T::one() - m) * b.running_mean[ch] + m * batch_mean[ch];
            b.running_var[ch] = (T::one() - m) * b.running_var[ch] + m * batch_var[ch] * unbias;
        }
    }
}
