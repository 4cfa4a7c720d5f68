use rand::Rng;

use super::real::gemm;
use super::{Real, Tensor};
use crate::error::{Error, Result};

/// A trainable array and its accumulated gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub value: Vec<T>,
    pub grad: Vec<T>,
}

impl<T: Real> Param<T> {
    pub fn new(value: Vec<T>) -> Self {
        let grad = vec![T::zero(); value.len()];
        Param { value, grad }
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = T::zero());
    }
}

/// A reusable allocation carried across training steps. It is not part of a
/// layer's identity: clones start empty and comparisons ignore it.
#[derive(Debug, Default)]
pub(crate) struct Scratch<V>(V);

impl<V: Default> Clone for Scratch<V> {
    fn clone(&self) -> Self {
        Scratch(V::default())
    }
}

impl<V> PartialEq for Scratch<V> {
    fn eq(&self, _: &Self) -> bool {
        true
    }
}

impl<T> Scratch<Vec<T>> {
    fn take(&mut self) -> Vec<T> {
        std::mem::take(&mut self.0)
    }

    fn put(&mut self, v: Vec<T>) {
        self.0 = v;
    }
}

/// Kaiming-uniform weights: U(-b, b) with b = sqrt(6 / fan_in).
fn kaiming_uniform<T: Real, R: Rng>(n: usize, fan_in: usize, rng: &mut R) -> Vec<T> {
    let bound = (6.0 / fan_in as f64).sqrt();
    (0..n).map(|_| T::of(rng.random_range(-bound..bound))).collect()
}

/// Sum with eight independent accumulators so the loop vectorizes.
pub(crate) fn lane_sum<T: Real>(x: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let chunks = x.chunks_exact(8);
    let tail = chunks.remainder();
    for c in chunks {
        for k in 0..8 {
            acc[k] += c[k];
        }
    }
    acc.iter().copied().sum::<T>() + tail.iter().copied().sum::<T>()
}

/// `sum((x - m)^2)` with eight accumulators.
fn lane_sq_dev<T: Real>(x: &[T], m: T) -> T {
    let mut acc = [T::zero(); 8];
    let chunks = x.chunks_exact(8);
    let tail = chunks.remainder();
    for c in chunks {
        for k in 0..8 {
            let d = c[k] - m;
            acc[k] += d * d;
        }
    }
    acc.iter().copied().sum::<T>() + tail.iter().map(|v| (*v - m) * (*v - m)).sum::<T>()
}

/// `sum(a * b)` with eight accumulators.
fn lane_dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let tail: T = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| *x * *y).sum();
    for (x, y) in ca.zip(cb) {
        for k in 0..8 {
            acc[k] += x[k] * y[k];
        }
    }
    acc.iter().copied().sum::<T>() + tail
}

fn expect_rank<T: Real>(x: &Tensor<T>, rank: usize, what: &str) -> Result<()> {
    if x.shape().len() != rank {
        return Err(Error::Shape(format!("{what} expects rank {rank}, got shape {:?}", x.shape())));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d<T> {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub padding: usize,
    /// `out_channels x (in_channels * kernel * kernel)`.
    pub weight: Param<T>,
    pub bias: Param<T>,
    /// The first layer of a network has no use for its input gradient.
    pub propagate_input_grad: bool,
    input: Option<Tensor<T>>,
    out_buf: Scratch<Vec<T>>,
    dx_buf: Scratch<Vec<T>>,
}

impl<T: Real> Conv2d<T> {
    pub fn new<R: Rng>(in_channels: usize, out_channels: usize, kernel: usize, padding: usize, rng: &mut R) -> Self {
        let fan_in = in_channels * kernel * kernel;
        Conv2d {
            in_channels,
            out_channels,
            kernel,
            padding,
            weight: Param::new(kaiming_uniform(out_channels * fan_in, fan_in, rng)),
            bias: Param::new(vec![T::zero(); out_channels]),
            propagate_input_grad: true,
            input: None,
            out_buf: Scratch::default(),
            dx_buf: Scratch::default(),
        }
    }

    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let (hp, wp) = (h + 2 * self.padding, w + 2 * self.padding);
        if hp < self.kernel || wp < self.kernel {
            return Err(Error::Shape(format!(
                "kernel {} does not fit a padded {hp}x{wp} input",
                self.kernel
            )));
        }
        Ok((hp - self.kernel + 1, wp - self.kernel + 1))
    }

    pub fn forward(&mut self, x: Tensor<T>, train: bool) -> Result<Tensor<T>> {
        if !train {
            self.input = None;
            return self.apply(&x);
        }
        let buf = self.out_buf.take();
        let y = self.apply_into(&x, buf)?;
        self.input = Some(x);
        Ok(y)
    }

    pub fn apply(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.apply_into(x, Vec::new())
    }

    /// Every output value is written, so `out` may hold stale data.
    fn apply_into(&self, x: &Tensor<T>, mut out: Vec<T>) -> Result<Tensor<T>> {
        expect_rank(x, 4, "conv")?;
        let &[n, c, h, w] = x.shape() else { unreachable!() };
        if c != self.in_channels {
            return Err(Error::Shape(format!("conv expects {} channels, got {c}", self.in_channels)));
        }
        let (ho, wo) = self.output_hw(h, w)?;
        let (f, ckk, hw) = (self.out_channels, c * self.kernel * self.kernel, ho * wo);
        out.resize(n * f * hw, T::zero());
        let mut col = vec![T::zero(); ckk * hw];
        for (i, y) in out.chunks_exact_mut(f * hw).enumerate() {
            im2col(&x.data()[i * c * h * w..(i + 1) * c * h * w], c, h, w, self.kernel, self.padding as isize, ho, wo, &mut col);
            for (yc, b) in y.chunks_exact_mut(hw).zip(&self.bias.value) {
                yc.fill(*b);
            }
            gemm(f, ckk, hw, T::one(), &self.weight.value, false, &col, false, T::one(), y);
        }
        Tensor::new(vec![n, f, ho, wo], out)
    }

    pub fn backward(&mut self, dy: Tensor<T>) -> Result<Option<Tensor<T>>> {
        let x = self
            .input
            .take()
            .ok_or_else(|| Error::Shape("conv backward without a training forward".into()))?;
        let &[n, c, h, w] = x.shape() else { unreachable!() };
        let (ho, wo) = self.output_hw(h, w)?;
        let (f, ckk, hw) = (self.out_channels, c * self.kernel * self.kernel, ho * wo);
        if dy.shape() != [n, f, ho, wo] {
            return Err(Error::Shape(format!("conv upstream gradient has shape {:?}", dy.shape())));
        }
        let k = self.kernel;
        let mut col = vec![T::zero(); ckk * hw];
        let mut dx = self.propagate_input_grad.then(|| {
            let mut d = self.dx_buf.take();
            d.resize(n * c * h * w, T::zero());
            d
        });
        // The input gradient is a correlation of `dy` with the flipped,
        // channel-transposed kernel, padded (or cropped) by `k - 1 - padding`.
        let back_pad = k as isize - 1 - self.padding as isize;
        let (fkk, xhw) = (f * k * k, h * w);
        let (mut dcol, mut wt) = (Vec::new(), Vec::new());
        if dx.is_some() {
            dcol.resize(fkk * xhw, T::zero());
            wt.resize(c * fkk, T::zero());
            for fi in 0..f {
                for ci in 0..c {
                    for a in 0..k {
                        for b in 0..k {
                            wt[ci * fkk + (fi * k + a) * k + b] =
                                self.weight.value[fi * ckk + (ci * k + (k - 1 - a)) * k + (k - 1 - b)];
                        }
                    }
                }
            }
        }
        for i in 0..n {
            let g = &dy.data()[i * f * hw..(i + 1) * f * hw];
            im2col(&x.data()[i * c * xhw..(i + 1) * c * xhw], c, h, w, k, self.padding as isize, ho, wo, &mut col);
            gemm(f, hw, ckk, T::one(), g, false, &col, true, T::one(), &mut self.weight.grad);
            for (gb, gc) in self.bias.grad.iter_mut().zip(g.chunks_exact(hw)) {
                *gb += lane_sum(gc);
            }
            if let Some(dx) = dx.as_mut() {
                im2col(g, f, ho, wo, k, back_pad, h, w, &mut dcol);
                gemm(c, fkk, xhw, T::one(), &wt, false, &dcol, false, T::zero(), &mut dx[i * c * xhw..(i + 1) * c * xhw]);
            }
        }
        self.out_buf.put(dy.into_data());
        self.dx_buf.put(x.into_data());
        dx.map(|d| Tensor::new(vec![n, c, h, w], d)).transpose()
    }
}

/// Valid output-column range `[lo, hi)` for kernel column `kj`, i.e. where
/// `0 <= ow + kj - pad < w`.
fn col_range(w: usize, wo: usize, kj: usize, pad: isize) -> (usize, usize) {
    let lo = (pad - kj as isize).clamp(0, wo as isize) as usize;
    let hi = (w as isize + pad - kj as isize).clamp(lo as isize, wo as isize) as usize;
    (lo, hi)
}

/// Unfolds `c x h x w` into `(c*k*k) x (ho*wo)` columns. A negative `pad`
/// crops instead of padding.
#[allow(clippy::too_many_arguments)]
fn im2col<T: Real>(x: &[T], c: usize, h: usize, w: usize, k: usize, pad: isize, ho: usize, wo: usize, col: &mut [T]) {
    for ci in 0..c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let dst = &mut col[row * ho * wo..(row + 1) * ho * wo];
                let (lo, hi) = col_range(w, wo, kj, pad);
                let shift = kj as isize - pad;
                for (oh, d) in dst.chunks_exact_mut(wo).enumerate() {
                    let ih = (oh + ki) as isize - pad;
                    if ih < 0 || ih >= h as isize || lo == hi {
                        d.fill(T::zero());
                        continue;
                    }
                    let src = &plane[ih as usize * w..(ih as usize + 1) * w];
                    d[..lo].fill(T::zero());
                    let (s0, s1) = ((lo as isize + shift) as usize, (hi as isize + shift) as usize);
                    d[lo..hi].copy_from_slice(&src[s0..s1]);
                    d[hi..].fill(T::zero());
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Relu {
    mask: Option<Vec<bool>>,
    spare: Scratch<Vec<bool>>,
}

impl Relu {
    pub fn apply<T: Real>(mut x: Tensor<T>) -> Tensor<T> {
        x.data_mut().iter_mut().for_each(|v| *v = v.max(T::zero()));
        x
    }

    pub fn forward<T: Real>(&mut self, mut x: Tensor<T>, train: bool) -> Tensor<T> {
        if !train {
            self.mask = None;
            return Relu::apply(x);
        }
        let mut mask = self.spare.take();
        mask.clear();
        mask.extend(x.data_mut().iter_mut().map(|v| {
            let on = *v > T::zero();
            if !on {
                *v = T::zero();
            }
            on
        }));
        self.mask = Some(mask);
        x
    }

    pub fn backward<T: Real>(&mut self, mut dy: Tensor<T>) -> Result<Tensor<T>> {
        let mask = self
            .mask
            .take()
            .ok_or_else(|| Error::Shape("relu backward without a training forward".into()))?;
        if mask.len() != dy.len() {
            return Err(Error::Shape("relu upstream gradient size mismatch".into()));
        }
        for (g, m) in dy.data_mut().iter_mut().zip(&mask) {
            if !m {
                *g = T::zero();
            }
        }
        self.spare.put(mask);
        Ok(dy)
    }
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Batch normalization over the channel axis of `[N, C]` or `[N, C, H, W]` inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm<T> {
    pub channels: usize,
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    cache: Option<BnCache<T>>,
    spare: Scratch<Vec<T>>,
}

#[derive(Debug, Clone, PartialEq)]
struct BnCache<T> {
    xhat: Tensor<T>,
    inv_std: Vec<T>,
}

impl<T: Real> BatchNorm<T> {
    pub fn new(channels: usize) -> Self {
        BatchNorm {
            channels,
            gamma: Param::new(vec![T::one(); channels]),
            beta: Param::new(vec![T::zero(); channels]),
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            cache: None,
            spare: Scratch::default(),
        }
    }

    /// (batch, channels, spatial) view of the input.
    fn layout(&self, x: &Tensor<T>) -> Result<(usize, usize)> {
        let s = x.shape();
        if !(s.len() == 2 || s.len() == 4) || s[1] != self.channels {
            return Err(Error::Shape(format!(
                "batchnorm over {} channels got shape {s:?}",
                self.channels
            )));
        }
        Ok((s[0], s[2..].iter().product()))
    }

    /// Normalizes with the running statistics.
    pub fn apply(&self, x: Tensor<T>) -> Result<Tensor<T>> {
        let eps = T::of(BN_EPS);
        let inv_std = self.running_var.iter().map(|v| T::one() / (*v + eps).sqrt()).collect::<Vec<_>>();
        Ok(self.normalize(x, &self.running_mean, &inv_std, None)?.0)
    }

    pub fn forward(&mut self, x: Tensor<T>, train: bool) -> Result<Tensor<T>> {
        if !train {
            return self.apply(x);
        }
        let (n, sp) = self.layout(&x)?;
        let c = self.channels;
        let eps = T::of(BN_EPS);
        let (mean, inv_std) = {
            if n * sp < 2 {
                return Err(Error::Shape("batchnorm training needs more than one value per channel".into()));
            }
            let m = T::of((n * sp) as f64);
            let mut mean = vec![T::zero(); c];
            let mut var = vec![T::zero(); c];
            for i in 0..n {
                for (ch, m) in mean.iter_mut().enumerate() {
                    *m += lane_sum(&x.data()[(i * c + ch) * sp..(i * c + ch + 1) * sp]);
                }
            }
            mean.iter_mut().for_each(|v| *v = *v / m);
            for i in 0..n {
                for ch in 0..c {
                    var[ch] += lane_sq_dev(&x.data()[(i * c + ch) * sp..(i * c + ch + 1) * sp], mean[ch]);
                }
            }
            var.iter_mut().for_each(|v| *v = *v / m);
            let mom = T::of(BN_MOMENTUM);
            let unbias = m / (m - T::one());
            for ch in 0..c {
                self.running_mean[ch] = (T::one() - mom) * self.running_mean[ch] + mom * mean[ch];
                self.running_var[ch] = (T::one() - mom) * self.running_var[ch] + mom * var[ch] * unbias;
            }
            let inv: Vec<T> = var.iter().map(|v| T::one() / (*v + eps).sqrt()).collect();
            (mean, inv)
        };
        let buf = self.spare.take();
        let (y, xhat) = self.normalize(x, &mean, &inv_std, Some(buf))?;
        self.cache = xhat.map(|xhat| BnCache { xhat, inv_std });
        Ok(y)
    }

    /// Applies the affine normalization in place; with `xhat_buf` also returns
    /// the standardized values.
    fn normalize(
        &self,
        mut x: Tensor<T>,
        mean: &[T],
        inv_std: &[T],
        xhat_buf: Option<Vec<T>>,
    ) -> Result<(Tensor<T>, Option<Tensor<T>>)> {
        let (n, sp) = self.layout(&x)?;
        let c = self.channels;
        let len = x.len();
        let mut xhat = xhat_buf.map(|mut b| {
            b.resize(len, T::zero());
            b
        });
        for i in 0..n {
            for ch in 0..c {
                let r = (i * c + ch) * sp..(i * c + ch + 1) * sp;
                let (m, s) = (mean[ch], inv_std[ch]);
                let (g, b) = (self.gamma.value[ch], self.beta.value[ch]);
                match xhat.as_mut() {
                    Some(xh) => {
                        for (v, h) in x.data_mut()[r.clone()].iter_mut().zip(&mut xh[r]) {
                            *h = (*v - m) * s;
                            *v = g * *h + b;
                        }
                    }
                    None => {
                        // Folded into one multiply-add per value.
                        let (a, o) = (g * s, b - g * s * m);
                        x.data_mut()[r].iter_mut().for_each(|v| *v = a * *v + o);
                    }
                }
            }
        }
        let xhat = xhat.map(|v| Tensor::new(x.shape().to_vec(), v)).transpose()?;
        Ok((x, xhat))
    }

    pub fn backward(&mut self, mut dy: Tensor<T>) -> Result<Tensor<T>> {
        let BnCache { xhat, inv_std } = self
            .cache
            .take()
            .ok_or_else(|| Error::Shape("batchnorm backward without a training forward".into()))?;
        if dy.shape() != xhat.shape() {
            return Err(Error::Shape("batchnorm upstream gradient shape mismatch".into()));
        }
        let (n, sp) = self.layout(&dy)?;
        let c = self.channels;
        let m = T::of((n * sp) as f64);
        // dgamma = sum(dy * xhat), dbeta = sum(dy); both are the per-channel
        // sums needed for the input gradient once scaled by gamma.
        let mut sum_dy = vec![T::zero(); c];
        let mut sum_dy_xhat = vec![T::zero(); c];
        for i in 0..n {
            for ch in 0..c {
                let r = (i * c + ch) * sp..(i * c + ch + 1) * sp;
                sum_dy[ch] += lane_sum(&dy.data()[r.clone()]);
                sum_dy_xhat[ch] += lane_dot(&dy.data()[r.clone()], &xhat.data()[r]);
            }
        }
        for ch in 0..c {
            self.gamma.grad[ch] += sum_dy_xhat[ch];
            self.beta.grad[ch] += sum_dy[ch];
        }
        let data = dy.data_mut();
        for i in 0..n {
            for ch in 0..c {
                let k = self.gamma.value[ch] * inv_std[ch];
                let (a, b) = (sum_dy[ch] / m, sum_dy_xhat[ch] / m);
                let r = (i * c + ch) * sp..(i * c + ch + 1) * sp;
                for (g, xh) in data[r.clone()].iter_mut().zip(&xhat.data()[r]) {
                    *g = k * (*g - a - *xh * b);
                }
            }
        }
        self.spare.put(xhat.into_data());
        Ok(dy)
    }
}

/// Non-overlapping max pooling; trailing rows/columns that do not fill a window are dropped.
#[derive(Debug, Clone, PartialEq)]
pub struct MaxPool<T> {
    pub size: usize,
    cache: Option<(Vec<usize>, Vec<u32>)>,
    arg_buf: Scratch<Vec<u32>>,
    /// The consumed input, recycled as the next input gradient.
    dx_buf: Scratch<Vec<T>>,
}

impl<T: Real> MaxPool<T> {
    pub fn new(size: usize) -> Self {
        MaxPool {
            size,
            cache: None,
            arg_buf: Scratch::default(),
            dx_buf: Scratch::default(),
        }
    }

    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let (ho, wo) = (h / self.size, w / self.size);
        if ho == 0 || wo == 0 {
            return Err(Error::Shape(format!("{h}x{w} input is smaller than the {0}x{0} pool", self.size)));
        }
        Ok((ho, wo))
    }

    pub fn forward(&mut self, x: Tensor<T>, train: bool) -> Result<Tensor<T>> {
        if !train {
            self.cache = None;
            return self.apply(&x);
        }
        let buf = self.arg_buf.take();
        let (y, arg) = self.pool(&x, Some(buf))?;
        self.cache = Some((x.shape().to_vec(), arg));
        self.dx_buf.put(x.into_data());
        Ok(y)
    }

    pub fn apply(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.pool(x, None)?.0)
    }

    /// With `arg_buf`, also records the in-plane index of each window maximum.
    fn pool(&self, x: &Tensor<T>, arg_buf: Option<Vec<u32>>) -> Result<(Tensor<T>, Vec<u32>)> {
        let train = arg_buf.is_some();
        expect_rank(x, 4, "max pool")?;
        let &[n, c, h, w] = x.shape() else { unreachable!() };
        let (ho, wo) = self.output_hw(h, w)?;
        let p = self.size;
        let mut out = Vec::with_capacity(n * c * ho * wo);
        let mut arg = arg_buf.unwrap_or_default();
        arg.clear();
        if p == 2 {
            out.resize(n * c * ho * wo, T::zero());
            arg.resize(if train { out.len() } else { 0 }, 0);
            for (pi, plane) in x.data().chunks_exact(h * w).enumerate() {
                for oh in 0..ho {
                    let o = (pi * ho + oh) * wo;
                    let r0 = &plane[2 * oh * w..2 * oh * w + 2 * wo];
                    let r1 = &plane[(2 * oh + 1) * w..(2 * oh + 1) * w + 2 * wo];
                    let dst = &mut out[o..o + wo];
                    let base = (2 * oh * w) as u32;
                    for (ow, ((a, b), d)) in r0.chunks_exact(2).zip(r1.chunks_exact(2)).zip(dst.iter_mut()).enumerate() {
                        // First maximum in row-major window order wins ties.
                        let (mut v, mut k) = (a[0], 0u32);
                        if a[1] > v {
                            (v, k) = (a[1], 1);
                        }
                        if b[0] > v {
                            (v, k) = (b[0], w as u32);
                        }
                        if b[1] > v {
                            (v, k) = (b[1], w as u32 + 1);
                        }
                        *d = v;
                        if train {
                            arg[o + ow] = base + 2 * ow as u32 + k;
                        }
                    }
                }
            }
            return Ok((Tensor::new(vec![n, c, ho, wo], out)?, arg));
        }
        for plane in x.data().chunks_exact(h * w) {
            for oh in 0..ho {
                for ow in 0..wo {
                    let base = oh * p * w + ow * p;
                    let mut best = base;
                    let mut best_v = plane[base];
                    for i in 0..p {
                        let row = &plane[base + i * w..base + i * w + p];
                        for (j, v) in row.iter().enumerate() {
                            if *v > best_v {
                                best_v = *v;
                                best = base + i * w + j;
                            }
                        }
                    }
                    out.push(best_v);
                    if train {
                        arg.push(best as u32);
                    }
                }
            }
        }
        Ok((Tensor::new(vec![n, c, ho, wo], out)?, arg))
    }

    pub fn backward(&mut self, dy: Tensor<T>) -> Result<Tensor<T>> {
        let (shape, arg) = self
            .cache
            .take()
            .ok_or_else(|| Error::Shape("max pool backward without a training forward".into()))?;
        if dy.len() != arg.len() {
            return Err(Error::Shape("max pool upstream gradient size mismatch".into()));
        }
        let &[_, _, h, w] = shape.as_slice() else { unreachable!() };
        let per_plane = dy.len() / (shape[0] * shape[1]);
        let mut buf = self.dx_buf.take();
        buf.clear();
        buf.resize(shape.iter().product(), T::zero());
        let mut dx = Tensor::new(shape, buf)?;
        for ((dst, g), a) in dx
            .data_mut()
            .chunks_exact_mut(h * w)
            .zip(dy.data().chunks_exact(per_plane))
            .zip(arg.chunks_exact(per_plane))
        {
            for (gv, k) in g.iter().zip(a) {
                dst[*k as usize] += *gv;
            }
        }
        self.arg_buf.put(arg);
        Ok(dx)
    }
}

/// Fully connected layer; flattens any trailing dimensions of its input.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T> {
    pub in_features: usize,
    pub out_features: usize,
    /// `out_features x in_features`.
    pub weight: Param<T>,
    pub bias: Param<T>,
    input: Option<Tensor<T>>,
}

impl<T: Real> Linear<T> {
    pub fn new<R: Rng>(in_features: usize, out_features: usize, rng: &mut R) -> Self {
        Linear {
            in_features,
            out_features,
            weight: Param::new(kaiming_uniform(out_features * in_features, in_features, rng)),
            bias: Param::new(vec![T::zero(); out_features]),
            input: None,
        }
    }

    pub fn forward(&mut self, x: Tensor<T>, train: bool) -> Result<Tensor<T>> {
        let (x, y) = self.apply_flat(x)?;
        self.input = train.then_some(x);
        Ok(y)
    }

    pub fn apply(&self, x: Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.apply_flat(x)?.1)
    }

    fn apply_flat(&self, x: Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let n = x.batch();
        if x.shape().len() < 2 || x.len() != n * self.in_features {
            return Err(Error::Shape(format!(
                "linear expects {} inputs per sample, got shape {:?}",
                self.in_features,
                x.shape()
            )));
        }
        let x = x.reshape(vec![n, self.in_features])?;
        let mut y = Vec::with_capacity(n * self.out_features);
        for _ in 0..n {
            y.extend_from_slice(&self.bias.value);
        }
        gemm(n, self.in_features, self.out_features, T::one(), x.data(), false, &self.weight.value, true, T::one(), &mut y);
        let y = Tensor::new(vec![n, self.out_features], y)?;
        Ok((x, y))
    }

    /// Input gradient in the flattened `[N, in_features]` layout.
    pub fn backward(&mut self, dy: Tensor<T>) -> Result<Tensor<T>> {
        let x = self
            .input
            .take()
            .ok_or_else(|| Error::Shape("linear backward without a training forward".into()))?;
        let n = x.batch();
        if dy.shape() != [n, self.out_features] {
            return Err(Error::Shape(format!("linear upstream gradient has shape {:?}", dy.shape())));
        }
        let (i, o) = (self.in_features, self.out_features);
        gemm(o, n, i, T::one(), dy.data(), true, x.data(), false, T::one(), &mut self.weight.grad);
        for row in dy.data().chunks_exact(o) {
            for (gb, g) in self.bias.grad.iter_mut().zip(row) {
                *gb += *g;
            }
        }
        let mut dx = vec![T::zero(); n * i];
        gemm(n, o, i, T::one(), dy.data(), false, &self.weight.value, false, T::zero(), &mut dx);
        Tensor::new(vec![n, i], dx)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer<T> {
    Conv(Conv2d<T>),
    Relu(Relu),
    BatchNorm(BatchNorm<T>),
    MaxPool(MaxPool<T>),
    Linear(Linear<T>),
}

impl<T: Real> Layer<T> {
    pub fn kind(&self) -> &'static str {
        match self {
            Layer::Conv(_) => "conv",
            Layer::Relu(_) => "relu",
            Layer::BatchNorm(_) => "bn",
            Layer::MaxPool(_) => "pool",
            Layer::Linear(_) => "linear",
        }
    }

    pub fn forward(&mut self, x: Tensor<T>, train: bool) -> Result<Tensor<T>> {
        match self {
            Layer::Conv(l) => l.forward(x, train),
            Layer::Relu(l) => Ok(l.forward(x, train)),
            Layer::BatchNorm(l) => l.forward(x, train),
            Layer::MaxPool(l) => l.forward(x, train),
            Layer::Linear(l) => l.forward(x, train),
        }
    }

    /// Inference-mode forward; leaves the layer untouched.
    pub fn infer(&self, x: Tensor<T>) -> Result<Tensor<T>> {
        match self {
            Layer::Conv(l) => l.apply(&x),
            Layer::Relu(_) => Ok(Relu::apply(x)),
            Layer::BatchNorm(l) => l.apply(x),
            Layer::MaxPool(l) => l.apply(&x),
            Layer::Linear(l) => l.apply(x),
        }
    }

    /// Returns `None` only for a convolution that does not propagate to its input.
    pub fn backward(&mut self, dy: Tensor<T>) -> Result<Option<Tensor<T>>> {
        match self {
            Layer::Conv(l) => l.backward(dy),
            Layer::Relu(l) => l.backward(dy).map(Some),
            Layer::BatchNorm(l) => l.backward(dy).map(Some),
            Layer::MaxPool(l) => l.backward(dy).map(Some),
            Layer::Linear(l) => l.backward(dy).map(Some),
        }
    }

    pub fn params_mut(&mut self) -> Vec<(&'static str, &mut Param<T>)> {
        match self {
            Layer::Conv(l) => vec![("weight", &mut l.weight), ("bias", &mut l.bias)],
            Layer::Linear(l) => vec![("weight", &mut l.weight), ("bias", &mut l.bias)],
            Layer::BatchNorm(l) => vec![("gamma", &mut l.gamma), ("beta", &mut l.beta)],
            Layer::Relu(_) | Layer::MaxPool(_) => vec![],
        }
    }

    /// Parameter values and running statistics: everything a checkpoint stores.
    pub fn state_mut(&mut self) -> Vec<(&'static str, &mut Vec<T>)> {
        match self {
            Layer::Conv(l) => vec![("weight", &mut l.weight.value), ("bias", &mut l.bias.value)],
            Layer::Linear(l) => vec![("weight", &mut l.weight.value), ("bias", &mut l.bias.value)],
            Layer::BatchNorm(l) => vec![
                ("gamma", &mut l.gamma.value),
                ("beta", &mut l.beta.value),
                ("running_mean", &mut l.running_mean),
                ("running_var", &mut l.running_var),
            ],
            Layer::Relu(_) | Layer::MaxPool(_) => vec![],
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(11)
    }

    fn random(shape: Vec<usize>, r: &mut ChaCha8Rng) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Direct-summation convolution as an oracle for the im2col route.
    fn naive_conv(l: &Conv2d<f64>, x: &Tensor<f64>) -> Vec<f64> {
        let &[n, c, h, w] = x.shape() else { panic!() };
        let (k, p) = (l.kernel, l.padding as isize);
        let (ho, wo) = l.output_hw(h, w).unwrap();
        let mut out = vec![];
        for i in 0..n {
            for f in 0..l.out_channels {
                for oh in 0..ho {
                    for ow in 0..wo {
                        let mut s = l.bias.value[f];
                        for ci in 0..c {
                            for ki in 0..k {
                                for kj in 0..k {
                                    let (ih, iw) = (oh as isize + ki as isize - p, ow as isize + kj as isize - p);
                                    if ih >= 0 && iw >= 0 && (ih as usize) < h && (iw as usize) < w {
                                        let xv = x.data()[((i * c + ci) * h + ih as usize) * w + iw as usize];
                                        s += l.weight.value[((f * c + ci) * k + ki) * k + kj] * xv;
                                    }
                                }
                            }
                        }
                        out.push(s);
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_direct_summation() {
        let mut r = rng();
        for (c, f, k, p, h, w) in [(1, 3, 5, 3, 9, 7), (2, 4, 3, 3, 5, 6), (3, 2, 2, 3, 4, 4), (2, 2, 3, 0, 6, 5)] {
            let mut l = Conv2d::<f64>::new(c, f, k, p, &mut r);
            l.bias.value.iter_mut().for_each(|b| *b = r.random_range(-1.0..1.0));
            let x = random(vec![2, c, h, w], &mut r);
            let want = naive_conv(&l, &x);
            let got = l.forward(x, false).unwrap();
            for (a, b) in got.data().iter().zip(&want) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_input_gradient_matches_central_differences() {
        let mut r = rng();
        for (c, f, k, p, h, w) in [(2, 3, 3, 3, 5, 4), (1, 2, 5, 3, 6, 7), (2, 2, 2, 3, 4, 5), (3, 2, 3, 1, 5, 5), (2, 2, 3, 0, 5, 6)] {
            let mut l = Conv2d::<f64>::new(c, f, k, p, &mut r);
            let x = random(vec![2, c, h, w], &mut r);
            let y = l.forward(x.clone(), true).unwrap();
            let dy = random(y.shape().to_vec(), &mut r);
            let dx = l.backward(dy.clone()).unwrap().unwrap();
            let loss = |x: &Tensor<f64>| -> f64 { l.apply(x).unwrap().data().iter().zip(dy.data()).map(|(a, b)| a * b).sum() };
            for j in 0..x.len() {
                let (mut xp, mut xm) = (x.clone(), x.clone());
                xp.data_mut()[j] += 1e-5;
                xm.data_mut()[j] -= 1e-5;
                let fd = (loss(&xp) - loss(&xm)) / 2e-5;
                assert!((fd - dx.data()[j]).abs() < 1e-7 * fd.abs().max(1.0), "k={k} p={p} j={j}");
            }
        }
    }

    #[test]
    fn identity_kernel_preserves_input() {
        let mut l = Conv2d::<f64>::new(1, 1, 1, 0, &mut rng());
        l.weight.value[0] = 1.0;
        let x = random(vec![1, 1, 6, 4], &mut rng());
        assert_eq!(l.forward(x.clone(), false).unwrap(), x);
    }

    #[test]
    fn zero_input_gives_zero_output() {
        let mut l = Conv2d::<f64>::new(1, 32, 5, 3, &mut rng());
        let y = l.forward(Tensor::zeros(vec![1, 1, 128, 64]), false).unwrap();
        assert_eq!(y.shape(), [1, 32, 130, 66]);
        assert!(y.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn pool_outputs_come_from_their_windows() {
        let x = random(vec![1, 2, 5, 7], &mut rng());
        let mut p = MaxPool::<f64>::new(2);
        let y = p.forward(x.clone(), false).unwrap();
        assert_eq!(y.shape(), [1, 2, 2, 3]);
        for ch in 0..2 {
            for oh in 0..2 {
                for ow in 0..3 {
                    let v = y.data()[(ch * 2 + oh) * 3 + ow];
                    let win: Vec<f64> = (0..4)
                        .map(|k| x.data()[(ch * 5 + 2 * oh + k / 2) * 7 + 2 * ow + k % 2])
                        .collect();
                    assert!(win.contains(&v) && win.iter().all(|u| *u <= v));
                }
            }
        }
    }

    #[test]
    fn relu_is_nonnegative() {
        let y = Relu::default().forward(random(vec![3, 50], &mut rng()), false);
        assert!(y.data().iter().all(|v| *v >= 0.0));
    }

    #[test]
    fn batchnorm_training_standardizes_channels() {
        let mut bn = BatchNorm::<f64>::new(3);
        let x = random(vec![4, 3, 2, 2], &mut rng());
        let y = bn.forward(x, true).unwrap();
        for ch in 0..3 {
            let v: Vec<f64> = (0..4).flat_map(|i| y.data()[(i * 3 + ch) * 4..(i * 3 + ch + 1) * 4].to_vec()).collect();
            let mean = v.iter().sum::<f64>() / 16.0;
            let var = v.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / 16.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-3);
        }
        assert!(bn.running_mean.iter().all(|m| m.abs() < 0.1));
    }

    #[test]
    fn channel_mismatch_is_a_shape_error() {
        let mut l = Conv2d::<f64>::new(2, 2, 3, 1, &mut rng());
        assert!(matches!(l.forward(Tensor::zeros(vec![1, 1, 4, 4]), false), Err(Error::Shape(_))));
        let mut bn = BatchNorm::<f64>::new(3);
        assert!(matches!(bn.forward(Tensor::zeros(vec![2, 2]), false), Err(Error::Shape(_))));
    }
}
