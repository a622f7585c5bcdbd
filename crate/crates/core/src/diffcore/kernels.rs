//! Forward and backward kernels for the supported 1D layers.
//!
//! All activations are `(batch, channels, length)`. Loops run in a fixed
//! order so repeated evaluations are bitwise identical.

use serde::{Deserialize, Serialize};

use crate::diffcore::tensor::Tensor;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Padding {
    /// Output length `ceil(len / stride)`, zeros split evenly (extra on the right).
    Same,
    Explicit(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvGeometry {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub dilation: usize,
    pub groups: usize,
    pub padding: Padding,
}

impl ConvGeometry {
    pub fn new(in_ch: usize, out_ch: usize, kernel: usize) -> Self {
        Self {
            in_ch,
            out_ch,
            kernel,
            stride: 1,
            dilation: 1,
            groups: 1,
            padding: Padding::Same,
        }
    }

    pub fn with_stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn with_groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }

    pub fn with_dilation(mut self, dilation: usize) -> Self {
        self.dilation = dilation;
        self
    }

    pub fn in_per_group(&self) -> usize {
        self.in_ch / self.groups
    }

    pub fn out_per_group(&self) -> usize {
        self.out_ch / self.groups
    }

    pub fn is_depthwise(&self) -> bool {
        self.groups > 1 && self.groups == self.in_ch && self.groups == self.out_ch
    }

    pub fn weight_shape(&self) -> [usize; 3] {
        [self.out_ch, self.in_per_group(), self.kernel]
    }

    pub fn weight_count(&self) -> usize {
        self.out_ch * self.in_per_group() * self.kernel
    }

    /// Weights plus one bias per output channel.
    pub fn param_count(&self) -> usize {
        self.weight_count() + self.out_ch
    }

    fn effective_kernel(&self) -> usize {
        self.dilation * (self.kernel - 1) + 1
    }

    pub fn pads(&self, len: usize) -> (usize, usize) {
        match self.padding {
            Padding::Explicit(p) => (p, p),
            Padding::Same => {
                let out = len.div_ceil(self.stride);
                let needed = out.saturating_sub(1) * self.stride + self.effective_kernel();
                let total = needed.saturating_sub(len);
                (total / 2, total - total / 2)
            }
        }
    }

    pub fn out_len(&self, len: usize) -> usize {
        let (l, r) = self.pads(len);
        let padded = len + l + r;
        let ek = self.effective_kernel();
        if padded < ek {
            0
        } else {
            (padded - ek) / self.stride + 1
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.in_ch == 0 || self.out_ch == 0 || self.kernel == 0 {
            return Err("channels and kernel must be positive".into());
        }
        if self.stride == 0 || self.dilation == 0 || self.groups == 0 {
            return Err("stride, dilation and groups must be positive".into());
        }
        if !self.in_ch.is_multiple_of(self.groups) || !self.out_ch.is_multiple_of(self.groups) {
            return Err(format!(
                "groups {} must divide in_ch {} and out_ch {}",
                self.groups, self.in_ch, self.out_ch
            ));
        }
        Ok(())
    }

    /// Valid output positions `t` for kernel tap `kk`: those whose input index
    /// `t * stride + kk * dilation - pad_left` lies in `[0, len)`.
    fn tap_range(&self, kk: usize, len: usize, out_len: usize, pad_left: usize) -> (usize, usize) {
        let off = kk * self.dilation;
        // t * stride + off >= pad_left
        let lo = if off >= pad_left {
            0
        } else {
            (pad_left - off).div_ceil(self.stride)
        };
        // t * stride + off - pad_left <= len - 1
        let hi = if len + pad_left > off {
            ((len - 1 + pad_left - off) / self.stride + 1).min(out_len)
        } else {
            0
        };
        (lo.min(hi), hi)
    }
}

pub fn conv1d_forward<T: Scalar>(x: &Tensor<T>, weight: &[T], bias: Option<&[T]>, g: &ConvGeometry) -> Tensor<T> {
    let (n, c, len) = x.dims3();
    debug_assert_eq!(c, g.in_ch);
    let out_len = g.out_len(len);
    let (pad_left, _) = g.pads(len);
    let (ipg, opg, k) = (g.in_per_group(), g.out_per_group(), g.kernel);
    let mut y = Tensor::zeros(&[n, g.out_ch, out_len]);
    let xd = x.data();
    let yd = y.data_mut();
    for b in 0..n {
        for o in 0..g.out_ch {
            let grp = o / opg;
            let row = &mut yd[(b * g.out_ch + o) * out_len..(b * g.out_ch + o + 1) * out_len];
            if let Some(bias) = bias {
                row.iter_mut().for_each(|v| *v = bias[o]);
            }
            for ci in 0..ipg {
                let xc = grp * ipg + ci;
                let xrow = &xd[(b * c + xc) * len..(b * c + xc + 1) * len];
                for kk in 0..k {
                    let wv = weight[(o * ipg + ci) * k + kk];
                    let (lo, hi) = g.tap_range(kk, len, out_len, pad_left);
                    let off = kk * g.dilation;
                    if g.stride == 1 && lo < hi {
                        let xs = &xrow[lo + off - pad_left..hi + off - pad_left];
                        for (r, &xv) in row[lo..hi].iter_mut().zip(xs) {
                            *r += wv * xv;
                        }
                    } else {
                        for t in lo..hi {
                            row[t] += wv * xrow[t * g.stride + off - pad_left];
                        }
                    }
                }
            }
        }
    }
    y
}

/// Returns `(grad_input, grad_weight, grad_bias)`.
pub fn conv1d_backward<T: Scalar>(
    x: &Tensor<T>,
    weight: &[T],
    grad_out: &Tensor<T>,
    g: &ConvGeometry,
) -> (Tensor<T>, Vec<T>, Vec<T>) {
    let (n, c, len) = x.dims3();
    let out_len = g.out_len(len);
    let (pad_left, _) = g.pads(len);
    let (ipg, opg, k) = (g.in_per_group(), g.out_per_group(), g.kernel);
    let mut gx = Tensor::zeros(x.shape());
    let mut gw = vec![T::zero(); weight.len()];
    let mut gb = vec![T::zero(); g.out_ch];
    let xd = x.data();
    let gyd = grad_out.data();
    let gxd = gx.data_mut();
    for b in 0..n {
        for o in 0..g.out_ch {
            let grp = o / opg;
            let gy = &gyd[(b * g.out_ch + o) * out_len..(b * g.out_ch + o + 1) * out_len];
            gb[o] += gy.iter().copied().sum::<T>();
            for ci in 0..ipg {
                let xc = grp * ipg + ci;
                let base = (b * c + xc) * len;
                for kk in 0..k {
                    let widx = (o * ipg + ci) * k + kk;
                    let wv = weight[widx];
                    let (lo, hi) = g.tap_range(kk, len, out_len, pad_left);
                    let off = kk * g.dilation;
                    let mut acc = T::zero();
                    if g.stride == 1 && lo < hi {
                        let p0 = base + lo + off - pad_left;
                        let gys = &gy[lo..hi];
                        for (&gv, &xv) in gys.iter().zip(&xd[p0..p0 + gys.len()]) {
                            acc += gv * xv;
                        }
                        for (gxv, &gv) in gxd[p0..p0 + gys.len()].iter_mut().zip(gys) {
                            *gxv += wv * gv;
                        }
                    } else {
                        for t in lo..hi {
                            let p = base + t * g.stride + off - pad_left;
                            acc += gy[t] * xd[p];
                            gxd[p] += wv * gy[t];
                        }
                    }
                    gw[widx] += acc;
                }
            }
        }
    }
    (gx, gw, gb)
}

/// Fully connected layer over the flattened `(channels * length)` features.
/// Output is `(batch, out, 1)`.
pub fn linear_forward<T: Scalar>(x: &Tensor<T>, weight: &[T], bias: Option<&[T]>, out: usize) -> Tensor<T> {
    let (n, c, l) = x.dims3();
    let f = c * l;
    let mut y = Tensor::zeros(&[n, out, 1]);
    let xd = x.data();
    let yd = y.data_mut();
    for b in 0..n {
        let xr = &xd[b * f..(b + 1) * f];
        for o in 0..out {
            let mut acc = bias.map_or(T::zero(), |bs| bs[o]);
            let wr = &weight[o * f..(o + 1) * f];
            for (&w, &v) in wr.iter().zip(xr) {
                acc += w * v;
            }
            yd[b * out + o] = acc;
        }
    }
    y
}

pub fn linear_backward<T: Scalar>(
    x: &Tensor<T>,
    weight: &[T],
    grad_out: &Tensor<T>,
    out: usize,
) -> (Tensor<T>, Vec<T>, Vec<T>) {
    let (n, c, l) = x.dims3();
    let f = c * l;
    let mut gx = Tensor::zeros(x.shape());
    let mut gw = vec![T::zero(); weight.len()];
    let mut gb = vec![T::zero(); out];
    let xd = x.data();
    let gyd = grad_out.data();
    let gxd = gx.data_mut();
    for b in 0..n {
        let xr = &xd[b * f..(b + 1) * f];
        for o in 0..out {
            let gy = gyd[b * out + o];
            gb[o] += gy;
            let wr = &weight[o * f..(o + 1) * f];
            let gwr = &mut gw[o * f..(o + 1) * f];
            for i in 0..f {
                gwr[i] += gy * xr[i];
                gxd[b * f + i] += gy * wr[i];
            }
        }
    }
    (gx, gw, gb)
}

/// Saved statistics for a normalization backward pass.
#[derive(Debug, Clone)]
pub struct NormCache<T> {
    pub xhat: Tensor<T>,
    /// One entry per normalized group: per channel (batch norm) or per
    /// `(sample, channel)` (instance norm).
    pub inv_std: Vec<T>,
    pub batch_stats: bool,
}

pub struct BatchNormParams<'a, T> {
    pub gamma: &'a [T],
    pub beta: &'a [T],
    pub running_mean: &'a mut [T],
    pub running_var: &'a mut [T],
    pub eps: T,
    pub momentum: T,
}

pub fn batchnorm_forward<T: Scalar>(
    x: &Tensor<T>,
    p: BatchNormParams<'_, T>,
    training: bool,
) -> (Tensor<T>, NormCache<T>) {
    let (n, c, l) = x.dims3();
    let m = T::of_usize(n * l);
    let xd = x.data();
    let mut xhat = Tensor::zeros(x.shape());
    let mut y = Tensor::zeros(x.shape());
    let mut inv_std = vec![T::zero(); c];
    for ch in 0..c {
        let (mean, var) = if training {
            let mut s = T::zero();
            for b in 0..n {
                for &v in &xd[(b * c + ch) * l..(b * c + ch + 1) * l] {
                    s += v;
                }
            }
            let mean = s / m;
            let mut sq = T::zero();
            for b in 0..n {
                for &v in &xd[(b * c + ch) * l..(b * c + ch + 1) * l] {
                    sq += (v - mean) * (v - mean);
                }
            }
            let var = sq / m;
            let unbiased = if n * l > 1 { sq / T::of_usize(n * l - 1) } else { var };
            p.running_mean[ch] = (T::one() - p.momentum) * p.running_mean[ch] + p.momentum * mean;
            p.running_var[ch] = (T::one() - p.momentum) * p.running_var[ch] + p.momentum * unbiased;
            (mean, var)
        } else {
            (p.running_mean[ch], p.running_var[ch])
        };
        let is = T::one() / (var + p.eps).sqrt();
        inv_std[ch] = is;
        for b in 0..n {
            let r = (b * c + ch) * l..(b * c + ch + 1) * l;
            for i in r {
                let h = (xd[i] - mean) * is;
                xhat.data_mut()[i] = h;
                y.data_mut()[i] = p.gamma[ch] * h + p.beta[ch];
            }
        }
    }
    (
        y,
        NormCache {
            xhat,
            inv_std,
            batch_stats: training,
        },
    )
}

/// Returns `(grad_input, grad_gamma, grad_beta)`.
pub fn batchnorm_backward<T: Scalar>(
    cache: &NormCache<T>,
    gamma: &[T],
    grad_out: &Tensor<T>,
) -> (Tensor<T>, Vec<T>, Vec<T>) {
    let (n, c, l) = grad_out.dims3();
    let m = T::of_usize(n * l);
    let gy = grad_out.data();
    let xh = cache.xhat.data();
    let mut gx = Tensor::zeros(grad_out.shape());
    let mut gg = vec![T::zero(); c];
    let mut gbeta = vec![T::zero(); c];
    for ch in 0..c {
        let mut sum_g = T::zero();
        let mut sum_gx = T::zero();
        for b in 0..n {
            for i in (b * c + ch) * l..(b * c + ch + 1) * l {
                sum_g += gy[i];
                sum_gx += gy[i] * xh[i];
            }
        }
        gg[ch] = sum_gx;
        gbeta[ch] = sum_g;
        let scale = gamma[ch] * cache.inv_std[ch];
        for b in 0..n {
            for i in (b * c + ch) * l..(b * c + ch + 1) * l {
                gx.data_mut()[i] = if cache.batch_stats {
                    scale * (gy[i] - sum_g / m - xh[i] * sum_gx / m)
                } else {
                    scale * gy[i]
                };
            }
        }
    }
    (gx, gg, gbeta)
}

pub fn instancenorm_forward<T: Scalar>(x: &Tensor<T>, gamma: &[T], beta: &[T], eps: T) -> (Tensor<T>, NormCache<T>) {
    let (n, c, l) = x.dims3();
    let ml = T::of_usize(l);
    let xd = x.data();
    let mut xhat = Tensor::zeros(x.shape());
    let mut y = Tensor::zeros(x.shape());
    let mut inv_std = vec![T::zero(); n * c];
    for b in 0..n {
        for ch in 0..c {
            let r = (b * c + ch) * l..(b * c + ch + 1) * l;
            let mean = xd[r.clone()].iter().copied().sum::<T>() / ml;
            let var = xd[r.clone()].iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / ml;
            let is = T::one() / (var + eps).sqrt();
            inv_std[b * c + ch] = is;
            for i in r {
                let h = (xd[i] - mean) * is;
                xhat.data_mut()[i] = h;
                y.data_mut()[i] = gamma[ch] * h + beta[ch];
            }
        }
    }
    (
        y,
        NormCache {
            xhat,
            inv_std,
            batch_stats: true,
        },
    )
}

pub fn instancenorm_backward<T: Scalar>(
    cache: &NormCache<T>,
    gamma: &[T],
    grad_out: &Tensor<T>,
) -> (Tensor<T>, Vec<T>, Vec<T>) {
    let (n, c, l) = grad_out.dims3();
    let ml = T::of_usize(l);
    let gy = grad_out.data();
    let xh = cache.xhat.data();
    let mut gx = Tensor::zeros(grad_out.shape());
    let mut gg = vec![T::zero(); c];
    let mut gbeta = vec![T::zero(); c];
    for b in 0..n {
        for ch in 0..c {
            let r = (b * c + ch) * l..(b * c + ch + 1) * l;
            let sum_g: T = gy[r.clone()].iter().copied().sum();
            let sum_gx: T = r.clone().map(|i| gy[i] * xh[i]).sum();
            gg[ch] += sum_gx;
            gbeta[ch] += sum_g;
            let scale = gamma[ch] * cache.inv_std[b * c + ch];
            for i in r {
                gx.data_mut()[i] = scale * (gy[i] - sum_g / ml - xh[i] * sum_gx / ml);
            }
        }
    }
    (gx, gg, gbeta)
}

pub fn prelu_forward<T: Scalar>(x: &Tensor<T>, slope: &[T]) -> Tensor<T> {
    let (n, c, l) = x.dims3();
    let mut y = x.clone();
    for b in 0..n {
        for ch in 0..c {
            for v in &mut y.data_mut()[(b * c + ch) * l..(b * c + ch + 1) * l] {
                if *v < T::zero() {
                    *v *= slope[ch];
                }
            }
        }
    }
    y
}

/// Returns `(grad_input, grad_slope)`.
pub fn prelu_backward<T: Scalar>(x: &Tensor<T>, slope: &[T], grad_out: &Tensor<T>) -> (Tensor<T>, Vec<T>) {
    let (n, c, l) = x.dims3();
    let mut gx = grad_out.clone();
    let mut gs = vec![T::zero(); c];
    let xd = x.data();
    for b in 0..n {
        for ch in 0..c {
            for i in (b * c + ch) * l..(b * c + ch + 1) * l {
                if xd[i] < T::zero() {
                    gs[ch] += grad_out.data()[i] * xd[i];
                    gx.data_mut()[i] = grad_out.data()[i] * slope[ch];
                }
            }
        }
    }
    (gx, gs)
}

pub fn relu_forward<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let mut y = x.clone();
    for v in y.data_mut() {
        if *v < T::zero() {
            *v = T::zero();
        }
    }
    y
}

pub fn relu_backward<T: Scalar>(x: &Tensor<T>, grad_out: &Tensor<T>) -> Tensor<T> {
    let mut gx = grad_out.clone();
    for (g, &v) in gx.data_mut().iter_mut().zip(x.data()) {
        if v <= T::zero() {
            *g = T::zero();
        }
    }
    gx
}

pub fn pool_out_len(len: usize, kernel: usize, stride: usize) -> usize {
    if len < kernel {
        0
    } else {
        (len - kernel) / stride + 1
    }
}

/// Returns the output and the flat input index of each selected maximum.
pub fn maxpool_forward<T: Scalar>(x: &Tensor<T>, kernel: usize, stride: usize) -> (Tensor<T>, Vec<usize>) {
    let (n, c, l) = x.dims3();
    let ol = pool_out_len(l, kernel, stride);
    let mut y = Tensor::zeros(&[n, c, ol]);
    let mut arg = vec![0; n * c * ol];
    let xd = x.data();
    for row in 0..n * c {
        for t in 0..ol {
            let start = row * l + t * stride;
            let mut best = start;
            for i in start + 1..start + kernel {
                if xd[i] > xd[best] {
                    best = i;
                }
            }
            y.data_mut()[row * ol + t] = xd[best];
            arg[row * ol + t] = best;
        }
    }
    (y, arg)
}

pub fn maxpool_backward<T: Scalar>(in_shape: &[usize], argmax: &[usize], grad_out: &Tensor<T>) -> Tensor<T> {
    let mut gx = Tensor::zeros(in_shape);
    for (&i, &g) in argmax.iter().zip(grad_out.data()) {
        gx.data_mut()[i] += g;
    }
    gx
}

pub fn avgpool_forward<T: Scalar>(x: &Tensor<T>, kernel: usize, stride: usize) -> Tensor<T> {
    let (n, c, l) = x.dims3();
    let ol = pool_out_len(l, kernel, stride);
    let mut y = Tensor::zeros(&[n, c, ol]);
    let kt = T::of_usize(kernel);
    let xd = x.data();
    for row in 0..n * c {
        for t in 0..ol {
            let start = row * l + t * stride;
            let s: T = xd[start..start + kernel].iter().copied().sum();
            y.data_mut()[row * ol + t] = s / kt;
        }
    }
    y
}

pub fn avgpool_backward<T: Scalar>(
    in_shape: &[usize],
    kernel: usize,
    stride: usize,
    grad_out: &Tensor<T>,
) -> Tensor<T> {
    let mut gx = Tensor::zeros(in_shape);
    let (n, c, l) = gx.dims3();
    let ol = pool_out_len(l, kernel, stride);
    let kt = T::of_usize(kernel);
    for row in 0..n * c {
        for t in 0..ol {
            let g = grad_out.data()[row * ol + t] / kt;
            let start = row * l + t * stride;
            for v in &mut gx.data_mut()[start..start + kernel] {
                *v += g;
            }
        }
    }
    gx
}

pub fn upsample_forward<T: Scalar>(x: &Tensor<T>, factor: usize) -> Tensor<T> {
    let (n, c, l) = x.dims3();
    let ol = l * factor;
    let mut y = Tensor::zeros(&[n, c, ol]);
    for row in 0..n * c {
        for t in 0..ol {
            y.data_mut()[row * ol + t] = x.data()[row * l + t / factor];
        }
    }
    y
}

pub fn upsample_backward<T: Scalar>(in_shape: &[usize], factor: usize, grad_out: &Tensor<T>) -> Tensor<T> {
    let mut gx = Tensor::zeros(in_shape);
    let (n, c, l) = gx.dims3();
    let ol = l * factor;
    for row in 0..n * c {
        for t in 0..ol {
            gx.data_mut()[row * l + t / factor] += grad_out.data()[row * ol + t];
        }
    }
    gx
}

/// Concatenates along the channel axis; all inputs share batch and length.
pub fn concat_forward<T: Scalar>(xs: &[&Tensor<T>]) -> Tensor<T> {
    let (n, _, l) = xs[0].dims3();
    let total: usize = xs.iter().map(|x| x.dims3().1).sum();
    let mut y = Tensor::zeros(&[n, total, l]);
    for b in 0..n {
        let mut off = 0;
        for x in xs {
            let c = x.dims3().1;
            let src = &x.data()[b * c * l..(b + 1) * c * l];
            y.data_mut()[(b * total + off) * l..(b * total + off + c) * l].copy_from_slice(src);
            off += c;
        }
    }
    y
}

pub fn concat_backward<T: Scalar>(channels: &[usize], grad_out: &Tensor<T>) -> Vec<Tensor<T>> {
    let (n, total, l) = grad_out.dims3();
    let mut off = 0;
    let mut grads = Vec::with_capacity(channels.len());
    for &c in channels {
        let mut g = Tensor::zeros(&[n, c, l]);
        for b in 0..n {
            g.data_mut()[b * c * l..(b + 1) * c * l]
                .copy_from_slice(&grad_out.data()[(b * total + off) * l..(b * total + off + c) * l]);
        }
        grads.push(g);
        off += c;
    }
    grads
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(shape, v.to_vec()).unwrap()
    }

    #[test]
    fn pointwise_conv_scales() {
        let x = t(&[1, 1, 3], &[1.0, 2.0, 3.0]);
        let g = ConvGeometry::new(1, 1, 1);
        let y = conv1d_forward(&x, &[2.0], Some(&[0.0]), &g);
        assert_eq!(y.data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn same_padding_keeps_length() {
        for k in 1..7 {
            let g = ConvGeometry::new(1, 1, k);
            assert_eq!(g.out_len(13), 13);
        }
        let g = ConvGeometry::new(1, 1, 5).with_stride(2);
        assert_eq!(g.out_len(13), 7);
    }

    #[test]
    fn hand_convolution() {
        // kernel [1, 0, -1] with same padding on [1, 2, 4, 8]
        let x = t(&[1, 1, 4], &[1.0, 2.0, 4.0, 8.0]);
        let g = ConvGeometry::new(1, 1, 3);
        let y = conv1d_forward(&x, &[1.0, 0.0, -1.0], None, &g);
        assert_eq!(y.data(), &[-2.0, -3.0, -6.0, 4.0]);
    }

    #[test]
    fn grouped_conv_isolates_groups() {
        let x = t(&[1, 2, 2], &[1.0, 1.0, 10.0, 10.0]);
        let g = ConvGeometry::new(2, 2, 1).with_groups(2);
        let y = conv1d_forward(&x, &[1.0, 2.0], None, &g);
        assert_eq!(y.data(), &[1.0, 1.0, 20.0, 20.0]);
    }

    #[test]
    fn maxpool_picks_max() {
        let x = t(&[1, 1, 4], &[1.0, 3.0, 2.0, 0.0]);
        let (y, arg) = maxpool_forward(&x, 2, 2);
        assert_eq!(y.data(), &[3.0, 2.0]);
        assert_eq!(arg, vec![1, 2]);
    }

    #[test]
    fn concat_shapes() {
        let a = Tensor::<f64>::zeros(&[1, 2, 4]);
        let b = Tensor::<f64>::zeros(&[1, 3, 4]);
        let y = concat_forward(&[&a, &b]);
        assert_eq!(y.shape(), &[1, 5, 4]);
    }
}
