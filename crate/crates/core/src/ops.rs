//! Forward kernels over [`Tensor`]: convolution, activations, pooling,
//! resizing and combination.

use crate::error::{Error, Result};
use crate::par;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Weights `(out_ch, in_ch, kh, kw)` and per-output-channel bias of a
/// cross-correlation layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams<T = f32> {
    pub weight: Tensor<T>,
    pub bias: Vec<T>,
    pub stride: usize,
    pub padding: usize,
}

impl<T: Scalar> ConvParams<T> {
    pub fn new(weight: Tensor<T>, bias: Vec<T>, stride: usize, padding: usize) -> Result<Self> {
        if stride == 0 {
            return Err(Error::invalid("convolution stride must be positive"));
        }
        if bias.len() != weight.batch() {
            return Err(Error::shape(format!(
                "bias length {} does not match {} output channels",
                bias.len(),
                weight.batch()
            )));
        }
        Ok(ConvParams {
            weight,
            bias,
            stride,
            padding,
        })
    }

    /// Stride-`stride` layer with "same"-style padding `(k - 1) / 2`.
    /// Kernel extents must be odd.
    pub fn same(weight: Tensor<T>, bias: Vec<T>, stride: usize) -> Result<Self> {
        let [_, _, kh, kw] = weight.shape();
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::invalid(format!(
                "same padding requires odd kernel extents, got {kh}x{kw}"
            )));
        }
        if kh != kw {
            return Err(Error::invalid(format!(
                "same padding requires a square kernel, got {kh}x{kw}"
            )));
        }
        Self::new(weight, bias, stride, (kh - 1) / 2)
    }

    pub fn zeros(out_ch: usize, in_ch: usize, k: usize, stride: usize, padding: usize) -> Self {
        ConvParams {
            weight: Tensor::zeros([out_ch, in_ch, k, k]),
            bias: vec![T::zero(); out_ch],
            stride: stride.max(1),
            padding,
        }
    }

    /// 1x1 identity map on `c` channels.
    pub fn identity(c: usize) -> Self {
        let mut p = Self::zeros(c, c, 1, 1, 0);
        for i in 0..c {
            p.weight.set(i, i, 0, 0, T::one());
        }
        p
    }

    pub fn out_channels(&self) -> usize {
        self.weight.batch()
    }

    pub fn in_channels(&self) -> usize {
        self.weight.channels()
    }

    pub fn kernel(&self) -> (usize, usize) {
        (self.weight.height(), self.weight.width())
    }

    pub fn num_params(&self) -> usize {
        self.weight.data().len() + self.bias.len()
    }

    /// Spatial output extent for an input extent, if well-defined.
    pub fn output_extent(&self, input: usize, k: usize) -> Option<usize> {
        let padded = input + 2 * self.padding;
        if padded < k {
            None
        } else {
            Some((padded - k) / self.stride + 1)
        }
    }

    /// Applies a 1x1 layer to a single feature vector.
    pub fn apply_vector(&self, v: &[T]) -> Result<Vec<T>> {
        if self.kernel() != (1, 1) {
            return Err(Error::invalid("apply_vector needs a 1x1 kernel"));
        }
        if v.len() != self.in_channels() {
            return Err(Error::shape(format!(
                "vector of length {} fed to layer expecting {}",
                v.len(),
                self.in_channels()
            )));
        }
        let cin = self.in_channels();
        let w = self.weight.data();
        Ok((0..self.out_channels())
            .map(|o| {
                let row = &w[o * cin..(o + 1) * cin];
                row.iter()
                    .zip(v)
                    .fold(self.bias[o], |acc, (&a, &b)| acc + a * b)
            })
            .collect())
    }
}

/// Cross-correlation (no kernel flip) with zero padding.
pub fn conv2d<T: Scalar>(input: &Tensor<T>, params: &ConvParams<T>) -> Result<Tensor<T>> {
    let [n, cin, h, w] = input.shape();
    let [cout, pin, kh, kw] = params.weight.shape();
    if cin != pin {
        return Err(Error::shape(format!(
            "conv2d: input has {cin} channels, kernel expects {pin}"
        )));
    }
    if params.bias.len() != cout {
        return Err(Error::shape(format!(
            "conv2d: bias length {} vs {cout} output channels",
            params.bias.len()
        )));
    }
    let (oh, ow) = match (params.output_extent(h, kh), params.output_extent(w, kw)) {
        (Some(oh), Some(ow)) if oh > 0 && ow > 0 => (oh, ow),
        _ => {
            return Err(Error::shape(format!(
                "conv2d: {kh}x{kw} kernel with padding {} does not fit {h}x{w} input",
                params.padding
            )))
        }
    };
    let s = params.stride;
    let pad = params.padding as isize;
    let weights = params.weight.data();
    let mut out = Tensor::zeros([n, cout, oh, ow]);

    par::for_each_chunk_mut(out.data_mut(), oh * ow, |plane_idx, plane| {
        let b = plane_idx / cout;
        let oc = plane_idx % cout;
        plane.iter_mut().for_each(|v| *v = params.bias[oc]);
        for ic in 0..cin {
            let src = input.plane(b, ic);
            for ky in 0..kh {
                for kx in 0..kw {
                    let wv = weights[((oc * cin + ic) * kh + ky) * kw + kx];
                    if wv == T::zero() {
                        continue;
                    }
                    let (x_lo, x_hi) = valid_range(kx as isize - pad, s, w, ow);
                    if x_lo >= x_hi {
                        continue;
                    }
                    for oy in 0..oh {
                        let iy = (oy * s) as isize + ky as isize - pad;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let src_row = &src[iy as usize * w..(iy as usize + 1) * w];
                        let dst_row = &mut plane[oy * ow..(oy + 1) * ow];
                        let shift = kx as isize - pad;
                        if s == 1 {
                            let a = (x_lo as isize + shift) as usize;
                            let len = x_hi - x_lo;
                            for (d, &sv) in dst_row[x_lo..x_hi].iter_mut().zip(&src_row[a..a + len]) {
                                *d = *d + wv * sv;
                            }
                        } else {
                            for ox in x_lo..x_hi {
                                let ix = ((ox * s) as isize + shift) as usize;
                                dst_row[ox] = dst_row[ox] + wv * src_row[ix];
                            }
                        }
                    }
                }
            }
        }
    });
    Ok(out)
}

/// Output columns `[lo, hi)` for which `ox * stride + shift` lands in `[0, len)`.
fn valid_range(shift: isize, stride: usize, len: usize, out_len: usize) -> (usize, usize) {
    let s = stride as isize;
    let lo = if shift >= 0 { 0 } else { (-shift + s - 1) / s };
    let last = len as isize - 1 - shift;
    if last < 0 {
        return (0, 0);
    }
    let hi = (last / s + 1).min(out_len as isize);
    (lo as usize, hi.max(lo) as usize)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
}

pub fn activation<T: Scalar>(input: &Tensor<T>, kind: Activation) -> Tensor<T> {
    match kind {
        Activation::Relu => input.map(relu),
        Activation::Sigmoid => input.map(sigmoid),
    }
}

#[inline]
pub fn relu<T: Scalar>(v: T) -> T {
    if v > T::zero() {
        v
    } else {
        T::zero()
    }
}

#[inline]
pub fn sigmoid<T: Scalar>(v: T) -> T {
    // split by sign so exp never overflows
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

/// Numerically stable softmax (max subtraction).
pub fn softmax_vec<T: Scalar>(values: &[T]) -> Result<Vec<T>> {
    if values.is_empty() {
        return Err(Error::invalid("softmax of an empty list"));
    }
    if let Some(bad) = values.iter().find(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("softmax input contains {bad}")));
    }
    let max = values.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = values.iter().map(|&v| (v - max).exp()).collect();
    let total = sum_unordered(exps.clone());
    Ok(exps.into_iter().map(|e| e / total).collect())
}

/// Sum whose rounding does not depend on the order of `terms`: they are
/// added in ascending order. Keeps attention pooling exactly equivariant
/// under pixel permutations.
pub fn sum_unordered<T: Scalar>(mut terms: Vec<T>) -> T {
    terms.sort_unstable_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    terms.into_iter().fold(T::zero(), |acc, v| acc + v)
}

/// Per-channel spatial mean, shape `(n, c, 1, 1)`.
pub fn global_avg_pool<T: Scalar>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, c, h, w] = input.shape();
    if h == 0 || w == 0 {
        return Err(Error::shape("global_avg_pool needs non-empty spatial extents"));
    }
    let count = T::from_f64((h * w) as f64);
    let mut out = Tensor::zeros([n, c, 1, 1]);
    for b in 0..n {
        for ch in 0..c {
            let sum: T = input.plane(b, ch).iter().copied().sum();
            out.set(b, ch, 0, 0, sum / count);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Resize {
    /// Bilinear, factor 2, half-pixel centres (align_corners = false).
    BilinearUp2,
    /// 2x2 max pooling with stride 2.
    MaxPoolDown2,
}

pub fn resize<T: Scalar>(input: &Tensor<T>, mode: Resize) -> Result<Tensor<T>> {
    match mode {
        Resize::BilinearUp2 => bilinear_resize(input, input.height() * 2, input.width() * 2),
        Resize::MaxPoolDown2 => maxpool_down2(input),
    }
}

fn maxpool_down2<T: Scalar>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, c, h, w] = input.shape();
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::shape(format!(
            "maxpool_down2 needs even extents, got {h}x{w}"
        )));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Tensor::zeros([n, c, oh, ow]);
    for b in 0..n {
        for ch in 0..c {
            let src = input.plane(b, ch);
            let dst = out.plane_mut(b, ch);
            for y in 0..oh {
                for x in 0..ow {
                    let i = 2 * y * w + 2 * x;
                    dst[y * ow + x] = src[i].max(src[i + 1]).max(src[i + w]).max(src[i + w + 1]);
                }
            }
        }
    }
    Ok(out)
}

/// Source index pairs and weights for one axis of a half-pixel bilinear resize.
fn bilinear_taps(in_len: usize, out_len: usize) -> Vec<(usize, usize, f64)> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|d| {
            let src = ((d as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(in_len - 1);
            let i1 = (i0 + 1).min(in_len - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

/// Bilinear resize to an arbitrary size (align_corners = false).
///
/// A same-size resize returns the input unchanged.
pub fn bilinear_resize<T: Scalar>(input: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    let [n, c, h, w] = input.shape();
    if h == 0 || w == 0 || out_h == 0 || out_w == 0 {
        return Err(Error::shape(format!(
            "bilinear resize {h}x{w} -> {out_h}x{out_w} has an empty extent"
        )));
    }
    if (h, w) == (out_h, out_w) {
        return Ok(input.clone());
    }
    let ys = bilinear_taps(h, out_h);
    let xs = bilinear_taps(w, out_w);
    let mut out = Tensor::zeros([n, c, out_h, out_w]);
    par::for_each_chunk_mut(out.data_mut(), out_h * out_w, |plane_idx, dst| {
        let src = input.plane(plane_idx / c, plane_idx % c);
        for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
            let fy = T::from_f64(fy);
            for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                let fx = T::from_f64(fx);
                let top = src[y0 * w + x0] + (src[y0 * w + x1] - src[y0 * w + x0]) * fx;
                let bot = src[y1 * w + x0] + (src[y1 * w + x1] - src[y1 * w + x0]) * fx;
                dst[oy * out_w + ox] = top + (bot - top) * fy;
            }
        }
    });
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Combine {
    Add,
    /// Stack channels, `a` first.
    ConcatChannels,
}

pub fn combine<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, mode: Combine) -> Result<Tensor<T>> {
    match mode {
        Combine::Add => {
            if a.shape() != b.shape() {
                return Err(Error::shape(format!(
                    "add: {:?} vs {:?}",
                    a.shape(),
                    b.shape()
                )));
            }
            let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x + y).collect();
            Tensor::from_vec(a.shape(), data)
        }
        Combine::ConcatChannels => {
            let [n, ca, h, w] = a.shape();
            let [nb, cb, hb, wb] = b.shape();
            if (n, h, w) != (nb, hb, wb) {
                return Err(Error::shape(format!(
                    "concat: {:?} vs {:?}",
                    a.shape(),
                    b.shape()
                )));
            }
            let mut data = Vec::with_capacity(n * (ca + cb) * h * w);
            for s in 0..n {
                data.extend_from_slice(a.sample(s));
                data.extend_from_slice(b.sample(s));
            }
            Tensor::from_vec([n, ca + cb, h, w], data)
        }
    }
}

/// Elementwise sum of two equal-shaped tensors.
pub fn add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    combine(a, b, Combine::Add)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ones_kernel(k: usize) -> ConvParams<f64> {
        ConvParams::new(Tensor::full([1, 1, k, k], 1.0), vec![0.0], 1, k / 2).unwrap()
    }

    #[test]
    fn ones_conv_counts_overlap() {
        let x = Tensor::<f64>::full([1, 1, 3, 3], 1.0);
        let y = conv2d(&x, &ones_kernel(3)).unwrap();
        assert_eq!(y.get(0, 0, 1, 1), 9.0);
        assert_eq!(y.get(0, 0, 0, 0), 4.0);
        assert_eq!(y.get(0, 0, 2, 2), 4.0);
        assert_eq!(y.get(0, 0, 0, 1), 6.0);
    }

    #[test]
    fn delta_kernel_is_identity() {
        let mut k = ConvParams::<f32>::zeros(1, 1, 3, 1, 1);
        k.weight.set(0, 0, 1, 1, 1.0);
        let x = Tensor::from_fn([1, 1, 4, 5], |_, _, y, x| (y * 5 + x) as f32 - 7.5);
        assert_eq!(conv2d(&x, &k).unwrap(), x);
    }

    #[test]
    fn stride_two_output_extent() {
        let x = Tensor::<f32>::full([1, 2, 8, 6], 1.0);
        let k = ConvParams::<f32>::zeros(3, 2, 3, 2, 1);
        assert_eq!(conv2d(&x, &k).unwrap().shape(), [1, 3, 4, 3]);
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let x = Tensor::<f32>::zeros([1, 2, 4, 4]);
        let k = ConvParams::<f32>::zeros(1, 3, 3, 1, 1);
        let err = conv2d(&x, &k).unwrap_err();
        assert!(err.to_string().contains("3"), "{err}");
    }

    #[test]
    fn conv_rejects_oversized_kernel() {
        let x = Tensor::<f32>::zeros([1, 1, 2, 2]);
        let k = ConvParams::<f32>::zeros(1, 1, 5, 1, 0);
        assert!(conv2d(&x, &k).is_err());
    }

    #[test]
    fn same_padding_requires_odd_kernel() {
        assert!(ConvParams::<f32>::same(Tensor::zeros([1, 1, 2, 2]), vec![0.0], 1).is_err());
        assert!(ConvParams::<f32>::same(Tensor::zeros([1, 1, 3, 3]), vec![0.0], 1).is_ok());
    }

    #[test]
    fn relu_and_sigmoid_values() {
        assert_eq!(relu(-1.0f64), 0.0);
        assert_eq!(relu(2.0f64), 2.0);
        assert_eq!(sigmoid(0.0f64), 0.5);
        assert!(sigmoid(-800.0f64) >= 0.0 && sigmoid(800.0f64) <= 1.0);
        let x = Tensor::<f64>::from_vec([1, 1, 1, 5], vec![-3.0, -1.0, 0.0, 0.5, 4.0]).unwrap();
        let y = activation(&x, Activation::Sigmoid);
        assert!(y.data().windows(2).all(|p| p[0] < p[1]));
        assert!(y.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn softmax_closed_forms() {
        let u = softmax_vec(&[0.0f64; 4]).unwrap();
        assert!(u.iter().all(|&v| (v - 0.25).abs() < 1e-15));
        let p = softmax_vec(&[0.0f64, 3.0f64.ln()]).unwrap();
        assert!((p[0] - 0.25).abs() < 1e-15 && (p[1] - 0.75).abs() < 1e-15);
        assert!(softmax_vec::<f64>(&[]).is_err());
        assert!(softmax_vec(&[0.0f64, f64::NAN]).is_err());
    }

    #[test]
    fn softmax_survives_large_logits() {
        let p = softmax_vec(&[1000.0f64, 1000.0]).unwrap();
        assert_eq!(p, vec![0.5, 0.5]);
    }

    #[test]
    fn avg_pool_mean() {
        let x = Tensor::<f64>::from_vec([1, 1, 2, 2], vec![1.0, 3.0, 5.0, 7.0]).unwrap();
        assert_eq!(global_avg_pool(&x).unwrap().data(), &[4.0]);
        let c = Tensor::<f64>::full([2, 3, 5, 7], -2.5);
        assert!(global_avg_pool(&c).unwrap().data().iter().all(|&v| v == -2.5));
    }

    #[test]
    fn resize_rules() {
        let c = Tensor::<f32>::full([1, 2, 3, 5], 1.75);
        let up = resize(&c, Resize::BilinearUp2).unwrap();
        assert_eq!(up.shape(), [1, 2, 6, 10]);
        assert!(up.data().iter().all(|&v| v == 1.75));
        let back = resize(&up, Resize::MaxPoolDown2).unwrap();
        assert_eq!(back, c);

        let m = Tensor::<f32>::from_vec([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(resize(&m, Resize::MaxPoolDown2).unwrap().data(), &[4.0]);
        assert!(resize(&c, Resize::MaxPoolDown2).is_err());
    }

    #[test]
    fn bilinear_half_pixel_weights() {
        // 2 -> 4 samples source positions -0.25, 0.25, 0.75, 1.25 (clamped)
        let x = Tensor::<f64>::from_vec([1, 1, 1, 2], vec![0.0, 4.0]).unwrap();
        let y = bilinear_resize(&x, 1, 4).unwrap();
        assert_eq!(y.data(), &[0.0, 1.0, 3.0, 4.0]);
    }

    #[test]
    fn combine_rules() {
        let a = Tensor::<f32>::from_fn([1, 2, 2, 2], |_, c, y, x| (c * 4 + y * 2 + x) as f32);
        let z = Tensor::<f32>::zeros([1, 2, 2, 2]);
        assert_eq!(combine(&a, &z, Combine::Add).unwrap(), a);
        let b = a.map(|v| v * 0.3 - 1.0);
        assert_eq!(
            combine(&a, &b, Combine::Add).unwrap(),
            combine(&b, &a, Combine::Add).unwrap()
        );
        let big_a = Tensor::<f32>::zeros([1, 256, 2, 2]);
        let cat = combine(&big_a, &big_a, Combine::ConcatChannels).unwrap();
        assert_eq!(cat.channels(), 512);
        let cat2 = combine(&a, &b, Combine::ConcatChannels).unwrap();
        assert_eq!(cat2.plane(0, 0), a.plane(0, 0));
        assert_eq!(cat2.plane(0, 3), b.plane(0, 1));
        assert!(combine(&a, &Tensor::zeros([1, 2, 2, 3]), Combine::Add).is_err());
        assert!(combine(&a, &Tensor::zeros([1, 2, 3, 2]), Combine::ConcatChannels).is_err());
    }

    #[test]
    fn apply_vector_matches_conv() {
        let w = Tensor::<f64>::from_fn([2, 3, 1, 1], |o, i, _, _| (o as f64 + 1.0) * (i as f64 - 1.0));
        let p = ConvParams::new(w, vec![0.5, -0.5], 1, 0).unwrap();
        let x = Tensor::<f64>::from_fn([1, 3, 1, 1], |_, c, _, _| c as f64 + 2.0);
        let conv = conv2d(&x, &p).unwrap();
        assert_eq!(p.apply_vector(&x.pixel_vector(0, 0)).unwrap(), conv.data());
    }
}
