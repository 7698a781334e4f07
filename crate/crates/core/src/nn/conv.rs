//! Valid 3D cross-correlation and the stride-`k` transposed convolution.
//!
//! Both kernels parallelize over output (or input-gradient) channels. Each
//! output element is accumulated by exactly one worker in a fixed order over
//! its receptive field, so results are bitwise independent of thread count.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Shape, Volume};

/// Weights `[out][in][k][k][k]` and per-output-channel bias.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvKernel<T> {
    pub out_channels: usize,
    pub in_channels: usize,
    pub k: usize,
    pub weights: Vec<T>,
    pub bias: Vec<T>,
}

/// Static description of a kernel block, as stored in checkpoints.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct KernelShape {
    pub out_channels: usize,
    pub in_channels: usize,
    pub k: usize,
}

impl KernelShape {
    pub fn weight_len(&self) -> usize {
        self.out_channels * self.in_channels * self.k * self.k * self.k
    }

    pub fn param_count(&self) -> usize {
        self.weight_len() + self.out_channels
    }
}

impl<T: Scalar> ConvKernel<T> {
    pub fn zeros(out_channels: usize, in_channels: usize, k: usize) -> Result<Self> {
        if out_channels == 0 || in_channels == 0 || k == 0 {
            return Err(Error::Parameter(format!(
                "kernel {out_channels}x{in_channels}x{k}^3 has a zero extent"
            )));
        }
        let shape = KernelShape {
            out_channels,
            in_channels,
            k,
        };
        Ok(ConvKernel {
            out_channels,
            in_channels,
            k,
            weights: vec![T::zero(); shape.weight_len()],
            bias: vec![T::zero(); out_channels],
        })
    }

    pub fn from_parts(shape: KernelShape, weights: Vec<T>, bias: Vec<T>) -> Result<Self> {
        if weights.len() != shape.weight_len() || bias.len() != shape.out_channels {
            return Err(Error::Shape(format!(
                "kernel {shape:?} needs {} weights and {} biases, got {} and {}",
                shape.weight_len(),
                shape.out_channels,
                weights.len(),
                bias.len()
            )));
        }
        if shape.k == 0 || shape.in_channels == 0 || shape.out_channels == 0 {
            return Err(Error::Parameter(format!("kernel {shape:?} has a zero extent")));
        }
        Ok(ConvKernel {
            out_channels: shape.out_channels,
            in_channels: shape.in_channels,
            k: shape.k,
            weights,
            bias,
        })
    }

    pub fn shape(&self) -> KernelShape {
        KernelShape {
            out_channels: self.out_channels,
            in_channels: self.in_channels,
            k: self.k,
        }
    }

    pub fn zeros_like(&self) -> Self {
        ConvKernel {
            weights: vec![T::zero(); self.weights.len()],
            bias: vec![T::zero(); self.bias.len()],
            ..*self
        }
    }

    pub fn param_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    #[inline]
    pub fn weight_index(&self, o: usize, c: usize, i: usize, j: usize, l: usize) -> usize {
        (((o * self.in_channels + c) * self.k + i) * self.k + j) * self.k + l
    }

    #[inline]
    pub fn weight(&self, o: usize, c: usize, i: usize, j: usize, l: usize) -> T {
        self.weights[self.weight_index(o, c, i, j, l)]
    }

    /// Weights for one output channel, laid out `[in][k][k][k]`.
    fn out_block(&self, o: usize) -> &[T] {
        let n = self.in_channels * self.k * self.k * self.k;
        &self.weights[o * n..(o + 1) * n]
    }

    /// Mutable views of the two parameter buffers (weights, then bias).
    pub fn buffers_mut(&mut self) -> [&mut [T]; 2] {
        [&mut self.weights, &mut self.bias]
    }

    pub fn buffers(&self) -> [&[T]; 2] {
        [&self.weights, &self.bias]
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().chain(&self.bias).all(|v| v.is_finite())
    }
}

/// `acc + a·b`, fused when the target has hardware FMA.
#[inline(always)]
fn madd<T: Scalar>(acc: T, a: T, b: T) -> T {
    if cfg!(target_feature = "fma") {
        a.mul_add(b, acc)
    } else {
        acc + a * b
    }
}

#[inline]
fn axpy<T: Scalar>(dst: &mut [T], src: &[T], a: T) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = madd(*d, a, s);
    }
}

/// `dst[x] += Σ_l taps[l]·src[x + l]`, accumulated in tap order.
#[inline]
fn correlate_row<T: Scalar>(dst: &mut [T], src: &[T], taps: &[T]) {
    let n = dst.len();
    match *taps {
        [a] => axpy(dst, &src[..n], a),
        [a, b] => {
            let (s0, s1) = (&src[..n], &src[1..n + 1]);
            for ((d, &x0), &x1) in dst.iter_mut().zip(s0).zip(s1) {
                *d = madd(madd(*d, a, x0), b, x1);
            }
        }
        [a, b, c] => {
            let (s0, s1, s2) = (&src[..n], &src[1..n + 1], &src[2..n + 2]);
            for (((d, &x0), &x1), &x2) in dst.iter_mut().zip(s0).zip(s1).zip(s2) {
                *d = madd(madd(madd(*d, a, x0), b, x1), c, x2);
            }
        }
        _ => {
            for (l, &t) in taps.iter().enumerate() {
                axpy(dst, &src[l..l + n], t);
            }
        }
    }
}

/// Dot product with eight independent partial sums (vectorizes; fixed order).
#[inline]
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [T::zero(); 8];
    let mut ca = a.chunks_exact(8);
    let mut cb = b.chunks_exact(8);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for t in 0..8 {
            acc[t] = madd(acc[t], x[t], y[t]);
        }
    }
    let mut tail = T::zero();
    for (&x, &y) in ca.remainder().iter().zip(cb.remainder()) {
        tail = tail + x * y;
    }
    fold8(acc) + tail
}

#[inline]
fn fold8<T: Scalar>(acc: [T; 8]) -> T {
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7]))
}

/// `out[l] += dot(g, src[l..l + g.len()])` for every tap `l`.
#[inline]
fn dot_taps<T: Scalar>(g: &[T], src: &[T], out: &mut [T]) {
    let n = g.len();
    if out.len() != 3 {
        for (l, o) in out.iter_mut().enumerate() {
            *o = *o + dot(g, &src[l..l + n]);
        }
        return;
    }
    let (s0, s1, s2) = (&src[..n], &src[1..n + 1], &src[2..n + 2]);
    let mut acc = [[T::zero(); 8]; 3];
    let full = n - n % 8;
    for base in (0..full).step_by(8) {
        let gg = &g[base..base + 8];
        let (a0, a1, a2) = (&s0[base..base + 8], &s1[base..base + 8], &s2[base..base + 8]);
        for t in 0..8 {
            acc[0][t] = madd(acc[0][t], gg[t], a0[t]);
            acc[1][t] = madd(acc[1][t], gg[t], a1[t]);
            acc[2][t] = madd(acc[2][t], gg[t], a2[t]);
        }
    }
    let mut tail = [T::zero(); 3];
    for x in full..n {
        tail[0] = tail[0] + g[x] * s0[x];
        tail[1] = tail[1] + g[x] * s1[x];
        tail[2] = tail[2] + g[x] * s2[x];
    }
    for l in 0..3 {
        out[l] = out[l] + (fold8(acc[l]) + tail[l]);
    }
}

fn conv_output_extents(input: Shape, k: usize) -> Result<[usize; 3]> {
    let e = input.extents();
    if e.iter().any(|&s| s < k) {
        return Err(Error::Shape(format!(
            "input {input} is smaller than the {k}^3 kernel"
        )));
    }
    Ok([e[0] - k + 1, e[1] - k + 1, e[2] - k + 1])
}

/// Valid (unpadded) cross-correlation: each spatial extent shrinks by `k - 1`.
pub fn conv3d_forward<T: Scalar>(input: &Volume<T>, kernel: &ConvKernel<T>) -> Result<Volume<T>> {
    if input.channels() != kernel.in_channels {
        return Err(Error::Shape(format!(
            "input has {} channels, kernel expects {}",
            input.channels(),
            kernel.in_channels
        )));
    }
    let k = kernel.k;
    let out_ext = conv_output_extents(input.shape(), k)?;
    let out_shape = input
        .shape()
        .with_channels(kernel.out_channels)
        .with_extents(out_ext);
    let [_, h, w] = input.extents();
    let [od, oh, ow] = out_ext;
    let cin = kernel.in_channels;
    let mut out = vec![T::zero(); out_shape.len()];

    out.par_chunks_mut(out_shape.channel_len())
        .enumerate()
        .for_each(|(o, out_ch)| {
            let wts = kernel.out_block(o);
            let b = kernel.bias[o];
            for z in 0..od {
                for y in 0..oh {
                    let dst = &mut out_ch[(z * oh + y) * ow..(z * oh + y + 1) * ow];
                    dst.fill(b);
                    for c in 0..cin {
                        let inp = input.channel(c);
                        for i in 0..k {
                            for j in 0..k {
                                let row = ((z + i) * h + y + j) * w;
                                let wrow = &wts[((c * k + i) * k + j) * k..][..k];
                                correlate_row(dst, &inp[row..row + ow + k - 1], wrow);
                            }
                        }
                    }
                }
            }
        });
    Volume::from_vec(out_shape, out)
}

/// Adjoint of [`conv3d_forward`]. Returns the input gradient and a kernel
/// holding the weight and bias gradients.
pub fn conv3d_backward<T: Scalar>(
    input: &Volume<T>,
    kernel: &ConvKernel<T>,
    grad_out: &Volume<T>,
) -> Result<(Volume<T>, ConvKernel<T>)> {
    if input.channels() != kernel.in_channels {
        return Err(Error::Shape(format!(
            "input has {} channels, kernel expects {}",
            input.channels(),
            kernel.in_channels
        )));
    }
    let k = kernel.k;
    let out_ext = conv_output_extents(input.shape(), k)?;
    if grad_out.extents() != out_ext || grad_out.channels() != kernel.out_channels {
        return Err(Error::Shape(format!(
            "gradient {} does not match forward output ({}, {:?})",
            grad_out.shape(),
            kernel.out_channels,
            out_ext
        )));
    }
    let [_, h, w] = input.extents();
    let [od, oh, ow] = out_ext;
    let cin = kernel.in_channels;
    let cout = kernel.out_channels;
    let block = cin * k * k * k;

    // Input gradient: a full correlation of each zero-padded gradient row
    // with the flipped taps.
    let mut grad_in = vec![T::zero(); input.shape().len()];
    grad_in
        .par_chunks_mut(input.shape().channel_len())
        .enumerate()
        .for_each(|(c, gi)| {
            let mut padded = vec![T::zero(); ow + 2 * (k - 1)];
            let mut flipped = vec![T::zero(); k];
            for z in 0..od {
                for y in 0..oh {
                    for o in 0..cout {
                        let go = &grad_out.channel(o)[(z * oh + y) * ow..][..ow];
                        padded[k - 1..k - 1 + ow].copy_from_slice(go);
                        let wts = &kernel.out_block(o)[c * k * k * k..][..k * k * k];
                        for i in 0..k {
                            for j in 0..k {
                                let row = ((z + i) * h + y + j) * w;
                                for (m, f) in flipped.iter_mut().enumerate() {
                                    *f = wts[(i * k + j) * k + k - 1 - m];
                                }
                                correlate_row(&mut gi[row..row + w], &padded, &flipped);
                            }
                        }
                    }
                }
            }
        });

    // Weight gradient: correlate each gradient row with the matching input rows.
    let mut grad_w = vec![T::zero(); cout * block];
    grad_w
        .par_chunks_mut(block)
        .enumerate()
        .for_each(|(o, gw)| {
            let go_ch = grad_out.channel(o);
            for z in 0..od {
                for y in 0..oh {
                    let go = &go_ch[(z * oh + y) * ow..][..ow];
                    for c in 0..cin {
                        let inp = input.channel(c);
                        for i in 0..k {
                            for j in 0..k {
                                let row = ((z + i) * h + y + j) * w;
                                let t = ((c * k + i) * k + j) * k;
                                dot_taps(go, &inp[row..row + ow + k - 1], &mut gw[t..t + k]);
                            }
                        }
                    }
                }
            }
        });

    let grad_b: Vec<T> = (0..cout)
        .map(|o| grad_out.channel(o).iter().fold(T::zero(), |a, &v| a + v))
        .collect();

    Ok((
        Volume::from_vec(input.shape(), grad_in)?,
        ConvKernel::from_parts(kernel.shape(), grad_w, grad_b)?,
    ))
}

/// Transposed convolution with stride equal to the kernel extent `p`: every
/// input voxel writes a disjoint `p^3` output block, so each extent grows by
/// a factor of `p`.
pub fn upconv3d_forward<T: Scalar>(input: &Volume<T>, kernel: &ConvKernel<T>) -> Result<Volume<T>> {
    if input.channels() != kernel.in_channels {
        return Err(Error::Shape(format!(
            "input has {} channels, up-convolution expects {}",
            input.channels(),
            kernel.in_channels
        )));
    }
    let p = kernel.k;
    let [d, h, w] = input.extents();
    let out_shape = input
        .shape()
        .with_channels(kernel.out_channels)
        .with_extents([d * p, h * p, w * p]);
    out_shape.validate()?;
    let (oh, ow) = (h * p, w * p);
    let cin = kernel.in_channels;
    let mut out = vec![T::zero(); out_shape.len()];

    out.par_chunks_mut(out_shape.channel_len())
        .enumerate()
        .for_each(|(o, out_ch)| {
            out_ch.fill(kernel.bias[o]);
            let wts = kernel.out_block(o);
            for c in 0..cin {
                let inp = input.channel(c);
                let wc = &wts[c * p * p * p..][..p * p * p];
                for z in 0..d {
                    for y in 0..h {
                        let src = &inp[(z * h + y) * w..][..w];
                        for i in 0..p {
                            for j in 0..p {
                                let row = ((z * p + i) * oh + y * p + j) * ow;
                                let taps = &wc[(i * p + j) * p..][..p];
                                let dst = &mut out_ch[row..row + ow];
                                for (x, &v) in src.iter().enumerate() {
                                    for (l, &wv) in taps.iter().enumerate() {
                                        dst[x * p + l] = dst[x * p + l] + v * wv;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        });
    Volume::from_vec(out_shape, out)
}

/// Adjoint of [`upconv3d_forward`].
pub fn upconv3d_backward<T: Scalar>(
    input: &Volume<T>,
    kernel: &ConvKernel<T>,
    grad_out: &Volume<T>,
) -> Result<(Volume<T>, ConvKernel<T>)> {
    let p = kernel.k;
    let [d, h, w] = input.extents();
    if input.channels() != kernel.in_channels
        || grad_out.channels() != kernel.out_channels
        || grad_out.extents() != [d * p, h * p, w * p]
    {
        return Err(Error::Shape(format!(
            "up-convolution gradient {} does not match input {} and kernel {:?}",
            grad_out.shape(),
            input.shape(),
            kernel.shape()
        )));
    }
    let (oh, ow) = (h * p, w * p);
    let cin = kernel.in_channels;
    let cout = kernel.out_channels;
    let p3 = p * p * p;

    let mut grad_in = vec![T::zero(); input.shape().len()];
    grad_in
        .par_chunks_mut(input.shape().channel_len())
        .enumerate()
        .for_each(|(c, gi)| {
            for o in 0..cout {
                let go = grad_out.channel(o);
                let wc = &kernel.out_block(o)[c * p3..][..p3];
                for z in 0..d {
                    for y in 0..h {
                        let dst = &mut gi[(z * h + y) * w..][..w];
                        for i in 0..p {
                            for j in 0..p {
                                let row = &go[((z * p + i) * oh + y * p + j) * ow..][..ow];
                                let taps = &wc[(i * p + j) * p..][..p];
                                for (x, g) in dst.iter_mut().enumerate() {
                                    let mut acc = *g;
                                    for (l, &wv) in taps.iter().enumerate() {
                                        acc = acc + row[x * p + l] * wv;
                                    }
                                    *g = acc;
                                }
                            }
                        }
                    }
                }
            }
        });

    let mut grad_w = vec![T::zero(); cout * cin * p3];
    grad_w
        .par_chunks_mut(cin * p3)
        .enumerate()
        .for_each(|(o, gw)| {
            let go = grad_out.channel(o);
            for c in 0..cin {
                let inp = input.channel(c);
                let gwc = &mut gw[c * p3..][..p3];
                for z in 0..d {
                    for y in 0..h {
                        let src = &inp[(z * h + y) * w..][..w];
                        for i in 0..p {
                            for j in 0..p {
                                let row = &go[((z * p + i) * oh + y * p + j) * ow..][..ow];
                                for l in 0..p {
                                    let t = (i * p + j) * p + l;
                                    let mut acc = gwc[t];
                                    for (x, &v) in src.iter().enumerate() {
                                        acc = acc + v * row[x * p + l];
                                    }
                                    gwc[t] = acc;
                                }
                            }
                        }
                    }
                }
            }
        });

    let grad_b: Vec<T> = (0..cout)
        .map(|o| grad_out.channel(o).iter().fold(T::zero(), |a, &v| a + v))
        .collect();

    Ok((
        Volume::from_vec(input.shape(), grad_in)?,
        ConvKernel::from_parts(kernel.shape(), grad_w, grad_b)?,
    ))
}
