//! Dense NCHW tensors and the plain building blocks the strip operator and
//! the network are assembled from.
//!
//! Coordinates are `(row, col)` with rows increasing downward. Every
//! convolution and sampler treats positions outside the grid as zero.

use crate::error::{contract, Result};
use crate::real::{gemm, Real};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Shape4 {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape4 {
    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Self { n, c, h, w }
    }

    pub const fn len(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub const fn plane(&self) -> usize {
        self.h * self.w
    }
}

impl std::fmt::Display for Shape4 {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({}, {}, {}, {})", self.n, self.c, self.h, self.w)
    }
}

/// Dense 4-D grid in (batch, channel, row, col) order.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4<T = f32> {
    shape: Shape4,
    data: Vec<T>,
}

impl<T: Real> Tensor4<T> {
    pub fn zeros(shape: Shape4) -> Self {
        Self {
            shape,
            data: vec![T::zero(); shape.len()],
        }
    }

    pub fn filled(shape: Shape4, value: T) -> Self {
        Self {
            shape,
            data: vec![value; shape.len()],
        }
    }

    pub fn from_vec(shape: Shape4, data: Vec<T>) -> Result<Self> {
        if data.len() != shape.len() {
            return Err(contract(format!(
                "tensor of shape {shape} needs {} values, got {}",
                shape.len(),
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn from_fn(shape: Shape4, mut f: impl FnMut(usize, usize, usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(shape.len());
        for b in 0..shape.n {
            for c in 0..shape.c {
                for i in 0..shape.h {
                    for j in 0..shape.w {
                        data.push(f(b, c, i, j));
                    }
                }
            }
        }
        Self { shape, data }
    }

    pub fn shape(&self) -> Shape4 {
        self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn index(&self, b: usize, c: usize, i: usize, j: usize) -> usize {
        ((b * self.shape.c + c) * self.shape.h + i) * self.shape.w + j
    }

    #[inline]
    pub fn get(&self, b: usize, c: usize, i: usize, j: usize) -> T {
        self.data[self.index(b, c, i, j)]
    }

    #[inline]
    pub fn set(&mut self, b: usize, c: usize, i: usize, j: usize, v: T) {
        let k = self.index(b, c, i, j);
        self.data[k] = v;
    }

    /// All channels of one batch item, contiguous.
    pub fn item(&self, b: usize) -> &[T] {
        let len = self.shape.c * self.shape.plane();
        &self.data[b * len..(b + 1) * len]
    }

    pub fn item_mut(&mut self, b: usize) -> &mut [T] {
        let len = self.shape.c * self.shape.plane();
        &mut self.data[b * len..(b + 1) * len]
    }

    pub fn plane(&self, b: usize, c: usize) -> &[T] {
        let p = self.shape.plane();
        let start = (b * self.shape.c + c) * p;
        &self.data[start..start + p]
    }

    pub fn plane_mut(&mut self, b: usize, c: usize) -> &mut [T] {
        let p = self.shape.plane();
        let start = (b * self.shape.c + c) * p;
        &mut self.data[start..start + p]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<U: Real>(&self) -> Tensor4<U> {
        Tensor4 {
            shape: self.shape,
            data: self.data.iter().map(|v| U::lit(v.as_f64())).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return Err(contract(format!(
                "cannot add tensor {} into {}",
                other.shape, self.shape
            )));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn max_abs_diff(&self, other: &Self) -> T {
        assert_eq!(self.shape, other.shape, "max_abs_diff on mismatched shapes");
        self.data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |m, (&a, &b)| m.max((a - b).abs()))
    }
}

/// A single 2-D grid, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Plane<T> {
    pub h: usize,
    pub w: usize,
    pub data: Vec<T>,
}

impl<T: Copy> Plane<T> {
    pub fn new(h: usize, w: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != h * w {
            return Err(contract(format!(
                "plane {h}x{w} needs {} values, got {}",
                h * w,
                data.len()
            )));
        }
        Ok(Self { h, w, data })
    }

    pub fn filled(h: usize, w: usize, v: T) -> Self {
        Self {
            h,
            w,
            data: vec![v; h * w],
        }
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize) -> T {
        self.data[i * self.w + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: T) {
        self.data[i * self.w + j] = v;
    }

    pub fn same_dims<U>(&self, other: &Plane<U>) -> bool {
        self.h == other.h && self.w == other.w
    }
}

/// Binary planes hold 0 or 1.
pub type BinaryPlane = Plane<u8>;

impl<T: Real> Plane<T> {
    pub fn binarize(&self, threshold: T) -> BinaryPlane {
        Plane {
            h: self.h,
            w: self.w,
            data: self.data.iter().map(|&v| u8::from(v >= threshold)).collect(),
        }
    }
}

impl BinaryPlane {
    pub fn to_real<T: Real>(&self) -> Plane<T> {
        Plane {
            h: self.h,
            w: self.w,
            data: self
                .data
                .iter()
                .map(|&v| if v != 0 { T::one() } else { T::zero() })
                .collect(),
        }
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }
}

/// Dense kernel `(c_out, c_in, k_h, k_w)` with one bias per output channel.
#[derive(Debug, Clone, PartialEq)]
pub struct PlainKernel<T = f32> {
    pub c_out: usize,
    pub c_in: usize,
    pub k_h: usize,
    pub k_w: usize,
    pub weights: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Real> PlainKernel<T> {
    pub fn zeros(c_out: usize, c_in: usize, k_h: usize, k_w: usize) -> Self {
        Self {
            c_out,
            c_in,
            k_h,
            k_w,
            weights: vec![T::zero(); c_out * c_in * k_h * k_w],
            bias: vec![T::zero(); c_out],
        }
    }

    pub fn new(
        c_out: usize,
        c_in: usize,
        k_h: usize,
        k_w: usize,
        weights: Vec<T>,
        bias: Vec<T>,
    ) -> Result<Self> {
        if k_h % 2 == 0 || k_w % 2 == 0 {
            return Err(contract(format!("kernel extent {k_h}x{k_w} must be odd")));
        }
        if weights.len() != c_out * c_in * k_h * k_w || bias.len() != c_out {
            return Err(contract(format!(
                "kernel ({c_out}, {c_in}, {k_h}, {k_w}) got {} weights and {} biases",
                weights.len(),
                bias.len()
            )));
        }
        Ok(Self {
            c_out,
            c_in,
            k_h,
            k_w,
            weights,
            bias,
        })
    }

    /// Identity kernel: 1 at the centre tap of channel `c -> c`.
    pub fn delta(channels: usize, k: usize) -> Self {
        let mut kern = Self::zeros(channels, channels, k, k);
        let centre = (k / 2) * k + k / 2;
        for c in 0..channels {
            kern.weights[(c * channels + c) * k * k + centre] = T::one();
        }
        kern
    }

    #[inline]
    pub fn weight(&self, o: usize, c: usize, u: usize, v: usize) -> T {
        self.weights[((o * self.c_in + c) * self.k_h + u) * self.k_w + v]
    }

    fn patch_len(&self) -> usize {
        self.c_in * self.k_h * self.k_w
    }
}

/// Saved state of a plain convolution, consumed by [`conv2d_backward`].
#[derive(Debug, Clone)]
pub struct ConvContext<T> {
    input_shape: Shape4,
    out_h: usize,
    out_w: usize,
    pad: usize,
    /// im2col matrices, one `(c_in*k_h*k_w) x (out_h*out_w)` block per item.
    cols: Vec<T>,
}

#[derive(Debug, Clone)]
pub struct ConvGrads<T> {
    pub input: Tensor4<T>,
    pub weights: Vec<T>,
    pub bias: Vec<T>,
}

fn conv_out_dims<T: Real>(
    shape: Shape4,
    kernel: &PlainKernel<T>,
    pad: usize,
) -> Result<(usize, usize)> {
    if shape.c != kernel.c_in {
        return Err(contract(format!(
            "input has {} channels but kernel expects c_in = {}",
            shape.c, kernel.c_in
        )));
    }
    let (h, w) = (shape.h + 2 * pad, shape.w + 2 * pad);
    if h < kernel.k_h || w < kernel.k_w {
        return Err(contract(format!(
            "padded input {h}x{w} is smaller than kernel {}x{}",
            kernel.k_h, kernel.k_w
        )));
    }
    Ok((h - kernel.k_h + 1, w - kernel.k_w + 1))
}

fn im2col<T: Real>(
    item: &[T],
    shape: Shape4,
    kernel: &PlainKernel<T>,
    pad: usize,
    out_h: usize,
    out_w: usize,
    cols: &mut [T],
) {
    let opix = out_h * out_w;
    let (h, w) = (shape.h as isize, shape.w as isize);
    for c in 0..shape.c {
        let plane = &item[c * shape.plane()..(c + 1) * shape.plane()];
        for u in 0..kernel.k_h {
            for v in 0..kernel.k_w {
                let row = (c * kernel.k_h + u) * kernel.k_w + v;
                let dst = &mut cols[row * opix..(row + 1) * opix];
                for i in 0..out_h {
                    let r = i as isize + u as isize - pad as isize;
                    let line = &mut dst[i * out_w..(i + 1) * out_w];
                    if r < 0 || r >= h {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &plane[r as usize * shape.w..(r as usize + 1) * shape.w];
                    for (j, out) in line.iter_mut().enumerate() {
                        let s = j as isize + v as isize - pad as isize;
                        *out = if s < 0 || s >= w { T::zero() } else { src[s as usize] };
                    }
                }
            }
        }
    }
}

fn col2im<T: Real>(
    cols: &[T],
    shape: Shape4,
    kernel: &PlainKernel<T>,
    pad: usize,
    out_h: usize,
    out_w: usize,
    item: &mut [T],
) {
    let opix = out_h * out_w;
    let (h, w) = (shape.h as isize, shape.w as isize);
    for c in 0..shape.c {
        let plane = &mut item[c * shape.plane()..(c + 1) * shape.plane()];
        for u in 0..kernel.k_h {
            for v in 0..kernel.k_w {
                let row = (c * kernel.k_h + u) * kernel.k_w + v;
                let src = &cols[row * opix..(row + 1) * opix];
                for i in 0..out_h {
                    let r = i as isize + u as isize - pad as isize;
                    if r < 0 || r >= h {
                        continue;
                    }
                    let dst = &mut plane[r as usize * shape.w..(r as usize + 1) * shape.w];
                    for j in 0..out_w {
                        let s = j as isize + v as isize - pad as isize;
                        if s >= 0 && s < w {
                            dst[s as usize] += src[i * out_w + j];
                        }
                    }
                }
            }
        }
    }
}

/// Zero-padded cross-correlation plus per-channel bias.
pub fn conv2d_standard<T: Real>(
    input: &Tensor4<T>,
    kernel: &PlainKernel<T>,
    pad: usize,
) -> Result<Tensor4<T>> {
    conv2d_forward(input, kernel, pad).map(|(out, _)| out)
}

pub fn conv2d_forward<T: Real>(
    input: &Tensor4<T>,
    kernel: &PlainKernel<T>,
    pad: usize,
) -> Result<(Tensor4<T>, ConvContext<T>)> {
    let shape = input.shape();
    let (out_h, out_w) = conv_out_dims(shape, kernel, pad)?;
    let opix = out_h * out_w;
    let k = kernel.patch_len();
    let out_shape = Shape4::new(shape.n, kernel.c_out, out_h, out_w);
    let mut out = Tensor4::zeros(out_shape);
    let mut cols = vec![T::zero(); shape.n * k * opix];
    for b in 0..shape.n {
        let block = &mut cols[b * k * opix..(b + 1) * k * opix];
        im2col(input.item(b), shape, kernel, pad, out_h, out_w, block);
        let dst = out.item_mut(b);
        for (o, chunk) in dst.chunks_mut(opix).enumerate() {
            chunk.fill(kernel.bias[o]);
        }
        gemm(false, false, kernel.c_out, opix, k, &kernel.weights, block, T::one(), dst);
    }
    Ok((
        out,
        ConvContext {
            input_shape: shape,
            out_h,
            out_w,
            pad,
            cols,
        },
    ))
}

pub fn conv2d_backward<T: Real>(
    ctx: &ConvContext<T>,
    kernel: &PlainKernel<T>,
    grad_out: &Tensor4<T>,
) -> Result<ConvGrads<T>> {
    let shape = ctx.input_shape;
    let expected = Shape4::new(shape.n, kernel.c_out, ctx.out_h, ctx.out_w);
    if grad_out.shape() != expected || shape.c != kernel.c_in {
        return Err(contract(format!(
            "conv backward: grad {} does not match saved forward output {expected}",
            grad_out.shape()
        )));
    }
    let opix = ctx.out_h * ctx.out_w;
    let k = kernel.patch_len();
    let mut grads = ConvGrads {
        input: Tensor4::zeros(shape),
        weights: vec![T::zero(); kernel.weights.len()],
        bias: vec![T::zero(); kernel.c_out],
    };
    let mut dcols = vec![T::zero(); k * opix];
    for b in 0..shape.n {
        let g = grad_out.item(b);
        for (o, chunk) in g.chunks(opix).enumerate() {
            grads.bias[o] += chunk.iter().copied().sum::<T>();
        }
        let block = &ctx.cols[b * k * opix..(b + 1) * k * opix];
        gemm(false, true, kernel.c_out, k, opix, g, block, T::one(), &mut grads.weights);
        gemm(true, false, k, opix, kernel.c_out, &kernel.weights, g, T::zero(), &mut dcols);
        col2im(
            &dcols,
            shape,
            kernel,
            ctx.pad,
            ctx.out_h,
            ctx.out_w,
            grads.input.item_mut(b),
        );
    }
    Ok(grads)
}

/// The four grid points enclosing a fractional location, with bilinear
/// weights and their derivatives along rows and columns. Taps outside the
/// grid carry zero weight.
#[derive(Debug, Clone, Copy)]
pub struct BilinearTap<T> {
    pub index: [u32; 4],
    pub weight: [T; 4],
    pub d_row: [T; 4],
    pub d_col: [T; 4],
}

/// Splits a coordinate into cell origin and fraction. On an integer
/// coordinate at or beyond the last row/col the cell to the left is used,
/// so the derivative is one-sided toward the interior.
#[inline]
fn split_coord<T: Real>(x: T, extent: usize) -> (isize, T) {
    let f = x.floor();
    let mut origin = f.to_isize().unwrap_or(isize::MIN / 2);
    let mut frac = x - f;
    if frac == T::zero() && origin >= extent as isize - 1 {
        origin -= 1;
        frac = T::one();
    }
    (origin, frac)
}

impl<T: Real> BilinearTap<T> {
    pub fn new(h: usize, w: usize, r: T, c: T) -> Self {
        let (r0, fr) = split_coord(r, h);
        let (c0, fc) = split_coord(c, w);
        let one = T::one();
        let corners = [(r0, c0), (r0, c0 + 1), (r0 + 1, c0), (r0 + 1, c0 + 1)];
        let weight = [(one - fr) * (one - fc), (one - fr) * fc, fr * (one - fc), fr * fc];
        let d_row = [-(one - fc), -fc, one - fc, fc];
        let d_col = [-(one - fr), one - fr, -fr, fr];
        let mut tap = Self {
            index: [0; 4],
            weight,
            d_row,
            d_col,
        };
        for (k, &(ri, ci)) in corners.iter().enumerate() {
            if ri >= 0 && ci >= 0 && (ri as usize) < h && (ci as usize) < w {
                tap.index[k] = (ri as usize * w + ci as usize) as u32;
            } else {
                tap.weight[k] = T::zero();
                tap.d_row[k] = T::zero();
                tap.d_col[k] = T::zero();
            }
        }
        tap
    }

    #[inline]
    pub fn sample(&self, plane: &[T]) -> T {
        let mut acc = T::zero();
        for k in 0..4 {
            acc += self.weight[k] * plane[self.index[k] as usize];
        }
        acc
    }

    /// `(d value / d row, d value / d col)`.
    #[inline]
    pub fn gradient(&self, plane: &[T]) -> (T, T) {
        let (mut gr, mut gc) = (T::zero(), T::zero());
        for k in 0..4 {
            let v = plane[self.index[k] as usize];
            gr += self.d_row[k] * v;
            gc += self.d_col[k] * v;
        }
        (gr, gc)
    }
}

/// Bilinear read at a fractional `(r, c)` with zero padding.
pub fn bilinear_sample<T: Real>(plane: &[T], h: usize, w: usize, r: T, c: T) -> T {
    BilinearTap::new(h, w, r, c).sample(plane)
}

/// Vector-Jacobian product of [`bilinear_sample`]: returns the gradient with
/// respect to `(r, c)` and accumulates `grad * weight` into `grad_plane`.
pub fn bilinear_sample_backward<T: Real>(
    plane: &[T],
    h: usize,
    w: usize,
    r: T,
    c: T,
    grad: T,
    grad_plane: &mut [T],
) -> (T, T) {
    let tap = BilinearTap::new(h, w, r, c);
    for k in 0..4 {
        grad_plane[tap.index[k] as usize] += grad * tap.weight[k];
    }
    let (gr, gc) = tap.gradient(plane);
    (grad * gr, grad * gc)
}

/// 2x2 max pooling. The returned indices point at each window's argmax
/// within its input plane (first in row-major order on ties).
pub fn pool_down2<T: Real>(input: &Tensor4<T>) -> Result<(Tensor4<T>, Vec<u32>)> {
    let s = input.shape();
    if s.h % 2 != 0 || s.w % 2 != 0 {
        return Err(contract(format!("pool_down2 needs even dims, got {s}")));
    }
    let out_shape = Shape4::new(s.n, s.c, s.h / 2, s.w / 2);
    let mut out = Tensor4::zeros(out_shape);
    let mut argmax = vec![0u32; out_shape.len()];
    let (oh, ow) = (s.h / 2, s.w / 2);
    for b in 0..s.n {
        for c in 0..s.c {
            let src = input.plane(b, c);
            let base = (b * s.c + c) * oh * ow;
            let dst = out.plane_mut(b, c);
            for i in 0..oh {
                for j in 0..ow {
                    let mut best = (2 * i) * s.w + 2 * j;
                    for cand in [
                        (2 * i) * s.w + 2 * j + 1,
                        (2 * i + 1) * s.w + 2 * j,
                        (2 * i + 1) * s.w + 2 * j + 1,
                    ] {
                        if src[cand] > src[best] {
                            best = cand;
                        }
                    }
                    dst[i * ow + j] = src[best];
                    argmax[base + i * ow + j] = best as u32;
                }
            }
        }
    }
    Ok((out, argmax))
}

pub fn pool_down2_backward<T: Real>(
    grad_out: &Tensor4<T>,
    argmax: &[u32],
    input_shape: Shape4,
) -> Result<Tensor4<T>> {
    let g = grad_out.shape();
    if g != Shape4::new(input_shape.n, input_shape.c, input_shape.h / 2, input_shape.w / 2)
        || argmax.len() != g.len()
    {
        return Err(contract(format!(
            "pool backward: grad {g} does not match input {input_shape}"
        )));
    }
    let mut grad = Tensor4::zeros(input_shape);
    for b in 0..g.n {
        for c in 0..g.c {
            let base = (b * g.c + c) * g.plane();
            let src = grad_out.plane(b, c);
            let dst = grad.plane_mut(b, c);
            for (k, &v) in src.iter().enumerate() {
                dst[argmax[base + k] as usize] += v;
            }
        }
    }
    Ok(grad)
}

/// Nearest-neighbour doubling.
pub fn upsample2<T: Real>(input: &Tensor4<T>) -> Tensor4<T> {
    let s = input.shape();
    let out_shape = Shape4::new(s.n, s.c, s.h * 2, s.w * 2);
    let mut out = Tensor4::zeros(out_shape);
    for b in 0..s.n {
        for c in 0..s.c {
            let src = input.plane(b, c);
            let dst = out.plane_mut(b, c);
            for i in 0..out_shape.h {
                for j in 0..out_shape.w {
                    dst[i * out_shape.w + j] = src[(i / 2) * s.w + j / 2];
                }
            }
        }
    }
    out
}

pub fn upsample2_backward<T: Real>(grad_out: &Tensor4<T>) -> Result<Tensor4<T>> {
    let g = grad_out.shape();
    if g.h % 2 != 0 || g.w % 2 != 0 {
        return Err(contract(format!("upsample backward needs even dims, got {g}")));
    }
    let in_shape = Shape4::new(g.n, g.c, g.h / 2, g.w / 2);
    let mut grad = Tensor4::zeros(in_shape);
    for b in 0..g.n {
        for c in 0..g.c {
            let src = grad_out.plane(b, c);
            let dst = grad.plane_mut(b, c);
            for i in 0..g.h {
                for j in 0..g.w {
                    dst[(i / 2) * in_shape.w + j / 2] += src[i * g.w + j];
                }
            }
        }
    }
    Ok(grad)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
}

#[inline]
pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub fn pointwise<T: Real>(input: &Tensor4<T>, kind: Activation) -> Tensor4<T> {
    match kind {
        Activation::Relu => input.map(|v| v.max(T::zero())),
        Activation::Sigmoid => input.map(sigmoid),
    }
}

/// VJP of [`pointwise`], given the forward *output*.
pub fn pointwise_backward<T: Real>(
    output: &Tensor4<T>,
    grad_out: &Tensor4<T>,
    kind: Activation,
) -> Result<Tensor4<T>> {
    if output.shape() != grad_out.shape() {
        return Err(contract(format!(
            "pointwise backward: grad {} vs output {}",
            grad_out.shape(),
            output.shape()
        )));
    }
    let data = output
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&y, &g)| match kind {
            Activation::Relu => {
                if y > T::zero() {
                    g
                } else {
                    T::zero()
                }
            }
            Activation::Sigmoid => g * y * (T::one() - y),
        })
        .collect();
    Tensor4::from_vec(output.shape(), data)
}

/// Concatenates along the channel axis.
pub fn concat_channels<T: Real>(a: &Tensor4<T>, b: &Tensor4<T>) -> Result<Tensor4<T>> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.n != sb.n || sa.h != sb.h || sa.w != sb.w {
        return Err(contract(format!("cannot concatenate {sa} with {sb}")));
    }
    let shape = Shape4::new(sa.n, sa.c + sb.c, sa.h, sa.w);
    let mut data = Vec::with_capacity(shape.len());
    for n in 0..sa.n {
        data.extend_from_slice(a.item(n));
        data.extend_from_slice(b.item(n));
    }
    Tensor4::from_vec(shape, data)
}

/// Inverse of [`concat_channels`]: splits after the first `c_first` channels.
pub fn split_channels<T: Real>(
    t: &Tensor4<T>,
    c_first: usize,
) -> Result<(Tensor4<T>, Tensor4<T>)> {
    let s = t.shape();
    if c_first > s.c {
        return Err(contract(format!("cannot split {c_first} channels off {s}")));
    }
    let sa = Shape4::new(s.n, c_first, s.h, s.w);
    let sb = Shape4::new(s.n, s.c - c_first, s.h, s.w);
    let mut a = Vec::with_capacity(sa.len());
    let mut b = Vec::with_capacity(sb.len());
    for n in 0..s.n {
        let item = t.item(n);
        let cut = c_first * s.plane();
        a.extend_from_slice(&item[..cut]);
        b.extend_from_slice(&item[cut..]);
    }
    Ok((Tensor4::from_vec(sa, a)?, Tensor4::from_vec(sb, b)?))
}

pub const NORM_EPS: f64 = 1e-5;

/// Saved statistics of [`instance_norm`].
#[derive(Debug, Clone)]
pub struct NormContext<T> {
    normalized: Tensor4<T>,
    /// `1 / sqrt(var + eps)` per `(batch, channel)`.
    inv_std: Vec<T>,
}

/// Per-sample, per-channel normalization over the spatial plane followed
/// by the affine map `gamma * x_hat + beta`.
pub fn instance_norm<T: Real>(input: &Tensor4<T>, gamma: &[T], beta: &[T]) -> Result<(Tensor4<T>, NormContext<T>)> {
    let s = input.shape();
    if gamma.len() != s.c || beta.len() != s.c {
        return Err(contract(format!(
            "instance norm over {s} needs {} scales and shifts, got {} and {}",
            s.c,
            gamma.len(),
            beta.len()
        )));
    }
    let hw = T::lit(s.plane() as f64);
    let eps = T::lit(NORM_EPS);
    let mut normalized = Tensor4::zeros(s);
    let mut out = Tensor4::zeros(s);
    let mut inv_std = Vec::with_capacity(s.n * s.c);
    for b in 0..s.n {
        for c in 0..s.c {
            let x = input.plane(b, c);
            let mean = x.iter().copied().sum::<T>() / hw;
            let var = x.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / hw;
            let r = T::one() / (var + eps).sqrt();
            inv_std.push(r);
            let base = normalized.index(b, c, 0, 0);
            for (k, &v) in x.iter().enumerate() {
                let xn = (v - mean) * r;
                normalized.data_mut()[base + k] = xn;
                out.data_mut()[base + k] = gamma[c] * xn + beta[c];
            }
        }
    }
    Ok((out, NormContext { normalized, inv_std }))
}

pub struct NormGrads<T> {
    pub input: Tensor4<T>,
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
}

pub fn instance_norm_backward<T: Real>(ctx: &NormContext<T>, gamma: &[T], grad_out: &Tensor4<T>) -> Result<NormGrads<T>> {
    let s = ctx.normalized.shape();
    if grad_out.shape() != s || gamma.len() != s.c {
        return Err(contract(format!("instance norm backward: grad {} vs {s}", grad_out.shape())));
    }
    let hw = T::lit(s.plane() as f64);
    let mut input = Tensor4::zeros(s);
    let mut g_gamma = vec![T::zero(); s.c];
    let mut g_beta = vec![T::zero(); s.c];
    for b in 0..s.n {
        for c in 0..s.c {
            let g = grad_out.plane(b, c);
            let xn = ctx.normalized.plane(b, c);
            let sum_g: T = g.iter().copied().sum();
            let sum_gx: T = g.iter().zip(xn).map(|(&a, &x)| a * x).sum();
            g_beta[c] += sum_g;
            g_gamma[c] += sum_gx;
            let k = gamma[c] * ctx.inv_std[b * s.c + c] / hw;
            for ((d, &gv), &x) in input.plane_mut(b, c).iter_mut().zip(g).zip(xn) {
                *d = k * (hw * gv - sum_g - x * sum_gx);
            }
        }
    }
    Ok(NormGrads {
        input,
        gamma: g_gamma,
        beta: g_beta,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(rng: &mut ChaCha8Rng, shape: Shape4) -> Tensor4<f32> {
        Tensor4::from_fn(shape, |_, _, _, _| rng.gen_range(-1.0..1.0))
    }

    fn random_kernel(rng: &mut ChaCha8Rng, c_out: usize, c_in: usize, k: usize) -> PlainKernel<f32> {
        PlainKernel::new(
            c_out,
            c_in,
            k,
            k,
            (0..c_out * c_in * k * k).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            (0..c_out).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    /// Quadruple-loop direct summation.
    fn direct_conv(input: &Tensor4<f32>, kern: &PlainKernel<f32>, pad: usize) -> Tensor4<f32> {
        let s = input.shape();
        let oh = s.h + 2 * pad - kern.k_h + 1;
        let ow = s.w + 2 * pad - kern.k_w + 1;
        Tensor4::from_fn(Shape4::new(s.n, kern.c_out, oh, ow), |b, o, i, j| {
            let mut acc = kern.bias[o] as f64;
            for c in 0..s.c {
                for u in 0..kern.k_h {
                    for v in 0..kern.k_w {
                        let r = i as isize + u as isize - pad as isize;
                        let q = j as isize + v as isize - pad as isize;
                        if r >= 0 && q >= 0 && (r as usize) < s.h && (q as usize) < s.w {
                            acc += kern.weight(o, c, u, v) as f64
                                * input.get(b, c, r as usize, q as usize) as f64;
                        }
                    }
                }
            }
            acc as f32
        })
    }

    #[test]
    fn ones_conv_counts_in_bounds_taps() {
        let input = Tensor4::filled(Shape4::new(1, 1, 3, 3), 1.0f32);
        let kern = PlainKernel::new(1, 1, 3, 3, vec![1.0; 9], vec![0.0]).unwrap();
        let out = conv2d_standard(&input, &kern, 1).unwrap();
        assert_eq!(out.get(0, 0, 1, 1), 9.0);
        for (i, j) in [(0, 0), (0, 2), (2, 0), (2, 2)] {
            assert_eq!(out.get(0, 0, i, j), 4.0);
        }
    }

    #[test]
    fn delta_kernel_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let input = random_tensor(&mut rng, Shape4::new(2, 3, 6, 5));
        let out = conv2d_standard(&input, &PlainKernel::delta(3, 3), 1).unwrap();
        assert_eq!(out, input);
    }

    #[test]
    fn conv_matches_direct_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let input = random_tensor(&mut rng, Shape4::new(2, 3, 5, 5));
            let kern = random_kernel(&mut rng, 4, 3, 3);
            let got = conv2d_standard(&input, &kern, 1).unwrap();
            let want = direct_conv(&input, &kern, 1);
            assert!(got.max_abs_diff(&want) <= 1e-5);
        }
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let input = Tensor4::<f32>::zeros(Shape4::new(1, 2, 4, 4));
        let kern = PlainKernel::<f32>::zeros(1, 3, 3, 3);
        let err = conv2d_standard(&input, &kern, 1).unwrap_err().to_string();
        assert!(err.contains('2') && err.contains('3'), "{err}");
    }

    #[test]
    fn bilinear_examples() {
        let plane = [0.0f64, 1.0, 2.0, 3.0];
        assert_eq!(bilinear_sample(&plane, 2, 2, 0.5, 0.5), 1.5);
        assert_eq!(bilinear_sample(&plane, 2, 2, 1.0, 0.0), 2.0);
        assert!((bilinear_sample(&plane, 2, 2, 1.0, 0.5) - 2.5).abs() < 1e-12);
        assert!((bilinear_sample(&plane, 2, 2, -0.5, 0.5) - 0.25).abs() < 1e-12);
        assert_eq!(bilinear_sample(&plane, 2, 2, -3.0, 7.5), 0.0);
    }

    #[test]
    fn bilinear_exact_on_grid_points() {
        let plane: Vec<f64> = (0..12).map(|v| v as f64 * 1.5 - 4.0).collect();
        for i in 0..3 {
            for j in 0..4 {
                assert_eq!(bilinear_sample(&plane, 3, 4, i as f64, j as f64), plane[i * 4 + j]);
            }
        }
    }

    #[test]
    fn pool_and_upsample_examples() {
        let t = Tensor4::from_vec(Shape4::new(1, 1, 2, 2), vec![1.0f32, 2.0, 3.0, 4.0]).unwrap();
        let (p, idx) = pool_down2(&t).unwrap();
        assert_eq!(p.data(), &[4.0]);
        assert_eq!(idx, vec![3]);
        let u = upsample2(&Tensor4::from_vec(Shape4::new(1, 1, 1, 1), vec![5.0f32]).unwrap());
        assert_eq!(u.data(), &[5.0; 4]);
    }

    #[test]
    fn pool_ties_pick_first_index() {
        let t = Tensor4::from_vec(Shape4::new(1, 1, 2, 2), vec![7.0f32; 4]).unwrap();
        assert_eq!(pool_down2(&t).unwrap().1, vec![0]);
    }

    #[test]
    fn pool_rejects_odd_dims() {
        let t = Tensor4::<f32>::zeros(Shape4::new(1, 1, 3, 4));
        assert!(pool_down2(&t).is_err());
    }

    #[test]
    fn round_trip_laws() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let t = random_tensor(&mut rng, Shape4::new(2, 3, 4, 6));
        let up = upsample2(&t);
        assert_eq!(pool_down2(&up).unwrap().0, t);
        let pooled = pool_down2(&t).unwrap().0;
        let again = pool_down2(&upsample2(&pooled)).unwrap().0;
        assert_eq!(again, pooled);
    }

    #[test]
    fn activations() {
        let t = Tensor4::from_vec(Shape4::new(1, 1, 1, 3), vec![-2.0f64, 3.0, 0.0]).unwrap();
        assert_eq!(pointwise(&t, Activation::Relu).data(), &[0.0, 3.0, 0.0]);
        let s = pointwise(&t, Activation::Sigmoid);
        assert_eq!(s.data()[2], 0.5);
        let g = pointwise_backward(&s, &Tensor4::filled(t.shape(), 1.0), Activation::Sigmoid).unwrap();
        assert_eq!(g.data()[2], 0.25);
        let h = 1e-5;
        let fd = (sigmoid(h) - sigmoid(-h)) / (2.0 * h);
        assert!((fd - 0.25f64).abs() < 1e-6);
        let tail = sigmoid(-30.0f64);
        assert!(tail > 0.0 && tail < 1.0);
    }

    #[test]
    fn concat_split_inverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = random_tensor(&mut rng, Shape4::new(2, 2, 3, 3));
        let b = random_tensor(&mut rng, Shape4::new(2, 3, 3, 3));
        let cat = concat_channels(&a, &b).unwrap();
        assert_eq!(cat.shape().c, 5);
        let (x, y) = split_channels(&cat, 2).unwrap();
        assert_eq!((x, y), (a, b));
    }

    #[test]
    fn instance_norm_statistics() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = random_tensor(&mut rng, Shape4::new(2, 3, 5, 7)).map(|v| 4.0 * v + 2.5);
        let (gamma, beta) = ([1.0, 2.0, 0.5], [0.0, -1.0, 3.0]);
        let (y, _) = instance_norm(&x, &gamma, &beta).unwrap();
        for b in 0..2 {
            for c in 0..3 {
                let p = y.plane(b, c);
                let mean = p.iter().sum::<f32>() / p.len() as f32;
                let var = p.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / p.len() as f32;
                assert!((mean - beta[c]).abs() < 1e-5, "{mean}");
                assert!((var.sqrt() - gamma[c]).abs() < 1e-3, "{var}");
            }
        }
        // a constant plane maps to its shift
        let (z, _) = instance_norm(&Tensor4::filled(Shape4::new(1, 1, 3, 3), 7.0f32), &[2.0], &[0.25]).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.25));
        assert!(instance_norm(&x, &gamma[..2], &beta).is_err());
    }
}
