//! Shape self-learning strip convolution.
//!
//! Four strips of length `m` (horizontal, vertical, diagonal, anti-diagonal)
//! are laid through every output position. Each non-midpoint tap is displaced
//! perpendicular to its strip; displacements grow outward from the fixed
//! midpoint one bounded increment at a time, so neighbouring taps never move
//! more than one pixel apart. Displaced taps are read bilinearly and the four
//! directional correlations are summed.

use crate::error::{contract, Result};
use crate::grid::{conv2d_backward, conv2d_forward, BilinearTap, ConvContext, PlainKernel, Shape4, Tensor4};
use crate::real::{gemm, Real};

pub const DEFAULT_STRIP_LENGTH: usize = 9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Direction {
    Horizontal,
    Vertical,
    Diagonal,
    AntiDiagonal,
}

impl Direction {
    pub const ALL: [Direction; 4] = [
        Direction::Horizontal,
        Direction::Vertical,
        Direction::Diagonal,
        Direction::AntiDiagonal,
    ];

    pub fn slot(self) -> usize {
        self as usize
    }

    /// Undisplaced location of tap `t` for output `(i, j)`.
    #[inline]
    pub fn base(self, i: isize, j: isize, t: isize) -> (isize, isize) {
        match self {
            Direction::Horizontal => (i, j + t),
            Direction::Vertical => (i + t, j),
            Direction::Diagonal => (i + t, j + t),
            Direction::AntiDiagonal => (i - t, j + t),
        }
    }

    /// Unit displacement perpendicular to the strip, as `(d_row, d_col)`.
    pub fn normal<T: Real>(self) -> (T, T) {
        let s = T::lit(std::f64::consts::FRAC_1_SQRT_2);
        match self {
            Direction::Horizontal => (T::one(), T::zero()),
            Direction::Vertical => (T::zero(), T::one()),
            Direction::Diagonal => (s, -s),
            Direction::AntiDiagonal => (s, s),
        }
    }
}

/// Which of the four strips take part in the sum.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct DirectionSet([bool; 4]);

impl DirectionSet {
    pub const ALL: DirectionSet = DirectionSet([true; 4]);
    pub const XY: DirectionSet = DirectionSet([true, true, false, false]);
    pub const ZW: DirectionSet = DirectionSet([false, false, true, true]);

    pub fn contains(self, d: Direction) -> bool {
        self.0[d.slot()]
    }

    pub fn count(self) -> usize {
        self.0.iter().filter(|&&b| b).count()
    }

    pub fn iter(self) -> impl Iterator<Item = Direction> {
        Direction::ALL.into_iter().filter(move |&d| self.contains(d))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OffsetMode {
    /// Predicted per position by a 3x3 convolution of the layer input.
    Dynamic,
    /// One learnable increment vector per layer, shared by all positions.
    Static,
    /// Rigid strips.
    Off,
}

#[derive(Debug, Clone, PartialEq)]
pub enum OffsetSource<T> {
    Dynamic(PlainKernel<T>),
    /// Raw increments laid out `(4, m - 1)`.
    Static(Vec<T>),
    Off,
}

/// Strip weights `(4, c_out, c_in, m)`, shared bias and the offset source.
#[derive(Debug, Clone, PartialEq)]
pub struct StripKernelSet<T = f32> {
    pub m: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub directions: DirectionSet,
    pub weights: Vec<T>,
    pub bias: Vec<T>,
    pub offsets: OffsetSource<T>,
}

impl<T: Real> StripKernelSet<T> {
    /// All-zero parameters for the given geometry.
    pub fn zeros(
        m: usize,
        c_in: usize,
        c_out: usize,
        directions: DirectionSet,
        mode: OffsetMode,
    ) -> Result<Self> {
        check_length(m)?;
        let offsets = match mode {
            OffsetMode::Dynamic => OffsetSource::Dynamic(PlainKernel::zeros(4 * (m - 1), c_in, 3, 3)),
            OffsetMode::Static => OffsetSource::Static(vec![T::zero(); 4 * (m - 1)]),
            OffsetMode::Off => OffsetSource::Off,
        };
        Ok(Self {
            m,
            c_in,
            c_out,
            directions,
            weights: vec![T::zero(); 4 * c_out * c_in * m],
            bias: vec![T::zero(); c_out],
            offsets,
        })
    }

    pub fn half(&self) -> usize {
        (self.m - 1) / 2
    }

    #[inline]
    pub fn weight_index(&self, d: Direction, o: usize, c: usize, t_idx: usize) -> usize {
        ((d.slot() * self.c_out + o) * self.c_in + c) * self.m + t_idx
    }

    /// Weights of one direction as a `c_out x (c_in * m)` matrix.
    fn direction_block(&self, d: Direction) -> &[T] {
        let len = self.c_out * self.c_in * self.m;
        &self.weights[d.slot() * len..(d.slot() + 1) * len]
    }

    pub fn validate(&self) -> Result<()> {
        check_length(self.m)?;
        if self.weights.len() != 4 * self.c_out * self.c_in * self.m || self.bias.len() != self.c_out {
            return Err(contract(format!(
                "strip kernel (4, {}, {}, {}) has {} weights and {} biases",
                self.c_out,
                self.c_in,
                self.m,
                self.weights.len(),
                self.bias.len()
            )));
        }
        match &self.offsets {
            OffsetSource::Dynamic(p) if p.c_out != 4 * (self.m - 1) || p.c_in != self.c_in => {
                Err(contract(format!(
                    "offset predictor maps {} -> {} channels, expected {} -> {}",
                    p.c_in,
                    p.c_out,
                    self.c_in,
                    4 * (self.m - 1)
                )))
            }
            OffsetSource::Static(v) if v.len() != 4 * (self.m - 1) => Err(contract(format!(
                "static offsets hold {} values, expected {}",
                v.len(),
                4 * (self.m - 1)
            ))),
            _ => Ok(()),
        }
    }
}

fn check_length(m: usize) -> Result<()> {
    if m < 3 || m % 2 == 0 {
        return Err(contract(format!("strip length must be odd and >= 3, got {m}")));
    }
    Ok(())
}

/// Position of tap `t != 0` among the `m - 1` displaced taps: positive side
/// first (`t = 1..=n`), then negative side (`t = -1..=-n`), each ordered
/// outward from the midpoint.
#[inline]
pub fn tap_slot(half: usize, t: isize) -> Option<usize> {
    match t {
        0 => None,
        t if t > 0 => Some(t as usize - 1),
        t => Some(half + (-t) as usize - 1),
    }
}

/// Per-position perpendicular displacement of every non-midpoint tap, laid
/// out `(batch, 4, m - 1, h, w)`, together with the squashed increments it
/// was accumulated from.
#[derive(Debug, Clone, PartialEq)]
pub struct OffsetField<T = f32> {
    pub n: usize,
    pub m: usize,
    pub h: usize,
    pub w: usize,
    squashed: Vec<T>,
    displacement: Vec<T>,
}

impl<T: Real> OffsetField<T> {
    pub fn zeros(n: usize, m: usize, h: usize, w: usize) -> Self {
        let len = n * 4 * (m - 1) * h * w;
        Self {
            n,
            m,
            h,
            w,
            squashed: vec![T::zero(); len],
            displacement: vec![T::zero(); len],
        }
    }

    pub fn half(&self) -> usize {
        (self.m - 1) / 2
    }

    #[inline]
    fn offset(&self, b: usize, d: usize, slot: usize) -> usize {
        ((b * 4 + d) * (self.m - 1) + slot) * self.h * self.w
    }

    /// Displacement of tap `t in [-n, n]`; the midpoint is always 0.
    pub fn displacement(&self, b: usize, d: Direction, t: isize, i: usize, j: usize) -> T {
        match tap_slot(self.half(), t) {
            None => T::zero(),
            Some(s) => self.displacement[self.offset(b, d.slot(), s) + i * self.w + j],
        }
    }

    pub fn raw_displacements(&self) -> &[T] {
        &self.displacement
    }

    /// True when every strip keeps its midpoint fixed and adjacent taps
    /// differ by at most one pixel.
    pub fn is_continuous(&self) -> bool {
        let n = self.half() as isize;
        for b in 0..self.n {
            for d in Direction::ALL {
                for i in 0..self.h {
                    for j in 0..self.w {
                        if self.displacement(b, d, 0, i, j) != T::zero() {
                            return false;
                        }
                        for t in 1..=n {
                            for side in [1, -1] {
                                let outer = self.displacement(b, d, side * t, i, j);
                                let inner = self.displacement(b, d, side * (t - 1), i, j);
                                if !((outer - inner).abs() <= T::one()) {
                                    return false;
                                }
                            }
                        }
                    }
                }
            }
        }
        true
    }
}

/// Raw (unbounded) increments: the offset predictor applied to the input.
pub fn predict_raw_increments<T: Real>(
    input: &Tensor4<T>,
    predictor: &PlainKernel<T>,
    m: usize,
) -> Result<Tensor4<T>> {
    check_predictor(predictor, input.shape(), m)?;
    crate::grid::conv2d_standard(input, predictor, predictor.k_h / 2)
}

fn check_predictor<T: Real>(predictor: &PlainKernel<T>, shape: Shape4, m: usize) -> Result<()> {
    check_length(m)?;
    if predictor.c_in != shape.c || predictor.c_out != 4 * (m - 1) {
        return Err(contract(format!(
            "offset predictor maps {} -> {} channels; input has {} and strips need {}",
            predictor.c_in,
            predictor.c_out,
            shape.c,
            4 * (m - 1)
        )));
    }
    Ok(())
}

/// Squashes raw increments through `tanh` and sums them outward from the
/// midpoint on each side independently.
pub fn accumulate_offsets<T: Real>(raw: &Tensor4<T>, m: usize) -> Result<OffsetField<T>> {
    check_length(m)?;
    let s = raw.shape();
    if s.c != 4 * (m - 1) {
        return Err(contract(format!(
            "raw increments have {} channels, strips of length {m} need {}",
            s.c,
            4 * (m - 1)
        )));
    }
    let mut field = OffsetField::zeros(s.n, m, s.h, s.w);
    let half = field.half();
    let hw = s.plane();
    for b in 0..s.n {
        for d in 0..4 {
            for side in 0..2 {
                let mut acc = vec![T::zero(); hw];
                for step in 0..half {
                    let slot = side * half + step;
                    let src = raw.plane(b, d * (m - 1) + slot);
                    let off = field.offset(b, d, slot);
                    for p in 0..hw {
                        let q = src[p].tanh();
                        let next = step_within_one(acc[p], acc[p] + q);
                        acc[p] = next;
                        field.squashed[off + p] = q;
                        field.displacement[off + p] = next;
                    }
                }
            }
        }
    }
    Ok(field)
}

/// `tanh` saturates to exactly +-1 in floating point and the rounded sum
/// can then land one ulp beyond `prev +- 1`; pull it back.
#[inline]
fn step_within_one<T: Real>(prev: T, mut next: T) -> T {
    while (next - prev).abs() > T::one() {
        let ulp = (next.abs() * T::epsilon()).max(T::min_positive_value());
        next = if next > prev { next - ulp } else { next + ulp };
    }
    next
}

/// VJP of [`accumulate_offsets`]: maps a displacement gradient (laid out
/// like the field) back to the raw increments.
pub fn accumulate_offsets_backward<T: Real>(field: &OffsetField<T>, grad_disp: &[T]) -> Result<Tensor4<T>> {
    if grad_disp.len() != field.displacement.len() {
        return Err(contract(format!(
            "displacement gradient has {} values, field has {}",
            grad_disp.len(),
            field.displacement.len()
        )));
    }
    let (m, half, hw) = (field.m, field.half(), field.h * field.w);
    let mut grad = Tensor4::zeros(Shape4::new(field.n, 4 * (m - 1), field.h, field.w));
    for b in 0..field.n {
        for d in 0..4 {
            for side in 0..2 {
                let mut tail = vec![T::zero(); hw];
                for step in (0..half).rev() {
                    let slot = side * half + step;
                    let off = field.offset(b, d, slot);
                    let dst = grad.plane_mut(b, d * (m - 1) + slot);
                    for p in 0..hw {
                        tail[p] += grad_disp[off + p];
                        let q = field.squashed[off + p];
                        dst[p] = tail[p] * (T::one() - q * q);
                    }
                }
            }
        }
    }
    Ok(grad)
}

#[derive(Debug, Clone, Copy)]
struct StripTap<T> {
    index: [u32; 4],
    weight: [T; 4],
    /// Derivative of each corner weight with respect to the displacement.
    d_disp: [T; 4],
}

/// Forward state needed by [`ssl_backward`].
#[derive(Debug, Clone)]
pub struct SslContext<T> {
    input: Tensor4<T>,
    offsets: OffsetField<T>,
    m: usize,
    c_out: usize,
    directions: DirectionSet,
    /// `(batch * 4 + direction)` -> taps laid out `(m, h * w)`.
    taps: Vec<Vec<StripTap<T>>>,
    /// `(batch * 4 + direction)` -> sampled input `(c_in * m, h * w)`.
    samples: Vec<Vec<T>>,
}

#[derive(Debug, Clone)]
pub struct SslGrads<T> {
    pub input: Tensor4<T>,
    pub weights: Vec<T>,
    pub bias: Vec<T>,
    pub raw_increments: Tensor4<T>,
}

fn check_forward<T: Real>(input: &Tensor4<T>, kernels: &StripKernelSet<T>, offsets: &OffsetField<T>) -> Result<()> {
    kernels.validate()?;
    let s = input.shape();
    if s.c != kernels.c_in {
        return Err(contract(format!(
            "input has {} channels, strip kernels expect {}",
            s.c, kernels.c_in
        )));
    }
    if (offsets.n, offsets.m, offsets.h, offsets.w) != (s.n, kernels.m, s.h, s.w) {
        return Err(contract(format!(
            "offset field (n={}, m={}, {}x{}) does not fit input {s} with m={}",
            offsets.n, offsets.m, offsets.h, offsets.w, kernels.m
        )));
    }
    Ok(())
}

/// Sum of the four displaced strip correlations plus bias.
pub fn ssl_forward<T: Real>(
    input: &Tensor4<T>,
    kernels: &StripKernelSet<T>,
    offsets: &OffsetField<T>,
) -> Result<Tensor4<T>> {
    ssl_forward_ctx(input, kernels, offsets.clone()).map(|(y, _)| y)
}

pub fn ssl_forward_ctx<T: Real>(
    input: &Tensor4<T>,
    kernels: &StripKernelSet<T>,
    offsets: OffsetField<T>,
) -> Result<(Tensor4<T>, SslContext<T>)> {
    check_forward(input, kernels, &offsets)?;
    let s = input.shape();
    let (m, hw, half) = (kernels.m, s.plane(), kernels.half() as isize);
    let k = kernels.c_in * m;
    let mut out = Tensor4::zeros(Shape4::new(s.n, kernels.c_out, s.h, s.w));
    let mut taps = vec![Vec::new(); s.n * 4];
    let mut samples = vec![Vec::new(); s.n * 4];

    for b in 0..s.n {
        let dst = out.item_mut(b);
        for (o, chunk) in dst.chunks_mut(hw).enumerate() {
            chunk.fill(kernels.bias[o]);
        }
        for d in kernels.directions.iter() {
            let (nr, nc) = d.normal::<T>();
            let mut strip = Vec::with_capacity(m * hw);
            for t in -half..=half {
                for i in 0..s.h {
                    for j in 0..s.w {
                        let delta = offsets.displacement(b, d, t, i, j);
                        let (r0, c0) = d.base(i as isize, j as isize, t);
                        let r = T::lit(r0 as f64) + delta * nr;
                        let c = T::lit(c0 as f64) + delta * nc;
                        let tap = BilinearTap::new(s.h, s.w, r, c);
                        let mut d_disp = [T::zero(); 4];
                        for q in 0..4 {
                            d_disp[q] = tap.d_row[q] * nr + tap.d_col[q] * nc;
                        }
                        strip.push(StripTap {
                            index: tap.index,
                            weight: tap.weight,
                            d_disp,
                        });
                    }
                }
            }
            let mut sampled = vec![T::zero(); k * hw];
            for c in 0..kernels.c_in {
                let plane = input.plane(b, c);
                let rows = &mut sampled[c * m * hw..(c + 1) * m * hw];
                for (v, tap) in rows.iter_mut().zip(&strip) {
                    let mut acc = T::zero();
                    for q in 0..4 {
                        acc += tap.weight[q] * plane[tap.index[q] as usize];
                    }
                    *v = acc;
                }
            }
            gemm(false, false, kernels.c_out, hw, k, kernels.direction_block(d), &sampled, T::one(), dst);
            taps[b * 4 + d.slot()] = strip;
            samples[b * 4 + d.slot()] = sampled;
        }
    }
    let ctx = SslContext {
        input: input.clone(),
        offsets,
        m,
        c_out: kernels.c_out,
        directions: kernels.directions,
        taps,
        samples,
    };
    Ok((out, ctx))
}

/// VJP of [`ssl_forward`] composed with [`accumulate_offsets`].
pub fn ssl_backward<T: Real>(
    ctx: &SslContext<T>,
    kernels: &StripKernelSet<T>,
    grad_out: &Tensor4<T>,
) -> Result<SslGrads<T>> {
    let s = ctx.input.shape();
    if grad_out.shape() != Shape4::new(s.n, ctx.c_out, s.h, s.w)
        || kernels.m != ctx.m
        || kernels.c_in != s.c
        || kernels.c_out != ctx.c_out
        || kernels.directions != ctx.directions
    {
        return Err(contract(format!(
            "ssl backward: grad {} and kernels do not match the saved forward of {s}",
            grad_out.shape()
        )));
    }
    let (m, hw) = (ctx.m, s.plane());
    let k = s.c * m;
    let mut grads = SslGrads {
        input: Tensor4::zeros(s),
        weights: vec![T::zero(); kernels.weights.len()],
        bias: vec![T::zero(); ctx.c_out],
        raw_increments: Tensor4::zeros(Shape4::new(s.n, 4 * (m - 1), s.h, s.w)),
    };
    let mut grad_disp = vec![T::zero(); ctx.offsets.raw_displacements().len()];
    let mut grad_samples = vec![T::zero(); k * hw];
    let half = (m - 1) / 2;
    let block = ctx.c_out * k;

    for b in 0..s.n {
        let g = grad_out.item(b);
        for (o, chunk) in g.chunks(hw).enumerate() {
            grads.bias[o] += chunk.iter().copied().sum::<T>();
        }
        for d in ctx.directions.iter() {
            let slot = b * 4 + d.slot();
            let (strip, sampled) = (&ctx.taps[slot], &ctx.samples[slot]);
            let gw = &mut grads.weights[d.slot() * block..(d.slot() + 1) * block];
            gemm(false, true, ctx.c_out, k, hw, g, sampled, T::one(), gw);
            gemm(true, false, k, hw, ctx.c_out, kernels.direction_block(d), g, T::zero(), &mut grad_samples);

            let mut tap_grad = vec![T::zero(); m * hw];
            for c in 0..s.c {
                let plane = ctx.input.plane(b, c);
                let gplane = grads.input.plane_mut(b, c);
                let rows = &grad_samples[c * m * hw..(c + 1) * m * hw];
                for ((&gs, tap), tg) in rows.iter().zip(strip).zip(tap_grad.iter_mut()) {
                    let mut dv = T::zero();
                    for q in 0..4 {
                        let idx = tap.index[q] as usize;
                        gplane[idx] += tap.weight[q] * gs;
                        dv += tap.d_disp[q] * plane[idx];
                    }
                    *tg += gs * dv;
                }
            }
            for t_idx in 0..m {
                let t = t_idx as isize - half as isize;
                if let Some(ts) = tap_slot(half, t) {
                    let off = ctx.offsets.offset(b, d.slot(), ts);
                    grad_disp[off..off + hw].copy_from_slice(&tap_grad[t_idx * hw..(t_idx + 1) * hw]);
                }
            }
        }
    }
    grads.raw_increments = accumulate_offsets_backward(&ctx.offsets, &grad_disp)?;
    Ok(grads)
}

/// Forward state of a whole strip layer (offset source, accumulation and
/// strip correlation).
#[derive(Debug, Clone)]
pub struct SslLayerContext<T> {
    predictor: Option<ConvContext<T>>,
    ssl: SslContext<T>,
}

#[derive(Debug, Clone)]
pub enum OffsetGrads<T> {
    Dynamic { weights: Vec<T>, bias: Vec<T> },
    Static(Vec<T>),
    Off,
}

#[derive(Debug, Clone)]
pub struct SslLayerGrads<T> {
    pub input: Tensor4<T>,
    pub weights: Vec<T>,
    pub bias: Vec<T>,
    pub offsets: OffsetGrads<T>,
}

/// Builds the offset field for `input` from the layer's offset source.
pub fn layer_offsets<T: Real>(
    input: &Tensor4<T>,
    kernels: &StripKernelSet<T>,
) -> Result<(OffsetField<T>, Option<ConvContext<T>>)> {
    let s = input.shape();
    let m = kernels.m;
    match &kernels.offsets {
        OffsetSource::Dynamic(pred) => {
            check_predictor(pred, s, m)?;
            let (raw, ctx) = conv2d_forward(input, pred, pred.k_h / 2)?;
            Ok((accumulate_offsets(&raw, m)?, Some(ctx)))
        }
        OffsetSource::Static(v) => {
            let raw = Tensor4::from_fn(Shape4::new(s.n, 4 * (m - 1), s.h, s.w), |_, c, _, _| v[c]);
            Ok((accumulate_offsets(&raw, m)?, None))
        }
        OffsetSource::Off => Ok((OffsetField::zeros(s.n, m, s.h, s.w), None)),
    }
}

pub fn ssl_layer_forward<T: Real>(
    input: &Tensor4<T>,
    kernels: &StripKernelSet<T>,
) -> Result<(Tensor4<T>, SslLayerContext<T>)> {
    let (field, predictor) = layer_offsets(input, kernels)?;
    let (out, ssl) = ssl_forward_ctx(input, kernels, field)?;
    Ok((out, SslLayerContext { predictor, ssl }))
}

pub fn ssl_layer_backward<T: Real>(
    ctx: &SslLayerContext<T>,
    kernels: &StripKernelSet<T>,
    grad_out: &Tensor4<T>,
) -> Result<SslLayerGrads<T>> {
    let g = ssl_backward(&ctx.ssl, kernels, grad_out)?;
    let mut input = g.input;
    let offsets = match (&kernels.offsets, &ctx.predictor) {
        (OffsetSource::Dynamic(pred), Some(pctx)) => {
            let pg = conv2d_backward(pctx, pred, &g.raw_increments)?;
            input.add_assign(&pg.input)?;
            OffsetGrads::Dynamic {
                weights: pg.weights,
                bias: pg.bias,
            }
        }
        (OffsetSource::Static(v), None) => {
            let mut acc = vec![T::zero(); v.len()];
            let raw = &g.raw_increments;
            for b in 0..raw.shape().n {
                for (c, a) in acc.iter_mut().enumerate() {
                    *a += raw.plane(b, c).iter().copied().sum::<T>();
                }
            }
            OffsetGrads::Static(acc)
        }
        (OffsetSource::Off, None) => OffsetGrads::Off,
        _ => return Err(contract("strip layer context does not match its offset source")),
    };
    Ok(SslLayerGrads {
        input,
        weights: g.weights,
        bias: g.bias,
        offsets,
    })
}
