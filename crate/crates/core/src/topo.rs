//! Topology constraints: skeletons, centerline and mask Dice, the
//! eight-neighbour connectivity cube, and the combined training loss.

use crate::error::{contract, Result};
use crate::grid::{BinaryPlane, Plane};
use crate::real::Real;

/// Smoothing added to numerator and denominator of every soft Dice.
pub const DICE_EPS: f64 = 1e-6;
/// Predicted connectivity probabilities are clamped to `[c, 1 - c]`.
pub const BCE_CLAMP: f64 = 1e-7;
/// One erosion already reaches the centre of vessels up to four pixels wide.
/// Deeper levels route gradient to pixels further from the centreline and
/// let strip-convolution networks settle on over-wide masks.
pub const DEFAULT_SKELETON_ITERATIONS: usize = 1;

/// Neighbour offsets `(d_row, d_col)` in raster order; channel `k` of a
/// connectivity cube refers to `NEIGHBORS[k]`.
pub const NEIGHBORS: [(isize, isize); 8] = [
    (-1, -1),
    (-1, 0),
    (-1, 1),
    (0, -1),
    (0, 1),
    (1, -1),
    (1, 0),
    (1, 1),
];

/// Channel pointing back from the neighbour.
pub const fn opposite(k: usize) -> usize {
    7 - k
}

#[inline]
fn neighbor(h: usize, w: usize, i: usize, j: usize, k: usize) -> Option<(usize, usize)> {
    let (dr, dc) = NEIGHBORS[k];
    let (r, c) = (i as isize + dr, j as isize + dc);
    (r >= 0 && c >= 0 && (r as usize) < h && (c as usize) < w).then_some((r as usize, c as usize))
}

/// Eight channels of per-pixel neighbour connectivity, laid out `(8, h, w)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConnectivityCube<T> {
    pub h: usize,
    pub w: usize,
    pub data: Vec<T>,
}

impl<T: Copy> ConnectivityCube<T> {
    pub fn new(h: usize, w: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != 8 * h * w {
            return Err(contract(format!(
                "connectivity cube 8x{h}x{w} needs {} values, got {}",
                8 * h * w,
                data.len()
            )));
        }
        Ok(Self { h, w, data })
    }

    #[inline]
    pub fn at(&self, k: usize, i: usize, j: usize) -> T {
        self.data[(k * self.h + i) * self.w + j]
    }

    fn same_dims<U>(&self, other: &ConnectivityCube<U>) -> bool {
        self.h == other.h && self.w == other.w
    }
}

impl ConnectivityCube<u8> {
    pub fn to_real<T: Real>(&self) -> ConnectivityCube<T> {
        ConnectivityCube {
            h: self.h,
            w: self.w,
            data: self.data.iter().map(|&v| T::lit(f64::from(v))).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ConnectivityRule {
    /// Connected when both the pixel and its neighbour are foreground.
    #[default]
    ForegroundPair,
    /// Connected when the pixel and its neighbour carry the same label,
    /// background pairs included.
    ValueEquality,
}

pub fn connectivity_cube(mask: &BinaryPlane) -> ConnectivityCube<u8> {
    connectivity_cube_with(mask, ConnectivityRule::ForegroundPair)
}

pub fn connectivity_cube_with(mask: &BinaryPlane, rule: ConnectivityRule) -> ConnectivityCube<u8> {
    let (h, w) = (mask.h, mask.w);
    let mut data = vec![0u8; 8 * h * w];
    for k in 0..8 {
        for i in 0..h {
            for j in 0..w {
                let Some((r, c)) = neighbor(h, w, i, j, k) else {
                    continue;
                };
                let (a, b) = (mask.at(i, j) != 0, mask.at(r, c) != 0);
                let linked = match rule {
                    ConnectivityRule::ForegroundPair => a && b,
                    ConnectivityRule::ValueEquality => a == b,
                };
                data[(k * h + i) * w + j] = u8::from(linked);
            }
        }
    }
    ConnectivityCube { h, w, data }
}

/// 3x3 min or max over the in-bounds part of each window; returns the
/// selected source index per pixel (first in raster order on ties).
fn pool3<T: Real>(src: &[T], h: usize, w: usize, take_max: bool) -> (Vec<T>, Vec<u32>) {
    let mut out = Vec::with_capacity(h * w);
    let mut arg = Vec::with_capacity(h * w);
    for i in 0..h {
        for j in 0..w {
            let mut best = usize::MAX;
            for r in i.saturating_sub(1)..(i + 2).min(h) {
                for c in j.saturating_sub(1)..(j + 2).min(w) {
                    let idx = r * w + c;
                    let better = best == usize::MAX
                        || if take_max { src[idx] > src[best] } else { src[idx] < src[best] };
                    if better {
                        best = idx;
                    }
                }
            }
            out.push(src[best]);
            arg.push(best as u32);
        }
    }
    (out, arg)
}

/// Everything needed to backpropagate through [`soft_skeleton`].
#[derive(Debug, Clone)]
pub struct SoftSkeletonTape<T> {
    h: usize,
    w: usize,
    /// `erode_args[k]` selects `eroded[k + 1]` from `eroded[k]`.
    erode_args: Vec<Vec<u32>>,
    /// `open_args[k]` selects the opening of level `k` from `eroded[k + 1]`.
    open_args: Vec<Vec<u32>>,
    /// Residues `relu(eroded[k] - open_k)` before clipping, per level.
    residue: Vec<Vec<T>>,
    /// Skeleton before each union step (index `k` for level `k >= 1`).
    skel_before: Vec<Vec<T>>,
}

/// Differentiable soft skeleton from iterated 3x3 min/max pooling.
pub fn soft_skeleton<T: Real>(mask: &Plane<T>, iterations: usize) -> Plane<T> {
    soft_skeleton_forward(mask, iterations).0
}

pub fn soft_skeleton_forward<T: Real>(mask: &Plane<T>, iterations: usize) -> (Plane<T>, SoftSkeletonTape<T>) {
    let (h, w) = (mask.h, mask.w);
    let iterations = iterations.max(1);
    let mut tape = SoftSkeletonTape {
        h,
        w,
        erode_args: Vec::with_capacity(iterations + 1),
        open_args: Vec::with_capacity(iterations + 1),
        residue: Vec::with_capacity(iterations + 1),
        skel_before: Vec::with_capacity(iterations + 1),
    };
    let mut level = mask.data.clone();
    let mut skel = vec![T::zero(); h * w];
    for k in 0..=iterations {
        let (eroded, ea) = pool3(&level, h, w, false);
        let (opened, oa) = pool3(&eroded, h, w, true);
        let residue: Vec<T> = level.iter().zip(&opened).map(|(&a, &b)| (a - b).max(T::zero())).collect();
        tape.skel_before.push(skel.clone());
        if k == 0 {
            skel.clone_from(&residue);
        } else {
            for (s, &d) in skel.iter_mut().zip(&residue) {
                *s += (d - *s * d).max(T::zero());
            }
        }
        tape.erode_args.push(ea);
        tape.open_args.push(oa);
        tape.residue.push(residue);
        level = eroded;
    }
    (Plane { h, w, data: skel }, tape)
}

pub fn soft_skeleton_backward<T: Real>(tape: &SoftSkeletonTape<T>, grad: &[T]) -> Result<Plane<T>> {
    let (h, w) = (tape.h, tape.w);
    if grad.len() != h * w {
        return Err(contract(format!(
            "soft skeleton gradient has {} values, expected {}",
            grad.len(),
            h * w
        )));
    }
    let levels = tape.residue.len();
    // grad_level[k] is the gradient w.r.t. eroded level k (level 0 = input).
    let mut grad_level = vec![vec![T::zero(); h * w]; levels + 1];
    let mut g_skel = grad.to_vec();
    for k in (0..levels).rev() {
        let residue = &tape.residue[k];
        let mut g_res = vec![T::zero(); h * w];
        if k == 0 {
            g_res.copy_from_slice(&g_skel);
        } else {
            let before = &tape.skel_before[k];
            for p in 0..h * w {
                let (s, d) = (before[p], residue[p]);
                if d - s * d > T::zero() {
                    g_res[p] = g_skel[p] * (T::one() - s);
                    g_skel[p] *= T::one() - d;
                }
            }
        }
        // residue = relu(level_k - max3(level_{k+1})).
        for p in 0..h * w {
            if residue[p] > T::zero() {
                grad_level[k][p] += g_res[p];
                let src = tape.open_args[k][p] as usize;
                grad_level[k + 1][src] -= g_res[p];
            }
        }
    }
    for k in (1..=levels).rev() {
        let (lower, upper) = grad_level.split_at_mut(k);
        for (p, &g) in upper[0].iter().enumerate() {
            lower[k - 1][tape.erode_args[k - 1][p] as usize] += g;
        }
    }
    Ok(Plane {
        h,
        w,
        data: grad_level.swap_remove(0),
    })
}

/// Zhang-Suen thinning to a one-pixel-wide skeleton. Pixels outside the
/// image count as background.
pub fn hard_skeleton(mask: &BinaryPlane) -> BinaryPlane {
    let (h, w) = (mask.h, mask.w);
    let mut img: Vec<u8> = mask.data.iter().map(|&v| u8::from(v != 0)).collect();
    let at = |img: &[u8], r: isize, c: isize| -> u8 {
        if r < 0 || c < 0 || r >= h as isize || c >= w as isize {
            0
        } else {
            img[r as usize * w + c as usize]
        }
    };
    loop {
        let mut changed = false;
        for pass in 0..2 {
            let mut doomed = Vec::new();
            for i in 0..h {
                for j in 0..w {
                    if img[i * w + j] == 0 {
                        continue;
                    }
                    let (r, c) = (i as isize, j as isize);
                    // P2..P9 clockwise from north.
                    let p = [
                        at(&img, r - 1, c),
                        at(&img, r - 1, c + 1),
                        at(&img, r, c + 1),
                        at(&img, r + 1, c + 1),
                        at(&img, r + 1, c),
                        at(&img, r + 1, c - 1),
                        at(&img, r, c - 1),
                        at(&img, r - 1, c - 1),
                    ];
                    let b: u8 = p.iter().sum();
                    let a = (0..8).filter(|&k| p[k] == 0 && p[(k + 1) % 8] == 1).count();
                    if !(2..=6).contains(&b) || a != 1 {
                        continue;
                    }
                    let (p2, p4, p6, p8) = (p[0], p[2], p[4], p[6]);
                    let keep = if pass == 0 {
                        p2 * p4 * p6 != 0 || p4 * p6 * p8 != 0
                    } else {
                        p2 * p4 * p8 != 0 || p2 * p6 * p8 != 0
                    };
                    if !keep {
                        doomed.push(i * w + j);
                    }
                }
            }
            changed |= !doomed.is_empty();
            for idx in doomed {
                img[idx] = 0;
            }
        }
        if !changed {
            break;
        }
    }
    Plane { h, w, data: img }
}

/// Labels the 8-connected foreground components; returns per-pixel labels
/// (0 for background, components numbered from 1) and the component count.
pub fn label_components(mask: &BinaryPlane) -> (Vec<u32>, usize) {
    let (h, w) = (mask.h, mask.w);
    let mut labels = vec![0u32; h * w];
    let mut count = 0;
    let mut stack = Vec::new();
    for start in 0..h * w {
        if mask.data[start] == 0 || labels[start] != 0 {
            continue;
        }
        count += 1;
        labels[start] = count as u32;
        stack.push(start);
        while let Some(p) = stack.pop() {
            let (i, j) = (p / w, p % w);
            for k in 0..8 {
                if let Some((r, c)) = neighbor(h, w, i, j, k) {
                    let q = r * w + c;
                    if mask.data[q] != 0 && labels[q] == 0 {
                        labels[q] = count as u32;
                        stack.push(q);
                    }
                }
            }
        }
    }
    (labels, count)
}

pub fn component_count(mask: &BinaryPlane) -> usize {
    label_components(mask).1
}

/// `1 - (2 sum(p g) + eps) / (sum p + sum g + eps)` and its gradient in `p`.
pub fn soft_dice<T: Real>(pred: &[T], gt: &[T]) -> (T, Vec<T>) {
    let eps = T::lit(DICE_EPS);
    let two = T::lit(2.0);
    let inter: T = pred.iter().zip(gt).map(|(&p, &g)| p * g).sum();
    let sum_p: T = pred.iter().copied().sum();
    let sum_g: T = gt.iter().copied().sum();
    let num = two * inter + eps;
    let den = sum_p + sum_g + eps;
    let loss = T::one() - num / den;
    let grad = gt.iter().map(|&g| -(two * g * den - num) / (den * den)).collect();
    (loss, grad)
}

fn check_planes<T, U>(a: &Plane<T>, b: &Plane<U>) -> Result<()> {
    if a.h != b.h || a.w != b.w {
        return Err(contract(format!(
            "mask dims differ: {}x{} vs {}x{}",
            a.h, a.w, b.h, b.w
        )));
    }
    Ok(())
}

/// Soft Dice loss between a probability mask and a binary ground truth.
pub fn loss_mask<T: Real>(pred: &Plane<T>, gt: &BinaryPlane) -> Result<T> {
    loss_mask_grad(pred, gt).map(|(l, _)| l)
}

pub fn loss_mask_grad<T: Real>(pred: &Plane<T>, gt: &BinaryPlane) -> Result<(T, Plane<T>)> {
    check_planes(pred, gt)?;
    let (loss, grad) = soft_dice(&pred.data, &gt.to_real::<T>().data);
    Ok((loss, Plane { h: pred.h, w: pred.w, data: grad }))
}

/// Soft Dice between the soft skeletons of prediction and ground truth.
pub fn loss_centerline<T: Real>(pred: &Plane<T>, gt: &BinaryPlane, iterations: usize) -> Result<T> {
    loss_centerline_grad(pred, gt, iterations).map(|(l, _)| l)
}

pub fn loss_centerline_grad<T: Real>(
    pred: &Plane<T>,
    gt: &BinaryPlane,
    iterations: usize,
) -> Result<(T, Plane<T>)> {
    check_planes(pred, gt)?;
    let (skel_pred, tape) = soft_skeleton_forward(pred, iterations);
    let skel_gt = soft_skeleton(&gt.to_real::<T>(), iterations);
    let (loss, g_skel) = soft_dice(&skel_pred.data, &skel_gt.data);
    Ok((loss, soft_skeleton_backward(&tape, &g_skel)?))
}

/// Mean binary cross-entropy over all `8 h w` entries.
pub fn loss_connectivity<T: Real>(pred: &ConnectivityCube<T>, gt: &ConnectivityCube<u8>) -> Result<T> {
    loss_connectivity_grad(pred, gt).map(|(l, _)| l)
}

pub fn loss_connectivity_grad<T: Real>(
    pred: &ConnectivityCube<T>,
    gt: &ConnectivityCube<u8>,
) -> Result<(T, ConnectivityCube<T>)> {
    if !pred.same_dims(gt) || pred.data.len() != gt.data.len() {
        return Err(contract(format!(
            "connectivity cubes differ: 8x{}x{} vs 8x{}x{}",
            pred.h, pred.w, gt.h, gt.w
        )));
    }
    let lo = T::lit(BCE_CLAMP);
    let hi = T::one() - lo;
    let n = T::lit(pred.data.len() as f64);
    let mut total = T::zero();
    let mut grad = Vec::with_capacity(pred.data.len());
    for (&p, &y) in pred.data.iter().zip(&gt.data) {
        let q = p.max(lo).min(hi);
        let inside = p > lo && p < hi;
        let g = if y != 0 {
            total -= q.ln();
            -T::one() / q
        } else {
            total -= (T::one() - q).ln();
            T::one() / (T::one() - q)
        };
        grad.push(if inside { g / n } else { T::zero() });
    }
    Ok((
        total / n,
        ConnectivityCube {
            h: pred.h,
            w: pred.w,
            data: grad,
        },
    ))
}

/// Relative weights of the three loss terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub mask: f64,
    pub centerline: f64,
    pub connectivity: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            mask: 1.0,
            centerline: 1.0,
            connectivity: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub use_cl: bool,
    pub use_nc: bool,
    pub skeleton_iterations: usize,
    pub weights: LossWeights,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            use_cl: true,
            use_nc: true,
            skeleton_iterations: DEFAULT_SKELETON_ITERATIONS,
            weights: LossWeights::default(),
        }
    }
}

/// Per-term losses (already weighted) and their sum.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub l_mask: f64,
    pub l_cl: f64,
    pub l_con: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn new(l_mask: f64, l_cl: f64, l_con: f64) -> Self {
        Self {
            l_mask,
            l_cl,
            l_con,
            total: l_mask + l_cl + l_con,
        }
    }

    pub fn is_finite(&self) -> bool {
        [self.l_mask, self.l_cl, self.l_con, self.total].iter().all(|v| v.is_finite())
    }

    /// First non-finite term, by name.
    pub fn first_non_finite(&self) -> Option<&'static str> {
        [
            ("l_mask", self.l_mask),
            ("l_cl", self.l_cl),
            ("l_con", self.l_con),
            ("total", self.total),
        ]
        .into_iter()
        .find(|(_, v)| !v.is_finite())
        .map(|(n, _)| n)
    }
}

/// Gradients of [`loss_total`] with respect to both predictions.
#[derive(Debug, Clone)]
pub struct LossGrads<T> {
    pub mask: Plane<T>,
    pub cube: ConnectivityCube<T>,
}

pub fn loss_total<T: Real>(
    pred_mask: &Plane<T>,
    gt_mask: &BinaryPlane,
    pred_cube: &ConnectivityCube<T>,
    gt_cube: &ConnectivityCube<u8>,
    config: &LossConfig,
) -> Result<LossBreakdown> {
    loss_total_grad(pred_mask, gt_mask, pred_cube, gt_cube, config).map(|(b, _)| b)
}

pub fn loss_total_grad<T: Real>(
    pred_mask: &Plane<T>,
    gt_mask: &BinaryPlane,
    pred_cube: &ConnectivityCube<T>,
    gt_cube: &ConnectivityCube<u8>,
    config: &LossConfig,
) -> Result<(LossBreakdown, LossGrads<T>)> {
    if pred_cube.h != pred_mask.h || pred_cube.w != pred_mask.w {
        return Err(contract(format!(
            "cube 8x{}x{} does not match mask {}x{}",
            pred_cube.h, pred_cube.w, pred_mask.h, pred_mask.w
        )));
    }
    let wts = config.weights;
    let (l_mask, mut g_mask) = loss_mask_grad(pred_mask, gt_mask)?;
    scale(&mut g_mask.data, T::lit(wts.mask));
    let mut l_cl = T::zero();
    if config.use_cl {
        let (l, g) = loss_centerline_grad(pred_mask, gt_mask, config.skeleton_iterations)?;
        l_cl = l;
        let wc = T::lit(wts.centerline);
        for (a, &b) in g_mask.data.iter_mut().zip(&g.data) {
            *a += wc * b;
        }
    }
    let (l_con, g_cube) = if config.use_nc {
        let (l, mut g) = loss_connectivity_grad(pred_cube, gt_cube)?;
        scale(&mut g.data, T::lit(wts.connectivity));
        (l, g)
    } else {
        if !pred_cube.same_dims(gt_cube) {
            return Err(contract("connectivity cube dims differ"));
        }
        (
            T::zero(),
            ConnectivityCube {
                h: pred_cube.h,
                w: pred_cube.w,
                data: vec![T::zero(); pred_cube.data.len()],
            },
        )
    };
    let breakdown = LossBreakdown::new(
        wts.mask * l_mask.as_f64(),
        if config.use_cl { wts.centerline * l_cl.as_f64() } else { 0.0 },
        if config.use_nc { wts.connectivity * l_con.as_f64() } else { 0.0 },
    );
    Ok((
        breakdown,
        LossGrads {
            mask: g_mask,
            cube: g_cube,
        },
    ))
}

fn scale<T: Real>(v: &mut [T], s: T) {
    if s != T::one() {
        v.iter_mut().for_each(|x| *x *= s);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn binary(h: usize, w: usize, on: &[(usize, usize)]) -> BinaryPlane {
        let mut p = Plane::filled(h, w, 0u8);
        for &(i, j) in on {
            p.set(i, j, 1);
        }
        p
    }

    fn brute_cube(mask: &BinaryPlane) -> Vec<u8> {
        let mut out = vec![0u8; 8 * mask.h * mask.w];
        for i in 0..mask.h as isize {
            for j in 0..mask.w as isize {
                let ring = [
                    (i - 1, j - 1),
                    (i - 1, j),
                    (i - 1, j + 1),
                    (i, j - 1),
                    (i, j + 1),
                    (i + 1, j - 1),
                    (i + 1, j),
                    (i + 1, j + 1),
                ];
                for (k, (r, c)) in ring.into_iter().enumerate() {
                    let inside = r >= 0 && c >= 0 && r < mask.h as isize && c < mask.w as isize;
                    if inside && mask.at(i as usize, j as usize) == 1 && mask.at(r as usize, c as usize) == 1 {
                        out[(k * mask.h + i as usize) * mask.w + j as usize] = 1;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn cube_on_full_3x3() {
        let cube = connectivity_cube(&Plane::filled(3, 3, 1u8));
        assert!((0..8).all(|k| cube.at(k, 1, 1) == 1));
        for (i, j) in [(0, 0), (0, 2), (2, 0), (2, 2)] {
            assert_eq!((0..8).filter(|&k| cube.at(k, i, j) == 1).count(), 3);
        }
    }

    #[test]
    fn cube_isolated_and_pair() {
        let cube = connectivity_cube(&binary(5, 5, &[(2, 2)]));
        assert!(cube.data.iter().all(|&v| v == 0));
        let cube = connectivity_cube(&binary(3, 3, &[(0, 0), (0, 1)]));
        assert_eq!(cube.at(4, 0, 0), 1);
        assert_eq!(cube.at(3, 0, 1), 1);
        assert_eq!(cube.data.iter().map(|&v| v as usize).sum::<usize>(), 2);
    }

    #[test]
    fn cube_matches_brute_force_and_is_reciprocal() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..100 {
            let mask = Plane {
                h: 32,
                w: 32,
                data: (0..1024).map(|_| u8::from(rng.gen_bool(0.5))).collect(),
            };
            let cube = connectivity_cube(&mask);
            assert_eq!(cube.data, brute_cube(&mask));
            for k in 0..8 {
                for i in 0..32 {
                    for j in 0..32 {
                        if let Some((r, c)) = neighbor(32, 32, i, j, k) {
                            assert_eq!(cube.at(k, i, j), cube.at(opposite(k), r, c));
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn value_equality_rule_links_background() {
        let cube = connectivity_cube_with(&Plane::filled(2, 2, 0u8), ConnectivityRule::ValueEquality);
        assert_eq!((0..8).filter(|&k| cube.at(k, 0, 0) == 1).count(), 3);
    }

    #[test]
    fn soft_skeleton_examples() {
        let zeros = Plane::filled(6, 6, 0.0f64);
        assert!(soft_skeleton(&zeros, 5).data.iter().all(|&v| v == 0.0));

        let mut line = Plane::filled(7, 12, 0.0f64);
        for j in 1..11 {
            line.set(3, j, 1.0);
        }
        assert_eq!(soft_skeleton(&line, 10), line);

        let mut square = Plane::filled(9, 9, 0.0f64);
        for i in 2..7 {
            for j in 2..7 {
                square.set(i, j, 1.0);
            }
        }
        let sk = soft_skeleton(&square, 2);
        assert!(sk.data.iter().zip(&square.data).all(|(&s, &m)| s >= 0.0 && s <= m));
        assert!((3..6).any(|i| (3..6).any(|j| sk.at(i, j) > 0.0)));
    }

    #[test]
    fn hard_skeleton_examples() {
        assert_eq!(hard_skeleton(&Plane::filled(5, 5, 0u8)).count(), 0);
        let line = binary(5, 12, &(1..11).map(|j| (2, j)).collect::<Vec<_>>());
        assert_eq!(hard_skeleton(&line), line);

        let mut ribbon = Plane::filled(7, 24, 0u8);
        for i in 2..5 {
            for j in 2..22 {
                ribbon.set(i, j, 1);
            }
        }
        let sk = hard_skeleton(&ribbon);
        assert!(sk.count() > 10);
        // One pixel per column along the ribbon.
        for j in 0..24 {
            assert!((0..7).filter(|&i| sk.at(i, j) == 1).count() <= 1);
        }
        assert!(sk.data.iter().zip(&ribbon.data).all(|(&s, &m)| s <= m));
    }

    #[test]
    fn component_labels() {
        let m = binary(5, 5, &[(0, 0), (1, 1), (3, 3), (3, 4), (0, 4)]);
        let (labels, n) = label_components(&m);
        assert_eq!(n, 3);
        assert_eq!(labels[0], labels[6]);
        assert_ne!(labels[0], labels[4]);
        assert_eq!(component_count(&Plane::filled(3, 3, 0u8)), 0);
    }

    #[test]
    fn mask_loss_examples() {
        let gt = binary(4, 4, &[(0, 0), (0, 1), (1, 0), (1, 1)]);
        let same: Plane<f64> = gt.to_real();
        assert!(loss_mask(&same, &gt).unwrap().abs() <= 1e-6);
        let disjoint = binary(4, 4, &[(3, 3)]).to_real::<f64>();
        assert!((loss_mask(&disjoint, &gt).unwrap() - 1.0).abs() <= 1e-6);
        let half = binary(4, 4, &[(0, 0), (0, 1)]).to_real::<f64>();
        assert!((loss_mask(&half, &gt).unwrap() - (1.0 - 4.0 / 6.0)).abs() < 1e-6);
        assert!(loss_mask(&Plane::filled(3, 3, 0.0f64), &gt).is_err());
    }

    #[test]
    fn mask_loss_symmetric_for_binary_inputs() {
        let a = binary(4, 4, &[(0, 0), (1, 2), (3, 3)]);
        let b = binary(4, 4, &[(0, 0), (2, 2)]);
        let ab = loss_mask(&a.to_real::<f64>(), &b).unwrap();
        let ba = loss_mask(&b.to_real::<f64>(), &a).unwrap();
        assert_eq!(ab, ba);
    }

    #[test]
    fn centerline_loss_examples() {
        let gt = binary(8, 12, &(1..11).map(|j| (2, j)).collect::<Vec<_>>());
        assert!(loss_centerline(&gt.to_real::<f64>(), &gt, 10).unwrap().abs() <= 1e-6);
        let empty = Plane::filled(8, 12, 0.0f64);
        assert!((loss_centerline(&empty, &gt, 10).unwrap() - 1.0).abs() <= 1e-6);
        let shifted = binary(8, 12, &(1..11).map(|j| (4, j)).collect::<Vec<_>>());
        assert!((loss_centerline(&shifted.to_real::<f64>(), &gt, 10).unwrap() - 1.0).abs() <= 1e-6);
    }

    #[test]
    fn connectivity_loss_examples() {
        let gt = connectivity_cube(&binary(4, 4, &[(1, 1), (1, 2), (2, 2)]));
        let same = gt.to_real::<f64>();
        assert!(loss_connectivity(&same, &gt).unwrap() <= 1e-5);
        let half = ConnectivityCube::new(4, 4, vec![0.5f64; 128]).unwrap();
        assert!((loss_connectivity(&half, &gt).unwrap() - std::f64::consts::LN_2).abs() < 1e-6);

        let gt1 = ConnectivityCube::new(1, 1, vec![1u8, 0, 0, 0, 0, 0, 0, 0]).unwrap();
        let pred = ConnectivityCube::new(1, 1, vec![0.9f64, 0.2, 0.5, 0.5, 0.5, 0.5, 0.5, 0.5]).unwrap();
        let want = -(0.9f64.ln() + 0.8f64.ln() + 6.0 * 0.5f64.ln()) / 8.0;
        assert!((loss_connectivity(&pred, &gt1).unwrap() - want).abs() < 1e-6);
    }

    #[test]
    fn total_is_sum_of_parts() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let gt = Plane {
            h: 8,
            w: 8,
            data: (0..64).map(|_| u8::from(rng.gen_bool(0.4))).collect(),
        };
        let pred = Plane {
            h: 8,
            w: 8,
            data: (0..64).map(|_| rng.gen_range(0.01..0.99)).collect::<Vec<f64>>(),
        };
        let cube = ConnectivityCube::new(8, 8, (0..512).map(|_| rng.gen_range(0.01..0.99)).collect()).unwrap();
        let gt_cube = connectivity_cube(&gt);
        let cfg = LossConfig::default();
        let b = loss_total(&pred, &gt, &cube, &gt_cube, &cfg).unwrap();
        assert_eq!(b.l_mask, loss_mask(&pred, &gt).unwrap());
        assert_eq!(b.l_cl, loss_centerline(&pred, &gt, cfg.skeleton_iterations).unwrap());
        assert_eq!(b.l_con, loss_connectivity(&cube, &gt_cube).unwrap());
        assert_eq!(b.total, b.l_mask + b.l_cl + b.l_con);

        let mask_only = LossConfig {
            use_cl: false,
            use_nc: false,
            ..cfg
        };
        let b = loss_total(&pred, &gt, &cube, &gt_cube, &mask_only).unwrap();
        assert_eq!(b.total, b.l_mask);
    }

    #[test]
    fn perfect_prediction_total_is_tiny() {
        let gt = binary(8, 8, &[(2, 2), (2, 3), (3, 3), (4, 3), (4, 4)]);
        let cube = connectivity_cube(&gt);
        let b = loss_total(&gt.to_real::<f32>(), &gt, &cube.to_real::<f32>(), &cube, &LossConfig::default()).unwrap();
        assert!(b.total <= 2e-5, "{b:?}");
    }
}
