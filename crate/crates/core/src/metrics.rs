//! Overlap, centerline and surface-distance metrics for binary masks, and
//! per-corpus reports with mean and standard error.

use std::fmt::Write as _;

use crate::error::{contract, Result};
use crate::grid::BinaryPlane;
use crate::topo::hard_skeleton;

/// Probabilities at or above this become foreground.
pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Overlap {
    pub dice: f64,
    pub iou: f64,
    pub precision: f64,
    pub recall: f64,
}

fn check_dims(pred: &BinaryPlane, gt: &BinaryPlane) -> Result<()> {
    if !pred.same_dims(gt) {
        return Err(contract(format!(
            "mask dims differ: {}x{} vs {}x{}",
            pred.h, pred.w, gt.h, gt.w
        )));
    }
    Ok(())
}

fn ratio(num: usize, den: usize) -> f64 {
    num as f64 / den as f64
}

/// Dice, IoU, precision and recall from pixel counts. Two empty masks
/// agree perfectly; one empty mask scores zero.
pub fn overlap_metrics(pred: &BinaryPlane, gt: &BinaryPlane) -> Result<Overlap> {
    check_dims(pred, gt)?;
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for (&p, &g) in pred.data.iter().zip(&gt.data) {
        match (p != 0, g != 0) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            _ => {}
        }
    }
    if tp + fp + fn_ == 0 {
        return Ok(Overlap {
            dice: 1.0,
            iou: 1.0,
            precision: 1.0,
            recall: 1.0,
        });
    }
    let safe = |n: usize, d: usize| if d == 0 { 0.0 } else { ratio(n, d) };
    Ok(Overlap {
        dice: ratio(2 * tp, 2 * tp + fp + fn_),
        iou: ratio(tp, tp + fp + fn_),
        precision: safe(tp, tp + fp),
        recall: safe(tp, tp + fn_),
    })
}

/// Thinned mask, or the mask itself when thinning erases every pixel.
fn skeleton_or_mask(mask: &BinaryPlane) -> BinaryPlane {
    let s = hard_skeleton(mask);
    if s.count() == 0 {
        mask.clone()
    } else {
        s
    }
}

fn covered(skel: &BinaryPlane, mask: &BinaryPlane) -> usize {
    skel.data.iter().zip(&mask.data).filter(|(&s, &m)| s != 0 && m != 0).count()
}

/// Harmonic mean of topology precision and topology sensitivity.
pub fn cl_dice_metric(pred: &BinaryPlane, gt: &BinaryPlane) -> Result<f64> {
    check_dims(pred, gt)?;
    match (pred.count(), gt.count()) {
        (0, 0) => return Ok(1.0),
        (0, _) | (_, 0) => return Ok(0.0),
        _ => {}
    }
    let sp = skeleton_or_mask(pred);
    let sg = skeleton_or_mask(gt);
    let tprec = ratio(covered(&sp, gt), sp.count());
    let tsens = ratio(covered(&sg, pred), sg.count());
    if tprec + tsens == 0.0 {
        return Ok(0.0);
    }
    Ok(2.0 * tprec * tsens / (tprec + tsens))
}

/// Foreground pixels with at least one background 4-neighbour; the image
/// border counts as background.
pub fn boundary(mask: &BinaryPlane) -> Vec<(usize, usize)> {
    let (h, w) = (mask.h, mask.w);
    let fg = |i: isize, j: isize| i >= 0 && j >= 0 && i < h as isize && j < w as isize && mask.at(i as usize, j as usize) != 0;
    let mut out = Vec::new();
    for i in 0..h {
        for j in 0..w {
            let (r, c) = (i as isize, j as isize);
            if fg(r, c) && !(fg(r - 1, c) && fg(r + 1, c) && fg(r, c - 1) && fg(r, c + 1)) {
                out.push((i, j));
            }
        }
    }
    out
}

/// Exact squared Euclidean distance to the nearest site, in integers
/// (separable lower-envelope transform).
pub fn squared_distance_transform(h: usize, w: usize, sites: &[(usize, usize)]) -> Vec<i64> {
    let inf = (h + w + 1) as i64;
    let mut g = vec![inf; h * w];
    let mut is_site = vec![false; h * w];
    for &(i, j) in sites {
        is_site[i * w + j] = true;
    }
    for j in 0..w {
        if is_site[j] {
            g[j] = 0;
        }
        for i in 1..h {
            g[i * w + j] = if is_site[i * w + j] { 0 } else { (g[(i - 1) * w + j] + 1).min(inf) };
        }
        for i in (0..h.saturating_sub(1)).rev() {
            let below = g[(i + 1) * w + j] + 1;
            if below < g[i * w + j] {
                g[i * w + j] = below;
            }
        }
    }
    let mut dt = vec![0i64; h * w];
    let mut s = vec![0usize; w];
    let mut t = vec![0i64; w];
    for i in 0..h {
        let row = &g[i * w..(i + 1) * w];
        let f = |x: i64, k: usize| (x - k as i64).pow(2) + row[k] * row[k];
        let sep = |k: usize, u: usize| {
            let (k2, u2) = (k as i64, u as i64);
            (u2 * u2 - k2 * k2 + row[u] * row[u] - row[k] * row[k]).div_euclid(2 * (u2 - k2))
        };
        let mut q: isize = 0;
        s[0] = 0;
        t[0] = 0;
        for u in 1..w {
            while q >= 0 && f(t[q as usize], s[q as usize]) > f(t[q as usize], u) {
                q -= 1;
            }
            if q < 0 {
                q = 0;
                s[0] = u;
            } else {
                let next = 1 + sep(s[q as usize], u);
                if next < w as i64 {
                    q += 1;
                    s[q as usize] = u;
                    t[q as usize] = next;
                }
            }
        }
        for u in (0..w).rev() {
            dt[i * w + u] = f(u as i64, s[q as usize]);
            if u as i64 == t[q as usize] {
                q -= 1;
            }
        }
    }
    dt
}

fn directed_mean(from: &[(usize, usize)], to_dt: &[i64], w: usize) -> f64 {
    let total: f64 = from.iter().map(|&(i, j)| (to_dt[i * w + j] as f64).sqrt()).sum();
    total / from.len() as f64
}

/// Length of the image diagonal, reported as ASD when exactly one mask
/// is empty.
pub fn asd_sentinel(h: usize, w: usize) -> f64 {
    ((h * h + w * w) as f64).sqrt()
}

/// Average surface distance: the mean of the two directed mean
/// nearest-boundary distances.
pub fn asd(pred: &BinaryPlane, gt: &BinaryPlane) -> Result<f64> {
    check_dims(pred, gt)?;
    let (bp, bg) = (boundary(pred), boundary(gt));
    match (bp.is_empty(), bg.is_empty()) {
        (true, true) => return Ok(0.0),
        (true, false) | (false, true) => return Ok(asd_sentinel(pred.h, pred.w)),
        _ => {}
    }
    let dt_gt = squared_distance_transform(gt.h, gt.w, &bg);
    let dt_pred = squared_distance_transform(pred.h, pred.w, &bp);
    Ok((directed_mean(&bp, &dt_gt, gt.w) + directed_mean(&bg, &dt_pred, pred.w)) / 2.0)
}

/// Metrics of one prediction against its ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub id: String,
    pub dice: f64,
    pub iou: f64,
    pub precision: f64,
    pub recall: f64,
    pub cl_dice: f64,
    pub asd: f64,
    /// Exactly one of the two masks was empty, so `asd` holds the sentinel.
    pub asd_sentinel: bool,
}

pub const METRIC_NAMES: [&str; 6] = ["dice", "iou", "precision", "recall", "cl_dice", "asd"];

impl MetricRow {
    pub fn values(&self) -> [f64; 6] {
        [self.dice, self.iou, self.precision, self.recall, self.cl_dice, self.asd]
    }
}

pub fn evaluate_pair(id: &str, pred: &BinaryPlane, gt: &BinaryPlane) -> Result<MetricRow> {
    let o = overlap_metrics(pred, gt)?;
    Ok(MetricRow {
        id: id.to_string(),
        dice: o.dice,
        iou: o.iou,
        precision: o.precision,
        recall: o.recall,
        cl_dice: cl_dice_metric(pred, gt)?,
        asd: asd(pred, gt)?,
        asd_sentinel: (pred.count() == 0) != (gt.count() == 0),
    })
}

/// Mean and standard error (sample standard deviation over `sqrt(n)`; 0
/// for a single value).
pub fn mean_se(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricsReport {
    pub rows: Vec<MetricRow>,
}

impl MetricsReport {
    /// `(mean, standard error)` per metric, in [`METRIC_NAMES`] order.
    pub fn summary(&self) -> [(f64, f64); 6] {
        let mut out = [(0.0, 0.0); 6];
        for (k, slot) in out.iter_mut().enumerate() {
            let col: Vec<f64> = self.rows.iter().map(|r| r.values()[k]).collect();
            *slot = mean_se(&col);
        }
        out
    }

    pub fn mean(&self, metric: &str) -> Option<f64> {
        let k = METRIC_NAMES.iter().position(|&n| n == metric)?;
        Some(self.summary()[k].0)
    }

    pub fn sentinel_count(&self) -> usize {
        self.rows.iter().filter(|r| r.asd_sentinel).count()
    }

    /// Per-sample rows followed by `mean` and `se` rows.
    pub fn to_tsv(&self) -> String {
        let mut out = format!("id\t{}\tasd_sentinel\n", METRIC_NAMES.join("\t"));
        for r in &self.rows {
            let _ = write!(out, "{}", r.id);
            for v in r.values() {
                let _ = write!(out, "\t{v:.6}");
            }
            let _ = writeln!(out, "\t{}", u8::from(r.asd_sentinel));
        }
        let summary = self.summary();
        for (label, pick) in [("mean", 0usize), ("se", 1)] {
            let _ = write!(out, "{label}");
            for s in summary {
                let v = if pick == 0 { s.0 } else { s.1 };
                let _ = write!(out, "\t{v:.6}");
            }
            let _ = writeln!(out, "\t{}", if pick == 0 { self.sentinel_count() } else { 0 });
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Plane;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn binary(h: usize, w: usize, on: &[(usize, usize)]) -> BinaryPlane {
        let mut p = Plane::filled(h, w, 0u8);
        for &(i, j) in on {
            p.set(i, j, 1);
        }
        p
    }

    fn rect(h: usize, w: usize, r0: usize, r1: usize, c0: usize, c1: usize) -> BinaryPlane {
        let mut p = Plane::filled(h, w, 0u8);
        for i in r0..r1 {
            for j in c0..c1 {
                p.set(i, j, 1);
            }
        }
        p
    }

    /// All-pairs nearest boundary distances.
    fn asd_oracle(a: &BinaryPlane, b: &BinaryPlane) -> f64 {
        let (ba, bb) = (boundary(a), boundary(b));
        let directed = |from: &[(usize, usize)], to: &[(usize, usize)]| {
            let mut total = 0.0;
            for &(i, j) in from {
                let best = to
                    .iter()
                    .map(|&(r, c)| {
                        let (dr, dc) = (i as f64 - r as f64, j as f64 - c as f64);
                        (dr * dr + dc * dc).sqrt()
                    })
                    .fold(f64::INFINITY, f64::min);
                total += best;
            }
            total / from.len() as f64
        };
        (directed(&ba, &bb) + directed(&bb, &ba)) / 2.0
    }

    #[test]
    fn overlap_examples() {
        let gt = rect(4, 4, 0, 2, 0, 2);
        let o = overlap_metrics(&gt, &gt).unwrap();
        assert_eq!((o.dice, o.iou, o.precision, o.recall), (1.0, 1.0, 1.0, 1.0));
        let o = overlap_metrics(&rect(4, 4, 3, 4, 3, 4), &gt).unwrap();
        assert_eq!((o.dice, o.iou, o.precision, o.recall), (0.0, 0.0, 0.0, 0.0));
        let o = overlap_metrics(&binary(4, 4, &[(0, 0), (0, 1)]), &gt).unwrap();
        assert!((o.dice - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!((o.iou, o.precision, o.recall), (0.5, 1.0, 0.5));
        assert!(overlap_metrics(&gt, &rect(3, 4, 0, 1, 0, 1)).is_err());
    }

    #[test]
    fn empty_conventions() {
        let empty = Plane::filled(5, 5, 0u8);
        let dot = binary(5, 5, &[(2, 2)]);
        let both = evaluate_pair("e", &empty, &empty).unwrap();
        assert_eq!((both.dice, both.iou, both.cl_dice, both.asd), (1.0, 1.0, 1.0, 0.0));
        assert!(!both.asd_sentinel);
        let one = evaluate_pair("o", &dot, &empty).unwrap();
        assert_eq!((one.dice, one.iou, one.cl_dice), (0.0, 0.0, 0.0));
        assert_eq!(one.asd, asd_sentinel(5, 5));
        assert!(one.asd_sentinel);
    }

    #[test]
    fn cl_dice_examples() {
        let ribbon = rect(7, 24, 2, 5, 2, 22);
        assert_eq!(cl_dice_metric(&ribbon, &ribbon).unwrap(), 1.0);
        let a = rect(10, 10, 1, 2, 0, 10);
        let b = rect(10, 10, 7, 8, 0, 10);
        assert_eq!(cl_dice_metric(&a, &b).unwrap(), 0.0);

        let half = rect(7, 24, 2, 5, 2, 12);
        let (sp, sg) = (hard_skeleton(&half), hard_skeleton(&ribbon));
        let tprec = covered(&sp, &ribbon) as f64 / sp.count() as f64;
        let tsens = covered(&sg, &half) as f64 / sg.count() as f64;
        let want = 2.0 * tprec * tsens / (tprec + tsens);
        assert_eq!(cl_dice_metric(&half, &ribbon).unwrap(), want);
        assert_eq!(tprec, 1.0);
        assert!(tsens > 0.3 && tsens < 0.7);
    }

    #[test]
    fn asd_examples() {
        let sq = rect(12, 12, 2, 6, 2, 6);
        assert_eq!(asd(&sq, &sq).unwrap(), 0.0);
        let a = binary(9, 9, &[(4, 1)]);
        let b = binary(9, 9, &[(4, 6)]);
        assert_eq!(asd(&a, &b).unwrap(), 5.0);
        let shifted = rect(12, 12, 2, 6, 4, 8);
        assert_eq!(asd(&sq, &shifted).unwrap(), asd_oracle(&sq, &shifted));
    }

    #[test]
    fn asd_matches_oracle_and_is_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..50 {
            let mut gen = |p: f64| Plane {
                h: 32,
                w: 32,
                data: (0..1024).map(|_| u8::from(rng.gen_bool(p))).collect::<Vec<u8>>(),
            };
            let (a, b) = (gen(0.3), gen(0.1));
            assert_eq!(asd(&a, &b).unwrap(), asd_oracle(&a, &b));
            assert_eq!(asd(&a, &b).unwrap(), asd(&b, &a).unwrap());
        }
    }

    #[test]
    fn distance_transform_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..30 {
            let (h, w) = (rng.gen_range(1..20), rng.gen_range(1..20));
            let sites: Vec<(usize, usize)> = (0..rng.gen_range(1..6))
                .map(|_| (rng.gen_range(0..h), rng.gen_range(0..w)))
                .collect();
            let dt = squared_distance_transform(h, w, &sites);
            for i in 0..h {
                for j in 0..w {
                    let best = sites
                        .iter()
                        .map(|&(r, c)| (i as i64 - r as i64).pow(2) + (j as i64 - c as i64).pow(2))
                        .min()
                        .unwrap();
                    assert_eq!(dt[i * w + j], best);
                }
            }
        }
    }

    #[test]
    fn symmetry_laws() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let mut gen = || Plane {
                h: 16,
                w: 16,
                data: (0..256).map(|_| u8::from(rng.gen_bool(0.4))).collect::<Vec<u8>>(),
            };
            let (a, b) = (gen(), gen());
            let ab = overlap_metrics(&a, &b).unwrap();
            let ba = overlap_metrics(&b, &a).unwrap();
            assert_eq!(ab.dice, ba.dice);
            assert_eq!(ab.precision, ba.recall);
        }
    }

    #[test]
    fn report_summary_recomputes() {
        let rows: Vec<MetricRow> = (0..5)
            .map(|k| MetricRow {
                id: format!("r{k}"),
                dice: 0.5 + 0.1 * k as f64,
                iou: 0.4,
                precision: 0.9,
                recall: 0.8,
                cl_dice: 0.7,
                asd: k as f64,
                asd_sentinel: false,
            })
            .collect();
        let report = MetricsReport { rows };
        let s = report.summary();
        assert!((s[0].0 - 0.7).abs() < 1e-12);
        let dice: Vec<f64> = report.rows.iter().map(|r| r.dice).collect();
        let var = dice.iter().map(|d| (d - 0.7).powi(2)).sum::<f64>() / 4.0;
        assert!((s[0].1 - (var / 5.0).sqrt()).abs() < 1e-9);
        assert_eq!(s[1].1, 0.0);
        assert_eq!(mean_se(&[3.0]), (3.0, 0.0));
        let tsv = report.to_tsv();
        assert!(tsv.starts_with("id\tdice\tiou\tprecision\trecall\tcl_dice\tasd\tasd_sentinel\n"));
        assert_eq!(tsv.lines().count(), 1 + 5 + 2);
    }
}
