//! Central finite-difference checks of every analytic backward pass, run
//! in 64-bit arithmetic.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::grid::{
    bilinear_sample, bilinear_sample_backward, conv2d_backward, conv2d_forward, instance_norm,
    instance_norm_backward, pointwise,
    pointwise_backward, pool_down2, pool_down2_backward, upsample2, upsample2_backward, Activation,
    BinaryPlane, PlainKernel, Plane, Shape4, Tensor4,
};
use crate::net::{batch_loss, batch_loss_grad, init_network, NetConfig, Network};
use crate::sslconv::{
    accumulate_offsets, ssl_backward, ssl_forward_ctx, ssl_layer_backward, ssl_layer_forward, DirectionSet,
    OffsetGrads, OffsetMode, OffsetSource, StripKernelSet,
};
use crate::topo::{
    connectivity_cube, loss_centerline_grad, loss_connectivity_grad, loss_mask_grad, ConnectivityCube,
};

/// Largest accepted relative error.
pub const TOLERANCE: f64 = 1e-4;
/// Absolute differences at or below this count as exact agreement.
pub const ABS_FLOOR: f64 = 1e-8;
pub const STEP: f64 = 1e-6;

/// `|a - n| / max(|a|, |n|)`, or 0 inside the absolute floor.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let diff = (analytic - numeric).abs();
    if diff <= ABS_FLOOR {
        0.0
    } else {
        diff / analytic.abs().max(numeric.abs())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckReport {
    pub name: String,
    pub checked: usize,
    /// Coordinates dropped because the one-sided differences disagreed
    /// (a kink such as a ReLU or max switch within the step).
    pub skipped: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
}

impl CheckReport {
    pub fn passed(&self, tolerance: f64) -> bool {
        self.checked > 0 && self.max_rel_error <= tolerance
    }
}

/// Compares `analytic[i]` with the central difference of `f` at up to
/// `picks` coordinates of `x`, visited in a random order.
pub fn check_coordinates(
    name: &str,
    x: &[f64],
    analytic: &[f64],
    picks: usize,
    rng: &mut ChaCha8Rng,
    mut f: impl FnMut(&[f64]) -> f64,
) -> CheckReport {
    assert_eq!(x.len(), analytic.len(), "{name}: gradient length");
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.shuffle(rng);
    let mut report = CheckReport {
        name: name.to_string(),
        checked: 0,
        skipped: 0,
        max_rel_error: 0.0,
        max_abs_error: 0.0,
    };
    let f0 = f(x);
    let mut probe = x.to_vec();
    for i in order {
        if report.checked == picks {
            break;
        }
        probe[i] = x[i] + STEP;
        let fp = f(&probe);
        probe[i] = x[i] - STEP;
        let fm = f(&probe);
        probe[i] = x[i];
        let fwd = (fp - f0) / STEP;
        let bwd = (f0 - fm) / STEP;
        // A pooling switch inside the step bends the one-sided slopes apart;
        // anything looser than the tolerance would let it skew the central value.
        if (fwd - bwd).abs() > TOLERANCE * fwd.abs().max(bwd.abs()) + 1e-6 {
            report.skipped += 1;
            continue;
        }
        let numeric = (fp - fm) / (2.0 * STEP);
        report.max_rel_error = report.max_rel_error.max(relative_error(analytic[i], numeric));
        report.max_abs_error = report.max_abs_error.max((analytic[i] - numeric).abs());
        report.checked += 1;
    }
    report
}

fn uniform(rng: &mut ChaCha8Rng, len: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..len).map(|_| rng.gen_range(lo..hi)).collect()
}

fn tensor(rng: &mut ChaCha8Rng, shape: Shape4, lo: f64, hi: f64) -> Tensor4<f64> {
    Tensor4::from_vec(shape, uniform(rng, shape.len(), lo, hi)).expect("length matches shape")
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn with_shape(shape: Shape4, data: &[f64]) -> Tensor4<f64> {
    Tensor4::from_vec(shape, data.to_vec()).expect("length matches shape")
}

const PICKS: usize = 40;

pub fn suite_conv(rng: &mut ChaCha8Rng) -> Result<Vec<CheckReport>> {
    let shape = Shape4::new(1, 2, 8, 8);
    let x = tensor(rng, shape, -1.0, 1.0);
    let kernel = PlainKernel::new(3, 2, 3, 3, uniform(rng, 54, -1.0, 1.0), uniform(rng, 3, -1.0, 1.0))?;
    let (y, ctx) = conv2d_forward(&x, &kernel, 1)?;
    let r = uniform(rng, y.shape().len(), -1.0, 1.0);
    let g = conv2d_backward(&ctx, &kernel, &with_shape(y.shape(), &r))?;
    let loss = |x: &Tensor4<f64>, k: &PlainKernel<f64>| {
        dot(conv2d_forward(x, k, 1).expect("valid conv").0.data(), &r)
    };
    Ok(vec![
        check_coordinates("conv2d.input", x.data(), g.input.data(), PICKS, rng, |v| {
            loss(&with_shape(shape, v), &kernel)
        }),
        check_coordinates("conv2d.weights", &kernel.weights, &g.weights, PICKS, rng, |v| {
            let mut k = kernel.clone();
            k.weights.copy_from_slice(v);
            loss(&x, &k)
        }),
        check_coordinates("conv2d.bias", &kernel.bias, &g.bias, PICKS, rng, |v| {
            let mut k = kernel.clone();
            k.bias.copy_from_slice(v);
            loss(&x, &k)
        }),
    ])
}

pub fn suite_bilinear(rng: &mut ChaCha8Rng) -> Result<Vec<CheckReport>> {
    let (h, w) = (8, 8);
    let plane = uniform(rng, h * w, -1.0, 1.0);
    // Fractional points, some partly outside the grid.
    let points: Vec<(f64, f64)> = (0..24)
        .map(|_| (rng.gen_range(-0.9..7.9), rng.gen_range(-0.9..7.9)))
        .collect();
    let r = uniform(rng, points.len(), -1.0, 1.0);
    let mut g_plane = vec![0.0; h * w];
    let mut g_coords = Vec::with_capacity(points.len() * 2);
    for (&(pr, pc), &rk) in points.iter().zip(&r) {
        let (gr, gc) = bilinear_sample_backward(&plane, h, w, pr, pc, rk, &mut g_plane);
        g_coords.extend([gr, gc]);
    }
    let coords: Vec<f64> = points.iter().flat_map(|&(a, b)| [a, b]).collect();
    let loss = |p: &[f64], c: &[f64]| -> f64 {
        c.chunks(2)
            .zip(&r)
            .map(|(rc, rk)| rk * bilinear_sample(p, h, w, rc[0], rc[1]))
            .sum()
    };
    Ok(vec![
        check_coordinates("bilinear.plane", &plane, &g_plane, PICKS, rng, |v| loss(v, &coords)),
        check_coordinates("bilinear.coords", &coords, &g_coords, 48, rng, |v| loss(&plane, v)),
    ])
}

pub fn suite_pool(rng: &mut ChaCha8Rng) -> Result<Vec<CheckReport>> {
    let shape = Shape4::new(1, 2, 8, 8);
    let x = tensor(rng, shape, -1.0, 1.0);
    let (y, arg) = pool_down2(&x)?;
    let r = uniform(rng, y.shape().len(), -1.0, 1.0);
    let g = pool_down2_backward(&with_shape(y.shape(), &r), &arg, shape)?;
    let pool = check_coordinates("pool_down2.input", x.data(), g.data(), PICKS, rng, |v| {
        dot(pool_down2(&with_shape(shape, v)).expect("even dims").0.data(), &r)
    });
    let up = upsample2(&x);
    let r = uniform(rng, up.shape().len(), -1.0, 1.0);
    let g = upsample2_backward(&with_shape(up.shape(), &r))?;
    let upsample = check_coordinates("upsample2.input", x.data(), g.data(), PICKS, rng, |v| {
        dot(upsample2(&with_shape(shape, v)).data(), &r)
    });
    Ok(vec![pool, upsample])
}

pub fn suite_pointwise(rng: &mut ChaCha8Rng) -> Result<Vec<CheckReport>> {
    let shape = Shape4::new(1, 2, 8, 8);
    let x = tensor(rng, shape, -3.0, 3.0);
    let mut out = Vec::new();
    for (name, kind) in [("sigmoid", Activation::Sigmoid), ("relu", Activation::Relu)] {
        let y = pointwise(&x, kind);
        let r = uniform(rng, shape.len(), -1.0, 1.0);
        let g = pointwise_backward(&y, &with_shape(shape, &r), kind)?;
        out.push(check_coordinates(&format!("{name}.input"), x.data(), g.data(), PICKS, rng, |v| {
            dot(pointwise(&with_shape(shape, v), kind).data(), &r)
        }));
    }
    Ok(out)
}

pub fn suite_norm(rng: &mut ChaCha8Rng) -> Result<Vec<CheckReport>> {
    let shape = Shape4::new(2, 3, 6, 6);
    let x = tensor(rng, shape, -2.0, 2.0);
    let gamma = uniform(rng, 3, 0.5, 1.5);
    let beta = uniform(rng, 3, -0.5, 0.5);
    let (y, ctx) = instance_norm(&x, &gamma, &beta)?;
    let r = uniform(rng, y.shape().len(), -1.0, 1.0);
    let g = instance_norm_backward(&ctx, &gamma, &with_shape(shape, &r))?;
    let loss = |x: &[f64], ga: &[f64], be: &[f64]| {
        dot(instance_norm(&with_shape(shape, x), ga, be).expect("matching channels").0.data(), &r)
    };
    Ok(vec![
        check_coordinates("instance_norm.input", x.data(), g.input.data(), PICKS, rng, |v| {
            loss(v, &gamma, &beta)
        }),
        check_coordinates("instance_norm.gamma", &gamma, &g.gamma, PICKS, rng, |v| loss(x.data(), v, &beta)),
        check_coordinates("instance_norm.beta", &beta, &g.beta, PICKS, rng, |v| loss(x.data(), &gamma, v)),
    ])
}

/// Strip correlation with explicit raw increments: input, weights, bias and
/// increments.
pub fn suite_ssl(rng: &mut ChaCha8Rng) -> Result<Vec<CheckReport>> {
    let (m, c_in, c_out) = (9, 2, 2);
    let shape = Shape4::new(1, c_in, 12, 12);
    let raw_shape = Shape4::new(1, 4 * (m - 1), 12, 12);
    let x = tensor(rng, shape, -1.0, 1.0);
    let raw = tensor(rng, raw_shape, -1.5, 1.5);
    let mut k = StripKernelSet::zeros(m, c_in, c_out, DirectionSet::ALL, OffsetMode::Off)?;
    k.weights = uniform(rng, k.weights.len(), -1.0, 1.0);
    k.bias = uniform(rng, c_out, -1.0, 1.0);
    let eval = |x: &Tensor4<f64>, k: &StripKernelSet<f64>, raw: &Tensor4<f64>| {
        let field = accumulate_offsets(raw, m).expect("raw matches m");
        ssl_forward_ctx(x, k, field).expect("consistent dims")
    };
    let (y, ctx) = eval(&x, &k, &raw);
    let r = uniform(rng, y.shape().len(), -1.0, 1.0);
    let g = ssl_backward(&ctx, &k, &with_shape(y.shape(), &r))?;
    let loss = |x: &Tensor4<f64>, k: &StripKernelSet<f64>, raw: &Tensor4<f64>| dot(eval(x, k, raw).0.data(), &r);
    Ok(vec![
        check_coordinates("ssl.input", x.data(), g.input.data(), PICKS, rng, |v| {
            loss(&with_shape(shape, v), &k, &raw)
        }),
        check_coordinates("ssl.weights", &k.weights, &g.weights, PICKS, rng, |v| {
            let mut kk = k.clone();
            kk.weights.copy_from_slice(v);
            loss(&x, &kk, &raw)
        }),
        check_coordinates("ssl.bias", &k.bias, &g.bias, PICKS, rng, |v| {
            let mut kk = k.clone();
            kk.bias.copy_from_slice(v);
            loss(&x, &kk, &raw)
        }),
        check_coordinates("ssl.raw_increments", raw.data(), g.raw_increments.data(), 60, rng, |v| {
            loss(&x, &k, &with_shape(raw_shape, v))
        }),
    ])
}

/// Whole strip layers, covering the predicted and the static offset sources.
pub fn suite_ssl_layer(rng: &mut ChaCha8Rng) -> Result<Vec<CheckReport>> {
    let (m, c_in, c_out) = (5, 2, 2);
    let shape = Shape4::new(1, c_in, 10, 10);
    let x = tensor(rng, shape, -1.0, 1.0);
    let mut out = Vec::new();
    for mode in [OffsetMode::Dynamic, OffsetMode::Static] {
        let mut k = StripKernelSet::zeros(m, c_in, c_out, DirectionSet::ALL, mode)?;
        k.weights = uniform(rng, k.weights.len(), -1.0, 1.0);
        match &mut k.offsets {
            OffsetSource::Dynamic(p) => {
                p.weights = uniform(rng, p.weights.len(), -0.5, 0.5);
                p.bias = uniform(rng, p.bias.len(), -0.5, 0.5);
            }
            OffsetSource::Static(v) => *v = uniform(rng, v.len(), -1.0, 1.0),
            OffsetSource::Off => {}
        }
        let (y, ctx) = ssl_layer_forward(&x, &k)?;
        let r = uniform(rng, y.shape().len(), -1.0, 1.0);
        let g = ssl_layer_backward(&ctx, &k, &with_shape(y.shape(), &r))?;
        let loss = |k: &StripKernelSet<f64>| dot(ssl_layer_forward(&x, k).expect("valid layer").0.data(), &r);
        let (params, grads): (Vec<f64>, Vec<f64>) = match (&k.offsets, &g.offsets) {
            (OffsetSource::Dynamic(p), OffsetGrads::Dynamic { weights, bias }) => (
                p.weights.iter().chain(&p.bias).copied().collect(),
                weights.iter().chain(bias).copied().collect(),
            ),
            (OffsetSource::Static(v), OffsetGrads::Static(gv)) => (v.clone(), gv.clone()),
            _ => unreachable!("mode chosen above"),
        };
        let name = format!("ssl_layer.{}_offsets", mode.name());
        out.push(check_coordinates(&name, &params, &grads, PICKS, rng, |v| {
            let mut kk = k.clone();
            match &mut kk.offsets {
                OffsetSource::Dynamic(p) => {
                    let split = p.weights.len();
                    p.weights.copy_from_slice(&v[..split]);
                    p.bias.copy_from_slice(&v[split..]);
                }
                OffsetSource::Static(s) => s.copy_from_slice(v),
                OffsetSource::Off => {}
            }
            loss(&kk)
        }));
        out.push(check_coordinates(
            &format!("ssl_layer.{}_input", mode.name()),
            x.data(),
            g.input.data(),
            PICKS,
            rng,
            |v| dot(ssl_layer_forward(&with_shape(shape, v), &k).expect("valid layer").0.data(), &r),
        ));
    }
    Ok(out)
}

fn random_mask(rng: &mut ChaCha8Rng, h: usize, w: usize) -> BinaryPlane {
    Plane {
        h,
        w,
        data: (0..h * w).map(|_| u8::from(rng.gen_bool(0.45))).collect(),
    }
}

pub fn suite_losses(rng: &mut ChaCha8Rng) -> Result<Vec<CheckReport>> {
    let (h, w) = (8, 8);
    let gt = random_mask(rng, h, w);
    let pred = uniform(rng, h * w, 0.05, 0.95);
    let as_plane = |v: &[f64]| Plane {
        h,
        w,
        data: v.to_vec(),
    };
    let (_, g_mask) = loss_mask_grad(&as_plane(&pred), &gt)?;
    let mask = check_coordinates("loss_mask", &pred, &g_mask.data, h * w, rng, |v| {
        loss_mask_grad(&as_plane(v), &gt).expect("same dims").0
    });
    // Deeper than the training default so several erosion levels are exercised.
    let iters = 4;
    let (_, g_cl) = loss_centerline_grad(&as_plane(&pred), &gt, iters)?;
    let cl = check_coordinates("loss_centerline", &pred, &g_cl.data, h * w, rng, |v| {
        loss_centerline_grad(&as_plane(v), &gt, iters).expect("same dims").0
    });
    let gt_cube = connectivity_cube(&gt);
    let cube = uniform(rng, 8 * h * w, 0.05, 0.95);
    let as_cube = |v: &[f64]| ConnectivityCube {
        h,
        w,
        data: v.to_vec(),
    };
    let (_, g_con) = loss_connectivity_grad(&as_cube(&cube), &gt_cube)?;
    let con = check_coordinates("loss_connectivity", &cube, &g_con.data, PICKS, rng, |v| {
        loss_connectivity_grad(&as_cube(v), &gt_cube).expect("same dims").0
    });
    Ok(vec![mask, cl, con])
}

/// Loss of the full default network on one 16x16 image against `picks`
/// parameters: one per tensor first, the rest drawn at random.
pub fn suite_network(rng: &mut ChaCha8Rng, picks: usize) -> Result<Vec<CheckReport>> {
    let config = NetConfig::default();
    let mut net: Network<f64> = init_network(&config, rng.gen())?;
    // Non-zero offsets and biases keep sampling points off the integer grid.
    for v in net.tensors_mut() {
        if v.iter().all(|&x| x == 0.0) {
            v.iter_mut().for_each(|x| *x = rng.gen_range(-0.2..0.2));
        }
    }
    let shape = Shape4::new(1, 1, 16, 16);
    let image = tensor(rng, shape, 0.0, 1.0);
    let mask = random_mask(rng, 16, 16);
    let masks = [mask];
    let (_, grads) = batch_loss_grad(&image, &masks, &net, &config)?;
    let x = net.flatten();
    let g = grads.flatten();

    let blocks = net.param_blocks();
    let mut starts = Vec::with_capacity(blocks.len());
    let mut pos = 0;
    for b in &blocks {
        starts.push((pos, b.data.len()));
        pos += b.data.len();
    }
    let mut chosen: Vec<usize> = starts.iter().map(|&(s, len)| s + rng.gen_range(0..len)).collect();
    while chosen.len() < picks.max(starts.len()) + 32 {
        chosen.push(rng.gen_range(0..x.len()));
    }
    let mut seen = std::collections::HashSet::new();
    chosen.retain(|&i| seen.insert(i));
    // Check the chosen subset in order; extra candidates replace kinks.
    let sub_x: Vec<f64> = chosen.iter().map(|&i| x[i]).collect();
    let sub_g: Vec<f64> = chosen.iter().map(|&i| g[i]).collect();
    let mut probe = net.clone();
    let mut full = x.clone();
    let mut eval = |v: &[f64]| {
        for (&i, &val) in chosen.iter().zip(v) {
            full[i] = val;
        }
        probe.assign_flat(&full).expect("same parameter count");
        batch_loss(&image, &masks, &probe, &config).expect("valid batch").total
    };
    let mut fixed_order = ChaCha8Rng::seed_from_u64(0);
    let report = check_ordered("network.end_to_end", &sub_x, &sub_g, picks, &mut eval, &mut fixed_order, starts.len());
    Ok(vec![report])
}

/// Like [`check_coordinates`], but visits the first `leading` coordinates
/// in order before the shuffled remainder.
fn check_ordered(
    name: &str,
    x: &[f64],
    analytic: &[f64],
    picks: usize,
    f: &mut impl FnMut(&[f64]) -> f64,
    rng: &mut ChaCha8Rng,
    leading: usize,
) -> CheckReport {
    let lead = leading.min(x.len());
    let mut report = check_coordinates(name, &x[..lead], &analytic[..lead], picks, rng, |v| {
        let mut full = x.to_vec();
        full[..lead].copy_from_slice(v);
        f(&full)
    });
    if report.checked < picks && lead < x.len() {
        let rest = check_coordinates(name, &x[lead..], &analytic[lead..], picks - report.checked, rng, |v| {
            let mut full = x.to_vec();
            full[lead..].copy_from_slice(v);
            f(&full)
        });
        report.checked += rest.checked;
        report.skipped += rest.skipped;
        report.max_rel_error = report.max_rel_error.max(rest.max_rel_error);
        report.max_abs_error = report.max_abs_error.max(rest.max_abs_error);
    }
    report
}

/// Number of network parameters sampled by [`run_all`].
pub const NETWORK_PICKS: usize = 50;

/// Every suite, seeded.
pub fn run_all(seed: u64) -> Result<Vec<CheckReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    out.extend(suite_conv(&mut rng)?);
    out.extend(suite_bilinear(&mut rng)?);
    out.extend(suite_pool(&mut rng)?);
    out.extend(suite_pointwise(&mut rng)?);
    out.extend(suite_norm(&mut rng)?);
    out.extend(suite_ssl(&mut rng)?);
    out.extend(suite_ssl_layer(&mut rng)?);
    out.extend(suite_losses(&mut rng)?);
    out.extend(suite_network(&mut rng, NETWORK_PICKS)?);
    Ok(out)
}
