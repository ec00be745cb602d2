//! End-to-end acceptance run: one PASS/FAIL line per criterion, non-zero
//! exit if any fails. Tolerances are fixed here and never loosened.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use pasc::experiment::{ablation_tsv, run_ablation, synthesize, AblationResult, ExperimentConfig};
use pasc::gradcheck::{self, TOLERANCE};
use pasc::grid::{BinaryPlane, Plane, Shape4, Tensor4};
use pasc::metrics::{asd, boundary, evaluate_pair};
use pasc::net::{init_params, load_checkpoint, save_checkpoint, train_step, NetConfig};
use pasc::sslconv::{
    accumulate_offsets, ssl_forward, ssl_layer_forward, DirectionSet, OffsetMode, OffsetSource, StripKernelSet,
};
use pasc::synthdata::{generate, generate_dataset, SplitSizes, SynthConfig};
use pasc::topo::{component_count, connectivity_cube, hard_skeleton, loss_connectivity, soft_skeleton, ConnectivityCube};

const GRADCHECK_BUDGET: Duration = Duration::from_secs(120);
const ZERO_OFFSET_TOL: f32 = 1e-6;
const LN2_TOL: f64 = 1e-6;
const TRAIN_BUDGET: Duration = Duration::from_secs(15 * 60);
const MAX_EPOCHS: usize = 200;
const MIN_DICE: f64 = 0.85;
const MIN_CL_DICE: f64 = 0.80;
const ABLATION_SLACK: f64 = 0.005;

type Outcome = Result<String, String>;

fn ensure(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn random_mask(rng: &mut ChaCha8Rng, h: usize, w: usize, p: f64) -> BinaryPlane {
    Plane {
        h,
        w,
        data: (0..h * w).map(|_| u8::from(rng.gen_bool(p))).collect(),
    }
}

fn gradients() -> Outcome {
    let start = Instant::now();
    let reports = gradcheck::run_all(0).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    let worst = reports.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    let failed: Vec<&str> = reports.iter().filter(|r| !r.passed(TOLERANCE)).map(|r| r.name.as_str()).collect();
    ensure(
        failed.is_empty() && elapsed < GRADCHECK_BUDGET,
        format!(
            "{} checks, worst rel error {worst:.2e}, {:.1}s, failing: {failed:?}",
            reports.len(),
            elapsed.as_secs_f64()
        ),
    )
}

/// Rigid strip correlation written directly from the tap geometry, with
/// zero padding.
fn strip_oracle(x: &Tensor4<f32>, k: &StripKernelSet<f32>) -> Tensor4<f32> {
    let s = x.shape();
    let half = (k.m / 2) as isize;
    let tap = |d: usize, i: isize, j: isize, t: isize| match d {
        0 => (i, j + t),
        1 => (i + t, j),
        2 => (i + t, j + t),
        _ => (i - t, j + t),
    };
    Tensor4::from_fn(Shape4::new(s.n, k.c_out, s.h, s.w), |b, o, i, j| {
        let mut acc = k.bias[o] as f64;
        for d in 0..4 {
            for c in 0..k.c_in {
                for ti in 0..k.m {
                    let (r, q) = tap(d, i as isize, j as isize, ti as isize - half);
                    if r < 0 || q < 0 || r >= s.h as isize || q >= s.w as isize {
                        continue;
                    }
                    let wgt = k.weights[((d * k.c_out + o) * k.c_in + c) * k.m + ti];
                    acc += wgt as f64 * x.get(b, c, r as usize, q as usize) as f64;
                }
            }
        }
        acc as f32
    })
}

fn zero_offsets() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f32;
    for _ in 0..20 {
        let m = [3, 5, 7, 9, 11][rng.gen_range(0..5)];
        let (c_in, c_out) = (rng.gen_range(1..4), rng.gen_range(1..4));
        let (h, w) = (rng.gen_range(4..14), rng.gen_range(4..14));
        let x = Tensor4::from_fn(Shape4::new(2, c_in, h, w), |_, _, _, _| rng.gen_range(-1.0f32..1.0));
        let mut k = StripKernelSet::<f32>::zeros(m, c_in, c_out, DirectionSet::ALL, OffsetMode::Dynamic)
            .map_err(|e| e.to_string())?;
        // Same scale as network initialization: uniform(+-sqrt(1 / fan_in)).
        let bound = (1.0 / (4 * c_in * m) as f32).sqrt();
        k.weights.iter_mut().for_each(|v| *v = rng.gen_range(-bound..bound));
        k.bias.iter_mut().for_each(|v| *v = rng.gen_range(-bound..bound));
        let want = strip_oracle(&x, &k);

        let raw = Tensor4::zeros(Shape4::new(2, 4 * (m - 1), h, w));
        let field = accumulate_offsets(&raw, m).map_err(|e| e.to_string())?;
        let via_field = ssl_forward(&x, &k, &field).map_err(|e| e.to_string())?;
        // The untouched all-zero predictor yields zero increments inside the layer.
        assert!(matches!(k.offsets, OffsetSource::Dynamic(_)));
        let (via_layer, _) = ssl_layer_forward(&x, &k).map_err(|e| e.to_string())?;
        worst = worst.max(via_field.max_abs_diff(&want)).max(via_layer.max_abs_diff(&want));
    }
    ensure(worst <= ZERO_OFFSET_TOL, format!("20 instances, max abs diff {worst:.2e}"))
}

fn offset_continuity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for n in 0..1000 {
        let m = 2 * rng.gen_range(1..=6) + 1;
        let scale = [0.01, 1.0, 10.0, 1e4][n % 4];
        let raw = Tensor4::from_fn(Shape4::new(1, 4 * (m - 1), 4, 4), |_, _, _, _| {
            rng.gen_range(-1.0f32..1.0) * scale as f32
        });
        let field = accumulate_offsets(&raw, m).map_err(|e| e.to_string())?;
        if !field.is_continuous() {
            return Err(format!("input {n} (m = {m}, scale {scale}) breaks the offset bound"));
        }
    }
    Ok("1000 random increment tensors, midpoint 0 and steps <= 1".to_string())
}

/// Neighbour k of a pixel in raster order over the 3x3 window, centre
/// skipped; connected when both pixels are foreground.
fn cube_oracle(mask: &BinaryPlane) -> Vec<u8> {
    let (h, w) = (mask.h as isize, mask.w as isize);
    let offsets: Vec<(isize, isize)> = (-1..=1)
        .flat_map(|a| (-1..=1).map(move |b| (a, b)))
        .filter(|&o| o != (0, 0))
        .collect();
    let mut out = Vec::with_capacity(8 * mask.h * mask.w);
    for &(di, dj) in &offsets {
        for i in 0..h {
            for j in 0..w {
                let (r, c) = (i + di, j + dj);
                let inside = r >= 0 && c >= 0 && r < h && c < w;
                let v = inside
                    && mask.at(i as usize, j as usize) == 1
                    && mask.at(r as usize, c as usize) == 1;
                out.push(u8::from(v));
            }
        }
    }
    out
}

fn connectivity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for n in 0..100 {
        let p = rng.gen_range(0.1..0.9);
        let mask = random_mask(&mut rng, 32, 32, p);
        let cube = connectivity_cube(&mask);
        if cube.data != cube_oracle(&mask) {
            return Err(format!("mask {n} differs from the brute-force cube"));
        }
        for k in 0..8 {
            let (di, dj) = [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)][k];
            for i in 0..32isize {
                for j in 0..32isize {
                    let (r, c) = (i + di, j + dj);
                    if (0..32).contains(&r)
                        && (0..32).contains(&c)
                        && cube.at(k, i as usize, j as usize) != cube.at(7 - k, r as usize, c as usize)
                    {
                        return Err(format!("mask {n}: reciprocity fails at ({i}, {j}) channel {k}"));
                    }
                }
            }
        }
    }
    Ok("100 random 32x32 masks match the oracle; reciprocity holds".to_string())
}

fn is_thin_path(sk: &BinaryPlane) -> bool {
    let on = |i: isize, j: isize| {
        i >= 0 && j >= 0 && i < sk.h as isize && j < sk.w as isize && sk.at(i as usize, j as usize) != 0
    };
    let mut ends = 0;
    for i in 0..sk.h as isize {
        for j in 0..sk.w as isize {
            if !on(i, j) {
                continue;
            }
            if on(i + 1, j) && on(i, j + 1) && on(i + 1, j + 1) {
                return false;
            }
            let deg = (-1..=1)
                .flat_map(|a| (-1..=1).map(move |b| (a, b)))
                .filter(|&(a, b)| (a, b) != (0, 0) && on(i + a, j + b))
                .count();
            match deg {
                1 => ends += 1,
                2 => {}
                _ => return false,
            }
        }
    }
    ends == 2 && component_count(sk) == 1
}

fn skeletons() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for n in 0..100 {
        let (h, w) = (rng.gen_range(4..40), rng.gen_range(4..40));
        let p = Plane {
            h,
            w,
            data: (0..h * w).map(|_| rng.gen_range(0.0f64..=1.0)).collect(),
        };
        let s = soft_skeleton(&p, pasc::topo::DEFAULT_SKELETON_ITERATIONS);
        if s.data.iter().zip(&p.data).any(|(&v, &x)| !(v >= 0.0 && v <= x)) {
            return Err(format!("probability map {n}: soft skeleton leaves [0, mask]"));
        }
    }
    let synth = SynthConfig::default();
    for seed in 0..100 {
        let mask = generate(&synth, 50_000 + seed).map_err(|e| e.to_string())?.mask;
        let sk = hard_skeleton(&mask);
        if sk.data.iter().zip(&mask.data).any(|(&s, &m)| s > m) {
            return Err(format!("tree {seed}: skeleton leaves the mask"));
        }
        let (a, b) = (component_count(&mask), component_count(&sk));
        if a != b {
            return Err(format!("tree {seed}: {a} components became {b}"));
        }
    }
    let mut ribbon = Plane::filled(7, 26, 0u8);
    for i in 2..5 {
        for j in 3..23 {
            ribbon.set(i, j, 1);
        }
    }
    let sk = hard_skeleton(&ribbon);
    ensure(
        sk.count() > 0 && is_thin_path(&sk),
        format!("100 maps, 100 trees; 3x20 ribbon -> {} px path", sk.count()),
    )
}

fn brute_asd(a: &BinaryPlane, b: &BinaryPlane) -> f64 {
    let directed = |from: &[(usize, usize)], to: &[(usize, usize)]| {
        let total: f64 = from
            .iter()
            .map(|&(i, j)| {
                let d2 = to
                    .iter()
                    .map(|&(r, c)| {
                        let (di, dj) = (i as i64 - r as i64, j as i64 - c as i64);
                        di * di + dj * dj
                    })
                    .min()
                    .unwrap();
                (d2 as f64).sqrt()
            })
            .sum();
        total / from.len() as f64
    };
    let (ba, bb) = (boundary(a), boundary(b));
    (directed(&ba, &bb) + directed(&bb, &ba)) / 2.0
}

fn metric_identities() -> Outcome {
    let synth = SynthConfig::default();
    for seed in 0..50 {
        let mask = generate(&synth, 60_000 + seed).map_err(|e| e.to_string())?.mask;
        let row = evaluate_pair("self", &mask, &mask).map_err(|e| e.to_string())?;
        if row.values() != [1.0, 1.0, 1.0, 1.0, 1.0, 0.0] {
            return Err(format!("mask {seed}: self-comparison gives {:?}", row.values()));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for n in 0..50 {
        let (h, w) = (rng.gen_range(4..30), rng.gen_range(4..30));
        let a = random_mask(&mut rng, h, w, 0.4);
        let b = random_mask(&mut rng, h, w, 0.4);
        if boundary(&a).is_empty() || boundary(&b).is_empty() {
            continue;
        }
        let (got, want) = (asd(&a, &b).map_err(|e| e.to_string())?, brute_asd(&a, &b));
        if got != want {
            return Err(format!("pair {n}: asd {got} vs brute force {want}"));
        }
    }
    let gt = random_mask(&mut rng, 16, 16, 0.5);
    let half = ConnectivityCube::new(16, 16, vec![0.5f64; 8 * 256]).map_err(|e| e.to_string())?;
    let l = loss_connectivity(&half, &connectivity_cube(&gt)).map_err(|e| e.to_string())?;
    let diff = (l - std::f64::consts::LN_2).abs();
    ensure(diff <= LN2_TOL, format!("50 self-comparisons, 50 asd pairs, |L_con(0.5) - ln 2| = {diff:.1e}"))
}

/// Criteria 7 and 8 share one ablation run; the full-loss strip row is
/// exactly the default configuration.
fn training_and_ablation() -> (Outcome, Outcome) {
    let config = ExperimentConfig::default();
    assert_eq!(config.net.seed, 0);
    let data = match synthesize(&config, 0) {
        Ok(d) => d,
        Err(e) => return (Err(e.to_string()), Err(e.to_string())),
    };
    let mut timings = Vec::new();
    let mut last = Instant::now();
    let results = run_ablation(&config, &data, |r| {
        let now = Instant::now();
        timings.push((r.row.name.clone(), now - last));
        eprintln!(
            "  ablation row {:<11} dice {:.4} cl_dice {:.4} ({:.0}s)",
            r.row.name,
            r.report.mean("dice").unwrap_or(f64::NAN),
            r.report.mean("cl_dice").unwrap_or(f64::NAN),
            (now - last).as_secs_f64()
        );
        last = now;
    });
    let results = match results {
        Ok(r) => r,
        Err(e) => return (Err(e.to_string()), Err(e.to_string())),
    };
    let tsv = ablation_tsv(&results);
    let path = std::env::temp_dir().join("pasc_ablation.tsv");
    let _ = std::fs::write(&path, &tsv);
    println!("ablation grid ({}):\n{tsv}", path.display());

    let find = |name: &str| results.iter().find(|r| r.row.name == name);
    let dice = |r: &AblationResult| r.report.mean("dice").unwrap_or(f64::NAN);

    let c7 = match find("xyzw+nc+cl") {
        None => Err("grid lacks the xyzw+nc+cl row".to_string()),
        Some(r) => {
            let d = dice(r);
            let cl = r.report.mean("cl_dice").unwrap_or(f64::NAN);
            let t = timings.iter().find(|(n, _)| n == "xyzw+nc+cl").map(|x| x.1).unwrap_or_default();
            ensure(
                d >= MIN_DICE
                    && cl >= MIN_CL_DICE
                    && t < TRAIN_BUDGET
                    && config.net.epochs <= MAX_EPOCHS
                    && data.train.len() == 64
                    && r.report.rows.len() == 16,
                format!(
                    "{} epochs, {} train / {} test: dice {d:.4}, cl_dice {cl:.4}, {:.0}s",
                    config.net.epochs,
                    data.train.len(),
                    r.report.rows.len(),
                    t.as_secs_f64()
                ),
            )
        }
    };
    let c8 = match (find("square"), find("xyzw"), find("xyzw+nc+cl")) {
        (Some(sq), Some(x), Some(full)) => {
            let (a, b, c) = (dice(sq), dice(x), dice(full));
            ensure(
                b >= a - ABLATION_SLACK && c >= b - ABLATION_SLACK,
                format!("dice square {a:.4} -> xyzw {b:.4} -> xyzw+nc+cl {c:.4}"),
            )
        }
        _ => Err("grid lacks square, xyzw or xyzw+nc+cl".to_string()),
    };
    (c7, c8)
}

fn determinism() -> Outcome {
    let synth = SynthConfig::default();
    let sizes = SplitSizes { train: 4, val: 1, test: 2 };
    let a = generate_dataset(&synth, sizes, 9).map_err(|e| e.to_string())?;
    let b = generate_dataset(&synth, sizes, 9).map_err(|e| e.to_string())?;
    let same_data = a == b
        && a.train.iter().zip(&b.train).all(|(x, y)| {
            x.image.data.iter().map(|v| v.to_bits()).eq(y.image.data.iter().map(|v| v.to_bits()))
        });

    let cfg = NetConfig::default();
    let p1 = init_params(&cfg, 11).map_err(|e| e.to_string())?;
    let p2 = init_params(&cfg, 11).map_err(|e| e.to_string())?;
    let bits = |p: &pasc::net::NetParams<f32>| p.net.flatten().iter().map(|v| v.to_bits()).collect::<Vec<u32>>();
    let same_init = bits(&p1) == bits(&p2);

    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("net.ckpt");
    save_checkpoint(&p1.net, &path).map_err(|e| e.to_string())?;
    let loaded = load_checkpoint(&path, &cfg).map_err(|e| e.to_string())?;
    let round_trip = bits(&loaded) == bits(&p1);

    let mut zero_lr = cfg.clone();
    zero_lr.learning_rate = 0.0;
    let mut p = p1.clone();
    let s = &a.train[..2];
    let images = Tensor4::from_vec(
        Shape4::new(2, 1, synth.size, synth.size),
        s.iter().flat_map(|x| x.image.data.iter().copied()).collect(),
    )
    .map_err(|e| e.to_string())?;
    let masks: Vec<BinaryPlane> = s.iter().map(|x| x.mask.clone()).collect();
    train_step(&images, &masks, &mut p, &zero_lr).map_err(|e| e.to_string())?;
    let fixpoint = bits(&p) == bits(&p1);

    ensure(
        same_data && same_init && round_trip && fixpoint,
        format!("dataset {same_data}, init {same_init}, checkpoint {round_trip}, lr=0 fixpoint {fixpoint}"),
    )
}

fn main() -> ExitCode {
    let mut all_ok = true;
    let mut report = |n: usize, title: &str, outcome: Outcome| {
        let (tag, detail) = match outcome {
            Ok(d) => ("PASS", d),
            Err(d) => {
                all_ok = false;
                ("FAIL", d)
            }
        };
        println!("criterion {n} {tag} {title}: {detail}");
    };
    report(1, "gradient suite", gradients());
    report(2, "zero-offset reduction", zero_offsets());
    report(3, "offset constraint", offset_continuity());
    report(4, "connectivity oracle", connectivity());
    report(5, "skeleton properties", skeletons());
    report(6, "metric identities", metric_identities());
    let (c7, c8) = training_and_ablation();
    report(7, "desk-scale training", c7);
    report(8, "ablation trend", c8);
    report(9, "determinism and persistence", determinism());
    if all_ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
