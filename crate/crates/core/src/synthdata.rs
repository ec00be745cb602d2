//! Procedural vessel trees: branching capsule strokes of shrinking width
//! rendered into noisy low-contrast grayscale images, plus PGM I/O and the
//! on-disk dataset layout.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::grid::{BinaryPlane, Plane};
use crate::topo::label_components;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub size: usize,
    /// Number of bifurcation levels below the root segment.
    pub depth: usize,
    pub root_width: f64,
    pub width_decay: f64,
    /// Uniform jitter added to each branch angle, radians.
    pub angle_jitter: f64,
    pub vessel_intensity: f64,
    pub background_intensity: f64,
    /// Per-sample uniform jitter of the vessel intensity.
    pub contrast_jitter: f64,
    pub noise_sigma: f64,
    pub blur: bool,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            size: 64,
            depth: 3,
            root_width: 4.0,
            width_decay: 0.6,
            angle_jitter: 0.35,
            vessel_intensity: 0.8,
            background_intensity: 0.2,
            contrast_jitter: 0.1,
            noise_sigma: 0.05,
            blur: true,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(crate::error::contract(m));
        if self.size < 8 {
            return bad(format!("image size {} is below 8", self.size));
        }
        if !(self.root_width >= 1.0) {
            return bad(format!("root width {} is below 1", self.root_width));
        }
        if !(self.width_decay > 0.0 && self.width_decay <= 1.0) {
            return bad(format!("width decay {} is outside (0, 1]", self.width_decay));
        }
        if !(self.noise_sigma >= 0.0) || !(self.angle_jitter >= 0.0) || !(self.contrast_jitter >= 0.0) {
            return bad("noise, angle jitter and contrast jitter must be non-negative".to_string());
        }
        for v in [self.vessel_intensity, self.background_intensity] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("intensity {v} is outside [0, 1]"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub seed: u64,
    pub image: Plane<f32>,
    pub mask: BinaryPlane,
}

pub fn sample_id(seed: u64) -> String {
    format!("s{seed:05}")
}

#[derive(Debug, Clone, Copy)]
struct Segment {
    a: (f64, f64),
    b: (f64, f64),
    radius: f64,
}

fn inside(size: usize, p: (f64, f64)) -> bool {
    let hi = size as f64 - 0.5;
    p.0 >= -0.5 && p.1 >= -0.5 && p.0 <= hi && p.1 <= hi
}

#[allow(clippy::too_many_arguments)]
fn grow(
    cfg: &SynthConfig,
    rng: &mut ChaCha8Rng,
    start: (f64, f64),
    angle: f64,
    length: f64,
    level: usize,
    out: &mut Vec<Segment>,
) {
    let end = (start.0 + length * angle.sin(), start.1 + length * angle.cos());
    let width = (cfg.root_width * cfg.width_decay.powi(level as i32)).max(1.0);
    out.push(Segment {
        a: start,
        b: end,
        radius: width / 2.0,
    });
    if level == cfg.depth || !inside(cfg.size, end) {
        return;
    }
    let spread = rng.gen_range(0.35..0.75);
    for side in [-1.0, 1.0] {
        let jitter = if cfg.angle_jitter > 0.0 {
            rng.gen_range(-cfg.angle_jitter..cfg.angle_jitter)
        } else {
            0.0
        };
        let child_len = length * rng.gen_range(0.6..0.85);
        grow(cfg, rng, end, angle + side * spread + jitter, child_len, level + 1, out);
    }
}

fn distance_to_segment(p: (f64, f64), s: &Segment) -> f64 {
    let (dr, dc) = (s.b.0 - s.a.0, s.b.1 - s.a.1);
    let len2 = dr * dr + dc * dc;
    let t = if len2 > 0.0 {
        (((p.0 - s.a.0) * dr + (p.1 - s.a.1) * dc) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (qr, qc) = (s.a.0 + t * dr - p.0, s.a.1 + t * dc - p.1);
    (qr * qr + qc * qc).sqrt()
}

fn rasterize(size: usize, segments: &[Segment]) -> BinaryPlane {
    let mut mask = Plane::filled(size, size, 0u8);
    for s in segments {
        let reach = s.radius + 1.0;
        let lo_r = (s.a.0.min(s.b.0) - reach).floor().max(0.0) as usize;
        let lo_c = (s.a.1.min(s.b.1) - reach).floor().max(0.0) as usize;
        let hi_r = ((s.a.0.max(s.b.0) + reach).ceil().max(0.0) as usize).min(size);
        let hi_c = ((s.a.1.max(s.b.1) + reach).ceil().max(0.0) as usize).min(size);
        for i in lo_r..hi_r {
            for j in lo_c..hi_c {
                if distance_to_segment((i as f64, j as f64), s) <= s.radius + 1e-9 {
                    mask.set(i, j, 1);
                }
            }
        }
    }
    mask
}

/// Keeps only the component containing `seed_px`.
fn keep_component(mask: &mut BinaryPlane, seed_px: (usize, usize)) {
    let (labels, _) = label_components(mask);
    let keep = labels[seed_px.0 * mask.w + seed_px.1];
    for (v, &l) in mask.data.iter_mut().zip(&labels) {
        *v = u8::from(l != 0 && l == keep);
    }
}

fn box_blur(plane: &Plane<f64>) -> Plane<f64> {
    let (h, w) = (plane.h, plane.w);
    let mut out = Plane::filled(h, w, 0.0);
    for i in 0..h {
        for j in 0..w {
            let mut sum = 0.0;
            let mut n = 0.0;
            for r in i.saturating_sub(1)..(i + 2).min(h) {
                for c in j.saturating_sub(1)..(j + 2).min(w) {
                    sum += plane.at(r, c);
                    n += 1.0;
                }
            }
            out.set(i, j, sum / n);
        }
    }
    out
}

/// One image/mask pair, fully determined by `(config, seed)`. Image values
/// are quantized to 8-bit levels so samples survive a PGM round trip exactly.
pub fn generate(config: &SynthConfig, seed: u64) -> Result<Sample> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let size = config.size;
    let n = size as f64;
    // The root enters from a random side, heading roughly inward.
    let side = rng.gen_range(0..4);
    let along = rng.gen_range(0.25 * n..0.75 * n);
    let (start, heading) = match side {
        0 => ((0.0, along), std::f64::consts::FRAC_PI_2),
        1 => ((n - 1.0, along), -std::f64::consts::FRAC_PI_2),
        2 => ((along, 0.0), 0.0),
        _ => ((along, n - 1.0), std::f64::consts::PI),
    };
    let heading = heading + rng.gen_range(-0.3..0.3);
    let root_len = rng.gen_range(0.3 * n..0.45 * n);
    let mut segments = Vec::new();
    grow(config, &mut rng, start, heading, root_len, 0, &mut segments);
    let mut mask = rasterize(size, &segments);
    let root_px = (
        (start.0.round() as usize).min(size - 1),
        (start.1.round() as usize).min(size - 1),
    );
    keep_component(&mut mask, root_px);

    let lo = config.vessel_intensity - config.contrast_jitter;
    let hi = config.vessel_intensity + config.contrast_jitter;
    let vessel = if hi > lo { rng.gen_range(lo..hi) } else { config.vessel_intensity };
    let bg = config.background_intensity;
    let mut image = Plane {
        h: size,
        w: size,
        data: mask.data.iter().map(|&m| bg + (vessel - bg) * f64::from(m)).collect(),
    };
    if config.blur {
        image = box_blur(&image);
    }
    if config.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, config.noise_sigma).map_err(|e| crate::error::contract(e.to_string()))?;
        for v in &mut image.data {
            *v += normal.sample(&mut rng);
        }
    }
    let image = Plane {
        h: size,
        w: size,
        data: image.data.iter().map(|&v| quantize(v as f32) as f32 / 255.0).collect(),
    };
    Ok(Sample {
        id: sample_id(seed),
        seed,
        image,
        mask,
    })
}

/// `[0, 1]` to a byte, rounding half up.
fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8
}

pub fn encode_pgm(plane: &Plane<f32>) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", plane.w, plane.h).into_bytes();
    out.extend(plane.data.iter().map(|&v| quantize(v)));
    out
}

pub fn write_pgm(plane: &Plane<f32>, path: &Path) -> Result<()> {
    fs::write(path, encode_pgm(plane))?;
    Ok(())
}

pub fn write_mask_pgm(mask: &BinaryPlane, path: &Path) -> Result<()> {
    write_pgm(&mask.to_real(), path)
}

pub fn decode_pgm(bytes: &[u8]) -> Result<Plane<f32>> {
    let mut pos = 0;
    let mut token = |what: &str| -> Result<String> {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() && bytes[pos] != b'#' {
            pos += 1;
        }
        if start == pos {
            return Err(Error::PgmHeader(format!("missing {what}")));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    let magic = token("magic")?;
    if magic != "P5" {
        return Err(Error::PgmHeader(format!("magic `{magic}` is not P5")));
    }
    let mut number = |what: &str| -> Result<usize> {
        let t = token(what)?;
        t.parse().map_err(|_| Error::PgmHeader(format!("{what} `{t}` is not a number")))
    };
    let w = number("width")?;
    let h = number("height")?;
    let maxval = number("maxval")?;
    if maxval != 255 {
        return Err(Error::PgmMaxval(maxval.min(u32::MAX as usize) as u32));
    }
    // Exactly one whitespace byte separates the header from the payload.
    let data_start = pos + 1;
    let expected = w * h;
    let found = bytes.len().saturating_sub(data_start);
    if found < expected {
        return Err(Error::PgmShortPayload { expected, found });
    }
    let data = bytes[data_start..data_start + expected]
        .iter()
        .map(|&b| f32::from(b) / 255.0)
        .collect();
    Ok(Plane { h, w, data })
}

pub fn read_pgm(path: &Path) -> Result<Plane<f32>> {
    decode_pgm(&fs::read(path)?)
}

pub fn read_mask_pgm(path: &Path) -> Result<BinaryPlane> {
    Ok(read_pgm(path)?.binarize(0.5))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Split> {
        Split::ALL.into_iter().find(|k| k.name() == s)
    }
}

/// Sample counts per split.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SplitSizes {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl Default for SplitSizes {
    fn default() -> Self {
        Self {
            train: 64,
            val: 8,
            test: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> &[Sample] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    fn split_mut(&mut self, split: Split) -> &mut Vec<Sample> {
        match split {
            Split::Train => &mut self.train,
            Split::Val => &mut self.val,
            Split::Test => &mut self.test,
        }
    }
}

/// Per-sample seeds: master seed `s` owns the block `s * 1_000_000 ..`,
/// consumed in train, val, test order.
pub fn split_seeds(master_seed: u64, sizes: SplitSizes) -> Vec<(u64, Split)> {
    let base = master_seed * 1_000_000;
    let mut out = Vec::new();
    let mut next = base;
    for (split, count) in [(Split::Train, sizes.train), (Split::Val, sizes.val), (Split::Test, sizes.test)] {
        for _ in 0..count {
            out.push((next, split));
            next += 1;
        }
    }
    out
}

pub fn generate_dataset(config: &SynthConfig, sizes: SplitSizes, master_seed: u64) -> Result<Dataset> {
    let mut ds = Dataset::default();
    for (seed, split) in split_seeds(master_seed, sizes) {
        ds.split_mut(split).push(generate(config, seed)?);
    }
    Ok(ds)
}

fn images_dir(root: &Path) -> PathBuf {
    root.join("images")
}

fn masks_dir(root: &Path) -> PathBuf {
    root.join("masks")
}

/// Writes `<root>/{images,masks}/<id>.pgm` and `<root>/manifest.tsv`.
pub fn write_dataset(ds: &Dataset, root: &Path) -> Result<()> {
    fs::create_dir_all(images_dir(root))?;
    fs::create_dir_all(masks_dir(root))?;
    let mut manifest = String::from("id\tseed\tsplit\n");
    for split in Split::ALL {
        for s in ds.split(split) {
            write_pgm(&s.image, &images_dir(root).join(format!("{}.pgm", s.id)))?;
            write_mask_pgm(&s.mask, &masks_dir(root).join(format!("{}.pgm", s.id)))?;
            let _ = writeln!(manifest, "{}\t{}\t{}", s.id, s.seed, split.name());
        }
    }
    fs::write(root.join("manifest.tsv"), manifest)?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestRow {
    pub id: String,
    pub seed: u64,
    pub split: Split,
}

pub fn read_manifest(root: &Path) -> Result<Vec<ManifestRow>> {
    let path = root.join("manifest.tsv");
    let text = fs::read_to_string(&path)
        .map_err(|e| Error::Dataset(format!("cannot read {}: {e}", path.display())))?;
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some("id\tseed\tsplit") {
        return Err(Error::Dataset(format!("{} lacks the `id seed split` header", path.display())));
    }
    let mut rows = Vec::new();
    for (n, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        let bad = || Error::Dataset(format!("manifest line {}: `{line}`", n + 2));
        if f.len() != 3 {
            return Err(bad());
        }
        rows.push(ManifestRow {
            id: f[0].to_string(),
            seed: f[1].parse().map_err(|_| bad())?,
            split: Split::parse(f[2]).ok_or_else(bad)?,
        });
    }
    Ok(rows)
}

pub fn load_dataset(root: &Path) -> Result<Dataset> {
    let mut ds = Dataset::default();
    for row in read_manifest(root)? {
        let image = read_pgm(&images_dir(root).join(format!("{}.pgm", row.id)))?;
        let mask = read_mask_pgm(&masks_dir(root).join(format!("{}.pgm", row.id)))?;
        if !image.same_dims(&mask) {
            return Err(Error::Dataset(format!("{}: image and mask dims differ", row.id)));
        }
        ds.split_mut(row.split).push(Sample {
            id: row.id,
            seed: row.seed,
            image,
            mask,
        });
    }
    Ok(ds)
}

/// Loads the masks of one split from any directory in the dataset layout
/// (used for prediction directories, whose images folder may be absent).
pub fn load_split_masks(root: &Path, split: Split) -> Result<Vec<(String, BinaryPlane)>> {
    read_manifest(root)?
        .into_iter()
        .filter(|r| r.split == split)
        .map(|r| Ok((r.id.clone(), read_mask_pgm(&masks_dir(root).join(format!("{}.pgm", r.id)))?)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::topo::component_count;

    /// True when some foreground pixel has background on both sides along
    /// a row or a column.
    fn has_thin_pixel(m: &BinaryPlane) -> bool {
        let bg = |i: isize, j: isize| {
            i < 0 || j < 0 || i >= m.h as isize || j >= m.w as isize || m.at(i as usize, j as usize) == 0
        };
        (0..m.h as isize).any(|i| {
            (0..m.w as isize).any(|j| {
                !bg(i, j) && ((bg(i - 1, j) && bg(i + 1, j)) || (bg(i, j - 1) && bg(i, j + 1)))
            })
        })
    }

    #[test]
    fn generator_is_deterministic() {
        let cfg = SynthConfig::default();
        assert_eq!(generate(&cfg, 3).unwrap(), generate(&cfg, 3).unwrap());
        assert_ne!(generate(&cfg, 3).unwrap().mask, generate(&cfg, 4).unwrap().mask);
        assert_eq!(generate(&cfg, 42).unwrap().id, "s00042");
    }

    #[test]
    fn degenerate_rendering_is_the_mask() {
        let cfg = SynthConfig {
            noise_sigma: 0.0,
            vessel_intensity: 1.0,
            background_intensity: 0.0,
            contrast_jitter: 0.0,
            blur: false,
            ..SynthConfig::default()
        };
        let s = generate(&cfg, 9).unwrap();
        assert_eq!(s.image, s.mask.to_real::<f32>());
    }

    #[test]
    fn default_masks_are_single_thin_trees() {
        let cfg = SynthConfig::default();
        for seed in 0..100 {
            let s = generate(&cfg, seed).unwrap();
            assert_eq!(component_count(&s.mask), 1, "seed {seed}");
            let frac = s.mask.count() as f64 / (64.0 * 64.0);
            assert!((0.02..=0.40).contains(&frac), "seed {seed}: fraction {frac}");
            assert!(has_thin_pixel(&s.mask), "seed {seed}");
            assert!(s.image.data.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn pgm_examples() {
        let zeros = Plane::filled(3, 5, 0.0f32);
        assert_eq!(decode_pgm(&encode_pgm(&zeros)).unwrap(), zeros);
        let ones = Plane::filled(2, 2, 1.0f32);
        assert_eq!(encode_pgm(&ones)[encode_pgm(&ones).len() - 1], 255);
        assert_eq!(decode_pgm(&encode_pgm(&ones)).unwrap(), ones);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = Plane {
            h: 7,
            w: 9,
            data: (0..63).map(|_| rng.gen_range(0.0f32..=1.0)).collect(),
        };
        let back = decode_pgm(&encode_pgm(&p)).unwrap();
        let worst = p.data.iter().zip(&back.data).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
        assert!(worst <= 1.0 / 510.0 + 1e-7, "{worst}");
    }

    #[test]
    fn pgm_header_comments_and_errors() {
        let mut bytes = b"P5\n# made by hand\n2 1\n# another\n255\n".to_vec();
        bytes.extend([0u8, 255]);
        assert_eq!(decode_pgm(&bytes).unwrap().data, vec![0.0, 1.0]);
        assert!(matches!(decode_pgm(b"P2\n1 1\n255\n\x00"), Err(Error::PgmHeader(_))));
        assert!(matches!(decode_pgm(b"P5\n1 1\n65535\n\x00"), Err(Error::PgmMaxval(65535))));
        assert!(matches!(
            decode_pgm(b"P5\n2 2\n255\n\x00"),
            Err(Error::PgmShortPayload { expected: 4, found: 1 })
        ));
        assert!(matches!(decode_pgm(b"P5\n2"), Err(Error::PgmHeader(_))));
    }

    #[test]
    fn dataset_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let sizes = SplitSizes { train: 3, val: 1, test: 2 };
        let ds = generate_dataset(&SynthConfig::default(), sizes, 2).unwrap();
        write_dataset(&ds, dir.path()).unwrap();
        assert_eq!(load_dataset(dir.path()).unwrap(), ds);
        let masks = load_split_masks(dir.path(), Split::Test).unwrap();
        assert_eq!(masks.len(), 2);
        assert_eq!(masks[0].0, "s2000004");
    }
}
