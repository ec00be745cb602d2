//! Training loop, held-out evaluation and the ablation grid.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{contract, Result};
use crate::grid::{BinaryPlane, Plane, Shape4, Tensor4};
use crate::metrics::{evaluate_pair, mean_se, MetricsReport, METRIC_NAMES};
use crate::net::{forward, init_params, train_step, ConvKind, NetConfig, NetParams, Network};
use crate::synthdata::{Dataset, Sample, SplitSizes, SynthConfig};
use crate::topo::LossBreakdown;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LrSchedule {
    Constant,
    /// `lr * (1 - epoch / epochs)^0.9`.
    Poly,
}

impl LrSchedule {
    pub fn name(self) -> &'static str {
        match self {
            LrSchedule::Constant => "constant",
            LrSchedule::Poly => "poly",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [LrSchedule::Constant, LrSchedule::Poly].into_iter().find(|k| k.name() == s)
    }

    pub fn rate(self, base: f64, epoch: usize, epochs: usize) -> f64 {
        match self {
            LrSchedule::Constant => base,
            LrSchedule::Poly => base * (1.0 - epoch as f64 / epochs.max(1) as f64).powf(0.9),
        }
    }
}

/// One configuration of the ablation grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AblationRow {
    pub name: String,
    pub conv_kind: ConvKind,
    pub use_nc: bool,
    pub use_cl: bool,
}

impl AblationRow {
    /// Parses `square`, `xy`, `zw`, `xyzw`, optionally followed by `+nc`
    /// and/or `+cl`.
    pub fn parse(spec: &str) -> Option<Self> {
        let mut parts = spec.trim().split('+');
        let conv_kind = match parts.next()? {
            "square" => ConvKind::Square,
            "xy" => ConvKind::SslXy,
            "zw" => ConvKind::SslZw,
            "xyzw" => ConvKind::SslXyzw,
            _ => return None,
        };
        let (mut use_nc, mut use_cl) = (false, false);
        for p in parts {
            match p {
                "nc" if !use_nc => use_nc = true,
                "cl" if !use_cl => use_cl = true,
                _ => return None,
            }
        }
        Some(Self {
            name: spec.trim().to_string(),
            conv_kind,
            use_nc,
            use_cl,
        })
    }
}

pub const DEFAULT_ABLATION_ROWS: [&str; 6] = ["square", "xy", "zw", "xyzw", "xyzw+nc", "xyzw+nc+cl"];

pub fn default_ablation_rows() -> Vec<AblationRow> {
    DEFAULT_ABLATION_ROWS
        .iter()
        .map(|s| AblationRow::parse(s).expect("built-in rows parse"))
        .collect()
}

/// Everything a run needs: network, data and evaluation settings.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub net: NetConfig,
    pub synth: SynthConfig,
    pub splits: SplitSizes,
    pub lr_schedule: LrSchedule,
    pub threshold: f64,
    pub ablation_rows: Vec<AblationRow>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            net: NetConfig::default(),
            synth: SynthConfig::default(),
            splits: SplitSizes::default(),
            lr_schedule: LrSchedule::Poly,
            threshold: crate::metrics::DEFAULT_THRESHOLD,
            ablation_rows: default_ablation_rows(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.net.validate()?;
        self.synth.validate()?;
        let f = 1usize << self.net.levels;
        if self.synth.size % f != 0 {
            return Err(contract(format!(
                "image size {} is not divisible by 2^levels = {f}",
                self.synth.size
            )));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(contract(format!("threshold {} is outside (0, 1)", self.threshold)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossLogRow {
    pub epoch: usize,
    pub step: usize,
    pub loss: LossBreakdown,
}

pub fn loss_log_tsv(rows: &[LossLogRow]) -> String {
    let mut out = String::from("epoch\tstep\tl_mask\tl_cl\tl_con\ttotal\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{}\t{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}",
            r.epoch, r.step, r.loss.l_mask, r.loss.l_cl, r.loss.l_con, r.loss.total
        );
    }
    out
}

fn stack_images(samples: &[&Sample]) -> Result<Tensor4<f32>> {
    let first = samples.first().ok_or_else(|| contract("empty batch"))?;
    let (h, w) = (first.image.h, first.image.w);
    let mut data = Vec::with_capacity(samples.len() * h * w);
    for s in samples {
        if s.image.h != h || s.image.w != w {
            return Err(contract(format!("sample {} is not {h}x{w}", s.id)));
        }
        data.extend_from_slice(&s.image.data);
    }
    Tensor4::from_vec(Shape4::new(samples.len(), 1, h, w), data)
}

/// Trains from a fresh seeded initialization. `on_epoch` sees the epoch
/// index and that epoch's mean loss.
pub fn train(
    config: &ExperimentConfig,
    train_set: &[Sample],
    mut on_epoch: impl FnMut(usize, &LossBreakdown),
) -> Result<(NetParams, Vec<LossLogRow>)> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(contract("training set is empty"));
    }
    let mut net_cfg = config.net.clone();
    let mut params = init_params(&net_cfg, net_cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(net_cfg.seed ^ 0x5eed_0f_0a7c4);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut log = Vec::new();
    let mut step = 0;
    for epoch in 0..config.net.epochs {
        net_cfg.learning_rate = config.lr_schedule.rate(config.net.learning_rate, epoch, config.net.epochs);
        order.shuffle(&mut rng);
        let mut sums = [0.0f64; 3];
        let mut batches = 0;
        for chunk in order.chunks(net_cfg.batch_size) {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &train_set[i]).collect();
            let images = stack_images(&batch)?;
            let masks: Vec<BinaryPlane> = batch.iter().map(|s| s.mask.clone()).collect();
            let loss = train_step(&images, &masks, &mut params, &net_cfg)?;
            log.push(LossLogRow { epoch, step, loss });
            sums[0] += loss.l_mask;
            sums[1] += loss.l_cl;
            sums[2] += loss.l_con;
            batches += 1;
            step += 1;
        }
        let b = batches as f64;
        on_epoch(epoch, &LossBreakdown::new(sums[0] / b, sums[1] / b, sums[2] / b));
    }
    Ok((params, log))
}

/// Segmentation probabilities for each sample.
pub fn predict(net: &Network<f32>, samples: &[Sample], batch: usize) -> Result<Vec<Plane<f32>>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch.max(1)) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let (seg, _) = forward(&stack_images(&refs)?, net)?;
        let s = seg.shape();
        for b in 0..s.n {
            out.push(Plane {
                h: s.h,
                w: s.w,
                data: seg.item(b).to_vec(),
            });
        }
    }
    Ok(out)
}

pub fn evaluate(net: &Network<f32>, samples: &[Sample], threshold: f64) -> Result<MetricsReport> {
    let probs = predict(net, samples, 4)?;
    let mut rows = Vec::with_capacity(samples.len());
    for (s, p) in samples.iter().zip(&probs) {
        rows.push(evaluate_pair(&s.id, &p.binarize(threshold as f32), &s.mask)?);
    }
    Ok(MetricsReport { rows })
}

/// Compares prediction masks with ground-truth masks, matched by id.
pub fn evaluate_masks(preds: &[(String, BinaryPlane)], gts: &[(String, BinaryPlane)]) -> Result<MetricsReport> {
    let mut rows = Vec::with_capacity(gts.len());
    for (id, gt) in gts {
        let pred = preds
            .iter()
            .find(|(p, _)| p == id)
            .ok_or_else(|| crate::error::Error::Dataset(format!("no prediction for {id}")))?;
        rows.push(evaluate_pair(id, &pred.1, gt)?);
    }
    Ok(MetricsReport { rows })
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationResult {
    pub row: AblationRow,
    pub report: MetricsReport,
}

pub fn row_config(base: &ExperimentConfig, row: &AblationRow) -> ExperimentConfig {
    let mut cfg = base.clone();
    cfg.net.conv_kind = row.conv_kind;
    cfg.net.loss.use_nc = row.use_nc;
    cfg.net.loss.use_cl = row.use_cl;
    cfg
}

/// Trains and evaluates every configured row on the same corpus and seed.
pub fn run_ablation(
    config: &ExperimentConfig,
    data: &Dataset,
    mut on_row: impl FnMut(&AblationResult),
) -> Result<Vec<AblationResult>> {
    let mut out = Vec::with_capacity(config.ablation_rows.len());
    for row in &config.ablation_rows {
        let cfg = row_config(config, row);
        let (params, _) = train(&cfg, &data.train, |_, _| {})?;
        let report = evaluate(&params.net, &data.test, cfg.threshold)?;
        let result = AblationResult { row: row.clone(), report };
        on_row(&result);
        out.push(result);
    }
    Ok(out)
}

pub fn ablation_tsv(results: &[AblationResult]) -> String {
    let mut out = String::from("row\tconv_kind\tuse_nc\tuse_cl");
    for m in METRIC_NAMES {
        let _ = write!(out, "\t{m}\t{m}_se");
    }
    out.push('\n');
    for r in results {
        let _ = write!(
            out,
            "{}\t{}\t{}\t{}",
            r.row.name,
            r.row.conv_kind,
            u8::from(r.row.use_nc),
            u8::from(r.row.use_cl)
        );
        for (k, _) in METRIC_NAMES.iter().enumerate() {
            let col: Vec<f64> = r.report.rows.iter().map(|m| m.values()[k]).collect();
            let (mean, se) = mean_se(&col);
            let _ = write!(out, "\t{mean:.6}\t{se:.6}");
        }
        out.push('\n');
    }
    out
}

/// Synthesizes the configured corpus in memory.
pub fn synthesize(config: &ExperimentConfig, master_seed: u64) -> Result<Dataset> {
    crate::synthdata::generate_dataset(&config.synth, config.splits, master_seed)
}
