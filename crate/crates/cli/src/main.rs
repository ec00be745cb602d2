use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use pasc::config::{load_config, render_config};
use pasc::experiment::{self, ExperimentConfig};
use pasc::gradcheck::{self, TOLERANCE};
use pasc::net::{load_checkpoint, save_checkpoint};
use pasc::synthdata::{self, Dataset, Sample, Split};

#[derive(Parser)]
#[command(name = "pasc", version, about = "Vessel segmentation with learned strip convolutions")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// `key = value` settings file; missing keys keep their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic corpus into a dataset directory.
    Synth {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on the train split and write checkpoint, loss log and config.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint, or a directory of predicted masks, against a split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, conflicts_with = "pred", required_unless_present = "pred")]
        checkpoint: Option<PathBuf>,
        /// Directory in the dataset layout holding predicted masks.
        #[arg(long)]
        pred: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: String,
        /// Metrics TSV destination; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write probability maps and binarized predictions here.
        #[arg(long, requires = "checkpoint")]
        pred_out: Option<PathBuf>,
    },
    /// Finite-difference check of every analytic gradient.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train and score every ablation row on one corpus.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Existing dataset; synthesized from the seed when absent.
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn resolve(common: &Common) -> pasc::Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(p) => load_config(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.net.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_or_print(out: Option<&Path>, text: &str) -> pasc::Result<()> {
    match out {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir)?;
            }
            fs::write(p, text)?;
        }
        None => print!("{text}"),
    }
    Ok(())
}

fn parse_split(s: &str) -> pasc::Result<Split> {
    Split::parse(s).ok_or_else(|| pasc::Error::Dataset(format!("unknown split `{s}` (train, val, test)")))
}

/// Returns `Ok(false)` when a check ran but did not pass.
fn run(command: Command) -> pasc::Result<bool> {
    match command {
        Command::Synth { common, out } => {
            let cfg = resolve(&common)?;
            let ds = experiment::synthesize(&cfg, cfg.net.seed)?;
            synthdata::write_dataset(&ds, &out)?;
            eprintln!(
                "wrote {} train, {} val, {} test samples to {}",
                ds.train.len(),
                ds.val.len(),
                ds.test.len(),
                out.display()
            );
        }
        Command::Train { common, dataset, out } => {
            let cfg = resolve(&common)?;
            let ds = synthdata::load_dataset(&dataset)?;
            let start = Instant::now();
            let (params, log) = experiment::train(&cfg, &ds.train, |epoch, loss| {
                eprintln!(
                    "epoch {:>3}  loss {:.4}  (mask {:.4} cl {:.4} con {:.4})",
                    epoch, loss.total, loss.l_mask, loss.l_cl, loss.l_con
                );
            })?;
            fs::create_dir_all(&out)?;
            save_checkpoint(&params.net, &out.join("checkpoint.bin"))?;
            fs::write(out.join("losses.tsv"), experiment::loss_log_tsv(&log))?;
            fs::write(out.join("config.txt"), render_config(&cfg))?;
            eprintln!("trained in {:.1}s, wrote {}", start.elapsed().as_secs_f64(), out.display());
        }
        Command::Eval {
            common,
            dataset,
            checkpoint,
            pred,
            split,
            out,
            pred_out,
        } => {
            let cfg = resolve(&common)?;
            let split = parse_split(&split)?;
            let report = match (checkpoint, pred) {
                (Some(ckpt), _) => {
                    let params = load_checkpoint(&ckpt, &cfg.net)?;
                    let ds = synthdata::load_dataset(&dataset)?;
                    let samples = ds.split(split);
                    if let Some(dir) = pred_out {
                        let probs = experiment::predict(&params.net, samples, 4)?;
                        let mut preds = Dataset::default();
                        let target = match split {
                            Split::Train => &mut preds.train,
                            Split::Val => &mut preds.val,
                            Split::Test => &mut preds.test,
                        };
                        for (s, p) in samples.iter().zip(probs) {
                            target.push(Sample {
                                id: s.id.clone(),
                                seed: s.seed,
                                mask: p.binarize(cfg.threshold as f32),
                                image: p,
                            });
                        }
                        synthdata::write_dataset(&preds, &dir)?;
                    }
                    experiment::evaluate(&params.net, samples, cfg.threshold)?
                }
                (None, Some(pred)) => {
                    let gts = synthdata::load_split_masks(&dataset, split)?;
                    let preds = synthdata::load_split_masks(&pred, split)?;
                    experiment::evaluate_masks(&preds, &gts)?
                }
                (None, None) => unreachable!("clap requires --checkpoint or --pred"),
            };
            if report.sentinel_count() > 0 {
                eprintln!("{} sample(s) had an empty mask; asd uses the image diagonal", report.sentinel_count());
            }
            write_or_print(out.as_deref(), &report.to_tsv())?;
        }
        Command::Gradcheck { seed } => {
            let start = Instant::now();
            let reports = gradcheck::run_all(seed)?;
            let mut ok = true;
            println!("check\tchecked\tskipped\tmax_rel_error\tmax_abs_error\tstatus");
            for r in &reports {
                let pass = r.passed(TOLERANCE);
                ok &= pass;
                println!(
                    "{}\t{}\t{}\t{:.3e}\t{:.3e}\t{}",
                    r.name,
                    r.checked,
                    r.skipped,
                    r.max_rel_error,
                    r.max_abs_error,
                    if pass { "ok" } else { "FAIL" }
                );
            }
            eprintln!("{} checks in {:.1}s", reports.len(), start.elapsed().as_secs_f64());
            return Ok(ok);
        }
        Command::Ablate { common, dataset, out } => {
            let cfg = resolve(&common)?;
            let ds = match dataset {
                Some(d) => synthdata::load_dataset(&d)?,
                None => experiment::synthesize(&cfg, cfg.net.seed)?,
            };
            let results = experiment::run_ablation(&cfg, &ds, |r| {
                eprintln!(
                    "{:<12} dice {:.4}  cl_dice {:.4}",
                    r.row.name,
                    r.report.mean("dice").unwrap_or(f64::NAN),
                    r.report.mean("cl_dice").unwrap_or(f64::NAN)
                );
            })?;
            write_or_print(Some(&out), &experiment::ablation_tsv(&results))?;
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
